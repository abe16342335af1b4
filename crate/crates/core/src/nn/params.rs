//! Named parameter registry and the per-forward binding of parameters to a
//! tape.

use std::cell::RefCell;
use std::collections::HashSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Index of a parameter in its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Collects parameter declarations under dotted scopes, without allocating
/// any storage.
#[derive(Debug, Default)]
pub struct ParamBuilder {
    scope: Vec<String>,
    specs: Vec<ParamSpec>,
    names: HashSet<String>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Runs `f` with `name` pushed onto the scope.
    pub fn scope<R>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.scope.push(name.into());
        let out = f(self);
        self.scope.pop();
        out
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, init: Init) -> ParamId {
        let mut full = self.scope.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        assert!(self.names.insert(full.clone()), "duplicate parameter name {full}");
        self.specs.push(ParamSpec {
            name: full,
            shape,
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn finish(self) -> Vec<ParamSpec> {
        self.specs
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
}

/// Parameter values in registry order.
#[derive(Clone, Debug)]
pub struct ParamSet {
    entries: Vec<Param>,
}

impl ParamSet {
    /// Draws initial values. Values are rounded to `f32` so a freshly
    /// initialized model survives a checkpoint round trip unchanged.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = specs
            .iter()
            .map(|s| {
                let mut t = match s.init {
                    Init::Normal(std) => Tensor::randn(s.shape.clone(), std, &mut rng),
                    Init::Const(c) => Tensor::full(s.shape.clone(), c),
                };
                t.round_to_f32();
                Param {
                    name: s.name.clone(),
                    value: Arc::new(t),
                }
            })
            .collect();
        Self { entries }
    }

    pub fn from_tensors(specs: &[ParamSpec], values: Vec<Tensor>) -> Result<Self> {
        if specs.len() != values.len() {
            return Err(Error::invalid(
                "params",
                format!("{} specs but {} values", specs.len(), values.len()),
            ));
        }
        let entries = specs
            .iter()
            .zip(values)
            .map(|(s, v)| {
                if v.shape() != s.shape.as_slice() {
                    return Err(Error::shape("params", &s.shape, v.shape()));
                }
                Ok(Param {
                    name: s.name.clone(),
                    value: Arc::new(v),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|p| p.name == name).map(|p| &*p.value)
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[index].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.get(id).shape(), value.shape(), "parameter shape");
        self.entries[id.0].value = Arc::new(value);
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|p| (*p.value).clone()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    pub fn round_to_f32(&mut self) {
        for i in 0..self.entries.len() {
            self.tensor_mut(i).round_to_f32();
        }
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a.value.max_abs_diff(&b.value))
            .fold(0.0, f64::max)
    }
}

enum Source<'t> {
    Set {
        params: &'t ParamSet,
        bound: RefCell<Vec<Option<Var<'t>>>>,
        trainable: bool,
    },
    Vars(Vec<Var<'t>>),
}

/// One forward pass: a tape, the parameters bound to it, and the dropout
/// mode.
pub struct Session<'t> {
    tape: &'t Tape,
    source: Source<'t>,
    dropout_rng: Option<RefCell<ChaCha8Rng>>,
}

impl<'t> Session<'t> {
    /// Parameters become trainable leaves on first use. Dropout is off.
    pub fn new(tape: &'t Tape, params: &'t ParamSet) -> Self {
        Self::over_set(tape, params, true)
    }

    /// Parameters are constants; no gradients are tracked.
    pub fn inference(tape: &'t Tape, params: &'t ParamSet) -> Self {
        Self::over_set(tape, params, false)
    }

    fn over_set(tape: &'t Tape, params: &'t ParamSet, trainable: bool) -> Self {
        Self {
            tape,
            source: Source::Set {
                params,
                bound: RefCell::new(vec![None; params.len()]),
                trainable,
            },
            dropout_rng: None,
        }
    }

    /// Parameters are already on the tape, in registry order.
    pub fn from_vars(tape: &'t Tape, vars: Vec<Var<'t>>) -> Self {
        Self {
            tape,
            source: Source::Vars(vars),
            dropout_rng: None,
        }
    }

    /// Enables dropout with masks drawn from a stream seeded by `seed`.
    pub fn with_dropout(mut self, seed: u64) -> Self {
        self.dropout_rng = Some(RefCell::new(ChaCha8Rng::seed_from_u64(seed)));
        self
    }

    pub fn training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        match &self.source {
            Source::Vars(v) => v[id.0],
            Source::Set {
                params,
                bound,
                trainable,
            } => {
                let mut bound = bound.borrow_mut();
                *bound[id.0].get_or_insert_with(|| {
                    let value = Arc::clone(&params.entries[id.0].value);
                    if *trainable {
                        self.tape.leaf_shared(value)
                    } else {
                        self.tape.constant_shared(value)
                    }
                })
            }
        }
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Inverted dropout; identity outside training or at rate 0.
    pub fn dropout(&self, x: Var<'t>, rate: f64) -> Result<Var<'t>> {
        let Some(rng) = &self.dropout_rng else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::invalid("dropout", format!("rate {rate} must be < 1")));
        }
        let keep = 1.0 - rate;
        let mut rng = rng.borrow_mut();
        let mask = Tensor::from_fn(x.shape(), |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        x.mul(&self.tape.constant(mask))
    }

    /// Gradients per registry entry after `backward`; `None` for parameters
    /// the loss never touched.
    pub fn param_grads(&self) -> Vec<Option<Tensor>> {
        match &self.source {
            Source::Vars(v) => v.iter().map(|v| v.grad()).collect(),
            Source::Set { bound, .. } => bound.borrow().iter().map(|b| b.and_then(|v| v.grad())).collect(),
        }
    }
}

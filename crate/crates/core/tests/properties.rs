use proptest::prelude::*;

use grrcoca::data::{
    check_layout, decode_caption, encode_caption, ByteTokenizer, TokenLayout, BOS, CLS, EOS, IGNORED_TARGETS,
    PAD,
};
use grrcoca::nn::{l2_normalize, Norm, NormKind, ParamBuilder, ParamSet, RopeConfig, Session};
use grrcoca::objectives::contrastive_loss;
use grrcoca::tensor::kernels::{gemm, gemm_sequential};
use grrcoca::tensor::{Tape, Tensor};
use grrcoca::training::{
    clip_gradients, global_norm, EarlyStopConfig, EarlyStopState, EpochDecision, SchedulerState,
};

fn norm_output(kind: NormKind, x: &Tensor) -> Tensor {
    let mut pb = ParamBuilder::new();
    let norm = Norm::new(&mut pb, "n", kind, x.shape()[1], 0.0);
    let params = ParamSet::init(&pb.finish(), 0);
    let tape = Tape::new();
    let s = Session::inference(&tape, &params);
    (*norm.forward(&s, tape.constant(x.clone())).unwrap().value()).clone()
}

fn rows(n: usize, d: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, n * d)
        .prop_filter("rows must not be constant", move |v| {
            v.chunks(d).all(|r| r.iter().any(|x| (x - r[0]).abs() > 1e-3))
        })
        .prop_map(move |v| Tensor::new(vec![n, d], v).unwrap())
}

/// `q·k` after rotating `q` to position `m` and `k` to position `n`.
fn rotated_dot(q: &Tensor, k: &Tensor, m: usize, n: usize) -> f64 {
    let hd = q.numel();
    let rope = RopeConfig::new(hd, 10_000.0).unwrap();
    let tape = Tape::new();
    let rot = |t: &Tensor, p: usize| {
        let x = tape.constant(t.clone().reshape(vec![1, 1, hd]).unwrap());
        (*rope.apply(x, &[p]).unwrap().value()).clone()
    };
    let (a, b) = (rot(q, m), rot(k, n));
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn layout_invariant_holds(text in "[!-~][ -~]{0,39}", ctx in 4usize..24) {
        let layout = encode_caption(&text, &ByteTokenizer, ctx).unwrap();
        check_layout(layout.ids(), ctx).unwrap();
        let ids = layout.ids();
        prop_assert_eq!(ids.len(), ctx + 1);
        prop_assert_eq!(ids[0], BOS);
        prop_assert_eq!(ids[ctx - 1], CLS);
        prop_assert_eq!(ids[ctx], PAD);
        let body = layout.body().len();
        prop_assert!(body <= TokenLayout::capacity(ctx));
        prop_assert_eq!(ids[body + 1], EOS);
        prop_assert!(ids[body + 2..ctx - 1].iter().all(|&t| t == PAD));
        let mask = layout.loss_mask();
        for (&t, &m) in layout.targets().iter().zip(&mask) {
            prop_assert_eq!(m, !IGNORED_TARGETS.contains(&t));
        }
        let expect: String = text.trim().chars().take(TokenLayout::capacity(ctx)).collect();
        prop_assert_eq!(decode_caption(ids, &ByteTokenizer), expect);
    }

    #[test]
    fn rms_norm_is_scale_invariant(x in rows(3, 8), alpha in 0.01f64..100.0) {
        let a = norm_output(NormKind::Rms, &x);
        let b = norm_output(NormKind::Rms, &x.map(|v| alpha * v));
        prop_assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn layer_norm_is_shift_and_scale_invariant(x in rows(3, 8), alpha in 0.01f64..100.0, c in -50.0f64..50.0) {
        let a = norm_output(NormKind::Layer, &x);
        let b = norm_output(NormKind::Layer, &x.map(|v| alpha * v + c));
        prop_assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn rope_depends_only_on_offset(
        q in prop::collection::vec(-1.0f64..1.0, 8),
        k in prop::collection::vec(-1.0f64..1.0, 8),
        m in 0usize..64, n in 0usize..64, shift in 0usize..512,
    ) {
        let q = Tensor::new(vec![8], q).unwrap();
        let k = Tensor::new(vec![8], k).unwrap();
        let base = rotated_dot(&q, &k, m, n);
        prop_assert!((base - rotated_dot(&q, &k, m + shift, n + shift)).abs() < 1e-9);
    }

    #[test]
    fn contrastive_loss_is_permutation_invariant(
        x in rows(5, 4), y in rows(5, 4), perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
        temp in 0.05f64..2.0,
    ) {
        let loss = |x: &Tensor, y: &Tensor| {
            let tape = Tape::new();
            let xi = l2_normalize(tape.constant(x.clone())).unwrap();
            let yi = l2_normalize(tape.constant(y.clone())).unwrap();
            let t = tape.constant(Tensor::scalar(temp));
            contrastive_loss(xi, yi, t).unwrap().value().item().unwrap()
        };
        let permute = |t: &Tensor| {
            let d = t.shape()[1];
            let data = perm.iter().flat_map(|&i| t.data()[i * d..(i + 1) * d].to_vec()).collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        };
        prop_assert!((loss(&x, &y) - loss(&permute(&x), &permute(&y))).abs() < 1e-12);
    }

    #[test]
    fn clipped_norm_is_bounded(v in prop::collection::vec(-100.0f64..100.0, 1..40), max in 0.1f64..5.0) {
        let n = v.len();
        let mut grads = vec![Tensor::new(vec![n], v).unwrap(), Tensor::ones(vec![2])];
        let before = global_norm(&grads);
        clip_gradients(&mut grads, max);
        let after = global_norm(&grads);
        prop_assert!(after <= max + 1e-9);
        if before <= max {
            prop_assert_eq!(after, before);
        }
    }

    #[test]
    fn schedule_stays_in_bounds(warmup in 1u64..100, cycle in 1u64..100, step in 0u64..1000) {
        let s = SchedulerState::new(warmup, 1e-3, 1e-5, cycle).unwrap();
        let lr = s.lr_at(step);
        prop_assert!(lr <= 1e-3 + 1e-18);
        if step >= warmup {
            prop_assert!(lr >= 1e-5 - 1e-18);
            prop_assert!(s.t_cur(step).unwrap() < cycle);
        }
        prop_assert_eq!(s.lr_at(warmup), 1e-3);
    }

    #[test]
    fn stopper_respects_patience(losses in prop::collection::vec(0.0f64..1.0, 1..60)) {
        let cfg = EarlyStopConfig::default();
        let mut st = EarlyStopState::new(cfg).unwrap();
        let mut flat = 0;
        for l in losses {
            match st.epoch_end(l).unwrap() {
                EpochDecision::Continue { improved: true } => flat = 0,
                EpochDecision::Stop => {
                    prop_assert_eq!(st.epochs_since_improve, cfg.patience);
                    break;
                }
                _ => {
                    flat += 1;
                    prop_assert!(flat < cfg.patience);
                }
            }
            prop_assert!(st.epochs_since_improve <= cfg.patience);
            prop_assert!(st.resets_done <= cfg.patience / cfg.soft_window);
        }
    }

    #[test]
    fn parallel_gemm_matches_sequential(m in 1usize..70, k in 1usize..70, n in 1usize..70, seed in 0u64..1000) {
        let a: Vec<f64> = (0..m * k).map(|i| ((i as u64 ^ seed) as f64 * 0.013).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i as u64 + seed) as f64 * 0.029).cos()).collect();
        prop_assert_eq!(gemm(&a, &b, m, k, n), gemm_sequential(&a, &b, m, k, n));
    }
}

#[test]
fn rope_at_position_zero_is_identity() {
    let rope = RopeConfig::new(6, 10_000.0).unwrap();
    let tape = Tape::new();
    let x = Tensor::from_fn(vec![1, 2, 6], |i| i as f64 - 2.5);
    let y = rope.apply(tape.constant(x.clone()), &[0]).unwrap();
    assert_eq!(*y.value(), x);
}

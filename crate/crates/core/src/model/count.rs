use std::collections::BTreeMap;

use super::coca::CoCaModel;
use super::config::ModelConfig;
use crate::Result;

/// Trainable scalars per named parameter, in registry order.
#[derive(Clone, Debug)]
pub struct ParamCount {
    pub entries: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamCount {
    pub fn of(model: &CoCaModel) -> Self {
        let entries: Vec<(String, usize)> = model
            .specs()
            .iter()
            .map(|s| (s.name.clone(), s.numel()))
            .collect();
        let total = entries.iter().map(|(_, n)| n).sum();
        Self { entries, total }
    }

    /// Totals per top-level submodel (`encoder`, `unimodal`, ...).
    pub fn groups(&self) -> BTreeMap<String, usize> {
        let mut groups = BTreeMap::new();
        for (name, n) in &self.entries {
            let head = name.split('.').next().unwrap_or(name).to_string();
            *groups.entry(head).or_insert(0) += n;
        }
        groups
    }
}

/// Counts parameters from the configuration alone; nothing is allocated
/// beyond the registry.
pub fn count_parameters(config: &ModelConfig) -> Result<ParamCount> {
    Ok(ParamCount::of(&CoCaModel::new(config)?))
}

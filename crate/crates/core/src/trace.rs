//! Activation taps for the alignment harness.
//!
//! Forward passes can record the activation after each sub-module. Prefill
//! records one n x d matrix per (layer, module); decode records one row per
//! step, which the trace stacks so the two execution paths diff directly.

use crate::numerics::Matrix;
use std::collections::BTreeMap;

/// Sub-module tap points, in front-to-back order within a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ModuleTag {
    QkNorm,
    Rope,
    AttnCore,
    GroupNorm,
    Gate,
    MlpMoe,
    Residual,
}

impl ModuleTag {
    pub fn name(&self) -> &'static str {
        match self {
            ModuleTag::QkNorm => "qk_norm",
            ModuleTag::Rope => "rope",
            ModuleTag::AttnCore => "attn_core",
            ModuleTag::GroupNorm => "group_norm",
            ModuleTag::Gate => "gate",
            ModuleTag::MlpMoe => "mlp_moe",
            ModuleTag::Residual => "residual",
        }
    }
}

/// Collected activations keyed by (layer, module). Rows accumulate across
/// decode steps.
#[derive(Debug, Default)]
pub struct ActivationTrace {
    entries: BTreeMap<(usize, ModuleTag), Matrix>,
}

impl ActivationTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, layer: usize, tag: ModuleTag, value: &Matrix) {
        match self.entries.get_mut(&(layer, tag)) {
            Some(existing) => existing.append_rows(value),
            None => {
                self.entries.insert((layer, tag), value.clone());
            }
        }
    }

    pub fn get(&self, layer: usize, tag: ModuleTag) -> Option<&Matrix> {
        self.entries.get(&(layer, tag))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, ModuleTag), &Matrix)> {
        self.entries.iter()
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut ls: Vec<usize> = self.entries.keys().map(|(l, _)| *l).collect();
        ls.dedup();
        ls
    }
}

//! Parameter-efficient fine-tuning strategies as freeze-mask transformations
//! plus structural additions (adapters, prompts).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Binder, ParamGroup};
use crate::tensor::{Element, Tensor};
use crate::vit::{insert_linear, prompt_name, uniform, AdapterPlacement, VitModel, SAMPLE_HEAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeftMethod {
    Full,
    LinearProbe,
    Bitfit,
    Adapter,
    Vpt,
    /// Prompts and adapters together.
    VptAdapter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterPosition {
    /// Applied to the output (or input) of the MLP sub-layer.
    Sequential,
    /// Added alongside the MLP sub-layer.
    Parallel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterSite {
    Pre,
    Post,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub mid_dim: usize,
    /// Blocks receiving an adapter; `None` means the first `min(7, L)`.
    pub layers: Option<Vec<usize>>,
    pub position: AdapterPosition,
    pub site: AdapterSite,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            mid_dim: 8,
            layers: None,
            position: AdapterPosition::Sequential,
            site: AdapterSite::Post,
        }
    }
}

impl AdapterConfig {
    pub fn resolved_layers(&self, depth: usize) -> Vec<usize> {
        self.layers
            .clone()
            .unwrap_or_else(|| (0..depth.min(7)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VptConfig {
    /// Base prompt count `N` at layer 0.
    pub prompts: usize,
    /// Per-layer decrement.
    pub tau_step: usize,
    /// Number of leading layers that receive prompts; `None` means all.
    pub layers: Option<usize>,
}

impl Default for VptConfig {
    fn default() -> Self {
        VptConfig {
            prompts: 10,
            tau_step: 0,
            layers: None,
        }
    }
}

impl VptConfig {
    pub fn counts(&self, depth: usize) -> Vec<usize> {
        let active = self.layers.unwrap_or(depth).min(depth);
        let mut counts = prompt_schedule(self.prompts, self.tau_step, depth);
        counts[active..].iter_mut().for_each(|c| *c = 0);
        counts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeftConfig {
    pub method: PeftMethod,
    pub adapter: AdapterConfig,
    pub vpt: VptConfig,
    pub combine_bitfit: bool,
}

impl Default for PeftConfig {
    fn default() -> Self {
        PeftConfig {
            method: PeftMethod::Vpt,
            adapter: AdapterConfig::default(),
            vpt: VptConfig::default(),
            combine_bitfit: false,
        }
    }
}

impl PeftConfig {
    pub fn uses_adapters(&self) -> bool {
        matches!(self.method, PeftMethod::Adapter | PeftMethod::VptAdapter)
    }

    pub fn uses_prompts(&self) -> bool {
        matches!(self.method, PeftMethod::Vpt | PeftMethod::VptAdapter)
    }

    pub fn validate(&self, hidden_dim: usize, depth: usize) -> Result<()> {
        if self.uses_adapters() {
            let d = self.adapter.mid_dim;
            if d == 0 || d > hidden_dim {
                return Err(Error::config(
                    "peft.adapter.mid_dim",
                    format!("must be in 1..={hidden_dim}"),
                ));
            }
            if let Some(bad) = self
                .adapter
                .resolved_layers(depth)
                .into_iter()
                .find(|&l| l >= depth)
            {
                return Err(Error::config(
                    "peft.adapter.layers",
                    format!("layer {bad} outside [0, {depth})"),
                ));
            }
        }
        Ok(())
    }
}

/// Per-layer prompt counts `n_i = max(N - tau_step * i, 0)`.
pub fn prompt_schedule(base: usize, tau_step: usize, layers: usize) -> Vec<usize> {
    (0..layers)
        .map(|i| base.saturating_sub(tau_step.saturating_mul(i)))
        .collect()
}

/// What `apply_method` left trainable and added.
#[derive(Clone, Debug, PartialEq)]
pub struct AppliedMethod {
    pub prompt_counts: Vec<usize>,
    pub adapter_layers: Vec<usize>,
    pub tunable: Vec<String>,
}

fn is_linear_bias(name: &str) -> bool {
    name.starts_with("vit.") && name.ends_with(".bias")
}

/// Adds the method's structures (missing ones only) and rewrites the freeze
/// mask. Existing parameter values are never modified. Parameters under
/// `proxy.` belong to the metric loss and stay trainable.
pub fn apply_method<E: Element>(
    model: &mut VitModel<E>,
    cfg: &PeftConfig,
    rng: &mut impl Rng,
) -> Result<AppliedMethod> {
    let vit = model.config().clone();
    cfg.validate(vit.hidden_dim, vit.layers)?;
    let d = vit.hidden_dim;

    let mut adapter_layers = Vec::new();
    if cfg.uses_adapters() {
        adapter_layers = cfg.adapter.resolved_layers(vit.layers);
        adapter_layers.sort_unstable();
        adapter_layers.dedup();
        let mid = cfg.adapter.mid_dim;
        for &layer in &adapter_layers {
            let (down, up) = {
                let (dn, un) = model.adapter_names(layer);
                (dn.clone(), un.clone())
            };
            if !model.store.contains(&down.weight) {
                let bound = (6.0 / d as f64).sqrt();
                let w = uniform(rng, &[d, mid], bound)?;
                insert_linear(&mut model.store, &down, w, ParamGroup::Encoder)?;
                insert_linear(
                    &mut model.store,
                    &up,
                    Tensor::zeros(&[mid, d])?,
                    ParamGroup::Encoder,
                )?;
            }
            model.adapters[layer] = Some(AdapterPlacement {
                position: cfg.adapter.position,
                site: cfg.adapter.site,
            });
        }
    }

    if cfg.uses_prompts() {
        let r = vit.prompt_init_range();
        for (layer, &n) in cfg.vpt.counts(vit.layers).iter().enumerate() {
            let name = prompt_name(layer);
            if n > 0 && !model.store.contains(&name) {
                let p = uniform(rng, &[n, d], r)?;
                model.store.insert(name, p, ParamGroup::Encoder);
            }
        }
    }

    let unfreeze_biases = cfg.method == PeftMethod::Bitfit || cfg.combine_bitfit;
    let head_prefix = format!("{SAMPLE_HEAD}.");
    for (name, p) in model.store.iter_mut() {
        p.trainable = match cfg.method {
            PeftMethod::Full => true,
            _ => {
                name.starts_with(&head_prefix)
                    || name.starts_with("proxy.")
                    || (unfreeze_biases && is_linear_bias(name))
                    || (cfg.uses_adapters() && name.starts_with("adapters."))
                    || (cfg.uses_prompts() && name.starts_with("prompts."))
            }
        };
    }

    Ok(AppliedMethod {
        prompt_counts: model.prompt_counts(),
        adapter_layers,
        tunable: model.store.trainable_names(),
    })
}

/// `Up(ReLU(Down(x)))`.
pub fn adapter_delta<E: Element>(
    model: &VitModel<E>,
    b: &mut Binder<E>,
    layer: usize,
    x: Var,
) -> Result<Var> {
    let (down, up) = model.adapter_names(layer);
    let h = model.linear(b, x, down)?;
    let h = b.graph.relu(h)?;
    model.linear(b, h, up)
}

/// `x + Up(ReLU(Down(x)))`.
pub fn adapter_forward<E: Element>(
    model: &VitModel<E>,
    b: &mut Binder<E>,
    layer: usize,
    x: Var,
) -> Result<Var> {
    let delta = adapter_delta(model, b, layer, x)?;
    b.graph.add(x, delta)
}

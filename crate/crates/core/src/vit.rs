//! Vision Transformer with per-layer prompt slots and a LayerNorm + linear head.
//!
//! Blocks are pre-norm: `x + MHSA(LN1(x))`, then `x + MLP(LN2(x))` with GELU.
//! Prompts for layer `i` are appended after the token rows at the block input;
//! the block outputs at those rows are discarded before layer `i + 1`, whose own
//! prompts take their place. The CLS token always sits at row 0.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::{Var, L2_NORM_EPS, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::{Binder, ParamGroup, ParamStore};
use crate::peft::{AdapterPosition, AdapterSite};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub head_out_dim: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image_size: 32,
            patch_size: 4,
            layers: 6,
            hidden_dim: 64,
            heads: 4,
            mlp_ratio: 4,
            head_out_dim: 64,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.image_size", self.image_size),
            ("model.patch_size", self.patch_size),
            ("model.layers", self.layers),
            ("model.hidden_dim", self.hidden_dim),
            ("model.heads", self.heads),
            ("model.mlp_ratio", self.mlp_ratio),
            ("model.head_out_dim", self.head_out_dim),
        ];
        for (path, v) in positive {
            if v == 0 {
                return Err(Error::config(path, "must be positive"));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(
                "model.patch_size",
                format!("must divide image_size {}", self.image_size),
            ));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::config(
                "model.heads",
                format!("must divide hidden_dim {}", self.hidden_dim),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn seq_len(&self) -> usize {
        self.n_patches() + 1
    }

    /// Half-width of the uniform prompt initialization.
    pub fn prompt_init_range(&self) -> f64 {
        (6.0 / (self.hidden_dim + self.patch_dim()) as f64).sqrt()
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LinearNames {
    pub weight: String,
    pub bias: String,
}

impl LinearNames {
    pub fn new(prefix: &str) -> Self {
        LinearNames {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct NormNames {
    pub gamma: String,
    pub beta: String,
}

impl NormNames {
    pub fn new(prefix: &str) -> Self {
        NormNames {
            gamma: format!("{prefix}.gamma"),
            beta: format!("{prefix}.beta"),
        }
    }
}

#[derive(Clone, Debug)]
struct BlockNames {
    ln1: NormNames,
    q: LinearNames,
    k: LinearNames,
    v: LinearNames,
    o: LinearNames,
    ln2: NormNames,
    fc1: LinearNames,
    fc2: LinearNames,
    adapter_down: LinearNames,
    adapter_up: LinearNames,
}

impl BlockNames {
    fn new(i: usize) -> Self {
        let p = format!("vit.blocks.{i}");
        BlockNames {
            ln1: NormNames::new(&format!("{p}.ln1")),
            q: LinearNames::new(&format!("{p}.attn.q")),
            k: LinearNames::new(&format!("{p}.attn.k")),
            v: LinearNames::new(&format!("{p}.attn.v")),
            o: LinearNames::new(&format!("{p}.attn.o")),
            ln2: NormNames::new(&format!("{p}.ln2")),
            fc1: LinearNames::new(&format!("{p}.mlp.fc1")),
            fc2: LinearNames::new(&format!("{p}.mlp.fc2")),
            adapter_down: LinearNames::new(&format!("adapters.{i}.down")),
            adapter_up: LinearNames::new(&format!("adapters.{i}.up")),
        }
    }
}

/// Names of a LayerNorm + linear projection head under `prefix`.
#[derive(Clone, Debug)]
pub struct HeadNames {
    pub(crate) ln: NormNames,
    pub(crate) proj: LinearNames,
}

impl HeadNames {
    pub fn new(prefix: &str) -> Self {
        HeadNames {
            ln: NormNames::new(&format!("{prefix}.ln")),
            proj: LinearNames::new(&format!("{prefix}.proj")),
        }
    }

    pub fn names(&self) -> Vec<String> {
        vec![
            self.ln.gamma.clone(),
            self.ln.beta.clone(),
            self.proj.weight.clone(),
            self.proj.bias.clone(),
        ]
    }
}

pub const SAMPLE_HEAD: &str = "head";

pub fn prompt_name(layer: usize) -> String {
    format!("prompts.{layer}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct AdapterPlacement {
    pub position: AdapterPosition,
    pub site: AdapterSite,
}

#[derive(Clone, Debug)]
pub struct VitModel<E: Element = f32> {
    config: VitConfig,
    pub store: ParamStore<E>,
    pub(crate) adapters: Vec<Option<AdapterPlacement>>,
    blocks: Vec<BlockNames>,
    prompt_names: Vec<String>,
    sample_head: HeadNames,
    patch_embed: LinearNames,
}

pub(crate) fn xavier<E: Element>(
    rng: &mut impl Rng,
    fan_in: usize,
    fan_out: usize,
) -> Result<Tensor<E>> {
    uniform(
        rng,
        &[fan_in, fan_out],
        (6.0 / (fan_in + fan_out) as f64).sqrt(),
    )
}

pub(crate) fn uniform<E: Element>(
    rng: &mut impl Rng,
    shape: &[usize],
    r: f64,
) -> Result<Tensor<E>> {
    let dist = Uniform::new_inclusive(-r, r);
    Tensor::from_fn(shape, |_| E::from_f64(dist.sample(rng)))
}

pub(crate) fn normal<E: Element>(
    rng: &mut impl Rng,
    shape: &[usize],
    std: f64,
) -> Result<Tensor<E>> {
    let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidTensor(e.to_string()))?;
    Tensor::from_fn(shape, |_| E::from_f64(dist.sample(rng)))
}

pub(crate) fn insert_linear<E: Element>(
    store: &mut ParamStore<E>,
    names: &LinearNames,
    weight: Tensor<E>,
    group: ParamGroup,
) -> Result<()> {
    let out = weight.shape()[1];
    store.insert(names.weight.clone(), weight, group);
    store.insert(names.bias.clone(), Tensor::zeros(&[out])?, group);
    Ok(())
}

pub(crate) fn insert_norm<E: Element>(
    store: &mut ParamStore<E>,
    names: &NormNames,
    dim: usize,
    group: ParamGroup,
) -> Result<()> {
    store.insert(names.gamma.clone(), Tensor::full(&[dim], E::one())?, group);
    store.insert(names.beta.clone(), Tensor::zeros(&[dim])?, group);
    Ok(())
}

/// Registers a fresh LayerNorm + linear head under `prefix`.
pub fn insert_head<E: Element>(
    store: &mut ParamStore<E>,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
    rng: &mut impl Rng,
    group: ParamGroup,
) -> Result<HeadNames> {
    let names = HeadNames::new(prefix);
    insert_norm(store, &names.ln, in_dim, group)?;
    insert_linear(store, &names.proj, xavier(rng, in_dim, out_dim)?, group)?;
    Ok(names)
}

/// Patch matrix `N × (k·k·3)`; patches in raster order, each flattened as
/// (row, column, channel).
pub fn extract_patches<E: Element>(image: &Image, config: &VitConfig) -> Result<Tensor<E>> {
    if image.height != config.image_size || image.width != config.image_size {
        return Err(Error::Data(format!(
            "image is {}x{}, model expects {}x{}",
            image.height, image.width, config.image_size, config.image_size
        )));
    }
    let k = config.patch_size;
    let grid = config.grid();
    let mut data = Vec::with_capacity(config.n_patches() * config.patch_dim());
    for py in 0..grid {
        for px in 0..grid {
            for dy in 0..k {
                let row = (py * k + dy) * image.width;
                let start = (row + px * k) * 3;
                data.extend(
                    image.data[start..start + k * 3]
                        .iter()
                        .map(|&v| E::from_f64(v as f64)),
                );
            }
        }
    }
    Tensor::new(&[config.n_patches(), config.patch_dim()], data)
}

impl<E: Element> VitModel<E> {
    /// Randomly initialized backbone plus the sample head.
    pub fn new(config: VitConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let hidden = d * config.mlp_ratio;
        let mut store = ParamStore::new();
        let enc = ParamGroup::Encoder;
        let patch_embed = LinearNames::new("vit.patch_embed");
        insert_linear(
            &mut store,
            &patch_embed,
            xavier(rng, config.patch_dim(), d)?,
            enc,
        )?;
        store.insert("vit.cls_token", normal(rng, &[1, d], 0.02)?, enc);
        store.insert(
            "vit.pos_embed",
            normal(rng, &[config.seq_len(), d], 0.02)?,
            enc,
        );
        let blocks: Vec<BlockNames> = (0..config.layers).map(BlockNames::new).collect();
        for b in &blocks {
            insert_norm(&mut store, &b.ln1, d, enc)?;
            for lin in [&b.q, &b.k, &b.v, &b.o] {
                insert_linear(&mut store, lin, xavier(rng, d, d)?, enc)?;
            }
            insert_norm(&mut store, &b.ln2, d, enc)?;
            insert_linear(&mut store, &b.fc1, xavier(rng, d, hidden)?, enc)?;
            insert_linear(&mut store, &b.fc2, xavier(rng, hidden, d)?, enc)?;
        }
        let sample_head = insert_head(&mut store, SAMPLE_HEAD, d, config.head_out_dim, rng, enc)?;
        store.iter_mut().for_each(|(_, p)| p.trainable = true);
        Ok(VitModel {
            prompt_names: (0..config.layers).map(prompt_name).collect(),
            adapters: vec![None; config.layers],
            config,
            store,
            blocks,
            sample_head,
            patch_embed,
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    pub fn sample_head(&self) -> &HeadNames {
        &self.sample_head
    }

    /// Whether a block carries an adapter.
    pub fn has_adapter(&self, layer: usize) -> bool {
        self.adapters.get(layer).is_some_and(|a| a.is_some())
    }

    pub(crate) fn adapter_names(&self, layer: usize) -> (&LinearNames, &LinearNames) {
        let b = &self.blocks[layer];
        (&b.adapter_down, &b.adapter_up)
    }

    /// Encoder prompt count per layer, from the registered prompt tensors.
    pub fn prompt_counts(&self) -> Vec<usize> {
        self.prompt_names
            .iter()
            .map(|n| self.store.get(n).map_or(0, |p| p.value.shape()[0]))
            .collect()
    }

    /// Leaves for the encoder prompts of every layer.
    pub fn encoder_prompts(&self, b: &mut Binder<E>) -> Result<Vec<Option<Var>>> {
        self.prompt_names
            .iter()
            .map(|n| {
                if self.store.contains(n) {
                    b.param(&self.store, n).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect()
    }

    pub fn cast<F: Element>(&self) -> VitModel<F> {
        VitModel {
            config: self.config.clone(),
            store: self.store.cast(),
            adapters: self.adapters.clone(),
            blocks: self.blocks.clone(),
            prompt_names: self.prompt_names.clone(),
            sample_head: self.sample_head.clone(),
            patch_embed: self.patch_embed.clone(),
        }
    }

    pub(crate) fn linear(&self, b: &mut Binder<E>, x: Var, names: &LinearNames) -> Result<Var> {
        let w = b.param(&self.store, &names.weight)?;
        let bias = b.param(&self.store, &names.bias)?;
        let y = b.graph.matmul(x, w)?;
        b.graph.add(y, bias)
    }

    fn norm(&self, b: &mut Binder<E>, x: Var, names: &NormNames) -> Result<Var> {
        let g = b.param(&self.store, &names.gamma)?;
        let beta = b.param(&self.store, &names.beta)?;
        b.graph.layer_norm(x, g, beta, LAYER_NORM_EPS)
    }

    /// Token sequence `(N + 1) × D`: CLS row then projected patches, plus position embeddings.
    pub fn patchify(&self, b: &mut Binder<E>, image: &Image) -> Result<Var> {
        let patches = b.graph.constant(extract_patches(image, &self.config)?);
        let proj = self.linear(b, patches, &self.patch_embed)?;
        let cls = b.param(&self.store, "vit.cls_token")?;
        let seq = b.graph.concat(&[cls, proj], 0)?;
        let pos = b.param(&self.store, "vit.pos_embed")?;
        b.graph.add(seq, pos)
    }

    /// Multi-head self-attention; also returns the per-head attention matrices.
    fn attention(&self, b: &mut Binder<E>, names: &BlockNames, x: Var) -> Result<(Var, Vec<Var>)> {
        let q = self.linear(b, x, &names.q)?;
        let k = self.linear(b, x, &names.k)?;
        let v = self.linear(b, x, &names.v)?;
        let heads = self.config.heads;
        let dh = self.config.hidden_dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    b.graph.slice(q, 1, cols.clone())?,
                    b.graph.slice(k, 1, cols.clone())?,
                    b.graph.slice(v, 1, cols)?,
                )
            };
            let kt = b.graph.transpose(kh)?;
            let scores = b.graph.matmul(qh, kt)?;
            let scores = b.graph.scale(scores, scale)?;
            let attn = b.graph.softmax(scores, 1)?;
            probs.push(attn);
            outs.push(b.graph.matmul(attn, vh)?);
        }
        let cat = if heads == 1 {
            outs[0]
        } else {
            b.graph.concat(&outs, 1)?
        };
        Ok((self.linear(b, cat, &names.o)?, probs))
    }

    fn mlp(&self, b: &mut Binder<E>, names: &BlockNames, x: Var) -> Result<Var> {
        let h = self.linear(b, x, &names.fc1)?;
        let h = b.graph.gelu(h)?;
        self.linear(b, h, &names.fc2)
    }

    pub(crate) fn block_with_attention(
        &self,
        b: &mut Binder<E>,
        layer: usize,
        x: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let names = &self.blocks[layer];
        let h = self.norm(b, x, &names.ln1)?;
        let (a, probs) = self.attention(b, names, h)?;
        let x1 = b.graph.add(x, a)?;
        let u = self.norm(b, x1, &names.ln2)?;
        let out = match self.adapters[layer] {
            None => self.mlp(b, names, u)?,
            Some(AdapterPlacement {
                position: AdapterPosition::Sequential,
                site: AdapterSite::Pre,
            }) => {
                let u2 = crate::peft::adapter_forward(self, b, layer, u)?;
                self.mlp(b, names, u2)?
            }
            Some(AdapterPlacement {
                position: AdapterPosition::Sequential,
                site: AdapterSite::Post,
            }) => {
                let m = self.mlp(b, names, u)?;
                crate::peft::adapter_forward(self, b, layer, m)?
            }
            Some(AdapterPlacement {
                position: AdapterPosition::Parallel,
                site,
            }) => {
                let m = self.mlp(b, names, u)?;
                let input = if site == AdapterSite::Pre { u } else { x1 };
                let delta = crate::peft::adapter_delta(self, b, layer, input)?;
                b.graph.add(m, delta)?
            }
        };
        Ok((b.graph.add(x1, out)?, probs))
    }

    pub fn block(&self, b: &mut Binder<E>, layer: usize, x: Var) -> Result<Var> {
        Ok(self.block_with_attention(b, layer, x)?.0)
    }

    /// Runs all blocks with `prompts[i]` appended at layer `i`; returns the
    /// final CLS row `1 × D`.
    pub fn encode(&self, b: &mut Binder<E>, tokens: Var, prompts: &[Option<Var>]) -> Result<Var> {
        let d = self.config.hidden_dim;
        if prompts.len() != self.config.layers {
            return Err(Error::InvalidTensor(format!(
                "encode: {} prompt slots for {} layers",
                prompts.len(),
                self.config.layers
            )));
        }
        let seq = b.graph.shape(tokens).to_vec();
        if seq.len() != 2 || seq[1] != d {
            return Err(Error::ShapeMismatch {
                kernel: "encode",
                lhs: seq,
                rhs: vec![self.config.seq_len(), d],
            });
        }
        let n_tokens = seq[0];
        let mut x = tokens;
        for (layer, prompt) in prompts.iter().enumerate() {
            let input = match prompt {
                Some(p) => {
                    let ps = b.graph.shape(*p);
                    if ps.len() != 2 || ps[1] != d {
                        return Err(Error::ShapeMismatch {
                            kernel: "encode prompts",
                            lhs: ps.to_vec(),
                            rhs: vec![ps[0], d],
                        });
                    }
                    b.graph.concat(&[x, *p], 0)?
                }
                None => x,
            };
            let out = self.block(b, layer, input)?;
            x = if prompt.is_some() {
                b.graph.slice(out, 0, 0..n_tokens)?
            } else {
                out
            };
        }
        b.graph.slice(x, 0, 0..1)
    }

    /// LayerNorm then affine projection. Not normalized.
    pub fn head(&self, b: &mut Binder<E>, cls: Var, names: &HeadNames) -> Result<Var> {
        let h = self.norm(b, cls, &names.ln)?;
        self.linear(b, h, &names.proj)
    }

    /// Unit-norm sample embedding `1 × head_out_dim`.
    pub fn embed(&self, b: &mut Binder<E>, image: &Image, prompts: &[Option<Var>]) -> Result<Var> {
        let tokens = self.patchify(b, image)?;
        let cls = self.encode(b, tokens, prompts)?;
        let e = self.head(b, cls, &self.sample_head)?;
        b.graph.l2_normalize(e, 1, L2_NORM_EPS)
    }
}

/// Parameter totals for a registry plus stores held outside it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub tunable: usize,
    pub tunable_fraction: f64,
}

/// A block of parameters living outside the registry (e.g. class prompts).
#[derive(Clone, Copy, Debug)]
pub struct ExtraStore {
    pub elements: usize,
    pub tunable: bool,
}

pub fn count_params<E: Element>(store: &ParamStore<E>, extra: &[ExtraStore]) -> ParamCount {
    let mut total = 0;
    let mut tunable = 0;
    for (_, p) in store.iter() {
        total += p.value.len();
        if p.trainable {
            tunable += p.value.len();
        }
    }
    for e in extra {
        total += e.elements;
        if e.tunable {
            tunable += e.elements;
        }
    }
    ParamCount {
        total,
        tunable,
        tunable_fraction: if total == 0 {
            0.0
        } else {
            tunable as f64 / total as f64
        },
    }
}

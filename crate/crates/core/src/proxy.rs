//! Semantic proxies: a class-prompted tower over the shared encoder, EMA/GRU
//! accumulation across iterations, and fusion with learnable bias proxies.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var, L2_NORM_EPS};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::{Binder, ParamGroup, ParamStore};
use crate::tensor::{Element, Tensor};
use crate::vit::{insert_head, normal, xavier, HeadNames, VitModel};

pub const PROXY_HEAD: &str = "proxy.head";
pub const PROXY_BIAS: &str = "proxy.bias";
pub const PROXY_SEMANTIC: &str = "proxy.semantic";
pub const PROXY_FUSED: &str = "proxy.fused";
pub const GRU_MATRICES: [&str; 6] = ["w_z", "u_z", "w_r", "u_r", "w_h", "u_h"];
pub const GRU_BIASES: [&str; 3] = ["b_z", "b_r", "b_h"];

pub fn gru_name(part: &str) -> String {
    format!("proxy.gru.{part}")
}

pub fn class_prompt_name(class: usize, layer: usize) -> String {
    format!("proxy.class_prompts.{class}.{layer}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccumulatorKind {
    Ema,
    GruRelu,
    GruTanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Class prompts plus a separate proxy head.
    Full,
    /// The bare encoder (no prompts) with the shared sample head.
    Sample,
    /// The sample embedding itself; gradients flow.
    SharedEncoder,
    /// The sample embedding behind a stop-gradient.
    FixedEncoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxyConfig {
    pub enabled: bool,
    /// Class prompts per layer.
    pub m: usize,
    /// Number of leading layers that receive class prompts.
    pub cls_l: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub accumulator_kind: AccumulatorKind,
    /// Use `λ·P + (1−λ)·p` instead of `P + (1−λ)·p`.
    pub ema_textbook: bool,
    pub ablation_mode: AblationMode,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            enabled: true,
            m: 5,
            cls_l: 2,
            lambda: 0.5,
            alpha: 0.5,
            accumulator_kind: AccumulatorKind::GruRelu,
            ema_textbook: false,
            ablation_mode: AblationMode::Full,
        }
    }
}

impl ProxyConfig {
    pub fn validate(&self, layers: usize) -> Result<()> {
        for (v, path) in [(self.lambda, "proxy.lambda"), (self.alpha, "proxy.alpha")] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(path, "must be in [0, 1]"));
            }
        }
        if self.cls_l > layers {
            return Err(Error::config(
                "proxy.cls_l",
                format!("exceeds the encoder depth {layers}"),
            ));
        }
        Ok(())
    }

    pub fn uses_class_prompts(&self) -> bool {
        self.enabled && self.ablation_mode == AblationMode::Full && self.m > 0 && self.cls_l > 0
    }

    pub fn uses_proxy_head(&self) -> bool {
        self.enabled && self.ablation_mode == AblationMode::Full
    }

    pub fn uses_gru(&self) -> bool {
        self.enabled && self.accumulator_kind != AccumulatorKind::Ema
    }
}

/// Registers the bias proxies `O`, the proxy head and the shared GRU weights
/// (whichever the config needs) as trainable parameters.
pub fn register_params<E: Element>(
    store: &mut ParamStore<E>,
    cfg: &ProxyConfig,
    hidden_dim: usize,
    out_dim: usize,
    classes: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let mut added = vec![PROXY_BIAS.to_string()];
    let o = normal(rng, &[classes, out_dim], 1.0 / (out_dim as f64).sqrt())?;
    store.insert(PROXY_BIAS, o, ParamGroup::Proxy);
    if cfg.uses_proxy_head() {
        let h = insert_head(
            store,
            PROXY_HEAD,
            hidden_dim,
            out_dim,
            rng,
            ParamGroup::Encoder,
        )?;
        added.extend(h.names());
    }
    if cfg.uses_gru() {
        for part in GRU_MATRICES {
            store.insert(
                gru_name(part),
                xavier(rng, out_dim, out_dim)?,
                ParamGroup::Proxy,
            );
            added.push(gru_name(part));
        }
        for part in GRU_BIASES {
            store.insert(
                gru_name(part),
                Tensor::zeros(&[out_dim])?,
                ParamGroup::Proxy,
            );
            added.push(gru_name(part));
        }
    }
    for name in added {
        store.set_trainable(&name, true)?;
    }
    Ok(())
}

/// Accumulated semantic proxies `P` and the fused proxies `Q`, both with
/// unit-norm rows.
#[derive(Clone, Debug)]
pub struct ProxyState {
    pub semantic: Tensor<f32>,
    pub fused: Tensor<f32>,
    pub degenerate_updates: u64,
}

impl ProxyState {
    /// `P = normalize(O)`, so the first fusion is defined before any update.
    pub fn new(bias: &Tensor<f32>) -> Result<Self> {
        let semantic = normalize_rows(bias)?;
        Ok(ProxyState {
            fused: semantic.clone(),
            semantic,
            degenerate_updates: 0,
        })
    }

    /// Recomputes `Q` from the current `P` and `O`.
    pub fn refresh_fused(&mut self, bias: &Tensor<f32>, alpha: f64) -> Result<()> {
        let mut g = Graph::new();
        let p = g.constant(self.semantic.clone());
        let o = g.constant(bias.clone());
        let q = fuse_bias(&mut g, p, o, alpha)?;
        self.fused = g.value(q).clone();
        Ok(())
    }
}

fn normalize_rows<E: Element>(t: &Tensor<E>) -> Result<Tensor<E>> {
    let mut g = Graph::new();
    let v = g.constant(t.clone());
    let n = g.l2_normalize(v, 1, L2_NORM_EPS)?;
    Ok(g.value(n).clone())
}

/// Shared GRU weights bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
}

impl GruVars {
    pub fn bind<E: Element>(b: &mut Binder<E>, store: &ParamStore<E>) -> Result<Self> {
        let mut get = |part: &str| b.param(store, &gru_name(part));
        Ok(GruVars {
            w_z: get("w_z")?,
            u_z: get("u_z")?,
            w_r: get("w_r")?,
            u_r: get("u_r")?,
            w_h: get("w_h")?,
            u_h: get("u_h")?,
            b_z: get("b_z")?,
            b_r: get("b_r")?,
            b_h: get("b_h")?,
        })
    }
}

/// Result of one accumulator update. `degenerate` marks a zero-norm update
/// that kept the previous proxy.
#[derive(Clone, Copy, Debug)]
pub struct Step {
    pub next: Var,
    pub degenerate: bool,
}

fn normalize_or_keep<E: Element>(g: &mut Graph<E>, s: Var, prev: Var) -> Result<Step> {
    let norm = g
        .value(s)
        .data()
        .iter()
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm <= L2_NORM_EPS {
        return Ok(Step {
            next: prev,
            degenerate: true,
        });
    }
    Ok(Step {
        next: g.l2_normalize(s, 1, L2_NORM_EPS)?,
        degenerate: false,
    })
}

/// `normalize(P + (1−λ)·p)`, or `normalize(λ·P + (1−λ)·p)` when `textbook`.
pub fn ema_update<E: Element>(
    g: &mut Graph<E>,
    prev: Var,
    p: Var,
    lambda: f64,
    textbook: bool,
) -> Result<Step> {
    let fresh = g.scale(p, 1.0 - lambda)?;
    let kept = if textbook {
        g.scale(prev, lambda)?
    } else {
        prev
    };
    let s = g.add(kept, fresh)?;
    normalize_or_keep(g, s, prev)
}

/// Gated update over row vectors:
/// `z = σ(pW_z + PU_z + b_z)`, `r = σ(pW_r + PU_r + b_r)`,
/// `N = φ(pW_h + r ⊙ PU_h + b_h)`, `P' = normalize((1−z) ⊙ P + z ⊙ N)`.
pub fn gru_update<E: Element>(
    g: &mut Graph<E>,
    w: &GruVars,
    prev: Var,
    p: Var,
    kind: AccumulatorKind,
) -> Result<Step> {
    let gate = |g: &mut Graph<E>, wx: Var, ux: Var, bias: Var| -> Result<Var> {
        let a = g.matmul(p, wx)?;
        let c = g.matmul(prev, ux)?;
        let s = g.add(a, c)?;
        g.add(s, bias)
    };
    let z = gate(g, w.w_z, w.u_z, w.b_z)?;
    let z = g.sigmoid(z)?;
    let r = gate(g, w.w_r, w.u_r, w.b_r)?;
    let r = g.sigmoid(r)?;
    let a = g.matmul(p, w.w_h)?;
    let c = g.matmul(prev, w.u_h)?;
    let rc = g.mul(r, c)?;
    let pre = g.add(a, rc)?;
    let pre = g.add(pre, w.b_h)?;
    let cand = match kind {
        AccumulatorKind::GruTanh => g.tanh(pre)?,
        _ => g.relu(pre)?,
    };
    let one_minus_z = g.scale(z, -1.0)?;
    let one_minus_z = g.add_scalar(one_minus_z, 1.0)?;
    let keep = g.mul(one_minus_z, prev)?;
    let fresh = g.mul(z, cand)?;
    let s = g.add(keep, fresh)?;
    normalize_or_keep(g, s, prev)
}

/// Row-wise `normalize((1−α)·P + α·O)`. A zero-norm row is an error.
pub fn fuse_bias<E: Element>(g: &mut Graph<E>, p: Var, o: Var, alpha: f64) -> Result<Var> {
    let a = g.scale(p, 1.0 - alpha)?;
    let b = g.scale(o, alpha)?;
    let s = g.add(a, b)?;
    let t = g.value(s);
    let (rows, _) = t.dims2()?;
    for r in 0..rows {
        let norm: f64 = t.row(r).iter().map(|v| v.as_f64() * v.as_f64()).sum();
        if norm.sqrt() <= L2_NORM_EPS {
            return Err(Error::Degenerate(format!(
                "fused proxy row {r} has zero norm"
            )));
        }
    }
    g.l2_normalize(s, 1, L2_NORM_EPS)
}

/// One accumulator step with the configured rule.
pub fn accumulate_step<E: Element>(
    g: &mut Graph<E>,
    cfg: &ProxyConfig,
    gru: Option<&GruVars>,
    prev: Var,
    p: Var,
) -> Result<Step> {
    match (cfg.accumulator_kind, gru) {
        (AccumulatorKind::Ema, _) => ema_update(g, prev, p, cfg.lambda, cfg.ema_textbook),
        (kind, Some(w)) => gru_update(g, w, prev, p, kind),
        (_, None) => Err(Error::InvalidTensor(
            "GRU accumulator without weights".into(),
        )),
    }
}

/// New semantic-proxy rows for the classes present in a batch.
#[derive(Clone, Debug)]
pub struct Accumulated {
    pub rows: Vec<(usize, Var)>,
    pub degenerate: u64,
}

/// Feeds every class group's proxies through the accumulator one at a time,
/// in an order drawn from `rng`. The previous proxy enters as a constant, so
/// no gradient reaches earlier iterations.
pub fn accumulate_batch<E: Element>(
    g: &mut Graph<E>,
    cfg: &ProxyConfig,
    gru: Option<&GruVars>,
    semantic: &Tensor<E>,
    groups: &[(usize, Vec<Var>)],
    rng: &mut impl Rng,
) -> Result<Accumulated> {
    let (classes, dim) = semantic.dims2()?;
    let mut rows = Vec::with_capacity(groups.len());
    let mut degenerate = 0;
    for (class, members) in groups {
        if members.is_empty() {
            continue;
        }
        if *class >= classes {
            return Err(Error::Data(format!(
                "class {class} outside {classes} proxies"
            )));
        }
        let mut order = members.clone();
        order.shuffle(rng);
        let mut cur = g.constant(Tensor::new(&[1, dim], semantic.row(*class).to_vec())?);
        for p in order {
            let step = accumulate_step(g, cfg, gru, cur, p)?;
            degenerate += step.degenerate as u64;
            cur = step.next;
        }
        rows.push((*class, cur));
    }
    Ok(Accumulated { rows, degenerate })
}

/// The full `C × D'` semantic matrix: fresh rows for batch classes, constants
/// everywhere else.
pub fn assemble_semantic<E: Element>(
    g: &mut Graph<E>,
    semantic: &Tensor<E>,
    rows: &[(usize, Var)],
) -> Result<Var> {
    let (classes, _) = semantic.dims2()?;
    let base = g.constant(semantic.clone());
    if rows.is_empty() {
        return Ok(base);
    }
    let mut fresh: Vec<Option<Var>> = vec![None; classes];
    for (c, v) in rows {
        fresh[*c] = Some(*v);
    }
    let mut pieces = Vec::new();
    let mut run_start = None;
    for c in 0..=classes {
        let f = if c < classes { fresh[c] } else { None };
        let end_run = c == classes || f.is_some();
        if end_run {
            if let Some(s) = run_start.take() {
                pieces.push(g.slice(base, 0, s..c)?);
            }
        } else if run_start.is_none() {
            run_start = Some(c);
        }
        if let Some(v) = f {
            pieces.push(v);
        }
    }
    if pieces.len() == 1 {
        Ok(pieces[0])
    } else {
        g.concat(&pieces, 0)
    }
}

/// Per-layer prompts of the proxy tower: the encoder prompts with the class
/// prompts appended for the leading layers.
pub fn tower_prompts<E: Element>(
    g: &mut Graph<E>,
    encoder: &[Option<Var>],
    class: &[Var],
) -> Result<Vec<Option<Var>>> {
    let mut out = Vec::with_capacity(encoder.len());
    for (layer, enc) in encoder.iter().enumerate() {
        let extra = class.get(layer).copied();
        out.push(match (*enc, extra) {
            (Some(e), Some(c)) => Some(g.concat(&[e, c], 0)?),
            (e, None) => e,
            (None, c) => c,
        });
    }
    Ok(out)
}

/// Runs the tower on one image with the given prompts and head, then
/// normalizes.
pub fn tower<E: Element>(
    model: &VitModel<E>,
    b: &mut Binder<E>,
    image: &Image,
    prompts: &[Option<Var>],
    head: &HeadNames,
) -> Result<Var> {
    let tokens = model.patchify(b, image)?;
    let cls = model.encode(b, tokens, prompts)?;
    let e = model.head(b, cls, head)?;
    b.graph.l2_normalize(e, 1, L2_NORM_EPS)
}

/// Proxy vector `1 × D'` for one image of a class, following the ablation
/// mode. `sample_row` is the image's sample-tower embedding.
pub fn generate_proxy<E: Element>(
    model: &VitModel<E>,
    b: &mut Binder<E>,
    cfg: &ProxyConfig,
    image: &Image,
    encoder_prompts: &[Option<Var>],
    class_prompts: &[Var],
    sample_row: Var,
) -> Result<Var> {
    match cfg.ablation_mode {
        AblationMode::Full => {
            let prompts = tower_prompts(&mut b.graph, encoder_prompts, class_prompts)?;
            tower(model, b, image, &prompts, &HeadNames::new(PROXY_HEAD))
        }
        AblationMode::Sample => {
            let none = vec![None; model.config().layers];
            let head = model.sample_head().clone();
            tower(model, b, image, &none, &head)
        }
        AblationMode::SharedEncoder => Ok(sample_row),
        AblationMode::FixedEncoder => b.graph.stop_gradient(sample_row),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row(g: &mut Graph<f64>, v: &[f64]) -> Var {
        g.constant(Tensor::from_f64(&[1, v.len()], v).unwrap())
    }

    fn vals(g: &Graph<f64>, v: Var) -> Vec<f64> {
        g.value(v).to_f64_vec()
    }

    fn zero_gru(g: &mut Graph<f64>, d: usize) -> GruVars {
        let m = g.constant(Tensor::zeros(&[d, d]).unwrap());
        let b = g.constant(Tensor::zeros(&[d]).unwrap());
        GruVars {
            w_z: m,
            u_z: m,
            w_r: m,
            u_r: m,
            w_h: m,
            u_h: m,
            b_z: b,
            b_r: b,
            b_h: b,
        }
    }

    #[test]
    fn ema_hand_example() {
        let mut g = Graph::new();
        let prev = row(&mut g, &[1.0, 0.0]);
        let p = row(&mut g, &[0.0, 1.0]);
        let s = ema_update(&mut g, prev, p, 0.5, false).unwrap();
        let v = vals(&g, s.next);
        assert!((v[0] - 0.8944).abs() < 1e-4 && (v[1] - 0.4472).abs() < 1e-4);
    }

    #[test]
    fn ema_lambda_one_and_collinear() {
        let mut g = Graph::new();
        let prev = row(&mut g, &[0.6, 0.8]);
        let p = row(&mut g, &[1.0, 0.0]);
        let s = ema_update(&mut g, prev, p, 1.0, false).unwrap();
        let v = vals(&g, s.next);
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
        let s = ema_update(&mut g, prev, prev, 0.3, false).unwrap();
        let v = vals(&g, s.next);
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn ema_exact_cancellation_keeps_previous() {
        let mut g = Graph::new();
        let prev = row(&mut g, &[0.5, 0.0]);
        let p = row(&mut g, &[-1.0, 0.0]);
        let s = ema_update(&mut g, prev, p, 0.5, false).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.next, prev);
    }

    #[test]
    fn ema_textbook_form() {
        let mut g = Graph::new();
        let prev = row(&mut g, &[1.0, 0.0]);
        let p = row(&mut g, &[0.0, 1.0]);
        let s = ema_update(&mut g, prev, p, 0.75, true).unwrap();
        let v = vals(&g, s.next);
        let n = (0.75f64 * 0.75 + 0.25 * 0.25).sqrt();
        assert!((v[0] - 0.75 / n).abs() < 1e-12 && (v[1] - 0.25 / n).abs() < 1e-12);
    }

    #[test]
    fn zero_gru_is_identity() {
        let mut g = Graph::new();
        let w = zero_gru(&mut g, 3);
        let prev = row(&mut g, &[2.0 / 3.0, -1.0 / 3.0, 2.0 / 3.0]);
        let p = row(&mut g, &[0.0, 1.0, 0.0]);
        for kind in [AccumulatorKind::GruRelu, AccumulatorKind::GruTanh] {
            let s = gru_update(&mut g, &w, prev, p, kind).unwrap();
            for (a, b) in vals(&g, s.next).iter().zip(vals(&g, prev)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gru_two_dim_scalar_oracle() {
        // W = 2I for every gate, U = 0, b = 0, p = e1, P = e2
        let mut g = Graph::new();
        let two_i = g.constant(Tensor::from_f64(&[2, 2], &[2.0, 0.0, 0.0, 2.0]).unwrap());
        let zero = g.constant(Tensor::zeros(&[2, 2]).unwrap());
        let zb = g.constant(Tensor::zeros(&[2]).unwrap());
        let w = GruVars {
            w_z: two_i,
            u_z: zero,
            w_r: two_i,
            u_r: zero,
            w_h: two_i,
            u_h: zero,
            b_z: zb,
            b_r: zb,
            b_h: zb,
        };
        let prev = row(&mut g, &[0.0, 1.0]);
        let p = row(&mut g, &[1.0, 0.0]);
        let s = gru_update(&mut g, &w, prev, p, AccumulatorKind::GruRelu).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let z = [sig(2.0), sig(0.0)];
        let cand = [2.0f64, 0.0];
        let pre = [z[0] * cand[0], (1.0 - z[1]) * 1.0 + z[1] * cand[1]];
        let n = (pre[0] * pre[0] + pre[1] * pre[1]).sqrt();
        let v = vals(&g, s.next);
        assert!((v[0] - pre[0] / n).abs() < 1e-12);
        assert!((v[1] - pre[1] / n).abs() < 1e-12);
    }

    #[test]
    fn fuse_examples() {
        let mut g = Graph::new();
        let p = row(&mut g, &[1.0, 0.0]);
        let o = row(&mut g, &[0.0, 2.0]);
        let q = fuse_bias(&mut g, p, o, 0.3).unwrap();
        let v = vals(&g, q);
        assert!((v[0] - 0.7593).abs() < 1e-4 && (v[1] - 0.6508).abs() < 1e-4);
        let q = fuse_bias(&mut g, p, o, 0.0).unwrap();
        assert_eq!(vals(&g, q), vec![1.0, 0.0]);
        let q = fuse_bias(&mut g, p, o, 1.0).unwrap();
        assert_eq!(vals(&g, q), vec![0.0, 1.0]);
        let neg = row(&mut g, &[-1.0, 0.0]);
        assert!(matches!(
            fuse_bias(&mut g, p, neg, 0.5),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn ema_order_matters() {
        let cfg = ProxyConfig {
            accumulator_kind: AccumulatorKind::Ema,
            lambda: 0.3,
            ..ProxyConfig::default()
        };
        let semantic = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 0.0]).unwrap();
        let run = |first: [f64; 2], second: [f64; 2]| {
            let mut g = Graph::new();
            let prev = row(&mut g, semantic.data());
            let a = row(&mut g, &first);
            let b = row(&mut g, &second);
            let s1 = accumulate_step(&mut g, &cfg, None, prev, a).unwrap();
            let s2 = accumulate_step(&mut g, &cfg, None, s1.next, b).unwrap();
            vals(&g, s2.next)
        };
        let x = [0.0, 1.0];
        let y = [-0.6, 0.8];
        let ab = run(x, y);
        let ba = run(y, x);
        assert!((ab[0] - ba[0]).abs() > 1e-3);
    }

    #[test]
    fn batch_accumulation_touches_only_batch_classes() {
        let cfg = ProxyConfig {
            accumulator_kind: AccumulatorKind::Ema,
            ..ProxyConfig::default()
        };
        let semantic = normalize_rows(
            &Tensor::<f64>::from_f64(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap(),
        )
        .unwrap();
        let mut g = Graph::new();
        let p = row(&mut g, &[0.6, 0.8]);
        let acc = accumulate_batch(
            &mut g,
            &cfg,
            None,
            &semantic,
            &[(1, vec![p]), (2, vec![])],
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(acc.rows.len(), 1);
        let full = assemble_semantic(&mut g, &semantic, &acc.rows).unwrap();
        let out = g.value(full);
        assert_eq!(out.row(0), semantic.row(0));
        assert_eq!(out.row(2), semantic.row(2));
        assert_ne!(out.row(1), semantic.row(1));
    }

    #[test]
    fn previous_iteration_receives_no_gradient() {
        let cfg = ProxyConfig {
            accumulator_kind: AccumulatorKind::Ema,
            ..ProxyConfig::default()
        };
        let semantic = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let p1 = g.leaf(Tensor::from_f64(&[1, 2], &[0.6, 0.8]).unwrap(), true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let first =
            accumulate_batch(&mut g, &cfg, None, &semantic, &[(0, vec![p1])], &mut rng).unwrap();
        let carried = assemble_semantic(&mut g, &semantic, &first.rows).unwrap();
        let carried = g.value(carried).clone();
        let p2 = g.leaf(Tensor::from_f64(&[1, 2], &[0.8, -0.6]).unwrap(), true);
        let second =
            accumulate_batch(&mut g, &cfg, None, &carried, &[(0, vec![p2])], &mut rng).unwrap();
        let full = assemble_semantic(&mut g, &carried, &second.rows).unwrap();
        let loss = g.sum_all(full).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(p2).unwrap().iter().any(|v| *v != 0.0));
        assert!(g.grad(p1).map_or(true, |d| d.iter().all(|v| *v == 0.0)));
    }
}

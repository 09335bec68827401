//! The gradient-check suite run by `dml gradcheck`: every differentiable
//! kernel and composite in f64 against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var, L2_NORM_EPS, LAYER_NORM_EPS};
use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::image::Image;
use crate::loss::{proxy_anchor_loss, training_loss, PALossConfig};
use crate::params::Binder;
use crate::peft::{adapter_forward, apply_method, PeftConfig, PeftMethod};
use crate::proxy::{
    ema_update, fuse_bias, gru_name, gru_update, register_params, AccumulatorKind, GruVars,
    ProxyConfig, GRU_BIASES, GRU_MATRICES,
};
use crate::tensor::Tensor;
use crate::vit::{prompt_name, VitConfig, VitModel};

pub const SUITE_TOLERANCE: f64 = 1e-4;
pub const SUITE_STEP: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= SUITE_TOLERANCE
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).expect("valid shape")
}

fn unit_rows(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut t = random(&[rows, cols], seed);
    for r in 0..rows {
        let row = t.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

/// `sum(y ⊙ R)` for a fixed random `R`, so that every output coordinate
/// contributes to the checked gradient.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = g.constant(random(g.shape(y), seed));
    let prod = g.mul(y, r)?;
    g.sum_all(prod)
}

/// Runs `f` against a binder that owns `g` for the duration of the call.
fn with_binder<R>(g: &mut Graph<f64>, f: impl FnOnce(&mut Binder<f64>) -> Result<R>) -> Result<R> {
    let mut b = Binder::new(false);
    std::mem::swap(&mut b.graph, g);
    let out = f(&mut b);
    std::mem::swap(&mut b.graph, g);
    out
}

fn toy_image(seed: u64, size: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..size * size * 3)
        .map(|_| rng.gen_range(0.0..1.0))
        .collect();
    Image::new(size, size, data).expect("valid image")
}

/// Two-layer model with prompts at both layers, adapters at layer 0, random
/// adapter up-projections and a proxy head and GRU.
fn toy_model() -> Result<VitModel<f64>> {
    let cfg = VitConfig {
        image_size: 8,
        patch_size: 4,
        layers: 2,
        hidden_dim: 8,
        heads: 2,
        mlp_ratio: 2,
        head_out_dim: 6,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut model = VitModel::<f64>::new(cfg, &mut rng)?;
    let mut peft = PeftConfig {
        method: PeftMethod::VptAdapter,
        ..PeftConfig::default()
    };
    peft.vpt.prompts = 2;
    peft.adapter.mid_dim = 3;
    peft.adapter.layers = Some(vec![0]);
    apply_method(&mut model, &peft, &mut rng)?;
    let up = model.adapter_names(0).1.weight.clone();
    let shape = model.store.value(&up)?.shape().to_vec();
    model.store.get_mut(&up).expect("adapter registered").value = random(&shape, 8);
    let proxy = ProxyConfig {
        enabled: true,
        accumulator_kind: AccumulatorKind::GruTanh,
        ..ProxyConfig::default()
    };
    register_params(&mut model.store, &proxy, 8, 6, 3, &mut rng)?;
    Ok(model)
}

fn gru_vars(
    g: &mut Graph<f64>,
    model: &VitModel<f64>,
    swap: Option<(&str, Var)>,
) -> Result<GruVars> {
    with_binder(g, |b| {
        if let Some((name, v)) = swap {
            b.substitute(name, v);
        }
        GruVars::bind(b, &model.store)
    })
}

fn pa_cfg() -> PALossConfig {
    PALossConfig {
        pa_scale: 4.0,
        margin: 0.1,
        ..PALossConfig::default()
    }
}

/// `sum(x ⊙ stop_gradient(x))`: the backward pass sees half the true gradient.
fn faulty(g: &mut Graph<f64>, x: Var) -> Result<Var> {
    let c = g.stop_gradient(x)?;
    let y = g.mul(x, c)?;
    g.sum_all(y)
}

type Item<'a> = (
    String,
    Tensor<f64>,
    Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var> + 'a>,
);

fn push<'a>(
    items: &mut Vec<Item<'a>>,
    name: &str,
    x: Tensor<f64>,
    f: Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var> + 'a>,
) {
    items.push((name.to_string(), x, f));
}

/// Every item of the suite; `inject_fault` adds one whose backward pass is
/// deliberately wrong.
pub fn run_suite(inject_fault: bool) -> Result<Vec<CheckResult>> {
    let model = toy_model()?;
    let m = &model;
    let img = toy_image(11, 8);
    let imgs: Vec<Image> = (0..4).map(|i| toy_image(20 + i, 8)).collect();
    let labels = [0usize, 0, 1, 1];
    let lbl = &labels;

    let mut items: Vec<Item> = Vec::new();

    push(
        &mut items,
        "matmul (left operand)",
        random(&[3, 4], 1),
        Box::new(|g, x| {
            let w = g.constant(random(&[4, 5], 2));
            let y = g.matmul(x, w)?;
            probe(g, y, 3)
        }),
    );
    push(
        &mut items,
        "matmul (right operand) + transpose",
        random(&[4, 3], 4),
        Box::new(|g, x| {
            let a = g.constant(random(&[5, 3], 5));
            let xt = g.transpose(x)?;
            let y = g.matmul(a, xt)?;
            probe(g, y, 6)
        }),
    );
    push(
        &mut items,
        "add (row broadcast), sub, mul, scale",
        random(&[5], 7),
        Box::new(|g, x| {
            let a = g.constant(random(&[3, 5], 8));
            let s = g.add(a, x)?;
            let d = g.sub(s, a)?;
            let p = g.mul(s, d)?;
            let y = g.scale(p, 0.7)?;
            let y = g.add_scalar(y, 0.3)?;
            probe(g, y, 9)
        }),
    );
    push(
        &mut items,
        "concat, slice, reshape",
        random(&[2, 6], 10),
        Box::new(|g, x| {
            let c = g.constant(random(&[3, 6], 11));
            let cat = g.concat(&[c, x, x], 0)?;
            let s = g.slice(cat, 1, 1..5)?;
            let r = g.reshape(s, &[4, 7])?;
            let t = g.tanh(r)?;
            probe(g, t, 12)
        }),
    );
    push(
        &mut items,
        "softmax",
        random(&[3, 5], 13),
        Box::new(|g, x| {
            let y = g.softmax(x, 1)?;
            probe(g, y, 14)
        }),
    );
    push(
        &mut items,
        "log_softmax",
        random(&[4, 3], 15),
        Box::new(|g, x| {
            let y = g.log_softmax(x, 0)?;
            probe(g, y, 16)
        }),
    );
    push(
        &mut items,
        "layer_norm (input)",
        random(&[3, 6], 17),
        Box::new(|g, x| {
            let gamma = g.constant(random(&[6], 18));
            let beta = g.constant(random(&[6], 19));
            let y = g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)?;
            probe(g, y, 20)
        }),
    );
    push(
        &mut items,
        "layer_norm (gain)",
        random(&[6], 21),
        Box::new(|g, gamma| {
            let x = g.constant(random(&[3, 6], 22));
            let beta = g.constant(random(&[6], 23));
            let y = g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)?;
            probe(g, y, 24)
        }),
    );
    push(
        &mut items,
        "gelu",
        random(&[12], 25),
        Box::new(|g, x| {
            let y = g.gelu(x)?;
            probe(g, y, 26)
        }),
    );
    push(
        &mut items,
        "sigmoid, tanh",
        random(&[12], 27),
        Box::new(|g, x| {
            let s = g.sigmoid(x)?;
            let y = g.tanh(s)?;
            probe(g, y, 28)
        }),
    );
    let mut away = random(&[12], 29);
    away.data_mut()
        .iter_mut()
        .for_each(|v| *v += v.signum() * 0.1);
    push(
        &mut items,
        "relu",
        away,
        Box::new(|g, x| {
            let y = g.relu(x)?;
            probe(g, y, 30)
        }),
    );
    push(
        &mut items,
        "l2_normalize",
        random(&[3, 5], 31),
        Box::new(|g, x| {
            let y = g.l2_normalize(x, 1, L2_NORM_EPS)?;
            probe(g, y, 32)
        }),
    );
    push(
        &mut items,
        "log1p_exp_sum (masked)",
        random(&[3, 4], 33),
        Box::new(|g, x| {
            let mask = (0..12).map(|i| i % 3 != 1).collect();
            let y = g.log1p_exp_sum(x, Some(mask))?;
            probe(g, y, 34)
        }),
    );
    push(
        &mut items,
        "sum, mean",
        random(&[3, 4], 35),
        Box::new(|g, x| {
            let s = g.sum(x, 0)?;
            let mu = g.mean(x, 1)?;
            let s = g.tanh(s)?;
            let a = probe(g, s, 36)?;
            let b = probe(g, mu, 37)?;
            g.add(a, b)
        }),
    );
    push(
        &mut items,
        "adapter (input)",
        random(&[5, 8], 38),
        Box::new(move |g, x| {
            let y = with_binder(g, |b| adapter_forward(m, b, 0, x))?;
            probe(g, y, 39)
        }),
    );
    let down = m.adapter_names(0).0.weight.clone();
    push(
        &mut items,
        "adapter (down projection)",
        m.store.value(&down)?.clone(),
        Box::new(move |g, w| {
            let x = g.constant(random(&[5, 8], 40));
            let y = with_binder(g, |b| {
                b.substitute(&down, w);
                adapter_forward(m, b, 0, x)
            })?;
            probe(g, y, 41)
        }),
    );
    let p0 = prompt_name(0);
    push(
        &mut items,
        "prompt injection (layer-0 prompts)",
        m.store.value(&p0)?.clone(),
        Box::new(move |g, p| {
            let y = with_binder(g, |b| {
                b.substitute(&p0, p);
                let prompts = m.encoder_prompts(b)?;
                let tokens = m.patchify(b, &img)?;
                m.encode(b, tokens, &prompts)
            })?;
            probe(g, y, 42)
        }),
    );
    push(
        &mut items,
        "GRU update, tanh (previous proxy)",
        unit_rows(1, 6, 43),
        Box::new(move |g, prev| {
            let w = gru_vars(g, m, None)?;
            let p = g.constant(unit_rows(1, 6, 44));
            let y = gru_update(g, &w, prev, p, AccumulatorKind::GruTanh)?.next;
            probe(g, y, 45)
        }),
    );
    push(
        &mut items,
        "GRU update, relu (sample proxy)",
        unit_rows(1, 6, 46),
        Box::new(move |g, p| {
            let w = gru_vars(g, m, None)?;
            let prev = g.constant(unit_rows(1, 6, 47));
            let y = gru_update(g, &w, prev, p, AccumulatorKind::GruRelu)?.next;
            probe(g, y, 48)
        }),
    );
    for part in [GRU_MATRICES[0], GRU_MATRICES[5], GRU_BIASES[1]] {
        let name = gru_name(part);
        push(
            &mut items,
            &format!("GRU update, tanh ({part})"),
            m.store.value(&name)?.clone(),
            Box::new(move |g, wv| {
                let w = gru_vars(g, m, Some((&name, wv)))?;
                let prev = g.constant(unit_rows(1, 6, 49));
                let p = g.constant(unit_rows(1, 6, 50));
                let y = gru_update(g, &w, prev, p, AccumulatorKind::GruTanh)?.next;
                probe(g, y, 51)
            }),
        );
    }
    push(
        &mut items,
        "EMA update",
        unit_rows(1, 6, 52),
        Box::new(|g, p| {
            let prev = g.constant(unit_rows(1, 6, 53));
            let y = ema_update(g, prev, p, 0.5, false)?.next;
            let z = ema_update(g, y, p, 0.3, true)?.next;
            probe(g, z, 54)
        }),
    );
    push(
        &mut items,
        "bias fusion (bias)",
        random(&[3, 6], 55),
        Box::new(|g, o| {
            let p = g.constant(unit_rows(3, 6, 56));
            let y = fuse_bias(g, p, o, 0.4)?;
            probe(g, y, 57)
        }),
    );
    push(
        &mut items,
        "bias fusion (semantic)",
        unit_rows(3, 6, 58),
        Box::new(|g, p| {
            let o = g.constant(random(&[3, 6], 59));
            let y = fuse_bias(g, p, o, 0.4)?;
            probe(g, y, 60)
        }),
    );
    push(
        &mut items,
        "PA loss (embeddings)",
        unit_rows(6, 5, 61),
        Box::new(|g, x| {
            let q = g.constant(unit_rows(4, 5, 62));
            proxy_anchor_loss(g, x, q, &[0, 0, 1, 2, 2, 0], &pa_cfg())
        }),
    );
    push(
        &mut items,
        "PA loss (proxies)",
        unit_rows(4, 5, 63),
        Box::new(|g, q| {
            let x = g.constant(unit_rows(6, 5, 64));
            proxy_anchor_loss(g, x, q, &[0, 3, 1, 3, 1, 0], &pa_cfg())
        }),
    );
    push(
        &mut items,
        "PA loss through normalization and fusion (bias)",
        random(&[4, 5], 65),
        Box::new(|g, o| {
            let x = random(&[6, 5], 66);
            let x = g.constant(x);
            let x = g.l2_normalize(x, 1, L2_NORM_EPS)?;
            let p = g.constant(unit_rows(4, 5, 67));
            training_loss(g, x, p, o, &[1, 1, 2, 2, 1, 2], 0.5, &pa_cfg())
        }),
    );
    let head_w = m.sample_head().proj.weight.clone();
    let patch_w = "vit.patch_embed.weight".to_string();
    let qkv = "vit.blocks.1.attn.q.weight".to_string();
    for name in [patch_w, qkv, head_w] {
        let label = format!("end-to-end toy model ({name})");
        let x = m.store.value(&name)?.clone();
        let (imgs, lbl) = (&imgs, lbl);
        push(
            &mut items,
            &label,
            x,
            Box::new(move |g, w| {
                let rows = with_binder(g, |b| {
                    b.substitute(&name, w);
                    let prompts = m.encoder_prompts(b)?;
                    imgs.iter()
                        .map(|im| m.embed(b, im, &prompts))
                        .collect::<Result<Vec<_>>>()
                })?;
                let x = g.concat(&rows, 0)?;
                let o = g.constant(random(&[3, 6], 68));
                let q = g.l2_normalize(o, 1, L2_NORM_EPS)?;
                proxy_anchor_loss(g, x, q, lbl, &pa_cfg())
            }),
        );
    }
    if inject_fault {
        push(
            &mut items,
            "fault injection (x ⊙ stop_gradient(x))",
            random(&[4], 69),
            Box::new(faulty),
        );
    }

    items
        .into_iter()
        .map(|(name, x, f)| {
            let err = grad_check(|g, v| f(g, v), &x, SUITE_STEP)?;
            Ok(CheckResult {
                name,
                coords: x.len(),
                max_rel_error: err,
            })
        })
        .collect()
}

//! Proxy-Anchor loss over cosine similarities.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::proxy::fuse_bias;
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginConvention {
    /// `−τ·d + δ` for positives, `τ·d + δ` for negatives.
    Literal,
    /// `−τ·(d − δ)` for positives, `τ·(d + δ)` for negatives.
    Published,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PALossConfig {
    pub pa_scale: f64,
    pub margin: f64,
    pub pa_margin_convention: MarginConvention,
}

impl Default for PALossConfig {
    fn default() -> Self {
        PALossConfig {
            pa_scale: 32.0,
            margin: 0.1,
            pa_margin_convention: MarginConvention::Literal,
        }
    }
}

impl PALossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pa_scale.is_finite() && self.pa_scale > 0.0) {
            return Err(Error::config("loss.pa_scale", "must be positive"));
        }
        if !self.margin.is_finite() {
            return Err(Error::config("loss.margin", "must be finite"));
        }
        Ok(())
    }

    /// Constant offsets added to the positive and negative logits.
    pub fn offsets(&self) -> (f64, f64) {
        match self.pa_margin_convention {
            MarginConvention::Literal => (self.margin, self.margin),
            MarginConvention::Published => {
                let o = self.pa_scale * self.margin;
                (o, o)
            }
        }
    }
}

/// `x`: `B × E` unit rows, `q`: `C × E` unit rows. Positive term averaged
/// over proxies with at least one positive in the batch, negative term over
/// all `C` proxies.
pub fn proxy_anchor_loss<E: Element>(
    g: &mut Graph<E>,
    x: Var,
    q: Var,
    labels: &[usize],
    cfg: &PALossConfig,
) -> Result<Var> {
    let (b, e) = g.value(x).dims2()?;
    let (c, eq) = g.value(q).dims2()?;
    if e != eq || labels.len() != b {
        return Err(Error::ShapeMismatch {
            kernel: "proxy_anchor_loss",
            lhs: vec![b, e],
            rhs: vec![c, eq, labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!("label {bad} outside {c} proxies")));
    }
    let mut pos_mask = vec![false; c * b];
    for (j, &l) in labels.iter().enumerate() {
        pos_mask[l * b + j] = true;
    }
    let with_pos = (0..c)
        .filter(|&p| pos_mask[p * b..(p + 1) * b].iter().any(|&m| m))
        .count();
    if with_pos == 0 {
        return Err(Error::Degenerate(
            "no proxy has a positive in the batch".into(),
        ));
    }
    let neg_mask: Vec<bool> = pos_mask.iter().map(|m| !m).collect();
    let (off_pos, off_neg) = cfg.offsets();

    let xt = g.transpose(x)?;
    let sim = g.matmul(q, xt)?;
    let pos = g.scale(sim, -cfg.pa_scale)?;
    let pos = g.add_scalar(pos, off_pos)?;
    let pos = g.log1p_exp_sum(pos, Some(pos_mask))?;
    let pos = g.sum_all(pos)?;
    let pos = g.scale(pos, 1.0 / with_pos as f64)?;
    let neg = g.scale(sim, cfg.pa_scale)?;
    let neg = g.add_scalar(neg, off_neg)?;
    let neg = g.log1p_exp_sum(neg, Some(neg_mask))?;
    let neg = g.sum_all(neg)?;
    let neg = g.scale(neg, 1.0 / c as f64)?;
    let loss = g.add(pos, neg)?;
    if !g.scalar(loss).is_finite() {
        return Err(Error::NonFinite("proxy-anchor loss".into()));
    }
    Ok(loss)
}

/// Proxy-Anchor loss against `normalize((1−α)·P + α·O)`.
pub fn training_loss<E: Element>(
    g: &mut Graph<E>,
    x: Var,
    semantic: Var,
    bias: Var,
    labels: &[usize],
    alpha: f64,
    cfg: &PALossConfig,
) -> Result<Var> {
    let q = fuse_bias(g, semantic, bias, alpha)?;
    proxy_anchor_loss(g, x, q, labels, cfg)
}

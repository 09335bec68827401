//! Central-difference verification of analytic gradients.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Smallest denominator used when forming relative errors.
pub const REL_FLOOR: f64 = 1e-8;

/// Compares the backward pass of `f` at `x` against central differences with
/// step `h`. Returns the max over coordinates of
/// `|analytic - cd| / max(|analytic|, |cd|, 1e-8)`.
///
/// `f` receives a fresh graph and the leaf holding `x` and must return a
/// one-element node.
pub fn grad_check<E, F>(f: F, x: &Tensor<E>, h: f64) -> Result<f64>
where
    E: Element,
    F: Fn(&mut Graph<E>, Var) -> Result<Var>,
{
    let analytic = analytic_grad(&f, x)?;
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = E::from_f64(orig.as_f64() + h);
        let fp = evaluate(&f, &probe)?;
        probe.data_mut()[i] = E::from_f64(orig.as_f64() - h);
        let fm = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let cd = (fp - fm) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], cd));
    }
    Ok(worst)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Value of `f` at `x`, without gradients.
pub fn evaluate<E, F>(f: &F, x: &Tensor<E>) -> Result<f64>
where
    E: Element,
    F: Fn(&mut Graph<E>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), false);
    let y = f(&mut g, xv)?;
    scalar_output(&g, y)
}

/// Gradient of `f` at `x` from the backward pass.
pub fn analytic_grad<E, F>(f: &F, x: &Tensor<E>) -> Result<Vec<f64>>
where
    E: Element,
    F: Fn(&mut Graph<E>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let y = f(&mut g, xv)?;
    scalar_output(&g, y)?;
    g.backward(y)?;
    Ok(match g.grad(xv) {
        Some(d) => d.iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; x.len()],
    })
}

fn scalar_output<E: Element>(g: &Graph<E>, y: Var) -> Result<f64> {
    let t = g.value(y);
    if t.len() != 1 {
        return Err(Error::InvalidTensor(format!(
            "grad_check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    let v = t.data()[0].as_f64();
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

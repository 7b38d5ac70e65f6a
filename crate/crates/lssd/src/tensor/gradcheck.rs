use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};

/// Compares the tape's analytic gradient of a scalar function against
/// central finite differences at `point`.
///
/// `f` builds the graph from a single leaf to a scalar root on a fresh tape.
/// Returns the max over coordinates of
/// |analytic - central| / max(|analytic|, |central|, 1e-8).
pub fn gradient_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument("gradient_check step must be > 0".into()));
    }
    let base: Vec<f64> = point.values.iter().map(|&v| v as f64).collect();
    let shape = point.shape.clone();

    let eval = |vals: &[f64], want_grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let leaf = tape.leaf_f64(shape.clone(), vals.to_vec(), want_grad)?;
        let root = f(&mut tape, leaf)?;
        let v = tape.value(root)[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("gradient_check evaluation".into()));
        }
        let g = if want_grad {
            tape.backward(root)?;
            tape.grad(leaf).to_vec()
        } else {
            Vec::new()
        };
        Ok((v, g))
    };

    let (_, analytic) = eval(&base, true)?;

    let mut max_rel = 0.0f64;
    let mut perturbed = base.clone();
    for i in 0..base.len() {
        perturbed[i] = base[i] + step;
        let (fp, _) = eval(&perturbed, false)?;
        perturbed[i] = base[i] - step;
        let (fm, _) = eval(&perturbed, false)?;
        perturbed[i] = base[i];
        let numeric = (fp - fm) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(max_rel)
}

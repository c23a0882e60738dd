//! Loss primitives shared by both stages.

use candle_core::{Tensor, D};

use crate::alignment::BCE_EPS;
use crate::error::Result;

/// Sum of clipped binary cross-entropy terms, weighted by `mask`
/// (all three tensors share a shape).
pub fn bce_sum(probs: &Tensor, targets: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let p = probs.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let pos = (targets * p.log()?)?;
    let neg = (targets.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok(((pos + neg)? * mask)?.sum_all()?.neg()?)
}

/// Mean cross-entropy of `(T, N)` log-probabilities against class targets,
/// with probabilities clipped to `[BCE_EPS, 1 - BCE_EPS]`.
pub fn cross_entropy_mean(log_probs: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let t = targets.len();
    let idx = Tensor::from_vec(targets.iter().map(|&c| c as u32).collect::<Vec<_>>(), (t, 1), log_probs.device())?;
    let picked = log_probs
        .clamp(BCE_EPS.ln(), (1.0 - BCE_EPS).ln())?
        .gather(&idx, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Rows scaled to unit L2 norm.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

//! Differentiable loss terms. Every function returns a scalar tensor so the
//! terms can be weighted and back-propagated together.

use candle_core::{DType, Device, Tensor};

use super::matching::TrackPairLabels;
use crate::error::{Error, Result};
use crate::nn::{logsumexp, sigmoid, softplus, to_f64_vec};

fn zero(dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::zeros((), dtype, device)?)
}

fn scalar(v: f64, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::new(v, device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// Sigmoid focal loss over `class_logits` [N, K]. `targets[i]` is the class
/// index kernel `i` must predict, or `None` for background. Normalized by the
/// number of foreground kernels (at least 1).
pub fn focal_loss(class_logits: &Tensor, targets: &[Option<usize>], p: FocalParams) -> Result<Tensor> {
    let (n, k) = class_logits.dims2()?;
    if targets.len() != n || targets.iter().flatten().any(|&c| c >= k) {
        return Err(Error::shape(
            "focal_loss",
            format!("{} targets for logits [{n},{k}]", targets.len()),
        ));
    }
    let (dtype, dev) = (class_logits.dtype(), class_logits.device());
    if n == 0 {
        return zero(dtype, dev);
    }
    let mut onehot = vec![0f64; n * k];
    for (i, t) in targets.iter().enumerate() {
        if let Some(c) = t {
            onehot[i * k + c] = 1.0;
        }
    }
    let t = Tensor::from_vec(onehot, (n, k), dev)?.to_dtype(dtype)?;
    let prob = sigmoid(class_logits)?;
    let ce = (softplus(class_logits)? - (class_logits * &t)?)?;
    // 1 - p_t = p + t - 2pt
    let one_minus_pt = ((&prob + &t)? - (&prob * &t)?.affine(2.0, 0.0)?)?;
    let modulator = one_minus_pt.powf(p.gamma)?;
    let alpha_t = t.affine(2.0 * p.alpha - 1.0, 1.0 - p.alpha)?;
    let num_pos = targets.iter().filter(|t| t.is_some()).count().max(1);
    Ok(((alpha_t * modulator)? * ce)?
        .sum_all()?
        .affine(1.0 / num_pos as f64, 0.0)?)
}

fn check_pair(op: &'static str, logits: &Tensor, gt: &Tensor) -> Result<(usize, usize)> {
    let (m, hw) = logits.dims2()?;
    if gt.dims2()? != (m, hw) {
        return Err(Error::shape(
            op,
            format!("logits [{m},{hw}] vs targets {:?}", gt.dims()),
        ));
    }
    Ok((m, hw))
}

/// Binary cross-entropy averaged over pixels and mask pairs. Inputs [M, P].
pub fn ce_mask_loss(mask_logits: &Tensor, gt_masks: &Tensor) -> Result<Tensor> {
    let (m, _) = check_pair("ce_mask_loss", mask_logits, gt_masks)?;
    if m == 0 {
        return zero(mask_logits.dtype(), mask_logits.device());
    }
    let ce = (softplus(mask_logits)? - (mask_logits * gt_masks)?)?;
    Ok(ce.mean_all()?)
}

/// `1 - (2 sum(s g) + eps) / (sum(s^2) + sum(g^2) + eps)` with `s = sigmoid(m)`,
/// averaged over mask pairs. Inputs [M, P].
pub fn dice_loss(mask_logits: &Tensor, gt_masks: &Tensor, eps: f64) -> Result<Tensor> {
    let (m, _) = check_pair("dice_loss", mask_logits, gt_masks)?;
    if m == 0 {
        return zero(mask_logits.dtype(), mask_logits.device());
    }
    let s = sigmoid(mask_logits)?;
    let num = (s.mul(gt_masks)?.sum(1)?.affine(2.0, eps))?;
    let den = ((s.sqr()?.sum(1)? + gt_masks.sqr()?.sum(1)?)? + eps)?;
    Ok((num / den)?.affine(-1.0, 1.0)?.mean_all()?)
}

/// Contrastive association loss. For every key sample `v` and each of its
/// positives `k+`: `-log(exp(v.k+) / (exp(v.k+) + sum_k- exp(v.k-)))`, summed
/// per sample and averaged over the key samples. Returns `(loss, no_positives)`.
pub fn track_contrastive_loss(emb_key: &Tensor, emb_ref: &Tensor, labels: &TrackPairLabels) -> Result<(Tensor, bool)> {
    let (dtype, dev) = (emb_key.dtype(), emb_key.device());
    if labels.positives.is_empty() {
        return Ok((zero(dtype, dev)?, true));
    }
    let (nk, d) = emb_key.dims2()?;
    let (nr, dr) = emb_ref.dims2()?;
    if d != dr {
        return Err(Error::shape("track_contrastive_loss", format!("widths {d} vs {dr}")));
    }
    let out_of_range = |&&(a, b): &&(usize, usize)| a >= nk || b >= nr;
    if labels
        .positives
        .iter()
        .chain(&labels.negatives)
        .any(|p| out_of_range(&p))
    {
        return Err(Error::shape("track_contrastive_loss", "label index out of range"));
    }
    let sim = emb_key.matmul(&emb_ref.t()?)?;
    let pos: Vec<(usize, usize)> = labels.positives.iter().copied().collect();
    let rows: Vec<u32> = pos.iter().map(|p| p.0 as u32).collect();
    let mut bias = vec![-1e9f64; pos.len() * nr];
    let mut pick = vec![0f64; pos.len() * nr];
    for (r, &(a, b)) in pos.iter().enumerate() {
        bias[r * nr + b] = 0.0;
        pick[r * nr + b] = 1.0;
        for &(_, n) in labels.negatives.range((a, 0)..=(a, usize::MAX)) {
            bias[r * nr + n] = 0.0;
        }
    }
    let rows = Tensor::from_vec(rows, pos.len(), dev)?;
    let logits = sim.index_select(&rows, 0)?;
    let bias = Tensor::from_vec(bias, (pos.len(), nr), dev)?.to_dtype(dtype)?;
    let pick = Tensor::from_vec(pick, (pos.len(), nr), dev)?.to_dtype(dtype)?;
    let lse = logsumexp(&(&logits + bias)?, 1)?.squeeze(1)?;
    let positive = (logits * pick)?.sum(1)?;
    let v = labels.v().max(1);
    Ok(((lse - positive)?.sum_all()?.affine(1.0 / v as f64, 0.0)?, false))
}

/// Norms below this make a cosine undefined; such pairs use cosine 0.
pub const ZERO_NORM: f64 = 1e-12;

/// Mean over all labelled pairs of `(cos(v, k) - c)^2`, `c = 1` for positives.
/// Returns `(loss, zero_norm_pairs)`.
pub fn track_aux_loss(emb_key: &Tensor, emb_ref: &Tensor, labels: &TrackPairLabels) -> Result<(Tensor, usize)> {
    let (dtype, dev) = (emb_key.dtype(), emb_key.device());
    let pairs: Vec<((usize, usize), f64)> = labels
        .positives
        .iter()
        .map(|&p| (p, 1.0))
        .chain(labels.negatives.iter().map(|&p| (p, 0.0)))
        .collect();
    if pairs.is_empty() {
        return Ok((zero(dtype, dev)?, 0));
    }
    let key_norm: Vec<f64> = to_f64_vec(&emb_key.sqr()?.sum(1)?)?;
    let ref_norm: Vec<f64> = to_f64_vec(&emb_ref.sqr()?.sum(1)?)?;
    let (nk, nr) = (key_norm.len(), ref_norm.len());
    let mut degenerate = 0usize;
    let mut constant = 0.0;
    let (mut ia, mut ib, mut cs) = (Vec::new(), Vec::new(), Vec::new());
    for &((a, b), c) in &pairs {
        if a >= nk || b >= nr {
            return Err(Error::shape("track_aux_loss", "label index out of range"));
        }
        if key_norm[a].sqrt() < ZERO_NORM || ref_norm[b].sqrt() < ZERO_NORM {
            degenerate += 1;
            constant += c * c;
        } else {
            ia.push(a as u32);
            ib.push(b as u32);
            cs.push(c);
        }
    }
    if degenerate > 0 {
        log::warn!("track_aux_loss: {degenerate} pair(s) with zero-norm embeddings");
    }
    let mut total = scalar(constant, dtype, dev)?;
    if !ia.is_empty() {
        let m = ia.len();
        let a = emb_key.index_select(&Tensor::from_vec(ia, m, dev)?, 0)?;
        let b = emb_ref.index_select(&Tensor::from_vec(ib, m, dev)?, 0)?;
        let dot = (&a * &b)?.sum(1)?;
        // one square root of the product: exact cosine 1 for identical vectors
        let norms = (a.sqr()?.sum(1)? * b.sqr()?.sum(1)?)?.sqrt()?;
        let c = Tensor::from_vec(cs, m, dev)?.to_dtype(dtype)?;
        let err = ((dot / norms)? - c)?.sqr()?.sum_all()?;
        total = (total + err)?;
    }
    Ok((total.affine(1.0 / pairs.len() as f64, 0.0)?, degenerate))
}

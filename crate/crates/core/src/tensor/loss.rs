//! Task losses: masked absolute error for height, softmax cross-entropy with
//! an ignore label for semantics.

use super::{Graph, Tensor};
use crate::error::{Error, Result};

/// Masked mean absolute error: sum(|pred - target| * mask) / sum(mask).
/// Gradient flows only through `pred` at masked-in pixels.
pub fn l1_loss(g: &Graph, pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() || pred.shape() != mask.shape() {
        return Err(Error::Shape(format!(
            "l1_loss shapes differ: pred {:?}, target {:?}, mask {:?}",
            pred.shape(),
            target.shape(),
            mask.shape()
        )));
    }
    let (total, mask_sum) = {
        let p = pred.data();
        let t = target.data();
        let m = mask.data();
        let mut total = 0.0f32;
        let mut mask_sum = 0.0f32;
        for i in 0..p.len() {
            total += (p[i] - t[i]).abs() * m[i];
            mask_sum += m[i];
        }
        (total, mask_sum)
    };
    if mask_sum == 0.0 {
        return Err(Error::DegenerateLoss(
            "l1_loss: mask selects no pixels; skip this batch".into(),
        ));
    }
    let rg = g.recording() && pred.requires_grad();
    let out = Tensor::from_op(vec![1], vec![total / mask_sum], rg);
    if rg {
        let (pred, target, mask, out_h) = (pred.clone(), target.clone(), mask.clone(), out.clone());
        g.record(&out, move || {
            let guard = out_h.grad();
            let Some(gout) = guard.as_ref() else { return };
            let go = gout[0] / mask_sum;
            let p = pred.data();
            let t = target.data();
            let m = mask.data();
            let gin: Vec<f32> = (0..p.len())
                .map(|i| {
                    let d = p[i] - t[i];
                    if m[i] == 0.0 || d == 0.0 {
                        0.0
                    } else if d > 0.0 {
                        go
                    } else {
                        -go
                    }
                })
                .collect();
            drop((p, t, m));
            pred.accumulate_grad(&gin);
        });
    }
    Ok(out)
}

/// Label plane for semantic supervision: one class id per pixel, row-major
/// over N*H*W, with `ignore_index` marking pixels excluded from the loss.
pub const DEFAULT_IGNORE_INDEX: u32 = 255;

/// Mean over non-ignored pixels of -log softmax(logits)[label], stabilized
/// by max subtraction.
pub fn softmax_cross_entropy(
    g: &Graph,
    logits: &Tensor,
    labels: &[u32],
    ignore_index: u32,
) -> Result<Tensor> {
    let (n, c, h, w) = logits.dims4()?;
    let pixels = n * h * w;
    if labels.len() != pixels {
        return Err(Error::Shape(format!(
            "softmax_cross_entropy: {} labels for {} pixels",
            labels.len(),
            pixels
        )));
    }
    if let Some(&bad) = labels
        .iter()
        .find(|&&l| l != ignore_index && l as usize >= c)
    {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {c} classes (ignore_index={ignore_index})"
        )));
    }
    let plane = h * w;
    // Per-pixel probabilities are kept for the backward pass.
    let mut probs = vec![0.0f32; n * c * plane];
    let mut counted = 0usize;
    let mut total = 0.0f32;
    {
        let d = logits.data();
        let mut cls = vec![0.0f32; c];
        for img in 0..n {
            for px in 0..plane {
                let label = labels[img * plane + px];
                if label == ignore_index {
                    continue;
                }
                let base = img * c * plane + px;
                for (k, slot) in cls.iter_mut().enumerate() {
                    *slot = d[base + k * plane];
                }
                let maxv = cls.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
                let mut denom = 0.0f32;
                for v in cls.iter_mut() {
                    *v = (*v - maxv).exp();
                    denom += *v;
                }
                for (k, &e) in cls.iter().enumerate() {
                    probs[base + k * plane] = e / denom;
                }
                total += denom.ln() + maxv - d[base + label as usize * plane];
                counted += 1;
            }
        }
    }
    if counted == 0 {
        return Err(Error::DegenerateLoss(
            "softmax_cross_entropy: every pixel is ignored; skip this batch".into(),
        ));
    }
    let rg = g.recording() && logits.requires_grad();
    let out = Tensor::from_op(vec![1], vec![total / counted as f32], rg);
    if rg {
        let (logits, out_h) = (logits.clone(), out.clone());
        let labels = labels.to_vec();
        g.record(&out, move || {
            let guard = out_h.grad();
            let Some(gout) = guard.as_ref() else { return };
            let go = gout[0] / counted as f32;
            let mut gin = vec![0.0f32; n * c * plane];
            for img in 0..n {
                for px in 0..plane {
                    let label = labels[img * plane + px];
                    if label == ignore_index {
                        continue;
                    }
                    let base = img * c * plane + px;
                    for k in 0..c {
                        let p = probs[base + k * plane];
                        let y = (k as u32 == label) as u32 as f32;
                        gin[base + k * plane] = go * (p - y);
                    }
                }
            }
            logits.accumulate_grad(&gin);
        });
    }
    Ok(out)
}

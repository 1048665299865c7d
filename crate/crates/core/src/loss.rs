use crate::proxy::ProxyTarget;

/// Probabilities are clipped into `[EPS, 1 - EPS]` before taking logarithms.
pub const EPS: f64 = 1e-7;

fn clip(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

/// Binary cross-entropy of a single prediction and its derivative with
/// respect to the (clipped) probability.
pub fn bce(prob: f64, target: u8) -> (f64, f64) {
    let q = clip(prob);
    if target == 1 {
        (-q.ln(), -1.0 / q)
    } else {
        (-(1.0 - q).ln(), 1.0 / (1.0 - q))
    }
}

/// Cross-entropy over the masked-in tiles, averaged over their count.
///
/// Returns the loss and its gradient with respect to each probability; the
/// gradient is zero on masked-out tiles. An all-zero mask yields zero loss and
/// gradient.
pub fn masked_bce(probs: &[f64], target: &ProxyTarget) -> (f64, Vec<f64>) {
    assert_eq!(probs.len(), target.len(), "probabilities and targets differ in length");
    let mut grad = vec![0.0; probs.len()];
    let count = target.masked_in();
    if count == 0 {
        log::debug!("masked_bce: empty mask over {} tiles, no error signal", probs.len());
        return (0.0, grad);
    }
    let scale = 1.0 / count as f64;
    let mut loss = 0.0;
    for i in 0..probs.len() {
        if target.mask[i] == 0 {
            continue;
        }
        let (l, g) = bce(probs[i], target.targets[i]);
        loss += l;
        grad[i] = g * scale;
    }
    (loss * scale, grad)
}

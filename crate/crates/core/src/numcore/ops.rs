use super::{NumError, Tensor};

/// Lower clamp applied to every probability before taking its log.
pub const LOG_EPS: f64 = 1e-12;

fn softmax_row(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(logits.shape());
    let c = logits.cols();
    for (r, row) in logits.row_iter().enumerate() {
        softmax_row(row, &mut out.data_mut()[r * c..(r + 1) * c]);
    }
    out
}

/// Row-wise log-softmax, `l_i - logsumexp(l)`.
pub fn log_softmax(logits: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(logits.shape());
    let c = logits.cols();
    for (r, row) in logits.row_iter().enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
        for (o, &l) in out.data_mut()[r * c..(r + 1) * c].iter_mut().zip(row) {
            *o = l - lse;
        }
    }
    out
}

/// `KL(p ‖ q) = Σ p log(p / q)` with `0 log 0 = 0` and `q` clamped at [`LOG_EPS`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, NumError> {
    if p.len() != q.len() {
        return Err(NumError::ShapeMismatch {
            context: "kl_divergence",
            expected: vec![p.len()],
            found: vec![q.len()],
        });
    }
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(LOG_EPS).ln()))
        .sum();
    Ok(kl.max(0.0))
}

/// Per-row `KL(softmax(logits) ‖ q)` and its gradient w.r.t. the logits.
///
/// The gradient of row `r` is `p_i (log p_i − log q_i − KL_r)`.
pub fn kl_from_logits(logits: &Tensor, teacher: &Tensor) -> Result<(Vec<f64>, Tensor), NumError> {
    if logits.shape() != teacher.shape() {
        return Err(NumError::ShapeMismatch {
            context: "kl_from_logits",
            expected: logits.shape().to_vec(),
            found: teacher.shape().to_vec(),
        });
    }
    let logp = log_softmax(logits);
    let c = logits.cols();
    let mut per_row = Vec::with_capacity(logits.rows());
    let mut grad = Tensor::zeros(logits.shape());
    for r in 0..logits.rows() {
        let lp = logp.row(r);
        let q = teacher.row(r);
        let g = &mut grad.data_mut()[r * c..(r + 1) * c];
        let mut kl = 0.0;
        for i in 0..c {
            let p = lp[i].exp();
            let term = lp[i] - q[i].max(LOG_EPS).ln();
            g[i] = p * term;
            kl += p * term;
        }
        for i in 0..c {
            g[i] -= lp[i].exp() * kl;
        }
        per_row.push(kl);
    }
    Ok((per_row, grad))
}

/// Mean cross-entropy of `logits` against integer labels, with the gradient
/// w.r.t. the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), NumError> {
    if logits.rows() != labels.len() {
        return Err(NumError::ShapeMismatch {
            context: "cross_entropy labels",
            expected: vec![logits.rows()],
            found: vec![labels.len()],
        });
    }
    let c = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(NumError::LabelOutOfRange { label: bad, classes: c });
    }
    let n = labels.len() as f64;
    let logp = log_softmax(logits);
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let lp = logp.row(r);
        loss -= lp[y];
        let g = &mut grad.data_mut()[r * c..(r + 1) * c];
        for i in 0..c {
            g[i] = lp[i].exp() / n;
        }
        g[y] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Cosine similarity clamped to `[-1, 1]`; zero when either vector is zero.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0)
}

/// Cosine similarity and its gradient with respect to `u`.
///
/// `∂cos/∂u = v / (‖u‖‖v‖) − cos · u / ‖u‖²`; zero for zero vectors.
pub fn cosine_similarity_grad(u: &[f64], v: &[f64]) -> (f64, Vec<f64>) {
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return (0.0, vec![0.0; u.len()]);
    }
    let raw = dot(u, v) / (nu * nv);
    let grad = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| b / (nu * nv) - raw * a / (nu * nu))
        .collect();
    (raw.clamp(-1.0, 1.0), grad)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

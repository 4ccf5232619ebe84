//! Bidirectional contrastive losses on cosine similarity.
//!
//! The encoding loss pulls local features toward the global model's
//! features and away from historical snapshots. The decoding loss pulls
//! local classifier outputs toward the historical snapshot and away from the
//! global model. Both are InfoNCE terms averaged over samples:
//!
//! ```text
//! −log( exp(cos(u, pos)/τ) / (exp(cos(u, pos)/τ) + Σ_k exp(cos(u, neg_k)/τ)) )
//! ```

use thiserror::Error;

use crate::numcore::{cosine_similarity_grad, NumError, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContrastiveError {
    #[error("layer lists differ in length: {encode} encode terms, {decode} decode terms, {weights} weights")]
    LayerCount {
        encode: usize,
        decode: usize,
        weights: usize,
    },
    #[error("{0} list is empty; a positive is required")]
    MissingPositive(&'static str),
    #[error("invalid contrastive config: {0}")]
    Config(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub decode_weight: f64,
    /// Per-layer weights; `None` means uniform `1/L`.
    pub layer_weights: Option<Vec<f64>>,
    pub coefficient: f64,
    /// Historical snapshots kept per client (encode-side negatives).
    pub history: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            decode_weight: 1.0,
            layer_weights: None,
            coefficient: 1.0,
            history: 1,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), ContrastiveError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ContrastiveError::Config("temperature must be positive".into()));
        }
        if !self.decode_weight.is_finite() || !self.coefficient.is_finite() {
            return Err(ContrastiveError::Config("weights must be finite".into()));
        }
        if let Some(ws) = &self.layer_weights {
            if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(ContrastiveError::Config(
                    "layer weights must be finite and nonnegative".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn weights_for(&self, layers: usize) -> Vec<f64> {
        match &self.layer_weights {
            Some(ws) => ws.clone(),
            None => vec![1.0 / layers.max(1) as f64; layers],
        }
    }
}

/// Representations of one layer on a batch: the local model's rows, the
/// global model's rows, and one tensor per historical snapshot.
#[derive(Debug, Clone, Copy)]
pub struct FeatureTriplet<'a> {
    pub local: &'a Tensor,
    pub global: &'a [Tensor],
    pub history: &'a [Tensor],
}

/// Gradients of a mean InfoNCE loss w.r.t. every input.
#[derive(Debug, Clone)]
pub struct InfoNceGrad {
    pub anchor: Tensor,
    pub positive: Tensor,
    pub negatives: Vec<Tensor>,
}

/// Mean InfoNCE loss over rows of `anchor` and its gradient w.r.t. `anchor`.
pub fn info_nce(
    anchor: &Tensor,
    positive: &Tensor,
    negatives: &[Tensor],
    temperature: f64,
) -> Result<(f64, Tensor), NumError> {
    let (loss, grad) = info_nce_full(anchor, positive, negatives, temperature)?;
    Ok((loss, grad.anchor))
}

/// Mean InfoNCE loss with gradients for the anchor, positive and negatives.
pub fn info_nce_full(
    anchor: &Tensor,
    positive: &Tensor,
    negatives: &[Tensor],
    temperature: f64,
) -> Result<(f64, InfoNceGrad), NumError> {
    for other in std::iter::once(positive).chain(negatives) {
        if other.shape() != anchor.shape() {
            return Err(NumError::ShapeMismatch {
                context: "contrastive representations",
                expected: anchor.shape().to_vec(),
                found: other.shape().to_vec(),
            });
        }
    }
    let m = anchor.rows();
    let mut grad = InfoNceGrad {
        anchor: Tensor::zeros(anchor.shape()),
        positive: Tensor::zeros(anchor.shape()),
        negatives: negatives.iter().map(Tensor::zeros_like).collect(),
    };
    if negatives.is_empty() {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    for j in 0..m {
        let u = anchor.row(j);
        let others: Vec<&[f64]> = std::iter::once(positive.row(j))
            .chain(negatives.iter().map(|n| n.row(j)))
            .collect();
        let mut logits = Vec::with_capacity(others.len());
        let mut du = Vec::with_capacity(others.len());
        let mut dv = Vec::with_capacity(others.len());
        for v in &others {
            let (c, gu) = cosine_similarity_grad(u, v);
            let (_, gv) = cosine_similarity_grad(v, u);
            logits.push(c / temperature);
            du.push(gu);
            dv.push(gv);
        }
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|s| (s - mx).exp()).sum();
        loss += mx + z.ln() - logits[0];
        for (i, s) in logits.iter().enumerate() {
            let soft = (s - mx).exp() / z;
            let ds = if i == 0 { soft - 1.0 } else { soft };
            let scale = ds / (temperature * m as f64);
            for (o, g) in grad.anchor.row_mut(j).iter_mut().zip(&du[i]) {
                *o += scale * g;
            }
            let target = if i == 0 {
                &mut grad.positive
            } else {
                &mut grad.negatives[i - 1]
            };
            for (o, g) in target.row_mut(j).iter_mut().zip(&dv[i]) {
                *o += scale * g;
            }
        }
    }
    Ok((loss / m as f64, grad))
}

/// Local features against the global features (positive) and historical
/// features (negatives).
pub fn encode_contrastive_loss(
    triplet: FeatureTriplet<'_>,
    temperature: f64,
) -> Result<(f64, Tensor), ContrastiveError> {
    let positive = triplet
        .global
        .first()
        .ok_or(ContrastiveError::MissingPositive("global"))?;
    Ok(info_nce(triplet.local, positive, triplet.history, temperature)?)
}

/// Local classifier outputs against the historical outputs (positive) and
/// global outputs (negatives).
pub fn decode_contrastive_loss(
    triplet: FeatureTriplet<'_>,
    temperature: f64,
) -> Result<(f64, Tensor), ContrastiveError> {
    let positive = triplet
        .history
        .first()
        .ok_or(ContrastiveError::MissingPositive("history"))?;
    Ok(info_nce(triplet.local, positive, triplet.global, temperature)?)
}

/// `Σ_l λ_l (L_enc,l + λ_dec L_dec,l)`.
pub fn multilayer_combine(
    encode: &[f64],
    decode: &[f64],
    layer_weights: &[f64],
    decode_weight: f64,
) -> Result<f64, ContrastiveError> {
    if encode.len() != decode.len() || encode.len() != layer_weights.len() {
        return Err(ContrastiveError::LayerCount {
            encode: encode.len(),
            decode: decode.len(),
            weights: layer_weights.len(),
        });
    }
    Ok(encode
        .iter()
        .zip(decode)
        .zip(layer_weights)
        .map(|((e, d), w)| w * (e + decode_weight * d))
        .sum())
}

pub fn total_local_loss(distill: f64, contrastive: f64, coefficient: f64) -> f64 {
    distill + coefficient * contrastive
}

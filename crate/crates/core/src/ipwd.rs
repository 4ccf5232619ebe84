//! Inverse-probability weighted distillation.
//!
//! Client weights combine an inverse participation frequency with a label
//! divergence bonus, `w_i = α / max(π_i, ε_π) + β δ_i`, normalized over the
//! round's participants. Pseudo-samples are weighted by a logistic propensity
//! of the teacher ensemble's confidence, `γ_j = 1 / (1 + exp(−λ (s_j − θ)))`.
//! The server then minimizes `Σ_k w̃_k Σ_j γ_j KL(p_student ‖ p_teacher_k)`.

use thiserror::Error;

use crate::generator::PseudoBatch;
use crate::models::SplitModel;
use crate::numcore::{kl_divergence, kl_from_logits, softmax, NumError, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IpwdError {
    #[error("participant set has {found} clients, ledger expects {expected}")]
    Cardinality { expected: usize, found: usize },
    #[error("participant set is empty")]
    NoParticipants,
    #[error("client {client} out of range for {clients} clients")]
    UnknownClient { client: usize, clients: usize },
    #[error("invalid ipwd config: {0}")]
    Config(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// History of participant sets `C_1..C_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticipationLedger {
    rounds: Vec<Vec<usize>>,
    cardinality: usize,
    budget: usize,
}

impl ParticipationLedger {
    pub fn new(cardinality: usize, budget: usize) -> Self {
        Self {
            rounds: Vec::new(),
            cardinality,
            budget,
        }
    }

    pub fn record(&mut self, participants: Vec<usize>) -> Result<(), IpwdError> {
        if participants.len() != self.cardinality {
            return Err(IpwdError::Cardinality {
                expected: self.cardinality,
                found: participants.len(),
            });
        }
        self.rounds.push(participants);
        Ok(())
    }

    pub fn rounds(&self) -> &[Vec<usize>] {
        &self.rounds
    }

    pub fn elapsed(&self) -> usize {
        self.rounds.len()
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    /// `π_i`: fraction of elapsed rounds that included client `i`.
    pub fn participation_frequency(&self, client: usize) -> f64 {
        if self.rounds.is_empty() {
            return 0.0;
        }
        let hits = self.rounds.iter().filter(|r| r.contains(&client)).count();
        hits as f64 / self.rounds.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpwdConfig {
    /// Emphasis on infrequent participants.
    pub alpha: f64,
    /// Emphasis on label divergence.
    pub beta: f64,
    /// Logistic slope of the sample weight.
    pub slope: f64,
    /// Confidence at which the sample weight is 1/2.
    pub threshold: f64,
    /// Lower bound applied to `π_i`.
    pub frequency_floor: f64,
}

impl IpwdConfig {
    /// Defaults for a run of `rounds` rounds (`ε_π = 1 / (2T)`).
    pub fn for_rounds(rounds: usize) -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            slope: 5.0,
            threshold: 0.5,
            frequency_floor: 1.0 / (2.0 * rounds.max(1) as f64),
        }
    }

    pub fn validate(&self) -> Result<(), IpwdError> {
        let finite = [
            self.alpha,
            self.beta,
            self.slope,
            self.threshold,
            self.frequency_floor,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(IpwdError::Config("all parameters must be finite".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(IpwdError::Config("alpha and beta must be ≥ 0".into()));
        }
        if self.slope <= 0.0 || self.frequency_floor <= 0.0 {
            return Err(IpwdError::Config(
                "slope and frequency floor must be > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientWeight {
    pub client: usize,
    pub frequency: f64,
    pub divergence: f64,
    pub raw: f64,
    pub normalized: f64,
}

/// Jensen–Shannon divergence (natural log), in `[0, ln 2]`.
pub fn label_divergence(p: &[f64], q: &[f64]) -> Result<f64, NumError> {
    if p.len() != q.len() {
        return Err(NumError::ShapeMismatch {
            context: "label_divergence",
            expected: vec![p.len()],
            found: vec![q.len()],
        });
    }
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let js = 0.5 * kl_divergence(p, &m)? + 0.5 * kl_divergence(q, &m)?;
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

pub fn raw_client_weight(frequency: f64, divergence: f64, cfg: &IpwdConfig) -> f64 {
    cfg.alpha / frequency.max(cfg.frequency_floor) + cfg.beta * divergence
}

/// Weights for the participants of the current round, in participant order.
pub fn client_weights(
    ledger: &ParticipationLedger,
    client_histograms: &[Vec<f64>],
    global_histogram: &[f64],
    cfg: &IpwdConfig,
    participants: &[usize],
) -> Result<Vec<ClientWeight>, IpwdError> {
    if participants.is_empty() {
        return Err(IpwdError::NoParticipants);
    }
    let mut out = Vec::with_capacity(participants.len());
    for &client in participants {
        let hist = client_histograms
            .get(client)
            .ok_or(IpwdError::UnknownClient {
                client,
                clients: client_histograms.len(),
            })?;
        let frequency = ledger.participation_frequency(client);
        let divergence = label_divergence(hist, global_histogram)?;
        out.push(ClientWeight {
            client,
            frequency,
            divergence,
            raw: raw_client_weight(frequency, divergence, cfg),
            normalized: 0.0,
        });
    }
    let total: f64 = out.iter().map(|w| w.raw).sum();
    let uniform = 1.0 / out.len() as f64;
    for w in &mut out {
        w.normalized = if total > 0.0 { w.raw / total } else { uniform };
    }
    Ok(out)
}

/// The unweighted ablation: every participant gets `1 / |C_t|`.
pub fn uniform_weights(participants: &[usize]) -> Vec<ClientWeight> {
    let u = 1.0 / participants.len() as f64;
    participants
        .iter()
        .map(|&client| ClientWeight {
            client,
            frequency: f64::NAN,
            divergence: f64::NAN,
            raw: 1.0,
            normalized: u,
        })
        .collect()
}

/// Logistic sample weight `γ_j`.
pub fn sample_weight(confidence: f64, cfg: &IpwdConfig) -> f64 {
    1.0 / (1.0 + (-cfg.slope * (confidence - cfg.threshold)).exp())
}

/// Weighted mean of the teachers' probability rows.
pub fn ensemble_probs(teacher_probs: &[Tensor], weights: &[f64]) -> Result<Tensor, NumError> {
    let first = teacher_probs.first().ok_or(NumError::ShapeMismatch {
        context: "ensemble teachers",
        expected: vec![1],
        found: vec![0],
    })?;
    if teacher_probs.len() != weights.len() {
        return Err(NumError::ShapeMismatch {
            context: "ensemble weights",
            expected: vec![teacher_probs.len()],
            found: vec![weights.len()],
        });
    }
    let mut out = Tensor::zeros(first.shape());
    for (p, &w) in teacher_probs.iter().zip(weights) {
        if p.shape() != first.shape() {
            return Err(NumError::ShapeMismatch {
                context: "ensemble teacher outputs",
                expected: first.shape().to_vec(),
                found: p.shape().to_vec(),
            });
        }
        out.add_scaled(p, w);
    }
    Ok(out)
}

/// `s_j`: largest entry of the weighted mean teacher distribution.
pub fn confidence(teacher_probs: &[Tensor], weights: &[f64]) -> Result<Vec<f64>, NumError> {
    let ens = ensemble_probs(teacher_probs, weights)?;
    Ok(ens
        .row_iter()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// Softmax outputs of each teacher on `samples`.
pub fn teacher_probabilities(
    teachers: &[&SplitModel],
    samples: &Tensor,
) -> Result<Vec<Tensor>, NumError> {
    teachers
        .iter()
        .map(|t| t.forward(samples).map(|l| softmax(&l)))
        .collect()
}

/// `Σ_k w_k Σ_j γ_j KL(softmax(student_logits_j) ‖ teacher_k_j)` and its
/// gradient w.r.t. the student logits.
pub fn weighted_kl_loss(
    student_logits: &Tensor,
    teacher_probs: &[Tensor],
    weights: &[f64],
    gammas: &[f64],
) -> Result<(f64, Tensor), NumError> {
    if teacher_probs.is_empty() || teacher_probs.len() != weights.len() {
        return Err(NumError::ShapeMismatch {
            context: "weighted_kl teachers",
            expected: vec![weights.len()],
            found: vec![teacher_probs.len()],
        });
    }
    if gammas.len() != student_logits.rows() {
        return Err(NumError::ShapeMismatch {
            context: "weighted_kl sample weights",
            expected: vec![student_logits.rows()],
            found: vec![gammas.len()],
        });
    }
    let c = student_logits.cols();
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(student_logits.shape());
    for (q, &w) in teacher_probs.iter().zip(weights) {
        let (per_row, g) = kl_from_logits(student_logits, q)?;
        for (j, (&kl, &gamma)) in per_row.iter().zip(gammas).enumerate() {
            loss += w * gamma * kl;
            let scale = w * gamma;
            let dst = &mut grad.data_mut()[j * c..(j + 1) * c];
            for (d, s) in dst.iter_mut().zip(g.row(j)) {
                *d += scale * s;
            }
        }
    }
    Ok((loss, grad))
}

/// Loss value and parameter gradient of the weighted KL objective for `global`.
pub fn distill_loss_and_grad(
    global: &SplitModel,
    batch: &PseudoBatch,
    teacher_probs: &[Tensor],
    weights: &[f64],
) -> Result<(f64, crate::numcore::GradientTape), NumError> {
    let gammas = batch.weights().ok_or(NumError::ShapeMismatch {
        context: "pseudo-batch sample weights unset",
        expected: vec![batch.len()],
        found: vec![0],
    })?;
    let encoded = global.encode(batch.samples())?;
    let classified = global.classify(&encoded.features)?;
    let (loss, grad) = weighted_kl_loss(&classified.logits, teacher_probs, weights, gammas)?;
    let (tape, _) = global.backward(&encoded, &classified, &grad, &[])?;
    Ok((loss, tape))
}

/// One gradient step of the global model on the weighted KL objective.
/// Returns the loss before the step.
pub fn server_distill_step(
    global: &mut SplitModel,
    batch: &PseudoBatch,
    teacher_probs: &[Tensor],
    weights: &[f64],
    lr: f64,
) -> Result<f64, NumError> {
    let (loss, tape) = distill_loss_and_grad(global, batch, teacher_probs, weights)?;
    global.sgd_step(&tape, lr)?;
    Ok(loss)
}

//! Conditional generator for data-free distillation.
//!
//! The generator maps `[z ‖ embed(y)]` through a small MLP to a sample in
//! input space. It is trained so that the weighted teacher ensemble
//! recognizes the conditioning label, with a pairwise-distance bonus that
//! keeps the batch spread out.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::{self, manifest_field, CheckpointError};
use crate::ipwd::{ensemble_probs, sample_weight, IpwdConfig};
use crate::models::SplitModel;
use crate::numcore::{
    argmax, backward, forward, parameters, sgd_step, softmax, Activation, DenseLayer,
    GradientTape, NumError, Tensor, LOG_EPS,
};

pub const DEFAULT_PSEUDO_BATCH: usize = 64;
pub const DIVERSITY_COEFFICIENT: f64 = 0.1;
/// Bound on generated coordinates, in units of standardized features.
pub const DEFAULT_OUTPUT_SCALE: f64 = 3.0;

pub fn default_fill_count(batch: usize, class_count: usize) -> usize {
    (batch / class_count.max(1)).max(1)
}

/// Samples are `output_scale · tanh(·)`, so every coordinate lies in
/// `(−output_scale, output_scale)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorShape {
    pub noise_extent: usize,
    pub embed_extent: usize,
    pub hidden_extent: usize,
    pub input_extent: usize,
    pub class_count: usize,
    pub output_scale: f64,
}

impl GeneratorShape {
    pub fn new(input_extent: usize, class_count: usize) -> Self {
        Self {
            noise_extent: 16,
            embed_extent: 8,
            hidden_extent: 64,
            input_extent,
            class_count,
            output_scale: DEFAULT_OUTPUT_SCALE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorNet {
    shape: GeneratorShape,
    embedding: Tensor,
    body: Vec<DenseLayer>,
}

/// Gradient of a generator objective.
#[derive(Debug, Clone)]
pub struct GeneratorGrad {
    pub embedding: Tensor,
    pub body: GradientTape,
}

impl GeneratorNet {
    pub fn build(shape: GeneratorShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = Tensor::matrix(
            shape.class_count,
            shape.embed_extent,
            (0..shape.class_count * shape.embed_extent)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect(),
        );
        let body = vec![
            DenseLayer::init(
                shape.noise_extent + shape.embed_extent,
                shape.hidden_extent,
                Activation::Relu,
                &mut rng,
            ),
            DenseLayer::init(
                shape.hidden_extent,
                shape.input_extent,
                Activation::Tanh,
                &mut rng,
            ),
        ];
        Self {
            shape,
            embedding,
            body,
        }
    }

    pub fn shape(&self) -> &GeneratorShape {
        &self.shape
    }

    pub fn class_count(&self) -> usize {
        self.shape.class_count
    }

    pub fn input_extent(&self) -> usize {
        self.shape.input_extent
    }

    pub fn embedding(&self) -> &Tensor {
        &self.embedding
    }

    pub fn body(&self) -> &[DenseLayer] {
        &self.body
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        std::iter::once(&self.embedding).chain(parameters(&self.body))
    }

    pub fn flat_parameters(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_parameters(&mut self, flat: &[f64]) -> Result<(), NumError> {
        let total: usize = self.tensors().map(Tensor::len).sum();
        if flat.len() != total {
            return Err(NumError::ShapeMismatch {
                context: "generator flat parameters",
                expected: vec![total],
                found: vec![flat.len()],
            });
        }
        let mut offset = 0;
        let body = crate::numcore::parameters_mut(&mut self.body);
        for t in std::iter::once(&mut self.embedding).chain(body) {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn check_labels(&self, labels: &[usize]) -> Result<(), NumError> {
        match labels.iter().find(|&&y| y >= self.shape.class_count) {
            Some(&label) => Err(NumError::LabelOutOfRange {
                label,
                classes: self.shape.class_count,
            }),
            None => Ok(()),
        }
    }

    /// Standard-normal noise, one row per label.
    pub fn noise(&self, rows: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rows * self.shape.noise_extent;
        Tensor::matrix(
            rows,
            self.shape.noise_extent,
            (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
        )
    }

    fn body_input(&self, noise: &Tensor, labels: &[usize]) -> Tensor {
        let (ne, ee) = (self.shape.noise_extent, self.shape.embed_extent);
        let mut data = Vec::with_capacity(labels.len() * (ne + ee));
        for (j, &y) in labels.iter().enumerate() {
            data.extend_from_slice(noise.row(j));
            data.extend_from_slice(self.embedding.row(y));
        }
        Tensor::matrix(labels.len(), ne + ee, data)
    }

    /// Samples for explicit noise rows.
    pub fn decode(&self, noise: &Tensor, labels: &[usize]) -> Result<Tensor, NumError> {
        self.check_labels(labels)?;
        if labels.is_empty() {
            return Err(NumError::InvalidShape(vec![0]));
        }
        let mut x = forward(&self.body, &self.body_input(noise, labels))?.0;
        x.scale(self.shape.output_scale);
        Ok(x)
    }

    pub fn generate(&self, labels: &[usize], seed: u64) -> Result<PseudoBatch, NumError> {
        let samples = self.decode(&self.noise(labels.len(), seed), labels)?;
        Ok(PseudoBatch::new(samples, labels.to_vec()))
    }

    /// Objective value, its cross-entropy part, and the gradient.
    pub fn objective(
        &self,
        teachers: &[&SplitModel],
        weights: &[f64],
        noise: &Tensor,
        labels: &[usize],
    ) -> Result<(f64, f64, GeneratorGrad), NumError> {
        self.check_labels(labels)?;
        if teachers.is_empty() || teachers.len() != weights.len() {
            return Err(NumError::ShapeMismatch {
                context: "generator teachers",
                expected: vec![weights.len()],
                found: vec![teachers.len()],
            });
        }
        let m = labels.len();
        let input = self.body_input(noise, labels);
        let (mut x, cache) = forward(&self.body, &input)?;
        x.scale(self.shape.output_scale);

        let mut probs = Vec::with_capacity(teachers.len());
        let mut passes = Vec::with_capacity(teachers.len());
        for t in teachers {
            let enc = t.encode(&x)?;
            let cls = t.classify(&enc.features)?;
            probs.push(softmax(&cls.logits));
            passes.push((enc, cls));
        }
        let ens = ensemble_probs(&probs, weights)?;
        let mut ce = 0.0;
        let mut dp_y = vec![0.0; m];
        for (j, &y) in labels.iter().enumerate() {
            let py = ens.row(j)[y];
            if py > LOG_EPS {
                ce -= py.ln();
                dp_y[j] = -1.0 / (m as f64 * py);
            } else {
                ce -= LOG_EPS.ln();
            }
        }
        ce /= m as f64;

        let mut dx = Tensor::zeros(x.shape());
        for ((t, (enc, cls)), (p, &w)) in teachers.iter().zip(&passes).zip(probs.iter().zip(weights))
        {
            let c = p.cols();
            let mut dl = Tensor::zeros(p.shape());
            for (j, &y) in labels.iter().enumerate() {
                let row = p.row(j);
                let coeff = dp_y[j] * w * row[y];
                let out = dl.row_mut(j);
                for k in 0..c {
                    let delta = if k == y { 1.0 } else { 0.0 };
                    out[k] = coeff * (delta - row[k]);
                }
            }
            let (_, dxk) = t.backward(enc, cls, &dl, &[])?;
            dx.add_assign(&dxk);
        }

        let (diversity, ddiv) = mean_pairwise_distance(&x);
        dx.add_scaled(&ddiv, -DIVERSITY_COEFFICIENT);
        let loss = ce - DIVERSITY_COEFFICIENT * diversity;

        dx.scale(self.shape.output_scale);
        let (body, din) = backward(&self.body, &cache, &dx)?;
        let mut embedding = Tensor::zeros(self.embedding.shape());
        let ne = self.shape.noise_extent;
        for (j, &y) in labels.iter().enumerate() {
            let src = &din.row(j)[ne..];
            for (d, s) in embedding.row_mut(y).iter_mut().zip(src) {
                *d += s;
            }
        }
        Ok((loss, ce, GeneratorGrad { embedding, body }))
    }

    pub fn apply(&mut self, grad: &GeneratorGrad, lr: f64) -> Result<(), NumError> {
        if grad.embedding.shape() != self.embedding.shape() {
            return Err(NumError::MisalignedTape);
        }
        sgd_step(&mut self.body, &grad.body, lr)?;
        self.embedding.add_scaled(&grad.embedding, -lr);
        Ok(())
    }

    /// One gradient step on a batch of `batch` balanced labels. Returns the
    /// loss before the step.
    pub fn train_step(
        &mut self,
        teachers: &[&SplitModel],
        weights: &[f64],
        batch: usize,
        lr: f64,
        seed: u64,
    ) -> Result<f64, NumError> {
        let labels = balanced_labels(batch, self.shape.class_count);
        let noise = self.noise(batch, seed);
        let (loss, _, grad) = self.objective(teachers, weights, &noise, &labels)?;
        self.apply(&grad, lr)?;
        Ok(loss)
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<(), CheckpointError> {
        checkpoint::write_tensors(path, self.tensors())?;
        let s = &self.shape;
        checkpoint::write_manifest(
            path,
            &[
                ("kind", "generator".to_string()),
                ("noise_extent", s.noise_extent.to_string()),
                ("embed_extent", s.embed_extent.to_string()),
                ("hidden_extent", s.hidden_extent.to_string()),
                ("input_extent", s.input_extent.to_string()),
                ("class_count", s.class_count.to_string()),
                ("output_scale", format!("{:?}", s.output_scale)),
                ("seed", seed.to_string()),
            ],
        )
    }

    pub fn load(path: &Path) -> Result<(Self, u64), CheckpointError> {
        let m = checkpoint::read_manifest(path)?;
        if m.get("kind").map(String::as_str) != Some("generator") {
            return Err(CheckpointError::Malformed("manifest kind is not generator".into()));
        }
        let shape = GeneratorShape {
            noise_extent: manifest_field(&m, "noise_extent")?,
            embed_extent: manifest_field(&m, "embed_extent")?,
            hidden_extent: manifest_field(&m, "hidden_extent")?,
            input_extent: manifest_field(&m, "input_extent")?,
            class_count: manifest_field(&m, "class_count")?,
            output_scale: manifest_field(&m, "output_scale")?,
        };
        let seed = manifest_field(&m, "seed")?;
        let mut g = Self::build(shape, seed);
        let tensors = checkpoint::read_tensors(path)?;
        let expected: Vec<&[usize]> = g.tensors().map(Tensor::shape).collect();
        let found: Vec<&[usize]> = tensors.iter().map(Tensor::shape).collect();
        if expected != found {
            return Err(CheckpointError::Malformed(
                "tensor table does not match the generator manifest".into(),
            ));
        }
        let flat: Vec<f64> = tensors.iter().flat_map(|t| t.data().iter().copied()).collect();
        g.set_flat_parameters(&flat)?;
        Ok((g, seed))
    }
}

/// Labels `0, 1, .., C-1, 0, 1, ..` of length `n`.
pub fn balanced_labels(n: usize, class_count: usize) -> Vec<usize> {
    (0..n).map(|j| j % class_count.max(1)).collect()
}

/// Mean Euclidean distance over unordered row pairs and its gradient.
pub fn mean_pairwise_distance(x: &Tensor) -> (f64, Tensor) {
    let m = x.rows();
    let mut grad = Tensor::zeros(x.shape());
    if m < 2 {
        return (0.0, grad);
    }
    let pairs = (m * (m - 1) / 2) as f64;
    let mut total = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            let diff: Vec<f64> = x.row(i).iter().zip(x.row(j)).map(|(a, b)| a - b).collect();
            let d = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            total += d;
            if d > 0.0 {
                for (k, v) in diff.iter().enumerate() {
                    let g = v / (d * pairs);
                    grad.row_mut(i)[k] += g;
                    grad.row_mut(j)[k] -= g;
                }
            }
        }
    }
    (total / pairs, grad)
}

/// Generated samples with their conditioning labels and, once scored by the
/// teachers, per-sample confidences and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoBatch {
    samples: Tensor,
    labels: Vec<usize>,
    confidences: Option<Vec<f64>>,
    weights: Option<Vec<f64>>,
}

impl PseudoBatch {
    pub fn new(samples: Tensor, labels: Vec<usize>) -> Self {
        assert_eq!(samples.rows(), labels.len(), "pseudo-batch rows and labels");
        Self {
            samples,
            labels,
            confidences: None,
            weights: None,
        }
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn confidences(&self) -> Option<&[f64]> {
        self.confidences.as_deref()
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Stores confidences and the logistic weights derived from them.
    pub fn score(&mut self, confidences: Vec<f64>, cfg: &IpwdConfig) -> Result<(), NumError> {
        if confidences.len() != self.len() {
            return Err(NumError::ShapeMismatch {
                context: "pseudo-batch confidences",
                expected: vec![self.len()],
                found: vec![confidences.len()],
            });
        }
        self.weights = Some(confidences.iter().map(|&s| sample_weight(s, cfg)).collect());
        self.confidences = Some(confidences);
        Ok(())
    }

    /// Sets every sample weight to 1, keeping the given confidences.
    pub fn score_uniform(&mut self, confidences: Vec<f64>) -> Result<(), NumError> {
        if confidences.len() != self.len() {
            return Err(NumError::ShapeMismatch {
                context: "pseudo-batch confidences",
                expected: vec![self.len()],
                found: vec![confidences.len()],
            });
        }
        self.weights = Some(vec![1.0; self.len()]);
        self.confidences = Some(confidences);
        Ok(())
    }

    /// Concatenation; scores are dropped since they are batch-relative.
    pub fn extend(&self, other: &PseudoBatch) -> Result<PseudoBatch, NumError> {
        let samples = self.samples.vstack(&other.samples)?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(PseudoBatch::new(samples, labels))
    }
}

/// Argmax of the weighted ensemble for each row.
pub fn ensemble_argmax(
    samples: &Tensor,
    teachers: &[&SplitModel],
    weights: &[f64],
) -> Result<Vec<usize>, NumError> {
    let probs = crate::ipwd::teacher_probabilities(teachers, samples)?;
    let ens = ensemble_probs(&probs, weights)?;
    Ok(ens.row_iter().map(argmax).collect())
}

/// Classes never predicted by the weighted ensemble on `batch`.
pub fn detect_missing_classes(
    batch: &PseudoBatch,
    teachers: &[&SplitModel],
    weights: &[f64],
    class_count: usize,
) -> Result<Vec<usize>, NumError> {
    let predicted = ensemble_argmax(batch.samples(), teachers, weights)?;
    Ok(missing_from(&predicted, class_count))
}

pub fn missing_from(predicted: &[usize], class_count: usize) -> Vec<usize> {
    let mut seen = vec![false; class_count];
    for &p in predicted {
        if p < class_count {
            seen[p] = true;
        }
    }
    (0..class_count).filter(|&c| !seen[c]).collect()
}

/// Appends `per_class` samples conditioned on each missing class.
pub fn fill_missing(
    g: &GeneratorNet,
    batch: &PseudoBatch,
    missing: &[usize],
    per_class: usize,
    seed: u64,
) -> Result<PseudoBatch, NumError> {
    if missing.is_empty() || per_class == 0 {
        return Ok(batch.clone());
    }
    let labels: Vec<usize> = missing
        .iter()
        .flat_map(|&c| std::iter::repeat_n(c, per_class))
        .collect();
    let extra = g.generate(&labels, seed)?;
    batch.extend(&extra)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Capacity, Family, ModelDims, ModelSpec};

    fn dims() -> ModelDims {
        ModelDims {
            input_extent: 4,
            feature_extent: 3,
            class_count: 3,
        }
    }

    fn tiny_shape() -> GeneratorShape {
        GeneratorShape {
            noise_extent: 3,
            embed_extent: 2,
            hidden_extent: 5,
            input_extent: 4,
            class_count: 3,
            output_scale: 2.0,
        }
    }

    #[test]
    fn generate_shape_and_determinism() {
        let g = GeneratorNet::build(GeneratorShape::new(4, 3), 1);
        let labels = balanced_labels(10, 3);
        let a = g.generate(&labels, 7).unwrap();
        assert_eq!(a.samples().shape(), &[10, 4]);
        assert_eq!(a, g.generate(&labels, 7).unwrap());
        assert_ne!(a.samples(), g.generate(&labels, 8).unwrap().samples());
        assert!(a.confidences().is_none() && a.weights().is_none());
        assert!(g.generate(&[3], 0).is_err());
        assert!(a.samples().data().iter().all(|v| v.abs() < DEFAULT_OUTPUT_SCALE));
    }

    #[test]
    fn zero_rate_leaves_generator_unchanged() {
        let t = SplitModel::build(ModelSpec::new(Family::Shallow, Capacity::Full, dims()), 2);
        let mut g = GeneratorNet::build(GeneratorShape::new(4, 3), 3);
        let before = g.clone();
        g.train_step(&[&t], &[1.0], 12, 0.0, 5).unwrap();
        assert_eq!(g, before);
    }

    #[test]
    fn pairwise_distance_closed_form() {
        let x = Tensor::matrix(3, 2, vec![0.0, 0.0, 3.0, 4.0, 0.0, 0.0]);
        let (d, _) = mean_pairwise_distance(&x);
        assert!((d - 10.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let spec = ModelSpec::new(Family::Medium, Capacity::Quarter, dims());
        let t1 = SplitModel::build(spec, 4);
        let t2 = SplitModel::build(ModelSpec::new(Family::Shallow, Capacity::Quarter, dims()), 5);
        let g = GeneratorNet::build(tiny_shape(), 6);
        let labels = vec![0, 1, 2, 1];
        let noise = g.noise(4, 9);
        let teachers = [&t1, &t2];
        let w = [0.3, 0.7];
        let (_, _, grad) = g.objective(&teachers, &w, &noise, &labels).unwrap();
        let analytic: Vec<f64> = std::iter::once(&grad.embedding)
            .chain(grad.body.grads())
            .flat_map(|t| t.data().iter().copied())
            .collect();
        let base = g.flat_parameters();
        let h = 1e-5;
        for i in 0..base.len() {
            let eval = |delta: f64| {
                let mut p = base.clone();
                p[i] += delta;
                let mut gg = g.clone();
                gg.set_flat_parameters(&p).unwrap();
                gg.objective(&teachers, &w, &noise, &labels).unwrap().0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-4);
            assert!(err <= 1e-3, "param {i}: fd {fd} analytic {}", analytic[i]);
        }
    }

    #[test]
    fn missing_class_cases() {
        assert_eq!(missing_from(&[0, 1, 1, 0], 3), vec![2]);
        assert!(missing_from(&[2, 1, 0], 3).is_empty());
        assert!(missing_from(&[0, 0], 1).is_empty());
    }

    #[test]
    fn fill_missing_appends_conditioned_rows() {
        let g = GeneratorNet::build(GeneratorShape::new(4, 3), 1);
        let batch = g.generate(&[0, 1, 0], 2).unwrap();
        assert_eq!(fill_missing(&g, &batch, &[], 4, 3).unwrap(), batch);
        let filled = fill_missing(&g, &batch, &[2], 4, 3).unwrap();
        assert_eq!(filled.len(), 7);
        assert_eq!(&filled.labels()[3..], &[2, 2, 2, 2]);
        assert_eq!(filled.samples().row(0), batch.samples().row(0));
        let mut seen = [false; 3];
        filled.labels().iter().for_each(|&y| seen[y] = true);
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn generator_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        let mut g = GeneratorNet::build(tiny_shape(), 11);
        let mut flat = g.flat_parameters();
        flat[0] = 42.0;
        g.set_flat_parameters(&flat).unwrap();
        g.save(&path, 11).unwrap();
        let (back, seed) = GeneratorNet::load(&path).unwrap();
        assert_eq!(seed, 11);
        assert_eq!(back, g);
    }

    #[test]
    fn default_fill_count_floor() {
        assert_eq!(default_fill_count(64, 10), 6);
        assert_eq!(default_fill_count(2, 10), 1);
    }
}

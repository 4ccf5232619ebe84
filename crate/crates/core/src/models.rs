//! Heterogeneous model zoo. Every model is an encoder (feature extractor
//! ending in a shared-width projection) followed by a single-layer classifier.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::numcore::{
    backward, backward_with_taps, forward, parameters, sgd_step, Activation, DenseLayer,
    ForwardCache, GradientTape, NumError, Tensor,
};

/// Three MLP families that differ in depth and width, so their parameters
/// cannot be aggregated element-wise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Shallow,
    Medium,
    Deep,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Shallow, Family::Medium, Family::Deep];

    /// Hidden widths at full capacity (the projection layer is extra).
    pub fn base_hidden(self) -> &'static [usize] {
        match self {
            Family::Shallow => &[64],
            Family::Medium => &[48, 32],
            Family::Deep => &[40, 32, 24],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Shallow => "shallow",
            Family::Medium => "medium",
            Family::Deep => "deep",
        }
    }
}

impl FromStr for Family {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown model family `{s}`"))
    }
}

/// Width multiplier β ∈ {1, 1/2, 1/4}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Capacity {
    Full,
    Half,
    Quarter,
}

impl Capacity {
    pub const ALL: [Capacity; 3] = [Capacity::Full, Capacity::Half, Capacity::Quarter];

    pub fn divisor(self) -> usize {
        match self {
            Capacity::Full => 1,
            Capacity::Half => 2,
            Capacity::Quarter => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Capacity::Full => "1",
            Capacity::Half => "1/2",
            Capacity::Quarter => "1/4",
        }
    }
}

impl FromStr for Capacity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Capacity::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown capacity `{s}`"))
    }
}

pub const MIN_HIDDEN_WIDTH: usize = 4;

/// Extents shared by every model of one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub input_extent: usize,
    pub feature_extent: usize,
    pub class_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub family: Family,
    pub capacity: Capacity,
    pub dims: ModelDims,
}

impl ModelSpec {
    pub fn new(family: Family, capacity: Capacity, dims: ModelDims) -> Self {
        Self {
            family,
            capacity,
            dims,
        }
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.family
            .base_hidden()
            .iter()
            .map(|w| (w / self.capacity.divisor()).max(MIN_HIDDEN_WIDTH))
            .collect()
    }

    /// Number of encoder layers, projection included.
    pub fn encoder_depth(&self) -> usize {
        self.family.base_hidden().len() + 1
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.family.name(), self.capacity.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heterogeneity {
    /// One family at capacities 1, 1/2, 1/4.
    WidthScaled,
    /// Three distinct families at full capacity.
    Heterogeneous,
}

impl Heterogeneity {
    pub fn name(self) -> &'static str {
        match self {
            Heterogeneity::WidthScaled => "width-scaled",
            Heterogeneity::Heterogeneous => "heterogeneous",
        }
    }
}

impl FromStr for Heterogeneity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "width-scaled" => Ok(Heterogeneity::WidthScaled),
            "heterogeneous" => Ok(Heterogeneity::Heterogeneous),
            _ => Err(format!("unknown heterogeneity mode `{s}`")),
        }
    }
}

/// Largest-remainder apportionment of `n` over `ratios` (ties to the lower index).
pub fn apportion(n: usize, ratios: &[f64]) -> Vec<usize> {
    let total: f64 = ratios.iter().sum();
    let quotas: Vec<f64> = ratios.iter().map(|r| n as f64 * r / total).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &k in order.iter().take(n - assigned) {
        counts[k] += 1;
    }
    counts
}

pub const SPEC_RATIOS: [f64; 3] = [0.4, 0.3, 0.3];

/// Per-client model specs in 40/30/30 proportions, shuffled by `seed`.
pub fn assign_specs(n: usize, mode: Heterogeneity, dims: ModelDims, seed: u64) -> Vec<ModelSpec> {
    let kinds: Vec<ModelSpec> = match mode {
        Heterogeneity::WidthScaled => Capacity::ALL
            .iter()
            .map(|&c| ModelSpec::new(Family::Shallow, c, dims))
            .collect(),
        Heterogeneity::Heterogeneous => Family::ALL
            .iter()
            .map(|&f| ModelSpec::new(f, Capacity::Full, dims))
            .collect(),
    };
    let counts = apportion(n, &SPEC_RATIOS);
    let mut specs: Vec<ModelSpec> = kinds
        .iter()
        .zip(&counts)
        .flat_map(|(s, &c)| std::iter::repeat_n(*s, c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    specs.shuffle(&mut rng);
    specs
}

/// Encoder output with everything needed for backpropagation.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub features: Tensor,
    cache: ForwardCache,
}

impl Encoded {
    /// Post-activation output of every encoder layer; the last is `features`.
    pub fn intermediates(&self) -> &[Tensor] {
        self.cache.layer_outputs()
    }
}

#[derive(Debug, Clone)]
pub struct Classified {
    pub logits: Tensor,
    cache: ForwardCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel {
    spec: ModelSpec,
    encoder: Vec<DenseLayer>,
    classifier: Vec<DenseLayer>,
}

impl SplitModel {
    pub fn build(spec: ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::new();
        let mut prev = spec.dims.input_extent;
        for w in spec.hidden_widths() {
            encoder.push(DenseLayer::init(prev, w, Activation::Relu, &mut rng));
            prev = w;
        }
        encoder.push(DenseLayer::init(
            prev,
            spec.dims.feature_extent,
            Activation::Tanh,
            &mut rng,
        ));
        let classifier = vec![DenseLayer::init(
            spec.dims.feature_extent,
            spec.dims.class_count,
            Activation::Identity,
            &mut rng,
        )];
        Self {
            spec,
            encoder,
            classifier,
        }
    }

    /// Assembles a model from explicit layers, checking them against `spec`.
    pub fn from_parts(
        spec: ModelSpec,
        encoder: Vec<DenseLayer>,
        classifier: Vec<DenseLayer>,
    ) -> Result<Self, NumError> {
        let reference = Self::build(spec, 0);
        let shapes = |ls: &[DenseLayer]| -> Vec<(usize, usize)> {
            ls.iter().map(|l| (l.out_extent(), l.in_extent())).collect()
        };
        if shapes(&encoder) != shapes(&reference.encoder)
            || shapes(&classifier) != shapes(&reference.classifier)
        {
            return Err(NumError::ShapeMismatch {
                context: "model layers vs spec",
                expected: reference.parameter_shapes().concat(),
                found: encoder
                    .iter()
                    .chain(&classifier)
                    .flat_map(|l| [l.out_extent(), l.in_extent()])
                    .collect(),
            });
        }
        Ok(Self {
            spec,
            encoder,
            classifier,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn encoder(&self) -> &[DenseLayer] {
        &self.encoder
    }

    pub fn classifier(&self) -> &[DenseLayer] {
        &self.classifier
    }

    pub fn classifier_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.classifier
    }

    pub fn encoder_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.encoder
    }

    /// Encoder followed by classifier as one chain.
    pub fn layers(&self) -> Vec<DenseLayer> {
        self.encoder
            .iter()
            .chain(&self.classifier)
            .cloned()
            .collect()
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Tensor> {
        parameters(&self.encoder).chain(parameters(&self.classifier))
    }

    pub fn parameter_shapes(&self) -> Vec<Vec<usize>> {
        self.parameters().map(|t| t.shape().to_vec()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().map(Tensor::len).sum()
    }

    pub fn flat_parameters(&self) -> Vec<f64> {
        self.parameters()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Overwrites parameters from a flat vector in tape order.
    pub fn set_flat_parameters(&mut self, flat: &[f64]) -> Result<(), NumError> {
        if flat.len() != self.parameter_count() {
            return Err(NumError::ShapeMismatch {
                context: "flat parameters",
                expected: vec![self.parameter_count()],
                found: vec![flat.len()],
            });
        }
        let mut offset = 0;
        for t in crate::numcore::parameters_mut(&mut self.encoder)
            .chain(crate::numcore::parameters_mut(&mut self.classifier))
        {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn encode(&self, x: &Tensor) -> Result<Encoded, NumError> {
        let (features, cache) = forward(&self.encoder, x)?;
        Ok(Encoded { features, cache })
    }

    pub fn classify(&self, z: &Tensor) -> Result<Classified, NumError> {
        let (logits, cache) = forward(&self.classifier, z)?;
        Ok(Classified { logits, cache })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NumError> {
        Ok(self.classify(&self.encode(x)?.features)?.logits)
    }

    /// Gradient tape for the whole model given the loss gradient w.r.t. the
    /// logits and, optionally, w.r.t. each encoder layer output.
    ///
    /// Returns the tape (encoder then classifier) and the input gradient.
    pub fn backward(
        &self,
        encoded: &Encoded,
        classified: &Classified,
        logits_grad: &Tensor,
        encoder_taps: &[Option<&Tensor>],
    ) -> Result<(GradientTape, Tensor), NumError> {
        let (cls_tape, dz) = backward(&self.classifier, &classified.cache, logits_grad)?;
        let mut taps: Vec<Option<Tensor>> = vec![None; self.encoder.len()];
        if encoder_taps.len() > self.encoder.len() {
            return Err(NumError::StaleCache);
        }
        for (slot, tap) in taps.iter_mut().zip(encoder_taps) {
            *slot = tap.cloned();
        }
        let last = self.encoder.len() - 1;
        match &mut taps[last] {
            Some(t) => t.add_assign(&dz),
            None => taps[last] = Some(dz),
        }
        let refs: Vec<Option<&Tensor>> = taps.iter().map(Option::as_ref).collect();
        let (enc_tape, dx) = backward_with_taps(&self.encoder, &encoded.cache, &refs)?;
        Ok((enc_tape.concat(cls_tape), dx))
    }

    pub fn sgd_step(&mut self, tape: &GradientTape, lr: f64) -> Result<(), NumError> {
        let split = 2 * self.encoder.len();
        if tape.len() != split + 2 * self.classifier.len() {
            return Err(NumError::MisalignedTape);
        }
        let (enc, cls) = tape.clone().split_at(split);
        sgd_step(&mut self.encoder, &enc, lr)?;
        sgd_step(&mut self.classifier, &cls, lr)
    }

    pub fn zero_tape(&self) -> GradientTape {
        GradientTape::zeros_for(&self.encoder).concat(GradientTape::zeros_for(&self.classifier))
    }
}

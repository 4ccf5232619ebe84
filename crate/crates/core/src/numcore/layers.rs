use rand::Rng;

use super::{NumError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

/// Fully connected layer `y = act(W x + b)` with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    weights: Tensor,
    bias: Tensor,
    activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Tensor, bias: Tensor, activation: Activation) -> Result<Self, NumError> {
        if weights.shape().len() != 2 || bias.shape() != [weights.shape()[0]] {
            return Err(NumError::ShapeMismatch {
                context: "dense layer bias",
                expected: vec![weights.shape()[0]],
                found: bias.shape().to_vec(),
            });
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights on `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn init<R: Rng + ?Sized>(
        in_extent: usize,
        out_extent: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_extent + out_extent) as f64).sqrt();
        let data = (0..in_extent * out_extent)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            weights: Tensor::matrix(out_extent, in_extent, data),
            bias: Tensor::zeros(&[out_extent]),
            activation,
        }
    }

    pub fn in_extent(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_extent(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut Tensor {
        &mut self.bias
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn forward_one(&self, input: &Tensor) -> (Tensor, Tensor) {
        let (n, in_e, out_e) = (input.rows(), self.in_extent(), self.out_extent());
        let w = self.weights.data();
        let b = self.bias.data();
        let mut pre = vec![0.0; n * out_e];
        for (r, x) in input.row_iter().enumerate() {
            let out_row = &mut pre[r * out_e..(r + 1) * out_e];
            for (o, slot) in out_row.iter_mut().enumerate() {
                let w_row = &w[o * in_e..(o + 1) * in_e];
                *slot = b[o] + x.iter().zip(w_row).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        let out = pre.iter().map(|&v| self.activation.apply(v)).collect();
        (
            Tensor::matrix(n, out_e, pre),
            Tensor::matrix(n, out_e, out),
        )
    }
}

/// Activations recorded by [`forward`], consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    signature: Vec<(usize, usize, Activation)>,
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
    outputs: Vec<Tensor>,
}

impl ForwardCache {
    /// Post-activation output of every layer, first to last.
    pub fn layer_outputs(&self) -> &[Tensor] {
        &self.outputs
    }

    pub fn input(&self) -> &Tensor {
        &self.inputs[0]
    }
}

fn signature(layers: &[DenseLayer]) -> Vec<(usize, usize, Activation)> {
    layers
        .iter()
        .map(|l| (l.out_extent(), l.in_extent(), l.activation))
        .collect()
}

/// Runs a batch through the layer chain. A 1-d input is treated as one row.
pub fn forward(layers: &[DenseLayer], input: &Tensor) -> Result<(Tensor, ForwardCache), NumError> {
    let first = layers.first().ok_or(NumError::EmptyNetwork)?;
    let input = if input.shape().len() == 1 {
        Tensor::matrix(1, input.len(), input.data().to_vec())
    } else {
        input.clone()
    };
    if input.cols() != first.in_extent() {
        return Err(NumError::ShapeMismatch {
            context: "forward input",
            expected: vec![first.in_extent()],
            found: vec![input.cols()],
        });
    }
    let mut inputs = Vec::with_capacity(layers.len());
    let mut pres = Vec::with_capacity(layers.len());
    let mut outputs: Vec<Tensor> = Vec::with_capacity(layers.len());
    let mut current = input;
    for layer in layers {
        if current.cols() != layer.in_extent() {
            return Err(NumError::ShapeMismatch {
                context: "layer chain",
                expected: vec![layer.in_extent()],
                found: vec![current.cols()],
            });
        }
        let (pre, out) = layer.forward_one(&current);
        if !out.is_finite() {
            return Err(NumError::NonFinite("forward"));
        }
        inputs.push(current);
        pres.push(pre);
        current = out.clone();
        outputs.push(out);
    }
    Ok((
        current,
        ForwardCache {
            signature: signature(layers),
            inputs,
            pre: pres,
            outputs,
        },
    ))
}

/// Per-parameter gradients aligned with `[w0, b0, w1, b1, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    grads: Vec<Tensor>,
}

impl GradientTape {
    pub fn new(grads: Vec<Tensor>) -> Self {
        Self { grads }
    }

    pub fn zeros_for(layers: &[DenseLayer]) -> Self {
        Self {
            grads: parameters(layers).map(Tensor::zeros_like).collect(),
        }
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [Tensor] {
        &mut self.grads
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Concatenates two tapes (e.g. encoder followed by classifier).
    pub fn concat(mut self, other: GradientTape) -> Self {
        self.grads.extend(other.grads);
        self
    }

    pub fn split_at(mut self, at: usize) -> (GradientTape, GradientTape) {
        let rest = self.grads.split_off(at);
        (self, GradientTape { grads: rest })
    }

    pub fn add_scaled(&mut self, other: &GradientTape, scale: f64) -> Result<(), NumError> {
        if self.grads.len() != other.grads.len()
            || self
                .grads
                .iter()
                .zip(&other.grads)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(NumError::MisalignedTape);
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_scaled(b, scale);
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|g| g.data().iter().copied()).collect()
    }
}

/// Parameters of a layer chain in tape order.
pub fn parameters(layers: &[DenseLayer]) -> impl Iterator<Item = &Tensor> {
    layers.iter().flat_map(|l| [&l.weights, &l.bias])
}

pub fn parameters_mut(layers: &mut [DenseLayer]) -> impl Iterator<Item = &mut Tensor> {
    layers
        .iter_mut()
        .flat_map(|l| [&mut l.weights, &mut l.bias])
}

/// Backpropagates `upstream` (gradient w.r.t. the final output).
pub fn backward(
    layers: &[DenseLayer],
    cache: &ForwardCache,
    upstream: &Tensor,
) -> Result<(GradientTape, Tensor), NumError> {
    let mut taps: Vec<Option<&Tensor>> = vec![None; layers.len()];
    if let Some(last) = taps.last_mut() {
        *last = Some(upstream);
    }
    backward_with_taps(layers, cache, &taps)
}

/// Backpropagation with gradients injected at intermediate layer outputs.
///
/// `taps[i]`, when present, is the gradient of the loss w.r.t. the
/// post-activation output of layer `i`; the entry for the final layer is the
/// usual upstream gradient.
pub fn backward_with_taps(
    layers: &[DenseLayer],
    cache: &ForwardCache,
    taps: &[Option<&Tensor>],
) -> Result<(GradientTape, Tensor), NumError> {
    if cache.signature != signature(layers) || taps.len() != layers.len() {
        return Err(NumError::StaleCache);
    }
    for (tap, out) in taps.iter().zip(&cache.outputs) {
        if let Some(t) = tap {
            if t.rows() != out.rows() || t.cols() != out.cols() {
                return Err(NumError::ShapeMismatch {
                    context: "backward upstream",
                    expected: out.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
        }
    }
    let mut grads: Vec<Tensor> = Vec::with_capacity(2 * layers.len());
    let last = layers.len() - 1;
    let mut g = match taps[last] {
        Some(t) => Tensor::matrix(t.rows(), t.cols(), t.data().to_vec()),
        None => Tensor::zeros(cache.outputs[last].shape()),
    };
    for i in (0..layers.len()).rev() {
        if i < last {
            if let Some(t) = taps[i] {
                for (a, b) in g.data_mut().iter_mut().zip(t.data()) {
                    *a += b;
                }
            }
        }
        let layer = &layers[i];
        let (n, in_e, out_e) = (g.rows(), layer.in_extent(), layer.out_extent());
        let pre = cache.pre[i].data();
        let out = cache.outputs[i].data();
        let dpre: Vec<f64> = g
            .data()
            .iter()
            .zip(pre.iter().zip(out))
            .map(|(&gv, (&p, &o))| gv * layer.activation.derivative(p, o))
            .collect();
        let x = cache.inputs[i].data();
        let mut dw = vec![0.0; out_e * in_e];
        let mut db = vec![0.0; out_e];
        let mut dx = vec![0.0; n * in_e];
        let w = layer.weights.data();
        for r in 0..n {
            let x_row = &x[r * in_e..(r + 1) * in_e];
            let dx_row = &mut dx[r * in_e..(r + 1) * in_e];
            for o in 0..out_e {
                let d = dpre[r * out_e + o];
                if d == 0.0 {
                    continue;
                }
                db[o] += d;
                let dw_row = &mut dw[o * in_e..(o + 1) * in_e];
                let w_row = &w[o * in_e..(o + 1) * in_e];
                for k in 0..in_e {
                    dw_row[k] += d * x_row[k];
                    dx_row[k] += d * w_row[k];
                }
            }
        }
        grads.push(Tensor::vector(db));
        grads.push(Tensor::matrix(out_e, in_e, dw));
        g = Tensor::matrix(n, in_e, dx);
    }
    grads.reverse();
    Ok((GradientTape { grads }, g))
}

/// In-place gradient descent step `p ← p − lr · g`.
pub fn sgd_step(layers: &mut [DenseLayer], tape: &GradientTape, lr: f64) -> Result<(), NumError> {
    let aligned = tape.grads.len() == 2 * layers.len()
        && parameters(layers)
            .zip(&tape.grads)
            .all(|(p, g)| p.shape() == g.shape());
    if !aligned {
        return Err(NumError::MisalignedTape);
    }
    for (p, g) in parameters_mut(layers).zip(&tape.grads) {
        p.add_scaled(g, -lr);
    }
    Ok(())
}

//! Round orchestration.
//!
//! Each round samples participants, builds a pseudo-batch (topped up with
//! samples for classes the weighted ensemble never predicts), runs local
//! updates concurrently, then trains the generator and distills the
//! participants into the global model with inverse-probability weights.

use std::path::Path;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, DatasetChoice, ExperimentConfig, Variant};
use crate::contrastive::{info_nce, info_nce_full, multilayer_combine, ContrastiveConfig, ContrastiveError};
use crate::data::{
    dirichlet_partition, histogram_of, label_histogram, load_idx, load_ucihar, synthetic_mixture,
    DataError, Dataset, Split,
};
use crate::generator::{
    balanced_labels, default_fill_count, ensemble_argmax, fill_missing, missing_from,
    GeneratorNet, GeneratorShape, PseudoBatch,
};
use crate::ipwd::{
    client_weights, confidence, label_divergence, server_distill_step, teacher_probabilities,
    uniform_weights, ClientWeight, IpwdError, ParticipationLedger,
};
use crate::models::{assign_specs, Capacity, ModelDims, ModelSpec, SplitModel};
use crate::numcore::{
    argmax, backward, cross_entropy, forward, kl_divergence, kl_from_logits, softmax, GradientTape,
    NumError, Tensor,
};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Ipwd(#[from] IpwdError),
    #[error(transparent)]
    Contrastive(#[from] ContrastiveError),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// Mixes a master seed with stream identifiers (splitmix64 finalizer).
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    let mut h = master ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

const STREAM_DATA: u64 = 1;
const STREAM_MODELS: u64 = 2;
const STREAM_SAMPLING: u64 = 3;
const STREAM_CLIENT: u64 = 4;
const STREAM_GENERATOR: u64 = 5;

/// Uniform sample of `k` distinct clients out of `n`, ascending.
pub fn sample_clients(n: usize, k: usize, seed: u64, round: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_SAMPLING, round as u64]));
    let mut picked = index::sample(&mut rng, n, k.min(n)).into_vec();
    picked.sort_unstable();
    picked
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub model: SplitModel,
    /// Snapshots from previous participations, most recent first.
    pub history: Vec<SplitModel>,
    pub indices: Vec<usize>,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub histogram: Vec<f64>,
    pub lr: f64,
}

impl ClientState {
    pub fn new(id: usize, model: SplitModel, train: &Dataset, indices: Vec<usize>, lr: f64) -> Self {
        let (features, labels) = train.subset(&indices);
        let histogram = label_histogram(train, &indices).probs;
        Self {
            id,
            history: vec![model.clone()],
            model,
            indices,
            features,
            labels,
            histogram,
            lr,
        }
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }
}

/// Knobs of one local update.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub kd_weight: f64,
    pub contrastive: ContrastiveConfig,
}

impl LocalSettings {
    fn uses_pseudo(&self) -> bool {
        self.kd_weight != 0.0 || self.contrastive.coefficient != 0.0
    }
}

/// Global-model and snapshot outputs on the pseudo-batch; fixed during a
/// local update.
pub struct PseudoContext<'a> {
    pub samples: &'a Tensor,
    pub global: &'a SplitModel,
    pub global_probs: Tensor,
    pub global_layers: Vec<Tensor>,
    pub history: &'a [SplitModel],
    pub history_layers: Vec<Vec<Tensor>>,
}

impl<'a> PseudoContext<'a> {
    pub fn new(
        samples: &'a Tensor,
        global: &'a SplitModel,
        history: &'a [SplitModel],
    ) -> Result<Self, NumError> {
        let enc = global.encode(samples)?;
        let logits = global.classify(&enc.features)?.logits;
        let history_layers = history
            .iter()
            .map(|h| Ok(h.encode(samples)?.intermediates().to_vec()))
            .collect::<Result<Vec<_>, NumError>>()?;
        Ok(Self {
            samples,
            global,
            global_probs: softmax(&logits),
            global_layers: enc.intermediates().to_vec(),
            history,
            history_layers,
        })
    }
}

/// Index into `other` of the layer aligned with local layer `i`, counting
/// from the output side, when the extents agree.
pub fn aligned_layer(local: &[Tensor], other: &[Tensor], i: usize) -> Option<usize> {
    let j = (other.len() + i).checked_sub(local.len())?;
    (other[j].shape() == local[i].shape()).then_some(j)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LocalLoss {
    pub cross_entropy: f64,
    pub distill: f64,
    pub contrastive: f64,
    pub total: f64,
}

/// Client objective `CE(local) + kd·KL(local ‖ global) + coef·L_con` and its
/// gradient. The pseudo terms are skipped when `pseudo` is `None`.
pub fn local_objective(
    model: &SplitModel,
    x: &Tensor,
    y: &[usize],
    pseudo: Option<&PseudoContext<'_>>,
    settings: &LocalSettings,
) -> Result<(LocalLoss, GradientTape), ProtocolError> {
    let enc = model.encode(x)?;
    let cls = model.classify(&enc.features)?;
    let (ce, dlogits) = cross_entropy(&cls.logits, y)?;
    let (mut tape, _) = model.backward(&enc, &cls, &dlogits, &[])?;
    let mut loss = LocalLoss {
        cross_entropy: ce,
        ..Default::default()
    };
    if let Some(ctx) = pseudo {
        let (pl, pt) = pseudo_objective(model, ctx, settings)?;
        tape.add_scaled(&pt, 1.0)?;
        loss.distill = pl.distill;
        loss.contrastive = pl.contrastive;
    }
    loss.total = loss.cross_entropy
        + settings.kd_weight * loss.distill
        + settings.contrastive.coefficient * loss.contrastive;
    Ok((loss, tape))
}

fn pseudo_objective(
    model: &SplitModel,
    ctx: &PseudoContext<'_>,
    settings: &LocalSettings,
) -> Result<(LocalLoss, GradientTape), ProtocolError> {
    let cfg = &settings.contrastive;
    let coef = cfg.coefficient;
    let enc = model.encode(ctx.samples)?;
    let cls = model.classify(&enc.features)?;
    let m = ctx.samples.rows() as f64;

    let (kl_rows, kl_grad) = kl_from_logits(&cls.logits, &ctx.global_probs)?;
    let distill = kl_rows.iter().sum::<f64>() / m;
    let mut dlogits = kl_grad;
    dlogits.scale(settings.kd_weight / m);

    let layers = enc.intermediates();
    let depth = layers.len();
    let weights = cfg.weights_for(depth);
    if weights.len() != depth {
        return Err(ContrastiveError::LayerCount {
            encode: depth,
            decode: depth,
            weights: weights.len(),
        }
        .into());
    }
    let mut encode_terms = vec![0.0; depth];
    let mut decode_terms = vec![0.0; depth];
    let mut taps: Vec<Option<Tensor>> = vec![None; depth];
    for (i, layer) in layers.iter().enumerate() {
        let Some(g) = aligned_layer(layers, &ctx.global_layers, i) else {
            continue;
        };
        let negatives: Vec<Tensor> = ctx
            .history_layers
            .iter()
            .filter_map(|h| aligned_layer(layers, h, i).map(|j| h[j].clone()))
            .collect();
        let (l, mut grad) = info_nce(layer, &ctx.global_layers[g], &negatives, cfg.temperature)?;
        encode_terms[i] = l;
        grad.scale(coef * weights[i]);
        taps[i] = Some(grad);
    }

    let z = &enc.features;
    if let Some(prev) = ctx.history.first() {
        let (prev_logits, prev_cache) = forward(prev.classifier(), z)?;
        let (glob_logits, glob_cache) = forward(ctx.global.classifier(), z)?;
        let (l, g) = info_nce_full(
            &cls.logits,
            &prev_logits,
            std::slice::from_ref(&glob_logits),
            cfg.temperature,
        )?;
        decode_terms[depth - 1] = l;
        let scale = coef * weights[depth - 1] * cfg.decode_weight;
        dlogits.add_scaled(&g.anchor, scale);
        let mut dpos = g.positive;
        dpos.scale(scale);
        let mut dneg = g.negatives[0].clone();
        dneg.scale(scale);
        let (_, dz_prev) = backward(prev.classifier(), &prev_cache, &dpos)?;
        let (_, dz_glob) = backward(ctx.global.classifier(), &glob_cache, &dneg)?;
        let last = taps[depth - 1].get_or_insert_with(|| Tensor::zeros(z.shape()));
        last.add_assign(&dz_prev);
        last.add_assign(&dz_glob);
    }
    let contrastive = multilayer_combine(&encode_terms, &decode_terms, &weights, cfg.decode_weight)?;
    let refs: Vec<Option<&Tensor>> = taps.iter().map(Option::as_ref).collect();
    let (tape, _) = model.backward(&enc, &cls, &dlogits, &refs)?;
    Ok((
        LocalLoss {
            distill,
            contrastive,
            ..Default::default()
        },
        tape,
    ))
}

/// Shuffled minibatch index lists covering `0..n`.
pub fn minibatches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Plain minibatch cross-entropy training; returns the loss of every step.
pub fn train_cross_entropy(
    model: &mut SplitModel,
    x: &Tensor,
    y: &[usize],
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>, NumError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses = Vec::new();
    for _ in 0..epochs {
        for idx in minibatches(y.len(), batch, &mut rng) {
            let xb = x.select_rows(&idx);
            let yb: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
            let enc = model.encode(&xb)?;
            let cls = model.classify(&enc.features)?;
            let (loss, g) = cross_entropy(&cls.logits, &yb)?;
            let (tape, _) = model.backward(&enc, &cls, &g, &[])?;
            model.sgd_step(&tape, lr)?;
            losses.push(loss);
        }
    }
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalReport {
    pub client: usize,
    pub step_losses: Vec<LocalLoss>,
}

impl LocalReport {
    /// Mean total loss over all steps, NaN when no step ran.
    pub fn mean_total(&self) -> f64 {
        if self.step_losses.is_empty() {
            return f64::NAN;
        }
        self.step_losses.iter().map(|l| l.total).sum::<f64>() / self.step_losses.len() as f64
    }
}

/// Refreshes the snapshot, then runs `epochs` of minibatch descent on the
/// client objective.
pub fn local_update(
    client: &mut ClientState,
    global: &SplitModel,
    batch: Option<&PseudoBatch>,
    settings: &LocalSettings,
    seed: u64,
) -> Result<LocalReport, ProtocolError> {
    client.history.insert(0, client.model.clone());
    client.history.truncate(settings.contrastive.history.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctx = match batch {
        Some(b) if settings.uses_pseudo() => {
            Some(PseudoContext::new(b.samples(), global, &client.history)?)
        }
        _ => None,
    };
    let mut step_losses = Vec::new();
    for _ in 0..settings.epochs {
        for idx in minibatches(client.size(), settings.batch_size, &mut rng) {
            let xb = client.features.select_rows(&idx);
            let yb: Vec<usize> = idx.iter().map(|&i| client.labels[i]).collect();
            let (loss, tape) = local_objective(&client.model, &xb, &yb, ctx.as_ref(), settings)?;
            client.model.sgd_step(&tape, client.lr)?;
            step_losses.push(loss);
        }
    }
    Ok(LocalReport {
        client: client.id,
        step_losses,
    })
}

/// Fraction of argmax-correct predictions.
pub fn evaluate(model: &SplitModel, test: &Dataset) -> Result<f64, NumError> {
    let logits = model.forward(test.features())?;
    Ok(accuracy_of(&logits, test.labels()))
}

pub fn accuracy_of(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .row_iter()
        .zip(labels)
        .filter(|(r, &y)| argmax(r) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Data shares and the ideal versus realized objectives.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGap {
    /// `p_i = |D_i| / Σ_j |D_j|` for every client.
    pub shares: Vec<f64>,
    /// Mean loss over all clients.
    pub ideal: f64,
    /// Share-weighted loss over the participants.
    pub realized: f64,
    pub gap: f64,
}

pub fn objective_gap(losses: &[f64], sizes: &[usize], participants: &[usize]) -> ObjectiveGap {
    let total: usize = sizes.iter().sum();
    let shares: Vec<f64> = sizes.iter().map(|&s| s as f64 / total as f64).collect();
    let ideal = losses.iter().sum::<f64>() / losses.len() as f64;
    let mass: f64 = participants.iter().map(|&i| shares[i]).sum();
    let realized = participants
        .iter()
        .map(|&i| shares[i] / mass * losses[i])
        .sum::<f64>();
    ObjectiveGap {
        shares,
        ideal,
        realized,
        gap: ideal - realized,
    }
}

/// `(1/M) Σ_j KL(p_global(x_j) ‖ p_client(x_j))`.
pub fn client_distill_loss(
    global_probs: &Tensor,
    client: &SplitModel,
    samples: &Tensor,
) -> Result<f64, NumError> {
    let probs = softmax(&client.forward(samples)?);
    let mut total = 0.0;
    for (p, q) in global_probs.row_iter().zip(probs.row_iter()) {
        total += kl_divergence(p, q)?;
    }
    Ok(total / samples.rows() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub gap: ObjectiveGap,
    pub client_losses: Vec<f64>,
    pub pseudo_label_divergence: f64,
}

/// Objective gap over every client and the divergence between the
/// ensemble's pseudo-label histogram and the global label histogram.
pub fn diagnostics(
    global: &SplitModel,
    clients: &[ClientState],
    participants: &[usize],
    weights: &[f64],
    batch: &PseudoBatch,
    global_histogram: &[f64],
) -> Result<Diagnostics, ProtocolError> {
    let global_probs = softmax(&global.forward(batch.samples())?);
    let client_losses = clients
        .iter()
        .map(|c| client_distill_loss(&global_probs, &c.model, batch.samples()))
        .collect::<Result<Vec<_>, _>>()?;
    let sizes: Vec<usize> = clients.iter().map(ClientState::size).collect();
    let gap = objective_gap(&client_losses, &sizes, participants);
    let teachers: Vec<&SplitModel> = participants.iter().map(|&i| &clients[i].model).collect();
    let predicted = ensemble_argmax(batch.samples(), &teachers, weights)?;
    let hist = histogram_of(predicted.into_iter(), global_histogram.len());
    let pseudo_label_divergence = label_divergence(&hist.probs, global_histogram)?;
    Ok(Diagnostics {
        gap,
        client_losses,
        pseudo_label_divergence,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<usize>,
    pub weights: Vec<f64>,
    pub client_losses: Vec<f64>,
    pub client_acc_mean: f64,
    pub client_acc_std: f64,
    pub global_acc: f64,
    pub distill_loss: f64,
    pub generator_loss: f64,
    pub missing: Vec<usize>,
    pub shares: Vec<f64>,
    pub ideal_objective: f64,
    pub realized_objective: f64,
    pub objective_gap: f64,
    pub pseudo_label_divergence: f64,
    pub wall_seconds: f64,
}

pub struct ServerState {
    pub global: SplitModel,
    pub generator: GeneratorNet,
    pub ledger: ParticipationLedger,
    pub round: usize,
}

pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub train: Dataset,
    pub test: Dataset,
    pub global_histogram: Vec<f64>,
    pool: rayon::ThreadPool,
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset), ProtocolError> {
    Ok(match cfg.dataset {
        DatasetChoice::Synthetic => {
            let (c, d) = (cfg.synthetic_classes, cfg.synthetic_extent());
            (
                synthetic_mixture(c, d, cfg.synthetic_train, derive_seed(cfg.seed, &[STREAM_DATA, 0]), Split::Train),
                synthetic_mixture(c, d, cfg.synthetic_test, derive_seed(cfg.seed, &[STREAM_DATA, 1]), Split::Test),
            )
        }
        DatasetChoice::FashionIdx => {
            let dir = &cfg.data_dir;
            (
                load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"), Split::Train)?,
                load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"), Split::Test)?,
            )
        }
        DatasetChoice::Ucihar => load_ucihar(&cfg.data_dir)?,
    })
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self, ProtocolError> {
        cfg.validate()?;
        let (train, test) = load_datasets(&cfg)?;
        Self::with_data(cfg, train, test)
    }

    /// Builds the federation on `train`/`test` after standardizing both
    /// with the training moments.
    pub fn with_data(cfg: ExperimentConfig, train: Dataset, test: Dataset) -> Result<Self, ProtocolError> {
        cfg.validate()?;
        let moments = train.moments();
        let (train, test) = (train.standardized(&moments), test.standardized(&moments));
        if cfg.clients > train.len() {
            return Err(ConfigError::Invalid {
                key: "clients".into(),
                message: format!("{} clients exceed {} training samples", cfg.clients, train.len()),
            }
            .into());
        }
        let dims = ModelDims {
            input_extent: train.input_extent(),
            feature_extent: cfg.feature_extent,
            class_count: train.class_count(),
        };
        let partition = dirichlet_partition(
            &train,
            cfg.clients,
            cfg.dirichlet_alpha,
            derive_seed(cfg.seed, &[STREAM_DATA, 2]),
        )?;
        let specs = assign_specs(cfg.clients, cfg.heterogeneity, dims, derive_seed(cfg.seed, &[STREAM_MODELS, 0]));
        let clients: Vec<ClientState> = specs
            .into_iter()
            .zip(partition.clients)
            .enumerate()
            .map(|(id, (spec, indices))| {
                let model = SplitModel::build(spec, derive_seed(cfg.seed, &[STREAM_MODELS, 1, id as u64]));
                ClientState::new(id, model, &train, indices, cfg.lr)
            })
            .collect();
        let global = SplitModel::build(
            ModelSpec::new(cfg.global_family, Capacity::Full, dims),
            derive_seed(cfg.seed, &[STREAM_MODELS, 2]),
        );
        let generator = GeneratorNet::build(
            GeneratorShape {
                output_scale: cfg.generator_scale,
                ..GeneratorShape::new(dims.input_extent, dims.class_count)
            },
            derive_seed(cfg.seed, &[STREAM_GENERATOR, 0]),
        );
        let all: Vec<usize> = (0..train.len()).collect();
        let global_histogram = label_histogram(&train, &all).probs;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| ProtocolError::Pool(e.to_string()))?;
        Ok(Self {
            server: ServerState {
                global,
                generator,
                ledger: ParticipationLedger::new(cfg.participants, cfg.rounds),
                round: 0,
            },
            cfg,
            clients,
            train,
            test,
            global_histogram,
            pool,
        })
    }

    pub fn local_settings(&self, distill: bool) -> LocalSettings {
        let mut contrastive = self.cfg.contrastive();
        let mut kd_weight = self.cfg.kd_weight;
        if !distill {
            contrastive.coefficient = 0.0;
            kd_weight = 0.0;
        }
        LocalSettings {
            epochs: self.cfg.local_epochs,
            batch_size: self.cfg.batch_size,
            kd_weight,
            contrastive,
        }
    }

    fn round_weights(&self, participants: &[usize]) -> Result<Vec<ClientWeight>, ProtocolError> {
        if self.cfg.variant == Variant::NoIpwd {
            return Ok(uniform_weights(participants));
        }
        let hists: Vec<Vec<f64>> = self.clients.iter().map(|c| c.histogram.clone()).collect();
        Ok(client_weights(
            &self.server.ledger,
            &hists,
            &self.global_histogram,
            &self.cfg.ipwd(),
            participants,
        )?)
    }

    pub fn run_round(&mut self) -> Result<RoundRecord, ProtocolError> {
        let started = Instant::now();
        let round = self.server.round + 1;
        let cfg = self.cfg.clone();
        let seed = cfg.seed;
        let classes = self.train.class_count();
        let distill = cfg.variant.distills_in(round);

        let participants = sample_clients(cfg.clients, cfg.participants, seed, round);
        self.server.ledger.record(participants.clone())?;
        let weights = self.round_weights(&participants)?;
        let w: Vec<f64> = weights.iter().map(|w| w.normalized).collect();

        let round_seed = |stream: u64| derive_seed(seed, &[STREAM_GENERATOR, round as u64, stream]);
        let labels = balanced_labels(cfg.pseudo_batch, classes);
        let mut batch = self.server.generator.generate(&labels, round_seed(1))?;
        let mut missing = Vec::new();
        if distill {
            let teachers: Vec<&SplitModel> = participants.iter().map(|&i| &self.clients[i].model).collect();
            missing = missing_from(&ensemble_argmax(batch.samples(), &teachers, &w)?, classes);
            let per_class = cfg.fill_count.unwrap_or_else(|| default_fill_count(cfg.pseudo_batch, classes));
            batch = fill_missing(&self.server.generator, &batch, &missing, per_class, round_seed(2))?;
        }

        let settings = self.local_settings(distill);
        let global = &self.server.global;
        let selected: Vec<bool> = (0..cfg.clients).map(|i| participants.contains(&i)).collect();
        let batch_ref = &batch;
        let reports: Vec<LocalReport> = self.pool.install(|| {
            self.clients
                .par_iter_mut()
                .filter(|c| selected[c.id])
                .map(|c| {
                    let s = derive_seed(seed, &[STREAM_CLIENT, round as u64, c.id as u64]);
                    local_update(c, global, Some(batch_ref), &settings, s)
                })
                .collect::<Result<Vec<_>, _>>()
        })?;

        let teachers: Vec<&SplitModel> = participants.iter().map(|&i| &self.clients[i].model).collect();
        let mut distill_loss = f64::NAN;
        let mut generator_loss = f64::NAN;
        if distill {
            let probs = teacher_probabilities(&teachers, batch.samples())?;
            let s = confidence(&probs, &w)?;
            if cfg.variant == Variant::NoIpwd {
                batch.score_uniform(s)?;
            } else {
                batch.score(s, &cfg.ipwd())?;
            }
            for step in 0..cfg.generator_steps {
                generator_loss = self.server.generator.train_step(
                    &teachers,
                    &w,
                    cfg.pseudo_batch,
                    cfg.generator_lr,
                    round_seed(100 + step as u64),
                )?;
            }
            for _ in 0..cfg.distill_steps {
                distill_loss = server_distill_step(&mut self.server.global, &batch, &probs, &w, cfg.server_rate())?;
            }
        }

        let diag = diagnostics(
            &self.server.global,
            &self.clients,
            &participants,
            &w,
            &batch,
            &self.global_histogram,
        )?;
        let accs = self
            .clients
            .iter()
            .map(|c| evaluate(&c.model, &self.test))
            .collect::<Result<Vec<_>, _>>()?;
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / accs.len() as f64;
        let global_acc = evaluate(&self.server.global, &self.test)?;
        self.server.round = round;

        Ok(RoundRecord {
            round,
            weights: w,
            client_losses: reports.iter().map(LocalReport::mean_total).collect(),
            client_acc_mean: mean,
            client_acc_std: var.sqrt(),
            global_acc,
            distill_loss,
            generator_loss,
            missing,
            shares: participants.iter().map(|&i| diag.gap.shares[i]).collect(),
            ideal_objective: diag.gap.ideal,
            realized_objective: diag.gap.realized,
            objective_gap: diag.gap.gap,
            pseudo_label_divergence: diag.pseudo_label_divergence,
            participants,
            wall_seconds: started.elapsed().as_secs_f64(),
        })
    }

    /// Mean participation frequency over all clients.
    pub fn mean_participation(&self) -> f64 {
        (0..self.clients.len())
            .map(|i| self.server.ledger.participation_frequency(i))
            .sum::<f64>()
            / self.clients.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rounds: usize,
    pub client_acc_mean: f64,
    pub client_acc_std: f64,
    pub global_acc: f64,
    pub mean_participation: f64,
}

pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub summary: Summary,
}

/// Runs all configured rounds; `on_round` sees each record as it is made.
pub fn run_experiment_with(
    cfg: ExperimentConfig,
    mut on_round: impl FnMut(&RoundRecord),
) -> Result<RunOutput, ProtocolError> {
    let mut exp = Experiment::new(cfg)?;
    run_rounds(&mut exp, &mut on_round)
}

pub fn run_experiment(cfg: ExperimentConfig) -> Result<RunOutput, ProtocolError> {
    run_experiment_with(cfg, |_| {})
}

pub fn run_rounds(
    exp: &mut Experiment,
    on_round: &mut dyn FnMut(&RoundRecord),
) -> Result<RunOutput, ProtocolError> {
    let mut records = Vec::with_capacity(exp.cfg.rounds);
    for _ in exp.server.round..exp.cfg.rounds {
        let r = exp.run_round()?;
        on_round(&r);
        records.push(r);
    }
    let last = records.last();
    let summary = Summary {
        rounds: records.len(),
        client_acc_mean: last.map_or(f64::NAN, |r| r.client_acc_mean),
        client_acc_std: last.map_or(f64::NAN, |r| r.client_acc_std),
        global_acc: last.map_or(f64::NAN, |r| r.global_acc),
        mean_participation: exp.mean_participation(),
    };
    Ok(RunOutput { records, summary })
}

/// Writes the global model and generator of a finished experiment.
pub fn save_server(exp: &Experiment, dir: &Path) -> Result<(), crate::checkpoint::CheckpointError> {
    std::fs::create_dir_all(dir).map_err(|source| crate::checkpoint::CheckpointError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    crate::checkpoint::save_model(&dir.join("global.ckpt"), &exp.server.global, derive_seed(exp.cfg.seed, &[STREAM_MODELS, 2]))?;
    exp.server
        .generator
        .save(&dir.join("generator.ckpt"), derive_seed(exp.cfg.seed, &[STREAM_GENERATOR, 0]))
}

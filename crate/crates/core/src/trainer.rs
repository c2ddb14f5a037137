//! Optimization loop: linear warmup with polynomial decay, adaptive moments
//! with decoupled weight decay, gradient accumulation over micro-batches,
//! per-step curve logging with EMA smoothing, and greedy-decoding evaluation
//! with a token-level hallucination proxy.

use crate::adaptive_beta::{
    adapt_beta, max_similarity_bucket, pool_tokens, similarity_distribution, BetaState,
};
use crate::error::{Error, Result};
use crate::numerics::SeededRng;
use crate::projector::{
    mlp_forward, vib_forward_eval, KlDirection, MlpGradients, MlpProjectorParams, NoiseSource,
    PriorSpec, VibConfig, VibGradients, VibProjectorParams,
};
use crate::toy_model::{
    backward_all, bernoulli_keep_mask, decode_greedy, ft_backward, ft_loss, total_loss, BetaPolicy,
    DataSample, DropoutSpec, FrozenDecoderParams,
};

/// Scale-head init used whenever a stochastic projector is built inside the
/// trainer: small random weights plus a constant output bias.
pub const SIGMA_INIT_SCALE: f64 = 0.1;
/// Output bias of the fresh scale head. `softplus(-4) ~ 0.018`: the posterior
/// starts tight, and the compression term inflates it toward its optimum over
/// the run.
pub const SIGMA_INIT_OUT_BIAS: f64 = -4.0;

/// Which objective and projector the loop trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Deterministic projector, plain cross-entropy.
    Ft,
    /// Deterministic projector with input dropout.
    FtDropIn,
    /// Deterministic projector with output dropout.
    FtDropOut,
    /// Stochastic projector with a constant compression weight.
    VibFixedBeta,
    /// Stochastic projector with the entropy-driven schedule.
    AdaVib,
    /// Entropy-driven schedule but the sample collapses onto the mean.
    AdaVibNoRepar,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Ft => "ft",
            TrainMode::FtDropIn => "ft-drop-in",
            TrainMode::FtDropOut => "ft-drop-out",
            TrainMode::VibFixedBeta => "vib-fixed-beta",
            TrainMode::AdaVib => "adavib",
            TrainMode::AdaVibNoRepar => "adavib-no-repar",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ft" => Ok(TrainMode::Ft),
            "ft-drop-in" => Ok(TrainMode::FtDropIn),
            "ft-drop-out" => Ok(TrainMode::FtDropOut),
            "vib-fixed-beta" => Ok(TrainMode::VibFixedBeta),
            "adavib" => Ok(TrainMode::AdaVib),
            "adavib-no-repar" => Ok(TrainMode::AdaVibNoRepar),
            other => Err(Error::Config(format!("unknown train mode '{other}'"))),
        }
    }

    pub fn is_stochastic(self) -> bool {
        matches!(
            self,
            TrainMode::VibFixedBeta | TrainMode::AdaVib | TrainMode::AdaVibNoRepar
        )
    }

    pub const ALL: [TrainMode; 6] = [
        TrainMode::Ft,
        TrainMode::FtDropIn,
        TrainMode::FtDropOut,
        TrainMode::VibFixedBeta,
        TrainMode::AdaVib,
        TrainMode::AdaVibNoRepar,
    ];
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub base_beta: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub micro_batch: usize,
    pub grad_accum: usize,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub poly_decay_power: f64,
    pub dropout_rate: f64,
    pub seed: u64,
    pub kl_direction: KlDirection,
    pub pooled_posterior: bool,
    /// Hidden width of the projector MLP heads.
    pub hidden_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::AdaVib,
            base_beta: 1e-7,
            lr: 3e-5,
            weight_decay: 0.05,
            micro_batch: 2,
            grad_accum: 8,
            epochs: 1,
            warmup_fraction: 0.1,
            poly_decay_power: 1.0,
            dropout_rate: 0.1,
            seed: 0,
            kl_direction: KlDirection::AsPrinted,
            pooled_posterior: false,
            hidden_dim: 32,
        }
    }
}

impl TrainConfig {
    /// Desk-scale experiment preset: the default recipe with the learning
    /// rate and compression weight rescaled for the tiny frozen decoder and
    /// toy vocabulary, everything else untouched.
    pub fn toy_experiment(mode: TrainMode, seed: u64) -> Self {
        TrainConfig {
            mode,
            seed,
            lr: 2e-2,
            base_beta: 5e-4,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || self.weight_decay < 0.0 || self.base_beta < 0.0 {
            return Err(Error::InvalidArgument(
                "rates must be non-negative".to_string(),
            ));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::InvalidArgument(
                "warmup fraction must lie in (0, 1)".to_string(),
            ));
        }
        if self.micro_batch == 0 || self.grad_accum == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument(
                "micro_batch, grad_accum and epochs must be at least 1".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(
                "dropout rate must lie in [0, 1)".to_string(),
            ));
        }
        if self.hidden_dim == 0 {
            return Err(Error::InvalidArgument(
                "hidden_dim must be at least 1".to_string(),
            ));
        }
        Ok(())
    }

    pub fn vib_config(&self) -> VibConfig {
        VibConfig {
            direction: self.kl_direction,
            pooled_posterior: self.pooled_posterior,
            sigma_floor: 1e-8,
        }
    }
}

/// Learning rate at an optimizer step: linear ramp from zero over the first
/// `ceil(warmup_fraction * total)` steps, then polynomial decay to zero.
pub fn lr_at_step(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} exceeds total steps {total_steps}"
        )));
    }
    let warmup = (cfg.warmup_fraction * total_steps as f64).ceil() as usize;
    if step < warmup {
        return Ok(cfg.lr * step as f64 / warmup as f64);
    }
    let decay_len = total_steps - warmup;
    if decay_len == 0 {
        return Ok(0.0);
    }
    let progress = (step - warmup) as f64 / decay_len as f64;
    Ok(cfg.lr * (1.0 - progress).powf(cfg.poly_decay_power))
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One adaptive-moment update with decoupled weight decay. Decay multiplies
/// the parameter by `1 - lr * wd` before the moment update is applied.
pub fn optimizer_step(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != m.len() || param.len() != v.len() {
        return Err(Error::Dimension(format!(
            "optimizer buffers disagree: param {} grad {} m {} v {}",
            param.len(),
            grad.len(),
            m.len(),
            v.len()
        )));
    }
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..param.len() {
        param[i] *= 1.0 - lr * weight_decay;
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// First/second moment buffers for a set of named tensors.
struct MomentState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl MomentState {
    fn for_lengths(lengths: &[usize]) -> Self {
        MomentState {
            m: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            v: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

/// What the loop produced at one optimizer step (means over the chunk).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub kl: f64,
    pub entropy: f64,
    pub effective_beta: f64,
    pub grad_norm: f64,
}

/// Per-step records plus exponentially smoothed companions.
#[derive(Clone, Debug, Default)]
pub struct TrainingLog {
    pub records: Vec<StepRecord>,
    pub ema: Vec<StepRecord>,
}

/// Smoothing factor of the EMA view.
pub const EMA_FACTOR: f64 = 0.98;

impl TrainingLog {
    fn push(&mut self, record: StepRecord) {
        let ema = match self.ema.last() {
            None => record,
            Some(prev) => StepRecord {
                step: record.step,
                lr: record.lr,
                ce: EMA_FACTOR * prev.ce + (1.0 - EMA_FACTOR) * record.ce,
                kl: EMA_FACTOR * prev.kl + (1.0 - EMA_FACTOR) * record.kl,
                entropy: EMA_FACTOR * prev.entropy + (1.0 - EMA_FACTOR) * record.entropy,
                effective_beta: EMA_FACTOR * prev.effective_beta
                    + (1.0 - EMA_FACTOR) * record.effective_beta,
                grad_norm: EMA_FACTOR * prev.grad_norm + (1.0 - EMA_FACTOR) * record.grad_norm,
            },
        };
        self.records.push(record);
        self.ema.push(ema);
    }

    pub fn to_csv(&self) -> String {
        Self::csv_of(&self.records)
    }

    pub fn ema_to_csv(&self) -> String {
        Self::csv_of(&self.ema)
    }

    fn csv_of(records: &[StepRecord]) -> String {
        let mut out = String::from("step,lr,ce,kl,entropy,beta,grad_norm\n");
        for r in records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.step, r.lr, r.ce, r.kl, r.entropy, r.effective_beta, r.grad_norm
            ));
        }
        out
    }
}

/// Trained projector weights, tagged by architecture.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainedParams {
    Mlp(MlpProjectorParams),
    Vib(VibProjectorParams),
}

impl TrainedParams {
    pub fn kind(&self) -> &'static str {
        match self {
            TrainedParams::Mlp(_) => "mlp",
            TrainedParams::Vib(_) => "vib",
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            TrainedParams::Mlp(p) => p.output_dim(),
            TrainedParams::Vib(p) => p.output_dim(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            TrainedParams::Mlp(p) => p.input_dim(),
            TrainedParams::Vib(p) => p.input_dim(),
        }
    }
}

/// Result of one training run.
pub struct TrainOutcome {
    pub params: TrainedParams,
    pub log: TrainingLog,
    pub beta_state: BetaState,
}

struct ChunkAccumulator {
    mlp: Option<MlpGradients>,
    vib: Option<VibGradients>,
    ce: f64,
    kl: f64,
    entropy: f64,
    beta: f64,
    count: usize,
}

impl ChunkAccumulator {
    fn new() -> Self {
        ChunkAccumulator {
            mlp: None,
            vib: None,
            ce: 0.0,
            kl: 0.0,
            entropy: 0.0,
            beta: 0.0,
            count: 0,
        }
    }
}

/// Trains a projector on the given samples with one optimizer step per
/// `micro_batch * grad_accum` consecutive samples, in dataset order, with
/// deterministic summed-then-scaled gradient reduction.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[DataSample],
    decoder: &FrozenDecoderParams,
    init: Option<&MlpProjectorParams>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument(
            "training set must not be empty".to_string(),
        ));
    }
    for s in train_set {
        s.validate(decoder.vocab_size())?;
    }
    let input_dim = train_set[0].visual.cols();
    let d_z = decoder.d_z();
    if let Some(p) = init {
        if p.input_dim() != input_dim || p.output_dim() != d_z {
            return Err(Error::Config(format!(
                "init projector maps {}->{} but data/decoder need {}->{}",
                p.input_dim(),
                p.output_dim(),
                input_dim,
                d_z
            )));
        }
    }

    let root = SeededRng::new(cfg.seed);
    let mut init_rng = root.split(10);
    let mut sigma_rng = root.split(11);
    let mut noise_rng = root.split(12);
    let mut dropout_rng = root.split(13);

    let fresh_mlp =
        |rng: &mut SeededRng| MlpProjectorParams::seeded(input_dim, cfg.hidden_dim, d_z, 0.5, rng);
    let mut params = if cfg.mode.is_stochastic() {
        let mu = match init {
            Some(p) => p.clone(),
            None => fresh_mlp(&mut init_rng),
        };
        TrainedParams::Vib(VibProjectorParams::from_pretrained(
            mu,
            SIGMA_INIT_SCALE,
            SIGMA_INIT_OUT_BIAS,
            &mut sigma_rng,
        ))
    } else {
        TrainedParams::Mlp(match init {
            Some(p) => p.clone(),
            None => fresh_mlp(&mut init_rng),
        })
    };

    let prior = PriorSpec::standard_normal(d_z);
    let vib_cfg = cfg.vib_config();
    let chunk_size = cfg.micro_batch * cfg.grad_accum;
    let steps_per_epoch = train_set.len().div_ceil(chunk_size);
    let total_steps = cfg.epochs * steps_per_epoch;

    let lengths: Vec<usize> = match &params {
        TrainedParams::Mlp(p) => p.views().iter().map(|(_, v)| v.len()).collect(),
        TrainedParams::Vib(p) => p.views().iter().map(|(_, v)| v.len()).collect(),
    };
    let mut moments = MomentState::for_lengths(&lengths);
    let mut log = TrainingLog::default();
    let mut beta_state = BetaState::new(cfg.base_beta)?;

    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        for chunk in train_set.chunks(chunk_size) {
            let mut acc = ChunkAccumulator::new();
            for sample in chunk {
                accumulate_sample(
                    cfg,
                    sample,
                    &params,
                    &prior,
                    decoder,
                    vib_cfg,
                    &mut noise_rng,
                    &mut dropout_rng,
                    &mut beta_state,
                    step,
                    &mut acc,
                )?;
            }
            let inv = 1.0 / acc.count as f64;
            // Schedule evaluated one past the step index: warmup starts off
            // zero at index 0 and the decay reaches zero only at the very end.
            let lr = lr_at_step(step + 1, total_steps, cfg)?;
            moments.t += 1;
            let grad_norm;
            match (&mut params, acc.mlp.as_mut(), acc.vib.as_mut()) {
                (TrainedParams::Mlp(p), Some(g), None) => {
                    g.scale(inv);
                    grad_norm = g.squared_norm().sqrt();
                    let mut views = p.views_mut();
                    let grad_views = g.views();
                    for (idx, (view, grad)) in views.iter_mut().zip(grad_views.iter()).enumerate() {
                        optimizer_step(
                            view.1,
                            grad.1,
                            &mut moments.m[idx],
                            &mut moments.v[idx],
                            moments.t,
                            lr,
                            cfg.weight_decay,
                        )?;
                    }
                }
                (TrainedParams::Vib(p), None, Some(g)) => {
                    g.scale(inv);
                    grad_norm = g.squared_norm().sqrt();
                    let grad_views = g.views();
                    let mut idx = 0;
                    for head in [&mut p.mu_head, &mut p.sigma_head] {
                        let mut views = head.views_mut();
                        for view in views.iter_mut() {
                            optimizer_step(
                                view.1,
                                grad_views[idx].1,
                                &mut moments.m[idx],
                                &mut moments.v[idx],
                                moments.t,
                                lr,
                                cfg.weight_decay,
                            )?;
                            idx += 1;
                        }
                    }
                }
                _ => {
                    return Err(Error::State(
                        "gradient accumulator does not match parameter kind".to_string(),
                    ))
                }
            }
            log.push(StepRecord {
                step,
                lr,
                ce: acc.ce * inv,
                kl: acc.kl * inv,
                entropy: acc.entropy * inv,
                effective_beta: acc.beta * inv,
                grad_norm,
            });
            step += 1;
        }
    }

    Ok(TrainOutcome {
        params,
        log,
        beta_state,
    })
}

#[allow(clippy::too_many_arguments)]
fn accumulate_sample(
    cfg: &TrainConfig,
    sample: &DataSample,
    params: &TrainedParams,
    prior: &PriorSpec,
    decoder: &FrozenDecoderParams,
    vib_cfg: VibConfig,
    noise_rng: &mut SeededRng,
    dropout_rng: &mut SeededRng,
    beta_state: &mut BetaState,
    step: usize,
    acc: &mut ChunkAccumulator,
) -> Result<()> {
    match (cfg.mode, params) {
        (TrainMode::Ft | TrainMode::FtDropIn | TrainMode::FtDropOut, TrainedParams::Mlp(p)) => {
            let dropout = match cfg.mode {
                TrainMode::FtDropIn => Some(DropoutSpec {
                    input_mask: Some(bernoulli_keep_mask(
                        sample.visual.rows(),
                        sample.visual.cols(),
                        cfg.dropout_rate,
                        dropout_rng,
                    )),
                    output_mask: None,
                    rate: cfg.dropout_rate,
                }),
                TrainMode::FtDropOut => Some(DropoutSpec {
                    input_mask: None,
                    output_mask: Some(bernoulli_keep_mask(
                        sample.visual.rows(),
                        decoder.d_z(),
                        cfg.dropout_rate,
                        dropout_rng,
                    )),
                    rate: cfg.dropout_rate,
                }),
                _ => None,
            };
            let (ce, cache) = ft_loss(sample, p, decoder, dropout.as_ref())?;
            if !ce.is_finite() {
                return Err(Error::State(format!(
                    "non-finite loss at step {step}, sample {}",
                    sample.id
                )));
            }
            let sim = similarity_distribution(&pool_tokens(&cache.z)?, &decoder.token_embeddings)?;
            let grads = ft_backward(&cache, p, decoder)?;
            match acc.mlp.as_mut() {
                Some(g) => g.add_assign(&grads)?,
                None => acc.mlp = Some(grads),
            }
            acc.ce += ce;
            acc.entropy += sim.entropy;
            acc.count += 1;
        }
        (
            TrainMode::VibFixedBeta | TrainMode::AdaVib | TrainMode::AdaVibNoRepar,
            TrainedParams::Vib(p),
        ) => {
            let policy = match cfg.mode {
                TrainMode::VibFixedBeta => BetaPolicy::Fixed {
                    value: cfg.base_beta,
                },
                _ => BetaPolicy::Adaptive {
                    base: cfg.base_beta,
                },
            };
            let noise = match cfg.mode {
                TrainMode::AdaVibNoRepar => NoiseSource::Zero,
                _ => NoiseSource::Rng(noise_rng),
            };
            let (breakdown, cache) = total_loss(sample, p, prior, decoder, vib_cfg, policy, noise)?;
            if !breakdown.total.is_finite() {
                return Err(Error::State(format!(
                    "non-finite loss at step {step}, sample {}",
                    sample.id
                )));
            }
            if matches!(policy, BetaPolicy::Adaptive { .. }) {
                adapt_beta(beta_state, &cache.sim, step as u64);
            }
            let grads = backward_all(&cache, p, prior, decoder)?;
            match acc.vib.as_mut() {
                Some(g) => g.add_assign(&grads)?,
                None => acc.vib = Some(grads),
            }
            acc.ce += breakdown.ce;
            acc.kl += breakdown.kl;
            acc.entropy += cache.sim.entropy;
            acc.beta += breakdown.effective_beta;
            acc.count += 1;
        }
        _ => {
            return Err(Error::State(
                "trainer mode does not match parameter kind".to_string(),
            ))
        }
    }
    Ok(())
}

/// One evaluated sample.
#[derive(Clone, Debug)]
pub struct EvalRecord {
    pub id: u64,
    pub decoded: Vec<usize>,
    pub hallucinated: bool,
    pub entropy: f64,
    pub normalized_entropy: f64,
    pub max_sim_bucket: usize,
}

/// Aggregate evaluation of a checkpoint on an eval split.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub per_sample: Vec<EvalRecord>,
    pub mean_entropy: f64,
    /// Fraction of samples whose decode emits an object token absent from
    /// the gold set.
    pub proxy_rate: f64,
    /// Max-similarity bucket counts over all samples.
    pub bucket_counts: [u64; 10],
    /// Max-similarity bucket counts over proxy-hallucinated samples only.
    pub hallucinated_bucket_counts: [u64; 10],
}

impl EvalReport {
    /// Share of hallucinated samples whose max similarity sits in [0.9, 1.0);
    /// zero when nothing hallucinated.
    pub fn hallucinated_top_bucket_share(&self) -> f64 {
        let total: u64 = self.hallucinated_bucket_counts.iter().sum();
        if total == 0 {
            0.0
        } else {
            self.hallucinated_bucket_counts[9] as f64 / total as f64
        }
    }
}

/// Greedy-decodes every eval sample and scores the hallucination proxy:
/// object tokens are the ids below `n_objects`, and emitting one that is
/// missing from the sample's gold set counts the sample as hallucinated.
pub fn evaluate(
    params: &TrainedParams,
    eval_set: &[DataSample],
    decoder: &FrozenDecoderParams,
    n_objects: usize,
    max_decode_len: usize,
) -> Result<EvalReport> {
    if eval_set.is_empty() {
        return Err(Error::InvalidArgument(
            "evaluation set must not be empty".to_string(),
        ));
    }
    if params.output_dim() != decoder.d_z() {
        return Err(Error::Config(format!(
            "checkpoint produces dim {} but decoder expects {}",
            params.output_dim(),
            decoder.d_z()
        )));
    }
    let mut per_sample = Vec::with_capacity(eval_set.len());
    let mut entropy_acc = 0.0;
    let mut hallucinated_count = 0usize;
    let mut bucket_counts = [0u64; 10];
    let mut hallucinated_bucket_counts = [0u64; 10];
    for sample in eval_set {
        sample.validate(decoder.vocab_size())?;
        let z = match params {
            TrainedParams::Mlp(p) => mlp_forward(&sample.visual, p)?,
            TrainedParams::Vib(p) => vib_forward_eval(&sample.visual, p)?,
        };
        let sim = similarity_distribution(&pool_tokens(&z)?, &decoder.token_embeddings)?;
        let bucket = max_similarity_bucket(&sim.probs);
        let decoded = decode_greedy(&z, &sample.prompt, decoder, max_decode_len)?;
        let hallucinated = decoded
            .iter()
            .any(|&t| t < n_objects && !sample.gold_objects.contains(&t));
        entropy_acc += sim.entropy;
        bucket_counts[bucket] += 1;
        if hallucinated {
            hallucinated_count += 1;
            hallucinated_bucket_counts[bucket] += 1;
        }
        per_sample.push(EvalRecord {
            id: sample.id,
            decoded,
            hallucinated,
            entropy: sim.entropy,
            normalized_entropy: sim.normalized_entropy,
            max_sim_bucket: bucket,
        });
    }
    Ok(EvalReport {
        mean_entropy: entropy_acc / eval_set.len() as f64,
        proxy_rate: hallucinated_count as f64 / eval_set.len() as f64,
        bucket_counts,
        hallucinated_bucket_counts,
        per_sample,
    })
}

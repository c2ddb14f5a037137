//! Shared experiment pipeline: an alignment pretraining phase on an unbiased
//! corpus produces the deterministic projector every mode fine-tunes from,
//! mirroring how a projector arrives pretrained before any fine-tuning run.
//!
//! Pipeline: `pretrain_config` strips the co-occurrence bias from a synthesis
//! config; `pretrain_projector` trains the deterministic baseline on that
//! unbiased corpus; each experiment mode then fine-tunes on the biased train
//! split starting from those weights and is scored on the flip split.

use crate::data_io::{build_world, generate, SynthConfig, World};
use crate::error::{Error, Result};
use crate::projector::MlpProjectorParams;
use crate::toy_model::DataSample;
use crate::trainer::{
    evaluate, train, EvalReport, TrainConfig, TrainMode, TrainOutcome, TrainedParams,
};

/// Greedy decode budget used across evaluations.
pub const EVAL_MAX_DECODE_LEN: usize = 16;

/// The unbiased alignment-pretraining corpus for a given experiment config:
/// same world and dimensions, no co-occurrence pairs, no eval split, and a
/// seed offset so pretraining scenes differ from fine-tuning scenes.
pub fn pretrain_config(cfg: &SynthConfig) -> SynthConfig {
    SynthConfig {
        cooccur_pairs: Vec::new(),
        eval_size: 0,
        seed: cfg.seed ^ 0x9E37_79B9_7F4A_7C15,
        ..cfg.clone()
    }
}

/// Trains the deterministic projector on the unbiased corpus; the result
/// serves as the shared pretrained initialization. Pretraining runs longer
/// than a fine-tune so the alignment is well converged before any experiment
/// mode touches it.
pub fn pretrain_projector(cfg: &SynthConfig, world: &World) -> Result<MlpProjectorParams> {
    let pre_cfg = pretrain_config(cfg);
    let pre_ds = generate(&pre_cfg)?;
    let train_cfg = TrainConfig {
        epochs: 10,
        lr: 5e-3,
        ..TrainConfig::toy_experiment(TrainMode::Ft, cfg.seed)
    };
    let outcome = train(&train_cfg, &pre_ds.train, &world.decoder, None)?;
    match outcome.params {
        TrainedParams::Mlp(p) => Ok(p),
        TrainedParams::Vib(_) => Err(Error::State(
            "pretraining unexpectedly produced a stochastic projector".to_string(),
        )),
    }
}

/// One fine-tuned and evaluated mode.
pub struct ModeRun {
    pub outcome: TrainOutcome,
    pub report: EvalReport,
}

/// Fine-tunes `mode` from the pretrained weights on the biased train split
/// and evaluates on the flip split. `base_beta` overrides the preset weight
/// when given (the sweep uses this).
pub fn run_mode(
    mode: TrainMode,
    seed: u64,
    train_split: &[DataSample],
    eval_split: &[DataSample],
    world: &World,
    init: &MlpProjectorParams,
    base_beta: Option<f64>,
) -> Result<ModeRun> {
    let mut cfg = TrainConfig::toy_experiment(mode, seed);
    if let Some(b) = base_beta {
        cfg.base_beta = b;
    }
    let outcome = train(&cfg, train_split, &world.decoder, Some(init))?;
    let report = evaluate(
        &outcome.params,
        eval_split,
        &world.decoder,
        world.n_objects,
        EVAL_MAX_DECODE_LEN,
    )?;
    Ok(ModeRun { outcome, report })
}

/// Everything the comparison experiments need for one seed.
pub struct ExperimentContext {
    pub synth: SynthConfig,
    pub world: World,
    pub train_split: Vec<DataSample>,
    pub eval_split: Vec<DataSample>,
    pub pretrained: MlpProjectorParams,
}

/// Builds the world, the biased corpus and the shared pretrained projector
/// for one seed of the default experiment.
pub fn prepare_default_experiment(seed: u64) -> Result<ExperimentContext> {
    let synth = SynthConfig {
        seed,
        ..SynthConfig::default()
    };
    let world = build_world(&synth)?;
    let ds = generate(&synth)?;
    let pretrained = pretrain_projector(&synth, &world)?;
    Ok(ExperimentContext {
        synth,
        world,
        train_split: ds.train,
        eval_split: ds.eval_flip,
        pretrained,
    })
}

/// Mean of a window of EMA-smoothed values: `first` takes the leading
/// fraction of steps, otherwise the trailing fraction.
pub fn ema_window_mean(values: &[f64], fraction: f64, first: bool) -> f64 {
    let n = values.len();
    let w = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
    let slice = if first {
        &values[..w]
    } else {
        &values[n - w..]
    };
    slice.iter().sum::<f64>() / slice.len() as f64
}

/// Outcome of a randomized gradient-check batch.
pub struct GradCheckSuiteReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub params_checked: usize,
}

/// Runs the finite-difference gradient check over `instances` random small
/// problems (latent dim <= 4, tokens <= 3, vocabulary <= 8) with fixed noise
/// per instance, and reports the worst relative error seen.
pub fn grad_check_suite(seed: u64, step: f64, instances: usize) -> Result<GradCheckSuiteReport> {
    use crate::numerics::{Matrix, SeededRng};
    use crate::projector::{MlpProjectorParams, PriorSpec, VibConfig, VibProjectorParams};
    use crate::toy_model::{grad_check, FrozenDecoderParams};

    let mut max_rel_err = 0.0_f64;
    let mut worst = String::from("none");
    let mut params_checked = 0usize;
    for i in 0..instances {
        let mut rng = SeededRng::new(seed).split(100 + i as u64);
        let d_z = 1 + rng.next_below(4);
        let tokens = 1 + rng.next_below(3);
        let vocab = 4 + rng.next_below(5);
        let input_dim = 2 + rng.next_below(3);
        let hidden = 2 + rng.next_below(3);
        let decoder = FrozenDecoderParams::seeded(vocab, d_z, d_z, &mut rng)?;
        let mu = MlpProjectorParams::seeded(input_dim, hidden, d_z, 0.8, &mut rng);
        let params = VibProjectorParams::from_pretrained(mu, 0.5, 0.3, &mut rng);
        let prior = PriorSpec::standard_normal(d_z);
        let target_len = 1 + rng.next_below(2);
        let sample = DataSample {
            id: i as u64,
            visual: Matrix::seeded_normal(tokens, input_dim, 1.0, &mut rng),
            prompt: vec![rng.next_below(vocab)],
            target: (0..target_len).map(|_| rng.next_below(vocab)).collect(),
            gold_objects: Default::default(),
            present_spurious: false,
        };
        let eps = Matrix::seeded_normal(tokens, d_z, 1.0, &mut rng);
        let report = grad_check(
            &sample,
            &params,
            &prior,
            &decoder,
            VibConfig::default(),
            1e-2,
            step,
            &eps,
        )?;
        params_checked += report.params_checked;
        if report.max_rel_err > max_rel_err {
            max_rel_err = report.max_rel_err;
            worst = format!("instance {i}: {}", report.worst_param);
        }
    }
    Ok(GradCheckSuiteReport {
        max_rel_err,
        worst,
        params_checked,
    })
}

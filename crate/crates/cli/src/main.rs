//! Single experiment binary: data synthesis, training across all modes,
//! evaluation, metric scoring, gradient checking, similarity analysis and
//! the compression-weight sweep. Subcommands are independent pipeline
//! stages connected by files; outputs are written atomically and every
//! artifact-producing run leaves a manifest.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use adavib_core::adaptive_beta::{max_similarity_bucket, pool_tokens, similarity_distribution};
use adavib_core::data_io::{
    self, apply_train_config_key, apply_train_config_text, build_world, check_compatible,
    dataset_to_string, generate, load_checkpoint, parse_cooccur_list, read_file,
    synth_config_entries, train_config_entries, world_to_string, write_atomic, Checkpoint,
    CheckpointConfig, SynthConfig, SynthDataset, World,
};
use adavib_core::experiments::{
    grad_check_suite, pretrain_projector, run_mode, EVAL_MAX_DECODE_LEN,
};
use adavib_core::halluc_metrics::{
    chair_scores, parse_answer, parse_caption_file, parse_pope_file, pope_scores, ObjectVocabulary,
};
use adavib_core::projector::{mlp_forward, vib_forward_eval, MlpProjectorParams};
use adavib_core::toy_model::DataSample;
use adavib_core::trainer::{evaluate, train, TrainConfig, TrainMode, TrainedParams};
use adavib_core::{Error, Result};
use manifest::Manifest;

#[derive(Parser)]
#[command(
    name = "adavib",
    about = "Desk-scale stochastic projector experiments and hallucination metrics",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the biased synthetic corpus and its frozen world.
    Synth(SynthArgs),
    /// Train a projector on a dataset file.
    Train(TrainArgs),
    /// Greedy-decode an eval split and score the hallucination proxy.
    Eval(EvalArgs),
    /// Check analytic gradients against central finite differences.
    GradCheck(GradCheckArgs),
    /// Score captions for hallucinated object mentions.
    Chair(ChairArgs),
    /// Score binary object-probing answers.
    Pope(PopeArgs),
    /// Dump per-sample similarity distributions for plotting.
    AnalyzeSimilarity(AnalyzeArgs),
    /// Train the adaptive mode across a compression-weight grid.
    BetaSweep(BetaSweepArgs),
}

fn out_dir(flag: Option<PathBuf>) -> Result<PathBuf> {
    match flag {
        Some(p) => Ok(p),
        None => match std::env::var("ADAVIB_OUT_DIR") {
            Ok(p) if !p.is_empty() => Ok(PathBuf::from(p)),
            _ => Err(Error::InvalidArgument(
                "no output directory: pass --out or set ADAVIB_OUT_DIR".to_string(),
            )),
        },
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        message: e.to_string(),
    })
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (or ADAVIB_OUT_DIR).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    objects: usize,
    #[arg(long, default_value_t = 16)]
    input_dim: usize,
    #[arg(long, default_value_t = 4)]
    tokens: usize,
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long, default_value_t = 2000)]
    train_size: usize,
    #[arg(long, default_value_t = 500)]
    eval_size: usize,
    /// Co-occurrence pairs as a:b:p, comma separated.
    #[arg(long, default_value = "7:0:0.9,6:1:0.9")]
    pairs: String,
    /// Feature salience of bias partners.
    #[arg(long, default_value_t = 0.0)]
    partner_scale: f64,
    #[arg(long, default_value_t = 0.3)]
    noise_std: f64,
    #[arg(long, default_value_t = 24)]
    d_z: usize,
    #[arg(long, default_value_t = 24)]
    d_model: usize,
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let dir = out_dir(args.out)?;
    ensure_dir(&dir)?;
    let cfg = SynthConfig {
        n_objects: args.objects,
        input_dim: args.input_dim,
        tokens_per_sample: args.tokens,
        vocab_size: args.vocab,
        train_size: args.train_size,
        eval_size: args.eval_size,
        cooccur_pairs: parse_cooccur_list(&args.pairs)?,
        partner_signal_scale: args.partner_scale,
        noise_std: args.noise_std,
        seed: args.seed,
        d_z: args.d_z,
        d_model: args.d_model,
    };
    let dataset = generate(&cfg)?;
    let world = build_world(&cfg)?;
    let dataset_text = dataset_to_string(&dataset);
    let world_text = world_to_string(&world);
    write_atomic(&dir.join("dataset.tsv"), &dataset_text)?;
    write_atomic(&dir.join("world.tsv"), &world_text)?;
    let mut m = Manifest::new("synth");
    m.config_entries(&synth_config_entries(&cfg));
    m.output("dataset.tsv", &dataset_text);
    m.output("world.tsv", &world_text);
    m.write(&dir.join("manifest.tsv"))?;
    println!(
        "synth: {} train samples, {} eval samples, vocabulary {}",
        dataset.train.len(),
        dataset.eval_flip.len(),
        cfg.vocab_size
    );
    Ok(())
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// ft | ft-drop-in | ft-drop-out | vib-fixed-beta | adavib | adavib-no-repar
    #[arg(long, default_value = "adavib")]
    mode: String,
    /// Base config: "reference" keeps the full-scale recipe values, "toy"
    /// is the desk-scale rescaling used by the bundled experiments.
    #[arg(long, default_value = "toy")]
    preset: String,
    /// Optional key = value config file applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint whose deterministic projector seeds the new run.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    base_beta: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    micro_batch: Option<usize>,
    #[arg(long)]
    grad_accum: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_fraction: Option<f64>,
    #[arg(long)]
    poly_power: Option<f64>,
    #[arg(long)]
    dropout_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// as-printed | posterior-to-prior
    #[arg(long)]
    kl_direction: Option<String>,
    #[arg(long)]
    pooled: Option<bool>,
    #[arg(long)]
    hidden_dim: Option<usize>,
}

fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mode = TrainMode::parse(&args.mode)?;
    let mut cfg = match args.preset.as_str() {
        "reference" => TrainConfig {
            mode,
            ..TrainConfig::default()
        },
        "toy" => TrainConfig::toy_experiment(mode, 0),
        other => {
            return Err(Error::Config(format!(
                "unknown preset '{other}', expected reference or toy"
            )))
        }
    };
    if let Some(path) = &args.config {
        let text = read_file(path)?;
        cfg = apply_train_config_text(&text, &path.display().to_string(), cfg)?;
        cfg.mode = mode;
    }
    let mut set = |key: &str, value: Option<String>| -> Result<()> {
        if let Some(v) = value {
            apply_train_config_key(&mut cfg, key, &v)?;
        }
        Ok(())
    };
    set("lr", args.lr.map(|v| v.to_string()))?;
    set("base_beta", args.base_beta.map(|v| v.to_string()))?;
    set("weight_decay", args.weight_decay.map(|v| v.to_string()))?;
    set("micro_batch", args.micro_batch.map(|v| v.to_string()))?;
    set("grad_accum", args.grad_accum.map(|v| v.to_string()))?;
    set("epochs", args.epochs.map(|v| v.to_string()))?;
    set(
        "warmup_fraction",
        args.warmup_fraction.map(|v| v.to_string()),
    )?;
    set("poly_decay_power", args.poly_power.map(|v| v.to_string()))?;
    set("dropout_rate", args.dropout_rate.map(|v| v.to_string()))?;
    set("seed", args.seed.map(|v| v.to_string()))?;
    set("kl_direction", args.kl_direction.clone())?;
    set("pooled_posterior", args.pooled.map(|v| v.to_string()))?;
    set("hidden_dim", args.hidden_dim.map(|v| v.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_inputs(data: &Path, world: &Path) -> Result<(SynthDataset, World, String, String)> {
    let data_text = read_file(data)?;
    let world_text = read_file(world)?;
    let dataset = data_io::parse_dataset(&data_text, &data.display().to_string())?;
    let world = data_io::parse_world(&world_text, &world.display().to_string())?;
    check_compatible(&dataset.cfg, &world)?;
    Ok((dataset, world, data_text, world_text))
}

fn init_head_from_checkpoint(path: &Path, world: &World) -> Result<MlpProjectorParams> {
    let ckpt = load_checkpoint(path)?;
    let head = match ckpt.params {
        TrainedParams::Mlp(p) => p,
        // From a stochastic checkpoint, the mean head carries over.
        TrainedParams::Vib(p) => p.mu_head,
    };
    if head.input_dim() != world.input_dim || head.output_dim() != world.decoder.d_z() {
        return Err(Error::Config(format!(
            "init checkpoint maps {}->{} but world needs {}->{}",
            head.input_dim(),
            head.output_dim(),
            world.input_dim,
            world.decoder.d_z()
        )));
    }
    Ok(head)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let dir = out_dir(args.out.clone())?;
    ensure_dir(&dir)?;
    let cfg = resolve_train_config(&args)?;
    let (dataset, world, data_text, world_text) = load_inputs(&args.data, &args.world)?;
    let init = match &args.init {
        Some(p) => Some(init_head_from_checkpoint(p, &world)?),
        None => None,
    };
    let outcome = train(&cfg, &dataset.train, &world.decoder, init.as_ref())?;
    let ckpt = Checkpoint {
        params: outcome.params,
        config: CheckpointConfig::from_train_config(&cfg),
    };
    let ckpt_text = data_io::checkpoint_to_string(&ckpt);
    let log_text = outcome.log.to_csv();
    let ema_text = outcome.log.ema_to_csv();
    write_atomic(&dir.join("checkpoint.tsv"), &ckpt_text)?;
    write_atomic(&dir.join("log.csv"), &log_text)?;
    write_atomic(&dir.join("log_ema.csv"), &ema_text)?;
    let mut m = Manifest::new("train");
    m.config_entries(&train_config_entries(&cfg));
    if let Some(p) = &args.init {
        m.input("init", &read_file(p)?);
    }
    m.input("dataset", &data_text);
    m.input("world", &world_text);
    m.output("checkpoint.tsv", &ckpt_text);
    m.output("log.csv", &log_text);
    m.output("log_ema.csv", &ema_text);
    m.write(&dir.join("manifest.tsv"))?;
    let last = outcome.log.records.last().expect("at least one step");
    println!(
        "train[{}]: {} steps, final ce={:.4} kl={:.4} entropy={:.4}",
        cfg.mode.as_str(),
        outcome.log.records.len(),
        last.ce,
        last.kl,
        last.entropy
    );
    Ok(())
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = EVAL_MAX_DECODE_LEN)]
    max_len: usize,
    /// Which split of the dataset file to score: eval | train.
    #[arg(long, default_value = "eval")]
    split: String,
}

fn pick_split<'a>(dataset: &'a SynthDataset, split: &str) -> Result<&'a [DataSample]> {
    match split {
        "eval" => Ok(&dataset.eval_flip),
        "train" => Ok(&dataset.train),
        other => Err(Error::InvalidArgument(format!(
            "unknown split '{other}', expected eval or train"
        ))),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let dir = out_dir(args.out.clone())?;
    ensure_dir(&dir)?;
    let (dataset, world, data_text, world_text) = load_inputs(&args.data, &args.world)?;
    let ckpt_text = read_file(&args.ckpt)?;
    let ckpt = data_io::parse_checkpoint(&ckpt_text, &args.ckpt.display().to_string())?;
    let split = pick_split(&dataset, &args.split)?;
    let report = evaluate(
        &ckpt.params,
        split,
        &world.decoder,
        world.n_objects,
        args.max_len,
    )?;

    let mut per_sample =
        String::from("id,hallucinated,entropy,normalized_entropy,bucket,decoded\n");
    for r in &report.per_sample {
        let decoded = r
            .decoded
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        per_sample.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.id, r.hallucinated as u8, r.entropy, r.normalized_entropy, r.max_sim_bucket, decoded
        ));
    }
    let mut summary = String::new();
    summary.push_str(&format!("proxy_rate\t{}\n", report.proxy_rate));
    summary.push_str(&format!("mean_entropy\t{}\n", report.mean_entropy));
    summary.push_str(&format!(
        "hallucinated_top_bucket_share\t{}\n",
        report.hallucinated_top_bucket_share()
    ));
    summary.push_str(&format!(
        "bucket_counts\t{}\n",
        report
            .bucket_counts
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",")
    ));
    summary.push_str(&format!(
        "hallucinated_bucket_counts\t{}\n",
        report
            .hallucinated_bucket_counts
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",")
    ));
    write_atomic(&dir.join("eval_per_sample.csv"), &per_sample)?;
    write_atomic(&dir.join("eval_summary.tsv"), &summary)?;
    let mut m = Manifest::new("eval");
    m.config("split", &args.split);
    m.config("max_len", args.max_len);
    m.input("checkpoint", &ckpt_text);
    m.input("dataset", &data_text);
    m.input("world", &world_text);
    m.output("eval_per_sample.csv", &per_sample);
    m.output("eval_summary.tsv", &summary);
    m.write(&dir.join("manifest.tsv"))?;
    println!(
        "eval[{}]: proxy_rate={:.4} mean_entropy={:.4} top_bucket_share={:.4}",
        args.split,
        report.proxy_rate,
        report.mean_entropy,
        report.hallucinated_top_bucket_share()
    );
    Ok(())
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 30)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    #[arg(long, default_value_t = 20)]
    instances: usize,
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<()> {
    let report = grad_check_suite(args.seed, args.step, args.instances)?;
    println!(
        "grad-check: instances={} params_checked={} max_rel_err={:.3e} worst={}",
        args.instances, report.params_checked, report.max_rel_err, report.worst
    );
    if report.max_rel_err < 1e-5 {
        Ok(())
    } else {
        Err(Error::State(format!(
            "gradient check failed: max relative error {:.3e} at {}",
            report.max_rel_err, report.worst
        )))
    }
}

#[derive(Args)]
struct ChairArgs {
    #[arg(long)]
    captions: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Optional directory for the per-caption detail file and manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_chair(args: ChairArgs) -> Result<()> {
    let captions_text = read_file(&args.captions)?;
    let vocab_text = read_file(&args.vocab)?;
    let records = parse_caption_file(&captions_text, &args.captions.display().to_string())?;
    let vocab = ObjectVocabulary::parse(&vocab_text, &args.vocab.display().to_string())?;
    let report = chair_scores(&records, &vocab)?;
    println!(
        "chair: captions={} chair_s={} chair_i={} hallucinated_mentions={} total_mentions={}",
        report.caption_count,
        report.chair_s,
        report.chair_i,
        report.hallucinated_mentions,
        report.total_mentions
    );
    if let Some(dir) = args.out {
        ensure_dir(&dir)?;
        let mut detail = String::from("id\tmentioned\thallucinated\n");
        for d in &report.details {
            let mentioned = d
                .mentioned
                .iter()
                .map(|o| o.to_string())
                .collect::<Vec<_>>()
                .join(",");
            let hallucinated = d
                .hallucinated
                .iter()
                .map(|o| o.to_string())
                .collect::<Vec<_>>()
                .join(",");
            detail.push_str(&format!("{}\t{}\t{}\n", d.id, mentioned, hallucinated));
        }
        let mut summary = String::new();
        summary.push_str(&format!("chair_s\t{}\n", report.chair_s));
        summary.push_str(&format!("chair_i\t{}\n", report.chair_i));
        write_atomic(&dir.join("chair_detail.tsv"), &detail)?;
        write_atomic(&dir.join("chair_summary.tsv"), &summary)?;
        let mut m = Manifest::new("chair");
        m.input("captions", &captions_text);
        m.input("vocab", &vocab_text);
        m.output("chair_detail.tsv", &detail);
        m.output("chair_summary.tsv", &summary);
        m.write(&dir.join("manifest.tsv"))?;
    }
    Ok(())
}

#[derive(Args)]
struct PopeArgs {
    #[arg(long)]
    answers: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_pope(args: PopeArgs) -> Result<()> {
    let text = read_file(&args.answers)?;
    let records = parse_pope_file(&text, &args.answers.display().to_string())?;
    let preds: Vec<_> = records.iter().map(|r| parse_answer(&r.response)).collect();
    let gold: Vec<bool> = records.iter().map(|r| r.gold_yes).collect();
    let report = pope_scores(&preds, &gold)?;
    println!(
        "pope: n={} accuracy={} precision={} recall={} f1={} unparsable={}",
        records.len(),
        report.accuracy,
        report.precision,
        report.recall,
        report.f1,
        report.unparsable
    );
    if let Some(dir) = args.out {
        ensure_dir(&dir)?;
        let mut summary = String::new();
        summary.push_str(&format!("accuracy\t{}\n", report.accuracy));
        summary.push_str(&format!("precision\t{}\n", report.precision));
        summary.push_str(&format!("recall\t{}\n", report.recall));
        summary.push_str(&format!("f1\t{}\n", report.f1));
        summary.push_str(&format!(
            "tp\t{}\nfp\t{}\ntn\t{}\nfn\t{}\nunparsable\t{}\n",
            report.tp, report.fp, report.tn, report.fn_, report.unparsable
        ));
        write_atomic(&dir.join("pope_summary.tsv"), &summary)?;
        let mut m = Manifest::new("pope");
        m.input("answers", &text);
        m.output("pope_summary.tsv", &summary);
        m.write(&dir.join("manifest.tsv"))?;
    }
    Ok(())
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    top_k: usize,
    #[arg(long, default_value = "eval")]
    split: String,
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let dir = out_dir(args.out.clone())?;
    ensure_dir(&dir)?;
    let (dataset, world, data_text, world_text) = load_inputs(&args.data, &args.world)?;
    let ckpt_text = read_file(&args.ckpt)?;
    let ckpt = data_io::parse_checkpoint(&ckpt_text, &args.ckpt.display().to_string())?;
    let split = pick_split(&dataset, &args.split)?;
    let k = args.top_k.min(world.decoder.vocab_size());

    let mut csv = String::from("id,entropy,normalized_entropy,bucket");
    for i in 1..=k {
        csv.push_str(&format!(",token_{i},prob_{i}"));
    }
    csv.push('\n');
    for sample in split {
        let z = match &ckpt.params {
            TrainedParams::Mlp(p) => mlp_forward(&sample.visual, p)?,
            TrainedParams::Vib(p) => vib_forward_eval(&sample.visual, p)?,
        };
        let stats = similarity_distribution(&pool_tokens(&z)?, &world.decoder.token_embeddings)?;
        let bucket = max_similarity_bucket(&stats.probs);
        let mut order: Vec<usize> = (0..stats.probs.len()).collect();
        order.sort_by(|&a, &b| {
            stats.probs[b]
                .partial_cmp(&stats.probs[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        csv.push_str(&format!(
            "{},{},{},{}",
            sample.id, stats.entropy, stats.normalized_entropy, bucket
        ));
        for &t in order.iter().take(k) {
            csv.push_str(&format!(",{t},{}", stats.probs[t]));
        }
        csv.push('\n');
    }
    write_atomic(&dir.join("similarity.csv"), &csv)?;
    let mut m = Manifest::new("analyze-similarity");
    m.config("top_k", k);
    m.config("split", &args.split);
    m.input("checkpoint", &ckpt_text);
    m.input("dataset", &data_text);
    m.input("world", &world_text);
    m.output("similarity.csv", &csv);
    m.write(&dir.join("manifest.tsv"))?;
    println!("analyze-similarity: {} records, top_k={k}", split.len());
    Ok(())
}

#[derive(Args)]
struct BetaSweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "1e-1,1e-3,1e-5,1e-7,1e-9")]
    betas: String,
    /// Seeds for the repeated runs, comma separated.
    #[arg(long, default_value = "2,7,10")]
    seeds: String,
}

fn parse_f64_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad number '{p}'")))
        })
        .collect()
}

fn parse_u64_list(text: &str) -> Result<Vec<u64>> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad seed '{p}'")))
        })
        .collect()
}

fn cmd_beta_sweep(args: BetaSweepArgs) -> Result<()> {
    let dir = out_dir(args.out.clone())?;
    ensure_dir(&dir)?;
    let betas = parse_f64_list(&args.betas)?;
    let seeds = parse_u64_list(&args.seeds)?;
    if betas.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "beta sweep needs at least one beta and one seed".to_string(),
        ));
    }
    // The dataset file acts as the experiment template: each seed
    // regenerates the corpus, world and pretraining from its own stream so
    // the sweep varies everything a seed controls.
    let (dataset, _world, data_text, world_text) = load_inputs(&args.data, &args.world)?;

    let mut csv = String::from("beta");
    for s in &seeds {
        csv.push_str(&format!(",seed_{s}"));
    }
    csv.push_str(",mean\n");
    println!(
        "beta-sweep over {} betas x {} seeds",
        betas.len(),
        seeds.len()
    );
    // One corpus + pretraining run per seed, shared across the beta grid.
    let mut contexts = Vec::new();
    for &seed in &seeds {
        let mut synth = dataset.cfg.clone();
        synth.seed = seed;
        let seed_world = build_world(&synth)?;
        let seed_data = generate(&synth)?;
        let init = pretrain_projector(&synth, &seed_world)?;
        contexts.push((seed_data, seed_world, init));
    }
    let mut means = Vec::new();
    for &beta in &betas {
        let mut row = data_io::fmt_f64(beta);
        let mut acc = 0.0;
        for (&seed, (seed_data, seed_world, init)) in seeds.iter().zip(contexts.iter()) {
            let run = run_mode(
                TrainMode::AdaVib,
                seed,
                &seed_data.train,
                &seed_data.eval_flip,
                seed_world,
                init,
                Some(beta),
            )?;
            row.push_str(&format!(",{}", data_io::fmt_f64(run.report.proxy_rate)));
            acc += run.report.proxy_rate;
        }
        let mean = acc / seeds.len() as f64;
        means.push(mean);
        row.push_str(&format!(",{}\n", data_io::fmt_f64(mean)));
        print!("{row}");
        csv.push_str(&row);
    }
    write_atomic(&dir.join("sweep.csv"), &csv)?;
    let mut m = Manifest::new("beta-sweep");
    m.config("betas", &args.betas);
    m.config("seeds", &args.seeds);
    m.input("dataset", &data_text);
    m.input("world", &world_text);
    m.output("sweep.csv", &csv);
    m.write(&dir.join("manifest.tsv"))?;

    let min_idx = means
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    println!(
        "minimum mean proxy rate {} at beta {}",
        means[min_idx],
        data_io::fmt_f64(betas[min_idx])
    );
    Ok(())
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) | Error::Config(_) | Error::Dimension(_) | Error::Domain(_) => 1,
        Error::Io { .. }
        | Error::Parse { .. }
        | Error::State(_)
        | Error::VersionMismatch { .. } => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage and parse problems are validation errors; --help and
            // --version are normal exits.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::GradCheck(args) => cmd_grad_check(args),
        Command::Chair(args) => cmd_chair(args),
        Command::Pope(args) => cmd_pope(args),
        Command::AnalyzeSimilarity(args) => cmd_analyze(args),
        Command::BetaSweep(args) => cmd_beta_sweep(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

//! Synthetic dataset generation with controllable object co-occurrence bias,
//! plus persistence for datasets, checkpoints, the frozen world fixture and
//! key-value config files. Everything on disk is line-oriented tab-separated
//! text with full-precision decimal floats, so any external tool can parse
//! and re-verify it.
//!
//! Scene construction: base objects are drawn from the pool that excludes
//! every bias pair's second member, so that member enters training scenes
//! only through the bias rule itself. The flip evaluation split then shows
//! the first member without its biased partner.

use std::collections::BTreeSet;
use std::path::Path;

use crate::adaptive_beta::FrozenEmbeddings;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};
use crate::projector::{KlDirection, MlpProjectorParams, VibProjectorParams};
use crate::toy_model::{DataSample, FrozenDecoderParams};
use crate::trainer::{TrainConfig, TrainMode, TrainedParams};

const ARTIFACT_HEADER: &str = "adavib-artifact v1";
const DATASET_HEADER: &str = "adavib-dataset v1";

/// Knobs of the synthetic corpus and its frozen world.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_objects: usize,
    pub input_dim: usize,
    pub tokens_per_sample: usize,
    pub vocab_size: usize,
    pub train_size: usize,
    pub eval_size: usize,
    /// `(a, b, p)`: whenever `a` is in a training scene, `b` joins with
    /// probability `p`.
    pub cooccur_pairs: Vec<(usize, usize, f64)>,
    /// Feature salience of bias partners: their signature enters the visual
    /// features scaled by this factor, so the trigger object is the easier
    /// predictor of them than their own faint evidence.
    pub partner_signal_scale: f64,
    pub noise_std: f64,
    pub seed: u64,
    /// Dimensionality of the soft-token / embedding space.
    pub d_z: usize,
    /// Width of the frozen decoder bottleneck.
    pub d_model: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_objects: 8,
            input_dim: 16,
            tokens_per_sample: 4,
            vocab_size: 64,
            train_size: 2000,
            eval_size: 500,
            cooccur_pairs: vec![(7, 0, 0.9), (6, 1, 0.9)],
            partner_signal_scale: 0.0,
            noise_std: 0.3,
            seed: 0,
            d_z: 24,
            d_model: 24,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_objects == 0 || self.tokens_per_sample == 0 || self.input_dim == 0 {
            return Err(Error::Config(
                "n_objects, tokens_per_sample and input_dim must be positive".to_string(),
            ));
        }
        if self.vocab_size < self.n_objects + 3 {
            return Err(Error::Config(format!(
                "vocab_size {} too small: need n_objects + 3 prompt tokens = {}",
                self.vocab_size,
                self.n_objects + 3
            )));
        }
        if self.train_size == 0 {
            return Err(Error::Config("train_size must be positive".to_string()));
        }
        for &(a, b, p) in &self.cooccur_pairs {
            if a >= self.n_objects || b >= self.n_objects || a == b {
                return Err(Error::Config(format!(
                    "bad co-occurrence pair ({a}, {b}) for {} objects",
                    self.n_objects
                )));
            }
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "co-occurrence probability {p} outside [0, 1]"
                )));
            }
        }
        if self.eval_size > 0 && self.cooccur_pairs.is_empty() {
            return Err(Error::Config(
                "flip evaluation split needs at least one co-occurrence pair".to_string(),
            ));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be non-negative".to_string()));
        }
        if self.partner_signal_scale < 0.0 {
            return Err(Error::Config(
                "partner_signal_scale must be non-negative".to_string(),
            ));
        }
        if self.d_z == 0 || self.d_model == 0 {
            return Err(Error::Config(
                "d_z and d_model must be positive".to_string(),
            ));
        }
        Ok(())
    }

    /// The fixed textual prompt: the first three filler token ids.
    pub fn prompt_ids(&self) -> Vec<usize> {
        vec![self.n_objects, self.n_objects + 1, self.n_objects + 2]
    }
}

/// The frozen side of an experiment: decoder (with its embedding table) and
/// the object/token layout. Object `k` is token `k`; the rest are fillers.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub decoder: FrozenDecoderParams,
    pub n_objects: usize,
    pub input_dim: usize,
    pub tokens_per_sample: usize,
    pub seed: u64,
}

/// Builds the deterministic frozen world for a config.
pub fn build_world(cfg: &SynthConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = SeededRng::new(cfg.seed).split(7);
    Ok(World {
        decoder: FrozenDecoderParams::seeded(cfg.vocab_size, cfg.d_z, cfg.d_model, &mut rng)?,
        n_objects: cfg.n_objects,
        input_dim: cfg.input_dim,
        tokens_per_sample: cfg.tokens_per_sample,
        seed: cfg.seed,
    })
}

/// A generated corpus: biased training split plus the bias-flipped
/// evaluation split (first pair member present, partner absent).
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub cfg: SynthConfig,
    pub train: Vec<DataSample>,
    pub eval_flip: Vec<DataSample>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn draw_signatures(cfg: &SynthConfig, root: &SeededRng) -> Result<Matrix> {
    for attempt in 0..32 {
        let mut rng = root.split(20 + attempt);
        let sig = Matrix::seeded_normal(cfg.n_objects, cfg.input_dim, 1.0, &mut rng);
        let mut ok = true;
        'outer: for i in 0..cfg.n_objects {
            for j in (i + 1)..cfg.n_objects {
                if cosine(sig.row(i), sig.row(j)).abs() > 0.99 {
                    ok = false;
                    break 'outer;
                }
            }
        }
        if ok {
            return Ok(sig);
        }
    }
    Err(Error::Config(
        "could not draw pairwise independent object signatures".to_string(),
    ))
}

fn features_for(
    present: &BTreeSet<usize>,
    signatures: &Matrix,
    partners: &BTreeSet<usize>,
    cfg: &SynthConfig,
    noise_rng: &mut SeededRng,
) -> Matrix {
    let mut v = Matrix::zeros(cfg.tokens_per_sample, cfg.input_dim);
    for row in 0..cfg.tokens_per_sample {
        for col in 0..cfg.input_dim {
            let mut acc = 0.0;
            for &obj in present {
                let weight = if partners.contains(&obj) {
                    cfg.partner_signal_scale
                } else {
                    1.0
                };
                acc += weight * signatures.get(obj, col);
            }
            if cfg.noise_std > 0.0 {
                acc += cfg.noise_std * noise_rng.standard_normal();
            }
            v.set(row, col, acc);
        }
    }
    v
}

fn pick_distinct(pool: &[usize], count: usize, rng: &mut SeededRng) -> BTreeSet<usize> {
    let mut chosen = BTreeSet::new();
    while chosen.len() < count.min(pool.len()) {
        chosen.insert(pool[rng.next_below(pool.len())]);
    }
    chosen
}

/// Generates the corpus. Pure function of the config: the same config always
/// yields the identical dataset.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let root = SeededRng::new(cfg.seed);
    let signatures = draw_signatures(cfg, &root)?;
    let mut scene_rng = root.split(30);
    let mut train_noise = root.split(31);
    let mut eval_rng = root.split(32);
    let mut eval_noise = root.split(33);
    let prompt = cfg.prompt_ids();

    let biased_partners: BTreeSet<usize> = cfg.cooccur_pairs.iter().map(|&(_, b, _)| b).collect();
    let base_pool: Vec<usize> = (0..cfg.n_objects)
        .filter(|o| !biased_partners.contains(o))
        .collect();
    if base_pool.is_empty() {
        return Err(Error::Config(
            "every object is a bias partner; nothing left to draw scenes from".to_string(),
        ));
    }

    let mut train = Vec::with_capacity(cfg.train_size);
    for i in 0..cfg.train_size {
        let n_base = 1 + scene_rng.next_below(3);
        let mut present = pick_distinct(&base_pool, n_base, &mut scene_rng);
        let mut spurious = false;
        for &(a, b, p) in &cfg.cooccur_pairs {
            if present.contains(&a) && !present.contains(&b) && scene_rng.next_f64() < p {
                present.insert(b);
                spurious = true;
            }
        }
        let visual = features_for(
            &present,
            &signatures,
            &biased_partners,
            cfg,
            &mut train_noise,
        );
        let target: Vec<usize> = present.iter().copied().collect();
        train.push(DataSample {
            id: i as u64,
            visual,
            prompt: prompt.clone(),
            target,
            gold_objects: present,
            present_spurious: spurious,
        });
    }

    let mut eval_flip = Vec::with_capacity(cfg.eval_size);
    for j in 0..cfg.eval_size {
        let &(a, b, _) = &cfg.cooccur_pairs[j % cfg.cooccur_pairs.len()];
        let extra_pool: Vec<usize> = base_pool.iter().copied().filter(|&o| o != a).collect();
        let n_extra = eval_rng.next_below(2);
        let mut present = pick_distinct(&extra_pool, n_extra, &mut eval_rng);
        present.insert(a);
        debug_assert!(!present.contains(&b));
        let visual = features_for(
            &present,
            &signatures,
            &biased_partners,
            cfg,
            &mut eval_noise,
        );
        let target: Vec<usize> = present.iter().copied().collect();
        eval_flip.push(DataSample {
            id: (cfg.train_size + j) as u64,
            visual,
            prompt: prompt.clone(),
            target,
            gold_objects: present,
            present_spurious: true,
        });
    }

    Ok(SynthDataset {
        cfg: cfg.clone(),
        train,
        eval_flip,
    })
}

/// Shortest decimal that parses back to the identical f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    std::fs::write(&tmp, contents).map_err(|e| Error::Io {
        path: tmp.display().to_string(),
        message: e.to_string(),
    })?;
    std::fs::rename(&tmp, path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn cfg_lines(cfg: &SynthConfig) -> Vec<(String, String)> {
    let pairs = cfg
        .cooccur_pairs
        .iter()
        .map(|&(a, b, p)| format!("{a}:{b}:{}", fmt_f64(p)))
        .collect::<Vec<_>>()
        .join(",");
    vec![
        ("n_objects".into(), cfg.n_objects.to_string()),
        ("input_dim".into(), cfg.input_dim.to_string()),
        (
            "tokens_per_sample".into(),
            cfg.tokens_per_sample.to_string(),
        ),
        ("vocab_size".into(), cfg.vocab_size.to_string()),
        ("train_size".into(), cfg.train_size.to_string()),
        ("eval_size".into(), cfg.eval_size.to_string()),
        ("cooccur".into(), pairs),
        (
            "partner_signal_scale".into(),
            fmt_f64(cfg.partner_signal_scale),
        ),
        ("noise_std".into(), fmt_f64(cfg.noise_std)),
        ("seed".into(), cfg.seed.to_string()),
        ("d_z".into(), cfg.d_z.to_string()),
        ("d_model".into(), cfg.d_model.to_string()),
    ]
}

/// Parses `a:b:p,a:b:p` co-occurrence lists (also the CLI flag syntax).
pub fn parse_cooccur_list(text: &str) -> Result<Vec<(usize, usize, f64)>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut pairs = Vec::new();
    for part in text.split(',') {
        let fields: Vec<&str> = part.split(':').collect();
        if fields.len() != 3 {
            return Err(Error::Config(format!(
                "co-occurrence entry '{part}' is not a:b:p"
            )));
        }
        let a = fields[0]
            .parse()
            .map_err(|_| Error::Config(format!("bad object id '{}'", fields[0])))?;
        let b = fields[1]
            .parse()
            .map_err(|_| Error::Config(format!("bad object id '{}'", fields[1])))?;
        let p = fields[2]
            .parse()
            .map_err(|_| Error::Config(format!("bad probability '{}'", fields[2])))?;
        pairs.push((a, b, p));
    }
    Ok(pairs)
}

fn sample_line(sample: &DataSample) -> String {
    let gold = sample
        .gold_objects
        .iter()
        .map(|o| o.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let prompt = sample
        .prompt
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let target = sample
        .target
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let mut line = format!(
        "{}\t{}\t{}\t{}\t{}",
        sample.id,
        if sample.present_spurious { 1 } else { 0 },
        gold,
        prompt,
        target
    );
    for x in sample.visual.data() {
        line.push('\t');
        line.push_str(&fmt_f64(*x));
    }
    line
}

/// Serializes a dataset to its single-file text form.
pub fn dataset_to_string(ds: &SynthDataset) -> String {
    let mut out = String::from(DATASET_HEADER);
    out.push('\n');
    for (k, v) in cfg_lines(&ds.cfg) {
        out.push_str(&format!("cfg\t{k}\t{v}\n"));
    }
    out.push_str("split\ttrain\n");
    for s in &ds.train {
        out.push_str(&sample_line(s));
        out.push('\n');
    }
    out.push_str("split\teval\n");
    for s in &ds.eval_flip {
        out.push_str(&sample_line(s));
        out.push('\n');
    }
    out
}

pub fn save_dataset(path: &Path, ds: &SynthDataset) -> Result<()> {
    write_atomic(path, &dataset_to_string(ds))
}

fn parse_err(path: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

fn parse_id_list(field: &str, path: &str, lineno: usize) -> Result<Vec<usize>> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(',')
        .map(|p| {
            p.parse()
                .map_err(|_| parse_err(path, lineno, format!("bad token id '{p}'")))
        })
        .collect()
}

/// Parses the single-file dataset format; errors name the offending line.
pub fn parse_dataset(text: &str, path: &str) -> Result<SynthDataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    if header != DATASET_HEADER {
        return Err(Error::VersionMismatch {
            expected: DATASET_HEADER.to_string(),
            got: header.to_string(),
        });
    }
    let mut cfg = SynthConfig::default();
    let mut train = Vec::new();
    let mut eval_flip = Vec::new();
    let mut current_split: Option<bool> = None; // true = train
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        match fields[0] {
            "cfg" => {
                if fields.len() != 3 {
                    return Err(parse_err(path, lineno, "cfg line needs key and value"));
                }
                let (k, v) = (fields[1], fields[2]);
                let bad = |what: &str| parse_err(path, lineno, format!("bad {what} '{v}'"));
                match k {
                    "n_objects" => cfg.n_objects = v.parse().map_err(|_| bad("n_objects"))?,
                    "input_dim" => cfg.input_dim = v.parse().map_err(|_| bad("input_dim"))?,
                    "tokens_per_sample" => {
                        cfg.tokens_per_sample = v.parse().map_err(|_| bad("tokens_per_sample"))?
                    }
                    "vocab_size" => cfg.vocab_size = v.parse().map_err(|_| bad("vocab_size"))?,
                    "train_size" => cfg.train_size = v.parse().map_err(|_| bad("train_size"))?,
                    "eval_size" => cfg.eval_size = v.parse().map_err(|_| bad("eval_size"))?,
                    "cooccur" => {
                        cfg.cooccur_pairs = parse_cooccur_list(v)
                            .map_err(|e| parse_err(path, lineno, e.to_string()))?
                    }
                    "partner_signal_scale" => {
                        cfg.partner_signal_scale =
                            v.parse().map_err(|_| bad("partner_signal_scale"))?
                    }
                    "noise_std" => cfg.noise_std = v.parse().map_err(|_| bad("noise_std"))?,
                    "seed" => cfg.seed = v.parse().map_err(|_| bad("seed"))?,
                    "d_z" => cfg.d_z = v.parse().map_err(|_| bad("d_z"))?,
                    "d_model" => cfg.d_model = v.parse().map_err(|_| bad("d_model"))?,
                    other => {
                        return Err(parse_err(
                            path,
                            lineno,
                            format!("unknown cfg key '{other}'"),
                        ))
                    }
                }
            }
            "split" => {
                current_split = match fields.get(1) {
                    Some(&"train") => Some(true),
                    Some(&"eval") => Some(false),
                    _ => return Err(parse_err(path, lineno, "split must be train or eval")),
                };
            }
            _ => {
                let is_train = current_split
                    .ok_or_else(|| parse_err(path, lineno, "sample before split marker"))?;
                let expected = 5 + cfg.tokens_per_sample * cfg.input_dim;
                if fields.len() != expected {
                    return Err(parse_err(
                        path,
                        lineno,
                        format!("expected {expected} fields, got {}", fields.len()),
                    ));
                }
                let id: u64 = fields[0]
                    .parse()
                    .map_err(|_| parse_err(path, lineno, "bad sample id"))?;
                let spurious = match fields[1] {
                    "0" => false,
                    "1" => true,
                    other => return Err(parse_err(path, lineno, format!("bad flag '{other}'"))),
                };
                let gold: BTreeSet<usize> = parse_id_list(fields[2], path, lineno)?
                    .into_iter()
                    .collect();
                let prompt = parse_id_list(fields[3], path, lineno)?;
                let target = parse_id_list(fields[4], path, lineno)?;
                let mut data = Vec::with_capacity(cfg.tokens_per_sample * cfg.input_dim);
                for f in &fields[5..] {
                    data.push(
                        f.parse::<f64>()
                            .map_err(|_| parse_err(path, lineno, format!("bad float '{f}'")))?,
                    );
                }
                let visual = Matrix::new(cfg.tokens_per_sample, cfg.input_dim, data)
                    .map_err(|e| parse_err(path, lineno, e.to_string()))?;
                let sample = DataSample {
                    id,
                    visual,
                    prompt,
                    target,
                    gold_objects: gold,
                    present_spurious: spurious,
                };
                if is_train {
                    train.push(sample);
                } else {
                    eval_flip.push(sample);
                }
            }
        }
    }
    Ok(SynthDataset {
        cfg,
        train,
        eval_flip,
    })
}

pub fn load_dataset(path: &Path) -> Result<SynthDataset> {
    parse_dataset(&read_file(path)?, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// Structured-text artifact format shared by checkpoints and the world fixture.
// ---------------------------------------------------------------------------

struct NamedTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

struct Artifact {
    kind: String,
    meta: Vec<(String, String)>,
    tensors: Vec<NamedTensor>,
}

impl Artifact {
    fn serialize(&self) -> String {
        let mut out = String::from(ARTIFACT_HEADER);
        out.push('\n');
        out.push_str(&format!("kind\t{}\n", self.kind));
        for (k, v) in &self.meta {
            out.push_str(&format!("meta\t{k}\t{v}\n"));
        }
        for t in &self.tensors {
            out.push_str(&format!("param\t{}\t{}\t{}\n", t.name, t.rows, t.cols));
            let mut first = true;
            for x in &t.data {
                if !first {
                    out.push('\t');
                }
                out.push_str(&fmt_f64(*x));
                first = false;
            }
            out.push('\n');
        }
        out
    }

    fn parse(text: &str, path: &str) -> Result<Artifact> {
        let mut lines = text.lines().enumerate().peekable();
        let (_, header) = lines
            .next()
            .ok_or_else(|| parse_err(path, 1, "empty file"))?;
        if header != ARTIFACT_HEADER {
            return Err(Error::VersionMismatch {
                expected: ARTIFACT_HEADER.to_string(),
                got: header.to_string(),
            });
        }
        let mut kind = String::new();
        let mut meta = Vec::new();
        let mut tensors = Vec::new();
        while let Some((idx, line)) = lines.next() {
            let lineno = idx + 1;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            match fields[0] {
                "kind" => {
                    kind = fields
                        .get(1)
                        .ok_or_else(|| parse_err(path, lineno, "kind needs a value"))?
                        .to_string()
                }
                "meta" => {
                    if fields.len() != 3 {
                        return Err(parse_err(path, lineno, "meta line needs key and value"));
                    }
                    meta.push((fields[1].to_string(), fields[2].to_string()));
                }
                "param" => {
                    if fields.len() != 4 {
                        return Err(parse_err(path, lineno, "param line needs name, rows, cols"));
                    }
                    let rows: usize = fields[2]
                        .parse()
                        .map_err(|_| parse_err(path, lineno, "bad row count"))?;
                    let cols: usize = fields[3]
                        .parse()
                        .map_err(|_| parse_err(path, lineno, "bad col count"))?;
                    let (data_lineno, data_line) = lines
                        .next()
                        .ok_or_else(|| parse_err(path, lineno, "param missing data line"))?;
                    let data: Vec<f64> = if data_line.is_empty() {
                        Vec::new()
                    } else {
                        data_line
                            .split('\t')
                            .map(|f| {
                                f.parse::<f64>().map_err(|_| {
                                    parse_err(path, data_lineno + 1, format!("bad float '{f}'"))
                                })
                            })
                            .collect::<Result<_>>()?
                    };
                    if data.len() != rows * cols {
                        return Err(parse_err(
                            path,
                            data_lineno + 1,
                            format!(
                                "tensor '{}' declares {}x{} but carries {} values",
                                fields[1],
                                rows,
                                cols,
                                data.len()
                            ),
                        ));
                    }
                    tensors.push(NamedTensor {
                        name: fields[1].to_string(),
                        rows,
                        cols,
                        data,
                    });
                }
                other => {
                    return Err(parse_err(
                        path,
                        lineno,
                        format!("unknown artifact line '{other}'"),
                    ))
                }
            }
        }
        if kind.is_empty() {
            return Err(parse_err(path, 0, "artifact has no kind"));
        }
        Ok(Artifact {
            kind,
            meta,
            tensors,
        })
    }

    fn meta_get(&self, key: &str, path: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| parse_err(path, 0, format!("missing meta key '{key}'")))
    }

    fn tensor(&self, name: &str, path: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| parse_err(path, 0, format!("missing tensor '{name}'")))
    }
}

fn tensor_of(name: &str, m: &Matrix) -> NamedTensor {
    NamedTensor {
        name: name.to_string(),
        rows: m.rows(),
        cols: m.cols(),
        data: m.data().to_vec(),
    }
}

fn tensor_of_vec(name: &str, v: &[f64]) -> NamedTensor {
    NamedTensor {
        name: name.to_string(),
        rows: v.len(),
        cols: 1,
        data: v.to_vec(),
    }
}

fn matrix_from(t: &NamedTensor) -> Result<Matrix> {
    Matrix::new(t.rows, t.cols, t.data.clone())
}

fn mlp_tensors(prefix: &str, p: &MlpProjectorParams) -> Vec<NamedTensor> {
    vec![
        tensor_of(&format!("{prefix}w_z"), &p.w_z),
        tensor_of_vec(&format!("{prefix}b_z"), &p.b_z),
        tensor_of(&format!("{prefix}w_h"), &p.w_h),
        tensor_of_vec(&format!("{prefix}b_h"), &p.b_h),
    ]
}

fn mlp_from_artifact(art: &Artifact, prefix: &str, path: &str) -> Result<MlpProjectorParams> {
    let w_z = matrix_from(art.tensor(&format!("{prefix}w_z"), path)?)?;
    let b_z = art.tensor(&format!("{prefix}b_z"), path)?.data.clone();
    let w_h = matrix_from(art.tensor(&format!("{prefix}w_h"), path)?)?;
    let b_h = art.tensor(&format!("{prefix}b_h"), path)?.data.clone();
    MlpProjectorParams::new(w_z, b_z, w_h, b_h)
}

/// Reload metadata a checkpoint carries alongside its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointConfig {
    pub mode: TrainMode,
    pub kl_direction: KlDirection,
    pub pooled_posterior: bool,
    pub sigma_floor: f64,
    pub seed: u64,
}

impl CheckpointConfig {
    pub fn from_train_config(cfg: &TrainConfig) -> Self {
        CheckpointConfig {
            mode: cfg.mode,
            kl_direction: cfg.kl_direction,
            pooled_posterior: cfg.pooled_posterior,
            sigma_floor: cfg.vib_config().sigma_floor,
            seed: cfg.seed,
        }
    }
}

/// Trained weights plus their reload metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: TrainedParams,
    pub config: CheckpointConfig,
}

pub fn checkpoint_to_string(ckpt: &Checkpoint) -> String {
    let meta = vec![
        ("arch".to_string(), ckpt.params.kind().to_string()),
        ("mode".to_string(), ckpt.config.mode.as_str().to_string()),
        (
            "kl_direction".to_string(),
            ckpt.config.kl_direction.as_str().to_string(),
        ),
        (
            "pooled_posterior".to_string(),
            ckpt.config.pooled_posterior.to_string(),
        ),
        ("sigma_floor".to_string(), fmt_f64(ckpt.config.sigma_floor)),
        ("seed".to_string(), ckpt.config.seed.to_string()),
    ];
    let tensors = match &ckpt.params {
        TrainedParams::Mlp(p) => mlp_tensors("", p),
        TrainedParams::Vib(p) => {
            let mut ts = mlp_tensors("mu.", &p.mu_head);
            ts.extend(mlp_tensors("sigma.", &p.sigma_head));
            ts
        }
    };
    Artifact {
        kind: "checkpoint".to_string(),
        meta,
        tensors,
    }
    .serialize()
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &checkpoint_to_string(ckpt))
}

pub fn parse_checkpoint(text: &str, path: &str) -> Result<Checkpoint> {
    let art = Artifact::parse(text, path)?;
    if art.kind != "checkpoint" {
        return Err(parse_err(
            path,
            0,
            format!("expected a checkpoint artifact, found '{}'", art.kind),
        ));
    }
    let arch = art.meta_get("arch", path)?;
    let params = match arch {
        "mlp" => TrainedParams::Mlp(mlp_from_artifact(&art, "", path)?),
        "vib" => TrainedParams::Vib(VibProjectorParams::new(
            mlp_from_artifact(&art, "mu.", path)?,
            mlp_from_artifact(&art, "sigma.", path)?,
        )?),
        other => return Err(parse_err(path, 0, format!("unknown arch '{other}'"))),
    };
    let config = CheckpointConfig {
        mode: TrainMode::parse(art.meta_get("mode", path)?)?,
        kl_direction: KlDirection::parse(art.meta_get("kl_direction", path)?)?,
        pooled_posterior: art
            .meta_get("pooled_posterior", path)?
            .parse()
            .map_err(|_| parse_err(path, 0, "bad pooled_posterior"))?,
        sigma_floor: art
            .meta_get("sigma_floor", path)?
            .parse()
            .map_err(|_| parse_err(path, 0, "bad sigma_floor"))?,
        seed: art
            .meta_get("seed", path)?
            .parse()
            .map_err(|_| parse_err(path, 0, "bad seed"))?,
    };
    Ok(Checkpoint { params, config })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    parse_checkpoint(&read_file(path)?, &path.display().to_string())
}

pub fn world_to_string(world: &World) -> String {
    let meta = vec![
        ("n_objects".to_string(), world.n_objects.to_string()),
        ("input_dim".to_string(), world.input_dim.to_string()),
        (
            "tokens_per_sample".to_string(),
            world.tokens_per_sample.to_string(),
        ),
        (
            "vocab_size".to_string(),
            world.decoder.vocab_size().to_string(),
        ),
        ("d_z".to_string(), world.decoder.d_z().to_string()),
        ("d_model".to_string(), world.decoder.d_model().to_string()),
        ("seed".to_string(), world.seed.to_string()),
    ];
    let tensors = vec![
        tensor_of("embeddings", world.decoder.token_embeddings.table()),
        tensor_of("readout", &world.decoder.readout),
        tensor_of("mixing", &world.decoder.mixing),
    ];
    Artifact {
        kind: "world".to_string(),
        meta,
        tensors,
    }
    .serialize()
}

pub fn save_world(path: &Path, world: &World) -> Result<()> {
    write_atomic(path, &world_to_string(world))
}

pub fn parse_world(text: &str, path: &str) -> Result<World> {
    let art = Artifact::parse(text, path)?;
    if art.kind != "world" {
        return Err(parse_err(
            path,
            0,
            format!("expected a world artifact, found '{}'", art.kind),
        ));
    }
    let embeddings = FrozenEmbeddings::new(matrix_from(art.tensor("embeddings", path)?)?)?;
    let readout = matrix_from(art.tensor("readout", path)?)?;
    let mixing = matrix_from(art.tensor("mixing", path)?)?;
    let decoder = FrozenDecoderParams::new(embeddings, readout, mixing)?;
    let parse_meta = |key: &str| -> Result<usize> {
        art.meta_get(key, path)?
            .parse()
            .map_err(|_| parse_err(path, 0, format!("bad {key}")))
    };
    Ok(World {
        decoder,
        n_objects: parse_meta("n_objects")?,
        input_dim: parse_meta("input_dim")?,
        tokens_per_sample: parse_meta("tokens_per_sample")?,
        seed: art
            .meta_get("seed", path)?
            .parse()
            .map_err(|_| parse_err(path, 0, "bad seed"))?,
    })
}

pub fn load_world(path: &Path) -> Result<World> {
    parse_world(&read_file(path)?, &path.display().to_string())
}

/// Dataset and world must describe the same token/feature layout.
pub fn check_compatible(cfg: &SynthConfig, world: &World) -> Result<()> {
    if cfg.vocab_size != world.decoder.vocab_size()
        || cfg.n_objects != world.n_objects
        || cfg.input_dim != world.input_dim
        || cfg.tokens_per_sample != world.tokens_per_sample
        || cfg.d_z != world.decoder.d_z()
        || cfg.d_model != world.decoder.d_model()
    {
        return Err(Error::Config(format!(
            "dataset ({} objects, vocab {}, input {}, tokens {}, d_z {}, d_model {}) \
             does not match world ({} objects, vocab {}, input {}, tokens {}, d_z {}, d_model {})",
            cfg.n_objects,
            cfg.vocab_size,
            cfg.input_dim,
            cfg.tokens_per_sample,
            cfg.d_z,
            cfg.d_model,
            world.n_objects,
            world.decoder.vocab_size(),
            world.input_dim,
            world.tokens_per_sample,
            world.decoder.d_z(),
            world.decoder.d_model(),
        )));
    }
    Ok(())
}

/// Applies `key = value` lines from a config file on top of a base config.
/// `#` lines are comments; keys mirror the trainer config fields.
pub fn apply_train_config_text(text: &str, path: &str, base: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = base;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(parse_err(path, lineno, "expected 'key = value'"));
        };
        let key = key.trim();
        let value = value.trim();
        apply_train_config_key(&mut cfg, key, value)
            .map_err(|e| parse_err(path, lineno, e.to_string()))?;
    }
    Ok(cfg)
}

/// Sets a single trainer config field by name; shared by the config-file
/// parser and the CLI flag overrides.
pub fn apply_train_config_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    let bad = |what: &str| Error::Config(format!("bad {what} '{value}'"));
    match key {
        "mode" => cfg.mode = TrainMode::parse(value)?,
        "base_beta" => cfg.base_beta = value.parse().map_err(|_| bad("base_beta"))?,
        "lr" => cfg.lr = value.parse().map_err(|_| bad("lr"))?,
        "weight_decay" => cfg.weight_decay = value.parse().map_err(|_| bad("weight_decay"))?,
        "micro_batch" => cfg.micro_batch = value.parse().map_err(|_| bad("micro_batch"))?,
        "grad_accum" => cfg.grad_accum = value.parse().map_err(|_| bad("grad_accum"))?,
        "epochs" => cfg.epochs = value.parse().map_err(|_| bad("epochs"))?,
        "warmup_fraction" => {
            cfg.warmup_fraction = value.parse().map_err(|_| bad("warmup_fraction"))?
        }
        "poly_decay_power" => {
            cfg.poly_decay_power = value.parse().map_err(|_| bad("poly_decay_power"))?
        }
        "dropout_rate" => cfg.dropout_rate = value.parse().map_err(|_| bad("dropout_rate"))?,
        "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
        "kl_direction" => cfg.kl_direction = KlDirection::parse(value)?,
        "pooled_posterior" => {
            cfg.pooled_posterior = value.parse().map_err(|_| bad("pooled_posterior"))?
        }
        "hidden_dim" => cfg.hidden_dim = value.parse().map_err(|_| bad("hidden_dim"))?,
        other => return Err(Error::Config(format!("unknown config key '{other}'"))),
    }
    Ok(())
}

/// The fully resolved trainer config as ordered key-value pairs, for
/// manifests and reproducibility records.
pub fn train_config_entries(cfg: &TrainConfig) -> Vec<(String, String)> {
    vec![
        ("mode".into(), cfg.mode.as_str().to_string()),
        ("base_beta".into(), fmt_f64(cfg.base_beta)),
        ("lr".into(), fmt_f64(cfg.lr)),
        ("weight_decay".into(), fmt_f64(cfg.weight_decay)),
        ("micro_batch".into(), cfg.micro_batch.to_string()),
        ("grad_accum".into(), cfg.grad_accum.to_string()),
        ("epochs".into(), cfg.epochs.to_string()),
        ("warmup_fraction".into(), fmt_f64(cfg.warmup_fraction)),
        ("poly_decay_power".into(), fmt_f64(cfg.poly_decay_power)),
        ("dropout_rate".into(), fmt_f64(cfg.dropout_rate)),
        ("seed".into(), cfg.seed.to_string()),
        ("kl_direction".into(), cfg.kl_direction.as_str().to_string()),
        ("pooled_posterior".into(), cfg.pooled_posterior.to_string()),
        ("hidden_dim".into(), cfg.hidden_dim.to_string()),
    ]
}

/// The resolved synthesis config as ordered key-value pairs.
pub fn synth_config_entries(cfg: &SynthConfig) -> Vec<(String, String)> {
    cfg_lines(cfg)
}

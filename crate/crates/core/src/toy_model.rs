//! Frozen toy decoder and loss assembly: prompt/target embedding, mean-pooled
//! context, teacher-forced cross-entropy, the combined stochastic objective
//! with its entropy-scheduled compression weight, and full analytic backprop
//! with a finite-difference gradient-check harness.
//!
//! The decoder is deliberately minimal: a frozen mean-pool over soft visual
//! tokens and embedded text, a tanh bottleneck, and a linear readout. It reads
//! every visual token, produces per-position logits, and never trains.

use std::collections::BTreeSet;

use crate::adaptive_beta::{
    effective_beta, pool_tokens, similarity_distribution, FrozenEmbeddings, SimilarityStats,
};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};
use crate::projector::{
    mlp_backward, mlp_forward_cached, projector_backward, vib_forward_cached, MlpCache,
    MlpGradients, MlpProjectorParams, NoiseSource, PriorSpec, VibConfig, VibForwardCache,
    VibGradients, VibProjectorParams,
};

/// Frozen decoder: `logits = readout * tanh(mixing * context)` where the
/// context is the mean of all soft visual tokens and embedded text tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenDecoderParams {
    pub token_embeddings: FrozenEmbeddings,
    /// `|V| x d_model`
    pub readout: Matrix,
    /// `d_model x d_z`
    pub mixing: Matrix,
}

impl FrozenDecoderParams {
    pub fn new(
        token_embeddings: FrozenEmbeddings,
        readout: Matrix,
        mixing: Matrix,
    ) -> Result<Self> {
        if readout.rows() != token_embeddings.vocab_size() {
            return Err(Error::Dimension(format!(
                "readout has {} rows but vocabulary has {} tokens",
                readout.rows(),
                token_embeddings.vocab_size()
            )));
        }
        if mixing.cols() != token_embeddings.dim() {
            return Err(Error::Dimension(format!(
                "mixing expects context dim {}, embeddings have dim {}",
                mixing.cols(),
                token_embeddings.dim()
            )));
        }
        if readout.cols() != mixing.rows() {
            return Err(Error::Dimension(format!(
                "readout takes dim {} but mixing produces dim {}",
                readout.cols(),
                mixing.rows()
            )));
        }
        Ok(FrozenDecoderParams {
            token_embeddings,
            readout,
            mixing,
        })
    }

    /// Seeded frozen decoder with the readout tied to the embedding table
    /// and a residual-style mixing map (identity plus seeded jitter).
    ///
    /// The tie is what links token emission to embedding-space geometry: a
    /// soft token that sits close to a word embedding raises exactly that
    /// word's logit, the way a tied LM head does. The readout is the table
    /// scaled by 3 so confident margins are expressible through the bounded
    /// tanh bottleneck. Requires `d_model == d_z`.
    pub fn seeded(
        vocab_size: usize,
        d_z: usize,
        d_model: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if d_model != d_z {
            return Err(Error::Config(format!(
                "the tied seeded decoder needs d_model == d_z, got {d_model} != {d_z}"
            )));
        }
        let mut emb_rng = rng.split(101);
        let mut mixing_rng = rng.split(103);
        let token_embeddings =
            FrozenEmbeddings::seeded(vocab_size, d_z, 1.0 / (d_z as f64).sqrt(), &mut emb_rng)?;
        let mut readout = token_embeddings.table().clone();
        readout.scale(3.0);
        let mut mixing =
            Matrix::seeded_normal(d_model, d_z, 0.3 / (d_z as f64).sqrt(), &mut mixing_rng);
        for i in 0..d_model {
            let v = mixing.get(i, i) + 1.0;
            mixing.set(i, i, v);
        }
        FrozenDecoderParams::new(token_embeddings, readout, mixing)
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embeddings.vocab_size()
    }

    pub fn d_z(&self) -> usize {
        self.token_embeddings.dim()
    }

    pub fn d_model(&self) -> usize {
        self.mixing.rows()
    }
}

/// One supervised example.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSample {
    pub id: u64,
    /// tokens x input_dim visual features.
    pub visual: Matrix,
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
    pub gold_objects: BTreeSet<usize>,
    /// Whether the co-occurrence bias machinery shaped this sample.
    pub present_spurious: bool,
}

impl DataSample {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.target.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "sample {} has no target tokens",
                self.id
            )));
        }
        for &t in self.prompt.iter().chain(self.target.iter()) {
            if t >= vocab_size {
                return Err(Error::InvalidArgument(format!(
                    "sample {} uses token id {t} outside vocabulary of {vocab_size}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// The pieces of one training objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kl: f64,
    pub effective_beta: f64,
    pub total: f64,
}

fn embed_sum_checked(ids: &[usize], emb: &FrozenEmbeddings, acc: &mut [f64]) -> Result<()> {
    for &id in ids {
        if id >= emb.vocab_size() {
            return Err(Error::InvalidArgument(format!(
                "token id {id} outside vocabulary of {}",
                emb.vocab_size()
            )));
        }
        for (a, &e) in acc.iter_mut().zip(emb.row(id).iter()) {
            *a += e;
        }
    }
    Ok(())
}

fn logits_from_context(context: &[f64], decoder: &FrozenDecoderParams) -> Result<Vec<f64>> {
    let u = decoder.mixing.matvec(context)?;
    let a: Vec<f64> = u.iter().map(|x| x.tanh()).collect();
    decoder.readout.matvec(&a)
}

/// Per-position logits for teacher forcing: the context mixes all soft visual
/// tokens, the embedded prompt and the embedded target prefix `y_{<position}`.
pub fn decode_logits(
    z: &Matrix,
    prompt: &[usize],
    target_prefix: &[usize],
    decoder: &FrozenDecoderParams,
) -> Result<Vec<f64>> {
    if z.cols() != decoder.d_z() {
        return Err(Error::Dimension(format!(
            "soft tokens have dim {}, decoder expects {}",
            z.cols(),
            decoder.d_z()
        )));
    }
    let mut sum = vec![0.0; decoder.d_z()];
    for j in 0..z.rows() {
        for (s, &x) in sum.iter_mut().zip(z.row(j).iter()) {
            *s += x;
        }
    }
    embed_sum_checked(prompt, &decoder.token_embeddings, &mut sum)?;
    embed_sum_checked(target_prefix, &decoder.token_embeddings, &mut sum)?;
    let denom = (z.rows() + prompt.len() + target_prefix.len()) as f64;
    let context: Vec<f64> = sum.iter().map(|s| s / denom).collect();
    logits_from_context(&context, decoder)
}

struct CePosition {
    probs: Vec<f64>,
    activated: Vec<f64>,
    denom: f64,
    target: usize,
}

/// Retained per-position state of one teacher-forced pass.
pub struct CeCache {
    positions: Vec<CePosition>,
}

fn sequence_ce_cached(
    z: &Matrix,
    prompt: &[usize],
    target: &[usize],
    decoder: &FrozenDecoderParams,
) -> Result<(f64, CeCache)> {
    if target.is_empty() {
        return Err(Error::InvalidArgument(
            "teacher forcing requires at least one target token".to_string(),
        ));
    }
    if z.cols() != decoder.d_z() {
        return Err(Error::Dimension(format!(
            "soft tokens have dim {}, decoder expects {}",
            z.cols(),
            decoder.d_z()
        )));
    }
    let mut sum = vec![0.0; decoder.d_z()];
    for j in 0..z.rows() {
        for (s, &x) in sum.iter_mut().zip(z.row(j).iter()) {
            *s += x;
        }
    }
    embed_sum_checked(prompt, &decoder.token_embeddings, &mut sum)?;

    let mut positions = Vec::with_capacity(target.len());
    let mut nll_acc = 0.0;
    for (t, &y_t) in target.iter().enumerate() {
        if y_t >= decoder.vocab_size() {
            return Err(Error::InvalidArgument(format!(
                "target token id {y_t} outside vocabulary of {}",
                decoder.vocab_size()
            )));
        }
        let denom = (z.rows() + prompt.len() + t) as f64;
        let context: Vec<f64> = sum.iter().map(|s| s / denom).collect();
        let u = decoder.mixing.matvec(&context)?;
        let a: Vec<f64> = u.iter().map(|x| x.tanh()).collect();
        let logits = decoder.readout.matvec(&a)?;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        nll_acc += lse - logits[y_t];
        let probs: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
        positions.push(CePosition {
            probs,
            activated: a,
            denom,
            target: y_t,
        });
        // Teacher forcing: fold the gold token into the running context.
        embed_sum_checked(&[y_t], &decoder.token_embeddings, &mut sum)?;
    }
    let ce = nll_acc / target.len() as f64;
    Ok((ce, CeCache { positions }))
}

/// Mean teacher-forced negative log-likelihood over target positions.
pub fn sequence_ce(
    z: &Matrix,
    prompt: &[usize],
    target: &[usize],
    decoder: &FrozenDecoderParams,
) -> Result<f64> {
    Ok(sequence_ce_cached(z, prompt, target, decoder)?.0)
}

/// Gradient of the mean NLL w.r.t. any single soft-token row. Every row of
/// `z` receives the same vector because the context mean-pools them.
fn ce_backward_row(decoder: &FrozenDecoderParams, cache: &CeCache) -> Result<Vec<f64>> {
    let n_pos = cache.positions.len() as f64;
    let mut g_row = vec![0.0; decoder.d_z()];
    for pos in &cache.positions {
        let mut g_logits = pos.probs.clone();
        g_logits[pos.target] -= 1.0;
        for g in g_logits.iter_mut() {
            *g /= n_pos;
        }
        let g_a = decoder.readout.matvec_transposed(&g_logits)?;
        let g_u: Vec<f64> = g_a
            .iter()
            .zip(pos.activated.iter())
            .map(|(&ga, &a)| ga * (1.0 - a * a))
            .collect();
        let g_context = decoder.mixing.matvec_transposed(&g_u)?;
        for (g, &gc) in g_row.iter_mut().zip(g_context.iter()) {
            *g += gc / pos.denom;
        }
    }
    Ok(g_row)
}

/// How the compression weight is chosen for one objective evaluation.
#[derive(Clone, Copy, Debug)]
pub enum BetaPolicy {
    /// Entropy-driven schedule recomputed from the base each sample.
    Adaptive { base: f64 },
    /// Constant weight; also used to freeze the schedule for FD oracles.
    Fixed { value: f64 },
}

/// Retained state of one full objective evaluation.
pub struct TotalLossCache {
    pub vib: VibForwardCache,
    ce: CeCache,
    pub sim: SimilarityStats,
    pub breakdown: LossBreakdown,
}

/// Full training objective for one sample: stochastic forward, similarity
/// entropy, scheduled compression weight and teacher-forced prediction loss.
///
/// The schedule output scales the loss but is excluded from every gradient
/// path; [`backward_all`] treats it as a constant.
pub fn total_loss(
    sample: &DataSample,
    params: &VibProjectorParams,
    prior: &PriorSpec,
    decoder: &FrozenDecoderParams,
    cfg: VibConfig,
    policy: BetaPolicy,
    noise: NoiseSource<'_>,
) -> Result<(LossBreakdown, TotalLossCache)> {
    sample.validate(decoder.vocab_size())?;
    let vib = vib_forward_cached(&sample.visual, params, prior, cfg, noise)?;
    let pooled = pool_tokens(&vib.sample.z)?;
    let sim = similarity_distribution(&pooled, &decoder.token_embeddings)?;
    let beta = match policy {
        BetaPolicy::Adaptive { base } => effective_beta(base, sim.normalized_entropy),
        BetaPolicy::Fixed { value } => value,
    };
    let (ce, ce_cache) =
        sequence_ce_cached(&vib.sample.z, &sample.prompt, &sample.target, decoder)?;
    let kl = vib.kl;
    let breakdown = LossBreakdown {
        ce,
        kl,
        effective_beta: beta,
        total: ce + beta * kl,
    };
    Ok((
        breakdown,
        TotalLossCache {
            vib,
            ce: ce_cache,
            sim,
            breakdown,
        },
    ))
}

/// Reverse pass of [`total_loss`] for the projector heads only. The decoder
/// and embeddings are frozen, the noise is a constant, and the compression
/// weight enters as the fixed number recorded in the cache.
pub fn backward_all(
    cache: &TotalLossCache,
    params: &VibProjectorParams,
    prior: &PriorSpec,
    decoder: &FrozenDecoderParams,
) -> Result<VibGradients> {
    let g_row = ce_backward_row(decoder, &cache.ce)?;
    let tokens = cache.vib.sample.z.rows();
    let mut g_z = Matrix::zeros(tokens, decoder.d_z());
    for j in 0..tokens {
        g_z.row_mut(j).copy_from_slice(&g_row);
    }
    let (grads, _g_v) = projector_backward(
        params,
        prior,
        &cache.vib,
        &g_z,
        cache.breakdown.effective_beta,
    )?;
    Ok(grads)
}

/// Central finite differences over every head parameter, with noise and the
/// compression weight both held fixed. This is the independent oracle the
/// analytic path is checked against.
pub fn finite_difference_grads(
    sample: &DataSample,
    params: &VibProjectorParams,
    prior: &PriorSpec,
    decoder: &FrozenDecoderParams,
    cfg: VibConfig,
    beta_value: f64,
    eps: &Matrix,
    step: f64,
) -> Result<VibGradients> {
    let mut work = params.clone();
    let mut grads = VibGradients::zeros_like(params);

    let loss_at = |p: &VibProjectorParams| -> Result<f64> {
        let (breakdown, _) = total_loss(
            sample,
            p,
            prior,
            decoder,
            cfg,
            BetaPolicy::Fixed { value: beta_value },
            NoiseSource::Fixed(eps),
        )?;
        Ok(breakdown.total)
    };

    for head in 0..2 {
        for view_idx in 0..4 {
            let len = {
                let h = if head == 0 {
                    &mut work.mu_head
                } else {
                    &mut work.sigma_head
                };
                h.views_mut()[view_idx].1.len()
            };
            for k in 0..len {
                let write = |p: &mut VibProjectorParams, value: f64| {
                    let h = if head == 0 {
                        &mut p.mu_head
                    } else {
                        &mut p.sigma_head
                    };
                    h.views_mut()[view_idx].1[k] = value;
                };
                let base = {
                    let h = if head == 0 {
                        &mut work.mu_head
                    } else {
                        &mut work.sigma_head
                    };
                    h.views_mut()[view_idx].1[k]
                };
                write(&mut work, base + step);
                let up = loss_at(&work)?;
                write(&mut work, base - step);
                let down = loss_at(&work)?;
                write(&mut work, base);
                let g = {
                    let gh = if head == 0 {
                        &mut grads.mu_head
                    } else {
                        &mut grads.sigma_head
                    };
                    match view_idx {
                        0 => &mut gh.w_z.data_mut()[k],
                        1 => &mut gh.b_z[k],
                        2 => &mut gh.w_h.data_mut()[k],
                        _ => &mut gh.b_h[k],
                    }
                };
                *g = (up - down) / (2.0 * step);
            }
        }
    }
    Ok(grads)
}

/// Elementwise relative comparison of two gradient sets.
/// Returns the worst relative error and the parameter that produced it.
pub fn compare_gradients(analytic: &VibGradients, reference: &VibGradients) -> (f64, String) {
    let mut max_rel = 0.0;
    let mut worst = String::from("none");
    for ((name_a, view_a), (_, view_r)) in analytic.views().into_iter().zip(reference.views()) {
        for (k, (&a, &r)) in view_a.iter().zip(view_r.iter()).enumerate() {
            let rel = (a - r).abs() / r.abs().max(1e-8);
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{name_a}[{k}]");
            }
        }
    }
    (max_rel, worst)
}

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub params_checked: usize,
}

/// Checks the analytic gradients of the full objective against central finite
/// differences, with the noise draw fixed and the schedule weight frozen at
/// its value from the unperturbed forward pass.
pub fn grad_check(
    sample: &DataSample,
    params: &VibProjectorParams,
    prior: &PriorSpec,
    decoder: &FrozenDecoderParams,
    cfg: VibConfig,
    base_beta: f64,
    step: f64,
    eps: &Matrix,
) -> Result<GradCheckReport> {
    if !(1e-8..=1e-4).contains(&step) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {step} outside [1e-8, 1e-4]"
        )));
    }
    let (breakdown, cache) = total_loss(
        sample,
        params,
        prior,
        decoder,
        cfg,
        BetaPolicy::Adaptive { base: base_beta },
        NoiseSource::Fixed(eps),
    )?;
    let analytic = backward_all(&cache, params, prior, decoder)?;
    let fd = finite_difference_grads(
        sample,
        params,
        prior,
        decoder,
        cfg,
        breakdown.effective_beta,
        eps,
        step,
    )?;
    let (max_rel_err, worst_param) = compare_gradients(&analytic, &fd);
    let params_checked = analytic.views().iter().map(|(_, v)| v.len()).sum();
    Ok(GradCheckReport {
        max_rel_err,
        worst_param,
        params_checked,
    })
}

/// Dropout masks for the deterministic baseline. Masks hold raw 0/1 draws;
/// the forward applies inverted scaling `1/(1-rate)`.
#[derive(Clone, Debug)]
pub struct DropoutSpec {
    pub input_mask: Option<Matrix>,
    pub output_mask: Option<Matrix>,
    pub rate: f64,
}

/// Draws a 0/1 keep mask with keep probability `1 - rate`.
pub fn bernoulli_keep_mask(rows: usize, cols: usize, rate: f64, rng: &mut SeededRng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for x in m.data_mut().iter_mut() {
        *x = if rng.next_f64() < rate { 0.0 } else { 1.0 };
    }
    m
}

/// Retained state of one deterministic-baseline objective evaluation.
pub struct FtCache {
    masked_input: Matrix,
    mlp_cache: MlpCache,
    /// Soft tokens after the optional output mask; what the decoder consumed.
    pub z: Matrix,
    output_scale: Option<Matrix>,
    ce: CeCache,
    pub ce_value: f64,
}

/// Plain cross-entropy objective for the deterministic projector, with
/// optional input/output dropout.
pub fn ft_loss(
    sample: &DataSample,
    params: &MlpProjectorParams,
    decoder: &FrozenDecoderParams,
    dropout: Option<&DropoutSpec>,
) -> Result<(f64, FtCache)> {
    sample.validate(decoder.vocab_size())?;
    let mut masked_input = sample.visual.clone();
    let mut output_scale = None;
    if let Some(spec) = dropout {
        let keep_scale = 1.0 / (1.0 - spec.rate);
        if let Some(mask) = &spec.input_mask {
            if mask.rows() != masked_input.rows() || mask.cols() != masked_input.cols() {
                return Err(Error::Dimension(
                    "input dropout mask does not match visual features".to_string(),
                ));
            }
            for (v, &m) in masked_input.data_mut().iter_mut().zip(mask.data().iter()) {
                *v *= m * keep_scale;
            }
        }
        if let Some(mask) = &spec.output_mask {
            let mut scale = mask.clone();
            scale.scale(keep_scale);
            output_scale = Some(scale);
        }
    }
    let (mut z, mlp_cache) = mlp_forward_cached(&masked_input, params)?;
    if let Some(scale) = &output_scale {
        if scale.rows() != z.rows() || scale.cols() != z.cols() {
            return Err(Error::Dimension(
                "output dropout mask does not match soft tokens".to_string(),
            ));
        }
        for (zv, &s) in z.data_mut().iter_mut().zip(scale.data().iter()) {
            *zv *= s;
        }
    }
    let (ce, ce_cache) = sequence_ce_cached(&z, &sample.prompt, &sample.target, decoder)?;
    Ok((
        ce,
        FtCache {
            masked_input,
            mlp_cache,
            z,
            output_scale,
            ce: ce_cache,
            ce_value: ce,
        },
    ))
}

/// Reverse pass of [`ft_loss`] for the deterministic projector.
pub fn ft_backward(
    cache: &FtCache,
    params: &MlpProjectorParams,
    decoder: &FrozenDecoderParams,
) -> Result<MlpGradients> {
    let g_row = ce_backward_row(decoder, &cache.ce)?;
    let tokens = cache.z.rows();
    let mut g_z = Matrix::zeros(tokens, decoder.d_z());
    for j in 0..tokens {
        g_z.row_mut(j).copy_from_slice(&g_row);
    }
    if let Some(scale) = &cache.output_scale {
        for (g, &s) in g_z.data_mut().iter_mut().zip(scale.data().iter()) {
            *g *= s;
        }
    }
    let (grads, _g_v) = mlp_backward(params, &cache.masked_input, &cache.mlp_cache, &g_z)?;
    Ok(grads)
}

/// Greedy decoding with the frozen decoder. Emits exactly `max_len` tokens;
/// ties break toward the lowest token id.
pub fn decode_greedy(
    z: &Matrix,
    prompt: &[usize],
    decoder: &FrozenDecoderParams,
    max_len: usize,
) -> Result<Vec<usize>> {
    let mut generated: Vec<usize> = Vec::with_capacity(max_len);
    for _ in 0..max_len {
        let logits = decode_logits(z, prompt, &generated, decoder)?;
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        generated.push(best);
    }
    Ok(generated)
}

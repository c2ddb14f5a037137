//! Deterministic MLP projector and its stochastic Gaussian counterpart:
//! train/eval forward passes, closed-form KL to a diagonal Gaussian prior,
//! and analytic reverse-mode gradients for both heads.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numerics::{gelu, gelu_prime, sigmoid, softplus, Matrix, SeededRng};

/// Which way the Gaussian divergence is taken.
///
/// `AsPrinted` is `KL(prior || posterior)`; `PosteriorToPrior` is
/// `KL(posterior || prior)`. Both are exposed so experiments can compare,
/// and `AsPrinted` is the default.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlDirection {
    AsPrinted,
    PosteriorToPrior,
}

impl KlDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            KlDirection::AsPrinted => "as-printed",
            KlDirection::PosteriorToPrior => "posterior-to-prior",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "as-printed" => Ok(KlDirection::AsPrinted),
            "posterior-to-prior" => Ok(KlDirection::PosteriorToPrior),
            other => Err(Error::Config(format!("unknown kl direction '{other}'"))),
        }
    }
}

/// Behavioural knobs of the stochastic projector.
#[derive(Clone, Copy, Debug)]
pub struct VibConfig {
    pub direction: KlDirection,
    /// When set, posterior statistics are computed from the mean-pooled input
    /// and broadcast to every token instead of per token.
    pub pooled_posterior: bool,
    /// Lower bound applied to sigma after the softplus.
    pub sigma_floor: f64,
}

impl Default for VibConfig {
    fn default() -> Self {
        VibConfig {
            direction: KlDirection::AsPrinted,
            pooled_posterior: false,
            sigma_floor: 1e-8,
        }
    }
}

/// Two-layer MLP head: `out = W_h * gelu(W_z * x + b_z) + b_h`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpProjectorParams {
    pub w_z: Matrix,
    pub b_z: Vec<f64>,
    pub w_h: Matrix,
    pub b_h: Vec<f64>,
}

impl MlpProjectorParams {
    pub fn new(w_z: Matrix, b_z: Vec<f64>, w_h: Matrix, b_h: Vec<f64>) -> Result<Self> {
        if b_z.len() != w_z.rows() {
            return Err(Error::Dimension(format!(
                "b_z length {} does not match w_z rows {}",
                b_z.len(),
                w_z.rows()
            )));
        }
        if w_h.cols() != w_z.rows() {
            return Err(Error::Dimension(format!(
                "w_h cols {} do not match hidden size {}",
                w_h.cols(),
                w_z.rows()
            )));
        }
        if b_h.len() != w_h.rows() {
            return Err(Error::Dimension(format!(
                "b_h length {} does not match w_h rows {}",
                b_h.len(),
                w_h.rows()
            )));
        }
        Ok(MlpProjectorParams { w_z, b_z, w_h, b_h })
    }

    /// Random init: weights `N(0, scale^2 / fan_in)`, biases zero.
    pub fn seeded(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        scale: f64,
        rng: &mut SeededRng,
    ) -> Self {
        let w_z = Matrix::seeded_normal(
            hidden_dim,
            input_dim,
            scale / (input_dim as f64).sqrt(),
            rng,
        );
        let w_h = Matrix::seeded_normal(
            output_dim,
            hidden_dim,
            scale / (hidden_dim as f64).sqrt(),
            rng,
        );
        MlpProjectorParams {
            w_z,
            b_z: vec![0.0; hidden_dim],
            w_h,
            b_h: vec![0.0; output_dim],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_z.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w_h.rows()
    }

    /// Named flat views over the parameters, in checkpoint order.
    pub fn views(&self) -> [(&'static str, &[f64]); 4] {
        [
            ("w_z", self.w_z.data()),
            ("b_z", self.b_z.as_slice()),
            ("w_h", self.w_h.data()),
            ("b_h", self.b_h.as_slice()),
        ]
    }

    pub fn views_mut(&mut self) -> [(&'static str, &mut [f64]); 4] {
        [
            ("w_z", self.w_z.data_mut()),
            ("b_z", self.b_z.as_mut_slice()),
            ("w_h", self.w_h.data_mut()),
            ("b_h", self.b_h.as_mut_slice()),
        ]
    }

    /// Shapes in the same order as [`MlpProjectorParams::views`]; vectors are `(len, 1)`.
    pub fn shapes(&self) -> [(usize, usize); 4] {
        [
            (self.w_z.rows(), self.w_z.cols()),
            (self.b_z.len(), 1),
            (self.w_h.rows(), self.w_h.cols()),
            (self.b_h.len(), 1),
        ]
    }
}

/// Gradients matching an [`MlpProjectorParams`] layout.
#[derive(Clone, Debug)]
pub struct MlpGradients {
    pub w_z: Matrix,
    pub b_z: Vec<f64>,
    pub w_h: Matrix,
    pub b_h: Vec<f64>,
}

impl MlpGradients {
    pub fn zeros_like(params: &MlpProjectorParams) -> Self {
        MlpGradients {
            w_z: Matrix::zeros(params.w_z.rows(), params.w_z.cols()),
            b_z: vec![0.0; params.b_z.len()],
            w_h: Matrix::zeros(params.w_h.rows(), params.w_h.cols()),
            b_h: vec![0.0; params.b_h.len()],
        }
    }

    pub fn add_assign(&mut self, other: &MlpGradients) -> Result<()> {
        self.w_z.add_assign(&other.w_z)?;
        self.w_h.add_assign(&other.w_h)?;
        for (a, b) in self.b_z.iter_mut().zip(other.b_z.iter()) {
            *a += b;
        }
        for (a, b) in self.b_h.iter_mut().zip(other.b_h.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.w_z.scale(factor);
        self.w_h.scale(factor);
        for v in self.b_z.iter_mut() {
            *v *= factor;
        }
        for v in self.b_h.iter_mut() {
            *v *= factor;
        }
    }

    pub fn views(&self) -> [(&'static str, &[f64]); 4] {
        [
            ("w_z", self.w_z.data()),
            ("b_z", self.b_z.as_slice()),
            ("w_h", self.w_h.data()),
            ("b_h", self.b_h.as_slice()),
        ]
    }

    pub fn squared_norm(&self) -> f64 {
        self.views()
            .iter()
            .map(|(_, v)| v.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }
}

/// Trainable state of the stochastic projector: a mean head and a
/// pre-softplus scale head of identical geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct VibProjectorParams {
    pub mu_head: MlpProjectorParams,
    pub sigma_head: MlpProjectorParams,
}

impl VibProjectorParams {
    pub fn new(mu_head: MlpProjectorParams, sigma_head: MlpProjectorParams) -> Result<Self> {
        if mu_head.input_dim() != sigma_head.input_dim()
            || mu_head.output_dim() != sigma_head.output_dim()
        {
            return Err(Error::Dimension(format!(
                "mu head maps {}->{} but sigma head maps {}->{}",
                mu_head.input_dim(),
                mu_head.output_dim(),
                sigma_head.input_dim(),
                sigma_head.output_dim()
            )));
        }
        Ok(VibProjectorParams {
            mu_head,
            sigma_head,
        })
    }

    /// Builds the stochastic projector around an existing deterministic head.
    ///
    /// The mean head is taken over verbatim; the scale head gets small random
    /// weights and a constant output bias so the initial sigma sits near
    /// `softplus(sigma_out_bias)` everywhere.
    pub fn from_pretrained(
        mu_head: MlpProjectorParams,
        sigma_scale: f64,
        sigma_out_bias: f64,
        rng: &mut SeededRng,
    ) -> Self {
        let mut sigma_head = MlpProjectorParams::seeded(
            mu_head.input_dim(),
            mu_head.hidden_dim(),
            mu_head.output_dim(),
            sigma_scale,
            rng,
        );
        for b in sigma_head.b_h.iter_mut() {
            *b = sigma_out_bias;
        }
        VibProjectorParams {
            mu_head,
            sigma_head,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mu_head.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.mu_head.output_dim()
    }

    pub fn views(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(8);
        for (name, view) in self.mu_head.views() {
            out.push((format!("mu.{name}"), view));
        }
        for (name, view) in self.sigma_head.views() {
            out.push((format!("sigma.{name}"), view));
        }
        out
    }
}

/// Gradients for both heads of a [`VibProjectorParams`].
#[derive(Clone, Debug)]
pub struct VibGradients {
    pub mu_head: MlpGradients,
    pub sigma_head: MlpGradients,
}

impl VibGradients {
    pub fn zeros_like(params: &VibProjectorParams) -> Self {
        VibGradients {
            mu_head: MlpGradients::zeros_like(&params.mu_head),
            sigma_head: MlpGradients::zeros_like(&params.sigma_head),
        }
    }

    pub fn add_assign(&mut self, other: &VibGradients) -> Result<()> {
        self.mu_head.add_assign(&other.mu_head)?;
        self.sigma_head.add_assign(&other.sigma_head)
    }

    pub fn scale(&mut self, factor: f64) {
        self.mu_head.scale(factor);
        self.sigma_head.scale(factor);
    }

    pub fn views(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(8);
        for (name, view) in self.mu_head.views() {
            out.push((format!("mu.{name}"), view));
        }
        for (name, view) in self.sigma_head.views() {
            out.push((format!("sigma.{name}"), view));
        }
        out
    }

    pub fn squared_norm(&self) -> f64 {
        self.mu_head.squared_norm() + self.sigma_head.squared_norm()
    }
}

/// Diagonal Gaussian prior over the projected space.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorSpec {
    pub mu_r: Vec<f64>,
    pub sigma_r: Vec<f64>,
}

impl PriorSpec {
    pub fn new(mu_r: Vec<f64>, sigma_r: Vec<f64>) -> Result<Self> {
        if mu_r.len() != sigma_r.len() {
            return Err(Error::Dimension(format!(
                "prior mean length {} does not match scale length {}",
                mu_r.len(),
                sigma_r.len()
            )));
        }
        if sigma_r.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Domain(
                "prior sigma entries must be strictly positive".to_string(),
            ));
        }
        Ok(PriorSpec { mu_r, sigma_r })
    }

    /// The conventional standard-normal prior.
    pub fn standard_normal(d_z: usize) -> Self {
        PriorSpec {
            mu_r: vec![0.0; d_z],
            sigma_r: vec![1.0; d_z],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu_r.len()
    }
}

static STATS_CONSTRUCTED: AtomicU64 = AtomicU64::new(0);

/// Process-wide count of [`GaussianStats`] constructions.
///
/// Test instrumentation: lets a purity test assert that deterministic code
/// paths never touch the stochastic machinery.
pub fn gaussian_stats_construction_count() -> u64 {
    STATS_CONSTRUCTED.load(Ordering::SeqCst)
}

/// Per-token diagonal Gaussian produced by the projector heads.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mu: Matrix,
    pub sigma: Matrix,
}

impl GaussianStats {
    pub fn new(mu: Matrix, sigma: Matrix) -> Result<Self> {
        if mu.rows() != sigma.rows() || mu.cols() != sigma.cols() {
            return Err(Error::Dimension(format!(
                "mu is {}x{} but sigma is {}x{}",
                mu.rows(),
                mu.cols(),
                sigma.rows(),
                sigma.cols()
            )));
        }
        if sigma.data().iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Domain(
                "sigma entries must be strictly positive".to_string(),
            ));
        }
        STATS_CONSTRUCTED.fetch_add(1, Ordering::SeqCst);
        Ok(GaussianStats { mu, sigma })
    }

    pub fn d_z(&self) -> usize {
        self.mu.cols()
    }

    pub fn tokens(&self) -> usize {
        self.mu.rows()
    }
}

/// One reparameterized draw: `z = mu + sigma (*) eps`, reconstructible exactly
/// from the retained parts.
#[derive(Clone, Debug)]
pub struct ReparamSample {
    pub z: Matrix,
    pub eps: Matrix,
    pub stats: GaussianStats,
}

/// Where the reparameterization noise comes from.
pub enum NoiseSource<'a> {
    /// Fresh standard normal draws.
    Rng(&'a mut SeededRng),
    /// Caller-supplied noise, e.g. for finite-difference harnesses.
    Fixed(&'a Matrix),
    /// All-zero noise: collapses the sample onto the mean.
    Zero,
}

/// Deterministic projector forward: per token, `W_h gelu(W_z v + b_z) + b_h`.
pub fn mlp_forward(v: &Matrix, params: &MlpProjectorParams) -> Result<Matrix> {
    Ok(mlp_forward_cached(v, params)?.0)
}

/// Retained activations of one head forward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    pub(crate) pre_activation: Matrix,
    pub(crate) activated: Matrix,
}

pub(crate) fn mlp_forward_cached(
    v: &Matrix,
    params: &MlpProjectorParams,
) -> Result<(Matrix, MlpCache)> {
    if v.cols() != params.input_dim() {
        return Err(Error::Dimension(format!(
            "projector expects input dim {}, got {}",
            params.input_dim(),
            v.cols()
        )));
    }
    let tokens = v.rows();
    let hidden = params.hidden_dim();
    let out_dim = params.output_dim();
    let mut pre = Matrix::zeros(tokens, hidden);
    let mut act = Matrix::zeros(tokens, hidden);
    let mut out = Matrix::zeros(tokens, out_dim);
    for j in 0..tokens {
        let mut h = params.w_z.matvec(v.row(j))?;
        for (hk, bk) in h.iter_mut().zip(params.b_z.iter()) {
            *hk += bk;
        }
        let a: Vec<f64> = h.iter().map(|&x| gelu(x)).collect();
        let mut o = params.w_h.matvec(&a)?;
        for (ok, bk) in o.iter_mut().zip(params.b_h.iter()) {
            *ok += bk;
        }
        pre.row_mut(j).copy_from_slice(&h);
        act.row_mut(j).copy_from_slice(&a);
        out.row_mut(j).copy_from_slice(&o);
    }
    Ok((
        out,
        MlpCache {
            pre_activation: pre,
            activated: act,
        },
    ))
}

/// Reverse pass of one head. `inputs` must be the rows the forward saw.
/// Returns parameter gradients and the gradient w.r.t. the inputs.
pub(crate) fn mlp_backward(
    params: &MlpProjectorParams,
    inputs: &Matrix,
    cache: &MlpCache,
    g_out: &Matrix,
) -> Result<(MlpGradients, Matrix)> {
    if g_out.rows() != inputs.rows() || g_out.cols() != params.output_dim() {
        return Err(Error::State(format!(
            "upstream gradient is {}x{} but forward produced {}x{}",
            g_out.rows(),
            g_out.cols(),
            inputs.rows(),
            params.output_dim()
        )));
    }
    let mut grads = MlpGradients::zeros_like(params);
    let mut g_inputs = Matrix::zeros(inputs.rows(), inputs.cols());
    for j in 0..inputs.rows() {
        let go = g_out.row(j);
        let a = cache.activated.row(j);
        let h = cache.pre_activation.row(j);
        for (r, &g) in go.iter().enumerate() {
            grads.b_h[r] += g;
            let wrow = grads.w_h.row_mut(r);
            for (w, &ak) in wrow.iter_mut().zip(a.iter()) {
                *w += g * ak;
            }
        }
        let g_a = params.w_h.matvec_transposed(go)?;
        let g_h: Vec<f64> = g_a
            .iter()
            .zip(h.iter())
            .map(|(&ga, &hk)| ga * gelu_prime(hk))
            .collect();
        for (r, &g) in g_h.iter().enumerate() {
            grads.b_z[r] += g;
            let wrow = grads.w_z.row_mut(r);
            for (w, &vk) in wrow.iter_mut().zip(inputs.row(j).iter()) {
                *w += g * vk;
            }
        }
        let g_v = params.w_z.matvec_transposed(&g_h)?;
        g_inputs.row_mut(j).copy_from_slice(&g_v);
    }
    Ok((grads, g_inputs))
}

/// Closed-form divergence between the per-token posterior and the prior,
/// averaged over tokens.
pub fn kl_diag_gaussian(
    stats: &GaussianStats,
    prior: &PriorSpec,
    direction: KlDirection,
) -> Result<f64> {
    if stats.d_z() != prior.dim() {
        return Err(Error::Dimension(format!(
            "stats dimension {} does not match prior dimension {}",
            stats.d_z(),
            prior.dim()
        )));
    }
    if stats.sigma.data().iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Domain(
            "sigma entries must be strictly positive".to_string(),
        ));
    }
    let tokens = stats.tokens();
    let mut total = 0.0;
    for j in 0..tokens {
        let mu = stats.mu.row(j);
        let sigma = stats.sigma.row(j);
        let mut acc = 0.0;
        for i in 0..prior.dim() {
            let var_t = sigma[i] * sigma[i];
            let var_r = prior.sigma_r[i] * prior.sigma_r[i];
            let diff = mu[i] - prior.mu_r[i];
            acc += match direction {
                KlDirection::AsPrinted => {
                    var_t.ln() - var_r.ln() - 1.0 + var_r / var_t + diff * diff / var_t
                }
                KlDirection::PosteriorToPrior => {
                    var_r.ln() - var_t.ln() - 1.0 + var_t / var_r + diff * diff / var_r
                }
            };
        }
        total += 0.5 * acc;
    }
    Ok(total / tokens as f64)
}

/// Gradient of the token-averaged divergence w.r.t. per-token `mu` and `sigma`.
pub(crate) fn kl_grad(
    stats: &GaussianStats,
    prior: &PriorSpec,
    direction: KlDirection,
) -> Result<(Matrix, Matrix)> {
    let tokens = stats.tokens();
    let inv_t = 1.0 / tokens as f64;
    let mut g_mu = Matrix::zeros(tokens, stats.d_z());
    let mut g_sigma = Matrix::zeros(tokens, stats.d_z());
    for j in 0..tokens {
        for i in 0..stats.d_z() {
            let s = stats.sigma.get(j, i);
            let sr = prior.sigma_r[i];
            let diff = stats.mu.get(j, i) - prior.mu_r[i];
            let (dm, ds) = match direction {
                KlDirection::AsPrinted => (
                    diff / (s * s),
                    1.0 / s - (sr * sr + diff * diff) / (s * s * s),
                ),
                KlDirection::PosteriorToPrior => (diff / (sr * sr), s / (sr * sr) - 1.0 / s),
            };
            g_mu.set(j, i, dm * inv_t);
            g_sigma.set(j, i, ds * inv_t);
        }
    }
    Ok((g_mu, g_sigma))
}

/// Everything retained from a stochastic forward pass that the backward
/// pass and the training loop need.
pub struct VibForwardCache {
    /// Rows the heads actually consumed: the tokens, or the pooled mean row.
    pub(crate) head_input: Matrix,
    pub(crate) mu_cache: MlpCache,
    pub(crate) sigma_cache: MlpCache,
    /// Sigma-head output before the softplus, per head-input row.
    pub(crate) sigma_pre: Matrix,
    pub sample: ReparamSample,
    pub kl: f64,
    pub(crate) cfg: VibConfig,
    pub(crate) tokens: usize,
}

fn broadcast_rows(row_source: &Matrix, tokens: usize) -> Matrix {
    if row_source.rows() == tokens {
        return row_source.clone();
    }
    let mut out = Matrix::zeros(tokens, row_source.cols());
    for j in 0..tokens {
        out.row_mut(j).copy_from_slice(row_source.row(0));
    }
    out
}

/// Full stochastic forward pass with retained intermediates.
pub fn vib_forward_cached(
    v: &Matrix,
    params: &VibProjectorParams,
    prior: &PriorSpec,
    cfg: VibConfig,
    noise: NoiseSource<'_>,
) -> Result<VibForwardCache> {
    if v.rows() == 0 {
        return Err(Error::InvalidArgument(
            "projector input must have at least one token".to_string(),
        ));
    }
    let tokens = v.rows();
    let head_input = if cfg.pooled_posterior {
        let mut pooled = vec![0.0; v.cols()];
        for j in 0..tokens {
            for (p, &x) in pooled.iter_mut().zip(v.row(j).iter()) {
                *p += x;
            }
        }
        for p in pooled.iter_mut() {
            *p /= tokens as f64;
        }
        Matrix::new(1, v.cols(), pooled)?
    } else {
        v.clone()
    };

    let (mu_rows, mu_cache) = mlp_forward_cached(&head_input, &params.mu_head)?;
    let (sigma_pre, sigma_cache) = mlp_forward_cached(&head_input, &params.sigma_head)?;
    let mut sigma_rows = Matrix::zeros(sigma_pre.rows(), sigma_pre.cols());
    for (out, &s) in sigma_rows
        .data_mut()
        .iter_mut()
        .zip(sigma_pre.data().iter())
    {
        *out = softplus(s).max(cfg.sigma_floor);
    }

    let d_z = params.output_dim();
    let mu = broadcast_rows(&mu_rows, tokens);
    let sigma = broadcast_rows(&sigma_rows, tokens);

    let eps = match noise {
        NoiseSource::Rng(rng) => {
            let mut e = Matrix::zeros(tokens, d_z);
            for x in e.data_mut().iter_mut() {
                *x = rng.standard_normal();
            }
            e
        }
        NoiseSource::Fixed(e) => {
            if e.rows() != tokens || e.cols() != d_z {
                return Err(Error::Dimension(format!(
                    "noise is {}x{} but sample needs {}x{}",
                    e.rows(),
                    e.cols(),
                    tokens,
                    d_z
                )));
            }
            e.clone()
        }
        NoiseSource::Zero => Matrix::zeros(tokens, d_z),
    };

    let mut z = Matrix::zeros(tokens, d_z);
    for i in 0..tokens * d_z {
        z.data_mut()[i] = mu.data()[i] + sigma.data()[i] * eps.data()[i];
    }

    let stats = GaussianStats::new(mu, sigma)?;
    let kl = kl_diag_gaussian(&stats, prior, cfg.direction)?;
    Ok(VibForwardCache {
        head_input,
        mu_cache,
        sigma_cache,
        sigma_pre,
        sample: ReparamSample { z, eps, stats },
        kl,
        cfg,
        tokens,
    })
}

/// Training-mode forward: sample `z` and report the compression term.
pub fn vib_forward_train(
    v: &Matrix,
    params: &VibProjectorParams,
    prior: &PriorSpec,
    cfg: VibConfig,
    rng: &mut SeededRng,
) -> Result<(ReparamSample, f64)> {
    let cache = vib_forward_cached(v, params, prior, cfg, NoiseSource::Rng(rng))?;
    Ok((cache.sample, cache.kl))
}

/// Training-mode forward with caller-controlled noise (test and FD hook).
pub fn vib_forward_train_with_eps(
    v: &Matrix,
    params: &VibProjectorParams,
    prior: &PriorSpec,
    cfg: VibConfig,
    eps: &Matrix,
) -> Result<(ReparamSample, f64)> {
    let cache = vib_forward_cached(v, params, prior, cfg, NoiseSource::Fixed(eps))?;
    Ok((cache.sample, cache.kl))
}

/// Eval-mode forward: the posterior mean, no sampling, no divergence.
pub fn vib_forward_eval(v: &Matrix, params: &VibProjectorParams) -> Result<Matrix> {
    if v.rows() == 0 {
        return Err(Error::InvalidArgument(
            "projector input must have at least one token".to_string(),
        ));
    }
    mlp_forward(v, &params.mu_head)
}

/// Reverse pass through both heads given upstream gradients for `z` and for
/// the divergence scalar. Noise is treated as a constant (pathwise estimator).
/// Returns head gradients and the gradient w.r.t. the input tokens.
pub fn projector_backward(
    params: &VibProjectorParams,
    prior: &PriorSpec,
    cache: &VibForwardCache,
    g_z: &Matrix,
    g_kl: f64,
) -> Result<(VibGradients, Matrix)> {
    let sample = &cache.sample;
    if g_z.rows() != sample.z.rows() || g_z.cols() != sample.z.cols() {
        return Err(Error::State(format!(
            "upstream z gradient is {}x{} but sample is {}x{}",
            g_z.rows(),
            g_z.cols(),
            sample.z.rows(),
            sample.z.cols()
        )));
    }

    let (kl_g_mu, kl_g_sigma) = kl_grad(&sample.stats, prior, cache.cfg.direction)?;
    let tokens = cache.tokens;
    let d_z = sample.z.cols();

    // Per-token gradients for mu and sigma: the z path plus the scaled KL path.
    let mut g_mu_tok = Matrix::zeros(tokens, d_z);
    let mut g_sigma_tok = Matrix::zeros(tokens, d_z);
    for i in 0..tokens * d_z {
        g_mu_tok.data_mut()[i] = g_z.data()[i] + g_kl * kl_g_mu.data()[i];
        g_sigma_tok.data_mut()[i] =
            g_z.data()[i] * sample.eps.data()[i] + g_kl * kl_g_sigma.data()[i];
    }

    // Collapse token gradients onto the rows the heads actually produced.
    let head_rows = cache.head_input.rows();
    let (g_mu_head, g_sigma_head) = if head_rows == tokens {
        (g_mu_tok, g_sigma_tok)
    } else {
        let mut gm = Matrix::zeros(1, d_z);
        let mut gs = Matrix::zeros(1, d_z);
        for j in 0..tokens {
            for i in 0..d_z {
                gm.data_mut()[i] += g_mu_tok.get(j, i);
                gs.data_mut()[i] += g_sigma_tok.get(j, i);
            }
        }
        (gm, gs)
    };

    // Through the softplus and its floor.
    let mut g_sigma_pre = Matrix::zeros(head_rows, d_z);
    for i in 0..head_rows * d_z {
        let s = cache.sigma_pre.data()[i];
        let slope = if softplus(s) > cache.cfg.sigma_floor {
            sigmoid(s)
        } else {
            0.0
        };
        g_sigma_pre.data_mut()[i] = g_sigma_head.data()[i] * slope;
    }

    let (mu_grads, g_v_mu) = mlp_backward(
        &params.mu_head,
        &cache.head_input,
        &cache.mu_cache,
        &g_mu_head,
    )?;
    let (sigma_grads, g_v_sigma) = mlp_backward(
        &params.sigma_head,
        &cache.head_input,
        &cache.sigma_cache,
        &g_sigma_pre,
    )?;

    let mut g_head_input = g_v_mu;
    g_head_input.add_assign(&g_v_sigma)?;

    // In pooled mode the head saw the mean row; spread its gradient back.
    let g_v = if head_rows == tokens {
        g_head_input
    } else {
        let mut out = Matrix::zeros(tokens, cache.head_input.cols());
        let inv_t = 1.0 / tokens as f64;
        for j in 0..tokens {
            for (o, &g) in out.row_mut(j).iter_mut().zip(g_head_input.row(0).iter()) {
                *o = g * inv_t;
            }
        }
        out
    };

    Ok((
        VibGradients {
            mu_head: mu_grads,
            sigma_head: sigma_grads,
        },
        g_v,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_params(rng: &mut SeededRng) -> VibProjectorParams {
        let mu = MlpProjectorParams::seeded(3, 4, 2, 0.8, rng);
        VibProjectorParams::from_pretrained(mu, 0.5, 0.2, rng)
    }

    #[test]
    fn mlp_zero_params_give_zero_output() {
        let params = MlpProjectorParams::new(
            Matrix::zeros(4, 3),
            vec![0.0; 4],
            Matrix::zeros(2, 4),
            vec![0.0; 2],
        )
        .unwrap();
        let mut rng = SeededRng::new(4);
        let v = Matrix::seeded_normal(3, 3, 1.0, &mut rng);
        let out = mlp_forward(&v, &params).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mlp_identity_case_reduces_to_gelu() {
        let params = MlpProjectorParams::new(
            Matrix::new(1, 1, vec![1.0]).unwrap(),
            vec![0.0],
            Matrix::new(1, 1, vec![1.0]).unwrap(),
            vec![0.0],
        )
        .unwrap();
        let v = Matrix::new(1, 1, vec![1.0]).unwrap();
        let out = mlp_forward(&v, &params).unwrap();
        assert!((out.get(0, 0) - 0.8411920).abs() < 1e-6);
        assert_eq!(out.get(0, 0), gelu(1.0));
    }

    #[test]
    fn mlp_batch_matches_per_token_calls() {
        let mut rng = SeededRng::new(9);
        let params = MlpProjectorParams::seeded(3, 5, 2, 1.0, &mut rng);
        let v = Matrix::seeded_normal(3, 3, 1.0, &mut rng);
        let batch = mlp_forward(&v, &params).unwrap();
        for j in 0..3 {
            let single = Matrix::new(1, 3, v.row(j).to_vec()).unwrap();
            let row = mlp_forward(&single, &params).unwrap();
            assert_eq!(batch.row(j), row.row(0));
        }
    }

    #[test]
    fn mlp_shape_mismatch_is_dimension_error() {
        let mut rng = SeededRng::new(2);
        let params = MlpProjectorParams::seeded(3, 4, 2, 1.0, &mut rng);
        let v = Matrix::zeros(2, 5);
        assert!(matches!(mlp_forward(&v, &params), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_noise_collapses_sample_onto_mean() {
        let mut rng = SeededRng::new(11);
        let params = tiny_params(&mut rng);
        let prior = PriorSpec::standard_normal(2);
        let v = Matrix::seeded_normal(2, 3, 1.0, &mut rng);
        let cache =
            vib_forward_cached(&v, &params, &prior, VibConfig::default(), NoiseSource::Zero)
                .unwrap();
        assert_eq!(cache.sample.z, cache.sample.stats.mu);
    }

    #[test]
    fn sigma_floor_keeps_sample_near_mean() {
        let mut rng = SeededRng::new(13);
        let mu = MlpProjectorParams::seeded(3, 4, 2, 0.8, &mut rng);
        // Drive the sigma head hard negative so the floor engages everywhere.
        let mut sigma = MlpProjectorParams::seeded(3, 4, 2, 0.0, &mut rng);
        for b in sigma.b_h.iter_mut() {
            *b = -60.0;
        }
        let params = VibProjectorParams::new(mu, sigma).unwrap();
        let prior = PriorSpec::standard_normal(2);
        let v = Matrix::seeded_normal(2, 3, 1.0, &mut rng);
        let mut noise_rng = SeededRng::new(1);
        let (sample, _) =
            vib_forward_train(&v, &params, &prior, VibConfig::default(), &mut noise_rng).unwrap();
        assert!(sample.stats.sigma.data().iter().all(|&s| s == 1e-8));
        for (z, m) in sample.z.data().iter().zip(sample.stats.mu.data().iter()) {
            assert!((z - m).abs() < 1e-6);
        }
    }

    #[test]
    fn sample_reconstructs_bit_exactly() {
        let mut rng = SeededRng::new(7);
        let params = tiny_params(&mut rng);
        let prior = PriorSpec::standard_normal(2);
        let v = Matrix::seeded_normal(1, 3, 1.0, &mut rng);
        let mut noise_rng = SeededRng::new(7);
        let (sample, _) =
            vib_forward_train(&v, &params, &prior, VibConfig::default(), &mut noise_rng).unwrap();
        for i in 0..sample.z.data().len() {
            let rebuilt =
                sample.stats.mu.data()[i] + sample.stats.sigma.data()[i] * sample.eps.data()[i];
            assert_eq!(sample.z.data()[i], rebuilt);
        }
    }

    #[test]
    fn eval_matches_train_mean_component() {
        let mut rng = SeededRng::new(21);
        let params = tiny_params(&mut rng);
        let prior = PriorSpec::standard_normal(2);
        let v = Matrix::seeded_normal(3, 3, 1.0, &mut rng);
        let eval = vib_forward_eval(&v, &params).unwrap();
        let mut noise_rng = SeededRng::new(3);
        let (sample, _) =
            vib_forward_train(&v, &params, &prior, VibConfig::default(), &mut noise_rng).unwrap();
        assert_eq!(eval, sample.stats.mu);
        let again = vib_forward_eval(&v, &params).unwrap();
        assert_eq!(eval, again);
    }

    #[test]
    fn kl_reference_values() {
        let prior = PriorSpec::standard_normal(2);
        let stats = GaussianStats::new(
            Matrix::new(1, 2, vec![1.0, 0.0]).unwrap(),
            Matrix::new(1, 2, vec![1.0, 1.0]).unwrap(),
        )
        .unwrap();
        let kl = kl_diag_gaussian(&stats, &prior, KlDirection::AsPrinted).unwrap();
        assert!((kl - 0.5).abs() < 1e-12);

        let root2 = 2.0_f64.sqrt();
        let stats = GaussianStats::new(
            Matrix::new(1, 2, vec![0.0, 0.0]).unwrap(),
            Matrix::new(1, 2, vec![root2, root2]).unwrap(),
        )
        .unwrap();
        let kl = kl_diag_gaussian(&stats, &prior, KlDirection::AsPrinted).unwrap();
        assert!((kl - 0.1931471805599453).abs() < 1e-12);
    }

    #[test]
    fn kl_zero_at_equal_parameters() {
        let mut rng = SeededRng::new(31);
        for _ in 0..50 {
            let mu: Vec<f64> = (0..3).map(|_| rng.standard_normal()).collect();
            let sigma: Vec<f64> = (0..3).map(|_| rng.next_f64() + 0.1).collect();
            let stats = GaussianStats::new(
                Matrix::new(1, 3, mu.clone()).unwrap(),
                Matrix::new(1, 3, sigma.clone()).unwrap(),
            )
            .unwrap();
            let prior = PriorSpec::new(mu, sigma).unwrap();
            for dir in [KlDirection::AsPrinted, KlDirection::PosteriorToPrior] {
                assert_eq!(kl_diag_gaussian(&stats, &prior, dir).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn kl_non_negative_on_random_pairs() {
        let mut rng = SeededRng::new(41);
        for _ in 0..10_000 {
            let d = 1 + rng.next_below(4);
            let mu: Vec<f64> = (0..d).map(|_| 2.0 * rng.standard_normal()).collect();
            let sigma: Vec<f64> = (0..d).map(|_| 0.05 + 3.0 * rng.next_f64()).collect();
            let mu_r: Vec<f64> = (0..d).map(|_| 2.0 * rng.standard_normal()).collect();
            let sigma_r: Vec<f64> = (0..d).map(|_| 0.05 + 3.0 * rng.next_f64()).collect();
            let stats = GaussianStats::new(
                Matrix::new(1, d, mu).unwrap(),
                Matrix::new(1, d, sigma).unwrap(),
            )
            .unwrap();
            let prior = PriorSpec::new(mu_r, sigma_r).unwrap();
            for dir in [KlDirection::AsPrinted, KlDirection::PosteriorToPrior] {
                let kl = kl_diag_gaussian(&stats, &prior, dir).unwrap();
                assert!(kl >= -1e-12, "kl={kl}");
            }
        }
    }

    #[test]
    fn kl_rejects_non_positive_sigma() {
        let mu = Matrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        let bad = Matrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(GaussianStats::new(mu, bad).is_err());
    }

    #[test]
    fn monte_carlo_mean_approaches_mu() {
        let mut rng = SeededRng::new(55);
        let params = tiny_params(&mut rng);
        let prior = PriorSpec::standard_normal(2);
        let v = Matrix::seeded_normal(1, 3, 1.0, &mut rng);
        let mut noise_rng = SeededRng::new(1234);
        let mut acc = vec![0.0; 2];
        let n = 100_000;
        let mut mu_seen = None;
        for _ in 0..n {
            let (sample, _) =
                vib_forward_train(&v, &params, &prior, VibConfig::default(), &mut noise_rng)
                    .unwrap();
            for (a, &z) in acc.iter_mut().zip(sample.z.row(0).iter()) {
                *a += z;
            }
            mu_seen = Some(sample.stats.mu.row(0).to_vec());
        }
        let mu = mu_seen.unwrap();
        for (a, m) in acc.iter().zip(mu.iter()) {
            assert!((a / n as f64 - m).abs() < 0.02);
        }
    }

    #[test]
    fn backward_zero_upstream_gives_zero_gradients() {
        let mut rng = SeededRng::new(61);
        let params = tiny_params(&mut rng);
        let prior = PriorSpec::standard_normal(2);
        let v = Matrix::seeded_normal(2, 3, 1.0, &mut rng);
        let mut noise_rng = SeededRng::new(2);
        let cache = vib_forward_cached(
            &v,
            &params,
            &prior,
            VibConfig::default(),
            NoiseSource::Rng(&mut noise_rng),
        )
        .unwrap();
        let g_z = Matrix::zeros(2, 2);
        let (grads, g_v) = projector_backward(&params, &prior, &cache, &g_z, 0.0).unwrap();
        assert_eq!(grads.squared_norm(), 0.0);
        assert!(g_v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn kl_mu_gradient_vanishes_at_prior() {
        let prior = PriorSpec::standard_normal(3);
        let stats = GaussianStats::new(
            Matrix::zeros(2, 3),
            Matrix::new(2, 3, vec![1.0; 6]).unwrap(),
        )
        .unwrap();
        let (g_mu, _) = kl_grad(&stats, &prior, KlDirection::AsPrinted).unwrap();
        assert!(g_mu.data().iter().all(|&g| g == 0.0));
    }

    /// Finite-difference harness over the projector in isolation:
    /// loss = sum(g_z (*) z) + g_kl * kl with fixed noise.
    fn fd_check(cfg: VibConfig, seed: u64) {
        let mut rng = SeededRng::new(seed);
        let mut params = tiny_params(&mut rng);
        let prior = PriorSpec::standard_normal(2);
        let v = Matrix::seeded_normal(2, 3, 1.0, &mut rng);
        let eps = Matrix::seeded_normal(2, 2, 1.0, &mut rng);
        let g_z = Matrix::seeded_normal(2, 2, 1.0, &mut rng);
        let g_kl = 0.7;

        let loss = |p: &VibProjectorParams| -> f64 {
            let cache = vib_forward_cached(&v, p, &prior, cfg, NoiseSource::Fixed(&eps)).unwrap();
            let dot: f64 = g_z
                .data()
                .iter()
                .zip(cache.sample.z.data().iter())
                .map(|(a, b)| a * b)
                .sum();
            dot + g_kl * cache.kl
        };

        let cache = vib_forward_cached(&v, &params, &prior, cfg, NoiseSource::Fixed(&eps)).unwrap();
        let (grads, _) = projector_backward(&params, &prior, &cache, &g_z, g_kl).unwrap();

        let h = 1e-6;
        let analytic: Vec<f64> = grads
            .views()
            .iter()
            .flat_map(|(_, view)| view.iter().copied().collect::<Vec<_>>())
            .collect();
        let mut idx = 0;
        for head in 0..2 {
            let n_views = 4;
            for view_idx in 0..n_views {
                let len = {
                    let p = if head == 0 {
                        &mut params.mu_head
                    } else {
                        &mut params.sigma_head
                    };
                    p.views_mut()[view_idx].1.len()
                };
                for k in 0..len {
                    let base = {
                        let p = if head == 0 {
                            &mut params.mu_head
                        } else {
                            &mut params.sigma_head
                        };
                        p.views_mut()[view_idx].1[k]
                    };
                    let set = |params: &mut VibProjectorParams, value: f64| {
                        let p = if head == 0 {
                            &mut params.mu_head
                        } else {
                            &mut params.sigma_head
                        };
                        p.views_mut()[view_idx].1[k] = value;
                    };
                    set(&mut params, base + h);
                    let up = loss(&params);
                    set(&mut params, base - h);
                    let down = loss(&params);
                    set(&mut params, base);
                    let fd = (up - down) / (2.0 * h);
                    let a = analytic[idx];
                    assert!(
                        (a - fd).abs() <= 1e-7 + 1e-5 * fd.abs(),
                        "param {idx}: analytic={a} fd={fd} (cfg {cfg:?})"
                    );
                    idx += 1;
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_per_token() {
        fd_check(VibConfig::default(), 71);
        fd_check(
            VibConfig {
                direction: KlDirection::PosteriorToPrior,
                ..VibConfig::default()
            },
            72,
        );
    }

    #[test]
    fn backward_matches_finite_differences_pooled() {
        fd_check(
            VibConfig {
                pooled_posterior: true,
                ..VibConfig::default()
            },
            73,
        );
    }
}

//! Similarity between pooled soft tokens and a frozen embedding table, the
//! entropy of that distribution, and the entropy-driven schedule for the
//! compression weight. The schedule is recomputed from the fixed base every
//! step and never participates in gradients.

use crate::error::{Error, Result};
use crate::numerics::{softmax, Matrix, SeededRng};

/// Floor applied to the normalized entropy before taking its log.
/// Caps the effective weight at `base * ln(1e6)`.
pub const NORMALIZED_ENTROPY_FLOOR: f64 = 1e-6;

/// Frozen word-embedding table. Never receives gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEmbeddings {
    table: Matrix,
}

impl FrozenEmbeddings {
    pub fn new(table: Matrix) -> Result<Self> {
        if table.rows() < 2 {
            return Err(Error::InvalidArgument(
                "embedding table needs at least two rows".to_string(),
            ));
        }
        Ok(FrozenEmbeddings { table })
    }

    pub fn seeded(vocab_size: usize, dim: usize, scale: f64, rng: &mut SeededRng) -> Result<Self> {
        FrozenEmbeddings::new(Matrix::seeded_normal(vocab_size, dim, scale, rng))
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn row(&self, token: usize) -> &[f64] {
        self.table.row(token)
    }

    pub fn table(&self) -> &Matrix {
        &self.table
    }
}

/// Softmax over vocabulary similarities plus its entropy summaries.
#[derive(Clone, Debug)]
pub struct SimilarityStats {
    pub probs: Vec<f64>,
    /// Shannon entropy in nats.
    pub entropy: f64,
    /// Entropy divided by `ln |V|`, clamped to `[1e-6, 1]`.
    pub normalized_entropy: f64,
}

/// State of the adaptive compression weight.
#[derive(Clone, Debug)]
pub struct BetaState {
    pub base_beta: f64,
    pub effective_beta: f64,
    pub history: Vec<BetaRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaRecord {
    pub step: u64,
    pub entropy: f64,
    pub effective_beta: f64,
}

impl BetaState {
    pub fn new(base_beta: f64) -> Result<Self> {
        if base_beta < 0.0 {
            return Err(Error::InvalidArgument(
                "base beta must be non-negative".to_string(),
            ));
        }
        Ok(BetaState {
            base_beta,
            effective_beta: 0.0,
            history: Vec::new(),
        })
    }
}

/// Arithmetic mean over token rows.
pub fn pool_tokens(z: &Matrix) -> Result<Vec<f64>> {
    if z.rows() == 0 {
        return Err(Error::InvalidArgument(
            "cannot pool zero tokens".to_string(),
        ));
    }
    let mut out = vec![0.0; z.cols()];
    for j in 0..z.rows() {
        for (o, &x) in out.iter_mut().zip(z.row(j).iter()) {
            *o += x;
        }
    }
    let inv = 1.0 / z.rows() as f64;
    for o in out.iter_mut() {
        *o *= inv;
    }
    Ok(out)
}

/// Softmax of the dot products between a pooled token and every embedding
/// row, with entropy taken under the convention `0 * ln 0 = 0`.
pub fn similarity_distribution(z_bar: &[f64], emb: &FrozenEmbeddings) -> Result<SimilarityStats> {
    if z_bar.len() != emb.dim() {
        return Err(Error::Dimension(format!(
            "pooled token has dim {}, embeddings have dim {}",
            z_bar.len(),
            emb.dim()
        )));
    }
    let logits = emb.table().matvec(z_bar)?;
    let probs = softmax(&logits)?;
    let mut entropy = 0.0;
    for &p in &probs {
        if p > 0.0 {
            entropy -= p * p.ln();
        }
    }
    let max_entropy = (emb.vocab_size() as f64).ln();
    // Snap the uniform case to exactly 1 so the schedule vanishes there
    // instead of leaving a few-ulp residue.
    let ratio = entropy / max_entropy;
    let normalized_entropy = if ratio >= 1.0 - 1e-12 {
        1.0
    } else {
        ratio.max(NORMALIZED_ENTROPY_FLOOR)
    };
    Ok(SimilarityStats {
        probs,
        entropy,
        normalized_entropy,
    })
}

/// One schedule update: `effective = -base * ln(normalized_entropy)`, always
/// recomputed from the fixed base. Appends to the history; creates no
/// gradient bookkeeping of any kind.
pub fn adapt_beta(state: &mut BetaState, stats: &SimilarityStats, step: u64) -> f64 {
    let effective = effective_beta(state.base_beta, stats.normalized_entropy);
    state.effective_beta = effective;
    state.history.push(BetaRecord {
        step,
        entropy: stats.entropy,
        effective_beta: effective,
    });
    effective
}

/// The schedule itself, usable without threading a [`BetaState`].
pub fn effective_beta(base_beta: f64, normalized_entropy: f64) -> f64 {
    let clamped = normalized_entropy.clamp(NORMALIZED_ENTROPY_FLOOR, 1.0);
    -base_beta * clamped.ln()
}

/// Index of the fixed 10-bin `[0, 1)` grid holding the max probability;
/// a max of exactly 1.0 lands in the top bucket.
pub fn max_similarity_bucket(probs: &[f64]) -> usize {
    let max = probs.iter().cloned().fold(0.0_f64, f64::max);
    ((max * 10.0).floor() as usize).min(9)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_single_token_is_identity() {
        let z = Matrix::new(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        assert_eq!(pool_tokens(&z).unwrap(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn pool_is_arithmetic_mean_and_permutation_invariant() {
        let a = Matrix::new(2, 2, vec![1.0, 3.0, 3.0, 1.0]).unwrap();
        let b = Matrix::new(2, 2, vec![3.0, 1.0, 1.0, 3.0]).unwrap();
        assert_eq!(pool_tokens(&a).unwrap(), vec![2.0, 2.0]);
        assert_eq!(pool_tokens(&a).unwrap(), pool_tokens(&b).unwrap());
    }

    #[test]
    fn pool_zero_tokens_is_error() {
        let z = Matrix::zeros(0, 3);
        assert!(matches!(pool_tokens(&z), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn zero_pooled_token_gives_uniform_similarity() {
        let mut rng = SeededRng::new(5);
        let emb = FrozenEmbeddings::seeded(6, 3, 1.0, &mut rng).unwrap();
        let stats = similarity_distribution(&[0.0, 0.0, 0.0], &emb).unwrap();
        for &p in &stats.probs {
            assert!((p - 1.0 / 6.0).abs() < 1e-12);
        }
        assert!((stats.entropy - 6.0_f64.ln()).abs() < 1e-12);
        assert_eq!(stats.normalized_entropy, 1.0);
    }

    #[test]
    fn similarity_reference_values() {
        // Identity-like table so the logits are exactly [1, 2, 3, 4].
        let table = Matrix::new(
            4,
            4,
            vec![
                1.0, 0.0, 0.0, 0.0, //
                2.0, 0.0, 0.0, 0.0, //
                3.0, 0.0, 0.0, 0.0, //
                4.0, 0.0, 0.0, 0.0,
            ],
        )
        .unwrap();
        let emb = FrozenEmbeddings::new(table).unwrap();
        let stats = similarity_distribution(&[1.0, 0.0, 0.0, 0.0], &emb).unwrap();
        let expected = [0.0320586, 0.0871443, 0.2368828, 0.6439143];
        for (p, e) in stats.probs.iter().zip(expected.iter()) {
            assert!((p - e).abs() < 1e-7);
        }
        assert!((stats.entropy - 0.9475).abs() < 1e-4);
    }

    #[test]
    fn near_one_hot_hits_entropy_floor() {
        let table = Matrix::new(4, 1, vec![100.0, 0.0, 0.0, 0.0]).unwrap();
        let emb = FrozenEmbeddings::new(table).unwrap();
        let stats = similarity_distribution(&[1.0], &emb).unwrap();
        assert_eq!(stats.normalized_entropy, NORMALIZED_ENTROPY_FLOOR);
    }

    #[test]
    fn similarity_dimension_mismatch_is_error() {
        let mut rng = SeededRng::new(8);
        let emb = FrozenEmbeddings::seeded(4, 3, 1.0, &mut rng).unwrap();
        assert!(matches!(
            similarity_distribution(&[1.0, 2.0], &emb),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn entropy_maximal_iff_uniform() {
        let mut rng = SeededRng::new(3);
        let emb = FrozenEmbeddings::seeded(8, 4, 1.0, &mut rng).unwrap();
        let uniform = similarity_distribution(&[0.0; 4], &emb).unwrap();
        assert!((uniform.entropy - 8.0_f64.ln()).abs() < 1e-9);
        let skewed = similarity_distribution(&[1.5, -0.3, 0.8, 2.0], &emb).unwrap();
        assert!(skewed.entropy < 8.0_f64.ln() - 1e-9);
    }

    #[test]
    fn schedule_reference_points() {
        assert_eq!(effective_beta(1e-7, 1.0), 0.0);
        assert!((effective_beta(1e-7, (-1.0_f64).exp()) - 1e-7).abs() < 1e-20);
        assert!((effective_beta(1e-7, 0.5) - 6.931471805599453e-8).abs() < 1e-20);
    }

    #[test]
    fn schedule_is_monotone_in_entropy() {
        let mut prev = f64::INFINITY;
        for i in 1..=100 {
            let h = i as f64 / 100.0;
            let beta = effective_beta(1e-7, h);
            assert!(beta >= 0.0);
            assert!(beta < prev, "not strictly decreasing at h={h}");
            prev = beta;
        }
        assert_eq!(effective_beta(1e-7, 1.0), 0.0);
    }

    #[test]
    fn adapt_beta_appends_history() {
        let mut state = BetaState::new(1e-7).unwrap();
        let stats = SimilarityStats {
            probs: vec![0.5, 0.5],
            entropy: 2.0_f64.ln(),
            normalized_entropy: 1.0,
        };
        let eff = adapt_beta(&mut state, &stats, 3);
        assert_eq!(eff, 0.0);
        assert_eq!(state.history.len(), 1);
        assert_eq!(state.history[0].step, 3);
    }

    #[test]
    fn bucket_assignment() {
        assert_eq!(max_similarity_bucket(&[0.25; 4]), 2);
        assert_eq!(max_similarity_bucket(&[0.0, 1.0, 0.0]), 9);
        assert_eq!(max_similarity_bucket(&[0.55, 0.45]), 5);
    }

    #[test]
    fn similarity_is_shift_invariant() {
        // Adding a constant to every logit must not change the distribution;
        // realize the shift through an extra embedding column driven by z_bar.
        let mut rng = SeededRng::new(44);
        let base = Matrix::seeded_normal(5, 2, 1.0, &mut rng);
        let mut shifted_data = Vec::new();
        for r in 0..5 {
            shifted_data.extend_from_slice(base.row(r));
            shifted_data.push(3.0); // constant extra coordinate
        }
        let shifted = Matrix::new(5, 3, shifted_data).unwrap();
        let emb_base = FrozenEmbeddings::new(base).unwrap();
        let emb_shift = FrozenEmbeddings::new(shifted).unwrap();
        let a = similarity_distribution(&[0.7, -0.2], &emb_base).unwrap();
        let b = similarity_distribution(&[0.7, -0.2, 1.0], &emb_shift).unwrap();
        for (pa, pb) in a.probs.iter().zip(b.probs.iter()) {
            assert!((pa - pb).abs() < 1e-12);
        }
    }
}

//! Soft-threshold rejection ABC.
//!
//! Each particle draws `theta_j` from the prior, simulates a dataset and is
//! weighted by `exp(-|s(y_j) - s(y*)|^2 / eps)`; weights are normalized to sum
//! to one. Particle `j` always uses the seeds derived from `(seed, j)`, so the
//! output does not depend on evaluation order or thread count.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::distreg::RegressionModel;
use crate::embeddings::SplitBag;
use crate::seed::{self, streams, Rng};
use crate::{Error, Result};

/// Prior and simulator of a generative model.
pub trait GenerativeModel: Sync {
    fn param_dim(&self) -> usize;

    fn sample_prior(&self, rng: &mut Rng) -> Vec<f64>;

    /// Simulate one whole dataset, split into `(z, x)` parts.
    fn simulate(&self, theta: &[f64], seed: u64) -> Result<SplitBag>;
}

/// A map from a dataset to a summary vector. Distances between summaries are
/// squared Euclidean.
pub trait SummaryStatistic: Sync {
    fn summarize(&self, data: &SplitBag) -> Result<DVector<f64>>;
}

impl SummaryStatistic for RegressionModel {
    fn summarize(&self, data: &SplitBag) -> Result<DVector<f64>> {
        RegressionModel::summarize(self, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbcConfig {
    pub num_particles: usize,
    pub epsilon: f64,
    pub seed: u64,
}

impl AbcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_particles == 0 {
            return Err(Error::invalid("num_particles", "must be at least 1"));
        }
        check_epsilon(self.epsilon)
    }
}

fn check_epsilon(eps: f64) -> Result<()> {
    if eps.is_finite() && eps > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid("epsilon", format!("must be positive, got {eps}")))
    }
}

/// Weighted particles; weights are non-negative and sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPosterior {
    thetas: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl WeightedPosterior {
    pub fn new(thetas: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if thetas.is_empty() {
            return Err(Error::Empty("posterior"));
        }
        if thetas.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: thetas.len(),
                got: weights.len(),
            });
        }
        let d = thetas[0].len();
        if let Some(t) = thetas.iter().find(|t| t.len() != d) {
            return Err(Error::DimensionMismatch { expected: d, got: t.len() });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("weights", "must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("weights", format!("sum to {total}, not 1")));
        }
        Ok(Self { thetas, weights })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn thetas(&self) -> &[Vec<f64>] {
        &self.thetas
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.thetas.iter().map(Vec::as_slice).zip(self.weights.iter().copied())
    }

    /// Kish effective sample size `1 / sum w^2`.
    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

/// Normalized `exp(-d_j / eps)` weights from squared distances.
///
/// Errors when every unnormalized weight underflows to zero.
pub fn soft_weights(sq_distances: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    check_epsilon(epsilon)?;
    if sq_distances.is_empty() {
        return Err(Error::Empty("distance set"));
    }
    let raw: Vec<f64> = sq_distances.iter().map(|d| (-d / epsilon).exp()).collect();
    let total: f64 = raw.iter().sum();
    if total == 0.0 {
        return Err(Error::WeightUnderflow { epsilon });
    }
    let mut w: Vec<f64> = raw.iter().map(|r| r / total).collect();
    // Re-normalize once more so the sum is 1 to within one rounding step.
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    Ok(w)
}

/// One prior draw and the dataset simulated from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub theta: Vec<f64>,
    pub data: SplitBag,
}

/// Draw `count` particles. Particle `j` uses prior seed
/// `derive(seed, PRIOR, j)` and simulator seed `derive(seed, SIM, j)`.
pub fn simulate_particles<G: GenerativeModel + ?Sized>(
    model: &G,
    count: usize,
    seed: u64,
) -> Result<Vec<Particle>> {
    simulate_labeled(model, count, seed, streams::PARTICLE_PRIOR, streams::PARTICLE_SIM)
}

pub(crate) fn simulate_labeled<G: GenerativeModel + ?Sized>(
    model: &G,
    count: usize,
    seed: u64,
    prior_stream: u64,
    sim_stream: u64,
) -> Result<Vec<Particle>> {
    (0..count)
        .into_par_iter()
        .map(|j| {
            let mut rng = seed::rng(seed::derive(seed, prior_stream, j as u64));
            let theta = model.sample_prior(&mut rng);
            let data = model.simulate(&theta, seed::derive(seed, sim_stream, j as u64))?;
            Ok(Particle { theta, data })
        })
        .collect()
}

pub fn summarize_all<S: SummaryStatistic + ?Sized>(
    summary: &S,
    particles: &[Particle],
) -> Result<Vec<DVector<f64>>> {
    particles.par_iter().map(|p| summary.summarize(&p.data)).collect()
}

/// Weighted posterior from precomputed particle summaries.
pub fn weigh(
    thetas: &[Vec<f64>],
    summaries: &[DVector<f64>],
    observed: &DVector<f64>,
    epsilon: f64,
) -> Result<WeightedPosterior> {
    if thetas.len() != summaries.len() {
        return Err(Error::DimensionMismatch {
            expected: thetas.len(),
            got: summaries.len(),
        });
    }
    let d2 = summaries
        .iter()
        .map(|s| {
            if s.len() != observed.len() {
                return Err(Error::DimensionMismatch {
                    expected: observed.len(),
                    got: s.len(),
                });
            }
            Ok((s - observed).norm_squared())
        })
        .collect::<Result<Vec<_>>>()?;
    WeightedPosterior::new(thetas.to_vec(), soft_weights(&d2, epsilon)?)
}

/// Full soft-threshold ABC run with an arbitrary summary statistic.
pub fn run_abc_with<G, S>(model: &G, observed: &SplitBag, summary: &S, cfg: &AbcConfig) -> Result<WeightedPosterior>
where
    G: GenerativeModel + ?Sized,
    S: SummaryStatistic + ?Sized,
{
    cfg.validate()?;
    if observed.is_empty() {
        return Err(Error::Empty("observed data"));
    }
    let s_obs = summary.summarize(observed)?;
    let particles = simulate_particles(model, cfg.num_particles, cfg.seed)?;
    let summaries = summarize_all(summary, &particles)?;
    let thetas: Vec<_> = particles.into_iter().map(|p| p.theta).collect();
    weigh(&thetas, &summaries, &s_obs, cfg.epsilon)
}

/// ABC with a fitted distribution-regression summary statistic.
pub fn run_abc<G: GenerativeModel + ?Sized>(
    model: &G,
    observed: &SplitBag,
    regression: &RegressionModel,
    cfg: &AbcConfig,
) -> Result<WeightedPosterior> {
    run_abc_with(model, observed, regression, cfg)
}

pub fn posterior_mean(post: &WeightedPosterior) -> Vec<f64> {
    let d = post.thetas[0].len();
    let mut mean = vec![0.0; d];
    for (theta, w) in post.iter() {
        for (m, t) in mean.iter_mut().zip(theta) {
            *m += w * t;
        }
    }
    mean
}

/// Mean over runs of `|estimate - truth|^2`.
pub fn mse(estimates: &[Vec<f64>], truth: &[f64]) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::Empty("estimates"));
    }
    let mut total = 0.0;
    for e in estimates {
        if e.len() != truth.len() {
            return Err(Error::DimensionMismatch {
                expected: truth.len(),
                got: e.len(),
            });
        }
        total += e.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / estimates.len() as f64)
}

/// Pick the soft threshold by leave-one-out pilot runs over the particles.
///
/// Each of the first `pilots` particles plays the observed dataset in turn;
/// the remaining particles are weighted against it and the squared error of
/// the posterior mean against the pilot's own parameter is recorded. The
/// threshold with the smallest mean error wins, ties going to the larger
/// threshold. Thresholds that underflow on any pilot are skipped.
pub fn select_epsilon(
    thetas: &[Vec<f64>],
    summaries: &[DVector<f64>],
    grid: &[f64],
    pilots: usize,
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::Empty("epsilon grid"));
    }
    let m = thetas.len();
    if m < 2 || summaries.len() != m {
        return Err(Error::Degenerate("epsilon selection needs at least 2 particles".into()));
    }
    let pilots = pilots.clamp(1, m);
    let d = thetas[0].len();
    let mut best: Option<(f64, f64)> = None;
    let dists: Vec<Vec<f64>> = (0..pilots)
        .map(|i| {
            (0..m)
                .map(|j| {
                    if i == j {
                        f64::INFINITY
                    } else {
                        (&summaries[j] - &summaries[i]).norm_squared()
                    }
                })
                .collect()
        })
        .collect();
    'eps: for &eps in grid {
        check_epsilon(eps)?;
        let mut err = 0.0;
        for (i, row) in dists.iter().enumerate() {
            let Ok(w) = soft_weights(row, eps) else {
                continue 'eps;
            };
            let mut mean = vec![0.0; d];
            for (theta, wj) in thetas.iter().zip(&w) {
                for (a, t) in mean.iter_mut().zip(theta) {
                    *a += wj * t;
                }
            }
            err += mean.iter().zip(&thetas[i]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        let err = err / pilots as f64;
        let better = match best {
            None => true,
            Some((be, beps)) => err < be || (err == be && eps > beps),
        };
        if better {
            best = Some((err, eps));
        }
    }
    best.map(|(_, eps)| eps)
        .ok_or_else(|| Error::WeightUnderflow { epsilon: grid.iter().copied().fold(0.0, f64::max) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::SampleBag;
    use proptest::prelude::*;
    use rand::Rng as _;
    use crate::seed::Rng;

    struct Shift;

    impl GenerativeModel for Shift {
        fn param_dim(&self) -> usize {
            1
        }
        fn sample_prior(&self, rng: &mut Rng) -> Vec<f64> {
            vec![rng.random_range(-3.0..3.0)]
        }
        fn simulate(&self, theta: &[f64], seed: u64) -> Result<SplitBag> {
            let mut rng = seed::rng(seed);
            let x: Vec<f64> = (0..10).map(|_| theta[0] + rng.random_range(-0.5..0.5)).collect();
            let z = vec![0.0; 10];
            SplitBag::new(SampleBag::from_scalars(&z)?, SampleBag::from_scalars(&x)?)
        }
    }

    struct MeanX;

    impl SummaryStatistic for MeanX {
        fn summarize(&self, data: &SplitBag) -> Result<DVector<f64>> {
            let x = data.x().flat();
            Ok(DVector::from_element(1, x.iter().sum::<f64>() / x.len() as f64))
        }
    }

    #[test]
    fn flat_kernel_gives_uniform_weights() {
        let obs = Shift.simulate(&[1.0], 0).unwrap();
        let cfg = AbcConfig { num_particles: 200, epsilon: 1e12, seed: 4 };
        let post = run_abc_with(&Shift, &obs, &MeanX, &cfg).unwrap();
        let dev = post.weights().iter().map(|w| (w - 1.0 / 200.0).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-6);
        assert!((post.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn exact_match_dominates_as_epsilon_shrinks() {
        let d = [0.0, 1.0, 2.0, 4.0];
        let mut last = 0.0;
        for eps in [1.0, 0.1, 0.01, 0.001] {
            let w = soft_weights(&d, eps).unwrap();
            assert!(w[0] > last || (last == 1.0 && w[0] == 1.0));
            last = w[0];
        }
        assert!(last > 1.0 - 1e-12);
    }

    #[test]
    fn underflow_is_reported() {
        let err = soft_weights(&[1e6, 2e6], 1e-3).unwrap_err();
        assert!(matches!(err, Error::WeightUnderflow { .. }));
        assert!(err.to_string().contains("increase epsilon"));
        assert!(soft_weights(&[1.0], 0.0).is_err());
    }

    #[test]
    fn run_is_deterministic_and_concentrates() {
        let obs = Shift.simulate(&[1.0], 0).unwrap();
        let cfg = AbcConfig { num_particles: 500, epsilon: 0.01, seed: 8 };
        let a = run_abc_with(&Shift, &obs, &MeanX, &cfg).unwrap();
        let b = run_abc_with(&Shift, &obs, &MeanX, &cfg).unwrap();
        assert_eq!(a, b);
        let mean = posterior_mean(&a)[0];
        assert!((mean - 1.0).abs() < 0.2, "mean {mean}");
        assert!(run_abc_with(&Shift, &obs, &MeanX, &AbcConfig { num_particles: 0, ..cfg }).is_err());
    }

    #[test]
    fn particles_do_not_depend_on_batch_size() {
        let a = simulate_particles(&Shift, 10, 3).unwrap();
        let b = simulate_particles(&Shift, 20, 3).unwrap();
        assert_eq!(a[..], b[..10]);
    }

    #[test]
    fn posterior_mean_examples() {
        let post = WeightedPosterior::new(vec![vec![1.0, 0.0], vec![3.0, 2.0]], vec![0.5, 0.5]).unwrap();
        assert_eq!(posterior_mean(&post), vec![2.0, 1.0]);
        let single = WeightedPosterior::new(vec![vec![7.0]], vec![1.0]).unwrap();
        assert_eq!(posterior_mean(&single), vec![7.0]);
        assert!(WeightedPosterior::new(vec![vec![1.0]], vec![0.5]).is_err());
        assert!(WeightedPosterior::new(vec![vec![1.0], vec![1.0, 2.0]], vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[vec![2.0], vec![2.0]], &[2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[vec![3.0]], &[2.0]).unwrap(), 1.0);
        let est = vec![vec![1.0, 2.0], vec![0.0, -1.0], vec![4.0, 4.0]];
        let truth = [1.0f64, 1.0];
        let mut oracle = 0.0f64;
        for e in &est {
            oracle += (e[0] - truth[0]).powi(2);
            oracle += (e[1] - truth[1]).powi(2);
        }
        assert!((mse(&est, &truth).unwrap() - oracle / 3.0).abs() < 1e-15);
        assert!(mse(&[], &truth).is_err());
    }

    #[test]
    fn epsilon_selection_prefers_informative_threshold() {
        let particles = simulate_particles(&Shift, 400, 1).unwrap();
        let summaries = summarize_all(&MeanX, &particles).unwrap();
        let thetas: Vec<_> = particles.into_iter().map(|p| p.theta).collect();
        let grid = [1e-3, 1e-2, 1e-1, 1.0, 10.0, 1e3];
        let eps = select_epsilon(&thetas, &summaries, &grid, 50).unwrap();
        assert!(eps <= 0.1, "eps {eps}");
        let only_huge = select_epsilon(&thetas, &summaries, &[1e6], 50).unwrap();
        assert_eq!(only_huge, 1e6);
    }

    proptest! {
        #[test]
        fn weights_normalized_and_scale_invariant(d in prop::collection::vec(0.0f64..10.0, 1..40),
                                                  eps in 0.1f64..10.0, shift in 0.0f64..5.0) {
            let w = soft_weights(&d, eps).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            // Adding a constant to every distance rescales all raw weights.
            let shifted: Vec<f64> = d.iter().map(|v| v + shift).collect();
            let w2 = soft_weights(&shifted, eps).unwrap();
            for (a, b) in w.iter().zip(&w2) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn max_weight_falls_with_epsilon(d in prop::collection::vec(0.0f64..10.0, 2..20), eps in 0.1f64..5.0) {
            prop_assume!(d.iter().any(|v| (v - d[0]).abs() > 1e-6));
            let max = |e: f64| soft_weights(&d, e).unwrap().into_iter().fold(0.0, f64::max);
            prop_assert!(max(eps * 1.5) < max(eps));
        }

        #[test]
        fn posterior_mean_translation_equivariant(ts in prop::collection::vec(-10.0f64..10.0, 1..20),
                                                  c in -5.0f64..5.0) {
            let w = soft_weights(&vec![0.0; ts.len()], 1.0).unwrap();
            let a = WeightedPosterior::new(ts.iter().map(|t| vec![*t]).collect(), w.clone()).unwrap();
            let b = WeightedPosterior::new(ts.iter().map(|t| vec![t + c]).collect(), w).unwrap();
            let diff = posterior_mean(&b)[0] - posterior_mean(&a)[0];
            prop_assert!((diff - c).abs() < 1e-9);
        }
    }
}

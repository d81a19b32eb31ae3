//! Two-stage distribution regression: bags are embedded (mean embedding or
//! conditional operator), then kernel ridge regression maps the embeddings
//! onto parameter vectors. The fitted predictor is the learned summary
//! statistic `s(y)`.
//!
//! Predictions follow `theta_hat = Theta (K + L lambda I)^-1 k`, with one dual
//! solve shared by all output dimensions.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::embeddings::{
    conditional_operator, mean_embedding, operator_kernel, Bag, EmbeddingVector, OperatorFeatures,
    SampleBag, SplitBag,
};
use crate::kernels::{build_rff, median_heuristic, median_heuristic_subsampled, KernelSpec, RffMap, RffSpec};
use crate::seed::{self, streams};
use crate::{Error, Result};

/// Parameters paired with the bag simulated from them.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBag<B> {
    pub theta: Vec<f64>,
    pub bag: B,
}

impl<B> LabeledBag<B> {
    pub fn new(theta: Vec<f64>, bag: B) -> Self {
        Self { theta, bag }
    }
}

/// Training set of split bags with each bag replaced by its joined form.
pub fn joined(train: &[LabeledBag<SplitBag>]) -> Vec<LabeledBag<SampleBag>> {
    train
        .iter()
        .map(|lb| LabeledBag::new(lb.theta.clone(), lb.bag.joined()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    Conditional,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Conditional => "conditional",
        }
    }
}

/// Absolute (not factor-scaled) hyperparameters of a fitted model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum Hyperparameters {
    Full {
        bandwidth: f64,
        outer_bandwidth: f64,
        lambda: f64,
    },
    Conditional {
        bandwidth_z: f64,
        bandwidth_x: f64,
        lambda1: f64,
        lambda2: f64,
    },
}

impl Hyperparameters {
    pub fn variant(&self) -> Variant {
        match self {
            Hyperparameters::Full { .. } => Variant::Full,
            Hyperparameters::Conditional { .. } => Variant::Conditional,
        }
    }
}

#[derive(Debug, Clone)]
enum FeatureMaps {
    Full { map: RffMap },
    Conditional { map_z: RffMap, map_x: RffMap },
}

/// A fitted distribution-regression predictor.
#[derive(Debug, Clone)]
pub struct RegressionModel {
    maps: FeatureMaps,
    hyper: Hyperparameters,
    outer: KernelSpec,
    /// One column per training bag: a mean embedding, or a column-major
    /// flattened operator.
    features: DMatrix<f64>,
    /// `D x L`, equal to `Theta (K + L lambda I)^-1`.
    dual: DMatrix<f64>,
}

impl RegressionModel {
    pub fn variant(&self) -> Variant {
        self.hyper.variant()
    }

    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.hyper
    }

    pub fn outer_kernel(&self) -> &KernelSpec {
        &self.outer
    }

    pub fn dual_matrix(&self) -> &DMatrix<f64> {
        &self.dual
    }

    pub fn theta_dim(&self) -> usize {
        self.dual.nrows()
    }

    pub fn num_training(&self) -> usize {
        self.dual.ncols()
    }

    /// Cross-kernel vector between the training set and one featurized bag.
    fn cross_kernel(&self, v: &DVector<f64>) -> DVector<f64> {
        match self.hyper {
            Hyperparameters::Full { outer_bandwidth, .. } => {
                let denom = 2.0 * outer_bandwidth * outer_bandwidth;
                DVector::from_iterator(
                    self.features.ncols(),
                    self.features.column_iter().map(|col| {
                        let d2: f64 = col.iter().zip(v.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                        (-d2 / denom).exp()
                    }),
                )
            }
            Hyperparameters::Conditional { .. } => self.features.tr_mul(v),
        }
    }

    fn featurize(&self, bag: &Bag) -> Result<DVector<f64>> {
        match (&self.maps, bag) {
            (FeatureMaps::Full { map }, Bag::Sample(b)) => Ok(mean_embedding(b, map)?.values),
            (FeatureMaps::Conditional { map_z, map_x }, Bag::Split(b)) => {
                let lambda1 = match self.hyper {
                    Hyperparameters::Conditional { lambda1, .. } => lambda1,
                    Hyperparameters::Full { .. } => unreachable!("maps and hyperparameters agree"),
                };
                let c = conditional_operator(b, map_z, map_x, lambda1)?;
                Ok(DVector::from_column_slice(c.matrix.as_slice()))
            }
            _ => Err(Error::VariantMismatch {
                model: self.variant().name(),
                input: bag.kind(),
            }),
        }
    }

    pub fn predict(&self, bag: &Bag) -> Result<DVector<f64>> {
        let v = self.featurize(bag)?;
        Ok(&self.dual * self.cross_kernel(&v))
    }

    /// Summary statistic of a simulated split dataset: the full variant sees
    /// the joined points, the conditional variant sees the split.
    pub fn summarize(&self, data: &SplitBag) -> Result<DVector<f64>> {
        let v = match &self.maps {
            FeatureMaps::Full { map } => mean_embedding(&data.joined(), map)?.values,
            FeatureMaps::Conditional { .. } => return self.predict(&Bag::Split(data.clone())),
        };
        Ok(&self.dual * self.cross_kernel(&v))
    }
}

pub fn predict(model: &RegressionModel, bag: &Bag) -> Result<DVector<f64>> {
    model.predict(bag)
}

/// `exp(-|mu_l - mu_l'|^2 / (2 sigma_K^2))` over all pairs of embeddings.
pub fn outer_gram_full(embeddings: &[EmbeddingVector], outer_bandwidth: f64) -> Result<DMatrix<f64>> {
    let spec = KernelSpec::gaussian(outer_bandwidth)?;
    let first = embeddings.first().ok_or(Error::Empty("embedding set"))?;
    for e in embeddings {
        if e.map_id != first.map_id {
            return Err(Error::MapMismatch(first.map_id, e.map_id));
        }
    }
    let cols: Vec<_> = embeddings.iter().map(|e| e.values.clone()).collect();
    gaussian_gram(&DMatrix::from_columns(&cols), spec.bandwidth)
}

fn gaussian_gram(columns: &DMatrix<f64>, bandwidth: f64) -> Result<DMatrix<f64>> {
    let l = columns.ncols();
    let denom = 2.0 * bandwidth * bandwidth;
    let mut k = DMatrix::from_element(l, l, 1.0);
    for i in 0..l {
        for j in (i + 1)..l {
            let d2 = (columns.column(i) - columns.column(j)).norm_squared();
            let v = (-d2 / denom).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Linear operator kernel `<C_l, C_l'>_HS` over all pairs.
pub fn outer_gram_conditional(ops: &[OperatorFeatures]) -> Result<DMatrix<f64>> {
    let l = ops.len();
    if l == 0 {
        return Err(Error::Empty("operator set"));
    }
    let mut k = DMatrix::zeros(l, l);
    for i in 0..l {
        for j in i..l {
            let v = operator_kernel(&ops[i], &ops[j])?;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// `Theta (K + L lambda I)^-1` through a Cholesky solve.
///
/// `thetas` is `D x L` with one column per training bag.
pub fn ridge_fit(gram: &DMatrix<f64>, thetas: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    let l = gram.nrows();
    if l == 0 {
        return Err(Error::Empty("gram matrix"));
    }
    if gram.ncols() != l {
        return Err(Error::invalid("gram", format!("must be square, got {:?}", gram.shape())));
    }
    if thetas.ncols() != l {
        return Err(Error::DimensionMismatch {
            expected: l,
            got: thetas.ncols(),
        });
    }
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::invalid("lambda", format!("must be positive, got {lambda}")));
    }
    let scale = gram.abs().max().max(1.0);
    for i in 0..l {
        for j in (i + 1)..l {
            if (gram[(i, j)] - gram[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::invalid("gram", "matrix is not symmetric"));
            }
        }
    }
    let mut a = gram.clone();
    let ridge = l as f64 * lambda;
    for i in 0..l {
        a[(i, i)] += ridge;
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Solver("ridge system is not positive definite".into()))?;
    // (K + cI) is symmetric, so dual^T = (K + cI)^-1 Theta^T.
    Ok(chol.solve(&thetas.transpose()).transpose())
}

fn theta_matrix<B>(train: &[LabeledBag<B>]) -> Result<DMatrix<f64>> {
    let first = train.first().ok_or(Error::Empty("training set"))?;
    let d = first.theta.len();
    if d == 0 {
        return Err(Error::invalid("theta", "parameter vectors must be non-empty"));
    }
    let mut m = DMatrix::zeros(d, train.len());
    for (l, lb) in train.iter().enumerate() {
        if lb.theta.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: lb.theta.len(),
            });
        }
        for (i, v) in lb.theta.iter().enumerate() {
            m[(i, l)] = *v;
        }
    }
    Ok(m)
}

pub fn fit_full(
    train: &[LabeledBag<SampleBag>],
    map: &RffMap,
    outer_bandwidth: f64,
    lambda: f64,
) -> Result<RegressionModel> {
    let thetas = theta_matrix(train)?;
    let embeddings = train
        .iter()
        .map(|lb| mean_embedding(&lb.bag, map))
        .collect::<Result<Vec<_>>>()?;
    let gram = outer_gram_full(&embeddings, outer_bandwidth)?;
    let dual = ridge_fit(&gram, &thetas, lambda)?;
    let cols: Vec<_> = embeddings.into_iter().map(|e| e.values).collect();
    Ok(RegressionModel {
        maps: FeatureMaps::Full { map: map.clone() },
        hyper: Hyperparameters::Full {
            bandwidth: map.bandwidth(),
            outer_bandwidth,
            lambda,
        },
        outer: KernelSpec::gaussian(outer_bandwidth)?,
        features: DMatrix::from_columns(&cols),
        dual,
    })
}

pub fn fit_conditional(
    train: &[LabeledBag<SplitBag>],
    map_z: &RffMap,
    map_x: &RffMap,
    lambda1: f64,
    lambda2: f64,
) -> Result<RegressionModel> {
    let thetas = theta_matrix(train)?;
    let ops = train
        .iter()
        .map(|lb| conditional_operator(&lb.bag, map_z, map_x, lambda1))
        .collect::<Result<Vec<_>>>()?;
    let gram = outer_gram_conditional(&ops)?;
    let dual = ridge_fit(&gram, &thetas, lambda2)?;
    let cols: Vec<_> = ops
        .iter()
        .map(|c| DVector::from_column_slice(c.matrix.as_slice()))
        .collect();
    Ok(RegressionModel {
        maps: FeatureMaps::Conditional {
            map_z: map_z.clone(),
            map_x: map_x.clone(),
        },
        hyper: Hyperparameters::Conditional {
            bandwidth_z: map_z.bandwidth(),
            bandwidth_x: map_x.bandwidth(),
            lambda1,
            lambda2,
        },
        outer: KernelSpec::linear(),
        features: DMatrix::from_columns(&cols),
        dual,
    })
}

/// Seeds of the feature maps used by a fit. Maps for different bandwidths
/// share a seed, so their frequencies differ only by scale.
pub fn map_seed(base: u64, side: u64) -> u64 {
    seed::derive(base, streams::RFF, side)
}

/// Fit a model from absolute hyperparameters, building the maps from `seed`.
pub fn fit_with(
    train: &[LabeledBag<SplitBag>],
    hyper: &Hyperparameters,
    num_features: usize,
    seed: u64,
) -> Result<RegressionModel> {
    let first = train.first().ok_or(Error::Empty("training set"))?;
    match *hyper {
        Hyperparameters::Full {
            bandwidth,
            outer_bandwidth,
            lambda,
        } => {
            let d = first.bag.z().dim() + first.bag.x().dim();
            let map = build_rff(d, num_features, bandwidth, map_seed(seed, 0))?;
            fit_full(&joined(train), &map, outer_bandwidth, lambda)
        }
        Hyperparameters::Conditional {
            bandwidth_z,
            bandwidth_x,
            lambda1,
            lambda2,
        } => {
            let map_z = build_rff(first.bag.z().dim(), num_features, bandwidth_z, map_seed(seed, 1))?;
            let map_x = build_rff(first.bag.x().dim(), num_features, bandwidth_x, map_seed(seed, 2))?;
            fit_conditional(train, &map_z, &map_x, lambda1, lambda2)
        }
    }
}

// ---------------------------------------------------------------------------
// Cross-validation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    pub folds: usize,
    /// Multipliers applied to the median heuristic of each bandwidth.
    pub bandwidth_factors: Vec<f64>,
    /// Regularizers are `10^e` for each exponent.
    pub exponents: Vec<f64>,
    /// Cap on pooled points used for the median heuristic.
    pub median_points: usize,
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            bandwidth_factors: linspace(1e-4, 1000.0, 10),
            exponents: linspace(-4.0, 1.0, 10),
            median_points: 1000,
        }
    }
}

impl CvConfig {
    /// Default grid with the bandwidth factors spaced evenly in log10 between
    /// the same endpoints, `10^linspace(-4, 3, 10)`.
    pub fn log_bandwidths() -> Self {
        Self {
            bandwidth_factors: linspace(-4.0, 3.0, 10).into_iter().map(|e| 10f64.powf(e)).collect(),
            ..Self::default()
        }
    }

    pub fn regularizers(&self) -> Vec<f64> {
        self.exponents.iter().map(|e| 10f64.powf(*e)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::invalid("folds", "need at least 2 folds"));
        }
        if self.bandwidth_factors.is_empty() || self.exponents.is_empty() {
            return Err(Error::Empty("cross-validation grid"));
        }
        if self.bandwidth_factors.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::invalid("bandwidth_factors", "factors must be positive"));
        }
        if self.exponents.iter().any(|e| !e.is_finite()) {
            return Err(Error::invalid("exponents", "exponents must be finite"));
        }
        if self.median_points < 2 {
            return Err(Error::invalid("median_points", "need at least 2"));
        }
        Ok(())
    }
}

/// Fold index of every training bag: a seeded permutation dealt round-robin.
pub fn fold_assignment(l: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..l).collect();
    perm.shuffle(&mut seed::rng(seed::derive(seed, streams::FOLDS, l as u64)));
    let mut assignment = vec![0; l];
    for (pos, &idx) in perm.iter().enumerate() {
        assignment[idx] = pos % folds;
    }
    assignment
}

/// Result of a grid search.
#[derive(Debug, Clone, PartialEq)]
pub struct CvOutcome {
    pub hyperparameters: Hyperparameters,
    /// Mean held-out squared error of the selected point.
    pub error: f64,
    pub grid_points: usize,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    error: f64,
    /// Tie-break key, compared lexicographically; larger wins.
    key: [f64; 4],
    hyper: Hyperparameters,
}

impl Candidate {
    fn beats(&self, other: &Candidate) -> bool {
        if self.error != other.error {
            return self.error < other.error;
        }
        self.key
            .iter()
            .zip(other.key.iter())
            .find(|(a, b)| a != b)
            .is_some_and(|(a, b)| a > b)
    }
}

fn offer(best: &mut Option<Candidate>, c: Candidate) {
    if !c.error.is_finite() {
        return;
    }
    if best.as_ref().is_none_or(|b| c.beats(b)) {
        *best = Some(c);
    }
}

/// Held-out errors of ridge regression on a precomputed Gram, one per
/// regularizer: the mean over folds of the mean squared error on the fold.
fn cv_errors(gram: &DMatrix<f64>, thetas: &DMatrix<f64>, folds: &[usize], k: usize, lambdas: &[f64]) -> Vec<f64> {
    let mut totals = vec![0.0; lambdas.len()];
    for fold in 0..k {
        let train: Vec<usize> = (0..folds.len()).filter(|&i| folds[i] != fold).collect();
        let test: Vec<usize> = (0..folds.len()).filter(|&i| folds[i] == fold).collect();
        if test.is_empty() || train.is_empty() {
            continue;
        }
        let k_tt = gram.select_rows(&train).select_columns(&train);
        let k_tv = gram.select_rows(&train).select_columns(&test);
        let th_t = thetas.select_columns(&train);
        let th_v = thetas.select_columns(&test);
        for (li, &lambda) in lambdas.iter().enumerate() {
            let err = match ridge_fit(&k_tt, &th_t, lambda) {
                Ok(dual) => {
                    let pred = dual * &k_tv;
                    (pred - &th_v).norm_squared() / test.len() as f64
                }
                Err(_) => f64::INFINITY,
            };
            totals[li] += err;
        }
    }
    totals.iter().map(|t| t / k as f64).collect()
}

fn pooled_median<'a, I>(bags: I, cap: usize, seed: u64) -> Result<f64>
where
    I: Iterator<Item = &'a SampleBag>,
{
    let pts: Vec<&[f64]> = bags.flat_map(|b| b.iter()).collect();
    median_heuristic_subsampled(&pts, cap, seed::derive(seed, streams::SUBSAMPLE, 0))
}

fn check_cv_inputs<B>(train: &[LabeledBag<B>], cv: &CvConfig) -> Result<()> {
    cv.validate()?;
    if train.len() < cv.folds {
        return Err(Error::invalid(
            "training set",
            format!("{} bags is fewer than {} folds", train.len(), cv.folds),
        ));
    }
    Ok(())
}

/// Grid search for the full variant over (bandwidth, outer bandwidth, lambda).
pub fn cross_validate_full(
    train: &[LabeledBag<SampleBag>],
    cv: &CvConfig,
    num_features: usize,
    seed: u64,
) -> Result<CvOutcome> {
    check_cv_inputs(train, cv)?;
    let thetas = theta_matrix(train)?;
    let folds = fold_assignment(train.len(), cv.folds, seed);
    let lambdas = cv.regularizers();
    let median = pooled_median(train.iter().map(|lb| &lb.bag), cv.median_points, seed)?;
    let d = train[0].bag.dim();
    let mut best = None;
    for &bf in &cv.bandwidth_factors {
        let bandwidth = bf * median;
        let map = build_rff(d, num_features, bandwidth, map_seed(seed, 0))?;
        let cols = train
            .iter()
            .map(|lb| mean_embedding(&lb.bag, &map).map(|e| e.values))
            .collect::<Result<Vec<_>>>()?;
        let emb = DMatrix::from_columns(&cols);
        let dist: Vec<Vec<f64>> = cols.iter().map(|c| c.as_slice().to_vec()).collect();
        // Identical embeddings everywhere leave the outer heuristic undefined.
        let Ok(outer_median) = median_heuristic(&dist) else {
            continue;
        };
        for &of in &cv.bandwidth_factors {
            let outer_bandwidth = of * outer_median;
            let gram = gaussian_gram(&emb, outer_bandwidth)?;
            let errs = cv_errors(&gram, &thetas, &folds, cv.folds, &lambdas);
            for (&lambda, err) in lambdas.iter().zip(errs) {
                offer(
                    &mut best,
                    Candidate {
                        error: err,
                        key: [lambda, outer_bandwidth, bandwidth, 0.0],
                        hyper: Hyperparameters::Full {
                            bandwidth,
                            outer_bandwidth,
                            lambda,
                        },
                    },
                );
            }
        }
    }
    let grid_points = cv.bandwidth_factors.len().pow(2) * lambdas.len();
    finish(best, grid_points)
}

fn finish(best: Option<Candidate>, grid_points: usize) -> Result<CvOutcome> {
    let best = best.ok_or_else(|| Error::Solver("no grid point produced a finite cross-validation error".into()))?;
    Ok(CvOutcome {
        hyperparameters: best.hyper,
        error: best.error,
        grid_points,
    })
}

/// Per-bag spectral factors of `Phi_Z^T Phi_Z = V diag(s) V^T`, with
/// `P = Phi_Z V`. Then `C(lambda1) = (Phi_X^T P) diag(1 / (s + lambda1)) V^T`
/// for every `lambda1` at the cost of one eigendecomposition.
struct ZFactors {
    v: DMatrix<f64>,
    s: DVector<f64>,
    p: DMatrix<f64>,
}

fn z_factors(bag: &SplitBag, map_z: &RffMap) -> Result<ZFactors> {
    let phi_z = map_z.feature_matrix(&bag.z().rows())?;
    let eig = SymmetricEigen::new(phi_z.tr_mul(&phi_z));
    let p = &phi_z * &eig.eigenvectors;
    Ok(ZFactors {
        v: eig.eigenvectors,
        s: eig.eigenvalues.map(|e| e.max(0.0)),
        p,
    })
}

fn operator_from_factors(q: &DMatrix<f64>, f: &ZFactors, lambda1: f64) -> DMatrix<f64> {
    let mut scaled = q.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col /= f.s[j] + lambda1;
    }
    scaled * f.v.transpose()
}

/// Grid search for the conditional variant over
/// (bandwidth_z, bandwidth_x, lambda1, lambda2).
pub fn cross_validate_conditional(
    train: &[LabeledBag<SplitBag>],
    cv: &CvConfig,
    num_features: usize,
    seed: u64,
) -> Result<CvOutcome> {
    check_cv_inputs(train, cv)?;
    let thetas = theta_matrix(train)?;
    let folds = fold_assignment(train.len(), cv.folds, seed);
    let lambdas = cv.regularizers();
    let med_z = pooled_median(train.iter().map(|lb| lb.bag.z()), cv.median_points, seed)?;
    let med_x = pooled_median(train.iter().map(|lb| lb.bag.x()), cv.median_points, seed)?;
    let (dz, dx) = (train[0].bag.z().dim(), train[0].bag.x().dim());
    let l = train.len();
    let mut best = None;
    for &fz in &cv.bandwidth_factors {
        let bandwidth_z = fz * med_z;
        let map_z = build_rff(dz, num_features, bandwidth_z, map_seed(seed, 1))?;
        let factors = train
            .iter()
            .map(|lb| z_factors(&lb.bag, &map_z))
            .collect::<Result<Vec<_>>>()?;
        for &fx in &cv.bandwidth_factors {
            let bandwidth_x = fx * med_x;
            let map_x = build_rff(dx, num_features, bandwidth_x, map_seed(seed, 2))?;
            let qs = train
                .iter()
                .zip(&factors)
                .map(|(lb, f)| Ok(map_x.feature_matrix(&lb.bag.x().rows())?.tr_mul(&f.p)))
                .collect::<Result<Vec<_>>>()?;
            for &lambda1 in &lambdas {
                let mut flat = DMatrix::zeros(num_features * num_features, l);
                for (i, (q, f)) in qs.iter().zip(&factors).enumerate() {
                    let c = operator_from_factors(q, f, lambda1);
                    flat.column_mut(i).copy_from_slice(c.as_slice());
                }
                let gram = flat.tr_mul(&flat);
                let errs = cv_errors(&gram, &thetas, &folds, cv.folds, &lambdas);
                for (&lambda2, err) in lambdas.iter().zip(errs) {
                    offer(
                        &mut best,
                        Candidate {
                            error: err,
                            key: [lambda2, lambda1, bandwidth_x, bandwidth_z],
                            hyper: Hyperparameters::Conditional {
                                bandwidth_z,
                                bandwidth_x,
                                lambda1,
                                lambda2,
                            },
                        },
                    );
                }
            }
        }
    }
    let grid_points = cv.bandwidth_factors.len().pow(2) * lambdas.len().pow(2);
    finish(best, grid_points)
}

/// Grid search for either variant on split training data.
pub fn cross_validate(
    train: &[LabeledBag<SplitBag>],
    cv: &CvConfig,
    variant: Variant,
    num_features: usize,
    seed: u64,
) -> Result<CvOutcome> {
    match variant {
        Variant::Full => cross_validate_full(&joined(train), cv, num_features, seed),
        Variant::Conditional => cross_validate_conditional(train, cv, num_features, seed),
    }
}

// ---------------------------------------------------------------------------
// Model files

pub const MODEL_FORMAT: &str = "distreg-abc-model/1";

/// Structured-text form of a fitted model. See `docs/model-format.md`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub hyperparameters: Hyperparameters,
    /// One map for the full variant, `[z, x]` for the conditional variant.
    pub maps: Vec<RffSpec>,
    pub outer_kernel: KernelSpec,
    /// `D` rows of `L` values.
    pub dual: Vec<Vec<f64>>,
    /// `L` rows; each row is an embedding or a column-major operator.
    pub training_features: Vec<Vec<f64>>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &'static str) -> Result<DMatrix<f64>> {
    let first = rows.first().ok_or(Error::Empty(what))?;
    let n = first.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Parse(format!("{what}: ragged rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]))
}

impl RegressionModel {
    pub fn to_file(&self) -> ModelFile {
        let maps = match &self.maps {
            FeatureMaps::Full { map } => vec![map.spec()],
            FeatureMaps::Conditional { map_z, map_x } => vec![map_z.spec(), map_x.spec()],
        };
        ModelFile {
            format: MODEL_FORMAT.to_string(),
            hyperparameters: self.hyper,
            maps,
            outer_kernel: self.outer,
            dual: rows_of(&self.dual),
            training_features: rows_of(&self.features.transpose()),
        }
    }

    pub fn from_file(file: &ModelFile) -> Result<Self> {
        if file.format != MODEL_FORMAT {
            return Err(Error::Parse(format!("unsupported model format `{}`", file.format)));
        }
        let maps = match (file.hyperparameters, file.maps.as_slice()) {
            (Hyperparameters::Full { .. }, [m]) => FeatureMaps::Full {
                map: RffMap::from_spec(m)?,
            },
            (Hyperparameters::Conditional { .. }, [z, x]) => FeatureMaps::Conditional {
                map_z: RffMap::from_spec(z)?,
                map_x: RffMap::from_spec(x)?,
            },
            _ => return Err(Error::Parse("map count does not match the model variant".into())),
        };
        let dual = matrix_from_rows(&file.dual, "dual matrix")?;
        let features = matrix_from_rows(&file.training_features, "training features")?.transpose();
        if features.ncols() != dual.ncols() {
            return Err(Error::Parse(format!(
                "dual has {} columns but there are {} training features",
                dual.ncols(),
                features.ncols()
            )));
        }
        let expected = match &maps {
            FeatureMaps::Full { map } => map.num_features(),
            FeatureMaps::Conditional { map_z, map_x } => map_z.num_features() * map_x.num_features(),
        };
        if features.nrows() != expected {
            return Err(Error::Parse(format!(
                "training feature length {} does not match maps ({expected})",
                features.nrows()
            )));
        }
        Ok(Self {
            maps,
            hyper: file.hyperparameters,
            outer: file.outer_kernel,
            features,
            dual,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(&self.to_file())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        Self::from_file(&file)
    }
}

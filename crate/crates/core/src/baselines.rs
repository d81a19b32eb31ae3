//! Baseline summary statistics run through the same soft-threshold engine:
//! K2-ABC (mean embeddings compared by MMD) and semi-automatic ABC (a linear
//! regression of the parameters on features of the flattened dataset).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::abc::{self, AbcConfig, GenerativeModel, SummaryStatistic, WeightedPosterior};
use crate::distreg::LabeledBag;
use crate::embeddings::{mean_embedding, SplitBag};
use crate::kernels::{build_rff, median_heuristic_subsampled, RffMap};
use crate::seed::{self, streams};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// K2-ABC

/// Mean embedding of the joined `(z, x)` points under a fixed RFF map. The
/// squared distance between two summaries is the feature-space MMD.
#[derive(Debug, Clone)]
pub struct K2Summary {
    map: RffMap,
}

impl K2Summary {
    pub fn new(map: RffMap) -> Self {
        Self { map }
    }

    /// Map whose bandwidth is the median heuristic of the observed bag.
    pub fn from_observed(observed: &SplitBag, num_features: usize, seed: u64) -> Result<Self> {
        let joined = observed.joined();
        let bandwidth = median_heuristic_subsampled(
            &joined.rows(),
            1000,
            seed::derive(seed, streams::SUBSAMPLE, 1),
        )?;
        let map = build_rff(joined.dim(), num_features, bandwidth, seed::derive(seed, streams::RFF, 3))?;
        Ok(Self { map })
    }

    pub fn map(&self) -> &RffMap {
        &self.map
    }
}

impl SummaryStatistic for K2Summary {
    fn summarize(&self, data: &SplitBag) -> Result<DVector<f64>> {
        Ok(mean_embedding(&data.joined(), &self.map)?.values)
    }
}

pub fn run_k2_abc<G: GenerativeModel + ?Sized>(
    model: &G,
    observed: &SplitBag,
    summary: &K2Summary,
    cfg: &AbcConfig,
) -> Result<WeightedPosterior> {
    abc::run_abc_with(model, observed, summary, cfg)
}

// ---------------------------------------------------------------------------
// SA-ABC

/// Features `g(y)` of the flattened dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FeatureMap {
    #[default]
    Identity,
    /// Elementwise powers `y, y^2, .., y^degree`.
    Powers { degree: u32 },
    /// Scores on the leading principal components of the training datasets.
    Pca { components: usize },
}


impl FeatureMap {
    pub fn validate(&self) -> Result<()> {
        match *self {
            FeatureMap::Identity => Ok(()),
            FeatureMap::Powers { degree } if (1..=4).contains(&degree) => Ok(()),
            FeatureMap::Powers { degree } => Err(Error::invalid("degree", format!("must be in 1..=4, got {degree}"))),
            FeatureMap::Pca { components } if components >= 1 => Ok(()),
            FeatureMap::Pca { .. } => Err(Error::invalid("components", "must be at least 1")),
        }
    }
}

/// Correlation matrices with smaller eigenvalue ratio are rejected.
pub const MIN_EIGEN_RATIO: f64 = 1e-10;
const JITTER: f64 = 1e-8;

/// The `x` parts of all points, in point order. The `z` parts are
/// covariates or locations (a fixed time grid for the dynamical models) and are
/// left out.
pub fn flatten(bag: &SplitBag) -> Vec<f64> {
    bag.x().flat().to_vec()
}

#[derive(Debug, Clone)]
struct Projection {
    mean: DVector<f64>,
    /// `k x q`.
    basis: DMatrix<f64>,
}

/// Fitted linear summary `s(y) = intercept + beta * standardize(g(y))`.
#[derive(Debug, Clone)]
pub struct SaAbcModel {
    feature_map: FeatureMap,
    input_len: usize,
    projection: Option<Projection>,
    center: DVector<f64>,
    scale: DVector<f64>,
    beta: DMatrix<f64>,
    intercept: DVector<f64>,
}

impl SaAbcModel {
    pub fn feature_map(&self) -> FeatureMap {
        self.feature_map
    }

    /// Coefficients on the raw features `g(y)`, `D x p`.
    pub fn coefficients(&self) -> DMatrix<f64> {
        let mut b = self.beta.clone();
        for (j, mut col) in b.column_iter_mut().enumerate() {
            col /= self.scale[j];
        }
        b
    }

    /// Intercept on the raw features.
    pub fn intercept(&self) -> DVector<f64> {
        &self.intercept - self.coefficients() * &self.center
    }

    fn features(&self, y: &[f64]) -> Result<DVector<f64>> {
        if y.len() != self.input_len {
            return Err(Error::DimensionMismatch { expected: self.input_len, got: y.len() });
        }
        Ok(apply_map(self.feature_map, self.projection.as_ref(), y))
    }

    pub fn predict_flat(&self, y: &[f64]) -> Result<DVector<f64>> {
        let g = self.features(y)?;
        let std = (g - &self.center).component_div(&self.scale);
        Ok(&self.intercept + &self.beta * std)
    }
}

impl SummaryStatistic for SaAbcModel {
    fn summarize(&self, data: &SplitBag) -> Result<DVector<f64>> {
        self.predict_flat(&flatten(data))
    }
}

fn apply_map(map: FeatureMap, proj: Option<&Projection>, y: &[f64]) -> DVector<f64> {
    match map {
        FeatureMap::Identity => DVector::from_column_slice(y),
        FeatureMap::Powers { degree } => {
            let q = y.len();
            DVector::from_fn(q * degree as usize, |i, _| y[i % q].powi(i as i32 / q as i32 + 1))
        }
        FeatureMap::Pca { .. } => {
            let p = proj.expect("pca projection");
            &p.basis * (DVector::from_column_slice(y) - &p.mean)
        }
    }
}

fn principal_components(rows: &DMatrix<f64>, k: usize) -> Result<Projection> {
    let (l, q) = rows.shape();
    if k > q.min(l) {
        return Err(Error::invalid(
            "components",
            format!("{k} exceeds min(datasets, data length) = {}", q.min(l)),
        ));
    }
    let mean = DVector::from_iterator(q, rows.column_iter().map(|c| c.mean()));
    let mut centered = rows.clone();
    for mut r in centered.row_iter_mut() {
        r -= mean.transpose();
    }
    let cov = centered.tr_mul(&centered) / (l.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut basis = DMatrix::zeros(k, q);
    for (r, &i) in order[..k].iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        // Fix the sign so the largest-magnitude entry is positive.
        let pivot = v.iamax();
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        basis.row_mut(r).copy_from(&(v.transpose() * sign));
    }
    Ok(Projection { mean, basis })
}

/// Least-squares fit of the parameters on `g(flatten(y))` with an intercept.
///
/// Errors with [`Error::IllConditioned`] when a feature is constant or the
/// feature correlation matrix is numerically singular.
pub fn fit_sa_abc(train: &[LabeledBag<SplitBag>], g: FeatureMap) -> Result<SaAbcModel> {
    g.validate()?;
    let first = train.first().ok_or(Error::Empty("training set"))?;
    let flat: Vec<Vec<f64>> = train.iter().map(|lb| flatten(&lb.bag)).collect();
    let q = flat[0].len();
    if let Some(f) = flat.iter().find(|f| f.len() != q) {
        return Err(Error::invalid(
            "training set",
            format!("datasets must have equal size for flattening ({} vs {q})", f.len()),
        ));
    }
    let d = first.theta.len();
    if let Some(lb) = train.iter().find(|lb| lb.theta.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: lb.theta.len() });
    }
    let l = train.len();
    let raw = DMatrix::from_fn(l, q, |i, j| flat[i][j]);
    let projection = match g {
        FeatureMap::Pca { components } => Some(principal_components(&raw, components)?),
        _ => None,
    };
    let feats: Vec<DVector<f64>> = flat.iter().map(|y| apply_map(g, projection.as_ref(), y)).collect();
    let p = feats[0].len();
    let mut x = DMatrix::from_fn(l, p, |i, j| feats[i][j]);
    if l < 2 {
        return Err(Error::invalid("training set", "need at least 2 datasets"));
    }
    let center = DVector::from_iterator(p, x.column_iter().map(|c| c.mean()));
    let mut scale = DVector::zeros(p);
    for (j, mut col) in x.column_iter_mut().enumerate() {
        col.add_scalar_mut(-center[j]);
        let sd = (col.norm_squared() / (l - 1) as f64).sqrt();
        if !(sd.is_finite() && sd > 0.0) {
            return Err(Error::IllConditioned(format!(
                "feature {j} is constant across training datasets; use the pca feature map"
            )));
        }
        col /= sd;
        scale[j] = sd;
    }
    let gram = x.tr_mul(&x);
    let corr = &gram / (l - 1) as f64;
    let eig = corr.clone().symmetric_eigenvalues();
    let hi = eig.max();
    let lo = eig.min();
    let ratio = lo / hi;
    if ratio.is_nan() || ratio < MIN_EIGEN_RATIO {
        return Err(Error::IllConditioned(format!(
            "feature correlation matrix has eigenvalue ratio {:.3e} (p = {p}, datasets = {l}); \
             use the pca feature map",
            ratio
        )));
    }
    let thetas = DMatrix::from_fn(l, d, |i, j| train[i].theta[j]);
    let intercept = DVector::from_iterator(d, thetas.column_iter().map(|c| c.mean()));
    let mut yc = thetas;
    for (j, mut col) in yc.column_iter_mut().enumerate() {
        col.add_scalar_mut(-intercept[j]);
    }
    let a = gram + DMatrix::identity(p, p) * JITTER;
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::IllConditioned("normal equations are not positive definite; use the pca feature map".into()))?;
    let beta = chol.solve(&x.tr_mul(&yc)).transpose();
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::IllConditioned("non-finite coefficients".into()));
    }
    Ok(SaAbcModel { feature_map: g, input_len: q, projection, center, scale, beta, intercept })
}

/// Simulate `count` training datasets from the prior on the SA streams of
/// `seed`, then fit.
pub fn train_sa_abc<G: GenerativeModel + ?Sized>(
    model: &G,
    count: usize,
    g: FeatureMap,
    seed: u64,
) -> Result<SaAbcModel> {
    let particles = abc::simulate_labeled(model, count, seed, streams::SA_PRIOR, streams::SA_SIM)?;
    let train: Vec<_> = particles.into_iter().map(|p| LabeledBag::new(p.theta, p.data)).collect();
    fit_sa_abc(&train, g)
}

pub fn run_sa_abc<G: GenerativeModel + ?Sized>(
    model: &G,
    observed: &SplitBag,
    sa: &SaAbcModel,
    cfg: &AbcConfig,
) -> Result<WeightedPosterior> {
    abc::run_abc_with(model, observed, sa, cfg)
}

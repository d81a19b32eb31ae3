//! Scalar kernels, the median bandwidth heuristic and random Fourier features.
//!
//! The Gaussian kernel `k(x, x') = exp(-|x - x'|^2 / (2 sigma^2))` is
//! approximated by the feature map
//!
//! ```text
//! phi(x)[2i..2i+2] = sqrt(2 / f) * [cos(w_i . x), sin(w_i . x)],   w_i ~ N(0, sigma^-2 I)
//! ```
//!
//! so that `<phi(x), phi(x')>` is an unbiased estimate of `k(x, x')` and every
//! feature vector has unit norm.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Gaussian,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Ignored for the linear kernel.
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        check_bandwidth(bandwidth)?;
        Ok(Self {
            family: KernelFamily::Gaussian,
            bandwidth,
        })
    }

    pub fn linear() -> Self {
        Self {
            family: KernelFamily::Linear,
            bandwidth: 1.0,
        }
    }

    pub fn eval(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        kernel_eval(self, x, x2)
    }
}

fn check_bandwidth(sigma: f64) -> Result<()> {
    if sigma.is_finite() && sigma > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid("bandwidth", format!("must be positive and finite, got {sigma}")))
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

pub(crate) fn squared_distance(x: &[f64], x2: &[f64]) -> f64 {
    x.iter().zip(x2).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub fn kernel_eval(spec: &KernelSpec, x: &[f64], x2: &[f64]) -> Result<f64> {
    check_dim(x.len(), x2.len())?;
    Ok(match spec.family {
        KernelFamily::Gaussian => {
            let s2 = spec.bandwidth * spec.bandwidth;
            (-squared_distance(x, x2) / (2.0 * s2)).exp()
        }
        KernelFamily::Linear => x.iter().zip(x2).map(|(a, b)| a * b).sum(),
    })
}

/// Median of the Euclidean distances over all distinct unordered pairs.
///
/// With an even number of pairs the two central order statistics are averaged.
pub fn median_heuristic<P: AsRef<[f64]>>(points: &[P]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Degenerate(format!(
            "median heuristic needs at least 2 points, got {}",
            points.len()
        )));
    }
    let d = points[0].as_ref().len();
    let mut dists = Vec::with_capacity(points.len() * (points.len() - 1) / 2);
    for (i, a) in points.iter().enumerate() {
        let a = a.as_ref();
        check_dim(d, a.len())?;
        for b in &points[i + 1..] {
            dists.push(squared_distance(a, b.as_ref()).sqrt());
        }
    }
    let med = median_in_place(&mut dists);
    if med > 0.0 {
        Ok(med)
    } else {
        Err(Error::Degenerate(
            "median pairwise distance is zero; bandwidth would be invalid".into(),
        ))
    }
}

/// Median heuristic on at most `max_points` points drawn without replacement.
pub fn median_heuristic_subsampled<P: AsRef<[f64]>>(
    points: &[P],
    max_points: usize,
    seed: u64,
) -> Result<f64> {
    if points.len() <= max_points {
        return median_heuristic(points);
    }
    let mut rng = seed::rng(seed);
    let idx = rand::seq::index::sample(&mut rng, points.len(), max_points);
    let chosen: Vec<&[f64]> = idx.iter().map(|i| points[i].as_ref()).collect();
    median_heuristic(&chosen)
}

pub(crate) fn median_in_place(values: &mut [f64]) -> f64 {
    let n = values.len();
    let cmp = |a: &f64, b: &f64| a.total_cmp(b);
    let (_, upper, _) = values.select_nth_unstable_by(n / 2, cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = values[..n / 2]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// A frozen random Fourier feature map for the Gaussian kernel.
#[derive(Debug, Clone)]
pub struct RffMap {
    input_dim: usize,
    num_features: usize,
    bandwidth: f64,
    seed: u64,
    /// `(f/2) x d`, one frequency per row.
    frequencies: DMatrix<f64>,
    id: u64,
}

/// The four numbers that fully determine an [`RffMap`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RffSpec {
    pub input_dim: usize,
    pub num_features: usize,
    pub bandwidth: f64,
    pub seed: u64,
}

pub fn build_rff(input_dim: usize, num_features: usize, bandwidth: f64, seed: u64) -> Result<RffMap> {
    if num_features == 0 || !num_features.is_multiple_of(2) {
        return Err(Error::invalid(
            "num_features",
            format!("must be positive and even, got {num_features}"),
        ));
    }
    if input_dim == 0 {
        return Err(Error::invalid("input_dim", "must be positive"));
    }
    check_bandwidth(bandwidth)?;
    let half = num_features / 2;
    let mut rng = seed::rng(seed);
    let scale = 1.0 / bandwidth;
    // Filled row by row so the draw order does not depend on storage layout.
    let mut frequencies = DMatrix::zeros(half, input_dim);
    for i in 0..half {
        for j in 0..input_dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            frequencies[(i, j)] = z * scale;
        }
    }
    Ok(RffMap {
        input_dim,
        num_features,
        bandwidth,
        seed,
        frequencies,
        id: fingerprint(input_dim, num_features, bandwidth, seed),
    })
}

fn fingerprint(d: usize, f: usize, sigma: f64, seed: u64) -> u64 {
    // FNV-1a over the defining fields.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for word in [d as u64, f as u64, sigma.to_bits(), seed] {
        for byte in word.to_le_bytes() {
            h ^= u64::from(byte);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    h
}

impl RffMap {
    pub fn from_spec(spec: &RffSpec) -> Result<Self> {
        build_rff(spec.input_dim, spec.num_features, spec.bandwidth, spec.seed)
    }

    pub fn spec(&self) -> RffSpec {
        RffSpec {
            input_dim: self.input_dim,
            num_features: self.num_features,
            bandwidth: self.bandwidth,
            seed: self.seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn frequencies(&self) -> &DMatrix<f64> {
        &self.frequencies
    }

    /// Identifier shared by every map built from the same `(d, f, sigma, seed)`.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn features(&self, x: &[f64]) -> Result<DVector<f64>> {
        check_dim(self.input_dim, x.len())?;
        let mut out = DVector::zeros(self.num_features);
        self.write_features(x, out.as_mut_slice());
        Ok(out)
    }

    fn write_features(&self, x: &[f64], out: &mut [f64]) {
        let scale = (2.0 / self.num_features as f64).sqrt();
        for i in 0..self.num_features / 2 {
            let mut t = 0.0;
            for (j, xj) in x.iter().enumerate() {
                t += self.frequencies[(i, j)] * xj;
            }
            let (s, c) = t.sin_cos();
            out[2 * i] = scale * c;
            out[2 * i + 1] = scale * s;
        }
    }

    /// Feature matrix with one row per point (`n x f`).
    pub fn feature_matrix<P: AsRef<[f64]>>(&self, points: &[P]) -> Result<DMatrix<f64>> {
        let mut phi = DMatrix::zeros(points.len(), self.num_features);
        let mut row = vec![0.0; self.num_features];
        for (r, p) in points.iter().enumerate() {
            let p = p.as_ref();
            check_dim(self.input_dim, p.len())?;
            self.write_features(p, &mut row);
            for (c, v) in row.iter().enumerate() {
                phi[(r, c)] = *v;
            }
        }
        Ok(phi)
    }
}

pub fn rff_features(map: &RffMap, x: &[f64]) -> Result<DVector<f64>> {
    map.features(x)
}

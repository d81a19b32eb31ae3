//! Sample bags, mean embeddings, MMD estimators and conditional embedding
//! operators.
//!
//! Mean embeddings and operators live in random Fourier feature coordinates.
//! The exact-kernel path is only used by [`mmd2_unbiased`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::kernels::{check_dim, kernel_eval, KernelSpec, RffMap};
use crate::{Error, Result};

/// A dataset viewed as an i.i.d. bag of `d`-dimensional points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBag {
    dim: usize,
    /// Row-major, `len * dim` values.
    data: Vec<f64>,
}

impl SampleBag {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let first = points.first().ok_or(Error::Empty("sample bag"))?;
        let dim = first.len();
        if dim == 0 {
            return Err(Error::invalid("dim", "points must have positive dimension"));
        }
        let mut data = Vec::with_capacity(points.len() * dim);
        for p in &points {
            check_dim(dim, p.len())?;
            data.extend_from_slice(p);
        }
        Ok(Self { dim, data })
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim", "points must have positive dimension"));
        }
        if data.is_empty() {
            return Err(Error::Empty("sample bag"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::invalid(
                "data",
                format!("length {} is not a multiple of dim {dim}", data.len()),
            ));
        }
        Ok(Self { dim, data })
    }

    /// Scalar observations as a bag of 1-d points.
    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::from_flat(1, values.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn rows(&self) -> Vec<&[f64]> {
        self.iter().collect()
    }

    /// Row-major concatenation of all points.
    pub fn flat(&self) -> &[f64] {
        &self.data
    }
}

/// A bag of points split into an auxiliary part `z` and an important part `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitBag {
    z: SampleBag,
    x: SampleBag,
}

impl SplitBag {
    pub fn new(z: SampleBag, x: SampleBag) -> Result<Self> {
        if z.len() != x.len() {
            return Err(Error::invalid(
                "split bag",
                format!("z has {} points but x has {}", z.len(), x.len()),
            ));
        }
        Ok(Self { z, x })
    }

    pub fn from_pairs(pairs: Vec<(Vec<f64>, Vec<f64>)>) -> Result<Self> {
        let (z, x): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        Self::new(SampleBag::new(z)?, SampleBag::new(x)?)
    }

    pub fn z(&self) -> &SampleBag {
        &self.z
    }

    pub fn x(&self) -> &SampleBag {
        &self.x
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// Points `(z, x)` concatenated into one bag of dimension `d_z + d_x`.
    pub fn joined(&self) -> SampleBag {
        let dim = self.z.dim() + self.x.dim();
        let mut data = Vec::with_capacity(self.len() * dim);
        for (z, x) in self.z.iter().zip(self.x.iter()) {
            data.extend_from_slice(z);
            data.extend_from_slice(x);
        }
        SampleBag { dim, data }
    }
}

/// Either kind of bag, as accepted by a fitted regression model.
#[derive(Debug, Clone, PartialEq)]
pub enum Bag {
    Sample(SampleBag),
    Split(SplitBag),
}

impl Bag {
    pub fn kind(&self) -> &'static str {
        match self {
            Bag::Sample(_) => "sample bag",
            Bag::Split(_) => "split bag",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: DVector<f64>,
    pub map_id: u64,
}

pub fn mean_embedding(bag: &SampleBag, map: &RffMap) -> Result<EmbeddingVector> {
    check_dim(map.input_dim(), bag.dim())?;
    let phi = map.feature_matrix(&bag.rows())?;
    let n = bag.len() as f64;
    let values = DVector::from_iterator(
        phi.ncols(),
        phi.column_iter().map(|c| c.sum() / n),
    );
    Ok(EmbeddingVector {
        values,
        map_id: map.id(),
    })
}

/// Unbiased U-statistic estimate of the squared MMD under an exact kernel.
/// Within-bag sums exclude the diagonal, so the result can be negative.
pub fn mmd2_unbiased(a: &SampleBag, b: &SampleBag, spec: &KernelSpec) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    for bag in [a, b] {
        if bag.len() < 2 {
            return Err(Error::Degenerate(format!(
                "unbiased MMD needs at least 2 points per bag, got {}",
                bag.len()
            )));
        }
    }
    let within = |bag: &SampleBag| -> Result<f64> {
        let n = bag.len();
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += kernel_eval(spec, bag.point(i), bag.point(j))?;
            }
        }
        Ok(2.0 * s / (n as f64 * (n as f64 - 1.0)))
    };
    let mut cross = 0.0;
    for p in a.iter() {
        for q in b.iter() {
            cross += kernel_eval(spec, p, q)?;
        }
    }
    let cross = 2.0 * cross / (a.len() as f64 * b.len() as f64);
    Ok(within(a)? + within(b)? - cross)
}

/// Squared feature-space distance between two mean embeddings.
pub fn mmd2_rff(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.map_id != b.map_id {
        return Err(Error::MapMismatch(a.map_id, b.map_id));
    }
    check_dim(a.values.len(), b.values.len())?;
    Ok((&a.values - &b.values).norm_squared())
}

/// Finite-feature conditional embedding operator, `f_x x f_z`.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorFeatures {
    pub matrix: DMatrix<f64>,
    pub lambda1: f64,
    pub map_z_id: u64,
    pub map_x_id: u64,
}

impl OperatorFeatures {
    /// Predicted conditional embedding of `x` given `z`, i.e. `C phi_z(z)`.
    pub fn apply(&self, map_z: &RffMap, z: &[f64]) -> Result<DVector<f64>> {
        if map_z.id() != self.map_z_id {
            return Err(Error::MapMismatch(self.map_z_id, map_z.id()));
        }
        Ok(&self.matrix * map_z.features(z)?)
    }
}

fn check_lambda1(lambda1: f64) -> Result<()> {
    if lambda1.is_finite() && lambda1 > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid("lambda1", format!("must be positive, got {lambda1}")))
    }
}

fn split_features(bag: &SplitBag, map_z: &RffMap, map_x: &RffMap) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if bag.is_empty() {
        return Err(Error::Empty("split bag"));
    }
    check_dim(map_z.input_dim(), bag.z().dim())?;
    check_dim(map_x.input_dim(), bag.x().dim())?;
    Ok((
        map_z.feature_matrix(&bag.z().rows())?,
        map_x.feature_matrix(&bag.x().rows())?,
    ))
}

fn spd_solve(mut a: DMatrix<f64>, b: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    a.fill_upper_triangle_with_lower_triangle();
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Solver(format!("{what}: matrix is not positive definite")))?;
    Ok(chol.solve(&b))
}

/// `Phi_X^T (Phi_Z Phi_Z^T + lambda1 I_N)^-1 Phi_Z`, an `N x N` solve.
pub fn conditional_operator_dual(
    bag: &SplitBag,
    map_z: &RffMap,
    map_x: &RffMap,
    lambda1: f64,
) -> Result<OperatorFeatures> {
    check_lambda1(lambda1)?;
    let (phi_z, phi_x) = split_features(bag, map_z, map_x)?;
    let mut gram = &phi_z * phi_z.transpose();
    for i in 0..gram.nrows() {
        gram[(i, i)] += lambda1;
    }
    let y = spd_solve(gram, phi_z, "conditional operator (dual)")?;
    Ok(OperatorFeatures {
        matrix: phi_x.transpose() * y,
        lambda1,
        map_z_id: map_z.id(),
        map_x_id: map_x.id(),
    })
}

/// `Phi_X^T Phi_Z (Phi_Z^T Phi_Z + lambda1 I_f)^-1`, an `f_z x f_z` solve.
pub fn conditional_operator_primal(
    bag: &SplitBag,
    map_z: &RffMap,
    map_x: &RffMap,
    lambda1: f64,
) -> Result<OperatorFeatures> {
    check_lambda1(lambda1)?;
    let (phi_z, phi_x) = split_features(bag, map_z, map_x)?;
    let mut cov = phi_z.tr_mul(&phi_z);
    for i in 0..cov.nrows() {
        cov[(i, i)] += lambda1;
    }
    let cross_t = phi_z.tr_mul(&phi_x); // (Phi_X^T Phi_Z)^T
    let y = spd_solve(cov, cross_t, "conditional operator (primal)")?;
    Ok(OperatorFeatures {
        matrix: y.transpose(),
        lambda1,
        map_z_id: map_z.id(),
        map_x_id: map_x.id(),
    })
}

/// Conditional embedding operator of a split bag. Uses the primal
/// (`f_z x f_z`) solve whenever the bag has more points than `z` features.
pub fn conditional_operator(
    bag: &SplitBag,
    map_z: &RffMap,
    map_x: &RffMap,
    lambda1: f64,
) -> Result<OperatorFeatures> {
    if bag.len() > map_z.num_features() {
        conditional_operator_primal(bag, map_z, map_x, lambda1)
    } else {
        conditional_operator_dual(bag, map_z, map_x, lambda1)
    }
}

/// Hilbert-Schmidt inner product `Tr(C^T C')` of two operators.
pub fn operator_kernel(c: &OperatorFeatures, c2: &OperatorFeatures) -> Result<f64> {
    if c.matrix.shape() != c2.matrix.shape() {
        return Err(Error::invalid(
            "operator",
            format!("shape {:?} vs {:?}", c.matrix.shape(), c2.matrix.shape()),
        ));
    }
    if c.map_z_id != c2.map_z_id {
        return Err(Error::MapMismatch(c.map_z_id, c2.map_z_id));
    }
    if c.map_x_id != c2.map_x_id {
        return Err(Error::MapMismatch(c.map_x_id, c2.map_x_id));
    }
    Ok(c.matrix.dot(&c2.matrix))
}

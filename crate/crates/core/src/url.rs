//! Universal representation learning: joint nonnegative factorization
//! `A ~ UV`, `B ~ WV` with a shared coefficient matrix `V`, a
//! Jensen-Shannon coupling between the data affinities and a Student-t
//! kernel over the columns of `V`, orthogonal projections into the shared
//! space and nearest-prototype zero-shot prediction.
//!
//! Matrices follow the column-per-sample convention: `A` is `M1 x N`, `B`
//! is `M2 x N`, `V` is `D x N`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Floor applied to normalized entries, kernel values and update
/// denominators.
pub const FLOOR: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: usize = 1000;
pub const DEFAULT_TOL: f64 = 1e-6;

/// A finite, elementwise nonnegative matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DataMatrix(DMatrix<f64>);

impl DataMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() == 0 || m.ncols() == 0 {
            return Err(Error::invalid("data matrix must be non-empty"));
        }
        if let Some(v) = m.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!("data matrix entry {v} is not a finite nonnegative value")));
        }
        Ok(Self(m))
    }

    /// Builds from row-major values.
    pub fn from_rows(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape(format!("{rows}x{cols} = {} values", rows * cols), values.len()));
        }
        Self::new(DMatrix::from_row_slice(rows, cols, values))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }
}

/// Normalized symmetrized cross-entropy affinities between the columns of
/// `x`. Off-diagonal entries sum to 1; the diagonal is 0.
pub fn pairwise_affinity(x: &DataMatrix) -> Result<DMatrix<f64>> {
    let m = x.matrix();
    let n = m.ncols();
    if n < 2 {
        return Err(Error::invalid("affinities need at least 2 columns"));
    }
    let mut normalized = m.clone();
    for (j, mut col) in normalized.column_iter_mut().enumerate() {
        let sum: f64 = col.sum();
        if sum <= 0.0 {
            return Err(Error::invalid(format!("column {j} is all zero")));
        }
        col.iter_mut().for_each(|v| *v = (*v / sum).max(FLOOR));
    }
    let logs = normalized.map(f64::ln);
    // h[(i, j)] = H(x_i, x_j) = -sum_r x_i[r] ln x_j[r]
    let h = -(normalized.transpose() * &logs);
    let mut g = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 0.5 * (h[(i, j)] + h[(j, i)]) });
    let total = g.sum();
    g /= total;
    Ok(g)
}

/// Student-t kernel `(1 + |v_i - v_j|^2)^-1` with a zero diagonal.
pub fn kernel(v: &DMatrix<f64>) -> DMatrix<f64> {
    let n = v.ncols();
    let norms: Vec<f64> = v.column_iter().map(|c| c.norm_squared()).collect();
    let gram = v.transpose() * v;
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            1.0 / (1.0 + (norms[i] + norms[j] - 2.0 * gram[(i, j)]).max(0.0))
        }
    })
}

/// Normalized Student-t affinities between the columns of `v`.
pub fn q_matrix(v: &DMatrix<f64>) -> DMatrix<f64> {
    let k = kernel(v);
    let total = k.sum();
    k / total
}

fn kl_to(p: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    p.iter()
        .zip(q.iter())
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(FLOOR).ln()))
        .sum()
}

/// `KL(P_A || Q) / 2 + KL(P_B || Q) / 2`, the coupling term of the objective.
pub fn jsd(pa: &DMatrix<f64>, pb: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    0.5 * kl_to(pa, q) + 0.5 * kl_to(pb, q)
}

/// Jensen-Shannon divergence against the midpoint `(P + Q) / 2`; bounded
/// by `ln 2` for distributions.
pub fn jsd_midpoint(p: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    let mid = (p + q) * 0.5;
    0.5 * kl_to(p, &mid) + 0.5 * kl_to(q, &mid)
}

fn check_shapes(x: &DMatrix<f64>, basis: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<()> {
    if basis.nrows() != x.nrows() || basis.ncols() != v.nrows() || v.ncols() != x.ncols() {
        return Err(Error::shape(
            format!("{}x{} data = ({}xD)(Dx{})", x.nrows(), x.ncols(), x.nrows(), x.ncols()),
            format!("({}x{})({}x{})", basis.nrows(), basis.ncols(), v.nrows(), v.ncols()),
        ));
    }
    Ok(())
}

/// Multiplicative update of a basis: `U * (X V^T) / (U V V^T + floor)`.
pub fn update_basis(x: &DMatrix<f64>, basis: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_shapes(x, basis, v)?;
    let num = x * v.transpose();
    let den = basis * (v * v.transpose());
    Ok(DMatrix::from_fn(basis.nrows(), basis.ncols(), |i, j| {
        basis[(i, j)] * num[(i, j)] / (den[(i, j)] + FLOOR)
    }))
}

pub fn update_u(a: &DMatrix<f64>, u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    update_basis(a, u, v)
}

pub fn update_w(b: &DMatrix<f64>, w: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    update_basis(b, w, v)
}

/// Fixed pairwise affinities of the two data matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Affinities {
    pub pa: DMatrix<f64>,
    pub pb: DMatrix<f64>,
}

impl Affinities {
    pub fn new(a: &DataMatrix, b: &DataMatrix) -> Result<Self> {
        Ok(Self {
            pa: pairwise_affinity(a)?,
            pb: pairwise_affinity(b)?,
        })
    }
}

/// Multiplicative update of the shared coefficients. With `eta = 0` this is
/// the joint NMF rule.
pub fn update_v(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    u: &DMatrix<f64>,
    w: &DMatrix<f64>,
    v: &DMatrix<f64>,
    eta: f64,
    affinities: Option<&Affinities>,
) -> Result<DMatrix<f64>> {
    check_shapes(a, u, v)?;
    check_shapes(b, w, v)?;
    let mut num = u.transpose() * a + w.transpose() * b;
    let mut den = (u.transpose() * u) * v + (w.transpose() * w) * v;
    if eta > 0.0 {
        let aff = affinities.ok_or_else(|| Error::invalid("eta > 0 needs data affinities"))?;
        if aff.pa.nrows() != v.ncols() {
            return Err(Error::shape(format!("{0}x{0} affinities", v.ncols()), aff.pa.nrows()));
        }
        let k = kernel(v);
        let q = &k / k.sum();
        let ms = (&aff.pa + &aff.pb).component_mul(&k);
        let mq = q.component_mul(&k);
        let ms_rows: Vec<f64> = ms.row_iter().map(|r| r.sum()).collect();
        let mq_rows: Vec<f64> = mq.row_iter().map(|r| r.sum()).collect();
        let v_ms = v * &ms;
        let v_mq = v * &mq;
        for j in 0..v.ncols() {
            for i in 0..v.nrows() {
                num[(i, j)] += eta * (v_ms[(i, j)] + 2.0 * v[(i, j)] * mq_rows[j]);
                den[(i, j)] += eta * (v[(i, j)] * ms_rows[j] + 2.0 * v_mq[(i, j)]);
            }
        }
    }
    Ok(DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| {
        v[(i, j)] * num[(i, j)] / (den[(i, j)] + FLOOR)
    }))
}

/// Terms of the fitting objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub total: f64,
    pub residual_a: f64,
    pub residual_b: f64,
    pub jsd: f64,
}

/// `|A - UV|_F^2 + |B - WV|_F^2 + eta * JSD`.
pub fn objective(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    u: &DMatrix<f64>,
    w: &DMatrix<f64>,
    v: &DMatrix<f64>,
    eta: f64,
    affinities: Option<&Affinities>,
) -> Result<Objective> {
    check_shapes(a, u, v)?;
    check_shapes(b, w, v)?;
    let residual_a = (a - u * v).norm_squared();
    let residual_b = (b - w * v).norm_squared();
    let jsd = match (eta > 0.0, affinities) {
        (false, _) => 0.0,
        (true, Some(aff)) => jsd(&aff.pa, &aff.pb, &q_matrix(v)),
        (true, None) => return Err(Error::invalid("eta > 0 needs data affinities")),
    };
    Ok(Objective {
        total: residual_a + residual_b + eta * jsd,
        residual_a,
        residual_b,
        jsd,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Stop when the relative objective change falls below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Factorization {
    pub u: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub eta: f64,
    /// Objective after initialization, then after every iteration.
    pub objective_trace: Vec<f64>,
}

impl Factorization {
    pub fn rank(&self) -> usize {
        self.v.nrows()
    }

    pub fn iterations(&self) -> usize {
        self.objective_trace.len().saturating_sub(1)
    }

    /// `|X - basis V|_F / |X|_F` for `X` in {A, B}.
    pub fn relative_residuals(&self, a: &DataMatrix, b: &DataMatrix) -> (f64, f64) {
        let rel = |x: &DMatrix<f64>, basis: &DMatrix<f64>| (x - basis * &self.v).norm() / x.norm();
        (rel(a.matrix(), &self.u), rel(b.matrix(), &self.w))
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen::<f64>())
}

/// Alternating multiplicative updates from a seeded `Uniform[0, 1]`
/// initialization.
pub fn fit(a: &DataMatrix, b: &DataMatrix, d: usize, eta: f64, opts: &FitOptions) -> Result<Factorization> {
    let n = a.cols();
    if b.cols() != n {
        return Err(Error::shape(format!("{n} samples in B"), b.cols()));
    }
    if d == 0 || d >= a.rows().min(n) || d >= b.rows().min(n) {
        return Err(Error::invalid(format!(
            "rank D={d} must satisfy 0 < D < min(M, N) for both matrices ({}x{n}, {}x{n})",
            a.rows(),
            b.rows()
        )));
    }
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::invalid(format!("eta must be a finite nonnegative value, got {eta}")));
    }
    let affinities = if eta > 0.0 { Some(Affinities::new(a, b)?) } else { None };
    let aff = affinities.as_ref();
    let (am, bm) = (a.matrix(), b.matrix());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut u = uniform(&mut rng, a.rows(), d);
    let mut w = uniform(&mut rng, b.rows(), d);
    let mut v = uniform(&mut rng, d, n);
    let mut trace = vec![objective(am, bm, &u, &w, &v, eta, aff)?.total];
    for _ in 0..opts.max_iter {
        u = update_u(am, &u, &v)?;
        w = update_w(bm, &w, &v)?;
        v = update_v(am, bm, &u, &w, &v, eta, aff)?;
        let current = objective(am, bm, &u, &w, &v, eta, aff)?.total;
        if !current.is_finite() {
            return Err(Error::Numeric(format!("objective became {current} after {} iterations", trace.len())));
        }
        let previous = *trace.last().expect("trace is non-empty");
        trace.push(current);
        if (previous - current).abs() <= opts.tol * previous.abs().max(FLOOR) {
            break;
        }
    }
    Ok(Factorization {
        u,
        w,
        v,
        eta,
        objective_trace: trace,
    })
}

/// Rows-orthonormal `P` minimizing `|P X - V|_F`.
#[derive(Clone, Debug, PartialEq)]
pub struct Procrustes {
    pub projection: DMatrix<f64>,
    /// Set when `X V^T` is numerically rank deficient, so some rows of `P`
    /// follow the SVD's arbitrary choice of singular directions.
    pub rank_deficient: bool,
}

/// Solves the orthogonal Procrustes problem from the thin SVD of `X V^T`.
pub fn procrustes(x: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<Procrustes> {
    if x.ncols() != v.ncols() {
        return Err(Error::shape(format!("{} samples", x.ncols()), v.ncols()));
    }
    if v.nrows() > x.nrows() {
        return Err(Error::invalid(format!(
            "projection rank D={} exceeds feature dimension M={}",
            v.nrows(),
            x.nrows()
        )));
    }
    let svd = (x * v.transpose()).svd(true, true);
    let s = &svd.singular_values;
    let max = s.max();
    let rank_deficient = max <= 0.0 || s.iter().any(|&si| si <= max * 1e-10);
    let (uu, vt) = (svd.u.expect("requested U"), svd.v_t.expect("requested V^T"));
    Ok(Procrustes {
        projection: vt.transpose() * uu.transpose(),
        rank_deficient,
    })
}

/// Projections of both modalities into the shared space.
#[derive(Clone, Debug, PartialEq)]
pub struct Projections {
    pub pa: DMatrix<f64>,
    pub pb: DMatrix<f64>,
    pub rank_deficient: bool,
}

impl Projections {
    pub fn fit(a: &DataMatrix, b: &DataMatrix, f: &Factorization) -> Result<Self> {
        let pa = procrustes(a.matrix(), &f.v)?;
        let pb = procrustes(b.matrix(), &f.v)?;
        Ok(Self {
            pa: pa.projection,
            pb: pb.projection,
            rank_deficient: pa.rank_deficient || pb.rank_deficient,
        })
    }

    /// Class prototypes `P_B S` from semantic embeddings `S` (`M2 x K`).
    pub fn prototypes(&self, semantic: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if semantic.nrows() != self.pb.ncols() {
            return Err(Error::shape(format!("{} semantic rows", self.pb.ncols()), semantic.nrows()));
        }
        Ok(&self.pb * semantic)
    }

    pub fn predict(&self, test: &DVector<f64>, prototypes: &DMatrix<f64>) -> Result<usize> {
        predict(&self.pa, test, prototypes)
    }
}

/// Index of the prototype column nearest to `projection * test`; ties go to
/// the lowest index.
pub fn predict(projection: &DMatrix<f64>, test: &DVector<f64>, prototypes: &DMatrix<f64>) -> Result<usize> {
    if prototypes.ncols() == 0 {
        return Err(Error::invalid("no prototypes given"));
    }
    if test.len() != projection.ncols() {
        return Err(Error::shape(format!("{}-dim test vector", projection.ncols()), test.len()));
    }
    if prototypes.nrows() != projection.nrows() {
        return Err(Error::shape(format!("{}-dim prototypes", projection.nrows()), prototypes.nrows()));
    }
    let z = projection * test;
    let mut best = (0, f64::INFINITY);
    for (k, col) in prototypes.column_iter().enumerate() {
        let d = (&z - col).norm_squared();
        if d < best.1 {
            best = (k, d);
        }
    }
    Ok(best.0)
}

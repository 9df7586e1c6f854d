//! Numerical primitives shared by every other module: chi-square CDF and
//! quantile, symmetric eigendecomposition, a discrete Lyapunov solver,
//! definiteness checks, and seeded Gaussian sampling.
//!
//! All randomness flows through [`RngStream`]; nothing here touches ambient
//! RNG state, so a run is reproducible from its seed alone.

use nalgebra::{Complex, DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Relative tolerance when validating symmetry of a [`SymMatrix`].
pub const SYMMETRY_TOL: f64 = 1e-12;

/// A validated symmetric real matrix. Storage is exactly symmetrized on
/// construction so downstream solvers can rely on `m[(i,j)] == m[(j,i)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    m: DMatrix<f64>,
}

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(Error::Dimension(format!(
                "symmetric matrix must be square and non-empty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let scale = m.amax().max(1.0);
        for i in 0..m.nrows() {
            for j in (i + 1)..m.ncols() {
                if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::Numerical(format!(
                        "matrix not symmetric at ({i},{j}): {} vs {}",
                        m[(i, j)],
                        m[(j, i)]
                    )));
                }
            }
        }
        let sym = (&m + m.transpose()) * 0.5;
        Ok(SymMatrix { m: sym })
    }

    pub fn identity(dim: usize) -> Self {
        SymMatrix {
            m: DMatrix::identity(dim, dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        SymMatrix {
            m: DMatrix::zeros(dim, dim),
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMatrix {
            m: DMatrix::from_diagonal(&DVector::from_row_slice(diag)),
        }
    }

    /// Scaled identity `s * I_dim`.
    pub fn scaled_identity(dim: usize, s: f64) -> Self {
        SymMatrix {
            m: DMatrix::identity(dim, dim) * s,
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.m
    }

    pub fn trace(&self) -> f64 {
        self.m.trace()
    }

    /// Smallest eigenvalue must exceed `-tol`.
    pub fn is_psd(&self, tol: f64) -> bool {
        sym_eigen(self).min() >= -tol
    }

    /// Smallest eigenvalue must exceed `tol`.
    pub fn is_pd(&self, tol: f64) -> bool {
        sym_eigen(self).min() > tol
    }
}

impl std::ops::Deref for SymMatrix {
    type Target = DMatrix<f64>;
    fn deref(&self) -> &DMatrix<f64> {
        &self.m
    }
}

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted
/// descending and orthonormal eigenvector columns in matching order.
#[derive(Debug, Clone)]
pub struct EigenDecomp {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl EigenDecomp {
    pub fn max(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn min(&self) -> f64 {
        self.eigenvalues[self.eigenvalues.len() - 1]
    }

    /// Rebuild `V diag(lambda) V^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let lam = DMatrix::from_diagonal(&self.eigenvalues);
        &self.eigenvectors * lam * self.eigenvectors.transpose()
    }
}

/// Symmetric eigendecomposition with a descending-eigenvalue contract.
pub fn sym_eigen(m: &SymMatrix) -> EigenDecomp {
    let se = m.as_matrix().clone().symmetric_eigen();
    let n = m.dim();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| se.eigenvalues[j].partial_cmp(&se.eigenvalues[i]).unwrap());
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| se.eigenvalues[i]));
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        eigenvectors.set_column(col, &se.eigenvectors.column(i));
    }
    EigenDecomp {
        eigenvalues,
        eigenvectors,
    }
}

/// Largest eigenvalue magnitude of a (not necessarily symmetric) matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max)
}

fn complex_rank(m: &DMatrix<Complex<f64>>) -> usize {
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return 0;
    }
    let tol = smax * 1e-10 * (m.nrows().max(m.ncols()) as f64);
    svd.singular_values.iter().filter(|&&s| s > tol).count()
}

/// PBH test: `(A, B)` is stabilizable iff `[A - lambda I, B]` has full row
/// rank for every eigenvalue of `A` with `|lambda| >= 1`.
pub fn is_stabilizable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let eigs = a.complex_eigenvalues();
    let ac = a.map(|x| Complex::new(x, 0.0));
    let bc = b.map(|x| Complex::new(x, 0.0));
    for lam in eigs.iter() {
        if lam.norm() < 1.0 - 1e-9 {
            continue;
        }
        let mut test = DMatrix::zeros(n, n + b.ncols());
        let shifted = &ac - DMatrix::from_diagonal_element(n, n, *lam);
        test.view_mut((0, 0), (n, n)).copy_from(&shifted);
        test.view_mut((0, n), (n, b.ncols())).copy_from(&bc);
        if complex_rank(&test) < n {
            return false;
        }
    }
    true
}

/// PBH test for detectability of `(A, C)`, i.e. stabilizability of the dual.
pub fn is_detectable(a: &DMatrix<f64>, c: &DMatrix<f64>) -> bool {
    is_stabilizable(&a.transpose(), &c.transpose())
}

// --- chi-square special functions ------------------------------------------

/// Natural log of the gamma function (Lanczos approximation, |err| < 2e-10).
pub fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for (j, &c) in COEFFS.iter().enumerate() {
        ser += c / (x + 1.0 + j as f64);
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}

const GAMMA_TERM_TOL: f64 = 1e-12;
const GAMMA_MAX_ITER: usize = 500;

/// Regularized lower incomplete gamma P(a, x) by series expansion.
fn gamma_p_series(a: f64, x: f64) -> Result<f64> {
    let mut ap = a;
    let mut sum = 1.0 / a;
    let mut term = sum;
    for _ in 0..GAMMA_MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * GAMMA_TERM_TOL {
            return Ok(sum * (-x + a * x.ln() - ln_gamma(a)).exp());
        }
    }
    Err(Error::NonConvergence(format!(
        "incomplete gamma series stalled at a={a}, x={x}"
    )))
}

/// Regularized upper incomplete gamma Q(a, x) by Lentz continued fraction.
fn gamma_q_cf(a: f64, x: f64) -> Result<f64> {
    const FPMIN: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / FPMIN;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..=GAMMA_MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = b + an / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < GAMMA_TERM_TOL {
            return Ok((-x + a * x.ln() - ln_gamma(a)).exp() * h);
        }
    }
    Err(Error::NonConvergence(format!(
        "incomplete gamma continued fraction stalled at a={a}, x={x}"
    )))
}

/// CDF of the chi-square distribution with `dof` degrees of freedom,
/// `F(x, n) = P(n/2, x/2)`. Series is used for `x < dof + 1`, the continued
/// fraction otherwise.
pub fn chi_square_cdf(x: f64, dof: u32) -> Result<f64> {
    if dof < 1 {
        return Err(Error::Domain(format!("chi-square dof must be >= 1, got {dof}")));
    }
    if !x.is_finite() || x < 0.0 {
        return Err(Error::Domain(format!("chi-square argument must be >= 0, got {x}")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    let a = dof as f64 / 2.0;
    let xg = x / 2.0;
    let p = if x < dof as f64 + 1.0 {
        gamma_p_series(a, xg)?
    } else {
        1.0 - gamma_q_cf(a, xg)?
    };
    Ok(p.clamp(0.0, 1.0))
}

fn chi_square_log_pdf(x: f64, dof: u32) -> f64 {
    let a = dof as f64 / 2.0;
    (a - 1.0) * x.ln() - x / 2.0 - a * std::f64::consts::LN_2 - ln_gamma(a)
}

/// Inverse chi-square CDF on `p in [0, 1)`: bracketed bisection refined with
/// Newton steps, 200-iteration cap.
pub fn chi_square_quantile(p: f64, dof: u32) -> Result<f64> {
    if dof < 1 {
        return Err(Error::Domain(format!("chi-square dof must be >= 1, got {dof}")));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Domain(format!(
            "quantile probability must lie in [0, 1), got {p}"
        )));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    let n = dof as f64;
    let mut hi = n + 10.0 * (2.0 * n).sqrt() + 10.0;
    let mut iters = 0usize;
    while chi_square_cdf(hi, dof)? < p {
        hi *= 2.0;
        iters += 1;
        if iters > 60 {
            return Err(Error::NonConvergence(format!(
                "quantile bracket failed for p={p}, dof={dof}"
            )));
        }
    }
    let mut lo = 0.0;
    let mut x = 0.5 * hi;
    for _ in 0..140 {
        if chi_square_cdf(x, dof)? > p {
            hi = x;
        } else {
            lo = x;
        }
        x = 0.5 * (lo + hi);
        if hi - lo < 1e-12 * hi.max(1.0) {
            break;
        }
    }
    // Newton polish; bisection already landed inside the basin.
    for _ in 0..(200 - 140) {
        let f = chi_square_cdf(x, dof)? - p;
        if f.abs() < 1e-15 {
            break;
        }
        let step = f / chi_square_log_pdf(x, dof).exp();
        let next = x - step;
        if next <= lo || next >= hi {
            break;
        }
        x = next;
    }
    Ok(x)
}

// --- discrete Lyapunov ------------------------------------------------------

/// Solve `X = F X F^T + W` for stable `F` by squared-iterate accumulation.
/// Errors when the spectral radius of `F` is not strictly inside the unit
/// circle or the residual fails to reach `1e-9 * max(1, ||X||)`.
pub fn solve_discrete_lyapunov(f: &DMatrix<f64>, w: &SymMatrix) -> Result<SymMatrix> {
    let n = f.nrows();
    if !f.is_square() || w.dim() != n {
        return Err(Error::Dimension(format!(
            "lyapunov operands disagree: F is {}x{}, W is {}x{}",
            f.nrows(),
            f.ncols(),
            w.dim(),
            w.dim()
        )));
    }
    let rho = spectral_radius(f);
    if rho >= 1.0 - 1e-9 {
        return Err(Error::NonConvergence(format!(
            "lyapunov requires spectral radius < 1, got {rho:.12}"
        )));
    }
    let mut x = w.as_matrix().clone();
    let mut fk = f.clone();
    for _ in 0..200 {
        let next = &x + &fk * &x * fk.transpose();
        let delta = (&next - &x).amax();
        x = next;
        fk = &fk * &fk;
        if delta <= 1e-16 * x.amax().max(1.0) && fk.amax() < 1e-40 {
            break;
        }
    }
    let resid = (&x - f * &x * f.transpose() - w.as_matrix()).amax();
    if resid > 1e-9 * x.amax().max(1.0) {
        return Err(Error::NonConvergence(format!(
            "lyapunov residual {resid:.3e} above tolerance"
        )));
    }
    SymMatrix::new((&x + x.transpose()) * 0.5)
}

// --- seeded randomness ------------------------------------------------------

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// A splittable deterministic random stream. Substreams are derived from the
/// root seed and a label, so concurrent consumers never share state.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent child stream; same (seed, label) always yields
    /// the same stream.
    pub fn substream(&self, label: u64) -> RngStream {
        RngStream::new(splitmix64(self.seed ^ splitmix64(label.wrapping_add(0xa076_1d64_78bd_642f))))
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller.
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn standard_normal_vector(&mut self, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| self.standard_normal())
    }

    pub fn gen_range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.gen_range(lo..hi)
    }
}

/// Reusable Gaussian sampler with a precomputed covariance factor
/// (eigenvalue square root, tolerant of semidefinite covariances).
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn new(mean: DVector<f64>, cov: &SymMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::Dimension(format!(
                "gaussian mean has len {}, covariance dim {}",
                mean.len(),
                cov.dim()
            )));
        }
        let eig = sym_eigen(cov);
        if eig.min() < -1e-10 {
            return Err(Error::Numerical(format!(
                "covariance has negative eigenvalue {:.3e}",
                eig.min()
            )));
        }
        let sqrt_lam =
            DMatrix::from_diagonal(&eig.eigenvalues.map(|l| if l > 0.0 { l.sqrt() } else { 0.0 }));
        let factor = &eig.eigenvectors * sqrt_lam;
        Ok(GaussianSampler { mean, factor })
    }

    pub fn draw(&self, rng: &mut RngStream) -> DVector<f64> {
        let z = rng.standard_normal_vector(self.mean.len());
        &self.mean + &self.factor * z
    }
}

/// One-shot draw from `N(mean, cov)`.
pub fn sample_gaussian(
    mean: &DVector<f64>,
    cov: &SymMatrix,
    rng: &mut RngStream,
) -> Result<DVector<f64>> {
    Ok(GaussianSampler::new(mean.clone(), cov)?.draw(rng))
}

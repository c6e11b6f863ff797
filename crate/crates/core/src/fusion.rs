//! Latent region representation learning.
//!
//! Jointly factorizes the masked POI matrix `P ≈ U V`, projects the activity
//! pattern matrix into a latent transition space `Z ≈ Q T`, ties `Z` to the
//! latent POI features through sparse coefficients `Z ≈ Uᵀ A`, and regresses
//! `V ≈ W Z`:
//!
//! ```text
//! ½‖I∘(P−UV)‖² + λ1/2‖QT−Z‖² + λ2/2‖Z−UᵀA‖² + λ3‖A‖₁ + λ4/2‖V−WZ‖²
//!     + λ5/2 (‖U‖² + ‖V‖² + ‖Q‖² + ‖W‖²)
//! ```
//!
//! The solver runs block gradient steps in the order U, V, Q, Z, A, W with a
//! proximal (soft-threshold) step for `A`, then decays the step size.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, MatrixShape};
use crate::sparse::SparseMatrix;

/// Whether each block update sees the blocks already updated this iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrder {
    #[default]
    GaussSeidel,
    Jacobi,
}

impl FromStr for UpdateOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss_seidel" => Ok(UpdateOrder::GaussSeidel),
            "jacobi" => Ok(UpdateOrder::Jacobi),
            _ => Err(Error::Config(format!("update must be `gauss_seidel` or `jacobi`, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    /// Latent dimension.
    pub k: usize,
    pub alpha0: f64,
    /// Per-iteration step decay, in (0, 1].
    pub rho: f64,
    /// Stop once the objective decreases by no more than this.
    pub epsilon: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Standard deviation of the Gaussian initialization.
    pub init_std: f64,
    pub update: UpdateOrder,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.1,
            lambda4: 1.0,
            lambda5: 0.01,
            k: 10,
            alpha0: 1e-3,
            rho: 0.999,
            epsilon: 1e-8,
            max_iter: 2000,
            seed: 0,
            init_std: 0.1,
            update: UpdateOrder::GaussSeidel,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config("lambda1..lambda5 must be finite and nonnegative".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("latent dimension k must be at least 1".into()));
        }
        if !(self.alpha0.is_finite() && self.alpha0 > 0.0) {
            return Err(Error::Config("alpha0 must be positive".into()));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config("rho must lie in (0, 1]".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config("epsilon must be nonnegative".into()));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::Config("init_std must be nonnegative".into()));
        }
        Ok(())
    }
}

/// The inputs of the objective: POI matrix, its 0/1 mask, and the activity pattern matrix.
#[derive(Debug, Clone)]
pub struct FusionInput {
    pub p: DMatrix<f64>,
    pub mask: DMatrix<f64>,
    pub t: SparseMatrix,
}

impl FusionInput {
    pub fn new(p: DMatrix<f64>, mask: DMatrix<f64>, t: SparseMatrix) -> Result<Self> {
        if p.shape() != mask.shape() {
            return Err(Error::Shape(format!("P is {:?} but mask is {:?}", p.shape(), mask.shape())));
        }
        if t.ncols() != p.ncols() {
            return Err(Error::Shape(format!("P has {} regions but T has {}", p.ncols(), t.ncols())));
        }
        Ok(FusionInput { p, mask, t })
    }

    pub fn categories(&self) -> usize {
        self.p.nrows()
    }

    pub fn regions(&self) -> usize {
        self.p.ncols()
    }

    pub fn patterns(&self) -> usize {
        self.t.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentFactors {
    /// Latent POI features, `p × k`.
    pub u: DMatrix<f64>,
    /// Latent region representation, `k × r`.
    pub v: DMatrix<f64>,
    /// Pattern transform, `k × q`.
    pub q: DMatrix<f64>,
    /// Latent transition patterns, `k × r`.
    pub z: DMatrix<f64>,
    /// Sparse coefficients, `p × r`.
    pub a: DMatrix<f64>,
    /// Regression from transition patterns to regions, `k × k`.
    pub w: DMatrix<f64>,
}

impl LatentFactors {
    pub fn zeros(p: usize, r: usize, q: usize, k: usize) -> Self {
        LatentFactors {
            u: DMatrix::zeros(p, k),
            v: DMatrix::zeros(k, r),
            q: DMatrix::zeros(k, q),
            z: DMatrix::zeros(k, r),
            a: DMatrix::zeros(p, r),
            w: DMatrix::zeros(k, k),
        }
    }

    /// i.i.d. `N(0, std²)` entries, drawn in the order U, V, Q, Z, A, W.
    pub fn random(p: usize, r: usize, q: usize, k: usize, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut draw = |rows, cols| DMatrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng));
        LatentFactors {
            u: draw(p, k),
            v: draw(k, r),
            q: draw(k, q),
            z: draw(k, r),
            a: draw(p, r),
            w: draw(k, k),
        }
    }

    pub fn k(&self) -> usize {
        self.w.nrows()
    }

    fn check(&self, input: &FusionInput) -> Result<()> {
        let (p, r, q, k) = (input.categories(), input.regions(), input.patterns(), self.k());
        let expected = [
            ("U", self.u.shape(), (p, k)),
            ("V", self.v.shape(), (k, r)),
            ("Q", self.q.shape(), (k, q)),
            ("Z", self.z.shape(), (k, r)),
            ("A", self.a.shape(), (p, r)),
            ("W", self.w.shape(), (k, k)),
        ];
        for (name, got, want) in expected {
            if got != want {
                return Err(Error::Shape(format!("{name} is {got:?}, expected {want:?}")));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        [&self.u, &self.v, &self.q, &self.z, &self.a, &self.w]
            .iter()
            .all(|m| m.iter().all(|x| x.is_finite()))
    }

    fn blocks(&self) -> [(&'static str, &DMatrix<f64>); 6] {
        [
            ("U", &self.u),
            ("V", &self.v),
            ("Q", &self.q),
            ("Z", &self.z),
            ("A", &self.a),
            ("W", &self.w),
        ]
    }

    /// Writes one little-endian row-major `.bin` per factor plus `factors.json` with the shapes.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut shapes = std::collections::BTreeMap::new();
        for (name, m) in self.blocks() {
            shapes.insert(name.to_string(), io::write_dense(&dir.join(format!("{name}.bin")), m)?);
        }
        io::write_json(&dir.join("factors.json"), &shapes)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let shapes: std::collections::BTreeMap<String, MatrixShape> = io::read_json(&dir.join("factors.json"))?;
        let load = |name: &str| {
            let shape = shapes
                .get(name)
                .ok_or_else(|| Error::Data(format!("factors.json lacks {name}")))?;
            io::read_dense(&dir.join(format!("{name}.bin")), shape)
        };
        Ok(LatentFactors {
            u: load("U")?,
            v: load("V")?,
            q: load("Q")?,
            z: load("Z")?,
            a: load("A")?,
            w: load("W")?,
        })
    }
}

/// `sign(x) · max(|x| − θ, 0)`.
pub fn soft_threshold(x: f64, theta: f64) -> f64 {
    if x > theta {
        x - theta
    } else if x < -theta {
        x + theta
    } else {
        0.0
    }
}

pub fn soft_threshold_matrix(m: &DMatrix<f64>, theta: f64) -> DMatrix<f64> {
    m.map(|x| soft_threshold(x, theta))
}

/// The six terms of the objective, already weighted.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub reconstruction: f64,
    pub transform: f64,
    pub z_reconstruction: f64,
    pub l1: f64,
    pub regression: f64,
    pub ridge: f64,
}

impl ObjectiveTerms {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.transform + self.z_reconstruction + self.l1 + self.regression + self.ridge
    }

    /// Everything but the L1 penalty.
    pub fn smooth(&self) -> f64 {
        self.total() - self.l1
    }

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.reconstruction,
            self.transform,
            self.z_reconstruction,
            self.l1,
            self.regression,
            self.ridge,
        ]
    }
}

struct Residuals {
    /// I ∘ (P − UV)
    masked: DMatrix<f64>,
    /// QT − Z
    transform: DMatrix<f64>,
    /// Z − UᵀA
    coupling: DMatrix<f64>,
    /// V − WZ
    regression: DMatrix<f64>,
}

fn masked_residual(f: &LatentFactors, x: &FusionInput) -> DMatrix<f64> {
    (&x.p - &f.u * &f.v).component_mul(&x.mask)
}

fn transform_residual(f: &LatentFactors, x: &FusionInput) -> DMatrix<f64> {
    x.t.left_mul(&f.q).expect("checked shapes") - &f.z
}

fn coupling_residual(f: &LatentFactors) -> DMatrix<f64> {
    &f.z - f.u.tr_mul(&f.a)
}

fn regression_residual(f: &LatentFactors) -> DMatrix<f64> {
    &f.v - &f.w * &f.z
}

fn residuals(f: &LatentFactors, x: &FusionInput) -> Residuals {
    Residuals {
        masked: masked_residual(f, x),
        transform: transform_residual(f, x),
        coupling: coupling_residual(f),
        regression: regression_residual(f),
    }
}

pub fn objective(f: &LatentFactors, x: &FusionInput, h: &Hyperparams) -> Result<ObjectiveTerms> {
    f.check(x)?;
    let res = residuals(f, x);
    Ok(ObjectiveTerms {
        reconstruction: 0.5 * res.masked.norm_squared(),
        transform: 0.5 * h.lambda1 * res.transform.norm_squared(),
        z_reconstruction: 0.5 * h.lambda2 * res.coupling.norm_squared(),
        l1: h.lambda3 * f.a.iter().map(|v| v.abs()).sum::<f64>(),
        regression: 0.5 * h.lambda4 * res.regression.norm_squared(),
        ridge: 0.5
            * h.lambda5
            * (f.u.norm_squared() + f.v.norm_squared() + f.q.norm_squared() + f.w.norm_squared()),
    })
}

/// Gradients of the smooth part of the objective (the L1 term is handled by the prox step).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub w: DMatrix<f64>,
}

fn grad_u(f: &LatentFactors, x: &FusionInput, h: &Hyperparams) -> DMatrix<f64> {
    let r = masked_residual(f, x);
    let e2 = coupling_residual(f);
    -(r * f.v.transpose()) - h.lambda2 * (&f.a * e2.transpose()) + h.lambda5 * &f.u
}

fn grad_v(f: &LatentFactors, x: &FusionInput, h: &Hyperparams) -> DMatrix<f64> {
    let r = masked_residual(f, x);
    -f.u.tr_mul(&r) + h.lambda4 * regression_residual(f) + h.lambda5 * &f.v
}

fn grad_q(f: &LatentFactors, x: &FusionInput, h: &Hyperparams) -> DMatrix<f64> {
    let e1 = transform_residual(f, x);
    h.lambda1 * x.t.left_mul_transpose(&e1).expect("checked shapes") + h.lambda5 * &f.q
}

fn grad_z(f: &LatentFactors, x: &FusionInput, h: &Hyperparams) -> DMatrix<f64> {
    let e1 = transform_residual(f, x);
    -h.lambda1 * e1 + h.lambda2 * coupling_residual(f) - h.lambda4 * f.w.tr_mul(&regression_residual(f))
}

fn grad_a(f: &LatentFactors, h: &Hyperparams) -> DMatrix<f64> {
    -h.lambda2 * (&f.u * coupling_residual(f))
}

fn grad_w(f: &LatentFactors, h: &Hyperparams) -> DMatrix<f64> {
    -h.lambda4 * (regression_residual(f) * f.z.transpose()) + h.lambda5 * &f.w
}

pub fn gradients(f: &LatentFactors, x: &FusionInput, h: &Hyperparams) -> Result<Gradients> {
    f.check(x)?;
    Ok(Gradients {
        u: grad_u(f, x, h),
        v: grad_v(f, x, h),
        q: grad_q(f, x, h),
        z: grad_z(f, x, h),
        a: grad_a(f, h),
        w: grad_w(f, h),
    })
}

fn prox_a(a: &DMatrix<f64>, grad: &DMatrix<f64>, alpha: f64, h: &Hyperparams) -> DMatrix<f64> {
    soft_threshold_matrix(&(a - alpha * grad), alpha * h.lambda3)
}

/// One full iteration of block updates with step size `alpha`.
pub fn step(f: &mut LatentFactors, x: &FusionInput, h: &Hyperparams, alpha: f64) -> Result<()> {
    f.check(x)?;
    match h.update {
        UpdateOrder::GaussSeidel => {
            f.u -= alpha * grad_u(f, x, h);
            f.v -= alpha * grad_v(f, x, h);
            f.q -= alpha * grad_q(f, x, h);
            f.z -= alpha * grad_z(f, x, h);
            f.a = prox_a(&f.a, &grad_a(f, h), alpha, h);
            f.w -= alpha * grad_w(f, h);
        }
        UpdateOrder::Jacobi => {
            let g = gradients(f, x, h)?;
            f.u -= alpha * g.u;
            f.v -= alpha * g.v;
            f.q -= alpha * g.q;
            f.z -= alpha * g.z;
            f.a = prox_a(&f.a, &g.a, alpha, h);
            f.w -= alpha * g.w;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    /// The objective decreased by no more than epsilon.
    Converged,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::MaxIterations => "max_iterations",
            StopReason::Converged => "converged",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub terms: ObjectiveTerms,
    /// Step size used to reach this iterate (the initial step for iteration 0).
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitTrace {
    /// Iteration 0 is the initialization.
    pub records: Vec<TraceRecord>,
    pub iterations: usize,
    pub stop_reason: StopReason,
}

impl FitTrace {
    pub fn objectives(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.terms.total()).collect()
    }

    /// `iter,total,term1..term6,alpha`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "iter", "total", "term1", "term2", "term3", "term4", "term5", "term6", "alpha",
        ])?;
        for r in &self.records {
            let mut row = vec![r.iter.to_string(), r.terms.total().to_string()];
            row.extend(r.terms.as_array().iter().map(|v| v.to_string()));
            row.push(r.alpha.to_string());
            wtr.write_record(&row)?;
        }
        wtr.flush().map_err(|e| Error::io("trace.csv", e))
    }
}

/// Runs the block solver from a seeded Gaussian initialization.
pub fn fit(x: &FusionInput, h: &Hyperparams) -> Result<(LatentFactors, FitTrace)> {
    h.validate()?;
    let init = LatentFactors::random(x.categories(), x.regions(), x.patterns(), h.k, h.init_std, h.seed);
    fit_from(init, x, h)
}

pub fn fit_from(mut f: LatentFactors, x: &FusionInput, h: &Hyperparams) -> Result<(LatentFactors, FitTrace)> {
    h.validate()?;
    let mut alpha = h.alpha0;
    let mut prev = objective(&f, x, h)?;
    let mut records = vec![TraceRecord {
        iter: 0,
        terms: prev,
        alpha,
    }];
    let mut stop_reason = StopReason::MaxIterations;
    for it in 1..=h.max_iter {
        step(&mut f, x, h, alpha)?;
        let terms = objective(&f, x, h)?;
        records.push(TraceRecord { iter: it, terms, alpha });
        if !terms.total().is_finite() || !f.is_finite() {
            return Err(Error::Divergence(format!(
                "objective became non-finite at iteration {it} with step {alpha:e}; try a smaller alpha0"
            )));
        }
        let decrease = prev.total() - terms.total();
        prev = terms;
        alpha *= h.rho;
        if decrease < -h.epsilon {
            log::warn!("objective increased by {:.3e} at iteration {it}", -decrease);
        } else if decrease <= h.epsilon {
            stop_reason = StopReason::Converged;
            break;
        }
    }
    let iterations = records.len() - 1;
    log::debug!(
        "fit stopped after {iterations} iterations ({stop_reason}), objective {:.6e}",
        prev.total()
    );
    Ok((
        f,
        FitTrace {
            records,
            iterations,
            stop_reason,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn soft_threshold_examples() {
        assert!((soft_threshold(1.2, 0.5) - 0.7).abs() < 1e-15);
        assert_eq!(soft_threshold(-0.3, 0.5), 0.0);
        assert_eq!(soft_threshold(-1.5, 0.5), -1.0);
        assert_eq!(soft_threshold(0.37, 0.0), 0.37);
    }

    fn tiny_input(p: usize, r: usize, q: usize) -> FusionInput {
        FusionInput::new(DMatrix::zeros(p, r), DMatrix::from_element(p, r, 1.0), SparseMatrix::zeros(q, r)).unwrap()
    }

    #[test]
    fn zero_problem_has_zero_objective_and_gradients() {
        let x = tiny_input(3, 4, 5);
        let f = LatentFactors::zeros(3, 4, 5, 2);
        let h = Hyperparams::default();
        assert_eq!(objective(&f, &x, &h).unwrap().total(), 0.0);
        let g = gradients(&f, &x, &h).unwrap();
        for m in [&g.u, &g.v, &g.q, &g.z, &g.a, &g.w] {
            assert!(m.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn ridge_only_value() {
        let x = tiny_input(1, 1, 1);
        let mut f = LatentFactors::zeros(1, 1, 1, 1);
        f.u[(0, 0)] = 3.0;
        let h = Hyperparams {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
            lambda5: 2.0,
            ..Hyperparams::default()
        };
        let terms = objective(&f, &x, &h).unwrap();
        assert_eq!(terms.total(), 9.0);
        assert_eq!(terms.ridge, 9.0);
    }

    #[test]
    fn isolated_u_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = DMatrix::from_fn(4, 6, |_, _| rng.random_range(0.0..3.0));
        let x = FusionInput::new(p.clone(), DMatrix::from_element(4, 6, 1.0), SparseMatrix::zeros(2, 6)).unwrap();
        let f = LatentFactors::random(4, 6, 2, 3, 0.5, 9);
        let h = Hyperparams {
            lambda1: 1.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
            lambda5: 0.0,
            ..Hyperparams::default()
        };
        let g = gradients(&f, &x, &h).unwrap();
        let expected = -(&p - &f.u * &f.v) * f.v.transpose();
        assert_eq!(g.u, expected);
    }

    #[test]
    fn prox_step_with_no_coupling_is_soft_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = DMatrix::from_fn(3, 4, |_, _| rng.random_range(0.0..2.0));
        let x = FusionInput::new(p, DMatrix::from_element(3, 4, 1.0), SparseMatrix::zeros(2, 4)).unwrap();
        let mut f = LatentFactors::random(3, 4, 2, 2, 0.3, 1);
        let before = f.a.clone();
        let h = Hyperparams {
            lambda2: 0.0,
            lambda3: 0.7,
            ..Hyperparams::default()
        };
        step(&mut f, &x, &h, 0.1).unwrap();
        assert_eq!(f.a, soft_threshold_matrix(&before, 0.1 * 0.7));
    }

    #[test]
    fn shape_errors() {
        let x = tiny_input(3, 4, 5);
        let f = LatentFactors::zeros(3, 5, 5, 2);
        assert!(matches!(objective(&f, &x, &Hyperparams::default()), Err(Error::Shape(_))));
        assert!(FusionInput::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 3), SparseMatrix::zeros(1, 2)).is_err());
        assert!(FusionInput::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 2), SparseMatrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = DMatrix::from_fn(3, 4, |_, _| rng.random_range(0.0..5.0));
        let x = FusionInput::new(p, DMatrix::from_element(3, 4, 1.0), SparseMatrix::zeros(2, 4)).unwrap();
        let h = Hyperparams {
            alpha0: 50.0,
            rho: 1.0,
            max_iter: 200,
            k: 2,
            ..Hyperparams::default()
        };
        assert!(matches!(fit(&x, &h), Err(Error::Divergence(_))));
    }

    #[test]
    fn factors_round_trip() {
        let f = LatentFactors::random(3, 4, 5, 2, 1.0, 4);
        let dir = tempfile::tempdir().unwrap();
        f.write(dir.path()).unwrap();
        assert_eq!(LatentFactors::read(dir.path()).unwrap(), f);
    }

    #[test]
    fn hyperparam_validation() {
        assert!(Hyperparams { k: 0, ..Default::default() }.validate().is_err());
        assert!(Hyperparams { rho: 1.5, ..Default::default() }.validate().is_err());
        assert!(Hyperparams { lambda3: -1.0, ..Default::default() }.validate().is_err());
        assert!(Hyperparams::default().validate().is_ok());
    }
}

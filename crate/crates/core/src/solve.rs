//! Regularized normal-equation solves.
//!
//! Every system here has the form
//!
//! ```text
//! (Σ_l w_l K_lᵀ K_l + λ A M̃⁻¹ A) c = rhs
//! ```
//!
//! and is solved matrix-free, either by Jacobi-preconditioned conjugate
//! gradients on the Gram operator or, for a single operator, by CGLS on the
//! stacked least-squares system `[K; √λ M̃^{-1/2} A] c ≈ [b; 0]`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{Coefficients, FemSystem};
use crate::operator::ForwardOperator;

pub const DEFAULT_TOL: f64 = 1e-10;
/// Default iteration cap, as a multiple of the unknown count.
pub const DEFAULT_MAX_ITER_FACTOR: usize = 10;
/// True residual is recomputed this often to stop recurrence drift.
const RESIDUAL_REFRESH: usize = 50;
const ROUNDING_FLOOR: f64 = 8.0;
const POWER_STEPS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveMethod {
    #[serde(rename = "CG")]
    Cg,
    #[serde(rename = "SparseLSQ")]
    SparseLsq,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub relative_residual: f64,
    pub method: SolveMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    /// `None` means `10·(d·κ)`.
    pub max_iter: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: DEFAULT_TOL, max_iter: None }
    }
}

impl SolverOptions {
    pub fn with_tol(tol: f64) -> Self {
        SolverOptions { tol, max_iter: None }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig(format!("solver tolerance must be positive, got {}", self.tol)));
        }
        Ok(())
    }

    fn cap(&self, n: usize) -> usize {
        self.max_iter.unwrap_or(DEFAULT_MAX_ITER_FACTOR * n.max(1))
    }
}

/// `Σ_l w_l K_lᵀ K_l + λ P` with `P` the lumped penalty.
#[derive(Debug, Clone)]
pub struct GramOperator<'a> {
    terms: Vec<(f64, &'a ForwardOperator)>,
    fem: &'a FemSystem,
    lambda: f64,
}

impl<'a> GramOperator<'a> {
    pub fn new(terms: Vec<(f64, &'a ForwardOperator)>, fem: &'a FemSystem, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidConfig(format!("lambda must be finite and nonnegative, got {lambda}")));
        }
        let dim = fem.dim();
        let mut sensors = None;
        for (w, k) in &terms {
            if !(*w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidConfig(format!("term weight must be finite and nonnegative, got {w}")));
            }
            k.check_domain(dim)?;
            match sensors {
                None => sensors = Some(k.rows()),
                Some(s) if s != k.rows() => {
                    return Err(Error::DimensionMismatch(format!(
                        "operators disagree on sensor count: {s} vs {}",
                        k.rows()
                    )))
                }
                _ => {}
            }
        }
        if lambda == 0.0 && terms.iter().all(|(w, _)| *w == 0.0) {
            return Err(Error::SingularSystem("all term weights are zero and lambda = 0".into()));
        }
        Ok(GramOperator { terms, fem, lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn fem(&self) -> &FemSystem {
        self.fem
    }

    pub fn dim(&self) -> usize {
        self.fem.dim()
    }

    fn active_terms(&self) -> impl Iterator<Item = &(f64, &'a ForwardOperator)> {
        self.terms.iter().filter(|(w, _)| *w > 0.0)
    }

    pub fn apply(&self, c: &Coefficients) -> Coefficients {
        let mut out = if self.lambda > 0.0 {
            crate::fem::penalty_apply(self.fem, c).expect("length checked by caller") * self.lambda
        } else {
            DVector::zeros(c.len())
        };
        for (w, k) in self.active_terms() {
            out.axpy(*w, &k.apply_t(&k.apply(c)), 1.0);
        }
        out
    }

    /// Jacobi diagonal: `Σ_l w_l colnorms²(K_l) + λ diag(P)`.
    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = if self.lambda > 0.0 {
            self.fem.penalty_diagonal().into_iter().map(|v| v * self.lambda).collect()
        } else {
            vec![0.0; self.dim()]
        };
        for (w, k) in self.active_terms() {
            for (dj, cn) in d.iter_mut().zip(k.col_norms_sq()) {
                *dj += w * cn;
            }
        }
        d
    }

    /// Rejects systems that are singular for structural reasons: with `λ = 0` the
    /// data term alone must have full column rank; with `λ > 0` it must not
    /// annihilate any per-channel constant vector (the penalty kernel).
    pub fn check_well_posed(&self) -> Result<()> {
        let dim = self.dim();
        if self.lambda == 0.0 {
            let rows: usize = self.active_terms().map(|(_, k)| k.rows()).sum();
            if rows < dim {
                return Err(Error::SingularSystem(format!(
                    "lambda = 0 with {rows} weighted sensor rows for {dim} unknowns"
                )));
            }
            return Ok(());
        }
        let d = self.fem.channels();
        let kappa = self.fem.nodes();
        let mut images: Vec<Vec<DVector<f64>>> = Vec::new();
        let mut weights = Vec::new();
        for (w, k) in self.active_terms() {
            weights.push(*w);
            images.push(
                (0..d)
                    .map(|q| {
                        let mut e = DVector::zeros(dim);
                        e.rows_mut(q * kappa, kappa).fill(1.0);
                        k.apply(&e)
                    })
                    .collect(),
            );
        }
        let mut g = DMatrix::<f64>::zeros(d, d);
        for (w, imgs) in weights.iter().zip(&images) {
            for a in 0..d {
                for b in 0..d {
                    g[(a, b)] += w * imgs[a].dot(&imgs[b]);
                }
            }
        }
        let scale: f64 = self
            .active_terms()
            .map(|(w, k)| w * k.col_norms_sq().iter().sum::<f64>())
            .sum::<f64>()
            * kappa as f64
            / dim.max(1) as f64;
        let min_eig = SymmetricEigen::new(g).eigenvalues.min();
        if !(min_eig > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
            return Err(Error::SingularSystem(
                "data term annihilates a constant vector, which the penalty does not control".into(),
            ));
        }
        Ok(())
    }
}

/// Spectral norm estimate by a few power steps; slightly low, never zero.
fn norm_estimate(gram: &GramOperator<'_>) -> f64 {
    let n = gram.dim();
    let mut v = DVector::from_iterator(n, (0..n).map(|i| 1.0 + ((i * 7919) % 13) as f64 / 13.0));
    let mut est = 0.0;
    for _ in 0..POWER_STEPS {
        v /= v.norm();
        v = gram.apply(&v);
        est = v.norm();
        if est == 0.0 {
            break;
        }
    }
    est.max(f64::MIN_POSITIVE)
}

/// Exact solve on the span of the per-channel constant vectors. With large λ these
/// are the only directions the Jacobi scaling leaves badly conditioned.
struct ConstantCoarse {
    kappa: usize,
    factor: nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>,
}

impl ConstantCoarse {
    fn new(gram: &GramOperator<'_>) -> Option<Self> {
        if gram.lambda == 0.0 {
            return None;
        }
        let d = gram.fem.channels();
        let kappa = gram.fem.nodes();
        let mut e = DMatrix::<f64>::zeros(d, d);
        for q in 0..d {
            let mut z = DVector::zeros(gram.dim());
            z.rows_mut(q * kappa, kappa).fill(1.0);
            let gz = gram.apply(&z);
            for a in 0..d {
                e[(a, q)] = gz.rows(a * kappa, kappa).sum();
            }
        }
        let e = (&e + e.transpose()) * 0.5;
        e.cholesky().map(|factor| Self { kappa, factor })
    }

    fn add_correction(&self, r: &DVector<f64>, z: &mut DVector<f64>) {
        let d = self.factor.l_dirty().nrows();
        let sums = DVector::from_iterator(d, (0..d).map(|q| r.rows(q * self.kappa, self.kappa).sum()));
        let y = self.factor.solve(&sums);
        for q in 0..d {
            z.rows_mut(q * self.kappa, self.kappa).add_scalar_mut(y[q]);
        }
    }
}

/// Solves `(Σ w_l K_lᵀK_l + λ P) c = rhs` by CG, preconditioned with Jacobi
/// scaling plus a coarse correction on the per-channel constants.
pub fn solve_regularized(
    gram: &GramOperator<'_>,
    rhs: &Coefficients,
    opts: SolverOptions,
) -> Result<(Coefficients, SolveReport)> {
    solve_regularized_from(gram, rhs, None, opts)
}

/// [`solve_regularized`] started from `x0` instead of zero.
pub fn solve_regularized_from(
    gram: &GramOperator<'_>,
    rhs: &Coefficients,
    x0: Option<&Coefficients>,
    opts: SolverOptions,
) -> Result<(Coefficients, SolveReport)> {
    opts.validate()?;
    gram.fem.check_len(rhs)?;
    if let Some(x0) = x0 {
        gram.fem.check_len(x0)?;
    }
    gram.check_well_posed()?;
    let n = rhs.len();
    let report = |iterations, relative_residual| SolveReport { iterations, relative_residual, method: SolveMethod::Cg };
    let bnorm = rhs.norm();
    if bnorm == 0.0 {
        return Ok((DVector::zeros(n), report(0, 0.0)));
    }
    let inv_diag: DVector<f64> = DVector::from_iterator(
        n,
        gram.diagonal().into_iter().map(|v| if v > 0.0 { 1.0 / v } else { 1.0 }),
    );
    let coarse = ConstantCoarse::new(gram);
    let precond = |r: &DVector<f64>| {
        let mut z = r.component_mul(&inv_diag);
        if let Some(c) = &coarse {
            c.add_correction(r, &mut z);
        }
        z
    };
    let max_iter = opts.cap(n);
    let target = opts.tol * bnorm;
    // Residual that rounding x alone can produce; asking for less is futile.
    let gnorm = std::cell::OnceCell::new();
    let floor = |x: &DVector<f64>| {
        let g = *gnorm.get_or_init(|| norm_estimate(gram));
        ROUNDING_FLOOR * f64::EPSILON * (g * x.norm() + bnorm)
    };

    let mut x = match x0 {
        Some(x0) if x0.iter().all(|v| v.is_finite()) => x0.clone(),
        _ => DVector::zeros(n),
    };
    let mut r = if x.iter().any(|v| *v != 0.0) { rhs - gram.apply(&x) } else { rhs.clone() };
    if r.norm() <= target {
        return Ok((x, report(0, r.norm() / bnorm)));
    }
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    for it in 1..=max_iter {
        let gp = gram.apply(&p);
        let curv = p.dot(&gp);
        if !(curv > 0.0) {
            return Err(Error::SingularSystem(format!("CG breakdown at iteration {it}: pᵀGp = {curv:e}")));
        }
        let alpha = rz / curv;
        x.axpy(alpha, &p, 1.0);
        let refresh = it % RESIDUAL_REFRESH == 0;
        if refresh {
            r = rhs - gram.apply(&x);
        } else {
            r.axpy(-alpha, &gp, 1.0);
        }
        if refresh && r.norm() <= floor(&x) {
            return Ok((x, report(it, r.norm() / bnorm)));
        }
        if r.norm() <= target {
            let true_r = rhs - gram.apply(&x);
            let rel = true_r.norm() / bnorm;
            if rel <= opts.tol || true_r.norm() <= floor(&x) {
                return Ok((x, report(it, rel)));
            }
            // recurrence drifted: restart from the true residual
            r = true_r;
            z = precond(&r);
            rz = r.dot(&z);
            p = z.clone();
            continue;
        }
        z = precond(&r);
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        p = &z + &p * beta;
    }
    let true_r = rhs - gram.apply(&x);
    let rel = true_r.norm() / bnorm;
    if true_r.norm() <= floor(&x) {
        return Ok((x, report(max_iter, rel)));
    }
    Err(Error::SingularSystem(format!(
        "CG did not reach tolerance {:e} in {max_iter} iterations (relative residual {rel:e})",
        opts.tol
    )))
}

/// Least-squares solution of `[K; √λ M̃^{-1/2} A] c ≈ [b; 0]` by column-scaled CGLS.
///
/// The normal equations of this system are `(KᵀK + λ A M̃⁻¹ A) c = Kᵀb`;
/// the reported residual is relative to `‖Kᵀb‖`, matching [`solve_regularized`].
pub fn solve_sparse_lsq(
    k: &ForwardOperator,
    lambda: f64,
    fem: &FemSystem,
    stacked_rhs: &DVector<f64>,
    opts: SolverOptions,
) -> Result<(Coefficients, SolveReport)> {
    opts.validate()?;
    let gram = GramOperator::new(vec![(1.0, k)], fem, lambda)?;
    if stacked_rhs.len() != k.rows() {
        return Err(Error::DimensionMismatch(format!(
            "right-hand side has length {}, operator has {} rows",
            stacked_rhs.len(),
            k.rows()
        )));
    }
    gram.check_well_posed()?;
    let n = fem.dim();
    let report = |iterations, relative_residual| SolveReport {
        iterations,
        relative_residual,
        method: SolveMethod::SparseLsq,
    };
    let atb = k.apply_t(stacked_rhs);
    let s0 = atb.norm();
    if s0 == 0.0 {
        return Ok((DVector::zeros(n), report(0, 0.0)));
    }
    let sqrt_lambda = lambda.sqrt();
    // column scaling D^{-1/2}, D the Gram diagonal
    let scale: DVector<f64> = DVector::from_iterator(
        n,
        gram.diagonal().into_iter().map(|v| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 }),
    );
    // scaled operator B = [K; √λ L] D^{-1/2}, L = M̃^{-1/2} A
    let forward = |y: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
        let x = y.component_mul(&scale);
        let top = k.apply(&x);
        let bottom = if lambda > 0.0 {
            fem.lumped_inv_sqrt_apply(&fem.stiffness_apply_centered(&x)) * sqrt_lambda
        } else {
            DVector::zeros(0)
        };
        (top, bottom)
    };
    let adjoint = |top: &DVector<f64>, bottom: &DVector<f64>| -> DVector<f64> {
        let mut x = k.apply_t(top);
        if lambda > 0.0 {
            x.axpy(sqrt_lambda, &fem.stiffness_apply(&fem.lumped_inv_sqrt_apply(bottom)), 1.0);
        }
        x.component_mul(&scale)
    };

    let max_iter = opts.cap(n);
    let mut y = DVector::zeros(n);
    let mut r_top = stacked_rhs.clone();
    let mut r_bot = if lambda > 0.0 { DVector::zeros(n) } else { DVector::zeros(0) };
    let mut s = adjoint(&r_top, &r_bot);
    let mut p = s.clone();
    let mut gamma = s.norm_squared();
    let true_rel = |y: &DVector<f64>| -> f64 {
        let c = y.component_mul(&scale);
        (&atb - gram.apply(&c)).norm() / s0
    };
    for it in 1..=max_iter {
        let (q_top, q_bot) = forward(&p);
        let qq = q_top.norm_squared() + q_bot.norm_squared();
        if !(qq > 0.0) {
            return Err(Error::SingularSystem(format!("CGLS breakdown at iteration {it}")));
        }
        let alpha = gamma / qq;
        y.axpy(alpha, &p, 1.0);
        r_top.axpy(-alpha, &q_top, 1.0);
        if lambda > 0.0 {
            r_bot.axpy(-alpha, &q_bot, 1.0);
        }
        s = adjoint(&r_top, &r_bot);
        let gamma_new = s.norm_squared();
        if it % RESIDUAL_REFRESH == 0 || gamma_new.sqrt() <= opts.tol * s0 * 1e-2 {
            let rel = true_rel(&y);
            if rel <= opts.tol {
                return Ok((y.component_mul(&scale), report(it, rel)));
            }
        }
        let beta = gamma_new / gamma;
        gamma = gamma_new;
        p = &s + &p * beta;
    }
    let rel = true_rel(&y);
    if rel <= opts.tol {
        return Ok((y.component_mul(&scale), report(max_iter, rel)));
    }
    Err(Error::SingularSystem(format!(
        "CGLS did not reach tolerance {:e} in {max_iter} iterations (relative residual {rel:e})",
        opts.tol
    )))
}

//! PCA of covariance operators observed through forward operators.
//!
//! Each sensor covariance `S_i` is replaced by a square root `Q_i` with
//! `Q_iᵀ Q_i = S_i`, whose rows are then fitted like functional observations.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fem::{Coefficients, FemSystem};
use crate::funcpca::{
    fit_pca, largest_coefficient_sign, relative_change, FitConfig, FunctionalDataset, PcBasis,
    SignConvention, RANK_EXHAUSTED_RTOL,
};
use crate::operator::ForwardOperator;
use crate::solve::{solve_regularized_from, GramOperator, SolveReport};

/// Negative eigenvalues smaller than this fraction of the largest one are clipped silently.
pub const PSD_CLIP_RTOL: f64 = 1e-9;
const SYMMETRY_RTOL: f64 = 1e-10;

fn check_symmetric(s: &DMatrix<f64>) -> Result<()> {
    if !s.is_square() {
        return Err(Error::DimensionMismatch(format!("covariance is {}x{}", s.nrows(), s.ncols())));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("covariance has non-finite entries".into()));
    }
    let asym = (s - s.transpose()).norm();
    if asym > SYMMETRY_RTOL * s.norm() {
        return Err(Error::NotSymmetric(format!("‖S − Sᵀ‖_F = {asym:e}")));
    }
    Ok(())
}

/// Square root `Q = D^{1/2} Vᵀ` of `S = V D Vᵀ`, so `QᵀQ = S` once negative
/// eigenvalues are clipped to zero. Also returns the clipped mass `Σ |min(λ_j, 0)|`.
pub fn sqrt_decompose(s: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    check_symmetric(s)?;
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut clipped = 0.0;
    let mut q = eig.eigenvectors.transpose();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < 0.0 {
            clipped -= lam;
        }
        let scale = lam.max(0.0).sqrt();
        q.row_mut(j).scale_mut(scale);
    }
    Ok((q, clipped))
}

/// A sensor covariance with its square root and forward operator.
#[derive(Debug, Clone, PartialEq)]
pub struct CovSample {
    cov: DMatrix<f64>,
    sqrt: DMatrix<f64>,
    operator: ForwardOperator,
    id: String,
    clipped_mass: f64,
}

impl CovSample {
    pub fn new(cov: DMatrix<f64>, operator: ForwardOperator, id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        check_symmetric(&cov)?;
        if cov.nrows() != operator.rows() {
            return Err(Error::DimensionMismatch(format!(
                "sample {id:?}: covariance is {}x{}, operator has {} rows",
                cov.nrows(),
                cov.ncols(),
                operator.rows()
            )));
        }
        let (sqrt, clipped_mass) = sqrt_decompose(&cov)?;
        if clipped_mass > 0.0 {
            let eig = SymmetricEigen::new((&cov + cov.transpose()) * 0.5).eigenvalues;
            let (min, top) = (eig.min(), eig.amax());
            if min < -PSD_CLIP_RTOL * top {
                return Err(Error::NotPsd(format!("sample {id:?}: eigenvalue {min:e} against largest {top:e}")));
            }
            log::debug!("sample {id:?}: clipped {clipped_mass:e} of negative eigenvalue mass");
        }
        Ok(CovSample { cov, sqrt, operator, id, clipped_mass })
    }

    /// `S = (1/T) X_cᵀ X_c` from a `T × s` signal matrix with column-centered `X_c`.
    pub fn from_signals(signals: &DMatrix<f64>, operator: ForwardOperator, id: impl Into<String>) -> Result<Self> {
        let t = signals.nrows();
        if t < 2 {
            return Err(Error::InsufficientSamples(format!("{t} time points, need at least 2")));
        }
        let mean = signals.row_mean();
        let mut xc = signals.clone();
        for mut row in xc.row_iter_mut() {
            row -= &mean;
        }
        let s = xc.tr_mul(&xc) / t as f64;
        Self::new((&s + s.transpose()) * 0.5, operator, id)
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn sqrt(&self) -> &DMatrix<f64> {
        &self.sqrt
    }

    pub fn operator(&self) -> &ForwardOperator {
        &self.operator
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn clipped_mass(&self) -> f64 {
        self.clipped_mass
    }

    pub fn sensors(&self) -> usize {
        self.cov.nrows()
    }
}

/// Per-subject fit together with QR-orthogonalized scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectCovFit {
    pub basis: PcBasis,
    /// `s × R` orthonormal factor of the score matrix.
    pub orthogonal_scores: DMatrix<f64>,
}

/// Fits one subject's covariance by treating the rows of its square root as observations.
pub fn fit_subject_cov(
    sample: &CovSample,
    fem: &FemSystem,
    lambda: f64,
    rank: usize,
    config: &FitConfig,
) -> Result<SubjectCovFit> {
    let data = FunctionalDataset::shared(sample.sqrt.clone(), sample.operator.clone())?;
    let cfg = FitConfig { center: false, ..*config };
    let basis = fit_pca(&data, fem, lambda, rank, &cfg)?;
    let scores = basis.score_matrix();
    let orthogonal_scores = if scores.ncols() == 0 { scores } else { scores.qr().q() };
    Ok(SubjectCovFit { basis, orthogonal_scores })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovPcResult {
    pub components: Vec<Coefficients>,
    /// `scores[r][i]`, with `Σ_i ‖scores[r][i]‖² = 1` for every stage.
    pub scores: Vec<Vec<DVector<f64>>>,
    /// `n × R`: `‖z_ir‖² ‖f_r‖²_M`.
    pub variances_brain: DMatrix<f64>,
    /// `n × R`: `‖z_ir‖² ‖K_i f_r‖²`.
    pub variances_sensor: DMatrix<f64>,
    pub lambda: f64,
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
    pub objective_histories: Vec<Vec<f64>>,
    /// `Σ_i ‖Q_i‖_F` of the residual square roots after each stage.
    pub residual_norms: Vec<f64>,
    pub initial_residual: f64,
    pub rank_exhausted: bool,
    pub sign_convention: SignConvention,
    pub last_solves: Vec<Option<SolveReport>>,
}

impl CovPcResult {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn samples(&self) -> usize {
        self.variances_brain.nrows()
    }
}

struct Family<'a> {
    sqrts: Vec<DMatrix<f64>>,
    ops: Vec<&'a ForwardOperator>,
    shared: bool,
}

impl Family<'_> {
    /// Scores `Q_i K_i c / (‖K_i c‖² + shrink)` rescaled so that `Σ ‖z_i‖² = 1`. With
    /// `shrink = λ cᵀPc` each direction minimizes the objective for the given `c`; with
    /// one shared operator the denominators are equal and drop out in the rescaling.
    fn scores(&self, c: &Coefficients, floor: f64, shrink: Option<f64>) -> Result<Vec<DVector<f64>>> {
        let weigh = |q: &DMatrix<f64>, kc: &DVector<f64>| match shrink {
            Some(p) if !self.shared && kc.norm_squared() + p > 0.0 => q * kc / (kc.norm_squared() + p),
            _ => q * kc,
        };
        let raw: Vec<DVector<f64>> = if self.shared {
            let kc = self.ops[0].apply(c);
            self.sqrts.par_iter().map(|q| weigh(q, &kc)).collect()
        } else {
            self.sqrts.par_iter().zip(self.ops.par_iter()).map(|(q, k)| weigh(q, &k.apply(c))).collect()
        };
        let total: f64 = raw.iter().map(|z| z.norm_squared()).sum::<f64>().sqrt();
        if !(total > floor) || !total.is_finite() {
            return Err(Error::DegenerateComponent(format!("all covariance scores vanish (norm {total:e})")));
        }
        Ok(raw.into_iter().map(|z| z / total).collect())
    }

    fn component(
        &self,
        fem: &FemSystem,
        zs: &[DVector<f64>],
        lambda: f64,
        config: &FitConfig,
        x0: Option<&Coefficients>,
    ) -> Result<(Coefficients, SolveReport)> {
        let parts: Vec<DVector<f64>> = self.sqrts.par_iter().zip(zs.par_iter()).map(|(q, z)| q.tr_mul(z)).collect();
        let (terms, rhs) = if self.shared {
            let k = self.ops[0];
            let sensor = parts.iter().fold(DVector::zeros(k.rows()), |acc, v| acc + v);
            let w: f64 = zs.iter().map(|z| z.norm_squared()).sum();
            (vec![(w, k)], k.apply_t(&sensor))
        } else {
            let back: Vec<DVector<f64>> = parts.par_iter().zip(self.ops.par_iter()).map(|(v, k)| k.apply_t(v)).collect();
            let rhs = back.iter().fold(DVector::zeros(fem.dim()), |acc, v| acc + v);
            (self.ops.iter().zip(zs).map(|(k, z)| (z.norm_squared(), *k)).collect(), rhs)
        };
        let gram = GramOperator::new(terms, fem, lambda)?;
        solve_regularized_from(&gram, &rhs, x0, config.solver)
    }

    fn objective(&self, fem: &FemSystem, zs: &[DVector<f64>], c: &Coefficients, lambda: f64) -> Result<f64> {
        let fit: f64 = self
            .sqrts
            .iter()
            .zip(&self.ops)
            .zip(zs)
            .map(|((q, k), z)| (q - z * k.apply(c).transpose()).norm_squared())
            .sum();
        let wz: f64 = zs.iter().map(|z| z.norm_squared()).sum();
        Ok(fit + lambda * wz * fem.penalty_energy(c)?)
    }

    fn residual_norm(&self) -> f64 {
        self.sqrts.iter().map(|q| q.norm()).sum()
    }

    fn initial_scores(&self, floor: f64) -> Result<Vec<DVector<f64>>> {
        let s = self.sqrts[0].ncols();
        let mut g = DMatrix::zeros(s, s);
        for q in &self.sqrts {
            g += q.tr_mul(q);
        }
        let eig = SymmetricEigen::new(g);
        let v = eig.eigenvectors.column(eig.eigenvalues.imax()).into_owned();
        let raw: Vec<DVector<f64>> = self.sqrts.iter().map(|q| q * &v).collect();
        let total: f64 = raw.iter().map(|z| z.norm_squared()).sum::<f64>().sqrt();
        if !(total > floor) {
            return Err(Error::DegenerateComponent("stacked square roots vanish".into()));
        }
        Ok(raw.into_iter().map(|z| z / total).collect())
    }
}

fn family<'a>(samples: &'a [CovSample], fem: &FemSystem) -> Result<Family<'a>> {
    let first = samples.first().ok_or_else(|| Error::InsufficientSamples("no covariance samples".into()))?;
    let s = first.sensors();
    for smp in samples {
        if smp.sensors() != s {
            return Err(Error::DimensionMismatch(format!(
                "sample {:?} has {} sensors, expected {s}",
                smp.id,
                smp.sensors()
            )));
        }
        smp.operator.check_domain(fem.dim())?;
    }
    let shared = samples.iter().all(|smp| smp.operator == first.operator);
    Ok(Family {
        sqrts: samples.iter().map(|smp| smp.sqrt.clone()).collect(),
        ops: samples.iter().map(|smp| &smp.operator).collect(),
        shared,
    })
}

/// `z_i = Q_i K_i c / √(Σ_i ‖Q_i K_i c‖²)`.
pub fn update_cov_scores(samples: &[CovSample], fem: &FemSystem, c: &Coefficients) -> Result<Vec<DVector<f64>>> {
    fem.check_len(c)?;
    family(samples, fem)?.scores(c, 0.0, None)
}

/// Solves `(Σ ‖z_i‖² K_iᵀK_i + λ A M̃⁻¹ A) c = Σ K_iᵀ Q_iᵀ z_i`.
pub fn update_cov_component(
    samples: &[CovSample],
    fem: &FemSystem,
    scores: &[DVector<f64>],
    lambda: f64,
    config: &FitConfig,
) -> Result<(Coefficients, SolveReport)> {
    let fam = family(samples, fem)?;
    if scores.len() != samples.len() || scores.iter().any(|z| z.len() != samples[0].sensors()) {
        return Err(Error::DimensionMismatch("score vectors do not match the samples".into()));
    }
    fam.component(fem, scores, lambda, config, None)
}

/// Population objective `Σ_i ‖Q_i − z_i (K_i c)ᵀ‖²_F + λ Σ_i ‖z_i‖² cᵀ A M̃⁻¹ A c`.
pub fn cov_objective(
    samples: &[CovSample],
    fem: &FemSystem,
    scores: &[DVector<f64>],
    c: &Coefficients,
    lambda: f64,
) -> Result<f64> {
    fem.check_len(c)?;
    family(samples, fem)?.objective(fem, scores, c, lambda)
}

/// Common components of a covariance family, extracted stage by stage with deflation
/// of the square roots.
pub fn fit_population_cov(
    samples: &[CovSample],
    fem: &FemSystem,
    lambda: f64,
    rank: usize,
    config: &FitConfig,
) -> Result<CovPcResult> {
    if rank == 0 {
        return Err(Error::InvalidConfig("rank must be at least 1".into()));
    }
    config.validate()?;
    let mut fam = family(samples, fem)?;
    let n = samples.len();
    let initial = fam.residual_norm();
    let floor = RANK_EXHAUSTED_RTOL * fam.sqrts.iter().map(|q| q.norm_squared()).sum::<f64>().sqrt();
    let mut out = CovPcResult {
        components: Vec::new(),
        scores: Vec::new(),
        variances_brain: DMatrix::zeros(n, 0),
        variances_sensor: DMatrix::zeros(n, 0),
        lambda,
        iterations: Vec::new(),
        converged: Vec::new(),
        objective_histories: Vec::new(),
        residual_norms: Vec::new(),
        initial_residual: initial,
        rank_exhausted: false,
        sign_convention: SignConvention::PositiveLargestCoefficient,
        last_solves: Vec::new(),
    };
    let mut brain = Vec::new();
    let mut sensor = Vec::new();
    for stage in 0..rank {
        let mass: f64 = fam.sqrts.iter().map(|q| q.norm_squared()).sum::<f64>().sqrt();
        if !(mass > floor) {
            if stage == 0 {
                return Err(Error::DegenerateComponent("all covariances are zero".into()));
            }
            out.rank_exhausted = true;
            break;
        }
        let fitted = fit_stage(&fam, fem, lambda, config, floor);
        let (c, zs, iterations, converged, history, last) = match fitted {
            Ok(v) => v,
            Err(Error::DegenerateComponent(msg)) if stage > 0 => {
                log::debug!("stopping covariance extraction at stage {stage}: {msg}");
                out.rank_exhausted = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let mnorm_sq = fem.m_norm(&c).powi(2);
        let mut vb = Vec::with_capacity(n);
        let mut vs = Vec::with_capacity(n);
        for ((q, k), z) in fam.sqrts.iter_mut().zip(&fam.ops).zip(&zs) {
            let kc = k.apply(&c);
            *q -= z * kc.transpose();
            vb.push(z.norm_squared() * mnorm_sq);
            vs.push(z.norm_squared() * kc.norm_squared());
        }
        brain.push(vb);
        sensor.push(vs);
        out.residual_norms.push(fam.residual_norm());
        out.components.push(c);
        out.scores.push(zs);
        out.iterations.push(iterations);
        out.converged.push(converged);
        out.objective_histories.push(history);
        out.last_solves.push(last);
    }
    let r = out.components.len();
    out.variances_brain = DMatrix::from_fn(n, r, |i, j| brain[j][i]);
    out.variances_sensor = DMatrix::from_fn(n, r, |i, j| sensor[j][i]);
    Ok(out)
}

type Stage = (Coefficients, Vec<DVector<f64>>, usize, bool, Vec<f64>, Option<SolveReport>);

fn fit_stage(fam: &Family<'_>, fem: &FemSystem, lambda: f64, config: &FitConfig, floor: f64) -> Result<Stage> {
    let mut zs = fam.initial_scores(floor)?;
    let mut c = DVector::zeros(fem.dim());
    let mut c_prev: Option<Coefficients> = None;
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut last = None;
    for it in 1..=config.max_outer {
        iterations = it;
        let warm = (it > 1).then_some(&c);
        let (c_new, rep) = fam.component(fem, &zs, lambda, config, warm)?;
        last = Some(rep);
        c = c_new;
        history.push(fam.objective(fem, &zs, &c, lambda)?);
        zs = fam.scores(&c, floor, Some(lambda * fem.penalty_energy(&c)?))?;
        if let Some(prev) = &c_prev {
            if relative_change(fem, prev, &c) < config.tol {
                converged = true;
                break;
            }
        }
        c_prev = Some(c.clone());
    }
    let sign = largest_coefficient_sign(&c);
    if sign < 0.0 {
        c = -c;
        zs.iter_mut().for_each(|z| z.neg_mut());
    }
    Ok((c, zs, iterations, converged, history, last))
}

/// Low-rank covariance `C_i = Σ_r γ_ir f_r ⊗ f_r` with unit M-norm `f_r`, kept in factored form.
#[derive(Debug, Clone, PartialEq)]
pub struct CovReconstruction {
    pub factors: Vec<(f64, Coefficients)>,
}

impl CovReconstruction {
    /// `C_i(a, b)` for coefficient indices `a`, `b`.
    pub fn entry(&self, a: usize, b: usize) -> f64 {
        self.factors.iter().map(|(g, f)| g * f[a] * f[b]).sum()
    }

    /// `K C_i Kᵀ` on the sensors.
    pub fn sensor_matrix(&self, k: &ForwardOperator) -> DMatrix<f64> {
        let s = k.rows();
        let mut out = DMatrix::zeros(s, s);
        for (g, f) in &self.factors {
            let kf = k.apply(f);
            out += &kf * kf.transpose() * *g;
        }
        out
    }
}

pub fn reconstruct_cov(result: &CovPcResult, fem: &FemSystem, sample: usize, truncation: usize) -> Result<CovReconstruction> {
    if sample >= result.samples() {
        return Err(Error::IndexOutOfRange(format!("sample {sample} of {}", result.samples())));
    }
    if truncation > result.len() {
        return Err(Error::IndexOutOfRange(format!("truncation {truncation} exceeds {} components", result.len())));
    }
    let factors = (0..truncation)
        .map(|r| {
            let c = &result.components[r];
            let n = fem.m_norm(c);
            let unit = if n > 0.0 { c / n } else { c.clone() };
            (result.variances_brain[(sample, r)], unit)
        })
        .collect();
    Ok(CovReconstruction { factors })
}

/// Per-node squared magnitude `Σ_q c_q[j]²`.
pub fn energy_map(fem: &FemSystem, c: &Coefficients) -> Result<DVector<f64>> {
    fem.check_len(c)?;
    let k = fem.nodes();
    let mut out = DVector::zeros(k);
    for q in 0..fem.channels() {
        for j in 0..k {
            out[j] += c[q * k + j].powi(2);
        }
    }
    Ok(out)
}

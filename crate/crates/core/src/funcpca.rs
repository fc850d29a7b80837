//! Principal components of indirectly observed functions.
//!
//! Given sensor observations `y_l ≈ z_l K_l f`, a component `(z, f)` is found
//! by alternating a regularized inverse solve for the nodal coefficients of
//! `f` with a normalized projection update of the scores `z` (`‖z‖ = 1`).
//! Further components come from deflating the observations.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{Coefficients, FemSystem};
use crate::operator::ForwardOperator;
use crate::solve::{
    solve_regularized, solve_regularized_from, solve_sparse_lsq, GramOperator, SolveReport, SolverOptions,
};

/// Relative size under which the data is treated as exhausted.
pub const RANK_EXHAUSTED_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum Operators {
    Shared(ForwardOperator),
    PerSample(Vec<ForwardOperator>),
}

/// Sensor observations (one row per sample) and their forward operators.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalDataset {
    observations: DMatrix<f64>,
    operators: Operators,
    pub noise_sigma: Option<f64>,
}

impl FunctionalDataset {
    pub fn new(observations: DMatrix<f64>, operators: Operators) -> Result<Self> {
        let (m, s) = observations.shape();
        if m == 0 {
            return Err(Error::InsufficientSamples("dataset has no observations".into()));
        }
        if observations.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("observations contain non-finite values".into()));
        }
        let ops: Vec<&ForwardOperator> = match &operators {
            Operators::Shared(k) => vec![k],
            Operators::PerSample(ks) => {
                if ks.len() != m {
                    return Err(Error::DimensionMismatch(format!(
                        "{} operators for {m} observations",
                        ks.len()
                    )));
                }
                ks.iter().collect()
            }
        };
        let cols = ops[0].cols();
        for k in &ops {
            if k.rows() != s {
                return Err(Error::DimensionMismatch(format!(
                    "operator {:?} has {} rows, observations have length {s}",
                    k.id(),
                    k.rows()
                )));
            }
            if k.cols() != cols {
                return Err(Error::DimensionMismatch("operators disagree on domain dimension".into()));
            }
        }
        Ok(FunctionalDataset { observations, operators, noise_sigma: None })
    }

    pub fn shared(observations: DMatrix<f64>, k: ForwardOperator) -> Result<Self> {
        Self::new(observations, Operators::Shared(k))
    }

    /// Number of samples `m`.
    pub fn len(&self) -> usize {
        self.observations.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of sensors `s`.
    pub fn sensors(&self) -> usize {
        self.observations.ncols()
    }

    pub fn domain_dim(&self) -> usize {
        self.operator(0).cols()
    }

    pub fn observations(&self) -> &DMatrix<f64> {
        &self.observations
    }

    pub fn operators(&self) -> &Operators {
        &self.operators
    }

    pub fn operator(&self, l: usize) -> &ForwardOperator {
        match &self.operators {
            Operators::Shared(k) => k,
            Operators::PerSample(ks) => &ks[l],
        }
    }

    pub fn shared_operator(&self) -> Option<&ForwardOperator> {
        match &self.operators {
            Operators::Shared(k) => Some(k),
            Operators::PerSample(_) => None,
        }
    }

    pub fn observation(&self, l: usize) -> DVector<f64> {
        self.observations.row(l).transpose()
    }

    /// Keeps the listed samples, in order.
    pub fn subset(&self, idx: &[usize]) -> FunctionalDataset {
        let obs = DMatrix::from_fn(idx.len(), self.sensors(), |i, j| self.observations[(idx[i], j)]);
        let operators = match &self.operators {
            Operators::Shared(k) => Operators::Shared(k.clone()),
            Operators::PerSample(ks) => Operators::PerSample(idx.iter().map(|&i| ks[i].clone()).collect()),
        };
        FunctionalDataset { observations: obs, operators, noise_sigma: self.noise_sigma }
    }

    /// Per-sensor empirical mean of the observations.
    pub fn sensor_mean(&self) -> DVector<f64> {
        self.observations.row_mean().transpose()
    }

    /// Subtracts a per-sensor mean from every observation.
    pub fn centered_by(&self, mean: &DVector<f64>) -> FunctionalDataset {
        let mut obs = self.observations.clone();
        for mut row in obs.row_iter_mut() {
            row -= mean.transpose();
        }
        FunctionalDataset { observations: obs, ..self.clone() }
    }

    /// `b_l = y_lᵀ K_l c`.
    pub fn projections(&self, c: &Coefficients) -> DVector<f64> {
        match &self.operators {
            Operators::Shared(k) => &self.observations * k.apply(c),
            Operators::PerSample(ks) => {
                DVector::from_iterator(self.len(), ks.iter().enumerate().map(|(l, k)| {
                    self.observations.row(l).transpose().dot(&k.apply(c))
                }))
            }
        }
    }

    /// `Σ_l z_l K_lᵀ y_l`.
    pub fn backprojection(&self, z: &DVector<f64>) -> Coefficients {
        match &self.operators {
            Operators::Shared(k) => k.apply_t(&self.observations.tr_mul(z)),
            Operators::PerSample(ks) => {
                let mut out = DVector::zeros(self.domain_dim());
                for (l, k) in ks.iter().enumerate() {
                    if z[l] != 0.0 {
                        out.axpy(z[l], &k.apply_t(&self.observation(l)), 1.0);
                    }
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    /// Leading left singular vector of the data matrix.
    #[default]
    Svd,
    /// `𝟙/√m`.
    Uniform,
}

/// Which representative of the `(z, c) ~ (−z, −c)` pair is returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignConvention {
    /// Score entries sum to a positive value (ties: first nonzero score positive).
    PositiveScoreSum,
    /// Largest-magnitude coefficient is positive.
    PositiveLargestCoefficient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub max_outer: usize,
    /// Stop when the relative M-norm change of `c` drops below this.
    pub tol: f64,
    pub init: InitStrategy,
    /// Subtract the per-sensor mean before fitting.
    pub center: bool,
    /// Use the stacked least-squares solver when the operator is shared.
    pub sparse_lsq: bool,
    pub solver: SolverOptions,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_outer: 15,
            tol: 1e-6,
            init: InitStrategy::Svd,
            center: true,
            sparse_lsq: false,
            solver: SolverOptions::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer == 0 {
            return Err(Error::InvalidConfig("max_outer must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig("tol must be positive".into()));
        }
        if !(self.solver.tol > 0.0) {
            return Err(Error::InvalidConfig("solver tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcComponent {
    pub coefficients: Coefficients,
    /// Unit-norm scores; empty when fitted from a sensor covariance alone.
    pub scores: DVector<f64>,
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    pub sign_convention: SignConvention,
    /// Objective value after each outer iteration's component update.
    pub objective_history: Vec<f64>,
    pub last_solve: Option<SolveReport>,
}

impl PcComponent {
    /// Coefficients scaled to unit M-norm.
    pub fn unit_coefficients(&self, fem: &FemSystem) -> Coefficients {
        let n = fem.m_norm(&self.coefficients);
        if n > 0.0 {
            &self.coefficients / n
        } else {
            self.coefficients.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcBasis {
    pub components: Vec<PcComponent>,
    /// Frobenius norm of the (centered) data before any extraction.
    pub initial_norm: f64,
    /// Frobenius norm of the residual data after each stage.
    pub residual_norms: Vec<f64>,
    /// Set when extraction stopped early because the data was exhausted.
    pub rank_exhausted: bool,
    /// Mean subtracted before fitting, if centering was on.
    pub mean: Option<DVector<f64>>,
}

impl PcBasis {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// `m × R` score matrix.
    pub fn score_matrix(&self) -> DMatrix<f64> {
        let m = self.components.first().map_or(0, |c| c.scores.len());
        DMatrix::from_fn(m, self.len(), |l, r| self.components[r].scores[l])
    }

    /// `R × (d·κ)` coefficient matrix.
    pub fn coefficient_matrix(&self) -> DMatrix<f64> {
        let n = self.components.first().map_or(0, |c| c.coefficients.len());
        DMatrix::from_fn(self.len(), n, |r, j| self.components[r].coefficients[j])
    }
}

fn normalize_scores(b: DVector<f64>, data_scale: f64) -> Result<DVector<f64>> {
    let n = b.norm();
    if !(n > RANK_EXHAUSTED_RTOL * data_scale) || !n.is_finite() {
        return Err(Error::DegenerateComponent(format!(
            "all score projections vanish (norm {n:e})"
        )));
    }
    Ok(b / n)
}

/// Normalized scores `z_l = y_lᵀ K_l c / √(Σ_l (y_lᵀ K_l c)²)`.
pub fn update_scores(data: &FunctionalDataset, fem: &FemSystem, c: &Coefficients) -> Result<DVector<f64>> {
    fem.check_len(c)?;
    check_domain(data, fem)?;
    normalize_scores(data.projections(c), 0.0)
}

/// Score directions that minimize the objective for fixed `c`: `y_lᵀK_l c / (‖K_l c‖² + λ cᵀPc)`.
/// With one shared operator the denominator is common and the result is parallel to
/// [`FunctionalDataset::projections`].
fn minimizing_projections(data: &FunctionalDataset, fem: &FemSystem, c: &Coefficients, lambda: f64) -> Result<DVector<f64>> {
    match &data.operators {
        Operators::Shared(_) => Ok(data.projections(c)),
        Operators::PerSample(ks) => {
            let pen = lambda * fem.penalty_energy(c)?;
            Ok(DVector::from_iterator(
                data.len(),
                ks.iter().enumerate().map(|(l, k)| {
                    let kc = k.apply(c);
                    let den = kc.norm_squared() + pen;
                    if den > 0.0 {
                        data.observations.row(l).transpose().dot(&kc) / den
                    } else {
                        0.0
                    }
                }),
            ))
        }
    }
}

fn check_domain(data: &FunctionalDataset, fem: &FemSystem) -> Result<()> {
    if data.domain_dim() != fem.dim() {
        return Err(Error::DimensionMismatch(format!(
            "operators act on {} coefficients, FEM space has {}",
            data.domain_dim(),
            fem.dim()
        )));
    }
    Ok(())
}

/// Solves `(Σ z_l² K_lᵀK_l + λ A M̃⁻¹ A) c = Σ z_l K_lᵀ y_l`.
pub fn update_component(
    data: &FunctionalDataset,
    fem: &FemSystem,
    z: &DVector<f64>,
    lambda: f64,
    config: &FitConfig,
) -> Result<(Coefficients, SolveReport)> {
    update_component_from(data, fem, z, lambda, config, None)
}

/// [`update_component`] with the iterative solve started from `x0`.
pub fn update_component_from(
    data: &FunctionalDataset,
    fem: &FemSystem,
    z: &DVector<f64>,
    lambda: f64,
    config: &FitConfig,
    x0: Option<&Coefficients>,
) -> Result<(Coefficients, SolveReport)> {
    check_domain(data, fem)?;
    if z.len() != data.len() {
        return Err(Error::DimensionMismatch(format!("{} scores for {} samples", z.len(), data.len())));
    }
    match &data.operators {
        Operators::Shared(k) => {
            let w = z.norm_squared();
            let ytz = data.observations.tr_mul(z);
            if config.sparse_lsq && w > 0.0 {
                // (w KᵀK + λP) c = Kᵀ Yᵀz  ⇔  (KᵀK + (λ/w) P) c = Kᵀ (Yᵀz / w)
                solve_sparse_lsq(k, lambda / w, fem, &(ytz / w), config.solver)
            } else {
                let gram = GramOperator::new(vec![(w, k)], fem, lambda)?;
                solve_regularized_from(&gram, &k.apply_t(&ytz), x0, config.solver)
            }
        }
        Operators::PerSample(ks) => {
            let terms = ks.iter().zip(z.iter()).map(|(k, zl)| (zl * zl, k)).collect();
            let gram = GramOperator::new(terms, fem, lambda)?;
            solve_regularized_from(&gram, &data.backprojection(z), x0, config.solver)
        }
    }
}

/// `Σ_l ‖y_l − z_l K_l c‖² + λ ‖z‖² cᵀ A M̃⁻¹ A c`.
pub fn objective(
    data: &FunctionalDataset,
    fem: &FemSystem,
    z: &DVector<f64>,
    c: &Coefficients,
    lambda: f64,
) -> Result<f64> {
    fem.check_len(c)?;
    let fit: f64 = match &data.operators {
        Operators::Shared(k) => {
            let kc = k.apply(c);
            (&data.observations - z * kc.transpose()).norm_squared()
        }
        Operators::PerSample(ks) => ks
            .iter()
            .enumerate()
            .map(|(l, k)| (data.observation(l) - k.apply(c) * z[l]).norm_squared())
            .sum(),
    };
    Ok(fit + lambda * z.norm_squared() * fem.penalty_energy(c)?)
}

fn initial_scores(data: &FunctionalDataset, init: InitStrategy) -> DVector<f64> {
    let m = data.len();
    let uniform = || DVector::from_element(m, 1.0 / (m as f64).sqrt());
    match init {
        InitStrategy::Uniform => uniform(),
        InitStrategy::Svd => leading_left_singular(&data.observations).unwrap_or_else(uniform),
    }
}

pub(crate) fn leading_left_singular(y: &DMatrix<f64>) -> Option<DVector<f64>> {
    if y.nrows() == 0 || y.ncols() == 0 {
        return None;
    }
    let svd = SVD::try_new(y.clone(), true, false, f64::EPSILON, 0)?;
    let u = svd.u?;
    let (idx, smax) = svd.singular_values.iter().enumerate().fold((0, -1.0), |acc, (i, &s)| {
        if s > acc.1 {
            (i, s)
        } else {
            acc
        }
    });
    (smax > 0.0).then(|| u.column(idx).into_owned())
}

fn canonical_sign(z: &DVector<f64>) -> f64 {
    let s: f64 = z.sum();
    if s > 0.0 {
        1.0
    } else if s < 0.0 {
        -1.0
    } else {
        match z.iter().find(|v| **v != 0.0) {
            Some(v) if *v < 0.0 => -1.0,
            _ => 1.0,
        }
    }
}

pub(crate) fn largest_coefficient_sign(c: &Coefficients) -> f64 {
    let (_, v) = c.iter().fold((0.0f64, 0.0f64), |(best, bv), &v| if v.abs() > best { (v.abs(), v) } else { (best, bv) });
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Relative M-norm change between successive iterates.
pub(crate) fn relative_change(fem: &FemSystem, prev: &Coefficients, next: &Coefficients) -> f64 {
    let denom = fem.m_norm(next);
    if denom == 0.0 {
        return if fem.m_norm(prev) == 0.0 { 0.0 } else { f64::INFINITY };
    }
    fem.m_norm(&(next - prev)) / denom
}

/// Fits one component by alternating component and score updates.
pub fn fit_pc(data: &FunctionalDataset, fem: &FemSystem, lambda: f64, config: &FitConfig) -> Result<PcComponent> {
    config.validate()?;
    check_domain(data, fem)?;
    let z0 = initial_scores(data, config.init);
    fit_pc_from(data, fem, lambda, config, z0)
}

/// [`fit_pc`] from explicit initial scores.
pub fn fit_pc_from(
    data: &FunctionalDataset,
    fem: &FemSystem,
    lambda: f64,
    config: &FitConfig,
    z0: DVector<f64>,
) -> Result<PcComponent> {
    config.validate()?;
    check_domain(data, fem)?;
    let data_scale = data.observations.norm();
    let mut z = normalize_scores(z0, 0.0)?;
    let mut c_prev: Option<Coefficients> = None;
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut last_solve = None;
    let mut c = DVector::zeros(fem.dim());
    for it in 1..=config.max_outer {
        iterations = it;
        let warm = (it > 1).then_some(&c);
        let (c_new, rep) = update_component_from(data, fem, &z, lambda, config, warm)?;
        last_solve = Some(rep);
        c = c_new;
        history.push(objective(data, fem, &z, &c, lambda)?);
        z = normalize_scores(minimizing_projections(data, fem, &c, lambda)?, data_scale)?;
        if let Some(prev) = &c_prev {
            if relative_change(fem, prev, &c) < config.tol {
                converged = true;
                break;
            }
        }
        c_prev = Some(c.clone());
    }
    let sign = canonical_sign(&z);
    Ok(PcComponent {
        coefficients: c * sign,
        scores: z * sign,
        lambda,
        iterations,
        converged,
        sign_convention: SignConvention::PositiveScoreSum,
        objective_history: history,
        last_solve,
    })
}

/// Residual observations `y_l − z_l K_l c`.
pub fn deflate(data: &FunctionalDataset, component: &PcComponent) -> Result<FunctionalDataset> {
    let c = &component.coefficients;
    let z = &component.scores;
    if c.len() != data.domain_dim() || z.len() != data.len() {
        return Err(Error::DimensionMismatch(format!(
            "component ({} coefficients, {} scores) does not match data ({} domain, {} samples)",
            c.len(),
            z.len(),
            data.domain_dim(),
            data.len()
        )));
    }
    let mut obs = data.observations.clone();
    match &data.operators {
        Operators::Shared(k) => obs -= z * k.apply(c).transpose(),
        Operators::PerSample(ks) => {
            for (l, k) in ks.iter().enumerate() {
                let mut row = obs.row_mut(l);
                row -= (k.apply(c) * z[l]).transpose();
            }
        }
    }
    Ok(FunctionalDataset { observations: obs, ..data.clone() })
}

/// Extracts up to `rank` components by fitting and deflating.
pub fn fit_pca(
    data: &FunctionalDataset,
    fem: &FemSystem,
    lambda: f64,
    rank: usize,
    config: &FitConfig,
) -> Result<PcBasis> {
    if rank == 0 {
        return Err(Error::InvalidConfig("rank must be at least 1".into()));
    }
    config.validate()?;
    check_domain(data, fem)?;
    let mean = config.center.then(|| data.sensor_mean());
    let mut current = match &mean {
        Some(mu) => data.centered_by(mu),
        None => data.clone(),
    };
    let initial_norm = current.observations.norm();
    let mut basis = PcBasis {
        components: Vec::with_capacity(rank),
        initial_norm,
        residual_norms: Vec::with_capacity(rank),
        rank_exhausted: false,
        mean,
    };
    for stage in 0..rank {
        if !(current.observations.norm() > RANK_EXHAUSTED_RTOL * initial_norm) {
            if stage == 0 {
                return Err(Error::DegenerateComponent("observations are identically zero".into()));
            }
            basis.rank_exhausted = true;
            break;
        }
        let comp = match fit_pc(&current, fem, lambda, config) {
            Ok(c) => c,
            Err(Error::DegenerateComponent(msg)) if stage > 0 => {
                log::debug!("stopping extraction at stage {stage}: {msg}");
                basis.rank_exhausted = true;
                break;
            }
            Err(e) => return Err(e),
        };
        current = deflate(&current, &comp)?;
        basis.residual_norms.push(current.observations.norm());
        basis.components.push(comp);
    }
    Ok(basis)
}

fn check_psd(s: &DMatrix<f64>) -> Result<()> {
    if !s.is_square() {
        return Err(Error::DimensionMismatch(format!("covariance is {}x{}", s.nrows(), s.ncols())));
    }
    let scale = s.norm().max(f64::MIN_POSITIVE);
    if (s - s.transpose()).norm() > 1e-10 * scale {
        return Err(Error::NotSymmetric("sensor covariance is not symmetric".into()));
    }
    let eig = SymmetricEigen::new(s.clone()).eigenvalues;
    let min = eig.min();
    if min < -1e-10 * eig.amax() {
        return Err(Error::NotPsd(format!("smallest eigenvalue {min:e}")));
    }
    Ok(())
}

/// Fits components from the sensor covariance `S = Σ_l y_l y_lᵀ` alone, using
/// the power-like iteration `(KᵀK + λP) c = Kᵀ S K c_prev` with `c` normalized
/// in M-norm. The returned coefficients carry the same scale as [`fit_pc`]
/// on the underlying observations; scores are not available and left empty.
pub fn fit_from_sensor_cov(
    s: &DMatrix<f64>,
    k: &ForwardOperator,
    fem: &FemSystem,
    lambda: f64,
    rank: usize,
    config: &FitConfig,
) -> Result<PcBasis> {
    if rank == 0 {
        return Err(Error::InvalidConfig("rank must be at least 1".into()));
    }
    config.validate()?;
    k.check_domain(fem.dim())?;
    if s.nrows() != k.rows() {
        return Err(Error::DimensionMismatch(format!(
            "covariance is {}x{}, operator has {} rows",
            s.nrows(),
            s.ncols(),
            k.rows()
        )));
    }
    check_psd(s)?;
    let gram = GramOperator::new(vec![(1.0, k)], fem, lambda)?;
    // rhs is given in sensor space: the normal equations carry Kᵀ·rhs
    let solve = |b: &DVector<f64>| -> Result<(Coefficients, SolveReport)> {
        if config.sparse_lsq {
            solve_sparse_lsq(k, lambda, fem, b, config.solver)
        } else {
            solve_regularized(&gram, &k.apply_t(b), config.solver)
        }
    };
    let mut s_cur = s.clone();
    let initial_norm = s.trace().max(0.0).sqrt();
    let mut basis = PcBasis {
        components: Vec::new(),
        initial_norm,
        residual_norms: Vec::new(),
        rank_exhausted: false,
        mean: None,
    };
    for stage in 0..rank {
        let tr = s_cur.trace();
        if !(tr.max(0.0).sqrt() > RANK_EXHAUSTED_RTOL * initial_norm) {
            basis.rank_exhausted = true;
            break;
        }
        // initial direction: leading eigenvector of S, mirroring the SVD initialization of the scores
        let eig = SymmetricEigen::new(s_cur.clone());
        let top = eig.eigenvalues.imax();
        let v = eig.eigenvectors.column(top).into_owned();
        let (mut c_dir, _) = solve(&v)?;
        let n0 = fem.m_norm(&c_dir);
        if !(n0 > 0.0) {
            if stage > 0 {
                basis.rank_exhausted = true;
                break;
            }
            return Err(Error::DegenerateComponent("initial component vanished".into()));
        }
        c_dir /= n0;
        let mut history = Vec::new();
        let mut converged = false;
        let mut iterations = 0;
        let mut last_solve = None;
        let mut scaled = DVector::zeros(fem.dim());
        for it in 1..=config.max_outer {
            iterations = it;
            let ku = k.apply(&c_dir);
            let sku = &s_cur * &ku;
            let norm_yk = ku.dot(&sku).max(0.0).sqrt();
            if !(norm_yk > RANK_EXHAUSTED_RTOL * initial_norm * ku.norm().max(f64::MIN_POSITIVE)) {
                if stage > 0 {
                    basis.rank_exhausted = true;
                    return Ok(basis);
                }
                return Err(Error::DegenerateComponent("projected covariance vanishes".into()));
            }
            // g = Yᵀz with z ∝ Y K ĉ, expressed through S
            let g = &sku / norm_yk;
            let (c_new, rep) = solve(&g)?;
            last_solve = Some(rep);
            let u = k.apply(&c_new);
            history.push(tr - 2.0 * u.dot(&g) + u.norm_squared() + lambda * fem.penalty_energy(&c_new)?);
            scaled = c_new;
            let n = fem.m_norm(&scaled);
            let next_dir = &scaled / n;
            let sign = if next_dir.dot(&fem.mass_apply(&c_dir)) < 0.0 { -1.0 } else { 1.0 };
            let change = relative_change(fem, &c_dir, &(&next_dir * sign));
            c_dir = next_dir;
            if change < config.tol && it > 1 {
                converged = true;
                break;
            }
        }
        // fit_pc scaling: one more component update from the converged direction
        let ku = k.apply(&c_dir);
        let sku = &s_cur * &ku;
        let norm_yk = ku.dot(&sku).max(0.0).sqrt();
        if norm_yk > 0.0 {
            let g = &sku / norm_yk;
            let (c_final, rep) = solve(&g)?;
            last_solve = Some(rep);
            scaled = c_final;
            let u = k.apply(&scaled);
            // deflation of the implied observations: Σ (y_l − z_l u)(y_l − z_l u)ᵀ
            let gu = &g * u.transpose();
            s_cur = &s_cur - &gu - gu.transpose() + &u * u.transpose();
            s_cur = (&s_cur + s_cur.transpose()) * 0.5;
        }
        let sign = largest_coefficient_sign(&scaled);
        basis.residual_norms.push(s_cur.trace().max(0.0).sqrt());
        basis.components.push(PcComponent {
            coefficients: scaled * sign,
            scores: DVector::zeros(0),
            lambda,
            iterations,
            converged,
            sign_convention: SignConvention::PositiveLargestCoefficient,
            objective_history: history,
            last_solve,
        });
    }
    Ok(basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::assemble;
    use crate::mesh::{make_icosphere, tetrahedron};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
    }

    fn m_cos(fem: &FemSystem, a: &Coefficients, b: &Coefficients) -> f64 {
        a.dot(&fem.mass_apply(b)) / (fem.m_norm(a) * fem.m_norm(b))
    }

    fn no_center() -> FitConfig {
        FitConfig { center: false, ..FitConfig::default() }
    }

    #[test]
    fn scores_single_sample_is_unit() {
        let fem = assemble(&tetrahedron(), 1).unwrap();
        let data = FunctionalDataset::shared(DMatrix::from_row_slice(1, 4, &[1.0, 2.0, 3.0, 4.0]), ForwardOperator::identity(4)).unwrap();
        let z = update_scores(&data, &fem, &DVector::from_element(4, -1.0)).unwrap();
        assert_eq!(z.len(), 1);
        assert!((z[0].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn scores_equal_projections() {
        let fem = assemble(&tetrahedron(), 1).unwrap();
        let c = DVector::from_vec(vec![0.5, -1.0, 2.0, 0.1]);
        let k = ForwardOperator::identity(4);
        let obs = DMatrix::from_fn(5, 4, |_, j| c[j]);
        let data = FunctionalDataset::shared(obs, k).unwrap();
        let z = update_scores(&data, &fem, &c).unwrap();
        for v in z.iter() {
            assert!((v - 1.0 / 5f64.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn scores_match_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fem = assemble(&tetrahedron(), 1).unwrap();
        let ks: Vec<_> = (0..6).map(|i| ForwardOperator::dense(rand_mat(3, 4, &mut rng), format!("{i}")).unwrap()).collect();
        let dense: Vec<DMatrix<f64>> = ks.iter().map(|k| k.to_dense()).collect();
        let y = rand_mat(6, 3, &mut rng);
        let data = FunctionalDataset::new(y.clone(), Operators::PerSample(ks)).unwrap();
        let c = rand_vec(4, &mut rng);
        let z = update_scores(&data, &fem, &c).unwrap();
        let b: Vec<f64> = (0..6).map(|l| (y.row(l) * &dense[l] * &c)[0]).collect();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        for l in 0..6 {
            assert!((z[l] - b[l] / nb).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_degenerate() {
        let fem = assemble(&tetrahedron(), 1).unwrap();
        let data = FunctionalDataset::shared(DMatrix::zeros(3, 4), ForwardOperator::identity(4)).unwrap();
        assert!(matches!(
            update_scores(&data, &fem, &DVector::from_element(4, 1.0)),
            Err(Error::DegenerateComponent(_))
        ));
    }

    #[test]
    fn component_identity_unregularized() {
        let fem = assemble(&tetrahedron(), 1).unwrap();
        let y = DMatrix::from_row_slice(1, 4, &[1.0, -2.0, 0.5, 3.0]);
        let data = FunctionalDataset::shared(y.clone(), ForwardOperator::identity(4)).unwrap();
        let (c, _) = update_component(&data, &fem, &DVector::from_element(1, 1.0), 0.0, &FitConfig::default()).unwrap();
        assert!((c - y.row(0).transpose()).norm() < 1e-10 * 4.0);
    }

    #[test]
    fn component_one_hot_scores_is_single_sample_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fem = assemble(&tetrahedron(), 1).unwrap();
        let ks: Vec<_> = (0..4).map(|i| ForwardOperator::dense(rand_mat(3, 4, &mut rng), format!("{i}")).unwrap()).collect();
        let y = rand_mat(4, 3, &mut rng);
        let data = FunctionalDataset::new(y.clone(), Operators::PerSample(ks.clone())).unwrap();
        let mut z = DVector::zeros(4);
        z[2] = 1.0;
        let cfg = FitConfig { solver: SolverOptions::with_tol(1e-13), ..FitConfig::default() };
        let (c, _) = update_component(&data, &fem, &z, 0.3, &cfg).unwrap();
        let single = FunctionalDataset::shared(y.rows(2, 1).into_owned(), ks[2].clone()).unwrap();
        let (c1, _) = update_component(&single, &fem, &DVector::from_element(1, 1.0), 0.3, &cfg).unwrap();
        assert!((c - &c1).norm() < 1e-9 * c1.norm());
    }

    fn dense_penalty(fem: &FemSystem) -> DMatrix<f64> {
        let a = fem.stiffness().to_dense();
        let minv = DMatrix::from_diagonal(&DVector::from_iterator(fem.nodes(), fem.lumped_mass().iter().map(|v| 1.0 / v)));
        let p = &a * minv * &a;
        let (k, d) = (fem.nodes(), fem.channels());
        let mut full = DMatrix::zeros(k * d, k * d);
        for q in 0..d {
            full.view_mut((q * k, q * k), (k, k)).copy_from(&p);
        }
        full
    }

    #[test]
    fn component_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let fem = assemble(&make_icosphere(0, 1.0).unwrap(), 1).unwrap();
        let ks: Vec<_> = (0..8).map(|i| ForwardOperator::dense(rand_mat(5, 12, &mut rng), format!("{i}")).unwrap()).collect();
        let y = rand_mat(8, 5, &mut rng);
        let data = FunctionalDataset::new(y.clone(), Operators::PerSample(ks.clone())).unwrap();
        let z = rand_vec(8, &mut rng).normalize();
        let cfg = FitConfig { solver: SolverOptions::with_tol(1e-13), ..FitConfig::default() };
        let (c, _) = update_component(&data, &fem, &z, 0.1, &cfg).unwrap();
        let mut g = dense_penalty(&fem) * 0.1;
        let mut rhs = DVector::zeros(12);
        for l in 0..8 {
            let k = ks[l].to_dense();
            g += k.transpose() * &k * (z[l] * z[l]);
            rhs += k.transpose() * y.row(l).transpose() * z[l];
        }
        let want = g.lu().solve(&rhs).unwrap();
        assert!((c - &want).norm() < 1e-8 * want.norm());
    }

    #[test]
    fn sparse_lsq_path_matches_cg_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let fem = assemble(&make_icosphere(1, 1.0).unwrap(), 1).unwrap();
        let k = ForwardOperator::dense(rand_mat(10, 42, &mut rng), "k").unwrap();
        let data = FunctionalDataset::shared(rand_mat(6, 10, &mut rng), k).unwrap();
        let z = rand_vec(6, &mut rng).normalize();
        let tight = SolverOptions::with_tol(1e-13);
        let cg = FitConfig { solver: tight, ..FitConfig::default() };
        let lsq = FitConfig { sparse_lsq: true, ..cg };
        let (a, _) = update_component(&data, &fem, &z, 0.05, &cg).unwrap();
        let (b, rep) = update_component(&data, &fem, &z, 0.05, &lsq).unwrap();
        assert_eq!(rep.method, crate::solve::SolveMethod::SparseLsq);
        assert!((a - &b).norm() < 1e-8 * b.norm());
    }

    #[test]
    fn single_sample_fit_converges_immediately() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fem = assemble(&make_icosphere(1, 1.0).unwrap(), 1).unwrap();
        let k = ForwardOperator::dense(rand_mat(8, 42, &mut rng), "k").unwrap();
        let y = rand_mat(1, 8, &mut rng);
        let data = FunctionalDataset::shared(y, k).unwrap();
        let comp = fit_pc(&data, &fem, 0.2, &no_center()).unwrap();
        assert_eq!(comp.scores.len(), 1);
        assert_eq!(comp.scores[0], 1.0);
        assert!(comp.converged);
        let (direct, _) = update_component(&data, &fem, &DVector::from_element(1, 1.0), 0.2, &no_center()).unwrap();
        let s = comp.scores[0];
        assert!((comp.coefficients.clone() * s - direct).norm() < 1e-10);
    }

    #[test]
    fn exact_rank_one_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fem = assemble(&tetrahedron(), 1).unwrap();
        let k = ForwardOperator::dense(rand_mat(6, 4, &mut rng), "k").unwrap();
        let c_true = rand_vec(4, &mut rng);
        let z_true = rand_vec(10, &mut rng);
        let y = &z_true * k.apply(&c_true).transpose();
        let data = FunctionalDataset::shared(y, k).unwrap();
        let comp = fit_pc(&data, &fem, 0.0, &no_center()).unwrap();
        assert!(m_cos(&fem, &comp.coefficients, &c_true).abs() > 1.0 - 1e-8);
        assert!((comp.scores.norm() - 1.0).abs() < 1e-10);
        assert!(comp.scores.sum() > 0.0);
        let resid = deflate(&data, &comp).unwrap();
        assert!(resid.observations().norm() < 1e-8 * data.observations().norm());
    }

    #[test]
    fn rank_two_deflation_leaves_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fem = assemble(&make_icosphere(0, 1.0).unwrap(), 1).unwrap();
        let k = ForwardOperator::dense(rand_mat(15, 12, &mut rng), "k").unwrap();
        let c1 = rand_vec(12, &mut rng);
        let c2 = rand_vec(12, &mut rng);
        let z1 = rand_vec(20, &mut rng) * 3.0;
        let z2 = rand_vec(20, &mut rng);
        let y = &z1 * k.apply(&c1).transpose() + &z2 * k.apply(&c2).transpose();
        let data = FunctionalDataset::shared(y, k).unwrap();
        let cfg = FitConfig { max_outer: 500, tol: 1e-12, ..no_center() };
        let comp = fit_pc(&data, &fem, 0.0, &cfg).unwrap();
        let resid = deflate(&data, &comp).unwrap();
        let sv = resid.observations().clone().singular_values();
        let mut sv: Vec<f64> = sv.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        assert!(sv[1] / sv[0] < 1e-6, "ratio {}", sv[1] / sv[0]);
    }

    #[test]
    fn noiseless_rank_two_exhausts_at_third_stage() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fem = assemble(&make_icosphere(0, 1.0).unwrap(), 1).unwrap();
        let k = ForwardOperator::dense(rand_mat(15, 12, &mut rng), "k").unwrap();
        let (c1, c2) = (rand_vec(12, &mut rng), rand_vec(12, &mut rng));
        let (z1, z2) = (rand_vec(20, &mut rng) * 3.0, rand_vec(20, &mut rng));
        let y = &z1 * k.apply(&c1).transpose() + &z2 * k.apply(&c2).transpose();
        let data = FunctionalDataset::shared(y, k).unwrap();
        let cfg = FitConfig { max_outer: 2000, tol: 1e-14, ..no_center() };
        let basis = fit_pca(&data, &fem, 0.0, 3, &cfg).unwrap();
        // iterative solves leave a residual at the solver tolerance, not at roundoff
        assert!(basis.residual_norms[1] < 1e-7 * basis.initial_norm);
        for w in basis.residual_norms.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn exact_rank_one_identity_exhausts() {
        let fem = assemble(&tetrahedron(), 1).unwrap();
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let z = DVector::from_vec(vec![1.0, 2.0, -0.5]);
        let data = FunctionalDataset::shared(&z * v.transpose(), ForwardOperator::identity(4)).unwrap();
        let basis = fit_pca(&data, &fem, 0.0, 3, &no_center()).unwrap();
        assert_eq!(basis.len(), 1);
        assert!(basis.rank_exhausted);
        let empty = FunctionalDataset::shared(DMatrix::from_element(3, 4, 2.0), ForwardOperator::identity(4)).unwrap();
        assert!(matches!(fit_pca(&empty, &fem, 0.0, 2, &FitConfig::default()), Err(Error::DegenerateComponent(_))));
    }

    #[test]
    fn objective_non_increasing_and_sign_canonical() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let fem = assemble(&make_icosphere(1, 1.0).unwrap(), 2).unwrap();
        let k = ForwardOperator::dense(rand_mat(20, fem.dim(), &mut rng), "k").unwrap();
        let data = FunctionalDataset::shared(rand_mat(12, 20, &mut rng), k).unwrap();
        let cfg = FitConfig { max_outer: 40, tol: 1e-9, ..FitConfig::default() };
        let basis = fit_pca(&data, &fem, 0.05, 2, &cfg).unwrap();
        for comp in &basis.components {
            for w in comp.objective_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-10 * w[0].abs().max(1.0), "{w:?}");
            }
            assert!(comp.scores.sum() > 0.0);
            assert!((comp.scores.norm() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn scale_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let fem = assemble(&make_icosphere(1, 1.0).unwrap(), 1).unwrap();
        let k = ForwardOperator::dense(rand_mat(10, 42, &mut rng), "k").unwrap();
        let y = rand_mat(9, 10, &mut rng);
        let cfg = FitConfig { max_outer: 30, solver: SolverOptions::with_tol(1e-13), ..FitConfig::default() };
        let a = fit_pc(&FunctionalDataset::shared(y.clone(), k.clone()).unwrap(), &fem, 0.1, &cfg).unwrap();
        let b = fit_pc(&FunctionalDataset::shared(&y * 3.5, k).unwrap(), &fem, 0.1, &cfg).unwrap();
        assert!((&a.scores - &b.scores).amax() < 1e-8);
        assert!((&a.coefficients * 3.5 - &b.coefficients).norm() < 1e-7 * b.coefficients.norm());
    }

    #[test]
    fn sensor_cov_isotropic_and_rank_one() {
        let fem = assemble(&tetrahedron(), 1).unwrap();
        let k = ForwardOperator::identity(4);
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0, 0.5]);
        let s = &v * v.transpose();
        let basis = fit_from_sensor_cov(&s, &k, &fem, 0.0, 1, &FitConfig::default()).unwrap();
        assert!(m_cos(&fem, &basis.components[0].coefficients, &v).abs() > 1.0 - 1e-12);
        let iso = DMatrix::<f64>::identity(4, 4);
        let basis = fit_from_sensor_cov(&iso, &k, &fem, 0.0, 1, &FitConfig::default()).unwrap();
        // every direction is a fixed point; the iteration stays on its initial direction
        assert!(basis.components[0].converged);
        assert!(basis.components[0].iterations <= 2);
    }

    #[test]
    fn sensor_cov_rejects_bad_matrices() {
        let fem = assemble(&tetrahedron(), 1).unwrap();
        let k = ForwardOperator::identity(4);
        let mut s = DMatrix::<f64>::identity(4, 4);
        s[(0, 1)] = 0.5;
        assert!(matches!(fit_from_sensor_cov(&s, &k, &fem, 0.0, 1, &FitConfig::default()), Err(Error::NotSymmetric(_))));
        let neg = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 1.0, -1.0]));
        assert!(matches!(fit_from_sensor_cov(&neg, &k, &fem, 0.0, 1, &FitConfig::default()), Err(Error::NotPsd(_))));
    }

    #[test]
    fn dataset_validation() {
        let k = ForwardOperator::identity(3);
        assert!(FunctionalDataset::shared(DMatrix::zeros(2, 4), k.clone()).is_err());
        assert!(FunctionalDataset::new(DMatrix::zeros(2, 3), Operators::PerSample(vec![k.clone()])).is_err());
        assert!(matches!(FunctionalDataset::shared(DMatrix::zeros(0, 3), k), Err(Error::InsufficientSamples(_))));
    }
}

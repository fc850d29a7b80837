//! Synthetic experiments and recovery metrics.
//!
//! Every generator is a pure function of its spec and seed. Independent parts
//! of an experiment (scores, operators, noise) draw from separate ChaCha
//! streams, so switching noise off keeps everything else identical.

use nalgebra::{DMatrix, DVector, Rotation3, SymmetricEigen, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::covpca::CovSample;
use crate::error::{Error, Result};
use crate::fem::{gradient_energy, Coefficients, FemSystem};
use crate::funcpca::{FitConfig, FunctionalDataset, Operators, PcBasis, PcComponent, SignConvention};
use crate::mesh::TriMesh;
use crate::operator::ForwardOperator;
use crate::solve::{solve_regularized_from, GramOperator};

const STREAM_BASIS: u64 = 1;
const STREAM_SCORES: u64 = 2;
const STREAM_OPERATORS: u64 = 3;
const STREAM_NOISE: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn default_width() -> f64 {
    0.5
}

fn default_gain() -> f64 {
    100.0
}

/// Synthetic forward operator families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OperatorSpec {
    /// `s = d·κ`, the function is observed directly.
    Identity,
    /// i.i.d. standard normal entries.
    Gaussian { sensors: usize },
    /// Sensors on a sphere around the mesh reading heat-kernel-weighted
    /// (scalar) or dipole-like (vector-valued) averages of the nodal values.
    /// `width` is relative to the mesh radius; the operator is scaled so that
    /// its largest gain on unit L²-norm functions equals `gain`.
    Smoothing {
        sensors: usize,
        #[serde(default = "default_width")]
        width: f64,
        #[serde(default = "default_gain")]
        gain: f64,
    },
}

impl OperatorSpec {
    pub fn smoothing(sensors: usize) -> Self {
        OperatorSpec::Smoothing { sensors, width: default_width(), gain: default_gain() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub channels: usize,
    /// Component standard deviations, strictly decreasing.
    pub sigmas: Vec<f64>,
    /// `m` functions or `n` covariances.
    pub samples: usize,
    pub noise_sigma: f64,
    pub operator: OperatorSpec,
    #[serde(default)]
    pub per_sample_operators: bool,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::InvalidConfig("channels must be at least 1".into()));
        }
        if self.sigmas.is_empty() {
            return Err(Error::InvalidConfig("at least one component standard deviation is required".into()));
        }
        if self.sigmas.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidConfig("component standard deviations must be positive".into()));
        }
        if self.sigmas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidConfig("component standard deviations must be strictly decreasing".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidConfig("noise_sigma must be finite and nonnegative".into()));
        }
        if self.samples == 0 {
            return Err(Error::InvalidConfig("samples must be at least 1".into()));
        }
        match &self.operator {
            OperatorSpec::Identity => {}
            OperatorSpec::Gaussian { sensors } if *sensors == 0 => {
                return Err(Error::InvalidConfig("sensor count must be positive".into()))
            }
            OperatorSpec::Smoothing { sensors, width, gain } => {
                if *sensors == 0 || !(*width > 0.0) || !(*gain > 0.0) {
                    return Err(Error::InvalidConfig("smoothing operator needs positive sensors, width and gain".into()));
                }
            }
            OperatorSpec::Gaussian { .. } => {}
        }
        Ok(())
    }

    pub fn components(&self) -> usize {
        self.sigmas.len()
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

fn centroid_and_radius(mesh: &TriMesh) -> ([f64; 3], f64) {
    let n = mesh.node_count() as f64;
    let mut c = [0.0; 3];
    for p in mesh.nodes() {
        for i in 0..3 {
            c[i] += p[i] / n;
        }
    }
    let r = mesh.nodes().iter().map(|p| dist2(p, &c)).fold(0.0, f64::max).sqrt();
    (c, r)
}

/// Indices of `count` well-separated nodes, greedily maximizing the minimum distance.
pub fn farthest_point_sample(mesh: &TriMesh, count: usize, start: usize) -> Vec<usize> {
    let nodes = mesh.nodes();
    let mut chosen = vec![start % nodes.len()];
    let mut mind: Vec<f64> = nodes.iter().map(|p| dist2(p, &nodes[chosen[0]])).collect();
    while chosen.len() < count.min(nodes.len()) {
        let (next, _) = mind.iter().enumerate().fold((0, -1.0), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
        chosen.push(next);
        for (i, p) in nodes.iter().enumerate() {
            mind[i] = mind[i].min(dist2(p, &nodes[next]));
        }
    }
    chosen
}

fn m_gram_schmidt(fem: &FemSystem, raw: Vec<Coefficients>) -> Result<Vec<Coefficients>> {
    let mut out: Vec<Coefficients> = Vec::with_capacity(raw.len());
    for (r, mut v) in raw.into_iter().enumerate() {
        let before = fem.m_norm(&v);
        // two passes keep the result orthonormal to roundoff
        for _ in 0..2 {
            for u in &out {
                let proj = u.dot(&fem.mass_apply(&v));
                v.axpy(-proj, u, 1.0);
            }
        }
        let after = fem.m_norm(&v);
        if !(after > 1e-8 * before) {
            return Err(Error::RankDeficientBasis(format!("function {r} is dependent on its predecessors")));
        }
        out.push(v / after);
    }
    Ok(out)
}

/// Smooth Gaussian bumps before orthonormalization, each with unit M-norm.
pub fn bump_functions(mesh: &TriMesh, fem: &FemSystem, count: usize, seed: u64) -> Result<Vec<Coefficients>> {
    let d = fem.channels();
    let k = fem.nodes();
    if mesh.node_count() != k {
        return Err(Error::DimensionMismatch(format!("mesh has {} nodes, FEM space {k}", mesh.node_count())));
    }
    if count == 0 || count > k * d {
        return Err(Error::InvalidConfig(format!("cannot build {count} functions in a space of dimension {}", k * d)));
    }
    let mut rng = stream(seed, STREAM_BASIS);
    let centers = farthest_point_sample(mesh, count, rng.random_range(0..k));
    let h = 0.5 * (fem.total_area() / (std::f64::consts::PI * count as f64)).sqrt();
    let nodes = mesh.nodes();
    let mut raw = Vec::with_capacity(count);
    for r in 0..count {
        let center = nodes[centers[r % centers.len()]];
        let mut dir: Vec<f64> = (0..d).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
        dir[r % d] = 1.0;
        let mut c = DVector::zeros(k * d);
        for (j, p) in nodes.iter().enumerate() {
            let g = (-dist2(p, &center) / (2.0 * h * h)).exp();
            for q in 0..d {
                c[q * k + j] = dir[q] * g;
            }
        }
        let n = fem.m_norm(&c);
        raw.push(c / n);
    }
    Ok(raw)
}

/// Smooth vector-valued functions, orthonormal in the discrete L² inner product.
pub fn make_orthonormal_basis(mesh: &TriMesh, fem: &FemSystem, count: usize, seed: u64) -> Result<Vec<Coefficients>> {
    let raw = bump_functions(mesh, fem, count, seed)?;
    m_gram_schmidt(fem, raw)
}

fn fibonacci_sphere(n: usize) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.cos(), y, r * phi.sin())
        })
        .collect()
}

fn smoothing_operator(
    mesh: &TriMesh,
    fem: &FemSystem,
    sensors: usize,
    width: f64,
    gain: f64,
    rotation: Option<Rotation3<f64>>,
) -> Result<DMatrix<f64>> {
    let d = fem.channels();
    let k = fem.nodes();
    let (c, radius) = centroid_and_radius(mesh);
    let center = Vector3::new(c[0], c[1], c[2]);
    let h = width * radius;
    let lumped = fem.lumped_mass();
    let mut mat = DMatrix::zeros(sensors, d * k);
    for (a, dir) in fibonacci_sphere(sensors).into_iter().enumerate() {
        let dir = rotation.map_or(dir, |rot| rot * dir);
        let p = center + dir * (1.3 * radius);
        for (j, x) in mesh.nodes().iter().enumerate() {
            let diff = p - Vector3::new(x[0], x[1], x[2]);
            let w = lumped[j] * (-diff.norm_squared() / (2.0 * h * h)).exp();
            if d == 1 {
                mat[(a, j)] = w;
            } else {
                for q in 0..d {
                    mat[(a, q * k + j)] = w * diff[q % 3] / h;
                }
            }
        }
    }
    // scale so that max ‖K f‖ over unit lumped-L² f equals the gain
    let mut b = mat.clone();
    for q in 0..d {
        for j in 0..k {
            b.column_mut(q * k + j).scale_mut(1.0 / lumped[j].sqrt());
        }
    }
    let top = SymmetricEigen::new(&b * b.transpose()).eigenvalues.max().max(0.0).sqrt();
    if !(top > 0.0) {
        return Err(Error::InvalidConfig("smoothing operator vanishes; width too small".into()));
    }
    Ok(mat * (gain / top))
}

fn random_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> Rotation3<f64> {
    let axis = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
    let angle = rng.random_range(-max_angle..max_angle);
    match Unit::try_new(axis, 1e-12) {
        Some(axis) => Rotation3::from_axis_angle(&axis, angle),
        None => Rotation3::identity(),
    }
}

/// Forward operators for a spec: one shared, or one per sample.
pub fn make_operators(spec: &SynthSpec, mesh: &TriMesh, fem: &FemSystem) -> Result<Vec<ForwardOperator>> {
    spec.validate()?;
    if fem.channels() != spec.channels {
        return Err(Error::DimensionMismatch(format!(
            "spec has {} channels, FEM space {}",
            spec.channels,
            fem.channels()
        )));
    }
    let mut rng = stream(spec.seed, STREAM_OPERATORS);
    let count = if spec.per_sample_operators { spec.samples } else { 1 };
    let n = fem.dim();
    (0..count)
        .map(|i| {
            let id = if spec.per_sample_operators { format!("sample-{i}") } else { "shared".to_string() };
            match &spec.operator {
                OperatorSpec::Identity => Ok(ForwardOperator::identity(n)),
                OperatorSpec::Gaussian { sensors } => {
                    let m = DMatrix::from_fn(*sensors, n, |_, _| rng.sample::<f64, _>(StandardNormal));
                    ForwardOperator::dense(m, id)
                }
                OperatorSpec::Smoothing { sensors, width, gain } => {
                    let rot = spec.per_sample_operators.then(|| random_rotation(&mut rng, 0.25));
                    ForwardOperator::dense(smoothing_operator(mesh, fem, *sensors, *width, *gain, rot)?, id)
                }
            }
        })
        .collect()
}

fn check_basis(spec: &SynthSpec, fem: &FemSystem, basis: &[Coefficients]) -> Result<()> {
    if basis.len() != spec.components() {
        return Err(Error::DimensionMismatch(format!(
            "{} basis functions for {} standard deviations",
            basis.len(),
            spec.components()
        )));
    }
    for b in basis {
        fem.check_len(b)?;
    }
    Ok(())
}

fn draw_scores(spec: &SynthSpec) -> DMatrix<f64> {
    let mut rng = stream(spec.seed, STREAM_SCORES);
    let r = spec.components();
    let mut z = DMatrix::zeros(spec.samples, r);
    for l in 0..spec.samples {
        for (j, s) in spec.sigmas.iter().enumerate() {
            z[(l, j)] = s * rng.sample::<f64, _>(StandardNormal);
        }
    }
    z
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalTruth {
    /// `m × R` generating scores.
    pub scores: DMatrix<f64>,
    /// Observations before noise.
    pub clean: DMatrix<f64>,
}

/// `y_l = K_l x_l + ε_l` with `x_l = Σ_r z_lr ψ_r`, `z_lr ~ N(0, σ_r²)`, `ε ~ N(0, σ²)`.
pub fn gen_functional_dataset(
    spec: &SynthSpec,
    mesh: &TriMesh,
    fem: &FemSystem,
    basis: &[Coefficients],
) -> Result<(FunctionalDataset, FunctionalTruth)> {
    spec.validate()?;
    check_basis(spec, fem, basis)?;
    let ops = make_operators(spec, mesh, fem)?;
    let z = draw_scores(spec);
    let m = spec.samples;
    let s = ops[0].rows();
    let mut clean = DMatrix::zeros(m, s);
    for l in 0..m {
        let mut x = DVector::zeros(fem.dim());
        for (r, psi) in basis.iter().enumerate() {
            x.axpy(z[(l, r)], psi, 1.0);
        }
        let k = &ops[if ops.len() == 1 { 0 } else { l }];
        clean.set_row(l, &k.apply(&x).transpose());
    }
    let mut obs = clean.clone();
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut rng = stream(spec.seed, STREAM_NOISE);
        for v in obs.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let operators = if spec.per_sample_operators {
        Operators::PerSample(ops)
    } else {
        Operators::Shared(ops.into_iter().next().expect("one operator"))
    };
    let mut data = FunctionalDataset::new(obs, operators)?;
    data.noise_sigma = Some(spec.noise_sigma);
    Ok((data, FunctionalTruth { scores: z, clean }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovTruth {
    /// `n × R` generating variances `z_ir²`.
    pub variances: DMatrix<f64>,
}

/// `S_i = Σ_r z_ir² (K_i ψ_r)(K_i ψ_r)ᵀ + E_iᵀ E_i` with `E_i` an `s × s` matrix of
/// i.i.d. `N(0, σ²)` entries.
pub fn gen_cov_dataset(
    spec: &SynthSpec,
    mesh: &TriMesh,
    fem: &FemSystem,
    basis: &[Coefficients],
) -> Result<(Vec<CovSample>, CovTruth)> {
    spec.validate()?;
    check_basis(spec, fem, basis)?;
    let ops = make_operators(spec, mesh, fem)?;
    let z = draw_scores(spec);
    let variances = z.map(|v| v * v);
    let normal = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = stream(spec.seed, STREAM_NOISE);
    let mut samples = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let k = ops[if ops.len() == 1 { 0 } else { i }].clone();
        let s = k.rows();
        let mut cov = DMatrix::zeros(s, s);
        for (r, psi) in basis.iter().enumerate() {
            let kp = k.apply(psi);
            cov += &kp * kp.transpose() * variances[(i, r)];
        }
        if spec.noise_sigma > 0.0 {
            let e = DMatrix::from_fn(s, s, |_, _| normal.sample(&mut rng));
            cov += e.tr_mul(&e);
        }
        let cov = (&cov + cov.transpose()) * 0.5;
        samples.push(CovSample::new(cov, k, format!("sample-{i}"))?);
    }
    Ok((samples, CovTruth { variances }))
}

/// `est` with its sign flipped if that makes its M-inner product with `truth` nonnegative.
pub fn align_sign(fem: &FemSystem, truth: &Coefficients, est: &Coefficients) -> Coefficients {
    if truth.dot(&fem.mass_apply(est)) < 0.0 {
        -est
    } else {
        est.clone()
    }
}

/// `Σ_q ‖∇(ψ_q − ψ̂_q)‖²` after sign alignment. Both inputs should be normalized by the caller.
pub fn fidelity_gradient_error(fem: &FemSystem, truth: &Coefficients, est: &Coefficients) -> Result<f64> {
    fem.check_len(truth)?;
    fem.check_len(est)?;
    gradient_energy(fem, &(truth - align_sign(fem, truth, est)))
}

/// `|⟨a, b⟩_M| / (‖a‖_M ‖b‖_M)`.
pub fn m_correlation(fem: &FemSystem, a: &Coefficients, b: &Coefficients) -> f64 {
    let (na, nb) = (fem.m_norm(a), fem.m_norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(&fem.mass_apply(b)) / (na * nb)).abs().min(1.0)
}

/// Angle between the lines spanned by `a` and `b` in the M-inner product,
/// computed from the sine so that small angles keep full precision.
pub fn m_angle(fem: &FemSystem, a: &Coefficients, b: &Coefficients) -> f64 {
    let (na, nb) = (fem.m_norm(a), fem.m_norm(b));
    if na == 0.0 || nb == 0.0 {
        return std::f64::consts::FRAC_PI_2;
    }
    let (ua, ub) = (a / na, b / nb);
    let proj = ua.dot(&fem.mass_apply(&ub));
    let sin = fem.m_norm(&(&ua - &ub * proj)).min(1.0);
    if proj.abs() >= std::f64::consts::FRAC_1_SQRT_2 {
        sin.asin()
    } else {
        proj.abs().min(1.0).acos()
    }
}

/// Kendall rank correlation (tau-b, which also handles ties).
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} values", a.len(), b.len())));
    }
    let n = a.len();
    let (mut conc, mut disc, mut ties_a, mut ties_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let da = (a[i] - a[j]).partial_cmp(&0.0).unwrap_or(std::cmp::Ordering::Equal);
            let db = (b[i] - b[j]).partial_cmp(&0.0).unwrap_or(std::cmp::Ordering::Equal);
            use std::cmp::Ordering::Equal;
            match (da, db) {
                (Equal, Equal) => {}
                (Equal, _) => ties_a += 1,
                (_, Equal) => ties_b += 1,
                _ if da == db => conc += 1,
                _ => disc += 1,
            }
        }
    }
    let denom = (((conc + disc + ties_a) * (conc + disc + ties_b)) as f64).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((conc - disc) as f64 / denom)
}

/// Reconstructs every sample by its own regularized inversion, then runs
/// ordinary PCA on the nodal values. Components are scaled like [`fit_pc`]
/// output (`x ≈ z c` with unit-norm scores).
///
/// [`fit_pc`]: crate::funcpca::fit_pc
pub fn naive_two_step(
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
    let m = data.len();
    let n = fem.dim();
    let mut recon = DMatrix::zeros(m, n);
    let mut prev: Option<Coefficients> = None;
    for l in 0..m {
        let k = data.operator(l);
        k.check_domain(n)?;
        let gram = GramOperator::new(vec![(1.0, k)], fem, lambda)?;
        let (x, _) = solve_regularized_from(&gram, &k.apply_t(&data.observation(l)), prev.as_ref(), config.solver)?;
        recon.set_row(l, &x.transpose());
        prev = Some(x);
    }
    let mean = config.center.then(|| data.sensor_mean());
    if config.center {
        let mu = recon.row_mean();
        for mut row in recon.row_iter_mut() {
            row -= &mu;
        }
    }
    let initial_norm = recon.norm();
    let eig = SymmetricEigen::new(&recon * recon.transpose());
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut residual = recon.clone();
    let mut basis = PcBasis {
        components: Vec::with_capacity(rank),
        initial_norm,
        residual_norms: Vec::new(),
        rank_exhausted: false,
        mean,
    };
    for &idx in order.iter().take(rank) {
        let sv = eig.eigenvalues[idx].max(0.0).sqrt();
        if !(sv > crate::funcpca::RANK_EXHAUSTED_RTOL * initial_norm) {
            if basis.components.is_empty() {
                return Err(Error::DegenerateComponent("reconstructions are identically zero".into()));
            }
            basis.rank_exhausted = true;
            break;
        }
        let mut u = eig.eigenvectors.column(idx).into_owned();
        let mut c = recon.tr_mul(&u);
        let s: f64 = u.sum();
        if s < 0.0 || (s == 0.0 && u.iter().find(|v| **v != 0.0).is_some_and(|v| *v < 0.0)) {
            u.neg_mut();
            c.neg_mut();
        }
        residual -= &u * c.transpose();
        basis.residual_norms.push(residual.norm());
        basis.components.push(PcComponent {
            coefficients: c,
            scores: u,
            lambda,
            iterations: 1,
            converged: true,
            sign_convention: SignConvention::PositiveScoreSum,
            objective_history: Vec::new(),
            last_solve: None,
        });
    }
    if basis.len() < rank && !basis.rank_exhausted {
        basis.rank_exhausted = true;
    }
    Ok(basis)
}

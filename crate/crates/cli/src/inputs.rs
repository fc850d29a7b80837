//! Loading meshes, operators and observations named in a [`RunConfig`].

use std::path::Path;

use invpca::funcpca::Operators;
use invpca::io::read_matrix;
use invpca::{
    assemble, load_mesh, make_icosphere, CovSample, Error, FemSystem, ForwardOperator, FunctionalDataset, MeshFormat,
    Result, TriMesh,
};

use crate::config::RunConfig;

pub fn mesh(cfg: &RunConfig) -> Result<TriMesh> {
    match (&cfg.mesh, cfg.icosphere) {
        (Some(path), None) => {
            if !path.exists() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("mesh {} not found", path.display()),
                )));
            }
            let format = MeshFormat::detect(path).ok_or_else(|| {
                Error::Parse(format!("cannot tell the mesh format of {}", path.display()))
            })?;
            load_mesh(path, format)
        }
        (None, Some(sub)) => make_icosphere(sub, cfg.radius),
        _ => Err(Error::InvalidConfig("a mesh or an icosphere level is required".into())),
    }
}

pub fn fem(cfg: &RunConfig, mesh: &TriMesh) -> Result<FemSystem> {
    assemble(mesh, cfg.channels)
}

fn operator_file(path: &Path) -> Result<ForwardOperator> {
    let m = read_matrix(path)?;
    ForwardOperator::dense(m, path.display().to_string())
}

/// The configured operators, checked against the function space.
pub fn operators(cfg: &RunConfig, fem: &FemSystem, samples: usize) -> Result<Operators> {
    let dim = fem.dim();
    if !cfg.operators.is_empty() {
        if cfg.operators.len() != samples {
            return Err(Error::DimensionMismatch(format!(
                "{} operators for {samples} samples",
                cfg.operators.len()
            )));
        }
        let ops = cfg.operators.iter().map(|p| operator_file(p)).collect::<Result<Vec<_>>>()?;
        for k in &ops {
            k.check_domain(dim)?;
        }
        return Ok(Operators::PerSample(ops));
    }
    let k = match cfg.operator.as_deref() {
        Some("identity") => ForwardOperator::identity(dim),
        Some(p) => operator_file(Path::new(p))?,
        None => return Err(Error::InvalidConfig("an operator or per-sample operators are required".into())),
    };
    k.check_domain(dim)?;
    Ok(Operators::Shared(k))
}

pub fn functional(cfg: &RunConfig, fem: &FemSystem) -> Result<FunctionalDataset> {
    let path = cfg.data.as_ref().ok_or_else(|| Error::InvalidConfig("data is required".into()))?;
    let y = read_matrix(path)?;
    let ops = operators(cfg, fem, y.nrows())?;
    FunctionalDataset::new(y, ops)
}

/// Covariance samples from covariance files or from raw signals.
pub fn covariances(cfg: &RunConfig, fem: &FemSystem) -> Result<Vec<CovSample>> {
    let (paths, from_signals) = match (cfg.covariances.is_empty(), cfg.signals.is_empty()) {
        (false, true) => (&cfg.covariances, false),
        (true, false) => (&cfg.signals, true),
        (false, false) => return Err(Error::InvalidConfig("give covariances or signals, not both".into())),
        (true, true) => return Err(Error::InvalidConfig("covariances or signals are required".into())),
    };
    let ops = match operators(cfg, fem, paths.len())? {
        Operators::Shared(k) => vec![k; paths.len()],
        Operators::PerSample(ops) => ops,
    };
    let mut out = Vec::with_capacity(paths.len());
    for (path, k) in paths.iter().zip(ops) {
        let m = read_matrix(path)?;
        let id = path.display().to_string();
        if m.ncols() != k.rows() {
            return Err(Error::DimensionMismatch(format!(
                "{id} has {} sensor columns, its operator has {} rows",
                m.ncols(),
                k.rows()
            )));
        }
        out.push(if from_signals { CovSample::from_signals(&m, k, id)? } else { CovSample::new(m, k, id)? });
    }
    Ok(out)
}

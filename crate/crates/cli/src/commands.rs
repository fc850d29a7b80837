//! Subcommand bodies. Each returns after writing its artifacts into `out_dir`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use invpca::funcpca::Operators;
use invpca::io::{write_container, write_csv_matrix};
use invpca::regsel::{kfold_cv, lcurve, LambdaReport};
use invpca::synth::{gen_cov_dataset, gen_functional_dataset, make_orthonormal_basis};
use invpca::{
    energy_map, fit_pca, fit_population_cov, write_mesh, Error, FemSystem, ForwardOperator, MeshFormat, MeshStats,
    Result,
};
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{DatasetKind, RunConfig, SelectCriterion};
use crate::inputs;

fn pc_header(r: usize) -> Vec<String> {
    (1..=r).map(|i| format!("pc{i}")).collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn prepare_out(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out_dir)?;
    Ok(&cfg.out_dir)
}

/// Common report envelope; timing is left out of reproducible runs.
fn envelope(command: &str, cfg: &RunConfig, started: Instant, body: Value) -> Value {
    let mut v = json!({ "command": command, "config": cfg, "result": body });
    if !cfg.reproducible {
        v["elapsed_seconds"] = json!(started.elapsed().as_secs_f64());
    }
    v
}

/// `κ × R` per-node energy of unit M-norm components.
fn energy_maps(fem: &FemSystem, comps: &[&invpca::Coefficients]) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(fem.nodes(), comps.len());
    for (r, c) in comps.iter().enumerate() {
        let n = fem.m_norm(c);
        let unit = if n > 0.0 { *c / n } else { (*c).clone() };
        out.set_column(r, &energy_map(fem, &unit)?);
    }
    Ok(out)
}

fn rows_to_matrix(rows: &[&invpca::Coefficients], cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols, |r, j| rows[r][j])
}

pub fn fit_func(cfg: &RunConfig) -> Result<()> {
    let started = Instant::now();
    let lambda = cfg.lambda()?;
    let mesh = inputs::mesh(cfg)?;
    let fem = inputs::fem(cfg, &mesh)?;
    let data = inputs::functional(cfg, &fem)?;
    let out = prepare_out(cfg)?;
    let basis = fit_pca(&data, &fem, lambda, cfg.rank, &cfg.fit_config())?;
    log::info!("fit-func: {} components in {:.3}s", basis.len(), started.elapsed().as_secs_f64());

    let r = basis.len();
    write_container(out.join("components.ipca"), &basis.coefficient_matrix())?;
    write_csv_matrix(out.join("scores.csv"), &pc_header(r), &basis.score_matrix())?;
    let comps: Vec<_> = basis.components.iter().map(|c| &c.coefficients).collect();
    write_csv_matrix(out.join("energy_maps.csv"), &pc_header(r), &energy_maps(&fem, &comps)?)?;
    let components: Vec<Value> = basis
        .components
        .iter()
        .map(|c| {
            json!({
                "iterations": c.iterations,
                "converged": c.converged,
                "objective_history": c.objective_history,
                "m_norm": fem.m_norm(&c.coefficients),
                "last_solve": c.last_solve,
            })
        })
        .collect();
    let body = json!({
        "lambda": lambda,
        "samples": data.len(),
        "sensors": data.sensors(),
        "initial_norm": basis.initial_norm,
        "residual_norms": basis.residual_norms,
        "rank_exhausted": basis.rank_exhausted,
        "sign_convention": basis.components.first().map(|c| c.sign_convention),
        "components": components,
    });
    write_json(&out.join("report.json"), &envelope("fit-func", cfg, started, body))
}

pub fn fit_cov(cfg: &RunConfig) -> Result<()> {
    let started = Instant::now();
    let lambda = cfg.lambda()?;
    let mesh = inputs::mesh(cfg)?;
    let fem = inputs::fem(cfg, &mesh)?;
    let samples = inputs::covariances(cfg, &fem)?;
    let out = prepare_out(cfg)?;
    let res = fit_population_cov(&samples, &fem, lambda, cfg.rank, &cfg.fit_config())?;
    log::info!("fit-cov: {} components in {:.3}s", res.len(), started.elapsed().as_secs_f64());

    let r = res.len();
    let comps: Vec<_> = res.components.iter().collect();
    write_container(out.join("components.ipca"), &rows_to_matrix(&comps, fem.dim()))?;
    write_csv_matrix(out.join("variances_brain.csv"), &pc_header(r), &res.variances_brain)?;
    write_csv_matrix(out.join("variances_sensor.csv"), &pc_header(r), &res.variances_sensor)?;
    write_csv_matrix(out.join("energy_maps.csv"), &pc_header(r), &energy_maps(&fem, &comps)?)?;
    let components: Vec<Value> = (0..r)
        .map(|k| {
            json!({
                "iterations": res.iterations[k],
                "converged": res.converged[k],
                "objective_history": res.objective_histories[k],
                "m_norm": fem.m_norm(&res.components[k]),
                "last_solve": res.last_solves[k],
            })
        })
        .collect();
    let body = json!({
        "lambda": lambda,
        "samples": samples.iter().map(|s| json!({"id": s.id(), "sensors": s.sensors(), "clipped_mass": s.clipped_mass()})).collect::<Vec<_>>(),
        "initial_residual": res.initial_residual,
        "residual_norms": res.residual_norms,
        "rank_exhausted": res.rank_exhausted,
        "sign_convention": res.sign_convention,
        "components": components,
    });
    write_json(&out.join("report.json"), &envelope("fit-cov", cfg, started, body))
}

fn write_operators(out: &Path, ops: &Operators) -> Result<Vec<PathBuf>> {
    let write = |name: String, k: &ForwardOperator| -> Result<PathBuf> {
        let p = out.join(name);
        write_container(&p, &k.to_dense())?;
        Ok(p)
    };
    match ops {
        Operators::Shared(k) => Ok(vec![write("operator.ipca".into(), k)?]),
        Operators::PerSample(ks) => ks.iter().enumerate().map(|(i, k)| write(format!("operator-{i:03}.ipca"), k)).collect(),
    }
}

fn file_names(paths: &[PathBuf]) -> Vec<String> {
    paths.iter().map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned()).collect()
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let started = Instant::now();
    let spec = cfg.spec.as_ref().ok_or_else(|| Error::InvalidConfig("synth needs a spec".into()))?;
    spec.validate()?;
    let kind = cfg.kind.unwrap_or(DatasetKind::Functional);
    let mesh = inputs::mesh(cfg)?;
    let fem = invpca::assemble(&mesh, spec.channels)?;
    let out = prepare_out(cfg)?;
    let basis = make_orthonormal_basis(&mesh, &fem, spec.components(), spec.seed)?;
    write_mesh(&mesh, out.join("mesh.off"), MeshFormat::Off)?;
    let basis_refs: Vec<_> = basis.iter().collect();
    write_container(out.join("basis.ipca"), &rows_to_matrix(&basis_refs, fem.dim()))?;
    let r = spec.components();
    let files = match kind {
        DatasetKind::Functional => {
            let (data, truth) = gen_functional_dataset(spec, &mesh, &fem, &basis)?;
            write_container(out.join("data.ipca"), data.observations())?;
            write_container(out.join("clean.ipca"), &truth.clean)?;
            write_csv_matrix(out.join("scores_true.csv"), &pc_header(r), &truth.scores)?;
            let ops = write_operators(out, data.operators())?;
            json!({ "data": "data.ipca", "clean": "clean.ipca", "scores_true": "scores_true.csv", "operators": file_names(&ops) })
        }
        DatasetKind::Covariance => {
            let (samples, truth) = gen_cov_dataset(spec, &mesh, &fem, &basis)?;
            let mut covs = Vec::new();
            for (i, s) in samples.iter().enumerate() {
                let p = out.join(format!("cov-{i:03}.ipca"));
                write_container(&p, s.cov())?;
                covs.push(p);
            }
            let ops = if spec.per_sample_operators {
                Operators::PerSample(samples.iter().map(|s| s.operator().clone()).collect())
            } else {
                Operators::Shared(samples[0].operator().clone())
            };
            let ops = write_operators(out, &ops)?;
            write_csv_matrix(out.join("variances_true.csv"), &pc_header(r), &truth.variances)?;
            json!({ "covariances": file_names(&covs), "variances_true": "variances_true.csv", "operators": file_names(&ops) })
        }
    };
    let body = json!({
        "kind": kind,
        "spec": spec,
        "mesh": "mesh.off",
        "basis": "basis.ipca",
        "nodes": fem.nodes(),
        "files": files,
    });
    write_json(&out.join("manifest.json"), &envelope("synth", cfg, started, body))
}

fn check_select(cfg: &RunConfig) -> Result<()> {
    if cfg.lambda_grid.is_empty() {
        return Err(Error::InvalidConfig("lambda grid is empty".into()));
    }
    Ok(())
}

pub fn select(cfg: &RunConfig) -> Result<()> {
    let started = Instant::now();
    check_select(cfg)?;
    let criterion = cfg.criterion.unwrap_or(SelectCriterion::Cv);
    let mesh = inputs::mesh(cfg)?;
    let fem = inputs::fem(cfg, &mesh)?;
    let fit = cfg.fit_config();
    let report: LambdaReport = match criterion {
        SelectCriterion::Cv => {
            let data = inputs::functional(cfg, &fem)?;
            if cfg.folds > data.len() {
                return Err(Error::InsufficientSamples(format!("{} samples for {} folds", data.len(), cfg.folds)));
            }
            let out = prepare_out(cfg)?;
            let rep = kfold_cv(&data, &fem, &cfg.lambda_grid, cfg.folds, cfg.rank, &fit, cfg.seed)?;
            let errs = rep.cv_error.as_ref().expect("cv report has errors");
            let m = DMatrix::from_fn(rep.grid.len(), 2, |i, j| if j == 0 { rep.grid[i] } else { errs[i] });
            write_csv_matrix(out.join("cv.csv"), &["lambda".into(), "error".into()], &m)?;
            rep
        }
        SelectCriterion::Lcurve => {
            let samples = inputs::covariances(cfg, &fem)?;
            let out = prepare_out(cfg)?;
            let rep = lcurve(&samples, &fem, &cfg.lambda_grid, cfg.rank, &fit)?;
            let reg = rep.regularity.as_ref().expect("l-curve has regularity");
            let res = rep.residual.as_ref().expect("l-curve has residuals");
            let m = DMatrix::from_fn(rep.grid.len(), 3, |i, j| [rep.grid[i], reg[i], res[i]][j]);
            write_csv_matrix(out.join("lcurve.csv"), &["lambda".into(), "regularity".into(), "residual".into()], &m)?;
            rep
        }
    };
    let body = serde_json::to_value(&report).map_err(|e| Error::Parse(e.to_string()))?;
    write_json(&cfg.out_dir.join("report.json"), &envelope("select", cfg, started, body))
}

#[derive(Serialize)]
struct MeshInfo {
    #[serde(flatten)]
    stats: MeshStats,
    channels: usize,
    unknowns: usize,
}

/// Prints mesh statistics as JSON; optionally writes the mesh out.
pub fn mesh_info(cfg: &RunConfig, write: Option<&Path>) -> Result<String> {
    let mesh = inputs::mesh(cfg)?;
    if let Some(p) = write {
        let format = if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("off")) {
            MeshFormat::Off
        } else {
            MeshFormat::Container
        };
        write_mesh(&mesh, p, format)?;
    }
    let info = MeshInfo { stats: mesh.stats(), channels: cfg.channels, unknowns: mesh.node_count() * cfg.channels };
    serde_json::to_string_pretty(&info).map_err(|e| Error::Parse(e.to_string()))
}

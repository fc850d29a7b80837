//! Choosing the regularization strength: K-fold cross-validation and L-curves.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covpca::{fit_population_cov, CovSample};
use crate::error::{Error, Result};
use crate::fem::{gradient_energy, FemSystem};
use crate::funcpca::{fit_pca, FitConfig, FunctionalDataset, PcBasis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    KfoldCv,
    Lcurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaReport {
    pub grid: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cv_error: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regularity: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residual: Option<Vec<f64>>,
    /// Selected λ; the L-curve is reported without a choice.
    pub chosen: Option<f64>,
    pub criterion: Criterion,
}

fn argmin_prefer_larger(grid: &[f64], errors: &[f64]) -> f64 {
    let mut best = 0;
    for (i, e) in errors.iter().enumerate() {
        let b = errors[best];
        if *e < b || (*e == b && grid[i] > grid[best]) {
            best = i;
        }
    }
    grid[best]
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("lambda grid is empty".into()));
    }
    if grid.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
        return Err(Error::InvalidConfig("lambda grid values must be finite and nonnegative".into()));
    }
    Ok(())
}

/// Seeded shuffle of `0..m` cut into `folds` contiguous, nearly equal parts.
pub fn fold_assignment(m: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (m / folds, m % folds);
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let len = base + usize::from(f < extra);
        out.push(idx[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Squared residual of each observation after least-squares regression on `{K_l f_r}`.
pub fn heldout_residuals(data: &FunctionalDataset, basis: &PcBasis) -> Vec<f64> {
    (0..data.len())
        .map(|l| {
            let mut y = data.observation(l);
            if let Some(mu) = &basis.mean {
                y -= mu;
            }
            if basis.is_empty() {
                return y.norm_squared();
            }
            let k = data.operator(l);
            let b = DMatrix::from_columns(&basis.components.iter().map(|c| k.apply(&c.coefficients)).collect::<Vec<_>>());
            let svd = b.clone().svd(true, true);
            let eps = f64::EPSILON * svd.singular_values.max() * b.nrows().max(b.ncols()) as f64;
            let z = svd.solve(&y, eps).unwrap_or_else(|_| DVector::zeros(b.ncols()));
            (y - b * z).norm_squared()
        })
        .collect()
}

/// Fold-summed held-out error for each λ, with an arbitrary fitting routine.
#[allow(clippy::too_many_arguments)]
pub fn kfold_cv_with<F>(
    data: &FunctionalDataset,
    fem: &FemSystem,
    grid: &[f64],
    folds: usize,
    rank: usize,
    config: &FitConfig,
    seed: u64,
    fit: F,
) -> Result<LambdaReport>
where
    F: Fn(&FunctionalDataset, &FemSystem, f64, usize, &FitConfig) -> Result<PcBasis> + Sync,
{
    check_grid(grid)?;
    if folds < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 folds, got {folds}")));
    }
    if data.len() < folds {
        return Err(Error::InsufficientSamples(format!("{} samples for {folds} folds", data.len())));
    }
    let parts = fold_assignment(data.len(), folds, seed);
    let splits: Vec<(FunctionalDataset, FunctionalDataset)> = parts
        .iter()
        .enumerate()
        .map(|(f, test)| {
            let train: Vec<usize> = parts.iter().enumerate().filter(|(g, _)| *g != f).flat_map(|(_, p)| p.iter().copied()).collect();
            (data.subset(&train), data.subset(test))
        })
        .collect();
    let errors: Vec<f64> = grid
        .par_iter()
        .map(|&lambda| {
            let mut total = 0.0;
            for (train, test) in &splits {
                let basis = fit(train, fem, lambda, rank, config)?;
                total += heldout_residuals(test, &basis).iter().sum::<f64>();
            }
            Ok(total)
        })
        .collect::<Result<_>>()?;
    Ok(LambdaReport {
        grid: grid.to_vec(),
        chosen: Some(argmin_prefer_larger(grid, &errors)),
        cv_error: Some(errors),
        regularity: None,
        residual: None,
        criterion: Criterion::KfoldCv,
    })
}

/// K-fold cross-validation of [`fit_pca`] over a λ grid.
pub fn kfold_cv(
    data: &FunctionalDataset,
    fem: &FemSystem,
    grid: &[f64],
    folds: usize,
    rank: usize,
    config: &FitConfig,
    seed: u64,
) -> Result<LambdaReport> {
    kfold_cv_with(data, fem, grid, folds, rank, config, seed, fit_pca)
}

/// Regularity `Σ_r c_rᵀ A c_r` of the fitted components, scale included, against the residual
/// `Σ_i ‖Q_i − Σ_r z_ir (K_i f_r)ᵀ‖_F`, one point per λ.
pub fn lcurve(samples: &[CovSample], fem: &FemSystem, grid: &[f64], rank: usize, config: &FitConfig) -> Result<LambdaReport> {
    check_grid(grid)?;
    let points: Vec<(f64, f64)> = grid
        .par_iter()
        .map(|&lambda| {
            let res = fit_population_cov(samples, fem, lambda, rank, config)?;
            let mut regularity = 0.0;
            for c in &res.components {
                regularity += gradient_energy(fem, c)?;
            }
            let residual = res.residual_norms.last().copied().unwrap_or(res.initial_residual);
            Ok((regularity, residual))
        })
        .collect::<Result<_>>()?;
    Ok(LambdaReport {
        grid: grid.to_vec(),
        cv_error: None,
        regularity: Some(points.iter().map(|p| p.0).collect()),
        residual: Some(points.iter().map(|p| p.1).collect()),
        chosen: None,
        criterion: Criterion::Lcurve,
    })
}

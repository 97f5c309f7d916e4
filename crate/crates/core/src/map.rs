//! MAP estimation and the cross-validation harness that picks its
//! hyperparameters.
//!
//! MAP runs the VB sweep with every variance pinned to zero and each Gamma
//! posterior replaced by its mode, floored at `1e-12`. The monitored
//! objective is the log posterior (with the quadratic bound standing in for
//! non-Gaussian likelihoods).

use std::f64::consts::PI;
use std::fmt::Write as _;

use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::experiments::metrics::dataset_rmse;
use crate::model::{BiasSide, Hyperparams, ModelState, ModelVariant};
use crate::schema::Schema;
use crate::store::Dataset;
use crate::vb::data::{PseudoData, Residuals, TrainingData};
use crate::vb::engine::{fit_from, FitOutput};

fn ln_gamma_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

fn bias_side_log_density(side: &BiasSide) -> f64 {
    let s2 = side.scale;
    let d = side.mean.len() as f64;
    let sq: f64 = side.mean.iter().map(|&b| (b - side.hyper_mean).powi(2)).sum();
    -0.5 * d * (2.0 * PI * s2).ln() - sq / (2.0 * s2) - 0.5 * (2.0 * PI).ln() - 0.5 * side.hyper_mean.powi(2)
}

/// Log posterior (up to the evidence) at a point estimate.
pub fn log_posterior(
    state: &ModelState,
    data: &TrainingData,
    pseudo: &PseudoData,
    resid: &Residuals,
    hyper: &Hyperparams,
) -> Result<f64> {
    let schema = &data.schema;
    let ln_2pi = (2.0 * PI).ln();
    let mut likelihood = 0.0;
    let mut priors = 0.0;
    for m in 0..schema.n_relations() {
        let idx = &data.relations[m];
        let sq: f64 = resid.0[m].iter().map(|r| r * r).sum();
        match &pseudo.blocks[m] {
            None => {
                let tau = state.noise.mean(m);
                let n = idx.n_obs() as f64;
                likelihood += 0.5 * n * (tau.ln() - ln_2pi) - 0.5 * tau * sq;
                priors += ln_gamma_pdf(tau, hyper.p0, hyper.q0);
            }
            Some(block) => {
                let offset: f64 = block
                    .xi
                    .iter()
                    .zip(&idx.values)
                    .map(|(&xi0, &x)| idx.link.surrogate_offset(xi0, x))
                    .sum();
                likelihood += -offset - 0.5 * block.kappa * sq;
            }
        }
    }
    let tied = state.variant.tied_ard();
    for k in 0..state.rank() {
        for (e, f) in state.factors.iter().enumerate() {
            let alpha = state.ard.mean(e, k);
            let d = f.mean.nrows() as f64;
            let sq: f64 = f.mean.column(k).iter().map(|u| u * u).sum();
            priors += 0.5 * d * (alpha.ln() - ln_2pi) - 0.5 * alpha * sq;
            if !tied || e == 0 {
                priors += ln_gamma_pdf(alpha, hyper.a0, hyper.b0);
            }
        }
    }
    if state.bias.enabled {
        for rb in &state.bias.relations {
            priors += bias_side_log_density(&rb.rows) + bias_side_log_density(&rb.cols);
        }
    }
    for (name, v) in [("likelihood", likelihood), ("priors", priors)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("log posterior term `{name}` is {v}")));
        }
    }
    Ok(likelihood + priors)
}

/// MAP fit from a seeded initialization. `variant` may be given in its VB or
/// MAP form.
pub fn fit_map(
    schema: &Schema,
    data: &Dataset,
    hyper: &Hyperparams,
    variant: ModelVariant,
    seed: u64,
) -> Result<FitOutput> {
    let state = ModelState::init(schema, hyper, variant.to_map(), seed)?;
    fit_from(state, data, hyper)
}

/// `n` log-spaced values from `lo` to `hi`, inclusive.
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.log10(), hi.log10());
            (0..n)
                .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
                .collect()
        }
    }
}

/// Grid search setup. Each axis sets both parameters of one Gamma prior:
/// `a0 = b0` for the ARD precisions and `p0 = q0` for the noise.
#[derive(Clone, Debug, PartialEq)]
pub struct MapConfig {
    pub a0b0_grid: Vec<f64>,
    pub p0q0_grid: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
    /// Iteration limits and step settings shared by every fit.
    pub base: Hyperparams,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            a0b0_grid: logspace(1e-6, 1e4, 11),
            p0q0_grid: logspace(1e-6, 1e4, 11),
            folds: 2,
            seed: 0,
            base: Hyperparams::default(),
        }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.a0b0_grid.is_empty() || self.p0q0_grid.is_empty() {
            return Err(Error::invalid("hyperparameter grids must be non-empty"));
        }
        if let Some(v) = self
            .a0b0_grid
            .iter()
            .chain(&self.p0q0_grid)
            .find(|v| !(**v > 0.0 && v.is_finite()))
        {
            return Err(Error::invalid(format!("grid values must be positive, got {v}")));
        }
        if self.folds < 2 {
            return Err(Error::invalid(format!("need at least 2 folds, got {}", self.folds)));
        }
        self.base.validate()
    }

    /// Number of fits a full grid search performs.
    pub fn n_fits(&self) -> usize {
        self.a0b0_grid.len() * self.p0q0_grid.len() * self.folds
    }

    fn hyper(&self, a0b0: f64, p0q0: f64) -> Hyperparams {
        self.base.with_ard_prior(a0b0).with_noise_prior(p0q0)
    }
}

/// One fold of one grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct CvCell {
    pub a0b0: f64,
    pub p0q0: f64,
    pub fold: usize,
    /// Pooled validation RMSE; `NaN` when the fit failed.
    pub val_rmse: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct CvOutcome {
    pub best: Hyperparams,
    pub best_rmse: f64,
    pub table: Vec<CvCell>,
    pub fits: usize,
}

impl CvOutcome {
    /// `a0b0,p0q0,fold,val_rmse`, one row per fit, in grid order.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("a0b0,p0q0,fold,val_rmse\n");
        for c in &self.table {
            let _ = writeln!(out, "{},{},{},{}", c.a0b0, c.p0q0, c.fold, c.val_rmse);
        }
        out
    }
}

/// Grid search over the MAP priors with k-fold cross-validation inside
/// `data`. A failing fit marks its grid point unusable but does not stop
/// the search.
pub fn cv_map(schema: &Schema, data: &Dataset, config: &MapConfig, variant: ModelVariant) -> Result<CvOutcome> {
    config.validate()?;
    let folds = data.kfold(config.folds, config.seed)?;
    let cells: Vec<(f64, f64, usize)> = config
        .a0b0_grid
        .iter()
        .flat_map(|&a| {
            config
                .p0q0_grid
                .iter()
                .flat_map(move |&p| (0..config.folds).map(move |f| (a, p, f)))
        })
        .collect();
    let table: Vec<CvCell> = cells
        .par_iter()
        .map(|&(a0b0, p0q0, fold)| {
            let (train, val) = &folds[fold];
            let result = fit_map(schema, train, &config.hyper(a0b0, p0q0), variant, config.seed)
                .and_then(|out| dataset_rmse(&out.state, val));
            let (val_rmse, error) = match result {
                Ok(v) => (v, None),
                Err(e) => (f64::NAN, Some(e.to_string())),
            };
            CvCell {
                a0b0,
                p0q0,
                fold,
                val_rmse,
                error,
            }
        })
        .collect();

    let mut best: Option<(f64, f64, f64)> = None;
    for point in table.chunks(config.folds) {
        let mean = point.iter().map(|c| c.val_rmse).sum::<f64>() / config.folds as f64;
        if mean.is_finite() && best.is_none_or(|(_, _, b)| mean < b) {
            best = Some((point[0].a0b0, point[0].p0q0, mean));
        }
    }
    let (a, p, best_rmse) = best.ok_or_else(|| {
        let first = table.iter().find_map(|c| c.error.clone()).unwrap_or_default();
        Error::invalid(format!("every cross-validation fit failed; first error: {first}"))
    })?;
    Ok(CvOutcome {
        best: config.hyper(a, p),
        best_rmse,
        fits: table.len(),
        table,
    })
}

/// Cross-validates, then refits on all of `data` at the chosen point.
pub fn fit_map_cv(
    schema: &Schema,
    data: &Dataset,
    config: &MapConfig,
    variant: ModelVariant,
) -> Result<(CvOutcome, FitOutput)> {
    let cv = cv_map(schema, data, config, variant)?;
    let fit = fit_map(schema, data, &cv.best, variant, config.seed)?;
    Ok((cv, fit))
}

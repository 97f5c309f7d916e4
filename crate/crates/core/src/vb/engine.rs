//! The sweep loop shared by the VB and MAP engines.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::map::log_posterior;
use crate::model::{Hyperparams, ModelState, ModelVariant};
use crate::schema::Schema;
use crate::store::Dataset;

use super::data::{PseudoData, Residuals, TrainingData};
use super::elbo::elbo;
use super::updates::{
    update_ard_with, update_bias_with, update_factor_set, update_pseudodata, update_tau_with, Inference,
};

/// Objective drops larger than this (relative) abort a Gaussian-only fit.
pub const DIVERGENCE_TOLERANCE: f64 = 1e-8;

/// One full sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    /// 1-based sweep number.
    pub iteration: usize,
    /// ELBO for VB fits, log posterior for MAP fits.
    pub objective: f64,
    /// Training RMSE per relation (`NaN` for relations without training
    /// entries). Non-Gaussian relations score the link mean.
    pub train_rmse: Vec<f64>,
    /// Largest absolute change of a factor mean during the sweep.
    pub max_delta: f64,
}

#[derive(Clone, Debug)]
pub struct FitOutput {
    pub state: ModelState,
    pub trace: Vec<TraceRecord>,
    pub converged: bool,
}

impl FitOutput {
    pub fn final_objective(&self) -> Option<f64> {
        self.trace.last().map(|t| t.objective)
    }

    /// `iteration,elbo,rmse_1,...,rmse_M,max_delta` (`log_posterior` in place
    /// of `elbo` for MAP fits).
    pub fn trace_csv(&self) -> String {
        let m = self.state.schema.n_relations();
        let objective = if self.state.variant.is_map() { "log_posterior" } else { "elbo" };
        let mut out = format!("iteration,{objective}");
        for r in 1..=m {
            let _ = write!(out, ",rmse_{r}");
        }
        out.push_str(",max_delta\n");
        for t in &self.trace {
            let _ = write!(out, "{},{}", t.iteration, t.objective);
            for v in &t.train_rmse {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{}", t.max_delta);
        }
        out
    }
}

/// Variational Bayes fit from a seeded initialization.
pub fn fit(
    schema: &Schema,
    data: &Dataset,
    hyper: &Hyperparams,
    variant: ModelVariant,
    seed: u64,
) -> Result<FitOutput> {
    let state = ModelState::init(schema, hyper, variant.to_vb(), seed)?;
    fit_from(state, data, hyper)
}

/// Continues fitting from `state`. VB or MAP updates are chosen by the
/// state's variant.
pub fn fit_from(mut state: ModelState, data: &Dataset, hyper: &Hyperparams) -> Result<FitOutput> {
    hyper.validate()?;
    let data = TrainingData::new(&state.schema, data)?;
    let mode = if state.variant.is_map() { Inference::Map } else { Inference::Vb };
    let check_monotone = data.schema.all_gaussian();
    let mut pseudo = PseudoData::init(&mut state, &data);
    let mut prev = {
        let resid = Residuals::compute(&state, &data, &pseudo);
        objective(&state, &data, &pseudo, &resid, hyper, mode)?
    };
    let mut trace = Vec::new();
    let mut converged = false;
    for iteration in 1..=hyper.max_iters {
        let (obj, max_delta, train_rmse) = sweep(&mut state, &data, &mut pseudo, hyper, mode, iteration)?;
        trace.push(TraceRecord {
            iteration,
            objective: obj,
            train_rmse,
            max_delta,
        });
        let change = obj - prev;
        if check_monotone && change < -DIVERGENCE_TOLERANCE * obj.abs() {
            return Err(Error::Divergence {
                iteration,
                drop: -change,
                relative: -change / obj.abs(),
            });
        }
        if iteration > hyper.ard_warmup && change.abs() < hyper.tol * obj.abs() {
            converged = true;
            break;
        }
        prev = obj;
    }
    Ok(FitOutput {
        state,
        trace,
        converged,
    })
}

fn objective(
    state: &ModelState,
    data: &TrainingData,
    pseudo: &PseudoData,
    resid: &Residuals,
    hyper: &Hyperparams,
    mode: Inference,
) -> Result<f64> {
    match mode {
        Inference::Vb => elbo(state, data, pseudo, resid, hyper),
        Inference::Map => log_posterior(state, data, pseudo, resid, hyper),
    }
}

fn sweep(
    state: &mut ModelState,
    data: &TrainingData,
    pseudo: &mut PseudoData,
    hyper: &Hyperparams,
    mode: Inference,
    iteration: usize,
) -> Result<(f64, f64, Vec<f64>)> {
    let schema = &data.schema;
    let mut resid = Residuals::compute(state, data, pseudo);
    let mut max_delta: f64 = 0.0;
    for e in 0..schema.n_sets() {
        max_delta = max_delta.max(update_factor_set(state, data, &mut resid, hyper, e, mode));
    }
    for m in 0..schema.n_relations() {
        update_bias_with(state, data, &mut resid, m, mode);
    }
    let ard_sets = match () {
        _ if iteration <= hyper.ard_warmup => 0,
        _ if state.variant.tied_ard() => 1,
        _ => schema.n_sets(),
    };
    for e in 0..ard_sets {
        update_ard_with(state, hyper, e, mode);
    }
    for m in 0..schema.n_relations() {
        if schema.relations[m].likelihood.is_gaussian() {
            update_tau_with(state, data, &resid, hyper, m, mode)?;
        } else {
            update_pseudodata(state, data, pseudo, &mut resid, m)?;
        }
    }
    let obj = objective(state, data, pseudo, &resid, hyper, mode)?;
    Ok((obj, max_delta, train_rmse(data, pseudo, &resid)))
}

fn train_rmse(data: &TrainingData, pseudo: &PseudoData, resid: &Residuals) -> Vec<f64> {
    data.relations
        .iter()
        .enumerate()
        .map(|(m, idx)| {
            if idx.n_obs() == 0 {
                return f64::NAN;
            }
            let r = &resid.0[m];
            let sq: f64 = match &pseudo.blocks[m] {
                None => r.iter().map(|v| v * v).sum(),
                Some(block) => (0..idx.n_obs())
                    .map(|t| (idx.values[t] - idx.link.mean(block.z[t] - r[t])).powi(2))
                    .sum(),
            };
            (sq / idx.n_obs() as f64).sqrt()
        })
        .collect()
}

//! Coordinate updates of the variational posterior.
//!
//! Each public function performs one closed-form (or damped Newton) update
//! and keeps the [`Residuals`] consistent with the new state. The same
//! routines drive the MAP engine through [`Inference::Map`], where posterior
//! variances are held at zero and Gamma posteriors collapse to their modes.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Hyperparams, ModelState, NewtonForm};
use crate::schema::Side;

use super::data::{PseudoData, Residuals, TrainingData};

/// Smallest admissible bias prior variance.
pub const MIN_BIAS_SCALE: f64 = 1e-8;
/// Floor for MAP precision modes.
pub const MIN_PRECISION_MODE: f64 = 1e-12;

const PAR_MIN_ROWS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Inference {
    Vb,
    Map,
}

/// Per-row sufficient statistics for column `k` of one entity set.
pub(crate) struct ColumnStats {
    /// Gradient of the expected negative log joint w.r.t. the mean.
    pub grad: f64,
    /// Curvature `alpha + sum tau (u_j^2 + v_j)`; its inverse is the variance.
    pub precision: f64,
    /// `sum tau (r + u_i u_j) u_j`; divided by `precision` it is the
    /// element-wise minimizer.
    pub target: f64,
}

pub(crate) fn column_stats(
    state: &ModelState,
    data: &TrainingData,
    resid: Option<&Residuals>,
    set: usize,
    k: usize,
) -> Vec<ColumnStats> {
    let schema = &data.schema;
    let rank = state.rank();
    let alpha = state.ard.mean(set, k);
    let own = state.factors[set].mean.as_slice().expect("standard layout");
    let incident: Vec<_> = schema
        .incident(set)
        .into_iter()
        .map(|(m, side)| {
            let rel = schema.relations[m];
            let partner = match side {
                Side::Row => rel.col,
                Side::Col => rel.row,
            };
            let pf = &state.factors[partner];
            let (ptr, order, other) = data.relations[m].side(side);
            (
                state.noise.mean(m),
                ptr,
                order,
                other,
                pf.mean.as_slice().expect("standard layout"),
                pf.var.as_slice().expect("standard layout"),
                resid.map(|r| r.0[m].as_slice()),
            )
        })
        .collect();

    let row = |i: usize| {
        let ui = own[i * rank + k];
        let mut precision = alpha;
        let mut grad = alpha * ui;
        let mut target = 0.0;
        for &(tau, ptr, order, other, pmean, pvar, res) in &incident {
            let (mut s_uu, mut s_v, mut s_ru) = (0.0, 0.0, 0.0);
            for &t in &order[ptr[i]..ptr[i + 1]] {
                let at = other[t] * rank + k;
                let uj = pmean[at];
                s_uu += uj * uj;
                s_v += pvar[at];
                if let Some(r) = res {
                    s_ru += r[t] * uj;
                }
            }
            precision += tau * (s_uu + s_v);
            grad += tau * (ui * s_v - s_ru);
            target += tau * (s_ru + ui * s_uu);
        }
        ColumnStats {
            grad,
            precision,
            target,
        }
    };

    let n = schema.size(set);
    if n >= PAR_MIN_ROWS {
        (0..n).into_par_iter().with_min_len(PAR_MIN_ROWS / 4).map(row).collect()
    } else {
        (0..n).map(row).collect()
    }
}

/// Gradient of the expected negative log joint with respect to the factor
/// means of `set` (`d_e x K`). Sums run over observed entries only.
pub fn factor_gradient(state: &ModelState, data: &TrainingData, pseudo: &PseudoData, set: usize) -> Array2<f64> {
    let resid = Residuals::compute(state, data, pseudo);
    let (d, k) = state.factors[set].mean.dim();
    let mut g = Array2::zeros((d, k));
    for col in 0..k {
        for (i, s) in column_stats(state, data, Some(&resid), set, col).into_iter().enumerate() {
            g[[i, col]] = s.grad;
        }
    }
    g
}

/// Optimal posterior variances of the factors of `set` given everything
/// else. An entity with no observed entries gets its prior variance
/// `1/alpha_ek`.
pub fn factor_variance(state: &ModelState, data: &TrainingData, set: usize) -> Array2<f64> {
    let (d, k) = state.factors[set].mean.dim();
    let mut v = Array2::zeros((d, k));
    for col in 0..k {
        for (i, s) in column_stats(state, data, None, set, col).into_iter().enumerate() {
            v[[i, col]] = 1.0 / s.precision;
        }
    }
    v
}

/// Damped Newton move `u - lambda * v * g`, with `v` the (fresh) variances
/// of `set` stored in `state`.
pub fn newton_step(state: &ModelState, set: usize, grad: &Array2<f64>, lambda: f64) -> Array2<f64> {
    let f = &state.factors[set];
    &f.mean - &(lambda * &f.var * grad)
}

/// Element-wise minimizers of the expected objective for the means of `set`,
/// computed from residual sums rather than from the gradient.
pub fn closed_form_target(state: &ModelState, data: &TrainingData, pseudo: &PseudoData, set: usize) -> Array2<f64> {
    let resid = Residuals::compute(state, data, pseudo);
    let (d, k) = state.factors[set].mean.dim();
    let mut out = Array2::zeros((d, k));
    for col in 0..k {
        for (i, s) in column_stats(state, data, Some(&resid), set, col).into_iter().enumerate() {
            out[[i, col]] = s.target / s.precision;
        }
    }
    out
}

/// Steps 1-2 of a sweep for one entity set: one factor column at a time,
/// fresh variances then an under-relaxed Newton move on the means. Returns
/// the largest absolute change of a mean.
pub(crate) fn update_factor_set(
    state: &mut ModelState,
    data: &TrainingData,
    resid: &mut Residuals,
    hyper: &Hyperparams,
    set: usize,
    mode: Inference,
) -> f64 {
    let rank = state.rank();
    let lambda = hyper.newton_relaxation;
    let incident = data.schema.incident(set);
    let mut max_delta: f64 = 0.0;
    let mut delta = vec![0.0; data.schema.size(set)];
    for k in 0..rank {
        let stats = column_stats(state, data, Some(resid), set, k);
        {
            let block = &mut state.factors[set];
            for (i, s) in stats.iter().enumerate() {
                let v = 1.0 / s.precision;
                let old = block.mean[[i, k]];
                let new = match hyper.newton_form {
                    NewtonForm::Damped => old - lambda * v * s.grad,
                    NewtonForm::ClosedFormTarget => (1.0 - lambda) * old + lambda * v * s.target,
                };
                block.mean[[i, k]] = new;
                block.var[[i, k]] = match mode {
                    Inference::Vb => v,
                    Inference::Map => 0.0,
                };
                delta[i] = new - old;
                max_delta = max_delta.max(delta[i].abs());
            }
        }
        for &(m, side) in &incident {
            let rel = data.schema.relations[m];
            let partner = match side {
                Side::Row => rel.col,
                Side::Col => rel.row,
            };
            let pmean = state.factors[partner].mean.as_slice().expect("standard layout");
            let (ptr, order, other) = data.relations[m].side(side);
            let r = &mut resid.0[m];
            for (i, &di) in delta.iter().enumerate() {
                if di == 0.0 {
                    continue;
                }
                for &t in &order[ptr[i]..ptr[i + 1]] {
                    r[t] -= di * pmean[other[t] * rank + k];
                }
            }
        }
    }
    max_delta
}

/// Updates the rows then the columns of relation `m`: first `q(mu)` and the
/// point estimate of the prior variance, then `q(b)` given them. An entity
/// without observations ends the update with `b = mu`.
pub fn update_bias(state: &mut ModelState, data: &TrainingData, resid: &mut Residuals, m: usize) {
    update_bias_with(state, data, resid, m, Inference::Vb);
}

pub(crate) fn update_bias_with(
    state: &mut ModelState,
    data: &TrainingData,
    resid: &mut Residuals,
    m: usize,
    mode: Inference,
) {
    if !state.bias.enabled {
        return;
    }
    let tau = state.noise.mean(m);
    for side in [Side::Row, Side::Col] {
        let (ptr, order, _) = data.relations[m].side(side);
        let r = &mut resid.0[m];
        let bias = match side {
            Side::Row => &mut state.bias.relations[m].rows,
            Side::Col => &mut state.bias.relations[m].cols,
        };
        let n = bias.mean.len();
        let hyper_var = 1.0 / (1.0 + n as f64 / bias.scale);
        bias.hyper_mean = hyper_var * bias.mean.iter().sum::<f64>() / bias.scale;
        bias.hyper_var = match mode {
            Inference::Vb => hyper_var,
            Inference::Map => 0.0,
        };
        let spread: f64 = bias
            .mean
            .iter()
            .zip(&bias.var)
            .map(|(&b, &v)| (b - bias.hyper_mean).powi(2) + v + bias.hyper_var)
            .sum();
        bias.scale = (spread / n as f64).max(MIN_BIAS_SCALE);
        let sigma2 = bias.scale;
        let mu = bias.hyper_mean;
        for i in 0..n {
            let entries = &order[ptr[i]..ptr[i + 1]];
            let old = bias.mean[i];
            // Residual sum with this bias removed.
            let s: f64 = entries.iter().map(|&t| r[t] + old).sum();
            let var = 1.0 / (tau * entries.len() as f64 + 1.0 / sigma2);
            let new = var * (tau * s + mu / sigma2);
            bias.mean[i] = new;
            bias.var[i] = match mode {
                Inference::Vb => var,
                Inference::Map => 0.0,
            };
            let d = new - old;
            for &t in entries {
                r[t] -= d;
            }
        }
    }
}

fn ard_sums(state: &ModelState, set: usize, k: usize) -> f64 {
    let f = &state.factors[set];
    f.mean
        .column(k)
        .iter()
        .zip(f.var.column(k))
        .map(|(&u, &v)| u * u + v)
        .sum()
}

/// `a_ek = a0 + d_e/2`, `b_ek = b0 + 1/2 sum_i (u_ik^2 + v_ik)`, per factor.
/// With tied ARD (CMF) the sums pool over every entity set and all rows of
/// the ARD state receive the same values, whatever `set` is.
pub fn update_ard(state: &mut ModelState, hyper: &Hyperparams, set: usize) {
    update_ard_with(state, hyper, set, Inference::Vb);
}

pub(crate) fn update_ard_with(state: &mut ModelState, hyper: &Hyperparams, set: usize, mode: Inference) {
    let schema = &state.schema;
    let sets: Vec<usize> = if state.variant.tied_ard() {
        (0..schema.n_sets()).collect()
    } else {
        vec![set]
    };
    let d: usize = sets.iter().map(|&e| schema.size(e)).sum();
    for k in 0..state.rank() {
        let sq: f64 = sets.iter().map(|&e| ard_sums(state, e, k)).sum();
        let (shape, rate) = match mode {
            Inference::Vb => (hyper.a0 + d as f64 / 2.0, hyper.b0 + 0.5 * sq),
            Inference::Map => {
                let mode = (hyper.a0 + d as f64 / 2.0 - 1.0) / (hyper.b0 + 0.5 * sq);
                (mode.max(MIN_PRECISION_MODE), 1.0)
            }
        };
        for &e in &sets {
            state.ard.shape[[e, k]] = shape;
            state.ard.rate[[e, k]] = rate;
        }
    }
}

/// `sum E[(target - xi)^2]` over the observed entries of relation `m` under
/// the factorized posterior.
pub fn expected_sq_residual(state: &ModelState, data: &TrainingData, resid: &Residuals, m: usize) -> f64 {
    let rel = data.schema.relations[m];
    let idx = &data.relations[m];
    let rank = state.rank();
    let (ur, vr) = (&state.factors[rel.row].mean, &state.factors[rel.row].var);
    let (uc, vc) = (&state.factors[rel.col].mean, &state.factors[rel.col].var);
    let (ur, vr) = (ur.as_slice().unwrap(), vr.as_slice().unwrap());
    let (uc, vc) = (uc.as_slice().unwrap(), vc.as_slice().unwrap());
    let bias = &state.bias.relations[m];
    let mut total = 0.0;
    for (t, &r) in resid.0[m].iter().enumerate() {
        let (i, j) = (idx.rows[t], idx.cols[t]);
        let mut e = r * r;
        if state.bias.enabled {
            e += bias.rows.var[i] + bias.cols.var[j];
        }
        for k in 0..rank {
            let (a, b) = (i * rank + k, j * rank + k);
            e += ur[a] * ur[a] * vc[b] + uc[b] * uc[b] * vr[a] + vr[a] * vc[b];
        }
        total += e;
    }
    total
}

/// `p_m = p0 + n_m/2`, `q_m = q0 + 1/2 sum E[residual^2]`.
pub fn update_tau(
    state: &mut ModelState,
    data: &TrainingData,
    resid: &Residuals,
    hyper: &Hyperparams,
    m: usize,
) -> Result<()> {
    update_tau_with(state, data, resid, hyper, m, Inference::Vb)
}

pub(crate) fn update_tau_with(
    state: &mut ModelState,
    data: &TrainingData,
    resid: &Residuals,
    hyper: &Hyperparams,
    m: usize,
    mode: Inference,
) -> Result<()> {
    let likelihood = data.schema.relations[m].likelihood;
    if !likelihood.is_gaussian() {
        return Err(Error::invalid(format!(
            "noise precision update on {likelihood} relation {}",
            m + 1
        )));
    }
    let n = data.relations[m].n_obs() as f64;
    let s = expected_sq_residual(state, data, resid, m);
    let (shape, rate) = match mode {
        Inference::Vb => (hyper.p0 + n / 2.0, hyper.q0 + 0.5 * s),
        Inference::Map => {
            let mode = (hyper.p0 + n / 2.0 - 1.0) / (hyper.q0 + 0.5 * s);
            (mode.max(MIN_PRECISION_MODE), 1.0)
        }
    };
    state.noise.shape[m] = shape;
    state.noise.rate[m] = rate;
    state.noise.pinned[m] = None;
    Ok(())
}

/// Re-linearizes relation `m` at the current predictors:
/// `z = xi - f'(xi)/kappa`, noise precision pinned to `kappa`.
pub fn update_pseudodata(
    state: &mut ModelState,
    data: &TrainingData,
    pseudo: &mut PseudoData,
    resid: &mut Residuals,
    m: usize,
) -> Result<()> {
    let idx = &data.relations[m];
    let block = pseudo.blocks[m].as_mut().ok_or_else(|| {
        Error::invalid(format!("pseudo-data update on gaussian relation {}", m + 1))
    })?;
    let r = &mut resid.0[m];
    for t in 0..idx.n_obs() {
        let xi = block.z[t] - r[t];
        let z = idx.link.pseudo_target(xi, idx.values[t]);
        block.xi[t] = xi;
        block.z[t] = z;
        r[t] = z - xi;
    }
    state.noise.pinned[m] = Some(block.kappa);
    Ok(())
}

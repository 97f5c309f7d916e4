//! Mean-field lower bound on the log marginal likelihood.
//!
//! Non-Gaussian relations contribute through the quadratic bound at the
//! current pseudo-data, so the value is a bound on the true ELBO.

use std::f64::consts::{E, PI};

use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::model::{BiasSide, Hyperparams, ModelState};

use super::data::{PseudoData, Residuals, TrainingData};
use super::updates::expected_sq_residual;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Named contributions to the bound; [`ElboTerms::total`] is their sum.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ElboTerms {
    pub likelihood: f64,
    pub factors: f64,
    pub ard: f64,
    pub noise: f64,
    pub bias: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.likelihood + self.factors + self.ard + self.noise + self.bias
    }

    fn check(self) -> Result<Self> {
        for (name, v) in [
            ("likelihood", self.likelihood),
            ("factors", self.factors),
            ("ard", self.ard),
            ("noise", self.noise),
            ("bias", self.bias),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("elbo term `{name}` is {v}")));
            }
        }
        Ok(self)
    }
}

/// `E[log Gamma(x; a0, b0)] - E[log q(x)]` for `q = Gamma(a, b)`.
pub(crate) fn gamma_kl_neg(a0: f64, b0: f64, a: f64, b: f64) -> f64 {
    let e_ln = digamma(a) - b.ln();
    let prior = a0 * b0.ln() - ln_gamma(a0) + (a0 - 1.0) * e_ln - b0 * a / b;
    let entropy = a - b.ln() + ln_gamma(a) + (1.0 - a) * digamma(a);
    prior + entropy
}

fn gaussian_entropy(var: f64) -> f64 {
    0.5 * (2.0 * PI * E * var).ln()
}

fn bias_side_terms(side: &BiasSide) -> f64 {
    let s2 = side.scale;
    let mut total = 0.0;
    for (&b, &v) in side.mean.iter().zip(&side.var) {
        let sq = (b - side.hyper_mean).powi(2) + v + side.hyper_var;
        total += -0.5 * (LN_2PI + s2.ln()) - sq / (2.0 * s2) + gaussian_entropy(v);
    }
    let mu_sq = side.hyper_mean.powi(2) + side.hyper_var;
    total + -0.5 * LN_2PI - 0.5 * mu_sq + gaussian_entropy(side.hyper_var)
}

/// ELBO at the current state, given residuals consistent with it.
pub fn elbo_terms(
    state: &ModelState,
    data: &TrainingData,
    pseudo: &PseudoData,
    resid: &Residuals,
    hyper: &Hyperparams,
) -> Result<ElboTerms> {
    let schema = &data.schema;
    let mut t = ElboTerms::default();

    for m in 0..schema.n_relations() {
        let idx = &data.relations[m];
        if idx.n_obs() == 0 {
            if schema.relations[m].likelihood.is_gaussian() {
                let (p, q) = (state.noise.shape[m], state.noise.rate[m]);
                t.noise += gamma_kl_neg(hyper.p0, hyper.q0, p, q);
            }
            continue;
        }
        let s = expected_sq_residual(state, data, resid, m);
        match &pseudo.blocks[m] {
            None => {
                let (p, q) = (state.noise.shape[m], state.noise.rate[m]);
                let n = idx.n_obs() as f64;
                t.likelihood += 0.5 * n * (digamma(p) - q.ln() - LN_2PI) - 0.5 * (p / q) * s;
                t.noise += gamma_kl_neg(hyper.p0, hyper.q0, p, q);
            }
            Some(block) => {
                let offset: f64 = block
                    .xi
                    .iter()
                    .zip(&idx.values)
                    .map(|(&xi0, &x)| idx.link.surrogate_offset(xi0, x))
                    .sum();
                t.likelihood += -offset - 0.5 * block.kappa * s;
            }
        }
    }

    let tied = state.variant.tied_ard();
    for k in 0..state.rank() {
        for (e, f) in state.factors.iter().enumerate() {
            let (a, b) = (state.ard.shape[[e, k]], state.ard.rate[[e, k]]);
            let d = f.mean.nrows() as f64;
            let sq: f64 = f.mean.column(k).iter().zip(f.var.column(k)).map(|(&u, &v)| u * u + v).sum();
            let entropy: f64 = f.var.column(k).iter().map(|&v| gaussian_entropy(v)).sum();
            t.factors += 0.5 * d * (digamma(a) - b.ln() - LN_2PI) - 0.5 * (a / b) * sq + entropy;
            if !tied || e == 0 {
                t.ard += gamma_kl_neg(hyper.a0, hyper.b0, a, b);
            }
        }
    }

    if state.bias.enabled {
        for rb in &state.bias.relations {
            t.bias += bias_side_terms(&rb.rows) + bias_side_terms(&rb.cols);
        }
    }
    t.check()
}

pub fn elbo(
    state: &ModelState,
    data: &TrainingData,
    pseudo: &PseudoData,
    resid: &Residuals,
    hyper: &Hyperparams,
) -> Result<f64> {
    elbo_terms(state, data, pseudo, resid, hyper).map(|t| t.total())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelVariant;
    use crate::schema::Likelihood::Gaussian;
    use crate::schema::Schema;
    use crate::store::{Dataset, ObservedMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Gamma, Normal};

    #[test]
    fn empty_data_has_no_likelihood_term() {
        let s = Schema::from_parts(&[("a", 3), ("b", 2)], &[(0, 1, Gaussian)], 2);
        let data = TrainingData::new(&s, &Dataset::empty(&s)).unwrap();
        let h = Hyperparams::default();
        let mut st = ModelState::init(&s, &h, ModelVariant::gcmf(), 1).unwrap();
        let pseudo = PseudoData::init(&mut st, &data);
        let resid = Residuals::compute(&st, &data, &pseudo);
        let t = elbo_terms(&st, &data, &pseudo, &resid, &h).unwrap();
        assert_eq!(t.likelihood, 0.0);
    }

    #[test]
    fn gamma_term_vanishes_at_prior() {
        // KL(q || p) = 0 when q = p.
        assert!(gamma_kl_neg(2.5, 1.5, 2.5, 1.5).abs() < 1e-12);
        assert!(gamma_kl_neg(2.5, 1.5, 3.0, 1.0) < 0.0);
    }

    #[test]
    fn degenerate_variance_is_reported() {
        let s = Schema::from_parts(&[("a", 1), ("b", 1)], &[(0, 1, Gaussian)], 1);
        let data = TrainingData::new(&s, &Dataset::empty(&s)).unwrap();
        let h = Hyperparams::default();
        let mut st = ModelState::init(&s, &h, ModelVariant::gcmf(), 1).unwrap();
        st.factors[0].var[[0, 0]] = 0.0;
        let pseudo = PseudoData::init(&mut st, &data);
        let resid = Residuals::compute(&st, &data, &pseudo);
        match elbo(&st, &data, &pseudo, &resid, &h) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("factors"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    fn ln_normal(x: f64, mean: f64, var: f64) -> f64 {
        -0.5 * (LN_2PI + var.ln()) - (x - mean).powi(2) / (2.0 * var)
    }

    fn ln_gamma_pdf(x: f64, a: f64, b: f64) -> f64 {
        a * b.ln() - ln_gamma(a) + (a - 1.0) * x.ln() - b * x
    }

    /// Monte-Carlo estimate of `E_q[log p(X, theta) - log q(theta)]` for a
    /// 2x2, K = 1 Gaussian model with biases, written independently of the
    /// closed form.
    #[test]
    fn matches_monte_carlo() {
        let s = Schema::from_parts(&[("a", 2), ("b", 2)], &[(0, 1, Gaussian)], 1);
        let x = [(0, 0, 1.2), (0, 1, -0.4), (1, 1, 0.7)];
        let mat = ObservedMatrix::from_triples(&s, 0, &x).unwrap();
        let data = TrainingData::new(&s, &Dataset::from_matrices(&s, vec![mat]).unwrap()).unwrap();
        let h = Hyperparams {
            a0: 2.0,
            b0: 1.5,
            p0: 3.0,
            q0: 2.0,
            ..Hyperparams::default()
        };
        let mut st = ModelState::init(&s, &h, ModelVariant::gcmf(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for f in &mut st.factors {
            f.mean.mapv_inplace(|_| rng.random_range(-1.0..1.0));
            f.var.mapv_inplace(|_| rng.random_range(0.1..0.6));
        }
        st.ard.shape.mapv_inplace(|_| rng.random_range(1.5..4.0));
        st.ard.rate.mapv_inplace(|_| rng.random_range(0.5..2.0));
        st.noise.shape[0] = 4.0;
        st.noise.rate[0] = 2.5;
        let rb = &mut st.bias.relations[0];
        for side in [&mut rb.rows, &mut rb.cols] {
            for (b, v) in side.mean.iter_mut().zip(side.var.iter_mut()) {
                *b = rng.random_range(-0.5..0.5);
                *v = rng.random_range(0.1..0.4);
            }
            side.hyper_mean = rng.random_range(-0.3..0.3);
            side.hyper_var = rng.random_range(0.1..0.3);
            side.scale = rng.random_range(0.5..1.5);
        }
        let pseudo = PseudoData::init(&mut st, &data);
        let resid = Residuals::compute(&st, &data, &pseudo);
        let closed = elbo(&st, &data, &pseudo, &resid, &h).unwrap();

        let n = 1_000_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        let normal = |m: f64, v: f64| Normal::new(m, v.sqrt()).unwrap();
        for _ in 0..n {
            let mut lp = 0.0;
            let mut lq = 0.0;
            let mut alpha = [0.0; 2];
            for (e, a) in alpha.iter_mut().enumerate() {
                let (sh, rt) = (st.ard.shape[[e, 0]], st.ard.rate[[e, 0]]);
                *a = Gamma::new(sh, 1.0 / rt).unwrap().sample(&mut rng);
                lp += ln_gamma_pdf(*a, h.a0, h.b0);
                lq += ln_gamma_pdf(*a, sh, rt);
            }
            let mut u = [[0.0; 2]; 2];
            for e in 0..2 {
                for i in 0..2 {
                    let (m, v) = (st.factors[e].mean[[i, 0]], st.factors[e].var[[i, 0]]);
                    u[e][i] = normal(m, v).sample(&mut rng);
                    lp += ln_normal(u[e][i], 0.0, 1.0 / alpha[e]);
                    lq += ln_normal(u[e][i], m, v);
                }
            }
            let (p, q) = (st.noise.shape[0], st.noise.rate[0]);
            let tau = Gamma::new(p, 1.0 / q).unwrap().sample(&mut rng);
            lp += ln_gamma_pdf(tau, h.p0, h.q0);
            lq += ln_gamma_pdf(tau, p, q);
            let mut b = [[0.0; 2]; 2];
            for (side_id, side) in [&st.bias.relations[0].rows, &st.bias.relations[0].cols].into_iter().enumerate() {
                let mu = normal(side.hyper_mean, side.hyper_var).sample(&mut rng);
                lp += ln_normal(mu, 0.0, 1.0);
                lq += ln_normal(mu, side.hyper_mean, side.hyper_var);
                for i in 0..2 {
                    b[side_id][i] = normal(side.mean[i], side.var[i]).sample(&mut rng);
                    lp += ln_normal(b[side_id][i], mu, side.scale);
                    lq += ln_normal(b[side_id][i], side.mean[i], side.var[i]);
                }
            }
            for &(i, j, v) in &x {
                lp += ln_normal(v, u[0][i] * u[1][j] + b[0][i] + b[1][j], 1.0 / tau);
            }
            let w = lp - lq;
            sum += w;
            sum_sq += w * w;
        }
        let mean = sum / n as f64;
        let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - closed).abs() < 3.0 * se, "closed {closed} mc {mean} se {se}");
    }
}

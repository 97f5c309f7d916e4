//! Observation links and their quadratic majorizers.
//!
//! Non-Gaussian relations are handled through a quadratic upper bound of the
//! negative log-likelihood `f(xi; x)` around the current linear predictor
//! `xi0`:
//!
//! ```text
//! f(xi) <= f(xi0) + f'(xi0) (xi - xi0) + kappa/2 (xi - xi0)^2
//!        = kappa/2 (xi - z)^2 + f(xi0) - f'(xi0)^2 / (2 kappa),   z = xi0 - f'(xi0)/kappa
//! ```
//!
//! which is valid whenever `kappa >= sup f''`. The relation is then fitted as
//! Gaussian pseudo-data `z` with precision `kappa`.

use statrs::function::gamma::ln_gamma;

use crate::schema::Likelihood;

/// Count-link predictors are clamped to this range before evaluation.
pub const XI_CLAMP: f64 = 30.0;

/// Upper bound on `sup_xi (s^2/l^2 - s(1-s)/l)` with `s = sigmoid(xi)`,
/// `l = softplus(xi)`. The supremum is 0.1670956 near `xi = 0.495`.
pub const SOFTPLUS_POISSON_SLOPE: f64 = 0.16710;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Link of one relation.
///
/// * Gaussian: `f = (xi - x)^2 / 2`, identity mean. Never bounded; Gaussian
///   relations use the data directly.
/// * Bernoulli: `f = softplus(xi) - x xi`, `kappa = 1/4`, mean `sigmoid(xi)`.
/// * Count: Poisson with rate `softplus(xi)`, `f = l - x log l + log x!`,
///   `kappa = 1/4 + 0.1671 x_max`, mean `softplus(xi)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LikelihoodSpec {
    pub kind: Likelihood,
    kappa: f64,
}

impl LikelihoodSpec {
    /// `x_max` is the largest observed count; ignored for other kinds.
    pub fn new(kind: Likelihood, x_max: f64) -> Self {
        let kappa = match kind {
            Likelihood::Gaussian => 1.0,
            Likelihood::Bernoulli => 0.25,
            Likelihood::Count => 0.25 + SOFTPLUS_POISSON_SLOPE * x_max.max(0.0),
        };
        LikelihoodSpec { kind, kappa }
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    fn clamp(&self, xi: f64) -> f64 {
        match self.kind {
            Likelihood::Count => xi.clamp(-XI_CLAMP, XI_CLAMP),
            _ => xi,
        }
    }

    /// Negative log-likelihood `f(xi; x)`.
    pub fn nll(&self, xi: f64, x: f64) -> f64 {
        match self.kind {
            Likelihood::Gaussian => 0.5 * (xi - x) * (xi - x),
            Likelihood::Bernoulli => softplus(xi) - x * xi,
            Likelihood::Count => {
                let rate = softplus(self.clamp(xi));
                rate - x * rate.ln() + ln_gamma(x + 1.0)
            }
        }
    }

    /// `df/dxi`.
    pub fn grad(&self, xi: f64, x: f64) -> f64 {
        match self.kind {
            Likelihood::Gaussian => xi - x,
            Likelihood::Bernoulli => sigmoid(xi) - x,
            Likelihood::Count => {
                let xi = self.clamp(xi);
                sigmoid(xi) * (1.0 - x / softplus(xi))
            }
        }
    }

    /// `d^2 f / dxi^2`.
    pub fn curvature(&self, xi: f64, x: f64) -> f64 {
        match self.kind {
            Likelihood::Gaussian => 1.0,
            Likelihood::Bernoulli => {
                let s = sigmoid(xi);
                s * (1.0 - s)
            }
            Likelihood::Count => {
                let xi = self.clamp(xi);
                let (s, l) = (sigmoid(xi), softplus(xi));
                s * (1.0 - s) * (1.0 - x / l) + x * s * s / (l * l)
            }
        }
    }

    /// Mean of the observation given the linear predictor.
    pub fn mean(&self, xi: f64) -> f64 {
        match self.kind {
            Likelihood::Gaussian => xi,
            Likelihood::Bernoulli => sigmoid(xi),
            Likelihood::Count => softplus(self.clamp(xi)),
        }
    }

    /// Gaussianized target `xi0 - f'(xi0)/kappa`, with `xi0` clamped to the
    /// admitted range.
    pub fn pseudo_target(&self, xi: f64, x: f64) -> f64 {
        let xi0 = self.clamp(xi);
        xi0 - self.grad(xi0, x) / self.kappa
    }

    /// Value of the quadratic bound around `xi0`, evaluated at `xi`.
    pub fn surrogate(&self, xi0: f64, xi: f64, x: f64) -> f64 {
        let xi0 = self.clamp(xi0);
        let d = xi - xi0;
        self.nll(xi0, x) + self.grad(xi0, x) * d + 0.5 * self.kappa * d * d
    }

    /// `xi`-independent part of the bound: `f(xi0) - f'(xi0)^2 / (2 kappa)`.
    pub fn surrogate_offset(&self, xi0: f64, x: f64) -> f64 {
        let xi0 = self.clamp(xi0);
        let g = self.grad(xi0, x);
        self.nll(xi0, x) - g * g / (2.0 * self.kappa)
    }
}

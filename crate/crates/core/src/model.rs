//! Posterior state, hyperparameters and initialization.
//!
//! Every matrix is modelled as
//!
//! ```text
//! x_ij^(m) = sum_k u_ik^(r_m) u_jk^(c_m) + b_i^(m,r) + b_j^(m,c) + noise
//! ```
//!
//! with `u_ik^(e) ~ N(0, 1/alpha_ek)`, `alpha_ek ~ Gamma(a0, b0)`, noise
//! precision `tau_m ~ Gamma(p0, q0)` and hierarchical biases
//! `b_i^(m,r) ~ N(mu_rm, sigma2_rm)`, `mu ~ N(0, 1)`. The variational
//! posterior is fully factorized; [`ModelState`] holds all of its parameters.
//! Biases are stored per relation, so an entity taking part in two relations
//! has two independent biases.
//!
//! MAP fits reuse the same containers: variances are held at zero and each
//! Gamma-distributed precision is stored as a point mass (`shape = value`,
//! `rate = 1`).

use std::path::Path;

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Component};
use crate::schema::Schema;
use crate::vb::likelihood::LikelihoodSpec;

/// How the damped Newton move on the factor means is computed. Both give the
/// same update up to rounding:
///
/// * `Damped`: `u <- u - lambda * v * g`, with `g` the gradient and `v` the
///   fresh variance (inverse curvature).
/// * `ClosedFormTarget`: `u <- (1 - lambda) u + lambda * u*`, where `u*` is
///   the per-element minimizer computed directly from residual sums.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NewtonForm {
    #[default]
    Damped,
    ClosedFormTarget,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Gamma shape/rate of the ARD precisions.
    pub a0: f64,
    pub b0: f64,
    /// Gamma shape/rate of the noise precisions.
    pub p0: f64,
    pub q0: f64,
    /// Under-relaxation `lambda` of the Newton step, in (0, 1).
    pub newton_relaxation: f64,
    pub max_iters: usize,
    /// Stop when the relative objective change over a sweep falls below this.
    pub tol: f64,
    pub newton_form: NewtonForm,
    /// Sweeps run with the ARD precisions held at their initial value.
    #[serde(default)]
    pub ard_warmup: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            a0: 1e-10,
            b0: 1e-10,
            p0: 1e-10,
            q0: 1e-10,
            newton_relaxation: 0.5,
            max_iters: 2000,
            tol: 1e-6,
            newton_form: NewtonForm::Damped,
            ard_warmup: 20,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("a0", self.a0), ("b0", self.b0), ("p0", self.p0), ("q0", self.q0)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        let lambda = self.newton_relaxation;
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(Error::invalid(format!(
                "newton relaxation must lie strictly inside (0, 1), got {lambda}"
            )));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::invalid(format!("tolerance must be >= 0, got {}", self.tol)));
        }
        Ok(())
    }

    pub fn with_ard_prior(self, value: f64) -> Self {
        Hyperparams {
            a0: value,
            b0: value,
            ..self
        }
    }

    pub fn with_noise_prior(self, value: f64) -> Self {
        Hyperparams {
            p0: value,
            q0: value,
            ..self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantKind {
    Gcmf,
    Cmf,
    GcmfMap,
    CmfMap,
}

/// Which model is fitted. CMF kinds tie the ARD precisions across entity
/// sets (`alpha_ek = alpha_k`), which rules out private factors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelVariant {
    pub kind: VariantKind,
    pub bias: bool,
}

impl ModelVariant {
    pub fn gcmf() -> Self {
        ModelVariant {
            kind: VariantKind::Gcmf,
            bias: true,
        }
    }

    pub fn cmf() -> Self {
        ModelVariant {
            kind: VariantKind::Cmf,
            bias: true,
        }
    }

    pub fn without_bias(self) -> Self {
        ModelVariant { bias: false, ..self }
    }

    pub fn tied_ard(&self) -> bool {
        matches!(self.kind, VariantKind::Cmf | VariantKind::CmfMap)
    }

    pub fn is_map(&self) -> bool {
        matches!(self.kind, VariantKind::GcmfMap | VariantKind::CmfMap)
    }

    pub fn to_map(self) -> Self {
        let kind = if self.tied_ard() {
            VariantKind::CmfMap
        } else {
            VariantKind::GcmfMap
        };
        ModelVariant { kind, ..self }
    }

    pub fn to_vb(self) -> Self {
        let kind = if self.tied_ard() {
            VariantKind::Cmf
        } else {
            VariantKind::Gcmf
        };
        ModelVariant { kind, ..self }
    }

    pub fn label(&self) -> String {
        let base = match self.kind {
            VariantKind::Gcmf => "gCMF",
            VariantKind::Cmf => "CMF",
            VariantKind::GcmfMap => "gCMF-MAP",
            VariantKind::CmfMap => "CMF-MAP",
        };
        if self.bias {
            base.to_string()
        } else {
            format!("{base} without bias")
        }
    }
}

/// `q(u_ik) = N(mean_ik, var_ik)` for one entity set (`d_e x K`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorBlock {
    pub mean: Array2<f64>,
    pub var: Array2<f64>,
}

/// `q(alpha_ek) = Gamma(shape_ek, rate_ek)`, `E x K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArdState {
    pub shape: Array2<f64>,
    pub rate: Array2<f64>,
}

impl ArdState {
    pub fn mean(&self, set: usize, k: usize) -> f64 {
        self.shape[[set, k]] / self.rate[[set, k]]
    }
}

/// `q(tau_m) = Gamma(shape_m, rate_m)`. Non-Gaussian relations pin the
/// precision to the curvature bound of their link.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseState {
    pub shape: Vec<f64>,
    pub rate: Vec<f64>,
    pub pinned: Vec<Option<f64>>,
}

impl NoiseState {
    pub fn mean(&self, relation: usize) -> f64 {
        self.pinned[relation].unwrap_or(self.shape[relation] / self.rate[relation])
    }
}

/// Biases of one side of one relation, with their hierarchical prior:
/// `q(b_i) = N(mean_i, var_i)`, `q(mu) = N(hyper_mean, hyper_var)`, point
/// estimate `scale` for the prior variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasSide {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub hyper_mean: f64,
    pub hyper_var: f64,
    pub scale: f64,
}

impl BiasSide {
    fn init(n: usize, with_variance: bool) -> Self {
        let v = if with_variance { 1.0 } else { 0.0 };
        BiasSide {
            mean: vec![0.0; n],
            var: vec![v; n],
            hyper_mean: 0.0,
            hyper_var: v,
            scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationBias {
    pub rows: BiasSide,
    pub cols: BiasSide,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasState {
    pub enabled: bool,
    pub relations: Vec<RelationBias>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub schema: Schema,
    pub variant: ModelVariant,
    pub seed: u64,
    pub factors: Vec<FactorBlock>,
    pub ard: ArdState,
    pub noise: NoiseState,
    pub bias: BiasState,
}

/// Linear predictor and the observation mean it implies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub linear: f64,
    pub mean: f64,
}

impl ModelState {
    /// Means `N(0, 1/K)` (per entity set, each set drawing from its own
    /// stream), unit variances, `alpha = tau = 1` (`shape = rate = 1`), zero
    /// bias means with unit variances, `mu = 0`, `sigma2 = 1`.
    pub fn init(schema: &Schema, hyper: &Hyperparams, variant: ModelVariant, seed: u64) -> Result<Self> {
        schema.ensure_structurally_valid()?;
        hyper.validate()?;
        let k = schema.rank;
        let n_sets = schema.n_sets();
        let factors = schema
            .entity_sets
            .iter()
            .enumerate()
            .map(|(e, set)| {
                let mut rng = rng::stream(seed, Component::Init, e as u64);
                let mean = if k == 0 {
                    Array2::zeros((set.size, 0))
                } else {
                    let normal = Normal::new(0.0, 1.0 / (k as f64).sqrt()).expect("valid scale");
                    Array2::from_shape_simple_fn((set.size, k), || normal.sample(&mut rng))
                };
                let var_init = if variant.is_map() { 0.0 } else { 1.0 };
                FactorBlock {
                    mean,
                    var: Array2::from_elem((set.size, k), var_init),
                }
            })
            .collect();
        let m = schema.n_relations();
        let bias = BiasState {
            enabled: variant.bias,
            relations: schema
                .relations
                .iter()
                .map(|r| {
                    let with_variance = variant.bias && !variant.is_map();
                    RelationBias {
                        rows: BiasSide::init(schema.size(r.row), with_variance),
                        cols: BiasSide::init(schema.size(r.col), with_variance),
                    }
                })
                .collect(),
        };
        Ok(ModelState {
            schema: schema.clone(),
            variant,
            seed,
            factors,
            ard: ArdState {
                shape: Array2::ones((n_sets, k)),
                rate: Array2::ones((n_sets, k)),
            },
            noise: NoiseState {
                shape: vec![1.0; m],
                rate: vec![1.0; m],
                pinned: vec![None; m],
            },
            bias,
        })
    }

    pub fn rank(&self) -> usize {
        self.schema.rank
    }

    /// `sum_k u_ik u_jk + b_i + b_j` for relation `relation`, without bounds
    /// checks.
    pub fn linear_predictor(&self, relation: usize, i: usize, j: usize) -> f64 {
        let rel = self.schema.relations[relation];
        let ui = self.factors[rel.row].mean.row(i);
        let uj = self.factors[rel.col].mean.row(j);
        let mut xi = ui.dot(&uj);
        if self.bias.enabled {
            let b = &self.bias.relations[relation];
            xi += b.rows.mean[i] + b.cols.mean[j];
        }
        xi
    }

    /// Prediction for entry `(i, j)` of `relation`. Rows or columns never
    /// observed in training still get a finite value: their bias has been
    /// shrunk to the hierarchical mean.
    pub fn predict(&self, relation: usize, i: usize, j: usize) -> Result<Prediction> {
        let rel = self
            .schema
            .relations
            .get(relation)
            .ok_or_else(|| Error::invalid(format!("no relation {}", relation + 1)))?;
        let (n_rows, n_cols) = (self.schema.size(rel.row), self.schema.size(rel.col));
        if i >= n_rows || j >= n_cols {
            return Err(Error::invalid(format!(
                "index ({i}, {j}) out of range for {n_rows}x{n_cols} relation {}",
                relation + 1
            )));
        }
        let linear = self.linear_predictor(relation, i, j);
        let mean = LikelihoodSpec::new(rel.likelihood, 0.0).mean(linear);
        Ok(Prediction { linear, mean })
    }

    /// Which factors are switched on for which entity set.
    pub fn factor_activity(&self) -> FactorActivity {
        FactorActivity::from_ard(&self.ard)
    }

    pub fn to_checkpoint(&self) -> String {
        let ck = CheckpointRef {
            format: CHECKPOINT_FORMAT,
            version: CHECKPOINT_VERSION,
            schema_hash: self.schema.hash(),
            state: self,
        };
        serde_json::to_string(&ck).expect("state serializes") + "\n"
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format {} v{}",
                ck.format, ck.version
            )));
        }
        if ck.state.schema.hash() != ck.schema_hash {
            return Err(Error::Checkpoint("schema hash mismatch".into()));
        }
        ck.state.check_shapes()?;
        Ok(ck.state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&text)
    }

    fn check_shapes(&self) -> Result<()> {
        let s = &self.schema;
        let k = s.rank;
        let bad = |what: &str| Err(Error::Checkpoint(format!("{what} does not match schema")));
        if self.factors.len() != s.n_sets() {
            return bad("factor count");
        }
        for (e, f) in self.factors.iter().enumerate() {
            if f.mean.dim() != (s.size(e), k) || f.var.dim() != (s.size(e), k) {
                return bad("factor shape");
            }
        }
        if self.ard.shape.dim() != (s.n_sets(), k) || self.ard.rate.dim() != (s.n_sets(), k) {
            return bad("ARD shape");
        }
        let m = s.n_relations();
        if self.noise.shape.len() != m || self.noise.rate.len() != m || self.noise.pinned.len() != m {
            return bad("noise state");
        }
        if self.bias.relations.len() != m {
            return bad("bias state");
        }
        for (r, b) in s.relations.iter().zip(&self.bias.relations) {
            if b.rows.mean.len() != s.size(r.row) || b.cols.mean.len() != s.size(r.col) {
                return bad("bias length");
            }
        }
        Ok(())
    }
}

const CHECKPOINT_FORMAT: &str = "gcmf-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format: &'a str,
    version: u32,
    schema_hash: String,
    state: &'a ModelState,
}

#[derive(Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    schema_hash: String,
    state: ModelState,
}

/// Factor `k` counts as active for set `e` when `alpha_ek` is within this
/// factor of the smallest `alpha_e'k` over all sets.
pub const RELATIVE_ACTIVITY_RATIO: f64 = 100.0;
/// ... and within this factor of the smallest precision of any factor, which
/// keeps factors pruned everywhere from counting as active.
pub const GLOBAL_ACTIVITY_RATIO: f64 = 1e4;

/// Reporting-only view of which factors ARD kept for which entity sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactorActivity {
    /// `active[e][k]`.
    pub active: Vec<Vec<bool>>,
}

impl FactorActivity {
    pub fn from_ard(ard: &ArdState) -> Self {
        let (n_sets, k) = ard.shape.dim();
        let alpha = |e: usize, f: usize| ard.mean(e, f);
        let global_min = (0..n_sets)
            .flat_map(|e| (0..k).map(move |f| (e, f)))
            .map(|(e, f)| alpha(e, f))
            .fold(f64::INFINITY, f64::min);
        let active = (0..n_sets)
            .map(|e| {
                (0..k)
                    .map(|f| {
                        let col_min = (0..n_sets).map(|s| alpha(s, f)).fold(f64::INFINITY, f64::min);
                        let a = alpha(e, f);
                        a < RELATIVE_ACTIVITY_RATIO * col_min && a < GLOBAL_ACTIVITY_RATIO * global_min
                    })
                    .collect()
            })
            .collect();
        FactorActivity { active }
    }

    pub fn rank(&self) -> usize {
        self.active.first().map_or(0, Vec::len)
    }

    /// Entity sets on which factor `k` is active.
    pub fn sets_of(&self, k: usize) -> Vec<usize> {
        (0..self.active.len()).filter(|&e| self.active[e][k]).collect()
    }

    /// Factors active on at least two sets (a factor on one set explains
    /// nothing).
    pub fn surviving(&self) -> Vec<usize> {
        (0..self.rank()).filter(|&k| self.sets_of(k).len() >= 2).collect()
    }

    /// Factors active on every entity set.
    pub fn shared_by_all(&self) -> Vec<usize> {
        (0..self.rank())
            .filter(|&k| self.sets_of(k).len() == self.active.len())
            .collect()
    }

    /// Factors active on exactly the given sets.
    pub fn private_to(&self, sets: &[usize]) -> Vec<usize> {
        let mut want = sets.to_vec();
        want.sort_unstable();
        want.dedup();
        (0..self.rank()).filter(|&k| self.sets_of(k) == want).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::Likelihood::{Bernoulli, Gaussian};

    fn schema(k: usize) -> Schema {
        Schema::from_parts(&[("a", 3), ("b", 2)], &[(0, 1, Gaussian)], k)
    }

    #[test]
    fn init_shapes() {
        let s = Schema::from_parts(&[("a", 3), ("b", 2)], &[(0, 1, Gaussian)], 1);
        let st = ModelState::init(&s, &Hyperparams::default(), ModelVariant::gcmf(), 1).unwrap();
        assert_eq!(st.factors[0].mean.dim(), (3, 1));
        assert!(st.factors[0].var.iter().all(|&v| v == 1.0));
        assert_eq!(st.ard.mean(0, 0), 1.0);
        assert_eq!(st.noise.mean(0), 1.0);
        assert_eq!(st.bias.relations[0].rows.var, vec![1.0; 3]);
        assert_eq!(st.bias.relations[0].rows.scale, 1.0);
    }

    #[test]
    fn init_is_deterministic() {
        let s = schema(4);
        let h = Hyperparams::default();
        let a = ModelState::init(&s, &h, ModelVariant::gcmf(), 9).unwrap();
        let b = ModelState::init(&s, &h, ModelVariant::gcmf(), 9).unwrap();
        let c = ModelState::init(&s, &h, ModelVariant::gcmf(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.factors[0].mean, c.factors[0].mean);
    }

    #[test]
    fn init_scale_follows_rank() {
        let s = Schema::from_parts(&[("a", 4000), ("b", 10)], &[(0, 1, Gaussian)], 16);
        let st = ModelState::init(&s, &Hyperparams::default(), ModelVariant::gcmf(), 1).unwrap();
        let var = st.factors[0].mean.iter().map(|x| x * x).sum::<f64>() / (4000.0 * 16.0);
        assert!((var - 1.0 / 16.0).abs() < 0.005, "{var}");
    }

    #[test]
    fn vague_priors_accepted() {
        let h = Hyperparams::default().with_ard_prior(1e-10).with_noise_prior(1e-10);
        assert!(h.validate().is_ok());
        assert!(ModelState::init(&schema(2), &h, ModelVariant::gcmf(), 0).is_ok());
        for lambda in [0.0, 1.0] {
            let bad = Hyperparams {
                newton_relaxation: lambda,
                ..h
            };
            assert!(bad.validate().is_err());
        }
        assert!(h.with_ard_prior(0.0).validate().is_err());
    }

    #[test]
    fn invalid_schema_rejected() {
        let s = Schema::from_parts(&[("a", 3)], &[], 1);
        assert!(matches!(
            ModelState::init(&s, &Hyperparams::default(), ModelVariant::gcmf(), 0),
            Err(Error::InvalidSchema(_))
        ));
    }

    fn zeroed(s: &Schema) -> ModelState {
        let mut st = ModelState::init(s, &Hyperparams::default(), ModelVariant::gcmf(), 0).unwrap();
        for f in &mut st.factors {
            f.mean.fill(0.0);
        }
        st
    }

    #[test]
    fn predict_at_origin() {
        let st = zeroed(&schema(2));
        assert_eq!(st.predict(0, 1, 1).unwrap(), Prediction { linear: 0.0, mean: 0.0 });
        let sb = Schema::from_parts(&[("a", 3), ("b", 2)], &[(0, 1, Bernoulli)], 2);
        assert_eq!(zeroed(&sb).predict(0, 0, 0).unwrap().mean, 0.5);
    }

    #[test]
    fn predict_hand_example() {
        let mut st = zeroed(&schema(1));
        st.factors[0].mean[[1, 0]] = 2.0;
        st.factors[1].mean[[0, 0]] = 3.0;
        st.bias.relations[0].rows.mean[1] = 0.5;
        st.bias.relations[0].cols.mean[0] = -0.5;
        assert_eq!(st.predict(0, 1, 0).unwrap().linear, 6.0);
    }

    #[test]
    fn predict_out_of_range() {
        let st = zeroed(&schema(1));
        assert!(st.predict(0, 3, 0).is_err());
        assert!(st.predict(0, 0, 2).is_err());
        assert!(st.predict(1, 0, 0).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let s = schema(3);
        let st = ModelState::init(&s, &Hyperparams::default(), ModelVariant::cmf(), 77).unwrap();
        let text = st.to_checkpoint();
        let back = ModelState::from_checkpoint(&text).unwrap();
        assert_eq!(back, st);
        assert_eq!(back.to_checkpoint(), text);

        let tampered = text.replace("\"size\":3", "\"size\":4");
        assert!(ModelState::from_checkpoint(&tampered).is_err());
    }

    #[test]
    fn activity_report() {
        // 3 sets, 3 factors: shared, private to {0, 1}, dead.
        let shape = Array2::ones((3, 3));
        let rate = ndarray::array![[1.0, 2.0, 1e6], [1.5, 1.0, 1e6], [0.5, 1e5, 2e6]];
        let ard = ArdState { shape, rate: rate.mapv(|r: f64| 1.0 / r) };
        let act = FactorActivity::from_ard(&ard);
        assert_eq!(act.shared_by_all(), vec![0]);
        assert_eq!(act.private_to(&[0, 1]), vec![1]);
        assert_eq!(act.sets_of(2), Vec::<usize>::new());
        assert_eq!(act.surviving(), vec![0, 1]);
    }

    #[test]
    fn activity_invariant_to_set_order() {
        let rate = ndarray::array![[1.0, 2.0, 1e6], [1.5, 1.0, 1e6], [0.5, 1e5, 2e6]];
        let ard = ArdState { shape: Array2::ones((3, 3)), rate: rate.clone() };
        let perm = [2, 0, 1];
        let permuted = ArdState {
            shape: Array2::ones((3, 3)),
            rate: Array2::from_shape_fn((3, 3), |(e, k)| rate[[perm[e], k]]),
        };
        let a = FactorActivity::from_ard(&ard);
        let b = FactorActivity::from_ard(&permuted);
        for e in 0..3 {
            assert_eq!(b.active[e], a.active[perm[e]]);
        }
    }
}

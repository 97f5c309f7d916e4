//! Synthetic data with planted structure.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{stream, Component};
use crate::schema::{cycle_schema, EntitySet, Likelihood, Relation, Schema};
use crate::store::{Dataset, ObservedMatrix};
use crate::vb::likelihood::{sigmoid, softplus};

const SIZES_STREAM: u64 = 0;
const FACTOR_STREAM: u64 = 1 << 20;
const MATRIX_STREAM: u64 = 2 << 20;
const LOCATION_STREAM: u64 = 3 << 20;
const MASK_STREAM: u64 = 4 << 20;
const PROXIMITY_STREAM: u64 = 5 << 20;

fn sample(likelihood: Likelihood, xi: f64, noise_std: f64, rng: &mut impl Rng) -> f64 {
    match likelihood {
        Likelihood::Gaussian => {
            let e: f64 = rng.sample(StandardNormal);
            xi + noise_std * e
        }
        Likelihood::Bernoulli => {
            if rng.random::<f64>() < sigmoid(xi) {
                1.0
            } else {
                0.0
            }
        }
        Likelihood::Count => {
            let rate = softplus(xi).max(1e-12);
            Poisson::new(rate).expect("positive rate").sample(rng)
        }
    }
}

/// Cycle of `m` matrices over `m` entity sets, each matrix carrying the
/// shared factors plus its own private ones.
#[derive(Clone, Debug, PartialEq)]
pub struct CircularSynthSpec {
    pub m: usize,
    /// Entity-set sizes are drawn uniformly from this inclusive range.
    pub size_range: (usize, usize),
    pub shared: usize,
    pub private: usize,
    /// One entry per matrix, or a single entry used for all.
    pub likelihoods: Vec<Likelihood>,
    /// Standard deviation of the noise added to Gaussian matrices.
    pub noise_std: f64,
    pub seed: u64,
}

impl CircularSynthSpec {
    pub fn new(m: usize, likelihood: Likelihood, seed: u64) -> Self {
        CircularSynthSpec {
            m,
            size_range: (100, 150),
            shared: 5,
            private: 2,
            likelihoods: vec![likelihood],
            noise_std: 0.5,
            seed,
        }
    }

    pub fn with_sizes(self, lo: usize, hi: usize) -> Self {
        CircularSynthSpec {
            size_range: (lo, hi),
            ..self
        }
    }

    /// `shared + private * M`.
    pub fn true_rank(&self) -> usize {
        self.shared + self.private * self.m
    }

    /// Rank used when fitting: `10 + 2M`.
    pub fn fit_rank(&self) -> usize {
        10 + 2 * self.m
    }

    pub fn likelihood(&self, matrix: usize) -> Likelihood {
        if self.likelihoods.len() == 1 {
            self.likelihoods[0]
        } else {
            self.likelihoods[matrix]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.size_range;
        if self.m < 1 {
            return Err(Error::invalid("need at least one matrix"));
        }
        if self.m == 2 {
            return Err(Error::invalid("a cycle over two sets repeats the same relation; use M = 1 or M >= 3"));
        }
        if lo < 1 || lo > hi {
            return Err(Error::invalid(format!("invalid size range {lo}..={hi}")));
        }
        if self.likelihoods.len() != 1 && self.likelihoods.len() != self.m {
            return Err(Error::invalid(format!(
                "{} likelihoods given for {} matrices",
                self.likelihoods.len(),
                self.m
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid(format!("noise scale must be >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }
}

/// Planted loadings, `d_e x (shared + private * M)` per entity set. Columns
/// `0..shared` are shared; private factor `p` of matrix `m` sits at column
/// `shared + m * private + p` and is zero outside the two sets of matrix `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub factors: Vec<Array2<f64>>,
    pub shared: usize,
    pub private: usize,
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub schema: Schema,
    pub data: Dataset,
    pub truth: GroundTruth,
}

/// Fully observed circular data; hold out entries with [`Dataset::holdout`].
pub fn gen_circular(spec: &CircularSynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = stream(spec.seed, Component::Synth, SIZES_STREAM);
    let (lo, hi) = spec.size_range;
    let sizes: Vec<usize> = (0..spec.m).map(|_| rng.random_range(lo..=hi)).collect();
    let mut schema = cycle_schema(&sizes, spec.likelihood(0), spec.fit_rank())?;
    for (m, rel) in schema.relations.iter_mut().enumerate() {
        rel.likelihood = spec.likelihood(m);
    }

    let rank = spec.true_rank();
    let factors: Vec<Array2<f64>> = (0..schema.n_sets())
        .map(|e| {
            let mut rng = stream(spec.seed, Component::Synth, FACTOR_STREAM + e as u64);
            let mut u = Array2::zeros((schema.size(e), rank));
            for m in 0..schema.n_relations() {
                let rel = schema.relations[m];
                let on = rel.row == e || rel.col == e;
                for p in 0..spec.private {
                    if on {
                        u.column_mut(spec.shared + m * spec.private + p)
                            .mapv_inplace(|_: f64| rng.sample(StandardNormal));
                    }
                }
            }
            for k in 0..spec.shared {
                u.column_mut(k).mapv_inplace(|_: f64| rng.sample(StandardNormal));
            }
            u
        })
        .collect();

    let matrices = schema
        .relations
        .iter()
        .enumerate()
        .map(|(m, rel)| {
            let mut rng = stream(spec.seed, Component::Synth, MATRIX_STREAM + m as u64);
            let xi = factors[rel.row].dot(&factors[rel.col].t());
            let triples: Vec<_> = xi
                .indexed_iter()
                .map(|((i, j), &x)| (i, j, sample(rel.likelihood, x, spec.noise_std, &mut rng)))
                .collect();
            ObservedMatrix::from_triples(&schema, m, &triples)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthData {
        data: Dataset::from_matrices(&schema, matrices)?,
        schema,
        truth: GroundTruth {
            factors,
            shared: spec.shared,
            private: spec.private,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    /// `exp(-|l_i - l_j| / width)`
    Exponential,
    /// `exp(-(l_i - l_j)^2 / (2 width^2))`
    Gaussian,
}

impl std::str::FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exponential" => Ok(Kernel::Exponential),
            "gaussian" => Ok(Kernel::Gaussian),
            _ => Err(Error::invalid(format!("unknown kernel `{s}`"))),
        }
    }
}

/// Binary proximity between the column entities of two views.
#[derive(Clone, Debug, PartialEq)]
pub struct ProximitySpec {
    pub kernel: Kernel,
    pub width: f64,
    /// Locations are drawn uniformly from `[0, span]`.
    pub span: f64,
    /// Fraction of proximity entries observed.
    pub observed_fraction: f64,
}

impl ProximitySpec {
    pub fn new(kernel: Kernel, width: f64) -> Self {
        ProximitySpec {
            kernel,
            width,
            span: 10.0,
            observed_fraction: 0.3,
        }
    }

    pub fn probability(&self, li: f64, lj: f64) -> f64 {
        let d = (li - lj).abs();
        match self.kernel {
            Kernel::Exponential => (-d / self.width).exp(),
            Kernel::Gaussian => (-d * d / (2.0 * self.width * self.width)).exp(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::invalid(format!("kernel width must be positive, got {}", self.width)));
        }
        if !(self.span > 0.0 && self.span.is_finite()) {
            return Err(Error::invalid(format!("location span must be positive, got {}", self.span)));
        }
        if !(self.observed_fraction > 0.0 && self.observed_fraction <= 1.0) {
            return Err(Error::invalid("observed proximity fraction must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Two Gaussian views over shared rows, augmented with a binary proximity
/// matrix between their columns.
///
/// Shared factors have column loadings given by low-frequency Fourier
/// features of the column locations, so nearby columns load alike in both
/// views. Each view also has private factors with unstructured loadings.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSpec {
    pub n: usize,
    pub d1: usize,
    pub d2: usize,
    pub proximity: ProximitySpec,
    /// Shared factors; taken in cos/sin pairs of increasing frequency.
    pub shared: usize,
    pub private: usize,
    /// Fraction of view entries observed.
    pub view_fraction: f64,
    pub noise_std: f64,
    pub rank: usize,
    pub seed: u64,
}

impl AugmentedSpec {
    pub fn new(n: usize, d1: usize, d2: usize, proximity: ProximitySpec, seed: u64) -> Self {
        AugmentedSpec {
            n,
            d1,
            d2,
            proximity,
            shared: 4,
            private: 2,
            view_fraction: 0.2,
            noise_std: 0.5,
            rank: 12,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AugmentedData {
    /// Sets: rows, view-1 columns, view-2 columns. Relations: view 1, view 2
    /// (Gaussian), proximity (Bernoulli).
    pub schema: Schema,
    pub data: Dataset,
    pub locations: [Vec<f64>; 2],
}

impl AugmentedData {
    /// Relation ids of the two views.
    pub const VIEWS: [usize; 2] = [0, 1];
    pub const PROXIMITY: usize = 2;

    /// The two views alone, as a multi-view problem.
    pub fn views_only(&self, data: &Dataset) -> Result<(Schema, Dataset)> {
        let schema = Schema::new(
            self.schema.entity_sets.clone(),
            self.schema.relations[..2].to_vec(),
            self.schema.rank,
        );
        let matrices = data.matrices()[..2].to_vec();
        let data = Dataset::from_matrices(&schema, matrices)?;
        Ok((schema, data))
    }
}

fn fourier_feature(k: usize, l: f64, span: f64) -> f64 {
    let omega = 2.0 * PI * (k / 2 + 1) as f64 / span;
    if k % 2 == 0 {
        (omega * l).cos()
    } else {
        (omega * l).sin()
    }
}

pub fn gen_augmented_multiview(n: usize, d1: usize, d2: usize, proximity: &ProximitySpec, seed: u64) -> Result<AugmentedData> {
    gen_augmented(&AugmentedSpec::new(n, d1, d2, proximity.clone(), seed))
}

pub fn gen_augmented(spec: &AugmentedSpec) -> Result<AugmentedData> {
    if spec.n < 1 || spec.d1 < 1 || spec.d2 < 1 {
        return Err(Error::invalid("entity-set sizes must be >= 1"));
    }
    if !(spec.view_fraction > 0.0 && spec.view_fraction <= 1.0) {
        return Err(Error::invalid("observed view fraction must lie in (0, 1]"));
    }
    spec.proximity.validate()?;
    let prox = &spec.proximity;
    let schema = Schema::new(
        vec![
            EntitySet {
                name: "rows".into(),
                size: spec.n,
            },
            EntitySet {
                name: "view1".into(),
                size: spec.d1,
            },
            EntitySet {
                name: "view2".into(),
                size: spec.d2,
            },
        ],
        vec![
            Relation {
                row: 0,
                col: 1,
                likelihood: Likelihood::Gaussian,
            },
            Relation {
                row: 0,
                col: 2,
                likelihood: Likelihood::Gaussian,
            },
            Relation {
                row: 1,
                col: 2,
                likelihood: Likelihood::Bernoulli,
            },
        ],
        spec.rank,
    );

    let locations: [Vec<f64>; 2] = [(0, spec.d1), (1, spec.d2)].map(|(v, d)| {
        let mut rng = stream(spec.seed, Component::Synth, LOCATION_STREAM + v);
        (0..d).map(|_| rng.random_range(0.0..prox.span)).collect()
    });
    let mut rng = stream(spec.seed, Component::Synth, FACTOR_STREAM);
    let rows: Array2<f64> = Array2::from_shape_simple_fn((spec.n, spec.shared + 2 * spec.private), || {
        rng.sample(StandardNormal)
    });
    let matrices = (0..2)
        .map(|v| {
            let d = locations[v].len();
            let mut rng = stream(spec.seed, Component::Synth, FACTOR_STREAM + 1 + v as u64);
            let mut cols = Array2::zeros((d, spec.shared + 2 * spec.private));
            for j in 0..d {
                for k in 0..spec.shared {
                    cols[[j, k]] = fourier_feature(k, locations[v][j], prox.span);
                }
                for p in 0..spec.private {
                    cols[[j, spec.shared + v * spec.private + p]] = rng.sample(StandardNormal);
                }
            }
            let xi = rows.dot(&cols.t());
            let mut noise = stream(spec.seed, Component::Synth, MATRIX_STREAM + v as u64);
            let mut mask = stream(spec.seed, Component::Synth, MASK_STREAM + v as u64);
            let normal = Normal::new(0.0, spec.noise_std.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
            let triples: Vec<_> = xi
                .indexed_iter()
                .filter_map(|((i, j), &x)| {
                    let e = normal.sample(&mut noise);
                    (mask.random::<f64>() < spec.view_fraction).then_some((i, j, x + e))
                })
                .collect();
            ObservedMatrix::from_triples(&schema, v, &triples)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = stream(spec.seed, Component::Synth, PROXIMITY_STREAM);
    let mut triples = Vec::new();
    for (i, &li) in locations[0].iter().enumerate() {
        for (j, &lj) in locations[1].iter().enumerate() {
            let keep = rng.random::<f64>() < prox.observed_fraction;
            let one = rng.random::<f64>() < prox.probability(li, lj);
            if keep {
                triples.push((i, j, if one { 1.0 } else { 0.0 }));
            }
        }
    }
    let mut all = matrices;
    all.push(ObservedMatrix::from_triples(&schema, 2, &triples)?);
    Ok(AugmentedData {
        data: Dataset::from_matrices(&schema, all)?,
        schema,
        locations,
    })
}

/// Single Gaussian matrix generated from biases alone:
/// `x_ij = b_i + c_j + noise`, `b_i ~ N(row_mean, row_sd^2)`,
/// `c_j ~ N(0, col_sd^2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasSynthSpec {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_mean: f64,
    pub row_sd: f64,
    pub col_sd: f64,
    pub noise_std: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct BiasSynthData {
    pub schema: Schema,
    pub data: Dataset,
    pub row_bias: Vec<f64>,
    pub col_bias: Vec<f64>,
}

pub fn gen_bias_only(spec: &BiasSynthSpec) -> Result<BiasSynthData> {
    if spec.n_rows < 1 || spec.n_cols < 1 {
        return Err(Error::invalid("matrix sizes must be >= 1"));
    }
    let schema = Schema::from_parts(
        &[("rows", spec.n_rows), ("cols", spec.n_cols)],
        &[(0, 1, Likelihood::Gaussian)],
        1,
    );
    let mut rng = stream(spec.seed, Component::Synth, FACTOR_STREAM);
    let normal = |rng: &mut _, mean: f64, sd: f64| mean + sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
    let row_bias: Vec<f64> = (0..spec.n_rows).map(|_| normal(&mut rng, spec.row_mean, spec.row_sd)).collect();
    let col_bias: Vec<f64> = (0..spec.n_cols).map(|_| normal(&mut rng, 0.0, spec.col_sd)).collect();
    let mut rng = stream(spec.seed, Component::Synth, MATRIX_STREAM);
    let mut triples = Vec::with_capacity(spec.n_rows * spec.n_cols);
    for (i, &b) in row_bias.iter().enumerate() {
        for (j, &c) in col_bias.iter().enumerate() {
            triples.push((i, j, normal(&mut rng, b + c, spec.noise_std)));
        }
    }
    let m = ObservedMatrix::from_triples(&schema, 0, &triples)?;
    Ok(BiasSynthData {
        data: Dataset::from_matrices(&schema, vec![m])?,
        schema,
        row_bias,
        col_bias,
    })
}

//! Group-sparse collective matrix factorization.
//!
//! A collection of sparsely observed matrices over shared entity sets is
//! factorized jointly. Each entity set owns one factor matrix; per-set ARD
//! precisions switch factors off for some sets, so a factor can be shared by
//! all matrices or private to a few. Inference is variational Bayes
//! ([`vb::fit`]) or MAP with cross-validated priors ([`map`]).
//!
//! ```no_run
//! use gcmf::{fit, Dataset, Hyperparams, ModelVariant, Schema};
//!
//! let schema = Schema::load("schema.json".as_ref())?;
//! let data = Dataset::load(&schema, "train.txt".as_ref())?;
//! let out = fit(&schema, &data, &Hyperparams::default(), ModelVariant::gcmf(), 42)?;
//! println!("{:?}", out.state.factor_activity().surviving());
//! # Ok::<(), gcmf::Error>(())
//! ```

pub mod error;
pub mod experiments;
pub mod map;
pub mod model;
pub mod rng;
pub mod schema;
pub mod store;
pub mod vb;

pub use error::{Error, Result};
pub use map::{cv_map, fit_map, fit_map_cv, CvCell, CvOutcome, MapConfig};
pub use model::{
    FactorActivity, Hyperparams, ModelState, ModelVariant, NewtonForm, Prediction, VariantKind,
};
pub use schema::{cycle_schema, multiview_schema, EntitySet, Likelihood, Relation, Schema, ValidationReport, Violation};
pub use store::{Dataset, Entry, ObservedMatrix, SplitMask};
pub use vb::{fit, fit_from, FitOutput, TraceRecord};

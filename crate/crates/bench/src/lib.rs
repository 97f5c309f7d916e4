//! Fixtures shared by the benchmarks.

use gcmf::experiments::{gen_circular, CircularSynthSpec};
use gcmf::{Dataset, Hyperparams, Likelihood, Schema};

/// A circular problem with `m` entity sets of size about `size`, 60% of
/// entries observed.
pub fn circular_problem(m: usize, size: usize, likelihood: Likelihood) -> (Schema, Dataset) {
    let spec = CircularSynthSpec::new(m, likelihood, 17).with_sizes(size, size + size / 10);
    let synth = gen_circular(&spec).expect("valid spec");
    let (train, _) = synth.data.holdout(0.4, 17, None).expect("valid fraction");
    (synth.schema, train)
}

/// Exactly `sweeps` sweeps, with no early stop.
pub fn fixed_sweeps(sweeps: usize) -> Hyperparams {
    Hyperparams {
        max_iters: sweeps,
        tol: 0.0,
        ard_warmup: 0,
        ..Hyperparams::default()
    }
}

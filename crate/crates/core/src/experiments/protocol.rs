//! Named end-to-end experiments producing long-format result tables.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::map::{fit_map_cv, MapConfig};
use crate::model::{Hyperparams, ModelVariant};
use crate::schema::{Likelihood, Schema};
use crate::store::Dataset;
use crate::vb::engine::fit;

use super::metrics::{dataset_rmse, dataset_rmse_over, relative_error};
use super::synth::{gen_augmented, gen_circular, AugmentedData, AugmentedSpec, CircularSynthSpec, Kernel, ProximitySpec};

/// Fraction of entries held out for testing in the circular protocols.
pub const CIRCULAR_HOLDOUT: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProtocolId {
    /// Bernoulli vs Gaussian likelihood, gCMF vs CMF, on binary cycles.
    CircularLikelihood,
    /// VB vs cross-validated MAP on Gaussian cycles.
    CircularMapVsVb,
    /// Multi-view with a proximity matrix, swept over kernel widths.
    AugmentedMultiview,
}

impl ProtocolId {
    pub const ALL: [ProtocolId; 3] = [
        ProtocolId::CircularLikelihood,
        ProtocolId::CircularMapVsVb,
        ProtocolId::AugmentedMultiview,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolId::CircularLikelihood => "circular-likelihood",
            ProtocolId::CircularMapVsVb => "circular-map-vs-vb",
            ProtocolId::AugmentedMultiview => "augmented-multiview",
        }
    }
}

impl fmt::Display for ProtocolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProtocolId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProtocolId::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown protocol `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolOptions {
    /// Shrink entity sets (and the MAP grid) for quick runs.
    pub small: bool,
    pub hyper: Hyperparams,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        ProtocolOptions {
            small: false,
            hyper: Hyperparams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub setting: String,
    pub seed: u64,
    pub rmse: f64,
    /// Relative to the protocol's reference method in the same setting.
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub protocol: ProtocolId,
    pub reference: String,
    pub rows: Vec<ReportRow>,
    /// Model fits performed, per method.
    pub fits: Vec<(String, usize)>,
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,setting,seed,rmse,relative_error\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.method, r.setting, r.seed, r.rmse, r.relative_error);
        }
        out
    }

    pub fn rmse(&self, method: &str, setting: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.setting == setting)
            .map(|r| r.rmse)
    }

    /// Mean relative error per method and setting.
    pub fn summary(&self) -> String {
        let mut out = format!("protocol {} (relative to {})\n", self.protocol, self.reference);
        let mut keys: Vec<(&str, &str)> = Vec::new();
        for r in &self.rows {
            if !keys.contains(&(r.setting.as_str(), r.method.as_str())) {
                keys.push((&r.setting, &r.method));
            }
        }
        for (setting, method) in keys {
            let sel: Vec<&ReportRow> = self
                .rows
                .iter()
                .filter(|r| r.setting == setting && r.method == method)
                .collect();
            let n = sel.len() as f64;
            let rel = sel.iter().map(|r| r.relative_error).sum::<f64>() / n;
            let rmse = sel.iter().map(|r| r.rmse).sum::<f64>() / n;
            let _ = writeln!(out, "  {setting:<14} {method:<16} rmse {rmse:.4}  relative {rel:.3}");
        }
        for (method, n) in &self.fits {
            let _ = writeln!(out, "  fits: {method} {n}");
        }
        out
    }

    fn push_fits(&mut self, method: &str, n: usize) {
        match self.fits.iter_mut().find(|(m, _)| m == method) {
            Some((_, count)) => *count += n,
            None => self.fits.push((method.to_string(), n)),
        }
    }

    fn add(&mut self, setting: &str, seed: u64, results: Vec<(String, f64)>) -> Result<()> {
        let reference = results
            .iter()
            .find(|(m, _)| *m == self.reference)
            .map(|(_, r)| *r)
            .ok_or_else(|| Error::invalid(format!("reference `{}` missing", self.reference)))?;
        for (method, rmse) in results {
            self.rows.push(ReportRow {
                relative_error: relative_error(rmse, reference)?,
                method,
                setting: setting.to_string(),
                seed,
                rmse,
            });
        }
        Ok(())
    }
}

pub fn run_protocol(id: ProtocolId, seed: u64, opts: &ProtocolOptions) -> Result<Report> {
    match id {
        ProtocolId::CircularLikelihood => circular_likelihood(seed, opts),
        ProtocolId::CircularMapVsVb => circular_map_vs_vb(seed, opts),
        ProtocolId::AugmentedMultiview => augmented_multiview(seed, opts),
    }
}

fn fit_rmse(schema: &Schema, train: &Dataset, test: &Dataset, hyper: &Hyperparams, variant: ModelVariant, seed: u64) -> Result<f64> {
    let out = fit(schema, train, hyper, variant, seed)?;
    dataset_rmse(&out.state, test)
}

/// Test RMSE of the four likelihood/variant combinations on one binary
/// cycle: `gCMF-bernoulli`, `CMF-bernoulli`, `gCMF-gaussian`,
/// `CMF-gaussian`.
pub fn circular_likelihood_run(m: usize, sizes: (usize, usize), seed: u64, hyper: &Hyperparams) -> Result<Vec<(String, f64)>> {
    let synth = gen_circular(&CircularSynthSpec::new(m, Likelihood::Bernoulli, seed).with_sizes(sizes.0, sizes.1))?;
    let (train, test) = synth.data.holdout(CIRCULAR_HOLDOUT, seed, None)?;
    let mut out = Vec::new();
    for likelihood in [Likelihood::Bernoulli, Likelihood::Gaussian] {
        let schema = synth.schema.with_likelihood(likelihood);
        for variant in [ModelVariant::gcmf(), ModelVariant::cmf()] {
            let rmse = fit_rmse(&schema, &train, &test, hyper, variant, seed)?;
            out.push((format!("{}-{likelihood}", variant.label()), rmse));
        }
    }
    Ok(out)
}

fn circular_likelihood(seed: u64, opts: &ProtocolOptions) -> Result<Report> {
    let sizes = if opts.small { (30, 50) } else { (100, 150) };
    let mut report = Report {
        protocol: ProtocolId::CircularLikelihood,
        reference: "CMF-gaussian".into(),
        rows: Vec::new(),
        fits: Vec::new(),
    };
    let m = 3;
    let results = circular_likelihood_run(m, sizes, seed, &opts.hyper)?;
    for (method, _) in &results {
        report.push_fits(method, 1);
    }
    report.add(&format!("M={m}"), seed, results)?;
    Ok(report)
}

/// VB and cross-validated MAP on one Gaussian cycle.
#[derive(Clone, Debug)]
pub struct MapVsVb {
    pub vb_rmse: f64,
    pub map_rmse: f64,
    pub vb_fits: usize,
    /// Cross-validation fits, excluding the final refit.
    pub map_cv_fits: usize,
    pub map_best: Hyperparams,
}

pub fn map_vs_vb_run(m: usize, sizes: (usize, usize), seed: u64, hyper: &Hyperparams, config: &MapConfig) -> Result<MapVsVb> {
    let synth = gen_circular(&CircularSynthSpec::new(m, Likelihood::Gaussian, seed).with_sizes(sizes.0, sizes.1))?;
    let (train, test) = synth.data.holdout(CIRCULAR_HOLDOUT, seed, None)?;
    let vb_rmse = fit_rmse(&synth.schema, &train, &test, hyper, ModelVariant::gcmf(), seed)?;
    let config = MapConfig {
        seed,
        ..config.clone()
    };
    let (cv, map) = fit_map_cv(&synth.schema, &train, &config, ModelVariant::gcmf())?;
    Ok(MapVsVb {
        vb_rmse,
        map_rmse: dataset_rmse(&map.state, &test)?,
        vb_fits: 1,
        map_cv_fits: cv.fits,
        map_best: cv.best,
    })
}

/// MAP grid used by the protocol. Small runs use a 3 x 3 grid.
pub fn protocol_map_config(small: bool, hyper: &Hyperparams) -> MapConfig {
    let base = MapConfig {
        base: *hyper,
        ..MapConfig::default()
    };
    if small {
        let g = crate::map::logspace(1e-4, 1e2, 3);
        MapConfig {
            a0b0_grid: g.clone(),
            p0q0_grid: g,
            ..base
        }
    } else {
        base
    }
}

fn circular_map_vs_vb(seed: u64, opts: &ProtocolOptions) -> Result<Report> {
    let sizes = if opts.small { (30, 50) } else { (40, 80) };
    let config = protocol_map_config(opts.small, &opts.hyper);
    let mut report = Report {
        protocol: ProtocolId::CircularMapVsVb,
        reference: "MAP-CV".into(),
        rows: Vec::new(),
        fits: Vec::new(),
    };
    for m in [1, 3] {
        let r = map_vs_vb_run(m, sizes, seed, &opts.hyper, &config)?;
        report.push_fits("VB", r.vb_fits);
        report.push_fits("MAP-CV", r.map_cv_fits + 1);
        report.add(
            &format!("M={m}"),
            seed,
            vec![("VB".into(), r.vb_rmse), ("MAP-CV".into(), r.map_rmse)],
        )?;
    }
    Ok(report)
}

/// Kernel widths swept by the augmented protocol, narrowest first.
pub const AUGMENTED_WIDTHS: [f64; 5] = [1e-3, 0.1, 1.0, 10.0, 1e3];

/// Desk-scale augmented multi-view setup at one kernel width.
pub fn augmented_spec(width: f64, small: bool, seed: u64) -> AugmentedSpec {
    let (n, d) = if small { (20, 40) } else { (30, 80) };
    AugmentedSpec::new(n, d, d, ProximitySpec::new(Kernel::Exponential, width), seed)
}

/// Test RMSE on held-out view entries for gCMF and CMF with the proximity
/// matrix, and for their view-only restrictions `CCA` and `PCA`.
pub fn augmented_run(spec: &AugmentedSpec, hyper: &Hyperparams, with_views_only: bool) -> Result<Vec<(String, f64)>> {
    let gen = gen_augmented(spec)?;
    let (train, test) = gen.data.holdout(CIRCULAR_HOLDOUT, spec.seed, Some(&AugmentedData::VIEWS))?;
    let mut out = Vec::new();
    for variant in [ModelVariant::gcmf(), ModelVariant::cmf()] {
        let fitted = fit(&gen.schema, &train, hyper, variant, spec.seed)?;
        out.push((variant.label(), dataset_rmse_over(&fitted.state, &test, &AugmentedData::VIEWS)?));
    }
    if with_views_only {
        let (schema, views_train) = gen.views_only(&train)?;
        let (_, views_test) = gen.views_only(&test)?;
        for (name, variant) in [("CCA", ModelVariant::gcmf()), ("PCA", ModelVariant::cmf())] {
            out.push((name.into(), fit_rmse(&schema, &views_train, &views_test, hyper, variant, spec.seed)?));
        }
    }
    Ok(out)
}

fn augmented_multiview(seed: u64, opts: &ProtocolOptions) -> Result<Report> {
    let mut report = Report {
        protocol: ProtocolId::AugmentedMultiview,
        reference: "CCA".into(),
        rows: Vec::new(),
        fits: Vec::new(),
    };
    // The views do not depend on the width, so the view-only baselines are
    // fitted once and repeated in every setting.
    let mut baselines: Option<Vec<(String, f64)>> = None;
    for width in AUGMENTED_WIDTHS {
        let spec = augmented_spec(width, opts.small, seed);
        let mut results = augmented_run(&spec, &opts.hyper, baselines.is_none())?;
        match &baselines {
            None => {
                baselines = Some(results[2..].to_vec());
                report.push_fits("CCA", 1);
                report.push_fits("PCA", 1);
            }
            Some(b) => results.extend(b.iter().cloned()),
        }
        report.push_fits("gCMF", 1);
        report.push_fits("CMF", 1);
        report.add(&format!("width={width}"), seed, results)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_names_round_trip() {
        for p in ProtocolId::ALL {
            assert_eq!(p.name().parse::<ProtocolId>().unwrap(), p);
        }
        assert!("nope".parse::<ProtocolId>().is_err());
    }

    #[test]
    fn report_tables() {
        let mut r = Report {
            protocol: ProtocolId::CircularLikelihood,
            reference: "B".into(),
            rows: Vec::new(),
            fits: Vec::new(),
        };
        r.add("s", 1, vec![("A".into(), 0.7), ("B".into(), 1.0)]).unwrap();
        assert_eq!(r.to_csv(), "method,setting,seed,rmse,relative_error\nA,s,1,0.7,0.7\nB,s,1,1,1\n");
        assert_eq!(r.rmse("A", "s"), Some(0.7));
        assert!(r.summary().contains("relative 0.700"));
        assert!(r.add("s", 1, vec![("A".into(), 0.7)]).is_err());
    }
}

//! Run settings: command-line flags layered over an optional TOML file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use gcmf::{Hyperparams, ModelVariant, NewtonForm, Schema};
use serde::Deserialize;

/// Keys accepted in a `--config` file. Every key mirrors a flag of the same
/// name (dashes become underscores); flags given on the command line win.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub schema: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub variant: Option<String>,
    pub map: Option<bool>,
    pub no_bias: Option<bool>,
    pub k: Option<usize>,
    pub tol: Option<f64>,
    pub max_iters: Option<usize>,
    pub lambda: Option<f64>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub a0: Option<f64>,
    pub b0: Option<f64>,
    pub p0: Option<f64>,
    pub q0: Option<f64>,
    pub ard_warmup: Option<usize>,
    pub newton_form: Option<String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// Schema JSON file.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Training triplets (relation row col value).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// gcmf (per-set ARD) or cmf (ARD tied across sets).
    #[arg(long)]
    pub variant: Option<String>,
    /// Point estimates instead of variational posteriors.
    #[arg(long)]
    pub map: bool,
    /// Drop the row and column bias terms.
    #[arg(long)]
    pub no_bias: bool,
    /// Number of factors; overrides the schema rank.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Newton under-relaxation, in (0, 1).
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// TOML file with defaults for any of these flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Fully resolved model settings.
#[derive(Debug, Clone)]
pub struct ModelSettings {
    pub schema: Schema,
    pub data: PathBuf,
    pub variant: ModelVariant,
    pub hyper: Hyperparams,
    pub seed: u64,
    pub out: PathBuf,
}

impl ModelArgs {
    pub fn file_config(&self) -> Result<FileConfig> {
        match &self.config {
            Some(path) => FileConfig::load(path),
            None => Ok(FileConfig::default()),
        }
    }

    pub fn resolve(&self, file: &FileConfig) -> Result<ModelSettings> {
        let schema_path = self.schema.clone().or_else(|| file.schema.clone()).context("--schema is required")?;
        let data = self.data.clone().or_else(|| file.data.clone()).context("--data is required")?;
        let out = self.out.clone().or_else(|| file.out.clone()).context("--out is required")?;

        let mut schema = Schema::load(&schema_path)?;
        if let Some(k) = self.k.or(file.k) {
            if k == 0 {
                bail!("--k must be at least 1");
            }
            schema = schema.with_rank(k);
        }

        let mut variant = match self.variant.as_deref().or(file.variant.as_deref()).unwrap_or("gcmf") {
            "gcmf" => ModelVariant::gcmf(),
            "cmf" => ModelVariant::cmf(),
            other => bail!("unknown variant `{other}` (expected gcmf or cmf)"),
        };
        if self.no_bias || file.no_bias.unwrap_or(false) {
            variant = variant.without_bias();
        }
        if self.map || file.map.unwrap_or(false) {
            variant = variant.to_map();
        }

        let mut hyper = Hyperparams::default();
        for (slot, value) in [
            (&mut hyper.a0, file.a0),
            (&mut hyper.b0, file.b0),
            (&mut hyper.p0, file.p0),
            (&mut hyper.q0, file.q0),
            (&mut hyper.tol, self.tol.or(file.tol)),
            (&mut hyper.newton_relaxation, self.lambda.or(file.lambda)),
        ] {
            if let Some(v) = value {
                *slot = v;
            }
        }
        if let Some(n) = self.max_iters.or(file.max_iters) {
            hyper.max_iters = n;
        }
        if let Some(n) = file.ard_warmup {
            hyper.ard_warmup = n;
        }
        if let Some(form) = &file.newton_form {
            hyper.newton_form = match form.as_str() {
                "damped" => NewtonForm::Damped,
                "closed-form-target" => NewtonForm::ClosedFormTarget,
                other => bail!("unknown newton_form `{other}`"),
            };
        }
        hyper.validate()?;

        Ok(ModelSettings {
            schema,
            data,
            variant,
            hyper,
            seed: self.seed.or(file.seed).unwrap_or(0),
            out,
        })
    }
}

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gcmf::experiments::protocol::AUGMENTED_WIDTHS;
use gcmf::experiments::{
    gen_augmented, gen_circular, matrix_rmse, relative_error, run_protocol, AugmentedSpec, CircularSynthSpec, Kernel,
    ProtocolId, ProtocolOptions, ProximitySpec,
};
use gcmf::map::logspace;
use gcmf::store::write_triplets;
use gcmf::{fit, fit_map, fit_map_cv, Dataset, FitOutput, Likelihood, MapConfig, ModelState};
use ndarray::Array2;

mod config;

use config::{FileConfig, ModelArgs};

#[derive(Parser, Debug)]
#[command(name = "gcmf", version, about = "Group-sparse collective matrix factorization")]
struct Cli {
    /// Worker threads for the engines (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model; writes checkpoint.json and trace.csv.
    Fit(ModelArgs),
    /// Predict the mean of queried entries.
    Predict(PredictArgs),
    /// RMSE of one or more checkpoints on held-out triplets.
    Eval(EvalArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Cross-validate MAP priors over a grid, then refit with the best.
    CvMap(CvMapArgs),
    /// Run one of the experiment protocols.
    Protocol(ProtocolArgs),
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Lines of `relation row col`; a trailing value column is ignored.
    #[arg(long)]
    queries: PathBuf,
    /// Output triplet file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Repeat to compare models; relative errors use the first.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    /// Held-out triplets.
    #[arg(long)]
    data: PathBuf,
    /// Directory for eval.csv (default: print to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// circular or augmented.
    #[arg(long)]
    protocol: String,
    /// Number of entity sets in the cycle.
    #[arg(long, default_value_t = 3)]
    m: usize,
    #[arg(long, default_value = "gaussian")]
    likelihood: String,
    /// Entity set size range, `lo,hi`.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Proximity kernel width for the augmented generator.
    #[arg(long, default_value_t = AUGMENTED_WIDTHS[2])]
    width: f64,
    #[arg(long, default_value = "exponential")]
    kernel: String,
    /// Also write train.txt and test.txt with this test fraction.
    #[arg(long)]
    holdout: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CvMapArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Points per grid axis, log-spaced over [grid-min, grid-max].
    #[arg(long, default_value_t = 11)]
    grid_points: usize,
    #[arg(long, default_value_t = 1e-6)]
    grid_min: f64,
    #[arg(long, default_value_t = 1e4)]
    grid_max: f64,
    #[arg(long, default_value_t = 2)]
    folds: usize,
}

#[derive(Args, Debug)]
struct ProtocolArgs {
    /// circular-likelihood, circular-map-vs-vb or augmented-multiview.
    #[arg(long)]
    name: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Smaller entity sets and grids.
    #[arg(long)]
    small: bool,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("gcmf: error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let file_threads = match &cli.command {
        Command::Fit(m) | Command::CvMap(CvMapArgs { model: m, .. }) => m.file_config()?.threads,
        _ => None,
    };
    if let Some(n) = cli.threads.or(file_threads) {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Fit(args) => cmd_fit(&args),
        Command::Predict(args) => cmd_predict(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Synth(args) => cmd_synth(&args),
        Command::CvMap(args) => cmd_cv_map(&args),
        Command::Protocol(args) => cmd_protocol(&args),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_fit(dir: &Path, out: &FitOutput) -> Result<()> {
    out.state.save(&dir.join("checkpoint.json"))?;
    write(&dir.join("trace.csv"), &out.trace_csv())
}

fn fit_summary(out: &FitOutput) -> String {
    let activity = out.state.factor_activity();
    format!(
        "{} sweeps ({}), objective {}, {} surviving factors",
        out.trace.len(),
        if out.converged { "converged" } else { "iteration limit" },
        out.final_objective().unwrap_or(f64::NAN),
        activity.surviving().len()
    )
}

fn cmd_fit(args: &ModelArgs) -> Result<()> {
    let file = args.file_config()?;
    let s = args.resolve(&file)?;
    let data = Dataset::load(&s.schema, &s.data)?;
    let out = if s.variant.is_map() {
        fit_map(&s.schema, &data, &s.hyper, s.variant, s.seed)?
    } else {
        fit(&s.schema, &data, &s.hyper, s.variant, s.seed)?
    };
    create_dir(&s.out)?;
    write_fit(&s.out, &out)?;
    println!("{}", fit_summary(&out));
    Ok(())
}

fn parse_queries(path: &Path, state: &ModelState) -> Result<Vec<(usize, usize, usize)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut queries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !(3..=4).contains(&fields.len()) {
            bail!("{}:{}: expected `relation row col`", path.display(), n + 1);
        }
        let parse = |s: &str| -> Result<usize> {
            s.parse().with_context(|| format!("{}:{}: bad index `{s}`", path.display(), n + 1))
        };
        let (m, i, j) = (parse(fields[0])?, parse(fields[1])?, parse(fields[2])?);
        if m == 0 || m > state.schema.n_relations() {
            bail!("{}:{}: unknown relation {m}", path.display(), n + 1);
        }
        queries.push((m - 1, i, j));
    }
    Ok(queries)
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let state = ModelState::load(&args.checkpoint)?;
    let mut text = String::new();
    for (m, i, j) in parse_queries(&args.queries, &state)? {
        let p = state.predict(m, i, j)?;
        writeln!(text, "{} {i} {j} {}", m + 1, p.mean)?;
    }
    match &args.out {
        Some(path) => write(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let states = args
        .checkpoint
        .iter()
        .map(|p| ModelState::load(p))
        .collect::<gcmf::Result<Vec<_>>>()?;
    let schema = &states[0].schema;
    for (s, path) in states.iter().zip(&args.checkpoint).skip(1) {
        if s.schema.entity_sets != schema.entity_sets || s.schema.relations != schema.relations {
            bail!("{} was fitted on a different schema", path.display());
        }
    }
    let test = Dataset::load(schema, &args.data)?;
    let mut table = String::from("model,relation,n_test,rmse,relative_error\n");
    let mut reference: Vec<f64> = Vec::new();
    for (idx, (state, path)) in states.iter().zip(&args.checkpoint).enumerate() {
        let label = path.display();
        let mut pooled = (0.0, 0usize);
        let mut rows = Vec::new();
        for m in test.matrices().iter().filter(|m| !m.is_empty()) {
            let r = matrix_rmse(state, m)?;
            pooled.0 += r * r * m.n_obs() as f64;
            pooled.1 += m.n_obs();
            rows.push((format!("{}", m.relation() + 1), m.n_obs(), r));
        }
        if pooled.1 == 0 {
            bail!("{} holds no test entries", args.data.display());
        }
        rows.push(("all".into(), pooled.1, (pooled.0 / pooled.1 as f64).sqrt()));
        if idx == 0 {
            reference = rows.iter().map(|r| r.2).collect();
        }
        for ((rel, n, r), base) in rows.iter().zip(&reference) {
            writeln!(table, "{label},{rel},{n},{r},{}", relative_error(*r, *base)?)?;
        }
    }
    match &args.out {
        Some(dir) => {
            create_dir(dir)?;
            write(&dir.join("eval.csv"), &table)
        }
        None => {
            print!("{table}");
            Ok(())
        }
    }
}

fn factors_csv(u: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in u.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn write_relations(dir: &Path, data: &Dataset, holdout: Option<f64>, seed: u64) -> Result<()> {
    for m in data.matrices() {
        write_triplets(&dir.join(format!("relation_{}.txt", m.relation() + 1)), std::slice::from_ref(m))?;
    }
    data.write_triplets(&dir.join("data.txt"))?;
    if let Some(fraction) = holdout {
        let (train, test) = data.holdout(fraction, seed, None)?;
        train.write_triplets(&dir.join("train.txt"))?;
        test.write_triplets(&dir.join("test.txt"))?;
        write(&dir.join("split.txt"), &format!("fraction {fraction}\nseed {seed}\n"))?;
    }
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    if let Some(s) = &args.sizes {
        if s.len() != 2 || s[0] > s[1] {
            bail!("--sizes takes `lo,hi` with lo <= hi");
        }
    }
    create_dir(&args.out)?;
    match args.protocol.as_str() {
        "circular" => {
            let likelihood: Likelihood = args.likelihood.parse()?;
            let mut spec = CircularSynthSpec::new(args.m, likelihood, args.seed);
            if let Some(s) = &args.sizes {
                spec = spec.with_sizes(s[0], s[1]);
            }
            let synth = gen_circular(&spec)?;
            synth.schema.save(&args.out.join("schema.json"))?;
            write_relations(&args.out, &synth.data, args.holdout, args.seed)?;
            for (e, u) in synth.truth.factors.iter().enumerate() {
                write(&args.out.join(format!("truth_factors_{}.csv", e + 1)), &factors_csv(u))?;
            }
            println!(
                "{} relations, true rank {} ({} shared, {} private per matrix), fit rank {}",
                synth.schema.n_relations(),
                spec.true_rank(),
                spec.shared,
                spec.private,
                spec.fit_rank()
            );
        }
        "augmented" => {
            let kernel: Kernel = args.kernel.parse()?;
            let (n, d) = match &args.sizes {
                Some(s) => (s[0], s[1]),
                None => (30, 80),
            };
            let spec = AugmentedSpec::new(n, d, d, ProximitySpec::new(kernel, args.width), args.seed);
            let synth = gen_augmented(&spec)?;
            synth.schema.save(&args.out.join("schema.json"))?;
            write_relations(&args.out, &synth.data, args.holdout, args.seed)?;
            for (v, loc) in synth.locations.iter().enumerate() {
                let text: String = loc.iter().map(|l| format!("{l}\n")).collect();
                write(&args.out.join(format!("locations_{}.txt", v + 1)), &text)?;
            }
            println!("views {n}x{d}, proximity {d}x{d}, kernel width {}", args.width);
        }
        other => bail!("unknown synth protocol `{other}` (expected circular or augmented)"),
    }
    Ok(())
}

fn cmd_cv_map(args: &CvMapArgs) -> Result<()> {
    let file: FileConfig = args.model.file_config()?;
    let s = args.model.resolve(&file)?;
    let data = Dataset::load(&s.schema, &s.data)?;
    let grid = logspace(args.grid_min, args.grid_max, args.grid_points);
    let config = MapConfig {
        a0b0_grid: grid.clone(),
        p0q0_grid: grid,
        folds: args.folds,
        seed: s.seed,
        base: s.hyper,
    };
    let (cv, out) = fit_map_cv(&s.schema, &data, &config, s.variant)?;
    create_dir(&s.out)?;
    write(&s.out.join("cv.csv"), &cv.table_csv())?;
    write_fit(&s.out, &out)?;
    println!(
        "{} fits; best a0=b0={} p0=q0={} (validation RMSE {}); refit: {}",
        cv.fits,
        cv.best.a0,
        cv.best.p0,
        cv.best_rmse,
        fit_summary(&out)
    );
    Ok(())
}

fn cmd_protocol(args: &ProtocolArgs) -> Result<()> {
    let id: ProtocolId = args.name.parse()?;
    let opts = ProtocolOptions {
        small: args.small,
        ..ProtocolOptions::default()
    };
    let report = run_protocol(id, args.seed, &opts)?;
    create_dir(&args.out)?;
    write(&args.out.join("report.csv"), &report.to_csv())?;
    let summary = report.summary();
    write(&args.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

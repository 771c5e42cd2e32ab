use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cellsim_core::batch::{self, BatchSummary, RunManifest, RunMode, Sample};
use cellsim_core::engine::ScenarioSpec;
use cellsim_core::geometry::Airspace;
use cellsim_core::scenario::{
    dedup_rotations, generate_configurations, sample_indices, validate_configuration, GeneratorOptions,
    IdAssignment, PredicateMode, ScenarioSet, SeparationPredicate,
};

#[derive(Parser)]
#[command(name = "cellsim", version, about = "Cell-based sUAS traffic simulation with detect-and-avoid")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enumerate every valid traffic configuration and write a scenario set.
    Generate(GenerateArgs),
    /// Check a scenario set against its checksum and mission constraints.
    Validate {
        #[arg(long)]
        set: PathBuf,
    },
    /// Simulate a scenario set under one spec.
    Run(RunArgs),
    /// Fit closed-loop inefficiency against open-loop measures.
    Regress {
        /// Summary files; closed- and open-loop summaries with the same label are merged.
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
        #[arg(long, default_value = "regression")]
        out: PathBuf,
    },
    /// Print the metrics of one or more summaries.
    Report {
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "hex_grid_distance")]
    predicate_mode: PredicateMode,
    #[arg(long, default_value_t = 4.0)]
    predicate_threshold: f64,
    #[arg(long)]
    distinct_destinations: bool,
    #[arg(long, default_value = "origin_ordered")]
    id_assignment: IdAssignment,
    /// Keep one configuration per rotation class.
    #[arg(long)]
    dedup_rotations: bool,
    /// m
    #[arg(long, default_value_t = 2000.0)]
    cell_radius: f64,
}

#[derive(Args)]
struct RunArgs {
    /// Preset name or path to a JSON spec.
    #[arg(long)]
    spec: String,
    #[arg(long)]
    set: PathBuf,
    /// Output directory; defaults to $CELLSIM_OUT_DIR or runs/<label>-<mode>.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Run a seeded random subset of this size instead of the full set.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, conflicts_with = "baseline")]
    open_loop: bool,
    #[arg(long)]
    baseline: bool,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Validate { set } => validate(&set),
        Command::Run(a) => run(a),
        Command::Regress { summaries, out } => regress(&summaries, &out),
        Command::Report { summaries } => report(&summaries),
    }
}

fn generate(a: GenerateArgs) -> Result<ExitCode> {
    let airspace = Airspace::new(a.cell_radius)?;
    let options = GeneratorOptions {
        predicate: SeparationPredicate::new(a.predicate_mode, a.predicate_threshold)?,
        distinct_destinations: a.distinct_destinations,
        id_assignment: a.id_assignment,
    };
    let mut configs = generate_configurations(&airspace, &options);
    let total = configs.len();
    if a.dedup_rotations {
        configs = dedup_rotations(&configs, &airspace, &options);
    }
    let set = ScenarioSet::new(configs, options, a.cell_radius, a.dedup_rotations);
    let sum = set.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("generated {total} configurations, wrote {} to {}", set.configurations.len(), a.out.display());
    println!("sha256 {sum}");
    Ok(ExitCode::SUCCESS)
}

fn validate(path: &Path) -> Result<ExitCode> {
    let (set, sum) = ScenarioSet::load_verified(path)?;
    let airspace = Airspace::new(set.header.cell_radius)?;
    let mut bad = 0;
    for (i, cfg) in set.configurations.iter().enumerate() {
        let v = validate_configuration(cfg, &airspace, &set.header.options);
        if !v.is_empty() {
            bad += 1;
            eprintln!("configuration {i}: {v:?}");
        }
    }
    println!("{} configurations, {bad} invalid, sha256 {sum}", set.configurations.len());
    Ok(if bad == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn run(a: RunArgs) -> Result<ExitCode> {
    let spec = ScenarioSpec::resolve(&a.spec)?;
    let (set, checksum) = ScenarioSet::load_verified(&a.set)?;
    let mode = if a.open_loop {
        RunMode::Open
    } else if a.baseline {
        RunMode::Baseline
    } else {
        RunMode::Closed
    };
    let (sample, indices) = match a.sample {
        Some(n) => (Sample::Count(n), sample_indices(set.configurations.len(), n, a.seed)?),
        None => (Sample::Full, (0..set.configurations.len()).collect()),
    };
    let workers = a
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    let mode_name = match mode {
        RunMode::Closed => "closed",
        RunMode::Open => "open",
        RunMode::Baseline => "baseline",
    };
    let out = a
        .out
        .or_else(|| std::env::var_os(batch::OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-{mode_name}", spec.label)));
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").into(),
        spec,
        mode,
        set_path: a.set.display().to_string(),
        set_checksum: checksum,
        generator: set.header.options,
        set_size: set.configurations.len(),
        sample,
        seed: a.seed,
        workers,
        out_dir: out.display().to_string(),
    };
    let (summary, _) = batch::run_manifest(&manifest, &set.configurations, &indices)?;
    print_summary(&summary);
    println!("outputs in {}", out.display());
    if summary.failures > 0 {
        eprintln!("{} scenario(s) aborted; see {}", summary.failures, out.join(batch::FAILURES_FILE).display());
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

/// Loads summaries and merges those sharing a label. Each merged entry is
/// named after the files it came from so errors point at them.
fn load_merged(paths: &[PathBuf]) -> Result<Vec<(String, BatchSummary)>> {
    let mut by_label: BTreeMap<String, (Vec<String>, BatchSummary)> = BTreeMap::new();
    let mut order = Vec::new();
    for p in paths {
        let s = BatchSummary::load(p)?;
        let name = p.display().to_string();
        match by_label.get_mut(&s.label) {
            Some((names, merged)) => {
                *merged = merged.merge(&s).with_context(|| format!("merging {name}"))?;
                names.push(name);
            }
            None => {
                order.push(s.label.clone());
                by_label.insert(s.label.clone(), (vec![name], s));
            }
        }
    }
    Ok(order
        .into_iter()
        .map(|l| {
            let (names, s) = by_label.remove(&l).expect("label recorded");
            (names.join(" + "), s)
        })
        .collect())
}

fn regress(paths: &[PathBuf], out: &Path) -> Result<ExitCode> {
    let merged = load_merged(paths)?;
    if merged.len() < batch::MIN_REGRESSION_POINTS {
        bail!(
            "regression needs at least {} distinct spec labels, got {}",
            batch::MIN_REGRESSION_POINTS,
            merged.len()
        );
    }
    let report = batch::regress(&merged)?;
    std::fs::create_dir_all(out)?;
    batch::write_json(&out.join("regression.json"), &report)?;
    batch::write_regression_csv(&out.join("regression_points.csv"), &report)?;
    let m = &report.combined;
    println!("inefficiency = {:.6} + {:.6} * M/D + {:.6} * alpha", m.intercept, m.coefficients[0], m.coefficients[1]);
    match m.r_squared {
        Some(r2) => println!("R^2 = {r2:.6}"),
        None => println!("R^2 undefined (constant target)"),
    }
    if m.collinear_fallback {
        println!("features collinear; fitted a single feature");
    }
    println!("outputs in {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn report(paths: &[PathBuf]) -> Result<ExitCode> {
    for (name, s) in load_merged(paths)? {
        println!("== {} ({name})", s.label);
        print_summary(&s);
    }
    Ok(ExitCode::SUCCESS)
}

fn print_summary(s: &BatchSummary) {
    println!("scenarios {}  failures {}", s.n_scenarios, s.failures);
    for (name, m) in [("closed loop", &s.closed_loop), ("baseline", &s.baseline)] {
        let Some(m) = m else { continue };
        println!("{name}:");
        println!("  inefficiency   {:.6}", m.inefficiency_rate);
        for (k, v) in &m.los_rate {
            let ungated = m.los_rate_ungated.get(k).copied().unwrap_or(f64::NAN);
            println!("  LoS {k:>6} ft  {v:.6} (ungated {ungated:.6})");
        }
        println!("  timeout        {:.6}", m.timeout_rate);
        println!("  livelock       {}", m.livelock_witnesses);
    }
    if let Some(o) = &s.open_loop {
        println!("open loop:");
        println!("  M/D            {:.6} per km", o.m_over_d);
        if o.alpha_defined {
            println!("  alpha          {:.6} deg", o.alpha_bar);
        } else {
            println!("  alpha          undefined (no maneuvers)");
        }
    }
}

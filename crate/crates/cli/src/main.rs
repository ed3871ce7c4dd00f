// SPDX-License-Identifier: MIT OR Apache-2.0

//! `steerid` command-line front end.
//!
//! Settings are resolved in this order, later entries winning: built-in
//! defaults, the `--config` file, then command-line flags.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use steerid::harness::{self, ExperimentConfig, Format, Perturbation, Report, ReportBody};
use steerid::toynet::EnvKind;
use steerid::{Error, ErrorClass};

const EXIT_VALIDATION: u8 = 1;
const EXIT_DEGENERATE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "steerid", version, about = "Identifiability diagnostics for activation-steering vectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract a steering vector and write it as a dump.
    Extract {
        #[command(flatten)]
        common: Common,
        /// Also write per-arm hidden states and logits for every prompt.
        #[arg(long)]
        with_logits: bool,
    },
    /// Jacobian rank spectrum and null-space summary.
    Nullspace(Common),
    /// Orthogonal-perturbation equivalence test.
    Orthotest(Common),
    /// Steering-strength sweep.
    Scalesweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
    },
    /// Equivalence test across prompt environments.
    Multienv {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        envs: Option<Vec<String>>,
    },
    /// Next-token logit comparison of `v` and `v′`.
    Logittest(Common),
    /// Fisher degeneracy and Cramér-Rao diagnostics.
    Fisher(Common),
    /// Gauge-equivalence verification.
    Gaugecheck(Common),
    /// Re-render saved JSON reports.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = OutFormat::All)]
        format: OutFormat,
        /// Output directory; defaults to the input directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    #[arg(long = "trait")]
    trait_label: Option<String>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, value_enum)]
    perturbation: Option<PerturbationArg>,
    #[arg(long)]
    master_seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PerturbationArg {
    RandomOrthogonal,
    ExactNull,
    Identity,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Json,
    Csv,
    All,
}

impl From<OutFormat> for Format {
    fn from(f: OutFormat) -> Self {
        match f {
            OutFormat::Json => Format::Json,
            OutFormat::Csv => Format::Csv,
            OutFormat::All => Format::All,
        }
    }
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(t) = &self.trait_label {
            cfg.trait_label = t.clone();
        }
        if let Some(n) = self.seeds {
            cfg.n_seeds = n;
        }
        if let Some(e) = self.eps {
            cfg.eps = e;
        }
        if let Some(s) = self.sigma {
            cfg.sigma_probe = s;
        }
        if let Some(p) = self.perturbation {
            cfg.perturbation = match p {
                PerturbationArg::RandomOrthogonal => Perturbation::RandomOrthogonal,
                PerturbationArg::ExactNull => Perturbation::ExactNull,
                PerturbationArg::Identity => Perturbation::Identity,
            };
        }
        if let Some(s) = self.master_seed {
            cfg.master_seed = s;
        }
        cfg.validate()?;
        println!("config_hash={} master_seed={}", cfg.hash(), cfg.master_seed);
        Ok(cfg)
    }
}

fn exit_code(err: &Error) -> u8 {
    match err.class() {
        ErrorClass::Validation => EXIT_VALIDATION,
        ErrorClass::Degenerate => EXIT_DEGENERATE,
        ErrorClass::Io => EXIT_IO,
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("STEER_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("STEER_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn emit(report: &Report, out: &Path, format: Format) -> Result<(), Error> {
    summarize(report);
    for path in harness::render_report(report, out, format)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn summarize(report: &Report) {
    match &report.result {
        ReportBody::Orthogonality(r) => {
            for t in &r.traits {
                let a = &t.aggregate;
                println!(
                    "{} [{}]: mean d = {:.4} (sd {:.4}), mean |d| = {:.4}, mean r = {:.4}",
                    t.trait_label, t.env, a.mean_d, a.sd_d, a.mean_abs_d, a.mean_r
                );
            }
        }
        ReportBody::ScaleSweep(r) => {
            for t in &r.traits {
                println!(
                    "{}: max gap v vs v' = {:.4}, logit gap = {:.4e}, alpha=0 equals baseline: {}",
                    t.trait_label, t.max_gap, t.max_logit_gap, t.alpha_zero_equals_baseline
                );
            }
        }
        ReportBody::MultiEnv(r) => {
            for m in &r.transfer {
                println!("{} mean |d| by environment:", m.trait_label);
                for (env, row) in m.envs.iter().zip(&m.mean_abs_d) {
                    let cells: Vec<String> = row.iter().map(|x| format!("{x:.4}")).collect();
                    println!("  {env:>7} {}", cells.join(" "));
                }
            }
            println!("stacked null dim = {} ({})", r.stacked_null_dim, r.stacked_regime);
        }
        ReportBody::Logit(r) => {
            for t in &r.traits {
                println!(
                    "{}: R = {:.4e}, token agreement = {:.1}%, top-{} overlap = {:.1}%",
                    t.trait_label, t.mean_ratio, t.token_agreement_pct, t.top_k, t.topk_overlap_pct
                );
            }
        }
        ReportBody::Nullspace(r) => {
            println!(
                "d = {}, V = {}, dim ker min/max = {}/{}, stacked = {} ({}), fd deviation = {:.2e}",
                r.d, r.vocab, r.min_null_dim, r.max_null_dim, r.stacked_null_dim, r.stacked_regime, r.max_fd_deviation
            );
        }
        ReportBody::Fisher(r) => {
            let worst = r.prompts.iter().map(|p| p.normalized_max_quadratic_form).fold(0.0, f64::max);
            let degenerate = r.prompts.iter().map(|p| p.degenerate_directions).min().unwrap_or(0);
            println!("degenerate directions >= {degenerate}, max null quadratic form / sigma_max^2 = {worst:.2e}");
        }
        ReportBody::Gauge(r) => {
            println!(
                "{} gauges: max logit deviation = {:.2e} (tolerance {:.0e}), pass: {}",
                r.gauges.len(),
                r.max_logit_deviation,
                r.tolerance,
                r.pass
            );
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    configure_threads()?;
    match cli.command {
        Command::Extract { common, with_logits } => {
            let cfg = common.resolve()?;
            let label = cfg.trait_label.clone();
            if with_logits {
                let manifest = harness::export_toy_dump(&cfg, &label, &common.out)?;
                println!("wrote {}", manifest.display());
            } else {
                let (manifest, norm) = harness::extract_to_dump(&cfg, &label, &common.out)?;
                println!("{label}: |v| = {norm:.6}");
                println!("wrote {}", manifest.display());
            }
            Ok(())
        }
        Command::Nullspace(c) => emit(&harness::run_nullspace(&c.resolve()?)?, &c.out, Format::All),
        Command::Orthotest(c) => emit(&harness::run_orthogonality_test(&c.resolve()?)?, &c.out, Format::All),
        Command::Scalesweep { common, alphas } => {
            let mut cfg = common.resolve()?;
            if let Some(a) = alphas {
                cfg.alpha_grid = a;
            }
            emit(&harness::run_scale_sweep(&cfg, &cfg.alpha_grid)?, &common.out, Format::All)
        }
        Command::Multienv { common, envs } => {
            let mut cfg = common.resolve()?;
            if let Some(e) = envs {
                cfg.environments = e.iter().map(|s| s.parse::<EnvKind>()).collect::<Result<_, _>>()?;
            }
            emit(&harness::run_multi_env(&cfg, &cfg.environments)?, &common.out, Format::All)
        }
        Command::Logittest(c) => emit(&harness::run_logit_test(&c.resolve()?)?, &c.out, Format::All),
        Command::Fisher(c) => emit(&harness::run_fisher(&c.resolve()?)?, &c.out, Format::All),
        Command::Gaugecheck(c) => emit(&harness::run_gauge_check(&c.resolve()?)?, &c.out, Format::All),
        Command::Report { input, format, out } => {
            let reports = harness::find_reports(&input)?;
            if reports.is_empty() {
                return Err(Error::InvalidArgument(format!("no reports found in {}", input.display())));
            }
            let out = out.unwrap_or(input);
            for (path, report) in &reports {
                println!(
                    "{}: config_hash={} master_seed={}",
                    path.display(),
                    report.header.config_hash,
                    report.header.master_seed
                );
                emit(report, &out, format.into())?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

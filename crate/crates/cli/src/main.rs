use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info};
use optresp_core::cache::{load_or_build, CacheOutcome, CACHE_DIR_ENV, FORMAT_VERSION};
use optresp_core::config::{parse_config, ExperimentConfig};
use optresp_core::export;
use optresp_core::harness::{ou_oracle_suite, run_experiment, AuditStatus, Depth, KernelInput, RunPlan, RunReport};
use optresp_core::Error;

const EXIT_AUDIT: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "optresp", version = version_string(), about = "Optimal linear response of a gradient SDE's transfer operator")]
struct Cli {
    /// TOML file with experiment keys; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set n=1000`; repeatable, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the available parallelism. Use 1 for bit-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Kernel cache directory; defaults to $OPTRESP_CACHE_DIR, else `<out>/cache`.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Build (or load from cache) the transfer kernel and audit its row masses.
    BuildKernel,
    /// Invariant density and spectral gap; writes the kernel and f0 CSVs.
    Invariant,
    /// Response coefficients and the optimal perturbation.
    Optimize,
    /// Full pipeline with every audit, including the Ornstein–Uhlenbeck oracle.
    Verify,
    /// Full pipeline writing all figure CSVs and the run report.
    ReproduceFigures,
    /// Ornstein–Uhlenbeck convergence check of the Fokker–Planck solver.
    OuCheck,
}

fn version_string() -> &'static str {
    Box::leak(format!("{} (kernel cache format {FORMAT_VERSION})", env!("CARGO_PKG_VERSION")).into_boxed_str())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            error!("{e}");
            ExitCode::from(match e {
                Error::Config { .. } | Error::Io(_) => EXIT_CONFIG,
                _ => EXIT_NUMERIC,
            })
        }
    }
}

fn run(cli: &Cli) -> optresp_core::Result<u8> {
    let mut config = parse_config(cli.config.as_deref(), &cli.overrides)?;
    if let Some(out) = &cli.out {
        config.output_dir = out.to_string_lossy().into_owned();
    }
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::Config { field: "threads".into(), reason: "must be at least 1".into() });
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Config { field: "threads".into(), reason: e.to_string() })?;
    }
    let out = PathBuf::from(&config.output_dir);
    std::fs::create_dir_all(&out)?;

    if cli.command == Command::OuCheck {
        return ou_check(&out);
    }

    let cache_dir = cli
        .cache_dir
        .clone()
        .or_else(|| std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| out.join("cache"));
    let input = kernel_input(&config, &cache_dir)?;

    let plan = match cli.command {
        Command::BuildKernel => return build_kernel_summary(&config, &input, &out),
        Command::Invariant => RunPlan { depth: Depth::Invariant, cross_validation: false, ou_oracle: false },
        Command::Optimize => RunPlan { depth: Depth::Optimize, cross_validation: false, ou_oracle: false },
        Command::Verify => RunPlan::VERIFY,
        Command::ReproduceFigures => RunPlan::FIGURES,
        Command::OuCheck => unreachable!(),
    };
    let report = run_experiment(&config, input, plan, Some(&out), &cli.overrides)?;
    Ok(summarize(&report, &out))
}

fn kernel_input(config: &ExperimentConfig, cache_dir: &Path) -> optresp_core::Result<KernelInput> {
    let spec = config.kernel_spec()?;
    let (kernel, build_report, outcome) = load_or_build(&spec, cache_dir)?;
    let source = match outcome {
        CacheOutcome::Hit => "cache".to_string(),
        CacheOutcome::Built => "built".to_string(),
        CacheOutcome::Rebuilt { reason } => format!("rebuilt ({reason})"),
    };
    Ok(KernelInput { kernel, build_report, source })
}

fn build_kernel_summary(config: &ExperimentConfig, input: &KernelInput, out: &Path) -> optresp_core::Result<u8> {
    let k = &input.kernel;
    let deviation = k.max_row_mass_deviation();
    let min = k.min_entry();
    let summary = serde_json::json!({
        "cache_format_version": FORMAT_VERSION,
        "source": input.source,
        "nodes": k.len(),
        "max_row_mass_deviation": deviation,
        "min_entry": min,
        "max_reflection_asymmetry": k.max_reflection_asymmetry(),
        "build": input.build_report,
        "config": config,
    });
    export::write_json(&out.join("kernel_report.json"), &summary)?;
    println!("kernel: {} nodes, max row-mass deviation {deviation:e}, min entry {min:e} ({})", k.len(), input.source);
    let ok = deviation <= config.tol_row_mass && -min <= config.tol_negative_entry;
    if !ok {
        error!("kernel audit failed");
    }
    Ok(if ok { 0 } else { EXIT_AUDIT })
}

fn ou_check(out: &Path) -> optresp_core::Result<u8> {
    let table = ou_oracle_suite(3)?;
    for r in &table.rows {
        println!("Δx = {:.5}  Δt = {:.5}  L¹ error = {:.6e}", r.spacing, r.time_step, r.l1_error);
    }
    println!("ratios: {:?}; t = 0 error {:.3e}", table.ratios, table.initial_error);
    export::write_json(&out.join("ou_oracle.json"), &table)?;
    let ok = table.rows[0].l1_error <= 5e-2 && table.ratios.iter().all(|r| *r >= 1.5) && table.initial_error <= 1e-8;
    Ok(if ok { 0 } else { EXIT_AUDIT })
}

fn summarize(report: &RunReport, out: &Path) -> u8 {
    for a in &report.audits {
        let tag = match a.status {
            AuditStatus::Pass => "pass",
            AuditStatus::Warn => "WARN",
            AuditStatus::Fail => "FAIL",
        };
        println!("{tag:4}  {:<40} {:>14.6e}  (limit {:.3e})", a.name, a.value, a.threshold);
    }
    if let Some(opt) = &report.optimal {
        println!("‖G‖₂ = {:.10}, objective(g) = {:.10}, basis size {}", opt.coefficient_norm, opt.objective, opt.basis_size);
    }
    info!("artifacts written to {}", out.display());
    if report.failed_audits().is_empty() {
        0
    } else {
        EXIT_AUDIT
    }
}

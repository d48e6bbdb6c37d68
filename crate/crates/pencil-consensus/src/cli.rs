//! Command-line front end: gain synthesis with a certificate report,
//! closed-loop simulation with runtime monitors, re-verification of a
//! stored report, and the built-in five-manipulator demonstration.
//!
//! Exit codes are the machine contract: 0 when every certificate and
//! monitor passes, 2 when any check is violated, 1 on errors (bad usage,
//! unreadable files, infeasible synthesis).

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::config::{parse_config_with, Overrides, RunConfig, Scenario};
use crate::error::CliError;
use crate::plot::emit_plots_svg;
use crate::sim::{integrate, monitor_lyapunov_decay, monitor_tracking_bound};
use crate::synthesis::{
    assemble_certificates, Certificate, CertificateInputs, SynthMode, SynthesisResult,
};
use crate::trace_io::emit_trace_csv;
use crate::warp::WarpMode;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_VIOLATION: i32 = 2;

/// Stored synthesis report inside the output directory; written by `synth`,
/// `simulate` and `demo-manipulators`, consumed by `verify`.
pub const REPORT_FILE: &str = "synthesis.json";

#[derive(Parser)]
#[command(
    name = "pencil-consensus",
    version,
    about = "prescribed-time leader-following consensus: synthesis, simulation, certification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize gains and report the scalars with their certificate table
    Synth(ConfigArgs),
    /// Simulate the closed loop, check every monitor, write traces and plots
    Simulate(ConfigArgs),
    /// Re-check the certificates of a stored synthesis report
    Verify(ConfigArgs),
    /// Run the built-in five-manipulator scenario end to end
    DemoManipulators(OutputArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file
    #[arg(long)]
    config: PathBuf,
    /// Override the configured synthesis mode
    #[arg(long)]
    mode: Option<String>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct OutputArgs {
    /// Override the configured output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip SVG plot emission
    #[arg(long)]
    no_plots: bool,
}

/// Parses the argument list and runs the selected subcommand, returning the
/// process exit code.
pub fn run<I, A>(argv: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return EXIT_OK;
        }
        Err(e) => {
            eprint!("{e}");
            return EXIT_ERROR;
        }
    };
    let outcome = match cli.command {
        Command::Synth(args) => synth(&args),
        Command::Simulate(args) => simulate(&args),
        Command::Verify(args) => verify(&args),
        Command::DemoManipulators(args) => demo(&args),
    };
    match outcome {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_VIOLATION,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

fn load(args: &ConfigArgs) -> Result<(RunConfig, Scenario), CliError> {
    let over = Overrides {
        mode: args.mode.clone(),
        outdir: args.output.out.clone(),
        no_plots: args.output.no_plots,
    };
    let cfg = parse_config_with(&args.config, &over)?;
    let scenario = cfg.build()?;
    Ok((cfg, scenario))
}

fn write_report(outdir: &Path, synthesis: &SynthesisResult<f64>) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(outdir)?;
    let path = outdir.join(REPORT_FILE);
    let file = BufWriter::new(File::create(&path)?);
    serde_json::to_writer_pretty(file, synthesis)?;
    Ok(path)
}

fn write_weight_csv(
    outdir: &Path,
    name: &str,
    matrix: &nalgebra::DMatrix<f64>,
) -> Result<PathBuf, CliError> {
    let path = outdir.join(name);
    let mut text = String::new();
    for i in 0..matrix.nrows() {
        let row: Vec<String> = (0..matrix.ncols())
            .map(|j| format!("{}", matrix[(i, j)]))
            .collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(&path, text)?;
    Ok(path)
}

fn fmt(v: f64) -> String {
    if v == 0.0 || (1e-4..1e6).contains(&v.abs()) {
        let s = format!("{v:.6}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.6e}")
    }
}

fn print_scalars(s: &SynthesisResult<f64>) {
    let row = |label: &str, value: String| println!("{label:<22} {value}");
    row("mode", s.mode.to_string());
    row("state dimension", s.n.to_string());
    row("followers", s.n_followers.to_string());
    row("horizon", fmt(s.horizon));
    row("warp speed b", fmt(s.b));
    let (k0, k1, k2) = match s.mode {
        SynthMode::StateFeedback => ("kappa0", "kappa1", "kappa2"),
        _ => ("kappa_a", "kappa_b", "kappa_b_tilde"),
    };
    row(k0, fmt(s.kappa0_or_a));
    row(k1, fmt(s.kappa1_or_b));
    row(k2, fmt(s.kappa2_or_btilde));
    if let Some(c) = s.c {
        row("coupling weight c", fmt(c));
    }
    if let Some(g) = s.gamma {
        row("gamma", fmt(g));
    }
    if let Some(g) = s.gamma_star {
        row("gamma_star", fmt(g));
    }
    if let Some(scale) = s.observer_scale {
        row("observer scale", fmt(scale));
    }
    row("admissible_dtheta", fmt(s.admissible_dtheta));
    row("growth rates known", s.growth_known.to_string());
}

fn print_certificates(certs: &[Certificate<f64>]) {
    println!(
        "{:<28} {:>14} {:>14} {:>7}",
        "certificate", "lambda_max", "tolerance", "status"
    );
    for c in certs {
        println!(
            "{:<28} {:>14.4e} {:>14.4e} {:>7}",
            c.name,
            c.lambda_max,
            c.tolerance(),
            if c.passes() { "pass" } else { "FAIL" }
        );
    }
}

fn synth(args: &ConfigArgs) -> Result<bool, CliError> {
    let (cfg, scenario) = load(args)?;
    let s = &scenario.synthesis;
    print_scalars(s);
    println!();
    print_certificates(&s.certificates);
    let mut files = vec![write_report(&cfg.outdir, s)?];
    files.push(write_weight_csv(&cfg.outdir, "p_c.csv", &s.p_c)?);
    if let Some(p_0) = &s.p_0 {
        files.push(write_weight_csv(&cfg.outdir, "p_0.csv", p_0)?);
    }
    println!();
    for f in &files {
        println!("wrote {}", f.display());
    }
    Ok(s.certificates_pass())
}

/// Shared body of `simulate` and `demo-manipulators`: integrate, monitor,
/// persist, summarize.
fn execute_run(cfg: &RunConfig, scenario: &Scenario) -> Result<bool, CliError> {
    let Scenario {
        fleet,
        sys,
        synthesis,
        sched,
        opts,
    } = scenario;
    print_scalars(synthesis);
    println!();
    print_certificates(&synthesis.certificates);
    println!();

    let mut trace = integrate(fleet, sys, sched, synthesis, opts)?;
    let decay = monitor_lyapunov_decay(&mut trace, synthesis, sched, opts.tol_rel)?;
    let tracking = monitor_tracking_bound(&mut trace, synthesis, sched, opts.tol_rel)?;

    let row = |label: &str, value: String| println!("{label:<22} {value}");
    row("samples", trace.len().to_string());
    if let (Some(t), Some(v)) = (trace.times.last(), trace.v.last()) {
        row("final time", fmt(*t));
        row("final energy", fmt(*v));
    }
    if let Some(i) = trace.freeze_index {
        row("gain frozen at", fmt(trace.times[i]));
    }
    row("decay exponent", fmt(decay.kappa));
    if let Some(k) = decay.kappa_post {
        row("post-freeze exponent", fmt(k));
    }
    if decay.growth_monitored {
        row("overshoot factor", fmt(decay.m_overshoot));
    } else {
        row("envelope", "not claimed (growth rates unknown)".into());
    }
    if let Some(omega) = tracking.omega_radius {
        row("residual radius", fmt(omega));
    }
    row("decay monitor", pass_str(decay.passed).into());
    row("tracking monitor", pass_str(tracking.passed).into());
    row("violations", trace.violations.len().to_string());
    for v in trace.violations.iter().take(10) {
        println!(
            "  {} at t = {} (margin {})",
            v.monitor,
            fmt(v.time),
            fmt(v.margin)
        );
    }

    let mut files = emit_trace_csv(&trace, &cfg.outdir)?;
    files.push(write_report(&cfg.outdir, synthesis)?);
    if cfg.plots {
        files.extend(emit_plots_svg(&trace, &cfg.outdir)?);
    }
    println!();
    for f in &files {
        println!("wrote {}", f.display());
    }
    Ok(synthesis.certificates_pass() && decay.passed && tracking.passed)
}

fn pass_str(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}

fn simulate(args: &ConfigArgs) -> Result<bool, CliError> {
    let (cfg, scenario) = load(args)?;
    execute_run(&cfg, &scenario)
}

fn demo(args: &OutputArgs) -> Result<bool, CliError> {
    let mut cfg = RunConfig::demo_manipulators();
    if let Some(out) = &args.out {
        cfg.outdir = out.clone();
    }
    if args.no_plots {
        cfg.plots = false;
    }
    let scenario = cfg.build()?;
    execute_run(&cfg, &scenario)
}

fn verify(args: &ConfigArgs) -> Result<bool, CliError> {
    let (cfg, scenario) = load(args)?;
    let path = cfg.outdir.join(REPORT_FILE);
    let stored: SynthesisResult<f64> =
        serde_json::from_reader(BufReader::new(File::open(&path)?))?;
    println!("report                {}", path.display());
    let mut ok = true;

    let fresh = &scenario.synthesis;
    if stored.mode != fresh.mode || stored.n != fresh.n || stored.n_followers != fresh.n_followers
    {
        println!(
            "structure             MISMATCH: stored {} n={} followers={}, configured {} n={} followers={}",
            stored.mode, stored.n, stored.n_followers, fresh.mode, fresh.n, fresh.n_followers
        );
        return Ok(false);
    }

    // Layer 1: recompute each stored certificate's eigenvalue bound from its
    // own stored matrix; any tampering with the scalar shows up here.
    println!(
        "{:<28} {:>14} {:>14} {:>7}",
        "certificate", "stored", "recomputed", "status"
    );
    for c in &stored.certificates {
        let re = Certificate::check(&c.name, c.matrix.clone());
        let consistent = (c.lambda_max - re.lambda_max).abs() <= re.tolerance();
        let good = consistent && c.passes() && re.passes();
        ok &= good;
        println!(
            "{:<28} {:>14.4e} {:>14.4e} {:>7}",
            c.name,
            c.lambda_max,
            re.lambda_max,
            pass_str(good)
        );
    }

    // Layer 2: rebuild the whole certificate list from the stored weights
    // and scalars against the configured system matrices.
    let max_dtheta = scenario
        .fleet
        .follower_dthetas()
        .into_iter()
        .fold(0.0_f64, f64::max);
    let non_sf = stored.mode != SynthMode::StateFeedback;
    let assembled = assemble_certificates(&CertificateInputs {
        sys: &scenario.sys,
        mode: stored.mode,
        p_c: &stored.p_c,
        p_0: stored.p_0.as_ref(),
        c: stored.c,
        b: stored.b,
        kappa0_or_a: stored.kappa0_or_a,
        kappa1_or_b: stored.kappa1_or_b,
        kappa2_or_btilde: stored.kappa2_or_btilde,
        delta_ac: stored.delta_ac,
        delta_a0: stored.delta_a0,
        gamma: stored.gamma,
        gamma_star: stored.gamma_star,
        c1: non_sf.then_some(cfg.c1),
        max_dtheta: non_sf.then_some(max_dtheta),
        sat_width: match cfg.warp {
            WarpMode::Practical { delta, .. } => Some(delta),
            WarpMode::Exact { .. } => None,
        },
    })?;
    if assembled.len() != stored.certificates.len() {
        println!(
            "reassembly            MISMATCH: {} certificates stored, {} assembled",
            stored.certificates.len(),
            assembled.len()
        );
        return Ok(false);
    }
    println!();
    println!(
        "{:<28} {:>14} {:>14} {:>7}",
        "reassembled", "stored", "assembled", "status"
    );
    for (c, a) in stored.certificates.iter().zip(&assembled) {
        let good = c.name == a.name
            && (c.lambda_max - a.lambda_max).abs() <= a.tolerance()
            && a.passes();
        ok &= good;
        println!(
            "{:<28} {:>14.4e} {:>14.4e} {:>7}",
            a.name,
            c.lambda_max,
            a.lambda_max,
            pass_str(good)
        );
    }
    println!();
    println!("verification          {}", pass_str(ok));
    Ok(ok)
}

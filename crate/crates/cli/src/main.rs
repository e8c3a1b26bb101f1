//! Command-line front end: validate configs, run golden and injected
//! trials, drive campaigns, ingest serial captures and render reports.
//!
//! Exit codes: 0 on success, 1 when the input was understood but the result
//! is a failure (invalid configuration, unclassifiable capture, failed
//! run), 2 for unreadable or unparseable input and usage errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Parser, Subcommand, ValueEnum};

use cellsim_core::campaign::{
    classify, run_campaign_with, run_trial, CalibratedSplit, CampaignReport, EffectMode,
};
use cellsim_core::injector::{Intensity, RegisterCount, SlotFilter};
use cellsim_core::plan::{parse_plan, CampaignPlan};
use cellsim_core::record::TrialLog;
use cellsim_core::serial::{ingest, serialize_trial};
use cellsim_core::sysconfig::{config_digest, parse_system_config, validate, SystemConfig};
use cellsim_core::workload::{default_workload, golden_run, WorkloadSchedule};

#[derive(Parser)]
#[command(
    name = "cellsim",
    version,
    about = "Partitioning-hypervisor simulator with bit-flip fault injection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a system configuration and print any violations.
    Validate {
        /// Path to the system configuration.
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a fault-free trial and write its log.
    Golden {
        #[arg(long)]
        config: PathBuf,
        /// Schedule positions to simulate.
        #[arg(long)]
        horizon: Option<u64>,
        /// Write the JSONL trial log here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also render the trial as serial-console text to this file.
        #[arg(long)]
        serial_out: Option<PathBuf>,
    },
    /// Run one injected trial from a stratum of a campaign plan.
    Trial {
        #[arg(long)]
        config: PathBuf,
        /// Campaign plan file supplying the fault strata.
        #[arg(long)]
        plan: PathBuf,
        /// Which stratum of the plan to run.
        #[arg(long, default_value_t = 0)]
        stratum: usize,
        /// Injector seed (defaults to the plan's base seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        horizon: Option<u64>,
        /// Override the plan's effect mode.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        serial_out: Option<PathBuf>,
    },
    /// Run a full campaign and write report.json and report.csv.
    Campaign {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        /// Worker threads (1 = sequential; the report is identical either way).
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Directory for report.json and report.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Also write every trial log under this directory.
        #[arg(long)]
        logs: Option<PathBuf>,
    },
    /// Classify a captured serial log.
    Ingest {
        /// Path to the serial-console capture.
        #[arg(long)]
        log: PathBuf,
    },
    /// Render a stored campaign report.
    Report {
        /// Path to a report.json produced by `campaign`.
        #[arg(long = "in")]
        input: PathBuf,
        /// Emit CSV instead of the table.
        #[arg(long)]
        csv: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Mechanistic,
    /// Uses the plan's calibrated split, or the default split if the plan
    /// is mechanistic.
    Calibrated,
}

enum Failure {
    /// The run itself failed; exit code 1.
    Semantic(String),
    /// Unreadable or unparseable input; exit code 2.
    Input(String),
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Semantic(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Validate { config } => cmd_validate(&config),
        Command::Golden {
            config,
            horizon,
            out,
            serial_out,
        } => cmd_golden(&config, horizon, out.as_deref(), serial_out.as_deref()),
        Command::Trial {
            config,
            plan,
            stratum,
            seed,
            horizon,
            mode,
            out,
            serial_out,
        } => cmd_trial(
            &config,
            &plan,
            stratum,
            seed,
            horizon,
            mode,
            out.as_deref(),
            serial_out.as_deref(),
        ),
        Command::Campaign {
            config,
            plan,
            workers,
            out,
            logs,
        } => cmd_campaign(&config, &plan, workers, &out, logs.as_deref()),
        Command::Ingest { log } => cmd_ingest(&log),
        Command::Report { input, csv } => cmd_report(&input, csv),
    }
}

// -- shared plumbing ----------------------------------------------------------

fn read_file(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| Failure::Input(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<SystemConfig, Failure> {
    let text = read_file(path)?;
    parse_system_config(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn load_plan(path: &Path) -> Result<CampaignPlan, Failure> {
    let text = read_file(path)?;
    parse_plan(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn load_workload(cfg: &SystemConfig) -> Result<WorkloadSchedule, Failure> {
    default_workload(cfg).map_err(|e| Failure::Semantic(e.to_string()))
}

fn emit_trial(
    log: &TrialLog,
    out: Option<&Path>,
    serial_out: Option<&Path>,
) -> Result<(), Failure> {
    if let Some(path) = serial_out {
        write_file(path, &serialize_trial(log))?;
    }
    match out {
        Some(path) => {
            write_file(path, &log.to_jsonl())?;
            println!("outcome: {}", classify(log));
        }
        None => {
            print!("{}", log.to_jsonl());
            eprintln!("outcome: {}", classify(log));
        }
    }
    Ok(())
}

// -- subcommands ---------------------------------------------------------------

fn cmd_validate(config: &Path) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let violations = validate(&cfg);
    if violations.is_empty() {
        println!(
            "ok: {} cells, {} cpus, digest {}",
            cfg.all_cells().count(),
            cfg.num_cpus,
            config_digest(&cfg)
        );
        Ok(())
    } else {
        for v in &violations {
            println!("{v}");
        }
        Err(Failure::Semantic(format!(
            "configuration has {} violation(s)",
            violations.len()
        )))
    }
}

fn cmd_golden(
    config: &Path,
    horizon: Option<u64>,
    out: Option<&Path>,
    serial_out: Option<&Path>,
) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let schedule = load_workload(&cfg)?;
    let horizon = horizon.unwrap_or(schedule.horizon);
    let log = golden_run(&cfg, &schedule, horizon).map_err(|e| Failure::Semantic(e.to_string()))?;
    emit_trial(&log, out, serial_out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_trial(
    config: &Path,
    plan_path: &Path,
    stratum: usize,
    seed: Option<u64>,
    horizon: Option<u64>,
    mode: Option<ModeArg>,
    out: Option<&Path>,
    serial_out: Option<&Path>,
) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let schedule = load_workload(&cfg)?;
    let plan = load_plan(plan_path)?;
    let fault = plan.strata.get(stratum).ok_or_else(|| {
        Failure::Input(format!(
            "stratum {stratum} out of range (plan has {})",
            plan.strata.len()
        ))
    })?;
    let fault = fault.clone().with_seed(seed.unwrap_or(plan.base_seed));
    let mode = resolve_mode(mode, plan.mode);
    let horizon = horizon.unwrap_or(plan.horizon);
    let log = run_trial(&cfg, &schedule, Some(&fault), horizon, mode)
        .map_err(|e| Failure::Semantic(e.to_string()))?;
    emit_trial(&log, out, serial_out)
}

fn resolve_mode(arg: Option<ModeArg>, from_plan: EffectMode) -> EffectMode {
    match arg {
        None => from_plan,
        Some(ModeArg::Mechanistic) => EffectMode::Mechanistic,
        Some(ModeArg::Calibrated) => match from_plan {
            EffectMode::Calibrated(split) => EffectMode::Calibrated(split),
            EffectMode::Mechanistic => EffectMode::Calibrated(CalibratedSplit::default()),
        },
    }
}

fn cmd_campaign(
    config: &Path,
    plan_path: &Path,
    workers: usize,
    out: &Path,
    logs: Option<&Path>,
) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let schedule = load_workload(&cfg)?;
    let plan = load_plan(plan_path)?;

    let log_error: Mutex<Option<String>> = Mutex::new(None);
    let persist = |s: usize, t: u64, log: &TrialLog| {
        let Some(dir) = logs else { return };
        let path = dir.join(format!("stratum{s}")).join(format!("trial{t}.jsonl"));
        let result = path
            .parent()
            .map(fs::create_dir_all)
            .transpose()
            .and_then(|_| fs::write(&path, log.to_jsonl()));
        if let Err(e) = result {
            let mut slot = log_error.lock().unwrap();
            slot.get_or_insert_with(|| format!("{}: {e}", path.display()));
        }
    };

    let report = run_campaign_with(
        &cfg,
        &schedule,
        &plan.strata,
        plan.trials,
        plan.mode,
        plan.base_seed,
        plan.horizon,
        workers,
        persist,
    )
    .map_err(|e| Failure::Semantic(e.to_string()))?;
    if let Some(e) = log_error.into_inner().unwrap() {
        return Err(Failure::Input(e));
    }

    fs::create_dir_all(out).map_err(|e| Failure::Input(format!("{}: {e}", out.display())))?;
    write_file(&out.join("report.json"), &report.to_json())?;
    write_file(&out.join("report.csv"), &report.to_csv())?;
    print!("{}", render_table(&report));
    println!(
        "wrote {} and {}",
        out.join("report.json").display(),
        out.join("report.csv").display()
    );
    Ok(())
}

fn cmd_ingest(log: &Path) -> Result<(), Failure> {
    let text = read_file(log)?;
    let trial = ingest(&text).map_err(|e| Failure::Semantic(e.to_string()))?;
    println!("outcome: {}", classify(&trial));
    Ok(())
}

fn cmd_report(input: &Path, csv: bool) -> Result<(), Failure> {
    let text = read_file(input)?;
    let report: CampaignReport = serde_json::from_str(&text)
        .map_err(|e| Failure::Input(format!("{}: {e}", input.display())))?;
    if csv {
        print!("{}", report.to_csv());
    } else {
        print!("{}", render_table(&report));
    }
    Ok(())
}

// -- report table ----------------------------------------------------------------

fn describe_intensity(intensity: &Intensity) -> String {
    match intensity {
        Intensity::Medium { period } => format!("medium/{period}"),
        Intensity::High { period, registers } => match registers {
            RegisterCount::Drawn => format!("high/{period}"),
            RegisterCount::Fixed(k) => format!("high/{period}x{k}"),
        },
    }
}

fn render_table(report: &CampaignReport) -> String {
    let mut rows: Vec<[String; 10]> = vec![[
        "stratum".into(),
        "target".into(),
        "cpu".into(),
        "intensity".into(),
        "slots".into(),
        "correct".into(),
        "einval".into(),
        "silent".into(),
        "park".into(),
        "panic".into(),
    ]];
    for (i, s) in report.strata.iter().enumerate() {
        let target = match s.stratum.target {
            cellsim_core::injector::InjectionTarget::Hvc => "hvc",
            cellsim_core::injector::InjectionTarget::Trap => "trap",
        };
        let slots = match &s.stratum.slots {
            SlotFilter::All => "all".to_string(),
            SlotFilter::Only(set) => format!("{} slot(s)", set.len()),
        };
        rows.push([
            i.to_string(),
            target.to_string(),
            s.stratum
                .cpu_filter
                .map_or("any".to_string(), |c| c.to_string()),
            describe_intensity(&s.stratum.intensity),
            slots,
            s.counts.correct.to_string(),
            s.counts.rejected_einval.to_string(),
            s.counts.silent_running.to_string(),
            s.counts.cpu_park.to_string(),
            s.counts.panic_park.to_string(),
        ]);
    }
    let mut widths = [0usize; 10];
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    for row in &rows {
        let (last, init) = row.split_last().expect("rows are non-empty");
        for (w, cell) in widths.iter().zip(init) {
            out.push_str(&format!("{cell:<w$}  "));
        }
        out.push_str(last);
        out.push('\n');
    }
    let availabilities: Vec<String> = report
        .strata
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{i}: {:.4}", s.availability))
        .collect();
    out.push_str(&format!(
        "trials per stratum: {}, availability {}\n",
        report.trials_per_stratum,
        availabilities.join(", ")
    ));
    out
}

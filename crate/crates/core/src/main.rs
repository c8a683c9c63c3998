//! `phoenix`: create stores, run fault-injection scenarios, benchmark
//! recovery, verify stores offline and damage pages on purpose.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use phoenix::faultctl::{self, bench, Runner, Scenario};
use phoenix::fault::FaultMode;
use phoenix::page::PageId;
use phoenix::{Config, Engine, Geometry, Storage};

#[derive(Parser)]
#[command(name = "phoenix", about = "Single-page failure detection and recovery harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Overrides {
    /// Scenario file.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pool_frames: Option<usize>,
    #[arg(long)]
    backup_interval: Option<u32>,
    /// Checkpoint after every this many operations; 0 disables.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Write JSON lines here instead of standard output.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create a store directory.
    Init {
        path: PathBuf,
        #[arg(long, default_value_t = 1024)]
        pages: u64,
        #[arg(long, default_value_t = 8192)]
        page_size: usize,
        #[arg(long, default_value_t = 16)]
        heap_pages: u64,
        #[command(flatten)]
        o: Overrides,
    },
    /// Run a scenario against a store directory, or in memory without one.
    Run {
        path: Option<PathBuf>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Measure single-page, restart and media recovery on an in-memory store.
    Bench {
        #[command(flatten)]
        o: Overrides,
    },
    /// Check a closed store: tree, checksums, recoverability of every page.
    Verify {
        path: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
    /// Damage one page of a closed store.
    Inject {
        path: PathBuf,
        #[arg(long)]
        page: u64,
        /// bitflip, torn, stale or unreadable.
        #[arg(long)]
        mode: FaultMode,
        #[command(flatten)]
        o: Overrides,
    },
}

fn scenario(o: &Overrides) -> phoenix::Result<Scenario> {
    let mut sc = match &o.scenario {
        Some(p) => Scenario::parse(&std::fs::read_to_string(p)?)?,
        None => Scenario::default(),
    };
    if let Some(s) = o.seed {
        sc.seed = s;
        sc.fault_plan.seed = s;
    }
    if let Some(n) = o.pool_frames {
        sc.pool_frames = n;
    }
    if let Some(n) = o.backup_interval {
        sc.backup_interval = n;
    }
    if let Some(n) = o.checkpoint_every {
        sc.checkpoint_every = n;
    }
    sc.validate()?;
    Ok(sc)
}

fn output(o: &Overrides) -> phoenix::Result<Box<dyn Write>> {
    Ok(match &o.report {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn run(cmd: Cmd) -> phoenix::Result<bool> {
    match cmd {
        Cmd::Init {
            path,
            pages,
            page_size,
            heap_pages,
            o,
        } => {
            let sc = scenario(&o)?;
            let cfg = Config {
                pool_frames: sc.pool_frames,
                backup_interval: sc.backup_interval,
                ..Config::default()
            };
            let geo = Geometry {
                pages,
                page_size,
                heap_pages,
            };
            let e = Engine::create(&Storage::Dir(path.clone()), geo, cfg)?;
            let entries = e.recovery_index().len();
            e.close()?;
            let mut out = output(&o)?;
            writeln!(
                out,
                "{}",
                json!({"event": "init", "path": path, "pages": pages, "page_size": page_size, "pri_entries": entries})
            )?;
            Ok(true)
        }
        Cmd::Run { path, o } => {
            let sc = scenario(&o)?;
            let mut runner = match path {
                Some(p) => Runner::on_disk(sc, p)?,
                None => Runner::in_memory(sc)?,
            };
            let report = runner.run()?;
            let mut out = output(&o)?;
            for e in runner.events() {
                writeln!(out, "{}", e.to_json())?;
            }
            writeln!(out, "{}", json!({"event": "run_report", "report": report}))?;
            for d in &report.divergences {
                eprintln!("divergence: {d}");
            }
            Ok(report.passed())
        }
        Cmd::Bench { o } => {
            let sc = scenario(&o)?;
            let report = bench::run(&sc)?;
            let mut out = output(&o)?;
            for r in &report.recoveries {
                writeln!(out, "{}", json!({"event": "bench_recovery", "recovery": r}))?;
            }
            let mut summary = serde_json::to_value(&report).expect("report serializes");
            summary.as_object_mut().unwrap().remove("recoveries");
            writeln!(out, "{}", json!({"event": "bench_report", "report": summary}))?;
            Ok(true)
        }
        Cmd::Verify { path, o } => {
            let report = faultctl::verify_store(&Storage::Dir(path))?;
            let mut out = output(&o)?;
            for f in &report.findings {
                writeln!(out, "{}", json!({"event": "finding", "finding": f}))?;
            }
            writeln!(
                out,
                "{}",
                json!({"event": "verify_report", "clean": report.is_clean(),
                       "pages_checked": report.pages_checked, "findings": report.findings.len(),
                       "tree": report.tree})
            )?;
            Ok(report.is_clean())
        }
        Cmd::Inject { path, page, mode, o } => {
            let seed = o.seed.unwrap_or(0);
            let detail = faultctl::inject(&Storage::Dir(path), PageId(page), mode, seed)?;
            let mut out = output(&o)?;
            writeln!(out, "{}", json!({"event": "inject", "page_id": page, "mode": mode, "detail": detail}))?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("phoenix: {e}");
            ExitCode::from(2)
        }
    }
}

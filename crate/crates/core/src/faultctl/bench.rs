//! Recovery benchmarks: single-page recovery latency, restart time and
//! media recovery time on the same store.

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::engine::RecoveryRecord;
use crate::error::Result;

use super::runner::Runner;
use super::scenario::{CrashPoint, Scenario};

#[derive(Debug, Clone, Default, Serialize)]
pub struct Latency {
    pub count: u64,
    pub median_us: u64,
    pub p99_us: u64,
    pub max_us: u64,
}

impl Latency {
    pub fn of(mut us: Vec<u64>) -> Self {
        if us.is_empty() {
            return Latency::default();
        }
        us.sort_unstable();
        let at = |q: f64| us[((us.len() - 1) as f64 * q).round() as usize];
        Latency {
            count: us.len() as u64,
            median_us: at(0.5),
            p99_us: at(0.99),
            max_us: *us.last().unwrap(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct BenchReport {
    pub pages: u64,
    pub io_delay_us: u64,
    pub single_page: Latency,
    /// Log records read per single-page recovery: median and maximum.
    pub log_reads_median: u64,
    pub log_reads_max: u64,
    pub restart_us: u64,
    pub restart_records_redone: u64,
    /// The same workload and crash with checkpoints disabled.
    pub restart_no_checkpoint_us: u64,
    pub restart_no_checkpoint_records_redone: u64,
    pub media_recovery_us: u64,
    /// Media recovery time over median single-page recovery time.
    pub media_to_single_ratio: f64,
    pub recoveries: Vec<RecoveryRecord>,
}

/// Runs the scenario workload ending in a crash and restart, then injects
/// `random_faults` single-page faults (at least one) with the scenario's
/// I/O delay and times their recoveries, then times media recovery.
fn crashed_run(sc: &Scenario, checkpoint_every: u64) -> Result<(Runner, u64, u64)> {
    let mut load = sc.clone();
    load.random_faults = 0;
    load.checkpoint_every = checkpoint_every;
    load.crash_points = vec![CrashPoint::Op(sc.ops)];
    load.continue_after_crash = false;
    let mut runner = Runner::in_memory(load)?;
    runner.run()?;
    let us = runner
        .events()
        .iter()
        .rev()
        .find(|e| e.event == "restart")
        .map_or(0, |e| e.duration_us);
    let redone = runner.engine().last_restart().records_redone;
    Ok((runner, us, redone))
}

pub fn run(sc: &Scenario) -> Result<BenchReport> {
    let faults = sc.random_faults.max(1);
    let (_, bare_us, bare_redone) = crashed_run(sc, 0)?;
    let (mut runner, restart_us, restart_redone) = crashed_run(sc, sc.checkpoint_every)?;
    let delay = Duration::from_micros(sc.io_delay_us);
    runner.engine().set_io_delay(delay);
    let before = runner.engine().recoveries().len();
    let mut attempts = 0;
    while runner.engine().recoveries().len() - before < faults as usize && attempts < faults * 8 {
        runner.inject_random_fault()?;
        attempts += 1;
    }
    let recs: Vec<RecoveryRecord> = runner.engine().recoveries()[before..].to_vec();
    let single = Latency::of(recs.iter().map(|r| r.duration_us).collect());
    let mut log_reads: Vec<u64> = recs.iter().map(|r| r.log_reads).collect();
    log_reads.sort_unstable();
    let t = Instant::now();
    runner.engine().media_recover()?;
    let media_us = t.elapsed().as_micros() as u64;
    let e = runner.engine();
    e.set_io_delay(Duration::ZERO);
    Ok(BenchReport {
        pages: e.layout().pages,
        io_delay_us: sc.io_delay_us,
        log_reads_median: log_reads.get(log_reads.len() / 2).copied().unwrap_or(0),
        log_reads_max: log_reads.last().copied().unwrap_or(0),
        media_to_single_ratio: media_us as f64 / single.median_us.max(1) as f64,
        single_page: single,
        restart_us,
        restart_records_redone: restart_redone,
        restart_no_checkpoint_us: bare_us,
        restart_no_checkpoint_records_redone: bare_redone,
        media_recovery_us: media_us,
        recoveries: recs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latency_quantiles() {
        let l = Latency::of((1..=100).collect());
        assert_eq!(l.count, 100);
        assert_eq!(l.median_us, 51);
        assert_eq!(l.p99_us, 99);
        assert_eq!(l.max_us, 100);
        assert_eq!(Latency::of(Vec::new()).count, 0);
    }
}

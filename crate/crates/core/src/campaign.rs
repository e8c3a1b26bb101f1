//! Trial execution, outcome classification and campaign orchestration.
//!
//! A trial walks a workload schedule over a fresh hypervisor state, with an
//! optional fault plan corrupting matching events. The result is a trial
//! log; classification reduces a log to one of five outcomes; a campaign
//! runs a matrix of plans for many seeds and aggregates outcome counts and
//! availability per stratum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hvmodel::{
    CpuMode, DispatchResult, EnableError, HvResult, HvState, HvcOp, UNHANDLED_TRAP_CODE,
};
use crate::injector::{FaultPlan, Injector, Intensity, RegisterCount, SlotFilter};
use crate::record::{LogSource, TrialHeader, TrialLog, TrialRecord};
use crate::sysconfig::{config_digest, SystemConfig};
use crate::workload::WorkloadSchedule;

// ---------------------------------------------------------------------------
// Outcomes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// The trial is indistinguishable from (or converged back to) healthy
    /// service.
    Correct,
    /// The corrupted management call was rejected and the guest never ran.
    RejectedEinval,
    /// The guest counts as running but produced no output.
    SilentRunning,
    /// A CPU was parked with the unhandled-trap code and its cell failed.
    CpuPark,
    /// The fault propagated into a kernel panic.
    PanicPark,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Correct => "correct",
            Outcome::RejectedEinval => "rejected_einval",
            Outcome::SilentRunning => "silent_running",
            Outcome::CpuPark => "cpu_park",
            Outcome::PanicPark => "panic_park",
        }
    }

    pub fn all() -> [Outcome; 5] {
        [
            Outcome::Correct,
            Outcome::RejectedEinval,
            Outcome::SilentRunning,
            Outcome::CpuPark,
            Outcome::PanicPark,
        ]
    }
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

// ---------------------------------------------------------------------------
// Effect modes
// ---------------------------------------------------------------------------

/// Outcome probabilities for the calibrated effect model. Must sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibratedSplit {
    pub p_correct: f64,
    pub p_panic: f64,
    pub p_park: f64,
    pub p_silent: f64,
}

impl Default for CalibratedSplit {
    /// The measured split of the reference deployment: most faults are
    /// masked, the dominant visible failure is a panic, a small share parks
    /// the CPU.
    fn default() -> Self {
        CalibratedSplit {
            p_correct: 0.65,
            p_panic: 0.30,
            p_park: 0.05,
            p_silent: 0.0,
        }
    }
}

impl CalibratedSplit {
    pub fn validate(&self) -> Result<(), String> {
        let parts = [self.p_correct, self.p_panic, self.p_park, self.p_silent];
        for p in parts {
            if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                return Err(format!("probability {p} outside [0, 1]"));
            }
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(format!("probabilities sum to {sum}, expected 1"));
        }
        Ok(())
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> EffectKind {
        let u: f64 = rng.random();
        if u < self.p_correct {
            EffectKind::Correct
        } else if u < self.p_correct + self.p_panic {
            EffectKind::Panic
        } else if u < self.p_correct + self.p_panic + self.p_park {
            EffectKind::Park
        } else {
            EffectKind::Silent
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectKind {
    Correct,
    Panic,
    Park,
    Silent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EffectMode {
    /// Corrupted contexts flow into the handlers and consequences emerge
    /// from the model.
    Mechanistic,
    /// The first firing's consequence is drawn from a measured distribution
    /// instead; later firings are logged but leave the event untouched.
    Calibrated(CalibratedSplit),
}

// ---------------------------------------------------------------------------
// Trial driver
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum TrialError {
    #[error(transparent)]
    Enable(#[from] EnableError),
    #[error("horizon {got} shorter than the boot/teardown script ({min})")]
    HorizonTooShort { min: u64, got: u64 },
    #[error("task `{0}` has period 0")]
    ZeroTaskPeriod(String),
    #[error("bad calibrated split: {0}")]
    BadSplit(String),
}

/// Extra stream salt so calibrated draws never reuse the flip-choice stream.
const EFFECT_STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Runs one trial and returns its log.
pub fn run_trial(
    cfg: &SystemConfig,
    schedule: &WorkloadSchedule,
    plan: Option<&FaultPlan>,
    horizon: u64,
    mode: EffectMode,
) -> Result<TrialLog, TrialError> {
    run_trial_with_state(cfg, schedule, plan, horizon, mode).map(|(log, _)| log)
}

/// Like [`run_trial`], but also hands back the final hypervisor state for
/// assertions beyond what the log carries.
pub fn run_trial_with_state(
    cfg: &SystemConfig,
    schedule: &WorkloadSchedule,
    plan: Option<&FaultPlan>,
    horizon: u64,
    mode: EffectMode,
) -> Result<(TrialLog, HvState), TrialError> {
    if horizon < schedule.min_horizon() {
        return Err(TrialError::HorizonTooShort {
            min: schedule.min_horizon(),
            got: horizon,
        });
    }
    if let Some(t) = schedule.tasks.iter().find(|t| t.period == 0) {
        return Err(TrialError::ZeroTaskPeriod(format!(
            "{:?} in {}",
            t.kind, t.cell
        )));
    }
    if let EffectMode::Calibrated(split) = mode {
        split.validate().map_err(TrialError::BadSplit)?;
    }

    let schedule = schedule.clone().with_horizon(horizon);
    let mut state = HvState::enable(cfg.clone())?;
    let mut injector = plan.map(|p| Injector::new(p.clone()));
    let mut effect_rng = plan.map(|p| ChaCha8Rng::seed_from_u64(p.seed ^ EFFECT_STREAM_SALT));
    let mut effect_done = false;
    let mut records: Vec<TrialRecord> = Vec::new();

    for i in 0..horizon {
        let (mut ev, line) = schedule.event_at(i);
        if let Some(inj) = injector.as_mut() {
            if inj.observe(&ev) {
                match mode {
                    EffectMode::Mechanistic => {
                        let rec = inj.corrupt(i, &mut ev);
                        records.push(TrialRecord::Injection {
                            index: i,
                            cpu: rec.cpu,
                            target: rec.target,
                            flips: rec.flips,
                        });
                    }
                    EffectMode::Calibrated(split) => {
                        records.push(TrialRecord::Injection {
                            index: i,
                            cpu: ev.cpu(),
                            target: inj.plan().target,
                            flips: Vec::new(),
                        });
                        // The drawn consequence stands in for what corruption
                        // would do to an executing guest, so it waits for a
                        // firing whose CPU is actually running.
                        let running =
                            matches!(state.cpu_mode(ev.cpu()), Some(CpuMode::Running(_)));
                        if !effect_done && running && !state.panicked() {
                            effect_done = true;
                            let effect = split.draw(effect_rng.as_mut().expect("plan set"));
                            records.push(TrialRecord::CalibratedEffect { index: i, effect });
                            match effect {
                                EffectKind::Correct => {}
                                EffectKind::Panic => state.apply_panic_effect(i, ev.cpu()),
                                EffectKind::Park => state.apply_park_effect(i, ev.cpu()),
                                EffectKind::Silent => state.apply_silent_effect(i, ev.cpu()),
                            }
                        }
                    }
                }
            }
        }
        let disp = state.dispatch(i, &ev);
        records.extend(state.take_records());
        if let Some(line) = line {
            let healthy = disp == DispatchResult::Dispatched
                && !state.panicked()
                && matches!(state.cpu_mode(ev.cpu()), Some(CpuMode::Running(_)));
            if healthy {
                records.push(TrialRecord::Console {
                    index: i,
                    cell: line.cell,
                    line: line.text,
                });
            }
        }
    }

    let header = TrialHeader {
        config_digest: config_digest(cfg),
        schedule_digest: schedule.digest(),
        plan: plan.cloned(),
        seed: plan.map_or(0, |p| p.seed),
        horizon,
        mode,
        source: LogSource::Simulated,
    };
    Ok((TrialLog { header, records }, state))
}

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

/// Reduces a trial log to its outcome. The rules nest by severity: a panic
/// dominates everything, then a 0x24 park with a failed cell, then a guest
/// that ran without ever printing, then a rejected management call that kept
/// the guest down. A trial that none of the rules claim was correct.
pub fn classify(log: &TrialLog) -> Outcome {
    let mut panic = false;
    let mut park24 = false;
    let mut cell_failed = false;
    let mut guest_running = false;
    let mut guest_lines = 0u64;
    let mut manage_einval = false;
    for rec in &log.records {
        match rec {
            TrialRecord::Panic { .. } => panic = true,
            TrialRecord::Park { code, .. } if *code == UNHANDLED_TRAP_CODE => park24 = true,
            TrialRecord::Lifecycle { cell, to, .. } => {
                if *to == crate::hvmodel::CellStatus::Failed {
                    cell_failed = true;
                }
                if *to == crate::hvmodel::CellStatus::Running && cell != "root" {
                    guest_running = true;
                }
            }
            TrialRecord::Console { cell, .. } if cell != "root" => guest_lines += 1,
            TrialRecord::HvcCall {
                op: Some(HvcOp::CellCreate | HvcOp::CellStart),
                result: HvResult::Einval,
                ..
            } => manage_einval = true,
            _ => {}
        }
    }
    if panic {
        return Outcome::PanicPark;
    }
    if park24 && cell_failed {
        return Outcome::CpuPark;
    }
    if guest_running && guest_lines == 0 {
        return Outcome::SilentRunning;
    }
    if manage_einval && !guest_running {
        return Outcome::RejectedEinval;
    }
    Outcome::Correct
}

// ---------------------------------------------------------------------------
// Campaign
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub correct: u64,
    pub rejected_einval: u64,
    pub silent_running: u64,
    pub cpu_park: u64,
    pub panic_park: u64,
}

impl OutcomeCounts {
    pub fn add(&mut self, outcome: Outcome) {
        match outcome {
            Outcome::Correct => self.correct += 1,
            Outcome::RejectedEinval => self.rejected_einval += 1,
            Outcome::SilentRunning => self.silent_running += 1,
            Outcome::CpuPark => self.cpu_park += 1,
            Outcome::PanicPark => self.panic_park += 1,
        }
    }

    pub fn get(&self, outcome: Outcome) -> u64 {
        match outcome {
            Outcome::Correct => self.correct,
            Outcome::RejectedEinval => self.rejected_einval,
            Outcome::SilentRunning => self.silent_running,
            Outcome::CpuPark => self.cpu_park,
            Outcome::PanicPark => self.panic_park,
        }
    }

    pub fn total(&self) -> u64 {
        Outcome::all().iter().map(|&o| self.get(o)).sum()
    }

    pub fn proportion(&self, outcome: Outcome) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.get(outcome) as f64 / total as f64
        }
    }

    /// Share of trials whose service stayed correct.
    pub fn availability(&self) -> f64 {
        self.proportion(Outcome::Correct)
    }
}

/// Order-insensitive fold of outcomes into counts.
pub fn aggregate(outcomes: impl IntoIterator<Item = Outcome>) -> OutcomeCounts {
    let mut counts = OutcomeCounts::default();
    for o in outcomes {
        counts.add(o);
    }
    counts
}

/// Fault-plan descriptor echoed into reports (the per-trial seed is derived,
/// so it is not part of the identity).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumDesc {
    pub target: crate::injector::InjectionTarget,
    pub cpu_filter: Option<u32>,
    pub intensity: Intensity,
    pub slots: SlotFilter,
}

impl From<&FaultPlan> for StratumDesc {
    fn from(plan: &FaultPlan) -> Self {
        StratumDesc {
            target: plan.target,
            cpu_filter: plan.cpu_filter,
            intensity: plan.intensity,
            slots: plan.slots.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumReport {
    pub stratum: StratumDesc,
    pub trials: u64,
    pub counts: OutcomeCounts,
    pub availability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub config_digest: String,
    pub schedule_digest: String,
    pub mode: EffectMode,
    pub base_seed: u64,
    pub horizon: u64,
    pub trials_per_stratum: u64,
    pub strata: Vec<StratumReport>,
}

impl CampaignReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "stratum,target,cpu_filter,intensity,period,registers,slots,trials,\
             correct,rejected_einval,silent_running,cpu_park,panic_park,availability\n",
        );
        for (i, s) in self.strata.iter().enumerate() {
            let target = match s.stratum.target {
                crate::injector::InjectionTarget::Hvc => "hvc",
                crate::injector::InjectionTarget::Trap => "trap",
            };
            let cpu = s
                .stratum
                .cpu_filter
                .map_or("any".to_string(), |c| c.to_string());
            let (level, registers) = match s.stratum.intensity {
                Intensity::Medium { .. } => ("medium", "1".to_string()),
                Intensity::High { registers, .. } => (
                    "high",
                    match registers {
                        RegisterCount::Drawn => "2-4".to_string(),
                        RegisterCount::Fixed(k) => k.to_string(),
                    },
                ),
            };
            let slots = match &s.stratum.slots {
                SlotFilter::All => "all".to_string(),
                SlotFilter::Only(set) => set
                    .iter()
                    .map(|slot| slot.name())
                    .collect::<Vec<_>>()
                    .join("+"),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{:.6}\n",
                i,
                target,
                cpu,
                level,
                s.stratum.intensity.period(),
                registers,
                slots,
                s.trials,
                s.counts.correct,
                s.counts.rejected_einval,
                s.counts.silent_running,
                s.counts.cpu_park,
                s.counts.panic_park,
                s.availability,
            ));
        }
        out
    }
}

/// Availability of one stratum of a report.
pub fn availability(report: &CampaignReport, stratum: usize) -> Option<f64> {
    report.strata.get(stratum).map(|s| s.availability)
}

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error(transparent)]
    Trial(#[from] TrialError),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// Runs `trials` trials for every stratum. Trial seeds are
/// `base_seed + global ordinal`, so the campaign is one deterministic
/// function of its arguments regardless of worker count.
#[allow(clippy::too_many_arguments)]
pub fn run_campaign(
    cfg: &SystemConfig,
    schedule: &WorkloadSchedule,
    strata: &[FaultPlan],
    trials: u64,
    mode: EffectMode,
    base_seed: u64,
    horizon: u64,
    workers: usize,
) -> Result<CampaignReport, CampaignError> {
    run_campaign_with(
        cfg, schedule, strata, trials, mode, base_seed, horizon, workers, |_, _, _| {},
    )
}

/// [`run_campaign`] with a per-trial callback (stratum index, trial index,
/// log), e.g. for persisting the raw logs. The callback may run from worker
/// threads.
#[allow(clippy::too_many_arguments)]
pub fn run_campaign_with(
    cfg: &SystemConfig,
    schedule: &WorkloadSchedule,
    strata: &[FaultPlan],
    trials: u64,
    mode: EffectMode,
    base_seed: u64,
    horizon: u64,
    workers: usize,
    on_trial: impl Fn(usize, u64, &TrialLog) + Sync,
) -> Result<CampaignReport, CampaignError> {
    let jobs: Vec<(usize, u64)> = (0..strata.len())
        .flat_map(|s| (0..trials).map(move |t| (s, t)))
        .collect();
    let run_one = |&(s, t): &(usize, u64)| -> Result<(usize, Outcome), TrialError> {
        let ordinal = s as u64 * trials + t;
        let plan = strata[s].clone().with_seed(base_seed.wrapping_add(ordinal));
        let log = run_trial(cfg, schedule, Some(&plan), horizon, mode)?;
        on_trial(s, t, &log);
        Ok((s, classify(&log)))
    };

    let results: Vec<(usize, Outcome)> = if workers <= 1 {
        jobs.iter()
            .map(run_one)
            .collect::<Result<_, _>>()
            .map_err(CampaignError::Trial)?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| CampaignError::Pool(e.to_string()))?;
        pool.install(|| {
            jobs.par_iter()
                .map(run_one)
                .collect::<Result<Vec<_>, _>>()
                .map_err(CampaignError::Trial)
        })?
    };

    let mut per: Vec<OutcomeCounts> = vec![OutcomeCounts::default(); strata.len()];
    for (s, outcome) in results {
        per[s].add(outcome);
    }
    let strata_reports = strata
        .iter()
        .zip(per)
        .map(|(plan, counts)| StratumReport {
            stratum: StratumDesc::from(plan),
            trials,
            counts,
            availability: counts.availability(),
        })
        .collect();

    Ok(CampaignReport {
        config_digest: config_digest(cfg),
        schedule_digest: schedule.digest(),
        mode,
        base_seed,
        horizon,
        trials_per_stratum: trials,
        strata: strata_reports,
    })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hvmodel::CellStatus;
    use crate::injector::InjectionTarget;
    use crate::record::CtxDigest;
    use crate::sysconfig::parse_system_config;
    use crate::workload::default_workload;

    const SAMPLE: &str = r#"
hardware { num_cpus = 2 ram_size = 0x40000000 }
root {
    cpus = [0]
    region sys 0x00000000 0x10000000 READ WRITE EXECUTE
    region shm 0x3f000000 0x00010000 READ WRITE SHARED
    irqs = [32, 33, 34]
    comm = "shm"
}
cell "rtos" {
    cpus = [1]
    region ram 0x20000000 0x08000000 READ WRITE EXECUTE
    region shm 0x3f000000 0x00010000 READ WRITE SHARED
    irqs = [64, 65]
    comm = "shm"
}
"#;

    fn setup() -> (SystemConfig, WorkloadSchedule) {
        let cfg = parse_system_config(SAMPLE).unwrap();
        let schedule = default_workload(&cfg).unwrap();
        (cfg, schedule)
    }

    fn mk_log(records: Vec<TrialRecord>) -> TrialLog {
        TrialLog {
            header: TrialHeader {
                config_digest: "x".into(),
                schedule_digest: "y".into(),
                plan: None,
                seed: 0,
                horizon: 10,
                mode: EffectMode::Mechanistic,
                source: LogSource::Simulated,
            },
            records,
        }
    }

    fn lifecycle(cell: &str, from: CellStatus, to: CellStatus) -> TrialRecord {
        TrialRecord::Lifecycle {
            index: 0,
            cell: cell.into(),
            from,
            to,
        }
    }

    #[test]
    fn split_validation() {
        assert!(CalibratedSplit::default().validate().is_ok());
        let bad = CalibratedSplit {
            p_correct: 0.9,
            p_panic: 0.3,
            p_park: 0.0,
            p_silent: 0.0,
        };
        assert!(bad.validate().is_err());
        let neg = CalibratedSplit {
            p_correct: 1.2,
            p_panic: -0.2,
            p_park: 0.0,
            p_silent: 0.0,
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn split_draw_tracks_probabilities() {
        let split = CalibratedSplit::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut panics = 0u32;
        let n = 20_000;
        for _ in 0..n {
            if split.draw(&mut rng) == EffectKind::Panic {
                panics += 1;
            }
        }
        let p = f64::from(panics) / f64::from(n);
        assert!((p - 0.30).abs() < 0.02, "panic share {p}");
    }

    #[test]
    fn classify_precedence() {
        // Panic beats a simultaneous park.
        let log = mk_log(vec![
            TrialRecord::Park {
                index: 1,
                cpu: 1,
                code: 0x24,
            },
            lifecycle("rtos", CellStatus::Running, CellStatus::Failed),
            TrialRecord::Panic {
                index: 2,
                cpu: 1,
                addr: Some(0x100),
            },
        ]);
        assert_eq!(classify(&log), Outcome::PanicPark);

        // Park with a failed cell.
        let log = mk_log(vec![
            lifecycle("rtos", CellStatus::Created, CellStatus::Running),
            TrialRecord::Console {
                index: 3,
                cell: "rtos".into(),
                line: "int 3".into(),
            },
            TrialRecord::Park {
                index: 5,
                cpu: 1,
                code: 0x24,
            },
            lifecycle("rtos", CellStatus::Running, CellStatus::Failed),
        ]);
        assert_eq!(classify(&log), Outcome::CpuPark);

        // Running guest, zero guest output.
        let log = mk_log(vec![
            lifecycle("rtos", CellStatus::Created, CellStatus::Running),
            TrialRecord::Console {
                index: 4,
                cell: "root".into(),
                line: "recv 4".into(),
            },
        ]);
        assert_eq!(classify(&log), Outcome::SilentRunning);

        // Rejected start, guest never ran.
        let log = mk_log(vec![TrialRecord::HvcCall {
            index: 1,
            cpu: 0,
            op: Some(HvcOp::CellStart),
            arg: 3,
            ctx: Some(CtxDigest::default()),
            result: HvResult::Einval,
        }]);
        assert_eq!(classify(&log), Outcome::RejectedEinval);

        // Einval but the guest ran anyway: not a rejection.
        let log = mk_log(vec![
            TrialRecord::HvcCall {
                index: 1,
                cpu: 0,
                op: Some(HvcOp::CellCreate),
                arg: 9,
                ctx: Some(CtxDigest::default()),
                result: HvResult::Einval,
            },
            lifecycle("rtos", CellStatus::Created, CellStatus::Running),
            TrialRecord::Console {
                index: 6,
                cell: "rtos".into(),
                line: "int 6".into(),
            },
        ]);
        assert_eq!(classify(&log), Outcome::Correct);

        assert_eq!(classify(&mk_log(vec![])), Outcome::Correct);
    }

    #[test]
    fn golden_classifies_correct() {
        let (cfg, schedule) = setup();
        let log = run_trial(&cfg, &schedule, None, 200, EffectMode::Mechanistic).unwrap();
        assert_eq!(classify(&log), Outcome::Correct);
    }

    #[test]
    fn horizon_guard() {
        let (cfg, schedule) = setup();
        assert!(matches!(
            run_trial(&cfg, &schedule, None, 4, EffectMode::Mechanistic),
            Err(TrialError::HorizonTooShort { min: 5, got: 4 })
        ));
    }

    #[test]
    fn calibrated_forced_outcomes() {
        let (cfg, schedule) = setup();
        let plan = FaultPlan::new(InjectionTarget::Trap, Intensity::medium(), 11).on_cpu(1);
        let run = |split: CalibratedSplit| {
            run_trial_with_state(
                &cfg,
                &schedule,
                Some(&plan),
                500,
                EffectMode::Calibrated(split),
            )
            .unwrap()
        };

        let all_panic = CalibratedSplit {
            p_correct: 0.0,
            p_panic: 1.0,
            p_park: 0.0,
            p_silent: 0.0,
        };
        let (log, state) = run(all_panic);
        assert!(state.panicked());
        assert_eq!(classify(&log), Outcome::PanicPark);
        // The drawn panic carries no faulting address.
        assert!(log
            .records
            .iter()
            .any(|r| matches!(r, TrialRecord::Panic { addr: None, .. })));

        let all_park = CalibratedSplit {
            p_correct: 0.0,
            p_panic: 0.0,
            p_park: 1.0,
            p_silent: 0.0,
        };
        let (log, state) = run(all_park);
        assert_eq!(classify(&log), Outcome::CpuPark);
        assert!(!state.panicked());
        // The forced park failed the cell mid-run; teardown then destroyed it.
        assert!(log.records.iter().any(|r| matches!(
            r,
            TrialRecord::Lifecycle {
                from: CellStatus::Running,
                to: CellStatus::Failed,
                ..
            }
        )));
        assert_eq!(state.cell_status("rtos"), Some(CellStatus::Absent));

        let all_correct = CalibratedSplit {
            p_correct: 1.0,
            p_panic: 0.0,
            p_park: 0.0,
            p_silent: 0.0,
        };
        let (log, state) = run(all_correct);
        assert_eq!(classify(&log), Outcome::Correct);
        assert!(!state.panicked());
        // Every firing is still audited.
        assert!(log
            .records
            .iter()
            .filter(|r| matches!(r, TrialRecord::Injection { .. }))
            .count() > 1);

        let all_silent = CalibratedSplit {
            p_correct: 0.0,
            p_panic: 0.0,
            p_park: 0.0,
            p_silent: 1.0,
        };
        let (log, state) = run(all_silent);
        // The guest wedges without any park/panic evidence. Its cell status
        // never leaves running, so teardown still shuts it down cleanly.
        assert!(!state.panicked());
        assert!(!log.records.iter().any(|r| matches!(
            r,
            TrialRecord::Park { .. } | TrialRecord::Panic { .. }
        )));
        let fault_at = log
            .records
            .iter()
            .find_map(|r| match r {
                TrialRecord::CalibratedEffect { index, .. } => Some(*index),
                _ => None,
            })
            .expect("effect fired");
        // No guest output after the wedge, while the root keeps printing.
        assert!(!log.records.iter().any(|r| matches!(
            r,
            TrialRecord::Console { index, cell, .. } if *index > fault_at && cell == "rtos"
        )));
        assert!(log.records.iter().any(|r| matches!(
            r,
            TrialRecord::Console { index, cell, .. } if *index > fault_at && cell == "root"
        )));
    }

    #[test]
    fn calibrated_is_per_trial_not_per_firing() {
        let (cfg, schedule) = setup();
        let plan = FaultPlan::new(InjectionTarget::Trap, Intensity::medium(), 23).on_cpu(1);
        let split = CalibratedSplit {
            p_correct: 0.0,
            p_panic: 1.0,
            p_park: 0.0,
            p_silent: 0.0,
        };
        let log = run_trial(&cfg, &schedule, Some(&plan), 2_000, EffectMode::Calibrated(split))
            .unwrap();
        let effects = log
            .records
            .iter()
            .filter(|r| matches!(r, TrialRecord::CalibratedEffect { .. }))
            .count();
        assert_eq!(effects, 1);
    }

    #[test]
    fn campaign_is_deterministic_across_workers() {
        let (cfg, schedule) = setup();
        let strata = vec![
            FaultPlan::new(InjectionTarget::Trap, Intensity::medium(), 0).on_cpu(1),
            FaultPlan::new(InjectionTarget::Trap, Intensity::high(), 0).on_cpu(1),
        ];
        let run = |workers| {
            run_campaign(
                &cfg,
                &schedule,
                &strata,
                20,
                EffectMode::Mechanistic,
                99,
                600,
                workers,
            )
            .unwrap()
        };
        let seq = run(1);
        let par = run(4);
        assert_eq!(seq, par);
        assert_eq!(seq.to_json(), par.to_json());
        assert_eq!(seq.to_csv(), par.to_csv());
        for s in &seq.strata {
            assert_eq!(s.counts.total(), 20);
            assert!((0.0..=1.0).contains(&s.availability));
        }
    }

    #[test]
    fn campaign_outcomes_vary_under_injection() {
        let (cfg, schedule) = setup();
        let strata = vec![FaultPlan::new(InjectionTarget::Trap, Intensity::high(), 0).on_cpu(1)];
        let report = run_campaign(
            &cfg,
            &schedule,
            &strata,
            30,
            EffectMode::Mechanistic,
            7,
            1_000,
            1,
        )
        .unwrap();
        let counts = report.strata[0].counts;
        // High-intensity corruption of guest traps must surface at least one
        // non-correct outcome.
        assert!(counts.total() > counts.correct);
        assert_eq!(availability(&report, 0), Some(counts.availability()));
        assert_eq!(availability(&report, 5), None);
    }

    #[test]
    fn aggregation_is_order_insensitive() {
        let a = vec![
            Outcome::Correct,
            Outcome::PanicPark,
            Outcome::PanicPark,
            Outcome::CpuPark,
        ];
        let mut b = a.clone();
        b.reverse();
        assert_eq!(aggregate(a), aggregate(b));
    }

    #[test]
    fn csv_shape() {
        let (cfg, schedule) = setup();
        let strata = vec![FaultPlan::new(InjectionTarget::Hvc, Intensity::medium(), 0)];
        let report = run_campaign(
            &cfg,
            &schedule,
            &strata,
            2,
            EffectMode::Mechanistic,
            1,
            100,
            1,
        )
        .unwrap();
        let csv = report.to_csv();
        let mut lines = csv.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("stratum,target,cpu_filter"));
        let row = lines.next().unwrap();
        assert!(row.starts_with("0,hvc,any,medium,100,1,all,2,"));
        assert_eq!(lines.next(), None);
    }
}

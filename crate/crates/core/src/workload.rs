//! Deterministic event schedule modeling the reference deployment: the root
//! cell boots a guest, the guest runs a small real-time task set (an LED
//! blinker, a sender/receiver pair over the shared-memory channel, floating
//! point and integer compute tasks), the root consumes the channel, and at
//! the end of the horizon the root shuts the guest down and destroys it.
//!
//! The event at position `i` is a pure function of the schedule, so two
//! walks over the same schedule are identical and an injected trial differs
//! from the golden run only where the injector fired.

use serde::Serialize;
use thiserror::Error;

use crate::campaign::{run_trial, EffectMode, TrialError};
use crate::digest::fnv64_hex;
use crate::hvmodel::{
    CpuId, Event, HvcOp, RegisterContext, ESR_CLASS_BENIGN, ESR_CLASS_DATA_ABORT, ESR_CLASS_HVC,
};
use crate::record::{LogSource, TrialHeader, TrialLog};
use crate::sysconfig::{config_digest, RegionFlags, SystemConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Blink,
    Sender,
    Receiver,
    FpArith,
    IntArith,
}

impl TaskKind {
    fn label(self) -> &'static str {
        match self {
            TaskKind::Blink => "blink",
            TaskKind::Sender => "send",
            TaskKind::Receiver => "recv",
            TaskKind::FpArith => "fp",
            TaskKind::IntArith => "int",
        }
    }
}

/// One periodic task, pinned to a cell and one of its CPUs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub period: u64,
    pub cell: String,
    pub cpu: CpuId,
}

/// What a healthy guest would print when the task at this position runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsoleLine {
    pub cell: String,
    pub text: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WorkloadError {
    #[error("no guest cell declares a comm channel")]
    MissingChannel,
    #[error("cell `{0}` has no executable region to enter")]
    NoExecutableRegion(String),
    #[error("cell `{0}` owns no interrupt vector for the blink task")]
    NoInterrupt(String),
    #[error("root cell has no cpus")]
    NoRootCpu,
}

/// The full schedule: boot script, periodic task set, teardown script.
///
/// Positions 0 and 1 are the root's create and start hypercalls, the next
/// `cell_cpus.len()` positions are the guest's entry traps, and the last two
/// are shutdown and destroy. Between those, exactly one task activation per
/// position.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkloadSchedule {
    pub tasks: Vec<TaskSpec>,
    pub horizon: u64,
    pub root_cpu: CpuId,
    pub root_pc: u32,
    /// The guest the boot/teardown script manages.
    pub cell: String,
    /// Its create handle (equal to its cell id).
    pub cell_arg: u32,
    pub cell_cpus: Vec<CpuId>,
    pub entry_pc: u32,
    pub comm_base: u32,
    pub blink_vector: u32,
}

pub const DEFAULT_HORIZON: u64 = 10_000;

impl WorkloadSchedule {
    pub fn with_horizon(mut self, horizon: u64) -> WorkloadSchedule {
        self.horizon = horizon;
        self
    }

    /// Smallest horizon that fits the boot and teardown scripts.
    pub fn min_horizon(&self) -> u64 {
        2 + self.cell_cpus.len() as u64 + 2
    }

    fn boot_len(&self) -> u64 {
        2 + self.cell_cpus.len() as u64
    }

    /// Digest over everything but the horizon, which the trial header
    /// carries separately.
    pub fn digest(&self) -> String {
        let body = serde_json::to_string(&(
            &self.tasks,
            self.root_cpu,
            self.root_pc,
            &self.cell,
            self.cell_arg,
            &self.cell_cpus,
            self.entry_pc,
            self.comm_base,
            self.blink_vector,
        ))
        .expect("schedule serializes");
        fnv64_hex(body.as_bytes())
    }

    /// The event at position `i`, together with the console line a healthy
    /// run would produce there. Script positions print nothing.
    pub fn event_at(&self, i: u64) -> (Event, Option<ConsoleLine>) {
        let boot = self.boot_len();
        if i == 0 {
            return (
                Event::Hypercall {
                    cpu: self.root_cpu,
                    ctx: RegisterContext::hypercall(HvcOp::CellCreate.code(), self.cell_arg),
                },
                None,
            );
        }
        if i == 1 {
            return (
                Event::Hypercall {
                    cpu: self.root_cpu,
                    ctx: RegisterContext::hypercall(HvcOp::CellStart.code(), self.cell_arg),
                },
                None,
            );
        }
        if i < boot {
            let cpu = self.cell_cpus[(i - 2) as usize];
            return (
                Event::Trap {
                    cpu,
                    ctx: RegisterContext::trap(ESR_CLASS_HVC, syndrome(i), 0, self.entry_pc),
                },
                None,
            );
        }
        if i == self.horizon - 2 {
            return (
                Event::Hypercall {
                    cpu: self.root_cpu,
                    ctx: RegisterContext::hypercall(HvcOp::CellShutdown.code(), self.cell_arg),
                },
                None,
            );
        }
        if i == self.horizon - 1 {
            return (
                Event::Hypercall {
                    cpu: self.root_cpu,
                    ctx: RegisterContext::hypercall(HvcOp::CellDestroy.code(), self.cell_arg),
                },
                None,
            );
        }
        self.steady_event(i)
    }

    /// Rate-monotonic flavored pick: every task whose period divides
    /// `i + offset` is due; the slowest due task wins, list order breaking
    /// ties. The per-task offset staggers activations.
    fn steady_event(&self, i: u64) -> (Event, Option<ConsoleLine>) {
        let mut best: Option<(u64, usize)> = None;
        for (j, t) in self.tasks.iter().enumerate() {
            if (i + j as u64).is_multiple_of(t.period) {
                let better = match best {
                    None => true,
                    Some((period, _)) => t.period > period,
                };
                if better {
                    best = Some((t.period, j));
                }
            }
        }
        match best {
            Some((_, j)) => self.task_event(i, &self.tasks[j]),
            // Nothing due: an idle tick in the root cell.
            None => (
                Event::Trap {
                    cpu: self.root_cpu,
                    ctx: RegisterContext::trap(ESR_CLASS_BENIGN, syndrome(i), 0, self.root_pc),
                },
                None,
            ),
        }
    }

    fn task_event(&self, i: u64, t: &TaskSpec) -> (Event, Option<ConsoleLine>) {
        let base = if t.cell == "root" {
            self.root_pc
        } else {
            self.entry_pc
        };
        let pc = base.wrapping_add(((i % 64) as u32) * 4);
        let ev = match t.kind {
            TaskKind::Blink => Event::Irq {
                cpu: t.cpu,
                vector: self.blink_vector,
            },
            TaskKind::Sender | TaskKind::Receiver => Event::Trap {
                cpu: t.cpu,
                ctx: RegisterContext::trap(ESR_CLASS_DATA_ABORT, syndrome(i), self.comm_base, pc),
            },
            TaskKind::FpArith | TaskKind::IntArith => Event::Trap {
                cpu: t.cpu,
                ctx: RegisterContext::trap(ESR_CLASS_BENIGN, syndrome(i), 0, pc),
            },
        };
        let line = ConsoleLine {
            cell: t.cell.clone(),
            text: format!("{} {}", t.kind.label(), i),
        };
        (ev, Some(line))
    }
}

fn syndrome(i: u64) -> u32 {
    (i as u32) & 0x03ff_ffff
}

/// Builds the reference workload for a configuration: the first guest cell
/// with a comm channel runs the task set, the root runs a receiver that
/// drains the channel.
pub fn default_workload(cfg: &SystemConfig) -> Result<WorkloadSchedule, WorkloadError> {
    let (idx, cell) = cfg
        .cells
        .iter()
        .enumerate()
        .find(|(_, c)| c.comm.is_some())
        .ok_or(WorkloadError::MissingChannel)?;
    let comm_name = cell.comm.as_deref().expect("filtered on comm");
    let comm = cell
        .region_named(comm_name)
        .ok_or(WorkloadError::MissingChannel)?;
    let entry = cell
        .regions
        .iter()
        .find(|r| r.flags.contains(RegionFlags::EXECUTE))
        .ok_or_else(|| WorkloadError::NoExecutableRegion(cell.name.clone()))?;
    let blink_vector = *cell
        .irqs
        .iter()
        .next()
        .ok_or_else(|| WorkloadError::NoInterrupt(cell.name.clone()))?;
    let root_cpu = *cfg.root.cpus.iter().next().ok_or(WorkloadError::NoRootCpu)?;
    let root_pc = cfg
        .root
        .regions
        .iter()
        .find(|r| r.flags.contains(RegionFlags::EXECUTE))
        .map(|r| r.base)
        .unwrap_or(0);
    let cell_cpus: Vec<CpuId> = cell.cpus.iter().copied().collect();
    let guest_cpu = *cell_cpus.first().unwrap_or(&root_cpu);

    let guest = |kind, period| TaskSpec {
        kind,
        period,
        cell: cell.name.clone(),
        cpu: guest_cpu,
    };
    let mut tasks = vec![
        guest(TaskKind::Blink, 50),
        guest(TaskKind::Sender, 7),
        guest(TaskKind::Receiver, 7),
        guest(TaskKind::FpArith, 11),
        guest(TaskKind::FpArith, 11),
    ];
    for _ in 0..15 {
        tasks.push(guest(TaskKind::IntArith, 3));
    }
    tasks.push(TaskSpec {
        kind: TaskKind::Receiver,
        period: 13,
        cell: cfg.root.name.clone(),
        cpu: root_cpu,
    });

    Ok(WorkloadSchedule {
        tasks,
        horizon: DEFAULT_HORIZON,
        root_cpu,
        root_pc,
        cell: cell.name.clone(),
        cell_arg: (idx + 1) as u32,
        cell_cpus,
        entry_pc: entry.base,
        comm_base: comm.base,
        blink_vector,
    })
}

/// A fault-free trial over the schedule.
pub fn golden_run(
    cfg: &SystemConfig,
    schedule: &WorkloadSchedule,
    horizon: u64,
) -> Result<TrialLog, TrialError> {
    run_trial(cfg, schedule, None, horizon, EffectMode::Mechanistic)
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("log was ingested from serial capture and cannot be replayed")]
    NotSimulated,
    #[error("config digest mismatch: header {header}, actual {actual}")]
    ConfigDigest { header: String, actual: String },
    #[error("schedule digest mismatch: header {header}, actual {actual}")]
    ScheduleDigest { header: String, actual: String },
    #[error(transparent)]
    Trial(#[from] TrialError),
}

/// Re-executes the trial a header describes. With matching digests the
/// result is byte-for-byte the original log.
pub fn replay_trial(
    cfg: &SystemConfig,
    schedule: &WorkloadSchedule,
    header: &TrialHeader,
) -> Result<TrialLog, ReplayError> {
    if header.source != LogSource::Simulated {
        return Err(ReplayError::NotSimulated);
    }
    let actual_cfg = config_digest(cfg);
    if actual_cfg != header.config_digest {
        return Err(ReplayError::ConfigDigest {
            header: header.config_digest.clone(),
            actual: actual_cfg,
        });
    }
    let actual_sched = schedule.digest();
    if actual_sched != header.schedule_digest {
        return Err(ReplayError::ScheduleDigest {
            header: header.schedule_digest.clone(),
            actual: actual_sched,
        });
    }
    let log = run_trial(
        cfg,
        schedule,
        header.plan.as_ref(),
        header.horizon,
        header.mode,
    )?;
    Ok(log)
}

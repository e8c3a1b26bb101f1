//! Deterministic model of a static partitioning hypervisor together with a
//! bit-flip fault injector, trial/campaign drivers, an outcome classifier and
//! a serial-log ingester.
//!
//! The model mirrors a small ARM board split into a root cell and one or more
//! guest cells: CPUs, guest-physical memory regions and interrupt vectors are
//! statically assigned, and the only interaction channel between cells is a
//! shared-memory region declared by both sides. Everything is a value:
//! enabling the hypervisor yields an [`HvState`], events are dispatched one
//! at a time, and a trial is nothing but a fold over a deterministic event
//! schedule. Replays are byte identical given the same config, schedule,
//! plan and seed.

mod digest;
pub mod textdoc;

pub mod campaign;
pub mod hvmodel;
pub mod injector;
pub mod plan;
pub mod record;
pub mod serial;
pub mod sysconfig;
pub mod workload;

pub use campaign::{
    aggregate, availability, classify, run_campaign, run_campaign_with, run_trial,
    run_trial_with_state, CalibratedSplit, CampaignError, CampaignReport, EffectKind, EffectMode,
    Outcome, OutcomeCounts, StratumDesc, StratumReport, TrialError,
};
pub use hvmodel::{
    CellId, CellStatus, Counters, CpuId, CpuMode, DispatchResult, EnableError, Event,
    HandoffError, HvResult, HvState, HvcOp, IrqResult, RegisterContext, TrapAction,
    ESR_CLASS_BENIGN, ESR_CLASS_DATA_ABORT, ESR_CLASS_HVC, ROOT_CELL, UNHANDLED_TRAP_CODE,
};
pub use injector::{
    bit_flip, choose_flips, should_fire, BitOutOfRange, FaultPlan, Flip, InjectionRecord,
    InjectionTarget, Injector, Intensity, RegisterCount, Slot, SlotFilter,
};
pub use plan::{parse_plan, CampaignPlan};
pub use record::{
    CtxDigest, LogReadError, LogSource, SuppressReason, TrialHeader, TrialLog, TrialRecord,
};
pub use serial::{ingest, parse_serial_line, serialize_trial, IngestError, SerialLine, SerialLineKind};
pub use sysconfig::{
    config_digest, parse_system_config, print_system_config, resource_view, validate, CellConfig,
    MemoryRegion, RegionFlags, ResourceSet, SystemConfig, UnknownCell, Violation, ViolationCode,
};
pub use textdoc::ParseError;
pub use workload::{
    default_workload, golden_run, replay_trial, ConsoleLine, ReplayError, TaskKind, TaskSpec,
    WorkloadError, WorkloadSchedule,
};

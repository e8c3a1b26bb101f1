//! The hypervisor state machine: cell lifecycle, CPU modes, resource
//! ownership and the three exception-level entry points (hypercall, trap,
//! interrupt). State changes only through event dispatch, and every change
//! is reflected in the trial record stream.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::{CtxDigest, SuppressReason, TrialRecord};
use crate::sysconfig::{
    resource_view, validate, RegionFlags, ResourceSet, SystemConfig, Violation,
};

pub use crate::sysconfig::CpuId;

/// Cell identity. The root cell is 0; guest cells are numbered from 1 in
/// declaration order, and a guest's hypercall handle equals its id.
pub type CellId = u32;

pub const ROOT_CELL: CellId = 0;

/// Exception syndrome classes the model interprets (top six bits of `esr`).
pub const ESR_CLASS_HVC: u32 = 1;
pub const ESR_CLASS_DATA_ABORT: u32 = 2;
pub const ESR_CLASS_BENIGN: u32 = 3;

/// Status code reported when a trap has no handler and the CPU is parked.
pub const UNHANDLED_TRAP_CODE: u32 = 0x24;

// ---------------------------------------------------------------------------
// Register context and events
// ---------------------------------------------------------------------------

/// Trapped guest context: sixteen general-purpose registers (r13 = sp,
/// r14 = lr, r15 = pc) plus the exception syndrome register.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegisterContext {
    pub r: [u32; 16],
    pub esr: u32,
}

pub const PC: usize = 15;

impl RegisterContext {
    pub fn zeroed() -> Self {
        RegisterContext { r: [0; 16], esr: 0 }
    }

    /// Context for a hypercall: operation code in r0, argument in r1.
    pub fn hypercall(code: u32, arg: u32) -> Self {
        let mut ctx = RegisterContext::zeroed();
        ctx.r[0] = code;
        ctx.r[1] = arg;
        ctx.esr = ESR_CLASS_HVC << 26;
        ctx
    }

    /// Context for a synchronous trap. For data aborts (`class` 2) `fault_addr`
    /// lands in r2, the register the abort handler decodes.
    pub fn trap(class: u32, syndrome: u32, fault_addr: u32, pc: u32) -> Self {
        let mut ctx = RegisterContext::zeroed();
        ctx.r[2] = fault_addr;
        ctx.r[PC] = pc;
        ctx.esr = (class << 26) | (syndrome & 0x03ff_ffff);
        ctx
    }

    pub fn pc(&self) -> u32 {
        self.r[PC]
    }

    pub fn esr_class(&self) -> u32 {
        self.esr >> 26
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    Hypercall { cpu: CpuId, ctx: RegisterContext },
    Trap { cpu: CpuId, ctx: RegisterContext },
    Irq { cpu: CpuId, vector: u32 },
}

impl Event {
    pub fn cpu(&self) -> CpuId {
        match self {
            Event::Hypercall { cpu, .. } | Event::Trap { cpu, .. } | Event::Irq { cpu, .. } => *cpu,
        }
    }

    pub fn ctx(&self) -> Option<&RegisterContext> {
        match self {
            Event::Hypercall { ctx, .. } | Event::Trap { ctx, .. } => Some(ctx),
            Event::Irq { .. } => None,
        }
    }

    pub fn ctx_mut(&mut self) -> Option<&mut RegisterContext> {
        match self {
            Event::Hypercall { ctx, .. } | Event::Trap { ctx, .. } => Some(ctx),
            Event::Irq { .. } => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Result and status types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HvcOp {
    CellCreate,
    CellStart,
    CellShutdown,
    CellDestroy,
}

impl HvcOp {
    pub fn code(self) -> u32 {
        match self {
            HvcOp::CellCreate => 0,
            HvcOp::CellStart => 1,
            HvcOp::CellShutdown => 2,
            HvcOp::CellDestroy => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<HvcOp> {
        match code {
            0 => Some(HvcOp::CellCreate),
            1 => Some(HvcOp::CellStart),
            2 => Some(HvcOp::CellShutdown),
            3 => Some(HvcOp::CellDestroy),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HvResult {
    Ok,
    Einval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrapAction {
    Handled,
    Panic,
    Unhandled { code: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IrqResult {
    Delivered,
    IrqError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Absent,
    Created,
    Running,
    ShutDown,
    Failed,
}

impl CellStatus {
    /// The legal lifecycle edges. Everything else is rejected (or, in the
    /// model itself, unreachable).
    pub fn can_transition(self, to: CellStatus) -> bool {
        matches!(
            (self, to),
            (CellStatus::Absent, CellStatus::Created)
                | (CellStatus::Created, CellStatus::Running)
                | (CellStatus::Running, CellStatus::ShutDown)
                | (CellStatus::Running, CellStatus::Failed)
                | (CellStatus::ShutDown, CellStatus::Absent)
                | (CellStatus::Failed, CellStatus::Absent)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CellStatus::Absent => "absent",
            CellStatus::Created => "created",
            CellStatus::Running => "running",
            CellStatus::ShutDown => "shut_down",
            CellStatus::Failed => "failed",
        }
    }

    pub fn from_str_name(s: &str) -> Option<CellStatus> {
        match s {
            "absent" => Some(CellStatus::Absent),
            "created" => Some(CellStatus::Created),
            "running" => Some(CellStatus::Running),
            "shut_down" => Some(CellStatus::ShutDown),
            "failed" => Some(CellStatus::Failed),
            _ => None,
        }
    }
}

impl std::fmt::Display for CellStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpuMode {
    /// Not executing anything; owned by the root pool.
    Offline,
    /// Executing on behalf of a cell.
    Running(CellId),
    /// Wedged in the parking loop until its cell is destroyed.
    Parked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counters {
    pub hvc: u64,
    pub trap: u64,
    pub irq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispatchResult {
    /// A handler ran (or a handoff completed).
    Dispatched,
    /// The event had no one to run on and was dropped with a record.
    Suppressed,
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum EnableError {
    #[error("configuration has {} violation(s); first: {}", .0.len(), .0[0])]
    InvalidConfig(Vec<Violation>),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HandoffError {
    #[error("unknown cell `{0}`")]
    UnknownCell(String),
    #[error("cell `{name}` is {found}, expected created")]
    BadStatus { name: String, found: CellStatus },
}

// ---------------------------------------------------------------------------
// Hypervisor state
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct HvState {
    cfg: SystemConfig,
    names: Vec<String>,
    statuses: Vec<CellStatus>,
    cpu_modes: Vec<CpuMode>,
    ownership: BTreeMap<String, ResourceSet>,
    /// CPUs kicked by a successful start hypercall, waiting for their
    /// entry trap. Maps cpu to the cell coming online.
    pending_online: BTreeMap<CpuId, CellId>,
    counters: Counters,
    panic: bool,
    trace: Vec<TrialRecord>,
    cur_index: u64,
}

impl HvState {
    /// Validates the configuration and brings the hypervisor up: the root
    /// cell runs on its CPUs and owns every resource no guest holds.
    pub fn enable(cfg: SystemConfig) -> Result<HvState, EnableError> {
        let violations = validate(&cfg);
        if !violations.is_empty() {
            return Err(EnableError::InvalidConfig(violations));
        }
        let names: Vec<String> = cfg.all_cells().map(|c| c.name.clone()).collect();
        let mut statuses = vec![CellStatus::Absent; names.len()];
        statuses[ROOT_CELL as usize] = CellStatus::Running;
        let mut cpu_modes = vec![CpuMode::Offline; cfg.num_cpus as usize];
        for &cpu in &cfg.root.cpus {
            cpu_modes[cpu as usize] = CpuMode::Running(ROOT_CELL);
        }
        let ownership = resource_view(&cfg, &Default::default()).expect("validated config");
        Ok(HvState {
            cfg,
            names,
            statuses,
            cpu_modes,
            ownership,
            pending_online: BTreeMap::new(),
            counters: Counters::default(),
            panic: false,
            trace: Vec::new(),
            cur_index: 0,
        })
    }

    // -- accessors ---------------------------------------------------------

    pub fn cfg(&self) -> &SystemConfig {
        &self.cfg
    }

    pub fn cell_id(&self, name: &str) -> Option<CellId> {
        self.names.iter().position(|n| n == name).map(|i| i as CellId)
    }

    pub fn cell_name(&self, id: CellId) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn status(&self, id: CellId) -> Option<CellStatus> {
        self.statuses.get(id as usize).copied()
    }

    pub fn cell_status(&self, name: &str) -> Option<CellStatus> {
        self.cell_id(name).and_then(|id| self.status(id))
    }

    pub fn cpu_mode(&self, cpu: CpuId) -> Option<CpuMode> {
        self.cpu_modes.get(cpu as usize).copied()
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn panicked(&self) -> bool {
        self.panic
    }

    pub fn ownership(&self) -> &BTreeMap<String, ResourceSet> {
        &self.ownership
    }

    /// Drains the records accumulated since the last call.
    pub fn take_records(&mut self) -> Vec<TrialRecord> {
        std::mem::take(&mut self.trace)
    }

    fn running_cell(&self, cpu: CpuId) -> Option<CellId> {
        match self.cpu_modes.get(cpu as usize) {
            Some(CpuMode::Running(cell)) => Some(*cell),
            _ => None,
        }
    }

    fn guest_id(&self, arg: u32) -> Option<CellId> {
        if arg >= 1 && (arg as usize) < self.names.len() {
            Some(arg)
        } else {
            None
        }
    }

    fn owned_set(&self, cell: CellId) -> &ResourceSet {
        &self.ownership[&self.names[cell as usize]]
    }

    // -- internal state changes --------------------------------------------

    fn set_status(&mut self, cell: CellId, to: CellStatus) {
        let from = self.statuses[cell as usize];
        debug_assert!(from.can_transition(to), "illegal {from} -> {to}");
        self.statuses[cell as usize] = to;
        self.trace.push(TrialRecord::Lifecycle {
            index: self.cur_index,
            cell: self.names[cell as usize].clone(),
            from,
            to,
        });
    }

    /// Ownership is always the projection of the current statuses: guests in
    /// CREATED or RUNNING hold their declared resources, everything else is
    /// the root's.
    fn recompute_ownership(&mut self) {
        let active = self
            .cfg
            .cells
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                matches!(
                    self.statuses[i + 1],
                    CellStatus::Created | CellStatus::Running
                )
            })
            .map(|(_, c)| c.name.clone())
            .collect();
        self.ownership = resource_view(&self.cfg, &active).expect("statuses track declared cells");
    }

    fn offline_cell_cpus(&mut self, cell: CellId) {
        let cpus = self.cfg.cells[cell as usize - 1].cpus.clone();
        for cpu in cpus {
            self.cpu_modes[cpu as usize] = CpuMode::Offline;
            self.pending_online.remove(&cpu);
        }
    }

    /// Parks a running CPU. Parking an already parked or offline CPU is a
    /// no-op.
    pub fn park_cpu(&mut self, cpu: CpuId) {
        if let Some(CpuMode::Running(_)) = self.cpu_mode(cpu) {
            self.cpu_modes[cpu as usize] = CpuMode::Parked;
        }
    }

    fn unhandled_park(&mut self, cpu: CpuId) {
        self.trace.push(TrialRecord::Park {
            index: self.cur_index,
            cpu,
            code: UNHANDLED_TRAP_CODE,
        });
        let cell = self.running_cell(cpu);
        self.park_cpu(cpu);
        if let Some(cell) = cell {
            if self.statuses[cell as usize] == CellStatus::Running {
                self.set_status(cell, CellStatus::Failed);
                self.recompute_ownership();
            }
        }
    }

    fn mark_panic(&mut self, cpu: CpuId, addr: Option<u32>) {
        self.trace.push(TrialRecord::Panic {
            index: self.cur_index,
            cpu,
            addr,
        });
        self.panic = true;
    }

    // -- calibrated-effect hooks --------------------------------------------

    pub(crate) fn apply_panic_effect(&mut self, index: u64, cpu: CpuId) {
        self.cur_index = index;
        self.mark_panic(cpu, None);
    }

    pub(crate) fn apply_park_effect(&mut self, index: u64, cpu: CpuId) {
        self.cur_index = index;
        self.unhandled_park(cpu);
    }

    pub(crate) fn apply_silent_effect(&mut self, index: u64, cpu: CpuId) {
        self.cur_index = index;
        self.park_cpu(cpu);
    }

    // -- handlers ------------------------------------------------------------

    /// Hypercall entry point. Only the root cell manages cells; anything
    /// malformed is rejected with EINVAL and touches nothing but the call
    /// counter.
    pub fn handle_hvc(&mut self, cpu: CpuId, ctx: &RegisterContext) -> HvResult {
        self.counters.hvc += 1;
        let op = HvcOp::from_code(ctx.r[0]);
        let arg = ctx.r[1];
        let mark = self.trace.len();
        let result = self.hvc_inner(cpu, op, arg);
        // The call precedes its lifecycle effects in the record stream.
        self.trace.insert(
            mark,
            TrialRecord::HvcCall {
                index: self.cur_index,
                cpu,
                op,
                arg,
                ctx: Some(CtxDigest::from(ctx)),
                result,
            },
        );
        result
    }

    fn hvc_inner(&mut self, cpu: CpuId, op: Option<HvcOp>, arg: u32) -> HvResult {
        let caller = match self.running_cell(cpu) {
            Some(cell) => cell,
            None => return HvResult::Einval,
        };
        if caller != ROOT_CELL {
            return HvResult::Einval;
        }
        let op = match op {
            Some(op) => op,
            None => return HvResult::Einval,
        };
        let cell = match self.guest_id(arg) {
            Some(cell) => cell,
            None => return HvResult::Einval,
        };
        let status = self.statuses[cell as usize];
        match op {
            HvcOp::CellCreate => {
                if status != CellStatus::Absent {
                    return HvResult::Einval;
                }
                self.set_status(cell, CellStatus::Created);
                self.recompute_ownership();
                HvResult::Ok
            }
            HvcOp::CellStart => {
                if status != CellStatus::Created {
                    return HvResult::Einval;
                }
                let cpus = self.cfg.cells[cell as usize - 1].cpus.clone();
                for cpu in cpus {
                    self.pending_online.insert(cpu, cell);
                }
                HvResult::Ok
            }
            HvcOp::CellShutdown => {
                if status != CellStatus::Running {
                    return HvResult::Einval;
                }
                self.set_status(cell, CellStatus::ShutDown);
                self.offline_cell_cpus(cell);
                self.recompute_ownership();
                HvResult::Ok
            }
            HvcOp::CellDestroy => {
                if !matches!(status, CellStatus::ShutDown | CellStatus::Failed) {
                    return HvResult::Einval;
                }
                self.set_status(cell, CellStatus::Absent);
                self.offline_cell_cpus(cell);
                self.recompute_ownership();
                HvResult::Ok
            }
        }
    }

    /// Synchronous trap entry point. Hypercall-class and emulation-class
    /// traps are absorbed; data aborts are checked against the faulting
    /// cell's memory; anything else has no handler and parks the CPU with
    /// status 0x24, failing the cell.
    pub fn handle_trap(&mut self, cpu: CpuId, ctx: &RegisterContext) -> TrapAction {
        self.counters.trap += 1;
        let class = ctx.esr_class();
        let action = match self.running_cell(cpu) {
            None => TrapAction::Handled,
            Some(cell) => match class {
                ESR_CLASS_HVC | ESR_CLASS_BENIGN => TrapAction::Handled,
                ESR_CLASS_DATA_ABORT => {
                    let addr = ctx.r[2];
                    if self.owned_set(cell).owns_addr(addr) {
                        TrapAction::Handled
                    } else if u64::from(addr) < self.cfg.ram_size {
                        TrapAction::Panic
                    } else {
                        // Beyond RAM: device space, emulated and ignored.
                        TrapAction::Handled
                    }
                }
                _ => TrapAction::Unhandled {
                    code: UNHANDLED_TRAP_CODE,
                },
            },
        };
        self.trace.push(TrialRecord::TrapCall {
            index: self.cur_index,
            cpu,
            class,
            ctx: Some(CtxDigest::from(ctx)),
            action,
        });
        match action {
            TrapAction::Handled => {}
            TrapAction::Panic => self.mark_panic(cpu, Some(ctx.r[2])),
            TrapAction::Unhandled { .. } => self.unhandled_park(cpu),
        }
        action
    }

    /// Interrupt entry point: vectors route to the cell running on the CPU
    /// (or the root when idle) and are delivered only if that cell owns the
    /// vector. Nothing but the counter changes either way.
    pub fn handle_irq(&mut self, cpu: CpuId, vector: u32) -> IrqResult {
        self.counters.irq += 1;
        let cell = self.running_cell(cpu).unwrap_or(ROOT_CELL);
        let result = if self.owned_set(cell).owns_irq(vector) {
            IrqResult::Delivered
        } else {
            IrqResult::IrqError
        };
        self.trace.push(TrialRecord::IrqCall {
            index: self.cur_index,
            cpu,
            vector,
            result,
        });
        result
    }

    /// Brings a created cell online directly: marks it running and hands
    /// off each of its CPUs with the given entry context.
    pub fn start_handoff(
        &mut self,
        cell: &str,
        entry: &RegisterContext,
    ) -> Result<(), HandoffError> {
        let id = self
            .cell_id(cell)
            .filter(|&id| id != ROOT_CELL)
            .ok_or_else(|| HandoffError::UnknownCell(cell.to_string()))?;
        let status = self.statuses[id as usize];
        if status != CellStatus::Created {
            return Err(HandoffError::BadStatus {
                name: cell.to_string(),
                found: status,
            });
        }
        self.set_status(id, CellStatus::Running);
        let cpus = self.cfg.cells[id as usize - 1].cpus.clone();
        for cpu in cpus {
            self.handoff_cpu(id, cpu, entry);
        }
        Ok(())
    }

    /// One CPU of a starting cell takes its entry trap. If the program
    /// counter points into the cell's executable memory the CPU comes
    /// online; otherwise it parks silently and the cell keeps running with
    /// nobody home.
    fn handoff_cpu(&mut self, cell: CellId, cpu: CpuId, ctx: &RegisterContext) {
        self.pending_online.remove(&cpu);
        let pc = ctx.pc();
        let online = self.cfg.cells[cell as usize - 1]
            .regions
            .iter()
            .any(|r| r.flags.contains(RegionFlags::EXECUTE) && r.contains(pc));
        self.trace.push(TrialRecord::Handoff {
            index: self.cur_index,
            cpu,
            cell: self.names[cell as usize].clone(),
            pc,
            online,
        });
        self.cpu_modes[cpu as usize] = if online {
            CpuMode::Running(cell)
        } else {
            CpuMode::Parked
        };
    }

    // -- dispatch ------------------------------------------------------------

    /// Routes one event. After a panic the machine is wedged: every later
    /// event is suppressed and the state no longer changes. Events for
    /// parked or offline CPUs are dropped the same way, except for the entry
    /// trap of a starting cell, which is the moment the cell comes online.
    pub fn dispatch(&mut self, index: u64, ev: &Event) -> DispatchResult {
        self.cur_index = index;
        let cpu = ev.cpu();
        if self.panic {
            return self.suppress(cpu, SuppressReason::PanicAbsorbed);
        }
        if cpu >= self.cfg.num_cpus {
            return self.suppress(cpu, SuppressReason::InvalidCpu);
        }
        match ev {
            Event::Trap { cpu, ctx } => {
                if let Some(&cell) = self.pending_online.get(cpu) {
                    if !matches!(
                        self.statuses[cell as usize],
                        CellStatus::Created | CellStatus::Running
                    ) {
                        // The cell failed or went away before this cpu came
                        // online; the stale kick is dropped.
                        self.pending_online.remove(cpu);
                        return self.suppress(*cpu, SuppressReason::CpuOffline);
                    }
                    self.counters.trap += 1;
                    if self.statuses[cell as usize] == CellStatus::Created {
                        self.set_status(cell, CellStatus::Running);
                    }
                    self.handoff_cpu(cell, *cpu, ctx);
                    return DispatchResult::Dispatched;
                }
                match self.cpu_modes[*cpu as usize] {
                    CpuMode::Running(_) => {
                        self.handle_trap(*cpu, ctx);
                        DispatchResult::Dispatched
                    }
                    CpuMode::Parked => self.suppress(*cpu, SuppressReason::CpuParked),
                    CpuMode::Offline => self.suppress(*cpu, SuppressReason::CpuOffline),
                }
            }
            Event::Hypercall { cpu, ctx } => match self.cpu_modes[*cpu as usize] {
                CpuMode::Running(_) => {
                    self.handle_hvc(*cpu, ctx);
                    DispatchResult::Dispatched
                }
                CpuMode::Parked => self.suppress(*cpu, SuppressReason::CpuParked),
                CpuMode::Offline => self.suppress(*cpu, SuppressReason::CpuOffline),
            },
            Event::Irq { cpu, vector } => match self.cpu_modes[*cpu as usize] {
                CpuMode::Running(_) => {
                    self.handle_irq(*cpu, *vector);
                    DispatchResult::Dispatched
                }
                CpuMode::Parked => self.suppress(*cpu, SuppressReason::CpuParked),
                CpuMode::Offline => self.suppress(*cpu, SuppressReason::CpuOffline),
            },
        }
    }

    fn suppress(&mut self, cpu: CpuId, reason: SuppressReason) -> DispatchResult {
        self.trace.push(TrialRecord::Suppressed {
            index: self.cur_index,
            cpu,
            reason,
        });
        DispatchResult::Suppressed
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

//! Trial log schema: a header describing how the trial was produced,
//! followed by one structured record per observable step. Logs serialize to
//! JSON Lines (header first, then records) and are the sole input to the
//! outcome classifier, so everything classification depends on must be
//! representable here.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::campaign::{EffectKind, EffectMode};
use crate::hvmodel::{CellStatus, Counters, CpuId, HvResult, HvcOp, IrqResult, RegisterContext, TrapAction};
use crate::injector::{FaultPlan, Flip, InjectionTarget};

/// Compact register-context fingerprint attached to handler-call records.
/// Carries the registers the model actually interprets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CtxDigest {
    pub r0: u32,
    pub r1: u32,
    pub r2: u32,
    pub pc: u32,
    pub esr: u32,
}

impl From<&RegisterContext> for CtxDigest {
    fn from(ctx: &RegisterContext) -> Self {
        CtxDigest {
            r0: ctx.r[0],
            r1: ctx.r[1],
            r2: ctx.r[2],
            pc: ctx.pc(),
            esr: ctx.esr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogSource {
    /// Produced by the simulator.
    Simulated,
    /// Reconstructed from a captured serial log.
    Serial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuppressReason {
    PanicAbsorbed,
    CpuParked,
    CpuOffline,
    InvalidCpu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TrialRecord {
    HvcCall {
        index: u64,
        cpu: CpuId,
        op: Option<HvcOp>,
        arg: u32,
        ctx: Option<CtxDigest>,
        result: HvResult,
    },
    TrapCall {
        index: u64,
        cpu: CpuId,
        class: u32,
        ctx: Option<CtxDigest>,
        action: TrapAction,
    },
    IrqCall {
        index: u64,
        cpu: CpuId,
        vector: u32,
        result: IrqResult,
    },
    /// A CPU coming online for a freshly started cell.
    Handoff {
        index: u64,
        cpu: CpuId,
        cell: String,
        pc: u32,
        online: bool,
    },
    Injection {
        index: u64,
        cpu: CpuId,
        target: InjectionTarget,
        flips: Vec<Flip>,
    },
    CalibratedEffect {
        index: u64,
        effect: EffectKind,
    },
    Lifecycle {
        index: u64,
        cell: String,
        from: CellStatus,
        to: CellStatus,
    },
    Console {
        index: u64,
        cell: String,
        line: String,
    },
    Park {
        index: u64,
        cpu: CpuId,
        code: u32,
    },
    Panic {
        index: u64,
        cpu: CpuId,
        addr: Option<u32>,
    },
    Suppressed {
        index: u64,
        cpu: CpuId,
        reason: SuppressReason,
    },
}

impl TrialRecord {
    pub fn index(&self) -> u64 {
        match self {
            TrialRecord::HvcCall { index, .. }
            | TrialRecord::TrapCall { index, .. }
            | TrialRecord::IrqCall { index, .. }
            | TrialRecord::Handoff { index, .. }
            | TrialRecord::Injection { index, .. }
            | TrialRecord::CalibratedEffect { index, .. }
            | TrialRecord::Lifecycle { index, .. }
            | TrialRecord::Console { index, .. }
            | TrialRecord::Park { index, .. }
            | TrialRecord::Panic { index, .. }
            | TrialRecord::Suppressed { index, .. } => *index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialHeader {
    pub config_digest: String,
    pub schedule_digest: String,
    pub plan: Option<FaultPlan>,
    pub seed: u64,
    pub horizon: u64,
    pub mode: EffectMode,
    pub source: LogSource,
}

#[derive(Debug, Error)]
pub enum LogReadError {
    #[error("empty log")]
    Empty,
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialLog {
    pub header: TrialHeader,
    pub records: Vec<TrialRecord>,
}

impl TrialLog {
    /// One JSON object per line: the header first, then every record in
    /// dispatch order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        out.push_str(&serde_json::to_string(&self.header).expect("header serializes"));
        out.push('\n');
        for rec in &self.records {
            out.push_str(&serde_json::to_string(rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<TrialLog, LogReadError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (n, first) = lines.next().ok_or(LogReadError::Empty)?;
        let header: TrialHeader =
            serde_json::from_str(first).map_err(|source| LogReadError::Json { line: n + 1, source })?;
        let mut records = Vec::new();
        for (n, line) in lines {
            let rec: TrialRecord = serde_json::from_str(line)
                .map_err(|source| LogReadError::Json { line: n + 1, source })?;
            records.push(rec);
        }
        Ok(TrialLog { header, records })
    }

    /// Handler-call counts recovered from the records: how often each of the
    /// three handler entry points ran. Handoffs arrive through the trap
    /// vector and count as trap-handler work.
    pub fn handler_profile(&self) -> Counters {
        let mut c = Counters::default();
        for rec in &self.records {
            match rec {
                TrialRecord::HvcCall { .. } => c.hvc += 1,
                TrialRecord::TrapCall { .. } | TrialRecord::Handoff { .. } => c.trap += 1,
                TrialRecord::IrqCall { .. } => c.irq += 1,
                _ => {}
            }
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip_jsonl() {
        let header = TrialHeader {
            config_digest: "abc".into(),
            schedule_digest: "def".into(),
            plan: None,
            seed: 9,
            horizon: 100,
            mode: EffectMode::Mechanistic,
            source: LogSource::Simulated,
        };
        let log = TrialLog {
            header,
            records: vec![
                TrialRecord::Lifecycle {
                    index: 0,
                    cell: "rtos".into(),
                    from: CellStatus::Absent,
                    to: CellStatus::Created,
                },
                TrialRecord::Panic {
                    index: 3,
                    cpu: 1,
                    addr: Some(0x1f00_0000),
                },
                TrialRecord::Suppressed {
                    index: 4,
                    cpu: 0,
                    reason: SuppressReason::PanicAbsorbed,
                },
            ],
        };
        let text = log.to_jsonl();
        let back = TrialLog::from_jsonl(&text).unwrap();
        assert_eq!(log, back);
        assert_eq!(text, back.to_jsonl());
    }

    #[test]
    fn record_tags_are_snake_case() {
        let rec = TrialRecord::Park {
            index: 1,
            cpu: 0,
            code: 0x24,
        };
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.contains("\"type\":\"park\""));
    }

    #[test]
    fn empty_log_is_an_error() {
        assert!(matches!(TrialLog::from_jsonl("\n\n"), Err(LogReadError::Empty)));
    }
}

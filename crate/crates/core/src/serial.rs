//! Serial-console bridge: renders a trial log in the line format the real
//! hypervisor prints on its debug UART, and reconstructs a classifiable log
//! from such a capture.
//!
//! The line grammar:
//!
//! ```text
//! [rtos] int 33                                  guest console output
//! HV: cell rtos created -> running               lifecycle transition
//! HV: hvc cpu=0 op=start arg=0x00000001 -> ok    management hypercall
//! HV: cpu 1 online cell=rtos                     cpu handoff
//! PANIC: cpu=1 addr=0x1f000000                   stopped access (addr=? if unknown)
//! PARK: cpu=1 code=0x24                          parked cpu
//! RESULT: shutdown=ok destroy=ok                 teardown summary trailer
//! ```
//!
//! Parsing is total: a line that matches nothing becomes `Unknown` and is
//! ignored on ingest. Only lines that classification depends on are emitted,
//! so a serialize/ingest round trip preserves the trial outcome even though
//! it forgets register-level detail.

use thiserror::Error;

use crate::hvmodel::{CellStatus, CpuId, HvResult, HvcOp};
use crate::record::{LogSource, TrialHeader, TrialLog, TrialRecord};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SerialLineKind {
    Console {
        cell: String,
        text: String,
    },
    Lifecycle {
        cell: String,
        from: CellStatus,
        to: CellStatus,
    },
    Hvc {
        cpu: CpuId,
        op: Option<HvcOp>,
        arg: u32,
        result: HvResult,
    },
    CpuOnline {
        cpu: CpuId,
        cell: String,
    },
    Panic {
        cpu: CpuId,
        addr: Option<u32>,
    },
    Park {
        cpu: CpuId,
        code: u32,
    },
    Summary {
        shutdown: Option<HvResult>,
        destroy: Option<HvResult>,
    },
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerialLine {
    pub raw: String,
    pub kind: SerialLineKind,
}

#[derive(Debug, Error)]
pub enum IngestError {
    /// The capture contains no line the classifier could use.
    #[error("log contains no classifiable lines")]
    UnclassifiableLog,
}

fn op_name(op: Option<HvcOp>) -> &'static str {
    match op {
        Some(HvcOp::CellCreate) => "create",
        Some(HvcOp::CellStart) => "start",
        Some(HvcOp::CellShutdown) => "shutdown",
        Some(HvcOp::CellDestroy) => "destroy",
        None => "unknown",
    }
}

fn op_from_name(name: &str) -> Option<Option<HvcOp>> {
    match name {
        "create" => Some(Some(HvcOp::CellCreate)),
        "start" => Some(Some(HvcOp::CellStart)),
        "shutdown" => Some(Some(HvcOp::CellShutdown)),
        "destroy" => Some(Some(HvcOp::CellDestroy)),
        "unknown" => Some(None),
        _ => None,
    }
}

fn result_name(r: HvResult) -> &'static str {
    match r {
        HvResult::Ok => "ok",
        HvResult::Einval => "einval",
    }
}

fn result_from_name(s: &str) -> Option<HvResult> {
    match s {
        "ok" => Some(HvResult::Ok),
        "einval" => Some(HvResult::Einval),
        _ => None,
    }
}

fn opt_result_name(r: Option<HvResult>) -> &'static str {
    match r {
        Some(r) => result_name(r),
        None => "none",
    }
}

/// Value of a `key=value` token, if the key matches.
fn kv<'a>(token: &'a str, key: &str) -> Option<&'a str> {
    token
        .strip_prefix(key)
        .and_then(|rest| rest.strip_prefix('='))
}

fn parse_u32(s: &str) -> Option<u32> {
    if let Some(hex) = s.strip_prefix("0x") {
        u32::from_str_radix(hex, 16).ok()
    } else {
        s.parse().ok()
    }
}

/// Classifies one captured line. Never fails; unrecognized input comes back
/// as `SerialLineKind::Unknown`.
pub fn parse_serial_line(raw: &str) -> SerialLine {
    SerialLine {
        raw: raw.to_string(),
        kind: parse_kind(raw),
    }
}

fn parse_kind(raw: &str) -> SerialLineKind {
    let line = raw.trim_end_matches(['\r', '\n']).trim_start();
    if line.is_empty() {
        return SerialLineKind::Unknown;
    }
    if let Some(rest) = line.strip_prefix('[') {
        if let Some(end) = rest.find(']') {
            let cell = &rest[..end];
            if !cell.is_empty() && !cell.contains(' ') {
                let text = rest[end + 1..].strip_prefix(' ').unwrap_or(&rest[end + 1..]);
                return SerialLineKind::Console {
                    cell: cell.to_string(),
                    text: text.to_string(),
                };
            }
        }
        return SerialLineKind::Unknown;
    }
    if let Some(rest) = line.strip_prefix("HV: ") {
        return parse_hv(rest);
    }
    if let Some(rest) = line.strip_prefix("PANIC: ") {
        return parse_panic(rest).unwrap_or(SerialLineKind::Unknown);
    }
    if let Some(rest) = line.strip_prefix("PARK: ") {
        return parse_park(rest).unwrap_or(SerialLineKind::Unknown);
    }
    if let Some(rest) = line.strip_prefix("RESULT: ") {
        return parse_summary(rest).unwrap_or(SerialLineKind::Unknown);
    }
    SerialLineKind::Unknown
}

fn parse_hv(rest: &str) -> SerialLineKind {
    let tokens: Vec<&str> = rest.split_whitespace().collect();
    match tokens.as_slice() {
        ["cell", cell, from, "->", to] => {
            match (CellStatus::from_str_name(from), CellStatus::from_str_name(to)) {
                (Some(from), Some(to)) => SerialLineKind::Lifecycle {
                    cell: cell.to_string(),
                    from,
                    to,
                },
                _ => SerialLineKind::Unknown,
            }
        }
        ["hvc", cpu, op, arg, "->", result] => {
            let parsed = (|| {
                Some(SerialLineKind::Hvc {
                    cpu: parse_u32(kv(cpu, "cpu")?)?,
                    op: op_from_name(kv(op, "op")?)?,
                    arg: parse_u32(kv(arg, "arg")?)?,
                    result: result_from_name(result)?,
                })
            })();
            parsed.unwrap_or(SerialLineKind::Unknown)
        }
        ["cpu", cpu, "online", cell] => {
            let parsed = (|| {
                Some(SerialLineKind::CpuOnline {
                    cpu: parse_u32(cpu)?,
                    cell: kv(cell, "cell")?.to_string(),
                })
            })();
            parsed.unwrap_or(SerialLineKind::Unknown)
        }
        _ => SerialLineKind::Unknown,
    }
}

fn parse_panic(rest: &str) -> Option<SerialLineKind> {
    let tokens: Vec<&str> = rest.split_whitespace().collect();
    match tokens.as_slice() {
        [cpu, addr] => {
            let cpu = parse_u32(kv(cpu, "cpu")?)?;
            let addr = match kv(addr, "addr")? {
                "?" => None,
                s => Some(parse_u32(s)?),
            };
            Some(SerialLineKind::Panic { cpu, addr })
        }
        _ => None,
    }
}

fn parse_park(rest: &str) -> Option<SerialLineKind> {
    let tokens: Vec<&str> = rest.split_whitespace().collect();
    match tokens.as_slice() {
        [cpu, code] => Some(SerialLineKind::Park {
            cpu: parse_u32(kv(cpu, "cpu")?)?,
            code: parse_u32(kv(code, "code")?)?,
        }),
        _ => None,
    }
}

fn parse_summary(rest: &str) -> Option<SerialLineKind> {
    let tokens: Vec<&str> = rest.split_whitespace().collect();
    match tokens.as_slice() {
        [shutdown, destroy] => {
            let parse_opt = |s: &str| match s {
                "none" => Some(None),
                s => result_from_name(s).map(Some),
            };
            Some(SerialLineKind::Summary {
                shutdown: parse_opt(kv(shutdown, "shutdown")?)?,
                destroy: parse_opt(kv(destroy, "destroy")?)?,
            })
        }
        _ => None,
    }
}

/// Renders a trial as serial-console text. Register-level records
/// (injections, traps, suppressed events) have no console presence and are
/// dropped; the trailer summarizes teardown so a health check can grep one
/// line.
pub fn serialize_trial(log: &TrialLog) -> String {
    let mut out = String::new();
    let mut shutdown: Option<HvResult> = None;
    let mut destroy: Option<HvResult> = None;
    for rec in &log.records {
        match rec {
            TrialRecord::Console { cell, line, .. } => {
                out.push_str(&format!("[{cell}] {line}\n"));
            }
            TrialRecord::Lifecycle { cell, from, to, .. } => {
                out.push_str(&format!("HV: cell {cell} {from} -> {to}\n"));
            }
            TrialRecord::HvcCall {
                cpu, op, arg, result, ..
            } => {
                out.push_str(&format!(
                    "HV: hvc cpu={cpu} op={} arg=0x{arg:08x} -> {}\n",
                    op_name(*op),
                    result_name(*result)
                ));
                match op {
                    Some(HvcOp::CellShutdown) => shutdown = Some(*result),
                    Some(HvcOp::CellDestroy) => destroy = Some(*result),
                    _ => {}
                }
            }
            TrialRecord::Handoff { cpu, cell, online, .. } => {
                if *online {
                    out.push_str(&format!("HV: cpu {cpu} online cell={cell}\n"));
                }
            }
            TrialRecord::Panic { cpu, addr, .. } => match addr {
                Some(addr) => out.push_str(&format!("PANIC: cpu={cpu} addr=0x{addr:08x}\n")),
                None => out.push_str(&format!("PANIC: cpu={cpu} addr=?\n")),
            },
            TrialRecord::Park { cpu, code, .. } => {
                out.push_str(&format!("PARK: cpu={cpu} code=0x{code:x}\n"));
            }
            TrialRecord::TrapCall { .. }
            | TrialRecord::IrqCall { .. }
            | TrialRecord::Injection { .. }
            | TrialRecord::CalibratedEffect { .. }
            | TrialRecord::Suppressed { .. } => {}
        }
    }
    out.push_str(&format!(
        "RESULT: shutdown={} destroy={}\n",
        opt_result_name(shutdown),
        opt_result_name(destroy)
    ));
    out
}

/// Rebuilds a trial log from captured serial text. The result carries only
/// what the console shows: hypercall records have no register digests,
/// handoffs report pc 0, and the header digests read `ingested`. That is
/// enough for the classifier, which was designed against exactly this
/// surface.
pub fn ingest(text: &str) -> Result<TrialLog, IngestError> {
    let mut records = Vec::new();
    let mut lines = 0u64;
    for (n, raw) in text.lines().enumerate() {
        lines = n as u64 + 1;
        let index = n as u64;
        match parse_serial_line(raw).kind {
            SerialLineKind::Console { cell, text } => records.push(TrialRecord::Console {
                index,
                cell,
                line: text,
            }),
            SerialLineKind::Lifecycle { cell, from, to } => {
                records.push(TrialRecord::Lifecycle {
                    index,
                    cell,
                    from,
                    to,
                })
            }
            SerialLineKind::Hvc {
                cpu,
                op,
                arg,
                result,
            } => records.push(TrialRecord::HvcCall {
                index,
                cpu,
                op,
                arg,
                ctx: None,
                result,
            }),
            SerialLineKind::CpuOnline { cpu, cell } => records.push(TrialRecord::Handoff {
                index,
                cpu,
                cell,
                pc: 0,
                online: true,
            }),
            SerialLineKind::Panic { cpu, addr } => {
                records.push(TrialRecord::Panic { index, cpu, addr })
            }
            SerialLineKind::Park { cpu, code } => {
                records.push(TrialRecord::Park { index, cpu, code })
            }
            SerialLineKind::Summary { .. } | SerialLineKind::Unknown => {}
        }
    }
    if records.is_empty() {
        return Err(IngestError::UnclassifiableLog);
    }
    Ok(TrialLog {
        header: TrialHeader {
            config_digest: "ingested".into(),
            schedule_digest: "ingested".into(),
            plan: None,
            seed: 0,
            horizon: lines,
            mode: crate::campaign::EffectMode::Mechanistic,
            source: LogSource::Serial,
        },
        records,
    })
}

//! Shared fixtures for the criterion benches.

use cellsim_core::sysconfig::{parse_system_config, SystemConfig};
use cellsim_core::workload::{default_workload, WorkloadSchedule};

/// Dual-core board with one guest cell, the same shape the tests use.
pub const BOARD: &str = r#"
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

pub fn board() -> (SystemConfig, WorkloadSchedule) {
    let cfg = parse_system_config(BOARD).expect("benchmark board parses");
    let schedule = default_workload(&cfg).expect("benchmark workload builds");
    (cfg, schedule)
}

//! Cross-cutting properties of the simulator: resource conservation,
//! validation soundness, config round-tripping, lifecycle legality, panic
//! absorption, counter accounting, injector exactness, determinism and
//! aggregation laws.

use std::collections::BTreeSet;

use proptest::prelude::*;

use cellsim_core::campaign::{
    aggregate, classify, run_trial, run_trial_with_state, EffectMode, Outcome, OutcomeCounts,
};
use cellsim_core::hvmodel::{
    CellStatus, CpuMode, DispatchResult, Event, HvState, RegisterContext,
};
use cellsim_core::injector::{
    FaultPlan, Injector, InjectionTarget, Intensity, RegisterCount, Slot, SlotFilter,
};
use cellsim_core::record::TrialRecord;
use cellsim_core::serial::{ingest, parse_serial_line, serialize_trial};
use cellsim_core::sysconfig::{
    parse_system_config, print_system_config, resource_view, validate, CellConfig, MemoryRegion,
    RegionFlags, SystemConfig,
};
use cellsim_core::workload::{default_workload, replay_trial, WorkloadSchedule};

const BOARD: &str = r#"
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

fn board() -> (SystemConfig, WorkloadSchedule) {
    let cfg = parse_system_config(BOARD).unwrap();
    let schedule = default_workload(&cfg).unwrap();
    (cfg, schedule)
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

fn flags_from_bits(bits: u8) -> RegionFlags {
    let mut flags = RegionFlags::empty();
    for (bit, f) in [
        RegionFlags::READ,
        RegionFlags::WRITE,
        RegionFlags::EXECUTE,
        RegionFlags::SHARED,
    ]
    .into_iter()
    .enumerate()
    {
        if bits & (1 << bit) != 0 {
            flags = flags.with(f);
        }
    }
    flags
}

/// Messy regions: bases on a coarse grid with sizes that may spill into the
/// next slot, any flag combination (including none and SHARED-only).
fn arb_messy_region() -> impl Strategy<Value = MemoryRegion> {
    (
        0u32..12,
        0u64..=3,
        0u8..=15,
        proptest::option::of("[a-z]{1,4}"),
    )
        .prop_map(|(slot, pages, bits, name)| MemoryRegion {
            name,
            base: slot * 0x0100_0000,
            size: pages * 0x0090_0000,
            flags: flags_from_bits(bits),
        })
}

fn arb_messy_cell(names: &'static [&'static str]) -> impl Strategy<Value = CellConfig> {
    (
        proptest::sample::select(names),
        proptest::collection::btree_set(0u32..5, 0..3),
        proptest::collection::vec(arb_messy_region(), 0..3),
        proptest::collection::btree_set(30u32..40, 0..3),
    )
        .prop_map(|(name, cpus, regions, irqs)| CellConfig {
            name: name.to_string(),
            cpus,
            regions,
            irqs,
            comm: None,
        })
}

/// Configurations that may or may not be valid: overlapping CPU sets and
/// regions, duplicate names, out-of-range CPUs and empty cpusets all occur.
fn arb_messy_cfg() -> impl Strategy<Value = SystemConfig> {
    (
        1u32..=4,
        arb_messy_cell(&["root"]),
        proptest::collection::vec(arb_messy_cell(&["a", "b", "root"]), 0..3),
    )
        .prop_map(|(num_cpus, mut root, cells)| {
            root.name = "root".to_string();
            SystemConfig {
                num_cpus,
                ram_size: 0x4000_0000,
                root,
                cells,
            }
        })
}

/// Valid-by-construction configurations plus an arbitrary active set:
/// disjoint cpu partitions, per-cell regions in private slots, no SHARED
/// windows. Returns (config, active guest names).
fn arb_valid_cfg() -> impl Strategy<Value = (SystemConfig, BTreeSet<String>)> {
    let guest_count = 0usize..=2;
    guest_count
        .prop_flat_map(|guests| {
            let cells = guests + 1;
            (
                // CPUs per cell, root first.
                proptest::collection::vec(1u32..=2, cells..=cells),
                // Regions per cell: (slots used, flag bits without SHARED, named?).
                proptest::collection::vec(
                    proptest::collection::vec((1u64..=15, 1u8..=7, any::<bool>()), 1..=2),
                    cells..=cells,
                ),
                // IRQ vectors, possibly shared between cells.
                proptest::collection::vec(
                    proptest::collection::btree_set(32u32..44, 0..3),
                    cells..=cells,
                ),
                // Which guests are active.
                proptest::collection::vec(any::<bool>(), guests..=guests),
            )
        })
        .prop_map(|(cpu_counts, region_specs, irq_sets, active_flags)| {
            let mut next_cpu = 0u32;
            let mut next_slot = 0u32;
            let mut build = |idx: usize, name: &str| {
                let cpus: BTreeSet<u32> = (0..cpu_counts[idx]).map(|_| {
                    let c = next_cpu;
                    next_cpu += 1;
                    c
                }).collect();
                let regions = region_specs[idx]
                    .iter()
                    .enumerate()
                    .map(|(j, &(sixteenths, bits, named))| {
                        let slot = next_slot;
                        next_slot += 1;
                        MemoryRegion {
                            name: named.then(|| format!("m{j}")),
                            base: slot * 0x0100_0000,
                            size: sixteenths * 0x0010_0000,
                            flags: flags_from_bits(bits | 1),
                        }
                    })
                    .collect();
                CellConfig {
                    name: name.to_string(),
                    cpus,
                    regions,
                    irqs: irq_sets[idx].clone(),
                    comm: None,
                }
            };
            let root = build(0, "root");
            let cells: Vec<CellConfig> = (0..active_flags.len())
                .map(|g| build(g + 1, &format!("g{g}")))
                .collect();
            let active: BTreeSet<String> = active_flags
                .iter()
                .enumerate()
                .filter(|(_, &on)| on)
                .map(|(g, _)| format!("g{g}"))
                .collect();
            (
                SystemConfig {
                    num_cpus: next_cpu.max(1),
                    ram_size: 0x4000_0000,
                    root,
                    cells,
                },
                active,
            )
        })
}

/// Events over the two-cpu board, including malformed ops, bad cpus, foreign
/// addresses and unowned vectors.
fn arb_event() -> impl Strategy<Value = Event> {
    let addr = prop_oneof![
        Just(0x3f00_0000u32),
        Just(0x2000_0010u32),
        Just(0x1f00_0000u32),
        Just(0xf000_0000u32),
        any::<u32>(),
    ];
    prop_oneof![
        (0u32..=5, 0u32..=3, 0u32..=2).prop_map(|(op, arg, cpu)| Event::Hypercall {
            cpu,
            ctx: RegisterContext::hypercall(op, arg),
        }),
        (0u32..=4, addr, 0u32..=2).prop_map(|(class, addr, cpu)| Event::Trap {
            cpu,
            ctx: RegisterContext::trap(class, 9, addr, addr),
        }),
        (
            0u32..=2,
            prop_oneof![Just(33u32), Just(64u32), Just(999u32), 0u32..1024]
        )
            .prop_map(|(cpu, vector)| Event::Irq { cpu, vector }),
    ]
}

fn arb_intensity() -> impl Strategy<Value = Intensity> {
    prop_oneof![
        (1u64..=50).prop_map(|period| Intensity::Medium { period }),
        (1u64..=50).prop_map(|period| Intensity::High {
            period,
            registers: RegisterCount::Drawn,
        }),
        (1u64..=50, 2u32..=6).prop_map(|(period, k)| Intensity::High {
            period,
            registers: RegisterCount::Fixed(k),
        }),
    ]
}

fn arb_slot_filter() -> impl Strategy<Value = SlotFilter> {
    prop_oneof![
        Just(SlotFilter::All),
        proptest::collection::btree_set(0usize..17, 1..17)
            .prop_map(|idxs| SlotFilter::Only(idxs.into_iter().map(|i| Slot::all()[i]).collect())),
    ]
}

fn arb_plan() -> impl Strategy<Value = FaultPlan> {
    (
        prop_oneof![Just(InjectionTarget::Hvc), Just(InjectionTarget::Trap)],
        proptest::option::of(0u32..2),
        arb_intensity(),
        any::<u64>(),
        arb_slot_filter(),
    )
        .prop_map(|(target, cpu_filter, intensity, seed, slots)| FaultPlan {
            target,
            cpu_filter,
            intensity,
            seed,
            slots,
        })
}

// ---------------------------------------------------------------------------
// Configuration properties
// ---------------------------------------------------------------------------

proptest! {
    /// A config that validates cleanly can always be enabled, and one that
    /// does not is always rejected.
    #[test]
    fn validation_gates_enable(cfg in arb_messy_cfg()) {
        let violations = validate(&cfg);
        let enabled = HvState::enable(cfg.clone());
        prop_assert_eq!(violations.is_empty(), enabled.is_ok());
    }

    /// Ownership is conserved under any active set: every declared CPU,
    /// region and vector belongs to exactly one cell, and active guests hold
    /// exactly their declarations.
    #[test]
    fn resources_are_conserved((cfg, active) in arb_valid_cfg()) {
        prop_assert!(validate(&cfg).is_empty(), "generator must build valid configs");
        let view = resource_view(&cfg, &active).unwrap();

        let mut seen_cpus: BTreeSet<u32> = BTreeSet::new();
        for set in view.values() {
            for &cpu in &set.cpus {
                prop_assert!(seen_cpus.insert(cpu), "cpu {} owned twice", cpu);
            }
        }
        prop_assert_eq!(seen_cpus, (0..cfg.num_cpus).collect::<BTreeSet<u32>>());

        let declared_regions: BTreeSet<(String, MemoryRegion)> = cfg
            .all_cells()
            .flat_map(|c| c.regions.iter().map(|r| (c.name.clone(), r.clone())))
            .collect();
        let owned_regions: BTreeSet<(String, MemoryRegion)> = view
            .values()
            .flat_map(|s| s.regions.iter().cloned())
            .collect();
        prop_assert_eq!(&declared_regions, &owned_regions);
        let total_owned: usize = view.values().map(|s| s.regions.len()).sum();
        prop_assert_eq!(declared_regions.len(), total_owned, "a region is owned twice");

        let declared_irqs: BTreeSet<(String, u32)> = cfg
            .all_cells()
            .flat_map(|c| c.irqs.iter().map(|&v| (c.name.clone(), v)))
            .collect();
        let owned_irqs: BTreeSet<(String, u32)> = view
            .values()
            .flat_map(|s| s.irqs.iter().cloned())
            .collect();
        prop_assert_eq!(declared_irqs, owned_irqs);

        for guest in &cfg.cells {
            let set = &view[&guest.name];
            if active.contains(&guest.name) {
                prop_assert_eq!(&set.cpus, &guest.cpus);
                prop_assert_eq!(set.regions.len(), guest.regions.len());
            } else {
                prop_assert!(set.is_empty(), "inactive {} owns resources", guest.name);
            }
        }
    }

    /// Printing and reparsing a valid config is the identity.
    #[test]
    fn print_parse_round_trip((cfg, _) in arb_valid_cfg()) {
        let text = print_system_config(&cfg);
        let back = parse_system_config(&text);
        prop_assert_eq!(Ok(cfg), back);
    }

    /// The config parser never panics, whatever the input.
    #[test]
    fn config_parser_is_total(text in "\\PC*") {
        let _ = parse_system_config(&text);
    }

    /// The plan parser never panics either.
    #[test]
    fn plan_parser_is_total(text in "\\PC*") {
        let _ = cellsim_core::plan::parse_plan(&text);
    }
}

// ---------------------------------------------------------------------------
// Dispatch properties
// ---------------------------------------------------------------------------

proptest! {
    /// Whatever the event stream does: every recorded lifecycle transition
    /// follows a legal edge from the cell's actual previous status, and the
    /// final statuses match the folded records.
    #[test]
    fn lifecycle_edges_are_legal(events in proptest::collection::vec(arb_event(), 0..120)) {
        let (cfg, _) = board();
        let mut state = HvState::enable(cfg).unwrap();
        for (i, ev) in events.iter().enumerate() {
            state.dispatch(i as u64, ev);
            // CPUs never run on behalf of a cell that is not running.
            for cpu in 0..2 {
                if let Some(CpuMode::Running(cell)) = state.cpu_mode(cpu) {
                    prop_assert_eq!(state.status(cell), Some(CellStatus::Running));
                }
            }
        }
        let records = state.take_records();

        let mut folded = std::collections::BTreeMap::new();
        folded.insert("root".to_string(), CellStatus::Running);
        folded.insert("rtos".to_string(), CellStatus::Absent);
        for rec in &records {
            if let TrialRecord::Lifecycle { cell, from, to, .. } = rec {
                prop_assert_eq!(folded[cell], *from, "chain break for {}", cell);
                prop_assert!(from.can_transition(*to), "illegal {} -> {}", from, to);
                folded.insert(cell.clone(), *to);
            }
        }
        prop_assert_eq!(state.cell_status("root"), Some(folded["root"]));
        prop_assert_eq!(state.cell_status("rtos"), Some(folded["rtos"]));
    }

    /// After a panic nothing changes any more: every later event is
    /// suppressed and the observable state is frozen.
    #[test]
    fn panic_is_absorbing(events in proptest::collection::vec(arb_event(), 0..120)) {
        let (cfg, _) = board();
        let mut state = HvState::enable(cfg).unwrap();
        let mut frozen: Option<HvState> = None;
        for (i, ev) in events.iter().enumerate() {
            let disp = state.dispatch(i as u64, ev);
            let records = state.take_records();
            if let Some(before) = &frozen {
                prop_assert_eq!(disp, DispatchResult::Suppressed);
                prop_assert_eq!(records.len(), 1);
                let absorbed = matches!(
                    records[0],
                    TrialRecord::Suppressed {
                        reason: cellsim_core::record::SuppressReason::PanicAbsorbed,
                        ..
                    }
                );
                prop_assert!(absorbed);
                prop_assert_eq!(before.counters(), state.counters());
                for cpu in 0..2 {
                    prop_assert_eq!(before.cpu_mode(cpu), state.cpu_mode(cpu));
                }
                for cell in ["root", "rtos"] {
                    prop_assert_eq!(before.cell_status(cell), state.cell_status(cell));
                }
            } else if state.panicked() {
                frozen = Some(state.clone());
            }
        }
    }

    /// The handler counters agree exactly with the records: one handler call
    /// per dispatched event, none for suppressed ones.
    #[test]
    fn counters_match_records(events in proptest::collection::vec(arb_event(), 0..120)) {
        let (cfg, _) = board();
        let mut state = HvState::enable(cfg).unwrap();
        let mut dispatched = 0u64;
        for (i, ev) in events.iter().enumerate() {
            if state.dispatch(i as u64, ev) == DispatchResult::Dispatched {
                dispatched += 1;
            }
        }
        let records = state.take_records();
        let count = |f: fn(&TrialRecord) -> bool| records.iter().filter(|r| f(r)).count() as u64;
        let c = state.counters();
        prop_assert_eq!(c.hvc, count(|r| matches!(r, TrialRecord::HvcCall { .. })));
        prop_assert_eq!(
            c.trap,
            count(|r| matches!(r, TrialRecord::TrapCall { .. } | TrialRecord::Handoff { .. }))
        );
        prop_assert_eq!(c.irq, count(|r| matches!(r, TrialRecord::IrqCall { .. })));
        prop_assert_eq!(c.hvc + c.trap + c.irq, dispatched);
    }
}

// ---------------------------------------------------------------------------
// Injector properties
// ---------------------------------------------------------------------------

proptest! {
    /// A firing flips exactly the chosen bits: distinct slots, Hamming
    /// distance one per flip, untouched slots unchanged, and the flip count
    /// obeys the intensity.
    #[test]
    fn corruption_flips_exactly_chosen_bits(
        seed in any::<u64>(),
        regs in proptest::array::uniform16(any::<u32>()),
        esr in any::<u32>(),
        intensity in arb_intensity(),
        slots in arb_slot_filter(),
    ) {
        let plan = FaultPlan {
            target: InjectionTarget::Trap,
            cpu_filter: None,
            intensity: intensity.with_period(1),
            seed,
            slots,
        };
        let mut inj = Injector::new(plan.clone());
        let before = RegisterContext { r: regs, esr };
        let mut ev = Event::Trap { cpu: 0, ctx: before };
        prop_assert!(inj.observe(&ev));
        let rec = inj.corrupt(0, &mut ev);
        let after = *ev.ctx().unwrap();

        let allowed = plan.slots.resolve();
        let expected = match plan.intensity {
            Intensity::Medium { .. } => 1,
            Intensity::High { registers: RegisterCount::Fixed(k), .. } => {
                (k as usize).min(allowed.len())
            }
            Intensity::High { registers: RegisterCount::Drawn, .. } => {
                let k = rec.flips.len();
                prop_assert!((2..=4).contains(&k) || k == allowed.len().min(4));
                k
            }
        };
        prop_assert_eq!(rec.flips.len(), expected.min(allowed.len()));

        let mut touched = BTreeSet::new();
        for flip in &rec.flips {
            prop_assert!(touched.insert(flip.slot), "slot {:?} flipped twice", flip.slot);
            prop_assert!(allowed.contains(&flip.slot));
            prop_assert_eq!(flip.pre, flip.slot.read(&before));
            prop_assert_eq!(flip.post, flip.slot.read(&after));
            prop_assert_eq!((flip.pre ^ flip.post).count_ones(), 1);
            prop_assert_eq!(flip.pre ^ flip.post, 1u32 << flip.bit);
        }
        for slot in Slot::all() {
            if !touched.contains(&slot) {
                prop_assert_eq!(slot.read(&before), slot.read(&after));
            }
        }
    }

    /// Firing cadence is exact: over any interleaving of matching and
    /// non-matching events, the injector fires on exactly every period-th
    /// matching event.
    #[test]
    fn firing_cadence_is_exact(
        period in 1u64..=37,
        pattern in proptest::collection::vec(any::<bool>(), 0..400),
    ) {
        let plan = FaultPlan::new(
            InjectionTarget::Trap,
            Intensity::Medium { period },
            0,
        )
        .on_cpu(1);
        let mut inj = Injector::new(plan);
        let mut matching = 0u64;
        for &on_target in &pattern {
            let ev = if on_target {
                Event::Trap { cpu: 1, ctx: RegisterContext::zeroed() }
            } else {
                // Wrong kind or wrong cpu, alternating.
                if matching.is_multiple_of(2) {
                    Event::Irq { cpu: 1, vector: 7 }
                } else {
                    Event::Trap { cpu: 0, ctx: RegisterContext::zeroed() }
                }
            };
            let fired = inj.observe(&ev);
            if on_target {
                matching += 1;
                prop_assert_eq!(fired, matching.is_multiple_of(period));
            } else {
                prop_assert!(!fired);
            }
        }
        prop_assert_eq!(inj.calls(), matching);
    }
}

// ---------------------------------------------------------------------------
// Trial properties
// ---------------------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// A trial is a pure function of (config, schedule, plan, horizon, mode):
    /// rerunning and header-driven replay are byte identical.
    #[test]
    fn trials_replay_byte_identically(
        plan in proptest::option::of(arb_plan()),
        horizon in 20u64..150,
    ) {
        let (cfg, schedule) = board();
        let a = run_trial(&cfg, &schedule, plan.as_ref(), horizon, EffectMode::Mechanistic).unwrap();
        let b = run_trial(&cfg, &schedule, plan.as_ref(), horizon, EffectMode::Mechanistic).unwrap();
        prop_assert_eq!(a.to_jsonl(), b.to_jsonl());
        let replayed = replay_trial(&cfg, &schedule, &a.header).unwrap();
        prop_assert_eq!(a.to_jsonl(), replayed.to_jsonl());
    }

    /// Serial round trip: rendering a trial to console text and ingesting it
    /// back preserves the classified outcome.
    #[test]
    fn serial_round_trip_preserves_outcome(
        plan in arb_plan(),
        horizon in 20u64..150,
    ) {
        let (cfg, schedule) = board();
        let log = run_trial(&cfg, &schedule, Some(&plan), horizon, EffectMode::Mechanistic).unwrap();
        let text = serialize_trial(&log);
        let back = ingest(&text).unwrap();
        prop_assert_eq!(classify(&back), classify(&log));
    }

    /// The classifier agrees with the final machine state on the severe
    /// outcomes.
    #[test]
    fn classification_matches_state(
        plan in arb_plan(),
        horizon in 20u64..150,
    ) {
        let (cfg, schedule) = board();
        let (log, state) =
            run_trial_with_state(&cfg, &schedule, Some(&plan), horizon, EffectMode::Mechanistic)
                .unwrap();
        let outcome = classify(&log);
        prop_assert_eq!(outcome == Outcome::PanicPark, state.panicked());
        if outcome == Outcome::RejectedEinval {
            // The guest never came up, so it never printed.
            let guest_printed = log
                .records
                .iter()
                .any(|r| matches!(r, TrialRecord::Console { cell, .. } if cell != "root"));
            prop_assert!(!guest_printed);
        }
    }
}

proptest! {
    /// The serial-line parser never panics on arbitrary input.
    #[test]
    fn serial_parser_is_total(line in "\\PC*") {
        let _ = parse_serial_line(&line);
        let _ = ingest(&line);
    }

    /// Aggregation is order-insensitive and total counts are conserved.
    #[test]
    fn aggregation_is_order_insensitive(
        outcomes in proptest::collection::vec(
            proptest::sample::select(Outcome::all().to_vec()),
            0..200,
        ),
    ) {
        let forward = aggregate(outcomes.iter().copied());
        let mut reversed_input = outcomes.clone();
        reversed_input.reverse();
        let reversed = aggregate(reversed_input);
        prop_assert_eq!(forward, reversed);
        prop_assert_eq!(forward.total(), outcomes.len() as u64);

        let mut incremental = OutcomeCounts::default();
        for &o in &outcomes {
            incremental.add(o);
        }
        prop_assert_eq!(incremental, forward);
    }
}

//! Bit-flip fault injection into trapped register contexts.
//!
//! A plan picks a handler class to attack (hypercalls or synchronous traps),
//! optionally narrows to one CPU, and fires once every `period` matching
//! calls: the medium intensity flips a single bit in one register, the high
//! intensity flips one bit in each of several distinct registers. The
//! corruptable state is the sixteen general-purpose registers plus the
//! syndrome register, seventeen 32-bit slots in all.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hvmodel::{CpuId, Event, RegisterContext};

/// Number of injectable slots in a register context.
pub const NUM_SLOTS: usize = 17;
pub const BITS_PER_SLOT: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Reg(u8),
    Esr,
}

impl Slot {
    pub fn all() -> Vec<Slot> {
        let mut v: Vec<Slot> = (0..16).map(Slot::Reg).collect();
        v.push(Slot::Esr);
        v
    }

    pub fn read(self, ctx: &RegisterContext) -> u32 {
        match self {
            Slot::Reg(i) => ctx.r[i as usize],
            Slot::Esr => ctx.esr,
        }
    }

    pub fn write(self, ctx: &mut RegisterContext, value: u32) {
        match self {
            Slot::Reg(i) => ctx.r[i as usize] = value,
            Slot::Esr => ctx.esr = value,
        }
    }

    pub fn name(self) -> String {
        match self {
            Slot::Reg(i) => format!("r{i}"),
            Slot::Esr => "esr".to_string(),
        }
    }

    pub fn from_name(s: &str) -> Option<Slot> {
        if s == "esr" {
            return Some(Slot::Esr);
        }
        let idx: u8 = s.strip_prefix('r')?.parse().ok()?;
        if idx < 16 {
            Some(Slot::Reg(idx))
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionTarget {
    Hvc,
    Trap,
}

/// How many registers a high-intensity firing corrupts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegisterCount {
    /// Drawn fresh per firing from 2..=4.
    Drawn,
    Fixed(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "level")]
pub enum Intensity {
    Medium { period: u64 },
    High { period: u64, registers: RegisterCount },
}

impl Intensity {
    /// One register flipped once every 100 matching calls.
    pub fn medium() -> Intensity {
        Intensity::Medium { period: 100 }
    }

    /// Several registers flipped once every 50 matching calls.
    pub fn high() -> Intensity {
        Intensity::High {
            period: 50,
            registers: RegisterCount::Drawn,
        }
    }

    pub fn period(&self) -> u64 {
        match self {
            Intensity::Medium { period } | Intensity::High { period, .. } => *period,
        }
    }

    pub fn with_period(self, period: u64) -> Intensity {
        match self {
            Intensity::Medium { .. } => Intensity::Medium { period },
            Intensity::High { registers, .. } => Intensity::High { period, registers },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotFilter {
    /// All seventeen slots are fair game.
    All,
    /// Restrict flips to the listed slots.
    Only(BTreeSet<Slot>),
}

impl SlotFilter {
    pub fn resolve(&self) -> Vec<Slot> {
        match self {
            SlotFilter::All => Slot::all(),
            SlotFilter::Only(set) => set.iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub target: InjectionTarget,
    /// When set, only events on this CPU are counted and corrupted.
    pub cpu_filter: Option<CpuId>,
    pub intensity: Intensity,
    pub seed: u64,
    pub slots: SlotFilter,
}

impl FaultPlan {
    pub fn new(target: InjectionTarget, intensity: Intensity, seed: u64) -> FaultPlan {
        FaultPlan {
            target,
            cpu_filter: None,
            intensity,
            seed,
            slots: SlotFilter::All,
        }
    }

    pub fn on_cpu(mut self, cpu: CpuId) -> FaultPlan {
        self.cpu_filter = Some(cpu);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> FaultPlan {
        self.seed = seed;
        self
    }
}

/// One single-bit corruption: `post = pre ^ (1 << bit)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flip {
    pub slot: Slot,
    pub bit: u8,
    pub pre: u32,
    pub post: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionRecord {
    pub index: u64,
    pub cpu: CpuId,
    pub target: InjectionTarget,
    pub flips: Vec<Flip>,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("bit {0} out of range for a 32-bit register")]
pub struct BitOutOfRange(pub u32);

/// Flips one bit of a 32-bit word.
pub fn bit_flip(word: u32, bit: u32) -> Result<u32, BitOutOfRange> {
    if bit >= 32 {
        return Err(BitOutOfRange(bit));
    }
    Ok(word ^ (1u32 << bit))
}

/// Fires on every `period`-th matching call: counts are 1-based, so the
/// first firing happens at call number `period`.
pub fn should_fire(call_count: u64, period: u64) -> bool {
    call_count > 0 && call_count.is_multiple_of(period)
}

/// Draws `k` distinct slots (each with one bit position) out of `slots`.
/// The draw is wholly determined by the RNG state, so replaying a seed
/// replays the choice.
pub fn choose_flips(
    rng: &mut ChaCha8Rng,
    k: usize,
    slots: &[Slot],
    bits_per_slot: u32,
) -> Vec<(Slot, u8)> {
    let k = k.min(slots.len());
    let picked = rand::seq::index::sample(rng, slots.len(), k);
    picked
        .into_iter()
        .map(|i| {
            let bit = rng.random_range(0..bits_per_slot) as u8;
            (slots[i], bit)
        })
        .collect()
}

/// Stateful interceptor for one trial. Counts matching events, decides
/// firing by the plan's period, and corrupts the register context of firing
/// events.
#[derive(Debug, Clone)]
pub struct Injector {
    plan: FaultPlan,
    calls: u64,
    rng: ChaCha8Rng,
}

impl Injector {
    pub fn new(plan: FaultPlan) -> Injector {
        let rng = rand::SeedableRng::seed_from_u64(plan.seed);
        Injector {
            plan,
            calls: 0,
            rng,
        }
    }

    pub fn plan(&self) -> &FaultPlan {
        &self.plan
    }

    /// Number of matching calls seen so far.
    pub fn calls(&self) -> u64 {
        self.calls
    }

    pub fn matches(&self, ev: &Event) -> bool {
        let kind_ok = matches!(
            (self.plan.target, ev),
            (InjectionTarget::Hvc, Event::Hypercall { .. })
                | (InjectionTarget::Trap, Event::Trap { .. })
        );
        kind_ok
            && self
                .plan
                .cpu_filter
                .is_none_or(|filter| ev.cpu() == filter)
    }

    /// Counts the event if it matches the plan and reports whether this call
    /// is a firing.
    pub fn observe(&mut self, ev: &Event) -> bool {
        if !self.matches(ev) {
            return false;
        }
        self.calls += 1;
        should_fire(self.calls, self.plan.intensity.period())
    }

    /// Corrupts a firing event's context in place and returns the record of
    /// what was flipped.
    pub fn corrupt(&mut self, index: u64, ev: &mut Event) -> InjectionRecord {
        let k = match self.plan.intensity {
            Intensity::Medium { .. } => 1,
            Intensity::High { registers, .. } => match registers {
                RegisterCount::Drawn => self.rng.random_range(2..=4) as usize,
                RegisterCount::Fixed(k) => k as usize,
            },
        };
        let slots = self.plan.slots.resolve();
        let chosen = choose_flips(&mut self.rng, k, &slots, BITS_PER_SLOT);
        let cpu = ev.cpu();
        let ctx = ev.ctx_mut().expect("firing events carry a context");
        let flips = chosen
            .into_iter()
            .map(|(slot, bit)| {
                let pre = slot.read(ctx);
                let post = bit_flip(pre, u32::from(bit)).expect("bit < 32");
                slot.write(ctx, post);
                Flip {
                    slot,
                    bit,
                    pre,
                    post,
                }
            })
            .collect();
        InjectionRecord {
            index,
            cpu,
            target: self.plan.target,
            flips,
        }
    }

    /// The mechanistic seam: observe, and on a firing corrupt the event.
    pub fn intercept(&mut self, index: u64, ev: &mut Event) -> Option<InjectionRecord> {
        if self.observe(ev) {
            Some(self.corrupt(index, ev))
        } else {
            None
        }
    }
}

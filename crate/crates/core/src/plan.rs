//! Campaign plan files: one `campaign` block with run-wide settings and one
//! `stratum` block per fault plan in the matrix.
//!
//! ```text
//! campaign {
//!     trials = 100
//!     base_seed = 42
//!     horizon = 2000
//!     mode = calibrated        # or mechanistic (default)
//!     p_correct = 0.65         # calibrated split, each key optional
//!     p_panic = 0.30
//!     p_park = 0.05
//!     p_silent = 0.0
//! }
//!
//! stratum {
//!     target = trap            # trap | hvc
//!     cpu = 1                  # omit to match any cpu
//!     intensity = medium       # medium | high
//!     period = 100             # optional override
//!     registers = 3            # optional fixed count, high only
//!     slots = [r1, esr]        # optional slot restriction
//! }
//! ```

use std::collections::BTreeSet;

use crate::campaign::{CalibratedSplit, EffectMode};
use crate::injector::{FaultPlan, InjectionTarget, Intensity, RegisterCount, Slot, SlotFilter};
use crate::textdoc::{Cursor, ParseError, Token};
use crate::workload::DEFAULT_HORIZON;

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignPlan {
    pub trials: u64,
    pub base_seed: u64,
    pub horizon: u64,
    pub mode: EffectMode,
    pub strata: Vec<FaultPlan>,
}

pub fn parse_plan(text: &str) -> Result<CampaignPlan, ParseError> {
    let mut cur = Cursor::new(text)?;
    let mut campaign: Option<CampaignSettings> = None;
    let mut strata: Vec<FaultPlan> = Vec::new();

    while !cur.at_end() {
        let (kw, line, col) = cur.expect_ident("block keyword")?;
        match kw.as_str() {
            "campaign" => {
                if campaign.is_some() {
                    return Err(ParseError::new(line, col, "duplicate campaign block"));
                }
                campaign = Some(parse_campaign_block(&mut cur)?);
            }
            "stratum" => strata.push(parse_stratum_block(&mut cur)?),
            other => {
                return Err(ParseError::new(
                    line,
                    col,
                    format!("unknown block `{other}` (expected campaign or stratum)"),
                ));
            }
        }
    }

    let settings = campaign.ok_or_else(|| cur.error("missing campaign block"))?;
    if strata.is_empty() {
        return Err(cur.error("plan has no stratum blocks"));
    }
    let mode = if settings.calibrated {
        EffectMode::Calibrated(settings.split)
    } else {
        EffectMode::Mechanistic
    };
    Ok(CampaignPlan {
        trials: settings.trials,
        base_seed: settings.base_seed,
        horizon: settings.horizon,
        mode,
        strata,
    })
}

struct CampaignSettings {
    trials: u64,
    base_seed: u64,
    horizon: u64,
    calibrated: bool,
    split: CalibratedSplit,
}

fn parse_campaign_block(cur: &mut Cursor) -> Result<CampaignSettings, ParseError> {
    cur.expect(&Token::LBrace, "`{`")?;
    let mut trials: Option<u64> = None;
    let mut base_seed: Option<u64> = None;
    let mut horizon: Option<u64> = None;
    let mut calibrated: Option<bool> = None;
    let mut split = CalibratedSplit::default();
    let mut seen_probs: BTreeSet<String> = BTreeSet::new();

    loop {
        match cur.peek() {
            Some(Token::RBrace) => {
                cur.advance();
                break;
            }
            Some(Token::Ident(_)) => {
                let (key, line, col) = cur.expect_ident("key")?;
                cur.expect(&Token::Eq, "`=`")?;
                let dup = |what: &str| ParseError::new(line, col, format!("duplicate {what}"));
                match key.as_str() {
                    "trials" => {
                        if trials.is_some() {
                            return Err(dup("trials"));
                        }
                        trials = Some(cur.expect_int("trial count")?.0);
                    }
                    "base_seed" => {
                        if base_seed.is_some() {
                            return Err(dup("base_seed"));
                        }
                        base_seed = Some(cur.expect_int("seed")?.0);
                    }
                    "horizon" => {
                        if horizon.is_some() {
                            return Err(dup("horizon"));
                        }
                        horizon = Some(cur.expect_int("horizon")?.0);
                    }
                    "mode" => {
                        if calibrated.is_some() {
                            return Err(dup("mode"));
                        }
                        let (mode, mline, mcol) = cur.expect_ident("mode")?;
                        calibrated = Some(match mode.as_str() {
                            "mechanistic" => false,
                            "calibrated" => true,
                            other => {
                                return Err(ParseError::new(
                                    mline,
                                    mcol,
                                    format!("unknown mode `{other}`"),
                                ));
                            }
                        });
                    }
                    "p_correct" | "p_panic" | "p_park" | "p_silent" => {
                        if !seen_probs.insert(key.clone()) {
                            return Err(dup(&key));
                        }
                        let value = cur.expect_number("probability")?;
                        match key.as_str() {
                            "p_correct" => split.p_correct = value,
                            "p_panic" => split.p_panic = value,
                            "p_park" => split.p_park = value,
                            _ => split.p_silent = value,
                        }
                    }
                    other => {
                        return Err(ParseError::new(
                            line,
                            col,
                            format!("unknown campaign key `{other}`"),
                        ));
                    }
                }
            }
            _ => return Err(cur.error("expected key or `}`")),
        }
    }

    Ok(CampaignSettings {
        trials: trials.ok_or_else(|| cur.error("campaign block is missing trials"))?,
        base_seed: base_seed.unwrap_or(0),
        horizon: horizon.unwrap_or(DEFAULT_HORIZON),
        calibrated: calibrated.unwrap_or(false),
        split,
    })
}

fn parse_stratum_block(cur: &mut Cursor) -> Result<FaultPlan, ParseError> {
    cur.expect(&Token::LBrace, "`{`")?;
    let mut target: Option<InjectionTarget> = None;
    let mut cpu: Option<u32> = None;
    let mut high: Option<bool> = None;
    let mut period: Option<u64> = None;
    let mut registers: Option<(u32, u32, u32)> = None;
    let mut slots: Option<BTreeSet<Slot>> = None;

    loop {
        match cur.peek() {
            Some(Token::RBrace) => {
                cur.advance();
                break;
            }
            Some(Token::Ident(_)) => {
                let (key, line, col) = cur.expect_ident("key")?;
                cur.expect(&Token::Eq, "`=`")?;
                let dup = |what: &str| ParseError::new(line, col, format!("duplicate {what}"));
                match key.as_str() {
                    "target" => {
                        if target.is_some() {
                            return Err(dup("target"));
                        }
                        let (t, tline, tcol) = cur.expect_ident("target")?;
                        target = Some(match t.as_str() {
                            "hvc" => InjectionTarget::Hvc,
                            "trap" => InjectionTarget::Trap,
                            other => {
                                return Err(ParseError::new(
                                    tline,
                                    tcol,
                                    format!("unknown target `{other}` (hvc or trap)"),
                                ));
                            }
                        });
                    }
                    "cpu" => {
                        if cpu.is_some() {
                            return Err(dup("cpu"));
                        }
                        let (n, nline, ncol) = cur.expect_int("cpu id")?;
                        cpu = Some(u32::try_from(n).map_err(|_| {
                            ParseError::new(nline, ncol, "cpu id out of range")
                        })?);
                    }
                    "intensity" => {
                        if high.is_some() {
                            return Err(dup("intensity"));
                        }
                        let (level, lline, lcol) = cur.expect_ident("intensity")?;
                        high = Some(match level.as_str() {
                            "medium" => false,
                            "high" => true,
                            other => {
                                return Err(ParseError::new(
                                    lline,
                                    lcol,
                                    format!("unknown intensity `{other}` (medium or high)"),
                                ));
                            }
                        });
                    }
                    "period" => {
                        if period.is_some() {
                            return Err(dup("period"));
                        }
                        let (n, nline, ncol) = cur.expect_int("period")?;
                        if n == 0 {
                            return Err(ParseError::new(nline, ncol, "period must be positive"));
                        }
                        period = Some(n);
                    }
                    "registers" => {
                        if registers.is_some() {
                            return Err(dup("registers"));
                        }
                        let (n, nline, ncol) = cur.expect_int("register count")?;
                        let n = u32::try_from(n)
                            .map_err(|_| ParseError::new(nline, ncol, "register count too large"))?;
                        if n < 2 {
                            return Err(ParseError::new(
                                nline,
                                ncol,
                                "register count must be at least 2",
                            ));
                        }
                        registers = Some((n, nline, ncol));
                    }
                    "slots" => {
                        if slots.is_some() {
                            return Err(dup("slots"));
                        }
                        let mut set = BTreeSet::new();
                        for (name, nline, ncol) in cur.expect_ident_list("slot name")? {
                            let slot = Slot::from_name(&name).ok_or_else(|| {
                                ParseError::new(
                                    nline,
                                    ncol,
                                    format!("unknown slot `{name}` (r0-r15 or esr)"),
                                )
                            })?;
                            if !set.insert(slot) {
                                return Err(ParseError::new(
                                    nline,
                                    ncol,
                                    format!("duplicate slot `{name}`"),
                                ));
                            }
                        }
                        if set.is_empty() {
                            return Err(cur.error("slots list is empty"));
                        }
                        slots = Some(set);
                    }
                    other => {
                        return Err(ParseError::new(
                            line,
                            col,
                            format!("unknown stratum key `{other}`"),
                        ));
                    }
                }
            }
            _ => return Err(cur.error("expected key or `}`")),
        }
    }

    let target = target.ok_or_else(|| cur.error("stratum is missing target"))?;
    let high = high.ok_or_else(|| cur.error("stratum is missing intensity"))?;
    let intensity = if high {
        let registers = match registers {
            Some((k, _, _)) => RegisterCount::Fixed(k),
            None => RegisterCount::Drawn,
        };
        let mut intensity = Intensity::High {
            period: 50,
            registers,
        };
        if let Some(p) = period {
            intensity = intensity.with_period(p);
        }
        intensity
    } else {
        if let Some((_, line, col)) = registers {
            return Err(ParseError::new(
                line,
                col,
                "registers requires intensity = high",
            ));
        }
        Intensity::Medium {
            period: period.unwrap_or(100),
        }
    };

    Ok(FaultPlan {
        target,
        cpu_filter: cpu,
        intensity,
        seed: 0,
        slots: slots.map_or(SlotFilter::All, SlotFilter::Only),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const PLAN: &str = r#"
# Reference campaign: both intensities against guest traps.
campaign {
    trials = 50
    base_seed = 7
    horizon = 2000
}

stratum {
    target = trap
    cpu = 1
    intensity = medium
}

stratum {
    target = trap
    cpu = 1
    intensity = high
}
"#;

    #[test]
    fn parses_reference_plan() {
        let plan = parse_plan(PLAN).unwrap();
        assert_eq!(plan.trials, 50);
        assert_eq!(plan.base_seed, 7);
        assert_eq!(plan.horizon, 2000);
        assert_eq!(plan.mode, EffectMode::Mechanistic);
        assert_eq!(plan.strata.len(), 2);
        assert_eq!(plan.strata[0].intensity, Intensity::medium());
        assert_eq!(plan.strata[1].intensity, Intensity::high());
        assert_eq!(plan.strata[0].cpu_filter, Some(1));
        assert_eq!(plan.strata[0].slots, SlotFilter::All);
    }

    #[test]
    fn calibrated_mode_with_overrides() {
        let text = r#"
campaign { trials = 10 mode = calibrated p_panic = 0.5 p_correct = 0.45 }
stratum { target = trap intensity = medium }
"#;
        let plan = parse_plan(text).unwrap();
        match plan.mode {
            EffectMode::Calibrated(split) => {
                assert_eq!(split.p_panic, 0.5);
                assert_eq!(split.p_correct, 0.45);
                assert_eq!(split.p_park, 0.05);
            }
            other => panic!("unexpected mode {other:?}"),
        }
    }

    #[test]
    fn stratum_extras() {
        let text = r#"
campaign { trials = 1 }
stratum { target = hvc intensity = high period = 1 registers = 3 slots = [r1, esr] }
"#;
        let plan = parse_plan(text).unwrap();
        let p = &plan.strata[0];
        assert_eq!(
            p.intensity,
            Intensity::High {
                period: 1,
                registers: RegisterCount::Fixed(3)
            }
        );
        assert_eq!(
            p.slots,
            SlotFilter::Only(BTreeSet::from([Slot::Reg(1), Slot::Esr]))
        );
    }

    #[test]
    fn rejects_bad_plans() {
        let missing_trials = "campaign { } stratum { target = trap intensity = medium }";
        assert!(parse_plan(missing_trials)
            .unwrap_err()
            .message
            .contains("missing trials"));

        let no_strata = "campaign { trials = 5 }";
        assert!(parse_plan(no_strata)
            .unwrap_err()
            .message
            .contains("no stratum"));

        let bad_target = "campaign { trials = 5 } stratum { target = irq intensity = medium }";
        assert!(parse_plan(bad_target)
            .unwrap_err()
            .message
            .contains("unknown target"));

        let medium_registers =
            "campaign { trials = 5 } stratum { target = trap intensity = medium registers = 3 }";
        assert!(parse_plan(medium_registers)
            .unwrap_err()
            .message
            .contains("registers requires"));

        let zero_period =
            "campaign { trials = 5 } stratum { target = trap intensity = medium period = 0 }";
        assert!(parse_plan(zero_period)
            .unwrap_err()
            .message
            .contains("positive"));

        let bad_slot =
            "campaign { trials = 5 } stratum { target = trap intensity = medium slots = [r77] }";
        assert!(parse_plan(bad_slot).unwrap_err().message.contains("unknown slot"));
    }
}

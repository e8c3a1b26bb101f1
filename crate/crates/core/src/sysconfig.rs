//! Static system description: hardware envelope, root cell and guest cells,
//! each with CPUs, guest-physical memory regions and interrupt vectors.
//!
//! A configuration is parsed from a small block-structured text format,
//! printed back canonically (parse-print-parse is identity), validated into
//! a deterministic list of violations, and projected into a per-cell
//! resource ownership view for a given set of active cells.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::digest::fnv64_hex;
use crate::textdoc::{Cursor, ParseError, Token};

pub type CpuId = u32;

/// Highest accepted interrupt vector number.
pub const MAX_IRQ_VECTOR: u32 = 1023;

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct RegionFlags(u8);

impl RegionFlags {
    pub const READ: RegionFlags = RegionFlags(1);
    pub const WRITE: RegionFlags = RegionFlags(2);
    pub const EXECUTE: RegionFlags = RegionFlags(4);
    pub const SHARED: RegionFlags = RegionFlags(8);

    pub fn empty() -> RegionFlags {
        RegionFlags(0)
    }

    pub fn with(self, other: RegionFlags) -> RegionFlags {
        RegionFlags(self.0 | other.0)
    }

    pub fn contains(self, other: RegionFlags) -> bool {
        self.0 & other.0 == other.0
    }

    fn names(self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.contains(RegionFlags::READ) {
            out.push("READ");
        }
        if self.contains(RegionFlags::WRITE) {
            out.push("WRITE");
        }
        if self.contains(RegionFlags::EXECUTE) {
            out.push("EXECUTE");
        }
        if self.contains(RegionFlags::SHARED) {
            out.push("SHARED");
        }
        out
    }

    fn from_name(name: &str) -> Option<RegionFlags> {
        match name {
            "READ" => Some(RegionFlags::READ),
            "WRITE" => Some(RegionFlags::WRITE),
            "EXECUTE" => Some(RegionFlags::EXECUTE),
            "SHARED" => Some(RegionFlags::SHARED),
            _ => None,
        }
    }
}

impl fmt::Display for RegionFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.names().join(" "))
    }
}

/// A guest-physical memory range assigned to a cell. `base` is a 32-bit
/// address; the range is `[base, base + size)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MemoryRegion {
    pub name: Option<String>,
    pub base: u32,
    pub size: u64,
    pub flags: RegionFlags,
}

impl MemoryRegion {
    pub fn end(&self) -> u64 {
        u64::from(self.base) + self.size
    }

    pub fn contains(&self, addr: u32) -> bool {
        u64::from(addr) >= u64::from(self.base) && u64::from(addr) < self.end()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellConfig {
    pub name: String,
    pub cpus: BTreeSet<CpuId>,
    pub regions: Vec<MemoryRegion>,
    pub irqs: BTreeSet<u32>,
    /// Name of this cell's end of the shared-memory communication channel.
    pub comm: Option<String>,
}

impl CellConfig {
    pub fn region_named(&self, name: &str) -> Option<&MemoryRegion> {
        self.regions
            .iter()
            .find(|r| r.name.as_deref() == Some(name))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SystemConfig {
    pub num_cpus: u32,
    pub ram_size: u64,
    pub root: CellConfig,
    pub cells: Vec<CellConfig>,
}

impl SystemConfig {
    /// Root first, then guest cells in declaration order.
    pub fn all_cells(&self) -> impl Iterator<Item = &CellConfig> {
        std::iter::once(&self.root).chain(self.cells.iter())
    }

    pub fn cell_named(&self, name: &str) -> Option<&CellConfig> {
        self.all_cells().find(|c| c.name == name)
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

const ROOT_NAME: &str = "root";

fn valid_cell_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

pub fn parse_system_config(text: &str) -> Result<SystemConfig, ParseError> {
    let mut cur = Cursor::new(text)?;
    let mut hardware: Option<(u32, u64)> = None;
    let mut root: Option<CellConfig> = None;
    let mut cells: Vec<CellConfig> = Vec::new();

    while !cur.at_end() {
        let (kw, line, col) = cur.expect_ident("block keyword")?;
        match kw.as_str() {
            "hardware" => {
                if hardware.is_some() {
                    return Err(ParseError::new(line, col, "duplicate hardware block"));
                }
                hardware = Some(parse_hardware_block(&mut cur)?);
            }
            "root" => {
                if root.is_some() {
                    return Err(ParseError::new(line, col, "duplicate root block"));
                }
                root = Some(parse_cell_body(&mut cur, ROOT_NAME.to_string())?);
            }
            "cell" => {
                let name = cur.expect_string("cell name")?;
                if !valid_cell_name(&name) {
                    return Err(ParseError::new(line, col, format!("invalid cell name \"{name}\"")));
                }
                cells.push(parse_cell_body(&mut cur, name)?);
            }
            other => {
                return Err(ParseError::new(
                    line,
                    col,
                    format!("unknown block `{other}` (expected hardware, root or cell)"),
                ));
            }
        }
    }

    let root = root.ok_or_else(|| cur.error("missing root block"))?;
    let (num_cpus, ram_size) =
        hardware.ok_or_else(|| cur.error("missing hardware block"))?;
    Ok(SystemConfig {
        num_cpus,
        ram_size,
        root,
        cells,
    })
}

fn parse_hardware_block(cur: &mut Cursor) -> Result<(u32, u64), ParseError> {
    cur.expect(&Token::LBrace, "`{`")?;
    let mut num_cpus: Option<u32> = None;
    let mut ram_size: Option<u64> = None;
    loop {
        match cur.peek() {
            Some(Token::RBrace) => {
                cur.advance();
                break;
            }
            Some(Token::Ident(_)) => {
                let (key, line, col) = cur.expect_ident("key")?;
                cur.expect(&Token::Eq, "`=`")?;
                match key.as_str() {
                    "num_cpus" => {
                        if num_cpus.is_some() {
                            return Err(ParseError::new(line, col, "duplicate num_cpus"));
                        }
                        let (n, nline, ncol) = cur.expect_int("cpu count")?;
                        let n = u32::try_from(n).map_err(|_| {
                            ParseError::new(nline, ncol, "num_cpus out of range")
                        })?;
                        num_cpus = Some(n);
                    }
                    "ram_size" => {
                        if ram_size.is_some() {
                            return Err(ParseError::new(line, col, "duplicate ram_size"));
                        }
                        ram_size = Some(cur.expect_int("ram size")?.0);
                    }
                    other => {
                        return Err(ParseError::new(
                            line,
                            col,
                            format!("unknown hardware key `{other}`"),
                        ));
                    }
                }
            }
            _ => return Err(cur.error("expected key or `}`")),
        }
    }
    let num_cpus = num_cpus.ok_or_else(|| cur.error("hardware block is missing num_cpus"))?;
    let ram_size = ram_size.ok_or_else(|| cur.error("hardware block is missing ram_size"))?;
    Ok((num_cpus, ram_size))
}

fn parse_cell_body(cur: &mut Cursor, name: String) -> Result<CellConfig, ParseError> {
    cur.expect(&Token::LBrace, "`{`")?;
    let mut cpus: Option<BTreeSet<CpuId>> = None;
    let mut irqs: Option<BTreeSet<u32>> = None;
    let mut comm: Option<String> = None;
    let mut regions: Vec<MemoryRegion> = Vec::new();

    loop {
        match cur.peek() {
            Some(Token::RBrace) => {
                cur.advance();
                break;
            }
            Some(Token::Ident(_)) => {
                let (key, line, col) = cur.expect_ident("statement")?;
                match key.as_str() {
                    "cpus" => {
                        if cpus.is_some() {
                            return Err(ParseError::new(line, col, "duplicate cpus key"));
                        }
                        cur.expect(&Token::Eq, "`=`")?;
                        let mut set = BTreeSet::new();
                        for (n, nline, ncol) in cur.expect_int_list("cpu id")? {
                            let id = u32::try_from(n).map_err(|_| {
                                ParseError::new(nline, ncol, "cpu id out of range")
                            })?;
                            if !set.insert(id) {
                                return Err(ParseError::new(
                                    nline,
                                    ncol,
                                    format!("duplicate cpu {id}"),
                                ));
                            }
                        }
                        cpus = Some(set);
                    }
                    "irqs" => {
                        if irqs.is_some() {
                            return Err(ParseError::new(line, col, "duplicate irqs key"));
                        }
                        cur.expect(&Token::Eq, "`=`")?;
                        let mut set = BTreeSet::new();
                        for (n, nline, ncol) in cur.expect_int_list("irq vector")? {
                            if n > u64::from(MAX_IRQ_VECTOR) {
                                return Err(ParseError::new(
                                    nline,
                                    ncol,
                                    format!("irq vector {n} out of range (0-{MAX_IRQ_VECTOR})"),
                                ));
                            }
                            if !set.insert(n as u32) {
                                return Err(ParseError::new(
                                    nline,
                                    ncol,
                                    format!("duplicate irq vector {n}"),
                                ));
                            }
                        }
                        irqs = Some(set);
                    }
                    "comm" => {
                        if comm.is_some() {
                            return Err(ParseError::new(line, col, "duplicate comm key"));
                        }
                        cur.expect(&Token::Eq, "`=`")?;
                        comm = Some(cur.expect_string("region name")?);
                    }
                    "region" => {
                        regions.push(parse_region(cur)?);
                    }
                    other => {
                        return Err(ParseError::new(
                            line,
                            col,
                            format!("unknown cell key `{other}`"),
                        ));
                    }
                }
            }
            _ => return Err(cur.error("expected statement or `}`")),
        }
    }

    Ok(CellConfig {
        name,
        cpus: cpus.unwrap_or_default(),
        regions,
        irqs: irqs.unwrap_or_default(),
        comm,
    })
}

fn parse_region(cur: &mut Cursor) -> Result<MemoryRegion, ParseError> {
    let name = match cur.peek() {
        Some(Token::Ident(s)) if RegionFlags::from_name(s).is_none() => {
            let (s, line, col) = cur.expect_ident("region name")?;
            if !valid_cell_name(&s) {
                return Err(ParseError::new(line, col, format!("invalid region name `{s}`")));
            }
            Some(s)
        }
        _ => None,
    };
    let (base, bline, bcol) = cur.expect_int("region base address")?;
    let base = u32::try_from(base)
        .map_err(|_| ParseError::new(bline, bcol, "region base beyond 32-bit address space"))?;
    let (size, _, _) = cur.expect_int("region size")?;

    let mut flags = RegionFlags::empty();
    let mut any = false;
    while let Some(Token::Ident(s)) = cur.peek() {
        match RegionFlags::from_name(s) {
            Some(f) => {
                let (_, fline, fcol) = cur.expect_ident("flag")?;
                if flags.contains(f) {
                    return Err(ParseError::new(fline, fcol, "duplicate region flag"));
                }
                flags = flags.with(f);
                any = true;
            }
            None => break,
        }
    }
    if !any {
        return Err(cur.error("expected at least one region flag (READ WRITE EXECUTE SHARED)"));
    }
    Ok(MemoryRegion {
        name,
        base,
        size,
        flags,
    })
}

// ---------------------------------------------------------------------------
// Canonical printing
// ---------------------------------------------------------------------------

pub fn print_system_config(cfg: &SystemConfig) -> String {
    let mut out = String::new();
    out.push_str("hardware {\n");
    out.push_str(&format!("    num_cpus = {}\n", cfg.num_cpus));
    out.push_str(&format!("    ram_size = 0x{:x}\n", cfg.ram_size));
    out.push_str("}\n");
    print_cell(&mut out, &cfg.root, true);
    for cell in &cfg.cells {
        print_cell(&mut out, cell, false);
    }
    out
}

fn print_cell(out: &mut String, cell: &CellConfig, is_root: bool) {
    out.push('\n');
    if is_root {
        out.push_str("root {\n");
    } else {
        out.push_str(&format!("cell \"{}\" {{\n", cell.name));
    }
    out.push_str(&format!("    cpus = [{}]\n", join_u32(cell.cpus.iter())));
    for r in &cell.regions {
        match &r.name {
            Some(n) => out.push_str(&format!(
                "    region {} 0x{:08x} 0x{:08x} {}\n",
                n, r.base, r.size, r.flags
            )),
            None => out.push_str(&format!(
                "    region 0x{:08x} 0x{:08x} {}\n",
                r.base, r.size, r.flags
            )),
        }
    }
    out.push_str(&format!("    irqs = [{}]\n", join_u32(cell.irqs.iter())));
    if let Some(comm) = &cell.comm {
        out.push_str(&format!("    comm = \"{comm}\"\n"));
    }
    out.push_str("}\n");
}

fn join_u32<'a>(items: impl Iterator<Item = &'a u32>) -> String {
    items
        .map(|n| n.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Stable hex digest of the canonical printed form.
pub fn config_digest(cfg: &SystemConfig) -> String {
    fnv64_hex(print_system_config(cfg).as_bytes())
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ViolationCode {
    CpuOverlap,
    CpuOutOfRange,
    RegionOverlap,
    RegionOob,
    BadShared,
    DupName,
    EmptyCpuset,
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationCode::CpuOverlap => "CPU_OVERLAP",
            ViolationCode::CpuOutOfRange => "CPU_OUT_OF_RANGE",
            ViolationCode::RegionOverlap => "REGION_OVERLAP",
            ViolationCode::RegionOob => "REGION_OOB",
            ViolationCode::BadShared => "BAD_SHARED",
            ViolationCode::DupName => "DUP_NAME",
            ViolationCode::EmptyCpuset => "EMPTY_CPUSET",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub code: ViolationCode,
    /// Name of the cell the violation is attributed to. Cross-cell
    /// violations are attributed to the later-declared cell.
    pub subject: String,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", self.code, self.subject, self.detail)
    }
}

/// Checks every static isolation rule and returns the violations sorted by
/// (cell declaration order, code, detail). An empty result means the config
/// is safe to enable.
pub fn validate(cfg: &SystemConfig) -> Vec<Violation> {
    let cells: Vec<&CellConfig> = cfg.all_cells().collect();
    let rank = |name: &str| cells.iter().position(|c| c.name == name).unwrap_or(0);
    let mut out: Vec<(usize, Violation)> = Vec::new();
    let mut push = |rank: usize, code: ViolationCode, subject: &str, detail: String| {
        out.push((
            rank,
            Violation {
                code,
                subject: subject.to_string(),
                detail,
            },
        ));
    };

    // Duplicate cell names (including a guest cell claiming the root name).
    for (i, cell) in cells.iter().enumerate() {
        if cells[..i].iter().any(|c| c.name == cell.name) {
            push(
                i,
                ViolationCode::DupName,
                &cell.name,
                format!("cell name `{}` already declared", cell.name),
            );
        }
    }

    // Per-cell checks.
    for (i, cell) in cells.iter().enumerate() {
        if cell.cpus.is_empty() {
            push(
                i,
                ViolationCode::EmptyCpuset,
                &cell.name,
                "cell has no cpus".to_string(),
            );
        }
        for &cpu in &cell.cpus {
            if cpu >= cfg.num_cpus {
                push(
                    i,
                    ViolationCode::CpuOutOfRange,
                    &cell.name,
                    format!("cpu {cpu} not in 0..{}", cfg.num_cpus),
                );
            }
        }
        for (j, region) in cell.regions.iter().enumerate() {
            if let Some(name) = &region.name {
                let dup = cell.regions[..j]
                    .iter()
                    .any(|r| r.name.as_deref() == Some(name));
                if dup {
                    push(
                        i,
                        ViolationCode::DupName,
                        &cell.name,
                        format!("region name `{name}` already declared in this cell"),
                    );
                }
            }
            if region.size == 0 {
                push(
                    i,
                    ViolationCode::RegionOob,
                    &cell.name,
                    format!("{}: zero-size region", describe_region(region)),
                );
            } else if region.end() > (1u64 << 32) {
                push(
                    i,
                    ViolationCode::RegionOob,
                    &cell.name,
                    format!(
                        "{}: end 0x{:x} beyond 32-bit address space",
                        describe_region(region),
                        region.end()
                    ),
                );
            } else if region.end() > cfg.ram_size {
                push(
                    i,
                    ViolationCode::RegionOob,
                    &cell.name,
                    format!(
                        "{}: end 0x{:x} beyond ram_size 0x{:x}",
                        describe_region(region),
                        region.end(),
                        cfg.ram_size
                    ),
                );
            }
            if region.flags.contains(RegionFlags::SHARED)
                && !region.flags.contains(RegionFlags::READ)
            {
                push(
                    i,
                    ViolationCode::BadShared,
                    &cell.name,
                    format!("{}: SHARED region without READ", describe_region(region)),
                );
            }
        }
        if let Some(comm) = &cell.comm {
            match cell.region_named(comm) {
                None => push(
                    i,
                    ViolationCode::BadShared,
                    &cell.name,
                    format!("comm names unknown region `{comm}`"),
                ),
                Some(r) if !r.flags.contains(RegionFlags::SHARED) => push(
                    i,
                    ViolationCode::BadShared,
                    &cell.name,
                    format!("comm region `{comm}` is not SHARED"),
                ),
                Some(_) => {}
            }
        }
    }

    // CPU exclusivity across cells.
    let mut cpu_owner: BTreeMap<CpuId, &str> = BTreeMap::new();
    for (i, cell) in cells.iter().enumerate() {
        for &cpu in &cell.cpus {
            match cpu_owner.get(&cpu) {
                Some(owner) => push(
                    i,
                    ViolationCode::CpuOverlap,
                    &cell.name,
                    format!("cpu {cpu} also assigned to {owner}"),
                ),
                None => {
                    cpu_owner.insert(cpu, &cell.name);
                }
            }
        }
    }

    // Memory isolation across cells. Overlap is allowed only for the two
    // halves of a shared channel: both SHARED with identical base and size.
    for (bi, b) in cells.iter().enumerate() {
        for a in &cells[..bi] {
            for ra in &a.regions {
                for rb in &b.regions {
                    let overlap = u64::from(ra.base.max(rb.base)) < ra.end().min(rb.end());
                    if !overlap {
                        continue;
                    }
                    let paired_shared = ra.flags.contains(RegionFlags::SHARED)
                        && rb.flags.contains(RegionFlags::SHARED)
                        && ra.base == rb.base
                        && ra.size == rb.size;
                    if !paired_shared {
                        push(
                            bi,
                            ViolationCode::RegionOverlap,
                            &b.name,
                            format!(
                                "{} overlaps {} of {}",
                                describe_region(rb),
                                describe_region(ra),
                                a.name
                            ),
                        );
                    }
                }
            }
        }
    }

    // Every shared window must be declared by exactly two distinct cells.
    let mut shared: BTreeMap<(u32, u64), Vec<&str>> = BTreeMap::new();
    for cell in &cells {
        for region in &cell.regions {
            if region.flags.contains(RegionFlags::SHARED) {
                shared
                    .entry((region.base, region.size))
                    .or_default()
                    .push(&cell.name);
            }
        }
    }
    for ((base, size), owners) in &shared {
        let distinct: BTreeSet<&str> = owners.iter().copied().collect();
        if owners.len() != 2 || distinct.len() != 2 {
            let latest = owners
                .iter()
                .map(|n| rank(n))
                .max()
                .unwrap_or(0);
            let subject = cells[latest].name.clone();
            push(
                latest,
                ViolationCode::BadShared,
                &subject,
                format!(
                    "shared window 0x{base:08x}+0x{size:x} declared by [{}], need exactly two cells",
                    owners.join(", ")
                ),
            );
        }
    }

    out.sort_by(|(ra, va), (rb, vb)| {
        ra.cmp(rb)
            .then(va.code.cmp(&vb.code))
            .then(va.detail.cmp(&vb.detail))
    });
    let mut result: Vec<Violation> = out.into_iter().map(|(_, v)| v).collect();
    result.dedup();
    result
}

fn describe_region(r: &MemoryRegion) -> String {
    match &r.name {
        Some(n) => format!("region {n} 0x{:08x}+0x{:x}", r.base, r.size),
        None => format!("region 0x{:08x}+0x{:x}", r.base, r.size),
    }
}

// ---------------------------------------------------------------------------
// Resource ownership view
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("unknown cell `{0}`")]
pub struct UnknownCell(pub String);

/// Resources owned by one cell. Regions and irq vectors are tagged with the
/// declaring cell so the union over all cells is a faithful multiset of
/// everything the config declares.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ResourceSet {
    pub cpus: BTreeSet<CpuId>,
    pub regions: BTreeSet<(String, MemoryRegion)>,
    pub irqs: BTreeSet<(String, u32)>,
}

impl ResourceSet {
    pub fn owns_addr(&self, addr: u32) -> bool {
        self.regions.iter().any(|(_, r)| r.contains(addr))
    }

    pub fn owns_irq(&self, vector: u32) -> bool {
        self.irqs.iter().any(|(_, v)| *v == vector)
    }

    pub fn is_empty(&self) -> bool {
        self.cpus.is_empty() && self.regions.is_empty() && self.irqs.is_empty()
    }
}

/// Computes who owns what when the cells in `active` are up. Inactive guest
/// cells own nothing; their declared resources, plus every CPU no active
/// guest claims, belong to the root cell. The map always has one entry per
/// declared cell.
pub fn resource_view(
    cfg: &SystemConfig,
    active: &BTreeSet<String>,
) -> Result<BTreeMap<String, ResourceSet>, UnknownCell> {
    for name in active {
        if cfg.cell_named(name).is_none() {
            return Err(UnknownCell(name.clone()));
        }
    }

    let mut view: BTreeMap<String, ResourceSet> = cfg
        .all_cells()
        .map(|c| (c.name.clone(), ResourceSet::default()))
        .collect();

    let mut root_set = ResourceSet {
        cpus: (0..cfg.num_cpus).collect(),
        regions: tagged_regions(&cfg.root),
        irqs: tagged_irqs(&cfg.root),
    };

    for cell in &cfg.cells {
        if active.contains(&cell.name) {
            for &cpu in &cell.cpus {
                root_set.cpus.remove(&cpu);
            }
            view.insert(
                cell.name.clone(),
                ResourceSet {
                    cpus: cell.cpus.clone(),
                    regions: tagged_regions(cell),
                    irqs: tagged_irqs(cell),
                },
            );
        } else {
            root_set.regions.extend(tagged_regions(cell));
            root_set.irqs.extend(tagged_irqs(cell));
        }
    }

    view.insert(cfg.root.name.clone(), root_set);
    Ok(view)
}

fn tagged_regions(cell: &CellConfig) -> BTreeSet<(String, MemoryRegion)> {
    cell.regions
        .iter()
        .map(|r| (cell.name.clone(), r.clone()))
        .collect()
}

fn tagged_irqs(cell: &CellConfig) -> BTreeSet<(String, u32)> {
    cell.irqs.iter().map(|&v| (cell.name.clone(), v)).collect()
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

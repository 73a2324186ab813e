//! Generator parameters: the architecture record, its validation, derived
//! quantities, first-order pipelining proxies and the `KEY=value` parameter
//! header consumed by the mapper and harness.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Largest supported array side; bounded by the 9-bit block extents of the
/// binary instruction encoding.
pub const MAX_DIM: u64 = 256;

/// Largest addressable local row (24-bit row field in the encoding).
pub const MAX_LOCAL_ROWS: u64 = 1 << 24;

/// Register bits carried by one vertical inter-tile link: one input/weight
/// element plus one partial sum.
pub const PIPE_LINK_BITS: u64 = 40;

/// Area of one pipeline register bit, in units of one int8 MAC PE.
pub const REG_BIT_AREA: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Dataflow {
    WS,
    OS,
}

impl fmt::Display for Dataflow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dataflow::WS => f.write_str("WS"),
            Dataflow::OS => f.write_str("OS"),
        }
    }
}

impl std::str::FromStr for Dataflow {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "WS" | "ws" => Ok(Dataflow::WS),
            "OS" | "os" => Ok(Dataflow::OS),
            other => Err(format!("unknown dataflow `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HostKind {
    InOrder,
    OutOfOrder,
}

/// The generator parameter record. Field names double as JSON keys and, in
/// upper case, as header keys.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub mesh_rows: u32,
    pub mesh_cols: u32,
    pub tile_rows: u32,
    pub tile_cols: u32,
    pub dataflows: BTreeSet<Dataflow>,
    pub input_bits: u32,
    pub acc_bits: u32,
    pub scratchpad_bytes: u64,
    pub scratchpad_banks: u32,
    pub accumulator_bytes: u64,
    pub has_im2col: bool,
    pub has_pool: bool,
    pub has_transpose: bool,
    pub dma_bus_bytes: u32,
    pub tlb_private_entries: u32,
    pub tlb_shared_entries: u32,
    pub tlb_shared_ways: u32,
    pub tlb_private_hit_cycles: u32,
    pub tlb_shared_hit_cycles: u32,
    pub has_filter_regs: bool,
    pub ptw_latency_cycles: u32,
    pub page_bytes: u64,
    pub l2_bytes: u64,
    pub l2_ways: u32,
    pub l2_line_bytes: u32,
    pub l2_hit_cycles: u32,
    pub dram_latency_cycles: u32,
    pub dram_bytes_per_cycle: u32,
    pub host_kind: HostKind,
    pub num_cores: u32,
    /// ReLU6 clamps to `6 << relu6_shift` in the accumulator domain.
    pub relu6_shift: u32,
}

impl Default for ArchConfig {
    /// The edge configuration: 16x16 array of single-PE tiles, 256 KiB
    /// scratchpad, 64 KiB accumulator, 1 MiB shared L2, in-order host.
    fn default() -> Self {
        ArchConfig {
            mesh_rows: 16,
            mesh_cols: 16,
            tile_rows: 1,
            tile_cols: 1,
            dataflows: [Dataflow::WS, Dataflow::OS].into_iter().collect(),
            input_bits: 8,
            acc_bits: 32,
            scratchpad_bytes: 256 * 1024,
            scratchpad_banks: 4,
            accumulator_bytes: 64 * 1024,
            has_im2col: true,
            has_pool: true,
            has_transpose: false,
            dma_bus_bytes: 16,
            tlb_private_entries: 4,
            tlb_shared_entries: 0,
            tlb_shared_ways: 4,
            tlb_private_hit_cycles: 2,
            tlb_shared_hit_cycles: 8,
            has_filter_regs: false,
            ptw_latency_cycles: 40,
            page_bytes: 4096,
            l2_bytes: 1024 * 1024,
            l2_ways: 8,
            l2_line_bytes: 64,
            l2_hit_cycles: 20,
            dram_latency_cycles: 100,
            dram_bytes_per_cycle: 16,
            host_kind: HostKind::InOrder,
            num_cores: 1,
            relu6_shift: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("array is not square: mesh_rows*tile_rows = {rows}, mesh_cols*tile_cols = {cols}")]
    NonSquareArray { rows: u64, cols: u64 },
    #[error("{field} = {capacity} is not divisible by {unit}")]
    IndivisibleCapacity { field: &'static str, capacity: u64, unit: u64 },
    #[error("dataflow set is empty")]
    EmptyDataflowSet,
    #[error("{field} must be non-zero")]
    ZeroDimension { field: &'static str },
    #[error("{field}: {reason}")]
    InvalidField { field: &'static str, reason: String },
}

/// Every invariant violation found in one config.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("invalid config: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
pub struct ConfigErrors(pub Vec<ConfigError>);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedParams {
    pub dim: u32,
    pub sp_rows: u32,
    pub acc_rows: u32,
    pub sp_bank_rows: u32,
    pub mac_chain_len: u32,
    pub pipe_stages: u32,
    pub pipe_reg_count: u64,
    pub l2_sets: u64,
}

/// A config whose invariants hold, together with its derived parameters.
/// Immutable; share it freely between simulations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidatedConfig {
    config: ArchConfig,
    derived: DerivedParams,
}

impl Deref for ValidatedConfig {
    type Target = ArchConfig;
    fn deref(&self) -> &ArchConfig {
        &self.config
    }
}

impl ValidatedConfig {
    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn derived(&self) -> &DerivedParams {
        &self.derived
    }

    pub fn dim(&self) -> usize {
        self.derived.dim as usize
    }

    pub fn into_inner(self) -> ArchConfig {
        self.config
    }
}

pub fn validate(config: ArchConfig) -> Result<ValidatedConfig, ConfigErrors> {
    let mut errs = Vec::new();
    let c = &config;

    for (field, v) in [
        ("mesh_rows", c.mesh_rows as u64),
        ("mesh_cols", c.mesh_cols as u64),
        ("tile_rows", c.tile_rows as u64),
        ("tile_cols", c.tile_cols as u64),
        ("scratchpad_bytes", c.scratchpad_bytes),
        ("scratchpad_banks", c.scratchpad_banks as u64),
        ("accumulator_bytes", c.accumulator_bytes),
        ("dma_bus_bytes", c.dma_bus_bytes as u64),
        ("tlb_private_entries", c.tlb_private_entries as u64),
        ("tlb_shared_ways", c.tlb_shared_ways as u64),
        ("page_bytes", c.page_bytes),
        ("l2_bytes", c.l2_bytes),
        ("l2_ways", c.l2_ways as u64),
        ("l2_line_bytes", c.l2_line_bytes as u64),
        ("dram_bytes_per_cycle", c.dram_bytes_per_cycle as u64),
        ("num_cores", c.num_cores as u64),
    ] {
        if v == 0 {
            errs.push(ConfigError::ZeroDimension { field });
        }
    }

    if c.dataflows.is_empty() {
        errs.push(ConfigError::EmptyDataflowSet);
    }
    if c.input_bits != 8 {
        errs.push(ConfigError::InvalidField {
            field: "input_bits",
            reason: format!("only 8-bit inputs are supported, got {}", c.input_bits),
        });
    }
    if c.acc_bits != 32 {
        errs.push(ConfigError::InvalidField {
            field: "acc_bits",
            reason: format!("only 32-bit accumulators are supported, got {}", c.acc_bits),
        });
    }
    if c.scratchpad_banks != 0 && !c.scratchpad_banks.is_power_of_two() {
        errs.push(ConfigError::InvalidField {
            field: "scratchpad_banks",
            reason: format!("{} is not a power of two", c.scratchpad_banks),
        });
    }
    for (field, v) in [("page_bytes", c.page_bytes), ("l2_line_bytes", c.l2_line_bytes as u64)] {
        if v != 0 && !v.is_power_of_two() {
            errs.push(ConfigError::InvalidField { field, reason: format!("{v} is not a power of two") });
        }
    }
    if c.relu6_shift > 24 {
        errs.push(ConfigError::InvalidField { field: "relu6_shift", reason: format!("{} exceeds 24", c.relu6_shift) });
    }
    if c.tlb_shared_ways != 0 && !c.tlb_shared_entries.is_multiple_of(c.tlb_shared_ways) {
        errs.push(ConfigError::IndivisibleCapacity {
            field: "tlb_shared_entries",
            capacity: c.tlb_shared_entries as u64,
            unit: c.tlb_shared_ways as u64,
        });
    }

    let rows_dim = (c.mesh_rows as u64) * (c.tile_rows as u64);
    let cols_dim = (c.mesh_cols as u64) * (c.tile_cols as u64);
    let mut dim = None;
    if rows_dim != 0 && cols_dim != 0 {
        if rows_dim != cols_dim {
            errs.push(ConfigError::NonSquareArray { rows: rows_dim, cols: cols_dim });
        } else if rows_dim > MAX_DIM {
            errs.push(ConfigError::InvalidField {
                field: "mesh_rows",
                reason: format!("array dimension {rows_dim} exceeds {MAX_DIM}"),
            });
        } else {
            dim = Some(rows_dim);
        }
    }

    let mut sp_rows = 0;
    let mut acc_rows = 0;
    if let Some(dim) = dim {
        let sp_row_bytes = dim * (c.input_bits as u64 / 8).max(1);
        let acc_row_bytes = dim * (c.acc_bits as u64 / 8).max(1);
        if c.scratchpad_bytes != 0 && c.scratchpad_banks != 0 {
            let unit = sp_row_bytes * c.scratchpad_banks as u64;
            if !c.scratchpad_bytes.is_multiple_of(unit) {
                errs.push(ConfigError::IndivisibleCapacity {
                    field: "scratchpad_bytes",
                    capacity: c.scratchpad_bytes,
                    unit,
                });
            } else {
                sp_rows = c.scratchpad_bytes / sp_row_bytes;
            }
        }
        if c.accumulator_bytes != 0 {
            if !c.accumulator_bytes.is_multiple_of(acc_row_bytes) {
                errs.push(ConfigError::IndivisibleCapacity {
                    field: "accumulator_bytes",
                    capacity: c.accumulator_bytes,
                    unit: acc_row_bytes,
                });
            } else {
                acc_rows = c.accumulator_bytes / acc_row_bytes;
            }
        }
        for (field, rows) in [("scratchpad_bytes", sp_rows), ("accumulator_bytes", acc_rows)] {
            if rows > MAX_LOCAL_ROWS {
                errs.push(ConfigError::InvalidField {
                    field,
                    reason: format!("{rows} rows exceed the addressable {MAX_LOCAL_ROWS}"),
                });
            }
        }
    }

    let mut l2_sets = 0;
    if c.l2_bytes != 0 && c.l2_ways != 0 && c.l2_line_bytes != 0 {
        let unit = c.l2_ways as u64 * c.l2_line_bytes as u64;
        if !c.l2_bytes.is_multiple_of(unit) {
            errs.push(ConfigError::IndivisibleCapacity { field: "l2_bytes", capacity: c.l2_bytes, unit });
        } else {
            l2_sets = c.l2_bytes / unit;
        }
    }
    if c.page_bytes != 0 && c.l2_line_bytes != 0 && c.page_bytes < c.l2_line_bytes as u64 {
        errs.push(ConfigError::InvalidField {
            field: "page_bytes",
            reason: format!("page of {} bytes is smaller than an L2 line", c.page_bytes),
        });
    }

    if !errs.is_empty() {
        return Err(ConfigErrors(errs));
    }
    let dim = dim.expect("dimension checked above");
    let derived = DerivedParams {
        dim: dim as u32,
        sp_rows: sp_rows as u32,
        acc_rows: acc_rows as u32,
        sp_bank_rows: (sp_rows / c.scratchpad_banks as u64) as u32,
        mac_chain_len: c.tile_rows,
        pipe_stages: c.mesh_rows - 1,
        pipe_reg_count: (c.mesh_rows as u64 - 1) * c.mesh_cols as u64 * c.tile_cols as u64 * PIPE_LINK_BITS,
        l2_sets,
    };
    Ok(ValidatedConfig { config, derived })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub mac_chain_len: u32,
    pub pipe_reg_count: u64,
    /// Maximum frequency relative to a fully pipelined array (`1 / mac_chain_len`).
    pub rel_freq: f64,
    /// Area relative to a purely combinational array with the same PE count.
    pub rel_area: f64,
}

/// First-order frequency and area proxies. These are linear-chain and
/// register-count models, not synthesis results.
pub fn pipeline_stats(config: &ValidatedConfig) -> PipelineStats {
    let d = config.derived();
    let pes = (d.dim as f64) * (d.dim as f64);
    PipelineStats {
        mac_chain_len: d.mac_chain_len,
        pipe_reg_count: d.pipe_reg_count,
        rel_freq: 1.0 / d.mac_chain_len as f64,
        rel_area: (pes + REG_BIT_AREA * d.pipe_reg_count as f64) / pes,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum HeaderError {
    #[error("line {line}: expected KEY=value")]
    Malformed { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {reason}")]
    BadValue { line: usize, key: String, reason: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("missing key `{0}`")]
    MissingKey(String),
    #[error("derived key `{key}` = {found} does not match recomputed {expected}")]
    DerivedMismatch { key: String, found: String, expected: String },
    #[error(transparent)]
    Invalid(#[from] ConfigErrors),
}

fn config_fields(config: &ArchConfig) -> Map<String, Value> {
    match serde_json::to_value(config).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!("ArchConfig serializes to an object"),
    }
}

fn derived_fields(d: &DerivedParams) -> Vec<(String, String)> {
    vec![
        ("ACC_ROWS".into(), d.acc_rows.to_string()),
        ("DIM".into(), d.dim.to_string()),
        ("L2_SETS".into(), d.l2_sets.to_string()),
        ("MAC_CHAIN_LEN".into(), d.mac_chain_len.to_string()),
        ("PIPE_REG_COUNT".into(), d.pipe_reg_count.to_string()),
        ("PIPE_STAGES".into(), d.pipe_stages.to_string()),
        ("SP_BANK_ROWS".into(), d.sp_bank_rows.to_string()),
        ("SP_ROWS".into(), d.sp_rows.to_string()),
    ]
}

fn render_value(v: &Value) -> String {
    match v {
        Value::Array(items) => items.iter().map(render_value).collect::<Vec<_>>().join(","),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Emit the parameter header: one `KEY=value` line per config field and
/// derived parameter, keys sorted lexicographically.
pub fn emit_header(config: &ValidatedConfig) -> String {
    let mut lines: Vec<(String, String)> =
        config_fields(config.config()).iter().map(|(k, v)| (k.to_uppercase(), render_value(v))).collect();
    lines.extend(derived_fields(config.derived()));
    lines.sort();
    let mut out = String::from("# spatialgen accelerator parameters\n");
    for (k, v) in lines {
        out.push_str(&k);
        out.push('=');
        out.push_str(&v);
        out.push('\n');
    }
    out
}

fn parse_value(template: &Value, raw: &str) -> Result<Value, String> {
    match template {
        Value::Bool(_) => match raw {
            "true" | "1" => Ok(Value::Bool(true)),
            "false" | "0" => Ok(Value::Bool(false)),
            _ => Err(format!("`{raw}` is not a boolean")),
        },
        Value::Number(_) => raw.parse::<u64>().map(|n| Value::Number(n.into())).map_err(|e| e.to_string()),
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Array(_) => Ok(Value::Array(
            raw.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| Value::String(s.to_string())).collect(),
        )),
        _ => Err("unsupported field type".into()),
    }
}

/// Parse a header produced by [`emit_header`]. Derived keys are optional but,
/// when present, must agree with the values recomputed from the config.
pub fn parse_header(text: &str) -> Result<ArchConfig, HeaderError> {
    let template = config_fields(&ArchConfig::default());
    let derived_keys: BTreeSet<String> = derived_fields(&DerivedParams {
        dim: 0,
        sp_rows: 0,
        acc_rows: 0,
        sp_bank_rows: 0,
        mac_chain_len: 0,
        pipe_stages: 0,
        pipe_reg_count: 0,
        l2_sets: 0,
    })
    .into_iter()
    .map(|(k, _)| k)
    .collect();

    let mut fields = Map::new();
    let mut derived_seen = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(HeaderError::Malformed { line: line_no })?;
        let key = key.trim();
        let value = value.trim();
        if derived_keys.contains(key) {
            derived_seen.push((key.to_string(), value.to_string()));
            continue;
        }
        let field = key.to_lowercase();
        let Some(tpl) = template.get(&field) else {
            return Err(HeaderError::UnknownKey { line: line_no, key: key.to_string() });
        };
        let parsed = parse_value(tpl, value).map_err(|reason| HeaderError::BadValue {
            line: line_no,
            key: key.to_string(),
            reason,
        })?;
        if fields.insert(field, parsed).is_some() {
            return Err(HeaderError::DuplicateKey { line: line_no, key: key.to_string() });
        }
    }
    for k in template.keys() {
        if !fields.contains_key(k) {
            return Err(HeaderError::MissingKey(k.to_uppercase()));
        }
    }
    let config: ArchConfig = serde_json::from_value(Value::Object(fields)).map_err(|e| HeaderError::BadValue {
        line: 0,
        key: "<config>".into(),
        reason: e.to_string(),
    })?;
    if !derived_seen.is_empty() {
        let validated = validate(config.clone())?;
        let expected: std::collections::BTreeMap<String, String> =
            derived_fields(validated.derived()).into_iter().collect();
        for (k, found) in derived_seen {
            let exp = &expected[&k];
            if *exp != found {
                return Err(HeaderError::DerivedMismatch { key: k, found, expected: exp.clone() });
            }
        }
    }
    Ok(config)
}

#[derive(Debug, Error)]
pub enum OverrideError {
    #[error("override `{0}` is not of the form key=value")]
    Malformed(String),
    #[error("unknown config field `{0}`")]
    UnknownField(String),
    #[error("bad value for `{field}`: {reason}")]
    BadValue { field: String, reason: String },
}

impl ArchConfig {
    /// Load from a JSON document mirroring the field names. Missing fields
    /// take their default values.
    pub fn from_json(text: &str) -> Result<ArchConfig, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Set one field from its textual `key=value` form.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), OverrideError> {
        let (key, raw) = kv.split_once('=').ok_or_else(|| OverrideError::Malformed(kv.to_string()))?;
        let key = key.trim().to_lowercase();
        let mut fields = config_fields(self);
        let tpl = fields.get(&key).ok_or_else(|| OverrideError::UnknownField(key.clone()))?;
        let value =
            parse_value(tpl, raw.trim()).map_err(|reason| OverrideError::BadValue { field: key.clone(), reason })?;
        fields.insert(key.clone(), value);
        *self = serde_json::from_value(Value::Object(fields))
            .map_err(|e| OverrideError::BadValue { field: key, reason: e.to_string() })?;
        Ok(())
    }

    /// Stable hex digest of the canonical JSON form.
    pub fn hash_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry(mr: u32, mc: u32, tr: u32, tc: u32) -> ArchConfig {
        ArchConfig { mesh_rows: mr, mesh_cols: mc, tile_rows: tr, tile_cols: tc, ..ArchConfig::default() }
    }

    #[test]
    fn edge_config_row_counts() {
        let cfg = ArchConfig { scratchpad_bytes: 256 * 1024, accumulator_bytes: 64 * 1024, ..ArchConfig::default() };
        let v = validate(cfg).unwrap();
        assert_eq!(v.derived().dim, 16);
        // 256 KiB / 16 B per row, 64 KiB / 64 B per row
        assert_eq!(v.derived().sp_rows, 16384);
        assert_eq!(v.derived().acc_rows, 1024);
    }

    #[test]
    fn degenerate_single_pe() {
        let cfg = ArchConfig { scratchpad_bytes: 1, scratchpad_banks: 1, accumulator_bytes: 4, ..geometry(1, 1, 1, 1) };
        let v = validate(cfg).unwrap();
        assert_eq!(v.derived().dim, 1);
        assert_eq!(v.derived().mac_chain_len, 1);
        assert_eq!(v.derived().pipe_stages, 0);
        assert_eq!(v.derived().sp_rows, 1);
    }

    #[test]
    fn non_square_rejected() {
        let err = validate(geometry(3, 4, 2, 2)).unwrap_err();
        assert!(err.0.contains(&ConfigError::NonSquareArray { rows: 6, cols: 8 }));
    }

    #[test]
    fn every_violation_is_listed() {
        let cfg = ArchConfig { mesh_rows: 0, dataflows: BTreeSet::new(), l2_bytes: 1000, ..ArchConfig::default() };
        let err = validate(cfg).unwrap_err();
        assert!(err.0.contains(&ConfigError::ZeroDimension { field: "mesh_rows" }));
        assert!(err.0.contains(&ConfigError::EmptyDataflowSet));
        assert!(err.0.iter().any(|e| matches!(e, ConfigError::IndivisibleCapacity { field: "l2_bytes", .. })));
    }

    #[test]
    fn accumulator_must_hold_whole_rows() {
        let err = validate(ArchConfig { accumulator_bytes: 100, ..ArchConfig::default() }).unwrap_err();
        assert!(err.0.iter().any(|e| matches!(e, ConfigError::IndivisibleCapacity { field: "accumulator_bytes", .. })));
    }

    #[test]
    fn pipeline_extremes() {
        let pipelined = validate(geometry(16, 16, 1, 1)).unwrap();
        let comb = validate(geometry(1, 1, 16, 16)).unwrap();
        let p = pipeline_stats(&pipelined);
        let c = pipeline_stats(&comb);
        assert_eq!(p.mac_chain_len, 1);
        assert_eq!(p.rel_freq, 1.0);
        assert_eq!(c.mac_chain_len, 16);
        assert_eq!(c.pipe_reg_count, 0);
        assert_eq!(c.rel_area, 1.0);
        assert_eq!(p.rel_freq / c.rel_freq, 16.0);
        assert!(p.rel_area > c.rel_area);
    }

    #[test]
    fn header_contains_dim_and_is_sorted() {
        let v = validate(ArchConfig::default()).unwrap();
        let h = emit_header(&v);
        assert!(h.lines().any(|l| l == "DIM=16"));
        let keys: Vec<&str> = h.lines().filter(|l| !l.starts_with('#')).map(|l| l.split('=').next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn header_diff_on_single_flag() {
        let a = validate(ArchConfig::default()).unwrap();
        let b =
            validate(ArchConfig { has_im2col: !ArchConfig::default().has_im2col, ..ArchConfig::default() }).unwrap();
        let (ha, hb) = (emit_header(&a), emit_header(&b));
        let diff: Vec<_> = ha.lines().zip(hb.lines()).filter(|(x, y)| x != y).collect();
        assert_eq!(ha.lines().count(), hb.lines().count());
        assert_eq!(diff.len(), 1);
        assert!(diff[0].0.starts_with("HAS_IM2COL="));
    }

    #[test]
    fn header_rejects_tampered_derived_key() {
        let v = validate(ArchConfig::default()).unwrap();
        let h = emit_header(&v).replace("DIM=16", "DIM=8");
        assert!(matches!(parse_header(&h), Err(HeaderError::DerivedMismatch { .. })));
    }

    #[test]
    fn header_rejects_unknown_and_missing_keys() {
        assert!(matches!(parse_header("BOGUS=1\n"), Err(HeaderError::UnknownKey { line: 1, .. })));
        assert!(matches!(parse_header("MESH_ROWS=4\n"), Err(HeaderError::MissingKey(_))));
    }

    #[test]
    fn override_sets_field_and_rejects_unknown() {
        let mut c = ArchConfig::default();
        c.apply_override("tlb_private_entries=16").unwrap();
        c.apply_override("has_filter_regs=true").unwrap();
        c.apply_override("dataflows=OS").unwrap();
        assert_eq!(c.tlb_private_entries, 16);
        assert!(c.has_filter_regs);
        assert_eq!(c.dataflows.len(), 1);
        assert!(matches!(c.apply_override("nope=1"), Err(OverrideError::UnknownField(_))));
        assert!(matches!(c.apply_override("num_cores=two"), Err(OverrideError::BadValue { .. })));
    }
}

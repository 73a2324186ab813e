//! Experiment recipes: sweeps over configurations, each point an independent
//! simulation, emitted as a CSV table plus a JSON summary.
//!
//! Every CSV starts with `#` lines describing the run (schema version,
//! recipe, seed, config hash, workload, batch), then a column header. The
//! JSON summary carries the full [`RecipeSpec`], so `replay` can re-run it
//! and compare the regenerated files byte for byte.
//!
//! Sweep points run on a rayon pool capped by `SPATIALGEN_THREADS`; results
//! are kept in the canonical point order regardless of completion order.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{
    pipeline_stats, validate, ArchConfig, ConfigErrors, Dataflow, HostKind, OverrideError, ValidatedConfig,
};
use crate::mapper::{Im2colPolicy, MapOptions};
use crate::mem::{format_events, MemEvent};
use crate::program::KernelKind;
use crate::sim::host::{host_cost, HostKernel, HostModel};
use crate::sim::{DramImage, SimError, SimOptions, SimReport, Simulator, REPORT_SCHEMA_VERSION};
use crate::workload::{self, BuiltinParams, LayerDescriptor, NetworkDesc, WorkloadError, CORE_REGION_BYTES};

pub const CSV_SCHEMA_VERSION: u32 = 1;

/// Environment variable capping the sweep worker pool.
pub const THREADS_ENV: &str = "SPATIALGEN_THREADS";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigErrors),
    #[error(transparent)]
    Override(#[from] OverrideError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed report: {0}")]
    Report(String),
    #[error("replay of {file} differs: stored sha256 {stored}, regenerated {regenerated}")]
    ReplayMismatch { file: String, stored: String, regenerated: String },
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecipeKind {
    TlbSweep,
    MemPartition,
    DataflowCompare,
    PipelineCompare,
    E2e,
}

impl RecipeKind {
    pub const ALL: [RecipeKind; 5] = [
        RecipeKind::TlbSweep,
        RecipeKind::MemPartition,
        RecipeKind::DataflowCompare,
        RecipeKind::PipelineCompare,
        RecipeKind::E2e,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RecipeKind::TlbSweep => "tlb-sweep",
            RecipeKind::MemPartition => "mem-partition",
            RecipeKind::DataflowCompare => "dataflow-compare",
            RecipeKind::PipelineCompare => "pipeline-compare",
            RecipeKind::E2e => "e2e",
        }
    }
}

impl fmt::Display for RecipeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RecipeKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RecipeKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| format!("unknown recipe `{s}`"))
    }
}

/// Everything needed to reproduce a recipe run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecipeSpec {
    pub recipe: RecipeKind,
    /// Base configuration before the recipe's own sweep axes are applied.
    pub config: ArchConfig,
    pub overrides: Vec<String>,
    pub seed: u64,
    /// Builtin model name for network recipes.
    pub model: String,
    pub params: BuiltinParams,
    /// Keep only the first `prefix` layers.
    pub prefix: Option<usize>,
    /// Execute instruction semantics (slower; timing is unaffected).
    pub functional: bool,
}

impl RecipeSpec {
    /// Default workload of each recipe.
    pub fn new(recipe: RecipeKind) -> RecipeSpec {
        let cnn = |hw| BuiltinParams { input_hw: hw, ..BuiltinParams::default() };
        let (model, params, prefix) = match recipe {
            RecipeKind::TlbSweep => ("resnet50-like", cnn(56), Some(10)),
            RecipeKind::MemPartition => ("resnet50-like", cnn(112), None),
            RecipeKind::E2e => ("resnet50-like", cnn(56), None),
            RecipeKind::DataflowCompare | RecipeKind::PipelineCompare => ("matmul-suite", cnn(56), None),
        };
        RecipeSpec {
            recipe,
            config: ArchConfig::default(),
            overrides: Vec::new(),
            seed: 0,
            model: model.to_string(),
            params,
            prefix,
            functional: false,
        }
    }

    /// Apply `key=value` overrides to the base config, recording them.
    pub fn with_overrides(mut self, overrides: &[String]) -> Result<RecipeSpec, HarnessError> {
        for o in overrides {
            self.config.apply_override(o)?;
            self.overrides.push(o.clone());
        }
        Ok(self)
    }

    pub fn network(&self) -> Result<NetworkDesc, HarnessError> {
        let net = workload::builtin_network(&self.model, &self.params)?;
        Ok(match self.prefix {
            Some(n) => net.prefix(n),
            None => net,
        })
    }
}

/// A CSV/JSON table with a fixed column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    fn new(columns: &[&str]) -> Table {
        Table { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<Value>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Cell `name` of row `r`.
    pub fn get(&self, r: usize, name: &str) -> Option<&Value> {
        self.rows.get(r)?.get(self.column(name)?)
    }

    /// Index of the first row whose cells match all `(column, value)` pairs.
    pub fn find(&self, keys: &[(&str, Value)]) -> Option<usize> {
        self.rows.iter().position(|row| keys.iter().all(|(k, v)| self.column(k).is_some_and(|c| &row[c] == v)))
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecipeOutput {
    pub spec: RecipeSpec,
    pub table: Table,
    pub csv: String,
    pub json: String,
    /// Memory events of the first sweep point, when tracing.
    pub trace: Option<String>,
}

impl RecipeOutput {
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| HarnessError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let name = self.spec.recipe.name();
        let mut written = Vec::new();
        for (ext, text) in [("csv", Some(&self.csv)), ("json", Some(&self.json)), ("trace.csv", self.trace.as_ref())] {
            if let Some(text) = text {
                let path = dir.join(format!("{name}.{ext}"));
                std::fs::write(&path, text).map_err(io(&path))?;
                written.push(path);
            }
        }
        Ok(written)
    }
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Run `f` over `items` on the capped worker pool, preserving order.
pub fn par_map<T, R, F>(items: &[T], f: F) -> Result<Vec<R>, HarnessError>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R, HarnessError> + Sync + Send,
{
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0) {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| HarnessError::Pool(e.to_string()))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

/// One simulated SoC running `net` on every core.
#[derive(Clone, Debug)]
pub struct NetRun {
    pub report: SimReport,
    /// Per core, per layer outputs (functional runs only).
    pub outputs: Vec<Vec<Vec<i8>>>,
    pub events: Vec<MemEvent>,
}

/// Each core gets its own copy of the weights and an input drawn with seed
/// `seed + core`, in a private address region.
pub fn run_network(
    cfg: &ValidatedConfig,
    net: &NetworkDesc,
    seed: u64,
    cores: usize,
    opts: &MapOptions,
    sim_opts: SimOptions,
) -> Result<NetRun, HarnessError> {
    let weights = workload::gen_weights(net, seed);
    let mut dram = DramImage::new();
    let mut programs = Vec::with_capacity(cores);
    let mut layouts = Vec::with_capacity(cores);
    for core in 0..cores {
        let (p, layout) = workload::compile(net, cfg, opts, (core as u64 + 1) * CORE_REGION_BYTES)?;
        if sim_opts.functional {
            workload::load(&mut dram, &layout, &weights, &workload::gen_input(net.input, seed + core as u64));
        }
        programs.push(p);
        layouts.push(layout);
    }
    let pt = workload::page_table(&layouts.iter().collect::<Vec<_>>());
    let mut sim = Simulator::new(cfg.clone(), pt).with_options(sim_opts).with_dram(dram);
    let report = sim.run(&programs)?;
    let outputs = if sim_opts.functional {
        layouts.iter().map(|l| workload::read_outputs(sim.dram(), l)).collect()
    } else {
        Vec::new()
    };
    Ok(NetRun { report, outputs, events: sim.events().to_vec() })
}

/// Host cycles to run the whole network on the CPU alone.
pub fn cpu_only_cycles(net: &NetworkDesc, host: &HostModel) -> Result<u64, HarnessError> {
    let shapes = net.validate()?;
    let mut total = 0;
    for (i, l) in net.layers.iter().enumerate() {
        let cost = |k, s: &[u64]| host_cost(k, s, host).map_err(SimError::from);
        total += match l {
            LayerDescriptor::Conv { shape, .. } => {
                let o = shapes[i];
                let rows = (o.n * o.h * o.w) as u64;
                let im2col = if shape.kh * shape.kw == 1 && shape.stride == 1 {
                    0
                } else {
                    cost(HostKernel::Im2col, &[rows, shape.depth() as u64])?
                };
                im2col + cost(HostKernel::Matmul, &[rows, shape.k as u64, shape.depth() as u64])?
            }
            LayerDescriptor::Matmul { m, n, k, softmax, .. } => {
                let sm = match softmax {
                    Some(s) => cost(HostKernel::Softmax, s)?,
                    None => 0,
                };
                sm + cost(HostKernel::Matmul, &[*m as u64, *n as u64, *k as u64])?
            }
            LayerDescriptor::ResidualAdd { .. } => cost(HostKernel::ResidualAdd, &[shapes[i].elems() as u64])?,
            LayerDescriptor::MaxPool { shape, .. } => {
                cost(HostKernel::MaxPool, &[shapes[i].elems() as u64, (shape.kh * shape.kw) as u64])?
            }
        };
    }
    Ok(total)
}

fn sim_opts(spec: &RecipeSpec, trace: bool) -> SimOptions {
    SimOptions { functional: spec.functional, trace }
}

fn outputs_hash(outputs: &[Vec<Vec<i8>>]) -> Value {
    if outputs.is_empty() {
        return Value::Null;
    }
    let mut h = Sha256::new();
    for core in outputs {
        for layer in core {
            h.update(layer.iter().map(|&v| v as u8).collect::<Vec<u8>>());
        }
    }
    Value::from(hex::encode(h.finalize())[..16].to_string())
}

fn ratio(num: u64, den: u64) -> Value {
    if den == 0 {
        return Value::Null;
    }
    json!((num as f64 / den as f64 * 1e6).round() / 1e6)
}

fn kind_cycles(r: &SimReport, k: KernelKind, cores: usize) -> u64 {
    r.kind_cycles(k) / cores.max(1) as u64
}

/// Named SoC partitionings: (name, scratchpad, accumulator, L2) bytes.
pub const PARTITIONS: [(&str, u64, u64, u64); 3] = [
    ("Base", 256 << 10, 256 << 10, 1 << 20),
    ("BigSP", 512 << 10, 512 << 10, 1 << 20),
    ("BigL2", 256 << 10, 256 << 10, 2 << 20),
];

pub const TLB_PRIVATE: [u32; 4] = [4, 8, 16, 32];
pub const TLB_SHARED: [u32; 4] = [0, 128, 256, 512];

/// Array geometries with 256 PEs: (mesh, tile) per side.
pub const PIPELINE_GEOMETRIES: [(u32, u32); 5] = [(16, 1), (8, 2), (4, 4), (2, 8), (1, 16)];

/// Run a recipe and render its outputs.
pub fn run_recipe(spec: &RecipeSpec, trace: bool) -> Result<RecipeOutput, HarnessError> {
    let base = validate(spec.config.clone())?;
    let (table, events) = match spec.recipe {
        RecipeKind::TlbSweep => tlb_sweep(spec, trace)?,
        RecipeKind::MemPartition => mem_partition(spec, trace)?,
        RecipeKind::DataflowCompare => dataflow_compare(spec, &base, trace)?,
        RecipeKind::PipelineCompare => pipeline_compare(spec, trace)?,
        RecipeKind::E2e => e2e(spec, trace)?,
    };
    let csv = render_csv(spec, &table)?;
    let summary = json!({
        "schema_version": CSV_SCHEMA_VERSION,
        "report_schema_version": REPORT_SCHEMA_VERSION,
        "recipe": spec.recipe.name(),
        "config_hash": spec.config.hash_hex(),
        "csv_sha256": sha256_hex(&csv),
        "spec": spec,
        "table": table,
    });
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    let trace = trace.then(|| format_events(&events));
    Ok(RecipeOutput { spec: spec.clone(), table, csv, json, trace })
}

fn render_csv(spec: &RecipeSpec, table: &Table) -> Result<String, HarnessError> {
    let mut out = String::new();
    out.push_str(&format!("# schema_version={CSV_SCHEMA_VERSION}\n"));
    out.push_str(&format!("# recipe={}\n", spec.recipe));
    out.push_str(&format!("# seed={}\n", spec.seed));
    out.push_str(&format!("# config_hash={}\n", spec.config.hash_hex()));
    let prefix = spec.prefix.map_or(String::new(), |p| format!(" prefix={p}"));
    out.push_str(&format!("# workload={} input_hw={}{prefix}\n", spec.model, spec.params.input_hw));
    out.push_str(&format!("# batch={}\n", spec.params.batch));
    if !spec.overrides.is_empty() {
        out.push_str(&format!("# overrides={}\n", spec.overrides.join(",")));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| HarnessError::Report(e.to_string());
    w.write_record(&table.columns).map_err(err)?;
    for row in &table.rows {
        w.write_record(row.iter().map(cell)).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Report(e.to_string()))?;
    out.push_str(&String::from_utf8(bytes).expect("csv is utf-8"));
    Ok(out)
}

fn tlb_sweep(spec: &RecipeSpec, trace: bool) -> Result<(Table, Vec<MemEvent>), HarnessError> {
    let net = spec.network()?;
    let mut points = Vec::new();
    for &p in &TLB_PRIVATE {
        for &s in &TLB_SHARED {
            for filter in [false, true] {
                points.push((p, s, filter));
            }
        }
    }
    let runs = par_map(&points, |&(p, s, filter)| {
        let cfg = validate(ArchConfig {
            tlb_private_entries: p,
            tlb_shared_entries: s,
            has_filter_regs: filter,
            ..spec.config.clone()
        })?;
        let first = (p, s, filter) == points[0];
        run_network(&cfg, &net, spec.seed, 1, &MapOptions::default(), sim_opts(spec, trace && first))
    })?;
    let base = runs[0].report.total_cycles;
    let mut t = Table::new(&[
        "private_entries",
        "shared_entries",
        "filter",
        "total_cycles",
        "normalized_perf",
        "tlb_lookups",
        "tlb_walks",
        "tlb_miss_rate",
        "filter_hits",
        "private_hits",
        "shared_hits",
        "output_hash",
    ]);
    for (&(p, s, filter), run) in points.iter().zip(&runs) {
        let r = &run.report;
        let tlb = r.tlb().total();
        t.push(vec![
            json!(p),
            json!(s),
            json!(if filter { "on" } else { "off" }),
            json!(r.total_cycles),
            ratio(base, r.total_cycles),
            json!(tlb.lookups),
            json!(tlb.walks),
            ratio(tlb.lookups - tlb.filter_hits - tlb.private_hits, tlb.lookups),
            json!(tlb.filter_hits),
            json!(tlb.private_hits),
            json!(tlb.shared_hits),
            outputs_hash(&run.outputs),
        ]);
    }
    let events = runs.into_iter().next().map(|r| r.events).unwrap_or_default();
    Ok((t, events))
}

fn mem_partition(spec: &RecipeSpec, trace: bool) -> Result<(Table, Vec<MemEvent>), HarnessError> {
    let net = spec.network()?;
    let mut points = Vec::new();
    for cores in [1usize, 2] {
        for (pi, _) in PARTITIONS.iter().enumerate() {
            points.push((cores, pi));
        }
    }
    let runs = par_map(&points, |&(cores, pi)| {
        let (_, sp, acc, l2) = PARTITIONS[pi];
        let cfg = validate(ArchConfig {
            scratchpad_bytes: sp,
            accumulator_bytes: acc,
            l2_bytes: l2,
            num_cores: cores as u32,
            ..spec.config.clone()
        })?;
        run_network(
            &cfg,
            &net,
            spec.seed,
            cores,
            &MapOptions::default(),
            sim_opts(spec, trace && (cores, pi) == points[0]),
        )
    })?;
    let mut t = Table::new(&[
        "config",
        "cores",
        "scratchpad_bytes",
        "accumulator_bytes",
        "l2_bytes",
        "total_cycles",
        "normalized_perf",
        "conv_cycles",
        "matmul_cycles",
        "residual_cycles",
        "pool_cycles",
        "l2_miss_rate",
        "dram_bytes",
        "output_hash",
    ]);
    for (&(cores, pi), run) in points.iter().zip(&runs) {
        let (name, sp, acc, l2) = PARTITIONS[pi];
        let r = &run.report;
        let base_idx = points.iter().position(|&(c, p)| c == cores && p == 0).expect("base point exists");
        let base = runs[base_idx].report.total_cycles;
        t.push(vec![
            json!(name),
            json!(cores),
            json!(sp),
            json!(acc),
            json!(l2),
            json!(r.total_cycles),
            ratio(base, r.total_cycles),
            json!(kind_cycles(r, KernelKind::Conv, cores)),
            json!(kind_cycles(r, KernelKind::Matmul, cores)),
            json!(kind_cycles(r, KernelKind::Residual, cores)),
            json!(kind_cycles(r, KernelKind::Pool, cores)),
            ratio(r.l2.misses, r.l2.accesses),
            json!(r.dram_bytes),
            outputs_hash(&run.outputs),
        ]);
    }
    let events = runs.into_iter().next().map(|r| r.events).unwrap_or_default();
    Ok((t, events))
}

/// Kernels of the dataflow and pipeline comparisons: (name, network).
pub fn kernel_suite(p: &BuiltinParams) -> Vec<(String, NetworkDesc)> {
    use crate::func::Activation;
    use crate::workload::{ConvShape, TensorShape};
    let hw = p.input_hw.max(8);
    let mm = |m: usize, n: usize, k: usize| NetworkDesc {
        name: format!("matmul{m}x{n}x{k}"),
        input: TensorShape::new(m, 1, 1, k),
        layers: vec![LayerDescriptor::Matmul {
            name: "mm".into(),
            input: None,
            m,
            n,
            k,
            activation: Activation::None,
            scale: None,
            softmax: None,
        }],
    };
    let conv = ConvShape { n: 1, h: hw, w: hw, c: 64, k: 64, kh: 3, kw: 3, stride: 1, pad: 1 };
    vec![
        ("matmul128".into(), mm(128, 128, 128)),
        ("matmul64x256x512".into(), mm(64, 256, 512)),
        (
            format!("conv3x3_{hw}"),
            NetworkDesc {
                name: "conv".into(),
                input: conv.input(),
                layers: vec![LayerDescriptor::Conv {
                    name: "conv".into(),
                    input: None,
                    shape: conv,
                    activation: Activation::Relu,
                    scale: None,
                }],
            },
        ),
    ]
}

fn dataflow_compare(
    spec: &RecipeSpec,
    base: &ValidatedConfig,
    trace: bool,
) -> Result<(Table, Vec<MemEvent>), HarnessError> {
    let suite = kernel_suite(&spec.params);
    let mut points = Vec::new();
    for (ki, _) in suite.iter().enumerate() {
        for df in [Dataflow::WS, Dataflow::OS] {
            if base.dataflows.contains(&df) {
                points.push((ki, df));
            }
        }
    }
    let runs = par_map(&points, |&(ki, df)| {
        let opts = MapOptions { dataflow: df, ..MapOptions::default() };
        // Outputs are hashed to show both dataflows agree.
        let so = SimOptions { functional: true, trace: trace && (ki, df) == points[0] };
        run_network(base, &suite[ki].1, spec.seed, 1, &opts, so)
    })?;
    let mut t = Table::new(&[
        "kernel",
        "dataflow",
        "total_cycles",
        "macs",
        "macs_per_cycle",
        "array_utilization",
        "output_hash",
    ]);
    for (&(ki, df), run) in points.iter().zip(&runs) {
        let r = &run.report;
        t.push(vec![
            json!(suite[ki].0),
            json!(df.to_string()),
            json!(r.total_cycles),
            json!(r.macs),
            ratio(r.macs, r.total_cycles),
            json!((r.cores[0].utilization.array * 1e6).round() / 1e6),
            outputs_hash(&run.outputs),
        ]);
    }
    let events = runs.into_iter().next().map(|r| r.events).unwrap_or_default();
    Ok((t, events))
}

fn pipeline_compare(spec: &RecipeSpec, trace: bool) -> Result<(Table, Vec<MemEvent>), HarnessError> {
    let suite = kernel_suite(&spec.params);
    let net = &suite[0].1;
    let runs = par_map(&PIPELINE_GEOMETRIES, |&(mesh, tile)| {
        let cfg = validate(ArchConfig {
            mesh_rows: mesh,
            mesh_cols: mesh,
            tile_rows: tile,
            tile_cols: tile,
            ..spec.config.clone()
        })?;
        let run = run_network(
            &cfg,
            net,
            spec.seed,
            1,
            &MapOptions::default(),
            sim_opts(spec, trace && (mesh, tile) == PIPELINE_GEOMETRIES[0]),
        )?;
        Ok((cfg, run))
    })?;
    let mut t = Table::new(&[
        "mesh",
        "tile",
        "mac_chain_len",
        "pipe_stages",
        "pipe_reg_count",
        "rel_freq",
        "rel_area",
        "fill_cycles",
        "block_cycles",
        "total_cycles",
        "output_hash",
    ]);
    for (&(mesh, tile), (cfg, run)) in PIPELINE_GEOMETRIES.iter().zip(&runs) {
        let d = cfg.derived();
        let ps = pipeline_stats(cfg);
        let fill = d.pipe_stages as u64;
        // One full DIM-row block, in fully pipelined clock cycles.
        let block = (d.dim as u64 + fill) * d.mac_chain_len as u64 + crate::sim::ISSUE_OVERHEAD;
        t.push(vec![
            json!(mesh),
            json!(tile),
            json!(ps.mac_chain_len),
            json!(fill),
            json!(ps.pipe_reg_count),
            json!(ps.rel_freq),
            json!((ps.rel_area * 1e6).round() / 1e6),
            json!(fill),
            json!(block),
            json!(run.report.total_cycles),
            outputs_hash(&run.outputs),
        ]);
    }
    let events = runs.into_iter().next().map(|(_, r)| r.events).unwrap_or_default();
    Ok((t, events))
}

fn e2e(spec: &RecipeSpec, trace: bool) -> Result<(Table, Vec<MemEvent>), HarnessError> {
    let net = spec.network()?;
    let mut points = Vec::new();
    for host in [HostKind::InOrder, HostKind::OutOfOrder] {
        for im2col in [false, true] {
            points.push((host, im2col));
        }
    }
    let runs = par_map(&points, |&(host, im2col)| {
        let cfg = validate(ArchConfig { host_kind: host, has_im2col: im2col, ..spec.config.clone() })?;
        let opts = MapOptions { im2col: Im2colPolicy::Auto, ..MapOptions::default() };
        run_network(&cfg, &net, spec.seed, 1, &opts, sim_opts(spec, trace && (host, im2col) == points[0]))
    })?;
    let mut t = Table::new(&[
        "network",
        "host",
        "im2col_unit",
        "total_cycles",
        "host_cycles",
        "cpu_only_cycles",
        "speedup_vs_cpu",
        "output_hash",
    ]);
    for (&(host, im2col), run) in points.iter().zip(&runs) {
        let r = &run.report;
        let cpu = cpu_only_cycles(&net, &HostModel::new(host))?;
        t.push(vec![
            json!(net.name),
            json!(match host {
                HostKind::InOrder => "in-order",
                HostKind::OutOfOrder => "out-of-order",
            }),
            json!(if im2col { "on" } else { "off" }),
            json!(r.total_cycles),
            json!(r.cores[0].host_cycles),
            json!(cpu),
            ratio(cpu, r.total_cycles),
            outputs_hash(&run.outputs),
        ]);
    }
    let events = runs.into_iter().next().map(|r| r.events).unwrap_or_default();
    Ok((t, events))
}

/// Outcome of replaying a stored summary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplayResult {
    pub recipe: RecipeKind,
    pub json_sha256: String,
    pub csv_sha256: String,
}

/// Re-run the recipe recorded in `json_path` and require byte-identical JSON
/// and, when present next to it, CSV output.
pub fn replay(json_path: &Path) -> Result<ReplayResult, HarnessError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| HarnessError::Io { path, source }
    };
    let stored = std::fs::read_to_string(json_path).map_err(io(json_path))?;
    let summary: Value = serde_json::from_str(&stored).map_err(|e| HarnessError::Report(e.to_string()))?;
    let spec: RecipeSpec = serde_json::from_value(summary.get("spec").cloned().unwrap_or(Value::Null))
        .map_err(|e| HarnessError::Report(format!("spec: {e}")))?;
    let out = run_recipe(&spec, false)?;
    let mismatch = |file: &Path, stored: &str, regenerated: &str| HarnessError::ReplayMismatch {
        file: file.display().to_string(),
        stored: sha256_hex(stored),
        regenerated: sha256_hex(regenerated),
    };
    if out.json != stored {
        return Err(mismatch(json_path, &stored, &out.json));
    }
    let csv_path = json_path.with_extension("csv");
    if csv_path.exists() {
        let stored_csv = std::fs::read_to_string(&csv_path).map_err(io(&csv_path))?;
        if stored_csv != out.csv {
            return Err(mismatch(&csv_path, &stored_csv, &out.csv));
        }
    }
    Ok(ReplayResult { recipe: spec.recipe, json_sha256: sha256_hex(&out.json), csv_sha256: sha256_hex(&out.csv) })
}

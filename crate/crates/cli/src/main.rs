use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use spatialgen::config::{self, validate, ArchConfig, Dataflow};
use spatialgen::harness::{self, RecipeKind, RecipeSpec};
use spatialgen::mapper::{Im2colPolicy, MapOptions};
use spatialgen::mmu::{self, PageTable, TlbConfig};
use spatialgen::sim::SimOptions;
use spatialgen::workload::{self, BuiltinParams};

#[derive(Parser)]
#[command(name = "spatialgen", version, about = "Spatial DNN accelerator simulator and experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Private x shared TLB size x filter-register sweep.
    TlbSweep(RecipeArgs),
    /// Base / BigSP / BigL2 memory partitions on one and two cores.
    MemPartition(RecipeArgs),
    /// Weight- vs output-stationary on a small kernel suite.
    DataflowCompare(RecipeArgs),
    /// Pipelined vs combinational array geometries with 256 PEs.
    PipelineCompare(RecipeArgs),
    /// A builtin network across host CPU kinds, with and without the im2col unit.
    E2e(RecipeArgs),
    /// Re-run a stored recipe summary and require byte-identical output.
    Replay {
        /// The `<recipe>.json` summary; a sibling `<recipe>.csv` is compared too.
        summary: PathBuf,
    },
    /// Print the parameter header of a configuration.
    Header(ConfigArgs),
    /// Print the lowered program of a network as assembly.
    Lower(NetArgs),
    /// Simulate a network once and print the JSON report.
    Run(NetArgs),
    /// Replay a `cycle,kind,vaddr` TLB trace CSV and print the statistics.
    TlbTrace {
        trace: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON file with ArchConfig fields; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `field=value` applied after `--config`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ArchConfig> {
        let mut cfg = match &self.config {
            Some(p) => ArchConfig::from_json(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
            None => ArchConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct RecipeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for `<recipe>.csv` and `<recipe>.json`.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the memory event trace of the first sweep point.
    #[arg(long)]
    trace: bool,
    /// Builtin model (network recipes).
    #[arg(long)]
    model: Option<String>,
    /// Square CNN input resolution.
    #[arg(long)]
    input_hw: Option<usize>,
    /// Keep only the first N layers.
    #[arg(long)]
    prefix: Option<usize>,
    /// Execute instruction semantics and hash the outputs.
    #[arg(long)]
    functional: bool,
}

#[derive(Args)]
struct NetArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Network JSON file; overrides `--model`.
    #[arg(long)]
    network: Option<PathBuf>,
    #[arg(long, default_value = "resnet50-like")]
    model: String,
    #[arg(long, default_value_t = 224)]
    input_hw: usize,
    #[arg(long)]
    prefix: Option<usize>,
    #[arg(long, default_value = "ws")]
    dataflow: Dataflow,
    /// Force host-side im2col.
    #[arg(long)]
    host_im2col: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    cores: usize,
    /// Skip functional execution (timing only).
    #[arg(long)]
    timing_only: bool,
}

impl NetArgs {
    fn network(&self) -> Result<workload::NetworkDesc> {
        let net = match &self.network {
            Some(p) => workload::parse_network(&read(p)?).with_context(|| format!("in {}", p.display()))?,
            None => workload::builtin_network(
                &self.model,
                &BuiltinParams { input_hw: self.input_hw, ..Default::default() },
            )?,
        };
        Ok(match self.prefix {
            Some(n) => net.prefix(n),
            None => net,
        })
    }

    fn map_options(&self) -> MapOptions {
        MapOptions {
            dataflow: self.dataflow,
            im2col: if self.host_im2col { Im2colPolicy::Host } else { Im2colPolicy::Auto },
            ..Default::default()
        }
    }
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn read(p: &Path) -> Result<String> {
    std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn run_recipe(kind: RecipeKind, a: &RecipeArgs) -> Result<()> {
    let mut spec = RecipeSpec::new(kind);
    if let Some(p) = &a.config.config {
        spec.config = ArchConfig::from_json(&read(p)?).with_context(|| format!("parsing {}", p.display()))?;
    }
    let mut spec = spec.with_overrides(&a.config.overrides)?;
    validate(spec.config.clone())?;
    spec.seed = a.seed;
    spec.functional = a.functional;
    if let Some(m) = &a.model {
        spec.model = m.clone();
    }
    if let Some(hw) = a.input_hw {
        spec.params.input_hw = hw;
    }
    if a.prefix.is_some() {
        spec.prefix = a.prefix;
    }
    let out = harness::run_recipe(&spec, a.trace)?;
    for path in out.write(&a.out)? {
        eprintln!("wrote {}", path.display());
    }
    emit(&out.csv)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TlbSweep(a) => run_recipe(RecipeKind::TlbSweep, &a),
        Command::MemPartition(a) => run_recipe(RecipeKind::MemPartition, &a),
        Command::DataflowCompare(a) => run_recipe(RecipeKind::DataflowCompare, &a),
        Command::PipelineCompare(a) => run_recipe(RecipeKind::PipelineCompare, &a),
        Command::E2e(a) => run_recipe(RecipeKind::E2e, &a),
        Command::Replay { summary } => {
            let r = harness::replay(&summary)?;
            emit(&format!("{} replay identical: json sha256 {} csv sha256 {}\n", r.recipe, r.json_sha256, r.csv_sha256))
        }
        Command::Header(c) => emit(&config::emit_header(&validate(c.load()?)?)),
        Command::Lower(n) => {
            let cfg = validate(n.config.load()?)?;
            let (p, _) = workload::compile(&n.network()?, &cfg, &n.map_options(), workload::CORE_REGION_BYTES)?;
            emit(&p.to_asm())
        }
        Command::Run(n) => {
            let cfg = validate(n.config.load()?)?;
            if n.cores == 0 || n.cores > cfg.num_cores as usize {
                bail!("--cores {} outside 1..={} (set num_cores)", n.cores, cfg.num_cores);
            }
            let so = SimOptions { functional: !n.timing_only, trace: false };
            let r = harness::run_network(&cfg, &n.network()?, n.seed, n.cores, &n.map_options(), so)?;
            emit(&format!("{}\n", r.report.to_json()))
        }
        Command::TlbTrace { trace, config } => {
            let cfg = validate(config.load()?)?;
            let records = mmu::parse_trace(&read(&trace)?)?;
            let stats = mmu::replay_trace(&records, TlbConfig::from(cfg.config()), &PageTable::Identity)?;
            emit(&format!("{}\n", serde_json::to_string_pretty(&stats)?))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

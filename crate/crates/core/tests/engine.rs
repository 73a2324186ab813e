//! Simulator timing examples, mapper capacity/count oracles and run-level
//! invariants.

use std::collections::BTreeMap;

use spatialgen::config::{validate, ArchConfig, Dataflow};
use spatialgen::func::{Activation, Scale};
use spatialgen::harness::run_network;
use spatialgen::isa::{self, Block, Instruction, LocalAddr, LocalDims, MvinSource, Space};
use spatialgen::mapper::{self, ConvAddrs, Epilogue, Gemm, GemmAddrs, Im2colPolicy, MapOptions, Tiling};
use spatialgen::mmu::PageTable;
use spatialgen::program::{KernelKind, Program};
use spatialgen::sim::{run_single, DramImage, SimError, SimOptions, Simulator, ISSUE_OVERHEAD};
use spatialgen::workload::{self, BuiltinParams, ConvShape};

fn default_cfg() -> spatialgen::ValidatedConfig {
    validate(ArchConfig::default()).unwrap()
}

fn timing() -> SimOptions {
    SimOptions { functional: false, trace: false }
}

#[test]
fn empty_program_takes_no_cycles() {
    let mut sim = Simulator::new(default_cfg(), PageTable::Identity);
    let r = sim.run(&[Program::new()]).unwrap();
    assert_eq!(r.total_cycles, 0);
    assert_eq!(r.macs, 0);
}

#[test]
fn single_compute_pays_stream_plus_fill() {
    // Weights already latched by a preload that reads nothing: the compute
    // streams DIM rows through DIM-1 pipeline stages.
    let cfg = default_cfg();
    let blk = |row| Block::new(LocalAddr::sp(row), 16, 16);
    let out = Block::new(LocalAddr::acc(0), 16, 16);
    let preload = Instruction::Preload { data: Some(blk(16)), output: Some(out) };
    let compute = Instruction::ComputePreloaded { a: blk(0), bd: None };
    let solo = |instrs: Vec<Instruction>| {
        let p = Program::single("c", KernelKind::Matmul, instrs, 0);
        run_single(&cfg, &p, DramImage::new(), timing()).unwrap().0.total_cycles
    };
    let with_compute = solo(vec![preload, compute]);
    let preload_only = solo(vec![preload]);
    assert_eq!(with_compute - preload_only, 16 + 15 + ISSUE_OVERHEAD);
}

#[test]
fn combinational_tiles_stretch_compute() {
    // One 16x16 combinational tile: no pipeline stages, but each of the 16
    // streamed rows takes a 16-long MAC chain.
    let cfg = validate(ArchConfig { mesh_rows: 1, mesh_cols: 1, tile_rows: 16, tile_cols: 16, ..Default::default() })
        .unwrap();
    let blk = |row| Block::new(LocalAddr::sp(row), 16, 16);
    let preload = Instruction::Preload { data: Some(blk(16)), output: Some(Block::new(LocalAddr::acc(0), 16, 16)) };
    let compute = Instruction::ComputePreloaded { a: blk(0), bd: None };
    let run = |instrs| {
        run_single(&cfg, &Program::single("c", KernelKind::Matmul, instrs, 0), DramImage::new(), timing()).unwrap().0
    };
    let delta = run(vec![preload, compute]).total_cycles - run(vec![preload]).total_cycles;
    assert_eq!(delta, 16 * 16 + ISSUE_OVERHEAD);
}

#[test]
fn out_of_range_row_is_reported() {
    let cfg = default_cfg();
    let rows = cfg.derived().sp_rows;
    let p = Program::single(
        "bad",
        KernelKind::Matmul,
        vec![Instruction::Mvin {
            src: MvinSource::Dram { vaddr: 0 },
            dst: LocalAddr::sp(rows - 4),
            rows: 16,
            cols: 16,
        }],
        0,
    );
    let err = run_single(&cfg, &p, DramImage::new(), timing()).unwrap_err();
    assert!(matches!(err, SimError::AddressOutOfRange { core: 0, .. }), "{err:?}");
}

#[test]
fn unmapped_address_faults() {
    let cfg = default_cfg();
    let p = Program::single(
        "fault",
        KernelKind::Matmul,
        vec![Instruction::Mvin { src: MvinSource::Dram { vaddr: 0x5000 }, dst: LocalAddr::sp(0), rows: 1, cols: 16 }],
        0,
    );
    let mut sim = Simulator::new(cfg, PageTable::IdentityRanges(vec![(0, 0x1000)]));
    let err = sim.run(&[p]).unwrap_err();
    assert!(matches!(err, SimError::PageFault { core: 0, vaddr: 0x5000 }), "{err:?}");
}

#[test]
fn pick_tiling_examples() {
    let cfg = default_cfg();
    // 2 x (8x8 blocks of 256 B) fits 256 KiB; 8x8 int32 blocks fill 64 KiB.
    assert_eq!(mapper::pick_tiling(128, 128, 128, &cfg).unwrap(), Tiling::new(8, 8, 8));
    let tiny = validate(ArchConfig {
        mesh_rows: 1,
        mesh_cols: 1,
        scratchpad_bytes: 2,
        accumulator_bytes: 4,
        scratchpad_banks: 1,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(mapper::pick_tiling(5, 7, 9, &tiny).unwrap(), Tiling::new(1, 1, 1));
}

#[test]
fn pick_tiling_rejects_impossible_capacity() {
    let cfg = validate(ArchConfig { scratchpad_bytes: 256, scratchpad_banks: 1, ..Default::default() }).unwrap();
    assert!(matches!(mapper::pick_tiling(16, 16, 16, &cfg), Err(mapper::MapError::Infeasible(_))));
}

/// Replays the tile loops and counts what a lowering must emit: every
/// operand block once per resident tile, one preload and compute per block
/// product, one mvout per output block, and a load-config switch whenever
/// the next mvin uses a different row stride (A rows are `k` wide, B rows `n`).
fn count_oracle(m: usize, n: usize, k: usize, dim: usize, t: &Tiling, df: Dataflow) -> BTreeMap<&'static str, usize> {
    let (mb, nb, kb) = (m.div_ceil(dim), n.div_ceil(dim), k.div_ceil(dim));
    let (ti, tj, tk) = (t.tile_i as usize, t.tile_j as usize, t.tile_k as usize);
    let mut c: BTreeMap<&'static str, usize> = BTreeMap::new();
    *c.entry("config_ex").or_default() += 1;
    *c.entry("config_st").or_default() += 1;
    let mut cur = None;
    let mut mvin = |c: &mut BTreeMap<&'static str, usize>, which: char| {
        let stride = if which == 'a' { k } else { n };
        if cur != Some(stride) {
            *c.entry("config_ld").or_default() += 1;
            cur = Some(stride);
        }
        *c.entry("mvin").or_default() += 1;
    };
    let (mut res_a, mut res_b) = (None, None);
    let mut seen_a = std::collections::HashSet::new();
    let mut seen_b = std::collections::HashSet::new();
    for i0 in (0..mb).step_by(ti) {
        for j0 in (0..nb).step_by(tj) {
            for k0 in (0..kb).step_by(tk) {
                if res_a != Some((i0, k0)) {
                    seen_a.clear();
                    res_a = Some((i0, k0));
                }
                if res_b != Some((k0, j0)) {
                    seen_b.clear();
                    res_b = Some((k0, j0));
                }
                let (i1, j1, k1) = ((i0 + ti).min(mb), (j0 + tj).min(nb), (k0 + tk).min(kb));
                let mut triples = Vec::new();
                match df {
                    Dataflow::WS => {
                        for jj in j0..j1 {
                            for kk in k0..k1 {
                                for ii in i0..i1 {
                                    triples.push((ii, jj, kk));
                                }
                            }
                        }
                    }
                    Dataflow::OS => {
                        for ii in i0..i1 {
                            for jj in j0..j1 {
                                for kk in k0..k1 {
                                    triples.push((ii, jj, kk));
                                }
                            }
                        }
                    }
                }
                for (ii, jj, kk) in triples {
                    let (a_new, b_new) = (seen_a.insert((ii, kk)), seen_b.insert((kk, jj)));
                    // Weight-stationary moves the weights first, output-stationary the activations.
                    let order: [(bool, char); 2] = match df {
                        Dataflow::WS => [(b_new, 'b'), (a_new, 'a')],
                        Dataflow::OS => [(a_new, 'a'), (b_new, 'b')],
                    };
                    for (new, which) in order {
                        if new {
                            mvin(&mut c, which);
                        }
                    }
                    *c.entry("compute").or_default() += 1;
                    let preload = match df {
                        Dataflow::WS => true,
                        Dataflow::OS => kk == k0,
                    };
                    if preload {
                        *c.entry("preload").or_default() += 1;
                    }
                }
                if k1 == kb {
                    *c.entry("mvout").or_default() += (i1 - i0) * (j1 - j0);
                }
            }
        }
    }
    c
}

fn emitted_counts(p: &Program) -> BTreeMap<&'static str, usize> {
    let mut c = BTreeMap::new();
    for i in &p.instrs {
        let name = if i.is_compute() { "compute" } else { i.mnemonic() };
        *c.entry(name).or_default() += 1;
    }
    c
}

#[test]
fn matmul_instruction_counts_match_loop_replay() {
    let cfg = default_cfg();
    let cases = [
        (128, 128, 128, None),
        (128, 128, 128, Some(Tiling::new(2, 4, 3))),
        (100, 37, 290, None),
        (17, 300, 5, Some(Tiling::new(1, 2, 1))),
    ];
    for (m, n, k, manual) in cases {
        let t = manual.unwrap_or_else(|| mapper::pick_tiling(m, n, k, &cfg).unwrap());
        for df in [Dataflow::WS, Dataflow::OS] {
            let g = Gemm {
                m,
                n,
                k,
                addrs: GemmAddrs::packed(0x1000, 0x100_0000, 0x200_0000, n, k),
                epilogue: Epilogue { scale: Scale::ONE, activation: Activation::None },
                dataflow: df,
            };
            let p = mapper::lower_matmul("mm", &g, &t, &cfg).unwrap();
            assert_eq!(emitted_counts(&p), count_oracle(m, n, k, 16, &t, df), "{m}x{n}x{k} {t:?} {df}");
        }
    }
    // The resident-tile case moves each operand block exactly once.
    let c = count_oracle(128, 128, 128, 16, &Tiling::new(8, 8, 8), Dataflow::WS);
    assert_eq!((c["mvin"], c["compute"], c["preload"], c["mvout"]), (128, 512, 512, 64));
}

#[test]
fn lowered_programs_stay_inside_local_memories() {
    let cfg = validate(ArchConfig {
        mesh_rows: 4,
        mesh_cols: 4,
        scratchpad_bytes: 2048,
        accumulator_bytes: 1024,
        ..Default::default()
    })
    .unwrap();
    let dims = LocalDims::from(cfg.derived());
    let s = ConvShape { n: 2, h: 9, w: 7, c: 5, k: 11, kh: 3, kw: 3, stride: 2, pad: 1 };
    let epi = Epilogue { scale: Scale::from_f64(0.05), activation: Activation::Relu };
    let addrs = ConvAddrs { input: 0x1000, weights: 0x10_0000, output: 0x20_0000, scratch: Some(0x30_0000) };
    for im2col in [Im2colPolicy::Host, Im2colPolicy::Accel] {
        for dataflow in [Dataflow::WS, Dataflow::OS] {
            let opts = MapOptions { im2col, dataflow, ..Default::default() };
            let p = mapper::lower_conv("c", &s, epi, &addrs, &cfg, &opts).unwrap();
            let fps = isa::footprints(&p.instrs, &dims).unwrap();
            for fp in &fps {
                for (space, rows, _) in &fp.local {
                    let limit = match space {
                        Space::Scratchpad => dims.sp_rows,
                        Space::Accumulator => dims.acc_rows,
                    };
                    assert!(rows.end <= limit, "{rows:?} beyond {limit} in {space:?}");
                }
            }
        }
    }
}

#[test]
fn residual_moves_each_operand_once() {
    let cfg = default_cfg();
    let elems = 16 * 16 * 5 + 7;
    let p = mapper::lower_residual("r", elems, 0x1000, 0x10_0000, 0x20_0000, Activation::Relu, &cfg).unwrap();
    let mvin_bytes: usize = p
        .instrs
        .iter()
        .filter_map(|i| match i {
            Instruction::Mvin { rows, cols, .. } => Some(*rows as usize * *cols as usize),
            _ => None,
        })
        .sum();
    let mvout_bytes: usize = p
        .instrs
        .iter()
        .filter_map(|i| match i {
            Instruction::Mvout { rows, cols, .. } => Some(*rows as usize * *cols as usize),
            _ => None,
        })
        .sum();
    assert_eq!(mvin_bytes, 2 * elems);
    assert_eq!(mvout_bytes, elems);
}

fn resnet_prefix(n: usize) -> workload::NetworkDesc {
    workload::resnet50_like(&BuiltinParams { input_hw: 32, ..Default::default() }).prefix(n)
}

#[test]
fn timing_does_not_depend_on_functional_execution() {
    let cfg = default_cfg();
    let net = resnet_prefix(6);
    let opts = MapOptions::default();
    let f = run_network(&cfg, &net, 3, 1, &opts, SimOptions { functional: true, trace: false }).unwrap();
    let t = run_network(&cfg, &net, 3, 1, &opts, timing()).unwrap();
    assert_eq!(f.report, t.report);
    assert!(t.outputs.is_empty() && !f.outputs.is_empty());
}

#[test]
fn runs_are_deterministic_across_cores() {
    let cfg = validate(ArchConfig { num_cores: 2, ..Default::default() }).unwrap();
    let net = resnet_prefix(8);
    let a = run_network(&cfg, &net, 0, 2, &MapOptions::default(), timing()).unwrap();
    let b = run_network(&cfg, &net, 0, 2, &MapOptions::default(), timing()).unwrap();
    assert_eq!(a.report.to_json(), b.report.to_json());
    assert_eq!(a.report.cores.len(), 2);
    // Identical programs contend symmetrically, so neither core is starved.
    let (c0, c1) = (a.report.cores[0].total_cycles as f64, a.report.cores[1].total_cycles as f64);
    assert!((c0 / c1 - 1.0).abs() < 0.05, "{c0} vs {c1}");
}

#[test]
fn report_invariants_hold() {
    let cfg = default_cfg();
    let r = run_network(&cfg, &resnet_prefix(12), 1, 1, &MapOptions::default(), timing()).unwrap().report;
    let core = &r.cores[0];
    let layer_sum: u64 = core.layers.iter().map(|l| l.cycles).sum();
    assert_eq!(layer_sum, core.total_cycles);
    assert_eq!(r.breakdown.values().sum::<u64>(), r.total_cycles);
    let u = &core.utilization;
    for v in [u.load, u.execute, u.store, u.array] {
        assert!((0.0..=1.0).contains(&v), "{u:?}");
    }
    for w in core.layers.windows(2) {
        assert_eq!(w[0].end, w[1].start);
    }
    let tlb = r.tlb();
    let t = tlb.total();
    assert_eq!(t.filter_hits + t.private_hits + t.shared_hits + t.walks, t.lookups);
}

#[test]
fn host_im2col_costs_host_cycles_only_without_the_unit() {
    let cfg = default_cfg();
    let net = resnet_prefix(1);
    let accel = run_network(&cfg, &net, 0, 1, &MapOptions::default(), timing()).unwrap().report;
    let host =
        run_network(&cfg, &net, 0, 1, &MapOptions { im2col: Im2colPolicy::Host, ..Default::default() }, timing())
            .unwrap()
            .report;
    assert_eq!(accel.cores[0].host_cycles, 0);
    assert!(host.cores[0].host_cycles > 0);
}

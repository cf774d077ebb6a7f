//! `vitconv` command-line driver.
//!
//! Every stage rebuilds the pipeline from `--config` and `--seed`, so
//! re-running a stage with the same arguments rewrites identical files.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use super::{
    accuracy_table, bench, eval_topk, report_mismatches, speedup_table, verify_equivalence,
    AccuracyRow, BenchRow, ConstantModel, Dataset, FloatModel, Model, QuantModel,
};
use crate::checkpoint::{
    inherit_weights, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta,
};
use crate::error::{Error, Result};
use crate::graph::{build_deit, execute_with_stats, random_checkpoint, Graph, ModelConfig};
use crate::quant::{
    build_quantized, calibrate_with, execute_quantized_with_stats, CalibStats, Method,
    QuantOptions, QuantizedGraph,
};
use crate::rewrite::{lower, RewritePlan};
use crate::tensor::Tensor;

#[derive(Parser)]
#[command(
    name = "vitconv",
    version,
    about = "Lower DeiT models to convolutions and quantize them to INT8"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Preset (toy, tiny, small, base, optionally with -distilled) or a JSON config file.
    #[arg(long, default_value = "toy")]
    config: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print machine-readable JSON instead of tables.
    #[arg(long)]
    json: bool,
    /// Original-dialect checkpoint; random weights drawn from --seed otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Standard deviation of random weights.
    #[arg(long, default_value_t = 0.02)]
    init_std: f32,
}

#[derive(Args, Clone)]
struct QuantArgs {
    /// Activation calibrator: minmax or kl.
    #[arg(long, default_value = "minmax")]
    method: Method,
    /// Keep the LayerNorm mean/variance convolutions in f32.
    #[arg(long)]
    ln_conv_fp32: bool,
    /// Run the attention matmuls in int8 as well.
    #[arg(long)]
    int8_matmul: bool,
    #[arg(long, default_value_t = 100)]
    calib_samples: usize,
    /// Calibration set manifest; synthetic samples otherwise.
    #[arg(long)]
    calib_dataset: Option<PathBuf>,
    /// Precomputed statistics from `calibrate`.
    #[arg(long)]
    stats: Option<PathBuf>,
}

impl QuantArgs {
    fn options(&self) -> QuantOptions {
        QuantOptions {
            method: self.method,
            ln_convs_fp32: self.ln_conv_fp32,
            int8_matmul: self.int8_matmul,
            ..Default::default()
        }
    }
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset manifest; a synthetic 5-class set otherwise.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Samples per class of the synthetic set.
    #[arg(long, default_value_t = 20)]
    per_class: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Kind {
    Original,
    Lowered,
    Int8,
    Zero,
}

#[derive(Subcommand)]
enum Command {
    /// Build, lower and inherit weights; write graphs, plan and checkpoints.
    Transform {
        #[command(flatten)]
        common: Common,
    },
    /// Record activation statistics of the lowered model.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        quant: QuantArgs,
    },
    /// Build the INT8 model bundle.
    Quantize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        quant: QuantArgs,
    },
    /// Compare two models on seeded random inputs; exits 1 on failure.
    Verify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        quant: QuantArgs,
        #[arg(long, value_enum, default_value = "original")]
        a: Kind,
        #[arg(long, value_enum, default_value = "lowered")]
        b: Kind,
        #[arg(long, default_value_t = 32)]
        inputs: usize,
        #[arg(long, default_value_t = 1e-2)]
        rtol: f64,
        #[arg(long, default_value_t = 1e-3)]
        atol: f64,
    },
    /// Top-1 / top-5 accuracy before and after quantization.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        quant: QuantArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Inference time of the f32 and INT8 models.
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        quant: QuantArgs,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
    },
    /// Samples where either model disagrees with its label or the other model.
    Mismatch {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        quant: QuantArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "lowered")]
        a: Kind,
        #[arg(long, value_enum, default_value = "int8")]
        b: Kind,
    },
    /// Write the synthetic dataset as SBT tensors plus a manifest.
    Dataset {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        per_class: usize,
    },
}

/// Parse `args` (program name first) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

struct Pipeline {
    cfg: ModelConfig,
    original: Graph,
    ckpt: Checkpoint,
    lowered: Graph,
    plan: RewritePlan,
    inherited: Checkpoint,
}

impl Pipeline {
    fn build(c: &Common) -> Result<Self> {
        let cfg = ModelConfig::resolve(&c.config)?;
        let original = build_deit(&cfg)?;
        let ckpt = match &c.checkpoint {
            Some(p) => load_checkpoint(p)?,
            None => {
                let meta = CheckpointMeta {
                    variant: cfg.variant.name().to_string(),
                    distilled: cfg.distilled,
                    num_classes: cfg.num_classes,
                    ..Default::default()
                };
                random_checkpoint(&original, meta, c.seed, c.init_std)?
            }
        };
        let (lowered, plan) = lower(&original)?;
        let inherited = inherit_weights(&ckpt, &lowered, &plan)?;
        Ok(Pipeline {
            cfg,
            original,
            ckpt,
            lowered,
            plan,
            inherited,
        })
    }

    fn calib_inputs(&self, q: &QuantArgs, seed: u64) -> Result<Vec<Tensor>> {
        if let Some(p) = &q.calib_dataset {
            return Ok(Dataset::load(p)?.inputs());
        }
        let per_class = q.calib_samples.div_ceil(5);
        let ds = Dataset::synthetic(self.original.input_shape(), per_class, seed.wrapping_add(1))?;
        Ok(ds.inputs().into_iter().take(q.calib_samples).collect())
    }

    fn stats(&self, q: &QuantArgs, seed: u64) -> Result<CalibStats> {
        match &q.stats {
            Some(p) => CalibStats::from_json(&std::fs::read_to_string(p)?),
            None => calibrate_with(
                &self.lowered,
                &self.inherited,
                &self.calib_inputs(q, seed)?,
                &q.options(),
            ),
        }
    }

    fn quantized(&self, q: &QuantArgs, seed: u64) -> Result<QuantizedGraph> {
        build_quantized(
            &self.lowered,
            &self.inherited,
            &self.stats(q, seed)?,
            &q.options(),
        )
    }

    fn model(&self, kind: Kind, q: &QuantArgs, seed: u64) -> Result<Box<dyn Model>> {
        Ok(match kind {
            Kind::Original => Box::new(FloatModel {
                name: "original".into(),
                graph: self.original.clone(),
                params: self.ckpt.clone(),
            }),
            Kind::Lowered => Box::new(FloatModel {
                name: "lowered".into(),
                graph: self.lowered.clone(),
                params: self.inherited.clone(),
            }),
            Kind::Int8 => Box::new(QuantModel {
                name: "int8".into(),
                qg: self.quantized(q, seed)?,
            }),
            Kind::Zero => Box::new(ConstantModel::zeros(
                self.original.input_shape(),
                self.original.output_shape(),
            )?),
        })
    }

    fn dataset(&self, d: &DataArgs, seed: u64) -> Result<Dataset> {
        match &d.dataset {
            Some(p) => Dataset::load(p),
            None => Dataset::synthetic(
                self.original.input_shape(),
                d.per_class,
                seed.wrapping_add(2),
            ),
        }
    }
}

fn out_dir(c: &Common) -> Result<Option<&Path>> {
    if let Some(d) = &c.out {
        std::fs::create_dir_all(d)?;
    }
    Ok(c.out.as_deref())
}

fn write_json(dir: Option<&Path>, file: &str, value: &impl Serialize) -> Result<()> {
    if let Some(d) = dir {
        std::fs::write(d.join(file), serde_json::to_string_pretty(value)? + "\n")?;
    }
    Ok(())
}

fn emit(c: &Common, value: &impl Serialize, human: impl FnOnce() -> String) -> Result<()> {
    if c.json {
        println!("{}", serde_json::to_string_pretty(value)?);
    } else {
        print!("{}", human());
    }
    Ok(())
}

#[derive(Serialize)]
struct TransformSummary<'a> {
    config: &'a ModelConfig,
    original_nodes: usize,
    lowered_nodes: usize,
    substitutions: usize,
    parameters: usize,
    lowered_parameters: usize,
}

#[derive(Serialize)]
struct BenchReport {
    rows: Vec<BenchRow>,
    fp32_conv_macs: u64,
    int8_conv_macs: u64,
    int8_fp32_conv_macs: u64,
    mac_parity: bool,
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Transform { common } => {
            let p = Pipeline::build(&common)?;
            let dir = out_dir(&common)?;
            if let Some(d) = dir {
                std::fs::write(d.join("original.graph.json"), p.original.to_json()? + "\n")?;
                std::fs::write(d.join("lowered.graph.json"), p.lowered.to_json()? + "\n")?;
                std::fs::write(d.join("plan.json"), p.plan.to_json()? + "\n")?;
                save_checkpoint(&p.ckpt, d.join("original.dckp"))?;
                save_checkpoint(&p.inherited, d.join("lowered.dckp"))?;
            }
            let s = TransformSummary {
                config: &p.cfg,
                original_nodes: p.original.nodes.len(),
                lowered_nodes: p.lowered.nodes.len(),
                substitutions: p.plan.applied.len(),
                parameters: p.ckpt.scalar_count(),
                lowered_parameters: p.inherited.scalar_count(),
            };
            emit(&common, &s, || {
                format!(
                    "{}: {} nodes -> {} nodes, {} substitutions, {} parameters ({} after lowering)\n",
                    p.cfg.label(),
                    s.original_nodes,
                    s.lowered_nodes,
                    s.substitutions,
                    s.parameters,
                    s.lowered_parameters
                )
            })?;
            Ok(0)
        }
        Command::Calibrate { common, quant } => {
            let p = Pipeline::build(&common)?;
            let stats = p.stats(&quant, common.seed)?;
            if let Some(d) = out_dir(&common)? {
                std::fs::write(d.join("calib.json"), stats.to_json()? + "\n")?;
            }
            if common.json {
                println!("{}", stats.to_json()?);
            } else {
                println!("| Edge | Min | Max | Elements |");
                println!("|---|---|---|---|");
                for (name, e) in &stats.edges {
                    println!("| {name} | {:.6} | {:.6} | {} |", e.min, e.max, e.count);
                }
            }
            Ok(0)
        }
        Command::Quantize { common, quant } => {
            let p = Pipeline::build(&common)?;
            let qg = p.quantized(&quant, common.seed)?;
            if let Some(d) = out_dir(&common)? {
                qg.save(d.join("quantized"))?;
            }
            emit(&common, &qg.params, || {
                let int8 = qg
                    .nodes
                    .values()
                    .filter(|n| n.mode != crate::quant::NodeMode::F32)
                    .count();
                format!(
                    "{} int8 nodes, {} activation scales, {} degenerate edges\n",
                    int8,
                    qg.params.activations.len(),
                    qg.params.degenerate_edges.len()
                )
            })?;
            Ok(0)
        }
        Command::Verify {
            common,
            quant,
            a,
            b,
            inputs,
            rtol,
            atol,
        } => {
            let p = Pipeline::build(&common)?;
            let ma = p.model(a, &quant, common.seed)?;
            let mb = p.model(b, &quant, common.seed)?;
            let r = verify_equivalence(ma.as_ref(), mb.as_ref(), inputs, rtol, atol, common.seed)?;
            write_json(out_dir(&common)?, "verify.json", &r)?;
            emit(&common, &r, || {
                format!(
                    "{} vs {} over {} inputs: mean rel {:.3e} (rtol {:.0e}), mean abs {:.3e} (atol {:.0e}), max abs {:.3e}, argmax agreement {:.3} -> {}\n",
                    r.model_a,
                    r.model_b,
                    r.samples,
                    r.mean_rel_error,
                    r.rtol,
                    r.mean_abs_error,
                    r.atol,
                    r.max_abs_error,
                    r.argmax_agreement,
                    if r.pass { "PASS" } else { "FAIL" }
                )
            })?;
            Ok(if r.pass { 0 } else { 1 })
        }
        Command::Eval {
            common,
            quant,
            data,
        } => {
            let p = Pipeline::build(&common)?;
            let ds = p.dataset(&data, common.seed)?;
            let fp = eval_topk(
                p.model(Kind::Lowered, &quant, common.seed)?.as_ref(),
                &ds,
                &[1, 5],
            )?;
            let q = eval_topk(
                p.model(Kind::Int8, &quant, common.seed)?.as_ref(),
                &ds,
                &[1, 5],
            )?;
            let strip = |mut r: super::EvalResult| {
                r.latency = None;
                r
            };
            let row = AccuracyRow {
                model: p.cfg.label(),
                original: (fp.top1, fp.top5),
                quantized: (q.top1, q.top5),
            };
            let results = vec![strip(fp.clone()), strip(q.clone())];
            write_json(out_dir(&common)?, "eval.json", &results)?;
            emit(&common, &results, || accuracy_table(&[row]))?;
            Ok(0)
        }
        Command::Bench {
            common,
            quant,
            runs,
            warmup,
        } => {
            let p = Pipeline::build(&common)?;
            let qg = p.quantized(&quant, common.seed)?;
            let x =
                super::verify::random_inputs(p.lowered.input_shape(), 1, common.seed)?.remove(0);
            let (_, fs) = execute_with_stats(&p.lowered, &p.inherited, &x)?;
            let (_, qs) = execute_quantized_with_stats(&qg, &x)?;
            let fm = p.model(Kind::Lowered, &quant, common.seed)?;
            let qm = QuantModel {
                name: "int8".into(),
                qg,
            };
            let row = BenchRow {
                label: p.cfg.label(),
                fp32: bench(fm.as_ref(), &x, runs, warmup)?,
                int8: Some(bench(&qm, &x, runs, warmup)?),
            };
            let report = BenchReport {
                fp32_conv_macs: fs.total_conv_macs(),
                int8_conv_macs: qs.int8_conv_macs,
                int8_fp32_conv_macs: qs.conv_macs,
                mac_parity: fs.total_conv_macs() == qs.total_conv_macs(),
                rows: vec![row],
            };
            write_json(out_dir(&common)?, "bench.json", &report)?;
            emit(&common, &report, || {
                format!(
                    "{}\nconv MACs: f32 path {}, int8 path {} int8 + {} f32 (parity: {})\n",
                    speedup_table(&report.rows),
                    report.fp32_conv_macs,
                    report.int8_conv_macs,
                    report.int8_fp32_conv_macs,
                    report.mac_parity
                )
            })?;
            Ok(0)
        }
        Command::Mismatch {
            common,
            quant,
            data,
            a,
            b,
        } => {
            let p = Pipeline::build(&common)?;
            let ds = p.dataset(&data, common.seed)?;
            let ma = p.model(a, &quant, common.seed)?;
            let mb = p.model(b, &quant, common.seed)?;
            let r = report_mismatches(ma.as_ref(), mb.as_ref(), &ds)?;
            write_json(out_dir(&common)?, "mismatch.json", &r)?;
            emit(&common, &r, || r.table())?;
            Ok(0)
        }
        Command::Dataset { common, per_class } => {
            let cfg = ModelConfig::resolve(&common.config)?;
            let shape = [1, cfg.in_channels, cfg.img_size, cfg.img_size];
            let ds = Dataset::synthetic(&shape, per_class, common.seed)?;
            let dir = common
                .out
                .as_deref()
                .ok_or_else(|| Error::Config("dataset needs --out".into()))?;
            let path = ds.save(dir)?;
            println!("{}", path.display());
            Ok(0)
        }
    }
}

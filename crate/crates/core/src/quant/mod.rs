//! Post-training INT8 quantization of lowered graphs.
//!
//! Activations use one symmetric scale per edge, convolution weights one
//! per output channel; there are no zero points and the integer range is
//! `[-127, 127]`. Convolutions run on i8 operands with exact i32
//! accumulation and are requantized with half-away-from-zero rounding.
//! Everything else runs in f32 behind explicit Quantize / Dequantize nodes.

mod calib;
mod exec;
mod kernel;
mod scale;

pub use calib::{calibrate, calibrate_with, CalibStats, EdgeStats, HIST_BINS};
pub use exec::{execute_quantized, execute_quantized_with_stats};
pub use kernel::{
    check_capacity, conv2d_1x1_int8, conv2d_int8, conv2d_int8_acc, matmul_int8, max_reduction_len,
    quantize_bias, quantize_weight, quantize_weights, requant_multiplier, requantize,
    QuantizedConv,
};
pub use scale::{
    compute_scale_kl, compute_scale_minmax, dequantize, quantize_tensor, quantize_value,
    round_clamp_i8, round_saturate_i32, Method, ScaleChoice, QMAX,
};

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::graph::{validate, Dialect, Graph, GraphBuilder, Op};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantOptions {
    pub method: Method,
    /// Keep the LayerNorm mean/variance convolutions in f32.
    pub ln_convs_fp32: bool,
    /// Also run the two attention matmuls on int8 operands.
    pub int8_matmul: bool,
    /// Target bin count of the KL calibrator.
    pub kl_bins: usize,
}

impl Default for QuantOptions {
    fn default() -> Self {
        QuantOptions {
            method: Method::MinMax,
            ln_convs_fp32: false,
            int8_matmul: false,
            kl_bins: 128,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeMode {
    Int8Conv,
    Int8Matmul,
    #[serde(rename = "f32")]
    F32,
}

/// Per-node execution record of a quantized graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeQuant {
    pub mode: NodeMode,
    /// Scales of the i8 inputs, in input order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub input_scales: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_scale: Option<f32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub method: Method,
    /// Activation scale per edge name.
    pub activations: BTreeMap<String, f32>,
    /// Per-output-channel weight scales per convolution id.
    pub weights: BTreeMap<String, Vec<f32>>,
    /// Edges that were all zero during calibration; their scale is 1.0.
    pub degenerate_edges: Vec<String>,
    /// Convolutions with all-zero output channels.
    pub degenerate_channels: BTreeMap<String, Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedGraph {
    /// Lowered graph with Quantize / Dequantize boundaries.
    pub graph: Graph,
    pub params: QuantParams,
    /// i8 weights and i32 biases of int8 nodes; f32 for everything else.
    pub weights: Checkpoint,
    pub nodes: BTreeMap<String, NodeQuant>,
    pub options: QuantOptions,
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    options: QuantOptions,
    params: QuantParams,
    nodes: BTreeMap<String, NodeQuant>,
}

impl QuantizedGraph {
    pub fn mode(&self, node: &str) -> NodeMode {
        self.nodes.get(node).map_or(NodeMode::F32, |n| n.mode)
    }

    /// Write `graph.json`, `quant.json` and `weights.dckp` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("graph.json"), self.graph.to_json()?)?;
        let meta = BundleMeta {
            options: self.options.clone(),
            params: self.params.clone(),
            nodes: self.nodes.clone(),
        };
        std::fs::write(dir.join("quant.json"), serde_json::to_string_pretty(&meta)?)?;
        save_checkpoint(&self.weights, dir.join("weights.dckp"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let graph = Graph::from_json(&std::fs::read_to_string(dir.join("graph.json"))?)?;
        let meta: BundleMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.join("quant.json"))?)?;
        Ok(QuantizedGraph {
            graph,
            params: meta.params,
            weights: load_checkpoint(dir.join("weights.dckp"))?,
            nodes: meta.nodes,
            options: meta.options,
        })
    }
}

fn is_ln_mean_conv(id: &str) -> bool {
    id.ends_with("/mean1") || id.ends_with("/mean2")
}

/// Execution mode of every node of a lowered graph under `opts`.
pub fn node_modes(graph: &Graph, opts: &QuantOptions) -> Vec<NodeMode> {
    graph
        .nodes
        .iter()
        .map(|n| {
            if n.op.is_conv() && !(opts.ln_convs_fp32 && is_ln_mean_conv(&n.id)) {
                NodeMode::Int8Conv
            } else if n.op.is_matmul() && opts.int8_matmul {
                NodeMode::Int8Matmul
            } else {
                NodeMode::F32
            }
        })
        .collect()
}

/// Edges read or written by int8 nodes, in edge order.
pub(crate) fn quantized_edges(graph: &Graph, opts: &QuantOptions) -> Vec<usize> {
    let mut set = BTreeSet::new();
    for (n, m) in graph.nodes.iter().zip(node_modes(graph, opts)) {
        if m != NodeMode::F32 {
            set.extend(n.inputs.iter().copied());
            set.insert(n.output);
        }
    }
    set.into_iter().collect()
}

/// Turn a lowered f32 graph into an int8 graph.
///
/// Every int8-capable node gets i8 operands; a Quantize node is inserted
/// once per edge that an int8 node reads from f32, and a Dequantize node
/// once per int8 output that an f32 node (or the graph output) reads.
/// Scales come from `stats` by `opts.method`.
pub fn build_quantized(
    lowered: &Graph,
    inherited: &Checkpoint,
    stats: &CalibStats,
    opts: &QuantOptions,
) -> Result<QuantizedGraph> {
    if lowered.dialect != Dialect::Lowered {
        return Err(Error::Dialect("quantization needs a lowered graph".into()));
    }
    let modes = node_modes(lowered, opts);
    let mut qp = QuantParams {
        method: opts.method,
        ..Default::default()
    };

    for e in quantized_edges(lowered, opts) {
        let name = lowered.edge_name(e);
        let es = stats.get(&name)?;
        let choice = match opts.method {
            Method::MinMax => compute_scale_minmax(es),
            Method::Kl => compute_scale_kl(es, opts.kl_bins),
        }
        .map_err(|err| Error::Calibration(format!("edge `{name}`: {err}")))?;
        if choice.degenerate {
            qp.degenerate_edges.push(name.clone());
        }
        qp.activations.insert(name, choice.scale);
    }
    let scale_of = |e: usize| qp.activations[&lowered.edge_name(e)];

    let mut weights = Checkpoint::new(inherited.meta.clone());
    let mut records = BTreeMap::new();
    for (n, &mode) in lowered.nodes.iter().zip(&modes) {
        if mode == NodeMode::F32 {
            continue;
        }
        let shapes: Vec<&[usize]> = n
            .inputs
            .iter()
            .map(|&e| lowered.edges[e].shape.as_slice())
            .collect();
        check_capacity(&n.id, kernel::reduction_len(&n.op, &shapes))?;
        let input_scales: Vec<f32> = n.inputs.iter().map(|&e| scale_of(e)).collect();
        if mode == NodeMode::Int8Conv {
            let (wq, s_w, degenerate) = quantize_weight(inherited.get(&n.param_names[0])?)?;
            if !degenerate.is_empty() {
                qp.degenerate_channels.insert(n.id.clone(), degenerate);
            }
            if let Some(bname) = n.param_names.get(1) {
                let b = inherited.get(bname)?;
                let bq = quantize_bias(b.as_f32()?, input_scales[0], &s_w);
                weights.insert(bname.clone(), Tensor::from_i32(b.shape().to_vec(), bq)?)?;
            }
            weights.insert(n.param_names[0].clone(), wq)?;
            qp.weights.insert(n.id.clone(), s_w);
        }
        records.insert(
            n.id.clone(),
            NodeQuant {
                mode,
                input_scales,
                output_scale: Some(scale_of(n.output)),
            },
        );
    }
    for (name, _) in lowered.param_specs() {
        if !weights.contains(&name) {
            weights.insert(name.clone(), inherited.get(&name)?.clone())?;
        }
    }

    let graph = insert_boundaries(lowered, &modes, &qp)?;
    let diags = validate(&graph);
    if let Some(d) = diags.first() {
        return Err(Error::Invalid(format!("quantized graph: {}", d.message)));
    }
    for n in &graph.nodes {
        records.entry(n.id.clone()).or_insert(NodeQuant {
            mode: NodeMode::F32,
            input_scales: Vec::new(),
            output_scale: None,
        });
    }
    Ok(QuantizedGraph {
        graph,
        params: qp,
        weights,
        nodes: records,
        options: opts.clone(),
    })
}

fn insert_boundaries(src: &Graph, modes: &[NodeMode], qp: &QuantParams) -> Result<Graph> {
    struct St<'a> {
        src: &'a Graph,
        qp: &'a QuantParams,
        b: GraphBuilder,
        f32v: Vec<Option<usize>>,
        i8v: Vec<Option<usize>>,
    }
    impl St<'_> {
        fn scale(&self, old: usize) -> Result<f32> {
            let name = self.src.edge_name(old);
            self.qp
                .activations
                .get(&name)
                .copied()
                .ok_or(Error::Coverage(name))
        }
        fn need_i8(&mut self, old: usize) -> Result<usize> {
            if let Some(e) = self.i8v[old] {
                return Ok(e);
            }
            let f = self.f32v[old]
                .ok_or_else(|| Error::Invalid(format!("edge {old} read before written")))?;
            let scale = self.scale(old)?;
            let e = self.b.push(
                format!("{}/quantize", self.src.edge_name(old)),
                Op::Quantize { scale },
                &[f],
                &[],
            )?;
            self.i8v[old] = Some(e);
            Ok(e)
        }
        fn need_f32(&mut self, old: usize) -> Result<usize> {
            if let Some(e) = self.f32v[old] {
                return Ok(e);
            }
            let q = self.i8v[old]
                .ok_or_else(|| Error::Invalid(format!("edge {old} read before written")))?;
            let scale = self.scale(old)?;
            let e = self.b.push(
                format!("{}/dequantize", self.src.edge_name(old)),
                Op::Dequantize { scale },
                &[q],
                &[],
            )?;
            self.f32v[old] = Some(e);
            Ok(e)
        }
    }

    let mut st = St {
        src,
        qp,
        b: GraphBuilder::new(src.input_shape().to_vec()),
        f32v: vec![None; src.edges.len()],
        i8v: vec![None; src.edges.len()],
    };
    st.f32v[src.input] = Some(st.b.input());
    for (n, &mode) in src.nodes.iter().zip(modes) {
        let int8 = mode != NodeMode::F32;
        let ins: Vec<usize> = n
            .inputs
            .iter()
            .map(|&e| if int8 { st.need_i8(e) } else { st.need_f32(e) })
            .collect::<Result<_>>()?;
        let params: Vec<&str> = n.param_names.iter().map(String::as_str).collect();
        let out = st.b.push(n.id.clone(), n.op.clone(), &ins, &params)?;
        if int8 {
            st.i8v[n.output] = Some(out);
        } else {
            st.f32v[n.output] = Some(out);
        }
    }
    let out = st.need_f32(src.output)?;
    Ok(st.b.finish(Dialect::Lowered, out))
}

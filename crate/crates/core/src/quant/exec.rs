use super::kernel::{conv2d_int8, matmul_int8};
use super::scale::{dequantize, quantize_tensor};
use super::{NodeMode, QuantizedGraph};
use crate::error::{Error, Result};
use crate::graph::{eval_float_node, run_graph, ExecStats, Op, OpNode};
use crate::tensor::{transpose_last2, ConvGeometry, Tensor};

pub fn execute_quantized(qg: &QuantizedGraph, input: &Tensor) -> Result<Tensor> {
    execute_quantized_with_stats(qg, input).map(|(y, _)| y)
}

/// Run a quantized graph. Int8 nodes use the integer kernels, Quantize and
/// Dequantize convert at the recorded scales, everything else runs in f32.
pub fn execute_quantized_with_stats(
    qg: &QuantizedGraph,
    input: &Tensor,
) -> Result<(Tensor, ExecStats)> {
    let mut stats = ExecStats::default();
    let y = run_graph(
        &qg.graph,
        input,
        |node, ins| {
            stats.nodes += 1;
            eval_node(qg, node, ins, &mut stats)
        },
        |_, _| {},
    )?;
    Ok((y, stats))
}

fn eval_node(
    qg: &QuantizedGraph,
    node: &OpNode,
    ins: &[&Tensor],
    stats: &mut ExecStats,
) -> Result<Tensor> {
    match &node.op {
        Op::Quantize { scale } => return quantize_tensor(ins[0], *scale),
        Op::Dequantize { scale } => return dequantize(ins[0], *scale),
        _ => {}
    }
    let Some(rec) = qg.nodes.get(&node.id).filter(|r| r.mode != NodeMode::F32) else {
        return eval_float_node(node, ins, &qg.weights, stats);
    };
    let s_y = rec
        .output_scale
        .ok_or_else(|| Error::Invalid(format!("int8 node `{}` has no output scale", node.id)))?;
    let s_in = |i: usize| {
        rec.input_scales.get(i).copied().ok_or_else(|| {
            Error::Invalid(format!("int8 node `{}` lacks input scale #{i}", node.id))
        })
    };
    match (&node.op, rec.mode) {
        (Op::Conv2d { stride, .. }, NodeMode::Int8Conv)
        | (Op::PatchEmbed { patch: stride, .. }, NodeMode::Int8Conv) => {
            let w = qg.weights.get(&node.param_names[0])?;
            let bias = match node.param_names.get(1) {
                Some(b) => Some(qg.weights.get(b)?.as_i32()?),
                None => None,
            };
            let s_w = qg
                .params
                .weights
                .get(&node.id)
                .ok_or_else(|| Error::Invalid(format!("no weight scales for `{}`", node.id)))?;
            stats.int8_conv_macs += ConvGeometry::infer(ins[0].shape(), w.shape(), *stride)?.macs();
            conv2d_int8(ins[0], w, bias, *stride, s_in(0)?, s_w, s_y)
        }
        (Op::MatMulQK, NodeMode::Int8Matmul) => {
            let kt = transpose_last2(ins[1])?;
            stats.int8_matmul_macs += matmul_macs(ins[0].shape(), kt.shape());
            matmul_int8(ins[0], &kt, s_in(0)?, s_in(1)?, s_y)
        }
        (Op::MatMulAV, NodeMode::Int8Matmul) => {
            stats.int8_matmul_macs += matmul_macs(ins[0].shape(), ins[1].shape());
            matmul_int8(ins[0], ins[1], s_in(0)?, s_in(1)?, s_y)
        }
        (op, mode) => Err(Error::Invalid(format!(
            "node `{}`: {} cannot run in {mode:?} mode",
            node.id,
            op.kind()
        ))),
    }
}

fn matmul_macs(a: &[usize], b: &[usize]) -> u64 {
    let r = a.len();
    let batch: usize = a[..r - 2].iter().product();
    (batch * a[r - 2] * a[r - 1] * b[r - 1]) as u64
}

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::scale::{round_clamp_i8, round_saturate_i32, QMAX};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Op};
use crate::tensor::{matmul_shape, ConvGeometry, Tensor};

/// Longest reduction whose worst-case `Σ 127·127` fits an i32.
pub fn max_reduction_len() -> usize {
    ((1u64 << 31) - 1) as usize / (QMAX * QMAX) as usize
}

pub fn check_capacity(node: &str, len: usize) -> Result<()> {
    if len as u64 * (QMAX * QMAX) as u64 >= 1u64 << 31 {
        return Err(Error::Capacity {
            node: node.to_string(),
            len,
        });
    }
    Ok(())
}

/// Multiplier taking an accumulator at scale `s_x·s_w` to scale `s_y`.
#[inline]
pub fn requant_multiplier(s_x: f32, s_w: f32, s_y: f32) -> f32 {
    s_x * s_w / s_y
}

#[inline]
pub fn requantize(acc: i32, multiplier: f32) -> i8 {
    round_clamp_i8(acc as f64 * multiplier as f64)
}

/// Raw i32 accumulators of an unpadded int8 convolution, bias included.
pub fn conv2d_int8_acc(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&[i32]>,
    stride: usize,
) -> Result<(Vec<i32>, ConvGeometry)> {
    let g = ConvGeometry::infer(x.shape(), w.shape(), stride)?;
    let xd = x.as_i8()?;
    let wd = w.as_i8()?;
    if let Some(b) = bias {
        if b.len() != g.c_out {
            return Err(Error::dim(format!(
                "int8 conv bias has {} entries, weight has {} output channels",
                b.len(),
                g.c_out
            )));
        }
    }
    let ConvGeometry {
        batch,
        c_in,
        h,
        w: width,
        c_out,
        kh,
        kw,
        oh,
        ow,
        stride,
    } = g;
    let mut acc = vec![0i32; batch * c_out * oh * ow];
    if kh == 1 && kw == 1 && stride == 1 {
        let plane = h * width;
        for b in 0..batch {
            let xb = &xd[b * c_in * plane..(b + 1) * c_in * plane];
            for co in 0..c_out {
                let orow = &mut acc[(b * c_out + co) * plane..(b * c_out + co + 1) * plane];
                for (ci, &wv) in wd[co * c_in..(co + 1) * c_in].iter().enumerate() {
                    let wv = wv as i32;
                    if wv == 0 {
                        continue;
                    }
                    for (o, &xv) in orow.iter_mut().zip(&xb[ci * plane..(ci + 1) * plane]) {
                        *o += wv * xv as i32;
                    }
                }
            }
        }
    } else {
        for b in 0..batch {
            for co in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut a = 0i32;
                        for ci in 0..c_in {
                            for ky in 0..kh {
                                let xrow =
                                    ((b * c_in + ci) * h + oy * stride + ky) * width + ox * stride;
                                let wrow = ((co * c_in + ci) * kh + ky) * kw;
                                for kx in 0..kw {
                                    a += xd[xrow + kx] as i32 * wd[wrow + kx] as i32;
                                }
                            }
                        }
                        acc[((b * c_out + co) * oh + oy) * ow + ox] = a;
                    }
                }
            }
        }
    }
    if let Some(bias) = bias {
        let plane = oh * ow;
        for (i, row) in acc.chunks_mut(plane).enumerate() {
            let bv = bias[i % c_out];
            row.iter_mut().for_each(|a| *a = a.saturating_add(bv));
        }
    }
    Ok((acc, g))
}

/// Int8 convolution with per-output-channel weight scales, requantized to
/// the output scale `s_y`.
pub fn conv2d_int8(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&[i32]>,
    stride: usize,
    s_x: f32,
    s_w: &[f32],
    s_y: f32,
) -> Result<Tensor> {
    let (acc, g) = conv2d_int8_acc(x, w, bias, stride)?;
    if s_w.len() != g.c_out {
        return Err(Error::dim(format!(
            "{} weight scales for {} output channels",
            s_w.len(),
            g.c_out
        )));
    }
    let mult: Vec<f32> = s_w
        .iter()
        .map(|&s| requant_multiplier(s_x, s, s_y))
        .collect();
    let plane = g.oh * g.ow;
    let out = acc
        .iter()
        .enumerate()
        .map(|(i, &a)| requantize(a, mult[(i / plane) % g.c_out]))
        .collect();
    Tensor::from_i8(g.output_shape(), out)
}

/// Pointwise stride-1 specialisation of [`conv2d_int8`].
pub fn conv2d_1x1_int8(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&[i32]>,
    s_x: f32,
    s_w: &[f32],
    s_y: f32,
) -> Result<Tensor> {
    let ws = w.shape();
    if ws.len() != 4 || ws[2] != 1 || ws[3] != 1 {
        return Err(Error::dim(format!(
            "pointwise kernel must be O×I×1×1, got {ws:?}"
        )));
    }
    conv2d_int8(x, w, bias, 1, s_x, s_w, s_y)
}

/// Batched int8 `a @ b` with per-tensor scales.
pub fn matmul_int8(a: &Tensor, b: &Tensor, s_a: f32, s_b: f32, s_y: f32) -> Result<Tensor> {
    let out_shape = matmul_shape(a.shape(), b.shape())?;
    let r = a.shape().len();
    let (m, k, n) = (a.shape()[r - 2], a.shape()[r - 1], b.shape()[r - 1]);
    let batch: usize = a.shape()[..r - 2].iter().product();
    let ad = a.as_i8()?;
    let bd = b.as_i8()?;
    let mult = requant_multiplier(s_a, s_b, s_y);
    let mut out = vec![0i8; batch * m * n];
    let mut row = vec![0i32; n];
    for bi in 0..batch {
        let am = &ad[bi * m * k..(bi + 1) * m * k];
        let bm = &bd[bi * k * n..(bi + 1) * k * n];
        for i in 0..m {
            row.iter_mut().for_each(|v| *v = 0);
            for kk in 0..k {
                let av = am[i * k + kk] as i32;
                for (o, &bv) in row.iter_mut().zip(&bm[kk * n..(kk + 1) * n]) {
                    *o += av * bv as i32;
                }
            }
            let o = &mut out[(bi * m + i) * n..(bi * m + i + 1) * n];
            for (dst, &acc) in o.iter_mut().zip(&row) {
                *dst = requantize(acc, mult);
            }
        }
    }
    Tensor::from_i8(out_shape, out)
}

/// Per-output-channel symmetric quantization of one convolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedConv {
    /// Name of the weight parameter.
    pub weight_name: String,
    #[serde(skip)]
    pub weight: Option<Tensor>,
    pub scales: Vec<f32>,
    /// Output channels whose weights are all zero; their scale is 1.0.
    pub degenerate: Vec<usize>,
}

/// Quantize one `O×…` weight per output channel:
/// `s_w[c] = max|W[c]| / 127`, `W_q[c] = clamp(round(W[c] / s_w[c]))`.
pub fn quantize_weight(w: &Tensor) -> Result<(Tensor, Vec<f32>, Vec<usize>)> {
    let c_out = w.shape()[0];
    let wd = w.as_f32()?;
    let per = wd.len() / c_out;
    let mut q = Vec::with_capacity(wd.len());
    let mut scales = Vec::with_capacity(c_out);
    let mut degenerate = Vec::new();
    for (c, row) in wd.chunks(per).enumerate() {
        let m = row.iter().fold(0.0f32, |a, v| a.max(v.abs()));
        if m > 0.0 {
            // v / (m / 127), without rounding the scale first
            q.extend(
                row.iter()
                    .map(|&v| round_clamp_i8(v as f64 * QMAX as f64 / m as f64)),
            );
            scales.push(m / QMAX as f32);
        } else {
            degenerate.push(c);
            q.extend(std::iter::repeat_n(0, row.len()));
            scales.push(1.0);
        }
    }
    Ok((Tensor::from_i8(w.shape().to_vec(), q)?, scales, degenerate))
}

/// `bias_q[c] = round(bias[c] / (s_x · s_w[c]))`, saturated to i32.
pub fn quantize_bias(bias: &[f32], s_x: f32, s_w: &[f32]) -> Vec<i32> {
    bias.iter()
        .zip(s_w)
        .map(|(&b, &s)| round_saturate_i32(b as f64 / (s_x as f64 * s as f64)))
        .collect()
}

/// Quantize the weight of every convolution in `graph`, keyed by node id.
pub fn quantize_weights(
    inherited: &Checkpoint,
    graph: &Graph,
) -> Result<BTreeMap<String, QuantizedConv>> {
    let mut out = BTreeMap::new();
    for n in graph.nodes.iter().filter(|n| n.op.is_conv()) {
        let name = &n.param_names[0];
        let (w, scales, degenerate) = quantize_weight(inherited.get(name)?)?;
        out.insert(
            n.id.clone(),
            QuantizedConv {
                weight_name: name.clone(),
                weight: Some(w),
                scales,
                degenerate,
            },
        );
    }
    Ok(out)
}

/// Reduction length of one output element of an int8-capable node.
pub(crate) fn reduction_len(op: &Op, in_shapes: &[&[usize]]) -> usize {
    match op {
        Op::Conv2d {
            in_channels,
            kernel,
            ..
        } => in_channels * kernel[0] * kernel[1],
        Op::PatchEmbed {
            in_channels, patch, ..
        } => in_channels * patch * patch,
        Op::MatMulQK | Op::MatMulAV => *in_shapes[0].last().unwrap_or(&0),
        _ => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_product_example() {
        let x = Tensor::from_i8(vec![1, 2, 1, 1], vec![1, 1]).unwrap();
        let w = Tensor::from_i8(vec![1, 2, 1, 1], vec![3, 4]).unwrap();
        let y = conv2d_1x1_int8(&x, &w, Some(&[0]), 1.0, &[1.0], 1.0).unwrap();
        assert_eq!(y.as_i8().unwrap(), &[7]);
    }

    #[test]
    fn zero_input_gives_requantized_bias() {
        let x = Tensor::from_i8(vec![1, 3, 1, 2], vec![0; 6]).unwrap();
        let w = Tensor::from_i8(vec![2, 3, 1, 1], vec![5, -7, 9, 1, 2, 3]).unwrap();
        let (sx, sw, sy) = (0.1f32, [0.02f32, 0.05], 0.3f32);
        let y = conv2d_int8(&x, &w, Some(&[1000, -333]), 1, sx, &sw, sy).unwrap();
        let e0 = round_clamp_i8(1000.0 * requant_multiplier(sx, sw[0], sy) as f64);
        let e1 = round_clamp_i8(-333.0 * requant_multiplier(sx, sw[1], sy) as f64);
        assert_eq!(y.as_i8().unwrap(), &[e0, e0, e1, e1]);
    }

    #[test]
    fn weight_rounding_example() {
        let w = Tensor::from_f32(vec![2, 2, 1, 1], vec![-0.5, 0.25, 0.0, 0.0]).unwrap();
        let (q, s, deg) = quantize_weight(&w).unwrap();
        assert_eq!(s, vec![0.5 / 127.0, 1.0]);
        assert_eq!(q.as_i8().unwrap(), &[-127, 64, 0, 0]);
        assert_eq!(deg, vec![1]);
    }

    #[test]
    fn capacity_bound() {
        let n = max_reduction_len();
        assert!(check_capacity("c", n).is_ok());
        assert!(matches!(
            check_capacity("c", n + 1),
            Err(Error::Capacity { .. })
        ));
        // every channel count of the presets fits
        assert!(check_capacity("c", 1 << 15).is_ok());
    }
}

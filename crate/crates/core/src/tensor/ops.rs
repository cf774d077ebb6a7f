use super::{strides, Tensor};
use crate::error::{Error, Result};

// Every f32 reduction below accumulates along the contraction axis in
// ascending index order, so outputs are reproducible bit for bit.

/// Unpadded cross-correlation over `B×Cin×H×W` with an `Cout×Cin×Kh×Kw`
/// kernel. Bias, when present, is added after the full reduction.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    let geom = ConvGeometry::infer(x.shape(), w.shape(), stride)?;
    let xd = x.as_f32()?;
    let wd = w.as_f32()?;
    let bd = match bias {
        Some(b) => {
            if b.numel() != geom.c_out {
                return Err(Error::dim(format!(
                    "conv bias has {} elements, weight has {} output channels",
                    b.numel(),
                    geom.c_out
                )));
            }
            Some(b.as_f32()?)
        }
        None => None,
    };

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
    } = geom;
    let mut out = vec![0f32; batch * c_out * oh * ow];
    if kh == 1 && kw == 1 && stride == 1 {
        // Pointwise: rows of the output are axpy sums over input channels.
        let plane = h * width;
        for b in 0..batch {
            let xb = &xd[b * c_in * plane..(b + 1) * c_in * plane];
            for co in 0..c_out {
                let orow = &mut out[(b * c_out + co) * plane..(b * c_out + co + 1) * plane];
                let wrow = &wd[co * c_in..(co + 1) * c_in];
                for (ci, &wv) in wrow.iter().enumerate() {
                    let xrow = &xb[ci * plane..(ci + 1) * plane];
                    for (o, &xv) in orow.iter_mut().zip(xrow) {
                        *o += wv * xv;
                    }
                }
                if let Some(bd) = bd {
                    let bv = bd[co];
                    orow.iter_mut().for_each(|o| *o += bv);
                }
            }
        }
    } else {
        for b in 0..batch {
            for co in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0f32;
                        for ci in 0..c_in {
                            for ky in 0..kh {
                                let xrow =
                                    ((b * c_in + ci) * h + oy * stride + ky) * width + ox * stride;
                                let wrow = ((co * c_in + ci) * kh + ky) * kw;
                                for kx in 0..kw {
                                    acc += xd[xrow + kx] * wd[wrow + kx];
                                }
                            }
                        }
                        if let Some(bd) = bd {
                            acc += bd[co];
                        }
                        out[((b * c_out + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
    }
    Tensor::from_f32(vec![batch, c_out, oh, ow], out)
}

/// Static geometry of an unpadded convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn infer(x: &[usize], w: &[usize], stride: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d expects 4-D input and weight, got {x:?} and {w:?}"
            )));
        }
        if x[1] != w[1] {
            return Err(Error::dim(format!(
                "conv2d input channels (axis 1 of input, {}) differ from weight (axis 1, {})",
                x[1], w[1]
            )));
        }
        if stride == 0 {
            return Err(Error::Geometry("stride must be positive".into()));
        }
        let (h, wid, kh, kw) = (x[2], x[3], w[2], w[3]);
        if kh > h || kw > wid {
            return Err(Error::Geometry(format!(
                "kernel {kh}x{kw} larger than input {h}x{wid}"
            )));
        }
        if (h - kh) % stride != 0 || (wid - kw) % stride != 0 {
            return Err(Error::Geometry(format!(
                "input {h}x{wid} is not tiled exactly by kernel {kh}x{kw} at stride {stride}"
            )));
        }
        Ok(ConvGeometry {
            batch: x[0],
            c_in: x[1],
            h,
            w: wid,
            c_out: w[0],
            kh,
            kw,
            oh: (h - kh) / stride + 1,
            ow: (wid - kw) / stride + 1,
            stride,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_out, self.oh, self.ow]
    }

    /// Multiply-accumulate count of one evaluation.
    pub fn macs(&self) -> u64 {
        (self.batch * self.c_out * self.oh * self.ow * self.c_in * self.kh * self.kw) as u64
    }
}

/// Shape rule of `matmul_batched`.
pub fn matmul_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() < 2 || a.len() != b.len() {
        return Err(Error::dim(format!(
            "matmul needs operands of equal rank ≥ 2, got {a:?} and {b:?}"
        )));
    }
    let r = a.len();
    if a[..r - 2] != b[..r - 2] {
        return Err(Error::dim(format!(
            "matmul batch axes differ: {:?} vs {:?}",
            &a[..r - 2],
            &b[..r - 2]
        )));
    }
    if a[r - 1] != b[r - 2] {
        return Err(Error::dim(format!(
            "matmul contraction mismatch: axis {} of lhs is {}, axis {} of rhs is {}",
            r - 1,
            a[r - 1],
            r - 2,
            b[r - 2]
        )));
    }
    let mut out = a[..r - 1].to_vec();
    out.push(b[r - 1]);
    Ok(out)
}

/// `...×M×K` times `...×K×N`; leading axes must match exactly.
pub fn matmul_batched(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out_shape = matmul_shape(a.shape(), b.shape())?;
    let r = a.shape().len();
    let (m, k, n) = (a.shape()[r - 2], a.shape()[r - 1], b.shape()[r - 1]);
    let batch: usize = a.shape()[..r - 2].iter().product();
    let ad = a.as_f32()?;
    let bd = b.as_f32()?;
    let mut out = vec![0f32; batch * m * n];
    for bi in 0..batch {
        let am = &ad[bi * m * k..(bi + 1) * m * k];
        let bm = &bd[bi * k * n..(bi + 1) * k * n];
        let om = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let orow = &mut om[i * n..(i + 1) * n];
            for kk in 0..k {
                let av = am[i * k + kk];
                let brow = &bm[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Tensor::from_f32(out_shape, out)
}

/// `x @ wᵀ + b` over the last axis of `x`, with `w` shaped `O×I`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.len() != 2 {
        return Err(Error::dim(format!("linear weight must be 2-D, got {ws:?}")));
    }
    let (o, i) = (ws[0], ws[1]);
    if *xs.last().unwrap() != i {
        return Err(Error::dim(format!(
            "linear input last axis is {}, weight expects {i}",
            xs.last().unwrap()
        )));
    }
    let bd = match bias {
        Some(b) if b.numel() != o => {
            return Err(Error::dim(format!(
                "linear bias has {} elements, weight has {o} outputs",
                b.numel()
            )))
        }
        Some(b) => Some(b.as_f32()?),
        None => None,
    };
    let xd = x.as_f32()?;
    let wd = w.as_f32()?;
    let mut wt = vec![0f32; i * o];
    for r in 0..o {
        for c in 0..i {
            wt[c * o + r] = wd[r * i + c];
        }
    }
    let rows = x.numel() / i;
    let mut out = vec![0f32; rows * o];
    for r in 0..rows {
        let xrow = &xd[r * i..(r + 1) * i];
        let orow = &mut out[r * o..(r + 1) * o];
        for (c, &xv) in xrow.iter().enumerate() {
            for (acc, &wv) in orow.iter_mut().zip(&wt[c * o..(c + 1) * o]) {
                *acc += wv * xv;
            }
        }
        if let Some(bd) = bd {
            orow.iter_mut().zip(bd).for_each(|(acc, &bv)| *acc += bv);
        }
    }
    let mut shape = xs.to_vec();
    *shape.last_mut().unwrap() = o;
    Tensor::from_f32(shape, out)
}

/// Max-subtracted softmax along the last axis.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let d = x.as_f32()?;
    if let Some(bad) = d.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("softmax input contains {bad}")));
    }
    let n = *x.shape().last().unwrap();
    let mut out = Vec::with_capacity(d.len());
    for row in d.chunks_exact(n) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let start = out.len();
        let mut sum = 0f32;
        for &v in row {
            let e = (v - m).exp();
            sum += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= sum);
    }
    Tensor::from_f32(x.shape().to_vec(), out)
}

/// Exact GELU, `0.5·x·(1 + erf(x/√2))`.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let out = x
        .as_f32()?
        .iter()
        .map(|&v| {
            let v = v as f64;
            (0.5 * v * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2))) as f32
        })
        .collect();
    Tensor::from_f32(x.shape().to_vec(), out)
}

/// Reference LayerNorm over the last axis with biased variance.
pub fn layernorm_ref(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let h = *x.shape().last().unwrap();
    if gamma.numel() != h || beta.numel() != h {
        return Err(Error::dim(format!(
            "layernorm over {h} features but gamma has {} and beta {}",
            gamma.numel(),
            beta.numel()
        )));
    }
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::Numeric(format!(
            "layernorm eps must be non-negative, got {eps}"
        )));
    }
    let g = gamma.as_f32()?;
    let b = beta.as_f32()?;
    let mut out = Vec::with_capacity(x.numel());
    for row in x.as_f32()?.chunks_exact(h) {
        let mean = row.iter().sum::<f32>() / h as f32;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / h as f32;
        let denom = (var + eps).sqrt();
        out.extend(
            row.iter()
                .zip(g.iter().zip(b))
                .map(|(&v, (&gv, &bv))| (v - mean) / denom * gv + bv),
        );
    }
    Tensor::from_f32(x.shape().to_vec(), out)
}

/// Axis permutation; works for every dtype.
pub fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let shape = x.shape();
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank
        || perm
            .iter()
            .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
    {
        return Err(Error::dim(format!(
            "{perm:?} is not a permutation of {rank} axes"
        )));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.numel();

    // Offsets into the source for each destination element, in order.
    let mut offsets = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }

    use super::TensorData as D;
    let data = match x.data() {
        D::F32(v) => D::F32(offsets.iter().map(|&o| v[o]).collect()),
        D::I8(v) => D::I8(offsets.iter().map(|&o| v[o]).collect()),
        D::I32(v) => D::I32(offsets.iter().map(|&o| v[o]).collect()),
    };
    Tensor::new(out_shape, data)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    x.reshape(shape)
}

/// `(B, N, C)` token stream to `(B, C, 1, N)`; `(B, C)` to `(B, C, 1, 1)`.
pub fn to_nchw(x: &Tensor) -> Result<Tensor> {
    match *x.shape() {
        [b, n, c] => permute(x, &[0, 2, 1])?.reshape(&[b, c, 1, n]),
        [b, c] => x.reshape(&[b, c, 1, 1]),
        ref s => Err(Error::dim(format!(
            "to-nchw expects rank 2 or 3, got {s:?}"
        ))),
    }
}

/// Inverse of [`to_nchw`]; `rank` is the rank of the original tensor.
pub fn from_nchw(x: &Tensor, rank: usize) -> Result<Tensor> {
    match (rank, x.shape()) {
        (3, &[b, c, 1, n]) => permute(&x.reshape(&[b, c, n])?, &[0, 2, 1]),
        (2, &[b, c, 1, 1]) => x.reshape(&[b, c]),
        (_, s) => Err(Error::dim(format!(
            "from-nchw to rank {rank} cannot take shape {s:?}"
        ))),
    }
}

/// Output shape when `rhs` broadcasts onto `lhs`: same rank, each rhs axis
/// equal to the lhs axis or 1.
pub fn broadcast_shape(lhs: &[usize], rhs: &[usize]) -> Result<Vec<usize>> {
    if lhs.len() != rhs.len() || lhs.iter().zip(rhs).any(|(&l, &r)| r != l && r != 1) {
        return Err(Error::dim(format!(
            "shape {rhs:?} does not broadcast onto {lhs:?}"
        )));
    }
    Ok(lhs.to_vec())
}

fn binary(x: &Tensor, y: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    let shape = broadcast_shape(x.shape(), y.shape())?;
    let xd = x.as_f32()?;
    let yd = y.as_f32()?;
    if x.shape() == y.shape() {
        let out = xd.iter().zip(yd).map(|(&a, &b)| f(a, b)).collect();
        return Tensor::from_f32(shape, out);
    }
    let rank = shape.len();
    let ys = strides(y.shape());
    let ystr: Vec<usize> = (0..rank)
        .map(|ax| if y.shape()[ax] == 1 { 0 } else { ys[ax] })
        .collect();
    let mut out = Vec::with_capacity(xd.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &a in xd {
        out.push(f(a, yd[off]));
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += ystr[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= ystr[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_f32(shape, out)
}

fn unary(x: &Tensor, f: impl Fn(f32) -> f32) -> Result<Tensor> {
    Tensor::from_f32(
        x.shape().to_vec(),
        x.as_f32()?.iter().map(|&v| f(v)).collect(),
    )
}

pub fn add(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    binary(x, y, |a, b| a + b)
}

pub fn sub(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    binary(x, y, |a, b| a - b)
}

pub fn mul(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    binary(x, y, |a, b| a * b)
}

pub fn mul_scalar(x: &Tensor, s: f32) -> Result<Tensor> {
    unary(x, |v| v * s)
}

pub fn square(x: &Tensor) -> Result<Tensor> {
    unary(x, |v| v * v)
}

/// `1/√(v + eps)` on a non-negative variance tensor.
pub fn rsqrt_eps(v: &Tensor, eps: f32) -> Result<Tensor> {
    let d = v.as_f32()?;
    if let Some(bad) = d.iter().find(|&&x| !(x + eps > 0.0)) {
        return Err(Error::Numeric(format!(
            "rsqrt_eps needs v + eps > 0, found v = {bad} with eps = {eps}"
        )));
    }
    unary(v, |x| 1.0 / (x + eps).sqrt())
}

/// Concatenate along `axis`; every other axis must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat of zero tensors"))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(Error::dim(format!(
            "concat axis {axis} out of range for rank {rank}"
        )));
    }
    for p in parts {
        let s = p.shape();
        if s.len() != rank || (0..rank).any(|ax| ax != axis && s[ax] != first.shape()[ax]) {
            return Err(Error::dim(format!(
                "concat operand {s:?} incompatible with {:?} on axis {axis}",
                first.shape()
            )));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut shape = first.shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let datas: Vec<&[f32]> = parts.iter().map(|p| p.as_f32()).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for (p, d) in parts.iter().zip(&datas) {
            let span = p.shape()[axis] * inner;
            out.extend_from_slice(&d[o * span..(o + 1) * span]);
        }
    }
    Tensor::from_f32(shape, out)
}

/// `len` consecutive entries of `axis` starting at `start`.
pub fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let s = x.shape();
    if axis >= s.len() || len == 0 || start + len > s[axis] {
        return Err(Error::dim(format!(
            "slice [{start}, {}) on axis {axis} out of range for {s:?}",
            start + len
        )));
    }
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    let d = x.as_f32()?;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * s[axis] + start) * inner;
        out.extend_from_slice(&d[base..base + len * inner]);
    }
    let mut shape = s.to_vec();
    shape[axis] = len;
    Tensor::from_f32(shape, out)
}

/// Transpose of the last two axes.
pub fn transpose_last2(x: &Tensor) -> Result<Tensor> {
    let r = x.shape().len();
    if r < 2 {
        return Err(Error::dim("transpose needs rank ≥ 2"));
    }
    let mut perm: Vec<usize> = (0..r).collect();
    perm.swap(r - 1, r - 2);
    permute(x, &perm)
}

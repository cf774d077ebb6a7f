use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shape, matmul_shape, ConvGeometry, DType};

/// Which operator set a graph may use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dialect {
    /// Linear / LayerNorm / MatMul, as in the reference DeiT.
    Original,
    /// Convolutions, elementwise ops, softmax, and data movement only.
    Lowered,
}

/// Placement of the feature axis for per-token operators.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Features on the last axis: `(B, N, C)` or `(B, C)`.
    #[default]
    Tokens,
    /// Features on axis 1 of a `(B, C, 1, N)` tensor.
    Channels,
}

fn is_tokens(l: &Layout) -> bool {
    *l == Layout::Tokens
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "attrs")]
pub enum Op {
    Linear {
        in_features: usize,
        out_features: usize,
        #[serde(default, skip_serializing_if = "is_tokens")]
        layout: Layout,
    },
    LayerNorm {
        dim: usize,
        eps: f32,
        #[serde(default, skip_serializing_if = "is_tokens")]
        layout: Layout,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: usize,
    },
    PatchEmbed {
        in_channels: usize,
        embed_dim: usize,
        patch: usize,
    },
    /// `a @ bᵀ` over the last two axes.
    MatMulQK,
    /// `a @ b` over the last two axes.
    MatMulAV,
    Softmax,
    Gelu,
    /// Binary ops take their right operand from a second input edge, or from
    /// the node's single parameter when `param_shape` is set.
    Add {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        param_shape: Option<Vec<usize>>,
    },
    Sub {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        param_shape: Option<Vec<usize>>,
    },
    Mul {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        param_shape: Option<Vec<usize>>,
    },
    MulScalar {
        value: f32,
    },
    Square,
    RsqrtEps {
        eps: f32,
    },
    Permute {
        perm: Vec<usize>,
    },
    Reshape {
        shape: Vec<usize>,
    },
    Concat {
        axis: usize,
    },
    AddPosEmbed {
        tokens: usize,
        dim: usize,
    },
    /// Prepends `count` learned tokens, one parameter each, on axis 1.
    TokenInsert {
        count: usize,
        dim: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    /// f32 → i8 boundary at the given activation scale.
    Quantize {
        scale: f32,
    },
    /// i8 → f32 boundary.
    Dequantize {
        scale: f32,
    },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Linear { .. } => "Linear",
            Op::LayerNorm { .. } => "LayerNorm",
            Op::Conv2d { .. } => "Conv2d",
            Op::PatchEmbed { .. } => "PatchEmbed",
            Op::MatMulQK => "MatMulQK",
            Op::MatMulAV => "MatMulAV",
            Op::Softmax => "Softmax",
            Op::Gelu => "Gelu",
            Op::Add { .. } => "Add",
            Op::Sub { .. } => "Sub",
            Op::Mul { .. } => "Mul",
            Op::MulScalar { .. } => "MulScalar",
            Op::Square => "Square",
            Op::RsqrtEps { .. } => "RsqrtEps",
            Op::Permute { .. } => "Permute",
            Op::Reshape { .. } => "Reshape",
            Op::Concat { .. } => "Concat",
            Op::AddPosEmbed { .. } => "AddPosEmbed",
            Op::TokenInsert { .. } => "TokenInsert",
            Op::Slice { .. } => "Slice",
            Op::Quantize { .. } => "Quantize",
            Op::Dequantize { .. } => "Dequantize",
        }
    }

    /// Kinds allowed in the lowered dialect.
    pub fn is_lowered_kind(&self) -> bool {
        !matches!(self, Op::Linear { .. } | Op::LayerNorm { .. })
    }

    /// Kinds that run as convolutions on an accelerator.
    pub fn is_conv(&self) -> bool {
        matches!(self, Op::Conv2d { .. } | Op::PatchEmbed { .. })
    }

    pub fn is_matmul(&self) -> bool {
        matches!(self, Op::MatMulQK | Op::MatMulAV)
    }

    /// Number of edge inputs the node takes.
    pub fn arity(&self) -> Arity {
        match self {
            Op::MatMulQK | Op::MatMulAV => Arity::Exactly(2),
            Op::Add { param_shape } | Op::Sub { param_shape } | Op::Mul { param_shape } => {
                Arity::Exactly(if param_shape.is_some() { 1 } else { 2 })
            }
            Op::Concat { .. } => Arity::AtLeast(1),
            _ => Arity::Exactly(1),
        }
    }

    /// Shapes of the parameters the node consumes, in `param_names` order.
    /// `with_bias` selects the optional bias of Linear and Conv2d.
    pub fn param_shapes(&self, with_bias: bool) -> Vec<Vec<usize>> {
        match self {
            Op::Linear {
                in_features,
                out_features,
                ..
            } => {
                let mut v = vec![vec![*out_features, *in_features]];
                if with_bias {
                    v.push(vec![*out_features]);
                }
                v
            }
            Op::LayerNorm { dim, .. } => vec![vec![*dim], vec![*dim]],
            Op::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let mut v = vec![vec![*out_channels, *in_channels, kernel[0], kernel[1]]];
                if with_bias {
                    v.push(vec![*out_channels]);
                }
                v
            }
            Op::PatchEmbed {
                in_channels,
                embed_dim,
                patch,
            } => vec![
                vec![*embed_dim, *in_channels, *patch, *patch],
                vec![*embed_dim],
            ],
            Op::Add { param_shape } | Op::Sub { param_shape } | Op::Mul { param_shape } => {
                param_shape.iter().cloned().collect()
            }
            Op::AddPosEmbed { tokens, dim } => vec![vec![1, *tokens, *dim]],
            Op::TokenInsert { count, dim } => vec![vec![1, 1, *dim]; *count],
            _ => Vec::new(),
        }
    }

    /// Whether a bias parameter is optional for this kind.
    pub fn has_optional_bias(&self) -> bool {
        matches!(self, Op::Linear { .. } | Op::Conv2d { .. })
    }

    /// Static shape rule.
    pub fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        match self.arity() {
            Arity::Exactly(n) if inputs.len() != n => {
                return Err(Error::dim(format!(
                    "{} takes {n} inputs, got {}",
                    self.kind(),
                    inputs.len()
                )))
            }
            Arity::AtLeast(n) if inputs.len() < n => {
                return Err(Error::dim(format!(
                    "{} takes at least {n} inputs, got {}",
                    self.kind(),
                    inputs.len()
                )))
            }
            _ => {}
        }
        let x = inputs[0];
        match self {
            Op::Linear {
                in_features,
                out_features,
                layout,
            } => match layout {
                Layout::Tokens => {
                    if x.last() != Some(in_features) {
                        return Err(Error::dim(format!(
                            "Linear expects last axis {in_features}, input is {x:?}"
                        )));
                    }
                    let mut s = x.to_vec();
                    *s.last_mut().unwrap() = *out_features;
                    Ok(s)
                }
                Layout::Channels => {
                    if x.len() != 4 || x[1] != *in_features {
                        return Err(Error::dim(format!(
                            "channel-layout Linear expects (B, {in_features}, 1, N), input is {x:?}"
                        )));
                    }
                    Ok(vec![x[0], *out_features, x[2], x[3]])
                }
            },
            Op::LayerNorm { dim, layout, .. } => {
                let ok = match layout {
                    Layout::Tokens => x.last() == Some(dim),
                    Layout::Channels => x.len() == 4 && x[1] == *dim,
                };
                if !ok {
                    return Err(Error::dim(format!(
                        "LayerNorm over {dim} features ({layout:?}) cannot take {x:?}"
                    )));
                }
                Ok(x.to_vec())
            }
            Op::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                let g = ConvGeometry::infer(
                    x,
                    &[*out_channels, *in_channels, kernel[0], kernel[1]],
                    *stride,
                )?;
                Ok(g.output_shape())
            }
            Op::PatchEmbed {
                in_channels,
                embed_dim,
                patch,
            } => {
                let g =
                    ConvGeometry::infer(x, &[*embed_dim, *in_channels, *patch, *patch], *patch)?;
                Ok(g.output_shape())
            }
            Op::MatMulQK => {
                let b = inputs[1];
                let mut bt = b.to_vec();
                let r = bt.len();
                if r < 2 {
                    return Err(Error::dim("MatMulQK operands need rank ≥ 2"));
                }
                bt.swap(r - 1, r - 2);
                matmul_shape(x, &bt)
            }
            Op::MatMulAV => matmul_shape(x, inputs[1]),
            Op::Softmax
            | Op::Gelu
            | Op::MulScalar { .. }
            | Op::Square
            | Op::RsqrtEps { .. }
            | Op::Quantize { .. }
            | Op::Dequantize { .. } => Ok(x.to_vec()),
            Op::Add { param_shape } | Op::Sub { param_shape } | Op::Mul { param_shape } => {
                match param_shape {
                    Some(p) => broadcast_shape(x, p),
                    None => broadcast_shape(x, inputs[1]),
                }
            }
            Op::Permute { perm } => {
                let mut seen = HashSet::new();
                if perm.len() != x.len() || perm.iter().any(|&p| p >= x.len() || !seen.insert(p)) {
                    return Err(Error::dim(format!(
                        "{perm:?} is not a permutation of {x:?}"
                    )));
                }
                Ok(perm.iter().map(|&p| x[p]).collect())
            }
            Op::Reshape { shape } => {
                let a: usize = x.iter().product();
                let b: usize = shape.iter().product();
                if a != b || shape.is_empty() || shape.contains(&0) {
                    return Err(Error::dim(format!("cannot reshape {x:?} to {shape:?}")));
                }
                Ok(shape.clone())
            }
            Op::Concat { axis } => {
                if *axis >= x.len() {
                    return Err(Error::dim(format!("concat axis {axis} out of range")));
                }
                let mut s = x.to_vec();
                for other in &inputs[1..] {
                    if other.len() != x.len()
                        || (0..x.len()).any(|a| a != *axis && other[a] != x[a])
                    {
                        return Err(Error::dim(format!(
                            "concat operand {other:?} incompatible with {x:?}"
                        )));
                    }
                    s[*axis] += other[*axis];
                }
                Ok(s)
            }
            Op::AddPosEmbed { tokens, dim } => {
                if x.len() != 3 || x[1] != *tokens || x[2] != *dim {
                    return Err(Error::dim(format!(
                        "position embedding for ({tokens}, {dim}) cannot take {x:?}"
                    )));
                }
                Ok(x.to_vec())
            }
            Op::TokenInsert { count, dim } => {
                if x.len() != 3 || x[2] != *dim {
                    return Err(Error::dim(format!(
                        "token insert of width {dim} cannot take {x:?}"
                    )));
                }
                Ok(vec![x[0], x[1] + count, x[2]])
            }
            Op::Slice { axis, start, len } => {
                if *axis >= x.len() || *len == 0 || start + len > x[*axis] {
                    return Err(Error::dim(format!(
                        "slice [{start}, {}) on axis {axis} out of range for {x:?}",
                        start + len
                    )));
                }
                let mut s = x.to_vec();
                s[*axis] = *len;
                Ok(s)
            }
        }
    }

    /// Output dtype given the input dtypes.
    pub fn output_dtype(&self, inputs: &[DType]) -> DType {
        match self {
            Op::Quantize { .. } => DType::I8,
            Op::Dequantize { .. } => DType::F32,
            Op::Permute { .. } | Op::Reshape { .. } | Op::Slice { .. } => inputs[0],
            Op::Conv2d { .. } | Op::PatchEmbed { .. } | Op::MatMulQK | Op::MatMulAV => {
                if inputs.iter().all(|&d| d == DType::I8) {
                    DType::I8
                } else {
                    DType::F32
                }
            }
            _ => DType::F32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arity {
    Exactly(usize),
    AtLeast(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub id: usize,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpNode {
    pub id: String,
    #[serde(flatten)]
    pub op: Op,
    pub inputs: Vec<usize>,
    pub output: usize,
    pub param_names: Vec<String>,
}

/// Operator DAG. Nodes are stored in topological order and every node
/// produces exactly one output edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub dialect: Dialect,
    pub input: usize,
    pub output: usize,
    pub edges: Vec<Edge>,
    pub nodes: Vec<OpNode>,
}

impl Graph {
    pub fn edge(&self, id: usize) -> Option<&Edge> {
        self.edges.get(id).filter(|e| e.id == id)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.edges[self.input].shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.edges[self.output].shape
    }

    pub fn node(&self, id: &str) -> Option<&OpNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn producer(&self, edge: usize) -> Option<&OpNode> {
        self.nodes.iter().find(|n| n.output == edge)
    }

    /// Stable name of an edge: the id of the node producing it, or `input`.
    pub fn edge_name(&self, edge: usize) -> String {
        if edge == self.input {
            return "input".to_string();
        }
        self.producer(edge)
            .map(|n| n.id.clone())
            .unwrap_or_else(|| format!("edge{edge}"))
    }

    pub fn count_kind(&self, kind: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    /// Every parameter consumed by the graph with its expected shape, in
    /// first-use order. Names consumed twice are listed once.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for n in &self.nodes {
            let with_bias = n.param_names.len() > 1 || !n.op.has_optional_bias();
            let shapes = n.op.param_shapes(with_bias);
            for (name, shape) in n.param_names.iter().zip(shapes) {
                if seen.insert(name.clone()) {
                    out.push((name.clone(), shape));
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Graph> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Incremental graph construction with shape inference.
#[derive(Debug)]
pub struct GraphBuilder {
    edges: Vec<Edge>,
    nodes: Vec<OpNode>,
    ids: HashSet<String>,
    input: usize,
}

impl GraphBuilder {
    pub fn new(input_shape: Vec<usize>) -> Self {
        GraphBuilder {
            edges: vec![Edge {
                id: 0,
                shape: input_shape,
                dtype: DType::F32,
            }],
            nodes: Vec::new(),
            ids: HashSet::new(),
            input: 0,
        }
    }

    pub fn input(&self) -> usize {
        self.input
    }

    pub fn shape(&self, edge: usize) -> &[usize] {
        &self.edges[edge].shape
    }

    pub fn dtype(&self, edge: usize) -> DType {
        self.edges[edge].dtype
    }

    pub fn push(
        &mut self,
        id: impl Into<String>,
        op: Op,
        inputs: &[usize],
        params: &[&str],
    ) -> Result<usize> {
        let id = id.into();
        if !self.ids.insert(id.clone()) {
            return Err(Error::DuplicateName(id));
        }
        let shapes: Vec<&[usize]> = inputs
            .iter()
            .map(|&e| self.edges[e].shape.as_slice())
            .collect();
        let shape = op.output_shape(&shapes).map_err(|e| e.at_node(&id))?;
        let dtypes: Vec<DType> = inputs.iter().map(|&e| self.edges[e].dtype).collect();
        let dtype = op.output_dtype(&dtypes);
        let out = self.edges.len();
        self.edges.push(Edge {
            id: out,
            shape,
            dtype,
        });
        self.nodes.push(OpNode {
            id,
            op,
            inputs: inputs.to_vec(),
            output: out,
            param_names: params.iter().map(|s| s.to_string()).collect(),
        });
        Ok(out)
    }

    pub fn finish(self, dialect: Dialect, output: usize) -> Graph {
        Graph {
            dialect,
            input: self.input,
            output,
            edges: self.edges,
            nodes: self.nodes,
        }
    }
}

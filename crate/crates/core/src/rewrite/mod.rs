//! Dialect-lowering passes: token layout to `(B, C, 1, N)`, Linear to
//! pointwise Conv2d, and LayerNorm to a convolution subgraph.
//!
//! Every pass is a pure `Graph -> Graph` function that keeps node ids of
//! untouched nodes, so replaying a [`RewritePlan`] reproduces the same graph.
//! Each pass also reports how parameters of the rewritten nodes must be
//! derived from the original checkpoint; [`crate::checkpoint::inherit_weights`]
//! consumes those directives.

mod attention;
mod layernorm;
mod layout;
mod linear;

pub use attention::{attention_relayout, attention_relayout_recorded};
pub use layernorm::{layernorm_to_conv, layernorm_to_conv_recorded};
pub use layout::{layout_to_nchw, layout_to_nchw_recorded};
pub use linear::{linear_to_conv, linear_to_conv_recorded};

use serde::{Deserialize, Serialize};

use crate::checkpoint::ParamDirective;
use crate::error::{Error, Result};
use crate::graph::{validate, Dialect, Graph, GraphBuilder, OpNode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    LayoutToNchw,
    LinearToConv,
    LayernormToConv,
    AttentionRelayout,
}

impl Pass {
    pub fn name(self) -> &'static str {
        match self {
            Pass::LayoutToNchw => "layout_to_nchw",
            Pass::LinearToConv => "linear_to_conv",
            Pass::LayernormToConv => "layernorm_to_conv",
            Pass::AttentionRelayout => "attention_relayout",
        }
    }

    pub fn run(self, graph: &Graph) -> Result<(Graph, PassRecord)> {
        let r = match self {
            Pass::LayoutToNchw => layout_to_nchw_recorded(graph),
            Pass::LinearToConv => linear_to_conv_recorded(graph),
            Pass::LayernormToConv => layernorm_to_conv_recorded(graph),
            Pass::AttentionRelayout => attention_relayout_recorded(graph),
        };
        r.map_err(|e| e.in_pass(self.name()))
    }
}

/// One node replaced by the listed nodes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substitution {
    pub old: String,
    pub new: Vec<String>,
}

/// What a single pass changed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PassRecord {
    pub substitutions: Vec<Substitution>,
    /// Data-movement nodes added without replacing anything.
    pub inserted: Vec<String>,
    pub params: Vec<ParamDirective>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewritePlan {
    pub passes: Vec<Pass>,
    pub applied: Vec<Substitution>,
    pub inserted: Vec<String>,
    pub params: Vec<ParamDirective>,
}

impl RewritePlan {
    /// The default lowering pipeline.
    pub fn standard() -> Self {
        RewritePlan {
            passes: vec![
                Pass::LayoutToNchw,
                Pass::LinearToConv,
                Pass::LayernormToConv,
            ],
            ..Default::default()
        }
    }

    /// Re-run the recorded passes on `graph`.
    pub fn replay(&self, graph: &Graph) -> Result<Graph> {
        let mut g = graph.clone();
        for p in &self.passes {
            g = p.run(&g)?.0;
        }
        if g.nodes.iter().all(|n| n.op.is_lowered_kind()) {
            g.dialect = Dialect::Lowered;
        }
        Ok(g)
    }

    fn absorb(&mut self, rec: PassRecord) {
        self.applied.extend(rec.substitutions);
        self.inserted.extend(rec.inserted);
        for d in rec.params {
            // a later directive for the same name supersedes the earlier one
            self.params.retain(|p| p.name != d.name);
            self.params.push(d);
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Lower an original-dialect graph with the standard pipeline.
pub fn lower(graph: &Graph) -> Result<(Graph, RewritePlan)> {
    lower_with(graph, &RewritePlan::standard().passes)
}

/// Lower with an explicit pass list.
pub fn lower_with(graph: &Graph, passes: &[Pass]) -> Result<(Graph, RewritePlan)> {
    if graph.dialect == Dialect::Lowered {
        return Err(Error::Dialect("dialect already lowered".into()));
    }
    let diags = validate(graph);
    if !diags.is_empty() {
        return Err(Error::Invalid(format!(
            "{} diagnostics, first: {}",
            diags.len(),
            diags[0].message
        )));
    }
    let mut plan = RewritePlan {
        passes: passes.to_vec(),
        ..Default::default()
    };
    let mut g = graph.clone();
    for &p in passes {
        let (next, rec) = p.run(&g)?;
        plan.absorb(rec);
        g = next;
    }
    if let Some(n) = g.nodes.iter().find(|n| !n.op.is_lowered_kind()) {
        return Err(Error::Dialect(format!(
            "{} node `{}` survived lowering",
            n.op.kind(),
            n.id
        )));
    }
    g.dialect = Dialect::Lowered;
    if g.output_shape() != graph.output_shape() {
        return Err(Error::dim(format!(
            "lowering changed the output shape from {:?} to {:?}",
            graph.output_shape(),
            g.output_shape()
        )));
    }
    let diags = validate(&g);
    if !diags.is_empty() {
        return Err(Error::Invalid(format!(
            "lowered graph has {} diagnostics, first: {}",
            diags.len(),
            diags[0].message
        )));
    }
    Ok((g, plan))
}

/// Copies nodes from a source graph into a fresh builder, remapping edges.
pub(crate) struct Rebuild<'g> {
    pub src: &'g Graph,
    pub b: GraphBuilder,
    map: Vec<Option<usize>>,
}

impl<'g> Rebuild<'g> {
    pub fn new(src: &'g Graph) -> Self {
        let b = GraphBuilder::new(src.input_shape().to_vec());
        let mut map = vec![None; src.edges.len()];
        map[src.input] = Some(b.input());
        Rebuild { src, b, map }
    }

    pub fn mapped(&self, old: usize) -> Result<usize> {
        self.map
            .get(old)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Invalid(format!("edge {old} read before it was produced")))
    }

    pub fn bind(&mut self, old: usize, new: usize) {
        self.map[old] = Some(new);
    }

    /// Push `node` unchanged apart from edge remapping.
    pub fn copy(&mut self, node: &OpNode) -> Result<usize> {
        let ins: Vec<usize> = node
            .inputs
            .iter()
            .map(|&e| self.mapped(e))
            .collect::<Result<_>>()?;
        let params: Vec<&str> = node.param_names.iter().map(String::as_str).collect();
        let out = self
            .b
            .push(node.id.clone(), node.op.clone(), &ins, &params)?;
        self.bind(node.output, out);
        Ok(out)
    }

    pub fn finish(self) -> Result<Graph> {
        let out = self.mapped(self.src.output)?;
        Ok(self.b.finish(self.src.dialect, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_deit, ModelConfig};

    #[test]
    fn lowering_tiny_counts() {
        let g = build_deit(&ModelConfig::tiny()).unwrap();
        let (l, plan) = lower(&g).unwrap();
        assert_eq!(l.dialect, Dialect::Lowered);
        assert_eq!(l.count_kind("Linear"), 0);
        assert_eq!(l.count_kind("LayerNorm"), 0);
        // 49 pointwise replacements plus two mean convs per LayerNorm
        assert_eq!(l.count_kind("Conv2d"), 49 + 2 * 25);
        let ln_subs = plan.applied.iter().filter(|s| s.new.len() > 1).count();
        assert_eq!(ln_subs, 25);
        assert_eq!(plan.applied.len(), 49 + 25);
        assert_eq!(l.output_shape(), g.output_shape());
        assert!(validate(&l).is_empty());
    }

    #[test]
    fn substitutions_are_unique() {
        let g = build_deit(&ModelConfig::toy().distilled()).unwrap();
        let (_, plan) = lower(&g).unwrap();
        let mut seen = std::collections::HashSet::new();
        for s in &plan.applied {
            assert!(seen.insert(s.old.clone()), "{} substituted twice", s.old);
        }
    }

    #[test]
    fn lowering_twice_is_rejected() {
        let g = build_deit(&ModelConfig::toy()).unwrap();
        let (l, _) = lower(&g).unwrap();
        let err = lower(&l).unwrap_err();
        assert!(err.to_string().contains("dialect already lowered"));
    }

    #[test]
    fn replay_reproduces_graph() {
        let g = build_deit(&ModelConfig::toy()).unwrap();
        let (l, plan) = lower(&g).unwrap();
        assert_eq!(plan.replay(&g).unwrap(), l);
        let (l2, plan2) = lower(&g).unwrap();
        assert_eq!(l2, l);
        assert_eq!(plan2, plan);
    }

    #[test]
    fn pass_errors_carry_pass_name() {
        let g = build_deit(&ModelConfig::toy()).unwrap();
        // linear_to_conv before the layout pass
        let err = lower_with(&g, &[Pass::LinearToConv]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("linear_to_conv"), "{msg}");
        assert!(
            matches!(err, Error::Pass { ref source, .. } if matches!(**source, Error::PassOrder { .. }))
        );
    }
}

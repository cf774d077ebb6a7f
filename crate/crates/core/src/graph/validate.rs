use std::collections::{HashMap, HashSet};

use serde::Serialize;

use super::ir::{Arity, Dialect, Graph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    DuplicateId,
    UnknownEdge,
    DanglingEdge,
    MultipleProducers,
    /// A node reads an edge produced later in the node order.
    Order,
    Arity,
    Shape,
    DType,
    Params,
    Dialect,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub node: Option<String>,
    pub kind: DiagnosticKind,
    pub message: String,
}

/// Check DAG, shape, dtype, parameter and dialect invariants. Empty result
/// means the graph is well formed.
pub fn validate(graph: &Graph) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let mut push = |node: Option<&str>, kind, message: String| {
        diags.push(Diagnostic {
            node: node.map(str::to_string),
            kind,
            message,
        })
    };

    for (i, e) in graph.edges.iter().enumerate() {
        if e.id != i {
            push(
                None,
                DiagnosticKind::UnknownEdge,
                format!("edge slot {i} carries id {}", e.id),
            );
        }
    }
    let edge_ok = |e: usize| e < graph.edges.len();
    for (what, e) in [("input", graph.input), ("output", graph.output)] {
        if !edge_ok(e) {
            push(
                None,
                DiagnosticKind::UnknownEdge,
                format!("graph {what} edge {e} does not exist"),
            );
        }
    }

    let mut ids = HashSet::new();
    let mut producer: HashMap<usize, usize> = HashMap::new();
    for (i, n) in graph.nodes.iter().enumerate() {
        if !ids.insert(n.id.as_str()) {
            push(
                Some(&n.id),
                DiagnosticKind::DuplicateId,
                format!("node id `{}` repeats", n.id),
            );
        }
        if !edge_ok(n.output) {
            push(
                Some(&n.id),
                DiagnosticKind::UnknownEdge,
                format!("output edge {} does not exist", n.output),
            );
            continue;
        }
        if n.output == graph.input {
            push(
                Some(&n.id),
                DiagnosticKind::MultipleProducers,
                "node writes the graph input edge".into(),
            );
        } else if let Some(prev) = producer.insert(n.output, i) {
            push(
                Some(&n.id),
                DiagnosticKind::MultipleProducers,
                format!(
                    "edge {} is also produced by `{}`",
                    n.output, graph.nodes[prev].id
                ),
            );
        }
    }

    let mut consumed = HashSet::new();
    for n in &graph.nodes {
        consumed.extend(n.inputs.iter().copied());
    }
    consumed.insert(graph.output);
    for e in 0..graph.edges.len() {
        if e != graph.input && !producer.contains_key(&e) && consumed.contains(&e) {
            push(
                None,
                DiagnosticKind::DanglingEdge,
                format!("edge {e} is read but has no producer"),
            );
        }
    }

    for (i, n) in graph.nodes.iter().enumerate() {
        let id = Some(n.id.as_str());
        if graph.dialect == Dialect::Lowered && !n.op.is_lowered_kind() {
            push(
                id,
                DiagnosticKind::Dialect,
                format!("{} node in a lowered graph", n.op.kind()),
            );
        }

        let bad_arity = match n.op.arity() {
            Arity::Exactly(k) => n.inputs.len() != k,
            Arity::AtLeast(k) => n.inputs.len() < k,
        };
        if bad_arity {
            push(
                id,
                DiagnosticKind::Arity,
                format!("{} with {} inputs", n.op.kind(), n.inputs.len()),
            );
            continue;
        }

        let expected_params = n.op.param_shapes(true).len();
        let params_ok = if n.op.has_optional_bias() {
            n.param_names.len() == expected_params || n.param_names.len() + 1 == expected_params
        } else {
            n.param_names.len() == expected_params
        };
        if !params_ok {
            push(
                id,
                DiagnosticKind::Params,
                format!(
                    "{} expects {expected_params} parameters, has {}",
                    n.op.kind(),
                    n.param_names.len()
                ),
            );
        }

        let mut readable = true;
        for &e in &n.inputs {
            if !edge_ok(e) {
                push(
                    id,
                    DiagnosticKind::UnknownEdge,
                    format!("input edge {e} does not exist"),
                );
                readable = false;
            } else if e == graph.input {
                continue;
            } else if let Some(&p) = producer.get(&e) {
                if p >= i {
                    push(
                        id,
                        DiagnosticKind::Order,
                        format!("reads edge {e} produced later by `{}`", graph.nodes[p].id),
                    );
                }
            }
        }
        if !readable || !edge_ok(n.output) {
            continue;
        }

        let shapes: Vec<&[usize]> = n
            .inputs
            .iter()
            .map(|&e| graph.edges[e].shape.as_slice())
            .collect();
        match n.op.output_shape(&shapes) {
            Ok(s) if s != graph.edges[n.output].shape => push(
                id,
                DiagnosticKind::Shape,
                format!(
                    "shape rule gives {s:?}, edge records {:?}",
                    graph.edges[n.output].shape
                ),
            ),
            Ok(_) => {}
            Err(e) => push(id, DiagnosticKind::Shape, e.to_string()),
        }
        let dtypes: Vec<_> = n.inputs.iter().map(|&e| graph.edges[e].dtype).collect();
        let dt = n.op.output_dtype(&dtypes);
        if dt != graph.edges[n.output].dtype {
            push(
                id,
                DiagnosticKind::DType,
                format!(
                    "dtype rule gives {dt}, edge records {}",
                    graph.edges[n.output].dtype
                ),
            );
        }
    }
    diags
}

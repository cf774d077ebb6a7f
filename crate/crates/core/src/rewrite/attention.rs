use std::collections::{HashMap, HashSet};

use super::{PassRecord, Rebuild, Substitution};
use crate::error::Result;
use crate::graph::{Graph, Op};

/// Fold the layout transforms around the attention head split and merge
/// into the head reshapes themselves.
///
/// After [`super::layout_to_nchw`] the qkv projection output `(B, 3C, 1, N)`
/// is first moved back to `(B, N, 3C)` and then split into heads; the merged
/// context is moved forward again before the output projection. Both are
/// rewritten as one reshape and one permute on the channel layout:
///
/// ```text
/// (B,3C,1,N) -> reshape (B,3,h,d,N) -> permute [1,0,2,4,3] -> (3,B,h,N,d)
/// (B,h,N,d)  -> permute [0,1,3,2]   -> reshape (B,C,1,N)
/// ```
///
/// The pass only moves data, so outputs are bitwise unchanged.
pub fn attention_relayout(graph: &Graph) -> Result<Graph> {
    attention_relayout_recorded(graph).map(|(g, _)| g)
}

enum Action {
    Drop,
    Replace { op: Op, input: usize },
}

struct Matcher<'g> {
    g: &'g Graph,
    producer: HashMap<usize, usize>,
    uses: HashMap<usize, usize>,
}

impl<'g> Matcher<'g> {
    fn new(g: &'g Graph) -> Self {
        let mut producer = HashMap::new();
        let mut uses = HashMap::new();
        for (i, n) in g.nodes.iter().enumerate() {
            producer.insert(n.output, i);
            for &e in &n.inputs {
                *uses.entry(e).or_insert(0) += 1;
            }
        }
        *uses.entry(g.output).or_insert(0) += 1;
        Matcher { g, producer, uses }
    }

    /// Producer of `edge`, if that edge has no other reader.
    fn sole_producer(&self, edge: usize) -> Option<usize> {
        if self.uses.get(&edge) != Some(&1) {
            return None;
        }
        self.producer.get(&edge).copied()
    }

    fn the_input_of(&self, node: usize) -> usize {
        self.g.nodes[node].inputs[0]
    }

    fn shape(&self, edge: usize) -> &[usize] {
        &self.g.edges[edge].shape
    }

    fn perm(&self, node: usize) -> Option<&[usize]> {
        match &self.g.nodes[node].op {
            Op::Permute { perm } => Some(perm),
            _ => None,
        }
    }

    fn is_reshape(&self, node: usize) -> bool {
        matches!(self.g.nodes[node].op, Op::Reshape { .. })
    }

    /// `(B,3C,1,N) -reshape-> (B,3C,N) -permute-> (B,N,3C) -reshape-> (B,N,3,h,d) -permute-> (3,B,h,N,d)`
    fn split(&self, heads: usize) -> Option<Vec<(usize, Action)>> {
        if self.perm(heads)? != [2, 0, 3, 1, 4] {
            return None;
        }
        let split = self.sole_producer(self.the_input_of(heads))?;
        let back = self.sole_producer(self.the_input_of(split))?;
        let flat = self.sole_producer(self.the_input_of(back))?;
        if !self.is_reshape(split) || self.perm(back)? != [0, 2, 1] || !self.is_reshape(flat) {
            return None;
        }
        let src = self.the_input_of(flat);
        let &[b, c3, one, n] = self.shape(src) else {
            return None;
        };
        let &[b2, n2, three, h, d] = self.shape(self.the_input_of(heads)) else {
            return None;
        };
        if one != 1 || b2 != b || n2 != n || three * h * d != c3 {
            return None;
        }
        Some(vec![
            (flat, Action::Drop),
            (back, Action::Drop),
            (
                split,
                Action::Replace {
                    op: Op::Reshape {
                        shape: vec![b, three, h, d, n],
                    },
                    input: src,
                },
            ),
            (
                heads,
                Action::Replace {
                    op: Op::Permute {
                        perm: vec![1, 0, 2, 4, 3],
                    },
                    input: self.g.nodes[split].output,
                },
            ),
        ])
    }

    /// `(B,h,N,d) -permute-> (B,N,h,d) -reshape-> (B,N,C) -permute-> (B,C,N) -reshape-> (B,C,1,N)`
    fn merge(&self, last: usize) -> Option<Vec<(usize, Action)>> {
        if !self.is_reshape(last) {
            return None;
        }
        let &[b, c, one, n] = self.shape(self.g.nodes[last].output) else {
            return None;
        };
        let fwd = self.sole_producer(self.the_input_of(last))?;
        let merged = self.sole_producer(self.the_input_of(fwd))?;
        let merge = self.sole_producer(self.the_input_of(merged))?;
        if self.perm(fwd)? != [0, 2, 1]
            || !self.is_reshape(merged)
            || self.perm(merge)? != [0, 2, 1, 3]
        {
            return None;
        }
        let src = self.the_input_of(merge);
        let &[b2, h, n2, d] = self.shape(src) else {
            return None;
        };
        if one != 1 || b2 != b || n2 != n || h * d != c {
            return None;
        }
        Some(vec![
            (
                merge,
                Action::Replace {
                    op: Op::Permute {
                        perm: vec![0, 1, 3, 2],
                    },
                    input: src,
                },
            ),
            (merged, Action::Drop),
            (fwd, Action::Drop),
            (
                last,
                Action::Replace {
                    op: Op::Reshape {
                        shape: vec![b, c, 1, n],
                    },
                    input: self.g.nodes[merge].output,
                },
            ),
        ])
    }
}

pub fn attention_relayout_recorded(graph: &Graph) -> Result<(Graph, PassRecord)> {
    let m = Matcher::new(graph);
    let mut actions: HashMap<usize, Action> = HashMap::new();
    let mut rec = PassRecord::default();
    let mut claimed = HashSet::new();
    for i in 0..graph.nodes.len() {
        let Some(found) = m.split(i).or_else(|| m.merge(i)) else {
            continue;
        };
        if found.iter().any(|(j, _)| claimed.contains(j)) {
            continue;
        }
        let mut kept = Vec::new();
        for (j, a) in found {
            claimed.insert(j);
            if matches!(a, Action::Replace { .. }) {
                kept.push(graph.nodes[j].id.clone());
            }
            actions.insert(j, a);
        }
        rec.substitutions.push(Substitution {
            old: graph.nodes[i].id.clone(),
            new: kept,
        });
    }

    let mut rb = Rebuild::new(graph);
    for (i, node) in graph.nodes.iter().enumerate() {
        match actions.remove(&i) {
            None => {
                rb.copy(node)?;
            }
            Some(Action::Drop) => {}
            Some(Action::Replace { op, input }) => {
                let x = rb.mapped(input)?;
                let out = rb.b.push(node.id.clone(), op, &[x], &[])?;
                rb.bind(node.output, out);
            }
        }
    }
    Ok((rb.finish()?, rec))
}

//! Scalar reverse-mode automatic differentiation on a flat tape.
//!
//! Every intermediate value of a computation is recorded as a [`TapeNode`]
//! holding its value, up to two parent nodes, and the local partial
//! derivatives with respect to those parents. A single reverse sweep over the
//! tape ([`Tape::backward`]) then yields the derivative of one chosen output
//! with respect to every node on the tape, including leaves created with
//! [`Tape::var`].
//!
//! The tape is append-only while a computation is being recorded. Training
//! loops reuse one tape allocation: parameters are recorded once, a
//! [`Watermark`] is taken, and the per-sample subgraph built above the mark is
//! discarded with [`Tape::rewind`] after each backward pass.

mod taylor;

pub use taylor::{taylor_affine, taylor_tanh, TaylorTuple};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("non-finite value {0} cannot be recorded on the tape")]
    NonFinite(f64),
    #[error("division by zero on the tape")]
    DivisionByZero,
}

/// Dense 0-based index of a node on its tape.
///
/// Ids are only meaningful for the tape that issued them; they are assigned
/// strictly in creation order, so a node's parents always have smaller ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// One recorded operation: its result and the local derivative information
/// needed by the reverse sweep.
///
/// Leaves point at themselves with zero partials, which lets the backward
/// loop treat every node uniformly.
#[derive(Debug, Clone, Copy)]
pub struct TapeNode {
    value: f64,
    partials: [f64; 2],
    parents: [u32; 2],
}

impl TapeNode {
    pub fn value(&self) -> f64 {
        self.value
    }
}

/// Position on the tape returned by [`Tape::mark`]; nodes at or above the
/// mark are dropped by [`Tape::rewind`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Watermark(usize);

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Tape {
            nodes: Vec::with_capacity(nodes),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> f64 {
        self.nodes[id.index()].value
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn mark(&self) -> Watermark {
        Watermark(self.nodes.len())
    }

    /// Drops every node recorded since `mark`. Node ids below the mark stay
    /// valid; parents always precede children, so no dangling reference can
    /// survive a rewind.
    pub fn rewind(&mut self, mark: Watermark) {
        debug_assert!(mark.0 <= self.nodes.len());
        self.nodes.truncate(mark.0);
    }

    #[inline]
    fn push(&mut self, value: f64, p0: NodeId, d0: f64, p1: NodeId, d1: f64) -> NodeId {
        let id = self.nodes.len() as u32;
        self.nodes.push(TapeNode {
            value,
            partials: [d0, d1],
            parents: [p0.0, p1.0],
        });
        NodeId(id)
    }

    /// Records a leaf. Rejects NaN and infinities so nothing non-finite can
    /// enter a computation through its inputs.
    pub fn var(&mut self, value: f64) -> Result<NodeId, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite(value));
        }
        let id = NodeId(self.nodes.len() as u32);
        Ok(self.push(value, id, 0.0, id, 0.0))
    }

    #[inline]
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.index()].value + self.nodes[b.index()].value;
        self.push(v, a, 1.0, b, 1.0)
    }

    #[inline]
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.index()].value - self.nodes[b.index()].value;
        self.push(v, a, 1.0, b, -1.0)
    }

    #[inline]
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.nodes[a.index()].value;
        let vb = self.nodes[b.index()].value;
        self.push(va * vb, a, vb, b, va)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let va = self.nodes[a.index()].value;
        let vb = self.nodes[b.index()].value;
        if vb == 0.0 {
            return Err(AutodiffError::DivisionByZero);
        }
        Ok(self.push(va / vb, a, 1.0 / vb, b, -va / (vb * vb)))
    }

    #[inline]
    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let t = self.nodes[a.index()].value.tanh();
        // d/dz tanh(z) = 1 - tanh(z)^2
        self.push(t, a, 1.0 - t * t, a, 0.0)
    }

    #[inline]
    pub fn square(&mut self, a: NodeId) -> NodeId {
        let va = self.nodes[a.index()].value;
        self.push(va * va, a, 2.0 * va, a, 0.0)
    }

    /// Multiplication by a compile-time-known constant; the constant is baked
    /// into the partial instead of occupying a leaf node.
    #[inline]
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = self.nodes[a.index()].value;
        self.push(va * c, a, c, a, 0.0)
    }

    /// Reverse sweep seeded with d(output)/d(output) = 1. Returns one adjoint
    /// per node; nodes the output does not depend on get 0.
    pub fn backward(&self, output: NodeId) -> Vec<f64> {
        let mut adjoints = Vec::new();
        self.backward_into(output, &mut adjoints);
        adjoints
    }

    /// Same as [`Tape::backward`] but reuses `adjoints` to avoid churn in
    /// loops that run one sweep per sample.
    pub fn backward_into(&self, output: NodeId, adjoints: &mut Vec<f64>) {
        adjoints.clear();
        adjoints.resize(self.nodes.len(), 0.0);
        adjoints[output.index()] = 1.0;
        for i in (0..=output.index()).rev() {
            let a = adjoints[i];
            if a == 0.0 {
                continue;
            }
            let node = &self.nodes[i];
            adjoints[node.parents[0] as usize] += a * node.partials[0];
            adjoints[node.parents[1] as usize] += a * node.partials[1];
        }
    }
}


#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    // A small random program over two leaves. Ops are chosen so values stay
    // in a numerically benign range for finite differencing.
    #[derive(Debug, Clone)]
    enum Op {
        Add(usize, usize),
        Sub(usize, usize),
        Mul(usize, usize),
        Tanh(usize),
        Square(usize),
        Scale(usize, f64),
    }

    fn run_program(ops: &[Op], x: f64, y: f64) -> f64 {
        let mut vals = vec![x, y];
        for op in ops {
            let n = vals.len();
            let v = match *op {
                Op::Add(a, b) => vals[a % n] + vals[b % n],
                Op::Sub(a, b) => vals[a % n] - vals[b % n],
                Op::Mul(a, b) => vals[a % n].tanh() * vals[b % n].tanh(),
                Op::Tanh(a) => vals[a % n].tanh(),
                Op::Square(a) => vals[a % n].tanh().powi(2),
                Op::Scale(a, c) => vals[a % n] * c,
            };
            vals.push(v);
        }
        *vals.last().unwrap()
    }

    fn record_program(ops: &[Op], t: &mut Tape, x: NodeId, y: NodeId) -> NodeId {
        let mut ids = vec![x, y];
        for op in ops {
            let n = ids.len();
            let id = match *op {
                Op::Add(a, b) => t.add(ids[a % n], ids[b % n]),
                Op::Sub(a, b) => t.sub(ids[a % n], ids[b % n]),
                Op::Mul(a, b) => {
                    let ta = t.tanh(ids[a % n]);
                    let tb = t.tanh(ids[b % n]);
                    t.mul(ta, tb)
                }
                Op::Tanh(a) => t.tanh(ids[a % n]),
                Op::Square(a) => {
                    let ta = t.tanh(ids[a % n]);
                    t.square(ta)
                }
                Op::Scale(a, c) => t.scale(ids[a % n], c),
            };
            ids.push(id);
        }
        *ids.last().unwrap()
    }

    fn op_strategy() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0usize..64, 0usize..64).prop_map(|(a, b)| Op::Add(a, b)),
            (0usize..64, 0usize..64).prop_map(|(a, b)| Op::Sub(a, b)),
            (0usize..64, 0usize..64).prop_map(|(a, b)| Op::Mul(a, b)),
            (0usize..64).prop_map(Op::Tanh),
            (0usize..64).prop_map(Op::Square),
            (0usize..64, -1.5f64..1.5).prop_map(|(a, c)| Op::Scale(a, c)),
        ]
    }

    proptest! {
        #[test]
        fn backward_matches_central_differences(
            ops in prop::collection::vec(op_strategy(), 1..24),
            x0 in -1.2f64..1.2,
            y0 in -1.2f64..1.2,
        ) {
            let mut t = Tape::new();
            let x = t.var(x0).unwrap();
            let y = t.var(y0).unwrap();
            let out = record_program(&ops, &mut t, x, y);
            let adj = t.backward(out);

            let h = 1e-6;
            for (leaf, v0, other) in [(x, x0, y0), (y, y0, x0)] {
                let fd = if leaf == x {
                    (run_program(&ops, v0 + h, other) - run_program(&ops, v0 - h, other)) / (2.0 * h)
                } else {
                    (run_program(&ops, other, v0 + h) - run_program(&ops, other, v0 - h)) / (2.0 * h)
                };
                let ad = adj[leaf.index()];
                let scale = fd.abs().max(ad.abs());
                if scale > 1e-6 {
                    prop_assert!(
                        (ad - fd).abs() / scale < 1e-5,
                        "leaf grad mismatch: ad={ad} fd={fd}"
                    );
                }
            }
        }
    }
}

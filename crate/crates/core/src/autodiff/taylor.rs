//! Forward propagation of first and second spatial derivatives.
//!
//! A [`TaylorTuple`] carries tape nodes for (f, df/dx, df/dy, d2f/dx2,
//! d2f/dy2) of one scalar quantity. Affine layers and tanh activations map
//! tuples to tuples with exact closed-form rules, so a network evaluated this
//! way yields its spatial derivatives without nesting the reverse sweep.
//! Because every slot is itself recorded on the tape, one ordinary
//! [`Tape::backward`] call from any scalar built out of these slots produces
//! parameter gradients, including gradients of second-derivative terms.
//!
//! Mixed derivatives (d2f/dxdy) are never propagated; the residuals this
//! engine serves do not need them.

use super::{AutodiffError, NodeId, Tape};

/// Tape handles for the value and spatial-derivative slots of one quantity.
/// All five ids must live on the same tape.
#[derive(Debug, Clone, Copy)]
pub struct TaylorTuple {
    pub val: NodeId,
    pub dx: NodeId,
    pub dy: NodeId,
    pub dxx: NodeId,
    pub dyy: NodeId,
}

impl TaylorTuple {
    /// Seeds the x coordinate: value x, dx = 1, all other slots 0.
    pub fn coordinate_x(tape: &mut Tape, x: f64) -> Result<Self, AutodiffError> {
        let val = tape.var(x)?;
        let one = tape.var(1.0)?;
        let zero = tape.var(0.0)?;
        Ok(TaylorTuple {
            val,
            dx: one,
            dy: zero,
            dxx: zero,
            dyy: zero,
        })
    }

    /// Seeds the y coordinate: value y, dy = 1, all other slots 0.
    pub fn coordinate_y(tape: &mut Tape, y: f64) -> Result<Self, AutodiffError> {
        let val = tape.var(y)?;
        let one = tape.var(1.0)?;
        let zero = tape.var(0.0)?;
        Ok(TaylorTuple {
            val,
            dx: zero,
            dy: one,
            dxx: zero,
            dyy: zero,
        })
    }

    /// Seeds an input with no spatial dependence (a Reynolds-number channel).
    pub fn spatial_constant(tape: &mut Tape, value: f64) -> Result<Self, AutodiffError> {
        let val = tape.var(value)?;
        let zero = tape.var(0.0)?;
        Ok(TaylorTuple {
            val,
            dx: zero,
            dy: zero,
            dxx: zero,
            dyy: zero,
        })
    }

    /// Records externally known slot values as leaves. This is the bridge for
    /// oracle fields whose derivatives are available in closed form.
    pub fn from_values(
        tape: &mut Tape,
        val: f64,
        dx: f64,
        dy: f64,
        dxx: f64,
        dyy: f64,
    ) -> Result<Self, AutodiffError> {
        Ok(TaylorTuple {
            val: tape.var(val)?,
            dx: tape.var(dx)?,
            dy: tape.var(dy)?,
            dxx: tape.var(dxx)?,
            dyy: tape.var(dyy)?,
        })
    }

    pub fn values(&self, tape: &Tape) -> [f64; 5] {
        [
            tape.value(self.val),
            tape.value(self.dx),
            tape.value(self.dy),
            tape.value(self.dxx),
            tape.value(self.dyy),
        ]
    }
}

/// z = sum_i w_i * a_i + b, applied slot-wise. The bias enters only the value
/// slot; derivative slots are plain weighted sums by linearity.
///
/// `weights` pairs with `inputs` one-to-one and must be non-empty.
pub fn taylor_affine(
    tape: &mut Tape,
    inputs: &[TaylorTuple],
    weights: &[NodeId],
    bias: NodeId,
) -> TaylorTuple {
    assert_eq!(inputs.len(), weights.len());
    assert!(!inputs.is_empty(), "affine layer needs at least one input");

    let mut val = bias;
    for (w, a) in weights.iter().zip(inputs) {
        let term = tape.mul(*w, a.val);
        val = tape.add(val, term);
    }

    let weighted_sum = |tape: &mut Tape, slot: fn(&TaylorTuple) -> NodeId| {
        let mut acc = tape.mul(weights[0], slot(&inputs[0]));
        for (w, a) in weights.iter().zip(inputs).skip(1) {
            let term = tape.mul(*w, slot(a));
            acc = tape.add(acc, term);
        }
        acc
    };

    let dx = weighted_sum(tape, |t| t.dx);
    let dy = weighted_sum(tape, |t| t.dy);
    let dxx = weighted_sum(tape, |t| t.dxx);
    let dyy = weighted_sum(tape, |t| t.dyy);

    TaylorTuple {
        val,
        dx,
        dy,
        dxx,
        dyy,
    }
}

/// Elementwise tanh with exact derivative propagation:
///
/// a = tanh(z), s = 1 - a^2,
/// out = (a, s*z_x, s*z_y, s*z_xx - 2*a*s*z_x^2, s*z_yy - 2*a*s*z_y^2).
pub fn taylor_tanh(tape: &mut Tape, z: &TaylorTuple) -> TaylorTuple {
    let a = tape.tanh(z.val);
    let a_sq = tape.square(a);
    let one = tape
        .var(1.0)
        .expect("finite constant is always recordable");
    let s = tape.sub(one, a_sq);

    let dx = tape.mul(s, z.dx);
    let dy = tape.mul(s, z.dy);

    let a_s = tape.mul(a, s);
    let two_a_s = tape.scale(a_s, 2.0);

    let dx_sq = tape.square(z.dx);
    let curv_x = tape.mul(two_a_s, dx_sq);
    let lin_x = tape.mul(s, z.dxx);
    let dxx = tape.sub(lin_x, curv_x);

    let dy_sq = tape.square(z.dy);
    let curv_y = tape.mul(two_a_s, dy_sq);
    let lin_y = tape.mul(s, z.dyy);
    let dyy = tape.sub(lin_y, curv_y);

    TaylorTuple {
        val: a,
        dx,
        dy,
        dxx,
        dyy,
    }
}

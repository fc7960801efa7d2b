//! Steady incompressible Navier-Stokes residuals on the unit cavity.
//!
//! The flow is nondimensionalized so density, lid speed, and cavity side are
//! all 1; the Reynolds number then fixes the dynamic viscosity as mu = 1/Re.
//! Residuals are recorded on an autodiff tape from [`TaylorTuple`] slots, so
//! the same code path serves training (network-produced tuples) and
//! verification (closed-form tuples from [`manufactured_field`]).
//!
//! Residual conventions, with rho the density and mu the viscosity:
//!
//! continuity: u_x + v_y
//! x momentum: u u_x + v u_y + p_x / rho - (mu / rho)(u_xx + u_yy)
//! y momentum: u v_x + v v_y + p_y / rho - (mu / rho)(v_xx + v_yy)

use crate::autodiff::{NodeId, Tape, TaylorTuple};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PhysicsError {
    #[error("Reynolds number must be positive and finite, got {0}")]
    InvalidReynolds(f64),
    #[error("density must be positive and finite, got {0}")]
    InvalidDensity(f64),
    #[error("point ({0}, {1}) is not on the cavity boundary")]
    InteriorPoint(f64, f64),
}

/// mu = rho U L / Re with rho = U = L = 1.
pub fn reynolds_to_viscosity(re: f64) -> Result<f64, PhysicsError> {
    if !(re.is_finite() && re > 0.0) {
        return Err(PhysicsError::InvalidReynolds(re));
    }
    Ok(1.0 / re)
}

/// Density and viscosity of the working fluid. `re * mu == rho` holds
/// exactly for values built by [`FluidParams::from_reynolds`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluidParams {
    pub rho: f64,
    pub mu: f64,
    pub re: f64,
}

impl FluidParams {
    pub fn from_reynolds(re: f64) -> Result<Self, PhysicsError> {
        Ok(FluidParams {
            rho: 1.0,
            mu: reynolds_to_viscosity(re)?,
            re,
        })
    }

    pub fn new(rho: f64, re: f64) -> Result<Self, PhysicsError> {
        if !(rho.is_finite() && rho > 0.0) {
            return Err(PhysicsError::InvalidDensity(rho));
        }
        Ok(FluidParams {
            rho,
            mu: reynolds_to_viscosity(re)?,
            re,
        })
    }

    /// Kinematic viscosity mu / rho.
    pub fn nu(&self) -> f64 {
        self.mu / self.rho
    }
}

/// Horizontal velocity imposed along the lid (y = 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LidProfile {
    /// u = 1 across the whole lid; discontinuous at the corners.
    Constant,
    /// u = 16 x^2 (1 - x)^2; vanishes with its slope at the corners.
    Regularized,
}

impl LidProfile {
    pub fn u_lid(&self, x: f64) -> f64 {
        match self {
            LidProfile::Constant => 1.0,
            LidProfile::Regularized => {
                let s = x * (1.0 - x);
                16.0 * s * s
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LidProfile::Constant => "constant",
            LidProfile::Regularized => "regularized",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "constant" => Some(LidProfile::Constant),
            "regularized" => Some(LidProfile::Regularized),
            _ => None,
        }
    }
}

/// Where a boundary point sits. Corners count as wall, not lid, so the
/// no-slip target wins there under either profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundarySide {
    Lid,
    Wall,
}

/// Classifies a point of the closed unit square. Boundary membership is
/// exact: generated points carry coordinates that are exactly 0 or 1 on the
/// boundary.
pub fn classify_boundary(x: f64, y: f64) -> Option<BoundarySide> {
    let on_edge = x == 0.0 || x == 1.0 || y == 0.0 || y == 1.0;
    if !on_edge {
        return None;
    }
    if y == 1.0 && x > 0.0 && x < 1.0 {
        Some(BoundarySide::Lid)
    } else {
        Some(BoundarySide::Wall)
    }
}

/// Velocity imposed on the boundary: (u_lid(x), 0) on the open lid, (0, 0)
/// on walls and corners.
pub fn boundary_velocity(x: f64, y: f64, lid: LidProfile) -> Result<(f64, f64), PhysicsError> {
    match classify_boundary(x, y) {
        None => Err(PhysicsError::InteriorPoint(x, y)),
        Some(BoundarySide::Lid) => Ok((lid.u_lid(x), 0.0)),
        Some(BoundarySide::Wall) => Ok((0.0, 0.0)),
    }
}

/// Slip residual of a predicted velocity against the imposed boundary
/// velocity: (u_pred - u_target, v_pred - 0).
pub fn boundary_residual(
    u_pred: f64,
    v_pred: f64,
    x: f64,
    y: f64,
    lid: LidProfile,
) -> Result<(f64, f64), PhysicsError> {
    let (u_t, v_t) = boundary_velocity(x, y, lid)?;
    Ok((u_pred - u_t, v_pred - v_t))
}

/// Mass-conservation residual u_x + v_y, recorded on the tape.
pub fn continuity_residual(tape: &mut Tape, u: &TaylorTuple, v: &TaylorTuple) -> NodeId {
    tape.add(u.dx, v.dy)
}

/// Steady momentum residuals (x, y components), recorded on the tape.
pub fn momentum_residual(
    tape: &mut Tape,
    u: &TaylorTuple,
    v: &TaylorTuple,
    p: &TaylorTuple,
    fluid: &FluidParams,
) -> (NodeId, NodeId) {
    let inv_rho = 1.0 / fluid.rho;
    let nu = fluid.nu();

    let component = |tape: &mut Tape, q: &TaylorTuple, p_grad: NodeId| {
        let conv_x = tape.mul(u.val, q.dx);
        let conv_y = tape.mul(v.val, q.dy);
        let conv = tape.add(conv_x, conv_y);
        let pres = tape.scale(p_grad, inv_rho);
        let lap = tape.add(q.dxx, q.dyy);
        let visc = tape.scale(lap, nu);
        let lhs = tape.add(conv, pres);
        tape.sub(lhs, visc)
    };

    let rx = component(tape, u, p.dx);
    let ry = component(tape, v, p.dy);
    (rx, ry)
}

/// One field quantity of the manufactured solution with its full slot set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotValues {
    pub val: f64,
    pub dx: f64,
    pub dy: f64,
    pub dxx: f64,
    pub dyy: f64,
}

impl SlotValues {
    pub fn to_tuple(&self, tape: &mut Tape) -> Result<TaylorTuple, crate::autodiff::AutodiffError> {
        TaylorTuple::from_values(tape, self.val, self.dx, self.dy, self.dxx, self.dyy)
    }
}

/// Closed-form vortex-array field with known derivatives:
///
/// u = -cos x sin y, v = sin x cos y, p = -(rho/4)(cos 2x + cos 2y).
///
/// It is divergence-free with Delta u = -2u and Delta v = -2v, and satisfies
/// the inviscid steady momentum equations exactly, so with viscosity mu the
/// momentum residual is ((2 mu / rho) u, (2 mu / rho) v) in closed form.
pub fn manufactured_field(x: f64, y: f64, rho: f64) -> (SlotValues, SlotValues, SlotValues) {
    let (sx, cx) = x.sin_cos();
    let (sy, cy) = y.sin_cos();
    let u = SlotValues {
        val: -cx * sy,
        dx: sx * sy,
        dy: -cx * cy,
        dxx: cx * sy,
        dyy: cx * sy,
    };
    let v = SlotValues {
        val: sx * cy,
        dx: cx * cy,
        dy: -sx * sy,
        dxx: -sx * cy,
        dyy: -sx * cy,
    };
    let p = SlotValues {
        val: -(rho / 4.0) * ((2.0 * x).cos() + (2.0 * y).cos()),
        dx: (rho / 2.0) * (2.0 * x).sin(),
        dy: (rho / 2.0) * (2.0 * y).sin(),
        dxx: rho * (2.0 * x).cos(),
        dyy: rho * (2.0 * y).cos(),
    };
    (u, v, p)
}

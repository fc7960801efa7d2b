//! Loss assembly, gradient evaluation, and the full-batch training loop.
//!
//! Two construction routes produce the same loss:
//!
//! * **One-tape ops** ([`mse_data_op`], [`mse_physics_op`], [`total_loss_op`])
//!   build the entire loss expression on a single tape. They are the simplest
//!   thing to differentiate end-to-end and drive the small-scale
//!   finite-difference checks, but the graph grows linearly with the point
//!   count.
//! * **The streaming evaluator** ([`LossEvaluator`]) processes one point at
//!   a time through hand-rolled array kernels — plain backpropagation for
//!   the data and boundary terms, and a five-slot derivative bundle with its
//!   adjoint sweep for the interior physics term — accumulating per-term
//!   gradients. Memory stays flat in the point count and no graph is built,
//!   which is what makes full-batch training on thousands of collocation
//!   points tractable.
//!
//! The two routes agree on values to rounding and on gradients to the order
//! of f64 summation (different accumulation orders), which the tests pin.
//!
//! A physics weight of exactly zero skips physics graph construction
//! entirely — not just its weighting — so data-only training cannot pick up
//! any numerical residue from the physics terms.

pub mod adam;
mod dense;
pub mod strategy;

pub use adam::AdamState;
pub use strategy::{
    build_strategy, evaluate_test_mse, run_stage, run_strategy, StageInit, StageOutcome,
    StageSpec, StrategyName, StrategyOutcome, StrategySpec, TestMseRow, TrainContext,
};

use crate::autodiff::{AutodiffError, NodeId, Tape, TaylorTuple};
use crate::dataset::{CollocationSet, Dataset, DatasetError};
use crate::network::{
    forward_taylor_taped, forward_values_taped, NetworkError, NetworkSpec, ParameterSet,
    TapedParams, HEAD_COUNT,
};
use crate::physics::{continuity_residual, momentum_residual, FluidParams, PhysicsError};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("dataset has no samples for the data term")]
    EmptyData,
    #[error("collocation set has no interior points but physics is enabled")]
    EmptyInterior,
    #[error("collocation set has no boundary points but physics is enabled")]
    EmptyBoundary,
    #[error("no active loss terms: provide data or physics with a nonzero weight")]
    NoActiveTerms,
    #[error("parameter/gradient length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("strategy {0} requires a transfer Reynolds number")]
    MissingTransferRe(&'static str),
    #[error("training dataset has no samples for Re = {0}")]
    MissingDataForRe(f64),
    #[error("stage {0} needs the previous stage's checkpoint but none exists")]
    MissingCheckpoint(usize),
    #[error("training diverged at epoch {epoch}; last finite parameters retained")]
    Diverged {
        epoch: usize,
        last: Box<ParameterSet>,
        log: ConvergenceLog,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Which interior residuals the physics term evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhysicsMode {
    /// Mass conservation only.
    ContinuityOnly,
    /// Mass conservation plus both momentum components.
    Full,
}

impl PhysicsMode {
    pub fn name(&self) -> &'static str {
        match self {
            PhysicsMode::ContinuityOnly => "continuity",
            PhysicsMode::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "continuity" | "continuity_only" => Some(PhysicsMode::ContinuityOnly),
            "full" => Some(PhysicsMode::Full),
            _ => None,
        }
    }
}

/// Loss components of one evaluation. An absent term (no dataset, or physics
/// weight zero) is recorded as NaN; the total counts absent terms as zero,
/// so `total = mse_data + lambda * (mse_pde + mse_bc)` holds over the
/// present components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub mse_data: f64,
    pub mse_pde: f64,
    pub mse_bc: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn assemble(data: Option<f64>, physics: Option<(f64, f64)>, lambda: f64) -> Self {
        let data_part = data.unwrap_or(0.0);
        let physics_part = physics.map(|(pde, bc)| pde + bc).unwrap_or(0.0);
        LossBreakdown {
            mse_data: data.unwrap_or(f64::NAN),
            mse_pde: physics.map(|p| p.0).unwrap_or(f64::NAN),
            mse_bc: physics.map(|p| p.1).unwrap_or(f64::NAN),
            lambda,
            total: data_part + lambda * physics_part,
        }
    }

    pub fn has_data(&self) -> bool {
        !self.mse_data.is_nan()
    }

    pub fn has_physics(&self) -> bool {
        !self.mse_pde.is_nan()
    }
}

/// Anything that can produce the five-slot value/derivative bundle for the
/// three flow variables at a point. Training uses the network; oracle tests
/// plug in analytic fields.
pub type FieldFn<'a> = dyn FnMut(&mut Tape, f64, f64, f64) -> Result<[TaylorTuple; HEAD_COUNT], TrainingError>
    + 'a;

/// Field provider backed by the network.
pub fn network_field<'a>(
    spec: &'a NetworkSpec,
    taped: &'a TapedParams,
) -> impl FnMut(&mut Tape, f64, f64, f64) -> Result<[TaylorTuple; HEAD_COUNT], TrainingError> + 'a
{
    move |tape, x, y, re| {
        let re_arg = if spec.takes_re() { Some(re) } else { None };
        forward_taylor_taped(spec, taped, tape, x, y, re_arg).map_err(TrainingError::from)
    }
}

/// Mean over samples of the summed squared error of the three channels,
/// built as one expression on the tape.
pub fn mse_data_op(
    tape: &mut Tape,
    spec: &NetworkSpec,
    taped: &TapedParams,
    ds: &Dataset,
) -> Result<NodeId, TrainingError> {
    if ds.is_empty() {
        return Err(TrainingError::EmptyData);
    }
    let mut sum: Option<NodeId> = None;
    for s in &ds.samples {
        let re_arg = if spec.takes_re() { Some(s.re) } else { None };
        let pred = forward_values_taped(spec, taped, tape, s.x, s.y, re_arg)?;
        let e = sample_error_sq(tape, pred, [s.u, s.v, s.p])?;
        sum = Some(match sum {
            None => e,
            Some(acc) => tape.add(acc, e),
        });
    }
    Ok(tape.scale(sum.unwrap(), 1.0 / ds.len() as f64))
}

fn sample_error_sq(
    tape: &mut Tape,
    pred: [NodeId; HEAD_COUNT],
    data: [f64; HEAD_COUNT],
) -> Result<NodeId, TrainingError> {
    let mut total: Option<NodeId> = None;
    for (p, d) in pred.iter().zip(data) {
        let target = tape.var(d)?;
        let diff = tape.sub(*p, target);
        let sq = tape.square(diff);
        total = Some(match total {
            None => sq,
            Some(acc) => tape.add(acc, sq),
        });
    }
    Ok(total.unwrap())
}

/// Squared interior residual at one point per the active mode, as a node.
fn interior_residual_sq(
    tape: &mut Tape,
    tuples: &[TaylorTuple; HEAD_COUNT],
    re: f64,
    mode: PhysicsMode,
) -> Result<NodeId, TrainingError> {
    let [u, v, p] = tuples;
    let rc = continuity_residual(tape, u, v);
    let mut sum = tape.square(rc);
    if mode == PhysicsMode::Full {
        let fluid = FluidParams::from_reynolds(re)?;
        let (rx, ry) = momentum_residual(tape, u, v, p, &fluid);
        let sx = tape.square(rx);
        sum = tape.add(sum, sx);
        let sy = tape.square(ry);
        sum = tape.add(sum, sy);
    }
    Ok(sum)
}

/// Interior and boundary physics means built as one tape expression, with
/// the field supplied by `field` so analytic oracles can stand in for the
/// network. Returns (interior node, boundary node).
pub fn mse_physics_op(
    tape: &mut Tape,
    colloc: &CollocationSet,
    mode: PhysicsMode,
    field: &mut FieldFn<'_>,
) -> Result<(NodeId, NodeId), TrainingError> {
    if colloc.interior.is_empty() {
        return Err(TrainingError::EmptyInterior);
    }
    if colloc.boundary.is_empty() {
        return Err(TrainingError::EmptyBoundary);
    }
    let mut pde_sum: Option<NodeId> = None;
    for &(x, y, re) in &colloc.interior {
        let tuples = field(tape, x, y, re)?;
        let sq = interior_residual_sq(tape, &tuples, re, mode)?;
        pde_sum = Some(match pde_sum {
            None => sq,
            Some(acc) => tape.add(acc, sq),
        });
    }
    let pde = tape.scale(pde_sum.unwrap(), 1.0 / colloc.interior.len() as f64);

    let mut bc_sum: Option<NodeId> = None;
    for &(x, y, re, u_t, v_t) in &colloc.boundary {
        let tuples = field(tape, x, y, re)?;
        let e = sample_error_sq_2(tape, [tuples[0].val, tuples[1].val], [u_t, v_t])?;
        bc_sum = Some(match bc_sum {
            None => e,
            Some(acc) => tape.add(acc, e),
        });
    }
    let bc = tape.scale(bc_sum.unwrap(), 1.0 / colloc.boundary.len() as f64);
    Ok((pde, bc))
}

fn sample_error_sq_2(
    tape: &mut Tape,
    pred: [NodeId; 2],
    target: [f64; 2],
) -> Result<NodeId, TrainingError> {
    let tu = tape.var(target[0])?;
    let du = tape.sub(pred[0], tu);
    let su = tape.square(du);
    let tv = tape.var(target[1])?;
    let dv = tape.sub(pred[1], tv);
    let sv = tape.square(dv);
    Ok(tape.add(su, sv))
}

/// Full training loss on one tape. A physics weight of exactly zero builds
/// no physics nodes at all, even when a collocation set is supplied.
pub fn total_loss_op(
    tape: &mut Tape,
    spec: &NetworkSpec,
    taped: &TapedParams,
    data: Option<&Dataset>,
    physics: Option<(&CollocationSet, PhysicsMode)>,
    lambda: f64,
) -> Result<(LossBreakdown, NodeId), TrainingError> {
    let physics_active = physics.is_some() && lambda != 0.0;
    if data.is_none() && !physics_active {
        return Err(TrainingError::NoActiveTerms);
    }
    let data_node = match data {
        Some(ds) => Some(mse_data_op(tape, spec, taped, ds)?),
        None => None,
    };
    let physics_nodes = if physics_active {
        let (colloc, mode) = physics.unwrap();
        let mut field = network_field(spec, taped);
        Some(mse_physics_op(tape, colloc, mode, &mut field)?)
    } else {
        None
    };
    let total = match (data_node, physics_nodes) {
        (Some(d), Some((pde, bc))) => {
            let phys = tape.add(pde, bc);
            let weighted = tape.scale(phys, lambda);
            tape.add(d, weighted)
        }
        (Some(d), None) => d,
        (None, Some((pde, bc))) => {
            let phys = tape.add(pde, bc);
            tape.scale(phys, lambda)
        }
        (None, None) => unreachable!("guarded above"),
    };
    let breakdown = LossBreakdown::assemble(
        data_node.map(|n| tape.value(n)),
        physics_nodes.map(|(a, b)| (tape.value(a), tape.value(b))),
        lambda,
    );
    Ok((breakdown, total))
}

/// What one loss/gradient evaluation acts on.
#[derive(Clone, Copy)]
pub struct EvalInputs<'a> {
    pub spec: &'a NetworkSpec,
    pub data: Option<&'a Dataset>,
    pub physics: Option<(&'a CollocationSet, PhysicsMode)>,
    pub lambda: f64,
}

/// Streaming loss/gradient evaluation: points flow through the chunked
/// array kernels a block at a time, accumulating per-term parameter
/// gradients across chunks. Memory stays flat in the point count and all
/// scratch buffers are reused between calls, which is what makes
/// full-batch training on thousands of points tractable. Values match the
/// one-tape route to rounding and gradients to the order of f64 summation,
/// which the tests pin.
#[derive(Default)]
pub struct LossEvaluator {
    vkernel: Option<dense::BatchValue>,
    jkernel: Option<dense::BatchJet>,
    // Per-chunk staging rows, reused across chunks and calls.
    xy: Vec<(f64, f64)>,
    res: Vec<f64>,
    seeds: Vec<[f64; HEAD_COUNT]>,
    jseeds: Vec<[dense::Jet; HEAD_COUNT]>,
    g_data: Vec<f64>,
    g_pde: Vec<f64>,
    g_bc: Vec<f64>,
    grad: Vec<f64>,
}

impl LossEvaluator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Gradient of the most recent [`evaluate`](Self::evaluate) call, per
    /// parameter, matching the breakdown's total.
    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn evaluate(
        &mut self,
        inputs: &EvalInputs<'_>,
        params: &ParameterSet,
    ) -> Result<LossBreakdown, TrainingError> {
        let physics_active = inputs.physics.is_some() && inputs.lambda != 0.0;
        if inputs.data.is_none() && !physics_active {
            return Err(TrainingError::NoActiveTerms);
        }
        let spec = inputs.spec;
        if params.shapes() != spec.layer_shapes() {
            return Err(TrainingError::Network(NetworkError::InvalidSpec(
                "parameter set was built for a different spec".into(),
            )));
        }
        let pcount = params.len();
        for buf in [&mut self.g_data, &mut self.g_pde, &mut self.g_bc, &mut self.grad] {
            buf.clear();
            buf.resize(pcount, 0.0);
        }
        if self.vkernel.as_ref().map(|k| k.spec() != spec).unwrap_or(true) {
            self.vkernel = Some(dense::BatchValue::new(spec));
            self.jkernel = None;
        }
        if physics_active && self.jkernel.is_none() {
            self.jkernel = Some(dense::BatchJet::new(spec));
        }
        let Self {
            vkernel,
            jkernel,
            xy,
            res,
            seeds,
            jseeds,
            g_data,
            g_pde,
            g_bc,
            grad,
        } = self;
        let vkernel = vkernel.as_mut().expect("value kernel built above");
        let vals = params.values();
        let takes_re = spec.takes_re();

        let mut data_mse = None;
        if let Some(ds) = inputs.data {
            if ds.is_empty() {
                return Err(TrainingError::EmptyData);
            }
            let mut sum = 0.0;
            for chunk in ds.samples.chunks(dense::CHUNK) {
                xy.clear();
                res.clear();
                seeds.clear();
                for s in chunk {
                    xy.push((s.x, s.y));
                    if takes_re {
                        res.push(s.re);
                    }
                }
                let res_arg = takes_re.then_some(&res[..]);
                vkernel.forward(vals, xy, res_arg);
                for (b, s) in chunk.iter().enumerate() {
                    let eu = vkernel.pred(0, b) - s.u;
                    let ev = vkernel.pred(1, b) - s.v;
                    let ep = vkernel.pred(2, b) - s.p;
                    sum += (eu * eu + ev * ev) + ep * ep;
                    seeds.push([2.0 * eu, 2.0 * ev, 2.0 * ep]);
                }
                vkernel.backward(vals, seeds, g_data);
            }
            let inv = 1.0 / ds.len() as f64;
            data_mse = Some(sum * inv);
            g_data.iter_mut().for_each(|g| *g *= inv);
        }

        let mut physics_mse = None;
        if physics_active {
            let (colloc, mode) = inputs.physics.unwrap();
            if colloc.interior.is_empty() {
                return Err(TrainingError::EmptyInterior);
            }
            if colloc.boundary.is_empty() {
                return Err(TrainingError::EmptyBoundary);
            }
            let jkernel = jkernel.as_mut().expect("jet kernel built above");
            let mut pde_sum = 0.0;
            for chunk in colloc.interior.chunks(dense::CHUNK) {
                xy.clear();
                res.clear();
                jseeds.clear();
                for &(x, y, re) in chunk {
                    xy.push((x, y));
                    if takes_re {
                        res.push(re);
                    }
                }
                let res_arg = takes_re.then_some(&res[..]);
                jkernel.forward(vals, xy, res_arg);
                for (b, &(_, _, re)) in chunk.iter().enumerate() {
                    let u = jkernel.jet(0, b);
                    let v = jkernel.jet(1, b);
                    let p = jkernel.jet(2, b);
                    let c = u.dx + v.dy;
                    let mut sq = c * c;
                    let cbar = 2.0 * c;
                    let mut seed = [dense::Jet::default(); HEAD_COUNT];
                    seed[0].dx = cbar;
                    seed[1].dy = cbar;
                    if mode == PhysicsMode::Full {
                        let fluid = FluidParams::from_reynolds(re)?;
                        let inv_rho = 1.0 / fluid.rho;
                        let nu = fluid.nu();
                        let rx = (u.v * u.dx + v.v * u.dy) + p.dx * inv_rho - nu * (u.dxx + u.dyy);
                        let ry = (u.v * v.dx + v.v * v.dy) + p.dy * inv_rho - nu * (v.dxx + v.dyy);
                        sq += rx * rx;
                        sq += ry * ry;
                        let rxb = 2.0 * rx;
                        let ryb = 2.0 * ry;
                        seed[0].v = rxb * u.dx + ryb * v.dx;
                        seed[0].dx += rxb * u.v;
                        seed[0].dy = rxb * v.v;
                        seed[0].dxx = -nu * rxb;
                        seed[0].dyy = -nu * rxb;
                        seed[1].v = rxb * u.dy + ryb * v.dy;
                        seed[1].dx = ryb * u.v;
                        seed[1].dy += ryb * v.v;
                        seed[1].dxx = -nu * ryb;
                        seed[1].dyy = -nu * ryb;
                        seed[2].dx = rxb * inv_rho;
                        seed[2].dy = ryb * inv_rho;
                    }
                    pde_sum += sq;
                    jseeds.push(seed);
                }
                jkernel.backward(vals, jseeds, g_pde);
            }
            let inv_i = 1.0 / colloc.interior.len() as f64;
            g_pde.iter_mut().for_each(|g| *g *= inv_i);

            let mut bc_sum = 0.0;
            for chunk in colloc.boundary.chunks(dense::CHUNK) {
                xy.clear();
                res.clear();
                seeds.clear();
                for &(x, y, re, _, _) in chunk {
                    xy.push((x, y));
                    if takes_re {
                        res.push(re);
                    }
                }
                let res_arg = takes_re.then_some(&res[..]);
                vkernel.forward(vals, xy, res_arg);
                for (b, &(_, _, _, u_t, v_t)) in chunk.iter().enumerate() {
                    let eu = vkernel.pred(0, b) - u_t;
                    let ev = vkernel.pred(1, b) - v_t;
                    bc_sum += eu * eu + ev * ev;
                    seeds.push([2.0 * eu, 2.0 * ev, 0.0]);
                }
                vkernel.backward(vals, seeds, g_bc);
            }
            let inv_b = 1.0 / colloc.boundary.len() as f64;
            g_bc.iter_mut().for_each(|g| *g *= inv_b);
            physics_mse = Some((pde_sum * inv_i, bc_sum * inv_b));
        }

        for k in 0..pcount {
            let mut g = 0.0;
            if data_mse.is_some() {
                g += g_data[k];
            }
            if physics_mse.is_some() {
                g += inputs.lambda * (g_pde[k] + g_bc[k]);
            }
            grad[k] = g;
        }
        Ok(LossBreakdown::assemble(data_mse, physics_mse, inputs.lambda))
    }
}

/// When a stage stops: at the epoch cap, or as soon as the total training
/// loss reaches the threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule {
    pub max_epochs: usize,
    pub loss_threshold: Option<f64>,
}

impl StopRule {
    pub fn epochs(max_epochs: usize) -> Self {
        StopRule {
            max_epochs,
            loss_threshold: None,
        }
    }

    pub fn threshold(max_epochs: usize, loss_threshold: f64) -> Self {
        StopRule {
            max_epochs,
            loss_threshold: Some(loss_threshold),
        }
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.max_epochs == 0 {
            return Err(TrainingError::InvalidConfig(
                "max_epochs must be at least 1".into(),
            ));
        }
        if let Some(t) = self.loss_threshold {
            if !t.is_finite() {
                return Err(TrainingError::InvalidConfig(format!(
                    "loss threshold must be finite, got {t}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    ThresholdMet,
    EpochCapReached,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::ThresholdMet => "threshold",
            StopReason::EpochCapReached => "epoch_cap",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub epoch: usize,
    pub total: f64,
    pub mse_data: f64,
    pub mse_pde: f64,
    pub mse_bc: f64,
}

/// Loss trajectory of one stage, one entry per evaluation (absent terms are
/// NaN), including the final state after the last step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConvergenceLog {
    pub entries: Vec<LogEntry>,
}

impl ConvergenceLog {
    fn push(&mut self, epoch: usize, b: &LossBreakdown) {
        self.entries.push(LogEntry {
            epoch,
            total: b.total,
            mse_data: b.mse_data,
            mse_pde: b.mse_pde,
            mse_bc: b.mse_bc,
        });
    }

    pub fn final_total(&self) -> Option<f64> {
        self.entries.last().map(|e| e.total)
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        use std::fmt::Write as _;
        let mut out = String::from("epoch,total,mse_data,mse_pde,mse_bc\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e},{:.16e}",
                e.epoch, e.total, e.mse_data, e.mse_pde, e.mse_bc
            );
        }
        std::fs::write(path, out)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParameterSet,
    pub log: ConvergenceLog,
    pub reason: StopReason,
    /// Optimizer steps actually taken before stopping.
    pub steps: usize,
}

/// Full-batch gradient descent until the stop rule fires.
///
/// Epoch k evaluates the loss at the current parameters, logs it, stops with
/// [`StopReason::ThresholdMet`] if the threshold is reached (without taking
/// the step), and otherwise takes one optimizer step. After `max_epochs`
/// steps a final evaluation is logged (and threshold-checked) before
/// stopping with [`StopReason::EpochCapReached`], so the log always ends at
/// the achieved loss. A non-finite loss aborts with the last
/// finite-evaluated parameters in the error.
pub fn train_stage(
    inputs: &EvalInputs<'_>,
    init: ParameterSet,
    stop: &StopRule,
    lr: f64,
) -> Result<TrainOutcome, TrainingError> {
    stop.validate()?;
    if !(lr.is_finite() && lr > 0.0) {
        return Err(TrainingError::InvalidConfig(format!(
            "learning rate must be positive and finite, got {lr}"
        )));
    }
    let mut params = init;
    let mut optimizer = AdamState::new(params.len(), lr);
    let mut evaluator = LossEvaluator::new();
    let mut log = ConvergenceLog::default();
    let mut last_good: Option<ParameterSet> = None;

    for epoch in 1..=stop.max_epochs + 1 {
        let breakdown = evaluator.evaluate(inputs, &params)?;
        if !breakdown.total.is_finite() {
            return Err(TrainingError::Diverged {
                epoch,
                last: Box::new(last_good.unwrap_or(params)),
                log,
            });
        }
        log.push(epoch, &breakdown);
        if let Some(threshold) = stop.loss_threshold {
            if breakdown.total <= threshold {
                return Ok(TrainOutcome {
                    params,
                    log,
                    reason: StopReason::ThresholdMet,
                    steps: epoch - 1,
                });
            }
        }
        if epoch == stop.max_epochs + 1 {
            return Ok(TrainOutcome {
                params,
                log,
                reason: StopReason::EpochCapReached,
                steps: stop.max_epochs,
            });
        }
        last_good = Some(params.clone());
        optimizer.step(params.values_mut(), evaluator.grad())?;
    }
    unreachable!("loop always returns");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_collocation_set, FieldSample, Provenance};
    use crate::network::init_xavier;
    use crate::physics::{manufactured_field, LidProfile};

    fn tiny_spec(input_dim: usize) -> NetworkSpec {
        NetworkSpec::new(input_dim, 1, 1, 4).unwrap()
    }

    fn zero_params(spec: &NetworkSpec) -> ParameterSet {
        ParameterSet::from_flat(spec, vec![0.0; spec.param_count()]).unwrap()
    }

    fn tiny_dataset(points: &[(f64, f64, f64, f64, f64)]) -> Dataset {
        // (x, y, u, v, p) at Re = 100
        let samples = points
            .iter()
            .map(|&(x, y, u, v, p)| FieldSample::new(x, y, 100.0, u, v, p).unwrap())
            .collect();
        Dataset {
            samples,
            provenance: Provenance {
                source_grid: 0,
                sample_grid: 0,
                re_list: vec![100.0],
                lid: LidProfile::Regularized,
                subsample_fraction: None,
                subsample_seed: None,
                noise_amplitude: None,
                noise_seed: None,
            },
        }
    }

    fn eval_loss(inputs: &EvalInputs<'_>, params: &ParameterSet) -> LossBreakdown {
        LossEvaluator::new().evaluate(inputs, params).unwrap()
    }

    #[test]
    fn data_mse_matches_hand_arithmetic_on_zero_network() {
        let spec = tiny_spec(2);
        let params = zero_params(&spec);
        // one sample, channel errors (1, 0, 0) -> 1
        let ds1 = tiny_dataset(&[(0.3, 0.4, 1.0, 0.0, 0.0)]);
        let mut tape = Tape::new();
        let taped = TapedParams::record(&mut tape, &spec, &params).unwrap();
        let node = mse_data_op(&mut tape, &spec, &taped, &ds1).unwrap();
        assert_eq!(tape.value(node), 1.0);
        // two samples, per-sample channel errors (1,1,1) and (0,0,0) -> 1.5
        let ds2 = tiny_dataset(&[(0.3, 0.4, 1.0, 1.0, 1.0), (0.6, 0.7, 0.0, 0.0, 0.0)]);
        let mut tape = Tape::new();
        let taped = TapedParams::record(&mut tape, &spec, &params).unwrap();
        let node = mse_data_op(&mut tape, &spec, &taped, &ds2).unwrap();
        assert_eq!(tape.value(node), 1.5);
        // predictions equal to data -> 0
        let ds3 = tiny_dataset(&[(0.3, 0.4, 0.0, 0.0, 0.0)]);
        let mut tape = Tape::new();
        let taped = TapedParams::record(&mut tape, &spec, &params).unwrap();
        let node = mse_data_op(&mut tape, &spec, &taped, &ds3).unwrap();
        assert_eq!(tape.value(node), 0.0);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let spec = tiny_spec(2);
        let params = zero_params(&spec);
        let ds = tiny_dataset(&[]);
        let mut tape = Tape::new();
        let taped = TapedParams::record(&mut tape, &spec, &params).unwrap();
        assert!(matches!(
            mse_data_op(&mut tape, &spec, &taped, &ds),
            Err(TrainingError::EmptyData)
        ));
        let inputs = EvalInputs {
            spec: &spec,
            data: Some(&ds),
            physics: None,
            lambda: 0.0,
        };
        assert!(matches!(
            LossEvaluator::new().evaluate(&inputs, &params),
            Err(TrainingError::EmptyData)
        ));
    }

    #[test]
    fn zero_network_satisfies_interior_physics_but_not_the_lid() {
        let spec = tiny_spec(2);
        let params = zero_params(&spec);
        let colloc = make_collocation_set(&[100.0], 5, 5, LidProfile::Regularized).unwrap();
        let mut tape = Tape::new();
        let taped = TapedParams::record(&mut tape, &spec, &params).unwrap();
        let mut field = network_field(&spec, &taped);
        let (pde, bc) =
            mse_physics_op(&mut tape, &colloc, PhysicsMode::Full, &mut field).unwrap();
        assert_eq!(tape.value(pde), 0.0);
        // the zero field misses the lid velocity: mse_bc = mean of targets^2
        let expect: f64 = colloc
            .boundary
            .iter()
            .map(|&(.., u_t, v_t)| u_t * u_t + v_t * v_t)
            .sum::<f64>()
            / colloc.boundary.len() as f64;
        assert!(expect > 0.0);
        assert!((tape.value(bc) - expect).abs() < 1e-15);
    }

    #[test]
    fn analytic_vortex_field_yields_closed_form_physics_means() {
        // The divergence-free vortex satisfies the inviscid balance exactly,
        // so with a vanishing viscosity the interior mean vanishes; at
        // finite viscosity the residual is (2 nu u, 2 nu v) and the mean
        // equals a directly computed quadrature over the same points.
        let colloc = make_collocation_set(&[100.0], 7, 4, LidProfile::Constant).unwrap();
        let run = |re: f64| -> f64 {
            let mut tape = Tape::new();
            let mut field = |tape: &mut Tape, x: f64, y: f64, _re: f64| {
                let (u, v, p) = manufactured_field(x, y, 1.0);
                Ok([
                    u.to_tuple(tape)?,
                    v.to_tuple(tape)?,
                    p.to_tuple(tape)?,
                ])
            };
            let colloc_re: CollocationSet = CollocationSet {
                interior: colloc.interior.iter().map(|&(x, y, _)| (x, y, re)).collect(),
                boundary: colloc.boundary.clone(),
            };
            let (pde, _bc) =
                mse_physics_op(&mut tape, &colloc_re, PhysicsMode::Full, &mut field).unwrap();
            tape.value(pde)
        };
        // effectively inviscid
        assert!(run(1e12) < 1e-10);
        // nu = 1/100: oracle mean of (2 nu u)^2 + (2 nu v)^2
        let nu = 0.01;
        let oracle: f64 = colloc
            .interior
            .iter()
            .map(|&(x, y, _)| {
                let (u, v, _) = manufactured_field(x, y, 1.0);
                let c = 2.0 * nu;
                (c * u.val).powi(2) + (c * v.val).powi(2)
            })
            .sum::<f64>()
            / colloc.interior.len() as f64;
        let got = run(100.0);
        assert!(
            (got - oracle).abs() <= 1e-10 * oracle.max(1.0),
            "got {got:e}, oracle {oracle:e}"
        );
    }

    #[test]
    fn total_loss_examples_and_weighting() {
        let spec = tiny_spec(2);
        let params = init_xavier(&spec, 5);
        let ds = tiny_dataset(&[(0.3, 0.4, 0.2, 0.1, 0.0), (0.7, 0.2, -0.1, 0.0, 0.3)]);
        let colloc = make_collocation_set(&[100.0], 4, 3, LidProfile::Regularized).unwrap();

        // lambda = 0: total equals the data term, physics absent
        let mut tape = Tape::new();
        let taped = TapedParams::record(&mut tape, &spec, &params).unwrap();
        let (b0, _) = total_loss_op(
            &mut tape,
            &spec,
            &taped,
            Some(&ds),
            Some((&colloc, PhysicsMode::Full)),
            0.0,
        )
        .unwrap();
        assert!(!b0.has_physics());
        assert_eq!(b0.total, b0.mse_data);

        // weighted combination
        let mut tape = Tape::new();
        let taped = TapedParams::record(&mut tape, &spec, &params).unwrap();
        let (b1, _) = total_loss_op(
            &mut tape,
            &spec,
            &taped,
            Some(&ds),
            Some((&colloc, PhysicsMode::Full)),
            0.1,
        )
        .unwrap();
        let expect = b1.mse_data + 0.1 * (b1.mse_pde + b1.mse_bc);
        assert!((b1.total - expect).abs() < 1e-15);

        // data-less physics stage
        let mut tape = Tape::new();
        let taped = TapedParams::record(&mut tape, &spec, &params).unwrap();
        let (b2, _) = total_loss_op(
            &mut tape,
            &spec,
            &taped,
            None,
            Some((&colloc, PhysicsMode::Full)),
            1.0,
        )
        .unwrap();
        assert!(!b2.has_data());
        assert!((b2.total - (b2.mse_pde + b2.mse_bc)).abs() < 1e-15);

        // the synthetic arithmetic example: 0.5 + 0.1 * 0.2 = 0.52
        let b = LossBreakdown::assemble(Some(0.5), Some((0.15, 0.05)), 0.1);
        assert!((b.total - 0.52).abs() < 1e-15);

        // nothing active
        let mut tape = Tape::new();
        let taped = TapedParams::record(&mut tape, &spec, &params).unwrap();
        assert!(matches!(
            total_loss_op(&mut tape, &spec, &taped, None, Some((&colloc, PhysicsMode::Full)), 0.0),
            Err(TrainingError::NoActiveTerms)
        ));
    }

    #[test]
    fn zero_weight_physics_leaves_gradients_bitwise_identical() {
        let spec = tiny_spec(2);
        let params = init_xavier(&spec, 11);
        let ds = tiny_dataset(&[(0.25, 0.5, 0.3, -0.2, 0.1), (0.75, 0.25, 0.0, 0.1, -0.3)]);
        let colloc = make_collocation_set(&[100.0], 5, 4, LidProfile::Regularized).unwrap();
        let mut with_colloc = LossEvaluator::new();
        let b1 = with_colloc
            .evaluate(
                &EvalInputs {
                    spec: &spec,
                    data: Some(&ds),
                    physics: Some((&colloc, PhysicsMode::Full)),
                    lambda: 0.0,
                },
                &params,
            )
            .unwrap();
        let mut without = LossEvaluator::new();
        let b2 = without
            .evaluate(
                &EvalInputs {
                    spec: &spec,
                    data: Some(&ds),
                    physics: None,
                    lambda: 0.0,
                },
                &params,
            )
            .unwrap();
        assert_eq!(b1.total.to_bits(), b2.total.to_bits());
        for (a, b) in with_colloc.grad().iter().zip(without.grad()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn streaming_and_one_tape_routes_agree() {
        let spec = NetworkSpec::new(3, 2, 1, 6).unwrap();
        let params = init_xavier(&spec, 21);
        let ds = tiny_dataset(&[
            (0.2, 0.3, 0.1, -0.1, 0.05),
            (0.5, 0.6, -0.2, 0.3, 0.0),
            (0.8, 0.1, 0.0, 0.2, -0.1),
        ]);
        let colloc = make_collocation_set(&[100.0], 5, 4, LidProfile::Regularized).unwrap();
        let lambda = 0.7;

        let mut streaming = LossEvaluator::new();
        let sb = streaming
            .evaluate(
                &EvalInputs {
                    spec: &spec,
                    data: Some(&ds),
                    physics: Some((&colloc, PhysicsMode::Full)),
                    lambda,
                },
                &params,
            )
            .unwrap();

        let mut tape = Tape::new();
        let taped = TapedParams::record(&mut tape, &spec, &params).unwrap();
        let (ob, total) = total_loss_op(
            &mut tape,
            &spec,
            &taped,
            Some(&ds),
            Some((&colloc, PhysicsMode::Full)),
            lambda,
        )
        .unwrap();
        let mut adjoints = Vec::new();
        tape.backward_into(total, &mut adjoints);

        assert!((sb.total - ob.total).abs() <= 1e-12 * ob.total.abs().max(1.0));
        assert!((sb.mse_pde - ob.mse_pde).abs() <= 1e-12 * ob.mse_pde.abs().max(1.0));
        let mut worst = 0.0f64;
        for k in 0..params.len() {
            let one_tape_g = adjoints[taped.id(k).index()];
            let d = (streaming.grad()[k] - one_tape_g).abs()
                / one_tape_g.abs().max(1e-6);
            worst = worst.max(d);
        }
        assert!(worst < 1e-10, "worst relative gradient gap {worst:e}");
    }

    #[test]
    fn full_loss_gradient_matches_central_differences() {
        let spec = NetworkSpec::new(2, 1, 1, 4).unwrap();
        let params = init_xavier(&spec, 33);
        let ds = tiny_dataset(&[(0.3, 0.7, 0.2, 0.0, -0.1), (0.6, 0.4, -0.1, 0.2, 0.1)]);
        let colloc = make_collocation_set(&[100.0], 4, 3, LidProfile::Regularized).unwrap();
        let inputs = EvalInputs {
            spec: &spec,
            data: Some(&ds),
            physics: Some((&colloc, PhysicsMode::Full)),
            lambda: 1.0,
        };
        let mut evaluator = LossEvaluator::new();
        evaluator.evaluate(&inputs, &params).unwrap();
        let analytic: Vec<f64> = evaluator.grad().to_vec();
        let h = 1e-6;
        for k in (0..params.len()).step_by(5) {
            let mut plus = params.clone();
            plus.values_mut()[k] += h;
            let lp = eval_loss(&inputs, &plus).total;
            let mut minus = params.clone();
            minus.values_mut()[k] -= h;
            let lm = eval_loss(&inputs, &minus).total;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (analytic[k] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-5, "param {k}: analytic {:e} vs fd {fd:e}", analytic[k]);
        }
    }

    #[test]
    fn huge_threshold_stops_before_any_step() {
        let spec = tiny_spec(2);
        let params = init_xavier(&spec, 3);
        let ds = tiny_dataset(&[(0.5, 0.5, 0.3, 0.1, 0.0)]);
        let inputs = EvalInputs {
            spec: &spec,
            data: Some(&ds),
            physics: None,
            lambda: 0.0,
        };
        let out = train_stage(&inputs, params.clone(), &StopRule::threshold(100, 1e30), 1e-3)
            .unwrap();
        assert_eq!(out.reason, StopReason::ThresholdMet);
        assert_eq!(out.steps, 0);
        assert_eq!(out.log.entries.len(), 1);
        for (a, b) in out.params.values().iter().zip(params.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn single_epoch_cap_takes_exactly_one_step() {
        let spec = tiny_spec(2);
        let params = init_xavier(&spec, 3);
        let ds = tiny_dataset(&[(0.5, 0.5, 0.3, 0.1, 0.0)]);
        let inputs = EvalInputs {
            spec: &spec,
            data: Some(&ds),
            physics: None,
            lambda: 0.0,
        };
        let out = train_stage(&inputs, params.clone(), &StopRule::epochs(1), 1e-3).unwrap();
        assert_eq!(out.reason, StopReason::EpochCapReached);
        assert_eq!(out.steps, 1);
        // two log entries: before and after the single step
        assert_eq!(out.log.entries.len(), 2);
        assert!(out.log.entries[1].total < out.log.entries[0].total);
        assert!(StopRule::epochs(0).validate().is_err());
    }

    #[test]
    fn vanishing_learning_rate_barely_moves_the_loss() {
        let spec = tiny_spec(2);
        let params = init_xavier(&spec, 8);
        let ds = tiny_dataset(&[(0.4, 0.6, 0.2, -0.1, 0.1)]);
        let inputs = EvalInputs {
            spec: &spec,
            data: Some(&ds),
            physics: None,
            lambda: 0.0,
        };
        let before = eval_loss(&inputs, &params).total;
        let out = train_stage(&inputs, params, &StopRule::epochs(1), 1e-12).unwrap();
        let after = out.log.entries.last().unwrap().total;
        assert!(((after - before) / before).abs() < 1e-9);
    }

    #[test]
    fn tiny_regression_overfits_below_one_millionth() {
        let spec = tiny_spec(2);
        let params = init_xavier(&spec, 42);
        let ds = tiny_dataset(&[
            (0.2, 0.2, 0.05, -0.02, 0.01),
            (0.8, 0.2, -0.03, 0.04, 0.02),
            (0.2, 0.8, 0.02, 0.01, -0.04),
            (0.8, 0.8, -0.01, -0.03, 0.03),
        ]);
        let inputs = EvalInputs {
            spec: &spec,
            data: Some(&ds),
            physics: None,
            lambda: 0.0,
        };
        let out = train_stage(&inputs, params, &StopRule::threshold(5000, 1e-6), 1e-2).unwrap();
        assert_eq!(out.reason, StopReason::ThresholdMet, "final loss {:?}", out.log.final_total());
        assert!(out.log.final_total().unwrap() < 1e-6);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let spec = tiny_spec(2);
        let ds = tiny_dataset(&[(0.3, 0.3, 0.1, 0.0, 0.0), (0.7, 0.7, -0.1, 0.1, 0.0)]);
        let colloc = make_collocation_set(&[100.0], 4, 3, LidProfile::Regularized).unwrap();
        let inputs = EvalInputs {
            spec: &spec,
            data: Some(&ds),
            physics: Some((&colloc, PhysicsMode::Full)),
            lambda: 1.0,
        };
        let run = || {
            train_stage(&inputs, init_xavier(&spec, 77), &StopRule::epochs(25), 1e-3).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.log, b.log);
        for (x, y) in a.params.values().iter().zip(b.params.values()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn divergence_reports_last_finite_parameters() {
        let spec = tiny_spec(2);
        let params = init_xavier(&spec, 4);
        let ds = tiny_dataset(&[(0.5, 0.5, 0.3, 0.1, 0.0)]);
        let inputs = EvalInputs {
            spec: &spec,
            data: Some(&ds),
            physics: None,
            lambda: 0.0,
        };
        // An absurd learning rate overshoots into overflow territory fast:
        // the moment-normalized step is about +-lr per parameter, so the
        // linear head readout reaches ~1e200 and its squared error overflows.
        let result = train_stage(&inputs, params, &StopRule::epochs(2000), 1e200);
        match result {
            Err(TrainingError::Diverged { last, log, epoch }) => {
                assert!(epoch >= 1);
                assert!(last.values().iter().all(|v| v.is_finite()));
                assert!(!log.entries.is_empty());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn convergence_log_round_trips_through_csv() {
        let mut log = ConvergenceLog::default();
        log.push(
            1,
            &LossBreakdown::assemble(Some(0.5), Some((0.1, 0.05)), 1.0),
        );
        log.push(2, &LossBreakdown::assemble(Some(0.25), None, 0.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        log.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,total,mse_data,mse_pde,mse_bc");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].contains("NaN"));
    }
}

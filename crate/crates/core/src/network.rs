//! Dense multilayer perceptron with a shared trunk and three output heads.
//!
//! The architecture is fixed in shape but parametric in size: `trunk_depth`
//! tanh layers are shared, then one branch per output quantity (u, v, p) runs
//! `head_depth` tanh layers followed by a linear readout. Inputs are the
//! spatial coordinates, optionally joined by a Reynolds-number channel
//! normalized by [`RE_SCALE`].
//!
//! Networks evaluate two ways: [`forward`] in plain f64 arithmetic, and
//! [`forward_taylor`] on a [`Tape`] carrying spatial-derivative slots. Both
//! walk the layers with identical accumulation order, so the value slots of
//! the taped route reproduce [`forward`] bit for bit.

use crate::autodiff::{taylor_affine, taylor_tanh, NodeId, Tape, TaylorTuple};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

/// Divisor that maps Reynolds numbers into a unit-order input range.
pub const RE_SCALE: f64 = 300.0;

/// Number of output heads; order is fixed as u, v, p.
pub const HEAD_COUNT: usize = 3;

pub const HEAD_NAMES: [&str; HEAD_COUNT] = ["u", "v", "p"];

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("parameter vector has {got} values, spec needs {expected}")]
    ParameterCount { expected: usize, got: usize },
    #[error("input_dim {1} network {0}")]
    InputMismatch(String, usize),
    #[error("non-finite parameter at flat index {0}")]
    NonFiniteParameter(usize),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint at line {line}: {msg}")]
    MalformedCheckpoint { line: usize, msg: String },
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
}

/// Architecture description. `input_dim` is 2 for single-Reynolds models and
/// 3 when the Reynolds number is a network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub trunk_depth: usize,
    pub head_depth: usize,
    pub width: usize,
}

/// (fan_in, fan_out) of one affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LayerShape {
    /// Weights plus biases.
    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

impl NetworkSpec {
    pub fn new(
        input_dim: usize,
        trunk_depth: usize,
        head_depth: usize,
        width: usize,
    ) -> Result<Self, NetworkError> {
        if input_dim != 2 && input_dim != 3 {
            return Err(NetworkError::InvalidSpec(format!(
                "input_dim must be 2 or 3, got {input_dim}"
            )));
        }
        if trunk_depth == 0 || head_depth == 0 {
            return Err(NetworkError::InvalidSpec(
                "trunk_depth and head_depth must be at least 1".into(),
            ));
        }
        if width == 0 {
            return Err(NetworkError::InvalidSpec("width must be at least 1".into()));
        }
        Ok(NetworkSpec {
            input_dim,
            trunk_depth,
            head_depth,
            width,
        })
    }

    /// Reference configuration: three shared layers and three layers per
    /// head, 100 nodes each.
    pub fn reference(input_dim: usize) -> Result<Self, NetworkError> {
        NetworkSpec::new(input_dim, 3, 3, 100)
    }

    pub fn takes_re(&self) -> bool {
        self.input_dim == 3
    }

    /// Layer shapes in parameter-layout order: trunk first, then for each
    /// head its hidden layers followed by the linear readout.
    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let w = self.width;
        let mut shapes = Vec::new();
        shapes.push(LayerShape {
            fan_in: self.input_dim,
            fan_out: w,
        });
        for _ in 1..self.trunk_depth {
            shapes.push(LayerShape { fan_in: w, fan_out: w });
        }
        for _ in 0..HEAD_COUNT {
            for _ in 0..self.head_depth {
                shapes.push(LayerShape { fan_in: w, fan_out: w });
            }
            shapes.push(LayerShape { fan_in: w, fan_out: 1 });
        }
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(LayerShape::param_count).sum()
    }
}

/// All weights and biases of one network as a flat vector.
///
/// Layout: layers in [`NetworkSpec::layer_shapes`] order; within a layer the
/// weight matrix row-major as `w[out][in]`, then the biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    shapes: Vec<LayerShape>,
    values: Vec<f64>,
}

impl ParameterSet {
    pub fn from_flat(spec: &NetworkSpec, values: Vec<f64>) -> Result<Self, NetworkError> {
        let shapes = spec.layer_shapes();
        let expected: usize = shapes.iter().map(LayerShape::param_count).sum();
        if values.len() != expected {
            return Err(NetworkError::ParameterCount {
                expected,
                got: values.len(),
            });
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(NetworkError::NonFiniteParameter(bad));
        }
        Ok(ParameterSet { shapes, values })
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Flat offset of each layer's parameter block.
    fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.shapes.len());
        let mut acc = 0;
        for s in &self.shapes {
            offsets.push(acc);
            acc += s.param_count();
        }
        offsets
    }
}

/// Xavier-normal initialization: weights drawn from N(0, 2/(fan_in+fan_out)),
/// biases zero. The draw order is fixed (layer by layer, row-major), so a
/// seed pins every bit of the result.
pub fn init_xavier(spec: &NetworkSpec, seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = spec.layer_shapes();
    let mut values = Vec::with_capacity(spec.param_count());
    for shape in &shapes {
        let std = (2.0 / (shape.fan_in + shape.fan_out) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        for _ in 0..shape.fan_in * shape.fan_out {
            values.push(dist.sample(&mut rng));
        }
        for _ in 0..shape.fan_out {
            values.push(0.0);
        }
    }
    ParameterSet { shapes, values }
}

fn check_re_arg(spec: &NetworkSpec, re: Option<f64>) -> Result<(), NetworkError> {
    match (spec.takes_re(), re) {
        (true, None) => Err(NetworkError::InputMismatch(
            "needs a Reynolds-number input".into(),
            spec.input_dim,
        )),
        (false, Some(_)) => Err(NetworkError::InputMismatch(
            "does not take a Reynolds-number input".into(),
            spec.input_dim,
        )),
        _ => Ok(()),
    }
}

/// Plain evaluation returning (u, v, p).
pub fn forward(
    spec: &NetworkSpec,
    params: &ParameterSet,
    x: f64,
    y: f64,
    re: Option<f64>,
) -> Result<[f64; HEAD_COUNT], NetworkError> {
    check_re_arg(spec, re)?;
    if params.shapes != spec.layer_shapes() {
        return Err(NetworkError::InvalidSpec(
            "parameter set was built for a different spec".into(),
        ));
    }

    let mut inputs = vec![x, y];
    if let Some(re) = re {
        inputs.push(re / RE_SCALE);
    }

    let offsets = params.layer_offsets();
    let vals = &params.values;

    // Affine evaluation mirrors the taped route exactly: start from the
    // bias, then add weight*input terms in index order.
    let affine = |layer: usize, act: &[f64], out: &mut Vec<f64>| {
        let shape = params.shapes[layer];
        let base = offsets[layer];
        let bias_base = base + shape.fan_in * shape.fan_out;
        out.clear();
        for j in 0..shape.fan_out {
            let row = base + j * shape.fan_in;
            let mut acc = vals[bias_base + j];
            for i in 0..shape.fan_in {
                acc += vals[row + i] * act[i];
            }
            out.push(acc);
        }
    };

    let mut act = inputs;
    let mut scratch = Vec::new();
    for layer in 0..spec.trunk_depth {
        affine(layer, &act, &mut scratch);
        act.clear();
        act.extend(scratch.iter().map(|z| z.tanh()));
    }
    let trunk = act;

    let mut out = [0.0; HEAD_COUNT];
    for head in 0..HEAD_COUNT {
        let first = spec.trunk_depth + head * (spec.head_depth + 1);
        let mut act = trunk.clone();
        for l in 0..spec.head_depth {
            affine(first + l, &act, &mut scratch);
            act.clear();
            act.extend(scratch.iter().map(|z| z.tanh()));
        }
        affine(first + spec.head_depth, &act, &mut scratch);
        out[head] = scratch[0];
    }
    Ok(out)
}

/// Parameter leaves recorded on a tape, in flat layout order. Recording the
/// parameters once per optimization step and rewinding to the watermark
/// afterwards keeps per-sample subgraphs cheap.
#[derive(Debug, Clone)]
pub struct TapedParams {
    shapes: Vec<LayerShape>,
    input_dim: usize,
    ids: Vec<NodeId>,
    offsets: Vec<usize>,
}

impl TapedParams {
    pub fn record(
        tape: &mut Tape,
        spec: &NetworkSpec,
        params: &ParameterSet,
    ) -> Result<Self, NetworkError> {
        if params.shapes != spec.layer_shapes() {
            return Err(NetworkError::InvalidSpec(
                "parameter set was built for a different spec".into(),
            ));
        }
        let mut ids = Vec::with_capacity(params.values.len());
        for &v in &params.values {
            ids.push(tape.var(v)?);
        }
        Ok(TapedParams {
            shapes: params.shapes.clone(),
            input_dim: spec.input_dim,
            ids,
            offsets: params.layer_offsets(),
        })
    }

    /// Node id of the flat parameter at `index`.
    pub fn id(&self, index: usize) -> NodeId {
        self.ids[index]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn layer(&self, layer: usize) -> (LayerShape, &[NodeId], &[NodeId]) {
        let shape = self.shapes[layer];
        let base = self.offsets[layer];
        let wn = shape.fan_in * shape.fan_out;
        (
            shape,
            &self.ids[base..base + wn],
            &self.ids[base + wn..base + wn + shape.fan_out],
        )
    }
}

fn taped_affine_layer(
    tape: &mut Tape,
    taped: &TapedParams,
    layer: usize,
    act: &[TaylorTuple],
) -> Vec<TaylorTuple> {
    let (shape, weights, biases) = taped.layer(layer);
    debug_assert_eq!(act.len(), shape.fan_in);
    let mut out = Vec::with_capacity(shape.fan_out);
    for j in 0..shape.fan_out {
        let row = &weights[j * shape.fan_in..(j + 1) * shape.fan_in];
        out.push(taylor_affine(tape, act, row, biases[j]));
    }
    out
}

/// Taped evaluation with derivative slots. Value slots match [`forward`]
/// bitwise; dx/dy/dxx/dyy slots carry the exact spatial derivatives.
pub fn forward_taylor_taped(
    spec: &NetworkSpec,
    taped: &TapedParams,
    tape: &mut Tape,
    x: f64,
    y: f64,
    re: Option<f64>,
) -> Result<[TaylorTuple; HEAD_COUNT], NetworkError> {
    check_re_arg(spec, re)?;
    if taped.input_dim != spec.input_dim || taped.shapes != spec.layer_shapes() {
        return Err(NetworkError::InvalidSpec(
            "taped parameters were recorded for a different spec".into(),
        ));
    }

    let mut act = vec![
        TaylorTuple::coordinate_x(tape, x)?,
        TaylorTuple::coordinate_y(tape, y)?,
    ];
    if let Some(re) = re {
        act.push(TaylorTuple::spatial_constant(tape, re / RE_SCALE)?);
    }

    for layer in 0..spec.trunk_depth {
        let lin = taped_affine_layer(tape, taped, layer, &act);
        act = lin.iter().map(|z| taylor_tanh(tape, z)).collect();
    }
    let trunk = act;

    let mut out = Vec::with_capacity(HEAD_COUNT);
    for head in 0..HEAD_COUNT {
        let first = spec.trunk_depth + head * (spec.head_depth + 1);
        let mut act = trunk.clone();
        for l in 0..spec.head_depth {
            let lin = taped_affine_layer(tape, taped, first + l, &act);
            act = lin.iter().map(|z| taylor_tanh(tape, z)).collect();
        }
        let lin = taped_affine_layer(tape, taped, first + spec.head_depth, &act);
        out.push(lin[0]);
    }
    Ok([out[0], out[1], out[2]])
}

/// Convenience wrapper that records the parameters itself. Training loops
/// should record once via [`TapedParams::record`] instead.
pub fn forward_taylor(
    spec: &NetworkSpec,
    params: &ParameterSet,
    tape: &mut Tape,
    x: f64,
    y: f64,
    re: Option<f64>,
) -> Result<[TaylorTuple; HEAD_COUNT], NetworkError> {
    let taped = TapedParams::record(tape, spec, params)?;
    forward_taylor_taped(spec, &taped, tape, x, y, re)
}

/// Value-only taped evaluation for terms that need predictions but no
/// spatial derivatives. Matches [`forward`] bitwise for the same reason the
/// Taylor route does.
pub fn forward_values_taped(
    spec: &NetworkSpec,
    taped: &TapedParams,
    tape: &mut Tape,
    x: f64,
    y: f64,
    re: Option<f64>,
) -> Result<[NodeId; HEAD_COUNT], NetworkError> {
    check_re_arg(spec, re)?;
    if taped.input_dim != spec.input_dim || taped.shapes != spec.layer_shapes() {
        return Err(NetworkError::InvalidSpec(
            "taped parameters were recorded for a different spec".into(),
        ));
    }

    let mut act = vec![tape.var(x)?, tape.var(y)?];
    if let Some(re) = re {
        act.push(tape.var(re / RE_SCALE)?);
    }

    let affine = |tape: &mut Tape, taped: &TapedParams, layer: usize, act: &[NodeId]| {
        let (shape, weights, biases) = taped.layer(layer);
        let mut out = Vec::with_capacity(shape.fan_out);
        for j in 0..shape.fan_out {
            let mut acc = biases[j];
            for i in 0..shape.fan_in {
                let term = tape.mul(weights[j * shape.fan_in + i], act[i]);
                acc = tape.add(acc, term);
            }
            out.push(acc);
        }
        out
    };

    for layer in 0..spec.trunk_depth {
        let lin = affine(tape, taped, layer, &act);
        act = lin.iter().map(|z| tape.tanh(*z)).collect();
    }
    let trunk = act;

    let mut out = Vec::with_capacity(HEAD_COUNT);
    for head in 0..HEAD_COUNT {
        let first = spec.trunk_depth + head * (spec.head_depth + 1);
        let mut act = trunk.clone();
        for l in 0..spec.head_depth {
            let lin = affine(tape, taped, first + l, &act);
            act = lin.iter().map(|z| tape.tanh(*z)).collect();
        }
        let lin = affine(tape, taped, first + spec.head_depth, &act);
        out.push(lin[0]);
    }
    Ok([out[0], out[1], out[2]])
}

/// Writes spec and parameters as text. Floats are printed in Rust's shortest
/// round-trip form, so save followed by load reproduces every bit.
pub fn save_checkpoint(
    path: &Path,
    spec: &NetworkSpec,
    params: &ParameterSet,
) -> Result<(), NetworkError> {
    if params.shapes != spec.layer_shapes() {
        return Err(NetworkError::InvalidSpec(
            "parameter set was built for a different spec".into(),
        ));
    }
    let mut out = String::new();
    let _ = writeln!(out, "cavity-pinn-checkpoint v1");
    let _ = writeln!(out, "input_dim {}", spec.input_dim);
    let _ = writeln!(out, "trunk_depth {}", spec.trunk_depth);
    let _ = writeln!(out, "head_depth {}", spec.head_depth);
    let _ = writeln!(out, "width {}", spec.width);
    let _ = writeln!(out, "layers {}", params.shapes.len());
    for s in &params.shapes {
        let _ = writeln!(out, "shape {} {}", s.fan_in, s.fan_out);
    }
    let _ = writeln!(out, "values {}", params.values.len());
    for v in &params.values {
        let _ = writeln!(out, "{v}");
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct LineCursor<'a> {
    lines: std::str::Lines<'a>,
    line_no: usize,
}

impl<'a> LineCursor<'a> {
    fn new(text: &'a str) -> Self {
        LineCursor {
            lines: text.lines(),
            line_no: 0,
        }
    }

    fn next(&mut self, want: &str) -> Result<(usize, &'a str), NetworkError> {
        let line = self.lines.next().ok_or(NetworkError::MalformedCheckpoint {
            line: self.line_no + 1,
            msg: format!("file ended before {want}"),
        })?;
        self.line_no += 1;
        Ok((self.line_no, line))
    }

    fn int_field(&mut self, name: &str) -> Result<usize, NetworkError> {
        let (line_no, line) = self.next(name)?;
        let rest = line
            .strip_prefix(name)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| NetworkError::MalformedCheckpoint {
                line: line_no,
                msg: format!("expected `{name} <n>`"),
            })?;
        rest.trim()
            .parse()
            .map_err(|_| NetworkError::MalformedCheckpoint {
                line: line_no,
                msg: format!("bad integer for {name}"),
            })
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(NetworkSpec, ParameterSet), NetworkError> {
    let text = std::fs::read_to_string(path)?;
    let mut cur = LineCursor::new(&text);

    let (line_no, header) = cur.next("header")?;
    if header != "cavity-pinn-checkpoint v1" {
        return Err(NetworkError::MalformedCheckpoint {
            line: line_no,
            msg: "not a checkpoint file".into(),
        });
    }

    let input_dim = cur.int_field("input_dim")?;
    let trunk_depth = cur.int_field("trunk_depth")?;
    let head_depth = cur.int_field("head_depth")?;
    let width = cur.int_field("width")?;
    let layers = cur.int_field("layers")?;
    let spec = NetworkSpec::new(input_dim, trunk_depth, head_depth, width)?;
    let expected_shapes = spec.layer_shapes();
    if layers != expected_shapes.len() {
        return Err(NetworkError::MalformedCheckpoint {
            line: 0,
            msg: format!(
                "layer count {layers} does not match spec ({})",
                expected_shapes.len()
            ),
        });
    }
    for want in &expected_shapes {
        let (line_no, line) = cur.next("shape")?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let ok = parts.len() == 3
            && parts[0] == "shape"
            && parts[1].parse() == Ok(want.fan_in)
            && parts[2].parse() == Ok(want.fan_out);
        if !ok {
            return Err(NetworkError::MalformedCheckpoint {
                line: line_no,
                msg: format!("expected `shape {} {}`", want.fan_in, want.fan_out),
            });
        }
    }
    let count = cur.int_field("values")?;
    if count != spec.param_count() {
        return Err(NetworkError::MalformedCheckpoint {
            line: 0,
            msg: format!(
                "value count {count} does not match spec ({})",
                spec.param_count()
            ),
        });
    }
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        let (line_no, line) = cur.next("value")?;
        let v: f64 = line
            .trim()
            .parse()
            .map_err(|_| NetworkError::MalformedCheckpoint {
                line: line_no,
                msg: "bad float".into(),
            })?;
        values.push(v);
    }
    let params = ParameterSet::from_flat(&spec, values)?;
    Ok((spec, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> NetworkSpec {
        NetworkSpec::new(2, 2, 1, 8).unwrap()
    }

    #[test]
    fn spec_rejects_bad_dimensions() {
        assert!(NetworkSpec::new(4, 3, 3, 100).is_err());
        assert!(NetworkSpec::new(2, 0, 3, 100).is_err());
        assert!(NetworkSpec::new(2, 3, 3, 0).is_err());
    }

    #[test]
    fn reference_parameter_count_matches_shape_table() {
        // Hand-built table for the 2-input reference network: trunk
        // 2->100, 100->100, 100->100, then per head 3x 100->100 and a
        // 100->1 readout.
        let spec = NetworkSpec::reference(2).unwrap();
        let expected_shapes = [
            (2, 100),
            (100, 100),
            (100, 100),
            (100, 100),
            (100, 100),
            (100, 100),
            (100, 1),
            (100, 100),
            (100, 100),
            (100, 100),
            (100, 1),
            (100, 100),
            (100, 100),
            (100, 100),
            (100, 1),
        ];
        let got = spec.layer_shapes();
        assert_eq!(got.len(), expected_shapes.len());
        for (g, (fi, fo)) in got.iter().zip(expected_shapes) {
            assert_eq!((g.fan_in, g.fan_out), (fi, fo));
        }
        let expected_count: usize = expected_shapes.iter().map(|(fi, fo)| fi * fo + fo).sum();
        assert_eq!(spec.param_count(), expected_count);
        assert_eq!(init_xavier(&spec, 0).len(), expected_count);
    }

    #[test]
    fn flatten_round_trip_is_identity() {
        let spec = small_spec();
        let p = init_xavier(&spec, 7);
        let flat = p.values().to_vec();
        let p2 = ParameterSet::from_flat(&spec, flat.clone()).unwrap();
        assert_eq!(p, p2);
        assert_eq!(p2.values(), flat.as_slice());
    }

    #[test]
    fn from_flat_rejects_wrong_length_and_non_finite() {
        let spec = small_spec();
        assert!(matches!(
            ParameterSet::from_flat(&spec, vec![0.0; 3]),
            Err(NetworkError::ParameterCount { .. })
        ));
        let mut vals = vec![0.0; spec.param_count()];
        vals[5] = f64::NAN;
        assert!(matches!(
            ParameterSet::from_flat(&spec, vals),
            Err(NetworkError::NonFiniteParameter(5))
        ));
    }

    #[test]
    fn xavier_is_seed_deterministic_with_zero_biases() {
        let spec = small_spec();
        let a = init_xavier(&spec, 42);
        let b = init_xavier(&spec, 42);
        let c = init_xavier(&spec, 43);
        assert_eq!(a, b);
        assert_ne!(a, c);

        // Biases occupy the tail of each layer block and must be zero.
        let shapes = spec.layer_shapes();
        let mut off = 0;
        for s in &shapes {
            let w = s.fan_in * s.fan_out;
            for i in 0..s.fan_out {
                assert_eq!(a.values()[off + w + i], 0.0);
            }
            off += s.param_count();
        }
    }

    #[test]
    fn xavier_variance_matches_fan_sum_rule() {
        // 100x100 layers from ten seeds give 1e5 draws; their variance must
        // sit within 5% of 2/(100+100) = 0.01.
        let spec = NetworkSpec::new(2, 2, 1, 100).unwrap();
        let shapes = spec.layer_shapes();
        // Layer 1 is 100->100; it starts after layer 0's block.
        let start = shapes[0].param_count();
        let mut draws = Vec::with_capacity(100_000);
        for seed in 0..10u64 {
            let p = init_xavier(&spec, seed);
            draws.extend_from_slice(&p.values()[start..start + 100 * 100]);
        }
        assert_eq!(draws.len(), 100_000);
        let mean: f64 = draws.iter().sum::<f64>() / draws.len() as f64;
        let var: f64 =
            draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / draws.len() as f64;
        assert!((var - 0.01).abs() < 0.0005, "var = {var}");
    }

    #[test]
    fn forward_matches_hand_rolled_matrix_evaluation() {
        // Independent re-evaluation with explicit matrix-vector products.
        let spec = small_spec();
        let p = init_xavier(&spec, 11);
        let (x, y) = (0.3, 0.8);

        let shapes = spec.layer_shapes();
        let mut off = Vec::new();
        let mut acc = 0;
        for s in &shapes {
            off.push(acc);
            acc += s.param_count();
        }
        let vals = p.values();
        let matvec = |layer: usize, input: &[f64]| -> Vec<f64> {
            let s = shapes[layer];
            let b0 = off[layer] + s.fan_in * s.fan_out;
            (0..s.fan_out)
                .map(|j| {
                    vals[b0 + j]
                        + (0..s.fan_in)
                            .map(|i| vals[off[layer] + j * s.fan_in + i] * input[i])
                            .sum::<f64>()
                })
                .collect()
        };

        let mut h = vec![x, y];
        for l in 0..spec.trunk_depth {
            h = matvec(l, &h).iter().map(|z| z.tanh()).collect();
        }
        let mut expect = [0.0; 3];
        for head in 0..3 {
            let first = spec.trunk_depth + head * (spec.head_depth + 1);
            let mut a = h.clone();
            for l in 0..spec.head_depth {
                a = matvec(first + l, &a).iter().map(|z| z.tanh()).collect();
            }
            expect[head] = matvec(first + spec.head_depth, &a)[0];
        }

        let got = forward(&spec, &p, x, y, None).unwrap();
        for (g, e) in got.iter().zip(expect) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
        assert!(got.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn re_argument_must_match_input_dim() {
        let spec2 = small_spec();
        let p2 = init_xavier(&spec2, 1);
        assert!(forward(&spec2, &p2, 0.5, 0.5, Some(100.0)).is_err());
        let spec3 = NetworkSpec::new(3, 2, 1, 8).unwrap();
        let p3 = init_xavier(&spec3, 1);
        assert!(forward(&spec3, &p3, 0.5, 0.5, None).is_err());
        assert!(forward(&spec3, &p3, 0.5, 0.5, Some(100.0)).is_ok());
    }

    #[test]
    fn taylor_value_slots_match_forward_bitwise() {
        for (spec, re) in [
            (small_spec(), None),
            (NetworkSpec::new(3, 2, 2, 6).unwrap(), Some(150.0)),
        ] {
            let p = init_xavier(&spec, 5);
            for k in 0..20 {
                let x = (k as f64) / 19.0;
                let y = ((k * 7) % 20) as f64 / 19.0;
                let plain = forward(&spec, &p, x, y, re).unwrap();
                let mut tape = Tape::new();
                let tup = forward_taylor(&spec, &p, &mut tape, x, y, re).unwrap();
                for (t, pv) in tup.iter().zip(plain) {
                    assert_eq!(tape.value(t.val).to_bits(), pv.to_bits());
                }
            }
        }
    }

    #[test]
    fn taped_value_route_matches_forward_bitwise() {
        let spec = small_spec();
        let p = init_xavier(&spec, 9);
        let mut tape = Tape::new();
        let taped = TapedParams::record(&mut tape, &spec, &p).unwrap();
        let plain = forward(&spec, &p, 0.21, 0.77, None).unwrap();
        let ids = forward_values_taped(&spec, &taped, &mut tape, 0.21, 0.77, None).unwrap();
        for (id, pv) in ids.iter().zip(plain) {
            assert_eq!(tape.value(*id).to_bits(), pv.to_bits());
        }
    }

    #[test]
    fn linear_response_has_exact_slopes() {
        // Zero out everything except a pass-through so u(x, y) = 2x + 3y:
        // width-1 identity-free construction via hand-set parameters is
        // impractical with tanh layers, so instead check the analytic
        // derivative slots of a generic network against finite differences.
        let spec = small_spec();
        let p = init_xavier(&spec, 3);
        let (x0, y0) = (0.45, 0.3);
        let mut tape = Tape::new();
        let tup = forward_taylor(&spec, &p, &mut tape, x0, y0, None).unwrap();

        let eval = |x: f64, y: f64, head: usize| forward(&spec, &p, x, y, None).unwrap()[head];
        let h = 1e-5;
        let h2 = 1e-4;
        for head in 0..3 {
            let t = tup[head];
            let fd_dx = (eval(x0 + h, y0, head) - eval(x0 - h, y0, head)) / (2.0 * h);
            let fd_dy = (eval(x0, y0 + h, head) - eval(x0, y0 - h, head)) / (2.0 * h);
            let fd_dxx = (eval(x0 + h2, y0, head) - 2.0 * eval(x0, y0, head)
                + eval(x0 - h2, y0, head))
                / (h2 * h2);
            let fd_dyy = (eval(x0, y0 + h2, head) - 2.0 * eval(x0, y0, head)
                + eval(x0, y0 - h2, head))
                / (h2 * h2);
            let checks = [
                (tape.value(t.dx), fd_dx),
                (tape.value(t.dy), fd_dy),
                (tape.value(t.dxx), fd_dxx),
                (tape.value(t.dyy), fd_dyy),
            ];
            for (got, want) in checks {
                let rel = (got - want).abs() / want.abs().max(1e-8);
                assert!(rel < 1e-4, "head {head}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let spec = NetworkSpec::new(3, 2, 2, 5).unwrap();
        let p = init_xavier(&spec, 1234);
        save_checkpoint(&path, &spec, &p).unwrap();
        let (spec2, p2) = load_checkpoint(&path).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(p.values().len(), p2.values().len());
        for (a, b) in p.values().iter().zip(p2.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn checkpoint_load_reports_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, "not a checkpoint\n").unwrap();
        match load_checkpoint(&path) {
            Err(NetworkError::MalformedCheckpoint { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected malformed error, got {other:?}"),
        }

        let spec = small_spec();
        let p = init_xavier(&spec, 0);
        save_checkpoint(&path, &spec, &p).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let truncated: String = text.lines().take(10).collect::<Vec<_>>().join("\n");
        std::fs::write(&path, truncated).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}

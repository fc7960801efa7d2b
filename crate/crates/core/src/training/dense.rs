//! Chunked array kernels for the network loss terms.
//!
//! The streaming evaluator used to push one per-sample subgraph at a time
//! through the tape; these kernels compute the same quantities — predictions
//! and parameter gradients for the data/boundary terms, and the five-slot
//! value/derivative bundle with its parameter gradients for the interior
//! physics term — directly on flat `f64` buffers, with no graph
//! construction. Points are processed in chunks of up to [`CHUNK`] samples
//! laid out sample-contiguously, so every weight load is amortized across
//! the whole chunk and the per-sample inner loops vectorize. All scratch
//! storage lives in the workspace structs and is reused between chunks; a
//! full-batch pass allocates nothing.
//!
//! Correctness is pinned by the unit tests here, which compare every output
//! lane against the taped routes point by point, and by the evaluator-level
//! suites in the parent module, which compare whole loss/gradient
//! evaluations against the one-tape route: values agree to rounding and
//! gradients to the order of f64 summation.
//!
//! Each `backward` call consumes the caches of the immediately preceding
//! `forward` call on the same workspace; callers must keep the pairs
//! adjacent and pass one seed row per forwarded sample.

use crate::network::{LayerShape, NetworkSpec, HEAD_COUNT, RE_SCALE};

/// Chunk capacity: how many samples one forward/backward sweep carries.
pub(crate) const CHUNK: usize = 64;

/// Number of derivative slots carried per scalar quantity in the jet path:
/// {v, dx, dy, dxx, dyy}.
const SLOTS: usize = 5;

/// Value plus first and second spatial derivatives of one scalar quantity:
/// {v, dx, dy, dxx, dyy}. The plain-array counterpart of a taped tuple.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct Jet {
    pub v: f64,
    pub dx: f64,
    pub dy: f64,
    pub dxx: f64,
    pub dyy: f64,
}

/// Network topology bookkeeping shared by the kernel workspaces: layer
/// shapes, flat parameter offsets, and head indexing.
struct Topo {
    spec: NetworkSpec,
    shapes: Vec<LayerShape>,
    offsets: Vec<usize>,
    param_count: usize,
}

impl Topo {
    fn new(spec: &NetworkSpec) -> Self {
        let shapes = spec.layer_shapes();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut acc = 0;
        for s in &shapes {
            offsets.push(acc);
            acc += s.param_count();
        }
        Topo {
            spec: *spec,
            shapes,
            offsets,
            param_count: acc,
        }
    }

    /// Global index of a head's first hidden layer.
    fn head_start(&self, head: usize) -> usize {
        self.spec.trunk_depth + head * (self.spec.head_depth + 1)
    }

    fn weights<'a>(&self, params: &'a [f64], layer: usize) -> (&'a [f64], &'a [f64]) {
        let s = self.shapes[layer];
        let base = self.offsets[layer];
        let wn = s.fan_in * s.fan_out;
        (&params[base..base + wn], &params[base + wn..base + wn + s.fan_out])
    }
}

// ---- value path ---------------------------------------------------------

/// Reusable chunk workspace for plain predictions and their parameter
/// gradients (the data and boundary terms).
///
/// Activations are stored row-major as `[node][sample]` with a fixed row
/// stride of [`CHUNK`]; only the first `n` lanes of each row are live.
pub(crate) struct BatchValue {
    topo: Topo,
    /// Live sample count of the current chunk.
    n: usize,
    /// Input rows of the most recent forward: x, y, scaled Re.
    xin: Vec<f64>,
    /// Per-layer output rows of the most recent forward (post-tanh for
    /// hidden layers, raw affine output for readouts).
    act: Vec<Vec<f64>>,
    // Ping-pong adjoint rows and the trunk-output accumulator.
    adj_a: Vec<f64>,
    adj_b: Vec<f64>,
    adj_trunk: Vec<f64>,
}

impl BatchValue {
    pub(crate) fn new(spec: &NetworkSpec) -> Self {
        let topo = Topo::new(spec);
        let act: Vec<Vec<f64>> = topo
            .shapes
            .iter()
            .map(|s| vec![0.0; s.fan_out * CHUNK])
            .collect();
        let rows = spec.width.max(spec.input_dim);
        BatchValue {
            topo,
            n: 0,
            xin: vec![0.0; spec.input_dim * CHUNK],
            act,
            adj_a: vec![0.0; rows * CHUNK],
            adj_b: vec![0.0; rows * CHUNK],
            adj_trunk: vec![0.0; rows * CHUNK],
        }
    }

    pub(crate) fn spec(&self) -> &NetworkSpec {
        &self.topo.spec
    }

    /// Prediction of one head for sample lane `b` of the current chunk.
    pub(crate) fn pred(&self, head: usize, b: usize) -> f64 {
        debug_assert!(b < self.n);
        let readout = self.topo.head_start(head) + self.topo.spec.head_depth;
        self.act[readout][b]
    }

    /// Affine layer over the chunk: every output row starts from its bias
    /// and accumulates weight-scaled input rows in index order.
    fn affine(&mut self, params: &[f64], layer: usize, from_input: bool, prev: usize) {
        let s = self.topo.shapes[layer];
        let n = self.n;
        let (w, bias) = self.topo.weights(params, layer);
        let (input, out) = if from_input {
            (&self.xin[..], &mut self.act[layer])
        } else {
            let (lo, hi) = self.act.split_at_mut(layer);
            (&lo[prev][..], &mut hi[0])
        };
        for j in 0..s.fan_out {
            let dst = &mut out[j * CHUNK..j * CHUNK + n];
            dst.fill(bias[j]);
            let row = &w[j * s.fan_in..(j + 1) * s.fan_in];
            for (i, &wv) in row.iter().enumerate() {
                let src = &input[i * CHUNK..i * CHUNK + n];
                let dst = &mut out[j * CHUNK..j * CHUNK + n];
                for (d, &sv) in dst.iter_mut().zip(src) {
                    *d += wv * sv;
                }
            }
        }
    }

    fn tanh_layer(&mut self, layer: usize) {
        let s = self.topo.shapes[layer];
        let n = self.n;
        let a = &mut self.act[layer];
        for j in 0..s.fan_out {
            for z in &mut a[j * CHUNK..j * CHUNK + n] {
                *z = z.tanh();
            }
        }
    }

    /// Plain predictions (u, v, p) for a chunk of up to [`CHUNK`] points;
    /// fills the caches for [`backward`](Self::backward). `res` carries one
    /// raw Reynolds number per point for architectures that take it.
    pub(crate) fn forward(&mut self, params: &[f64], xy: &[(f64, f64)], res: Option<&[f64]>) {
        let n = xy.len();
        debug_assert!(n >= 1 && n <= CHUNK);
        debug_assert_eq!(params.len(), self.topo.param_count);
        debug_assert_eq!(res.is_some(), self.topo.spec.takes_re());
        self.n = n;
        for (b, &(x, y)) in xy.iter().enumerate() {
            self.xin[b] = x;
            self.xin[CHUNK + b] = y;
        }
        if let Some(res) = res {
            debug_assert_eq!(res.len(), n);
            for (b, &re) in res.iter().enumerate() {
                self.xin[2 * CHUNK + b] = re / RE_SCALE;
            }
        }

        for layer in 0..self.topo.spec.trunk_depth {
            self.affine(params, layer, layer == 0, layer.wrapping_sub(1));
            self.tanh_layer(layer);
        }
        let trunk_top = self.topo.spec.trunk_depth - 1;

        for head in 0..HEAD_COUNT {
            let first = self.topo.head_start(head);
            for l in 0..self.topo.spec.head_depth {
                let prev = if l == 0 { trunk_top } else { first + l - 1 };
                self.affine(params, first + l, false, prev);
                self.tanh_layer(first + l);
            }
            let readout = first + self.topo.spec.head_depth;
            self.affine(params, readout, false, readout - 1);
        }
    }

    /// Accumulates `d(sum over samples of seed . prediction) / d(params)`
    /// into `grad`, one seed row per live lane, using the caches of the
    /// preceding [`forward`](Self::forward).
    pub(crate) fn backward(
        &mut self,
        params: &[f64],
        seeds: &[[f64; HEAD_COUNT]],
        grad: &mut [f64],
    ) {
        let n = self.n;
        debug_assert_eq!(seeds.len(), n);
        debug_assert_eq!(grad.len(), self.topo.param_count);
        let w = self.topo.spec.width;
        let trunk_top = self.topo.spec.trunk_depth - 1;
        for row in 0..w {
            self.adj_trunk[row * CHUNK..row * CHUNK + n].fill(0.0);
        }

        for head in 0..HEAD_COUNT {
            let first = self.topo.head_start(head);
            let readout = first + self.topo.spec.head_depth;

            // Readout layer: linear, fan_out 1, the z-bar row is the seed
            // column for this head.
            {
                let s = self.topo.shapes[readout];
                debug_assert_eq!(s.fan_out, 1);
                for (b, seed) in seeds.iter().enumerate() {
                    self.adj_b[b] = seed[head];
                }
                let (wts, _) = self.topo.weights(params, readout);
                let base = self.topo.offsets[readout];
                {
                    let input = &self.act[readout - 1];
                    let zrow = &self.adj_b[..n];
                    for i in 0..s.fan_in {
                        let src = &input[i * CHUNK..i * CHUNK + n];
                        grad[base + i] += split_dot(zrow, src);
                    }
                    grad[base + s.fan_in] += split_sum(zrow);
                }
                let (adj_a, adj_b) = (&mut self.adj_a, &self.adj_b);
                for (i, &wv) in wts.iter().enumerate() {
                    let dst = &mut adj_a[i * CHUNK..i * CHUNK + n];
                    for (d, &z) in dst.iter_mut().zip(&adj_b[..n]) {
                        *d = wv * z;
                    }
                }
            }

            // Hidden head layers, last to first. `adj_a` holds the adjoint
            // rows of the current layer's post-tanh output.
            for l in (0..self.topo.spec.head_depth).rev() {
                let layer = first + l;
                let prev = if l == 0 { trunk_top } else { layer - 1 };
                self.backward_hidden(params, grad, layer, prev);
            }
            let (src, dst) = (&self.adj_a, &mut self.adj_trunk);
            for row in 0..w {
                let s = &src[row * CHUNK..row * CHUNK + n];
                let d = &mut dst[row * CHUNK..row * CHUNK + n];
                for (dv, &sv) in d.iter_mut().zip(s) {
                    *dv += sv;
                }
            }
        }

        // Trunk layers, last to first.
        for row in 0..w {
            let (src, dst) = (&self.adj_trunk, &mut self.adj_a);
            dst[row * CHUNK..row * CHUNK + n]
                .copy_from_slice(&src[row * CHUNK..row * CHUNK + n]);
        }
        for layer in (0..self.topo.spec.trunk_depth).rev() {
            self.backward_hidden(params, grad, layer, layer.wrapping_sub(1));
        }
    }

    /// Backward through one tanh layer: turns the output adjoint rows in
    /// `adj_a` into the input adjoint rows (left in `adj_a`), accumulating
    /// weight and bias gradients. `prev == usize::MAX` marks the network
    /// input layer.
    fn backward_hidden(&mut self, params: &[f64], grad: &mut [f64], layer: usize, prev: usize) {
        let s = self.topo.shapes[layer];
        let n = self.n;
        // z-bar rows: output adjoint times tanh'(z) = 1 - a^2.
        {
            let act = &self.act[layer];
            let (adj_a, adj_b) = (&self.adj_a, &mut self.adj_b);
            for j in 0..s.fan_out {
                let arow = &act[j * CHUNK..j * CHUNK + n];
                let src = &adj_a[j * CHUNK..j * CHUNK + n];
                let dst = &mut adj_b[j * CHUNK..j * CHUNK + n];
                for b in 0..n {
                    let a = arow[b];
                    dst[b] = src[b] * (1.0 - a * a);
                }
            }
        }
        let base = self.topo.offsets[layer];
        let wn = s.fan_in * s.fan_out;
        let (wts, _) = self.topo.weights(params, layer);
        let input: &[f64] = if prev == usize::MAX {
            &self.xin
        } else {
            &self.act[prev]
        };
        let (adj_a, adj_b) = (&mut self.adj_a, &self.adj_b);
        for i in 0..s.fan_in {
            adj_a[i * CHUNK..i * CHUNK + n].fill(0.0);
        }
        for j in 0..s.fan_out {
            let zrow = &adj_b[j * CHUNK..j * CHUNK + n];
            let row = &wts[j * s.fan_in..(j + 1) * s.fan_in];
            for (i, &wv) in row.iter().enumerate() {
                let dst = &mut adj_a[i * CHUNK..i * CHUNK + n];
                for (d, &z) in dst.iter_mut().zip(zrow) {
                    *d += wv * z;
                }
            }
            let grow = &mut grad[base + j * s.fan_in..base + (j + 1) * s.fan_in];
            for (i, g) in grow.iter_mut().enumerate() {
                let src = &input[i * CHUNK..i * CHUNK + n];
                *g += split_dot(zrow, src);
            }
            grad[base + wn + j] += split_sum(zrow);
        }
    }
}

/// Dot product with a four-way split accumulation: four independent partial
/// sums striped over the lanes, combined in a fixed order. Deterministic,
/// and the independent chains vectorize.
#[inline]
fn split_dot(a: &[f64], b: &[f64]) -> f64 {
    let (mut a0, mut a1, mut a2, mut a3) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        a0 += xa[0] * xb[0];
        a1 += xa[1] * xb[1];
        a2 += xa[2] * xb[2];
        a3 += xa[3] * xb[3];
    }
    for (r, (&x, &y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        match r {
            0 => a0 += x * y,
            1 => a1 += x * y,
            2 => a2 += x * y,
            _ => a3 += x * y,
        }
    }
    (a0 + a2) + (a1 + a3)
}

/// Lane sum with the same four-way split accumulation as [`split_dot`].
#[inline]
fn split_sum(a: &[f64]) -> f64 {
    let (mut a0, mut a1, mut a2, mut a3) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut ca = a.chunks_exact(4);
    for xa in &mut ca {
        a0 += xa[0];
        a1 += xa[1];
        a2 += xa[2];
        a3 += xa[3];
    }
    for (r, &x) in ca.remainder().iter().enumerate() {
        match r {
            0 => a0 += x,
            1 => a1 += x,
            2 => a2 += x,
            _ => a3 += x,
        }
    }
    (a0 + a2) + (a1 + a3)
}

// ---- jet path -----------------------------------------------------------

/// Reusable chunk workspace for prediction jets and their parameter
/// gradients (the interior physics term).
///
/// Jets are stored slot-major as `[node][slot][sample]` with row stride
/// [`CHUNK`]: the affine sweeps run one contiguous sample row per slot, and
/// the tanh/adjoint algebra reads the five rows of a node at matching
/// lanes.
pub(crate) struct BatchJet {
    topo: Topo,
    n: usize,
    /// Input jet rows of the most recent forward.
    xin: Vec<f64>,
    /// Per-layer pre-activation jet rows of the most recent forward.
    jz: Vec<Vec<f64>>,
    /// Per-layer post-activation jet rows of the most recent forward.
    ja: Vec<Vec<f64>>,
    // Ping-pong adjoint jet rows and the trunk-output accumulator.
    adj_a: Vec<f64>,
    adj_b: Vec<f64>,
    adj_trunk: Vec<f64>,
}

impl BatchJet {
    pub(crate) fn new(spec: &NetworkSpec) -> Self {
        let topo = Topo::new(spec);
        let jz: Vec<Vec<f64>> = topo
            .shapes
            .iter()
            .map(|s| vec![0.0; s.fan_out * SLOTS * CHUNK])
            .collect();
        let ja = jz.clone();
        let rows = spec.width.max(spec.input_dim) * SLOTS;
        BatchJet {
            topo,
            n: 0,
            xin: vec![0.0; spec.input_dim * SLOTS * CHUNK],
            jz,
            ja,
            adj_a: vec![0.0; rows * CHUNK],
            adj_b: vec![0.0; rows * CHUNK],
            adj_trunk: vec![0.0; rows * CHUNK],
        }
    }

    /// Output jet of one head for sample lane `b` of the current chunk.
    pub(crate) fn jet(&self, head: usize, b: usize) -> Jet {
        debug_assert!(b < self.n);
        let readout = self.topo.head_start(head) + self.topo.spec.head_depth;
        let a = &self.ja[readout];
        Jet {
            v: a[b],
            dx: a[CHUNK + b],
            dy: a[2 * CHUNK + b],
            dxx: a[3 * CHUNK + b],
            dyy: a[4 * CHUNK + b],
        }
    }

    /// Affine layer over jet rows: every slot row is a weighted sum of the
    /// matching input slot rows; the bias enters the value row only.
    fn affine(&mut self, params: &[f64], layer: usize, from_input: bool, prev: usize) {
        let s = self.topo.shapes[layer];
        let n = self.n;
        let (w, bias) = self.topo.weights(params, layer);
        let (input, out) = if from_input {
            (&self.xin[..], &mut self.jz[layer])
        } else {
            (&self.ja[prev][..], &mut self.jz[layer])
        };
        for j in 0..s.fan_out {
            let jbase = j * SLOTS * CHUNK;
            out[jbase..jbase + n].fill(bias[j]);
            for slot in 1..SLOTS {
                out[jbase + slot * CHUNK..jbase + slot * CHUNK + n].fill(0.0);
            }
            let row = &w[j * s.fan_in..(j + 1) * s.fan_in];
            for (i, &wv) in row.iter().enumerate() {
                let ibase = i * SLOTS * CHUNK;
                for slot in 0..SLOTS {
                    let src = &input[ibase + slot * CHUNK..ibase + slot * CHUNK + n];
                    let dst = &mut out[jbase + slot * CHUNK..jbase + slot * CHUNK + n];
                    for (d, &sv) in dst.iter_mut().zip(src) {
                        *d += wv * sv;
                    }
                }
            }
        }
    }

    /// Slot propagation through tanh, lane by lane. With t = tanh(z.v) and
    /// s = 1 - t^2:
    ///
    /// a.v = t, a.dx = s z.dx, a.dxx = s z.dxx - 2 t s z.dx^2 (dy/dyy alike).
    fn tanh_layer(&mut self, layer: usize) {
        let shape = self.topo.shapes[layer];
        let n = self.n;
        let (z, a) = (&self.jz[layer], &mut self.ja[layer]);
        for j in 0..shape.fan_out {
            let base = j * SLOTS * CHUNK;
            for b in 0..n {
                let zdx = z[base + CHUNK + b];
                let zdy = z[base + 2 * CHUNK + b];
                let t = z[base + b].tanh();
                let s = 1.0 - t * t;
                let ts2 = 2.0 * t * s;
                a[base + b] = t;
                a[base + CHUNK + b] = s * zdx;
                a[base + 2 * CHUNK + b] = s * zdy;
                a[base + 3 * CHUNK + b] = s * z[base + 3 * CHUNK + b] - ts2 * zdx * zdx;
                a[base + 4 * CHUNK + b] = s * z[base + 4 * CHUNK + b] - ts2 * zdy * zdy;
            }
        }
    }

    /// Prediction jets (u, v, p) with exact spatial-derivative slots for a
    /// chunk of up to [`CHUNK`] points; fills the caches for
    /// [`backward`](Self::backward).
    pub(crate) fn forward(&mut self, params: &[f64], xy: &[(f64, f64)], res: Option<&[f64]>) {
        let n = xy.len();
        debug_assert!(n >= 1 && n <= CHUNK);
        debug_assert_eq!(params.len(), self.topo.param_count);
        debug_assert_eq!(res.is_some(), self.topo.spec.takes_re());
        self.n = n;
        let d = self.topo.spec.input_dim;
        self.xin[..d * SLOTS * CHUNK].fill(0.0);
        for (b, &(x, y)) in xy.iter().enumerate() {
            self.xin[b] = x; // x value row
            self.xin[CHUNK + b] = 1.0; // x dx row
            self.xin[SLOTS * CHUNK + b] = y; // y value row
            self.xin[SLOTS * CHUNK + 2 * CHUNK + b] = 1.0; // y dy row
        }
        if let Some(res) = res {
            debug_assert_eq!(res.len(), n);
            for (b, &re) in res.iter().enumerate() {
                self.xin[2 * SLOTS * CHUNK + b] = re / RE_SCALE;
            }
        }

        for layer in 0..self.topo.spec.trunk_depth {
            self.affine(params, layer, layer == 0, layer.wrapping_sub(1));
            self.tanh_layer(layer);
        }
        let trunk_top = self.topo.spec.trunk_depth - 1;

        for head in 0..HEAD_COUNT {
            let first = self.topo.head_start(head);
            for l in 0..self.topo.spec.head_depth {
                let prev = if l == 0 { trunk_top } else { first + l - 1 };
                self.affine(params, first + l, false, prev);
                self.tanh_layer(first + l);
            }
            let readout = first + self.topo.spec.head_depth;
            self.affine(params, readout, false, readout - 1);
            let nrows = SLOTS * CHUNK;
            let (z, a) = (&self.jz[readout], &mut self.ja[readout]);
            a[..nrows].copy_from_slice(&z[..nrows]);
        }
    }

    /// Accumulates `d(sum over samples, heads and slots of seed . output) /
    /// d(params)` into `grad`, one seed row per live lane, using the caches
    /// of the preceding [`forward`](Self::forward).
    pub(crate) fn backward(
        &mut self,
        params: &[f64],
        seeds: &[[Jet; HEAD_COUNT]],
        grad: &mut [f64],
    ) {
        let n = self.n;
        debug_assert_eq!(seeds.len(), n);
        debug_assert_eq!(grad.len(), self.topo.param_count);
        let w = self.topo.spec.width;
        let trunk_top = self.topo.spec.trunk_depth - 1;
        for row in 0..w * SLOTS {
            self.adj_trunk[row * CHUNK..row * CHUNK + n].fill(0.0);
        }

        for head in 0..HEAD_COUNT {
            let first = self.topo.head_start(head);
            let readout = first + self.topo.spec.head_depth;

            // Readout: linear, so the output-jet adjoint is the z adjoint.
            {
                let s = self.topo.shapes[readout];
                debug_assert_eq!(s.fan_out, 1);
                for (b, seed) in seeds.iter().enumerate() {
                    let sj = seed[head];
                    self.adj_b[b] = sj.v;
                    self.adj_b[CHUNK + b] = sj.dx;
                    self.adj_b[2 * CHUNK + b] = sj.dy;
                    self.adj_b[3 * CHUNK + b] = sj.dxx;
                    self.adj_b[4 * CHUNK + b] = sj.dyy;
                }
                let (wts, _) = self.topo.weights(params, readout);
                let base = self.topo.offsets[readout];
                {
                    let input = &self.ja[readout - 1];
                    let zbar = &self.adj_b;
                    for i in 0..s.fan_in {
                        let ibase = i * SLOTS * CHUNK;
                        grad[base + i] += jet_dot(zbar, 0, input, ibase, n);
                    }
                    grad[base + s.fan_in] += split_sum(&zbar[..n]);
                }
                let (adj_a, adj_b) = (&mut self.adj_a, &self.adj_b);
                for (i, &wv) in wts.iter().enumerate() {
                    let ibase = i * SLOTS * CHUNK;
                    for slot in 0..SLOTS {
                        let src = &adj_b[slot * CHUNK..slot * CHUNK + n];
                        let dst = &mut adj_a[ibase + slot * CHUNK..ibase + slot * CHUNK + n];
                        for (d, &z) in dst.iter_mut().zip(src) {
                            *d = wv * z;
                        }
                    }
                }
            }

            for l in (0..self.topo.spec.head_depth).rev() {
                let layer = first + l;
                let prev = if l == 0 { trunk_top } else { layer - 1 };
                self.backward_hidden(params, grad, layer, prev);
            }
            let (src, dst) = (&self.adj_a, &mut self.adj_trunk);
            for row in 0..w * SLOTS {
                let s = &src[row * CHUNK..row * CHUNK + n];
                let d = &mut dst[row * CHUNK..row * CHUNK + n];
                for (dv, &sv) in d.iter_mut().zip(s) {
                    *dv += sv;
                }
            }
        }

        for row in 0..w * SLOTS {
            let (src, dst) = (&self.adj_trunk, &mut self.adj_a);
            dst[row * CHUNK..row * CHUNK + n]
                .copy_from_slice(&src[row * CHUNK..row * CHUNK + n]);
        }
        for layer in (0..self.topo.spec.trunk_depth).rev() {
            self.backward_hidden(params, grad, layer, layer.wrapping_sub(1));
        }
    }

    /// Backward through one jet tanh layer plus its affine map. Adjoint
    /// algebra per lane, with t, s as in [`tanh_layer`](Self::tanh_layer)
    /// and z the cached pre-activation jet:
    ///
    /// zbar.dxx = abar.dxx s
    /// zbar.dx  = abar.dx s - 4 t s z.dx abar.dxx
    /// zbar.v   = abar.v s
    ///          - 2 t s (abar.dx z.dx + abar.dy z.dy + abar.dxx z.dxx + abar.dyy z.dyy)
    ///          - 2 s (s - 2 t^2) (abar.dxx z.dx^2 + abar.dyy z.dy^2)
    fn backward_hidden(&mut self, params: &[f64], grad: &mut [f64], layer: usize, prev: usize) {
        let shape = self.topo.shapes[layer];
        let n = self.n;
        {
            let z = &self.jz[layer];
            let a = &self.ja[layer];
            let (adj_a, adj_b) = (&self.adj_a, &mut self.adj_b);
            for j in 0..shape.fan_out {
                let base = j * SLOTS * CHUNK;
                for b in 0..n {
                    let zdx = z[base + CHUNK + b];
                    let zdy = z[base + 2 * CHUNK + b];
                    let zdxx = z[base + 3 * CHUNK + b];
                    let zdyy = z[base + 4 * CHUNK + b];
                    let av = adj_a[base + b];
                    let adx = adj_a[base + CHUNK + b];
                    let ady = adj_a[base + 2 * CHUNK + b];
                    let adxx = adj_a[base + 3 * CHUNK + b];
                    let adyy = adj_a[base + 4 * CHUNK + b];
                    let t = a[base + b];
                    let s = 1.0 - t * t;
                    let ts2 = 2.0 * t * s;
                    let curve = 2.0 * s * (s - 2.0 * t * t);
                    adj_b[base + b] = av * s
                        - ts2 * (adx * zdx + ady * zdy + adxx * zdxx + adyy * zdyy)
                        - curve * (adxx * zdx * zdx + adyy * zdy * zdy);
                    adj_b[base + CHUNK + b] = adx * s - 2.0 * ts2 * zdx * adxx;
                    adj_b[base + 2 * CHUNK + b] = ady * s - 2.0 * ts2 * zdy * adyy;
                    adj_b[base + 3 * CHUNK + b] = adxx * s;
                    adj_b[base + 4 * CHUNK + b] = adyy * s;
                }
            }
        }
        let base = self.topo.offsets[layer];
        let wn = shape.fan_in * shape.fan_out;
        let (wts, _) = self.topo.weights(params, layer);
        let input: &[f64] = if prev == usize::MAX {
            &self.xin
        } else {
            &self.ja[prev]
        };
        let (adj_a, adj_b) = (&mut self.adj_a, &self.adj_b);
        for row in 0..shape.fan_in * SLOTS {
            adj_a[row * CHUNK..row * CHUNK + n].fill(0.0);
        }
        for j in 0..shape.fan_out {
            let jbase = j * SLOTS * CHUNK;
            let row = &wts[j * shape.fan_in..(j + 1) * shape.fan_in];
            for (i, &wv) in row.iter().enumerate() {
                let ibase = i * SLOTS * CHUNK;
                for slot in 0..SLOTS {
                    let src = &adj_b[jbase + slot * CHUNK..jbase + slot * CHUNK + n];
                    let dst = &mut adj_a[ibase + slot * CHUNK..ibase + slot * CHUNK + n];
                    for (d, &z) in dst.iter_mut().zip(src) {
                        *d += wv * z;
                    }
                }
            }
            let grow = &mut grad[base + j * shape.fan_in..base + (j + 1) * shape.fan_in];
            for (i, g) in grow.iter_mut().enumerate() {
                let ibase = i * SLOTS * CHUNK;
                *g += jet_dot(adj_b, jbase, input, ibase, n);
            }
            grad[base + wn + j] += split_sum(&adj_b[jbase..jbase + n]);
        }
    }
}

/// Slot-major jet dot product: one [`split_dot`] per slot row, slot results
/// combined in a fixed order. `zbase`/`ibase` address the value rows of the
/// two jets.
#[inline]
fn jet_dot(zbar: &[f64], zbase: usize, input: &[f64], ibase: usize, n: usize) -> f64 {
    let mut dot = 0.0;
    for slot in 0..SLOTS {
        let zr = &zbar[zbase + slot * CHUNK..zbase + slot * CHUNK + n];
        let ir = &input[ibase + slot * CHUNK..ibase + slot * CHUNK + n];
        dot += split_dot(zr, ir);
    }
    dot
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::network::{
        forward, forward_taylor_taped, forward_values_taped, init_xavier, NetworkSpec, TapedParams,
    };

    fn specs() -> Vec<(NetworkSpec, Option<f64>)> {
        vec![
            (NetworkSpec::new(2, 1, 1, 3).unwrap(), None),
            (NetworkSpec::new(2, 2, 1, 8).unwrap(), None),
            (NetworkSpec::new(3, 2, 2, 6).unwrap(), Some(150.0)),
            (NetworkSpec::new(3, 3, 2, 5).unwrap(), Some(40.0)),
        ]
    }

    fn points() -> Vec<(f64, f64)> {
        vec![(0.3, 0.7), (0.02, 0.98), (0.51, 0.49), (1.0, 0.0)]
    }

    /// Per-point Reynolds numbers, deliberately distinct so the chunk rows
    /// exercise heterogeneous inputs.
    fn res_for(base: f64) -> Vec<f64> {
        points()
            .iter()
            .enumerate()
            .map(|(b, _)| base + 17.0 * b as f64)
            .collect()
    }

    #[test]
    fn batch_value_forward_matches_network_forward() {
        for (spec, re) in specs() {
            let p = init_xavier(&spec, 17);
            let mut k = BatchValue::new(&spec);
            let pts = points();
            let res = re.map(|base| res_for(base));
            k.forward(p.values(), &pts, res.as_deref());
            for (b, &(x, y)) in pts.iter().enumerate() {
                let re_b = res.as_ref().map(|r| r[b]);
                let want = forward(&spec, &p, x, y, re_b).unwrap();
                for (head, w) in want.iter().enumerate() {
                    let g = k.pred(head, b);
                    let rel = (g - w).abs() / w.abs().max(1e-12);
                    assert!(rel < 1e-13, "lane {b} head {head}: {g} vs {w}");
                }
            }
        }
    }

    #[test]
    fn batch_jet_forward_matches_taped_slots() {
        for (spec, re) in specs() {
            let p = init_xavier(&spec, 29);
            let mut k = BatchJet::new(&spec);
            let pts = points();
            let res = re.map(|base| res_for(base));
            k.forward(p.values(), &pts, res.as_deref());
            for (b, &(x, y)) in pts.iter().enumerate() {
                let re_b = res.as_ref().map(|r| r[b]);
                let mut tape = Tape::new();
                let taped = TapedParams::record(&mut tape, &spec, &p).unwrap();
                let tup = forward_taylor_taped(&spec, &taped, &mut tape, x, y, re_b).unwrap();
                for (head, t) in tup.iter().enumerate() {
                    let jet = k.jet(head, b);
                    let pairs = [
                        (jet.v, tape.value(t.val)),
                        (jet.dx, tape.value(t.dx)),
                        (jet.dy, tape.value(t.dy)),
                        (jet.dxx, tape.value(t.dxx)),
                        (jet.dyy, tape.value(t.dyy)),
                    ];
                    for (g, w) in pairs {
                        let rel = (g - w).abs() / w.abs().max(1e-9);
                        assert!(rel < 1e-12, "lane {b} head {head}: {g} vs {w}");
                    }
                }
            }
        }
    }

    #[test]
    fn batch_value_backward_matches_tape_adjoints() {
        // One distinct seed row per lane; the chunk gradient must equal the
        // sum of the per-point taped gradients.
        for (spec, re) in specs() {
            let p = init_xavier(&spec, 41);
            let mut k = BatchValue::new(&spec);
            let pts = points();
            let res = re.map(|base| res_for(base));
            let seeds: Vec<[f64; HEAD_COUNT]> = pts
                .iter()
                .enumerate()
                .map(|(b, _)| {
                    let f = 1.0 + 0.31 * b as f64;
                    [0.8 * f, -1.3 * f, 0.45 * f]
                })
                .collect();

            let mut want = vec![0.0; p.len()];
            for (b, &(x, y)) in pts.iter().enumerate() {
                let re_b = res.as_ref().map(|r| r[b]);
                let mut tape = Tape::new();
                let taped = TapedParams::record(&mut tape, &spec, &p).unwrap();
                let ids = forward_values_taped(&spec, &taped, &mut tape, x, y, re_b).unwrap();
                let mut total = None;
                for (id, s) in ids.iter().zip(seeds[b]) {
                    let term = tape.scale(*id, s);
                    total = Some(match total {
                        None => term,
                        Some(acc) => tape.add(acc, term),
                    });
                }
                let mut adj = Vec::new();
                tape.backward_into(total.unwrap(), &mut adj);
                for i in 0..p.len() {
                    want[i] += adj[taped.id(i).index()];
                }
            }

            let mut grad = vec![0.0; p.len()];
            k.forward(p.values(), &pts, res.as_deref());
            k.backward(p.values(), &seeds, &mut grad);
            for i in 0..p.len() {
                let rel = (grad[i] - want[i]).abs() / want[i].abs().max(1e-10);
                assert!(rel < 1e-11, "param {i}: {} vs {}", grad[i], want[i]);
            }
        }
    }

    #[test]
    fn batch_jet_backward_matches_tape_adjoints() {
        // Seed every slot of every head of every lane with a distinct
        // coefficient and compare the chunk gradient of the seeded sum
        // against the summed reverse sweeps of the taped route.
        for (spec, re) in specs() {
            let p = init_xavier(&spec, 53);
            let mut k = BatchJet::new(&spec);
            let pts = points();
            let res = re.map(|base| res_for(base));
            let mut c = 0.25;
            let seeds: Vec<[Jet; HEAD_COUNT]> = pts
                .iter()
                .map(|_| {
                    let mut row = [Jet::default(); HEAD_COUNT];
                    for jet in &mut row {
                        for slot in [
                            &mut jet.v,
                            &mut jet.dx,
                            &mut jet.dy,
                            &mut jet.dxx,
                            &mut jet.dyy,
                        ] {
                            *slot = c;
                            c = -c * 0.9 + 0.13;
                        }
                    }
                    row
                })
                .collect();

            let mut want = vec![0.0; p.len()];
            for (b, &(x, y)) in pts.iter().enumerate() {
                let re_b = res.as_ref().map(|r| r[b]);
                let mut tape = Tape::new();
                let taped = TapedParams::record(&mut tape, &spec, &p).unwrap();
                let tup = forward_taylor_taped(&spec, &taped, &mut tape, x, y, re_b).unwrap();
                let mut total = None;
                for (t, s) in tup.iter().zip(seeds[b]) {
                    for (id, coef) in [
                        (t.val, s.v),
                        (t.dx, s.dx),
                        (t.dy, s.dy),
                        (t.dxx, s.dxx),
                        (t.dyy, s.dyy),
                    ] {
                        let term = tape.scale(id, coef);
                        total = Some(match total {
                            None => term,
                            Some(acc) => tape.add(acc, term),
                        });
                    }
                }
                let mut adj = Vec::new();
                tape.backward_into(total.unwrap(), &mut adj);
                for i in 0..p.len() {
                    want[i] += adj[taped.id(i).index()];
                }
            }

            let mut grad = vec![0.0; p.len()];
            k.forward(p.values(), &pts, res.as_deref());
            k.backward(p.values(), &seeds, &mut grad);
            let scale: f64 = grad.iter().map(|g| g.abs()).fold(0.0, f64::max).max(1e-8);
            for i in 0..p.len() {
                let diff = (grad[i] - want[i]).abs();
                assert!(
                    diff <= 1e-11 * scale.max(want[i].abs()),
                    "param {i}: {} vs {}",
                    grad[i],
                    want[i]
                );
            }
        }
    }

    #[test]
    fn chunk_split_is_equivalent() {
        // Forwarding one chunk of four points must predict the same values
        // as two smaller chunks, and the accumulated gradients must agree
        // to summation rounding.
        let spec = NetworkSpec::new(3, 2, 1, 7).unwrap();
        let p = init_xavier(&spec, 71);
        let pts = points();
        let res = res_for(90.0);
        let seeds: Vec<[f64; HEAD_COUNT]> = (0..pts.len())
            .map(|b| [1.0 + b as f64, 0.5 - b as f64, -0.25 * b as f64])
            .collect();

        let mut whole = BatchValue::new(&spec);
        let mut grad_whole = vec![0.0; p.len()];
        whole.forward(p.values(), &pts, Some(&res));
        let preds: Vec<f64> = (0..pts.len()).map(|b| whole.pred(0, b)).collect();
        whole.backward(p.values(), &seeds, &mut grad_whole);

        let mut split = BatchValue::new(&spec);
        let mut grad_split = vec![0.0; p.len()];
        for range in [0..3, 3..4] {
            split.forward(p.values(), &pts[range.clone()], Some(&res[range.clone()]));
            for (b, idx) in range.clone().enumerate() {
                assert_eq!(split.pred(0, b).to_bits(), preds[idx].to_bits());
            }
            split.backward(p.values(), &seeds[range.clone()], &mut grad_split);
        }
        for (a, b) in grad_whole.iter().zip(&grad_split) {
            let rel = (a - b).abs() / a.abs().max(1e-12);
            assert!(rel < 1e-13, "{a} vs {b}");
        }
    }

    #[test]
    fn kernel_reuse_is_deterministic() {
        let spec = NetworkSpec::new(3, 2, 2, 7).unwrap();
        let p = init_xavier(&spec, 99);
        let pts = points();
        let res = res_for(110.0);
        let seeds: Vec<[f64; HEAD_COUNT]> =
            (0..pts.len()).map(|_| [1.0, 0.5, -0.25]).collect();
        let jseeds: Vec<[Jet; HEAD_COUNT]> = (0..pts.len())
            .map(|b| {
                let f = 1.0 + b as f64;
                [
                    Jet {
                        v: f,
                        dx: -0.5 * f,
                        dy: 0.25,
                        dxx: 0.1,
                        dyy: -0.2,
                    },
                    Jet::default(),
                    Jet {
                        v: 0.3 * f,
                        ..Jet::default()
                    },
                ]
            })
            .collect();
        let run = |vk: &mut BatchValue, jk: &mut BatchJet| {
            let mut grad = vec![0.0; p.len()];
            vk.forward(p.values(), &pts, Some(&res));
            let out: Vec<f64> = (0..pts.len()).map(|b| vk.pred(2, b)).collect();
            vk.backward(p.values(), &seeds, &mut grad);
            jk.forward(p.values(), &pts[..3], Some(&res[..3]));
            let jets: Vec<Jet> = (0..3).map(|b| jk.jet(1, b)).collect();
            jk.backward(p.values(), &jseeds[..3], &mut grad);
            (out, jets, grad)
        };
        let (mut vk, mut jk) = (BatchValue::new(&spec), BatchJet::new(&spec));
        let (o1, j1, g1) = run(&mut vk, &mut jk);
        let (o2, j2, g2) = run(&mut vk, &mut jk);
        assert_eq!(o1, o2);
        assert_eq!(j1, j2);
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // A fresh workspace reproduces the same bits as a reused one.
        let (mut fvk, mut fjk) = (BatchValue::new(&spec), BatchJet::new(&spec));
        let (o3, j3, g3) = run(&mut fvk, &mut fjk);
        assert_eq!(o1, o3);
        assert_eq!(j1, j3);
        for (a, b) in g1.iter().zip(&g3) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // Growing the chunk again after a shorter one must not read stale
        // lanes: run a two-point forward, then the full sequence once more.
        vk.forward(p.values(), &pts[..2], Some(&res[..2]));
        jk.forward(p.values(), &pts[..2], Some(&res[..2]));
        let (o4, j4, g4) = run(&mut vk, &mut jk);
        assert_eq!(o1, o4);
        assert_eq!(j1, j4);
        for (a, b) in g1.iter().zip(&g4) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

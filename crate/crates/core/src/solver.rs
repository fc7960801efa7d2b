//! Finite-difference reference solver for the steady lid-driven cavity.
//!
//! Works in streamfunction-vorticity form on a uniform n x n node grid:
//! Gauss-Seidel/SOR sweeps relax the streamfunction Poisson equation and the
//! steady vorticity transport equation (central differences) in a fixed
//! order, with wall vorticity closed by Thom's formula. Velocities come from
//! central differences of the streamfunction, which makes the discrete
//! divergence at interior nodes cancel to rounding. Pressure is recovered
//! afterwards from a Neumann Poisson problem driven by the velocity field and
//! gauged to zero mean.
//!
//! Solves are seeded by a coarse-to-fine cascade (each level interpolates the
//! previous one), which cuts iteration counts several-fold without touching
//! determinism: every sweep runs in the same order, so identical configs give
//! bitwise-identical fields.

use crate::physics::LidProfile;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
    #[error(
        "no steady state within {iters} iterations (last residual {last:.3e}); \
         residual history available"
    )]
    NonConvergence {
        iters: usize,
        last: f64,
        history: Vec<f64>,
    },
    #[error("cannot sample {m} nodes per side from a {n}-node solution")]
    Resolution { m: usize, n: usize },
}

/// Solve parameters. `tol` bounds the scaled maximum nodal update
/// max(|d psi|, h^2 |d omega|) at which the sweep loop stops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub n: usize,
    pub re: f64,
    pub lid: LidProfile,
    pub tol: f64,
    pub max_iters: usize,
}

impl SolverConfig {
    pub fn new(n: usize, re: f64, lid: LidProfile) -> Result<Self, SolverError> {
        let cfg = SolverConfig {
            n,
            re,
            lid,
            tol: 1e-9,
            max_iters: 200_000,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if self.n < 17 {
            return Err(SolverError::InvalidConfig(format!(
                "grid must have at least 17 nodes per side, got {}",
                self.n
            )));
        }
        if !(self.re.is_finite() && self.re > 0.0 && self.re <= 1000.0) {
            return Err(SolverError::InvalidConfig(format!(
                "Reynolds number must lie in (0, 1000], got {}",
                self.re
            )));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(SolverError::InvalidConfig(format!(
                "tolerance must be positive, got {}",
                self.tol
            )));
        }
        if self.max_iters == 0 {
            return Err(SolverError::InvalidConfig("max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Converged velocity and pressure on the n x n node grid, stored row-major
/// with x varying fastest: index (i, j) maps to `j * n + i`, node coordinates
/// are (i / (n-1), j / (n-1)).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub n: usize,
    pub re: f64,
    pub lid: LidProfile,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub p: Vec<f64>,
}

impl FlowField {
    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.n + i
    }

    pub fn u_at(&self, i: usize, j: usize) -> f64 {
        self.u[self.idx(i, j)]
    }

    pub fn v_at(&self, i: usize, j: usize) -> f64 {
        self.v[self.idx(i, j)]
    }

    pub fn p_at(&self, i: usize, j: usize) -> f64 {
        self.p[self.idx(i, j)]
    }

    pub fn coord(&self, k: usize) -> f64 {
        k as f64 / (self.n - 1) as f64
    }

    /// Maximum |u_x + v_y| over interior nodes, central differences.
    pub fn max_interior_divergence(&self) -> f64 {
        let n = self.n;
        let h = 1.0 / (n - 1) as f64;
        let mut worst = 0.0f64;
        for j in 1..n - 1 {
            for i in 1..n - 1 {
                let div = (self.u_at(i + 1, j) - self.u_at(i - 1, j)
                    + self.v_at(i, j + 1)
                    - self.v_at(i, j - 1))
                    / (2.0 * h);
                worst = worst.max(div.abs());
            }
        }
        worst
    }
}

struct Grid {
    n: usize,
    h: f64,
    psi: Vec<f64>,
    omega: Vec<f64>,
}

impl Grid {
    fn zeros(n: usize) -> Self {
        Grid {
            n,
            h: 1.0 / (n - 1) as f64,
            psi: vec![0.0; n * n],
            omega: vec![0.0; n * n],
        }
    }

    #[inline]
    fn id(&self, i: usize, j: usize) -> usize {
        j * self.n + i
    }
}

/// Thom's first-order wall closure: omega_wall = 2 (psi_wall - psi_adjacent)
/// / h^2, plus -2 U / h on the moving lid. psi is zero on the whole boundary.
fn update_wall_vorticity(g: &mut Grid, lid: LidProfile) {
    let n = g.n;
    let h = g.h;
    let c = 2.0 / (h * h);
    for i in 0..n {
        let x = i as f64 / (n - 1) as f64;
        // bottom j = 0
        g.omega[i] = -c * g.psi[n + i];
        // top j = n-1, moving lid
        let u_top = if i == 0 || i == n - 1 { 0.0 } else { lid.u_lid(x) };
        g.omega[(n - 1) * n + i] = -c * g.psi[(n - 2) * n + i] - 2.0 * u_top / h;
    }
    for j in 1..n - 1 {
        g.omega[j * n] = -c * g.psi[j * n + 1];
        g.omega[j * n + n - 1] = -c * g.psi[j * n + n - 2];
    }
}

/// One SOR sweep of the streamfunction Poisson equation
/// Lap psi = -omega; returns the largest nodal update.
fn psi_sweep(g: &mut Grid, sor: f64) -> f64 {
    let n = g.n;
    let h2 = g.h * g.h;
    let mut max_d = 0.0f64;
    for j in 1..n - 1 {
        for i in 1..n - 1 {
            let id = j * n + i;
            let gs = 0.25
                * (g.psi[id - 1] + g.psi[id + 1] + g.psi[id - n] + g.psi[id + n]
                    + h2 * g.omega[id]);
            let new = g.psi[id] + sor * (gs - g.psi[id]);
            max_d = max_d.max((new - g.psi[id]).abs());
            g.psi[id] = new;
        }
    }
    max_d
}

/// One under-relaxed Gauss-Seidel sweep of steady vorticity transport
/// u w_x + v w_y = nu Lap w with central differences; returns the largest
/// nodal update. Velocities come from the current streamfunction.
fn omega_sweep(g: &mut Grid, nu: f64, relax: f64) -> f64 {
    let n = g.n;
    let h = g.h;
    let inv2h = 1.0 / (2.0 * h);
    let adv = h / (8.0 * nu);
    let mut max_d = 0.0f64;
    for j in 1..n - 1 {
        for i in 1..n - 1 {
            let id = j * n + i;
            let u = (g.psi[id + n] - g.psi[id - n]) * inv2h;
            let v = -(g.psi[id + 1] - g.psi[id - 1]) * inv2h;
            let we = g.omega[id + 1];
            let ww = g.omega[id - 1];
            let wn = g.omega[id + n];
            let ws = g.omega[id - n];
            let gs = 0.25 * (we + ww + wn + ws) - adv * (u * (we - ww) + v * (wn - ws));
            let new = g.omega[id] + relax * (gs - g.omega[id]);
            max_d = max_d.max((new - g.omega[id]).abs());
            g.omega[id] = new;
        }
    }
    max_d
}

/// Bilinear interpolation of a coarse level onto a finer grid, used only to
/// seed the next cascade level.
fn prolong(coarse: &Grid, fine_n: usize) -> Grid {
    let mut fine = Grid::zeros(fine_n);
    let cn = coarse.n;
    let scale = (cn - 1) as f64 / (fine_n - 1) as f64;
    for j in 0..fine_n {
        for i in 0..fine_n {
            let xi = i as f64 * scale;
            let yj = j as f64 * scale;
            let i0 = (xi.floor() as usize).min(cn - 2);
            let j0 = (yj.floor() as usize).min(cn - 2);
            let fx = xi - i0 as f64;
            let fy = yj - j0 as f64;
            let lerp = |f: &Vec<f64>| {
                let a = f[coarse.id(i0, j0)] * (1.0 - fx) + f[coarse.id(i0 + 1, j0)] * fx;
                let b = f[coarse.id(i0, j0 + 1)] * (1.0 - fx) + f[coarse.id(i0 + 1, j0 + 1)] * fx;
                a * (1.0 - fy) + b * fy
            };
            let id = j * fine_n + i;
            fine.psi[id] = lerp(&coarse.psi);
            fine.omega[id] = lerp(&coarse.omega);
        }
    }
    // The streamfunction boundary is exact; wall vorticity is refreshed by
    // the caller before sweeping.
    for k in 0..fine_n {
        fine.psi[k] = 0.0;
        fine.psi[(fine_n - 1) * fine_n + k] = 0.0;
        fine.psi[k * fine_n] = 0.0;
        fine.psi[k * fine_n + fine_n - 1] = 0.0;
    }
    fine
}

/// Relaxation factor for the vorticity sweep, backed off as the cell Peclet
/// number h/nu grows so central differencing stays stable under Gauss-Seidel.
fn omega_relax(h: f64, nu: f64) -> f64 {
    let peclet = h / nu;
    (2.0 / (2.0 + peclet)).clamp(0.15, 0.9)
}

fn relax_level(
    g: &mut Grid,
    lid: LidProfile,
    nu: f64,
    tol: f64,
    max_iters: usize,
) -> (bool, Vec<f64>) {
    let h = g.h;
    let sor = 2.0 / (1.0 + (std::f64::consts::PI * h).sin());
    let relax = omega_relax(h, nu);
    let mut history = Vec::new();
    update_wall_vorticity(g, lid);
    for _ in 0..max_iters {
        let dpsi = psi_sweep(g, sor);
        update_wall_vorticity(g, lid);
        let domega = omega_sweep(g, nu, relax);
        let residual = dpsi.max(h * h * domega);
        history.push(residual);
        if !residual.is_finite() {
            return (false, history);
        }
        if residual < tol {
            return (true, history);
        }
    }
    (false, history)
}

/// Second-order first derivative along one direction, one-sided at the ends.
fn derivative_1d(get: impl Fn(usize) -> f64, k: usize, len: usize, h: f64) -> f64 {
    if k == 0 {
        (-3.0 * get(0) + 4.0 * get(1) - get(2)) / (2.0 * h)
    } else if k == len - 1 {
        (3.0 * get(len - 1) - 4.0 * get(len - 2) + get(len - 3)) / (2.0 * h)
    } else {
        (get(k + 1) - get(k - 1)) / (2.0 * h)
    }
}

/// Pressure from the converged velocity field: SOR on Lap p = rhs with
/// momentum-consistent Neumann walls, then an exact zero-mean shift.
fn recover_pressure(field: &mut FlowField, nu: f64) {
    let n = field.n;
    let h = 1.0 / (n - 1) as f64;
    let h2 = h * h;

    // Velocity gradients everywhere (one-sided second order on walls).
    let mut ux = vec![0.0; n * n];
    let mut uy = vec![0.0; n * n];
    let mut vx = vec![0.0; n * n];
    let mut vy = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            let id = j * n + i;
            ux[id] = derivative_1d(|k| field.u[j * n + k], i, n, h);
            vx[id] = derivative_1d(|k| field.v[j * n + k], i, n, h);
            uy[id] = derivative_1d(|k| field.u[k * n + i], j, n, h);
            vy[id] = derivative_1d(|k| field.v[k * n + i], j, n, h);
        }
    }

    // rhs = -rho ((u_x)^2 + 2 u_y v_x + (v_y)^2), rho = 1.
    let rhs: Vec<f64> = (0..n * n)
        .map(|id| -(ux[id] * ux[id] + 2.0 * uy[id] * vx[id] + vy[id] * vy[id]))
        .collect();

    // Neumann data from the wall-parallel momentum balance: on a wall the
    // convective terms vanish, leaving dp/dn = mu * (second normal
    // derivative of the normal-adjacent tangential... for this geometry
    // dp/dx = mu u_xx on vertical walls and dp/dy = mu v_yy on horizontal
    // walls, with one-sided second differences (rho = 1 so mu = nu).
    let second = |a: f64, b: f64, c: f64, d: f64| (2.0 * a - 5.0 * b + 4.0 * c - d) / h2;
    let mut g_left = vec![0.0; n];
    let mut g_right = vec![0.0; n];
    let mut g_bottom = vec![0.0; n];
    let mut g_top = vec![0.0; n];
    for j in 0..n {
        g_left[j] = nu
            * second(
                field.u[j * n],
                field.u[j * n + 1],
                field.u[j * n + 2],
                field.u[j * n + 3],
            );
        g_right[j] = nu
            * second(
                field.u[j * n + n - 1],
                field.u[j * n + n - 2],
                field.u[j * n + n - 3],
                field.u[j * n + n - 4],
            );
    }
    for i in 0..n {
        g_bottom[i] = nu * second(field.v[i], field.v[n + i], field.v[2 * n + i], field.v[3 * n + i]);
        g_top[i] = nu
            * second(
                field.v[(n - 1) * n + i],
                field.v[(n - 2) * n + i],
                field.v[(n - 3) * n + i],
                field.v[(n - 4) * n + i],
            );
    }

    // Row right-hand sides b with reflected-ghost Neumann closure. The
    // left null vector of the resulting singular system weights interior
    // rows 1, edge rows 1/2, corner rows 1/4; projecting b against it makes
    // the system consistent before sweeping.
    let weight = |i: usize, j: usize| -> f64 {
        let ei = (i == 0 || i == n - 1) as u32;
        let ej = (j == 0 || j == n - 1) as u32;
        match ei + ej {
            0 => 1.0,
            1 => 0.5,
            _ => 0.25,
        }
    };
    let mut b = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            let id = j * n + i;
            let mut v = h2 * rhs[id];
            if i == 0 {
                v += 2.0 * h * g_left[j];
            }
            if i == n - 1 {
                v -= 2.0 * h * g_right[j];
            }
            if j == 0 {
                v += 2.0 * h * g_bottom[i];
            }
            if j == n - 1 {
                v -= 2.0 * h * g_top[i];
            }
            b[id] = v;
        }
    }
    let mut wb = 0.0;
    let mut ww = 0.0;
    for j in 0..n {
        for i in 0..n {
            let w = weight(i, j);
            wb += w * b[j * n + i];
            ww += w * w;
        }
    }
    let c = wb / ww;
    for j in 0..n {
        for i in 0..n {
            b[j * n + i] -= c * weight(i, j);
        }
    }

    // SOR sweeps; every node including boundary nodes is an unknown.
    let sor = 2.0 / (1.0 + (std::f64::consts::PI * h).sin());
    let p = &mut field.p;
    for _ in 0..50_000 {
        let mut max_d = 0.0f64;
        for j in 0..n {
            for i in 0..n {
                let id = j * n + i;
                let east = if i == n - 1 { p[id - 1] } else { p[id + 1] };
                let west = if i == 0 { p[id + 1] } else { p[id - 1] };
                let north = if j == n - 1 { p[id - n] } else { p[id + n] };
                let south = if j == 0 { p[id + n] } else { p[id - n] };
                let gs = 0.25 * (east + west + north + south - b[id]);
                let new = p[id] + sor * (gs - p[id]);
                max_d = max_d.max((new - p[id]).abs());
                p[id] = new;
            }
        }
        if max_d < 1e-11 {
            break;
        }
    }

    // Exact gauge: two passes pin the mean to rounding level.
    for _ in 0..2 {
        let mean = p.iter().sum::<f64>() / (n * n) as f64;
        p.iter_mut().for_each(|v| *v -= mean);
    }
}

/// Convergence record of the finest cascade level.
#[derive(Debug, Clone)]
pub struct SolveStats {
    /// Sweeps spent on the finest grid.
    pub iters: usize,
    /// Residual after the last sweep.
    pub final_residual: f64,
    /// Per-sweep residuals on the finest grid.
    pub history: Vec<f64>,
}

/// Runs the cascade and extracts (u, v, p). The returned field imposes the
/// boundary velocities exactly.
pub fn solve_cavity(config: &SolverConfig) -> Result<FlowField, SolverError> {
    solve_cavity_with_stats(config).map(|(field, _)| field)
}

/// Like [`solve_cavity`], additionally reporting how the finest level
/// converged.
pub fn solve_cavity_with_stats(
    config: &SolverConfig,
) -> Result<(FlowField, SolveStats), SolverError> {
    config.validate()?;
    let n = config.n;
    let nu = 1.0 / config.re;

    // Cascade sizes: halve until below 17 nodes.
    let mut sizes = vec![n];
    let mut k = n;
    while (k + 1) / 2 >= 17 {
        k = (k + 1) / 2;
        sizes.push(k);
    }
    sizes.reverse();

    let mut grid = Grid::zeros(sizes[0]);
    let mut converged = true;
    let mut history = Vec::new();
    for (li, &size) in sizes.iter().enumerate() {
        if size != grid.n {
            grid = prolong(&grid, size);
        }
        // Coarse levels only seed the next one; whatever state they reach is
        // an acceptable initial guess, so only the finest level gates success.
        let (ok, h) = relax_level(&mut grid, config.lid, nu, config.tol, config.max_iters);
        history = h;
        if li + 1 == sizes.len() {
            converged = ok;
        }
    }
    if !converged {
        let last = history.last().copied().unwrap_or(f64::NAN);
        return Err(SolverError::NonConvergence {
            iters: history.len(),
            last,
            history,
        });
    }

    // Velocities: central differences of psi inside, exact values on walls.
    let h = grid.h;
    let inv2h = 1.0 / (2.0 * h);
    let mut field = FlowField {
        n,
        re: config.re,
        lid: config.lid,
        u: vec![0.0; n * n],
        v: vec![0.0; n * n],
        p: vec![0.0; n * n],
    };
    for j in 1..n - 1 {
        for i in 1..n - 1 {
            let id = j * n + i;
            field.u[id] = (grid.psi[id + n] - grid.psi[id - n]) * inv2h;
            field.v[id] = -(grid.psi[id + 1] - grid.psi[id - 1]) * inv2h;
        }
    }
    for i in 1..n - 1 {
        let x = i as f64 / (n - 1) as f64;
        field.u[(n - 1) * n + i] = config.lid.u_lid(x);
    }

    recover_pressure(&mut field, nu);
    let stats = SolveStats {
        iters: history.len(),
        final_residual: history.last().copied().unwrap_or(f64::NAN),
        history,
    };
    Ok((field, stats))
}

/// Cubic Lagrange resampling onto an m x m node grid, m <= n. Target nodes
/// that coincide with source nodes (checked in exact integer arithmetic)
/// copy the source value bitwise; in particular m = n is the identity.
/// Boundary velocities are re-imposed exactly afterwards.
pub fn sample_to_grid(field: &FlowField, m: usize) -> Result<FlowField, SolverError> {
    let n = field.n;
    if m < 2 || m > n {
        return Err(SolverError::Resolution { m, n });
    }
    if m == n {
        return Ok(field.clone());
    }

    // Per-target-index interpolation plan along one axis.
    enum Plan {
        Exact(usize),
        Cubic { base: usize, w: [f64; 4] },
    }
    let plan: Vec<Plan> = (0..m)
        .map(|a| {
            let num = a * (n - 1);
            let den = m - 1;
            if num % den == 0 {
                Plan::Exact(num / den)
            } else {
                let t = num as f64 / den as f64;
                let base = ((t.floor() as usize).saturating_sub(1)).min(n - 4);
                let mut w = [0.0; 4];
                for (k, wk) in w.iter_mut().enumerate() {
                    let xk = (base + k) as f64;
                    let mut acc = 1.0;
                    for l in 0..4 {
                        if l != k {
                            let xl = (base + l) as f64;
                            acc *= (t - xl) / (xk - xl);
                        }
                    }
                    *wk = acc;
                }
                Plan::Cubic { base, w }
            }
        })
        .collect();

    let resample = |src: &[f64]| -> Vec<f64> {
        // Pass 1: interpolate along x for every source row.
        let mut rows = vec![0.0; m * n];
        for j in 0..n {
            for (a, pl) in plan.iter().enumerate() {
                rows[j * m + a] = match pl {
                    Plan::Exact(i) => src[j * n + i],
                    Plan::Cubic { base, w } => (0..4)
                        .map(|k| w[k] * src[j * n + base + k])
                        .sum(),
                };
            }
        }
        // Pass 2: interpolate along y.
        let mut out = vec![0.0; m * m];
        for (bj, pl) in plan.iter().enumerate() {
            for a in 0..m {
                out[bj * m + a] = match pl {
                    Plan::Exact(j) => rows[j * m + a],
                    Plan::Cubic { base, w } => (0..4)
                        .map(|k| w[k] * rows[(base + k) * m + a])
                        .sum(),
                };
            }
        }
        out
    };

    let mut out = FlowField {
        n: m,
        re: field.re,
        lid: field.lid,
        u: resample(&field.u),
        v: resample(&field.v),
        p: resample(&field.p),
    };

    // Exact boundary velocities on the coarse grid.
    for k in 0..m {
        let x = k as f64 / (m - 1) as f64;
        let top = (m - 1) * m + k;
        out.u[top] = if k == 0 || k == m - 1 {
            0.0
        } else {
            field.lid.u_lid(x)
        };
        out.v[top] = 0.0;
        out.u[k] = 0.0;
        out.v[k] = 0.0;
        let left = k * m;
        let right = k * m + m - 1;
        out.u[left] = 0.0;
        out.v[left] = 0.0;
        out.u[right] = 0.0;
        out.v[right] = 0.0;
    }
    Ok(out)
}

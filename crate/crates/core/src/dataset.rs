//! Training and test data assembly: sampling solver fields onto uniform
//! grids, random sub-sampling, bounded-uniform noise injection, collocation
//! point sets for the physics terms, and a bit-exact CSV round trip.
//!
//! Every operation is a pure function of its inputs plus an explicit seed,
//! and the seeds/settings travel with the data as [`Provenance`], so any
//! dataset can be rebuilt exactly from the source fields.

use crate::physics::{classify_boundary, BoundarySide, LidProfile, PhysicsError};
use crate::solver::{sample_to_grid, FlowField, SolverError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error("sub-sample fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("noise amplitude must be finite and >= 0, got {0}")]
    InvalidAmplitude(f64),
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("collocation grids need at least 2 nodes per side, got {0}")]
    InvalidCollocationSize(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
}

/// One labelled flow observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub x: f64,
    pub y: f64,
    pub re: f64,
    pub u: f64,
    pub v: f64,
    pub p: f64,
}

impl FieldSample {
    pub fn new(x: f64, y: f64, re: f64, u: f64, v: f64, p: f64) -> Result<Self, DatasetError> {
        let s = FieldSample { x, y, re, u, v, p };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<(), DatasetError> {
        if !(0.0..=1.0).contains(&self.x) || !(0.0..=1.0).contains(&self.y) {
            return Err(DatasetError::InvalidSample(format!(
                "coordinates ({}, {}) outside the unit square",
                self.x, self.y
            )));
        }
        for (name, v) in [
            ("re", self.re),
            ("u", self.u),
            ("v", self.v),
            ("p", self.p),
        ] {
            if !v.is_finite() {
                return Err(DatasetError::InvalidSample(format!("non-finite {name}: {v}")));
            }
        }
        Ok(())
    }
}

/// Everything needed to rebuild a dataset from the source fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub source_grid: usize,
    pub sample_grid: usize,
    pub re_list: Vec<f64>,
    pub lid: LidProfile,
    pub subsample_fraction: Option<f64>,
    pub subsample_seed: Option<u64>,
    pub noise_amplitude: Option<f64>,
    pub noise_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<FieldSample>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct Reynolds numbers in order of first appearance.
    pub fn re_values(&self) -> Vec<f64> {
        let mut seen: Vec<u64> = Vec::new();
        let mut out = Vec::new();
        for s in &self.samples {
            let key = s.re.to_bits();
            if !seen.contains(&key) {
                seen.push(key);
                out.push(s.re);
            }
        }
        out
    }

    pub fn samples_for_re(&self, re: f64) -> impl Iterator<Item = &FieldSample> {
        let key = re.to_bits();
        self.samples.iter().filter(move |s| s.re.to_bits() == key)
    }
}

/// Evaluation sites for the physics terms: interior residual points and
/// boundary points with their velocity targets.
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationSet {
    /// (x, y, re), strictly inside the unit square.
    pub interior: Vec<(f64, f64, f64)>,
    /// (x, y, re, u_target, v_target) on the boundary.
    pub boundary: Vec<(f64, f64, f64, f64, f64)>,
}

/// All m x m node values of each field, tagged with its Reynolds number.
/// Fields are visited in list order; within a field, rows bottom-to-top and
/// x fastest, matching the solver's grid layout.
pub fn make_training_set(
    fields: &[(f64, FlowField)],
    m: usize,
) -> Result<Dataset, DatasetError> {
    let mut samples = Vec::with_capacity(fields.len() * m * m);
    let mut re_list = Vec::with_capacity(fields.len());
    let mut source_grid = 0;
    let mut lid = LidProfile::Regularized;
    for (re, field) in fields {
        re_list.push(*re);
        source_grid = source_grid.max(field.n);
        lid = field.lid;
        let g = sample_to_grid(field, m)?;
        for j in 0..m {
            for i in 0..m {
                samples.push(FieldSample::new(
                    g.coord(i),
                    g.coord(j),
                    *re,
                    g.u_at(i, j),
                    g.v_at(i, j),
                    g.p_at(i, j),
                )?);
            }
        }
    }
    Ok(Dataset {
        samples,
        provenance: Provenance {
            source_grid,
            sample_grid: m,
            re_list,
            lid,
            subsample_fraction: None,
            subsample_seed: None,
            noise_amplitude: None,
            noise_seed: None,
        },
    })
}

/// Uniform selection without replacement of ceil(fraction * n) samples per
/// Reynolds group, preserving the stored order of the retained samples.
/// Groups are processed in order of first appearance with one shared RNG, so
/// the result is a pure function of (dataset, fraction, seed).
pub fn subsample(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset, DatasetError> {
    if !(fraction.is_finite() && fraction > 0.0 && fraction <= 1.0) {
        return Err(DatasetError::InvalidFraction(fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<usize> = Vec::new();
    for re in ds.re_values() {
        let key = re.to_bits();
        let group: Vec<usize> = ds
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.re.to_bits() == key)
            .map(|(i, _)| i)
            .collect();
        let k = (fraction * group.len() as f64).ceil() as usize;
        let k = k.min(group.len());
        // Partial Fisher-Yates: the first k slots end up holding a uniform
        // without-replacement draw.
        let mut pool = group;
        for slot in 0..k {
            let pick = rng.gen_range(slot..pool.len());
            pool.swap(slot, pick);
        }
        let mut chosen = pool[..k].to_vec();
        chosen.sort_unstable();
        keep.extend(chosen);
    }
    let samples = keep.iter().map(|&i| ds.samples[i]).collect();
    let mut provenance = ds.provenance.clone();
    provenance.subsample_fraction = Some(fraction);
    provenance.subsample_seed = Some(seed);
    Ok(Dataset { samples, provenance })
}

/// Adds an independent uniform draw from [-amplitude, amplitude] to each of
/// u, v, p per sample; coordinates and Reynolds numbers are untouched.
/// Draw order is sample-major then channel (u, v, p), so the perturbation of
/// a sample depends only on its position in the dataset and the seed.
pub fn add_noise(ds: &Dataset, amplitude: f64, seed: u64) -> Result<Dataset, DatasetError> {
    if !(amplitude.is_finite() && amplitude >= 0.0) {
        return Err(DatasetError::InvalidAmplitude(amplitude));
    }
    let mut provenance = ds.provenance.clone();
    provenance.noise_amplitude = Some(amplitude);
    provenance.noise_seed = Some(seed);
    if amplitude == 0.0 {
        return Ok(Dataset {
            samples: ds.samples.clone(),
            provenance,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = ds
        .samples
        .iter()
        .map(|s| {
            let mut out = *s;
            out.u += rng.gen_range(-amplitude..=amplitude);
            out.v += rng.gen_range(-amplitude..=amplitude);
            out.p += rng.gen_range(-amplitude..=amplitude);
            out
        })
        .collect();
    Ok(Dataset { samples, provenance })
}

/// Interior nodes of a uniform interior_m x interior_m grid plus boundary_m
/// uniformly spaced points per edge (edge order bottom, right, top, left;
/// endpoints included, so corners appear in both adjacent edges), replicated
/// for every Reynolds number. Corner targets are wall values.
pub fn make_collocation_set(
    re_list: &[f64],
    interior_m: usize,
    boundary_m: usize,
    lid: LidProfile,
) -> Result<CollocationSet, DatasetError> {
    if interior_m < 2 {
        return Err(DatasetError::InvalidCollocationSize(interior_m));
    }
    if boundary_m < 2 {
        return Err(DatasetError::InvalidCollocationSize(boundary_m));
    }
    let mut interior = Vec::new();
    let mut boundary = Vec::new();
    for &re in re_list {
        let hm = (interior_m - 1) as f64;
        for j in 1..interior_m - 1 {
            for i in 1..interior_m - 1 {
                interior.push((i as f64 / hm, j as f64 / hm, re));
            }
        }
        let hb = (boundary_m - 1) as f64;
        let push_edge = |pts: &mut Vec<(f64, f64, f64, f64, f64)>,
                             point: &dyn Fn(f64) -> (f64, f64)|
         -> Result<(), DatasetError> {
            for k in 0..boundary_m {
                let t = k as f64 / hb;
                let (x, y) = point(t);
                let (u_t, v_t) = boundary_target(x, y, lid)?;
                pts.push((x, y, re, u_t, v_t));
            }
            Ok(())
        };
        push_edge(&mut boundary, &|t| (t, 0.0))?; // bottom
        push_edge(&mut boundary, &|t| (1.0, t))?; // right
        push_edge(&mut boundary, &|t| (t, 1.0))?; // top
        push_edge(&mut boundary, &|t| (0.0, t))?; // left
    }
    Ok(CollocationSet { interior, boundary })
}

fn boundary_target(x: f64, y: f64, lid: LidProfile) -> Result<(f64, f64), DatasetError> {
    match classify_boundary(x, y) {
        Some(BoundarySide::Lid) => Ok((lid.u_lid(x), 0.0)),
        Some(BoundarySide::Wall) => Ok((0.0, 0.0)),
        None => Err(DatasetError::InvalidSample(format!(
            "({x}, {y}) is not on the domain boundary"
        ))),
    }
}

const CSV_HEADER: &str = "x,y,re,u,v,p";

fn format_f64(v: f64) -> String {
    // 17 significant digits: enough to reproduce any f64 exactly.
    format!("{v:.16e}")
}

fn provenance_lines(p: &Provenance) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# source_grid={}", p.source_grid);
    let _ = writeln!(out, "# sample_grid={}", p.sample_grid);
    let re_list = p
        .re_list
        .iter()
        .map(|r| format_f64(*r))
        .collect::<Vec<_>>()
        .join(";");
    let _ = writeln!(out, "# re_list={re_list}");
    let _ = writeln!(out, "# lid={}", p.lid.name());
    let opt_f = |v: Option<f64>| v.map(format_f64).unwrap_or_else(|| "none".into());
    let opt_u = |v: Option<u64>| v.map(|s| s.to_string()).unwrap_or_else(|| "none".into());
    let _ = writeln!(out, "# subsample_fraction={}", opt_f(p.subsample_fraction));
    let _ = writeln!(out, "# subsample_seed={}", opt_u(p.subsample_seed));
    let _ = writeln!(out, "# noise_amplitude={}", opt_f(p.noise_amplitude));
    let _ = writeln!(out, "# noise_seed={}", opt_u(p.noise_seed));
    out
}

pub fn write_csv(ds: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let mut out = provenance_lines(&ds.provenance);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for s in &ds.samples {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            format_f64(s.x),
            format_f64(s.y),
            format_f64(s.re),
            format_f64(s.u),
            format_f64(s.v),
            format_f64(s.p)
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Dataset, DatasetError> {
    let text = std::fs::read_to_string(path)?;
    let path_str = path.display().to_string();
    let err = |line: usize, msg: String| DatasetError::Parse {
        path: path_str.clone(),
        line,
        msg,
    };

    let mut provenance = Provenance {
        source_grid: 0,
        sample_grid: 0,
        re_list: Vec::new(),
        lid: LidProfile::Regularized,
        subsample_fraction: None,
        subsample_seed: None,
        noise_amplitude: None,
        noise_seed: None,
    };
    let mut samples = Vec::new();
    let mut saw_header = false;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            let Some((key, value)) = rest.split_once('=') else {
                continue; // free-form comment
            };
            let parse_f = |v: &str| -> Result<f64, DatasetError> {
                v.parse::<f64>()
                    .map_err(|e| err(line_no, format!("bad value for {key}: {e}")))
            };
            match key {
                "source_grid" => {
                    provenance.source_grid = value
                        .parse()
                        .map_err(|e| err(line_no, format!("bad source_grid: {e}")))?
                }
                "sample_grid" => {
                    provenance.sample_grid = value
                        .parse()
                        .map_err(|e| err(line_no, format!("bad sample_grid: {e}")))?
                }
                "re_list" => {
                    provenance.re_list = value
                        .split(';')
                        .filter(|s| !s.is_empty())
                        .map(parse_f)
                        .collect::<Result<_, _>>()?
                }
                "lid" => {
                    provenance.lid = LidProfile::parse(value)
                        .ok_or_else(|| err(line_no, format!("unknown lid profile {value:?}")))?
                }
                "subsample_fraction" if value != "none" => {
                    provenance.subsample_fraction = Some(parse_f(value)?)
                }
                "subsample_seed" if value != "none" => {
                    provenance.subsample_seed = Some(
                        value
                            .parse()
                            .map_err(|e| err(line_no, format!("bad subsample_seed: {e}")))?,
                    )
                }
                "noise_amplitude" if value != "none" => {
                    provenance.noise_amplitude = Some(parse_f(value)?)
                }
                "noise_seed" if value != "none" => {
                    provenance.noise_seed = Some(
                        value
                            .parse()
                            .map_err(|e| err(line_no, format!("bad noise_seed: {e}")))?,
                    )
                }
                _ => {}
            }
            continue;
        }
        if !saw_header {
            if line != CSV_HEADER {
                return Err(err(
                    line_no,
                    format!("expected header {CSV_HEADER:?}, found {line:?}"),
                ));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let names = ["x", "y", "re", "u", "v", "p"];
        if fields.len() != names.len() {
            let msg = if fields.len() < names.len() {
                format!(
                    "expected {} columns, got {} (missing {})",
                    names.len(),
                    fields.len(),
                    names[fields.len()]
                )
            } else {
                format!("expected {} columns, got {}", names.len(), fields.len())
            };
            return Err(err(line_no, msg));
        }
        let mut vals = [0.0f64; 6];
        for (k, (name, field)) in names.iter().zip(&fields).enumerate() {
            vals[k] = field
                .parse()
                .map_err(|e| err(line_no, format!("bad {name} value {field:?}: {e}")))?;
        }
        let sample = FieldSample::new(vals[0], vals[1], vals[2], vals[3], vals[4], vals[5])
            .map_err(|e| err(line_no, e.to_string()))?;
        samples.push(sample);
    }
    if !saw_header {
        return Err(err(0, format!("missing header line {CSV_HEADER:?}")));
    }
    Ok(Dataset { samples, provenance })
}

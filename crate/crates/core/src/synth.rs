//! Seeded generator of synthetic curvilinear cases: an image, its ground
//! truth, and an imperfect likelihood with simulated gaps, spurs, blur and
//! noise.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grids::{BinaryGrid, Coord, Grid, GridError, Shape};
use crate::rng::{self, Stream};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("dims {0:?} too small to host a curve (every dim must be >= {MIN_DIM})")]
    TooSmall(Vec<usize>),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub const MIN_DIM: usize = 8;

/// Centerline steps per gap/spur segment.
const SEGMENT_LEN: usize = 8;
/// Max heading change per step, radians.
const MAX_TURN: f64 = 0.35;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub dims: Vec<usize>,
    pub n_curves: usize,
    pub thickness: usize,
    pub gap_rate: f64,
    pub spur_rate: f64,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dims: vec![64, 64],
            n_curves: 3,
            thickness: 2,
            gap_rate: 0.2,
            spur_rate: 0.2,
            blur_sigma: 1.0,
            noise_sigma: 0.005,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<Shape, SynthError> {
        let shape = Shape::new(&self.dims)?;
        if self.dims.iter().any(|&d| d < MIN_DIM) {
            return Err(SynthError::TooSmall(self.dims.clone()));
        }
        if self.n_curves == 0 || self.thickness == 0 {
            return Err(SynthError::InvalidConfig(
                "n_curves and thickness must be >= 1".into(),
            ));
        }
        for (name, p) in [("gap_rate", self.gap_rate), ("spur_rate", self.spur_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SynthError::InvalidConfig(format!("{name}={p} not in [0,1]")));
            }
        }
        for (name, s) in [("blur_sigma", self.blur_sigma), ("noise_sigma", self.noise_sigma)] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(SynthError::InvalidConfig(format!("{name}={s} must be >= 0")));
            }
        }
        Ok(shape)
    }
}

/// One synthetic case.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCase<T> {
    pub image: Grid<T>,
    pub gt: BinaryGrid,
    pub likelihood: Grid<T>,
}

/// Momentum-biased walk from a border point into the volume, as lattice
/// coordinates with consecutive entries 8/26-adjacent.
fn random_curve(shape: &Shape, rng: &mut Stream) -> Vec<Coord> {
    let rank = shape.rank();
    let dims = shape.dims();
    // Start on a random face, heading roughly toward the center.
    let face_axis = rng.random_range(0..rank);
    let high = rng.random_bool(0.5);
    let mut pos = vec![0.0f64; rank];
    for (a, p) in pos.iter_mut().enumerate() {
        let d = dims[a] as f64;
        *p = if a == face_axis {
            if high {
                d - 1.0
            } else {
                0.0
            }
        } else {
            rng.random_range(0.15 * d..0.85 * d)
        };
    }
    let mut heading: Vec<f64> = (0..rank)
        .map(|a| dims[a] as f64 / 2.0 - pos[a] + rng.random_range(-0.3..0.3) * dims[a] as f64)
        .collect();
    normalize(&mut heading);

    let max_steps = 4 * dims.iter().max().copied().unwrap_or(1);
    let mut path: Vec<Coord> = Vec::new();
    for _ in 0..max_steps {
        let c: Vec<usize> = match pos
            .iter()
            .zip(dims)
            .map(|(&p, &d)| {
                let r = p.round();
                (r >= 0.0 && r < d as f64).then_some(r as usize)
            })
            .collect::<Option<Vec<_>>>()
        {
            Some(c) => c,
            None => break,
        };
        let c = Coord::new(&c);
        if path.last() != Some(&c) {
            path.push(c);
        }
        turn(&mut heading, rng);
        for (p, h) in pos.iter_mut().zip(&heading) {
            *p += h;
        }
    }
    path
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    } else {
        v[0] = 1.0;
    }
}

fn turn(heading: &mut [f64], rng: &mut Stream) {
    if heading.len() == 2 {
        let angle = heading[1].atan2(heading[0]) + rng.random_range(-MAX_TURN..=MAX_TURN);
        heading[0] = angle.cos();
        heading[1] = angle.sin();
    } else {
        for h in heading.iter_mut() {
            *h += rng.random_range(-MAX_TURN..=MAX_TURN);
        }
        normalize(heading);
    }
}

/// Short branch leaving `from` roughly perpendicular to the local direction.
fn spur(shape: &Shape, from: Coord, rng: &mut Stream) -> Vec<Coord> {
    let rank = shape.rank();
    let dims = shape.dims();
    let mut heading: Vec<f64> = (0..rank).map(|_| rng.random_range(-1.0..1.0)).collect();
    normalize(&mut heading);
    let mut pos: Vec<f64> = from.components().iter().map(|&x| x as f64).collect();
    let len = rng.random_range(6..=14);
    let mut path = vec![from];
    for _ in 0..len {
        turn(&mut heading, rng);
        for (p, h) in pos.iter_mut().zip(&heading) {
            *p += h;
        }
        let c: Option<Vec<usize>> = pos
            .iter()
            .zip(dims)
            .map(|(&p, &d)| {
                let r = p.round();
                (r >= 0.0 && r < d as f64).then_some(r as usize)
            })
            .collect();
        match c {
            Some(c) => {
                let c = Coord::new(&c);
                if path.last() != Some(&c) {
                    path.push(c);
                }
            }
            None => break,
        }
    }
    path
}

fn dilate(centerline: &BinaryGrid, thickness: usize) -> BinaryGrid {
    if thickness <= 1 {
        return centerline.clone();
    }
    let shape = *centerline.shape();
    let rank = shape.rank();
    let lo = -(((thickness - 1) / 2) as isize);
    let hi = (thickness / 2) as isize;
    let radius2 = (thickness as f64 / 2.0).powi(2);
    let mut offsets = Vec::new();
    let range: Vec<isize> = (lo..=hi).collect();
    let mut stack = vec![Vec::new()];
    while let Some(prefix) = stack.pop() {
        if prefix.len() == rank {
            let r2: f64 = prefix.iter().map(|&o: &isize| (o as f64).powi(2)).sum();
            if r2 <= radius2 {
                offsets.push(prefix);
            }
            continue;
        }
        for &o in &range {
            let mut p = prefix.clone();
            p.push(o);
            stack.push(p);
        }
    }
    let mut out = Grid::filled(shape, false);
    for (i, &b) in centerline.values().iter().enumerate() {
        if !b {
            continue;
        }
        let c = shape.coord(i);
        'off: for off in &offsets {
            let mut n = [0usize; 3];
            for a in 0..rank {
                let v = c.components()[a] as isize + off[a];
                if v < 0 || v >= shape.dims()[a] as isize {
                    continue 'off;
                }
                n[a] = v as usize;
            }
            out.set(&Coord::new(&n[..rank]), true);
        }
    }
    out
}

/// Separable Gaussian blur truncated at 3 sigma, clamp-to-edge borders.
pub fn gaussian_blur(g: &Grid<f64>, sigma: f64) -> Grid<f64> {
    if sigma <= 0.0 {
        return g.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|w| *w /= norm);

    let shape = *g.shape();
    let mut cur = g.values().to_vec();
    let mut next = vec![0.0; cur.len()];
    for axis in 0..shape.rank() {
        let n = shape.dims()[axis] as isize;
        for (i, out) in next.iter_mut().enumerate() {
            let c = shape.coord(i);
            let x = c.components()[axis] as isize;
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let xx = (x + k as isize - radius).clamp(0, n - 1) as usize;
                let mut comps = [0usize; 3];
                comps[..shape.rank()].copy_from_slice(c.components());
                comps[axis] = xx;
                acc += w * cur[shape.index(&Coord::new(&comps[..shape.rank()]))];
            }
            *out = acc;
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Grid::from_vec(shape, cur).expect("same shape")
}

/// Crest response of a blurred straight axis-aligned line of the given
/// thickness, used to rescale blurred masks back toward unit height.
fn crest_gain(thickness: usize, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return 1.0;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let w = |k: isize| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp();
    let norm: f64 = (-radius..=radius).map(w).sum();
    let lo = -(((thickness - 1) / 2) as isize);
    let hi = (thickness / 2) as isize;
    let inside: f64 = (lo..=hi).filter(|k| k.abs() <= radius).map(w).sum();
    norm / inside
}

pub fn generate_case<T: Real>(cfg: &SynthConfig) -> Result<SynthCase<T>, SynthError> {
    let shape = cfg.validate()?;
    let mut curve_rng = rng::stream(cfg.seed, &[0]);
    let mut corrupt_rng = rng::stream(cfg.seed, &[1]);
    let mut noise_rng = rng::stream(cfg.seed, &[2]);
    let mut texture_rng = rng::stream(cfg.seed, &[3]);

    let mut gt_center = Grid::filled(shape, false);
    let mut kept_center = Grid::filled(shape, false);
    let mut curves = Vec::with_capacity(cfg.n_curves);
    for _ in 0..cfg.n_curves {
        let mut curve = random_curve(&shape, &mut curve_rng);
        // Rare degenerate starts leave the grid immediately; retry a few times.
        for _ in 0..8 {
            if curve.len() >= MIN_DIM {
                break;
            }
            curve = random_curve(&shape, &mut curve_rng);
        }
        curves.push(curve);
    }
    let mut spur_lines = Vec::new();
    for curve in &curves {
        for c in curve {
            gt_center.set(c, true);
        }
        for seg in curve.chunks(SEGMENT_LEN) {
            let removed = corrupt_rng.random_bool(cfg.gap_rate);
            if !removed {
                for c in seg {
                    kept_center.set(c, true);
                }
            }
            if corrupt_rng.random_bool(cfg.spur_rate) {
                let at = seg[corrupt_rng.random_range(0..seg.len())];
                spur_lines.push(spur(&shape, at, &mut corrupt_rng));
            }
        }
    }
    for line in &spur_lines {
        for c in line {
            kept_center.set(c, true);
        }
    }

    let gt = dilate(&gt_center, cfg.thickness);
    let source = dilate(&kept_center, cfg.thickness).to_scalar::<f64>();

    let gain = crest_gain(cfg.thickness, cfg.blur_sigma);
    let mut likelihood = gaussian_blur(&source, cfg.blur_sigma).map(|v| v * gain);
    if cfg.noise_sigma > 0.0 {
        let mut eps = vec![0.0; likelihood.len()];
        rng::fill_normal(&mut noise_rng, &mut eps);
        for (v, e) in likelihood.values_mut().iter_mut().zip(eps) {
            *v += cfg.noise_sigma * e;
        }
    }
    likelihood.values_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    let mut texture = Grid::filled(shape, 0.0);
    let mut white = vec![0.0; texture.len()];
    rng::fill_normal(&mut texture_rng, &mut white);
    texture.values_mut().copy_from_slice(&white);
    let texture = gaussian_blur(&texture, 3.0);
    let vessel = gaussian_blur(&gt.to_scalar::<f64>(), cfg.blur_sigma.max(0.5));
    let image = vessel.zip_map(&texture, |v, t| 0.15 + 0.7 * v + 0.3 * t)?;

    Ok(SynthCase {
        image: image.cast(),
        gt,
        likelihood: likelihood.cast(),
    })
}

/// Config of case `index` in the corpus drawn from generator seed `seed`.
pub fn corpus_config(base: &SynthConfig, seed: u64, index: usize) -> SynthConfig {
    SynthConfig {
        seed: rng::mix(seed, &[0x434f_5250, index as u64]),
        ..base.clone()
    }
}

/// Cases `range` of the corpus for generator seed `seed`.
pub fn generate_corpus<T: Real>(
    base: &SynthConfig,
    seed: u64,
    range: std::ops::Range<usize>,
) -> Result<Vec<SynthCase<T>>, SynthError> {
    range.map(|k| generate_case(&corpus_config(base, seed, k))).collect()
}

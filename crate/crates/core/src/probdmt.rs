//! Probabilistic resampling of Morse structures.
//!
//! Each structure is either kept verbatim (Bernoulli with probability `u`)
//! or regenerated by perturb-and-walk: draw a variance from an
//! Inverse-Gamma prior, add Gaussian noise to the likelihood around the
//! structure, then walk greedily from the saddle toward the maximum scoring
//! neighbors by `gamma / dist(c', c_m) + (1 - gamma) * f_n(c')`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grids::{BinaryGrid, Coord, Grid, Shape};
use crate::morse::{MorseSkeleton, Structure};
use crate::rng::{self, Stream};
use crate::scalar::Real;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("walk endpoints coincide at {0:?}")]
    DegenerateEndpoints(Coord),
    #[error("coordinate {0:?} outside the walk grid")]
    OutOfBounds(Coord),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Probability of keeping the deterministic structure.
    pub u: f64,
    /// Weight of the distance term in the walk score.
    pub gamma: f64,
    /// Inverse-Gamma shape.
    pub alpha: f64,
    /// Inverse-Gamma scale.
    pub beta: f64,
    pub max_step: usize,
    pub seed: u64,
    /// Padding around a structure's bounding box for the perturbed crop.
    pub crop_pad: usize,
    /// Replaces the Inverse-Gamma draw with a fixed variance.
    pub variance_override: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            u: 0.3,
            gamma: 0.2,
            alpha: 2.0,
            beta: 0.01,
            max_step: 50,
            seed: 0,
            crop_pad: 16,
            variance_override: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: String| Err(SamplerError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.u) {
            return bad(format!("u={} not in [0,1]", self.u));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma={} not in [0,1]", self.gamma));
        }
        if !(self.alpha > 1.0) {
            return bad(format!("alpha={} must exceed 1 (mean undefined)", self.alpha));
        }
        if !(self.beta > 0.0) {
            return bad(format!("beta={} must be positive", self.beta));
        }
        if self.max_step == 0 {
            return bad("max_step must be positive".into());
        }
        if let Some(v) = self.variance_override {
            if !(v >= 0.0) {
                return bad(format!("variance override {v} must be >= 0"));
            }
        }
        Ok(())
    }
}

/// One stochastic realization of a structure.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledSkeleton {
    pub structure_id: usize,
    /// Global coordinate of the crop's first voxel.
    pub origin: Coord,
    /// Walked voxels on the crop region.
    pub mask: BinaryGrid,
    /// Walked coordinates in global frame, starting at the saddle.
    pub path: Vec<Coord>,
    pub reached: bool,
    pub was_retained: bool,
}

/// JSON Lines record written by the `sample` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub run: u64,
    pub structure_id: usize,
    pub path: Vec<Coord>,
    pub reached: bool,
    pub retained: bool,
}

impl SampledSkeleton {
    pub fn record(&self, run: u64) -> SampleRecord {
        SampleRecord {
            run,
            structure_id: self.structure_id,
            path: self.path.clone(),
            reached: self.reached,
            retained: self.was_retained,
        }
    }
}

/// Variance draw `1 / G` with `G ~ Gamma(alpha, rate = beta)`, i.e.
/// Inverse-Gamma(alpha, scale = beta) with mean `beta / (alpha - 1)`.
pub fn sample_variance(cfg: &SamplerConfig, rng: &mut impl Rng) -> f64 {
    if let Some(v) = cfg.variance_override {
        return v;
    }
    1.0 / rng::gamma(rng, cfg.alpha, cfg.beta)
}

/// Adds i.i.d. `N(0, sigma2)` noise to every voxel; no clamping.
pub fn perturb<T: Real>(f: &Grid<T>, sigma2: f64, rng: &mut impl Rng) -> Grid<T> {
    if sigma2 == 0.0 {
        return f.clone();
    }
    let sd = sigma2.sqrt();
    let mut eps = vec![0.0; f.len()];
    rng::fill_normal(rng, &mut eps);
    let mut out = f.clone();
    for (v, e) in out.values_mut().iter_mut().zip(eps) {
        *v += T::of(sd * e);
    }
    out
}

/// Result of one greedy walk.
#[derive(Clone, Debug, PartialEq)]
pub struct Walk {
    pub path: Vec<Coord>,
    pub reached: bool,
}

/// Greedy regularized walk from `c_s` toward `c_m` over `f_n`.
///
/// Candidates are unvisited neighbors; `c_m` wins whenever it is adjacent.
/// Ties go to the lexicographically smaller neighbor.
pub fn generate_path<T: Real>(
    f_n: &Grid<T>,
    c_s: Coord,
    c_m: Coord,
    gamma: f64,
    max_step: usize,
) -> Result<Walk, SamplerError> {
    let shape = f_n.shape();
    for c in [c_s, c_m] {
        if !shape.contains(&c) {
            return Err(SamplerError::OutOfBounds(c));
        }
    }
    if c_s == c_m {
        return Err(SamplerError::DegenerateEndpoints(c_s));
    }
    let mut visited = vec![false; shape.len()];
    visited[shape.index(&c_s)] = true;
    let mut path = Vec::with_capacity(max_step + 1);
    path.push(c_s);
    let mut cur = c_s;
    let mut steps = 0;
    while cur != c_m && steps < max_step {
        let mut best: Option<(f64, Coord)> = None;
        let mut target_adjacent = false;
        shape.for_each_neighbor(&cur, |nb| {
            if target_adjacent || visited[shape.index(&nb)] {
                return;
            }
            if nb == c_m {
                target_adjacent = true;
                return;
            }
            let q_d = 1.0 / (c_m.dist2(&nb) as f64).sqrt();
            let score = gamma * q_d + (1.0 - gamma) * f_n.get(&nb).as_f64();
            if best.is_none_or(|(s, _)| score > s) {
                best = Some((score, nb));
            }
        });
        let next = if target_adjacent {
            c_m
        } else {
            match best {
                Some((_, nb)) => nb,
                None => break,
            }
        };
        visited[shape.index(&next)] = true;
        path.push(next);
        cur = next;
        steps += 1;
    }
    Ok(Walk {
        reached: cur == c_m,
        path,
    })
}

/// Axis-aligned region `[lo, hi]` around a path, padded and clamped.
fn crop_region(path: &[Coord], pad: usize, dims: &[usize]) -> (Coord, Shape) {
    let (lo, hi) = crate::morse::bounding_box(path);
    let rank = dims.len();
    let mut origin = [0; 3];
    let mut extent = [0; 3];
    for a in 0..rank {
        let l = lo.components()[a].saturating_sub(pad);
        let h = (hi.components()[a] + pad).min(dims[a] - 1);
        origin[a] = l;
        extent[a] = h - l + 1;
    }
    (
        Coord::new(&origin[..rank]),
        Shape::new_unchecked(&extent[..rank]),
    )
}

fn offset(c: &Coord, origin: &Coord, sign: isize) -> Coord {
    let comps: Vec<usize> = c
        .components()
        .iter()
        .zip(origin.components())
        .map(|(&x, &o)| (x as isize + sign * o as isize) as usize)
        .collect();
    Coord::new(&comps)
}

fn window<T: Real>(f: &Grid<T>, origin: &Coord, shape: Shape) -> Grid<T> {
    Grid::from_fn(shape, |c| f.get(&offset(&c, origin, 1)))
}

fn rasterize(path: &[Coord], origin: &Coord, shape: Shape) -> BinaryGrid {
    let mut mask = Grid::filled(shape, false);
    for c in path {
        mask.set(&offset(c, origin, -1), true);
    }
    mask
}

/// Private stream of one (structure, run) pair.
pub fn structure_stream(seed: u64, structure_id: usize, run_index: u64) -> Stream {
    rng::stream(seed, &[0x5052_4f42, structure_id as u64, run_index])
}

/// Samples one realization of structure `e` of likelihood `f`.
pub fn sample_structure<T: Real>(
    e: &Structure<T>,
    f: &Grid<T>,
    cfg: &SamplerConfig,
    run_index: u64,
) -> SampledSkeleton {
    let mut rng = structure_stream(cfg.seed, e.id, run_index);
    let (origin, crop_shape) = crop_region(&e.path, cfg.crop_pad, f.dims());
    let retain = rng.random::<f64>() < cfg.u;
    if retain {
        return SampledSkeleton {
            structure_id: e.id,
            mask: rasterize(&e.path, &origin, crop_shape),
            origin,
            path: e.path.clone(),
            reached: true,
            was_retained: true,
        };
    }
    let sigma2 = sample_variance(cfg, &mut rng);
    let f_crop = window(f, &origin, crop_shape);
    let f_n = perturb(&f_crop, sigma2, &mut rng);
    let walk = generate_path(
        &f_n,
        offset(&e.saddle, &origin, -1),
        offset(&e.max, &origin, -1),
        cfg.gamma,
        cfg.max_step,
    )
    .expect("structure endpoints are distinct and inside their crop");
    let path: Vec<Coord> = walk.path.iter().map(|c| offset(c, &origin, 1)).collect();
    SampledSkeleton {
        structure_id: e.id,
        mask: rasterize(&path, &origin, crop_shape),
        origin,
        path,
        reached: walk.reached,
        was_retained: false,
    }
}

/// One sample per structure, in structure id order.
pub fn sample_skeleton<T: Real>(
    skel: &MorseSkeleton<T>,
    f: &Grid<T>,
    cfg: &SamplerConfig,
    run_index: u64,
) -> Vec<SampledSkeleton> {
    skel.structures
        .par_iter()
        .map(|e| sample_structure(e, f, cfg, run_index))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morse::{self, testing::t_junction};

    fn flat(dims: &[usize]) -> Grid<f64> {
        Grid::filled(Shape::new(dims).unwrap(), 0.0)
    }

    #[test]
    fn variance_draws_positive_and_seeded() {
        let cfg = SamplerConfig::default();
        let mut a = rng::stream(1, &[]);
        let mut b = rng::stream(1, &[]);
        for _ in 0..1000 {
            let x = sample_variance(&cfg, &mut a);
            assert!(x > 0.0);
            assert_eq!(x, sample_variance(&cfg, &mut b));
        }
    }

    #[test]
    fn config_validation() {
        let ok = SamplerConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            SamplerConfig { alpha: 1.0, ..ok.clone() },
            SamplerConfig { beta: 0.0, ..ok.clone() },
            SamplerConfig { u: 1.1, ..ok.clone() },
            SamplerConfig { gamma: -0.1, ..ok.clone() },
            SamplerConfig { max_step: 0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn zero_variance_is_identity() {
        let f = Grid::from_fn(Shape::new(&[4, 5]).unwrap(), |c| c.components()[1] as f64);
        let mut r = rng::stream(0, &[]);
        assert_eq!(perturb(&f, 0.0, &mut r), f);
    }

    #[test]
    fn perturbation_moments() {
        let f = flat(&[256, 256]);
        let mut r = rng::stream(42, &[]);
        let sigma2 = 0.01;
        let g = perturb(&f, sigma2, &mut r);
        let n = g.len() as f64;
        let mean = g.values().iter().sum::<f64>() / n;
        assert!(mean.abs() < 3.0 * (sigma2 / n).sqrt(), "{mean}");
        let var = g.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var - sigma2).abs() / sigma2 < 0.05, "{var}");
    }

    #[test]
    fn pure_distance_walk_is_straight() {
        let f = flat(&[40, 40]);
        for &(s, m) in &[((0, 0), (30, 12)), ((39, 5), (2, 20)), ((10, 10), (10, 35))] {
            let c_s = Coord::xy(s.0, s.1);
            let c_m = Coord::xy(m.0, m.1);
            let w = generate_path(&f, c_s, c_m, 1.0, 50).unwrap();
            assert!(w.reached);
            assert_eq!(w.path.len() - 1, c_s.chebyshev(&c_m));
        }
    }

    #[test]
    fn adjacent_target_taken_immediately() {
        let mut f = flat(&[5, 5]);
        f.set(&Coord::xy(1, 1), 100.0);
        for gamma in [0.0, 0.2, 1.0] {
            let w = generate_path(&f, Coord::xy(2, 2), Coord::xy(3, 3), gamma, 50).unwrap();
            assert_eq!(w.path, vec![Coord::xy(2, 2), Coord::xy(3, 3)]);
            assert!(w.reached);
        }
    }

    #[test]
    fn degenerate_walk_rejected() {
        let f = flat(&[5, 5]);
        assert_eq!(
            generate_path(&f, Coord::xy(1, 1), Coord::xy(1, 1), 0.2, 50),
            Err(SamplerError::DegenerateEndpoints(Coord::xy(1, 1)))
        );
    }

    #[test]
    fn walk_stops_at_max_step() {
        let f = flat(&[80, 80]);
        let w = generate_path(&f, Coord::xy(0, 0), Coord::xy(79, 79), 1.0, 50).unwrap();
        assert!(!w.reached);
        assert_eq!(w.path.len(), 51);
    }

    #[test]
    fn walk_reaches_all_t_junction_pairings() {
        // Every ordered pair of distinct critical points of the T grid.
        let (f, _) = t_junction();
        let tree = morse::build_merge_tree(&f, 0.05);
        let mut crit: Vec<Coord> = tree.maxima().to_vec();
        crit.extend(tree.pairs().iter().map(|p| p.saddle));
        crit.sort();
        crit.dedup();
        let mut count = 0;
        for &a in &crit {
            for &b in &crit {
                if a == b {
                    continue;
                }
                let w = generate_path(&f, a, b, 0.2, 50).unwrap();
                assert!(w.reached, "{a:?} -> {b:?}");
                count += 1;
            }
        }
        assert_eq!(count, 20);
    }

    #[test]
    fn retained_when_u_is_one() {
        let (f, _) = t_junction();
        let skel = morse::skeletonize(&f, 0.05);
        let cfg = SamplerConfig {
            u: 1.0,
            ..SamplerConfig::default()
        };
        for run in 0..10 {
            for (s, e) in sample_skeleton(&skel, &f, &cfg, run).iter().zip(&skel.structures) {
                assert!(s.was_retained && s.reached);
                assert_eq!(s.path, e.path);
                assert_eq!(s.mask.count(), e.path.len());
            }
        }
    }

    #[test]
    fn greedy_ascent_retraces_strict_ridge() {
        // A winding strictly increasing crest over a low, decreasing slope.
        let shape = Shape::new(&[12, 12]).unwrap();
        let crest = [
            (8, 1), (8, 2), (7, 3), (6, 4), (6, 5), (5, 6), (4, 7), (4, 8), (3, 9), (2, 10),
        ];
        let mut f = Grid::from_fn(shape, |c| 0.02 + 0.001 * c.components()[0] as f64);
        for (k, &(r, c)) in crest.iter().enumerate() {
            f.set(&Coord::xy(r, c), 0.3 + 0.05 * k as f64);
        }
        // Second maximum to create a saddle at the crest start.
        f.set(&Coord::xy(10, 0), 0.6);
        f.set(&Coord::xy(9, 0), 0.32);
        let skel = morse::skeletonize(&f, 0.01);
        let e = skel
            .structures
            .iter()
            .find(|s| s.max == Coord::xy(2, 10))
            .expect("leg along the crest");
        let cfg = SamplerConfig {
            u: 0.0,
            gamma: 0.0,
            variance_override: Some(0.0),
            ..SamplerConfig::default()
        };
        for run in 0..5 {
            let s = sample_structure(e, &f, &cfg, run);
            assert!(!s.was_retained);
            assert_eq!(s.path, e.path);
        }
    }

    #[test]
    fn seeding_contract() {
        let case = crate::synth::generate_case::<f64>(&crate::synth::SynthConfig {
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        let skel = morse::skeletonize(&case.likelihood, 0.01);
        let cfg = SamplerConfig {
            seed: 9,
            ..SamplerConfig::default()
        };
        let e = skel
            .structures
            .iter()
            .max_by_key(|s| s.path.len())
            .unwrap();
        assert_eq!(
            sample_structure(e, &case.likelihood, &cfg, 3),
            sample_structure(e, &case.likelihood, &cfg, 3)
        );
        let runs: Vec<_> = (0..20)
            .map(|r| sample_structure(e, &case.likelihood, &cfg, r).path)
            .collect();
        assert!(runs.iter().any(|p| p != &runs[0]));
    }

    #[test]
    fn sample_invariants() {
        let case = crate::synth::generate_case::<f64>(&crate::synth::SynthConfig {
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let skel = morse::skeletonize(&case.likelihood, 0.01);
        let cfg = SamplerConfig::default();
        for run in 0..3 {
            for s in sample_skeleton(&skel, &case.likelihood, &cfg, run) {
                let e = &skel.structures[s.structure_id];
                assert_eq!(s.path[0], e.saddle);
                if s.reached {
                    assert_eq!(*s.path.last().unwrap(), e.max);
                }
                if !s.was_retained {
                    assert!(s.path.len() <= cfg.max_step + 1);
                }
                assert_eq!(s.mask.count(), s.path.len());
                for w in s.path.windows(2) {
                    assert!(w[0].is_neighbor(&w[1]));
                }
            }
        }
    }
}

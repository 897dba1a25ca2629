//! Calibration, overlap and topology metrics.
//!
//! Component labeling uses full connectivity (8 in 2D, 26 in 3D) for
//! foreground and face connectivity (4 / 6) for background, the usual
//! complementary pair.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grids::{BinaryGrid, Coord, Grid, GridError, Shape};
use crate::inferpost::{StructureEstimate, ACCEPT_THRESHOLD};
use crate::structgraph::soft_label;

pub const DEFAULT_BINS: usize = 20;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("calibration needs at least one sample")]
    NoSamples,
    #[error("bin count must be >= 1")]
    NoBins,
    #[error("confidence {0} outside [0, 1]")]
    Confidence(f64),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalSample {
    pub confidence: f64,
    pub correct: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub bin: usize,
    pub count: usize,
    pub acc: f64,
    pub conf: f64,
}

/// Equal-width bins over `[0, 1]`; the last bin is closed on the right.
pub fn bin_index(confidence: f64, bins: usize) -> usize {
    ((confidence * bins as f64).floor() as usize).min(bins - 1)
}

/// Expected calibration error `sum |B_i| / n * |acc(B_i) - conf(B_i)|` and
/// one reliability row per bin (empty bins report zeros).
pub fn calibration(samples: &[CalSample], bins: usize) -> Result<(f64, Vec<ReliabilityRow>), MetricsError> {
    if bins == 0 {
        return Err(MetricsError::NoBins);
    }
    if samples.is_empty() {
        return Err(MetricsError::NoSamples);
    }
    let mut count = vec![0usize; bins];
    let mut hits = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    for s in samples {
        if !(0.0..=1.0).contains(&s.confidence) {
            return Err(MetricsError::Confidence(s.confidence));
        }
        let b = bin_index(s.confidence, bins);
        count[b] += 1;
        hits[b] += s.correct as usize;
        conf[b] += s.confidence;
    }
    let n = samples.len() as f64;
    let mut ece = 0.0;
    let rows = (0..bins)
        .map(|b| {
            if count[b] == 0 {
                return ReliabilityRow {
                    bin: b,
                    count: 0,
                    acc: 0.0,
                    conf: 0.0,
                };
            }
            let c = count[b] as f64;
            let (acc, cf) = (hits[b] as f64 / c, conf[b] / c);
            ece += c / n * (acc - cf).abs();
            ReliabilityRow {
                bin: b,
                count: count[b],
                acc,
                conf: cf,
            }
        })
        .collect();
    Ok((ece, rows))
}

/// Structure-level samples: confidence `1 - u_norm`, correct when the
/// thresholded prediction agrees with the thresholded soft label of the
/// deterministic path.
pub fn structure_samples(estimates: &[StructureEstimate], gt: &BinaryGrid) -> Vec<CalSample> {
    estimates
        .iter()
        .map(|e| CalSample {
            confidence: 1.0 - e.u_norm,
            correct: (e.p_bar >= ACCEPT_THRESHOLD) == (soft_label(&e.path, gt) >= ACCEPT_THRESHOLD),
        })
        .collect()
}

pub fn reliability_csv(rows: &[ReliabilityRow]) -> String {
    let mut out = String::from("bin,count,acc,conf\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.bin, r.count, r.acc, r.conf));
    }
    out
}

/// `2|P∩G| / (|P| + |G|)`, 1 when both are empty.
pub fn dice(pred: &BinaryGrid, gt: &BinaryGrid) -> Result<f64, MetricsError> {
    pred.same_dims(gt)?;
    let inter = pred.values().iter().zip(gt.values()).filter(|(a, b)| **a && **b).count();
    let total = pred.count() + gt.count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

fn erode(mask: &BinaryGrid) -> BinaryGrid {
    let shape = *mask.shape();
    Grid::from_fn(shape, |c| {
        if !mask.get(&c) || on_border(&shape, &c) {
            return false;
        }
        let mut all = true;
        shape.for_each_neighbor(&c, |n| all &= mask.get(&n));
        all
    })
}

fn dilate(mask: &BinaryGrid) -> BinaryGrid {
    let shape = *mask.shape();
    Grid::from_fn(shape, |c| {
        let mut any = mask.get(&c);
        shape.for_each_neighbor(&c, |n| any |= mask.get(&n));
        any
    })
}

fn on_border(shape: &Shape, c: &Coord) -> bool {
    c.components()
        .iter()
        .zip(shape.dims())
        .any(|(&x, &d)| x == 0 || x + 1 == d)
}

/// Morphological (Lantuéjoul) skeleton with the full 3^rank structuring
/// element: the union over k of `E^k(X) \ open(E^k(X))`. Pixels outside
/// the grid count as background.
pub fn morphological_skeleton(mask: &BinaryGrid) -> BinaryGrid {
    let mut skel = Grid::filled(*mask.shape(), false);
    let mut cur = mask.clone();
    while cur.count() > 0 {
        let eroded = erode(&cur);
        let opened = dilate(&eroded);
        for ((s, &c), &o) in skel.values_mut().iter_mut().zip(cur.values()).zip(opened.values()) {
            *s |= c && !o;
        }
        cur = eroded;
    }
    skel
}

/// Centerline Dice: harmonic mean of topology precision `|S_P∩G|/|S_P|`
/// and sensitivity `|S_G∩P|/|S_G|`.
pub fn cldice(pred: &BinaryGrid, gt: &BinaryGrid) -> Result<f64, MetricsError> {
    pred.same_dims(gt)?;
    if pred.count() == 0 && gt.count() == 0 {
        return Ok(1.0);
    }
    let ratio = |skel: &BinaryGrid, other: &BinaryGrid| {
        let n = skel.count();
        if n == 0 {
            return 0.0;
        }
        let hit = skel.values().iter().zip(other.values()).filter(|(a, b)| **a && **b).count();
        hit as f64 / n as f64
    };
    let t_prec = ratio(&morphological_skeleton(pred), gt);
    let t_sens = ratio(&morphological_skeleton(gt), pred);
    Ok(if t_prec + t_sens == 0.0 {
        0.0
    } else {
        2.0 * t_prec * t_sens / (t_prec + t_sens)
    })
}

/// Connected components of pixels equal to `value`, 1-based labels (0 for
/// pixels of the other value).
pub fn label_components(mask: &BinaryGrid, value: bool, full: bool) -> (Grid<u32>, usize) {
    let shape = *mask.shape();
    let mut labels = Grid::filled(shape, 0u32);
    let mut n = 0;
    let mut queue = VecDeque::new();
    for i in 0..shape.len() {
        if mask.values()[i] != value || labels.values()[i] != 0 {
            continue;
        }
        n += 1;
        labels.values_mut()[i] = n as u32;
        queue.push_back(shape.coord(i));
        while let Some(c) = queue.pop_front() {
            let mut visit = |nb: Coord| {
                if mask.get(&nb) == value && labels.get(&nb) == 0 {
                    labels.set(&nb, n as u32);
                    queue.push_back(nb);
                }
            };
            if full {
                shape.for_each_neighbor(&c, &mut visit);
            } else {
                shape.for_each_face_neighbor(&c, &mut visit);
            }
        }
    }
    (labels, n)
}

/// Number of background components once the grid is surrounded by a
/// one-pixel background ring, so all border-touching background counts as
/// a single outer component.
fn padded_background_components(mask: &BinaryGrid) -> usize {
    let dims: Vec<usize> = mask.dims().iter().map(|d| d + 2).collect();
    let shape = Shape::new(&dims).expect("padded dims valid");
    let padded = Grid::from_fn(shape, |c| {
        let inner: Vec<usize> = c.components().iter().map(|&x| x.wrapping_sub(1)).collect();
        inner.iter().zip(mask.dims()).all(|(&x, &d)| x < d) && mask.get(&Coord::new(&inner))
    });
    label_components(&padded, false, false).1
}

/// Euler characteristic of the union of closed unit pixels / voxels.
pub fn euler_characteristic(mask: &BinaryGrid) -> i64 {
    let rank = mask.rank();
    let cdims: Vec<usize> = mask.dims().iter().map(|d| 2 * d + 1).collect();
    let cshape = Shape::new(&cdims).expect("valid");
    let mut cells = Grid::filled(cshape, false);
    let offsets = 3usize.pow(rank as u32);
    for c in mask.shape().coords().filter(|c| mask.get(c)) {
        for o in 0..offsets {
            let mut k = [0usize; 3];
            let mut rem = o;
            for a in 0..rank {
                k[a] = 2 * c.components()[a] + rem % 3;
                rem /= 3;
            }
            cells.set(&Coord::new(&k[..rank]), true);
        }
    }
    cshape
        .coords()
        .filter(|c| cells.get(c))
        .map(|c| {
            let dim = c.components().iter().filter(|&&x| x % 2 == 1).count();
            if dim % 2 == 0 {
                1
            } else {
                -1
            }
        })
        .sum()
}

/// `[β0, β1]` in 2D, `[β0, β1, β2]` in 3D.
pub fn betti_numbers(mask: &BinaryGrid) -> Vec<usize> {
    let b0 = label_components(mask, true, true).1;
    let holes = padded_background_components(mask) - 1;
    match mask.rank() {
        2 => vec![b0, holes],
        _ => {
            let chi = euler_characteristic(mask);
            let b1 = b0 as i64 + holes as i64 - chi;
            vec![b0, b1.max(0) as usize, holes]
        }
    }
}

pub fn betti_errors(pred: &BinaryGrid, gt: &BinaryGrid) -> Result<Vec<usize>, MetricsError> {
    pred.same_dims(gt)?;
    Ok(betti_numbers(pred)
        .into_iter()
        .zip(betti_numbers(gt))
        .map(|(a, b)| a.abs_diff(b))
        .collect())
}

/// Clustering of pixels: one id per foreground component, 0 for background.
fn clustering(mask: &BinaryGrid) -> Vec<u32> {
    label_components(mask, true, true).0.into_values()
}

fn choose2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index and variation of information (nats) between the
/// component clusterings of the two masks.
pub fn ari_voi(pred: &BinaryGrid, gt: &BinaryGrid) -> Result<(f64, f64), MetricsError> {
    pred.same_dims(gt)?;
    let (a, b) = (clustering(pred), clustering(gt));
    let n = a.len();
    let mut joint: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    let mut rows: BTreeMap<u32, usize> = BTreeMap::new();
    let mut cols: BTreeMap<u32, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(&b) {
        *joint.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = joint.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let expected = sum_a * sum_b / choose2(n);
    let max = 0.5 * (sum_a + sum_b);
    let ari = if max == expected { 1.0 } else { (index - expected) / (max - expected) };

    let entropy = |counts: &mut dyn Iterator<Item = usize>| -> f64 {
        counts
            .map(|c| {
                let p = c as f64 / n as f64;
                -p * p.ln()
            })
            .sum()
    };
    let h_joint = entropy(&mut joint.values().copied());
    let h_a = entropy(&mut rows.values().copied());
    let h_b = entropy(&mut cols.values().copied());
    let voi = (2.0 * h_joint - h_a - h_b).max(0.0);
    Ok((ari, voi))
}

/// All segmentation metrics for one case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub dice: f64,
    pub cldice: f64,
    pub ari: f64,
    pub voi: f64,
    pub betti_errors: Vec<usize>,
}

pub fn segmentation_report(pred: &BinaryGrid, gt: &BinaryGrid) -> Result<SegmentationReport, MetricsError> {
    let (ari, voi) = ari_voi(pred, gt)?;
    Ok(SegmentationReport {
        dice: dice(pred, gt)?,
        cldice: cldice(pred, gt)?,
        ari,
        voi,
        betti_errors: betti_errors(pred, gt)?,
    })
}

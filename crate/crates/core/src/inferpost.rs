//! MC-dropout inference, thresholding, overlay and uncertainty diffusion.
//!
//! `T` resampling rounds are each pushed through the regressor with a fresh
//! dropout mask; per structure the probability and variance draws are
//! averaged. Accepted structures are drawn on top of the backbone
//! segmentation, while backbone pixels whose geodesically nearest structure
//! was rejected are removed. The same nearest-source propagation, restricted
//! to the final foreground, spreads each accepted structure's uncertainty
//! into a heatmap.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grids::{BinaryGrid, Coord, Grid, GridError};
use crate::morse::MorseSkeleton;
use crate::probdmt::{sample_skeleton, SamplerConfig};
use crate::regressor::{forward, Dropout, RegressorError, RegressorParams};
use crate::rng;
use crate::scalar::Real;
use crate::structgraph::{GraphTemplate, DEFAULT_BOX};

pub const DEFAULT_RUNS: usize = 5;
pub const ACCEPT_THRESHOLD: f64 = 0.5;
/// Label value for pixels no source reaches.
pub const UNREACHED: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum InferError {
    #[error("invalid inference config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Regressor(#[from] RegressorError),
    #[error(transparent)]
    Graph(#[from] crate::structgraph::GraphError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Aggregated prediction for one structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureEstimate {
    pub structure_id: usize,
    /// Deterministic path.
    pub path: Vec<Coord>,
    pub p_bar: f64,
    pub var_bar: f64,
    pub u_norm: f64,
    pub accepted: bool,
    pub sample_paths: Vec<Vec<Coord>>,
}

/// `1 - exp(-var)`, kept strictly below one.
pub fn normalize_uncertainty(var: f64) -> f64 {
    (-(-var).exp_m1()).clamp(0.0, 1.0 - f64::EPSILON / 2.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub runs: usize,
    pub seed: u64,
    pub dropout: bool,
    pub box_size: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            runs: DEFAULT_RUNS,
            seed: 0,
            dropout: true,
            box_size: DEFAULT_BOX,
        }
    }
}

/// Runs `mc.runs` rounds (run index `1..=T`, dropout seed mixed from
/// `(mc.seed, t)`) and averages per structure.
pub fn mc_inference<S: Real, T: Real>(
    params: &RegressorParams<T>,
    skel: &MorseSkeleton<S>,
    image: &Grid<S>,
    likelihood: &Grid<S>,
    sampler: &SamplerConfig,
    mc: &McConfig,
) -> Result<Vec<StructureEstimate>, InferError> {
    if mc.runs == 0 {
        return Err(InferError::InvalidConfig("at least one run is required".into()));
    }
    if skel.is_empty() {
        return Ok(Vec::new());
    }
    let template = GraphTemplate::<T>::from_source(skel, image, likelihood, mc.box_size)?;
    let n = skel.len();
    let mut p_sum = vec![0.0; n];
    let mut v_sum = vec![0.0; n];
    let mut sample_paths: Vec<Vec<Vec<Coord>>> = vec![Vec::with_capacity(mc.runs); n];
    for t in 1..=mc.runs as u64 {
        let samples = sample_skeleton(skel, likelihood, sampler, t);
        let graph = template.instantiate(&samples, None)?;
        let dropout = if mc.dropout {
            Dropout::Seeded(rng::mix(mc.seed, &[t]))
        } else {
            Dropout::Off
        };
        let preds = forward(params, &graph, dropout)?;
        for (k, (pred, node)) in preds.iter().zip(&graph.nodes).enumerate() {
            p_sum[k] += pred.p_hat.as_f64();
            v_sum[k] += pred.variance().as_f64();
            let sample = samples
                .iter()
                .find(|s| s.structure_id == node.structure_id)
                .expect("graph built from these samples");
            sample_paths[k].push(sample.path.clone());
        }
    }
    let runs = mc.runs as f64;
    Ok(skel
        .structures
        .iter()
        .zip(sample_paths)
        .enumerate()
        .map(|(k, (s, sample_paths))| {
            let p_bar = p_sum[k] / runs;
            let var_bar = v_sum[k] / runs;
            StructureEstimate {
                structure_id: s.id,
                path: s.path.clone(),
                p_bar,
                var_bar,
                u_norm: normalize_uncertainty(var_bar),
                accepted: p_bar >= ACCEPT_THRESHOLD,
                sample_paths,
            }
        })
        .collect())
}

const STEP_SCALE: f64 = 1e9;

/// Multi-source geodesic nearest-source labeling over `mask` foreground.
///
/// Step costs are 1, √2 and √3 by the number of axes moved. Distances are
/// accumulated in fixed point so that equal-length routes compare exactly;
/// equidistant sources resolve to the smaller label. Sources outside the
/// mask are ignored; unreached pixels get [`UNREACHED`].
pub fn nearest_source(mask: &BinaryGrid, sources: &[(Coord, u32)]) -> Grid<u32> {
    let shape = *mask.shape();
    let steps = [
        0u64,
        STEP_SCALE.round() as u64,
        (2f64.sqrt() * STEP_SCALE).round() as u64,
        (3f64.sqrt() * STEP_SCALE).round() as u64,
    ];
    let mut dist = vec![u64::MAX; shape.len()];
    let mut label = vec![UNREACHED; shape.len()];
    let mut heap = BinaryHeap::new();
    for &(c, l) in sources {
        if !shape.contains(&c) || !mask.get(&c) {
            continue;
        }
        let i = shape.index(&c);
        if (0, l) < (dist[i], label[i]) {
            dist[i] = 0;
            label[i] = l;
            heap.push(Reverse((0u64, l, i)));
        }
    }
    while let Some(Reverse((d, l, i))) = heap.pop() {
        if (d, l) != (dist[i], label[i]) {
            continue;
        }
        let c = shape.coord(i);
        shape.for_each_neighbor(&c, |nb| {
            if !mask.get(&nb) {
                return;
            }
            let moved = c
                .components()
                .iter()
                .zip(nb.components())
                .filter(|(a, b)| a != b)
                .count();
            let nd = d + steps[moved];
            let j = shape.index(&nb);
            if (nd, l) < (dist[j], label[j]) {
                dist[j] = nd;
                label[j] = l;
                heap.push(Reverse((nd, l, j)));
            }
        });
    }
    Grid::from_vec(shape, label).expect("length matches shape")
}

fn path_sources<'a>(estimates: impl Iterator<Item = &'a StructureEstimate>) -> Vec<(Coord, u32)> {
    estimates
        .flat_map(|e| e.path.iter().map(move |&c| (c, e.structure_id as u32)))
        .collect()
}

/// Decision-independent geometry of the overlay: which backbone pixels
/// each structure owns. The final mask is a pure function of the accept
/// flags, so single decisions can be applied by touching only the
/// structure's own region and path.
#[derive(Clone, Debug)]
pub struct Overlay {
    backbone: BinaryGrid,
    /// Owning estimate index per pixel, `UNREACHED` if none.
    owner: Grid<u32>,
    regions: Vec<Vec<usize>>,
    paths: Vec<Vec<usize>>,
}

impl Overlay {
    /// Ownership is the nearest structure over the backbone foreground
    /// joined with all structure paths.
    pub fn new(estimates: &[StructureEstimate], backbone: &BinaryGrid) -> Result<Self, InferError> {
        let shape = *backbone.shape();
        let mut domain = backbone.clone();
        for e in estimates {
            for c in &e.path {
                shape.check(c)?;
                domain.set(c, true);
            }
        }
        let labels = nearest_source(&domain, &path_sources(estimates.iter()));
        let index_of: HashMap<u32, u32> = estimates
            .iter()
            .enumerate()
            .map(|(k, e)| (e.structure_id as u32, k as u32))
            .collect();
        let owner = labels.map(|l| if l == UNREACHED { UNREACHED } else { index_of[&l] });
        let mut regions = vec![Vec::new(); estimates.len()];
        for (i, (&o, &b)) in owner.values().iter().zip(backbone.values()).enumerate() {
            if o != UNREACHED && b {
                regions[o as usize].push(i);
            }
        }
        let paths = estimates
            .iter()
            .map(|e| e.path.iter().map(|c| shape.index(c)).collect())
            .collect();
        Ok(Overlay {
            backbone: backbone.clone(),
            owner,
            regions,
            paths,
        })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Backbone pixels owned by the structure at estimate index `k`.
    pub fn region(&self, k: usize) -> &[usize] {
        &self.regions[k]
    }

    /// `(skeletal_mask, final_mask)` for the given accept flags (indexed
    /// like the estimates).
    pub fn masks(&self, accepted: &[bool]) -> (BinaryGrid, BinaryGrid) {
        let shape = *self.backbone.shape();
        let mut skeletal = Grid::filled(shape, false);
        for (k, path) in self.paths.iter().enumerate() {
            if accepted[k] {
                for &i in path {
                    skeletal.values_mut()[i] = true;
                }
            }
        }
        let mut fin = skeletal.clone();
        for (i, out) in fin.values_mut().iter_mut().enumerate() {
            *out |= self.keeps_backbone(i, accepted);
        }
        (skeletal, fin)
    }

    fn keeps_backbone(&self, i: usize, accepted: &[bool]) -> bool {
        let o = self.owner.values()[i];
        self.backbone.values()[i] && (o == UNREACHED || accepted[o as usize])
    }

    /// Recomputes `final_mask` on structure `k`'s region and path after its
    /// flag changed in `accepted`. Returns the touched pixel indices.
    pub fn update(&self, final_mask: &mut BinaryGrid, accepted: &[bool], k: usize) -> Vec<usize> {
        let mut touched: Vec<usize> = self.regions[k].iter().chain(&self.paths[k]).copied().collect();
        touched.sort_unstable();
        touched.dedup();
        let covered = self.covered(&touched, accepted);
        for (&i, cov) in touched.iter().zip(covered) {
            final_mask.values_mut()[i] = cov || self.keeps_backbone(i, accepted);
        }
        touched
    }

    fn covered(&self, pixels: &[usize], accepted: &[bool]) -> Vec<bool> {
        let mut hit = vec![false; pixels.len()];
        for (k, path) in self.paths.iter().enumerate() {
            if !accepted[k] {
                continue;
            }
            for i in path {
                if let Ok(pos) = pixels.binary_search(i) {
                    hit[pos] = true;
                }
            }
        }
        hit
    }
}

/// Applies the estimates' own accept flags.
pub fn threshold_and_overlay(
    estimates: &[StructureEstimate],
    backbone: &BinaryGrid,
) -> Result<(BinaryGrid, BinaryGrid), InferError> {
    let accepted: Vec<bool> = estimates.iter().map(|e| e.accepted).collect();
    Ok(Overlay::new(estimates, backbone)?.masks(&accepted))
}

/// Heatmap of normalized uncertainty restricted to `final_mask`.
pub fn diffuse_uncertainty(
    estimates: &[StructureEstimate],
    accepted: &[bool],
    final_mask: &BinaryGrid,
) -> Grid<f64> {
    let sources = path_sources(estimates.iter().zip(accepted).filter(|(_, &a)| a).map(|(e, _)| e));
    let u: HashMap<u32, f64> = estimates
        .iter()
        .map(|e| (e.structure_id as u32, e.u_norm))
        .collect();
    let labels = nearest_source(final_mask, &sources);
    labels.zip_map(final_mask, |l, fg| match (fg, l) {
        (false, _) => 0.0,
        (true, UNREACHED) => 1.0,
        (true, l) => u[&l],
    })
    .expect("labels share the mask's shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub estimates: Vec<StructureEstimate>,
    pub final_mask: BinaryGrid,
    pub heatmap: Grid<f64>,
    pub skeletal_mask: BinaryGrid,
}

/// Overlay and heatmap from the estimates' accept flags.
pub fn postprocess(estimates: Vec<StructureEstimate>, backbone: &BinaryGrid) -> Result<CaseResult, InferError> {
    let accepted: Vec<bool> = estimates.iter().map(|e| e.accepted).collect();
    let (skeletal_mask, final_mask) = Overlay::new(&estimates, backbone)?.masks(&accepted);
    let heatmap = diffuse_uncertainty(&estimates, &accepted, &final_mask);
    Ok(CaseResult {
        estimates,
        final_mask,
        heatmap,
        skeletal_mask,
    })
}

/// Backbone segmentation of a likelihood map: `f >= 0.5`.
pub fn backbone_segmentation<T: Real>(likelihood: &Grid<T>) -> BinaryGrid {
    likelihood.map(|v| v >= T::of(0.5))
}

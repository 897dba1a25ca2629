//! Per-case structure graph: one node per structure carrying fixed-size
//! crops of the image, the likelihood and the sampled structure mask, plus
//! the structure's persistence; edges join structures whose deterministic
//! paths overlap.

use thiserror::Error;

use crate::grids::{BinaryGrid, Coord, Grid, GridError, Shape};
use crate::morse::{self, Adjacency, MorseSkeleton};
use crate::probdmt::SampledSkeleton;
use crate::scalar::Real;

pub const DEFAULT_BOX: usize = 32;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("no sample provided for structure {0}")]
    MissingSample(usize),
    #[error("crop box must be even and positive, got {0}")]
    InvalidBox(usize),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Window of side `box_size` with `center` at index `box_size / 2` on every
/// axis, zero-padded outside the grid.
pub fn crop<U: Copy + Default>(grid: &Grid<U>, center: &Coord, box_size: usize) -> Grid<U> {
    let rank = grid.rank();
    let half = (box_size / 2) as isize;
    let dims = grid.dims();
    let out_shape = Shape::new_unchecked(&vec![box_size; rank]);
    Grid::from_fn(out_shape, |o| {
        let mut src = [0usize; 3];
        for a in 0..rank {
            let v = center.components()[a] as isize - half + o.components()[a] as isize;
            if v < 0 || v >= dims[a] as isize {
                return U::default();
            }
            src[a] = v as usize;
        }
        grid.get(&Coord::new(&src[..rank]))
    })
}

/// Inputs of one graph node.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeInput<T> {
    pub structure_id: usize,
    pub x_crop: Grid<T>,
    pub f_crop: Grid<T>,
    pub m_crop: BinaryGrid,
    pub persistence: T,
    pub center: Coord,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructureGraph<T> {
    pub nodes: Vec<NodeInput<T>>,
    pub adjacency: Adjacency,
    /// Soft labels `z_e`, present when ground truth was supplied.
    pub labels: Option<Vec<T>>,
}

impl<T: Real> StructureGraph<T> {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn box_size(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.x_crop.dims()[0])
    }

    pub fn rank(&self) -> usize {
        self.nodes.first().map_or(2, |n| n.x_crop.rank())
    }
}

/// Node center: the path pixel nearest the bounding-box midpoint (ties to
/// the earlier pixel along the path). Keeps the structure inside its own
/// crop even when the box midpoint falls off a winding path.
pub fn structure_center(path: &[Coord]) -> Coord {
    let (lo, hi) = morse::bounding_box(path);
    let mid: Vec<f64> = lo
        .components()
        .iter()
        .zip(hi.components())
        .map(|(&a, &b)| (a + b) as f64 / 2.0)
        .collect();
    let d2 = |c: &Coord| -> f64 {
        c.components()
            .iter()
            .zip(&mid)
            .map(|(&x, &m)| (x as f64 - m).powi(2))
            .sum()
    };
    *path
        .iter()
        .min_by(|a, b| d2(a).partial_cmp(&d2(b)).expect("finite"))
        .expect("nonempty path")
}

/// Sample-independent part of a case's graph: fixed crops of `x` and `f`,
/// centers, persistence and adjacency. Built once per case and reused for
/// every resampling round.
#[derive(Clone, Debug)]
pub struct GraphTemplate<T> {
    shape: Shape,
    box_size: usize,
    structure_ids: Vec<usize>,
    centers: Vec<Coord>,
    x_crops: Vec<Grid<T>>,
    f_crops: Vec<Grid<T>>,
    persistence: Vec<T>,
    adjacency: Adjacency,
}

impl<T: Real> GraphTemplate<T> {
    pub fn new(
        skel: &MorseSkeleton<T>,
        x: &Grid<T>,
        f: &Grid<T>,
        box_size: usize,
    ) -> Result<Self, GraphError> {
        if box_size == 0 || box_size % 2 != 0 {
            return Err(GraphError::InvalidBox(box_size));
        }
        x.same_dims(f)?;
        let centers: Vec<Coord> = skel
            .structures
            .iter()
            .map(|s| structure_center(&s.path))
            .collect();
        Ok(GraphTemplate {
            shape: *f.shape(),
            box_size,
            structure_ids: skel.structures.iter().map(|s| s.id).collect(),
            x_crops: centers.iter().map(|c| crop(x, c, box_size)).collect(),
            f_crops: centers.iter().map(|c| crop(f, c, box_size)).collect(),
            persistence: skel.structures.iter().map(|s| s.persistence).collect(),
            adjacency: morse::structure_adjacency(skel),
            centers,
        })
    }

    /// Like [`GraphTemplate::new`] but reads fields of another scalar type
    /// and casts the crops.
    pub fn from_source<S: Real>(
        skel: &MorseSkeleton<S>,
        x: &Grid<S>,
        f: &Grid<S>,
        box_size: usize,
    ) -> Result<Self, GraphError> {
        let t = GraphTemplate::<S>::new(skel, x, f, box_size)?;
        Ok(GraphTemplate {
            shape: t.shape,
            box_size,
            structure_ids: t.structure_ids,
            centers: t.centers,
            x_crops: t.x_crops.iter().map(|g| g.cast()).collect(),
            f_crops: t.f_crops.iter().map(|g| g.cast()).collect(),
            persistence: t.persistence.iter().map(|&p| T::of(p.as_f64())).collect(),
            adjacency: t.adjacency,
        })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    /// Renders one graph from a set of samples (indexed by structure id).
    pub fn instantiate(
        &self,
        samples: &[SampledSkeleton],
        gt: Option<&BinaryGrid>,
    ) -> Result<StructureGraph<T>, GraphError> {
        if let Some(gt) = gt {
            if gt.shape() != &self.shape {
                return Err(GraphError::Grid(GridError::DimsMismatch {
                    left: self.shape.dims().to_vec(),
                    right: gt.dims().to_vec(),
                }));
            }
        }
        let mut nodes = Vec::with_capacity(self.len());
        let mut labels = gt.map(|_| Vec::with_capacity(self.len()));
        for (k, &id) in self.structure_ids.iter().enumerate() {
            let sample = samples
                .get(id)
                .filter(|s| s.structure_id == id)
                .or_else(|| samples.iter().find(|s| s.structure_id == id))
                .ok_or(GraphError::MissingSample(id))?;
            let m_crop = path_crop(&sample.path, &self.centers[k], self.box_size);
            if let (Some(gt), Some(labels)) = (gt, labels.as_mut()) {
                labels.push(T::of(soft_label(&sample.path, gt)));
            }
            nodes.push(NodeInput {
                structure_id: id,
                x_crop: self.x_crops[k].clone(),
                f_crop: self.f_crops[k].clone(),
                m_crop,
                persistence: self.persistence[k],
                center: self.centers[k],
            });
        }
        Ok(StructureGraph {
            nodes,
            adjacency: self.adjacency.clone(),
            labels,
        })
    }
}

/// Rasterizes a path directly into a crop window.
fn path_crop(path: &[Coord], center: &Coord, box_size: usize) -> BinaryGrid {
    let rank = center.rank();
    let half = (box_size / 2) as isize;
    let mut out = Grid::filled(Shape::new_unchecked(&vec![box_size; rank]), false);
    'path: for c in path {
        let mut local = [0usize; 3];
        for a in 0..rank {
            let v = c.components()[a] as isize - center.components()[a] as isize + half;
            if v < 0 || v >= box_size as isize {
                continue 'path;
            }
            local[a] = v as usize;
        }
        out.set(&Coord::new(&local[..rank]), true);
    }
    out
}

/// Fraction of the sampled mask lying on ground truth: `sum(y * m) / sum(m)`.
pub fn soft_label(path: &[Coord], gt: &BinaryGrid) -> f64 {
    let mut uniq: Vec<Coord> = path.to_vec();
    uniq.sort();
    uniq.dedup();
    let hits = uniq.iter().filter(|c| gt.get(c)).count();
    hits as f64 / uniq.len() as f64
}

/// Full graph construction in one call.
pub fn build_graph<T: Real>(
    skel: &MorseSkeleton<T>,
    samples: &[SampledSkeleton],
    x: &Grid<T>,
    f: &Grid<T>,
    gt: Option<&BinaryGrid>,
    box_size: usize,
) -> Result<StructureGraph<T>, GraphError> {
    GraphTemplate::new(skel, x, f, box_size)?.instantiate(samples, gt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morse;
    use crate::probdmt::{sample_skeleton, SamplerConfig};
    use crate::synth::{generate_case, SynthConfig};

    #[test]
    fn interior_crop_is_plain_copy() {
        let g = Grid::from_fn(Shape::new(&[40, 40]).unwrap(), |c| {
            (c.components()[0] * 40 + c.components()[1]) as f64
        });
        let w = crop(&g, &Coord::xy(20, 20), 8);
        assert_eq!(w.dims(), &[8, 8]);
        assert_eq!(w.get(&Coord::xy(0, 0)), g.get(&Coord::xy(16, 16)));
        assert_eq!(w.get(&Coord::xy(4, 4)), g.get(&Coord::xy(20, 20)));
        assert_eq!(w.get(&Coord::xy(7, 7)), g.get(&Coord::xy(23, 23)));
    }

    #[test]
    fn corner_crop_padding_geometry() {
        let g = Grid::filled(Shape::new(&[64, 64]).unwrap(), 1.0);
        let w = crop(&g, &Coord::xy(0, 0), 32);
        for c in w.shape().coords() {
            let inside = c.components().iter().all(|&x| x >= 16);
            assert_eq!(w.get(&c), if inside { 1.0 } else { 0.0 });
        }
        assert_eq!(w.values().iter().sum::<f64>(), 256.0);
        let interior = crop(&g, &Coord::xy(32, 32), 32);
        assert_eq!(interior.values().iter().sum::<f64>(), 1024.0);
        let vol = Grid::filled(Shape::new(&[40, 40, 40]).unwrap(), 1.0f32);
        let w3 = crop(&vol, &Coord::xyz(20, 20, 20), 32);
        assert_eq!(w3.values().iter().sum::<f32>(), 32768.0);
    }

    #[test]
    fn soft_label_fractions() {
        let mut gt = Grid::filled(Shape::new(&[5, 5]).unwrap(), false);
        let path = [Coord::xy(1, 1), Coord::xy(1, 2), Coord::xy(2, 3), Coord::xy(3, 3)];
        for c in &path[..3] {
            gt.set(c, true);
        }
        assert_eq!(soft_label(&path, &gt), 0.75);
        gt.set(&path[3], true);
        assert_eq!(soft_label(&path, &gt), 1.0);
    }

    #[test]
    fn graph_from_synthetic_case() {
        let case = generate_case::<f64>(&SynthConfig {
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        let skel = morse::skeletonize(&case.likelihood, 0.01);
        assert!(!skel.is_empty());
        let cfg = SamplerConfig::default();
        let samples = sample_skeleton(&skel, &case.likelihood, &cfg, 0);
        let g = build_graph(&skel, &samples, &case.image, &case.likelihood, Some(&case.gt), 32)
            .unwrap();
        let labels = g.labels.as_ref().unwrap();
        assert_eq!(labels.len(), g.len());
        assert!(labels.iter().all(|z| (0.0..=1.0).contains(z)));
        assert_eq!(g.adjacency, morse::structure_adjacency(&skel));
        for (node, s) in g.nodes.iter().zip(&skel.structures) {
            assert_eq!(node.f_crop, crop(&case.likelihood, &node.center, 32));
            assert_eq!(node.x_crop.dims(), &[32, 32]);
            if samples[s.id].was_retained {
                assert!(node.m_crop.count() > 0);
            }
        }
        let unlabeled =
            build_graph(&skel, &samples, &case.image, &case.likelihood, None, 32).unwrap();
        assert!(unlabeled.labels.is_none());
        assert_eq!(unlabeled.nodes, g.nodes);

        // Adjacency does not change with the draw.
        let other = sample_skeleton(&skel, &case.likelihood, &cfg, 1);
        let g2 = build_graph(&skel, &other, &case.image, &case.likelihood, None, 32).unwrap();
        assert_eq!(g2.adjacency, g.adjacency);
    }

    #[test]
    fn missing_sample_is_reported() {
        let (f, _) = morse::testing::t_junction();
        let skel = morse::skeletonize(&f, 0.05);
        let samples = sample_skeleton(&skel, &f, &SamplerConfig::default(), 0);
        let err = build_graph(&skel, &samples[..2], &f, &f, None, 8).unwrap_err();
        assert!(matches!(err, GraphError::MissingSample(2)));
        assert!(matches!(
            build_graph(&skel, &samples, &f, &f, None, 7),
            Err(GraphError::InvalidBox(7))
        ));
    }

    #[test]
    fn center_lies_on_path() {
        let path: Vec<Coord> = (0..20)
            .map(|i| Coord::xy(0, i))
            .chain((1..20).map(|i| Coord::xy(i, 19)))
            .collect();
        let c = structure_center(&path);
        assert!(path.contains(&c));
    }
}

//! Morse decomposition of a likelihood map.
//!
//! A superlevel-set sweep with union-find yields the saddle–maximum
//! persistence pairs (elder rule). Each processed pixel also records an
//! ascent link to its highest already-processed neighbor; following those
//! links from a saddle traces the one-pixel-wide ridge up to a maximum.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grids::{Coord, Grid, Shape};
use crate::scalar::Real;

pub const DEFAULT_BG_THRESHOLD: f64 = 0.01;

const NONE: u32 = u32::MAX;

#[derive(Clone, Debug)]
pub(crate) struct UnionFind {
    parent: Vec<u32>,
    rank: Vec<u8>,
}

impl UnionFind {
    pub(crate) fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n as u32).collect(),
            rank: vec![0; n],
        }
    }

    pub(crate) fn find(&mut self, mut x: u32) -> u32 {
        let mut root = x;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        while self.parent[x as usize] != root {
            let next = self.parent[x as usize];
            self.parent[x as usize] = root;
            x = next;
        }
        root
    }

    /// Links two roots and returns the surviving root.
    pub(crate) fn union_roots(&mut self, a: u32, b: u32) -> u32 {
        if a == b {
            return a;
        }
        let (ra, rb) = (self.rank[a as usize], self.rank[b as usize]);
        let (big, small) = if ra >= rb { (a, b) } else { (b, a) };
        self.parent[small as usize] = big;
        if ra == rb {
            self.rank[big as usize] += 1;
        }
        big
    }
}

/// One saddle–maximum pairing produced by a merge event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersistencePair<T> {
    pub saddle: Coord,
    /// The younger maximum, which dies at this saddle.
    pub max: Coord,
    /// The eldest maximum of the merge, which survives.
    pub elder: Coord,
    pub persistence: T,
    /// Highest neighbor of the saddle inside the younger component.
    pub young_entry: Coord,
    /// Highest neighbor of the saddle inside the elder component.
    pub elder_entry: Coord,
}

/// Superlevel-set merge tree of a scalar field.
#[derive(Clone, Debug)]
pub struct MergeTree<T> {
    shape: Shape,
    /// Processed pixel indices, strictly decreasing key.
    order: Vec<u32>,
    /// Position of each pixel in `order`, `NONE` if unprocessed.
    position: Vec<u32>,
    /// Ascent link per pixel, `NONE` for maxima and unprocessed pixels.
    parent_link: Vec<u32>,
    pairs: Vec<PersistencePair<T>>,
    maxima: Vec<Coord>,
    components: UnionFind,
}

impl<T: Real> MergeTree<T> {
    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn pairs(&self) -> &[PersistencePair<T>] {
        &self.pairs
    }

    /// Maxima in birth order.
    pub fn maxima(&self) -> &[Coord] {
        &self.maxima
    }

    pub fn order(&self) -> impl Iterator<Item = Coord> + '_ {
        self.order.iter().map(|&i| self.shape.coord(i as usize))
    }

    pub fn is_processed(&self, c: &Coord) -> bool {
        self.position[self.shape.index(c)] != NONE
    }

    pub fn parent_link(&self, c: &Coord) -> Option<Coord> {
        let p = self.parent_link[self.shape.index(c)];
        (p != NONE).then(|| self.shape.coord(p as usize))
    }

    /// Representative pixel of the final component containing `c`.
    pub fn component_root(&mut self, c: &Coord) -> Option<Coord> {
        let i = self.shape.index(c);
        if self.position[i] == NONE {
            return None;
        }
        let r = self.components.find(i as u32);
        Some(self.shape.coord(r as usize))
    }

    /// Follows ascent links from `start` to the maximum it drains into.
    pub fn ascend(&self, start: &Coord) -> Vec<Coord> {
        let mut out = vec![*start];
        let mut cur = self.shape.index(start) as u32;
        loop {
            let next = self.parent_link[cur as usize];
            if next == NONE {
                break;
            }
            out.push(self.shape.coord(next as usize));
            cur = next;
        }
        out
    }
}

/// Pixels with `f >= bg_threshold` sorted by decreasing key, where the key
/// orders by value and then prefers the lexicographically smaller coordinate.
fn sweep_order<T: Real>(f: &Grid<T>, bg_threshold: T) -> Vec<u32> {
    let values = f.values();
    let mut order: Vec<u32> = (0..values.len() as u32)
        .filter(|&i| values[i as usize] >= bg_threshold)
        .collect();
    order.sort_unstable_by(|&a, &b| {
        values[b as usize]
            .partial_cmp(&values[a as usize])
            .expect("finite likelihood")
            .then(a.cmp(&b))
    });
    order
}

pub fn build_merge_tree<T: Real>(f: &Grid<T>, bg_threshold: T) -> MergeTree<T> {
    assert!(f.all_finite(), "likelihood must be finite");
    let shape = *f.shape();
    let n = shape.len();
    let values = f.values();
    let order = sweep_order(f, bg_threshold);
    let mut position = vec![NONE; n];
    let mut parent_link = vec![NONE; n];
    let mut uf = UnionFind::new(n);
    // Eldest maximum (pixel index) of each component, indexed by root.
    let mut comp_max = vec![NONE; n];
    let mut pairs = Vec::new();
    let mut maxima = Vec::new();

    // (root, component max position, best neighbor position, best neighbor)
    let mut touching: Vec<(u32, u32, u32, u32)> = Vec::with_capacity(26);
    for (pos, &pix) in order.iter().enumerate() {
        let c = shape.coord(pix as usize);
        touching.clear();
        let mut best: Option<(u32, u32)> = None;
        shape.for_each_neighbor(&c, |nb| {
            let ni = shape.index(&nb) as u32;
            let npos = position[ni as usize];
            if npos == NONE {
                return;
            }
            if best.is_none_or(|(bp, _)| npos < bp) {
                best = Some((npos, ni));
            }
            let root = uf.find(ni);
            let cmax = comp_max[root as usize];
            match touching.iter_mut().find(|t| t.0 == root) {
                Some(t) => {
                    if npos < t.2 {
                        t.2 = npos;
                        t.3 = ni;
                    }
                }
                None => touching.push((root, position[cmax as usize], npos, ni)),
            }
        });
        position[pix as usize] = pos as u32;
        match best {
            None => {
                comp_max[pix as usize] = pix;
                maxima.push(c);
            }
            Some((_, ni)) => {
                parent_link[pix as usize] = ni;
                // Eldest component first.
                touching.sort_unstable_by_key(|t| t.1);
                let elder = touching[0];
                let elder_max = comp_max[elder.0 as usize];
                for young in &touching[1..] {
                    let young_max = comp_max[young.0 as usize];
                    pairs.push(PersistencePair {
                        saddle: c,
                        max: shape.coord(young_max as usize),
                        elder: shape.coord(elder_max as usize),
                        persistence: values[young_max as usize] - values[pix as usize],
                        young_entry: shape.coord(young.3 as usize),
                        elder_entry: shape.coord(elder.3 as usize),
                    });
                }
                let own = uf.find(pix);
                let mut root = uf.union_roots(own, elder.0);
                for t in &touching[1..] {
                    root = uf.union_roots(root, t.0);
                }
                comp_max[root as usize] = elder_max;
            }
        }
    }

    MergeTree {
        shape,
        order,
        position,
        parent_link,
        pairs,
        maxima,
        components: uf,
    }
}

/// One saddle→maximum leg of the Morse skeleton.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Structure<T> {
    pub id: usize,
    pub saddle: Coord,
    pub max: Coord,
    pub path: Vec<Coord>,
    pub persistence: T,
    /// Index of the persistence pair both legs of a saddle share.
    pub pair: usize,
    /// Id of the other leg of the same pair.
    pub sibling: usize,
}

impl<T: Real> Structure<T> {
    /// Inclusive bounding box `(lo, hi)` of the path.
    pub fn bounding_box(&self) -> (Coord, Coord) {
        bounding_box(&self.path)
    }
}

pub fn bounding_box(path: &[Coord]) -> (Coord, Coord) {
    let rank = path[0].rank();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0; 3];
    for c in path {
        for (a, &x) in c.components().iter().enumerate() {
            lo[a] = lo[a].min(x);
            hi[a] = hi[a].max(x);
        }
    }
    (Coord::new(&lo[..rank]), Coord::new(&hi[..rank]))
}

/// All structures of one likelihood map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MorseSkeleton<T> {
    pub structures: Vec<Structure<T>>,
    pub source_dims: Vec<usize>,
}

impl<T: Real> MorseSkeleton<T> {
    pub fn len(&self) -> usize {
        self.structures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.structures.is_empty()
    }
}

/// Two legs per persistence pair: pair `k` yields structure `2k` (into the
/// younger component) and `2k + 1` (into the elder component). Each leg ends
/// at the maximum its ascent chain reaches.
pub fn extract_structures<T: Real>(tree: &MergeTree<T>) -> MorseSkeleton<T> {
    let structures = tree
        .pairs
        .par_iter()
        .enumerate()
        .flat_map_iter(|(k, pair)| {
            let leg = |entry: &Coord, id: usize, sibling: usize| {
                let mut path = Vec::with_capacity(16);
                path.push(pair.saddle);
                path.extend(tree.ascend(entry));
                Structure {
                    id,
                    saddle: pair.saddle,
                    max: *path.last().expect("nonempty"),
                    path,
                    persistence: pair.persistence,
                    pair: k,
                    sibling,
                }
            };
            [
                leg(&pair.young_entry, 2 * k, 2 * k + 1),
                leg(&pair.elder_entry, 2 * k + 1, 2 * k),
            ]
        })
        .collect();
    MorseSkeleton {
        structures,
        source_dims: tree.shape.dims().to_vec(),
    }
}

/// Merge tree plus structure extraction in one call.
pub fn skeletonize<T: Real>(f: &Grid<T>, bg_threshold: T) -> MorseSkeleton<T> {
    extract_structures(&build_merge_tree(f, bg_threshold))
}

/// Symmetric, irreflexive relation over structure ids.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Adjacency {
    lists: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn empty(n: usize) -> Self {
        Adjacency {
            lists: vec![Vec::new(); n],
        }
    }

    /// Builds from an edge list; self-loops are dropped, duplicates merged.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut lists = vec![Vec::new(); n];
        for (a, b) in edges {
            if a != b {
                lists[a].push(b);
                lists[b].push(a);
            }
        }
        for l in &mut lists {
            l.sort_unstable();
            l.dedup();
        }
        Adjacency { lists }
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.lists[i]
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.lists[i].binary_search(&j).is_ok()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.lists[i].len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.lists
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
    }
}

/// Structures are adjacent iff their deterministic paths share a pixel.
pub fn structure_adjacency<T: Real>(skel: &MorseSkeleton<T>) -> Adjacency {
    let n = skel.structures.len();
    if n == 0 {
        return Adjacency::empty(0);
    }
    let shape = Shape::new_unchecked(&skel.source_dims);
    let mut owners: Vec<Vec<u32>> = vec![Vec::new(); shape.len()];
    for s in &skel.structures {
        for c in &s.path {
            let o = &mut owners[shape.index(c)];
            if o.last() != Some(&(s.id as u32)) {
                o.push(s.id as u32);
            }
        }
    }
    let edges = owners.iter().filter(|o| o.len() > 1).flat_map(|o| {
        o.iter()
            .enumerate()
            .flat_map(move |(k, &a)| o[k + 1..].iter().map(move |&b| (a as usize, b as usize)))
    });
    Adjacency::from_edges(n, edges)
}

/// JSON Lines record emitted by the `skeletonize` command.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct StructureRecord {
    pub id: usize,
    pub saddle: Coord,
    pub max: Coord,
    pub path: Vec<Coord>,
    pub persistence: f64,
}

impl<T: Real> From<&Structure<T>> for StructureRecord {
    fn from(s: &Structure<T>) -> Self {
        StructureRecord {
            id: s.id,
            saddle: s.saddle,
            max: s.max,
            path: s.path.clone(),
            persistence: s.persistence.as_f64(),
        }
    }
}


#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;
    use proptest::prelude::*;

    fn row(values: &[f64]) -> Grid<f64> {
        // A 1xN profile embedded as the first row of a 2xN grid whose second
        // row stays below the background threshold.
        let n = values.len();
        let mut data = values.to_vec();
        data.extend(std::iter::repeat(0.0).take(n));
        Grid::from_vec(Shape::new(&[2, n]).unwrap(), data).unwrap()
    }

    #[test]
    fn five_pixel_profile() {
        let f = row(&[0.9, 0.2, 0.8, 0.1, 0.0]);
        let tree = build_merge_tree(&f, 0.05);
        assert_eq!(tree.maxima(), &[Coord::xy(0, 0), Coord::xy(0, 2)]);
        assert_eq!(tree.pairs().len(), 1);
        let p = &tree.pairs()[0];
        assert_eq!(p.saddle, Coord::xy(0, 1));
        assert_eq!(p.max, Coord::xy(0, 2));
        assert!((p.persistence - 0.6).abs() < 1e-12);
        assert_eq!(
            brute_force_pairs(&f, 0.05),
            vec![(Coord::xy(0, 1), Coord::xy(0, 2), p.persistence)]
        );

        let skel = extract_structures(&tree);
        assert_eq!(skel.len(), 2);
        assert_eq!(skel.structures[0].path, vec![Coord::xy(0, 1), Coord::xy(0, 2)]);
        assert_eq!(skel.structures[1].path, vec![Coord::xy(0, 1), Coord::xy(0, 0)]);
        for s in &skel.structures {
            assert!((s.persistence - 0.6).abs() < 1e-12);
        }
        let adj = structure_adjacency(&skel);
        assert_eq!(adj.neighbors(0), &[1]);
        assert_eq!(adj.neighbors(1), &[0]);
    }

    #[test]
    fn monotone_field_has_no_pairs() {
        let shape = Shape::new(&[6, 7]).unwrap();
        let f = Grid::from_fn(shape, |c| (c.components()[0] * 7 + c.components()[1]) as f64 / 50.0 + 0.05);
        let tree = build_merge_tree(&f, 0.01);
        assert_eq!(tree.maxima().len(), 1);
        assert!(tree.pairs().is_empty());
        assert!(extract_structures(&tree).is_empty());
    }

    #[test]
    fn constant_field_single_maximum_at_origin() {
        let f = Grid::filled(Shape::new(&[5, 5, 4]).unwrap(), 0.7);
        let tree = build_merge_tree(&f, 0.01);
        assert_eq!(tree.maxima(), &[Coord::xyz(0, 0, 0)]);
        assert!(tree.pairs().is_empty());
    }

    #[test]
    fn t_junction_two_saddles_four_legs_on_crest() {
        let (f, crest) = t_junction();
        let tree = build_merge_tree(&f, 0.05);
        assert_eq!(tree.pairs().len(), 2);
        let skel = extract_structures(&tree);
        assert_eq!(skel.len(), 4);
        let saddles: Vec<Coord> = tree.pairs().iter().map(|p| p.saddle).collect();
        assert_eq!(saddles, vec![Coord::xy(4, 2), Coord::xy(4, 6)]);
        let mut union: Vec<Coord> = Vec::new();
        for s in &skel.structures {
            for c in &s.path {
                assert!(crest.contains(c), "{c:?} off crest");
                if !union.contains(c) {
                    union.push(*c);
                }
            }
        }
        // Union of the legs is connected.
        let mut seen = vec![union[0]];
        let mut frontier = vec![union[0]];
        while let Some(c) = frontier.pop() {
            for n in &union {
                if c.is_neighbor(n) && !seen.contains(n) {
                    seen.push(*n);
                    frontier.push(*n);
                }
            }
        }
        assert_eq!(seen.len(), union.len());
        let adj = structure_adjacency(&skel);
        assert!(adj.contains(0, 1) && adj.contains(2, 3));
    }

    #[test]
    fn three_way_merge_emits_two_pairs() {
        // X shape: three diagonal-free arms meeting at the lowest crest pixel.
        let shape = Shape::new(&[7, 7]).unwrap();
        let mut f = Grid::filled(shape, 0.0);
        for (r, c, v) in [
            (3, 3, 0.3),
            (1, 1, 0.9),
            (2, 2, 0.8),
            (1, 5, 0.7),
            (2, 4, 0.6),
            (5, 3, 0.5),
            (4, 3, 0.4),
        ] {
            f.set(&Coord::xy(r, c), v);
        }
        let tree = build_merge_tree(&f, 0.05);
        let pairs: Vec<_> = tree.pairs().iter().map(|p| (p.saddle, p.max)).collect();
        assert_eq!(
            pairs,
            vec![
                (Coord::xy(3, 3), Coord::xy(1, 5)),
                (Coord::xy(3, 3), Coord::xy(5, 3)),
            ]
        );
        assert_eq!(
            brute_force_pairs(&f, 0.05)
                .into_iter()
                .map(|(s, m, _)| (s, m))
                .collect::<Vec<_>>(),
            pairs
        );
    }

    #[test]
    fn ascent_links_point_uphill() {
        let (f, _) = t_junction();
        let tree = build_merge_tree(&f, 0.05);
        for c in tree.order() {
            if let Some(p) = tree.parent_link(&c) {
                assert!(f.get(&p) >= f.get(&c));
                assert!(p.is_neighbor(&c));
            }
        }
    }

    fn arb_field() -> impl Strategy<Value = Grid<f64>> {
        (3usize..9, 3usize..9).prop_flat_map(|(h, w)| {
            prop::collection::vec(0u8..6, h * w).prop_map(move |v| {
                Grid::from_vec(
                    Shape::new(&[h, w]).unwrap(),
                    v.into_iter().map(|x| x as f64 / 5.0).collect(),
                )
                .unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn pairs_match_brute_force(f in arb_field()) {
            let tree = build_merge_tree(&f, 0.1);
            let fast: Vec<_> = tree.pairs().iter().map(|p| (p.saddle, p.max, p.persistence)).collect();
            prop_assert_eq!(fast, brute_force_pairs(&f, 0.1));
        }

        #[test]
        fn pairs_invariant_under_monotone_transform(f in arb_field(), shift in -0.5f64..0.5) {
            let a = build_merge_tree(&f, 0.1);
            let g = f.map(|v| v.powi(3) * 2.0 + shift);
            let b = build_merge_tree(&g, 0.1f64.powi(3) * 2.0 + shift);
            let pa: Vec<_> = a.pairs().iter().map(|p| (p.saddle, p.max)).collect();
            let pb: Vec<_> = b.pairs().iter().map(|p| (p.saddle, p.max)).collect();
            prop_assert_eq!(pa, pb);
            let shifted = f.map(|v| v + shift);
            let c = build_merge_tree(&shifted, 0.1 + shift);
            let sum_a: f64 = a.pairs().iter().map(|p| p.persistence).sum();
            let sum_c: f64 = c.pairs().iter().map(|p| p.persistence).sum();
            prop_assert!((sum_a - sum_c).abs() < 1e-9);
        }

        #[test]
        fn structure_paths_are_valid(f in arb_field()) {
            let tree = build_merge_tree(&f, 0.1);
            let skel = extract_structures(&tree);
            for (i, s) in skel.structures.iter().enumerate() {
                prop_assert_eq!(s.id, i);
                prop_assert_eq!(s.path[0], s.saddle);
                prop_assert_eq!(*s.path.last().unwrap(), s.max);
                prop_assert!(tree.parent_link(&s.max).is_none());
                for w in s.path.windows(2) {
                    prop_assert!(w[0].is_neighbor(&w[1]));
                    if w[0] != s.saddle {
                        prop_assert!(f.get(&w[1]) >= f.get(&w[0]));
                    }
                }
                let mut uniq = s.path.clone();
                uniq.sort();
                uniq.dedup();
                prop_assert_eq!(uniq.len(), s.path.len());
                prop_assert!(s.path.iter().all(|c| f.get(c) >= 0.1));
            }
            let adj = structure_adjacency(&skel);
            for (i, j) in adj.edges() {
                prop_assert!(adj.contains(j, i));
                prop_assert!(i != j);
            }
        }
    }
}

//! Dense 2D/3D grids, coordinates and neighborhoods, plus GRD1/PGM file I/O.
//!
//! Layout is row-major with the last index fastest for every rank.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::de::{self, Deserializer, SeqAccess, Visitor};
use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid dims {0:?}: rank must be 2 or 3 and every dim >= 2")]
    InvalidDims(Vec<usize>),
    #[error("payload length mismatch: dims {dims:?} need {expected} values, found {found}")]
    PayloadLengthMismatch {
        dims: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("malformed header field `{field}`: {reason}")]
    MalformedHeader { field: &'static str, reason: String },
    #[error("unsupported dtype `{0}`")]
    UnsupportedDtype(String),
    #[error("coordinate {coord:?} out of bounds for dims {dims:?}")]
    OutOfBounds { coord: Vec<usize>, dims: Vec<usize> },
    #[error("dims mismatch: {left:?} vs {right:?}")]
    DimsMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A grid position. Components beyond `rank` are always zero, so the derived
/// ordering is the lexicographic order on the used components.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coord {
    rank: u8,
    idx: [usize; 3],
}

impl Coord {
    pub fn new(components: &[usize]) -> Self {
        assert!(
            components.len() == 2 || components.len() == 3,
            "coordinate rank must be 2 or 3"
        );
        let mut idx = [0; 3];
        idx[..components.len()].copy_from_slice(components);
        Coord {
            rank: components.len() as u8,
            idx,
        }
    }

    pub fn xy(r: usize, c: usize) -> Self {
        Coord::new(&[r, c])
    }

    pub fn xyz(d: usize, r: usize, c: usize) -> Self {
        Coord::new(&[d, r, c])
    }

    pub fn rank(&self) -> usize {
        self.rank as usize
    }

    pub fn components(&self) -> &[usize] {
        &self.idx[..self.rank as usize]
    }

    /// Squared Euclidean distance in pixel units.
    pub fn dist2(&self, other: &Coord) -> usize {
        self.components()
            .iter()
            .zip(other.components())
            .map(|(&a, &b)| a.abs_diff(b).pow(2))
            .sum()
    }

    pub fn chebyshev(&self, other: &Coord) -> usize {
        self.components()
            .iter()
            .zip(other.components())
            .map(|(&a, &b)| a.abs_diff(b))
            .max()
            .unwrap_or(0)
    }

    /// True when the two coordinates differ by at most one in every axis and
    /// are not equal.
    pub fn is_neighbor(&self, other: &Coord) -> bool {
        self.rank == other.rank && self != other && self.chebyshev(other) <= 1
    }
}

impl fmt::Debug for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.components())
    }
}

impl Serialize for Coord {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(self.rank()))?;
        for c in self.components() {
            seq.serialize_element(c)?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for Coord {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct CoordVisitor;
        impl<'de> Visitor<'de> for CoordVisitor {
            type Value = Coord;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an array of 2 or 3 non-negative integers")
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Coord, A::Error> {
                let mut v = Vec::with_capacity(3);
                while let Some(x) = seq.next_element::<usize>()? {
                    v.push(x);
                }
                if v.len() != 2 && v.len() != 3 {
                    return Err(de::Error::invalid_length(v.len(), &self));
                }
                Ok(Coord::new(&v))
            }
        }
        deserializer.deserialize_seq(CoordVisitor)
    }
}

/// Grid extent: rank 2 `(H, W)` or rank 3 `(D, H, W)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    rank: u8,
    dims: [usize; 3],
    strides: [usize; 3],
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.dims())
    }
}

impl Serialize for Shape {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.dims().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Shape {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let dims = Vec::<usize>::deserialize(deserializer)?;
        Shape::new(&dims).map_err(de::Error::custom)
    }
}

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self, GridError> {
        if !(dims.len() == 2 || dims.len() == 3) || dims.iter().any(|&d| d < 2) {
            return Err(GridError::InvalidDims(dims.to_vec()));
        }
        Ok(Self::new_unchecked(dims))
    }

    /// Shape without the `dim >= 2` rule, for internal windows and padded
    /// copies. Rank must still be 2 or 3.
    pub(crate) fn new_unchecked(dims: &[usize]) -> Self {
        let rank = dims.len();
        let mut d = [1; 3];
        d[..rank].copy_from_slice(dims);
        let mut strides = [0; 3];
        let mut acc = 1;
        for axis in (0..rank).rev() {
            strides[axis] = acc;
            acc *= d[axis];
        }
        Shape {
            rank: rank as u8,
            dims: d,
            strides,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank as usize
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.rank()]
    }

    pub fn len(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, c: &Coord) -> bool {
        c.rank() == self.rank() && c.components().iter().zip(self.dims()).all(|(&x, &d)| x < d)
    }

    /// Linear index of an in-bounds coordinate.
    #[inline]
    pub fn index(&self, c: &Coord) -> usize {
        debug_assert!(self.contains(c));
        c.idx[0] * self.strides[0] + c.idx[1] * self.strides[1] + c.idx[2] * self.strides[2]
    }

    #[inline]
    pub fn coord(&self, mut index: usize) -> Coord {
        let mut idx = [0; 3];
        for axis in 0..self.rank() {
            idx[axis] = index / self.strides[axis];
            index %= self.strides[axis];
        }
        Coord {
            rank: self.rank,
            idx,
        }
    }

    pub fn check(&self, c: &Coord) -> Result<(), GridError> {
        if self.contains(c) {
            Ok(())
        } else {
            Err(GridError::OutOfBounds {
                coord: c.components().to_vec(),
                dims: self.dims().to_vec(),
            })
        }
    }

    /// Full-connectivity neighbors (8 in 2D, 26 in 3D) in ascending
    /// lexicographic order.
    pub fn neighbors(&self, c: &Coord) -> Result<Vec<Coord>, GridError> {
        self.check(c)?;
        let mut out = Vec::with_capacity(26);
        self.for_each_neighbor(c, |n| out.push(n));
        Ok(out)
    }

    /// Visits the in-bounds full-connectivity neighbors of `c` in ascending
    /// lexicographic order without allocating.
    #[inline]
    pub fn for_each_neighbor(&self, c: &Coord, mut visit: impl FnMut(Coord)) {
        let rank = self.rank();
        let lo = |a: usize| c.idx[a].saturating_sub(1);
        let hi = |a: usize| (c.idx[a] + 1).min(self.dims[a] - 1);
        if rank == 2 {
            for r in lo(0)..=hi(0) {
                for q in lo(1)..=hi(1) {
                    if r != c.idx[0] || q != c.idx[1] {
                        visit(Coord {
                            rank: 2,
                            idx: [r, q, 0],
                        });
                    }
                }
            }
        } else {
            for d in lo(0)..=hi(0) {
                for r in lo(1)..=hi(1) {
                    for q in lo(2)..=hi(2) {
                        if d != c.idx[0] || r != c.idx[1] || q != c.idx[2] {
                            visit(Coord {
                                rank: 3,
                                idx: [d, r, q],
                            });
                        }
                    }
                }
            }
        }
    }

    /// Face-adjacent neighbors (4 in 2D, 6 in 3D).
    pub fn for_each_face_neighbor(&self, c: &Coord, mut visit: impl FnMut(Coord)) {
        for axis in 0..self.rank() {
            if c.idx[axis] > 0 {
                let mut n = *c;
                n.idx[axis] -= 1;
                visit(n);
            }
            if c.idx[axis] + 1 < self.dims[axis] {
                let mut n = *c;
                n.idx[axis] += 1;
                visit(n);
            }
        }
    }

    pub fn coords(&self) -> impl Iterator<Item = Coord> + '_ {
        (0..self.len()).map(move |i| self.coord(i))
    }
}

/// Neighborhood query on explicit dims.
pub fn neighbors(c: &Coord, dims: &[usize]) -> Result<Vec<Coord>, GridError> {
    Shape::new(dims)?.neighbors(c)
}

/// Dense grid with one value per voxel.
#[derive(Clone, PartialEq, Debug)]
pub struct Grid<T> {
    shape: Shape,
    data: Vec<T>,
}

/// Real-valued field (image, likelihood, perturbed likelihood).
pub type ScalarGrid<T> = Grid<T>;

/// Boolean mask (ground truth, segmentation, sampled structure).
pub type BinaryGrid = Grid<bool>;

impl<T: Copy> Grid<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self, GridError> {
        if data.len() != shape.len() {
            return Err(GridError::PayloadLengthMismatch {
                dims: shape.dims().to_vec(),
                expected: shape.len(),
                found: data.len(),
            });
        }
        Ok(Grid { shape, data })
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Grid {
            data: vec![value; shape.len()],
            shape,
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(Coord) -> T) -> Self {
        let data = (0..shape.len()).map(|i| f(shape.coord(i))).collect();
        Grid { shape, data }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_values(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: &Coord) -> T {
        self.data[self.shape.index(c)]
    }

    #[inline]
    pub fn set(&mut self, c: &Coord, v: T) {
        let i = self.shape.index(c);
        self.data[i] = v;
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid<U> {
        Grid {
            shape: self.shape,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    pub fn zip_map<U: Copy, V: Copy>(
        &self,
        other: &Grid<U>,
        mut f: impl FnMut(T, U) -> V,
    ) -> Result<Grid<V>, GridError> {
        self.same_dims(other)?;
        Ok(Grid {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn same_dims<U>(&self, other: &Grid<U>) -> Result<(), GridError> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(GridError::DimsMismatch {
                left: self.dims().to_vec(),
                right: other.shape.dims().to_vec(),
            })
        }
    }
}

impl<T: Real> Grid<T> {
    pub fn cast<U: Real>(&self) -> Grid<U> {
        self.map(|v| U::of(v.as_f64()))
    }

    pub fn threshold(&self, level: T) -> BinaryGrid {
        self.map(|v| v >= level)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl BinaryGrid {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn to_scalar<T: Real>(&self) -> Grid<T> {
        self.map(|b| if b { T::one() } else { T::zero() })
    }

    pub fn and(&self, other: &BinaryGrid) -> Result<BinaryGrid, GridError> {
        self.zip_map(other, |a, b| a && b)
    }

    pub fn or(&self, other: &BinaryGrid) -> Result<BinaryGrid, GridError> {
        self.zip_map(other, |a, b| a || b)
    }

    pub fn not(&self) -> BinaryGrid {
        self.map(|b| !b)
    }
}

/// Logs a warning when a likelihood leaves the nominal `[0, 1]` range.
/// Values are never clamped.
pub fn warn_if_outside_unit<T: Real>(name: &str, g: &Grid<T>) {
    let outside = g
        .values()
        .iter()
        .filter(|v| **v < T::zero() || **v > T::one())
        .count();
    if outside > 0 {
        log::warn!("{name}: {outside} values outside [0,1]");
    }
}

/// Contents of a GRD1 file, preserving its dtype for bit-exact round trips.
#[derive(Clone, Debug, PartialEq)]
pub enum GridFile {
    F32(Grid<f32>),
    U8(Grid<u8>),
}

#[derive(Serialize, Deserialize)]
struct Grd1Header {
    magic: String,
    dims: Vec<usize>,
    dtype: String,
}

pub const GRD1_MAGIC: &str = "GRD1";

fn header_line(dims: &[usize], dtype: &str) -> String {
    let h = Grd1Header {
        magic: GRD1_MAGIC.to_string(),
        dims: dims.to_vec(),
        dtype: dtype.to_string(),
    };
    let mut s = serde_json::to_string(&h).expect("header serializes");
    s.push('\n');
    s
}

impl GridFile {
    pub fn dims(&self) -> &[usize] {
        match self {
            GridFile::F32(g) => g.dims(),
            GridFile::U8(g) => g.dims(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            GridFile::F32(g) => {
                let mut out = header_line(g.dims(), "f32").into_bytes();
                out.reserve(g.len() * 4);
                for v in g.values() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out
            }
            GridFile::U8(g) => {
                let mut out = header_line(g.dims(), "u8").into_bytes();
                out.extend_from_slice(g.values());
                out
            }
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GridError> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| GridError::MalformedHeader {
                field: "header",
                reason: "missing newline terminator".into(),
            })?;
        let text = std::str::from_utf8(&bytes[..nl]).map_err(|e| GridError::MalformedHeader {
            field: "header",
            reason: e.to_string(),
        })?;
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| GridError::MalformedHeader {
                field: "header",
                reason: e.to_string(),
            })?;
        let magic = value.get("magic").and_then(|m| m.as_str());
        if magic != Some(GRD1_MAGIC) {
            return Err(GridError::MalformedHeader {
                field: "magic",
                reason: format!("expected \"{GRD1_MAGIC}\", found {:?}", value.get("magic")),
            });
        }
        let dims: Vec<usize> = value
            .get("dims")
            .and_then(|d| serde_json::from_value(d.clone()).ok())
            .ok_or_else(|| GridError::MalformedHeader {
                field: "dims",
                reason: "expected an array of non-negative integers".into(),
            })?;
        let dtype = value
            .get("dtype")
            .and_then(|d| d.as_str())
            .ok_or_else(|| GridError::MalformedHeader {
                field: "dtype",
                reason: "missing or not a string".into(),
            })?;
        let shape = Shape::new(&dims)?;
        let payload = &bytes[nl + 1..];
        match dtype {
            "f32" => {
                if payload.len() % 4 != 0 || payload.len() / 4 != shape.len() {
                    return Err(GridError::PayloadLengthMismatch {
                        dims,
                        expected: shape.len(),
                        found: payload.len() / 4,
                    });
                }
                let data = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                Ok(GridFile::F32(Grid::from_vec(shape, data)?))
            }
            "u8" => Ok(GridFile::U8(Grid::from_vec(shape, payload.to_vec())?)),
            other => Err(GridError::UnsupportedDtype(other.to_string())),
        }
    }

    /// Scalar view: f32 payloads convert directly, u8 payloads keep their
    /// integer value.
    pub fn into_scalar<T: Real>(self) -> Grid<T> {
        match self {
            GridFile::F32(g) => g.map(|v| T::of(v as f64)),
            GridFile::U8(g) => g.map(|v| T::of(v as f64)),
        }
    }

    /// Mask view: nonzero (u8) or `>= 0.5` (f32) is foreground.
    pub fn into_binary(self) -> BinaryGrid {
        match self {
            GridFile::F32(g) => g.map(|v| v >= 0.5),
            GridFile::U8(g) => g.map(|v| v != 0),
        }
    }
}

pub fn save_grid(file: &GridFile, path: impl AsRef<Path>) -> Result<(), GridError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&file.to_bytes())?;
    Ok(())
}

pub fn save_scalar<T: Real>(g: &Grid<T>, path: impl AsRef<Path>) -> Result<(), GridError> {
    save_grid(&GridFile::F32(g.map(|v| v.as_f64() as f32)), path)
}

pub fn save_binary(g: &BinaryGrid, path: impl AsRef<Path>) -> Result<(), GridError> {
    save_grid(&GridFile::U8(g.map(u8::from)), path)
}

/// Reads a GRD1 file, or a binary PGM (P5) / PPM (P6) for 2D scalar input.
pub fn load_grid(path: impl AsRef<Path>) -> Result<GridFile, GridError> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        return Ok(GridFile::F32(read_pnm(&bytes)?));
    }
    GridFile::from_bytes(&bytes)
}

pub fn load_scalar<T: Real>(path: impl AsRef<Path>) -> Result<Grid<T>, GridError> {
    Ok(load_grid(path)?.into_scalar())
}

pub fn load_binary(path: impl AsRef<Path>) -> Result<BinaryGrid, GridError> {
    Ok(load_grid(path)?.into_binary())
}

fn pnm_token(reader: &mut impl BufRead, field: &'static str) -> Result<String, GridError> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if reader.read(&mut byte)? == 0 {
            break;
        }
        let b = byte[0];
        if b == b'#' && tok.is_empty() {
            let mut skip = Vec::new();
            reader.read_until(b'\n', &mut skip)?;
            continue;
        }
        if b.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(b);
    }
    if tok.is_empty() {
        return Err(GridError::MalformedHeader {
            field,
            reason: "unexpected end of header".into(),
        });
    }
    String::from_utf8(tok).map_err(|e| GridError::MalformedHeader {
        field,
        reason: e.to_string(),
    })
}

fn pnm_number(reader: &mut impl BufRead, field: &'static str) -> Result<usize, GridError> {
    let t = pnm_token(reader, field)?;
    t.parse().map_err(|_| GridError::MalformedHeader {
        field,
        reason: format!("not an integer: {t:?}"),
    })
}

/// Binary PGM/PPM. Samples map to `v / maxval`; color is reduced to
/// luminance `0.299 R + 0.587 G + 0.114 B`.
fn read_pnm(bytes: &[u8]) -> Result<Grid<f32>, GridError> {
    let mut reader = BufReader::new(bytes);
    let magic = pnm_token(&mut reader, "magic")?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(GridError::MalformedHeader {
                field: "magic",
                reason: format!("unsupported PNM type {other}"),
            })
        }
    };
    let width = pnm_number(&mut reader, "width")?;
    let height = pnm_number(&mut reader, "height")?;
    let maxval = pnm_number(&mut reader, "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(GridError::MalformedHeader {
            field: "maxval",
            reason: format!("{maxval} not in 1..=65535"),
        });
    }
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    let bps = if maxval > 255 { 2 } else { 1 };
    let shape = Shape::new(&[height, width])?;
    let expected = shape.len() * channels * bps;
    if payload.len() < expected {
        return Err(GridError::PayloadLengthMismatch {
            dims: vec![height, width],
            expected: shape.len(),
            found: payload.len() / (channels * bps),
        });
    }
    let sample = |i: usize| -> f32 {
        let v = if bps == 1 {
            payload[i] as f32
        } else {
            u16::from_be_bytes([payload[2 * i], payload[2 * i + 1]]) as f32
        };
        v / maxval as f32
    };
    let data = (0..shape.len())
        .map(|p| {
            if channels == 1 {
                sample(p)
            } else {
                0.299 * sample(3 * p) + 0.587 * sample(3 * p + 1) + 0.114 * sample(3 * p + 2)
            }
        })
        .collect();
    Grid::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c2(r: usize, c: usize) -> Coord {
        Coord::xy(r, c)
    }

    #[test]
    fn corner_has_three_neighbors_in_order() {
        let n = neighbors(&c2(0, 0), &[3, 3]).unwrap();
        assert_eq!(n, vec![c2(0, 1), c2(1, 0), c2(1, 1)]);
    }

    #[test]
    fn interior_counts() {
        assert_eq!(neighbors(&c2(1, 1), &[3, 3]).unwrap().len(), 8);
        assert_eq!(
            neighbors(&Coord::xyz(1, 1, 1), &[3, 3, 3]).unwrap().len(),
            26
        );
    }

    #[test]
    fn out_of_bounds_is_an_error() {
        assert!(matches!(
            neighbors(&c2(3, 0), &[3, 3]),
            Err(GridError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn neighbors_sorted_lexicographically() {
        let n = neighbors(&Coord::xyz(1, 2, 0), &[3, 4, 2]).unwrap();
        let mut sorted = n.clone();
        sorted.sort();
        assert_eq!(n, sorted);
    }

    #[test]
    fn rejects_degenerate_dims() {
        assert!(Shape::new(&[1, 5]).is_err());
        assert!(Shape::new(&[4]).is_err());
        assert!(Shape::new(&[2, 2, 2, 2]).is_err());
    }

    #[test]
    fn payload_mismatch_named() {
        let mut bytes = header_line(&[4, 4], "f32").into_bytes();
        bytes.extend(std::iter::repeat(0u8).take(15 * 4));
        let err = GridFile::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("payload length mismatch"), "{err}");
    }

    #[test]
    fn header_errors_are_distinct() {
        let bad_magic = b"{\"magic\":\"GRD2\",\"dims\":[2,2],\"dtype\":\"u8\"}\n\0\0\0\0";
        assert!(matches!(
            GridFile::from_bytes(bad_magic),
            Err(GridError::MalformedHeader { field: "magic", .. })
        ));
        let bad_dtype = b"{\"magic\":\"GRD1\",\"dims\":[2,2],\"dtype\":\"f16\"}\n\0\0\0\0";
        assert!(matches!(
            GridFile::from_bytes(bad_dtype),
            Err(GridError::UnsupportedDtype(_))
        ));
        let bad_dims = b"{\"magic\":\"GRD1\",\"dims\":\"x\",\"dtype\":\"u8\"}\n";
        assert!(matches!(
            GridFile::from_bytes(bad_dims),
            Err(GridError::MalformedHeader { field: "dims", .. })
        ));
        assert!(GridFile::from_bytes(b"{}").is_err());
    }

    #[test]
    fn header_is_exact_json_line() {
        let g = GridFile::U8(Grid::filled(Shape::new(&[2, 3]).unwrap(), 1u8));
        let bytes = g.to_bytes();
        let expected = b"{\"magic\":\"GRD1\",\"dims\":[2,3],\"dtype\":\"u8\"}\n";
        assert_eq!(&bytes[..expected.len()], expected);
        assert_eq!(bytes.len(), expected.len() + 6);
    }

    #[test]
    fn pgm_maps_to_unit_range() {
        let mut bytes = b"P5\n# comment\n2 2\n255\n".to_vec();
        bytes.extend([0u8, 255, 51, 102]);
        let g = read_pnm(&bytes).unwrap();
        assert_eq!(g.dims(), &[2, 2]);
        assert_eq!(g.values(), &[0.0, 1.0, 0.2, 0.4]);
    }

    #[test]
    fn ppm_reduced_to_luminance() {
        let mut bytes = b"P6 2 2 255 ".to_vec();
        bytes.extend([255u8, 0, 0, 0, 255, 0, 0, 0, 255, 255, 255, 255]);
        let g = read_pnm(&bytes).unwrap();
        let v = g.values();
        assert!((v[0] - 0.299).abs() < 1e-6);
        assert!((v[1] - 0.587).abs() < 1e-6);
        assert!((v[2] - 0.114).abs() < 1e-6);
        assert!((v[3] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn file_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.grd");
        let g = Grid::from_fn(Shape::new(&[3, 4, 5]).unwrap(), |c| {
            c.components().iter().sum::<usize>() as f32 * 0.1 - 0.3
        });
        save_grid(&GridFile::F32(g.clone()), &path).unwrap();
        assert_eq!(load_grid(&path).unwrap(), GridFile::F32(g));
    }

    fn arb_coord_in(dims: Vec<usize>) -> impl Strategy<Value = (Vec<usize>, Coord)> {
        let comps: Vec<_> = dims.iter().map(|&d| 0..d).collect();
        comps.prop_map(move |c| (dims.clone(), Coord::new(&c)))
    }

    fn arb_dims() -> impl Strategy<Value = Vec<usize>> {
        prop_oneof![
            prop::collection::vec(2usize..7, 2),
            prop::collection::vec(2usize..5, 3)
        ]
    }

    proptest! {
        #[test]
        fn neighbor_relation_is_symmetric((dims, c) in arb_dims().prop_flat_map(arb_coord_in)) {
            let shape = Shape::new(&dims).unwrap();
            for n in shape.neighbors(&c).unwrap() {
                prop_assert!(shape.neighbors(&n).unwrap().contains(&c));
                prop_assert!(c.is_neighbor(&n));
            }
            let interior = c.components().iter().zip(&dims).all(|(&x, &d)| x > 0 && x + 1 < d);
            if interior {
                prop_assert_eq!(shape.neighbors(&c).unwrap().len(), 3usize.pow(dims.len() as u32) - 1);
            }
        }

        #[test]
        fn grd1_round_trip_is_bit_exact(
            dims in arb_dims(),
            seed in any::<u64>(),
        ) {
            let shape = Shape::new(&dims).unwrap();
            let mut x = seed | 1;
            let data: Vec<f32> = (0..shape.len()).map(|_| {
                x ^= x << 13; x ^= x >> 7; x ^= x << 17;
                f32::from_bits(x as u32)
            }).collect();
            let file = GridFile::F32(Grid::from_vec(shape, data).unwrap());
            let bytes = file.to_bytes();
            let back = GridFile::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}

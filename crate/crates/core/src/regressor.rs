//! Joint structure regressor.
//!
//! Per node, a two-layer convolutional encoder reads the stacked
//! `[image, likelihood, mask]` crops, global max pooling reduces each channel
//! to one value and the structure's persistence is appended. Three
//! graph-convolution layers with symmetric normalization
//! `D^-1/2 (A + I) D^-1/2` mix information between overlapping structures,
//! and two one-unit graph-convolution heads emit `p_hat` and the log
//! variance `s`.
//!
//! Gradients are derived by hand for this fixed stack. Max pooling routes
//! each channel's gradient to a single location, so the encoder backward
//! pass only touches the receptive fields of the pooled maxima.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grids::{BinaryGrid, Grid};
use crate::morse::{Adjacency, MorseSkeleton};
use crate::probdmt::{sample_skeleton, SamplerConfig};
use crate::rng;
use crate::scalar::Real;
use crate::structgraph::{GraphError, GraphTemplate, StructureGraph, DEFAULT_BOX};

pub const IN_CHANNELS: usize = 3;
pub const CONV1_OUT: usize = 24;
pub const CONV2_OUT: usize = 32;
pub const GCN_WIDTHS: [usize; 4] = [CONV2_OUT + 1, 32, 64, 32];
pub const DROPOUT_RATE: f64 = 0.2;

const NONE: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum RegressorError {
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("graph rank {graph} does not match parameter rank {params}")]
    RankMismatch { graph: usize, params: usize },
    #[error("{0} labels for {1} nodes")]
    LabelCount(usize, usize),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Weight matrix plus bias.
///
/// Convolution weights are stored `[out, in * taps]`; dense graph weights
/// are stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Layer<T> {
    fn zeros(rows: usize, cols: usize, bias: usize) -> Self {
        Layer {
            weight: Array2::zeros((rows, cols)),
            bias: Array1::zeros(bias),
        }
    }

    fn he_uniform(rows: usize, cols: usize, bias: usize, fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        Layer {
            weight: Array2::from_shape_fn((rows, cols), |_| T::of(rng.random_range(-bound..bound))),
            bias: Array1::zeros(bias),
        }
    }
}

/// All trainable parameters; also used as the gradient and optimizer-moment
/// container.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressorParams<T> {
    pub rank: usize,
    pub conv1: Layer<T>,
    pub conv2: Layer<T>,
    pub gcn: [Layer<T>; 3],
    pub head_p: Layer<T>,
    pub head_s: Layer<T>,
}

pub const TENSOR_NAMES: [&str; 14] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "gcn1.weight",
    "gcn1.bias",
    "gcn2.weight",
    "gcn2.bias",
    "gcn3.weight",
    "gcn3.bias",
    "head_p.weight",
    "head_p.bias",
    "head_s.weight",
    "head_s.bias",
];

fn taps(rank: usize) -> usize {
    3usize.pow(rank as u32)
}

impl<T: Real> RegressorParams<T> {
    pub fn zeros(rank: usize) -> Self {
        let k = taps(rank);
        RegressorParams {
            rank,
            conv1: Layer::zeros(CONV1_OUT, IN_CHANNELS * k, CONV1_OUT),
            conv2: Layer::zeros(CONV2_OUT, CONV1_OUT * k, CONV2_OUT),
            gcn: [0, 1, 2].map(|l| Layer::zeros(GCN_WIDTHS[l], GCN_WIDTHS[l + 1], GCN_WIDTHS[l + 1])),
            head_p: Layer::zeros(GCN_WIDTHS[3], 1, 1),
            head_s: Layer::zeros(GCN_WIDTHS[3], 1, 1),
        }
    }

    /// He-uniform (fan-in) weights, zero biases.
    pub fn init(rank: usize, seed: u64) -> Self {
        let k = taps(rank);
        let mut r = rng::stream(seed, &[0x494e_4954]);
        let conv1 = Layer::he_uniform(CONV1_OUT, IN_CHANNELS * k, CONV1_OUT, IN_CHANNELS * k, &mut r);
        let conv2 = Layer::he_uniform(CONV2_OUT, CONV1_OUT * k, CONV2_OUT, CONV1_OUT * k, &mut r);
        let gcn = [0, 1, 2].map(|l| {
            let (i, o) = (GCN_WIDTHS[l], GCN_WIDTHS[l + 1]);
            Layer::he_uniform(i, o, o, i, &mut r)
        });
        let head_p = Layer::he_uniform(GCN_WIDTHS[3], 1, 1, GCN_WIDTHS[3], &mut r);
        let head_s = Layer::he_uniform(GCN_WIDTHS[3], 1, 1, GCN_WIDTHS[3], &mut r);
        RegressorParams {
            rank,
            conv1,
            conv2,
            gcn,
            head_p,
            head_s,
        }
    }

    fn layers(&self) -> [&Layer<T>; 7] {
        [
            &self.conv1,
            &self.conv2,
            &self.gcn[0],
            &self.gcn[1],
            &self.gcn[2],
            &self.head_p,
            &self.head_s,
        ]
    }

    fn layers_mut(&mut self) -> [&mut Layer<T>; 7] {
        let [g0, g1, g2] = &mut self.gcn;
        [
            &mut self.conv1,
            &mut self.conv2,
            g0,
            g1,
            g2,
            &mut self.head_p,
            &mut self.head_s,
        ]
    }

    /// Tensors in declaration order: `(name, shape, values)`.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[T])> {
        let mut out = Vec::with_capacity(14);
        for (k, layer) in self.layers().into_iter().enumerate() {
            out.push((
                TENSOR_NAMES[2 * k],
                layer.weight.shape().to_vec(),
                layer.weight.as_slice().expect("standard layout"),
            ));
            out.push((
                TENSOR_NAMES[2 * k + 1],
                layer.bias.shape().to_vec(),
                layer.bias.as_slice().expect("standard layout"),
            ));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(14);
        for layer in self.layers_mut() {
            out.push(layer.weight.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> RegressorParams<U> {
        let c = |l: &Layer<T>| Layer {
            weight: l.weight.mapv(|v| U::of(v.as_f64())),
            bias: l.bias.mapv(|v| U::of(v.as_f64())),
        };
        RegressorParams {
            rank: self.rank,
            conv1: c(&self.conv1),
            conv2: c(&self.conv2),
            gcn: [c(&self.gcn[0]), c(&self.gcn[1]), c(&self.gcn[2])],
            head_p: c(&self.head_p),
            head_s: c(&self.head_s),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.2.iter().all(|v| v.is_finite()))
    }

}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dropout {
    Off,
    Seeded(u64),
}

impl Dropout {
    fn scale<T: Real>(&self) -> T {
        match self {
            Dropout::Off => T::one(),
            Dropout::Seeded(_) => T::of(1.0 / (1.0 - DROPOUT_RATE)),
        }
    }

    /// Applies relu then an inverted-dropout mask drawn from the stream
    /// identified by `counters`.
    fn relu_drop<T: Real>(&self, data: &mut [T], counters: &[u64]) {
        match *self {
            Dropout::Off => data.iter_mut().for_each(|v| {
                if *v < T::zero() {
                    *v = T::zero()
                }
            }),
            Dropout::Seeded(seed) => {
                let mut r = rng::stream(seed, counters);
                let keep_below = ((1.0 - DROPOUT_RATE) * 4_294_967_296.0) as u64;
                let scale = self.scale::<T>();
                for v in data.iter_mut() {
                    let keep = (r.next_u32() as u64) < keep_below;
                    *v = if keep && *v > T::zero() { *v * scale } else { T::zero() };
                }
            }
        }
    }
}

/// Per-structure output of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodePrediction<T> {
    pub p_hat: T,
    /// Log variance.
    pub s: T,
}

impl<T: Real> NodePrediction<T> {
    pub fn variance(&self) -> T {
        self.s.exp()
    }
}

/// Gather table for 3^rank convolution with zero padding 1 on a
/// `box^rank` window: `table[k * P + p]` is the input position read by tap
/// `k` at output position `p`, or `NONE`.
#[derive(Clone, Debug)]
struct ConvGeometry {
    positions: usize,
    taps: usize,
    table: Vec<u32>,
}

impl ConvGeometry {
    fn new(rank: usize, box_size: usize) -> Self {
        let positions = box_size.pow(rank as u32);
        let k = taps(rank);
        let mut table = vec![NONE; k * positions];
        let b = box_size as isize;
        for tap in 0..k {
            let mut off = [0isize; 3];
            let mut t = tap;
            for a in (0..rank).rev() {
                off[a] = (t % 3) as isize - 1;
                t /= 3;
            }
            for p in 0..positions {
                let mut rem = p;
                let mut src = 0isize;
                let mut stride = 1isize;
                let mut inside = true;
                for a in (0..rank).rev() {
                    let x = (rem % box_size) as isize + off[a];
                    rem /= box_size;
                    if x < 0 || x >= b {
                        inside = false;
                    }
                    src += x * stride;
                    stride *= b;
                }
                if inside {
                    table[tap * positions + p] = src as u32;
                }
            }
        }
        ConvGeometry {
            positions,
            taps: k,
            table,
        }
    }

    #[inline]
    fn source(&self, tap: usize, p: usize) -> u32 {
        self.table[tap * self.positions + p]
    }

    /// `[channels, P]` → `[channels * taps, P]`.
    fn im2col<T: Real>(&self, input: &Array2<T>) -> Array2<T> {
        let channels = input.nrows();
        let p_len = self.positions;
        let mut cols = Array2::zeros((channels * self.taps, p_len));
        let src = input.as_slice().expect("standard layout");
        let dst = cols.as_slice_mut().expect("standard layout");
        for c in 0..channels {
            let row_in = &src[c * p_len..(c + 1) * p_len];
            for k in 0..self.taps {
                let row_out = &mut dst[(c * self.taps + k) * p_len..(c * self.taps + k + 1) * p_len];
                let table = &self.table[k * p_len..(k + 1) * p_len];
                for (o, &t) in row_out.iter_mut().zip(table) {
                    if t != NONE {
                        *o = row_in[t as usize];
                    }
                }
            }
        }
        cols
    }
}

/// Encoder activations kept for the backward pass.
#[derive(Clone, Debug)]
struct EncoderTrace<T> {
    input: Array2<T>,
    act1: Array2<T>,
    argmax: [usize; CONV2_OUT],
    pooled: [T; CONV2_OUT],
}

fn node_input<T: Real>(node: &crate::structgraph::NodeInput<T>) -> Array2<T> {
    let p = node.x_crop.len();
    let mut input = Array2::zeros((IN_CHANNELS, p));
    input.row_mut(0).as_slice_mut().unwrap().copy_from_slice(node.x_crop.values());
    input.row_mut(1).as_slice_mut().unwrap().copy_from_slice(node.f_crop.values());
    for (o, &b) in input.row_mut(2).iter_mut().zip(node.m_crop.values()) {
        *o = if b { T::one() } else { T::zero() };
    }
    input
}

fn conv<T: Real>(layer: &Layer<T>, cols: &Array2<T>) -> Array2<T> {
    let mut z = layer.weight.dot(cols);
    for (mut row, &b) in z.axis_iter_mut(Axis(0)).zip(&layer.bias) {
        row.mapv_inplace(|v| v + b);
    }
    z
}

fn encode<T: Real>(
    params: &RegressorParams<T>,
    geom: &ConvGeometry,
    input: Array2<T>,
    dropout: Dropout,
    node: usize,
) -> EncoderTrace<T> {
    let cols1 = geom.im2col(&input);
    let mut act1 = conv(&params.conv1, &cols1);
    dropout.relu_drop(act1.as_slice_mut().unwrap(), &[1, node as u64]);
    let cols2 = geom.im2col(&act1);
    let mut act2 = conv(&params.conv2, &cols2);
    dropout.relu_drop(act2.as_slice_mut().unwrap(), &[2, node as u64]);
    let mut argmax = [0usize; CONV2_OUT];
    let mut pooled = [T::zero(); CONV2_OUT];
    for (c, row) in act2.axis_iter(Axis(0)).enumerate() {
        let mut best = 0;
        let mut best_v = row[0];
        for (p, &v) in row.iter().enumerate().skip(1) {
            if v > best_v {
                best_v = v;
                best = p;
            }
        }
        argmax[c] = best;
        pooled[c] = best_v;
    }
    EncoderTrace {
        input,
        act1,
        argmax,
        pooled,
    }
}

/// Gradients of one node's encoder given `d pooled`.
fn encode_backward<T: Real>(
    params: &RegressorParams<T>,
    geom: &ConvGeometry,
    trace: &EncoderTrace<T>,
    d_pooled: &[T],
    scale: T,
) -> (Layer<T>, Layer<T>) {
    let k_taps = geom.taps;
    let p_len = geom.positions;
    let mut g1 = Layer::zeros(CONV1_OUT, IN_CHANNELS * k_taps, CONV1_OUT);
    let mut g2 = Layer::zeros(CONV2_OUT, CONV1_OUT * k_taps, CONV2_OUT);
    let act1 = trace.act1.as_slice().unwrap();
    let w2 = params.conv2.weight.as_slice().unwrap();
    let mut d_act1 = vec![T::zero(); CONV1_OUT * p_len];
    let mut touched = vec![false; p_len];
    let mut touched_list = Vec::new();
    {
        let gw2 = g2.weight.as_slice_mut().unwrap();
        for c in 0..CONV2_OUT {
            if !(trace.pooled[c] > T::zero()) || d_pooled[c] == T::zero() {
                continue;
            }
            let dz = d_pooled[c] * scale;
            g2.bias[c] += dz;
            let a = trace.argmax[c];
            for k in 0..k_taps {
                let src = geom.source(k, a);
                if src == NONE {
                    continue;
                }
                let src = src as usize;
                if !touched[src] {
                    touched[src] = true;
                    touched_list.push(src);
                }
                for ci in 0..CONV1_OUT {
                    let j = ci * k_taps + k;
                    gw2[c * CONV1_OUT * k_taps + j] += dz * act1[ci * p_len + src];
                    d_act1[ci * p_len + src] += dz * w2[c * CONV1_OUT * k_taps + j];
                }
            }
        }
    }
    touched_list.sort_unstable();
    let input = trace.input.as_slice().unwrap();
    let gw1 = g1.weight.as_slice_mut().unwrap();
    for &q in &touched_list {
        for ci in 0..CONV1_OUT {
            if !(act1[ci * p_len + q] > T::zero()) {
                continue;
            }
            let dz = d_act1[ci * p_len + q] * scale;
            if dz == T::zero() {
                continue;
            }
            g1.bias[ci] += dz;
            for cin in 0..IN_CHANNELS {
                for k in 0..k_taps {
                    let src = geom.source(k, q);
                    if src != NONE {
                        gw1[ci * IN_CHANNELS * k_taps + cin * k_taps + k] +=
                            dz * input[cin * p_len + src as usize];
                    }
                }
            }
        }
    }
    (g1, g2)
}

/// Dense `D^-1/2 (A + I) D^-1/2`.
pub fn normalized_adjacency<T: Real>(adj: &Adjacency) -> Array2<T> {
    let n = adj.len();
    let deg: Vec<f64> = (0..n).map(|i| 1.0 + adj.degree(i) as f64).collect();
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        a[[i, i]] = T::of(1.0 / deg[i]);
        for &j in adj.neighbors(i) {
            a[[i, j]] = T::of(1.0 / (deg[i] * deg[j]).sqrt());
        }
    }
    a
}

/// Full forward state.
struct Trace<T> {
    encoders: Vec<EncoderTrace<T>>,
    a_hat: Array2<T>,
    /// Aggregated inputs `A_hat * H` of the three hidden layers and the heads.
    mixed: Vec<Array2<T>>,
    /// Hidden activations after relu and dropout.
    hidden: Vec<Array2<T>>,
    preds: Vec<NodePrediction<T>>,
}

fn check_graph<T: Real>(params: &RegressorParams<T>, graph: &StructureGraph<T>) -> Result<(), RegressorError> {
    if graph.is_empty() {
        return Err(RegressorError::EmptyGraph);
    }
    if graph.rank() != params.rank {
        return Err(RegressorError::RankMismatch {
            graph: graph.rank(),
            params: params.rank,
        });
    }
    Ok(())
}

fn forward_trace<T: Real>(
    params: &RegressorParams<T>,
    graph: &StructureGraph<T>,
    dropout: Dropout,
) -> Result<Trace<T>, RegressorError> {
    check_graph(params, graph)?;
    let geom = ConvGeometry::new(params.rank, graph.box_size());
    let encoders: Vec<EncoderTrace<T>> = graph
        .nodes
        .par_iter()
        .enumerate()
        .map(|(i, node)| encode(params, &geom, node_input(node), dropout, i))
        .collect();
    let n = graph.len();
    let mut h0 = Array2::zeros((n, GCN_WIDTHS[0]));
    for (i, (enc, node)) in encoders.iter().zip(&graph.nodes).enumerate() {
        for c in 0..CONV2_OUT {
            h0[[i, c]] = enc.pooled[c];
        }
        h0[[i, CONV2_OUT]] = node.persistence;
    }
    let a_hat = normalized_adjacency::<T>(&graph.adjacency);
    let mut mixed = Vec::with_capacity(4);
    let mut hidden = vec![h0];
    for (l, layer) in params.gcn.iter().enumerate() {
        let m = a_hat.dot(hidden.last().unwrap());
        let mut z = m.dot(&layer.weight) + &layer.bias;
        dropout.relu_drop(z.as_slice_mut().unwrap(), &[10 + l as u64]);
        mixed.push(m);
        hidden.push(z);
    }
    let m = a_hat.dot(hidden.last().unwrap());
    let p = m.dot(&params.head_p.weight);
    let s = m.dot(&params.head_s.weight);
    mixed.push(m);
    let preds = (0..n)
        .map(|i| NodePrediction {
            p_hat: p[[i, 0]] + params.head_p.bias[0],
            s: s[[i, 0]] + params.head_s.bias[0],
        })
        .collect();
    Ok(Trace {
        encoders,
        a_hat,
        mixed,
        hidden,
        preds,
    })
}

pub fn forward<T: Real>(
    params: &RegressorParams<T>,
    graph: &StructureGraph<T>,
    dropout: Dropout,
) -> Result<Vec<NodePrediction<T>>, RegressorError> {
    Ok(forward_trace(params, graph, dropout)?.preds)
}

/// Attenuation loss: mean over nodes of `0.5 (p - z)^2 exp(-s) + 0.5 s`.
pub fn loss_uq<T: Real>(preds: &[NodePrediction<T>], labels: &[T]) -> Result<T, RegressorError> {
    if preds.len() != labels.len() {
        return Err(RegressorError::LabelCount(labels.len(), preds.len()));
    }
    if preds.is_empty() {
        return Err(RegressorError::EmptyGraph);
    }
    let half = T::of(0.5);
    let total: T = preds
        .iter()
        .zip(labels)
        .map(|(p, &z)| half * (p.p_hat - z).powi(2) * (-p.s).exp() + half * p.s)
        .sum();
    Ok(total / T::of(preds.len() as f64))
}

/// Loss and its gradient with respect to every parameter. Dropout masks are
/// regenerated from the same seed and treated as constants.
pub fn backward<T: Real>(
    params: &RegressorParams<T>,
    graph: &StructureGraph<T>,
    labels: &[T],
    dropout: Dropout,
) -> Result<(T, RegressorParams<T>), RegressorError> {
    let trace = forward_trace(params, graph, dropout)?;
    let loss = loss_uq(&trace.preds, labels)?;
    let n = graph.len();
    let inv_n = T::of(1.0 / n as f64);
    let half = T::of(0.5);
    let scale = dropout.scale::<T>();
    let mut grads = RegressorParams::zeros(params.rank);

    let mut d_p = Array2::zeros((n, 1));
    let mut d_s = Array2::zeros((n, 1));
    for (i, (pred, &z)) in trace.preds.iter().zip(labels).enumerate() {
        let inv_var = (-pred.s).exp();
        let r = pred.p_hat - z;
        d_p[[i, 0]] = r * inv_var * inv_n;
        d_s[[i, 0]] = (half - half * r * r * inv_var) * inv_n;
    }
    let m_head = &trace.mixed[3];
    grads.head_p.weight = m_head.t().dot(&d_p);
    grads.head_p.bias[0] = d_p.sum();
    grads.head_s.weight = m_head.t().dot(&d_s);
    grads.head_s.bias[0] = d_s.sum();
    let d_mixed = d_p.dot(&params.head_p.weight.t()) + d_s.dot(&params.head_s.weight.t());
    // A_hat is symmetric.
    let mut d_hidden = trace.a_hat.dot(&d_mixed);

    for l in (0..3).rev() {
        let out = &trace.hidden[l + 1];
        let mut d_z = d_hidden;
        Zip::from(&mut d_z).and(out).for_each(|d, &h| {
            *d = if h > T::zero() { *d * scale } else { T::zero() };
        });
        grads.gcn[l].weight = trace.mixed[l].t().dot(&d_z);
        grads.gcn[l].bias = d_z.sum_axis(Axis(0));
        let d_m = d_z.dot(&params.gcn[l].weight.t());
        d_hidden = trace.a_hat.dot(&d_m);
    }

    let geom = ConvGeometry::new(params.rank, graph.box_size());
    let d_pool = d_hidden.slice(s![.., ..CONV2_OUT]).to_owned();
    let per_node: Vec<(Layer<T>, Layer<T>)> = trace
        .encoders
        .par_iter()
        .enumerate()
        .map(|(i, enc)| {
            let row = d_pool.row(i).to_vec();
            encode_backward(params, &geom, enc, &row, scale)
        })
        .collect();
    for (g1, g2) in per_node {
        grads.conv1.weight += &g1.weight;
        grads.conv1.bias += &g1.bias;
        grads.conv2.weight += &g2.weight;
        grads.conv2.bias += &g2.bias;
    }
    Ok((loss, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub box_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            epochs: 300,
            seed: 0,
            box_size: DEFAULT_BOX,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RegressorError> {
        if !(self.lr > 0.0) {
            return Err(RegressorError::InvalidConfig(format!("lr={} must be > 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(RegressorError::InvalidConfig("Adam moments must be in [0,1)".into()));
        }
        if self.box_size == 0 || self.box_size % 2 != 0 {
            return Err(RegressorError::InvalidConfig(format!(
                "box size {} must be even and positive",
                self.box_size
            )));
        }
        Ok(())
    }
}

/// Adam with optional L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    m: RegressorParams<T>,
    v: RegressorParams<T>,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl<T: Real> Adam<T> {
    pub fn new(rank: usize, cfg: &TrainConfig) -> Self {
        Adam {
            m: RegressorParams::zeros(rank),
            v: RegressorParams::zeros(rank),
            t: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut RegressorParams<T>, grads: &RegressorParams<T>) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.t));
        let c2 = T::of(1.0 - self.beta2.powi(self.t));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        let wd = T::of(self.weight_decay);
        let grads = grads.tensors();
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for (((p, &g), m), v) in p.iter_mut().zip(g.2).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g + wd * *p;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// One training case: likelihood, image, ground truth and its skeleton.
#[derive(Clone, Debug)]
pub struct TrainCase<S> {
    pub image: Grid<S>,
    pub likelihood: Grid<S>,
    pub gt: BinaryGrid,
    pub skeleton: MorseSkeleton<S>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: RegressorParams<T>,
    /// Mean attenuation loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Training loop: each epoch resamples every case's structures (run index =
/// epoch), rebuilds masks and soft labels, and takes one Adam step per case.
pub fn train<S: Real, T: Real>(
    corpus: &[TrainCase<S>],
    sampler: &SamplerConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, RegressorError> {
    cfg.validate()?;
    let usable: Vec<&TrainCase<S>> = corpus.iter().filter(|c| !c.skeleton.is_empty()).collect();
    if usable.is_empty() {
        return Err(RegressorError::EmptyCorpus);
    }
    let rank = usable[0].likelihood.rank();
    let templates: Vec<GraphTemplate<T>> = usable
        .iter()
        .map(|c| GraphTemplate::from_source(&c.skeleton, &c.image, &c.likelihood, cfg.box_size))
        .collect::<Result<_, _>>()?;
    let mut params = RegressorParams::<T>::init(rank, cfg.seed);
    let mut adam = Adam::new(rank, cfg);
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for (k, (case, template)) in usable.iter().zip(&templates).enumerate() {
            let samples = sample_skeleton(&case.skeleton, &case.likelihood, sampler, epoch as u64);
            let graph = template.instantiate(&samples, Some(&case.gt))?;
            let labels = graph.labels.clone().expect("gt supplied");
            let dropout = Dropout::Seeded(rng::mix(cfg.seed, &[epoch as u64, k as u64]));
            let (loss, grads) = backward(&params, &graph, &labels, dropout)?;
            adam.step(&mut params, &grads);
            epoch_loss += loss.as_f64();
        }
        let mean = epoch_loss / usable.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        loss_trace.push(mean);
    }
    Ok(TrainOutcome { params, loss_trace })
}

#[derive(Serialize, Deserialize)]
struct TensorSpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    magic: String,
    dtype: String,
    rank: usize,
    tensors: Vec<TensorSpec>,
}

pub const CHECKPOINT_MAGIC: &str = "CKPT";

/// Single header line (JSON manifest of tensor shapes) followed by all
/// tensors as little-endian f32 in declaration order.
pub fn checkpoint_bytes<T: Real>(params: &RegressorParams<T>) -> Vec<u8> {
    let tensors = params.tensors();
    let header = CheckpointHeader {
        magic: CHECKPOINT_MAGIC.into(),
        dtype: "f32".into(),
        rank: params.rank,
        tensors: tensors
            .iter()
            .map(|(n, s, _)| TensorSpec {
                name: n.to_string(),
                shape: s.clone(),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for (_, _, values) in tensors {
        for v in values {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn params_from_checkpoint<T: Real>(bytes: &[u8]) -> Result<RegressorParams<T>, RegressorError> {
    let bad = |m: String| RegressorError::Checkpoint(m);
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(format!("header: {e}")))?;
    if header.magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("magic {:?}", header.magic)));
    }
    if header.dtype != "f32" {
        return Err(bad(format!("unsupported dtype {}", header.dtype)));
    }
    if header.rank != 2 && header.rank != 3 {
        return Err(bad(format!("rank {}", header.rank)));
    }
    let mut params = RegressorParams::<T>::zeros(header.rank);
    let expected: Vec<(String, Vec<usize>)> = params
        .tensors()
        .iter()
        .map(|(n, s, _)| (n.to_string(), s.clone()))
        .collect();
    let found: Vec<(String, Vec<usize>)> =
        header.tensors.into_iter().map(|t| (t.name, t.shape)).collect();
    if found != expected {
        return Err(bad("tensor manifest does not match the architecture".into()));
    }
    let payload = &bytes[nl + 1..];
    if payload.len() != params.num_parameters() * 4 {
        return Err(bad(format!(
            "payload length mismatch: {} bytes for {} parameters",
            payload.len(),
            params.num_parameters()
        )));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = T::of(floats.next().expect("length checked") as f64);
        }
    }
    Ok(params)
}

pub fn save_checkpoint<T: Real>(params: &RegressorParams<T>, path: impl AsRef<Path>) -> Result<(), RegressorError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&checkpoint_bytes(params))?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<RegressorParams<T>, RegressorError> {
    params_from_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use crate::grids::{Coord, Shape};
    use crate::structgraph::NodeInput;

    /// Random graph with `n` nodes on `box^rank` crops and a random edge set.
    pub(crate) fn random_graph(n: usize, box_size: usize, rank: usize, seed: u64) -> StructureGraph<f64> {
        let mut r = rng::stream(seed, &[77]);
        let shape = Shape::new_unchecked(&vec![box_size; rank]);
        let nodes = (0..n)
            .map(|i| NodeInput {
                structure_id: i,
                x_crop: Grid::from_fn(shape, |_| r.random_range(0.0..1.0)),
                f_crop: Grid::from_fn(shape, |_| r.random_range(0.0..1.0)),
                m_crop: Grid::from_fn(shape, |_| r.random_bool(0.3)),
                persistence: r.random_range(0.0..0.8),
                center: Coord::new(&vec![0; rank]),
            })
            .collect();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if r.random_bool(0.4) {
                    edges.push((i, j));
                }
            }
        }
        let labels = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        StructureGraph {
            nodes,
            adjacency: Adjacency::from_edges(n, edges),
            labels: Some(labels),
        }
    }

    /// Central finite differences on a seeded subset of each tensor's
    /// entries. Returns the worst relative error per tensor, with relative
    /// error `|a - n| / max(|a|, |n|, 1e-6)`.
    pub(crate) fn gradient_check(
        params: &RegressorParams<f64>,
        graph: &StructureGraph<f64>,
        eps: f64,
        per_tensor: usize,
        seed: u64,
    ) -> Vec<(&'static str, f64)> {
        let labels = graph.labels.clone().unwrap();
        let (_, grads) = backward(params, graph, &labels, Dropout::Off).unwrap();
        let loss_at = |p: &RegressorParams<f64>| {
            loss_uq(&forward(p, graph, Dropout::Off).unwrap(), &labels).unwrap()
        };
        let mut r = rng::stream(seed, &[99]);
        let analytic = grads.tensors();
        let mut out = Vec::new();
        for (t, (name, _, values)) in analytic.iter().enumerate() {
            let len = values.len();
            let picks: Vec<usize> = if len <= per_tensor {
                (0..len).collect()
            } else {
                // Largest-magnitude entries plus a random spread.
                let mut by_mag: Vec<usize> = (0..len).collect();
                by_mag.sort_by(|&a, &b| values[b].abs().partial_cmp(&values[a].abs()).unwrap());
                let mut p: Vec<usize> = by_mag[..per_tensor / 2].to_vec();
                p.extend((0..per_tensor / 2).map(|_| r.random_range(0..len)));
                p
            };
            let mut worst = 0.0f64;
            for &i in &picks {
                // A probe that straddles a relu or max-pool kink is not a
                // derivative; a second, smaller step avoids it.
                let rel = [eps, eps / 10.0]
                    .iter()
                    .map(|&h| {
                        let mut plus = params.clone();
                        plus.tensors_mut()[t][i] += h;
                        let mut minus = params.clone();
                        minus.tensors_mut()[t][i] -= h;
                        let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                        let a = values[i];
                        (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6)
                    })
                    .fold(f64::INFINITY, f64::min);
                worst = worst.max(rel);
            }
            out.push((*name, worst));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;
    use crate::grids::{Coord, Shape};
    use crate::structgraph::NodeInput;

    fn single_node(box_size: usize) -> StructureGraph<f64> {
        let mut g = random_graph(1, box_size, 2, 5);
        g.adjacency = Adjacency::empty(1);
        g
    }

    #[test]
    fn loss_examples() {
        let p = |p_hat: f64, s: f64| NodePrediction { p_hat, s };
        assert_eq!(loss_uq(&[p(0.5, 0.0)], &[1.0]).unwrap(), 0.125);
        assert_eq!(loss_uq(&[p(0.3, 0.0), p(0.9, 0.0)], &[0.3, 0.9]).unwrap(), 0.0);
        assert_eq!(loss_uq(&[p(0.7, -2.0)], &[0.7]).unwrap(), -1.0);
        assert!(loss_uq(&[p(0.7, -2.0)], &[]).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let params = RegressorParams::<f64>::zeros(2);
        let g = random_graph(4, 8, 2, 1);
        for pred in forward(&params, &g, Dropout::Off).unwrap() {
            assert_eq!(pred.p_hat, 0.0);
            assert_eq!(pred.s, 0.0);
            assert_eq!(pred.variance(), 1.0);
        }
    }

    #[test]
    fn isolated_node_adjacency_is_identity() {
        let a = normalized_adjacency::<f64>(&Adjacency::empty(1));
        assert_eq!(a, Array2::from_elem((1, 1), 1.0));
        let a = normalized_adjacency::<f64>(&Adjacency::from_edges(3, [(0, 1)]));
        assert!((a[[0, 1]] - 0.5).abs() < 1e-15);
        assert_eq!(a[[2, 2]], 1.0);
        assert_eq!(a, a.t());
    }

    #[test]
    fn duplicated_isolated_nodes_agree() {
        let params = RegressorParams::<f64>::init(2, 3);
        let one = single_node(8);
        let mut two = one.clone();
        two.nodes.push(one.nodes[0].clone());
        two.adjacency = Adjacency::empty(2);
        let a = forward(&params, &one, Dropout::Off).unwrap();
        let b = forward(&params, &two, Dropout::Off).unwrap();
        assert_eq!(b[0], b[1]);
        assert_eq!(a[0], b[0]);
    }

    #[test]
    fn s_bias_gradient_is_half_with_zero_residual() {
        let mut params = RegressorParams::<f64>::init(2, 4);
        let g = random_graph(5, 8, 2, 2);
        let preds = forward(&params, &g, Dropout::Off).unwrap();
        let labels: Vec<f64> = preds.iter().map(|p| p.p_hat).collect();
        let (_, grads) = backward(&params, &g, &labels, Dropout::Off).unwrap();
        assert!((grads.head_s.bias[0] - 0.5).abs() < 1e-12);
        params.head_s.bias[0] = 3.0;
        let (_, grads) = backward(&params, &g, &labels, Dropout::Off).unwrap();
        assert!((grads.head_s.bias[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_features_zero_encoder_weight_gradient() {
        let params = RegressorParams::<f64>::init(2, 8);
        let mut g = random_graph(3, 8, 2, 3);
        for n in &mut g.nodes {
            n.x_crop.values_mut().fill(0.0);
            n.f_crop.values_mut().fill(0.0);
            n.m_crop.values_mut().fill(false);
        }
        let labels = g.labels.clone().unwrap();
        let (_, grads) = backward(&params, &g, &labels, Dropout::Off).unwrap();
        assert!(grads.conv1.weight.iter().all(|&v| v == 0.0));
        // Biases still move the activations, so later gradients survive.
        assert!(grads.gcn[0].bias.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..2 {
            let params = RegressorParams::<f64>::init(2, 10 + seed);
            let g = random_graph(5, 8, 2, 20 + seed);
            for (name, err) in gradient_check(&params, &g, 1e-4, 24, seed) {
                assert!(err < 1e-3, "{name}: {err}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_3d() {
        let params = RegressorParams::<f64>::init(3, 1);
        let g = random_graph(3, 4, 3, 7);
        for (name, err) in gradient_check(&params, &g, 1e-4, 12, 1) {
            assert!(err < 1e-3, "{name}: {err}");
        }
    }

    #[test]
    fn permutation_equivariance() {
        let params = RegressorParams::<f64>::init(2, 6);
        let g = random_graph(5, 8, 2, 9);
        let perm = [3, 0, 4, 1, 2];
        let mut inv = [0; 5];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let permuted = StructureGraph {
            nodes: perm.iter().map(|&o| g.nodes[o].clone()).collect(),
            adjacency: Adjacency::from_edges(5, g.adjacency.edges().map(|(a, b)| (inv[a], inv[b]))),
            labels: None,
        };
        let a = forward(&params, &g, Dropout::Off).unwrap();
        let b = forward(&params, &permuted, Dropout::Off).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            assert!((a[old].p_hat - b[new].p_hat).abs() < 1e-12);
            assert!((a[old].s - b[new].s).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_determinism() {
        let params = RegressorParams::<f32>::init(2, 6);
        let g = random_graph(4, 8, 2, 9);
        let g = StructureGraph {
            nodes: g
                .nodes
                .iter()
                .map(|n| NodeInput {
                    structure_id: n.structure_id,
                    x_crop: n.x_crop.cast(),
                    f_crop: n.f_crop.cast(),
                    m_crop: n.m_crop.clone(),
                    persistence: n.persistence as f32,
                    center: n.center,
                })
                .collect(),
            adjacency: g.adjacency,
            labels: None,
        };
        let off1 = forward(&params, &g, Dropout::Off).unwrap();
        assert_eq!(off1, forward(&params, &g, Dropout::Off).unwrap());
        let d1 = forward(&params, &g, Dropout::Seeded(5)).unwrap();
        assert_eq!(d1, forward(&params, &g, Dropout::Seeded(5)).unwrap());
        assert_ne!(d1, forward(&params, &g, Dropout::Seeded(6)).unwrap());
        assert!(d1.iter().all(|p| p.variance() > 0.0));
    }

    #[test]
    fn rank_mismatch_rejected() {
        let params = RegressorParams::<f64>::zeros(3);
        let g = random_graph(2, 8, 2, 1);
        assert!(matches!(
            forward(&params, &g, Dropout::Off),
            Err(RegressorError::RankMismatch { .. })
        ));
        let empty = StructureGraph::<f64> {
            nodes: vec![],
            adjacency: Adjacency::empty(0),
            labels: None,
        };
        assert!(matches!(
            forward(&RegressorParams::zeros(2), &empty, Dropout::Off),
            Err(RegressorError::EmptyGraph)
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let params = RegressorParams::<f32>::init(2, 42);
        let bytes = checkpoint_bytes(&params);
        assert_eq!(params_from_checkpoint::<f32>(&bytes).unwrap(), params);
        let wide: RegressorParams<f64> = params_from_checkpoint(&bytes).unwrap();
        assert_eq!(wide.cast::<f32>(), params);
        assert!(params_from_checkpoint::<f32>(&bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn conv_geometry_matches_direct_convolution() {
        let params = RegressorParams::<f64>::init(2, 2);
        let b = 5;
        let geom = ConvGeometry::new(2, b);
        let shape = Shape::new_unchecked(&[b, b]);
        let mut r = rng::stream(1, &[]);
        let input = Array2::from_shape_fn((3, b * b), |_| r.random_range(-1.0..1.0));
        let z = conv(&params.conv1, &geom.im2col(&input));
        for o in 0..CONV1_OUT {
            for p in 0..b * b {
                let c = shape.coord(p);
                let mut acc = params.conv1.bias[o];
                for ci in 0..3 {
                    for dr in 0..3 {
                        for dc in 0..3 {
                            let rr = c.components()[0] as isize + dr as isize - 1;
                            let cc = c.components()[1] as isize + dc as isize - 1;
                            if rr < 0 || cc < 0 || rr >= b as isize || cc >= b as isize {
                                continue;
                            }
                            let q = shape.index(&Coord::xy(rr as usize, cc as usize));
                            acc += params.conv1.weight[[o, ci * 9 + dr * 3 + dc]] * input[[ci, q]];
                        }
                    }
                }
                assert!((acc - z[[o, p]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut params = RegressorParams::<f64>::zeros(2);
        let mut grads = RegressorParams::<f64>::zeros(2);
        grads.head_p.bias[0] = 2.0;
        grads.head_s.bias[0] = -1.0;
        let mut adam = Adam::new(2, &TrainConfig::default());
        adam.step(&mut params, &grads);
        assert!((params.head_p.bias[0] + 1e-3).abs() < 1e-9);
        assert!((params.head_s.bias[0] - 1e-3).abs() < 1e-9);
        assert_eq!(params.conv1.weight[[0, 0]], 0.0);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let case = crate::synth::generate_case::<f64>(&Default::default()).unwrap();
        let skeleton = crate::morse::skeletonize(&case.likelihood, 0.01);
        let corpus = vec![TrainCase {
            image: case.image,
            likelihood: case.likelihood,
            gt: case.gt,
            skeleton,
        }];
        let cfg = TrainConfig {
            epochs: 0,
            seed: 3,
            ..Default::default()
        };
        let out = train::<f64, f32>(&corpus, &SamplerConfig::default(), &cfg).unwrap();
        assert_eq!(out.params, RegressorParams::init(2, 3));
        assert!(out.loss_trace.is_empty());
        assert!(matches!(
            train::<f64, f32>(&[], &SamplerConfig::default(), &cfg),
            Err(RegressorError::EmptyCorpus)
        ));
    }

    #[test]
    fn short_training_is_reproducible() {
        let corpus: Vec<TrainCase<f64>> = (0..2)
            .map(|k| {
                let case = crate::synth::generate_case::<f64>(&crate::synth::SynthConfig {
                    seed: k,
                    ..Default::default()
                })
                .unwrap();
                TrainCase {
                    skeleton: crate::morse::skeletonize(&case.likelihood, 0.01),
                    image: case.image,
                    likelihood: case.likelihood,
                    gt: case.gt,
                }
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 3,
            seed: 1,
            box_size: 16,
            ..Default::default()
        };
        let a = train::<f64, f32>(&corpus, &SamplerConfig::default(), &cfg).unwrap();
        let b = train::<f64, f32>(&corpus, &SamplerConfig::default(), &cfg).unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.params, b.params);
        assert!(a.params.all_finite());
    }
}

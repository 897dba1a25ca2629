//! Proofreading sessions and the oracle simulator.
//!
//! The review queue holds structures with normalized uncertainty at least
//! 0.5, most uncertain first. Every decision overrides that structure's
//! accept flag; the final mask is a pure function of the flags, so each
//! decision only touches the structure's own pixels.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grids::{BinaryGrid, Grid};
use crate::inferpost::{diffuse_uncertainty, InferError, Overlay, StructureEstimate};
use crate::metrics::{cldice, dice, MetricsError};
use crate::structgraph::soft_label;

pub const REVIEW_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ProofreadError {
    #[error("unknown structure id {0}")]
    UnknownStructure(usize),
    #[error("structure {0} already decided")]
    AlreadyDecided(usize),
    #[error("session belongs to case {found:?}, not {expected:?}")]
    CaseMismatch { expected: String, found: String },
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub clicks: usize,
    pub dice: Option<f64>,
    pub cldice: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub structure_id: usize,
    pub accept: bool,
}

/// Serializable session state: everything except the grids it was opened
/// on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub case_id: String,
    pub estimates: Vec<StructureEstimate>,
    pub decisions: Vec<Decision>,
}

/// Structure ids with `u_norm >= 0.5`, by decreasing `u_norm` then id.
pub fn review_queue(estimates: &[StructureEstimate]) -> Vec<usize> {
    let mut q: Vec<&StructureEstimate> = estimates.iter().filter(|e| e.u_norm >= REVIEW_THRESHOLD).collect();
    q.sort_by(|a, b| {
        b.u_norm
            .partial_cmp(&a.u_norm)
            .expect("finite uncertainty")
            .then(a.structure_id.cmp(&b.structure_id))
    });
    q.into_iter().map(|e| e.structure_id).collect()
}

#[derive(Clone, Debug)]
pub struct Session {
    case_id: String,
    estimates: Vec<StructureEstimate>,
    index: BTreeMap<usize, usize>,
    overlay: Overlay,
    accepted: Vec<bool>,
    pending: Vec<usize>,
    decisions: Vec<Decision>,
    final_mask: BinaryGrid,
    gt: Option<BinaryGrid>,
    trace: Vec<TracePoint>,
}

impl Session {
    pub fn new(
        case_id: impl Into<String>,
        estimates: Vec<StructureEstimate>,
        backbone: &BinaryGrid,
        gt: Option<BinaryGrid>,
    ) -> Result<Self, ProofreadError> {
        if let Some(gt) = &gt {
            backbone.same_dims(gt).map_err(MetricsError::from)?;
        }
        let overlay = Overlay::new(&estimates, backbone)?;
        let accepted: Vec<bool> = estimates.iter().map(|e| e.accepted).collect();
        let (_, final_mask) = overlay.masks(&accepted);
        let mut s = Session {
            case_id: case_id.into(),
            index: estimates.iter().enumerate().map(|(k, e)| (e.structure_id, k)).collect(),
            pending: review_queue(&estimates),
            estimates,
            overlay,
            accepted,
            decisions: Vec::new(),
            final_mask,
            gt,
            trace: Vec::new(),
        };
        let point = s.measure()?;
        s.trace.push(point);
        Ok(s)
    }

    /// Rebuilds a session and replays its decisions in order.
    pub fn restore(state: SessionState, backbone: &BinaryGrid, gt: Option<BinaryGrid>) -> Result<Self, ProofreadError> {
        let mut s = Session::new(state.case_id, state.estimates, backbone, gt)?;
        for d in state.decisions {
            s.apply_decision(d.structure_id, d.accept)?;
        }
        Ok(s)
    }

    pub fn state(&self) -> SessionState {
        SessionState {
            case_id: self.case_id.clone(),
            estimates: self.estimates.clone(),
            decisions: self.decisions.clone(),
        }
    }

    fn measure(&self) -> Result<TracePoint, ProofreadError> {
        let (d, cl) = match &self.gt {
            Some(gt) => (Some(dice(&self.final_mask, gt)?), Some(cldice(&self.final_mask, gt)?)),
            None => (None, None),
        };
        Ok(TracePoint {
            clicks: self.decisions.len(),
            dice: d,
            cldice: cl,
        })
    }

    /// Records a decision and returns the new trace point. Structures
    /// outside the review queue may also be decided.
    pub fn apply_decision(&mut self, structure_id: usize, accept: bool) -> Result<TracePoint, ProofreadError> {
        let &k = self
            .index
            .get(&structure_id)
            .ok_or(ProofreadError::UnknownStructure(structure_id))?;
        if self.decisions.iter().any(|d| d.structure_id == structure_id) {
            return Err(ProofreadError::AlreadyDecided(structure_id));
        }
        self.decisions.push(Decision { structure_id, accept });
        self.pending.retain(|&id| id != structure_id);
        if self.accepted[k] != accept {
            self.accepted[k] = accept;
            self.overlay.update(&mut self.final_mask, &self.accepted, k);
        }
        let point = self.measure()?;
        self.trace.push(point);
        Ok(point)
    }

    pub fn case_id(&self) -> &str {
        &self.case_id
    }

    pub fn estimates(&self) -> &[StructureEstimate] {
        &self.estimates
    }

    pub fn pending(&self) -> &[usize] {
        &self.pending
    }

    pub fn decisions(&self) -> &[Decision] {
        &self.decisions
    }

    /// Current accept flag per estimate (decisions override thresholds).
    pub fn accepted(&self) -> &[bool] {
        &self.accepted
    }

    pub fn final_mask(&self) -> &BinaryGrid {
        &self.final_mask
    }

    pub fn gt(&self) -> Option<&BinaryGrid> {
        self.gt.as_ref()
    }

    pub fn trace(&self) -> &[TracePoint] {
        &self.trace
    }

    pub fn heatmap(&self) -> Grid<f64> {
        diffuse_uncertainty(&self.estimates, &self.accepted, &self.final_mask)
    }

    pub fn skeletal_mask(&self) -> BinaryGrid {
        self.overlay.masks(&self.accepted).0
    }

    /// Backbone pixels owned by a structure.
    pub fn region(&self, structure_id: usize) -> Option<&[usize]> {
        self.index.get(&structure_id).map(|&k| self.overlay.region(k))
    }
}

/// Oracle answer: accept iff the soft label of the deterministic path is at
/// least 0.5.
pub fn oracle_decision(estimate: &StructureEstimate, gt: &BinaryGrid) -> bool {
    soft_label(&estimate.path, gt) >= REVIEW_THRESHOLD
}

/// Walks the whole review queue with oracle decisions. Returns
/// `(clicks, dice)` starting at click 0.
pub fn simulate(
    estimates: &[StructureEstimate],
    backbone: &BinaryGrid,
    gt: &BinaryGrid,
) -> Result<Vec<(usize, f64)>, ProofreadError> {
    let mut s = Session::new("sim", estimates.to_vec(), backbone, Some(gt.clone()))?;
    let queue = s.pending().to_vec();
    for id in queue {
        let accept = oracle_decision(&s.estimates[s.index[&id]], gt);
        s.apply_decision(id, accept)?;
    }
    Ok(s.trace()
        .iter()
        .map(|p| (p.clicks, p.dice.expect("gt loaded")))
        .collect())
}

/// Per-case rows plus a `mean` curve; cases that ran out of clicks carry
/// their final value forward.
pub fn curves_csv(curves: &[(String, Vec<(usize, f64)>)]) -> String {
    let mut out = String::from("case,clicks,dice\n");
    for (case, curve) in curves {
        for (c, d) in curve {
            writeln!(out, "{case},{c},{d}").unwrap();
        }
    }
    let longest = curves.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    for i in 0..longest {
        let vals: Vec<f64> = curves
            .iter()
            .filter_map(|(_, c)| c.get(i).or(c.last()).map(|p| p.1))
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        writeln!(out, "mean,{i},{mean}").unwrap();
    }
    out
}

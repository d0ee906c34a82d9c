//! Auto-conditioning: push the data line `X(z) = a + b·z` through a
//! [`PwlGraph`] and collect the interval of `z` on which every node stays on
//! the same affine piece as at the queried point.
//!
//! Each node's output is again a line plus a running interval `[lo, hi]`.
//! Linear nodes map the line exactly; ReLU, Abs and MaxPool pick the piece
//! active at `z` and shrink the interval to where that piece stays active.
//! The threshold node turns the final line into the region and its bounds.

use ndarray::{Array1, Zip};

use crate::detector::AnomalyRegion;
use crate::error::{Error, Result};
use crate::graph::{NodeKind, PwlGraph};
use crate::ops;
use crate::tensor::{ContrastVector, CovMatrix, Image};

/// Intervals narrower than this are reported as degenerate.
pub const DEGENERATE_WIDTH: f64 = 1e-12;

/// `{a + b·z : z ∈ [lo, hi]}`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLine {
    pub a: Array1<f64>,
    pub b: Array1<f64>,
    pub lo: f64,
    pub hi: f64,
}

impl AffineLine {
    pub fn new(a: Array1<f64>, b: Array1<f64>, lo: f64, hi: f64) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::shape(a.len(), b.len()));
        }
        if !(lo <= hi) {
            return Err(Error::Domain(format!("empty interval [{lo}, {hi}]")));
        }
        Ok(Self { a, b, lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn at(&self, z: f64) -> Array1<f64> {
        &self.a + &(&self.b * z)
    }

    fn contains(&self, z: f64) -> bool {
        self.lo <= z && z <= self.hi
    }

    /// Restrict the interval to where `c + d·z ≥ 0`. The constraint holds at
    /// `z` by construction; the bound is clamped so rounding never excludes
    /// `z` itself.
    #[inline]
    fn constrain(&mut self, c: f64, d: f64, z: f64) {
        if d > 0.0 {
            self.lo = self.lo.max((-c / d).min(z));
        } else if d < 0.0 {
            self.hi = self.hi.min((-c / d).max(z));
        }
    }
}

/// One affine piece of the graph along the line.
#[derive(Debug, Clone, PartialEq)]
pub struct PieceResult {
    pub lo: f64,
    pub hi: f64,
    pub region: AnomalyRegion,
    /// `hi - lo < 1e-12`.
    pub degenerate: bool,
}

impl PieceResult {
    pub fn contains(&self, z: f64) -> bool {
        self.lo <= z && z <= self.hi
    }
}

/// Line through `x` along `Ση/(ηᵀΣη)`, parameterized by `z = ηᵀX`.
pub fn init_line(x: &Image, eta: &ContrastVector, cov: &CovMatrix) -> Result<AffineLine> {
    if eta.len() != x.len() {
        return Err(Error::shape(x.len(), eta.len()));
    }
    let sigma_eta = cov.mul_vec(eta.values())?;
    let variance = eta.values().dot(&sigma_eta);
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::Domain(format!("ηᵀΣη = {variance} is not positive")));
    }
    let b = sigma_eta / variance;
    let t = eta.values().dot(x.pixels());
    let a = x.pixels() - &(&b * t);
    AffineLine::new(a, b, f64::NEG_INFINITY, f64::INFINITY)
}

/// Push a line through a single-input node other than `Concat` and
/// `Threshold`, choosing the piece active at `z`.
///
/// At a hinge the closed side is taken: ReLU and Abs treat `v = 0` as the
/// non-negative piece and MaxPool keeps the first maximal index.
pub fn propagate_linear(node: &NodeKind, input: &AffineLine, z: f64) -> Result<AffineLine> {
    if !input.contains(z) {
        return Err(Error::Inconsistent(format!(
            "z = {z} outside the incoming interval [{}, {}]",
            input.lo, input.hi
        )));
    }
    let mut out = match node {
        NodeKind::Relu | NodeKind::Abs => {
            let mut out = input.clone();
            let relu = matches!(node, NodeKind::Relu);
            Zip::from(&mut out.a).and(&mut out.b).for_each(|a, b| {
                if *a + *b * z < 0.0 {
                    if relu {
                        *a = 0.0;
                        *b = 0.0;
                    } else {
                        *a = -*a;
                        *b = -*b;
                    }
                }
            });
            // c + d·z ≥ 0 with (c, d) the sign-corrected input.
            let mut bounds = input.clone();
            for (&a, &b) in input.a.iter().zip(&input.b) {
                let s = if a + b * z < 0.0 { -1.0 } else { 1.0 };
                bounds.constrain(s * a, s * b, z);
            }
            out.lo = bounds.lo;
            out.hi = bounds.hi;
            out
        }
        NodeKind::MaxPool { shape, window } => {
            let v = input.at(z);
            let argmax = ops::maxpool_argmax(*shape, *window, v.as_slice().unwrap());
            let windows = ops::pool_windows(*shape, *window);
            let mut out = AffineLine {
                a: argmax.iter().map(|&i| input.a[i]).collect(),
                b: argmax.iter().map(|&i| input.b[i]).collect(),
                lo: input.lo,
                hi: input.hi,
            };
            for (&j, members) in argmax.iter().zip(&windows) {
                for &k in members {
                    if k != j {
                        out.constrain(input.a[j] - input.a[k], input.b[j] - input.b[k], z);
                    }
                }
            }
            out
        }
        NodeKind::Input | NodeKind::Concat | NodeKind::Threshold { .. } => {
            return Err(Error::Graph(format!(
                "{} node cannot be propagated as a single-input node",
                node.name()
            )))
        }
        linear => AffineLine {
            a: linear.apply_linear(&input.a, true),
            b: linear.apply_linear(&input.b, false),
            lo: input.lo,
            hi: input.hi,
        },
    };
    out.lo = out.lo.max(input.lo);
    out.hi = out.hi.min(input.hi);
    Ok(out)
}

/// Stack two lines that share the same `z`; the interval is their
/// intersection.
pub fn propagate_concat(left: &AffineLine, right: &AffineLine) -> Result<AffineLine> {
    let lo = left.lo.max(right.lo);
    let hi = left.hi.min(right.hi);
    if lo > hi {
        return Err(Error::Inconsistent(format!(
            "concat inputs have disjoint intervals [{}, {}] and [{}, {}]",
            left.lo, left.hi, right.lo, right.hi
        )));
    }
    let join = |l: &Array1<f64>, r: &Array1<f64>| l.iter().chain(r.iter()).copied().collect();
    Ok(AffineLine {
        a: join(&left.a, &right.a),
        b: join(&left.b, &right.b),
        lo,
        hi,
    })
}

/// Region `{i : score_i(z) ≥ λ}` and the interval on which it is unchanged.
pub fn propagate_threshold(lambda: f64, input: &AffineLine, z: f64) -> PieceResult {
    let mut bounds = input.clone();
    let mask: Vec<bool> = input
        .a
        .iter()
        .zip(&input.b)
        .map(|(&a, &b)| {
            let inside = a + b * z >= lambda;
            if inside {
                bounds.constrain(a - lambda, b, z);
            } else {
                bounds.constrain(lambda - a, -b, z);
            }
            inside
        })
        .collect();
    PieceResult {
        lo: bounds.lo,
        hi: bounds.hi,
        region: AnomalyRegion::from_mask(mask),
        degenerate: bounds.hi - bounds.lo < DEGENERATE_WIDTH,
    }
}

/// Piece of `g` along `line` that contains `z`.
pub fn piece_at(g: &PwlGraph, line: &AffineLine, z: f64) -> Result<PieceResult> {
    if line.dim() != g.input_dim() {
        return Err(Error::shape(g.input_dim(), line.dim()));
    }
    if !line.contains(z) || !z.is_finite() {
        return Err(Error::Domain(format!(
            "z = {z} outside the line's interval [{}, {}]",
            line.lo, line.hi
        )));
    }
    let nodes = g.nodes();
    let mut states: Vec<Option<AffineLine>> = Vec::with_capacity(nodes.len());
    // Number of consumers still to read each state, so buffers can be freed.
    let mut pending = vec![0usize; nodes.len()];
    for node in nodes {
        for &i in &node.inputs {
            pending[i] += 1;
        }
    }
    for node in nodes {
        let state = match &node.kind {
            NodeKind::Input => line.clone(),
            NodeKind::Threshold { lambda } => {
                let input = states[node.inputs[0]].as_ref().expect("threshold input");
                return Ok(propagate_threshold(*lambda, input, z));
            }
            NodeKind::Concat => {
                let l = states[node.inputs[0]].as_ref().expect("concat input");
                let r = states[node.inputs[1]].as_ref().expect("concat input");
                propagate_concat(l, r)?
            }
            kind => propagate_linear(kind, states[node.inputs[0]].as_ref().expect("node input"), z)?,
        };
        for &i in &node.inputs {
            pending[i] -= 1;
            if pending[i] == 0 {
                states[i] = None;
            }
        }
        states.push(Some(state));
    }
    Err(Error::Graph("graph has no threshold node".into()))
}

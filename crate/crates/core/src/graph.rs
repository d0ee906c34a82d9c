//! Computation graphs of piecewise-linear nodes that end in a threshold
//! assignment node.
//!
//! Nodes are stored in topological order; node 0 is the input `X` and the last
//! node is the `Threshold` that turns the per-pixel anomaly score into the
//! detected region. Fan-out is allowed, so the input can feed both the
//! autoencoder branch and the identity branch of a `Concat`.

use ndarray::{s, Array1, Array2};

use crate::detector::AnomalyRegion;
use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry, Shape3};
use crate::tensor::Image;
use crate::vae::{Layer, VaeModel};

/// Matrix applied from the left by a `MatMulLeft` node.
#[derive(Debug, Clone, PartialEq)]
pub enum LinearMap {
    Dense(Array2<f64>),
    /// `coeffs ⊗ I_block`, e.g. `[I, -I]` for the reconstruction residual.
    BlockIdentity { coeffs: Array2<f64>, block: usize },
}

impl LinearMap {
    pub fn rows(&self) -> usize {
        match self {
            LinearMap::Dense(m) => m.nrows(),
            LinearMap::BlockIdentity { coeffs, block } => coeffs.nrows() * block,
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            LinearMap::Dense(m) => m.ncols(),
            LinearMap::BlockIdentity { coeffs, block } => coeffs.ncols() * block,
        }
    }

    pub fn apply(&self, v: &Array1<f64>) -> Array1<f64> {
        match self {
            LinearMap::Dense(m) => m.dot(v),
            LinearMap::BlockIdentity { coeffs, block } => {
                let mut out = Array1::zeros(coeffs.nrows() * block);
                for r in 0..coeffs.nrows() {
                    let mut dst = out.slice_mut(s![r * block..(r + 1) * block]);
                    for c in 0..coeffs.ncols() {
                        let k = coeffs[[r, c]];
                        if k != 0.0 {
                            dst.scaled_add(k, &v.slice(s![c * block..(c + 1) * block]));
                        }
                    }
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Input,
    /// `W x + c`.
    Affine { weight: Array2<f64>, bias: Array1<f64> },
    Conv2d {
        geometry: ConvGeometry,
        weight: Vec<f64>,
        bias: Vec<f64>,
    },
    Relu,
    Abs,
    MaxPool { shape: Shape3, window: usize },
    MeanPool { shape: Shape3, window: usize },
    Upsample { shape: Shape3, factor: usize },
    MeanFilter { height: usize, width: usize, window: usize },
    MatMulLeft(LinearMap),
    Concat,
    Threshold { lambda: f64 },
}

impl NodeKind {
    /// Parse an activation name. Only exactly piecewise-linear activations
    /// are accepted.
    pub fn activation(name: &str) -> Result<NodeKind> {
        match name.to_ascii_lowercase().as_str() {
            "relu" => Ok(NodeKind::Relu),
            "abs" => Ok(NodeKind::Abs),
            "sigmoid" | "tanh" | "softplus" | "gelu" | "elu" => Err(Error::Graph(format!(
                "activation `{name}` is not piecewise-linear"
            ))),
            other => Err(Error::Graph(format!("unknown activation `{other}`"))),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(
            self,
            NodeKind::Affine { .. }
                | NodeKind::Conv2d { .. }
                | NodeKind::MeanPool { .. }
                | NodeKind::Upsample { .. }
                | NodeKind::MeanFilter { .. }
                | NodeKind::MatMulLeft(_)
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Input => "input",
            NodeKind::Affine { .. } => "affine",
            NodeKind::Conv2d { .. } => "conv2d",
            NodeKind::Relu => "relu",
            NodeKind::Abs => "abs",
            NodeKind::MaxPool { .. } => "maxpool",
            NodeKind::MeanPool { .. } => "meanpool",
            NodeKind::Upsample { .. } => "upsample",
            NodeKind::MeanFilter { .. } => "meanfilter",
            NodeKind::MatMulLeft(_) => "matmul_left",
            NodeKind::Concat => "concat",
            NodeKind::Threshold { .. } => "threshold",
        }
    }

    /// Apply a linear node; `with_offset = false` drops the constant term so
    /// the same call maps direction vectors.
    pub fn apply_linear(&self, v: &Array1<f64>, with_offset: bool) -> Array1<f64> {
        match self {
            NodeKind::Affine { weight, bias } => {
                let mut out = weight.dot(v);
                if with_offset {
                    out += bias;
                }
                out
            }
            NodeKind::Conv2d {
                geometry,
                weight,
                bias,
            } => {
                let mut out = vec![0.0; geometry.output().len()];
                let b = with_offset.then_some(bias.as_slice());
                geometry.forward(weight, b, v.as_slice().unwrap(), &mut out);
                Array1::from(out)
            }
            NodeKind::MeanPool { shape, window } => {
                let mut out = vec![0.0; shape.len() / (window * window)];
                ops::meanpool(*shape, *window, &as_slice(v), &mut out);
                Array1::from(out)
            }
            NodeKind::Upsample { shape, factor } => {
                let mut out = vec![0.0; shape.len() * factor * factor];
                ops::upsample(*shape, *factor, &as_slice(v), &mut out);
                Array1::from(out)
            }
            NodeKind::MeanFilter {
                height,
                width,
                window,
            } => {
                let mut out = vec![0.0; height * width];
                ops::mean_filter(*height, *width, *window, &as_slice(v), &mut out);
                Array1::from(out)
            }
            NodeKind::MatMulLeft(map) => map.apply(v),
            other => panic!("apply_linear called on non-linear node {}", other.name()),
        }
    }
}

fn as_slice(v: &Array1<f64>) -> std::borrow::Cow<'_, [f64]> {
    match v.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(v.to_vec()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PwlNode {
    pub kind: NodeKind,
    pub inputs: Vec<usize>,
    pub dim: usize,
}

/// Topologically ordered DAG with a single source (node 0) and a single
/// `Threshold` sink.
#[derive(Debug, Clone, PartialEq)]
pub struct PwlGraph {
    nodes: Vec<PwlNode>,
}

impl PwlGraph {
    pub fn nodes(&self) -> &[PwlNode] {
        &self.nodes
    }

    pub fn input_dim(&self) -> usize {
        self.nodes[0].dim
    }

    pub fn lambda(&self) -> f64 {
        match self.nodes.last().map(|n| &n.kind) {
            Some(NodeKind::Threshold { lambda }) => *lambda,
            _ => unreachable!("graph invariant: last node is a threshold"),
        }
    }

    /// Index of the node feeding the threshold.
    pub fn score_node(&self) -> usize {
        self.nodes.last().unwrap().inputs[0]
    }

    /// Values of every non-threshold node at `x`.
    pub fn evaluate(&self, x: &Array1<f64>) -> Result<Vec<Array1<f64>>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(self.input_dim(), x.len()));
        }
        let mut values: Vec<Array1<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.kind {
                NodeKind::Input => x.clone(),
                NodeKind::Threshold { .. } => Array1::zeros(0),
                NodeKind::Relu => values[node.inputs[0]].mapv(|v| v.max(0.0)),
                NodeKind::Abs => values[node.inputs[0]].mapv(f64::abs),
                NodeKind::MaxPool { shape, window } => {
                    let input = &values[node.inputs[0]];
                    let argmax = ops::maxpool_argmax(*shape, *window, &as_slice(input));
                    argmax.iter().map(|&i| input[i]).collect()
                }
                NodeKind::Concat => {
                    let (l, r) = (&values[node.inputs[0]], &values[node.inputs[1]]);
                    l.iter().chain(r.iter()).copied().collect()
                }
                linear => linear.apply_linear(&values[node.inputs[0]], true),
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Per-pixel anomaly score (the threshold's input) at `x`.
    pub fn score(&self, x: &Array1<f64>) -> Result<Array1<f64>> {
        let mut values = self.evaluate(x)?;
        Ok(values.swap_remove(self.score_node()))
    }

    pub fn region_of_score(&self, score: &Array1<f64>) -> AnomalyRegion {
        let lambda = self.lambda();
        AnomalyRegion::from_mask(score.iter().map(|&e| e >= lambda))
    }
}

/// Anomaly scores and detected region `{i : E_i(x) ≥ λ}`.
pub fn forward(g: &PwlGraph, x: &Image) -> Result<(Array1<f64>, AnomalyRegion)> {
    let score = g.score(x.pixels())?;
    let region = g.region_of_score(&score);
    Ok((score, region))
}

/// Incremental, validating constructor for [`PwlGraph`].
#[derive(Debug)]
pub struct GraphBuilder {
    nodes: Vec<PwlNode>,
}

impl GraphBuilder {
    pub fn new(input_dim: usize) -> Self {
        Self {
            nodes: vec![PwlNode {
                kind: NodeKind::Input,
                inputs: Vec::new(),
                dim: input_dim,
            }],
        }
    }

    pub const INPUT: usize = 0;

    pub fn push(&mut self, kind: NodeKind, inputs: &[usize]) -> Result<usize> {
        let id = self.nodes.len();
        if matches!(self.nodes.last().map(|n| &n.kind), Some(NodeKind::Threshold { .. })) {
            return Err(Error::Graph("threshold must be the terminal node".into()));
        }
        let expected_inputs = match kind {
            NodeKind::Input => {
                return Err(Error::Graph("graph has a single input node".into()))
            }
            NodeKind::Concat => 2,
            _ => 1,
        };
        if inputs.len() != expected_inputs {
            return Err(Error::Graph(format!(
                "{} node takes {expected_inputs} input(s), got {}",
                kind.name(),
                inputs.len()
            )));
        }
        if let Some(&bad) = inputs.iter().find(|&&i| i >= id) {
            return Err(Error::Graph(format!(
                "node {id} refers to node {bad}, which is not earlier in topological order"
            )));
        }
        let in_dim = self.nodes[inputs[0]].dim;
        let need = |want: usize| -> Result<()> {
            if want != in_dim {
                Err(Error::Graph(format!(
                    "{} node expects input dimension {want}, got {in_dim}",
                    kind.name()
                )))
            } else {
                Ok(())
            }
        };
        let dim = match &kind {
            NodeKind::Input => unreachable!(),
            NodeKind::Affine { weight, bias } => {
                need(weight.ncols())?;
                if bias.len() != weight.nrows() {
                    return Err(Error::Graph("affine bias length mismatch".into()));
                }
                weight.nrows()
            }
            NodeKind::Conv2d {
                geometry,
                weight,
                bias,
            } => {
                need(geometry.input.len())?;
                if weight.len() != geometry.weight_len() || bias.len() != geometry.out_channels {
                    return Err(Error::Graph("conv parameter length mismatch".into()));
                }
                geometry.output().len()
            }
            NodeKind::Relu | NodeKind::Abs => in_dim,
            NodeKind::MaxPool { shape, window } | NodeKind::MeanPool { shape, window } => {
                need(shape.len())?;
                ops::pool_output(*shape, *window)?.len()
            }
            NodeKind::Upsample { shape, factor } => {
                need(shape.len())?;
                if *factor == 0 {
                    return Err(Error::Graph("upsample factor must be positive".into()));
                }
                shape.len() * factor * factor
            }
            NodeKind::MeanFilter {
                height,
                width,
                window,
            } => {
                need(height * width)?;
                if window % 2 == 0 {
                    return Err(Error::Graph(format!("mean filter window {window} must be odd")));
                }
                in_dim
            }
            NodeKind::MatMulLeft(map) => {
                need(map.cols())?;
                map.rows()
            }
            NodeKind::Concat => in_dim + self.nodes[inputs[1]].dim,
            NodeKind::Threshold { lambda } => {
                if !(*lambda > 0.0) || !lambda.is_finite() {
                    return Err(Error::Graph(format!("threshold must be positive, got {lambda}")));
                }
                in_dim
            }
        };
        self.nodes.push(PwlNode {
            kind,
            inputs: inputs.to_vec(),
            dim,
        });
        Ok(id)
    }

    pub fn finish(self) -> Result<PwlGraph> {
        let last = self.nodes.len() - 1;
        if !matches!(self.nodes[last].kind, NodeKind::Threshold { .. }) {
            return Err(Error::Graph("graph must end in a threshold node".into()));
        }
        if self.nodes[last].dim != self.nodes[0].dim {
            return Err(Error::Graph(format!(
                "threshold acts on {} scores but the input has {} pixels",
                self.nodes[last].dim, self.nodes[0].dim
            )));
        }
        let mut consumed = vec![false; self.nodes.len()];
        for node in &self.nodes {
            for &i in &node.inputs {
                consumed[i] = true;
            }
        }
        if let Some(dangling) = (0..last).find(|&i| !consumed[i]) {
            return Err(Error::Graph(format!(
                "node {dangling} is not consumed; the threshold must be the only sink"
            )));
        }
        Ok(PwlGraph { nodes: self.nodes })
    }
}

fn push_layers(b: &mut GraphBuilder, layers: &[Layer], mut cur: usize) -> Result<usize> {
    for layer in layers {
        let kind = match layer {
            Layer::Dense(d) => NodeKind::Affine {
                weight: d.weight.clone(),
                bias: d.bias.clone(),
            },
            Layer::Conv2d(c) => NodeKind::Conv2d {
                geometry: c.geometry,
                weight: c.weight.to_vec(),
                bias: c.bias.to_vec(),
            },
            Layer::Relu => NodeKind::Relu,
            Layer::MaxPool { shape, window } => NodeKind::MaxPool {
                shape: *shape,
                window: *window,
            },
            Layer::Upsample { shape, factor } => NodeKind::Upsample {
                shape: *shape,
                factor: *factor,
            },
        };
        cur = b.push(kind, &[cur])?;
    }
    Ok(cur)
}

/// Detector graph computing `|μ_θ(μ_φ(X)) - X|`, an optional in-bounds mean
/// filter, and the threshold `λ`.
pub fn assemble_detector(vae: &VaeModel, lambda: f64, filter_window: usize) -> Result<PwlGraph> {
    if filter_window == 0 || filter_window.is_multiple_of(2) {
        return Err(Error::Graph(format!(
            "filter window must be odd and >= 1, got {filter_window}"
        )));
    }
    let n = vae.n();
    let mut b = GraphBuilder::new(n);
    let enc = push_layers(&mut b, vae.encoder(), GraphBuilder::INPUT)?;
    let head = vae.mu_head();
    let mu = b.push(
        NodeKind::Affine {
            weight: head.weight.clone(),
            bias: head.bias.clone(),
        },
        &[enc],
    )?;
    let recon = push_layers(&mut b, vae.decoder(), mu)?;
    if b.nodes[recon].dim != n {
        return Err(Error::Graph(format!(
            "decoder produces {} values for {n} pixels",
            b.nodes[recon].dim
        )));
    }
    let both = b.push(NodeKind::Concat, &[recon, GraphBuilder::INPUT])?;
    let residual = b.push(
        NodeKind::MatMulLeft(LinearMap::BlockIdentity {
            coeffs: ndarray::array![[1.0, -1.0]],
            block: n,
        }),
        &[both],
    )?;
    let mut score = b.push(NodeKind::Abs, &[residual])?;
    if filter_window > 1 {
        let (height, width) = vae.image_shape();
        score = b.push(
            NodeKind::MeanFilter {
                height,
                width,
                window: filter_window,
            },
            &[score],
        )?;
    }
    b.push(NodeKind::Threshold { lambda }, &[score])?;
    b.finish()
}

/// Graphs whose score is `|x|` (zero reconstruction) or identically zero
/// (perfect reconstruction). Handy fixtures with closed-form pieces.
pub fn reconstruction_fixture(n: usize, lambda: f64, perfect: bool) -> Result<PwlGraph> {
    let mut b = GraphBuilder::new(n);
    let recon = if perfect {
        b.push(
            NodeKind::Affine {
                weight: Array2::eye(n),
                bias: Array1::zeros(n),
            },
            &[GraphBuilder::INPUT],
        )?
    } else {
        b.push(
            NodeKind::Affine {
                weight: Array2::zeros((n, n)),
                bias: Array1::zeros(n),
            },
            &[GraphBuilder::INPUT],
        )?
    };
    let both = b.push(NodeKind::Concat, &[recon, GraphBuilder::INPUT])?;
    let residual = b.push(
        NodeKind::MatMulLeft(LinearMap::BlockIdentity {
            coeffs: ndarray::array![[1.0, -1.0]],
            block: n,
        }),
        &[both],
    )?;
    let score = b.push(NodeKind::Abs, &[residual])?;
    b.push(NodeKind::Threshold { lambda }, &[score])?;
    b.finish()
}

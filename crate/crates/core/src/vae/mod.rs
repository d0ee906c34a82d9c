//! Desk-scale VAE with exactly piecewise-linear layers.
//!
//! The encoder trunk feeds two dense heads, `μ_φ(x)` and `log σ²_φ(x)`; the
//! decoder maps a latent vector back to `μ_θ(z)` with no output activation.
//! Only the deterministic path `μ_θ(μ_φ(x))` is used at test time.

mod io;
mod train;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry, Shape3};
use crate::tensor::{image_shape, Image};

pub use io::{
    load_weights, load_weights_str, save_weights, to_json, DetectorConfig, LayerRecord, WeightFile,
    FORMAT_TAG,
};
pub use train::{
    elbo_loss, elbo_terms, normal_training_set, train, Adam, ElboTerms, Gradients, TrainConfig,
    Trained,
};

/// Latent dimension of the reference architecture.
pub const DEFAULT_LATENT: usize = 10;

/// Bounds applied to the log-variance head.
pub const LOGVAR_CLAMP: (f64, f64) = (-10.0, 10.0);

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = (2.0 / inputs as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((outputs, inputs), |_| {
                std * rng.sample::<f64, _>(StandardNormal)
            }),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub geometry: ConvGeometry,
    /// `(out, in, k, k)` row-major.
    pub weight: Array1<f64>,
    pub bias: Array1<f64>,
}

impl Conv {
    fn init<R: Rng>(geometry: ConvGeometry, rng: &mut R) -> Self {
        let fan_in = geometry.input.channels * geometry.kernel * geometry.kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        Self {
            geometry,
            weight: Array1::from_shape_fn(geometry.weight_len(), |_| {
                std * rng.sample::<f64, _>(StandardNormal)
            }),
            bias: Array1::zeros(geometry.out_channels),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv),
    Relu,
    MaxPool { shape: Shape3, window: usize },
    Upsample { shape: Shape3, factor: usize },
}

impl Layer {
    /// Output width for an input of `in_dim` values, or a shape error.
    pub fn output_dim(&self, in_dim: usize) -> Result<usize> {
        let (want, out) = match self {
            Layer::Dense(d) => (d.inputs(), d.outputs()),
            Layer::Conv2d(c) => (c.geometry.input.len(), c.geometry.output().len()),
            Layer::Relu => (in_dim, in_dim),
            Layer::MaxPool { shape, window } => (shape.len(), ops::pool_output(*shape, *window)?.len()),
            Layer::Upsample { shape, factor } => (shape.len(), shape.len() * factor * factor),
        };
        if want != in_dim {
            return Err(Error::Graph(format!(
                "layer expects {want} inputs, previous layer produces {in_dim}"
            )));
        }
        Ok(out)
    }

    /// Batch forward; rows are samples. Returns the output and, for max
    /// pooling, the selected input index of every output unit.
    pub(crate) fn forward_batch(&self, x: &Array2<f64>) -> (Array2<f64>, Option<Vec<Vec<usize>>>) {
        match self {
            Layer::Dense(d) => (d.forward(x), None),
            Layer::Relu => (x.mapv(|v| v.max(0.0)), None),
            Layer::Conv2d(c) => {
                let out_len = c.geometry.output().len();
                let mut out = Array2::zeros((x.nrows(), out_len));
                let (w, b) = (c.weight.as_slice().unwrap(), c.bias.as_slice().unwrap());
                for (row, mut dst) in x.rows().into_iter().zip(out.rows_mut()) {
                    c.geometry
                        .forward(w, Some(b), &row.to_vec(), dst.as_slice_mut().unwrap());
                }
                (out, None)
            }
            Layer::MaxPool { shape, window } => {
                let argmax: Vec<Vec<usize>> = x
                    .rows()
                    .into_iter()
                    .map(|row| ops::maxpool_argmax(*shape, *window, &row.to_vec()))
                    .collect();
                let out_len = argmax.first().map_or(0, Vec::len);
                let out = Array2::from_shape_fn((x.nrows(), out_len), |(r, j)| x[[r, argmax[r][j]]]);
                (out, Some(argmax))
            }
            Layer::Upsample { shape, factor } => {
                let out_len = shape.len() * factor * factor;
                let mut out = Array2::zeros((x.nrows(), out_len));
                for (row, mut dst) in x.rows().into_iter().zip(out.rows_mut()) {
                    ops::upsample(*shape, *factor, &row.to_vec(), dst.as_slice_mut().unwrap());
                }
                (out, None)
            }
        }
    }
}

/// The VAE: encoder trunk, mean and log-variance heads, decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    n: usize,
    m: usize,
    encoder: Vec<Layer>,
    mu_head: Dense,
    logvar_head: Dense,
    decoder: Vec<Layer>,
}

impl VaeModel {
    pub fn from_parts(
        n: usize,
        m: usize,
        encoder: Vec<Layer>,
        mu_head: Dense,
        logvar_head: Dense,
        decoder: Vec<Layer>,
    ) -> Result<Self> {
        let trunk = encoder.iter().try_fold(n, |d, l| l.output_dim(d))?;
        for (name, head) in [("mu", &mu_head), ("logvar", &logvar_head)] {
            if head.inputs() != trunk || head.outputs() != m {
                return Err(Error::Graph(format!(
                    "{name} head is {}x{}, expected {m}x{trunk}",
                    head.outputs(),
                    head.inputs()
                )));
            }
        }
        let out = decoder.iter().try_fold(m, |d, l| l.output_dim(d))?;
        if out != n {
            return Err(Error::Graph(format!("decoder produces {out} values for n = {n}")));
        }
        Ok(Self {
            n,
            m,
            encoder,
            mu_head,
            logvar_head,
            decoder,
        })
    }

    /// MLP VAE `n → hidden… → (μ, log σ²) ∈ R^m`, decoder mirrored, ReLU
    /// between layers and no output activation.
    pub fn mlp(n: usize, hidden: &[usize], m: usize, seed: u64) -> Result<Self> {
        if n == 0 || m == 0 || hidden.contains(&0) {
            return Err(Error::Domain("layer widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::new();
        let mut width = n;
        for &h in hidden {
            encoder.push(Layer::Dense(Dense::init(width, h, &mut rng)));
            encoder.push(Layer::Relu);
            width = h;
        }
        let mu_head = Dense::init(width, m, &mut rng);
        let mut logvar_head = Dense::init(width, m, &mut rng);
        logvar_head.weight.mapv_inplace(|w| 0.1 * w);
        let mut decoder = Vec::new();
        let mut width = m;
        for &h in hidden.iter().rev() {
            decoder.push(Layer::Dense(Dense::init(width, h, &mut rng)));
            decoder.push(Layer::Relu);
            width = h;
        }
        decoder.push(Layer::Dense(Dense::init(width, n, &mut rng)));
        Self::from_parts(n, m, encoder, mu_head, logvar_head, decoder)
    }

    /// Reference architecture: `n → 64 → 32 → 10`, mirrored decoder.
    pub fn reference(n: usize, seed: u64) -> Result<Self> {
        Self::mlp(n, &[64, 32], DEFAULT_LATENT, seed)
    }

    /// Convolutional variant for a `side × side` image:
    /// conv3×3 → ReLU → maxpool2 → dense → ReLU on the way down and
    /// dense → ReLU → dense → ReLU → upsample2 → conv3×3 on the way up.
    pub fn conv(side: usize, channels: usize, hidden: usize, m: usize, seed: u64) -> Result<Self> {
        if side < 2 || !side.is_multiple_of(2) {
            return Err(Error::Domain(format!("conv VAE needs an even side, got {side}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = side * side;
        let image = Shape3::new(1, side, side);
        let down = ConvGeometry::new(image, channels, 3, 1, 1)?;
        let feat = down.output();
        let pooled = ops::pool_output(feat, 2)?;
        let encoder = vec![
            Layer::Conv2d(Conv::init(down, &mut rng)),
            Layer::Relu,
            Layer::MaxPool { shape: feat, window: 2 },
            Layer::Dense(Dense::init(pooled.len(), hidden, &mut rng)),
            Layer::Relu,
        ];
        let mu_head = Dense::init(hidden, m, &mut rng);
        let mut logvar_head = Dense::init(hidden, m, &mut rng);
        logvar_head.weight.mapv_inplace(|w| 0.1 * w);
        let up = ConvGeometry::new(feat, 1, 3, 1, 1)?;
        let decoder = vec![
            Layer::Dense(Dense::init(m, hidden, &mut rng)),
            Layer::Relu,
            Layer::Dense(Dense::init(hidden, pooled.len(), &mut rng)),
            Layer::Relu,
            Layer::Upsample { shape: pooled, factor: 2 },
            Layer::Conv2d(Conv::init(up, &mut rng)),
        ];
        Self::from_parts(n, m, encoder, mu_head, logvar_head, decoder)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn latent_dim(&self) -> usize {
        self.m
    }

    pub fn image_shape(&self) -> (usize, usize) {
        image_shape(self.n)
    }

    pub fn encoder(&self) -> &[Layer] {
        &self.encoder
    }

    pub fn decoder(&self) -> &[Layer] {
        &self.decoder
    }

    pub fn mu_head(&self) -> &Dense {
        &self.mu_head
    }

    pub fn logvar_head(&self) -> &Dense {
        &self.logvar_head
    }

    fn run(layers: &[Layer], x: Array2<f64>) -> Array2<f64> {
        layers.iter().fold(x, |h, l| l.forward_batch(&h).0)
    }

    /// `μ_φ(x)` for each row of `batch`.
    pub fn encode_mean(&self, batch: &Array2<f64>) -> Array2<f64> {
        self.mu_head.forward(&Self::run(&self.encoder, batch.clone()))
    }

    /// `μ_θ(z)` for each row of `latent`.
    pub fn decode(&self, latent: &Array2<f64>) -> Array2<f64> {
        Self::run(&self.decoder, latent.clone())
    }

    /// `x̂ = μ_θ(μ_φ(x))`, no latent sampling.
    pub fn reconstruct(&self, x: &Image) -> Result<Image> {
        if x.len() != self.n {
            return Err(Error::shape(self.n, x.len()));
        }
        let batch = x.pixels().clone().insert_axis(Axis(0));
        let out = self.decode(&self.encode_mean(&batch));
        Image::new(out.row(0).to_owned(), x.height(), x.width())
    }

    /// Parameter tensors in canonical order: each parametric encoder layer
    /// (weight, bias), μ head, log-variance head, each parametric decoder
    /// layer.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.encoder {
            push_layer_params(l, &mut out);
        }
        for head in [&self.mu_head, &self.logvar_head] {
            out.push(head.weight.as_slice().unwrap());
            out.push(head.bias.as_slice().unwrap());
        }
        for l in &self.decoder {
            push_layer_params(l, &mut out);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.encoder {
            push_layer_params_mut(l, &mut out);
        }
        for head in [&mut self.mu_head, &mut self.logvar_head] {
            out.push(head.weight.as_slice_mut().unwrap());
            out.push(head.bias.as_slice_mut().unwrap());
        }
        for l in &mut self.decoder {
            push_layer_params_mut(l, &mut out);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

fn push_layer_params<'a>(l: &'a Layer, out: &mut Vec<&'a [f64]>) {
    match l {
        Layer::Dense(d) => {
            out.push(d.weight.as_slice().unwrap());
            out.push(d.bias.as_slice().unwrap());
        }
        Layer::Conv2d(c) => {
            out.push(c.weight.as_slice().unwrap());
            out.push(c.bias.as_slice().unwrap());
        }
        _ => {}
    }
}

fn push_layer_params_mut<'a>(l: &'a mut Layer, out: &mut Vec<&'a mut [f64]>) {
    match l {
        Layer::Dense(d) => {
            out.push(d.weight.as_slice_mut().unwrap());
            out.push(d.bias.as_slice_mut().unwrap());
        }
        Layer::Conv2d(c) => {
            out.push(c.weight.as_slice_mut().unwrap());
            out.push(c.bias.as_slice_mut().unwrap());
        }
        _ => {}
    }
}

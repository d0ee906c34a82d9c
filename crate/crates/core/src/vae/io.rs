//! `pwl-vae-v1` weight files.
//!
//! Layers are stored in forward order: the encoder trunk, the `mu_head` and
//! `logvar_head` entries, then the decoder. Every float is written with 17
//! significant digits so a save/load cycle reproduces the bits.

use std::fs;
use std::io;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use serde_json::ser::Formatter;

use super::{Conv, Dense, Layer, VaeModel};
use crate::error::{Error, Result};
use crate::ops::{ConvGeometry, Shape3};

pub const FORMAT_TAG: &str = "pwl-vae-v1";

/// Detector settings stored next to the weights so `test` reuses them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub lambda: f64,
    pub filter_window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub kind: String,
    pub shape: Vec<usize>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFile {
    pub format: String,
    pub n: usize,
    pub m: usize,
    pub layers: Vec<LayerRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector: Option<DetectorConfig>,
}

fn dense_record(kind: &str, d: &Dense) -> LayerRecord {
    LayerRecord {
        kind: kind.into(),
        shape: vec![d.outputs(), d.inputs()],
        weights: d.weight.iter().copied().collect(),
        bias: d.bias.to_vec(),
    }
}

fn layer_record(l: &Layer) -> LayerRecord {
    let bare = |kind: &str, shape: Vec<usize>| LayerRecord {
        kind: kind.into(),
        shape,
        weights: Vec::new(),
        bias: Vec::new(),
    };
    match l {
        Layer::Dense(d) => dense_record("dense", d),
        Layer::Conv2d(c) => {
            let g = c.geometry;
            LayerRecord {
                kind: "conv2d".into(),
                shape: vec![
                    g.out_channels,
                    g.input.channels,
                    g.kernel,
                    g.kernel,
                    g.stride,
                    g.padding,
                    g.input.height,
                    g.input.width,
                ],
                weights: c.weight.to_vec(),
                bias: c.bias.to_vec(),
            }
        }
        Layer::Relu => bare("relu", Vec::new()),
        Layer::MaxPool { shape, window } => bare(
            "maxpool2d",
            vec![shape.channels, shape.height, shape.width, *window],
        ),
        Layer::Upsample { shape, factor } => bare(
            "upsample2d",
            vec![shape.channels, shape.height, shape.width, *factor],
        ),
    }
}

impl WeightFile {
    pub fn from_model(model: &VaeModel, detector: Option<DetectorConfig>) -> Self {
        let mut layers: Vec<LayerRecord> = model.encoder().iter().map(layer_record).collect();
        layers.push(dense_record("mu_head", model.mu_head()));
        layers.push(dense_record("logvar_head", model.logvar_head()));
        layers.extend(model.decoder().iter().map(layer_record));
        Self {
            format: FORMAT_TAG.into(),
            n: model.n(),
            m: model.latent_dim(),
            layers,
            detector,
        }
    }

    pub fn to_model(&self) -> Result<VaeModel> {
        if self.format != FORMAT_TAG {
            return Err(parse_error("format", format!("unknown format tag {:?}", self.format)));
        }
        let mut encoder = Vec::new();
        let mut decoder = Vec::new();
        let mut mu = None;
        let mut logvar = None;
        for (i, rec) in self.layers.iter().enumerate() {
            let at = format!("layers[{i}]");
            match rec.kind.as_str() {
                "mu_head" | "logvar_head" => {
                    if mu.is_some() && rec.kind == "mu_head" || logvar.is_some() && rec.kind == "logvar_head" {
                        return Err(parse_error(&at, format!("duplicate {}", rec.kind)));
                    }
                    let d = dense_from(rec, &at)?;
                    if rec.kind == "mu_head" {
                        mu = Some(d);
                    } else {
                        logvar = Some(d);
                    }
                }
                _ => {
                    let layer = layer_from(rec, &at)?;
                    match (&mu, &logvar) {
                        (None, None) => encoder.push(layer),
                        (Some(_), Some(_)) => decoder.push(layer),
                        _ => return Err(parse_error(&at, "layer between the two heads".into())),
                    }
                }
            }
        }
        let (mu, logvar) = match (mu, logvar) {
            (Some(m), Some(l)) => (m, l),
            _ => return Err(parse_error("layers", "missing mu_head or logvar_head".into())),
        };
        VaeModel::from_parts(self.n, self.m, encoder, mu, logvar, decoder)
    }
}

fn parse_error(location: &str, message: String) -> Error {
    Error::Parse {
        location: location.into(),
        message,
    }
}

fn expect_shape(rec: &LayerRecord, at: &str, len: usize) -> Result<()> {
    if rec.shape.len() != len {
        return Err(parse_error(
            at,
            format!("{} shape needs {len} entries, got {}", rec.kind, rec.shape.len()),
        ));
    }
    Ok(())
}

fn expect_finite(values: &[f64], at: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(parse_error(at, "non-finite parameter".into()));
    }
    Ok(())
}

fn dense_from(rec: &LayerRecord, at: &str) -> Result<Dense> {
    expect_shape(rec, at, 2)?;
    let (out, inp) = (rec.shape[0], rec.shape[1]);
    if rec.weights.len() != out * inp || rec.bias.len() != out {
        return Err(parse_error(at, format!("dense {out}x{inp} has wrong parameter counts")));
    }
    expect_finite(&rec.weights, at)?;
    expect_finite(&rec.bias, at)?;
    Ok(Dense {
        weight: Array2::from_shape_vec((out, inp), rec.weights.clone())
            .map_err(|e| parse_error(at, e.to_string()))?,
        bias: Array1::from(rec.bias.clone()),
    })
}

fn layer_from(rec: &LayerRecord, at: &str) -> Result<Layer> {
    let no_params = |rec: &LayerRecord| {
        if rec.weights.is_empty() && rec.bias.is_empty() {
            Ok(())
        } else {
            Err(parse_error(at, format!("{} takes no parameters", rec.kind)))
        }
    };
    match rec.kind.as_str() {
        "dense" => Ok(Layer::Dense(dense_from(rec, at)?)),
        "relu" => {
            no_params(rec)?;
            Ok(Layer::Relu)
        }
        "conv2d" => {
            expect_shape(rec, at, 8)?;
            let s = &rec.shape;
            if s[2] != s[3] {
                return Err(parse_error(at, "only square kernels are supported".into()));
            }
            let geometry = ConvGeometry::new(Shape3::new(s[1], s[6], s[7]), s[0], s[2], s[4], s[5])
                .map_err(|e| parse_error(at, e.to_string()))?;
            if rec.weights.len() != geometry.weight_len() || rec.bias.len() != s[0] {
                return Err(parse_error(at, "conv2d has wrong parameter counts".into()));
            }
            expect_finite(&rec.weights, at)?;
            expect_finite(&rec.bias, at)?;
            Ok(Layer::Conv2d(Conv {
                geometry,
                weight: Array1::from(rec.weights.clone()),
                bias: Array1::from(rec.bias.clone()),
            }))
        }
        "maxpool2d" | "upsample2d" => {
            expect_shape(rec, at, 4)?;
            no_params(rec)?;
            let s = &rec.shape;
            let shape = Shape3::new(s[0], s[1], s[2]);
            if shape.is_empty() || s[3] == 0 {
                return Err(parse_error(at, format!("{} dimensions must be positive", rec.kind)));
            }
            Ok(if rec.kind == "maxpool2d" {
                Layer::MaxPool { shape, window: s[3] }
            } else {
                Layer::Upsample { shape, factor: s[3] }
            })
        }
        other => Err(parse_error(at, format!("unsupported layer kind {other:?}"))),
    }
}

/// Compact JSON with every float in `{:.16e}` form.
struct ExactFloats;

impl Formatter for ExactFloats {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

pub fn to_json(model: &VaeModel, detector: Option<DetectorConfig>) -> Result<String> {
    let file = WeightFile::from_model(model, detector);
    for (i, rec) in file.layers.iter().enumerate() {
        expect_finite(&rec.weights, &format!("layers[{i}]"))?;
        expect_finite(&rec.bias, &format!("layers[{i}]"))?;
    }
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, ExactFloats);
    file.serialize(&mut ser)
        .map_err(|e| Error::Numerical(format!("weight serialization: {e}")))?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serializer emits UTF-8"))
}

pub fn save_weights(model: &VaeModel, detector: Option<DetectorConfig>, path: &Path) -> Result<()> {
    fs::write(path, to_json(model, detector)?).map_err(|e| Error::io(path, e))
}

/// Parses a weight document; JSON errors report `line:column`.
pub fn load_weights_str(text: &str) -> Result<(VaeModel, Option<DetectorConfig>)> {
    let file: WeightFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        location: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    Ok((file.to_model()?, file.detector))
}

pub fn load_weights(path: &Path) -> Result<(VaeModel, Option<DetectorConfig>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    load_weights_str(&text).map_err(|e| match e {
        Error::Parse { location, message } => Error::Parse {
            location: format!("{}: {location}", path.display()),
            message,
        },
        other => other,
    })
}

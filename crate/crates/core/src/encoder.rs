//! Small convolutional image encoder producing `D`-dimensional features on a
//! stride-`s` grid.
//!
//! Three 3x3 convolutions with ReLU (strided so the product of strides is
//! `s`) followed by a pointwise projection to `D` channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::grid_dims;
use crate::grid::RgbImage;
use crate::params::{add_linear, Fwd, ParamStore};
use crate::rng::Rng;
use crate::tape::{ConvGeom, Mat, Var};

pub const PREFIX: &str = "encoder.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub stride: usize,
    pub channels: [usize; 3],
    pub output_dim: usize,
    pub frozen: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stride: 2,
            channels: [32, 64, 64],
            output_dim: 128,
            frozen: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 4].contains(&self.stride) {
            return Err(Error::Config(format!("encoder stride {} not in {{1, 2, 4}}", self.stride)));
        }
        if self.channels.contains(&0) || self.output_dim == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        Ok(())
    }

    fn stage_strides(&self) -> [usize; 3] {
        match self.stride {
            1 => [1, 1, 1],
            2 => [2, 1, 1],
            _ => [2, 2, 1],
        }
    }

    pub fn grid(&self, h: usize, w: usize) -> (usize, usize) {
        grid_dims(h, w, self.stride)
    }
}

pub fn init(store: &mut ParamStore, rng: &mut Rng, cfg: &EncoderConfig) {
    let mut c_in = 3;
    for (i, &c) in cfg.channels.iter().enumerate() {
        add_linear(store, rng, &format!("{PREFIX}conv{i}"), 9 * c_in, c, 2f64.sqrt());
        c_in = c;
    }
    add_linear(store, rng, &format!("{PREFIX}proj"), c_in, cfg.output_dim, 1.0);
}

/// Pixels as an `(h*w) x 3` matrix with values in `[0, 1]`.
pub fn image_to_mat(image: &RgbImage) -> Mat {
    Mat::from_shape_fn((image.len(), 3), |(i, c)| image.data()[i][c] as f64 / 255.0)
}

/// Encoder graph on an `(h*w) x 3` input; returns features and grid size.
pub fn forward(fwd: &mut Fwd<'_>, x: Var, h: usize, w: usize, cfg: &EncoderConfig) -> (Var, (usize, usize)) {
    let (mut x, mut h, mut w, mut c) = (x, h, w, 3);
    for (i, &stride) in cfg.stage_strides().iter().enumerate() {
        let geom = ConvGeom {
            height: h,
            width: w,
            channels: c,
            stride,
        };
        let cols = fwd.g.im2col(x, geom);
        let y = fwd.linear(cols, &format!("{PREFIX}conv{i}"));
        x = fwd.g.relu(y);
        (h, w) = geom.out_dims();
        c = cfg.channels[i];
    }
    (fwd.linear(x, &format!("{PREFIX}proj")), (h, w))
}

/// Inference on an `(h*w) x channels` pixel matrix.
pub fn encode_pixels(store: &ParamStore, cfg: &EncoderConfig, pixels: &Mat, h: usize, w: usize) -> Result<Mat> {
    if pixels.ncols() != 3 {
        return Err(Error::Input(format!("encoder expects 3 channels, got {}", pixels.ncols())));
    }
    if pixels.nrows() != h * w {
        return Err(Error::Shape(format!("{} pixels for a {h}x{w} image", pixels.nrows())));
    }
    let mut fwd = Fwd::inference(store);
    let x = fwd.g.constant_ref(pixels);
    let (out, _) = forward(&mut fwd, x, h, w, cfg);
    Ok(fwd.g.value(out).clone())
}

pub fn encode_image(store: &ParamStore, cfg: &EncoderConfig, image: &RgbImage) -> Result<Mat> {
    encode_pixels(store, cfg, &image_to_mat(image), image.height(), image.width())
}

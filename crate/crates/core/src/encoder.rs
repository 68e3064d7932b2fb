//! Shared convolutional feature extractor for support and query images.

use crate::error::{shape_err, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{he_normal, Binding, ParamId, ParamStore};
use rand::Rng;

/// A 2-D convolution with bias.
#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    /// Registers a He-initialised `c_in → c_out` layer with a `k×k` kernel and zero bias.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let kernel = store.add(
            format!("{name}.weight"),
            he_normal(&[c_out, c_in, k, k], c_in * k * k, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Self {
            kernel,
            bias,
            stride,
            padding: k / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var) -> Result<Var> {
        let y = g.conv2d(x, b[self.kernel], self.stride, self.padding)?;
        g.channel_bias(y, b[self.bias])
    }
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub layers: Vec<ConvLayer>,
    pub channels: usize,
}

impl EncoderParams {
    /// Total downsampling factor of the stack.
    pub const STRIDE: usize = 4;

    /// Four 3×3 layers: `1 → C/2 → C/2 (s2) → C → C (s2)`.
    pub fn init(store: &mut ParamStore, channels: usize, rng: &mut impl Rng) -> Self {
        let half = (channels / 2).max(1);
        let plan = [(1, half, 1), (half, half, 2), (half, channels, 1), (channels, channels, 2)];
        let layers = plan
            .iter()
            .enumerate()
            .map(|(i, &(c_in, c_out, stride))| {
                ConvLayer::init(store, &format!("encoder.conv{i}"), c_in, c_out, 3, stride, rng)
            })
            .collect();
        Self { layers, channels }
    }
}

/// Maps a `1×H×W` image to `C×H/4×W/4` features (ReLU after every layer).
pub fn encode(g: &mut Graph, b: &Binding, params: &EncoderParams, image: Var) -> Result<Var> {
    let shape = g.shape(image).to_vec();
    if shape.len() != 3 || shape[0] != 1 {
        return shape_err(format!("encoder expects a 1xHxW image, got {shape:?}"));
    }
    let s = EncoderParams::STRIDE;
    if !shape[1].is_multiple_of(s) || !shape[2].is_multiple_of(s) {
        return shape_err(format!(
            "image {}x{} not divisible by encoder stride {s}",
            shape[1], shape[2]
        ));
    }
    let mut x = image;
    for layer in &params.layers {
        let y = layer.forward(g, b, x)?;
        x = g.relu(y);
    }
    Ok(x)
}

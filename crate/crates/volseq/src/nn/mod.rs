//! Minimal neural-network kernels: channels-last feature maps, convolutions,
//! layer normalization, activations, linear layers and multi-head attention.
//!
//! Every operation comes as a `*_forward` / `*_backward` pair working on flat
//! `f64` slices. There is no autodiff tape; model modules compose these
//! kernels by hand and cache whatever the backward pass needs. All kernels
//! are deterministic: identical inputs produce identical bytes.

mod attention;
mod conv;
mod ops;

pub use attention::{
    attention_backward, attention_forward, AttentionCache, AttentionGrads, AttentionParams,
};
pub use conv::{
    depthwise_conv_backward, depthwise_conv_forward, tiled_conv_backward, tiled_conv_forward,
};
pub use ops::{
    dropout_backward, dropout_forward, gelu, gelu_backward, gelu_forward,
    global_avg_pool_backward, global_avg_pool_forward, layer_norm_backward, layer_norm_forward,
    linear_backward, linear_forward, log_softmax, sigmoid, softmax_stable, stable_sum,
    tanh_backward, tanh_forward, LayerNormCache, LN_EPS,
};

/// Dense 3D feature map in channels-last layout.
///
/// Voxel `(z, y, x)` of channel `c` lives at `((z*h + y)*w + x)*channels + c`,
/// so the channel vector at a spatial position is contiguous. That is the
/// layout every kernel in this module assumes.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatMap {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatMap {
    pub fn zeros(d: usize, h: usize, w: usize, channels: usize) -> Self {
        FeatMap { d, h, w, channels, data: vec![0.0; d * h * w * channels] }
    }

    pub fn from_data(d: usize, h: usize, w: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), d * h * w * channels, "feature map size mismatch");
        FeatMap { d, h, w, channels, data }
    }

    /// Number of spatial positions (`d*h*w`).
    pub fn n_pos(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn spatial_dims(&self) -> (usize, usize, usize) {
        (self.d, self.h, self.w)
    }

    #[inline]
    pub fn pos_index(&self, z: usize, y: usize, x: usize) -> usize {
        ((z * self.h + y) * self.w + x) * self.channels
    }

    /// Channel vector at one spatial position.
    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> &[f64] {
        let i = self.pos_index(z, y, x);
        &self.data[i..i + self.channels]
    }
}

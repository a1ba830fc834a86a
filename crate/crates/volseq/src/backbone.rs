//! 3D ConvNeXt-style feature extractor.
//!
//! Patchify stem (`3x3x3`, stride 3, then channel layer norm), four stages of
//! residual blocks (depthwise `3x3x3` -> LN -> pointwise expand 4x -> GELU ->
//! pointwise project -> residual add), stage transitions of LN + `2x2x2`
//! stride-2 convolution doubling channels, and a global-average-pool + LN
//! head producing an embedding of dimension `8 * base_channels`.

use serde::{Deserialize, Serialize};

use crate::nn::{
    depthwise_conv_backward, depthwise_conv_forward, gelu_backward, gelu_forward,
    global_avg_pool_backward, global_avg_pool_forward, layer_norm_backward, layer_norm_forward,
    linear_backward, linear_forward, tiled_conv_backward, tiled_conv_forward, FeatMap,
    LayerNormCache,
};
use crate::rng;
use crate::store::{GradStore, ParamInit, ParameterStore};
use crate::volumes::Volume;

/// Model size tags, femto through tiny.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "F")]
    Femto,
    #[serde(rename = "P")]
    Pico,
    #[serde(rename = "N")]
    Nano,
    #[serde(rename = "T")]
    Tiny,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Variant> {
        match s.to_ascii_uppercase().as_str() {
            "F" | "FEMTO" => Some(Variant::Femto),
            "P" | "PICO" => Some(Variant::Pico),
            "N" | "NANO" => Some(Variant::Nano),
            "T" | "TINY" => Some(Variant::Tiny),
            _ => None,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Variant::Femto => "F",
            Variant::Pico => "P",
            Variant::Nano => "N",
            Variant::Tiny => "T",
        }
    }

    pub fn base_channels(&self) -> usize {
        match self {
            Variant::Femto => 48,
            Variant::Pico => 64,
            Variant::Nano => 80,
            Variant::Tiny => 96,
        }
    }

    pub fn blocks_per_stage(&self) -> [usize; 4] {
        match self {
            Variant::Femto | Variant::Pico => [2, 2, 6, 2],
            Variant::Nano => [2, 2, 8, 2],
            Variant::Tiny => [3, 3, 9, 3],
        }
    }

    /// Transformer encoder depth paired with this backbone size.
    pub fn encoder_layers(&self) -> usize {
        match self {
            Variant::Femto | Variant::Pico => 4,
            Variant::Nano | Variant::Tiny => 6,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Backbone hyperparameters. The embedding dimension is pinned to
/// `8 * base_channels` by the stage doubling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub base_channels: usize,
    pub blocks_per_stage: [usize; 4],
    pub input_channels: usize,
}

impl BackboneConfig {
    pub fn from_variant(variant: Variant, input_channels: usize) -> Self {
        BackboneConfig {
            base_channels: variant.base_channels(),
            blocks_per_stage: variant.blocks_per_stage(),
            input_channels,
        }
    }

    /// Channel count of stage `s` (0-based): `C * 2^s`.
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn embedding_dim(&self) -> usize {
        8 * self.base_channels
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.base_channels == 0 || self.input_channels == 0 {
            return Err("channel counts must be positive".into());
        }
        if self.blocks_per_stage.iter().any(|&b| b == 0) {
            return Err("every stage needs at least one block".into());
        }
        Ok(())
    }
}

const STEM_K: [usize; 3] = [3, 3, 3];
const DS_K: [usize; 3] = [2, 2, 2];

#[derive(Clone, Debug)]
struct BlockNames {
    dw_w: String,
    dw_b: String,
    ln_g: String,
    ln_b: String,
    pw1_w: String,
    pw1_b: String,
    pw2_w: String,
    pw2_b: String,
}

impl BlockNames {
    fn new(prefix: &str) -> Self {
        BlockNames {
            dw_w: format!("{prefix}.dw.weight"),
            dw_b: format!("{prefix}.dw.bias"),
            ln_g: format!("{prefix}.norm.gamma"),
            ln_b: format!("{prefix}.norm.beta"),
            pw1_w: format!("{prefix}.pw1.weight"),
            pw1_b: format!("{prefix}.pw1.bias"),
            pw2_w: format!("{prefix}.pw2.weight"),
            pw2_b: format!("{prefix}.pw2.bias"),
        }
    }
}

#[derive(Clone, Debug)]
struct DsNames {
    ln_g: String,
    ln_b: String,
    conv_w: String,
    conv_b: String,
}

/// The feature extractor; parameters live in a [`ParameterStore`] under the
/// prefix given at construction (`backbone.` in the full model).
#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    prefix: String,
    stem_w: String,
    stem_b: String,
    stem_ln_g: String,
    stem_ln_b: String,
    stages: Vec<Vec<BlockNames>>,
    downsamples: Vec<DsNames>,
    head_ln_g: String,
    head_ln_b: String,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, prefix: &str) -> Self {
        let stages = (0..4)
            .map(|s| {
                (0..cfg.blocks_per_stage[s])
                    .map(|b| BlockNames::new(&format!("{prefix}stage{s}.block{b}")))
                    .collect()
            })
            .collect();
        let downsamples = (0..3)
            .map(|i| DsNames {
                ln_g: format!("{prefix}ds{i}.norm.gamma"),
                ln_b: format!("{prefix}ds{i}.norm.beta"),
                conv_w: format!("{prefix}ds{i}.conv.weight"),
                conv_b: format!("{prefix}ds{i}.conv.bias"),
            })
            .collect();
        Backbone {
            cfg,
            prefix: prefix.to_string(),
            stem_w: format!("{prefix}stem.conv.weight"),
            stem_b: format!("{prefix}stem.conv.bias"),
            stem_ln_g: format!("{prefix}stem.norm.gamma"),
            stem_ln_b: format!("{prefix}stem.norm.beta"),
            stages,
            downsamples,
            head_ln_g: format!("{prefix}head.norm.gamma"),
            head_ln_b: format!("{prefix}head.norm.beta"),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Inserts freshly initialized parameters in a fixed order: weights from
    /// `N(0, 0.02)`, biases zero, norm scales one.
    pub fn init_params<R: rand::Rng>(&self, store: &mut ParameterStore, rng: &mut R) {
        let cfg = &self.cfg;
        let mut init = ParamInit::new(store, rng);
        let c0 = cfg.stage_channels(0);
        init.weight(&self.stem_w, vec![cfg.input_channels, 27, c0]);
        init.bias(&self.stem_b, c0);
        init.norm(&self.stem_ln_g, &self.stem_ln_b, c0);
        for (s, blocks) in self.stages.iter().enumerate() {
            let c = cfg.stage_channels(s);
            for names in blocks {
                init.weight(&names.dw_w, vec![27, c]);
                init.bias(&names.dw_b, c);
                init.norm(&names.ln_g, &names.ln_b, c);
                init.weight(&names.pw1_w, vec![c, 4 * c]);
                init.bias(&names.pw1_b, 4 * c);
                init.weight(&names.pw2_w, vec![4 * c, c]);
                init.bias(&names.pw2_b, c);
            }
            if s < 3 {
                let c_out = cfg.stage_channels(s + 1);
                let ds = &self.downsamples[s];
                init.norm(&ds.ln_g, &ds.ln_b, c);
                init.weight(&ds.conv_w, vec![c, 8, c_out]);
                init.bias(&ds.conv_b, c_out);
            }
        }
        let h = cfg.embedding_dim();
        init.norm(&self.head_ln_g, &self.head_ln_b, h);
    }

    /// Patchify stem: `3x3x3` stride-3 convolution to `base_channels`, then
    /// channel-wise layer normalization. Spatial dims must divide by 3.
    pub fn patchify_stem(&self, store: &ParameterStore, x: &FeatMap) -> FeatMap {
        let (_, _, normed) = self.stem_cached(store, x);
        normed
    }

    fn stem_cached(
        &self,
        store: &ParameterStore,
        x: &FeatMap,
    ) -> (FeatMap, LayerNormCache, FeatMap) {
        assert!(
            x.d % 3 == 0 && x.h % 3 == 0 && x.w % 3 == 0,
            "stem input dims {:?} not divisible by 3",
            (x.d, x.h, x.w)
        );
        let c0 = self.cfg.stage_channels(0);
        let conv = tiled_conv_forward(
            x,
            STEM_K,
            c0,
            &store.expect(&self.stem_w).data,
            &store.expect(&self.stem_b).data,
        );
        let mut normed = FeatMap::zeros(conv.d, conv.h, conv.w, c0);
        let cache = layer_norm_forward(
            conv.n_pos(),
            c0,
            &conv.data,
            &store.expect(&self.stem_ln_g).data,
            &store.expect(&self.stem_ln_b).data,
            &mut normed.data,
        );
        (conv, cache, normed)
    }

    /// One residual block; `prefix` addresses its tensors in the store.
    pub fn block_forward(&self, store: &ParameterStore, stage: usize, block: usize, x: &FeatMap) -> FeatMap {
        let (out, _) = block_forward_cached(store, &self.stages[stage][block], x);
        out
    }

    /// Stage transition: layer norm, then `2x2x2` stride-2 convolution
    /// doubling channels (kernel clamped on degenerate axes).
    pub fn downsample(&self, store: &ParameterStore, index: usize, x: &FeatMap) -> FeatMap {
        let (out, _) = downsample_cached(store, &self.downsamples[index], self.cfg.stage_channels(index + 1), x);
        out
    }

    /// Full forward pass without gradient bookkeeping.
    pub fn forward_infer(&self, store: &ParameterStore, x: &FeatMap) -> Vec<f64> {
        let mut map = self.patchify_stem(store, x);
        for s in 0..4 {
            for b in 0..self.cfg.blocks_per_stage[s] {
                map = self.block_forward(store, s, b, &map);
            }
            if s < 3 {
                map = self.downsample(store, s, &map);
            }
        }
        let h = self.cfg.embedding_dim();
        let mut pooled = vec![0.0; h];
        global_avg_pool_forward(map.n_pos(), h, &map.data, &mut pooled);
        let mut out = vec![0.0; h];
        layer_norm_forward(
            1,
            h,
            &pooled,
            &store.expect(&self.head_ln_g).data,
            &store.expect(&self.head_ln_b).data,
            &mut out,
        );
        out
    }

    /// Forward pass retaining every intermediate needed by [`Self::backward`].
    pub fn forward_train(&self, store: &ParameterStore, x: &FeatMap) -> (Vec<f64>, BackboneCache) {
        let (stem_conv, stem_ln, stem_out) = self.stem_cached(store, x);
        let mut cache = BackboneCache {
            input: x.clone(),
            stem_conv,
            stem_ln,
            stages: Vec::with_capacity(4),
            downsamples: Vec::with_capacity(3),
            final_map: FeatMap::zeros(0, 0, 0, 0),
            pooled: Vec::new(),
            head_ln: LayerNormCache::default(),
        };
        let mut map = stem_out;
        for s in 0..4 {
            let mut blocks = Vec::with_capacity(self.cfg.blocks_per_stage[s]);
            for b in 0..self.cfg.blocks_per_stage[s] {
                let (out, bc) = block_forward_cached(store, &self.stages[s][b], &map);
                blocks.push(bc);
                map = out;
            }
            cache.stages.push(blocks);
            if s < 3 {
                let (out, dc) =
                    downsample_cached(store, &self.downsamples[s], self.cfg.stage_channels(s + 1), &map);
                cache.downsamples.push(dc);
                map = out;
            }
        }
        let h = self.cfg.embedding_dim();
        let mut pooled = vec![0.0; h];
        global_avg_pool_forward(map.n_pos(), h, &map.data, &mut pooled);
        let mut out = vec![0.0; h];
        cache.head_ln = layer_norm_forward(
            1,
            h,
            &pooled,
            &store.expect(&self.head_ln_g).data,
            &store.expect(&self.head_ln_b).data,
            &mut out,
        );
        cache.pooled = pooled;
        cache.final_map = map;
        (out, cache)
    }

    /// Accumulates parameter gradients for one sample; returns the input
    /// gradient.
    pub fn backward(
        &self,
        store: &ParameterStore,
        cache: &BackboneCache,
        d_embedding: &[f64],
        grads: &mut GradStore,
    ) -> FeatMap {
        let h = self.cfg.embedding_dim();
        let mut d_pooled = vec![0.0; h];
        {
            let (dg, db) = grads.pair_mut(&self.head_ln_g, &self.head_ln_b);
            layer_norm_backward(
                1,
                h,
                &cache.pooled,
                &store.expect(&self.head_ln_g).data,
                &cache.head_ln,
                d_embedding,
                &mut d_pooled,
                dg,
                db,
            );
        }
        let map = &cache.final_map;
        let mut d_map = FeatMap::zeros(map.d, map.h, map.w, map.channels);
        global_avg_pool_backward(map.n_pos(), h, &d_pooled, &mut d_map.data);

        for s in (0..4).rev() {
            if s < 3 {
                d_map = self.downsample_backward(store, s, &cache.downsamples[s], &d_map, grads);
            }
            for b in (0..self.cfg.blocks_per_stage[s]).rev() {
                d_map =
                    block_backward(store, &self.stages[s][b], &cache.stages[s][b], &d_map, grads);
            }
        }

        // Stem: LN backward into the conv output, then the tiled conv.
        let c0 = self.cfg.stage_channels(0);
        let conv = &cache.stem_conv;
        let mut d_conv = FeatMap::zeros(conv.d, conv.h, conv.w, c0);
        {
            let (dg, db) = grads.pair_mut(&self.stem_ln_g, &self.stem_ln_b);
            layer_norm_backward(
                conv.n_pos(),
                c0,
                &conv.data,
                &store.expect(&self.stem_ln_g).data,
                &cache.stem_ln,
                &d_map.data,
                &mut d_conv.data,
                dg,
                db,
            );
        }
        let input = &cache.input;
        let mut d_input = FeatMap::zeros(input.d, input.h, input.w, input.channels);
        let w = store.expect(&self.stem_w).data.clone();
        {
            let (dw, db) = grads.pair_mut(&self.stem_w, &self.stem_b);
            tiled_conv_backward(input, STEM_K, c0, &w, &d_conv, &mut d_input, dw, db);
        }
        d_input
    }

    fn downsample_backward(
        &self,
        store: &ParameterStore,
        index: usize,
        cache: &DsCache,
        dy: &FeatMap,
        grads: &mut GradStore,
    ) -> FeatMap {
        let names = &self.downsamples[index];
        let c_in = self.cfg.stage_channels(index);
        let c_out = self.cfg.stage_channels(index + 1);
        let ln_out = &cache.ln_out;
        let mut d_lnout = FeatMap::zeros(ln_out.d, ln_out.h, ln_out.w, c_in);
        let w = store.expect(&names.conv_w).data.clone();
        {
            let (dw, db) = grads.pair_mut(&names.conv_w, &names.conv_b);
            tiled_conv_backward(ln_out, DS_K, c_out, &w, dy, &mut d_lnout, dw, db);
        }
        let x = &cache.x;
        let mut dx = FeatMap::zeros(x.d, x.h, x.w, c_in);
        {
            let (dg, db) = grads.pair_mut(&names.ln_g, &names.ln_b);
            layer_norm_backward(
                x.n_pos(),
                c_in,
                &x.data,
                &store.expect(&names.ln_g).data,
                &cache.ln,
                &d_lnout.data,
                &mut dx.data,
                dg,
                db,
            );
        }
        dx
    }

    /// Converts a volume into the channels-last input layout.
    pub fn input_from_volume(v: &Volume) -> FeatMap {
        let [d, h, w] = v.dims;
        let mut map = FeatMap::zeros(d, h, w, v.channels);
        for c in 0..v.channels {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let i = map.pos_index(z, y, x) + c;
                        map.data[i] = v.data[v.index(c, z, y, x)] as f64;
                    }
                }
            }
        }
        map
    }
}

/// Builds a fresh backbone parameter store for `variant`.
pub fn build_backbone(
    variant: Variant,
    input_channels: usize,
    init_seed: u64,
) -> (BackboneConfig, ParameterStore) {
    let cfg = BackboneConfig::from_variant(variant, input_channels);
    let bb = Backbone::new(cfg.clone(), "backbone.");
    let mut store = ParameterStore::new();
    bb.init_params(&mut store, &mut rng::stream(init_seed));
    (cfg, store)
}

/// Per-sample intermediates retained by [`Backbone::forward_train`].
pub struct BackboneCache {
    input: FeatMap,
    stem_conv: FeatMap,
    stem_ln: LayerNormCache,
    stages: Vec<Vec<BlockCache>>,
    downsamples: Vec<DsCache>,
    final_map: FeatMap,
    pooled: Vec<f64>,
    head_ln: LayerNormCache,
}

struct BlockCache {
    x: FeatMap,
    dw_out: FeatMap,
    ln: LayerNormCache,
    ln_out: Vec<f64>,
    pw1_out: Vec<f64>,
    gelu_out: Vec<f64>,
}

struct DsCache {
    x: FeatMap,
    ln: LayerNormCache,
    ln_out: FeatMap,
}

fn block_forward_cached(
    store: &ParameterStore,
    names: &BlockNames,
    x: &FeatMap,
) -> (FeatMap, BlockCache) {
    let c = x.channels;
    let rows = x.n_pos();
    let dw_out = depthwise_conv_forward(
        x,
        &store.expect(&names.dw_w).data,
        &store.expect(&names.dw_b).data,
    );
    let mut ln_out = vec![0.0; rows * c];
    let ln = layer_norm_forward(
        rows,
        c,
        &dw_out.data,
        &store.expect(&names.ln_g).data,
        &store.expect(&names.ln_b).data,
        &mut ln_out,
    );
    let mut pw1_out = vec![0.0; rows * 4 * c];
    linear_forward(
        rows,
        c,
        4 * c,
        &ln_out,
        &store.expect(&names.pw1_w).data,
        &store.expect(&names.pw1_b).data,
        &mut pw1_out,
    );
    let mut gelu_out = vec![0.0; rows * 4 * c];
    gelu_forward(&pw1_out, &mut gelu_out);
    let mut out = FeatMap::zeros(x.d, x.h, x.w, c);
    linear_forward(
        rows,
        4 * c,
        c,
        &gelu_out,
        &store.expect(&names.pw2_w).data,
        &store.expect(&names.pw2_b).data,
        &mut out.data,
    );
    for (o, &xi) in out.data.iter_mut().zip(&x.data) {
        *o += xi;
    }
    (out, BlockCache { x: x.clone(), dw_out, ln, ln_out, pw1_out, gelu_out })
}

fn block_backward(
    store: &ParameterStore,
    names: &BlockNames,
    cache: &BlockCache,
    dy: &FeatMap,
    grads: &mut GradStore,
) -> FeatMap {
    let c = cache.x.channels;
    let rows = cache.x.n_pos();

    let mut d_gelu = vec![0.0; rows * 4 * c];
    {
        let (dw, db) = grads.pair_mut(&names.pw2_w, &names.pw2_b);
        linear_backward(
            rows,
            4 * c,
            c,
            &cache.gelu_out,
            &store.expect(&names.pw2_w).data,
            &dy.data,
            &mut d_gelu,
            dw,
            db,
        );
    }
    let mut d_pw1 = vec![0.0; rows * 4 * c];
    gelu_backward(&cache.pw1_out, &d_gelu, &mut d_pw1);
    let mut d_lnout = vec![0.0; rows * c];
    {
        let (dw, db) = grads.pair_mut(&names.pw1_w, &names.pw1_b);
        linear_backward(
            rows,
            c,
            4 * c,
            &cache.ln_out,
            &store.expect(&names.pw1_w).data,
            &d_pw1,
            &mut d_lnout,
            dw,
            db,
        );
    }
    let mut d_dwout = FeatMap::zeros(cache.x.d, cache.x.h, cache.x.w, c);
    {
        let (dg, db) = grads.pair_mut(&names.ln_g, &names.ln_b);
        layer_norm_backward(
            rows,
            c,
            &cache.dw_out.data,
            &store.expect(&names.ln_g).data,
            &cache.ln,
            &d_lnout,
            &mut d_dwout.data,
            dg,
            db,
        );
    }
    let mut dx = FeatMap::zeros(cache.x.d, cache.x.h, cache.x.w, c);
    let w = store.expect(&names.dw_w).data.clone();
    {
        let (dw, db) = grads.pair_mut(&names.dw_w, &names.dw_b);
        depthwise_conv_backward(&cache.x, &w, &d_dwout, &mut dx, dw, db);
    }
    // Residual path.
    for (d, &g) in dx.data.iter_mut().zip(&dy.data) {
        *d += g;
    }
    dx
}

fn downsample_cached(
    store: &ParameterStore,
    names: &DsNames,
    c_out: usize,
    x: &FeatMap,
) -> (FeatMap, DsCache) {
    let c = x.channels;
    let rows = x.n_pos();
    let mut ln_out = FeatMap::zeros(x.d, x.h, x.w, c);
    let ln = layer_norm_forward(
        rows,
        c,
        &x.data,
        &store.expect(&names.ln_g).data,
        &store.expect(&names.ln_b).data,
        &mut ln_out.data,
    );
    let out = tiled_conv_forward(
        &ln_out,
        DS_K,
        c_out,
        &store.expect(&names.conv_w).data,
        &store.expect(&names.conv_b).data,
    );
    (out, DsCache { x: x.clone(), ln, ln_out })
}

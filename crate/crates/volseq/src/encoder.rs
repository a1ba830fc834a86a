//! Time-aware transformer encoder and classification head.
//!
//! Visit embeddings are prepended with a learnable `[cls]` token, offset by
//! sinusoidal positional encodings of the square-root time distance to the
//! sequence anchor (diagnosis date for positives, last visit otherwise), and
//! passed through Pre-LN encoder layers. The `[cls]` hidden state feeds a
//! pooling head (linear, tanh, layer norm, linear) whose sigmoid is the
//! predicted probability.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    attention_backward, attention_forward, dropout_backward, dropout_forward, gelu_backward,
    gelu_forward, layer_norm_backward, layer_norm_forward, linear_backward, linear_forward,
    sigmoid, tanh_backward, tanh_forward, AttentionCache, AttentionGrads, AttentionParams,
    LayerNormCache,
};
use crate::rng::SeedRng;
use crate::store::{GradStore, ParamInit, ParameterStore};
use crate::volumes::LabeledSequence;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("negative time distance: visit at {timestamp} is after anchor {anchor}")]
    NegativeTimeDelta { anchor: f64, timestamp: f64 },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("hidden size {0} must be even for paired sin/cos encodings")]
    OddHidden(usize),
}

/// Encoder hyperparameters. `heads = hidden / 128` for the standard variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl EncoderConfig {
    /// Standard geometry for a backbone embedding width: `heads = H/128`
    /// (at least one) and a 4x feed-forward expansion.
    pub fn for_hidden(hidden: usize, layers: usize, max_len: usize) -> Self {
        EncoderConfig {
            hidden,
            layers,
            heads: (hidden / 128).max(1),
            ff_dim: 4 * hidden,
            dropout: 0.2,
            max_len,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.hidden == 0 || self.hidden % 2 != 0 {
            return Err("hidden size must be positive and even".into());
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err("hidden size must divide evenly into heads".into());
        }
        if self.max_len < 1 {
            return Err("max sequence length must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err("dropout must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Per-token square-root time distances with the `[cls]` zero prepended.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaVector(pub Vec<f64>);

impl DeltaVector {
    pub fn new(values: Vec<f64>) -> Self {
        assert!(values.first().map(|&v| v == 0.0).unwrap_or(false), "cls delta must be 0");
        assert!(values.iter().all(|v| v.is_finite() && *v >= 0.0));
        DeltaVector(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `delta_i = sqrt(anchor - t_i)` per visit, `0` prepended for `[cls]`.
///
/// The square root is applied exactly once here; the positional encoding
/// consumes these values as-is.
pub fn compute_time_deltas(seq: &LabeledSequence) -> Result<DeltaVector, EncoderError> {
    let mut out = Vec::with_capacity(seq.visits.len() + 1);
    out.push(0.0);
    for v in &seq.visits {
        let dist = seq.anchor - v.timestamp;
        if dist < 0.0 {
            return Err(EncoderError::NegativeTimeDelta {
                anchor: seq.anchor,
                timestamp: v.timestamp,
            });
        }
        out.push(dist.sqrt());
    }
    Ok(DeltaVector(out))
}

/// Sinusoidal positional encodings over transformed time distances. Row `i`,
/// pair `k`: `sin(u_i / 10000^(2k/H))` and `cos(u_i / 10000^(2k/H))`.
pub fn sinusoidal_pe(delta: &DeltaVector, h: usize) -> Result<Vec<f64>, EncoderError> {
    if h == 0 || h % 2 != 0 {
        return Err(EncoderError::OddHidden(h));
    }
    let tokens = delta.len();
    let mut pe = vec![0.0; tokens * h];
    for (i, &u) in delta.0.iter().enumerate() {
        let row = &mut pe[i * h..(i + 1) * h];
        for k in 0..h / 2 {
            let freq = 10000f64.powf(2.0 * k as f64 / h as f64);
            let arg = u / freq;
            row[2 * k] = arg.sin();
            row[2 * k + 1] = arg.cos();
        }
    }
    Ok(pe)
}

/// One assembled input sequence: `[cls]` token plus visit embeddings, each
/// offset by its positional encoding row.
pub fn assemble_sequence(
    embeddings: &[Vec<f64>],
    cls_token: &[f64],
    pe: &[f64],
) -> Result<Vec<f64>, EncoderError> {
    let h = cls_token.len();
    let tokens = embeddings.len() + 1;
    if pe.len() != tokens * h {
        return Err(EncoderError::LengthMismatch(format!(
            "PE has {} entries, expected {tokens} tokens x {h}",
            pe.len(),
        )));
    }
    for (i, e) in embeddings.iter().enumerate() {
        if e.len() != h {
            return Err(EncoderError::LengthMismatch(format!(
                "embedding {i} has dim {}, expected {h}",
                e.len()
            )));
        }
    }
    let mut out = vec![0.0; tokens * h];
    for j in 0..h {
        out[j] = cls_token[j] + pe[j];
    }
    for (i, e) in embeddings.iter().enumerate() {
        let row = &mut out[(i + 1) * h..(i + 2) * h];
        let pe_row = &pe[(i + 1) * h..(i + 2) * h];
        for j in 0..h {
            row[j] = e[j] + pe_row[j];
        }
    }
    Ok(out)
}

/// Right-padded batch of assembled sequences with an attention mask
/// (`true` marks a real token).
#[derive(Clone, Debug)]
pub struct SequenceBatch {
    pub n_seq: usize,
    pub tokens: usize,
    pub h: usize,
    pub data: Vec<f64>,
    pub mask: Vec<bool>,
}

impl SequenceBatch {
    /// Pads per-sequence token matrices to a common length.
    pub fn from_sequences(seqs: Vec<Vec<f64>>, h: usize) -> Self {
        let n_seq = seqs.len();
        let tokens = seqs.iter().map(|s| s.len() / h).max().unwrap_or(0);
        let mut data = vec![0.0; n_seq * tokens * h];
        let mut mask = vec![false; n_seq * tokens];
        for (s, seq) in seqs.iter().enumerate() {
            let t = seq.len() / h;
            data[s * tokens * h..s * tokens * h + seq.len()].copy_from_slice(seq);
            for m in &mut mask[s * tokens..s * tokens + t] {
                *m = true;
            }
        }
        SequenceBatch { n_seq, tokens, h, data, mask }
    }

    pub fn seq_data(&self, s: usize) -> &[f64] {
        &self.data[s * self.tokens * self.h..(s + 1) * self.tokens * self.h]
    }

    pub fn seq_mask(&self, s: usize) -> &[bool] {
        &self.mask[s * self.tokens..(s + 1) * self.tokens]
    }

    /// Real token count of sequence `s`.
    pub fn seq_len(&self, s: usize) -> usize {
        self.seq_mask(s).iter().filter(|&&m| m).count()
    }
}

struct LayerNames {
    ln1_g: String,
    ln1_b: String,
    wq: String,
    bq: String,
    wk: String,
    bk: String,
    wv: String,
    bv: String,
    wo: String,
    bo: String,
    ln2_g: String,
    ln2_b: String,
    ff1_w: String,
    ff1_b: String,
    ff2_w: String,
    ff2_b: String,
}

impl LayerNames {
    fn new(prefix: &str, layer: usize) -> Self {
        let p = format!("{prefix}layer{layer}");
        LayerNames {
            ln1_g: format!("{p}.ln1.gamma"),
            ln1_b: format!("{p}.ln1.beta"),
            wq: format!("{p}.attn.wq.weight"),
            bq: format!("{p}.attn.wq.bias"),
            wk: format!("{p}.attn.wk.weight"),
            bk: format!("{p}.attn.wk.bias"),
            wv: format!("{p}.attn.wv.weight"),
            bv: format!("{p}.attn.wv.bias"),
            wo: format!("{p}.attn.wo.weight"),
            bo: format!("{p}.attn.wo.bias"),
            ln2_g: format!("{p}.ln2.gamma"),
            ln2_b: format!("{p}.ln2.beta"),
            ff1_w: format!("{p}.ff1.weight"),
            ff1_b: format!("{p}.ff1.bias"),
            ff2_w: format!("{p}.ff2.weight"),
            ff2_b: format!("{p}.ff2.bias"),
        }
    }
}

/// Pre-LN transformer encoder over assembled sequences.
pub struct Encoder {
    pub cfg: EncoderConfig,
    prefix: String,
    cls: String,
    layers: Vec<LayerNames>,
    final_g: String,
    final_b: String,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, prefix: &str) -> Self {
        let layers = (0..cfg.layers).map(|l| LayerNames::new(prefix, l)).collect();
        Encoder {
            cfg,
            prefix: prefix.to_string(),
            cls: format!("{prefix}cls_token"),
            layers,
            final_g: format!("{prefix}final_norm.gamma"),
            final_b: format!("{prefix}final_norm.beta"),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn cls_token<'a>(&self, store: &'a ParameterStore) -> &'a [f64] {
        &store.expect(&self.cls).data
    }

    pub fn init_params<R: rand::Rng>(&self, store: &mut ParameterStore, rng: &mut R) {
        let h = self.cfg.hidden;
        let ff = self.cfg.ff_dim;
        let mut init = ParamInit::new(store, rng);
        init.token(&self.cls, vec![h]);
        for l in &self.layers {
            init.norm(&l.ln1_g, &l.ln1_b, h);
            for (w, b) in [(&l.wq, &l.bq), (&l.wk, &l.bk), (&l.wv, &l.bv), (&l.wo, &l.bo)] {
                init.weight(w, vec![h, h]);
                init.bias(b, h);
            }
            init.norm(&l.ln2_g, &l.ln2_b, h);
            init.weight(&l.ff1_w, vec![h, ff]);
            init.bias(&l.ff1_b, ff);
            init.weight(&l.ff2_w, vec![ff, h]);
            init.bias(&l.ff2_b, h);
        }
        init.norm(&self.final_g, &self.final_b, h);
    }

    /// Forward over a padded batch. `dropout_rng` enables training mode;
    /// evaluation (`None`) is deterministic. Returns final hidden states in
    /// batch layout plus the cache for [`Self::backward`].
    pub fn forward(
        &self,
        store: &ParameterStore,
        batch: &SequenceBatch,
        mut dropout_rng: Option<&mut SeedRng>,
    ) -> (Vec<f64>, EncoderCache) {
        let h = self.cfg.hidden;
        let mut out = vec![0.0; batch.data.len()];
        let mut seqs = Vec::with_capacity(batch.n_seq);
        for s in 0..batch.n_seq {
            let (y, cache) = self.forward_seq(
                store,
                batch.seq_data(s),
                batch.seq_mask(s),
                dropout_rng.as_deref_mut(),
            );
            out[s * batch.tokens * h..(s + 1) * batch.tokens * h].copy_from_slice(&y);
            seqs.push(cache);
        }
        (out, EncoderCache { seqs })
    }

    /// The `[cls]` hidden state of sequence `s` from a forward output.
    pub fn cls_state<'a>(&self, batch: &SequenceBatch, out: &'a [f64], s: usize) -> &'a [f64] {
        let h = self.cfg.hidden;
        &out[s * batch.tokens * h..s * batch.tokens * h + h]
    }

    fn forward_seq(
        &self,
        store: &ParameterStore,
        x0: &[f64],
        mask: &[bool],
        mut dropout_rng: Option<&mut SeedRng>,
    ) -> (Vec<f64>, SeqCache) {
        let h = self.cfg.hidden;
        let ff = self.cfg.ff_dim;
        let tokens = mask.len();
        let p_drop = self.cfg.dropout;
        let mut x = x0.to_vec();
        let mut layers = Vec::with_capacity(self.cfg.layers);
        for names in &self.layers {
            let lx0 = x.clone();
            let mut normed1 = vec![0.0; tokens * h];
            let ln1 = layer_norm_forward(
                tokens,
                h,
                &lx0,
                &store.expect(&names.ln1_g).data,
                &store.expect(&names.ln1_b).data,
                &mut normed1,
            );
            let params = self.attn_params(store, names);
            let (mut attn_y, attn) =
                attention_forward(tokens, h, self.cfg.heads, &normed1, mask, &params);
            let drop1 = match dropout_rng.as_deref_mut() {
                Some(rng) => dropout_forward(&mut attn_y, p_drop, rng),
                None => Vec::new(),
            };
            for i in 0..x.len() {
                x[i] += attn_y[i];
            }

            let x1 = x.clone();
            let mut normed2 = vec![0.0; tokens * h];
            let ln2 = layer_norm_forward(
                tokens,
                h,
                &x1,
                &store.expect(&names.ln2_g).data,
                &store.expect(&names.ln2_b).data,
                &mut normed2,
            );
            let mut ff_pre = vec![0.0; tokens * ff];
            linear_forward(
                tokens,
                h,
                ff,
                &normed2,
                &store.expect(&names.ff1_w).data,
                &store.expect(&names.ff1_b).data,
                &mut ff_pre,
            );
            let mut ff_gelu = vec![0.0; tokens * ff];
            gelu_forward(&ff_pre, &mut ff_gelu);
            let mut ff_y = vec![0.0; tokens * h];
            linear_forward(
                tokens,
                ff,
                h,
                &ff_gelu,
                &store.expect(&names.ff2_w).data,
                &store.expect(&names.ff2_b).data,
                &mut ff_y,
            );
            let drop2 = match dropout_rng.as_deref_mut() {
                Some(rng) => dropout_forward(&mut ff_y, p_drop, rng),
                None => Vec::new(),
            };
            for i in 0..x.len() {
                x[i] += ff_y[i];
            }
            layers.push(SeqLayerCache {
                x0: lx0,
                ln1,
                normed1,
                attn,
                drop1,
                x1,
                ln2,
                normed2,
                ff_pre,
                ff_gelu,
                drop2,
            });
        }
        // A stack without layers is the identity; otherwise close with the
        // standard Pre-LN final normalization.
        let (y, final_ln, pre_final) = if self.cfg.layers == 0 {
            (x, LayerNormCache::default(), Vec::new())
        } else {
            let pre = x;
            let mut y = vec![0.0; pre.len()];
            let c = layer_norm_forward(
                tokens,
                h,
                &pre,
                &store.expect(&self.final_g).data,
                &store.expect(&self.final_b).data,
                &mut y,
            );
            (y, c, pre)
        };
        (y, SeqCache { layers, pre_final, final_ln })
    }

    fn attn_params<'a>(
        &self,
        store: &'a ParameterStore,
        names: &LayerNames,
    ) -> AttentionParams<'a> {
        AttentionParams {
            wq: &store.expect(&names.wq).data,
            bq: &store.expect(&names.bq).data,
            wk: &store.expect(&names.wk).data,
            bk: &store.expect(&names.bk).data,
            wv: &store.expect(&names.wv).data,
            bv: &store.expect(&names.bv).data,
            wo: &store.expect(&names.wo).data,
            bo: &store.expect(&names.bo).data,
        }
    }

    /// Backward over the batch; accumulates parameter gradients (including
    /// the `[cls]` token) and returns gradients w.r.t. the assembled inputs.
    pub fn backward(
        &self,
        store: &ParameterStore,
        batch: &SequenceBatch,
        cache: &EncoderCache,
        d_out: &[f64],
        grads: &mut GradStore,
    ) -> Vec<f64> {
        let h = self.cfg.hidden;
        let stride = batch.tokens * h;
        let mut d_in = vec![0.0; batch.data.len()];
        for s in 0..batch.n_seq {
            let dx = self.backward_seq(
                store,
                batch.seq_mask(s),
                &cache.seqs[s],
                &d_out[s * stride..(s + 1) * stride],
                grads,
            );
            d_in[s * stride..(s + 1) * stride].copy_from_slice(&dx);
            // Token 0 is cls + PE; the PE is constant.
            let g_cls = grads.expect_mut(&self.cls);
            for j in 0..h {
                g_cls[j] += dx[j];
            }
        }
        d_in
    }

    fn backward_seq(
        &self,
        store: &ParameterStore,
        mask: &[bool],
        cache: &SeqCache,
        d_out: &[f64],
        grads: &mut GradStore,
    ) -> Vec<f64> {
        let h = self.cfg.hidden;
        let ff = self.cfg.ff_dim;
        let tokens = mask.len();
        let p_drop = self.cfg.dropout;

        let mut d = if self.cfg.layers == 0 {
            d_out.to_vec()
        } else {
            let mut dx = vec![0.0; d_out.len()];
            let (dg, db) = grads.pair_mut(&self.final_g, &self.final_b);
            layer_norm_backward(
                tokens,
                h,
                &cache.pre_final,
                &store.expect(&self.final_g).data,
                &cache.final_ln,
                d_out,
                &mut dx,
                dg,
                db,
            );
            dx
        };

        for (names, lc) in self.layers.iter().zip(&cache.layers).rev() {
            // Feed-forward sublayer.
            let mut d_ffy = d.clone();
            dropout_backward(&lc.drop2, p_drop, &mut d_ffy);
            let mut d_gelu = vec![0.0; tokens * ff];
            {
                let (dw, db) = grads.pair_mut(&names.ff2_w, &names.ff2_b);
                linear_backward(
                    tokens,
                    ff,
                    h,
                    &lc.ff_gelu,
                    &store.expect(&names.ff2_w).data,
                    &d_ffy,
                    &mut d_gelu,
                    dw,
                    db,
                );
            }
            let mut d_pre = vec![0.0; tokens * ff];
            gelu_backward(&lc.ff_pre, &d_gelu, &mut d_pre);
            let mut d_normed2 = vec![0.0; tokens * h];
            {
                let (dw, db) = grads.pair_mut(&names.ff1_w, &names.ff1_b);
                linear_backward(
                    tokens,
                    h,
                    ff,
                    &lc.normed2,
                    &store.expect(&names.ff1_w).data,
                    &d_pre,
                    &mut d_normed2,
                    dw,
                    db,
                );
            }
            {
                let mut d_x1 = vec![0.0; tokens * h];
                let (dg, db) = grads.pair_mut(&names.ln2_g, &names.ln2_b);
                layer_norm_backward(
                    tokens,
                    h,
                    &lc.x1,
                    &store.expect(&names.ln2_g).data,
                    &lc.ln2,
                    &d_normed2,
                    &mut d_x1,
                    dg,
                    db,
                );
                for i in 0..d.len() {
                    d[i] += d_x1[i];
                }
            }

            // Attention sublayer.
            let mut d_attn_y = d.clone();
            dropout_backward(&lc.drop1, p_drop, &mut d_attn_y);
            let mut d_normed1 = vec![0.0; tokens * h];
            {
                let params = self.attn_params(store, names);
                let [dwq, dbq, dwk, dbk, dwv, dbv, dwo, dbo] = grads.many_mut([
                    &names.wq, &names.bq, &names.wk, &names.bk, &names.wv, &names.bv, &names.wo,
                    &names.bo,
                ]);
                let mut g = AttentionGrads { dwq, dbq, dwk, dbk, dwv, dbv, dwo, dbo };
                attention_backward(
                    tokens,
                    h,
                    self.cfg.heads,
                    &lc.normed1,
                    mask,
                    &params,
                    &lc.attn,
                    &d_attn_y,
                    &mut d_normed1,
                    &mut g,
                );
            }
            {
                let mut d_x0 = vec![0.0; tokens * h];
                let (dg, db) = grads.pair_mut(&names.ln1_g, &names.ln1_b);
                layer_norm_backward(
                    tokens,
                    h,
                    &lc.x0,
                    &store.expect(&names.ln1_g).data,
                    &lc.ln1,
                    &d_normed1,
                    &mut d_x0,
                    dg,
                    db,
                );
                for i in 0..d.len() {
                    d[i] += d_x0[i];
                }
            }
        }
        d
    }
}

pub struct EncoderCache {
    seqs: Vec<SeqCache>,
}

struct SeqCache {
    layers: Vec<SeqLayerCache>,
    pre_final: Vec<f64>,
    final_ln: LayerNormCache,
}

struct SeqLayerCache {
    x0: Vec<f64>,
    ln1: LayerNormCache,
    normed1: Vec<f64>,
    attn: AttentionCache,
    drop1: Vec<bool>,
    x1: Vec<f64>,
    ln2: LayerNormCache,
    normed2: Vec<f64>,
    ff_pre: Vec<f64>,
    ff_gelu: Vec<f64>,
    drop2: Vec<bool>,
}

/// Classification head over the `[cls]` hidden state: linear, tanh, layer
/// norm, then a single-logit linear output.
pub struct PoolerHead {
    pub hidden: usize,
    dense_w: String,
    dense_b: String,
    norm_g: String,
    norm_b: String,
    out_w: String,
    out_b: String,
}

pub struct PoolerCache {
    input: Vec<f64>,
    tanh_out: Vec<f64>,
    ln: LayerNormCache,
    ln_out: Vec<f64>,
}

impl PoolerHead {
    pub fn new(hidden: usize, prefix: &str) -> Self {
        PoolerHead {
            hidden,
            dense_w: format!("{prefix}dense.weight"),
            dense_b: format!("{prefix}dense.bias"),
            norm_g: format!("{prefix}norm.gamma"),
            norm_b: format!("{prefix}norm.beta"),
            out_w: format!("{prefix}out.weight"),
            out_b: format!("{prefix}out.bias"),
        }
    }

    pub fn init_params<R: rand::Rng>(&self, store: &mut ParameterStore, rng: &mut R) {
        let h = self.hidden;
        let mut init = ParamInit::new(store, rng);
        init.weight(&self.dense_w, vec![h, h]);
        init.bias(&self.dense_b, h);
        init.norm(&self.norm_g, &self.norm_b, h);
        init.weight(&self.out_w, vec![h, 1]);
        init.bias(&self.out_b, 1);
    }

    /// Raw logit for one `[cls]` vector; `sigmoid` of it is the probability.
    pub fn forward(&self, store: &ParameterStore, e_cls: &[f64]) -> (f64, PoolerCache) {
        let h = self.hidden;
        let mut dense = vec![0.0; h];
        linear_forward(
            1,
            h,
            h,
            e_cls,
            &store.expect(&self.dense_w).data,
            &store.expect(&self.dense_b).data,
            &mut dense,
        );
        let mut tanh_out = vec![0.0; h];
        tanh_forward(&dense, &mut tanh_out);
        let mut ln_out = vec![0.0; h];
        let ln = layer_norm_forward(
            1,
            h,
            &tanh_out,
            &store.expect(&self.norm_g).data,
            &store.expect(&self.norm_b).data,
            &mut ln_out,
        );
        let mut logit = [0.0];
        linear_forward(
            1,
            h,
            1,
            &ln_out,
            &store.expect(&self.out_w).data,
            &store.expect(&self.out_b).data,
            &mut logit,
        );
        (logit[0], PoolerCache { input: e_cls.to_vec(), tanh_out, ln, ln_out })
    }

    /// Backward from the logit gradient; returns the `[cls]` input gradient.
    pub fn backward(
        &self,
        store: &ParameterStore,
        cache: &PoolerCache,
        d_logit: f64,
        grads: &mut GradStore,
    ) -> Vec<f64> {
        let h = self.hidden;
        let mut d_lnout = vec![0.0; h];
        {
            let (dw, db) = grads.pair_mut(&self.out_w, &self.out_b);
            linear_backward(
                1,
                h,
                1,
                &cache.ln_out,
                &store.expect(&self.out_w).data,
                &[d_logit],
                &mut d_lnout,
                dw,
                db,
            );
        }
        let mut d_tanh = vec![0.0; h];
        {
            let (dg, db) = grads.pair_mut(&self.norm_g, &self.norm_b);
            layer_norm_backward(
                1,
                h,
                &cache.tanh_out,
                &store.expect(&self.norm_g).data,
                &cache.ln,
                &d_lnout,
                &mut d_tanh,
                dg,
                db,
            );
        }
        let mut d_dense = vec![0.0; h];
        tanh_backward(&cache.tanh_out, &d_tanh, &mut d_dense);
        let mut d_in = vec![0.0; h];
        {
            let (dw, db) = grads.pair_mut(&self.dense_w, &self.dense_b);
            linear_backward(
                1,
                h,
                h,
                &cache.input,
                &store.expect(&self.dense_w).data,
                &d_dense,
                &mut d_in,
                dw,
                db,
            );
        }
        d_in
    }

    /// Probability view of [`Self::forward`].
    pub fn pool_and_classify(&self, store: &ParameterStore, e_cls: &[f64]) -> f64 {
        let (logit, _) = self.forward(store, e_cls);
        sigmoid(logit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::volumes::{StudyVisit, Volume};
    use std::sync::Arc;

    fn seq_with(times: &[f64], anchor: f64, label: bool) -> LabeledSequence {
        let visits = times
            .iter()
            .map(|&t| {
                Arc::new(
                    StudyVisit::new(
                        t,
                        vec![Volume::zeros(1, [3, 3, 3], [1.0; 3])],
                        vec!["b0".into()],
                    )
                    .unwrap(),
                )
            })
            .collect();
        LabeledSequence::new("p", visits, label, anchor).unwrap()
    }

    #[test]
    fn time_deltas_follow_anchor_distances() {
        let s = seq_with(&[0.0, 15.0, 20.0], 24.0, true);
        let d = compute_time_deltas(&s).unwrap();
        let expect = [0.0, 24f64.sqrt(), 3.0, 2.0];
        for (a, b) in d.0.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }

        let s = seq_with(&[7.0], 7.0, false);
        assert_eq!(compute_time_deltas(&s).unwrap().0, vec![0.0, 0.0]);
    }

    #[test]
    fn negative_time_distance_is_an_error() {
        let s = LabeledSequence {
            patient_id: "p".into(),
            visits: seq_with(&[10.0], 10.0, false).visits,
            label: false,
            anchor: 5.0,
        };
        assert!(matches!(compute_time_deltas(&s), Err(EncoderError::NegativeTimeDelta { .. })));
    }

    #[test]
    fn pe_zero_delta_alternates_zero_one() {
        let d = DeltaVector::new(vec![0.0]);
        let pe = sinusoidal_pe(&d, 8).unwrap();
        assert_eq!(pe, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn pe_first_pair_is_raw_sin_cos_and_pairs_are_unit() {
        let d = DeltaVector::new(vec![0.0, 2.5, 7.0]);
        let h = 12;
        let pe = sinusoidal_pe(&d, h).unwrap();
        for (i, &u) in d.0.iter().enumerate() {
            assert!((pe[i * h] - u.sin()).abs() < 1e-15);
            assert!((pe[i * h + 1] - u.cos()).abs() < 1e-15);
            for k in 0..h / 2 {
                let (s, c) = (pe[i * h + 2 * k], pe[i * h + 2 * k + 1]);
                assert!((s * s + c * c - 1.0).abs() < 1e-12);
                assert!((-1.0..=1.0).contains(&s) && (-1.0..=1.0).contains(&c));
            }
        }
    }

    #[test]
    fn pe_frequency_argument_decreases_in_dimension() {
        let h = 16;
        let mut last = f64::INFINITY;
        for k in 0..h / 2 {
            let arg = 3.0 / 10000f64.powf(2.0 * k as f64 / h as f64);
            assert!(arg < last);
            last = arg;
        }
    }

    #[test]
    fn assemble_adds_pe_and_counts_tokens() {
        let h = 4;
        let cls = vec![0.5; 4];
        let embeddings = vec![vec![1.0; 4], vec![2.0; 4], vec![3.0; 4]];
        let pe = vec![0.0; 16];
        let out = assemble_sequence(&embeddings, &cls, &pe).unwrap();
        assert_eq!(out.len(), 4 * h);
        assert_eq!(&out[0..4], &[0.5; 4]);
        assert_eq!(&out[4..8], &[1.0; 4]);

        let pe: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let out = assemble_sequence(&embeddings, &cls, &pe).unwrap();
        assert_eq!(out[0], 0.5);
        assert_eq!(out[5], 1.0 + 5.0);

        assert!(assemble_sequence(&embeddings, &cls, &pe[..12]).is_err());
    }

    #[test]
    fn batch_padding_masks_real_tokens_only() {
        let h = 2;
        let a = vec![1.0; 3 * h];
        let b = vec![2.0; 5 * h];
        let batch = SequenceBatch::from_sequences(vec![a, b], h);
        assert_eq!(batch.tokens, 5);
        assert_eq!(batch.seq_len(0), 3);
        assert_eq!(batch.seq_len(1), 5);
    }

    fn build_encoder(layers: usize, h: usize, seed: u64) -> (Encoder, ParameterStore) {
        let cfg = EncoderConfig { dropout: 0.0, ..EncoderConfig::for_hidden(h, layers, 8) };
        let enc = Encoder::new(cfg, "encoder.");
        let mut store = ParameterStore::new();
        enc.init_params(&mut store, &mut rng::stream(seed));
        (enc, store)
    }

    #[test]
    fn zero_layers_is_identity() {
        let (enc, store) = build_encoder(0, 8, 1);
        let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.1).collect();
        let batch = SequenceBatch::from_sequences(vec![data.clone()], 8);
        let (out, _) = enc.forward(&store, &batch, None);
        assert_eq!(out, data);
    }

    #[test]
    fn padded_slots_cannot_influence_real_tokens() {
        let (enc, store) = build_encoder(2, 8, 2);
        let real: Vec<f64> = (0..16).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut a = SequenceBatch::from_sequences(vec![real.clone()], 8);
        a.tokens = 3;
        a.data = [real.clone(), vec![99.0; 8]].concat();
        a.mask = vec![true, true, false];
        let mut b = a.clone();
        for v in &mut b.data[16..] {
            *v = -1234.5;
        }
        let (ya, _) = enc.forward(&store, &a, None);
        let (yb, _) = enc.forward(&store, &b, None);
        for i in 0..16 {
            assert_eq!(ya[i].to_bits(), yb[i].to_bits());
        }
    }

    #[test]
    fn permuting_tokens_with_their_pe_rows_leaves_cls_bits_unchanged() {
        let (enc, store) = build_encoder(2, 16, 3);
        let mut tok: Vec<Vec<f64>> = Vec::new();
        for t in 0..4 {
            tok.push((0..16).map(|i| ((t * 31 + i * 7) as f64 * 0.13).sin()).collect());
        }
        let x: Vec<f64> = tok.concat();
        let permuted: Vec<f64> =
            [tok[0].clone(), tok[2].clone(), tok[3].clone(), tok[1].clone()].concat();
        let ba = SequenceBatch::from_sequences(vec![x], 16);
        let bb = SequenceBatch::from_sequences(vec![permuted], 16);
        let (ya, _) = enc.forward(&store, &ba, None);
        let (yb, _) = enc.forward(&store, &bb, None);
        for i in 0..16 {
            assert_eq!(ya[i].to_bits(), yb[i].to_bits(), "cls bit {i} changed");
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let (enc, store) = build_encoder(2, 16, 4);
        let x: Vec<f64> = (0..48).map(|i| (i as f64 * 0.19).cos()).collect();
        let batch = SequenceBatch::from_sequences(vec![x], 16);
        let (a, _) = enc.forward(&store, &batch, None);
        let (b, _) = enc.forward(&store, &batch, None);
        assert_eq!(a, b);
    }

    #[test]
    fn pooler_zero_output_layer_gives_half() {
        let h = 8;
        let head = PoolerHead::new(h, "pooler.");
        let mut store = ParameterStore::new();
        head.init_params(&mut store, &mut rng::stream(5));
        store.expect_mut("pooler.out.weight").data.iter_mut().for_each(|v| *v = 0.0);
        store.expect_mut("pooler.out.bias").data.iter_mut().for_each(|v| *v = 0.0);
        let p = head.pool_and_classify(&store, &vec![0.3; h]);
        assert_eq!(p, 0.5);
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        assert_eq!(sigmoid(1e9), 1.0);
        assert_eq!(sigmoid(-1e9), 0.0);
        assert!(sigmoid(40.0) <= 1.0);
        assert!(sigmoid(40.0).is_finite());
    }

    #[test]
    fn pooler_matches_scalar_oracle_on_toy_head() {
        let h = 2;
        let head = PoolerHead::new(h, "pooler.");
        let mut store = ParameterStore::new();
        head.init_params(&mut store, &mut rng::stream(6));
        store.expect_mut("pooler.dense.weight").data.copy_from_slice(&[0.5, -0.25, 1.0, 0.75]);
        store.expect_mut("pooler.dense.bias").data.copy_from_slice(&[0.1, -0.2]);
        store.expect_mut("pooler.norm.gamma").data.copy_from_slice(&[1.5, 0.5]);
        store.expect_mut("pooler.norm.beta").data.copy_from_slice(&[0.05, -0.05]);
        store.expect_mut("pooler.out.weight").data.copy_from_slice(&[2.0, -1.0]);
        store.expect_mut("pooler.out.bias").data.copy_from_slice(&[0.3]);
        let x = [0.4, -0.8];

        // Independent scalar recomputation.
        let d0: f64 = 0.4 * 0.5 + (-0.8) * 1.0 + 0.1;
        let d1: f64 = 0.4 * (-0.25) + (-0.8) * 0.75 + (-0.2);
        let (t0, t1) = (d0.tanh(), d1.tanh());
        let mean = (t0 + t1) / 2.0;
        let var = ((t0 - mean).powi(2) + (t1 - mean).powi(2)) / 2.0;
        let rstd = 1.0 / (var + 1e-6).sqrt();
        let n0 = (t0 - mean) * rstd * 1.5 + 0.05;
        let n1 = (t1 - mean) * rstd * 0.5 - 0.05;
        let logit = n0 * 2.0 + n1 * (-1.0) + 0.3;
        let expect = 1.0 / (1.0 + (-logit).exp());

        let got = head.pool_and_classify(&store, &x);
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn encoder_and_pooler_gradients_match_finite_differences() {
        use crate::numcheck;
        use crate::store::GradStore;

        let h = 128;
        let (enc, mut store) = build_encoder(1, h, 7);
        let head = PoolerHead::new(h, "pooler.");
        head.init_params(&mut store, &mut rng::stream(8));

        let deltas = DeltaVector::new(vec![0.0, 24f64.sqrt(), 3.0, 2.0]);
        let pe = sinusoidal_pe(&deltas, h).unwrap();
        let embeddings: Vec<Vec<f64>> = (0..3)
            .map(|t| {
                (0..h).map(|i| ((((t * 131 + i * 17) % 23) as f64 / 23.0 - 0.5) * 1.7).sin()).collect()
            })
            .collect();

        let assemble = |store: &ParameterStore| {
            let cls = store.values("encoder.cls_token");
            let seq = assemble_sequence(&embeddings, cls, &pe).unwrap();
            SequenceBatch::from_sequences(vec![seq], h)
        };

        // Analytic pass.
        let batch = assemble(&store);
        let (out, cache) = enc.forward(&store, &batch, None);
        let (logit, pcache) = head.forward(&store, &out[0..h]);
        let p = sigmoid(logit);
        let d_logit = p * (1.0 - p);
        let mut grads = GradStore::zeros_like(&store, |_| true);
        let d_cls_in = head.backward(&store, &pcache, d_logit, &mut grads);
        let mut d_out = vec![0.0; out.len()];
        d_out[0..h].copy_from_slice(&d_cls_in);
        enc.backward(&store, &batch, &cache, &d_out, &mut grads);

        let mut f = |st: &ParameterStore| {
            let batch = assemble(st);
            let (out, _) = enc.forward(st, &batch, None);
            let (logit, _) = head.forward(st, &out[0..h]);
            sigmoid(logit)
        };
        // Probe a deterministic sample of every tensor; a full sweep of the
        // ~200k parameters would take minutes without adding coverage.
        let report = numcheck::compare_gradients_sampled(
            &mut store,
            1e-6,
            48,
            |_| true,
            |name| grads.get(name).map(|g| g.to_vec()),
            &mut f,
        );
        assert!(report.checked > 700, "checked {}", report.checked);
        assert!(
            report.max_rel_err < 1e-4,
            "gradient mismatch {} at {}[{}]",
            report.max_rel_err,
            report.worst_tensor,
            report.worst_index
        );
    }
}

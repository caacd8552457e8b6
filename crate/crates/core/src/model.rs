//! Mini transformer encoder, cross-attention fusion and the model variants.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GemError, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::text::{Batch, PairedBatch, DEFAULT_MAX_LEN};

pub const N_SYMPTOM: usize = 4;
pub const N_GENDER: usize = 2;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Gem,
    StlSymptom,
    StlGender,
    MtlShared,
    ConcatAblation,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Gem,
        Variant::StlSymptom,
        Variant::StlGender,
        Variant::MtlShared,
        Variant::ConcatAblation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gem => "gem",
            Variant::StlSymptom => "stl_symptom",
            Variant::StlGender => "stl_gender",
            Variant::MtlShared => "mtl_shared",
            Variant::ConcatAblation => "concat_ablation",
        }
    }

    pub fn has_symptom_head(self) -> bool {
        self != Variant::StlGender
    }

    pub fn has_gender_head(self) -> bool {
        self != Variant::StlSymptom
    }

    fn uses_s_encoder(self) -> bool {
        self != Variant::StlGender
    }

    fn uses_g_encoder(self) -> bool {
        matches!(self, Variant::Gem | Variant::StlGender | Variant::ConcatAblation)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = GemError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| GemError::Config(format!("unknown model variant {s:?}")))
    }
}

/// Which encoding supplies the values of the fusion attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionValueSource {
    #[default]
    Symptom,
    Gender,
}

/// Input of the symptom head in the `gem` variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymptomHeadSource {
    /// `[CLS]` row of the fused representation `h_g`, shared with the gender head.
    #[default]
    Fused,
    /// `[CLS]` row of the S-encoder output.
    SymptomCls,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout_p: f64,
    pub fusion_value_source: FusionValueSource,
    pub symptom_head_source: SymptomHeadSource,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            d: 64,
            n_heads: 4,
            d_ffn: 128,
            vocab_size: 0,
            max_len: DEFAULT_MAX_LEN,
            dropout_p: 0.2,
            fusion_value_source: FusionValueSource::Symptom,
            symptom_head_source: SymptomHeadSource::Fused,
            variant: Variant::Gem,
        }
    }
}

impl ModelConfig {
    /// Small single-layer encoders that train in seconds per epoch on one core.
    pub fn desk() -> Self {
        ModelConfig {
            n_layers: 1,
            d: 32,
            n_heads: 2,
            d_ffn: 64,
            dropout_p: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || !self.d.is_multiple_of(self.n_heads) {
            return Err(GemError::Config(format!(
                "d={} must be a positive multiple of n_heads={}",
                self.d, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(GemError::Config(format!("dropout_p={} outside [0, 1)", self.dropout_p)));
        }
        if self.vocab_size == 0 || self.max_len < 3 || self.d_ffn == 0 {
            return Err(GemError::Config(
                "vocab_size and d_ffn must be positive and max_len at least 3".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Encoder

#[derive(Clone, Debug)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Parameter handles of one encoder living in a [`ParamStore`] under `prefix`.
#[derive(Clone, Debug)]
pub struct Encoder {
    prefix: String,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerIds>,
}

fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| GemError::Incompatible(format!("missing parameter {name}")))
}

impl Encoder {
    /// Adds freshly initialised encoder parameters to `store`.
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d, f) = (cfg.d, cfg.d_ffn);
        let p = |s: &str| format!("{prefix}.{s}");
        store.add_normal(p("tok_emb"), &[cfg.vocab_size, d], 0.1, rng)?;
        store.add_normal(p("pos_emb"), &[cfg.max_len, d], 0.1, rng)?;
        let wstd = 1.0 / (d as f64).sqrt();
        for l in 0..cfg.n_layers {
            let q = |s: &str| format!("{prefix}.layer{l}.{s}");
            store.add_const(q("ln1.g"), &[d], 1.0)?;
            store.add_const(q("ln1.b"), &[d], 0.0)?;
            for w in ["wq", "wk", "wv", "wo"] {
                store.add_normal(q(&format!("attn.{w}")), &[d, d], wstd, rng)?;
                store.add_const(q(&format!("attn.b{}", &w[1..])), &[d], 0.0)?;
            }
            store.add_const(q("ln2.g"), &[d], 1.0)?;
            store.add_const(q("ln2.b"), &[d], 0.0)?;
            store.add_normal(q("ffn.w1"), &[d, f], wstd, rng)?;
            store.add_const(q("ffn.b1"), &[f], 0.0)?;
            store.add_normal(q("ffn.w2"), &[f, d], 1.0 / (f as f64).sqrt(), rng)?;
            store.add_const(q("ffn.b2"), &[d], 0.0)?;
        }
        Self::resolve(store, prefix, cfg)
    }

    /// Finds the parameters of an encoder already present in `store`.
    pub fn resolve(store: &ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let p = |s: &str| format!("{prefix}.{s}");
        let tok_emb = lookup(store, &p("tok_emb"))?;
        let pos_emb = lookup(store, &p("pos_emb"))?;
        if store.get(tok_emb).value.shape() != [cfg.vocab_size, cfg.d] {
            return Err(GemError::Incompatible(format!(
                "{prefix} token embedding has shape {:?}, config expects [{}, {}]",
                store.get(tok_emb).value.shape(),
                cfg.vocab_size,
                cfg.d
            )));
        }
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let q = |s: &str| lookup(store, &format!("{prefix}.layer{l}.{s}"));
            layers.push(LayerIds {
                ln1_g: q("ln1.g")?,
                ln1_b: q("ln1.b")?,
                wq: q("attn.wq")?,
                bq: q("attn.bq")?,
                wk: q("attn.wk")?,
                bk: q("attn.bk")?,
                wv: q("attn.wv")?,
                bv: q("attn.bv")?,
                wo: q("attn.wo")?,
                bo: q("attn.bo")?,
                ln2_g: q("ln2.g")?,
                ln2_b: q("ln2.b")?,
                w1: q("ffn.w1")?,
                b1: q("ffn.b1")?,
                w2: q("ffn.w2")?,
                b2: q("ffn.b2")?,
            });
        }
        Ok(Encoder {
            prefix: prefix.to_string(),
            tok_emb,
            pos_emb,
            layers,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn token_embedding(&self) -> ParamId {
        self.tok_emb
    }

    /// Records the encoder on `g`; the result is `[B*T, d]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, batch: &Batch) -> Result<Var> {
        let (b, t, d) = (batch.batch_size, batch.seq_len, cfg.d);
        if t > cfg.max_len {
            return Err(GemError::Shape(format!("sequence length {t} exceeds max_len {}", cfg.max_len)));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(GemError::Invalid(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        let tok = g.param(store, self.tok_emb);
        let pos = g.param(store, self.pos_emb);
        let x = g.gather_rows(tok, &batch.ids)?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let p = g.gather_rows(pos, &positions)?;
        let mut x = g.add(x, p)?;
        x = g.dropout(x, cfg.dropout_p);

        let h = cfg.n_heads;
        let dh = d / h;
        let attn_scale = 1.0 / (dh as f64).sqrt();
        for l in &self.layers {
            let mut pv = |id| g.param(store, id);
            let (ln1_g, ln1_b, wq, bq, wk, bk) = (pv(l.ln1_g), pv(l.ln1_b), pv(l.wq), pv(l.bq), pv(l.wk), pv(l.bk));
            let (wv, bv, wo, bo, ln2_g, ln2_b) = (pv(l.wv), pv(l.bv), pv(l.wo), pv(l.bo), pv(l.ln2_g), pv(l.ln2_b));
            let (w1, b1, w2, b2) = (pv(l.w1), pv(l.b1), pv(l.w2), pv(l.b2));

            let n = g.layer_norm(x, ln1_g, ln1_b, LN_EPS)?;
            let q = linear(g, n, wq, bq)?;
            let k = linear(g, n, wk, bk)?;
            let v = linear(g, n, wv, bv)?;
            let q = g.split_heads(q, b, t, h)?;
            let k = g.split_heads(k, b, t, h)?;
            let v = g.split_heads(v, b, t, h)?;
            let s = g.bmm(q, k, true)?;
            let s = g.scale(s, attn_scale);
            let a = g.masked_softmax(s, &batch.pad_mask, h)?;
            let c = g.bmm(a, v, false)?;
            let c = g.merge_heads(c, b, t, h)?;
            let o = linear(g, c, wo, bo)?;
            let o = g.dropout(o, cfg.dropout_p);
            x = g.add(x, o)?;

            let n = g.layer_norm(x, ln2_g, ln2_b, LN_EPS)?;
            let f = linear(g, n, w1, b1)?;
            let f = g.gelu(f);
            let f = linear(g, f, w2, b2)?;
            let f = g.dropout(f, cfg.dropout_p);
            x = g.add(x, f)?;
        }
        Ok(x)
    }
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w, false)?;
    g.add_row(y, b)
}

/// Per-token encodings of one batch, `[B, T, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub e: Tensor,
}

/// Evaluation-mode encoder pass.
pub fn encoder_forward(store: &ParamStore, encoder: &Encoder, cfg: &ModelConfig, batch: &Batch) -> Result<EncoderOutput> {
    let mut g = Graph::new();
    let x = encoder.forward(&mut g, store, cfg, batch)?;
    let e = g.value(x).clone().reshaped(&[batch.batch_size, batch.seq_len, cfg.d])?;
    Ok(EncoderOutput { e })
}

// ---------------------------------------------------------------------------
// Fusion

/// Graph handles of a recorded fusion.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    /// `[B, Tg, Ts]`
    pub attn_weights: Var,
    /// `[B, Tg, d]`
    pub a: Var,
    /// `[B, Tg, d]`
    pub h_g: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput {
    pub attn_weights: Tensor,
    pub a: Tensor,
    pub h_g: Tensor,
}

impl FusionOutput {
    fn from_graph(g: &Graph, v: &FusionVars) -> Self {
        FusionOutput {
            attn_weights: g.value(v.attn_weights).clone(),
            a: g.value(v.a).clone(),
            h_g: g.value(v.h_g).clone(),
        }
    }
}

/// Single-head cross-attention with the gender encoding as query and the symptom
/// encoding as keys: `h_g = e_g + softmax(e_g e_sᵀ / √d) V`.
///
/// `e_s` is `[B, Ts, d]`, `e_g` is `[B, Tg, d]` and `s_mask` (`B*Ts`, true = real
/// token) hides symptom padding.
pub fn fuse_on(
    g: &mut Graph,
    e_s: Var,
    e_g: Var,
    s_mask: &[bool],
    source: FusionValueSource,
) -> Result<FusionVars> {
    let (ss, gs) = (g.value(e_s).shape().to_vec(), g.value(e_g).shape().to_vec());
    if ss.len() != 3 || gs.len() != 3 || ss[0] != gs[0] || ss[2] != gs[2] {
        return Err(GemError::Shape(format!("fuse expects [B,T,d] pairs, got {ss:?} and {gs:?}")));
    }
    let d = ss[2];
    let scores = g.bmm(e_g, e_s, true)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let w = g.masked_softmax(scores, s_mask, 1)?;
    let values = match source {
        FusionValueSource::Symptom => e_s,
        FusionValueSource::Gender => {
            if ss[1] != gs[1] {
                return Err(GemError::Shape(format!(
                    "gender-valued fusion needs equal lengths, got Ts={} and Tg={}",
                    ss[1], gs[1]
                )));
            }
            e_g
        }
    };
    let a = g.bmm(w, values, false)?;
    let h_g = g.add(e_g, a)?;
    Ok(FusionVars { attn_weights: w, a, h_g })
}

/// Evaluation of [`fuse_on`] on plain tensors.
pub fn fuse(e_s: &Tensor, e_g: &Tensor, s_mask: &[bool], source: FusionValueSource) -> Result<FusionOutput> {
    let mut g = Graph::new();
    let s = g.constant(e_s.clone());
    let q = g.constant(e_g.clone());
    let v = fuse_on(&mut g, s, q, s_mask, source)?;
    Ok(FusionOutput::from_graph(&g, &v))
}

// ---------------------------------------------------------------------------
// Full model

#[derive(Clone, Debug)]
struct Head {
    w: ParamId,
    b: ParamId,
}

impl Head {
    fn init(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let w = store.add_normal(format!("{name}.w"), &[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng)?;
        let b = store.add_const(format!("{name}.b"), &[d_out], 0.0)?;
        Ok(Head { w, b })
    }

    fn resolve(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Head {
            w: lookup(store, &format!("{name}.w"))?,
            b: lookup(store, &format!("{name}.b"))?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        linear(g, x, w, b)
    }
}

pub const S_ENCODER: &str = "s_encoder";
pub const G_ENCODER: &str = "g_encoder";

/// Parameters and wiring of one model variant.
#[derive(Clone, Debug)]
pub struct GemModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    s_encoder: Option<Encoder>,
    g_encoder: Option<Encoder>,
    symptom_head: Option<Head>,
    gender_head: Option<Head>,
}

/// Graph handles produced by [`GemModel::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub symptom_logits: Option<Var>,
    pub gender_logits: Option<Var>,
    pub fusion: Option<FusionVars>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    symptom_logits: Option<Tensor>,
    gender_logits: Option<Tensor>,
    pub fusion: Option<FusionOutput>,
}

impl Prediction {
    pub fn symptom_logits(&self) -> Result<&Tensor> {
        self.symptom_logits
            .as_ref()
            .ok_or_else(|| GemError::Invalid("this variant has no symptom head".into()))
    }

    pub fn gender_logits(&self) -> Result<&Tensor> {
        self.gender_logits
            .as_ref()
            .ok_or_else(|| GemError::Invalid("this variant has no gender head".into()))
    }
}

/// Row indices of `[CLS]` (position 0) in a flattened `[B*T, d]` tensor.
fn cls_rows(b: usize, t: usize) -> Vec<usize> {
    (0..b).map(|i| i * t).collect()
}

/// Builds a freshly initialised model of `config.variant`.
pub fn build_variant(config: &ModelConfig, seed: u64) -> Result<GemModel> {
    GemModel::new(config.clone(), seed)
}

impl GemModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let v = config.variant;
        if v.uses_s_encoder() {
            Encoder::init(&mut params, S_ENCODER, &config, &mut rng)?;
        }
        if v.uses_g_encoder() {
            Encoder::init(&mut params, G_ENCODER, &config, &mut rng)?;
        }
        let head_in = if v == Variant::ConcatAblation { 2 * config.d } else { config.d };
        if v.has_symptom_head() {
            Head::init(&mut params, "symptom_head", head_in, N_SYMPTOM, &mut rng)?;
        }
        if v.has_gender_head() {
            Head::init(&mut params, "gender_head", head_in, N_GENDER, &mut rng)?;
        }
        Self::from_params(config, params)
    }

    /// Wraps an existing parameter store, checking that it fits `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let v = config.variant;
        let s_encoder = v
            .uses_s_encoder()
            .then(|| Encoder::resolve(&params, S_ENCODER, &config))
            .transpose()?;
        let g_encoder = v
            .uses_g_encoder()
            .then(|| Encoder::resolve(&params, G_ENCODER, &config))
            .transpose()?;
        let symptom_head = v
            .has_symptom_head()
            .then(|| Head::resolve(&params, "symptom_head"))
            .transpose()?;
        let gender_head = v
            .has_gender_head()
            .then(|| Head::resolve(&params, "gender_head"))
            .transpose()?;
        Ok(GemModel {
            config,
            params,
            s_encoder,
            g_encoder,
            symptom_head,
            gender_head,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn s_encoder(&self) -> Option<&Encoder> {
        self.s_encoder.as_ref()
    }

    pub fn g_encoder(&self) -> Option<&Encoder> {
        self.g_encoder.as_ref()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Records the forward pass on `g` using `store`, which must have this model's
    /// parameter layout (typically `self.params` or a perturbed copy of it).
    pub fn forward_with(&self, g: &mut Graph, store: &ParamStore, batch: &PairedBatch) -> Result<ForwardVars> {
        let cfg = &self.config;
        let (b, t, d) = (batch.batch_size(), batch.seq_len(), cfg.d);
        let cls = cls_rows(b, t);
        let mut out = ForwardVars {
            symptom_logits: None,
            gender_logits: None,
            fusion: None,
        };
        match cfg.variant {
            Variant::Gem => {
                let s = self.s_encoder.as_ref().expect("gem has an S-encoder");
                let ge = self.g_encoder.as_ref().expect("gem has a G-encoder");
                let e_s = s.forward(g, store, cfg, &batch.symptom)?;
                let e_g = ge.forward(g, store, cfg, &batch.gender)?;
                let e_s3 = g.reshape(e_s, &[b, t, d])?;
                let e_g3 = g.reshape(e_g, &[b, t, d])?;
                let fusion = fuse_on(g, e_s3, e_g3, &batch.symptom.pad_mask, cfg.fusion_value_source)?;
                let h = g.reshape(fusion.h_g, &[b * t, d])?;
                let h_cls = g.gather_rows(h, &cls)?;
                let s_in = match cfg.symptom_head_source {
                    SymptomHeadSource::Fused => h_cls,
                    SymptomHeadSource::SymptomCls => g.gather_rows(e_s, &cls)?,
                };
                out.symptom_logits = Some(self.symptom_head.as_ref().unwrap().forward(g, store, s_in)?);
                out.gender_logits = Some(self.gender_head.as_ref().unwrap().forward(g, store, h_cls)?);
                out.fusion = Some(fusion);
            }
            Variant::ConcatAblation => {
                let s = self.s_encoder.as_ref().expect("concat has an S-encoder");
                let ge = self.g_encoder.as_ref().expect("concat has a G-encoder");
                let e_s = s.forward(g, store, cfg, &batch.symptom)?;
                let e_g = ge.forward(g, store, cfg, &batch.gender)?;
                let s_cls = g.gather_rows(e_s, &cls)?;
                let g_cls = g.gather_rows(e_g, &cls)?;
                let both = g.concat(s_cls, g_cls)?;
                out.symptom_logits = Some(self.symptom_head.as_ref().unwrap().forward(g, store, both)?);
                out.gender_logits = Some(self.gender_head.as_ref().unwrap().forward(g, store, both)?);
            }
            Variant::StlSymptom | Variant::MtlShared => {
                let s = self.s_encoder.as_ref().expect("variant has an S-encoder");
                let e_s = s.forward(g, store, cfg, &batch.symptom)?;
                let s_cls = g.gather_rows(e_s, &cls)?;
                out.symptom_logits = Some(self.symptom_head.as_ref().unwrap().forward(g, store, s_cls)?);
                if let Some(head) = &self.gender_head {
                    out.gender_logits = Some(head.forward(g, store, s_cls)?);
                }
            }
            Variant::StlGender => {
                let ge = self.g_encoder.as_ref().expect("stl_gender has a G-encoder");
                let e_g = ge.forward(g, store, cfg, &batch.gender)?;
                let g_cls = g.gather_rows(e_g, &cls)?;
                out.gender_logits = Some(self.gender_head.as_ref().unwrap().forward(g, store, g_cls)?);
            }
        }
        Ok(out)
    }

    pub fn forward(&self, g: &mut Graph, batch: &PairedBatch) -> Result<ForwardVars> {
        self.forward_with(g, &self.params, batch)
    }

    /// Evaluation-mode prediction (dropout off).
    pub fn predict(&self, batch: &PairedBatch) -> Result<Prediction> {
        let mut g = Graph::new();
        let v = self.forward(&mut g, batch)?;
        Ok(Prediction {
            symptom_logits: v.symptom_logits.map(|x| g.value(x).clone()),
            gender_logits: v.gender_logits.map(|x| g.value(x).clone()),
            fusion: v.fusion.as_ref().map(|f| FusionOutput::from_graph(&g, f)),
        })
    }

    /// `[CLS]` vectors (`[B, d]`) of the S-encoder on the symptom view.
    pub fn symptom_cls(&self, batch: &Batch) -> Result<Tensor> {
        let enc = self
            .s_encoder
            .as_ref()
            .ok_or_else(|| GemError::Invalid(format!("variant {} has no S-encoder", self.variant())))?;
        let mut g = Graph::new();
        let e = enc.forward(&mut g, &self.params, &self.config, batch)?;
        let c = g.gather_rows(e, &cls_rows(batch.batch_size, batch.seq_len))?;
        Ok(g.value(c).clone())
    }
}

/// Index of the largest value in each row of a `[B, C]` tensor.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.last_dim();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use crate::text::{TokenSequence, CLS_ID, PAD_ID, SEP_ID};

    fn cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d: 8,
            n_heads: 2,
            d_ffn: 12,
            vocab_size: 20,
            max_len: 8,
            dropout_p: 0.0,
            variant,
            ..Default::default()
        }
    }

    fn seq(ids: &[usize]) -> TokenSequence {
        let mut v = vec![CLS_ID];
        v.extend_from_slice(ids);
        v.push(SEP_ID);
        TokenSequence { ids: v }
    }

    fn paired() -> PairedBatch {
        PairedBatch::new(&[seq(&[5, 6, 7, 8]), seq(&[9, 10])], &[seq(&[11, 6, 12]), seq(&[13, 14, 15, 16])])
            .unwrap()
            .with_labels(Some(vec![2, 0]), Some(vec![1, 0]))
    }

    #[test]
    fn encoder_output_shape_and_zero_layers() {
        let mut c = cfg(Variant::StlSymptom);
        let m = GemModel::new(c.clone(), 1).unwrap();
        let b = crate::text::make_batch(&[seq(&[5])], None).unwrap();
        let out = encoder_forward(&m.params, m.s_encoder().unwrap(), &c, &b).unwrap();
        assert_eq!(out.e.shape(), &[1, 3, 8]);

        c.n_layers = 0;
        let m = GemModel::new(c.clone(), 1).unwrap();
        let out = encoder_forward(&m.params, m.s_encoder().unwrap(), &c, &b).unwrap();
        let tok = &m.params.get(m.params.id("s_encoder.tok_emb").unwrap()).value;
        let pos = &m.params.get(m.params.id("s_encoder.pos_emb").unwrap()).value;
        for (p, &id) in b.ids.iter().enumerate() {
            for j in 0..8 {
                assert_eq!(out.e.data()[p * 8 + j], tok.row(id)[j] + pos.row(p)[j]);
            }
        }
    }

    #[test]
    fn pad_content_does_not_leak() {
        let c = cfg(Variant::StlSymptom);
        let m = GemModel::new(c.clone(), 3).unwrap();
        let mut b = crate::text::make_batch(&[seq(&[5, 6, 7, 8]), seq(&[9])], None).unwrap();
        let before = encoder_forward(&m.params, m.s_encoder().unwrap(), &c, &b).unwrap();
        for (i, m) in b.pad_mask.clone().iter().enumerate() {
            if !m {
                b.ids[i] = 17;
            }
        }
        let after = encoder_forward(&m.params, m.s_encoder().unwrap(), &c, &b).unwrap();
        for (i, &real) in b.pad_mask.iter().enumerate() {
            if real {
                assert_eq!(before.e.data()[i * 8..(i + 1) * 8], after.e.data()[i * 8..(i + 1) * 8]);
            }
        }
        assert_eq!(b.ids[b.ids.len() - 1], 17);
        assert_ne!(b.ids[0], PAD_ID);
    }

    #[test]
    fn too_long_batch_is_rejected() {
        let c = cfg(Variant::StlSymptom);
        let m = GemModel::new(c, 3).unwrap();
        let b = crate::text::make_batch(&[seq(&[5; 8])], None).unwrap();
        let pb = PairedBatch { symptom: b.clone(), gender: b };
        assert!(matches!(m.predict(&pb), Err(GemError::Shape(_))));
    }

    #[test]
    fn fusion_worked_example() {
        let e_g = Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap();
        let e_s = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let f = fuse(&e_s, &e_g, &[true, true], FusionValueSource::Symptom).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let w0 = s.exp() / (s.exp() + 1.0);
        let w = f.attn_weights.data();
        assert!((w[0] - w0).abs() < 1e-12 && (w[1] - (1.0 - w0)).abs() < 1e-12);
        assert!((w[0] - 0.6698).abs() < 1e-4);
        assert!((f.a.data()[0] - w0).abs() < 1e-12);
        assert!((f.h_g.data()[0] - (1.0 + w0)).abs() < 1e-12);
        assert!((f.h_g.data()[1] - (1.0 - w0)).abs() < 1e-12);
    }

    #[test]
    fn fusion_degenerate_cases() {
        let z = Tensor::zeros(&[1, 3, 4]);
        let f = fuse(&z, &z, &[true, true, false], FusionValueSource::Symptom).unwrap();
        for row in f.attn_weights.data().chunks(3) {
            assert_eq!(row, &[0.5, 0.5, 0.0]);
        }
        assert!(f.a.data().iter().all(|&x| x == 0.0));
        assert!(f.h_g.data().iter().all(|&x| x == 0.0));

        let v = Tensor::new(vec![1, 1, 3], vec![0.5, -2.0, 1.0]).unwrap();
        let f = fuse(&v, &v, &[true], FusionValueSource::Symptom).unwrap();
        assert_eq!(f.attn_weights.data(), &[1.0]);
        assert_eq!(f.a.data(), v.data());
        assert_eq!(f.h_g.data(), &[1.0, -4.0, 2.0]);

        let e_s = Tensor::zeros(&[1, 2, 3]);
        let e_g = Tensor::zeros(&[1, 1, 3]);
        assert!(fuse(&e_s, &e_g, &[true, true], FusionValueSource::Gender).is_err());
    }

    #[test]
    fn residual_identity_is_exact() {
        let m = GemModel::new(cfg(Variant::Gem), 5).unwrap();
        let p = m.predict(&paired()).unwrap();
        let f = p.fusion.unwrap();
        let pb = paired();
        let e_g = encoder_forward(&m.params, m.g_encoder().unwrap(), &m.config, &pb.gender).unwrap();
        for ((h, a), e) in f.h_g.data().iter().zip(f.a.data()).zip(e_g.e.data()) {
            // h_g is the rounded sum itself; subtracting a back recovers e_g up to that rounding
            assert_eq!(h.to_bits(), (e + a).to_bits());
            assert!((h - a - e).abs() <= f64::EPSILON * h.abs());
        }
        for (r, row) in f.attn_weights.data().chunks(pb.seq_len()).enumerate() {
            let b = r / pb.seq_len();
            let mask = pb.symptom.mask_row(b);
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (w, &real) in row.iter().zip(mask) {
                if !real {
                    assert_eq!(*w, 0.0);
                }
            }
        }
    }

    #[test]
    fn variant_shapes_and_structure() {
        let gem = GemModel::new(cfg(Variant::Gem), 1).unwrap();
        let shared = GemModel::new(cfg(Variant::MtlShared), 1).unwrap();
        assert!(gem.num_parameters() > shared.num_parameters());
        let p = gem.predict(&paired()).unwrap();
        assert_eq!(p.symptom_logits().unwrap().shape(), &[2, 4]);
        assert_eq!(p.gender_logits().unwrap().shape(), &[2, 2]);
        let concat = GemModel::new(cfg(Variant::ConcatAblation), 1).unwrap();
        assert!(concat.predict(&paired()).unwrap().fusion.is_none());
        let stl = GemModel::new(cfg(Variant::StlGender), 1).unwrap();
        assert!(stl.predict(&paired()).unwrap().symptom_logits().is_err());
        assert!("transformer".parse::<Variant>().is_err());
    }

    #[test]
    fn identical_items_give_identical_rows_and_predict_is_repeatable() {
        let m = GemModel::new(cfg(Variant::Gem), 2).unwrap();
        let s = seq(&[5, 6, 7]);
        let pb = PairedBatch::new(&[s.clone(), s.clone()], &[s.clone(), s]).unwrap();
        let p = m.predict(&pb).unwrap();
        let l = p.symptom_logits().unwrap().data();
        assert_eq!(l[..4], l[4..]);
        let q = m.predict(&pb).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(p.symptom_logits().unwrap()), bits(q.symptom_logits().unwrap()));
        assert_eq!(bits(p.gender_logits().unwrap()), bits(q.gender_logits().unwrap()));
    }

    #[test]
    fn stl_symptom_ignores_gender_view() {
        let m = GemModel::new(cfg(Variant::StlSymptom), 2).unwrap();
        let a = m.predict(&paired()).unwrap();
        let mut other = paired();
        other.gender.ids.iter_mut().for_each(|i| *i = 19);
        let b = m.predict(&other).unwrap();
        assert_eq!(a.symptom_logits().unwrap(), b.symptom_logits().unwrap());
    }

    #[test]
    fn full_model_gradient_check() {
        for source in [SymptomHeadSource::Fused, SymptomHeadSource::SymptomCls] {
            let mut c = cfg(Variant::Gem);
            c.symptom_head_source = source;
            let m = GemModel::new(c, 9).unwrap();
            let pb = paired();
            assert_eq!(pb.seq_len(), 6);
            let mut store = m.params.clone();
            let report = finite_diff_check(&mut store, 1e-5, |p, g| {
                let v = m.forward_with(g, p, &pb)?;
                let ls = g.cross_entropy(v.symptom_logits.unwrap(), pb.symptom_labels().unwrap())?;
                let lg = g.cross_entropy(v.gender_logits.unwrap(), pb.gender_labels().unwrap())?;
                g.add(ls, lg)
            })
            .unwrap();
            assert_eq!(report.entries.len(), m.params.len());
            assert!(report.max_rel_error() <= 1e-5, "{:?}", &report.entries[..3]);
        }
    }
}

//! The flow-matching transformer.
//!
//! Each note row is embedded from its score features, its (possibly
//! masked) performance context, the noisy sample `x_t`, a learned mask
//! embedding and a learned "interpolated note" embedding. A stack of
//! pre-norm encoder layers follows, each with multi-query rotary attention
//! and a SwiGLU feedforward block, both behind adaptive layer norms driven
//! by the flow time. The control signal is projected and added to the
//! hidden states before the middle layer. Linear layers carry no bias
//! except the adaptive norm modulation maps.

pub mod checkpoint;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use symupe_tensor::{Array, Graph, ParamId, ParamStore, Segment, Var};
use thiserror::Error;

use crate::codec::tokenizer::MASK;
use crate::conditioning::ControlInputs;

pub use train::{StepStats, TrainConfig, TrainExample, Trainer};

/// Score and performance features per note.
pub const NOTE_FEATURES: usize = 4;
pub const ROPE_BASE: f64 = 10_000.0;
const LN_EPS: f64 = 1e-5;
const MAX_FREQ: f64 = 1000.0;
const MIN_FREQ: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub feat_emb_dim: usize,
    pub time_emb_dim: usize,
    /// 1-based index of the layer before which the control is added.
    pub cond_layer_index: usize,
    pub text_emb_dim: usize,
    pub tempo_tokens: usize,
    pub velocity_tokens: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            dim: 512,
            heads: 8,
            ff_dim: 1536,
            feat_emb_dim: 64,
            time_emb_dim: 64,
            cond_layer_index: 5,
            text_emb_dim: 768,
            tempo_tokens: 164,
            velocity_tokens: 131,
            max_len: 256,
        }
    }
}

impl ModelConfig {
    /// A small configuration for tests and desk-scale training.
    pub fn toy(layers: usize, dim: usize) -> Self {
        Self {
            layers,
            dim,
            heads: 4,
            ff_dim: dim * 2,
            feat_emb_dim: 16,
            time_emb_dim: 16,
            cond_layer_index: layers / 2 + 1,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::Config(m.into()));
        if self.layers == 0 || self.dim == 0 || self.heads == 0 {
            return err("layers, dim and heads must be positive");
        }
        if self.dim % self.heads != 0 || self.head_dim() % 2 != 0 {
            return err("dim must split into heads of even width");
        }
        if self.feat_emb_dim % 2 != 0 || self.time_emb_dim % 2 != 0 || self.feat_emb_dim == 0 || self.time_emb_dim == 0 {
            return err("embedding widths must be positive and even");
        }
        if !(1..=self.layers).contains(&self.cond_layer_index) {
            return err("cond_layer_index must be within 1..=layers");
        }
        if self.tempo_tokens <= MASK as usize || self.velocity_tokens <= MASK as usize {
            return err("token tables must include the reserved ids");
        }
        if self.ff_dim == 0 || self.text_emb_dim == 0 || self.max_len == 0 {
            return err("ff_dim, text_emb_dim and max_len must be positive");
        }
        Ok(())
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "layers = {}\ndim = {}\nheads = {}\nff_dim = {}\nfeat_emb_dim = {}\ntime_emb_dim = {}\n\
             cond_layer_index = {}\ntext_emb_dim = {}\ntempo_tokens = {}\nvelocity_tokens = {}\nmax_len = {}\n",
            self.layers,
            self.dim,
            self.heads,
            self.ff_dim,
            self.feat_emb_dim,
            self.time_emb_dim,
            self.cond_layer_index,
            self.text_emb_dim,
            self.tempo_tokens,
            self.velocity_tokens,
            self.max_len
        )
    }

    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let mut c = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Config(format!("expected key = value, got {line:?}")))?;
            let v: usize = v.trim().parse().map_err(|e| ModelError::Config(format!("{line:?}: {e}")))?;
            let slot = match k.trim() {
                "layers" => &mut c.layers,
                "dim" => &mut c.dim,
                "heads" => &mut c.heads,
                "ff_dim" => &mut c.ff_dim,
                "feat_emb_dim" => &mut c.feat_emb_dim,
                "time_emb_dim" => &mut c.time_emb_dim,
                "cond_layer_index" => &mut c.cond_layer_index,
                "text_emb_dim" => &mut c.text_emb_dim,
                "tempo_tokens" => &mut c.tempo_tokens,
                "velocity_tokens" => &mut c.velocity_tokens,
                "max_len" => &mut c.max_len,
                other => return Err(ModelError::Config(format!("unknown key {other:?}"))),
            };
            *slot = v;
        }
        c.validate()?;
        Ok(c)
    }

    /// Every parameter name with its shape, in creation order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, fe, te) = (self.dim, self.feat_emb_dim, self.time_emb_dim);
        let mut v: Vec<(String, Vec<usize>)> = vec![
            ("in.proj".into(), vec![2 * NOTE_FEATURES * fe, d]),
            ("in.noisy".into(), vec![NOTE_FEATURES, d]),
            ("emb.mask".into(), vec![2, d]),
            ("emb.interp".into(), vec![2, d]),
            ("ctrl.score_tempo".into(), vec![self.tempo_tokens, fe]),
            ("ctrl.score_velocity".into(), vec![self.velocity_tokens, fe]),
            ("ctrl.perf_tempo".into(), vec![self.tempo_tokens, fe]),
            ("ctrl.text".into(), vec![self.text_emb_dim, fe]),
            ("ctrl.text_null".into(), vec![1, fe]),
            ("ctrl.proj".into(), vec![4 * fe, d]),
        ];
        for l in 0..self.layers {
            for norm in ["attn_norm", "ff_norm"] {
                v.push((format!("layers.{l}.{norm}.gamma_w"), vec![te, d]));
                v.push((format!("layers.{l}.{norm}.gamma_b"), vec![d]));
                v.push((format!("layers.{l}.{norm}.beta_w"), vec![te, d]));
                v.push((format!("layers.{l}.{norm}.beta_b"), vec![d]));
            }
            let hd = self.head_dim();
            v.push((format!("layers.{l}.attn.wq"), vec![d, d]));
            v.push((format!("layers.{l}.attn.wk"), vec![d, hd]));
            v.push((format!("layers.{l}.attn.wv"), vec![d, hd]));
            v.push((format!("layers.{l}.attn.wo"), vec![d, d]));
            v.push((format!("layers.{l}.ff.w1"), vec![d, self.ff_dim]));
            v.push((format!("layers.{l}.ff.w2"), vec![d, self.ff_dim]));
            v.push((format!("layers.{l}.ff.w3"), vec![self.ff_dim, d]));
        }
        v.push(("out.proj".into(), vec![d, NOTE_FEATURES]));
        v
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Interleaved `[sin(w_0 v), cos(w_0 v), sin(w_1 v), ...]` with frequencies
/// spaced geometrically from 1000 down to 0.1.
pub fn sinusoidal_embed(value: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let w = if half > 1 { MAX_FREQ * (MIN_FREQ / MAX_FREQ).powf(k as f64 / (half - 1) as f64) } else { 1.0 };
        let (s, c) = (value * w).sin_cos();
        out[2 * k] = s;
        out[2 * k + 1] = c;
    }
    out
}

/// `(silu(x w1) * (x w2)) w3`.
pub fn swiglu(g: &mut Graph, x: Var, w1: Var, w2: Var, w3: Var) -> Var {
    let gate = g.matmul(x, w1);
    let gate = g.silu(gate);
    let up = g.matmul(x, w2);
    let m = g.mul(gate, up);
    g.matmul(m, w3)
}

/// `layer_norm(h) * (1 + gamma) + beta` with `gamma = temb gamma_w + gamma_b`
/// and likewise for `beta`. `temb` holds one row per sequence and
/// `seg_of_row[i]` picks the row applied to `h[i]`. `maps` is
/// `[gamma_w, gamma_b, beta_w, beta_b]`.
pub fn ada_layer_norm(g: &mut Graph, h: Var, temb: Var, seg_of_row: &[usize], maps: [Var; 4]) -> Var {
    let [gw, gb, bw, bb] = maps;
    let n = g.layer_norm(h, LN_EPS);
    let gamma = g.matmul(temb, gw);
    let gamma = g.add_row(gamma, gb);
    let gamma = g.gather_rows(gamma, seg_of_row);
    let scale = g.add_scalar(gamma, 1.0);
    let beta = g.matmul(temb, bw);
    let beta = g.add_row(beta, bb);
    let beta = g.gather_rows(beta, seg_of_row);
    let y = g.mul(n, scale);
    g.add(y, beta)
}

#[derive(Debug, Clone, Copy)]
struct AdaLnIds {
    gamma_w: ParamId,
    gamma_b: ParamId,
    beta_w: ParamId,
    beta_b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct LayerIds {
    attn_norm: AdaLnIds,
    ff_norm: AdaLnIds,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    w1: ParamId,
    w2: ParamId,
    w3: ParamId,
}

#[derive(Debug, Clone)]
struct Ids {
    in_proj: ParamId,
    in_noisy: ParamId,
    emb_mask: ParamId,
    emb_interp: ParamId,
    score_tempo: ParamId,
    score_velocity: ParamId,
    perf_tempo: ParamId,
    text: ParamId,
    text_null: ParamId,
    ctrl_proj: ParamId,
    layers: Vec<LayerIds>,
    out_proj: ParamId,
}

impl Ids {
    fn resolve(config: &ModelConfig, store: &ParamStore) -> Result<Self, ModelError> {
        let id = |n: &str| store.id(n).map_err(|e| ModelError::Checkpoint(e.to_string()));
        let ada = |l: usize, norm: &str| -> Result<AdaLnIds, ModelError> {
            Ok(AdaLnIds {
                gamma_w: id(&format!("layers.{l}.{norm}.gamma_w"))?,
                gamma_b: id(&format!("layers.{l}.{norm}.gamma_b"))?,
                beta_w: id(&format!("layers.{l}.{norm}.beta_w"))?,
                beta_b: id(&format!("layers.{l}.{norm}.beta_b"))?,
            })
        };
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |n: &str| id(&format!("layers.{l}.{n}"));
            layers.push(LayerIds {
                attn_norm: ada(l, "attn_norm")?,
                ff_norm: ada(l, "ff_norm")?,
                wq: p("attn.wq")?,
                wk: p("attn.wk")?,
                wv: p("attn.wv")?,
                wo: p("attn.wo")?,
                w1: p("ff.w1")?,
                w2: p("ff.w2")?,
                w3: p("ff.w3")?,
            });
        }
        Ok(Self {
            in_proj: id("in.proj")?,
            in_noisy: id("in.noisy")?,
            emb_mask: id("emb.mask")?,
            emb_interp: id("emb.interp")?,
            score_tempo: id("ctrl.score_tempo")?,
            score_velocity: id("ctrl.score_velocity")?,
            perf_tempo: id("ctrl.perf_tempo")?,
            text: id("ctrl.text")?,
            text_null: id("ctrl.text_null")?,
            ctrl_proj: id("ctrl.proj")?,
            layers,
            out_proj: id("out.proj")?,
        })
    }
}

/// One sequence's inputs for a forward pass. Feature arrays are `[n, 4]`.
#[derive(Debug, Clone, Copy)]
pub struct SequenceInput<'a> {
    /// Normalized score features.
    pub score: &'a Array,
    /// Current point on the flow path.
    pub x_t: &'a Array,
    /// Known performance features; rows with `mask[i]` set are ignored.
    pub x_ctx: &'a Array,
    pub mask: &'a [bool],
    pub interpolated: &'a [bool],
    pub t: f64,
    /// `None` behaves exactly like a control with every channel dropped.
    pub control: Option<&'a ControlInputs>,
}

impl SequenceInput<'_> {
    fn len(&self) -> usize {
        self.score.rows()
    }

    fn check(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let n = self.len();
        let four = |a: &Array| a.shape() == [n, NOTE_FEATURES];
        if n == 0 {
            return Err(ModelError::Shape("empty sequence".into()));
        }
        if !four(self.score) || !four(self.x_t) || !four(self.x_ctx) || self.mask.len() != n || self.interpolated.len() != n
        {
            return Err(ModelError::Shape(format!(
                "sequence of {n} notes: score {:?}, x_t {:?}, x_ctx {:?}, mask {}, interpolated {}",
                self.score.shape(),
                self.x_t.shape(),
                self.x_ctx.shape(),
                self.mask.len(),
                self.interpolated.len()
            )));
        }
        if let Some(c) = self.control {
            c.validate().map_err(|e| ModelError::Shape(e.to_string()))?;
            if c.len() != n {
                return Err(ModelError::Shape(format!("control has {} notes, sequence {n}", c.len())));
            }
            let bad = |ids: &[u32], max: usize| ids.iter().any(|&i| i as usize >= max);
            if bad(&c.score_tempo, config.tempo_tokens)
                || bad(&c.perf_tempo, config.tempo_tokens)
                || bad(&c.score_velocity, config.velocity_tokens)
            {
                return Err(ModelError::Shape("control token id outside its table".into()));
            }
            if let Some(t) = &c.text {
                if t.emb.cols() != config.text_emb_dim {
                    return Err(ModelError::Shape(format!(
                        "text embeddings have width {}, model expects {}",
                        t.emb.cols(),
                        config.text_emb_dim
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Packed per-row control data for a batch.
struct ControlRows {
    score_tempo: Vec<usize>,
    score_velocity: Vec<usize>,
    perf_tempo: Vec<usize>,
    text: Array,
    text_null: Array,
}

impl ControlRows {
    fn pack(config: &ModelConfig, inputs: &[SequenceInput]) -> Self {
        let total: usize = inputs.iter().map(SequenceInput::len).sum();
        let fe = config.feat_emb_dim;
        let mut rows = Self {
            score_tempo: Vec::with_capacity(total),
            score_velocity: Vec::with_capacity(total),
            perf_tempo: Vec::with_capacity(total),
            text: Array::zeros(&[total, config.text_emb_dim]),
            text_null: Array::zeros(&[total, fe]),
        };
        let null = MASK as usize;
        let mut r = 0;
        for inp in inputs {
            let n = inp.len();
            match inp.control {
                Some(c) => {
                    fn ids(v: &[u32], dropped: bool, null: usize) -> impl Iterator<Item = usize> + '_ {
                        v.iter().map(move |&i| if dropped { null } else { i as usize })
                    }
                    rows.score_tempo.extend(ids(&c.score_tempo, c.drop.score, null));
                    rows.score_velocity.extend(ids(&c.score_velocity, c.drop.score, null));
                    rows.perf_tempo.extend(ids(&c.perf_tempo, c.drop.perf, null));
                    for i in 0..n {
                        match &c.text {
                            Some(t) if !c.drop.text && t.present[i] => rows.text.row_mut(r + i).copy_from_slice(t.emb.row(i)),
                            _ => rows.text_null.row_mut(r + i).fill(1.0),
                        }
                    }
                }
                None => {
                    for v in [&mut rows.score_tempo, &mut rows.score_velocity, &mut rows.perf_tempo] {
                        v.extend(std::iter::repeat_n(null, n));
                    }
                    for i in 0..n {
                        rows.text_null.row_mut(r + i).fill(1.0);
                    }
                }
            }
            r += n;
        }
        rows
    }
}

#[derive(Debug, Clone)]
pub struct PianoFlow {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: Ids,
}

impl PianoFlow {
    /// Randomly initialized model. Adaptive norm maps and the output
    /// projection start at zero, so the initial field is zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in config.param_shapes() {
            let std = if name.contains("_norm.") || name == "out.proj" {
                0.0
            } else if name.starts_with("ctrl.score") || name.starts_with("ctrl.perf") || name == "ctrl.text_null" {
                1.0
            } else if name.starts_with("emb.") {
                0.5
            } else {
                1.0 / (shape[0] as f64).sqrt()
            };
            let value = if std == 0.0 {
                Array::zeros(&shape)
            } else {
                let normal = Normal::new(0.0, std).expect("finite std");
                Array::from_fn(&shape, |_| normal.sample(&mut rng))
            };
            params.insert(name, value);
        }
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        for (name, shape) in config.param_shapes() {
            let p = params.by_name(&name).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
            if p.shape() != shape.as_slice() {
                return Err(ModelError::Checkpoint(format!("{name}: shape {:?}, config expects {shape:?}", p.shape())));
            }
        }
        let ids = Ids::resolve(&config, &params)?;
        Ok(Self { config, params, ids })
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    fn linear(&self, g: &mut Graph, x: Var, w: ParamId) -> Var {
        let w = g.param(w);
        g.matmul(x, w)
    }

    fn ada_ln(&self, g: &mut Graph, h: Var, temb: Var, seg_of_row: &[usize], ids: &AdaLnIds) -> Var {
        let (gw, gb, bw, bb) = (g.param(ids.gamma_w), g.param(ids.gamma_b), g.param(ids.beta_w), g.param(ids.beta_b));
        ada_layer_norm(g, h, temb, seg_of_row, [gw, gb, bw, bb])
    }

    fn control(&self, g: &mut Graph, rows: ControlRows) -> Var {
        let n = rows.score_tempo.len();
        let st = g.param(self.ids.score_tempo);
        let st = g.gather_rows(st, &rows.score_tempo);
        let sv = g.param(self.ids.score_velocity);
        let sv = g.gather_rows(sv, &rows.score_velocity);
        let pt = g.param(self.ids.perf_tempo);
        let pt = g.gather_rows(pt, &rows.perf_tempo);
        let text = g.constant(rows.text);
        let tx = self.linear(g, text, self.ids.text);
        let null = g.param(self.ids.text_null);
        let null = g.gather_rows(null, &vec![0; n]);
        let null_mask = g.constant(rows.text_null);
        let null = g.mul(null, null_mask);
        let tx = g.add(tx, null);
        let cat = g.hcat(&[st, sv, pt, tx]);
        self.linear(g, cat, self.ids.ctrl_proj)
    }

    /// Projected control embedding `[n, dim]` for one sequence.
    pub fn assemble_control(&self, control: Option<&ControlInputs>, n: usize) -> Result<Array, ModelError> {
        let zeros = Array::zeros(&[n, NOTE_FEATURES]);
        let mask = vec![true; n];
        let inp = SequenceInput {
            score: &zeros,
            x_t: &zeros,
            x_ctx: &zeros,
            mask: &mask,
            interpolated: &mask,
            t: 0.0,
            control,
        };
        inp.check(&self.config)?;
        let mut g = Graph::new(&self.params);
        let c = self.control(&mut g, ControlRows::pack(&self.config, &[inp]));
        Ok(g.value(c).clone())
    }

    /// Builds the packed `[total_rows, 4]` field prediction on `g`.
    pub fn forward(&self, g: &mut Graph, inputs: &[SequenceInput]) -> Result<Var, ModelError> {
        if inputs.is_empty() {
            return Err(ModelError::Shape("empty batch".into()));
        }
        for inp in inputs {
            inp.check(&self.config)?;
        }
        let cfg = &self.config;
        let fe = cfg.feat_emb_dim;
        let total: usize = inputs.iter().map(SequenceInput::len).sum();

        let mut segments = Vec::with_capacity(inputs.len());
        let mut seg_of_row = Vec::with_capacity(total);
        let mut positions = Vec::with_capacity(total);
        let mut feats = Array::zeros(&[total, 2 * NOTE_FEATURES * fe]);
        let mut x_t = Array::zeros(&[total, NOTE_FEATURES]);
        let mut mask_idx = Vec::with_capacity(total);
        let mut interp_idx = Vec::with_capacity(total);
        let mut temb = Array::zeros(&[inputs.len(), cfg.time_emb_dim]);
        let mut r = 0;
        for (s, inp) in inputs.iter().enumerate() {
            let n = inp.len();
            segments.push(Segment { start: r, len: n });
            temb.row_mut(s).copy_from_slice(&sinusoidal_embed(inp.t, cfg.time_emb_dim));
            for i in 0..n {
                seg_of_row.push(s);
                positions.push(i);
                mask_idx.push(usize::from(inp.mask[i]));
                interp_idx.push(usize::from(inp.interpolated[i]));
                x_t.row_mut(r).copy_from_slice(inp.x_t.row(i));
                let row = feats.row_mut(r);
                for f in 0..NOTE_FEATURES {
                    row[f * fe..(f + 1) * fe].copy_from_slice(&sinusoidal_embed(inp.score.get(i, f), fe));
                    if !inp.mask[i] {
                        let o = (NOTE_FEATURES + f) * fe;
                        row[o..o + fe].copy_from_slice(&sinusoidal_embed(inp.x_ctx.get(i, f), fe));
                    }
                }
                r += 1;
            }
        }

        let feats = g.constant(feats);
        let mut h = self.linear(g, feats, self.ids.in_proj);
        let x_t = g.constant(x_t);
        let noisy = self.linear(g, x_t, self.ids.in_noisy);
        h = g.add(h, noisy);
        let me = g.param(self.ids.emb_mask);
        let me = g.gather_rows(me, &mask_idx);
        h = g.add(h, me);
        let ie = g.param(self.ids.emb_interp);
        let ie = g.gather_rows(ie, &interp_idx);
        h = g.add(h, ie);
        let temb = g.constant(temb);

        let ctrl = self.control(g, ControlRows::pack(cfg, inputs));
        let hd = cfg.head_dim();
        for (l, ids) in self.ids.layers.iter().enumerate() {
            if l + 1 == cfg.cond_layer_index {
                h = g.add(h, ctrl);
            }
            let a = self.ada_ln(g, h, temb, &seg_of_row, &ids.attn_norm);
            let q = self.linear(g, a, ids.wq);
            let k = self.linear(g, a, ids.wk);
            let v = self.linear(g, a, ids.wv);
            let q = g.rope(q, &positions, hd, ROPE_BASE);
            let k = g.rope(k, &positions, hd, ROPE_BASE);
            let o = g.mqa_attention(q, k, v, &segments, cfg.heads);
            let o = self.linear(g, o, ids.wo);
            h = g.add(h, o);

            let a = self.ada_ln(g, h, temb, &seg_of_row, &ids.ff_norm);
            let (w1, w2, w3) = (g.param(ids.w1), g.param(ids.w2), g.param(ids.w3));
            let m = swiglu(g, a, w1, w2, w3);
            h = g.add(h, m);
        }
        let h = g.layer_norm(h, LN_EPS);
        Ok(self.linear(g, h, self.ids.out_proj))
    }

    /// Field predictions, one `[n, 4]` array per input sequence.
    pub fn predict(&self, inputs: &[SequenceInput]) -> Result<Vec<Array>, ModelError> {
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, inputs)?;
        let v = g.value(out);
        let mut res = Vec::with_capacity(inputs.len());
        let mut r = 0;
        for inp in inputs {
            let n = inp.len();
            res.push(
                Array::from_vec(&[n, NOTE_FEATURES], v.data()[r * NOTE_FEATURES..(r + n) * NOTE_FEATURES].to_vec())
                    .expect("row slice"),
            );
            r += n;
        }
        Ok(res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_param_count_near_24m() {
        let n = ModelConfig::default().param_count();
        assert!((n as f64 - 24e6).abs() / 24e6 < 0.05, "{n}");
    }

    #[test]
    fn config_text_roundtrip() {
        let c = ModelConfig::toy(2, 32);
        assert_eq!(ModelConfig::parse(&c.to_text()).unwrap(), c);
        assert!(ModelConfig::parse("dim = 30\nheads = 4").is_err());
        assert!(ModelConfig::parse("colour = 3").is_err());
    }

    #[test]
    fn sinusoid_at_zero() {
        let e = sinusoidal_embed(0.0, 8);
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }
}

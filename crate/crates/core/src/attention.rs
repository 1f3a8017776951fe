//! Multi-head attention, biased multi-head attention and the student
//! SMILES transformer (standard layers followed by biased layers).

use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::distill::{build_mask, DistillParams};
use crate::embedding::{embed, embed_raw, EmbeddingError, EmbeddingTables, PositionMode, Vocabulary, DEFAULT_N_MAX};
use crate::smiles::UnifiedSequence;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint is not a {expected} model")]
    WrongKind { expected: &'static str },
    #[error("model expects {expected} input")]
    InputMode { expected: &'static str },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub ffn: usize,
    pub standard_layers: usize,
    pub biased_layers: usize,
    pub n_max: usize,
    pub out_dim: usize,
    pub dropout: f64,
    pub position: PositionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> ModelConfig {
        ModelConfig {
            d_model: 64,
            heads: 4,
            d_k: 16,
            d_v: 16,
            ffn: 256,
            standard_layers: 2,
            biased_layers: 2,
            n_max: DEFAULT_N_MAX,
            out_dim: 1,
            dropout: 0.0,
            position: PositionMode::Structural,
        }
    }

    pub fn paper() -> ModelConfig {
        ModelConfig {
            d_model: 512,
            heads: 16,
            d_k: 32,
            d_v: 32,
            ffn: 2048,
            standard_layers: 3,
            biased_layers: 3,
            dropout: 0.1,
            ..ModelConfig::desk()
        }
    }

    pub fn layers(&self) -> usize {
        self.standard_layers + self.biased_layers
    }

    /// Indices of the biased layers.
    pub fn biased_range(&self) -> Range<usize> {
        self.standard_layers..self.layers()
    }
}

/// Projections for one attention block. Per-head matrices are stored side
/// by side: head `i` of `wq` is columns `i*d_k .. (i+1)*d_k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MhaParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
}

/// Per-head bias projections, laid out like [`MhaParams::wq`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BiasParams {
    pub wq: ParamId,
    pub wk: ParamId,
}

/// Attention weights and raw bias matrices of one biased layer, one
/// `l x l` matrix per head.
#[derive(Clone, Debug)]
pub struct BiasedLayerState {
    pub attn: Vec<Var>,
    pub bias: Vec<Var>,
}

/// Extra term added to each head's attention logits.
#[derive(Clone, Copy, Debug)]
pub enum LogitBias<'a> {
    None,
    /// `M * B_i` with `B_i` from the bias projections.
    Learned(&'a BiasParams, &'a Tensor),
    /// A precomputed `l x l` matrix per head.
    Fixed(&'a [Var]),
}

fn attention_core(tape: &mut Tape, h: Var, p: &MhaParams, bias: LogitBias) -> Result<(Var, BiasedLayerState), TensorError> {
    let (wq, wk, wv, wo) = (tape.param(p.wq), tape.param(p.wk), tape.param(p.wv), tape.param(p.wo));
    let q = tape.matmul(h, wq)?;
    let k = tape.matmul(h, wk)?;
    let v = tape.matmul(h, wv)?;
    let learned = match bias {
        LogitBias::Learned(b, mask) => {
            let (bq, bk) = (tape.param(b.wq), tape.param(b.wk));
            Some((tape.matmul(h, bq)?, tape.matmul(h, bk)?, mask))
        }
        _ => None,
    };
    let scale = 1.0 / (p.d_k as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    let mut state = BiasedLayerState { attn: Vec::with_capacity(p.heads), bias: Vec::new() };
    for i in 0..p.heads {
        let qi = tape.slice_cols(q, i * p.d_k, p.d_k)?;
        let ki = tape.slice_cols(k, i * p.d_k, p.d_k)?;
        let vi = tape.slice_cols(v, i * p.d_v, p.d_v)?;
        let scores = tape.matmul_nt(qi, ki)?;
        let mut logits = tape.scale(scores, scale)?;
        if let LogitBias::Fixed(fixed) = bias {
            logits = tape.add(logits, fixed[i])?;
        }
        if let Some((hq, hk, mask)) = learned {
            let bqi = tape.slice_cols(hq, i * p.d_k, p.d_k)?;
            let bki = tape.slice_cols(hk, i * p.d_k, p.d_k)?;
            let b = tape.matmul_nt(bqi, bki)?;
            let mb = tape.mul_const(b, mask)?;
            logits = tape.add(logits, mb)?;
            state.bias.push(b);
        }
        let a = tape.softmax(logits)?;
        state.attn.push(a);
        heads.push(tape.matmul(a, vi)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    Ok((tape.matmul(cat, wo)?, state))
}

/// `Concat(head_1..head_h) W^O` with `head_i = softmax(Q_i K_i^T / sqrt(d_k)) V_i`.
pub fn mha(tape: &mut Tape, h: Var, p: &MhaParams) -> Result<(Var, Vec<Var>), TensorError> {
    let (out, state) = attention_core(tape, h, p, LogitBias::None)?;
    Ok((out, state.attn))
}

/// Multi-head attention whose logits get `M * B_i` added, where
/// `B_i = (H W_i^Qb)(H W_i^Kb)^T`.
pub fn biased_mha(
    tape: &mut Tape,
    h: Var,
    mask: &Tensor,
    p: &MhaParams,
    bias: &BiasParams,
) -> Result<(Var, BiasedLayerState), TensorError> {
    attention_core(tape, h, p, LogitBias::Learned(bias, mask))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerParams {
    pub ln1: (ParamId, ParamId),
    pub mha: MhaParams,
    pub bias: Option<BiasParams>,
    pub ln2: (ParamId, ParamId),
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Registers a pre-LN transformer layer's parameters under `prefix`.
pub fn register_layer<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    heads: usize,
    d_k: usize,
    d_v: usize,
    ffn: usize,
    biased: bool,
    rng: &mut R,
) -> LayerParams {
    let std = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
    let ln1 = (store.add_filled(format!("{prefix}.ln1.gamma"), &[d], 1.0), store.add_filled(format!("{prefix}.ln1.beta"), &[d], 0.0));
    let mha = MhaParams {
        wq: store.add_normal(format!("{prefix}.attn.wq"), &[d, heads * d_k], std(d), rng),
        wk: store.add_normal(format!("{prefix}.attn.wk"), &[d, heads * d_k], std(d), rng),
        wv: store.add_normal(format!("{prefix}.attn.wv"), &[d, heads * d_v], std(d), rng),
        wo: store.add_normal(format!("{prefix}.attn.wo"), &[heads * d_v, d], std(heads * d_v), rng),
        heads,
        d_k,
        d_v,
    };
    let bias = biased.then(|| BiasParams {
        wq: store.add_normal(format!("{prefix}.bias.wq"), &[d, heads * d_k], std(d), rng),
        wk: store.add_normal(format!("{prefix}.bias.wk"), &[d, heads * d_k], std(d), rng),
    });
    let ln2 = (store.add_filled(format!("{prefix}.ln2.gamma"), &[d], 1.0), store.add_filled(format!("{prefix}.ln2.beta"), &[d], 0.0));
    LayerParams {
        ln1,
        mha,
        bias,
        ln2,
        w1: store.add_normal(format!("{prefix}.ffn.w1"), &[d, ffn], std(d), rng),
        b1: store.add_filled(format!("{prefix}.ffn.b1"), &[ffn], 0.0),
        w2: store.add_normal(format!("{prefix}.ffn.w2"), &[ffn, d], std(ffn), rng),
        b2: store.add_filled(format!("{prefix}.ffn.b2"), &[d], 0.0),
    }
}

/// Looks up a layer registered by [`register_layer`].
pub fn resolve_layer(store: &ParamStore, prefix: &str, heads: usize, d_k: usize, d_v: usize) -> Result<LayerParams, TensorError> {
    let id = |s: &str| store.id(&format!("{prefix}.{s}"));
    let bias = match (id("bias.wq"), id("bias.wk")) {
        (Ok(wq), Ok(wk)) => Some(BiasParams { wq, wk }),
        _ => None,
    };
    Ok(LayerParams {
        ln1: (id("ln1.gamma")?, id("ln1.beta")?),
        mha: MhaParams { wq: id("attn.wq")?, wk: id("attn.wk")?, wv: id("attn.wv")?, wo: id("attn.wo")?, heads, d_k, d_v },
        bias,
        ln2: (id("ln2.gamma")?, id("ln2.beta")?),
        w1: id("ffn.w1")?,
        b1: id("ffn.b1")?,
        w2: id("ffn.w2")?,
        b2: id("ffn.b2")?,
    })
}

/// One pre-LN block: `h + Attn(LN(h))`, then `h + FFN(LN(h))`. `mask`
/// selects biased attention and is ignored for standard layers.
pub fn transformer_layer(
    tape: &mut Tape,
    h: Var,
    layer: &LayerParams,
    mask: Option<&Tensor>,
) -> Result<(Var, BiasedLayerState), TensorError> {
    let bias = match (&layer.bias, mask) {
        (Some(b), Some(m)) => LogitBias::Learned(b, m),
        _ => LogitBias::None,
    };
    layer_with_bias(tape, h, layer, bias)
}

/// [`transformer_layer`] with an explicit logit bias.
pub fn layer_with_bias(
    tape: &mut Tape,
    h: Var,
    layer: &LayerParams,
    bias: LogitBias,
) -> Result<(Var, BiasedLayerState), TensorError> {
    let (g1, b1) = (tape.param(layer.ln1.0), tape.param(layer.ln1.1));
    let x = tape.layer_norm(h, g1, b1, LN_EPS)?;
    let (a, state) = attention_core(tape, x, &layer.mha, bias)?;
    let a = tape.dropout(a)?;
    let h = tape.add(h, a)?;
    let (g2, b2) = (tape.param(layer.ln2.0), tape.param(layer.ln2.1));
    let y = tape.layer_norm(h, g2, b2, LN_EPS)?;
    let (w1, bb1, w2, bb2) = (tape.param(layer.w1), tape.param(layer.b1), tape.param(layer.w2), tape.param(layer.b2));
    let y = tape.matmul(y, w1)?;
    let y = tape.add_row(y, bb1)?;
    let y = tape.gelu(y)?;
    let y = tape.matmul(y, w2)?;
    let y = tape.add_row(y, bb2)?;
    let y = tape.dropout(y)?;
    Ok((tape.add(h, y)?, state))
}

/// Student input: a pre-transformed sequence, or raw lexical tokens for the
/// sinusoidal baseline.
#[derive(Clone, Copy, Debug)]
pub enum ModelInput<'a> {
    Unified(&'a UnifiedSequence),
    Raw(&'a [String]),
}

/// Forward-pass result with distillation taps.
#[derive(Clone, Debug)]
pub struct StForward {
    pub prediction: Var,
    /// Virtual-token row (`1 x d`) after each layer.
    pub virtual_rows: Vec<Var>,
    /// Per-layer states; biased layers carry their `B_i`.
    pub layers: Vec<BiasedLayerState>,
    pub mask: Tensor,
    pub n: usize,
    pub m: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StkdModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub embed: EmbeddingTables,
    pub layers: Vec<LayerParams>,
    pub final_ln: (ParamId, ParamId),
    pub head: (ParamId, ParamId),
    pub distill: DistillParams,
}

const STUDENT_KIND: &str = "stkd-student";

impl StkdModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> StkdModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        EmbeddingTables::register(&mut store, vocab.len(), c.d_model, c.n_max, c.position, &mut rng);
        for i in 0..c.layers() {
            let biased = c.biased_range().contains(&i);
            register_layer(&mut store, &format!("layer{i}"), c.d_model, c.heads, c.d_k, c.d_v, c.ffn, biased, &mut rng);
        }
        store.add_filled("final_ln.gamma", &[c.d_model], 1.0);
        store.add_filled("final_ln.beta", &[c.d_model], 0.0);
        store.add_normal("head.w", &[c.d_model, c.out_dim], (1.0 / c.d_model as f64).sqrt(), &mut rng);
        store.add_filled("head.b", &[c.out_dim], 0.0);
        StkdModel::from_parts(config, vocab, store).expect("freshly registered layout")
    }

    /// Adds distillation projections for a teacher with width `d_v` and
    /// `h_teacher` heads. `force_attn` adds `W_attn` even when head counts match.
    pub fn attach_distill(&mut self, d_v: usize, h_teacher: usize, force_attn: bool, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d157);
        let c = &self.config;
        self.distill = DistillParams::register(&mut self.params, c.d_model, d_v, c.heads, h_teacher, force_attn, &mut rng);
    }

    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, params: ParamStore) -> Result<StkdModel, TensorError> {
        let embed = EmbeddingTables::from_store(&params, config.n_max)?;
        let layers = (0..config.layers())
            .map(|i| resolve_layer(&params, &format!("layer{i}"), config.heads, config.d_k, config.d_v))
            .collect::<Result<Vec<_>, _>>()?;
        let final_ln = (params.id("final_ln.gamma")?, params.id("final_ln.beta")?);
        let head = (params.id("head.w")?, params.id("head.b")?);
        let distill = DistillParams::from_store(&params);
        Ok(StkdModel { config, vocab, params, embed, layers, final_ln, head, distill })
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let meta = serde_json::json!({
            "kind": STUDENT_KIND,
            "config": self.config,
            "vocab": self.vocab.symbols(),
            "extra": extra,
        });
        Checkpoint { meta, params: self.params.clone() }
    }

    /// Model plus the `extra` metadata stored alongside it.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<(StkdModel, serde_json::Value), ModelError> {
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some(STUDENT_KIND) {
            return Err(ModelError::WrongKind { expected: STUDENT_KIND });
        }
        let config: ModelConfig = serde_json::from_value(ck.meta["config"].clone()).map_err(CheckpointError::from)?;
        let symbols: Vec<String> = serde_json::from_value(ck.meta["vocab"].clone()).map_err(CheckpointError::from)?;
        let extra = ck.meta.get("extra").cloned().unwrap_or(serde_json::Value::Null);
        let model = StkdModel::from_parts(config, Vocabulary::from_symbols(symbols), ck.params)?;
        Ok((model, extra))
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<(), ModelError> {
        Ok(self.to_checkpoint(extra).save(path)?)
    }

    pub fn load(path: &Path) -> Result<(StkdModel, serde_json::Value), ModelError> {
        StkdModel::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// Embeds the input, runs every layer, and reads the prediction from the
/// final virtual-token row.
pub fn st_forward(tape: &mut Tape, model: &StkdModel, input: ModelInput) -> Result<StForward, ModelError> {
    let (h0, n, m) = match (input, model.config.position) {
        (ModelInput::Unified(seq), PositionMode::Structural) => {
            (embed(tape, &model.embed, &model.vocab, seq)?, seq.n(), seq.m())
        }
        (ModelInput::Raw(tokens), PositionMode::Sinusoidal) => (embed_raw(tape, &model.embed, &model.vocab, tokens)?, 0, 0),
        (_, PositionMode::Structural) => return Err(ModelError::InputMode { expected: "pre-transformed" }),
        (_, PositionMode::Sinusoidal) => return Err(ModelError::InputMode { expected: "raw-token" }),
    };
    let l = tape.value(h0).dims2().0;
    // raw input has no atom positions, so every bias is masked out
    let mask = if n > 0 { build_mask(n, m) } else { Tensor::zeros(&[l, l]) };
    let mut h = h0;
    let mut virtual_rows = Vec::with_capacity(model.layers.len());
    let mut states = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let (out, state) = transformer_layer(tape, h, layer, Some(&mask))?;
        h = out;
        virtual_rows.push(tape.row(h, 0)?);
        states.push(state);
    }
    let (g, b) = (tape.param(model.final_ln.0), tape.param(model.final_ln.1));
    let last = *virtual_rows.last().expect("at least one layer");
    let z = tape.layer_norm(last, g, b, LN_EPS)?;
    let (w, hb) = (tape.param(model.head.0), tape.param(model.head.1));
    let y = tape.matmul(z, w)?;
    let prediction = tape.add_row(y, hb)?;
    Ok(StForward { prediction, virtual_rows, layers: states, mask, n, m })
}

/// Prediction only, with dropout off.
pub fn predict(model: &StkdModel, input: ModelInput) -> Result<Vec<f64>, ModelError> {
    let mut tape = Tape::new(&model.params);
    let out = st_forward(&mut tape, model, input)?;
    Ok(tape.value(out.prediction).data().to_vec())
}

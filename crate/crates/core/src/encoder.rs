//! The transformer encoder: embeddings, attention blocks with optional
//! bottleneck adapters, and the per-layer CLS stack the pooling head
//! consumes.
//!
//! Parameters live outside any tape and are leased into one per forward
//! pass. All projections use the row-vector convention `x @ W + b`.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heads::{ClassifierParams, VAttParams};
use crate::numerics::{NumericsError, Scalar, Tape, TensorRef, MASKED_LOGIT};

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {0} exceeds max_positions {1}")]
    SequenceTooLong(usize, usize),
    #[error("ids and mask lengths differ: {0} vs {1}")]
    MaskMismatch(usize, usize),
    #[error("first sequence position (CLS) must be unmasked")]
    MaskedCls,
}

pub type Result<T> = std::result::Result<T, EncoderError>;

/// Whether a run trains everything or only adapters + heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    FineTune,
    Adapter,
}

/// Full architectural hyperparameters of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub num_classes: usize,
    pub adapter_enabled: bool,
    pub adapter_bottleneck: usize,
    pub vatt_enabled: bool,
    #[serde(default = "default_dropout_hidden")]
    pub dropout_hidden: f64,
    #[serde(default = "default_dropout_cls")]
    pub dropout_cls: f64,
    pub mode: TrainMode,
}

fn default_dropout_hidden() -> f64 {
    0.1
}

fn default_dropout_cls() -> f64 {
    0.3
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                problems.push(format!("{} must be positive", name));
            }
        }
        if self.heads > 0 && !self.hidden.is_multiple_of(self.heads) {
            problems.push(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if self.adapter_enabled {
            if self.adapter_bottleneck == 0 {
                problems.push("adapter_bottleneck must be positive".into());
            }
            if self.adapter_bottleneck >= self.hidden {
                problems.push(format!(
                    "adapter_bottleneck {} must be smaller than hidden {}",
                    self.adapter_bottleneck, self.hidden
                ));
            }
        }
        if self.mode == TrainMode::Adapter && !self.adapter_enabled {
            problems.push("mode = adapter requires adapter_enabled".into());
        }
        for (name, p) in [
            ("dropout_hidden", self.dropout_hidden),
            ("dropout_cls", self.dropout_cls),
        ] {
            if !(0.0..1.0).contains(&p) {
                problems.push(format!("{} = {} not in [0, 1)", name, p));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(EncoderError::InvalidConfig(problems.join("; ")))
        }
    }
}

/// Which LR group and freezing rules a parameter follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Encoder,
    Adapter,
    VAtt,
    Classifier,
}

/// A named model parameter. `decay` is false for biases and layer-norm
/// gains/shifts, which are exempt from weight decay.
#[derive(Debug, Clone)]
pub struct Param<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub kind: ParamKind,
    pub decay: bool,
}

impl<S: Scalar> Param<S> {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// One adapter: `x + gelu(x W_down + b_down) W_up + b_up`.
/// Up-projection starts at exactly zero, so a fresh adapter is the identity.
#[derive(Debug, Clone)]
pub struct AdapterParams<S> {
    pub w_down: Param<S>,
    pub b_down: Param<S>,
    pub w_up: Param<S>,
    pub b_up: Param<S>,
}

/// One transformer block: multi-head attention, FFN, two layer norms, and
/// optionally one adapter after each sublayer.
#[derive(Debug, Clone)]
pub struct BlockParams<S> {
    pub wq: Param<S>,
    pub bq: Param<S>,
    pub wk: Param<S>,
    pub bk: Param<S>,
    pub wv: Param<S>,
    pub bv: Param<S>,
    pub wo: Param<S>,
    pub bo: Param<S>,
    pub w1: Param<S>,
    pub b1: Param<S>,
    pub w2: Param<S>,
    pub b2: Param<S>,
    pub ln1_gain: Param<S>,
    pub ln1_shift: Param<S>,
    pub ln2_gain: Param<S>,
    pub ln2_shift: Param<S>,
    pub adapter_after_mha: Option<AdapterParams<S>>,
    pub adapter_after_ffn: Option<AdapterParams<S>>,
}

/// A complete model: encoder, optional vertical-attention pooling, and the
/// classification head.
#[derive(Debug, Clone)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub token_embeddings: Param<S>,
    pub position_embeddings: Param<S>,
    pub blocks: Vec<BlockParams<S>>,
    pub vatt: Option<VAttParams<S>>,
    pub classifier: ClassifierParams<S>,
}

/// Per-layer CLS vectors plus the last layer's full hidden states.
pub struct LayerOutputs {
    /// `z[n]` = CLS row of block `n`'s output, `[1, hidden]` each.
    pub z: Vec<TensorRef>,
    /// `[seq, hidden]` output of the last block.
    pub h_last: TensorRef,
}

/// Logits plus the vertical-attention weights when pooling was used.
pub struct ForwardOutput {
    pub logits: TensorRef,
    pub alpha: Option<TensorRef>,
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// FNV-1a. Keys each parameter's init stream so two configs sharing a
/// parameter name draw identical values regardless of which other parameters
/// exist.
pub fn stable_hash64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E3779B97F4A7C15) ^ stable_hash64(name))
}

/// Standard normal via Box-Muller, clamped to two standard deviations.
fn trunc_normal_value(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    z.clamp(-2.0, 2.0) * INIT_STD
}

enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

struct Builder<'a> {
    fill: &'a mut dyn FnMut(&str, usize, Init) -> Vec<f64>,
}

impl Builder<'_> {
    fn param<S: Scalar>(
        &mut self,
        name: String,
        shape: Vec<usize>,
        kind: ParamKind,
        decay: bool,
        init: Init,
    ) -> Param<S> {
        let numel = shape.iter().product();
        let data = (self.fill)(&name, numel, init)
            .into_iter()
            .map(S::from_f64)
            .collect();
        Param {
            name,
            shape,
            data,
            kind,
            decay,
        }
    }

    fn adapter<S: Scalar>(&mut self, prefix: &str, d: usize, m: usize) -> AdapterParams<S> {
        AdapterParams {
            w_down: self.param(
                format!("{prefix}.w_down"),
                vec![d, m],
                ParamKind::Adapter,
                true,
                Init::TruncNormal,
            ),
            b_down: self.param(
                format!("{prefix}.b_down"),
                vec![m],
                ParamKind::Adapter,
                false,
                Init::Zeros,
            ),
            w_up: self.param(
                format!("{prefix}.w_up"),
                vec![m, d],
                ParamKind::Adapter,
                true,
                Init::Zeros,
            ),
            b_up: self.param(
                format!("{prefix}.b_up"),
                vec![d],
                ParamKind::Adapter,
                false,
                Init::Zeros,
            ),
        }
    }
}

fn build_model<S: Scalar>(config: &ModelConfig, builder: &mut Builder<'_>) -> Model<S> {
    let d = config.hidden;
    let token_embeddings = builder.param(
        "embeddings.token".into(),
        vec![config.vocab_size, d],
        ParamKind::Encoder,
        true,
        Init::TruncNormal,
    );
    let position_embeddings = builder.param(
        "embeddings.position".into(),
        vec![config.max_positions, d],
        ParamKind::Encoder,
        true,
        Init::TruncNormal,
    );

    let mut blocks = Vec::with_capacity(config.num_layers);
    for i in 0..config.num_layers {
        let p = |suffix: &str| format!("block{i}.{suffix}");
        let weight = |b: &mut Builder<'_>, suffix: &str, shape: Vec<usize>| {
            b.param(p(suffix), shape, ParamKind::Encoder, true, Init::TruncNormal)
        };
        let bias = |b: &mut Builder<'_>, suffix: &str, n: usize| {
            b.param(p(suffix), vec![n], ParamKind::Encoder, false, Init::Zeros)
        };
        blocks.push(BlockParams {
            wq: weight(builder, "attn.wq", vec![d, d]),
            bq: bias(builder, "attn.bq", d),
            wk: weight(builder, "attn.wk", vec![d, d]),
            bk: bias(builder, "attn.bk", d),
            wv: weight(builder, "attn.wv", vec![d, d]),
            bv: bias(builder, "attn.bv", d),
            wo: weight(builder, "attn.wo", vec![d, d]),
            bo: bias(builder, "attn.bo", d),
            w1: weight(builder, "ffn.w1", vec![d, config.ffn_dim]),
            b1: bias(builder, "ffn.b1", config.ffn_dim),
            w2: weight(builder, "ffn.w2", vec![config.ffn_dim, d]),
            b2: bias(builder, "ffn.b2", d),
            ln1_gain: builder.param(p("ln1.gain"), vec![d], ParamKind::Encoder, false, Init::Ones),
            ln1_shift: builder.param(p("ln1.shift"), vec![d], ParamKind::Encoder, false, Init::Zeros),
            ln2_gain: builder.param(p("ln2.gain"), vec![d], ParamKind::Encoder, false, Init::Ones),
            ln2_shift: builder.param(p("ln2.shift"), vec![d], ParamKind::Encoder, false, Init::Zeros),
            adapter_after_mha: config
                .adapter_enabled
                .then(|| builder.adapter(&p("adapter_mha"), d, config.adapter_bottleneck)),
            adapter_after_ffn: config
                .adapter_enabled
                .then(|| builder.adapter(&p("adapter_ffn"), d, config.adapter_bottleneck)),
        });
    }

    let vatt = config.vatt_enabled.then(|| VAttParams {
        level_embeddings: (0..config.num_layers)
            .map(|n| {
                builder.param(
                    format!("vatt.level{n}"),
                    vec![1, d],
                    ParamKind::VAtt,
                    true,
                    Init::TruncNormal,
                )
            })
            .collect(),
        wq: builder.param("vatt.wq".into(), vec![d, d], ParamKind::VAtt, true, Init::TruncNormal),
        wk: builder.param("vatt.wk".into(), vec![d, d], ParamKind::VAtt, true, Init::TruncNormal),
        wv: (0..config.num_layers)
            .map(|n| {
                builder.param(
                    format!("vatt.wv{n}"),
                    vec![d, d],
                    ParamKind::VAtt,
                    true,
                    Init::TruncNormal,
                )
            })
            .collect(),
    });

    let classifier = ClassifierParams {
        w: builder.param(
            "classifier.w".into(),
            vec![d, config.num_classes],
            ParamKind::Classifier,
            true,
            Init::TruncNormal,
        ),
        b: builder.param(
            "classifier.b".into(),
            vec![config.num_classes],
            ParamKind::Classifier,
            false,
            Init::Zeros,
        ),
    };

    Model {
        config: config.clone(),
        token_embeddings,
        position_embeddings,
        blocks,
        vatt,
        classifier,
    }
}

/// Random-initialize a model. Weights draw from a truncated normal
/// (sigma 0.02, clamped at two sigma), layer-norm gains are 1 and shifts 0,
/// biases 0, adapter up-projections exactly 0.
///
/// Each parameter gets its own RNG stream keyed by `(seed, name)`, so the
/// same `(config, seed)` is bitwise reproducible and shared parameters are
/// identical across configs that differ only in extra components.
pub fn init_model<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<S>> {
    config.validate()?;
    let mut fill = |name: &str, numel: usize, init: Init| -> Vec<f64> {
        match init {
            Init::TruncNormal => {
                let mut rng = param_rng(seed, name);
                (0..numel).map(|_| trunc_normal_value(&mut rng)).collect()
            }
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
        }
    };
    Ok(build_model(config, &mut Builder { fill: &mut fill }))
}

impl<S: Scalar> Model<S> {
    /// All-zero model with the right names and shapes; checkpoint loading
    /// fills it in.
    pub fn skeleton(config: &ModelConfig) -> Result<Model<S>> {
        config.validate()?;
        let mut fill = |_: &str, numel: usize, init: Init| -> Vec<f64> {
            match init {
                Init::Ones => vec![1.0; numel],
                _ => vec![0.0; numel],
            }
        };
        Ok(build_model(config, &mut Builder { fill: &mut fill }))
    }

    /// Parameters in canonical (checkpoint) order.
    pub fn params(&self) -> Vec<&Param<S>> {
        let mut out = Vec::new();
        out.push(&self.token_embeddings);
        out.push(&self.position_embeddings);
        for block in &self.blocks {
            out.extend([
                &block.wq, &block.bq, &block.wk, &block.bk, &block.wv, &block.bv, &block.wo,
                &block.bo, &block.w1, &block.b1, &block.w2, &block.b2, &block.ln1_gain,
                &block.ln1_shift, &block.ln2_gain, &block.ln2_shift,
            ]);
            for adapter in [&block.adapter_after_mha, &block.adapter_after_ffn]
                .into_iter()
                .flatten()
            {
                out.extend([&adapter.w_down, &adapter.b_down, &adapter.w_up, &adapter.b_up]);
            }
        }
        if let Some(vatt) = &self.vatt {
            out.extend(vatt.level_embeddings.iter());
            out.push(&vatt.wq);
            out.push(&vatt.wk);
            out.extend(vatt.wv.iter());
        }
        out.push(&self.classifier.w);
        out.push(&self.classifier.b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut out: Vec<&mut Param<S>> = Vec::new();
        out.push(&mut self.token_embeddings);
        out.push(&mut self.position_embeddings);
        for block in &mut self.blocks {
            out.extend([
                &mut block.wq,
                &mut block.bq,
                &mut block.wk,
                &mut block.bk,
                &mut block.wv,
                &mut block.bv,
                &mut block.wo,
                &mut block.bo,
                &mut block.w1,
                &mut block.b1,
                &mut block.w2,
                &mut block.b2,
                &mut block.ln1_gain,
                &mut block.ln1_shift,
                &mut block.ln2_gain,
                &mut block.ln2_shift,
            ]);
            for adapter in [&mut block.adapter_after_mha, &mut block.adapter_after_ffn]
                .into_iter()
                .flatten()
            {
                out.extend([
                    &mut adapter.w_down,
                    &mut adapter.b_down,
                    &mut adapter.w_up,
                    &mut adapter.b_up,
                ]);
            }
        }
        if let Some(vatt) = &mut self.vatt {
            out.extend(vatt.level_embeddings.iter_mut());
            out.push(&mut vatt.wq);
            out.push(&mut vatt.wk);
            out.extend(vatt.wv.iter_mut());
        }
        out.push(&mut self.classifier.w);
        out.push(&mut self.classifier.b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Train (with a dropout RNG) or eval (dropout off).
pub enum Phase<'a> {
    Train { rng: &'a mut ChaCha8Rng },
    Eval,
}

/// One forward pass: a tape, the parameter lease cache, the trainable-name
/// set (None = nothing requires grad), and the phase.
pub struct ForwardSession<'a, S: Scalar> {
    pub tape: &'a mut Tape<S>,
    pub trainable: Option<&'a BTreeSet<String>>,
    pub phase: Phase<'a>,
    leased: HashMap<String, TensorRef>,
    bindings: Vec<(String, TensorRef)>,
}

impl<'a, S: Scalar> ForwardSession<'a, S> {
    pub fn new(
        tape: &'a mut Tape<S>,
        trainable: Option<&'a BTreeSet<String>>,
        phase: Phase<'a>,
    ) -> Self {
        ForwardSession {
            tape,
            trainable,
            phase,
            leased: HashMap::new(),
            bindings: Vec::new(),
        }
    }

    /// Copy a parameter onto the tape (once per session; later calls reuse
    /// the same tensor). It requires grad iff its name is in the trainable
    /// set.
    pub fn lease(&mut self, param: &Param<S>) -> Result<TensorRef> {
        if let Some(&t) = self.leased.get(&param.name) {
            return Ok(t);
        }
        let wants_grad = self
            .trainable
            .is_some_and(|set| set.contains(&param.name));
        let t = if wants_grad {
            self.tape.variable(param.data.clone(), &param.shape)?
        } else {
            self.tape.input(param.data.clone(), &param.shape)?
        };
        self.leased.insert(param.name.clone(), t);
        self.bindings.push((param.name.clone(), t));
        Ok(t)
    }

    /// Bind a parameter name to an existing tape tensor before the forward
    /// pass; `lease` then returns it instead of copying the stored data.
    /// Gradient checking uses this to substitute a probe tensor for one
    /// parameter.
    pub fn preload(&mut self, name: &str, t: TensorRef) {
        self.leased.insert(name.to_string(), t);
        self.bindings.push((name.to_string(), t));
    }

    /// Dropout that is active only in the train phase.
    pub fn dropout(&mut self, x: TensorRef, p: f64) -> Result<TensorRef> {
        match &mut self.phase {
            Phase::Train { rng } => Ok(self.tape.dropout(x, p, rng)?),
            Phase::Eval => Ok(x),
        }
    }

    /// `(name, tensor)` pairs of every parameter leased into this session,
    /// in lease order.
    pub fn bindings(&self) -> &[(String, TensorRef)] {
        &self.bindings
    }
}

/// Houlsby bottleneck: `x + gelu(x W_down + b_down) W_up + b_up`.
/// With a zero-initialized up-projection this is exactly the identity.
pub fn adapter_forward<S: Scalar>(
    sess: &mut ForwardSession<'_, S>,
    adapter: &AdapterParams<S>,
    x: TensorRef,
) -> Result<TensorRef> {
    let w_down = sess.lease(&adapter.w_down)?;
    let b_down = sess.lease(&adapter.b_down)?;
    let w_up = sess.lease(&adapter.w_up)?;
    let b_up = sess.lease(&adapter.b_up)?;
    let tape = &mut *sess.tape;
    let down = tape.matmul(x, w_down)?;
    let down = tape.bias_add(down, b_down)?;
    let act = tape.gelu(down)?;
    let up = tape.matmul(act, w_up)?;
    let up = tape.bias_add(up, b_up)?;
    Ok(tape.add(x, up)?)
}

fn multi_head_attention<S: Scalar>(
    sess: &mut ForwardSession<'_, S>,
    block: &BlockParams<S>,
    h_in: TensorRef,
    mask_bias: TensorRef,
    config: &ModelConfig,
) -> Result<TensorRef> {
    let wq = sess.lease(&block.wq)?;
    let bq = sess.lease(&block.bq)?;
    let wk = sess.lease(&block.wk)?;
    let bk = sess.lease(&block.bk)?;
    let wv = sess.lease(&block.wv)?;
    let bv = sess.lease(&block.bv)?;
    let wo = sess.lease(&block.wo)?;
    let bo = sess.lease(&block.bo)?;

    let tape = &mut *sess.tape;
    let q = tape.matmul(h_in, wq)?;
    let q = tape.bias_add(q, bq)?;
    let k = tape.matmul(h_in, wk)?;
    let k = tape.bias_add(k, bk)?;
    let v = tape.matmul(h_in, wv)?;
    let v = tape.bias_add(v, bv)?;

    let dk = config.hidden / config.heads;
    let inv_sqrt_dk = S::from_f64(1.0 / (dk as f64).sqrt());
    let mut head_outputs = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let q_h = tape.slice(q, 1, h * dk, dk)?;
        let k_h = tape.slice(k, 1, h * dk, dk)?;
        let v_h = tape.slice(v, 1, h * dk, dk)?;
        let k_h_t = tape.transpose(k_h)?;
        let scores = tape.matmul(q_h, k_h_t)?;
        let scores = tape.scale(scores, inv_sqrt_dk)?;
        let masked = tape.add(scores, mask_bias)?;
        let probs = tape.softmax(masked)?;
        head_outputs.push(tape.matmul(probs, v_h)?);
    }
    let ctx = tape.concat(&head_outputs, 1)?;
    let out = tape.matmul(ctx, wo)?;
    Ok(tape.bias_add(out, bo)?)
}

fn feed_forward<S: Scalar>(
    sess: &mut ForwardSession<'_, S>,
    block: &BlockParams<S>,
    x: TensorRef,
) -> Result<TensorRef> {
    let w1 = sess.lease(&block.w1)?;
    let b1 = sess.lease(&block.b1)?;
    let w2 = sess.lease(&block.w2)?;
    let b2 = sess.lease(&block.b2)?;
    let tape = &mut *sess.tape;
    let hidden = tape.matmul(x, w1)?;
    let hidden = tape.bias_add(hidden, b1)?;
    let act = tape.gelu(hidden)?;
    let out = tape.matmul(act, w2)?;
    Ok(tape.bias_add(out, b2)?)
}

/// One post-layer-norm transformer block:
///
/// ```text
/// a     = LN1(h_in + Adapter1(Dropout(MHA(h_in, mask))))
/// h_out = LN2(a    + Adapter2(Dropout(FFN(a))))
/// ```
///
/// Adapters are skipped when absent. Returns `(h_out, z)` where `z` is the
/// CLS row of `h_out`.
pub fn block_forward<S: Scalar>(
    sess: &mut ForwardSession<'_, S>,
    block: &BlockParams<S>,
    h_in: TensorRef,
    mask_bias: TensorRef,
    config: &ModelConfig,
) -> Result<(TensorRef, TensorRef)> {
    let mha = multi_head_attention(sess, block, h_in, mask_bias, config)?;
    let mha = sess.dropout(mha, config.dropout_hidden)?;
    let mha = match &block.adapter_after_mha {
        Some(adapter) => adapter_forward(sess, adapter, mha)?,
        None => mha,
    };
    let ln1_gain = sess.lease(&block.ln1_gain)?;
    let ln1_shift = sess.lease(&block.ln1_shift)?;
    let residual = sess.tape.add(h_in, mha)?;
    let a = sess.tape.layer_norm(residual, ln1_gain, ln1_shift)?;

    let ffn = feed_forward(sess, block, a)?;
    let ffn = sess.dropout(ffn, config.dropout_hidden)?;
    let ffn = match &block.adapter_after_ffn {
        Some(adapter) => adapter_forward(sess, adapter, ffn)?,
        None => ffn,
    };
    let ln2_gain = sess.lease(&block.ln2_gain)?;
    let ln2_shift = sess.lease(&block.ln2_shift)?;
    let residual = sess.tape.add(a, ffn)?;
    let h_out = sess.tape.layer_norm(residual, ln2_gain, ln2_shift)?;

    let z = sess.tape.slice(h_out, 0, 0, 1)?;
    Ok((h_out, z))
}

/// Embed, run every block, and collect the per-layer CLS vectors.
pub fn encode_sequence<S: Scalar>(
    sess: &mut ForwardSession<'_, S>,
    model: &Model<S>,
    ids: &[usize],
    mask: &[u8],
) -> Result<LayerOutputs> {
    let config = &model.config;
    if ids.len() != mask.len() {
        return Err(EncoderError::MaskMismatch(ids.len(), mask.len()));
    }
    if ids.is_empty() || ids.len() > config.max_positions {
        return Err(EncoderError::SequenceTooLong(ids.len(), config.max_positions));
    }
    if mask[0] == 0 {
        return Err(EncoderError::MaskedCls);
    }
    let seq = ids.len();

    let token_table = sess.lease(&model.token_embeddings)?;
    let position_table = sess.lease(&model.position_embeddings)?;
    let tokens = sess.tape.embedding_lookup(token_table, ids)?;
    let positions: Vec<usize> = (0..seq).collect();
    let position_vecs = sess.tape.embedding_lookup(position_table, &positions)?;
    let embedded = sess.tape.add(tokens, position_vecs)?;
    let embedded = sess.dropout(embedded, config.dropout_hidden)?;

    // Additive key-mask bias, identical for every query row.
    let mut bias = Vec::with_capacity(seq * seq);
    for _ in 0..seq {
        for &m in mask {
            bias.push(if m != 0 {
                S::zero()
            } else {
                S::from_f64(MASKED_LOGIT)
            });
        }
    }
    let mask_bias = sess.tape.input(bias, &[seq, seq])?;

    let mut h = embedded;
    let mut z = Vec::with_capacity(config.num_layers);
    for block in &model.blocks {
        let (h_out, z_n) = block_forward(sess, block, h, mask_bias, config)?;
        h = h_out;
        z.push(z_n);
    }
    Ok(LayerOutputs { z, h_last: h })
}

impl<S: Scalar> Model<S> {
    /// Full forward for one example: encode, pool (vertical attention when
    /// enabled, else the last CLS vector), classify.
    pub fn forward_example(
        &self,
        sess: &mut ForwardSession<'_, S>,
        ids: &[usize],
        mask: &[u8],
    ) -> Result<ForwardOutput> {
        let layers = encode_sequence(sess, self, ids, mask)?;
        let (pooled, alpha) = match &self.vatt {
            Some(vatt) => {
                let (pooled, alpha) = crate::heads::vertical_attention(sess, vatt, &layers.z)?;
                (pooled, Some(alpha))
            }
            None => (*layers.z.last().expect("at least one block"), None),
        };
        let logits =
            crate::heads::classify(sess, &self.classifier, pooled, self.config.dropout_cls)?;
        Ok(ForwardOutput { logits, alpha })
    }
}

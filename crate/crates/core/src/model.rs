//! The unified encoder-decoder.
//!
//! Frames pass one at a time through a shared visual backbone (a three-block
//! conv stem or linear patch projection) and a Transformer encoder; a small
//! set of learned slot queries then cross-attends to the patch tokens,
//! condensing each frame into S slot vectors. Slots from all frames are
//! concatenated in temporal order, given learned temporal positions, and
//! serve as the memory of a prompt-conditioned autoregressive decoder that
//! emits task answers as token sequences.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use rand::Rng;

use crate::autograd::{Padding, Tape, ValueId};
use crate::rng::stream;
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    ConvStem,
    LinearPatch,
}

impl Backbone {
    pub fn parse(s: &str) -> Option<Backbone> {
        match s {
            "conv-stem" => Some(Backbone::ConvStem),
            "linear-patch" => Some(Backbone::LinearPatch),
            _ => None,
        }
    }
}

/// How slots read the encoder: Perceiver-style learned queries that
/// cross-attend to patch tokens, or extra tokens appended to the encoder's
/// own self-attention sequence (first-k-tokens reading).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlotMode {
    Query,
    Appended,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub image: usize,
    /// Linear-patch size.
    pub patch: usize,
    /// Conv-stem channel widths; the last must equal `dim`.
    pub stem_channels: [usize; 3],
    pub stem_strides: [usize; 3],
    pub dim: usize,
    pub enc_depth: usize,
    pub heads: usize,
    pub slots: usize,
    pub readout_depth: usize,
    pub slot_mode: SlotMode,
    pub dec_depth: usize,
    /// Temporal position table size (max frames per sample).
    pub max_frames: usize,
    /// Longest target sequence (without the prompt).
    pub max_target_len: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::ConvStem,
            image: 32,
            patch: 4,
            stem_channels: [32, 64, 128],
            stem_strides: [2, 2, 1],
            dim: 128,
            enc_depth: 4,
            heads: 4,
            slots: 1,
            readout_depth: 1,
            slot_mode: SlotMode::Query,
            dec_depth: 4,
            max_frames: 8,
            max_target_len: 31,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |msg: String| TensorError::Invalid { op: "model_config", msg };
        if self.dim % self.heads != 0 {
            return Err(bad(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        match self.backbone {
            Backbone::ConvStem => {
                if self.stem_channels[2] != self.dim {
                    return Err(bad("last stem channel width must equal dim".into()));
                }
                let down: usize = self.stem_strides.iter().product();
                if self.image % down != 0 {
                    return Err(bad(format!("image {} not divisible by stem downsampling {down}", self.image)));
                }
            }
            Backbone::LinearPatch => {
                if self.image % self.patch != 0 {
                    return Err(bad(format!("image {} not divisible by patch {}", self.image, self.patch)));
                }
            }
        }
        if self.slots == 0 {
            return Err(bad("need at least one slot".into()));
        }
        Ok(())
    }

    /// Patch tokens per frame.
    pub fn num_patches(&self) -> usize {
        match self.backbone {
            Backbone::ConvStem => {
                let down: usize = self.stem_strides.iter().product();
                (self.image / down) * (self.image / down)
            }
            Backbone::LinearPatch => (self.image / self.patch) * (self.image / self.patch),
        }
    }

    /// Longest decoder input: prompt plus shifted target.
    pub fn max_decoder_len(&self) -> usize {
        1 + self.max_target_len
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// He-normal for conv kernels.
    Conv { fan_in: usize },
    /// Xavier-uniform for projection matrices.
    Linear { fan_in: usize, fan_out: usize },
    /// Embeddings, positions, slot queries.
    Normal002,
    Ones,
    Zeros,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn attn_specs(prefix: &str, dim: usize, out: &mut Vec<ParamSpec>) {
    for part in ["wq", "wk", "wv", "wo"] {
        out.push(ParamSpec {
            name: format!("{prefix}.{part}"),
            shape: vec![dim, dim],
            init: Init::Linear { fan_in: dim, fan_out: dim },
        });
        out.push(ParamSpec {
            name: format!("{prefix}.{}", part.replace('w', "b")),
            shape: vec![dim],
            init: Init::Zeros,
        });
    }
}

fn ln_specs(prefix: &str, dim: usize, out: &mut Vec<ParamSpec>) {
    out.push(ParamSpec { name: format!("{prefix}.gain"), shape: vec![dim], init: Init::Ones });
    out.push(ParamSpec { name: format!("{prefix}.bias"), shape: vec![dim], init: Init::Zeros });
}

fn mlp_specs(prefix: &str, dim: usize, out: &mut Vec<ParamSpec>) {
    let hidden = 4 * dim;
    out.push(ParamSpec {
        name: format!("{prefix}.w1"),
        shape: vec![dim, hidden],
        init: Init::Linear { fan_in: dim, fan_out: hidden },
    });
    out.push(ParamSpec { name: format!("{prefix}.b1"), shape: vec![hidden], init: Init::Zeros });
    out.push(ParamSpec {
        name: format!("{prefix}.w2"),
        shape: vec![hidden, dim],
        init: Init::Linear { fan_in: hidden, fan_out: dim },
    });
    out.push(ParamSpec { name: format!("{prefix}.b2"), shape: vec![dim], init: Init::Zeros });
}

fn param_specs(cfg: &ModelConfig, vocab_size: usize) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    let d = cfg.dim;
    match cfg.backbone {
        Backbone::ConvStem => {
            let mut cin = 3;
            for (i, &cout) in cfg.stem_channels.iter().enumerate() {
                s.push(ParamSpec {
                    name: format!("enc.stem.{i}.kernel"),
                    shape: vec![cout, cin, 3, 3],
                    init: Init::Conv { fan_in: cin * 9 },
                });
                ln_specs(&format!("enc.stem.{i}.ln"), cout, &mut s);
                cin = cout;
            }
        }
        Backbone::LinearPatch => {
            let pdim = 3 * cfg.patch * cfg.patch;
            s.push(ParamSpec {
                name: "enc.patch.w".into(),
                shape: vec![pdim, d],
                init: Init::Linear { fan_in: pdim, fan_out: d },
            });
            s.push(ParamSpec { name: "enc.patch.b".into(), shape: vec![d], init: Init::Zeros });
        }
    }
    s.push(ParamSpec { name: "enc.pos".into(), shape: vec![cfg.num_patches(), d], init: Init::Normal002 });
    if cfg.slot_mode == SlotMode::Appended {
        s.push(ParamSpec { name: "enc.slot_token".into(), shape: vec![cfg.slots, d], init: Init::Normal002 });
    }
    for i in 0..cfg.enc_depth {
        let p = format!("enc.block.{i}");
        ln_specs(&format!("{p}.ln1"), d, &mut s);
        attn_specs(&format!("{p}.attn"), d, &mut s);
        ln_specs(&format!("{p}.ln2"), d, &mut s);
        mlp_specs(&format!("{p}.mlp"), d, &mut s);
    }
    if cfg.slot_mode == SlotMode::Query {
        s.push(ParamSpec { name: "enc.readout.query".into(), shape: vec![cfg.slots, d], init: Init::Normal002 });
        for i in 0..cfg.readout_depth {
            let p = format!("enc.readout.{i}");
            ln_specs(&format!("{p}.lnq"), d, &mut s);
            attn_specs(&format!("{p}.attn"), d, &mut s);
            ln_specs(&format!("{p}.ln2"), d, &mut s);
            mlp_specs(&format!("{p}.mlp"), d, &mut s);
        }
    }
    s.push(ParamSpec {
        name: "temporal.pos".into(),
        shape: vec![cfg.max_frames * cfg.slots, d],
        init: Init::Normal002,
    });
    s.push(ParamSpec { name: "dec.embed".into(), shape: vec![vocab_size, d], init: Init::Normal002 });
    s.push(ParamSpec { name: "dec.pos".into(), shape: vec![cfg.max_decoder_len(), d], init: Init::Normal002 });
    ln_specs("dec.ln_mem", d, &mut s);
    for i in 0..cfg.dec_depth {
        let p = format!("dec.block.{i}");
        ln_specs(&format!("{p}.ln1"), d, &mut s);
        attn_specs(&format!("{p}.self_attn"), d, &mut s);
        ln_specs(&format!("{p}.ln_cross"), d, &mut s);
        attn_specs(&format!("{p}.cross_attn"), d, &mut s);
        ln_specs(&format!("{p}.ln2"), d, &mut s);
        mlp_specs(&format!("{p}.mlp"), d, &mut s);
    }
    ln_specs("dec.ln_out", d, &mut s);
    s.push(ParamSpec {
        name: "dec.out.w".into(),
        shape: vec![d, vocab_size],
        init: Init::Linear { fan_in: d, fan_out: vocab_size },
    });
    s.push(ParamSpec { name: "dec.out.b".into(), shape: vec![vocab_size], init: Init::Zeros });
    s
}

/// Closed-form parameter count; asserted against the built model in tests.
pub fn param_count_formula(cfg: &ModelConfig, vocab_size: usize) -> usize {
    param_specs(cfg, vocab_size).iter().map(|p| p.shape.iter().product::<usize>()).sum()
}

fn sample_normal<T: Scalar>(rng: &mut impl Rng, std: f64) -> T {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    T::from_f64((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std)
}

/// Which parameter groups enter the tape as trainable leaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindMode {
    Trainable,
    /// Everything the decoder does not own is inserted as a constant:
    /// `enc.*` and `temporal.*` can never receive gradients.
    FrozenEncoder,
    Frozen,
}

/// Name → tape id for one forward pass.
pub struct Bound {
    ids: HashMap<String, ValueId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> ValueId {
        *self.ids.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }
}

/// Greedy decode result.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub seq: crate::codec::TokenSeq,
    pub hit_max_len: bool,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub vocab_size: usize,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters; every tensor's stream is keyed by its name, so the
    /// same (config, seed) builds the same model regardless of call order.
    pub fn init(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self, TensorError> {
        config.validate()?;
        let specs = param_specs(&config, vocab_size);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in &specs {
            let mut rng = stream(seed, &format!("init:{}", spec.name), 0);
            let n: usize = spec.shape.iter().product();
            let data: Vec<T> = match spec.init {
                Init::Conv { fan_in } => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| sample_normal(&mut rng, std)).collect()
                }
                Init::Linear { fan_in, fan_out } => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect()
                }
                Init::Normal002 => (0..n).map(|_| sample_normal(&mut rng, 0.02)).collect(),
                Init::Ones => vec![T::one(); n],
                Init::Zeros => vec![T::zero(); n],
            };
            names.push(spec.name.clone());
            tensors.push(Tensor::new(spec.shape.clone(), data)?);
        }
        Ok(Self { config, vocab_size, names, tensors })
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<(), TensorError> {
        let i = self.names.iter().position(|n| n == name).ok_or_else(|| TensorError::Invalid {
            op: "model_set",
            msg: format!("unknown parameter {name}"),
        })?;
        if self.tensors[i].shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "model_set",
                lhs: self.tensors[i].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.tensors[i] = value;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            vocab_size: self.vocab_size,
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Inserts parameters into the tape. With `FrozenEncoder`, encoder-side
    /// tensors go in as constants, so taping them is structurally impossible.
    pub fn bind(&self, tape: &mut Tape<T>, mode: BindMode) -> Bound {
        let mut ids = HashMap::with_capacity(self.names.len());
        for (name, tensor) in self.names.iter().zip(&self.tensors) {
            let frozen = match mode {
                BindMode::Trainable => false,
                BindMode::Frozen => true,
                BindMode::FrozenEncoder => {
                    name.starts_with("enc.") || name.starts_with("temporal.")
                }
            };
            let id = if frozen {
                tape.constant(tensor.clone())
            } else {
                tape.parameter(tensor.clone())
            };
            ids.insert(name.clone(), id);
        }
        Bound { ids }
    }

    /// Tape ids of trainable params, aligned with `tensors()`, for pulling
    /// gradients after backward.
    pub fn trainable_ids(&self, bound: &Bound) -> Vec<ValueId> {
        self.names.iter().map(|n| bound.id(n)).collect()
    }

    fn ln(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        prefix: &str,
        x: ValueId,
    ) -> Result<ValueId, TensorError> {
        tape.layer_norm(
            x,
            bound.id(&format!("{prefix}.gain")),
            bound.id(&format!("{prefix}.bias")),
            self.config.ln_eps,
        )
    }

    /// Multi-head attention; `mask` (Lq, Lk) marks *blocked* positions.
    fn mha(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        prefix: &str,
        xq: ValueId,
        xkv: ValueId,
        mask: Option<ValueId>,
    ) -> Result<ValueId, TensorError> {
        let d = self.config.dim;
        let h = self.config.heads;
        let dh = d / h;
        let (b, lq) = (tape.shape(xq)[0], tape.shape(xq)[1]);
        let lk = tape.shape(xkv)[1];
        let proj = |tape: &mut Tape<T>, x: ValueId, w: &str, bias: &str| -> Result<ValueId, TensorError> {
            let wx = tape.bmm(x, bound.id(&format!("{prefix}.{w}")))?;
            tape.add(wx, bound.id(&format!("{prefix}.{bias}")))
        };
        let split = |tape: &mut Tape<T>, x: ValueId, l: usize| -> Result<ValueId, TensorError> {
            let r = tape.reshape(x, &[b, l, h, dh])?;
            let p = tape.permute(r, &[0, 2, 1, 3])?;
            tape.reshape(p, &[b * h, l, dh])
        };
        let q = proj(tape, xq, "wq", "bq")?;
        let k = proj(tape, xkv, "wk", "bk")?;
        let v = proj(tape, xkv, "wv", "bv")?;
        let qh = split(tape, q, lq)?;
        let kh = split(tape, k, lk)?;
        let vh = split(tape, v, lk)?;
        let kt = tape.permute(kh, &[0, 2, 1])?;
        let scores = tape.bmm(qh, kt)?;
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let masked = match mask {
            Some(m) => tape.masked_fill(scaled, m, -1e9)?,
            None => scaled,
        };
        let attn = tape.softmax(masked)?;
        let ctx = tape.bmm(attn, vh)?;
        let merged = tape.reshape(ctx, &[b, h, lq, dh])?;
        let back = tape.permute(merged, &[0, 2, 1, 3])?;
        let flat = tape.reshape(back, &[b, lq, d])?;
        proj(tape, flat, "wo", "bo")
    }

    fn mlp(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        prefix: &str,
        x: ValueId,
    ) -> Result<ValueId, TensorError> {
        let h1 = tape.bmm(x, bound.id(&format!("{prefix}.w1")))?;
        let h1b = tape.add(h1, bound.id(&format!("{prefix}.b1")))?;
        let act = tape.gelu(h1b)?;
        let h2 = tape.bmm(act, bound.id(&format!("{prefix}.w2")))?;
        tape.add(h2, bound.id(&format!("{prefix}.b2")))
    }

    /// Pre-LN self-attention block.
    fn encoder_block(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        prefix: &str,
        x: ValueId,
    ) -> Result<ValueId, TensorError> {
        let n1 = self.ln(tape, bound, &format!("{prefix}.ln1"), x)?;
        let a = self.mha(tape, bound, &format!("{prefix}.attn"), n1, n1, None)?;
        let x = tape.add(x, a)?;
        let n2 = self.ln(tape, bound, &format!("{prefix}.ln2"), x)?;
        let m = self.mlp(tape, bound, &format!("{prefix}.mlp"), n2)?;
        tape.add(x, m)
    }

    /// Backbone: images (B*, 3, H, W) → patch tokens (B*, N, D) with learned
    /// 2-D positions added.
    fn patch_tokens(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        images: ValueId,
    ) -> Result<ValueId, TensorError> {
        let cfg = &self.config;
        let bf = tape.shape(images)[0];
        let tokens = match cfg.backbone {
            Backbone::ConvStem => {
                let mut x = images;
                for (i, &stride) in cfg.stem_strides.iter().enumerate() {
                    let kernel = bound.id(&format!("enc.stem.{i}.kernel"));
                    let conv = tape.conv2d(x, kernel, stride, Padding::Same)?;
                    let s = tape.shape(conv).to_vec();
                    // Channel-wise layer norm: (B,C,H,W) → (B,HW,C) rows.
                    let flat = tape.reshape(conv, &[s[0], s[1], s[2] * s[3]])?;
                    let chw = tape.permute(flat, &[0, 2, 1])?;
                    let normed = self.ln(tape, bound, &format!("enc.stem.{i}.ln"), chw)?;
                    let act = tape.relu(normed)?;
                    let back = tape.permute(act, &[0, 2, 1])?;
                    x = tape.reshape(back, &s)?;
                }
                let s = tape.shape(x).to_vec();
                let flat = tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
                tape.permute(flat, &[0, 2, 1])? // (BF, N, D)
            }
            Backbone::LinearPatch => {
                let p = cfg.patch;
                let g = cfg.image / p;
                let r = tape.reshape(images, &[bf, 3, g, p, g, p])?;
                let perm = tape.permute(r, &[0, 2, 4, 1, 3, 5])?;
                let flat = tape.reshape(perm, &[bf, g * g, 3 * p * p])?;
                let proj = tape.bmm(flat, bound.id("enc.patch.w"))?;
                tape.add(proj, bound.id("enc.patch.b"))?
            }
        };
        tape.add(tokens, bound.id("enc.pos"))
    }

    /// Per-frame slot vectors (B*, S, D); frames are independent batch rows.
    pub fn encode_frames(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        images: Tensor<T>,
    ) -> Result<ValueId, TensorError> {
        let cfg = &self.config;
        let s = images.shape().to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != cfg.image || s[3] != cfg.image {
            return Err(TensorError::Invalid {
                op: "encode_frames",
                msg: format!("expected (*, 3, {0}, {0}) images, got {s:?}", cfg.image),
            });
        }
        let bf = s[0];
        let images = tape.constant(images);
        let mut tokens = self.patch_tokens(tape, bound, images)?;
        match cfg.slot_mode {
            SlotMode::Query => {
                for i in 0..cfg.enc_depth {
                    tokens = self.encoder_block(tape, bound, &format!("enc.block.{i}"), tokens)?;
                }
                // Learned queries, tiled over the batch by broadcast-add.
                let zeros = tape.constant(Tensor::zeros(&[bf, cfg.slots, cfg.dim]));
                let mut q = tape.add(zeros, bound.id("enc.readout.query"))?;
                for i in 0..cfg.readout_depth {
                    let p = format!("enc.readout.{i}");
                    let nq = self.ln(tape, bound, &format!("{p}.lnq"), q)?;
                    let a = self.mha(tape, bound, &format!("{p}.attn"), nq, tokens, None)?;
                    q = tape.add(q, a)?;
                    let n2 = self.ln(tape, bound, &format!("{p}.ln2"), q)?;
                    let m = self.mlp(tape, bound, &format!("{p}.mlp"), n2)?;
                    q = tape.add(q, m)?;
                }
                Ok(q)
            }
            SlotMode::Appended => {
                let zeros = tape.constant(Tensor::zeros(&[bf, cfg.slots, cfg.dim]));
                let slot_tokens = tape.add(zeros, bound.id("enc.slot_token"))?;
                let mut x = tape.concat(&[tokens, slot_tokens], 1)?;
                for i in 0..cfg.enc_depth {
                    x = self.encoder_block(tape, bound, &format!("enc.block.{i}"), x)?;
                }
                let n = cfg.num_patches();
                tape.slice(x, &[0, n, 0], &[bf, cfg.slots, cfg.dim])
            }
        }
    }

    /// Video memory: per-frame slots concatenated in temporal order with
    /// learned temporal positions added. Input frames are (B, F, 3, H, W).
    pub fn encode_video(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        frames: Tensor<T>,
    ) -> Result<ValueId, TensorError> {
        let cfg = &self.config;
        let s = frames.shape().to_vec();
        if s.len() != 5 {
            return Err(TensorError::Invalid {
                op: "encode_video",
                msg: format!("expected (B, F, 3, H, W), got {s:?}"),
            });
        }
        let (b, f) = (s[0], s[1]);
        if f == 0 || f > cfg.max_frames {
            return Err(TensorError::Invalid {
                op: "encode_video",
                msg: format!("{f} frames outside 1..={}", cfg.max_frames),
            });
        }
        let flat = frames.reshaped(vec![b * f, s[2], s[3], s[4]])?;
        let slots = self.encode_frames(tape, bound, flat)?;
        let mem = tape.reshape(slots, &[b, f * cfg.slots, cfg.dim])?;
        let pos_all = bound.id("temporal.pos");
        let pos = tape.slice(pos_all, &[0, 0], &[f * cfg.slots, cfg.dim])?;
        tape.add(mem, pos)
    }

    /// Teacher-forced logits (B, L, V) for decoder input ids (prompt followed
    /// by the shifted target). Cross-attends to `memory` at every layer.
    pub fn decode_teacher_forced(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        memory: ValueId,
        input_ids: &[Vec<usize>],
    ) -> Result<ValueId, TensorError> {
        let cfg = &self.config;
        let b = input_ids.len();
        if b == 0 {
            return Err(TensorError::Invalid { op: "decode", msg: "empty batch".into() });
        }
        let l = input_ids[0].len();
        if input_ids.iter().any(|row| row.len() != l) {
            return Err(TensorError::Invalid { op: "decode", msg: "ragged input ids".into() });
        }
        if l == 0 || l > cfg.max_decoder_len() {
            return Err(TensorError::Invalid {
                op: "decode",
                msg: format!("sequence length {l} outside 1..={}", cfg.max_decoder_len()),
            });
        }
        if tape.shape(memory)[0] != b {
            return Err(TensorError::ShapeMismatch {
                op: "decode",
                lhs: tape.shape(memory).to_vec(),
                rhs: vec![b],
            });
        }
        let mem = self.ln(tape, bound, "dec.ln_mem", memory)?;
        let flat_ids: Vec<usize> = input_ids.iter().flatten().copied().collect();
        let emb = tape.embedding(bound.id("dec.embed"), &flat_ids)?;
        let emb = tape.reshape(emb, &[b, l, cfg.dim])?;
        let pos_all = bound.id("dec.pos");
        let pos = tape.slice(pos_all, &[0, 0], &[l, cfg.dim])?;
        let mut x = tape.add(emb, pos)?;
        // 1 above the diagonal blocks attention to the future.
        let mut mask_data = vec![T::zero(); l * l];
        for i in 0..l {
            for j in (i + 1)..l {
                mask_data[i * l + j] = T::one();
            }
        }
        let mask = tape.constant(Tensor::new(vec![l, l], mask_data)?);
        for i in 0..cfg.dec_depth {
            let p = format!("dec.block.{i}");
            let n1 = self.ln(tape, bound, &format!("{p}.ln1"), x)?;
            let sa = self.mha(tape, bound, &format!("{p}.self_attn"), n1, n1, Some(mask))?;
            x = tape.add(x, sa)?;
            let nc = self.ln(tape, bound, &format!("{p}.ln_cross"), x)?;
            let ca = self.mha(tape, bound, &format!("{p}.cross_attn"), nc, mem, None)?;
            x = tape.add(x, ca)?;
            let n2 = self.ln(tape, bound, &format!("{p}.ln2"), x)?;
            let m = self.mlp(tape, bound, &format!("{p}.mlp"), n2)?;
            x = tape.add(x, m)?;
        }
        let out = self.ln(tape, bound, "dec.ln_out", x)?;
        let logits = tape.bmm(out, bound.id("dec.out.w"))?;
        tape.add(logits, bound.id("dec.out.b"))
    }

    /// Greedy argmax decode from `prompt` until EOS or `max_len` emitted
    /// tokens, recording the softmax probability of each emitted token.
    /// `memory` must be a single-sample (1, M, D) value.
    pub fn generate(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        memory: ValueId,
        prompt: &[usize],
        max_len: usize,
    ) -> Result<Generated, TensorError> {
        let mut ids: Vec<usize> = prompt.to_vec();
        let mut emitted = Vec::new();
        let mut probs = Vec::new();
        let mut hit_max_len = true;
        while emitted.len() < max_len {
            if ids.len() >= self.config.max_decoder_len() {
                break;
            }
            let logits = self.decode_teacher_forced(tape, bound, memory, &[ids.clone()])?;
            let v = self.vocab_size;
            let row = &tape.value(logits).data()[(ids.len() - 1) * v..ids.len() * v];
            // Stable softmax over the final position, off-tape.
            let mut max = row[0];
            for &x in row {
                if x > max {
                    max = x;
                }
            }
            let mut denom = T::zero();
            let mut best = 0usize;
            for (i, &x) in row.iter().enumerate() {
                denom += (x - max).exp();
                if x > row[best] {
                    best = i;
                }
            }
            let p = ((row[best] - max).exp() / denom).to_f64();
            emitted.push(best);
            probs.push(p);
            ids.push(best);
            if best == crate::codec::EOS {
                hit_max_len = false;
                break;
            }
        }
        Ok(Generated {
            seq: crate::codec::TokenSeq { ids: emitted, probs: Some(probs) },
            hit_max_len,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            image: 8,
            stem_channels: [4, 8, 16],
            dim: 16,
            enc_depth: 1,
            heads: 2,
            slots: 2,
            readout_depth: 1,
            dec_depth: 1,
            max_frames: 3,
            max_target_len: 7,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn param_count_matches_closed_form() {
        for (backbone, slot_mode) in [
            (Backbone::ConvStem, SlotMode::Query),
            (Backbone::ConvStem, SlotMode::Appended),
            (Backbone::LinearPatch, SlotMode::Query),
        ] {
            let cfg = ModelConfig { backbone, slot_mode, ..tiny_config() };
            let m = Model::<f32>::init(cfg.clone(), 40, 3).unwrap();
            assert_eq!(m.param_count(), param_count_formula(&cfg, 40));
        }
    }

    #[test]
    fn encode_frames_shape_and_determinism() {
        let m = Model::<f32>::init(tiny_config(), 40, 1).unwrap();
        let imgs = Tensor::full(&[2, 3, 8, 8], 0.3);
        let mut t1 = Tape::new();
        let b1 = m.bind(&mut t1, BindMode::Frozen);
        let s1 = m.encode_frames(&mut t1, &b1, imgs.clone()).unwrap();
        assert_eq!(t1.shape(s1), &[2, 2, 16]);
        let mut t2 = Tape::new();
        let b2 = m.bind(&mut t2, BindMode::Frozen);
        let s2 = m.encode_frames(&mut t2, &b2, imgs).unwrap();
        assert_eq!(t1.value(s1), t2.value(s2));
        // Identical frames produce identical slot vectors.
        let d = t1.value(s1).data();
        assert_eq!(d[..32], d[32..64]);
    }

    #[test]
    fn video_memory_length_is_frames_times_slots() {
        let m = Model::<f32>::init(tiny_config(), 40, 1).unwrap();
        let frames = Tensor::full(&[2, 3, 3, 8, 8], 0.1);
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, BindMode::Frozen);
        let mem = m.encode_video(&mut tape, &bound, frames).unwrap();
        assert_eq!(tape.shape(mem), &[2, 6, 16]);
    }

    #[test]
    fn too_many_frames_is_an_error() {
        let m = Model::<f32>::init(tiny_config(), 40, 1).unwrap();
        let frames = Tensor::full(&[1, 4, 3, 8, 8], 0.1);
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, BindMode::Frozen);
        assert!(m.encode_video(&mut tape, &bound, frames).is_err());
    }

    #[test]
    fn frozen_encoder_bind_cannot_receive_gradients() {
        let m = Model::<f32>::init(tiny_config(), 40, 1).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, BindMode::FrozenEncoder);
        assert!(!tape.is_tracked(bound.id("enc.pos")));
        assert!(!tape.is_tracked(bound.id("temporal.pos")));
        assert!(tape.is_tracked(bound.id("dec.embed")));
    }
}

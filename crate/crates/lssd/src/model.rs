//! Small encoder-decoder transformer over a shared multilingual vocabulary.
//!
//! Pre-norm layers, sinusoidal positions, shared source/target embedding,
//! tanh feed-forward. `forward` emits per-token probability distributions
//! (softmax applied), which the loss module consumes directly.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::IdMatrix;
use crate::error::{Error, Result};
use crate::snapshot::Snapshot;
use crate::tensor::{NodeId, Tape, Tensor};
use crate::{BOS_ID, EOS_ID, PAD_ID};

const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub dropout: f32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} not in [0,1)", self.dropout)));
        }
        if self.vocab_size <= EOS_ID as usize {
            return Err(Error::InvalidConfig("vocab_size must cover reserved tokens".into()));
        }
        Ok(())
    }
}

enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Zero,
    One,
}

fn param_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (v, e, h) = (c.vocab_size, c.embed_dim, c.hidden_dim);
    let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| specs.push((name, shape, init));

    push("embed.weight".into(), vec![v, e], Init::Xavier { fan_in: v, fan_out: e });

    let attn = |prefix: String, specs: &mut Vec<(String, Vec<usize>, Init)>| {
        for w in ["wq", "wk", "wv", "wo"] {
            specs.push((
                format!("{prefix}.{w}"),
                vec![e, e],
                Init::Xavier { fan_in: e, fan_out: e },
            ));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            specs.push((format!("{prefix}.{b}"), vec![e], Init::Zero));
        }
    };
    let ln = |prefix: String, specs: &mut Vec<(String, Vec<usize>, Init)>| {
        specs.push((format!("{prefix}.scale"), vec![e], Init::One));
        specs.push((format!("{prefix}.bias"), vec![e], Init::Zero));
    };
    let ffn = |prefix: String, specs: &mut Vec<(String, Vec<usize>, Init)>| {
        specs.push((format!("{prefix}.w1"), vec![e, h], Init::Xavier { fan_in: e, fan_out: h }));
        specs.push((format!("{prefix}.b1"), vec![h], Init::Zero));
        specs.push((format!("{prefix}.w2"), vec![h, e], Init::Xavier { fan_in: h, fan_out: e }));
        specs.push((format!("{prefix}.b2"), vec![e], Init::Zero));
    };

    for i in 0..c.num_layers {
        let mut s = Vec::new();
        ln(format!("enc.{i}.ln1"), &mut s);
        attn(format!("enc.{i}.attn"), &mut s);
        ln(format!("enc.{i}.ln2"), &mut s);
        ffn(format!("enc.{i}.ffn"), &mut s);
        for item in s {
            push(item.0, item.1, item.2);
        }
    }
    {
        let mut s = Vec::new();
        ln("enc.norm".into(), &mut s);
        for item in s {
            push(item.0, item.1, item.2);
        }
    }
    for i in 0..c.num_layers {
        let mut s = Vec::new();
        ln(format!("dec.{i}.ln1"), &mut s);
        attn(format!("dec.{i}.self_attn"), &mut s);
        ln(format!("dec.{i}.ln2"), &mut s);
        attn(format!("dec.{i}.cross_attn"), &mut s);
        ln(format!("dec.{i}.ln3"), &mut s);
        ffn(format!("dec.{i}.ffn"), &mut s);
        for item in s {
            push(item.0, item.1, item.2);
        }
    }
    {
        let mut s = Vec::new();
        ln("dec.norm".into(), &mut s);
        for item in s {
            push(item.0, item.1, item.2);
        }
    }
    push("out.weight".into(), vec![e, v], Init::Xavier { fan_in: e, fan_out: v });
    push("out.bias".into(), vec![v], Init::Zero);
    specs
}

#[derive(Debug, Clone)]
pub struct Seq2SeqModel {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
}

/// Tape leaves for every parameter of one forward pass.
pub struct BoundParams {
    ids: BTreeMap<String, NodeId>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> NodeId {
        self.ids[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }
}

/// Parameters drawn uniform(-a, a) with a = sqrt(6/(fan_in+fan_out));
/// biases and layer-norm offsets zero, layer-norm scales one. Fully
/// determined by `seed`.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Seq2SeqModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for (name, shape, init) in param_specs(config) {
        let numel: usize = shape.iter().product();
        let values: Vec<f32> = match init {
            Init::Xavier { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                (0..numel).map(|_| rng.gen_range(-a..a)).collect()
            }
            Init::Zero => vec![0.0; numel],
            Init::One => vec![1.0; numel],
        };
        let mut t = Tensor::new(shape, values)?;
        t.requires_grad = true;
        params.insert(name, t);
    }
    Ok(Seq2SeqModel { config: config.clone(), params })
}

/// Deep value copy; later model updates do not affect the snapshot.
pub fn snapshot(model: &Seq2SeqModel, epoch: u32, dev_loss: f64) -> Result<Snapshot> {
    let mut params = BTreeMap::new();
    for (name, t) in &model.params {
        t.assert_finite(&format!("parameter {name}"))?;
        params.insert(
            name.clone(),
            Tensor {
                shape: t.shape.clone(),
                values: t.values.clone(),
                requires_grad: false,
                grad: None,
            },
        );
    }
    Ok(Snapshot { params, epoch, dev_loss })
}

/// Loads snapshot values into the model in place.
pub fn restore(model: &mut Seq2SeqModel, snap: &Snapshot) -> Result<()> {
    for (name, t) in &mut model.params {
        let s = snap.params.get(name).ok_or_else(|| Error::ParamError {
            name: name.clone(),
            reason: "missing from snapshot".into(),
        })?;
        if s.shape != t.shape {
            return Err(Error::ParamError {
                name: name.clone(),
                reason: format!("shape mismatch: model {:?} vs snapshot {:?}", t.shape, s.shape),
            });
        }
        t.values.copy_from_slice(&s.values);
    }
    Ok(())
}

/// Builds a model directly from a snapshot plus an architecture config.
pub fn from_snapshot(config: &ModelConfig, snap: &Snapshot) -> Result<Seq2SeqModel> {
    let mut model = init_model(config, 0)?;
    restore(&mut model, snap)?;
    Ok(model)
}

fn sinusoidal_positions(max_len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; max_len * dim];
    for pos in 0..max_len {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            out[pos * dim + 2 * i] = (pos as f64 * freq).sin();
            out[pos * dim + 2 * i + 1] = (pos as f64 * freq).cos();
        }
    }
    out
}

impl Seq2SeqModel {
    /// Registers every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        let mut ids = BTreeMap::new();
        for (name, t) in &self.params {
            ids.insert(name.clone(), tape.leaf(t)?);
        }
        Ok(BoundParams { ids })
    }

    /// Accumulates tape gradients of a bound pass back into parameter grads.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundParams) {
        for (name, &id) in bound.iter() {
            let g = tape.grad(id);
            if g.is_empty() {
                continue;
            }
            self.params.get_mut(name).unwrap().accumulate_grad(g);
        }
    }

    pub fn clear_grads(&mut self) {
        for t in self.params.values_mut() {
            t.clear_grad();
        }
    }

    fn validate_tokens(&self, m: &IdMatrix) -> Result<()> {
        if m.cols > self.config.max_seq_len {
            return Err(Error::SequenceTooLong { len: m.cols, max: self.config.max_seq_len });
        }
        for &id in &m.data {
            if id as usize >= self.config.vocab_size {
                return Err(Error::TokenOutOfRange { id, vocab: self.config.vocab_size });
            }
        }
        Ok(())
    }

    /// Forward pass producing per-token distributions [B, T, |V|].
    ///
    /// `tgt` holds the target tokens (with end marker); the decoder input is
    /// built internally as the target shifted right behind a begin marker.
    /// Causal masking keeps position i's distribution independent of target
    /// tokens at positions >= i.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        src: &IdMatrix,
        tgt: &IdMatrix,
        train_mode: bool,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        self.validate_tokens(src)?;
        self.validate_tokens(tgt)?;
        let tgt_in = shift_right(tgt);
        let (b, s, t) = (src.rows, src.cols, tgt_in.cols);
        let e = self.config.embed_dim;

        let pos = sinusoidal_positions(self.config.max_seq_len, e);

        // Token + positional embeddings, scaled by sqrt(E).
        let embed = bound.get("embed.weight");
        let scale = (e as f64).sqrt();
        let embed_seq = |tape: &mut Tape, m: &IdMatrix| -> Result<NodeId> {
            let g = tape.gather(embed, &m.data, vec![m.rows, m.cols])?;
            let g = tape.scale(g, scale)?;
            let p = tape.constant(vec![m.cols, e], pos[..m.cols * e].to_vec())?;
            tape.add(g, p)
        };

        let enc_pad_mask = src_key_mask(tape, src)?; // [B,1,1,S]
        let dec_mask = causal_pad_mask(tape, &tgt_in)?; // [B,1,T,T]

        let p = self.config.dropout;
        let mut x = embed_seq(tape, src)?;
        x = dropout(tape, x, p, train_mode, &mut dropout_rng)?;
        for i in 0..self.config.num_layers {
            x = self.encoder_layer(tape, bound, i, x, enc_pad_mask, b, s, train_mode, &mut dropout_rng)?;
        }
        let enc_out = self.layer_norm(tape, bound, "enc.norm", x)?;

        let mut y = embed_seq(tape, &tgt_in)?;
        y = dropout(tape, y, p, train_mode, &mut dropout_rng)?;
        for i in 0..self.config.num_layers {
            y = self.decoder_layer(
                tape, bound, i, y, enc_out, dec_mask, enc_pad_mask, b, t, s, train_mode,
                &mut dropout_rng,
            )?;
        }
        let y = self.layer_norm(tape, bound, "dec.norm", y)?;

        let logits = {
            let w = bound.get("out.weight");
            let bset = bound.get("out.bias");
            let z = tape.matmul(y, w)?;
            tape.add(z, bset)?
        };
        tape.softmax(logits)
    }

    /// Eval-mode forward returning the distributions as a plain tensor.
    pub fn forward(&self, src: &IdMatrix, tgt: &IdMatrix, train_mode: bool) -> Result<Tensor> {
        let mut tape = Tape::new();
        // Value-only pass: no gradient bookkeeping.
        let mut frozen = self.clone();
        for t in frozen.params.values_mut() {
            t.requires_grad = false;
        }
        let bound = frozen.bind(&mut tape)?;
        let out = frozen.forward_on_tape(&mut tape, &bound, src, tgt, train_mode, None)?;
        Ok(tape.to_tensor(out))
    }

    #[allow(clippy::too_many_arguments)]
    fn encoder_layer(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        i: usize,
        x: NodeId,
        mask: NodeId,
        b: usize,
        s: usize,
        train_mode: bool,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let p = self.config.dropout;
        let n1 = self.layer_norm(tape, bound, &format!("enc.{i}.ln1"), x)?;
        let a = self.attention(tape, bound, &format!("enc.{i}.attn"), n1, n1, mask, b, s, s)?;
        let a = dropout(tape, a, p, train_mode, rng)?;
        let x = tape.add(x, a)?;
        let n2 = self.layer_norm(tape, bound, &format!("enc.{i}.ln2"), x)?;
        let f = self.ffn(tape, bound, &format!("enc.{i}.ffn"), n2)?;
        let f = dropout(tape, f, p, train_mode, rng)?;
        tape.add(x, f)
    }

    #[allow(clippy::too_many_arguments)]
    fn decoder_layer(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        i: usize,
        y: NodeId,
        enc_out: NodeId,
        self_mask: NodeId,
        cross_mask: NodeId,
        b: usize,
        t: usize,
        s: usize,
        train_mode: bool,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let p = self.config.dropout;
        let n1 = self.layer_norm(tape, bound, &format!("dec.{i}.ln1"), y)?;
        let a =
            self.attention(tape, bound, &format!("dec.{i}.self_attn"), n1, n1, self_mask, b, t, t)?;
        let a = dropout(tape, a, p, train_mode, rng)?;
        let y = tape.add(y, a)?;
        let n2 = self.layer_norm(tape, bound, &format!("dec.{i}.ln2"), y)?;
        let c = self.attention(
            tape,
            bound,
            &format!("dec.{i}.cross_attn"),
            n2,
            enc_out,
            cross_mask,
            b,
            t,
            s,
        )?;
        let c = dropout(tape, c, p, train_mode, rng)?;
        let y = tape.add(y, c)?;
        let n3 = self.layer_norm(tape, bound, &format!("dec.{i}.ln3"), y)?;
        let f = self.ffn(tape, bound, &format!("dec.{i}.ffn"), n3)?;
        let f = dropout(tape, f, p, train_mode, rng)?;
        tape.add(y, f)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        prefix: &str,
        q_in: NodeId,
        kv_in: NodeId,
        mask: NodeId,
        b: usize,
        sq: usize,
        sk: usize,
    ) -> Result<NodeId> {
        let e = self.config.embed_dim;
        let h = self.config.num_heads;
        let dk = e / h;
        let proj = |tape: &mut Tape, x: NodeId, w: &str, bias: &str, sl: usize| -> Result<NodeId> {
            let z = tape.matmul(x, bound.get(&format!("{prefix}.{w}")))?;
            let z = tape.add(z, bound.get(&format!("{prefix}.{bias}")))?;
            let z = tape.reshape(z, vec![b, sl, h, dk])?;
            tape.swap_axes(z, 1, 2) // [B, h, sl, dk]
        };
        let q = proj(tape, q_in, "wq", "bq", sq)?;
        let k = proj(tape, kv_in, "wk", "bk", sk)?;
        let v = proj(tape, kv_in, "wv", "bv", sk)?;
        let kt = tape.swap_axes(k, 2, 3)?; // [B, h, dk, sk]
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
        let scores = tape.add(scores, mask)?;
        let attn = tape.softmax(scores)?;
        let ctx = tape.matmul(attn, v)?; // [B, h, sq, dk]
        let ctx = tape.swap_axes(ctx, 1, 2)?;
        let ctx = tape.reshape(ctx, vec![b, sq, e])?;
        let out = tape.matmul(ctx, bound.get(&format!("{prefix}.wo")))?;
        tape.add(out, bound.get(&format!("{prefix}.bo")))
    }

    fn layer_norm(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        prefix: &str,
        x: NodeId,
    ) -> Result<NodeId> {
        let mu = tape.mean_last(x)?;
        let xc = tape.sub(x, mu)?;
        let sq = tape.mul(xc, xc)?;
        let var = tape.mean_last(sq)?;
        let var = tape.add_scalar(var, LN_EPS)?;
        let sd = tape.sqrt(var)?;
        let normed = tape.div(xc, sd)?;
        let scaled = tape.mul(normed, bound.get(&format!("{prefix}.scale")))?;
        tape.add(scaled, bound.get(&format!("{prefix}.bias")))
    }

    fn ffn(&self, tape: &mut Tape, bound: &BoundParams, prefix: &str, x: NodeId) -> Result<NodeId> {
        let z = tape.matmul(x, bound.get(&format!("{prefix}.w1")))?;
        let z = tape.add(z, bound.get(&format!("{prefix}.b1")))?;
        let z = tape.tanh(z)?;
        let z = tape.matmul(z, bound.get(&format!("{prefix}.w2")))?;
        tape.add(z, bound.get(&format!("{prefix}.b2")))
    }

    /// Greedy decoding: argmax token per step (ties toward the lowest id),
    /// fed back until the end marker or `max_len`.
    pub fn greedy_decode(&self, src: &[u32], max_len: usize) -> Result<Vec<u32>> {
        let src_m = IdMatrix::new(1, src.len(), src.to_vec());
        let mut out: Vec<u32> = Vec::new();
        while out.len() < max_len {
            // Target = emitted tokens plus a placeholder slot; the decoder
            // input becomes BOS + emitted, and the last position's
            // distribution predicts the next token.
            let mut tgt = out.clone();
            tgt.push(PAD_ID);
            let tgt_m = IdMatrix::new(1, tgt.len(), tgt);
            let dist = self.forward(&src_m, &tgt_m, false)?;
            let v = self.config.vocab_size;
            let row = &dist.values[(tgt_m.cols - 1) * v..tgt_m.cols * v];
            let mut best = 0usize;
            for (i, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = i;
                }
            }
            if best as u32 == EOS_ID {
                break;
            }
            out.push(best as u32);
        }
        Ok(out)
    }
}

/// Decoder input: begin marker followed by the target shifted right.
pub fn shift_right(tgt: &IdMatrix) -> IdMatrix {
    let mut data = vec![PAD_ID; tgt.data.len()];
    for r in 0..tgt.rows {
        data[r * tgt.cols] = BOS_ID;
        for c in 1..tgt.cols {
            data[r * tgt.cols + c] = tgt.get(r, c - 1);
        }
    }
    IdMatrix::new(tgt.rows, tgt.cols, data)
}

/// Additive key-padding mask [B,1,1,S]: -1e9 on pad keys.
fn src_key_mask(tape: &mut Tape, src: &IdMatrix) -> Result<NodeId> {
    let mut m = vec![0.0f64; src.rows * src.cols];
    for (i, &id) in src.data.iter().enumerate() {
        if id == PAD_ID {
            m[i] = MASK_NEG;
        }
    }
    tape.constant(vec![src.rows, 1, 1, src.cols], m)
}

/// Additive causal + key-padding mask [B,1,T,T] over the decoder input.
fn causal_pad_mask(tape: &mut Tape, tgt_in: &IdMatrix) -> Result<NodeId> {
    let t = tgt_in.cols;
    let mut m = vec![0.0f64; tgt_in.rows * t * t];
    for r in 0..tgt_in.rows {
        for i in 0..t {
            for j in 0..t {
                if j > i || (tgt_in.get(r, j) == PAD_ID && j != i) {
                    m[r * t * t + i * t + j] = MASK_NEG;
                }
            }
        }
    }
    tape.constant(vec![tgt_in.rows, 1, t, t], m)
}

fn dropout(
    tape: &mut Tape,
    x: NodeId,
    p: f32,
    train_mode: bool,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    if !train_mode || p <= 0.0 {
        return Ok(x);
    }
    let rng = match rng {
        Some(r) => r,
        None => return Ok(x),
    };
    let n = tape.value(x).len();
    let keep = 1.0 - p as f64;
    let mask: Vec<f64> =
        (0..n).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
    let shape = tape.shape(x).to_vec();
    let m = tape.constant(shape, mask)?;
    tape.mul(x, m)
}

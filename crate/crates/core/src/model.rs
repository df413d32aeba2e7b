//! Pre-norm transformer encoder-decoder with per-position encoder gates, plus
//! the structurally identical selector encoder and the pointer weight.
//!
//! Encoder self-attention and decoder cross-attention weight each key by its
//! gate value (see [`Graph::gated_softmax`]): a key whose gate is 0 gets
//! exactly zero attention, yet the gate still receives a gradient, so a
//! straight-through selection mask can be trained through it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::compute::{ComputeError, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var, MASK_NEG};
use crate::config::{parse_value, ConfigError, KvConfig};
use crate::seed;
use crate::text::{BOS, EOS};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error("source of {len} tokens exceeds max_src_len {max}")]
    SourceTooLong { len: usize, max: usize },
    #[error("gold output is empty")]
    EmptyGold,
    #[error("attention mask has {mask} entries for {len} tokens")]
    MaskLength { mask: usize, len: usize },
    #[error("token id {id} outside vocabulary of {size}")]
    TokenOutOfRange { id: u32, size: usize },
    #[error("invalid model config: {0}")]
    Config(String),
}

type Res<T> = Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d_model: 64, n_layers: 2, n_heads: 2, ffn_dim: 128, max_src_len: 512, max_tgt_len: 64, vocab_size: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Res<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.n_layers == 0 || self.ffn_dim == 0 || self.max_src_len == 0 || self.max_tgt_len == 0 {
            return bad("layer count, ffn_dim and lengths must be positive");
        }
        if self.vocab_size <= crate::text::RESERVED.len() {
            return bad("vocab_size must exceed the reserved tokens");
        }
        Ok(())
    }
}

impl KvConfig for ModelConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        let v = || parse_value::<usize>(key, value);
        match key {
            "d_model" => self.d_model = v()?,
            "n_layers" => self.n_layers = v()?,
            "n_heads" => self.n_heads = v()?,
            "ffn_dim" => self.ffn_dim = v()?,
            "max_src_len" => self.max_src_len = v()?,
            "max_tgt_len" => self.max_tgt_len = v()?,
            "vocab_size" => self.vocab_size = v()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_src_len", self.max_src_len),
            ("max_tgt_len", self.max_tgt_len),
            ("vocab_size", self.vocab_size),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
struct Attention {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Debug, Clone)]
struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    norm1: Norm,
    attn: Attention,
    norm2: Norm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    norm1: Norm,
    self_attn: Attention,
    norm2: Norm,
    cross_attn: Attention,
    norm3: Norm,
    ffn: FeedForward,
}

/// Token embedding + encoder stack.
#[derive(Debug, Clone)]
pub struct Encoder {
    embed: ParamId,
    layers: Vec<EncoderLayer>,
    norm: Norm,
}

#[derive(Debug, Clone)]
struct Decoder {
    layers: Vec<DecoderLayer>,
    norm: Norm,
    lm_head: ParamId,
}

/// Hidden states of an encoded source and the gate each position carried.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    pub hidden: Var,
    pub gate: Var,
    pub len: usize,
}

const LN_EPS: f64 = 1e-5;

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    group: ParamGroup,
}

impl Init<'_> {
    fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Res<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        Ok(self.store.add(name, self.group, Tensor::new(shape.to_vec(), data)?)?)
    }

    fn fill(&mut self, name: &str, shape: &[usize], v: f64) -> Res<ParamId> {
        Ok(self.store.add(name, self.group, Tensor::full(shape, v))?)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Res<ParamId> {
        self.uniform(name, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    }

    fn norm(&mut self, name: &str, d: usize) -> Res<Norm> {
        Ok(Norm { gamma: self.fill(&format!("{name}.gamma"), &[d], 1.0)?, beta: self.fill(&format!("{name}.beta"), &[d], 0.0)? })
    }

    fn attention(&mut self, name: &str, d: usize) -> Res<Attention> {
        Ok(Attention {
            wq: self.linear(&format!("{name}.wq"), d, d)?,
            wk: self.linear(&format!("{name}.wk"), d, d)?,
            wv: self.linear(&format!("{name}.wv"), d, d)?,
            wo: self.linear(&format!("{name}.wo"), d, d)?,
        })
    }

    fn ffn(&mut self, name: &str, d: usize, h: usize) -> Res<FeedForward> {
        Ok(FeedForward {
            w1: self.linear(&format!("{name}.w1"), d, h)?,
            b1: self.fill(&format!("{name}.b1"), &[h], 0.0)?,
            w2: self.linear(&format!("{name}.w2"), h, d)?,
            b2: self.fill(&format!("{name}.b2"), &[d], 0.0)?,
        })
    }

    fn encoder(&mut self, prefix: &str, c: &ModelConfig) -> Res<Encoder> {
        let embed = self.uniform(&format!("{prefix}.embed"), &[c.vocab_size, c.d_model], 1.0)?;
        let layers = (0..c.n_layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                Ok(EncoderLayer {
                    norm1: self.norm(&format!("{p}.norm1"), c.d_model)?,
                    attn: self.attention(&format!("{p}.attn"), c.d_model)?,
                    norm2: self.norm(&format!("{p}.norm2"), c.d_model)?,
                    ffn: self.ffn(&format!("{p}.ffn"), c.d_model, c.ffn_dim)?,
                })
            })
            .collect::<Res<Vec<_>>>()?;
        Ok(Encoder { embed, layers, norm: self.norm(&format!("{prefix}.norm"), c.d_model)? })
    }
}

/// All trainable pieces: seq2seq encoder/decoder, selector encoder and the
/// pointer weight `W: [n_cand, n_cand·d_model]`.
#[derive(Debug, Clone)]
pub struct PickRankModel {
    pub config: ModelConfig,
    pub n_cand: usize,
    encoder: Encoder,
    decoder: Decoder,
    selector_encoder: Encoder,
    pointer: ParamId,
}

impl PickRankModel {
    /// Registers freshly initialized parameters in `store`. The selector
    /// encoder draws from its own seed stream.
    pub fn new(config: ModelConfig, n_cand: usize, store: &mut ParamStore, seed: u64) -> Res<Self> {
        config.validate()?;
        let c = &config;
        let mut init = Init { store, rng: seed::rng(seed, 1), group: ParamGroup::Seq2Seq };
        let encoder = init.encoder("seq2seq.encoder", c)?;
        let layers = (0..c.n_layers)
            .map(|l| {
                let p = format!("seq2seq.decoder.layer{l}");
                Ok(DecoderLayer {
                    norm1: init.norm(&format!("{p}.norm1"), c.d_model)?,
                    self_attn: init.attention(&format!("{p}.self_attn"), c.d_model)?,
                    norm2: init.norm(&format!("{p}.norm2"), c.d_model)?,
                    cross_attn: init.attention(&format!("{p}.cross_attn"), c.d_model)?,
                    norm3: init.norm(&format!("{p}.norm3"), c.d_model)?,
                    ffn: init.ffn(&format!("{p}.ffn"), c.d_model, c.ffn_dim)?,
                })
            })
            .collect::<Res<Vec<_>>>()?;
        let decoder = Decoder {
            layers,
            norm: init.norm("seq2seq.decoder.norm", c.d_model)?,
            lm_head: init.linear("seq2seq.lm_head", c.d_model, c.vocab_size)?,
        };

        let mut init = Init { store: init.store, rng: seed::rng(seed, 2), group: ParamGroup::SelectorEncoder };
        let selector_encoder = init.encoder("selector.encoder", c)?;

        let mut init = Init { store: init.store, rng: seed::rng(seed, 3), group: ParamGroup::SelectorPointer };
        let width = n_cand * c.d_model;
        let pointer = init.uniform("selector.pointer", &[n_cand, width], 1.0 / (width as f64).sqrt())?;

        Ok(Self { config, n_cand, encoder, decoder, selector_encoder, pointer })
    }

    /// Rebuilds the parameter layout over an existing store (e.g. one read
    /// from a checkpoint). Fails if any expected parameter is missing.
    pub fn attach(config: ModelConfig, n_cand: usize, store: &ParamStore) -> Res<Self> {
        let mut fresh = ParamStore::new();
        let model = Self::new(config, n_cand, &mut fresh, 0)?;
        for (_, p) in fresh.iter() {
            let found = store.id(&p.name).map(|id| store.get(id));
            match found {
                Some(q) if q.value.shape() == p.value.shape() && q.group == p.group => {}
                _ => return Err(ModelError::Config(format!("checkpoint lacks parameter {:?} with shape {:?}", p.name, p.value.shape()))),
            }
        }
        // registration order is deterministic, so ids line up when the
        // checkpoint was written by the same layout
        if fresh.iter().any(|(id, p)| store.id(&p.name) != Some(id)) {
            return Err(ModelError::Config("checkpoint parameter order differs from model layout".into()));
        }
        Ok(model)
    }

    pub fn pointer(&self) -> ParamId {
        self.pointer
    }

    fn check_ids(&self, ids: &[u32]) -> Res<()> {
        match ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            Some(&id) => Err(ModelError::TokenOutOfRange { id, size: self.config.vocab_size }),
            None => Ok(()),
        }
    }

    /// Encodes `src` with a per-position gate (values in [0, 1]).
    pub fn encode(&self, g: &mut Graph, src: &[u32], gate: Var) -> Res<EncoderOutput> {
        if src.len() > self.config.max_src_len {
            return Err(ModelError::SourceTooLong { len: src.len(), max: self.config.max_src_len });
        }
        if g.shape(gate) != [src.len()] {
            return Err(ModelError::MaskLength { mask: g.shape(gate).iter().product(), len: src.len() });
        }
        self.check_ids(src)?;
        let hidden = run_encoder(&self.encoder, &self.config, g, src, gate)?;
        Ok(EncoderOutput { hidden, gate, len: src.len() })
    }

    /// Hidden states of the selector encoder over a full definition.
    pub fn selector_encoder_forward(&self, g: &mut Graph, src: &[u32]) -> Res<Var> {
        if src.len() > self.config.max_src_len {
            return Err(ModelError::SourceTooLong { len: src.len(), max: self.config.max_src_len });
        }
        self.check_ids(src)?;
        let ones = g.constant(Tensor::full(&[src.len()], 1.0));
        run_encoder(&self.selector_encoder, &self.config, g, src, ones)
    }

    /// Decoder logits `[T, vocab]` for teacher-forced inputs `tgt_in`.
    pub fn decode_logits(&self, g: &mut Graph, enc: &EncoderOutput, tgt_in: &[u32]) -> Res<Var> {
        self.check_ids(tgt_in)?;
        let c = &self.config;
        let embed = g.param(self.encoder.embed);
        let mut x = g.gather(embed, &idx(tgt_in))?;
        let pos = g.constant(positions(tgt_in.len(), c.d_model));
        x = g.add(x, pos)?;
        for layer in &self.decoder.layers {
            let h = norm(g, &layer.norm1, x)?;
            let a = attention(g, c, &layer.self_attn, h, h, Keys::Causal)?;
            x = g.add(x, a)?;
            let h = norm(g, &layer.norm2, x)?;
            let a = attention(g, c, &layer.cross_attn, h, enc.hidden, Keys::Gated(enc.gate))?;
            x = g.add(x, a)?;
            let h = norm(g, &layer.norm3, x)?;
            let f = feed_forward(g, &layer.ffn, h)?;
            x = g.add(x, f)?;
        }
        let x = norm(g, &self.decoder.norm, x)?;
        let head = g.param(self.decoder.lm_head);
        Ok(g.matmul(x, head)?)
    }

    /// Probability of each gold token under teacher forcing, shape `[|gold|]`.
    pub fn gold_token_probs(&self, g: &mut Graph, enc: &EncoderOutput, gold: &[u32]) -> Res<Var> {
        if gold.is_empty() {
            return Err(ModelError::EmptyGold);
        }
        let mut tgt_in = Vec::with_capacity(gold.len());
        tgt_in.push(BOS);
        tgt_in.extend_from_slice(&gold[..gold.len() - 1]);
        let logits = self.decode_logits(g, enc, &tgt_in)?;
        let probs = g.softmax(logits, 1)?;
        Ok(g.pick(probs, &idx(gold))?)
    }

    /// Mean of the per-token gold probabilities: a differentiable scalar in [0, 1].
    pub fn sequence_prob(&self, g: &mut Graph, enc: &EncoderOutput, gold: &[u32]) -> Res<Var> {
        let p = self.gold_token_probs(g, enc, gold)?;
        Ok(g.mean(p, None)?)
    }

    /// Greedy decoding; ties go to the lowest token id. Stops after EOS or
    /// `max_len` tokens. The returned ids exclude EOS.
    pub fn greedy_decode(&self, store: &ParamStore, src: &[u32], gate: &[f64], max_len: usize) -> Res<Vec<u32>> {
        let mut g = Graph::inference(store);
        let gate = g.constant(Tensor::vector(gate.to_vec()));
        let enc = self.encode(&mut g, src, gate)?;
        let mut out: Vec<u32> = Vec::new();
        let max_len = max_len.min(self.config.max_tgt_len);
        while out.len() < max_len {
            let mut tgt_in = vec![BOS];
            tgt_in.extend_from_slice(&out);
            let logits = self.decode_logits(&mut g, &enc, &tgt_in)?;
            let v = self.config.vocab_size;
            let last = &g.value(logits)[(tgt_in.len() - 1) * v..tgt_in.len() * v];
            let next = argmax_lowest(last) as u32;
            if next == EOS {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn idx(ids: &[u32]) -> Vec<usize> {
    ids.iter().map(|&i| i as usize).collect()
}

/// Sinusoidal position table `[len, d]`.
pub fn positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for p in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = p as f64 * rate;
            data[p * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("sized")
}

enum Keys {
    Gated(Var),
    Causal,
}

fn norm(g: &mut Graph, n: &Norm, x: Var) -> Res<Var> {
    let (gm, bt) = (g.param(n.gamma), g.param(n.beta));
    Ok(g.layer_norm(x, gm, bt, LN_EPS)?)
}

fn feed_forward(g: &mut Graph, f: &FeedForward, x: Var) -> Res<Var> {
    let (w1, b1, w2, b2) = (g.param(f.w1), g.param(f.b1), g.param(f.w2), g.param(f.b2));
    let h = g.matmul(x, w1)?;
    let h = g.add(h, b1)?;
    let h = g.gelu(h);
    let o = g.matmul(h, w2)?;
    Ok(g.add(o, b2)?)
}

fn attention(g: &mut Graph, c: &ModelConfig, p: &Attention, xq: Var, xkv: Var, keys: Keys) -> Res<Var> {
    let (wq, wk, wv, wo) = (g.param(p.wq), g.param(p.wk), g.param(p.wv), g.param(p.wo));
    let q = g.matmul(xq, wq)?;
    let k = g.matmul(xkv, wk)?;
    let v = g.matmul(xkv, wv)?;
    let dh = c.d_model / c.n_heads;
    let (lq, lk) = (g.shape(xq)[0], g.shape(xkv)[0]);
    let causal: Option<Vec<bool>> = match keys {
        Keys::Causal => Some((0..lq * lk).map(|p| p % lk > p / lk).collect()),
        Keys::Gated(_) => None,
    };
    let mut heads = Vec::with_capacity(c.n_heads);
    for h in 0..c.n_heads {
        let qh = g.narrow(q, 1, h * dh, dh)?;
        let kh = g.narrow(k, 1, h * dh, dh)?;
        let vh = g.narrow(v, 1, h * dh, dh)?;
        let s = g.matmul_t(qh, kh)?;
        let s = g.scale(s, 1.0 / (dh as f64).sqrt());
        let w = match (&keys, &causal) {
            (Keys::Gated(gate), _) => g.gated_softmax(s, *gate)?,
            (Keys::Causal, Some(mask)) => {
                let s = g.masked_fill(s, mask, MASK_NEG)?;
                g.softmax(s, 1)?
            }
            (Keys::Causal, None) => unreachable!(),
        };
        heads.push(g.matmul(w, vh)?);
    }
    let o = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
    Ok(g.matmul(o, wo)?)
}

fn run_encoder(enc: &Encoder, c: &ModelConfig, g: &mut Graph, src: &[u32], gate: Var) -> Res<Var> {
    let embed = g.param(enc.embed);
    let mut x = g.gather(embed, &idx(src))?;
    let pos = g.constant(positions(src.len(), c.d_model));
    x = g.add(x, pos)?;
    for layer in &enc.layers {
        let h = norm(g, &layer.norm1, x)?;
        let a = attention(g, c, &layer.attn, h, h, Keys::Gated(gate))?;
        x = g.add(x, a)?;
        let h = norm(g, &layer.norm2, x)?;
        let f = feed_forward(g, &layer.ffn, h)?;
        x = g.add(x, f)?;
    }
    norm(g, &enc.norm, x)
}

/// Zeroes the final decoder norm so every logit is 0 (a uniform model).
#[cfg(test)]
pub(crate) fn flatten_output(s: &mut ParamStore) {
    for name in ["seq2seq.decoder.norm.gamma", "seq2seq.decoder.norm.beta"] {
        let id = s.id(name).unwrap();
        s.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Toy configuration used by tests and gradient checks.
pub fn tiny_config(vocab_size: usize) -> ModelConfig {
    ModelConfig { d_model: 8, n_layers: 1, n_heads: 2, ffn_dim: 16, max_src_len: 128, max_tgt_len: 8, vocab_size }
}

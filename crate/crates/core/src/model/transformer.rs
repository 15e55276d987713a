use log::warn;

use super::config::{ModelConfig, Residual};
use super::params::{ParamVars, ParameterSet};
use crate::attention::{attention, AttentionMask, AttentionScale};
use crate::corpus::special::{PAD, START};
use crate::error::{Error, Result};
use crate::tensor::{Real, SeededRng, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Sinusoidal table: `PE(pos, 2i) = sin(pos / 10000^(2i/d))`,
/// `PE(pos, 2i+1) = cos(pos / 10000^(2i/d))`.
pub fn positional_encoding<T: Real>(max_len: usize, d_model: usize) -> Result<Tensor<T>> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::Config(format!("positional encoding needs an even width, got {d_model}")));
    }
    if max_len == 0 {
        return Err(Error::Config("positional encoding needs at least one position".into()));
    }
    let mut data = Vec::with_capacity(max_len * d_model);
    for pos in 0..max_len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data.push(T::lit(angle.sin()));
            data.push(T::lit(angle.cos()));
        }
    }
    Tensor::new(&[max_len, d_model], data)
}

#[derive(Clone, Debug)]
struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    g: Option<usize>,
}

#[derive(Clone, Debug)]
struct LnIdx {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Debug)]
struct FfnIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct EncoderIdx {
    attn: AttnIdx,
    ln1: LnIdx,
    ffn: FfnIdx,
    ln2: LnIdx,
}

#[derive(Clone, Debug)]
struct DecoderIdx {
    self_attn: AttnIdx,
    ln1: LnIdx,
    cross: AttnIdx,
    ln2: LnIdx,
    ffn: FfnIdx,
    ln3: LnIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: usize,
    encoder: Vec<EncoderIdx>,
    decoder: Vec<DecoderIdx>,
    encoder_final: Option<LnIdx>,
    decoder_final: Option<LnIdx>,
    out_w: usize,
    out_b: usize,
}

/// Either freshly initialises parameters or checks that an existing set has
/// exactly the expected names and shapes, in order.
enum Source<'a, T: Real> {
    Init { params: ParameterSet<T>, rng: &'a mut SeededRng },
    Check { params: &'a ParameterSet<T>, next: usize },
}

#[derive(Clone, Copy)]
enum Init {
    Xavier,
    Normal(f64),
    Zeros,
    Ones,
    Fill(f64),
}

impl<T: Real> Source<'_, T> {
    fn take(&mut self, name: String, shape: &[usize], init: Init) -> Result<usize> {
        match self {
            Source::Init { params, rng } => {
                let n: usize = shape.iter().product();
                let data: Vec<T> = match init {
                    Init::Xavier => {
                        let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                        (0..n).map(|_| T::lit(rng.uniform_range(-bound, bound))).collect()
                    }
                    Init::Normal(std) => (0..n).map(|_| T::lit(rng.normal() * std)).collect(),
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::Fill(v) => vec![T::lit(v); n],
                };
                params.insert(name, Tensor::new(shape, data)?)
            }
            Source::Check { params, next } => {
                let i = *next;
                if i >= params.len() || params.name(i) != name || params.tensor(i).shape() != shape {
                    let found =
                        (i < params.len()).then(|| (params.name(i).to_owned(), params.tensor(i).shape().to_vec()));
                    return Err(Error::Checkpoint(format!(
                        "parameter {i}: expected `{name}` {shape:?}, found {found:?}"
                    )));
                }
                *next += 1;
                Ok(i)
            }
        }
    }

    fn attn(&mut self, prefix: &str, c: &ModelConfig) -> Result<AttnIdx> {
        let d = c.d_model;
        let lin = |s: &mut Self, w: &str| -> Result<(usize, usize)> {
            Ok((
                s.take(format!("{prefix}.w{w}"), &[d, d], Init::Xavier)?,
                s.take(format!("{prefix}.b{w}"), &[d], Init::Zeros)?,
            ))
        };
        let (wq, bq) = lin(self, "q")?;
        let (wk, bk) = lin(self, "k")?;
        let (wv, bv) = lin(self, "v")?;
        let (wo, bo) = lin(self, "o")?;
        let g = match c.scales_per_block() {
            0 => None,
            n => {
                let init = AttentionScale::<f64>::new(c.scale_sharing, c.n_heads, c.head_dim()).g.data()[0];
                Some(self.take(format!("{prefix}.g"), &[n], Init::Fill(init))?)
            }
        };
        Ok(AttnIdx { wq, bq, wk, bk, wv, bv, wo, bo, g })
    }

    fn ln(&mut self, prefix: &str, c: &ModelConfig) -> Result<LnIdx> {
        Ok(LnIdx {
            gamma: self.take(format!("{prefix}.gamma"), &[c.d_model], Init::Ones)?,
            beta: self.take(format!("{prefix}.beta"), &[c.d_model], Init::Zeros)?,
        })
    }

    fn ffn(&mut self, prefix: &str, c: &ModelConfig) -> Result<FfnIdx> {
        Ok(FfnIdx {
            w1: self.take(format!("{prefix}.w1"), &[c.d_model, c.hidden_size], Init::Xavier)?,
            b1: self.take(format!("{prefix}.b1"), &[c.hidden_size], Init::Zeros)?,
            w2: self.take(format!("{prefix}.w2"), &[c.hidden_size, c.d_model], Init::Xavier)?,
            b2: self.take(format!("{prefix}.b2"), &[c.d_model], Init::Zeros)?,
        })
    }

    fn layout(&mut self, c: &ModelConfig) -> Result<Layout> {
        let embed =
            self.take("embed.tokens".into(), &[c.vocab_size, c.d_model], Init::Normal((c.d_model as f64).powf(-0.5)))?;
        let mut encoder = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let p = format!("encoder.{l}");
            encoder.push(EncoderIdx {
                attn: self.attn(&format!("{p}.self_attn"), c)?,
                ln1: self.ln(&format!("{p}.ln1"), c)?,
                ffn: self.ffn(&format!("{p}.ffn"), c)?,
                ln2: self.ln(&format!("{p}.ln2"), c)?,
            });
        }
        let encoder_final = if c.residual == Residual::Pre { Some(self.ln("encoder.final_ln", c)?) } else { None };
        let mut decoder = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let p = format!("decoder.{l}");
            decoder.push(DecoderIdx {
                self_attn: self.attn(&format!("{p}.self_attn"), c)?,
                ln1: self.ln(&format!("{p}.ln1"), c)?,
                cross: self.attn(&format!("{p}.cross_attn"), c)?,
                ln2: self.ln(&format!("{p}.ln2"), c)?,
                ffn: self.ffn(&format!("{p}.ffn"), c)?,
                ln3: self.ln(&format!("{p}.ln3"), c)?,
            });
        }
        let decoder_final = if c.residual == Residual::Pre { Some(self.ln("decoder.final_ln", c)?) } else { None };
        let out_w = self.take("output.w".into(), &[c.d_model, c.vocab_size], Init::Xavier)?;
        let out_b = self.take("output.b".into(), &[c.vocab_size], Init::Zeros)?;
        Ok(Layout { embed, encoder, decoder, encoder_final, decoder_final, out_w, out_b })
    }
}

/// Final encoder states of one source sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderMemory<T: Real = f32> {
    /// `[src_len, d_model]`
    pub states: Tensor<T>,
    pub valid: Vec<bool>,
}

impl<T: Real> EncoderMemory<T> {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }
}

/// Teacher-forced training batch. Targets include the start and end tokens.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub sources: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

/// Which attention block a recorded weight matrix came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionSite {
    EncoderSelf,
    DecoderSelf,
    DecoderCross,
}

#[derive(Clone, Debug)]
pub struct AttentionMap<T: Real = f32> {
    pub site: AttentionSite,
    pub layer: usize,
    /// `[heads, q_len, k_len]`
    pub weights: Tensor<T>,
}

struct Ctx<'a> {
    rng: Option<&'a mut SeededRng>,
    p: f64,
    trace: Option<Vec<(AttentionSite, usize, Var)>>,
}

impl Ctx<'_> {
    fn dropout<T: Real>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.p > 0.0 => tape.dropout(x, self.p, rng),
            _ => Ok(x),
        }
    }
}

/// Shared-parameter encoder-decoder Transformer.
#[derive(Clone, Debug)]
pub struct Seq2Seq<T: Real = f32> {
    config: ModelConfig,
    params: ParameterSet<T>,
    layout: Layout,
}

impl<T: Real> Seq2Seq<T> {
    pub fn new(config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let mut src = Source::Init { params: ParameterSet::new(), rng };
        let layout = src.layout(&config)?;
        let Source::Init { params, .. } = src else { unreachable!() };
        Ok(Seq2Seq { config, params, layout })
    }

    /// Rebuilds a model around existing parameters, verifying names and shapes.
    pub fn from_parts(config: ModelConfig, params: ParameterSet<T>) -> Result<Self> {
        config.validate()?;
        let mut src = Source::Check { params: &params, next: 0 };
        let layout = src.layout(&config)?;
        if let Source::Check { next, .. } = src {
            if next != params.len() {
                return Err(Error::Checkpoint(format!("{} unexpected extra parameters", params.len() - next)));
            }
        }
        Ok(Seq2Seq { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterSet<T> {
        self.params
    }

    pub fn cast<U: Real>(&self) -> Seq2Seq<U> {
        Seq2Seq { config: self.config.clone(), params: self.params.cast(), layout: self.layout.clone() }
    }

    fn truncate<'s>(&self, ids: &'s [usize], max: usize, what: &str) -> &'s [usize] {
        if ids.len() > max {
            warn!("{what} of length {} truncated to {max}", ids.len());
            &ids[..max]
        } else {
            ids
        }
    }

    fn embed(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        ids: &[usize],
        batch: usize,
        len: usize,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let e = tape.embedding(pv.get(self.layout.embed), ids, &[batch, len])?;
        let e = tape.scale(e, T::lit((d as f64).sqrt()))?;
        let pe = positional_encoding::<T>(len, d)?;
        let tiled: Vec<T> = (0..batch).flat_map(|_| pe.data().iter().copied()).collect();
        let pe = tape.constant(Tensor::new(&[batch, len, d], tiled)?);
        let x = tape.add(e, pe)?;
        ctx.dropout(tape, x)
    }

    fn linear(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var, w: usize, b: usize) -> Result<Var> {
        let y = tape.matmul(x, pv.get(w))?;
        tape.add_bias(y, pv.get(b))
    }

    #[allow(clippy::too_many_arguments)]
    fn multi_head(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        idx: &AttnIdx,
        xq: Var,
        xkv: Var,
        mask: &AttentionMask,
        site: AttentionSite,
        layer: usize,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let h = self.config.n_heads;
        let q = self.linear(tape, pv, xq, idx.wq, idx.bq)?;
        let k = self.linear(tape, pv, xkv, idx.wk, idx.bk)?;
        let v = self.linear(tape, pv, xkv, idx.wv, idx.bv)?;
        let (q, k, v) = (tape.split_heads(q, h)?, tape.split_heads(k, h)?, tape.split_heads(v, h)?);
        let g = idx.g.map(|i| pv.get(i));
        let out = attention(tape, self.config.norm_mode, q, k, v, g, mask)?;
        if let Some(trace) = ctx.trace.as_mut() {
            trace.push((site, layer, out.weights));
        }
        let merged = tape.merge_heads(out.output, h)?;
        self.linear(tape, pv, merged, idx.wo, idx.bo)
    }

    fn layer_norm(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var, ln: &LnIdx) -> Result<Var> {
        tape.layer_norm(x, pv.get(ln.gamma), pv.get(ln.beta), LN_EPS)
    }

    fn feed_forward(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var, f: &FfnIdx, ctx: &mut Ctx) -> Result<Var> {
        let h = self.linear(tape, pv, x, f.w1, f.b1)?;
        let h = tape.relu(h)?;
        let h = ctx.dropout(tape, h)?;
        self.linear(tape, pv, h, f.w2, f.b2)
    }

    /// One residual sub-layer with the configured LN placement.
    fn sublayer(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        x: Var,
        ln: &LnIdx,
        ctx: &mut Ctx,
        body: impl FnOnce(&Self, &mut Tape<T>, Var, &mut Ctx) -> Result<Var>,
    ) -> Result<Var> {
        match self.config.residual {
            Residual::Post => {
                let y = body(self, tape, x, ctx)?;
                let y = ctx.dropout(tape, y)?;
                let s = tape.add(x, y)?;
                self.layer_norm(tape, pv, s, ln)
            }
            Residual::Pre => {
                let n = self.layer_norm(tape, pv, x, ln)?;
                let y = body(self, tape, n, ctx)?;
                let y = ctx.dropout(tape, y)?;
                tape.add(x, y)
            }
        }
    }

    fn encoder_stack(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        src: &[Vec<usize>],
        ctx: &mut Ctx,
    ) -> Result<(Var, Vec<Vec<bool>>)> {
        let (ids, valid, len) = pad(src)?;
        let mut x = self.embed(tape, pv, &ids, src.len(), len, ctx)?;
        let mask = AttentionMask::padding(&valid, len)?;
        for (l, layer) in self.layout.encoder.iter().enumerate() {
            x = self.sublayer(tape, pv, x, &layer.ln1, ctx, |m, tape, h, ctx| {
                m.multi_head(tape, pv, &layer.attn, h, h, &mask, AttentionSite::EncoderSelf, l, ctx)
            })?;
            x = self.sublayer(tape, pv, x, &layer.ln2, ctx, |m, tape, h, ctx| {
                m.feed_forward(tape, pv, h, &layer.ffn, ctx)
            })?;
        }
        if let Some(ln) = &self.layout.encoder_final {
            x = self.layer_norm(tape, pv, x, ln)?;
        }
        Ok((x, valid))
    }

    /// Decoder over padded target inputs; returns `[batch, len, vocab]`
    /// log-probabilities.
    fn decoder_stack(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        tgt_in: &[Vec<usize>],
        memory: Var,
        memory_valid: &[Vec<bool>],
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let (ids, valid, len) = pad(tgt_in)?;
        let batch = tgt_in.len();
        let mut x = self.embed(tape, pv, &ids, batch, len, ctx)?;
        let self_mask = AttentionMask::causal(&valid)?;
        let cross_mask = AttentionMask::padding(memory_valid, len)?;
        for (l, layer) in self.layout.decoder.iter().enumerate() {
            x = self.sublayer(tape, pv, x, &layer.ln1, ctx, |m, tape, h, ctx| {
                m.multi_head(tape, pv, &layer.self_attn, h, h, &self_mask, AttentionSite::DecoderSelf, l, ctx)
            })?;
            x = self.sublayer(tape, pv, x, &layer.ln2, ctx, |m, tape, h, ctx| {
                m.multi_head(tape, pv, &layer.cross, h, memory, &cross_mask, AttentionSite::DecoderCross, l, ctx)
            })?;
            x = self.sublayer(tape, pv, x, &layer.ln3, ctx, |m, tape, h, ctx| {
                m.feed_forward(tape, pv, h, &layer.ffn, ctx)
            })?;
        }
        if let Some(ln) = &self.layout.decoder_final {
            x = self.layer_norm(tape, pv, x, ln)?;
        }
        let logits = self.linear(tape, pv, x, self.layout.out_w, self.layout.out_b)?;
        tape.log_softmax(logits)
    }

    /// Mean per-token negative log-likelihood of a teacher-forced batch.
    /// Passing a random stream enables dropout.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        batch: &Batch,
        dropout: Option<&mut SeededRng>,
    ) -> Result<Var> {
        if batch.sources.len() != batch.targets.len() || batch.sources.is_empty() {
            return Err(Error::Contract(format!(
                "batch with {} sources and {} targets",
                batch.sources.len(),
                batch.targets.len()
            )));
        }
        let mut ctx = Ctx { rng: dropout, p: self.config.dropout, trace: None };
        let sources: Vec<Vec<usize>> =
            batch.sources.iter().map(|s| self.truncate(s, self.config.max_source_len, "source").to_vec()).collect();
        let mut tgt_in = Vec::with_capacity(batch.targets.len());
        let mut tgt_out = Vec::with_capacity(batch.targets.len());
        for t in &batch.targets {
            let t = self.truncate(t, self.config.max_target_len, "target");
            if t.len() < 2 || t[0] != START {
                return Err(Error::Contract(
                    "targets must start with the start token and contain at least one more".into(),
                ));
            }
            tgt_in.push(t[..t.len() - 1].to_vec());
            tgt_out.push(t[1..].to_vec());
        }
        let (memory, valid) = self.encoder_stack(tape, pv, &sources, &mut ctx)?;
        let logp = self.decoder_stack(tape, pv, &tgt_in, memory, &valid, &mut ctx)?;
        let len = tgt_in.iter().map(Vec::len).max().unwrap_or(0);
        let targets: Vec<Option<usize>> =
            tgt_out.iter().flat_map(|row| (0..len).map(move |j| row.get(j).copied())).collect();
        let flat = tape.reshape(logp, &[targets.len(), self.config.vocab_size])?;
        tape.nll_mean(flat, &targets)
    }

    /// Loss value without recording gradients or applying dropout.
    pub fn eval_loss(&self, batch: &Batch) -> Result<T> {
        let mut tape = Tape::new();
        let pv = self.params.register(&mut tape);
        let l = self.loss(&mut tape, &pv, batch, None)?;
        Ok(tape.data(l)[0])
    }

    /// Encoder states for one source sequence (eval mode).
    pub fn encode(&self, src: &[usize]) -> Result<EncoderMemory<T>> {
        if src.is_empty() {
            return Err(Error::Contract("cannot encode an empty source".into()));
        }
        let src = self.truncate(src, self.config.max_source_len, "source");
        let mut tape = Tape::new();
        let pv = self.params.register(&mut tape);
        let mut ctx = Ctx { rng: None, p: 0.0, trace: None };
        let (x, mut valid) = self.encoder_stack(&mut tape, &pv, &[src.to_vec()], &mut ctx)?;
        let d = self.config.d_model;
        let states = Tensor::new(&[src.len(), d], tape.data(x).to_vec())?;
        Ok(EncoderMemory { states, valid: valid.remove(0) })
    }

    /// Log-probabilities of the next token after `prefix`, which must begin
    /// with the start token.
    pub fn decode_logprobs(&self, prefix: &[usize], memory: &EncoderMemory<T>) -> Result<Vec<T>> {
        Ok(self.decode_logprobs_batch(&[prefix.to_vec()], memory)?.remove(0))
    }

    /// Next-token log-probabilities for several prefixes sharing one source.
    pub fn decode_logprobs_batch(&self, prefixes: &[Vec<usize>], memory: &EncoderMemory<T>) -> Result<Vec<Vec<T>>> {
        if prefixes.is_empty() {
            return Ok(Vec::new());
        }
        for p in prefixes {
            if p.is_empty() {
                return Err(Error::Contract("decoding needs a non-empty prefix".into()));
            }
            if p[0] != START {
                return Err(Error::Contract("decoder prefix must begin with the start token".into()));
            }
        }
        let n = prefixes.len();
        let (s, d) = (memory.len(), self.config.d_model);
        let mut tape = Tape::new();
        let pv = self.params.register(&mut tape);
        let tiled: Vec<T> = (0..n).flat_map(|_| memory.states.data().iter().copied()).collect();
        let mem = tape.constant(Tensor::new(&[n, s, d], tiled)?);
        let valid = vec![memory.valid.clone(); n];
        let mut ctx = Ctx { rng: None, p: 0.0, trace: None };
        let logp = self.decoder_stack(&mut tape, &pv, prefixes, mem, &valid, &mut ctx)?;
        let len = prefixes.iter().map(Vec::len).max().unwrap_or(0);
        let v = self.config.vocab_size;
        let data = tape.data(logp);
        Ok(prefixes
            .iter()
            .enumerate()
            .map(|(b, p)| {
                let row = (b * len + p.len() - 1) * v;
                data[row..row + v].to_vec()
            })
            .collect())
    }

    /// Attention weights of every block for a teacher-forced pair, or of the
    /// encoder only when `target` is `None`.
    pub fn attention_maps(&self, src: &[usize], target: Option<&[usize]>) -> Result<Vec<AttentionMap<T>>> {
        let src = self.truncate(src, self.config.max_source_len, "source");
        if src.is_empty() {
            return Err(Error::Contract("cannot encode an empty source".into()));
        }
        let mut tape = Tape::new();
        let pv = self.params.register(&mut tape);
        let mut ctx = Ctx { rng: None, p: 0.0, trace: Some(Vec::new()) };
        let (mem, valid) = self.encoder_stack(&mut tape, &pv, &[src.to_vec()], &mut ctx)?;
        if let Some(t) = target {
            self.decoder_stack(&mut tape, &pv, &[t.to_vec()], mem, &valid, &mut ctx)?;
        }
        let heads = self.config.n_heads;
        ctx.trace
            .unwrap_or_default()
            .into_iter()
            .map(|(site, layer, v)| {
                let s = tape.shape(v);
                let weights = Tensor::new(&[heads, s[1], s[2]], tape.data(v).to_vec())?;
                Ok(AttentionMap { site, layer, weights })
            })
            .collect()
    }
}

/// Right-pads sequences with the pad id; returns flat ids, validity masks and
/// the padded length.
fn pad(seqs: &[Vec<usize>]) -> Result<(Vec<usize>, Vec<Vec<bool>>, usize)> {
    let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
    if len == 0 {
        return Err(Error::Contract("empty sequence batch".into()));
    }
    let mut ids = Vec::with_capacity(seqs.len() * len);
    let mut valid = Vec::with_capacity(seqs.len());
    for s in seqs {
        if s.is_empty() {
            return Err(Error::Contract("empty sequence in batch".into()));
        }
        ids.extend(s.iter().copied().chain(std::iter::repeat_n(PAD, len - s.len())));
        valid.push((0..len).map(|j| j < s.len()).collect());
    }
    Ok((ids, valid, len))
}

//! Small autoregressive decoder over prompt embeddings, its masked NLL
//! objective, and beam search.
//!
//! The decoder input is `[prompt rows, embed(bos), embed(y_1), ..., embed(y_T)]`
//! and position `P + i` predicts `y_{i+1}` (`eos` after the last token), so
//! only the `T + 1` report positions carry loss.

use std::cell::RefCell;
use std::cmp::Ordering;
use std::collections::HashMap;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Reduction, Var};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;
use crate::text::{BOS, EOS, PAD};
use crate::vision::{self, norm_init};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    #[default]
    Ssm,
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub layers: usize,
    /// Longest prompt plus report the decoder accepts.
    pub window: usize,
    pub d_state: usize,
    pub expand: usize,
    pub conv_kernel: usize,
    pub kind: DecoderKind,
    pub reduction: Reduction,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            width: 32,
            layers: 2,
            window: 256,
            d_state: 8,
            expand: 2,
            conv_kernel: 4,
            kind: DecoderKind::Ssm,
            reduction: Reduction::Mean,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config(
                "vocabulary must hold the four special tokens".into(),
            ));
        }
        if self.width == 0 || self.layers == 0 || self.window == 0 || self.conv_kernel == 0 {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        Ok(())
    }
}

fn linear_init(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) {
    let std = 1.0 / (fan_in as f64).sqrt();
    store.insert(
        format!("{name}.w"),
        Tensor::randn(&[fan_in, fan_out], std, rng),
    );
    store.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
}

pub fn init_decoder(store: &mut ParamStore, cfg: &DecoderConfig, prefix: &str, rng: &mut impl Rng) {
    let e = cfg.width;
    store.insert(
        format!("{prefix}.embed"),
        Tensor::randn(&[cfg.vocab_size, e], 1.0, rng),
    );
    if cfg.kind == DecoderKind::Attention {
        store.insert(
            format!("{prefix}.pos"),
            Tensor::randn(&[cfg.window, e], 0.1, rng),
        );
    }
    for l in 0..cfg.layers {
        let p = format!("{prefix}.layer{l}");
        match cfg.kind {
            DecoderKind::Ssm => {
                let di = cfg.expand * e;
                norm_init(store, &format!("{p}.ln"), e);
                linear_init(store, &format!("{p}.in_x"), e, di, rng);
                linear_init(store, &format!("{p}.in_z"), e, di, rng);
                let k = cfg.conv_kernel;
                store.insert(
                    format!("{p}.conv.w"),
                    Tensor::randn(&[k, di], 1.0 / (k as f64).sqrt(), rng),
                );
                store.insert(format!("{p}.conv.b"), Tensor::zeros(&[1, di]));
                vision::init_selective_scan(store, &format!("{p}.ssm"), di, cfg.d_state, rng);
                linear_init(store, &format!("{p}.out"), di, e, rng);
            }
            DecoderKind::Attention => {
                norm_init(store, &format!("{p}.ln1"), e);
                for n in ["q", "k", "v", "o"] {
                    linear_init(store, &format!("{p}.{n}"), e, e, rng);
                }
                norm_init(store, &format!("{p}.ln2"), e);
                linear_init(store, &format!("{p}.mlp1"), e, 2 * e, rng);
                linear_init(store, &format!("{p}.mlp2"), 2 * e, e, rng);
            }
        }
    }
    norm_init(store, &format!("{prefix}.norm"), e);
    linear_init(store, &format!("{prefix}.head"), e, cfg.vocab_size, rng);
}

/// Graph-level decoder.
pub mod graph {
    use super::*;

    /// Rows of the embedding table for `ids`.
    pub fn embed(ctx: &mut Ctx, ids: &[u32], prefix: &str) -> Result<Var> {
        let table = ctx.param(&format!("{prefix}.embed"))?;
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        ctx.g.gather_rows(table, &idx)
    }

    /// Logits (`S x V`) for the input embeddings `x` (`S x E`).
    pub fn forward(ctx: &mut Ctx, cfg: &DecoderConfig, x: Var, prefix: &str) -> Result<Var> {
        let s = ctx.g.value(x).rows();
        if s > cfg.window {
            return Err(Error::Length {
                len: s,
                window: cfg.window,
            });
        }
        let mut x = x;
        if cfg.kind == DecoderKind::Attention {
            let pos = ctx.param(&format!("{prefix}.pos"))?;
            let rows: Vec<usize> = (0..s).collect();
            let p = ctx.g.gather_rows(pos, &rows)?;
            x = ctx.g.add(x, p)?;
        }
        for l in 0..cfg.layers {
            let p = format!("{prefix}.layer{l}");
            x = match cfg.kind {
                DecoderKind::Ssm => ssm_layer(ctx, cfg, x, &p)?,
                DecoderKind::Attention => attention_layer(ctx, cfg, x, &p)?,
            };
        }
        let h = ctx.layer_norm(x, &format!("{prefix}.norm"))?;
        ctx.linear(h, &format!("{prefix}.head"))
    }

    fn ssm_layer(ctx: &mut Ctx, cfg: &DecoderConfig, x: Var, p: &str) -> Result<Var> {
        let h = ctx.layer_norm(x, &format!("{p}.ln"))?;
        let u = ctx.linear(h, &format!("{p}.in_x"))?;
        let z = ctx.linear(h, &format!("{p}.in_z"))?;
        let w = ctx.param(&format!("{p}.conv.w"))?;
        let b = ctx.param(&format!("{p}.conv.b"))?;
        let u = ctx.g.causal_conv1d(u, w, b, cfg.conv_kernel)?;
        let u = ctx.g.silu(u);
        let y = vision::graph::selective_scan_1d(ctx, u, &format!("{p}.ssm"))?;
        let gate = ctx.g.silu(z);
        let y = ctx.g.mul(y, gate)?;
        let out = ctx.linear(y, &format!("{p}.out"))?;
        ctx.g.add(x, out)
    }

    fn attention_layer(ctx: &mut Ctx, cfg: &DecoderConfig, x: Var, p: &str) -> Result<Var> {
        let h = ctx.layer_norm(x, &format!("{p}.ln1"))?;
        let q = ctx.linear(h, &format!("{p}.q"))?;
        let k = ctx.linear(h, &format!("{p}.k"))?;
        let v = ctx.linear(h, &format!("{p}.v"))?;
        let scores = ctx.g.matmul_bt(q, k)?;
        let scores = ctx.g.scale(scores, 1.0 / (cfg.width as f64).sqrt());
        let attn = ctx.g.causal_softmax(scores)?;
        let a = ctx.g.matmul(attn, v)?;
        let o = ctx.linear(a, &format!("{p}.o"))?;
        let x = ctx.g.add(x, o)?;
        let h = ctx.layer_norm(x, &format!("{p}.ln2"))?;
        let m = ctx.linear(h, &format!("{p}.mlp1"))?;
        let m = ctx.g.silu(m);
        let m = ctx.linear(m, &format!("{p}.mlp2"))?;
        ctx.g.add(x, m)
    }

    /// Decoder input for a prompt node plus the report: prompt rows, then
    /// embeddings of `[bos, report...]`.
    pub fn teacher_forced_input(
        ctx: &mut Ctx,
        prompt: Var,
        report: &[u32],
        prefix: &str,
    ) -> Result<Var> {
        let mut ids = Vec::with_capacity(report.len() + 1);
        ids.push(BOS);
        ids.extend_from_slice(report);
        let e = embed(ctx, &ids, prefix)?;
        ctx.g.concat_rows(&[prompt, e])
    }
}

/// Targets and mask over the full decoder sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub prompt_len: usize,
    /// One target per position; prompt positions hold `pad`.
    pub targets: Vec<u32>,
    /// 1 on report positions, 0 on prompt positions.
    pub mask: Vec<f64>,
}

impl TrainingBatch {
    pub fn new(prompt_len: usize, report: &[u32]) -> Self {
        let mut targets = vec![PAD; prompt_len];
        targets.extend_from_slice(report);
        targets.push(EOS);
        let mut mask = vec![0.0; prompt_len];
        mask.resize(prompt_len + report.len() + 1, 1.0);
        Self {
            prompt_len,
            targets,
            mask,
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Logits for a prompt (`P x E`) and a report under teacher forcing.
pub fn forward(
    store: &ParamStore,
    cfg: &DecoderConfig,
    prefix: &str,
    prompt: &Tensor,
    report: &[u32],
) -> Result<Tensor> {
    let mut ctx = Ctx::new(store);
    let p = ctx.g.constant(prompt.clone());
    let x = graph::teacher_forced_input(&mut ctx, p, report, prefix)?;
    let logits = graph::forward(&mut ctx, cfg, x, prefix)?;
    Ok(ctx.g.value(logits).clone())
}

/// Mean (or summed) negative log-likelihood over masked positions.
pub fn loss(logits: &Tensor, targets: &[u32], mask: &[f64], reduction: Reduction) -> Result<f64> {
    if targets.len() != logits.rows() || mask.len() != targets.len() {
        return Err(Error::invalid(
            "targets and mask must have one entry per logit row",
        ));
    }
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let out = g.cross_entropy(l, targets, mask, reduction)?;
    Ok(g.value(out).data()[0])
}

fn log_softmax_last(logits: &Tensor) -> Vec<f64> {
    let row = logits.row(logits.rows() - 1);
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// A model that scores the next token given a prefix of generated tokens.
pub trait StepLm {
    fn vocab_size(&self) -> usize;
    /// Log-probabilities over the vocabulary for the token after `prefix`.
    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>>;
}

/// Recurrent state of the SSM decoder after consuming some prefix.
#[derive(Clone, Debug)]
struct RecurrentState {
    /// Per layer, the last `conv_kernel - 1` conv inputs, oldest first.
    conv: Vec<Vec<Vec<f64>>>,
    /// Per layer, `Di x N` scan state.
    scan: Vec<Vec<f64>>,
    pos: usize,
}

fn row_linear(store: &ParamStore, prefix: &str, x: &[f64]) -> Result<Vec<f64>> {
    let w = param(store, &format!("{prefix}.w"))?;
    let (n_in, n_out) = (w.rows(), w.cols());
    if x.len() != n_in {
        return Err(Error::invalid(format!(
            "{prefix}: expected {n_in} inputs, got {}",
            x.len()
        )));
    }
    let mut y = match store.get(&format!("{prefix}.b")) {
        Some(b) => b.data().to_vec(),
        None => vec![0.0; n_out],
    };
    let wd = w.data();
    for (i, &xi) in x.iter().enumerate() {
        for (yo, &wv) in y.iter_mut().zip(&wd[i * n_out..(i + 1) * n_out]) {
            *yo += xi * wv;
        }
    }
    Ok(y)
}

fn row_layer_norm(store: &ParamStore, prefix: &str, x: &[f64]) -> Result<Vec<f64>> {
    let g = param(store, &format!("{prefix}.g"))?.data();
    let b = param(store, &format!("{prefix}.b"))?.data();
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let is = 1.0 / (var + crate::params::LN_EPS).sqrt();
    Ok(x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (g, b))| (v - mean) * is * g + b)
        .collect())
}

fn param<'s>(store: &'s ParamStore, name: &str) -> Result<&'s Tensor> {
    store
        .get(name)
        .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
}

fn silu(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    x * s
}

/// Step-wise evaluation of the SSM decoder, equal to the full forward pass
/// up to rounding.
struct Recurrent<'a> {
    store: &'a ParamStore,
    cfg: &'a DecoderConfig,
    prefix: &'a str,
}

impl Recurrent<'_> {
    fn empty(&self) -> RecurrentState {
        let di = self.cfg.expand * self.cfg.width;
        RecurrentState {
            conv: vec![vec![vec![0.0; di]; self.cfg.conv_kernel - 1]; self.cfg.layers],
            scan: vec![vec![0.0; di * self.cfg.d_state]; self.cfg.layers],
            pos: 0,
        }
    }

    /// Consume one input row; returns the log-probabilities for the next token.
    fn step(&self, state: &mut RecurrentState, row: &[f64]) -> Result<Vec<f64>> {
        if state.pos >= self.cfg.window {
            return Err(Error::Length {
                len: state.pos + 1,
                window: self.cfg.window,
            });
        }
        let k = self.cfg.conv_kernel;
        let n = self.cfg.d_state;
        let mut x = row.to_vec();
        for l in 0..self.cfg.layers {
            let p = format!("{}.layer{l}", self.prefix);
            let h = row_layer_norm(self.store, &format!("{p}.ln"), &x)?;
            let u = row_linear(self.store, &format!("{p}.in_x"), &h)?;
            let z = row_linear(self.store, &format!("{p}.in_z"), &h)?;
            let cw = param(self.store, &format!("{p}.conv.w"))?.data();
            let mut conv = param(self.store, &format!("{p}.conv.b"))?.data().to_vec();
            let di = conv.len();
            let hist = &mut state.conv[l];
            for (j, past) in hist.iter().enumerate() {
                for ch in 0..di {
                    conv[ch] += cw[j * di + ch] * past[ch];
                }
            }
            for ch in 0..di {
                conv[ch] += cw[(k - 1) * di + ch] * u[ch];
            }
            if k > 1 {
                hist.remove(0);
                hist.push(u);
            }
            let seq: Vec<f64> = conv.iter().map(|&v| silu(v)).collect();
            let sp = format!("{p}.ssm");
            let dt: Vec<f64> = row_linear(self.store, &format!("{sp}.dt"), &seq)?
                .into_iter()
                .map(crate::ssm::softplus)
                .collect();
            let b = row_linear(self.store, &format!("{sp}.b"), &seq)?;
            let c = row_linear(self.store, &format!("{sp}.c"), &seq)?;
            let a_log = param(self.store, &format!("{sp}.a_log"))?.data();
            let skip = param(self.store, &format!("{sp}.d"))?.data();
            let hs = &mut state.scan[l];
            let mut y = vec![0.0; di];
            for d in 0..di {
                let mut acc = 0.0;
                for s in 0..n {
                    let a = -a_log[d * n + s].exp();
                    let ab = (dt[d] * a).exp();
                    let hv = ab * hs[d * n + s] + crate::ssm::zoh_gain(dt[d], a) * b[s] * seq[d];
                    hs[d * n + s] = hv;
                    acc += c[s] * hv;
                }
                y[d] = (acc + seq[d] * skip[d]) * silu(z[d]);
            }
            let out = row_linear(self.store, &format!("{p}.out"), &y)?;
            for (xv, o) in x.iter_mut().zip(out) {
                *xv += o;
            }
        }
        state.pos += 1;
        let h = row_layer_norm(self.store, &format!("{}.norm", self.prefix), &x)?;
        let logits = row_linear(self.store, &format!("{}.head", self.prefix), &h)?;
        Ok(log_softmax_last(&Tensor::row_vector(logits)))
    }
}

/// The trained decoder conditioned on one prompt.
///
/// The SSM decoder caches its recurrent state per generated prefix, so each
/// beam extension costs one step. The attention decoder recomputes the full
/// sequence.
pub struct DecoderLm<'a> {
    pub store: &'a ParamStore,
    pub cfg: &'a DecoderConfig,
    pub prefix: &'a str,
    pub prompt: &'a Tensor,
    cache: RefCell<StepCache>,
}

/// Recurrent state and next-token log-probs keyed by the emitted prefix.
type StepCache = HashMap<Vec<u32>, (RecurrentState, Vec<f64>)>;

impl<'a> DecoderLm<'a> {
    pub fn new(
        store: &'a ParamStore,
        cfg: &'a DecoderConfig,
        prefix: &'a str,
        prompt: &'a Tensor,
    ) -> Self {
        DecoderLm {
            store,
            cfg,
            prefix,
            prompt,
            cache: RefCell::new(HashMap::new()),
        }
    }

    fn embedding(&self, token: u32) -> Result<Vec<f64>> {
        let table = param(self.store, &format!("{}.embed", self.prefix))?;
        if token as usize >= table.rows() {
            return Err(Error::invalid(format!("token {token} outside vocabulary")));
        }
        Ok(table.row(token as usize).to_vec())
    }

    fn recurrent_log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        if let Some((_, lp)) = self.cache.borrow().get(prefix) {
            return Ok(lp.clone());
        }
        let rec = Recurrent {
            store: self.store,
            cfg: self.cfg,
            prefix: self.prefix,
        };
        let (state, lp) = match prefix.split_last() {
            None => {
                let mut state = rec.empty();
                for r in 0..self.prompt.rows() {
                    rec.step(&mut state, self.prompt.row(r))?;
                }
                let lp = rec.step(&mut state, &self.embedding(BOS)?)?;
                (state, lp)
            }
            Some((&last, head)) => {
                self.recurrent_log_probs(head)?;
                let mut state = self.cache.borrow()[head].0.clone();
                let lp = rec.step(&mut state, &self.embedding(last)?)?;
                (state, lp)
            }
        };
        self.cache
            .borrow_mut()
            .insert(prefix.to_vec(), (state, lp.clone()));
        Ok(lp)
    }
}

impl StepLm for DecoderLm<'_> {
    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        match self.cfg.kind {
            DecoderKind::Ssm => self.recurrent_log_probs(prefix),
            DecoderKind::Attention => {
                let logits = forward(self.store, self.cfg, self.prefix, self.prompt, prefix)?;
                Ok(log_softmax_last(&logits))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub width: usize,
    pub max_len: usize,
    /// Scores are `log p / len^alpha`.
    pub alpha: f64,
    /// Token that completes a hypothesis; `None` runs every beam to `max_len`.
    pub eos: Option<u32>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            width: 3,
            max_len: 48,
            alpha: 0.7,
            eos: Some(EOS),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub score: f64,
}

fn normalized(log_prob: f64, len: usize, alpha: f64) -> f64 {
    if len == 0 {
        log_prob
    } else {
        log_prob / (len as f64).powf(alpha)
    }
}

/// Higher score first; equal scores fall back to the smaller token sequence.
fn rank(
    a: &(Vec<u32>, f64),
    b: &(Vec<u32>, f64),
    key: impl Fn(&(Vec<u32>, f64)) -> f64,
) -> Ordering {
    key(b).total_cmp(&key(a)).then_with(|| a.0.cmp(&b.0))
}

/// Keep the `width` best extensions at every step. A candidate ending in
/// `eos` is complete; beams still open at `max_len` are complete as they
/// stand. Returns the complete hypothesis with the best normalized score.
pub fn beam_search(lm: &dyn StepLm, cfg: &BeamConfig) -> Result<Hypothesis> {
    if cfg.width == 0 {
        return Err(Error::Precondition("beam width must be at least 1".into()));
    }
    let v = lm.vocab_size();
    let mut live: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut done: Vec<(Vec<u32>, f64)> = Vec::new();
    for _ in 0..cfg.max_len {
        let mut cands = Vec::with_capacity(live.len() * v);
        for (seq, lp) in &live {
            let lps = lm.log_probs(seq)?;
            if lps.len() != v {
                return Err(Error::invalid(
                    "language model returned the wrong vocabulary size",
                ));
            }
            for (tok, l) in lps.iter().enumerate() {
                let mut s = seq.clone();
                s.push(tok as u32);
                cands.push((s, lp + l));
            }
        }
        cands.sort_by(|a, b| rank(a, b, |c| c.1));
        cands.truncate(cfg.width);
        live.clear();
        for c in cands {
            if cfg.eos.is_some() && c.0.last().copied() == cfg.eos {
                done.push(c);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    done.extend(live);
    let alpha = cfg.alpha;
    let best = done
        .into_iter()
        .min_by(|a, b| rank(a, b, |c| normalized(c.1, c.0.len(), alpha)))
        .expect("at least one hypothesis");
    Ok(Hypothesis {
        score: normalized(best.1, best.0.len(), alpha),
        log_prob: best.1,
        tokens: best.0,
    })
}

/// Always take the most likely next token (smallest id on ties).
pub fn greedy(lm: &dyn StepLm, max_len: usize, eos: Option<u32>) -> Result<Vec<u32>> {
    let mut seq = Vec::new();
    for _ in 0..max_len {
        let lps = lm.log_probs(&seq)?;
        let (tok, _) = lps
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &l)| {
                if l > best.1 {
                    (i, l)
                } else {
                    best
                }
            });
        seq.push(tok as u32);
        if Some(tok as u32) == eos {
            break;
        }
    }
    Ok(seq)
}

/// An explicit table of next-token distributions for every prefix up to a
/// fixed length. Small enough to enumerate exhaustively.
#[derive(Clone, Debug)]
pub struct TableLm {
    vocab: usize,
    table: IndexMap<Vec<u32>, Vec<f64>>,
}

impl TableLm {
    /// Random distributions (softmax of `N(0, temperature^2)` logits) for all
    /// prefixes shorter than `depth`.
    pub fn random(vocab: usize, depth: usize, temperature: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = IndexMap::new();
        let mut frontier: Vec<Vec<u32>> = vec![Vec::new()];
        for _ in 0..depth {
            let mut next = Vec::new();
            for p in frontier {
                let logits: Vec<f64> = (0..vocab)
                    .map(|_| {
                        temperature
                            * rand_distr::Distribution::<f64>::sample(
                                &rand_distr::StandardNormal,
                                &mut rng,
                            )
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
                table.insert(p.clone(), logits.iter().map(|l| l - lse).collect());
                for t in 0..vocab as u32 {
                    let mut q = p.clone();
                    q.push(t);
                    next.push(q);
                }
            }
            frontier = next;
        }
        Self { vocab, table }
    }

    /// Highest-probability sequence of exactly `len` tokens, by enumeration.
    pub fn brute_force_best(&self, len: usize) -> Result<(Vec<u32>, f64)> {
        let mut best: Option<(Vec<u32>, f64)> = None;
        let total = self.vocab.pow(len as u32);
        for code in 0..total {
            let mut seq = Vec::with_capacity(len);
            let mut c = code;
            for _ in 0..len {
                seq.push((c % self.vocab) as u32);
                c /= self.vocab;
            }
            seq.reverse();
            let mut lp = 0.0;
            for i in 0..len {
                lp += self.log_probs(&seq[..i])?[seq[i] as usize];
            }
            let better = match &best {
                None => true,
                Some((s, b)) => lp > *b || (lp == *b && seq < *s),
            };
            if better {
                best = Some((seq, lp));
            }
        }
        best.ok_or_else(|| Error::invalid("nothing to enumerate"))
    }
}

impl StepLm for TableLm {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        self.table
            .get(prefix)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("prefix {prefix:?} is beyond the table depth")))
    }
}

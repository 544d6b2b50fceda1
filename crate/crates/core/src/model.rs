//! The full report generator: backbone, bridge projections, residual prompt,
//! decoder. Also training and batch generation.
//!
//! A training step runs in three phases so that every distinct image goes
//! through the backbone once per step, however many prompts it appears in:
//! backbone graphs per image, a decoder graph per query whose feature maps
//! are leaves, then each backbone graph seeded with the summed feature
//! gradients.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Reduction, Var};
use crate::data::{Dataset, SampleRecord, Split};
use crate::decoder::{self, beam_search, BeamConfig, DecoderConfig, DecoderLm, TrainingBatch};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Ctx, GradStore, ParamStore};
use crate::prompt::{self, PromptTemplate, SubtractionStage};
use crate::retrieval::{build_index, ContextIndex, ContextSampleSet, PairMode, Strategy};
use crate::tensor::Tensor;
use crate::text::Vocab;
use crate::vision::{self, BackboneConfig};

const VISION: &str = "vision";
const BRIDGE: &str = "bridge";
const DECODER: &str = "decoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextConfig {
    /// Positive/negative pairs per prompt; 0 disables context entirely.
    pub n_pairs: usize,
    pub strategy: Strategy,
    pub fixed_pair: bool,
    pub template: String,
    /// Text whose token embeddings give the text residuals.
    pub disease_prompt: String,
    pub subtraction: SubtractionStage,
    pub seed: u64,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            n_pairs: 3,
            strategy: Strategy::default(),
            fixed_pair: true,
            template: "note".into(),
            disease_prompt: "with disease".into(),
            subtraction: SubtractionStage::AfterProjection,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
    pub context: ContextConfig,
    /// Keep backbone parameters fixed during training.
    pub freeze_vision: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            optimizer: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Per-token loss after every optimizer step and averaged per epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub steps: Vec<f64>,
    pub epochs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    config: ModelConfig,
    template: PromptTemplate,
}

/// Vocabulary over training reports, the prompt template and the disease prompt.
pub fn build_vocab(
    train: &[&SampleRecord],
    template: &PromptTemplate,
    disease_prompt: &str,
) -> Vocab {
    let (pre, post) = template.instruction_halves();
    let texts = train.iter().map(|r| r.report.as_str()).chain([
        pre.as_str(),
        post.as_str(),
        disease_prompt,
    ]);
    Vocab::build(texts)
}

pub struct ReportModel {
    pub config: ModelConfig,
    pub template: PromptTemplate,
    pub vocab: Vocab,
    pub params: ParamStore,
    prefix_ids: Vec<u32>,
    suffix_ids: Vec<u32>,
    disease_ids: Vec<u32>,
}

impl ReportModel {
    /// Fresh model; the decoder vocabulary size is taken from `vocab`.
    pub fn new(
        mut config: ModelConfig,
        template: PromptTemplate,
        vocab: Vocab,
        seed: u64,
    ) -> Result<Self> {
        config.decoder.vocab_size = vocab.len();
        config.backbone.validate()?;
        config.decoder.validate()?;
        template.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        vision::init_backbone(&mut params, &config.backbone, VISION, &mut rng);
        let c = config.backbone.out_channels();
        let e = config.decoder.width;
        let std = 1.0 / (c as f64).sqrt();
        params.insert(
            format!("{BRIDGE}.global.w"),
            Tensor::randn(&[c, e], std, &mut rng),
        );
        params.insert(format!("{BRIDGE}.global.b"), Tensor::zeros(&[1, e]));
        params.insert(
            format!("{BRIDGE}.seq.w"),
            Tensor::randn(&[c, e], std, &mut rng),
        );
        params.insert(format!("{BRIDGE}.seq.b"), Tensor::zeros(&[1, e]));
        vision::norm_init(&mut params, &format!("{BRIDGE}.seq_norm"), e);
        decoder::init_decoder(&mut params, &config.decoder, DECODER, &mut rng);
        Self::assemble(config, template, vocab, params)
    }

    fn assemble(
        config: ModelConfig,
        template: PromptTemplate,
        vocab: Vocab,
        params: ParamStore,
    ) -> Result<Self> {
        let (pre, post) = if config.context.n_pairs > 0 {
            template.instruction_halves()
        } else {
            template.instruction_halves_without_context()
        };
        let disease_ids = vocab.encode(&config.context.disease_prompt);
        if config.context.n_pairs > 0 && disease_ids.is_empty() {
            return Err(Error::Config("disease prompt has no tokens".into()));
        }
        Ok(Self {
            prefix_ids: vocab.encode(&pre),
            suffix_ids: vocab.encode(&post),
            disease_ids,
            config,
            template,
            vocab,
            params,
        })
    }

    pub fn uses_context(&self) -> bool {
        self.config.context.n_pairs > 0
    }

    /// Token counts of the instruction prefix, suffix and disease prompt.
    pub fn prompt_token_counts(&self) -> (usize, usize, usize) {
        (
            self.prefix_ids.len(),
            self.suffix_ids.len(),
            self.disease_ids.len(),
        )
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.params.save(&dir.join("params.ckpt"))?;
        self.vocab.save(&dir.join("vocab.json"))?;
        let meta = ModelMeta {
            config: self.config.clone(),
            template: self.template.clone(),
        };
        let p = dir.join("model.json");
        fs::write(&p, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("model.json");
        let meta: ModelMeta =
            serde_json::from_str(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?;
        let vocab = Vocab::load(&dir.join("vocab.json"))?;
        let params = ParamStore::load(&dir.join("params.ckpt"))?;
        if meta.config.decoder.vocab_size != vocab.len() {
            return Err(Error::Checkpoint(
                "vocabulary does not match the decoder".into(),
            ));
        }
        Self::assemble(meta.config, meta.template, vocab, params)
    }

    /// Final backbone feature grid (`cells x channels`) for one image.
    pub fn features(&self, image: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::new(&self.params);
        let img = ctx.g.constant(image.clone());
        let grid = vision::graph::backbone(&mut ctx, &self.config.backbone, img, VISION)?;
        Ok(ctx.g.value(grid.var).clone())
    }

    /// Prompt embeddings from feature-grid nodes. `context` holds the
    /// positive and negative grids.
    fn prompt_graph(
        &self,
        ctx: &mut Ctx,
        query: Var,
        context: Option<(&[Var], &[Var])>,
    ) -> Result<Var> {
        let pooled = ctx.g.mean_rows(query)?;
        let v_g = ctx.linear(pooled, &format!("{BRIDGE}.global"))?;
        let seq = ctx.linear(query, &format!("{BRIDGE}.seq"))?;
        let v_s = ctx.layer_norm(seq, &format!("{BRIDGE}.seq_norm"))?;
        let prefix = decoder::graph::embed(ctx, &self.prefix_ids, DECODER)?;
        let suffix = decoder::graph::embed(ctx, &self.suffix_ids, DECODER)?;
        let pairs = match context {
            None => None,
            Some((pos, neg)) => {
                let disease = decoder::graph::embed(ctx, &self.disease_ids, DECODER)?;
                let text = prompt::graph::residual_rows(ctx, v_g, disease)?;
                let pos = self.visual_residuals(ctx, pooled, v_g, pos)?;
                let neg = self.visual_residuals(ctx, pooled, v_g, neg)?;
                Some((text, neg, pos))
            }
        };
        prompt::graph::assemble(ctx, pairs, prefix, v_s, suffix)
    }

    fn visual_residuals(&self, ctx: &mut Ctx, pooled: Var, v_g: Var, grids: &[Var]) -> Result<Var> {
        let pooled_ctx: Vec<Var> = grids
            .iter()
            .map(|&g| ctx.g.mean_rows(g))
            .collect::<Result<_>>()?;
        let raw = ctx.g.concat_rows(&pooled_ctx)?;
        match self.config.context.subtraction {
            SubtractionStage::AfterProjection => {
                let c = ctx.linear(raw, &format!("{BRIDGE}.global"))?;
                prompt::graph::residual_rows(ctx, v_g, c)
            }
            SubtractionStage::BeforeProjection => {
                let d = prompt::graph::residual_rows(ctx, pooled, raw)?;
                ctx.linear(d, &format!("{BRIDGE}.global"))
            }
        }
    }

    /// Prompt embeddings for a query feature grid and optional context grids
    /// (positives, negatives).
    pub fn prompt(
        &self,
        query: &Tensor,
        context: Option<(&[Tensor], &[Tensor])>,
    ) -> Result<Tensor> {
        let mut ctx = Ctx::new(&self.params);
        let q = ctx.g.constant(query.clone());
        let vars = context.map(|(p, n)| {
            let p: Vec<Var> = p.iter().map(|t| ctx.g.constant(t.clone())).collect();
            let n: Vec<Var> = n.iter().map(|t| ctx.g.constant(t.clone())).collect();
            (p, n)
        });
        let out = self.prompt_graph(
            &mut ctx,
            q,
            vars.as_ref().map(|(p, n)| (p.as_slice(), n.as_slice())),
        )?;
        Ok(ctx.g.value(out).clone())
    }

    /// Decode a report for prompt embeddings.
    pub fn generate(&self, prompt: &Tensor, beam: &BeamConfig) -> Result<Vec<u32>> {
        let lm = DecoderLm::new(&self.params, &self.config.decoder, DECODER, prompt);
        let mut tokens = beam_search(&lm, beam)?.tokens;
        if tokens.last() == Some(&crate::text::EOS) {
            tokens.pop();
        }
        Ok(tokens)
    }

    pub fn context_index(&self, data: &Dataset) -> Result<Option<ContextIndex>> {
        if !self.uses_context() {
            return Ok(None);
        }
        build_index(
            data.records(),
            self.config.context.strategy.clone(),
            self.config.context.seed,
        )
        .map(Some)
    }

    fn context_for(
        &self,
        index: Option<&ContextIndex>,
        query: &str,
        mode: PairMode,
    ) -> Result<Option<ContextSampleSet>> {
        match index {
            None => Ok(None),
            Some(idx) => idx
                .retrieve(
                    query,
                    self.config.context.n_pairs,
                    mode,
                    self.config.context.seed,
                )
                .map(Some),
        }
    }

    /// Summed masked NLL, masked token count and parameter gradients of the
    /// objective `scale * sum NLL` over `ids`.
    fn batch_gradients(
        &self,
        data: &Dataset,
        index: Option<&ContextIndex>,
        ids: &[String],
        mode: PairMode,
        scale: impl Fn(usize) -> f64,
    ) -> Result<(f64, usize, GradStore)> {
        let sets: Vec<Option<ContextSampleSet>> = ids
            .iter()
            .map(|id| self.context_for(index, id, mode))
            .collect::<Result<_>>()?;
        let mut uniq: IndexMap<&str, usize> = IndexMap::new();
        for (id, set) in ids.iter().zip(&sets) {
            let n = uniq.len();
            uniq.entry(id.as_str()).or_insert(n);
            if let Some(s) = set {
                for c in s.ids() {
                    let n = uniq.len();
                    uniq.entry(c).or_insert(n);
                }
            }
        }

        let freeze = self.config.freeze_vision;
        let mut vis = Vec::with_capacity(uniq.len());
        for id in uniq.keys() {
            let mut ctx = Ctx::new(&self.params);
            let img = ctx.g.constant(data.image(id)?.clone());
            let grid = vision::graph::backbone(&mut ctx, &self.config.backbone, img, VISION)?;
            vis.push((ctx, grid.var));
        }

        let reports: Vec<Vec<u32>> = ids
            .iter()
            .map(|id| {
                let r = data
                    .record(id)
                    .ok_or_else(|| Error::invalid(format!("unknown sample `{id}`")))?;
                Ok(self.vocab.encode(&r.report))
            })
            .collect::<Result<_>>()?;
        let tokens: usize = reports.iter().map(|r| r.len() + 1).sum();
        let factor = scale(tokens);

        let mut grads = GradStore::new();
        let mut feat_grads: Vec<Option<Tensor>> = vec![None; uniq.len()];
        let mut nll = 0.0;
        for ((id, set), report) in ids.iter().zip(&sets).zip(&reports) {
            let mut ctx = Ctx::new(&self.params);
            let leaf = |ctx: &mut Ctx, key: &str| -> (usize, Var) {
                let k = uniq[key];
                let t = vis[k].0.g.value(vis[k].1).clone();
                (
                    k,
                    if freeze {
                        ctx.g.constant(t)
                    } else {
                        ctx.g.leaf(t)
                    },
                )
            };
            let (qk, q) = leaf(&mut ctx, id);
            let mut leaves = vec![(qk, q)];
            let prompt = match set {
                None => self.prompt_graph(&mut ctx, q, None)?,
                Some(s) => {
                    let pos: Vec<(usize, Var)> =
                        s.positives.iter().map(|r| leaf(&mut ctx, &r.id)).collect();
                    let neg: Vec<(usize, Var)> =
                        s.negatives.iter().map(|r| leaf(&mut ctx, &r.id)).collect();
                    leaves.extend(pos.iter().chain(&neg).copied());
                    let pv: Vec<Var> = pos.iter().map(|x| x.1).collect();
                    let nv: Vec<Var> = neg.iter().map(|x| x.1).collect();
                    self.prompt_graph(&mut ctx, q, Some((&pv, &nv)))?
                }
            };
            let p_len = ctx.g.value(prompt).rows();
            let x = decoder::graph::teacher_forced_input(&mut ctx, prompt, report, DECODER)?;
            let logits = decoder::graph::forward(&mut ctx, &self.config.decoder, x, DECODER)?;
            let batch = TrainingBatch::new(p_len, report);
            let loss = ctx
                .g
                .cross_entropy(logits, &batch.targets, &batch.mask, Reduction::Sum)?;
            let value = ctx.g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss(format!("sample `{id}`")));
            }
            nll += value;
            let objective = ctx.g.scale(loss, factor);
            let g = ctx.g.backward(objective)?;
            ctx.collect_grads(&g, &mut grads);
            if !freeze {
                for (k, v) in leaves {
                    if let Some(fg) = g.get(v) {
                        match &mut feat_grads[k] {
                            Some(acc) => acc.add_assign(fg),
                            slot @ None => *slot = Some(fg.clone()),
                        }
                    }
                }
            }
        }

        if !freeze {
            for ((ctx, out), seed) in vis.iter().zip(feat_grads) {
                if let Some(seed) = seed {
                    let g = ctx.g.backward_with(*out, seed)?;
                    ctx.collect_grads(&g, &mut grads);
                }
            }
        }
        Ok((nll, tokens, grads))
    }

    /// Objective over `ids` and its gradient, as used by one training step.
    pub fn loss_and_gradients(
        &self,
        data: &Dataset,
        ids: &[String],
        epoch: u64,
    ) -> Result<(f64, GradStore)> {
        let index = self.context_index(data)?;
        let mode = self.pair_mode(epoch);
        let reduction = self.config.decoder.reduction;
        let n = ids.len();
        let scale = move |tokens: usize| match reduction {
            Reduction::Mean => 1.0 / tokens as f64,
            Reduction::Sum => 1.0 / n as f64,
        };
        let (nll, tokens, grads) = self.batch_gradients(data, index.as_ref(), ids, mode, scale)?;
        Ok((nll * scale(tokens), grads))
    }

    fn pair_mode(&self, epoch: u64) -> PairMode {
        if self.config.context.fixed_pair {
            PairMode::Fixed
        } else {
            PairMode::Resample { epoch }
        }
    }

    /// Train on the training split. Deterministic for a fixed seed.
    pub fn train(&mut self, data: &Dataset, cfg: &TrainConfig) -> Result<LossCurve> {
        let mut ids = data.ids_in(Split::Train);
        if ids.is_empty() {
            return Err(Error::invalid("training split is empty"));
        }
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let index = self.context_index(data)?;
        let mut opt = Adam::new(cfg.optimizer.clone());
        let mut curve = LossCurve::default();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let reduction = self.config.decoder.reduction;
        let freeze = self.config.freeze_vision;
        for epoch in 0..cfg.epochs {
            ids.shuffle(&mut rng);
            let mode = self.pair_mode(epoch as u64);
            let mut epoch_nll = 0.0;
            let mut epoch_tokens = 0;
            for (step, batch) in ids.chunks(cfg.batch_size).enumerate() {
                let n = batch.len();
                let scale = move |tokens: usize| match reduction {
                    Reduction::Mean => 1.0 / tokens as f64,
                    Reduction::Sum => 1.0 / n as f64,
                };
                let (nll, tokens, grads) =
                    self.batch_gradients(data, index.as_ref(), batch, mode, scale)?;
                let per_token = nll / tokens as f64;
                if !per_token.is_finite() || !grads.global_norm().is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        loss: per_token,
                    });
                }
                curve.steps.push(per_token);
                epoch_nll += nll;
                epoch_tokens += tokens;
                opt.step(&mut self.params, &grads, |name| {
                    freeze && name.starts_with(VISION)
                });
            }
            let epoch_loss = epoch_nll / epoch_tokens as f64;
            log::info!("epoch {epoch}: loss {epoch_loss:.6}");
            curve.epochs.push(epoch_loss);
        }
        Ok(curve)
    }

    /// Per-token NLL over `ids` under teacher forcing, without updating.
    pub fn evaluate_loss(&self, data: &Dataset, ids: &[String]) -> Result<f64> {
        let index = self.context_index(data)?;
        let (nll, tokens, _) =
            self.batch_gradients(data, index.as_ref(), ids, PairMode::Fixed, |_| 0.0)?;
        Ok(nll / tokens as f64)
    }

    /// Generate reports for `ids`. Context comes from the training split with
    /// the fixed assignment.
    pub fn generate_for(
        &self,
        data: &Dataset,
        ids: &[String],
        beam: &BeamConfig,
    ) -> Result<Vec<GeneratedReport>> {
        let index = self.context_index(data)?;
        let mut cache: IndexMap<String, Tensor> = IndexMap::new();
        let feature = |id: &str, cache: &mut IndexMap<String, Tensor>| -> Result<Tensor> {
            if let Some(t) = cache.get(id) {
                return Ok(t.clone());
            }
            let t = self.features(data.image(id)?)?;
            cache.insert(id.to_string(), t.clone());
            Ok(t)
        };
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let record = data
                .record(id)
                .ok_or_else(|| Error::invalid(format!("unknown sample `{id}`")))?;
            let q = feature(id, &mut cache)?;
            let prompt = match self.context_for(index.as_ref(), id, PairMode::Fixed)? {
                None => self.prompt(&q, None)?,
                Some(s) => {
                    let pos: Vec<Tensor> = s
                        .positives
                        .iter()
                        .map(|r| feature(&r.id, &mut cache))
                        .collect::<Result<_>>()?;
                    let neg: Vec<Tensor> = s
                        .negatives
                        .iter()
                        .map(|r| feature(&r.id, &mut cache))
                        .collect::<Result<_>>()?;
                    self.prompt(&q, Some((&pos, &neg)))?
                }
            };
            let tokens = self.generate(&prompt, beam)?;
            out.push(GeneratedReport {
                id: id.clone(),
                hypothesis: self.vocab.decode(&tokens),
                reference: record.report.clone(),
            });
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedReport {
    pub id: String,
    pub hypothesis: String,
    pub reference: String,
}

//! Language-space projection, residual tokens, and prompt assembly.
//!
//! The assembled prompt is always laid out as
//! `[R_t, R_v-, R_t, R_v+, R_t, T_pre, v_s, T_post]`, where `R_v+`/`R_v-` are
//! the query's projected global feature minus each positive/negative context
//! feature, and `R_t` is the same feature minus each disease-prompt token.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;
use crate::vision::{FeatureStage, GlobalFeature, TokenSequence};

const BUILTIN_TEMPLATES: &str = include_str!("../templates/default.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    VisionGlobal,
    VisionSeq,
    Text,
    Residual,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedToken {
    pub vector: Vec<f64>,
    pub origin: Origin,
}

impl ProjectedToken {
    pub fn new(vector: Vec<f64>, origin: Origin) -> Result<Self> {
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("projected token has non-finite entries"));
        }
        Ok(Self { vector, origin })
    }

    pub fn width(&self) -> usize {
        self.vector.len()
    }
}

/// Which side of the projection the visual residuals are taken on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubtractionStage {
    #[default]
    AfterProjection,
    BeforeProjection,
}

/// Affine map from vision width to embedding width.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `in x out`.
    pub weight: Tensor,
    /// `1 x out`, if present.
    pub bias: Option<Tensor>,
}

impl Projection {
    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let weight = store
            .get(&format!("{prefix}.w"))
            .ok_or_else(|| Error::invalid(format!("missing projection `{prefix}.w`")))?
            .clone();
        let bias = store.get(&format!("{prefix}.b")).cloned();
        Ok(Self { weight, bias })
    }

    fn apply_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.weight.rows() {
            return Err(Error::invalid(format!(
                "projection expects width {}, got {}",
                self.weight.rows(),
                x.len()
            )));
        }
        let out = self.weight.cols();
        let mut y = match &self.bias {
            Some(b) => b.data().to_vec(),
            None => vec![0.0; out],
        };
        for (i, &xi) in x.iter().enumerate() {
            for (yj, w) in y.iter_mut().zip(self.weight.row(i)) {
                *yj += xi * w;
            }
        }
        Ok(y)
    }
}

/// Map a raw pooled feature into the embedding space.
pub fn project_global(feature: &GlobalFeature, proj: &Projection) -> Result<ProjectedToken> {
    if feature.stage != FeatureStage::Raw {
        return Err(Error::Stage("global feature is already projected".into()));
    }
    ProjectedToken::new(proj.apply_row(&feature.vector)?, Origin::VisionGlobal)
}

/// Map every row of a raw token sequence into the embedding space.
pub fn project_sequence(seq: &TokenSequence, proj: &Projection) -> Result<Vec<ProjectedToken>> {
    if seq.stage != FeatureStage::Raw {
        return Err(Error::Stage("token sequence is already projected".into()));
    }
    (0..seq.len())
        .map(|r| ProjectedToken::new(proj.apply_row(seq.tokens.row(r))?, Origin::VisionSeq))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Residuals {
    pub positive: Vec<ProjectedToken>,
    pub negative: Vec<ProjectedToken>,
    pub text: Vec<ProjectedToken>,
}

fn differences(v_g: &ProjectedToken, others: &[ProjectedToken]) -> Result<Vec<ProjectedToken>> {
    others
        .iter()
        .map(|c| {
            if c.width() != v_g.width() {
                return Err(Error::invalid(format!(
                    "residual width mismatch: {} vs {}",
                    v_g.width(),
                    c.width()
                )));
            }
            let v = v_g
                .vector
                .iter()
                .zip(&c.vector)
                .map(|(a, b)| a - b)
                .collect();
            ProjectedToken::new(v, Origin::Residual)
        })
        .collect()
}

/// `v_g - c` for every positive, negative and disease-prompt token.
pub fn compute_residuals(
    v_g: &ProjectedToken,
    positives: &[ProjectedToken],
    negatives: &[ProjectedToken],
    disease_prompt: &[ProjectedToken],
) -> Result<Residuals> {
    Ok(Residuals {
        positive: differences(v_g, positives)?,
        negative: differences(v_g, negatives)?,
        text: differences(v_g, disease_prompt)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    TextResidual,
    NegativeResidual,
    PositiveResidual,
    InstructionPrefix,
    QueryTokens,
    InstructionSuffix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub len: usize,
}

/// Segment sizes of one prompt. With no context pairs the residual segments
/// vanish entirely, disease-prompt residuals included.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptLayout {
    pub disease_tokens: usize,
    pub pairs: usize,
    pub prefix: usize,
    pub query: usize,
    pub suffix: usize,
}

impl PromptLayout {
    /// Number of `R_t` rows actually emitted per occurrence.
    pub fn text_residuals(&self) -> usize {
        if self.pairs == 0 {
            0
        } else {
            self.disease_tokens
        }
    }

    pub fn total_len(&self) -> usize {
        3 * self.text_residuals() + 2 * self.pairs + self.prefix + self.query + self.suffix
    }

    /// Nonempty segments in prompt order.
    pub fn segments(&self) -> Vec<Segment> {
        use SegmentKind::*;
        let p = self.text_residuals();
        let n = self.pairs;
        let sizes = [
            (TextResidual, p),
            (NegativeResidual, n),
            (TextResidual, p),
            (PositiveResidual, n),
            (TextResidual, p),
            (InstructionPrefix, self.prefix),
            (QueryTokens, self.query),
            (InstructionSuffix, self.suffix),
        ];
        let mut start = 0;
        let mut out = Vec::new();
        for (kind, len) in sizes {
            if len > 0 {
                out.push(Segment { kind, start, len });
                start += len;
            }
        }
        out
    }
}

/// Prompt embeddings with their segment map.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualPrompt {
    /// `S x E`.
    pub embeddings: Tensor,
    pub segments: Vec<Segment>,
}

impl ResidualPrompt {
    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }
}

fn rows_of(tokens: &[ProjectedToken]) -> Vec<Vec<f64>> {
    tokens.iter().map(|t| t.vector.clone()).collect()
}

/// Concatenate residuals, instruction halves (`|T| x E` each) and the
/// projected query tokens in the fixed prompt order.
pub fn assemble_prompt(
    residuals: &Residuals,
    prefix: &Tensor,
    v_s: &TokenSequence,
    suffix: &Tensor,
) -> Result<ResidualPrompt> {
    if v_s.is_empty() {
        return Err(Error::invalid("query token sequence is empty"));
    }
    if v_s.stage != FeatureStage::Projected {
        return Err(Error::Stage(
            "query tokens must be projected before assembly".into(),
        ));
    }
    if residuals.positive.len() != residuals.negative.len() {
        return Err(Error::invalid(
            "positive and negative residual counts differ",
        ));
    }
    let width = v_s.tokens.cols();
    let layout = PromptLayout {
        disease_tokens: residuals.text.len(),
        pairs: residuals.positive.len(),
        prefix: prefix.rows(),
        query: v_s.len(),
        suffix: suffix.rows(),
    };
    let text = rows_of(&residuals.text);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(layout.total_len());
    for seg in layout.segments() {
        match seg.kind {
            SegmentKind::TextResidual => rows.extend(text.iter().cloned()),
            SegmentKind::NegativeResidual => rows.extend(rows_of(&residuals.negative)),
            SegmentKind::PositiveResidual => rows.extend(rows_of(&residuals.positive)),
            SegmentKind::InstructionPrefix => {
                rows.extend((0..prefix.rows()).map(|r| prefix.row(r).to_vec()))
            }
            SegmentKind::QueryTokens => {
                rows.extend((0..v_s.len()).map(|r| v_s.tokens.row(r).to_vec()))
            }
            SegmentKind::InstructionSuffix => {
                rows.extend((0..suffix.rows()).map(|r| suffix.row(r).to_vec()))
            }
        }
    }
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::invalid("prompt segments have different widths"));
    }
    Ok(ResidualPrompt {
        embeddings: Tensor::from_rows(&rows)?,
        segments: layout.segments(),
    })
}

/// Graph-level counterparts used during training.
pub mod graph {
    use super::*;

    /// `v_g - row` for every row of `rows` (`k x E`); `v_g` is `1 x E`.
    pub fn residual_rows(ctx: &mut Ctx, v_g: Var, rows: Var) -> Result<Var> {
        let neg = ctx.g.scale(rows, -1.0);
        ctx.g.add_row(neg, v_g)
    }

    /// Prompt embeddings from graph nodes. `pairs` is `None` when context is
    /// disabled; otherwise it holds `(R_t, R_v-, R_v+)`.
    pub fn assemble(
        ctx: &mut Ctx,
        pairs: Option<(Var, Var, Var)>,
        prefix: Var,
        v_s: Var,
        suffix: Var,
    ) -> Result<Var> {
        let mut parts = Vec::with_capacity(8);
        if let Some((text, neg, pos)) = pairs {
            parts.extend([text, neg, text, pos, text]);
        }
        parts.extend([prefix, v_s, suffix]);
        ctx.g.concat_rows(&parts)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub context: String,
    pub instruction: String,
    pub task: String,
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<()> {
        let count = |s: &str, pat: &str| s.matches(pat).count();
        let ok = count(&self.context, "{R_t}") == 3
            && count(&self.context, "{R_v-}") == 1
            && count(&self.context, "{R_v+}") == 1
            && count(&self.instruction, "{v_s}") == 1
            && count(&self.instruction, "{T}") == 1
            && count(&self.context, "{v_s}") == 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "template needs three {R_t}, one {R_v-}, one {R_v+} in context and one {v_s}, one {T} in instruction"
                    .into(),
            ))
        }
    }

    fn full_text(&self) -> String {
        format!("{}{}", self.context, self.instruction).replace("{T}", &self.task)
    }

    /// Human-readable form with visual slots shown as `V_G`/`V_S`.
    pub fn render(&self) -> String {
        self.full_text()
            .replace("{R_t}", "")
            .replace("{R_v-}", "V_G")
            .replace("{R_v+}", "V_G")
            .replace("{v_s}", "V_S")
    }

    /// Literal text before and after the query-token slot.
    pub fn instruction_halves(&self) -> (String, String) {
        let text = self
            .full_text()
            .replace("{R_t}", "")
            .replace("{R_v-}", "")
            .replace("{R_v+}", "");
        let (pre, post) = text.split_once("{v_s}").expect("validated template");
        (pre.to_string(), post.to_string())
    }

    /// Instruction halves when context is disabled: only the instruction part.
    pub fn instruction_halves_without_context(&self) -> (String, String) {
        let text = self.instruction.replace("{T}", &self.task);
        let (pre, post) = text.split_once("{v_s}").expect("validated template");
        (pre.to_string(), post.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub default: String,
    pub templates: IndexMap<String, PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN_TEMPLATES).expect("bundled templates are valid")
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let set: TemplateSet = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        for (name, t) in &set.templates {
            t.validate()
                .map_err(|e| Error::Config(format!("template `{name}`: {e}")))?;
        }
        if !set.templates.contains_key(&set.default) {
            return Err(Error::Config(format!(
                "default template `{}` is not defined",
                set.default
            )));
        }
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn get(&self, name: &str) -> Result<&PromptTemplate> {
        self.templates
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown template `{name}`")))
    }

    pub fn default_template(&self) -> &PromptTemplate {
        &self.templates[&self.default]
    }
}

//! The detector: a four-stage strided CNN with optional DFE blocks, the
//! content/style split and style mixing at one injection stage, a binary head
//! over pooled content plus the style embedding, and an optional domain head
//! behind gradient reversal.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::dda::{self, AffineGenerator, MixPlan, StyleMlp, StyleSource};
use crate::dfe::DfeBlock;
use crate::domain_head::{self, DomainHead};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv, Linear, Session};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::style_bank::{instance_stats, StyleBank, StyleStats};
use crate::tensor::Tensor;

/// Class ids of the style bank and the per-class affine generators: the
/// authenticity label, so real and fake styles never mix.
pub const BANK_CLASSES: [u32; 2] = [0, 1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub widths: Vec<usize>,
    /// Style diversification at the injection stage.
    pub dda: bool,
    /// DFE after stage `i` when `dfe[i]`.
    pub dfe: Vec<bool>,
    /// Domain discriminator behind gradient reversal.
    pub domain_head: bool,
    /// 1-based stage whose output is split into content and style.
    pub injection_stage: usize,
    pub embed_dim: usize,
    pub domains: usize,
    pub experts: usize,
    /// Basis styles per bank class.
    pub style_count: usize,
    /// One affine generator for all bank classes instead of one per class.
    pub shared_generator: bool,
    pub p_div: f64,
    pub disc_hidden: usize,
    pub eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            widths: vec![16, 32, 64, 128],
            dda: true,
            dfe: vec![true; 4],
            domain_head: true,
            injection_stage: 3,
            embed_dim: 64,
            domains: 3,
            experts: 4,
            style_count: 8,
            shared_generator: false,
            p_div: 0.5,
            disc_hidden: 64,
            eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.widths.len() != 4 {
            problems.push(format!("widths must list 4 stages, got {}", self.widths.len()));
        }
        if let Some(w) = self.widths.iter().find(|w| **w < 2 || **w % 2 != 0) {
            problems.push(format!("widths: stage width {w} must be even and ≥ 2"));
        }
        if self.dfe.len() != self.widths.len() {
            problems.push(format!("dfe lists {} stages, widths {}", self.dfe.len(), self.widths.len()));
        }
        if !(1..=self.widths.len()).contains(&self.injection_stage) {
            problems.push(format!("injection_stage {} not in 1..={}", self.injection_stage, self.widths.len()));
        }
        if self.image_size < 16 || self.image_size % 16 != 0 {
            problems.push(format!("image_size {} must be a positive multiple of 16", self.image_size));
        }
        if self.domain_head && self.domains < 2 {
            problems.push(format!("domain head needs ≥ 2 domains, got {}", self.domains));
        }
        if self.experts < 2 {
            problems.push(format!("experts must be ≥ 2, got {}", self.experts));
        }
        if self.style_count == 0 {
            problems.push("style_count must be ≥ 1".into());
        }
        if !(0.0..=1.0).contains(&self.p_div) {
            problems.push(format!("p_div {} outside [0, 1]", self.p_div));
        }
        if self.embed_dim == 0 || self.disc_hidden == 0 {
            problems.push("embed_dim and disc_hidden must be positive".into());
        }
        if !(self.eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            problems.push("eps must be positive and bn_momentum in [0, 1]".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn any_dfe(&self) -> bool {
        self.dfe.iter().any(|d| *d)
    }
}

struct Stage {
    conv: Conv,
    bn: BatchNorm,
    dfe: Option<DfeBlock>,
}

pub struct Model {
    pub config: ModelConfig,
    stages: Vec<Stage>,
    style_mlp: Option<StyleMlp>,
    generator: Option<AffineGenerator>,
    head: Linear,
    head_style: Option<Linear>,
    disc: Option<DomainHead>,
}

/// Style mixing inputs for a training forward pass.
pub struct Mixing<'r> {
    pub bank: &'r StyleBank,
    pub rng: &'r mut Rng,
}

pub struct ForwardOptions<'r> {
    /// DFE attention temperature.
    pub temperature: f64,
    pub grl_strength: f64,
    /// Used only in training mode when style diversification is enabled.
    pub mixing: Option<Mixing<'r>>,
    /// Pre-norm injection-stage features for the style path, e.g. from a
    /// separate frozen extractor; the live ones when absent.
    pub style_features: Option<&'r Tensor>,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        ForwardOptions {
            temperature: 1.0,
            grl_strength: 1.0,
            mixing: None,
            style_features: None,
        }
    }
}

pub struct ForwardOutput {
    /// `(B, 1)`.
    pub logits: Var,
    /// `(B, N)` when the domain head is enabled.
    pub domain_logits: Option<Var>,
    /// Pooled final content features `(B, C₄)`.
    pub pooled: Var,
    /// Style embedding `(B, embed_dim)` when diversification is enabled.
    pub style: Option<Var>,
    /// Pre-norm injection-stage features the style path read.
    pub style_features: Option<Var>,
    pub plan: Option<MixPlan>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::new();
        let mut in_ch = 3;
        for (i, &w) in config.widths.iter().enumerate() {
            let n = i + 1;
            stages.push(Stage {
                conv: Conv::new(format!("stage{n}.conv"), in_ch, w, 3, 2),
                bn: BatchNorm::new(format!("stage{n}.bn"), w, config.eps),
                dfe: if config.dfe[i] {
                    Some(DfeBlock::new(&format!("stage{n}.dfe"), w, config.experts, config.eps)?)
                } else {
                    None
                },
            });
            in_ch = w;
        }
        let inj_width = config.widths[config.injection_stage - 1];
        let last = *config.widths.last().unwrap();
        let (style_mlp, generator, head_style) = if config.dda {
            (
                Some(StyleMlp::new("dda.mlp", inj_width, config.embed_dim)),
                Some(AffineGenerator::new(
                    "dda.gen",
                    StyleSource::BankStats,
                    2 * inj_width,
                    inj_width,
                    &BANK_CLASSES,
                )?
                .with_shared(config.shared_generator)),
                Some(Linear::new("head_style", config.embed_dim, 1).without_bias()),
            )
        } else {
            (None, None, None)
        };
        let disc = if config.domain_head {
            Some(DomainHead::new("disc", last, config.disc_hidden, config.domains)?)
        } else {
            None
        };
        Ok(Model {
            head: Linear::new("head", last, 1),
            config,
            stages,
            style_mlp,
            generator,
            head_style,
            disc,
        })
    }

    /// Creates every missing parameter. Each parameter draws from its own
    /// named stream, so enabling a component never perturbs the others.
    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        for st in &self.stages {
            st.conv.init(store, seed);
            st.bn.init(store, seed);
            if let Some(d) = &st.dfe {
                d.init(store, seed);
            }
        }
        if let Some(m) = &self.style_mlp {
            m.init(store, seed);
        }
        if let Some(g) = &self.generator {
            g.init(store, seed);
        }
        self.head.init(store, seed);
        if let Some(h) = &self.head_style {
            h.init(store, seed);
        }
        if let Some(d) = &self.disc {
            d.init(store, seed);
        }
    }

    pub fn init_store(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        self.init(&mut store, seed);
        store
    }

    pub fn injection_width(&self) -> usize {
        self.config.widths[self.config.injection_stage - 1]
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        let sz = self.config.image_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != sz || shape[3] != sz {
            return Err(Error::Shape(format!("model expects (B, 3, {sz}, {sz}) images, got {shape:?}")));
        }
        Ok(())
    }

    /// Runs stages `1..=upto`; at the injection stage returns the content
    /// features before mixing along with the raw pre-norm features.
    fn stages_until(
        &self,
        s: &mut Session,
        images: Var,
        upto: usize,
        temperature: f64,
        mut at_injection: impl FnMut(&mut Session, Var, Var) -> Result<Var>,
    ) -> Result<Var> {
        let mut x = images;
        for (i, st) in self.stages.iter().enumerate().take(upto) {
            let raw = st.conv.forward(s, x);
            let mut h = st.bn.forward(s, raw);
            if i + 1 == self.config.injection_stage {
                h = at_injection(s, raw, h)?;
            }
            h = s.graph.relu(h);
            if let Some(d) = &st.dfe {
                let r = d.forward(s, h, temperature)?;
                h = s.graph.add(h, r);
            }
            x = h;
        }
        Ok(x)
    }

    /// `classes` are the bank classes (authenticity labels) of the rows; they
    /// are only consulted when styles are mixed.
    pub fn forward(&self, s: &mut Session, images: Var, classes: &[u32], opts: ForwardOptions) -> Result<ForwardOutput> {
        let shape = s.graph.shape(images).to_vec();
        self.check_images(&shape)?;
        if classes.len() != shape[0] {
            return Err(Error::Shape(format!("{} classes for batch {}", classes.len(), shape[0])));
        }
        let ForwardOptions {
            temperature,
            grl_strength,
            mut mixing,
            style_features,
        } = opts;
        let mut style = None;
        let mut style_source = None;
        let mut plan = None;
        let x = self.stages_until(s, images, self.stages.len(), temperature, |s, raw, content| {
            let (Some(mlp), Some(generator)) = (&self.style_mlp, &self.generator) else {
                return Ok(content);
            };
            // The style path reads the extractor with its gradient stopped.
            let frozen = match style_features {
                Some(t) if t.shape() != s.graph.shape(raw) => {
                    return Err(Error::Shape(format!(
                        "style features {:?}, injection stage produces {:?}",
                        t.shape(),
                        s.graph.shape(raw)
                    )))
                }
                Some(t) => s.constant(t.clone()),
                None => s.graph.detach(raw),
            };
            style_source = Some(frozen);
            style = Some(mlp.style_embed(s, frozen)?);
            match (s.train, mixing.as_mut()) {
                (true, Some(m)) => {
                    let (out, p) =
                        dda::mix_or_pass(s, generator, content, m.bank, classes, self.config.p_div, m.rng, self.config.eps)?;
                    plan = Some(p);
                    Ok(out)
                }
                _ => Ok(content),
            }
        })?;
        let pooled = s.graph.gap(x);
        let mut logits = self.head.forward(s, pooled);
        if let (Some(hs), Some(fs)) = (&self.head_style, style) {
            let extra = hs.forward(s, fs);
            logits = s.graph.add(logits, extra);
        }
        let domain_logits = match &self.disc {
            Some(d) => {
                let reversed = domain_head::grl(s, pooled, grl_strength)?;
                Some(d.discriminate(s, reversed)?)
            }
            None => None,
        };
        Ok(ForwardOutput {
            logits,
            domain_logits,
            pooled,
            style,
            style_features: style_source,
            plan,
        })
    }

    /// Eval-mode instance statistics of the content features at the injection
    /// stage, one entry per image; these populate the style bank.
    pub fn content_stats(&self, store: &ParamStore, images: &Tensor, temperature: f64) -> Result<Vec<StyleStats>> {
        self.check_images(images.shape())?;
        let mut s = Session::new(store, false);
        let x = s.constant(images.clone());
        let mut captured = None;
        self.stages_until(&mut s, x, self.config.injection_stage, temperature, |_, _, content| {
            captured = Some(content);
            Ok(content)
        })?;
        instance_stats(s.value(captured.unwrap()), self.config.eps)
    }

    /// Sigmoid scores in evaluation mode.
    pub fn predict(&self, store: &ParamStore, images: &Tensor) -> Result<Vec<f64>> {
        let b = images.shape().first().copied().unwrap_or(0);
        let mut s = Session::new(store, false);
        let x = s.constant(images.clone());
        let out = self.forward(&mut s, x, &vec![0; b], ForwardOptions::default())?;
        Ok(domain_head::probabilities(s.value(out.logits)))
    }

    /// Copies matching backbone parameters (`stage*`) from externally
    /// supplied weights; returns how many were copied.
    pub fn import_backbone(&self, store: &mut ParamStore, weights: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for (name, value) in weights.params() {
            if !name.starts_with("stage") || !store.contains(name) {
                continue;
            }
            if store.get(name).shape() != value.shape() {
                return Err(Error::ConfigMismatch {
                    field: name.clone(),
                    detail: format!("shape {:?} vs {:?}", value.shape(), store.get(name).shape()),
                });
            }
            store.set(name, value.clone());
            copied += 1;
        }
        Ok(copied)
    }
}

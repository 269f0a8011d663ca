//! Diversity domain-aware module: a style embedding path (GAP then MLP), AdaIN,
//! and per-class affine generators that re-stylize content features with
//! styles drawn from a [`StyleBank`].

use std::collections::BTreeMap;

use crate::autograd::{NormAxes, Var};
use crate::error::{Error, Result};
use crate::layers::{Linear, Session};
use crate::params::{Init, ParamStore};
use crate::style_bank::{aggregate_style, instance_stats, sample_weights, StyleBank, StyleStats};
use crate::tensor::Tensor;

/// Per-channel affine parameters for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl AffineParams {
    pub fn new(gamma: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(Error::Shape(format!(
                "gamma has {} channels, beta {}",
                gamma.len(),
                beta.len()
            )));
        }
        Ok(AffineParams { gamma, beta })
    }

    /// `gamma = std`, `beta = mean`: re-applies a style verbatim.
    pub fn from_style(style: &StyleStats) -> Self {
        AffineParams {
            gamma: style.std.clone(),
            beta: style.mean.clone(),
        }
    }
}

/// Two-layer squeeze MLP over globally pooled features:
/// `Linear(C → C/2) → ReLU → Linear(C/2 → embed_dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleMlp {
    pub channels: usize,
    pub embed_dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl StyleMlp {
    pub fn new(prefix: &str, channels: usize, embed_dim: usize) -> Self {
        let hidden = (channels / 2).max(1);
        StyleMlp {
            channels,
            embed_dim,
            fc1: Linear::new(format!("{prefix}.fc1"), channels, hidden),
            fc2: Linear::new(format!("{prefix}.fc2"), hidden, embed_dim),
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        self.fc1.init(store, seed);
        self.fc2.init(store, seed);
    }

    /// `F_s = MLP(GAP(S))`, shape `(B, embed_dim)`.
    pub fn style_embed(&self, s: &mut Session, features: Var) -> Result<Var> {
        let shape = s.graph.shape(features).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::Shape(format!(
                "style MLP expects {} channels, got shape {:?}",
                self.channels, shape
            )));
        }
        let pooled = s.graph.gap(features);
        let h = self.fc1.forward(s, pooled);
        let h = s.graph.relu(h);
        Ok(self.fc2.forward(s, h))
    }
}

/// `gamma · (A − μ(A)) / σ(A) + beta` with instance statistics of `A`.
/// `gamma`, `beta`: `(B, C)`.
pub fn adain(s: &mut Session, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let shape = s.graph.shape(a).to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("adain input must be rank 4, got {shape:?}")));
    }
    let want = [shape[0], shape[1]];
    for (name, v) in [("gamma", gamma), ("beta", beta)] {
        if s.graph.shape(v) != want {
            return Err(Error::Shape(format!(
                "adain {name} has shape {:?}, expected {:?}",
                s.graph.shape(v),
                want
            )));
        }
    }
    let (normalized, _) = s.graph.normalize(a, NormAxes::Instance, eps);
    Ok(s.graph.sample_channel_affine(normalized, gamma, beta))
}

/// Tensor-level AdaIN; `params` holds one entry per batch row or a single
/// entry shared by all rows.
pub fn adain_tensor(a: &Tensor, params: &[AffineParams], eps: f64) -> Result<Tensor> {
    if a.rank() != 4 {
        return Err(Error::Shape(format!("adain input must be rank 4, got {:?}", a.shape())));
    }
    let (b, c, _, _) = a.dims4();
    if params.len() != b && params.len() != 1 {
        return Err(Error::Shape(format!("{} affine entries for batch {b}", params.len())));
    }
    if let Some(p) = params.iter().find(|p| p.gamma.len() != c || p.beta.len() != c) {
        return Err(Error::Shape(format!(
            "affine params cover {} channels, input has {c}",
            p.gamma.len()
        )));
    }
    let pick = |i: usize| if params.len() == 1 { &params[0] } else { &params[i] };
    let gamma: Vec<f64> = (0..b).flat_map(|i| pick(i).gamma.clone()).collect();
    let beta: Vec<f64> = (0..b).flat_map(|i| pick(i).beta.clone()).collect();
    let store = ParamStore::new();
    let mut s = Session::new(&store, false);
    let av = s.constant(a.clone());
    let g = s.constant(Tensor::from_vec(&[b, c], gamma)?);
    let bt = s.constant(Tensor::from_vec(&[b, c], beta)?);
    let out = adain(&mut s, av, g, bt, eps)?;
    Ok(s.value(out).clone())
}

/// What the affine generators are fed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StyleSource {
    /// Aggregated bank statistics `μ ∥ σ` (input width `2·channels`).
    BankStats,
    /// The live style embedding `F_s` (input width `embed_dim`).
    Embedding,
}

/// Learned per-class maps from a style representation to `(gamma, beta)`.
/// With `shared` set, every class uses one parameter set named `{prefix}.shared`.
///
/// With [`StyleSource::BankStats`] the maps start as the projections
/// `gamma = σ`, `beta = μ`; with [`StyleSource::Embedding`] they start at
/// `gamma = 1`, `beta = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineGenerator {
    pub prefix: String,
    pub source: StyleSource,
    pub in_dim: usize,
    pub channels: usize,
    pub classes: Vec<u32>,
    pub shared: bool,
}

impl AffineGenerator {
    pub fn new(prefix: &str, source: StyleSource, in_dim: usize, channels: usize, classes: &[u32]) -> Result<Self> {
        if source == StyleSource::BankStats && in_dim != 2 * channels {
            return Err(Error::Shape(format!(
                "bank-stat generator needs input width {}, got {in_dim}",
                2 * channels
            )));
        }
        Ok(AffineGenerator {
            prefix: prefix.to_string(),
            source,
            in_dim,
            channels,
            classes: classes.to_vec(),
            shared: false,
        })
    }

    pub fn with_shared(mut self, shared: bool) -> Self {
        self.shared = shared;
        self
    }

    fn keys(&self) -> Vec<String> {
        if self.shared {
            vec!["shared".into()]
        } else {
            self.classes.iter().map(u32::to_string).collect()
        }
    }

    fn name(&self, key: &str, part: &str) -> String {
        format!("{}.{key}.{part}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let (c, d) = (self.channels, self.in_dim);
        for key in self.keys() {
            let (gw, bw, gb) = match self.source {
                StyleSource::BankStats => {
                    let mut gw = vec![0.0; c * d];
                    let mut bw = vec![0.0; c * d];
                    for i in 0..c {
                        gw[i * d + c + i] = 1.0;
                        bw[i * d + i] = 1.0;
                    }
                    (gw, bw, 0.0)
                }
                StyleSource::Embedding => (vec![0.0; c * d], vec![0.0; c * d], 1.0),
            };
            store.ensure(seed, &self.name(&key, "gamma.w"), &[c, d], Init::Values(gw));
            store.ensure(seed, &self.name(&key, "gamma.b"), &[c], Init::Constant(gb));
            store.ensure(seed, &self.name(&key, "beta.w"), &[c, d], Init::Values(bw));
            store.ensure(seed, &self.name(&key, "beta.b"), &[c], Init::Constant(0.0));
        }
    }

    /// `(gamma, beta)`, each `(B, channels)`, using row `i`'s class `classes[i]`.
    pub fn generate(&self, s: &mut Session, style: Var, classes: &[u32]) -> Result<(Var, Var)> {
        let shape = s.graph.shape(style).to_vec();
        if shape.len() != 2 || shape[1] != self.in_dim || shape[0] != classes.len() {
            return Err(Error::Shape(format!(
                "generator expects ({}, {}), got {:?}",
                classes.len(),
                self.in_dim,
                shape
            )));
        }
        let mut slot = Vec::with_capacity(classes.len());
        for c in classes {
            let idx = self
                .classes
                .iter()
                .position(|k| k == c)
                .ok_or(Error::UnknownClass(*c))?;
            slot.push(if self.shared { 0 } else { idx });
        }
        let (mut gammas, mut betas) = (Vec::new(), Vec::new());
        for key in self.keys() {
            let gw = s.param(&self.name(&key, "gamma.w"));
            let gb = s.param(&self.name(&key, "gamma.b"));
            let bw = s.param(&self.name(&key, "beta.w"));
            let bb = s.param(&self.name(&key, "beta.b"));
            gammas.push(s.graph.linear(style, gw, Some(gb)));
            betas.push(s.graph.linear(style, bw, Some(bb)));
        }
        let gamma = s.graph.gather_rows(&gammas, &slot);
        let beta = s.graph.gather_rows(&betas, &slot);
        Ok((gamma, beta))
    }
}

/// `X_ds = γⁿ(style) · (F_c − μ(F_c)) / σ(F_c) + βⁿ(style)`.
pub fn diversify(
    s: &mut Session,
    generator: &AffineGenerator,
    content: Var,
    style: Var,
    classes: &[u32],
    eps: f64,
) -> Result<Var> {
    let (gamma, beta) = generator.generate(s, style, classes)?;
    adain(s, content, gamma, beta, eps)
}

/// Stacks styles into the `(B, 2·channels)` generator input.
pub fn stats_matrix(styles: &[StyleStats]) -> Result<Tensor> {
    let ch = styles.first().map(StyleStats::channels).unwrap_or(0);
    let data: Vec<f64> = styles.iter().flat_map(StyleStats::concat).collect();
    Tensor::from_vec(&[styles.len(), 2 * ch], data)
}

/// Which rows were re-stylized, and with which aggregated style.
#[derive(Clone, Debug, PartialEq)]
pub struct MixPlan {
    pub styles: Vec<Option<StyleStats>>,
}

impl MixPlan {
    pub fn stylized(&self) -> usize {
        self.styles.iter().filter(|s| s.is_some()).count()
    }

    /// Draws the plan: per row one uniform for the coin, then a Dirichlet
    /// weight vector only when the coin lands on "stylize".
    pub fn draw(bank: &StyleBank, classes: &[u32], p_div: f64, rng: &mut impl rand::Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_div) {
            return Err(Error::InvalidArgument(format!("p_div {p_div} outside [0, 1]")));
        }
        let mut styles = Vec::with_capacity(classes.len());
        for &class in classes {
            let coin: f64 = rng.random();
            if coin < p_div {
                let w = sample_weights(bank.style_count(), rng)?;
                styles.push(Some(aggregate_style(bank, class, &w)?));
            } else {
                styles.push(None);
            }
        }
        Ok(MixPlan { styles })
    }
}

/// Replaces the rows selected by `plan` with their diversified version and
/// passes the rest through untouched.
pub fn apply_mix(
    s: &mut Session,
    generator: &AffineGenerator,
    content: Var,
    plan: &MixPlan,
    classes: &[u32],
    eps: f64,
) -> Result<Var> {
    if plan.styles.len() != classes.len() {
        return Err(Error::Shape("mix plan and class list differ in length".into()));
    }
    if plan.stylized() == 0 {
        return Ok(content);
    }
    // Unselected rows still need a generator input; their own statistics keep it finite.
    let own = instance_stats(s.value(content), eps)?;
    let styles: Vec<StyleStats> = plan
        .styles
        .iter()
        .zip(own)
        .map(|(p, o)| p.clone().unwrap_or(o))
        .collect();
    let style = s.constant(stats_matrix(&styles)?);
    let stylized = diversify(s, generator, content, style, classes, eps)?;
    let choice: Vec<usize> = plan.styles.iter().map(|p| p.is_some() as usize).collect();
    Ok(s.graph.gather_rows(&[content, stylized], &choice))
}

/// Draws a plan and applies it.
#[allow(clippy::too_many_arguments)]
pub fn mix_or_pass(
    s: &mut Session,
    generator: &AffineGenerator,
    content: Var,
    bank: &StyleBank,
    classes: &[u32],
    p_div: f64,
    rng: &mut impl rand::Rng,
    eps: f64,
) -> Result<(Var, MixPlan)> {
    let plan = MixPlan::draw(bank, classes, p_div, rng)?;
    let out = apply_mix(s, generator, content, &plan, classes, eps)?;
    Ok((out, plan))
}

/// Groups instance statistics by class.
pub fn group_stats(stats: Vec<StyleStats>, classes: &[u32]) -> BTreeMap<u32, Vec<StyleStats>> {
    let mut out: BTreeMap<u32, Vec<StyleStats>> = BTreeMap::new();
    for (st, c) in stats.into_iter().zip(classes) {
        out.entry(*c).or_default().push(st);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::style_bank::DEFAULT_EPS;
    use rand::{Rng as _, SeedableRng};

    fn channel_stats(t: &Tensor) -> Vec<StyleStats> {
        instance_stats(t, 0.0).unwrap()
    }

    fn random_map(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-2.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn adain_two_pixel_example() {
        let a = Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let p = AffineParams::new(vec![2.0], vec![5.0]).unwrap();
        let out = adain_tensor(&a, &[p], 0.0).unwrap();
        assert_eq!(out.data(), &[3.0, 7.0]);
    }

    #[test]
    fn adain_with_own_stats_is_identity() {
        let a = random_map(&[2, 3, 4, 4], 1);
        let params: Vec<AffineParams> = instance_stats(&a, DEFAULT_EPS)
            .unwrap()
            .iter()
            .map(AffineParams::from_style)
            .collect();
        let out = adain_tensor(&a, &params, DEFAULT_EPS).unwrap();
        for (x, y) in out.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn adain_hits_target_statistics() {
        let a = random_map(&[1, 2, 16, 16], 2);
        let p = AffineParams::new(vec![0.7, 2.5], vec![-1.0, 4.0]).unwrap();
        let out = adain_tensor(&a, &[p], DEFAULT_EPS).unwrap();
        let st = &channel_stats(&out)[0];
        assert!((st.mean[0] + 1.0).abs() < 1e-4 && (st.mean[1] - 4.0).abs() < 1e-4);
        assert!((st.std[0] - 0.7).abs() < 1e-4 && (st.std[1] - 2.5).abs() < 1e-4);
    }

    #[test]
    fn adain_rejects_length_mismatch() {
        let a = random_map(&[1, 2, 2, 2], 3);
        let p = AffineParams::new(vec![1.0], vec![0.0]).unwrap();
        assert!(adain_tensor(&a, &[p], DEFAULT_EPS).is_err());
        assert!(AffineParams::new(vec![1.0, 2.0], vec![0.0]).is_err());
    }

    #[test]
    fn style_embed_shapes_and_zero_input() {
        let mlp = StyleMlp::new("style", 4, 6);
        let mut store = ParamStore::new();
        mlp.init(&mut store, 0);
        let mut s = Session::new(&store, false);
        let zeros = s.constant(Tensor::zeros(&[3, 4, 5, 7]));
        let out = mlp.style_embed(&mut s, zeros).unwrap();
        assert_eq!(s.graph.shape(out), &[3, 6]);
        assert!(s.value(out).data().iter().all(|v| *v == 0.0));
        let wrong = s.constant(Tensor::zeros(&[1, 3, 2, 2]));
        assert!(mlp.style_embed(&mut s, wrong).is_err());
    }

    #[test]
    fn gap_feeds_the_mlp_plane_mean() {
        let store = ParamStore::new();
        let mut s = Session::new(&store, false);
        let x = s.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let g = s.graph.gap(x);
        assert_eq!(s.value(g).data(), &[4.0]);
    }

    fn bank_for(channels: usize) -> StyleBank {
        let mut classes = BTreeMap::new();
        for class in 0..2u32 {
            let styles = (0..3)
                .map(|k| {
                    StyleStats::new(
                        (0..channels).map(|c| (k + c) as f64 * 0.5 - class as f64).collect(),
                        (0..channels).map(|c| 0.5 + 0.25 * ((k * c) % 3) as f64).collect(),
                    )
                    .unwrap()
                })
                .collect();
            classes.insert(class, styles);
        }
        StyleBank::from_parts(3, classes).unwrap()
    }

    fn generator(channels: usize) -> (AffineGenerator, ParamStore) {
        let g = AffineGenerator::new("gen", StyleSource::BankStats, 2 * channels, channels, &[0, 1]).unwrap();
        let mut store = ParamStore::new();
        g.init(&mut store, 0);
        (g, store)
    }

    #[test]
    fn identity_generator_reproduces_content() {
        let content = random_map(&[2, 3, 4, 4], 5);
        let (g, store) = generator(3);
        let own = instance_stats(&content, DEFAULT_EPS).unwrap();
        let mut s = Session::new(&store, false);
        let c = s.constant(content.clone());
        let style = s.constant(stats_matrix(&own).unwrap());
        let out = diversify(&mut s, &g, c, style, &[0, 1], DEFAULT_EPS).unwrap();
        assert_eq!(s.graph.shape(out), content.shape());
        for (x, y) in s.value(out).data().iter().zip(content.data()) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!(matches!(
            diversify(&mut s, &g, c, style, &[0, 9], DEFAULT_EPS),
            Err(Error::UnknownClass(9))
        ));
    }

    #[test]
    fn mix_extremes_and_determinism() {
        let content = random_map(&[4, 3, 8, 8], 6);
        let (g, store) = generator(3);
        let bank = bank_for(3);
        let classes = [0, 1, 1, 0];
        let run = |p: f64, seed: u64| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut s = Session::new(&store, true);
            let c = s.constant(content.clone());
            let (out, plan) = mix_or_pass(&mut s, &g, c, &bank, &classes, p, &mut rng, DEFAULT_EPS).unwrap();
            (s.value(out).clone(), plan)
        };
        let (out, plan) = run(0.0, 1);
        assert_eq!(out, content);
        assert_eq!(plan.stylized(), 0);
        let (out, plan) = run(1.0, 1);
        assert_eq!(plan.stylized(), 4);
        for i in 0..4 {
            assert_ne!(out.row(i), content.row(i));
        }
        assert_eq!(run(0.5, 9), run(0.5, 9));
    }

    #[test]
    fn independent_draws_change_statistics() {
        let content = random_map(&[1, 3, 8, 8], 7);
        let (g, store) = generator(3);
        let bank = bank_for(3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut means = Vec::new();
        for _ in 0..2 {
            let mut s = Session::new(&store, true);
            let c = s.constant(content.clone());
            let (out, _) = mix_or_pass(&mut s, &g, c, &bank, &[1], 1.0, &mut rng, DEFAULT_EPS).unwrap();
            means.push(channel_stats(s.value(out))[0].mean.clone());
        }
        assert!(means[0].iter().zip(&means[1]).any(|(a, b)| (a - b).abs() > 1e-8));
    }
}

//! Per-class style representation space.
//!
//! Instance statistics of feature maps are embedded as `(mean ∥ std)`
//! vectors; greedy farthest-point sampling picks `C` basis styles per class,
//! and Dirichlet-weighted convex combinations of those bases yield new styles.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

const BANK_MAGIC: &[u8; 8] = b"SDIFBANK";
const BANK_VERSION: u32 = 1;

/// Channel-wise mean and (stabilized) standard deviation of one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StyleStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::Shape(format!(
                "style mean has {} channels, std has {}",
                mean.len(),
                std.len()
            )));
        }
        if let Some(s) = std.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::InvalidArgument(format!("style std must be positive, got {s}")));
        }
        Ok(StyleStats { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn to_vector(&self) -> StyleVector {
        StyleVector(self.concat())
    }

    /// `mean ∥ std`.
    pub fn concat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.mean.len());
        v.extend_from_slice(&self.mean);
        v.extend_from_slice(&self.std);
        v
    }
}

/// A style as a point in `R^(2·channels)`; the space FPS runs in.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleVector(pub Vec<f64>);

impl AsRef<[f64]> for StyleVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Per-row, per-channel spatial mean and `sqrt(var + eps)`.
pub fn instance_stats(fm: &Tensor, eps: f64) -> Result<Vec<StyleStats>> {
    if fm.rank() != 4 {
        return Err(Error::Shape(format!("expected (B, C, H, W), got {:?}", fm.shape())));
    }
    let (b, c, h, w) = fm.dims4();
    let plane = h * w;
    if plane == 0 {
        return Err(Error::Shape("feature map has empty spatial extent".into()));
    }
    let data = fm.data();
    (0..b)
        .map(|bi| {
            let row = &data[bi * c * plane..(bi + 1) * c * plane];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index: bi });
            }
            let (mut mean, mut std) = (Vec::with_capacity(c), Vec::with_capacity(c));
            for p in row.chunks(plane) {
                let m = p.iter().sum::<f64>() / plane as f64;
                let var = p.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / plane as f64;
                mean.push(m);
                std.push((var + eps).sqrt());
            }
            Ok(StyleStats { mean, std })
        })
        .collect()
}

pub fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy farthest-point sampling under squared Euclidean distance.
///
/// The first pick is the point farthest from the centroid; each later pick
/// maximizes the distance to its nearest already-selected point. Ties go to
/// the lowest index.
pub fn fps_select<P: AsRef<[f64]>>(points: &[P], count: usize) -> Result<Vec<usize>> {
    if count > points.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {count} points from {}",
            points.len()
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let dim = points[0].as_ref().len();
    if points.iter().any(|p| p.as_ref().len() != dim) {
        return Err(Error::Shape("fps points have differing dimensions".into()));
    }
    if points.iter().any(|p| p.as_ref().iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidArgument("fps points must be finite".into()));
    }
    let mut centroid = vec![0.0; dim];
    for p in points {
        for (c, v) in centroid.iter_mut().zip(p.as_ref()) {
            *c += v;
        }
    }
    centroid.iter_mut().for_each(|c| *c /= points.len() as f64);

    let argmax = |scores: &[f64], skip: &[bool]| -> usize {
        let mut best = usize::MAX;
        for (i, &s) in scores.iter().enumerate() {
            if skip[i] {
                continue;
            }
            if best == usize::MAX || s > scores[best] {
                best = i;
            }
        }
        best
    };

    let mut selected = vec![false; points.len()];
    let from_centroid: Vec<f64> = points
        .iter()
        .map(|p| squared_euclidean(p.as_ref(), &centroid))
        .collect();
    let first = argmax(&from_centroid, &selected);
    let mut order = vec![first];
    selected[first] = true;
    let mut nearest: Vec<f64> = points
        .iter()
        .map(|p| squared_euclidean(p.as_ref(), points[first].as_ref()))
        .collect();
    while order.len() < count {
        let next = argmax(&nearest, &selected);
        order.push(next);
        selected[next] = true;
        for (i, p) in points.iter().enumerate() {
            let d = squared_euclidean(p.as_ref(), points[next].as_ref());
            if d < nearest[i] {
                nearest[i] = d;
            }
        }
    }
    Ok(order)
}

/// `C` basis styles per class.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleBank {
    style_count: usize,
    channels: usize,
    classes: BTreeMap<u32, Vec<StyleStats>>,
}

impl StyleBank {
    pub fn from_parts(style_count: usize, classes: BTreeMap<u32, Vec<StyleStats>>) -> Result<Self> {
        if style_count == 0 {
            return Err(Error::InvalidArgument("style count must be positive".into()));
        }
        let channels = classes
            .values()
            .flat_map(|v| v.first())
            .map(StyleStats::channels)
            .next()
            .unwrap_or(0);
        for (class, styles) in &classes {
            if styles.len() != style_count {
                return Err(Error::InvalidArgument(format!(
                    "class {class} has {} basis styles, expected {style_count}",
                    styles.len()
                )));
            }
            if styles.iter().any(|s| s.channels() != channels) {
                return Err(Error::Shape(format!("class {class} mixes channel counts")));
            }
        }
        Ok(StyleBank {
            style_count,
            channels,
            classes,
        })
    }

    pub fn style_count(&self) -> usize {
        self.style_count
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.classes.keys().copied()
    }

    pub fn basis(&self, class: u32) -> Result<&[StyleStats]> {
        self.classes
            .get(&class)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownClass(class))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(BANK_MAGIC)?;
        w.write_all(&BANK_VERSION.to_le_bytes())?;
        for v in [self.classes.len(), self.style_count, self.channels] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for (class, styles) in &self.classes {
            w.write_all(&class.to_le_bytes())?;
            for s in styles {
                for v in s.mean.iter().chain(&s.std) {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != BANK_MAGIC {
            return Err(Error::Format("not a style bank file".into()));
        }
        let version = read_u32(r)?;
        if version != BANK_VERSION {
            return Err(Error::Format(format!("unsupported style bank version {version}")));
        }
        let (n, c, ch) = (read_u32(r)? as usize, read_u32(r)? as usize, read_u32(r)? as usize);
        let mut classes = BTreeMap::new();
        for _ in 0..n {
            let class = read_u32(r)?;
            let mut styles = Vec::with_capacity(c);
            for _ in 0..c {
                let mean = (0..ch).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
                let std = (0..ch).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
                styles.push(StyleStats { mean, std });
            }
            classes.insert(class, styles);
        }
        let bank = StyleBank::from_parts(c, classes)?;
        if n > 0 && bank.channels != ch {
            return Err(Error::Format("channel count disagrees with header".into()));
        }
        Ok(StyleBank { channels: ch, ..bank })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        crate::io::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Runs FPS over precomputed instance statistics, per class.
pub fn bank_from_stats(stats_by_class: &BTreeMap<u32, Vec<StyleStats>>, count: usize) -> Result<StyleBank> {
    let mut classes = BTreeMap::new();
    for (&class, stats) in stats_by_class {
        if stats.len() < count {
            return Err(Error::InsufficientSamples {
                class,
                count: stats.len(),
                needed: count,
            });
        }
        let points: Vec<StyleVector> = stats.iter().map(StyleStats::to_vector).collect();
        if points.windows(2).all(|w| w[0] == w[1]) && count > 1 {
            log::warn!("class {class}: all {} style samples are identical", points.len());
        }
        let picked = fps_select(&points, count)?;
        classes.insert(class, picked.into_iter().map(|i| stats[i].clone()).collect());
    }
    StyleBank::from_parts(count, classes)
}

/// Instance statistics of every row of every class, then per-class FPS.
pub fn build_bank(features_by_class: &BTreeMap<u32, Vec<Tensor>>, count: usize, eps: f64) -> Result<StyleBank> {
    let mut stats = BTreeMap::new();
    for (&class, maps) in features_by_class {
        let mut rows = Vec::new();
        for fm in maps {
            rows.extend(instance_stats(fm, eps)?);
        }
        stats.insert(class, rows);
    }
    bank_from_stats(&stats, count)
}

/// A draw from `Dirichlet(1/C, …, 1/C)`.
///
/// Gamma variates with shape below one underflow easily, so the draw is made
/// in log space: `ln G(α) = ln G(α + 1) + ln(U) / α`, then normalized with a
/// log-sum-exp.
pub fn sample_weights(count: usize, rng: &mut impl rand::Rng) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::InvalidArgument("style count must be at least 1".into()));
    }
    let alpha = 1.0 / count as f64;
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("valid gamma parameters");
    let logs: Vec<f64> = (0..count)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            g.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `μ = Σ_c W[c]·μ_c`, `σ = Σ_c W[c]·σ_c` over one class's basis.
pub fn aggregate_style(bank: &StyleBank, class: u32, weights: &[f64]) -> Result<StyleStats> {
    let basis = bank.basis(class)?;
    if weights.len() != basis.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} basis styles",
            weights.len(),
            basis.len()
        )));
    }
    if weights.iter().any(|w| *w < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument("weights must lie on the simplex".into()));
    }
    let ch = bank.channels();
    let (mut mean, mut std) = (vec![0.0; ch], vec![0.0; ch]);
    for (w, s) in weights.iter().zip(basis) {
        for i in 0..ch {
            mean[i] += w * s.mean[i];
            std[i] += w * s.std[i];
        }
    }
    Ok(StyleStats { mean, std })
}

/// Distances and spread of a bank, for inspection tooling.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSummary {
    pub class: u32,
    pub min_pairwise: f64,
    pub max_pairwise: f64,
    pub mean_std: f64,
}

pub fn summarize(bank: &StyleBank) -> Vec<ClassSummary> {
    bank.classes
        .iter()
        .map(|(&class, styles)| {
            let vecs: Vec<Vec<f64>> = styles.iter().map(StyleStats::concat).collect();
            let mut min = f64::INFINITY;
            let mut max: f64 = 0.0;
            for i in 0..vecs.len() {
                for j in i + 1..vecs.len() {
                    let d = squared_euclidean(&vecs[i], &vecs[j]);
                    min = min.min(d);
                    max = max.max(d);
                }
            }
            if vecs.len() < 2 {
                min = 0.0;
            }
            let all: Vec<f64> = styles.iter().flat_map(|s| s.std.iter().copied()).collect();
            ClassSummary {
                class,
                min_pairwise: min,
                max_pairwise: max,
                mean_std: all.iter().sum::<f64>() / all.len().max(1) as f64,
            }
        })
        .collect()
}

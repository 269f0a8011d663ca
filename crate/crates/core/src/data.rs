//! Synthetic multi-domain forgery data and image-folder ingestion.
//!
//! A synthetic domain is a global, low-frequency appearance recipe (hue
//! rotation, contrast, brightness, blur) applied to every image it owns. A
//! forgery is a local, high-frequency blending artifact whose recipe is the
//! same for every domain. Telling real from fake therefore requires ignoring
//! the domain's appearance and looking at the artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// One image with its authenticity label and 1-based domain id.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSample {
    /// `(3, H, W)` in `[0, 1]`.
    pub image: Tensor,
    /// 0 = real, 1 = fake.
    pub y: u8,
    pub domain: u32,
}

/// Global appearance of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainStyle {
    /// Rotation of the RGB cube around the gray axis, degrees.
    pub hue_shift: f64,
    /// Contrast gain around mid-gray.
    pub contrast_gain: f64,
    /// Additive brightness offset.
    #[serde(default)]
    pub brightness: f64,
    /// Gaussian blur standard deviation in pixels (0 disables).
    pub blur_sigma: f64,
    /// Per-image variation within the domain, in `[0, 1]`: hue moves by up
    /// to `±180°·jitter`, contrast scales by up to `2^±jitter`, brightness
    /// moves by up to `±0.2·jitter` and blur scales by up to `1 ± jitter`.
    #[serde(default)]
    pub jitter: f64,
}

/// Forgery artifact: a blended seam ring plus a faint textured patch inside it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactRecipe {
    /// Width of the blending seam, pixels at 64×64 (scaled with image size).
    pub seam_width: f64,
    /// Peak amplitude of the seam pattern, in intensity units.
    pub patch_amplitude: f64,
    /// Amplitude of the interior texture relative to the seam.
    #[serde(default = "default_interior")]
    pub interior_ratio: f64,
    /// Period of the high-frequency pattern, pixels.
    #[serde(default = "default_period")]
    pub period: f64,
}

fn default_interior() -> f64 {
    0.35
}

fn default_period() -> f64 {
    3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub domains: Vec<DomainStyle>,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    pub samples_per_domain: usize,
    pub artifact: ArtifactRecipe,
    /// Domain reserved for testing only; `None` splits every domain.
    #[serde(default)]
    pub held_out_domain: Option<u32>,
    #[serde(default = "default_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_image_size() -> usize {
    64
}

fn default_fraction() -> f64 {
    0.15
}

impl SynthSpec {
    /// `n` domains with recipes spread deterministically from `seed`; the
    /// last domain is held out.
    pub fn with_domains(n: usize, samples_per_domain: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "synth/recipes");
        let domains = (0..n)
            .map(|i| DomainStyle {
                hue_shift: (i as f64 * 360.0 / n.max(1) as f64 + r.random_range(-15.0..15.0)) % 360.0,
                contrast_gain: r.random_range(0.6..1.4),
                brightness: r.random_range(-0.1..0.1),
                blur_sigma: r.random_range(0.0..0.6),
                jitter: 0.05,
            })
            .collect();
        SynthSpec {
            domains,
            image_size: 64,
            samples_per_domain,
            artifact: ArtifactRecipe {
                seam_width: 2.0,
                patch_amplitude: 0.06,
                interior_ratio: default_interior(),
                period: default_period(),
            },
            held_out_domain: (n >= 2).then_some(n as u32),
            val_fraction: default_fraction(),
            test_fraction: default_fraction(),
            seed,
        }
    }

    /// The benchmark used for the cross-domain acceptance runs: four domains
    /// of 500 images, the fourth held out. The held-out domain varies more
    /// from image to image than the three training domains.
    pub fn reference(seed: u64) -> Self {
        SynthSpec {
            domains: vec![
                DomainStyle {
                    hue_shift: 0.0,
                    contrast_gain: 1.0,
                    brightness: 0.0,
                    blur_sigma: 0.0,
                    jitter: 0.05,
                },
                DomainStyle {
                    hue_shift: 120.0,
                    contrast_gain: 0.7,
                    brightness: 0.08,
                    blur_sigma: 0.3,
                    jitter: 0.05,
                },
                DomainStyle {
                    hue_shift: 240.0,
                    contrast_gain: 1.3,
                    brightness: -0.08,
                    blur_sigma: 0.15,
                    jitter: 0.05,
                },
                DomainStyle {
                    hue_shift: 60.0,
                    contrast_gain: 1.6,
                    brightness: 0.1,
                    blur_sigma: 0.4,
                    jitter: 0.3,
                },
            ],
            image_size: 32,
            samples_per_domain: 500,
            artifact: ArtifactRecipe {
                seam_width: 2.0,
                patch_amplitude: 0.15,
                interior_ratio: default_interior(),
                period: default_period(),
            },
            held_out_domain: Some(4),
            val_fraction: default_fraction(),
            test_fraction: default_fraction(),
            seed,
        }
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.domains.len() < 2 {
            problems.push(format!("need at least 2 domains, got {}", self.domains.len()));
        }
        if self.samples_per_domain < 2 {
            problems.push("samples_per_domain must be at least 2".to_string());
        }
        if self.image_size < 8 {
            problems.push(format!("image_size {} below 8", self.image_size));
        }
        if let Some(h) = self.held_out_domain {
            if h == 0 || h as usize > self.domains.len() {
                problems.push(format!("held_out_domain {h} not in 1..={}", self.domains.len()));
            }
        }
        for (name, f) in [("val_fraction", self.val_fraction), ("test_fraction", self.test_fraction)] {
            if !(0.0..1.0).contains(&f) {
                problems.push(format!("{name} {f} outside [0, 1)"));
            }
        }
        if self.val_fraction + self.test_fraction >= 1.0 {
            problems.push("val_fraction + test_fraction must be below 1".to_string());
        }
        for (i, d) in self.domains.iter().enumerate() {
            if !(d.contrast_gain > 0.0) || !(d.blur_sigma >= 0.0) || !(0.0..=1.0).contains(&d.jitter) {
                problems.push(format!("domain {} has an invalid recipe", i + 1));
            }
        }
        if !(self.artifact.patch_amplitude >= 0.0) || !(self.artifact.seam_width > 0.0) || !(self.artifact.period >= 2.0) {
            problems.push("artifact recipe invalid".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<DomainSample>,
    pub val: Vec<DomainSample>,
    pub test: Vec<DomainSample>,
    pub num_domains: usize,
    pub held_out: Option<u32>,
    /// Fraction of pixel values clamped into `[0, 1]` during generation.
    pub clamp_rate: f64,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[DomainSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn image_size(&self) -> Option<usize> {
        self.train
            .iter()
            .chain(&self.test)
            .next()
            .map(|s| s.image.shape()[1])
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Smooth background texture plus a simple face: skin ellipse, eyes, mouth.
fn render_base(size: usize, r: &mut rng::Rng) -> Vec<f64> {
    let s = size as f64;
    let mut img = vec![0.0; 3 * size * size];
    let bg: [f64; 3] = std::array::from_fn(|_| r.random_range(0.3..0.7));
    let waves: Vec<(usize, f64, f64, f64, f64)> = (0..6)
        .map(|i| {
            (
                i % 3,
                r.random_range(0.5..2.0),
                r.random_range(0.5..2.0),
                r.random_range(0.0..std::f64::consts::TAU),
                r.random_range(0.03..0.08),
            )
        })
        .collect();
    let cx = s * (0.5 + r.random_range(-0.06..0.06));
    let cy = s * (0.5 + r.random_range(-0.06..0.06));
    let rx = s * r.random_range(0.24..0.32);
    let ry = s * r.random_range(0.30..0.38);
    let skin = [
        r.random_range(0.65..0.85),
        r.random_range(0.5..0.65),
        r.random_range(0.4..0.55),
    ];
    let eye_dx = rx * 0.42;
    let eye_dy = -ry * 0.22;
    let eye_r = s * 0.045;
    let mouth_dy = ry * 0.45;
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let e = ((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2);
            let face = 1.0 - smoothstep(0.85, 1.0, e);
            let eyes = [-1.0, 1.0]
                .iter()
                .map(|side| {
                    let d = ((fx - cx - side * eye_dx).powi(2) + (fy - cy - eye_dy).powi(2)).sqrt();
                    1.0 - smoothstep(eye_r * 0.7, eye_r, d)
                })
                .fold(0.0, f64::max);
            let m = ((fx - cx) / (rx * 0.4)).powi(2) + ((fy - cy - mouth_dy) / (ry * 0.08)).powi(2);
            let mouth = 1.0 - smoothstep(0.7, 1.0, m);
            for c in 0..3 {
                let mut v = bg[c];
                for &(wc, fxq, fyq, ph, amp) in &waves {
                    if wc == c {
                        v += amp * (std::f64::consts::TAU * (fxq * fx + fyq * fy) / s + ph).cos();
                    }
                }
                v = v * (1.0 - face) + skin[c] * face;
                v = v * (1.0 - 0.7 * eyes) + 0.1 * 0.7 * eyes;
                v = v * (1.0 - 0.5 * mouth) + 0.3 * 0.5 * mouth;
                img[(c * size + y) * size + x] = v;
            }
        }
    }
    img
}

/// The additive forgery pattern (fake minus real, before styling) for one
/// image. Depends only on the recipe, the image size and `r`.
pub fn artifact_mask(size: usize, recipe: &ArtifactRecipe, r: &mut rng::Rng) -> Vec<f64> {
    let s = size as f64;
    let scale = s / 64.0;
    let cx = s * (0.5 + r.random_range(-0.05..0.05));
    let cy = s * (0.5 + r.random_range(-0.05..0.05));
    let rx = s * r.random_range(0.17..0.23);
    let ry = s * r.random_range(0.21..0.27);
    let phase_x = r.random_range(0.0..std::f64::consts::TAU);
    let phase_y = r.random_range(0.0..std::f64::consts::TAU);
    let tint: [f64; 3] = std::array::from_fn(|_| r.random_range(0.7..1.0));
    let seam = (recipe.seam_width * scale).max(0.75);
    let w = std::f64::consts::TAU / recipe.period;
    let mut mask = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let rho = (((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2)).sqrt();
            // distance to the blend boundary in pixels, approximately
            let dist = (rho - 1.0).abs() * rx.min(ry);
            let ring = 1.0 - smoothstep(0.0, seam, dist);
            let inside = 1.0 - smoothstep(0.95, 1.0, rho);
            let weight = ring.max(recipe.interior_ratio * inside);
            if weight == 0.0 {
                continue;
            }
            let pattern = (w * fx + phase_x).sin() * (w * fy + phase_y).sin();
            for c in 0..3 {
                mask[(c * size + y) * size + x] = recipe.patch_amplitude * weight * pattern * tint[c];
            }
        }
    }
    mask
}

fn gaussian_blur(img: &mut [f64], size: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let reflect = |i: isize| -> usize {
        let n = size as isize;
        let mut i = i;
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - i - 1;
        }
        i.clamp(0, n - 1) as usize
    };
    let mut tmp = vec![0.0; size * size];
    for plane in img.chunks_mut(size * size) {
        for y in 0..size {
            for x in 0..size {
                tmp[y * size + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * plane[y * size + reflect(x as isize + k as isize - radius)])
                    .sum();
            }
        }
        for y in 0..size {
            for x in 0..size {
                plane[y * size + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * tmp[reflect(y as isize + k as isize - radius) * size + x])
                    .sum();
            }
        }
    }
}

/// Applies a domain recipe in place and returns how many values were clamped.
fn apply_style(img: &mut [f64], size: usize, style: &DomainStyle, r: &mut rng::Rng) -> usize {
    let j = style.jitter;
    let mut u = || if j > 0.0 { r.random_range(-j..j) } else { 0.0 };
    let hue = style.hue_shift + 180.0 * u();
    let gain = style.contrast_gain * 2f64.powf(u());
    let bright = style.brightness + 0.2 * u();
    let blur = style.blur_sigma * (1.0 + u()).max(0.0);
    let theta = hue.to_radians();
    let (c, s) = (theta.cos(), theta.sin());
    let k = 1.0 / 3f64.sqrt();
    // Rodrigues rotation about the gray axis (1, 1, 1)/√3
    let cross = [[0.0, -k, k], [k, 0.0, -k], [-k, k, 0.0]];
    let mut rot = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rot[i][j] = (if i == j { c } else { 0.0 }) + s * cross[i][j] + (1.0 - c) * k * k;
        }
    }
    let plane = size * size;
    for p in 0..plane {
        let v = [img[p] - 0.5, img[plane + p] - 0.5, img[2 * plane + p] - 0.5];
        for i in 0..3 {
            let rotated: f64 = (0..3).map(|j| rot[i][j] * v[j]).sum();
            img[i * plane + p] = 0.5 + gain * rotated + bright;
        }
    }
    gaussian_blur(img, size, blur);
    let mut clamped = 0;
    for v in img.iter_mut() {
        if *v < 0.0 || *v > 1.0 {
            clamped += 1;
            *v = v.clamp(0.0, 1.0);
        }
    }
    clamped
}

/// Renders sample `index` of 1-based `domain`; even indices are real.
pub fn render_sample(spec: &SynthSpec, domain: u32, index: usize) -> (DomainSample, usize) {
    let size = spec.image_size;
    let style = &spec.domains[domain as usize - 1];
    let y = (index % 2) as u8;
    let mut base_rng = rng::stream(spec.seed, &format!("synth/base/{domain}/{index}"));
    let mut img = render_base(size, &mut base_rng);
    if y == 1 {
        let mut art_rng = rng::stream(spec.seed, &format!("synth/artifact/{domain}/{index}"));
        for (v, m) in img.iter_mut().zip(artifact_mask(size, &spec.artifact, &mut art_rng)) {
            *v += m;
        }
    }
    let mut style_rng = rng::stream(spec.seed, &format!("synth/style/{domain}/{index}"));
    let clamped = apply_style(&mut img, size, style, &mut style_rng);
    (
        DomainSample {
            image: Tensor::from_vec(&[3, size, size], img).unwrap(),
            y,
            domain,
        },
        clamped,
    )
}

/// Splits every non-held-out domain into train/val/test (shuffled per domain)
/// and sends the held-out domain entirely to test.
fn split_domains(
    by_domain: BTreeMap<u32, Vec<DomainSample>>,
    held_out: Option<u32>,
    val_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> (Vec<DomainSample>, Vec<DomainSample>, Vec<DomainSample>) {
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (domain, samples) in by_domain {
        if Some(domain) == held_out {
            test.extend(samples);
            continue;
        }
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        idx.shuffle(&mut rng::stream(seed, &format!("split/{domain}")));
        let n = samples.len();
        let n_val = (n as f64 * val_fraction).round() as usize;
        let n_test = (n as f64 * test_fraction).round() as usize;
        let mut slots: Vec<Option<DomainSample>> = samples.into_iter().map(Some).collect();
        for (rank, i) in idx.into_iter().enumerate() {
            let s = slots[i].take().unwrap();
            if rank < n_val {
                val.push(s);
            } else if rank < n_val + n_test {
                test.push(s);
            } else {
                train.push(s);
            }
        }
    }
    (train, val, test)
}

pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut by_domain = BTreeMap::new();
    let mut clamped = 0usize;
    let mut total = 0usize;
    for d in 1..=spec.num_domains() as u32 {
        let samples: Vec<DomainSample> = (0..spec.samples_per_domain)
            .map(|i| {
                let (s, c) = render_sample(spec, d, i);
                clamped += c;
                total += s.image.len();
                s
            })
            .collect();
        by_domain.insert(d, samples);
    }
    let clamp_rate = clamped as f64 / total.max(1) as f64;
    log::info!("synthetic data: {} domains, clamp rate {:.5}", spec.num_domains(), clamp_rate);
    let (train, val, test) = split_domains(by_domain, spec.held_out_domain, spec.val_fraction, spec.test_fraction, spec.seed);
    Ok(Dataset {
        train,
        val,
        test,
        num_domains: spec.num_domains(),
        held_out: spec.held_out_domain,
        clamp_rate,
    })
}

/// `(B, 3, H, W)` batch of the given samples.
pub fn batch_images(samples: &[&DomainSample]) -> Tensor {
    let first = samples[0].image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * samples[0].image.len());
    for s in samples {
        data.extend_from_slice(s.image.data());
    }
    let mut shape = vec![samples.len()];
    shape.extend(first);
    Tensor::from_vec(&shape, data).unwrap()
}

/// Domain and label accuracy of nearest-centroid classifiers on per-channel
/// image means, fit on even-indexed samples and scored on odd ones.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeReport {
    pub domain_accuracy: f64,
    pub label_accuracy: f64,
    pub domain_chance: f64,
}

pub fn probe(samples: &[DomainSample]) -> ProbeReport {
    let feature = |s: &DomainSample| -> [f64; 3] {
        let plane = s.image.len() / 3;
        std::array::from_fn(|c| s.image.data()[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64)
    };
    let fit = |key: &dyn Fn(&DomainSample) -> u32| -> f64 {
        let mut centroids: BTreeMap<u32, ([f64; 3], usize)> = BTreeMap::new();
        for s in samples.iter().step_by(2) {
            let f = feature(s);
            let e = centroids.entry(key(s)).or_insert(([0.0; 3], 0));
            for c in 0..3 {
                e.0[c] += f[c];
            }
            e.1 += 1;
        }
        let centroids: Vec<(u32, [f64; 3])> = centroids
            .into_iter()
            .map(|(k, (sum, n))| (k, sum.map(|v| v / n as f64)))
            .collect();
        let test: Vec<&DomainSample> = samples.iter().skip(1).step_by(2).collect();
        let correct = test
            .iter()
            .filter(|s| {
                let f = feature(s);
                let best = centroids
                    .iter()
                    .min_by(|a, b| {
                        let da: f64 = (0..3).map(|c| (a.1[c] - f[c]).powi(2)).sum();
                        let db: f64 = (0..3).map(|c| (b.1[c] - f[c]).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best.0 == key(s)
            })
            .count();
        correct as f64 / test.len().max(1) as f64
    };
    let domains: std::collections::BTreeSet<u32> = samples.iter().map(|s| s.domain).collect();
    ProbeReport {
        domain_accuracy: fit(&|s| s.domain),
        label_accuracy: fit(&|s| s.y as u32),
        domain_chance: 1.0 / domains.len().max(1) as f64,
    }
}

// ---- folders and manifests -------------------------------------------------

/// One row of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub y: u8,
    pub domain: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// How a folder maps onto `(y, domain)`: either one row per subfolder, or
/// one row per file.
#[derive(Clone, Debug, PartialEq)]
pub enum FolderLayout {
    Subfolders(Vec<(String, u8, u32)>),
    Files(Vec<ManifestRow>),
}

impl FolderLayout {
    /// Reads a CSV whose header is either `folder,y,domain` or `path,y,domain[,split]`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        if headers.get(0) == Some("folder") {
            let mut rows = Vec::new();
            for rec in rdr.records() {
                let rec = rec?;
                let parse = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
                let y: u8 = parse(1)
                    .parse()
                    .map_err(|_| Error::Format(format!("bad label in {:?}", rec)))?;
                let domain: u32 = parse(2)
                    .parse()
                    .map_err(|_| Error::Format(format!("bad domain in {:?}", rec)))?;
                rows.push((parse(0), y, domain));
            }
            Ok(FolderLayout::Subfolders(rows))
        } else {
            let rows = rdr.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
            Ok(FolderLayout::Files(rows))
        }
    }
}

#[derive(Debug, Default)]
pub struct LoadReport {
    pub samples: Vec<(DomainSample, Option<Split>)>,
    pub skipped: Vec<PathBuf>,
}

fn decode(path: &Path, size: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let rgb = img
        .resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle)
        .to_rgb8();
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, size, size], data)
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

/// Decodes, resizes and normalizes every image named by `layout`. Unreadable
/// files are skipped with a warning; a subfolder yielding no images is an error.
pub fn load_folder(root: &Path, layout: &FolderLayout, size: usize) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    let try_load = |path: PathBuf, y: u8, domain: u32, split: Option<Split>, report: &mut LoadReport| -> bool {
        match decode(&path, size) {
            Ok(image) => {
                report.samples.push((DomainSample { image, y, domain }, split));
                true
            }
            Err(e) => {
                log::warn!("skipping unreadable image: {e}");
                report.skipped.push(path);
                false
            }
        }
    };
    match layout {
        FolderLayout::Subfolders(rows) => {
            for (folder, y, domain) in rows {
                let dir = root.join(folder);
                let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| {
                        p.extension()
                            .and_then(|e| e.to_str())
                            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                    })
                    .collect();
                entries.sort();
                let mut loaded = 0;
                for p in entries {
                    loaded += try_load(p, *y, *domain, None, &mut report) as usize;
                }
                if loaded == 0 {
                    return Err(Error::InvalidArgument(format!(
                        "folder `{folder}` (y={y}, domain={domain}) contains no readable images"
                    )));
                }
            }
        }
        FolderLayout::Files(rows) => {
            let mut per_class: BTreeMap<(u8, u32), usize> = BTreeMap::new();
            for r in rows {
                let ok = try_load(root.join(&r.path), r.y, r.domain, r.split, &mut report);
                *per_class.entry((r.y, r.domain)).or_default() += ok as usize;
            }
            if let Some(((y, d), _)) = per_class.iter().find(|(_, n)| **n == 0) {
                return Err(Error::InvalidArgument(format!(
                    "no readable images for y={y}, domain={d}"
                )));
            }
        }
    }
    Ok(report)
}

/// Builds a dataset from loaded samples: manifest splits when given,
/// otherwise the same per-domain split rule as the synthetic generator.
pub fn dataset_from_loaded(
    report: LoadReport,
    held_out: Option<u32>,
    val_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    let num_domains = report.samples.iter().map(|(s, _)| s.domain).max().unwrap_or(0) as usize;
    if report.samples.iter().all(|(_, sp)| sp.is_some()) && !report.samples.is_empty() {
        let mut ds = Dataset {
            num_domains,
            held_out,
            ..Dataset::default()
        };
        for (s, sp) in report.samples {
            match sp.unwrap() {
                Split::Train => ds.train.push(s),
                Split::Val => ds.val.push(s),
                Split::Test => ds.test.push(s),
            }
        }
        return Ok(ds);
    }
    let mut by_domain: BTreeMap<u32, Vec<DomainSample>> = BTreeMap::new();
    for (s, _) in report.samples {
        by_domain.entry(s.domain).or_default().push(s);
    }
    let (train, val, test) = split_domains(by_domain, held_out, val_fraction, test_fraction, seed);
    Ok(Dataset {
        train,
        val,
        test,
        num_domains,
        held_out,
        clamp_rate: 0.0,
    })
}

/// Writes every split as 8-bit PNGs plus `manifest.csv` (`path,y,domain,split`).
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(dir)?;
    let mut rows = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let sub = dir.join(split.as_str());
        std::fs::create_dir_all(&sub)?;
        for (i, s) in ds.split(split).iter().enumerate() {
            let (_, h, w) = (3, s.image.shape()[1], s.image.shape()[2]);
            let plane = h * w;
            let mut buf = image::RgbImage::new(w as u32, h as u32);
            for (p, px) in buf.pixels_mut().enumerate() {
                for c in 0..3 {
                    px[c] = (s.image.data()[c * plane + p] * 255.0).round().clamp(0.0, 255.0) as u8;
                }
            }
            let rel = format!("{}/d{}_{:05}_y{}.png", split.as_str(), s.domain, i, s.y);
            buf.save(dir.join(&rel))
                .map_err(|e| Error::Format(format!("{rel}: {e}")))?;
            rows.push(ManifestRow {
                path: rel,
                y: s.y,
                domain: s.domain,
                split: Some(split),
            });
        }
    }
    crate::io::write_csv(&dir.join("manifest.csv"), &rows)?;
    Ok(rows.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(n: usize, per: usize) -> SynthSpec {
        let mut s = SynthSpec::with_domains(n, per, 5);
        s.image_size = 16;
        s
    }

    #[test]
    fn counts_and_balance() {
        let mut spec = small_spec(3, 200);
        spec.held_out_domain = None;
        spec.val_fraction = 0.0;
        spec.test_fraction = 0.0;
        let ds = generate(&spec).unwrap();
        assert_eq!(ds.train.len(), 600);
        for d in 1..=3 {
            let fakes = ds.train.iter().filter(|s| s.domain == d && s.y == 1).count();
            let reals = ds.train.iter().filter(|s| s.domain == d && s.y == 0).count();
            assert_eq!((fakes, reals), (100, 100));
        }
    }

    #[test]
    fn deterministic_and_bounded() {
        let spec = small_spec(3, 20);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
        for s in a.train.iter().chain(&a.val).chain(&a.test) {
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn held_out_goes_to_test_and_splits_are_disjoint() {
        let spec = small_spec(3, 40);
        let ds = generate(&spec).unwrap();
        assert!(ds.train.iter().chain(&ds.val).all(|s| s.domain != 3));
        assert_eq!(ds.test.iter().filter(|s| s.domain == 3).count(), 40);
        // samples are identified by their pixels; no image may appear in two splits
        let key = |s: &DomainSample| s.image.data().iter().map(|v| v.to_bits()).fold(0u64, |a, b| a.rotate_left(5) ^ b);
        let sets: Vec<std::collections::HashSet<u64>> = [&ds.train, &ds.val, &ds.test]
            .iter()
            .map(|v| v.iter().map(key).collect())
            .collect();
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(sets[i].is_disjoint(&sets[j]));
            }
        }
    }

    #[test]
    fn fewer_than_two_domains_rejected() {
        let spec = small_spec(1, 10);
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn artifact_distribution_does_not_depend_on_domain() {
        let spec = small_spec(3, 10);
        let stats = |domain: u32| {
            let mut abs = 0.0;
            let mut support = 0usize;
            for i in 0..300 {
                let mut r = rng::stream(spec.seed, &format!("synth/artifact/{domain}/{i}"));
                let m = artifact_mask(spec.image_size, &spec.artifact, &mut r);
                abs += m.iter().map(|v| v.abs()).sum::<f64>() / m.len() as f64;
                support += m.iter().filter(|v| **v != 0.0).count();
            }
            (abs / 300.0, support as f64 / 300.0)
        };
        let (a1, s1) = stats(1);
        let (a3, s3) = stats(3);
        assert!((a1 - a3).abs() / a1 < 0.05, "{a1} vs {a3}");
        assert!((s1 - s3).abs() / s1 < 0.05, "{s1} vs {s3}");
    }

    #[test]
    fn probe_sees_domains_not_labels() {
        let mut spec = small_spec(3, 200);
        spec.held_out_domain = None;
        spec.val_fraction = 0.0;
        spec.test_fraction = 0.0;
        let ds = generate(&spec).unwrap();
        let mut all = ds.train.clone();
        // interleave so the even/odd probe split covers every domain and label
        all.sort_by_key(|s| s.domain);
        let report = probe(&all);
        assert!(report.domain_accuracy > 1.8 * report.domain_chance, "{report:?}");
        assert!((report.label_accuracy - 0.5).abs() < 0.1, "{report:?}");
    }
}

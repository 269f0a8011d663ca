#![allow(dead_code)]

//! Finite-difference and brute-force oracles shared by the integration tests
//! and the acceptance runner.

use rand::{Rng as _, SeedableRng};
use sdif_core::autograd::Var;
use sdif_core::backbone::{ForwardOptions, Mixing, Model, ModelConfig};
use sdif_core::config::Manifest;
use sdif_core::dda::{self, AffineGenerator, StyleMlp, StyleSource};
use sdif_core::dfe::DfeBlock;
use sdif_core::domain_head::{self, DomainHead};
use sdif_core::layers::{Conv, Session};
use sdif_core::losses;
use sdif_core::params::ParamStore;
use sdif_core::rng::Rng;
use sdif_core::style_bank::bank_from_stats;
use sdif_core::tensor::Tensor;

pub const STEP: f64 = 1e-6;

pub fn manifest_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../manifests").join(name)
}

/// A checked-in manifest, without environment overrides.
pub fn manifest(name: &str) -> Manifest {
    let text = std::fs::read_to_string(manifest_path(name)).unwrap();
    Manifest::from_toml_str(&text, std::iter::empty()).unwrap()
}
/// Entries sampled per parameter tensor by [`param_errors`].
pub const MAX_ENTRIES: usize = 48;

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`; absolute when both are vanishingly small.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// `Σ v ⊙ R` for a fixed random `R`; a scalar with a generic gradient.
pub fn project(s: &mut Session, v: Var, seed: u64) -> Var {
    let r = uniform(s.graph.shape(v), -1.0, 1.0, seed);
    let r = s.constant(r);
    let p = s.graph.mul(v, r);
    s.graph.sum(p)
}

fn indices(len: usize, seed: u64) -> Vec<usize> {
    if len <= MAX_ENTRIES {
        return (0..len).collect();
    }
    let mut r = Rng::seed_from_u64(seed);
    (0..MAX_ENTRIES).map(|_| r.random_range(0..len)).collect()
}

/// Relative error of every reached parameter's gradient against central
/// differences, in registration order.
pub fn param_errors(store: &ParamStore, train: bool, f: impl Fn(&mut Session) -> Var) -> Vec<(String, f64)> {
    param_errors_with(store, train, &f, |_, s| f(s))
}

/// As [`param_errors`], but differencing `numeric(name, ·)` for parameter
/// `name`: the objective whose true derivative the tape's gradient should be.
pub fn param_errors_with(
    store: &ParamStore,
    train: bool,
    analytic: impl Fn(&mut Session) -> Var,
    numeric: impl Fn(&str, &mut Session) -> Var,
) -> Vec<(String, f64)> {
    let scalar = |probe: &ParamStore, name: &str| {
        let mut s = Session::new(probe, train);
        let l = numeric(name, &mut s);
        s.value(l).item()
    };
    let grads: Vec<(String, Tensor)> = {
        let mut s = Session::new(store, train);
        let l = analytic(&mut s);
        let g = s.graph.backward(l);
        g.params().map(|(n, t)| (n.to_string(), t.clone())).collect()
    };
    let mut out = Vec::new();
    for (k, (name, g)) in grads.iter().enumerate() {
        let idx = indices(g.len(), k as u64);
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let mut probe = store.clone();
            let base = store.get(name).data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = base + STEP;
            let up = scalar(&probe, name);
            probe.get_mut(name).unwrap().data_mut()[i] = base - STEP;
            let down = scalar(&probe, name);
            numeric.push((up - down) / (2.0 * STEP));
        }
        let analytic: Vec<f64> = idx.iter().map(|&i| g.data()[i]).collect();
        out.push((name.clone(), rel_err(&analytic, &numeric)));
    }
    out
}

/// Relative error of the gradient with respect to an input tensor.
pub fn input_error(store: &ParamStore, train: bool, x: &Tensor, f: impl Fn(&mut Session, Var) -> Var) -> f64 {
    let analytic = {
        let mut s = Session::new(store, train);
        let xv = s.leaf(x.clone());
        let l = f(&mut s, xv);
        s.graph.backward(l).get(xv).unwrap().clone()
    };
    let eval = |t: Tensor| {
        let mut s = Session::new(store, train);
        let xv = s.leaf(t);
        let l = f(&mut s, xv);
        s.value(l).item()
    };
    let idx = indices(x.len(), 99);
    let mut numeric = Vec::with_capacity(idx.len());
    for &i in &idx {
        let mut up = x.clone();
        up.data_mut()[i] += STEP;
        let mut down = x.clone();
        down.data_mut()[i] -= STEP;
        numeric.push((eval(up) - eval(down)) / (2.0 * STEP));
    }
    let a: Vec<f64> = idx.iter().map(|&i| analytic.data()[i]).collect();
    rel_err(&a, &numeric)
}

/// Re-randomizes every parameter so no check sits on a special initial value.
pub fn jitter_params(store: &mut ParamStore, seed: u64, scale: f64) {
    let names: Vec<String> = store.names().cloned().collect();
    for (k, name) in names.iter().enumerate() {
        let t = store.get(name).clone();
        let noise = uniform(t.shape(), -scale, scale, seed + k as u64);
        store.set(name, t.zip_map(&noise, |a, b| a + b));
    }
}

pub fn tiny_model(dda: bool, dfe: bool, domain_head: bool) -> ModelConfig {
    ModelConfig {
        image_size: 16,
        widths: vec![4, 4, 6, 8],
        dda,
        dfe: vec![dfe; 4],
        domain_head,
        embed_dim: 4,
        style_count: 2,
        disc_hidden: 5,
        p_div: 1.0,
        ..ModelConfig::default()
    }
}

/// One named gradient check and its worst relative error.
pub struct GradCase {
    pub name: &'static str,
    pub worst: f64,
    pub tensors: usize,
}

fn worst(errs: &[(String, f64)]) -> f64 {
    errs.iter().map(|(_, e)| *e).fold(0.0, f64::max)
}

fn case(name: &'static str, errs: Vec<(String, f64)>) -> GradCase {
    GradCase {
        name,
        worst: worst(&errs),
        tensors: errs.len(),
    }
}

pub fn adain_case() -> GradCase {
    let store = ParamStore::new();
    let a = uniform(&[2, 3, 4, 4], -1.0, 1.0, 1);
    let g = uniform(&[2, 3], 0.5, 1.5, 2);
    let b = uniform(&[2, 3], -0.5, 0.5, 3);
    let eps = 1e-5;
    let mut errs = Vec::new();
    let (g2, b2) = (g.clone(), b.clone());
    errs.push((
        "A".into(),
        input_error(&store, false, &a, |s, x| {
            let (gv, bv) = (s.constant(g2.clone()), s.constant(b2.clone()));
            let y = dda::adain(s, x, gv, bv, eps).unwrap();
            project(s, y, 10)
        }),
    ));
    let a2 = a.clone();
    errs.push((
        "gamma".into(),
        input_error(&store, false, &g, |s, gv| {
            let (av, bv) = (s.constant(a2.clone()), s.constant(b.clone()));
            let y = dda::adain(s, av, gv, bv, eps).unwrap();
            project(s, y, 10)
        }),
    ));
    errs.push((
        "beta".into(),
        input_error(&store, false, &b.clone(), |s, bv| {
            let (av, gv) = (s.constant(a.clone()), s.constant(g.clone()));
            let y = dda::adain(s, av, gv, bv, eps).unwrap();
            project(s, y, 10)
        }),
    ));
    case("adain", errs)
}

pub fn diversify_case() -> GradCase {
    let c = 3;
    let generator = AffineGenerator::new("gen", StyleSource::BankStats, 2 * c, c, &[0, 1]).unwrap();
    let mut store = ParamStore::new();
    generator.init(&mut store, 4);
    jitter_params(&mut store, 40, 0.2);
    let content = uniform(&[2, c, 4, 4], -1.0, 1.0, 5);
    let style = uniform(&[2, 2 * c], 0.2, 1.2, 6);
    let classes = [1, 0];
    let run = |s: &mut Session, x: Var| {
        let st = s.constant(style.clone());
        let y = dda::diversify(s, &generator, x, st, &classes, 1e-5).unwrap();
        project(s, y, 11)
    };
    let mut errs = vec![("F_c".to_string(), input_error(&store, false, &content, run))];
    errs.extend(param_errors(&store, false, |s| {
        let x = s.constant(content.clone());
        run(s, x)
    }));
    case("diversify", errs)
}

pub fn style_mlp_case() -> GradCase {
    let mlp = StyleMlp::new("mlp", 4, 3);
    let mut store = ParamStore::new();
    mlp.init(&mut store, 7);
    jitter_params(&mut store, 70, 0.1);
    let x = uniform(&[2, 4, 3, 3], -1.0, 1.0, 8);
    let run = |s: &mut Session, xv: Var| {
        let y = mlp.style_embed(s, xv).unwrap();
        project(s, y, 12)
    };
    let mut errs = vec![("S".to_string(), input_error(&store, false, &x, run))];
    errs.extend(param_errors(&store, false, |s| {
        let xv = s.constant(x.clone());
        run(s, xv)
    }));
    case("style_mlp", errs)
}

pub fn dfe_case() -> GradCase {
    let block = DfeBlock::new("dfe", 4, 3, 1e-5).unwrap();
    let mut store = ParamStore::new();
    block.init(&mut store, 9);
    jitter_params(&mut store, 90, 0.1);
    let x = uniform(&[2, 4, 5, 5], -1.0, 1.0, 10);
    let run = |s: &mut Session, xv: Var| {
        let y = block.forward(s, xv, 2.0).unwrap();
        project(s, y, 13)
    };
    let mut errs = vec![("M".to_string(), input_error(&store, true, &x, run))];
    errs.extend(param_errors(&store, true, |s| {
        let xv = s.constant(x.clone());
        run(s, xv)
    }));
    case("dfe", errs)
}

pub fn grl_case() -> GradCase {
    let head = DomainHead::new("disc", 5, 4, 3).unwrap();
    let mut store = ParamStore::new();
    head.init(&mut store, 11);
    let x = uniform(&[3, 5], -1.0, 1.0, 12);
    let domains = [1, 3, 2];
    // The reversal makes this the gradient of −0.7·L with respect to x.
    let run = |s: &mut Session, xv: Var| {
        let r = domain_head::grl(s, xv, 0.7).unwrap();
        let logits = head.discriminate(s, r).unwrap();
        domain_head::adv_loss(s, logits, &domains).unwrap()
    };
    let plain = |s: &mut Session, xv: Var| {
        let logits = head.discriminate(s, xv).unwrap();
        let l = domain_head::adv_loss(s, logits, &domains).unwrap();
        s.graph.scale(l, -0.7)
    };
    let analytic = |f: &dyn Fn(&mut Session, Var) -> Var| {
        let mut s = Session::new(&store, false);
        let xv = s.leaf(x.clone());
        let l = f(&mut s, xv);
        s.graph.backward(l).get(xv).unwrap().clone()
    };
    let reversed = analytic(&run);
    let reference = analytic(&plain);
    let mut errs = vec![
        ("x (reversed vs −0.7·plain)".to_string(), rel_err(reversed.data(), reference.data())),
        ("x (plain vs fd)".to_string(), input_error(&store, false, &x, plain)),
    ];
    errs.extend(param_errors(&store, false, |s| {
        let xv = s.constant(x.clone());
        run(s, xv)
    }));
    case("grl_path", errs)
}

pub fn losses_case() -> GradCase {
    let store = ParamStore::new();
    let z = uniform(&[4, 1], -3.0, 3.0, 13);
    let d = uniform(&[4, 3], -2.0, 2.0, 14);
    let labels = [1.0, 0.0, 0.0, 1.0];
    let domains = [2, 1, 3, 3];
    let errs = vec![
        (
            "ce".to_string(),
            input_error(&store, false, &z, |s, v| losses::ce_loss(s, v, &labels).unwrap()),
        ),
        (
            "adv".to_string(),
            input_error(&store, false, &d, |s, v| domain_head::adv_loss(s, v, &domains).unwrap()),
        ),
        (
            "total".to_string(),
            input_error(&store, false, &z, |s, v| {
                let ce = losses::ce_loss(s, v, &labels).unwrap();
                let dv = s.constant(d.clone());
                let adv = domain_head::adv_loss(s, dv, &domains).unwrap();
                let reuse = s.graph.reshape(v, &[4, 1]);
                let extra = project(s, reuse, 15);
                let adv = s.graph.add(adv, extra);
                losses::total_loss(s, ce, Some(adv), 1.7).unwrap().0
            }),
        ),
    ];
    case("losses", errs)
}

/// Every parameter of the full model in training mode on a 2-sample
/// micro-batch.
pub fn full_model_case() -> GradCase {
    model_case(tiny_model(true, true, true))
}

/// The tape differentiates `ce + λ·adv` with two deliberate departures from
/// the plain derivative: the style path's input is a constant, and the
/// adversarial gradient of everything below the reversal is scaled by
/// `−strength`. The numeric objective reproduces both: the style path reads
/// the unperturbed features, and parameters outside the discriminator see
/// `ce − strength·λ·adv`.
pub fn model_case(cfg: ModelConfig) -> GradCase {
    let (lambda, strength) = (0.8, 1.3);
    let model = Model::new(ModelConfig { p_div: 0.5, ..cfg }).unwrap();
    let mut store = model.init_store(21);
    jitter_params(&mut store, 210, 0.05);
    let images = uniform(&[2, 3, 16, 16], 0.0, 1.0, 22);
    let pool = uniform(&[6, 3, 16, 16], 0.0, 1.0, 23);
    let pool_classes = [0, 1, 0, 1, 0, 1];
    let stats = model.content_stats(&store, &pool, 2.0).unwrap();
    let bank = bank_from_stats(&dda::group_stats(stats, &pool_classes), 2).unwrap();
    let classes = [0u32, 1];
    let labels = [0.0, 1.0];
    let domains = [1u32, 2];
    // One row stylized and one passed through, so both paths carry gradient.
    let mix_seed = (0..)
        .find(|&k| {
            let mut r = Rng::seed_from_u64(k);
            dda::MixPlan::draw(&bank, &classes, 0.5, &mut r).unwrap().stylized() == 1
        })
        .unwrap();
    let run = |s: &mut Session, pinned: Option<&Tensor>| {
        let mut rng = Rng::seed_from_u64(mix_seed);
        let x = s.constant(images.clone());
        let out = model
            .forward(
                s,
                x,
                &classes,
                ForwardOptions {
                    temperature: 2.0,
                    grl_strength: strength,
                    mixing: Some(Mixing {
                        bank: &bank,
                        rng: &mut rng,
                    }),
                    style_features: pinned,
                },
            )
            .unwrap();
        let ce = losses::ce_loss(s, out.logits, &labels).unwrap();
        let adv = out.domain_logits.map(|d| domain_head::adv_loss(s, d, &domains).unwrap());
        (ce, adv, out.style_features)
    };
    let pinned = {
        let mut s = Session::new(&store, true);
        let (_, _, f) = run(&mut s, None);
        f.map(|v| s.value(v).clone())
    };
    let errs = param_errors_with(
        &store,
        true,
        |s| {
            let (ce, adv, _) = run(s, None);
            losses::total_loss(s, ce, adv, lambda).unwrap().0
        },
        |name, s| {
            let (ce, adv, _) = run(s, pinned.as_ref());
            let sign = if name.starts_with("disc.") { 1.0 } else { -strength };
            match adv {
                Some(a) => {
                    let a = s.graph.scale(a, sign * lambda);
                    s.graph.add(ce, a)
                }
                None => ce,
            }
        },
    );
    assert_eq!(errs.len(), store.params().count(), "every parameter reached");
    case("full_model", errs)
}

pub fn gradient_suite() -> Vec<GradCase> {
    vec![
        adain_case(),
        diversify_case(),
        style_mlp_case(),
        dfe_case(),
        grl_case(),
        losses_case(),
        full_model_case(),
    ]
}

/// Greedy farthest point sampling written from scratch: centroid-farthest
/// start, then max-min distance, lowest index on ties.
pub fn fps_oracle(points: &[Vec<f64>], count: usize) -> Vec<usize> {
    let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    if count == 0 {
        return vec![];
    }
    let dim = points[0].len();
    let centroid: Vec<f64> = (0..dim)
        .map(|j| points.iter().map(|p| p[j]).sum::<f64>() / points.len() as f64)
        .collect();
    let mut first = 0;
    for i in 1..points.len() {
        if d(&points[i], &centroid) > d(&points[first], &centroid) {
            first = i;
        }
    }
    let mut chosen = vec![first];
    while chosen.len() < count {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..points.len() {
            if chosen.contains(&i) {
                continue;
            }
            let m = chosen.iter().map(|&c| d(&points[i], &points[c])).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, bm)| m > bm) {
                best = Some((i, m));
            }
        }
        chosen.push(best.unwrap().0);
    }
    chosen
}

/// Fraction of (positive, negative) pairs ordered correctly, ties half.
pub fn auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs
}

/// EER from `steps + 1` evenly spaced thresholds over the score range:
/// the first grid interval where FPR − FNR changes sign, interpolated
/// linearly to FPR = FNR.
pub fn eer_oracle(scores: &[f64], labels: &[bool], steps: usize) -> f64 {
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pos = labels.iter().filter(|l| **l).count() as f64;
    let neg = labels.len() as f64 - pos;
    let rates = |t: f64| {
        let fp = scores.iter().zip(labels).filter(|(s, l)| !**l && **s >= t).count() as f64;
        let fneg = scores.iter().zip(labels).filter(|(s, l)| **l && **s < t).count() as f64;
        (fp / neg, fneg / pos)
    };
    let grid: Vec<f64> = (0..=steps)
        .map(|k| lo + (hi - lo) * k as f64 / steps as f64)
        .chain([f64::INFINITY])
        .collect();
    let mut prev = rates(grid[0]);
    for &t in &grid[1..] {
        let cur = rates(t);
        let (d0, d1) = (prev.0 - prev.1, cur.0 - cur.1);
        if d0 == 0.0 {
            return prev.0;
        }
        if d0 > 0.0 && d1 <= 0.0 {
            let a = d0 / (d0 - d1);
            return prev.0 + a * (cur.0 - prev.0);
        }
        prev = cur;
    }
    prev.0
}

/// `−[y ln σ(z) + (1−y) ln(1−σ(z))]`, averaged.
pub fn bce_oracle(logits: &[f64], labels: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&z, &y) in logits.iter().zip(labels) {
        let p = 1.0 / (1.0 + (-z).exp());
        total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    total / logits.len() as f64
}

/// `−ln softmax(row)[label − 1]`, averaged; labels are 1-based.
pub fn xent_oracle(logits: &[Vec<f64>], labels: &[u32]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total -= (row[y as usize - 1].exp() / z).ln();
    }
    total / logits.len() as f64
}

/// Worst element-wise gaps of the reversal contract, `(pre, post)`: pre is
/// `|g_rev + strength·g_plain|` over parameters below the reversal, post is
/// `|g_rev − g_plain|` over discriminator parameters.
pub fn grl_contract(strength: f64) -> (f64, f64) {
    let conv = Conv::new("g.conv", 3, 6, 3, 2);
    let head = DomainHead::new("disc", 6, 5, 4).unwrap();
    let mut store = ParamStore::new();
    conv.init(&mut store, 1);
    head.init(&mut store, 2);
    let x = uniform(&[4, 3, 8, 8], 0.0, 1.0, 3);
    let domains = [1, 2, 3, 4];
    let grads = |reverse: bool| {
        let mut s = Session::new(&store, true);
        let xv = s.constant(x.clone());
        let h = conv.forward(&mut s, xv);
        let h = s.graph.relu(h);
        let mut f = s.graph.gap(h);
        if reverse {
            f = domain_head::grl(&mut s, f, strength).unwrap();
        }
        let logits = head.discriminate(&mut s, f).unwrap();
        let l = domain_head::adv_loss(&mut s, logits, &domains).unwrap();
        let g = s.graph.backward(l);
        g.params().map(|(n, t)| (n.to_string(), t.clone())).collect::<Vec<_>>()
    };
    let (rev, plain) = (grads(true), grads(false));
    let (mut pre, mut post) = (0.0f64, 0.0f64);
    for ((name, a), (_, b)) in rev.iter().zip(&plain) {
        for (u, v) in a.data().iter().zip(b.data()) {
            if name.starts_with("disc.") {
                post = post.max((u - v).abs());
            } else {
                pre = pre.max((u + strength * v).abs());
            }
        }
    }
    (pre, post)
}

pub fn random_points(r: &mut Rng) -> Vec<Vec<f64>> {
    let n = r.random_range(1..=64);
    let dim = r.random_range(1..=6);
    // Coarse integer grids make distance ties common.
    let coarse = r.random_bool(0.5);
    (0..n)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    if coarse {
                        r.random_range(0..4) as f64
                    } else {
                        r.random_range(-1.0..1.0)
                    }
                })
                .collect()
        })
        .collect()
}

pub fn random_scores(r: &mut Rng, n: usize, ties: bool) -> (Vec<f64>, Vec<bool>) {
    let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = labels
        .iter()
        .map(|&l| {
            let s: f64 = r.random_range(0.0..1.0) + if l { 0.3 } else { 0.0 };
            if ties {
                (s * 10.0).round() / 10.0
            } else {
                s
            }
        })
        .collect();
    (scores, labels)
}

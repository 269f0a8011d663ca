//! Training, evaluation and the experiment runners behind the CLI.
//!
//! Every random choice in a run comes from a named stream of the run seed:
//! `data`, `init`, `shuffle`, `bank`, `mix`. Result tables are written
//! atomically and contain no timestamps, so reruns are byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{ForwardOptions, Mixing, Model, ModelConfig};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::{Manifest, Protocol};
use crate::data::{self, Dataset, DomainSample, FolderLayout};
use crate::dda::group_stats;
use crate::domain_head::{adv_loss, grl_schedule};
use crate::error::{Error, Result};
use crate::io::write_csv;
use crate::layers::{apply_bn_updates, Session};
use crate::losses::{ce_loss, total_loss, LossBreakdown};
use crate::metrics::{summarize, MetricRow, Summary};
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::rng::{self, derive_seed};
use crate::style_bank::{bank_from_stats, StyleBank};
use crate::variants::Registry;

/// One row of the per-epoch training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub ce: f64,
    pub adv: f64,
    pub total: f64,
    pub val_acc: f64,
    pub val_auc: f64,
    pub val_eer: f64,
}

pub struct RunOutcome {
    pub history: Vec<EpochRow>,
    /// Best-validation-AUC weights.
    pub best: Checkpoint,
    pub metrics: Vec<MetricRow>,
}

impl RunOutcome {
    /// The aggregate test row for the held-out domain, if any.
    pub fn unseen(&self) -> Option<&MetricRow> {
        self.metrics.iter().find(|r| r.split == "test" && r.domain == "unseen")
    }
}

/// Builds the dataset a manifest describes for one seed.
pub fn load_dataset(manifest: &Manifest, seed: u64) -> Result<Dataset> {
    let held_out = |n: u32| match manifest.data.protocol {
        Protocol::InDomain => None,
        Protocol::LeaveOneDomainOut => Some(manifest.data.held_out_domain.unwrap_or(n)),
    };
    match &manifest.data.folder {
        Some(folder) => {
            let layout_path = if folder.manifest.is_absolute() {
                folder.manifest.clone()
            } else {
                folder.root.join(&folder.manifest)
            };
            let layout = FolderLayout::from_csv(&layout_path)?;
            let report = data::load_folder(&folder.root, &layout, manifest.model.image_size)?;
            if !report.skipped.is_empty() {
                log::warn!("{} unreadable images skipped", report.skipped.len());
            }
            let n = report.samples.iter().map(|(s, _)| s.domain).max().unwrap_or(0);
            data::dataset_from_loaded(
                report,
                held_out(n),
                manifest.data.val_fraction,
                manifest.data.test_fraction,
                derive_seed(seed, "data"),
            )
        }
        None => {
            let spec = manifest.synth_spec(seed);
            if spec.image_size != manifest.model.image_size {
                return Err(Error::ConfigMismatch {
                    field: "model.image_size".into(),
                    detail: format!(
                        "model expects {} but the synthetic data is {}",
                        manifest.model.image_size, spec.image_size
                    ),
                });
            }
            data::generate(&spec)
        }
    }
}

fn batches<'a>(samples: &'a [DomainSample], order: &[usize], size: usize) -> Vec<Vec<&'a DomainSample>> {
    order
        .chunks(size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.iter().map(|&i| &samples[i]).collect())
        .collect()
}

/// Scores for `samples` in evaluation mode.
pub fn predict_all(model: &Model, store: &ParamStore, samples: &[DomainSample], batch: usize) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&DomainSample> = chunk.iter().collect();
        scores.extend(model.predict(store, &data::batch_images(&refs))?);
    }
    Ok(scores)
}

fn summary_of(scores: &[f64], samples: &[&DomainSample]) -> Result<Summary> {
    let labels: Vec<bool> = samples.iter().map(|s| s.y == 1).collect();
    summarize(scores, &labels)
}

/// Per-domain rows plus `seen`, `unseen` and `all` aggregates for one split.
pub fn metric_rows(split: &str, samples: &[DomainSample], scores: &[f64], held_out: Option<u32>) -> Result<Vec<MetricRow>> {
    let mut by_domain: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_domain.entry(s.domain).or_default().push(i);
    }
    let row = |name: String, unseen: bool, idx: &[usize]| -> Result<MetricRow> {
        let sc: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let sm: Vec<&DomainSample> = idx.iter().map(|&i| &samples[i]).collect();
        let m = summary_of(&sc, &sm)?;
        Ok(MetricRow {
            split: split.to_string(),
            domain: name,
            unseen,
            acc: m.acc,
            auc: m.auc,
            eer: m.eer,
            n: idx.len(),
        })
    };
    let mut rows = Vec::new();
    for (d, idx) in &by_domain {
        rows.push(row(d.to_string(), Some(*d) == held_out, idx)?);
    }
    let seen: Vec<usize> = (0..samples.len()).filter(|&i| Some(samples[i].domain) != held_out).collect();
    let unseen: Vec<usize> = (0..samples.len()).filter(|&i| Some(samples[i].domain) == held_out).collect();
    if held_out.is_some() && !seen.is_empty() {
        rows.push(row("seen".into(), false, &seen)?);
    }
    if !unseen.is_empty() {
        rows.push(row("unseen".into(), true, &unseen)?);
    }
    if !samples.is_empty() {
        rows.push(row("all".into(), false, &(0..samples.len()).collect::<Vec<_>>())?);
    }
    Ok(rows)
}

/// Up to `per_class` training images per authenticity label, in a fixed
/// seed-dependent order.
fn bank_pool(train: &[DomainSample], seed: u64, per_class: usize) -> BTreeMap<u32, Vec<&DomainSample>> {
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut rng::stream(seed, "bank"));
    let mut pool: BTreeMap<u32, Vec<&DomainSample>> = BTreeMap::new();
    for i in idx {
        let e = pool.entry(train[i].y as u32).or_default();
        if e.len() < per_class {
            e.push(&train[i]);
        }
    }
    pool
}

/// Style bank from eval-mode content statistics of a fixed per-class pool of
/// training images.
fn refresh_bank(model: &Model, store: &ParamStore, pool: &BTreeMap<u32, Vec<&DomainSample>>, temperature: f64, batch: usize) -> Result<StyleBank> {
    let mut stats = Vec::new();
    let mut classes = Vec::new();
    for (&class, samples) in pool {
        for chunk in samples.chunks(batch.max(1)) {
            stats.extend(model.content_stats(store, &data::batch_images(chunk), temperature)?);
            classes.extend(std::iter::repeat_n(class, chunk.len()));
        }
    }
    bank_from_stats(&group_stats(stats, &classes), model.config.style_count)
}

/// Trains one model and evaluates its best-validation weights on the test split.
pub fn train_run(manifest: &Manifest, model_cfg: ModelConfig, variant: &str, seed: u64, ds: &Dataset) -> Result<RunOutcome> {
    let tc = &manifest.train;
    if ds.train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let model = Model::new(model_cfg)?;
    let mut store = model.init_store(derive_seed(seed, "init"));
    if let Some(path) = &tc.init_weights {
        let donor = Checkpoint::load(path)?;
        let n = model.import_backbone(&mut store, &donor.store)?;
        log::info!("imported {n} backbone tensors from {}", path.display());
    }
    log::info!("{variant}: {} parameters", store.num_scalars());
    let mut adam = Adam::new(AdamConfig {
        lr: tc.lr,
        ..AdamConfig::default()
    });
    let mut shuffle_rng = rng::stream(seed, "shuffle");
    let mut mix_rng = rng::stream(seed, "mix");
    let pool = bank_pool(&ds.train, seed, tc.bank_pool_per_class);
    let steps_per_epoch = batches(&ds.train, &(0..ds.train.len()).collect::<Vec<_>>(), tc.batch_size).len();
    let total_steps = steps_per_epoch * tc.epochs;
    let mut step = 0;
    let mut bank: Option<StyleBank> = None;
    let mut history = Vec::with_capacity(tc.epochs);
    let mut best: Option<Checkpoint> = None;
    for epoch in 0..tc.epochs {
        let temperature = tc.temperature(epoch);
        if model.config.dda && epoch % tc.bank_refresh_epochs == 0 {
            bank = Some(refresh_bank(&model, &store, &pool, temperature, tc.eval_batch_size)?);
        }
        let mut order: Vec<usize> = (0..ds.train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut sums = (0.0, 0.0, 0.0);
        let mut seen = 0usize;
        for batch in batches(&ds.train, &order, tc.batch_size) {
            let images = data::batch_images(&batch);
            let labels: Vec<f64> = batch.iter().map(|s| s.y as f64).collect();
            let classes: Vec<u32> = batch.iter().map(|s| s.y as u32).collect();
            let domains: Vec<u32> = batch.iter().map(|s| s.domain).collect();
            let (grads, updates, breakdown) = {
                let mut s = Session::new(&store, true);
                let x = s.constant(images);
                let out = model.forward(
                    &mut s,
                    x,
                    &classes,
                    ForwardOptions {
                        temperature,
                        grl_strength: grl_schedule(tc.grl_strength, tc.grl_warmup, step, total_steps),
                        mixing: bank.as_ref().map(|bank| Mixing {
                            bank,
                            rng: &mut mix_rng,
                        }),
                        style_features: None,
                    },
                )?;
                let ce = ce_loss(&mut s, out.logits, &labels)?;
                let adv = match out.domain_logits {
                    Some(d) => Some(adv_loss(&mut s, d, &domains)?),
                    None => None,
                };
                let (total, mut breakdown) = total_loss(&mut s, ce, adv.filter(|_| tc.adv_in_objective), tc.lambda)?;
                if let Some(a) = adv {
                    breakdown.adv = s.value(a).item();
                }
                if !s.value(total).all_finite() {
                    return Err(Error::NonFinite { index: step });
                }
                let grads = s.graph.backward(total);
                (grads, std::mem::take(&mut s.bn_updates), breakdown)
            };
            adam.step(&mut store, &grads, tc.learning_rate(step, total_steps));
            apply_bn_updates(&mut store, &updates, model.config.bn_momentum);
            let LossBreakdown { ce, adv, total, .. } = breakdown;
            let n = batch.len() as f64;
            sums = (sums.0 + ce * n, sums.1 + adv * n, sums.2 + total * n);
            seen += batch.len();
            step += 1;
        }
        let val = if ds.val.is_empty() {
            Summary {
                acc: f64::NAN,
                auc: f64::NAN,
                eer: f64::NAN,
            }
        } else {
            let scores = predict_all(&model, &store, &ds.val, tc.eval_batch_size)?;
            summary_of(&scores, &ds.val.iter().collect::<Vec<_>>())?
        };
        let n = seen.max(1) as f64;
        let row = EpochRow {
            epoch: epoch + 1,
            ce: sums.0 / n,
            adv: sums.1 / n,
            total: sums.2 / n,
            val_acc: val.acc,
            val_auc: val.auc,
            val_eer: val.eer,
        };
        log::info!(
            "{variant} seed {seed} epoch {}: ce {:.4} adv {:.4} val auc {:.4}",
            row.epoch,
            row.ce,
            row.adv,
            row.val_auc
        );
        let key = |v: f64| if v.is_nan() { f64::NEG_INFINITY } else { v };
        if best.as_ref().is_none_or(|b| key(val.auc) > key(b.meta.val_auc)) {
            best = Some(Checkpoint {
                meta: CheckpointMeta {
                    model: model.config.clone(),
                    variant: variant.to_string(),
                    seed,
                    epoch: epoch + 1,
                    val_auc: val.auc,
                },
                rng: mix_rng.clone(),
                store: store.clone(),
            });
        }
        history.push(row);
    }
    let best = best.expect("at least one epoch");
    let mut metrics = Vec::new();
    if !ds.val.is_empty() {
        let scores = predict_all(&model, &best.store, &ds.val, tc.eval_batch_size)?;
        metrics.extend(metric_rows("val", &ds.val, &scores, ds.held_out)?);
    }
    if !ds.test.is_empty() {
        let scores = predict_all(&model, &best.store, &ds.test, tc.eval_batch_size)?;
        metrics.extend(metric_rows("test", &ds.test, &scores, ds.held_out)?);
    }
    Ok(RunOutcome { history, best, metrics })
}

/// Applies the manifest's model section to a dataset: the domain count
/// comes from the data.
fn model_for(manifest: &Manifest, ds: &Dataset, variant: &str) -> Result<ModelConfig> {
    let registry = Registry::ladder();
    let mut cfg = registry.get(variant)?.configure(&manifest.model);
    cfg.domains = ds.num_domains;
    Ok(cfg)
}

fn run_dir(out: &Path, variant: &str, seed: u64) -> PathBuf {
    out.join(variant).join(format!("seed{seed}"))
}

/// `train`: one run per seed; writes `train.csv`, `metrics.csv` and
/// `checkpoint.bin` under `<out>/<variant>/seed<seed>/`.
pub fn cmd_train(manifest: &Manifest, out: &Path) -> Result<Vec<RunOutcome>> {
    let mut outcomes = Vec::new();
    for &seed in &manifest.seeds {
        let ds = load_dataset(manifest, seed)?;
        let cfg = model_for(manifest, &ds, &manifest.variant)?;
        let outcome = train_run(manifest, cfg, &manifest.variant, seed, &ds)?;
        let dir = run_dir(out, &manifest.variant, seed);
        write_csv(&dir.join("train.csv"), &outcome.history)?;
        write_csv(&dir.join("metrics.csv"), &outcome.metrics)?;
        outcome.best.save(&dir.join("checkpoint.bin"))?;
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

/// `eval`: scores a checkpoint on the test split (and validation split) of
/// the manifest's dataset for the checkpoint's seed.
pub fn cmd_eval(manifest: &Manifest, checkpoint: &Path, out: &Path) -> Result<Vec<MetricRow>> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = load_dataset(manifest, ck.meta.seed)?;
    if let Some(size) = ds.image_size() {
        if size != ck.meta.model.image_size {
            return Err(Error::ConfigMismatch {
                field: "model.image_size".into(),
                detail: format!("checkpoint {} vs data {size}", ck.meta.model.image_size),
            });
        }
    }
    if ck.meta.model.domain_head && ck.meta.model.domains != ds.num_domains {
        return Err(Error::ConfigMismatch {
            field: "model.domains".into(),
            detail: format!("checkpoint {} vs data {}", ck.meta.model.domains, ds.num_domains),
        });
    }
    let model = Model::new(ck.meta.model.clone())?;
    for name in model.init_store(0).names() {
        if !ck.store.contains(name) {
            return Err(Error::ConfigMismatch {
                field: name.clone(),
                detail: "parameter missing from checkpoint".into(),
            });
        }
    }
    let mut rows = Vec::new();
    for (split, samples) in [("val", &ds.val), ("test", &ds.test)] {
        if samples.is_empty() {
            continue;
        }
        let scores = predict_all(&model, &ck.store, samples, manifest.train.eval_batch_size)?;
        rows.extend(metric_rows(split, samples, &scores, ds.held_out)?);
    }
    write_csv(&out.join("eval.csv"), &rows)?;
    Ok(rows)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Per-seed result of an experiment runner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub config: String,
    pub seed: u64,
    pub acc: f64,
    pub auc: f64,
    pub eer: f64,
}

/// Seed-aggregated result of an experiment runner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub config: String,
    pub seeds: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub eer_mean: f64,
    pub eer_std: f64,
}

fn aggregate(config: &str, rows: &[SeedRow]) -> AggregateRow {
    let pick = |f: fn(&SeedRow) -> f64| mean_std(&rows.iter().map(f).collect::<Vec<_>>());
    let (acc_mean, acc_std) = pick(|r| r.acc);
    let (auc_mean, auc_std) = pick(|r| r.auc);
    let (eer_mean, eer_std) = pick(|r| r.eer);
    AggregateRow {
        config: config.to_string(),
        seeds: rows.len(),
        acc_mean,
        acc_std,
        auc_mean,
        auc_std,
        eer_mean,
        eer_std,
    }
}

/// The row an experiment is scored on: the held-out domain under
/// leave-one-domain-out, all test data otherwise.
fn headline(outcome: &RunOutcome) -> Result<&MetricRow> {
    outcome
        .unseen()
        .or_else(|| outcome.metrics.iter().find(|r| r.split == "test" && r.domain == "all"))
        .ok_or_else(|| Error::InvalidArgument("run produced no test metrics".into()))
}

pub struct ExperimentReport {
    pub per_seed: Vec<SeedRow>,
    pub aggregate: Vec<AggregateRow>,
}

impl ExperimentReport {
    pub fn get(&self, config: &str) -> Option<&AggregateRow> {
        self.aggregate.iter().find(|r| r.config == config)
    }
}

fn run_grid(
    manifest: &Manifest,
    configs: &[(String, String, f64)],
    out: &Path,
    subdir: &str,
) -> Result<ExperimentReport> {
    let mut per_config: BTreeMap<usize, Vec<SeedRow>> = BTreeMap::new();
    for &seed in &manifest.seeds {
        let ds = load_dataset(manifest, seed)?;
        for (i, (label, variant, lambda)) in configs.iter().enumerate() {
            let mut m = manifest.clone();
            m.train.lambda = *lambda;
            let cfg = model_for(&m, &ds, variant)?;
            let outcome = train_run(&m, cfg, variant, seed, &ds)?;
            let dir = out.join(subdir).join(label).join(format!("seed{seed}"));
            write_csv(&dir.join("train.csv"), &outcome.history)?;
            write_csv(&dir.join("metrics.csv"), &outcome.metrics)?;
            let h = headline(&outcome)?;
            per_config.entry(i).or_default().push(SeedRow {
                config: label.clone(),
                seed,
                acc: h.acc,
                auc: h.auc,
                eer: h.eer,
            });
        }
    }
    let per_seed: Vec<SeedRow> = per_config.values().flatten().cloned().collect();
    let aggregate = per_config
        .iter()
        .map(|(i, rows)| aggregate(&configs[*i].0, rows))
        .collect();
    Ok(ExperimentReport { per_seed, aggregate })
}

/// `ablate`: the four-step ladder, identical seeds and data for every rung.
/// Writes `ablation.csv` (mean ± std over seeds) and `ablation_runs.csv`.
pub fn cmd_ablate(manifest: &Manifest, out: &Path) -> Result<ExperimentReport> {
    let configs: Vec<(String, String, f64)> = Registry::ladder()
        .names()
        .map(|n| (n.to_string(), n.to_string(), manifest.train.lambda))
        .collect();
    let report = run_grid(manifest, &configs, out, "ablation")?;
    write_csv(&out.join("ablation.csv"), &report.aggregate)?;
    write_csv(&out.join("ablation_runs.csv"), &report.per_seed)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub acc: f64,
    pub auc: f64,
    pub eer: f64,
}

/// `sweep-lambda`: the full model at every λ of the grid. Writes
/// `sweep.csv` (seed means), `sweep_runs.csv`, and the two-column
/// `sweep_plot.tsv` of λ against accuracy.
pub fn cmd_sweep_lambda(manifest: &Manifest, out: &Path) -> Result<ExperimentReport> {
    if let Some(l) = manifest.sweep.lambdas.iter().find(|l| !(**l >= 0.0)) {
        return Err(Error::InvalidArgument(format!("lambda must be ≥ 0, got {l}")));
    }
    let configs: Vec<(String, String, f64)> = manifest
        .sweep
        .lambdas
        .iter()
        .map(|&l| (format!("lambda={l}"), "full".to_string(), l))
        .collect();
    let report = run_grid(manifest, &configs, out, "sweep")?;
    let rows: Vec<SweepRow> = manifest
        .sweep
        .lambdas
        .iter()
        .zip(&report.aggregate)
        .map(|(&lambda, a)| SweepRow {
            lambda,
            acc: a.acc_mean,
            auc: a.auc_mean,
            eer: a.eer_mean,
        })
        .collect();
    write_csv(&out.join("sweep.csv"), &rows)?;
    write_csv(&out.join("sweep_runs.csv"), &report.per_seed)?;
    let mut plot = String::from("lambda\tacc\n");
    for r in &rows {
        plot.push_str(&format!("{}\t{}\n", r.lambda, r.acc));
    }
    crate::io::write_atomic(&out.join("sweep_plot.tsv"), plot.as_bytes())?;
    Ok(report)
}

/// `gen-data`: writes the manifest's synthetic dataset as PNGs plus
/// `manifest.csv`; returns the number of images.
pub fn cmd_gen_data(manifest: &Manifest, seed: u64, out: &Path) -> Result<usize> {
    let spec = manifest.synth_spec(seed);
    let ds = data::generate(&spec)?;
    let probe = data::probe(&ds.train);
    log::info!(
        "probe: domain acc {:.3} (chance {:.3}), label acc {:.3}",
        probe.domain_accuracy,
        probe.domain_chance,
        probe.label_accuracy
    );
    data::save_dataset(&ds, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankRow {
    pub class: u32,
    pub basis: usize,
    pub channel: usize,
    pub mean: f64,
    pub std: f64,
}

/// `bank-inspect`: the bank a checkpoint would use, built from its training
/// data. Writes `bank.bin` and `bank.csv`.
pub fn cmd_bank_inspect(manifest: &Manifest, checkpoint: &Path, out: &Path) -> Result<StyleBank> {
    let ck = Checkpoint::load(checkpoint)?;
    if !ck.meta.model.dda {
        return Err(Error::ConfigMismatch {
            field: "model.dda".into(),
            detail: "checkpoint was trained without a style bank".into(),
        });
    }
    let ds = load_dataset(manifest, ck.meta.seed)?;
    let model = Model::new(ck.meta.model.clone())?;
    let pool = bank_pool(&ds.train, ck.meta.seed, manifest.train.bank_pool_per_class);
    let temperature = manifest.train.temperature(ck.meta.epoch.saturating_sub(1));
    let bank = refresh_bank(&model, &ck.store, &pool, temperature, manifest.train.eval_batch_size)?;
    bank.save(&out.join("bank.bin"))?;
    let mut rows = Vec::new();
    for class in bank.class_ids().collect::<Vec<_>>() {
        for (b, st) in bank.basis(class)?.iter().enumerate() {
            for c in 0..st.channels() {
                rows.push(BankRow {
                    class,
                    basis: b,
                    channel: c,
                    mean: st.mean[c],
                    std: st.std[c],
                });
            }
        }
    }
    write_csv(&out.join("bank.csv"), &rows)?;
    Ok(bank)
}

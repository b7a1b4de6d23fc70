//! Training engine: detector training with plateau scheduling and
//! best-by-validation checkpointing, alternating GAN updates with frozen
//! detector coupling, dataset translation, fusion retraining with a leakage
//! guard, and JSON-lines metric history.
//!
//! Every RNG stream is derived from (seed, purpose, indices), so resuming
//! from a checkpoint needs only parameters, optimizer moments, and counters
//! to reproduce subsequent losses bit-identically.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{EvalMap, ExperimentConfig};
use crate::data::{
    augment_sample, denormalize_gan, load_sample, make_folds, normalize_for, render_heatmap,
    Domain, FoldSplit, ImageSample, LandmarkSet, ManifestRecord, NormTarget,
};
use crate::detcyclegan::build_detcyclegan_step;
use crate::detector::{
    build_detector, detection_loss_graph, forward_graph, DetectorModel, Mode,
};
use crate::error::{Error, Result};
use crate::eval::{extract_points, match_points, EvalReport, ImageEval};
use crate::gan::{
    adv_d_loss_graph, build_gan_models, build_generator_step, discriminator_forward_bound,
    generator_forward, GanModels, GeneratorModel, ReplayBuffer,
};
use crate::nn::checkpoint::{self, Checkpoint};
use crate::nn::graph::{Arr, Graph};
use crate::nn::optim::{Adam, PlateauScheduler};
use crate::nn::params::Bindings;
use crate::rng::child_rng;

// ---------------------------------------------------------------------------
// metric history
// ---------------------------------------------------------------------------

/// One epoch record of the JSON-lines metric history. Deliberately free of
/// wall-clock fields: two runs with one seed must produce identical files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub stage: String,
    pub fold: usize,
    pub epoch: usize,
    pub losses: BTreeMap<String, f64>,
    pub metrics: BTreeMap<String, f64>,
    pub lr: f64,
    pub seed: u64,
}

pub fn append_history(path: &Path, rec: &HistoryRecord) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(rec).map_err(|e| Error::parse(path, e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn load_history(path: &Path) -> Result<Vec<HistoryRecord>> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    body.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::parse(path, e.to_string())))
        .collect()
}

// ---------------------------------------------------------------------------
// dataset loading / batching
// ---------------------------------------------------------------------------

/// In-memory dataset of one domain with its fold split.
pub struct LoadedDataset {
    pub samples: Vec<(ImageSample, LandmarkSet)>,
    pub names: Vec<String>,
    pub split: FoldSplit,
}

/// Load every manifest record of one domain into RAM at the working
/// resolution and derive the group-disjoint fold split.
pub fn load_dataset(
    records: &[ManifestRecord],
    root: &Path,
    size: (usize, usize),
    folds: usize,
    domain: Domain,
) -> Result<LoadedDataset> {
    let mut samples = Vec::new();
    let mut names = Vec::new();
    for rec in records.iter().filter(|r| r.domain == domain) {
        let pair = load_sample(rec, root, size)?;
        names.push(rec.path.clone());
        samples.push(pair);
    }
    if samples.is_empty() {
        return Err(Error::Config(format!("no {domain} samples in manifest")));
    }
    let imgs: Vec<ImageSample> = samples.iter().map(|(s, _)| s.clone()).collect();
    let split = make_folds(&imgs, folds)?;
    Ok(LoadedDataset {
        samples,
        names,
        split,
    })
}

fn domain_tag(domain: Domain) -> u64 {
    match domain {
        Domain::Sim => 0,
        Domain::Or => 1,
    }
}

/// Stack samples into `[N,3,H,W]` input and `[N,1,H,W]` heatmap batches,
/// optionally augmenting each sample with its own derived stream.
#[allow(clippy::too_many_arguments)]
fn make_batch(
    items: &[(ImageSample, LandmarkSet)],
    idxs: &[usize],
    sigma: f64,
    norm: NormTarget,
    aug: Option<(&crate::data::AugmentationConfig, u64, &str, &[u64])>,
) -> Result<(Arr, Arr)> {
    let n = idxs.len();
    let (h, w) = (items[idxs[0]].0.height, items[idxs[0]].0.width);
    let mut x = ArrayD::<f64>::zeros(IxDyn(&[n, 3, h, w]));
    let mut y = ArrayD::<f64>::zeros(IxDyn(&[n, 1, h, w]));
    for (k, &idx) in idxs.iter().enumerate() {
        let (img, pts) = &items[idx];
        let (img, pts) = match aug {
            Some((cfg, seed, label, stream)) => {
                let mut ids = stream.to_vec();
                ids.push(idx as u64);
                let mut rng = child_rng(seed, label, &ids);
                augment_sample(img, pts, cfg, &mut rng)
            }
            None => (img.clone(), pts.clone()),
        };
        let pixels = normalize_for(&img, norm)?;
        for c in 0..3 {
            for yy in 0..h {
                for xx in 0..w {
                    x[[k, c, yy, xx]] = pixels[(yy, xx, c)];
                }
            }
        }
        let hm = render_heatmap(&pts, w, h, sigma)?;
        for yy in 0..h {
            for xx in 0..w {
                y[[k, 0, yy, xx]] = hm.values[(yy, xx)];
            }
        }
    }
    Ok((x, y))
}

fn shuffled(indices: &[usize], seed: u64, label: &str, stream: &[u64]) -> Vec<usize> {
    let mut order = indices.to_vec();
    let mut rng = child_rng(seed, label, stream);
    order.shuffle(&mut rng);
    order
}

// ---------------------------------------------------------------------------
// detector training
// ---------------------------------------------------------------------------

pub struct DetectorTrainResult {
    /// Best-by-validation-loss model (trainable).
    pub model: DetectorModel,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
}

/// Train one per-fold detector: Adam, plateau schedule, augmentation,
/// JSON-lines history, per-epoch `last.ckpt` and best-by-validation
/// `best.ckpt` under `out_dir`.
pub fn train_detector(
    cfg: &ExperimentConfig,
    data: &LoadedDataset,
    fold: usize,
    domain: Domain,
    out_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<DetectorTrainResult> {
    cfg.validate()?;
    if fold >= data.split.k {
        return Err(Error::Config(format!("fold {fold} out of range")));
    }
    let train_idx = data.split.train[fold].clone();
    let val_idx = data.split.val[fold].clone();
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Config(format!(
            "fold {fold}: empty train or validation split"
        )));
    }
    train_detector_on(
        cfg,
        &data.samples,
        &train_idx,
        &val_idx,
        fold,
        domain_tag(domain),
        out_dir,
        resume,
    )
}

/// Detector training on explicit train/validation index sets; also the
/// backend of fusion retraining.
#[allow(clippy::too_many_arguments)]
pub fn train_detector_on(
    cfg: &ExperimentConfig,
    samples: &[(ImageSample, LandmarkSet)],
    train_idx: &[usize],
    val_idx: &[usize],
    fold: usize,
    dtag: u64,
    out_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<DetectorTrainResult> {
    let seed = cfg.train.seed;
    let sigma = cfg.data.sigma;
    let mut model = build_detector(
        &cfg.detector,
        &mut child_rng(seed, "det-init", &[dtag, fold as u64]),
    )?;
    let mut opt = Adam::new(cfg.train.detector_lr);
    let mut sched = PlateauScheduler::new(cfg.train.plateau_factor, cfg.train.plateau_patience);
    let mut start_epoch = 0usize;
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_model = model.clone();

    if let Some(path) = resume {
        let ckpt = checkpoint::load(path)?;
        restore_detector_train(&ckpt, &mut model, &mut opt, &mut sched)?;
        start_epoch = ckpt.meta["epoch"].as_u64().unwrap_or(0) as usize;
        best_val = ckpt.meta["best_val_loss"].as_f64().unwrap_or(f64::INFINITY);
        best_epoch = ckpt.meta["best_epoch"].as_u64().unwrap_or(0) as usize;
        if let Some(dir) = out_dir {
            let best_path = dir.join("best.ckpt");
            if best_path.exists() {
                best_model = DetectorModel::from_checkpoint(&checkpoint::load(&best_path)?)?;
            }
        }
    }

    for epoch in start_epoch..cfg.train.detector_epochs {
        let order = shuffled(train_idx, seed, "det-shuffle", &[dtag, fold as u64, epoch as u64]);
        let mut train_loss = 0.0;
        let mut n_batches = 0usize;
        for (step, chunk) in order.chunks(cfg.train.detector_batch).enumerate() {
            if chunk.len() < 2 {
                continue; // batch statistics need at least two samples
            }
            let (x, y) = make_batch(
                samples,
                chunk,
                sigma,
                NormTarget::Detector,
                Some((
                    &cfg.train.augment,
                    seed,
                    "det-aug",
                    &[dtag, fold as u64, epoch as u64],
                )),
            )?;
            let mut g = Graph::new();
            let xid = g.constant(x);
            let tid = g.constant(y);
            let mut drop_rng = child_rng(
                seed,
                "det-drop",
                &[dtag, fold as u64, epoch as u64, step as u64],
            );
            let out = forward_graph(&mut model, &mut g, xid, Mode::Train, Some(&mut drop_rng))?;
            let loss = detection_loss_graph(
                &mut g,
                out.sigmoid,
                out.refined,
                tid,
                cfg.detector.smoothing,
                cfg.detector.mse_reduction,
            )?;
            g.backward(loss);
            train_loss += g.scalar_val(loss);
            n_batches += 1;
            let grads = out.bindings.grads(&g);
            opt.step(&mut model.params, &grads);
        }
        let train_loss = if n_batches > 0 {
            train_loss / n_batches as f64
        } else {
            f64::NAN
        };
        let val_loss = detection_val_loss(cfg, &mut model, samples, val_idx)?;
        sched.step(val_loss, &mut opt.lr);

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_model = model.clone();
            if let Some(dir) = out_dir {
                let ck = best_model.to_checkpoint(serde_json::json!({
                    "epoch": epoch, "val_loss": val_loss, "seed": seed, "fold": fold,
                }));
                checkpoint::save(&dir.join("best.ckpt"), &ck)?;
            }
        }
        if let Some(dir) = out_dir {
            let rec = HistoryRecord {
                stage: "detector".into(),
                fold,
                epoch,
                losses: BTreeMap::from([
                    ("train".to_string(), train_loss),
                    ("val".to_string(), val_loss),
                ]),
                metrics: BTreeMap::new(),
                lr: opt.lr,
                seed,
            };
            append_history(&dir.join("history.jsonl"), &rec)?;
            let ck = detector_train_checkpoint(
                &model, &opt, &sched, epoch + 1, best_val, best_epoch, seed, fold,
            );
            checkpoint::save(&dir.join("last.ckpt"), &ck)?;
        }
    }
    Ok(DetectorTrainResult {
        model: best_model,
        best_epoch,
        best_val_loss: best_val,
        epochs_run: cfg.train.detector_epochs.saturating_sub(start_epoch),
    })
}

/// Mean detection loss over an index set, eval mode, no augmentation.
pub fn detection_val_loss(
    cfg: &ExperimentConfig,
    model: &mut DetectorModel,
    samples: &[(ImageSample, LandmarkSet)],
    idxs: &[usize],
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in idxs.chunks(cfg.eval.batch.max(1)) {
        let (x, y) = make_batch(samples, chunk, cfg.data.sigma, NormTarget::Detector, None)?;
        let mut g = Graph::new();
        let xid = g.constant(x);
        let tid = g.constant(y);
        let out = forward_graph(model, &mut g, xid, Mode::Eval, None)?;
        let loss = detection_loss_graph(
            &mut g,
            out.sigmoid,
            out.refined,
            tid,
            cfg.detector.smoothing,
            cfg.detector.mse_reduction,
        )?;
        total += g.scalar_val(loss) * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count as f64)
}

fn detector_train_checkpoint(
    model: &DetectorModel,
    opt: &Adam,
    sched: &PlateauScheduler,
    epoch: usize,
    best_val: f64,
    best_epoch: usize,
    seed: u64,
    fold: usize,
) -> Checkpoint {
    let mut ck = model.to_checkpoint(serde_json::json!({}));
    ck.meta = serde_json::json!({
        "kind": "detector",
        "config": serde_json::to_value(&model.config).unwrap(),
        "state": "train",
        "epoch": epoch,
        "best_val_loss": best_val,
        "best_epoch": best_epoch,
        "seed": seed,
        "fold": fold,
        "adam_t": opt.t,
        "adam_lr": opt.lr,
        "sched": serde_json::to_value(sched).unwrap(),
    });
    for (k, v) in &opt.m {
        ck.tensors.insert(format!("m.{k}"), v.clone());
    }
    for (k, v) in &opt.v {
        ck.tensors.insert(format!("v.{k}"), v.clone());
    }
    ck
}

fn restore_detector_train(
    ckpt: &Checkpoint,
    model: &mut DetectorModel,
    opt: &mut Adam,
    sched: &mut PlateauScheduler,
) -> Result<()> {
    *model = DetectorModel::from_checkpoint(ckpt)?;
    opt.t = ckpt.meta["adam_t"].as_u64().unwrap_or(0);
    opt.lr = ckpt.meta["adam_lr"].as_f64().unwrap_or(opt.lr);
    *sched = serde_json::from_value(ckpt.meta["sched"].clone())
        .map_err(|e| Error::Validation(format!("scheduler state: {e}")))?;
    for (k, v) in &ckpt.tensors {
        if let Some(name) = k.strip_prefix("m.") {
            opt.m.insert(name.to_string(), v.clone());
        } else if let Some(name) = k.strip_prefix("v.") {
            opt.v.insert(name.to_string(), v.clone());
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// GAN training
// ---------------------------------------------------------------------------

pub struct GanTrainResult {
    pub models: GanModels,
    pub epochs_run: usize,
}

/// Alternating-update translation training on one fold: a single Adam over
/// both generators, one per discriminator, replay buffers for the fake
/// batches, optional frozen-detector coupling. Frozen detector checksums
/// are asserted every epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_gan(
    cfg: &ExperimentConfig,
    sim: &LoadedDataset,
    or_: &LoadedDataset,
    fold: usize,
    detectors: Option<(&DetectorModel, &DetectorModel)>,
    out_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<GanTrainResult> {
    cfg.validate()?;
    let coupled = cfg.det_weights.alpha1 > 0.0 || cfg.det_weights.alpha2 > 0.0;
    if coupled && detectors.is_none() {
        return Err(Error::Config(
            "detection-coupled training needs pre-trained detector checkpoints".into(),
        ));
    }
    let (mut det_sim, mut det_or) = match detectors {
        Some((ds, do_)) => {
            let mut ds = ds.clone();
            let mut do_ = do_.clone();
            ds.trainable = false;
            do_.trainable = false;
            (Some(ds), Some(do_))
        }
        None => (None, None),
    };
    let det_sim_sum = det_sim.as_ref().map(|d| d.params.checksum());
    let det_or_sum = det_or.as_ref().map(|d| d.params.checksum());

    let seed = cfg.train.seed;
    let mut models = build_gan_models(&cfg.gan, &mut child_rng(seed, "gan-init", &[fold as u64]))?;
    let mut opt_g = Adam::new(cfg.train.gan_lr);
    let mut opt_d_sim = Adam::new(cfg.train.gan_lr);
    let mut opt_d_or = Adam::new(cfg.train.gan_lr);
    let mut buf_sim = ReplayBuffer::new(cfg.gan.replay_capacity, cfg.gan.replay_swap_p);
    let mut buf_or = ReplayBuffer::new(cfg.gan.replay_capacity, cfg.gan.replay_swap_p);
    let mut start_epoch = 0usize;

    if let Some(path) = resume {
        let ckpt = checkpoint::load(path)?;
        start_epoch = restore_gan_train(
            &ckpt,
            &mut models,
            &mut opt_g,
            &mut opt_d_sim,
            &mut opt_d_or,
            &mut buf_sim,
            &mut buf_or,
        )?;
    }

    let train_sim = sim.split.train[fold].clone();
    let train_or = or_.split.train[fold].clone();
    if train_sim.is_empty() || train_or.is_empty() {
        return Err(Error::Config(format!("fold {fold}: empty training split")));
    }
    let batch = cfg.train.gan_batch;

    for epoch in start_epoch..cfg.train.gan_epochs {
        let order_s = shuffled(&train_sim, seed, "gan-shuffle", &[0, fold as u64, epoch as u64]);
        let order_o = shuffled(&train_or, seed, "gan-shuffle", &[1, fold as u64, epoch as u64]);
        let steps = (order_s.len().min(order_o.len()) / batch).max(1);
        let mut sums: BTreeMap<&str, f64> = BTreeMap::new();
        for step in 0..steps {
            let take = |ord: &[usize]| -> Vec<usize> {
                ord.iter()
                    .cycle()
                    .skip(step * batch)
                    .take(batch.min(ord.len()))
                    .copied()
                    .collect()
            };
            let idx_s = take(&order_s);
            let idx_o = take(&order_o);
            let (xs, ys) = make_batch(
                &sim.samples,
                &idx_s,
                cfg.data.sigma,
                NormTarget::Gan,
                Some((&cfg.train.gan_augment, seed, "gan-aug", &[0, fold as u64, epoch as u64])),
            )?;
            let (xo, yo) = make_batch(
                &or_.samples,
                &idx_o,
                cfg.data.sigma,
                NormTarget::Gan,
                Some((&cfg.train.gan_augment, seed, "gan-aug", &[1, fold as u64, epoch as u64])),
            )?;

            // generator update (both generators, one optimizer)
            let (total, fake_or_v, fake_sim_v, parts) = if coupled {
                let step_g = build_detcyclegan_step(
                    &models,
                    det_sim.as_mut().unwrap(),
                    det_or.as_mut().unwrap(),
                    &xs,
                    &xo,
                    &ys,
                    &yo,
                    &cfg.gan.weights,
                    &cfg.det_weights,
                )?;
                let mut base = step_g.base;
                base.graph.backward(step_g.total);
                let g12 = base.bind_sim2or.grads_owned(&base.graph);
                let g21 = base.bind_or2sim.grads_owned(&base.graph);
                opt_g.step_groups(vec![
                    ("g12", &mut models.g_sim2or.params, g12),
                    ("g21", &mut models.g_or2sim.params, g21),
                ]);
                let parts = [
                    ("adv_g", base.graph.scalar_val(base.adv_g)),
                    ("cycle", base.graph.scalar_val(base.cycle)),
                    ("identity", base.graph.scalar_val(base.identity)),
                    (
                        "det_prime",
                        step_g
                            .det_prime
                            .map(|id| base.graph.scalar_val(id))
                            .unwrap_or(0.0),
                    ),
                    (
                        "det_rec",
                        step_g
                            .det_recovered
                            .map(|id| base.graph.scalar_val(id))
                            .unwrap_or(0.0),
                    ),
                ];
                (
                    base.graph.scalar_val(step_g.total),
                    base.graph.val(base.fake_or).clone(),
                    base.graph.val(base.fake_sim).clone(),
                    parts.to_vec(),
                )
            } else {
                let mut step_g = build_generator_step(&models, &xs, &xo, &cfg.gan.weights)?;
                step_g.graph.backward(step_g.loss);
                let g12 = step_g.bind_sim2or.grads_owned(&step_g.graph);
                let g21 = step_g.bind_or2sim.grads_owned(&step_g.graph);
                opt_g.step_groups(vec![
                    ("g12", &mut models.g_sim2or.params, g12),
                    ("g21", &mut models.g_or2sim.params, g21),
                ]);
                let parts = [
                    ("adv_g", step_g.graph.scalar_val(step_g.adv_g)),
                    ("cycle", step_g.graph.scalar_val(step_g.cycle)),
                    ("identity", step_g.graph.scalar_val(step_g.identity)),
                ];
                (
                    step_g.graph.scalar_val(step_g.loss),
                    step_g.graph.val(step_g.fake_or).clone(),
                    step_g.graph.val(step_g.fake_sim).clone(),
                    parts.to_vec(),
                )
            };
            *sums.entry("g_total").or_default() += total;
            for (k, v) in parts {
                *sums.entry(k).or_default() += v;
            }

            // discriminator updates on buffered fakes
            let mut rng_buf_or = child_rng(seed, "gan-buffer", &[1, fold as u64, epoch as u64, step as u64]);
            let fake_or_b = buf_or.push_and_sample(&fake_or_v, &mut rng_buf_or);
            let d_or_loss = discriminator_step(&mut models.d_or, &mut opt_d_or, &xo, &fake_or_b, cfg)?;
            *sums.entry("d_or").or_default() += d_or_loss;

            let mut rng_buf_sim = child_rng(seed, "gan-buffer", &[0, fold as u64, epoch as u64, step as u64]);
            let fake_sim_b = buf_sim.push_and_sample(&fake_sim_v, &mut rng_buf_sim);
            let d_sim_loss =
                discriminator_step(&mut models.d_sim, &mut opt_d_sim, &xs, &fake_sim_b, cfg)?;
            *sums.entry("d_sim").or_default() += d_sim_loss;
        }

        // frozen contract: coupling must never touch the detectors
        if let (Some(d), Some(sum)) = (det_sim.as_ref(), det_sim_sum) {
            if d.params.checksum() != sum {
                return Err(Error::Contract("frozen sim detector was mutated".into()));
            }
        }
        if let (Some(d), Some(sum)) = (det_or.as_ref(), det_or_sum) {
            if d.params.checksum() != sum {
                return Err(Error::Contract("frozen or detector was mutated".into()));
            }
        }

        if let Some(dir) = out_dir {
            let losses: BTreeMap<String, f64> = sums
                .iter()
                .map(|(k, v)| (k.to_string(), v / steps as f64))
                .collect();
            let rec = HistoryRecord {
                stage: "gan".into(),
                fold,
                epoch,
                losses,
                metrics: BTreeMap::new(),
                lr: opt_g.lr,
                seed,
            };
            append_history(&dir.join("history.jsonl"), &rec)?;
            let ck = gan_train_checkpoint(
                &models, &opt_g, &opt_d_sim, &opt_d_or, &buf_sim, &buf_or, epoch + 1, seed, fold, cfg,
            );
            checkpoint::save(&dir.join("last.ckpt"), &ck)?;
        }
    }

    if let Some(dir) = out_dir {
        checkpoint::save(
            &dir.join("g_sim2or.ckpt"),
            &models.g_sim2or.to_checkpoint(serde_json::json!({"fold": fold, "seed": seed})),
        )?;
        checkpoint::save(
            &dir.join("g_or2sim.ckpt"),
            &models.g_or2sim.to_checkpoint(serde_json::json!({"fold": fold, "seed": seed})),
        )?;
        checkpoint::save(
            &dir.join("d_sim.ckpt"),
            &models.d_sim.to_checkpoint(serde_json::json!({"fold": fold})),
        )?;
        checkpoint::save(
            &dir.join("d_or.ckpt"),
            &models.d_or.to_checkpoint(serde_json::json!({"fold": fold})),
        )?;
    }
    Ok(GanTrainResult {
        models,
        epochs_run: cfg.train.gan_epochs.saturating_sub(start_epoch),
    })
}

fn discriminator_step(
    d: &mut crate::gan::DiscriminatorModel,
    opt: &mut Adam,
    real: &Arr,
    fake: &Arr,
    cfg: &ExperimentConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let r = g.constant(real.clone());
    let f = g.constant(fake.clone());
    let mut bind = Bindings::new();
    let dr = discriminator_forward_bound(d, &mut g, r, &mut bind, true);
    let df = discriminator_forward_bound(d, &mut g, f, &mut bind, true);
    let loss = adv_d_loss_graph(&mut g, dr, df, cfg.gan.weights.adversarial_form);
    g.backward(loss);
    let grads = bind.grads(&g);
    opt.step(&mut d.params, &grads);
    Ok(g.scalar_val(loss))
}

#[allow(clippy::too_many_arguments)]
fn gan_train_checkpoint(
    models: &GanModels,
    opt_g: &Adam,
    opt_d_sim: &Adam,
    opt_d_or: &Adam,
    buf_sim: &ReplayBuffer,
    buf_or: &ReplayBuffer,
    epoch: usize,
    seed: u64,
    fold: usize,
    cfg: &ExperimentConfig,
) -> Checkpoint {
    let mut ck = Checkpoint {
        meta: serde_json::json!({
            "kind": "gan-train",
            "epoch": epoch,
            "seed": seed,
            "fold": fold,
            "gan_config": serde_json::to_value(&cfg.gan).unwrap(),
            "det_weights": serde_json::to_value(&cfg.det_weights).unwrap(),
            "adam_t": [opt_g.t, opt_d_sim.t, opt_d_or.t],
        }),
        tensors: Default::default(),
    };
    let mut put = |prefix: &str, ps: &crate::nn::params::ParamSet| {
        for (k, v) in &ps.params {
            ck.tensors.insert(format!("{prefix}.{k}"), v.clone());
        }
    };
    put("g12", &models.g_sim2or.params);
    put("g21", &models.g_or2sim.params);
    put("dsim", &models.d_sim.params);
    put("dor", &models.d_or.params);
    for (tag, opt) in [("og", opt_g), ("ods", opt_d_sim), ("odo", opt_d_or)] {
        for (k, v) in &opt.m {
            ck.tensors.insert(format!("{tag}.m.{k}"), v.clone());
        }
        for (k, v) in &opt.v {
            ck.tensors.insert(format!("{tag}.v.{k}"), v.clone());
        }
    }
    for (tag, buf) in [("bufsim", buf_sim), ("bufor", buf_or)] {
        for (name, arr) in buf.to_tensors() {
            ck.tensors.insert(format!("{tag}.{name}"), arr);
        }
    }
    ck
}

#[allow(clippy::too_many_arguments)]
fn restore_gan_train(
    ckpt: &Checkpoint,
    models: &mut GanModels,
    opt_g: &mut Adam,
    opt_d_sim: &mut Adam,
    opt_d_or: &mut Adam,
    buf_sim: &mut ReplayBuffer,
    buf_or: &mut ReplayBuffer,
) -> Result<usize> {
    if ckpt.meta["kind"] != "gan-train" {
        return Err(Error::Validation("not a gan training checkpoint".into()));
    }
    let ts = ckpt.meta["adam_t"]
        .as_array()
        .ok_or_else(|| Error::Validation("adam_t missing".into()))?;
    opt_g.t = ts[0].as_u64().unwrap_or(0);
    opt_d_sim.t = ts[1].as_u64().unwrap_or(0);
    opt_d_or.t = ts[2].as_u64().unwrap_or(0);
    let mut buf_sim_imgs: Vec<(String, Arr)> = Vec::new();
    let mut buf_or_imgs: Vec<(String, Arr)> = Vec::new();
    for (k, v) in &ckpt.tensors {
        if let Some(name) = k.strip_prefix("g12.") {
            *models.g_sim2or.params.params.get_mut(name).unwrap() = v.clone();
        } else if let Some(name) = k.strip_prefix("g21.") {
            *models.g_or2sim.params.params.get_mut(name).unwrap() = v.clone();
        } else if let Some(name) = k.strip_prefix("dsim.") {
            *models.d_sim.params.params.get_mut(name).unwrap() = v.clone();
        } else if let Some(name) = k.strip_prefix("dor.") {
            *models.d_or.params.params.get_mut(name).unwrap() = v.clone();
        } else if let Some(name) = k.strip_prefix("og.m.") {
            opt_g.m.insert(name.into(), v.clone());
        } else if let Some(name) = k.strip_prefix("og.v.") {
            opt_g.v.insert(name.into(), v.clone());
        } else if let Some(name) = k.strip_prefix("ods.m.") {
            opt_d_sim.m.insert(name.into(), v.clone());
        } else if let Some(name) = k.strip_prefix("ods.v.") {
            opt_d_sim.v.insert(name.into(), v.clone());
        } else if let Some(name) = k.strip_prefix("odo.m.") {
            opt_d_or.m.insert(name.into(), v.clone());
        } else if let Some(name) = k.strip_prefix("odo.v.") {
            opt_d_or.v.insert(name.into(), v.clone());
        } else if let Some(name) = k.strip_prefix("bufsim.") {
            buf_sim_imgs.push((name.into(), v.clone()));
        } else if let Some(name) = k.strip_prefix("bufor.") {
            buf_or_imgs.push((name.into(), v.clone()));
        }
    }
    buf_sim_imgs.sort_by(|a, b| a.0.cmp(&b.0));
    buf_or_imgs.sort_by(|a, b| a.0.cmp(&b.0));
    buf_sim.restore(buf_sim_imgs.into_iter().map(|(_, a)| a).collect());
    buf_or.restore(buf_or_imgs.into_iter().map(|(_, a)| a).collect());
    Ok(ckpt.meta["epoch"].as_u64().unwrap_or(0) as usize)
}

// ---------------------------------------------------------------------------
// translation + fusion
// ---------------------------------------------------------------------------

/// Translate a set of samples with a trained generator. Outputs carry the
/// source image's landmarks, fold id, and source id; pixels are mapped back
/// to [0,1]. Deterministic: same checkpoint + inputs give identical output.
pub fn translate_dataset(
    gen: &GeneratorModel,
    items: &[(ImageSample, LandmarkSet)],
    batch: usize,
) -> Result<Vec<(ImageSample, LandmarkSet)>> {
    let source = gen.direction.source();
    let target = gen.direction.target();
    for (img, _) in items {
        if img.domain != source {
            return Err(Error::Validation(format!(
                "generator {:?} expects {source} input, got {}",
                gen.direction, img.domain
            )));
        }
    }
    let mut out = Vec::with_capacity(items.len());
    let idxs: Vec<usize> = (0..items.len()).collect();
    for chunk in idxs.chunks(batch.max(1)) {
        let (x, _) = make_batch(items, chunk, 1.0, NormTarget::Gan, None)?;
        let mut g = Graph::new();
        let xid = g.constant(x);
        let (y, _) = generator_forward(gen, &mut g, xid, false);
        let fake = g.val(y);
        for (k, &idx) in chunk.iter().enumerate() {
            let (src, pts) = &items[idx];
            let (h, w) = (src.height, src.width);
            let mut pixels = ndarray::Array3::<f64>::zeros((h, w, 3));
            for c in 0..3 {
                for yy in 0..h {
                    for xx in 0..w {
                        pixels[(yy, xx, c)] = fake[[k, c, yy, xx]];
                    }
                }
            }
            let pixels = denormalize_gan(&pixels);
            let mut img = ImageSample::new(pixels, target, src.source_id.clone())?;
            img.fold_id = src.fold_id;
            img.annotation_path = src.annotation_path.clone();
            out.push((img, pts.clone()));
        }
    }
    Ok(out)
}

/// Write translated samples as PNGs + annotations + manifest under `dir`.
pub fn write_translated(
    dir: &Path,
    items: &[(ImageSample, LandmarkSet)],
    size: (usize, usize),
) -> Result<Vec<ManifestRecord>> {
    let mut records = Vec::new();
    for (i, (img, pts)) in items.iter().enumerate() {
        let img_rel = format!("images/fake_{}_{i:04}.png", img.domain);
        let ann_rel = format!("annotations/fake_{}_{i:04}.json", img.domain);
        crate::data::save_png(&dir.join(&img_rel), &img.pixels)?;
        crate::data::save_annotations(&dir.join(&ann_rel), pts, size)?;
        records.push(ManifestRecord {
            path: img_rel,
            domain: img.domain,
            source_id: img.source_id.clone(),
            fold: img.fold_id,
            annotation_path: Some(ann_rel),
        });
    }
    crate::data::save_manifest(&dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}

fn pixel_hash(img: &ImageSample) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in img.pixels.iter() {
        h ^= v.to_bits();
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hard leakage guard: the fused training set must share neither source
/// groups nor pixel content with the held-out test set.
pub fn assert_no_leakage(
    fused: &[(ImageSample, LandmarkSet)],
    test: &[(ImageSample, LandmarkSet)],
) -> Result<()> {
    let test_groups: std::collections::BTreeSet<&str> =
        test.iter().map(|(s, _)| s.source_id.as_str()).collect();
    let test_hashes: std::collections::BTreeSet<u64> =
        test.iter().map(|(s, _)| pixel_hash(s)).collect();
    for (img, _) in fused {
        if test_groups.contains(img.source_id.as_str()) {
            return Err(Error::Leakage(format!(
                "training sample from test group {:?}",
                img.source_id
            )));
        }
        if test_hashes.contains(&pixel_hash(img)) {
            return Err(Error::Leakage(format!(
                "training sample is pixel-identical to a test image (source {:?})",
                img.source_id
            )));
        }
    }
    Ok(())
}

/// Retrain a detector from scratch on real + translated data with the same
/// hyperparameters, then evaluate on a held-out test set that the guard
/// proves disjoint.
#[allow(clippy::too_many_arguments)]
pub fn fuse_retrain(
    cfg: &ExperimentConfig,
    real_train: &[(ImageSample, LandmarkSet)],
    fake_train: &[(ImageSample, LandmarkSet)],
    val: &[(ImageSample, LandmarkSet)],
    test: &[(ImageSample, LandmarkSet)],
    out_dir: Option<&Path>,
) -> Result<(DetectorTrainResult, EvalReport)> {
    let mut fused: Vec<(ImageSample, LandmarkSet)> = Vec::new();
    fused.extend(real_train.iter().cloned());
    fused.extend(fake_train.iter().cloned());
    assert_no_leakage(&fused, test)?;
    let n_train = fused.len();
    fused.extend(val.iter().cloned());
    let train_idx: Vec<usize> = (0..n_train).collect();
    let val_idx: Vec<usize> = (n_train..fused.len()).collect();
    let result = train_detector_on(cfg, &fused, &train_idx, &val_idx, 0, 7, out_dir, None)?;
    let mut model = result.model.clone();
    let report = evaluate_detector(cfg, &mut model, test, None)?;
    Ok((result, report))
}

// ---------------------------------------------------------------------------
// evaluation driver
// ---------------------------------------------------------------------------

/// Run a detector over samples, extract points, match against ground truth,
/// and aggregate per fold.
pub fn evaluate_detector(
    cfg: &ExperimentConfig,
    model: &mut DetectorModel,
    items: &[(ImageSample, LandmarkSet)],
    names: Option<&[String]>,
) -> Result<EvalReport> {
    let ev = &cfg.eval;
    let mut per_image = Vec::with_capacity(items.len());
    let idxs: Vec<usize> = (0..items.len()).collect();
    for chunk in idxs.chunks(ev.batch.max(1)) {
        let (x, _) = make_batch(items, chunk, cfg.data.sigma, NormTarget::Detector, None)?;
        let mut g = Graph::new();
        let xid = g.constant(x);
        let out = forward_graph(model, &mut g, xid, Mode::Eval, None)?;
        let map_id = match ev.map {
            EvalMap::Sigmoid => out.sigmoid,
            EvalMap::Refined => out.refined,
        };
        let maps = g.val(map_id);
        for (k, &idx) in chunk.iter().enumerate() {
            let (img, gt) = &items[idx];
            let (h, w) = (img.height, img.width);
            let mut hm = ndarray::Array2::<f64>::zeros((h, w));
            for yy in 0..h {
                for xx in 0..w {
                    hm[(yy, xx)] = maps[[k, 0, yy, xx]];
                }
            }
            let pred = extract_points(&hm, ev.threshold);
            let result = match_points(&pred, gt, ev.radius);
            let path = names
                .map(|n| n[idx].clone())
                .unwrap_or_else(|| format!("sample_{idx:05}"));
            per_image.push(ImageEval {
                path,
                fold: img.fold_id,
                result,
            });
        }
    }
    EvalReport::from_images(ev.radius, ev.threshold, per_image)
}

/// F1 over a flat sample list (single-fold convenience used in tests and
/// the acceptance suite).
pub fn f1_on(
    cfg: &ExperimentConfig,
    model: &mut DetectorModel,
    items: &[(ImageSample, LandmarkSet)],
) -> Result<f64> {
    let report = evaluate_detector(cfg, model, items, None)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for img in &report.per_image {
        tp += img.result.tp;
        fp += img.result.fp;
        fn_ += img.result.fn_;
    }
    Ok(crate::eval::metrics_from_counts(tp, fp, fn_).f1)
}

// convenience re-export used by the CLI for fold bookkeeping
pub fn split_indices(split: &FoldSplit, fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if fold >= split.k {
        return Err(Error::Config(format!("fold {fold} out of range (k={})", split.k)));
    }
    Ok((split.train[fold].clone(), split.val[fold].clone()))
}

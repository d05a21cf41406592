//! The three training phases: segmentation, per-class first stage and the
//! joint multi-stream network with its confidence scorer.

mod adam;
mod config;

pub use adam::Adam;
pub use config::{LrSchedule, MaskMode, TrainConfig};

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{store_tensors, Checkpoint, CheckpointMeta, ModelSpec, NamedTensors, Phase};
use crate::error::{ensure, Error, Result};
use crate::evaluation::psnr_from_mse;
use crate::image::Image;
use crate::losses::{perceptual_graph, total_loss_graph};
use crate::network::{CNModel, Stage1Model, UMSNModel};
use crate::rng::{rng_for, Stream};
use crate::semantics::{f_score, ClassId, MaskKind, SNetModel, SemanticMaskSet, NUM_CLASSES};
use crate::synthesis::TrainingSample;
use crate::tensor::{Graph, Tensor, Var};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint";

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: u64,
    pub phase: Phase,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class: Option<[f64; NUM_CLASSES]>,
    #[serde(rename = "C", default, skip_serializing_if = "Option::is_none")]
    pub confidences: Option<[f64; NUM_CLASSES]>,
    pub lr: f64,
    pub wallclock: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_score: Option<f64>,
}

/// A trained model, its log and its final checkpoint.
#[derive(Clone, Debug)]
pub struct Trained<M> {
    pub model: M,
    pub history: Vec<LogRecord>,
    pub checkpoint: Checkpoint,
}

/// Deblurring network plus the scorer that guided its training.
#[derive(Clone, Debug)]
pub struct UmsnPair {
    pub net: UMSNModel,
    pub cn: Option<CNModel>,
}

/// Starting points of joint training.
#[derive(Clone, Debug, Default)]
pub struct UmsnInit {
    /// One trained first-stage network per class (any order).
    pub stage1: Vec<Stage1Model>,
    /// Needed when masks come from the segmentation network.
    pub snet: Option<SNetModel>,
    /// A joint-training checkpoint to continue from.
    pub resume: Option<Checkpoint>,
}

/// Sample indices of a batch. Positions walk through seeded per-epoch
/// permutations, so the batch depends only on `(master_seed, iteration)`.
pub fn batch_indices(master_seed: u64, iteration: u64, n: usize, batch: usize) -> Vec<usize> {
    assert!(n > 0 && iteration > 0);
    let start = (iteration - 1) * batch as u64;
    let mut perm: Option<(u64, Vec<usize>)> = None;
    (0..batch as u64)
        .map(|j| {
            let p = start + j;
            let epoch = p / n as u64;
            if perm.as_ref().map(|(e, _)| *e) != Some(epoch) {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng_for(master_seed, Stream::Batch, epoch));
                perm = Some((epoch, order));
            }
            perm.as_ref().expect("permutation set above").1[(p % n as u64) as usize]
        })
        .collect()
}

struct Session {
    out: Option<PathBuf>,
    log: Option<BufWriter<File>>,
    started: Instant,
    history: Vec<LogRecord>,
}

impl Session {
    fn open(out: Option<&Path>, resuming: bool) -> Result<Self> {
        let log = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(LOG_FILE);
                let file = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(resuming)
                    .truncate(!resuming)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some(BufWriter::new(file))
            }
            None => None,
        };
        Ok(Self {
            out: out.map(Path::to_path_buf),
            log,
            started: Instant::now(),
            history: Vec::new(),
        })
    }

    fn elapsed(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    fn record(&mut self, rec: LogRecord) -> Result<()> {
        if let (Some(log), Some(dir)) = (self.log.as_mut(), self.out.as_ref()) {
            let path = dir.join(LOG_FILE);
            let line = serde_json::to_string(&rec).expect("log record serializes");
            writeln!(log, "{line}")
                .and_then(|_| log.flush())
                .map_err(|e| Error::io(&path, e))?;
        }
        log::info!(
            "{} iter {} loss {:.6}{}",
            rec.phase.name(),
            rec.iter,
            rec.loss,
            rec.psnr.map(|p| format!(" psnr {p:.2}")).unwrap_or_default()
        );
        self.history.push(rec);
        Ok(())
    }

    fn save(&self, ck: &Checkpoint, periodic: bool) -> Result<()> {
        if let Some(dir) = &self.out {
            let name = if periodic {
                format!("{FINAL_CHECKPOINT}-{:08}", ck.meta.iteration)
            } else {
                FINAL_CHECKPOINT.to_string()
            };
            ck.save(&dir.join(name))?;
        }
        Ok(())
    }
}

fn should_log(config: &TrainConfig, it: u64) -> bool {
    it.is_multiple_of(config.log_every) || it == config.iterations()
}

fn should_checkpoint(config: &TrainConfig, it: u64) -> bool {
    config.checkpoint_every > 0 && it.is_multiple_of(config.checkpoint_every) && it != config.iterations()
}

fn uniform_dims(data: &[TrainingSample]) -> Result<(usize, usize)> {
    ensure!(!data.is_empty(), "training set is empty");
    let dims = data[0].clean.dims();
    ensure!(
        data.iter().all(|s| s.clean.dims() == dims && s.blurry.dims() == dims),
        "all training samples must share one size"
    );
    ensure!(
        dims.0.is_multiple_of(2) && dims.1.is_multiple_of(2),
        "training images need even dimensions, got {}x{}",
        dims.0,
        dims.1
    );
    Ok(dims)
}

fn stack<'a>(idx: &[usize], f: impl Fn(usize) -> &'a Image) -> Tensor {
    Tensor::stack(&idx.iter().map(|&i| f(i).to_tensor()).collect::<Vec<_>>())
}

fn batch_psnr(pred: &Tensor, truth: &Tensor) -> f64 {
    let mse = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| (p.clamp(0.0, 1.0) - t).powi(2))
        .sum::<f64>()
        / pred.len() as f64;
    psnr_from_mse(mse)
}

fn meta(config: &TrainConfig, iteration: u64, model: ModelSpec, adam: &Adam) -> CheckpointMeta {
    CheckpointMeta {
        phase: config.phase,
        iteration,
        config_digest: config.digest(),
        master_seed: config.master_seed,
        width_multiplier: config.width_multiplier,
        model,
        optimizer_step: adam.steps(),
    }
}

fn check_width(config: &TrainConfig, spec: &ModelSpec) -> Result<()> {
    ensure!(
        spec.width_multiplier() == config.width_multiplier,
        "checkpoint has width multiplier {} but the configuration asks for {}",
        spec.width_multiplier(),
        config.width_multiplier
    );
    Ok(())
}

/// Restores the optimizer and start iteration when `ck` belongs to the same phase.
fn resume_state(config: &TrainConfig, ck: &Checkpoint, adam: &mut Adam) -> Result<u64> {
    if ck.meta.phase != config.phase {
        return Ok(0);
    }
    adam.restore(&ck.optimizer, ck.meta.optimizer_step)?;
    ensure!(
        ck.meta.iteration <= config.iterations(),
        "checkpoint is at iteration {} beyond the requested {}",
        ck.meta.iteration,
        config.iterations()
    );
    Ok(ck.meta.iteration)
}

/// Segmentation training: clean images for `snet`, blurry images when fine-tuning.
pub fn train_snet(
    config: &TrainConfig,
    data: &[TrainingSample],
    resume: Option<&Checkpoint>,
    out: Option<&Path>,
) -> Result<Trained<SNetModel>> {
    config.validate()?;
    ensure!(
        matches!(config.phase, Phase::Snet | Phase::SnetFinetune),
        "train_snet needs phase snet or snet_finetune"
    );
    let (w, h) = uniform_dims(data)?;
    let mut adam = Adam::new(config.learning_rate());
    let (mut model, start) = match resume {
        Some(ck) => {
            check_width(config, &ck.meta.model)?;
            let m = ck.snet()?;
            (m, resume_state(config, ck, &mut adam)?)
        }
        None => {
            ensure!(
                config.phase == Phase::Snet,
                "fine-tuning needs a segmentation checkpoint to start from"
            );
            (SNetModel::new(config.width_multiplier, config.master_seed)?, 0)
        }
    };
    let blurry_input = config.phase == Phase::SnetFinetune;
    let class_maps: Vec<Vec<u8>> = data.iter().map(|s| s.masks.class_map()).collect();
    let mut session = Session::open(out, start > 0)?;
    let spec = ModelSpec::Snet {
        width_multiplier: config.width_multiplier,
        seed: model.seed(),
    };
    let n_pix = w * h;
    for it in start + 1..=config.iterations() {
        let idx = batch_indices(config.master_seed, it, data.len(), config.batch_size);
        let x = stack(&idx, |i| {
            if blurry_input {
                &data[i].blurry
            } else {
                &data[i].clean
            }
        });
        let targets: Vec<usize> = idx
            .iter()
            .flat_map(|&i| class_maps[i].iter().map(|&c| c as usize))
            .collect();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let logits = model.logits(&mut g, xv)?;
        let loss = g.cross_entropy(logits, &targets);
        let grads = g.backward(loss);
        adam.learning_rate = config.learning_rate_at(it);
        adam.next_step();
        let gs = grads.for_store(&g, model.params());
        adam.apply(model.params_mut(), &gs);

        if should_log(config, it) {
            let probs = g.value(logits).softmax_channels();
            let mut scores = Vec::new();
            for (b, &i) in idx.iter().enumerate() {
                let pred = SemanticMaskSet::from_planes(
                    w,
                    h,
                    probs.sample(b)[..NUM_CLASSES * n_pix].to_vec(),
                    MaskKind::Soft,
                )?
                .harden();
                let mean: f64 = ClassId::ALL
                    .iter()
                    .map(|&c| f_score(&pred, &data[i].masks, c))
                    .sum::<Result<f64>>()?
                    / NUM_CLASSES as f64;
                scores.push(mean);
            }
            let rec = LogRecord {
                iter: it,
                phase: config.phase,
                loss: g.value(loss).item(),
                per_class: None,
                confidences: None,
                lr: adam.learning_rate,
                wallclock: session.elapsed(),
                psnr: None,
                f_score: Some(scores.iter().sum::<f64>() / scores.len() as f64),
            };
            session.record(rec)?;
        }
        if should_checkpoint(config, it) {
            session.save(&snapshot(config, it, &spec, store_tensors(model.params()), &adam), true)?;
        }
    }
    let ck = snapshot(
        config,
        config.iterations().max(start),
        &spec,
        store_tensors(model.params()),
        &adam,
    );
    session.save(&ck, false)?;
    Ok(Trained {
        model,
        history: session.history,
        checkpoint: ck,
    })
}

fn snapshot(config: &TrainConfig, it: u64, spec: &ModelSpec, params: NamedTensors, adam: &Adam) -> Checkpoint {
    Checkpoint {
        meta: meta(config, it, spec.clone(), adam),
        params,
        optimizer: adam.state(),
    }
}

fn mask_plane_tensor(idx: &[usize], data: &[TrainingSample], class: ClassId) -> Tensor {
    let (w, h) = data[idx[0]].masks.dims();
    let planes: Vec<Tensor> = idx
        .iter()
        .map(|&i| Tensor::from_vec([1, 1, h, w], data[i].masks.plane(class).to_vec()))
        .collect();
    Tensor::stack(&planes)
}

/// First-stage training of class `config.class_index` on its class-blurred inputs.
pub fn train_stage1(
    config: &TrainConfig,
    data: &[TrainingSample],
    resume: Option<&Checkpoint>,
    out: Option<&Path>,
) -> Result<Trained<Stage1Model>> {
    config.validate()?;
    ensure!(config.phase == Phase::Stage1, "train_stage1 needs phase stage1");
    let class = config.class_index.expect("validated");
    uniform_dims(data)?;
    for (i, s) in data.iter().enumerate() {
        let ok = s
            .class_blurred
            .as_ref()
            .is_some_and(|m| m.get(&class).is_some_and(|img| img.same_dims(&s.clean)));
        ensure!(ok, "sample {i} has no class-blurred image for class {class}");
    }
    let fx = config.feature_extractor()?;
    let mut adam = Adam::new(config.learning_rate());
    let (mut model, start) = match resume {
        Some(ck) => {
            check_width(config, &ck.meta.model)?;
            let m = ck.stage1()?;
            ensure!(
                m.class() == class,
                "checkpoint is for class {} but the configuration names class {class}",
                m.class()
            );
            (m, resume_state(config, ck, &mut adam)?)
        }
        None => (Stage1Model::new(class, config.width_multiplier, config.master_seed)?, 0),
    };
    let spec = ModelSpec::Stage1 {
        class,
        width_multiplier: config.width_multiplier,
        seed: model.seed(),
    };
    let mut session = Session::open(out, start > 0)?;
    for it in start + 1..=config.iterations() {
        let idx = batch_indices(config.master_seed, it, data.len(), config.batch_size);
        let y = stack(&idx, |i| &data[i].class_blurred.as_ref().expect("checked")[&class]);
        let x = stack(&idx, |i| &data[i].clean);
        let m = mask_plane_tensor(&idx, data, class);
        let mut g = Graph::new();
        let (yv, xv, mv) = (g.constant(y), g.constant(x.clone()), g.constant(m));
        let pred = model.forward(&mut g, yv, mv)?;
        let d = g.sub(pred, xv);
        let a = g.abs(d);
        let l1 = g.mean_all(a);
        let mut loss = l1;
        if config.loss.lambda1 > 0.0 {
            let p = perceptual_graph(&mut g, &fx, pred, xv)?;
            let wp = g.scale(p, config.loss.lambda1);
            loss = g.add(l1, wp);
        }
        let grads = g.backward(loss);
        adam.learning_rate = config.learning_rate_at(it);
        adam.next_step();
        let gs = grads.for_store(&g, model.params());
        adam.apply(model.params_mut(), &gs);
        if should_log(config, it) {
            let rec = LogRecord {
                iter: it,
                phase: config.phase,
                loss: g.value(loss).item(),
                per_class: None,
                confidences: None,
                lr: adam.learning_rate,
                wallclock: session.elapsed(),
                psnr: Some(batch_psnr(g.value(pred), &x)),
                f_score: None,
            };
            session.record(rec)?;
        }
        if should_checkpoint(config, it) {
            session.save(&snapshot(config, it, &spec, store_tensors(model.params()), &adam), true)?;
        }
    }
    let ck = snapshot(
        config,
        config.iterations().max(start),
        &spec,
        store_tensors(model.params()),
        &adam,
    );
    session.save(&ck, false)?;
    Ok(Trained {
        model,
        history: session.history,
        checkpoint: ck,
    })
}

/// Input and loss masks `[1, 4, h, w]` of every sample.
pub fn prepare_masks(data: &[TrainingSample], mode: MaskMode, snet: Option<&SNetModel>) -> Result<Vec<(Tensor, Tensor)>> {
    match mode {
        MaskMode::Stored => Ok(data
            .iter()
            .map(|s| {
                let t = s.masks.to_tensor();
                (t.clone(), t)
            })
            .collect()),
        MaskMode::Snet => {
            let snet = snet.ok_or_else(|| {
                Error::InvalidArgument("mask mode snet needs a segmentation checkpoint".into())
            })?;
            data.iter()
                .map(|s| {
                    let input = snet.predict(&s.blurry.to_tensor())?;
                    let truth = SemanticMaskSet::from_tensor(&snet.predict(&s.clean.to_tensor())?, 0, MaskKind::Soft)?
                        .harden()
                        .to_tensor();
                    Ok((input, truth))
                })
                .collect()
        }
    }
}

fn umsn_params(pair: &UmsnPair) -> NamedTensors {
    let mut p = store_tensors(pair.net.params());
    if let Some(cn) = &pair.cn {
        p.extend(store_tensors(cn.params()));
    }
    p
}

/// Joint training of the multi-stream network (and its scorer when the
/// variant is confidence-guided) on `L_c + λ1·L_p`.
pub fn train_umsn(
    config: &TrainConfig,
    data: &[TrainingSample],
    init: UmsnInit,
    out: Option<&Path>,
) -> Result<Trained<UmsnPair>> {
    config.validate()?;
    ensure!(config.phase == Phase::Umsn, "train_umsn needs phase umsn");
    uniform_dims(data)?;
    let network = config.variant.network(config.width_multiplier);
    let confidence = config.variant.confidence_guided();
    let fx = config.feature_extractor()?;
    let mut adam = Adam::new(config.learning_rate());
    let (mut pair, start) = match &init.resume {
        Some(ck) => {
            check_width(config, &ck.meta.model)?;
            let (net, cn) = ck.umsn()?;
            ensure!(
                *net.config() == network && cn.is_some() == confidence,
                "checkpoint holds a different network variant"
            );
            let start = resume_state(config, ck, &mut adam)?;
            (UmsnPair { net, cn }, start)
        }
        None => {
            let mut net = UMSNModel::new(network, config.master_seed)?;
            if network.streams {
                let mut seen = [false; NUM_CLASSES];
                for s in &init.stage1 {
                    net.load_stream(s)?;
                    seen[s.class().plane()] = true;
                }
                ensure!(
                    seen.iter().all(|&b| b),
                    "joint training needs one first-stage network per class, got {}",
                    init.stage1.len()
                );
            }
            let cn = if confidence {
                Some(CNModel::new(config.width_multiplier, config.master_seed)?)
            } else {
                None
            };
            (UmsnPair { net, cn }, 0)
        }
    };
    let masks = prepare_masks(data, config.masks, init.snet.as_ref())?;
    let spec = ModelSpec::Umsn {
        network,
        seed: pair.net.seed(),
        confidence,
    };
    let mut session = Session::open(out, start > 0)?;
    for it in start + 1..=config.iterations() {
        let idx = batch_indices(config.master_seed, it, data.len(), config.batch_size);
        let y = stack(&idx, |i| &data[i].blurry);
        let x = stack(&idx, |i| &data[i].clean);
        let mi = Tensor::stack(&idx.iter().map(|&i| masks[i].0.clone()).collect::<Vec<_>>());
        let ml = Tensor::stack(&idx.iter().map(|&i| masks[i].1.clone()).collect::<Vec<_>>());
        let mut g = Graph::new();
        let (yv, xv) = (g.constant(y), g.constant(x.clone()));
        let (miv, mlv) = (g.constant(mi), g.constant(ml));
        let pred = pair.net.forward(&mut g, yv, miv)?;
        let confidences: Option<Vec<Var>> = match &pair.cn {
            Some(cn) => {
                let fixed = g.detach(pred);
                let mut cs = Vec::with_capacity(NUM_CLASSES);
                for k in 0..NUM_CLASSES {
                    let m = g.slice_channels(mlv, k, 1);
                    let mp = g.mul(fixed, m);
                    let mt = g.mul(xv, m);
                    cs.push(cn.forward(&mut g, mp, mt)?);
                }
                Some(cs)
            }
            None => None,
        };
        let tl = total_loss_graph(&mut g, pred, xv, mlv, confidences.as_deref(), &fx, &config.loss)?;
        let grads = g.backward(tl.objective);
        adam.learning_rate = config.learning_rate_at(it);
        adam.next_step();
        let gs = grads.for_store(&g, pair.net.params());
        adam.apply(pair.net.params_mut(), &gs);
        if let Some(cn) = pair.cn.as_mut() {
            let gs = grads.for_store(&g, cn.params());
            adam.apply(cn.params_mut(), &gs);
        }
        if should_log(config, it) {
            let d = &tl.diagnostics;
            let rec = LogRecord {
                iter: it,
                phase: config.phase,
                loss: d.total,
                per_class: Some(d.per_class),
                confidences: Some(d.confidences),
                lr: adam.learning_rate,
                wallclock: session.elapsed(),
                psnr: Some(batch_psnr(g.value(pred), &x)),
                f_score: None,
            };
            session.record(rec)?;
        }
        if should_checkpoint(config, it) {
            session.save(&snapshot(config, it, &spec, umsn_params(&pair), &adam), true)?;
        }
    }
    let ck = snapshot(config, config.iterations().max(start), &spec, umsn_params(&pair), &adam);
    session.save(&ck, false)?;
    Ok(Trained {
        model: pair,
        history: session.history,
        checkpoint: ck,
    })
}

/// Reads a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::{generate_samples, Corpus, DatasetConfig, KernelSizeRange};

    fn tiny_data(n: usize) -> Vec<TrainingSample> {
        let cfg = DatasetConfig {
            num_samples: n,
            patch_size: 16,
            num_kernels: 10,
            kernel_sides: KernelSizeRange { min: 3, max: 7 },
            master_seed: 3,
            ..DatasetConfig::default()
        };
        generate_samples(&Corpus::synthetic(1, n, 16, 16), &cfg).unwrap()
    }

    fn config(phase: Phase, iterations: u64) -> TrainConfig {
        TrainConfig {
            iterations: Some(iterations),
            batch_size: 2,
            width_multiplier: 0.25,
            master_seed: 5,
            class_index: Some(ClassId::new(3).unwrap()),
            ..TrainConfig::new(phase)
        }
    }

    #[test]
    fn batches_cover_each_epoch() {
        let mut seen: Vec<usize> = (1..=3).flat_map(|it| batch_indices(1, it, 6, 2)).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(batch_indices(1, 7, 6, 4), batch_indices(1, 7, 6, 4));
    }

    #[test]
    fn snet_finetune_requires_checkpoint() {
        let data = tiny_data(2);
        let err = train_snet(&config(Phase::SnetFinetune, 1), &data, None, None).unwrap_err();
        assert!(err.to_string().contains("checkpoint"));
    }

    #[test]
    fn stage1_resume_matches_uninterrupted_run() {
        let data = tiny_data(3);
        let full = train_stage1(&config(Phase::Stage1, 4), &data, None, None).unwrap();
        let first = train_stage1(&config(Phase::Stage1, 2), &data, None, None).unwrap();
        let rest = train_stage1(&config(Phase::Stage1, 4), &data, Some(&first.checkpoint), None).unwrap();
        assert_eq!(rest.checkpoint.params, full.checkpoint.params);
        let losses = |h: &[LogRecord]| h.iter().map(|r| r.loss).collect::<Vec<_>>();
        let mut joined = losses(&first.history);
        joined.extend(losses(&rest.history));
        assert_eq!(joined, losses(&full.history));
    }

    #[test]
    fn umsn_requires_all_streams() {
        let data = tiny_data(2);
        let cfg = config(Phase::Umsn, 1);
        let err = train_umsn(&cfg, &data, UmsnInit::default(), None).unwrap_err();
        assert!(err.to_string().contains("first-stage"));
    }

    #[test]
    fn umsn_logs_and_checkpoints() {
        let data = tiny_data(2);
        let mut cfg = config(Phase::Umsn, 2);
        cfg.checkpoint_every = 1;
        let stage1 = ClassId::ALL
            .iter()
            .map(|&c| Stage1Model::new(c, 0.25, 1).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let init = UmsnInit {
            stage1,
            ..UmsnInit::default()
        };
        let trained = train_umsn(&cfg, &data, init, Some(dir.path())).unwrap();
        let log = read_log(&dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(log, trained.history);
        assert_eq!(log.len(), 2);
        for r in &log {
            assert!(r.confidences.unwrap().iter().all(|&c| c > 0.0 && c <= 1.0));
        }
        assert!(dir.path().join("checkpoint-00000001").join("meta.json").exists());
        let ck = Checkpoint::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
        assert_eq!(ck.meta.iteration, 2);
        let (_, cn) = ck.umsn().unwrap();
        assert!(cn.is_some());
    }

    #[test]
    fn stage1_needs_class_blurred_data() {
        let mut data = tiny_data(2);
        data[1].class_blurred = None;
        assert!(train_stage1(&config(Phase::Stage1, 1), &data, None, None).is_err());
    }
}

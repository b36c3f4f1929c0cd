//! Training and evaluation loops and run reports.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::{DatasetSpec, ExperimentConfig};
use super::data::{load_cifar10, synth_dataset, Dataset};
use super::optim::{cosine_lr, AdamW};
use crate::autodiff::Graph;
use crate::backbone::{Backbone, ForwardOptions, PlanUsage, Seeds};
use crate::diagnostics::{adjacent_head_curve, HeadSimilarityReport};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::TensorF;

/// Images per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 64;
/// Validation images used for head-similarity curves.
pub const SIMILARITY_BATCH: usize = 64;
/// Base seed for per-sample plans outside training.
pub const EVAL_SAMPLE_SEED: u64 = 0x4556_414C;

const ORDER_STREAM: u64 = 1;
const PLAN_STREAM: u64 = 2;

/// What the training loop reports after every optimizer step.
pub struct StepRecord<'a> {
    pub epoch: usize,
    /// Global step index, from 0.
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub batch_size: usize,
    pub plans: &'a PlanUsage,
    pub model: &'a Backbone,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's samples.
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub fingerprint: String,
    pub grouping: String,
    pub posenc: String,
    pub seed: u64,
    pub param_count: usize,
    pub epochs: Vec<EpochRecord>,
    pub final_val_acc: f64,
    pub final_train_loss: f64,
    /// Adjacent-head similarity of every block after training.
    pub head_similarity: HeadSimilarityReport,
    pub wall_time_s: f64,
    /// Git-style SHA-256 object hash of the checkpoint bytes.
    pub checkpoint_hash: String,
}

impl RunReport {
    pub const EPOCH_CSV_HEADER: &'static str = "epoch,train_loss,val_acc,fingerprint";

    pub fn write_epoch_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{}", Self::EPOCH_CSV_HEADER)?;
        for e in &self.epochs {
            writeln!(
                w,
                "{},{:.12},{:.6},{}",
                e.epoch, e.train_loss, e.val_acc, self.fingerprint
            )?;
        }
        Ok(())
    }
}

/// `sha256("blob <len>\0" ++ bytes)` in hex, as git computes object ids.
pub fn git_object_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Train and validation splits described by `config`.
pub fn load_datasets(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let b = &config.backbone;
    let (train, val) = match &config.dataset {
        DatasetSpec::Synthetic {
            seed,
            n_train,
            n_val,
        } => synth_dataset(*seed, *n_train, *n_val, b.image_size, b.n_classes)?,
        DatasetSpec::Cifar10 { path, limit } => {
            let (train, test, _) = load_cifar10(path, *limit)?;
            (train, test)
        }
    };
    check_geometry(b.image_size, b.channels, b.n_classes, &train)?;
    Ok((train, val))
}

fn check_geometry(
    image_size: usize,
    channels: usize,
    n_classes: usize,
    data: &Dataset,
) -> Result<()> {
    if data.image_size() != image_size || data.channels() != channels || data.n_classes != n_classes
    {
        return Err(Error::Config(format!(
            "model expects {image_size}x{image_size}x{channels} images and {n_classes} classes, \
             dataset has {}x{}x{} and {}",
            data.image_size(),
            data.image_size(),
            data.channels(),
            data.n_classes
        )));
    }
    Ok(())
}

/// Top-1 accuracy over the whole split. Per-sample plans are drawn from a
/// fixed seed, so the result is deterministic.
pub fn evaluate(model: &Backbone, data: &Dataset) -> Result<f64> {
    let c = model.config();
    check_geometry(c.image_size, c.channels, c.n_classes, data)?;
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for (k, chunk) in indices.chunks(EVAL_CHUNK).enumerate() {
        let (images, labels) = data.batch(chunk);
        let opts = ForwardOptions {
            sample_seed: SplitMix64::substream(EVAL_SAMPLE_SEED, k as u64).next_u64(),
            tap_block: None,
        };
        let logits = model.forward_with(&images, opts)?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

fn argmax_rows(logits: &TensorF) -> Vec<usize> {
    let c = logits.last_dim();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Adjacent-head similarity curves of every block on the first
/// [`SIMILARITY_BATCH`] images of `data`.
pub fn head_similarity_report(
    model: &Backbone,
    data: &Dataset,
    fingerprint: &str,
) -> Result<HeadSimilarityReport> {
    let c = model.config();
    let mut report = HeadSimilarityReport {
        blocks: Vec::new(),
        curves: Vec::new(),
        fingerprint: fingerprint.to_string(),
    };
    if c.n_heads < 2 {
        return Ok(report);
    }
    let idx: Vec<usize> = (0..data.len().min(SIMILARITY_BATCH)).collect();
    let (images, _) = data.batch(&idx);
    for b in 0..c.depth {
        let feats = model.collect_head_features_with(&images, b, EVAL_SAMPLE_SEED)?;
        report.blocks.push(b);
        report.curves.push(adjacent_head_curve(&feats)?);
    }
    Ok(report)
}

/// Loads the configured data and trains; see [`train_on`].
pub fn train(config: &ExperimentConfig) -> Result<(RunReport, Backbone)> {
    let (train_set, val_set) = load_datasets(config)?;
    train_on(config, &train_set, &val_set, &mut |_| {})
}

/// Trains a fresh backbone on `train_set`, evaluating on `val_set` after every
/// epoch. `observer` sees every step. When `config.output_dir` is set, writes
/// `epochs.csv`, `head_similarity.csv`, `report.json` and `checkpoint.rack`
/// there.
pub fn train_on(
    config: &ExperimentConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    observer: &mut dyn FnMut(&StepRecord),
) -> Result<(RunReport, Backbone)> {
    config.validate()?;
    let start = Instant::now();
    let fingerprint = config.fingerprint();
    let b = &config.backbone;
    check_geometry(b.image_size, b.channels, b.n_classes, train_set)?;
    check_geometry(b.image_size, b.channels, b.n_classes, val_set)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Dataset("empty train or validation split".into()));
    }

    let mut model = Backbone::build_with_seeds(b.clone(), Seeds::from_init(config.seed))?;
    let mut opt = AdamW::new(model.params(), config.weight_decay);
    let steps_per_epoch = train_set.len().div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;
    let mut order_rng = SplitMix64::substream(config.seed, ORDER_STREAM);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let lr = cosine_lr(step, total, config.lr, config.min_lr);
            let (images, labels) = train_set.batch(chunk);
            let mut g = Graph::new();
            let vars = model.record_params(&mut g, true);
            let opts = ForwardOptions {
                sample_seed: SplitMix64::substream(config.seed ^ PLAN_STREAM, step as u64)
                    .next_u64(),
                tap_block: None,
            };
            let out = model.forward_graph(&mut g, &vars, &images, opts)?;
            let loss_var = g.cross_entropy(out.logits, &labels)?;
            let loss = g.value(loss_var).data()[0];
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    lr,
                    loss,
                });
            }
            g.backward(loss_var)?;
            let zeros: Vec<Vec<f64>> = vars
                .iter()
                .filter(|&&v| g.grad(v).is_none())
                .map(|&v| vec![0.0; g.value(v).numel()])
                .collect();
            let mut fill = zeros.iter();
            let grads: Vec<&[f64]> = vars
                .iter()
                .map(|&v| {
                    g.grad(v).unwrap_or_else(|| {
                        fill.next().expect("one zero buffer per missing gradient")
                    })
                })
                .collect();
            opt.step(model.params_mut(), &grads, lr)?;
            loss_sum += loss * chunk.len() as f64;
            observer(&StepRecord {
                epoch,
                step,
                lr,
                loss,
                batch_size: chunk.len(),
                plans: &out.plans,
                model: &model,
            });
            step += 1;
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_acc: evaluate(&model, val_set)?,
        });
    }

    let head_similarity = head_similarity_report(&model, val_set, &fingerprint)?;
    let mut checkpoint = Vec::new();
    model.write_checkpoint_tagged(&mut checkpoint, Some(&fingerprint))?;
    let last = epochs.last().expect("at least one epoch").clone();
    let report = RunReport {
        fingerprint,
        grouping: b.grouping.label(),
        posenc: b.posenc.label().into(),
        seed: config.seed,
        param_count: model.param_count(),
        epochs,
        final_val_acc: last.val_acc,
        final_train_loss: last.train_loss,
        head_similarity,
        wall_time_s: start.elapsed().as_secs_f64(),
        checkpoint_hash: git_object_hash(&checkpoint),
    };
    if let Some(dir) = &config.output_dir {
        write_run_outputs(dir, config, &report, &checkpoint)?;
    }
    Ok((report, model))
}

fn write_run_outputs(
    dir: &Path,
    config: &ExperimentConfig,
    report: &RunReport,
    checkpoint: &[u8],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = Vec::new();
    report.write_epoch_csv(&mut csv)?;
    std::fs::write(dir.join("epochs.csv"), csv)?;
    let mut sim = Vec::new();
    report.head_similarity.write_csv(&mut sim)?;
    std::fs::write(dir.join("head_similarity.csv"), sim)?;
    let json = serde_json::json!({
        "fingerprint": report.fingerprint,
        "config": config.to_kv(),
        "report": report,
    });
    std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&json)?)?;
    std::fs::write(dir.join("checkpoint.rack"), checkpoint)?;
    Ok(())
}

/// Validation accuracy of softmax regression on raw pixels, trained with
/// Adam on full-resolution flattened images.
pub fn linear_probe(
    train_set: &Dataset,
    val_set: &Dataset,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let dim: usize = train_set.images.shape()[1..].iter().product();
    let classes = train_set.n_classes;
    let flat = |t: TensorF| {
        let n = t.shape()[0];
        t.reshape(&[n, dim])
    };
    let mut params = vec![TensorF::zeros(&[dim, classes]), TensorF::zeros(&[classes])];
    let mut opt = AdamW::new(&params, 0.0);
    let mut rng = SplitMix64::new(seed);
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(64) {
            let (x, y) = train_set.batch(chunk);
            let mut g = Graph::new();
            let x = g.constant(flat(x)?);
            let w = g.param(params[0].clone());
            let b = g.param(params[1].clone());
            let z = g.matmul(x, w)?;
            let z = g.add(z, b)?;
            let loss = g.cross_entropy(z, &y)?;
            g.backward(loss)?;
            let grads = [g.grad(w).expect("param"), g.grad(b).expect("param")];
            opt.step(&mut params, &grads, lr)?;
        }
    }
    let idx: Vec<usize> = (0..val_set.len()).collect();
    let (x, y) = val_set.batch(&idx);
    let x = flat(x)?;
    let mut g = Graph::new();
    let (xv, w, b) = (
        g.constant(x),
        g.constant(params[0].clone()),
        g.constant(params[1].clone()),
    );
    let z = g.matmul(xv, w)?;
    let z = g.add(z, b)?;
    let pred = argmax_rows(g.value(z));
    Ok(pred.iter().zip(&y).filter(|(p, l)| p == l).count() as f64 / y.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;

    fn small_config(epochs: usize) -> ExperimentConfig {
        ExperimentConfig {
            backbone: BackboneConfig {
                image_size: 16,
                d_model: 16,
                depth: 1,
                n_heads: 2,
                ..BackboneConfig::default()
            },
            dataset: DatasetSpec::Synthetic {
                seed: 3,
                n_train: 64,
                n_val: 32,
            },
            epochs,
            batch_size: 16,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn git_hash_of_empty_blob() {
        // `git hash-object --object-format=sha256 /dev/null`
        assert_eq!(
            git_object_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn runs_are_reproducible_and_write_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = small_config(2);
        config.output_dir = Some(dir.path().to_path_buf());
        let (a, model) = train(&config).unwrap();
        let (b, _) = train(&config).unwrap();
        assert_eq!(a.epochs, b.epochs);
        assert_eq!(a.checkpoint_hash, b.checkpoint_hash);
        assert_eq!(a.epochs.len(), 2);
        for f in [
            "epochs.csv",
            "head_similarity.csv",
            "report.json",
            "checkpoint.rack",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let csv = std::fs::read_to_string(dir.path().join("epochs.csv")).unwrap();
        assert!(csv.lines().skip(1).all(|l| l.ends_with(&a.fingerprint)));
        let ckpt = std::fs::read(dir.path().join("checkpoint.rack")).unwrap();
        assert_eq!(git_object_hash(&ckpt), a.checkpoint_hash);
        let loaded = Backbone::load(&dir.path().join("checkpoint.rack")).unwrap();
        assert_eq!(loaded, model);
        assert_eq!(a.head_similarity.curves.len(), 1);
    }

    #[test]
    fn untrained_model_is_near_chance_and_evaluation_is_repeatable() {
        let config = ExperimentConfig::default();
        let (_, val) = load_datasets(&config).unwrap();
        // A single init can correlate with the labels by chance; the mean
        // over inits sits near 0.25.
        let accs: Vec<f64> = (0..8)
            .map(|s| evaluate(&Backbone::build(config.backbone.clone(), s).unwrap(), &val).unwrap())
            .collect();
        let mean = accs.iter().sum::<f64>() / 8.0;
        assert!((0.15..=0.35).contains(&mean), "{accs:?}");
        let model = Backbone::build(config.backbone.clone(), 0).unwrap();
        assert_eq!(accs[0], evaluate(&model, &val).unwrap());
    }

    #[test]
    fn geometry_mismatch_is_an_error() {
        let config = small_config(1);
        let (_, val) = load_datasets(&ExperimentConfig::default()).unwrap();
        let model = Backbone::build(config.backbone.clone(), 0).unwrap();
        assert!(matches!(evaluate(&model, &val), Err(Error::Config(_))));
    }

    #[test]
    fn divergence_is_reported_with_context() {
        let mut config = small_config(1);
        config.lr = 1e300;
        config.min_lr = 0.0;
        let err = train(&config).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 0, .. }), "{err}");
    }
}

//! The epoch loop: data order, augmentation, logging, checkpoints, resume.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use graphjigsaw_core::training::{argmax, GraphJigsawModel, StepReport, Trainer};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{self, Checkpoint};
use crate::config::Config;
use crate::data::{self, augment_eval, augment_train, stack, DecodedImage, Manifest, Split};
use crate::error::{AppError, AppResult};
use crate::seeds::derive_seed;

pub const METRICS_FILE: &str = "metrics.csv";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const FINAL_CHECKPOINT: &str = "final.gjck";

const INIT_DOMAIN: u64 = 1;
const ORDER_DOMAIN: u64 = 2;
const AUGMENT_DOMAIN: u64 = 3;
const EVAL_BATCH: usize = 64;

/// Decoded training and validation images.
pub struct TrainData {
    pub manifest: Manifest,
    pub train: Vec<(DecodedImage, usize)>,
    pub validation: Vec<(DecodedImage, usize)>,
}

impl TrainData {
    pub fn load(config: &Config) -> AppResult<Self> {
        let root = config.data_root()?;
        let manifest = data::scan_dataset(root, config.data.min_images, Split::Train)?.with_holdout(config.data.split);
        Self::from_manifest(manifest, config.resize())
    }

    pub fn from_manifest(manifest: Manifest, side: usize) -> AppResult<Self> {
        let decode = |split| -> AppResult<Vec<(DecodedImage, usize)>> {
            let samples = manifest.of_split(split);
            let images = data::load_all(&manifest, &samples, side)?;
            Ok(images.into_iter().zip(samples.iter().map(|s| s.identity)).collect())
        };
        let train = decode(Split::Train)?;
        let validation = decode(Split::Validation)?;
        Ok(Self {
            manifest,
            train,
            validation,
        })
    }
}

pub fn iterations_per_epoch(samples: usize, batch_size: usize) -> usize {
    (samples / batch_size).max(1)
}

/// Fresh model for `config`; the backbone does not depend on whether heads are attached.
pub fn init_model(config: &Config, num_classes: usize) -> AppResult<GraphJigsawModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.train.seed, INIT_DOMAIN, 0, 0));
    let heads = config.with_heads().then_some((config.jigsaw.t_enc, config.jigsaw.t_dec));
    Ok(GraphJigsawModel::init(config.backbone(num_classes), heads, &mut rng)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub loss_cls: f64,
    pub loss_jig: Option<f64>,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub model: GraphJigsawModel,
    pub epochs: Vec<EpochSummary>,
    pub iterations: u64,
    pub checkpoints: Vec<PathBuf>,
    pub metrics: PathBuf,
}

fn csv_err(e: impl std::fmt::Display) -> AppError {
    AppError::Data(format!("metrics: {e}"))
}

fn join_stages(r: &StepReport) -> String {
    r.loss_jig.iter().map(|(s, _)| s.to_string()).collect::<Vec<_>>().join(";")
}

fn join_losses(r: &StepReport) -> String {
    r.loss_jig.iter().map(|(_, l)| format!("{l:.9e}")).collect::<Vec<_>>().join(";")
}

fn open_log(path: &Path, header: &str, append: bool) -> AppResult<File> {
    if append && path.exists() {
        return OpenOptions::new().append(true).open(path).map_err(AppError::io(path));
    }
    let mut f = File::create(path).map_err(AppError::io(path))?;
    writeln!(f, "{header}").map_err(AppError::io(path))?;
    Ok(f)
}

/// Classification accuracy with evaluation-mode statistics.
pub fn accuracy(model: &GraphJigsawModel, images: &[(DecodedImage, usize)], resolution: usize) -> AppResult<f64> {
    if images.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in images.chunks(EVAL_BATCH) {
        let x = stack(chunk.iter().map(|(img, _)| augment_eval(img, resolution)).collect(), resolution);
        let logits = model.logits(&x)?;
        let k = logits.shape()[1];
        correct += logits
            .data()
            .chunks(k)
            .zip(chunk)
            .filter(|(row, (_, y))| argmax(row) == *y)
            .count();
    }
    Ok(correct as f64 / images.len() as f64)
}

/// Train from scratch, or continue `resume`, writing logs and checkpoints under `out`.
pub fn train(config: &Config, data: &TrainData, out: &Path, resume: Option<Checkpoint>) -> AppResult<TrainOutcome> {
    std::fs::create_dir_all(out).map_err(AppError::io(out))?;
    if data.train.is_empty() {
        return Err(AppError::Data("no training images".into()));
    }
    let num_classes = data.manifest.num_classes();
    let resolution = config.model.input_resolution;
    if data.train[0].0.side < resolution {
        return Err(AppError::Config("decoded images are smaller than the input resolution".into()));
    }
    let ipe = iterations_per_epoch(data.train.len(), config.train.batch_size);
    let batch = config.train.batch_size.min(data.train.len());
    let tc = config.train_config();

    let (model, start_epoch, resumed) = match resume {
        Some(ck) => {
            if ck.identities != data.manifest.identities {
                return Err(AppError::Data("checkpoint identities do not match the dataset".into()));
            }
            (ck.model.clone(), ck.epochs_completed, Some((ck.iteration, ck.momentum)))
        }
        None => (init_model(config, num_classes)?, 0, None),
    };
    let mut trainer = Trainer::new(model, tc, ipe)?;
    let append = resumed.is_some();
    if let Some((iteration, momentum)) = resumed {
        trainer.restore(iteration, momentum);
    }

    let metrics_path = out.join(METRICS_FILE);
    let mut metrics = open_log(&metrics_path, "epoch,iteration,stage_active,loss_cls,loss_jig,lr", append)?;
    let epochs_path = out.join(EPOCHS_FILE);
    let mut epoch_log = open_log(
        &epochs_path,
        "epoch,loss_cls,loss_jig,train_accuracy,val_accuracy,lr",
        append,
    )?;

    let mut summaries = Vec::new();
    let mut checkpoints = Vec::new();
    let seed = config.train.seed;
    for epoch in start_epoch..config.train.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, ORDER_DOMAIN, epoch as u64, 0)));
        let (mut cls_sum, mut jig_sum, mut jig_n, mut acc_sum, mut last_lr) = (0.0, 0.0, 0usize, 0.0, 0.0);
        for it in 0..ipe {
            let picks = &order[it * batch..(it + 1) * batch];
            let mut images = Vec::with_capacity(batch);
            let mut labels = Vec::with_capacity(batch);
            for (slot, &i) in picks.iter().enumerate() {
                let pos = (it * batch + slot) as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, AUGMENT_DOMAIN, epoch as u64, pos));
                images.push(augment_train(&data.train[i].0, resolution, &mut rng));
                labels.push(data.train[i].1);
            }
            let report = match trainer.step(&stack(images, resolution), &labels) {
                Ok(r) => r,
                Err(e) => {
                    let err = AppError::from(e);
                    if matches!(err, AppError::Numeric(_)) {
                        write_abort(out, epoch, trainer.iteration(), &err.to_string())?;
                    }
                    return Err(err);
                }
            };
            writeln!(
                metrics,
                "{},{},{},{:.9e},{},{:.9e}",
                epoch,
                report.iteration,
                join_stages(&report),
                report.loss_cls,
                join_losses(&report),
                report.lr
            )
            .map_err(csv_err)?;
            cls_sum += report.loss_cls;
            for (_, l) in &report.loss_jig {
                jig_sum += l;
                jig_n += 1;
            }
            acc_sum += report.accuracy;
            last_lr = report.lr;
        }
        let val_accuracy = if data.validation.is_empty() {
            None
        } else {
            Some(accuracy(&trainer.model, &data.validation, resolution)?)
        };
        let summary = EpochSummary {
            epoch,
            loss_cls: cls_sum / ipe as f64,
            loss_jig: (jig_n > 0).then(|| jig_sum / jig_n as f64),
            train_accuracy: acc_sum / ipe as f64,
            val_accuracy,
            lr: last_lr,
        };
        writeln!(
            epoch_log,
            "{},{:.9e},{},{:.6},{},{:.9e}",
            epoch,
            summary.loss_cls,
            summary.loss_jig.map_or(String::new(), |l| format!("{l:.9e}")),
            summary.train_accuracy,
            summary.val_accuracy.map_or(String::new(), |a| format!("{a:.6}")),
            summary.lr
        )
        .map_err(csv_err)?;
        metrics.flush().map_err(csv_err)?;
        log::info!(
            "epoch {epoch}: loss_cls {:.4} train_acc {:.3}{}",
            summary.loss_cls,
            summary.train_accuracy,
            summary.val_accuracy.map_or(String::new(), |a| format!(" val_acc {a:.3}"))
        );
        summaries.push(summary);

        let done = epoch + 1;
        let every = config.train.checkpoint_every;
        let is_last = done == config.train.epochs;
        if is_last || (every > 0 && done % every == 0) {
            let path = out.join(if is_last {
                FINAL_CHECKPOINT.to_string()
            } else {
                format!("epoch{done:03}.gjck")
            });
            checkpoint::save(
                &path,
                &Checkpoint {
                    config: config.clone(),
                    identities: data.manifest.identities.clone(),
                    iteration: trainer.iteration(),
                    epochs_completed: done,
                    model: trainer.model.clone(),
                    momentum: trainer.optimizer_state().clone(),
                },
            )?;
            checkpoints.push(path);
        }
    }
    Ok(TrainOutcome {
        iterations: trainer.iteration(),
        model: trainer.model,
        epochs: summaries,
        checkpoints,
        metrics: metrics_path,
    })
}

fn write_abort(out: &Path, epoch: usize, iteration: u64, message: &str) -> AppResult<()> {
    let path = out.join("abort.json");
    let body = serde_json::json!({ "epoch": epoch, "iteration": iteration, "error": message });
    std::fs::write(&path, serde_json::to_string_pretty(&body).expect("json")).map_err(AppError::io(path))
}

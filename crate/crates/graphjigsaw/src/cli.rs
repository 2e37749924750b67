//! Command-line entry points.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::checkpoint;
use crate::config::{extract_overrides, Config};
use crate::data::{load_image, scan_dataset, Manifest, Split};
use crate::error::{AppError, AppResult};
use crate::evaluate::{embed_samples, evaluate, read_embeddings, write_embeddings, EmbeddingRecord};
use crate::synthetic::generate_synthetic;
use crate::train::{train, TrainData};
use crate::visualize::{retrieval_grid, to_rgb, top_k, write_gradcam_overlays, RetrievalRow};

#[derive(Parser, Debug)]
#[command(name = "graphjigsaw", version, about = "Stage-wise graph jigsaw training for cartoon-face identification")]
#[command(after_help = "Any --section.key VALUE pair (e.g. --jigsaw.M 3, --train.epochs 5) overrides the config file.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Output directory; defaults to runs/<command>-<UTC timestamp>.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints plus metrics.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Rank@K and CMC over a probe set and a distractor set.
    Eval {
        #[arg(long, required_unless_present = "probe_embeddings")]
        checkpoint: Option<PathBuf>,
        /// Identity-foldered probe images.
        #[arg(long, conflicts_with = "probe_embeddings")]
        probe: Option<PathBuf>,
        /// Identity-foldered distractor images.
        #[arg(long, conflicts_with = "distractor_embeddings")]
        distractors: Option<PathBuf>,
        /// Evaluate a previous embedding dump instead of images.
        #[arg(long)]
        probe_embeddings: Option<PathBuf>,
        #[arg(long)]
        distractor_embeddings: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        k: Vec<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Write embeddings for every image under a dataset root.
    EvalDump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Grad-CAM overlays for the last three stages, plus retrieval grids when a gallery is given.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        gallery: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Rank a gallery for each query image.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        query: Vec<PathBuf>,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Generate the procedural cartoon-face dataset.
    Synthesize {
        #[arg(long, default_value_t = 20)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        images_per_class: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
}

fn out_dir(common: &Common, command: &str) -> AppResult<PathBuf> {
    let dir = match &common.out {
        Some(p) => p.clone(),
        None => PathBuf::from("runs").join(format!("{command}-{}", chrono::Utc::now().format("%Y%m%d-%H%M%S"))),
    };
    std::fs::create_dir_all(&dir).map_err(AppError::io(&dir))?;
    Ok(dir)
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> AppResult<()> {
    std::fs::write(path, body).map_err(AppError::io(path))
}

/// `run.json`: the command, its outputs relative to `out`, and command-specific details.
fn write_index(out: &Path, command: &str, outputs: &[PathBuf], details: serde_json::Value) -> AppResult<()> {
    let rel: Vec<String> = outputs
        .iter()
        .map(|p| p.strip_prefix(out).unwrap_or(p).to_string_lossy().into_owned())
        .collect();
    let body = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "outputs": rel,
        "details": details,
    });
    write_file(&out.join("run.json"), serde_json::to_string_pretty(&body).expect("json"))
}

fn identity_of(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map_or_else(String::new, |n| n.to_string_lossy().into_owned())
}

fn embed_root(ck: &checkpoint::Checkpoint, root: &Path, split: Split) -> AppResult<(Manifest, Vec<EmbeddingRecord>)> {
    let manifest = scan_dataset(root, 1, split)?;
    let samples: Vec<_> = manifest.samples.iter().collect();
    let records = embed_samples(&ck.model, &manifest, &samples, ck.config.resize())?;
    Ok((manifest, records))
}

/// Parse `args` (without the program name) and run the command.
pub fn run(args: Vec<String>) -> AppResult<()> {
    let (rest, overrides) = extract_overrides(args)?;
    let cli = Cli::try_parse_from(std::iter::once("graphjigsaw".to_string()).chain(rest)).map_err(|e| {
        if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
            print!("{e}");
            std::process::exit(0);
        }
        AppError::Config(e.to_string().lines().next().unwrap_or("invalid arguments").to_string())
    })?;
    if !overrides.is_empty() && !matches!(cli.command, Command::Train { .. }) {
        return Err(AppError::Config("config overrides only apply to train".into()));
    }
    match cli.command {
        Command::Train {
            config,
            seed,
            resume,
            common,
        } => {
            let mut overrides = overrides;
            if let Some(s) = seed {
                overrides.push(("train.seed".into(), s.to_string()));
            }
            let resumed = resume.as_deref().map(checkpoint::load).transpose()?;
            let cfg = match (&config, &resumed) {
                (None, Some(ck)) if overrides.is_empty() => ck.config.clone(),
                _ => Config::load(config.as_deref(), &overrides)?,
            };
            let out = out_dir(&common, "train")?;
            let data = TrainData::load(&cfg)?;
            let cfg_path = out.join("config.toml");
            write_file(&cfg_path, cfg.to_toml())?;
            let manifest_path = out.join("manifest.csv");
            data.manifest.write_csv(&manifest_path)?;
            let outcome = train(&cfg, &data, &out, resumed)?;
            let mut outputs = vec![cfg_path, manifest_path, outcome.metrics.clone(), out.join(crate::train::EPOCHS_FILE)];
            outputs.extend(outcome.checkpoints.iter().cloned());
            let last = outcome.epochs.last();
            write_index(
                &out,
                "train",
                &outputs,
                json!({
                    "iterations": outcome.iterations,
                    "num_classes": data.manifest.num_classes(),
                    "train_images": data.train.len(),
                    "validation_images": data.validation.len(),
                    "unreadable_images": data.manifest.unreadable.len(),
                    "filtered_identities": data.manifest.filtered.len(),
                    "final_val_accuracy": last.and_then(|e| e.val_accuracy),
                }),
            )
        }
        Command::Eval {
            checkpoint: ck_path,
            probe,
            distractors,
            probe_embeddings,
            distractor_embeddings,
            k,
            common,
        } => {
            let out = out_dir(&common, "eval")?;
            let mut outputs = Vec::new();
            let (probes, distractor_records) = match probe_embeddings {
                Some(p) => {
                    let d = distractor_embeddings.map(|d| read_embeddings(&d)).transpose()?.unwrap_or_default();
                    (read_embeddings(&p)?, d)
                }
                None => {
                    let ck = checkpoint::load(ck_path.as_deref().expect("clap requires checkpoint"))?;
                    let probe = probe.ok_or_else(|| AppError::Config("--probe is required with --checkpoint".into()))?;
                    let (_, p) = embed_root(&ck, &probe, Split::Probe)?;
                    let d = match distractors {
                        Some(root) => embed_root(&ck, &root, Split::Distractor)?.1,
                        None => Vec::new(),
                    };
                    for (name, recs) in [("probe_embeddings.tsv", &p), ("distractor_embeddings.tsv", &d)] {
                        let path = out.join(name);
                        write_embeddings(&path, recs)?;
                        outputs.push(path);
                    }
                    (p, d)
                }
            };
            let report = evaluate(&probes, &distractor_records, &k)?;
            let summary = out.join("summary.json");
            write_file(&summary, serde_json::to_string_pretty(&report.summary_json()).expect("json"))?;
            let cmc_path = out.join("cmc.csv");
            write_file(&cmc_path, report.cmc_csv())?;
            outputs.extend([summary, cmc_path]);
            write_index(
                &out,
                "eval",
                &outputs,
                json!({
                    "excluded_identities": report.excluded_identities,
                    "num_distractors": distractor_records.len(),
                }),
            )
        }
        Command::EvalDump {
            checkpoint: ck_path,
            data,
            common,
        } => {
            let out = out_dir(&common, "eval-dump")?;
            let ck = checkpoint::load(&ck_path)?;
            let (_, records) = embed_root(&ck, &data, Split::Probe)?;
            let path = out.join("embeddings.tsv");
            write_embeddings(&path, &records)?;
            write_index(&out, "eval-dump", &[path], json!({ "images": records.len() }))
        }
        Command::Visualize {
            checkpoint: ck_path,
            images,
            gallery,
            top_k: k,
            common,
        } => {
            let out = out_dir(&common, "visualize")?;
            let ck = checkpoint::load(&ck_path)?;
            let written = write_gradcam_overlays(&ck.model, &images, ck.config.resize(), &out)?;
            let mut outputs: Vec<PathBuf> = written.iter().map(|(p, _)| p.clone()).collect();
            if let Some(g) = gallery {
                outputs.extend(retrieval_outputs(&ck, &images, &g, k, &out)?);
            }
            write_index(
                &out,
                "visualize",
                &outputs,
                json!({ "stages": written.iter().map(|(_, m)| m.stage).collect::<Vec<_>>() }),
            )
        }
        Command::Retrieve {
            checkpoint: ck_path,
            query,
            gallery,
            top_k: k,
            common,
        } => {
            let out = out_dir(&common, "retrieve")?;
            let ck = checkpoint::load(&ck_path)?;
            let outputs = retrieval_outputs(&ck, &query, &gallery, k, &out)?;
            write_index(&out, "retrieve", &outputs, json!({ "queries": query.len(), "top_k": k }))
        }
        Command::Synthesize {
            classes,
            images_per_class,
            resolution,
            seed,
            common,
        } => {
            let out = out_dir(&common, "synthesize")?;
            let summary = generate_synthetic(&out, classes, images_per_class, resolution, seed)?;
            let attrs = out.join("attributes.json");
            write_file(&attrs, serde_json::to_string_pretty(&summary.attributes).expect("json"))?;
            write_index(&out, "synthesize", &[attrs], json!({ "files": summary.files, "seed": seed }))
        }
    }
}

/// `retrieval.tsv` and `retrieval_grid.png` for `queries` against `gallery_root`.
fn retrieval_outputs(
    ck: &checkpoint::Checkpoint,
    queries: &[PathBuf],
    gallery_root: &Path,
    k: usize,
    out: &Path,
) -> AppResult<Vec<PathBuf>> {
    if k == 0 {
        return Err(AppError::Config("--top-k must be positive".into()));
    }
    let (gm, gallery) = embed_root(ck, gallery_root, Split::Distractor)?;
    let r = ck.config.model.input_resolution;
    let resize = ck.config.resize();
    let tile = |path: &Path| -> AppResult<image::RgbImage> {
        Ok(to_rgb(&crate::data::augment_eval(&load_image(path, resize)?, r), r))
    };
    let mut rows = Vec::new();
    let mut tsv = String::from("query\trank\tpath\tidentity\tsimilarity\n");
    for q in queries {
        let img = load_image(q, resize)?;
        let x = crate::data::stack(vec![crate::data::augment_eval(&img, r)], r);
        let e = ck.model.embed(&x)?;
        let mut results = Vec::new();
        for (rank, (i, sim)) in top_k(e.data(), &gallery, k).into_iter().enumerate() {
            let g = &gallery[i];
            tsv.push_str(&format!("{}\t{}\t{}\t{}\t{sim:+.8}\n", q.display(), rank + 1, g.path, g.identity));
            results.push((tile(&gm.root.join(&g.path))?, g.identity.clone(), sim));
        }
        rows.push(RetrievalRow {
            query: tile(q)?,
            identity: identity_of(q),
            results,
        });
    }
    let tsv_path = out.join("retrieval.tsv");
    write_file(&tsv_path, tsv)?;
    let grid_path = out.join("retrieval_grid.png");
    retrieval_grid(&rows)
        .save(&grid_path)
        .map_err(|e| AppError::Data(format!("{}: {e}", grid_path.display())))?;
    Ok(vec![tsv_path, grid_path])
}

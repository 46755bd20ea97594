//! srdiag: synthesize labeled corpora, train the two-stage super-resolution
//! generator and the multi-label classifier, restore images, and compare
//! restoration routes end to end.

mod config;

use clap::{Parser, Subcommand, ValueEnum};
use config::RunConfig;
use ndarray::Array2;
use srdiag_core::datasets::{
    encode_labels, load_manifest, manifest_label_names, split, synth_corpus, LabelSpace,
    ManifestEntry, SynthParams,
};
use srdiag_core::diagnosis::{
    build_classifier, predict_batch, predict_probs, save_thresholds, subset_accuracy,
    train_classifier, tune_thresholds, Classifier,
};
use srdiag_core::evaluation::{
    compare_pipelines, degrade_testset, export_report, restore, PipelineVariant,
};
use srdiag_core::imaging::{bicubic_resize, ensure_rgb, read_png, write_png, ImageTensor};
use srdiag_core::losses::load_feature_extractor;
use srdiag_core::sr_models::{build_discriminator, build_generator, Generator};
use srdiag_core::training::{
    export_gan_history, export_pixel_history, load_gan_checkpoint, load_pixel_checkpoint,
    CheckpointPolicy, GanStageConfig, GanTrainer, PixelStageConfig, PixelTrainer,
};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "srdiag", version, about = "Super-resolution and diagnosis pipeline")]
struct Cli {
    /// Worker threads for parallel sections; falls back to SRDIAG_THREADS,
    /// then to 1 when the config's deterministic flag is set (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-label corpus with a manifest.
    Synth {
        /// Corpus directory to create.
        #[arg(long, default_value = "corpus")]
        out: PathBuf,
        /// Stripe-orientation classes (at least 2).
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Images per class.
        #[arg(long = "per-class", default_value_t = 100)]
        per_class: usize,
        /// Square image edge in pixels.
        #[arg(long, default_value_t = 224)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the super-resolution generator: the pixel stage first, then the
    /// adversarial stage initialized from it.
    TrainSr {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        stage: Stage,
        /// Continue from this run's checkpoint instead of starting fresh.
        #[arg(long)]
        resume: bool,
        /// Generator weights to start the gan stage from, replacing the
        /// pixel-stage model this run would otherwise load.
        #[arg(long = "init-weights")]
        init_weights: Option<PathBuf>,
    },
    /// Train the multi-label classifier and tune its decision thresholds on
    /// a held-out tenth of the training split.
    TrainDiag {
        #[arg(long)]
        config: PathBuf,
    },
    /// Upscale a PNG file, or every PNG in a directory, by 4x.
    Restore {
        /// Generator weights; required for --method generator.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        /// Output file (or directory when --in is a directory).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Bicubic)]
        method: Method,
    },
    /// Degrade the held-out split, restore it along each route, classify all
    /// variants, and write report.csv plus a contact sheet.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Classifier weights.
        #[arg(long)]
        classifier: PathBuf,
        /// Tuned per-class thresholds.
        #[arg(long)]
        thresholds: PathBuf,
        /// Pixel-stage generator weights; adds the g_pix route.
        #[arg(long)]
        gpix: Option<PathBuf>,
        /// Adversarial-stage generator weights; adds the g_feat route.
        #[arg(long)]
        gfeat: Option<PathBuf>,
        /// Report directory.
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Pixel,
    Gan,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Bicubic,
    Generator,
}

/// Command failures sorted by exit code: 2 for configuration and usage
/// problems caught before side effects, 1 for runtime failures.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<srdiag_core::Error> for Failure {
    fn from(e: srdiag_core::Error) -> Self {
        use srdiag_core::Error;
        match e {
            Error::InvalidArgument(_) | Error::Config(_) | Error::Parse { .. } => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    };
    std::process::exit(code);
}

fn dispatch(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Synth {
            out,
            classes,
            per_class,
            size,
            seed,
        } => cmd_synth(cli.threads, out, classes, per_class, size, seed),
        Command::TrainSr {
            config,
            stage,
            resume,
            init_weights,
        } => cmd_train_sr(cli.threads, config, stage, resume, init_weights),
        Command::TrainDiag { config } => cmd_train_diag(cli.threads, config),
        Command::Restore {
            model,
            input,
            out,
            method,
        } => cmd_restore(cli.threads, model, input, out, method),
        Command::Evaluate {
            config,
            classifier,
            thresholds,
            gpix,
            gfeat,
            out,
        } => cmd_evaluate(cli.threads, config, classifier, thresholds, gpix, gfeat, out),
    }
}

fn setup_threads(flag: Option<usize>, deterministic: bool) -> CmdResult {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("SRDIAG_THREADS") {
            Ok(v) => v
                .parse()
                .map_err(|_| usage(format!("SRDIAG_THREADS must be a number, got {v}")))?,
            Err(_) => usize::from(deterministic),
        },
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(format!("thread pool: {e}")))?;
    Ok(())
}

fn require_file(path: &Path, what: &str) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

/// Label space and entries derived from the configured manifest, plus the
/// deterministic train / held-out division.
fn load_dataset(
    cfg: &RunConfig,
) -> Result<(LabelSpace, Vec<ManifestEntry>, Vec<ManifestEntry>), Failure> {
    let space = LabelSpace::new(manifest_label_names(&cfg.data.manifest)?)
        .map_err(srdiag_core::Error::from)?;
    let entries = load_manifest(&cfg.data.manifest, &space)?;
    let (train, held_out) = split(&entries, cfg.data.train_fraction, cfg.seed)?;
    Ok((space, train, held_out))
}

fn cmd_synth(
    threads: Option<usize>,
    out: PathBuf,
    classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
) -> CmdResult {
    setup_threads(threads, true)?;
    if classes < 2 {
        return Err(usage("--classes must be at least 2: single-class corpora cannot exercise multi-label prediction"));
    }
    let manifest = synth_corpus(&out, classes, per_class, size, seed, &SynthParams::default())?;
    println!(
        "wrote {} images across {classes} classes; manifest at {}",
        classes * per_class,
        manifest.display()
    );
    Ok(())
}

fn resume_mismatch(section: &str) -> Failure {
    usage(format!(
        "the checkpoint was written with a different {section} configuration; only the run length may change on resume"
    ))
}

fn cmd_train_sr(
    threads: Option<usize>,
    config: PathBuf,
    stage: Stage,
    resume: bool,
    init_weights: Option<PathBuf>,
) -> CmdResult {
    let cfg = RunConfig::load(&config)?;
    setup_threads(threads, cfg.deterministic)?;
    let (_, train, _) = load_dataset(&cfg)?;
    match stage {
        Stage::Pixel => {
            let ckpt = cfg.out_dir.join("g_pix.ckpt");
            let mut trainer = if resume {
                require_file(&ckpt, "checkpoint")?;
                let mut t = load_pixel_checkpoint(&ckpt)?;
                let mut wanted: PixelStageConfig = cfg.pixel_stage.clone();
                wanted.iterations = t.cfg.iterations;
                if wanted != t.cfg {
                    return Err(resume_mismatch("pixel_stage"));
                }
                t.cfg.iterations = cfg.pixel_stage.iterations;
                t
            } else {
                let gen = build_generator(&cfg.generator, cfg.seed)?;
                PixelTrainer::new(gen, &cfg.pixel_stage)?
            };
            std::fs::create_dir_all(&cfg.out_dir).map_err(srdiag_core::Error::from)?;
            let policy = CheckpointPolicy {
                path: Some(ckpt.clone()),
                every: cfg.checkpoint_every,
            };
            trainer.run(&train, &policy)?;
            trainer.save(&ckpt)?;
            let model = cfg.out_dir.join("g_pix.model");
            trainer.gen.save(&model)?;
            export_pixel_history(&trainer.history, &cfg.out_dir.join("pixel_history.csv"))?;
            println!(
                "pixel stage at iteration {}; model written to {}",
                trainer.iteration,
                model.display()
            );
        }
        Stage::Gan => {
            let ckpt = cfg.out_dir.join("g_feat.ckpt");
            let fx = load_feature_extractor(&cfg.feature_extractor)?;
            let mut trainer = if resume {
                require_file(&ckpt, "checkpoint")?;
                let mut t = load_gan_checkpoint(&ckpt)?;
                let mut wanted: GanStageConfig = cfg.gan_stage.clone();
                wanted.epochs = t.cfg.epochs;
                if wanted != t.cfg {
                    return Err(resume_mismatch("gan_stage"));
                }
                t.cfg.epochs = cfg.gan_stage.epochs;
                t
            } else {
                let init = init_weights.unwrap_or_else(|| cfg.out_dir.join("g_pix.model"));
                if !init.is_file() {
                    return Err(usage(format!(
                        "the adversarial stage fine-tunes a pixel-stage generator, but {} does not exist; run --stage pixel first or pass --init-weights",
                        init.display()
                    )));
                }
                let gen = Generator::load(&init)?;
                let disc = build_discriminator(&cfg.discriminator, cfg.seed)?;
                GanTrainer::new(gen, disc, &cfg.gan_stage)?
            };
            std::fs::create_dir_all(&cfg.out_dir).map_err(srdiag_core::Error::from)?;
            let policy = CheckpointPolicy {
                path: Some(ckpt.clone()),
                every: cfg.checkpoint_every,
            };
            trainer.run(&train, &fx, &policy)?;
            trainer.save(&ckpt)?;
            let model = cfg.out_dir.join("g_feat.model");
            trainer.gen.save(&model)?;
            export_gan_history(&trainer.history, &cfg.out_dir.join("gan_history.csv"))?;
            println!(
                "gan stage at epoch {}; model written to {}",
                trainer.epoch,
                model.display()
            );
        }
    }
    Ok(())
}

/// Reads an image the way the classifier was trained: RGB, resized to its
/// input edge, clamped.
fn classifier_input(entry: &ManifestEntry, size: usize) -> srdiag_core::Result<ImageTensor> {
    let mut img = ensure_rgb(read_png(&entry.path)?);
    if (img.height, img.width) != (size, size) {
        img = bicubic_resize(&img, size, size)?;
        img.clamp01();
    }
    Ok(img)
}

fn probs_and_truth(
    clf: &mut Classifier<f32>,
    entries: &[ManifestEntry],
    space: &LabelSpace,
) -> Result<(Array2<f32>, Array2<f32>), Failure> {
    let size = clf.cfg.input_size;
    let mut probs = Array2::zeros((entries.len(), space.size()));
    let mut truth = Array2::zeros((entries.len(), space.size()));
    for (start, chunk) in entries.chunks(32).enumerate().map(|(i, c)| (i * 32, c)) {
        let images = chunk
            .iter()
            .map(|e| classifier_input(e, size))
            .collect::<srdiag_core::Result<Vec<_>>>()?;
        let p = predict_probs(clf, &images)?;
        for (row, (e, pr)) in chunk.iter().zip(p.rows()).enumerate() {
            probs.row_mut(start + row).assign(&pr);
            for (c, v) in encode_labels(&e.labels, space)?.into_iter().enumerate() {
                truth[(start + row, c)] = v;
            }
        }
    }
    Ok((probs, truth))
}

fn cmd_train_diag(threads: Option<usize>, config: PathBuf) -> CmdResult {
    let cfg = RunConfig::load(&config)?;
    setup_threads(threads, cfg.deterministic)?;
    let (space, train, _) = load_dataset(&cfg)?;
    if cfg.diagnosis.classes != space.size() {
        return Err(usage(format!(
            "diagnosis.classes is {} but the manifest has {} distinct labels; set diagnosis.classes = {}",
            cfg.diagnosis.classes,
            space.size(),
            space.size()
        )));
    }
    let (fit, val) = split(&train, 0.9, cfg.seed)?;
    if fit.is_empty() || val.is_empty() {
        return Err(usage(format!(
            "the {}-image training split is too small to hold out a tenth for threshold tuning",
            train.len()
        )));
    }

    let mut clf = build_classifier(&cfg.diagnosis, cfg.seed)?;
    let history = train_classifier(&mut clf, &fit, &space)?;
    let (probs, truth) = probs_and_truth(&mut clf, &val, &space)?;
    let thresholds = tune_thresholds(&probs, &truth)?;

    std::fs::create_dir_all(&cfg.out_dir).map_err(srdiag_core::Error::from)?;
    let model = cfg.out_dir.join("classifier.model");
    clf.save(&model)?;
    let tpath = cfg.out_dir.join("thresholds.json");
    save_thresholds(&tpath, &space, &thresholds)?;

    let mut preds = Vec::with_capacity(val.len());
    for chunk in val.chunks(32) {
        let images = chunk
            .iter()
            .map(|e| classifier_input(e, clf.cfg.input_size))
            .collect::<srdiag_core::Result<Vec<_>>>()?;
        preds.extend(predict_batch(&mut clf, &space, &images, &thresholds)?);
    }
    let val_truth: Vec<_> = val.iter().map(|e| e.labels.clone()).collect();
    let accuracy = subset_accuracy(&preds, &val_truth)?;
    println!(
        "trained {} epochs (final loss {:.4}); validation subset accuracy {:.3}; wrote {} and {}",
        history.len(),
        history.last().copied().unwrap_or(f64::NAN),
        accuracy,
        model.display(),
        tpath.display()
    );
    Ok(())
}

fn cmd_restore(
    threads: Option<usize>,
    model: Option<PathBuf>,
    input: PathBuf,
    out: PathBuf,
    method: Method,
) -> CmdResult {
    setup_threads(threads, true)?;
    if !input.exists() {
        return Err(usage(format!("input {} does not exist", input.display())));
    }
    let gen = match method {
        Method::Bicubic => None,
        Method::Generator => {
            let path = model.ok_or_else(|| usage("--method generator requires --model"))?;
            require_file(&path, "model")?;
            Some(Generator::load(&path)?)
        }
    };
    let variant = match &gen {
        Some(g) => PipelineVariant::GPix(g),
        None => PipelineVariant::Bicubic,
    };

    let restore_one = |src: &Path, dst: &Path| -> srdiag_core::Result<()> {
        let img = ensure_rgb(read_png(src)?);
        let up = restore(&variant, &img)?;
        write_png(&up, dst)?;
        Ok(())
    };

    if input.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&input)
            .map_err(srdiag_core::Error::from)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "png"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(usage(format!("no .png files in {}", input.display())));
        }
        std::fs::create_dir_all(&out).map_err(srdiag_core::Error::from)?;
        for f in &files {
            let name = f.file_name().expect("file path has a name");
            restore_one(f, &out.join(name))?;
        }
        println!("restored {} images into {}", files.len(), out.display());
    } else {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(srdiag_core::Error::from)?;
        }
        restore_one(&input, &out)?;
        println!("restored {} to {}", input.display(), out.display());
    }
    Ok(())
}

fn cmd_evaluate(
    threads: Option<usize>,
    config: PathBuf,
    classifier: PathBuf,
    thresholds: PathBuf,
    gpix: Option<PathBuf>,
    gfeat: Option<PathBuf>,
    out: PathBuf,
) -> CmdResult {
    let cfg = RunConfig::load(&config)?;
    setup_threads(threads, cfg.deterministic)?;
    require_file(&classifier, "classifier")?;
    require_file(&thresholds, "thresholds file")?;

    let (space, _, held_out) = load_dataset(&cfg)?;
    let mut clf = Classifier::load(&classifier)?;
    if clf.cfg.input_size != 4 * cfg.evaluation.lr_size {
        return Err(usage(format!(
            "classifier input {} does not match 4x evaluation.lr_size = {}",
            clf.cfg.input_size,
            4 * cfg.evaluation.lr_size
        )));
    }
    if clf.cfg.classes != space.size() {
        return Err(usage(format!(
            "classifier has {} outputs but the manifest has {} distinct labels",
            clf.cfg.classes,
            space.size()
        )));
    }
    let thresholds = srdiag_core::diagnosis::load_thresholds(&thresholds, &space)?;

    let load_gen = |p: &Option<PathBuf>, what: &str| -> Result<Option<Generator<f32>>, Failure> {
        match p {
            None => Ok(None),
            Some(p) => {
                require_file(p, what)?;
                Ok(Some(Generator::load(p)?))
            }
        }
    };
    let gpix = load_gen(&gpix, "g_pix model")?;
    let gfeat = load_gen(&gfeat, "g_feat model")?;

    let mut variants = vec![PipelineVariant::Bicubic];
    if let Some(g) = &gpix {
        variants.push(PipelineVariant::GPix(g));
    }
    if let Some(g) = &gfeat {
        variants.push(PipelineVariant::GFeat(g));
    }
    variants.push(PipelineVariant::Original);

    let set = degrade_testset(&held_out, cfg.evaluation.lr_size)?;
    for (path, why) in &set.skipped {
        log::warn!("skipped {}: {why}", path.display());
    }
    let table = compare_pipelines(
        &mut clf,
        &space,
        &thresholds,
        &variants,
        &set,
        cfg.evaluation.previews,
    )?;
    export_report(&table, &out)?;
    for row in &table.rows {
        let p = row
            .mean_psnr
            .map(|v| format!("{v:.2} dB"))
            .unwrap_or_else(|| "-".into());
        println!(
            "{:<9} accuracy {:.3}  psnr {:>8}  n {}",
            row.variant, row.accuracy, p, row.n
        );
    }
    println!("report written to {}", out.join("report.csv").display());
    Ok(())
}

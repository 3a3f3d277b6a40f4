//! `stylekit` command-line interface.
//!
//! Exit codes: 0 on success, 2 on usage errors, 1 on runtime errors. Every
//! failure prints exactly one line to stderr of the form
//! `error kind=<kind> msg="<message>"`.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stylekit::classifier::{train_artist_classifier, ArtistClassifier, ClassifierSpec, ClassifierTrainConfig};
use stylekit::evaluation::{evaluate_suite, EvalStyle, IdentityStylizer, Stylizer};
use stylekit::grouping::{
    build_style_set_for_vector_with, build_style_set_with, ColorStatsEmbedder, Embedder, EmbeddingIndex,
    QuantileOptions, StyleSet, DEFAULT_PAIR_CAP, DEFAULT_QUANTILE,
};
use stylekit::io::{
    list_images, list_images_recursive, load_flat_corpus, load_image, load_labeled_corpus, save_image,
    stylize_any_size, stylize_video,
};
use stylekit::training::{TrainConfig, TrainState, Trainer};
use stylekit::{Error, ImageBatch, Networks};

#[derive(Debug, Parser)]
#[command(name = "stylekit", version, about = "Style-aware encoder-decoder style transfer")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Compute device. Only `cpu` is available.
    #[arg(long, global = true, env = "STYLEKIT_DEVICE", default_value = "cpu", value_parser = ["cpu"])]
    device: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train encoder, decoder, transformer and discriminator on one style set.
    Train(TrainArgs),
    /// Stylize a single image with a trained checkpoint.
    Stylize(StylizeArgs),
    /// Stylize every frame in a directory of numbered images.
    StylizeVideo(StylizeVideoArgs),
    /// Collect the style images related to a query image.
    Group(GroupArgs),
    /// Score stylizations by the rate at which they fool an artist classifier.
    Evaluate(EvaluateArgs),
    /// Train the artist classifier used for grouping and evaluation.
    ClassifierTrain(ClassifierTrainArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Preset {
    /// Reduced sizes that train in minutes on a CPU.
    Desk,
    /// 768px patches, full width, 300k iterations.
    Full,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory of content images.
    #[arg(long)]
    content: PathBuf,
    /// Directory of style images.
    #[arg(long, conflicts_with = "style_set", required_unless_present = "style_set")]
    styles: Option<PathBuf>,
    /// Style-set manifest produced by `group`.
    #[arg(long)]
    style_set: Option<PathBuf>,
    /// Directory for checkpoints and the step history.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// TOML file of configuration keys; its values override the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    lr_drop_iter: Option<u64>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    width_scale: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

#[derive(Debug, Args)]
struct StylizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct StylizeVideoArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of frames; processed in file-name order.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct GroupArgs {
    #[arg(long)]
    query: PathBuf,
    /// Directory searched recursively for images.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = DEFAULT_QUANTILE)]
    quantile: f64,
    /// Artist classifier providing the embedding; colour statistics are used
    /// when absent.
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// Largest number of pairs used for the distance quantile before sampling.
    #[arg(long, default_value_t = DEFAULT_PAIR_CAP)]
    pair_cap: usize,
    /// Manifest path; printed to stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Also write the corpus embedding index here.
    #[arg(long)]
    save_index: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    classifier: PathBuf,
    /// Directory of content images to stylize.
    #[arg(long)]
    content: PathBuf,
    /// `ARTIST=CHECKPOINT`; repeat for each style.
    #[arg(long = "style", value_parser = parse_style, required = true)]
    styles: Vec<(String, PathBuf)>,
    #[arg(long, default_value_t = 300)]
    n_per_style: usize,
    /// Also score unmodified content images against each artist.
    #[arg(long)]
    baseline: bool,
    /// Line-delimited JSON report of every prediction and the summary.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ClassifierTrainArgs {
    /// One subdirectory of images per artist.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Full VGG16 at 224px instead of the reduced network.
    #[arg(long)]
    vgg16: bool,
    #[arg(long, default_value_t = 0.125)]
    width_scale: f64,
    #[arg(long, default_value_t = 64)]
    input_size: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    holdout: Option<f64>,
}

fn parse_style(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((artist, ckpt)) if !artist.is_empty() && !ckpt.is_empty() => Ok((artist.to_string(), ckpt.into())),
        _ => Err(format!("expected ARTIST=CHECKPOINT, got `{s}`")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            fail("usage", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            fail(e.kind(), &e.to_string());
            ExitCode::from(1)
        }
    }
}

fn fail(kind: &str, msg: &str) {
    eprintln!("error kind={kind} msg={msg:?}");
}

fn run(cli: Cli) -> stylekit::Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Train(a) => train(a, seed),
        Command::Stylize(a) => {
            let nets = TrainState::load_networks(&a.checkpoint)?;
            let out = stylize_any_size(&nets, &load_image(&a.input)?)?;
            save_image(&out, &a.output)
        }
        Command::StylizeVideo(a) => {
            let nets = TrainState::load_networks(&a.checkpoint)?;
            let n = stylize_video(&nets, &a.input, &a.output)?;
            println!("frames={n}");
            Ok(())
        }
        Command::Group(a) => group(a, seed),
        Command::Evaluate(a) => evaluate(a, seed),
        Command::ClassifierTrain(a) => classifier_train(a, seed),
    }
}

fn train_config(a: &TrainArgs, seed: u64) -> stylekit::Result<TrainConfig> {
    let mut cfg = match a.preset {
        Preset::Desk => TrainConfig::desk(),
        Preset::Full => TrainConfig::full_scale(),
    };
    cfg.seed = seed;
    if let Some(v) = a.iters {
        if a.lr_drop_iter.is_none() {
            // Keep the drop at the same fraction of the run.
            let frac = cfg.lr_drop_iter as f64 / cfg.total_iters as f64;
            cfg.lr_drop_iter = ((v as f64 * frac) as u64).min(v.saturating_sub(1));
        }
        cfg.total_iters = v;
    }
    if let Some(v) = a.lr_drop_iter {
        cfg.lr_drop_iter = v;
    }
    if let Some(v) = a.patch_size {
        cfg.patch_size = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = a.width_scale {
        cfg.width_scale = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            cfg.overlay_toml_str(&text)
        }
        None => {
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn train(a: TrainArgs, seed: u64) -> stylekit::Result<()> {
    let cfg = train_config(&a, seed)?;
    let content = load_images(&list_images(&a.content)?)?;
    let style_paths = match (&a.styles, &a.style_set) {
        (Some(dir), _) => list_images(dir)?,
        (None, Some(manifest)) => {
            let text = std::fs::read_to_string(manifest).map_err(|e| io_err(manifest, e))?;
            let set = StyleSet::from_manifest(&text).map_err(|reason| Error::CorruptFile {
                path: manifest.clone(),
                reason,
            })?;
            set.member_ids.iter().map(PathBuf::from).collect()
        }
        (None, None) => unreachable!("clap requires one style source"),
    };
    let styles = load_images(&style_paths)?;
    let state = match &a.resume {
        Some(path) => TrainState::load(path, &cfg)?,
        None => TrainState::new(&cfg)?,
    };
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    std::fs::write(a.out.join("config.toml"), cfg.to_toml_string()).map_err(|e| io_err(&a.out, e))?;

    let history_path = a.out.join("history.jsonl");
    let history = std::fs::OpenOptions::new()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(&history_path)
        .map_err(|e| io_err(&history_path, e))?;
    let mut history = BufWriter::new(history);
    let mut write_err = None;
    let mut trainer = Trainer::resume(cfg, &content, &styles, state)?;
    let last = trainer.run(Some(&a.out), |rec| {
        let line = serde_json::to_string(rec).expect("step record serialises");
        if let Err(e) = writeln!(history, "{line}") {
            write_err.get_or_insert(e);
        }
        if rec.iter % 100 == 0 {
            log::info!("iter {} l_content {:.5} ema {:.3}", rec.iter, rec.report.l_content, rec.ema_accuracy);
        }
    })?;
    history.flush().map_err(|e| io_err(&history_path, e))?;
    if let Some(e) = write_err {
        return Err(io_err(&history_path, e));
    }
    if let Some(path) = last {
        println!("{}", path.display());
    }
    Ok(())
}

fn group(a: GroupArgs, seed: u64) -> stylekit::Result<()> {
    let embedder: Box<dyn Embedder> = match &a.classifier {
        Some(path) => Box::new(ArtistClassifier::load(path)?),
        None => Box::new(ColorStatsEmbedder),
    };
    let paths = list_images_recursive(&a.corpus)?;
    let ids: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
    let mut rows = Vec::with_capacity(paths.len());
    for p in &paths {
        rows.push(embedder.embed(&load_image(p)?)?);
    }
    let source = a.corpus.display().to_string();
    let index = EmbeddingIndex::new(ids.clone(), &rows, source)?;
    if let Some(path) = &a.save_index {
        index.save(path)?;
    }
    let opts = QuantileOptions {
        pair_cap: a.pair_cap,
        seed,
    };
    let query_canon = canonical(&a.query);
    let in_corpus = paths.iter().position(|p| canonical(p) == query_canon);
    let set = match in_corpus {
        Some(i) => build_style_set_with(&ids[i], &index, a.quantile, &opts)?,
        None => {
            let q = embedder.embed(&load_image(&a.query)?)?;
            build_style_set_for_vector_with(&a.query.display().to_string(), &q, &index, a.quantile, &opts)?
        }
    };
    let manifest = set.to_manifest();
    match &a.output {
        Some(path) => std::fs::write(path, manifest).map_err(|e| io_err(path, e)),
        None => {
            print!("{manifest}");
            Ok(())
        }
    }
}

fn evaluate(a: EvaluateArgs, seed: u64) -> stylekit::Result<()> {
    let classifier = ArtistClassifier::load(&a.classifier)?;
    let holdout = classifier.summary.map_or(f64::NAN, |s| s.holdout_accuracy);
    let content = load_flat_corpus(&a.content)?;
    let nets: Vec<Networks> = a
        .styles
        .iter()
        .map(|(_, ckpt)| TrainState::load_networks(ckpt))
        .collect::<stylekit::Result<_>>()?;
    let mut styles: Vec<EvalStyle<'_>> = a
        .styles
        .iter()
        .zip(&nets)
        .map(|((artist, ckpt), n)| EvalStyle {
            style_id: ckpt.display().to_string(),
            target_artist: artist.clone(),
            stylizer: n as &dyn Stylizer,
        })
        .collect();
    if a.baseline {
        let mut artists: Vec<&String> = a.styles.iter().map(|(artist, _)| artist).collect();
        artists.sort();
        artists.dedup();
        for artist in artists {
            styles.push(EvalStyle {
                style_id: format!("identity:{artist}"),
                target_artist: artist.clone(),
                stylizer: &IdentityStylizer,
            });
        }
    }
    let report = evaluate_suite(&styles, &content, &classifier, holdout, a.n_per_style, seed)?;
    if let Some(path) = &a.report {
        report.save(path)?;
    }
    println!("{}", serde_json::to_string(&report).expect("report serialises"));
    Ok(())
}

fn classifier_train(a: ClassifierTrainArgs, seed: u64) -> stylekit::Result<()> {
    let spec = if a.vgg16 {
        ClassifierSpec::vgg16()
    } else {
        ClassifierSpec::desk(a.width_scale, a.input_size)
    };
    let defaults = ClassifierTrainConfig::default();
    let cfg = ClassifierTrainConfig {
        epochs: a.epochs.unwrap_or(defaults.epochs),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        lr: a.lr.unwrap_or(defaults.lr),
        holdout_fraction: a.holdout.unwrap_or(defaults.holdout_fraction),
        seed,
    };
    let (corpus, _) = load_labeled_corpus(&a.corpus)?;
    let (clf, summary) = train_artist_classifier(&corpus, spec, &cfg)?;
    clf.save(&a.output)?;
    println!("{}", serde_json::to_string(&summary).expect("summary serialises"));
    Ok(())
}

fn load_images(paths: &[PathBuf]) -> stylekit::Result<Vec<ImageBatch>> {
    paths.iter().map(|p| load_image(p)).collect()
}

fn canonical(p: &Path) -> PathBuf {
    p.canonicalize().unwrap_or_else(|_| p.to_path_buf())
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

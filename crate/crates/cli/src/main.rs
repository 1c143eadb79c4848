//! `ccd`: synthetic data, CCD pretraining, detector training, scoring,
//! localisation, evaluation and sweeps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use ccd_core::augment::AugKind;
use ccd_core::data::export_dataset;
use ccd_core::detect::{DetectorBundle, DetectorKind, DetectorScale};
use ccd_core::error::{Error, Result};
use ccd_core::io::write_mask;
use ccd_core::localize::{binarize, connected_components, read_heatmap, write_heatmap, Binarize};
use ccd_core::model::{load_checkpoint, save_checkpoint_with, ModelBundle};
use ccd_core::pipeline::{
    apply_sweep_value, evaluate, initial_models, load_data, localize, run_experiment, score_samples, train_detectors,
    Detectors, ExperimentConfig, InitKind, MapSelection, Models, SweepAxis, SweepRow,
};

/// Overrides the output directory's root when set.
const OUTPUT_ROOT_ENV: &str = "CCD_OUTPUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "ccd", version, about = "Contrastive pretraining and anomaly detection on images")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// JSON experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dataset manifest (the synthetic generator is used otherwise).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    image_size: Option<usize>,
    /// CCD pretraining epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// CCD pretraining batch size.
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    /// CCD pretraining learning rate.
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    strong_family: Option<String>,
    #[arg(long, global = true, value_enum)]
    init: Option<InitArg>,
    #[arg(long, global = true)]
    detector_kind: Option<String>,
    #[arg(long, global = true)]
    detector_epochs: Option<usize>,
    #[arg(long, global = true)]
    detector_lr: Option<f64>,
    /// Which heatmap scales are trained and fused.
    #[arg(long, global = true, value_enum)]
    maps: Option<MapsArg>,
    /// Binarisation quantile for localisation masks.
    #[arg(long, global = true)]
    quantile: Option<f64>,
    /// Fixed binarisation threshold on the normalised fused map.
    #[arg(long, global = true, conflicts_with = "quantile")]
    threshold: Option<f64>,
    /// Deterministic reductions during pretraining.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitArg {
    Pretrained,
    Random,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MapsArg {
    Global,
    Local,
    Both,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset as PNGs plus a manifest.
    SynthData {
        /// Target directory (default `<output_dir>/data`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// CCD pretraining; writes checkpoints and a JSON-lines log.
    Pretrain,
    /// Train anomaly detectors from pretrained (or random) encoders.
    TrainDetector {
        /// Directory holding the pretrained checkpoints (default `<output_dir>`).
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// Detector scale(s): global, local or both.
        #[arg(long)]
        scale: Option<String>,
    },
    /// Image-level anomaly scores for every test image.
    Score {
        /// Detector checkpoint (default `<output_dir>/detector_global.ckpt`).
        #[arg(long)]
        detector: Option<PathBuf>,
    },
    /// Heatmaps and masks for every abnormal test image.
    Localize {
        /// Directory holding the detector checkpoints (default `<output_dir>`).
        #[arg(long)]
        detectors: Option<PathBuf>,
    },
    /// AUROC and grouped IoU from scores and heatmaps.
    Evaluate {
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        heatmaps: Option<PathBuf>,
    },
    /// One full pipeline run per value of an axis.
    Sweep {
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated values (default: the axis' standard list).
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Run values on this many threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum AxisArg {
    BatchSize,
    StrongFamily,
    LossTerms,
}

impl From<AxisArg> for SweepAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::BatchSize => SweepAxis::BatchSize,
            AxisArg::StrongFamily => SweepAxis::StrongFamily,
            AxisArg::LossTerms => SweepAxis::LossTerms,
        }
    }
}

fn build_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = &common.output_dir {
        cfg.output_dir = v.clone();
    }
    if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
        if !root.is_empty() && cfg.output_dir.is_relative() {
            cfg.output_dir = Path::new(&root).join(&cfg.output_dir);
        }
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = &common.manifest {
        cfg.data.manifest = Some(v.clone());
    }
    if let Some(v) = common.image_size {
        cfg.data.image_size = v;
    }
    if let Some(v) = common.epochs {
        cfg.ccd.epochs = v;
    }
    if let Some(v) = common.batch_size {
        cfg.ccd.batch_size = v;
    }
    if let Some(v) = common.lr {
        cfg.ccd.lr = v;
    }
    if let Some(v) = &common.strong_family {
        cfg.augment.strong_kind = AugKind::parse(v)?;
    }
    if let Some(v) = common.init {
        cfg.init = match v {
            InitArg::Pretrained => InitKind::Pretrained,
            InitArg::Random => InitKind::Random,
        };
    }
    if let Some(v) = &common.detector_kind {
        cfg.detector.kind = DetectorKind::parse(v)?;
    }
    if let Some(v) = common.detector_epochs {
        cfg.detector.epochs = v;
    }
    if let Some(v) = common.detector_lr {
        cfg.detector.lr = v;
    }
    if let Some(v) = common.maps {
        cfg.localisation.maps = match v {
            MapsArg::Global => MapSelection::Global,
            MapsArg::Local => MapSelection::Local,
            MapsArg::Both => MapSelection::Both,
        };
    }
    if let Some(q) = common.quantile {
        cfg.localisation.binarize = Binarize::Quantile(q);
    }
    if let Some(t) = common.threshold {
        cfg.localisation.binarize = Binarize::Fixed(t);
    }
    if common.deterministic {
        cfg.ccd.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg.resolved())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn echo(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

fn pretrained_path(dir: &Path, scale: &str) -> PathBuf {
    dir.join(format!("pretrained_{scale}.ckpt"))
}

fn detector_path(dir: &Path, scale: &str) -> PathBuf {
    dir.join(format!("detector_{scale}.ckpt"))
}

fn cmd_synth_data(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<()> {
    if cfg.data.manifest.is_some() {
        return Err(Error::Config("synth-data generates its own dataset; drop --manifest".into()));
    }
    let dir = out.unwrap_or_else(|| cfg.output_dir.join("data"));
    let data = load_data(cfg)?;
    create_dir(&dir)?;
    export_dataset(&dir, &data.train, &data.test)?;
    log::info!("wrote {} train and {} test images to {}", data.train.len(), data.test.len(), dir.display());
    println!("{}", dir.join("manifest.json").display());
    Ok(())
}

fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<()> {
    let data = load_data(cfg)?;
    create_dir(&cfg.output_dir)?;
    let log_path = cfg.output_dir.join("pretrain_log.jsonl");
    let mut log_file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let cfg = ExperimentConfig { init: InitKind::Pretrained, ..cfg.clone() };
    let models = initial_models(&cfg, &data.train, Some(&mut log_file))?;
    let meta = serde_json::json!({ "config": echo(&cfg)? });
    save_checkpoint_with(&models.global, &meta, &pretrained_path(&cfg.output_dir, "global"))?;
    if let Some(local) = &models.local {
        save_checkpoint_with(local, &meta, &pretrained_path(&cfg.output_dir, "local"))?;
    }
    if let Some(last) = models.global_log.last() {
        println!("pretrained {} epochs, final loss {:.4}", last.epoch + 1, last.total);
    }
    Ok(())
}

fn check_encoder(bundle: &ModelBundle, expected_size: usize, cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    let c = &bundle.config;
    if c.input_size != expected_size || c.in_channels != cfg.data.channels {
        return Err(Error::Config(format!(
            "arity mismatch: {} holds a {}-channel {}-pixel encoder, the configuration expects {}-channel {}-pixel inputs",
            path.display(),
            c.in_channels,
            c.input_size,
            cfg.data.channels,
            expected_size
        )));
    }
    Ok(())
}

fn cmd_train_detector(cfg: &ExperimentConfig, pretrained: Option<PathBuf>, scale: Option<String>) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(s) = scale {
        cfg.localisation.maps = match s.as_str() {
            "both" => MapSelection::Both,
            other => match DetectorScale::parse(other)? {
                DetectorScale::Global => MapSelection::Global,
                DetectorScale::Local => MapSelection::Local,
            },
        };
    }
    let data = load_data(&cfg)?;
    let models = match cfg.init {
        InitKind::Random => initial_models(&cfg, &data.train, None)?,
        InitKind::Pretrained => {
            let dir = pretrained.unwrap_or_else(|| cfg.output_dir.clone());
            let gpath = pretrained_path(&dir, "global");
            let global = load_checkpoint(&gpath)?;
            check_encoder(&global, cfg.data.image_size, &cfg, &gpath)?;
            let local = if cfg.localisation.maps.local() {
                let lpath = pretrained_path(&dir, "local");
                let l = load_checkpoint(&lpath)?;
                check_encoder(&l, cfg.local_encoder().input_size, &cfg, &lpath)?;
                Some(l)
            } else {
                None
            };
            Models { global, local, global_log: Vec::new(), local_log: Vec::new() }
        }
    };
    create_dir(&cfg.output_dir)?;
    let log_path = cfg.output_dir.join("detector_log.jsonl");
    let mut log_file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let dets = train_detectors(&cfg, &models, &data.train, Some(&mut log_file))?;
    dets.global.save(&detector_path(&cfg.output_dir, "global"))?;
    if let Some(l) = &dets.local {
        l.save(&detector_path(&cfg.output_dir, "local"))?;
    }
    println!("trained {} detector(s) in {}", 1 + dets.local.is_some() as usize, cfg.output_dir.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    id: String,
    score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoresFile {
    config: serde_json::Value,
    scores: Vec<ScoreRow>,
}

fn cmd_score(cfg: &ExperimentConfig, detector: Option<PathBuf>) -> Result<()> {
    let path = detector.unwrap_or_else(|| detector_path(&cfg.output_dir, "global"));
    let det = DetectorBundle::load(&path)?;
    let data = load_data(cfg)?;
    let scores = score_samples(&det, &data.test)?;
    let rows = data.test.iter().zip(scores).map(|(s, score)| ScoreRow { id: s.id.clone(), score }).collect();
    create_dir(&cfg.output_dir)?;
    let out = cfg.output_dir.join("scores.json");
    write_json(&out, &ScoresFile { config: echo(cfg)?, scores: rows })?;
    println!("{}", out.display());
    Ok(())
}

fn cmd_localize(cfg: &ExperimentConfig, detectors: Option<PathBuf>) -> Result<()> {
    let dir = detectors.unwrap_or_else(|| cfg.output_dir.clone());
    let global = DetectorBundle::load(&detector_path(&dir, "global"))?;
    let local = if cfg.localisation.maps.local() { Some(DetectorBundle::load(&detector_path(&dir, "local"))?) } else { None };
    let dets = Detectors { global, local, global_log: Vec::new(), local_log: Vec::new() };
    let data = load_data(cfg)?;
    let out = cfg.output_dir.join("heatmaps");
    create_dir(&out)?;
    let mut n = 0;
    for s in data.test.iter().filter(|s| s.is_abnormal()) {
        let loc = localize(cfg, &dets, &s.pixels)?;
        write_heatmap(&out, &s.id, &loc.fused)?;
        write_mask(&out.join(format!("{}_mask.png", s.id)), &loc.mask)?;
        n += 1;
    }
    write_json(&out.join("config.json"), &echo(cfg)?)?;
    println!("wrote {n} heatmaps to {}", out.display());
    Ok(())
}

fn cmd_evaluate(cfg: &ExperimentConfig, scores: Option<PathBuf>, heatmaps: Option<PathBuf>) -> Result<()> {
    let data = load_data(cfg)?;
    let scores_path = scores.unwrap_or_else(|| cfg.output_dir.join("scores.json"));
    let file: ScoresFile = read_json(&scores_path)?;
    let by_id: std::collections::HashMap<&str, f64> = file.scores.iter().map(|r| (r.id.as_str(), r.score)).collect();
    let ordered = data
        .test
        .iter()
        .map(|s| by_id.get(s.id.as_str()).copied().ok_or_else(|| Error::Data(format!("no score for {}", s.id))))
        .collect::<Result<Vec<f64>>>()?;
    let heat_dir = heatmaps.unwrap_or_else(|| cfg.output_dir.join("heatmaps"));
    let size = cfg.data.image_size;
    let mut predicted = Vec::new();
    for s in data.test.iter().filter(|s| s.is_abnormal() && s.mask.is_some()) {
        let map = read_heatmap(&heat_dir, &s.id)?;
        let (mask, _) = connected_components(&binarize(&map, cfg.localisation.binarize), cfg.localisation.min_area_for(size));
        predicted.push((s.id.clone(), mask));
    }
    let report = evaluate(cfg, &data.test, &ordered, &predicted)?;
    let out = cfg.output_dir.join("report.json");
    write_json(&out, &report)?;
    match report.mean_iou {
        Some(m) => println!("auroc {:.4}  mean iou {:.4}", report.auroc, m),
        None => println!("auroc {:.4}", report.auroc),
    }
    Ok(())
}

fn sweep_one(cfg: &ExperimentConfig, data: &ccd_core::pipeline::Dataset, axis: SweepAxis, value: &str) -> Result<SweepRow> {
    let run_cfg = apply_sweep_value(cfg, axis, value)?;
    let out = run_experiment(&run_cfg, data, true)?;
    Ok(SweepRow { axis, value: value.to_string(), auroc: out.report.auroc, mean_iou: out.report.mean_iou })
}

fn cmd_sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: Vec<String>, jobs: usize) -> Result<()> {
    let values = if values.is_empty() { axis.default_values() } else { values };
    for v in &values {
        apply_sweep_value(cfg, axis, v)?;
    }
    let data = load_data(cfg)?;
    let jobs = jobs.max(1);
    let mut rows: Vec<Option<Result<SweepRow>>> = (0..values.len()).map(|_| None).collect();
    for (chunk_vals, chunk_rows) in values.chunks(jobs).zip(rows.chunks_mut(jobs)) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk_vals.iter().map(|v| s.spawn(|| sweep_one(cfg, &data, axis, v))).collect();
            for (h, slot) in handles.into_iter().zip(chunk_rows.iter_mut()) {
                *slot = Some(h.join().unwrap_or_else(|_| Err(Error::Numerical("sweep worker panicked".into()))));
            }
        });
    }
    let rows = rows.into_iter().map(|r| r.expect("every slot filled")).collect::<Result<Vec<_>>>()?;
    create_dir(&cfg.output_dir)?;
    let out = cfg.output_dir.join("sweep.json");
    write_json(&out, &serde_json::json!({ "config": echo(cfg)?, "rows": rows }))?;
    println!("{:<16} {:>8} {:>8}", "value", "auroc", "iou");
    for r in &rows {
        let iou = r.mean_iou.map(|m| format!("{m:.4}")).unwrap_or_else(|| "-".into());
        println!("{:<16} {:>8.4} {:>8}", r.value, r.auroc, iou);
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Numerical(_) => 4,
        _ => 3,
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli.common)?;
    match cli.command {
        Command::SynthData { out } => cmd_synth_data(&cfg, out),
        Command::Pretrain => cmd_pretrain(&cfg),
        Command::TrainDetector { pretrained, scale } => cmd_train_detector(&cfg, pretrained, scale),
        Command::Score { detector } => cmd_score(&cfg, detector),
        Command::Localize { detectors } => cmd_localize(&cfg, detectors),
        Command::Evaluate { scores, heatmaps } => cmd_evaluate(&cfg, scores, heatmaps),
        Command::Sweep { axis, values, jobs } => cmd_sweep(&cfg, axis.into(), values, jobs),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

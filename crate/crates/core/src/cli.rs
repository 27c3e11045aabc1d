//! Command-line front end: configuration loading, output directories and the six
//! subcommands. The binary is a thin wrapper around [`main_with_args`].
//!
//! Output tables are CSV with a header row; scenes, samples and detections are
//! line-delimited JSON. Every output directory gets a `config.toml` holding the exact
//! resolved configuration.

use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::boxgeom::BBox;
use crate::error::{Error, Result};
use crate::eval;
use crate::experiment::{self, Dataset, ExperimentConfig, Models, Report, LADDER};
use crate::rpn_sim::{GroundTruth, Proposal};
use crate::toyhead::{HeadModel, ModelDocument};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "iou-uniform",
    version,
    about = "IoU-uniform sampling and fused-score NMS experiments on a synthetic detector"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Experiment configuration (TOML). Defaults are used when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output root; overrides `output_dir` from the config.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Write directly into the output root instead of a fresh timestamped subdirectory.
    #[arg(long, global = true)]
    pub overwrite: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate scenes and RPN proposals; writes scene files and the proposal IoU histogram.
    Simulate,
    /// Generate IoU-uniform training samples for the train scenes.
    Sample,
    /// Train the regressors and IoU predictors; writes models/*.json.
    Train,
    /// Detect, run NMS and compute AP with the configured inference settings.
    Eval(ModelArgs),
    /// Recall curves for cls, fused one-pass and fused two-pass NMS.
    NmsCompare(ModelArgs),
    /// Full run: component ladder and every figure table.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Directory with trained models from `train`; models are trained in-process when omitted.
    #[arg(long, value_name = "DIR")]
    pub models: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    /// Ladder rows to run, e.g. `1,3`.
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    pub rows: Option<Vec<usize>>,
}

/// Loads a config file, or defaults when `path` is `None`.
pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|message| Error::Format {
        path: path.to_path_buf(),
        message,
    })
}

pub fn parse_config(text: &str) -> std::result::Result<ExperimentConfig, String> {
    toml::from_str(text).map_err(|e| e.to_string())
}

pub fn config_to_toml(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// `root` itself when overwriting, otherwise a new `<command>-<unix seconds>[-n]`
/// subdirectory that did not exist before.
pub fn output_dir(root: &Path, command: &str, overwrite: bool) -> Result<PathBuf> {
    if overwrite {
        create_dir(root)?;
        return Ok(root.to_path_buf());
    }
    create_dir(root)?;
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    for n in 0.. {
        let name = if n == 0 {
            format!("{command}-{secs}")
        } else {
            format!("{command}-{secs}-{n}")
        };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(dir, e)),
        }
    }
    unreachable!()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let fmt_err = |e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(fmt_err)?;
    for r in rows {
        w.serialize(r).map_err(fmt_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for it in items {
        serde_json::to_writer(&mut w, &it).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

pub fn save_model(path: &Path, m: &HeadModel) -> Result<()> {
    let text = serde_json::to_string_pretty(&m.to_document()).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<HeadModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: ModelDocument = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    HeadModel::from_document(&doc).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn save_models(dir: &Path, models: &Models) -> Result<()> {
    create_dir(dir)?;
    for (name, m) in Models::NAMES.iter().zip(models.as_array()) {
        save_model(&dir.join(format!("{name}.json")), m)?;
    }
    Ok(())
}

pub fn load_models(dir: &Path) -> Result<Models> {
    let models: Vec<HeadModel> = Models::NAMES
        .iter()
        .map(|name| load_model(&dir.join(format!("{name}.json"))))
        .collect::<Result<_>>()?;
    Ok(Models::from_array(models.try_into().expect("five heads")))
}

/// One line of a scene file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub split: String,
    pub id: u64,
    pub width: f64,
    pub height: f64,
    pub gts: Vec<GroundTruth>,
    pub proposals: Vec<Proposal>,
    pub cls_scores: Vec<f64>,
}

/// One line of a sample file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub scene: u64,
    pub gt_index: usize,
    pub interval: usize,
    pub iou: f64,
    pub bbox: BBox,
}

/// One line of a detection file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub scene: u64,
    pub class_id: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Serialize)]
struct CountRow {
    interval: usize,
    lo: f64,
    hi: f64,
    count: usize,
}

#[derive(Debug, Serialize)]
struct ApRow {
    threshold: String,
    ap: f64,
}

#[derive(Debug, Serialize)]
struct RecallCsvRow {
    matching_iou: f64,
    recall: f64,
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let p = dir.join("config.toml");
    fs::write(&p, config_to_toml(cfg)?).map_err(|e| Error::io(p, e))
}

fn warn_if_empty(cfg: &ExperimentConfig) {
    if cfg.scenes.train == 0 || cfg.scenes.test == 0 {
        log::warn!(
            "scene counts are train={} test={}; some outputs will be empty",
            cfg.scenes.train,
            cfg.scenes.test
        );
        eprintln!(
            "warning: scene counts are train={} test={}",
            cfg.scenes.train, cfg.scenes.test
        );
    }
}

pub fn cmd_simulate(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    warn_if_empty(cfg);
    let data = experiment::build_dataset(cfg)?;
    write_scene_files(dir, &data)?;
    let rpn: Vec<f64> = data.skewed.iter().map(|s| s.sample.iou).collect();
    let edges = experiment::tenths();
    let counts = eval::iou_histogram(&rpn, &edges)?;
    let rows: Vec<_> = edges
        .windows(2)
        .zip(counts)
        .enumerate()
        .map(|(k, (w, count))| CountRow {
            interval: k,
            lo: w[0],
            hi: w[1],
            count,
        })
        .collect();
    write_csv(&dir.join("fig1a_rpn_histogram.csv"), &rows)
}

fn write_scene_files(dir: &Path, data: &Dataset) -> Result<()> {
    let train = data.train.iter().enumerate().map(|(i, s)| {
        let props: Vec<Proposal> = data
            .skewed
            .iter()
            .filter(|x| x.scene == i)
            .map(|x| Proposal {
                bbox: x.sample.bbox,
                gt_index: x.sample.gt_index,
                iou: x.sample.iou,
            })
            .collect();
        SceneRecord {
            split: "train".into(),
            id: s.id,
            width: s.width,
            height: s.height,
            gts: s.gts.clone(),
            proposals: props,
            cls_scores: Vec::new(),
        }
    });
    write_jsonl(&dir.join("scenes_train.jsonl"), train)?;
    let test = data.test.iter().zip(&data.test_proposals).map(|(s, p)| SceneRecord {
        split: "test".into(),
        id: s.id,
        width: s.width,
        height: s.height,
        gts: s.gts.clone(),
        proposals: p.proposals.clone(),
        cls_scores: p.cls_scores.clone(),
    });
    write_jsonl(&dir.join("scenes_test.jsonl"), test)
}

pub fn cmd_sample(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    warn_if_empty(cfg);
    cfg.validate()?;
    let (train, _, _) = experiment::simulate_scene_sets(cfg)?;
    let (samples, shortfalls) = experiment::uniform_samples(cfg, &train)?;
    if shortfalls > 0 {
        eprintln!("warning: {shortfalls} (gt, interval) pairs ran out of attempts");
    }
    write_jsonl(
        &dir.join("samples.jsonl"),
        samples.iter().map(|s| SampleRecord {
            scene: train[s.scene].id,
            gt_index: s.sample.gt_index,
            interval: s.sample.interval,
            iou: s.sample.iou,
            bbox: s.sample.bbox,
        }),
    )?;
    let iv = &cfg.sampler.intervals;
    let mut counts = vec![0; iv.num_intervals()];
    for s in &samples {
        counts[s.sample.interval] += 1;
    }
    let rows: Vec<_> = counts
        .into_iter()
        .enumerate()
        .map(|(j, count)| CountRow {
            interval: j,
            lo: iv.boundaries[j],
            hi: iv.boundaries[j + 1],
            count,
        })
        .collect();
    write_csv(&dir.join("sample_counts.csv"), &rows)
}

pub fn cmd_train(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let data = experiment::build_dataset(cfg)?;
    let (models, summary) = experiment::train_models(cfg, &data)?;
    save_models(&dir.join("models"), &models)?;
    write_csv(&dir.join("training.csv"), &summary)
}

fn models_for(cfg: &ExperimentConfig, data: &Dataset, from: Option<&Path>) -> Result<Models> {
    match from {
        Some(d) => load_models(d),
        None => Ok(experiment::train_models(cfg, data)?.0),
    }
}

pub fn cmd_eval(cfg: &ExperimentConfig, dir: &Path, models: Option<&Path>) -> Result<()> {
    let data = experiment::build_dataset(cfg)?;
    let models = models_for(cfg, &data, models)?;
    let inf = &cfg.inference;
    let dets = experiment::detect_all(
        &data,
        &cfg.extractor(),
        models.regressor(inf.regressor),
        models.iou_predictor(inf.iou_predictor),
        inf.iou_mode,
        inf.ranking,
    )?;
    let kept = experiment::nms_all(&dets, inf.nms_threshold, inf.ranking)?;
    write_jsonl(
        &dir.join("detections.jsonl"),
        kept.iter().map(|d| DetectionRecord {
            scene: data.test[d.scene].id,
            class_id: d.class_id,
            bbox: d.bbox,
            score: d.score,
        }),
    )?;
    let ap = eval::ap_range(&kept, &experiment::eval_gts(&data.test)).ok_or(Error::Empty("test ground truth"))?;
    let mut rows: Vec<ApRow> = ap
        .per_threshold
        .iter()
        .map(|&(t, v)| ApRow {
            threshold: format!("{t:.2}"),
            ap: v,
        })
        .collect();
    rows.push(ApRow {
        threshold: "mean".into(),
        ap: ap.mean_ap,
    });
    write_csv(&dir.join("ap.csv"), &rows)
}

pub fn cmd_nms_compare(cfg: &ExperimentConfig, dir: &Path, models: Option<&Path>) -> Result<()> {
    let data = experiment::build_dataset(cfg)?;
    let models = models_for(cfg, &data, models)?;
    let rows = experiment::recall_comparison(cfg, &data, &models)?;
    type Curve = (&'static str, fn(&experiment::RecallRow) -> f64);
    let curves: [Curve; 3] = [
        ("recall_cls.csv", |r| r.cls),
        ("recall_fused_one_pass.csv", |r| r.fused_one_pass),
        ("recall_fused_two_pass.csv", |r| r.fused_two_pass),
    ];
    for (name, pick) in curves {
        let out: Vec<_> = rows
            .iter()
            .map(|r| RecallCsvRow {
                matching_iou: r.matching_iou,
                recall: pick(r),
            })
            .collect();
        write_csv(&dir.join(name), &out)?;
    }
    Ok(())
}

/// Writes every table of a full report.
pub fn write_report(dir: &Path, r: &Report) -> Result<()> {
    write_csv(&dir.join("training.csv"), &r.training)?;
    write_csv(&dir.join("fig1a_histogram.csv"), &r.fig1a_histogram)?;
    write_csv(&dir.join("fig1b_refinement.csv"), &r.fig1b_refinement)?;
    write_csv(&dir.join("fig1c_loss_composition.csv"), &r.fig1c_loss_composition)?;
    write_csv(&dir.join("fig3_localization_improvement.csv"), &r.fig3_improvement)?;
    write_csv(&dir.join("fig6_refined_histogram.csv"), &r.fig6_refined_histogram)?;
    write_csv(&dir.join("fig7_recall.csv"), &r.fig7_recall)?;
    write_csv(&dir.join("fig8_correlation.csv"), &r.fig8_correlation)?;
    write_csv(&dir.join("fig8_scatter.csv"), &r.fig8_scatter)?;
    write_csv(&dir.join("table4_ablation.csv"), &r.table4_ladder)?;
    write_csv(&dir.join("iou_predictors.csv"), &r.iou_predictors)
}

pub fn cmd_reproduce(cfg: &ExperimentConfig, dir: &Path, rows: &[usize]) -> Result<Report> {
    if let Some(bad) = rows.iter().find(|r| !LADDER.iter().any(|s| s.row == **r)) {
        return Err(Error::Config(format!("ladder row {bad} does not exist (rows are 1-4)")));
    }
    let (_, models, report) = experiment::run(cfg, rows)?;
    save_models(&dir.join("models"), &models)?;
    write_report(dir, &report)?;
    Ok(report)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Simulate => "simulate",
        Command::Sample => "sample",
        Command::Train => "train",
        Command::Eval(_) => "eval",
        Command::NmsCompare(_) => "nms-compare",
        Command::Reproduce(_) => "reproduce",
    }
}

/// Runs a parsed command and returns the directory it wrote to.
pub fn execute(cli: &Cli) -> anyhow::Result<PathBuf> {
    let g = &cli.global;
    let mut cfg = load_config(g.config.as_deref()).context("loading configuration")?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate().context("validating configuration")?;
    let name = command_name(&cli.command);
    let dir = output_dir(&cfg.output_dir, name, g.overwrite).context("creating output directory")?;
    write_config(&dir, &cfg)?;

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = g.jobs {
        pool = pool.num_threads(j.max(1));
    }
    let pool = pool.build().context("starting worker threads")?;
    pool.install(|| -> anyhow::Result<()> {
        match &cli.command {
            Command::Simulate => cmd_simulate(&cfg, &dir),
            Command::Sample => cmd_sample(&cfg, &dir),
            Command::Train => cmd_train(&cfg, &dir),
            Command::Eval(m) => cmd_eval(&cfg, &dir, m.models.as_deref()),
            Command::NmsCompare(m) => cmd_nms_compare(&cfg, &dir, m.models.as_deref()),
            Command::Reproduce(r) => {
                let rows = r.rows.clone().unwrap_or_else(|| LADDER.iter().map(|s| s.row).collect());
                cmd_reproduce(&cfg, &dir, &rows).map(|_| ())
            }
        }
        .with_context(|| format!("{name} failed"))
    })?;
    Ok(dir)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

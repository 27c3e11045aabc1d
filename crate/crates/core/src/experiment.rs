//! End-to-end simulated runs: scene generation, the two training distributions, the
//! five trained heads, test-time detection and every figure and table analog.
//!
//! All randomness flows from [`ExperimentConfig::seed`] through fixed sub-streams, and
//! per-scene work is merged by scene index, so results do not depend on thread count.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxgeom::{encode_deltas, BBox, Deltas};
use crate::error::{Error, Result};
use crate::eval::{self, EvalDetection, EvalGt};
use crate::infer::{self, Detection, IouMode, Ranking};
use crate::loss::loss_composition;
use crate::rng::{derive_seed, substream};
use crate::rpn_sim::{
    simulate_cls_score, simulate_rpn_proposals, simulate_scene, Proposal, RpnSimConfig, Scene, SceneConfig,
};
use crate::sampler::{generate_uniform_samples, GenerateOptions, IntervalConfig, JitterRanges};
use crate::toyhead::{train_iou_predictor, train_regressor, FeatureExtractor, HeadModel, SceneSample, TrainConfig};

const STREAM_TRAIN_SCENES: u64 = 1;
const STREAM_TEST_SCENES: u64 = 2;
const STREAM_UNIFORM: u64 = 3;
const STREAM_RPN_TRAIN: u64 = 4;
const STREAM_RPN_TEST: u64 = 5;
const STREAM_FEATURES: u64 = 6;
const STREAM_TRAINING: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenesConfig {
    pub train: usize,
    pub test: usize,
    pub params: SceneConfig,
}

impl Default for ScenesConfig {
    fn default() -> Self {
        Self {
            train: 40,
            test: 100,
            params: SceneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub intervals: IntervalConfig,
    pub jitter: JitterRanges,
    /// Clip generated samples to the scene bounds.
    pub clip: bool,
    /// Attempt budget per `(gt, interval)` as a multiple of `samples_per_interval`.
    pub attempts_per_sample: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            intervals: IntervalConfig::default(),
            jitter: JitterRanges::default(),
            clip: false,
            attempts_per_sample: 40,
        }
    }
}

impl SamplerConfig {
    pub fn options(&self, scene: &Scene) -> GenerateOptions {
        GenerateOptions {
            max_attempts: self.attempts_per_sample * self.intervals.samples_per_interval,
            clip_to: self.clip.then_some((scene.width, scene.height)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub sigma_feat: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { sigma_feat: 0.04 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub regressor: TrainConfig,
    pub iou_predictor: TrainConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            regressor: TrainConfig::default(),
            // the sigmoid output damps gradients, so the IoU head needs a larger step
            iou_predictor: TrainConfig {
                learning_rate: 3.0,
                ..TrainConfig::default()
            },
        }
    }
}

/// Which trained heads a single evaluation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressorChoice {
    Skewed,
    Uniform,
    UniformWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouPredictorChoice {
    None,
    Skewed,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub nms_threshold: f64,
    pub ranking: Ranking,
    pub iou_mode: IouMode,
    pub regressor: RegressorChoice,
    pub iou_predictor: IouPredictorChoice,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            nms_threshold: 0.5,
            ranking: Ranking::Fused,
            iou_mode: IouMode::TwoPass,
            regressor: RegressorChoice::UniformWeighted,
            iou_predictor: IouPredictorChoice::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub scenes: ScenesConfig,
    pub sampler: SamplerConfig,
    pub rpn: RpnSimConfig,
    pub features: FeatureConfig,
    pub training: TrainingConfig,
    pub inference: InferenceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            scenes: ScenesConfig::default(),
            sampler: SamplerConfig::default(),
            rpn: RpnSimConfig::default(),
            features: FeatureConfig::default(),
            training: TrainingConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenes.params.validate()?;
        self.sampler.intervals.validate()?;
        self.sampler.jitter.validate(&self.sampler.intervals)?;
        if self.sampler.attempts_per_sample == 0 {
            return Err(Error::Config("sampler.attempts_per_sample must be at least 1".into()));
        }
        self.rpn.validate()?;
        if !(self.features.sigma_feat >= 0.0 && self.features.sigma_feat.is_finite()) {
            return Err(Error::Config("features.sigma_feat must be a finite value >= 0".into()));
        }
        self.training.regressor.validate()?;
        self.training.iou_predictor.validate()?;
        let t = self.inference.nms_threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Config(format!("inference.nms_threshold {t} must be in (0, 1)")));
        }
        Ok(())
    }

    pub fn extractor(&self) -> FeatureExtractor {
        FeatureExtractor::new(self.features.sigma_feat, derive_seed(self.seed, STREAM_FEATURES))
    }
}

/// Simulated RPN output for one test scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneProposals {
    pub proposals: Vec<Proposal>,
    pub cls_scores: Vec<f64>,
}

impl SceneProposals {
    pub fn boxes(&self) -> Vec<BBox> {
        self.proposals.iter().map(|p| p.bbox).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
    /// IoU-uniform samples around the train GTs.
    pub uniform: Vec<SceneSample>,
    /// Simulated RPN positives on the train scenes.
    pub skewed: Vec<SceneSample>,
    /// Simulated RPN output on the test scenes, aligned with `test`.
    pub test_proposals: Vec<SceneProposals>,
    pub sample_shortfalls: usize,
    pub proposal_shortfalls: usize,
    pub missing_gts: usize,
}

fn simulate_scenes(seed: u64, stream: u64, first_id: u64, n: usize, cfg: &SceneConfig) -> Result<(Vec<Scene>, usize)> {
    let base = derive_seed(seed, stream);
    let out: Vec<(Scene, usize)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (s, short) = simulate_scene(first_id + i as u64, cfg, &mut substream(base, i as u64))?;
            if let Some(sf) = short {
                log::warn!("scene {}: placed {} of {} GTs", s.id, sf.placed, sf.requested);
            }
            Ok((s, short.map_or(0, |sf| sf.requested - sf.placed)))
        })
        .collect::<Result<_>>()?;
    let missing = out.iter().map(|x| x.1).sum();
    Ok((out.into_iter().map(|x| x.0).collect(), missing))
}

/// Train and test scenes only.
pub fn simulate_scene_sets(cfg: &ExperimentConfig) -> Result<(Vec<Scene>, Vec<Scene>, usize)> {
    let p = &cfg.scenes.params;
    let (train, m1) = simulate_scenes(cfg.seed, STREAM_TRAIN_SCENES, 0, cfg.scenes.train, p)?;
    let (test, m2) = simulate_scenes(
        cfg.seed,
        STREAM_TEST_SCENES,
        cfg.scenes.train as u64,
        cfg.scenes.test,
        p,
    )?;
    Ok((train, test, m1 + m2))
}

/// IoU-uniform samples for every scene, tagged with scene index.
pub fn uniform_samples(cfg: &ExperimentConfig, scenes: &[Scene]) -> Result<(Vec<SceneSample>, usize)> {
    let base = derive_seed(cfg.seed, STREAM_UNIFORM);
    let per_scene: Vec<_> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            generate_uniform_samples(
                &s.gt_boxes(),
                &cfg.sampler.intervals,
                &cfg.sampler.jitter,
                &mut substream(base, i as u64),
                &cfg.sampler.options(s),
            )
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    let mut shortfalls = 0;
    for (i, set) in per_scene.into_iter().enumerate() {
        shortfalls += set.shortfalls.len();
        out.extend(set.samples.into_iter().map(|sample| SceneSample { scene: i, sample }));
    }
    Ok((out, shortfalls))
}

/// Simulated RPN proposals with classification scores for every scene.
pub fn rpn_proposals(
    cfg: &ExperimentConfig,
    scenes: &[Scene],
    stream: u64,
) -> Result<(Vec<SceneProposals>, Vec<SceneSample>, usize)> {
    let base = derive_seed(cfg.seed, stream);
    let per_scene: Vec<_> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = substream(base, i as u64);
            let set = simulate_rpn_proposals(s, &cfg.rpn, &cfg.sampler.intervals, &mut rng)?;
            let proposals = set.all();
            let cls_scores = proposals
                .iter()
                .map(|p| simulate_cls_score(p.iou, &cfg.rpn, &mut rng))
                .collect();
            Ok((SceneProposals { proposals, cls_scores }, set.positives, set.shortfall))
        })
        .collect::<Result<_>>()?;
    let mut props = Vec::with_capacity(per_scene.len());
    let mut positives = Vec::new();
    let mut shortfall = 0;
    for (i, (p, pos, sf)) in per_scene.into_iter().enumerate() {
        props.push(p);
        positives.extend(pos.into_iter().map(|sample| SceneSample { scene: i, sample }));
        shortfall += sf;
    }
    Ok((props, positives, shortfall))
}

pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (train, test, missing_gts) = simulate_scene_sets(cfg)?;
    let (uniform, sample_shortfalls) = uniform_samples(cfg, &train)?;
    let (_, skewed, sf_train) = rpn_proposals(cfg, &train, STREAM_RPN_TRAIN)?;
    let (test_proposals, _, sf_test) = rpn_proposals(cfg, &test, STREAM_RPN_TEST)?;
    Ok(Dataset {
        train,
        test,
        uniform,
        skewed,
        test_proposals,
        sample_shortfalls,
        proposal_shortfalls: sf_train + sf_test,
        missing_gts,
    })
}

/// The five heads of a full run.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub regressor_skewed: HeadModel,
    pub regressor_uniform: HeadModel,
    pub regressor_uniform_weighted: HeadModel,
    pub iou_skewed: HeadModel,
    pub iou_uniform: HeadModel,
}

impl Models {
    /// File stems under a model directory, in a fixed order.
    pub const NAMES: [&'static str; 5] = [
        "regressor_skewed",
        "regressor_uniform",
        "regressor_uniform_weighted",
        "iou_skewed",
        "iou_uniform",
    ];

    pub fn as_array(&self) -> [&HeadModel; 5] {
        [
            &self.regressor_skewed,
            &self.regressor_uniform,
            &self.regressor_uniform_weighted,
            &self.iou_skewed,
            &self.iou_uniform,
        ]
    }

    pub fn from_array([a, b, c, d, e]: [HeadModel; 5]) -> Self {
        Self {
            regressor_skewed: a,
            regressor_uniform: b,
            regressor_uniform_weighted: c,
            iou_skewed: d,
            iou_uniform: e,
        }
    }

    pub fn regressor(&self, c: RegressorChoice) -> &HeadModel {
        match c {
            RegressorChoice::Skewed => &self.regressor_skewed,
            RegressorChoice::Uniform => &self.regressor_uniform,
            RegressorChoice::UniformWeighted => &self.regressor_uniform_weighted,
        }
    }

    pub fn iou_predictor(&self, c: IouPredictorChoice) -> Option<&HeadModel> {
        match c {
            IouPredictorChoice::None => None,
            IouPredictorChoice::Skewed => Some(&self.iou_skewed),
            IouPredictorChoice::Uniform => Some(&self.iou_uniform),
        }
    }
}

/// Final training loss of each head, in [`Models::NAMES`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub name: String,
    pub examples: usize,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Trains all five heads. Skewed and uniform heads get the same number of SGD steps.
pub fn train_models(cfg: &ExperimentConfig, data: &Dataset) -> Result<(Models, Vec<TrainingSummary>)> {
    let ex = cfg.extractor();
    let intervals = &cfg.sampler.intervals;
    let hyper = |base: &TrainConfig, stream: u64, weighted: bool| TrainConfig {
        seed: derive_seed(
            derive_seed(cfg.seed, STREAM_TRAINING),
            stream ^ base.seed.rotate_left(8),
        ),
        weighted,
        ..base.clone()
    };
    let reg = &cfg.training.regressor;
    let iou = &cfg.training.iou_predictor;
    let jobs: Vec<(usize, &[SceneSample])> = vec![
        (0, &data.skewed),
        (1, &data.uniform),
        (2, &data.uniform),
        (3, &data.skewed),
        (4, &data.uniform),
    ];
    let trained: Vec<_> = jobs
        .into_par_iter()
        .map(|(k, samples)| {
            let h = match k {
                0 => hyper(reg, 0, false),
                1 => hyper(reg, 1, false),
                2 => hyper(reg, 2, true),
                // both IoU predictors share the initialization and batch order seed
                _ => hyper(iou, 3, false),
            };
            let t = if k < 3 {
                train_regressor(samples, &data.train, &ex, intervals, &h)
            } else {
                train_iou_predictor(samples, &data.train, &ex, &h)
            }?;
            let summary = TrainingSummary {
                name: Models::NAMES[k].to_string(),
                examples: samples.len(),
                steps: t.steps,
                initial_loss: t.trace[0],
                final_loss: *t.trace.last().unwrap_or(&t.trace[0]),
            };
            Ok((t.model, summary))
        })
        .collect::<Result<_>>()?;
    let (models, summaries): (Vec<_>, Vec<_>) = trained.into_iter().unzip();
    let models: [HeadModel; 5] = models.try_into().expect("five heads");
    Ok((Models::from_array(models), summaries))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub lo: f64,
    pub hi: f64,
    pub rpn: usize,
    pub uniform: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRow {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_iou_before: Option<f64>,
    pub mean_iou_after_skewed: Option<f64>,
    pub mean_iou_after_uniform_weighted: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCompositionRow {
    pub interval: usize,
    pub rpn: f64,
    pub uniform: f64,
    pub uniform_weighted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRow {
    pub interval: usize,
    pub lo: f64,
    pub hi: f64,
    pub skewed: Option<f64>,
    pub uniform: Option<f64>,
    pub uniform_weighted: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedHistogramRow {
    pub lo: f64,
    pub hi: f64,
    pub proposals: usize,
    pub skewed: usize,
    pub uniform_weighted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub matching_iou: f64,
    pub cls: f64,
    pub fused_one_pass: f64,
    pub fused_two_pass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub mode: IouMode,
    pub count: usize,
    pub pearson: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub mode: IouMode,
    pub true_iou: f64,
    pub predicted_iou: f64,
}

/// One row of the component ladder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LadderSpec {
    pub row: usize,
    pub name: &'static str,
    pub regressor: RegressorChoice,
    pub iou_predictor: IouPredictorChoice,
    pub ranking: Ranking,
    pub iou_mode: IouMode,
}

pub const LADDER: [LadderSpec; 4] = [
    LadderSpec {
        row: 1,
        name: "baseline",
        regressor: RegressorChoice::Skewed,
        iou_predictor: IouPredictorChoice::None,
        ranking: Ranking::Cls,
        iou_mode: IouMode::OnePass,
    },
    LadderSpec {
        row: 2,
        name: "+uniform",
        regressor: RegressorChoice::Uniform,
        iou_predictor: IouPredictorChoice::None,
        ranking: Ranking::Cls,
        iou_mode: IouMode::OnePass,
    },
    LadderSpec {
        row: 3,
        name: "+efo",
        regressor: RegressorChoice::Uniform,
        iou_predictor: IouPredictorChoice::Uniform,
        ranking: Ranking::Fused,
        iou_mode: IouMode::TwoPass,
    },
    LadderSpec {
        row: 4,
        name: "+weights",
        regressor: RegressorChoice::UniformWeighted,
        iou_predictor: IouPredictorChoice::Uniform,
        ranking: Ranking::Fused,
        iou_mode: IouMode::TwoPass,
    },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub row: usize,
    pub name: String,
    pub ap50: f64,
    pub ap75: f64,
    pub mean_ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouPredictorRow {
    pub training_set: String,
    pub count_high: usize,
    pub mae_high: f64,
    pub mae_all: f64,
    pub pearson: f64,
}

/// Every figure and table analog of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub training: Vec<TrainingSummary>,
    pub fig1a_histogram: Vec<HistogramRow>,
    pub fig1b_refinement: Vec<RefinementRow>,
    pub fig1c_loss_composition: Vec<LossCompositionRow>,
    pub fig3_improvement: Vec<ImprovementRow>,
    pub fig6_refined_histogram: Vec<RefinedHistogramRow>,
    pub fig7_recall: Vec<RecallRow>,
    pub fig8_correlation: Vec<CorrelationRow>,
    pub fig8_scatter: Vec<ScatterRow>,
    pub table4_ladder: Vec<LadderRow>,
    pub iou_predictors: Vec<IouPredictorRow>,
    /// Mean post-refinement IoU of test positives with input IoU in the top interval,
    /// for the skewed and uniform-weighted regressors.
    pub high_iou_after_skewed: f64,
    pub high_iou_after_uniform_weighted: f64,
}

/// Histogram edges `0.5, 0.6, ..., 1.0`.
pub fn tenths() -> Vec<f64> {
    (5..=10).map(|k| k as f64 / 10.0).collect()
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// A positive test proposal with its GT.
struct TestPositive {
    scene: usize,
    bbox: BBox,
    gt: BBox,
    iou: f64,
}

fn test_positives(data: &Dataset) -> Vec<TestPositive> {
    data.test_proposals
        .iter()
        .enumerate()
        .flat_map(|(si, sp)| {
            let scene = &data.test[si];
            sp.proposals.iter().filter(|p| p.iou >= 0.5).map(move |p| TestPositive {
                scene: si,
                bbox: p.bbox,
                gt: scene.gts[p.gt_index].bbox,
                iou: p.iou,
            })
        })
        .collect()
}

fn refine_positives(pos: &[TestPositive], model: &HeadModel, data: &Dataset, ex: &FeatureExtractor) -> Vec<BBox> {
    pos.par_iter()
        .map(|p| infer::refine(&[p.bbox], model, &data.test[p.scene], ex)[0].bbox)
        .collect()
}

/// Detections of one configuration on every test scene, before NMS.
pub fn detect_all(
    data: &Dataset,
    ex: &FeatureExtractor,
    regressor: &HeadModel,
    iou_model: Option<&HeadModel>,
    mode: IouMode,
    ranking: Ranking,
) -> Result<Vec<Vec<Detection>>> {
    data.test
        .par_iter()
        .zip(&data.test_proposals)
        .map(|(scene, sp)| {
            infer::detect(
                &sp.boxes(),
                &sp.cls_scores,
                regressor,
                iou_model,
                scene,
                ex,
                mode,
                ranking,
            )
        })
        .collect()
}

/// Class-wise NMS per scene; kept detections tagged with their scene index.
pub fn nms_all(dets: &[Vec<Detection>], threshold: f64, ranking: Ranking) -> Result<Vec<EvalDetection>> {
    let mut out = Vec::new();
    for (si, d) in dets.iter().enumerate() {
        for k in infer::nms(d, threshold, ranking)? {
            out.push(EvalDetection {
                scene: si,
                class_id: k.class_id,
                bbox: k.bbox,
                score: k.score(ranking),
            });
        }
    }
    Ok(out)
}

pub fn eval_gts(scenes: &[Scene]) -> Vec<EvalGt> {
    scenes
        .iter()
        .enumerate()
        .flat_map(|(si, s)| {
            s.gts.iter().map(move |g| EvalGt {
                scene: si,
                class_id: g.class_id,
                bbox: g.bbox,
            })
        })
        .collect()
}

/// AP summary of one ladder row.
pub fn ladder_row(spec: &LadderSpec, cfg: &ExperimentConfig, data: &Dataset, models: &Models) -> Result<LadderRow> {
    let ex = cfg.extractor();
    let dets = detect_all(
        data,
        &ex,
        models.regressor(spec.regressor),
        models.iou_predictor(spec.iou_predictor),
        spec.iou_mode,
        spec.ranking,
    )?;
    let kept = nms_all(&dets, cfg.inference.nms_threshold, spec.ranking)?;
    let ap = eval::ap_range(&kept, &eval_gts(&data.test)).ok_or(Error::Empty("test ground truth"))?;
    Ok(LadderRow {
        row: spec.row,
        name: spec.name.to_string(),
        ap50: ap.at(0.5).unwrap_or(0.0),
        ap75: ap.at(0.75).unwrap_or(0.0),
        mean_ap: ap.mean_ap,
    })
}

/// Zero-output regression loss shares for a sample set.
fn zero_head_shares(
    samples: &[SceneSample],
    scenes: &[Scene],
    intervals: &IntervalConfig,
    weighted: bool,
) -> Result<Vec<f64>> {
    let targets: Vec<Deltas> = samples
        .iter()
        .map(|s| encode_deltas(&s.sample.bbox, &scenes[s.scene].gts[s.sample.gt_index].bbox))
        .collect::<Result<_>>()?;
    let iv: Vec<usize> = samples.iter().map(|s| s.sample.interval).collect();
    loss_composition(&vec![Deltas::ZERO; targets.len()], &targets, &iv, intervals, weighted)
}

/// Runs every analysis on a trained run. `rows` selects ladder rows (1-based).
pub fn evaluate(
    cfg: &ExperimentConfig,
    data: &Dataset,
    models: &Models,
    training: Vec<TrainingSummary>,
    rows: &[usize],
) -> Result<Report> {
    let ex = cfg.extractor();
    let intervals = &cfg.sampler.intervals;
    let tenths = tenths();

    // Training-distribution histograms.
    let rpn_hist = eval::iou_histogram(&data.skewed.iter().map(|s| s.sample.iou).collect::<Vec<_>>(), &tenths)?;
    let uni_hist = eval::iou_histogram(&data.uniform.iter().map(|s| s.sample.iou).collect::<Vec<_>>(), &tenths)?;
    let fig1a_histogram = tenths
        .windows(2)
        .zip(rpn_hist.iter().zip(&uni_hist))
        .map(|(w, (&rpn, &uniform))| HistogramRow {
            lo: w[0],
            hi: w[1],
            rpn,
            uniform,
        })
        .collect();

    // Refinement of held-out positives.
    let pos = test_positives(data);
    let pre: Vec<BBox> = pos.iter().map(|p| p.bbox).collect();
    let gts: Vec<BBox> = pos.iter().map(|p| p.gt).collect();
    let after_skewed = refine_positives(&pos, &models.regressor_skewed, data, &ex);
    let after_uniform = refine_positives(&pos, &models.regressor_uniform, data, &ex);
    let after_weighted = refine_positives(&pos, &models.regressor_uniform_weighted, data, &ex);
    let iou_after = |boxes: &[BBox]| -> Vec<f64> { boxes.iter().zip(&gts).map(|(b, g)| b.iou_unchecked(g)).collect() };
    let (ious_skewed, ious_weighted) = (iou_after(&after_skewed), iou_after(&after_weighted));

    let fig1b_refinement = tenths
        .windows(2)
        .enumerate()
        .map(|(k, w)| {
            let last = k == tenths.len() - 2;
            let idx: Vec<usize> = (0..pos.len())
                .filter(|&i| pos[i].iou >= w[0] && (pos[i].iou < w[1] || (last && pos[i].iou <= 1.0)))
                .collect();
            RefinementRow {
                lo: w[0],
                hi: w[1],
                count: idx.len(),
                mean_iou_before: mean(idx.iter().map(|&i| pos[i].iou)),
                mean_iou_after_skewed: mean(idx.iter().map(|&i| ious_skewed[i])),
                mean_iou_after_uniform_weighted: mean(idx.iter().map(|&i| ious_weighted[i])),
            }
        })
        .collect();

    let sk = eval::localization_improvement(&pre, &after_skewed, &gts, intervals)?;
    let un = eval::localization_improvement(&pre, &after_uniform, &gts, intervals)?;
    let uw = eval::localization_improvement(&pre, &after_weighted, &gts, intervals)?;
    let fig3_improvement = (0..intervals.num_intervals())
        .map(|j| ImprovementRow {
            interval: j,
            lo: intervals.boundaries[j],
            hi: intervals.boundaries[j + 1],
            skewed: sk[j],
            uniform: un[j],
            uniform_weighted: uw[j],
        })
        .collect();

    let top = intervals.num_intervals() - 1;
    let high: Vec<usize> = (0..pos.len())
        .filter(|&i| pos[i].iou >= intervals.boundaries[top])
        .collect();
    let high_iou_after_skewed =
        mean(high.iter().map(|&i| ious_skewed[i])).ok_or(Error::Empty("top-interval test positives"))?;
    let high_iou_after_uniform_weighted = mean(high.iter().map(|&i| ious_weighted[i])).unwrap_or(f64::NAN);

    let h_pre = eval::iou_histogram(&pos.iter().map(|p| p.iou).collect::<Vec<_>>(), &tenths)?;
    let h_sk = eval::iou_histogram(&ious_skewed, &tenths)?;
    let h_uw = eval::iou_histogram(&ious_weighted, &tenths)?;
    let fig6_refined_histogram = tenths
        .windows(2)
        .enumerate()
        .map(|(k, w)| RefinedHistogramRow {
            lo: w[0],
            hi: w[1],
            proposals: h_pre[k],
            skewed: h_sk[k],
            uniform_weighted: h_uw[k],
        })
        .collect();

    // Loss composition under a zero-output head.
    let rpn_sh = zero_head_shares(&data.skewed, &data.train, intervals, false)?;
    let uni_sh = zero_head_shares(&data.uniform, &data.train, intervals, false)?;
    let uw_sh = zero_head_shares(&data.uniform, &data.train, intervals, true)?;
    let fig1c_loss_composition = (0..intervals.num_intervals())
        .map(|j| LossCompositionRow {
            interval: j,
            rpn: rpn_sh[j],
            uniform: uni_sh[j],
            uniform_weighted: uw_sh[j],
        })
        .collect();

    // Full model detections, shared by the recall and correlation tables.
    let full_reg = &models.regressor_uniform_weighted;
    let full_iou = &models.iou_uniform;
    let one = detect_all(data, &ex, full_reg, Some(full_iou), IouMode::OnePass, Ranking::Fused)?;
    let two = detect_all(data, &ex, full_reg, Some(full_iou), IouMode::TwoPass, Ranking::Fused)?;
    let fig7_recall = recall_rows(cfg, data, &one, &two)?;

    let true_iou = |dets: &[Vec<Detection>]| -> Vec<f64> {
        dets.iter()
            .zip(&data.test)
            .flat_map(|(d, s)| d.iter().map(move |x| s.best_match(&x.bbox).map_or(0.0, |m| m.1)))
            .collect()
    };
    let preds = |dets: &[Vec<Detection>]| -> Vec<f64> { dets.iter().flatten().map(|d| d.iou_pred).collect() };
    let truth = true_iou(&two);
    let mut fig8_correlation = Vec::new();
    let mut fig8_scatter = Vec::new();
    for (mode, dets) in [(IouMode::OnePass, &one), (IouMode::TwoPass, &two)] {
        let rep = eval::correlation_report(&preds(dets), &truth)?;
        fig8_correlation.push(CorrelationRow {
            mode,
            count: rep.rows.len(),
            pearson: rep.pearson,
            mae: rep.mae,
        });
        fig8_scatter.extend(rep.rows.iter().map(|&(t, p)| ScatterRow {
            mode,
            true_iou: t,
            predicted_iou: p,
        }));
    }

    // IoU predictors trained on either distribution, scored two-pass on the same detections.
    let mut iou_predictors = Vec::new();
    for (name, model) in [("rpn", &models.iou_skewed), ("uniform", &models.iou_uniform)] {
        let d = detect_all(data, &ex, full_reg, Some(model), IouMode::TwoPass, Ranking::Fused)?;
        let p = preds(&d);
        let rep = eval::correlation_report(&p, &truth)?;
        let hi: Vec<(f64, f64)> = rep
            .rows
            .iter()
            .copied()
            .filter(|&(t, _)| t >= intervals.boundaries[top] && t < 1.0)
            .collect();
        let (ht, hp): (Vec<f64>, Vec<f64>) = hi.iter().copied().unzip();
        iou_predictors.push(IouPredictorRow {
            training_set: name.to_string(),
            count_high: hi.len(),
            mae_high: eval::mae(&hp, &ht).unwrap_or(f64::NAN),
            mae_all: rep.mae,
            pearson: rep.pearson,
        });
    }

    let table4_ladder = LADDER
        .iter()
        .filter(|s| rows.contains(&s.row))
        .map(|s| ladder_row(s, cfg, data, models))
        .collect::<Result<_>>()?;

    Ok(Report {
        training,
        fig1a_histogram,
        fig1b_refinement,
        fig1c_loss_composition,
        fig3_improvement,
        fig6_refined_histogram,
        fig7_recall,
        fig8_correlation,
        fig8_scatter,
        table4_ladder,
        iou_predictors,
        high_iou_after_skewed,
        high_iou_after_uniform_weighted,
    })
}

fn recall_rows(
    cfg: &ExperimentConfig,
    data: &Dataset,
    one: &[Vec<Detection>],
    two: &[Vec<Detection>],
) -> Result<Vec<RecallRow>> {
    let gts = eval_gts(&data.test);
    let thr = cfg.inference.nms_threshold;
    let grid = eval::recall_thresholds();
    // cls ranking ignores the IoU prediction, so the two-pass detections serve for it
    let cls = eval::recall_curve(&nms_all(two, thr, Ranking::Cls)?, &gts, &grid);
    let r_one = eval::recall_curve(&nms_all(one, thr, Ranking::Fused)?, &gts, &grid);
    let r_two = eval::recall_curve(&nms_all(two, thr, Ranking::Fused)?, &gts, &grid);
    Ok(grid
        .iter()
        .enumerate()
        .map(|(k, &t)| RecallRow {
            matching_iou: t,
            cls: cls[k],
            fused_one_pass: r_one[k],
            fused_two_pass: r_two[k],
        })
        .collect())
}

/// Recall curves of the full model (uniform weighted regressor, uniform IoU predictor)
/// under the three NMS rankings.
pub fn recall_comparison(cfg: &ExperimentConfig, data: &Dataset, models: &Models) -> Result<Vec<RecallRow>> {
    let ex = cfg.extractor();
    let (reg, iou) = (&models.regressor_uniform_weighted, &models.iou_uniform);
    let one = detect_all(data, &ex, reg, Some(iou), IouMode::OnePass, Ranking::Fused)?;
    let two = detect_all(data, &ex, reg, Some(iou), IouMode::TwoPass, Ranking::Fused)?;
    recall_rows(cfg, data, &one, &two)
}

/// Dataset, training and evaluation in one call.
pub fn run(cfg: &ExperimentConfig, rows: &[usize]) -> Result<(Dataset, Models, Report)> {
    let data = build_dataset(cfg)?;
    let (models, training) = train_models(cfg, &data)?;
    let report = evaluate(cfg, &data, &models, training, rows)?;
    Ok((data, models, report))
}

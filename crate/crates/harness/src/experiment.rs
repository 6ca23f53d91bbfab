//! End-to-end experiment pipeline: ingest, synthesize outliers, train,
//! build banks, score, and write the report bundle.
//!
//! Everything downstream of the config is a deterministic function of
//! (config, seed); wall-clock timings are quarantined in their own report
//! field so byte-level comparisons can exclude them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use firm_core::batch::{
    build_multiview_batch, normalize_embedding, Embedding, LabeledSample, MultiviewBatch,
    PositiveSetPolicy,
};
use firm_core::encoder::{lr_schedule, train_epoch, EncoderConfig, EncoderState, TrainConfig};
use firm_core::image::{dims, Image, Mask};
use firm_core::losses;
use firm_core::metrics::{auroc, aulc, pixel_auroc, LearningCurve, ScoredSet};
use firm_core::patch::{
    extract_patch_grid, first_patch_feasible, foreground_mask, grid_shape,
    sample_positive_patch_pair, MaskPair, PatchConfig, PatchKind, ThresholdMode,
};
use firm_core::scoring::{
    build_prototype, image_score, kde_score, localization_map, median_gamma, s_con, s_con_norm,
    s_ens, s_proto, s_shift, BankLevel, MemoryBank, Polarity, Provenance, RotationBanks,
    ScoreConfig,
};
use firm_core::synth::{
    cutpaste_perturb, inject_anomaly, perlin_anomaly_mask, rotate_image, sample_external_outlier,
    Blend, CutPasteParams, ExternalPool, PerlinParams, RotationTag,
};
use firm_core::{Error as CoreError, INLIER_LABEL, OUTLIER_LABEL};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_view, AugmentParams};
use crate::dataset::{ingest_dataset, Dataset, Layout};
use crate::io::{load_png, save_heatmap_pgm};
use crate::svg::learning_curve_svg;
use crate::{ConfigError, DataError};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub layout: Layout,
    /// Square side every image is resized to.
    pub resolution: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
pub enum OutlierSource {
    Rotations,
    Cutpaste,
    PerlinInject,
    ExternalPool { dir: PathBuf },
}

/// How synthetic outliers are labeled: one shared tag (SupCon-style) or a
/// distinct tag per transformation group (Rot-SupCon-style).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
pub enum OutlierTagging {
    Single,
    PerGroup,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    Con,
    ConNorm,
    Shift,
    Ens,
    Proto,
    Kde,
}

impl ScoreKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Con => "con",
            Self::ConNorm => "con-norm",
            Self::Shift => "shift",
            Self::Ens => "ens",
            Self::Proto => "proto",
            Self::Kde => "kde",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "con" => Self::Con,
            "con-norm" => Self::ConNorm,
            "shift" => Self::Shift,
            "ens" => Self::Ens,
            "proto" => Self::Proto,
            "kde" => Self::Kde,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForegroundConfig {
    pub mode: ThresholdMode,
    pub morph_radius: usize,
}

impl Default for ForegroundConfig {
    fn default() -> Self {
        Self {
            mode: ThresholdMode::Otsu,
            morph_radius: 3,
        }
    }
}

fn default_eval_stride() -> usize {
    10
}

/// Full experiment description. Unknown JSON keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub outlier_source: OutlierSource,
    #[serde(default = "default_tagging")]
    pub outlier_tagging: OutlierTagging,
    pub policy: PositiveSetPolicy,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub scores: Vec<ScoreKind>,
    #[serde(default)]
    pub score: ScoreConfig,
    #[serde(default)]
    pub patch: Option<PatchConfig>,
    #[serde(default)]
    pub foreground: ForegroundConfig,
    #[serde(default = "default_eval_stride")]
    pub eval_stride: usize,
    pub seed: u64,
    pub output: PathBuf,
}

fn default_tagging() -> OutlierTagging {
    OutlierTagging::PerGroup
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| ConfigError(format!("config JSON: {e}")))?;
        Ok(cfg)
    }

    /// Structural validation; referenced paths must exist before any work.
    pub fn validate(&self) -> Result<()> {
        if !self.dataset.root.is_dir() {
            anyhow::bail!(ConfigError(format!(
                "dataset root {} does not exist",
                self.dataset.root.display()
            )));
        }
        if let OutlierSource::ExternalPool { dir } = &self.outlier_source {
            if !dir.is_dir() {
                anyhow::bail!(ConfigError(format!(
                    "external pool {} does not exist",
                    dir.display()
                )));
            }
        }
        self.encoder.validate().map_err(to_anyhow)?;
        self.train.validate().map_err(to_anyhow)?;
        if self.scores.is_empty() {
            anyhow::bail!(ConfigError("scores list is empty".into()));
        }
        if self.eval_stride == 0 {
            anyhow::bail!(ConfigError("eval_stride must be positive".into()));
        }
        if self.score.k == 0 {
            anyhow::bail!(ConfigError("score.k must be positive".into()));
        }
        if let Some(patch) = &self.patch {
            patch
                .validate(self.dataset.resolution, self.dataset.resolution)
                .map_err(to_anyhow)?;
            let (h, w, _) = self.encoder.input;
            if (h, w) != (patch.patch, patch.patch) {
                anyhow::bail!(ConfigError(format!(
                    "patch mode needs encoder input {0}x{0}, config says {h}x{w}",
                    patch.patch
                )));
            }
            if !matches!(
                self.outlier_source,
                OutlierSource::Cutpaste | OutlierSource::PerlinInject
            ) {
                anyhow::bail!(ConfigError(
                    "patch mode needs a mask-producing outlier source (cutpaste or perlin-inject)"
                        .into(),
                ));
            }
        } else {
            let (h, w, _) = self.encoder.input;
            if (h, w) != (self.dataset.resolution, self.dataset.resolution) {
                anyhow::bail!(ConfigError(format!(
                    "encoder input {h}x{w} does not match dataset resolution {}",
                    self.dataset.resolution
                )));
            }
        }
        Ok(())
    }
}

fn to_anyhow(e: CoreError) -> anyhow::Error {
    anyhow::Error::new(e)
}

/// Final artifact of [`run_experiment`], also written as `report.json`.
#[derive(Debug, Serialize)]
pub struct Report {
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub eval_stride: usize,
    pub curve: LearningCurve,
    pub epoch_losses: Vec<f64>,
    pub score_aurocs: BTreeMap<String, f64>,
    pub aulc: f64,
    pub pixel_auroc: Option<f64>,
    pub timings: BTreeMap<String, f64>,
}

fn mix_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream)
}

/// Synthetic-outlier training samples derived from the inliers.
struct TrainingSet {
    samples: Vec<LabeledSample<f32>>,
    /// Anomaly masks by sample index (mask-producing sources only).
    anomaly_masks: Vec<Option<Mask>>,
    /// Foreground masks for inliers, computed only in patch mode.
    foregrounds: Vec<Option<Mask>>,
}

fn build_training_set(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<TrainingSet> {
    let mut samples = Vec::new();
    let mut masks = Vec::new();
    let mut foregrounds = Vec::new();
    for inlier in &dataset.train {
        let fg = cfg.patch.as_ref().map(|pcfg| {
            let (mask, empty) =
                foreground_mask(&inlier.image, cfg.foreground.mode, cfg.foreground.morph_radius);
            // fall back to the whole frame when thresholding finds nothing
            // or leaves no feasible patch origin
            if empty || !first_patch_feasible(&mask, PatchKind::Normal, pcfg) {
                Mask::from_elem(mask.dim(), true)
            } else {
                mask
            }
        });
        samples.push(inlier.clone());
        masks.push(None);
        foregrounds.push(fg);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1));
    match &cfg.outlier_source {
        OutlierSource::Rotations => {
            for inlier in &dataset.train {
                for tag in RotationTag::OUTLIERS {
                    let rotated = rotate_image(&inlier.image, tag).map_err(to_anyhow)?;
                    let label = match cfg.outlier_tagging {
                        OutlierTagging::PerGroup => tag.group_label(),
                        OutlierTagging::Single => OUTLIER_LABEL,
                    };
                    samples.push(LabeledSample {
                        image: rotated,
                        label,
                        source_id: format!("{}+rot{}", inlier.source_id, tag.degrees()),
                    });
                    masks.push(None);
                    foregrounds.push(None);
                }
            }
        }
        OutlierSource::Cutpaste => {
            let params = CutPasteParams::default();
            for inlier in &dataset.train {
                let (image, mask) =
                    cutpaste_perturb(&inlier.image, &params, &mut rng).map_err(to_anyhow)?;
                samples.push(LabeledSample {
                    image,
                    label: OUTLIER_LABEL,
                    source_id: format!("{}+cutpaste", inlier.source_id),
                });
                masks.push(Some(mask));
                foregrounds.push(None);
            }
        }
        OutlierSource::PerlinInject => {
            let perlin = PerlinParams {
                seed: cfg.seed,
                ..Default::default()
            };
            for (i, inlier) in dataset.train.iter().enumerate() {
                let (fg, empty) =
                    foreground_mask(&inlier.image, cfg.foreground.mode, cfg.foreground.morph_radius);
                // an empty foreground would forbid any injection; fall back
                // to the whole frame
                let fg = if empty {
                    Mask::from_elem(fg.dim(), true)
                } else {
                    fg
                };
                let mut anomaly = None;
                for _ in 0..100 {
                    let candidate =
                        perlin_anomaly_mask(&fg, &perlin, &mut rng).map_err(to_anyhow)?;
                    if candidate.iter().any(|&b| b) {
                        anomaly = Some(candidate);
                        break;
                    }
                }
                let anomaly = anomaly.ok_or_else(|| {
                    anyhow::Error::new(CoreError::Numerical(
                        "perlin mask stayed empty after 100 draws".into(),
                    ))
                })?;
                let donor = &dataset.train[(i + 1) % dataset.train.len()].image;
                let injected = inject_anomaly(&inlier.image, donor, &anomaly, Blend::LinearFeather)
                    .map_err(to_anyhow)?;
                samples.push(LabeledSample {
                    image: injected,
                    label: OUTLIER_LABEL,
                    source_id: format!("{}+perlin", inlier.source_id),
                });
                masks.push(Some(anomaly));
                foregrounds.push(None);
            }
        }
        OutlierSource::ExternalPool { dir } => {
            let channels = cfg.encoder.input.2;
            let files = crate::dataset::pool_files(dir)?;
            let mut images = Vec::new();
            for path in files {
                let img = load_png(&path, channels)?;
                images.push(firm_core::image::resize_bilinear(
                    &img,
                    cfg.dataset.resolution,
                    cfg.dataset.resolution,
                ));
            }
            let pool = ExternalPool::new(images).map_err(to_anyhow)?;
            for _ in 0..dataset.train.len() {
                let sample = sample_external_outlier(&pool, &mut rng).map_err(to_anyhow)?;
                samples.push(sample);
                masks.push(None);
                foregrounds.push(None);
            }
        }
    }
    Ok(TrainingSet {
        samples,
        anomaly_masks: masks,
        foregrounds,
    })
}

fn feature_of(state: &EncoderState<f32>, img: &Image<f32>) -> Result<Array1<f32>> {
    Ok(state.forward(img).map_err(to_anyhow)?.0)
}

fn embed_feature(state: &EncoderState<f32>, img: &Image<f32>) -> Result<Embedding<f32>> {
    let feature = feature_of(state, img)?;
    normalize_embedding(&feature).map_err(to_anyhow)
}

fn inlier_bank(
    state: &EncoderState<f32>,
    inliers: &[LabeledSample<f32>],
) -> Result<MemoryBank<f32>> {
    let mut embeddings = Vec::with_capacity(inliers.len());
    let mut provenance = Vec::with_capacity(inliers.len());
    for sample in inliers {
        embeddings.push(embed_feature(state, &sample.image)?);
        provenance.push(Provenance {
            source_id: sample.source_id.clone(),
            origin: None,
        });
    }
    MemoryBank::new(embeddings, BankLevel::Image, provenance).map_err(to_anyhow)
}

fn patch_bank(
    state: &EncoderState<f32>,
    inliers: &[LabeledSample<f32>],
    patch: &PatchConfig,
) -> Result<MemoryBank<f32>> {
    let mut embeddings = Vec::new();
    let mut provenance = Vec::new();
    for sample in inliers {
        for p in extract_patch_grid(&sample.image, patch.patch, patch.stride).map_err(to_anyhow)? {
            embeddings.push(embed_feature(state, &p.pixels)?);
            provenance.push(Provenance {
                source_id: sample.source_id.clone(),
                origin: Some(p.origin),
            });
        }
    }
    MemoryBank::new(embeddings, BankLevel::Patch, provenance).map_err(to_anyhow)
}

/// Anomaly-high test AUROC with the cosine-kNN score; the learning-curve
/// evaluator.
fn curve_auroc(
    state: &EncoderState<f32>,
    dataset: &Dataset,
    patch: Option<&PatchConfig>,
    k: usize,
) -> Result<f64> {
    let (scores, labels): (Vec<f32>, Vec<bool>) = match patch {
        None => {
            let bank = inlier_bank(state, &dataset.train)?;
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            for t in &dataset.test {
                let e = embed_feature(state, &t.image)?;
                scores.push(-s_con(&e, &bank, k.min(bank.len())).map_err(to_anyhow)?);
                labels.push(t.is_anomaly);
            }
            (scores, labels)
        }
        Some(pcfg) => {
            let bank = patch_bank(state, &dataset.train, pcfg)?;
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            for t in &dataset.test {
                let (agg, _) = image_score(
                    &t.image,
                    &bank,
                    |img| embed_feature(state, img).map_err(|e| core_err(e)),
                    pcfg.patch,
                    pcfg.stride,
                    Polarity::AnomalyHigh,
                )
                .map_err(to_anyhow)?;
                scores.push(agg);
                labels.push(t.is_anomaly);
            }
            (scores, labels)
        }
    };
    let ids = dataset.test.iter().map(|t| t.id.clone()).collect();
    auroc(&ScoredSet::new(scores, labels, ids).map_err(to_anyhow)?).map_err(to_anyhow)
}

fn core_err(e: anyhow::Error) -> CoreError {
    match e.downcast::<CoreError>() {
        Ok(c) => c,
        Err(e) => CoreError::Numerical(e.to_string()),
    }
}

/// Run the full pipeline and write the report bundle into `cfg.output`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let started = Instant::now();
    let mut timings = BTreeMap::new();

    let channels = cfg.encoder.input.2;
    let dataset = ingest_dataset(
        &cfg.dataset.root,
        &cfg.dataset.layout,
        cfg.dataset.resolution,
        channels,
    )?;
    let training = build_training_set(cfg, &dataset)?;
    timings.insert("ingest_s".to_string(), started.elapsed().as_secs_f64());

    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    let mut state = EncoderState::<f32>::new(cfg.encoder.clone(), cfg.seed).map_err(to_anyhow)?;

    let train_started = Instant::now();
    let mut curve_epochs = vec![0usize];
    let mut curve_values = vec![curve_auroc(&state, &dataset, cfg.patch.as_ref(), cfg.score.k)?];
    let mut epoch_losses = Vec::with_capacity(train_cfg.epochs);
    for epoch in 0..train_cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1000 + epoch as u64));
        let batches = match &cfg.patch {
            None => image_level_batches(&training, &train_cfg, &mut rng)?,
            Some(pcfg) => patch_level_batches(&training, pcfg, &train_cfg, &mut rng)?,
        };
        let metrics =
            train_epoch(&mut state, batches, cfg.policy, &train_cfg).map_err(to_anyhow)?;
        epoch_losses.push(metrics.mean_loss);
        let completed = epoch + 1;
        if completed % cfg.eval_stride == 0 || completed == train_cfg.epochs {
            if *curve_epochs.last().unwrap() != completed {
                curve_epochs.push(completed);
                curve_values.push(curve_auroc(&state, &dataset, cfg.patch.as_ref(), cfg.score.k)?);
            }
        }
    }
    timings.insert("train_s".to_string(), train_started.elapsed().as_secs_f64());

    let score_started = Instant::now();
    std::fs::create_dir_all(&cfg.output)
        .with_context(|| format!("creating {}", cfg.output.display()))?;
    let (score_aurocs, score_table, pixel) = match &cfg.patch {
        None => image_level_scores(cfg, &state, &dataset)?,
        Some(pcfg) => patch_level_scores(cfg, &state, &dataset, pcfg)?,
    };
    timings.insert("score_s".to_string(), score_started.elapsed().as_secs_f64());

    let curve = LearningCurve::new(curve_epochs, curve_values).map_err(to_anyhow)?;
    let aulc_value = aulc(&curve).map_err(to_anyhow)?;

    state.save(&cfg.output.join("model.firm")).map_err(to_anyhow)?;
    write_scores_csv(&cfg.output.join("scores.csv"), &dataset, &score_table)?;
    write_curve_csv(&cfg.output.join("curve.csv"), &curve)?;
    std::fs::write(
        cfg.output.join("curve.svg"),
        learning_curve_svg(&curve, &format!("auroc vs epoch (seed {})", cfg.seed)),
    )?;

    timings.insert("total_s".to_string(), started.elapsed().as_secs_f64());
    let report = Report {
        config: serde_json::to_value(cfg)?,
        seeds: vec![cfg.seed],
        eval_stride: cfg.eval_stride,
        curve,
        epoch_losses,
        score_aurocs,
        aulc: aulc_value,
        pixel_auroc: pixel,
        timings,
    };
    std::fs::write(
        cfg.output.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

fn image_level_batches(
    training: &TrainingSet,
    train_cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MultiviewBatch<f32>>> {
    let mut order: Vec<usize> = (0..training.samples.len()).collect();
    order.shuffle(rng);
    let aug = AugmentParams::default();
    let mut batches = Vec::new();
    for chunk in order.chunks(train_cfg.batch_pairs) {
        if chunk.len() < 2 {
            continue; // a single pair has zero loss; drop the remainder
        }
        let samples: Vec<LabeledSample<f32>> =
            chunk.iter().map(|&i| training.samples[i].clone()).collect();
        let batch = build_multiview_batch(
            &samples,
            |img: &Image<f32>, r: &mut ChaCha8Rng| augment_view(img, &aug, r),
            rng,
        )
        .map_err(to_anyhow)?;
        batches.push(batch);
    }
    Ok(batches)
}

/// Patch pairs drawn per §-style constraints: normal pairs from inlier
/// images with their foreground, outlier pairs from synthetic-anomaly
/// images against their anomaly mask.
fn patch_level_batches(
    training: &TrainingSet,
    pcfg: &PatchConfig,
    train_cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MultiviewBatch<f32>>> {
    let inlier_idx: Vec<usize> = (0..training.samples.len())
        .filter(|&i| training.samples[i].label == INLIER_LABEL)
        .collect();
    let outlier_idx: Vec<usize> = (0..training.samples.len())
        .filter(|&i| training.anomaly_masks[i].is_some())
        .collect();
    if inlier_idx.is_empty() || outlier_idx.is_empty() {
        anyhow::bail!(DataError("patch mode needs inliers and masked outliers".into()));
    }
    let batches_per_epoch = (inlier_idx.len().max(train_cfg.batch_pairs)
        / train_cfg.batch_pairs)
        .max(1);
    let mut batches = Vec::with_capacity(batches_per_epoch);
    for _ in 0..batches_per_epoch {
        let mut instances = Vec::with_capacity(2 * train_cfg.batch_pairs);
        let mut labels = Vec::with_capacity(2 * train_cfg.batch_pairs);
        let mut pair_of = Vec::with_capacity(2 * train_cfg.batch_pairs);
        for pair in 0..train_cfg.batch_pairs {
            let outlier_pair = pair % 2 == 1;
            let (sample_idx, kind) = if outlier_pair {
                (
                    outlier_idx[rng.random_range(0..outlier_idx.len())],
                    PatchKind::Outlier,
                )
            } else {
                (
                    inlier_idx[rng.random_range(0..inlier_idx.len())],
                    PatchKind::Normal,
                )
            };
            let sample = &training.samples[sample_idx];
            let (h, w) = dims(&sample.image);
            // outliers sample against their anomaly mask inside a full-frame
            // foreground; inliers use their thresholded foreground
            let anomaly = training.anomaly_masks[sample_idx]
                .clone()
                .unwrap_or_else(|| Mask::from_elem((h, w), false));
            let foreground = match kind {
                PatchKind::Outlier => Mask::from_elem((h, w), true),
                PatchKind::Normal => training.foregrounds[sample_idx]
                    .clone()
                    .unwrap_or_else(|| Mask::from_elem((h, w), true)),
            };
            let masks = MaskPair::new(foreground, anomaly).map_err(to_anyhow)?;
            let (a, b) =
                sample_positive_patch_pair(&sample.image, &masks, kind, pcfg, rng)
                    .map_err(to_anyhow)?;
            let base = instances.len();
            instances.push(a.pixels);
            instances.push(b.pixels);
            let label = if outlier_pair { OUTLIER_LABEL } else { INLIER_LABEL };
            labels.push(label);
            labels.push(label);
            pair_of.push(base + 1);
            pair_of.push(base);
        }
        batches.push(MultiviewBatch::from_parts(instances, labels, pair_of).map_err(to_anyhow)?);
    }
    Ok(batches)
}

type ScoreTable = BTreeMap<String, Vec<f32>>;

fn image_level_scores(
    cfg: &ExperimentConfig,
    state: &EncoderState<f32>,
    dataset: &Dataset,
) -> Result<(BTreeMap<String, f64>, ScoreTable, Option<f64>)> {
    let bank = inlier_bank(state, &dataset.train)?;
    let k = cfg.score.k.min(bank.len());
    let anomaly_high = cfg.score.polarity == Polarity::AnomalyHigh;
    let flip = |v: f32| if anomaly_high { -v } else { v };

    // heavier artifacts shared across kinds
    let needs_rotation = cfg
        .scores
        .iter()
        .any(|s| matches!(s, ScoreKind::Shift | ScoreKind::Ens));
    let rotation_banks = if needs_rotation {
        let memory: Vec<Image<f32>> =
            dataset.train.iter().map(|s| s.image.clone()).collect();
        Some(
            RotationBanks::build(&memory, |img| {
                embed_feature(state, img).map_err(core_err)
            })
            .map_err(to_anyhow)?,
        )
    } else {
        None
    };
    let raw_features: Option<Array2<f32>> = if cfg.scores.contains(&ScoreKind::Kde) {
        let mut rows = Array2::zeros((dataset.train.len(), cfg.encoder.d));
        for (i, s) in dataset.train.iter().enumerate() {
            rows.row_mut(i).assign(&feature_of(state, &s.image)?);
        }
        Some(rows)
    } else {
        None
    };
    let prototype = if cfg.scores.contains(&ScoreKind::Proto) {
        Some(build_prototype(&bank).map_err(to_anyhow)?)
    } else {
        None
    };
    let kde_gamma = match (&raw_features, cfg.score.kde_gamma) {
        (Some(rows), None) => Some(median_gamma(rows).map_err(to_anyhow)?),
        (_, explicit) => explicit,
    };

    let mut table: ScoreTable = BTreeMap::new();
    let mut aurocs = BTreeMap::new();
    for kind in &cfg.scores {
        let mut ens_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 7777));
        let mut values = Vec::with_capacity(dataset.test.len());
        for t in &dataset.test {
            let value = match kind {
                ScoreKind::Con => {
                    flip(s_con(&embed_feature(state, &t.image)?, &bank, k).map_err(to_anyhow)?)
                }
                ScoreKind::ConNorm => {
                    let raw = feature_of(state, &t.image)?;
                    flip(s_con_norm(&raw, &bank, k).map_err(to_anyhow)?)
                }
                ScoreKind::Shift => {
                    let banks = rotation_banks.as_ref().expect("built above");
                    flip(
                        s_shift(
                            &t.image,
                            banks,
                            |img| embed_feature(state, img).map_err(core_err),
                            k,
                        )
                        .map_err(to_anyhow)?,
                    )
                }
                ScoreKind::Ens => {
                    let banks = rotation_banks.as_ref().expect("built above");
                    flip(
                        s_ens(
                            &t.image,
                            banks,
                            |img| embed_feature(state, img).map_err(core_err),
                            &cfg.score,
                            &mut ens_rng,
                        )
                        .map_err(to_anyhow)?,
                    )
                }
                ScoreKind::Proto => {
                    // already anomaly-oriented
                    s_proto(
                        &embed_feature(state, &t.image)?,
                        prototype.as_ref().expect("built above"),
                    )
                    .map_err(to_anyhow)?
                }
                ScoreKind::Kde => {
                    let rows = raw_features.as_ref().expect("built above");
                    let gamma = kde_gamma.expect("resolved above");
                    kde_score(&feature_of(state, &t.image)?, rows, gamma).map_err(to_anyhow)?
                }
            };
            values.push(value);
        }
        let labels: Vec<bool> = dataset.test.iter().map(|t| t.is_anomaly).collect();
        let ids: Vec<String> = dataset.test.iter().map(|t| t.id.clone()).collect();
        let metric = auroc(&ScoredSet::new(values.clone(), labels, ids).map_err(to_anyhow)?)
            .map_err(to_anyhow)?;
        aurocs.insert(kind.name().to_string(), metric);
        table.insert(kind.name().to_string(), values);
    }
    Ok((aurocs, table, None))
}

fn patch_level_scores(
    cfg: &ExperimentConfig,
    state: &EncoderState<f32>,
    dataset: &Dataset,
    pcfg: &PatchConfig,
) -> Result<(BTreeMap<String, f64>, ScoreTable, Option<f64>)> {
    let bank = patch_bank(state, &dataset.train, pcfg)?;
    let heat_dir = cfg.output.join("heatmaps");
    std::fs::create_dir_all(&heat_dir)?;
    let (rows, cols) = grid_shape(
        cfg.dataset.resolution,
        cfg.dataset.resolution,
        pcfg.patch,
        pcfg.stride,
    );
    let mut values = Vec::with_capacity(dataset.test.len());
    let mut pixel_aurocs = Vec::new();
    for t in &dataset.test {
        let (agg, sims) = image_score(
            &t.image,
            &bank,
            |img| embed_feature(state, img).map_err(core_err),
            pcfg.patch,
            pcfg.stride,
            cfg.score.polarity,
        )
        .map_err(to_anyhow)?;
        values.push(agg);
        let anomaly_scores: Vec<f32> = sims.iter().map(|&s| 1.0 - s).collect();
        let map = localization_map(
            &anomaly_scores,
            (rows, cols),
            (cfg.dataset.resolution, cfg.dataset.resolution),
            pcfg.patch,
            pcfg.stride,
        )
        .map_err(to_anyhow)?;
        let stem = t.id.replace('/', "_");
        save_heatmap_pgm(&heat_dir.join(format!("{stem}.pgm")), &map)?;
        write_patch_csv(
            &heat_dir.join(format!("{stem}.csv")),
            &sims,
            (rows, cols),
            pcfg.stride,
        )?;
        if let Some(gt) = &t.gt_mask {
            let both = gt.iter().any(|&b| b) && gt.iter().any(|&b| !b);
            if both {
                pixel_aurocs.push(pixel_auroc(&map, gt).map_err(to_anyhow)?);
            }
        }
    }
    let labels: Vec<bool> = dataset.test.iter().map(|t| t.is_anomaly).collect();
    let ids: Vec<String> = dataset.test.iter().map(|t| t.id.clone()).collect();
    let metric = auroc(&ScoredSet::new(values.clone(), labels, ids).map_err(to_anyhow)?)
        .map_err(to_anyhow)?;
    let mut aurocs = BTreeMap::new();
    aurocs.insert("con".to_string(), metric);
    let mut table = BTreeMap::new();
    table.insert("con".to_string(), values);
    let pixel = if pixel_aurocs.is_empty() {
        None
    } else {
        Some(pixel_aurocs.iter().sum::<f64>() / pixel_aurocs.len() as f64)
    };
    Ok((aurocs, table, pixel))
}

fn write_scores_csv(path: &Path, dataset: &Dataset, table: &ScoreTable) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend(table.keys().cloned());
    writer.write_record(&header)?;
    for (i, t) in dataset.test.iter().enumerate() {
        let mut record = vec![
            t.id.clone(),
            if t.is_anomaly { "anomaly" } else { "inlier" }.to_string(),
        ];
        for values in table.values() {
            record.push(format!("{}", values[i]));
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

fn write_curve_csv(path: &Path, curve: &LearningCurve) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["epoch", "auroc"])?;
    for (e, a) in curve.epochs.iter().zip(curve.aurocs.iter()) {
        writer.write_record([e.to_string(), format!("{a}")])?;
    }
    writer.flush()?;
    Ok(())
}

/// Per-patch raw similarities: (row, col, origin_y, origin_x, raw_sim).
pub fn write_patch_csv(
    path: &Path,
    sims: &[f32],
    grid: (usize, usize),
    stride: usize,
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["row", "col", "origin_y", "origin_x", "raw_sim"])?;
    for (i, &sim) in sims.iter().enumerate() {
        let row = i / grid.1;
        let col = i % grid.1;
        writer.write_record([
            row.to_string(),
            col.to_string(),
            (row * stride).to_string(),
            (col * stride).to_string(),
            format!("{sim}"),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// `lr_schedule` surfaced for reporting/debugging binaries.
pub fn schedule_preview(train: &TrainConfig) -> Vec<(usize, f64)> {
    (0..train.epochs).map(|e| (e, lr_schedule(e, train))).collect()
}

/// Positive-set sizes for one labeled batch; used in logs when debugging
/// policy behavior.
pub fn positive_set_sizes(
    policy: PositiveSetPolicy,
    labels: &[u32],
    pair_of: &[usize],
) -> Vec<usize> {
    losses::positive_sets(policy, labels, pair_of)
        .iter()
        .map(|s| s.len())
        .collect()
}

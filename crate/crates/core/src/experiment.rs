//! End-to-end experiment wiring: one trial draws a split, optionally builds
//! the SOM stack (map, node statistics, sigmoid layer), trains one
//! classifier per requested model type, and scores the held-out test set.
//! Trials are independent and seeded separately, so adding trials never
//! perturbs existing ones.

use crate::data::{fit_standardizer, Dataset, Label, Spectrum, Standardizer};
use crate::error::{Error, Result};
use crate::eval::{
    default_fa_grid, reliability_curve, roc, summarize_trials, ReliabilityCurve, RocCurve,
    TrialSummary,
};
use crate::membership::{som_features_batch, train_sigmoids, MembershipConfig, SigmoidLayer};
use crate::seed::{self, stage};
use crate::som::{
    estimate_node_stats, ridge_for, train_som, NodeStats, SomConfig, SomGrid, ANGLE_WEIGHT,
};
use crate::nn::Tensor;
use crate::ssgan::{
    load_model, save_model, train_gan, FeatureSet, GanConfig, LabeledSet, Mode, NetSizes,
    SomFeaturizer, TrainedGan, UnlabeledSet,
};
use crate::synth::{make_split, ExperimentSplit, Provenance, Scene, SplitCounts};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// The four trained configurations under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelType {
    SupSpectra,
    SupSpectraSom,
    SemiSpectra,
    SemiSpectraSom,
}

impl ModelType {
    pub const ALL: [ModelType; 4] = [
        ModelType::SupSpectra,
        ModelType::SupSpectraSom,
        ModelType::SemiSpectra,
        ModelType::SemiSpectraSom,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ModelType::SupSpectra => "sup-spectra",
            ModelType::SupSpectraSom => "sup-spectra-som",
            ModelType::SemiSpectra => "semi-spectra",
            ModelType::SemiSpectraSom => "semi-spectra-som",
        }
    }

    pub fn parse(s: &str) -> Result<ModelType> {
        ModelType::ALL
            .iter()
            .find(|m| m.name() == s)
            .copied()
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown model type {s}; expected one of sup-spectra, sup-spectra-som, semi-spectra, semi-spectra-som"
                ))
            })
    }

    pub fn mode(&self) -> Mode {
        match self {
            ModelType::SupSpectra | ModelType::SupSpectraSom => Mode::Supervised,
            ModelType::SemiSpectra | ModelType::SemiSpectraSom => Mode::SemiSupervised,
        }
    }

    pub fn features(&self) -> FeatureSet {
        match self {
            ModelType::SupSpectra | ModelType::SemiSpectra => FeatureSet::SpectraOnly,
            ModelType::SupSpectraSom | ModelType::SemiSpectraSom => FeatureSet::SpectraAndSom,
        }
    }

    /// Stable per-model seed tag, distinct from the stage tags.
    fn seed_tag(&self) -> u64 {
        0x20 + ModelType::ALL.iter().position(|m| m == self).unwrap() as u64
    }
}

/// Which spectra feed the SOM, its node statistics, and the sigmoid layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SomTrainingData {
    /// The labeled inlier samples only.
    LabeledInliers,
    /// Labeled inliers plus the unlabeled samples that are truly inliers.
    /// Mirrors building the map from the scene's inlier-class pixels; on
    /// synthetic data the provenance is known.
    InlierPool,
    /// Every training sample: labeled (outliers included) and unlabeled.
    AllTraining,
}

/// Full experiment settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: Scene,
    pub counts: SplitCounts,
    pub som_rows: usize,
    pub som_cols: usize,
    pub som_epochs: usize,
    pub som_data: SomTrainingData,
    pub membership: MembershipConfig,
    pub angle_weight: f64,
    pub sup_epochs: usize,
    pub semi_epochs: usize,
    pub batch_size: usize,
    /// Discriminator and generator layer widths.
    #[serde(default)]
    pub sizes: NetSizes,
    pub trials: usize,
    pub master_seed: u64,
}

impl ExperimentConfig {
    pub fn defaults(scene: Scene, trials: usize, master_seed: u64) -> Self {
        ExperimentConfig {
            scene,
            counts: SplitCounts::default(),
            som_rows: 4,
            som_cols: 4,
            som_epochs: 40,
            som_data: SomTrainingData::InlierPool,
            membership: MembershipConfig::default(),
            angle_weight: ANGLE_WEIGHT,
            sup_epochs: 300,
            semi_epochs: 25,
            batch_size: 32,
            sizes: NetSizes::default(),
            trials,
            master_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.counts.validate()?;
        self.membership.validate()?;
        if self.som_rows == 0 || self.som_cols == 0 {
            return Err(Error::Config("SOM grid must be nonempty".into()));
        }
        if self.som_epochs == 0 || self.sup_epochs == 0 || self.semi_epochs == 0 {
            return Err(Error::Config("epoch counts must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trial count must be positive".into()));
        }
        if !(self.angle_weight >= 0.0) {
            return Err(Error::Config("angle weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// The SOM stack shared by the spectra+SOM model types of one trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SomArtifacts {
    pub grid: SomGrid,
    pub stats: NodeStats,
    pub layer: SigmoidLayer,
    pub angle_weight: f64,
}

/// Spectra selected by the `som_data` policy.
pub fn som_pool(cfg: &ExperimentConfig, split: &ExperimentSplit) -> Vec<Spectrum> {
    let mut pool: Vec<Spectrum> = split
        .labeled
        .samples
        .iter()
        .filter(|(_, l)| {
            matches!(l, Label::Inlier(_))
                || (cfg.som_data == SomTrainingData::AllTraining && matches!(l, Label::Outlier))
        })
        .map(|(s, _)| s.clone())
        .collect();
    match cfg.som_data {
        SomTrainingData::LabeledInliers => {}
        SomTrainingData::InlierPool => {
            for ((s, _), p) in split.unlabeled.samples.iter().zip(&split.unlabeled_truth) {
                if matches!(p, Provenance::Inlier(_)) {
                    pool.push(s.clone());
                }
            }
        }
        SomTrainingData::AllTraining => {
            pool.extend(split.unlabeled.samples.iter().map(|(s, _)| s.clone()));
        }
    }
    pool
}

/// Train the map, node statistics, and sigmoid layer for one trial.
pub fn build_som_artifacts(
    cfg: &ExperimentConfig,
    split: &ExperimentSplit,
    trial: u64,
) -> Result<SomArtifacts> {
    let pool = som_pool(cfg, split);
    let ridge = ridge_for(&pool);
    let mut som_cfg = SomConfig::defaults(
        cfg.som_rows,
        cfg.som_cols,
        ridge,
        seed::derive(cfg.master_seed, &[stage::SOM, trial]),
    );
    som_cfg.epochs = cfg.som_epochs;
    let grid = train_som(&pool, &som_cfg, cfg.som_rows, cfg.som_cols)?;
    let stats = estimate_node_stats(&grid, &pool, ridge)?;
    let layer = train_sigmoids(&grid, &stats, &pool, cfg.angle_weight, &cfg.membership)?;
    Ok(SomArtifacts {
        grid,
        stats,
        layer,
        angle_weight: cfg.angle_weight,
    })
}

/// One trained model with everything needed to score raw spectra.
pub struct TrainedPipeline {
    pub model: TrainedGan,
    pub standardizer: Standardizer,
    pub som: Option<SomArtifacts>,
}

impl TrainedPipeline {
    /// Outlier scores and predicted classes for raw spectra.
    pub fn score_spectra(&mut self, spectra: &[Spectrum]) -> Result<(Vec<f64>, Vec<usize>)> {
        if spectra.is_empty() {
            return Err(Error::EmptyInput("spectra to score".into()));
        }
        let spec = standardized_tensor(&self.standardizer, spectra)?;
        let som = match &self.som {
            Some(a) => Some(som_features_batch(
                &a.grid,
                &a.stats,
                &a.layer,
                &raw_tensor(spectra),
                a.angle_weight,
            )?),
            None => None,
        };
        let scores = self.model.outlier_scores(&spec, som.as_ref())?;
        let classes = self.model.classify(&spec, som.as_ref())?;
        Ok((scores, classes))
    }
}

/// Extras stored beside the network checkpoint: the input standardizer and,
/// for spectra+SOM models, the full SOM stack.
#[derive(Serialize, Deserialize)]
struct PipelineExtras {
    standardizer: Standardizer,
    som: Option<SomArtifacts>,
}

/// Write a pipeline checkpoint: `model.json` + `model.bin` (network) and
/// `pipeline.json` (standardizer and SOM stack) under `dir`.
pub fn save_pipeline(dir: impl AsRef<std::path::Path>, pipe: &TrainedPipeline) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    save_model(dir, &pipe.model)?;
    let extras = PipelineExtras {
        standardizer: pipe.standardizer.clone(),
        som: pipe.som.clone(),
    };
    let file = std::fs::File::create(dir.join("pipeline.json"))?;
    serde_json::to_writer(std::io::BufWriter::new(file), &extras)
        .map_err(|e| Error::Parse { row: 0, msg: format!("pipeline checkpoint: {e}") })?;
    Ok(())
}

/// Load a checkpoint written by [`save_pipeline`].
pub fn load_pipeline(dir: impl AsRef<std::path::Path>) -> Result<TrainedPipeline> {
    let dir = dir.as_ref();
    let model = load_model(dir)?;
    let file = std::fs::File::open(dir.join("pipeline.json"))?;
    let extras: PipelineExtras = serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| Error::Parse { row: 0, msg: format!("pipeline checkpoint: {e}") })?;
    if extras.standardizer.bands() != model.bands {
        return Err(Error::dimension(
            "pipeline standardizer",
            model.bands,
            extras.standardizer.bands(),
        ));
    }
    Ok(TrainedPipeline {
        model,
        standardizer: extras.standardizer,
        som: extras.som,
    })
}

fn raw_tensor(spectra: &[Spectrum]) -> Tensor {
    let bands = spectra[0].bands();
    let mut t = Array2::zeros((spectra.len(), bands));
    for (i, s) in spectra.iter().enumerate() {
        for (j, v) in s.values().iter().enumerate() {
            t[[i, j]] = *v;
        }
    }
    t
}

fn standardized_tensor(std: &Standardizer, spectra: &[Spectrum]) -> Result<Tensor> {
    let bands = spectra[0].bands();
    let mut t = Array2::zeros((spectra.len(), bands));
    for (i, s) in spectra.iter().enumerate() {
        let z = std.standardize(s)?;
        for (j, v) in z.values().iter().enumerate() {
            t[[i, j]] = *v;
        }
    }
    Ok(t)
}

/// Train one model type on a split. `som` must be present for the
/// spectra+SOM types and is ignored otherwise. The standardizer is fit on
/// the spectra the mode may see: labeled only when supervised, labeled plus
/// unlabeled when semi-supervised.
pub fn train_model(
    cfg: &ExperimentConfig,
    split: &ExperimentSplit,
    som: Option<&SomArtifacts>,
    model_type: ModelType,
    trial: u64,
) -> Result<TrainedPipeline> {
    cfg.validate()?;
    let k = split.labeled.class_count;
    let uses_som = model_type.features() == FeatureSet::SpectraAndSom;
    let som_art = if uses_som {
        Some(som.ok_or_else(|| {
            Error::Config(format!("{} needs SOM artifacts", model_type.name()))
        })?)
    } else {
        None
    };

    let standardizer = match model_type.mode() {
        Mode::Supervised => fit_standardizer(&split.labeled, |_| true)?,
        Mode::SemiSupervised => {
            let mut samples = split.labeled.samples.clone();
            samples.extend(split.unlabeled.samples.iter().cloned());
            fit_standardizer(&Dataset::new(samples, k)?, |_| true)?
        }
    };

    let labeled_spectra: Vec<Spectrum> =
        split.labeled.samples.iter().map(|(s, _)| s.clone()).collect();
    let targets: Vec<usize> = split
        .labeled
        .samples
        .iter()
        .map(|(_, l)| match l {
            Label::Inlier(c) => *c,
            Label::Outlier => k,
            Label::Unlabeled => k,
        })
        .collect();
    if split
        .labeled
        .samples
        .iter()
        .any(|(_, l)| matches!(l, Label::Unlabeled))
    {
        return Err(Error::Config("labeled partition contains unlabeled samples".into()));
    }
    let featurize = |a: &SomArtifacts, spectra: &[Spectrum]| {
        som_features_batch(&a.grid, &a.stats, &a.layer, &raw_tensor(spectra), a.angle_weight)
    };
    let labeled_set = LabeledSet {
        spec: standardized_tensor(&standardizer, &labeled_spectra)?,
        som: som_art.map(|a| featurize(a, &labeled_spectra)).transpose()?,
        targets,
    };

    let unlabeled_set = match model_type.mode() {
        Mode::Supervised => None,
        Mode::SemiSupervised => {
            let spectra: Vec<Spectrum> =
                split.unlabeled.samples.iter().map(|(s, _)| s.clone()).collect();
            if spectra.is_empty() {
                return Err(Error::EmptyInput("unlabeled pool".into()));
            }
            Some(UnlabeledSet {
                spec: standardized_tensor(&standardizer, &spectra)?,
                som: som_art.map(|a| featurize(a, &spectra)).transpose()?,
            })
        }
    };

    let epochs = match model_type.mode() {
        Mode::Supervised => cfg.sup_epochs,
        Mode::SemiSupervised => cfg.semi_epochs,
    };
    let mut gan_cfg = GanConfig::defaults(
        model_type.mode(),
        model_type.features(),
        epochs,
        seed::derive(cfg.master_seed, &[model_type.seed_tag(), trial]),
    );
    gan_cfg.batch_size = cfg.batch_size;
    gan_cfg.sizes = cfg.sizes;

    let featurizer = som_art.map(|a| SomFeaturizer {
        grid: &a.grid,
        stats: &a.stats,
        layer: &a.layer,
        angle_weight: a.angle_weight,
        standardizer: &standardizer,
    });
    let model = train_gan(
        &gan_cfg,
        k,
        &labeled_set,
        unlabeled_set.as_ref(),
        featurizer.as_ref(),
    )?;
    Ok(TrainedPipeline {
        model,
        standardizer,
        som: som_art.cloned(),
    })
}

/// One model's test-set curves for one trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialResult {
    pub model: ModelType,
    pub trial: u64,
    pub roc: RocCurve,
    pub reliability: ReliabilityCurve,
}

/// Score the test set and build both curves.
pub fn evaluate_model(
    pipe: &mut TrainedPipeline,
    test: &Dataset,
) -> Result<(RocCurve, ReliabilityCurve)> {
    let spectra: Vec<Spectrum> = test.samples.iter().map(|(s, _)| s.clone()).collect();
    let (scores, classes) = pipe.score_spectra(&spectra)?;
    let mut inl_scores = Vec::new();
    let mut out_scores = Vec::new();
    let mut predicted = Vec::new();
    let mut truth = Vec::new();
    for (i, (_, l)) in test.samples.iter().enumerate() {
        match l {
            Label::Inlier(c) => {
                inl_scores.push(scores[i]);
                predicted.push(classes[i]);
                truth.push(*c);
            }
            Label::Outlier => out_scores.push(scores[i]),
            Label::Unlabeled => {
                return Err(Error::Config("test set contains unlabeled samples".into()))
            }
        }
    }
    let curve = roc(&inl_scores, &out_scores)?;
    let thresholds: Vec<f64> = curve.points.iter().map(|p| p.threshold).collect();
    let rel = reliability_curve(&inl_scores, &predicted, &truth, &thresholds)?;
    Ok((curve, rel))
}

/// Run every requested model type on one trial's split, sharing the SOM
/// stack between the spectra+SOM types.
pub fn run_trial(
    cfg: &ExperimentConfig,
    model_types: &[ModelType],
    trial: u64,
) -> Result<Vec<TrialResult>> {
    cfg.validate()?;
    if model_types.is_empty() {
        return Err(Error::Config("no model types requested".into()));
    }
    let split = make_split(&cfg.scene, &cfg.counts, cfg.master_seed, trial)?;
    let som = if model_types
        .iter()
        .any(|m| m.features() == FeatureSet::SpectraAndSom)
    {
        Some(build_som_artifacts(cfg, &split, trial)?)
    } else {
        None
    };
    let mut results = Vec::with_capacity(model_types.len());
    for &mt in model_types {
        let mut pipe = train_model(cfg, &split, som.as_ref(), mt, trial)?;
        let (roc, reliability) = evaluate_model(&mut pipe, &split.test)?;
        results.push(TrialResult {
            model: mt,
            trial,
            roc,
            reliability,
        });
    }
    Ok(results)
}

/// All trials' curves plus the per-model cross-trial summaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub trials: Vec<TrialResult>,
    pub summaries: Vec<(ModelType, TrialSummary)>,
}

/// Run the full experiment, trials in parallel. Needs `trials >= 2` so the
/// summaries' confidence intervals are defined.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    model_types: &[ModelType],
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    if cfg.trials < 2 {
        return Err(Error::Config(format!(
            "experiment summaries need >= 2 trials, got {}",
            cfg.trials
        )));
    }
    let per_trial: Vec<Vec<TrialResult>> = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|t| run_trial(cfg, model_types, t))
        .collect::<Result<_>>()?;
    let trials: Vec<TrialResult> = per_trial.into_iter().flatten().collect();
    let grid = default_fa_grid();
    let mut summaries = Vec::with_capacity(model_types.len());
    for &mt in model_types {
        let curves: Vec<(RocCurve, ReliabilityCurve)> = trials
            .iter()
            .filter(|r| r.model == mt)
            .map(|r| (r.roc.clone(), r.reliability.clone()))
            .collect();
        summaries.push((mt, summarize_trials(&curves, &grid, 0.95)?));
    }
    Ok(ExperimentOutcome { trials, summaries })
}

//! Semi-supervised GAN classifier with an extra outlier class.
//!
//! The discriminator outputs `K + 1` logits: `K` material classes plus one
//! class shared by generated samples and labeled outliers. It reads spectra
//! through a spectral path and, in the dual-feature variants, node
//! memberships through a second path; the two paths concatenate into the
//! feature vector that feeds the logit head and the feature-matching loss.
//!
//! Losses:
//! * supervised: cross-entropy over the first `K` logits for labeled
//!   inliers, full `K + 1` cross-entropy against the outlier class for
//!   labeled outliers;
//! * unsupervised (semi-supervised mode): unlabeled reals push down the
//!   outlier probability, generated samples push it up;
//! * generator: feature matching between mean real and mean fake features.
//!
//! The generator trains only on feature matching; gradients it receives
//! flow through the discriminator's spectral path alone. Fake samples are
//! generated in standardized space, and their node memberships are computed
//! by unstandardizing and running the map pipeline with no gradient.

use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::membership::{som_features_batch, SigmoidLayer};
use crate::nn::{
    grads_of, params_of, softmax, uniform_noise, AdamConfig, AdamState, BatchNorm, Dense, Layer,
    LeakyRelu, Stack, Tensor, WnDense, LEAKY_SLOPE,
};
use crate::seed;
use crate::som::{NodeStats, SomGrid};
use ndarray::{concatenate, s, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

/// Floor for probabilities inside logs in the unsupervised loss.
const LOG_FLOOR: f64 = 1e-12;

/// Training regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Labeled data only; no generator, no unsupervised loss.
    Supervised,
    /// Adds unlabeled data, the generator, and the unsupervised loss.
    SemiSupervised,
}

/// Discriminator input features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSet {
    SpectraOnly,
    SpectraAndSom,
}

/// Layer widths. Defaults are the sizes used throughout; tests shrink them.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSizes {
    pub gen_hidden: usize,
    pub spec_hidden1: usize,
    pub spec_hidden2: usize,
    pub som_hidden1: usize,
    pub som_hidden2: usize,
}

impl Default for NetSizes {
    fn default() -> Self {
        NetSizes {
            gen_hidden: 256,
            spec_hidden1: 256,
            spec_hidden2: 128,
            som_hidden1: 128,
            som_hidden2: 128,
        }
    }
}

/// GAN training settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GanConfig {
    pub mode: Mode,
    pub features: FeatureSet,
    pub epochs: usize,
    pub batch_size: usize,
    pub noise_dim: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub sizes: NetSizes,
    pub seed: u64,
}

impl GanConfig {
    pub fn defaults(mode: Mode, features: FeatureSet, epochs: usize, seed: u64) -> Self {
        GanConfig {
            mode,
            features,
            epochs,
            batch_size: 64,
            noise_dim: 50,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            sizes: NetSizes::default(),
            seed,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("gan epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if self.noise_dim == 0 {
            return Err(Error::Config("noise dim must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Generator: noise in `[0, 1)` to standardized spectra.
pub struct Generator {
    net: Stack,
    pub noise_dim: usize,
}

impl Generator {
    pub fn new(rng: &mut impl rand::Rng, noise_dim: usize, bands: usize, sizes: &NetSizes) -> Self {
        let h = sizes.gen_hidden;
        Generator {
            net: Stack::new(vec![
                Box::new(Dense::new(rng, noise_dim, h)),
                Box::new(BatchNorm::new(h)),
                Box::new(LeakyRelu::new(LEAKY_SLOPE)),
                Box::new(Dense::new(rng, h, h)),
                Box::new(BatchNorm::new(h)),
                Box::new(LeakyRelu::new(LEAKY_SLOPE)),
                Box::new(WnDense::new(rng, h, bands)),
            ]),
            noise_dim,
        }
    }

    pub fn forward(&mut self, z: &Tensor, train: bool) -> Tensor {
        self.net.forward(z, train)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        self.net.backward(grad_out)
    }

    /// Draw `n` samples in standardized space.
    pub fn sample(&mut self, rng: &mut impl rand::Rng, n: usize, train: bool) -> Tensor {
        let z = uniform_noise(rng, n, self.noise_dim);
        self.forward(&z, train)
    }
}

/// Discriminator with a spectral path, an optional membership path, and a
/// weight-normalized logit head over the concatenated features.
pub struct Discriminator {
    spec_path: Stack,
    som_path: Option<Stack>,
    head: WnDense,
    spec_feats: usize,
    som_feats: usize,
    pub k: usize,
    cache_features: Option<Tensor>,
}

impl Discriminator {
    pub fn new(
        rng: &mut impl rand::Rng,
        bands: usize,
        som_dim: Option<usize>,
        k: usize,
        sizes: &NetSizes,
    ) -> Self {
        let spec_path = Stack::new(vec![
            Box::new(WnDense::new(rng, bands, sizes.spec_hidden1)),
            Box::new(LeakyRelu::new(LEAKY_SLOPE)),
            Box::new(WnDense::new(rng, sizes.spec_hidden1, sizes.spec_hidden2)),
            Box::new(LeakyRelu::new(LEAKY_SLOPE)),
        ]);
        let som_path = som_dim.map(|d| {
            Stack::new(vec![
                Box::new(WnDense::new(rng, d, sizes.som_hidden1)) as Box<dyn Layer>,
                Box::new(LeakyRelu::new(LEAKY_SLOPE)),
                Box::new(WnDense::new(rng, sizes.som_hidden1, sizes.som_hidden2)),
                Box::new(LeakyRelu::new(LEAKY_SLOPE)),
            ])
        });
        let som_feats = if som_path.is_some() { sizes.som_hidden2 } else { 0 };
        let feats = sizes.spec_hidden2 + som_feats;
        Discriminator {
            spec_path,
            som_path,
            head: WnDense::new(rng, feats, k + 1),
            spec_feats: sizes.spec_hidden2,
            som_feats,
            k,
            cache_features: None,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.spec_feats + self.som_feats
    }

    /// Forward both paths; returns `(logits, features)` where `features` is
    /// the concatenated pre-head vector.
    pub fn forward(
        &mut self,
        spec: &Tensor,
        som: Option<&Tensor>,
        train: bool,
    ) -> Result<(Tensor, Tensor)> {
        let spec_out = self.spec_path.forward(spec, train);
        let features = match (&mut self.som_path, som) {
            (Some(path), Some(x)) => {
                let som_out = path.forward(x, train);
                concatenate(Axis(1), &[spec_out.view(), som_out.view()])
                    .expect("matching batch sizes")
            }
            (None, None) => spec_out,
            (Some(_), None) => {
                return Err(Error::Config(
                    "discriminator expects membership features".into(),
                ))
            }
            (None, Some(_)) => {
                return Err(Error::Config(
                    "discriminator does not take membership features".into(),
                ))
            }
        };
        let logits = self.head.forward(&features, train);
        self.cache_features = Some(features.clone());
        Ok((logits, features))
    }

    /// Backward from logit and/or feature gradients; returns the gradient
    /// with respect to the spectral input (membership-path input gradients
    /// are dropped, nothing upstream trains on them).
    pub fn backward(
        &mut self,
        grad_logits: Option<&Tensor>,
        grad_features: Option<&Tensor>,
    ) -> Tensor {
        let features = self
            .cache_features
            .as_ref()
            .expect("backward before forward");
        let mut g_feat = match grad_logits {
            Some(gl) => self.head.backward(gl),
            None => Tensor::zeros(features.raw_dim()),
        };
        if let Some(gf) = grad_features {
            g_feat += gf;
        }
        match &mut self.som_path {
            Some(path) => {
                let g_spec = g_feat.slice(s![.., ..self.spec_feats]).to_owned();
                let g_som = g_feat.slice(s![.., self.spec_feats..]).to_owned();
                let _ = path.backward(&g_som);
                self.spec_path.backward(&g_spec)
            }
            None => self.spec_path.backward(&g_feat),
        }
    }

    fn for_each_part(&self, mut f: impl FnMut(&dyn Layer)) {
        f(&self.spec_path);
        if let Some(p) = &self.som_path {
            f(p);
        }
        f(&self.head);
    }

    fn for_each_part_mut(&mut self, mut f: impl FnMut(&mut dyn Layer)) {
        f(&mut self.spec_path);
        if let Some(p) = &mut self.som_path {
            f(p);
        }
        f(&mut self.head);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_part(|l| n += l.param_count());
        n
    }

    pub fn state_count(&self) -> usize {
        let mut n = 0;
        self.for_each_part(|l| n += l.state_count());
        n
    }

    pub fn store_params(&self, dst: &mut [f64]) {
        let mut at = 0;
        self.for_each_part(|l| {
            l.store_params(&mut dst[at..at + l.param_count()]);
            at += l.param_count();
        });
    }

    pub fn load_params(&mut self, src: &[f64]) {
        let mut at = 0;
        self.for_each_part_mut(|l| {
            l.load_params(&src[at..at + l.param_count()]);
            at += l.param_count();
        });
    }

    pub fn store_grads(&self, dst: &mut [f64]) {
        let mut at = 0;
        self.for_each_part(|l| {
            l.store_grads(&mut dst[at..at + l.param_count()]);
            at += l.param_count();
        });
    }

    pub fn zero_grads(&mut self) {
        self.for_each_part_mut(|l| l.zero_grads());
    }

    pub fn store_state(&self, dst: &mut [f64]) {
        let mut at = 0;
        self.for_each_part(|l| {
            l.store_state(&mut dst[at..at + l.state_count()]);
            at += l.state_count();
        });
    }

    pub fn load_state(&mut self, src: &[f64]) {
        let mut at = 0;
        self.for_each_part_mut(|l| {
            l.load_state(&src[at..at + l.state_count()]);
            at += l.state_count();
        });
    }
}

/// Supervised loss: labeled inliers use cross-entropy restricted to the
/// first `K` logits (their gradient on the outlier logit is zero); labeled
/// outliers (`target == K`) use full `K + 1` cross-entropy. Mean over the
/// batch; returns the logit gradient.
pub fn supervised_loss(logits: &Tensor, targets: &[usize], k: usize) -> Result<(f64, Tensor)> {
    let (n, c) = logits.dim();
    if c != k + 1 {
        return Err(Error::dimension("supervised_loss logits", k + 1, c));
    }
    if targets.len() != n {
        return Err(Error::dimension("supervised_loss targets", n, targets.len()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t > k) {
        return Err(Error::dimension("supervised_loss class index", k, bad));
    }
    let mut loss = 0.0;
    let mut grad = Tensor::zeros((n, c));
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let cols = if t == k { c } else { k };
        let max = row
            .iter()
            .take(cols)
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..cols {
            sum += (row[j] - max).exp();
        }
        let lse = sum.ln() + max;
        loss += lse - row[t];
        for j in 0..cols {
            grad[[i, j]] = (row[j] - lse).exp();
        }
        grad[[i, t]] -= 1.0;
    }
    loss /= n as f64;
    grad /= n as f64;
    Ok((loss, grad))
}

/// Unsupervised real-data loss: `-mean log(1 - p_outlier)`, outlier being
/// the last logit. The log argument is floored at 1e-12.
pub fn unsupervised_real_loss(logits: &Tensor) -> (f64, Tensor) {
    let (n, c) = logits.dim();
    let o = c - 1;
    let p = softmax(logits);
    let mut loss = 0.0;
    let mut grad = Tensor::zeros((n, c));
    for i in 0..n {
        let po = p[[i, o]];
        let s = (1.0 - po).max(LOG_FLOOR);
        loss -= s.ln();
        // d(-log(1 - p_o))/dz_k = p_o (delta_ko - p_k) / (1 - p_o)
        for j in 0..c {
            let delta = if j == o { 1.0 } else { 0.0 };
            grad[[i, j]] = po * (delta - p[[i, j]]) / s / n as f64;
        }
    }
    (loss / n as f64, grad)
}

/// Unsupervised fake-data loss: `-mean log p_outlier` on generated samples.
pub fn unsupervised_fake_loss(logits: &Tensor) -> (f64, Tensor) {
    let (n, c) = logits.dim();
    let o = c - 1;
    let p = softmax(logits);
    let mut loss = 0.0;
    let mut grad = p.clone();
    for i in 0..n {
        loss -= p[[i, o]].max(LOG_FLOOR).ln();
        grad[[i, o]] -= 1.0;
    }
    grad /= n as f64;
    (loss / n as f64, grad)
}

/// Feature-matching loss `||mean f_real - mean f_fake||^2` with the gradient
/// with respect to each fake feature row.
pub fn feature_matching_loss(f_real: &Tensor, f_fake: &Tensor) -> Result<(f64, Tensor)> {
    if f_real.ncols() != f_fake.ncols() {
        return Err(Error::dimension(
            "feature_matching dims",
            f_real.ncols(),
            f_fake.ncols(),
        ));
    }
    if f_real.nrows() == 0 || f_fake.nrows() == 0 {
        return Err(Error::EmptyInput("feature_matching batch".into()));
    }
    let m_real = f_real.mean_axis(Axis(0)).unwrap();
    let m_fake = f_fake.mean_axis(Axis(0)).unwrap();
    let diff = &m_fake - &m_real;
    let loss = diff.dot(&diff);
    let n_fake = f_fake.nrows() as f64;
    let row = diff.mapv(|v| 2.0 * v / n_fake);
    let grad = Tensor::from_shape_fn(f_fake.raw_dim(), |(_, j)| row[j]);
    Ok((loss, grad))
}

/// Everything needed to compute node memberships for generated samples:
/// the trained map artifacts plus the standardizer that maps generated
/// spectra back to reflectance.
pub struct SomFeaturizer<'a> {
    pub grid: &'a SomGrid,
    pub stats: &'a NodeStats,
    pub layer: &'a SigmoidLayer,
    pub angle_weight: f64,
    pub standardizer: &'a Standardizer,
}

impl SomFeaturizer<'_> {
    /// Memberships for a batch of standardized spectra.
    pub fn features_for_standardized(&self, spec_std: &Tensor) -> Result<Tensor> {
        let mut raw = spec_std.clone();
        for mut row in raw.axis_iter_mut(Axis(0)) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.standardizer.std[j] + self.standardizer.mean[j];
            }
        }
        som_features_batch(self.grid, self.stats, self.layer, &raw, self.angle_weight)
    }
}

/// Labeled training inputs, already standardized/featurized. `targets` use
/// `0..k` for inlier classes and `k` for labeled outliers.
pub struct LabeledSet {
    pub spec: Tensor,
    pub som: Option<Tensor>,
    pub targets: Vec<usize>,
}

/// Unlabeled training inputs.
pub struct UnlabeledSet {
    pub spec: Tensor,
    pub som: Option<Tensor>,
}

/// Per-epoch mean training losses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub supervised: f64,
    pub unsupervised_real: f64,
    pub unsupervised_fake: f64,
    pub feature_matching: f64,
}

/// A trained classifier, plus the generator when one was trained.
pub struct TrainedGan {
    pub disc: Discriminator,
    pub gen: Option<Generator>,
    pub cfg: GanConfig,
    pub bands: usize,
    pub som_dim: Option<usize>,
    pub history: Vec<EpochStats>,
}

fn ensure_finite(epoch: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            epoch,
            what: format!("{what} loss is {v}"),
        })
    }
}

/// Train a classifier.
///
/// Each step runs one discriminator update on a labeled batch resampled
/// with replacement (plus, in semi-supervised mode, one unlabeled slice and
/// one generated batch), then one generator update on feature matching.
/// Supervised mode trains on labeled batches alone. Steps per epoch cover
/// the driving pool (unlabeled when present, labeled otherwise) once.
pub fn train_gan(
    cfg: &GanConfig,
    k: usize,
    labeled: &LabeledSet,
    unlabeled: Option<&UnlabeledSet>,
    fake_som: Option<&SomFeaturizer>,
) -> Result<TrainedGan> {
    cfg.validate()?;
    if k < 1 {
        return Err(Error::Config("need at least one inlier class".into()));
    }
    let n_lab = labeled.spec.nrows();
    if n_lab == 0 {
        return Err(Error::EmptyInput("labeled training set".into()));
    }
    if labeled.targets.len() != n_lab {
        return Err(Error::dimension("labeled targets", n_lab, labeled.targets.len()));
    }
    if let Some(&bad) = labeled.targets.iter().find(|&&t| t > k) {
        return Err(Error::dimension("labeled class index", k, bad));
    }
    let bands = labeled.spec.ncols();

    let dual = cfg.features == FeatureSet::SpectraAndSom;
    let som_dim = if dual {
        Some(
            labeled
                .som
                .as_ref()
                .ok_or_else(|| Error::Config("dual-feature training needs memberships".into()))?
                .ncols(),
        )
    } else {
        None
    };
    let semi = cfg.mode == Mode::SemiSupervised;
    let unlab = if semi {
        let u = unlabeled
            .ok_or_else(|| Error::Config("semi-supervised training needs unlabeled data".into()))?;
        if u.spec.nrows() == 0 {
            return Err(Error::EmptyInput("unlabeled training set".into()));
        }
        if u.spec.ncols() != bands {
            return Err(Error::dimension("unlabeled bands", bands, u.spec.ncols()));
        }
        if dual && u.som.is_none() {
            return Err(Error::Config("dual-feature training needs unlabeled memberships".into()));
        }
        Some(u)
    } else {
        None
    };
    if semi && dual && fake_som.is_none() {
        return Err(Error::Config(
            "dual-feature semi-supervised training needs a som featurizer for fakes".into(),
        ));
    }

    let mut init_rng = seed::stream(cfg.seed, &[seed::stage::GAN_INIT]);
    let mut disc = Discriminator::new(&mut init_rng, bands, som_dim, k, &cfg.sizes);
    let mut gen = semi.then(|| Generator::new(&mut init_rng, cfg.noise_dim, bands, &cfg.sizes));

    let mut adam_d = AdamState::new(disc.param_count(), cfg.adam());
    let mut adam_g = gen
        .as_ref()
        .map(|g| AdamState::new(g.net.param_count(), cfg.adam()));

    let mut rng = seed::stream(cfg.seed, &[seed::stage::GAN_TRAIN]);
    let batch = cfg.batch_size;
    let mut history = Vec::with_capacity(cfg.epochs);

    let mut unlab_order: Vec<usize> = unlab
        .map(|u| (0..u.spec.nrows()).collect())
        .unwrap_or_default();

    for epoch in 0..cfg.epochs {
        let steps = match unlab {
            Some(u) => {
                use rand::seq::SliceRandom;
                unlab_order.shuffle(&mut rng);
                u.spec.nrows().div_ceil(batch)
            }
            None => n_lab.div_ceil(batch),
        };
        let mut ep = EpochStats {
            supervised: 0.0,
            unsupervised_real: 0.0,
            unsupervised_fake: 0.0,
            feature_matching: 0.0,
        };

        for step in 0..steps {
            // discriminator step
            disc.zero_grads();

            let picks: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n_lab)).collect();
            let lab_spec = select_rows(&labeled.spec, &picks);
            let lab_som = labeled.som.as_ref().map(|m| select_rows(m, &picks));
            let lab_targets: Vec<usize> = picks.iter().map(|&i| labeled.targets[i]).collect();

            let (logits, _) = disc.forward(&lab_spec, lab_som.as_ref(), true)?;
            let (l_sup, g_logits) = supervised_loss(&logits, &lab_targets, k)?;
            ensure_finite(epoch, "supervised", l_sup)?;
            disc.backward(Some(&g_logits), None);
            ep.supervised += l_sup;

            let mut unlab_chunk: Option<(Tensor, Option<Tensor>)> = None;
            if let Some(u) = unlab {
                let lo = step * batch;
                let hi = ((step + 1) * batch).min(u.spec.nrows());
                let idx = &unlab_order[lo..hi];
                let spec_chunk = select_rows(&u.spec, idx);
                let som_chunk = u.som.as_ref().map(|m| select_rows(m, idx));

                let (logits, _) = disc.forward(&spec_chunk, som_chunk.as_ref(), true)?;
                let (l_real, g) = unsupervised_real_loss(&logits);
                ensure_finite(epoch, "unsupervised real", l_real)?;
                disc.backward(Some(&g), None);
                ep.unsupervised_real += l_real;

                let g_net = gen.as_mut().expect("semi mode has a generator");
                let fake_spec = g_net.sample(&mut rng, batch, true);
                let fake_som = match fake_som {
                    Some(f) if dual => Some(f.features_for_standardized(&fake_spec)?),
                    _ => None,
                };
                let (logits, _) = disc.forward(&fake_spec, fake_som.as_ref(), true)?;
                let (l_fake, g) = unsupervised_fake_loss(&logits);
                ensure_finite(epoch, "unsupervised fake", l_fake)?;
                disc.backward(Some(&g), None);
                ep.unsupervised_fake += l_fake;

                unlab_chunk = Some((spec_chunk, som_chunk));
            }

            let mut d_params = vec![0.0; disc.param_count()];
            disc.store_params(&mut d_params);
            let mut d_grads = vec![0.0; disc.param_count()];
            disc.store_grads(&mut d_grads);
            adam_d.step(&mut d_params, &d_grads);
            disc.load_params(&d_params);

            // generator step: feature matching only; discriminator gradients
            // accumulated here are discarded at the next step's zero_grads
            if let (Some(g_net), Some((real_spec, real_som))) = (gen.as_mut(), unlab_chunk) {
                disc.zero_grads();
                g_net.net.zero_grads();

                let (_, f_real) = disc.forward(&real_spec, real_som.as_ref(), true)?;
                let fake_spec = g_net.sample(&mut rng, batch, true);
                let fake_som = match fake_som {
                    Some(f) if dual => Some(f.features_for_standardized(&fake_spec)?),
                    _ => None,
                };
                let (_, f_fake) = disc.forward(&fake_spec, fake_som.as_ref(), true)?;
                let (l_fm, g_feat) = feature_matching_loss(&f_real, &f_fake)?;
                ensure_finite(epoch, "feature matching", l_fm)?;
                let g_spec_in = disc.backward(None, Some(&g_feat));
                g_net.backward(&g_spec_in);
                adam_g
                    .as_mut()
                    .expect("semi mode has generator state")
                    .step_layer(&mut g_net.net);
                ep.feature_matching += l_fm;
            }
        }

        let sf = steps as f64;
        ep.supervised /= sf;
        ep.unsupervised_real /= sf;
        ep.unsupervised_fake /= sf;
        ep.feature_matching /= sf;
        history.push(ep);
    }

    Ok(TrainedGan {
        disc,
        gen,
        cfg: cfg.clone(),
        bands,
        som_dim,
        history,
    })
}

fn select_rows(m: &Tensor, idx: &[usize]) -> Tensor {
    let mut out = Tensor::zeros((idx.len(), m.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&m.row(i));
    }
    out
}

impl TrainedGan {
    /// Full `K + 1` logits for a batch (evaluation mode).
    pub fn logits(&mut self, spec: &Tensor, som: Option<&Tensor>) -> Result<Tensor> {
        let (logits, _) = self.disc.forward(spec, som, false)?;
        Ok(logits)
    }

    /// Outlier probability `p(K+1 | x)` per sample under the full softmax.
    pub fn outlier_scores(&mut self, spec: &Tensor, som: Option<&Tensor>) -> Result<Vec<f64>> {
        let logits = self.logits(spec, som)?;
        let p = softmax(&logits);
        let o = self.disc.k;
        Ok((0..p.nrows()).map(|i| p[[i, o]]).collect())
    }

    /// Inlier class by argmax over the first `K` logits (smallest index on
    /// ties).
    pub fn classify(&mut self, spec: &Tensor, som: Option<&Tensor>) -> Result<Vec<usize>> {
        let logits = self.logits(spec, som)?;
        Ok(logits
            .axis_iter(Axis(0))
            .map(|row| {
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for j in 0..self.disc.k {
                    if row[j] > best_v {
                        best_v = row[j];
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

/// Checkpoint metadata stored beside the flat parameter file.
#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    format_version: u32,
    mode: Mode,
    features: FeatureSet,
    k: usize,
    bands: usize,
    som_dim: Option<usize>,
    noise_dim: usize,
    sizes: NetSizes,
    disc_params: usize,
    disc_state: usize,
    gen_params: usize,
    gen_state: usize,
}

const MODEL_FORMAT_VERSION: u32 = 1;

/// Save a model as `model.json` (architecture) plus `model.bin` (little-
/// endian f64 parameters and layer state).
pub fn save_model(dir: impl AsRef<Path>, model: &TrainedGan) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let (gp, gs) = model
        .gen
        .as_ref()
        .map(|g| (g.net.param_count(), g.net.state_count()))
        .unwrap_or((0, 0));
    let meta = ModelMeta {
        format_version: MODEL_FORMAT_VERSION,
        mode: model.cfg.mode,
        features: model.cfg.features,
        k: model.disc.k,
        bands: model.bands,
        som_dim: model.som_dim,
        noise_dim: model.cfg.noise_dim,
        sizes: model.cfg.sizes,
        disc_params: model.disc.param_count(),
        disc_state: model.disc.state_count(),
        gen_params: gp,
        gen_state: gs,
    };
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Numerical(format!("model metadata encoding failed: {e}")))?;
    std::fs::write(dir.join("model.json"), json)?;

    let mut flat = Vec::with_capacity(meta.disc_params + meta.disc_state + gp + gs);
    let mut buf = vec![0.0; meta.disc_params];
    model.disc.store_params(&mut buf);
    flat.extend_from_slice(&buf);
    let mut buf = vec![0.0; meta.disc_state];
    model.disc.store_state(&mut buf);
    flat.extend_from_slice(&buf);
    if let Some(g) = &model.gen {
        let mut buf = vec![0.0; gp];
        g.net.store_params(&mut buf);
        flat.extend_from_slice(&buf);
        let mut buf = vec![0.0; gs];
        g.net.store_state(&mut buf);
        flat.extend_from_slice(&buf);
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join("model.bin"))?);
    for v in flat {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Load a model checkpoint written by [`save_model`].
pub fn load_model(dir: impl AsRef<Path>) -> Result<TrainedGan> {
    let dir = dir.as_ref();
    let json = std::fs::read_to_string(dir.join("model.json"))?;
    let meta: ModelMeta = serde_json::from_str(&json).map_err(|e| Error::Parse {
        row: 0,
        msg: format!("model.json: {e}"),
    })?;
    if meta.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported model format version {} (expected {})",
            meta.format_version, MODEL_FORMAT_VERSION
        )));
    }

    let mut bytes = Vec::new();
    std::fs::File::open(dir.join("model.bin"))?.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Parse {
            row: 0,
            msg: "model.bin length is not a multiple of 8".into(),
        });
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let expected = meta.disc_params + meta.disc_state + meta.gen_params + meta.gen_state;
    if flat.len() != expected {
        return Err(Error::dimension("model.bin values", expected, flat.len()));
    }

    let mut rng = seed::stream(0, &[seed::stage::GAN_INIT]);
    let mut disc = Discriminator::new(&mut rng, meta.bands, meta.som_dim, meta.k, &meta.sizes);
    if disc.param_count() != meta.disc_params || disc.state_count() != meta.disc_state {
        return Err(Error::dimension(
            "discriminator size from model.json",
            meta.disc_params,
            disc.param_count(),
        ));
    }
    let mut at = 0;
    disc.load_params(&flat[at..at + meta.disc_params]);
    at += meta.disc_params;
    disc.load_state(&flat[at..at + meta.disc_state]);
    at += meta.disc_state;

    let gen = if meta.gen_params > 0 {
        let mut g = Generator::new(&mut rng, meta.noise_dim, meta.bands, &meta.sizes);
        if g.net.param_count() != meta.gen_params || g.net.state_count() != meta.gen_state {
            return Err(Error::dimension(
                "generator size from model.json",
                meta.gen_params,
                g.net.param_count(),
            ));
        }
        g.net.load_params(&flat[at..at + meta.gen_params]);
        at += meta.gen_params;
        g.net.load_state(&flat[at..at + meta.gen_state]);
        Some(g)
    } else {
        None
    };

    let mut cfg = GanConfig::defaults(meta.mode, meta.features, 1, 0);
    cfg.noise_dim = meta.noise_dim;
    cfg.sizes = meta.sizes;
    Ok(TrainedGan {
        disc,
        gen,
        cfg,
        bands: meta.bands,
        som_dim: meta.som_dim,
        history: Vec::new(),
    })
}

/// Named finite-difference checks over every layer type and loss, at full
/// f64 precision. Returns `(check name, max relative error)` pairs; all
/// should come in at or below 1e-5.
pub fn run_gradient_checks(seed: u64) -> Vec<(String, f64)> {
    use crate::nn::max_rel_fd_error;
    let h = 1e-5;
    let mut out = Vec::new();
    let mut rng = seed::stream(seed, &[seed::stage::GAN_INIT, 0xFD]);

    let half_sq = |y: &Tensor| 0.5 * y.iter().map(|v| v * v).sum::<f64>();

    // each trainable layer type alone, parameters against the half-square loss
    let singles: Vec<(&str, Box<dyn Layer>)> = vec![
        ("dense", Box::new(Dense::new(&mut rng, 5, 4))),
        ("weight-norm-dense", Box::new(WnDense::new(&mut rng, 5, 4))),
        ("batch-norm", Box::new(BatchNorm::new(5))),
    ];
    for (name, layer) in singles {
        let mut stack = Stack::new(vec![layer]);
        let x = uniform_noise(&mut rng, 6, 5);
        let _ = stack.forward(&x, true); // settle data-dependent init
        stack.zero_grads();
        let y = stack.forward(&x, true);
        let _ = stack.backward(&y.clone());
        let analytic = grads_of(&stack);
        let p0 = params_of(&stack);
        let err = max_rel_fd_error(
            &analytic,
            &p0,
            |p| {
                stack.load_params(p);
                half_sq(&stack.forward(&x, true))
            },
            h,
        );
        out.push((name.to_string(), err));
    }

    // leaky relu has no parameters; difference its input gradient instead
    {
        let mut relu = LeakyRelu::new(LEAKY_SLOPE);
        // keep inputs away from the kink, where one-sided differences lie
        let x = uniform_noise(&mut rng, 6, 5) * 2.0 - 1.0;
        let y = relu.forward(&x, true);
        let gx = relu.backward(&y.clone());
        let analytic: Vec<f64> = gx.iter().cloned().collect();
        let flat: Vec<f64> = x.iter().cloned().collect();
        let err = max_rel_fd_error(
            &analytic,
            &flat,
            |p| {
                let xi = Tensor::from_shape_vec((6, 5), p.to_vec()).unwrap();
                half_sq(&relu.forward(&xi, true))
            },
            h,
        );
        out.push(("leaky-relu-input".to_string(), err));
    }

    // sigmoid-membership objective wrt alpha and beta jointly
    {
        use crate::membership::objective_and_grads;
        let nodes = 6;
        let dists = uniform_noise(&mut rng, 9, nodes) * 8.0;
        let targets = uniform_noise(&mut rng, 9, nodes);
        let alpha: Vec<f64> = (0..nodes).map(|j| 0.4 + 0.2 * j as f64).collect();
        let beta: Vec<f64> = (0..nodes).map(|j| 2.0 + 0.7 * j as f64).collect();
        let (_, ga, gb) = objective_and_grads(&dists, &targets, &alpha, &beta);
        let analytic: Vec<f64> = ga.iter().chain(gb.iter()).cloned().collect();
        let p0: Vec<f64> = alpha.iter().chain(beta.iter()).cloned().collect();
        let err = max_rel_fd_error(
            &analytic,
            &p0,
            |p| objective_and_grads(&dists, &targets, &p[..nodes], &p[nodes..]).0,
            h,
        );
        out.push(("membership-objective".to_string(), err));
    }

    // composed stack: dense + batchnorm + leaky + weight norm
    let mut stack = Stack::new(vec![
        Box::new(Dense::new(&mut rng, 5, 8)),
        Box::new(BatchNorm::new(8)),
        Box::new(LeakyRelu::new(LEAKY_SLOPE)),
        Box::new(WnDense::new(&mut rng, 8, 3)),
    ]);
    let x = uniform_noise(&mut rng, 6, 5);
    let _ = stack.forward(&x, true);
    stack.zero_grads();
    let y = stack.forward(&x, true);
    let _ = stack.backward(&y.clone());
    let analytic = grads_of(&stack);
    let p0 = params_of(&stack);
    let err = max_rel_fd_error(
        &analytic,
        &p0,
        |p| {
            stack.load_params(p);
            half_sq(&stack.forward(&x, true))
        },
        h,
    );
    out.push(("layer-stack".to_string(), err));

    // supervised loss wrt logits
    let logits = uniform_noise(&mut rng, 6, 4) * 2.0;
    let targets = [0usize, 1, 2, 3, 3, 1];
    let (_, grad) = supervised_loss(&logits, &targets, 3).unwrap();
    let analytic: Vec<f64> = grad.iter().cloned().collect();
    let flat: Vec<f64> = logits.iter().cloned().collect();
    let err = max_rel_fd_error(
        &analytic,
        &flat,
        |p| {
            let l = Tensor::from_shape_vec((6, 4), p.to_vec()).unwrap();
            supervised_loss(&l, &targets, 3).unwrap().0
        },
        h,
    );
    out.push(("supervised-loss".to_string(), err));

    // unsupervised losses wrt logits
    let logits = uniform_noise(&mut rng, 5, 3) * 2.0;
    let (_, grad) = unsupervised_real_loss(&logits);
    let analytic: Vec<f64> = grad.iter().cloned().collect();
    let flat: Vec<f64> = logits.iter().cloned().collect();
    let err = max_rel_fd_error(
        &analytic,
        &flat,
        |p| unsupervised_real_loss(&Tensor::from_shape_vec((5, 3), p.to_vec()).unwrap()).0,
        h,
    );
    out.push(("unsupervised-real-loss".to_string(), err));

    let (_, grad) = unsupervised_fake_loss(&logits);
    let analytic: Vec<f64> = grad.iter().cloned().collect();
    let err = max_rel_fd_error(
        &analytic,
        &flat,
        |p| unsupervised_fake_loss(&Tensor::from_shape_vec((5, 3), p.to_vec()).unwrap()).0,
        h,
    );
    out.push(("unsupervised-fake-loss".to_string(), err));

    // feature matching wrt fake features
    let f_real = uniform_noise(&mut rng, 7, 5);
    let f_fake = uniform_noise(&mut rng, 4, 5);
    let (_, grad) = feature_matching_loss(&f_real, &f_fake).unwrap();
    let analytic: Vec<f64> = grad.iter().cloned().collect();
    let flat: Vec<f64> = f_fake.iter().cloned().collect();
    let err = max_rel_fd_error(
        &analytic,
        &flat,
        |p| {
            let f = Tensor::from_shape_vec((4, 5), p.to_vec()).unwrap();
            feature_matching_loss(&f_real, &f).unwrap().0
        },
        h,
    );
    out.push(("feature-matching-loss".to_string(), err));

    // dual-path discriminator end to end: supervised loss wrt all parameters
    let sizes = NetSizes {
        gen_hidden: 8,
        spec_hidden1: 8,
        spec_hidden2: 6,
        som_hidden1: 5,
        som_hidden2: 4,
    };
    let mut disc = Discriminator::new(&mut rng, 5, Some(4), 2, &sizes);
    let spec = uniform_noise(&mut rng, 6, 5);
    let som = uniform_noise(&mut rng, 6, 4);
    let targets = [0usize, 1, 2, 0, 1, 2];
    let _ = disc.forward(&spec, Some(&som), true).unwrap();
    disc.zero_grads();
    let (logits, _) = disc.forward(&spec, Some(&som), true).unwrap();
    let (_, g_logits) = supervised_loss(&logits, &targets, 2).unwrap();
    let _ = disc.backward(Some(&g_logits), None);
    let mut analytic = vec![0.0; disc.param_count()];
    disc.store_grads(&mut analytic);
    let mut p0 = vec![0.0; disc.param_count()];
    disc.store_params(&mut p0);
    let err = max_rel_fd_error(
        &analytic,
        &p0,
        |p| {
            disc.load_params(p);
            let (logits, _) = disc.forward(&spec, Some(&som), true).unwrap();
            supervised_loss(&logits, &targets, 2).unwrap().0
        },
        h,
    );
    out.push(("discriminator-end-to-end".to_string(), err));

    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::max_rel_fd_error;
    use approx::assert_relative_eq;

    const FD_H: f64 = 1e-5;
    const FD_TOL: f64 = 1e-6;

    fn rng(s: u64) -> rand_chacha::ChaCha8Rng {
        seed::stream(s, &[7])
    }

    fn tiny_sizes() -> NetSizes {
        NetSizes {
            gen_hidden: 10,
            spec_hidden1: 8,
            spec_hidden2: 6,
            som_hidden1: 5,
            som_hidden2: 4,
        }
    }

    #[test]
    fn supervised_loss_hand_values() {
        // uniform logits: inlier row costs ln K (outlier logit excluded),
        // labeled outlier row costs ln(K + 1)
        let logits = Tensor::zeros((1, 3));
        let (l, _) = supervised_loss(&logits, &[0], 2).unwrap();
        assert_relative_eq!(l, 2.0f64.ln(), max_relative = 1e-12);
        let (l, _) = supervised_loss(&logits, &[2], 2).unwrap();
        assert_relative_eq!(l, 3.0f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn supervised_loss_inlier_ignores_outlier_logit() {
        // inlier rows: bumping the outlier logit changes nothing and its
        // gradient entry stays zero
        let mut a = Tensor::zeros((1, 4));
        a[[0, 0]] = 1.0;
        let mut b = a.clone();
        b[[0, 3]] = 42.0;
        let (la, ga) = supervised_loss(&a, &[0], 3).unwrap();
        let (lb, gb) = supervised_loss(&b, &[0], 3).unwrap();
        assert_eq!(la, lb);
        assert_eq!(ga[[0, 3]], 0.0);
        assert_eq!(gb[[0, 3]], 0.0);
    }

    #[test]
    fn supervised_loss_gradient_fd() {
        let mut r = rng(1);
        let logits = uniform_noise(&mut r, 6, 4) * 3.0;
        let targets = [0usize, 1, 2, 3, 3, 0];
        let (_, grad) = supervised_loss(&logits, &targets, 3).unwrap();
        let analytic: Vec<f64> = grad.iter().cloned().collect();
        let flat: Vec<f64> = logits.iter().cloned().collect();
        let err = max_rel_fd_error(
            &analytic,
            &flat,
            |p| {
                let l = Tensor::from_shape_vec((6, 4), p.to_vec()).unwrap();
                supervised_loss(&l, &targets, 3).unwrap().0
            },
            FD_H,
        );
        assert!(err <= FD_TOL, "supervised grad error {err}");
    }

    #[test]
    fn supervised_loss_rejects_bad_inputs() {
        let logits = Tensor::zeros((2, 3));
        assert!(supervised_loss(&logits, &[0], 2).is_err());
        assert!(supervised_loss(&logits, &[0, 3], 2).is_err());
        assert!(supervised_loss(&logits, &[0, 1], 3).is_err());
    }

    #[test]
    fn unsupervised_real_hand_value_and_fd() {
        // uniform logits over C classes: p_o = 1/C, loss = -ln((C-1)/C)
        let logits = Tensor::zeros((2, 3));
        let (l, _) = unsupervised_real_loss(&logits);
        assert_relative_eq!(l, -(2.0f64 / 3.0).ln(), max_relative = 1e-12);

        let mut r = rng(2);
        let logits = uniform_noise(&mut r, 5, 4) * 3.0;
        let (_, grad) = unsupervised_real_loss(&logits);
        let analytic: Vec<f64> = grad.iter().cloned().collect();
        let flat: Vec<f64> = logits.iter().cloned().collect();
        let err = max_rel_fd_error(
            &analytic,
            &flat,
            |p| unsupervised_real_loss(&Tensor::from_shape_vec((5, 4), p.to_vec()).unwrap()).0,
            FD_H,
        );
        assert!(err <= FD_TOL, "unsup real grad error {err}");
    }

    #[test]
    fn unsupervised_fake_hand_value_and_fd() {
        let logits = Tensor::zeros((2, 3));
        let (l, _) = unsupervised_fake_loss(&logits);
        assert_relative_eq!(l, 3.0f64.ln(), max_relative = 1e-12);

        let mut r = rng(3);
        let logits = uniform_noise(&mut r, 5, 4) * 3.0;
        let (_, grad) = unsupervised_fake_loss(&logits);
        let analytic: Vec<f64> = grad.iter().cloned().collect();
        let flat: Vec<f64> = logits.iter().cloned().collect();
        let err = max_rel_fd_error(
            &analytic,
            &flat,
            |p| unsupervised_fake_loss(&Tensor::from_shape_vec((5, 4), p.to_vec()).unwrap()).0,
            FD_H,
        );
        assert!(err <= FD_TOL, "unsup fake grad error {err}");
    }

    #[test]
    fn unsupervised_losses_saturated_logits_stay_finite() {
        // a real sample scored as pure outlier drives 1 - p_o to 0; the
        // floored log keeps the loss finite
        let mut logits = Tensor::zeros((1, 3));
        logits[[0, 2]] = 200.0;
        let (l, g) = unsupervised_real_loss(&logits);
        assert!(l.is_finite());
        assert!(g.iter().all(|v| v.is_finite()));
        let mut logits = Tensor::zeros((1, 3));
        logits[[0, 0]] = 200.0;
        let (l, g) = unsupervised_fake_loss(&logits);
        assert!(l.is_finite());
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn feature_matching_values_and_fd() {
        // identical feature sets: zero loss, zero gradient
        let f = uniform_noise(&mut rng(4), 5, 3);
        let (l, g) = feature_matching_loss(&f, &f).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));

        // hand case: means differ by (1, -2): loss 5
        let f_real = Tensor::zeros((2, 2));
        let mut f_fake = Tensor::zeros((1, 2));
        f_fake[[0, 0]] = 1.0;
        f_fake[[0, 1]] = -2.0;
        let (l, g) = feature_matching_loss(&f_real, &f_fake).unwrap();
        assert_relative_eq!(l, 5.0);
        assert_relative_eq!(g[[0, 0]], 2.0);
        assert_relative_eq!(g[[0, 1]], -4.0);

        let mut r = rng(5);
        let f_real = uniform_noise(&mut r, 7, 4);
        let f_fake = uniform_noise(&mut r, 3, 4) * 2.0;
        let (_, grad) = feature_matching_loss(&f_real, &f_fake).unwrap();
        let analytic: Vec<f64> = grad.iter().cloned().collect();
        let flat: Vec<f64> = f_fake.iter().cloned().collect();
        let err = max_rel_fd_error(
            &analytic,
            &flat,
            |p| {
                let f = Tensor::from_shape_vec((3, 4), p.to_vec()).unwrap();
                feature_matching_loss(&f_real, &f).unwrap().0
            },
            FD_H,
        );
        assert!(err <= FD_TOL, "fm grad error {err}");
    }

    #[test]
    fn all_canned_gradient_checks_pass() {
        // looser than FD_TOL: the canned suite draws its own data, and plain
        // central differencing bottoms out near 1e-6 on unlucky draws
        for (name, err) in run_gradient_checks(99) {
            assert!(err <= 1e-5, "{name}: max rel error {err}");
        }
    }

    #[test]
    fn discriminator_input_gradient_matches_fd_on_spectral_path() {
        // the exact path generator updates flow through: feature matching
        // loss back to the fake spectral input
        let mut r = rng(6);
        let sizes = tiny_sizes();
        let mut disc = Discriminator::new(&mut r, 4, Some(3), 2, &sizes);
        let spec = uniform_noise(&mut r, 5, 4);
        let som = uniform_noise(&mut r, 5, 3);
        let f_real = uniform_noise(&mut r, 6, sizes.spec_hidden2 + sizes.som_hidden2);
        let _ = disc.forward(&spec, Some(&som), true).unwrap();

        disc.zero_grads();
        let (_, f_fake) = disc.forward(&spec, Some(&som), true).unwrap();
        let (_, g_feat) = feature_matching_loss(&f_real, &f_fake).unwrap();
        let gx = disc.backward(None, Some(&g_feat));

        let analytic: Vec<f64> = gx.iter().cloned().collect();
        let flat: Vec<f64> = spec.iter().cloned().collect();
        let err = max_rel_fd_error(
            &analytic,
            &flat,
            |p| {
                let x = Tensor::from_shape_vec((5, 4), p.to_vec()).unwrap();
                let (_, f) = disc.forward(&x, Some(&som), true).unwrap();
                feature_matching_loss(&f_real, &f).unwrap().0
            },
            FD_H,
        );
        assert!(err <= FD_TOL, "spectral input grad error {err}");
    }

    #[test]
    fn discriminator_rejects_mismatched_feature_sets() {
        let mut r = rng(7);
        let sizes = tiny_sizes();
        let mut dual = Discriminator::new(&mut r, 4, Some(3), 2, &sizes);
        let mut single = Discriminator::new(&mut r, 4, None, 2, &sizes);
        let spec = uniform_noise(&mut r, 2, 4);
        let som = uniform_noise(&mut r, 2, 3);
        assert!(dual.forward(&spec, None, true).is_err());
        assert!(single.forward(&spec, Some(&som), true).is_err());
    }

    fn toy_labeled(r: &mut impl rand::Rng, n_per: usize) -> LabeledSet {
        // class 0 near (0.2, 0.8, 0.3); class 1 near (0.9, 0.2, 0.6);
        // labeled outliers near (0.5, 0.5, 3.0)
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let centers = [
            ([0.2, 0.8, 0.3], 0usize),
            ([0.9, 0.2, 0.6], 1),
            ([0.5, 0.5, 3.0], 2),
        ];
        for (c, t) in centers {
            for _ in 0..n_per {
                rows.push([
                    c[0] + 0.05 * r.random::<f64>(),
                    c[1] + 0.05 * r.random::<f64>(),
                    c[2] + 0.05 * r.random::<f64>(),
                ]);
                targets.push(t);
            }
        }
        let spec = Tensor::from_shape_fn((rows.len(), 3), |(i, j)| rows[i][j]);
        LabeledSet {
            spec,
            som: None,
            targets,
        }
    }

    #[test]
    fn supervised_training_learns_toy_classes() {
        let mut r = rng(8);
        let labeled = toy_labeled(&mut r, 12);
        let mut cfg = GanConfig::defaults(Mode::Supervised, FeatureSet::SpectraOnly, 120, 5);
        cfg.batch_size = 16;
        cfg.sizes = tiny_sizes();
        cfg.lr = 2e-3;
        let mut model = train_gan(&cfg, 2, &labeled, None, None).unwrap();
        assert!(model.gen.is_none(), "supervised mode trains no generator");

        let pred = model.classify(&labeled.spec, None).unwrap();
        let correct = pred
            .iter()
            .zip(&labeled.targets)
            .filter(|(p, t)| p == t || **t == 2)
            .count();
        // inlier rows classified right; labeled outliers score as outliers
        assert!(correct == pred.len(), "{pred:?}");
        let scores = model.outlier_scores(&labeled.spec, None).unwrap();
        let inlier_mean: f64 = scores[..24].iter().sum::<f64>() / 24.0;
        let outlier_mean: f64 = scores[24..].iter().sum::<f64>() / 12.0;
        assert!(
            outlier_mean > inlier_mean + 0.3,
            "outlier {outlier_mean} vs inlier {inlier_mean}"
        );
        let sup_first = model.history.first().unwrap().supervised;
        let sup_last = model.history.last().unwrap().supervised;
        assert!(sup_last < sup_first);
    }

    #[test]
    fn semi_supervised_training_runs_and_uses_generator() {
        let mut r = rng(9);
        let labeled = toy_labeled(&mut r, 4);
        let mut unlab_rows = Vec::new();
        for _ in 0..40 {
            let c: [f64; 3] = if r.random::<f64>() < 0.5 {
                [0.2, 0.8, 0.3]
            } else {
                [0.9, 0.2, 0.6]
            };
            unlab_rows.push([
                c[0] + 0.05 * r.random::<f64>(),
                c[1] + 0.05 * r.random::<f64>(),
                c[2] + 0.05 * r.random::<f64>(),
            ]);
        }
        let unlabeled = UnlabeledSet {
            spec: Tensor::from_shape_fn((40, 3), |(i, j)| unlab_rows[i][j]),
            som: None,
        };
        let mut cfg = GanConfig::defaults(Mode::SemiSupervised, FeatureSet::SpectraOnly, 30, 6);
        cfg.batch_size = 8;
        cfg.noise_dim = 6;
        cfg.sizes = tiny_sizes();
        cfg.lr = 1e-3;
        let mut model = train_gan(&cfg, 2, &labeled, Some(&unlabeled), None).unwrap();
        assert!(model.gen.is_some());
        assert!(model.history.iter().all(|e| e.feature_matching.is_finite()));

        // smoke check: generator emits finite spectra of the right shape
        let fake = model
            .gen
            .as_mut()
            .unwrap()
            .sample(&mut rng(10), 5, false);
        assert_eq!(fake.dim(), (5, 3));
        assert!(fake.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let mut r = rng(11);
        let labeled = toy_labeled(&mut r, 4);
        let mut cfg = GanConfig::defaults(Mode::Supervised, FeatureSet::SpectraOnly, 5, 42);
        cfg.batch_size = 8;
        cfg.sizes = tiny_sizes();
        let a = train_gan(&cfg, 2, &labeled, None, None).unwrap();
        let b = train_gan(&cfg, 2, &labeled, None, None).unwrap();
        let (mut pa, mut pb) = (
            vec![0.0; a.disc.param_count()],
            vec![0.0; b.disc.param_count()],
        );
        a.disc.store_params(&mut pa);
        b.disc.store_params(&mut pb);
        assert_eq!(pa, pb);

        cfg.seed = 43;
        let c = train_gan(&cfg, 2, &labeled, None, None).unwrap();
        let mut pc = vec![0.0; c.disc.param_count()];
        c.disc.store_params(&mut pc);
        assert_ne!(pa, pc);
    }

    #[test]
    fn train_rejects_inconsistent_setups() {
        let mut r = rng(12);
        let labeled = toy_labeled(&mut r, 3);
        let cfg = GanConfig::defaults(Mode::SemiSupervised, FeatureSet::SpectraOnly, 2, 0);
        // semi needs unlabeled data
        assert!(train_gan(&cfg, 2, &labeled, None, None).is_err());
        // dual needs memberships
        let cfg = GanConfig::defaults(Mode::Supervised, FeatureSet::SpectraAndSom, 2, 0);
        assert!(train_gan(&cfg, 2, &labeled, None, None).is_err());
        // bad target index
        let cfg = GanConfig::defaults(Mode::Supervised, FeatureSet::SpectraOnly, 2, 0);
        let mut bad = toy_labeled(&mut r, 3);
        bad.targets[0] = 9;
        assert!(train_gan(&cfg, 2, &bad, None, None).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_scores() {
        let mut r = rng(13);
        let labeled = toy_labeled(&mut r, 6);
        let mut cfg = GanConfig::defaults(Mode::Supervised, FeatureSet::SpectraOnly, 20, 3);
        cfg.batch_size = 8;
        cfg.sizes = tiny_sizes();
        let mut model = train_gan(&cfg, 2, &labeled, None, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        save_model(dir.path(), &model).unwrap();
        let mut back = load_model(dir.path()).unwrap();

        let s1 = model.outlier_scores(&labeled.spec, None).unwrap();
        let s2 = back.outlier_scores(&labeled.spec, None).unwrap();
        assert_eq!(s1, s2);
        let c1 = model.classify(&labeled.spec, None).unwrap();
        let c2 = back.classify(&labeled.spec, None).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn load_rejects_wrong_version_and_truncated_bin() {
        let mut r = rng(14);
        let labeled = toy_labeled(&mut r, 3);
        let mut cfg = GanConfig::defaults(Mode::Supervised, FeatureSet::SpectraOnly, 2, 3);
        cfg.batch_size = 4;
        cfg.sizes = tiny_sizes();
        let model = train_gan(&cfg, 2, &labeled, None, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_model(dir.path(), &model).unwrap();

        let json = std::fs::read_to_string(dir.path().join("model.json")).unwrap();
        std::fs::write(
            dir.path().join("model.json"),
            json.replace("\"format_version\": 1", "\"format_version\": 9"),
        )
        .unwrap();
        assert!(load_model(dir.path()).is_err());

        std::fs::write(
            dir.path().join("model.json"),
            json,
        )
        .unwrap();
        let bin = std::fs::read(dir.path().join("model.bin")).unwrap();
        std::fs::write(dir.path().join("model.bin"), &bin[..bin.len() - 8]).unwrap();
        assert!(load_model(dir.path()).is_err());
    }

    #[test]
    fn divergence_reports_epoch() {
        let err = ensure_finite(7, "supervised", f64::NAN).unwrap_err();
        match err {
            Error::Divergence { epoch, .. } => assert_eq!(epoch, 7),
            other => panic!("unexpected error {other:?}"),
        }
    }
}

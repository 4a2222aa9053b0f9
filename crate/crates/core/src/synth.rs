//! Synthetic spectral scenes: material models built from Gaussian bumps with
//! multiplicative illumination and additive noise, plus the experiment split
//! (labeled / unlabeled / test partitions) drawn from a scene.
//!
//! The default scene bakes in the two confusion modes the hybrid distance is
//! meant to untangle: a dark low-amplitude family sitting close in raw
//! distance, and a bright family sharing an inlier's direction so it is close
//! in angle.

use crate::data::{Dataset, Label, Spectrum};
use crate::error::{Error, Result};
use crate::seed::{self, stage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One Gaussian bump of a base curve. `center` and `width` are fractions of
/// the band axis, so a scene renders at any band count.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub center: f64,
    pub width: f64,
    pub amplitude: f64,
}

/// What a material stands for in the experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Inlier(usize),
    OutlierFamily(String),
}

/// A material: smooth nonnegative base curve, illumination range for
/// multiplicative scaling, and additive noise level. `abundance` is the
/// material's relative areal coverage; outlier pools are apportioned by it,
/// so rare families (small man-made objects) stay rare in unlabeled and test
/// data. Inlier draws use explicit per-class counts and ignore it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialModel {
    pub name: String,
    pub role: Role,
    pub bumps: Vec<Bump>,
    pub u_lo: f64,
    pub u_hi: f64,
    pub noise_std: f64,
    #[serde(default = "default_abundance")]
    pub abundance: f64,
}

fn default_abundance() -> f64 {
    1.0
}

impl MaterialModel {
    pub fn validate(&self) -> Result<()> {
        if self.bumps.is_empty() {
            return Err(Error::Config(format!("material {} has no bumps", self.name)));
        }
        for b in &self.bumps {
            if !(b.width > 0.0) || !b.center.is_finite() || b.amplitude < 0.0 {
                return Err(Error::Config(format!(
                    "material {}: bumps need width > 0 and amplitude >= 0",
                    self.name
                )));
            }
        }
        if !(self.u_lo > 0.0) || self.u_hi < self.u_lo {
            return Err(Error::Config(format!(
                "material {}: illumination range needs 0 < u_lo <= u_hi",
                self.name
            )));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config(format!(
                "material {}: noise std must be >= 0",
                self.name
            )));
        }
        if !(self.abundance > 0.0) || !self.abundance.is_finite() {
            return Err(Error::Config(format!(
                "material {}: abundance must be positive and finite",
                self.name
            )));
        }
        Ok(())
    }

    /// Base curve on `bands` points over [0, 1]. Nonnegative by construction
    /// (sum of nonnegative bumps).
    pub fn base_curve(&self, bands: usize) -> Vec<f64> {
        (0..bands)
            .map(|b| {
                let x = if bands > 1 { b as f64 / (bands - 1) as f64 } else { 0.5 };
                self.bumps
                    .iter()
                    .map(|g| {
                        let z = (x - g.center) / g.width;
                        g.amplitude * (-0.5 * z * z).exp()
                    })
                    .sum()
            })
            .collect()
    }
}

/// Draw `n` spectra from a material: `u * base + noise`, with
/// `u ~ Uniform[u_lo, u_hi]` per sample and i.i.d. Gaussian noise per band,
/// clipped at zero (a documented truncation of the noise distribution).
pub fn sample_material(
    m: &MaterialModel,
    bands: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Spectrum>> {
    m.validate()?;
    if bands == 0 {
        return Err(Error::Config("band count must be positive".into()));
    }
    let base = m.base_curve(bands);
    let noise = if m.noise_std > 0.0 {
        Some(Normal::new(0.0, m.noise_std).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u = if m.u_hi > m.u_lo {
            rng.random_range(m.u_lo..m.u_hi)
        } else {
            m.u_lo
        };
        let values: Vec<f64> = base
            .iter()
            .map(|b| {
                let eps = noise.as_ref().map_or(0.0, |d| d.sample(rng));
                (u * b + eps).max(0.0)
            })
            .collect();
        out.push(Spectrum::new(values)?);
    }
    Ok(out)
}

/// A full scene: band count, material list, and which outlier family supplies
/// the labeled outliers.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub format_version: u32,
    pub bands: usize,
    pub materials: Vec<MaterialModel>,
    pub labeled_outlier_family: String,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != 1 {
            return Err(Error::Parse {
                row: 0,
                msg: format!("unsupported scene format version {}", self.format_version),
            });
        }
        if self.bands < 2 {
            return Err(Error::Config("scene needs at least 2 bands".into()));
        }
        let k = self.class_count();
        if k < 2 {
            return Err(Error::Config("scene needs at least 2 inlier classes".into()));
        }
        let mut seen = vec![false; k];
        for m in &self.materials {
            m.validate()?;
            if let Role::Inlier(c) = &m.role {
                if *c >= k || seen[*c] {
                    return Err(Error::Config(format!(
                        "inlier classes must be 0..K with one material each, got duplicate or gap at {c}"
                    )));
                }
                seen[*c] = true;
            }
        }
        if !self
            .outlier_families()
            .iter()
            .any(|f| *f == self.labeled_outlier_family)
        {
            return Err(Error::Config(format!(
                "labeled outlier family {} not in scene",
                self.labeled_outlier_family
            )));
        }
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.materials
            .iter()
            .filter(|m| matches!(m.role, Role::Inlier(_)))
            .count()
    }

    pub fn outlier_families(&self) -> Vec<String> {
        self.materials
            .iter()
            .filter_map(|m| match &m.role {
                Role::OutlierFamily(f) => Some(f.clone()),
                Role::Inlier(_) => None,
            })
            .collect()
    }

    fn inlier(&self, k: usize) -> &MaterialModel {
        self.materials
            .iter()
            .find(|m| m.role == Role::Inlier(k))
            .expect("validated scene has contiguous classes")
    }

    fn family(&self, name: &str) -> &MaterialModel {
        self.materials
            .iter()
            .find(|m| m.role == Role::OutlierFamily(name.to_string()))
            .expect("validated scene contains the family")
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Parse { row: 0, msg: e.to_string() })?;
        std::fs::write(path.as_ref(), text)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Scene> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let scene: Scene = serde_json::from_str(&text).map_err(|e| Error::Parse { row: 0, msg: e.to_string() })?;
        scene.validate()?;
        Ok(scene)
    }
}

/// Standard desk-scale scene: K inlier classes plus four outlier families.
/// `shade` is the low-amplitude confuser (close in raw distance), `panel`
/// shares class K-1's direction at extreme amplitude (close in angle),
/// `gravel` and `ore` are near-single-class mixtures whose bands stay inside
/// the inlier illumination envelope, so only the joint shape (the angle)
/// gives them away. `gravel` is the designated labeled-outlier family: it is
/// the most abundant anomaly on the ground, and because no per-band cut
/// separates it from the inlier classes, the labeled examples by themselves
/// say very little -- rejecting it and its unseen cousins takes a model of
/// what typical spectra look like.
pub fn default_scene(bands: usize, k: usize) -> Result<Scene> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 inlier classes, got {k}")));
    }
    let mut materials = Vec::new();
    // main bump centers spread over [0.30, 0.70]; all classes share a mid bump
    let main_center = |c: usize| 0.30 + 0.40 * c as f64 / (k - 1) as f64;
    for c in 0..k {
        materials.push(MaterialModel {
            name: format!("class{c}"),
            role: Role::Inlier(c),
            bumps: vec![
                Bump { center: main_center(c), width: 0.10, amplitude: 1.0 },
                Bump { center: 0.50, width: 0.16, amplitude: 0.45 },
            ],
            // the wide illumination range reaches low amplitudes where the
            // class rays approach each other, keeping the pooled manifold
            // connected enough for full SOM node coverage
            u_lo: 0.35,
            u_hi: 1.4,
            noise_std: 0.02,
            abundance: 1.0,
        });
    }
    let last = main_center(k - 1);
    // shade overlaps the inlier illumination range and reuses class 0's band
    // support, so no single-band cut separates it; only the main-to-shared
    // bump ratio twists its direction away from the class-0 ray
    materials.push(MaterialModel {
        name: "shade".into(),
        role: Role::OutlierFamily("shade".into()),
        bumps: vec![
            Bump { center: main_center(0), width: 0.10, amplitude: 0.58 },
            Bump { center: 0.50, width: 0.16, amplitude: 0.03 },
        ],
        u_lo: 0.5,
        u_hi: 1.1,
        noise_std: 0.02,
        abundance: 0.3,
    });
    // panel is class K-1's shape scaled far beyond the illumination range:
    // purely radial, so a classifier that learns "panel = very bright" gains
    // nothing on the in-envelope mixture families below
    materials.push(MaterialModel {
        name: "panel".into(),
        role: Role::OutlierFamily("panel".into()),
        bumps: vec![
            Bump { center: last, width: 0.10, amplitude: 2.20 },
            Bump { center: 0.50, width: 0.16, amplitude: 0.99 },
        ],
        u_lo: 0.95,
        u_hi: 1.05,
        noise_std: 0.03,
        // small man-made targets cover a sliver of a scene
        abundance: 0.1,
    });
    // gravel and ore are near-single-class mixtures: a light admixture of the
    // other ray moves them several noise sigmas off the manifold (enough to
    // zero their memberships) while leaving every per-band projection well
    // inside the illumination spread of the dominant class, so nothing about
    // them reads as low-confidence to a classifier fit on labeled data alone
    materials.push(MaterialModel {
        name: "gravel".into(),
        role: Role::OutlierFamily("gravel".into()),
        bumps: vec![
            Bump { center: main_center(0), width: 0.10, amplitude: 0.85 },
            Bump { center: last, width: 0.10, amplitude: 0.15 },
            Bump { center: 0.50, width: 0.16, amplitude: 0.45 },
        ],
        u_lo: 0.65,
        u_hi: 1.25,
        noise_std: 0.02,
        abundance: 0.3,
    });
    materials.push(MaterialModel {
        name: "ore".into(),
        role: Role::OutlierFamily("ore".into()),
        bumps: vec![
            Bump { center: main_center(0), width: 0.10, amplitude: 0.20 },
            Bump { center: last, width: 0.10, amplitude: 0.80 },
            Bump { center: 0.50, width: 0.16, amplitude: 0.45 },
            Bump { center: 0.15, width: 0.06, amplitude: 0.08 },
        ],
        u_lo: 0.6,
        u_hi: 1.2,
        noise_std: 0.02,
        abundance: 0.3,
    });
    let scene = Scene {
        format_version: 1,
        bands,
        materials,
        labeled_outlier_family: "gravel".into(),
    };
    scene.validate()?;
    Ok(scene)
}

/// Partition sizes for one trial.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub labeled_per_class: usize,
    pub labeled_outliers: usize,
    pub unlabeled_per_class: usize,
    pub unlabeled_outliers: usize,
    pub test_per_class: usize,
    pub test_outliers: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            labeled_per_class: 10,
            labeled_outliers: 10,
            unlabeled_per_class: 500,
            unlabeled_outliers: 3500,
            test_per_class: 250,
            test_outliers: 1000,
        }
    }
}

impl SplitCounts {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.labeled_per_class,
            self.labeled_outliers,
            self.unlabeled_per_class,
            self.unlabeled_outliers,
            self.test_per_class,
            self.test_outliers,
        ];
        if all.iter().any(|c| *c == 0) {
            return Err(Error::Config("all split counts must be positive".into()));
        }
        Ok(())
    }
}

/// Split `total` across families proportionally to their abundance, exact by
/// largest remainder (ties to the lower index). Deterministic in the input
/// order.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut short = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in order {
        if short == 0 {
            break;
        }
        counts[i] += 1;
        short -= 1;
    }
    counts
}

/// True origin of a sample, kept alongside partitions whose public labels
/// hide it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Inlier(usize),
    Outlier(String),
}

/// One trial's data: labeled set (inlier classes + labeled outliers),
/// unlabeled pool, and a held-out test set. `unlabeled_truth` and
/// `test_family` carry synthetic ground truth parallel to their datasets.
#[derive(Debug, Clone)]
pub struct ExperimentSplit {
    pub labeled: Dataset,
    pub unlabeled: Dataset,
    pub unlabeled_truth: Vec<Provenance>,
    pub test: Dataset,
    pub test_family: Vec<Option<String>>,
    pub trial_seed: u64,
}

/// Draw one trial's partitions. Labeled outliers come only from the scene's
/// designated family; the unlabeled pool and the test set cover every family,
/// so the test set always holds outlier kinds absent from the labeled data.
/// Fully determined by (master seed, trial index).
pub fn make_split(
    scene: &Scene,
    counts: &SplitCounts,
    master_seed: u64,
    trial: u64,
) -> Result<ExperimentSplit> {
    scene.validate()?;
    counts.validate()?;
    let mut rng = seed::stream(master_seed, &[stage::SPLIT, trial]);
    let k = scene.class_count();
    let families = scene.outlier_families();

    let mut labeled = Vec::new();
    for c in 0..k {
        for s in sample_material(scene.inlier(c), scene.bands, counts.labeled_per_class, &mut rng)? {
            labeled.push((s, Label::Inlier(c)));
        }
    }
    let designated = scene.family(&scene.labeled_outlier_family);
    for s in sample_material(designated, scene.bands, counts.labeled_outliers, &mut rng)? {
        labeled.push((s, Label::Outlier));
    }

    let mut unlabeled = Vec::new();
    let mut unlabeled_truth = Vec::new();
    for c in 0..k {
        for s in sample_material(scene.inlier(c), scene.bands, counts.unlabeled_per_class, &mut rng)? {
            unlabeled.push((s, Label::Unlabeled));
            unlabeled_truth.push(Provenance::Inlier(c));
        }
    }
    // outlier pools follow the scene's abundance weights
    let weights: Vec<f64> = families.iter().map(|f| scene.family(f).abundance).collect();
    for (f, n) in families.iter().zip(apportion(counts.unlabeled_outliers, &weights)) {
        for s in sample_material(scene.family(f), scene.bands, n, &mut rng)? {
            unlabeled.push((s, Label::Unlabeled));
            unlabeled_truth.push(Provenance::Outlier(f.clone()));
        }
    }

    let mut test = Vec::new();
    let mut test_family = Vec::new();
    for c in 0..k {
        for s in sample_material(scene.inlier(c), scene.bands, counts.test_per_class, &mut rng)? {
            test.push((s, Label::Inlier(c)));
            test_family.push(None);
        }
    }
    let test_counts = apportion(counts.test_outliers, &weights);
    if test_counts.iter().any(|n| *n == 0) {
        return Err(Error::Config(
            "test outlier count too small to cover every family".into(),
        ));
    }
    for (f, n) in families.iter().zip(test_counts) {
        for s in sample_material(scene.family(f), scene.bands, n, &mut rng)? {
            test.push((s, Label::Outlier));
            test_family.push(Some(f.clone()));
        }
    }

    Ok(ExperimentSplit {
        labeled: Dataset::new(labeled, k)?,
        unlabeled: Dataset::new(unlabeled, k)?,
        unlabeled_truth,
        test: Dataset::new(test, k)?,
        test_family,
        trial_seed: seed::derive(master_seed, &[stage::SPLIT, trial]),
    })
}

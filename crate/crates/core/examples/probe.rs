//! Scratch probe: one default-scale trial across all four model types,
//! printing AUC, top classification rate, and wall time per stage.

use somgan_core::experiment::*;
use somgan_core::synth::{default_scene, make_split};
use std::time::Instant;

fn main() {
    let scene = default_scene(32, 2).unwrap();
    let mut cfg = ExperimentConfig::defaults(scene, 1, 7);
    if let Ok(v) = std::env::var("SEMI_EPOCHS") {
        cfg.semi_epochs = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("SUP_EPOCHS") {
        cfg.sup_epochs = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("SOM_DATA") {
        cfg.som_data = match v.as_str() {
            "labeled" => SomTrainingData::LabeledInliers,
            "pool" => SomTrainingData::InlierPool,
            "all" => SomTrainingData::AllTraining,
            _ => panic!("bad SOM_DATA"),
        };
    }
    if let Ok(v) = std::env::var("BATCH") {
        cfg.batch_size = v.parse().unwrap();
    }
    let trial: u64 = std::env::var("TRIAL").map(|v| v.parse().unwrap()).unwrap_or(0);
    if let Ok(v) = std::env::var("SOM_GRID") {
        let (r, c) = v.split_once('x').unwrap();
        cfg.som_rows = r.parse().unwrap();
        cfg.som_cols = c.parse().unwrap();
    }

    let t0 = Instant::now();
    let split = make_split(&cfg.scene, &cfg.counts, cfg.master_seed, trial).unwrap();
    println!("split: {:.2}s", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let som = build_som_artifacts(&cfg, &split, trial).unwrap();
    println!(
        "som stack: {:.2}s (pool {})",
        t0.elapsed().as_secs_f64(),
        som_pool(&cfg, &split).len()
    );
    println!("node counts: {:?}", som.stats.counts);
    println!(
        "alphas: {:?}",
        som.layer.alpha.iter().map(|a| (a * 1e4).round() / 1e4).collect::<Vec<_>>()
    );

    // SOM feature health: membership infinity-norm per group
    {
        use somgan_core::membership::som_features_batch;
        use somgan_core::Label;
        let mut groups: Vec<(String, Vec<somgan_core::Spectrum>)> = Vec::new();
        let inl: Vec<somgan_core::Spectrum> = split
            .test
            .samples
            .iter()
            .filter(|(_, l)| matches!(l, Label::Inlier(_)))
            .map(|(s, _)| s.clone())
            .collect();
        groups.push(("inlier".into(), inl));
        for fam in ["shade", "panel", "gravel", "ore"] {
            let fs: Vec<somgan_core::Spectrum> = split
                .test
                .samples
                .iter()
                .zip(&split.test_family)
                .filter(|(_, f)| f.as_deref() == Some(fam))
                .map(|((s, _), _)| s.clone())
                .collect();
            groups.push((fam.into(), fs));
        }
        for (name, spectra) in groups {
            let mut raw = ndarray::Array2::zeros((spectra.len(), 32));
            for (i, s) in spectra.iter().enumerate() {
                for (j, v) in s.values().iter().enumerate() {
                    raw[[i, j]] = *v;
                }
            }
            let feats =
                som_features_batch(&som.grid, &som.stats, &som.layer, &raw, som.angle_weight)
                    .unwrap();
            let maxes: Vec<f64> = feats
                .rows()
                .into_iter()
                .map(|r| r.iter().cloned().fold(0.0f64, f64::max))
                .collect();
            let mean_max = maxes.iter().sum::<f64>() / maxes.len() as f64;
            let frac_blind = maxes.iter().filter(|m| **m < 0.05).count() as f64
                / maxes.len() as f64;
            let mean_feat = feats.mean().unwrap();
            println!(
                "feat {name:8} mean-max {mean_max:.3} frac-blind {frac_blind:.3} mean {mean_feat:.4}"
            );
            if std::env::var("ACCEPTORS").is_ok() && name != "inlier" {
                use somgan_core::som::hybrid_features_batch;
                let dists = hybrid_features_batch(&som.grid, &som.stats, &raw, som.angle_weight)
                    .unwrap();
                let nodes = som.grid.node_count();
                let mut votes = vec![0usize; nodes];
                for r in feats.rows() {
                    let mut bi = 0;
                    let mut bv = -1.0;
                    for (j, &v) in r.iter().enumerate() {
                        if v > bv {
                            bv = v;
                            bi = j;
                        }
                    }
                    if bv >= 0.5 {
                        votes[bi] += 1;
                    }
                }
                for j in 0..nodes {
                    if votes[j] == 0 {
                        continue;
                    }
                    let fam_d = dists.column(j).mean().unwrap();
                    println!(
                        "    acceptor node {j:2} votes {v:3} count {c:4} alpha {a:8.3} beta {b:8.3} fam-dist {fd:8.3}",
                        v = votes[j],
                        c = som.stats.counts[j],
                        a = som.layer.alpha[j],
                        b = som.layer.beta[j],
                        fd = fam_d,
                    );
                }
            }
        }
    }

    for mt in ModelType::ALL {
        let t0 = Instant::now();
        let mut pipe = train_model(&cfg, &split, Some(&som), mt, trial).unwrap();
        let train_s = t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        let (roc, rel) = evaluate_model(&mut pipe, &split.test).unwrap();
        let top = rel
            .points
            .iter()
            .filter(|p| p.fa_rate <= 0.05)
            .map(|p| p.acc)
            .fold(0.0f64, f64::max);
        println!(
            "{:18} auc {:.4} top-rate {:.4} train {:.1}s eval {:.2}s",
            mt.name(),
            roc.auc,
            top,
            train_s,
            t0.elapsed().as_secs_f64()
        );

        // per-family score breakdown
        use somgan_core::Label;
        let spectra: Vec<somgan_core::Spectrum> =
            split.test.samples.iter().map(|(s, _)| s.clone()).collect();
        let (scores, _) = pipe.score_spectra(&spectra).unwrap();
        let inl: Vec<f64> = split
            .test
            .samples
            .iter()
            .zip(&scores)
            .filter(|((_, l), _)| matches!(l, Label::Inlier(_)))
            .map(|(_, s)| *s)
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        if std::env::var("DIAG").is_ok() {
            // logit anatomy: z_K vs max class logit per family
            use somgan_core::membership::som_features_batch;
            let raw = {
                let bands = spectra[0].bands();
                let mut t = ndarray::Array2::zeros((spectra.len(), bands));
                for (i, s) in spectra.iter().enumerate() {
                    for (j, v) in s.values().iter().enumerate() {
                        t[[i, j]] = *v;
                    }
                }
                t
            };
            let spec_std = {
                let mut t = raw.clone();
                for (i, s) in spectra.iter().enumerate() {
                    let z = pipe.standardizer.standardize(s).unwrap();
                    for (j, v) in z.values().iter().enumerate() {
                        t[[i, j]] = *v;
                    }
                }
                t
            };
            let som_t = pipe.som.as_ref().map(|a| {
                som_features_batch(&a.grid, &a.stats, &a.layer, &raw, a.angle_weight).unwrap()
            });
            let logits = pipe.model.logits(&spec_std, som_t.as_ref()).unwrap();
            let k = logits.ncols() - 1;
            let gap: Vec<f64> = logits
                .rows()
                .into_iter()
                .map(|r| r[k] - r.iter().take(k).cloned().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            let zk: Vec<f64> = logits.rows().into_iter().map(|r| r[k]).collect();
            let sel = |fam: Option<&str>, v: &[f64]| -> f64 {
                let vals: Vec<f64> = split
                    .test
                    .samples
                    .iter()
                    .zip(&split.test_family)
                    .zip(v)
                    .filter(|((( _, l), f), _)| match fam {
                        None => matches!(l, Label::Inlier(_)),
                        Some(name) => f.as_deref() == Some(name),
                    })
                    .map(|(_, x)| *x)
                    .collect();
                vals.iter().sum::<f64>() / vals.len() as f64
            };
            print!("    logit-gap inl {:+.2}", sel(None, &gap));
            for fam in ["shade", "panel", "gravel", "ore"] {
                print!(" {fam} {:+.2}", sel(Some(fam), &gap));
            }
            print!(" | z_K inl {:+.2}", sel(None, &zk));
            for fam in ["shade", "panel", "gravel", "ore"] {
                print!(" {fam} {:+.2}", sel(Some(fam), &zk));
            }
            println!();
            if let Some(st) = &som_t {
                // som-path contribution: logits with features zeroed out
                let zero = ndarray::Array2::zeros(st.dim());
                let l0 = pipe.model.logits(&spec_std, Some(&zero)).unwrap();
                let dk: Vec<f64> = logits
                    .rows()
                    .into_iter()
                    .zip(l0.rows())
                    .map(|(a, b)| a[k] - b[k])
                    .collect();
                let dc: Vec<f64> = logits
                    .rows()
                    .into_iter()
                    .zip(l0.rows())
                    .map(|(a, b)| {
                        let ma = a.iter().take(k).cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mb = b.iter().take(k).cloned().fold(f64::NEG_INFINITY, f64::max);
                        ma - mb
                    })
                    .collect();
                println!(
                    "    som-path: dz_K inl {:+.2} dmaxz inl {:+.2} (blind outliers sit at 0 by construction)",
                    sel(None, &dk),
                    sel(None, &dc)
                );
            }
        }
        print!("    inlier mean {:.3} |", mean(&inl));
        for fam in ["shade", "panel", "gravel", "ore"] {
            let fs: Vec<f64> = split
                .test_family
                .iter()
                .zip(&scores)
                .filter(|(f, _)| f.as_deref() == Some(fam))
                .map(|(_, s)| *s)
                .collect();
            let curve = somgan_core::eval::roc(&inl, &fs).unwrap();
            print!(" {fam}: mean {:.3} auc {:.3} |", mean(&fs), curve.auc);
        }
        println!();
    }
}

//! Scratch: full multi-trial experiment at acceptance scale, printing the
//! per-model AUC summary, per-family AUC means, and the ordering margins.

use somgan_core::experiment::*;
use somgan_core::synth::{default_scene, make_split};
use somgan_core::Label;
use std::time::Instant;

const FAMS: [&str; 4] = ["shade", "panel", "gravel", "ore"];

fn main() {
    let trials: usize = std::env::var("TRIALS").map(|v| v.parse().unwrap()).unwrap_or(10);
    let seed: u64 = std::env::var("SEED").map(|v| v.parse().unwrap()).unwrap_or(7);
    let scene = default_scene(32, 2).unwrap();
    let mut cfg = ExperimentConfig::defaults(scene, trials, seed);
    if let Ok(v) = std::env::var("SEMI_EPOCHS") {
        cfg.semi_epochs = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("SUP_EPOCHS") {
        cfg.sup_epochs = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("BATCH") {
        cfg.batch_size = v.parse().unwrap();
    }
    let t0 = Instant::now();
    // per model: (pooled aucs, top rates, per-family aucs)
    let mut acc: Vec<(Vec<f64>, Vec<f64>, [Vec<f64>; 4])> =
        (0..4).map(|_| (vec![], vec![], Default::default())).collect();
    for trial in 0..trials as u64 {
        let split = make_split(&cfg.scene, &cfg.counts, cfg.master_seed, trial).unwrap();
        let som = build_som_artifacts(&cfg, &split, trial).unwrap();
        for (mi, mt) in ModelType::ALL.iter().enumerate() {
            let mut pipe = train_model(&cfg, &split, Some(&som), *mt, trial).unwrap();
            let (roc, rel) = evaluate_model(&mut pipe, &split.test).unwrap();
            let top = rel
                .points
                .iter()
                .filter(|p| p.fa_rate <= 0.05)
                .map(|p| p.acc)
                .fold(0.0f64, f64::max);
            acc[mi].0.push(roc.auc);
            acc[mi].1.push(top);
            eprintln!("  t{trial} {:18} auc {:.4} top {:.4}", mt.name(), roc.auc, top);
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
            for (fi, fam) in FAMS.iter().enumerate() {
                let fs: Vec<f64> = split
                    .test_family
                    .iter()
                    .zip(&scores)
                    .filter(|(f, _)| f.as_deref() == Some(*fam))
                    .map(|(_, s)| *s)
                    .collect();
                acc[mi].2[fi].push(somgan_core::eval::roc(&inl, &fs).unwrap().auc);
            }
        }
    }
    println!("total {:.1}s for {} trials", t0.elapsed().as_secs_f64(), trials);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut sup_spectra = 0.0;
    let mut margins = Vec::new();
    for (mi, mt) in ModelType::ALL.iter().enumerate() {
        let m = mean(&acc[mi].0);
        print!(
            "{:18} auc {:.4} top {:.4} |",
            mt.name(),
            m,
            mean(&acc[mi].1)
        );
        for (fi, fam) in FAMS.iter().enumerate() {
            print!(" {fam} {:.3} |", mean(&acc[mi].2[fi]));
        }
        println!();
        if *mt == ModelType::SupSpectra {
            sup_spectra = m;
        }
        if mt.name().ends_with("som") {
            margins.push((mt.name(), m));
        }
    }
    for (name, auc) in margins {
        println!("margin {name}: {:+.4} (need >= +0.15)", auc - sup_spectra);
    }
}

//! Focused detector diagnostics: does the perturbation signal exist in raw
//! vectors, and can oracle features separate it? Not part of the shipped
//! surface.
use std::collections::BTreeMap;

use facegame_core::attack::AttackRegistry;
use facegame_core::extractor::{
    init_extractor, train_supervised, ArchSpec, ExtractorParams, TrainConfig,
};
use facegame_core::latentface::{
    gen_population_with, sample_pictures, Dataset, IdentityPopulation, PopulationShape, SplitTag,
};
use facegame_core::metrics::detection_metrics;
use facegame_core::seeds;

const DIM: usize = 32;
const N_UP: usize = 14;

fn shape() -> PopulationShape {
    PopulationShape { mean_dim: 8, mean_spread: 0.35, sigma: 0.05, basis_seed: None }
}

fn clean_sample(pop: &IdentityPopulation, ids: std::ops::Range<u32>, n: usize, seed: u64) -> Dataset {
    let mut items = Vec::new();
    for id in ids {
        items.extend(sample_pictures(pop, id, n, seed).unwrap());
    }
    Dataset::new(items, SplitTag::Train)
}

fn main() {
    let seed = 43u64;
    for sigma_pre in [0.05f64] {
    println!("--- sigma_pre {sigma_pre} ---");
    let world = PopulationShape { basis_seed: Some(seed), ..shape() };
    let pop = gen_population_with(45, DIM, 0.3, &world, seed).unwrap();

    // Ladder generations g1..g4 with the maturity recipes.
    let mut zoo = BTreeMap::new();
    let g2_epochs: usize = std::env::args().nth(1).and_then(|v| v.parse().ok()).unwrap_or(6);
    let recipes: Vec<(u32, Vec<usize>, usize, usize)> = vec![
        (1, vec![DIM, 32, 16], 32, 4),
        (2, vec![DIM, 64, 16], 32, g2_epochs),
        (3, vec![DIM, 64, 32, 16], 32, 10),
        (4, vec![DIM, 128, 32, 16], 48, 24),
    ];
    for (tag, widths, n_ids, epochs) in recipes {
        let gworld = PopulationShape { sigma: sigma_pre, ..world.clone() };
        let gpop =
            gen_population_with(n_ids, DIM, 0.3, &gworld, seeds::derive(seed, 99, tag as u64))
                .unwrap();
        let mut items = Vec::new();
        for id in 0..n_ids as u32 {
            items.extend(
                sample_pictures(&gpop, id, N_UP, seeds::derive(seed, 100, tag as u64)).unwrap(),
            );
        }
        let data = Dataset::new(items, SplitTag::Train);
        let arch = ArchSpec::new(widths, tag, seeds::derive(seed, 101, tag as u64));
        let cfg = TrainConfig { epochs, ..TrainConfig::default() }
            .with_seed(seeds::derive(seed, 102, tag as u64));
        zoo.insert(tag, train_supervised(&init_extractor(&arch).unwrap(), &data, &cfg).unwrap());
    }
    let registry = AttackRegistry::default();

    let eval_clean = clean_sample(&pop, 25..45, 6, seeds::derive(seed, 706, 0));
    let adv = registry
        .apply_version(&eval_clean, "lowkey-like", 0, seeds::derive(seed, 707, 0), &zoo)
        .unwrap();

    // Perturbation magnitude stats.
    let eps = 16.0 / 255.0;
    let mut mean_abs = 0.0;
    let mut sat = 0.0;
    let mut l2 = 0.0;
    let mut n = 0.0;
    for (c, a) in eval_clean.items.iter().zip(adv.pictures.iter()) {
        let mut s2 = 0.0;
        for (x, y) in c.x.iter().zip(a.x.iter()) {
            let d = (x - y).abs();
            mean_abs += d;
            if d > 0.9 * eps {
                sat += 1.0;
            }
            s2 += d * d;
            n += 1.0;
        }
        l2 += s2.sqrt();
    }
    println!(
        "delta stats: mean|d| {:.4} (eps {eps:.4}), saturated frac {:.3}, mean l2 {:.3}",
        mean_abs / n,
        sat / n,
        l2 / eval_clean.len() as f64
    );

    // Oracle features. The manifold basis is private to the library, so
    // estimate it from many clean samples via PCA-lite (power iterations on
    // the covariance), or use simpler statistics first.
    // Feature 1: squared distance from the global mean vector.
    let all_clean = clean_sample(&pop, 0..45, 10, seeds::derive(seed, 900, 0));
    let mut center = vec![0.0; DIM];
    for p in &all_clean.items {
        for (c, v) in center.iter_mut().zip(&p.x) {
            *c += v / all_clean.len() as f64;
        }
    }
    let energy = |x: &[f64]| -> f64 {
        x.iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    };
    let mut scores = Vec::new();
    for p in &eval_clean.items {
        scores.push((energy(&p.x), false));
    }
    for p in &adv.pictures {
        scores.push((energy(&p.x), true));
    }
    println!("norm-from-center AUC: {:.4}", detection_metrics(&scores).unwrap().auc);

    // Feature 2: off-manifold energy with a basis estimated from clean data
    // (top-8 covariance eigendirections via orthogonal iteration).
    let x_rows: Vec<Vec<f64>> = all_clean.items.iter().map(|p| {
        p.x.iter().zip(&center).map(|(a, b)| a - b).collect()
    }).collect();
    let k = 8;
    let mut basis: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let mut v = vec![0.0; DIM];
            v[j] = 1.0;
            v
        })
        .collect();
    for _ in 0..60 {
        // Multiply each basis vector by the covariance, then re-orthonormalize.
        let mut next: Vec<Vec<f64>> = Vec::with_capacity(k);
        for b in &basis {
            let mut acc = vec![0.0; DIM];
            for row in &x_rows {
                let dot: f64 = row.iter().zip(b.iter()).map(|(a, c)| a * c).sum();
                for (a, r) in acc.iter_mut().zip(row.iter()) {
                    *a += dot * r;
                }
            }
            next.push(acc);
        }
        for i in 0..k {
            for j in 0..i {
                let d: f64 = next[i].iter().zip(next[j].iter()).map(|(a, b)| a * b).sum();
                let nj: f64 = next[j].iter().map(|v| v * v).sum();
                if nj > 0.0 {
                    for (a, b) in next[i].clone().iter().zip(next[j].clone()) {
                        let _ = (a, b);
                    }
                    let next_j = next[j].clone();
                    for (a, b) in next[i].iter_mut().zip(next_j.iter()) {
                        *a -= d / nj * b;
                    }
                }
            }
            let norm: f64 = next[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in &mut next[i] {
                *v /= norm.max(1e-12);
            }
        }
        basis = next;
    }
    let off_energy = |x: &[f64]| -> f64 {
        let d: Vec<f64> = x.iter().zip(&center).map(|(a, b)| a - b).collect();
        let total: f64 = d.iter().map(|v| v * v).sum();
        let on: f64 = basis
            .iter()
            .map(|b| {
                let dot: f64 = d.iter().zip(b.iter()).map(|(a, c)| a * c).sum();
                dot * dot
            })
            .sum();
        total - on
    };
    let mut scores = Vec::new();
    for p in &eval_clean.items {
        scores.push((off_energy(&p.x), false));
    }
    for p in &adv.pictures {
        scores.push((off_energy(&p.x), true));
    }
    println!("off-manifold energy AUC: {:.4}", detection_metrics(&scores).unwrap().auc);

    // Trained detector on lowkey-like and v03 (25 train ids / 20 eval ids).
    use facegame_core::recognizer::{detect, train_detector};
    for version in ["v03"] {
        let train_clean = clean_sample(&pop, 0..25, 20, seeds::derive(seed, 703, 0));
        let tr_adv = registry
            .apply_version(&train_clean, version, 0, seeds::derive(seed, 704, 0), &zoo)
            .unwrap();
        let train_adv = Dataset::new(tr_adv.pictures, SplitTag::Train);
        for (epochs, lr) in [(1500usize, 0.1f64), (3000, 0.1)] {
            let det_cfg =
                TrainConfig { epochs, learning_rate: lr, ..TrainConfig::default() }
                    .with_seed(seeds::derive(seed, 705, 0));
            let det = train_detector(&train_clean, &train_adv, &det_cfg).unwrap();
            let ev_adv = registry
                .apply_version(&eval_clean, version, 0, seeds::derive(seed, 708, 0), &zoo)
                .unwrap();
            let mut scores = Vec::new();
            for p in &eval_clean.items {
                scores.push((detect(&det, &p.x).unwrap(), false));
            }
            for p in &ev_adv.pictures {
                scores.push((detect(&det, &p.x).unwrap(), true));
            }
            let m = detection_metrics(&scores).unwrap();
            println!(
                "trained detector [{version} e{epochs} lr{lr}]: acc {:.3} prec {:.3} rec {:.3} auc {:.4}",
                m.accuracy, m.precision, m.recall, m.auc
            );
        }
    }
    }
}

//! Exploratory pilot used to fix default hyperparameters. Not part of the
//! shipped surface; run with:
//!   cargo run -p facegame-core --example pilot --release
use std::collections::BTreeMap;

use facegame_core::attack::{craft_targeted, AttackConfig, AttackMode, AttackRegistry};
use facegame_core::extractor::{
    init_extractor, robust_finetune, train_supervised, ArchSpec, ExtractorParams, TrainConfig,
};
use facegame_core::latentface::{
    gen_population_with, sample_pictures, Dataset, IdentityPopulation, PopulationShape, SplitTag,
};
use facegame_core::metrics::detection_metrics;
use facegame_core::recognizer::{
    build_index, calibrate_threshold, detect, predict_nn, train_detector, train_linear_head,
    HeadMode,
};
use facegame_core::seeds;

const DIM: usize = 32;
const N_IDS: usize = 32;
const N_UP: usize = 14;
const N_EVAL: usize = 6;
const SPREAD: f64 = 0.35;

#[derive(Clone)]
struct GenRecipe {
    widths: Vec<usize>,
    n_ids: usize,
    epochs: usize,
}

fn recipes() -> Vec<GenRecipe> {
    vec![
        GenRecipe { widths: vec![DIM, 32, 16], n_ids: 32, epochs: 6 },
        GenRecipe { widths: vec![DIM, 64, 16], n_ids: 32, epochs: 8 },
        GenRecipe { widths: vec![DIM, 64, 32, 16], n_ids: 32, epochs: 16 },
        GenRecipe { widths: vec![DIM, 128, 32, 16], n_ids: 48, epochs: 24 },
        GenRecipe { widths: vec![DIM, 128, 64, 32, 16], n_ids: 64, epochs: 300 },
    ]
}

fn shape() -> PopulationShape {
    PopulationShape { mean_dim: 8, mean_spread: SPREAD, sigma: 0.05, basis_seed: None }
}

fn ladder(seed: u64) -> BTreeMap<u32, ExtractorParams> {
    let mut out = BTreeMap::new();
    for (i, r) in recipes().into_iter().enumerate() {
        let tag = (i + 1) as u32;
        let world = PopulationShape { basis_seed: Some(seed), ..shape() };
        let pop =
            gen_population_with(r.n_ids, DIM, 0.3, &world, seeds::derive(seed, 99, tag as u64))
                .unwrap();
        let mut items = Vec::new();
        for id in 0..r.n_ids as u32 {
            items.extend(
                sample_pictures(&pop, id, N_UP, seeds::derive(seed, 100, tag as u64)).unwrap(),
            );
        }
        let data = Dataset::new(items, SplitTag::Train);
        let arch = ArchSpec::new(r.widths, tag, seeds::derive(seed, 101, tag as u64));
        let g0 = init_extractor(&arch).unwrap();
        let cfg = TrainConfig { epochs: r.epochs, ..TrainConfig::default() }
            .with_seed(seeds::derive(seed, 102, tag as u64));
        out.insert(tag, train_supervised(&g0, &data, &cfg).unwrap());
    }
    out
}

fn clean_sample(pop: &IdentityPopulation, n_ids: usize, n: usize, seed: u64) -> Dataset {
    let mut items = Vec::new();
    for id in 0..n_ids as u32 {
        items.extend(sample_pictures(pop, id, n, seed).unwrap());
    }
    Dataset::new(items, SplitTag::Train)
}

struct Trial {
    attacker: u32,
    uploads: Dataset,
    evals: Dataset,
    att_up: Dataset,
    others: Vec<facegame_core::latentface::Picture>,
}

fn trial_data(pop: &IdentityPopulation, trial: u64, seed: u64) -> Trial {
    let tseed = seeds::derive(seed, 300, trial);
    let attacker = ((trial * 5) % N_IDS as u64) as u32;
    let uploads = clean_sample(pop, N_IDS, N_UP, seeds::derive(tseed, 1, 0));
    let evals = clean_sample(pop, N_IDS, N_EVAL, seeds::derive(tseed, 2, 0));
    let att_up = Dataset::new(
        uploads.items.iter().filter(|p| p.label == attacker).cloned().collect(),
        SplitTag::Train,
    );
    let others = uploads.items.iter().filter(|p| p.label != attacker).cloned().collect();
    Trial { attacker, uploads, evals, att_up, others }
}

fn eval_protection(
    g: &ExtractorParams,
    poisoned: &Dataset,
    evals: &Dataset,
    attacker: u32,
) -> (f64, f64) {
    let idx = build_index(g, poisoned).unwrap();
    let att: Vec<_> = evals.items.iter().filter(|p| p.label == attacker).collect();
    let oth: Vec<_> = evals.items.iter().filter(|p| p.label != attacker).collect();
    let wrong =
        att.iter().filter(|p| predict_nn(&idx, &p.x, 1).unwrap().top1() != attacker).count();
    let errs =
        oth.iter().filter(|p| predict_nn(&idx, &p.x, 1).unwrap().top1() != p.label).count();
    (wrong as f64 / att.len() as f64, errs as f64 / oth.len() as f64)
}

fn main() {
    let seed = 42u64;
    let n_trials = 10u64;
    let world = PopulationShape { basis_seed: Some(seed), ..shape() };
    let pop = gen_population_with(N_IDS, DIM, 0.3, &world, seed).unwrap();
    let zoo = ladder(seed);
    let registry = AttackRegistry::default();

    // Clean accuracy per generation.
    {
        let train = clean_sample(&pop, N_IDS, N_UP, seeds::derive(seed, 200, 0));
        let test = clean_sample(&pop, N_IDS, N_EVAL, seeds::derive(seed, 201, 0));
        let accs: Vec<String> = zoo
            .iter()
            .map(|(t, g)| {
                let idx = build_index(g, &train).unwrap();
                let ok = test
                    .items
                    .iter()
                    .filter(|p| predict_nn(&idx, &p.x, 1).unwrap().top1() == p.label)
                    .count();
                format!("g{t}:{:.3}", ok as f64 / test.len() as f64)
            })
            .collect();
        println!("clean acc     {}", accs.join(" "));
    }

    // Per-version protection curves (S1/S2/S8 proxies).
    for version in ["v03", "v10", "lowkey-like"] {
        let mut prot: BTreeMap<u32, f64> = BTreeMap::new();
        let mut clean_err = 0.0;
        for t in 0..n_trials {
            let tr = trial_data(&pop, t, seed);
            let tseed = seeds::derive(seed, 300, t);
            let out = registry.apply_version(&tr.att_up, version, 1, tseed, &zoo).unwrap();
            let mut poisoned = tr.others.clone();
            poisoned.extend(out.pictures.clone());
            let poisoned = Dataset::new(poisoned, SplitTag::Train);
            for (tag, g) in &zoo {
                let (p, ce) = eval_protection(g, &poisoned, &tr.evals, tr.attacker);
                *prot.entry(*tag).or_insert(0.0) += p / n_trials as f64;
                if *tag == 2 && version == "v03" {
                    clean_err += ce / n_trials as f64;
                }
            }
        }
        let row: Vec<String> = prot.iter().map(|(t, v)| format!("g{t}:{v:.2}")).collect();
        print!("{version:<12}  {}", row.join(" "));
        if version == "v03" {
            print!(" | clean-err g2 {clean_err:.3}");
        }
        println!();
    }

    // S4: half v03, half v10, defender g4 on union.
    {
        let mut prot = 0.0;
        for t in 0..n_trials {
            let tr = trial_data(&pop, t, seed);
            let tseed = seeds::derive(seed, 300, t);
            let half = tr.att_up.len() / 2;
            let first = Dataset::new(tr.att_up.items[..half].to_vec(), SplitTag::Train);
            let second = Dataset::new(tr.att_up.items[half..].to_vec(), SplitTag::Train);
            let o1 = registry.apply_version(&first, "v03", 1, tseed, &zoo).unwrap();
            let o2 = registry.apply_version(&second, "v10", 2, tseed, &zoo).unwrap();
            let mut poisoned = tr.others.clone();
            poisoned.extend(o1.pictures);
            poisoned.extend(o2.pictures);
            let poisoned = Dataset::new(poisoned, SplitTag::Train);
            let (p, _) = eval_protection(&zoo[&4], &poisoned, &tr.evals, tr.attacker);
            prot += p / n_trials as f64;
        }
        println!("S4 mixed v03+v10 on g4: prot {prot:.3}");
    }

    // S5: one leaked clean picture vs rho=0 (g2 defender).
    {
        let mut p0 = 0.0;
        let mut p1 = 0.0;
        for t in 0..n_trials {
            let tr = trial_data(&pop, t, seed);
            let tseed = seeds::derive(seed, 300, t);
            let out = registry.apply_version(&tr.att_up, "v03", 1, tseed, &zoo).unwrap();
            let mut poisoned = tr.others.clone();
            poisoned.extend(out.pictures.clone());
            let (p, _) = eval_protection(
                &zoo[&2],
                &Dataset::new(poisoned, SplitTag::Train),
                &tr.evals,
                tr.attacker,
            );
            p0 += p / n_trials as f64;

            let leaked = tr.att_up.items[0].clone();
            let rest = Dataset::new(tr.att_up.items[1..].to_vec(), SplitTag::Train);
            let out = registry.apply_version(&rest, "v03", 1, tseed, &zoo).unwrap();
            let mut poisoned = tr.others.clone();
            poisoned.push(leaked);
            poisoned.extend(out.pictures.clone());
            let (p, _) = eval_protection(
                &zoo[&2],
                &Dataset::new(poisoned, SplitTag::Train),
                &tr.evals,
                tr.attacker,
            );
            p1 += p / n_trials as f64;
        }
        println!("S5 leakage: rho=0 prot {p0:.3}, one-clean prot {p1:.3}");
    }

    // S3: adaptive robust fine-tune of g2 on v03 outputs of half the ids.
    for (epochs, mix) in [(40usize, 0.5f64), (80, 0.5)] {
        let mut pub_items = Vec::new();
        for id in 0..(N_IDS as u32) / 2 {
            pub_items.extend(sample_pictures(&pop, id, N_UP, seeds::derive(seed, 600, 0)).unwrap());
        }
        let pub_clean = Dataset::new(pub_items, SplitTag::Train);
        let out = registry
            .apply_version(&pub_clean, "v03", 0, seeds::derive(seed, 601, 0), &zoo)
            .unwrap();
        let pub_adv = Dataset::new(out.pictures, SplitTag::Train);
        let cfg = TrainConfig { robust_mix: mix, epochs, ..TrainConfig::default() }
            .with_seed(seeds::derive(seed, 602, 0));
        let robust = robust_finetune(&zoo[&2], &pub_clean, &pub_adv, &cfg).unwrap();
        let mut pr = 0.0;
        let mut ce = 0.0;
        for t in 0..n_trials {
            let tseed = seeds::derive(seed, 603, t);
            let attacker = (N_IDS / 2) as u32 + ((t * 3) % (N_IDS as u64 / 2)) as u32;
            let uploads = clean_sample(&pop, N_IDS, N_UP, seeds::derive(tseed, 1, 0));
            let evals = clean_sample(&pop, N_IDS, N_EVAL, seeds::derive(tseed, 2, 0));
            let att_up = Dataset::new(
                uploads.items.iter().filter(|p| p.label == attacker).cloned().collect(),
                SplitTag::Train,
            );
            let out = registry.apply_version(&att_up, "v03", 1, tseed, &zoo).unwrap();
            let mut poisoned: Vec<_> =
                uploads.items.iter().filter(|p| p.label != attacker).cloned().collect();
            poisoned.extend(out.pictures.clone());
            let (p, e) = eval_protection(
                &robust,
                &Dataset::new(poisoned, SplitTag::Train),
                &evals,
                attacker,
            );
            pr += p / n_trials as f64;
            ce += e / n_trials as f64;
        }
        println!("S3 robust-ft epochs {epochs}: prot {pr:.3} clean-err {ce:.3}");
    }

    // S9 detector: 45 ids, 25 train / 20 eval, v10 (g4 surrogate).
    for epochs in [300usize, 500] {
        let world45 = PopulationShape { basis_seed: Some(seed + 1), ..shape() };
        let pop45 = gen_population_with(45, DIM, 0.3, &world45, seed + 1).unwrap();
        let zoo45 = ladder(seed + 1);
        let mut train_clean = Vec::new();
        for id in 0..25u32 {
            train_clean
                .extend(sample_pictures(&pop45, id, N_UP, seeds::derive(seed, 703, 0)).unwrap());
        }
        let train_clean = Dataset::new(train_clean, SplitTag::Train);
        let adv = registry
            .apply_version(&train_clean, "v10", 0, seeds::derive(seed, 704, 0), &zoo45)
            .unwrap();
        let train_adv = Dataset::new(adv.pictures, SplitTag::Train);
        let det_cfg = TrainConfig { epochs, learning_rate: 0.1, ..TrainConfig::default() }
            .with_seed(seeds::derive(seed, 705, 0));
        let det = train_detector(&train_clean, &train_adv, &det_cfg).unwrap();
        let mut eval_clean = Vec::new();
        for id in 25..45u32 {
            eval_clean
                .extend(sample_pictures(&pop45, id, N_EVAL, seeds::derive(seed, 706, 0)).unwrap());
        }
        let eval_clean = Dataset::new(eval_clean, SplitTag::Train);
        let adv_eval = registry
            .apply_version(&eval_clean, "v10", 0, seeds::derive(seed, 707, 0), &zoo45)
            .unwrap();
        let mut scores = Vec::new();
        for p in &eval_clean.items {
            scores.push((detect(&det, &p.x).unwrap(), false));
        }
        for p in &adv_eval.pictures {
            scores.push((detect(&det, &p.x).unwrap(), true));
        }
        let m = detection_metrics(&scores).unwrap();
        println!(
            "S9 detector epochs {epochs}: acc {:.3} prec {:.3} rec {:.3} auc {:.4}",
            m.accuracy, m.precision, m.recall, m.auc
        );
        // Cross-attack transfer: same detector on lowkey-like outputs.
        let adv_cross = registry
            .apply_version(&eval_clean, "lowkey-like", 0, seeds::derive(seed, 708, 0), &zoo45)
            .unwrap();
        let mut scores = Vec::new();
        for p in &eval_clean.items {
            scores.push((detect(&det, &p.x).unwrap(), false));
        }
        for p in &adv_cross.pictures {
            scores.push((detect(&det, &p.x).unwrap(), true));
        }
        let m = detection_metrics(&scores).unwrap();
        println!("   cross (v10→lowkey-like): auc {:.4}", m.auc);
    }

    // S7 feasibility: targeted collusion reach on g2 vs the gate threshold.
    {
        let tr = trial_data(&pop, 0, seed);
        let g2 = &zoo[&2];
        let idx2 = build_index(g2, &tr.uploads).unwrap();
        let cal = clean_sample(&pop, N_IDS, N_EVAL, seeds::derive(seed, 801, 0));
        let tau = calibrate_threshold(&idx2, &cal, 0.02).unwrap();
        let target = (tr.attacker + 7) % N_IDS as u32;
        let tgt: Vec<_> = tr.uploads.items.iter().filter(|p| p.label == target).collect();
        let mut centroid = vec![0.0; g2.embed_dim()];
        for p in &tgt {
            for (c, v) in centroid.iter_mut().zip(g2.embed(&p.x).unwrap()) {
                *c += v;
            }
        }
        let n: f64 = centroid.iter().map(|v| v * v).sum::<f64>().sqrt();
        centroid.iter_mut().for_each(|c| *c /= n);
        let cfg = AttackConfig {
            surrogates: vec![g2.clone()],
            epsilon: 16.0 / 255.0,
            steps: 40,
            step_size: 16.0 / 255.0 / 10.0,
            mode: AttackMode::Targeted,
            version: "targeted".into(),
            seed,
            restarts: 0,
        };
        let mut reached = 0.0;
        for p in &tr.att_up.items {
            let r = craft_targeted(p, &[centroid.clone()], &cfg).unwrap();
            let e = g2.embed(&r.picture.x).unwrap();
            let d: f64 =
                e.iter().zip(&centroid).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            reached += d / tr.att_up.len() as f64;
        }
        println!("S7 targeted-on-g2: mean dist to target centroid {reached:.3} vs tau {tau:.3}");
    }

    // S10: supervised modes on g4 under v10.
    {
        let mut prot_nn = 0.0;
        let mut prot_lin = 0.0;
        let mut prot_e2e = 0.0;
        for t in 0..4 {
            let tr = trial_data(&pop, t, seed);
            let tseed = seeds::derive(seed, 300, t);
            let out = registry.apply_version(&tr.att_up, "v10", 1, tseed, &zoo).unwrap();
            let mut poisoned = tr.others.clone();
            poisoned.extend(out.pictures.clone());
            let poisoned = Dataset::new(poisoned, SplitTag::Train);
            let (p, _) = eval_protection(&zoo[&4], &poisoned, &tr.evals, tr.attacker);
            prot_nn += p / 4.0;
            let att_evals: Vec<_> =
                tr.evals.items.iter().filter(|p| p.label == tr.attacker).collect();
            let cfg = TrainConfig::default().with_seed(seeds::derive(seed, 950, t));
            let lin = train_linear_head(&zoo[&4], &poisoned, HeadMode::Linear, &cfg).unwrap();
            let wrong = att_evals
                .iter()
                .filter(|p| lin.predict(&p.x, 1).unwrap().top1() != tr.attacker)
                .count();
            prot_lin += wrong as f64 / att_evals.len() as f64 / 4.0;
            let e2e = train_linear_head(&zoo[&4], &poisoned, HeadMode::EndToEnd, &cfg).unwrap();
            let wrong = att_evals
                .iter()
                .filter(|p| e2e.predict(&p.x, 1).unwrap().top1() != tr.attacker)
                .count();
            prot_e2e += wrong as f64 / att_evals.len() as f64 / 4.0;
        }
        println!("S10 on g4 under v10: nn {prot_nn:.3} linear {prot_lin:.3} e2e {prot_e2e:.3}");
    }
}

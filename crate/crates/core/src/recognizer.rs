//! The defender's deployed systems: 1-NN recognition over embeddings,
//! supervised classifier heads, dual-model composition (top-2, confidence
//! gating), and the perturbation detector.
//!
//! Nearest-neighbor search is exhaustive and exact — at desk scale an
//! approximate structure would only add nondeterminism. Recognizer
//! operations never read picture provenance; the detector infers
//! perturbation from the raw vector alone.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::extractor::{ExtractorError, ExtractorParams, LinearHead, TrainConfig};
use crate::latentface::Dataset;
use crate::nn::{self, Mlp};
use crate::seeds::{self, domain};

#[derive(Debug, Error)]
pub enum RecognizerError {
    #[error("cannot build an index from an empty dataset")]
    EmptyIndex,
    #[error("k={k} exceeds index size {size}")]
    KTooLarge { k: usize, size: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("route fraction must lie strictly in (0,1), got {0}")]
    BadRouteFraction(f64),
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("detector training needs both classes nonempty")]
    MissingClass,
    #[error(transparent)]
    Extractor(#[from] ExtractorError),
}

/// How a prediction was produced in a composed system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Route {
    /// Single-model system; no routing happened.
    Direct,
    Accurate,
    Robust,
    Both,
}

impl std::fmt::Display for Route {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Route::Direct => write!(f, "direct"),
            Route::Accurate => write!(f, "accurate"),
            Route::Robust => write!(f, "robust"),
            Route::Both => write!(f, "both"),
        }
    }
}

/// Ranked labels with matching distances. For single-index predictions the
/// distances are non-decreasing; confidence is the negated rank-1 distance.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Prediction {
    pub labels: Vec<u32>,
    pub distances: Vec<f64>,
    pub route: Route,
}

impl Prediction {
    pub fn top1(&self) -> u32 {
        self.labels[0]
    }

    pub fn confidence(&self) -> f64 {
        -self.distances[0]
    }
}

struct IndexEntry {
    embedding: Vec<f64>,
    label: u32,
    /// Raw source picture, kept for the detector-on-match rule.
    source: Vec<f64>,
}

/// Exhaustive nearest-neighbor index over unit-norm embeddings.
pub struct NNIndex {
    extractor: ExtractorParams,
    entries: Vec<IndexEntry>,
}

impl NNIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn extractor(&self) -> &ExtractorParams {
        &self.extractor
    }

    pub fn entry_label(&self, i: usize) -> u32 {
        self.entries[i].label
    }
}

/// Embed every training picture into an index entry. Exhaustive storage, one
/// entry per picture, in dataset order.
pub fn build_index(g: &ExtractorParams, train: &Dataset) -> Result<NNIndex, RecognizerError> {
    if train.is_empty() {
        return Err(RecognizerError::EmptyIndex);
    }
    let mut entries = Vec::with_capacity(train.len());
    for p in &train.items {
        let embedding = g.embed(&p.x)?;
        entries.push(IndexEntry { embedding, label: p.label, source: p.x.clone() });
    }
    Ok(NNIndex { extractor: g.clone(), entries })
}

/// `(distance, entry index)` for the k nearest entries; ties broken by the
/// lower entry index.
fn nn_search(index: &NNIndex, x: &[f64], k: usize) -> Result<Vec<(f64, usize)>, RecognizerError> {
    if k == 0 {
        return Err(RecognizerError::ZeroK);
    }
    if k > index.len() {
        return Err(RecognizerError::KTooLarge { k, size: index.len() });
    }
    let e = index.extractor.embed(x)?;
    let mut scored: Vec<(f64, usize)> = index
        .entries
        .iter()
        .enumerate()
        .map(|(i, entry)| {
            let d = e
                .iter()
                .zip(entry.embedding.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            (d, i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    Ok(scored)
}

/// Exact k-nearest-neighbor prediction.
pub fn predict_nn(index: &NNIndex, x: &[f64], k: usize) -> Result<Prediction, RecognizerError> {
    let hits = nn_search(index, x, k)?;
    Ok(Prediction {
        labels: hits.iter().map(|&(_, i)| index.entries[i].label).collect(),
        distances: hits.iter().map(|&(d, _)| d).collect(),
        route: Route::Direct,
    })
}

/// Supervised classifier mode: `linear` freezes the extractor and tunes only
/// the head; `end_to_end` tunes both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum HeadMode {
    Linear,
    EndToEnd,
}

impl std::fmt::Display for HeadMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HeadMode::Linear => write!(f, "linear"),
            HeadMode::EndToEnd => write!(f, "end_to_end"),
        }
    }
}

/// A supervised face classifier: extractor plus linear head over embeddings.
pub struct Classifier {
    pub extractor: ExtractorParams,
    pub head: LinearHead,
    pub mode: HeadMode,
}

/// Train a classifier head on top of an extractor.
pub fn train_linear_head(
    g: &ExtractorParams,
    train: &Dataset,
    mode: HeadMode,
    cfg: &TrainConfig,
) -> Result<Classifier, RecognizerError> {
    let update_net = matches!(mode, HeadMode::EndToEnd);
    let (extractor, head) = crate::extractor::train_engine(g, train, None, cfg, update_net)?;
    Ok(Classifier { extractor, head, mode })
}

impl Classifier {
    /// Rank classes by logit; "distances" are negated logits so the usual
    /// non-decreasing convention holds.
    pub fn predict(&self, x: &[f64], k: usize) -> Result<Prediction, RecognizerError> {
        if k == 0 {
            return Err(RecognizerError::ZeroK);
        }
        let classes = self.head.n_classes();
        if k > classes {
            return Err(RecognizerError::KTooLarge { k, size: classes });
        }
        let e = self.extractor.embed(x)?;
        let em = Array2::from_shape_vec((1, e.len()), e).unwrap();
        let logits = self.head.logits(&em);
        let mut scored: Vec<(f64, u32)> = logits
            .row(0)
            .iter()
            .enumerate()
            .map(|(c, &l)| (-l, c as u32))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        scored.truncate(k);
        Ok(Prediction {
            labels: scored.iter().map(|&(_, c)| c).collect(),
            distances: scored.iter().map(|&(d, _)| d).collect(),
            route: Route::Direct,
        })
    }
}

/// Run both models and return both top-1 candidates (human-in-the-loop
/// composition).
pub fn predict_top2(
    accurate: &NNIndex,
    robust: &NNIndex,
    x: &[f64],
) -> Result<Prediction, RecognizerError> {
    let a = predict_nn(accurate, x, 1)?;
    let r = predict_nn(robust, x, 1)?;
    Ok(Prediction {
        labels: vec![a.labels[0], r.labels[0]],
        distances: vec![a.distances[0], r.distances[0]],
        route: Route::Both,
    })
}

/// Nearest-rank quantile of rank-1 distances on a clean validation set: τ is
/// the smallest calibration distance such that at most `q` of the set lies
/// strictly above it.
pub fn calibrate_threshold(
    index: &NNIndex,
    clean_val: &Dataset,
    route_fraction: f64,
) -> Result<f64, RecognizerError> {
    if !(route_fraction > 0.0 && route_fraction < 1.0) {
        return Err(RecognizerError::BadRouteFraction(route_fraction));
    }
    if clean_val.is_empty() {
        return Err(RecognizerError::EmptyCalibration);
    }
    let mut dists = Vec::with_capacity(clean_val.len());
    for p in &clean_val.items {
        dists.push(nn_search(index, &p.x, 1)?[0].0);
    }
    dists.sort_by(f64::total_cmp);
    let n = dists.len();
    let rank = (((1.0 - route_fraction) * n as f64).ceil() as usize).clamp(1, n);
    Ok(dists[rank - 1])
}

/// Confidence gate: answer from the accurate model when its rank-1 distance
/// is within τ, otherwise fall back to the robust model.
pub fn predict_gated(
    accurate: &NNIndex,
    robust: &NNIndex,
    tau: f64,
    x: &[f64],
    k: usize,
) -> Result<Prediction, RecognizerError> {
    let a = predict_nn(accurate, x, k)?;
    if a.distances[0] <= tau {
        return Ok(Prediction { route: Route::Accurate, ..a });
    }
    let r = predict_nn(robust, x, k)?;
    Ok(Prediction { route: Route::Robust, ..r })
}

/// Small feed-forward binary classifier over raw picture vectors, plus a
/// decision threshold.
pub struct DetectorParams {
    net: Mlp,
    pub threshold: f64,
}

/// Hidden layout of the default detector network. Corner-noise energy is a
/// quadratic statistic, which a tanh net needs some width and depth to carve.
const DETECTOR_HIDDEN: [usize; 2] = [96, 32];
/// Input standardization for the detector: pictures live in `[0,1]` with
/// fluctuations of a few hundredths, far inside tanh's linear zone. Centering
/// and rescaling puts the signal where the nonlinearity has curvature.
const DETECTOR_CENTER: f64 = 0.5;
const DETECTOR_GAIN: f64 = 8.0;

fn detector_widths(input_dim: usize) -> Vec<usize> {
    let mut w = vec![input_dim];
    w.extend_from_slice(&DETECTOR_HIDDEN);
    w.push(1);
    w
}

fn detector_standardize(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| (v - DETECTOR_CENTER) * DETECTOR_GAIN).collect()
}

impl DetectorParams {
    pub fn input_dim(&self) -> usize {
        self.net.in_dim()
    }

    /// All-zero detector: outputs probability 0.5 for every input. Degenerate
    /// baseline for tests and ablations.
    pub fn zeroed(input_dim: usize) -> Self {
        let mut net = Mlp::init(&detector_widths(input_dim), 0);
        for layer in &mut net.layers {
            layer.w.fill(0.0);
            layer.b.fill(0.0);
        }
        DetectorParams { net, threshold: 0.5 }
    }
}

/// Train a perturbation detector from matched clean and perturbed corpora
/// (the caller keeps training identities disjoint from evaluation ones).
/// Binary cross-entropy on raw vectors; threshold defaults to 0.5.
pub fn train_detector(
    clean: &Dataset,
    perturbed: &Dataset,
    cfg: &TrainConfig,
) -> Result<DetectorParams, RecognizerError> {
    if clean.is_empty() || perturbed.is_empty() {
        return Err(RecognizerError::MissingClass);
    }
    let dim = clean.dim();
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::with_capacity(clean.len() + perturbed.len());
    for p in &clean.items {
        if p.x.len() != dim {
            return Err(RecognizerError::Extractor(ExtractorError::DimensionMismatch {
                expected: dim,
                got: p.x.len(),
            }));
        }
        rows.push((detector_standardize(&p.x), 0.0));
    }
    for p in &perturbed.items {
        if p.x.len() != dim {
            return Err(RecognizerError::Extractor(ExtractorError::DimensionMismatch {
                expected: dim,
                got: p.x.len(),
            }));
        }
        rows.push((detector_standardize(&p.x), 1.0));
    }

    let mut net = Mlp::init(
        &detector_widths(dim),
        seeds::derive(cfg.seed, domain::DETECTOR, 0),
    );
    let mut vel = net.zero_grads();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, domain::DETECTOR, 1));
    let mut order: Vec<usize> = (0..rows.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut flat = Vec::with_capacity(chunk.len() * dim);
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                flat.extend_from_slice(&rows[i].0);
                targets.push(rows[i].1);
            }
            let xb = Array2::from_shape_vec((chunk.len(), dim), flat).unwrap();
            let cache = net.forward_cache(&xb);
            let (loss, d_logits) = nn::bce_logits(cache.output(), &targets);
            if !loss.is_finite() {
                return Err(RecognizerError::Extractor(ExtractorError::Diverged { epoch }));
            }
            let (grads, _) = net.backward(&cache, d_logits);
            net.sgd_step(&grads, &mut vel, cfg.learning_rate, cfg.momentum);
        }
    }
    Ok(DetectorParams { net, threshold: 0.5 })
}

/// Probability that a picture is perturbed.
pub fn detect(det: &DetectorParams, x: &[f64]) -> Result<f64, RecognizerError> {
    if x.len() != det.net.in_dim() {
        return Err(RecognizerError::Extractor(ExtractorError::DimensionMismatch {
            expected: det.net.in_dim(),
            got: x.len(),
        }));
    }
    let xm = Array2::from_shape_vec((1, x.len()), detector_standardize(x)).unwrap();
    let logit = det.net.forward(&xm)[[0, 0]];
    Ok(nn::sigmoid(logit))
}

/// Confidence gate hardened against targeted collusion: a confident accurate
/// match whose nearest training picture the detector flags as perturbed is
/// overruled and routed to the robust model.
pub fn predict_gated_with_detector(
    accurate: &NNIndex,
    robust: &NNIndex,
    det: &DetectorParams,
    tau: f64,
    x: &[f64],
    k: usize,
) -> Result<Prediction, RecognizerError> {
    let hits = nn_search(accurate, x, k)?;
    if hits[0].0 <= tau {
        let nearest_source = &accurate.entries[hits[0].1].source;
        if detect(det, nearest_source)? <= det.threshold {
            return Ok(Prediction {
                labels: hits.iter().map(|&(_, i)| accurate.entries[i].label).collect(),
                distances: hits.iter().map(|&(d, _)| d).collect(),
                route: Route::Accurate,
            });
        }
    }
    let r = predict_nn(robust, x, k)?;
    Ok(Prediction { route: Route::Robust, ..r })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::{init_extractor, ArchSpec};
    use crate::latentface::{
        gen_population, l2_distance, sample_dataset, sample_pictures, Picture, SplitTag,
    };

    fn toy_extractor(seed: u64) -> ExtractorParams {
        init_extractor(&ArchSpec::new(vec![6, 10, 4], 0, seed)).unwrap()
    }

    #[test]
    fn single_entry_index_always_answers_its_label() {
        let g = toy_extractor(1);
        let pop = gen_population(2, 6, 0.1, 5).unwrap();
        let pics = sample_pictures(&pop, 1, 1, 5).unwrap();
        let idx = build_index(&g, &Dataset::new(pics, SplitTag::Train)).unwrap();
        assert_eq!(idx.len(), 1);
        let q = sample_pictures(&pop, 0, 1, 9).unwrap();
        let p = predict_nn(&idx, &q[0].x, 1).unwrap();
        assert_eq!(p.labels, vec![1]);
    }

    #[test]
    fn duplicate_entries_tie_break_by_lowest_index() {
        let g = toy_extractor(1);
        let x = vec![0.2, 0.4, 0.6, 0.8, 0.1, 0.3];
        let items = vec![
            Picture::clean(x.clone(), 7),
            Picture::clean(x.clone(), 3),
        ];
        let idx = build_index(&g, &Dataset::new(items, SplitTag::Train)).unwrap();
        let p = predict_nn(&idx, &x, 2).unwrap();
        assert_eq!(p.labels, vec![7, 3]);
        assert_eq!(p.distances[0], 0.0);
    }

    #[test]
    fn stored_picture_query_returns_distance_zero() {
        let g = toy_extractor(2);
        let pop = gen_population(3, 6, 0.1, 5).unwrap();
        let data = sample_dataset(&pop, 4, 5, SplitTag::Train).unwrap();
        let idx = build_index(&g, &data).unwrap();
        let p = predict_nn(&idx, &data.items[5].x, 1).unwrap();
        assert_eq!(p.labels[0], data.items[5].label);
        assert!(p.distances[0] <= 1e-12);
    }

    #[test]
    fn k_larger_than_index_errors() {
        let g = toy_extractor(2);
        let pop = gen_population(2, 6, 0.1, 5).unwrap();
        let pics = sample_pictures(&pop, 0, 2, 5).unwrap();
        let idx = build_index(&g, &Dataset::new(pics, SplitTag::Train)).unwrap();
        assert!(matches!(
            predict_nn(&idx, &[0.1; 6], 3),
            Err(RecognizerError::KTooLarge { k: 3, size: 2 })
        ));
    }

    #[test]
    fn agrees_with_brute_force_oracle() {
        // Independent double-loop search in embedding space.
        let g = toy_extractor(3);
        let pop = gen_population(3, 6, 0.1, 11).unwrap();
        let train = sample_dataset(&pop, 6, 1, SplitTag::Train).unwrap();
        let idx = build_index(&g, &train).unwrap();
        let queries = sample_dataset(&pop, 4, 2, SplitTag::Test).unwrap();
        for q in &queries.items {
            let pred = predict_nn(&idx, &q.x, 1).unwrap();
            let qe = g.embed(&q.x).unwrap();
            let mut best = (f64::INFINITY, 0u32);
            for t in &train.items {
                let te = g.embed(&t.x).unwrap();
                let d = l2_distance(&qe, &te);
                if d < best.0 {
                    best = (d, t.label);
                }
            }
            assert_eq!(pred.labels[0], best.1);
            assert!((pred.distances[0] - best.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_dataset_cannot_build_index() {
        let g = toy_extractor(1);
        let empty = Dataset::new(vec![], SplitTag::Train);
        assert!(matches!(build_index(&g, &empty), Err(RecognizerError::EmptyIndex)));
    }

    #[test]
    fn calibrate_nearest_rank_quantile() {
        // Synthetic index and calibration set with controlled distances is
        // hard to arrange through embeddings; instead check the rank rule on
        // a real index: at q=0.02 over 100 points at most 2 exceed τ.
        let g = toy_extractor(4);
        let pop = gen_population(4, 6, 0.1, 7).unwrap();
        let train = sample_dataset(&pop, 10, 1, SplitTag::Train).unwrap();
        let idx = build_index(&g, &train).unwrap();
        let val = sample_dataset(&pop, 25, 2, SplitTag::Test).unwrap();
        let tau = calibrate_threshold(&idx, &val, 0.02).unwrap();
        let above = val
            .items
            .iter()
            .filter(|p| predict_nn(&idx, &p.x, 1).unwrap().distances[0] > tau)
            .count();
        assert!(above as f64 / val.len() as f64 <= 0.02, "{above} routed of {}", val.len());
    }

    #[test]
    fn calibrate_q_near_one_routes_nearly_everything() {
        let g = toy_extractor(4);
        let pop = gen_population(3, 6, 0.1, 7).unwrap();
        let train = sample_dataset(&pop, 5, 1, SplitTag::Train).unwrap();
        let idx = build_index(&g, &train).unwrap();
        let val = sample_dataset(&pop, 10, 2, SplitTag::Test).unwrap();
        let tau = calibrate_threshold(&idx, &val, 0.999).unwrap();
        let min = val
            .items
            .iter()
            .map(|p| predict_nn(&idx, &p.x, 1).unwrap().distances[0])
            .fold(f64::INFINITY, f64::min);
        assert_eq!(tau, min);
    }

    #[test]
    fn gate_routes_by_threshold() {
        let g = toy_extractor(5);
        let pop = gen_population(3, 6, 0.1, 7).unwrap();
        let train = sample_dataset(&pop, 5, 1, SplitTag::Train).unwrap();
        let acc = build_index(&g, &train).unwrap();
        let rob = build_index(&toy_extractor(6), &train).unwrap();
        // Distance-zero query routes accurate.
        let p = predict_gated(&acc, &rob, 1e-9, &train.items[0].x, 1).unwrap();
        assert_eq!(p.route, Route::Accurate);
        // Impossible threshold routes robust.
        let p = predict_gated(&acc, &rob, -1.0, &train.items[0].x, 1).unwrap();
        assert_eq!(p.route, Route::Robust);
    }

    #[test]
    fn top2_reports_both_models() {
        let g = toy_extractor(5);
        let pop = gen_population(3, 6, 0.1, 7).unwrap();
        let train = sample_dataset(&pop, 5, 1, SplitTag::Train).unwrap();
        let acc = build_index(&g, &train).unwrap();
        let rob = build_index(&toy_extractor(6), &train).unwrap();
        let p = predict_top2(&acc, &rob, &train.items[3].x).unwrap();
        assert_eq!(p.labels.len(), 2);
        assert_eq!(p.route, Route::Both);
    }

    #[test]
    fn zero_weight_detector_outputs_half() {
        let det = DetectorParams::zeroed(6);
        let s = detect(&det, &[0.3; 6]).unwrap();
        assert_eq!(s, 0.5);
        let s2 = detect(&det, &[0.9; 6]).unwrap();
        assert_eq!(s2, 0.5);
    }

    #[test]
    fn detector_scoring_is_deterministic() {
        let pop = gen_population(3, 6, 0.1, 7).unwrap();
        let clean = sample_dataset(&pop, 5, 1, SplitTag::Train).unwrap();
        let mut perturbed = clean.clone();
        for p in &mut perturbed.items {
            for v in &mut p.x {
                *v = (*v + 0.06).min(1.0);
            }
        }
        let cfg = TrainConfig { epochs: 5, ..TrainConfig::default() };
        let det = train_detector(&clean, &perturbed, &cfg).unwrap();
        let x = &clean.items[0].x;
        assert_eq!(detect(&det, x).unwrap(), detect(&det, x).unwrap());
    }

    #[test]
    fn detector_rejects_empty_class() {
        let pop = gen_population(3, 6, 0.1, 7).unwrap();
        let clean = sample_dataset(&pop, 5, 1, SplitTag::Train).unwrap();
        let empty = Dataset::new(vec![], SplitTag::Train);
        assert!(matches!(
            train_detector(&clean, &empty, &TrainConfig::default()),
            Err(RecognizerError::MissingClass)
        ));
    }

    #[test]
    fn linear_mode_freezes_the_extractor() {
        let g = toy_extractor(8);
        let pop = gen_population(3, 6, 0.1, 7).unwrap();
        let train = sample_dataset(&pop, 6, 1, SplitTag::Train).unwrap();
        let cfg = TrainConfig { epochs: 3, ..TrainConfig::default() };
        let clf = train_linear_head(&g, &train, HeadMode::Linear, &cfg).unwrap();
        assert_eq!(clf.extractor, g);
        let p = clf.predict(&train.items[0].x, 2).unwrap();
        assert_eq!(p.labels.len(), 2);
        assert!(p.distances[0] <= p.distances[1]);
    }

    #[test]
    fn end_to_end_zero_epochs_keeps_extractor() {
        let g = toy_extractor(8);
        let pop = gen_population(3, 6, 0.1, 7).unwrap();
        let train = sample_dataset(&pop, 6, 1, SplitTag::Train).unwrap();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let clf = train_linear_head(&g, &train, HeadMode::EndToEnd, &cfg).unwrap();
        assert_eq!(clf.extractor, g);
        // Head is the seeded random init.
        let clf2 = train_linear_head(&g, &train, HeadMode::EndToEnd, &cfg).unwrap();
        assert_eq!(clf.head, clf2.head);
    }
}

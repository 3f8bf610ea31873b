//! Synthetic latent-face universe.
//!
//! Identities are Gaussian clusters in `[0,1]^d`: each identity has a mean
//! vector and an isotropic spread, and a "picture" is one clamped draw from
//! that cluster. The unit cube gives ℓ∞ perturbation budgets a pixel-like
//! meaning (`16/255` is a small nudge per coordinate) and keeps every
//! operation cheap enough for seconds-scale experiments.

use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds::{self, domain};

/// Default per-identity cluster spread (σ).
pub const DEFAULT_SIGMA: f64 = 0.05;
/// Resampling budget per identity before `gen_population` declares the
/// requested separation infeasible.
const MAX_RESAMPLE_ATTEMPTS: usize = 1_000;

/// Geometry of the identity-mean distribution.
///
/// Identity means live on a low-dimensional linear manifold inside the
/// latent cube — the analog of natural pictures occupying a thin manifold in
/// pixel space — while per-picture noise is full-dimensional. Off-manifold
/// directions carry no identity signal, which is what lets surrogate-specific
/// adversarial directions exist without moving a picture toward another
/// identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationShape {
    /// Dimension of the mean manifold (clamped to the latent dimension).
    pub mean_dim: usize,
    /// Overall scale of the mean cloud: typical pairwise mean distance is
    /// `mean_spread·√2`.
    pub mean_spread: f64,
    /// Per-identity cluster spread σ.
    pub sigma: f64,
    /// Seed for the manifold basis. Populations sharing a `basis_seed` share
    /// the manifold (the same "world of faces") while drawing disjoint
    /// identities; `None` derives the basis from the population seed.
    pub basis_seed: Option<u64>,
}

impl Default for PopulationShape {
    fn default() -> Self {
        PopulationShape {
            mean_dim: 8,
            mean_spread: 0.4,
            sigma: DEFAULT_SIGMA,
            basis_seed: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("population needs at least 2 identities and 2 dimensions (got {n_ids} ids, d={dim})")]
    BadPopulationShape { n_ids: usize, dim: usize },
    #[error("separation {sep} infeasible: placed {placed} identities, gave up after {attempts} resamples")]
    SeparationInfeasible { sep: f64, placed: usize, attempts: usize },
    #[error("unknown identity {0}")]
    UnknownIdentity(u32),
    #[error("identity {label} has {count} pictures; at least 2 are required to split")]
    TooFewPictures { label: u32, count: usize },
    #[error("split ratio must lie strictly in (0,1), got {0}")]
    BadSplitRatio(f64),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("picture dimension {got} does not match expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("csv parse error at line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// One identity: a Gaussian cluster in latent space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Identity {
    pub id: u32,
    pub mean: Vec<f64>,
    pub spread: f64,
}

/// A fixed population of identities; the data distribution pictures are
/// drawn from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentityPopulation {
    pub identities: Vec<Identity>,
    pub latent_dim: usize,
    pub seed: u64,
}

impl IdentityPopulation {
    pub fn identity(&self, id: u32) -> Result<&Identity, DataError> {
        self.identities
            .iter()
            .find(|i| i.id == id)
            .ok_or(DataError::UnknownIdentity(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.identities.iter().map(|i| i.id)
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }
}

/// Where a picture came from. Metadata only: defender-side operations never
/// branch on it — only metrics and the win-condition oracle may read it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Clean,
    Perturbed { version: String, round: u32 },
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Clean => write!(f, "clean"),
            Provenance::Perturbed { version, round } => write!(f, "perturbed:{version}:{round}"),
        }
    }
}

/// A point in latent face space, with its identity label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Picture {
    pub x: Vec<f64>,
    pub label: u32,
    pub provenance: Provenance,
}

impl Picture {
    pub fn clean(x: Vec<f64>, label: u32) -> Self {
        Picture { x, label, provenance: Provenance::Clean }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitTag {
    Train,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitTag::Train => write!(f, "train"),
            SplitTag::Test => write!(f, "test"),
        }
    }
}

/// A labeled picture collection. Labels ride on the pictures themselves
/// (clean-label attacks never change them).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub items: Vec<Picture>,
    pub split_tag: SplitTag,
}

impl Dataset {
    pub fn new(items: Vec<Picture>, split_tag: SplitTag) -> Self {
        Dataset { items, split_tag }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.items.iter().map(|p| p.label).collect()
    }

    /// Number of classes assuming dense labels `0..=max`.
    pub fn n_classes(&self) -> usize {
        self.items.iter().map(|p| p.label).max().map_or(0, |m| m as usize + 1)
    }

    pub fn dim(&self) -> usize {
        self.items.first().map_or(0, Picture::dim)
    }

    /// Append all items of `other` (the dynamic game's scrape accumulation).
    pub fn extend_from(&mut self, other: &Dataset) {
        self.items.extend(other.items.iter().cloned());
    }
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Generate a population of `n_ids` Gaussian identities in `[0,1]^d` with
/// pairwise mean separation at least `sep`, using the default shape.
pub fn gen_population(
    n_ids: usize,
    d: usize,
    sep: f64,
    seed: u64,
) -> Result<IdentityPopulation, DataError> {
    gen_population_with(n_ids, d, sep, &PopulationShape::default(), seed)
}

/// Full-control population generator. A seeded orthonormal basis spans the
/// mean manifold; candidate means are drawn on it, clamped to the cube
/// interior, and resampled until the pairwise separation constraint holds.
pub fn gen_population_with(
    n_ids: usize,
    d: usize,
    sep: f64,
    shape: &PopulationShape,
    seed: u64,
) -> Result<IdentityPopulation, DataError> {
    if n_ids < 2 || d < 2 {
        return Err(DataError::BadPopulationShape { n_ids, dim: d });
    }
    let k = shape.mean_dim.clamp(1, d);
    let basis_seed = shape.basis_seed.unwrap_or(seed);
    let mut basis_rng =
        ChaCha8Rng::seed_from_u64(seeds::derive(basis_seed, domain::POPULATION_BASIS, 0));
    let basis = orthonormal_basis(d, k, &mut basis_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, domain::POPULATION, 0));
    let coord_scale = shape.mean_spread / (k as f64).sqrt();

    // Best-candidate (blue-noise) placement: per identity, draw a batch of
    // candidates and keep the one farthest from everything placed so far.
    // Means end up evenly repelled instead of merely clearing the floor, so
    // no identity pair sits just above `sep`.
    const CANDIDATES: usize = 32;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(n_ids);
    while means.len() < n_ids {
        let mut accepted = false;
        for attempt in 0..MAX_RESAMPLE_ATTEMPTS / CANDIDATES {
            let mut best: Option<(f64, Vec<f64>)> = None;
            for _ in 0..CANDIDATES {
                let code: Vec<f64> =
                    (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let cand: Vec<f64> = (0..d)
                    .map(|row| {
                        let v: f64 =
                            basis.iter().zip(code.iter()).map(|(col, c)| col[row] * c).sum();
                        (0.5 + coord_scale * v).clamp(0.05, 0.95)
                    })
                    .collect();
                let min_d = means
                    .iter()
                    .map(|m| l2_distance(m, &cand))
                    .fold(f64::INFINITY, f64::min);
                if best.as_ref().is_none_or(|(d0, _)| min_d > *d0) {
                    best = Some((min_d, cand));
                }
            }
            let (min_d, cand) = best.expect("candidate batch is nonempty");
            if min_d >= sep {
                means.push(cand);
                accepted = true;
                break;
            }
            if attempt + 1 == MAX_RESAMPLE_ATTEMPTS / CANDIDATES {
                return Err(DataError::SeparationInfeasible {
                    sep,
                    placed: means.len(),
                    attempts: MAX_RESAMPLE_ATTEMPTS,
                });
            }
        }
        debug_assert!(accepted);
    }
    let identities = means
        .into_iter()
        .enumerate()
        .map(|(i, mean)| Identity { id: i as u32, mean, spread: shape.sigma })
        .collect();
    Ok(IdentityPopulation { identities, latent_dim: d, seed })
}

/// Gram-Schmidt over seeded Gaussian columns: `k` orthonormal vectors in R^d.
fn orthonormal_basis(d: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b.iter()).map(|(a, c)| a * c).sum();
            for (vi, bi) in v.iter_mut().zip(b.iter()) {
                *vi -= dot * bi;
            }
        }
        let norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-9 {
            for vi in &mut v {
                *vi /= norm;
            }
            basis.push(v);
        }
    }
    basis
}

/// Draw `m` clean pictures of one identity: `x = clamp(μ + σ·z, 0, 1)`.
/// Deterministic in `(id, seed)`; the identity id is mixed into the stream so
/// different identities sampled with the same seed do not share noise.
pub fn sample_pictures(
    pop: &IdentityPopulation,
    id: u32,
    m: usize,
    seed: u64,
) -> Result<Vec<Picture>, DataError> {
    let ident = pop.identity(id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, domain::PICTURES, id as u64));
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        let x: Vec<f64> = ident
            .mean
            .iter()
            .map(|&mu| {
                let z: f64 = rng.sample(StandardNormal);
                clamp01(mu + ident.spread * z)
            })
            .collect();
        out.push(Picture::clean(x, id));
    }
    Ok(out)
}

/// Convenience: sample `m` pictures for every identity into one dataset.
pub fn sample_dataset(
    pop: &IdentityPopulation,
    m: usize,
    seed: u64,
    tag: SplitTag,
) -> Result<Dataset, DataError> {
    let mut items = Vec::with_capacity(pop.len() * m);
    for id in pop.ids().collect::<Vec<_>>() {
        items.extend(sample_pictures(pop, id, m, seed)?);
    }
    Ok(Dataset::new(items, tag))
}

/// Per-identity stratified split. The input is canonically pre-sorted by
/// `(label, lexicographic x)` before the seeded shuffle, so the partition is
/// independent of input order.
pub fn split_dataset(
    data: &Dataset,
    ratio: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::BadSplitRatio(ratio));
    }
    if data.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let mut sorted: Vec<&Picture> = data.items.iter().collect();
    sorted.sort_by(|a, b| {
        a.label
            .cmp(&b.label)
            .then_with(|| lex_cmp(&a.x, &b.x))
    });

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let label = sorted[i].label;
        let mut j = i;
        while j < sorted.len() && sorted[j].label == label {
            j += 1;
        }
        let group = &sorted[i..j];
        if group.len() < 2 {
            return Err(DataError::TooFewPictures { label, count: group.len() });
        }
        // round(ratio·m), clamped so both sides stay nonempty.
        let n_train = ((ratio * group.len() as f64).round() as usize).clamp(1, group.len() - 1);
        let mut order: Vec<usize> = (0..group.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(seeds::derive(seed, domain::SPLIT, label as u64));
        order.shuffle(&mut rng);
        for (rank, &k) in order.iter().enumerate() {
            if rank < n_train {
                train.push(group[k].clone());
            } else {
                test.push(group[k].clone());
            }
        }
        i = j;
    }
    Ok((
        Dataset::new(train, SplitTag::Train),
        Dataset::new(test, SplitTag::Test),
    ))
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        let c = x.total_cmp(y);
        if c != std::cmp::Ordering::Equal {
            return c;
        }
    }
    a.len().cmp(&b.len())
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn linf_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// --- CSV serialization ------------------------------------------------------
//
// Line format: `id,label,provenance,x_0,...,x_{d-1}` with a mandatory header.
// Floats print with 9 significant digits. Fields never contain commas, so no
// quoting is needed.

fn fmt_f64(v: f64) -> String {
    format!("{v:.8e}")
}

/// Write a dataset as CSV. `id` is the row index.
pub fn write_csv<W: Write>(data: &Dataset, mut w: W) -> Result<(), DataError> {
    let d = data.dim();
    let mut header = String::from("id,label,provenance");
    for j in 0..d {
        header.push_str(&format!(",x_{j}"));
    }
    writeln!(w, "{header}")?;
    for (i, p) in data.items.iter().enumerate() {
        let mut line = format!("{i},{},{}", p.label, p.provenance);
        for v in &p.x {
            line.push(',');
            line.push_str(&fmt_f64(*v));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

fn parse_provenance(s: &str, line: usize) -> Result<Provenance, DataError> {
    if s == "clean" {
        return Ok(Provenance::Clean);
    }
    let mut parts = s.splitn(3, ':');
    match (parts.next(), parts.next(), parts.next()) {
        (Some("perturbed"), Some(version), Some(round)) => {
            let round = round.parse::<u32>().map_err(|e| DataError::Csv {
                line,
                msg: format!("bad round in provenance `{s}`: {e}"),
            })?;
            Ok(Provenance::Perturbed { version: version.to_string(), round })
        }
        _ => Err(DataError::Csv { line, msg: format!("bad provenance `{s}`") }),
    }
}

/// Read a dataset from CSV written by [`write_csv`].
pub fn read_csv<R: BufRead>(r: R, tag: SplitTag) -> Result<Dataset, DataError> {
    let mut items = Vec::new();
    let mut dim: Option<usize> = None;
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if lineno == 0 {
            if !line.starts_with("id,label,provenance") {
                return Err(DataError::Csv { line: 1, msg: "missing header row".into() });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 4 {
            return Err(DataError::Csv { line: lineno + 1, msg: "too few fields".into() });
        }
        let label = fields[1].parse::<u32>().map_err(|e| DataError::Csv {
            line: lineno + 1,
            msg: format!("bad label: {e}"),
        })?;
        let provenance = parse_provenance(fields[2], lineno + 1)?;
        let x = fields[3..]
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|e| DataError::Csv {
                    line: lineno + 1,
                    msg: format!("bad float `{f}`: {e}"),
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        if let Some(d) = dim {
            if x.len() != d {
                return Err(DataError::DimensionMismatch { expected: d, got: x.len() });
            }
        } else {
            dim = Some(x.len());
        }
        items.push(Picture { x, label, provenance });
    }
    if items.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    Ok(Dataset::new(items, tag))
}

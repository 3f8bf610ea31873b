//! The user/attacker side: clean-label perturbation crafting against
//! surrogate extractor ensembles.
//!
//! Untargeted crafting drives a picture's embeddings *away* from their clean
//! positions on every surrogate (feature-space displacement, the way
//! ensemble-based cloaking tools work); targeted crafting pulls embeddings
//! *toward* supplied centroids. Both run sign-gradient PGD projected onto
//! `{x' : ‖x'−x‖∞ ≤ ε} ∩ [0,1]^d` after every step. Projection is exact: the
//! ℓ∞ budget holds under `≤` comparison, not approximately.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extractor::{ExtractorError, ExtractorParams};
use crate::latentface::{Dataset, Picture, Provenance};
use crate::nn;

/// ℓ∞ budget shared by the default attack versions and the closeness oracle.
pub const DEFAULT_EPSILON: f64 = 16.0 / 255.0;
/// Default PGD iteration count.
pub const DEFAULT_STEPS: usize = 40;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("unknown attack version `{0}`")]
    UnknownVersion(String),
    #[error("attack registry references unknown generation g{0}")]
    UnknownGeneration(u32),
    #[error("config mode does not match the crafting call")]
    ModeMismatch,
    #[error("attack config needs at least one surrogate")]
    NoSurrogates,
    #[error("expected {expected} target centroids, got {got}")]
    CentroidCount { expected: usize, got: usize },
    #[error("target centroid {0} is not a unit vector")]
    BadCentroid(usize),
    #[error("non-finite gradient while crafting")]
    NonFiniteGradient,
    #[error("datasets have mismatched lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Extractor(#[from] ExtractorError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackMode {
    Untargeted,
    /// Collusion-style attack: push embeddings toward another identity's
    /// clean centroids. The centroids travel with the crafting call.
    Targeted,
}

/// A resolved attack: surrogate models plus PGD schedule.
#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub surrogates: Vec<ExtractorParams>,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub mode: AttackMode,
    pub version: String,
    pub seed: u64,
    pub restarts: usize,
}

impl AttackConfig {
    fn validate(&self) -> Result<(), AttackError> {
        if self.surrogates.is_empty() {
            return Err(AttackError::NoSurrogates);
        }
        Ok(())
    }
}

/// Crafted pictures plus per-picture objective traces.
#[derive(Debug, Clone)]
pub struct AttackOutput {
    pub pictures: Vec<Picture>,
    /// Objective value at every PGD iterate, one trace per picture.
    pub traces: Vec<Vec<f64>>,
    pub version: String,
    pub round: u32,
}

/// Hyperparameters for one registered attack version. Surrogates are named
/// by generation tag and resolved against a model zoo at crafting time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackVersionSpec {
    pub surrogate_generations: Vec<u32>,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub restarts: usize,
}

impl AttackVersionSpec {
    pub fn with_surrogates(generations: Vec<u32>) -> Self {
        AttackVersionSpec {
            surrogate_generations: generations,
            epsilon: DEFAULT_EPSILON,
            steps: DEFAULT_STEPS,
            step_size: DEFAULT_EPSILON / 10.0,
            restarts: 0,
        }
    }
}

/// Version-tag → attack-spec registry. The default catalogue mirrors the
/// lineage of the public cloaking tools: `v03` targets the mid-generation
/// model it shipped against, `v10` the newer one it was updated for, and
/// `lowkey-like` an ensemble of early generations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackRegistry {
    versions: BTreeMap<String, AttackVersionSpec>,
}

impl Default for AttackRegistry {
    fn default() -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("v03".to_string(), AttackVersionSpec::with_surrogates(vec![2]));
        versions.insert("v10".to_string(), AttackVersionSpec::with_surrogates(vec![4]));
        versions.insert(
            "lowkey-like".to_string(),
            AttackVersionSpec::with_surrogates(vec![1, 2, 3]),
        );
        AttackRegistry { versions }
    }
}

impl AttackRegistry {
    pub fn insert(&mut self, name: impl Into<String>, spec: AttackVersionSpec) {
        self.versions.insert(name.into(), spec);
    }

    pub fn get(&self, version: &str) -> Result<&AttackVersionSpec, AttackError> {
        self.versions
            .get(version)
            .ok_or_else(|| AttackError::UnknownVersion(version.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.versions.keys().map(String::as_str)
    }

    /// Resolve a version tag into a concrete [`AttackConfig`] against a model
    /// zoo keyed by generation.
    pub fn resolve(
        &self,
        version: &str,
        zoo: &BTreeMap<u32, ExtractorParams>,
        seed: u64,
    ) -> Result<AttackConfig, AttackError> {
        let spec = self.get(version)?;
        let surrogates = spec
            .surrogate_generations
            .iter()
            .map(|g| zoo.get(g).cloned().ok_or(AttackError::UnknownGeneration(*g)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(AttackConfig {
            surrogates,
            epsilon: spec.epsilon,
            steps: spec.steps,
            step_size: spec.step_size,
            mode: AttackMode::Untargeted,
            version: version.to_string(),
            seed,
            restarts: spec.restarts,
        })
    }

    /// Perturb every picture of a dataset with a registered attack version.
    pub fn apply_version(
        &self,
        pictures: &Dataset,
        version: &str,
        round: u32,
        seed: u64,
        zoo: &BTreeMap<u32, ExtractorParams>,
    ) -> Result<AttackOutput, AttackError> {
        let cfg = self.resolve(version, zoo, seed)?;
        apply_config(pictures, &cfg, round)
    }
}

/// Perturb every picture of a dataset with an already-resolved untargeted
/// attack. Per-picture seeds are derived as `cfg.seed ⊕ index`, so a batch
/// can be crafted in any order (or concurrently) with identical results.
pub fn apply_config(
    pictures: &Dataset,
    cfg: &AttackConfig,
    round: u32,
) -> Result<AttackOutput, AttackError> {
    let mut out = Vec::with_capacity(pictures.len());
    let mut traces = Vec::with_capacity(pictures.len());
    for (i, p) in pictures.items.iter().enumerate() {
        let per_pic = AttackConfig { seed: cfg.seed ^ i as u64, ..cfg.clone() };
        let crafted = craft_untargeted(p, &per_pic)?;
        let mut pic = crafted.picture;
        pic.provenance = Provenance::Perturbed { version: cfg.version.clone(), round };
        out.push(pic);
        traces.push(crafted.trace);
    }
    Ok(AttackOutput { pictures: out, traces, version: cfg.version.clone(), round })
}

/// One crafted picture with its objective trace.
#[derive(Debug, Clone)]
pub struct CraftResult {
    pub picture: Picture,
    pub trace: Vec<f64>,
}

/// Maximize `J(x') = Σ_g ‖embed(g,x') − embed(g,x)‖²` within the budget.
/// The returned iterate is the best one seen, so `J(final) ≥ J(initial)`.
pub fn craft_untargeted(x: &Picture, cfg: &AttackConfig) -> Result<CraftResult, AttackError> {
    if cfg.mode != AttackMode::Untargeted {
        return Err(AttackError::ModeMismatch);
    }
    cfg.validate()?;
    let baselines = cfg
        .surrogates
        .iter()
        .map(|g| g.embed(&x.x))
        .collect::<Result<Vec<_>, _>>()?;
    pgd(x, &baselines, Direction::Ascend, cfg)
}

/// Minimize `Σ_g ‖embed(g,x') − c_g‖²` within the budget, one unit-norm
/// centroid per surrogate. The returned iterate is the best one seen, so the
/// objective is non-increasing from first to last.
pub fn craft_targeted(
    x: &Picture,
    target_centroids: &[Vec<f64>],
    cfg: &AttackConfig,
) -> Result<CraftResult, AttackError> {
    if cfg.mode != AttackMode::Targeted {
        return Err(AttackError::ModeMismatch);
    }
    cfg.validate()?;
    if target_centroids.len() != cfg.surrogates.len() {
        return Err(AttackError::CentroidCount {
            expected: cfg.surrogates.len(),
            got: target_centroids.len(),
        });
    }
    for (i, c) in target_centroids.iter().enumerate() {
        let norm: f64 = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(AttackError::BadCentroid(i));
        }
    }
    pgd(x, target_centroids, Direction::Descend, cfg)
}

#[derive(Clone, Copy, PartialEq)]
enum Direction {
    Ascend,
    Descend,
}

/// Objective and input gradient of `Σ_g ‖embed(g,x) − t_g‖²`.
fn objective(
    surrogates: &[ExtractorParams],
    targets: &[Vec<f64>],
    x: &[f64],
) -> Result<(f64, Vec<f64>), AttackError> {
    let xm = Array2::from_shape_vec((1, x.len()), x.to_vec()).unwrap();
    let mut j = 0.0;
    let mut grad = vec![0.0; x.len()];
    for (g, t) in surrogates.iter().zip(targets.iter()) {
        let cache = g.net.forward_cache(&xm);
        let (e, norms) = nn::normalize_rows(cache.output());
        if norms.iter().any(|&n| !(n > 0.0) || !n.is_finite()) {
            return Err(AttackError::Extractor(ExtractorError::DegenerateEmbedding));
        }
        let mut d_e = Array2::zeros(e.raw_dim());
        for k in 0..e.ncols() {
            let diff = e[[0, k]] - t[k];
            j += diff * diff;
            d_e[[0, k]] = 2.0 * diff;
        }
        let d_raw = nn::normalize_rows_backward(&e, &norms, &d_e);
        let (_, d_x) = g.net.backward(&cache, d_raw);
        for (acc, v) in grad.iter_mut().zip(d_x.row(0).iter()) {
            *acc += v;
        }
    }
    if !j.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return Err(AttackError::NonFiniteGradient);
    }
    Ok((j, grad))
}

/// Project one coordinate onto the ℓ∞ ball around `x0`, then the unit box,
/// then re-verify the ball. The nextafter loops absorb the half-ulp the
/// clamp arithmetic can leak, so `|v − x0| ≤ eps` holds exactly afterwards.
fn project_coord(v: f64, x0: f64, eps: f64) -> f64 {
    let mut v = v.clamp(x0 - eps, x0 + eps);
    while v - x0 > eps {
        v = f64::next_down(v);
    }
    while x0 - v > eps {
        v = f64::next_up(v);
    }
    // x0 lies in [0,1], so the box clamp only moves v closer to x0.
    v.clamp(0.0, 1.0)
}

fn pgd(
    x: &Picture,
    targets: &[Vec<f64>],
    dir: Direction,
    cfg: &AttackConfig,
) -> Result<CraftResult, AttackError> {
    let better = |a: f64, b: f64| match dir {
        Direction::Ascend => a > b,
        Direction::Descend => a < b,
    };
    let sign = match dir {
        Direction::Ascend => 1.0,
        Direction::Descend => -1.0,
    };

    let mut best_x: Option<Vec<f64>> = None;
    let mut best_j = match dir {
        Direction::Ascend => f64::NEG_INFINITY,
        Direction::Descend => f64::INFINITY,
    };
    let mut trace = Vec::with_capacity(cfg.steps + 1);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for restart in 0..=cfg.restarts {
        let mut cur: Vec<f64> = if restart == 0 {
            x.x.clone()
        } else {
            x.x.iter()
                .map(|&v| {
                    let d: f64 = rng.random_range(-cfg.epsilon..=cfg.epsilon);
                    project_coord(v + d, v, cfg.epsilon)
                })
                .collect()
        };
        for it in 0..=cfg.steps {
            let (j, grad) = objective(&cfg.surrogates, targets, &cur)?;
            if restart == 0 {
                trace.push(j);
            }
            if best_x.is_none() || better(j, best_j) {
                best_j = j;
                best_x = Some(cur.clone());
            }
            if it == cfg.steps {
                break;
            }
            for (c, (&g, &x0)) in cur.iter_mut().zip(grad.iter().zip(x.x.iter())) {
                *c = project_coord(*c + sign * cfg.step_size * g.signum(), x0, cfg.epsilon);
            }
        }
    }

    let out = best_x.expect("at least one iterate evaluated");
    debug_assert!(out
        .iter()
        .zip(x.x.iter())
        .all(|(a, b)| (a - b).abs() <= cfg.epsilon && (0.0..=1.0).contains(a)));
    Ok(CraftResult {
        picture: Picture { x: out, label: x.label, provenance: x.provenance.clone() },
        trace,
    })
}

/// The closeness oracle `O(X, X_adv)`: true iff every aligned pair satisfies
/// `‖x_adv − x‖∞ ≤ epsilon_oracle` (strict budget, no tolerance).
pub fn oracle_check(
    x: &Dataset,
    x_adv: &Dataset,
    epsilon_oracle: f64,
) -> Result<bool, AttackError> {
    if x.len() != x_adv.len() {
        return Err(AttackError::LengthMismatch(x.len(), x_adv.len()));
    }
    for (a, b) in x.items.iter().zip(x_adv.items.iter()) {
        if a.x.len() != b.x.len() {
            return Err(AttackError::LengthMismatch(a.x.len(), b.x.len()));
        }
        for (&va, &vb) in a.x.iter().zip(b.x.iter()) {
            if (va - vb).abs() > epsilon_oracle {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::{init_extractor, ArchSpec};
    use crate::latentface::{gen_population, sample_pictures, Dataset, SplitTag};

    fn surrogate(seed: u64) -> ExtractorParams {
        init_extractor(&ArchSpec::new(vec![6, 10, 4], 0, seed)).unwrap()
    }

    fn test_picture(seed: u64) -> Picture {
        let pop = gen_population(2, 6, 0.1, seed).unwrap();
        sample_pictures(&pop, 0, 1, seed).unwrap().pop().unwrap()
    }

    fn cfg(eps: f64, steps: usize) -> AttackConfig {
        AttackConfig {
            surrogates: vec![surrogate(3)],
            epsilon: eps,
            steps,
            step_size: eps / 10.0,
            mode: AttackMode::Untargeted,
            version: "test".into(),
            seed: 0,
            restarts: 0,
        }
    }

    #[test]
    fn zero_epsilon_returns_input_bitwise() {
        let x = test_picture(1);
        let out = craft_untargeted(&x, &cfg(0.0, 10)).unwrap();
        assert_eq!(out.picture.x, x.x);
    }

    #[test]
    fn zero_steps_returns_input_bitwise() {
        let x = test_picture(1);
        let out = craft_untargeted(&x, &cfg(0.1, 0)).unwrap();
        assert_eq!(out.picture.x, x.x);
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn objective_increases_and_budget_holds() {
        let x = test_picture(2);
        let c = cfg(16.0 / 255.0, 40);
        let out = craft_untargeted(&x, &c).unwrap();
        let first = out.trace[0];
        let last = *out.trace.last().unwrap();
        assert!(last >= first, "objective decreased: {first} → {last}");
        for (a, b) in out.picture.x.iter().zip(x.x.iter()) {
            assert!((a - b).abs() <= c.epsilon);
            assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn crafting_is_deterministic() {
        let x = test_picture(2);
        let c = cfg(0.05, 20);
        let a = craft_untargeted(&x, &c).unwrap();
        let b = craft_untargeted(&x, &c).unwrap();
        assert_eq!(a.picture.x, b.picture.x);
    }

    #[test]
    fn targeted_objective_is_non_increasing() {
        let x = test_picture(4);
        let g = surrogate(3);
        let other = test_picture(9);
        let centroid = g.embed(&other.x).unwrap();
        let c = AttackConfig { mode: AttackMode::Targeted, ..cfg(16.0 / 255.0, 40) };
        let out = craft_targeted(&x, &[centroid], &c).unwrap();
        assert!(*out.trace.last().unwrap() <= out.trace[0] + 1e-12);
    }

    #[test]
    fn targeted_rejects_non_unit_centroid() {
        let x = test_picture(4);
        let c = AttackConfig { mode: AttackMode::Targeted, ..cfg(0.05, 5) };
        let err = craft_targeted(&x, &[vec![0.5, 0.5, 0.5, 0.0]], &c);
        assert!(matches!(err, Err(AttackError::BadCentroid(0))), "{err:?}");
        let err2 = craft_targeted(&x, &[vec![2.0, 0.0, 0.0, 0.0]], &c);
        assert!(matches!(err2, Err(AttackError::BadCentroid(0))));
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        let x = test_picture(4);
        let c = AttackConfig { mode: AttackMode::Targeted, ..cfg(0.05, 5) };
        assert!(matches!(craft_untargeted(&x, &c), Err(AttackError::ModeMismatch)));
    }

    #[test]
    fn oracle_accepts_identity_and_rejects_overbudget() {
        let pop = gen_population(2, 6, 0.1, 5).unwrap();
        let pics = sample_pictures(&pop, 0, 3, 5).unwrap();
        let d = Dataset::new(pics, SplitTag::Train);
        assert!(oracle_check(&d, &d, 0.0).unwrap());
        let mut shifted = d.clone();
        shifted.items[1].x[2] = (shifted.items[1].x[2] + 0.05 + 1e-6).min(1.0);
        assert!(oracle_check(&d, &shifted, 0.05).unwrap() == false);
        assert!(oracle_check(&d, &shifted, 0.06).unwrap());
    }

    #[test]
    fn oracle_length_mismatch_errors() {
        let pop = gen_population(2, 6, 0.1, 5).unwrap();
        let a = Dataset::new(sample_pictures(&pop, 0, 3, 5).unwrap(), SplitTag::Train);
        let b = Dataset::new(sample_pictures(&pop, 0, 2, 5).unwrap(), SplitTag::Train);
        assert!(matches!(oracle_check(&a, &b, 0.1), Err(AttackError::LengthMismatch(3, 2))));
    }

    #[test]
    fn crafted_outputs_always_pass_the_oracle_at_their_budget() {
        let pop = gen_population(2, 6, 0.1, 5).unwrap();
        let pics = Dataset::new(sample_pictures(&pop, 0, 5, 5).unwrap(), SplitTag::Train);
        let c = cfg(16.0 / 255.0, 25);
        let out = apply_config(&pics, &c, 1).unwrap();
        let adv = Dataset::new(out.pictures, SplitTag::Train);
        assert!(oracle_check(&pics, &adv, c.epsilon).unwrap());
    }

    #[test]
    fn unknown_version_errors() {
        let reg = AttackRegistry::default();
        assert!(matches!(
            reg.get("bogus"),
            Err(AttackError::UnknownVersion(_))
        ));
    }

    #[test]
    fn version_separation() {
        // v03 and v10 target different surrogates, so their outputs on the
        // same pictures must differ somewhere whenever ε > 0 and steps > 0.
        let mut zoo = BTreeMap::new();
        zoo.insert(2, init_extractor(&ArchSpec::new(vec![6, 10, 4], 2, 21)).unwrap());
        zoo.insert(4, init_extractor(&ArchSpec::new(vec![6, 12, 4], 4, 22)).unwrap());
        let reg = AttackRegistry::default();
        let pop = gen_population(2, 6, 0.1, 5).unwrap();
        let pics = Dataset::new(sample_pictures(&pop, 0, 8, 5).unwrap(), SplitTag::Train);
        let a = reg.apply_version(&pics, "v03", 1, 7, &zoo).unwrap();
        let b = reg.apply_version(&pics, "v10", 1, 7, &zoo).unwrap();
        let differing = a
            .pictures
            .iter()
            .zip(b.pictures.iter())
            .filter(|(p, q)| p.x != q.x)
            .count();
        assert!(differing >= 6, "only {differing}/8 pictures differ between versions");
    }

    #[test]
    fn per_picture_seeds_are_order_independent() {
        let mut zoo = BTreeMap::new();
        zoo.insert(2, init_extractor(&ArchSpec::new(vec![6, 10, 4], 2, 21)).unwrap());
        let reg = AttackRegistry::default();
        let pop = gen_population(2, 6, 0.1, 5).unwrap();
        let pics = Dataset::new(sample_pictures(&pop, 0, 4, 5).unwrap(), SplitTag::Train);
        let a = reg.apply_version(&pics, "v03", 1, 7, &zoo).unwrap();
        let b = reg.apply_version(&pics, "v03", 1, 7, &zoo).unwrap();
        for (p, q) in a.pictures.iter().zip(b.pictures.iter()) {
            assert_eq!(p.x, q.x);
        }
    }
}

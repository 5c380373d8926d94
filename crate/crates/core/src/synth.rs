//! Seeded synthetic worlds and brute-force reference implementations.
//!
//! The generator simulates a classifier looking at an object placed in a
//! context. Every class `c` has a unit prototype `u_c` and an assigned
//! context `c mod B`. Per image:
//!
//! * the context is the assigned one with probability `rho` (train split)
//!   or `test_rho` (test split), otherwise a uniformly drawn other context;
//! * the object appearance is `f = normalize(u_c + fg_noise * eps)`, and the
//!   object logit is `fg_j = scale * <f, u_j>`;
//! * the context logit is `ctx_j = scale` for classes assigned to the
//!   image's context and 0 elsewhere;
//! * FULL sees `(1 - lambda) * fg + lambda * ctx`, the object's crop sees
//!   `crop_gain * fg` (the object fills the crop), both plus a small
//!   independent jitter;
//! * distractor candidates are background crops with low objectness whose
//!   logits mix a random direction with the context logit;
//! * some images add an over-zoomed part of the object that the classifier
//!   confidently mistakes for another class, again with low objectness.
//!
//! Each image draws from its own ChaCha stream (`seed`, split, index), so
//! generation is order-independent and can run in parallel.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BBox, Candidate, DatasetManifest, ImageRecord, Metric, View, BOX_POLICY_THRESHOLD};
use crate::embedding::{BoxEmbedding, EmbeddingRecord};
use crate::error::{Error, Result};
use crate::fusion::{FullWeightMode, FusionDecision, SelectedFg, SelectionStrategy, Source};

/// Stream reserved for class prototypes.
const PROTOTYPE_STREAM: u64 = u64::MAX;
/// Standard deviation of the per-view logit jitter.
const VIEW_JITTER: f64 = 0.25;
/// Share of the context logit seen by a distractor (background) crop.
const DISTRACTOR_CONTEXT: f64 = 0.8;
/// Chance that an image also yields an over-zoomed part proposal.
const PART_PROBABILITY: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Context strongly correlated with the class in training, anti-correlated at test time.
    Shortcut,
    /// Context stays informative and the object alone is ambiguous.
    Context,
    /// Context is ignored by the FULL model.
    Neutral,
}

impl std::str::FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "shortcut" => Ok(Regime::Shortcut),
            "context" => Ok(Regime::Context),
            "neutral" => Ok(Regime::Neutral),
            _ => Err(format!("unknown regime `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub num_classes: usize,
    pub num_contexts: usize,
    pub dim: usize,
    /// Norm of the appearance noise relative to the unit prototype.
    pub fg_noise: f64,
    /// P(assigned context) in the training split.
    pub rho: f64,
    /// P(assigned context) in the test split.
    pub test_rho: f64,
    /// Weight of the context logit in the FULL view.
    pub context_weight: f64,
    /// Probability the detector scores the true object confidently.
    pub detector_quality: f64,
    /// Proposals per image before the box policy is applied.
    pub candidates: usize,
    /// Logit scale.
    pub scale: f64,
    /// Extra logit scale of the object in a tight crop, where it covers more pixels.
    pub crop_gain: f64,
    pub images: usize,
    pub seed: u64,
}

impl WorldConfig {
    pub fn preset(regime: Regime, seed: u64, images: usize) -> Self {
        let base = WorldConfig {
            num_classes: 10,
            num_contexts: 5,
            dim: 32,
            fg_noise: 1.0,
            rho: 0.5,
            test_rho: 0.5,
            context_weight: 0.0,
            detector_quality: 0.9,
            candidates: 4,
            scale: 8.0,
            crop_gain: 1.5,
            images,
            seed,
        };
        match regime {
            Regime::Shortcut => WorldConfig {
                rho: 0.95,
                test_rho: 0.05,
                context_weight: 0.7,
                ..base
            },
            Regime::Context => WorldConfig {
                rho: 0.95,
                test_rho: 0.95,
                context_weight: 0.5,
                fg_noise: 2.0,
                ..base
            },
            Regime::Neutral => base,
        }
    }

    pub fn check(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if self.num_classes == 0 || self.num_contexts == 0 || self.dim == 0 || self.candidates == 0 {
            return Err(Error::contract("world sizes must be positive"));
        }
        if !(unit(self.rho) && unit(self.test_rho) && unit(self.context_weight)) {
            return Err(Error::contract("rho, test_rho and context_weight must lie in [0, 1]"));
        }
        if !(self.detector_quality > 0.0 && self.detector_quality <= 1.0) {
            return Err(Error::contract("detector_quality must lie in (0, 1]"));
        }
        if !(self.fg_noise >= 0.0 && self.scale > 0.0 && self.crop_gain > 0.0) {
            return Err(Error::contract(
                "fg_noise must be non-negative, scale and crop_gain positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Generated world: both splits plus the hidden class prototypes.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub train: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
    pub prototypes: Vec<Vec<f64>>,
}

/// Random stream for one item; `(seed, stream)` fully determines it.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit_vectors(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            let mut v = gaussian_vec(rng, dim);
            normalize(&mut v);
            v
        })
        .collect()
}

fn random_box(rng: &mut ChaCha8Rng, min_side: f64, max_side: f64) -> BBox {
    let w = rng.random_range(min_side..max_side);
    let h = rng.random_range(min_side..max_side);
    let x0 = rng.random_range(0.0..(1.0 - w));
    let y0 = rng.random_range(0.0..(1.0 - h));
    BBox::new(x0 as f32, y0 as f32, (x0 + w) as f32, (y0 + h) as f32)
}

fn to_f32(v: impl IntoIterator<Item = f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

fn generate_image(cfg: &WorldConfig, prototypes: &[Vec<f64>], split: Split, i: usize) -> ImageRecord {
    let mut rng = stream_rng(cfg.seed, (split.tag() << 40) | i as u64);
    let c_count = cfg.num_classes;
    let b_count = cfg.num_contexts;

    let class = rng.random_range(0..c_count);
    let assigned = class % b_count;
    let rho = match split {
        Split::Train => cfg.rho,
        Split::Test => cfg.test_rho,
    };
    let common = b_count == 1 || rng.random_bool(rho);
    let context = if common {
        assigned
    } else {
        let other = rng.random_range(0..b_count - 1);
        if other >= assigned {
            other + 1
        } else {
            other
        }
    };

    let noise_sd = cfg.fg_noise / (cfg.dim as f64).sqrt();
    let mut appearance: Vec<f64> = prototypes[class]
        .iter()
        .map(|u| u + noise_sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    normalize(&mut appearance);
    let fg: Vec<f64> = prototypes.iter().map(|u| cfg.scale * dot(&appearance, u)).collect();
    let ctx: Vec<f64> = (0..c_count)
        .map(|j| if j % b_count == context { cfg.scale } else { 0.0 })
        .collect();

    let jittered =
        |mix: f64, gain: f64, rng: &mut ChaCha8Rng| -> Vec<f32> {
            to_f32((0..c_count).map(|j| {
                gain * (1.0 - mix) * fg[j] + mix * ctx[j] + VIEW_JITTER * rng.sample::<f64, _>(StandardNormal)
            }))
        };
    let lambda = cfg.context_weight;
    let full = jittered(lambda, 1.0, &mut rng);
    let object_crop = jittered(0.0, cfg.crop_gain, &mut rng);
    let union_view = jittered(lambda * 0.5, cfg.crop_gain, &mut rng);
    let center_view = jittered(lambda * 0.8, 1.0, &mut rng);

    // proposals: the object plus background distractors
    struct Proposal {
        bbox: BBox,
        objectness: f32,
        logits: Vec<f32>,
    }
    let sharp = rng.random_bool(cfg.detector_quality);
    let object_w = if sharp {
        rng.random_range(0.6..0.98)
    } else {
        rng.random_range(0.21..0.45)
    };
    let object_box = random_box(&mut rng, 0.3, 0.7);
    let mut proposals = vec![Proposal {
        bbox: object_box,
        objectness: object_w as f32,
        logits: object_crop,
    }];
    for k in 1..cfg.candidates {
        if k == 1 && c_count > 1 && rng.random_bool(PART_PROBABILITY) {
            // over-zoomed part of the object that resembles another class
            let other = (class + rng.random_range(1..c_count)) % c_count;
            let mut look: Vec<f64> = prototypes[class]
                .iter()
                .zip(&prototypes[other])
                .map(|(u, v)| 0.5 * u + 0.8 * v)
                .collect();
            normalize(&mut look);
            let logits = to_f32(prototypes.iter().map(|u| {
                cfg.crop_gain * cfg.scale * dot(&look, u) + VIEW_JITTER * rng.sample::<f64, _>(StandardNormal)
            }));
            let fx: f32 = rng.random_range(0.3..0.6);
            let w = object_box.x1 - object_box.x0;
            let h = object_box.y1 - object_box.y0;
            proposals.push(Proposal {
                bbox: BBox::new(
                    object_box.x0,
                    object_box.y0,
                    object_box.x0 + fx * w,
                    object_box.y0 + fx * h,
                ),
                objectness: rng.random_range(0.21f64..0.5) as f32,
                logits,
            });
            continue;
        }
        let w: f64 = rng.random_range(0.02..0.6);
        let mut dir = gaussian_vec(&mut rng, cfg.dim);
        normalize(&mut dir);
        let logits = to_f32(prototypes.iter().zip(&ctx).map(|(u, cx)| {
            (1.0 - DISTRACTOR_CONTEXT) * cfg.crop_gain * cfg.scale * dot(&dir, u)
                + DISTRACTOR_CONTEXT * cx
                + VIEW_JITTER * rng.sample::<f64, _>(StandardNormal)
        }));
        proposals.push(Proposal {
            bbox: random_box(&mut rng, 0.1, 0.4),
            objectness: w as f32,
            logits,
        });
    }
    proposals.sort_by(|a, b| b.objectness.total_cmp(&a.objectness));
    // box policy: the top proposal always, the rest only above the threshold
    let kept: Vec<Proposal> = proposals
        .into_iter()
        .enumerate()
        .filter(|(k, p)| *k == 0 || p.objectness > BOX_POLICY_THRESHOLD)
        .map(|(_, p)| p)
        .collect();

    let mut logits = BTreeMap::new();
    logits.insert(View::Full, full);
    logits.insert(View::Union, union_view);
    logits.insert(View::CenterCrop, center_view);
    let mut candidates = Vec::with_capacity(kept.len());
    for (k, p) in kept.into_iter().enumerate() {
        logits.insert(View::Candidate(k), p.logits);
        candidates.push(Candidate {
            index: k,
            bbox: p.bbox,
            objectness: p.objectness,
        });
    }

    let mut metadata = BTreeMap::new();
    metadata.insert("context".to_string(), format!("ctx{context}"));
    metadata.insert(
        "group".to_string(),
        format!("class{class}-{}", if context == assigned { "common" } else { "rare" }),
    );
    ImageRecord {
        image_id: format!("{}-{i:06}", split.name()),
        candidates,
        logits,
        gt_labels: [class].into(),
        metadata,
    }
}

pub fn world_prototypes(cfg: &WorldConfig) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(cfg.seed, PROTOTYPE_STREAM);
    unit_vectors(&mut rng, cfg.num_classes, cfg.dim)
}

pub fn world_manifest(cfg: &WorldConfig, name: &str) -> DatasetManifest {
    DatasetManifest {
        dataset_name: name.to_owned(),
        class_names: (0..cfg.num_classes).map(|i| format!("class_{i}")).collect(),
        metric: Metric::Total,
        group_field: Some("group".into()),
    }
}

/// Generates `cfg.images` records of one split.
pub fn generate_split(cfg: &WorldConfig, split: Split) -> Result<Vec<ImageRecord>> {
    cfg.check()?;
    let prototypes = world_prototypes(cfg);
    Ok((0..cfg.images)
        .into_par_iter()
        .map(|i| generate_image(cfg, &prototypes, split, i))
        .collect())
}

pub fn generate_world(cfg: &WorldConfig) -> Result<SyntheticDataset> {
    cfg.check()?;
    Ok(SyntheticDataset {
        manifest: world_manifest(cfg, "synthetic"),
        train: generate_split(cfg, Split::Train)?,
        test: generate_split(cfg, Split::Test)?,
        prototypes: world_prototypes(cfg),
    })
}

// ---------------------------------------------------------------------------
// Prototype recovery world
// ---------------------------------------------------------------------------

/// One class of training images for prototype construction.
///
/// A share of the images shows the class object alone (one dominant box,
/// high objectness ratio); the rest are cluttered scenes where the top box
/// also covers a co-occurring object, biasing its embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingWorldConfig {
    pub dim: usize,
    pub images: usize,
    pub single_object_share: f64,
    /// Noise norm of clean top-box embeddings.
    pub clean_noise: f64,
    /// Noise norm of cluttered top-box embeddings.
    pub clutter_noise: f64,
    pub class_id: usize,
    pub seed: u64,
}

impl Default for EmbeddingWorldConfig {
    fn default() -> Self {
        EmbeddingWorldConfig {
            dim: 64,
            images: 120,
            single_object_share: 0.4,
            clean_noise: 0.3,
            clutter_noise: 0.5,
            class_id: 0,
            seed: 0,
        }
    }
}

/// Returns the hidden prototype and the class's embedding records.
pub fn generate_embedding_class(cfg: &EmbeddingWorldConfig) -> (Vec<f64>, Vec<EmbeddingRecord>) {
    let mut rng = stream_rng(cfg.seed, PROTOTYPE_STREAM);
    let mut protos = unit_vectors(&mut rng, 2, cfg.dim);
    let cooccurring = protos.pop().expect("two vectors");
    let prototype = protos.pop().expect("two vectors");

    let embed = |base: &[f64], noise: f64, rng: &mut ChaCha8Rng| -> Vec<f32> {
        let sd = noise / (cfg.dim as f64).sqrt();
        let mut v: Vec<f64> = base
            .iter()
            .map(|x| x + sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        normalize(&mut v);
        to_f32(v)
    };

    let records = (0..cfg.images)
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, i as u64);
            let single = rng.random_bool(cfg.single_object_share);
            let (s1, s2, top, text_top) = if single {
                let s1: f64 = rng.random_range(0.7..0.95);
                let s2: f64 = rng.random_range(0.02..0.15);
                (s1, s2, embed(&prototype, cfg.clean_noise, &mut rng), 0)
            } else {
                let s1: f64 = rng.random_range(0.3..0.7);
                let s2: f64 = s1 * rng.random_range(0.7..1.0);
                let a: f64 = rng.random_range(0.3..0.8);
                let mixed: Vec<f64> = prototype
                    .iter()
                    .zip(&cooccurring)
                    .map(|(u, v)| a * u + (1.0 - a) * v)
                    .collect();
                let text_top = usize::from(rng.random_bool(0.5));
                (s1, s2, embed(&mixed, cfg.clutter_noise, &mut rng), text_top)
            };
            let second = embed(&cooccurring, cfg.clutter_noise, &mut rng);
            EmbeddingRecord {
                image_id: format!("img-{i:05}"),
                class_id: cfg.class_id,
                boxes: vec![
                    BoxEmbedding {
                        index: 0,
                        objectness: s1 as f32,
                        vector: top,
                        bbox: None,
                    },
                    BoxEmbedding {
                        index: 1,
                        objectness: s2 as f32,
                        vector: second,
                        bbox: None,
                    },
                ],
                text_top_index: Some(text_top),
                gt_box: None,
            }
        })
        .collect();
    (prototype, records)
}

// ---------------------------------------------------------------------------
// Random records for oracle comparisons
// ---------------------------------------------------------------------------

/// Arbitrary canonical record with up to `max_candidates` candidates and
/// `2..=max_classes` classes, carrying union and center-crop views.
pub fn random_record(rng: &mut ChaCha8Rng, id: usize, max_candidates: usize, max_classes: usize) -> ImageRecord {
    let classes = rng.random_range(2..=max_classes.max(2));
    let n = rng.random_range(0..=max_candidates);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f32> { (0..classes).map(|_| rng.random_range(-10.0f32..10.0)).collect() };
    let mut logits = BTreeMap::new();
    logits.insert(View::Full, draw(rng));
    logits.insert(View::Union, draw(rng));
    logits.insert(View::CenterCrop, draw(rng));
    let mut weights: Vec<f32> = (0..n).map(|_| rng.random_range(0.01f32..=1.0)).collect();
    weights.sort_by(|a, b| b.total_cmp(a));
    let candidates = weights
        .into_iter()
        .enumerate()
        .map(|(k, w)| {
            logits.insert(View::Candidate(k), draw(rng));
            Candidate {
                index: k,
                bbox: random_box(rng, 0.05, 0.9),
                objectness: w,
            }
        })
        .collect();
    ImageRecord {
        image_id: format!("rand-{id:06}"),
        candidates,
        logits,
        gt_labels: [rng.random_range(0..classes)].into(),
        metadata: BTreeMap::new(),
    }
}

// ---------------------------------------------------------------------------
// Brute-force reference selection and fusion
// ---------------------------------------------------------------------------

/// Class probabilities by direct exponentiation; fine for |logit| well below 700.
fn naive_probs(logits: &[f32]) -> Vec<f64> {
    let exps: Vec<f64> = logits.iter().map(|&l| (l as f64).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `(class, confidence)` by scanning every class pair-wise against all others.
fn naive_top(logits: &[f32]) -> (usize, f64) {
    let probs = naive_probs(logits);
    let class = (0..logits.len())
        .find(|&j| (0..logits.len()).all(|k| logits[j] > logits[k] || (logits[j] == logits[k] && j <= k)))
        .expect("non-empty logits");
    (class, probs[class])
}

fn oracle_view(record: &ImageRecord, view: View) -> Result<(usize, f64)> {
    let logits = record.view(view).ok_or_else(|| match view {
        View::Union | View::CenterCrop => Error::StrategyUnavailable {
            image_id: record.image_id.clone(),
            view: view.to_string(),
        },
        _ => Error::rejected(&record.image_id, format!("missing view {view}")),
    })?;
    Ok(naive_top(logits))
}

/// Evaluates every option of `strategy` and keeps the best one.
pub fn brute_force_select(record: &ImageRecord, strategy: SelectionStrategy) -> Result<Option<SelectedFg>> {
    if record.candidates.is_empty() {
        return Ok(None);
    }
    let w_max = record
        .candidates
        .iter()
        .map(|c| c.objectness as f64)
        .fold(f64::NEG_INFINITY, f64::max);

    let single = |view: View, weight: f64| -> Result<Option<SelectedFg>> {
        let (class_id, p) = oracle_view(record, view)?;
        Ok(Some(SelectedFg {
            candidate_index: None,
            view,
            prediction: crate::data::Prediction {
                class_id,
                confidence: p,
            },
            weighted_score: weight * p,
        }))
    };
    match strategy {
        SelectionStrategy::Union => return single(View::Union, w_max),
        SelectionStrategy::CenterCrop => return single(View::CenterCrop, 1.0),
        _ => {}
    }

    // (primary key, objectness, index, selection)
    let mut options = Vec::new();
    for c in &record.candidates {
        let view = View::Candidate(c.index);
        let (class_id, p) = oracle_view(record, view)?;
        let w = c.objectness as f64;
        let score = if strategy == SelectionStrategy::Unweighted {
            p
        } else {
            w * p
        };
        let key = match strategy {
            SelectionStrategy::MaxArea => c.bbox.area(),
            SelectionStrategy::HighestScore => w,
            _ => score,
        };
        options.push((
            key,
            w,
            c.index,
            SelectedFg {
                candidate_index: Some(c.index),
                view,
                prediction: crate::data::Prediction {
                    class_id,
                    confidence: p,
                },
                weighted_score: score,
            },
        ));
    }
    // best key; ties to higher objectness, then lower index
    options.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)));
    Ok(options.into_iter().next().map(|o| o.3))
}

/// Brute-force selection followed by both fusion branches evaluated explicitly.
pub fn brute_force_fuse(
    record: &ImageRecord,
    strategy: SelectionStrategy,
    mode: FullWeightMode,
) -> Result<FusionDecision> {
    let selected = brute_force_select(record, strategy)?;
    let (full_class, p_full) = oracle_view(record, View::Full)?;
    let w1 = record
        .candidates
        .iter()
        .map(|c| c.objectness as f64)
        .fold(None, |m: Option<f64>, w| Some(m.map_or(w, |m| m.max(w))));
    let weight = match mode {
        FullWeightMode::Unit => 1.0,
        FullWeightMode::TopObjectness => w1.unwrap_or(1.0),
    };
    let full_score = weight * p_full;
    let full_branch = FusionDecision {
        source: Source::Full,
        prediction: crate::data::Prediction {
            class_id: full_class,
            confidence: p_full,
        },
        fg_score: selected.map(|s| s.weighted_score),
        full_score,
    };
    let Some(s) = selected else {
        return Ok(full_branch);
    };
    let fg_branch = FusionDecision {
        source: Source::Fg,
        prediction: s.prediction,
        fg_score: Some(s.weighted_score),
        full_score,
    };
    Ok(if s.weighted_score > full_score {
        fg_branch
    } else {
        full_branch
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{record_to_line, validate_record};

    #[test]
    fn generation_is_deterministic_and_parallel_safe() {
        let cfg = WorldConfig::preset(Regime::Shortcut, 7, 200);
        let a = generate_split(&cfg, Split::Test).unwrap();
        let b = generate_split(&cfg, Split::Test).unwrap();
        let lines = |v: &[ImageRecord]| v.iter().map(record_to_line).collect::<Vec<_>>();
        assert_eq!(lines(&a), lines(&b));
        let one = generate_image(&cfg, &world_prototypes(&cfg), Split::Test, 123);
        assert_eq!(one, a[123]);
    }

    #[test]
    fn records_pass_validation() {
        for regime in [Regime::Shortcut, Regime::Context, Regime::Neutral] {
            let cfg = WorldConfig::preset(regime, 3, 300);
            let world = generate_world(&cfg).unwrap();
            for r in world.train.iter().chain(&world.test) {
                let report = validate_record(r, &world.manifest);
                assert!(report.is_clean(), "{report}");
            }
        }
    }

    #[test]
    fn context_rates_follow_rho() {
        let cfg = WorldConfig {
            images: 4000,
            ..WorldConfig::preset(Regime::Shortcut, 11, 0)
        };
        let share = |split| {
            let recs = generate_split(&cfg, split).unwrap();
            recs.iter().filter(|r| r.metadata["group"].ends_with("common")).count() as f64 / recs.len() as f64
        };
        assert!((share(Split::Train) - 0.95).abs() < 0.02);
        assert!((share(Split::Test) - 0.05).abs() < 0.02);
    }

    #[test]
    fn bad_config_rejected() {
        let mut cfg = WorldConfig::preset(Regime::Neutral, 0, 10);
        cfg.rho = 1.5;
        assert!(generate_world(&cfg).is_err());
        cfg.rho = 0.5;
        cfg.detector_quality = 0.0;
        assert!(generate_world(&cfg).is_err());
    }

    #[test]
    fn embedding_world_is_unit_and_sorted() {
        let (proto, recs) = generate_embedding_class(&EmbeddingWorldConfig::default());
        assert!((proto.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        for r in &recs {
            assert!(r.boxes[0].objectness >= r.boxes[1].objectness);
            for b in &r.boxes {
                let n: f64 = b.vector.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn oracle_edge_cases() {
        let mut rng = stream_rng(1, 1);
        let mut r = random_record(&mut rng, 0, 4, 5);
        r.candidates.clear();
        r.logits.retain(|v, _| !matches!(v, View::Candidate(_)));
        let d = brute_force_fuse(&r, SelectionStrategy::Owmc, FullWeightMode::TopObjectness).unwrap();
        assert_eq!(d.source, Source::Full);
        assert_eq!(d.fg_score, None);
    }

    #[test]
    fn oracle_tie_goes_to_full() {
        let mut logits = BTreeMap::new();
        logits.insert(View::Full, vec![1.0, 0.0, 0.5]);
        logits.insert(View::Candidate(0), vec![0.0, 1.0, 0.5]);
        let r = ImageRecord {
            image_id: "tie".into(),
            candidates: vec![Candidate {
                index: 0,
                bbox: BBox::new(0.1, 0.1, 0.5, 0.5),
                objectness: 0.6,
            }],
            logits,
            gt_labels: [1].into(),
            metadata: BTreeMap::new(),
        };
        let d = brute_force_fuse(&r, SelectionStrategy::Owmc, FullWeightMode::TopObjectness).unwrap();
        assert_eq!(d.fg_score, Some(d.full_score));
        assert_eq!(d.source, Source::Full);
        assert_eq!(d.prediction.class_id, 0);
    }
}

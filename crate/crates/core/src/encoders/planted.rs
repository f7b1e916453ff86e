//! Synthetic videos whose frames hide the text embedding of their event.
//!
//! For event text embedding `t` (unit norm, dim `d`) each frame is
//! `x = √L · M·(t + σ_s·s + ε)` reshaped to an `[L, input_dim]` grid, where
//! `M` has orthonormal columns, `s` is a per-video unit vector and
//! `ε ~ N(0, σ²/d · I)`. The oracle `Mᵀx/√L` recovers `t` up to noise.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::text::{TextConfig, TextEncoder};
use super::EmbeddingMatrix;
use crate::annotations::{Dataset, EventAnnotation, FrameRef, RolePair, VideoAnnotation};
use crate::nn::{gram_schmidt, orthogonal};
use crate::numerics::{ParamStore, Tensor};
use crate::prompting::{positive_prompt, PromptStyle};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedConfig {
    pub videos: usize,
    pub events_per_video: usize,
    pub frames_per_event: usize,
    pub verbs: usize,
    pub nouns_per_role: usize,
    pub movies: usize,
    /// Standard deviation of the expected noise norm.
    pub noise: f64,
    /// Weight of the shared per-video direction.
    pub video_style: f64,
    pub tokens: usize,
    pub input_dim: usize,
    /// Per-token deviation from the shared token map. Small values keep the
    /// token mean a well-conditioned image of `t`; 0 makes all tokens equal.
    pub token_spread: f64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            videos: 32,
            events_per_video: 5,
            frames_per_event: 4,
            verbs: 20,
            nouns_per_role: 16,
            movies: 4,
            noise: 0.1,
            video_style: 0.0,
            tokens: 16,
            input_dim: 64,
            token_spread: 0.5,
        }
    }
}

const VERBS: &[(&str, &str, Option<&str>)] = &[
    ("walk", "walker", None),
    ("speak", "talker", Some("hearer")),
    ("look", "looker", Some("thing looked at")),
    ("open", "opener", Some("thing opened")),
    ("bow", "bower", Some("bowed to")),
    ("smash", "smasher", Some("thing smashed")),
    ("jog", "jogger", None),
    ("push", "pusher", Some("thing pushed")),
    ("hold", "holder", Some("thing held")),
    ("throw", "thrower", Some("thing thrown")),
    ("carry", "carrier", Some("thing carried")),
    ("hug", "hugger", Some("hugged")),
    ("read", "reader", Some("thing read")),
    ("drive", "driver", Some("vehicle")),
    ("kick", "kicker", Some("thing kicked")),
    ("climb", "climber", Some("thing climbed")),
    ("eat", "eater", Some("food")),
    ("point", "pointer", Some("thing pointed at")),
    ("wave", "waver", None),
    ("sit", "sitter", Some("seat")),
];

const PERSONS: &[&str] = &["man", "woman", "boy", "girl", "old man", "young woman", "child", "officer"];
const COLORS: &[&str] = &["red", "blue", "green", "black", "white", "yellow", "gray", "brown"];
const GARMENTS: &[&str] = &["shirt", "jacket", "coat", "dress", "sweater", "hat"];
const OBJECTS: &[&str] = &[
    "door", "box", "car", "book", "ball", "cup", "chair", "bag", "phone", "window", "letter", "bottle",
];
const DIRECTIONS: &[&str] = &[
    "forward", "backward", "left", "right", "up", "down", "toward the door", "away from the camera",
];
const MANNERS: &[&str] = &["slowly", "quickly", "angrily", "calmly", "carefully", "happily", "nervously", "abruptly"];
const SCENES: &[&str] = &["apartment", "auditorium", "airplane", "kitchen", "street", "office", "park", "hotel room"];

/// A generated dataset, its packed frame grids and the oracle map.
#[derive(Clone, Debug)]
pub struct PlantedData {
    pub config: PlantedConfig,
    pub dataset: Dataset,
    /// One row per frame, each a flattened `[tokens, input_dim]` grid.
    pub frames: EmbeddingMatrix,
    /// `M`, `[tokens·input_dim, d]`, orthonormal columns.
    pub mixing: Tensor<f64>,
    pub scale: f64,
}

impl PlantedData {
    /// `Mᵀx/√L` for a flattened grid.
    pub fn oracle_embed(&self, grid: &[f32]) -> Vec<f64> {
        let d = self.mixing.shape()[1];
        let mut z = vec![0.0; d];
        for (i, &x) in grid.iter().enumerate() {
            let row = &self.mixing.data()[i * d..(i + 1) * d];
            for (zj, m) in z.iter_mut().zip(row) {
                *zj += m * x as f64;
            }
        }
        z.iter_mut().for_each(|v| *v /= self.scale);
        z
    }
}

struct Frame {
    verb: &'static str,
    roles: Vec<(String, Vec<String>)>,
}

fn pick_distinct(pool: &[String], k: usize, rng: &mut impl Rng) -> Vec<String> {
    pool.choose_multiple(rng, k.min(pool.len())).cloned().collect()
}

fn vocabulary(cfg: &PlantedConfig, rng: &mut ChaCha8Rng) -> Vec<Frame> {
    let persons: Vec<String> = PERSONS
        .iter()
        .flat_map(|p| COLORS.iter().flat_map(move |c| GARMENTS.iter().map(move |g| format!("{p} in {c} {g}"))))
        .collect();
    let things: Vec<String> = COLORS
        .iter()
        .flat_map(|c| OBJECTS.iter().map(move |o| format!("{c} {o}")))
        .collect();
    let common = |name: &str, words: &[&str]| {
        (name.to_string(), words.iter().map(|w| w.to_string()).collect::<Vec<_>>())
    };
    (0..cfg.verbs)
        .map(|i| {
            let (verb, agent, patient) = VERBS[i % VERBS.len()];
            let mut roles = vec![(agent.to_string(), pick_distinct(&persons, cfg.nouns_per_role, rng))];
            if let Some(p) = patient {
                let pool = if matches!(verb, "speak" | "bow" | "hug") { &persons } else { &things };
                roles.push((p.to_string(), pick_distinct(pool, cfg.nouns_per_role, rng)));
            }
            // Each verb keeps a fixed subset of the common roles.
            for (name, words) in [("direction", DIRECTIONS), ("manner", MANNERS), ("scene", SCENES)] {
                if rng.random_bool(0.5) {
                    roles.push(common(name, &words[..cfg.nouns_per_role.min(words.len())]));
                }
            }
            Frame { verb, roles }
        })
        .collect()
}

/// `[L·input_dim, d]`: every token block is a shared orthonormal map plus
/// `spread`-scaled Gaussian noise, then the whole stack is orthonormalised.
fn token_mixing(tokens: usize, input_dim: usize, d: usize, spread: f64, rng: &mut impl Rng) -> Tensor<f64> {
    if input_dim < d {
        return orthogonal(tokens * input_dim, d, rng);
    }
    let base = orthogonal(input_dim, d, rng);
    let s = spread / (input_dim as f64).sqrt();
    let c: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            (0..tokens * input_dim)
                .map(|r| base.data()[(r % input_dim) * d + j] + s * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    gram_schmidt(c)
}

fn gaussian(d: usize, std: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect()
}

/// Generate a planted dataset. Positive prompts (template style) are unique.
pub fn planted_pair_generator(cfg: &PlantedConfig, text: &TextConfig, seed: u64) -> PlantedData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = vocabulary(cfg, &mut rng);
    let mut store = ParamStore::<f64>::new();
    let encoder = TextEncoder::new(&mut store, text);
    let d = text.dim;
    let big = cfg.tokens * cfg.input_dim;
    let mixing = token_mixing(cfg.tokens, cfg.input_dim, d, cfg.token_spread, &mut rng);
    let scale = (cfg.tokens as f64).sqrt();

    let mut seen = HashSet::new();
    let mut videos = Vec::with_capacity(cfg.videos);
    let mut frames = Vec::new();
    let mut ids = Vec::new();
    for vi in 0..cfg.videos {
        let video_id = format!("v{vi:03}");
        let style = {
            let s = gaussian(d, 1.0, &mut rng);
            let n = s.iter().map(|x| x * x).sum::<f64>().sqrt();
            s.into_iter().map(|x| x / n * cfg.video_style).collect::<Vec<_>>()
        };
        let mut events = Vec::with_capacity(cfg.events_per_video);
        for k in 0..cfg.events_per_video {
            let mut event = None;
            for _ in 0..1000 {
                let f = vocab.choose(&mut rng).expect("at least one verb");
                let roles: Vec<RolePair> = f
                    .roles
                    .iter()
                    .map(|(r, nouns)| RolePair::new(r.as_str(), nouns.choose(&mut rng).expect("nouns").as_str()))
                    .collect();
                let e = EventAnnotation {
                    event_id: format!("{video_id}_e{k}"),
                    verb: f.verb.to_string(),
                    roles,
                    start_s: 2.0 * k as f64,
                    end_s: 2.0 * (k + 1) as f64,
                    frame_refs: vec![],
                    natural_prompt: None,
                };
                let text = positive_prompt(&e, PromptStyle::Template).expect("roles").text;
                if seen.insert(text) {
                    event = Some(e);
                    break;
                }
            }
            let mut e = event.expect("vocabulary too small for unique prompts");
            let prompt = positive_prompt(&e, PromptStyle::Template).expect("roles").text;
            let t = encoder.embed(&store, &prompt, true).expect("text embedding");
            for j in 0..cfg.frames_per_event {
                let eps = gaussian(d, cfg.noise / (d as f64).sqrt(), &mut rng);
                let z: Vec<f64> = (0..d).map(|c| t.data()[c] + style[c] + eps[c]).collect();
                let row = frames.len() / big;
                for r in 0..big {
                    let m = &mixing.data()[r * d..(r + 1) * d];
                    let v: f64 = m.iter().zip(&z).map(|(a, b)| a * b).sum();
                    frames.push((v * scale) as f32);
                }
                ids.push(format!("{}_f{j}", e.event_id));
                e.frame_refs.push(FrameRef::Row(row));
            }
            events.push(e);
        }
        videos.push(VideoAnnotation {
            video_id,
            movie_id: format!("m{}", vi % cfg.movies.max(1)),
            events,
        });
    }
    PlantedData {
        config: cfg.clone(),
        dataset: Dataset::new(videos, "planted").expect("planted data is valid"),
        frames: EmbeddingMatrix::new(big, frames, ids).expect("frame matrix"),
        mixing,
        scale,
    }
}

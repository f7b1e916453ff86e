//! Video annotations with per-event verbs and semantic roles.
//!
//! Files are UTF-8 JSON:
//!
//! ```json
//! {"figannot_version": 1, "split": "train", "videos": [
//!   {"video_id": "v0", "movie_id": "m0", "events": [
//!     {"event_id": "v0_e0", "start_s": 0.0, "end_s": 2.0, "verb": "walk",
//!      "roles": [{"role": "walker", "noun": "man with short hair"}],
//!      "frames": ["emb:0", "emb:1"]}]}]}
//! ```
//!
//! `version` is accepted as an alias of `figannot_version`. An event may carry
//! an optional `natural_prompt` string.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("schema error at {pointer:?}: {message}")]
    Schema { pointer: String, message: String },
    #[error("invalid annotation in video {video_id:?}{}: {message}", event_id.as_ref().map(|e| format!(", event {e:?}")).unwrap_or_default())]
    Validation {
        video_id: String,
        event_id: Option<String>,
        message: String,
    },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn invalid(video: &str, event: Option<&str>, message: impl Into<String>) -> AnnotationError {
    AnnotationError::Validation {
        video_id: video.to_string(),
        event_id: event.map(str::to_string),
        message: message.into(),
    }
}

/// One role of an event and the free-text noun filling it.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RolePair {
    pub role_name: String,
    pub noun: String,
}

impl RolePair {
    pub fn new(role_name: impl Into<String>, noun: impl Into<String>) -> Self {
        Self {
            role_name: normalize_role(&role_name.into()),
            noun: noun.into(),
        }
    }
}

pub fn normalize_role(name: &str) -> String {
    name.trim().to_lowercase()
}

/// Where a frame's features live: a feature file or a row of an embedding matrix.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum FrameRef {
    Path(String),
    Row(usize),
}

impl FrameRef {
    pub fn parse(s: &str) -> Result<Self, String> {
        match s.strip_prefix("emb:") {
            Some(rest) => rest
                .parse()
                .map(FrameRef::Row)
                .map_err(|_| format!("bad embedding handle {s:?}")),
            None if s.is_empty() => Err("empty frame reference".into()),
            None => Ok(FrameRef::Path(s.to_string())),
        }
    }
}

impl fmt::Display for FrameRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FrameRef::Path(p) => f.write_str(p),
            FrameRef::Row(r) => write!(f, "emb:{r}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventAnnotation {
    pub event_id: String,
    pub verb: String,
    pub roles: Vec<RolePair>,
    pub start_s: f64,
    pub end_s: f64,
    pub frame_refs: Vec<FrameRef>,
    pub natural_prompt: Option<String>,
}

impl EventAnnotation {
    pub fn role_names(&self) -> impl Iterator<Item = &str> {
        self.roles.iter().map(|r| r.role_name.as_str())
    }

    fn validate(&self, video_id: &str) -> Result<(), AnnotationError> {
        let ev = Some(self.event_id.as_str());
        if self.event_id.is_empty() {
            return Err(invalid(video_id, None, "empty event_id"));
        }
        if self.verb.trim().is_empty() {
            return Err(invalid(video_id, ev, "empty verb"));
        }
        if self.start_s.partial_cmp(&self.end_s) != Some(std::cmp::Ordering::Less) {
            return Err(invalid(
                video_id,
                ev,
                format!("start_s {} must be before end_s {}", self.start_s, self.end_s),
            ));
        }
        if self.frame_refs.is_empty() {
            return Err(invalid(video_id, ev, "no frames"));
        }
        let mut seen = HashSet::new();
        for r in &self.roles {
            if r.role_name.is_empty() {
                return Err(invalid(video_id, ev, "empty role name"));
            }
            if r.noun.trim().is_empty() {
                return Err(invalid(video_id, ev, format!("empty noun for role {:?}", r.role_name)));
            }
            if !seen.insert(r.role_name.as_str()) {
                return Err(invalid(video_id, ev, format!("duplicate role {:?}", r.role_name)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub movie_id: String,
    pub events: Vec<EventAnnotation>,
}

const TIME_TOL: f64 = 1e-6;

impl VideoAnnotation {
    fn validate(&self) -> Result<(), AnnotationError> {
        if self.video_id.is_empty() {
            return Err(invalid("", None, "empty video_id"));
        }
        let mut ids = HashSet::new();
        for e in &self.events {
            e.validate(&self.video_id)?;
            if !ids.insert(e.event_id.as_str()) {
                return Err(invalid(&self.video_id, Some(&e.event_id), "duplicate event_id"));
            }
        }
        for pair in self.events.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if b.start_s < a.end_s - TIME_TOL {
                return Err(invalid(
                    &self.video_id,
                    Some(&b.event_id),
                    format!("overlaps previous event (starts {} before {})", b.start_s, a.end_s),
                ));
            }
            if b.start_s > a.end_s + TIME_TOL {
                return Err(invalid(
                    &self.video_id,
                    Some(&b.event_id),
                    format!("gap after previous event ({} to {})", a.end_s, b.start_s),
                ));
            }
        }
        Ok(())
    }
}

/// A validated set of videos. Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub videos: Vec<VideoAnnotation>,
    /// Every role observed with each verb.
    pub verb_lexicon: BTreeMap<String, BTreeSet<String>>,
    pub split_tag: String,
}

impl Dataset {
    /// Validate videos and derive the lexicon.
    pub fn new(videos: Vec<VideoAnnotation>, split_tag: impl Into<String>) -> Result<Self, AnnotationError> {
        let mut ids = HashSet::new();
        let mut p = None;
        for v in &videos {
            v.validate()?;
            if !ids.insert(v.video_id.as_str()) {
                return Err(invalid(&v.video_id, None, "duplicate video_id"));
            }
            match p {
                None => p = Some(v.events.len()),
                Some(p) if p != v.events.len() => {
                    return Err(invalid(
                        &v.video_id,
                        None,
                        format!("has {} events but earlier videos have {p}", v.events.len()),
                    ))
                }
                _ => {}
            }
        }
        let mut verb_lexicon: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for e in videos.iter().flat_map(|v| &v.events) {
            let entry = verb_lexicon.entry(e.verb.clone()).or_default();
            entry.extend(e.role_names().map(str::to_string));
        }
        Ok(Self {
            videos,
            verb_lexicon,
            split_tag: split_tag.into(),
        })
    }

    /// Events per video, if there is at least one video.
    pub fn events_per_video(&self) -> Option<usize> {
        self.videos.first().map(|v| v.events.len())
    }

    pub fn events(&self) -> impl Iterator<Item = (&VideoAnnotation, &EventAnnotation)> {
        self.videos
            .iter()
            .flat_map(|v| v.events.iter().map(move |e| (v, e)))
    }

    pub fn num_events(&self) -> usize {
        self.videos.iter().map(|v| v.events.len()).sum()
    }

    pub fn to_json(&self) -> String {
        let raw = RawFile {
            figannot_version: FORMAT_VERSION,
            split: self.split_tag.clone(),
            videos: self.videos.iter().map(RawVideo::from).collect(),
        };
        serde_json::to_string_pretty(&raw).expect("annotations serialize")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AnnotationError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|source| AnnotationError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Per-verb roles ordered by corpus frequency (descending), ties broken
/// lexicographically.
pub fn build_verb_lexicon(dataset: &Dataset) -> BTreeMap<String, Vec<String>> {
    let mut counts: BTreeMap<&str, HashMap<&str, usize>> = BTreeMap::new();
    for (_, e) in dataset.events() {
        let c = counts.entry(e.verb.as_str()).or_default();
        for r in e.role_names() {
            *c.entry(r).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .map(|(verb, c)| {
            let mut roles: Vec<(&str, usize)> = c.into_iter().collect();
            roles.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
            (verb.to_string(), roles.into_iter().map(|(r, _)| r.to_string()).collect())
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct RawFile {
    #[serde(alias = "version")]
    figannot_version: u32,
    split: String,
    videos: Vec<RawVideo>,
}

#[derive(Serialize, Deserialize)]
struct RawVideo {
    video_id: String,
    movie_id: String,
    events: Vec<RawEvent>,
}

#[derive(Serialize, Deserialize)]
struct RawEvent {
    event_id: String,
    start_s: f64,
    end_s: f64,
    verb: String,
    roles: Vec<RawRole>,
    frames: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    natural_prompt: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RawRole {
    role: String,
    noun: String,
}

impl From<&VideoAnnotation> for RawVideo {
    fn from(v: &VideoAnnotation) -> Self {
        RawVideo {
            video_id: v.video_id.clone(),
            movie_id: v.movie_id.clone(),
            events: v
                .events
                .iter()
                .map(|e| RawEvent {
                    event_id: e.event_id.clone(),
                    start_s: e.start_s,
                    end_s: e.end_s,
                    verb: e.verb.clone(),
                    roles: e
                        .roles
                        .iter()
                        .map(|r| RawRole {
                            role: r.role_name.clone(),
                            noun: r.noun.clone(),
                        })
                        .collect(),
                    frames: e.frame_refs.iter().map(|f| f.to_string()).collect(),
                    natural_prompt: e.natural_prompt.clone(),
                })
                .collect(),
        }
    }
}

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    out
}

/// Parse and validate annotations from a JSON string.
pub fn parse_dataset(text: &str) -> Result<Dataset, AnnotationError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let raw: RawFile = serde_path_to_error::deserialize(de).map_err(|e| AnnotationError::Schema {
        pointer: pointer_of(e.path()),
        message: e.into_inner().to_string(),
    })?;
    if raw.figannot_version != FORMAT_VERSION {
        return Err(AnnotationError::Schema {
            pointer: "/figannot_version".into(),
            message: format!("unsupported version {}", raw.figannot_version),
        });
    }
    let mut videos = Vec::with_capacity(raw.videos.len());
    for (vi, rv) in raw.videos.into_iter().enumerate() {
        let mut events = Vec::with_capacity(rv.events.len());
        for (ei, re) in rv.events.into_iter().enumerate() {
            let frame_refs = re
                .frames
                .iter()
                .enumerate()
                .map(|(fi, s)| {
                    FrameRef::parse(s).map_err(|message| AnnotationError::Schema {
                        pointer: format!("/videos/{vi}/events/{ei}/frames/{fi}"),
                        message,
                    })
                })
                .collect::<Result<_, _>>()?;
            events.push(EventAnnotation {
                event_id: re.event_id,
                verb: re.verb,
                roles: re
                    .roles
                    .into_iter()
                    .map(|r| RolePair::new(r.role, r.noun))
                    .collect(),
                start_s: re.start_s,
                end_s: re.end_s,
                frame_refs,
                natural_prompt: re.natural_prompt,
            });
        }
        videos.push(VideoAnnotation {
            video_id: rv.video_id,
            movie_id: rv.movie_id,
            events,
        });
    }
    Dataset::new(videos, raw.split)
}

/// Read, parse and validate an annotation file.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, AnnotationError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| AnnotationError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let text = String::from_utf8(bytes).map_err(|e| AnnotationError::Schema {
        pointer: String::new(),
        message: format!("file is not UTF-8: {e}"),
    })?;
    parse_dataset(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn event(id: &str, t: f64, verb: &str, roles: &[(&str, &str)], frames: usize) -> EventAnnotation {
        EventAnnotation {
            event_id: id.into(),
            verb: verb.into(),
            roles: roles.iter().map(|(r, n)| RolePair::new(*r, *n)).collect(),
            start_s: t,
            end_s: t + 2.0,
            frame_refs: (0..frames).map(FrameRef::Row).collect(),
            natural_prompt: None,
        }
    }

    fn five_event_json() -> String {
        let events: Vec<String> = (0..5)
            .map(|k| {
                let frames: Vec<String> = (0..4).map(|j| format!("\"emb:{}\"", k * 4 + j)).collect();
                format!(
                    r#"{{"event_id":"e{k}","start_s":{},"end_s":{},"verb":"walk","roles":[{{"role":"Walker","noun":"man with short hair"}},{{"role":"scene","noun":"apartment"}}],"frames":[{}]}}"#,
                    2 * k,
                    2 * k + 2,
                    frames.join(",")
                )
            })
            .collect();
        format!(
            r#"{{"figannot_version":1,"split":"train","videos":[{{"video_id":"v0","movie_id":"m0","events":[{}]}}]}}"#,
            events.join(",")
        )
    }

    #[test]
    fn loads_five_events_with_four_frames_each() {
        let ds = parse_dataset(&five_event_json()).unwrap();
        assert_eq!(ds.events_per_video(), Some(5));
        let frames: usize = ds.events().map(|(_, e)| e.frame_refs.len()).sum();
        assert_eq!(frames, 20);
        assert_eq!(ds.videos[0].events[0].roles[0].role_name, "walker");
        assert_eq!(
            ds.verb_lexicon["walk"],
            ["scene", "walker"].iter().map(|s| s.to_string()).collect()
        );
    }

    #[test]
    fn empty_video_list_is_valid() {
        let ds = parse_dataset(r#"{"version":1,"split":"val","videos":[]}"#).unwrap();
        assert!(ds.videos.is_empty());
        assert!(ds.verb_lexicon.is_empty());
    }

    #[test]
    fn duplicate_role_names_the_event() {
        let mut e = event("e7", 0.0, "walk", &[("walker", "a"), ("WALKER ", "b")], 1);
        e.verb = "walk".into();
        let err = Dataset::new(
            vec![VideoAnnotation {
                video_id: "v".into(),
                movie_id: "m".into(),
                events: vec![e],
            }],
            "",
        )
        .unwrap_err();
        match err {
            AnnotationError::Validation { event_id, .. } => assert_eq!(event_id.as_deref(), Some("e7")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schema_errors_carry_a_json_pointer() {
        let text = five_event_json().replacen("\"verb\":\"walk\"", "\"verb\":3", 1);
        match parse_dataset(&text).unwrap_err() {
            AnnotationError::Schema { pointer, .. } => assert_eq!(pointer, "/videos/0/events/0/verb"),
            other => panic!("unexpected {other:?}"),
        }
        let missing = five_event_json().replacen("\"split\":\"train\",", "", 1);
        assert!(matches!(parse_dataset(&missing), Err(AnnotationError::Schema { .. })));
    }

    #[test]
    fn rejects_mixed_event_counts_and_overlaps() {
        let v = |id: &str, n: usize| VideoAnnotation {
            video_id: id.into(),
            movie_id: "m".into(),
            events: (0..n)
                .map(|k| event(&format!("e{k}"), 2.0 * k as f64, "go", &[("goer", "x")], 1))
                .collect(),
        };
        assert!(Dataset::new(vec![v("a", 2), v("b", 3)], "").is_err());
        let mut overlapping = v("c", 2);
        overlapping.events[1].start_s = 1.0;
        assert!(Dataset::new(vec![overlapping], "").is_err());
        let mut backwards = v("d", 1);
        backwards.events[0].end_s = 0.0;
        assert!(Dataset::new(vec![backwards], "").is_err());
    }

    #[test]
    fn lexicon_orders_by_frequency_then_name() {
        // walk: walker ×2, scene ×2, manner ×1; union across differing role sets.
        let v = VideoAnnotation {
            video_id: "v".into(),
            movie_id: "m".into(),
            events: vec![
                event("a", 0.0, "walk", &[("walker", "x"), ("scene", "y")], 1),
                event("b", 2.0, "walk", &[("walker", "x"), ("manner", "z"), ("scene", "q")], 1),
                event("c", 4.0, "speak", &[("talker", "x")], 1),
            ],
        };
        let ds = Dataset::new(vec![v], "t").unwrap();
        let lex = build_verb_lexicon(&ds);
        assert_eq!(lex["walk"], vec!["scene", "walker", "manner"]);
        assert_eq!(lex["speak"], vec!["talker"]);
        assert_eq!(lex.len(), 2);
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        let role = (0usize..5, "[a-z ]{1,12}[a-z]");
        let ev = (
            "[a-z]{1,6}",
            proptest::collection::vec(role, 1..4),
            proptest::collection::vec(0usize..50, 1..4),
            proptest::option::of("[A-Za-z ,.]{1,20}"),
        );
        proptest::collection::vec(
            ("[a-z]{1,3}", proptest::collection::vec(ev.clone(), 2)),
            0..4,
        )
        .prop_map(|videos| {
            let videos = videos
                .into_iter()
                .enumerate()
                .map(|(vi, (movie, evs))| VideoAnnotation {
                    video_id: format!("v{vi}"),
                    movie_id: movie,
                    events: evs
                        .into_iter()
                        .enumerate()
                        .map(|(k, (verb, roles, frames, natural))| {
                            let mut seen = HashSet::new();
                            EventAnnotation {
                                event_id: format!("v{vi}e{k}"),
                                verb,
                                roles: roles
                                    .into_iter()
                                    .filter(|(r, _)| seen.insert(*r))
                                    .map(|(r, n)| RolePair::new(format!("role{r}"), n))
                                    .collect(),
                                start_s: 1.5 * k as f64,
                                end_s: 1.5 * (k + 1) as f64,
                                frame_refs: frames.into_iter().map(FrameRef::Row).collect(),
                                natural_prompt: natural,
                            }
                        })
                        .collect(),
                })
                .collect();
            Dataset::new(videos, "prop").unwrap()
        })
    }

    proptest! {
        #[test]
        fn serialize_then_parse_is_identity(ds in arb_dataset()) {
            let back = parse_dataset(&ds.to_json()).unwrap();
            prop_assert_eq!(back, ds);
        }

        #[test]
        fn lexicon_is_exact_closure(ds in arb_dataset()) {
            let pairs: BTreeSet<(String, String)> = ds
                .events()
                .flat_map(|(_, e)| e.roles.iter().map(move |r| (e.verb.clone(), r.role_name.clone())))
                .collect();
            let from_lex: BTreeSet<(String, String)> = ds
                .verb_lexicon
                .iter()
                .flat_map(|(v, rs)| rs.iter().map(move |r| (v.clone(), r.clone())))
                .collect();
            prop_assert_eq!(pairs, from_lex);
        }
    }
}

//! Hard-negative prompts derived from a positive event.
//!
//! *Verb-role* negatives replace the verb with another verb from the batch
//! and rename the verb-specific roles to the new verb's roles, keeping every
//! noun. *Role-noun* negatives keep the verb and roles and replace some, but
//! never all, of the nouns with nouns seen for the same role in the batch.

use std::collections::{BTreeMap, HashSet};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::annotations::{EventAnnotation, RolePair};
use crate::prompting::{render_slots, Perturbation, PromptKind, PromptRecord, TemplateStyle};

/// Roles shared by most verbs; their names survive a verb swap.
pub const COMMON_ROLES: [&str; 3] = ["direction", "manner", "scene"];

pub fn is_common_role(role: &str) -> bool {
    COMMON_ROLES.contains(&role)
}

#[derive(Debug, Error, PartialEq)]
pub enum NegativeError {
    #[error("event {event_id:?}: no replacement {what} available in the pool")]
    PoolExhausted { event_id: String, what: &'static str },
    #[error("event {event_id:?}: {reason}")]
    Unsatisfiable { event_id: String, reason: String },
    #[error("swap fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("event {event_id:?} has no roles to render")]
    NoRoles { event_id: String },
}

/// A verb with its roles in lexicon order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerbFrame {
    pub verb: String,
    pub roles: Vec<String>,
}

/// Nouns observed per role name, in first-seen order without duplicates.
pub type NounPool = BTreeMap<String, Vec<String>>;

/// Distinct verbs of `events` (first-seen order) with their lexicon roles.
pub fn verb_frames<'a>(
    events: impl IntoIterator<Item = &'a EventAnnotation>,
    lexicon: &BTreeMap<String, Vec<String>>,
) -> Vec<VerbFrame> {
    let mut seen = HashSet::new();
    events
        .into_iter()
        .filter(|e| seen.insert(e.verb.clone()))
        .map(|e| VerbFrame {
            verb: e.verb.clone(),
            roles: lexicon
                .get(&e.verb)
                .cloned()
                .unwrap_or_else(|| e.role_names().map(str::to_string).collect()),
        })
        .collect()
}

pub fn noun_pool<'a>(events: impl IntoIterator<Item = &'a EventAnnotation>) -> NounPool {
    let mut pool = NounPool::new();
    for e in events {
        for r in &e.roles {
            let nouns = pool.entry(r.role_name.clone()).or_default();
            if !nouns.contains(&r.noun) {
                nouns.push(r.noun.clone());
            }
        }
    }
    pool
}

fn render(
    event: &EventAnnotation,
    verb: &str,
    roles: &[RolePair],
    kind: PromptKind,
    log: Vec<Perturbation>,
    style: TemplateStyle,
) -> Result<PromptRecord, NegativeError> {
    let text = render_slots(verb, roles, style).ok_or_else(|| NegativeError::NoRoles {
        event_id: event.event_id.clone(),
    })?;
    Ok(PromptRecord {
        text,
        kind,
        source_event_id: event.event_id.clone(),
        perturbation_log: log,
    })
}

/// Replace the verb with `replacement` and rename roles positionally.
///
/// Non-common roles of the positive take the replacement's non-common roles
/// in lexicon order. Common roles keep their names. Positive roles left over
/// when the replacement has fewer roles keep their original names, so the
/// nouns are never dropped.
pub fn swap_verb(
    event: &EventAnnotation,
    replacement: &VerbFrame,
    style: TemplateStyle,
) -> Result<PromptRecord, NegativeError> {
    let mut new_names = replacement.roles.iter().filter(|r| !is_common_role(r));
    let mut log = vec![Perturbation {
        slot: "verb".into(),
        old: event.verb.clone(),
        new: replacement.verb.clone(),
    }];
    let roles: Vec<RolePair> = event
        .roles
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if is_common_role(&r.role_name) {
                return r.clone();
            }
            match new_names.next() {
                Some(name) => {
                    if *name != r.role_name {
                        log.push(Perturbation {
                            slot: format!("role[{i}]"),
                            old: r.role_name.clone(),
                            new: name.clone(),
                        });
                    }
                    RolePair {
                        role_name: name.clone(),
                        noun: r.noun.clone(),
                    }
                }
                None => r.clone(),
            }
        })
        .collect();
    render(event, &replacement.verb, &roles, PromptKind::HnVerbRole, log, style)
}

/// Replace the nouns at the given role indices.
pub fn swap_nouns(
    event: &EventAnnotation,
    swaps: &[(usize, String)],
    style: TemplateStyle,
) -> Result<PromptRecord, NegativeError> {
    let mut roles = event.roles.clone();
    let mut log = Vec::with_capacity(swaps.len());
    for (i, noun) in swaps {
        let slot = roles.get_mut(*i).ok_or_else(|| NegativeError::Unsatisfiable {
            event_id: event.event_id.clone(),
            reason: format!("role index {i} out of range"),
        })?;
        log.push(Perturbation {
            slot: format!("noun[{i}]"),
            old: std::mem::replace(&mut slot.noun, noun.clone()),
            new: noun.clone(),
        });
    }
    render(event, &event.verb, &roles, PromptKind::HnRoleNoun, log, style)
}

/// `n` verb-role negatives with replacement verbs drawn uniformly without
/// replacement from `batch_verbs`, reshuffling when the pool runs out.
pub fn make_verb_role_negatives(
    event: &EventAnnotation,
    batch_verbs: &[VerbFrame],
    n: usize,
    seed: u64,
    style: TemplateStyle,
) -> Result<Vec<PromptRecord>, NegativeError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut seen = HashSet::new();
    let pool: Vec<&VerbFrame> = batch_verbs
        .iter()
        .filter(|f| f.verb != event.verb && seen.insert(f.verb.as_str()))
        .collect();
    if pool.is_empty() {
        return Err(NegativeError::PoolExhausted {
            event_id: event.event_id.clone(),
            what: "verb",
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<&VerbFrame> = Vec::with_capacity(n);
    while order.len() < n {
        let mut round = pool.clone();
        round.shuffle(&mut rng);
        order.extend(round.into_iter().take(n - order.len()));
    }
    order.into_iter().map(|f| swap_verb(event, f, style)).collect()
}

/// Number of nouns a role-noun negative replaces.
pub fn swap_count(num_roles: usize, swap_fraction: f64) -> usize {
    ((swap_fraction * num_roles as f64).ceil() as usize).clamp(1, num_roles.saturating_sub(1).max(1))
}

/// `n` role-noun negatives, each replacing `ceil(swap_fraction · roles)`
/// nouns (at least one, never all).
pub fn make_role_noun_negatives(
    event: &EventAnnotation,
    noun_pool: &NounPool,
    n: usize,
    swap_fraction: f64,
    seed: u64,
    style: TemplateStyle,
) -> Result<Vec<PromptRecord>, NegativeError> {
    if !(swap_fraction > 0.0 && swap_fraction < 1.0) {
        return Err(NegativeError::InvalidFraction(swap_fraction));
    }
    let num_roles = event.roles.len();
    if num_roles < 2 {
        return Err(NegativeError::Unsatisfiable {
            event_id: event.event_id.clone(),
            reason: format!("cannot swap some but not all of {num_roles} role(s)"),
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let k = swap_count(num_roles, swap_fraction);
    let mut any_role: Vec<&String> = Vec::new();
    for nouns in noun_pool.values() {
        for noun in nouns {
            if !any_role.contains(&noun) {
                any_role.push(noun);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut chosen = sample(&mut rng, num_roles, k).into_vec();
        chosen.sort_unstable();
        let mut swaps = Vec::with_capacity(k);
        for i in chosen {
            let role = &event.roles[i];
            let same_role: Vec<&String> = noun_pool
                .get(&role.role_name)
                .map(|v| v.iter().filter(|x| **x != role.noun).collect())
                .unwrap_or_default();
            let candidates = if same_role.is_empty() {
                // Borrowing another role's noun from the same event is not a real change.
                any_role
                    .iter()
                    .copied()
                    .filter(|x| event.roles.iter().all(|r| r.noun != **x))
                    .collect()
            } else {
                same_role
            };
            if candidates.is_empty() {
                return Err(NegativeError::PoolExhausted {
                    event_id: event.event_id.clone(),
                    what: "noun",
                });
            }
            let pick = candidates[rng.random_range(0..candidates.len())];
            swaps.push((i, pick.clone()));
        }
        out.push(swap_nouns(event, &swaps, style)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::FrameRef;

    fn ev(verb: &str, roles: &[(&str, &str)]) -> EventAnnotation {
        EventAnnotation {
            event_id: "e".into(),
            verb: verb.into(),
            roles: roles.iter().map(|(r, n)| RolePair::new(*r, *n)).collect(),
            start_s: 0.0,
            end_s: 1.0,
            frame_refs: vec![FrameRef::Row(0)],
            natural_prompt: None,
        }
    }

    fn frame(verb: &str, roles: &[&str]) -> VerbFrame {
        VerbFrame {
            verb: verb.into(),
            roles: roles.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn walk() -> EventAnnotation {
        ev(
            "walk",
            &[
                ("walker", "man with short hair wearing collared shirt"),
                ("direction", "forward"),
                ("manner", "slowly"),
                ("scene", "apartment"),
            ],
        )
    }

    #[test]
    fn jog_swap_renames_the_agent_only() {
        let r = swap_verb(&walk(), &frame("jog", &["jogger", "direction", "scene"]), TemplateStyle::Enumerated)
            .unwrap();
        assert!(r
            .text
            .starts_with("In this photo, the action is jog where, the jogger is man with short hair wearing collared shirt, direction is forward"));
        assert_eq!(r.kind, PromptKind::HnVerbRole);
        assert_eq!(r.perturbation_log.len(), 2);
    }

    #[test]
    fn zero_negatives_is_empty() {
        let pool = [frame("jog", &["jogger"])];
        assert!(make_verb_role_negatives(&walk(), &pool, 0, 1, TemplateStyle::Enumerated)
            .unwrap()
            .is_empty());
        assert!(make_role_noun_negatives(&walk(), &NounPool::new(), 0, 0.5, 1, TemplateStyle::Enumerated)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn own_verb_only_pool_is_exhausted() {
        let pool = [frame("walk", &["walker"])];
        assert!(matches!(
            make_verb_role_negatives(&walk(), &pool, 2, 1, TemplateStyle::Enumerated),
            Err(NegativeError::PoolExhausted { .. })
        ));
    }

    #[test]
    fn cycles_with_fresh_shuffles_beyond_pool_size() {
        let pool = [frame("jog", &["jogger"]), frame("run", &["runner"]), frame("walk", &["walker"])];
        let out = make_verb_role_negatives(&walk(), &pool, 5, 3, TemplateStyle::Enumerated).unwrap();
        assert_eq!(out.len(), 5);
        let verbs: Vec<&str> = out.iter().map(|r| r.perturbation_log[0].new.as_str()).collect();
        // each round of two is a permutation of the pool
        let mut first: Vec<&str> = verbs[..2].to_vec();
        first.sort();
        assert_eq!(first, ["jog", "run"]);
        let mut second: Vec<&str> = verbs[2..4].to_vec();
        second.sort();
        assert_eq!(second, ["jog", "run"]);
    }

    #[test]
    fn role_noun_swap_from_example() {
        let r = swap_nouns(
            &walk(),
            &[(0, "guy in white shirt".into()), (3, "auditorium".into())],
            TemplateStyle::Enumerated,
        )
        .unwrap();
        assert_eq!(
            r.text,
            "In this photo, the action is walk where, the walker is guy in white shirt, direction is forward, manner is slowly, and scene of the event is auditorium."
        );
    }

    #[test]
    fn role_noun_uses_same_role_pool_then_falls_back() {
        let e = walk();
        let mut pool = noun_pool([&e]);
        pool.get_mut("walker").unwrap().push("guy in white shirt".into());
        pool.insert("hearer".into(), vec!["woman with scarf".into()]);
        let out = make_role_noun_negatives(&e, &pool, 20, 0.5, 9, TemplateStyle::Enumerated).unwrap();
        for r in &out {
            assert_eq!(r.perturbation_log.len(), 2);
            for p in &r.perturbation_log {
                assert_ne!(p.old, p.new);
                if p.slot == "noun[0]" {
                    assert_eq!(p.new, "guy in white shirt");
                }
            }
        }
    }

    #[test]
    fn single_role_event_cannot_get_role_noun_negatives() {
        let e = ev("bow", &[("bower", "woman")]);
        let pool = noun_pool([&e]);
        assert!(matches!(
            make_role_noun_negatives(&e, &pool, 1, 0.5, 0, TemplateStyle::Enumerated),
            Err(NegativeError::Unsatisfiable { .. })
        ));
    }

    #[test]
    fn empty_noun_pool_is_exhausted() {
        let e = walk();
        let pool = noun_pool([&e]);
        assert!(matches!(
            make_role_noun_negatives(&e, &pool, 1, 0.5, 0, TemplateStyle::Enumerated),
            Err(NegativeError::PoolExhausted { .. })
        ));
        assert!(matches!(
            make_role_noun_negatives(&e, &pool, 1, 1.0, 0, TemplateStyle::Enumerated),
            Err(NegativeError::InvalidFraction(_))
        ));
    }

    #[test]
    fn swap_count_never_swaps_all() {
        assert_eq!(swap_count(4, 0.5), 2);
        assert_eq!(swap_count(2, 0.9), 1);
        assert_eq!(swap_count(3, 0.75), 2);
        assert_eq!(swap_count(4, 0.75), 3);
        assert_eq!(swap_count(5, 0.01), 1);
    }
}

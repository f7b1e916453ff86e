//! Template prompts rendered from event annotations.
//!
//! Two grammars are supported. [`TemplateStyle::Enumerated`] (the default)
//! gives the first role `the <role> is`, middle roles `<role> is` and the
//! last role `and <role> of the event is`:
//!
//! ```text
//! In this photo, the action is walk where, the walker is man with short hair
//! wearing collared shirt, direction is forward, manner is slowly, and scene of
//! the event is apartment.
//! ```
//!
//! [`TemplateStyle::Listed`] repeats `the <role> is` for every role and ends
//! with `the <role> of the event is`, without a conjunction. Single-role
//! events render as `... where, the <role> is <noun>.` in both styles.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{EventAnnotation, RolePair};

pub const PREFIX: &str = "In this photo, the action is ";
const WHERE: &str = " where, ";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("event {event_id:?} has no roles to render")]
    NoRoles { event_id: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Positive,
    HnVerbRole,
    HnRoleNoun,
    ActionOnly,
}

/// One slot changed while deriving a negative from a positive prompt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Perturbation {
    pub slot: String,
    pub old: String,
    pub new: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub text: String,
    pub kind: PromptKind,
    pub source_event_id: String,
    pub perturbation_log: Vec<Perturbation>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateStyle {
    #[default]
    Enumerated,
    Listed,
}

/// Which text to use for an event's positive prompt.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    #[default]
    Template,
    Listed,
    /// The event's `natural_prompt` when present, the template otherwise.
    Natural,
}

impl PromptStyle {
    pub fn template(self) -> TemplateStyle {
        match self {
            PromptStyle::Listed => TemplateStyle::Listed,
            _ => TemplateStyle::Enumerated,
        }
    }
}

/// Render a verb and its roles; `None` if there are no roles.
pub fn render_slots(verb: &str, roles: &[RolePair], style: TemplateStyle) -> Option<String> {
    let n = roles.len();
    if n == 0 {
        return None;
    }
    let mut s = String::with_capacity(64 + roles.iter().map(|r| r.noun.len() + r.role_name.len() + 8).sum::<usize>());
    s.push_str(PREFIX);
    s.push_str(verb);
    s.push_str(WHERE);
    for (i, r) in roles.iter().enumerate() {
        let first = i == 0;
        let last = i + 1 == n && n > 1;
        if !first {
            s.push_str(", ");
        }
        match style {
            TemplateStyle::Enumerated if first => s.push_str("the "),
            TemplateStyle::Enumerated if last => s.push_str("and "),
            TemplateStyle::Enumerated => {}
            TemplateStyle::Listed => s.push_str("the "),
        }
        s.push_str(&r.role_name);
        s.push_str(if last { " of the event is " } else { " is " });
        s.push_str(&r.noun);
    }
    s.push('.');
    Some(s)
}

/// Template prompt for an event in the default grammar.
pub fn render_event_prompt(event: &EventAnnotation) -> Result<PromptRecord, TemplateError> {
    render_event_prompt_with(event, TemplateStyle::Enumerated)
}

pub fn render_event_prompt_with(
    event: &EventAnnotation,
    style: TemplateStyle,
) -> Result<PromptRecord, TemplateError> {
    let text = render_slots(&event.verb, &event.roles, style).ok_or_else(|| TemplateError::NoRoles {
        event_id: event.event_id.clone(),
    })?;
    Ok(PromptRecord {
        text,
        kind: PromptKind::Positive,
        source_event_id: event.event_id.clone(),
        perturbation_log: Vec::new(),
    })
}

/// Positive prompt under a configured style.
pub fn positive_prompt(event: &EventAnnotation, style: PromptStyle) -> Result<PromptRecord, TemplateError> {
    if let (PromptStyle::Natural, Some(text)) = (style, &event.natural_prompt) {
        return Ok(PromptRecord {
            text: text.clone(),
            kind: PromptKind::Positive,
            source_event_id: event.event_id.clone(),
            perturbation_log: Vec::new(),
        });
    }
    render_event_prompt_with(event, style.template())
}

/// `In this photo, the action is <verb>.`
pub fn render_action_prompt(event: &EventAnnotation) -> PromptRecord {
    PromptRecord {
        text: format!("{PREFIX}{}.", event.verb),
        kind: PromptKind::ActionOnly,
        source_event_id: event.event_id.clone(),
        perturbation_log: Vec::new(),
    }
}

/// Recover `(verb, roles)` from a rendered template. Role boundaries are
/// located by `known_roles`, so nouns must not contain `", "` followed by a
/// known role name.
pub fn parse_prompt(text: &str, style: TemplateStyle, known_roles: &[&str]) -> Option<(String, Vec<RolePair>)> {
    let rest = text.strip_prefix(PREFIX)?.strip_suffix('.')?;
    let w = rest.find(WHERE)?;
    let verb = rest[..w].to_string();
    let body = &rest[w + WHERE.len()..];

    let mut roles_by_len: Vec<&str> = known_roles.to_vec();
    roles_by_len.sort_by_key(|r| std::cmp::Reverse(r.len()));

    // Returns (role, header length) when `s` starts with `<lead><role><tail>`.
    let header = |s: &str, lead: &str, tail: &str| -> Option<(String, usize)> {
        let s = s.strip_prefix(lead)?;
        roles_by_len.iter().find_map(|r| {
            s.strip_prefix(r)
                .and_then(|t| t.strip_prefix(tail))
                .map(|_| (r.to_string(), lead.len() + r.len() + tail.len()))
        })
    };
    let (middle_lead, last_lead) = match style {
        TemplateStyle::Enumerated => (", ", ", and "),
        TemplateStyle::Listed => (", the ", ", the "),
    };
    let boundary = |s: &str| -> Option<(String, usize, bool)> {
        header(s, last_lead, " of the event is ")
            .map(|(r, l)| (r, l, true))
            .or_else(|| header(s, middle_lead, " is ").map(|(r, l)| (r, l, false)))
    };

    let (first_role, first_len) = header(body, "the ", " is ")?;
    let mut roles = Vec::new();
    let mut current = first_role;
    let mut pos = first_len;
    let mut saw_last = false;
    loop {
        let next = body[pos..]
            .char_indices()
            .filter(|&(i, c)| c == ',' && body[pos + i..].starts_with(", "))
            .find_map(|(i, _)| boundary(&body[pos + i..]).map(|b| (i, b)));
        match next {
            Some((i, (role, hlen, is_last))) => {
                if saw_last {
                    return None;
                }
                roles.push(RolePair {
                    role_name: current,
                    noun: body[pos..pos + i].to_string(),
                });
                current = role;
                pos += i + hlen;
                saw_last = is_last;
            }
            None => {
                roles.push(RolePair {
                    role_name: current,
                    noun: body[pos..].to_string(),
                });
                break;
            }
        }
    }
    if (roles.len() > 1) != saw_last {
        return None;
    }
    Some((verb, roles))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::FrameRef;

    pub(crate) fn ev(verb: &str, roles: &[(&str, &str)]) -> EventAnnotation {
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

    #[test]
    fn walk_example_is_byte_exact() {
        let e = ev(
            "walk",
            &[
                ("walker", "man with short hair wearing collared shirt"),
                ("direction", "forward"),
                ("manner", "slowly"),
                ("scene", "apartment"),
            ],
        );
        assert_eq!(
            render_event_prompt(&e).unwrap().text,
            "In this photo, the action is walk where, the walker is man with short hair wearing collared shirt, direction is forward, manner is slowly, and scene of the event is apartment."
        );
    }

    #[test]
    fn listed_style_repeats_the_article() {
        let e = ev(
            "speak",
            &[
                ("talker", "man standing in yellow sweatshirt"),
                ("hearer", "woman with scarf"),
                ("manner", "standing in the middle of a full airplane"),
                ("scene", "an airplane"),
            ],
        );
        assert_eq!(
            render_event_prompt_with(&e, TemplateStyle::Listed).unwrap().text,
            "In this photo, the action is speak where, the talker is man standing in yellow sweatshirt, the hearer is woman with scarf, the manner is standing in the middle of a full airplane, the scene of the event is an airplane."
        );
    }

    #[test]
    fn single_role_has_no_conjunction() {
        let e = ev("bow", &[("bower", "woman in glasses")]);
        for style in [TemplateStyle::Enumerated, TemplateStyle::Listed] {
            assert_eq!(
                render_event_prompt_with(&e, style).unwrap().text,
                "In this photo, the action is bow where, the bower is woman in glasses."
            );
        }
    }

    #[test]
    fn zero_roles_is_a_template_error() {
        let e = ev("walk", &[]);
        assert_eq!(render_event_prompt(&e), Err(TemplateError::NoRoles { event_id: "e".into() }));
    }

    #[test]
    fn action_prompt() {
        assert_eq!(render_action_prompt(&ev("walk", &[])).text, "In this photo, the action is walk.");
        let r = render_action_prompt(&ev("bow", &[("a", "b")]));
        assert_eq!(r.text, "In this photo, the action is bow.");
        assert_eq!(r.kind, PromptKind::ActionOnly);
        assert!(r.perturbation_log.is_empty());
    }

    #[test]
    fn natural_prompt_passes_through() {
        let mut e = ev("walk", &[("walker", "man")]);
        e.natural_prompt = Some("In this photo, a man is walking.".into());
        assert_eq!(positive_prompt(&e, PromptStyle::Natural).unwrap().text, "In this photo, a man is walking.");
        assert!(positive_prompt(&e, PromptStyle::Template).unwrap().text.contains("walker"));
        e.natural_prompt = None;
        assert!(positive_prompt(&e, PromptStyle::Natural).unwrap().text.contains("walker"));
    }

    #[test]
    fn parse_inverts_render_with_tricky_nouns() {
        let e = ev(
            "look",
            &[
                ("looker", "man who is tall, thin"),
                ("thing looked at", "a door is open"),
                ("scene", "hall, and the stairs"),
            ],
        );
        let known = ["looker", "thing looked at", "scene"];
        for style in [TemplateStyle::Enumerated, TemplateStyle::Listed] {
            let text = render_event_prompt_with(&e, style).unwrap().text;
            let (verb, roles) = parse_prompt(&text, style, &known).unwrap();
            assert_eq!(verb, "look");
            assert_eq!(roles, e.roles);
        }
    }
}

//! Render an annotated event as a template prompt and derive its hard negatives.
//!
//! cargo run --example prompts_and_negatives [-- annotations.json]

use std::collections::BTreeMap;

use srl_adapt::annotations::{build_verb_lexicon, load_dataset, EventAnnotation, FrameRef, RolePair};
use srl_adapt::negatives::{make_role_noun_negatives, make_verb_role_negatives, noun_pool, verb_frames};
use srl_adapt::prompting::{parse_prompt, render_action_prompt, render_event_prompt_with, TemplateStyle};

fn event(id: &str, verb: &str, roles: &[(&str, &str)]) -> EventAnnotation {
    EventAnnotation {
        event_id: id.into(),
        verb: verb.into(),
        roles: roles.iter().map(|(r, n)| RolePair::new(*r, *n)).collect(),
        start_s: 0.0,
        end_s: 2.0,
        frame_refs: vec![FrameRef::Row(0)],
        natural_prompt: None,
    }
}

fn main() -> anyhow::Result<()> {
    let (events, lexicon) = match std::env::args().nth(1) {
        Some(path) => {
            let ds = load_dataset(&path)?;
            let events: Vec<EventAnnotation> = ds.events().map(|(_, e)| e.clone()).collect();
            (events, build_verb_lexicon(&ds))
        }
        // Without a lexicon each verb keeps the role names it was annotated with.
        None => (
            vec![
                event(
                    "walk",
                    "walk",
                    &[
                        ("walker", "man with short hair wearing collared shirt"),
                        ("direction", "forward"),
                        ("manner", "slowly"),
                        ("scene", "apartment"),
                    ],
                ),
                event("jog", "jog", &[("jogger", "woman in red"), ("direction", "uphill"), ("scene", "park")]),
                event(
                    "talk",
                    "talk",
                    &[("talker", "guy in white shirt"), ("hearer", "old lady"), ("scene", "auditorium")],
                ),
            ],
            BTreeMap::new(),
        ),
    };
    let frames = verb_frames(&events, &lexicon);
    let pool = noun_pool(&events);
    let known: Vec<&str> = events.iter().flat_map(|e| e.role_names()).collect();

    for (i, e) in events.iter().enumerate().take(3) {
        let style = TemplateStyle::Enumerated;
        let pos = render_event_prompt_with(e, style)?;
        println!("positive : {}", pos.text);
        println!("listed   : {}", render_event_prompt_with(e, TemplateStyle::Listed)?.text);
        println!("action   : {}", render_action_prompt(e).text);
        let (verb, roles) = parse_prompt(&pos.text, style, &known).expect("template prompts parse back");
        println!("parsed   : {verb} {:?}", roles.iter().map(|r| (&r.role_name, &r.noun)).collect::<Vec<_>>());
        match make_verb_role_negatives(e, &frames, 2, i as u64, style) {
            Ok(negs) => negs.iter().for_each(|n| println!("verb-role: {}", n.text)),
            Err(err) => println!("verb-role: skipped ({err})"),
        }
        match make_role_noun_negatives(e, &pool, 2, 0.5, i as u64, style) {
            Ok(negs) => {
                for n in negs {
                    let what: Vec<String> = n.perturbation_log.iter().map(|p| format!("{}: {} -> {}", p.slot, p.old, p.new)).collect();
                    println!("role-noun: {}  [{}]", n.text, what.join("; "));
                }
            }
            Err(err) => println!("role-noun: skipped ({err})"),
        }
        println!();
    }
    Ok(())
}

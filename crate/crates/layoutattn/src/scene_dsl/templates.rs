//! Deterministic sentence templates: renders a description's structure back
//! into DSL text. Style choices (verb, preposition wording, clause grouping)
//! are drawn from an RNG seeded by a hash of the structure itself, so the
//! same structure always renders to the same text.

use super::{article, ObjectSpec, RelationKind, RelationSpec, SceneDescription};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const RENDER_VERBS: [&str; 6] = ["is", "sits", "stands", "rests", "is placed", "is positioned"];

const LEFT_PREPS: [&str; 5] = [
    "to the left of",
    "left of",
    "on the left side of",
    "on the left of",
    "at the left of",
];
const RIGHT_PREPS: [&str; 5] = [
    "to the right of",
    "right of",
    "on the right side of",
    "on the right of",
    "at the right of",
];
const ABOVE_PREPS: [&str; 5] = ["above", "high above", "just above", "directly above", "up above"];
const BELOW_PREPS: [&str; 6] = ["below", "beneath", "under", "underneath", "just below", "directly below"];

fn preps_for(kind: RelationKind) -> &'static [&'static str] {
    match kind {
        RelationKind::LeftOf => &LEFT_PREPS,
        RelationKind::RightOf => &RIGHT_PREPS,
        RelationKind::Above => &ABOVE_PREPS,
        RelationKind::Below => &BELOW_PREPS,
    }
}

/// Style seed derived from the structure content only (not the text).
pub(crate) fn structure_hash(objects: &[ObjectSpec], relations: &[RelationSpec]) -> u64 {
    let mut h = Sha256::new();
    for o in objects {
        h.update(o.id.to_le_bytes());
        h.update(o.noun.as_bytes());
        h.update([0]);
        if let Some(c) = &o.color {
            h.update(c.as_bytes());
        }
        h.update([1]);
    }
    h.update([2]);
    for r in relations {
        h.update(r.subject_id.to_le_bytes());
        h.update(r.object_id.to_le_bytes());
        h.update([r.kind as u8]);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Relabels objects to first-use order (relation clauses first, leftovers
/// after), returning the canonical structure the renderer will mention in
/// exactly id order.
pub(crate) fn canonicalize_structure(
    objects: &[ObjectSpec],
    relations: &[RelationSpec],
) -> (Vec<ObjectSpec>, Vec<RelationSpec>) {
    let mut order: Vec<usize> = Vec::with_capacity(objects.len());
    let push = |order: &mut Vec<usize>, id: usize| {
        if !order.contains(&id) {
            order.push(id);
        }
    };
    for r in relations {
        push(&mut order, r.subject_id);
        push(&mut order, r.object_id);
    }
    for o in objects {
        push(&mut order, o.id);
    }
    let new_id = |old: usize| order.iter().position(|&x| x == old).unwrap() + 1;

    let objs = order
        .iter()
        .map(|&old| {
            let o = objects.iter().find(|o| o.id == old).unwrap();
            ObjectSpec { id: new_id(old), noun: o.noun.clone(), color: o.color.clone() }
        })
        .collect();
    let rels = relations
        .iter()
        .map(|r| RelationSpec {
            subject_id: new_id(r.subject_id),
            object_id: new_id(r.object_id),
            kind: r.kind,
        })
        .collect();
    (objs, rels)
}

fn intro_np(o: &ObjectSpec) -> String {
    match &o.color {
        Some(c) => format!("{} {} {}", article(c), c, o.noun),
        None => format!("{} {}", article(&o.noun), o.noun),
    }
}

/// Renders structure to text. Objects must be labeled in first-use order
/// (see `canonicalize_structure`); each object is introduced exactly once
/// with "a"/"an" and referenced afterwards with "the".
pub fn render_structure(
    objects: &[ObjectSpec],
    relations: &[RelationSpec],
    style_seed: u64,
) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(style_seed);
    let mut introduced = vec![false; objects.len()];
    let by_id = |id: usize| objects.iter().find(|o| o.id == id).unwrap();

    let mention = |id: usize, introduced: &mut [bool]| -> String {
        let o = by_id(id);
        let idx = objects.iter().position(|x| x.id == id).unwrap();
        if introduced[idx] {
            format!("the {}", o.noun)
        } else {
            introduced[idx] = true;
            intro_np(o)
        }
    };

    let mut clauses: Vec<String> = Vec::new();
    for r in relations {
        let sub = mention(r.subject_id, &mut introduced);
        let verb = RENDER_VERBS[rng.random_range(0..RENDER_VERBS.len())];
        let preps = preps_for(r.kind);
        let prep = preps[rng.random_range(0..preps.len())];
        let obj = mention(r.object_id, &mut introduced);
        clauses.push(format!("{sub} {verb} {prep} {obj}"));
    }
    for (idx, o) in objects.iter().enumerate() {
        if !introduced[idx] {
            introduced[idx] = true;
            let word = if clauses.is_empty() { "there is" } else { "there is also" };
            clauses.push(format!("{} {}", word, intro_np(o)));
        }
    }

    let mut sentences: Vec<String> = Vec::new();
    let mut i = 0;
    while i < clauses.len() {
        let take = if clauses.len() - i >= 2 && rng.random_range(0..2) == 0 { 2 } else { 1 };
        let sentence = if take == 2 {
            let conn = match rng.random_range(0..4) {
                0 => ", and ",
                1 => " and ",
                2 => ", while ",
                _ => " while ",
            };
            format!("{}{}{}", clauses[i], conn, clauses[i + 1])
        } else {
            clauses[i].clone()
        };
        i += take;
        let mut chars = sentence.chars();
        let capped = match chars.next() {
            Some(c) => c.to_uppercase().collect::<String>() + chars.as_str(),
            None => sentence,
        };
        sentences.push(capped + ".");
    }
    sentences.join(" ")
}

/// Renders a parsed description back to text; a fixed point of
/// parse ∘ render for canonically ordered descriptions.
pub fn render_description(d: &SceneDescription) -> String {
    render_structure(&d.objects, &d.relations, structure_hash(&d.objects, &d.relations))
}

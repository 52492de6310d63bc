//! Controlled scene-description language: parsing, template rendering,
//! contradiction checking, and synthetic dataset generation.

mod dataset;
mod parser;
mod templates;

pub use dataset::{
    default_cells, generate_dataset, read_jsonl, relation_satisfied, write_jsonl, CellConfig,
    DatasetItem, GtCenter,
};
pub use parser::parse_description;
pub use templates::{render_description, render_structure};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DslError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("contradictory relations: {0}")]
    Contradiction(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset line {line}: {message}")]
    Data { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl RelationKind {
    pub const ALL: [RelationKind; 4] = [
        RelationKind::LeftOf,
        RelationKind::RightOf,
        RelationKind::Above,
        RelationKind::Below,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RelationKind::LeftOf => "left_of",
            RelationKind::RightOf => "right_of",
            RelationKind::Above => "above",
            RelationKind::Below => "below",
        }
    }

    /// True if the relation orders the x axis; false for the y axis.
    pub fn horizontal(self) -> bool {
        matches!(self, RelationKind::LeftOf | RelationKind::RightOf)
    }

    /// Relation with subject and object swapped, same geometric meaning.
    pub fn flipped(self) -> RelationKind {
        match self {
            RelationKind::LeftOf => RelationKind::RightOf,
            RelationKind::RightOf => RelationKind::LeftOf,
            RelationKind::Above => RelationKind::Below,
            RelationKind::Below => RelationKind::Above,
        }
    }
}

/// One mentioned object; ids are 1-based in first-mention order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: usize,
    pub noun: String,
    pub color: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSpec {
    pub subject_id: usize,
    pub object_id: usize,
    pub kind: RelationKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SceneDescription {
    pub global_text: String,
    pub objects: Vec<ObjectSpec>,
    pub relations: Vec<RelationSpec>,
    pub local_texts: Vec<String>,
    /// Token index of each object's introducing noun within
    /// `tokenize(global_text)`; parallel to `objects`.
    pub mention_token_positions: Vec<usize>,
}

impl SceneDescription {
    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn object_by_id(&self, id: usize) -> Option<&ObjectSpec> {
        self.objects.iter().find(|o| o.id == id)
    }
}

/// "A photo of a red car" / "A photo of a dog".
pub fn render_local_description(obj: &ObjectSpec) -> String {
    match &obj.color {
        Some(c) => format!("A photo of {} {} {}", article(c), c, obj.noun),
        None => format!("A photo of {} {}", article(&obj.noun), obj.noun),
    }
}

/// "a" or "an" for the following word.
pub(crate) fn article(next_word: &str) -> &'static str {
    match next_word.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// True iff the horizontal-order and vertical-order digraphs are both
/// acyclic, i.e. the relation set is satisfiable.
pub fn check_contradictions(relations: &[RelationSpec]) -> bool {
    !find_axis_cycle(relations, true) && !find_axis_cycle(relations, false)
}

/// Cycle test on one axis after normalizing each relation to a
/// "comes-before" edge (LeftOf/Above keep direction, RightOf/Below flip).
fn find_axis_cycle(relations: &[RelationSpec], horizontal: bool) -> bool {
    let mut ids: Vec<usize> = relations
        .iter()
        .flat_map(|r| [r.subject_id, r.object_id])
        .collect();
    ids.sort_unstable();
    ids.dedup();
    let idx = |id: usize| ids.binary_search(&id).unwrap();

    let mut adj = vec![Vec::new(); ids.len()];
    for r in relations.iter().filter(|r| r.kind.horizontal() == horizontal) {
        let (from, to) = match r.kind {
            RelationKind::LeftOf | RelationKind::Above => (r.subject_id, r.object_id),
            RelationKind::RightOf | RelationKind::Below => (r.object_id, r.subject_id),
        };
        adj[idx(from)].push(idx(to));
    }

    // 0 = unvisited, 1 = on stack, 2 = done.
    let mut state = vec![0u8; ids.len()];
    for start in 0..ids.len() {
        if state[start] != 0 {
            continue;
        }
        // Iterative DFS; stack holds (node, next child index).
        let mut stack = vec![(start, 0usize)];
        state[start] = 1;
        while let Some(&mut (node, ref mut child)) = stack.last_mut() {
            if *child < adj[node].len() {
                let next = adj[node][*child];
                *child += 1;
                match state[next] {
                    0 => {
                        state[next] = 1;
                        stack.push((next, 0));
                    }
                    1 => return true,
                    _ => {}
                }
            } else {
                state[node] = 2;
                stack.pop();
            }
        }
    }
    false
}

//! Synthetic benchmark generation: samples object/relation structures per
//! (N, M) cell, renders them through the template bank, and attaches
//! ground-truth layouts found by constraint-respecting rejection sampling.

use super::templates::{canonicalize_structure, render_structure, structure_hash};
use super::{
    check_contradictions, parse_description, DslError, ObjectSpec, RelationKind, RelationSpec,
    SceneDescription,
};
use crate::{derive_seed, vocab};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

/// Sampling bounds for ground-truth centers.
const CENTER_LO: f64 = 0.1;
const CENTER_HI: f64 = 0.9;
/// Related centers must differ by at least this much on the relation axis.
const RELATION_MARGIN: f64 = 0.15;
/// Every pair of centers keeps at least this Euclidean distance, so scenes
/// painted from the layout stay separable blobs.
const MIN_PAIR_DISTANCE: f64 = 0.22;

const MAX_LAYOUT_ATTEMPTS: usize = 5_000_000;
const MAX_RELATION_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellConfig {
    pub n_objects: usize,
    pub n_relations: usize,
    pub count: usize,
}

impl CellConfig {
    pub fn new(n_objects: usize, n_relations: usize, count: usize) -> Self {
        CellConfig { n_objects, n_relations, count }
    }
}

/// The benchmark's default cell table: 500 descriptions.
pub fn default_cells() -> Vec<CellConfig> {
    vec![
        CellConfig::new(2, 1, 200),
        CellConfig::new(3, 1, 50),
        CellConfig::new(3, 2, 50),
        CellConfig::new(4, 2, 50),
        CellConfig::new(4, 3, 50),
        CellConfig::new(5, 3, 50),
        CellConfig::new(5, 4, 50),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtCenter {
    pub id: usize,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub desc: SceneDescription,
    pub layout: Option<Vec<GtCenter>>,
}

impl DatasetItem {
    pub fn cell(&self) -> (usize, usize) {
        (self.desc.objects.len(), self.desc.relations.len())
    }
}

/// Checks one relation against centers indexed by object id.
pub fn relation_satisfied(
    rel: &RelationSpec,
    center_of: impl Fn(usize) -> (f64, f64),
) -> bool {
    let (sx, sy) = center_of(rel.subject_id);
    let (ox, oy) = center_of(rel.object_id);
    match rel.kind {
        RelationKind::LeftOf => sx < ox,
        RelationKind::RightOf => sx > ox,
        RelationKind::Above => sy < oy,
        RelationKind::Below => sy > oy,
    }
}

fn sample_structure(
    n: usize,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<ObjectSpec>, Vec<RelationSpec>) {
    // Nouns come from one super-category; cells with N exceeding the
    // category size (N=5 over categories of 4) spill into the rest of the
    // vocabulary, still without replacement.
    let cat = rng.random_range(0..vocab::SUPER_CATEGORIES.len());
    let mut pool: Vec<&str> = vocab::SUPER_CATEGORIES[cat].1.to_vec();
    pool.shuffle(rng);
    let mut nouns: Vec<&str> = pool.into_iter().take(n).collect();
    if nouns.len() < n {
        let mut rest: Vec<&str> = vocab::nouns().filter(|x| !nouns.contains(x)).collect();
        rest.shuffle(rng);
        nouns.extend(rest.into_iter().take(n - nouns.len()));
    }

    let objects: Vec<ObjectSpec> = nouns
        .iter()
        .enumerate()
        .map(|(i, noun)| {
            let color = if rng.random::<f64>() < 0.5 {
                Some(vocab::COLORS[rng.random_range(0..vocab::COLOR_COUNT)].to_string())
            } else {
                None
            };
            ObjectSpec { id: i + 1, noun: noun.to_string(), color }
        })
        .collect();

    let mut all_pairs: Vec<(usize, usize)> = (1..=n)
        .flat_map(|a| ((a + 1)..=n).map(move |b| (a, b)))
        .collect();
    for attempt in 0.. {
        assert!(attempt < MAX_RELATION_ATTEMPTS, "relation sampling stuck for N={n} M={m}");
        all_pairs.shuffle(rng);
        let relations: Vec<RelationSpec> = all_pairs[..m]
            .iter()
            .map(|&(a, b)| RelationSpec {
                subject_id: a,
                object_id: b,
                kind: RelationKind::ALL[rng.random_range(0..4)],
            })
            .collect();
        if check_contradictions(&relations) {
            return (objects, relations);
        }
    }
    unreachable!()
}

fn sample_layout_for(
    objects: &[ObjectSpec],
    relations: &[RelationSpec],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<GtCenter>, DslError> {
    let n = objects.len();
    for _ in 0..MAX_LAYOUT_ATTEMPTS {
        let centers: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                (
                    CENTER_LO + (CENTER_HI - CENTER_LO) * rng.random::<f64>(),
                    CENTER_LO + (CENTER_HI - CENTER_LO) * rng.random::<f64>(),
                )
            })
            .collect();
        let margin_ok = relations.iter().all(|r| {
            let (sx, sy) = centers[r.subject_id - 1];
            let (ox, oy) = centers[r.object_id - 1];
            match r.kind {
                RelationKind::LeftOf => ox - sx >= RELATION_MARGIN,
                RelationKind::RightOf => sx - ox >= RELATION_MARGIN,
                RelationKind::Above => oy - sy >= RELATION_MARGIN,
                RelationKind::Below => sy - oy >= RELATION_MARGIN,
            }
        });
        let spread_ok = (0..n).all(|a| {
            ((a + 1)..n).all(|b| {
                let dx = centers[a].0 - centers[b].0;
                let dy = centers[a].1 - centers[b].1;
                (dx * dx + dy * dy).sqrt() >= MIN_PAIR_DISTANCE
            })
        });
        if margin_ok && spread_ok {
            return Ok(objects
                .iter()
                .zip(&centers)
                .map(|(o, &(cx, cy))| GtCenter { id: o.id, cx, cy })
                .collect());
        }
    }
    Err(DslError::Config(format!(
        "no layout satisfies the constraints for N={n} with {} relations",
        relations.len()
    )))
}

/// Generates the dataset cell by cell; fully deterministic given `seed`.
/// When `with_layout` is set every item carries a ground-truth layout.
pub fn generate_dataset(
    cells: &[CellConfig],
    seed: u64,
    with_layout: bool,
) -> Result<Vec<DatasetItem>, DslError> {
    for c in cells {
        if !(2..=5).contains(&c.n_objects)
            || c.n_relations < 1
            || c.n_relations > c.n_objects - 1
        {
            return Err(DslError::Config(format!(
                "infeasible cell N={} M={}",
                c.n_objects, c.n_relations
            )));
        }
    }

    let mut items = Vec::new();
    for cell in cells {
        let cell_tag = format!("{}:{}", cell.n_objects, cell.n_relations);
        for i in 0..cell.count {
            let item_seed = derive_seed(seed, &["cell", &cell_tag, "item", &i.to_string()]);
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed);

            let (objects, relations) = sample_structure(cell.n_objects, cell.n_relations, &mut rng);
            let (objects, relations) = canonicalize_structure(&objects, &relations);
            let text =
                render_structure(&objects, &relations, structure_hash(&objects, &relations));
            let desc = parse_description(&text).unwrap_or_else(|e| {
                panic!("generated text must parse: {text:?}: {e}");
            });
            debug_assert_eq!(desc.objects, objects);
            debug_assert_eq!(desc.relations, relations);

            let layout = if with_layout {
                Some(sample_layout_for(&desc.objects, &desc.relations, &mut rng)?)
            } else {
                None
            };
            items.push(DatasetItem { desc, layout });
        }
    }
    Ok(items)
}

/// On-disk JSONL line; the schema is stable, everything else derives from it.
#[derive(Serialize, Deserialize)]
struct LineRecord {
    text: String,
    objects: Vec<LineObject>,
    relations: Vec<LineRelation>,
    layout: Option<Vec<GtCenter>>,
}

#[derive(Serialize, Deserialize)]
struct LineObject {
    id: usize,
    noun: String,
    color: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct LineRelation {
    sub: usize,
    obj: usize,
    kind: RelationKind,
}

pub fn write_jsonl(items: &[DatasetItem], mut w: impl Write) -> Result<(), DslError> {
    for item in items {
        let rec = LineRecord {
            text: item.desc.global_text.clone(),
            objects: item
                .desc
                .objects
                .iter()
                .map(|o| LineObject { id: o.id, noun: o.noun.clone(), color: o.color.clone() })
                .collect(),
            relations: item
                .desc
                .relations
                .iter()
                .map(|r| LineRelation { sub: r.subject_id, obj: r.object_id, kind: r.kind })
                .collect(),
            layout: item.layout.clone(),
        };
        serde_json::to_writer(&mut w, &rec)
            .map_err(|e| DslError::Config(format!("serialize: {e}")))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a dataset, reparsing each line's text and cross-checking it against
/// the stored structure so corrupt or hand-mangled files fail loudly.
pub fn read_jsonl(r: impl BufRead) -> Result<Vec<DatasetItem>, DslError> {
    let mut items = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LineRecord = serde_json::from_str(&line)
            .map_err(|e| DslError::Data { line: lineno, message: format!("bad JSON: {e}") })?;
        let desc = parse_description(&rec.text)
            .map_err(|e| DslError::Data { line: lineno, message: format!("bad text: {e}") })?;

        let stored_objs: Vec<(usize, &str, Option<&str>)> =
            rec.objects.iter().map(|o| (o.id, o.noun.as_str(), o.color.as_deref())).collect();
        let parsed_objs: Vec<(usize, &str, Option<&str>)> =
            desc.objects.iter().map(|o| (o.id, o.noun.as_str(), o.color.as_deref())).collect();
        if stored_objs != parsed_objs {
            return Err(DslError::Data {
                line: lineno,
                message: "objects do not match the text".into(),
            });
        }
        let stored_rels: Vec<(usize, usize, RelationKind)> =
            rec.relations.iter().map(|r| (r.sub, r.obj, r.kind)).collect();
        let parsed_rels: Vec<(usize, usize, RelationKind)> = desc
            .relations
            .iter()
            .map(|r| (r.subject_id, r.object_id, r.kind))
            .collect();
        if stored_rels != parsed_rels {
            return Err(DslError::Data {
                line: lineno,
                message: "relations do not match the text".into(),
            });
        }
        if let Some(layout) = &rec.layout {
            let mut ids: Vec<usize> = layout.iter().map(|c| c.id).collect();
            ids.sort_unstable();
            let mut want: Vec<usize> = desc.objects.iter().map(|o| o.id).collect();
            want.sort_unstable();
            if ids != want {
                return Err(DslError::Data {
                    line: lineno,
                    message: "layout ids do not match the objects".into(),
                });
            }
        }
        items.push(DatasetItem { desc, layout: rec.layout });
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_cells_sum_to_500() {
        assert_eq!(default_cells().iter().map(|c| c.count).sum::<usize>(), 500);
    }

    #[test]
    fn cell_counts_exact() {
        let cells = vec![CellConfig::new(2, 1, 3), CellConfig::new(4, 3, 2)];
        let items = generate_dataset(&cells, 11, true).unwrap();
        assert_eq!(items.len(), 5);
        assert!(items[..3].iter().all(|d| d.cell() == (2, 1)));
        assert!(items[3..].iter().all(|d| d.cell() == (4, 3)));
    }

    #[test]
    fn determinism() {
        let cells = vec![CellConfig::new(3, 2, 4)];
        let a = generate_dataset(&cells, 7, true).unwrap();
        let b = generate_dataset(&cells, 7, true).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&cells, 8, true).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn layouts_satisfy_relations_with_margin() {
        let items = generate_dataset(&default_cells(), 3, true).unwrap();
        for item in &items {
            let layout = item.layout.as_ref().unwrap();
            let center = |id: usize| {
                let c = layout.iter().find(|c| c.id == id).unwrap();
                (c.cx, c.cy)
            };
            for r in &item.desc.relations {
                assert!(relation_satisfied(r, center), "{}", item.desc.global_text);
                let (sx, sy) = center(r.subject_id);
                let (ox, oy) = center(r.object_id);
                let gap = if r.kind.horizontal() { (sx - ox).abs() } else { (sy - oy).abs() };
                assert!(gap >= RELATION_MARGIN - 1e-12);
            }
            for a in layout {
                assert!((CENTER_LO..=CENTER_HI).contains(&a.cx));
                assert!((CENTER_LO..=CENTER_HI).contains(&a.cy));
                for b in layout {
                    if a.id < b.id {
                        let d = ((a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2)).sqrt();
                        assert!(d >= MIN_PAIR_DISTANCE - 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn nouns_stay_in_one_super_category_up_to_four() {
        let cells = vec![CellConfig::new(4, 2, 20)];
        let items = generate_dataset(&cells, 5, false).unwrap();
        for item in &items {
            let cats: Vec<usize> = item
                .desc
                .objects
                .iter()
                .map(|o| vocab::super_category_of(&o.noun).unwrap())
                .collect();
            assert!(cats.iter().all(|&c| c == cats[0]), "{:?}", item.desc.objects);
        }
    }

    #[test]
    fn five_object_cells_spill_minimally() {
        let cells = vec![CellConfig::new(5, 3, 10)];
        let items = generate_dataset(&cells, 5, false).unwrap();
        for item in &items {
            let mut per_cat = [0usize; 6];
            for o in &item.desc.objects {
                per_cat[vocab::super_category_of(&o.noun).unwrap()] += 1;
            }
            assert_eq!(*per_cat.iter().max().unwrap(), 4, "{:?}", item.desc.objects);
            let nouns: Vec<&str> = item.desc.objects.iter().map(|o| o.noun.as_str()).collect();
            let mut uniq = nouns.clone();
            uniq.sort_unstable();
            uniq.dedup();
            assert_eq!(uniq.len(), nouns.len());
        }
    }

    #[test]
    fn color_frequency_near_half() {
        let cells = vec![CellConfig::new(4, 1, 2600)];
        let items = generate_dataset(&cells, 42, false).unwrap();
        let total: usize = items.iter().map(|d| d.desc.objects.len()).sum();
        let colored: usize = items
            .iter()
            .flat_map(|d| &d.desc.objects)
            .filter(|o| o.color.is_some())
            .count();
        assert!(total >= 10_000);
        let freq = colored as f64 / total as f64;
        assert!((freq - 0.5).abs() <= 0.02, "colored frequency {freq}");
    }

    #[test]
    fn infeasible_cells_rejected() {
        assert!(generate_dataset(&[CellConfig::new(1, 1, 1)], 0, false).is_err());
        assert!(generate_dataset(&[CellConfig::new(6, 1, 1)], 0, false).is_err());
        assert!(generate_dataset(&[CellConfig::new(3, 3, 1)], 0, false).is_err());
        assert!(generate_dataset(&[CellConfig::new(3, 0, 1)], 0, false).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let items = generate_dataset(&[CellConfig::new(3, 2, 6)], 9, true).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&items, &mut buf).unwrap();
        let back = read_jsonl(&buf[..]).unwrap();
        assert_eq!(items, back);
    }

    #[test]
    fn reader_rejects_tampered_lines() {
        let items = generate_dataset(&[CellConfig::new(2, 1, 1)], 1, true).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&items, &mut buf).unwrap();
        let line = String::from_utf8(buf).unwrap();
        let tampered = line.replacen("\"kind\":\"", "\"kind\":\"__", 1);
        if tampered != line {
            assert!(read_jsonl(tampered.as_bytes()).is_err());
        }
        let original = &items[0].desc.objects[0].noun;
        let other = if original == "vase" { "lamp" } else { "vase" };
        let noun_swapped =
            line.replacen(&format!("\"noun\":\"{original}\""), &format!("\"noun\":\"{other}\""), 1);
        assert_ne!(noun_swapped, line);
        assert!(read_jsonl(noun_swapped.as_bytes()).is_err());
    }
}

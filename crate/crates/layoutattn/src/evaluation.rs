//! Automatic metrics over decoded scenes: blob detection on thresholded
//! noun channels, recall of mentioned objects, and precision of spatial
//! relations judged by detected centroids. `run_suite` drives the full
//! pipeline (layout → λ optimization → generation → detection) across
//! dataset items and ablation variants.

use crate::derive_seed;
use crate::generator::{GeneratorConfig, ToyScene};
use crate::optimizer::{optimize, OptimizerConfig, OptimizerError, Variant};
use crate::predictor::{
    predict_gmm, sample_layout, Layout, LayoutObject, PredictorError, PredictorParams,
    RegionShape, SampleMode,
};
use crate::scene_dsl::{relation_satisfied, DatasetItem, GtCenter, RelationKind, SceneDescription};
use crate::scorer::ScorerConfig;
use crate::vocab;
use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("unknown word \"{0}\"")]
    Vocab(String),
    #[error("item has no ground-truth layout")]
    MissingLayout,
    #[error("predicted-layout row needs trained predictor parameters")]
    MissingPredictor,
    #[error("evaluation dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub noun_threshold: f64,
    pub min_area: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig { noun_threshold: 0.5, min_area: 4 }
    }
}

/// One detected blob. Noun and color are the argmax channel means over the
/// component; the centroid is in normalized [0,1]² coordinates and the box
/// in inclusive pixel coordinates (x0, y0, x1, y1).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Detection {
    pub noun: String,
    pub color: String,
    pub bbox: (usize, usize, usize, usize),
    pub centroid: (f64, f64),
    pub area: usize,
}

/// Thresholds the noun channels at `noun_threshold`, labels the foreground
/// with 4-connected components, and summarizes each component of at least
/// `min_area` pixels. Components are reported in scan order of their first
/// pixel.
pub fn detect_objects(scene: &ToyScene, cfg: &DetectorConfig) -> Vec<Detection> {
    let (h, w) = scene.dims();
    let nouns: Vec<&str> = vocab::nouns().collect();
    let mut label = vec![usize::MAX; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();

    let foreground = |y: usize, x: usize| -> bool {
        (0..vocab::NOUN_COUNT).any(|n| scene.noun[[n, y, x]] > cfg.noun_threshold)
    };

    let mut next = 0usize;
    for sy in 0..h {
        for sx in 0..w {
            if label[sy * w + sx] != usize::MAX || !foreground(sy, sx) {
                continue;
            }
            let id = next;
            next += 1;
            stack.push((sy, sx));
            label[sy * w + sx] = id;
            let mut pixels = Vec::new();
            while let Some((y, x)) = stack.pop() {
                pixels.push((y, x));
                let mut visit = |ny: usize, nx: usize| {
                    if label[ny * w + nx] == usize::MAX && foreground(ny, nx) {
                        label[ny * w + nx] = id;
                        stack.push((ny, nx));
                    }
                };
                if y > 0 {
                    visit(y - 1, x);
                }
                if y + 1 < h {
                    visit(y + 1, x);
                }
                if x > 0 {
                    visit(y, x - 1);
                }
                if x + 1 < w {
                    visit(y, x + 1);
                }
            }
            if pixels.len() < cfg.min_area {
                continue;
            }

            let mut noun_sum = vec![0.0f64; vocab::NOUN_COUNT];
            let mut color_sum = vec![0.0f64; vocab::COLOR_COUNT];
            let (mut cx, mut cy) = (0.0f64, 0.0f64);
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            for &(y, x) in &pixels {
                for (n, s) in noun_sum.iter_mut().enumerate() {
                    *s += scene.noun[[n, y, x]];
                }
                for (c, s) in color_sum.iter_mut().enumerate() {
                    *s += scene.color[[c, y, x]];
                }
                cx += (x as f64 + 0.5) / w as f64;
                cy += (y as f64 + 0.5) / h as f64;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
            let area = pixels.len();
            let argmax = |sums: &[f64]| {
                sums.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap()
            };
            out.push(Detection {
                noun: nouns[argmax(&noun_sum)].to_string(),
                color: vocab::COLORS[argmax(&color_sum)].to_string(),
                bbox: (x0, y0, x1, y1),
                centroid: (cx / area as f64, cy / area as f64),
                area,
            });
        }
    }
    out
}

/// Greedy assignment: detections in descending area order each claim the
/// first still-unmatched object they are compatible with (same noun, and
/// same color when the description states one). Returns, per description
/// object, the index of its matched detection.
pub fn match_objects(detections: &[Detection], desc: &SceneDescription) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b].area.cmp(&detections[a].area).then(a.cmp(&b))
    });
    let mut matched: Vec<Option<usize>> = vec![None; desc.objects.len()];
    for di in order {
        let det = &detections[di];
        let slot = desc.objects.iter().enumerate().find(|(oi, obj)| {
            matched[*oi].is_none()
                && obj.noun == det.noun
                && obj.color.as_ref().is_none_or(|c| *c == det.color)
        });
        if let Some((oi, _)) = slot {
            matched[oi] = Some(di);
        }
    }
    matched
}

/// Fraction of mentioned objects matched by some detection.
pub fn object_recall(detections: &[Detection], desc: &SceneDescription) -> f64 {
    if desc.objects.is_empty() {
        return 0.0;
    }
    let matched = match_objects(detections, desc);
    matched.iter().filter(|m| m.is_some()).count() as f64 / desc.objects.len() as f64
}

/// Fraction of correct relations among those whose endpoints were both
/// matched, judged by strict centroid comparison. None when no relation
/// has both endpoints matched.
pub fn sprel_precision(detections: &[Detection], desc: &SceneDescription) -> Option<f64> {
    let (correct, total) = sprel_counts(detections, desc);
    (total > 0).then(|| correct as f64 / total as f64)
}

fn sprel_counts(detections: &[Detection], desc: &SceneDescription) -> (usize, usize) {
    let matched = match_objects(detections, desc);
    let centroid_of = |id: usize| -> Option<(f64, f64)> {
        let idx = desc.objects.iter().position(|o| o.id == id)?;
        matched[idx].map(|di| detections[di].centroid)
    };
    let mut correct = 0;
    let mut total = 0;
    for rel in &desc.relations {
        let (Some(s), Some(o)) = (centroid_of(rel.subject_id), centroid_of(rel.object_id))
        else {
            continue;
        };
        total += 1;
        if relation_satisfied(rel, |id| if id == rel.subject_id { s } else { o }) {
            correct += 1;
        }
    }
    (correct, total)
}

/// Paints an idealized scene for a layout: a saturated disc per object at
/// its center, on the object's noun channel and its stated (or an
/// arbitrary fixed) color channel. Bypasses the generator; used as the
/// metric oracle.
pub fn paint_layout_scene(
    desc: &SceneDescription,
    centers: &[GtCenter],
    grid: usize,
    radius: f64,
) -> Result<ToyScene, EvalError> {
    let mut scene = ToyScene {
        noun: Array3::zeros((vocab::NOUN_COUNT, grid, grid)),
        color: Array3::zeros((vocab::COLOR_COUNT, grid, grid)),
    };
    for (i, obj) in desc.objects.iter().enumerate() {
        let n = vocab::noun_index(&obj.noun).ok_or_else(|| EvalError::Vocab(obj.noun.clone()))?;
        let c = match &obj.color {
            Some(col) => {
                vocab::color_index(col).ok_or_else(|| EvalError::Vocab(col.clone()))?
            }
            None => i % vocab::COLOR_COUNT,
        };
        let center = centers
            .iter()
            .find(|g| g.id == obj.id)
            .ok_or(EvalError::MissingLayout)?;
        for y in 0..grid {
            for x in 0..grid {
                let px = (x as f64 + 0.5) / grid as f64;
                let py = (y as f64 + 0.5) / grid as f64;
                let d2 = (px - center.cx).powi(2) + (py - center.cy).powi(2);
                if d2 <= radius * radius {
                    scene.noun[[n, y, x]] = 1.0;
                    scene.color[[c, y, x]] = 1.0;
                }
            }
        }
    }
    Ok(scene)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutSource {
    Predicted,
    GroundTruth,
}

impl LayoutSource {
    pub fn name(self) -> &'static str {
        match self {
            LayoutSource::Predicted => "predicted",
            LayoutSource::GroundTruth => "ground_truth",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SuiteRowSpec {
    pub variant: Variant,
    pub layout_source: LayoutSource,
}

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub gen: GeneratorConfig,
    pub scorer: ScorerConfig,
    pub optimizer: OptimizerConfig,
    pub detector: DetectorConfig,
    /// Radius of layout regions, both sampled and ground-truth.
    pub region_radius: f64,
    pub sample_mode: SampleMode,
    pub edge_clamp: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            gen: GeneratorConfig::default(),
            scorer: ScorerConfig::default(),
            optimizer: OptimizerConfig::default(),
            detector: DetectorConfig::default(),
            region_radius: 0.2,
            sample_mode: SampleMode::ArgmaxMean,
            edge_clamp: true,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RelationStat {
    pub relation: String,
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellStat {
    pub n_objects: usize,
    pub n_relations: usize,
    pub items: usize,
    pub matched_objects: usize,
    pub total_objects: usize,
    pub correct_relations: usize,
    pub scored_relations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantRow {
    pub variant: String,
    pub layout_source: String,
    pub items: usize,
    pub failures: usize,
    pub matched_objects: usize,
    pub total_objects: usize,
    /// Micro-averaged: matched / total over all scored items.
    pub object_recall: f64,
    pub correct_relations: usize,
    pub scored_relations: usize,
    pub sprel_precision: Option<f64>,
    pub per_relation: Vec<RelationStat>,
    pub per_cell: Vec<CellStat>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub seed: u64,
    pub rows: Vec<VariantRow>,
}

impl EvalReport {
    /// Flat per-row summary table.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "variant,layout_source,items,failures,matched_objects,total_objects,object_recall,\
             correct_relations,scored_relations,sprel_precision\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{:.6},{},{},{}\n",
                r.variant,
                r.layout_source,
                r.items,
                r.failures,
                r.matched_objects,
                r.total_objects,
                r.object_recall,
                r.correct_relations,
                r.scored_relations,
                r.sprel_precision.map_or(String::new(), |p| format!("{p:.6}")),
            ));
        }
        s
    }
}

struct ItemStats {
    cell: (usize, usize),
    matched: usize,
    total: usize,
    rel_correct: [usize; 4],
    rel_total: [usize; 4],
}

fn eval_one_item(
    item: &DatasetItem,
    row: &SuiteRowSpec,
    predictor: Option<&PredictorParams>,
    cfg: &SuiteConfig,
    latent_seed: u64,
    layout_seed: u64,
) -> Result<ItemStats, EvalError> {
    let desc = &item.desc;
    let layout = match row.layout_source {
        LayoutSource::Predicted => {
            let params = predictor.ok_or(EvalError::MissingPredictor)?;
            let gmms = predict_gmm(desc, params)?;
            sample_layout(&gmms, cfg.region_radius, layout_seed, cfg.sample_mode, cfg.edge_clamp)
        }
        LayoutSource::GroundTruth => {
            let centers = item.layout.as_ref().ok_or(EvalError::MissingLayout)?;
            Layout {
                objects: centers
                    .iter()
                    .map(|g| LayoutObject {
                        id: g.id,
                        cx: g.cx,
                        cy: g.cy,
                        shape: RegionShape::Circle { r: cfg.region_radius },
                    })
                    .collect(),
            }
        }
    };

    let mut opt_cfg = cfg.optimizer;
    opt_cfg.variant = row.variant;
    let outcome = optimize(desc, &layout, &cfg.gen, &cfg.scorer, &opt_cfg, latent_seed)?;
    let detections = detect_objects(&outcome.scene, &cfg.detector);

    let matched_assign = match_objects(&detections, desc);
    let matched = matched_assign.iter().filter(|m| m.is_some()).count();
    let mut rel_correct = [0usize; 4];
    let mut rel_total = [0usize; 4];
    let centroid_of = |id: usize| -> Option<(f64, f64)> {
        let idx = desc.objects.iter().position(|o| o.id == id)?;
        matched_assign[idx].map(|di| detections[di].centroid)
    };
    for rel in &desc.relations {
        let (Some(s), Some(o)) = (centroid_of(rel.subject_id), centroid_of(rel.object_id))
        else {
            continue;
        };
        let k = rel.kind as usize;
        rel_total[k] += 1;
        if relation_satisfied(rel, |id| if id == rel.subject_id { s } else { o }) {
            rel_correct[k] += 1;
        }
    }
    Ok(ItemStats {
        cell: (desc.objects.len(), desc.relations.len()),
        matched,
        total: desc.objects.len(),
        rel_correct,
        rel_total,
    })
}

/// Runs every (variant, layout source) row over the dataset. Per-item
/// failures are counted, not fatal. Deterministic given `seed`: each item's
/// latent and layout seeds derive from the item index alone, so variants
/// face identical latents and (for a given source) identical layouts.
pub fn run_suite(
    items: &[DatasetItem],
    rows: &[SuiteRowSpec],
    predictor: Option<&PredictorParams>,
    cfg: &SuiteConfig,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    if items.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if rows.iter().any(|r| r.layout_source == LayoutSource::Predicted) && predictor.is_none() {
        return Err(EvalError::MissingPredictor);
    }

    let mut report = EvalReport { seed, rows: Vec::with_capacity(rows.len()) };
    for row in rows {
        let results: Vec<Result<ItemStats, EvalError>> = items
            .par_iter()
            .enumerate()
            .map(|(i, item)| {
                let tag = i.to_string();
                let latent_seed = derive_seed(seed, &["item", &tag, "latent"]);
                let layout_seed = derive_seed(seed, &["item", &tag, "layout"]);
                eval_one_item(item, row, predictor, cfg, latent_seed, layout_seed)
            })
            .collect();

        let mut failures = 0usize;
        let mut matched_objects = 0usize;
        let mut total_objects = 0usize;
        let mut rel_correct = [0usize; 4];
        let mut rel_total = [0usize; 4];
        let mut cells: Vec<CellStat> = Vec::new();
        for res in results {
            let st = match res {
                Ok(st) => st,
                Err(_) => {
                    failures += 1;
                    continue;
                }
            };
            matched_objects += st.matched;
            total_objects += st.total;
            for k in 0..4 {
                rel_correct[k] += st.rel_correct[k];
                rel_total[k] += st.rel_total[k];
            }
            let cell = match cells
                .iter_mut()
                .find(|c| (c.n_objects, c.n_relations) == st.cell)
            {
                Some(c) => c,
                None => {
                    cells.push(CellStat {
                        n_objects: st.cell.0,
                        n_relations: st.cell.1,
                        items: 0,
                        matched_objects: 0,
                        total_objects: 0,
                        correct_relations: 0,
                        scored_relations: 0,
                    });
                    cells.last_mut().unwrap()
                }
            };
            cell.items += 1;
            cell.matched_objects += st.matched;
            cell.total_objects += st.total;
            cell.correct_relations += st.rel_correct.iter().sum::<usize>();
            cell.scored_relations += st.rel_total.iter().sum::<usize>();
        }
        cells.sort_by_key(|c| (c.n_objects, c.n_relations));

        let correct_relations: usize = rel_correct.iter().sum();
        let scored_relations: usize = rel_total.iter().sum();
        report.rows.push(VariantRow {
            variant: row.variant.name().to_string(),
            layout_source: row.layout_source.name().to_string(),
            items: items.len(),
            failures,
            matched_objects,
            total_objects,
            object_recall: if total_objects > 0 {
                matched_objects as f64 / total_objects as f64
            } else {
                0.0
            },
            correct_relations,
            scored_relations,
            sprel_precision: (scored_relations > 0)
                .then(|| correct_relations as f64 / scored_relations as f64),
            per_relation: RelationKind::ALL
                .iter()
                .enumerate()
                .map(|(k, kind)| RelationStat {
                    relation: kind.name().to_string(),
                    correct: rel_correct[k],
                    total: rel_total[k],
                })
                .collect(),
            per_cell: cells,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_dsl::{ObjectSpec, RelationSpec};

    fn blank_scene(g: usize) -> ToyScene {
        ToyScene {
            noun: Array3::zeros((vocab::NOUN_COUNT, g, g)),
            color: Array3::zeros((vocab::COLOR_COUNT, g, g)),
        }
    }

    fn paint_rect(scene: &mut ToyScene, noun: &str, color: &str, y0: usize, x0: usize, side: usize) {
        let n = vocab::noun_index(noun).unwrap();
        let c = vocab::color_index(color).unwrap();
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                scene.noun[[n, y, x]] = 0.95;
                scene.color[[c, y, x]] = 0.95;
            }
        }
    }

    fn desc(objects: Vec<ObjectSpec>, relations: Vec<RelationSpec>) -> SceneDescription {
        let local_texts = objects
            .iter()
            .map(crate::scene_dsl::render_local_description)
            .collect();
        SceneDescription {
            global_text: String::new(),
            mention_token_positions: vec![0; objects.len()],
            objects,
            relations,
            local_texts,
        }
    }

    #[test]
    fn blank_scene_has_no_detections() {
        let scene = blank_scene(32);
        assert!(detect_objects(&scene, &DetectorConfig::default()).is_empty());
    }

    #[test]
    fn centered_blob_is_detected_with_noun_color_and_centroid() {
        let mut scene = blank_scene(32);
        paint_rect(&mut scene, "car", "red", 13, 13, 6);
        let dets = detect_objects(&scene, &DetectorConfig::default());
        assert_eq!(dets.len(), 1);
        let d = &dets[0];
        assert_eq!(d.noun, "car");
        assert_eq!(d.color, "red");
        assert_eq!(d.area, 36);
        assert_eq!(d.bbox, (13, 13, 18, 18));
        assert!((d.centroid.0 - 0.5).abs() < 1e-12 && (d.centroid.1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn disjoint_blobs_give_disjoint_detections() {
        let mut scene = blank_scene(32);
        paint_rect(&mut scene, "car", "red", 4, 4, 5);
        paint_rect(&mut scene, "dog", "blue", 20, 20, 7);
        let dets = detect_objects(&scene, &DetectorConfig::default());
        assert_eq!(dets.len(), 2);
        let (a, b) = (&dets[0], &dets[1]);
        assert_eq!((a.noun.as_str(), b.noun.as_str()), ("car", "dog"));
        assert!(a.bbox.2 < b.bbox.0 && a.bbox.3 < b.bbox.1, "boxes overlap");
    }

    #[test]
    fn small_blobs_fall_below_min_area() {
        let mut scene = blank_scene(32);
        let n = vocab::noun_index("cat").unwrap();
        scene.noun[[n, 5, 5]] = 0.9;
        scene.noun[[n, 5, 6]] = 0.9;
        scene.noun[[n, 6, 5]] = 0.9;
        assert!(detect_objects(&scene, &DetectorConfig::default()).is_empty());
        let lax = DetectorConfig { min_area: 3, ..Default::default() };
        assert_eq!(detect_objects(&scene, &lax).len(), 1);
    }

    #[test]
    fn recall_counts_matched_objects() {
        let mut scene = blank_scene(32);
        paint_rect(&mut scene, "car", "red", 4, 4, 5);
        paint_rect(&mut scene, "dog", "blue", 20, 20, 5);
        let dets = detect_objects(&scene, &DetectorConfig::default());

        let all = desc(
            vec![
                ObjectSpec { id: 1, noun: "car".into(), color: Some("red".into()) },
                ObjectSpec { id: 2, noun: "dog".into(), color: None },
            ],
            vec![],
        );
        assert_eq!(object_recall(&dets, &all), 1.0);
        assert_eq!(object_recall(&[], &all), 0.0);

        let three = desc(
            vec![
                ObjectSpec { id: 1, noun: "car".into(), color: Some("red".into()) },
                ObjectSpec { id: 2, noun: "dog".into(), color: None },
                ObjectSpec { id: 3, noun: "bus".into(), color: None },
            ],
            vec![],
        );
        assert!((object_recall(&dets, &three) - 2.0 / 3.0).abs() < 1e-12);

        // Color mismatch blocks the match.
        let wrong = desc(
            vec![ObjectSpec { id: 1, noun: "car".into(), color: Some("green".into()) }],
            vec![],
        );
        assert_eq!(object_recall(&dets, &wrong), 0.0);
    }

    #[test]
    fn sprel_judges_strict_centroid_order() {
        let mut scene = blank_scene(32);
        paint_rect(&mut scene, "car", "red", 14, 4, 5); // centroid x ≈ 0.2
        paint_rect(&mut scene, "dog", "blue", 14, 22, 5); // centroid x ≈ 0.77
        let dets = detect_objects(&scene, &DetectorConfig::default());

        let left = desc(
            vec![
                ObjectSpec { id: 1, noun: "car".into(), color: None },
                ObjectSpec { id: 2, noun: "dog".into(), color: None },
            ],
            vec![RelationSpec { subject_id: 1, object_id: 2, kind: RelationKind::LeftOf }],
        );
        assert_eq!(sprel_precision(&dets, &left), Some(1.0));

        let right = desc(
            left.objects.clone(),
            vec![RelationSpec { subject_id: 1, object_id: 2, kind: RelationKind::RightOf }],
        );
        assert_eq!(sprel_precision(&dets, &right), Some(0.0));

        // Unmatched endpoint → no scored relation.
        let ghost = desc(
            vec![
                ObjectSpec { id: 1, noun: "car".into(), color: None },
                ObjectSpec { id: 2, noun: "horse".into(), color: None },
            ],
            vec![RelationSpec { subject_id: 1, object_id: 2, kind: RelationKind::LeftOf }],
        );
        assert_eq!(sprel_precision(&dets, &ghost), None);
    }

    #[test]
    fn metrics_ignore_detection_order() {
        let mut scene = blank_scene(32);
        paint_rect(&mut scene, "car", "red", 4, 4, 5);
        paint_rect(&mut scene, "dog", "blue", 20, 20, 7);
        let mut dets = detect_objects(&scene, &DetectorConfig::default());
        let d = desc(
            vec![
                ObjectSpec { id: 1, noun: "car".into(), color: None },
                ObjectSpec { id: 2, noun: "dog".into(), color: None },
            ],
            vec![RelationSpec { subject_id: 1, object_id: 2, kind: RelationKind::Above }],
        );
        let r1 = object_recall(&dets, &d);
        let p1 = sprel_precision(&dets, &d);
        dets.reverse();
        assert_eq!(object_recall(&dets, &d), r1);
        assert_eq!(sprel_precision(&dets, &d), p1);
    }

    #[test]
    fn recall_is_monotone_in_correct_detections() {
        let d = desc(
            vec![
                ObjectSpec { id: 1, noun: "car".into(), color: None },
                ObjectSpec { id: 2, noun: "dog".into(), color: None },
            ],
            vec![],
        );
        let car = Detection {
            noun: "car".into(),
            color: "red".into(),
            bbox: (0, 0, 3, 3),
            centroid: (0.1, 0.1),
            area: 16,
        };
        let dog = Detection {
            noun: "dog".into(),
            color: "blue".into(),
            bbox: (10, 10, 13, 13),
            centroid: (0.4, 0.4),
            area: 16,
        };
        let r0 = object_recall(&[car.clone()], &d);
        let r1 = object_recall(&[car, dog], &d);
        assert!(r1 >= r0);
        assert_eq!(r1, 1.0);
    }

    #[test]
    fn painted_ground_truth_layouts_score_perfectly() {
        use crate::scene_dsl::{generate_dataset, CellConfig};
        let items = generate_dataset(
            &[CellConfig::new(2, 1, 3), CellConfig::new(4, 3, 2)],
            99,
            true,
        )
        .unwrap();
        for item in &items {
            let centers = item.layout.as_ref().unwrap();
            let scene = paint_layout_scene(&item.desc, centers, 32, 0.08).unwrap();
            let dets = detect_objects(&scene, &DetectorConfig::default());
            assert_eq!(object_recall(&dets, &item.desc), 1.0);
            assert_eq!(sprel_precision(&dets, &item.desc), Some(1.0));
        }
    }

    #[test]
    fn suite_rows_record_denominators_and_partition_identity() {
        use crate::scene_dsl::{generate_dataset, CellConfig};
        let items = generate_dataset(
            &[CellConfig::new(2, 1, 3), CellConfig::new(3, 2, 2)],
            5,
            true,
        )
        .unwrap();
        let cfg = SuiteConfig {
            gen: GeneratorConfig { steps: 5, ..Default::default() },
            ..Default::default()
        };
        let rows = [
            SuiteRowSpec {
                variant: Variant::NoOptimization,
                layout_source: LayoutSource::GroundTruth,
            },
        ];
        let report = run_suite(&items, &rows, None, &cfg, 77).unwrap();
        assert_eq!(report.rows.len(), 1);
        let row = &report.rows[0];
        assert_eq!(row.items, 5);
        assert_eq!(row.failures, 0);
        assert_eq!(row.total_objects, 2 * 3 + 3 * 2);
        let cell_objs: usize = row.per_cell.iter().map(|c| c.total_objects).sum();
        let cell_rels: usize = row.per_cell.iter().map(|c| c.scored_relations).sum();
        assert_eq!(cell_objs, row.total_objects);
        assert_eq!(cell_rels, row.scored_relations);
        let rel_total: usize = row.per_relation.iter().map(|r| r.total).sum();
        assert_eq!(rel_total, row.scored_relations);
    }

    #[test]
    fn predicted_rows_without_predictor_are_rejected() {
        use crate::scene_dsl::{generate_dataset, CellConfig};
        let items = generate_dataset(&[CellConfig::new(2, 1, 1)], 5, true).unwrap();
        let rows = [SuiteRowSpec {
            variant: Variant::Full,
            layout_source: LayoutSource::Predicted,
        }];
        assert!(matches!(
            run_suite(&items, &rows, None, &SuiteConfig::default(), 1),
            Err(EvalError::MissingPredictor)
        ));
    }
}

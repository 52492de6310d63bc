//! Concrete layouts: per-object centers plus a region shape, either a
//! circle of fixed radius or an explicit pixel mask loaded from a PGM file.

use super::{GmmParams, PredictorError};
use crate::pnm;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub enum RegionShape {
    Circle { r: f64 },
    /// Binary mask on the generation grid, values in {0,1}.
    Mask(Array2<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutObject {
    pub id: usize,
    pub cx: f64,
    pub cy: f64,
    pub shape: RegionShape,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Layout {
    pub objects: Vec<LayoutObject>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Draw a component by weight, then a point from its Gaussian.
    Sample,
    /// Take the mean of the largest-weight component.
    ArgmaxMean,
}

/// Turns mixtures into a concrete layout of circular regions. Centers are
/// clipped to [0,1]²; with `edge_clamp` they are further pulled into
/// [r/2, 1−r/2]² so regions stay mostly on-canvas.
pub fn sample_layout(
    gmms: &[GmmParams],
    r: f64,
    seed: u64,
    mode: SampleMode,
    edge_clamp: bool,
) -> Layout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects = Vec::with_capacity(gmms.len());
    for (i, g) in gmms.iter().enumerate() {
        let (mut cx, mut cy) = match mode {
            SampleMode::ArgmaxMean => g.means[g.argmax_component()],
            SampleMode::Sample => {
                // Inverse-CDF draw over component weights.
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut comp = g.k() - 1;
                for (k, &w) in g.weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        comp = k;
                        break;
                    }
                }
                let (mx, my) = g.means[comp];
                let (vx, vy) = g.vars[comp];
                let nx = Normal::new(mx, vx.sqrt()).expect("finite std");
                let ny = Normal::new(my, vy.sqrt()).expect("finite std");
                (nx.sample(&mut rng), ny.sample(&mut rng))
            }
        };
        cx = cx.clamp(0.0, 1.0);
        cy = cy.clamp(0.0, 1.0);
        if edge_clamp {
            let (lo, hi) = (r / 2.0, 1.0 - r / 2.0);
            cx = cx.clamp(lo, hi);
            cy = cy.clamp(lo, hi);
        }
        objects.push(LayoutObject { id: i + 1, cx, cy, shape: RegionShape::Circle { r } });
    }
    Layout { objects }
}

/// Binary masks on an h×w grid, one per object, in layout order. Pixel
/// (row, col) covers the unit-square point ((col+0.5)/w, (row+0.5)/h) and is
/// inside a circle when its center is within r of C.
pub fn region_mask(layout: &Layout, grid: (usize, usize)) -> Result<Vec<Array2<f64>>, PredictorError> {
    let (h, w) = grid;
    layout
        .objects
        .iter()
        .map(|o| match &o.shape {
            RegionShape::Circle { r } => {
                let mut m = Array2::zeros((h, w));
                for y in 0..h {
                    for x in 0..w {
                        let px = (x as f64 + 0.5) / w as f64;
                        let py = (y as f64 + 0.5) / h as f64;
                        let d2 = (px - o.cx) * (px - o.cx) + (py - o.cy) * (py - o.cy);
                        if d2 <= r * r {
                            m[[y, x]] = 1.0;
                        }
                    }
                }
                Ok(m)
            }
            RegionShape::Mask(m) => {
                if m.dim() != (h, w) {
                    return Err(PredictorError::Shape(format!(
                        "mask for object {} is {:?}, grid is {:?}",
                        o.id,
                        m.dim(),
                        (h, w)
                    )));
                }
                Ok(m.clone())
            }
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct LayoutFile {
    objects: Vec<LayoutFileObject>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum LayoutFileObject {
    Circle { id: usize, cx: f64, cy: f64, r: f64 },
    MaskRef { id: usize, mask_pgm: String },
}

/// Reads a layout description. Circle entries carry explicit centers; mask
/// entries point at a PGM file (path relative to the layout file), and the
/// center becomes the mask centroid.
pub fn load_layout_file(path: &Path) -> Result<Layout, PredictorError> {
    let text = std::fs::read_to_string(path)?;
    let file: LayoutFile = serde_json::from_str(&text)
        .map_err(|e| PredictorError::Shape(format!("layout file {}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut objects = Vec::with_capacity(file.objects.len());
    for entry in file.objects {
        match entry {
            LayoutFileObject::Circle { id, cx, cy, r } => {
                objects.push(LayoutObject { id, cx, cy, shape: RegionShape::Circle { r } });
            }
            LayoutFileObject::MaskRef { id, mask_pgm } => {
                let gray = pnm::read_pgm(&dir.join(&mask_pgm))
                    .map_err(|e| PredictorError::Shape(format!("mask {mask_pgm}: {e}")))?;
                let mask = gray.to_mask();
                let (h, w) = mask.dim();
                let total: f64 = mask.sum();
                if total == 0.0 {
                    return Err(PredictorError::Shape(format!(
                        "mask {mask_pgm} has no foreground pixels"
                    )));
                }
                let mut cx = 0.0;
                let mut cy = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        if mask[[y, x]] > 0.0 {
                            cx += (x as f64 + 0.5) / w as f64;
                            cy += (y as f64 + 0.5) / h as f64;
                        }
                    }
                }
                objects.push(LayoutObject {
                    id,
                    cx: cx / total,
                    cy: cy / total,
                    shape: RegionShape::Mask(mask),
                });
            }
        }
    }
    Ok(Layout { objects })
}

/// Writes circle layouts as JSON. Mask-shaped objects are not serializable
/// here and are rejected.
pub fn save_layout_file(layout: &Layout, path: &Path) -> Result<(), PredictorError> {
    let objects = layout
        .objects
        .iter()
        .map(|o| match o.shape {
            RegionShape::Circle { r } => {
                Ok(LayoutFileObject::Circle { id: o.id, cx: o.cx, cy: o.cy, r })
            }
            RegionShape::Mask(_) => Err(PredictorError::Shape(format!(
                "object {} has an explicit mask; only circle layouts serialize",
                o.id
            ))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let text = serde_json::to_string_pretty(&LayoutFile { objects })
        .expect("layout serialization");
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spread_gmm() -> GmmParams {
        GmmParams {
            means: vec![(0.2, 0.3), (0.8, 0.7), (0.5, 0.5), (0.1, 0.9), (0.9, 0.1)],
            vars: vec![(0.001, 0.001); 5],
            weights: vec![0.1, 0.6, 0.1, 0.1, 0.1],
        }
    }

    #[test]
    fn argmax_mean_picks_heaviest_component() {
        let layout = sample_layout(&[spread_gmm()], 0.2, 0, SampleMode::ArgmaxMean, false);
        assert!((layout.objects[0].cx - 0.8).abs() < 1e-12);
        assert!((layout.objects[0].cy - 0.7).abs() < 1e-12);
        assert_eq!(layout.objects[0].id, 1);
    }

    #[test]
    fn edge_clamp_pulls_centers_inward() {
        let g = GmmParams {
            means: vec![(0.98, 0.5)],
            vars: vec![(0.001, 0.001)],
            weights: vec![1.0],
        };
        let layout = sample_layout(&[g], 0.2, 0, SampleMode::ArgmaxMean, true);
        assert!((layout.objects[0].cx - 0.9).abs() < 1e-12);
        assert!((layout.objects[0].cy - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_seed_deterministic_and_component_weighted() {
        let g = spread_gmm();
        let a = sample_layout(&[g.clone()], 0.2, 42, SampleMode::Sample, true);
        let b = sample_layout(&[g.clone()], 0.2, 42, SampleMode::Sample, true);
        assert_eq!(a, b);
        // With weight 0.6 on component 1 and tiny variances, most draws land
        // near (0.8, 0.7).
        let mut near = 0;
        let n = 500;
        for s in 0..n {
            let l = sample_layout(&[g.clone()], 0.2, s, SampleMode::Sample, false);
            let o = &l.objects[0];
            if (o.cx - 0.8).abs() < 0.15 && (o.cy - 0.7).abs() < 0.15 {
                near += 1;
            }
        }
        let frac = near as f64 / n as f64;
        assert!((0.45..0.75).contains(&frac), "frac={frac}");
    }

    #[test]
    fn circle_mask_membership_examples() {
        let layout = Layout {
            objects: vec![LayoutObject {
                id: 1,
                cx: 0.5,
                cy: 0.5,
                shape: RegionShape::Circle { r: 0.2 },
            }],
        };
        let masks = region_mask(&layout, (100, 100)).unwrap();
        let at = |x: f64, y: f64| {
            let col = (x * 100.0 - 0.5).round() as usize;
            let row = (y * 100.0 - 0.5).round() as usize;
            masks[0][[row, col]]
        };
        assert_eq!(at(0.6, 0.6), 1.0, "inside");
        assert_eq!(at(0.5, 0.705), 0.0, "outside");
        assert_eq!(at(0.5, 0.5), 1.0, "center");
    }

    #[test]
    fn mask_grows_monotonically_with_radius() {
        let count = |r: f64| {
            let layout = Layout {
                objects: vec![LayoutObject {
                    id: 1,
                    cx: 0.4,
                    cy: 0.6,
                    shape: RegionShape::Circle { r },
                }],
            };
            region_mask(&layout, (32, 32)).unwrap()[0].sum()
        };
        let mut prev = 0.0;
        for i in 1..=10 {
            let c = count(0.05 * i as f64);
            assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn explicit_mask_shape_is_checked() {
        let layout = Layout {
            objects: vec![LayoutObject {
                id: 1,
                cx: 0.5,
                cy: 0.5,
                shape: RegionShape::Mask(Array2::zeros((8, 8))),
            }],
        };
        assert!(region_mask(&layout, (32, 32)).is_err());
        assert!(region_mask(&layout, (8, 8)).is_ok());
    }

    #[test]
    fn layout_file_round_trip_and_pgm_masks() {
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout {
            objects: vec![
                LayoutObject { id: 1, cx: 0.25, cy: 0.5, shape: RegionShape::Circle { r: 0.2 } },
                LayoutObject { id: 2, cx: 0.75, cy: 0.5, shape: RegionShape::Circle { r: 0.1 } },
            ],
        };
        let path = dir.path().join("layout.json");
        save_layout_file(&layout, &path).unwrap();
        assert_eq!(load_layout_file(&path).unwrap(), layout);

        // 4x4 all-foreground mask centered at (0.5, 0.5).
        let pgm = "P2\n4 4\n255\n255 255 255 255\n255 255 255 255\n255 255 255 255\n255 255 255 255\n";
        std::fs::write(dir.path().join("m.pgm"), pgm).unwrap();
        std::fs::write(
            dir.path().join("masked.json"),
            r#"{"objects":[{"id":1,"mask_pgm":"m.pgm"}]}"#,
        )
        .unwrap();
        let loaded = load_layout_file(&dir.path().join("masked.json")).unwrap();
        assert_eq!(loaded.objects.len(), 1);
        assert!((loaded.objects[0].cx - 0.5).abs() < 1e-12);
        assert!((loaded.objects[0].cy - 0.5).abs() < 1e-12);
        match &loaded.objects[0].shape {
            RegionShape::Mask(m) => assert_eq!(m.sum(), 16.0),
            other => panic!("expected mask, got {other:?}"),
        }
    }
}

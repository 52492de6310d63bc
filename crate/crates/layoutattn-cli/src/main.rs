//! Command-line front end: dataset generation, predictor training, single
//! description generation, and suite evaluation. Every command is
//! deterministic given its flags and --seed; outputs embed the resolved
//! config and crate version.

use clap::{Args, Parser, Subcommand, ValueEnum};
use layoutattn::evaluation::{
    detect_objects, run_suite, Detection, DetectorConfig, LayoutSource, SuiteConfig,
    SuiteRowSpec,
};
use layoutattn::generator::GeneratorConfig;
use layoutattn::optimizer::{optimize, GradientMode, OptimizerConfig, Variant};
use layoutattn::predictor::{
    load_checkpoint, predict_gmm, sample_layout, save_checkpoint, train, EncoderConfig, Layout,
    LayoutObject, LossConfig, PredictorError, PredictorParams, RegionShape, SampleMode,
    TrainHyper, TrainItem,
};
use layoutattn::scene_dsl::{
    generate_dataset, parse_description, read_jsonl, write_jsonl, CellConfig, DatasetItem,
    SceneDescription,
};
use layoutattn::scorer::ScorerConfig;
use layoutattn::{derive_seed, vocab};
use serde::Serialize;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_INPUT: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_OPTIMIZER: u8 = 4;

#[derive(Parser)]
#[command(name = "layoutattn", version, about = "Layout-guided toy text-to-image pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene-description dataset as JSON Lines.
    GenData(GenDataArgs),
    /// Train the layout predictor and write a checkpoint plus loss curve.
    Train(TrainArgs),
    /// Run the full pipeline on one description: layout, optimize, render.
    Generate(GenerateArgs),
    /// Run the evaluation suite over a dataset and write a report.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output JSON Lines path. A sidecar <out>.meta.json records the config.
    #[arg(long)]
    out: PathBuf,
    /// Cell spec "N:M=COUNT,..." (e.g. "2:1=200,3:1=50"). Default: the
    /// standard 500-item composition.
    #[arg(long)]
    counts: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip ground-truth center sampling.
    #[arg(long, default_value_t = false)]
    no_layout: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset (JSON Lines from gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path. The loss curve lands at <out>.curve.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    /// Relative-position hinge weight; 0 trains the absolute-only ablation.
    #[arg(long, default_value_t = 1.0)]
    xi: f64,
    /// Hinge margin on axis separation.
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Full,
    NoSpatial,
    NoTemporal,
    NoOptimization,
}

impl std::fmt::Display for VariantArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            VariantArg::Full => "full",
            VariantArg::NoSpatial => "no-spatial",
            VariantArg::NoTemporal => "no-temporal",
            VariantArg::NoOptimization => "no-optimization",
        };
        f.write_str(s)
    }
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::NoSpatial => Variant::NoSpatial,
            VariantArg::NoTemporal => Variant::NoTemporal,
            VariantArg::NoOptimization => Variant::NoOptimization,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GradientArg {
    FiniteDifference,
    Analytic,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SampleModeArg {
    ArgmaxMean,
    Sample,
}

#[derive(Args)]
struct GenerateArgs {
    /// Scene description text.
    #[arg(long, conflicts_with = "desc_file", required_unless_present = "desc_file")]
    text: Option<String>,
    /// File whose contents are the scene description text.
    #[arg(long)]
    desc_file: Option<PathBuf>,
    /// Trained predictor checkpoint; layout is sampled from its mixtures.
    #[arg(long, conflicts_with = "layout_file", required_unless_present = "layout_file")]
    ckpt: Option<PathBuf>,
    /// Explicit layout JSON: {"objects":[{"id":1,"cx":0.3,"cy":0.5,"r":0.2}
    /// or {"id":2,"mask":"m.pgm"}]}. Mask paths resolve relative to this
    /// file; mask dimensions must match the generation grid.
    #[arg(long)]
    layout_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = VariantArg::Full)]
    variant: VariantArg,
    /// Region radius for sampled layouts.
    #[arg(long, default_value_t = 0.2)]
    radius: f64,
    /// Soft-region spread; omitted means hard binary masks.
    #[arg(long)]
    soft_sigma: Option<f64>,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    edge_clamp: bool,
    #[arg(long, value_enum, default_value_t = SampleModeArg::ArgmaxMean)]
    sample_mode: SampleModeArg,
    #[arg(long, default_value_t = 50)]
    iterations: usize,
    #[arg(long, default_value_t = 0.05)]
    opt_lr: f64,
    #[arg(long, value_enum, default_value_t = GradientArg::Analytic)]
    gradient: GradientArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output prefix: writes <out>.ppm, <out>.layout.ppm, <out>.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Evaluation dataset (JSON Lines from gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Trained predictor checkpoint; required for predicted-layout rows.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Comma-separated variants to evaluate with predicted layouts.
    #[arg(long, value_delimiter = ',', default_values_t = vec![
        VariantArg::Full,
        VariantArg::NoSpatial,
        VariantArg::NoTemporal,
        VariantArg::NoOptimization,
    ])]
    variants: Vec<VariantArg>,
    /// Add a Full row that uses the dataset's ground-truth layouts.
    #[arg(long, default_value_t = false)]
    ground_truth_layout: bool,
    #[arg(long, default_value_t = 0.2)]
    radius: f64,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    edge_clamp: bool,
    #[arg(long, value_enum, default_value_t = SampleModeArg::ArgmaxMean)]
    sample_mode: SampleModeArg,
    #[arg(long, default_value_t = 50)]
    iterations: usize,
    #[arg(long, default_value_t = 0.05)]
    opt_lr: f64,
    #[arg(long, value_enum, default_value_t = GradientArg::Analytic)]
    gradient: GradientArg,
    #[arg(long)]
    soft_sigma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output prefix: writes <out>.json and <out>.csv.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("LAYOUTATTN_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                // A second build attempt in-process is harmless; ignore it.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => return fail(EXIT_INPUT, "LAYOUTATTN_THREADS must be a positive integer"),
        }
    }
    match Cli::parse().command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn fail(code: u8, msg: &str) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn parse_counts(spec: &str) -> Result<Vec<CellConfig>, String> {
    let mut cells = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        let (nm, count) = part
            .split_once('=')
            .ok_or_else(|| format!("bad cell spec \"{part}\": expected N:M=COUNT"))?;
        let (n, m) = nm
            .split_once(':')
            .ok_or_else(|| format!("bad cell spec \"{part}\": expected N:M=COUNT"))?;
        let parse = |s: &str, what: &str| {
            s.trim().parse::<usize>().map_err(|_| format!("bad {what} in \"{part}\""))
        };
        cells.push(CellConfig {
            n_objects: parse(n, "object count")?,
            n_relations: parse(m, "relation count")?,
            count: parse(count, "item count")?,
        });
    }
    Ok(cells)
}

#[derive(Serialize)]
struct GenDataMeta<'a> {
    version: &'a str,
    seed: u64,
    with_layout: bool,
    cells: Vec<CellMeta>,
}

#[derive(Serialize)]
struct CellMeta {
    n_objects: usize,
    n_relations: usize,
    count: usize,
}

fn cmd_gen_data(a: GenDataArgs) -> ExitCode {
    let cells = match &a.counts {
        Some(spec) => match parse_counts(spec) {
            Ok(c) => c,
            Err(e) => return fail(EXIT_INPUT, &e),
        },
        None => layoutattn::scene_dsl::default_cells(),
    };
    let items = match generate_dataset(&cells, a.seed, !a.no_layout) {
        Ok(items) => items,
        Err(e) => return fail(EXIT_INPUT, &e.to_string()),
    };
    let mut buf = Vec::new();
    if let Err(e) = write_jsonl(&items, &mut buf) {
        return fail(EXIT_INPUT, &e.to_string());
    }
    if let Err(e) = std::fs::write(&a.out, &buf) {
        return fail(EXIT_INPUT, &format!("writing {}: {e}", a.out.display()));
    }
    let meta = GenDataMeta {
        version: layoutattn::VERSION,
        seed: a.seed,
        with_layout: !a.no_layout,
        cells: cells
            .iter()
            .map(|c| CellMeta {
                n_objects: c.n_objects,
                n_relations: c.n_relations,
                count: c.count,
            })
            .collect(),
    };
    if let Err(e) = write_json(&meta_path(&a.out), &meta) {
        return fail(EXIT_INPUT, &e);
    }
    println!("wrote {} items to {}", items.len(), a.out.display());
    for c in &cells {
        println!("  N={} M={}: {}", c.n_objects, c.n_relations, c.count);
    }
    ExitCode::SUCCESS
}

fn meta_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), String> {
    let body = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, body + "\n").map_err(|e| format!("writing {}: {e}", path.display()))
}

#[derive(Serialize)]
struct TrainMeta<'a> {
    version: &'a str,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    xi: f64,
    delta: f64,
    seed: u64,
    items: usize,
    final_loss: f64,
    curve: &'a [f64],
}

fn cmd_train(a: TrainArgs) -> ExitCode {
    let file = match std::fs::File::open(&a.data) {
        Ok(f) => f,
        Err(e) => return fail(EXIT_INPUT, &format!("opening {}: {e}", a.data.display())),
    };
    let items = match read_jsonl(std::io::BufReader::new(file)) {
        Ok(items) => items,
        Err(e) => return fail(EXIT_INPUT, &e.to_string()),
    };
    let train_items: Vec<TrainItem> = items.iter().map(TrainItem::from_dataset).collect();
    let hyper = TrainHyper {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        loss: LossConfig { xi: a.xi, delta: a.delta },
        seed: a.seed,
    };
    let init = PredictorParams::init(EncoderConfig::default(), derive_seed(a.seed, &["init"]));
    let outcome = match train(&train_items, init, &hyper) {
        Ok(o) => o,
        Err(e @ PredictorError::Divergence { .. }) => {
            return fail(EXIT_DIVERGENCE, &e.to_string())
        }
        Err(e) => return fail(EXIT_INPUT, &e.to_string()),
    };
    if let Err(e) = save_checkpoint(&outcome.params, &a.out) {
        return fail(EXIT_INPUT, &e.to_string());
    }
    let meta = TrainMeta {
        version: layoutattn::VERSION,
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        xi: a.xi,
        delta: a.delta,
        seed: a.seed,
        items: train_items.len(),
        final_loss: *outcome.loss_curve.last().expect("nonzero epochs"),
        curve: &outcome.loss_curve,
    };
    let curve_path = {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".curve.json");
        PathBuf::from(s)
    };
    if let Err(e) = write_json(&curve_path, &meta) {
        return fail(EXIT_INPUT, &e);
    }
    println!(
        "trained {} epochs on {} items: loss {:.6} -> {:.6}",
        a.epochs,
        train_items.len(),
        outcome.loss_curve.first().unwrap(),
        outcome.loss_curve.last().unwrap()
    );
    println!("checkpoint {}", a.out.display());
    ExitCode::SUCCESS
}

#[derive(serde::Deserialize)]
struct LayoutFile {
    objects: Vec<LayoutFileObject>,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutFileObject {
    id: usize,
    cx: Option<f64>,
    cy: Option<f64>,
    r: Option<f64>,
    mask: Option<String>,
}

/// Reads an explicit layout. Mask objects take their center from the mask
/// centroid when cx/cy are absent; circle objects require all of cx, cy, r.
fn read_layout_file(path: &Path, grid: usize) -> Result<Layout, String> {
    let body =
        std::fs::read_to_string(path).map_err(|e| format!("reading {}: {e}", path.display()))?;
    let parsed: LayoutFile =
        serde_json::from_str(&body).map_err(|e| format!("parsing {}: {e}", path.display()))?;
    if parsed.objects.is_empty() {
        return Err(format!("{}: layout has no objects", path.display()));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut objects = Vec::with_capacity(parsed.objects.len());
    for o in parsed.objects {
        let shape = match (&o.mask, o.r) {
            (Some(_), Some(_)) => {
                return Err(format!("object {}: give either r or mask, not both", o.id))
            }
            (None, Some(r)) => {
                if !(r > 0.0) {
                    return Err(format!("object {}: radius must be positive", o.id));
                }
                RegionShape::Circle { r }
            }
            (Some(rel), None) => {
                let mask_path = dir.join(rel);
                let gray = layoutattn::pnm::read_pgm(&mask_path)
                    .map_err(|e| format!("reading {}: {e}", mask_path.display()))?;
                if gray.width != grid || gray.height != grid {
                    return Err(format!(
                        "mask {} is {}x{}, generation grid is {grid}x{grid}",
                        mask_path.display(),
                        gray.width,
                        gray.height
                    ));
                }
                let mask = gray.to_mask();
                if mask.iter().all(|&v| v == 0.0) {
                    return Err(format!("mask {} is empty", mask_path.display()));
                }
                RegionShape::Mask(mask)
            }
            (None, None) => {
                return Err(format!("object {}: needs either r (circle) or mask", o.id))
            }
        };
        let (cx, cy) = match (&shape, o.cx, o.cy) {
            (_, Some(cx), Some(cy)) => (cx, cy),
            (RegionShape::Mask(m), _, _) => {
                let mut sx = 0.0;
                let mut sy = 0.0;
                let mut n = 0.0;
                for ((y, x), &v) in m.indexed_iter() {
                    if v > 0.0 {
                        sx += (x as f64 + 0.5) / grid as f64;
                        sy += (y as f64 + 0.5) / grid as f64;
                        n += 1.0;
                    }
                }
                (sx / n, sy / n)
            }
            _ => return Err(format!("object {}: circle objects need cx and cy", o.id)),
        };
        if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
            return Err(format!("object {}: center must lie in [0,1]^2", o.id));
        }
        objects.push(LayoutObject { id: o.id, cx, cy, shape });
    }
    Ok(Layout { objects })
}

#[derive(Serialize)]
struct LayoutObjectMeta {
    id: usize,
    cx: f64,
    cy: f64,
    shape: String,
    /// Region pixel count on the generation grid.
    region_pixels: usize,
    /// Mean of the object's channel signature inside the region and outside
    /// of it, after generation. Inside should dominate.
    mean_signature_inside: f64,
    mean_signature_outside: f64,
}

#[derive(Serialize)]
struct DetectionMeta {
    noun: String,
    color: String,
    centroid: (f64, f64),
    area: usize,
}

#[derive(Serialize)]
struct GenerateMeta<'a> {
    version: &'a str,
    text: &'a str,
    variant: &'a str,
    layout_source: &'a str,
    seed: u64,
    radius: f64,
    soft_sigma: Option<f64>,
    edge_clamp: bool,
    sample_mode: &'a str,
    generator: &'a GeneratorConfig,
    scorer: &'a ScorerConfig,
    optimizer: OptimizerMeta,
    final_loss: f64,
    loss_trace: &'a [f64],
    /// Final combination weights, one row per object, one column per step.
    lambda: Vec<Vec<f64>>,
    layout: Vec<LayoutObjectMeta>,
    detections: Vec<DetectionMeta>,
}

#[derive(Serialize)]
struct OptimizerMeta {
    lr: f64,
    iterations: usize,
    clamp_lo: f64,
    clamp_hi: f64,
    gradient_mode: &'static str,
    variant: &'static str,
}

/// Per-object mean signature inside and outside its region, plus the region
/// pixel count. The signature is the noun channel, times the color channel
/// when the description states a color.
fn region_report(
    scene: &layoutattn::generator::ToyScene,
    desc: &SceneDescription,
    layout: &Layout,
    grid: usize,
) -> Vec<(usize, f64, f64)> {
    let mut out = Vec::with_capacity(desc.objects.len());
    for obj in &desc.objects {
        let n = vocab::noun_index(&obj.noun).expect("vocab-checked noun");
        let c = obj.color.as_ref().map(|c| vocab::color_index(c).expect("vocab-checked color"));
        let region = layout.objects.iter().find(|o| o.id == obj.id).expect("layout id");
        let mut ins = (0.0, 0usize);
        let mut outs = (0.0, 0usize);
        for y in 0..grid {
            for x in 0..grid {
                let inside = match &region.shape {
                    RegionShape::Circle { r } => {
                        let px = (x as f64 + 0.5) / grid as f64;
                        let py = (y as f64 + 0.5) / grid as f64;
                        (px - region.cx).powi(2) + (py - region.cy).powi(2) <= r * r
                    }
                    RegionShape::Mask(m) => m[[y, x]] > 0.0,
                };
                let sig =
                    scene.noun[[n, y, x]] * c.map_or(1.0, |ci| scene.color[[ci, y, x]]);
                let slot = if inside { &mut ins } else { &mut outs };
                slot.0 += sig;
                slot.1 += 1;
            }
        }
        out.push((
            ins.1,
            ins.0 / ins.1.max(1) as f64,
            outs.0 / outs.1.max(1) as f64,
        ));
    }
    out
}

/// Scene render with region outlines burned in as white pixels.
fn overlay_render(
    scene: &layoutattn::generator::ToyScene,
    layout: &Layout,
    grid: usize,
) -> Vec<(u8, u8, u8)> {
    let mut rgb = scene.render();
    let mut mark = |y: usize, x: usize| rgb[y * grid + x] = (255, 255, 255);
    for obj in &layout.objects {
        match &obj.shape {
            RegionShape::Circle { r } => {
                let half_px = 0.5 / grid as f64;
                for y in 0..grid {
                    for x in 0..grid {
                        let px = (x as f64 + 0.5) / grid as f64;
                        let py = (y as f64 + 0.5) / grid as f64;
                        let d = ((px - obj.cx).powi(2) + (py - obj.cy).powi(2)).sqrt();
                        if (d - r).abs() <= half_px {
                            mark(y, x);
                        }
                    }
                }
            }
            RegionShape::Mask(m) => {
                // Boundary: lit pixel with an unlit 4-neighbor (or at frame edge).
                for y in 0..grid {
                    for x in 0..grid {
                        if m[[y, x]] == 0.0 {
                            continue;
                        }
                        let edge = y == 0
                            || x == 0
                            || y == grid - 1
                            || x == grid - 1
                            || m[[y - 1, x]] == 0.0
                            || m[[y + 1, x]] == 0.0
                            || m[[y, x - 1]] == 0.0
                            || m[[y, x + 1]] == 0.0;
                        if edge {
                            mark(y, x);
                        }
                    }
                }
            }
        }
    }
    rgb
}

fn cmd_generate(a: GenerateArgs) -> ExitCode {
    let text = match (&a.text, &a.desc_file) {
        (Some(t), None) => t.clone(),
        (None, Some(p)) => match std::fs::read_to_string(p) {
            Ok(s) => s.trim().to_string(),
            Err(e) => return fail(EXIT_INPUT, &format!("reading {}: {e}", p.display())),
        },
        _ => unreachable!("clap enforces exactly one of --text/--desc-file"),
    };
    let desc = match parse_description(&text) {
        Ok(d) => d,
        Err(e) => return fail(EXIT_INPUT, &e.to_string()),
    };

    let gen_cfg = GeneratorConfig::default();
    let scorer_cfg = ScorerConfig::default();
    let opt_cfg = OptimizerConfig {
        lr: a.opt_lr,
        iterations: a.iterations,
        gradient_mode: match a.gradient {
            GradientArg::FiniteDifference => GradientMode::FiniteDifference,
            GradientArg::Analytic => GradientMode::Analytic,
        },
        variant: a.variant.into(),
        soft_sigma: a.soft_sigma,
        ..OptimizerConfig::default()
    };

    let (layout, layout_source) = match (&a.ckpt, &a.layout_file) {
        (Some(ckpt), None) => {
            let params = match load_checkpoint(ckpt) {
                Ok(p) => p,
                Err(e) => return fail(EXIT_INPUT, &e.to_string()),
            };
            let gmms = match predict_gmm(&desc, &params) {
                Ok(g) => g,
                Err(e) => return fail(EXIT_INPUT, &e.to_string()),
            };
            let mode = match a.sample_mode {
                SampleModeArg::ArgmaxMean => SampleMode::ArgmaxMean,
                SampleModeArg::Sample => SampleMode::Sample,
            };
            let layout_seed = derive_seed(a.seed, &["layout"]);
            (sample_layout(&gmms, a.radius, layout_seed, mode, a.edge_clamp), "predicted")
        }
        (None, Some(path)) => match read_layout_file(path, gen_cfg.grid) {
            Ok(l) => (l, "provided"),
            Err(e) => return fail(EXIT_INPUT, &e),
        },
        _ => unreachable!("clap enforces exactly one of --ckpt/--layout-file"),
    };
    if layout.objects.len() != desc.objects.len()
        || desc.objects.iter().any(|o| !layout.objects.iter().any(|l| l.id == o.id))
    {
        return fail(EXIT_INPUT, "layout object ids do not match the description");
    }

    let latent_seed = derive_seed(a.seed, &["latent"]);
    let outcome = match optimize(&desc, &layout, &gen_cfg, &scorer_cfg, &opt_cfg, latent_seed) {
        Ok(o) => o,
        Err(e @ layoutattn::optimizer::OptimizerError::NonFiniteLoss { .. }) => {
            return fail(EXIT_OPTIMIZER, &e.to_string())
        }
        Err(e) => return fail(EXIT_INPUT, &e.to_string()),
    };

    let grid = gen_cfg.grid;
    let detections = detect_objects(&outcome.scene, &DetectorConfig::default());
    let report = region_report(&outcome.scene, &desc, &layout, grid);

    let scene_path = suffixed(&a.out, ".ppm");
    let overlay_path = suffixed(&a.out, ".layout.ppm");
    let meta_path = suffixed(&a.out, ".json");
    let comments = vec![format!("layoutattn {} seed {}", layoutattn::VERSION, a.seed)];
    if let Err(e) = write_ppm_file(&scene_path, grid, &outcome.scene.render(), &comments) {
        return fail(EXIT_INPUT, &e);
    }
    let overlay = overlay_render(&outcome.scene, &layout, grid);
    if let Err(e) = write_ppm_file(&overlay_path, grid, &overlay, &comments) {
        return fail(EXIT_INPUT, &e);
    }

    let layout_meta: Vec<LayoutObjectMeta> = layout
        .objects
        .iter()
        .zip(&report)
        .map(|(o, &(pixels, inside, outside))| LayoutObjectMeta {
            id: o.id,
            cx: o.cx,
            cy: o.cy,
            shape: match &o.shape {
                RegionShape::Circle { r } => format!("circle r={r}"),
                RegionShape::Mask(_) => "mask".to_string(),
            },
            region_pixels: pixels,
            mean_signature_inside: inside,
            mean_signature_outside: outside,
        })
        .collect();
    let meta = GenerateMeta {
        version: layoutattn::VERSION,
        text: &text,
        variant: opt_cfg.variant.name(),
        layout_source,
        seed: a.seed,
        radius: a.radius,
        soft_sigma: a.soft_sigma,
        edge_clamp: a.edge_clamp,
        sample_mode: match a.sample_mode {
            SampleModeArg::ArgmaxMean => "argmax_mean",
            SampleModeArg::Sample => "sample",
        },
        generator: &gen_cfg,
        scorer: &scorer_cfg,
        optimizer: OptimizerMeta {
            lr: opt_cfg.lr,
            iterations: opt_cfg.iterations,
            clamp_lo: opt_cfg.clamp_lo,
            clamp_hi: opt_cfg.clamp_hi,
            gradient_mode: match opt_cfg.gradient_mode {
                GradientMode::FiniteDifference => "finite_difference",
                GradientMode::Analytic => "analytic",
            },
            variant: opt_cfg.variant.name(),
        },
        final_loss: outcome.loss,
        loss_trace: &outcome.trace,
        lambda: outcome
            .lambda
            .rows()
            .into_iter()
            .map(|row| row.to_vec())
            .collect(),
        layout: layout_meta,
        detections: detections
            .iter()
            .map(|d: &Detection| DetectionMeta {
                noun: d.noun.clone(),
                color: d.color.clone(),
                centroid: d.centroid,
                area: d.area,
            })
            .collect(),
    };
    if let Err(e) = write_json(&meta_path, &meta) {
        return fail(EXIT_INPUT, &e);
    }
    println!(
        "generated \"{text}\" [{}] loss {:.4}: {} detections",
        opt_cfg.variant.name(),
        outcome.loss,
        detections.len()
    );
    println!("scene {}", scene_path.display());
    ExitCode::SUCCESS
}

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_ppm_file(
    path: &Path,
    grid: usize,
    rgb: &[(u8, u8, u8)],
    comments: &[String],
) -> Result<(), String> {
    let mut buf = Vec::new();
    layoutattn::pnm::write_ppm(&mut buf, grid, grid, rgb, comments)
        .expect("in-memory write cannot fail");
    std::fs::write(path, buf).map_err(|e| format!("writing {}: {e}", path.display()))
}

#[derive(Serialize)]
struct EvalMeta<'a> {
    version: &'a str,
    seed: u64,
    radius: f64,
    edge_clamp: bool,
    sample_mode: &'a str,
    soft_sigma: Option<f64>,
    generator: &'a GeneratorConfig,
    scorer: &'a ScorerConfig,
    optimizer: OptimizerMeta,
    report: &'a layoutattn::evaluation::EvalReport,
}

fn cmd_eval(a: EvalArgs) -> ExitCode {
    let file = match std::fs::File::open(&a.data) {
        Ok(f) => f,
        Err(e) => return fail(EXIT_INPUT, &format!("opening {}: {e}", a.data.display())),
    };
    let items: Vec<DatasetItem> = match read_jsonl(std::io::BufReader::new(file)) {
        Ok(items) => items,
        Err(e) => return fail(EXIT_INPUT, &e.to_string()),
    };
    let params = match &a.ckpt {
        Some(p) => match load_checkpoint(p) {
            Ok(params) => Some(params),
            Err(e) => return fail(EXIT_INPUT, &e.to_string()),
        },
        None => None,
    };
    let mut rows: Vec<SuiteRowSpec> = a
        .variants
        .iter()
        .map(|&v| SuiteRowSpec { variant: v.into(), layout_source: LayoutSource::Predicted })
        .collect();
    if a.ground_truth_layout {
        rows.push(SuiteRowSpec {
            variant: Variant::Full,
            layout_source: LayoutSource::GroundTruth,
        });
    }
    if rows.is_empty() {
        return fail(EXIT_INPUT, "nothing to evaluate: no variants and no ground-truth row");
    }
    let cfg = SuiteConfig {
        optimizer: OptimizerConfig {
            lr: a.opt_lr,
            iterations: a.iterations,
            gradient_mode: match a.gradient {
                GradientArg::FiniteDifference => GradientMode::FiniteDifference,
                GradientArg::Analytic => GradientMode::Analytic,
            },
            soft_sigma: a.soft_sigma,
            ..OptimizerConfig::default()
        },
        region_radius: a.radius,
        sample_mode: match a.sample_mode {
            SampleModeArg::ArgmaxMean => SampleMode::ArgmaxMean,
            SampleModeArg::Sample => SampleMode::Sample,
        },
        edge_clamp: a.edge_clamp,
        ..SuiteConfig::default()
    };
    let report = match run_suite(&items, &rows, params.as_ref(), &cfg, a.seed) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_INPUT, &e.to_string()),
    };

    let meta = EvalMeta {
        version: layoutattn::VERSION,
        seed: a.seed,
        radius: a.radius,
        edge_clamp: a.edge_clamp,
        sample_mode: match a.sample_mode {
            SampleModeArg::ArgmaxMean => "argmax_mean",
            SampleModeArg::Sample => "sample",
        },
        soft_sigma: a.soft_sigma,
        generator: &cfg.gen,
        scorer: &cfg.scorer,
        optimizer: OptimizerMeta {
            lr: cfg.optimizer.lr,
            iterations: cfg.optimizer.iterations,
            clamp_lo: cfg.optimizer.clamp_lo,
            clamp_hi: cfg.optimizer.clamp_hi,
            gradient_mode: match cfg.optimizer.gradient_mode {
                GradientMode::FiniteDifference => "finite_difference",
                GradientMode::Analytic => "analytic",
            },
            variant: "per_row",
        },
        report: &report,
    };
    if let Err(e) = write_json(&suffixed(&a.out, ".json"), &meta) {
        return fail(EXIT_INPUT, &e);
    }
    let csv = report.to_csv();
    if let Err(e) = std::fs::write(suffixed(&a.out, ".csv"), &csv) {
        return fail(EXIT_INPUT, &format!("writing csv: {e}"));
    }

    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(
        stdout,
        "{:<16} {:<13} {:>6} {:>8} {:>8} {:>7}",
        "variant", "layout", "items", "recall", "sprel", "failed"
    );
    for row in &report.rows {
        let sprel = row
            .sprel_precision
            .map(|p| format!("{p:.4}"))
            .unwrap_or_else(|| "-".to_string());
        let _ = writeln!(
            stdout,
            "{:<16} {:<13} {:>6} {:>8.4} {:>8} {:>7}",
            row.variant, row.layout_source, row.items, row.object_recall, sprel, row.failures
        );
    }
    let all_failed = report.rows.iter().all(|r| r.failures == r.items);
    if all_failed {
        return fail(EXIT_INPUT, "every item failed in every row");
    }
    ExitCode::SUCCESS
}

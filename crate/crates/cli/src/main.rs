//! `vsd`: dataset generation, training, sampling, stroke sorting and
//! initialization, rendering and evaluation.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use vsd_core::dataset::{self, DatasetManifest, Split};
use vsd_core::denoiser::{DenoiserModel, Refiner};
use vsd_core::diffusion::sample_traced;
use vsd_core::evalkit;
use vsd_core::geometry::{from_svg, to_svg};
use vsd_core::rasterizer::{hard_raster, load_image_gray, resize, save_png, soft_raster};
use vsd_core::strokeops::{initialize, sort_strokes, AttentionMask};
use vsd_core::training::{self, RefineSource, TrainOutputs};
use vsd_core::{Canvas, Sketch, VsdError};

use config::RunConfig;

/// Stroke width of written SVGs and rendered PNGs, in canvas pixels.
const SVG_STROKE_WIDTH: f64 = 2.0;

#[derive(Parser, Debug)]
#[command(name = "vsd", version, about = "Vector sketch diffusion toolkit", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration; flags override it [default: none]
    #[arg(long, value_name = "JSON")]
    config: Option<PathBuf>,
    /// Root seed for every random stage [default: 0, or the config value]
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a procedural toy dataset, or ingest existing sample directories
    DatasetGen(DatasetGenArgs),
    /// Train the denoiser and condition encoder
    Train(TrainArgs),
    /// Fine-tune a refinement copy of a trained model
    Refine(RefineArgs),
    /// Sample a sketch for one image, or for every image of a dataset split
    Sample(SampleArgs),
    /// Reorder the strokes of an SVG by contour and attention scores
    Sort(SortArgs),
    /// Place initial strokes from an attention map and mask
    Init(InitArgs),
    /// Rasterize an SVG to PNG
    Render(RenderArgs),
    /// Compare sampled SVGs against a dataset split
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct DatasetGenArgs {
    #[command(flatten)]
    common: Common,
    /// Output dataset directory [default: required]
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Number of toy samples [default: 200]
    #[arg(long, value_name = "N")]
    n_samples: Option<usize>,
    /// Strokes per sketch [default: 32]
    #[arg(long, value_name = "N")]
    n_strokes: Option<usize>,
    /// Ingest sample directories from DIR instead of generating [default: none]
    #[arg(long, value_name = "DIR")]
    ingest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory for checkpoints and metrics.jsonl [default: required]
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Dataset directory [default: config data.dataset]
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Optimizer steps [default: 1000]
    #[arg(long, value_name = "N")]
    steps: Option<usize>,
    /// Batch size [default: 32]
    #[arg(long, value_name = "N")]
    batch: Option<usize>,
    /// Adam learning rate [default: 5e-5]
    #[arg(long, value_name = "F")]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct RefineArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory for refiner.vsdc and refine_metrics.jsonl [default: required]
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Dataset directory [default: config data.dataset]
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Trained model weights [default: config data.model]
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Optimizer steps [default: 500]
    #[arg(long, value_name = "N")]
    steps: Option<usize>,
    /// Adam learning rate [default: 5e-6]
    #[arg(long, value_name = "F")]
    lr: Option<f64>,
    /// Training inputs: sampler_outputs or gaussian_perturb [default: sampler_outputs]
    #[arg(long, value_name = "SOURCE")]
    source: Option<String>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    common: Common,
    /// Output SVG file, or a directory when --data is given [default: required]
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Conditioning image [default: none]
    #[arg(long, value_name = "PNG")]
    image: Option<PathBuf>,
    /// Sample every image of this dataset's split instead of --image [default: none]
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Dataset split sampled with --data: train or test [default: test]
    #[arg(long, value_name = "SPLIT")]
    split: Option<String>,
    /// Trained model weights [default: config data.model]
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Refiner weights [default: config data.refiner]
    #[arg(long, value_name = "FILE")]
    refiner: Option<PathBuf>,
    /// Skip the refinement step [default: off]
    #[arg(long)]
    no_refine: bool,
    /// Classifier-free guidance scale [default: 2.5]
    #[arg(long, value_name = "F")]
    guidance: Option<f64>,
    /// Also write a PNG render of the result [default: none]
    #[arg(long, value_name = "PNG")]
    png: Option<PathBuf>,
    /// Write every intermediate clean-sketch prediction as step-TT.svg [default: none]
    #[arg(long, value_name = "DIR")]
    steps_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SortArgs {
    #[command(flatten)]
    common: Common,
    /// Output SVG [default: required]
    #[arg(long, value_name = "SVG")]
    out: PathBuf,
    /// Input SVG [default: required]
    #[arg(long, value_name = "SVG")]
    svg: PathBuf,
    /// Object mask PNG [default: required]
    #[arg(long, value_name = "PNG")]
    mask: PathBuf,
    /// Attention map PNG [default: required]
    #[arg(long, value_name = "PNG")]
    attention: PathBuf,
}

#[derive(Args, Debug)]
struct InitArgs {
    #[command(flatten)]
    common: Common,
    /// Output SVG [default: required]
    #[arg(long, value_name = "SVG")]
    out: PathBuf,
    /// Object mask PNG [default: required]
    #[arg(long, value_name = "PNG")]
    mask: PathBuf,
    /// Attention map PNG [default: required]
    #[arg(long, value_name = "PNG")]
    attention: PathBuf,
    /// Number of strokes [default: 32]
    #[arg(long, value_name = "N")]
    n: Option<usize>,
    /// Number of regions [default: round(sqrt(n))]
    #[arg(long, value_name = "K")]
    regions: Option<usize>,
    /// Canvas side in pixels [default: mask width]
    #[arg(long, value_name = "PX")]
    canvas: Option<f64>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[command(flatten)]
    common: Common,
    /// Output PNG [default: required]
    #[arg(long, value_name = "PNG")]
    out: PathBuf,
    /// Input SVG [default: required]
    #[arg(long, value_name = "SVG")]
    svg: PathBuf,
    /// Output resolution in pixels [default: canvas width]
    #[arg(long, value_name = "PX")]
    res: Option<usize>,
    /// Use the soft rasterizer with the config's raster settings [default: off]
    #[arg(long)]
    soft: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory for eval_report.json [default: required]
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Directory of sampled <id>.svg files [default: required]
    #[arg(long, value_name = "DIR")]
    outputs: PathBuf,
    /// Dataset holding the ground truth [default: config data.dataset]
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Split to evaluate: train or test [default: test]
    #[arg(long, value_name = "SPLIT")]
    split: Option<String>,
}

/// Failure carrying its exit code.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl From<VsdError> for Failure {
    fn from(e: VsdError) -> Self {
        let (code, kind) = match &e {
            VsdError::Numerical(_) => (3, "numerical"),
            _ => (2, "data"),
        };
        Failure { code, kind, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        VsdError::from(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 1, kind: "usage", message: message.into() }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(n) = threads()? {
        cfg.threads = Some(n);
    }
    cfg.derive_seeds();
    Ok(cfg)
}

fn threads() -> CliResult<Option<usize>> {
    match std::env::var("VSD_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(usage(format!("VSD_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(None),
    }
}

fn parse_split(s: Option<&str>) -> CliResult<Split> {
    match s.unwrap_or("test") {
        "test" => Ok(Split::Test),
        "train" => Ok(Split::Train),
        other => Err(usage(format!("unknown split `{other}`, expected train or test"))),
    }
}

fn required_path(flag: Option<&Path>, config: &Option<String>, name: &str) -> CliResult<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| config.as_ref().map(PathBuf::from))
        .ok_or_else(|| usage(format!("--{name} is required (or set data.{name} in the config)")))
}

fn parent_dir(file: &Path) -> PathBuf {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn read_svg(path: &Path) -> CliResult<Sketch> {
    let text = fs::read_to_string(path).map_err(|e| VsdError::Invalid(format!("cannot read {}: {e}", path.display())))?;
    Ok(from_svg(&text)?)
}

fn write_svg(path: &Path, sketch: &Sketch) -> CliResult<()> {
    fs::create_dir_all(parent_dir(path))?;
    fs::write(path, to_svg(sketch, SVG_STROKE_WIDTH))?;
    Ok(())
}

fn render_png(sketch: &Sketch, res: usize, path: &Path) -> CliResult<()> {
    let px = SVG_STROKE_WIDTH * res as f64 / sketch.canvas.width;
    let grid = hard_raster(sketch, res, res, px)?;
    fs::create_dir_all(parent_dir(path))?;
    save_png(&grid, path)?;
    Ok(())
}

fn dataset_gen(a: DatasetGenArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(n) = a.n_samples {
        cfg.toy.n_samples = n;
    }
    if let Some(n) = a.n_strokes {
        cfg.toy.n_strokes = n;
    }
    cfg.data.dataset = Some(a.out.display().to_string());
    match &a.ingest {
        Some(src) => {
            let report = dataset::ingest(src, &a.out, cfg.toy.n_strokes)?;
            for (id, err) in &report.rejected {
                eprintln!("{}", json!({"rejected": id, "message": err.to_string()}));
            }
            println!("{}", json!({"accepted": report.manifest.samples.len(), "rejected": report.rejected.len()}));
        }
        None => {
            let m = dataset::generate_toy(&a.out, &cfg.toy, cfg.stage_seed("dataset"))?;
            println!("{}", json!({"samples": m.samples.len(), "dir": a.out.display().to_string()}));
        }
    }
    cfg.write(&a.out)?;
    Ok(())
}

fn load_dataset(path: &Path, split: Option<Split>) -> CliResult<(DatasetManifest, Vec<dataset::SketchSample>)> {
    let m = DatasetManifest::load(path)?;
    let samples = match split {
        Some(s) => dataset::load_split(&m, s)?,
        None => m.ids().map(|id| dataset::load_sample(&m, id)).collect::<vsd_core::Result<Vec<_>>>()?,
    };
    Ok((m, samples))
}

fn train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.batch {
        cfg.train.batch = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    let data = required_path(a.data.as_deref(), &cfg.data.dataset, "data")?;
    cfg.data.dataset = Some(data.display().to_string());
    cfg.data.model = Some(a.out.join("final.vsdc").display().to_string());
    cfg.write(&a.out)?;
    let (m, samples) = load_dataset(&data, Some(Split::Train))?;
    cfg.denoiser.n_strokes = m.n_strokes;
    let mut model = DenoiserModel::<f32>::new(cfg.denoiser.clone(), cfg.stage_seed("init-weights"))?;
    let mut log = fs::File::create(a.out.join("metrics.jsonl"))?;
    let outputs = TrainOutputs { log: Some(&mut log), checkpoint_dir: Some(a.out.clone()) };
    let logs = training::train(&mut model, &samples, &cfg.train, &cfg.schedule.build()?, outputs)?;
    if let Some(last) = logs.last() {
        println!("{}", serde_json::to_string(last).map_err(VsdError::from)?);
    }
    Ok(())
}

fn refine(a: RefineArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(v) = a.steps {
        cfg.refine.steps = v;
    }
    if let Some(v) = a.lr {
        cfg.refine.lr = v;
    }
    if let Some(s) = &a.source {
        cfg.refine.source = match s.as_str() {
            "sampler_outputs" => RefineSource::SamplerOutputs,
            "gaussian_perturb" => RefineSource::GaussianPerturb,
            other => return Err(usage(format!("unknown refine source `{other}`"))),
        };
    }
    let data = required_path(a.data.as_deref(), &cfg.data.dataset, "data")?;
    let model_path = required_path(a.model.as_deref(), &cfg.data.model, "model")?;
    cfg.data.dataset = Some(data.display().to_string());
    cfg.data.model = Some(model_path.display().to_string());
    cfg.data.refiner = Some(a.out.join("refiner.vsdc").display().to_string());
    cfg.write(&a.out)?;
    let (_, samples) = load_dataset(&data, Some(Split::Train))?;
    let base = DenoiserModel::<f32>::load(&model_path)?;
    let mut refiner = base.clone_for_refinement();
    let mut log = fs::File::create(a.out.join("refine_metrics.jsonl"))?;
    let sched = cfg.schedule.build()?;
    training::train_refiner(&base, &mut refiner, &samples, &cfg.refine, &cfg.sampler, &sched, Some(&mut log))?;
    refiner.model().save(a.out.join("refiner.vsdc"))?;
    Ok(())
}

fn sample(a: SampleArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(g) = a.guidance {
        cfg.sampler.guidance_scale = g;
    }
    if a.no_refine {
        cfg.sampler.apply_refinement = false;
    }
    let model_path = required_path(a.model.as_deref(), &cfg.data.model, "model")?;
    let refiner_path = a.refiner.clone().or_else(|| cfg.data.refiner.as_ref().map(PathBuf::from));
    if cfg.sampler.apply_refinement && refiner_path.is_none() {
        return Err(usage("refinement is on but no --refiner was given (pass --no-refine to skip it)"));
    }
    cfg.data.model = Some(model_path.display().to_string());
    cfg.data.refiner = refiner_path.as_ref().map(|p| p.display().to_string());
    let model = DenoiserModel::<f32>::load(&model_path)?;
    let refiner = match (&refiner_path, cfg.sampler.apply_refinement) {
        (Some(p), true) => Some(Refiner::from_model(DenoiserModel::<f32>::load(p)?)),
        _ => None,
    };
    let sched = cfg.schedule.build()?;
    let canvas = Canvas::default();
    match (&a.image, &a.data) {
        (Some(image), None) => {
            cfg.write(&parent_dir(&a.out))?;
            let img = resize(&load_image_gray(image)?, vsd_core::denoiser::COND_RES);
            let steps_dir = a.steps_dir.clone();
            if let Some(d) = &steps_dir {
                fs::create_dir_all(d)?;
            }
            let mut step_err = None;
            let sketch = sample_traced(&model, refiner.as_ref(), &img, &cfg.sampler, &sched, canvas, |t, x0| {
                if let Some(d) = &steps_dir {
                    if let Err(e) = fs::write(d.join(format!("step-{t:02}.svg")), to_svg(&x0.denormalize(canvas), SVG_STROKE_WIDTH)) {
                        step_err.get_or_insert(e);
                    }
                }
            })?;
            if let Some(e) = step_err {
                return Err(e.into());
            }
            write_svg(&a.out, &sketch)?;
            if let Some(p) = &a.png {
                render_png(&sketch, canvas.width.round() as usize, p)?;
            }
        }
        (None, Some(data)) => {
            cfg.data.dataset = Some(data.display().to_string());
            cfg.write(&a.out)?;
            let (m, samples) = load_dataset(data, Some(parse_split(a.split.as_deref())?))?;
            for s in &samples {
                let sc = vsd_core::diffusion::SamplerConfig {
                    seed: vsd_core::seeds::derive_seed(cfg.sampler.seed, &s.id, 0),
                    ..cfg.sampler.clone()
                };
                let sketch = vsd_core::diffusion::sample(&model, refiner.as_ref(), &s.cond_image, &sc, &sched, m.canvas)?;
                write_svg(&a.out.join(format!("{}.svg", s.id)), &sketch)?;
            }
        }
        _ => return Err(usage("give exactly one of --image or --data")),
    }
    Ok(())
}

fn sort(a: SortArgs) -> CliResult<()> {
    let cfg = load_config(&a.common)?;
    cfg.write(&parent_dir(&a.out))?;
    let sketch = read_svg(&a.svg)?;
    let am = AttentionMask::load(&a.attention, &a.mask)?;
    let order = sort_strokes(&sketch, &am, &cfg.sort)?;
    write_svg(&a.out, &sketch.permuted(&order))
}

fn init(a: InitArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(n) = a.n {
        cfg.init.n_strokes = n;
    }
    if a.regions.is_some() {
        cfg.init.regions = a.regions;
    }
    cfg.write(&parent_dir(&a.out))?;
    let am = AttentionMask::load(&a.attention, &a.mask)?;
    let side = a.canvas.unwrap_or(am.width() as f64);
    let canvas = Canvas::new(side, side * am.height() as f64 / am.width() as f64)?;
    let sketch = initialize(&am, &cfg.init, canvas, cfg.stage_seed("init"))?;
    write_svg(&a.out, &sketch)
}

fn render(a: RenderArgs) -> CliResult<()> {
    let cfg = load_config(&a.common)?;
    cfg.write(&parent_dir(&a.out))?;
    let sketch = read_svg(&a.svg)?;
    let res = a.res.unwrap_or(sketch.canvas.width.round() as usize);
    if res == 0 {
        return Err(usage("--res must be positive"));
    }
    if a.soft {
        let rc = vsd_core::rasterizer::SoftRasterConfig { height: res, width: res, ..cfg.raster.clone() };
        let grid = soft_raster(&sketch.normalize(), &rc)?;
        fs::create_dir_all(parent_dir(&a.out))?;
        save_png(&grid, &a.out)?;
        Ok(())
    } else {
        render_png(&sketch, res, &a.out)
    }
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common)?;
    let data = required_path(a.data.as_deref(), &cfg.data.dataset, "data")?;
    cfg.data.dataset = Some(data.display().to_string());
    cfg.write(&a.out)?;
    let (_, samples) = load_dataset(&data, Some(parse_split(a.split.as_deref())?))?;
    let mut ids = Vec::new();
    let (mut outs, mut truths, mut images) = (Vec::new(), Vec::new(), Vec::new());
    for s in samples {
        let path = a.outputs.join(format!("{}.svg", s.id));
        let out = read_svg(&path).map_err(|f| Failure { message: format!("{}: {}", path.display(), f.message), ..f })?;
        ids.push(s.id);
        outs.push(out);
        truths.push(s.sketch);
        images.push(s.cond_image);
    }
    let report = evalkit::evaluate(&ids, &outs, &truths, &images)?;
    let text = serde_json::to_string_pretty(&report).map_err(VsdError::from)?;
    fs::write(a.out.join("eval_report.json"), format!("{text}\n"))?;
    println!("{}", serde_json::to_string(&report.mean).map_err(VsdError::from)?);
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::DatasetGen(a) => dataset_gen(a),
        Command::Train(a) => train(a),
        Command::Refine(a) => refine(a),
        Command::Sample(a) => sample(a),
        Command::Sort(a) => sort(a),
        Command::Init(a) => init(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
    }
}

fn fail(f: Failure) -> ExitCode {
    let line = json!({"error": f.kind, "code": f.code, "message": f.message});
    let _ = writeln!(std::io::stderr(), "{line}");
    ExitCode::from(f.code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ").to_string();
            return fail(usage(first));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}

//! `hire`: enrichment, compute model, self-test and desk training.
//!
//! Exit codes: 0 ok, 1 self-test failure, 2 I/O or unreadable file,
//! 3 configuration or shape error, 4 training divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hire_core::config::RunConfig;
use hire_core::costmodel::{
    pipeline_cost, reproduce_table2, scaling_sweep, sweep_resolution, sweep_vits, to_json, write_csv, CostReport,
    PipelineKind, Table2Row,
};
use hire_core::encoder::{load_features, SurrogateEncoder};
use hire_core::enricher::{bicubic_baseline_streamed, enrich_streamed, enricher_init, Geometry};
use hire_core::harness::{write_loss_csv, Trainer};
use hire_core::imageio::{load_ppm, prepare_pair};
use hire_core::jbu::Normalization;
use hire_core::selftest::{run_selftest, SelftestOptions};
use hire_core::weights::WeightStore;
use hire_core::{DType, Error, HirtWriter, Result};

#[derive(Parser, Debug)]
#[command(name = "hire", version, about = "High-resolution feature enrichment toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Enrich encoder features of one image and write fused and x_en tensors.
    ///
    /// Writes {OUT}.fused.hirt (f64, 1×2C×g×g) and {OUT}.xen.hirt
    /// (f32, 1×C×R×R; 1.85 GB at the default 672 geometry).
    Enrich(EnrichArgs),
    /// Print first-token MAC counts of a pipeline.
    Flops(FlopsArgs),
    /// Run the built-in oracle, gradient and normalization suites.
    Selftest(SelftestArgs),
    /// Train the enricher at desk scale on synthetic images.
    Train(TrainArgs),
}

#[derive(clap::Args, Debug)]
struct EnrichArgs {
    /// Input image (binary PPM, P6).
    #[arg(long)]
    image: PathBuf,
    /// Encoder features as a HIRT file; the surrogate encoder runs when absent.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Enricher weights (HIRW); seeded initialization when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Method::Hire)]
    method: Method,
    /// Output path prefix.
    #[arg(long)]
    out: PathBuf,
    /// RunConfig JSON; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Method {
    /// Guided upsampling stack.
    Hire,
    /// Plain bicubic upsampling of the features.
    Bicubic,
}

#[derive(clap::Args, Debug)]
struct FlopsArgs {
    /// Required unless --reproduce-table2 or --sweep is given.
    #[arg(long, value_enum)]
    pipeline: Option<Pipeline>,
    /// Input resolution [default: the ViT resolution for vanilla, 2× it for s2, 672 for hire].
    #[arg(long)]
    image_res: Option<u64>,
    /// ViT size: L (ViT-L/14), H (ViT-H/14) or G (ViT-bigG/14).
    #[arg(long, default_value = "L")]
    vit: String,
    /// Native ViT input resolution.
    #[arg(long, default_value_t = 336)]
    vit_res: u64,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Print the five published first-token costs next to the model values.
    #[arg(long)]
    reproduce_table2: bool,
    /// Print all three pipelines for ViT-L/H/G at 224 and 336.
    #[arg(long, conflicts_with = "reproduce_table2")]
    sweep: bool,
    /// RunConfig JSON supplying LLM, projector and enricher shapes.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Pipeline {
    Vanilla,
    S2,
    Hire,
}

impl From<Pipeline> for PipelineKind {
    fn from(p: Pipeline) -> Self {
        match p {
            Pipeline::Vanilla => PipelineKind::Vanilla,
            Pipeline::S2 => PipelineKind::S2,
            Pipeline::Hire => PipelineKind::Hire,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Table,
    Csv,
    Json,
}

#[derive(clap::Args, Debug)]
struct SelftestArgs {
    /// Negative control: build JBU kernels without normalization.
    #[arg(long, hide = true)]
    corrupt_normalization: bool,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    /// RunConfig JSON; its `train` section is used. Built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Learning rate override [config default: 2e-5].
    #[arg(long)]
    lr: Option<f64>,
    /// Step count override [config default: 200].
    #[arg(long)]
    steps: Option<usize>,
    /// Seed override [config default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Output prefix: writes {OUT}.loss.csv and {OUT}.ckpt.hirw.
    #[arg(long, default_value = "train")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code() as u8);
    }
    let result = match cli.command {
        Command::Enrich(a) => cmd_enrich(&a),
        Command::Flops(a) => cmd_flops(&a),
        Command::Selftest(a) => cmd_selftest(&a),
        Command::Train(a) => cmd_train(&a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("HIRE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("HIRE_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_enrich(a: &EnrichArgs) -> Result<u8> {
    let cfg = load_config(a.config.as_deref())?;
    let raw = load_ppm(&a.image)?;
    let (high, low) = prepare_pair(&raw, &cfg.image)?;
    let feats = match &a.features {
        Some(p) => load_features(p, &cfg.encoder)?,
        None => SurrogateEncoder::new(&cfg.encoder)?.encode(&low)?,
    };
    let geom = Geometry::of(high.shape(), feats.shape())?;
    let weights = match (&a.weights, a.method) {
        (_, Method::Bicubic) => None,
        (Some(p), Method::Hire) => Some(WeightStore::load(p)?),
        (None, Method::Hire) => Some(enricher_init(&cfg.enricher)?),
    };
    if let Some(w) = &weights {
        w.require(&cfg.enricher.weight_names())?;
        geom.validate_pyramid()?;
    }

    let fused_path = with_suffix(&a.out, ".fused.hirt");
    let xen_path = with_suffix(&a.out, ".xen.hirt");
    let mut xen = HirtWriter::create(&xen_path, &geom.x_en_shape(), DType::F32)?;
    let fused = match &weights {
        Some(w) => enrich_streamed(&high, &feats, w, &cfg.enricher, &mut xen)?,
        None => bicubic_baseline_streamed(&feats, geom.image_res, cfg.enricher.chunk_channels, &mut xen)?,
    };
    fused.save(&fused_path, DType::F64)?;
    if let Err(e) = xen.finish() {
        let _ = std::fs::remove_file(&fused_path);
        return Err(e);
    }
    println!("fused {:?} -> {}", fused.shape(), fused_path.display());
    println!("x_en  {:?} -> {}", geom.x_en_shape(), xen_path.display());
    Ok(0)
}

fn cmd_flops(a: &FlopsArgs) -> Result<u8> {
    let mut cfg = load_config(a.config.as_deref())?;
    cfg.cost.vit = a.vit.clone();
    cfg.cost.vit_res = a.vit_res;
    let vit = cfg.vit()?;
    vit.validate()?;

    if a.reproduce_table2 {
        let rows = reproduce_table2(&cfg.pipeline(PipelineKind::Vanilla, a.vit_res)?)?;
        print_table2(&rows, a.format)?;
        return Ok(0);
    }
    let reports: Vec<CostReport> = if a.sweep {
        let template = cfg.pipeline(PipelineKind::Hire, a.image_res.unwrap_or(672))?;
        scaling_sweep(&sweep_vits(), &[PipelineKind::Vanilla, PipelineKind::S2, PipelineKind::Hire], &template)?
    } else {
        let kind: PipelineKind = a
            .pipeline
            .ok_or_else(|| Error::Config("--pipeline is required unless --reproduce-table2 or --sweep is given".into()))?
            .into();
        let res = a.image_res.unwrap_or_else(|| sweep_resolution(kind, &vit, 672));
        vec![pipeline_cost(&cfg.pipeline(kind, res)?)?]
    };
    print_reports(&reports, a.format)?;
    Ok(0)
}

fn print_reports(reports: &[CostReport], format: Format) -> Result<()> {
    match format {
        Format::Json => println!("{}", to_json(reports)?),
        Format::Csv => write_csv(reports, std::io::stdout().lock())?,
        Format::Table => {
            println!(
                "{:<8} {:>5} {:<5} {:>6} {:>10} {:>10} {:>10} {:>10} {:>10}",
                "pipeline", "res", "vit", "passes", "vit", "enricher", "projector", "llm", "total"
            );
            for r in reports {
                let t = |m: u64| format!("{:.4}", m as f64 / 1e12);
                println!(
                    "{:<8} {:>5} {:<5} {:>6} {:>10} {:>10} {:>10} {:>10} {:>10}",
                    r.pipeline.as_str(),
                    r.image_res,
                    r.vit,
                    r.vit_passes,
                    t(r.vit_macs),
                    t(r.enricher_macs),
                    t(r.projector_macs),
                    t(r.llm_macs),
                    t(r.total_macs)
                );
            }
            println!("(T = 1e12 MACs, one multiply-accumulate counted as one FLOP)");
        }
    }
    Ok(())
}

fn print_table2(rows: &[Table2Row], format: Format) -> Result<()> {
    match format {
        Format::Json => {
            println!("{}", serde_json::to_string_pretty(rows).map_err(|e| Error::Format(e.to_string()))?)
        }
        Format::Csv => {
            println!("model,pipeline,image_res,published_tflops,model_tmacs,rel_error");
            for r in rows {
                println!(
                    "{},{},{},{},{},{}",
                    r.model,
                    r.pipeline.as_str(),
                    r.image_res,
                    r.published_tflops,
                    r.model_tmacs,
                    r.rel_error
                );
            }
        }
        Format::Table => {
            println!(
                "{:<18} {:<8} {:>5} {:>10} {:>10} {:>8}",
                "model", "pipeline", "res", "published", "model", "rel.err"
            );
            for r in rows {
                println!(
                    "{:<18} {:<8} {:>5} {:>10.3} {:>10.4} {:>7.2}%",
                    r.model,
                    r.pipeline.as_str(),
                    r.image_res,
                    r.published_tflops,
                    r.model_tmacs,
                    100.0 * r.rel_error
                );
            }
        }
    }
    Ok(())
}

fn cmd_selftest(a: &SelftestArgs) -> Result<u8> {
    let opts = SelftestOptions {
        normalization: if a.corrupt_normalization {
            Normalization::Unnormalized
        } else {
            Normalization::Softmax
        },
    };
    let report = run_selftest(&opts);
    for line in report.lines() {
        println!("{line}");
    }
    if report.passed() {
        println!("selftest passed");
        Ok(0)
    } else {
        let failing = report.failing().join(", ");
        println!("selftest failed: {failing}");
        eprintln!("selftest failed: {failing}");
        Ok(1)
    }
}

fn cmd_train(a: &TrainArgs) -> Result<u8> {
    let mut cfg = load_config(a.config.as_deref())?.train;
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(steps) = a.steps {
        cfg.steps = steps;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let mut trainer = Trainer::new(&cfg)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for i in 0..cfg.steps {
        let loss = trainer.step()?;
        if i % 20 == 0 || i + 1 == cfg.steps {
            eprintln!("step {i:>5}  loss {loss:.6}");
        }
        losses.push(loss);
    }
    let csv = with_suffix(&a.out, ".loss.csv");
    let ckpt = with_suffix(&a.out, ".ckpt.hirw");
    trainer.save_checkpoint(&ckpt)?;
    if let Err(e) = write_loss_csv(&losses, &csv) {
        let _ = std::fs::remove_file(&ckpt);
        return Err(e);
    }
    println!("loss curve -> {}", csv.display());
    println!("checkpoint -> {}", ckpt.display());
    Ok(0)
}

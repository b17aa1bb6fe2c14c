use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use hsr_core::arch::{dump_features, param_count, HsrConfig, Stage};
use hsr_core::hqs::{hqs_run_image, write_history, DegradationOperator, HqsConfig};
use hsr_core::imaging::{self, bicubic_resize, write_gray_png, Image};
use hsr_core::metrics::{lss_image, psnr, ssim, EvalReport, EvalRow, LssParams, Psnr};
use hsr_core::trainer::{build_pairs, load_checkpoint, train, TrainConfig};
use hsr_core::{gradcheck, Error};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Hierarchical super-resolution network toolkit.
#[derive(Parser, Debug)]
#[command(name = "hsr", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network from a JSON training config.
    Train {
        /// Training config (JSON). `HSR_SEED` overrides its seed.
        #[arg(long)]
        config: PathBuf,
    },
    /// Super-resolve one image with a trained checkpoint.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
    },
    /// Bicubic-downscale an image (center-cropped to a multiple of the scale).
    Degrade {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        #[arg(long)]
        scale: usize,
    },
    /// Evaluate a checkpoint on a directory of HR images.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        hr_dir: PathBuf,
        #[arg(long)]
        scale: usize,
        /// Compare the luma channel only (default: RGB).
        #[arg(long)]
        y_only: bool,
        /// Border pixels excluded from PSNR and SSIM [default: the scale].
        #[arg(long)]
        crop: Option<usize>,
        /// Per-image CSV output (default: none).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Image-level local self-similarity on the Lab lightness channel.
    Lss {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Parameter count of a model (or training) config.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finite-difference gradient checks of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        cases: usize,
    },
    /// Degrade a reference image, restore it with the classical HQS solver,
    /// and compare against bicubic upscaling.
    HqsDemo {
        /// Reference HR image.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        scale: usize,
        #[arg(long, default_value_t = 8)]
        iters: usize,
        /// Objective history CSV (default: none).
        #[arg(long)]
        history: Option<PathBuf>,
        /// Restored image (default: none).
        #[arg(long = "out")]
        output: Option<PathBuf>,
    },
    /// Dump intermediate feature maps as 8-bit grayscale PNGs.
    Features {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Only this stage [default: all stages].
        #[arg(long)]
        stage: Option<String>,
    },
}

enum Failure {
    Usage(String),
    Numeric(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_NUMERIC)
        }
        Err(Failure::Core(e @ Error::UnknownStage { .. })) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { EXIT_NUMERIC } else { EXIT_DATA })
        }
    }
}

fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::Train { config } => cmd_train(&config),
        Command::Infer { ckpt, input, output } => {
            let net = load_checkpoint(&ckpt)?.into_net()?;
            let sr = net.super_resolve(&imaging::load(&input)?)?;
            imaging::save(&sr, &output)?;
            println!("{}x{} -> {}", sr.width(), sr.height(), output.display());
            Ok(())
        }
        Command::Degrade { input, output, scale } => {
            check_scale(scale)?;
            let hr = imaging::load(&input)?.crop_to_multiple(scale)?;
            let lr = bicubic_resize(&hr, 1, scale, true)?;
            imaging::save(&lr, &output)?;
            println!("{}x{} -> {}x{}", hr.width(), hr.height(), lr.width(), lr.height());
            Ok(())
        }
        Command::Eval {
            ckpt,
            hr_dir,
            scale,
            y_only,
            crop,
            csv,
        } => cmd_eval(&ckpt, &hr_dir, scale, y_only, crop.unwrap_or(scale), csv.as_deref()),
        Command::Lss { input } => {
            println!("{:.6}", lss_image(&imaging::load(&input)?, &LssParams::default())?);
            Ok(())
        }
        Command::Params { config } => cmd_params(&config),
        Command::Gradcheck { seed, cases } => cmd_gradcheck(seed, cases),
        Command::HqsDemo {
            input,
            scale,
            iters,
            history,
            output,
        } => cmd_hqs_demo(&input, scale, iters, history.as_deref(), output.as_deref()),
        Command::Features {
            ckpt,
            input,
            out_dir,
            stage,
        } => cmd_features(&ckpt, &input, &out_dir, stage.as_deref()),
    }
}

fn check_scale(scale: usize) -> Result<usize, Failure> {
    if scale < 2 {
        return Err(Failure::Usage(format!("--scale must be at least 2, got {scale}")));
    }
    Ok(scale)
}

fn seed_override() -> Result<Option<u64>, Failure> {
    match std::env::var("HSR_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("HSR_SEED must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn cmd_train(path: &Path) -> CmdResult {
    let mut cfg = TrainConfig::load(path)?;
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    let report = train(&cfg)?;
    let first = report.history.first().map(|h| h.1).unwrap_or(f64::NAN);
    let last = report.history.last().map(|h| h.1).unwrap_or(f64::NAN);
    println!("steps: {}", report.steps);
    println!("loss: {first:.6} -> {last:.6}");
    println!("checkpoint: {}", cfg.checkpoint.display());
    Ok(())
}

fn cmd_eval(ckpt: &Path, hr_dir: &Path, scale: usize, y_only: bool, crop: usize, csv: Option<&Path>) -> CmdResult {
    check_scale(scale)?;
    let net = load_checkpoint(ckpt)?.into_net()?;
    if net.config().scale != scale {
        return Err(Failure::Usage(format!(
            "checkpoint is a x{} model, --scale is {scale}",
            net.config().scale
        )));
    }
    let data = build_pairs(hr_dir, scale)?;
    let lss_params = LssParams::default();
    let mut report = EvalReport::default();
    for pair in &data.pairs {
        let sr = net.super_resolve(&pair.lr)?;
        let ssim_value = if crop > 0 {
            ssim(&sr.shave(crop)?, &pair.hr.shave(crop)?, y_only)?
        } else {
            ssim(&sr, &pair.hr, y_only)?
        };
        let lss_ok = pair.hr.height() >= lss_params.region && pair.hr.width() >= lss_params.region;
        report.push(EvalRow {
            name: pair.name.clone(),
            psnr: psnr(&sr, &pair.hr, crop, y_only)?,
            ssim: ssim_value,
            lss: if lss_ok { Some(lss_image(&pair.hr, &lss_params)?) } else { None },
        });
    }
    for r in &report.rows {
        let lss = r.lss.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        println!("{:<24} psnr {:>10}  ssim {:.4}  lss {lss}", r.name, r.psnr, r.ssim);
    }
    let mean_psnr = report.mean_psnr().unwrap_or(Psnr::Identical);
    println!("mean psnr {mean_psnr}  ssim {:.4}", report.mean_ssim().unwrap_or(f64::NAN));
    if let Ok((p, s)) = report.psnr_lss_correlation() {
        println!("psnr~lss plcc {p:.4}  srcc {s:.4}");
    }
    if let Some(path) = csv {
        hsr_core::fsutil::atomic_write(path, report.to_csv().as_bytes())?;
    }
    Ok(())
}

/// Accepts a bare model config or a training config with a `model` key.
fn load_model_config(path: &Path) -> Result<HsrConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    let cfg = if value.get("model").is_some() {
        TrainConfig::from_json(&text)?.model
    } else {
        let cfg: HsrConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        cfg
    };
    Ok(cfg)
}

fn cmd_params(path: &Path) -> CmdResult {
    let cfg = load_model_config(path)?;
    let count = param_count(&cfg);
    println!("parameters: {}", count.total);
    for (module, n) in &count.by_module {
        println!("  {module:<16} {n}");
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, cases: usize) -> CmdResult {
    let reports = gradcheck::run_suite(seed, cases)?;
    let mut failed = 0;
    for r in &reports {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<20} {:>3} cases  max rel err {:.3e}  {verdict}", r.op, r.cases, r.max_rel_error);
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(Failure::Numeric(format!("{failed} of {} ops failed", reports.len())));
    }
    Ok(())
}

fn cmd_hqs_demo(input: &Path, scale: usize, iters: usize, history: Option<&Path>, output: Option<&Path>) -> CmdResult {
    check_scale(scale)?;
    let hr = imaging::load(input)?.crop_to_multiple(scale)?;
    let op = DegradationOperator::bicubic(scale)?;
    let planes = [0, 1, 2].map(|c| op.apply(&hr.channel(c)));
    let [r, g, b] = planes;
    let lr = Image::from_planes(&[r?, g?, b?])?;
    let cfg = HqsConfig {
        iterations: iters,
        ..HqsConfig::default()
    };
    let (estimate, hist) = hqs_run_image(&lr, &op, &cfg)?;
    let bicubic = bicubic_resize(&lr, scale, 1, true)?;
    println!("bicubic psnr {}", psnr(&bicubic, &hr, scale, false)?);
    println!("hqs     psnr {}", psnr(&estimate, &hr, scale, false)?);
    if let Some(path) = history {
        write_history(&hist, path)?;
    }
    if let Some(path) = output {
        imaging::save(&estimate, path)?;
    }
    Ok(())
}

fn cmd_features(ckpt: &Path, input: &Path, out_dir: &Path, stage: Option<&str>) -> CmdResult {
    let net = load_checkpoint(ckpt)?.into_net()?;
    let (_, trace) = net.super_resolve_traced(&imaging::load(input)?)?;
    let tags: Vec<&str> = match stage {
        Some(tag) => vec![tag],
        None => Stage::ALL.iter().map(|s| s.tag()).collect(),
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let mut written = 0;
    for tag in tags {
        for map in dump_features(&trace, tag)? {
            write_gray_png(&map.plane, out_dir.join(format!("{}.png", map.name)))?;
            written += 1;
        }
    }
    println!("{written} feature maps -> {}", out_dir.display());
    Ok(())
}

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use arcvq::codebook::kmeans_reduce;
use arcvq::config::TrainConfig;
use arcvq::data::{load_idx, synth_dataset, write_idx, Dataset};
use arcvq::losses::Variant;
use arcvq::metrics::{latent_map_rgb, EvalReport};
use arcvq::pnm::{write_pgm, write_ppm};
use arcvq::suites::{self, Suite};
use arcvq::trainer::{self, load_datasets, MetricsLog, MetricsRow, Trainer};
use arcvq::{Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "arcvq", version, about = "Spherical VQ autoencoder toolkit")]
struct Cli {
    /// Worker threads for data-parallel kernels.
    #[arg(long, global = true, env = "ARCVQ_THREADS", default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one variant and write metrics, checkpoint and summary.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Extra `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint over a full image set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// IDX images; defaults to the validation set named in the checkpoint.
        #[arg(long)]
        images: Option<PathBuf>,
        /// CSV to append to; defaults to metrics.csv next to the checkpoint.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Export codebook norms, pairwise distances and usage.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Recount usage over these IDX images first.
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "all")]
        suite: Suite,
    },
    /// Per-image token grids, reconstructions and latent maps.
    Quantize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Maximum number of images to export.
        #[arg(long, default_value_t = 16)]
        limit: usize,
    },
    /// Shrink the codebook with k-means and save a new checkpoint.
    Reduce {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "k-target")]
        k_target: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic grating dataset as IDX files.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        images: usize,
        #[arg(long, default_value_t = 28)]
        side: usize,
        #[arg(long, default_value_t = 10)]
        clusters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "synth")]
        name: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
    {
        eprintln!("error: cannot start thread pool: {e}");
        return ExitCode::from(1);
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Train {
            config,
            variant,
            seed,
            out,
            epochs,
            overrides,
        } => train(config, variant, seed, out, epochs, &overrides),
        Command::Eval {
            checkpoint,
            images,
            csv,
        } => eval(&checkpoint, images.as_deref(), csv),
        Command::Analyze {
            checkpoint,
            out,
            images,
        } => analyze(&checkpoint, &out, images.as_deref()),
        Command::Gradcheck { suite } => gradcheck(suite),
        Command::Quantize {
            checkpoint,
            images,
            out,
            limit,
        } => quantize(&checkpoint, &images, &out, limit),
        Command::Reduce {
            checkpoint,
            k_target,
            out,
            iters,
            seed,
        } => reduce(&checkpoint, k_target, &out, iters, seed),
        Command::Synth {
            out,
            images,
            side,
            clusters,
            seed,
            name,
        } => synth(&out, images, side, clusters, seed, &name),
    }
}

fn train(
    config: Option<PathBuf>,
    variant: Option<Variant>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    epochs: Option<usize>,
    overrides: &[String],
) -> Result<ExitCode> {
    let mut cfg = match &config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(v) = variant {
        cfg.variant = v;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let (train, val) = load_datasets(&cfg)?;
    let per_epoch = trainer::steps_per_epoch(train.len(), cfg.batch_size);
    let summary = trainer::run_on(&cfg, &train, &val, |r| {
        if (r.step + 1) % per_epoch == 0 {
            eprintln!(
                "epoch {} step {} loss {:.5} recon {:.5}",
                (r.step + 1) / per_epoch,
                r.step + 1,
                r.breakdown.total,
                r.breakdown.recon
            );
        }
    })?;
    println!("{}", summary.line());
    Ok(ExitCode::SUCCESS)
}

fn print_report(r: &EvalReport) {
    println!(
        "psnr={:.6} ssim={:.6} l1={:.8} usage={:.6} perplexity={:.4}{}",
        r.psnr,
        r.ssim,
        r.l1,
        r.usage_fraction,
        r.perplexity,
        if r.ssim_global_fallback {
            " (ssim: global statistics, images smaller than the window)"
        } else {
            ""
        }
    );
}

fn images_or_validation(state: &Trainer, images: Option<&Path>) -> Result<Dataset> {
    match images {
        Some(p) => load_idx(p, None),
        None => Ok(load_datasets(&state.config)?.1),
    }
}

fn eval(checkpoint: &Path, images: Option<&Path>, csv: Option<PathBuf>) -> Result<ExitCode> {
    let mut state = Trainer::load(checkpoint)?;
    let ds = images_or_validation(&state, images)?;
    let report = state.evaluate(&ds)?;
    print_report(&report);
    let csv = csv.unwrap_or_else(|| {
        checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("metrics.csv")
    });
    MetricsLog::append(&csv)?.write_row(&MetricsRow {
        step: state.step(),
        breakdown: None,
        max_norm: Some(state.codebook.max_norm()),
        eval: Some(&report),
    })?;
    Ok(ExitCode::SUCCESS)
}

fn analyze(checkpoint: &Path, out: &Path, images: Option<&Path>) -> Result<ExitCode> {
    let mut state = Trainer::load(checkpoint)?;
    if let Some(p) = images {
        let ds = load_idx(p, None)?;
        state.evaluate(&ds)?;
    }
    std::fs::create_dir_all(out)?;
    let stats = state.codebook.export_stats(out)?;
    let mut text = String::new();
    writeln!(text, "entries: {}", state.codebook.len()).unwrap();
    writeln!(text, "step: {}", state.step()).unwrap();
    writeln!(text, "min_norm: {}", stats.min_norm()).unwrap();
    writeln!(text, "max_norm: {}", stats.max_norm()).unwrap();
    writeln!(text, "mean_norm: {}", stats.mean_norm()).unwrap();
    writeln!(text, "usage_percent: {}", 100.0 * stats.usage_fraction).unwrap();
    writeln!(text, "perplexity: {}", stats.perplexity).unwrap();
    writeln!(text, "zero_norm_rows: {}", stats.zero_norm_rows).unwrap();
    std::fs::write(out.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(suite: Suite) -> Result<ExitCode> {
    let started = std::time::Instant::now();
    let results = suites::run(suite)?;
    print!("{}", suites::format_table(&results));
    let failed = results.iter().filter(|r| !r.pass()).count();
    println!(
        "{} checks, {} failed, {:.2}s",
        results.len(),
        failed,
        started.elapsed().as_secs_f64()
    );
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn quantize(checkpoint: &Path, images: &Path, out: &Path, limit: usize) -> Result<ExitCode> {
    let state = Trainer::load(checkpoint)?;
    let ds = load_idx(images, None)?;
    std::fs::create_dir_all(out)?;
    let n = limit.min(ds.len());
    let (gh, gw) = state.model.grid();
    let side = ds.side;
    for i in 0..n {
        let batch = ds.batch(&[i]);
        let (qr, recon) = state.reconstruct(&batch)?;
        let mut grid = String::new();
        for row in qr.indices.chunks(gw) {
            let line: Vec<String> = row.iter().map(usize::to_string).collect();
            writeln!(grid, "{}", line.join(",")).unwrap();
        }
        std::fs::write(out.join(format!("tokens-{i:04}.csv")), grid)?;
        write_pgm(&out.join(format!("input-{i:04}.pgm")), side, side, batch.data())?;
        write_pgm(&out.join(format!("recon-{i:04}.pgm")), side, side, recon.data())?;
        let rgb = latent_map_rgb(&qr.indices, &state.codebook, (gh, gw))?;
        write_ppm(&out.join(format!("latent-{i:04}.ppm")), gw, gh, rgb.data())?;
    }
    println!("wrote {n} images to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn reduce(checkpoint: &Path, k_target: usize, out: &Path, iters: usize, seed: u64) -> Result<ExitCode> {
    let mut state = Trainer::load(checkpoint)?;
    let before = state.codebook.len();
    let reduced = kmeans_reduce(&state.codebook, k_target, iters, seed)?;
    state.replace_codebook(reduced);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    state.save(out)?;
    println!("reduced codebook {before} -> {k_target}, wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn synth(
    out: &Path,
    images: usize,
    side: usize,
    clusters: usize,
    seed: u64,
    name: &str,
) -> Result<ExitCode> {
    let ds = synth_dataset(images, side, clusters, seed)?;
    std::fs::create_dir_all(out)?;
    let ip = out.join(format!("{name}-images.idx3-ubyte"));
    let lp = out.join(format!("{name}-labels.idx1-ubyte"));
    write_idx(&ds, &ip, Some(&lp))?;
    println!("wrote {} and {}", ip.display(), lp.display());
    Ok(ExitCode::SUCCESS)
}

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use lightavatar::config::{streams, RunConfig};
use lightavatar::distillation_data::{read_dataset, sample_trajectory, write_dataset, ExpressionFrame};
use lightavatar::eval_bench::{bench_fps, evaluate_frames, flops_per_pixel, psnr, MetricReport, SrBodyPlacement};
use lightavatar::image::Image;
use lightavatar::model::ArchConfig;
use lightavatar::nelf_renderer::render;
use lightavatar::training::{
    finetune_real, load_checkpoint_for, save_checkpoint, train_stage1, train_stage2, Checkpoint, StepReport,
    TrainHooks, TrainOutcome,
};
use lightavatar::Error;

#[derive(Parser)]
#[command(name = "lightavatar", version, about = "Expression-driven neural light field avatars")]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.stage1.iters=100`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesise the real, pseudo and held-out datasets.
    MakeData {
        /// Output directory (defaults to `paths.data_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Checkpoint to continue from (required for stage 2 and finetuning).
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory (defaults to `paths.data_dir`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Loss log (defaults to the checkpoint path with a `.csv` extension).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Stop once the stage iteration counter reaches this value.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Render frames of a dataset or a sampled trajectory to PNG.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, conflicts_with = "trajectory")]
        dataset: Option<PathBuf>,
        /// Comma-separated frame indices of the dataset (all when omitted).
        #[arg(long, value_delimiter = ',')]
        frames: Vec<usize>,
        /// Number of frames of a freshly sampled trajectory.
        #[arg(long)]
        trajectory: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare renders (or teacher re-renders) with the images of a dataset.
    Eval {
        #[arg(long, required_unless_present = "teacher")]
        ckpt: Option<PathBuf>,
        /// Re-render with the teacher instead of a trained model.
        #[arg(long, conflicts_with = "ckpt")]
        teacher: bool,
        #[arg(long)]
        dataset: PathBuf,
        /// Text report (`key=value` lines); printed to stdout as well.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Per-pixel multiply-accumulate budget of an architecture.
    Flops {
        /// Use a built-in architecture instead of the configured one.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Output resolution (square).
        #[arg(long, default_value_t = 512)]
        resolution: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Time full renders.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        return match e {
            Error::Usage(_) => 2,
            Error::Validation(_) | Error::Config(_) => 3,
            Error::Io(_) | Error::Format(_) => 4,
            Error::Incompatible(_) => 5,
        };
    }
    if err.chain().any(|e| e.downcast_ref::<std::io::Error>().is_some()) {
        return 4;
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    Ok(match &cli.config {
        Some(p) => RunConfig::load(p, &cli.overrides).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::from_toml_with("", &cli.overrides)?,
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    match cli.cmd {
        Command::MakeData { out } => make_data(&cfg, out.as_deref().unwrap_or(&cfg.paths.data_dir)),
        Command::Train { stage, input, out, data, log, stop_at } => {
            train(&cfg, stage, input.as_deref(), &out, data.as_deref(), log, stop_at)
        }
        Command::Render { ckpt, dataset, frames, trajectory, out } => {
            render_cmd(&cfg, &ckpt, dataset.as_deref(), &frames, trajectory, &out)
        }
        Command::Eval { ckpt, teacher, dataset, report, csv } => {
            eval_cmd(&cfg, ckpt.as_deref(), teacher, &dataset, report.as_deref(), csv.as_deref())
        }
        Command::Flops { preset, resolution, csv } => {
            let arch = match preset {
                Some(Preset::Desk) => ArchConfig::desk(),
                Some(Preset::Full) => ArchConfig::full(),
                None => cfg.arch.clone(),
            };
            let f = flops_per_pixel(&arch, resolution, resolution, SrBodyPlacement::Deferred)?;
            print!("resolution={resolution}\n{}", f.to_text());
            if let Some(p) = csv {
                write_file(&p, f.to_csv().as_bytes())?;
            }
            Ok(())
        }
        Command::Bench { ckpt, resolution, iters, warmup } => {
            let ck = load_checkpoint_for(&ckpt, &cfg.arch)?;
            let r = bench_fps(&ck.bundle, resolution, warmup.unwrap_or(cfg.bench.warmup), iters.unwrap_or(cfg.bench.iters))?;
            print!("{}", r.to_text());
            Ok(())
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::Io)?;
    }
    fs::write(path, bytes).map_err(Error::Io)?;
    Ok(())
}

fn make_data(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let sets = cfg.generate_data()?;
    fs::create_dir_all(dir).map_err(Error::Io).with_context(|| format!("creating {}", dir.display()))?;
    for (name, frames) in [("real", &sets.real), ("pseudo", &sets.pseudo), ("heldout", &sets.heldout)] {
        let path = dir.join(format!("{name}.lavds"));
        write_dataset(frames, &path).with_context(|| format!("writing {}", path.display()))?;
        println!("{name}={} path={}", frames.len(), path.display());
    }
    println!("seed={}", cfg.seed);
    Ok(())
}

fn read_set(dir: &Path, name: &str) -> anyhow::Result<Vec<ExpressionFrame>> {
    let path = dir.join(format!("{name}.lavds"));
    read_dataset(&path).with_context(|| format!("reading {}", path.display()))
}

fn train(
    cfg: &RunConfig,
    stage: StageArg,
    input: Option<&Path>,
    out: &Path,
    data: Option<&Path>,
    log: Option<PathBuf>,
    stop_at: Option<u64>,
) -> anyhow::Result<()> {
    let ckpt = match (stage, input) {
        (_, Some(p)) => load_checkpoint_for(p, &cfg.arch).with_context(|| format!("loading {}", p.display()))?,
        (StageArg::One, None) => Checkpoint::new(&cfg.arch, cfg.seed_for(streams::MODEL_INIT, 0))?,
        (StageArg::Two, None) => return Err(Error::Usage("stage 2 needs a stage-1 checkpoint (--in)".into()).into()),
        (StageArg::Finetune, None) => {
            return Err(Error::Usage("finetuning needs a stage-2 checkpoint (--in)".into()).into())
        }
    };
    let dir = data.unwrap_or(&cfg.paths.data_dir);
    let log_path = log.unwrap_or_else(|| out.with_extension("csv"));
    let mut rows = String::from("iteration,stage,lr,loss\n");
    let every = cfg.log.every;
    let mut window = (0.0, 0u64);
    let hooks = TrainHooks {
        stop_at,
        on_step: Box::new(|r: &StepReport| {
            window.0 += r.loss;
            window.1 += 1;
            if (r.iteration + 1) % every == 0 {
                let mean = window.0 / window.1 as f64;
                rows.push_str(&format!("{},{:?},{:.6e},{:.8e}\n", r.iteration + 1, r.stage, r.lr, mean));
                println!("stage={:?} iteration={} lr={:.3e} loss={:.6e}", r.stage, r.iteration + 1, r.lr, mean);
                let _ = std::io::stdout().flush();
                window = (0.0, 0);
            }
        }),
    };
    let seed = |s: u64| cfg.seed_for(streams::TRAIN, s);
    let outcome: TrainOutcome = match stage {
        StageArg::One => train_stage1(&read_set(dir, "pseudo")?, ckpt, &cfg.train, seed(1), hooks)?,
        StageArg::Two => train_stage2(&read_set(dir, "pseudo")?, ckpt, &cfg.train, seed(2), hooks)?,
        StageArg::Finetune => {
            cfg.check_data_compat()?;
            let real = read_set(dir, "real")?;
            let pseudo = read_set(dir, "pseudo")?;
            finetune_real(&real, &pseudo, ckpt, &cfg.train, seed(3), cfg.finetune, hooks)?
        }
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::Io)?;
    }
    save_checkpoint(&outcome.checkpoint, out).with_context(|| format!("writing {}", out.display()))?;
    write_file(&log_path, rows.as_bytes())?;
    let first = outcome.losses.first().copied().unwrap_or(f64::NAN);
    let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "checkpoint={} stage={:?} iteration={} steps={} first_loss={first:.6e} last_loss={last:.6e}",
        out.display(),
        outcome.checkpoint.stage,
        outcome.checkpoint.iteration,
        outcome.losses.len()
    );
    Ok(())
}

fn render_cmd(
    cfg: &RunConfig,
    ckpt: &Path,
    dataset: Option<&Path>,
    frames: &[usize],
    trajectory: Option<usize>,
    out: &Path,
) -> anyhow::Result<()> {
    let ck = load_checkpoint_for(ckpt, &cfg.arch)?;
    fs::create_dir_all(out).map_err(Error::Io)?;
    let jobs: Vec<(usize, Vec<f64>, lightavatar::ray_geometry::CameraPose, Option<lightavatar::ray_geometry::Mat3>, Option<Image>)> =
        match (dataset, trajectory) {
            (Some(p), _) => {
                let set = read_dataset(p).with_context(|| format!("reading {}", p.display()))?;
                let picks: Vec<usize> = if frames.is_empty() { (0..set.len()).collect() } else { frames.to_vec() };
                picks
                    .into_iter()
                    .map(|i| {
                        let f = set.get(i).ok_or_else(|| Error::Usage(format!("frame {i} not in dataset of {}", set.len())))?;
                        Ok((i, f.e.clone(), f.camera.clone(), f.shoulder_rotation, Some(f.image.clone())))
                    })
                    .collect::<anyhow::Result<_>>()?
            }
            (None, Some(n)) => {
                let scene = cfg.scene()?;
                sample_trajectory(&scene, &cfg.capture, n, cfg.seed_for(streams::TRAJECTORY, 0))?
                    .into_iter()
                    .enumerate()
                    .map(|(i, t)| (i, t.e, t.camera, t.shoulder_rotation, None))
                    .collect()
            }
            (None, None) => bail!(Error::Usage("render needs --dataset or --trajectory".into())),
        };
    for (i, e, camera, shoulder, reference) in jobs {
        let img = render(&e, &camera, shoulder.as_ref(), &ck.bundle)?;
        let path = out.join(format!("frame_{i:04}.png"));
        img.save_png(&path)?;
        match reference {
            Some(r) => println!("frame={i} path={} psnr={:.12}", path.display(), psnr(&img, &r, 1.0)?),
            None => println!("frame={i} path={}", path.display()),
        }
    }
    Ok(())
}

fn eval_cmd(
    cfg: &RunConfig,
    ckpt: Option<&Path>,
    teacher: bool,
    dataset: &Path,
    report: Option<&Path>,
    csv: Option<&Path>,
) -> anyhow::Result<()> {
    let frames = read_dataset(dataset).with_context(|| format!("reading {}", dataset.display()))?;
    let metrics = if teacher {
        let scene = cfg.scene()?;
        let pairs = frames
            .iter()
            .map(|f| Ok((scene.render(&f.e, &f.camera, f.shoulder_rotation.as_ref())?, f.image.clone())))
            .collect::<lightavatar::Result<Vec<_>>>()?;
        MetricReport::from_pairs(&pairs)?
    } else {
        let p = ckpt.expect("clap requires --ckpt without --teacher");
        let ck = load_checkpoint_for(p, &cfg.arch)?;
        evaluate_frames(&ck.bundle, &frames)?
    };
    let mut text = metrics.to_text();
    for (i, f) in metrics.frames.iter().enumerate() {
        text.push_str(&format!("frame{i}.psnr={:.12}\n", f.psnr));
    }
    print!("{text}");
    if let Some(p) = report {
        write_file(p, text.as_bytes())?;
    }
    if let Some(p) = csv {
        write_file(p, metrics.to_csv().as_bytes())?;
    }
    Ok(())
}

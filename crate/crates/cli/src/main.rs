use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use meepo_core::analysis::{
    flops_cnn, flops_mamba_directions, flops_transformer, scaling_bench, BenchWidths, FlopParams, ScalingArch,
};
use meepo_core::model::{describe, BlockType, ModelConfig, SceneHierarchy, DESK_GRID_SIZE, STAGES};
use meepo_core::pointcloud::{generate_scene, grid_pool, read_cloud, voxelize, write_cloud, PointCloud, UNLABELED};
use meepo_core::train::{
    ablation_suite, additive_ablation, build_dataset, evaluate, load_checkpoint, miou, train_run, AblationAxis,
    ProbeConfig, RunConfig, TrainConfig,
};
use meepo_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "meepo",
    version,
    about = "Sparse-voxel segmentation with causal-free, bidirectional strided state-space blocks",
    arg_required_else_help = true
)]
struct Cli {
    /// Seed for model initialization, data generation and training order.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` settings file, or the output of an earlier command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Scale {
    /// Published widths, grid size and optimizer settings.
    #[arg(long)]
    paper_scale: bool,
    /// Published channel widths with the desk grid and optimizer.
    #[arg(long)]
    full_width: bool,
    /// Voxel edge length in meters.
    #[arg(long)]
    grid_size: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic labelled rooms as MPC1 cloud files.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        scenes: usize,
        /// Points per scene.
        #[arg(long)]
        points: Option<usize>,
        /// Omit labels from the written files.
        #[arg(long)]
        unlabeled: bool,
    },
    /// Train on the synthetic benchmark.
    Train {
        #[command(flatten)]
        scale: Scale,
        #[arg(long)]
        steps: Option<usize>,
        /// Checkpoint path (MPK1).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        eval_every: Option<usize>,
    },
    /// Score a checkpoint on cloud files or on its validation scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labelled MPC1 clouds; defaults to the validation split the checkpoint was trained with.
        #[arg(long, num_args = 1..)]
        input: Vec<PathBuf>,
    },
    /// Train one configuration per grid value and tabulate validation mIoU.
    Ablate {
        /// block_type, conv_mode, directions, stride or additive.
        #[arg(long = "ablation-axis")]
        axis: String,
        #[arg(long, value_delimiter = ',')]
        grid: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        scale: Scale,
        /// Also run the right-context probe on causality axes.
        #[arg(long)]
        probe: bool,
        /// Extra block types trained with the full settings (additive axis only).
        #[arg(long, value_delimiter = ',')]
        reference: Vec<String>,
    },
    /// Measure run time against sequence length and fit the log-log slope.
    BenchScaling {
        #[arg(long, default_value = "mamba")]
        arch: String,
        #[arg(long, value_delimiter = ',', default_value = "4096,8192,16384,32768")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Whitespace columns for plotting instead of CSV.
        #[arg(long)]
        plot_data: bool,
    },
    /// Analytic operation count of one core operation.
    Flops {
        /// mamba, transformer or cnn.
        #[arg(long)]
        arch: String,
        #[arg(long = "L")]
        l: u64,
        #[arg(long = "C", default_value_t = 64)]
        c: u64,
        #[arg(long = "C-in")]
        c_in: Option<u64>,
        #[arg(long = "C-out")]
        c_out: Option<u64>,
        #[arg(long = "N", default_value_t = 16)]
        n: u64,
        #[arg(long = "E", default_value_t = 2)]
        e: u64,
        /// Conv1D kernel inside the state-space module.
        #[arg(long = "K", default_value_t = 4)]
        conv_k: u64,
        /// Sparse conv kernel size.
        #[arg(long = "k", default_value_t = 3)]
        k: u64,
        /// Scan orders multiplying the state-space count.
        #[arg(long, default_value_t = 1)]
        directions: u64,
    },
    /// Print a scene's serialization order and voxel count per stage.
    Inspect {
        /// MPC1 cloud; defaults to a synthetic scene.
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        scale: Scale,
        /// Print at most this many voxels.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Block, parameter and operation accounting of a configuration.
    Describe {
        #[command(flatten)]
        scale: Scale,
        /// Use the level sizes of a synthetic scene instead of nominal counts.
        #[arg(long)]
        scene: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("meepo: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::Parameter(_) => 1,
                _ => 2,
            })
        }
    }
}

/// Settings file contents. Output of any command is accepted as well: when
/// `# config: ` header lines are present only those are read.
fn config_text(path: &Path) -> Result<String> {
    let raw = fs::read_to_string(path)?;
    let echoed: Vec<&str> = raw.lines().filter_map(|l| l.strip_prefix("# config: ")).collect();
    if echoed.is_empty() {
        Ok(raw)
    } else {
        Ok(echoed.join("\n"))
    }
}

/// Preset, then config file, then seed and explicit flags.
fn run_config(cli: &Cli, scale: &Scale) -> Result<RunConfig> {
    let mut run = RunConfig::default();
    if scale.paper_scale {
        run.model = ModelConfig::paper();
        run.train = TrainConfig::paper();
    } else if scale.full_width {
        run.model = ModelConfig {
            grid_size: DESK_GRID_SIZE,
            ..ModelConfig::paper()
        };
    }
    if let Some(path) = &cli.config {
        run.apply_config_str(&config_text(path)?)?;
    }
    if let Some(seed) = cli.seed {
        run.train.seed = seed;
        run.data.seed = seed;
    }
    if let Some(g) = scale.grid_size {
        run.model.grid_size = g;
    }
    run.validate()?;
    Ok(run)
}

fn header(command: &str, config: &str) -> String {
    let mut s = format!("# command: {command}\n");
    for line in config.lines() {
        let _ = writeln!(s, "# config: {line}");
    }
    s
}

fn run(cli: Cli) -> Result<String> {
    match &cli.command {
        Command::GenData {
            out,
            scenes,
            points,
            unlabeled,
        } => {
            let mut run = run_config(&cli, &Scale::default())?;
            if let Some(p) = points {
                run.data.scene.num_points = *p;
            }
            gen_data(&run, out, *scenes, *unlabeled)
        }
        Command::Train {
            scale,
            steps,
            out,
            eval_every,
        } => {
            let mut run = run_config(&cli, scale)?;
            if let Some(s) = steps {
                run.train.steps = *s;
            }
            if let Some(e) = eval_every {
                run.train.eval_every = *e;
            }
            train(&run, out.as_deref())
        }
        Command::Eval { checkpoint, input } => eval(&cli, checkpoint, input),
        Command::Ablate {
            axis,
            grid,
            seeds,
            steps,
            scale,
            probe,
            reference,
        } => {
            let mut run = run_config(&cli, scale)?;
            if let Some(s) = steps {
                run.train.steps = *s;
            }
            ablate(&run, axis, grid, seeds, *probe, reference)
        }
        Command::BenchScaling {
            arch,
            lengths,
            reps,
            plot_data,
        } => {
            let arch: ScalingArch = arch.parse()?;
            let seed = cli.seed.unwrap_or(0);
            let report = scaling_bench(arch, lengths, *reps, &BenchWidths::default(), seed)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            let body = if *plot_data { report.to_plot_data() } else { report.to_csv() };
            let lengths: Vec<String> = lengths.iter().map(usize::to_string).collect();
            Ok(format!(
                "# command: bench-scaling --arch {arch} --lengths {} --reps {reps} --seed {seed}\n{body}",
                lengths.join(",")
            ))
        }
        Command::Flops {
            arch,
            l,
            c,
            c_in,
            c_out,
            n,
            e,
            conv_k,
            k,
            directions,
        } => {
            let p = FlopParams {
                l: *l,
                c: *c,
                c_in: c_in.unwrap_or(*c),
                c_out: c_out.unwrap_or(*c),
                n: *n,
                e: *e,
                conv_k: *conv_k,
                k: *k,
            };
            let count = match arch.as_str() {
                "mamba" => flops_mamba_directions(&p, *directions)?,
                "transformer" | "attention" => flops_transformer(&p)?,
                "cnn" | "sparse_conv" => flops_cnn(&p)?,
                other => return Err(Error::Config(format!("unknown architecture `{other}` (mamba|transformer|cnn)"))),
            };
            Ok(format!("{count}\n"))
        }
        Command::Inspect { input, scale, limit } => {
            let run = run_config(&cli, scale)?;
            inspect(&run, input.as_deref(), *limit)
        }
        Command::Describe { scale, scene } => {
            let run = run_config(&cli, scale)?;
            let levels = if *scene {
                let pc = generate_scene(run.data.seed, &run.data.scene)?;
                Some(SceneHierarchy::from_cloud(&pc, &run.model)?.level_sizes())
            } else {
                None
            };
            let summary = describe(&run.model, levels.as_deref())?;
            Ok(header("describe", &run.model.to_config_string()) + &summary.to_string())
        }
    }
}

fn gen_data(run: &RunConfig, out: &Path, scenes: usize, unlabeled: bool) -> Result<String> {
    fs::create_dir_all(out)?;
    let mut manifest = header("gen-data", &run.data.to_config_string());
    manifest.push_str("file,seed,points\n");
    for i in 0..scenes {
        let seed = run.data.seed.wrapping_add(i as u64);
        let mut pc = generate_scene(seed, &run.data.scene)?;
        if unlabeled {
            pc.labels = None;
        }
        let name = format!("scene_{i:04}.mpc");
        write_cloud(&pc, out.join(&name))?;
        let _ = writeln!(manifest, "{name},{seed},{}", pc.len());
    }
    fs::write(out.join("manifest.csv"), &manifest)?;
    Ok(manifest)
}

fn train(run: &RunConfig, out: Option<&Path>) -> Result<String> {
    let outcome = train_run(run, out)?;
    let mut s = header("train", &run.to_config_string());
    s.push_str("step,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l:.6}");
    }
    for r in &outcome.reports[..outcome.reports.len() - 1] {
        let _ = writeln!(s, "# eval {r}");
    }
    let _ = writeln!(s, "# train {}", outcome.train_report);
    if let Some(v) = &outcome.val_report {
        let _ = writeln!(s, "# val {v}");
    }
    if let Some(p) = out {
        let _ = writeln!(s, "# checkpoint {}", p.display());
    }
    Ok(s)
}

fn eval(cli: &Cli, checkpoint: &Path, input: &[PathBuf]) -> Result<String> {
    let ck = load_checkpoint(checkpoint)?;
    let mut run = RunConfig::from_config_str(&ck.config)?;
    if let Some(path) = &cli.config {
        run.apply_config_str(&config_text(path)?)?;
    }
    if let Some(seed) = cli.seed {
        run.data.seed = seed;
    }
    run.validate()?;
    let mut s = header("eval", &run.to_config_string());
    if input.is_empty() {
        let data = build_dataset(&run.data, &run.model)?;
        let scenes = if data.val.is_empty() { &data.train } else { &data.val };
        let report = evaluate(scenes, &run.model, &ck.params, run.train.steps)?;
        let _ = writeln!(s, "# voxel {report}");
        return Ok(s);
    }
    s.push_str("file,voxel_miou,point_miou\n");
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    let (mut point_pred, mut point_truth) = (Vec::new(), Vec::new());
    for path in input {
        let pc = read_cloud(path)?;
        let labels = pc
            .labels
            .clone()
            .ok_or_else(|| Error::Data(format!("{} has no labels", path.display())))?;
        let scene = SceneHierarchy::from_cloud(&pc, &run.model)?;
        let report = evaluate(std::slice::from_ref(&scene), &run.model, &ck.params, run.train.steps)?;
        let logits = meepo_core::model::forward_scene(&scene, &run.model, &ck.params, false, 0)?;
        let voxel_pred = meepo_core::model::predict(&logits);
        let pp: Vec<i64> = scene.inverse_map.iter().map(|&v| voxel_pred[v]).collect();
        let pt: Vec<i64> = labels.iter().map(|&l| l as i64).collect();
        let point = miou(&pp, &pt, run.model.num_classes, UNLABELED);
        let fmt = |m: Option<f64>| m.map_or("none".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(s, "{},{},{}", path.display(), fmt(report.miou), fmt(point.miou));
        pred.extend(voxel_pred);
        truth.extend(scene.labels.clone().unwrap_or_default());
        point_pred.extend(pp);
        point_truth.extend(pt);
    }
    let _ = writeln!(s, "# voxel {}", miou(&pred, &truth, run.model.num_classes, UNLABELED));
    let _ = writeln!(s, "# point {}", miou(&point_pred, &point_truth, run.model.num_classes, UNLABELED));
    Ok(s)
}

fn ablate(run: &RunConfig, axis: &str, grid: &[String], seeds: &[u64], probe: bool, reference: &[String]) -> Result<String> {
    let seeds_list: Vec<String> = seeds.iter().map(u64::to_string).collect();
    let mut out = header("ablate", &run.to_config_string());
    let _ = writeln!(out, "# ablation: axis {axis} seeds {}", seeds_list.join(","));
    let table = if axis == "additive" {
        let refs = reference.iter().map(|r| r.parse()).collect::<Result<Vec<BlockType>>>()?;
        additive_ablation(seeds, run, &refs)?
    } else {
        let axis: AblationAxis = axis.parse()?;
        let grid = if grid.is_empty() { axis.default_grid() } else { grid.to_vec() };
        let probe_cfg = probe.then(ProbeConfig::causal_free);
        ablation_suite(axis, &grid, seeds, run, probe_cfg.as_ref())?
    };
    Ok(out + &table.to_string())
}

fn inspect(run: &RunConfig, input: Option<&Path>, limit: Option<usize>) -> Result<String> {
    let (pc, source): (PointCloud, String) = match input {
        Some(p) => (read_cloud(p)?, p.display().to_string()),
        None => (
            generate_scene(run.data.seed, &run.data.scene)?,
            format!("synthetic scene seed {}", run.data.seed),
        ),
    };
    let mut s = header("inspect", &format!("{}{}", run.model.to_config_string(), run.data.to_config_string()));
    let _ = writeln!(s, "# source: {source}");
    let vox = voxelize(&pc, run.model.grid_size)?;
    s.push_str("order,key,x,y,z,points\n");
    let shown = limit.unwrap_or(vox.len()).min(vox.len());
    for i in 0..shown {
        let c = vox.coords[i];
        let _ = writeln!(s, "{i},{},{},{},{},{}", vox.keys[i], c[0], c[1], c[2], vox.counts[i]);
    }
    s.push_str("stage,voxels\n");
    let mut level = vox;
    let _ = writeln!(s, "0,{}", level.len());
    for st in 0..STAGES {
        level = grid_pool(&level, run.model.down_strides[st] as u32)?.0;
        let _ = writeln!(s, "{},{}", st + 1, level.len());
    }
    Ok(s)
}

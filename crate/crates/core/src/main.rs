use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use linereg::features::NetConfig;
use linereg::harness::bench::{net_match, noise_sweep, overlap_sweep, register, run_benchmark, write_sweep, Models, Timing};
use linereg::harness::config::{Method, RunConfig};
use linereg::harness::io::{
    read_lineset, read_scene, read_scene_dir, registration_to_json, scene_file_name, write_lineset, write_scene,
    write_text,
};
use linereg::harness::bench::synth_scenes;
use linereg::plucker::{rotation_error, translation_error, PluckerLine};
use linereg::scene::ScenePair;
use linereg::train::{epoch_csv, load_checkpoint, load_params, save_checkpoint, train, Objective, TrainState};
use linereg::features::TrunkParams;
use linereg::{Error, Result};

#[derive(Parser)]
#[command(name = "linereg", version, about = "Register partially-overlapped 3D line sets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Desk,
    Tiny,
    Full,
}

/// Overrides applied on top of the config file (or the defaults).
#[derive(Args, Clone, Default)]
struct Overrides {
    /// RunConfig JSON document.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    #[arg(long)]
    num_scenes: Option<usize>,
    #[arg(long)]
    num_lines: Option<usize>,
    #[arg(long)]
    overlap: Option<f64>,
    /// Disable line noise.
    #[arg(long)]
    no_noise: bool,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    sinkhorn_iterations: Option<usize>,
    #[arg(long)]
    ransac_iterations: Option<usize>,
    #[arg(long)]
    inlier_threshold: Option<f64>,
    #[arg(long)]
    ransac_seed: Option<u64>,
    #[arg(long)]
    icl_iterations: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(p) = self.profile {
            c.net = match p {
                Profile::Desk => NetConfig::desk(),
                Profile::Tiny => NetConfig::tiny(),
                Profile::Full => NetConfig::full(),
            };
        }
        if let Some(s) = self.seed {
            c.seed = s;
            c.train.seed = s;
        }
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value {
                    $field = v;
                }
            };
        }
        set!(c.num_scenes, self.num_scenes);
        set!(c.scene.lines.num_lines, self.num_lines);
        set!(c.scene.overlap, self.overlap);
        set!(c.top_k, self.top_k);
        set!(c.sinkhorn.lambda, self.lambda);
        set!(c.sinkhorn.iterations, self.sinkhorn_iterations);
        set!(c.ransac.iterations, self.ransac_iterations);
        set!(c.ransac.inlier_threshold, self.inlier_threshold);
        set!(c.ransac.seed, self.ransac_seed);
        set!(c.icl.max_iterations, self.icl_iterations);
        set!(c.train.epochs, self.epochs);
        set!(c.train.learning_rate, self.learning_rate);
        set!(c.train.batch_size, self.batch_size);
        if self.no_noise {
            c.scene.noise = linereg::scene::NoiseConfig::zero();
        }
        c.validate()?;
        Ok(c)
    }
}

/// A scene JSON file, or a pair of line-set files.
#[derive(Args)]
struct PairInput {
    #[arg(long, conflicts_with_all = ["source", "target"])]
    scene: Option<PathBuf>,
    #[arg(long, requires = "target")]
    source: Option<PathBuf>,
    #[arg(long, requires = "source")]
    target: Option<PathBuf>,
}

impl PairInput {
    fn load(&self) -> Result<(Vec<PluckerLine>, Vec<PluckerLine>, Option<ScenePair>)> {
        match (&self.scene, &self.source, &self.target) {
            (Some(p), _, _) => {
                let sc = read_scene(p)?;
                Ok((sc.source.clone(), sc.target.clone(), Some(sc)))
            }
            (None, Some(s), Some(t)) => Ok((read_lineset(s)?, read_lineset(t)?, None)),
            _ => Err(Error::Config("give --scene or both --source and --target".into())),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic scene pairs as JSON.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Also write each scene's source and target as line-set text files.
        #[arg(long)]
        linesets: bool,
        #[command(flatten)]
        o: Overrides,
    },
    /// Train the matcher (or the regression head with `--method regression`).
    Train {
        #[arg(long)]
        scenes: PathBuf,
        /// Scenes for the per-epoch precision column; defaults to the training scenes.
        #[arg(long)]
        eval_scenes: Option<PathBuf>,
        /// Checkpoint written after every epoch.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch CSV; defaults to `<out>.epochs.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        method: Option<Method>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Register one pair and print the result as JSON.
    Register {
        #[command(flatten)]
        input: PairInput,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Emit the top-K learned matches of one pair as CSV.
    Match {
        #[command(flatten)]
        input: PairInput,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Benchmark methods on a directory of scenes.
    Eval {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "icl")]
        methods: Vec<Method>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        regression_checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
    /// Benchmark on freshly synthesized scenes, optionally sweeping noise or overlap.
    Bench {
        #[arg(long, value_enum, default_value = "none")]
        sweep: Sweep,
        #[arg(long, value_delimiter = ',', default_value = "icl")]
        methods: Vec<Method>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        regression_checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Sweep {
    None,
    Noise,
    Overlap,
}

fn load_models(net: Option<&Path>, regression: Option<&Path>) -> Result<Models> {
    Ok(Models {
        net: net.map(|p| load_params(p, None)).transpose()?,
        regression: regression.map(|p| load_params(p, None)).transpose()?,
    })
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { out, linesets, o } => {
            let cfg = o.resolve()?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            for (i, sc) in synth_scenes(&cfg.scene, cfg.seed, cfg.num_scenes)?.iter().enumerate() {
                write_scene(&out.join(scene_file_name(i)), sc)?;
                if linesets {
                    write_lineset(&out.join(format!("scene_{i:05}.source.txt")), &sc.source)?;
                    write_lineset(&out.join(format!("scene_{i:05}.target.txt")), &sc.target)?;
                }
            }
            eprintln!("wrote {} scenes to {}", cfg.num_scenes, out.display());
        }
        Command::Train {
            scenes,
            eval_scenes,
            out,
            log,
            resume,
            method,
            o,
        } => {
            let mut cfg = o.resolve()?;
            if let Some(m) = method {
                cfg.method = m;
            }
            cfg.train.objective = match cfg.method {
                Method::Regression => Objective::Regression,
                _ => Objective::Matching,
            };
            let train_set = read_scene_dir(&scenes)?;
            if train_set.is_empty() {
                return Err(Error::Config(format!("no scenes in {}", scenes.display())));
            }
            let eval = eval_scenes.map(|d| read_scene_dir(&d)).transpose()?.unwrap_or_default();
            let mut state = match resume {
                Some(p) => load_checkpoint(&p)?,
                None => {
                    let mut rng = linereg::scene::scene_rng(cfg.seed, u64::MAX);
                    TrainState::new(TrunkParams::init(&cfg.net, &mut rng)?)
                }
            };
            let log = log.unwrap_or_else(|| PathBuf::from(format!("{}.epochs.csv", out.display())));
            let mut records = match state.epoch {
                0 => Vec::new(),
                done => read_epoch_log(&log, done)?,
            };
            let new = train(&mut state, &train_set, &eval, &cfg.train, &cfg.sinkhorn, |st, rec| {
                eprintln!(
                    "epoch {} loss {:.6} precision {:.4}",
                    rec.epoch, rec.mean_loss, rec.match_precision_at_k
                );
                save_checkpoint(&out, st)
            })?;
            records.extend(new);
            save_checkpoint(&out, &state)?;
            write_text(&log, &epoch_csv(&records))?;
        }
        Command::Register {
            input,
            method,
            checkpoint,
            out,
            o,
        } => {
            let cfg = o.resolve()?;
            let method = method.unwrap_or(cfg.method);
            let (src, dst, scene) = input.load()?;
            let models = match method {
                Method::Net => load_models(checkpoint.as_deref(), None)?,
                Method::Regression => load_models(None, checkpoint.as_deref())?,
                Method::Icl => Models::default(),
            };
            let (res, timing) = register(method, &src, &dst, &cfg, &models)?;
            emit(out.as_deref(), &(registration_to_json(&res) + "\n"))?;
            report_timing(&timing);
            if let Some(sc) = scene {
                eprintln!(
                    "rotation_error_deg {:.6e} translation_error_m {:.6e}",
                    rotation_error(&sc.gt_pose.rotation, &res.pose.rotation),
                    translation_error(&sc.gt_pose.translation, &res.pose.translation)
                );
            }
        }
        Command::Match {
            input,
            checkpoint,
            out,
            o,
        } => {
            let cfg = o.resolve()?;
            let (src, dst, _) = input.load()?;
            let params = load_params(&checkpoint, None)?;
            let mut timing = Timing::default();
            let m = net_match(&src, &dst, &params, &cfg.sinkhorn, cfg.top_k, &mut timing)?;
            emit(out.as_deref(), &m.matches.to_csv())?;
        }
        Command::Eval {
            scenes,
            methods,
            checkpoint,
            regression_checkpoint,
            out,
            o,
        } => {
            let cfg = o.resolve()?;
            let models = load_models(checkpoint.as_deref(), regression_checkpoint.as_deref())?;
            let set = read_scene_dir(&scenes)?;
            let label = scenes.display().to_string();
            let report = run_benchmark(&label, &set, &methods, &cfg, &models)?;
            report.write(&out)?;
            print_summary(&report);
        }
        Command::Bench {
            sweep,
            methods,
            checkpoint,
            regression_checkpoint,
            out,
            o,
        } => {
            let cfg = o.resolve()?;
            let models = load_models(checkpoint.as_deref(), regression_checkpoint.as_deref())?;
            match sweep {
                Sweep::None => {
                    let set = synth_scenes(&cfg.scene, cfg.seed, cfg.num_scenes)?;
                    let report = run_benchmark("synthetic", &set, &methods, &cfg, &models)?;
                    report.write(&out)?;
                    print_summary(&report);
                }
                Sweep::Noise | Sweep::Overlap => {
                    let points = match sweep {
                        Sweep::Noise => noise_sweep(&cfg, &methods, &models)?,
                        _ => overlap_sweep(&cfg, &methods, &models)?,
                    };
                    write_sweep(&out, &points)?;
                    for p in &points {
                        print_summary(&p.report);
                    }
                }
            }
        }
    }
    Ok(())
}

/// Rows of an existing epoch log up to `epochs`, so a resumed run writes one continuous log.
fn read_epoch_log(path: &Path, epochs: usize) -> Result<Vec<linereg::train::EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: "expected `epoch,mean_loss,match_precision_at_K`".into(),
        };
        if f.len() != 3 {
            return Err(bad());
        }
        let rec = linereg::train::EpochRecord {
            epoch: f[0].parse().map_err(|_| bad())?,
            mean_loss: f[1].parse().map_err(|_| bad())?,
            match_precision_at_k: f[2].parse().map_err(|_| bad())?,
        };
        if rec.epoch <= epochs {
            out.push(rec);
        }
    }
    Ok(out)
}

fn report_timing(t: &Timing) {
    eprintln!(
        "features {:.3}s matching {:.3}s pose {:.3}s",
        t.features_s, t.matching_s, t.pose_s
    );
}

fn print_summary(report: &linereg::harness::bench::BenchmarkReport) {
    for s in &report.summaries {
        let med = |q: Option<linereg::harness::metrics::Quartiles>| q.map_or(f64::NAN, |q| q.median);
        println!(
            "{} {}: median rotation {:.4} deg, median translation {:.4} m, failures {}/{}",
            report.label,
            s.method.name(),
            med(s.rotation_deg),
            med(s.translation_m),
            s.failures,
            s.scenes
        );
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

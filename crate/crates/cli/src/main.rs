//! `unirit` binary: synth / train / register / eval / analyze-gmm.

mod config;
mod report;

use std::path::{Path, PathBuf};

use clap::{ArgAction, Parser, Subcommand};
use unirit_core::synth::load_entry;
use unirit_core::unirit::{load_checkpoint, register, train};
use unirit_core::{
    gmm, synth, Case, Error, Manifest, PairSpec, PointCloud, ShapeFamily, UniRiTConfig,
};

use config::{RunConfig, SOURCE_CONFIG_FILE, SOURCE_DEFAULT, SOURCE_FLAG};
use report::{report_aggregate, PairRecord};

#[derive(Parser)]
#[command(name = "unirit", version, about = "Two-stage non-rigid point cloud registration toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic deformation pairs and a manifest.
    Synth {
        /// Shape family, or a comma-separated list cycled across pairs.
        #[arg(long, default_value = "sphere")]
        family: String,
        /// Number of pairs to generate.
        #[arg(long)]
        count: usize,
        #[arg(long)]
        points: Option<usize>,
        /// Half-extent of the shape in raw units.
        #[arg(long)]
        scale: Option<f64>,
        /// Target mean displacement magnitude, raw units.
        #[arg(long)]
        deform: Option<f64>,
        /// a = TPS only, b = TPS + rigid motion.
        #[arg(long)]
        case: Option<String>,
        /// Symmetric rotation range in degrees (Case B).
        #[arg(long)]
        rot_deg: Option<f64>,
        /// Symmetric per-axis translation range in normalized units (Case B).
        #[arg(long)]
        trans: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Cloud file for the from_file family.
        #[arg(long)]
        source_file: Option<PathBuf>,
        #[arg(long)]
        control_points: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a manifest of pairs.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// JSON file with (partial) model configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, action = ArgAction::SetTrue)]
        ablate_rigid: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        n_iters: Option<usize>,
        /// Base widths: default (paper-scale) or fast (reduced).
        #[arg(long)]
        profile: Option<String>,
        /// Emit checkpoint_XXXX.json every N epochs (0 = final only).
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Register one source/target file pair with a trained checkpoint.
    Register {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint over every pair in a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Divergence matrix between the shape families of a manifest.
    AnalyzeGmm {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Mixture components per cloud.
        #[arg(long)]
        components: Option<usize>,
        /// Sample points per divergence evaluation.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        repetitions: Option<usize>,
        #[arg(long)]
        picks: Option<usize>,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidSpec(_)
        | Error::LengthMismatch { .. }
        | Error::KExceedsN { .. }
        | Error::InvalidMixture(_)
        | Error::InvalidRotation(_)
        | Error::EmptyCloud
        | Error::DegenerateCloud(_)
        | Error::CheckpointMismatch(_)
        | Error::ShapeMismatch(_)
        | Error::Parse { .. } => 1,
        _ => 2,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Synth {
            family,
            count,
            points,
            scale,
            deform,
            case,
            rot_deg,
            trans,
            noise,
            dropout,
            seed,
            source_file,
            control_points,
            out,
        } => {
            let mut cfg = RunConfig::new("synth");
            cfg.set("family", &family, SOURCE_FLAG);
            cfg.set("count", count, SOURCE_FLAG);
            let points = cfg.set_opt("points", &points, 1024);
            let scale = cfg.set_opt("scale", &scale, 100.0);
            let deform = cfg.set_opt("deform", &deform, 15.0);
            let case = Case::parse(&cfg.set_opt("case", &case, "a".to_string()))?;
            let rot_deg = cfg.set_opt("rot_deg", &rot_deg, 45.0);
            let trans = cfg.set_opt("trans", &trans, 0.2);
            let noise = cfg.set_opt("noise", &noise, 0.0);
            let dropout = cfg.set_opt("dropout", &dropout, 0.0);
            let seed = cfg.set_opt("seed", &seed, 0);
            let control_points = cfg.set_opt("control_points", &control_points, 8);
            match &source_file {
                Some(p) => cfg.set("source_file", p, SOURCE_FLAG),
                None => cfg.set("source_file", serde_json::Value::Null, SOURCE_DEFAULT),
            }
            cfg.set("out", &out, SOURCE_FLAG);

            let families: Vec<ShapeFamily> = family
                .split(',')
                .map(ShapeFamily::parse)
                .collect::<Result<_, _>>()?;
            if count == 0 {
                return Err(Error::InvalidSpec("count must be >= 1".into()));
            }
            let mut pairs = Vec::with_capacity(count);
            for k in 0..count {
                let spec = PairSpec {
                    shape_family: families[k % families.len()],
                    source_file: source_file.clone(),
                    n_points: points,
                    scale,
                    deform,
                    case,
                    rotation_range_deg: (-rot_deg, rot_deg),
                    translation_range: (-trans, trans),
                    noise_sigma: noise,
                    dropout_fraction: dropout,
                    seed: seed.wrapping_add(k as u64),
                    control_points,
                };
                let pair = synth::make_pair(&spec)?;
                pairs.push((spec, pair));
            }
            let manifest = synth::write_dataset(&pairs, &out)?;
            cfg.write(&out)?;
            println!(
                "wrote {} pairs ({} files) to {}",
                manifest.pairs.len(),
                2 * manifest.pairs.len(),
                out.display()
            );
            Ok(())
        }

        Command::Train {
            manifest,
            config,
            out,
            seed,
            ablate_rigid,
            epochs,
            lr,
            points,
            alpha,
            n_iters,
            profile,
            checkpoint_every,
        } => {
            let mut cfg = RunConfig::new("train");
            cfg.set("manifest", &manifest, SOURCE_FLAG);
            cfg.set("out", &out, SOURCE_FLAG);
            let profile = cfg.set_opt("profile", &profile, "default".to_string());
            let checkpoint_every = cfg.set_opt("checkpoint_every", &checkpoint_every, 0);

            let base = match profile.as_str() {
                "default" => UniRiTConfig::default(),
                "fast" => UniRiTConfig::fast_profile(),
                other => {
                    return Err(Error::InvalidSpec(format!("unknown profile '{other}'")))
                }
            };
            let mut merged = match serde_json::to_value(&base)? {
                serde_json::Value::Object(m) => m,
                _ => unreachable!(),
            };
            if let Some(path) = &config {
                cfg.set("config", path, SOURCE_FLAG);
                let text = std::fs::read_to_string(path)?;
                let patch: serde_json::Map<String, serde_json::Value> =
                    serde_json::from_str(&text)?;
                config::merge_object(&mut cfg, &mut merged, &patch, SOURCE_CONFIG_FILE);
            } else {
                let empty = serde_json::Map::new();
                config::merge_object(&mut cfg, &mut merged, &empty, SOURCE_CONFIG_FILE);
            }
            let mut set_flag = |name: &str, v: serde_json::Value, cfg: &mut RunConfig| {
                cfg.set(name, &v, SOURCE_FLAG);
                merged.insert(name.to_string(), v);
            };
            if let Some(v) = seed {
                set_flag("seed", v.into(), &mut cfg);
            }
            if let Some(v) = epochs {
                set_flag("epochs", v.into(), &mut cfg);
            }
            if let Some(v) = lr {
                set_flag("lr", serde_json::json!(v), &mut cfg);
            }
            if let Some(v) = points {
                set_flag("points_per_cloud", v.into(), &mut cfg);
            }
            if let Some(v) = alpha {
                set_flag("alpha", serde_json::json!(v), &mut cfg);
            }
            if let Some(v) = n_iters {
                set_flag("n_iters", v.into(), &mut cfg);
            }
            if ablate_rigid {
                set_flag("ablate_rigid", true.into(), &mut cfg);
            }
            let model_cfg: UniRiTConfig = serde_json::from_value(serde_json::Value::Object(merged))?;
            model_cfg.validate()?;

            let pairs = load_pairs(&manifest)?;
            cfg.write(&out)?;
            let result = train::<f32>(&pairs, &model_cfg, Some(&out), checkpoint_every)?;
            let last = result.history.last().expect("non-empty history");
            println!(
                "trained {} pairs for {} epochs; final loss {:.6} -> {}",
                pairs.len(),
                model_cfg.epochs,
                last.loss_total,
                out.join("checkpoint.json").display()
            );
            Ok(())
        }

        Command::Register {
            checkpoint,
            source,
            target,
            out,
            seed,
        } => {
            let mut cfg = RunConfig::new("register");
            cfg.set("checkpoint", &checkpoint, SOURCE_FLAG);
            cfg.set("source", &source, SOURCE_FLAG);
            cfg.set("target", &target, SOURCE_FLAG);
            cfg.set("out", &out, SOURCE_FLAG);
            let seed = cfg.set_opt("seed", &seed, 0);

            let model = load_checkpoint::<f32>(&checkpoint)?;
            let src = PointCloud::read_xyz(&source)?;
            let tgt = PointCloud::read_xyz(&target)?;
            let pair_id = source
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "pair".into());
            let res = register(&model, &pair_id, &src, &tgt, seed)?;

            std::fs::create_dir_all(&out)?;
            cfg.write(&out)?;
            res.warped.write_xyz(out.join("warped.xyz"))?;
            let report = serde_json::json!({
                "pair_id": res.report.pair_id,
                "pre_rmse": res.report.pre_rmse,
                "rmse": res.report.rmse,
                "cd": res.report.cd,
                "inference_seconds": res.inference_seconds,
                "rigid_iterations": res.transforms.len(),
                "mean_displacement": res.displacement.mean_magnitude(),
            });
            std::fs::write(
                out.join("report.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            println!(
                "registered {pair_id}: pre_rmse {:.4} -> rmse {:.4} (cd {:.4}) in {:.3}s",
                res.report.pre_rmse, res.report.rmse, res.report.cd, res.inference_seconds
            );
            Ok(())
        }

        Command::Eval {
            checkpoint,
            manifest,
            out,
            seed,
        } => {
            let mut cfg = RunConfig::new("eval");
            cfg.set("checkpoint", &checkpoint, SOURCE_FLAG);
            cfg.set("manifest", &manifest, SOURCE_FLAG);
            cfg.set("out", &out, SOURCE_FLAG);
            let seed = cfg.set_opt("seed", &seed, 0);

            let model = load_checkpoint::<f32>(&checkpoint)?;
            let man = Manifest::read(&manifest)?;
            let dir = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();

            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(eval_threads())
                .build()
                .map_err(|e| Error::InvalidSpec(format!("thread pool: {e}")))?;
            let records: Result<Vec<PairRecord>, Error> = pool.install(|| {
                use rayon::prelude::*;
                man.pairs
                    .par_iter()
                    .enumerate()
                    .map(|(i, entry)| {
                        let (src, tgt) = load_entry(&dir, entry)?;
                        let res = register(
                            &model,
                            &entry.id,
                            &src,
                            &tgt,
                            seed.wrapping_add(i as u64),
                        )?;
                        Ok(PairRecord {
                            pair_id: entry.id.clone(),
                            family: entry.family.clone(),
                            case: case_name(entry.case).into(),
                            has_correspondence: entry.has_correspondence,
                            pre_rmse: res.report.pre_rmse,
                            rmse: res.report.rmse,
                            cd: res.report.cd,
                            inference_seconds: res.inference_seconds,
                        })
                    })
                    .collect()
            });
            let records = records?;

            std::fs::create_dir_all(&out)?;
            cfg.write(&out)?;
            std::fs::write(
                out.join("records.json"),
                serde_json::to_string_pretty(&records)?,
            )?;
            let agg = report_aggregate(&records);
            std::fs::write(out.join("aggregate.csv"), agg.to_csv())?;
            std::fs::write(
                out.join("aggregate.json"),
                serde_json::to_string_pretty(&agg)?,
            )?;
            let overall = agg.rows.last().expect("non-empty");
            println!(
                "evaluated {} pairs: mean rmse {:.4} (pre {:.4}), mean cd {:.4}",
                overall.count, overall.mean_rmse, overall.mean_pre_rmse, overall.mean_cd
            );
            Ok(())
        }

        Command::AnalyzeGmm {
            manifest,
            out,
            components,
            samples,
            seed,
            repetitions,
            picks,
        } => {
            let mut cfg = RunConfig::new("analyze-gmm");
            cfg.set("manifest", &manifest, SOURCE_FLAG);
            cfg.set("out", &out, SOURCE_FLAG);
            let components = cfg.set_opt("components", &components, 16);
            let samples = cfg.set_opt("samples", &samples, 256);
            let seed = cfg.set_opt("seed", &seed, 0);
            let protocol = gmm::DivergenceProtocol {
                repetitions: cfg.set_opt(
                    "repetitions",
                    &repetitions,
                    gmm::DivergenceProtocol::default().repetitions,
                ),
                picks_per_repetition: cfg.set_opt(
                    "picks",
                    &picks,
                    gmm::DivergenceProtocol::default().picks_per_repetition,
                ),
            };

            let man = Manifest::read(&manifest)?;
            let dir = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
            // one collection per family, clouds are the undeformed targets
            let mut collections: Vec<(String, Vec<PointCloud>)> = Vec::new();
            for entry in &man.pairs {
                let (_, tgt) = load_entry(&dir, entry)?;
                match collections.iter_mut().find(|(l, _)| l == &entry.family) {
                    Some((_, v)) => v.push(tgt),
                    None => collections.push((entry.family.clone(), vec![tgt])),
                }
            }
            let matrix = gmm::divergence_matrix(&collections, components, samples, seed, protocol)?;

            std::fs::create_dir_all(&out)?;
            cfg.write(&out)?;
            std::fs::write(out.join("divergence.csv"), matrix.to_csv())?;
            std::fs::write(
                out.join("divergence.json"),
                serde_json::to_string_pretty(&serde_json::json!({
                    "labels": matrix.labels,
                    "values": matrix.values,
                }))?,
            )?;
            print!("{}", matrix.to_csv());
            Ok(())
        }
    }
}

fn case_name(c: Case) -> &'static str {
    match c {
        Case::A => "a",
        Case::B => "b",
    }
}

fn eval_threads() -> usize {
    std::env::var("UNIRIT_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

fn load_pairs(manifest: &Path) -> Result<Vec<unirit_core::TrainPair>, Error> {
    let man = Manifest::read(manifest)?;
    let dir = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    man.pairs
        .iter()
        .map(|entry| {
            let (source, target) = load_entry(&dir, entry)?;
            Ok(unirit_core::TrainPair {
                id: entry.id.clone(),
                source,
                target,
            })
        })
        .collect()
}

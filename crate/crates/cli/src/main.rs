use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kpmix::density::UnderflowRow;
use kpmix::kv::parse_list;
use kpmix::model::Model;
use kpmix::synth::{self, GenConfig};
use kpmix::train::{self, SweepRow, TrainConfig};
use kpmix::{ComponentKind, Error, Precision, Scene, SkeletonSpec};

#[derive(Parser)]
#[command(name = "kpmix", version, about = "Mixture-density keypoint regression on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset from a generator config.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint, log and config into the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train once per group size and print one CSV row each.
    SweepKg {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "1,2,3,6")]
        kg: String,
    },
    /// Underflow ratio of a checkpoint's predictions per group size.
    DiagnoseUnderflow {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "single")]
        precision: Precision,
        /// Dataset to score; a fresh synthetic set when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Group sizes; every divisor of the keypoint count when omitted.
        #[arg(long)]
        kg: Option<String>,
        #[arg(long, default_value = "laplace")]
        kind: ComponentKind,
    },
    /// Finite-difference check of the full training gradient.
    Gradcheck {
        #[arg(long, default_value_t = 64)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

const GRADCHECK_TOL: f64 = 1e-5;

enum Failure {
    Usage(String),
    Abort(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Abort(msg)) => {
            eprintln!("aborted: {msg}");
            ExitCode::from(2)
        }
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn load_data(path: &Path) -> Result<(SkeletonSpec, Vec<Scene>), Failure> {
    let (gen, scenes) = synth::read_dataset(path)?;
    Ok((gen.skeleton, scenes))
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenerateData { config, out } => {
            let gen = GenConfig::from_kv(&read_text(&config)?)?;
            let scenes = synth::generate(&gen)?;
            synth::write_dataset(&out, &gen, &scenes)?;
            eprintln!("wrote {} scenes to {}", scenes.len(), out.display());
        }
        Command::Train { config, out } => {
            let cfg = TrainConfig::from_kv(&read_text(&config)?)?;
            let data = cfg
                .dataset
                .clone()
                .ok_or_else(|| Failure::Usage("config has no `dataset`".into()))?;
            let (skeleton, scenes) = load_data(&data)?;
            let eval = match &cfg.eval_dataset {
                Some(p) => Some(load_data(p)?.1),
                None => None,
            };
            std::fs::create_dir_all(&out).map_err(|e| Failure::Usage(format!("{}: {e}", out.display())))?;
            write_text(&out.join("config.txt"), &cfg.to_kv())?;
            let outcome = train::train(&cfg, &skeleton, &scenes, eval.as_deref())?;
            write_text(&out.join("log.csv"), &train::log_csv(&outcome.log))?;
            if let Some(a) = &outcome.abort {
                let msg = format!("iteration {}: {}", a.iter, a.detail);
                write_text(&out.join("abort.txt"), &format!("{msg}\n"))?;
                return Err(Failure::Abort(msg));
            }
            outcome.model.save(&out.join("model.ckpt"))?;
            if !outcome.evals.is_empty() {
                let mut s = String::from("iter,ap50\n");
                for (it, ap50) in &outcome.evals {
                    s.push_str(&format!("{it},{ap50}\n"));
                }
                write_text(&out.join("evals.csv"), &s)?;
            }
        }
        Command::Eval { checkpoint, data, out } => {
            let model = Model::<f64>::load(&checkpoint)?;
            let (skeleton, scenes) = load_data(&data)?;
            let r = train::evaluate(&model, &scenes, &skeleton, kpmix::eval::SCORE_THRESH, kpmix::eval::NMS_IOU)?;
            write_text(&out, &format!("{}duplicate_rate,{}\n", r.result.metrics_csv(), r.duplicate_rate))?;
            let curves = out.with_extension("curves.csv");
            write_text(&curves, &r.result.curves_csv())?;
            println!("ap={:.4} ap50={:.4} ap75={:.4} duplicate_rate={:.4}", r.result.ap, r.result.ap50, r.result.ap75, r.duplicate_rate);
        }
        Command::SweepKg { config, kg } => {
            let cfg = TrainConfig::from_kv(&read_text(&config)?)?;
            let kgs: Vec<usize> = parse_list(&kg).map_err(Failure::Usage)?;
            let data = cfg
                .dataset
                .clone()
                .ok_or_else(|| Failure::Usage("config has no `dataset`".into()))?;
            let (skeleton, scenes) = load_data(&data)?;
            let eval = match &cfg.eval_dataset {
                Some(p) => load_data(p)?.1,
                None => scenes.clone(),
            };
            let rows = train::sweep_kg(&cfg, &kgs, &skeleton, &scenes, &eval)?;
            println!("{}", SweepRow::CSV_HEADER);
            for r in &rows {
                println!("{}", r.to_csv());
            }
        }
        Command::DiagnoseUnderflow {
            checkpoint,
            precision,
            data,
            kg,
            kind,
        } => {
            let model = Model::<f64>::load(&checkpoint)?;
            let k_total = model.config.head.k_total;
            let scenes = match data {
                Some(p) => load_data(&p)?.1,
                None => {
                    let side = model.config.image_side;
                    let gen = GenConfig {
                        image_side: side,
                        min_scale: 0.375 * side as f64,
                        max_scale: 0.625 * side as f64,
                        num_scenes: 100,
                        ..GenConfig::default()
                    };
                    synth::generate(&gen)?
                }
            };
            let kgs: Vec<usize> = match kg {
                Some(s) => parse_list(&s).map_err(Failure::Usage)?,
                None => (1..=k_total).filter(|k| k_total % k == 0).collect(),
            };
            let rows = train::diagnose_underflow(&model, &scenes, &kgs, precision, kind)?;
            println!("{}", UnderflowRow::CSV_HEADER);
            for r in &rows {
                println!("{}", r.to_csv());
            }
        }
        Command::Gradcheck { probes, seed } => {
            let r = train::pipeline_gradcheck(probes, seed)?;
            println!("op,probes,excluded,max_rel_err");
            println!("pipeline,{},{},{:e}", r.checked.len(), r.excluded.len(), r.max_rel_err);
            if !(r.max_rel_err < GRADCHECK_TOL) {
                return Err(Failure::Usage(format!("gradient check failed: {:e} >= {GRADCHECK_TOL:e}", r.max_rel_err)));
            }
        }
    }
    Ok(())
}

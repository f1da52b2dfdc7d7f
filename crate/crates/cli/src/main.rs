use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use infofocus::error::Error;
use infofocus::eval::{load_detections, write_detections, ApMode};
use infofocus::kernels::gradcheck::REL_TOLERANCE;
use infofocus::pipeline::gradcheck::full_suite;
use infofocus::pipeline::{
    ablate, ablation_csv, bench, density_report, evaluate_detections, infer_dir, load_clouds, train_dir, AblationGrid,
    Dataset, InferMode, Model, PipelineConfig, DEFAULT_EDGE_BAND,
};
use infofocus::synth::{generate_dataset, load_dir, SceneSpec};

#[derive(Parser)]
#[command(
    name = "infofocus",
    version,
    about = "Two-stage pillar detector on synthetic LiDAR scenes"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate labeled synthetic scenes.
    SynthGen {
        /// Scene spec, TOML or `.json`.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a scene directory; writes model.ckpt, config.toml, train_log.jsonl.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a checkpoint over every cloud in a directory.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Emit first-stage boxes without refinement.
        #[arg(long)]
        baseline: bool,
    },
    /// Center-distance mAP of a detections file against labeled scenes.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Clip only the recall axis at 0.1.
        #[arg(long)]
        recall_only: bool,
    },
    /// Train every switch row with every seed and write the mAP table.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Scene directory; overrides the config's data section.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-stage median inference time.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Per-edge return density averaged over labeled objects.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_EDGE_BAND)]
        edge_band: f64,
    },
    /// Finite-difference check of every kernel and the two-stage loss.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        configs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

struct Failure {
    kind: String,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    use std::io::Write;
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, Failure> {
    Ok(match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    })
}

fn run(cmd: Cmd) -> Result<Value, Failure> {
    match cmd {
        Cmd::SynthGen { spec, count, seed, out } => {
            let spec = match spec {
                Some(p) => SceneSpec::load(&p)?,
                None => SceneSpec::default(),
            };
            std::fs::create_dir_all(&out)?;
            let names = generate_dataset(&spec, count, seed, &out)?;
            Ok(json!({ "scenes": names.len(), "out": out }))
        }
        Cmd::Train { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let outcome = train_dir(&cfg, &data, &out)?;
            Ok(json!({ "out": out, "epochs": outcome.epochs.len(), "last": outcome.epochs.last() }))
        }
        Cmd::Infer {
            ckpt,
            data,
            out,
            baseline,
        } => {
            let mode = if baseline { InferMode::Baseline } else { InferMode::Full };
            let scenes = infer_dir(&ckpt, &data, mode)?;
            let mut w = create(&out)?;
            write_detections(&mut w, &scenes)?;
            std::io::Write::flush(&mut w)?;
            let n: usize = scenes.iter().map(|s| s.detections.len()).sum();
            Ok(json!({ "scenes": scenes.len(), "detections": n, "out": out }))
        }
        Cmd::Eval {
            dets,
            gts,
            out,
            recall_only,
        } => {
            let mode = if recall_only {
                ApMode::RecallOnly
            } else {
                ApMode::BothAxes
            };
            let report = evaluate_detections(&load_detections(&dets)?, &gts, mode)?;
            let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
            write_text(&out, &text)?;
            Ok(json!({ "map": report.map, "class_ap": report.class_ap, "out": out }))
        }
        Cmd::Ablate {
            config,
            grid,
            data,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if data.is_some() {
                cfg.data.dir = data;
            }
            let grid = match grid {
                Some(p) => AblationGrid::load(&p)?,
                None => AblationGrid::default(),
            };
            let dataset = Dataset::from_config(&cfg)?;
            let rows = ablate(&cfg, &grid, &dataset, &mut |label, seed, map| {
                eprintln!("{}", json!({ "row": label, "seed": seed, "map": map }));
            })?;
            write_text(&out, &ablation_csv(&rows))?;
            Ok(json!({ "rows": rows, "out": out }))
        }
        Cmd::Bench { ckpt, data, repeats } => {
            let model = Model::load(&ckpt)?;
            let report = bench(&model, &load_clouds(&data)?, repeats)?;
            Ok(serde_json::to_value(&report).map_err(Error::from)?)
        }
        Cmd::Stats { data, out, edge_band } => {
            let scenes: Vec<_> = load_dir(&data, &[])?.into_iter().map(|(_, s)| s).collect();
            let report = density_report(&scenes, edge_band)?;
            write_text(&out, &report.to_csv())?;
            Ok(serde_json::to_value(&report).map_err(Error::from)?)
        }
        Cmd::Gradcheck { configs, seed } => {
            let start = Instant::now();
            let checks = full_suite(configs, seed)?;
            let rows: Vec<Value> = checks
                .iter()
                .map(|c| json!({ "name": c.name, "configs": c.configs, "max_rel_err": c.max_rel_err, "passed": c.passed() }))
                .collect();
            let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
            let summary =
                json!({ "tolerance": REL_TOLERANCE, "seconds": start.elapsed().as_secs_f64(), "checks": rows });
            if failed.is_empty() {
                Ok(summary)
            } else {
                println!("{summary}");
                Err(Failure {
                    kind: "gradcheck_failed".into(),
                    message: format!("finite differences disagree for {}", failed.join(", ")),
                })
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let message: Vec<&str> = text
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect();
            let message = message.join(" ");
            eprintln!(
                "{}",
                json!({ "error": message.trim_start_matches("error: "), "kind": "usage" })
            );
            return ExitCode::from(2);
        }
    };
    match run(cli.cmd) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", json!({ "error": f.message, "kind": f.kind }));
            ExitCode::FAILURE
        }
    }
}

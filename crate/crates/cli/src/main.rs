//! `partnet`: generate data, build hierarchies, train, segment, evaluate
//! and export.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage, 3 I/O, 4 parse or
//! schema violation, 5 failed check. Errors print one line to stderr:
//! `error: code=<name> msg=<message>`.

mod config;
mod error;
mod ply;

use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use partnet_core::autodiff::gradcheck::GradCheckOptions;
use partnet_core::autodiff::{AdamState, Checkpoint};
use partnet_core::data::{self, DatasetManifest, ShapeRecord};
use partnet_core::eval::{evaluate_model, EvalReport};
use partnet_core::hierarchy::{self, BuildOptions, DetectOptions};
use partnet_core::model::{self, curve_csv, infer_segment, predict_leaf_semantics, SegmentationResult, TrainExample};
use partnet_core::nets::{Model, NetConfig};

use config::{Overrides, RunConfig};
use error::{io_err, CliError};

const EXIT_CODES: &str = "Exit codes: 0 ok, 1 other failure, 2 usage, 3 I/O, 4 parse/schema, 5 failed check.";

#[derive(Parser)]
#[command(name = "partnet", version, about = "Recursive part decomposition of point clouds", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labelled shapes and a train/test manifest.
    #[command(after_help = EXIT_CODES)]
    GenData {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build (and validate) the ground-truth hierarchy of one shape.
    #[command(after_help = EXIT_CODES)]
    BuildHierarchy {
        #[arg(long)]
        shape: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Detect symmetry groups from geometry instead of using the recorded ones.
        #[arg(long)]
        detect: bool,
    },
    /// Train on the train split of a manifest.
    #[command(after_help = EXIT_CODES)]
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Run directory for the config echo, log, curve and checkpoints.
        #[arg(long)]
        run: PathBuf,
    },
    /// Segment one shape.
    #[command(after_help = EXIT_CODES)]
    Segment {
        /// Checkpoint to load; a freshly initialized model is used if omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        shape: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a model on one split of a manifest.
    #[command(after_help = EXIT_CODES)]
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Directory for eval.json and ap.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a segmentation as a coloured ASCII PLY.
    #[command(after_help = EXIT_CODES)]
    ExportPly {
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        shape: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every block on the reduced network.
    #[command(after_help = EXIT_CODES)]
    GradCheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum Split {
    Train,
    Test,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(&cli.overrides)?;
    match cli.command {
        Command::GenData { out } => cmd_gen_data(&cfg, &out),
        Command::BuildHierarchy { shape, out, detect } => cmd_build_hierarchy(&shape, &out, detect),
        Command::Train { data, run } => cmd_train(&cfg, &data, &run),
        Command::Segment { checkpoint, shape, out } => cmd_segment(&cfg, checkpoint.as_deref(), &shape, &out),
        Command::Eval { checkpoint, data, split, out } => cmd_eval(&cfg, checkpoint.as_deref(), &data, split, &out),
        Command::ExportPly { result, shape, out } => cmd_export_ply(&result, &shape, &out),
        Command::GradCheck { tol } => cmd_grad_check(&cfg, tol),
    }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let records = data::generate_dataset(&cfg.categories, cfg.count, cfg.seed, cfg.n_points)?;
    let mut paths = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let rel = format!("shapes/shape_{i:05}.json");
        write(&out.join(&rel), data::record_to_json(r))?;
        paths.push(rel);
    }
    let manifest = data::split_dataset(&paths, cfg.train_ratio, cfg.seed, cfg.n_points)?;
    write(&out.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    write(&out.join("config.json"), cfg.to_json())?;
    println!("wrote {} shapes ({} train, {} test) to {}", records.len(), manifest.train.len(), manifest.test.len(), out.display());
    Ok(())
}

fn cmd_build_hierarchy(shape: &Path, out: &Path, detect: bool) -> Result<(), CliError> {
    let record = load_record(shape)?;
    let parts = hierarchy::parts_from_labels(&record.cloud, &record.instance_label)?;
    let groups = if detect { hierarchy::detect_symmetry_groups(&parts, &DetectOptions::default())? } else { record.groups.clone() };
    let id = shape.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let h = hierarchy::build_hierarchy(&id, &parts, &groups, &BuildOptions::default())?;
    let report = hierarchy::validate(&h, &record.cloud, Some(1e-6));
    if !report.is_ok() {
        let first = &report.violations[0];
        return Err(CliError::Check(format!("{} violations, first at {}: {}", report.violations.len(), first.path, first.message)));
    }
    write(out, hierarchy::serialize(&h))?;
    println!("{} nodes, depth {}", h.root.node_count(), h.root.depth());
    Ok(())
}

fn load_record(path: &Path) -> Result<ShapeRecord, CliError> {
    data::load_record(path).map_err(|e| CliError::from(e).at(path))
}

fn load_split(manifest_path: &Path, split: Split) -> Result<Vec<ShapeRecord>, CliError> {
    let manifest = DatasetManifest::load(manifest_path).map_err(|e| CliError::from(e).at(manifest_path))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let list = match split {
        Split::Train => &manifest.train,
        Split::Test => &manifest.test,
    };
    list.iter().map(|p| load_record(&base.join(p))).collect()
}

/// Loads a checkpoint whose network is either the full or the reduced
/// configuration with `cfg.semantic_classes` outputs.
fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Model<f32>, CliError> {
    let Some(path) = checkpoint else {
        return Ok(Model::init(cfg.net(), cfg.seed)?);
    };
    let ckpt = Checkpoint::load(path, cfg.train().adam()).map_err(|e| CliError::from(e).at(path))?;
    for net in [cfg.net(), NetConfig::full(cfg.semantic_classes), NetConfig::reduced(cfg.semantic_classes)] {
        if let Ok(m) = Model::from_store(net, ckpt.params.clone()) {
            return Ok(m);
        }
    }
    Err(CliError::Parse(format!("{}: parameters match no known network layout", path.display())))
}

fn cmd_train(cfg: &RunConfig, data_path: &Path, run: &Path) -> Result<(), CliError> {
    let records = load_split(data_path, Split::Train)?;
    if records.is_empty() {
        return Err(CliError::Usage("train split is empty".into()));
    }
    let examples = records
        .into_iter()
        .map(|r| TrainExample::new(r, &BuildOptions::default()))
        .collect::<partnet_core::Result<Vec<_>>>()?;
    write(&run.join("config.json"), cfg.to_json())?;
    if cfg.checkpoint_every > 0 {
        let dir = run.join("checkpoints");
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    }
    let train_cfg = cfg.train();
    let mut model: Model<f32> = Model::init(cfg.net(), cfg.seed)?;
    let mut adam = AdamState::new(model.store(), train_cfg.adam());
    let mut log = String::new();
    let mut pending_err = None;
    let curve = model::train(&mut model, &mut adam, &examples, &train_cfg, |s, m, a| {
        log.push_str(&format!(
            "iter={} epoch={} total={:.6} class={:.6} seg={:.6} sym={:.6} semantic={:.6}\n",
            s.iteration, s.epoch, s.total, s.class_loss, s.seg_loss, s.sym_loss, s.semantic_loss
        ));
        if cfg.checkpoint_every > 0 && s.iteration % cfg.checkpoint_every == 0 {
            let ckpt = Checkpoint { step: a.step, params: m.store().clone(), adam: Some(a.clone()) };
            if let Err(e) = ckpt.save(run.join(format!("checkpoints/step_{:07}.ckpt", s.iteration))) {
                pending_err = Some(e);
                return Ok(ControlFlow::Break(()));
            }
        }
        Ok(ControlFlow::Continue(()))
    })?;
    if let Some(e) = pending_err {
        return Err(e.into());
    }
    write(&run.join("train.log"), log)?;
    write(&run.join("loss.csv"), curve_csv(&curve))?;
    let ckpt = Checkpoint { step: adam.step, params: model.store().clone(), adam: Some(adam) };
    write(&run.join("model.ckpt"), ckpt.to_bytes())?;
    let last = curve.last().map_or(f64::NAN, |s| s.total);
    println!("trained {} steps, final loss {last:.6}, checkpoint {}", curve.len(), run.join("model.ckpt").display());
    Ok(())
}

fn cmd_segment(cfg: &RunConfig, checkpoint: Option<&Path>, shape: &Path, out: &Path) -> Result<(), CliError> {
    let model = load_model(cfg, checkpoint)?;
    let record = load_record(shape)?;
    let result = infer_segment(&model, &record.cloud, cfg.variant, &cfg.inference())?;
    write(out, result.to_json())?;
    let semantics = predict_leaf_semantics(&result, &model, model.config().semantic_classes)?;
    println!("{} parts, semantic classes {:?}", result.parts.len(), semantics);
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, data_path: &Path, split: Split, out: &Path) -> Result<(), CliError> {
    let model = load_model(cfg, checkpoint)?;
    let records = load_split(data_path, split)?;
    if records.is_empty() {
        return Err(CliError::Usage("split is empty".into()));
    }
    let report: EvalReport = evaluate_model(&model, &records, cfg.variant, &cfg.inference())?;
    let mut csv = String::from("category,variant,AP25,AP50\n");
    for c in &report.ap.categories {
        csv.push_str(&format!("{},{},{:.6},{:.6}\n", c.category, cfg.variant, c.ap[0], c.ap[1]));
    }
    csv.push_str(&format!("mean,{},{:.6},{:.6}\n", cfg.variant, report.ap.mean[0], report.ap.mean[1]));
    write(&out.join("ap.csv"), &csv)?;
    write(&out.join("eval.json"), serde_json::to_string_pretty(&report).expect("report serializes"))?;
    print!("{csv}");
    if let Some(s) = &report.semantic {
        println!("semantic point accuracy {:.4}, leaf accuracy {:.4}", s.point_accuracy, s.leaf_accuracy);
    }
    Ok(())
}

fn cmd_export_ply(result: &Path, shape: &Path, out: &Path) -> Result<(), CliError> {
    let record = load_record(shape)?;
    let text = fs::read_to_string(result).map_err(|e| io_err(result, e))?;
    let seg = SegmentationResult::from_json(&text, "", record.cloud.orig_index()).map_err(|e| CliError::from(e).at(result))?;
    write(out, ply::to_ply(&record.cloud, &seg.instance_id))?;
    println!("{} points, {} parts", record.len(), seg.parts.len());
    Ok(())
}

fn cmd_grad_check(cfg: &RunConfig, tol: f64) -> Result<(), CliError> {
    let opts = GradCheckOptions { tol, ..Default::default() };
    let checks = model::gradient_check_suite(cfg.seed, &opts)?;
    let mut worst: f64 = 0.0;
    for c in &checks {
        println!("{:<32} checked={:<5} kinks={:<3} max_rel_err={:.3e}", c.name, c.report.checked, c.report.skipped_kinks, c.report.max_rel_err);
        worst = worst.max(c.report.max_rel_err);
    }
    if checks.iter().all(|c| c.report.passed(tol)) {
        println!("PASS, max rel err {worst:.3e} <= {tol:.0e}");
        Ok(())
    } else {
        println!("FAIL, max rel err {worst:.3e} > {tol:.0e}");
        Err(CliError::Check(format!("gradient check failed: max rel err {worst:.3e}")))
    }
}

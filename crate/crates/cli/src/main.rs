//! Command-line entrypoint: teacher training, distillation, evaluation, and
//! embedding export over TSV interaction data.

mod checkpoint;
mod config;

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use glrec::dataset::{build_splits, load_presplit, load_tsv, SplitDataset};
use glrec::eval;
use glrec::numkit::{DenseMatrix, Rng};
use glrec::teacher::{self, streams, TeacherModel};
use glrec::trainer::{baseline_bpr_mlp, distill, EpochRecord, RunConfig};
use glrec::Error;

use checkpoint::{Checkpoint, Meta, ModelKind};
use config::FileConfig;

#[derive(Parser)]
#[command(name = "glrec", about = "Graph-less collaborative filtering pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the graph teacher and write its checkpoint.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
    },
    /// Distill a trained teacher into the MLP student.
    Distill {
        #[arg(long)]
        config: PathBuf,
        /// Teacher checkpoint; required unless --baseline.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Train the plain BPR student instead (no teacher, no distillation).
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        disable_l1: bool,
        #[arg(long)]
        disable_l2: bool,
        #[arg(long)]
        disable_l3: bool,
    },
    /// Score a checkpoint against a pre-split data directory.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// Directory with train.tsv / valid.tsv / test.tsv.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        n: usize,
        /// Also report the mean-average-distance over-smoothing measure.
        #[arg(long)]
        mad: bool,
        /// Counterpart checkpoint (the other model kind) for an inference
        /// timing comparison.
        #[arg(long)]
        bench: Option<PathBuf>,
    },
    /// Dump checkpoint embeddings as TSV (node_kind, index, d floats).
    ExportEmbeddings {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parse { .. } => 1,
        Error::NonFinite(_) | Error::Divergence(_) => 3,
        _ => 2,
    }
}

fn main() {
    if let Ok(threads) = std::env::var("GLRC_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainTeacher { config } => cmd_train_teacher(&config),
        Command::Distill {
            config,
            teacher,
            baseline,
            disable_l1,
            disable_l2,
            disable_l3,
        } => cmd_distill(&config, teacher.as_deref(), baseline, disable_l1, disable_l2, disable_l3),
        Command::Evaluate {
            model,
            data,
            n,
            mad,
            bench,
        } => cmd_evaluate(&model, &data, n, mad, bench.as_deref()),
        Command::ExportEmbeddings { model, out } => cmd_export(&model, &out),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}

fn write_split_tsv(path: &Path, set: &glrec::dataset::InteractionSet, ids: &glrec::dataset::IdMaps) -> Result<(), Error> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for &(u, i) in &set.edges {
        writeln!(out, "{}\t{}", ids.users[u], ids.items[i])?;
    }
    Ok(())
}

/// Load the dataset named by the config. A single interactions file is split
/// by ratio; when `persist_dir` is given the resulting split is also written
/// there as train/valid/test.tsv so later evaluation can reuse it.
fn load_data(
    file_cfg: &FileConfig,
    cfg: &RunConfig,
    persist_dir: Option<&Path>,
) -> Result<SplitDataset, Error> {
    if let Some(dir) = &file_cfg.data.presplit_dir {
        return load_presplit(dir);
    }
    let path = file_cfg.data.interactions.as_ref().unwrap();
    let loaded = load_tsv(path)?;
    let root = Rng::new(cfg.seed);
    let split = build_splits(
        loaded,
        (
            file_cfg.data.train_ratio,
            file_cfg.data.valid_ratio,
            file_cfg.data.test_ratio,
        ),
        &mut root.split(streams::SPLIT),
    )?;
    if let Some(dir) = persist_dir {
        write_split_tsv(&dir.join("train.tsv"), &split.train, &split.id_maps)?;
        write_split_tsv(&dir.join("valid.tsv"), &split.valid, &split.id_maps)?;
        write_split_tsv(&dir.join("test.tsv"), &split.test, &split.id_maps)?;
    }
    Ok(split)
}

fn write_metrics(path: &Path, records: &[EpochRecord]) -> Result<(), Error> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        let line = serde_json::to_string(rec).map_err(|e| Error::Data(format!("metrics: {e}")))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn best_recall(records: &[EpochRecord]) -> f64 {
    records
        .iter()
        .map(|r| r.recall20)
        .filter(|r| r.is_finite())
        .fold(f64::NAN, f64::max)
}

fn cmd_train_teacher(config_path: &Path) -> Result<(), Error> {
    let (file_cfg, hash) = FileConfig::load(config_path)?;
    let cfg = file_cfg.run_config()?;
    std::fs::create_dir_all(&file_cfg.output.dir)?;
    let split = load_data(&file_cfg, &cfg, Some(&file_cfg.output.dir))?;
    let (model, records) = teacher::train_teacher(&split, &cfg)?;

    let ckpt_path = file_cfg.output.dir.join("teacher.ckpt");
    checkpoint::save(&ckpt_path, &Checkpoint::from_teacher(&model))?;
    checkpoint::save_meta(
        &ckpt_path,
        &Meta {
            config_hash: hash,
            seed: cfg.seed,
            epoch: records.len(),
            validation_metric: best_recall(&records),
            layer_average: cfg.layer_average,
        },
    )?;
    write_metrics(&file_cfg.output.dir.join("teacher_metrics.jsonl"), &records)?;
    println!("teacher checkpoint written to {}", ckpt_path.display());
    Ok(())
}

fn rebuild_teacher(
    ckpt: Checkpoint,
    split: &SplitDataset,
    layer_average: bool,
) -> Result<TeacherModel, Error> {
    if ckpt.kind != ModelKind::Teacher {
        return Err(Error::Data("checkpoint does not hold a teacher".into()));
    }
    if ckpt.user_count != split.train.user_count || ckpt.item_count != split.train.item_count {
        return Err(Error::Data(format!(
            "checkpoint is {}x{} but data is {}x{}",
            ckpt.user_count, ckpt.item_count, split.train.user_count, split.train.item_count
        )));
    }
    let mut model =
        TeacherModel::from_embeddings(&split.train, ckpt.embeddings, ckpt.layers, layer_average)?;
    model.propagate()?;
    Ok(model)
}

fn cmd_distill(
    config_path: &Path,
    teacher_path: Option<&Path>,
    baseline: bool,
    disable_l1: bool,
    disable_l2: bool,
    disable_l3: bool,
) -> Result<(), Error> {
    let (file_cfg, hash) = FileConfig::load(config_path)?;
    let mut cfg = file_cfg.run_config()?;
    cfg.disable_l1 = disable_l1;
    cfg.disable_l2 = disable_l2;
    cfg.disable_l3 = disable_l3;
    std::fs::create_dir_all(&file_cfg.output.dir)?;
    let split = load_data(&file_cfg, &cfg, Some(&file_cfg.output.dir))?;

    let (student, records, name) = if baseline {
        let (student, records) = baseline_bpr_mlp(&split, &cfg)?;
        (student, records, "baseline")
    } else {
        let teacher_path = teacher_path.ok_or_else(|| {
            Error::Config("distill needs --teacher <checkpoint> (or --baseline)".into())
        })?;
        let ckpt = checkpoint::load(teacher_path)?;
        if ckpt.layers < 2 && !disable_l2 {
            return Err(Error::Config(format!(
                "embedding distillation needs a teacher with >= 2 layers, checkpoint has {}",
                ckpt.layers
            )));
        }
        let layer_average = checkpoint::load_meta(teacher_path)
            .map(|m| m.layer_average)
            .unwrap_or(false);
        let teacher_model = rebuild_teacher(ckpt, &split, layer_average)?;
        let (student, records) = distill(&split, &teacher_model, &cfg)?;
        (student, records, "student")
    };

    let ckpt_path = file_cfg.output.dir.join(format!("{name}.ckpt"));
    checkpoint::save(&ckpt_path, &Checkpoint::from_student(&student))?;
    checkpoint::save_meta(
        &ckpt_path,
        &Meta {
            config_hash: hash,
            seed: cfg.seed,
            epoch: records.len(),
            validation_metric: best_recall(&records),
            layer_average: false,
        },
    )?;
    write_metrics(
        &file_cfg.output.dir.join(format!("{name}_metrics.jsonl")),
        &records,
    )?;
    println!("{name} checkpoint written to {}", ckpt_path.display());
    Ok(())
}

/// Final scoring embeddings of a checkpoint: propagated readout for a
/// teacher, MLP output for a student.
fn scoring_embeddings(ckpt: Checkpoint, split: &SplitDataset, layer_average: bool) -> Result<DenseMatrix, Error> {
    match ckpt.kind {
        ModelKind::Teacher => {
            let model = rebuild_teacher(ckpt, split, layer_average)?;
            Ok(model.readout()?.clone())
        }
        ModelKind::Student => {
            if ckpt.user_count != split.train.user_count
                || ckpt.item_count != split.train.item_count
            {
                return Err(Error::Data(format!(
                    "checkpoint is {}x{} but data is {}x{}",
                    ckpt.user_count,
                    ckpt.item_count,
                    split.train.user_count,
                    split.train.item_count
                )));
            }
            let student = ckpt.into_student()?;
            Ok(student.forward_all()?.0)
        }
    }
}

fn cmd_evaluate(
    model_path: &Path,
    data_dir: &Path,
    n: usize,
    with_mad: bool,
    bench: Option<&Path>,
) -> Result<(), Error> {
    let split = load_presplit(data_dir)?;
    let ckpt = checkpoint::load(model_path)?;
    let kind = ckpt.kind;
    let layer_average = checkpoint::load_meta(model_path)
        .map(|m| m.layer_average)
        .unwrap_or(false);
    let emb = scoring_embeddings(ckpt, &split, layer_average)?;
    let report = eval::evaluate(
        &emb,
        split.train.user_count,
        split.train.item_count,
        &[&split.train, &split.valid],
        &split.test,
        n,
    );

    let mut out = serde_json::Map::new();
    out.insert(
        "model".into(),
        match kind {
            ModelKind::Teacher => "teacher",
            ModelKind::Student => "student",
        }
        .into(),
    );
    out.insert("n".into(), n.into());
    out.insert(format!("recall{n}"), report.recall.into());
    out.insert(format!("ndcg{n}"), report.ndcg.into());
    out.insert("evaluated_users".into(), report.evaluated_users.into());

    if with_mad {
        let rows = eval::top_popular(&split.train, 500);
        let (value, excluded) = eval::mad(&emb, &rows)?;
        out.insert(
            "mad".into(),
            serde_json::json!({ "value": value, "excluded_rows": excluded }),
        );
    }

    if let Some(other_path) = bench {
        let a = checkpoint::load(model_path)?;
        let b = checkpoint::load(other_path)?;
        let (t_ckpt, s_ckpt) = match (a.kind, b.kind) {
            (ModelKind::Teacher, ModelKind::Student) => (a, b),
            (ModelKind::Student, ModelKind::Teacher) => (b, a),
            _ => {
                return Err(Error::Config(
                    "--bench needs one teacher and one student checkpoint".into(),
                ))
            }
        };
        let mut teacher_model = rebuild_teacher(t_ckpt, &split, layer_average)?;
        let student = s_ckpt.into_student()?;
        let users: Vec<usize> = (0..split.train.user_count.min(200)).collect();
        let bench_report = eval::bench_inference(&mut teacher_model, &student, &users, 9)?;
        out.insert(
            "bench".into(),
            serde_json::to_value(bench_report).map_err(|e| Error::Data(e.to_string()))?,
        );
    }

    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::Value::Object(out))
            .map_err(|e| Error::Data(e.to_string()))?
    );
    Ok(())
}

fn cmd_export(model_path: &Path, out_path: &Path) -> Result<(), Error> {
    let ckpt = checkpoint::load(model_path)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(out_path)?);
    for u in 0..ckpt.user_count {
        let row = ckpt.embeddings.row(u);
        write!(out, "user\t{u}")?;
        for v in row {
            write!(out, "\t{v}")?;
        }
        writeln!(out)?;
    }
    for j in 0..ckpt.item_count {
        let row = ckpt.embeddings.row(ckpt.user_count + j);
        write!(out, "item\t{j}")?;
        for v in row {
            write!(out, "\t{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

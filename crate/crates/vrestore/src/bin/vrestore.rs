//! Command-line entry points: prepare-data, train-stage1, train-stage2,
//! infer, evaluate, report.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use vrestore::checkpoint::Checkpoint;
use vrestore::config::RunConfig;
use vrestore::data::{
    degrade, label_pqfs, load_sequence, remove_duplicates, save_sequence, Manifest,
    ManifestEntry, VideoSequence,
};
use vrestore::ensemble::{cascade_infer, DihedralTransform};
use vrestore::error::Error;
use vrestore::eval::{self, EvalMode};
use vrestore::stage1::{load_stage1, Stage1Net};
use vrestore::stage2::{init_from_pretrained, load_stage2, pretrain_denoiser, train_stage2};
use vrestore::synth::toy_sequence;
use vrestore::train::{train_stage1, MetricsLog};

#[derive(Parser)]
#[command(name = "vrestore", about = "Two-stage compressed-video restoration")]
struct Cli {
    /// Run configuration file (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dotted-path config overrides, e.g. --set train.seed=7
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the toy divisor (1 = paper-faithful budgets).
    #[arg(long, global = true)]
    toy_divisor: Option<usize>,

    /// Allow clobbering existing artifacts.
    #[arg(long, global = true, default_value_t = false)]
    overwrite: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TtaMode {
    None,
    Stage1,
    Stage2,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    All,
    Every10th,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> EvalMode {
        match m {
            ModeArg::All => EvalMode::All,
            ModeArg::Every10th => EvalMode::Every10th,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the dataset: synthesize/ingest GT, degrade, remove duplicate
    /// frames, label PQFs and write the train/val manifest.
    PrepareData,
    /// Run the progressive Stage-I training plan.
    TrainStage1,
    /// Pretrain the denoiser (unless an init is given) and fine-tune Stage II.
    TrainStage2(TrainStage2Args),
    /// Enhance sequences with the cascade.
    Infer(InferArgs),
    /// PSNR evaluation of predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Summarize evaluation CSVs into a table.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainStage2Args {
    /// Stage-I checkpoint; defaults to the last phase checkpoint in the
    /// output directory.
    #[arg(long)]
    stage1_ckpt: Option<PathBuf>,
    /// Stage-II init checkpoint (e.g. a denoiser pretrain). When absent, a
    /// denoiser is pretrained first.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Denoising pretrain budget (iterations).
    #[arg(long, default_value_t = 300)]
    pretrain_budget: usize,
    /// Gaussian noise sigma for the denoising pretrain.
    #[arg(long, default_value_t = 0.05)]
    noise_sigma: f64,
}

#[derive(Args)]
struct InferArgs {
    /// Stage-I checkpoints, comma-separated (1 or 2 for model ensemble).
    #[arg(long, value_delimiter = ',')]
    models: Vec<PathBuf>,
    /// Stage-II checkpoint (optional).
    #[arg(long)]
    stage2: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TtaMode::None)]
    tta: TtaMode,
    /// Input LQ sequence directory; defaults to the manifest's val split.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of predicted sequences (subdirectory per sequence).
    /// Defaults to the infer output directory.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::All)]
    mode: ModeArg,
    /// Evaluate on the BT.601 luma plane only.
    #[arg(long, default_value_t = false)]
    luma_only: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Summary CSV files produced by `evaluate`.
    #[arg(required = true)]
    summaries: Vec<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path, &cli.overrides)?,
        None => {
            let root = std::env::current_dir()?;
            RunConfig::toy_default(&root.join("run"))
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
        cfg.stage2_train.seed = seed;
    }
    if let Some(d) = cli.toy_divisor {
        cfg.toy_divisor = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn guard_clobber(path: &Path, overwrite: bool) -> anyhow::Result<()> {
    if path.exists() && !overwrite {
        bail!(Error::WouldClobber(path.to_path_buf()));
    }
    Ok(())
}

/// Config snapshot + seed, enough to reproduce the artifacts of a command.
fn write_run_meta(cfg: &RunConfig, dir: &Path, command: &str) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = serde_json::json!({
        "command": command,
        "seed": cfg.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "config": serde_json::to_value(cfg)?,
    });
    std::fs::write(
        dir.join(format!("run_meta_{command}.json")),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::PrepareData => cmd_prepare_data(&cfg, cli.overwrite),
        Command::TrainStage1 => cmd_train_stage1(&cfg, cli.overwrite),
        Command::TrainStage2(args) => cmd_train_stage2(&cfg, args, cli.overwrite),
        Command::Infer(args) => cmd_infer(&cfg, args, cli.overwrite),
        Command::Evaluate(args) => cmd_evaluate(&cfg, args, cli.overwrite),
        Command::Report(args) => cmd_report(args),
    }
}

fn cmd_prepare_data(cfg: &RunConfig, overwrite: bool) -> anyhow::Result<()> {
    let root = &cfg.dataset.root;
    let manifest_path = cfg.manifest_path();
    guard_clobber(&manifest_path, overwrite)?;
    std::fs::create_dir_all(root)?;

    // Ground truth: ingest raw sequences or synthesize toy ones.
    let mut gt_seqs: Vec<VideoSequence> = Vec::new();
    if let Some(raw) = &cfg.dataset.raw_gt_dir {
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(raw)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        if dirs.is_empty() {
            bail!("no raw GT sequence directories under {}", raw.display());
        }
        for dir in dirs {
            let seq = load_sequence(&dir, "frame_")
                .with_context(|| format!("ingesting {}", dir.display()))?;
            gt_seqs.push(seq);
        }
    } else {
        let synth = cfg.dataset.synth.as_ref().expect("validated");
        for i in 0..synth.sequences {
            gt_seqs.push(toy_sequence(
                format!("seq{i:03}"),
                synth.height,
                synth.width,
                synth.frames,
                cfg.seed ^ (i as u64).wrapping_mul(0x9E3779B97F4A7C15),
            )?);
        }
    }

    let mut entries: Vec<ManifestEntry> = Vec::new();
    for gt in &gt_seqs {
        let lq = degrade(gt, &cfg.profile)
            .with_context(|| format!("degrading sequence {}", gt.id))?;
        let (lq, gt_clean) = remove_duplicates(&lq, gt)
            .with_context(|| format!("deduplicating sequence {}", gt.id))?;
        let labels = label_pqfs(&lq, Some(&gt_clean), None)
            .with_context(|| format!("labeling sequence {}", gt.id))?;
        let gt_dir = root.join("gt").join(&gt.id);
        let lq_dir = root.join("lq").join(&gt.id);
        save_sequence(&gt_clean, &gt_dir)?;
        save_sequence(&lq, &lq_dir)?;
        entries.push(ManifestEntry {
            id: gt.id.clone(),
            lq_dir,
            gt_dir,
            pqf_labels: labels,
        });
    }

    // Offline validation split: the last `val_sequences` ids.
    let n_val = cfg.dataset.val_sequences.min(entries.len().saturating_sub(1));
    let split = entries.len() - n_val;
    let manifest = Manifest {
        profile: cfg.profile.clone(),
        train: entries[..split].to_vec(),
        val: entries[split..].to_vec(),
    };
    manifest.save(&manifest_path)?;
    write_run_meta(cfg, root, "prepare-data")?;
    println!(
        "prepared {} train / {} val sequences; manifest at {}",
        manifest.train.len(),
        manifest.val.len(),
        manifest_path.display()
    );
    Ok(())
}

fn load_split(manifest: &Manifest) -> anyhow::Result<(
    Vec<(VideoSequence, VideoSequence)>,
    Vec<(VideoSequence, VideoSequence)>,
)> {
    let load = |entries: &[ManifestEntry]| -> anyhow::Result<Vec<(VideoSequence, VideoSequence)>> {
        entries
            .iter()
            .map(|e| Manifest::load_entry(e).map_err(Into::into))
            .collect()
    };
    Ok((load(&manifest.train)?, load(&manifest.val)?))
}

fn require_manifest(cfg: &RunConfig) -> anyhow::Result<Manifest> {
    let path = cfg.manifest_path();
    if !path.exists() {
        bail!(
            "missing prerequisite: dataset manifest {} (run `vrestore prepare-data` first)",
            path.display()
        );
    }
    Ok(Manifest::load(&path)?)
}

fn cmd_train_stage1(cfg: &RunConfig, overwrite: bool) -> anyhow::Result<()> {
    let manifest = require_manifest(cfg)?;
    let (train, val) = load_split(&manifest)?;
    let out_dir = cfg.output_dir.join("stage1");
    let metrics_path = out_dir.join("metrics.csv");
    guard_clobber(&metrics_path, overwrite)?;
    std::fs::create_dir_all(&out_dir)?;
    let mut log = MetricsLog::create(&metrics_path)?;
    let plan = cfg.phase_plan();
    let outcomes = train_stage1(
        &plan,
        &train,
        &val,
        &cfg.stage1,
        &cfg.train,
        None,
        &out_dir,
        &mut log,
    )?;
    write_run_meta(cfg, &out_dir, "train-stage1")?;
    for (i, o) in outcomes.iter().enumerate() {
        println!(
            "phase {}: val {:.4} -> {:.4} dB ({})",
            i + 1,
            o.initial_val_psnr,
            o.final_val_psnr,
            o.checkpoint_path.display()
        );
    }
    Ok(())
}

fn latest_stage1_ckpt(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let dir = cfg.output_dir.join("stage1");
    let mut candidates: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|_| {
            anyhow::anyhow!(
                "missing prerequisite: no Stage-I checkpoints in {} (run `vrestore train-stage1`)",
                dir.display()
            )
        })?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "ckpt").unwrap_or(false))
        .collect();
    candidates.sort();
    candidates
        .pop()
        .ok_or_else(|| anyhow::anyhow!("no Stage-I checkpoint found in {}", dir.display()))
}

fn cmd_train_stage2(cfg: &RunConfig, args: &TrainStage2Args, overwrite: bool) -> anyhow::Result<()> {
    let manifest = require_manifest(cfg)?;
    let (train, val) = load_split(&manifest)?;
    let stage1_path = match &args.stage1_ckpt {
        Some(p) => p.clone(),
        None => latest_stage1_ckpt(cfg)?,
    };
    let stage1 = load_stage1(&Checkpoint::load(&stage1_path)?, &candle_core::Device::Cpu)?;
    let out_dir = cfg.output_dir.join("stage2");
    guard_clobber(&out_dir.join("stage2.ckpt"), overwrite)?;
    std::fs::create_dir_all(&out_dir)?;

    let init_ckpt = match &args.init {
        Some(p) => Checkpoint::load(p)?,
        None => {
            let clean: Vec<_> = train
                .iter()
                .flat_map(|(_, gt)| gt.frames.iter().cloned())
                .collect();
            let ckpt = pretrain_denoiser(
                &cfg.stage2,
                args.noise_sigma,
                &clean,
                args.pretrain_budget,
                cfg.stage2_train.patch_size,
                1e-3,
                cfg.seed,
            )?;
            let path = out_dir.join("denoiser.ckpt");
            ckpt.save(&path)?;
            println!("denoiser pretrain saved to {}", path.display());
            ckpt
        }
    };
    let (init, _) = init_from_pretrained(
        &init_ckpt,
        &cfg.stage2,
        &candle_core::Device::Cpu,
        cfg.seed,
        false,
    )?;
    let outcome = train_stage2(&stage1, &train, &val, &init, &cfg.stage2_train, &out_dir)?;
    write_run_meta(cfg, &out_dir, "train-stage2")?;
    println!(
        "stage2: cascade val {:.4} -> {:.4} dB ({})",
        outcome.initial_cascade_psnr,
        outcome.best_cascade_psnr,
        outcome.checkpoint_path.display()
    );
    Ok(())
}

fn cmd_infer(cfg: &RunConfig, args: &InferArgs, overwrite: bool) -> anyhow::Result<()> {
    let device = candle_core::Device::Cpu;
    let model_paths = if args.models.is_empty() {
        vec![latest_stage1_ckpt(cfg)?]
    } else {
        args.models.clone()
    };
    let stage1_nets: Vec<Stage1Net> = model_paths
        .iter()
        .map(|p| -> anyhow::Result<Stage1Net> {
            Ok(load_stage1(&Checkpoint::load(p)?, &device)?)
        })
        .collect::<anyhow::Result<_>>()?;
    let stage1_refs: Vec<&Stage1Net> = stage1_nets.iter().collect();
    let stage2 = match &args.stage2 {
        Some(p) => Some(load_stage2(&Checkpoint::load(p)?, &device)?),
        None => {
            let default = cfg.output_dir.join("stage2").join("stage2.ckpt");
            if default.exists() {
                Some(load_stage2(&Checkpoint::load(&default)?, &device)?)
            } else {
                None
            }
        }
    };

    let identity = [DihedralTransform::IDENTITY];
    let all = DihedralTransform::all();
    let (s1_transforms, s2_tta): (&[DihedralTransform], bool) = match args.tta {
        TtaMode::None => (&identity, false),
        TtaMode::Stage1 => (&all, false),
        TtaMode::Stage2 => (&identity, true),
        TtaMode::Both => (&all, true),
    };

    let out_root = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("pred"));
    let inputs: Vec<VideoSequence> = match &args.input {
        Some(dir) => vec![{
            let mut s = load_sequence(dir, "frame_")?;
            if s.pqf_labels.is_none() {
                s.pqf_labels = Some(label_pqfs(&s, None, Some(&cfg.profile))?);
            }
            s
        }],
        None => {
            let manifest = require_manifest(cfg)?;
            manifest
                .val
                .iter()
                .map(|e| Manifest::load_entry(e).map(|(lq, _)| lq))
                .collect::<Result<_, _>>()?
        }
    };

    for seq in &inputs {
        let out_dir = out_root.join(&seq.id);
        guard_clobber(&out_dir, overwrite)?;
        let enhanced = cascade_infer(seq, &stage1_refs, s1_transforms, stage2.as_ref(), s2_tta)?;
        save_sequence(&enhanced, &out_dir)?;
        println!("wrote {} frames to {}", enhanced.len(), out_dir.display());
    }
    write_run_meta(cfg, &out_root, "infer")?;
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, args: &EvaluateArgs, overwrite: bool) -> anyhow::Result<()> {
    let manifest = require_manifest(cfg)?;
    let pred_root = args
        .pred
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("pred"));
    if !pred_root.exists() {
        bail!(
            "missing prerequisite: prediction directory {} (run `vrestore infer` first)",
            pred_root.display()
        );
    }
    let mode: EvalMode = args.mode.into();
    let mut per_frame = Vec::new();
    let mut per_sequence = Vec::new();
    for entry in &manifest.val {
        let pred_dir = pred_root.join(&entry.id);
        if !pred_dir.exists() {
            bail!("missing prediction for sequence {}", entry.id);
        }
        let mut pred = load_sequence(&pred_dir, "frame_")?;
        pred.id = entry.id.clone();
        let mut gt = load_sequence(&entry.gt_dir, "frame_")?;
        gt.id = entry.id.clone();
        let (frames, score) = eval::evaluate(&pred, &gt, mode, args.luma_only)?;
        per_frame.extend(frames);
        per_sequence.push(score);
    }
    let report = eval::aggregate(mode, per_frame, per_sequence)?;
    let out_dir = cfg.output_dir.join("eval");
    let summary_path = out_dir.join("summary.csv");
    guard_clobber(&summary_path, overwrite)?;
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("per_frame.csv"), report.frame_csv())?;
    std::fs::write(&summary_path, report.summary_csv())?;
    std::fs::write(out_dir.join("table.txt"), report.table_text())?;
    write_run_meta(cfg, &out_dir, "evaluate")?;
    print!("{}", report.table_text());
    println!("aggregate: {:.4} dB over {} sequences", report.aggregate, report.per_sequence.len());
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> anyhow::Result<()> {
    for path in &args.summaries {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut rows: Vec<(String, f64)> = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let id = record.get(0).unwrap_or("").to_string();
            let psnr: f64 = record.get(1).unwrap_or("0").parse().unwrap_or(f64::NAN);
            if id != "Avg." {
                rows.push((id, psnr));
            }
        }
        if rows.is_empty() {
            bail!("{}: no rows", path.display());
        }
        let avg = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
        println!("{}:", path.display());
        let mut header = String::from("| Sequence |");
        let mut row = String::from("| PSNR(dB) |");
        for (id, v) in &rows {
            header.push_str(&format!(" {id} |"));
            row.push_str(&format!(" {v:.2} |"));
        }
        header.push_str(" Avg. |");
        row.push_str(&format!(" {avg:.4} |"));
        println!("{header}\n{row}");
    }
    Ok(())
}

//! Progressive Stage-I training: phase plans, function-preserving parameter
//! transfer, losses, warm-restart learning-rate schedule and the loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{make_patches, VideoSequence};
use crate::error::{Error, Result};
use crate::eval::{self, EvalMode};
use crate::stage1::{Stage1Net, StageIConfig, MAX_GROUPS};
use crate::tensorize::sequence_to_tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.99;
pub const DEFAULT_CHARBONNIER_EPS: f64 = 1e-3;
pub const DEFAULT_ETA_MIN: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Charbonnier,
    Mse,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Phase {
    /// Active reconstruction groups during this phase.
    pub k: usize,
    pub iterations: usize,
    pub loss: LossKind,
    pub lr0: f64,
    pub warmup_fraction: f64,
    /// Cosine restart period in iterations.
    pub period: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhasePlan {
    pub phases: Vec<Phase>,
}

impl PhasePlan {
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::Config("phase plan has no phases".into()));
        }
        let mut prev_k = 0usize;
        for (i, p) in self.phases.iter().enumerate() {
            if p.k < 1 || p.k > MAX_GROUPS {
                return Err(Error::Config(format!("phase {i}: k={} out of range", p.k)));
            }
            if p.k < prev_k {
                return Err(Error::Config(format!(
                    "phase {i}: k must not decrease ({} after {prev_k})",
                    p.k
                )));
            }
            if p.k == prev_k && !(p.k == MAX_GROUPS && p.loss == LossKind::Mse) {
                return Err(Error::Config(format!(
                    "phase {i}: repeated k={} only allowed for the final MSE fine-tune",
                    p.k
                )));
            }
            if p.iterations == 0 {
                return Err(Error::Config(format!("phase {i}: iterations must be >= 1")));
            }
            if !(0.0..1.0).contains(&p.warmup_fraction) {
                return Err(Error::Config(format!(
                    "phase {i}: warmup_fraction must be in [0, 1)"
                )));
            }
            prev_k = p.k;
        }
        Ok(())
    }
}

/// Iteration budgets are divided by this factor in toy mode.
pub const TOY_DIVISOR: usize = 2000;

/// The paper-faithful schedule: six Charbonnier phases growing the trunk from
/// 5 to 55 blocks, then an MSE fine-tune. Toy mode divides the iteration
/// budgets by `TOY_DIVISOR` and raises the learning rate, since the desk-scale
/// model trains from scratch rather than from a pretrained baseline.
pub fn build_phase_plan(toy: bool) -> PhasePlan {
    build_phase_plan_scaled(if toy { TOY_DIVISOR } else { 1 })
}

pub fn build_phase_plan_scaled(divisor: usize) -> PhasePlan {
    let toy = divisor > 1;
    let charb_iters = (300_000 / divisor).max(1);
    let mse_iters = (100_000 / divisor).max(1);
    let lr0 = if toy { 1e-3 } else { 2e-5 };
    let mut phases: Vec<Phase> = (1..=MAX_GROUPS)
        .map(|k| Phase {
            k,
            iterations: charb_iters,
            loss: LossKind::Charbonnier,
            lr0,
            warmup_fraction: 0.1,
            period: charb_iters,
        })
        .collect();
    phases.push(Phase {
        k: MAX_GROUPS,
        iterations: mse_iters,
        loss: LossKind::Mse,
        lr0: lr0 / 2.0,
        warmup_fraction: 0.1,
        period: mse_iters,
    });
    PhasePlan { phases }
}

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LRSchedule {
    pub lr0: f64,
    pub eta_min: f64,
    /// Restart period in iterations.
    pub period: usize,
    pub warmup_fraction: f64,
}

/// Linear warmup for the first `warmup_fraction` of each period, then cosine
/// decay from lr0 to eta_min; repeats every `period` iterations.
pub fn lr_at(s: &LRSchedule, t: usize) -> Result<f64> {
    if s.period == 0 {
        return Err(Error::Argument("schedule period must be positive".into()));
    }
    let u = (t % s.period) as f64;
    let wt = s.warmup_fraction * s.period as f64;
    if u < wt {
        return Ok(s.lr0 * (u + 1.0) / wt);
    }
    let progress = (u - wt) / (s.period as f64 - wt);
    Ok(s.eta_min + 0.5 * (s.lr0 - s.eta_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean of sqrt((pred - gt)^2 + eps^2).
pub fn charbonnier(pred: &Tensor, gt: &Tensor, eps: f64) -> Result<Tensor> {
    if pred.dims() != gt.dims() {
        return Err(Error::Argument(format!(
            "shape mismatch: {:?} vs {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Argument("charbonnier eps must be positive".into()));
    }
    let d = (pred - gt)?;
    Ok((d.sqr()? + eps * eps)?.sqrt()?.mean_all()?)
}

/// Mean squared error.
pub fn mse_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred.dims() != gt.dims() {
        return Err(Error::Argument(format!(
            "shape mismatch: {:?} vs {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok((pred - gt)?.sqr()?.mean_all()?)
}

pub fn loss_of(kind: LossKind, pred: &Tensor, gt: &Tensor, eps: f64) -> Result<Tensor> {
    match kind {
        LossKind::Charbonnier => charbonnier(pred, gt, eps),
        LossKind::Mse => mse_loss(pred, gt),
    }
}

// ---------------------------------------------------------------------------
// Function-preserving parameter transfer
// ---------------------------------------------------------------------------

/// Build a net for `cfg` and load E, P, S, R, flow and all R_i the checkpoint
/// carries below the active group count. Newly grown groups keep their fresh
/// initialization (zero residual-branch output convs), so the grown model
/// computes exactly the same function as the source.
pub fn transfer_parameters(
    prev: &Checkpoint,
    cfg: &StageIConfig,
    device: &Device,
    seed: u64,
) -> Result<Stage1Net> {
    cfg.validate()?;
    let net = Stage1Net::new(cfg, device, seed)?;
    transfer_into(prev, net)
}

fn transfer_into(prev: &Checkpoint, mut net: Stage1Net) -> Result<Stage1Net> {
    let k = net.cfg.active_groups;
    for component in ["E", "P", "S", "R", "flow"] {
        if !prev.has_component(component) {
            return Err(Error::Transfer(format!(
                "source checkpoint is missing component {component}"
            )));
        }
        import_component(&mut net, prev, component)?;
    }
    for i in 1..k {
        let name = format!("R{i}");
        if !prev.has_component(&name) {
            return Err(Error::Transfer(format!(
                "source checkpoint is missing component {name} (needed for k={k})"
            )));
        }
        import_component(&mut net, prev, &name)?;
    }
    Ok(net)
}

fn import_component(net: &mut Stage1Net, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
    let names: Vec<String> = net
        .store
        .names()
        .into_iter()
        .filter(|n| n.split('.').next() == Some(prefix))
        .collect();
    for name in names {
        let Some((shape, data)) = ckpt.entries.get(&name) else {
            return Err(Error::Transfer(format!(
                "source checkpoint is missing parameter {name}"
            )));
        };
        let var = net.store.get(&name).unwrap();
        if var.dims() != shape.as_slice() {
            return Err(Error::Transfer(format!(
                "parameter {name}: checkpoint shape {shape:?} does not match model {:?}",
                var.dims()
            )));
        }
        let t = Tensor::from_vec(data.clone(), shape.as_slice(), net.store.device())?;
        var.set(&t)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub patch_size: usize,
    pub t_len: usize,
    pub charbonnier_eps: f64,
    pub eta_min: f64,
    pub log_interval: usize,
    pub val_interval: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            batch_size: 2,
            patch_size: 64,
            t_len: 7,
            charbonnier_eps: DEFAULT_CHARBONNIER_EPS,
            eta_min: DEFAULT_ETA_MIN,
            log_interval: 10,
            val_interval: 0, // 0: validate only at phase boundaries
            seed: 0,
        }
    }
}

pub struct MetricsLog {
    path: PathBuf,
    file: std::fs::File,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file =
            std::fs::File::create(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
        writeln!(file, "iteration,phase,lr,loss,val_psnr")
            .map_err(|e| Error::io(path.to_path_buf(), e))?;
        Ok(MetricsLog {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn row(
        &mut self,
        iteration: usize,
        phase: usize,
        lr: f64,
        loss: f64,
        val_psnr: Option<f64>,
    ) -> Result<()> {
        let val = val_psnr.map(|v| format!("{v:.4}")).unwrap_or_default();
        writeln!(self.file, "{iteration},{phase},{lr:.3e},{loss:.6},{val}")
            .map_err(|e| Error::io(self.path.clone(), e))
    }
}

pub struct PhaseOutcome {
    pub checkpoint_path: PathBuf,
    pub initial_val_psnr: f64,
    pub final_val_psnr: f64,
    pub best_validation: (f64, usize),
}

/// Mean PSNR of the enhanced validation sequences against ground truth.
pub fn validate_stage1(net: &Stage1Net, val: &[(VideoSequence, VideoSequence)]) -> Result<f64> {
    let mut per_seq = Vec::with_capacity(val.len());
    for (lq, gt) in val {
        let enhanced = net.forward(lq)?;
        let (_, score) = eval::evaluate(&enhanced, gt, EvalMode::All, false)?;
        per_seq.push(score.mean_psnr);
    }
    Ok(per_seq.iter().sum::<f64>() / per_seq.len() as f64)
}

/// Run the progressive plan over in-memory (lq, gt) sequence pairs.
///
/// Saves one checkpoint per phase in `out_dir` and appends to the metrics
/// log. `init` optionally seeds phase 1 (the toy analog of starting from an
/// open-sourced baseline).
pub fn train_stage1(
    plan: &PhasePlan,
    train: &[(VideoSequence, VideoSequence)],
    val: &[(VideoSequence, VideoSequence)],
    base_cfg: &StageIConfig,
    opts: &TrainOptions,
    init: Option<&Checkpoint>,
    out_dir: &Path,
    log: &mut MetricsLog,
) -> Result<Vec<PhaseOutcome>> {
    plan.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Argument("training and validation sets must be nonempty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.to_path_buf(), e))?;
    let device = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut outcomes: Vec<PhaseOutcome> = Vec::with_capacity(plan.phases.len());
    let mut prev_ckpt: Option<Checkpoint> = init.cloned();
    let mut global_iter = 0usize;

    for (phase_idx, phase) in plan.phases.iter().enumerate() {
        let cfg = base_cfg.with_active_groups(phase.k);
        let net = match &prev_ckpt {
            None => Stage1Net::new(&cfg, &device, opts.seed ^ phase_idx as u64)?,
            Some(ckpt) => transfer_parameters(ckpt, &cfg, &device, opts.seed ^ phase_idx as u64)?,
        };
        net.validate_components()?;
        let initial_val = validate_stage1(&net, val)?;
        let schedule = LRSchedule {
            lr0: phase.lr0,
            eta_min: opts.eta_min,
            period: phase.period,
            warmup_fraction: phase.warmup_fraction,
        };
        let params = ParamsAdamW {
            lr: phase.lr0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut optimizer = AdamW::new(net.store.all_vars(), params)?;
        let mut best: (f64, usize) = (initial_val, 0);

        for it in 0..phase.iterations {
            let lr = lr_at(&schedule, it)?;
            optimizer.set_learning_rate(lr);
            let mut batch_loss = Tensor::zeros((), candle_core::DType::F32, &device)?;
            for _ in 0..opts.batch_size {
                let (lq, gt) = &train[rng.gen_range(0..train.len())];
                let patch = make_patches(lq, gt, opts.patch_size, opts.t_len.min(lq.len()), &mut rng)?;
                let lq_t = sequence_to_tensor(&patch.lq, &device)?;
                let gt_t = sequence_to_tensor(&patch.gt, &device)?;
                let labels = patch.lq.pqf_labels.clone();
                let pred = net.forward_tensor(&lq_t, labels.as_deref())?;
                let loss = loss_of(phase.loss, &pred, &gt_t, opts.charbonnier_eps)?;
                batch_loss = (batch_loss + loss)?;
            }
            let batch_loss = (batch_loss / opts.batch_size as f64)?;
            let loss_value = batch_loss.to_scalar::<f32>()? as f64;
            if !loss_value.is_finite() {
                let last_good = outcomes
                    .last()
                    .map(|o| o.checkpoint_path.display().to_string())
                    .unwrap_or_else(|| "<none>".to_string());
                return Err(Error::Numerics(format!(
                    "non-finite loss at phase {phase_idx} iteration {it}; last good checkpoint: {last_good}"
                )));
            }
            optimizer.backward_step(&batch_loss)?;
            global_iter += 1;

            let mut val_psnr = None;
            if opts.val_interval > 0 && (it + 1) % opts.val_interval == 0 {
                let v = validate_stage1(&net, val)?;
                if v > best.0 {
                    best = (v, it + 1);
                }
                val_psnr = Some(v);
            }
            if (it + 1) % opts.log_interval == 0 || it + 1 == phase.iterations {
                log.row(global_iter, phase_idx, lr, loss_value, val_psnr)?;
            }
        }

        let final_val = validate_stage1(&net, val)?;
        if final_val > best.0 {
            best = (final_val, phase.iterations);
        }
        let ckpt = net.checkpoint()?;
        let path = out_dir.join(format!("stage1_phase{}_k{}.ckpt", phase_idx + 1, phase.k));
        ckpt.save(&path)?;
        log.row(global_iter, phase_idx, 0.0, f64::NAN, Some(final_val))?;
        outcomes.push(PhaseOutcome {
            checkpoint_path: path,
            initial_val_psnr: initial_val,
            final_val_psnr: final_val,
            best_validation: best,
        });
        prev_ckpt = Some(ckpt);
    }
    Ok(outcomes)
}

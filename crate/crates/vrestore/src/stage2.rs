//! Stage-II single-frame refiner: window self-attention blocks in the Swin
//! style, a zero-initialized output head on a global residual, denoising
//! pretraining and transfer-initialized fine-tuning.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use candle_nn::ops::softmax;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::data::{Frame, VideoSequence};
use crate::error::{Error, Result};
use crate::eval::{self, EvalMode};
use crate::layers::{crop_to, reflect_pad_to_multiple, ChannelLayerNorm, Conv2d};
use crate::params::{Init, ParamStore};
use crate::stage1::Stage1Net;
use crate::tensorize::{frame_to_tensor, sequence_to_tensor, tensor_to_frame};
use crate::train::{charbonnier, loss_of, lr_at, LRSchedule, LossKind, ADAM_BETA1, ADAM_BETA2};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageIIConfig {
    pub embed_dim: usize,
    pub window_size: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub mlp_ratio: f64,
}

impl Default for StageIIConfig {
    fn default() -> Self {
        StageIIConfig {
            embed_dim: 32,
            window_size: 8,
            depths: vec![2, 2],
            heads: vec![4, 4],
            mlp_ratio: 2.0,
        }
    }
}

impl StageIIConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depths.len() != self.heads.len() {
            return Err(Error::Config("depths and heads must have equal length".into()));
        }
        if self.window_size < 2 {
            return Err(Error::Config("window_size must be >= 2".into()));
        }
        for &h in &self.heads {
            if h == 0 || self.embed_dim % h != 0 {
                return Err(Error::Config(format!(
                    "head count {h} must divide embed_dim {}",
                    self.embed_dim
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Windowing
// ---------------------------------------------------------------------------

/// Cyclic roll along one spatial dim; shift may be negative.
fn roll(x: &Tensor, dim: usize, shift: isize) -> Result<Tensor> {
    let len = x.dim(dim)?;
    let s = shift.rem_euclid(len as isize) as usize;
    if s == 0 {
        return Ok(x.clone());
    }
    let a = x.narrow(dim, len - s, s)?;
    let b = x.narrow(dim, 0, len - s)?;
    Ok(Tensor::cat(&[a, b], dim)?.contiguous()?)
}

/// Cyclic shift by (-shift, -shift) then non-overlapping w×w tiling.
/// x: (C, H, W) with H, W multiples of w -> (M, C, w, w).
pub fn window_partition(x: &Tensor, w: usize, shift: usize) -> Result<Tensor> {
    let (c, hh, ww) = x.dims3()?;
    if hh % w != 0 || ww % w != 0 {
        return Err(Error::Argument(format!(
            "window partition needs dims divisible by {w}, got {hh}x{ww}"
        )));
    }
    let mut x = x.clone();
    if shift > 0 {
        x = roll(&x, 1, -(shift as isize))?;
        x = roll(&x, 2, -(shift as isize))?;
    }
    let (nh, nw) = (hh / w, ww / w);
    let x = x.reshape((c, nh, w, nw, w))?;
    let x = x.permute((1, 3, 0, 2, 4))?;
    Ok(x.reshape((nh * nw, c, w, w))?.contiguous()?)
}

/// Exact inverse of `window_partition`.
pub fn window_reverse(
    windows: &Tensor,
    w: usize,
    h: usize,
    width: usize,
    shift: usize,
) -> Result<Tensor> {
    let (m, c, _, _) = windows.dims4()?;
    let (nh, nw) = (h / w, width / w);
    if m != nh * nw {
        return Err(Error::Argument(format!(
            "window count {m} does not match {h}x{width} / {w}"
        )));
    }
    let x = windows.reshape((nh, nw, c, w, w))?;
    let x = x.permute((2, 0, 3, 1, 4))?;
    let mut x = x.reshape((c, h, width))?.contiguous()?;
    if shift > 0 {
        x = roll(&x, 1, shift as isize)?;
        x = roll(&x, 2, shift as isize)?;
    }
    Ok(x)
}

/// Swin-style attention mask for shifted windows: (M, w², w²) with 0 for
/// same-region pairs and a large negative value across regions.
pub fn shifted_window_mask(
    h: usize,
    width: usize,
    w: usize,
    shift: usize,
    device: &Device,
) -> Result<Tensor> {
    let region = |coord: usize, len: usize| -> usize {
        // Regions along one axis: [0, len-w), [len-w, len-shift), [len-shift, len)
        if coord < len - w {
            0
        } else if coord < len - shift {
            1
        } else {
            2
        }
    };
    let mut ids = vec![0f32; h * width];
    for y in 0..h {
        for x in 0..width {
            ids[y * width + x] = (region(y, h) * 3 + region(x, width)) as f32;
        }
    }
    let ids = Tensor::from_vec(ids, (1, h, width), device)?;
    let windows = window_partition(&ids, w, shift)?; // (M, 1, w, w)
    let m = windows.dim(0)?;
    let flat = windows.reshape((m, w * w))?;
    let a = flat.unsqueeze(2)?.broadcast_as((m, w * w, w * w))?;
    let b = flat.unsqueeze(1)?.broadcast_as((m, w * w, w * w))?;
    let diff = (a - b)?.abs()?;
    // 0 where same region, -1e9 elsewhere.
    let mask = diff.gt(0f64)?.to_dtype(DType::F32)?;
    Ok((mask * (-1e9))?)
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

pub struct WindowAttention {
    qkv_w: Tensor,
    qkv_b: Tensor,
    proj_w: Tensor,
    proj_b: Tensor,
    bias_table: Tensor,
    rel_index: Tensor,
    pub heads: usize,
    pub window: usize,
}

impl WindowAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        w: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Argument(format!(
                "head count {heads} must divide channel count {dim}"
            )));
        }
        let qkv_w = store.create(
            &format!("{name}.qkv.w"),
            &[dim, 3 * dim],
            Init::HeUniform { fan_in: dim },
            rng,
        )?;
        let qkv_b = store.create(&format!("{name}.qkv.b"), &[3 * dim], Init::Zeros, rng)?;
        let proj_w = store.create(
            &format!("{name}.proj.w"),
            &[dim, dim],
            Init::HeUniform { fan_in: dim },
            rng,
        )?;
        let proj_b = store.create(&format!("{name}.proj.b"), &[dim], Init::Zeros, rng)?;
        // Relative position bias over (2w-1)^2 offsets, zero-initialized.
        let table_len = (2 * w - 1) * (2 * w - 1);
        let bias_table = store.create(
            &format!("{name}.relbias"),
            &[table_len, heads],
            Init::Zeros,
            rng,
        )?;
        let mut index = Vec::with_capacity(w * w * w * w);
        for qy in 0..w {
            for qx in 0..w {
                for ky in 0..w {
                    for kx in 0..w {
                        let dy = qy as isize - ky as isize + w as isize - 1;
                        let dx = qx as isize - kx as isize + w as isize - 1;
                        index.push((dy * (2 * w as isize - 1) + dx) as u32);
                    }
                }
            }
        }
        let rel_index = Tensor::from_vec(index, w * w * w * w, store.device())?;
        Ok(WindowAttention {
            qkv_w,
            qkv_b,
            proj_w,
            proj_b,
            bias_table,
            rel_index,
            heads,
            window: w,
        })
    }

    /// windows: (M, C, w, w); mask: optional (M, w², w²).
    pub fn forward(&self, windows: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (m, c, w, _) = windows.dims4()?;
        let n = w * w;
        let hd = c / self.heads;
        let tokens = windows.reshape((m, c, n))?.transpose(1, 2)?.contiguous()?; // (M, n, C)
        let qkv = tokens
            .broadcast_matmul(&self.qkv_w)?
            .broadcast_add(&self.qkv_b)?; // (M, n, 3C)
        let qkv = qkv
            .reshape((m, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?
            .contiguous()?; // (3, M, heads, n, hd)
        let q = qkv.get(0)?;
        let k = qkv.get(1)?;
        let v = qkv.get(2)?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut attn = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?; // (M, heads, n, n)
        let bias = self
            .bias_table
            .index_select(&self.rel_index, 0)? // (n², heads)
            .reshape((n, n, self.heads))?
            .permute((2, 0, 1))?
            .unsqueeze(0)?; // (1, heads, n, n)
        attn = attn.broadcast_add(&bias)?;
        if let Some(mask) = mask {
            let mask = mask.unsqueeze(1)?; // (M, 1, n, n)
            attn = attn.broadcast_add(&mask)?;
        }
        let probe = attn.max_all()?.to_scalar::<f32>()?;
        if !probe.is_finite() {
            return Err(Error::Numerics("non-finite attention logits".into()));
        }
        let attn = softmax(&attn, 3)?;
        let out = attn.matmul(&v)?; // (M, heads, n, hd)
        let out = out
            .transpose(1, 2)?
            .reshape((m, n, c))?
            .broadcast_matmul(&self.proj_w)?
            .broadcast_add(&self.proj_b)?; // (M, n, C)
        Ok(out
            .transpose(1, 2)?
            .reshape((m, c, w, w))?
            .contiguous()?)
    }
}

// ---------------------------------------------------------------------------
// Refiner
// ---------------------------------------------------------------------------

struct Block {
    ln1: ChannelLayerNorm,
    attn: WindowAttention,
    ln2: ChannelLayerNorm,
    mlp1: Conv2d,
    mlp2: Conv2d,
    shift: usize,
}

pub struct Stage2Net {
    pub cfg: StageIIConfig,
    pub store: ParamStore,
    embed: Conv2d,
    blocks: Vec<Block>,
    head: Conv2d,
}

impl Stage2Net {
    pub fn new(cfg: &StageIIConfig, device: &Device, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(device.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embed_dim;
        let w = cfg.window_size;
        let embed = Conv2d::new(&mut store, "embed", 3, d, 3, 1, false, &mut rng)?;
        let mut blocks = Vec::new();
        let hidden = (d as f64 * cfg.mlp_ratio) as usize;
        for (stage, (&depth, &heads)) in cfg.depths.iter().zip(&cfg.heads).enumerate() {
            for j in 0..depth {
                let name = format!("b{stage}_{j}");
                let shift = if j % 2 == 1 { w / 2 } else { 0 };
                blocks.push(Block {
                    ln1: ChannelLayerNorm::new(&mut store, &format!("{name}.ln1"), d, &mut rng)?,
                    attn: WindowAttention::new(
                        &mut store,
                        &format!("{name}.attn"),
                        d,
                        heads,
                        w,
                        &mut rng,
                    )?,
                    ln2: ChannelLayerNorm::new(&mut store, &format!("{name}.ln2"), d, &mut rng)?,
                    mlp1: Conv2d::new(&mut store, &format!("{name}.mlp1"), d, hidden, 1, 1, false, &mut rng)?,
                    mlp2: Conv2d::new(&mut store, &format!("{name}.mlp2"), hidden, d, 1, 1, false, &mut rng)?,
                    shift,
                });
            }
        }
        // Zero-initialized head: an untrained refiner is exactly the identity.
        let head = Conv2d::new(&mut store, "head", d, 3, 3, 1, true, &mut rng)?;
        Ok(Stage2Net {
            cfg: cfg.clone(),
            store,
            embed,
            blocks,
            head,
        })
    }

    /// Refine one frame tensor (3, H, W); arbitrary sizes are padded to a
    /// multiple of the window size and cropped back.
    pub fn refine_tensor(&self, frame: &Tensor) -> Result<Tensor> {
        let w = self.cfg.window_size;
        let x4 = frame.unsqueeze(0)?;
        let (x4, (orig_h, orig_w)) = reflect_pad_to_multiple(&x4, w)?;
        let (_, _, h, width) = x4.dims4()?;
        let mut feat = self.embed.forward(&x4)?;
        for block in &self.blocks {
            let normed = block.ln1.forward(&feat)?.squeeze(0)?;
            let windows = window_partition(&normed, w, block.shift)?;
            let mask = if block.shift > 0 {
                Some(shifted_window_mask(h, width, w, block.shift, frame.device())?)
            } else {
                None
            };
            let attended = block.attn.forward(&windows, mask.as_ref())?;
            let spatial = window_reverse(&attended, w, h, width, block.shift)?.unsqueeze(0)?;
            feat = (feat + spatial)?;
            let normed = block.ln2.forward(&feat)?;
            let mlp = block.mlp2.forward(&block.mlp1.forward(&normed)?.gelu()?)?;
            feat = (feat + mlp)?;
        }
        let out = (self.head.forward(&feat)? + x4)?;
        Ok(crop_to(&out, orig_h, orig_w)?.squeeze(0)?)
    }

    pub fn refine_frame(&self, frame: &Frame) -> Result<Frame> {
        let t = frame_to_tensor(frame, self.store.device())?;
        let out = self.refine_tensor(&t)?.clamp(0f32, 1f32)?;
        tensor_to_frame(&out)
    }

    /// Refine every frame of a sequence independently.
    pub fn refine_sequence(&self, seq: &VideoSequence) -> Result<VideoSequence> {
        let frames: Vec<Frame> = seq
            .frames
            .iter()
            .map(|f| self.refine_frame(f))
            .collect::<Result<_>>()?;
        let mut out = VideoSequence::new(seq.id.clone(), frames)?;
        out.fps = seq.fps;
        out.pqf_labels = seq.pqf_labels.clone();
        Ok(out)
    }

    /// Zero the output head so the refiner computes the identity.
    pub fn rezero_head(&self) -> Result<()> {
        for suffix in ["head.w", "head.b"] {
            let var = self
                .store
                .get(suffix)
                .ok_or_else(|| Error::Config(format!("missing parameter {suffix}")))?;
            var.set(&Tensor::zeros(
                var.dims(),
                DType::F32,
                self.store.device(),
            )?)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self, kind: ModelKind) -> Result<Checkpoint> {
        Checkpoint::from_store(kind, serde_json::to_value(&self.cfg)?, &self.store)
    }
}

/// Build a refiner initialized from a checkpoint. In strict mode the names
/// must match exactly; in lenient mode unmatched names are freshly
/// initialized and returned.
pub fn init_from_pretrained(
    ckpt: &Checkpoint,
    cfg: &StageIIConfig,
    device: &Device,
    seed: u64,
    strict: bool,
) -> Result<(Stage2Net, Vec<String>)> {
    let mut net = Stage2Net::new(cfg, device, seed)?;
    let unmatched = net.store.import(&ckpt.entries, strict)?;
    Ok((net, unmatched))
}

// ---------------------------------------------------------------------------
// Denoising pretrain and Stage-II fine-tuning
// ---------------------------------------------------------------------------

fn add_noise(t: &Tensor, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0f32, sigma as f32)
        .map_err(|e| Error::Argument(format!("bad noise sigma: {e}")))?;
    let n = t.elem_count();
    let noise: Vec<f32> = (0..n).map(|_| normal.sample(rng)).collect();
    let noise = Tensor::from_vec(noise, t.dims(), t.device())?;
    Ok((t + noise)?.clamp(0f32, 1f32)?)
}

fn crop_frame(frame: &Frame, size: usize, rng: &mut ChaCha8Rng) -> Frame {
    let size = size.min(frame.height).min(frame.width);
    let y0 = rng.gen_range(0..=frame.height - size);
    let x0 = rng.gen_range(0..=frame.width - size);
    let mut out = Frame::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                out.set(y, x, c, frame.get(y0 + y, x0 + x, c));
            }
        }
    }
    out
}

/// Train the refiner for RGB denoising on clean frames, the desk-scale
/// stand-in for a published denoising pretrain. Budget 0 returns the
/// untrained initialization.
pub fn pretrain_denoiser(
    cfg: &StageIIConfig,
    noise_sigma: f64,
    clean_frames: &[Frame],
    budget: usize,
    patch_size: usize,
    lr0: f64,
    seed: u64,
) -> Result<Checkpoint> {
    if clean_frames.is_empty() {
        return Err(Error::Argument("no clean frames for pretraining".into()));
    }
    let device = Device::Cpu;
    let net = Stage2Net::new(cfg, &device, seed)?;
    if budget == 0 {
        return net.checkpoint(ModelKind::Denoiser);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ParamsAdamW {
        lr: lr0,
        beta1: ADAM_BETA1,
        beta2: ADAM_BETA2,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    let mut optimizer = AdamW::new(net.store.all_vars(), params)?;
    let schedule = LRSchedule {
        lr0,
        eta_min: crate::train::DEFAULT_ETA_MIN,
        period: budget,
        warmup_fraction: 0.1,
    };
    for it in 0..budget {
        optimizer.set_learning_rate(lr_at(&schedule, it)?);
        let frame = &clean_frames[rng.gen_range(0..clean_frames.len())];
        let clean = frame_to_tensor(&crop_frame(frame, patch_size, &mut rng), &device)?;
        let noisy = add_noise(&clean, noise_sigma, &mut rng)?;
        let pred = net.refine_tensor(&noisy)?;
        let loss = charbonnier(&pred, &clean, crate::train::DEFAULT_CHARBONNIER_EPS)?;
        let lv = loss.to_scalar::<f32>()?;
        if !lv.is_finite() {
            return Err(Error::Numerics(format!("non-finite pretrain loss at {it}")));
        }
        optimizer.backward_step(&loss)?;
    }
    net.checkpoint(ModelKind::Denoiser)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2TrainOptions {
    /// Sub-phase (a): Stage-II alone, Charbonnier.
    pub solo_iterations: usize,
    pub solo_lr0: f64,
    /// Sub-phase (b): joint fine-tune, MSE (paper lr 1e-6).
    pub joint_iterations: usize,
    pub joint_lr0: f64,
    /// Sample one of every `frame_stride` frames per video.
    pub frame_stride: usize,
    pub patch_size: usize,
    pub charbonnier_eps: f64,
    pub val_interval: usize,
    /// Zero the output head after init so the cascade starts exactly at
    /// Stage-I quality.
    pub rezero_head: bool,
    pub seed: u64,
}

impl Default for Stage2TrainOptions {
    fn default() -> Self {
        Stage2TrainOptions {
            solo_iterations: 200,
            solo_lr0: 2e-4,
            joint_iterations: 0,
            joint_lr0: 1e-6,
            frame_stride: 8,
            patch_size: 48,
            charbonnier_eps: crate::train::DEFAULT_CHARBONNIER_EPS,
            val_interval: 50,
            rezero_head: true,
            seed: 0,
        }
    }
}

pub struct Stage2Outcome {
    pub checkpoint_path: PathBuf,
    pub initial_cascade_psnr: f64,
    pub best_cascade_psnr: f64,
    pub sampled_frames_per_video: Vec<usize>,
}

/// Mean cascade PSNR over validation pairs: Stage-I output refined per frame.
pub fn validate_cascade(
    stage1_outputs: &[(VideoSequence, VideoSequence)],
    net: &Stage2Net,
) -> Result<f64> {
    let mut acc = 0.0;
    for (s1_out, gt) in stage1_outputs {
        let refined = net.refine_sequence(s1_out)?;
        let (_, score) = eval::evaluate(&refined, gt, EvalMode::All, false)?;
        acc += score.mean_psnr;
    }
    Ok(acc / stage1_outputs.len() as f64)
}

/// Fine-tune Stage II on Stage-I outputs (1-in-`frame_stride` sampling), then
/// optionally fine-tune both stages jointly with MSE. Saves the
/// best-validation checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn train_stage2(
    stage1: &Stage1Net,
    train_pairs: &[(VideoSequence, VideoSequence)],
    val_pairs: &[(VideoSequence, VideoSequence)],
    init: &Stage2Net,
    opts: &Stage2TrainOptions,
    out_dir: &Path,
) -> Result<Stage2Outcome> {
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::Argument("training and validation sets must be nonempty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.to_path_buf(), e))?;
    let device = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let net = clone_stage2(init, &device)?;
    if opts.rezero_head {
        net.rezero_head()?;
    }

    // Precompute Stage-I outputs; sub-phase (a) treats them as fixed inputs.
    let mut sampled_frames_per_video = Vec::with_capacity(train_pairs.len());
    let mut train_frames: Vec<(Frame, Frame)> = Vec::new();
    for (lq, gt) in train_pairs {
        let enhanced = stage1.forward(lq)?;
        let sampled = crate::data::sample_every_k(&enhanced, opts.frame_stride)?;
        sampled_frames_per_video.push(sampled.len());
        for (idx, frame) in sampled {
            train_frames.push((frame.clone(), gt.frames[idx].clone()));
        }
    }
    let mut val_outputs = Vec::with_capacity(val_pairs.len());
    for (lq, gt) in val_pairs {
        val_outputs.push((stage1.forward(lq)?, gt.clone()));
    }

    let initial = validate_cascade(&val_outputs, &net)?;
    let mut best = (initial, net.checkpoint(ModelKind::Stage2)?);

    // Sub-phase (a): Stage II alone, Charbonnier.
    if opts.solo_iterations > 0 {
        let params = ParamsAdamW {
            lr: opts.solo_lr0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut optimizer = AdamW::new(net.store.all_vars(), params)?;
        let schedule = LRSchedule {
            lr0: opts.solo_lr0,
            eta_min: crate::train::DEFAULT_ETA_MIN,
            period: opts.solo_iterations,
            warmup_fraction: 0.1,
        };
        for it in 0..opts.solo_iterations {
            optimizer.set_learning_rate(lr_at(&schedule, it)?);
            let (inp, gt) = &train_frames[rng.gen_range(0..train_frames.len())];
            let seed_crop = rng.gen::<u64>();
            let mut crop_rng = ChaCha8Rng::seed_from_u64(seed_crop);
            let inp_c = crop_pair(inp, gt, opts.patch_size, &mut crop_rng)?;
            let pred = net.refine_tensor(&inp_c.0)?;
            let loss = charbonnier(&pred, &inp_c.1, opts.charbonnier_eps)?;
            check_finite(&loss, "stage2 solo", it)?;
            optimizer.backward_step(&loss)?;
            if opts.val_interval > 0 && (it + 1) % opts.val_interval == 0 {
                let v = validate_cascade(&val_outputs, &net)?;
                if v > best.0 {
                    best = (v, net.checkpoint(ModelKind::Stage2)?);
                }
            }
        }
        let v = validate_cascade(&val_outputs, &net)?;
        if v > best.0 {
            best = (v, net.checkpoint(ModelKind::Stage2)?);
        }
    }

    // Sub-phase (b): joint fine-tune of both stages, MSE.
    if opts.joint_iterations > 0 {
        let mut vars = stage1.store.all_vars();
        vars.extend(net.store.all_vars());
        let params = ParamsAdamW {
            lr: opts.joint_lr0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut optimizer = AdamW::new(vars, params)?;
        for it in 0..opts.joint_iterations {
            let (lq, gt) = &train_pairs[rng.gen_range(0..train_pairs.len())];
            let t_len = 3.min(lq.len());
            let patch = crate::data::make_patches(lq, gt, opts.patch_size, t_len, &mut rng)?;
            let lq_t = sequence_to_tensor(&patch.lq, &device)?;
            let gt_t = sequence_to_tensor(&patch.gt, &device)?;
            let s1_out = stage1.forward_tensor(&lq_t, patch.lq.pqf_labels.as_deref())?;
            // Frame-by-frame refinement, loss over the clip.
            let n = s1_out.dim(0)?;
            let mut refined = Vec::with_capacity(n);
            for i in 0..n {
                refined.push(net.refine_tensor(&s1_out.get(i)?)?);
            }
            let pred = Tensor::stack(&refined, 0)?;
            let loss = loss_of(LossKind::Mse, &pred, &gt_t, opts.charbonnier_eps)?;
            check_finite(&loss, "stage2 joint", it)?;
            optimizer.backward_step(&loss)?;
            if opts.val_interval > 0 && (it + 1) % opts.val_interval == 0 {
                let v = validate_cascade(&val_outputs, &net)?;
                if v > best.0 {
                    best = (v, net.checkpoint(ModelKind::Stage2)?);
                }
            }
        }
        let v = validate_cascade(&val_outputs, &net)?;
        if v > best.0 {
            best = (v, net.checkpoint(ModelKind::Stage2)?);
        }
    }

    let path = out_dir.join("stage2.ckpt");
    best.1.save(&path)?;
    Ok(Stage2Outcome {
        checkpoint_path: path,
        initial_cascade_psnr: initial,
        best_cascade_psnr: best.0,
        sampled_frames_per_video,
    })
}

fn check_finite(loss: &Tensor, what: &str, it: usize) -> Result<()> {
    let v = loss.to_scalar::<f32>()?;
    if !v.is_finite() {
        return Err(Error::Numerics(format!("non-finite loss in {what} at iteration {it}")));
    }
    Ok(())
}

fn crop_pair(a: &Frame, b: &Frame, size: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
    let device = Device::Cpu;
    let size = size.min(a.height).min(a.width);
    let y0 = rng.gen_range(0..=a.height - size);
    let x0 = rng.gen_range(0..=a.width - size);
    let cut = |f: &Frame| -> Frame {
        let mut out = Frame::zeros(size, size);
        for y in 0..size {
            for x in 0..size {
                for c in 0..3 {
                    out.set(y, x, c, f.get(y0 + y, x0 + x, c));
                }
            }
        }
        out
    };
    Ok((
        frame_to_tensor(&cut(a), &device)?,
        frame_to_tensor(&cut(b), &device)?,
    ))
}

fn clone_stage2(src: &Stage2Net, device: &Device) -> Result<Stage2Net> {
    let ckpt = src.checkpoint(ModelKind::Stage2)?;
    let (net, _) = init_from_pretrained(&ckpt, &src.cfg, device, 0, true)?;
    Ok(net)
}

/// Load a Stage-II (or denoiser) checkpoint into a matching net.
pub fn load_stage2(ckpt: &Checkpoint, device: &Device) -> Result<Stage2Net> {
    let cfg: StageIIConfig = serde_json::from_value(ckpt.config.clone())?;
    let (net, _) = init_from_pretrained(ckpt, &cfg, device, 0, true)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Tensor;

    fn tiny_cfg() -> StageIIConfig {
        StageIIConfig {
            embed_dim: 8,
            window_size: 4,
            depths: vec![2],
            heads: vec![2],
            mlp_ratio: 2.0,
        }
    }

    #[test]
    fn config_validation() {
        assert!(StageIIConfig::default().validate().is_ok());
        let mut bad = tiny_cfg();
        bad.heads = vec![3];
        assert!(bad.validate().is_err());
        let mut bad = tiny_cfg();
        bad.window_size = 1;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn window_partition_and_reverse_are_inverse() {
        let dev = Device::Cpu;
        let x = Tensor::rand(0f32, 1f32, (3, 8, 12), &dev).unwrap();
        for shift in [0usize, 2] {
            let windows = window_partition(&x, 4, shift).unwrap();
            assert_eq!(windows.dims(), [6, 3, 4, 4]);
            let back = window_reverse(&windows, 4, 8, 12, shift).unwrap();
            let diff = (back - &x)
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap();
            assert_eq!(diff, 0.0, "shift={shift}");
        }
    }

    #[test]
    fn shifted_window_mask_shape_and_values() {
        let dev = Device::Cpu;
        let w = 4usize;
        let unshifted = shifted_window_mask(8, 8, w, 0, &dev).unwrap();
        let m = unshifted.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(m, 0.0);
        let shifted = shifted_window_mask(8, 8, w, 2, &dev).unwrap();
        assert_eq!(shifted.dims(), [4, 16, 16]);
        let vals = shifted.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(vals.iter().all(|&v| v == 0.0 || v <= -1e8));
        assert!(vals.iter().any(|&v| v <= -1e8));
    }

    /// With all tokens equal, every value vector is identical, so the output
    /// is constant across tokens iff each softmax row sums to 1 — with and
    /// without the shifted-window mask.
    #[test]
    fn attention_rows_sum_to_one() {
        let dev = Device::Cpu;
        let mut store = crate::params::ParamStore::new(dev.clone());
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
        let attn = WindowAttention::new(&mut store, "a", 8, 2, 4, &mut rng).unwrap();
        let token = Tensor::rand(0f32, 1f32, (1, 8, 1, 1), &dev).unwrap();
        let x = token.broadcast_as((2, 8, 4, 4)).unwrap().contiguous().unwrap();
        let mask = shifted_window_mask(8, 4, 4, 2, &dev).unwrap();
        for m in [None, Some(&mask)] {
            let y = attn.forward(&x, m.map(|t| t as _)).unwrap();
            let flat = y.reshape((2, 8, 16)).unwrap();
            let spread = (flat.max(2).unwrap() - flat.min(2).unwrap())
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap();
            assert!(spread <= 1e-6, "output varies across tokens by {spread}");
        }
    }

    #[test]
    fn untrained_refiner_is_the_identity() {
        let dev = Device::Cpu;
        let net = Stage2Net::new(&tiny_cfg(), &dev, 3).unwrap();
        let frame = {
            let mut f = crate::data::Frame::zeros(9, 13);
            for (i, v) in f.pixels.iter_mut().enumerate() {
                *v = (i % 97) as f32 / 97.0;
            }
            f
        };
        let out = net.refine_frame(&frame).unwrap();
        let max_diff = frame
            .pixels
            .iter()
            .zip(&out.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0f32, f32::max);
        assert!(max_diff <= 1e-6, "untrained refiner deviates by {max_diff}");
        assert_eq!((out.height, out.width), (9, 13));
    }

    #[test]
    fn rezero_head_restores_identity() {
        let dev = Device::Cpu;
        let net = Stage2Net::new(&tiny_cfg(), &dev, 7).unwrap();
        // Perturb the head, then rezero: refinement must be identity again.
        let head_w = net.store.get("head.w").expect("head weight").clone();
        let bump = Tensor::full(0.05f32, head_w.shape(), &dev).unwrap();
        head_w.set(&bump).unwrap();
        let frame = crate::data::Frame::constant(8, 8, [0.3, 0.5, 0.7]);
        let perturbed = net.refine_frame(&frame).unwrap();
        let moved = frame
            .pixels
            .iter()
            .zip(&perturbed.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0f32, f32::max);
        assert!(moved > 0.0, "perturbation had no effect");
        net.rezero_head().unwrap();
        let restored = net.refine_frame(&frame).unwrap();
        let diff = frame
            .pixels
            .iter()
            .zip(&restored.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0f32, f32::max);
        assert!(diff <= 1e-6, "{diff}");
    }

    #[test]
    fn checkpoint_roundtrip_and_pretrained_init() {
        let dev = Device::Cpu;
        let dir = tempfile::tempdir().unwrap();
        let net = Stage2Net::new(&tiny_cfg(), &dev, 11).unwrap();
        let ckpt = net.checkpoint(ModelKind::Denoiser).unwrap();
        let path = dir.path().join("d.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let (net2, unmatched) =
            init_from_pretrained(&loaded, &tiny_cfg(), &dev, 999, true).unwrap();
        assert!(unmatched.is_empty());
        let frame = crate::data::Frame::constant(8, 8, [0.2, 0.4, 0.6]);
        let a = net.refine_frame(&frame).unwrap();
        let b = net2.refine_frame(&frame).unwrap();
        assert_eq!(a.pixels, b.pixels);
    }

    #[test]
    fn pretrain_denoiser_reduces_denoising_loss() {
        let cfg = tiny_cfg();
        let frames: Vec<crate::data::Frame> = (0..4)
            .map(|i| {
                let mut f = crate::data::Frame::zeros(16, 16);
                for (j, v) in f.pixels.iter_mut().enumerate() {
                    *v = 0.5 + 0.4 * ((i * 131 + j) as f32 * 0.13).sin();
                }
                f
            })
            .collect();
        let ckpt = pretrain_denoiser(&cfg, 0.1, &frames, 40, 16, 1e-3, 3).unwrap();
        assert_eq!(ckpt.kind, ModelKind::Denoiser);
        // The trained head must be nonzero (it started at zero).
        let (shape, data) = &ckpt.entries["head.w"];
        assert!(!shape.is_empty());
        assert!(data.iter().any(|&v| v != 0.0), "head stayed zero after pretraining");
    }

    #[test]
    fn refine_sequence_matches_per_frame_refinement() {
        let dev = Device::Cpu;
        let net = Stage2Net::new(&tiny_cfg(), &dev, 13).unwrap();
        let frames: Vec<crate::data::Frame> = (0..3)
            .map(|i| crate::data::Frame::constant(8, 8, [0.1 * i as f32, 0.2, 0.3]))
            .collect();
        let seq = crate::data::VideoSequence::new("s", frames.clone()).unwrap();
        let out = net.refine_sequence(&seq).unwrap();
        for (f, o) in frames.iter().zip(&out.frames) {
            let per = net.refine_frame(f).unwrap();
            assert_eq!(per.pixels, o.pixels);
        }
    }
}

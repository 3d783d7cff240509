//! Stage-I multi-frame recurrent network: strided feature extraction,
//! bidirectional PQF-guided propagation, a growable residual reconstruction
//! trunk, pixel-shuffle upsampling and a global residual.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::data::VideoSequence;
use crate::error::{Error, Result};
use crate::flow::{bicubic_resize, resize_flow, warp, FlowEstimatorConfig, PyramidFlowNet};
use crate::layers::{crop_to, lrelu, pixel_shuffle, reflect_pad_to_multiple, Conv2d, ResidualBlock};
use crate::params::ParamStore;
use crate::tensorize::{frame_to_tensor, tensor_to_frame, tensor_to_sequence};

pub const MAX_GROUPS: usize = 6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageIConfig {
    /// Feature width; the paper uses 128, desk-scale defaults are smaller.
    pub channels: usize,
    pub extract_blocks: usize,
    pub rec_group_sizes: Vec<usize>,
    /// How many reconstruction groups are active (1..=6).
    pub active_groups: usize,
    /// 1: quality enhancement (strided feature downsampling, shuffle back up);
    /// 4: super-resolution (no strided down, shuffle x4 up).
    pub scale: usize,
    /// Internal feature downsampling factor for the quality-enhancement
    /// track (1, 2 or 4). 4 matches the full-scale design; smaller values
    /// keep features at higher resolution for small desk-scale runs.
    /// Ignored (treated as 1) when scale is 4.
    #[serde(default = "default_feature_stride")]
    pub feature_stride: usize,
    /// Backward then forward, alternating.
    pub propagation_passes: usize,
    /// When false, the PQF source slots are zeroed (ablation control).
    pub use_pqf_sources: bool,
    pub flow: FlowEstimatorConfig,
}

fn default_feature_stride() -> usize {
    4
}

impl Default for StageIConfig {
    fn default() -> Self {
        StageIConfig {
            channels: 32,
            extract_blocks: 5,
            rec_group_sizes: vec![5, 10, 10, 10, 10, 10],
            active_groups: 1,
            scale: 1,
            feature_stride: 4,
            propagation_passes: 2,
            use_pqf_sources: true,
            flow: FlowEstimatorConfig::default(),
        }
    }
}

impl StageIConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        if self.rec_group_sizes.len() != MAX_GROUPS {
            return Err(Error::Config(format!(
                "rec_group_sizes must have {MAX_GROUPS} entries"
            )));
        }
        if self.active_groups < 1 || self.active_groups > MAX_GROUPS {
            return Err(Error::Config(format!(
                "active_groups {} outside 1..={MAX_GROUPS}",
                self.active_groups
            )));
        }
        if self.scale != 1 && self.scale != 4 {
            return Err(Error::Config("scale must be 1 or 4".into()));
        }
        if self.scale == 1 && ![1, 2, 4].contains(&self.feature_stride) {
            return Err(Error::Config("feature_stride must be 1, 2 or 4".into()));
        }
        if self.propagation_passes == 0 {
            return Err(Error::Config("propagation_passes must be >= 1".into()));
        }
        Ok(())
    }

    /// Effective feature downsampling factor.
    pub fn down(&self) -> usize {
        if self.scale == 1 {
            self.feature_stride
        } else {
            1
        }
    }

    /// Total pixel-shuffle upscaling from feature to output resolution.
    pub fn up_total(&self) -> usize {
        self.down() * self.scale
    }

    pub fn active_blocks(&self) -> usize {
        self.rec_group_sizes[..self.active_groups].iter().sum()
    }

    pub fn with_active_groups(&self, k: usize) -> StageIConfig {
        let mut cfg = self.clone();
        cfg.active_groups = k;
        cfg
    }

    /// Component names a parameter set for this config must carry, exactly.
    pub fn expected_components(&self) -> Vec<String> {
        let mut names = vec!["E".to_string(), "P".to_string()];
        for k in 1..=self.active_groups {
            names.push(format!("R{k}"));
        }
        names.push("S".to_string());
        names.push("R".to_string());
        names.push("flow".to_string());
        names
    }
}

/// Propagation source indices for one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PropagationSources {
    pub prev: Option<usize>,
    pub next: Option<usize>,
    pub prev_pqf: Option<usize>,
    pub next_pqf: Option<usize>,
}

impl PropagationSources {
    /// Deduplicated source set (a PQF that is also a direct neighbor is
    /// collapsed into the neighbor slot).
    pub fn as_set(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for idx in [self.prev, self.next, self.prev_pqf, self.next_pqf]
            .into_iter()
            .flatten()
        {
            if !out.contains(&idx) {
                out.push(idx);
            }
        }
        out
    }
}

/// Sources for frame t: {t-1, t+1, previous strictly-earlier PQF, next
/// strictly-later PQF}, clipped to [0, N), with t itself excluded.
pub fn compute_sources(t: usize, pqf_labels: &[bool], n: usize) -> PropagationSources {
    debug_assert_eq!(pqf_labels.len(), n);
    let prev = if t > 0 { Some(t - 1) } else { None };
    let next = if t + 1 < n { Some(t + 1) } else { None };
    let prev_pqf = (0..t).rev().find(|&i| pqf_labels[i]);
    let next_pqf = (t + 1..n).find(|&i| pqf_labels[i]);
    PropagationSources {
        prev,
        next,
        prev_pqf,
        next_pqf,
    }
}

struct PassParams {
    offset: Conv2d,
    fuse: Conv2d,
    blocks: Vec<ResidualBlock>,
}

pub struct Stage1Net {
    pub cfg: StageIConfig,
    pub store: ParamStore,
    extract_in: Conv2d,
    extract_down: Conv2d,
    extract_blocks: Vec<ResidualBlock>,
    passes: Vec<PassParams>,
    groups: Vec<Vec<ResidualBlock>>,
    ups: Vec<Conv2d>,
    final_block: ResidualBlock,
    final_out: Conv2d,
    pub flow_net: PyramidFlowNet,
}

impl Stage1Net {
    pub fn new(cfg: &StageIConfig, device: &Device, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(device.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.channels;

        let (s1, s2) = match cfg.down() {
            4 => (2, 2),
            2 => (2, 1),
            _ => (1, 1),
        };
        let extract_in = Conv2d::new(&mut store, "E.c1", 3, c, 3, s1, false, &mut rng)?;
        let extract_down = Conv2d::new(&mut store, "E.c2", c, c, 3, s2, false, &mut rng)?;
        let mut extract_blocks = Vec::with_capacity(cfg.extract_blocks);
        for i in 0..cfg.extract_blocks {
            extract_blocks.push(ResidualBlock::new(
                &mut store,
                &format!("E.rb{i}"),
                c,
                &mut rng,
            )?);
        }

        let mut passes = Vec::with_capacity(cfg.propagation_passes);
        for p in 0..cfg.propagation_passes {
            let offset = Conv2d::new(
                &mut store,
                &format!("P.p{p}.off"),
                2 * c + 2,
                2,
                3,
                1,
                true,
                &mut rng,
            )?;
            let fuse = Conv2d::new(
                &mut store,
                &format!("P.p{p}.fuse"),
                5 * c,
                c,
                1,
                1,
                false,
                &mut rng,
            )?;
            let mut blocks = Vec::new();
            for i in 0..2 {
                blocks.push(ResidualBlock::new(
                    &mut store,
                    &format!("P.p{p}.rb{i}"),
                    c,
                    &mut rng,
                )?);
            }
            passes.push(PassParams {
                offset,
                fuse,
                blocks,
            });
        }

        let mut groups = Vec::with_capacity(cfg.active_groups);
        for k in 1..=cfg.active_groups {
            let mut blocks = Vec::with_capacity(cfg.rec_group_sizes[k - 1]);
            for i in 0..cfg.rec_group_sizes[k - 1] {
                blocks.push(ResidualBlock::new(
                    &mut store,
                    &format!("R{k}.rb{i}"),
                    c,
                    &mut rng,
                )?);
            }
            groups.push(blocks);
        }

        // One conv per x2 shuffle stage; when features already live at
        // output resolution a single stride-1 conv keeps the decode path.
        let stages = cfg.up_total().trailing_zeros() as usize;
        let mut ups = Vec::new();
        if stages == 0 {
            ups.push(Conv2d::new(&mut store, "S.up1", c, c, 3, 1, false, &mut rng)?);
        } else {
            for i in 0..stages {
                ups.push(Conv2d::new(
                    &mut store,
                    &format!("S.up{}", i + 1),
                    c,
                    4 * c,
                    3,
                    1,
                    false,
                    &mut rng,
                )?);
            }
        }
        let final_block = ResidualBlock::new(&mut store, "R.rb", c, &mut rng)?;
        let final_out = Conv2d::new(&mut store, "R.out", c, 3, 3, 1, false, &mut rng)?;
        let flow_net = PyramidFlowNet::new(&mut store, "flow", &cfg.flow, &mut rng)?;

        Ok(Stage1Net {
            cfg: cfg.clone(),
            store,
            extract_in,
            extract_down,
            extract_blocks,
            passes,
            groups,
            ups,
            final_block,
            final_out,
            flow_net,
        })
    }

    /// Strided extraction: (N, 3, H, W) -> (N, c, h, w), h = H / down().
    pub fn extract_features(&self, frames: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = frames.dims4()?;
        let d = self.cfg.down();
        if d > 1 && (h % d != 0 || w % d != 0) {
            return Err(Error::Pad(format!(
                "input {h}x{w} not divisible by {d}; reflect-pad before extraction"
            )));
        }
        let mut x = lrelu(&self.extract_in.forward(frames)?)?;
        x = lrelu(&self.extract_down.forward(&x)?)?;
        for block in &self.extract_blocks {
            x = block.forward(&x)?;
        }
        Ok(x)
    }

    fn flow_between(
        &self,
        cache: &mut HashMap<(usize, usize), Tensor>,
        ds_frames: &[Tensor],
        from: usize,
        to: usize,
        feat_h: usize,
        feat_w: usize,
    ) -> Result<Tensor> {
        if let Some(f) = cache.get(&(from, to)) {
            return Ok(f.clone());
        }
        let raw = self.flow_net.estimate(&ds_frames[from], &ds_frames[to])?;
        let flow = resize_flow(&raw, feat_h, feat_w)?;
        cache.insert((from, to), flow.clone());
        Ok(flow)
    }

    /// Bidirectional PQF-guided propagation over per-frame features.
    ///
    /// `features`: (N, c, h, w); `ds_frames`: x4-downsampled input frames for
    /// flow estimation, one (3, h', w') tensor per frame.
    pub fn propagate(
        &self,
        features: &Tensor,
        ds_frames: &[Tensor],
        pqf_labels: &[bool],
    ) -> Result<Tensor> {
        let (n, c, h, w) = features.dims4()?;
        if pqf_labels.len() != n {
            return Err(Error::Argument(format!(
                "got {} PQF labels for {n} frames",
                pqf_labels.len()
            )));
        }
        let mut hidden: Vec<Tensor> = (0..n)
            .map(|t| features.get(t))
            .collect::<candle_core::Result<_>>()?;
        let own: Vec<Tensor> = hidden.clone();
        let zeros = Tensor::zeros((c, h, w), DType::F32, features.device())?;
        let mut flow_cache: HashMap<(usize, usize), Tensor> = HashMap::new();

        for (p, pass) in self.passes.iter().enumerate() {
            let order: Vec<usize> = if p % 2 == 0 {
                (0..n).rev().collect()
            } else {
                (0..n).collect()
            };
            for &t in &order {
                let sources = compute_sources(t, pqf_labels, n);
                let neighbor_slots = [sources.prev, sources.next];
                let mut pqf_slots = [sources.prev_pqf, sources.next_pqf];
                if !self.cfg.use_pqf_sources {
                    pqf_slots = [None, None];
                }
                // A PQF that coincides with a direct neighbor is collapsed:
                // its slot is zeroed rather than fed twice.
                for slot in pqf_slots.iter_mut() {
                    if slot.is_some() && neighbor_slots.contains(slot) {
                        *slot = None;
                    }
                }
                let mut parts: Vec<Tensor> = vec![own[t].clone()];
                for slot in neighbor_slots.into_iter().chain(pqf_slots) {
                    match slot {
                        None => parts.push(zeros.clone()),
                        Some(s) => {
                            let flow =
                                self.flow_between(&mut flow_cache, ds_frames, t, s, h, w)?;
                            let warped = warp(&hidden[s], &flow)?;
                            // Learned per-pixel offset refinement of the
                            // flow-guided alignment.
                            let flow_chw = flow.permute((2, 0, 1))?.contiguous()?;
                            let off_in =
                                Tensor::cat(&[&own[t], &warped, &flow_chw], 0)?.unsqueeze(0)?;
                            let offset = pass
                                .offset
                                .forward(&off_in)?
                                .squeeze(0)?
                                .permute((1, 2, 0))?
                                .contiguous()?;
                            let refined = warp(&hidden[s], &(flow + offset)?.contiguous()?)?;
                            parts.push(refined);
                        }
                    }
                }
                let stacked = Tensor::cat(&parts, 0)?.unsqueeze(0)?;
                let mut fused = lrelu(&pass.fuse.forward(&stacked)?)?;
                for block in &pass.blocks {
                    fused = block.forward(&fused)?;
                }
                let fused = fused.squeeze(0)?;
                let probe = fused.max_all()?.to_scalar::<f32>()?;
                if !probe.is_finite() {
                    return Err(Error::Numerics(format!(
                        "non-finite activation at frame {t}, pass {p}"
                    )));
                }
                hidden[t] = fused;
            }
        }
        Ok(Tensor::stack(&hidden, 0)?)
    }

    /// Decode propagated features through the active reconstruction groups,
    /// restore resolution by pixel shuffling and add the global residual.
    pub fn reconstruct(&self, fused: &Tensor, global_residual: &Tensor) -> Result<Tensor> {
        let mut x = fused.clone();
        for group in &self.groups {
            for block in group {
                x = block.forward(&x)?;
            }
        }
        if self.cfg.up_total() == 1 {
            x = lrelu(&self.ups[0].forward(&x)?)?;
        } else {
            for up in &self.ups {
                x = lrelu(&pixel_shuffle(&up.forward(&x)?, 2)?)?;
            }
        }
        x = self.final_block.forward(&x)?;
        let out = self.final_out.forward(&x)?;
        Ok((out + global_residual)?)
    }

    /// Full forward on a clip tensor (N, 3, H, W). Pads internally to a
    /// multiple of the feature stride and crops back. Labels default to
    /// "no PQFs".
    pub fn forward_tensor(&self, frames: &Tensor, pqf_labels: Option<&[bool]>) -> Result<Tensor> {
        let n = frames.dim(0)?;
        let labels: Vec<bool> = match pqf_labels {
            Some(l) => l.to_vec(),
            None => vec![false; n],
        };
        let d = self.cfg.down();
        let (padded, (orig_h, orig_w)) = reflect_pad_to_multiple(frames, d.max(2))?;
        let (_, _, h, w) = padded.dims4()?;

        let mut ds_frames = Vec::with_capacity(n);
        for t in 0..n {
            let frame = tensor_to_frame(&padded.get(t)?)?;
            let ds = bicubic_resize(&frame, h / d, w / d)?;
            ds_frames.push(frame_to_tensor(&ds, frames.device())?);
        }

        let features = self.extract_features(&padded)?;
        let fused = self.propagate(&features, &ds_frames, &labels)?;
        let residual = if self.cfg.scale == 1 {
            padded.clone()
        } else {
            let mut ups = Vec::with_capacity(n);
            for t in 0..n {
                let frame = tensor_to_frame(&padded.get(t)?)?;
                let up = bicubic_resize(&frame, h * 4, w * 4)?;
                ups.push(frame_to_tensor(&up, frames.device())?);
            }
            Tensor::stack(&ups, 0)?
        };
        let out = self.reconstruct(&fused, &residual)?;
        crop_to(&out, orig_h * self.cfg.scale, orig_w * self.cfg.scale)
    }

    /// Enhance a sequence; output frames are clamped to [0,1].
    pub fn forward(&self, seq: &VideoSequence) -> Result<VideoSequence> {
        let frames = crate::tensorize::sequence_to_tensor(seq, self.store.device())?;
        let labels = seq.pqf_labels.as_deref();
        let out = self.forward_tensor(&frames, labels)?;
        let out = out.clamp(0f32, 1f32)?;
        let mut enhanced = tensor_to_sequence(&out, &seq.id)?;
        enhanced.fps = seq.fps;
        enhanced.pqf_labels = seq.pqf_labels.clone();
        Ok(enhanced)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_store(
            ModelKind::Stage1,
            serde_json::to_value(&self.cfg)?,
            &self.store,
        )
    }

    /// Verify that the parameter set carries exactly the expected components.
    pub fn validate_components(&self) -> Result<()> {
        let mut expected = self.cfg.expected_components();
        let mut actual = self.store.component_names();
        expected.sort();
        actual.sort();
        actual.dedup();
        if expected != actual {
            return Err(Error::Config(format!(
                "parameter components {actual:?} do not match expected {expected:?}"
            )));
        }
        Ok(())
    }
}

/// Exact scalar parameter count for a config.
pub fn count_parameters(cfg: &StageIConfig) -> Result<usize> {
    let net = Stage1Net::new(cfg, &Device::Cpu, 0)?;
    Ok(net.store.count_scalars())
}

/// Load a Stage-I checkpoint into a freshly built net of the same config.
pub fn load_stage1(ckpt: &Checkpoint, device: &Device) -> Result<Stage1Net> {
    if ckpt.kind != ModelKind::Stage1 {
        return Err(Error::Checkpoint(format!(
            "expected a stage1 checkpoint, found {:?}",
            ckpt.kind
        )));
    }
    let cfg: StageIConfig = serde_json::from_value(ckpt.config.clone())?;
    let mut net = Stage1Net::new(&cfg, device, 0)?;
    net.store.import(&ckpt.entries, true)?;
    Ok(net)
}

//! Sequence ingest, surrogate degradation and training-data preparation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One RGB frame, values in [0,1], interleaved HWC storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    /// len == height * width * 3, row-major, RGB interleaved.
    pub pixels: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Argument(format!(
                "pixel buffer length {} does not match {}x{}x3",
                pixels.len(),
                height,
                width
            )));
        }
        Ok(Frame {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Frame {
            height,
            width,
            pixels: vec![0.0; height * width * 3],
        }
    }

    pub fn constant(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            pixels.extend_from_slice(&rgb);
        }
        Frame {
            height,
            width,
            pixels,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.pixels[(y * self.width + x) * 3 + c] = v;
    }

    /// 8-bit representation used on disk and for exact duplicate detection.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let pixels = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        Frame::new(height, width, pixels)
    }

    /// Snap every value to the nearest 8-bit level. Degraded frames pass
    /// through this so in-memory data matches what a disk round trip yields.
    pub fn quantize_u8(&mut self) {
        for v in &mut self.pixels {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.pixels {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn same_shape(&self, other: &Frame) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// An ordered run of same-shape frames with optional PQF labels.
#[derive(Debug, Clone)]
pub struct VideoSequence {
    pub id: String,
    pub frames: Vec<Frame>,
    pub fps: Option<(u32, u32)>,
    pub pqf_labels: Option<Vec<bool>>,
}

impl VideoSequence {
    pub fn new(id: impl Into<String>, frames: Vec<Frame>) -> Result<Self> {
        let id = id.into();
        if frames.is_empty() {
            return Err(Error::Ingest(format!("sequence {id} has no frames")));
        }
        let (h, w) = (frames[0].height, frames[0].width);
        for (i, f) in frames.iter().enumerate() {
            if f.height != h || f.width != w {
                return Err(Error::Ingest(format!(
                    "sequence {id}: frame {i} is {}x{}, expected {h}x{w}",
                    f.height, f.width
                )));
            }
        }
        Ok(VideoSequence {
            id,
            frames,
            fps: None,
            pqf_labels: None,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn with_labels(mut self, labels: Vec<bool>) -> Result<Self> {
        if labels.len() != self.frames.len() {
            return Err(Error::Label(format!(
                "label count {} != frame count {}",
                labels.len(),
                self.frames.len()
            )));
        }
        if !labels.iter().any(|&b| b) {
            return Err(Error::Label("pqf_labels must mark at least one frame".into()));
        }
        self.pqf_labels = Some(labels);
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegradationMode {
    SurrogateCodec,
    ExternalCodec,
}

/// Compression-like degradation with GOP-periodic quality fluctuation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DegradationProfile {
    pub mode: DegradationMode,
    /// GOP period in frames; indices ≡ 0 (mod P) are PQFs.
    pub gop_period: usize,
    /// Quantization strength for non-PQF frames.
    pub base_strength: f32,
    /// Quantization strength for PQF frames; must be < base_strength.
    pub pqf_strength: f32,
    /// 1 (quality enhancement) or 4 (super-resolution track).
    pub downsample_factor: usize,
    pub seed: u64,
    /// Shell command template for external-codec mode (`{in}`/`{out}` holes).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_command: Option<String>,
}

impl DegradationProfile {
    pub fn validate(&self) -> Result<()> {
        if self.gop_period < 2 {
            return Err(Error::Config("gop_period must be >= 2".into()));
        }
        if self.base_strength < 0.0 || !self.base_strength.is_finite() {
            return Err(Error::Config("base_strength must be finite and >= 0".into()));
        }
        if self.pqf_strength < 0.0 || self.pqf_strength >= self.base_strength {
            return Err(Error::Config(
                "pqf_strength must satisfy 0 <= pqf_strength < base_strength".into(),
            ));
        }
        if self.downsample_factor != 1 && self.downsample_factor != 4 {
            return Err(Error::Config("downsample_factor must be 1 or 4".into()));
        }
        Ok(())
    }
}

impl Default for DegradationProfile {
    fn default() -> Self {
        DegradationProfile {
            mode: DegradationMode::SurrogateCodec,
            gop_period: 4,
            base_strength: 30.0,
            pqf_strength: 10.0,
            downsample_factor: 1,
            seed: 0,
            external_command: None,
        }
    }
}

/// Spatially and temporally aligned LQ/GT crop pair.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub lq: VideoSequence,
    pub gt: VideoSequence,
    pub crop_origin: (usize, usize),
    pub temporal_window: (usize, usize),
}

// ---------------------------------------------------------------------------
// Ingest
// ---------------------------------------------------------------------------

/// Frame files on disk: `frame_%05d.<ext>`, 1-based.
pub fn frame_file_name(index0: usize, ext: &str) -> String {
    format!("frame_{:05}.{ext}", index0 + 1)
}

/// Load a directory of numbered frame files into a sequence.
///
/// `expected_pattern` is the file stem prefix (normally "frame_"); indices
/// must be contiguous starting at 1.
pub fn load_sequence(dir_path: &Path, expected_pattern: &str) -> Result<VideoSequence> {
    let id = dir_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".to_string());
    let mut indexed: BTreeMap<u64, PathBuf> = BTreeMap::new();
    let entries =
        std::fs::read_dir(dir_path).map_err(|e| Error::io(dir_path.to_path_buf(), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir_path.to_path_buf(), e))?;
        let path = entry.path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let Some(digits) = stem.strip_prefix(expected_pattern) else {
            continue;
        };
        let Ok(index) = digits.parse::<u64>() else {
            continue;
        };
        if indexed.insert(index, path.clone()).is_some() {
            return Err(Error::Ingest(format!(
                "sequence {id}: duplicate frame index {index}"
            )));
        }
    }
    if indexed.is_empty() {
        return Err(Error::Ingest(format!(
            "no frames matching {expected_pattern}* in {}",
            dir_path.display()
        )));
    }
    let indices: Vec<u64> = indexed.keys().copied().collect();
    for (pos, &idx) in indices.iter().enumerate() {
        let expected = indices[0] + pos as u64;
        if idx != expected {
            return Err(Error::Ingest(format!(
                "sequence {id}: frame indices have a gap (expected {expected}, found {idx})"
            )));
        }
    }
    let mut frames = Vec::with_capacity(indexed.len());
    for path in indexed.values() {
        frames.push(load_frame(path)?);
    }
    VideoSequence::new(id, frames)
}

pub fn load_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Frame::from_u8(h, w, img.as_raw())
}

pub fn save_frame(frame: &Frame, path: &Path) -> Result<()> {
    let buf = frame.to_u8();
    let img = image::RgbImage::from_raw(frame.width as u32, frame.height as u32, buf)
        .expect("buffer sized by construction");
    img.save(path)?;
    Ok(())
}

pub fn save_sequence(seq: &VideoSequence, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.to_path_buf(), e))?;
    for (i, frame) in seq.frames.iter().enumerate() {
        save_frame(frame, &dir.join(frame_file_name(i, "png")))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Surrogate degradation: 8x8 block DCT + dithered uniform quantization
// ---------------------------------------------------------------------------

const BLOCK: usize = 8;

fn dct_basis() -> [[f32; BLOCK]; BLOCK] {
    let mut basis = [[0.0f32; BLOCK]; BLOCK];
    let n = BLOCK as f32;
    for (k, row) in basis.iter_mut().enumerate() {
        let scale = if k == 0 {
            (1.0 / n).sqrt()
        } else {
            (2.0 / n).sqrt()
        };
        for (i, v) in row.iter_mut().enumerate() {
            *v = scale
                * (std::f32::consts::PI * (i as f32 + 0.5) * k as f32 / n).cos();
        }
    }
    basis
}

/// Quantize one frame in the 8x8 DCT domain with subtractive dither.
///
/// The dither makes the quantization error statistically independent of the
/// signal, so PSNR is strictly decreasing in the strength even on constant
/// frames. strength == 0 is an exact no-op.
fn quantize_frame(frame: &Frame, strength: f32, rng: &mut ChaCha8Rng) -> Frame {
    if strength == 0.0 {
        return frame.clone();
    }
    let step = strength / 255.0;
    let basis = dct_basis();
    let (h, w) = (frame.height, frame.width);
    let mut out = frame.clone();
    let mut block = [[0.0f32; BLOCK]; BLOCK];
    let mut coef = [[0.0f32; BLOCK]; BLOCK];
    for c in 0..3 {
        for by in (0..h).step_by(BLOCK) {
            for bx in (0..w).step_by(BLOCK) {
                let bh = BLOCK.min(h - by);
                let bw = BLOCK.min(w - bx);
                // Edge blocks are padded by replication.
                for y in 0..BLOCK {
                    for x in 0..BLOCK {
                        block[y][x] = frame.get(by + y.min(bh - 1), bx + x.min(bw - 1), c);
                    }
                }
                // Forward 2D DCT: coef = B * block * B^T.
                for (u, crow) in coef.iter_mut().enumerate() {
                    for (v, cv) in crow.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for y in 0..BLOCK {
                            for x in 0..BLOCK {
                                acc += basis[u][y] * basis[v][x] * block[y][x];
                            }
                        }
                        *cv = acc;
                    }
                }
                for crow in coef.iter_mut() {
                    for cv in crow.iter_mut() {
                        let dither: f32 = rng.gen_range(-0.5..0.5) * step;
                        *cv = step * ((*cv + dither) / step).round() - dither;
                    }
                }
                // Inverse: block = B^T * coef * B.
                for y in 0..bh {
                    for x in 0..bw {
                        let mut acc = 0.0;
                        for u in 0..BLOCK {
                            for v in 0..BLOCK {
                                acc += basis[u][y] * basis[v][x] * coef[u][v];
                            }
                        }
                        out.set(by + y, bx + x, c, acc.clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    out.quantize_u8();
    out
}

/// Synthesize a degraded (LQ) sequence from ground truth.
///
/// Frames at indices ≡ 0 (mod gop_period) are quantized with `pqf_strength`,
/// all others with `base_strength`, producing the periodic quality
/// fluctuation that PQF-guided propagation exploits.
pub fn degrade(gt: &VideoSequence, profile: &DegradationProfile) -> Result<VideoSequence> {
    profile.validate()?;
    if gt.is_empty() {
        return Err(Error::Degrade("ground-truth sequence is empty".into()));
    }
    if gt.height() < BLOCK || gt.width() < BLOCK {
        return Err(Error::Degrade(format!(
            "frames {}x{} smaller than the {BLOCK}x{BLOCK} block size",
            gt.height(),
            gt.width()
        )));
    }
    if profile.mode == DegradationMode::ExternalCodec {
        return degrade_external(gt, profile);
    }
    let mut frames = Vec::with_capacity(gt.len());
    for (t, frame) in gt.frames.iter().enumerate() {
        let src = if profile.downsample_factor == 4 {
            crate::flow::bicubic_resize(frame, frame.height / 4, frame.width / 4)?
        } else {
            frame.clone()
        };
        let strength = if t % profile.gop_period == 0 {
            profile.pqf_strength
        } else {
            profile.base_strength
        };
        let mut rng = ChaCha8Rng::seed_from_u64(profile.seed ^ (t as u64).wrapping_mul(0x9E3779B97F4A7C15));
        frames.push(quantize_frame(&src, strength, &mut rng));
    }
    let mut lq = VideoSequence::new(gt.id.clone(), frames)?;
    lq.fps = gt.fps;
    let labels: Vec<bool> = (0..lq.len()).map(|t| t % profile.gop_period == 0).collect();
    lq = lq.with_labels(labels)?;
    Ok(lq)
}

fn degrade_external(gt: &VideoSequence, profile: &DegradationProfile) -> Result<VideoSequence> {
    let Some(template) = &profile.external_command else {
        return Err(Error::Config(
            "external-codec mode requires external_command".into(),
        ));
    };
    let tmp = std::env::temp_dir().join(format!("vrestore-codec-{}-{}", gt.id, profile.seed));
    let in_dir = tmp.join("in");
    let out_dir = tmp.join("out");
    save_sequence(gt, &in_dir)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.clone(), e))?;
    let cmd = template
        .replace("{in}", &in_dir.to_string_lossy())
        .replace("{out}", &out_dir.to_string_lossy());
    let status = std::process::Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .status()
        .map_err(|e| Error::io(tmp.clone(), e))?;
    if !status.success() {
        return Err(Error::Degrade(format!(
            "external codec command failed with {status}: {cmd}"
        )));
    }
    let mut lq = load_sequence(&out_dir, "frame_")?;
    lq.id = gt.id.clone();
    let _ = std::fs::remove_dir_all(&tmp);
    Ok(lq)
}

// ---------------------------------------------------------------------------
// Duplicate removal, PQF labeling, sampling
// ---------------------------------------------------------------------------

/// Drop LQ frames that are pixel-identical (8-bit) to their immediate
/// predecessor, together with the GT frames at the same indices.
pub fn remove_duplicates(
    lq: &VideoSequence,
    gt: &VideoSequence,
) -> Result<(VideoSequence, VideoSequence)> {
    if lq.len() != gt.len() {
        return Err(Error::Pairing(format!(
            "lq has {} frames but gt has {}",
            lq.len(),
            gt.len()
        )));
    }
    let mut keep = vec![true; lq.len()];
    let mut prev = lq.frames[0].to_u8();
    for t in 1..lq.len() {
        let cur = lq.frames[t].to_u8();
        if cur == prev {
            keep[t] = false;
        }
        prev = cur;
    }
    let filter = |seq: &VideoSequence| -> Vec<Frame> {
        seq.frames
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(f, _)| f.clone())
            .collect()
    };
    let mut lq_out = VideoSequence::new(lq.id.clone(), filter(lq))?;
    let gt_out = VideoSequence::new(gt.id.clone(), filter(gt))?;
    lq_out.fps = lq.fps;
    if let Some(labels) = &lq.pqf_labels {
        let kept: Vec<bool> = labels
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(&l, _)| l)
            .collect();
        if kept.iter().any(|&b| b) {
            lq_out.pqf_labels = Some(kept);
        }
    }
    Ok((lq_out, gt_out))
}

/// Label peak-quality frames.
///
/// With a profile, PQFs are the GOP anchors (index ≡ 0 mod P). With ground
/// truth, frame t is a PQF iff its PSNR against GT is a strict local maximum
/// of the series; an endpoint counts iff it exceeds its single neighbor. If
/// ties leave no strict maximum, the first global maximum is labeled so at
/// least one PQF always exists.
pub fn label_pqfs(
    lq: &VideoSequence,
    gt: Option<&VideoSequence>,
    profile: Option<&DegradationProfile>,
) -> Result<Vec<bool>> {
    if let Some(profile) = profile {
        profile.validate()?;
        return Ok((0..lq.len()).map(|t| t % profile.gop_period == 0).collect());
    }
    let Some(gt) = gt else {
        return Err(Error::Label(
            "label_pqfs needs either ground truth or a degradation profile".into(),
        ));
    };
    if gt.len() != lq.len() {
        return Err(Error::Label(format!(
            "lq has {} frames but gt has {}",
            lq.len(),
            gt.len()
        )));
    }
    let series: Vec<f64> = lq
        .frames
        .iter()
        .zip(&gt.frames)
        .map(|(a, b)| crate::eval::psnr(a, b, 1.0, 100.0))
        .collect::<Result<_>>()?;
    Ok(local_maxima(&series))
}

/// Strict-local-maxima labeling over a quality series.
pub fn local_maxima(series: &[f64]) -> Vec<bool> {
    let n = series.len();
    let mut labels = vec![false; n];
    if n == 1 {
        labels[0] = true;
        return labels;
    }
    for t in 0..n {
        let above_left = t == 0 || series[t] > series[t - 1];
        let above_right = t == n - 1 || series[t] > series[t + 1];
        labels[t] = above_left && above_right;
    }
    if !labels.iter().any(|&b| b) {
        let mut argmax = 0;
        for (i, &v) in series.iter().enumerate() {
            if v > series[argmax] {
                argmax = i;
            }
        }
        labels[argmax] = true;
    }
    labels
}

/// Frames at indices 0, k, 2k, … .
pub fn sample_every_k(seq: &VideoSequence, k: usize) -> Result<Vec<(usize, &Frame)>> {
    if k < 1 {
        return Err(Error::Argument("sampling stride k must be >= 1".into()));
    }
    Ok(seq
        .frames
        .iter()
        .enumerate()
        .step_by(k)
        .collect())
}

/// Cut an aligned random LQ/GT crop for training.
///
/// The GT crop is `scale` times larger spatially, where scale is inferred
/// from the sequence shapes.
pub fn make_patches(
    lq: &VideoSequence,
    gt: &VideoSequence,
    patch_size: usize,
    t_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PairedSample> {
    if lq.len() != gt.len() {
        return Err(Error::Pairing(format!(
            "lq has {} frames but gt has {}",
            lq.len(),
            gt.len()
        )));
    }
    if patch_size > lq.height() || patch_size > lq.width() {
        return Err(Error::Argument(format!(
            "patch size {patch_size} exceeds LQ frame {}x{}",
            lq.height(),
            lq.width()
        )));
    }
    if t_len > lq.len() || t_len == 0 {
        return Err(Error::Argument(format!(
            "temporal window {t_len} invalid for sequence of {} frames",
            lq.len()
        )));
    }
    if gt.height() % lq.height() != 0 || gt.width() % lq.width() != 0 {
        return Err(Error::Pairing("gt size is not a multiple of lq size".into()));
    }
    let scale = gt.height() / lq.height();
    if scale == 0 || gt.width() / lq.width() != scale {
        return Err(Error::Pairing("inconsistent lq/gt scale factor".into()));
    }
    let t0 = rng.gen_range(0..=lq.len() - t_len);
    let y0 = rng.gen_range(0..=lq.height() - patch_size);
    let x0 = rng.gen_range(0..=lq.width() - patch_size);
    let crop = |seq: &VideoSequence, y0: usize, x0: usize, size: usize| -> Vec<Frame> {
        seq.frames[t0..t0 + t_len]
            .iter()
            .map(|f| {
                let mut out = Frame::zeros(size, size);
                for y in 0..size {
                    for x in 0..size {
                        for c in 0..3 {
                            out.set(y, x, c, f.get(y0 + y, x0 + x, c));
                        }
                    }
                }
                out
            })
            .collect()
    };
    let mut lq_crop = VideoSequence::new(lq.id.clone(), crop(lq, y0, x0, patch_size))?;
    let gt_crop = VideoSequence::new(
        gt.id.clone(),
        crop(gt, y0 * scale, x0 * scale, patch_size * scale),
    )?;
    if let Some(labels) = &lq.pqf_labels {
        let window: Vec<bool> = labels[t0..t0 + t_len].to_vec();
        if window.iter().any(|&b| b) {
            lq_crop.pqf_labels = Some(window);
        }
    }
    Ok(PairedSample {
        lq: lq_crop,
        gt: gt_crop,
        crop_origin: (y0, x0),
        temporal_window: (t0, t_len),
    })
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub lq_dir: PathBuf,
    pub gt_dir: PathBuf,
    pub pqf_labels: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub profile: DegradationProfile,
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path.to_path_buf(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn load_entry(entry: &ManifestEntry) -> Result<(VideoSequence, VideoSequence)> {
        let mut lq = load_sequence(&entry.lq_dir, "frame_")?;
        let mut gt = load_sequence(&entry.gt_dir, "frame_")?;
        lq.id = entry.id.clone();
        gt.id = entry.id.clone();
        lq = lq.with_labels(entry.pqf_labels.clone())?;
        Ok((lq, gt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_frame(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Frame {
        let mut f = Frame::zeros(h, w);
        for v in f.pixels.iter_mut() {
            *v = rng.gen::<f32>();
        }
        f.quantize_u8();
        f
    }

    fn noise_sequence(id: &str, h: usize, w: usize, n: usize, seed: u64) -> VideoSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..n).map(|_| noise_frame(h, w, &mut rng)).collect();
        VideoSequence::new(id, frames).unwrap()
    }

    fn seq_psnr(a: &VideoSequence, b: &VideoSequence) -> f64 {
        let scores: Vec<f64> = a
            .frames
            .iter()
            .zip(&b.frames)
            .map(|(x, y)| crate::eval::psnr(x, y, 1.0, 100.0).unwrap())
            .collect();
        scores.iter().sum::<f64>() / scores.len() as f64
    }

    #[test]
    fn frame_file_names_are_one_based_and_padded() {
        assert_eq!(frame_file_name(0, "png"), "frame_00001.png");
        assert_eq!(frame_file_name(41, "png"), "frame_00042.png");
    }

    #[test]
    fn sequence_roundtrip_via_disk() {
        let dir = tempfile::tempdir().unwrap();
        let seq = noise_sequence("rt", 12, 10, 5, 3);
        save_sequence(&seq, dir.path()).unwrap();
        let loaded = load_sequence(dir.path(), "frame_").unwrap();
        assert_eq!(loaded.len(), 5);
        for (a, b) in seq.frames.iter().zip(&loaded.frames) {
            assert_eq!(a.to_u8(), b.to_u8());
        }
    }

    #[test]
    fn missing_frame_index_is_an_ingest_error() {
        let dir = tempfile::tempdir().unwrap();
        let seq = noise_sequence("gap", 8, 8, 4, 4);
        save_sequence(&seq, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("frame_00002.png")).unwrap();
        let err = load_sequence(dir.path(), "frame_").unwrap_err();
        assert!(matches!(err, Error::Ingest(_)), "{err}");
    }

    #[test]
    fn degrade_is_deterministic_in_profile_seed() {
        let gt = noise_sequence("det", 16, 16, 6, 7);
        let profile = DegradationProfile::default();
        let a = degrade(&gt, &profile).unwrap();
        let b = degrade(&gt, &profile).unwrap();
        for (x, y) in a.frames.iter().zip(&b.frames) {
            assert_eq!(x.pixels, y.pixels);
        }
        let other = DegradationProfile { seed: 99, ..profile };
        let c = degrade(&gt, &other).unwrap();
        assert_ne!(a.frames[1].pixels, c.frames[1].pixels);
    }

    #[test]
    fn degrade_psnr_decreases_with_strength_even_on_constant_frames() {
        let frames = vec![Frame::constant(16, 16, [0.4, 0.5, 0.6]); 8];
        let gt = VideoSequence::new("const", frames).unwrap();
        let mut last = f64::INFINITY;
        for strength in [5.0f32, 15.0, 40.0] {
            let profile = DegradationProfile {
                base_strength: strength,
                pqf_strength: strength / 2.0,
                ..DegradationProfile::default()
            };
            let lq = degrade(&gt, &profile).unwrap();
            let p = seq_psnr(&lq, &gt);
            assert!(p < last, "psnr {p} not below {last} at strength {strength}");
            last = p;
        }
    }

    #[test]
    fn degrade_marks_gop_anchors_cleaner() {
        let gt = noise_sequence("gop", 16, 16, 12, 11);
        let profile = DegradationProfile::default();
        let lq = degrade(&gt, &profile).unwrap();
        assert_eq!(lq.len(), 12);
        let psnrs: Vec<f64> = lq
            .frames
            .iter()
            .zip(&gt.frames)
            .map(|(a, b)| crate::eval::psnr(a, b, 1.0, 100.0).unwrap())
            .collect();
        let anchors: Vec<f64> = (0..12).step_by(4).map(|t| psnrs[t]).collect();
        let others: Vec<f64> = (0..12).filter(|t| t % 4 != 0).map(|t| psnrs[t]).collect();
        let amin = anchors.iter().cloned().fold(f64::INFINITY, f64::min);
        let omax = others.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(amin > omax, "anchor min {amin} <= other max {omax}");
    }

    #[test]
    fn degrade_scale_four_downsamples() {
        let gt = noise_sequence("x4", 32, 32, 4, 5);
        let profile = DegradationProfile {
            downsample_factor: 4,
            ..DegradationProfile::default()
        };
        let lq = degrade(&gt, &profile).unwrap();
        assert_eq!((lq.height(), lq.width()), (8, 8));
    }

    #[test]
    fn remove_duplicates_drops_exact_repeats_pairwise() {
        let gt = noise_sequence("dups", 8, 8, 5, 13);
        let mut lq = degrade(&gt, &DegradationProfile::default()).unwrap();
        // Force frame 2 to repeat frame 1 exactly at 8-bit precision.
        lq.frames[2] = lq.frames[1].clone();
        let before_gt2 = gt.frames[3].clone();
        let (lq2, gt2) = remove_duplicates(&lq, &gt).unwrap();
        assert_eq!(lq2.len(), 4);
        assert_eq!(gt2.len(), 4);
        assert_eq!(gt2.frames[2].pixels, before_gt2.pixels);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn remove_duplicates_is_idempotent_and_pairing_preserving(seed in 0u64..1000, n in 2usize..9) {
            let gt = noise_sequence("p", 8, 8, n, seed);
            let mut lq = degrade(&gt, &DegradationProfile::default()).unwrap();
            // Inject duplicates pseudo-randomly.
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            for t in 1..n {
                if rng.gen_bool(0.3) {
                    lq.frames[t] = lq.frames[t - 1].clone();
                }
            }
            let (l1, g1) = remove_duplicates(&lq, &gt).unwrap();
            prop_assert_eq!(l1.len(), g1.len());
            let (l2, g2) = remove_duplicates(&l1, &g1).unwrap();
            prop_assert_eq!(l1.len(), l2.len());
            for (a, b) in l1.frames.iter().zip(&l2.frames) {
                prop_assert_eq!(&a.pixels, &b.pixels);
            }
            for (a, b) in g1.frames.iter().zip(&g2.frames) {
                prop_assert_eq!(&a.pixels, &b.pixels);
            }
            // Pairing preserved: every surviving LQ frame keeps its GT partner.
            let mut j = 0;
            for t in 0..n {
                if j < l1.len() && l1.frames[j].pixels == lq.frames[t].pixels
                    && g1.frames[j].pixels == gt.frames[t].pixels {
                    j += 1;
                }
            }
            prop_assert_eq!(j, l1.len());
        }
    }

    /// Reference scan: strict local maxima with endpoint rule.
    fn brute_force_maxima(series: &[f64]) -> Vec<bool> {
        let n = series.len();
        let mut out = vec![false; n];
        for i in 0..n {
            let left_ok = i == 0 || series[i] > series[i - 1];
            let right_ok = i == n - 1 || series[i] > series[i + 1];
            out[i] = left_ok && right_ok;
        }
        if !out.iter().any(|&b| b) {
            let mut best = 0;
            for i in 1..n {
                if series[i] > series[best] {
                    best = i;
                }
            }
            out[best] = true;
        }
        out
    }

    #[test]
    fn local_maxima_matches_brute_force_exhaustively() {
        // All up/down/flat step patterns for series lengths up to 12.
        for n in 1usize..=12 {
            let patterns = 3usize.pow((n - 1) as u32);
            for code in 0..patterns {
                let mut series = vec![5.0f64];
                let mut c = code;
                for _ in 1..n {
                    let step = match c % 3 {
                        0 => -1.0,
                        1 => 0.0,
                        _ => 1.0,
                    };
                    c /= 3;
                    let prev = *series.last().unwrap();
                    series.push(prev + step);
                }
                assert_eq!(
                    local_maxima(&series),
                    brute_force_maxima(&series),
                    "series {series:?}"
                );
            }
        }
    }

    #[test]
    fn label_pqfs_profile_mode_marks_gop_anchors() {
        let gt = noise_sequence("lp", 8, 8, 10, 21);
        let profile = DegradationProfile::default();
        let lq = degrade(&gt, &profile).unwrap();
        let labels = label_pqfs(&lq, None, Some(&profile)).unwrap();
        let expected: Vec<bool> = (0..10).map(|t| t % 4 == 0).collect();
        assert_eq!(labels, expected);
    }

    #[test]
    fn label_pqfs_psnr_mode_finds_gop_anchors() {
        let gt = noise_sequence("lpsnr", 16, 16, 12, 22);
        let profile = DegradationProfile::default();
        let lq = degrade(&gt, &profile).unwrap();
        let labels = label_pqfs(&lq, Some(&gt), None).unwrap();
        // Interior anchors must be detected; endpoints follow the scan rule.
        assert!(labels[4] && labels[8], "labels {labels:?}");
        assert!(labels.iter().filter(|&&b| b).count() >= 2);
    }

    #[test]
    fn sample_every_k_keeps_one_in_k() {
        let seq = noise_sequence("s", 4, 4, 100, 31);
        let picked = sample_every_k(&seq, 8).unwrap();
        assert_eq!(picked.len(), 13);
        assert_eq!(picked[0].0, 0);
        assert_eq!(picked[12].0, 96);
    }

    #[test]
    fn make_patches_respects_scale_alignment() {
        let gt = noise_sequence("mp", 32, 32, 6, 41);
        let profile = DegradationProfile {
            downsample_factor: 4,
            ..DegradationProfile::default()
        };
        let lq = degrade(&gt, &profile).unwrap();
        let labels = label_pqfs(&lq, None, Some(&profile)).unwrap();
        let lq = lq.with_labels(labels).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sample = make_patches(&lq, &gt, 4, 3, &mut rng).unwrap();
        assert_eq!((sample.lq.height(), sample.lq.width()), (4, 4));
        assert_eq!((sample.gt.height(), sample.gt.width()), (16, 16));
        assert_eq!(sample.lq.len(), 3);
        assert_eq!(sample.gt.len(), 3);
        // LQ crop origin maps to GT origin times scale.
        let (oy, ox) = sample.crop_origin;
        let (t0, _) = sample.temporal_window;
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(
                    sample.lq.frames[0].get(y, x, 0),
                    lq.frames[t0].get(oy + y, ox + x, 0)
                );
            }
        }
        assert!(sample.lq.pqf_labels.is_some());
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            profile: DegradationProfile::default(),
            train: vec![ManifestEntry {
                id: "a".into(),
                lq_dir: dir.path().join("lq/a"),
                gt_dir: dir.path().join("gt/a"),
                pqf_labels: vec![true, false],
            }],
            val: vec![],
        };
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let m2 = Manifest::load(&path).unwrap();
        assert_eq!(m2.train.len(), 1);
        assert_eq!(m2.train[0].pqf_labels, vec![true, false]);
    }
}

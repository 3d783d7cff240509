//! Dihedral-8 self-ensemble, model ensemble and cascade inference.

use serde::{Deserialize, Serialize};

use crate::data::{Frame, VideoSequence};
use crate::error::{Error, Result};
use crate::stage1::Stage1Net;
use crate::stage2::Stage2Net;

/// One of the 8 flip/rotation symmetries of the square: rotate by 90°·rot
/// counterclockwise, then mirror horizontally if `flip`. Rotations are exact
/// index permutations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DihedralTransform {
    pub rot: u8,
    pub flip: bool,
}

impl DihedralTransform {
    pub const IDENTITY: DihedralTransform = DihedralTransform { rot: 0, flip: false };

    /// All 8 group elements: e, r90, r180, r270, h, h·r90, h·r180, h·r270.
    pub fn all() -> [DihedralTransform; 8] {
        let mut out = [DihedralTransform::IDENTITY; 8];
        let mut i = 0;
        for &flip in &[false, true] {
            for rot in 0..4u8 {
                out[i] = DihedralTransform { rot, flip };
                i += 1;
            }
        }
        out
    }

    /// Canonical index in 0..8, used for order-independent reductions.
    pub fn index(&self) -> usize {
        self.rot as usize + if self.flip { 4 } else { 0 }
    }

    pub fn apply(&self, frame: &Frame) -> Frame {
        let mut out = frame.clone();
        for _ in 0..self.rot {
            out = rot90_ccw(&out);
        }
        if self.flip {
            out = mirror_h(&out);
        }
        out
    }

    /// The unique element that undoes this one: invert(t, apply(t, x)) == x.
    pub fn inverse(&self) -> DihedralTransform {
        // h r^k with "rotate then flip" composition: flips are self-inverse
        // and conjugating a rotation by a flip negates it.
        if self.flip {
            *self
        } else {
            DihedralTransform {
                rot: (4 - self.rot) % 4,
                flip: false,
            }
        }
    }

    pub fn invert(&self, frame: &Frame) -> Frame {
        self.inverse().apply(frame)
    }

    /// Group law: compose(a, b).apply(x) == a.apply(&b.apply(x)).
    pub fn compose(a: DihedralTransform, b: DihedralTransform) -> DihedralTransform {
        // Probe on an asymmetric 2x3 frame; the action is faithful there.
        let probe = probe_frame();
        let target = a.apply(&b.apply(&probe));
        for cand in DihedralTransform::all() {
            let applied = cand.apply(&probe);
            if applied.height == target.height
                && applied.width == target.width
                && applied.pixels == target.pixels
            {
                return cand;
            }
        }
        unreachable!("dihedral group is closed under composition");
    }

    pub fn apply_sequence(&self, seq: &VideoSequence) -> Result<VideoSequence> {
        let frames = seq.frames.iter().map(|f| self.apply(f)).collect();
        let mut out = VideoSequence::new(seq.id.clone(), frames)?;
        out.fps = seq.fps;
        out.pqf_labels = seq.pqf_labels.clone();
        Ok(out)
    }

    pub fn invert_sequence(&self, seq: &VideoSequence) -> Result<VideoSequence> {
        self.inverse().apply_sequence(seq)
    }
}

fn probe_frame() -> Frame {
    let mut f = Frame::zeros(2, 3);
    for (i, v) in f.pixels.iter_mut().enumerate() {
        *v = i as f32;
    }
    f
}

/// 90° counterclockwise: out[y, x] = in[x, W-1-y]; output is WxH.
fn rot90_ccw(frame: &Frame) -> Frame {
    let (h, w) = (frame.height, frame.width);
    let mut out = Frame::zeros(w, h);
    for y in 0..w {
        for x in 0..h {
            for c in 0..3 {
                out.set(y, x, c, frame.get(x, w - 1 - y, c));
            }
        }
    }
    out
}

fn mirror_h(frame: &Frame) -> Frame {
    let (h, w) = (frame.height, frame.width);
    let mut out = Frame::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.set(y, x, c, frame.get(y, w - 1 - x, c));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub transforms: Vec<DihedralTransform>,
    /// Stage-I checkpoint paths (1 or 2 models).
    pub models: Vec<std::path::PathBuf>,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        EnsembleSpec {
            transforms: DihedralTransform::all().to_vec(),
            models: Vec::new(),
        }
    }
}

/// Mean in canonical transform order, accumulated in f64, so the result does
/// not depend on the order of the transform list.
fn mean_frames(mut contributions: Vec<(usize, Frame)>) -> Result<Frame> {
    if contributions.is_empty() {
        return Err(Error::Ensemble("nothing to merge".into()));
    }
    contributions.sort_by_key(|(idx, _)| *idx);
    let (h, w) = (contributions[0].1.height, contributions[0].1.width);
    let mut acc = vec![0.0f64; h * w * 3];
    for (_, frame) in &contributions {
        if frame.height != h || frame.width != w {
            return Err(Error::Ensemble(format!(
                "prediction shape {}x{} does not match {h}x{w}",
                frame.height, frame.width
            )));
        }
        for (a, &p) in acc.iter_mut().zip(&frame.pixels) {
            *a += p as f64;
        }
    }
    let n = contributions.len() as f64;
    let pixels: Vec<f32> = acc.iter().map(|&v| (v / n) as f32).collect();
    Frame::new(h, w, pixels)
}

/// Self-ensemble of a frame map: mean over t of invert(t, f(apply(t, x))).
pub fn self_ensemble<F>(f: F, frame: &Frame, transforms: &[DihedralTransform]) -> Result<Frame>
where
    F: Fn(&Frame) -> Result<Frame>,
{
    if transforms.is_empty() {
        return Err(Error::Ensemble("transform set must be nonempty".into()));
    }
    let mut contributions = Vec::with_capacity(transforms.len());
    for t in transforms {
        let pred = f(&t.apply(frame))?;
        contributions.push((t.index(), t.invert(&pred)));
    }
    mean_frames(contributions)
}

/// Self-ensemble of a sequence map (the Stage-I path).
pub fn self_ensemble_sequence<F>(
    f: F,
    seq: &VideoSequence,
    transforms: &[DihedralTransform],
) -> Result<VideoSequence>
where
    F: Fn(&VideoSequence) -> Result<VideoSequence>,
{
    if transforms.is_empty() {
        return Err(Error::Ensemble("transform set must be nonempty".into()));
    }
    let mut per_transform: Vec<(usize, VideoSequence)> = Vec::with_capacity(transforms.len());
    for t in transforms {
        let pred = f(&t.apply_sequence(seq)?)?;
        if pred.len() != seq.len() {
            return Err(Error::Ensemble(format!(
                "prediction has {} frames, expected {}",
                pred.len(),
                seq.len()
            )));
        }
        per_transform.push((t.index(), t.invert_sequence(&pred)?));
    }
    let n = seq.len();
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let contributions: Vec<(usize, Frame)> = per_transform
            .iter()
            .map(|(idx, s)| (*idx, s.frames[i].clone()))
            .collect();
        frames.push(mean_frames(contributions)?);
    }
    let mut out = VideoSequence::new(seq.id.clone(), frames)?;
    out.fps = seq.fps;
    out.pqf_labels = seq.pqf_labels.clone();
    Ok(out)
}

/// Model x transform ensemble: with two models and eight transforms, 16
/// predictions are averaged with equal weight.
pub fn model_ensemble<F>(
    models: &[F],
    frame: &Frame,
    transforms: &[DihedralTransform],
) -> Result<Frame>
where
    F: Fn(&Frame) -> Result<Frame>,
{
    if models.is_empty() {
        return Err(Error::Ensemble("model list must be nonempty".into()));
    }
    let mut contributions = Vec::with_capacity(models.len() * transforms.len());
    for (mi, f) in models.iter().enumerate() {
        for t in transforms {
            let pred = f(&t.apply(frame))?;
            contributions.push((mi * 8 + t.index(), t.invert(&pred)));
        }
    }
    mean_frames(contributions)
}

/// Sequence-level model x transform ensemble over Stage-I networks.
pub fn model_ensemble_sequence(
    models: &[&Stage1Net],
    seq: &VideoSequence,
    transforms: &[DihedralTransform],
) -> Result<VideoSequence> {
    if models.is_empty() {
        return Err(Error::Ensemble("model list must be nonempty".into()));
    }
    if transforms.is_empty() {
        return Err(Error::Ensemble("transform set must be nonempty".into()));
    }
    let mut per_pred: Vec<(usize, VideoSequence)> = Vec::new();
    for (mi, net) in models.iter().enumerate() {
        for t in transforms {
            let pred = net.forward(&t.apply_sequence(seq)?)?;
            per_pred.push((mi * 8 + t.index(), t.invert_sequence(&pred)?));
        }
    }
    let n = seq.len();
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let contributions: Vec<(usize, Frame)> = per_pred
            .iter()
            .map(|(idx, s)| (*idx, s.frames[i].clone()))
            .collect();
        frames.push(mean_frames(contributions)?);
    }
    let mut out = VideoSequence::new(seq.id.clone(), frames)?;
    out.fps = seq.fps;
    out.pqf_labels = seq.pqf_labels.clone();
    Ok(out)
}

/// Full inference pipeline: (ensembled) Stage I, then per-frame Stage II,
/// optionally with Stage-II self-ensemble; final frames clamped to [0,1].
pub fn cascade_infer(
    seq: &VideoSequence,
    stage1_models: &[&Stage1Net],
    stage1_transforms: &[DihedralTransform],
    stage2: Option<&Stage2Net>,
    stage2_tta: bool,
) -> Result<VideoSequence> {
    let stage1_out =
        model_ensemble_sequence(stage1_models, seq, stage1_transforms)?;
    let mut out = match stage2 {
        None => stage1_out,
        Some(net) => {
            let frames: Vec<Frame> = stage1_out
                .frames
                .iter()
                .map(|f| {
                    if stage2_tta {
                        self_ensemble(
                            |x| net.refine_frame(x),
                            f,
                            &DihedralTransform::all(),
                        )
                    } else {
                        net.refine_frame(f)
                    }
                })
                .collect::<Result<_>>()?;
            let mut s = VideoSequence::new(stage1_out.id.clone(), frames)?;
            s.fps = stage1_out.fps;
            s.pqf_labels = stage1_out.pqf_labels.clone();
            s
        }
    };
    for frame in &mut out.frames {
        frame.clamp01();
    }
    Ok(out)
}

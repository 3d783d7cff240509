//! PSNR computation and Table-style evaluation reports.

use serde::{Deserialize, Serialize};

use crate::data::{Frame, VideoSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Every frame.
    All,
    /// 1-based frames 10, 20, … (0-based 9, 19, …), the challenge protocol.
    Every10th,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameScore {
    pub seq_id: String,
    pub frame_index: usize,
    pub psnr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceScore {
    pub seq_id: String,
    pub mean_psnr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub per_frame: Vec<FrameScore>,
    pub per_sequence: Vec<SequenceScore>,
    /// Unweighted mean over sequences.
    pub aggregate: f64,
}

pub fn mse(a: &Frame, b: &Frame) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Argument(format!(
            "frame shapes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let mut acc = 0.0f64;
    for (&x, &y) in a.pixels.iter().zip(&b.pixels) {
        let d = (x - y) as f64;
        acc += d * d;
    }
    Ok(acc / a.pixels.len() as f64)
}

/// 10·log10(peak²/MSE), capped (default 100 dB) when the MSE is zero.
pub fn psnr(a: &Frame, b: &Frame, peak: f64, cap: f64) -> Result<f64> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (peak * peak / e).log10()).min(cap))
}

/// Same on the BT.601 luma plane only.
pub fn psnr_luma(a: &Frame, b: &Frame, peak: f64, cap: f64) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Argument("frame shapes differ".into()));
    }
    let luma = |f: &Frame, i: usize| -> f64 {
        0.299 * f.pixels[i * 3] as f64
            + 0.587 * f.pixels[i * 3 + 1] as f64
            + 0.114 * f.pixels[i * 3 + 2] as f64
    };
    let n = a.height * a.width;
    let mut acc = 0.0;
    for i in 0..n {
        let d = luma(a, i) - luma(b, i);
        acc += d * d;
    }
    let e = acc / n as f64;
    if e == 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (peak * peak / e).log10()).min(cap))
}

/// Frame indices evaluated under a mode, for a sequence of length n.
pub fn selected_indices(mode: EvalMode, n: usize) -> Vec<usize> {
    match mode {
        EvalMode::All => (0..n).collect(),
        EvalMode::Every10th => (0..n).filter(|i| (i + 1) % 10 == 0).collect(),
    }
}

/// Per-frame scores and the per-sequence mean for one sequence.
pub fn evaluate(
    pred: &VideoSequence,
    gt: &VideoSequence,
    mode: EvalMode,
    luma_only: bool,
) -> Result<(Vec<FrameScore>, SequenceScore)> {
    if pred.len() != gt.len() {
        return Err(Error::Eval(format!(
            "sequence {}: pred has {} frames, gt has {}",
            pred.id,
            pred.len(),
            gt.len()
        )));
    }
    let indices = selected_indices(mode, pred.len());
    if indices.is_empty() {
        return Err(Error::Eval(format!(
            "sequence {}: no frames selected in {:?} mode (N={})",
            pred.id,
            mode,
            pred.len()
        )));
    }
    let mut scores = Vec::with_capacity(indices.len());
    for i in indices {
        let value = if luma_only {
            psnr_luma(&pred.frames[i], &gt.frames[i], 1.0, 100.0)?
        } else {
            psnr(&pred.frames[i], &gt.frames[i], 1.0, 100.0)?
        };
        scores.push(FrameScore {
            seq_id: pred.id.clone(),
            frame_index: i,
            psnr: value,
        });
    }
    let mean = scores.iter().map(|s| s.psnr).sum::<f64>() / scores.len() as f64;
    Ok((
        scores,
        SequenceScore {
            seq_id: pred.id.clone(),
            mean_psnr: mean,
        },
    ))
}

/// Combine per-sequence results into a report with the unweighted average.
pub fn aggregate(
    mode: EvalMode,
    per_frame: Vec<FrameScore>,
    per_sequence: Vec<SequenceScore>,
) -> Result<EvalReport> {
    if per_sequence.is_empty() {
        return Err(Error::Eval("no sequences to aggregate".into()));
    }
    let aggregate = per_sequence.iter().map(|s| s.mean_psnr).sum::<f64>()
        / per_sequence.len() as f64;
    Ok(EvalReport {
        mode,
        per_frame,
        per_sequence,
        aggregate,
    })
}

/// Round half-up at `decimals` places, matching how the tables are printed.
pub fn round_half_up(v: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    (v * scale + 0.5).floor() / scale
}

impl EvalReport {
    /// Per-frame CSV: seq_id, frame_index, psnr.
    pub fn frame_csv(&self) -> String {
        let mut out = String::from("seq_id,frame_index,psnr\n");
        for s in &self.per_frame {
            out.push_str(&format!("{},{},{:.4}\n", s.seq_id, s.frame_index, s.psnr));
        }
        out
    }

    /// Summary CSV: seq_id, mean_psnr, mode.
    pub fn summary_csv(&self) -> String {
        let mode = match self.mode {
            EvalMode::All => "all",
            EvalMode::Every10th => "every10th",
        };
        let mut out = String::from("seq_id,mean_psnr,mode\n");
        for s in &self.per_sequence {
            out.push_str(&format!("{},{:.4},{mode}\n", s.seq_id, s.mean_psnr));
        }
        out.push_str(&format!("Avg.,{:.4},{mode}\n", self.aggregate));
        out
    }

    /// Human-readable table: one column per sequence plus the average.
    pub fn table_text(&self) -> String {
        let mut header = String::from("| Sequence |");
        let mut row = String::from("| PSNR(dB) |");
        for s in &self.per_sequence {
            header.push_str(&format!(" {} |", s.seq_id));
            row.push_str(&format!(" {:.2} |", round_half_up(s.mean_psnr, 2)));
        }
        header.push_str(" Avg. |");
        row.push_str(&format!(" {:.4} |", round_half_up(self.aggregate, 4)));
        format!("{header}\n{row}\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::VideoSequence;

    #[test]
    fn psnr_of_identical_frames_hits_the_cap() {
        let a = Frame::constant(4, 4, [0.3, 0.3, 0.3]);
        assert_eq!(psnr(&a, &a, 1.0, 100.0).unwrap(), 100.0);
    }

    #[test]
    fn psnr_known_value() {
        // mse = 0.25^2 -> 10*log10(1/0.0625) = 12.0412 dB
        let a = Frame::constant(4, 4, [0.5, 0.5, 0.5]);
        let b = Frame::constant(4, 4, [0.25, 0.25, 0.25]);
        let p = psnr(&a, &b, 1.0, 100.0).unwrap();
        assert!((p - 12.041199826559248).abs() < 1e-9, "{p}");
        assert_eq!(p, psnr(&b, &a, 1.0, 100.0).unwrap());
    }

    #[test]
    fn luma_psnr_uses_bt601_weights() {
        // Difference only in blue: luma diff = 0.114 * 0.5
        let a = Frame::constant(4, 4, [0.2, 0.2, 0.2]);
        let b = Frame::constant(4, 4, [0.2, 0.2, 0.7]);
        let d = 0.114f64 * 0.5;
        let expected = 10.0 * (1.0 / (d * d)).log10();
        let p = psnr_luma(&a, &b, 1.0, 100.0).unwrap();
        assert!((p - expected).abs() < 1e-6, "{p} vs {expected}");
    }

    #[test]
    fn every10th_selects_zero_based_ninth_frames() {
        assert_eq!(selected_indices(EvalMode::Every10th, 25), vec![9, 19]);
        assert_eq!(selected_indices(EvalMode::Every10th, 100).len(), 10);
        assert_eq!(selected_indices(EvalMode::All, 4), vec![0, 1, 2, 3]);
        // Brute-force cross-check for all lengths up to 64.
        for n in 0..64usize {
            let expect: Vec<usize> = (0..n).filter(|i| (i + 1) % 10 == 0).collect();
            assert_eq!(selected_indices(EvalMode::Every10th, n), expect);
        }
    }

    #[test]
    fn evaluate_errors_on_empty_selection() {
        let frames = vec![Frame::constant(4, 4, [0.1, 0.1, 0.1]); 5];
        let seq = VideoSequence::new("short", frames).unwrap();
        let err = evaluate(&seq, &seq, EvalMode::Every10th, false).unwrap_err();
        assert!(matches!(err, crate::Error::Eval(_)), "{err}");
    }

    #[test]
    fn aggregate_is_the_unweighted_sequence_mean() {
        let vals = [29.39, 32.89, 27.84, 34.09, 30.04, 28.90, 30.14, 34.19, 31.90, 26.79];
        let seqs: Vec<SequenceScore> = vals
            .iter()
            .enumerate()
            .map(|(i, &v)| SequenceScore {
                seq_id: format!("s{i}"),
                mean_psnr: v,
            })
            .collect();
        let report = aggregate(EvalMode::All, vec![], seqs).unwrap();
        assert!((report.aggregate - 30.6170).abs() <= 0.005, "{}", report.aggregate);
    }

    #[test]
    fn rounding_is_half_up_at_display_precision() {
        assert_eq!(round_half_up(30.61695, 4), 30.617);
        assert_eq!(round_half_up(2.5, 0), 3.0);
        assert_eq!(round_half_up(33.16185, 4), 33.1619);
    }

    #[test]
    fn csv_and_table_have_expected_shape() {
        let frames = vec![FrameScore { seq_id: "a".into(), frame_index: 0, psnr: 30.0 }];
        let seqs = vec![SequenceScore { seq_id: "a".into(), mean_psnr: 30.0 }];
        let report = aggregate(EvalMode::All, frames, seqs).unwrap();
        assert!(report.frame_csv().starts_with("seq_id,frame_index,psnr"));
        assert!(report.summary_csv().contains("a,30"));
        let table = report.table_text();
        assert!(table.contains("Avg."), "{table}");
    }
}

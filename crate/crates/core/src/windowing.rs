//! Sliding-window segmentation of long recordings and overlap-averaged
//! stitching of the per-window output distributions.

use crate::ctc::LogProbLattice;
use crate::diffcore::Tensor;
use crate::{Error, Result, Scalar};

pub const DEFAULT_WINDOW: usize = 96;
pub const DEFAULT_STRIDE: f64 = 0.125;

/// One window of a recording.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment<T> {
    /// First input frame; always a multiple of the alignment.
    pub start: usize,
    pub index: usize,
    pub spectrogram: Tensor<T>,
}

impl<T: Scalar> Segment<T> {
    pub fn frames(&self) -> usize {
        self.spectrogram.rows()
    }
}

/// Hop in frames: `round(stride·window)` snapped down to a multiple of
/// `align`, and never less than `align`.
pub fn hop(window: usize, stride: f64, align: usize) -> usize {
    let raw = (stride * window as f64).round() as usize;
    ((raw / align) * align).max(align)
}

/// Window start frames for a recording of `frames` frames.
///
/// Starts advance by [`hop`]. When the next regular window would reach past
/// the end, a final window is placed so that it ends at the last frame, with
/// its start rounded up to the alignment (so it may be shorter than
/// `window`).
pub fn segment_starts(frames: usize, window: usize, stride: f64, align: usize) -> Result<Vec<usize>> {
    if align == 0 || window < align {
        return Err(Error::Validation(format!(
            "window of {window} frames is smaller than the alignment {align}"
        )));
    }
    if !(stride > 0.0 && stride <= 1.0) {
        return Err(Error::Validation(format!(
            "stride fraction must lie in (0, 1], got {stride}"
        )));
    }
    if frames == 0 {
        return Err(Error::Validation("cannot segment an empty recording".into()));
    }
    let s = hop(window, stride, align);
    let mut starts = vec![0];
    let mut cur = 0;
    while cur + window < frames {
        let next = cur + s;
        if next + window >= frames {
            let last = (frames - window).div_ceil(align) * align;
            starts.push(last);
            break;
        }
        starts.push(next);
        cur = next;
    }
    Ok(starts)
}

/// Cuts a `frames × bins` spectrogram into aligned, overlapping windows.
pub fn segment<T: Scalar>(x: &Tensor<T>, window: usize, stride: f64, align: usize) -> Result<Vec<Segment<T>>> {
    let frames = x.rows();
    segment_starts(frames, window, stride, align)?
        .into_iter()
        .enumerate()
        .map(|(index, start)| {
            let len = window.min(frames - start);
            Ok(Segment {
                start,
                index,
                spectrogram: x.slice_rows(start, len)?,
            })
        })
        .collect()
}

/// Non-overlapping windows of `window` frames; the last one may be shorter.
pub fn chunk<T: Scalar>(x: &Tensor<T>, window: usize, align: usize) -> Result<Vec<Segment<T>>> {
    if align == 0 || window == 0 || !window.is_multiple_of(align) {
        return Err(Error::Validation(format!(
            "chunk length {window} must be a positive multiple of {align}"
        )));
    }
    let frames = x.rows();
    if frames == 0 {
        return Err(Error::Validation("cannot segment an empty recording".into()));
    }
    (0..frames.div_ceil(window))
        .map(|index| {
            let start = index * window;
            Ok(Segment {
                start,
                index,
                spectrogram: x.slice_rows(start, window.min(frames - start))?,
            })
        })
        .collect()
}

/// Appends lattices in time order.
pub fn concat<T: Scalar>(pieces: &[LogProbLattice<T>]) -> Result<LogProbLattice<T>> {
    let first = pieces
        .first()
        .ok_or_else(|| Error::Usage("concat needs at least one piece".into()))?;
    let classes = first.classes();
    let mut data = Vec::new();
    for p in pieces {
        if p.classes() != classes {
            return Err(Error::Dimension {
                op: "concat",
                lhs: vec![classes],
                rhs: vec![p.classes()],
            });
        }
        data.extend_from_slice(p.log_probs().data());
    }
    let frames = data.len() / classes;
    LogProbLattice::new(Tensor::new(vec![frames, classes], data)?, first.subsample())
}

/// Averages overlapping pieces in the probability domain.
///
/// Each piece is `(output frame offset, lattice)`. Frame `f` of the result is
/// `log(mean_i p_i[f])` over every piece covering `f`, computed as a
/// stabilised log-mean-exp (so identical rows reproduce themselves exactly).
pub fn stitch<T: Scalar>(pieces: &[(usize, LogProbLattice<T>)]) -> Result<LogProbLattice<T>> {
    let first = &pieces
        .first()
        .ok_or_else(|| Error::Usage("stitch needs at least one piece".into()))?
        .1;
    let classes = first.classes();
    let subsample = first.subsample();
    if let Some((_, bad)) = pieces.iter().find(|(_, l)| l.classes() != classes) {
        return Err(Error::Dimension {
            op: "stitch",
            lhs: vec![classes],
            rhs: vec![bad.classes()],
        });
    }
    let total = pieces.iter().map(|(o, l)| o + l.frames()).max().unwrap_or(0);

    let mut covering: Vec<Vec<(usize, usize)>> = vec![Vec::new(); total];
    for (p, (offset, lat)) in pieces.iter().enumerate() {
        for t in 0..lat.frames() {
            covering[offset + t].push((p, t));
        }
    }
    if let Some(gap) = covering.iter().position(Vec::is_empty) {
        let end = covering[gap..]
            .iter()
            .position(|c| !c.is_empty())
            .map_or(total, |e| gap + e);
        return Err(Error::Stitch { start: gap, end });
    }

    let mut out = Tensor::zeros(vec![total, classes]);
    for (f, cover) in covering.iter().enumerate() {
        let n = T::of(cover.len() as f64);
        let row = out.row_mut(f);
        for (k, v) in row.iter_mut().enumerate() {
            let m = cover
                .iter()
                .map(|&(p, t)| pieces[p].1.row(t)[k])
                .fold(T::neg_infinity(), T::max);
            if m == T::neg_infinity() {
                *v = m;
                continue;
            }
            let sum: T = cover.iter().map(|&(p, t)| (pieces[p].1.row(t)[k] - m).exp()).sum();
            *v = m + (sum / n).ln();
        }
    }
    LogProbLattice::new(out, subsample)
}

/// Output-frame offset of a window starting at input frame `start`.
pub fn output_offset(start: usize, subsample: usize) -> usize {
    start / subsample
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lattice(rows: &[Vec<f64>]) -> LogProbLattice<f64> {
        LogProbLattice::from_probs(rows, 4).unwrap()
    }

    #[test]
    fn regular_starts_with_even_alignment() {
        // hop 10 at alignment 2 (10 is not a multiple of 4).
        assert_eq!(segment_starts(100, 80, 0.125, 2).unwrap(), vec![0, 10, 20]);
    }

    #[test]
    fn starts_snap_to_subsample_factor() {
        // hop round(10) → 8; the final window is right-aligned at ceil4(20).
        assert_eq!(segment_starts(100, 80, 0.125, 4).unwrap(), vec![0, 8, 16, 20]);
        assert_eq!(hop(96, 0.125, 4), 12);
    }

    #[test]
    fn short_recording_is_one_segment() {
        let x = Tensor::<f64>::zeros(vec![50, 3]);
        let segs = segment(&x, 80, 0.125, 4).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].frames(), 50);
    }

    #[test]
    fn invalid_windows_are_rejected() {
        assert!(segment_starts(100, 3, 0.5, 4).is_err());
        assert!(segment_starts(100, 8, 0.0, 4).is_err());
        assert!(segment_starts(100, 8, 1.5, 4).is_err());
    }

    #[test]
    fn final_segment_may_be_short_but_ends_at_last_frame() {
        let x = Tensor::<f64>::zeros(vec![103, 2]);
        let segs = segment(&x, 96, 0.125, 4).unwrap();
        let last = segs.last().unwrap();
        assert_eq!(last.start + last.frames(), 103);
        assert_eq!(last.start % 4, 0);
        assert!(segs[..segs.len() - 1].iter().all(|s| s.frames() == 96));
    }

    #[test]
    fn chunks_tile_without_overlap() {
        let x = Tensor::<f64>::zeros(vec![200, 2]);
        let c = chunk(&x, 96, 4).unwrap();
        assert_eq!(
            c.iter().map(|s| (s.start, s.frames())).collect::<Vec<_>>(),
            vec![(0, 96), (96, 96), (192, 8)]
        );
        assert!(chunk(&x, 90, 4).is_err());
    }

    #[test]
    fn concat_appends_rows() {
        let a = lattice(&[vec![0.5, 0.5]]);
        let b = lattice(&[vec![0.2, 0.8], vec![0.9, 0.1]]);
        let c = concat(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.frames(), 3);
        assert_eq!(c.row(0), a.row(0));
        assert_eq!(c.row(2), b.row(1));
    }

    #[test]
    fn stitch_single_piece_is_identity() {
        let l = lattice(&[vec![0.2, 0.8], vec![0.6, 0.4]]);
        assert_eq!(stitch(&[(0, l.clone())]).unwrap(), l);
    }

    #[test]
    fn stitch_identical_overlap_is_idempotent() {
        let l = lattice(&[vec![0.3, 0.7], vec![0.1, 0.9]]);
        assert_eq!(stitch(&[(0, l.clone()), (0, l.clone())]).unwrap(), l);
    }

    #[test]
    fn stitch_averages_probabilities_over_overlap() {
        let a = lattice(&[vec![0.5, 0.5], vec![0.8, 0.2]]);
        let b = lattice(&[vec![0.4, 0.6], vec![0.9, 0.1]]);
        let s = stitch(&[(0, a), (1, b)]).unwrap();
        assert_eq!(s.frames(), 3);
        let mid: Vec<f64> = s.row(1).iter().map(|v| v.exp()).collect();
        assert!((mid[0] - 0.6).abs() < 1e-12 && (mid[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn stitch_reports_gap() {
        let a = lattice(&[vec![0.5, 0.5]]);
        let err = stitch(&[(0, a.clone()), (3, a)]).unwrap_err();
        assert!(matches!(err, Error::Stitch { start: 1, end: 3 }), "{err}");
    }

    proptest! {
        #[test]
        fn segments_cover_every_frame(frames in 1usize..600, window in 4usize..130, stride in 0.05f64..1.0) {
            let starts = segment_starts(frames, window, stride, 4).unwrap();
            prop_assert!(starts.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(starts.iter().all(|s| s % 4 == 0));
            let mut covered = vec![false; frames];
            for &s in &starts {
                for c in covered.iter_mut().take((s + window).min(frames)).skip(s) {
                    *c = true;
                }
            }
            prop_assert!(covered.iter().all(|&c| c));
            let h = hop(window, stride, 4);
            prop_assert!(starts.len() <= frames.div_ceil(h) + 1);
        }

        #[test]
        fn stitched_rows_are_distributions(seed in 0u64..500) {
            use rand::Rng;
            let mut r = crate::rng::stream(seed, &[]);
            let mut pieces = Vec::new();
            for offset in [0usize, 2, 3, 5] {
                let rows: Vec<Vec<f64>> = (0..4).map(|_| {
                    let raw: Vec<f64> = (0..5).map(|_| r.random_range(0.01..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    raw.iter().map(|v| v / s).collect()
                }).collect();
                pieces.push((offset, lattice(&rows)));
            }
            let s = stitch(&pieces).unwrap();
            for t in 0..s.frames() {
                let total: f64 = s.row(t).iter().map(|v| v.exp()).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}

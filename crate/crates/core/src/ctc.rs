//! CTC loss by log-space forward-backward, and best-path decoding.
//!
//! The blank symbol is always the last class of a lattice. Labels are
//! symbol ids in `0..blank`.

use crate::diffcore::{log_sum_exp, Tensor};
use crate::{Error, Result, Scalar};

/// Symbol ids in `[0, V)`; never contains the blank id.
pub type LabelSequence = Vec<usize>;

/// `T' × (V + 1)` log probabilities; the blank is the last column.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbLattice<T> {
    log_probs: Tensor<T>,
    subsample: usize,
}

impl<T: Scalar> LogProbLattice<T> {
    pub fn new(log_probs: Tensor<T>, subsample: usize) -> Result<Self> {
        match log_probs.shape() {
            [_, c] if *c >= 2 => Ok(Self { log_probs, subsample }),
            s => Err(Error::Shape(format!(
                "lattice needs a frames×classes matrix with at least two classes, got {s:?}"
            ))),
        }
    }

    /// Builds a lattice from probability rows (mainly for tests and tools).
    pub fn from_probs(rows: &[Vec<T>], subsample: usize) -> Result<Self> {
        let t = Tensor::from_rows(rows)?.map(|p| p.ln());
        Self::new(t, subsample)
    }

    pub fn frames(&self) -> usize {
        self.log_probs.rows()
    }

    pub fn classes(&self) -> usize {
        self.log_probs.row_len()
    }

    pub fn blank(&self) -> usize {
        self.classes() - 1
    }

    pub fn subsample(&self) -> usize {
        self.subsample
    }

    pub fn row(&self, t: usize) -> &[T] {
        self.log_probs.row(t)
    }

    pub fn log_probs(&self) -> &Tensor<T> {
        &self.log_probs
    }

    pub fn into_log_probs(self) -> Tensor<T> {
        self.log_probs
    }

    /// Every row's log-sum-exp is zero within `tol`.
    pub fn is_normalized(&self, tol: T) -> bool {
        (0..self.frames()).all(|t| log_sum_exp(self.row(t)).abs() <= tol)
    }

    /// Lowest-index argmax per frame.
    pub fn argmax_frames(&self) -> Vec<usize> {
        (0..self.frames())
            .map(|t| {
                let row = self.row(t);
                let mut best = 0;
                for (k, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct CtcOutput<T> {
    /// `−log P(labels | lattice)`.
    pub loss: T,
    /// Gradient of the loss with respect to the pre-softmax logits that
    /// produced the lattice: `softmax − state posteriors`.
    pub grad_logits: Tensor<T>,
}

/// Number of adjacent equal label pairs; each one forces an extra blank frame.
pub fn adjacent_repeats(labels: &[usize]) -> usize {
    labels.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn is_feasible(frames: usize, labels: &[usize]) -> bool {
    frames >= labels.len() + adjacent_repeats(labels)
}

fn lse2<T: Scalar>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// CTC negative log likelihood of `labels` under `lattice`, with its gradient
/// with respect to the logits (assuming the lattice is their log-softmax).
pub fn ctc_loss<T: Scalar>(lattice: &LogProbLattice<T>, labels: &[usize]) -> Result<CtcOutput<T>> {
    let frames = lattice.frames();
    let classes = lattice.classes();
    let blank = lattice.blank();
    if let Some(&bad) = labels.iter().find(|&&l| l >= blank) {
        return Err(Error::Usage(format!(
            "label {bad} is not a symbol id below blank {blank}"
        )));
    }
    if frames == 0 || !is_feasible(frames, labels) {
        return Err(Error::Infeasible {
            frames,
            labels: labels.len(),
            repeats: adjacent_repeats(labels),
        });
    }

    let s_len = 2 * labels.len() + 1;
    let ext: Vec<usize> = (0..s_len)
        .map(|s| if s % 2 == 0 { blank } else { labels[s / 2] })
        .collect();
    // A state may be entered from two states back when it is a symbol that
    // differs from the previous symbol.
    let skip: Vec<bool> = (0..s_len)
        .map(|s| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2])
        .collect();
    let ninf = T::neg_infinity();
    let lp = |t: usize, k: usize| lattice.row(t)[k];

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = lse2(a, prev[s - 1]);
            }
            if skip[s] {
                a = lse2(a, prev[s - 2]);
            }
            cur[s] = if a == ninf { ninf } else { a + lp(t, ext[s]) };
        }
    }

    // beta[t][s]: log probability of emitting the remainder after frame t,
    // given state s at frame t (frame t's emission excluded).
    let mut beta = vec![ninf; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = T::zero();
    if s_len > 1 {
        beta[last + s_len - 2] = T::zero();
    }
    for t in (0..frames - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        let next = &next[..s_len];
        for s in 0..s_len {
            let via = |s2: usize| next[s2] + lp(t + 1, ext[s2]);
            let mut b = via(s);
            if s + 1 < s_len {
                b = lse2(b, via(s + 1));
            }
            if s + 2 < s_len && skip[s + 2] {
                b = lse2(b, via(s + 2));
            }
            cur[s] = b;
        }
    }

    let log_z = if s_len > 1 {
        lse2(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if !log_z.is_finite() {
        return Err(Error::Numeric(format!("CTC likelihood underflowed (log Z = {log_z})")));
    }

    let mut grad = Tensor::zeros(vec![frames, classes]);
    for t in 0..frames {
        let g = grad.row_mut(t);
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = lp(t, k).exp();
        }
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == ninf || b == ninf {
                continue;
            }
            g[ext[s]] -= (a + b - log_z).exp();
        }
    }
    Ok(CtcOutput {
        loss: -log_z,
        grad_logits: grad,
    })
}

/// Best-path decoding: frame argmax, collapse repeats, drop blanks.
pub fn greedy_decode<T: Scalar>(lattice: &LogProbLattice<T>) -> LabelSequence {
    let blank = lattice.blank();
    let mut out = Vec::new();
    let mut prev = None;
    for k in lattice.argmax_frames() {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Fraction of frames whose argmax is the blank.
pub fn blank_ratio<T: Scalar>(lattice: &LogProbLattice<T>) -> f64 {
    let frames = lattice.frames();
    if frames == 0 {
        return 0.0;
    }
    let blank = lattice.blank();
    lattice.argmax_frames().iter().filter(|&&k| k == blank).count() as f64 / frames as f64
}


#[cfg(test)]
mod tests {
    use super::oracle::brute_force_probability;
    use super::*;
    use crate::diffcore::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lattice_from_probs(rows: &[Vec<f64>]) -> LogProbLattice<f64> {
        LogProbLattice::from_probs(rows, 1).unwrap()
    }

    fn one_hot_frames(frames: &[usize], classes: usize) -> LogProbLattice<f64> {
        let rows: Vec<Vec<f64>> = frames
            .iter()
            .map(|&k| {
                (0..classes)
                    .map(|c| if c == k { 0.9 } else { 0.1 / (classes - 1) as f64 })
                    .collect()
            })
            .collect();
        lattice_from_probs(&rows)
    }

    #[test]
    fn certain_single_frame_has_zero_loss() {
        let l = lattice_from_probs(&[vec![1.0, 0.0]]);
        let out = ctc_loss(&l, &[0]).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn two_frame_enumeration_case() {
        // Paths a·a, a·∅, ∅·a each with probability 0.25.
        let l = lattice_from_probs(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let out = ctc_loss(&l, &[0]).unwrap();
        assert!((out.loss - 0.287_682_072_451_780_9).abs() < 1e-12);
        assert!((out.loss - (-(0.75f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn repeated_label_needs_separating_blank() {
        let l = lattice_from_probs(&[vec![0.5, 0.5], vec![0.5, 0.5], vec![0.5, 0.5]]);
        let out = ctc_loss(&l, &[0, 0]).unwrap();
        assert!((out.loss - 2.079_441_541_679_835_7).abs() < 1e-12);
        assert!((out.loss - (-(0.125f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn infeasible_target_is_reported() {
        let l = lattice_from_probs(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert!(matches!(
            ctc_loss(&l, &[0, 0]),
            Err(Error::Infeasible { repeats: 1, .. })
        ));
        assert!(matches!(ctc_loss(&l, &[1]), Err(Error::Usage(_))));
    }

    #[test]
    fn empty_target_is_all_blank_path() {
        let l = lattice_from_probs(&[vec![0.3, 0.7], vec![0.4, 0.6]]);
        let out = ctc_loss(&l, &[]).unwrap();
        assert!((out.loss + (0.7f64 * 0.6).ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_on_random_lattices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let frames = rng.random_range(1..=5);
            let v = rng.random_range(1..=3);
            let rows: Vec<Vec<f64>> = (0..frames)
                .map(|_| {
                    let raw: Vec<f64> = (0..=v).map(|_| rng.random_range(0.05..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    raw.iter().map(|x| x / s).collect()
                })
                .collect();
            let len = rng.random_range(0..=3);
            let labels: Vec<usize> = (0..len).map(|_| rng.random_range(0..v)).collect();
            let brute = brute_force_probability(&rows, &labels);
            match ctc_loss(&lattice_from_probs(&rows), &labels) {
                Ok(out) => assert!(((-out.loss).exp() - brute).abs() <= 1e-9),
                Err(Error::Infeasible { .. }) => assert_eq!(brute, 0.0),
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn gradient_rows_sum_to_zero_and_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let logits = Tensor::new(vec![6, 4], (0..24).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let labels = [0, 2, 2, 1];
        let loss_of = |x: &Tensor<f64>| {
            let g = Graph::new();
            let v = g.constant(x.clone());
            let lp = g.log_softmax(v).unwrap();
            let lat = LogProbLattice::new(g.value(lp).clone(), 1).unwrap();
            ctc_loss(&lat, &labels).unwrap()
        };
        let out = loss_of(&logits);
        for t in 0..6 {
            let s: f64 = out.grad_logits.row(t).iter().sum();
            assert!(s.abs() < 1e-9);
        }
        let h = 1e-6;
        for j in 0..logits.len() {
            let mut p = logits.clone();
            p.data_mut()[j] += h;
            let mut m = logits.clone();
            m.data_mut()[j] -= h;
            let numeric = (loss_of(&p).loss - loss_of(&m).loss) / (2.0 * h);
            let analytic = out.grad_logits.data()[j];
            let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1.0);
            assert!(err < 1e-6, "entry {j}: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn greedy_decode_cases() {
        // classes: a=0, b=1, blank=2
        assert_eq!(greedy_decode(&one_hot_frames(&[2, 2], 3)), Vec::<usize>::new());
        assert_eq!(greedy_decode(&one_hot_frames(&[0, 0, 2, 0, 1, 1], 3)), vec![0, 0, 1]);
        assert_eq!(greedy_decode(&one_hot_frames(&[0, 2, 0], 3)), vec![0, 0]);
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        let l = lattice_from_probs(&[vec![0.4, 0.4, 0.2]]);
        assert_eq!(l.argmax_frames(), vec![0]);
    }

    #[test]
    fn blank_ratio_cases() {
        assert_eq!(blank_ratio(&one_hot_frames(&[2, 2, 2], 3)), 1.0);
        assert_eq!(blank_ratio(&one_hot_frames(&[0, 1, 0], 3)), 0.0);
        assert_eq!(blank_ratio(&one_hot_frames(&[0, 2, 1, 2], 3)), 0.5);
    }

    proptest::proptest! {
        #[test]
        fn decode_never_emits_blank_or_exceeds_frames(frames in proptest::collection::vec(0usize..4, 1..20)) {
            let l = one_hot_frames(&frames, 4);
            let out = greedy_decode(&l);
            proptest::prop_assert!(out.len() <= l.frames());
            proptest::prop_assert!(out.iter().all(|&k| k != 3));
        }
    }
}

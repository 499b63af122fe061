//! Input perturbations for the student pass: identity, frequency masking,
//! CutOut rectangles and additive Gaussian noise.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::{Error, Result, Scalar};

/// Fraction of the frequency axis used as the maximum frequency-mask width
/// (34 of 80 mel bins in the full-scale recipe).
pub const FREQ_MASK_WIDTH_FRACTION: f64 = 0.42;
pub const DEFAULT_FREQ_MASKS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformSpec {
    Identity,
    FreqMask {
        n_masks: usize,
        max_width: usize,
        /// Time masks are off by default and exist only for ablations.
        #[serde(default)]
        n_time_masks: usize,
        #[serde(default)]
        max_time_width: usize,
        #[serde(default)]
        fill: f64,
    },
    Cutout {
        n_rects: usize,
        max_time: usize,
        max_freq: usize,
        #[serde(default)]
        fill: f64,
    },
    Noise {
        sigma: f64,
    },
}

impl TransformSpec {
    pub fn freq_mask(n_masks: usize, max_width: usize) -> Self {
        TransformSpec::FreqMask {
            n_masks,
            max_width,
            n_time_masks: 0,
            max_time_width: 0,
            fill: 0.0,
        }
    }

    /// Default spec for each named transform at `bins` frequency bins.
    pub fn named(name: &str, bins: usize) -> Result<Self> {
        match name {
            "identity" => Ok(TransformSpec::Identity),
            "specaugment" => Ok(Self::freq_mask(DEFAULT_FREQ_MASKS, scaled_mask_width(bins))),
            "noise" => Ok(TransformSpec::Noise { sigma: 0.5 }),
            "cutout" => Ok(TransformSpec::Cutout {
                n_rects: 6,
                max_time: 24,
                max_freq: (bins / 3).max(1),
                fill: 0.0,
            }),
            other => Err(Error::Usage(format!(
                "unknown transform {other:?}; expected specaugment, identity, noise or cutout"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TransformSpec::Identity => "identity",
            TransformSpec::FreqMask { .. } => "specaugment",
            TransformSpec::Cutout { .. } => "cutout",
            TransformSpec::Noise { .. } => "noise",
        }
    }

    pub fn validate(&self, bins: usize) -> Result<()> {
        match *self {
            TransformSpec::FreqMask { max_width, .. } if max_width > bins => Err(Error::Validation(format!(
                "frequency mask width {max_width} exceeds {bins} bins"
            ))),
            TransformSpec::Cutout { max_freq, .. } if max_freq > bins => Err(Error::Validation(format!(
                "cutout height {max_freq} exceeds {bins} bins"
            ))),
            TransformSpec::Noise { sigma } if !(sigma >= 0.0) => {
                Err(Error::Validation(format!("noise sigma must be >= 0, got {sigma}")))
            }
            _ => Ok(()),
        }
    }
}

/// `round(0.42·F)`: keeps the masked fraction of the spectrum constant.
pub fn scaled_mask_width(bins: usize) -> usize {
    (FREQ_MASK_WIDTH_FRACTION * bins as f64).round() as usize
}

/// Draws `n` bands `(start, width)` with `width ~ U{0..=max_width}` and
/// `start ~ U{0..=bins − width}`.
pub fn draw_bands(rng: &mut impl Rng, n: usize, max_width: usize, extent: usize) -> Vec<(usize, usize)> {
    let max_width = max_width.min(extent);
    (0..n)
        .map(|_| {
            let w = rng.random_range(0..=max_width);
            let start = rng.random_range(0..=extent - w);
            (start, w)
        })
        .collect()
}

/// Sets frequency rows `[start, start + width)` of every frame to `fill`.
pub fn mask_frequency_bands<T: Scalar>(x: &mut Tensor<T>, bands: &[(usize, usize)], fill: T) {
    let bins = x.row_len();
    for t in 0..x.rows() {
        let row = x.row_mut(t);
        for &(f0, w) in bands {
            row[f0..(f0 + w).min(bins)].iter_mut().for_each(|v| *v = fill);
        }
    }
}

fn mask_rect<T: Scalar>(x: &mut Tensor<T>, t0: usize, h: usize, f0: usize, w: usize, fill: T) {
    for t in t0..(t0 + h).min(x.rows()) {
        x.row_mut(t)[f0..f0 + w].iter_mut().for_each(|v| *v = fill);
    }
}

/// Applies `spec` to a `frames × bins` spectrogram; the input is untouched.
pub fn apply<T: Scalar>(spec: &TransformSpec, x: &Tensor<T>, rng: &mut impl Rng) -> Result<Tensor<T>> {
    let bins = x.row_len();
    let frames = x.rows();
    spec.validate(bins)?;
    let mut out = x.clone();
    match *spec {
        TransformSpec::Identity => {}
        TransformSpec::FreqMask {
            n_masks,
            max_width,
            n_time_masks,
            max_time_width,
            fill,
        } => {
            let bands = draw_bands(rng, n_masks, max_width, bins);
            mask_frequency_bands(&mut out, &bands, T::of(fill));
            for (t0, h) in draw_bands(rng, n_time_masks, max_time_width, frames) {
                mask_rect(&mut out, t0, h, 0, bins, T::of(fill));
            }
        }
        TransformSpec::Cutout {
            n_rects,
            max_time,
            max_freq,
            fill,
        } => {
            for _ in 0..n_rects {
                let h = rng.random_range(0..=max_time.min(frames));
                let w = rng.random_range(0..=max_freq);
                let t0 = rng.random_range(0..=frames - h);
                let f0 = rng.random_range(0..=bins - w);
                mask_rect(&mut out, t0, h, f0, w, T::of(fill));
            }
        }
        TransformSpec::Noise { sigma } => {
            for v in out.data_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += T::of(sigma * z);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn ramp(frames: usize, bins: usize) -> Tensor<f64> {
        Tensor::new(
            vec![frames, bins],
            (0..frames * bins).map(|i| i as f64 * 0.01 + 1.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_is_bit_exact() {
        let x = ramp(7, 8);
        let y = apply(&TransformSpec::Identity, &x, &mut rng::stream(0, &[])).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn forced_band_masks_only_its_rows() {
        let x = ramp(4, 8);
        let mut y = x.clone();
        mask_frequency_bands(&mut y, &[(3, 2)], 0.0);
        for t in 0..4 {
            for f in 0..8 {
                if f == 3 || f == 4 {
                    assert_eq!(y.get(t, f), 0.0);
                } else {
                    assert_eq!(y.get(t, f).to_bits(), x.get(t, f).to_bits());
                }
            }
        }
    }

    #[test]
    fn specaugment_defaults_scale_with_bins() {
        assert_eq!(scaled_mask_width(32), 13);
        assert_eq!(scaled_mask_width(80), 34);
        assert_eq!(
            TransformSpec::named("specaugment", 32).unwrap(),
            TransformSpec::freq_mask(6, 13)
        );
        assert_eq!(TransformSpec::named("identity", 32).unwrap(), TransformSpec::Identity);
        assert!(matches!(
            TransformSpec::named("cutout", 32).unwrap(),
            TransformSpec::Cutout { .. }
        ));
        assert!(matches!(TransformSpec::named("warp", 32), Err(Error::Usage(_))));
    }

    #[test]
    fn mask_wider_than_spectrum_is_rejected() {
        let x = ramp(3, 8);
        let spec = TransformSpec::freq_mask(1, 9);
        assert!(matches!(
            apply(&spec, &x, &mut rng::stream(0, &[])),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn independent_streams_give_different_copies() {
        let x = ramp(20, 32);
        let spec = TransformSpec::named("specaugment", 32).unwrap();
        let a = apply(&spec, &x, &mut rng::stream(5, &[0])).unwrap();
        let b = apply(&spec, &x, &mut rng::stream(5, &[1])).unwrap();
        let a2 = apply(&spec, &x, &mut rng::stream(5, &[0])).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, a2);
    }

    #[test]
    fn expected_masked_width_matches_analytic_mean() {
        let (n, max_w, bins) = (6, 13, 32);
        let mut r = rng::stream(9, &[]);
        let trials = 10_000;
        let mut total = 0usize;
        for _ in 0..trials {
            total += draw_bands(&mut r, n, max_w, bins).iter().map(|b| b.1).sum::<usize>();
        }
        let measured = total as f64 / (trials * bins) as f64;
        let analytic = n as f64 * (max_w as f64 / 2.0) / bins as f64;
        assert!(
            (measured - analytic).abs() / analytic < 0.05,
            "{measured} vs {analytic}"
        );
    }

    #[test]
    fn noise_and_cutout_keep_shape() {
        let x = ramp(30, 32);
        let mut r = rng::stream(2, &[]);
        for name in ["noise", "cutout"] {
            let y = apply(&TransformSpec::named(name, 32).unwrap(), &x, &mut r).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert_ne!(y, x);
        }
    }

    proptest! {
        #[test]
        fn freq_mask_never_touches_unmasked_cells(seed in 0u64..1000, frames in 1usize..12) {
            let x = ramp(frames, 16);
            let mut r = rng::stream(seed, &[]);
            let bands = draw_bands(&mut r, 3, 5, 16);
            let mut y = x.clone();
            mask_frequency_bands(&mut y, &bands, -7.0);
            for t in 0..frames {
                for f in 0..16 {
                    let masked = bands.iter().any(|&(s, w)| f >= s && f < s + w);
                    if masked {
                        prop_assert_eq!(y.get(t, f), -7.0);
                    } else {
                        prop_assert_eq!(y.get(t, f).to_bits(), x.get(t, f).to_bits());
                    }
                }
            }
        }
    }
}

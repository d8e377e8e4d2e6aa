//! Butterworth band-pass design and zero-phase application.
//!
//! Filters are designed in zero-pole-gain form (analog prototype, band-pass
//! transform, bilinear map with pre-warping) and run as a cascade of
//! second-order sections.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Band edges in Hz and Butterworth prototype order. A prototype of order
/// `n` yields a band-pass of order `2n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub low_hz: f64,
    pub high_hz: f64,
    pub order: usize,
}

impl FilterSpec {
    pub const fn new(low_hz: f64, high_hz: f64, order: usize) -> Self {
        FilterSpec { low_hz, high_hz, order }
    }

    pub fn validate(&self, fs: f64) -> Result<()> {
        let nyquist = fs / 2.0;
        if !(fs > 0.0) {
            return Err(Error::Parameter(format!("sampling rate {fs} must be positive")));
        }
        if self.order == 0 {
            return Err(Error::Parameter("filter order must be at least 1".into()));
        }
        if !(self.low_hz > 0.0 && self.low_hz < self.high_hz && self.high_hz < nyquist) {
            return Err(Error::Parameter(format!(
                "band {}-{} Hz must satisfy 0 < low < high < {nyquist} Hz",
                self.low_hz, self.high_hz
            )));
        }
        Ok(())
    }
}

/// One second-order section, `a[0] == 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[1] + self.a[2])
    }

    /// Transposed direct-form II state that holds for a unit step input.
    fn step_state(&self) -> [f64; 2] {
        let dc = self.dc_gain();
        let z2 = self.b[2] - self.a[2] * dc;
        let z1 = self.b[1] - self.a[1] * dc + z2;
        [z1, z2]
    }

    fn response(&self, z_inv: Complex64) -> Complex64 {
        let num = self.b[0] + z_inv * (self.b[1] + z_inv * self.b[2]);
        let den = self.a[0] + z_inv * (self.a[1] + z_inv * self.a[2]);
        num / den
    }
}

/// A designed IIR band-pass filter.
#[derive(Clone, Debug, PartialEq)]
pub struct BandPass {
    pub spec: FilterSpec,
    pub fs: f64,
    pub sections: Vec<Biquad>,
}

fn poly_mul(p: &[f64], q: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p.len() + q.len() - 1];
    for (i, &a) in p.iter().enumerate() {
        for (j, &b) in q.iter().enumerate() {
            out[i + j] += a * b;
        }
    }
    out
}

/// Designs a Butterworth band-pass for `spec` at sampling rate `fs`.
pub fn design_bandpass(spec: &FilterSpec, fs: f64) -> Result<BandPass> {
    spec.validate(fs)?;
    let n = spec.order;
    let fs2 = 2.0 * fs;
    let w1 = fs2 * (PI * spec.low_hz / fs).tan();
    let w2 = fs2 * (PI * spec.high_hz / fs).tan();
    let bw = w2 - w1;
    let w0 = (w1 * w2).sqrt();

    let mut poles = Vec::with_capacity(2 * n);
    for k in 0..n {
        let theta = PI * (2 * k + n + 1) as f64 / (2 * n) as f64;
        let proto = Complex64::from_polar(1.0, theta);
        let half = proto * (bw / 2.0);
        let disc = (half * half - w0 * w0).sqrt();
        for s in [half + disc, half - disc] {
            poles.push((fs2 + s) / (fs2 - s));
        }
    }

    // Conjugate pairs become one section each; leftover real poles pair up.
    let tol = 1e-10;
    let mut sections = Vec::with_capacity(n);
    let mut reals: Vec<f64> = Vec::new();
    for p in &poles {
        if p.im > tol {
            sections.push(Biquad {
                b: [1.0, 0.0, -1.0],
                a: [1.0, -2.0 * p.re, p.norm_sqr()],
            });
        } else if p.im.abs() <= tol {
            reals.push(p.re);
        }
    }
    reals.sort_by(f64::total_cmp);
    for pair in reals.chunks(2) {
        let (p1, p2) = (pair[0], *pair.get(1).unwrap_or(&0.0));
        sections.push(Biquad {
            b: [1.0, 0.0, -1.0],
            a: [1.0, -(p1 + p2), p1 * p2],
        });
    }
    if sections.len() != n {
        return Err(Error::Numerical(format!(
            "pole pairing produced {} sections for order {n}",
            sections.len()
        )));
    }
    sections.sort_by(|x, y| x.a[2].abs().total_cmp(&y.a[2].abs()));

    // The analog centre w0 maps exactly onto this digital frequency, where
    // the Butterworth magnitude is one.
    let mut filt = BandPass {
        spec: *spec,
        fs,
        sections,
    };
    let centre_hz = fs / PI * (w0 / fs2).atan();
    let g = filt.response(centre_hz).norm();
    let per = (1.0 / g).powf(1.0 / n as f64);
    for s in &mut filt.sections {
        s.b.iter_mut().for_each(|v| *v *= per);
    }
    Ok(filt)
}

impl BandPass {
    pub fn design(spec: &FilterSpec, fs: f64) -> Result<Self> {
        design_bandpass(spec, fs)
    }

    /// Expanded `(numerator, denominator)` polynomials in `z^-1`.
    pub fn transfer_function(&self) -> (Vec<f64>, Vec<f64>) {
        self.sections
            .iter()
            .fold((vec![1.0], vec![1.0]), |(b, a), s| (poly_mul(&b, &s.b), poly_mul(&a, &s.a)))
    }

    pub fn poles(&self) -> Vec<Complex64> {
        self.sections
            .iter()
            .flat_map(|s| {
                let disc = Complex64::new(s.a[1] * s.a[1] - 4.0 * s.a[2], 0.0).sqrt();
                [(-s.a[1] + disc) / 2.0, (-s.a[1] - disc) / 2.0]
            })
            .collect()
    }

    /// Complex frequency response at `freq_hz`.
    pub fn response(&self, freq_hz: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * PI * freq_hz / self.fs);
        self.sections.iter().map(|s| s.response(z_inv)).product()
    }

    pub fn magnitude_db(&self, freq_hz: f64) -> f64 {
        20.0 * self.response(freq_hz).norm().log10()
    }

    fn run(&self, x: &mut [f64], init: Option<f64>) {
        let mut scale = 1.0;
        for s in &self.sections {
            let [mut z1, mut z2] = match init {
                Some(x0) => {
                    let st = s.step_state();
                    [st[0] * scale * x0, st[1] * scale * x0]
                }
                None => [0.0, 0.0],
            };
            scale *= s.dc_gain();
            for v in x.iter_mut() {
                let xi = *v;
                let y = s.b[0] * xi + z1;
                z1 = s.b[1] * xi - s.a[1] * y + z2;
                z2 = s.b[2] * xi - s.a[2] * y;
                *v = y;
            }
        }
    }

    /// Causal single pass from rest.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        self.run(&mut y, None);
        y
    }

    /// Number of samples of odd reflection added at each end by [`filtfilt`].
    pub fn pad_len(&self) -> usize {
        let (b, a) = (2 * self.sections.len() + 1, 2 * self.sections.len() + 1);
        3 * b.max(a)
    }
}

/// Zero-phase forward-backward filtering. Each end is extended by an odd
/// reflection of [`BandPass::pad_len`] samples (fewer for short signals) and
/// each pass starts from the steady state for its first sample.
pub fn filtfilt(filter: &BandPass, x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = filter.pad_len().min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    let (first, last) = (x[0], x[n - 1]);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));

    let x0 = ext[0];
    filter.run(&mut ext, Some(x0));
    ext.reverse();
    let y0 = ext[0];
    filter.run(&mut ext, Some(y0));
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    const FS: f64 = 250.0;

    fn tone(freq: f64, n: usize) -> Vec<f64> {
        (0..n).map(|k| (2.0 * PI * freq * k as f64 / FS).sin()).collect()
    }

    fn amplitude(y: &[f64]) -> f64 {
        let core = &y[y.len() / 4..3 * y.len() / 4];
        core.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn band1(order: usize) -> BandPass {
        design_bandpass(&FilterSpec::new(6.0, 50.0, order), FS).unwrap()
    }

    #[test]
    fn order_four_response_on_the_unit_circle() {
        let f = band1(4);
        assert!(f.magnitude_db(20.0) >= -1.0, "{}", f.magnitude_db(20.0));
        assert!(f.magnitude_db(2.0) <= -20.0, "{}", f.magnitude_db(2.0));
        assert!(f.poles().iter().all(|p| p.norm() < 1.0));
        assert_eq!(f.poles().len(), 8);
    }

    #[test]
    fn transfer_function_matches_cascade() {
        let f = band1(4);
        let (b, a) = f.transfer_function();
        assert_eq!(b.len(), 9);
        assert_eq!(a.len(), 9);
        for freq in [3.0, 10.0, 40.0, 80.0] {
            let z_inv = Complex64::from_polar(1.0, -2.0 * PI * freq / FS);
            let eval = |p: &[f64]| p.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, &c| acc * z_inv + c);
            let h = eval(&b) / eval(&a);
            assert!((h - f.response(freq)).norm() < 1e-9);
        }
    }

    #[test]
    fn stable_for_every_default_band() {
        for (lo, hi) in [(6.0, 50.0), (14.0, 50.0), (22.0, 50.0)] {
            for order in [2, 3, 4, 8] {
                let f = design_bandpass(&FilterSpec::new(lo, hi, order), FS).unwrap();
                assert!(f.poles().iter().all(|p| p.norm() < 1.0), "{lo}-{hi} order {order}");
                let peak = f.response((lo * hi).sqrt()).norm();
                assert!(peak > 0.99 && peak < 1.01);
            }
        }
    }

    #[test]
    fn rejects_bad_band_edges() {
        for spec in [
            FilterSpec::new(6.0, 125.0, 4),
            FilterSpec::new(6.0, 130.0, 4),
            FilterSpec::new(50.0, 6.0, 4),
            FilterSpec::new(0.0, 50.0, 4),
            FilterSpec::new(6.0, 50.0, 0),
        ] {
            assert!(matches!(design_bandpass(&spec, FS), Err(Error::Parameter(_))), "{spec:?}");
        }
    }

    #[test]
    fn filtfilt_zero_signal() {
        let f = band1(8);
        assert!(filtfilt(&f, &[0.0; 300]).iter().all(|&v| v == 0.0));
        assert!(filtfilt(&f, &[]).is_empty());
        assert_eq!(filtfilt(&f, &[1.5]).len(), 1);
    }

    #[test]
    fn filtfilt_passes_and_rejects_tones() {
        let f = band1(8);
        let y = filtfilt(&f, &tone(10.0, 1000));
        let a = amplitude(&y);
        assert!((0.9..=1.0).contains(&a), "{a}");
        let y = filtfilt(&f, &tone(2.0, 1000));
        assert!(amplitude(&y) <= 0.1);
    }

    #[test]
    fn filtfilt_has_zero_lag() {
        let f = band1(8);
        let x = tone(10.0, 1000);
        let y = filtfilt(&f, &x);
        let xc = |lag: isize| -> f64 {
            (250..750)
                .map(|i| x[i] * y[(i as isize + lag) as usize])
                .sum()
        };
        let best = (-12..=12).max_by(|&a, &b| xc(a).total_cmp(&xc(b))).unwrap();
        assert_eq!(best, 0);
    }

    #[test]
    fn filtfilt_is_linear() {
        let f = band1(8);
        let x: Vec<f64> = (0..400).map(|k| ((k * 7919) % 97) as f64 / 97.0 - 0.5).collect();
        let y = tone(13.0, 400);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        let fx = filtfilt(&f, &x);
        let fy = filtfilt(&f, &y);
        let fc = filtfilt(&f, &combo);
        for i in 0..400 {
            assert!((fc[i] - (2.0 * fx[i] - 0.5 * fy[i])).abs() < 1e-9);
        }
    }
}

//! Training-free CCA and filter-bank CCA classifiers.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::SubBandEpochs;

/// Relative ridge added to each covariance diagonal.
pub const RIDGE: f64 = 1e-9;

/// Sine/cosine templates, one `[2 * harmonics, samples]` matrix per
/// frequency with rows `sin(2 pi h f t), cos(2 pi h f t)` for `h = 1..`.
#[derive(Clone, Debug)]
pub struct ReferenceSet {
    pub freqs: Vec<f64>,
    pub fs: f64,
    pub n_samples: usize,
    pub n_harmonics: usize,
    pub refs: Vec<DMatrix<f64>>,
}

/// Builds references for `freqs`. Harmonics are dropped for a frequency
/// once `h * f` reaches `min(max_hz, fs / 2)`, keeping at least the
/// fundamental.
pub fn make_references(
    freqs: &[f64],
    fs: f64,
    n_samples: usize,
    n_harmonics: usize,
    max_hz: f64,
) -> Result<ReferenceSet> {
    if n_harmonics == 0 || n_samples == 0 || !(fs > 0.0) {
        return Err(Error::Parameter("references need harmonics, samples and fs > 0".into()));
    }
    let limit = max_hz.min(fs / 2.0);
    let mut refs = Vec::with_capacity(freqs.len());
    for &f in freqs {
        if !(f > 0.0 && f < limit) {
            return Err(Error::Parameter(format!("reference frequency {f} Hz outside (0, {limit})")));
        }
        let nh = (1..=n_harmonics).take_while(|&h| h as f64 * f < limit).count().max(1);
        let m = DMatrix::from_fn(2 * nh, n_samples, |r, k| {
            let h = (r / 2 + 1) as f64;
            let arg = 2.0 * PI * h * f * k as f64 / fs;
            if r % 2 == 0 {
                arg.sin()
            } else {
                arg.cos()
            }
        });
        refs.push(m);
    }
    Ok(ReferenceSet {
        freqs: freqs.to_vec(),
        fs,
        n_samples,
        n_harmonics,
        refs,
    })
}

#[derive(Clone, Debug)]
pub struct CcaResult {
    /// Canonical correlations in descending order.
    pub corrs: Vec<f64>,
    /// Projection vectors as columns, `[rows of X, k]` and `[rows of Y, k]`.
    pub x_weights: DMatrix<f64>,
    pub y_weights: DMatrix<f64>,
}

fn centered(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = m.clone();
    for mut row in c.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    c
}

fn whitener(c: &DMatrix<f64>, view: &str) -> Result<Cholesky<f64, Dyn>> {
    let n = c.nrows();
    let mean_diag = c.diagonal().mean();
    let mut reg = c.clone();
    for i in 0..n {
        reg[(i, i)] += RIDGE * mean_diag;
    }
    let chol = Cholesky::new(reg).ok_or_else(|| {
        Error::Numerical(format!("{view} covariance is not positive definite (mean variance {mean_diag:e})"))
    })?;
    let d = chol.l_dirty().diagonal();
    let (lo, hi) = d.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let cond = (hi / lo).powi(2);
    if !cond.is_finite() || cond > 1e15 {
        return Err(Error::Numerical(format!("{view} covariance is rank deficient (condition estimate {cond:e})")));
    }
    Ok(chol)
}

/// Canonical correlation analysis of `x: [p, n]` and `y: [q, n]` (rows are
/// variables, columns samples). Both views are centered; each covariance
/// gets a ridge of `1e-9` times its mean variance.
pub fn cca_corr(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<CcaResult> {
    let n = x.ncols();
    if y.ncols() != n {
        return Err(Error::dim(format!("views have {n} and {} samples", y.ncols())));
    }
    if n <= x.nrows() + y.nrows() {
        return Err(Error::dim(format!(
            "{n} samples are too few for {} + {} variables",
            x.nrows(),
            y.nrows()
        )));
    }
    let (xc, yc) = (centered(x), centered(y));
    let scale = 1.0 / (n - 1) as f64;
    let cxx = &xc * xc.transpose() * scale;
    let cyy = &yc * yc.transpose() * scale;
    let cxy = &xc * yc.transpose() * scale;
    let lx = whitener(&cxx, "first view")?;
    let ly = whitener(&cyy, "second view")?;
    // M = Lx^-1 Cxy Ly^-T
    let a = lx.l().solve_lower_triangular(&cxy).expect("triangular factor is invertible");
    let m = ly
        .l()
        .solve_lower_triangular(&a.transpose())
        .expect("triangular factor is invertible")
        .transpose();
    let svd = m.svd(true, true);
    let u = svd.u.expect("requested");
    let v_t = svd.v_t.expect("requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let k = x.nrows().min(y.nrows());
    let order = &order[..k];
    let corrs = order.iter().map(|&i| svd.singular_values[i].max(0.0)).collect();
    let u = DMatrix::from_fn(u.nrows(), k, |r, c| u[(r, order[c])]);
    let v = DMatrix::from_fn(v_t.ncols(), k, |r, c| v_t[(order[c], r)]);
    let x_weights = lx.l().tr_solve_lower_triangular(&u).expect("triangular factor is invertible");
    let y_weights = ly.l().tr_solve_lower_triangular(&v).expect("triangular factor is invertible");
    Ok(CcaResult {
        corrs,
        x_weights,
        y_weights,
    })
}

fn has_variance(x: &DMatrix<f64>) -> bool {
    x.row_iter().any(|r| {
        let first = r[0];
        r.iter().any(|&v| v != first)
    })
}

/// Largest canonical correlation of `epoch: [channels, samples]` with every
/// reference. An epoch without variance correlates with nothing.
pub fn cca_scores(epoch: &DMatrix<f64>, refs: &ReferenceSet) -> Result<Vec<f64>> {
    if epoch.ncols() != refs.n_samples {
        return Err(Error::dim(format!(
            "epoch has {} samples, references {}",
            epoch.ncols(),
            refs.n_samples
        )));
    }
    if !has_variance(epoch) {
        return Ok(vec![0.0; refs.refs.len()]);
    }
    refs.refs.iter().map(|r| Ok(cca_corr(epoch, r)?.corrs[0])).collect()
}

/// Index of the highest score, ties to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn cca_classify(epoch: &DMatrix<f64>, refs: &ReferenceSet) -> Result<usize> {
    Ok(argmax(&cca_scores(epoch, refs)?))
}

/// Sub-band weights `w(n) = n^-a + b` for `n = 1..=bands`.
pub fn fbcca_weights(bands: usize, a: f64, b: f64) -> Vec<f64> {
    (1..=bands).map(|n| (n as f64).powf(-a) + b).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FbccaParams {
    pub a: f64,
    pub b: f64,
    pub n_harmonics: usize,
    /// Upper limit for harmonic frequencies.
    pub max_hz: f64,
}

impl Default for FbccaParams {
    fn default() -> Self {
        FbccaParams {
            a: 1.25,
            b: 0.25,
            n_harmonics: 5,
            max_hz: 50.0,
        }
    }
}

/// Weighted sum of squared first correlations over sub-bands of
/// `epoch: [bands][channels, samples]`.
pub fn fbcca_scores(bands: &[DMatrix<f64>], refs: &ReferenceSet, params: &FbccaParams) -> Result<Vec<f64>> {
    let w = fbcca_weights(bands.len(), params.a, params.b);
    let mut total = vec![0.0; refs.refs.len()];
    for (band, &wn) in bands.iter().zip(&w) {
        for (t, r) in total.iter_mut().zip(cca_scores(band, refs)?) {
            *t += wn * r * r;
        }
    }
    Ok(total)
}

pub fn fbcca_classify(bands: &[DMatrix<f64>], refs: &ReferenceSet, params: &FbccaParams) -> Result<usize> {
    Ok(argmax(&fbcca_scores(bands, refs, params)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cca,
    Fbcca,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cca" => Ok(Method::Cca),
            "fbcca" => Ok(Method::Fbcca),
            other => Err(Error::Config(format!("unknown baseline method `{other}` (expected cca or fbcca)"))),
        }
    }
}

/// `[channels, samples]` matrix of band `band` of trial `i`.
pub fn band_matrix(epochs: &SubBandEpochs, i: usize, band: usize) -> DMatrix<f64> {
    let per = epochs.n_channels * epochs.n_samples;
    let t = epochs.trial(i);
    DMatrix::from_row_slice(epochs.n_channels, epochs.n_samples, &t[band * per..(band + 1) * per])
}

/// Predicted stimulus position for every trial. CCA looks at the first
/// (widest) band only; FBCCA uses all bands.
pub fn classify_epochs(epochs: &SubBandEpochs, method: Method, params: &FbccaParams) -> Result<Vec<usize>> {
    let freqs: Vec<f64> = epochs.stimuli.iter().map(|s| s.freq_hz).collect();
    let refs = make_references(&freqs, epochs.fs, epochs.n_samples, params.n_harmonics, params.max_hz)?;
    (0..epochs.n_trials)
        .map(|i| match method {
            Method::Cca => cca_classify(&band_matrix(epochs, i, 0), &refs),
            Method::Fbcca => {
                let bands: Vec<_> = (0..epochs.n_bands).map(|b| band_matrix(epochs, i, b)).collect();
                fbcca_classify(&bands, &refs, params)
            }
        })
        .collect()
}

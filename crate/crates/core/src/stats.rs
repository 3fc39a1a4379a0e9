//! Error summaries, normal Q-Q analysis and least-squares fits.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Residual tolerance (in units of the fitted slope, i.e. standard
/// deviations) for a Q-Q point to count as lying on the fit line.
pub const QQ_BAND_TOLERANCE: f64 = 0.2;

/// Inverse of the standard normal CDF (Wichura's AS 241, PPND16).
pub fn inverse_normal_cdf(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((r * 2509.080_928_730_122_7 + 33430.575_583_588_128) * r
            + 67265.770_927_008_7)
            * r
            + 45921.953_931_549_87)
            * r
            + 13731.693_765_509_461)
            * r
            + 1971.590_950_306_551_4)
            * r
            + 133.141_667_891_784_38)
            * r
            + 3.387_132_872_796_366_5;
        let den = ((((((r * 5226.495_278_852_546 + 28729.085_735_721_943) * r
            + 39307.895_800_092_71)
            * r
            + 21213.794_301_586_596)
            * r
            + 5394.196_021_424_751)
            * r
            + 687.187_007_492_057_9)
            * r
            + 42.313_330_701_600_91)
            * r
            + 1.0;
        return q * num / den;
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        let num = ((((((r * 7.745_450_142_783_414e-4 + 0.022_723_844_989_269_184) * r
            + 0.241_780_725_177_450_6)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_545)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((r * 1.050_750_071_644_416_8e-9 + 5.475_938_084_995_345e-4) * r
            + 0.015_198_666_563_616_457)
            * r
            + 0.148_103_976_427_480_08)
            * r
            + 0.689_767_334_985_1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_758_8)
            * r
            + 1.0;
        num / den
    } else {
        let r = r - 5.0;
        let num = ((((((r * 2.010_334_399_292_288_1e-7 + 2.711_555_568_743_487_6e-5) * r
            + 0.001_242_660_947_388_078_4)
            * r
            + 0.026_532_189_526_576_124)
            * r
            + 0.296_560_571_828_504_87)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((r * 2.044_263_103_389_939_8e-15 + 1.421_511_758_316_446e-7) * r
            + 1.846_318_317_510_054_8e-5)
            * r
            + 7.868_691_311_456_133e-4)
            * r
            + 0.014_875_361_290_850_615)
            * r
            + 0.136_929_880_922_735_8)
            * r
            + 0.599_832_206_555_887_9)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// Uniform draw in the open interval (0, 1) from 53 random bits.
pub fn open_uniform(rng: &mut impl RngCore) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// Standard normal draw by inverse-CDF sampling.
pub fn standard_normal(rng: &mut impl RngCore) -> f64 {
    inverse_normal_cdf(open_uniform(rng))
}

/// A labelled error sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSample {
    pub label: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q05: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub q95: f64,
    pub max: f64,
}

/// Quantile of sorted data by linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted_finite(values: &[f64]) -> Result<Vec<f64>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("error sample contains non-finite values".into()));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: values.len(),
        });
    }
    // sorting first makes the sums independent of input order
    let s = sorted_finite(values)?;
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let var = s.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Ok(Summary {
        n: s.len(),
        mean,
        std: var.sqrt(),
        min: s[0],
        q05: quantile_sorted(&s, 0.05),
        q25: quantile_sorted(&s, 0.25),
        median: quantile_sorted(&s, 0.5),
        q75: quantile_sorted(&s, 0.75),
        q95: quantile_sorted(&s, 0.95),
        max: s[s.len() - 1],
    })
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    Ok(quantile_sorted(&sorted_finite(values)?, 0.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Coefficient of determination; 0 when `y` has no variance.
    pub r2: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if x.len() < 2 || sxx <= 0.0 {
        return Err(Error::DegenerateX);
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 {
        let sse: f64 = x
            .iter()
            .zip(y)
            .map(|(a, b)| {
                let r = b - (intercept + slope * a);
                r * r
            })
            .sum();
        1.0 - sse / syy
    } else {
        0.0
    };
    Ok(LinearFit {
        slope,
        intercept,
        r2,
    })
}

/// Average ranks (ties share the mean rank).
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = rank;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    let (rx, ry) = (ranks(x), ranks(y));
    let fit = linear_fit(&rx, &ry)?;
    let sign = fit.slope.signum();
    Ok(sign * fit.r2.max(0.0).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QqPoint {
    pub theoretical: f64,
    pub empirical: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QqResult {
    pub points: Vec<QqPoint>,
    /// Fitted line `empirical = slope · z + intercept`; the slope estimates σ.
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Fraction of all points with `|z| ≤ 1` lying within the fit band.
    pub within_1sd: f64,
    /// Fraction of all points with `|z| ≤ 1.5` lying within the fit band.
    pub within_1_5sd: f64,
}

impl QqResult {
    pub fn band_fraction(&self, z_max: f64) -> f64 {
        let tol = QQ_BAND_TOLERANCE * self.slope.abs();
        let hits = self
            .points
            .iter()
            .filter(|p| {
                p.theoretical.abs() <= z_max
                    && (p.empirical - (self.slope * p.theoretical + self.intercept)).abs() <= tol
            })
            .count();
        hits as f64 / self.points.len() as f64
    }
}

/// Normal Q-Q analysis with `(i − 0.5)/n` plotting positions.
pub fn qq_normal(values: &[f64]) -> Result<QqResult> {
    if values.len() < 20 {
        return Err(Error::TooFewSamples {
            needed: 20,
            got: values.len(),
        });
    }
    let s = sorted_finite(values)?;
    let n = s.len() as f64;
    let points: Vec<QqPoint> = s
        .iter()
        .enumerate()
        .map(|(i, &e)| QqPoint {
            theoretical: inverse_normal_cdf((i as f64 + 0.5) / n),
            empirical: e,
        })
        .collect();
    let z: Vec<f64> = points.iter().map(|p| p.theoretical).collect();
    let fit = linear_fit(&z, &s)?;
    let mut res = QqResult {
        points,
        slope: fit.slope,
        intercept: fit.intercept,
        r2: fit.r2,
        within_1sd: 0.0,
        within_1_5sd: 0.0,
    };
    res.within_1sd = res.band_fraction(1.0);
    res.within_1_5sd = res.band_fraction(1.5);
    Ok(res)
}

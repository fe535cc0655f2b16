//! Alignment, structure and overlap metrics.

use serde::Serialize;

use crate::error::{check_dims, Error, Result};
use crate::grid::{fb_residual, folding_ratio, warp_nearest, warp_with_validity, FlowField, Image2D, Mask2D};

const MIN_VARIANCE: f64 = 1e-12;

fn region<'a>(a: &Image2D, b: &Image2D, valid: Option<&'a Mask2D>) -> Result<Option<&'a Mask2D>> {
    check_dims(a.dims(), b.dims())?;
    if let Some(m) = valid {
        check_dims(a.dims(), m.dims())?;
        if !m.any() {
            return Err(Error::UndefinedMetric("valid region is empty".into()));
        }
    }
    Ok(valid)
}

fn pairs<'a>(
    a: &'a Image2D,
    b: &'a Image2D,
    valid: Option<&'a Mask2D>,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    a.data()
        .iter()
        .zip(b.data())
        .enumerate()
        .filter(move |(i, _)| valid.is_none_or(|m| m.data()[*i]))
        .map(|(_, (x, y))| (*x, *y))
}

/// Mean absolute difference over `valid` (all pixels by default).
pub fn mae(a: &Image2D, b: &Image2D, valid: Option<&Mask2D>) -> Result<f64> {
    let valid = region(a, b, valid)?;
    let (sum, n) = pairs(a, b, valid).fold((0.0, 0usize), |(s, n), (x, y)| (s + (x - y).abs(), n + 1));
    Ok(sum / n as f64)
}

/// Zero-normalized cross-correlation.
pub fn ncc(a: &Image2D, b: &Image2D, valid: Option<&Mask2D>) -> Result<f64> {
    let valid = region(a, b, valid)?;
    let (sa, sb, n) = pairs(a, b, valid).fold((0.0, 0.0, 0usize), |(sa, sb, n), (x, y)| (sa + x, sb + y, n + 1));
    let n = n as f64;
    let (ma, mb) = (sa / n, sb / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in pairs(a, b, valid) {
        let (da, db) = (x - ma, y - mb);
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    let (cov, va, vb) = (cov / n, va / n, vb / n);
    if va < MIN_VARIANCE || vb < MIN_VARIANCE {
        return Err(Error::UndefinedMetric(format!(
            "NCC needs non-constant inputs (variances {va:e}, {vb:e})"
        )));
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    /// Odd side length of the box window.
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 7,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

/// Mean local SSIM over every box window that fits inside the image
/// (dynamic range 1).
pub fn ssim(a: &Image2D, b: &Image2D, p: &SsimParams) -> Result<f64> {
    check_dims(a.dims(), b.dims())?;
    let k = p.window;
    if k == 0 || k % 2 == 0 {
        return Err(Error::InvalidArgument(format!("SSIM window must be odd, got {k}")));
    }
    let (w, h) = a.dims();
    if w < k || h < k {
        return Err(Error::InvalidArgument(format!("image {w}x{h} smaller than SSIM window {k}")));
    }
    let c1 = p.k1 * p.k1;
    let c2 = p.k2 * p.k2;
    let (da, db) = (a.data(), b.data());
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - k {
        for x0 in 0..=w - k {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + k {
                for x in x0..x0 + k {
                    let (u, v) = (da[y * w + x], db[y * w + x]);
                    sa += u;
                    sb += v;
                    saa += u * u;
                    sbb += v * v;
                    sab += u * v;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = (saa / n - ma * ma).max(0.0);
            let vb = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// `2|a ∩ b| / (|a| + |b|)`.
pub fn dice(a: &Mask2D, b: &Mask2D) -> Result<f64> {
    check_dims(a.dims(), b.dims())?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    }
    if total == 0 {
        return Err(Error::UndefinedMetric("Dice of two empty masks".into()));
    }
    Ok(2.0 * inter as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricReport {
    pub mae: f64,
    pub ncc: f64,
    pub ssim: f64,
    /// Present when masks were supplied.
    pub dice: Option<f64>,
    pub fb_mean: f64,
    /// Mean folding ratio of the two fields.
    pub folding: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "mae,ncc,ssim,dice,fb_mean,folding";

    /// One CSV row; a missing Dice is an empty field.
    pub fn csv_row(&self) -> String {
        let dice = self.dice.map(|d| format!("{d:.6}")).unwrap_or_default();
        format!(
            "{:.6},{:.6},{:.6},{},{:.6},{:.6}",
            self.mae, self.ncc, self.ssim, dice, self.fb_mean, self.folding
        )
    }
}

/// Metrics averaged over both directions: `warp(i1, f01)` against `i0` and
/// `warp(i0, f10)` against `i1`. MAE and NCC skip border-clamped samples;
/// Dice compares nearest-warped masks.
pub fn evaluate_pair(
    i0: &Image2D,
    i1: &Image2D,
    f01: &FlowField,
    f10: &FlowField,
    masks: Option<(&Mask2D, &Mask2D)>,
) -> Result<MetricReport> {
    check_dims(i0.dims(), i1.dims())?;
    let (w01, v01) = warp_with_validity(i1, f01)?;
    let (w10, v10) = warp_with_validity(i0, f10)?;
    let sp = SsimParams::default();
    let mean = |a: f64, b: f64| 0.5 * (a + b);
    let dice = match masks {
        Some((m0, m1)) => {
            let d01 = dice(&warp_nearest(m1, f01)?, m0)?;
            let d10 = dice(&warp_nearest(m0, f10)?, m1)?;
            Some(mean(d01, d10))
        }
        None => None,
    };
    Ok(MetricReport {
        mae: mean(mae(&w01, i0, Some(&v01))?, mae(&w10, i1, Some(&v10))?),
        ncc: mean(ncc(&w01, i0, Some(&v01))?, ncc(&w10, i1, Some(&v10))?),
        ssim: mean(ssim(&w01, i0, &sp)?, ssim(&w10, i1, &sp)?),
        dice,
        fb_mean: fb_residual(f01, f10)?.mean,
        folding: mean(folding_ratio(f01), folding_ratio(f10)),
    })
}

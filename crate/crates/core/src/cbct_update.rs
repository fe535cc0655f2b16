//! Transfer of an ultrasound deformation field onto a CT slice.
//!
//! The raw ultrasound field is corrected for the probe's own convex
//! compression, embedded into the CT frame, attenuated with distance from the
//! ultrasound window and finally used to backward-warp the static slice.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::confidence::{confidence_pair, ConfidenceParams};
use crate::error::{check_dims, Error, Result};
use crate::flow::{estimate_bidirectional, select_candidate, EnergyWeights, PyramidSpec};
use crate::grid::{compose, fb_residual, folding_ratio, warp, FlowField, Image2D, Mask2D, ScalarMap};
use crate::rigid::RigidTransform2D;

/// Gaussian lateral profile of the probe indentation,
/// `P(x) = d_robot · exp(−(x − c_x)² / 2σ²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeProfile {
    /// Probe displacement magnitude, px.
    pub d_robot: f64,
    /// Lateral midpoint, px.
    pub c_x: f64,
    /// Curvature, px.
    pub sigma_probe: f64,
}

impl ProbeProfile {
    pub fn validate(&self, width: usize) -> Result<()> {
        if !(self.sigma_probe > 0.0 && self.sigma_probe.is_finite()) {
            return Err(Error::InvalidArgument("sigma_probe must be positive".into()));
        }
        if !(self.d_robot >= 0.0 && self.d_robot.is_finite()) {
            return Err(Error::InvalidArgument("d_robot must be non-negative".into()));
        }
        if !(self.c_x >= 0.0 && self.c_x <= (width.max(1) - 1) as f64) {
            return Err(Error::InvalidArgument(format!(
                "c_x {} outside image width {width}",
                self.c_x
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn at(&self, x: f64) -> f64 {
        let d = x - self.c_x;
        self.d_robot * (-(d * d) / (2.0 * self.sigma_probe * self.sigma_probe)).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferParams {
    /// Decay length of the deformation outside the ultrasound window, px.
    pub sigma_smooth: f64,
    /// Maps ultrasound pixel coordinates into the CT slice (rotation about
    /// the ultrasound origin).
    pub placement: RigidTransform2D,
}

impl Default for TransferParams {
    fn default() -> Self {
        Self {
            sigma_smooth: 40.0,
            placement: RigidTransform2D::IDENTITY,
        }
    }
}

impl TransferParams {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_smooth > 0.0 && self.sigma_smooth.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidArgument("sigma_smooth must be positive".into()))
        }
    }
}

pub fn probe_profile(p: &ProbeProfile, width: usize) -> Result<Vec<f64>> {
    if width == 0 {
        return Err(Error::InvalidArgument("profile width must be positive".into()));
    }
    p.validate(width)?;
    Ok((0..width).map(|x| p.at(x as f64)).collect())
}

/// Subtracts the probe profile from the vertical component, column by column.
pub fn correct_probe_compression(d_raw: &FlowField, profile: &[f64]) -> Result<FlowField> {
    let (w, h) = d_raw.dims();
    if profile.len() != w {
        return Err(Error::InvalidArgument(format!(
            "profile length {} does not match field width {w}",
            profile.len()
        )));
    }
    let data = d_raw
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| [v[0], v[1] - profile[i % w]])
        .collect();
    FlowField::new(w, h, data)
}

/// Resamples the ultrasound field into CT coordinates. Vectors are rotated by
/// the placement angle so they are expressed in CT axes; pixels outside the
/// transformed ultrasound region get zero displacement.
pub fn embed_field(
    d_geo: &FlowField,
    us_mask: &Mask2D,
    ct_width: usize,
    ct_height: usize,
    placement: &RigidTransform2D,
) -> Result<(FlowField, Mask2D)> {
    check_dims(d_geo.dims(), us_mask.dims())?;
    if ct_width < 2 || ct_height < 2 {
        return Err(Error::InvalidArgument("CT slice must be at least 2x2".into()));
    }
    let (w, h) = d_geo.dims();
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    let mut field = vec![[0.0; 2]; ct_width * ct_height];
    let mut mask = vec![false; ct_width * ct_height];
    for y in 0..ct_height {
        for x in 0..ct_width {
            let p = placement.inverse_point([x as f64, y as f64], [0.0, 0.0]);
            // tolerance absorbs rounding of exact placements (e.g. 90°)
            const EPS: f64 = 1e-9;
            if p[0] < -EPS || p[1] < -EPS || p[0] > max_x + EPS || p[1] > max_y + EPS {
                continue;
            }
            let ux = p[0].clamp(0.0, max_x);
            let uy = p[1].clamp(0.0, max_y);
            if !us_mask.get(ux.round() as usize, uy.round() as usize) {
                continue;
            }
            let i = y * ct_width + x;
            field[i] = placement.rotate(d_geo.sample(ux, uy));
            mask[i] = true;
        }
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyOverlap);
    }
    Ok((
        FlowField::new(ct_width, ct_height, field)?,
        Mask2D::new(ct_width, ct_height, mask)?,
    ))
}

const EDT_INF: f64 = 1e20;

/// 1D lower envelope of parabolas rooted at `f` (squared distances).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            // z[0] is -inf, so this never underflows k
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance from every pixel to the nearest `true` pixel.
pub fn edt(mask: &Mask2D) -> Result<ScalarMap> {
    if !mask.any() {
        return Err(Error::InvalidArgument(
            "distance transform needs at least one foreground pixel".into(),
        ));
    }
    let (w, h) = mask.dims();
    let n = w.max(h);
    let mut buf_in = vec![0.0; n];
    let mut buf_out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];

    let mut sq: Vec<f64> = mask
        .data()
        .iter()
        .map(|&m| if m { 0.0 } else { EDT_INF })
        .collect();
    for x in 0..w {
        for y in 0..h {
            buf_in[y] = sq[y * w + x];
        }
        edt_1d(&buf_in[..h], &mut buf_out[..h], &mut v, &mut z);
        for y in 0..h {
            sq[y * w + x] = buf_out[y];
        }
    }
    for y in 0..h {
        buf_in[..w].copy_from_slice(&sq[y * w..(y + 1) * w]);
        edt_1d(&buf_in[..w], &mut buf_out[..w], &mut v, &mut z);
        sq[y * w..(y + 1) * w].copy_from_slice(&buf_out[..w]);
    }
    ScalarMap::new(w, h, sq.into_iter().map(f64::sqrt).collect())
}

/// `W = exp(−D / σ_smooth)`.
pub fn decay_weight(dist: &ScalarMap, sigma_smooth: f64) -> Result<ScalarMap> {
    if !(sigma_smooth > 0.0) {
        return Err(Error::InvalidArgument("sigma_smooth must be positive".into()));
    }
    if dist.data().iter().any(|&d| d < 0.0) {
        return Err(Error::InvalidArgument("distances must be non-negative".into()));
    }
    ScalarMap::new(
        dist.width(),
        dist.height(),
        dist.data().iter().map(|d| (-d / sigma_smooth).exp()).collect(),
    )
}

/// Pointwise `D_pad ⊙ W` on both components.
pub fn final_field(d_pad: &FlowField, w: &ScalarMap) -> Result<FlowField> {
    check_dims(d_pad.dims(), w.dims())?;
    let data = d_pad
        .data()
        .iter()
        .zip(w.data())
        .map(|(v, &s)| [v[0] * s, v[1] * s])
        .collect();
    FlowField::new(d_pad.width(), d_pad.height(), data)
}

pub fn update_slice(ct0: &Image2D, d_final: &FlowField) -> Result<Image2D> {
    warp(ct0, d_final)
}

/// Everything `update_pipeline` needs besides the images.
#[derive(Debug, Clone, Default)]
pub struct PipelineParams {
    pub confidence: ConfidenceParams,
    pub pyramid: PyramidSpec,
    pub energy: EnergyWeights,
    pub transfer: TransferParams,
    /// Ultrasound region inside the frame; defaults to the whole frame.
    pub us_mask: Option<Mask2D>,
    /// Optional intermediate frame for the bisect candidate.
    pub mid_frame: Option<Image2D>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTiming {
    pub stage: &'static str,
    pub ms: f64,
}

#[derive(Debug, Clone)]
pub struct UpdateReport {
    pub timings: Vec<StageTiming>,
    pub total_ms: f64,
    /// Mean FB residual of the estimated ultrasound flow pair, px.
    pub fb_mean: f64,
    pub folding_01: f64,
    pub folding_10: f64,
    /// Index of the selected candidate (0 = direct, 1 = bisect).
    pub selected: usize,
    pub max_displacement: f64,
}

impl UpdateReport {
    pub const CSV_HEADER: &'static str = "confidence_ms,estimate_ms,select_ms,correct_ms,embed_ms,edt_ms,weight_ms,final_ms,warp_ms,total_ms,fb_mean,folding_01,folding_10,selected,max_displacement";

    pub fn csv_row(&self) -> String {
        let mut cols: Vec<String> = self.timings.iter().map(|t| format!("{:.3}", t.ms)).collect();
        cols.push(format!("{:.3}", self.total_ms));
        cols.push(format!("{:.6}", self.fb_mean));
        cols.push(format!("{:.6}", self.folding_01));
        cols.push(format!("{:.6}", self.folding_10));
        cols.push(self.selected.to_string());
        cols.push(format!("{:.6}", self.max_displacement));
        cols.join(",")
    }
}

#[derive(Debug, Clone)]
pub struct UpdateOutput {
    pub updated: Image2D,
    pub d_final: FlowField,
    /// Raw ultrasound flow (current → previous frame) before correction.
    pub d_raw: FlowField,
    pub ct_mask: Mask2D,
    pub report: UpdateReport,
}

struct Stopwatch {
    start: Instant,
    last: Instant,
    timings: Vec<StageTiming>,
}

impl Stopwatch {
    fn new() -> Self {
        let now = Instant::now();
        Self {
            start: now,
            last: now,
            timings: Vec::new(),
        }
    }

    fn lap(&mut self, stage: &'static str) {
        let now = Instant::now();
        // clamp to a positive floor so sub-resolution stages still register
        let ms = ((now - self.last).as_secs_f64() * 1e3).max(1e-6);
        self.timings.push(StageTiming { stage, ms });
        self.last = now;
    }
}

/// Full ultrasound-to-CT update for one frame pair.
///
/// The CT is brought to the current frame, so the raw field is the
/// current → previous flow (`F10` with `i_prev` as frame 0).
pub fn update_pipeline(
    ct0: &Image2D,
    i_prev: &Image2D,
    i_curr: &Image2D,
    probe: &ProbeProfile,
    params: &PipelineParams,
) -> Result<UpdateOutput> {
    check_dims(i_prev.dims(), i_curr.dims())?;
    params.transfer.validate()?;
    let (w, h) = i_prev.dims();
    let us_mask = match &params.us_mask {
        Some(m) => {
            check_dims((w, h), m.dims())?;
            m.clone()
        }
        None => Mask2D::filled(w, h, true),
    };
    let mut sw = Stopwatch::new();

    let (conf_prev, conf_curr) = confidence_pair(i_prev, i_curr, &params.confidence)?;
    sw.lap("confidence");

    let (f01, f10) = estimate_bidirectional(
        i_prev,
        i_curr,
        &conf_prev,
        &conf_curr,
        &params.pyramid,
        &params.energy,
    )?;
    sw.lap("estimate");

    let mut selected = 0;
    let mut d_raw = f10.clone();
    if let Some(mid) = &params.mid_frame {
        check_dims((w, h), mid.dims())?;
        let (conf_mid, _) = confidence_pair(mid, mid, &params.confidence)?;
        // current → mid → previous, composed in the backward convention
        let (_, f_curr_mid) =
            estimate_bidirectional(mid, i_curr, &conf_mid, &conf_curr, &params.pyramid, &params.energy)?;
        let (_, f_mid_prev) =
            estimate_bidirectional(i_prev, mid, &conf_prev, &conf_mid, &params.pyramid, &params.energy)?;
        let bisect = compose(&f_curr_mid, &f_mid_prev)?;
        let candidates = [f10.clone(), bisect];
        let (idx, best) = select_candidate(i_curr, i_prev, &candidates)?;
        selected = idx;
        d_raw = best.clone();
    }
    sw.lap("select");

    let profile = probe_profile(probe, w)?;
    let d_geo = correct_probe_compression(&d_raw, &profile)?;
    sw.lap("correct");

    let (d_pad, ct_mask) = embed_field(
        &d_geo,
        &us_mask,
        ct0.width(),
        ct0.height(),
        &params.transfer.placement,
    )?;
    sw.lap("embed");

    let dist = edt(&ct_mask)?;
    sw.lap("edt");

    let weight = decay_weight(&dist, params.transfer.sigma_smooth)?;
    sw.lap("weight");

    let d_final = final_field(&d_pad, &weight)?;
    sw.lap("final");

    let updated = update_slice(ct0, &d_final)?;
    sw.lap("warp");

    let fb = fb_residual(&f01, &f10)?;
    let total_ms = (sw.last - sw.start).as_secs_f64() * 1e3;
    let report = UpdateReport {
        timings: sw.timings,
        total_ms,
        fb_mean: fb.mean,
        folding_01: folding_ratio(&f01),
        folding_10: folding_ratio(&f10),
        selected,
        max_displacement: d_final.max_norm(),
    };
    Ok(UpdateOutput {
        updated,
        d_final,
        d_raw,
        ct_mask,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe() -> ProbeProfile {
        ProbeProfile {
            d_robot: 4.0,
            c_x: 20.0,
            sigma_probe: 6.0,
        }
    }

    #[test]
    fn profile_closed_forms() {
        let p = probe();
        let prof = probe_profile(&p, 41).unwrap();
        assert_eq!(prof[20], 4.0);
        let e = 4.0 * (-0.5f64).exp();
        assert!((prof[14] - e).abs() < 1e-9);
        assert!((prof[26] - e).abs() < 1e-9);
        let zero = ProbeProfile { d_robot: 0.0, ..p };
        assert!(probe_profile(&zero, 41).unwrap().iter().all(|&v| v == 0.0));
        assert!(probe_profile(&ProbeProfile { sigma_probe: 0.0, ..p }, 41).is_err());
        assert!(probe_profile(&ProbeProfile { c_x: 50.0, ..p }, 41).is_err());
    }

    #[test]
    fn probe_correction_cancels_and_isolates_x() {
        let p = probe();
        let prof = probe_profile(&p, 32).unwrap();
        let d = FlowField::from_fn(32, 10, |x, _| [0.0, prof[x]]).unwrap();
        let out = correct_probe_compression(&d, &prof).unwrap();
        assert!(out.data().iter().all(|v| *v == [0.0, 0.0]));

        let f = FlowField::from_fn(32, 10, |x, y| [x as f64 * 0.37 - y as f64, 1.0]).unwrap();
        assert_eq!(correct_probe_compression(&f, &vec![0.0; 32]).unwrap(), f);
        let out = correct_probe_compression(&f, &prof).unwrap();
        for (a, b) in out.data().iter().zip(f.data()) {
            assert_eq!(a[0].to_bits(), b[0].to_bits());
        }
        assert!(correct_probe_compression(&f, &prof[..31]).is_err());
    }

    #[test]
    fn embed_identity_translation_rotation() {
        let f = FlowField::from_fn(8, 6, |x, y| [x as f64, y as f64 * 0.5]).unwrap();
        let mut mdata = vec![true; 48];
        mdata[0] = false;
        let mask = Mask2D::new(8, 6, mdata).unwrap();
        let (pad, m) = embed_field(&f, &mask, 8, 6, &RigidTransform2D::IDENTITY).unwrap();
        assert_eq!(pad.get(0, 0), [0.0, 0.0]);
        assert!(!m.get(0, 0));
        for y in 0..6 {
            for x in 0..8 {
                if (x, y) != (0, 0) {
                    assert_eq!(pad.get(x, y), f.get(x, y));
                }
            }
        }

        let full = Mask2D::filled(8, 6, true);
        let t = RigidTransform2D::new(10.0, 0.0, 0.0).unwrap();
        let (pad, m) = embed_field(&f, &full, 24, 6, &t).unwrap();
        for y in 0..6 {
            for x in 0..24 {
                if (10..18).contains(&x) {
                    assert_eq!(pad.get(x, y), f.get(x - 10, y));
                    assert!(m.get(x, y));
                } else {
                    assert_eq!(pad.get(x, y), [0.0, 0.0]);
                    assert!(!m.get(x, y));
                }
            }
        }

        let c = FlowField::constant(8, 8, [1.0, 0.0]);
        let rot = RigidTransform2D::from_degrees(20.0, 0.0, 90.0).unwrap();
        let (pad, m) = embed_field(&c, &Mask2D::filled(8, 8, true), 30, 30, &rot).unwrap();
        assert_eq!(m.count(), 64);
        for (v, &inside) in pad.data().iter().zip(m.data()) {
            if inside {
                assert!(v[0].abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
            }
        }

        let far = RigidTransform2D::new(500.0, 0.0, 0.0).unwrap();
        assert!(matches!(
            embed_field(&c, &Mask2D::filled(8, 8, true), 30, 30, &far),
            Err(Error::EmptyOverlap)
        ));
    }

    fn brute_edt(mask: &Mask2D) -> Vec<f64> {
        let (w, h) = mask.dims();
        let pts: Vec<(usize, usize)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|&(x, y)| mask.get(x, y))
            .collect();
        (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| {
                pts.iter()
                    .map(|&(px, py)| (x as f64 - px as f64).hypot(y as f64 - py as f64))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn edt_closed_forms() {
        let all = Mask2D::filled(5, 4, true);
        assert!(edt(&all).unwrap().data().iter().all(|&d| d == 0.0));

        let mut data = vec![false; 9];
        data[0] = true;
        let m = Mask2D::new(3, 3, data).unwrap();
        let d = edt(&m).unwrap();
        let s2 = 2f64.sqrt();
        let s5 = 5f64.sqrt();
        let expected = [0.0, 1.0, 2.0, 1.0, s2, s5, 2.0, s5, 2.0 * s2];
        for (a, b) in d.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!(edt(&Mask2D::filled(3, 3, false)).is_err());
    }

    #[test]
    fn edt_matches_brute_force() {
        let mut s = 12345u64;
        for _ in 0..20 {
            let data = (0..23 * 17)
                .map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (s >> 33) % 17 == 0
                })
                .collect();
            let mask = Mask2D::new(23, 17, data).unwrap();
            if !mask.any() {
                continue;
            }
            let d = edt(&mask).unwrap();
            for (a, b) in d.data().iter().zip(brute_edt(&mask)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn decay_and_final_field() {
        let dist = ScalarMap::new(3, 1, vec![0.0, 40.0, 80.0]).unwrap();
        let w = decay_weight(&dist, 40.0).unwrap();
        assert_eq!(w.get(0, 0), 1.0);
        assert!((w.get(1, 0) - 0.36787944117144233).abs() < 1e-12);
        assert!(w.get(2, 0) < w.get(1, 0));
        assert!(decay_weight(&dist, 0.0).is_err());

        let f = FlowField::constant(2, 2, [2.0, -4.0]);
        let half = ScalarMap::new(2, 2, vec![0.5; 4]).unwrap();
        assert!(final_field(&f, &half).unwrap().data().iter().all(|v| *v == [1.0, -2.0]));
        let one = ScalarMap::new(2, 2, vec![1.0; 4]).unwrap();
        assert_eq!(final_field(&f, &one).unwrap(), f);
        assert!(final_field(&f, &dist).is_err());
    }

    #[test]
    fn update_slice_zero_field() {
        let ct = Image2D::from_fn(9, 9, |x, y| ((x * y) % 7) as f64 / 6.0).unwrap();
        assert_eq!(update_slice(&ct, &FlowField::zeros(9, 9)).unwrap(), ct);
        assert!(update_slice(&ct, &FlowField::zeros(8, 9)).is_err());
    }
}

//! Dense bidirectional deformation estimation.
//!
//! Coarse-to-fine: a correlation volume over hand-crafted patch descriptors
//! gives a discrete initialization at the coarsest pyramid level; every level
//! then refines the field by minimizing a variational energy made of a
//! confidence-weighted Charbonnier photometric term, edge-aware smoothness, a
//! Jacobian folding penalty and an optional ℓ1 distillation term towards a
//! pseudo-label flow.

use serde::{Deserialize, Serialize};

use crate::confidence::ConfidenceMap;
use crate::error::{check_dims, Error, Result};
use crate::grid::{
    bilinear, bilinear_vec, compose, gradient, gradient_magnitude, warp_with_validity, FlowField,
    Image2D,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyWeights {
    pub lambda_flow: f64,
    pub lambda_photo: f64,
    pub lambda_reg: f64,
    pub charbonnier_eps: f64,
    /// Edge sensitivity of the smoothness weight `exp(−κ|∇I₀|)`.
    pub edge_kappa: f64,
    /// Share of the regularizer given to the folding penalty.
    pub fold_weight: f64,
}

impl Default for EnergyWeights {
    fn default() -> Self {
        Self {
            lambda_flow: 1.0,
            lambda_photo: 0.2,
            lambda_reg: 0.05,
            charbonnier_eps: 1e-3,
            edge_kappa: 10.0,
            fold_weight: 0.5,
        }
    }
}

impl EnergyWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [
            self.lambda_flow,
            self.lambda_photo,
            self.lambda_reg,
            self.edge_kappa,
        ]
        .iter()
        .all(|v| *v >= 0.0 && v.is_finite())
            && self.charbonnier_eps > 0.0
            && (0.0..=1.0).contains(&self.fold_weight);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("energy weights out of range: {self:?}")))
        }
    }
}

/// Pyramid layout plus the matching/refinement settings applied per level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PyramidSpec {
    pub levels: usize,
    pub blur_sigma: f64,
    /// Descriptor patch radius used at the coarsest level.
    pub patch_radius: usize,
    /// Correlation search radius at the coarsest level.
    pub corr_radius: usize,
    /// Primal–dual iterations per level (split across three outer warps).
    pub iters: usize,
    /// Ratio of primal to dual step sizes.
    pub step: f64,
}

impl Default for PyramidSpec {
    fn default() -> Self {
        Self {
            levels: 4,
            blur_sigma: 1.0,
            patch_radius: 3,
            corr_radius: 4,
            iters: 30,
            step: 128.0,
        }
    }
}

impl PyramidSpec {
    /// Downsampling ratio between consecutive levels.
    pub const SCALE_FACTOR: usize = 2;
    pub const MIN_LEVEL_SIZE: usize = 8;

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::InvalidArgument("pyramid needs at least one level".into()));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::InvalidArgument("blur_sigma must be non-negative".into()));
        }
        if self.patch_radius == 0 || self.iters == 0 || !(self.step > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid estimator settings: {self:?}")));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// pyramid

/// Gaussian taps at half-pixel offsets `i − ½`, `i ∈ 1−r..=r`, so each coarse
/// pixel sits midway between two fine ones.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![0.5, 0.5];
    }
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (1 - r..=r)
        .map(|i| {
            let d = i as f64 - 0.5;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= s;
    }
    k
}

/// Separable blur with border replication followed by 2× decimation.
fn blur_decimate(data: &[f64], w: usize, h: usize, sigma: f64) -> (Vec<f64>, usize, usize) {
    let k = gaussian_kernel(sigma);
    // first tap sits at offset 1 − r
    let r = (k.len() / 2) as i64 - 1;
    let (nw, nh) = (w / 2, h / 2);
    // horizontal pass only at the kept columns
    let mut tmp = vec![0.0; nw * h];
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        for xo in 0..nw {
            let xc = (2 * xo) as i64;
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let xs = (xc + j as i64 - r).clamp(0, w as i64 - 1) as usize;
                acc += kv * row[xs];
            }
            tmp[y * nw + xo] = acc;
        }
    }
    let mut out = vec![0.0; nw * nh];
    for yo in 0..nh {
        let yc = (2 * yo) as i64;
        for xo in 0..nw {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let ys = (yc + j as i64 - r).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[ys * nw + xo];
            }
            out[yo * nw + xo] = acc;
        }
    }
    (out, nw, nh)
}

fn check_levels(w: usize, h: usize, levels: usize) -> Result<()> {
    let shift = levels.saturating_sub(1) as u32;
    let cw = w.checked_shr(shift).unwrap_or(0);
    let ch = h.checked_shr(shift).unwrap_or(0);
    if cw < PyramidSpec::MIN_LEVEL_SIZE || ch < PyramidSpec::MIN_LEVEL_SIZE {
        return Err(Error::InvalidArgument(format!(
            "{w}x{h} image too small for {levels} pyramid levels (coarsest {cw}x{ch} < 8x8)"
        )));
    }
    Ok(())
}

/// Level 0 is the input; each further level is blurred then decimated by 2.
pub fn build_pyramid(img: &Image2D, spec: &PyramidSpec) -> Result<Vec<Image2D>> {
    spec.validate()?;
    let (w, h) = img.dims();
    check_levels(w, h, spec.levels)?;
    let mut out = vec![img.clone()];
    for _ in 1..spec.levels {
        let prev = out.last().unwrap();
        let (d, nw, nh) = blur_decimate(prev.data(), prev.width(), prev.height(), spec.blur_sigma);
        out.push(Image2D::new(nw, nh, d)?);
    }
    Ok(out)
}

fn confidence_pyramid(conf: &ConfidenceMap, spec: &PyramidSpec) -> Result<Vec<ConfidenceMap>> {
    let mut out = vec![conf.clone()];
    for _ in 1..spec.levels {
        let prev = out.last().unwrap();
        let (d, nw, nh) = blur_decimate(prev.data(), prev.width(), prev.height(), spec.blur_sigma);
        let d = d.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        out.push(ConfidenceMap::new(nw, nh, d)?);
    }
    Ok(out)
}

fn downsample_flow(f: &FlowField, levels: usize) -> Result<Vec<FlowField>> {
    let mut out = vec![f.clone()];
    for _ in 1..levels {
        let prev = out.last().unwrap();
        let (w, h) = prev.dims();
        let (nw, nh) = (w / 2, h / 2);
        let data = (0..nh)
            .flat_map(|y| (0..nw).map(move |x| (x, y)))
            .map(|(x, y)| {
                let mut acc = [0.0; 2];
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let v = prev.get(2 * x + dx, 2 * y + dy);
                    acc[0] += v[0];
                    acc[1] += v[1];
                }
                // block mean, halved for the coarser grid
                [0.125 * acc[0], 0.125 * acc[1]]
            })
            .collect();
        out.push(FlowField::new(nw, nh, data)?);
    }
    Ok(out)
}

fn upsample_flow(f: &FlowField, w: usize, h: usize) -> FlowField {
    let (cw, ch) = f.dims();
    let data = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| {
            let v = bilinear_vec(f.data(), cw, ch, 0.5 * x as f64 - 0.25, 0.5 * y as f64 - 0.25);
            [2.0 * v[0], 2.0 * v[1]]
        })
        .collect();
    FlowField::new(w, h, data).expect("upsampled flow is finite")
}

// ---------------------------------------------------------------------------
// descriptors and correlation

/// Per-pixel descriptors over `[I, |∇I|]` patches.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn descriptor(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }
}

/// Concatenated intensity and gradient-magnitude patches, each half
/// zero-mean, then scaled to unit norm. Flat patches become zero vectors.
pub fn extract_features(img: &Image2D, patch_radius: usize) -> Result<FeatureMap> {
    if patch_radius == 0 {
        return Err(Error::InvalidArgument("patch_radius must be at least 1".into()));
    }
    let (w, h) = img.dims();
    let grad = gradient_magnitude(img);
    let side = 2 * patch_radius + 1;
    let half = side * side;
    let channels = 2 * half;
    let r = patch_radius as i64;
    let mut data = vec![0.0; w * h * channels];
    let mut desc = vec![0.0; channels];
    for y in 0..h {
        for x in 0..w {
            let mut k = 0;
            for dy in -r..=r {
                let ys = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                for dx in -r..=r {
                    let xs = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    desc[k] = img.get(xs, ys);
                    desc[half + k] = grad.get(xs, ys);
                    k += 1;
                }
            }
            for part in desc.chunks_mut(half) {
                let mean = part.iter().sum::<f64>() / half as f64;
                for v in part.iter_mut() {
                    *v -= mean;
                }
            }
            let energy: f64 = desc.iter().map(|v| v * v).sum();
            let out = &mut data[(y * w + x) * channels..(y * w + x + 1) * channels];
            if energy / channels as f64 >= 1e-8 {
                let inv = 1.0 / energy.sqrt();
                for (o, v) in out.iter_mut().zip(&desc) {
                    *o = v * inv;
                }
            }
        }
    }
    Ok(FeatureMap {
        width: w,
        height: h,
        channels,
        data,
    })
}

/// Local correlation scores `⟨f0(x), f1(x+Δ)⟩ / √C` for `Δ ∈ [−r, r]²`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationVolume {
    width: usize,
    height: usize,
    radius: usize,
    scores: Vec<f64>,
}

impl CorrelationVolume {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Scores of pixel `(x, y)`, indexed `(dy + r) * side + (dx + r)`.
    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        let n = self.side() * self.side();
        let i = (y * self.width + x) * n;
        &self.scores[i..i + n]
    }

    pub fn score(&self, x: usize, y: usize, dx: i64, dy: i64) -> f64 {
        let r = self.radius as i64;
        let s = self.side();
        self.at(x, y)[((dy + r) as usize) * s + (dx + r) as usize]
    }
}

pub fn correlation_volume(
    f0: &FeatureMap,
    f1: &FeatureMap,
    radius: usize,
) -> Result<CorrelationVolume> {
    check_dims((f0.width, f0.height), (f1.width, f1.height))?;
    if f0.channels != f1.channels {
        return Err(Error::InvalidArgument(format!(
            "feature channel mismatch: {} vs {}",
            f0.channels, f1.channels
        )));
    }
    let (w, h) = (f0.width, f0.height);
    let side = 2 * radius + 1;
    let r = radius as i64;
    let norm = 1.0 / (f0.channels as f64).sqrt();
    let mut scores = Vec::with_capacity(w * h * side * side);
    for y in 0..h {
        for x in 0..w {
            let a = f0.descriptor(x, y);
            for dy in -r..=r {
                let ys = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                for dx in -r..=r {
                    let xs = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    let b = f1.descriptor(xs, ys);
                    let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                    scores.push(dot * norm);
                }
            }
        }
    }
    Ok(CorrelationVolume {
        width: w,
        height: h,
        radius,
        scores,
    })
}

/// Parabolic vertex offset through three samples, limited to ±0.5.
fn parabolic_offset(left: f64, mid: f64, right: f64) -> f64 {
    let denom = left - 2.0 * mid + right;
    if denom < 0.0 {
        (0.5 * (left - right) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

/// Per-pixel arg-max displacement with separable parabolic sub-pixel fit.
/// Ties go to the smaller `‖Δ‖`, then to the lexicographically smaller `(Δx, Δy)`.
pub fn coarse_match(cv: &CorrelationVolume) -> FlowField {
    let (w, h) = (cv.width, cv.height);
    let r = cv.radius as i64;
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let mut best = (f64::NEG_INFINITY, 0i64, 0i64);
            for dy in -r..=r {
                for dx in -r..=r {
                    let s = cv.score(x, y, dx, dy);
                    let better = s > best.0
                        || (s == best.0 && {
                            let n_new = dx * dx + dy * dy;
                            let n_old = best.1 * best.1 + best.2 * best.2;
                            n_new < n_old || (n_new == n_old && (dx, dy) < (best.1, best.2))
                        });
                    if better {
                        best = (s, dx, dy);
                    }
                }
            }
            let (s0, bx, by) = best;
            let mut fx = bx as f64;
            let mut fy = by as f64;
            if bx > -r && bx < r {
                fx += parabolic_offset(cv.score(x, y, bx - 1, by), s0, cv.score(x, y, bx + 1, by));
            }
            if by > -r && by < r {
                fy += parabolic_offset(cv.score(x, y, bx, by - 1), s0, cv.score(x, y, bx, by + 1));
            }
            data.push([fx, fy]);
        }
    }
    FlowField::new(w, h, data).expect("match displacements are finite")
}

// ---------------------------------------------------------------------------
// energy

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyTerms {
    pub total: f64,
    pub photo: f64,
    pub smooth: f64,
    pub fold: f64,
    pub flow: f64,
}

fn edge_weights(i0: &Image2D, kappa: f64) -> Vec<f64> {
    gradient_magnitude(i0)
        .data()
        .iter()
        .map(|g| (-kappa * g).exp())
        .collect()
}

/// Forward-difference anisotropic TV with per-pixel edge weights.
fn smooth_term(f: &[[f64; 2]], w: usize, h: usize, edge: &[f64]) -> f64 {
    let mut acc = 0.0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut s = 0.0;
            if x + 1 < w {
                s += (f[i + 1][0] - f[i][0]).abs() + (f[i + 1][1] - f[i][1]).abs();
            }
            if y + 1 < h {
                s += (f[i + w][0] - f[i][0]).abs() + (f[i + w][1] - f[i][1]).abs();
            }
            acc += edge[i] * s;
        }
    }
    acc
}

/// Central-difference Jacobian of interior pixel `i`: `(∂x u, ∂y u, ∂x v, ∂y v)`.
#[inline]
fn interior_jacobian(f: &[[f64; 2]], i: usize, w: usize) -> [f64; 4] {
    [
        0.5 * (f[i + 1][0] - f[i - 1][0]),
        0.5 * (f[i + w][0] - f[i - w][0]),
        0.5 * (f[i + 1][1] - f[i - 1][1]),
        0.5 * (f[i + w][1] - f[i - w][1]),
    ]
}

#[inline]
fn det_of(j: [f64; 4]) -> f64 {
    (1.0 + j[0]) * (1.0 + j[3]) - j[1] * j[2]
}

/// Sum over interior pixels of `max(0, −det)²`.
fn fold_sum(f: &[[f64; 2]], w: usize, h: usize) -> f64 {
    let mut acc = 0.0;
    for y in 1..h.saturating_sub(1) {
        for x in 1..w - 1 {
            let m = (-det_of(interior_jacobian(f, y * w + x, w))).max(0.0);
            acc += m * m;
        }
    }
    acc
}

/// Gradient of `fold_sum`, scaled by `scale`, accumulated into `g`.
/// Returns whether any pixel folds.
fn fold_gradient(f: &[[f64; 2]], w: usize, h: usize, scale: f64, g: &mut [[f64; 2]]) -> bool {
    let mut any = false;
    for y in 1..h.saturating_sub(1) {
        for x in 1..w - 1 {
            let i = y * w + x;
            let j = interior_jacobian(f, i, w);
            let m = (-det_of(j)).max(0.0);
            if m == 0.0 {
                continue;
            }
            any = true;
            // d(m²)/d(jacobian entries), with m = −det
            let k = 2.0 * m * scale;
            let du_dx = -k * (1.0 + j[3]);
            let du_dy = k * j[2];
            let dv_dx = k * j[1];
            let dv_dy = -k * (1.0 + j[0]);
            g[i + 1][0] += 0.5 * du_dx;
            g[i - 1][0] -= 0.5 * du_dx;
            g[i + w][0] += 0.5 * du_dy;
            g[i - w][0] -= 0.5 * du_dy;
            g[i + 1][1] += 0.5 * dv_dx;
            g[i - 1][1] -= 0.5 * dv_dx;
            g[i + w][1] += 0.5 * dv_dy;
            g[i - w][1] -= 0.5 * dv_dy;
        }
    }
    any
}

fn interior_count(w: usize, h: usize) -> usize {
    w.saturating_sub(2) * h.saturating_sub(2)
}

fn check_energy_inputs(
    i0: &Image2D,
    i1: &Image2D,
    f: &FlowField,
    conf: &ConfidenceMap,
    pseudo: Option<&FlowField>,
) -> Result<()> {
    check_dims(i0.dims(), i1.dims())?;
    check_dims(i0.dims(), f.dims())?;
    check_dims(i0.dims(), conf.dims())?;
    if let Some(p) = pseudo {
        check_dims(i0.dims(), p.dims())?;
    }
    if conf.data().iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::InvalidArgument("confidence outside [0, 1]".into()));
    }
    Ok(())
}

/// Total energy and its four terms; each term is a per-pixel mean (the
/// folding penalty averages over interior pixels).
pub fn energy(
    i0: &Image2D,
    i1: &Image2D,
    f: &FlowField,
    conf: &ConfidenceMap,
    w: &EnergyWeights,
    pseudo: Option<&FlowField>,
) -> Result<EnergyTerms> {
    check_energy_inputs(i0, i1, f, conf, pseudo)?;
    w.validate()?;
    let edge = edge_weights(i0, w.edge_kappa);
    Ok(energy_with_edges(i0, i1, f, conf, w, pseudo, &edge))
}

fn energy_with_edges(
    i0: &Image2D,
    i1: &Image2D,
    f: &FlowField,
    conf: &ConfidenceMap,
    w: &EnergyWeights,
    pseudo: Option<&FlowField>,
    edge: &[f64],
) -> EnergyTerms {
    let (width, height) = i0.dims();
    let n = (width * height) as f64;
    let (warped, _) = warp_with_validity(i1, f).expect("shapes checked");
    let eps2 = w.charbonnier_eps * w.charbonnier_eps;
    let photo = warped
        .data()
        .iter()
        .zip(i0.data())
        .zip(conf.data())
        .map(|((a, b), c)| {
            let r = a - b;
            c * (r * r + eps2).sqrt()
        })
        .sum::<f64>()
        / n;
    let smooth = smooth_term(f.data(), width, height, edge) / n;
    let n_int = interior_count(width, height);
    let fold = if n_int > 0 {
        fold_sum(f.data(), width, height) / n_int as f64
    } else {
        0.0
    };
    let flow = match pseudo {
        Some(p) => {
            f.data()
                .iter()
                .zip(p.data())
                .map(|(a, b)| (a[0] - b[0]).abs() + (a[1] - b[1]).abs())
                .sum::<f64>()
                / n
        }
        None => 0.0,
    };
    let total = w.lambda_photo * photo
        + w.lambda_reg * ((1.0 - w.fold_weight) * smooth + w.fold_weight * fold)
        + w.lambda_flow * flow;
    EnergyTerms {
        total,
        photo,
        smooth,
        fold,
        flow,
    }
}

// ---------------------------------------------------------------------------
// variational refinement

const OUTER_WARPS: usize = 3;
/// Largest step of the explicit folding update.
const FOLD_STEP: f64 = 2.0;

/// Per-pixel data of the photometric term linearized around `base`:
/// `ρ(f) = r0 + G · (f − base)`.
struct Linearization {
    base: Vec<[f64; 2]>,
    r0: Vec<f64>,
    grad: Vec<[f64; 2]>,
    /// `‖G‖²`, zero where the gradient vanishes.
    g2: Vec<f64>,
}

impl Linearization {
    fn new(i0: &Image2D, i1: &Image2D, grad1: &crate::grid::GradientField, f: &[[f64; 2]]) -> Self {
        let (w, h) = i0.dims();
        let mut r0 = Vec::with_capacity(w * h);
        let mut grad = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let sx = x as f64 + f[i][0];
                let sy = y as f64 + f[i][1];
                r0.push(bilinear(i1.data(), w, h, sx, sy) - i0.data()[i]);
                grad.push(sampled_gradient(grad1, sx, sy, w, h));
            }
        }
        let g2 = grad
            .iter()
            .map(|g| {
                let n = g[0] * g[0] + g[1] * g[1];
                if n < 1e-18 {
                    0.0
                } else {
                    n
                }
            })
            .collect();
        Self {
            base: f.to_vec(),
            r0,
            grad,
            g2,
        }
    }

    /// Proximal step of `a·|ρ(u)|` with step `tau` (the ℓ1 limit of the
    /// Charbonnier penalty).
    #[inline]
    fn prox(&self, i: usize, v: [f64; 2], ta: f64) -> [f64; 2] {
        let g2 = self.g2[i];
        if g2 == 0.0 {
            return v;
        }
        let g = self.grad[i];
        let rho = self.r0[i] + g[0] * (v[0] - self.base[i][0]) + g[1] * (v[1] - self.base[i][1]);
        let k = if rho < -ta * g2 {
            ta
        } else if rho > ta * g2 {
            -ta
        } else {
            -rho / g2
        };
        [v[0] + k * g[0], v[1] + k * g[1]]
    }
}

fn sampled_gradient(grad: &crate::grid::GradientField, x: f64, y: f64, w: usize, h: usize) -> [f64; 2] {
    let mut g = grad.sample(x, y);
    // border replication has zero derivative outside the grid
    if x < 0.0 || x > (w - 1) as f64 {
        g[0] = 0.0;
    }
    if y < 0.0 || y > (h - 1) as f64 {
        g[1] = 0.0;
    }
    g
}

/// Minimizes the energy from `f_init`; returns the lowest-energy iterate seen.
///
/// Each of three outer warps linearizes the photometric residual and runs
/// `iters / 3` diagonally preconditioned primal–dual iterations: the
/// smoothness and distillation terms are dualized, the data term is handled
/// by its pointwise proximal map and the folding penalty by an explicit
/// gradient step. `step` rebalances the primal and dual step sizes.
#[allow(clippy::too_many_arguments)]
pub fn refine_variational(
    i0: &Image2D,
    i1: &Image2D,
    f_init: &FlowField,
    conf: &ConfidenceMap,
    w: &EnergyWeights,
    pseudo: Option<&FlowField>,
    iters: usize,
    step: f64,
) -> Result<FlowField> {
    check_energy_inputs(i0, i1, f_init, conf, pseudo)?;
    w.validate()?;
    if iters == 0 {
        return Err(Error::InvalidArgument("iters must be at least 1".into()));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument("step must be positive".into()));
    }
    let edge = edge_weights(i0, w.edge_kappa);
    Ok(refine_with_edges(i0, i1, f_init, conf, w, pseudo, iters, step, &edge))
}

/// Projected ascent on the duals of the weighted forward differences.
fn dual_ascent(
    u_bar: &[[f64; 2]],
    px: &mut [[f64; 2]],
    py: &mut [[f64; 2]],
    bound: &[f64],
    sigma: f64,
    width: usize,
    height: usize,
) {
    for y in 0..height {
        let row = y * width;
        for i in row..row + width - 1 {
            let b = bound[i];
            for c in 0..2 {
                px[i][c] = (px[i][c] + sigma * (u_bar[i + 1][c] - u_bar[i][c])).clamp(-b, b);
            }
        }
        if y + 1 < height {
            for i in row..row + width {
                let b = bound[i];
                for c in 0..2 {
                    py[i][c] = (py[i][c] + sigma * (u_bar[i + width][c] - u_bar[i][c])).clamp(-b, b);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn refine_with_edges(
    i0: &Image2D,
    i1: &Image2D,
    f_init: &FlowField,
    conf: &ConfidenceMap,
    w: &EnergyWeights,
    pseudo: Option<&FlowField>,
    iters: usize,
    step: f64,
    edge: &[f64],
) -> FlowField {
    let (width, height) = i0.dims();
    let n = width * height;
    let n_int = interior_count(width, height);
    let grad1 = gradient(i1);
    let conf_d = conf.data();

    // all coefficients are per-pixel sums (the energy's means times n)
    let c_smooth = w.lambda_reg * (1.0 - w.fold_weight);
    let c_fold = if n_int > 0 {
        w.lambda_reg * w.fold_weight * n as f64 / n_int as f64
    } else {
        0.0
    };
    let bound: Vec<f64> = edge.iter().map(|e| c_smooth * e).collect();
    let pseudo_d = pseudo.map(|p| p.data());

    // diagonal preconditioning: τ_i = 1 / (#rows touching i), σ = 1 / 2 for
    // difference rows and 1 for the identity rows of the distillation term
    let tau: Vec<f64> = (0..n)
        .map(|i| {
            let (x, y) = (i % width, i / width);
            let mut k = 0.0;
            if x + 1 < width {
                k += 1.0;
            }
            if x > 0 {
                k += 1.0;
            }
            if y + 1 < height {
                k += 1.0;
            }
            if y > 0 {
                k += 1.0;
            }
            if pseudo_d.is_some() {
                k += 1.0;
            }
            step / f64::max(k, 1.0)
        })
        .collect();
    let sigma_d = 0.5 / step;
    let sigma_q = 1.0 / step;
    let data_step: Vec<f64> = tau
        .iter()
        .zip(conf_d)
        .map(|(t, c)| t * w.lambda_photo * c)
        .collect();

    let mut best_energy = energy_with_edges(i0, i1, f_init, conf, w, pseudo, edge).total;
    let mut best = f_init.clone();
    let mut u = f_init.data().to_vec();
    let inner = iters.div_ceil(OUTER_WARPS);

    let mut px = vec![[0.0f64; 2]; n];
    let mut py = vec![[0.0f64; 2]; n];
    let mut q = vec![[0.0f64; 2]; n];
    let mut fold_g = vec![[0.0f64; 2]; n];

    for _ in 0..OUTER_WARPS {
        let lin = Linearization::new(i0, i1, &grad1, &u);
        let mut u_bar = u.clone();
        for _ in 0..inner {
            dual_ascent(&u_bar, &mut px, &mut py, &bound, sigma_d, width, height);
            if let Some(p) = pseudo_d {
                let b = w.lambda_flow;
                for ((qi, ui), pi) in q.iter_mut().zip(&u_bar).zip(p) {
                    for c in 0..2 {
                        qi[c] = (qi[c] + sigma_q * (ui[c] - pi[c])).clamp(-b, b);
                    }
                }
            }
            let folding = c_fold > 0.0 && {
                fold_g.iter_mut().for_each(|g| *g = [0.0, 0.0]);
                fold_gradient(&u, width, height, c_fold, &mut fold_g)
            };

            // primal descent + data prox, with over-relaxation into u_bar;
            // px of the last column and py of the last row stay zero
            let zero_row = vec![[0.0f64; 2]; width];
            for y in 0..height {
                let r = y * width;
                let rows = r..r + width;
                let up = if y > 0 { &py[r - width..r] } else { &zero_row[..] };
                let mut left = [0.0f64; 2];
                for (k, i) in rows.enumerate() {
                    let kt = [
                        q[i][0] - px[i][0] - py[i][0] + left[0] + up[k][0],
                        q[i][1] - px[i][1] - py[i][1] + left[1] + up[k][1],
                    ];
                    left = px[i];
                    let t = tau[i];
                    let mut v = [u[i][0] - t * kt[0], u[i][1] - t * kt[1]];
                    if folding {
                        let tf = t.min(FOLD_STEP);
                        v[0] -= tf * fold_g[i][0];
                        v[1] -= tf * fold_g[i][1];
                    }
                    let next = lin.prox(i, v, data_step[i]);
                    u_bar[i] = [2.0 * next[0] - u[i][0], 2.0 * next[1] - u[i][1]];
                    u[i] = next;
                }
            }
        }

        let Ok(candidate) = FlowField::new(width, height, u.clone()) else {
            break;
        };
        let e = energy_with_edges(i0, i1, &candidate, conf, w, pseudo, edge).total;
        if e < best_energy {
            best_energy = e;
            best = candidate;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// estimation

/// Single-direction coarse-to-fine estimate of `F_ref→other`, i.e. the field
/// with `warp(other, F) ≈ reference`.
pub fn estimate_flow(
    reference: &Image2D,
    other: &Image2D,
    conf_ref: &ConfidenceMap,
    spec: &PyramidSpec,
    w: &EnergyWeights,
    pseudo: Option<&FlowField>,
) -> Result<FlowField> {
    check_dims(reference.dims(), other.dims())?;
    check_dims(reference.dims(), conf_ref.dims())?;
    if let Some(p) = pseudo {
        check_dims(reference.dims(), p.dims())?;
    }
    w.validate()?;
    let pyr0 = build_pyramid(reference, spec)?;
    let pyr1 = build_pyramid(other, spec)?;
    let pyr_c = confidence_pyramid(conf_ref, spec)?;
    let pyr_p = pseudo.map(|p| downsample_flow(p, spec.levels)).transpose()?;

    let mut flow: Option<FlowField> = None;
    for level in (0..spec.levels).rev() {
        let a = &pyr0[level];
        let b = &pyr1[level];
        let init = match flow.take() {
            Some(prev) => upsample_flow(&prev, a.width(), a.height()),
            None => {
                let fa = extract_features(a, spec.patch_radius)?;
                let fb = extract_features(b, spec.patch_radius)?;
                coarse_match(&correlation_volume(&fa, &fb, spec.corr_radius)?)
            }
        };
        let edge = edge_weights(a, w.edge_kappa);
        let p = pyr_p.as_ref().map(|v| &v[level]);
        flow = Some(refine_with_edges(
            a,
            b,
            &init,
            &pyr_c[level],
            w,
            p,
            spec.iters,
            spec.step,
            &edge,
        ));
    }
    Ok(flow.expect("at least one level"))
}

/// `(F01, F10)`: `warp(i1, F01) ≈ i0` weighted by `conf0`, and
/// `warp(i0, F10) ≈ i1` weighted by `conf1`.
pub fn estimate_bidirectional(
    i0: &Image2D,
    i1: &Image2D,
    conf0: &ConfidenceMap,
    conf1: &ConfidenceMap,
    spec: &PyramidSpec,
    w: &EnergyWeights,
) -> Result<(FlowField, FlowField)> {
    check_dims(i0.dims(), i1.dims())?;
    let f01 = estimate_flow(i0, i1, conf0, spec, w, None)?;
    let f10 = estimate_flow(i1, i0, conf1, spec, w, None)?;
    Ok((f01, f10))
}

/// Two half-step estimates through an intermediate frame, composed with ⊕.
pub fn bisect_candidate(
    i0: &Image2D,
    imid: &Image2D,
    i1: &Image2D,
    conf0: &ConfidenceMap,
    conf_mid: &ConfidenceMap,
    spec: &PyramidSpec,
    w: &EnergyWeights,
) -> Result<FlowField> {
    check_dims(i0.dims(), imid.dims())?;
    check_dims(i0.dims(), i1.dims())?;
    let first = estimate_flow(i0, imid, conf0, spec, w, None)?;
    let second = estimate_flow(imid, i1, conf_mid, spec, w, None)?;
    compose(&first, &second)
}

/// Mean `|warp(i1, F) − i0|` over pixels whose sample stayed inside `i1`.
pub fn post_warp_misalignment(i0: &Image2D, i1: &Image2D, f: &FlowField) -> Result<f64> {
    check_dims(i0.dims(), i1.dims())?;
    let (warped, valid) = warp_with_validity(i1, f)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((a, b), &v) in warped.data().iter().zip(i0.data()).zip(valid.data()) {
        if v {
            sum += (a - b).abs();
            count += 1;
        }
    }
    Ok(if count == 0 {
        f64::INFINITY
    } else {
        sum / count as f64
    })
}

/// Candidate with the lowest post-warp misalignment; ties keep the lowest index.
pub fn select_candidate<'a>(
    i0: &Image2D,
    i1: &Image2D,
    candidates: &'a [FlowField],
) -> Result<(usize, &'a FlowField)> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no flow candidates supplied".into()));
    }
    let mut best = (0usize, f64::INFINITY);
    for (k, c) in candidates.iter().enumerate() {
        let m = post_warp_misalignment(i0, i1, c)?;
        if k == 0 || m < best.1 {
            best = (k, m);
        }
    }
    Ok((best.0, &candidates[best.0]))
}

//! LC2 similarity and bounded in-plane rigid refinement of an ultrasound frame
//! against a CT slice.

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::grid::{bilinear, gradient_magnitude, Image2D, Mask2D, ScalarMap};

pub use crate::rigid::{chain_calibration, HomTransform3D, RigidTransform2D, RigidTransform2DJson};

/// Half-widths of the search box around the initial pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchBounds {
    pub tx: f64,
    pub ty: f64,
    pub theta_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LC2Params {
    pub patch_radius: usize,
    /// Patches whose ultrasound variance falls below this are skipped.
    pub variance_floor: f64,
    pub bounds: SearchBounds,
}

impl Default for LC2Params {
    fn default() -> Self {
        Self {
            patch_radius: 4,
            variance_floor: 1e-6,
            bounds: SearchBounds {
                tx: 10.0,
                ty: 10.0,
                theta_deg: 5.0,
            },
        }
    }
}

impl LC2Params {
    pub fn validate(&self) -> Result<()> {
        let b = self.bounds;
        let ok = self.patch_radius >= 1
            && self.variance_floor >= 0.0
            && self.variance_floor.is_finite()
            && [b.tx, b.ty, b.theta_deg].iter().all(|v| *v >= 0.0 && v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid LC2 parameters: {self:?}")))
        }
    }
}

const TIKHONOV: f64 = 1e-12;

const CHANNELS: usize = 9;

/// Summed-area tables of the nine patch moments, interleaved per cell, with
/// one row/column of zero padding.
struct Moments {
    w: usize,
    s: Vec<[f64; CHANNELS]>,
}

impl Moments {
    fn new(us: &[f64], ct: &[f64], grad: &[f64], w: usize, h: usize) -> Self {
        let sw = w + 1;
        let mut s = vec![[0.0; CHANNELS]; sw * (h + 1)];
        for y in 0..h {
            let mut row = [0.0; CHANNELS];
            for x in 0..w {
                let i = y * w + x;
                let (c, g, u) = (ct[i], grad[i], us[i]);
                let m = [c, g, u, c * c, c * g, g * g, c * u, g * u, u * u];
                let above = s[y * sw + x + 1];
                let cell = &mut s[(y + 1) * sw + x + 1];
                for k in 0..CHANNELS {
                    row[k] += m[k];
                    cell[k] = above[k] + row[k];
                }
            }
        }
        Self { w: sw, s }
    }

    /// Moment sums over `[x0, x1) × [y0, y1)`.
    #[inline]
    fn sum(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> [f64; CHANNELS] {
        let w = self.w;
        let (a, b, c, d) = (&self.s[y1 * w + x1], &self.s[y0 * w + x1], &self.s[y1 * w + x0], &self.s[y0 * w + x0]);
        std::array::from_fn(|k| a[k] - b[k] - c[k] + d[k])
    }
}

/// Variance-weighted mean of patchwise `1 − Var(residual)/Var(us)`, where the
/// residual is left by the least-squares fit `us ≈ α·ct + β·ct_grad + γ` over
/// the patch around each region pixel. Patches are clipped at the border.
pub fn lc2_similarity(
    us: &Image2D,
    ct: &Image2D,
    ct_grad: &ScalarMap,
    p: &LC2Params,
    region: &Mask2D,
) -> Result<f64> {
    check_dims(us.dims(), ct.dims())?;
    check_dims(us.dims(), ct_grad.dims())?;
    check_dims(us.dims(), region.dims())?;
    p.validate()?;
    if !region.any() {
        return Err(Error::InvalidArgument("LC2 region is empty".into()));
    }
    let (w, h) = us.dims();
    let (u, c, g) = (us.data(), ct.data(), ct_grad.data());
    let sums = Moments::new(u, c, g, w, h);
    let r = p.patch_radius;
    let mut num = 0.0;
    let mut den = 0.0;
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            if !region.get(x, y) {
                continue;
            }
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let n = ((x1 - x0) * (y1 - y0)) as f64;
            let [sc, sg, su, scc, scg, sgg, scu, sgu, suu] = sums.sum(x0, y0, x1, y1);
            let (mc, mg, mu) = (sc / n, sg / n, su / n);
            let var_u = (suu / n - mu * mu).max(0.0);
            if var_u < p.variance_floor || var_u == 0.0 {
                continue;
            }
            // centring removes γ; α, β solve the 2×2 normal equations
            let cc = (scc / n - mc * mc).max(0.0) + TIKHONOV;
            let gg = (sgg / n - mg * mg).max(0.0) + TIKHONOV;
            let cg = scg / n - mc * mg;
            let cu = scu / n - mc * mu;
            let gu = sgu / n - mg * mu;
            let det = cc * gg - cg * cg;
            if !(det > 0.0) {
                continue;
            }
            let alpha = (gg * cu - cg * gu) / det;
            let beta = (cc * gu - cg * cu) / det;
            let explained = alpha * cu + beta * gu;
            let local = (explained / var_u).clamp(0.0, 1.0);
            num += var_u * local;
            den += var_u;
        }
    }
    if den == 0.0 {
        return Err(Error::UndefinedSimilarity(
            "every patch falls below the variance floor".into(),
        ));
    }
    Ok(num / den)
}

/// Resamples `img` at `R(θ)(x − c) + c + t`, so a pure translation matches a
/// backward warp by the constant flow `(tx, ty)`.
pub fn apply_rigid(img: &Image2D, t: &RigidTransform2D, center: [f64; 2]) -> Image2D {
    let (w, h) = img.dims();
    let (sin, cos) = t.theta.sin_cos();
    let (ox, oy) = (center[0] + t.tx, center[1] + t.ty);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let dy = y as f64 - center[1];
        for x in 0..w {
            let dx = x as f64 - center[0];
            let qx = cos * dx - sin * dy + ox;
            let qy = sin * dx + cos * dy + oy;
            out.push(bilinear(img.data(), w, h, qx, qy));
        }
    }
    Image2D::new(w, h, out).expect("bilinear samples stay in range")
}

/// Rotation centre used by [`rigid_refine`].
pub fn image_center(img: &Image2D) -> [f64; 2] {
    [(img.width() - 1) as f64 / 2.0, (img.height() - 1) as f64 / 2.0]
}

const GRID_STEP_PX: f64 = 2.0;
const GRID_STEP_DEG: f64 = 1.0;
const SIMPLEX_TOL: f64 = 0.05;
const MAX_SIMPLEX_ITERS: usize = 400;

struct Objective<'a> {
    us: &'a Image2D,
    ct: &'a Image2D,
    p: &'a LC2Params,
    region: Mask2D,
    center: [f64; 2],
    lo: [f64; 3],
    hi: [f64; 3],
}

impl Objective<'_> {
    fn clamp(&self, v: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|k| v[k].clamp(self.lo[k], self.hi[k]))
    }

    fn pose(v: [f64; 3]) -> RigidTransform2D {
        RigidTransform2D {
            tx: v[0],
            ty: v[1],
            theta: crate::rigid::wrap_angle(v[2].to_radians()),
        }
    }

    /// LC2 at a pose given as `(tx, ty, θ°)`; undefined scores read as `None`.
    fn score(&self, v: [f64; 3]) -> Result<Option<f64>> {
        let moved = apply_rigid(self.ct, &Self::pose(v), self.center);
        let grad = gradient_magnitude(&moved);
        match lc2_similarity(self.us, &moved, &grad, self.p, &self.region) {
            Ok(s) => Ok(Some(s)),
            Err(Error::UndefinedSimilarity(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

fn axis(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).floor() as usize;
    let mut v: Vec<f64> = (0..=n).map(|k| lo + k as f64 * step).collect();
    if hi - v[n] > 1e-12 {
        v.push(hi);
    }
    v
}

fn simplex_diameter(s: &[[f64; 3]]) -> f64 {
    let mut d: f64 = 0.0;
    for a in s {
        for b in s {
            d = d.max(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt());
        }
    }
    d
}

/// Nelder–Mead maximization inside the box; vertices are clamped.
fn nelder_mead(obj: &Objective, start: [f64; 3], start_score: f64) -> Result<([f64; 3], f64)> {
    let val = |v: [f64; 3]| -> Result<f64> { Ok(obj.score(v)?.unwrap_or(f64::NEG_INFINITY)) };
    let steps = [1.0, 1.0, 0.5];
    let mut simplex: Vec<([f64; 3], f64)> = vec![(start, start_score)];
    for k in 0..3 {
        let mut v = start;
        v[k] += steps[k];
        if v[k] > obj.hi[k] {
            v[k] = start[k] - steps[k];
        }
        let v = obj.clamp(v);
        simplex.push((v, val(v)?));
    }
    for _ in 0..MAX_SIMPLEX_ITERS {
        simplex.sort_by(|a, b| b.1.total_cmp(&a.1));
        let pts: Vec<[f64; 3]> = simplex.iter().map(|s| s.0).collect();
        if simplex_diameter(&pts) < SIMPLEX_TOL {
            break;
        }
        let worst = simplex[3];
        let centroid = [0, 1, 2].map(|k| (pts[0][k] + pts[1][k] + pts[2][k]) / 3.0);
        let along = |t: f64| obj.clamp([0, 1, 2].map(|k| centroid[k] + t * (worst.0[k] - centroid[k])));

        let xr = along(-1.0);
        let fr = val(xr)?;
        if fr > simplex[0].1 {
            let xe = along(-2.0);
            let fe = val(xe)?;
            simplex[3] = if fe > fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr > simplex[2].1 {
            simplex[3] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr > worst.1 {
            let x = along(-0.5);
            (x, val(x)?)
        } else {
            let x = along(0.5);
            (x, val(x)?)
        };
        if fc > worst.1.max(fr) {
            simplex[3] = (xc, fc);
            continue;
        }
        // shrink towards the best vertex
        let best = simplex[0].0;
        for s in simplex.iter_mut().skip(1) {
            let v = [0, 1, 2].map(|k| best[k] + 0.5 * (s.0[k] - best[k]));
            *s = (v, val(v)?);
        }
    }
    simplex.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(simplex[0])
}

/// Maximizes LC2 between `us` and the rigidly resampled `ct_slice` over the
/// box `init ± bounds`: a grid search (2 px / 1°) seeds a Nelder–Mead
/// refinement. The pose is applied with [`apply_rigid`] about the image
/// centre. Never returns a pose scoring below `init`.
pub fn rigid_refine(
    us: &Image2D,
    ct_slice: &Image2D,
    init: &RigidTransform2D,
    p: &LC2Params,
) -> Result<(RigidTransform2D, f64)> {
    check_dims(us.dims(), ct_slice.dims())?;
    p.validate()?;
    let (w, h) = us.dims();
    let r = p.patch_radius;
    if w <= 2 * r || h <= 2 * r {
        return Err(Error::InvalidArgument(format!(
            "image {w}x{h} too small for patch radius {r}"
        )));
    }
    let b = p.bounds;
    let v0 = [init.tx, init.ty, init.theta_deg()];
    let half = [b.tx, b.ty, b.theta_deg];
    let obj = Objective {
        us,
        ct: ct_slice,
        p,
        region: Mask2D::interior(w, h, r),
        center: image_center(us),
        lo: [0, 1, 2].map(|k| v0[k] - half[k]),
        hi: [0, 1, 2].map(|k| v0[k] + half[k]),
    };
    let init_score = obj.score(v0)?;

    let mut best: Option<([f64; 3], f64)> = init_score.map(|s| (v0, s));
    let xs = axis(obj.lo[0], obj.hi[0], GRID_STEP_PX);
    let ys = axis(obj.lo[1], obj.hi[1], GRID_STEP_PX);
    let ts = axis(obj.lo[2], obj.hi[2], GRID_STEP_DEG);
    for &t in &ts {
        for &y in &ys {
            for &x in &xs {
                let v = [x, y, t];
                if let Some(s) = obj.score(v)? {
                    if best.is_none_or(|b| s > b.1) {
                        best = Some((v, s));
                    }
                }
            }
        }
    }
    let Some((start, start_score)) = best else {
        return Err(Error::RegistrationFailure(
            "LC2 undefined at every pose of the search grid".into(),
        ));
    };
    let (v, s) = nelder_mead(&obj, start, start_score)?;
    let (v, s) = if s >= start_score { (v, s) } else { (start, start_score) };
    match init_score {
        Some(s0) if s0 >= s => Ok((*init, s0)),
        _ => Ok((Objective::pose(v), s)),
    }
}

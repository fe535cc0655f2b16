//! Random-walk ultrasound confidence maps.
//!
//! Each pixel's confidence is the probability that a random walker started
//! there reaches the transducer (top row) before the bottom row. Edge weights
//! fall off with the attenuated intensity difference between neighbours, so
//! strong reflectors shadow everything beneath them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Image2D;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfidenceParams {
    /// Depth attenuation rate.
    pub alpha: f64,
    /// Intensity-contrast sensitivity of the edge weights.
    pub beta: f64,
    /// Lateral edge penalty; diagonal edges use `gamma / sqrt(2)`.
    pub gamma: f64,
    pub cg_tol: f64,
    pub cg_max_iters: usize,
}

impl Default for ConfidenceParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 90.0,
            gamma: 0.06,
            cg_tol: 1e-6,
            cg_max_iters: 2000,
        }
    }
}

impl ConfidenceParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha >= 0.0
            && self.beta >= 0.0
            && self.gamma > 0.0
            && self.gamma <= 1.0
            && self.cg_tol > 0.0
            && self.cg_max_iters > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "confidence parameters out of range: {self:?}"
            )))
        }
    }
}

/// Per-pixel ultrasound reliability in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
    /// Relative residual `‖A c − b‖ / ‖b‖` of the interior solve.
    pub residual: f64,
    pub iterations: usize,
}

impl ConfidenceMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width * height != data.len() || width == 0 || height == 0 {
            return Err(Error::InvalidArgument("confidence map shape".into()));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "confidence values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            data,
            residual: 0.0,
            iterations: 0,
        })
    }

    /// Constant map, mainly for tests and for disabling confidence weighting.
    pub fn uniform(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn to_image(&self) -> Image2D {
        Image2D::new(self.width, self.height, self.data.clone())
            .expect("confidence values are valid intensities")
    }
}

/// Interior Laplacian system of the 8-connected lattice.
///
/// Stored column-major with one zero ghost column on each side, so pixel
/// `(x, y)` lives at `(x + 1) * h + y` and every stencil access inside the
/// interior rows is in bounds. Vectors are zero on the boundary rows and
/// ghost columns.
struct System {
    w: usize,
    h: usize,
    /// (x,y)–(x,y+1)
    down: Vec<f64>,
    /// (x,y)–(x+1,y)
    right: Vec<f64>,
    /// (x,y)–(x+1,y+1)
    diag_dr: Vec<f64>,
    /// (x+1,y)–(x,y+1)
    diag_dl: Vec<f64>,
    diag: Vec<f64>,
    rhs: Vec<f64>,
}

impl System {
    fn build(img: &Image2D, p: &ConfidenceParams) -> Self {
        let (w, h) = img.dims();
        let len = (w + 2) * h;
        let depth = (h - 1) as f64;
        let att: Vec<f64> = (0..h).map(|y| (-p.alpha * y as f64 / depth).exp()).collect();
        let g = |x: usize, y: usize| img.get(x, y) * att[y];
        let weight = |a: f64, b: f64| (-p.beta * (a - b).abs()).exp();
        let diag_scale = p.gamma / std::f64::consts::SQRT_2;

        let mut down = vec![0.0; len];
        let mut right = vec![0.0; len];
        let mut diag_dr = vec![0.0; len];
        let mut diag_dl = vec![0.0; len];
        for x in 0..w {
            for y in 0..h {
                let k = (x + 1) * h + y;
                let here = g(x, y);
                if y + 1 < h {
                    down[k] = weight(here, g(x, y + 1));
                }
                if x + 1 < w {
                    right[k] = p.gamma * weight(here, g(x + 1, y));
                    if y + 1 < h {
                        diag_dr[k] = diag_scale * weight(here, g(x + 1, y + 1));
                        diag_dl[k] = diag_scale * weight(g(x + 1, y), g(x, y + 1));
                    }
                }
            }
        }

        let mut sys = Self {
            w,
            h,
            down,
            right,
            diag_dr,
            diag_dl,
            diag: vec![0.0; len],
            rhs: vec![0.0; len],
        };
        // degree and the source-row contribution
        for x in 0..w {
            for y in 1..h - 1 {
                let k = (x + 1) * h + y;
                let mut d = 0.0;
                let mut b = 0.0;
                sys.for_neighbors(k, |j, wt| {
                    d += wt;
                    if j % h == 0 {
                        b += wt;
                    }
                });
                sys.diag[k] = d;
                sys.rhs[k] = b;
            }
        }
        sys
    }

    /// Neighbours `(index, weight)` of an interior-row pixel; ghost columns
    /// carry zero weights.
    #[inline]
    fn for_neighbors(&self, k: usize, mut f: impl FnMut(usize, f64)) {
        let h = self.h;
        f(k - 1, self.down[k - 1]);
        f(k + 1, self.down[k]);
        f(k - h, self.right[k - h]);
        f(k + h, self.right[k]);
        f(k - h - 1, self.diag_dr[k - h - 1]);
        f(k + h + 1, self.diag_dr[k]);
        f(k - h + 1, self.diag_dl[k - h]);
        f(k + h - 1, self.diag_dl[k - 1]);
    }

    fn columns(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        (1..=self.w).map(move |c| c * self.h + 1..(c + 1) * self.h - 1)
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let h = self.h;
        let n = h - 2;
        for col in self.columns() {
            let k0 = col.start;
            // equal-length windows let the compiler drop bounds checks
            let win = |a, shift| window(a, k0 as isize + shift, n);
            let hi = h as isize;
            let (d, vc) = (win(&self.diag, 0), win(v, 0));
            let (dn_u, dn_d) = (win(&self.down, -1), win(&self.down, 0));
            let (v_u, v_d) = (win(v, -1), win(v, 1));
            let (rt_l, rt_r) = (win(&self.right, -hi), win(&self.right, 0));
            let (v_l, v_r) = (win(v, -hi), win(v, hi));
            let (dr_l, dr_r) = (win(&self.diag_dr, -hi - 1), win(&self.diag_dr, 0));
            let (v_lu, v_rd) = (win(v, -hi - 1), win(v, hi + 1));
            let (dl_l, dl_r) = (win(&self.diag_dl, -hi), win(&self.diag_dl, -1));
            let (v_ld, v_ru) = (win(v, -hi + 1), win(v, hi - 1));
            let o = &mut out[k0..k0 + n];
            for j in 0..n {
                o[j] = d[j] * vc[j]
                    - dn_u[j] * v_u[j]
                    - dn_d[j] * v_d[j]
                    - rt_l[j] * v_l[j]
                    - rt_r[j] * v_r[j]
                    - dr_l[j] * v_lu[j]
                    - dr_r[j] * v_rd[j]
                    - dl_l[j] * v_ld[j]
                    - dl_r[j] * v_ru[j];
            }
        }
    }
}

/// Symmetric two-colour line Gauss–Seidel: columns are split into even and
/// odd lines, and one application runs even, odd, even line solves. Lines of
/// one colour are independent, so several tridiagonal solves are interleaved.
struct ZebraLines {
    /// `lower · inv_pivot` of the Thomas forward elimination.
    m: Vec<f64>,
    inv_pivot: Vec<f64>,
    /// Modified super-diagonal coefficients.
    c_prime: Vec<f64>,
    even: Vec<usize>,
    odd: Vec<usize>,
}

const LINE_GROUP: usize = 4;

impl ZebraLines {
    fn new(sys: &System) -> Self {
        let len = sys.diag.len();
        let mut m = vec![0.0; len];
        let mut inv_pivot = vec![0.0; len];
        let mut c_prime = vec![0.0; len];
        for col in sys.columns() {
            let last = col.end - 1;
            let mut prev_c = 0.0;
            for k in col.clone() {
                let lower = if k > col.start { -sys.down[k - 1] } else { 0.0 };
                let pivot = sys.diag[k] - lower * prev_c;
                let upper = if k < last { -sys.down[k] } else { 0.0 };
                inv_pivot[k] = 1.0 / pivot;
                m[k] = lower / pivot;
                c_prime[k] = upper / pivot;
                prev_c = c_prime[k];
            }
        }
        let starts: Vec<usize> = sys.columns().map(|c| c.start).collect();
        let even = starts.iter().copied().step_by(2).collect();
        let odd = starts.iter().copied().skip(1).step_by(2).collect();
        Self {
            m,
            inv_pivot,
            c_prime,
            even,
            odd,
        }
    }

    /// Solves every line of one colour against the current neighbours in `z`.
    fn pass(&self, sys: &System, lines: &[usize], r: &[f64], z: &mut [f64]) {
        let h = sys.h;
        let n = h - 2;
        for group in lines.chunks(LINE_GROUP) {
            for &k0 in group {
                for k in k0..k0 + n {
                    z[k] = r[k]
                        + sys.right[k - h] * z[k - h]
                        + sys.right[k] * z[k + h]
                        + sys.diag_dr[k - h - 1] * z[k - h - 1]
                        + sys.diag_dr[k] * z[k + h + 1]
                        + sys.diag_dl[k - h] * z[k - h + 1]
                        + sys.diag_dl[k - 1] * z[k + h - 1];
                }
            }
            let mut prev = [0.0; LINE_GROUP];
            for j in 0..n {
                for (g, &k0) in group.iter().enumerate() {
                    let k = k0 + j;
                    let d = z[k] * self.inv_pivot[k] - self.m[k] * prev[g];
                    z[k] = d;
                    prev[g] = d;
                }
            }
            for j in (0..n - 1).rev() {
                for &k0 in group {
                    let k = k0 + j;
                    z[k] -= self.c_prime[k] * z[k + 1];
                }
            }
        }
    }

    fn apply(&self, sys: &System, r: &[f64], z: &mut [f64]) {
        for &k0 in &self.odd {
            z[k0..k0 + sys.h - 2].iter_mut().for_each(|v| *v = 0.0);
        }
        self.pass(sys, &self.even, r, z);
        self.pass(sys, &self.odd, r, z);
        self.pass(sys, &self.even, r, z);
    }
}

/// Piecewise-constant aggregation coarse space with its Galerkin operator,
/// factored once by banded Cholesky.
struct CoarseSpace {
    /// Aggregate index of every stored entry (`usize::MAX` off the interior).
    agg: Vec<usize>,
    n: usize,
    band: usize,
    /// Lower band of the Cholesky factor: `l[i * (band + 1) + (i − j)]`.
    l: Vec<f64>,
}

const AGGREGATE: usize = 4;

impl CoarseSpace {
    fn new(sys: &System) -> Self {
        let (w, h) = (sys.w, sys.h);
        let ny = (h - 2).div_ceil(AGGREGATE);
        let nx = w.div_ceil(AGGREGATE);
        let n = nx * ny;
        let band = ny + 1;
        let mut agg = vec![usize::MAX; sys.diag.len()];
        for x in 0..w {
            for y in 1..h - 1 {
                agg[(x + 1) * h + y] = (x / AGGREGATE) * ny + (y - 1) / AGGREGATE;
            }
        }
        let stride = band + 1;
        let mut a = vec![0.0; n * stride];
        for col in sys.columns() {
            for k in col {
                let i = agg[k];
                a[i * stride] += sys.diag[k];
                sys.for_neighbors(k, |j, wt| {
                    let jj = agg[j];
                    if jj != usize::MAX && jj <= i {
                        a[i * stride + (i - jj)] -= wt;
                    }
                });
            }
        }
        // banded Cholesky, in place
        for i in 0..n {
            let lo = i.saturating_sub(band);
            for j in lo..=i {
                let mut acc = a[i * stride + (i - j)];
                let klo = lo.max(j.saturating_sub(band));
                for k in klo..j {
                    acc -= a[i * stride + (i - k)] * a[j * stride + (j - k)];
                }
                if j == i {
                    a[i * stride] = acc.max(1e-300).sqrt();
                } else {
                    a[i * stride + (i - j)] = acc / a[j * stride];
                }
            }
        }
        Self { agg, n, band, l: a }
    }

    /// `z += P A_c⁻¹ Pᵀ r`.
    fn correct(&self, sys: &System, r: &[f64], z: &mut [f64]) {
        let stride = self.band + 1;
        let mut b = vec![0.0; self.n];
        for col in sys.columns() {
            for k in col {
                b[self.agg[k]] += r[k];
            }
        }
        for i in 0..self.n {
            let lo = i.saturating_sub(self.band);
            let mut acc = b[i];
            for k in lo..i {
                acc -= self.l[i * stride + (i - k)] * b[k];
            }
            b[i] = acc / self.l[i * stride];
        }
        for i in (0..self.n).rev() {
            let hi = (i + self.band).min(self.n - 1);
            let mut acc = b[i];
            for k in i + 1..=hi {
                acc -= self.l[k * stride + (k - i)] * b[k];
            }
            b[i] = acc / self.l[i * stride];
        }
        for col in sys.columns() {
            for k in col {
                z[k] += b[self.agg[k]];
            }
        }
    }
}

/// Symmetric two-level cycle: line smoothing, coarse correction, line
/// smoothing.
struct TwoLevel {
    lines: ZebraLines,
    coarse: CoarseSpace,
    res: Vec<f64>,
    tmp: Vec<f64>,
}

impl TwoLevel {
    fn new(sys: &System) -> Self {
        let len = sys.diag.len();
        Self {
            lines: ZebraLines::new(sys),
            coarse: CoarseSpace::new(sys),
            res: vec![0.0; len],
            tmp: vec![0.0; len],
        }
    }

    fn residual(sys: &System, r: &[f64], z: &[f64], out: &mut [f64]) {
        sys.apply(z, out);
        for col in sys.columns() {
            for k in col {
                out[k] = r[k] - out[k];
            }
        }
    }

    fn apply(&mut self, sys: &System, r: &[f64], z: &mut [f64]) {
        self.lines.apply(sys, r, z);
        Self::residual(sys, r, z, &mut self.res);
        self.coarse.correct(sys, &self.res, z);
        Self::residual(sys, r, z, &mut self.res);
        self.lines.apply(sys, &self.res, &mut self.tmp);
        for col in sys.columns() {
            for k in col {
                z[k] += self.tmp[k];
            }
        }
    }
}

#[inline]
fn window(a: &[f64], start: isize, n: usize) -> &[f64] {
    &a[start as usize..start as usize + n]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Random-walk confidence of a single frame.
pub fn confidence(img: &Image2D, p: &ConfidenceParams) -> Result<ConfidenceMap> {
    p.validate()?;
    let (w, h) = img.dims();
    if h < 3 {
        return Err(Error::InvalidArgument(format!(
            "confidence needs at least 3 rows, got {h}"
        )));
    }
    let sys = System::build(img, p);
    let len = sys.diag.len();

    let b_norm = dot(&sys.rhs, &sys.rhs).sqrt();
    let mut c = vec![0.0; len];
    let mut iterations = 0;
    let mut rel_residual = 0.0;

    if b_norm > 0.0 {
        let mut pre = TwoLevel::new(&sys);
        let mut r = sys.rhs.clone();
        let mut z = vec![0.0; len];
        pre.apply(&sys, &r, &mut z);
        let mut d = z.clone();
        let mut ad = vec![0.0; len];
        let mut rz = dot(&r, &z);
        while iterations < p.cg_max_iters {
            sys.apply(&d, &mut ad);
            let dad = dot(&d, &ad);
            if dad <= 0.0 {
                break;
            }
            let step = rz / dad;
            for col in sys.columns() {
                for k in col {
                    c[k] += step * d[k];
                    r[k] -= step * ad[k];
                }
            }
            iterations += 1;
            if dot(&r, &r).sqrt() / b_norm <= p.cg_tol {
                break;
            }
            pre.apply(&sys, &r, &mut z);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for col in sys.columns() {
                for k in col {
                    d[k] = z[k] + beta * d[k];
                }
            }
        }
        // recursive residual drifts; report the true one
        sys.apply(&c, &mut ad);
        let true_res: f64 = sys
            .columns()
            .flatten()
            .map(|k| (sys.rhs[k] - ad[k]).powi(2))
            .sum::<f64>()
            .sqrt();
        rel_residual = true_res / b_norm;
        if rel_residual > p.cg_tol {
            return Err(Error::SolverFailure {
                iterations,
                residual: rel_residual,
            });
        }
    }

    let mut data = vec![0.0; w * h];
    for x in 0..w {
        data[x] = 1.0;
        for y in 1..h - 1 {
            data[y * w + x] = c[(x + 1) * h + y].clamp(0.0, 1.0);
        }
    }
    Ok(ConfidenceMap {
        width: w,
        height: h,
        data,
        residual: rel_residual,
        iterations,
    })
}

pub fn confidence_pair(
    i0: &Image2D,
    i1: &Image2D,
    p: &ConfidenceParams,
) -> Result<(ConfidenceMap, ConfidenceMap)> {
    Ok((confidence(i0, p)?, confidence(i1, p)?))
}

//! Dense 2D grids and the deformation-field algebra built on them.
//!
//! Sampling convention: a field `F_ab` is the displacement such that
//! `warp(I_b, F_ab) ≈ I_a`, i.e. the target frame is reconstructed by
//! sampling the source at `x + F_ab(x)`. Images replicate their border when
//! sampled out of bounds; masks read as `false` there.

use crate::error::{check_dims, Error, Result};

/// Normalized scalar image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

/// Unconstrained finite scalar grid: distances, Jacobian determinants,
/// weights and residual norms.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

/// Per-pixel displacement `(dx, dy)` in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    data: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask2D {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

/// Per-pixel `(∂/∂x, ∂/∂y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    width: usize,
    height: usize,
    data: Vec<[f64; 2]>,
}

macro_rules! grid_accessors {
    ($ty:ty, $elem:ty) => {
        impl $ty {
            pub fn width(&self) -> usize {
                self.width
            }

            pub fn height(&self) -> usize {
                self.height
            }

            pub fn dims(&self) -> (usize, usize) {
                (self.width, self.height)
            }

            pub fn len(&self) -> usize {
                self.data.len()
            }

            pub fn is_empty(&self) -> bool {
                self.data.is_empty()
            }

            pub fn data(&self) -> &[$elem] {
                &self.data
            }

            #[inline]
            pub fn get(&self, x: usize, y: usize) -> $elem {
                self.data[y * self.width + x]
            }
        }
    };
}

grid_accessors!(Image2D, f64);
grid_accessors!(ScalarMap, f64);
grid_accessors!(FlowField, [f64; 2]);
grid_accessors!(Mask2D, bool);
grid_accessors!(GradientField, [f64; 2]);

fn check_shape(width: usize, height: usize, len: usize, min: usize) -> Result<()> {
    if width < min || height < min {
        return Err(Error::InvalidArgument(format!(
            "grid must be at least {min}x{min}, got {width}x{height}"
        )));
    }
    if width * height != len {
        return Err(Error::InvalidArgument(format!(
            "data length {len} does not match {width}x{height}"
        )));
    }
    Ok(())
}

impl Image2D {
    /// Builds an image, clamping every value into `[0, 1]`.
    pub fn new(width: usize, height: usize, mut data: Vec<f64>) -> Result<Self> {
        check_shape(width, height, data.len(), 2)?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite intensity at index {i}"
            )));
        }
        for v in data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        f: impl Fn(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    /// Bilinear interpolation with border replication.
    pub fn sample(&self, x: f64, y: f64) -> Result<f64> {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite sample coordinate ({x}, {y})"
            )));
        }
        Ok(bilinear(&self.data, self.width, self.height, x, y))
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.width,
            self.height,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn to_scalar_map(&self) -> ScalarMap {
        ScalarMap {
            width: self.width,
            height: self.height,
            data: self.data.clone(),
        }
    }

    /// Threshold at `level` (strictly greater is true).
    pub fn threshold(&self, level: f64) -> Mask2D {
        Mask2D {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v > level).collect(),
        }
    }
}

impl ScalarMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_shape(width, height, data.len(), 1)?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

impl FlowField {
    pub fn new(width: usize, height: usize, data: Vec<[f64; 2]>) -> Result<Self> {
        check_shape(width, height, data.len(), 2)?;
        if let Some(i) = data
            .iter()
            .position(|v| !v[0].is_finite() || !v[1].is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "non-finite displacement at index {i}"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::constant(width, height, [0.0, 0.0])
    }

    pub fn constant(width: usize, height: usize, v: [f64; 2]) -> Self {
        assert!(width >= 2 && height >= 2, "flow field must be at least 2x2");
        Self {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        f: impl Fn(usize, usize) -> [f64; 2],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn into_data(self) -> Vec<[f64; 2]> {
        self.data
    }

    /// Bilinear interpolation of both components with border replication.
    pub fn sample(&self, x: f64, y: f64) -> [f64; 2] {
        bilinear_vec(&self.data, self.width, self.height, x, y)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| [v[0] * s, v[1] * s]).collect(),
        }
    }

    pub fn norms(&self) -> ScalarMap {
        ScalarMap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| norm(v)).collect(),
        }
    }

    pub fn max_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| norm(v))
            .fold(0.0, f64::max)
    }

    /// Mean Euclidean distance to `other` over all pixels.
    pub fn mean_endpoint_error(&self, other: &FlowField) -> Result<f64> {
        self.mean_endpoint_error_in(other, None)
    }

    /// Mean Euclidean distance to `other`, optionally restricted to `region`.
    pub fn mean_endpoint_error_in(
        &self,
        other: &FlowField,
        region: Option<&Mask2D>,
    ) -> Result<f64> {
        check_dims(self.dims(), other.dims())?;
        if let Some(m) = region {
            check_dims(self.dims(), m.dims())?;
        }
        let mut sum = 0.0;
        let mut n = 0usize;
        for (i, (a, b)) in self.data.iter().zip(&other.data).enumerate() {
            if region.is_some_and(|m| !m.data[i]) {
                continue;
            }
            sum += norm([a[0] - b[0], a[1] - b[1]]);
            n += 1;
        }
        if n == 0 {
            return Err(Error::InvalidArgument("empty evaluation region".into()));
        }
        Ok(sum / n as f64)
    }
}

impl Mask2D {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        check_shape(width, height, data.len(), 1)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        assert!(width >= 1 && height >= 1, "mask must be non-empty");
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    pub fn and(&self, other: &Mask2D) -> Result<Mask2D> {
        check_dims(self.dims(), other.dims())?;
        Ok(Mask2D {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a && b)
                .collect(),
        })
    }

    pub fn into_data(self) -> Vec<bool> {
        self.data
    }

    /// Mask pixels at least `margin` pixels away from every image border.
    pub fn interior(width: usize, height: usize, margin: usize) -> Self {
        let data = (0..height)
            .flat_map(|y| {
                (0..width).map(move |x| {
                    x >= margin && y >= margin && x + margin < width && y + margin < height
                })
            })
            .collect();
        Self {
            width,
            height,
            data,
        }
    }
}

impl GradientField {
    pub fn magnitude(&self) -> ScalarMap {
        ScalarMap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&g| norm(g)).collect(),
        }
    }

    pub fn sample(&self, x: f64, y: f64) -> [f64; 2] {
        bilinear_vec(&self.data, self.width, self.height, x, y)
    }
}

/// Euclidean length; components are bounded, so no overflow guard is needed.
#[inline]
pub(crate) fn norm(v: [f64; 2]) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

#[inline]
fn clamp_coord(v: f64, n: usize) -> (usize, f64) {
    let max = (n - 1) as f64;
    let v = v.clamp(0.0, max);
    // v is non-negative here, so truncation is floor
    let i = (v as usize).min(n - 2);
    (i, v - i as f64)
}

#[inline]
pub(crate) fn bilinear(data: &[f64], width: usize, height: usize, x: f64, y: f64) -> f64 {
    let (x0, fx) = clamp_coord(x, width);
    let (y0, fy) = clamp_coord(y, height);
    let i = y0 * width + x0;
    let a = data[i];
    let b = data[i + 1];
    let c = data[i + width];
    let d = data[i + width + 1];
    (1.0 - fx) * (1.0 - fy) * a + fx * (1.0 - fy) * b + (1.0 - fx) * fy * c + fx * fy * d
}

#[inline]
pub(crate) fn bilinear_vec(
    data: &[[f64; 2]],
    width: usize,
    height: usize,
    x: f64,
    y: f64,
) -> [f64; 2] {
    let (x0, fx) = clamp_coord(x, width);
    let (y0, fy) = clamp_coord(y, height);
    let i = y0 * width + x0;
    let wa = (1.0 - fx) * (1.0 - fy);
    let wb = fx * (1.0 - fy);
    let wc = (1.0 - fx) * fy;
    let wd = fx * fy;
    let (a, b, c, d) = (data[i], data[i + 1], data[i + width], data[i + width + 1]);
    [
        wa * a[0] + wb * b[0] + wc * c[0] + wd * d[0],
        wa * a[1] + wb * b[1] + wc * c[1] + wd * d[1],
    ]
}

#[inline]
fn in_bounds(x: f64, y: f64, width: usize, height: usize) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64
}

pub fn bilinear_sample(img: &Image2D, x: f64, y: f64) -> Result<f64> {
    img.sample(x, y)
}

/// Backward warp: `out(x) = img(x + f(x))`.
pub fn warp(img: &Image2D, f: &FlowField) -> Result<Image2D> {
    Ok(warp_with_validity(img, f)?.0)
}

/// Like [`warp`], also returning the pixels whose sample fell inside the
/// source image (no border clamping involved).
pub fn warp_with_validity(img: &Image2D, f: &FlowField) -> Result<(Image2D, Mask2D)> {
    check_dims(img.dims(), f.dims())?;
    let (w, h) = img.dims();
    let mut out = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let d = f.data[y * w + x];
            let sx = x as f64 + d[0];
            let sy = y as f64 + d[1];
            out.push(bilinear(&img.data, w, h, sx, sy).clamp(0.0, 1.0));
            valid.push(in_bounds(sx, sy, w, h));
        }
    }
    Ok((
        Image2D {
            width: w,
            height: h,
            data: out,
        },
        Mask2D {
            width: w,
            height: h,
            data: valid,
        },
    ))
}

/// Nearest-neighbour backward warp of a mask; samples outside the grid are false.
pub fn warp_nearest(mask: &Mask2D, f: &FlowField) -> Result<Mask2D> {
    check_dims(mask.dims(), f.dims())?;
    let (w, h) = mask.dims();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let d = f.data[y * w + x];
            let sx = (x as f64 + d[0]).round();
            let sy = (y as f64 + d[1]).round();
            let inside = sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64;
            out.push(inside && mask.data[sy as usize * w + sx as usize]);
        }
    }
    Ok(Mask2D {
        width: w,
        height: h,
        data: out,
    })
}

/// Flow composition `(f ⊕ g)(x) = f(x) + g(x + f(x))`.
pub fn compose(f: &FlowField, g: &FlowField) -> Result<FlowField> {
    check_dims(f.dims(), g.dims())?;
    let (w, h) = f.dims();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let a = f.data[y * w + x];
            let b = bilinear_vec(&g.data, w, h, x as f64 + a[0], y as f64 + a[1]);
            out.push([a[0] + b[0], a[1] + b[1]]);
        }
    }
    Ok(FlowField {
        width: w,
        height: h,
        data: out,
    })
}

/// Derivative along one axis: central differences inside, one-sided at the ends.
#[inline]
fn diff(values: impl Fn(usize) -> f64, i: usize, n: usize) -> f64 {
    if i == 0 {
        values(1) - values(0)
    } else if i == n - 1 {
        values(n - 1) - values(n - 2)
    } else {
        0.5 * (values(i + 1) - values(i - 1))
    }
}

fn gradient_of(data: &[f64], w: usize, h: usize) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        // same stencils as `diff`: central inside, one-sided at the ends
        let (above, below, scale) = if y == 0 {
            (0, 1, 1.0)
        } else if y == h - 1 {
            (h - 2, h - 1, 1.0)
        } else {
            (y - 1, y + 1, 0.5)
        };
        let (ra, rb) = (&data[above * w..(above + 1) * w], &data[below * w..(below + 1) * w]);
        for x in 0..w {
            let gx = if x == 0 {
                row[1] - row[0]
            } else if x == w - 1 {
                row[w - 1] - row[w - 2]
            } else {
                0.5 * (row[x + 1] - row[x - 1])
            };
            let gy = if scale == 1.0 { rb[x] - ra[x] } else { 0.5 * (rb[x] - ra[x]) };
            out.push([gx, gy]);
        }
    }
    out
}

pub fn gradient(img: &Image2D) -> GradientField {
    GradientField {
        width: img.width,
        height: img.height,
        data: gradient_of(&img.data, img.width, img.height),
    }
}

/// Per-pixel Euclidean norm of [`gradient`].
pub fn gradient_magnitude(img: &Image2D) -> ScalarMap {
    gradient(img).magnitude()
}

/// Spatial derivatives of both flow components: `[[∂x dx, ∂y dx], [∂x dy, ∂y dy]]`.
pub(crate) fn flow_jacobian(f: &FlowField) -> Vec<[[f64; 2]; 2]> {
    let (w, h) = f.dims();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let mut jac = [[0.0; 2]; 2];
            for (c, row) in jac.iter_mut().enumerate() {
                row[0] = diff(|i| f.data[y * w + i][c], x, w);
                row[1] = diff(|j| f.data[j * w + x][c], y, h);
            }
            out.push(jac);
        }
    }
    out
}

/// Per-pixel `det(I + ∇F)`.
pub fn jacobian_det(f: &FlowField) -> ScalarMap {
    let data = flow_jacobian(f)
        .into_iter()
        .map(|j| (1.0 + j[0][0]) * (1.0 + j[1][1]) - j[0][1] * j[1][0])
        .collect();
    ScalarMap {
        width: f.width,
        height: f.height,
        data,
    }
}

/// Fraction of interior pixels with a negative Jacobian determinant.
pub fn folding_ratio(f: &FlowField) -> f64 {
    let det = jacobian_det(f);
    let (w, h) = f.dims();
    if w < 3 || h < 3 {
        return 0.0;
    }
    let mut folded = 0usize;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            if det.get(x, y) < 0.0 {
                folded += 1;
            }
        }
    }
    folded as f64 / ((w - 2) * (h - 2)) as f64
}

/// Forward-backward consistency of a flow pair.
#[derive(Debug, Clone)]
pub struct FbResidual {
    /// Average of the two per-direction means.
    pub mean: f64,
    pub mean_01: f64,
    pub mean_10: f64,
    /// `‖(F01 ⊕ F10)(x)‖`
    pub r01: ScalarMap,
    /// `‖(F10 ⊕ F01)(x)‖`
    pub r10: ScalarMap,
}

pub fn fb_residual(f01: &FlowField, f10: &FlowField) -> Result<FbResidual> {
    let r01 = compose(f01, f10)?.norms();
    let r10 = compose(f10, f01)?.norms();
    let mean_01 = r01.mean();
    let mean_10 = r10.mean();
    Ok(FbResidual {
        mean: 0.5 * (mean_01 + mean_10),
        mean_01,
        mean_10,
        r01,
        r10,
    })
}

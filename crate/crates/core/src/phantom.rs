//! Deterministic ultrasound/CT phantom with analytic ground truth.
//!
//! Everything is rendered from a continuous scene defined in material
//! coordinates. A frame state deforms the tissue with a world-space field
//! `ψ(M) = M + w(M)` and, for probe presses, also shifts the ultrasound
//! frame down by the probe profile `P(x)`. The CT slice lives in a larger
//! world frame; the ultrasound frame sits at lateral offset `W/4`.
//!
//! Speckle is value noise on a 2 px material lattice, modulated by a coarser
//! 12 px texture. Lattice values are standard normals drawn row-major from a
//! ChaCha8 stream seeded with the spec seed, so fixtures regenerate
//! bit-identically.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cbct_update::ProbeProfile;
use crate::error::{Error, Result};
use crate::grid::{FlowField, Image2D, Mask2D};
use crate::rigid::RigidTransform2D;

pub const MAX_AMPLITUDE: f64 = 8.0;
pub const MIN_BUMP_SIGMA: f64 = 8.0;
pub const MIN_SIZE: usize = 64;

const SPECKLE_SIGMA_LOG: f64 = 0.2;
const SPECKLE_SPACING: f64 = 2.0;
const SPECKLE_MARGIN: f64 = 32.0;
const TEXTURE_SPACING: f64 = 12.0;
const TEXTURE_GAIN: f64 = 0.3;
const ATTENUATION: f64 = 0.6;
const INVERSE_ITERS: usize = 60;
const BONE_CT: f64 = 0.9;
/// CT intensity separating bone from soft tissue.
pub const BONE_THRESHOLD: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DeformKind {
    None,
    Translation {
        tx: f64,
        ty: f64,
    },
    /// Axial bump; `center` in ultrasound pixel coordinates.
    GaussianBump {
        center: [f64; 2],
        amplitude: f64,
        sigma: f64,
    },
    ProbePress(ProbeProfile),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeformSpec {
    pub kind: DeformKind,
    #[serde(default)]
    pub seed: u64,
}

impl DeformSpec {
    pub fn new(kind: DeformKind, seed: u64) -> Self {
        Self { kind, seed }
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        match self.kind {
            DeformKind::None => Ok(()),
            DeformKind::Translation { tx, ty } => {
                if !(tx.is_finite() && ty.is_finite()) || tx.hypot(ty) > MAX_AMPLITUDE {
                    return bad(format!("translation ({tx}, {ty}) exceeds {MAX_AMPLITUDE} px"));
                }
                Ok(())
            }
            DeformKind::GaussianBump {
                center,
                amplitude,
                sigma,
            } => {
                if !(amplitude.is_finite() && amplitude.abs() <= MAX_AMPLITUDE) {
                    return bad(format!("bump amplitude {amplitude} exceeds {MAX_AMPLITUDE} px"));
                }
                if !(sigma >= MIN_BUMP_SIGMA && sigma.is_finite()) {
                    return bad(format!("bump sigma {sigma} below {MIN_BUMP_SIGMA} px"));
                }
                if !(center[0].is_finite() && center[1].is_finite()) {
                    return bad("non-finite bump center".into());
                }
                Ok(())
            }
            DeformKind::ProbePress(p) => {
                p.validate(width)?;
                if p.d_robot > MAX_AMPLITUDE {
                    return bad(format!("d_robot {} exceeds {MAX_AMPLITUDE} px", p.d_robot));
                }
                Ok(())
            }
        }
    }
}

/// One frame pair with exact ground truth.
#[derive(Debug, Clone)]
pub struct PhantomScene {
    pub i0: Image2D,
    pub i1: Image2D,
    /// `warp(i1, flow_gt_01) ≈ i0`.
    pub flow_gt_01: FlowField,
    pub flow_gt_10: FlowField,
    pub bone_mask0: Mask2D,
    pub bone_mask1: Mask2D,
    /// Static CT slice (state of frame 0).
    pub ct_slice: Image2D,
    /// Ground-truth CT slice in the state of frame 1.
    pub ct_slice1: Image2D,
    /// `warp(ct_slice, ct_flow_gt) ≈ ct_slice1`.
    pub ct_flow_gt: FlowField,
    pub ct_bone_mask0: Mask2D,
    pub ct_bone_mask1: Mask2D,
    /// Ultrasound rectangle inside the CT frame.
    pub us_window: Mask2D,
    /// Ultrasound pixel frame → CT frame.
    pub placement: RigidTransform2D,
    /// Probe indentation change from frame 0 to frame 1 (zero unless both
    /// states are presses with the same profile shape).
    pub probe: ProbeProfile,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    w: usize,
    h: usize,
    ct_w: usize,
    ct_h: usize,
    ox: f64,
}

impl Geometry {
    fn new(w: usize, h: usize) -> Result<Self> {
        if w < MIN_SIZE || h < MIN_SIZE {
            return Err(Error::InvalidArgument(format!(
                "phantom needs at least {MIN_SIZE}x{MIN_SIZE}, got {w}x{h}"
            )));
        }
        Ok(Self {
            w,
            h,
            ct_w: w + w / 2,
            ct_h: h + h / 4,
            ox: (w / 4) as f64,
        })
    }

    fn bone_center(&self) -> [f64; 2] {
        [self.ox + 0.5 * self.w as f64, 0.5 * self.h as f64]
    }

    fn bone_axes(&self) -> [f64; 2] {
        [0.22 * self.w as f64, 0.09 * self.h as f64]
    }

    fn bone_radius(&self, m: [f64; 2]) -> f64 {
        let c = self.bone_center();
        let a = self.bone_axes();
        ((m[0] - c[0]) / a[0]).hypot((m[1] - c[1]) / a[1])
    }

    /// Layered soft tissue: incommensurate depth bands with wavy interfaces.
    fn band(&self, m: [f64; 2]) -> f64 {
        let (w, h) = (self.w as f64, self.h as f64);
        let tau = std::f64::consts::TAU;
        let t = m[1] + 0.04 * h * (tau * m[0] / (0.6 * w)).sin() + 0.02 * h * (tau * m[0] / (0.23 * w)).cos();
        let v = 0.5 * (tau * t / (0.13 * h)).sin()
            + 0.3 * (tau * t / (0.31 * h) + 1.3).sin()
            + 0.2 * (tau * t / (0.071 * h) + 0.4).sin();
        0.5 + 0.5 * v
    }

    /// Echo strength before speckle and attenuation.
    fn us_scene(&self, m: [f64; 2]) -> f64 {
        let c = self.bone_center();
        let a = self.bone_axes();
        let r = self.bone_radius(m);
        let upper = smoothstep(-0.3, 0.2, (c[1] - m[1]) / a[1]);
        let rim = 0.85 * (-((r - 1.0) / 0.12).powi(2)).exp() * upper;
        if r < 1.0 {
            return (0.06 + rim).min(1.0);
        }
        let lat = (1.0 - ((m[0] - c[0]) / a[0]).powi(2)).max(0.0);
        let vert = smoothstep(0.0, 1.0, (m[1] - c[1]) / a[1]);
        let shadow = 1.0 - 0.5 * lat.sqrt() * vert;
        let tissue = 0.22 + 0.22 * self.band(m);
        (tissue * shadow).max(rim)
    }

    fn ct_scene(&self, m: [f64; 2]) -> f64 {
        if self.bone_radius(m) < 1.0 {
            BONE_CT
        } else {
            0.35 + 0.12 * self.band(m)
        }
    }

    fn is_bone(&self, m: [f64; 2]) -> bool {
        self.bone_radius(m) < 1.0
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Smooth value noise on a regular material lattice.
struct ValueNoise {
    spacing: f64,
    nx: usize,
    ny: usize,
    vals: Vec<f64>,
}

impl ValueNoise {
    fn new(g: &Geometry, spacing: f64, rng: &mut ChaCha8Rng) -> Self {
        let nx = ((g.ct_w as f64 + 2.0 * SPECKLE_MARGIN) / spacing).ceil() as usize + 2;
        let ny = ((g.ct_h as f64 + 2.0 * SPECKLE_MARGIN) / spacing).ceil() as usize + 2;
        let vals = (0..nx * ny)
            .map(|_| {
                let n: f64 = StandardNormal.sample(rng);
                n.clamp(-3.0, 3.0)
            })
            .collect();
        Self {
            spacing,
            nx,
            ny,
            vals,
        }
    }

    fn at(&self, m: [f64; 2]) -> f64 {
        let gx = ((m[0] + SPECKLE_MARGIN) / self.spacing).clamp(0.0, (self.nx - 2) as f64);
        let gy = ((m[1] + SPECKLE_MARGIN) / self.spacing).clamp(0.0, (self.ny - 2) as f64);
        let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
        let (x0, y0) = (x0.min(self.nx - 2), y0.min(self.ny - 2));
        let tx = smoothstep(0.0, 1.0, gx - x0 as f64);
        let ty = smoothstep(0.0, 1.0, gy - y0 as f64);
        let v = |x: usize, y: usize| self.vals[y * self.nx + x];
        let top = v(x0, y0) * (1.0 - tx) + v(x0 + 1, y0) * tx;
        let bot = v(x0, y0 + 1) * (1.0 - tx) + v(x0 + 1, y0 + 1) * tx;
        top * (1.0 - ty) + bot * ty
    }
}

/// Multiplicative echo modulation: coarse tissue texture times log-normal
/// speckle, both fixed in material coordinates.
struct Speckle {
    speckle: ValueNoise,
    texture: ValueNoise,
}

impl Speckle {
    fn new(g: &Geometry, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let speckle = ValueNoise::new(g, SPECKLE_SPACING, &mut rng);
        let texture = ValueNoise::new(g, TEXTURE_SPACING, &mut rng);
        Self { speckle, texture }
    }

    fn factor(&self, m: [f64; 2]) -> f64 {
        let tex = (1.0 + TEXTURE_GAIN * self.texture.at(m)).max(0.2);
        tex * (SPECKLE_SIGMA_LOG * self.speckle.at(m)).exp()
    }
}

/// One deformation state of the world.
#[derive(Debug, Clone, Copy)]
struct State {
    kind: DeformKind,
    ox: f64,
    depth_scale: f64,
}

impl State {
    fn new(kind: DeformKind, g: &Geometry) -> Self {
        Self {
            kind,
            ox: g.ox,
            depth_scale: 1.0 * g.h as f64,
        }
    }

    /// Tissue displacement `w(M)` in world coordinates.
    fn tissue(&self, m: [f64; 2]) -> [f64; 2] {
        match self.kind {
            DeformKind::None => [0.0, 0.0],
            DeformKind::Translation { tx, ty } => [tx, ty],
            DeformKind::GaussianBump {
                center,
                amplitude,
                sigma,
            } => {
                let dx = m[0] - (center[0] + self.ox);
                let dy = m[1] - center[1];
                [0.0, amplitude * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()]
            }
            DeformKind::ProbePress(p) => {
                [0.0, p.at(m[0] - self.ox) * (-m[1] / self.depth_scale).exp()]
            }
        }
    }

    fn forward(&self, m: [f64; 2]) -> [f64; 2] {
        let d = self.tissue(m);
        [m[0] + d[0], m[1] + d[1]]
    }

    /// `ψ⁻¹` by fixed-point iteration; `w` is a contraction for every
    /// admissible spec.
    fn inverse(&self, q: [f64; 2]) -> [f64; 2] {
        let mut m = q;
        for _ in 0..INVERSE_ITERS {
            let d = self.tissue(m);
            let next = [q[0] - d[0], q[1] - d[1]];
            let delta = (next[0] - m[0]).abs() + (next[1] - m[1]).abs();
            m = next;
            if delta < 1e-13 {
                break;
            }
        }
        m
    }

    fn probe_shift(&self, x: f64) -> f64 {
        match self.kind {
            DeformKind::ProbePress(p) => p.at(x),
            _ => 0.0,
        }
    }

    fn us_to_material(&self, p: [f64; 2]) -> [f64; 2] {
        self.inverse([p[0] + self.ox, p[1] + self.probe_shift(p[0])])
    }

    fn material_to_us(&self, m: [f64; 2]) -> [f64; 2] {
        let q = self.forward(m);
        let x = q[0] - self.ox;
        [x, q[1] - self.probe_shift(x)]
    }
}

/// Cumulative multi-frame phantom. Frame 0 is the undeformed state; frame
/// `k ≥ 1` is the state described by the `k−1`-th spec.
#[derive(Debug, Clone)]
pub struct PhantomSequence {
    pub frames: Vec<Image2D>,
    pub bone_masks: Vec<Mask2D>,
    pub ct_slices: Vec<Image2D>,
    pub ct_bone_masks: Vec<Mask2D>,
    pub us_window: Mask2D,
    pub placement: RigidTransform2D,
    geometry: Geometry,
    states: Vec<State>,
}

impl PhantomSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    fn check_index(&self, k: usize) -> Result<()> {
        if k < self.states.len() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "frame {k} out of range (sequence has {})",
                self.states.len()
            )))
        }
    }

    /// Analytic `F_ab` in the ultrasound frame: `warp(frame b, F_ab) ≈ frame a`.
    pub fn flow_between(&self, a: usize, b: usize) -> Result<FlowField> {
        self.check_index(a)?;
        self.check_index(b)?;
        let (sa, sb) = (self.states[a], self.states[b]);
        FlowField::from_fn(self.geometry.w, self.geometry.h, |x, y| {
            let p = [x as f64, y as f64];
            let q = sb.material_to_us(sa.us_to_material(p));
            [q[0] - p[0], q[1] - p[1]]
        })
    }

    /// CT-frame field with `warp(ct_slices[a], F) ≈ ct_slices[b]`.
    pub fn ct_flow_between(&self, a: usize, b: usize) -> Result<FlowField> {
        self.check_index(a)?;
        self.check_index(b)?;
        let (sa, sb) = (self.states[a], self.states[b]);
        FlowField::from_fn(self.geometry.ct_w, self.geometry.ct_h, |x, y| {
            let p = [x as f64, y as f64];
            let q = sa.forward(sb.inverse(p));
            [q[0] - p[0], q[1] - p[1]]
        })
    }

    /// Tissue displacement of frame `k` at a world (CT-frame) point.
    pub fn tissue_displacement(&self, k: usize, world: [f64; 2]) -> Result<[f64; 2]> {
        self.check_index(k)?;
        Ok(self.states[k].tissue(world))
    }

    /// Probe indentation change between two frames. Non-zero only when both
    /// frames are presses sharing `c_x` and `sigma_probe` (or one of them is
    /// unpressed).
    pub fn probe_between(&self, a: usize, b: usize) -> Result<ProbeProfile> {
        self.check_index(a)?;
        self.check_index(b)?;
        let press = |s: &State| match s.kind {
            DeformKind::ProbePress(p) => Some(p),
            _ => None,
        };
        let centre = 0.5 * (self.geometry.w - 1) as f64;
        let zero = ProbeProfile {
            d_robot: 0.0,
            c_x: centre,
            sigma_probe: 0.25 * self.geometry.w as f64,
        };
        Ok(match (press(&self.states[a]), press(&self.states[b])) {
            (None, Some(pb)) => pb,
            (Some(pa), Some(pb))
                if pa.c_x == pb.c_x && pa.sigma_probe == pb.sigma_probe && pb.d_robot >= pa.d_robot =>
            {
                ProbeProfile {
                    d_robot: pb.d_robot - pa.d_robot,
                    ..pb
                }
            }
            _ => zero,
        })
    }

    pub fn pair(&self, a: usize, b: usize) -> Result<PhantomScene> {
        Ok(PhantomScene {
            i0: self.frames[a].clone(),
            i1: self.frames[b].clone(),
            flow_gt_01: self.flow_between(a, b)?,
            flow_gt_10: self.flow_between(b, a)?,
            bone_mask0: self.bone_masks[a].clone(),
            bone_mask1: self.bone_masks[b].clone(),
            ct_slice: self.ct_slices[a].clone(),
            ct_slice1: self.ct_slices[b].clone(),
            ct_flow_gt: self.ct_flow_between(a, b)?,
            ct_bone_mask0: self.ct_bone_masks[a].clone(),
            ct_bone_mask1: self.ct_bone_masks[b].clone(),
            us_window: self.us_window.clone(),
            placement: self.placement,
            probe: self.probe_between(a, b)?,
        })
    }
}

fn render_us(g: &Geometry, s: &State, speckle: &Speckle) -> Result<(Image2D, Mask2D)> {
    let mut img = Vec::with_capacity(g.w * g.h);
    let mut mask = Vec::with_capacity(g.w * g.h);
    for y in 0..g.h {
        let atten = (-ATTENUATION * y as f64 / g.h as f64).exp();
        for x in 0..g.w {
            let m = s.us_to_material([x as f64, y as f64]);
            img.push((g.us_scene(m) * speckle.factor(m) * atten).clamp(0.0, 1.0));
            mask.push(g.is_bone(m));
        }
    }
    Ok((Image2D::new(g.w, g.h, img)?, Mask2D::new(g.w, g.h, mask)?))
}

fn render_ct(g: &Geometry, s: &State) -> Result<(Image2D, Mask2D)> {
    let mut img = Vec::with_capacity(g.ct_w * g.ct_h);
    let mut mask = Vec::with_capacity(g.ct_w * g.ct_h);
    for y in 0..g.ct_h {
        for x in 0..g.ct_w {
            let m = s.inverse([x as f64, y as f64]);
            img.push(g.ct_scene(m));
            mask.push(g.is_bone(m));
        }
    }
    Ok((Image2D::new(g.ct_w, g.ct_h, img)?, Mask2D::new(g.ct_w, g.ct_h, mask)?))
}

/// Renders the undeformed frame followed by one frame per spec. Every spec
/// describes a cumulative state; the speckle seed is taken from the first.
pub fn generate_sequence(specs: &[DeformSpec], width: usize, height: usize) -> Result<PhantomSequence> {
    let g = Geometry::new(width, height)?;
    let first = specs
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty spec list".into()))?;
    for s in specs {
        s.validate(width)?;
    }
    let speckle = Speckle::new(&g, first.seed);
    let states: Vec<State> = std::iter::once(DeformKind::None)
        .chain(specs.iter().map(|s| s.kind))
        .map(|k| State::new(k, &g))
        .collect();

    let mut frames = Vec::with_capacity(states.len());
    let mut bone_masks = Vec::with_capacity(states.len());
    let mut ct_slices = Vec::with_capacity(states.len());
    let mut ct_bone_masks = Vec::with_capacity(states.len());
    for s in &states {
        let (img, mask) = render_us(&g, s, &speckle)?;
        frames.push(img);
        bone_masks.push(mask);
        let (ct, ct_mask) = render_ct(&g, s)?;
        ct_slices.push(ct);
        ct_bone_masks.push(ct_mask);
    }
    let ox = g.ox as usize;
    let us_window = Mask2D::from_fn(g.ct_w, g.ct_h, |x, y| x >= ox && x < ox + g.w && y < g.h)?;
    Ok(PhantomSequence {
        frames,
        bone_masks,
        ct_slices,
        ct_bone_masks,
        us_window,
        placement: RigidTransform2D::new(g.ox, 0.0, 0.0)?,
        geometry: g,
        states,
    })
}

/// Single pair: frame 0 undeformed, frame 1 in the state of `spec`.
pub fn generate(spec: &DeformSpec, width: usize, height: usize) -> Result<PhantomScene> {
    generate_sequence(std::slice::from_ref(spec), width, height)?.pair(0, 1)
}

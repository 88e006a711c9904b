//! Ray-cast renderer for calibrated test scenes with exact depth.
//!
//! Surfaces carry a solid (3D) procedural texture, so the same surface point
//! has the same albedo in every view, and Lambertian shading does not depend
//! on the viewer. Both make multi-view correspondences exact.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{DepthMap, Image};

use super::camera::{Camera, Extrinsics, Intrinsics};
use super::CameraView;

/// Hits closer than this along a ray are ignored.
const RAY_EPS: f64 = 1e-9;

/// Relative tolerance when deciding whether a surface point is the first
/// hit seen from another camera.
const VISIBILITY_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    pub center: Vector3<f64>,
    pub radius: f64,
}

/// Plane through `point` with unit `normal` facing the cameras.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
}

impl Plane {
    /// Plane crossing the optical axis at depth `depth`, rotated by `tilt_x`
    /// about the x axis and `tilt_y` about the y axis (radians).
    pub fn tilted(depth: f64, tilt_x: f64, tilt_y: f64) -> Self {
        let n = Vector3::new(
            tilt_y.sin() * tilt_x.cos(),
            tilt_x.sin(),
            -tilt_y.cos() * tilt_x.cos(),
        );
        Self {
            point: Vector3::new(0.0, 0.0, depth),
            normal: n.normalize(),
        }
    }

    pub fn signed_distance(&self, x: &Vector3<f64>) -> f64 {
        self.normal.dot(&(x - self.point))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub focal: f64,
    pub num_views: usize,
    /// Radius of the circle (around the reference center, in its image
    /// plane) on which source cameras sit.
    pub baseline: f64,
    /// Angle of the first source on that circle (radians).
    pub phase: f64,
    /// Depth along the reference axis that every source looks at.
    pub target_depth: f64,
    pub plane: Plane,
    pub sphere: Option<Sphere>,
    /// Direction toward the light, world frame.
    pub light: Vector3<f64>,
    pub ambient: f64,
    /// Side length of the coarsest noise cell (scene units).
    pub texture_scale: f64,
    /// Scene-wide depth range used for plane sweeping.
    pub d_min: f64,
    pub d_max: f64,
    /// Sub-pixel rays per axis averaged into each pixel's color.
    pub supersample: usize,
    /// Perturb plane tilt, sphere placement and source phase from the seed.
    pub randomize_geometry: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 80,
            focal: 160.0,
            num_views: 3,
            baseline: 0.6,
            phase: 0.0,
            target_depth: 3.0,
            plane: Plane::tilted(3.0, 0.12, 0.35),
            sphere: Some(Sphere {
                center: Vector3::new(-0.2, 0.05, 2.5),
                radius: 0.3,
            }),
            light: Vector3::new(-0.3, -0.5, -1.0),
            ambient: 0.35,
            texture_scale: 0.15,
            d_min: 1.5,
            d_max: 5.0,
            supersample: 3,
            randomize_geometry: false,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image extent must be positive".into()));
        }
        if !(self.focal > 0.0) {
            return Err(Error::Config(format!(
                "focal must be positive, got {}",
                self.focal
            )));
        }
        if self.supersample == 0 {
            return Err(Error::Config("supersample must be at least 1".into()));
        }
        if self.num_views == 0 {
            return Err(Error::Config("num_views must be at least 1".into()));
        }
        if !(self.d_min > 0.0 && self.d_max > self.d_min) {
            return Err(Error::Config(format!(
                "depth range must satisfy 0 < d_min < d_max (got {}, {})",
                self.d_min, self.d_max
            )));
        }
        if !(self.baseline >= 0.0 && self.target_depth > 0.0 && self.texture_scale > 0.0) {
            return Err(Error::Config(
                "baseline must be non-negative, target_depth and texture_scale positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.ambient) {
            return Err(Error::Config(format!(
                "ambient must lie in [0, 1], got {}",
                self.ambient
            )));
        }
        if self.light.norm() < 1e-12 || (self.plane.normal.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(
                "light direction and plane normal must be non-zero".into(),
            ));
        }
        if let Some(s) = &self.sphere {
            if !(s.radius > 0.0) {
                return Err(Error::Config(format!(
                    "sphere radius must be positive, got {}",
                    s.radius
                )));
            }
        }
        Ok(())
    }

    fn variant(&self, rng: &mut ChaCha8Rng) -> SceneSpec {
        let mut s = self.clone();
        let depth = self.plane.point.z * rng.gen_range(0.9..1.1);
        s.plane = Plane::tilted(depth, rng.gen_range(-0.3..0.3), rng.gen_range(-0.45..0.45));
        if let Some(sp) = &self.sphere {
            s.sphere = Some(Sphere {
                center: Vector3::new(
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.2..0.2),
                    sp.center.z * rng.gen_range(0.9..1.1),
                ),
                radius: sp.radius * rng.gen_range(0.7..1.2),
            });
        }
        s.phase = self.phase + rng.gen_range(-0.5..0.5);
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub seed: u64,
    /// View 0 is the reference.
    pub views: Vec<CameraView>,
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    t: f64,
    point: Vector3<f64>,
    normal: Vector3<f64>,
}

struct Surfaces {
    plane: Plane,
    sphere: Option<Sphere>,
}

impl Surfaces {
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let denom = self.plane.normal.dot(dir);
        if denom.abs() > 1e-12 {
            let t = self.plane.normal.dot(&(self.plane.point - origin)) / denom;
            if t > RAY_EPS {
                best = Some(Hit {
                    t,
                    point: origin + dir * t,
                    normal: self.plane.normal,
                });
            }
        }
        if let Some(s) = &self.sphere {
            let oc = origin - s.center;
            let b = oc.dot(dir);
            let c = oc.norm_squared() - s.radius * s.radius;
            let disc = b * b - c;
            if disc >= 0.0 {
                let t = -b - disc.sqrt();
                if t > RAY_EPS && best.is_none_or(|h| t < h.t) {
                    let point = origin + dir * t;
                    best = Some(Hit {
                        t,
                        point,
                        normal: (point - s.center) / s.radius,
                    });
                }
            }
        }
        best
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, x: i64, y: i64, z: i64) -> f64 {
    let h = splitmix(seed ^ splitmix(x as u64 ^ splitmix(y as u64 ^ splitmix(z as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Trilinearly blended lattice noise in `[0, 1]`.
fn value_noise(seed: u64, p: Vector3<f64>) -> f64 {
    let (fx, fy, fz) = (p.x.floor(), p.y.floor(), p.z.floor());
    let (ix, iy, iz) = (fx as i64, fy as i64, fz as i64);
    let (tx, ty, tz) = (smooth(p.x - fx), smooth(p.y - fy), smooth(p.z - fz));
    let mut acc = 0.0;
    for c in 0..8 {
        let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
        let w = (if dx == 1 { tx } else { 1.0 - tx })
            * (if dy == 1 { ty } else { 1.0 - ty })
            * (if dz == 1 { tz } else { 1.0 - tz });
        acc += w * lattice(seed, ix + dx, iy + dy, iz + dz);
    }
    acc
}

struct Texture {
    seed: u64,
    scale: f64,
}

impl Texture {
    fn albedo(&self, x: &Vector3<f64>, channel: usize) -> f64 {
        let p = x / self.scale;
        let s = splitmix(self.seed.wrapping_add(channel as u64));
        let shared = splitmix(self.seed.wrapping_add(1000));
        let mut n = 0.0;
        let mut amp = 0.5;
        let mut freq = 1.0;
        for octave in 0..3u64 {
            let own = value_noise(s ^ octave, p * freq);
            let common = value_noise(shared ^ octave, p * freq);
            n += amp * (0.6 * common + 0.4 * own);
            freq *= 2.0;
            amp *= 0.5;
        }
        let n = n / 0.875;
        let w = std::f64::consts::TAU / (2.0 * self.scale);
        let checker = (x.x * w).sin() * (x.y * w).sin() * (x.z * w).sin();
        let checker = 0.5 + 0.5 * (3.0 * checker).tanh();
        0.1 + 0.8 * (0.65 * n + 0.35 * checker)
    }
}

fn build_cameras(spec: &SceneSpec) -> Result<Vec<Camera>> {
    let intr = Intrinsics::new(
        spec.focal,
        spec.focal,
        (spec.width as f64 - 1.0) / 2.0,
        (spec.height as f64 - 1.0) / 2.0,
    )?;
    let mut cams = vec![Camera::new(intr, Extrinsics::identity())];
    let target = Vector3::new(0.0, 0.0, spec.target_depth);
    let sources = spec.num_views - 1;
    for k in 0..sources {
        let a = spec.phase + std::f64::consts::TAU * k as f64 / sources as f64;
        let center = Vector3::new(spec.baseline * a.cos(), spec.baseline * a.sin(), 0.0);
        let ext = Extrinsics::look_at(center, target, Vector3::new(0.0, 1.0, 0.0))?;
        cams.push(Camera::new(intr, ext));
    }
    Ok(cams)
}

fn check_cameras(spec: &SceneSpec, cams: &[Camera]) -> Result<()> {
    for (i, c) in cams.iter().enumerate() {
        let o = c.center();
        if spec.plane.signed_distance(&o) <= 0.0 {
            return Err(Error::Config(format!(
                "camera {i} lies on or behind the plane"
            )));
        }
        if let Some(s) = &spec.sphere {
            if (o - s.center).norm() <= s.radius {
                return Err(Error::Config(format!("camera {i} lies inside the sphere")));
            }
            if spec.plane.signed_distance(&s.center) <= -s.radius {
                return Err(Error::Config(
                    "sphere lies entirely behind the plane".into(),
                ));
            }
        }
    }
    Ok(())
}

/// World-frame unit ray through pixel `(u, v)`.
fn pixel_ray(cam: &Camera, u: f64, v: f64) -> Vector3<f64> {
    let k = &cam.intrinsics;
    let d = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
    (cam.extrinsics.rotation.transpose() * d).normalize()
}

/// Renders `spec` with texture (and, when enabled, geometry) drawn from `seed`.
pub fn render_synthetic_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let spec = if spec.randomize_geometry {
        spec.variant(&mut ChaCha8Rng::seed_from_u64(seed))
    } else {
        spec.clone()
    };
    let cams = build_cameras(&spec)?;
    check_cameras(&spec, &cams)?;
    let surfaces = Surfaces {
        plane: spec.plane,
        sphere: spec.sphere,
    };
    let texture = Texture {
        seed: splitmix(seed),
        scale: spec.texture_scale,
    };
    let light = spec.light.normalize();
    let (h, w) = (spec.height, spec.width);
    let mut views = Vec::with_capacity(cams.len());
    for cam in cams {
        let origin = cam.center();
        let mut image = Image::zeros(3, h, w);
        let mut depth = DepthMap::filled(h, w, 0.0);
        let mut valid = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let dir = pixel_ray(&cam, x as f64, y as f64);
                let Some(hit) = surfaces.intersect(&origin, &dir) else {
                    continue;
                };
                let ss = spec.supersample;
                let mut rgb = [0.0; 3];
                let mut hits = 0;
                for sy in 0..ss {
                    for sx in 0..ss {
                        let ox = (sx as f64 + 0.5) / ss as f64 - 0.5;
                        let oy = (sy as f64 + 0.5) / ss as f64 - 0.5;
                        let d = pixel_ray(&cam, x as f64 + ox, y as f64 + oy);
                        let Some(sub) = surfaces.intersect(&origin, &d) else {
                            continue;
                        };
                        let n = if sub.normal.dot(&d) > 0.0 {
                            -sub.normal
                        } else {
                            sub.normal
                        };
                        let shade = spec.ambient + (1.0 - spec.ambient) * n.dot(&light).max(0.0);
                        for (c, v) in rgb.iter_mut().enumerate() {
                            *v += texture.albedo(&sub.point, c) * shade;
                        }
                        hits += 1;
                    }
                }
                for (c, v) in rgb.iter().enumerate() {
                    image.set(c, y, x, (v / hits as f64).clamp(0.0, 1.0));
                }
                depth.set(y, x, cam.world_to_camera(&hit.point).z);
                valid[y * w + x] = true;
            }
        }
        views.push(CameraView {
            camera: cam,
            image,
            depth: Some(depth),
            valid: Some(valid),
        });
    }
    Ok(SyntheticScene { spec, seed, views })
}

impl SyntheticScene {
    fn surfaces(&self) -> Surfaces {
        Surfaces {
            plane: self.spec.plane,
            sphere: self.spec.sphere,
        }
    }

    /// First surface point seen through continuous pixel `(u, v)` of `view`.
    pub fn surface_point(&self, view: usize, u: f64, v: f64) -> Option<Vector3<f64>> {
        let cam = &self.views[view].camera;
        self.surfaces()
            .intersect(&cam.center(), &pixel_ray(cam, u, v))
            .map(|h| h.point)
    }

    /// Whether `point` is the first surface hit along the ray from the
    /// center of `view` and projects inside its image.
    pub fn is_visible(&self, view: usize, point: &Vector3<f64>) -> bool {
        let cam = &self.views[view].camera;
        let (u, v, z) = cam.project(point);
        let (h, w) = (self.spec.height as f64, self.spec.width as f64);
        if !(z > 0.0 && u >= 0.0 && v >= 0.0 && u <= w - 1.0 && v <= h - 1.0) {
            return false;
        }
        let o = cam.center();
        let dist = (point - o).norm();
        match self.surfaces().intersect(&o, &((point - o) / dist)) {
            Some(hit) => (hit.t - dist).abs() <= VISIBILITY_TOL * dist.max(1.0),
            None => false,
        }
    }

    /// Pixel of `src` observing the surface point seen at integer pixel
    /// `(x, y)` of `reference`, or `None` when the point is not co-visible.
    /// Computed by ray casting, independent of the depth maps.
    pub fn correspondence(
        &self,
        reference: usize,
        src: usize,
        x: usize,
        y: usize,
    ) -> Option<(f64, f64)> {
        let p = self.surface_point(reference, x as f64, y as f64)?;
        if !self.is_visible(src, &p) {
            return None;
        }
        let (u, v, _) = self.views[src].camera.project(&p);
        Some((u, v))
    }
}

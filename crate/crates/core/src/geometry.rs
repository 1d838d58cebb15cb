//! Pinhole cameras, hemisphere poses, patch ray generation and bilinear
//! patch extraction.
//!
//! Conventions: world is y-up, the camera looks down its local −z, and
//! image rows grow downward. Pixel centres sit at integer coordinates.

use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::image::RgbImage;

pub type Vec3 = [f64; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Default horizontal field of view used when intrinsics are derived from
/// the image size.
pub const DEFAULT_FOV_X_DEG: f64 = 40.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        ensure!(
            fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite(),
            "intrinsics: focal lengths must be positive, got ({fx}, {fy})"
        );
        ensure!(
            (0.0..width as f64).contains(&cx) && (0.0..height as f64).contains(&cy),
            "intrinsics: principal point ({cx}, {cy}) outside {width}x{height}"
        );
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Square pixels, centred principal point, given horizontal FOV.
    pub fn from_fov(width: usize, height: usize, fov_x_deg: f64) -> Result<Self> {
        ensure!(width >= 1 && height >= 1, "intrinsics: empty image");
        ensure!(
            fov_x_deg > 0.0 && fov_x_deg < 180.0,
            "intrinsics: field of view {fov_x_deg} outside (0, 180)"
        );
        let f = (width as f64 / 2.0) / (fov_x_deg.to_radians() / 2.0).tan();
        Self::new(
            f,
            f,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn for_image(width: usize, height: usize) -> Result<Self> {
        Self::from_fov(width, height, DEFAULT_FOV_X_DEG)
    }
}

/// Camera on a sphere around the origin: yaw θ about +y, pitch φ above the
/// ground plane, plus a horizontal shift `d` along world x.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub radius: f64,
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub shift: f64,
}

impl Pose {
    pub fn new(radius: f64, yaw_deg: f64, pitch_deg: f64, shift: f64) -> Result<Self> {
        let p = Self {
            radius,
            yaw_deg,
            pitch_deg,
            shift,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.radius > 0.0 && self.radius.is_finite(),
            "pose: radius must be positive, got {}",
            self.radius
        );
        ensure!(
            (-180.0..=180.0).contains(&self.yaw_deg),
            "pose: yaw {} outside [-180, 180]",
            self.yaw_deg
        );
        ensure!(
            (0.0..=90.0).contains(&self.pitch_deg),
            "pose: pitch {} outside [0, 90]",
            self.pitch_deg
        );
        ensure!(self.shift.is_finite(), "pose: shift must be finite");
        Ok(())
    }

    pub fn position(&self) -> Vec3 {
        let (t, p) = (self.yaw_deg.to_radians(), self.pitch_deg.to_radians());
        [
            self.radius * p.cos() * t.sin() + self.shift,
            self.radius * p.sin(),
            self.radius * p.cos() * t.cos(),
        ]
    }

    pub fn target(&self) -> Vec3 {
        [self.shift, 0.0, 0.0]
    }
}

/// Camera-to-world transform. Rotation columns are the camera's right, up
/// and back axes in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn column(&self, c: usize) -> Vec3 {
        [self.rotation[0][c], self.rotation[1][c], self.rotation[2][c]]
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    /// Camera looking direction in world space (local −z).
    pub fn forward(&self) -> Vec3 {
        let b = self.column(2);
        [-b[0], -b[1], -b[2]]
    }

    /// World point to camera coordinates.
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let q = sub(p, self.translation);
        let r = &self.rotation;
        [
            r[0][0] * q[0] + r[1][0] * q[1] + r[2][0] * q[2],
            r[0][1] * q[0] + r[1][1] * q[1] + r[2][1] * q[2],
            r[0][2] * q[0] + r[1][2] * q[1] + r[2][2] * q[2],
        ]
    }
}

pub fn pose_to_camera(pose: &Pose) -> Result<RigidTransform> {
    pose.validate()?;
    let eye = pose.position();
    let forward = normalize(sub(pose.target(), eye));
    let back = [-forward[0], -forward[1], -forward[2]];
    // at the pole the y axis is parallel to the view direction
    let up = if forward[1].abs() > 1.0 - 1e-9 {
        [0.0, 0.0, -1.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let right = normalize(cross(up, back));
    let cam_up = cross(back, right);
    let mut rotation = [[0.0; 3]; 3];
    for (c, axis) in [right, cam_up, back].iter().enumerate() {
        for r in 0..3 {
            rotation[r][c] = axis[r];
        }
    }
    Ok(RigidTransform {
        rotation,
        translation: eye,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }
}

/// Ray through continuous pixel coordinate `(x, y)`.
pub fn pixel_ray(k: &Intrinsics, cam: &RigidTransform, x: f64, y: f64, t_near: f64, t_far: f64) -> Ray {
    let local = normalize([(x - k.cx) / k.fx, -(y - k.cy) / k.fy, -1.0]);
    Ray {
        origin: cam.translation,
        direction: normalize(cam.rotate(local)),
        t_near,
        t_far,
    }
}

/// Near/far bounds enclosing a sphere of `scene_radius` around the origin.
pub fn scene_bounds(pose: &Pose, scene_radius: f64) -> Result<(f64, f64)> {
    let dist = norm(pose.position());
    let near = (dist - scene_radius).max(1e-3);
    let far = dist + scene_radius;
    ensure!(near < far, "scene bounds: degenerate range");
    Ok((near, far))
}

/// Patch of `size × size` samples centred at `center` with spacing `scale`
/// pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchPattern {
    pub center: [f64; 2],
    pub scale: f64,
    pub size: usize,
}

impl PatchPattern {
    pub fn new(center: [f64; 2], scale: f64, size: usize) -> Result<Self> {
        ensure!(size >= 2, "patch: side length {size} < 2");
        ensure!(
            scale > 0.0 && scale.is_finite(),
            "patch: scale must be positive, got {scale}"
        );
        ensure!(
            center.iter().all(|c| c.is_finite()),
            "patch: centre must be finite"
        );
        Ok(Self {
            center,
            scale,
            size,
        })
    }

    /// Pattern covering a whole `width × height` image exactly at pixel
    /// centres when `size` matches the image side.
    pub fn full_image(width: usize, height: usize, size: usize) -> Result<Self> {
        let span = (width.min(height) as f64 - 1.0).max(1.0);
        Self::new(
            [(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0],
            span / (size as f64 - 1.0),
            size,
        )
    }

    fn offset(&self, i: usize) -> f64 {
        self.scale * (i as f64 - (self.size as f64 - 1.0) / 2.0)
    }

    /// Sample coordinates `(x, y)` in row-major order.
    pub fn coordinates(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.size * self.size);
        for row in 0..self.size {
            for col in 0..self.size {
                out.push([
                    self.center[0] + self.offset(col),
                    self.center[1] + self.offset(row),
                ]);
            }
        }
        out
    }
}

/// One ray per pattern coordinate, row-major.
pub fn generate_patch_rays(
    k: &Intrinsics,
    pose: &Pose,
    pattern: &PatchPattern,
    t_near: f64,
    t_far: f64,
) -> Result<Vec<Ray>> {
    ensure!(
        t_near > 0.0 && t_near < t_far,
        "rays: need 0 < t_near < t_far, got {t_near}, {t_far}"
    );
    let cam = pose_to_camera(pose)?;
    Ok(pattern
        .coordinates()
        .into_iter()
        .map(|[x, y]| pixel_ray(k, &cam, x, y, t_near, t_far))
        .collect())
}

/// Rays for every pixel of the image described by `k`, row-major.
pub fn image_rays(k: &Intrinsics, pose: &Pose, t_near: f64, t_far: f64) -> Result<Vec<Ray>> {
    ensure!(
        t_near > 0.0 && t_near < t_far,
        "rays: need 0 < t_near < t_far, got {t_near}, {t_far}"
    );
    let cam = pose_to_camera(pose)?;
    let mut out = Vec::with_capacity(k.width * k.height);
    for y in 0..k.height {
        for x in 0..k.width {
            out.push(pixel_ray(k, &cam, x as f64, y as f64, t_near, t_far));
        }
    }
    Ok(out)
}

/// Bilinear samples of `image` at the pattern coordinates, clamped to the
/// border. Returned as a `size × size` image.
pub fn extract_patch(image: &RgbImage, pattern: &PatchPattern) -> Result<RgbImage> {
    ensure!(!image.is_empty(), "extract_patch: empty image");
    let data = pattern
        .coordinates()
        .into_iter()
        .flat_map(|[x, y]| image.sample_bilinear(x, y))
        .collect();
    RgbImage::new(pattern.size, pattern.size, data)
}

/// Closed interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn sample(&self, rng: &mut impl Rng, what: &str) -> Result<f64> {
        ensure!(
            self.lo.is_finite() && self.hi.is_finite(),
            "{what}: range bounds must be finite"
        );
        if self.lo > self.hi {
            return Err(Error::contract(format!(
                "{what}: inverted range [{}, {}]",
                self.lo, self.hi
            )));
        }
        if self.lo == self.hi {
            return Ok(self.lo);
        }
        let u: f64 = rng.random();
        Ok((self.lo + (self.hi - self.lo) * u).min(self.hi))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosePrior {
    pub yaw: Range,
    pub pitch: Range,
    pub radius: Range,
    pub shift: Range,
}

impl PosePrior {
    pub fn with_radius(radius: f64) -> Self {
        Self {
            radius: Range::point(radius),
            ..Self::default()
        }
    }
}

impl Default for PosePrior {
    fn default() -> Self {
        Self {
            yaw: Range::new(-180.0, 180.0),
            pitch: Range::new(0.0, 90.0),
            radius: Range::point(4.0),
            shift: Range::point(0.0),
        }
    }
}

pub fn sample_pose(prior: &PosePrior, rng: &mut impl Rng) -> Result<Pose> {
    let yaw = prior.yaw.sample(rng, "yaw")?;
    let pitch = prior.pitch.sample(rng, "pitch")?;
    let radius = prior.radius.sample(rng, "radius")?;
    let shift = prior.shift.sample(rng, "shift")?;
    Pose::new(radius, yaw, pitch, shift)
}

/// Draws a patch whose footprint spans a uniform fraction (from
/// `extent`) of the shorter image side, placed uniformly so it stays inside
/// the image.
pub fn sample_pattern(
    width: usize,
    height: usize,
    size: usize,
    extent: Range,
    rng: &mut impl Rng,
) -> Result<PatchPattern> {
    ensure!(width >= 2 && height >= 2, "sample_pattern: image too small");
    ensure!(
        extent.lo > 0.0 && extent.hi <= 1.0,
        "sample_pattern: extent range [{}, {}] must lie in (0, 1]",
        extent.lo,
        extent.hi
    );
    let frac = extent.sample(rng, "patch extent")?;
    let span = frac * (width.min(height) as f64 - 1.0);
    let half = span / 2.0;
    let cx = Range::new(half, width as f64 - 1.0 - half).sample(rng, "patch centre")?;
    let cy = Range::new(half, height as f64 - 1.0 - half).sample(rng, "patch centre")?;
    PatchPattern::new([cx, cy], span / (size as f64 - 1.0), size)
}

/// Projects a world point to continuous pixel coordinates; `None` behind the
/// camera.
pub fn project(k: &Intrinsics, cam: &RigidTransform, p: Vec3) -> Option<[f64; 2]> {
    let q = cam.to_camera(p);
    if q[2] >= 0.0 {
        return None;
    }
    Some([k.cx + k.fx * q[0] / -q[2], k.cy - k.fy * q[1] / -q[2]])
}

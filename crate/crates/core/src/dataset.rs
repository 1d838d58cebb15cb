//! Procedural labelled dataset: analytic primitives (class = shape,
//! style = colour) ray traced from hemisphere poses, stored as PPM files
//! indexed by a tab-separated manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::geometry::{
    self, dot, normalize, sample_pose, Intrinsics, Pose, PosePrior, Range, Ray, Vec3,
};
use crate::image::{decode_ppm, encode_ppm, RgbImage};
use crate::nn::seeded;

pub const MANIFEST_HEADER: &str = "ctrlnerf-manifest 1";
pub const MANIFEST_FILE: &str = "manifest.tsv";

pub const STYLE_COLORS: [[f64; 3]; 4] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.9, 0.1],
    [0.1, 0.1, 0.9],
    [0.9, 0.9, 0.1],
];

pub const SHAPE_NAMES: [&str; 4] = ["sphere", "box", "cylinder", "torus"];
pub const STYLE_NAMES: [&str; 4] = ["red", "green", "blue", "yellow"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Sphere,
    Box,
    Cylinder,
    Torus,
}

impl Shape {
    pub fn from_class(class: usize) -> Result<Self> {
        Ok(match class {
            0 => Shape::Sphere,
            1 => Shape::Box,
            2 => Shape::Cylinder,
            3 => Shape::Torus,
            _ => return Err(Error::contract(format!("no shape for class {class} (max 3)"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: [f64; 3],
    pub scale: f64,
    pub lambertian: bool,
}

impl SceneSpec {
    pub fn new(class: usize, style: usize) -> Result<Self> {
        ensure!(style < STYLE_COLORS.len(), "no colour for style {style} (max 3)");
        Ok(Self {
            shape: Shape::from_class(class)?,
            color: STYLE_COLORS[style],
            scale: 1.0,
            lambertian: true,
        })
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.scale > 0.0 && self.scale <= 1.0,
            "scene: scale {} outside (0, 1]",
            self.scale
        );
        ensure!(
            self.color.iter().all(|c| (0.0..=1.0).contains(c)),
            "scene: colour outside [0, 1]"
        );
        Ok(())
    }
}

/// Nearest hit distance and outward unit normal, in object units.
fn intersect(shape: Shape, o: Vec3, d: Vec3) -> Option<(f64, Vec3)> {
    match shape {
        Shape::Sphere => {
            let b = dot(o, d);
            let c = dot(o, o) - 1.0;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let t = -b - disc.sqrt();
            if t <= 0.0 {
                return None;
            }
            let p = add(o, d, t);
            Some((t, p))
        }
        Shape::Box => {
            let h = 0.55;
            let (mut t0, mut t1, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
            for a in 0..3 {
                if d[a].abs() < 1e-15 {
                    if o[a].abs() > h {
                        return None;
                    }
                    continue;
                }
                let (mut lo, mut hi) = ((-h - o[a]) / d[a], (h - o[a]) / d[a]);
                if lo > hi {
                    std::mem::swap(&mut lo, &mut hi);
                }
                if lo > t0 {
                    t0 = lo;
                    axis = a;
                }
                t1 = t1.min(hi);
            }
            if t0 > t1 || t0 <= 0.0 {
                return None;
            }
            let mut n = [0.0; 3];
            n[axis] = -d[axis].signum();
            Some((t0, n))
        }
        Shape::Cylinder => {
            let (r, h) = (0.6, 0.6);
            let mut best: Option<(f64, Vec3)> = None;
            let mut keep = |t: f64, n: Vec3| {
                if t > 0.0 && best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, n));
                }
            };
            let a = d[0] * d[0] + d[2] * d[2];
            if a > 1e-15 {
                let b = o[0] * d[0] + o[2] * d[2];
                let c = o[0] * o[0] + o[2] * o[2] - r * r;
                let disc = b * b - a * c;
                if disc >= 0.0 {
                    let t = (-b - disc.sqrt()) / a;
                    let p = add(o, d, t);
                    if p[1].abs() <= h {
                        keep(t, normalize([p[0], 0.0, p[2]]));
                    }
                }
            }
            if d[1].abs() > 1e-15 {
                for cap in [h, -h] {
                    let t = (cap - o[1]) / d[1];
                    let p = add(o, d, t);
                    if p[0] * p[0] + p[2] * p[2] <= r * r {
                        keep(t, [0.0, cap.signum(), 0.0]);
                    }
                }
            }
            best
        }
        Shape::Torus => {
            let (big, small) = (0.65, 0.3);
            let sdf = |p: Vec3| {
                let q = (p[0] * p[0] + p[2] * p[2]).sqrt() - big;
                (q * q + p[1] * p[1]).sqrt() - small
            };
            // start at the bounding sphere
            let b = dot(o, d);
            let c = dot(o, o) - (big + small) * (big + small);
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let (mut t, t_end) = ((-b - disc.sqrt()).max(0.0), -b + disc.sqrt());
            for _ in 0..512 {
                let s = sdf(add(o, d, t));
                if s < 1e-10 {
                    let p = add(o, d, t);
                    let rho = (p[0] * p[0] + p[2] * p[2]).sqrt().max(1e-12);
                    let ring = [p[0] / rho * big, 0.0, p[2] / rho * big];
                    return Some((t, normalize([p[0] - ring[0], p[1], p[2] - ring[2]])));
                }
                t += s;
                if t > t_end {
                    return None;
                }
            }
            None
        }
    }
}

fn add(o: Vec3, d: Vec3, t: f64) -> Vec3 {
    [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]
}

/// Hit depth along `ray` and the shaded colour, or `None` on a miss.
pub fn trace(spec: &SceneSpec, ray: &Ray) -> Option<(f64, [f64; 3])> {
    let s = spec.scale;
    let o = [ray.origin[0] / s, ray.origin[1] / s, ray.origin[2] / s];
    let (t, n) = intersect(spec.shape, o, ray.direction)?;
    let shade = if spec.lambertian {
        dot(n, ray.direction).mul_add(-1.0, 0.0).max(0.0)
    } else {
        1.0
    };
    Some((t * s, spec.color.map(|c| c * shade)))
}

/// Ground-truth image: shaded primitive over a white background, headlight
/// at the camera.
pub fn raytrace_reference(spec: &SceneSpec, k: &Intrinsics, pose: &Pose) -> Result<RgbImage> {
    spec.validate()?;
    let rays = geometry::image_rays(k, pose, 1e-6, f64::MAX)?;
    let data = rays
        .iter()
        .flat_map(|r| match trace(spec, r) {
            Some((_, c)) => c.map(|v| v as f32),
            None => [1.0; 3],
        })
        .collect();
    RgbImage::new(k.width, k.height, data)
}

/// Depth map of the primitive (`None` for background pixels).
pub fn reference_depth(spec: &SceneSpec, k: &Intrinsics, pose: &Pose) -> Result<Vec<Option<f64>>> {
    spec.validate()?;
    let rays = geometry::image_rays(k, pose, 1e-6, f64::MAX)?;
    Ok(rays.iter().map(|r| trace(spec, r).map(|h| h.0)).collect())
}

/// One labelled image; `pose` is present for posed datasets.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: RgbImage,
    pub class: usize,
    pub style: usize,
    pub pose: Option<Pose>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub path: String,
    pub class: usize,
    pub style: usize,
    pub pose: Pose,
}

impl ManifestRow {
    pub fn to_line(&self) -> String {
        let p = &self.pose;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.path, self.class, self.style, p.yaw_deg, p.pitch_deg, p.radius, p.shift
        )
    }
}

pub fn format_manifest(rows: &[ManifestRow]) -> String {
    let mut s = String::from(MANIFEST_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_line());
        s.push('\n');
    }
    s
}

/// Parses manifest text; `origin` names the file in error messages.
pub fn parse_manifest(text: &str, origin: &Path) -> Result<Vec<ManifestRow>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.split('\n');
    match lines.next() {
        Some(h) if h.trim_end_matches('\r') == MANIFEST_HEADER => {}
        Some(h) => return Err(err(1, format!("expected header {MANIFEST_HEADER:?}, found {h:?}"))),
        None => return Err(err(1, "empty manifest".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(err(lineno, format!("expected 7 tab-separated fields, found {}", f.len())));
        }
        let int = |s: &str, what: &str| -> Result<usize> {
            s.parse().map_err(|_| err(lineno, format!("bad {what} {s:?}")))
        };
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(lineno, format!("bad {what} {s:?}")))
        };
        ensure!(!f[0].is_empty(), "manifest line {lineno}: empty path");
        let pose = Pose {
            yaw_deg: num(f[3], "theta")?,
            pitch_deg: num(f[4], "phi")?,
            radius: num(f[5], "radius")?,
            shift: num(f[6], "shift")?,
        };
        pose.validate().map_err(|e| err(lineno, e.to_string()))?;
        rows.push(ManifestRow {
            path: f[0].to_string(),
            class: int(f[1], "class id")?,
            style: int(f[2], "style id")?,
            pose,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub classes: usize,
    pub styles: usize,
    pub poses_per_cell: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub prior: PosePrior,
    pub scale: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            styles: 4,
            poses_per_cell: 50,
            width: 64,
            height: 64,
            seed: 0,
            prior: PosePrior::default(),
            scale: 1.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (1..=4).contains(&self.classes) && (1..=4).contains(&self.styles),
            "dataset: classes and styles must be in 1..=4"
        );
        ensure!(self.poses_per_cell >= 1, "dataset: need at least one pose per cell");
        ensure!(self.width >= 2 && self.height >= 2, "dataset: image too small");
        Ok(())
    }
}

/// Loaded or generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
    pub items: Vec<LabeledImage>,
}

impl LabeledImageSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Largest class and style id plus one.
    pub fn label_counts(&self) -> (usize, usize) {
        let m = self.items.iter().map(|e| e.class + 1).max().unwrap_or(0);
        let n = self.items.iter().map(|e| e.style + 1).max().unwrap_or(0);
        (m, n)
    }

    /// Distinct `(class, style)` pairs present, sorted.
    pub fn label_pairs(&self) -> Vec<(usize, usize)> {
        let mut v: Vec<_> = self.items.iter().map(|e| (e.class, e.style)).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.items.first().map(|e| (e.image.width(), e.image.height()))
    }
}

/// Renders the images in memory, cell by cell with poses drawn in order.
pub fn generate_items(config: &DatasetConfig) -> Result<Vec<(ManifestRow, LabeledImage)>> {
    config.validate()?;
    let k = Intrinsics::for_image(config.width, config.height)?;
    let mut rng = seeded(config.seed);
    let mut out = Vec::new();
    for class in 0..config.classes {
        for style in 0..config.styles {
            let spec = SceneSpec {
                scale: config.scale,
                ..SceneSpec::new(class, style)?
            };
            for n in 0..config.poses_per_cell {
                let pose = sample_pose(&config.prior, &mut rng)?;
                let image = raytrace_reference(&spec, &k, &pose)?;
                let row = ManifestRow {
                    path: format!("images/c{class}_s{style}_{n:04}.ppm"),
                    class,
                    style,
                    pose,
                };
                let item = LabeledImage {
                    image,
                    class,
                    style,
                    pose: Some(pose),
                };
                out.push((row, item));
            }
        }
    }
    Ok(out)
}

/// Writes PPM files and the manifest under `out`. Stored images are the
/// 8-bit quantized renders, which is also what the returned set holds.
pub fn generate_dataset(config: &DatasetConfig, out: &Path) -> Result<LabeledImageSet> {
    let items = generate_items(config)?;
    let images_dir = out.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut rows = Vec::with_capacity(items.len());
    let mut set_items = Vec::with_capacity(items.len());
    for (row, mut item) in items {
        let bytes = encode_ppm(&item.image);
        let path = out.join(&row.path);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        item.image = decode_ppm(&bytes)?;
        rows.push(row);
        set_items.push(item);
    }
    write_manifest(out, &rows)?;
    Ok(LabeledImageSet {
        root: out.to_path_buf(),
        rows,
        items: set_items,
    })
}

pub fn write_manifest(root: &Path, rows: &[ManifestRow]) -> Result<()> {
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, format_manifest(rows)).map_err(|e| Error::io(&path, e))
}

/// Loads `root/manifest.tsv` (or the manifest file itself when `root`
/// names a file) and decodes every image.
pub fn load_dataset(root: &Path) -> Result<LabeledImageSet> {
    let (dir, manifest) = if root.is_file() {
        (root.parent().unwrap_or(Path::new(".")).to_path_buf(), root.to_path_buf())
    } else {
        (root.to_path_buf(), root.join(MANIFEST_FILE))
    };
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let rows = parse_manifest(&text, &manifest)?;
    let mut items = Vec::with_capacity(rows.len());
    let mut size = None;
    for (i, row) in rows.iter().enumerate() {
        let path = dir.join(&row.path);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let image = decode_ppm(&bytes).map_err(|e| Error::Parse {
            path: path.clone(),
            line: 0,
            msg: e.to_string(),
        })?;
        let dims = (image.width(), image.height());
        if *size.get_or_insert(dims) != dims {
            return Err(Error::Parse {
                path: manifest.clone(),
                line: i + 2,
                msg: format!("image {} is {}x{}, expected {}x{}", row.path, dims.0, dims.1, size.unwrap().0, size.unwrap().1),
            });
        }
        items.push(LabeledImage {
            image,
            class: row.class,
            style: row.style,
            pose: Some(row.pose),
        });
    }
    Ok(LabeledImageSet {
        root: dir,
        rows,
        items,
    })
}

/// Uniform draw with replacement.
pub fn sample_batch<'a>(set: &'a [LabeledImage], batch: usize, rng: &mut impl Rng) -> Result<Vec<&'a LabeledImage>> {
    ensure!(!set.is_empty(), "sample_batch: empty dataset");
    Ok((0..batch).map(|_| &set[rng.random_range(0..set.len())]).collect())
}

/// Pose prior matching a dataset's radius with the default angle ranges.
pub fn prior_for(set: &LabeledImageSet) -> PosePrior {
    let radius = set.rows.first().map_or(4.0, |r| r.pose.radius);
    PosePrior {
        radius: Range::point(radius),
        ..PosePrior::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ray_from(origin: Vec3, target: Vec3) -> Ray {
        Ray {
            origin,
            direction: normalize([target[0] - origin[0], target[1] - origin[1], target[2] - origin[2]]),
            t_near: 0.0,
            t_far: f64::MAX,
        }
    }

    #[test]
    fn sphere_center_pixel_depth_three() {
        let spec = SceneSpec::new(0, 0).unwrap();
        let k = Intrinsics::for_image(17, 17).unwrap();
        let pose = Pose::new(4.0, 0.0, 0.0, 0.0).unwrap();
        let depth = reference_depth(&spec, &k, &pose).unwrap();
        let d = depth[8 * 17 + 8].unwrap();
        assert!((d - 3.0).abs() < 1e-12, "{d}");
        let img = raytrace_reference(&spec, &k, &pose).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0; 3]);
        let c = img.pixel(8, 8);
        assert!((c[0] - 0.9).abs() < 1e-6 && (c[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn primitives_hit_where_expected() {
        for class in 0..4 {
            let spec = SceneSpec::new(class, 1).unwrap();
            let r = ray_from([0.0, 0.2, 4.0], [0.0, 0.2, 0.0]);
            let (t, _) = trace(&spec, &r).unwrap_or_else(|| panic!("class {class} missed"));
            let expect = match class {
                0 => 4.0 - (1.0f64 - 0.04).sqrt(),
                1 => 4.0 - 0.55,
                2 => 4.0 - 0.6,
                _ => 4.0 - (0.65 + (0.09f64 - 0.04).sqrt()),
            };
            assert!((t - expect).abs() < 1e-6, "class {class}: {t} vs {expect}");
            assert!(trace(&spec, &ray_from([3.0, 3.0, 4.0], [3.0, 3.0, 0.0])).is_none());
        }
        // the torus hole is empty
        let spec = SceneSpec::new(3, 0).unwrap();
        assert!(trace(&spec, &ray_from([0.0, 4.0, 0.0], [0.0, 0.0, 0.0])).is_none());
    }

    #[test]
    fn manifest_errors_cite_line_numbers() {
        let p = Path::new("m.tsv");
        let ok = "ctrlnerf-manifest 1\na.ppm\t0\t1\t10\t20\t4\t0\n";
        assert_eq!(parse_manifest(ok, p).unwrap().len(), 1);
        let bad = "ctrlnerf-manifest 1\na.ppm\t0\t1\t10\t20\t4\t0\nb.ppm\t0\t1\t10\n";
        let e = parse_manifest(bad, p).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
        assert!(e.to_string().starts_with("m.tsv:3:"));
        let e = parse_manifest("wrong\n", p).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
        let e = parse_manifest("ctrlnerf-manifest 1\na.ppm\tx\t1\t10\t20\t4\t0\n", p).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn manifest_text_roundtrip() {
        let rows = vec![ManifestRow {
            path: "images/a b.ppm".into(),
            class: 3,
            style: 2,
            pose: Pose::new(3.5, -179.123456789, 0.1, -0.25).unwrap(),
        }];
        let text = format_manifest(&rows);
        assert_eq!(parse_manifest(&text, Path::new("x")).unwrap(), rows);
    }

    #[test]
    fn batches_have_requested_size() {
        let item = LabeledImage {
            image: RgbImage::filled(2, 2, [0.0; 3]),
            class: 0,
            style: 0,
            pose: None,
        };
        let set = vec![item; 3];
        assert_eq!(sample_batch(&set, 8, &mut seeded(0)).unwrap().len(), 8);
        assert!(sample_batch(&[], 1, &mut seeded(0)).is_err());
    }
}

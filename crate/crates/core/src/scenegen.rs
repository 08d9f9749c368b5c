//! Procedural multi-view scenes with exact geometry.
//!
//! Every pixel is ray cast against analytic primitives, so the pointmap entry
//! of a pixel is the exact world-space hit of that pixel's camera ray (or a
//! point on the far plane for background), and object masks are the pixels
//! whose nearest surface belongs to the object.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ConfidenceMap, Grid, Mask, PointMap, RgbImage};
use crate::math::Vec3;
use crate::{par, rng};

pub const FLOOR_ID: &str = "floor";
const LIGHT_DIR: Vec3 = Vec3::new(0.4, 0.9, 0.3);
const BACKGROUND: [f64; 3] = [0.62, 0.70, 0.80];
const HIT_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Sphere,
    Box,
    PlanePatch,
}

/// An analytic object. Spheres use `size[0]` as diameter; boxes are
/// axis-aligned with full extents `size`; plane patches are horizontal
/// rectangles at height `center[1]` spanning `size[0]` by `size[2]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub object_id: String,
    pub primitive: Primitive,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub albedo: [f64; 3],
}

impl ObjectSpec {
    fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!(
                "object {} has non-positive size {:?}",
                self.object_id, self.size
            )));
        }
        Ok(())
    }

    /// Nearest ray hit with parameter `t > HIT_EPS`, returning `(t, normal)`.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(f64, Vec3)> {
        let c = Vec3(self.center);
        match self.primitive {
            Primitive::Sphere => {
                let r = self.size[0] * 0.5;
                let oc = origin - c;
                let b = oc.dot(dir);
                let cc = oc.dot(oc) - r * r;
                let disc = b * b - cc;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = if -b - sq > HIT_EPS { -b - sq } else { -b + sq };
                (t > HIT_EPS).then(|| (t, ((origin + dir * t) - c) * (1.0 / r)))
            }
            Primitive::Box => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut axis_near = 0;
                for a in 0..3 {
                    let half = self.size[a] * 0.5;
                    let (lo, hi) = (self.center[a] - half, self.center[a] + half);
                    let o = origin.0[a];
                    let d = dir.0[a];
                    if d.abs() < 1e-300 {
                        if o < lo || o > hi {
                            return None;
                        }
                        continue;
                    }
                    let (mut t0, mut t1) = ((lo - o) / d, (hi - o) / d);
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    if t0 > t_near {
                        t_near = t0;
                        axis_near = a;
                    }
                    t_far = t_far.min(t1);
                }
                if t_near > t_far || t_far <= HIT_EPS || t_near <= HIT_EPS {
                    return None;
                }
                let mut n = [0.0; 3];
                n[axis_near] = -dir.0[axis_near].signum();
                Some((t_near, Vec3(n)))
            }
            Primitive::PlanePatch => {
                if dir.y().abs() < 1e-300 {
                    return None;
                }
                let t = (c.y() - origin.y()) / dir.y();
                if t <= HIT_EPS {
                    return None;
                }
                let p = origin + dir * t;
                let inside = (p.x() - c.x()).abs() <= self.size[0] * 0.5
                    && (p.z() - c.z()).abs() <= self.size[2] * 0.5;
                inside.then(|| (t, Vec3::new(0.0, -dir.y().signum(), 0.0)))
            }
        }
    }

    /// Distance from `p` to the primitive's surface (zero on the surface).
    pub fn surface_distance(&self, p: Vec3) -> f64 {
        let c = Vec3(self.center);
        match self.primitive {
            Primitive::Sphere => ((p - c).norm() - self.size[0] * 0.5).abs(),
            Primitive::Box => {
                let mut outside = 0.0f64;
                let mut inside = f64::INFINITY;
                for a in 0..3 {
                    let d = (p.0[a] - c.0[a]).abs() - self.size[a] * 0.5;
                    outside += d.max(0.0).powi(2);
                    inside = inside.min(-d);
                }
                if outside > 0.0 {
                    outside.sqrt()
                } else {
                    inside.max(0.0)
                }
            }
            Primitive::PlanePatch => {
                let dx = ((p.x() - c.x()).abs() - self.size[0] * 0.5).max(0.0);
                let dz = ((p.z() - c.z()).abs() - self.size[2] * 0.5).max(0.0);
                (dx * dx + (p.y() - c.y()).powi(2) + dz * dz).sqrt()
            }
        }
    }
}

/// Pinhole camera looking at a target with +y up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: [f64; 3],
    pub forward: [f64; 3],
    pub right: [f64; 3],
    pub up: [f64; 3],
    pub tan_half_fov: f64,
    pub height: usize,
    pub width: usize,
}

impl Camera {
    pub fn look_at(
        position: Vec3,
        target: Vec3,
        fov_deg: f64,
        height: usize,
        width: usize,
    ) -> Self {
        let forward = (target - position).normalized();
        let right = forward.cross(Vec3::new(0.0, 1.0, 0.0)).normalized();
        let up = right.cross(forward);
        Self {
            position: position.0,
            forward: forward.0,
            right: right.0,
            up: up.0,
            tan_half_fov: (fov_deg.to_radians() * 0.5).tan(),
            height,
            width,
        }
    }

    /// Unnormalized ray direction through the pixel center with unit
    /// forward component, so `position + ray * depth` lands at camera depth.
    pub fn ray(&self, row: usize, col: usize) -> Vec3 {
        let aspect = self.width as f64 / self.height as f64;
        let x = ((col as f64 + 0.5) / self.width as f64 * 2.0 - 1.0) * self.tan_half_fov * aspect;
        let y = (1.0 - (row as f64 + 0.5) / self.height as f64 * 2.0) * self.tan_half_fov;
        Vec3(self.forward) + Vec3(self.right) * x + Vec3(self.up) * y
    }

    /// World point at camera-space depth `depth` along the pixel's ray.
    pub fn unproject(&self, row: usize, col: usize, depth: f64) -> Vec3 {
        Vec3(self.position) + self.ray(row, col) * depth
    }

    /// Camera-space depth of a world point.
    pub fn depth_of(&self, p: Vec3) -> f64 {
        (p - Vec3(self.position)).dot(Vec3(self.forward))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub image: RgbImage,
    pub pointmap: PointMap,
    pub confidence: ConfidenceMap,
    /// object_id -> binary mask (every object has an entry, possibly empty).
    pub masks: BTreeMap<String, Mask>,
    pub camera: Camera,
}

impl View {
    pub fn height(&self) -> usize {
        self.image.height()
    }
    pub fn width(&self) -> usize {
        self.image.width()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub scene_id: String,
    pub views: Vec<View>,
    pub objects: Vec<ObjectSpec>,
    pub rng_seed: u64,
}

impl SceneBundle {
    pub fn height(&self) -> usize {
        self.views[0].height()
    }
    pub fn width(&self) -> usize {
        self.views[0].width()
    }

    pub fn object(&self, object_id: &str) -> Option<&ObjectSpec> {
        self.objects.iter().find(|o| o.object_id == object_id)
    }

    /// Views reordered by `order` (each index used once).
    pub fn permuted(&self, order: &[usize]) -> SceneBundle {
        SceneBundle {
            views: order.iter().map(|&i| self.views[i].clone()).collect(),
            ..self.clone()
        }
    }

    /// Keep only the listed views, in the given order.
    pub fn subset(&self, views: &[usize]) -> Result<SceneBundle> {
        if let Some(&bad) = views.iter().find(|&&v| v >= self.views.len()) {
            return Err(Error::Input(format!(
                "view {bad} out of range for {} views",
                self.views.len()
            )));
        }
        Ok(self.permuted(views))
    }

    /// Multiply every pointmap coordinate by `factor` (a global rescale of
    /// the reconstruction, as happens with scale-ambiguous geometry).
    pub fn scaled(&self, factor: f64) -> SceneBundle {
        let mut out = self.clone();
        for v in &mut out.views {
            for p in v.pointmap.data_mut() {
                for x in p.iter_mut() {
                    *x = (*x as f64 * factor) as f32;
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .views
            .first()
            .ok_or_else(|| Error::Input("scene has no views".into()))?;
        let (h, w) = (first.height(), first.width());
        for (i, v) in self.views.iter().enumerate() {
            let shapes_ok = v.image.height() == h
                && v.image.width() == w
                && v.pointmap.height() == h
                && v.pointmap.width() == w
                && v.confidence.height() == h
                && v.confidence.width() == w
                && v.masks.values().all(|m| m.height() == h && m.width() == w);
            if !shapes_ok {
                return Err(Error::Shape(format!("view {i} rasters are not all {h}x{w}")));
            }
            if v.pointmap.data().iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::Input(format!("view {i} has non-finite points")));
            }
            if v.confidence.data().iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Input(format!("view {i} has confidence outside [0,1]")));
            }
            if v.masks.values().any(|m| !m.is_binary()) {
                return Err(Error::Input(format!("view {i} has a non-binary mask")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraLayout {
    /// Evenly spaced azimuths (plus jitter) on a ring around the scene.
    Orbit,
    /// Independent random azimuth/elevation on the upper hemisphere.
    Hemisphere,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneGenConfig {
    pub views: usize,
    pub height: usize,
    pub width: usize,
    /// Free-standing objects (spheres and boxes); the floor is extra.
    pub min_objects: usize,
    pub max_objects: usize,
    pub floor: bool,
    pub layout: CameraLayout,
    pub fov_deg: f64,
    pub camera_distance: [f64; 2],
    pub elevation_deg: [f64; 2],
    pub azimuth_jitter_deg: f64,
    /// Azimuth span of the orbit layout; 360 closes the ring, smaller values
    /// give forward-facing captures from one side of the scene.
    pub orbit_arc_deg: f64,
    /// Objects are placed inside a disc of this radius on the floor.
    pub placement_radius: f64,
    pub object_radius: [f64; 2],
    /// Minimum clearance between placed objects; negative values allow
    /// interpenetration (heavier occlusion).
    pub clearance: f64,
    /// Probability that an object reuses an earlier object's color.
    pub shared_color_prob: f64,
    /// Camera-space depth assigned to background pixels.
    pub far: f64,
    /// Explicit objects; when set, random placement is skipped.
    pub objects: Option<Vec<ObjectSpec>>,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            views: 8,
            height: 32,
            width: 32,
            min_objects: 2,
            max_objects: 4,
            floor: true,
            layout: CameraLayout::Orbit,
            fov_deg: 50.0,
            camera_distance: [3.2, 3.8],
            elevation_deg: [20.0, 45.0],
            azimuth_jitter_deg: 12.0,
            orbit_arc_deg: 90.0,
            placement_radius: 1.1,
            object_radius: [0.3, 0.5],
            clearance: 0.1,
            shared_color_prob: 0.0,
            far: 8.0,
            objects: None,
        }
    }
}

impl SceneGenConfig {
    /// Cluttered scenes where objects frequently hide one another.
    pub fn occlusion_heavy() -> Self {
        Self {
            min_objects: 4,
            max_objects: 5,
            placement_radius: 0.8,
            clearance: 0.02,
            elevation_deg: [10.0, 30.0],
            layout: CameraLayout::Orbit,
            shared_color_prob: 0.3,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.views == 0 {
            return Err(Error::Config("at least one view required".into()));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "image size {}x{} below the 16x16 minimum",
                self.height, self.width
            )));
        }
        let total = match &self.objects {
            Some(objs) => {
                for o in objs {
                    o.validate()?;
                }
                objs.len()
            }
            None => {
                if self.min_objects > self.max_objects {
                    return Err(Error::Config("min_objects exceeds max_objects".into()));
                }
                self.max_objects + self.floor as usize
            }
        };
        let min_total = match &self.objects {
            Some(objs) => objs.len(),
            None => self.min_objects + self.floor as usize,
        };
        if min_total == 0 || total > 8 {
            return Err(Error::Config(format!(
                "scenes need between 1 and 8 objects (got up to {total})"
            )));
        }
        if !(self.orbit_arc_deg > 0.0 && self.orbit_arc_deg <= 360.0) {
            return Err(Error::Config("orbit arc must be in (0, 360] degrees".into()));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::Config("fov must be in (0, 180) degrees".into()));
        }
        if !(self.far > 0.0) {
            return Err(Error::Config("far plane must be positive".into()));
        }
        Ok(())
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i32;
    let f = h6 - i as f64;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn random_objects(config: &SceneGenConfig, rng: &mut rng::Rng) -> Vec<ObjectSpec> {
    let mut objects = Vec::new();
    if config.floor {
        let tint: f64 = rng.random_range(0.0..1.0);
        objects.push(ObjectSpec {
            object_id: FLOOR_ID.to_string(),
            primitive: Primitive::PlanePatch,
            center: [0.0, 0.0, 0.0],
            size: [5.0, 0.01, 5.0],
            albedo: hsv_to_rgb(tint, 0.15, 0.55),
        });
    }
    let n = rng.random_range(config.min_objects..=config.max_objects);
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    let mut colors: Vec<[f64; 3]> = Vec::new();
    for i in 0..n {
        let radius = rng.random_range(config.object_radius[0]..=config.object_radius[1]);
        let mut pos = (0.0, 0.0);
        for attempt in 0..200 {
            let a = rng.random_range(0.0..2.0 * PI);
            let d = config.placement_radius * rng.random_range(0.0f64..1.0).sqrt();
            pos = (d * a.cos(), d * a.sin());
            let clear = placed.iter().all(|&(x, z, r)| {
                ((pos.0 - x).powi(2) + (pos.1 - z).powi(2)).sqrt() >= r + radius + config.clearance
            });
            if clear || attempt == 199 {
                break;
            }
        }
        placed.push((pos.0, pos.1, radius));
        let albedo = if !colors.is_empty() && rng.random_bool(config.shared_color_prob.clamp(0.0, 1.0)) {
            colors[rng.random_range(0..colors.len())]
        } else {
            hsv_to_rgb(
                rng.random_range(0.0..1.0),
                rng.random_range(0.55..0.9),
                rng.random_range(0.7..0.95),
            )
        };
        colors.push(albedo);
        let (primitive, size, y) = if rng.random_bool(0.5) {
            (Primitive::Sphere, [2.0 * radius; 3], radius)
        } else {
            let sx = 2.0 * radius * rng.random_range(0.75..1.0);
            let sy = 2.0 * radius * rng.random_range(0.6..1.3);
            let sz = 2.0 * radius * rng.random_range(0.75..1.0);
            (Primitive::Box, [sx, sy, sz], sy * 0.5)
        };
        objects.push(ObjectSpec {
            object_id: format!("obj{i}"),
            primitive,
            center: [pos.0, y, pos.1],
            size,
            albedo,
        });
    }
    objects
}

fn cameras(config: &SceneGenConfig, rng: &mut rng::Rng) -> Vec<Camera> {
    let base: f64 = rng.random_range(0.0..2.0 * PI);
    let target = Vec3::new(0.0, 0.25, 0.0);
    (0..config.views)
        .map(|i| {
            let (az, el) = match config.layout {
                CameraLayout::Orbit => {
                    let jitter = config.azimuth_jitter_deg.to_radians();
                    let j = if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
                    let arc = config.orbit_arc_deg.to_radians();
                    // a closed ring must not repeat its first view
                    let spacing = if config.orbit_arc_deg >= 360.0 {
                        arc / config.views as f64
                    } else {
                        arc / (config.views.max(2) - 1) as f64
                    };
                    (
                        base + spacing * i as f64 + j,
                        uniform(rng, config.elevation_deg).to_radians(),
                    )
                }
                CameraLayout::Hemisphere => (
                    rng.random_range(0.0..2.0 * PI),
                    uniform(rng, config.elevation_deg).to_radians(),
                ),
            };
            let dist = uniform(rng, config.camera_distance);
            let pos = target
                + Vec3::new(dist * el.cos() * az.cos(), dist * el.sin(), dist * el.cos() * az.sin());
            Camera::look_at(pos, target, config.fov_deg, config.height, config.width)
        })
        .collect()
}

fn uniform(rng: &mut rng::Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..=range[1])
    } else {
        range[0]
    }
}

/// Render one view: per-pixel nearest hit, shading, pointmap and masks.
pub fn render_view(camera: &Camera, objects: &[ObjectSpec], far: f64) -> View {
    let (h, w) = (camera.height, camera.width);
    let light = LIGHT_DIR.normalized();
    let origin = Vec3(camera.position);
    let rows = par::map_range(h, |r| {
        (0..w)
            .map(|c| {
                let ray = camera.ray(r, c);
                let dir = ray.normalized();
                let mut best: Option<(f64, Vec3, usize)> = None;
                for (k, obj) in objects.iter().enumerate() {
                    if let Some((t, n)) = obj.intersect(origin, dir) {
                        if best.is_none_or(|b| t < b.0) {
                            best = Some((t, n, k));
                        }
                    }
                }
                match best {
                    Some((t, n, k)) => {
                        let shade = 0.35 + 0.65 * n.dot(light).max(0.0);
                        let a = objects[k].albedo;
                        let color = [a[0] * shade, a[1] * shade, a[2] * shade];
                        ((origin + dir * t).to_f32(), color, Some(k))
                    }
                    None => (camera.unproject(r, c, far).to_f32(), BACKGROUND, None),
                }
            })
            .collect::<Vec<_>>()
    });
    let pixels: Vec<_> = rows.into_iter().flatten().collect();
    let to_u8 = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    let image = Grid::from_vec(
        h,
        w,
        pixels.iter().map(|p| [to_u8(p.1[0]), to_u8(p.1[1]), to_u8(p.1[2])]).collect(),
    )
    .expect("rendered pixel count");
    let pointmap = Grid::from_vec(h, w, pixels.iter().map(|p| p.0).collect()).expect("points");
    let masks = objects
        .iter()
        .enumerate()
        .map(|(k, o)| {
            let m = Grid::from_vec(h, w, pixels.iter().map(|p| (p.2 == Some(k)) as u8).collect())
                .expect("mask");
            (o.object_id.clone(), m)
        })
        .collect();
    View {
        image,
        pointmap,
        confidence: Grid::filled(h, w, 1.0),
        masks,
        camera: camera.clone(),
    }
}

/// Generate a scene bundle; identical `(config, seed)` give identical output.
pub fn generate_scene(config: &SceneGenConfig, seed: u64) -> Result<SceneBundle> {
    config.validate()?;
    let mut rng = rng::rng(seed);
    let objects = match &config.objects {
        Some(objs) => objs.clone(),
        None => random_objects(config, &mut rng),
    };
    let cams = cameras(config, &mut rng);
    let views = cams.iter().map(|c| render_view(c, &objects, config.far)).collect();
    Ok(SceneBundle {
        scene_id: format!("scene_{seed:016x}"),
        views,
        objects,
        rng_seed: seed,
    })
}

/// Per-axis population standard deviation of all pointmap coordinates.
pub fn pointmap_axis_std(views: &[View]) -> [f64; 3] {
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for v in views {
        for p in v.pointmap.data() {
            for a in 0..3 {
                sum[a] += p[a] as f64;
            }
            n += 1;
        }
    }
    let mean = sum.map(|s| s / n.max(1) as f64);
    let mut var = [0.0f64; 3];
    for v in views {
        for p in v.pointmap.data() {
            for a in 0..3 {
                var[a] += (p[a] as f64 - mean[a]).powi(2);
            }
        }
    }
    var.map(|s| (s / n.max(1) as f64).sqrt())
}

/// Simulate an imperfect geometry model: Gaussian noise scaled by the
/// per-axis spread of the pointmaps, plus a random subset of pixels with
/// tripled noise and low confidence in `[0, 0.3)`.
pub fn corrupt_pointmap(
    bundle: &SceneBundle,
    noise_scale: f64,
    low_conf_fraction: f64,
    seed: u64,
) -> Result<SceneBundle> {
    bundle.validate()?;
    if !(noise_scale >= 0.0) || !noise_scale.is_finite() {
        return Err(Error::Input(format!("noise scale {noise_scale} must be >= 0")));
    }
    if !(0.0..=1.0).contains(&low_conf_fraction) {
        return Err(Error::Input(format!(
            "low-confidence fraction {low_conf_fraction} outside [0, 1]"
        )));
    }
    let std = pointmap_axis_std(&bundle.views);
    let sigma = std.map(|s| s * noise_scale);
    let per_view = bundle.height() * bundle.width();
    let total = per_view * bundle.views.len();
    let n_low = (low_conf_fraction * total as f64).round() as usize;
    let mut rng = rng::rng(seed);
    let mut low = vec![false; total];
    for i in index::sample(&mut rng, total, n_low.min(total)) {
        low[i] = true;
    }
    let mut out = bundle.clone();
    for (vi, view) in out.views.iter_mut().enumerate() {
        for pi in 0..per_view {
            let flat = vi * per_view + pi;
            let p = &mut view.pointmap.data_mut()[pi];
            if noise_scale > 0.0 {
                for a in 0..3 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    p[a] = (p[a] as f64 + z * sigma[a]) as f32;
                }
            }
            if low[flat] {
                if noise_scale > 0.0 {
                    for a in 0..3 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        p[a] = (p[a] as f64 + z * 3.0 * sigma[a]) as f32;
                    }
                }
                view.confidence.data_mut()[pi] = rng.random_range(0.0f32..0.3);
            }
        }
    }
    Ok(out)
}

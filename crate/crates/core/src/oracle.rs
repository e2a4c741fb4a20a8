//! Analytic synthetic scenes.
//!
//! An [`OracleScene`] is a sum of isotropic Gaussian density blobs. It stands
//! in for three things at once: the fitted radiance field (density and
//! view-dependent color), the dense 2D teacher (volume-rendered ground-truth
//! features plus noise), and the sparse 2D keypoint teacher (Gaussian splats
//! at visible planted interest points).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    axis_angle, pixel_center, project, ray_aabb_intersect, ray_for_pixel, Camera, Ray, RigidTransform, SceneBounds,
    Vec3,
};
use crate::grid::RadianceField;
use crate::image::{FeatureImage, ProbImage};
use crate::render::{march, render_quantity};

/// Below this total density color and feature fall back to their defaults.
const EMPTY_DENSITY: f64 = 1e-12;
/// Keypoints are visible when the transmittance in front of them exceeds this.
pub const VISIBILITY_TRANSMITTANCE: f64 = 0.5;
/// Standard deviation of a keypoint splat, in pixels.
pub const HEATMAP_STD_PX: f64 = 1.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub center: Vec3,
    pub radius: f64,
    pub peak_density: f64,
    pub base_color: [f64; 3],
    pub view_tint: Vec3,
    pub feature: Vec<f64>,
}

impl Blob {
    /// Unnormalized density contribution at `x`; the Gaussian std is `radius / 2`.
    pub fn density(&self, x: &Vec3) -> f64 {
        let s = 0.5 * self.radius;
        self.peak_density * (-(x - self.center).norm_squared() / (2.0 * s * s)).exp()
    }

    fn color(&self, d: &Vec3) -> [f64; 3] {
        let tint = 0.1 * self.view_tint.dot(d);
        self.base_color.map(|c| (c + tint).clamp(0.0, 1.0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleScene {
    pub blobs: Vec<Blob>,
    pub interest_points: Vec<Vec3>,
    pub seed: u64,
    pub feature_dim: usize,
}

impl OracleScene {
    pub fn oracle_sigma(&self, x: &Vec3) -> f64 {
        self.blobs.iter().map(|b| b.density(x)).sum()
    }

    pub fn oracle_color(&self, x: &Vec3, d: &Vec3) -> [f64; 3] {
        let mut total = 0.0;
        let mut acc = [0.0; 3];
        for b in &self.blobs {
            let w = b.density(x);
            total += w;
            let c = b.color(d);
            for k in 0..3 {
                acc[k] += w * c[k];
            }
        }
        if total < EMPTY_DENSITY {
            return [0.5; 3];
        }
        acc.map(|v| v / total)
    }

    /// View-independent ground-truth feature: density-weighted blend of the
    /// blob features, zero in empty space.
    pub fn oracle_feature(&self, x: &Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.feature_dim];
        self.feature_into(x, &mut out);
        out
    }

    fn feature_into(&self, x: &Vec3, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut total = 0.0;
        for b in &self.blobs {
            let w = b.density(x);
            total += w;
            for (o, f) in out.iter_mut().zip(&b.feature) {
                *o += w * f;
            }
        }
        if total < EMPTY_DENSITY {
            out.iter_mut().for_each(|v| *v = 0.0);
        } else {
            out.iter_mut().for_each(|v| *v /= total);
        }
    }

    /// The same scene moved rigidly: blob centers, view tints and interest
    /// points are transformed.
    pub fn transformed(&self, t: &RigidTransform) -> OracleScene {
        OracleScene {
            blobs: self
                .blobs
                .iter()
                .map(|b| Blob {
                    center: t.apply(&b.center),
                    view_tint: t.rotation * b.view_tint,
                    ..b.clone()
                })
                .collect(),
            interest_points: self.interest_points.iter().map(|p| t.apply(p)).collect(),
            ..self.clone()
        }
    }

    /// Transmittance from where the segment `origin → point` enters the scene
    /// bounds up to `point`, by midpoint quadrature with `samples` steps.
    pub fn transmittance_to(&self, origin: &Vec3, point: &Vec3, samples: usize) -> f64 {
        let dist = (point - origin).norm();
        if dist == 0.0 {
            return 1.0;
        }
        let ray = Ray {
            origin: *origin,
            direction: (point - origin) / dist,
            t_near: 0.0,
            t_far: 0.0,
        };
        let Some((t0, _)) = ray_aabb_intersect(&ray, &SceneBounds::default()) else {
            return 1.0;
        };
        if t0 >= dist {
            return 1.0;
        }
        let dt = (dist - t0) / samples as f64;
        let depth: f64 = (0..samples)
            .map(|i| self.oracle_sigma(&ray.at(t0 + (i as f64 + 0.5) * dt)) * dt)
            .sum();
        (-depth).exp()
    }
}

impl RadianceField for OracleScene {
    fn sigma(&self, x: &Vec3) -> f64 {
        self.oracle_sigma(x)
    }

    fn color(&self, x: &Vec3, d: &Vec3) -> [f64; 3] {
        self.oracle_color(x, d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherNoise {
    pub iid_sigma: f64,
    pub view_bias_sigma: f64,
}

impl TeacherNoise {
    pub const NONE: TeacherNoise = TeacherNoise {
        iid_sigma: 0.0,
        view_bias_sigma: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if self.iid_sigma >= 0.0 && self.view_bias_sigma >= 0.0 {
            Ok(())
        } else {
            Err(Error::input("teacher noise levels must be nonnegative"))
        }
    }
}

/// Noiseless volume-rendered feature map and per-pixel final transmittance.
pub fn render_clean_feature_map(
    scene: &OracleScene,
    camera: &Camera,
    samples: usize,
) -> Result<(FeatureImage, Vec<f64>)> {
    let (w, h) = (camera.width as usize, camera.height as usize);
    let c = scene.feature_dim;
    let mut img = FeatureImage::zeros(w, h, c);
    let mut t_end = vec![1.0; w * h];
    let bounds = SceneBounds::default();
    let mut values = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let Some(ray) = ray_for_pixel(camera, pixel_center(col, row), &bounds)? else {
                continue;
            };
            let s = march(&ray, samples, None)?.with_sigmas(|x| Ok(scene.oracle_sigma(x)))?;
            values.resize(s.len() * c, 0.0);
            for (x, out) in s.positions.iter().zip(values.chunks_exact_mut(c)) {
                scene.feature_into(x, out);
            }
            let out = render_quantity(&s, &values, c)?;
            let p = row * w + col;
            img.pixel_mut(p).copy_from_slice(&out.value);
            t_end[p] = out.t_end;
        }
    }
    Ok((img, t_end))
}

/// Teacher feature map: rendered ground truth, plus one bias vector shared by
/// the whole view, plus iid per-pixel noise. Deterministic in `seed`.
pub fn render_teacher_feature_map(
    scene: &OracleScene,
    camera: &Camera,
    noise: &TeacherNoise,
    seed: u64,
    samples: usize,
) -> Result<FeatureImage> {
    noise.validate()?;
    let (mut img, _) = render_clean_feature_map(scene, camera, samples)?;
    add_teacher_noise(&mut img, noise, seed);
    Ok(img)
}

pub fn add_teacher_noise(img: &mut FeatureImage, noise: &TeacherNoise, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bias: Vec<f64> = (0..img.channels)
        .map(|_| noise.view_bias_sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    for px in img.data.chunks_exact_mut(img.channels) {
        for (v, b) in px.iter_mut().zip(&bias) {
            *v += b + noise.iid_sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Heatmap of the visible planted interest points.
pub fn teacher_keypoint_heatmap(scene: &OracleScene, camera: &Camera) -> ProbImage {
    let (w, h) = (camera.width as usize, camera.height as usize);
    let mut map = ProbImage::zeros(w, h);
    let reach = (4.0 * HEATMAP_STD_PX).ceil() as i64;
    for p in &scene.interest_points {
        let Ok((px, _)) = project(camera, p) else {
            continue;
        };
        if !(px[0] >= 0.0 && px[0] < w as f64 && px[1] >= 0.0 && px[1] < h as f64) {
            continue;
        }
        if scene.transmittance_to(&camera.translation, p, 128) <= VISIBILITY_TRANSMITTANCE {
            continue;
        }
        let (ci, cj) = (px[0].floor() as i64, px[1].floor() as i64);
        for j in (cj - reach).max(0)..=(cj + reach).min(h as i64 - 1) {
            for i in (ci - reach).max(0)..=(ci + reach).min(w as i64 - 1) {
                let c = pixel_center(i as usize, j as usize);
                let d2 = (c[0] - px[0]).powi(2) + (c[1] - px[1]).powi(2);
                map.data[j as usize * w + i as usize] += (-d2 / (2.0 * HEATMAP_STD_PX * HEATMAP_STD_PX)).exp();
            }
        }
    }
    map.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    map
}

/// Parameter ranges for random scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub min_blobs: u32,
    pub max_blobs: u32,
    pub radius: [f64; 2],
    pub peak_density: [f64; 2],
    pub feature_dim: u32,
    /// Weight of a feature direction shared by every blob of every scene;
    /// higher values make scenes globally more alike.
    pub shared_feature_weight: f64,
    /// Chance that a new blob is placed touching an existing one.
    pub tangent_probability: f64,
    /// Blob centers stay within this distance of the origin.
    pub placement_radius: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            min_blobs: 3,
            max_blobs: 5,
            radius: [0.22, 0.32],
            peak_density: [1.5, 3.0],
            feature_dim: 16,
            shared_feature_weight: 0.3,
            tangent_probability: 0.6,
            placement_radius: 0.5,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite();
        if self.min_blobs == 0 || self.min_blobs > self.max_blobs || self.max_blobs > 64 {
            return Err(Error::input("blob count range must satisfy 1 <= min <= max <= 64"));
        }
        if !range_ok(self.radius) || !range_ok(self.peak_density) {
            return Err(Error::input("radius and density ranges must be positive and ordered"));
        }
        if self.feature_dim == 0 {
            return Err(Error::input("feature dimension must be positive"));
        }
        if !(0.0..=1.0).contains(&self.shared_feature_weight) || !(0.0..=1.0).contains(&self.tangent_probability) {
            return Err(Error::input("weights and probabilities must lie in [0, 1]"));
        }
        if !(self.placement_radius > 0.0 && self.placement_radius + self.radius[1] < 1.0) {
            return Err(Error::input("placement radius must keep blobs inside the unit cube"));
        }
        Ok(())
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn random_direction(rng: &mut ChaCha8Rng) -> Vec3 {
    let v = random_unit(rng, 3);
    Vec3::new(v[0], v[1], v[2])
}

/// Deterministic random scene. Interest points are the blob centers plus the
/// tangency point of every pair of touching or overlapping blobs.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<OracleScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = spec.feature_dim as usize;
    let shared: Vec<f64> = vec![1.0 / (dim as f64).sqrt(); dim];
    let n = rng.random_range(spec.min_blobs..=spec.max_blobs) as usize;
    let mut blobs: Vec<Blob> = Vec::with_capacity(n);
    for _ in 0..n {
        let radius = rng.random_range(spec.radius[0]..=spec.radius[1]);
        let center = place_blob(&mut rng, &blobs, radius, spec);
        let rho = spec.shared_feature_weight;
        let g = random_unit(&mut rng, dim);
        let mut feature: Vec<f64> = shared
            .iter()
            .zip(&g)
            .map(|(s, g)| rho.sqrt() * s + (1.0 - rho).sqrt() * g)
            .collect();
        let norm = feature.iter().map(|x| x * x).sum::<f64>().sqrt();
        feature.iter_mut().for_each(|v| *v /= norm);
        blobs.push(Blob {
            center,
            radius,
            peak_density: rng.random_range(spec.peak_density[0]..=spec.peak_density[1]),
            base_color: [
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
            ],
            view_tint: Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
            feature,
        });
    }
    let mut interest_points: Vec<Vec3> = blobs.iter().map(|b| b.center).collect();
    for i in 0..blobs.len() {
        for j in i + 1..blobs.len() {
            let (a, b) = (&blobs[i], &blobs[j]);
            let gap = (b.center - a.center).norm();
            if gap <= (a.radius + b.radius) * (1.0 + 1e-9) {
                let t = a.radius / (a.radius + b.radius);
                interest_points.push(a.center + (b.center - a.center) * t);
            }
        }
    }
    Ok(OracleScene {
        blobs,
        interest_points,
        seed,
        feature_dim: dim,
    })
}

fn place_blob(rng: &mut ChaCha8Rng, blobs: &[Blob], radius: f64, spec: &SceneSpec) -> Vec3 {
    let limit = spec.placement_radius;
    let clear_of_others = |c: &Vec3, skip: Option<usize>| {
        blobs
            .iter()
            .enumerate()
            .all(|(k, b)| Some(k) == skip || (b.center - c).norm() >= (b.radius + radius) * 1.05)
    };
    for _ in 0..200 {
        if !blobs.is_empty() && rng.random_bool(spec.tangent_probability) {
            let anchor = rng.random_range(0..blobs.len());
            let c = blobs[anchor].center + random_direction(rng) * (blobs[anchor].radius + radius);
            if c.norm() <= limit && clear_of_others(&c, Some(anchor)) {
                return c;
            }
        } else {
            let c = random_direction(rng) * limit * rng.random::<f64>().cbrt();
            if clear_of_others(&c, None) {
                return c;
            }
        }
    }
    // Crowded: accept any position inside the placement ball.
    random_direction(rng) * limit * rng.random::<f64>().cbrt()
}

/// Camera trajectory parameters: an orbit around the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraRig {
    pub views: u32,
    pub width: u32,
    pub height: u32,
    /// Horizontal field of view, radians.
    pub fov: f64,
    pub distance: f64,
    /// Elevation magnitude of the orbit, radians; views alternate above and
    /// below the equator.
    pub elevation: f64,
}

impl Default for CameraRig {
    fn default() -> Self {
        CameraRig {
            views: 6,
            width: 32,
            height: 32,
            fov: 0.75,
            distance: 3.2,
            elevation: 0.35,
        }
    }
}

impl CameraRig {
    pub fn validate(&self) -> Result<()> {
        if self.views == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::input(
                "camera rig needs at least one view and a nonzero image size",
            ));
        }
        if !(self.fov > 0.0 && self.fov < 3.0) || !(self.distance > 1.8) {
            return Err(Error::input("camera rig fov must be in (0, 3) and distance above 1.8"));
        }
        if !(self.elevation.abs() < 1.4) {
            return Err(Error::input("camera rig elevation must be below 1.4 rad"));
        }
        Ok(())
    }

    pub fn camera(&self, azimuth: f64, elevation: f64) -> Result<Camera> {
        let eye = Vec3::new(
            self.distance * elevation.cos() * azimuth.cos(),
            self.distance * elevation.sin(),
            self.distance * elevation.cos() * azimuth.sin(),
        );
        Camera::look_at(eye, Vec3::zeros(), Vec3::y(), self.fov, self.width, self.height)
    }

    /// Evenly spaced orbit starting at `azimuth0`; `phase` flips the
    /// alternating elevation pattern.
    pub fn orbit(&self, azimuth0: f64, phase: bool) -> Result<Vec<Camera>> {
        (0..self.views)
            .map(|k| {
                let az = azimuth0 + std::f64::consts::TAU * k as f64 / self.views as f64;
                let up = (k % 2 == 0) ^ phase;
                self.camera(az, if up { self.elevation } else { -self.elevation })
            })
            .collect()
    }
}

/// One scene of a corpus. The scene content is regenerated from
/// `(seed, spec)` and, for duplicates, moved by `transform`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusEntry {
    pub seed: u64,
    pub spec: SceneSpec,
    pub cameras: Vec<Camera>,
    pub duplicate_of: Option<u32>,
    pub transform: Option<RigidTransform>,
}

impl CorpusEntry {
    pub fn scene(&self) -> Result<OracleScene> {
        let scene = generate_scene(self.seed, &self.spec)?;
        Ok(match &self.transform {
            Some(t) => scene.transformed(t),
            None => scene,
        })
    }

    /// Held-out query view number `q`, derived from the entry alone.
    pub fn query_camera(&self, index: usize, q: u32, rig: &CameraRig) -> Result<Camera> {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (q as u64) << 48 ^ 0x5151,
        );
        let az = rng.random_range(0.0..std::f64::consts::TAU);
        let el = rng.random_range(-rig.elevation.abs()..=rig.elevation.abs());
        rig.camera(az, el)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_scenes: u32,
    pub duplicate_fraction: f64,
    pub scene: SceneSpec,
    pub rig: CameraRig,
    /// Rotation angle bound for planted duplicate transforms, radians.
    pub max_rotation: f64,
    /// Translation norm bound for planted duplicate transforms.
    pub max_translation: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_scenes: 10,
            duplicate_fraction: 0.2,
            scene: SceneSpec::default(),
            rig: CameraRig::default(),
            max_rotation: std::f64::consts::PI,
            max_translation: 0.15,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_scenes == 0 {
            return Err(Error::input("corpus needs at least one scene"));
        }
        if !(0.0..=1.0).contains(&self.duplicate_fraction) {
            return Err(Error::input("duplicate fraction must lie in [0, 1]"));
        }
        if !(self.max_rotation >= 0.0) || !(self.max_translation >= 0.0) {
            return Err(Error::input("transform bounds must be nonnegative"));
        }
        if self.scene.placement_radius + self.scene.radius[1] + self.max_translation >= 1.0 {
            return Err(Error::input(
                "planted translations could push blobs outside the unit cube",
            ));
        }
        self.scene.validate()?;
        self.rig.validate()
    }

    /// Number of duplicate entries; at least one original always remains.
    pub fn duplicate_count(&self) -> u32 {
        let want = (self.n_scenes as f64 * self.duplicate_fraction).round() as u32;
        want.min(self.n_scenes - 1)
    }
}

/// Originals first, then duplicates. Duplicate `k` copies original
/// `k mod n_originals`, is seen from an interleaved orbit, and every second
/// duplicate also carries a planted rigid transform.
pub fn generate_corpus(seed: u64, spec: &CorpusSpec) -> Result<Vec<CorpusEntry>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_dup = spec.duplicate_count();
    let n_orig = spec.n_scenes - n_dup;
    let half_step = std::f64::consts::PI / spec.rig.views as f64;
    let mut entries = Vec::with_capacity(spec.n_scenes as usize);
    let mut azimuths = Vec::with_capacity(n_orig as usize);
    for _ in 0..n_orig {
        let az = rng.random_range(0.0..std::f64::consts::TAU);
        azimuths.push(az);
        entries.push(CorpusEntry {
            seed: rng.random(),
            spec: spec.scene.clone(),
            cameras: spec.rig.orbit(az, false)?,
            duplicate_of: None,
            transform: None,
        });
    }
    for k in 0..n_dup {
        let orig = (k % n_orig) as usize;
        let transform = if k % 2 == 0 {
            let axis = random_direction(&mut rng);
            let angle = rng.random_range(-spec.max_rotation..=spec.max_rotation);
            let translation = random_direction(&mut rng) * spec.max_translation * rng.random::<f64>();
            Some(RigidTransform {
                rotation: axis_angle(&axis, angle),
                translation,
            })
        } else {
            None
        };
        let mut cameras = spec.rig.orbit(azimuths[orig] + half_step, true)?;
        if let Some(t) = &transform {
            // Keep the trajectory disjoint in the scene's own frame.
            cameras = cameras.iter().map(|c| t.apply_to_camera(c)).collect();
        }
        entries.push(CorpusEntry {
            seed: entries[orig].seed,
            spec: spec.scene.clone(),
            cameras,
            duplicate_of: Some(orig as u32),
            transform,
        });
    }
    Ok(entries)
}

/// Draws from `N(0, std)`; zero std yields exactly zero.
pub fn gaussian(rng: &mut impl Rng, std: f64) -> f64 {
    if std == 0.0 {
        0.0
    } else {
        Normal::new(0.0, std).map(|n| n.sample(rng)).unwrap_or(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(center: Vec3, radius: f64, peak: f64, feature: Vec<f64>) -> Blob {
        Blob {
            center,
            radius,
            peak_density: peak,
            base_color: [0.3, 0.5, 0.7],
            view_tint: Vec3::zeros(),
            feature,
        }
    }

    fn scene(blobs: Vec<Blob>) -> OracleScene {
        let dim = blobs.first().map_or(2, |b| b.feature.len());
        OracleScene {
            interest_points: blobs.iter().map(|b| b.center).collect(),
            blobs,
            seed: 0,
            feature_dim: dim,
        }
    }

    #[test]
    fn empty_scene_is_empty() {
        let s = scene(vec![]);
        assert_eq!(s.oracle_sigma(&Vec3::new(0.1, 0.2, 0.3)), 0.0);
        assert_eq!(s.oracle_color(&Vec3::zeros(), &Vec3::x()), [0.5; 3]);
        assert_eq!(s.oracle_feature(&Vec3::zeros()), vec![0.0, 0.0]);
    }

    #[test]
    fn density_at_center_and_half_radius() {
        let s = scene(vec![blob(Vec3::new(0.1, 0.0, -0.2), 0.4, 7.0, vec![1.0, 0.0])]);
        assert_eq!(s.oracle_sigma(&Vec3::new(0.1, 0.0, -0.2)), 7.0);
        let x = Vec3::new(0.1, 0.2, -0.2);
        assert!((s.oracle_sigma(&x) - 7.0 * (-0.5f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn untinted_color_is_base_color() {
        let s = scene(vec![blob(Vec3::zeros(), 0.3, 2.0, vec![1.0, 0.0])]);
        let c = s.oracle_color(&Vec3::new(0.05, 0.0, 0.0), &Vec3::y());
        for k in 0..3 {
            assert!((c[k] - [0.3, 0.5, 0.7][k]).abs() < 1e-15);
        }
    }

    #[test]
    fn tint_is_linear_in_direction() {
        let mut b = blob(Vec3::zeros(), 0.3, 2.0, vec![1.0, 0.0]);
        b.view_tint = Vec3::new(0.8, -0.4, 0.2);
        let s = scene(vec![b]);
        let x = Vec3::new(0.0, 0.05, 0.0);
        let plus = s.oracle_color(&x, &Vec3::x());
        let minus = s.oracle_color(&x, &-Vec3::x());
        for k in 0..3 {
            assert!((plus[k] - minus[k] - 0.2 * 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn overlapping_blobs_blend_by_density() {
        let mut a = blob(Vec3::new(-0.1, 0.0, 0.0), 0.3, 2.0, vec![1.0, 0.0]);
        let mut b = blob(Vec3::new(0.15, 0.0, 0.0), 0.2, 5.0, vec![0.0, 1.0]);
        a.base_color = [0.9, 0.1, 0.2];
        b.base_color = [0.1, 0.8, 0.4];
        let s = scene(vec![a.clone(), b.clone()]);
        let x = Vec3::new(0.025, 0.0, 0.0);
        let wa = 2.0 * (-(0.125f64 * 0.125) / (2.0 * 0.15 * 0.15)).exp();
        let wb = 5.0 * (-(0.125f64 * 0.125) / (2.0 * 0.1 * 0.1)).exp();
        let c = s.oracle_color(&x, &Vec3::z());
        let f = s.oracle_feature(&x);
        for (k, ck) in c.iter().enumerate() {
            let want = (wa * a.base_color[k] + wb * b.base_color[k]) / (wa + wb);
            assert!((ck - want).abs() < 1e-12);
        }
        assert!((f[0] - wa / (wa + wb)).abs() < 1e-12);
        assert!((f[1] - wb / (wa + wb)).abs() < 1e-12);
    }

    #[test]
    fn single_blob_feature_is_constant() {
        let s = scene(vec![blob(Vec3::zeros(), 0.3, 2.0, vec![0.6, 0.8])]);
        for x in [Vec3::new(0.1, 0.0, 0.0), Vec3::new(0.0, -0.3, 0.2)] {
            let f = s.oracle_feature(&x);
            assert!((f[0] - 0.6).abs() < 1e-15 && (f[1] - 0.8).abs() < 1e-15);
        }
    }

    #[test]
    fn teacher_noise_off_equals_clean_map_and_seed_is_deterministic() {
        let s = generate_scene(4, &SceneSpec::default()).unwrap();
        let cam = CameraRig::default().camera(0.3, 0.2).unwrap();
        let (clean, _) = render_clean_feature_map(&s, &cam, 32).unwrap();
        let t = render_teacher_feature_map(&s, &cam, &TeacherNoise::NONE, 9, 32).unwrap();
        assert_eq!(t, clean);
        let noise = TeacherNoise {
            iid_sigma: 0.1,
            view_bias_sigma: 0.1,
        };
        let a = render_teacher_feature_map(&s, &cam, &noise, 9, 32).unwrap();
        let b = render_teacher_feature_map(&s, &cam, &noise, 9, 32).unwrap();
        assert_eq!(a, b);
        let c = render_teacher_feature_map(&s, &cam, &noise, 10, 32).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn no_interest_points_means_empty_heatmap() {
        let mut s = generate_scene(2, &SceneSpec::default()).unwrap();
        s.interest_points.clear();
        let cam = CameraRig::default().camera(1.0, 0.1).unwrap();
        assert!(teacher_keypoint_heatmap(&s, &cam).data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn visible_point_peaks_at_its_projection() {
        // A faint blob at the origin with its center planted as keypoint.
        let s = scene(vec![blob(Vec3::zeros(), 0.3, 1.0, vec![1.0, 0.0])]);
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, -3.0), Vec3::zeros(), Vec3::y(), 0.8, 33, 33).unwrap();
        let map = teacher_keypoint_heatmap(&s, &cam);
        let (argmax, _) = map
            .data
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc });
        let (col, row) = (argmax % 33, argmax / 33);
        assert!((col as f64 + 0.5 - cam.cx).abs() <= 1.0);
        assert!((row as f64 + 0.5 - cam.cy).abs() <= 1.0);
        assert!(map.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn hidden_point_contributes_nothing() {
        // Dense occluder in front of a planted point.
        let occluder = blob(Vec3::new(0.0, 0.0, -0.4), 0.3, 40.0, vec![1.0, 0.0]);
        let mut s = scene(vec![occluder]);
        let hidden = Vec3::new(0.0, 0.0, 0.3);
        s.interest_points = vec![hidden];
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, -3.0), Vec3::zeros(), Vec3::y(), 0.8, 21, 21).unwrap();
        // Brute-force transmittance with a fine step.
        let steps = 100_000;
        let (a, b) = (-1.0, 0.3);
        let dt = (b - a) / steps as f64;
        let depth: f64 = (0..steps)
            .map(|i| s.oracle_sigma(&Vec3::new(0.0, 0.0, a + (i as f64 + 0.5) * dt)) * dt)
            .sum();
        assert!((-depth).exp() < 0.5);
        assert!(teacher_keypoint_heatmap(&s, &cam).data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scenes_and_corpora_are_deterministic() {
        let spec = SceneSpec::default();
        assert_eq!(generate_scene(17, &spec).unwrap(), generate_scene(17, &spec).unwrap());
        let cs = CorpusSpec::default();
        assert_eq!(generate_corpus(5, &cs).unwrap(), generate_corpus(5, &cs).unwrap());
    }

    #[test]
    fn interest_points_stay_in_bounds() {
        for seed in 0..50 {
            let s = generate_scene(seed, &SceneSpec::default()).unwrap();
            assert!(s.interest_points.len() >= s.blobs.len());
            assert!(s.interest_points.iter().all(|p| p.amax() <= 1.0));
        }
    }

    #[test]
    fn duplicate_counts() {
        let mut cs = CorpusSpec {
            n_scenes: 12,
            duplicate_fraction: 0.0,
            ..Default::default()
        };
        assert!(generate_corpus(1, &cs)
            .unwrap()
            .iter()
            .all(|e| e.duplicate_of.is_none()));
        cs.duplicate_fraction = 0.5;
        let c = generate_corpus(1, &cs).unwrap();
        let dups: Vec<_> = c.iter().filter(|e| e.duplicate_of.is_some()).collect();
        assert_eq!(dups.len(), 6);
        assert_eq!(dups.iter().filter(|e| e.transform.is_some()).count(), 3);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = SceneSpec {
            min_blobs: 0,
            ..Default::default()
        };
        assert!(matches!(generate_scene(0, &bad), Err(Error::Input(_))));
        let bad = CorpusSpec {
            duplicate_fraction: 1.5,
            ..Default::default()
        };
        assert!(generate_corpus(0, &bad).is_err());
    }

    #[test]
    fn transformed_duplicate_matches_original_densities() {
        let cs = CorpusSpec {
            n_scenes: 4,
            duplicate_fraction: 0.5,
            ..Default::default()
        };
        let c = generate_corpus(3, &cs).unwrap();
        let dup = c.iter().find(|e| e.transform.is_some()).unwrap();
        let orig = &c[dup.duplicate_of.unwrap() as usize];
        let (a, b) = (orig.scene().unwrap(), dup.scene().unwrap());
        let t = dup.transform.unwrap();
        for x in [Vec3::new(0.1, 0.2, 0.3), Vec3::new(-0.4, 0.0, 0.1)] {
            assert!((a.oracle_sigma(&x) - b.oracle_sigma(&t.apply(&x))).abs() < 1e-12);
        }
    }
}

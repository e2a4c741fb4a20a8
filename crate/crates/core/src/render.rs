//! Discrete volume rendering with frozen density.
//!
//! For samples with densities `σᵢ` and segment lengths `δᵢ`:
//!
//! ```text
//! αᵢ = 1 - exp(-σᵢ δᵢ)      Tᵢ = Π_{j<i} (1 - αⱼ)      wᵢ = Tᵢ αᵢ
//! value = Σ wᵢ vᵢ            T_end = Π (1 - αᵢ)
//! ```
//!
//! Density never receives gradients, so the rendered value is linear in the
//! per-sample values and its adjoint is simply `wᵢ · upstream`.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::geometry::{pixel_center, ray_for_pixel, Camera, Ray, SceneBounds, Vec3};
use crate::grid::FeatureGrid;
use crate::image::FeatureImage;

/// Rays whose final transmittance exceeds this never touched an active voxel.
pub const MISS_TRANSMITTANCE: f64 = 1.0 - 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub ts: Vec<f64>,
    pub positions: Vec<Vec3>,
    pub deltas: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    /// Fills `sigmas` by evaluating `density` at every sample position.
    pub fn with_sigmas(mut self, mut density: impl FnMut(&Vec3) -> Result<f64>) -> Result<Self> {
        self.sigmas = self.positions.iter().map(&mut density).collect::<Result<_>>()?;
        Ok(self)
    }

    fn check(&self) -> Result<()> {
        let n = self.ts.len();
        if n == 0 || self.deltas.len() != n || self.sigmas.len() != n || self.positions.len() != n {
            return Err(Error::input("ray sample arrays must be nonempty and of equal length"));
        }
        if self.sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::input("negative or non-finite density"));
        }
        if self.deltas.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::input("negative or non-finite segment length"));
        }
        Ok(())
    }
}

/// Stratified samples over `[t_near, t_far]`: bin centers without jitter, a
/// uniform draw inside each bin with it. Every sample gets the bin width as
/// its segment length. Densities are left at zero.
pub fn march(ray: &Ray, n: usize, jitter: Option<&mut dyn RngCore>) -> Result<RaySamples> {
    if n == 0 {
        return Err(Error::input("need at least one sample per ray"));
    }
    if !(ray.t_far > ray.t_near) {
        return Err(Error::input("degenerate ray segment"));
    }
    let width = (ray.t_far - ray.t_near) / n as f64;
    let mut ts = Vec::with_capacity(n);
    match jitter {
        None => ts.extend((0..n).map(|i| ray.t_near + (i as f64 + 0.5) * width)),
        Some(rng) => ts.extend((0..n).map(|i| ray.t_near + (i as f64 + rng.random::<f64>()) * width)),
    }
    Ok(RaySamples {
        positions: ts.iter().map(|&t| ray.at(t)).collect(),
        deltas: vec![width; n],
        sigmas: vec![0.0; n],
        ts,
    })
}

/// Per-sample compositing weights and the final transmittance.
pub fn render_weights(samples: &RaySamples) -> Result<(Vec<f64>, f64)> {
    samples.check()?;
    Ok(composite(&samples.sigmas, &samples.deltas))
}

fn composite(sigmas: &[f64], deltas: &[f64]) -> (Vec<f64>, f64) {
    let mut transmittance = 1.0;
    let weights = sigmas
        .iter()
        .zip(deltas)
        .map(|(s, d)| {
            let alpha = 1.0 - (-s * d).exp();
            let w = transmittance * alpha;
            transmittance *= 1.0 - alpha;
            w
        })
        .collect();
    (weights, transmittance)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub value: Vec<f64>,
    pub weights: Vec<f64>,
    pub t_end: f64,
}

/// Composites `values` (`samples.len() × channels`, row per sample).
pub fn render_quantity(samples: &RaySamples, values: &[f64], channels: usize) -> Result<RenderOutput> {
    samples.check()?;
    if values.len() != samples.len() * channels {
        return Err(Error::input("value array does not match samples × channels"));
    }
    let (weights, t_end) = composite(&samples.sigmas, &samples.deltas);
    let mut value = vec![0.0; channels];
    for (w, v) in weights.iter().zip(values.chunks_exact(channels.max(1))) {
        for (o, x) in value.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    Ok(RenderOutput { value, weights, t_end })
}

/// Gradient of `⟨render(values), upstream⟩` with respect to each sample value.
pub fn render_adjoint(samples: &RaySamples, upstream: &[f64]) -> Result<Vec<f64>> {
    let (weights, _) = render_weights(samples)?;
    Ok(weights
        .iter()
        .flat_map(|w| upstream.iter().map(move |u| w * u))
        .collect())
}

/// Which per-voxel quantity to render.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    Features,
    /// `relu(kp_logits)`, i.e. the 3D keypoint probability.
    KpProb,
}

#[derive(Clone, Debug)]
pub struct RenderedMap {
    pub image: FeatureImage,
    /// Pixel belongs to the ray mask: its ray hit at least one active voxel.
    pub valid: Vec<bool>,
    pub t_end: Vec<f64>,
}

/// Renders `grid` through every pixel of `camera` with `n` samples per ray.
pub fn render_feature_map(grid: &FeatureGrid, camera: &Camera, n: usize, channel: Channel) -> Result<RenderedMap> {
    let (data, channels) = match channel {
        Channel::Features => (std::borrow::Cow::Borrowed(&grid.features[..]), grid.channels()),
        Channel::KpProb => (std::borrow::Cow::Owned(grid.kp_prob()), 1),
    };
    let (w, h) = (camera.width as usize, camera.height as usize);
    let mut image = FeatureImage::zeros(w, h, channels);
    let mut valid = vec![false; w * h];
    let mut t_end = vec![1.0; w * h];
    let bounds = SceneBounds::default();
    let occ = grid.occupancy();
    let mut values = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let p = row * w + col;
            let Some(ray) = ray_for_pixel(camera, pixel_center(col, row), &bounds)? else {
                continue;
            };
            if grid.is_empty() {
                continue;
            }
            let samples = march(&ray, n, None)?.with_sigmas(|x| grid.density_at(x))?;
            values.clear();
            values.resize(samples.len() * channels, 0.0);
            for (x, out) in samples.positions.iter().zip(values.chunks_exact_mut(channels)) {
                occ.interpolate(&data, channels, x, out)?;
            }
            let out = render_quantity(&samples, &values, channels)?;
            t_end[p] = out.t_end;
            if out.t_end <= MISS_TRANSMITTANCE {
                valid[p] = true;
                image.pixel_mut(p).copy_from_slice(&out.value);
            }
        }
    }
    Ok(RenderedMap { image, valid, t_end })
}

/// The rendered value of one ray as a sparse linear functional of the
/// per-voxel data: `value = Σ weight · data[slot]`. This is the composition
/// of trilinear interpolation and compositing with density held fixed, so it
/// serves both the forward pass and (transposed) the adjoint.
#[derive(Clone, Debug, PartialEq)]
pub struct RayFootprint {
    pub entries: Vec<(u32, f64)>,
    pub t_end: f64,
}

impl RayFootprint {
    pub fn apply(&self, data: &[f64], channels: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for &(s, w) in &self.entries {
            let src = &data[s as usize * channels..(s as usize + 1) * channels];
            for (o, v) in out.iter_mut().zip(src) {
                *o += w * v;
            }
        }
    }

    pub fn apply_scalar(&self, data: &[f64]) -> f64 {
        self.entries.iter().map(|&(s, w)| w * data[s as usize]).sum()
    }

    pub fn scatter(&self, upstream: &[f64], grad: &mut [f64]) {
        let channels = upstream.len();
        for &(s, w) in &self.entries {
            for (g, u) in grad[s as usize * channels..(s as usize + 1) * channels]
                .iter_mut()
                .zip(upstream)
            {
                *g += w * u;
            }
        }
    }

    pub fn scatter_scalar(&self, upstream: f64, grad: &mut [f64]) {
        for &(s, w) in &self.entries {
            grad[s as usize] += w * upstream;
        }
    }
}

pub fn compile_ray(grid: &FeatureGrid, ray: &Ray, n: usize) -> Result<RayFootprint> {
    let samples = march(ray, n, None)?;
    let occ = grid.occupancy();
    let mut corners = Vec::with_capacity(n);
    let mut sigmas = Vec::with_capacity(n);
    for x in &samples.positions {
        let cs = occ.corners(x)?;
        sigmas.push(
            cs.iter()
                .filter_map(|c| c.slot.map(|s| c.weight * grid.densities[s]))
                .sum::<f64>(),
        );
        corners.push(cs);
    }
    let (weights, t_end) = composite(&sigmas, &samples.deltas);
    let mut entries: Vec<(u32, f64)> = Vec::new();
    for (w, cs) in weights.iter().zip(&corners) {
        if *w == 0.0 {
            continue;
        }
        for c in cs {
            if let Some(s) = c.slot {
                if c.weight != 0.0 {
                    entries.push((s as u32, w * c.weight));
                }
            }
        }
    }
    entries.sort_by_key(|e| e.0);
    let mut merged: Vec<(u32, f64)> = Vec::with_capacity(entries.len());
    for (s, w) in entries {
        match merged.last_mut() {
            Some(last) if last.0 == s => last.1 += w,
            _ => merged.push((s, w)),
        }
    }
    Ok(RayFootprint { entries: merged, t_end })
}

/// Footprints of every pixel ray; `None` marks pixels outside the ray mask.
pub fn compile_camera(grid: &FeatureGrid, camera: &Camera, n: usize) -> Result<Vec<Option<RayFootprint>>> {
    let bounds = SceneBounds::default();
    let (w, h) = (camera.width as usize, camera.height as usize);
    let mut out = Vec::with_capacity(w * h);
    for row in 0..h {
        for col in 0..w {
            let fp = match ray_for_pixel(camera, pixel_center(col, row), &bounds)? {
                Some(ray) if !grid.is_empty() => {
                    let fp = compile_ray(grid, &ray, n)?;
                    (fp.t_end <= MISS_TRANSMITTANCE).then_some(fp)
                }
                _ => None,
            };
            out.push(fp);
        }
    }
    Ok(out)
}

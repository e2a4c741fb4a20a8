//! Sparse lattice representation of a scene.
//!
//! A radiance field is sampled on the regular lattice `[-1:ε:1]^3`, points
//! whose opacity `1 - exp(-σ)` falls below a threshold are dropped, and the
//! survivors carry learnable per-voxel feature vectors and keypoint logits.
//! Lattice point `(i, j, k)` sits at `-1 + ε·(i, j, k)` with `ε = 2 / (R - 1)`.

use crate::error::{Error, Result};
use crate::geometry::Vec3;

const EMPTY: u32 = u32::MAX;

/// Tolerance for positions that land a hair outside `[-1, 1]` because of
/// floating-point ray clipping.
const BOUNDS_TOL: f64 = 1e-9;

/// Density assigned to voxels produced by [`voxelize_points`]; `α ≈ 0.9933`.
pub const OPAQUE_DENSITY: f64 = 5.0;

/// Anything that can report density and view-dependent color.
pub trait RadianceField {
    fn sigma(&self, x: &Vec3) -> f64;
    fn color(&self, x: &Vec3, d: &Vec3) -> [f64; 3];
}

/// The six axis-aligned unit directions.
pub fn axis_directions() -> Vec<Vec3> {
    vec![Vec3::x(), -Vec3::x(), Vec3::y(), -Vec3::y(), Vec3::z(), -Vec3::z()]
}

/// Opacity of a unit-spacing lattice sample.
pub fn lattice_alpha(sigma: f64) -> f64 {
    1.0 - (-sigma).exp()
}

/// Set of occupied lattice sites with O(1) lookup.
///
/// Sites are kept sorted by linear index `i + R·(j + R·k)`, so the slot
/// order (and everything derived from it) is deterministic.
#[derive(Clone, Debug, PartialEq)]
pub struct Occupancy {
    resolution: usize,
    coords: Vec<[u32; 3]>,
    lookup: Vec<u32>,
}

impl Occupancy {
    pub fn new(resolution: usize, mut coords: Vec<[u32; 3]>) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::input("grid resolution must be at least 2"));
        }
        if resolution > 1024 {
            return Err(Error::input("grid resolution above 1024 is not supported"));
        }
        let r = resolution as u32;
        if coords.iter().any(|c| c.iter().any(|&v| v >= r)) {
            return Err(Error::input("occupied coordinate outside lattice"));
        }
        coords.sort_by_key(|c| linear_index(resolution, *c));
        coords.dedup();
        let mut lookup = vec![EMPTY; resolution * resolution * resolution];
        for (slot, c) in coords.iter().enumerate() {
            lookup[linear_index(resolution, *c)] = slot as u32;
        }
        Ok(Occupancy {
            resolution,
            coords,
            lookup,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn spacing(&self) -> f64 {
        2.0 / (self.resolution - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[u32; 3]] {
        &self.coords
    }

    pub fn slot(&self, c: [i64; 3]) -> Option<usize> {
        let r = self.resolution as i64;
        if c.iter().any(|&v| v < 0 || v >= r) {
            return None;
        }
        let s = self.lookup[linear_index(self.resolution, [c[0] as u32, c[1] as u32, c[2] as u32])];
        (s != EMPTY).then_some(s as usize)
    }

    pub fn position(&self, slot: usize) -> Vec3 {
        lattice_position(self.resolution, self.coords[slot])
    }

    /// The eight trilinear corners of `x` with their weights. Corners that
    /// are not occupied have `slot == None`; weights always sum to one.
    pub fn corners(&self, x: &Vec3) -> Result<[Corner; 8]> {
        if !(0..3).all(|k| x[k] >= -1.0 - BOUNDS_TOL && x[k] <= 1.0 + BOUNDS_TOL) {
            return Err(Error::input(format!(
                "query point ({}, {}, {}) outside [-1, 1]^3",
                x[0], x[1], x[2]
            )));
        }
        let eps = self.spacing();
        let hi = (self.resolution - 2) as f64;
        let mut base = [0i64; 3];
        let mut frac = [0.0; 3];
        for k in 0..3 {
            let u = ((x[k].clamp(-1.0, 1.0) + 1.0) / eps).clamp(0.0, (self.resolution - 1) as f64);
            let i0 = u.floor().min(hi);
            base[k] = i0 as i64;
            frac[k] = u - i0;
        }
        let mut out = [Corner {
            slot: None,
            weight: 0.0,
        }; 8];
        for (n, corner) in out.iter_mut().enumerate() {
            let (dx, dy, dz) = ((n & 1) as i64, ((n >> 1) & 1) as i64, ((n >> 2) & 1) as i64);
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            *corner = Corner {
                slot: self.slot([base[0] + dx, base[1] + dy, base[2] + dz]),
                weight: wx * wy * wz,
            };
        }
        Ok(out)
    }

    /// Trilinear blend of per-slot `data` (`channels` values per slot) at `x`.
    pub fn interpolate(&self, data: &[f64], channels: usize, x: &Vec3, out: &mut [f64]) -> Result<()> {
        debug_assert_eq!(data.len(), self.len() * channels);
        out.iter_mut().for_each(|v| *v = 0.0);
        for c in self.corners(x)? {
            if let Some(s) = c.slot {
                let src = &data[s * channels..(s + 1) * channels];
                for (o, v) in out.iter_mut().zip(src) {
                    *o += c.weight * v;
                }
            }
        }
        Ok(())
    }

    /// Adjoint of [`Occupancy::interpolate`]: adds `upstream·w` to the
    /// gradient of every occupied corner. Returns the weight that fell on
    /// unoccupied corners and was discarded.
    pub fn scatter(&self, x: &Vec3, upstream: &[f64], grad: &mut [f64]) -> Result<f64> {
        let channels = upstream.len();
        let mut discarded = 0.0;
        for c in self.corners(x)? {
            match c.slot {
                Some(s) => {
                    for (g, u) in grad[s * channels..(s + 1) * channels].iter_mut().zip(upstream) {
                        *g += c.weight * u;
                    }
                }
                None => discarded += c.weight,
            }
        }
        Ok(discarded)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corner {
    pub slot: Option<usize>,
    pub weight: f64,
}

pub fn linear_index(resolution: usize, c: [u32; 3]) -> usize {
    c[0] as usize + resolution * (c[1] as usize + resolution * c[2] as usize)
}

pub fn lattice_position(resolution: usize, c: [u32; 3]) -> Vec3 {
    let eps = 2.0 / (resolution - 1) as f64;
    Vec3::new(
        -1.0 + eps * c[0] as f64,
        -1.0 + eps * c[1] as f64,
        -1.0 + eps * c[2] as f64,
    )
}

fn coords_of(resolution: usize, linear: usize) -> [u32; 3] {
    let r = resolution;
    [
        (linear % r) as u32,
        ((linear / r) % r) as u32,
        (linear / (r * r)) as u32,
    ]
}

/// Lattice samples of density and color, sparsified by opacity.
///
/// `densities` covers every lattice point; `colors` holds `|D|·3` values for
/// each occupied point only, in occupancy slot order.
#[derive(Clone, Debug)]
pub struct SampledGrid {
    pub resolution: usize,
    pub spacing: f64,
    pub theta: f64,
    pub directions: Vec<Vec3>,
    pub densities: Vec<f64>,
    pub colors: Vec<f64>,
    pub occupancy: Occupancy,
}

impl SampledGrid {
    pub fn density_at(&self, c: [u32; 3]) -> f64 {
        self.densities[linear_index(self.resolution, c)]
    }

    /// Input embedding: `[σ, c(·, d₁), …, c(·, d_|D|)]` per occupied voxel.
    pub fn input_embedding(&self) -> (Vec<f64>, usize) {
        let per = 1 + 3 * self.directions.len();
        let mut out = Vec::with_capacity(self.occupancy.len() * per);
        for (slot, c) in self.occupancy.coords().iter().enumerate() {
            out.push(self.density_at(*c));
            out.extend_from_slice(&self.colors[slot * (per - 1)..(slot + 1) * (per - 1)]);
        }
        (out, per)
    }
}

/// Samples `field` on the `R^3` lattice and keeps points with `α ≥ theta`.
pub fn sample_grid(
    field: &impl RadianceField,
    resolution: usize,
    directions: &[Vec3],
    theta: f64,
) -> Result<SampledGrid> {
    if resolution < 2 {
        return Err(Error::input("grid resolution must be at least 2"));
    }
    if !(0.0..1.0).contains(&theta) {
        return Err(Error::input("theta must lie in [0, 1)"));
    }
    if directions.is_empty() || directions.iter().any(|d| (d.norm() - 1.0).abs() > 1e-9) {
        return Err(Error::input("direction set must be nonempty unit vectors"));
    }
    let total = resolution * resolution * resolution;
    let mut densities = Vec::with_capacity(total);
    let mut occupied = Vec::new();
    for linear in 0..total {
        let c = coords_of(resolution, linear);
        let sigma = field.sigma(&lattice_position(resolution, c));
        if lattice_alpha(sigma) >= theta {
            occupied.push(c);
        }
        densities.push(sigma);
    }
    let occupancy = Occupancy::new(resolution, occupied)?;
    let mut colors = Vec::with_capacity(occupancy.len() * directions.len() * 3);
    for slot in 0..occupancy.len() {
        let x = occupancy.position(slot);
        for d in directions {
            colors.extend_from_slice(&field.color(&x, d));
        }
    }
    Ok(SampledGrid {
        resolution,
        spacing: 2.0 / (resolution - 1) as f64,
        theta,
        directions: directions.to_vec(),
        densities,
        colors,
        occupancy,
    })
}

/// Bins points into lattice cells centered on the lattice points. Every
/// touched cell becomes an opaque voxel carrying the mean color of its points
/// (mid-gray when no colors are given) for all axis directions.
pub fn voxelize_points(points: &[Vec3], colors: Option<&[[f64; 3]]>, resolution: usize) -> Result<SampledGrid> {
    if points.is_empty() {
        return Err(Error::input("cannot voxelize an empty point list"));
    }
    if resolution < 2 {
        return Err(Error::input("grid resolution must be at least 2"));
    }
    if let Some(c) = colors {
        if c.len() != points.len() {
            return Err(Error::input("color count does not match point count"));
        }
    }
    let eps = 2.0 / (resolution - 1) as f64;
    let mut sums: std::collections::BTreeMap<usize, ([f64; 3], usize)> = Default::default();
    for (n, p) in points.iter().enumerate() {
        if !(0..3).all(|k| p[k] >= -1.0 && p[k] <= 1.0) {
            return Err(Error::input(format!("point {n} outside [-1, 1]^3")));
        }
        let mut c = [0u32; 3];
        for k in 0..3 {
            let idx = ((p[k] + 1.0) / eps + 0.5).floor() as i64;
            c[k] = idx.clamp(0, resolution as i64 - 1) as u32;
        }
        let entry = sums.entry(linear_index(resolution, c)).or_insert(([0.0; 3], 0));
        let col = colors.map_or([0.5; 3], |cs| cs[n]);
        for (e, c) in entry.0.iter_mut().zip(col) {
            *e += c;
        }
        entry.1 += 1;
    }
    let directions = axis_directions();
    let mut densities = vec![0.0; resolution * resolution * resolution];
    let mut coords = Vec::with_capacity(sums.len());
    let mut colors_out = Vec::with_capacity(sums.len() * directions.len() * 3);
    // BTreeMap iterates in linear-index order, matching occupancy slot order.
    for (&linear, (sum, count)) in &sums {
        densities[linear] = OPAQUE_DENSITY;
        coords.push(coords_of(resolution, linear));
        let mean = sum.map(|v| v / *count as f64);
        for _ in &directions {
            colors_out.extend_from_slice(&mean);
        }
    }
    Ok(SampledGrid {
        resolution,
        spacing: eps,
        theta: 0.0,
        directions,
        densities,
        colors: colors_out,
        occupancy: Occupancy::new(resolution, coords)?,
    })
}

/// Learnable sparse feature grid with frozen densities.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    occupancy: Occupancy,
    channels: usize,
    /// Frozen per-voxel σ.
    pub densities: Vec<f64>,
    /// `len() × channels` feature vectors.
    pub features: Vec<f64>,
    /// Pre-activation keypoint head output per voxel.
    pub kp_logits: Vec<f64>,
}

impl FeatureGrid {
    /// Zero-initialized features over the occupancy of `sampled`.
    pub fn from_sampled(sampled: &SampledGrid, channels: usize) -> Self {
        let occupancy = sampled.occupancy.clone();
        let densities = occupancy.coords().iter().map(|c| sampled.density_at(*c)).collect();
        let n = occupancy.len();
        FeatureGrid {
            occupancy,
            channels,
            densities,
            features: vec![0.0; n * channels],
            kp_logits: vec![0.0; n],
        }
    }

    pub fn from_parts(
        resolution: usize,
        channels: usize,
        coords: Vec<[u32; 3]>,
        densities: Vec<f64>,
        features: Vec<f64>,
        kp_logits: Vec<f64>,
    ) -> Result<Self> {
        let n = coords.len();
        if densities.len() != n || features.len() != n * channels || kp_logits.len() != n {
            return Err(Error::input("grid arrays do not match occupied count"));
        }
        if densities.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::input("grid densities must be nonnegative"));
        }
        let occupancy = Occupancy::new(resolution, coords.clone())?;
        if occupancy.len() != n {
            return Err(Error::input("duplicate occupied coordinates"));
        }
        // Reorder the per-voxel arrays into canonical slot order.
        let mut grid = FeatureGrid {
            channels,
            densities: vec![0.0; n],
            features: vec![0.0; n * channels],
            kp_logits: vec![0.0; n],
            occupancy,
        };
        for (src, c) in coords.iter().enumerate() {
            let dst = grid
                .occupancy
                .slot([c[0] as i64, c[1] as i64, c[2] as i64])
                .expect("occupied");
            grid.densities[dst] = densities[src];
            grid.kp_logits[dst] = kp_logits[src];
            grid.features[dst * channels..(dst + 1) * channels]
                .copy_from_slice(&features[src * channels..(src + 1) * channels]);
        }
        Ok(grid)
    }

    pub fn occupancy(&self) -> &Occupancy {
        &self.occupancy
    }

    pub fn resolution(&self) -> usize {
        self.occupancy.resolution()
    }

    pub fn spacing(&self) -> f64 {
        self.occupancy.spacing()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.occupancy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupancy.is_empty()
    }

    pub fn feature(&self, slot: usize) -> &[f64] {
        &self.features[slot * self.channels..(slot + 1) * self.channels]
    }

    pub fn alpha(&self, slot: usize) -> f64 {
        lattice_alpha(self.densities[slot])
    }

    /// `relu(kp_logits)`: per-voxel keypoint probability `Pˢ`.
    pub fn kp_prob(&self) -> Vec<f64> {
        self.kp_logits.iter().map(|v| v.max(0.0)).collect()
    }

    pub fn trilerp(&self, x: &Vec3) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.channels];
        self.occupancy.interpolate(&self.features, self.channels, x, &mut out)?;
        Ok(out)
    }

    /// Interpolated frozen density.
    pub fn density_at(&self, x: &Vec3) -> Result<f64> {
        let mut out = [0.0];
        self.occupancy.interpolate(&self.densities, 1, x, &mut out)?;
        Ok(out[0])
    }

    /// Per-voxel contributions `(slot, upstream·w)` of the trilinear adjoint.
    /// Unoccupied corners are dropped.
    pub fn trilerp_adjoint(&self, x: &Vec3, upstream: &[f64]) -> Result<Vec<(usize, Vec<f64>)>> {
        if upstream.len() != self.channels {
            return Err(Error::input("upstream length does not match channel count"));
        }
        Ok(self
            .occupancy
            .corners(x)?
            .iter()
            .filter_map(|c| c.slot.map(|s| (s, upstream.iter().map(|u| u * c.weight).collect())))
            .collect())
    }

    /// Accumulating form of [`FeatureGrid::trilerp_adjoint`].
    pub fn trilerp_adjoint_into(&self, x: &Vec3, upstream: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.occupancy.scatter(x, upstream, grad)
    }
}

/// Cubic sparse convolution kernel. Weights are laid out as
/// `[offset][in_channel][out_channel]` with offsets in z-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    pub size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvKernel {
    pub fn zeros(size: usize, in_channels: usize, out_channels: usize) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(Error::input("kernel size must be odd"));
        }
        Ok(ConvKernel {
            size,
            in_channels,
            out_channels,
            weights: vec![0.0; size * size * size * in_channels * out_channels],
            bias: vec![0.0; out_channels],
        })
    }

    fn offsets(&self) -> impl Iterator<Item = (usize, [i64; 3])> {
        let s = self.size as i64;
        let h = s / 2;
        (0..(s * s * s) as usize).map(move |o| {
            let o_i = o as i64;
            (o, [o_i % s - h, (o_i / s) % s - h, o_i / (s * s) - h])
        })
    }

    fn check(&self, occ: &Occupancy, input: &[f64]) -> Result<()> {
        if self.size.is_multiple_of(2) {
            return Err(Error::input("kernel size must be odd"));
        }
        let expected = self.size.pow(3) * self.in_channels * self.out_channels;
        if self.weights.len() != expected || self.bias.len() != self.out_channels {
            return Err(Error::input("kernel parameter shape mismatch"));
        }
        if input.len() != occ.len() * self.in_channels {
            return Err(Error::input("input channel data does not match kernel"));
        }
        Ok(())
    }
}

/// Sparse convolution evaluated at occupied sites only; unoccupied neighbors
/// contribute zero.
pub fn sparse_conv3(occ: &Occupancy, input: &[f64], kernel: &ConvKernel) -> Result<Vec<f64>> {
    kernel.check(occ, input)?;
    let (cin, cout) = (kernel.in_channels, kernel.out_channels);
    let mut out = Vec::with_capacity(occ.len() * cout);
    for c in occ.coords() {
        out.extend_from_slice(&kernel.bias);
        let dst = out.len() - cout;
        for (o, off) in kernel.offsets() {
            let Some(nb) = occ.slot([c[0] as i64 + off[0], c[1] as i64 + off[1], c[2] as i64 + off[2]]) else {
                continue;
            };
            let x = &input[nb * cin..(nb + 1) * cin];
            let w = &kernel.weights[o * cin * cout..(o + 1) * cin * cout];
            for (ci, xv) in x.iter().enumerate() {
                let row = &w[ci * cout..(ci + 1) * cout];
                for (y, wv) in out[dst..].iter_mut().zip(row) {
                    *y += xv * wv;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`sparse_conv3`] for a given upstream gradient on its output.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn sparse_conv3_backward(
    occ: &Occupancy,
    input: &[f64],
    kernel: &ConvKernel,
    upstream: &[f64],
) -> Result<ConvGrads> {
    kernel.check(occ, input)?;
    let (cin, cout) = (kernel.in_channels, kernel.out_channels);
    if upstream.len() != occ.len() * cout {
        return Err(Error::input("upstream does not match conv output"));
    }
    let mut g = ConvGrads {
        input: vec![0.0; input.len()],
        weights: vec![0.0; kernel.weights.len()],
        bias: vec![0.0; cout],
    };
    for (slot, c) in occ.coords().iter().enumerate() {
        let up = &upstream[slot * cout..(slot + 1) * cout];
        for (b, u) in g.bias.iter_mut().zip(up) {
            *b += u;
        }
        for (o, off) in kernel.offsets() {
            let Some(nb) = occ.slot([c[0] as i64 + off[0], c[1] as i64 + off[1], c[2] as i64 + off[2]]) else {
                continue;
            };
            let x = &input[nb * cin..(nb + 1) * cin];
            let base = o * cin * cout;
            for (ci, &xv) in x.iter().enumerate() {
                let row = base + ci * cout;
                let mut acc = 0.0;
                for (co, &u) in up.iter().enumerate() {
                    g.weights[row + co] += xv * u;
                    acc += kernel.weights[row + co] * u;
                }
                g.input[nb * cin + ci] += acc;
            }
        }
    }
    Ok(g)
}

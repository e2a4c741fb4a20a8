//! Keypoints, descriptor matching, geometric verification and the scene
//! index with its query protocols.

use nalgebra::{DMatrix, Matrix3, SVD};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project, Camera, Mat3, RigidTransform, Vec3};
use crate::grid::FeatureGrid;
use crate::image::{FeatureImage, ProbImage};

/// Default cosine threshold for matches and duplicate verdicts.
pub const DEFAULT_THETA: f64 = 0.75;

/// Returns `v / ‖v‖`, or `None` for a (near) zero vector.
pub fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 1e-12 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let d = (aa * bb).sqrt();
    if d == 0.0 {
        0.0
    } else {
        (ab / d).clamp(-1.0, 1.0)
    }
}

/// Anything carrying a unit descriptor.
pub trait Described {
    fn descriptor(&self) -> &[f64];
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyPoint2D {
    pub pixel: [f64; 2],
    pub score: f64,
    pub descriptor: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyPoint3D {
    pub position: Vec3,
    pub score: f64,
    pub descriptor: Vec<f64>,
}

impl Described for KeyPoint2D {
    fn descriptor(&self) -> &[f64] {
        &self.descriptor
    }
}

impl Described for KeyPoint3D {
    fn descriptor(&self) -> &[f64] {
        &self.descriptor
    }
}

impl Described for Vec<f64> {
    fn descriptor(&self) -> &[f64] {
        self
    }
}

/// Selection limits shared by the 2D and 3D detectors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Selection {
    pub k: usize,
    /// Suppression radius: pixels in 2D, voxels in 3D.
    pub nms_radius: f64,
    /// Candidates must score strictly above this.
    pub min_score: f64,
    /// Candidates must also score at least this fraction of the best score.
    pub min_relative_score: f64,
}

impl Selection {
    pub fn new(k: usize, nms_radius: f64) -> Self {
        Selection {
            k,
            nms_radius,
            min_score: 0.0,
            min_relative_score: 0.0,
        }
    }
}

impl Default for Selection {
    fn default() -> Self {
        Selection::new(32, 2.0)
    }
}

/// Greedy non-maximum suppression over scored candidates at positions in
/// any dimension. Returns indices in selection order. Ties go to the lower
/// index.
pub fn greedy_nms(scores: &[f64], positions: &[Vec<f64>], sel: &Selection) -> Vec<usize> {
    let best = scores.iter().cloned().fold(0.0f64, f64::max);
    let floor = sel.min_score.max(sel.min_relative_score * best);
    let mut order: Vec<usize> = (0..scores.len())
        .filter(|&i| scores[i] > floor || (scores[i] > sel.min_score && scores[i] == best && best > 0.0))
        .collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let r2 = sel.nms_radius * sel.nms_radius;
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.len() >= sel.k {
            break;
        }
        let close = kept.iter().any(|&j| {
            positions[i]
                .iter()
                .zip(&positions[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                <= r2
        });
        if !close {
            kept.push(i);
        }
    }
    kept
}

/// Top-scoring pixels of `p2d` with non-maximum suppression, decorated with
/// the normalized `f2d` feature. Pixels with a zero feature are skipped.
pub fn select_keypoints2d(p2d: &ProbImage, f2d: &FeatureImage, sel: &Selection) -> Result<Vec<KeyPoint2D>> {
    if p2d.width != f2d.width || p2d.height != f2d.height {
        return Err(Error::input("probability and feature maps differ in size"));
    }
    let w = p2d.width;
    let usable: Vec<usize> = (0..p2d.data.len())
        .filter(|&p| normalized(f2d.pixel(p)).is_some())
        .collect();
    let scores: Vec<f64> = usable.iter().map(|&p| p2d.data[p]).collect();
    let positions: Vec<Vec<f64>> = usable.iter().map(|&p| vec![(p % w) as f64, (p / w) as f64]).collect();
    Ok(greedy_nms(&scores, &positions, sel)
        .into_iter()
        .map(|i| {
            let p = usable[i];
            KeyPoint2D {
                pixel: crate::geometry::pixel_center(p % w, p / w),
                score: p2d.data[p],
                descriptor: normalized(f2d.pixel(p)).expect("usable pixel"),
            }
        })
        .collect())
}

/// Occupied voxels ranked by `α · relu(kp_logit)` with suppression measured
/// in voxels.
pub fn select_keypoints3d(grid: &FeatureGrid, sel: &Selection) -> Vec<KeyPoint3D> {
    let occ = grid.occupancy();
    let usable: Vec<usize> = (0..grid.len())
        .filter(|&s| normalized(grid.feature(s)).is_some())
        .collect();
    let scores: Vec<f64> = usable
        .iter()
        .map(|&s| grid.alpha(s) * grid.kp_logits[s].max(0.0))
        .collect();
    let positions: Vec<Vec<f64>> = usable
        .iter()
        .map(|&s| occ.coords()[s].iter().map(|&c| c as f64).collect())
        .collect();
    greedy_nms(&scores, &positions, sel)
        .into_iter()
        .map(|i| {
            let s = usable[i];
            KeyPoint3D {
                position: occ.position(s),
                score: scores[i],
                descriptor: normalized(grid.feature(s)).expect("usable voxel"),
            }
        })
        .collect()
}

/// Descriptor matches between two keypoint lists.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet {
    /// `(index in A, index in B, cosine)`, sorted by the A index.
    pub pairs: Vec<(usize, usize, f64)>,
    /// Filled by geometric verification.
    pub inliers: Vec<bool>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn mean_cosine(&self) -> f64 {
        if self.pairs.is_empty() {
            0.0
        } else {
            self.pairs.iter().map(|p| p.2).sum::<f64>() / self.pairs.len() as f64
        }
    }
}

fn best_match(d: &[f64], others: &[&[f64]]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, o) in others.iter().enumerate() {
        let c = cosine(d, o);
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((j, c));
        }
    }
    best
}

/// Nearest neighbors by cosine with `cosine ≥ theta`; with `mutual`, a pair
/// survives only if each side is the other's best match. Ties go to the
/// lower index.
pub fn match_descriptors<A: Described, B: Described>(a: &[A], b: &[B], theta: f64, mutual: bool) -> Result<MatchSet> {
    if !(theta > -1.0 && theta <= 1.0) {
        return Err(Error::input("match threshold must lie in (-1, 1]"));
    }
    let da: Vec<&[f64]> = a.iter().map(|x| x.descriptor()).collect();
    let db: Vec<&[f64]> = b.iter().map(|x| x.descriptor()).collect();
    let back: Vec<Option<(usize, f64)>> = if mutual {
        db.iter().map(|d| best_match(d, &da)).collect()
    } else {
        Vec::new()
    };
    let mut pairs = Vec::new();
    for (i, d) in da.iter().enumerate() {
        let Some((j, c)) = best_match(d, &db) else {
            continue;
        };
        if c < theta {
            continue;
        }
        if mutual && back[j].map(|(i2, _)| i2) != Some(i) {
            continue;
        }
        pairs.push((i, j, c));
    }
    let n = pairs.len();
    Ok(MatchSet {
        pairs,
        inliers: vec![false; n],
    })
}

/// Least-squares rigid transform `dst ≈ R·src + t` (Kabsch).
pub fn fit_rigid(src: &[Vec3], dst: &[Vec3]) -> Result<RigidTransform> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(Error::Insufficient("rigid fit needs at least 3 correspondences".into()));
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vec3>() / n;
    let cd = dst.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = SVD::new(h, true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let v = vt.transpose();
    let mut fix = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let rotation = v * fix * u.transpose();
    Ok(RigidTransform {
        rotation,
        translation: cd - rotation * cs,
    })
}

/// Twice the triangle area relative to its longest side squared; zero for
/// collinear points.
fn triangle_spread(p: [&Vec3; 3]) -> f64 {
    let (a, b) = (p[1] - p[0], p[2] - p[0]);
    let longest = a.norm_squared().max(b.norm_squared()).max((p[2] - p[1]).norm_squared());
    if longest == 0.0 {
        0.0
    } else {
        a.cross(&b).norm() / longest
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RigidFit {
    pub transform: RigidTransform,
    pub inliers: Vec<bool>,
    /// Minimal samples rejected as collinear.
    pub rejected_samples: usize,
}

impl RigidFit {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|b| **b).count()
    }
}

/// RANSAC over 3-point samples; the best consensus set is refit.
pub fn ransac_rigid(src: &[Vec3], dst: &[Vec3], iters: usize, tol: f64, seed: u64) -> Result<RigidFit> {
    if src.len() != dst.len() {
        return Err(Error::input("correspondence lists differ in length"));
    }
    let n = src.len();
    if n < 3 {
        return Err(Error::Insufficient(format!("rigid RANSAC needs 3 matches, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count_inliers = |t: &RigidTransform| -> (Vec<bool>, f64) {
        let mut err = 0.0;
        let mask = src
            .iter()
            .zip(dst)
            .map(|(s, d)| {
                let e = (t.apply(s) - d).norm();
                let ok = e <= tol;
                if ok {
                    err += e;
                }
                ok
            })
            .collect();
        (mask, err)
    };
    let mut best: Option<(usize, f64, Vec<bool>)> = None;
    let mut rejected = 0;
    for _ in 0..iters.max(1) {
        let idx = sample(&mut rng, n, 3).into_vec();
        let (s3, d3) = (
            [&src[idx[0]], &src[idx[1]], &src[idx[2]]],
            [&dst[idx[0]], &dst[idx[1]], &dst[idx[2]]],
        );
        if triangle_spread(s3) < 1e-6 || triangle_spread(d3) < 1e-6 {
            rejected += 1;
            continue;
        }
        let t = fit_rigid(&s3.map(|p| *p), &d3.map(|p| *p))?;
        let (mask, err) = count_inliers(&t);
        let k = mask.iter().filter(|b| **b).count();
        if best
            .as_ref()
            .is_none_or(|(bk, be, _)| k > *bk || (k == *bk && err < *be))
        {
            best = Some((k, err, mask));
        }
    }
    let Some((_, _, mut mask)) = best else {
        return Err(Error::Insufficient("every minimal sample was collinear".into()));
    };
    let mut transform = RigidTransform::identity();
    // Refit on the consensus set until it stops changing.
    for _ in 0..5 {
        let (s, d): (Vec<Vec3>, Vec<Vec3>) = mask
            .iter()
            .enumerate()
            .filter(|(_, m)| **m)
            .map(|(i, _)| (src[i], dst[i]))
            .unzip();
        if s.len() < 3 {
            break;
        }
        transform = fit_rigid(&s, &d)?;
        let (next, _) = count_inliers(&transform);
        if next == mask || next.iter().filter(|b| **b).count() < 3 {
            break;
        }
        mask = next;
    }
    Ok(RigidFit {
        transform,
        inliers: mask,
        rejected_samples: rejected,
    })
}

/// Pinhole intrinsics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn of(camera: &Camera) -> Self {
        Intrinsics {
            fx: camera.fx,
            fy: camera.fy,
            cx: camera.cx,
            cy: camera.cy,
            width: camera.width,
            height: camera.height,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PnpFit {
    /// Recovered camera; `None` when the configuration was degenerate.
    pub camera: Option<Camera>,
    pub inliers: Vec<bool>,
    pub degenerate: bool,
}

impl PnpFit {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|b| **b).count()
    }
}

/// Relative size of the smallest principal axis of a point set.
fn planarity(points: &[&Vec3]) -> f64 {
    let n = points.len() as f64;
    let c = points.iter().copied().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = *p - c;
        cov += d * d.transpose();
    }
    let ev = cov.symmetric_eigenvalues();
    let (lo, hi) = (ev.min(), ev.max());
    if hi <= 0.0 {
        0.0
    } else {
        (lo.max(0.0) / hi).sqrt()
    }
}

/// Direct linear transform on normalized image coordinates. Returns `None`
/// for degenerate input (coplanar or too few points, or a rank-deficient
/// system).
fn dlt_pose(points: &[&Vec3], pixels: &[[f64; 2]], k: &Intrinsics) -> Option<Camera> {
    let n = points.len();
    if n < 6 || planarity(points) < 1e-6 {
        return None;
    }
    // Hartley-style conditioning of the 3D points.
    let c = points.iter().copied().sum::<Vec3>() / n as f64;
    let scale = (points.iter().map(|p| (*p - c).norm()).sum::<f64>() / n as f64).max(1e-12);
    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (r, (p, px)) in points.iter().zip(pixels).enumerate() {
        let q = (*p - c) / scale;
        let x = (px[0] - k.cx) / k.fx;
        let y = (px[1] - k.cy) / k.fy;
        let h = [q.x, q.y, q.z, 1.0];
        for j in 0..4 {
            a[(2 * r, j)] = h[j];
            a[(2 * r, 8 + j)] = -x * h[j];
            a[(2 * r + 1, 4 + j)] = h[j];
            a[(2 * r + 1, 8 + j)] = -y * h[j];
        }
    }
    // Null vector of A from the eigen-decomposition of AᵀA.
    let ata = a.transpose() * &a;
    let eig = ata.symmetric_eigen();
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let (l0, l1, l_max) = (
        eig.eigenvalues[order[0]].max(0.0),
        eig.eigenvalues[order[1]].max(0.0),
        eig.eigenvalues[order[11]],
    );
    if l_max <= 0.0 || l1 / l_max < 1e-14 || l1 <= l0 * (1.0 + 1e-9) && l1 / l_max < 1e-10 {
        return None;
    }
    let v = eig.eigenvectors.column(order[0]);
    let mut m = Mat3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
    let mut p4 = Vec3::new(v[3], v[7], v[11]);
    if m.determinant() < 0.0 {
        m = -m;
        p4 = -p4;
    }
    let svd = SVD::new(m, true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let s = svd.singular_values.mean();
    if !(s > 0.0) {
        return None;
    }
    let r_cw = u * vt;
    if r_cw.determinant() <= 0.0 {
        return None;
    }
    // Undo the conditioning: x_cam = R (p - c)/scale + p4/s, scaled by `scale`.
    let t_cw = p4 / s * scale - r_cw * c;
    let rotation = r_cw.transpose();
    let translation = -(rotation * t_cw);
    Camera::new(k.fx, k.fy, k.cx, k.cy, k.width, k.height, rotation, translation).ok()
}

fn reprojection_error(camera: &Camera, point: &Vec3, pixel: &[f64; 2]) -> f64 {
    match project(camera, point) {
        Ok((px, _)) => ((px[0] - pixel[0]).powi(2) + (px[1] - pixel[1]).powi(2)).sqrt(),
        Err(_) => f64::INFINITY,
    }
}

/// Levenberg-Marquardt refinement of a pose on the selected correspondences,
/// minimizing squared reprojection error. Returns `camera` unchanged when
/// fewer than three correspondences are selected.
pub fn refine_pose(camera: &Camera, points: &[Vec3], pixels: &[[f64; 2]], mask: &[bool], iters: usize) -> Camera {
    let idx: Vec<usize> = (0..points.len()).filter(|&i| mask[i]).collect();
    if idx.len() < 3 {
        return *camera;
    }
    // World to camera: x_c = R p + t.
    let mut r = camera.rotation.transpose();
    let mut t = -(r * camera.translation);
    let cost = |r: &Mat3, t: &Vec3| -> f64 {
        idx.iter()
            .map(|&i| {
                let x = r * points[i] + t;
                if x.z <= 1e-9 {
                    return 1e12;
                }
                let u = camera.fx * x.x / x.z + camera.cx - pixels[i][0];
                let v = camera.fy * x.y / x.z + camera.cy - pixels[i][1];
                u * u + v * v
            })
            .sum()
    };
    let mut current = cost(&r, &t);
    let mut lambda = 1e-3;
    for _ in 0..iters {
        let mut jtj = nalgebra::Matrix6::<f64>::zeros();
        let mut jtr = nalgebra::Vector6::<f64>::zeros();
        for &i in &idx {
            let rp = r * points[i];
            let x = rp + t;
            if x.z <= 1e-9 {
                continue;
            }
            let iz = 1.0 / x.z;
            let res = [
                camera.fx * x.x * iz + camera.cx - pixels[i][0],
                camera.fy * x.y * iz + camera.cy - pixels[i][1],
            ];
            // d(u, v)/d x_c, then x_c = exp(ω) R p + t + δ: d x_c/dω = -[Rp]ₓ.
            let du = Vec3::new(camera.fx * iz, 0.0, -camera.fx * x.x * iz * iz);
            let dv = Vec3::new(0.0, camera.fy * iz, -camera.fy * x.y * iz * iz);
            for (g, e) in [(du, res[0]), (dv, res[1])] {
                let j = nalgebra::Vector6::new(
                    rp.y * g.z - rp.z * g.y,
                    rp.z * g.x - rp.x * g.z,
                    rp.x * g.y - rp.y * g.x,
                    g.x,
                    g.y,
                    g.z,
                );
                jtj += j * j.transpose();
                jtr += j * e;
            }
        }
        let mut improved = false;
        for _ in 0..8 {
            let mut a = jtj;
            for k in 0..6 {
                a[(k, k)] += lambda * (1.0 + jtj[(k, k)]);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let w = Vec3::new(step[0], step[1], step[2]);
            let r_new = nalgebra::Rotation3::new(w).into_inner() * r;
            let t_new = t + Vec3::new(step[3], step[4], step[5]);
            let c = cost(&r_new, &t_new);
            if c < current {
                (r, t, current) = (r_new, t_new, c);
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                break;
            }
            lambda *= 10.0;
        }
        if !improved || current < 1e-24 {
            break;
        }
    }
    // Re-orthonormalize against drift from repeated updates.
    let svd = SVD::new(r, true, true);
    if let (Some(u), Some(vt)) = (svd.u, svd.v_t) {
        r = u * vt;
    }
    let rotation = r.transpose();
    Camera::new(
        camera.fx,
        camera.fy,
        camera.cx,
        camera.cy,
        camera.width,
        camera.height,
        rotation,
        -(rotation * t),
    )
    .unwrap_or(*camera)
}

/// RANSAC over 6-point DLT pose hypotheses, each polished on its sample,
/// scored by reprojection. The best pose is refined on its inliers. The fit
/// is degenerate only when no hypothesis can be formed (coplanar points or
/// rank-deficient samples); a pose supported by few points is still
/// reported, with its small inlier set.
pub fn ransac_pnp(
    points: &[Vec3],
    pixels: &[[f64; 2]],
    intrinsics: &Intrinsics,
    iters: usize,
    tol_px: f64,
    seed: u64,
) -> Result<PnpFit> {
    if points.len() != pixels.len() {
        return Err(Error::input("correspondence lists differ in length"));
    }
    let n = points.len();
    if n < 6 {
        return Err(Error::Insufficient(format!("PnP needs 6 matches, got {n}")));
    }
    let degenerate = PnpFit {
        camera: None,
        inliers: vec![false; n],
        degenerate: true,
    };
    let all: Vec<&Vec3> = points.iter().collect();
    if planarity(&all) < 1e-6 {
        return Ok(degenerate);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let score = |cam: &Camera| -> (Vec<bool>, f64) {
        let mut err = 0.0;
        let mask = points
            .iter()
            .zip(pixels)
            .map(|(p, px)| {
                let e = reprojection_error(cam, p, px);
                let ok = e <= tol_px;
                if ok {
                    err += e;
                }
                ok
            })
            .collect();
        (mask, err)
    };
    let count = |m: &[bool]| m.iter().filter(|b| **b).count();
    let mut best: Option<(usize, f64, Vec<bool>, Camera)> = None;
    for _ in 0..iters.max(1) {
        let idx = sample(&mut rng, n, 6).into_vec();
        let p: Vec<&Vec3> = idx.iter().map(|&i| &points[i]).collect();
        let x: Vec<[f64; 2]> = idx.iter().map(|&i| pixels[i]).collect();
        let Some(cam) = dlt_pose(&p, &x, intrinsics) else {
            continue;
        };
        let mut sample_mask = vec![false; n];
        idx.iter().for_each(|&i| sample_mask[i] = true);
        let cam = refine_pose(&cam, points, pixels, &sample_mask, 10);
        let (mask, err) = score(&cam);
        let k = count(&mask);
        if best
            .as_ref()
            .is_none_or(|(bk, be, _, _)| k > *bk || (k == *bk && err < *be))
        {
            best = Some((k, err, mask, cam));
        }
    }
    let Some((_, _, mut mask, mut camera)) = best else {
        return Ok(degenerate);
    };
    for _ in 0..5 {
        if count(&mask) < 3 {
            break;
        }
        let cam = refine_pose(&camera, points, pixels, &mask, 20);
        let (next, _) = score(&cam);
        if count(&next) < count(&mask) {
            break;
        }
        camera = cam;
        if next == mask {
            break;
        }
        mask = next;
    }
    Ok(PnpFit {
        camera: Some(camera),
        inliers: mask,
        degenerate: false,
    })
}

/// One indexed scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneIndexEntry {
    pub id: String,
    pub global: Vec<f64>,
    pub keypoints: Vec<KeyPoint3D>,
}

/// Normalized mean of the occupied-voxel features.
pub fn global_descriptor(grid: &FeatureGrid) -> Result<Vec<f64>> {
    let c = grid.channels();
    let mut mean = vec![0.0; c];
    for s in 0..grid.len() {
        mean.iter_mut().zip(grid.feature(s)).for_each(|(m, f)| *m += f);
    }
    normalized(&mean).ok_or_else(|| Error::Insufficient("grid has no nonzero features".into()))
}

pub fn build_entry(id: &str, grid: &FeatureGrid, sel: &Selection) -> Result<SceneIndexEntry> {
    Ok(SceneIndexEntry {
        id: id.to_string(),
        global: global_descriptor(grid).map_err(|e| e.in_scene(id))?,
        keypoints: select_keypoints3d(grid, sel),
    })
}

/// Retrieval settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub theta: f64,
    pub keypoints_2d: Selection,
    pub keypoints_3d: Selection,
    pub ransac_iters: usize,
    /// PnP inlier tolerance, pixels.
    pub pnp_tol_px: f64,
    /// Rigid inlier tolerance, world units.
    pub rigid_tol: f64,
    pub min_inlier_fraction: f64,
    /// Rigid inliers required for a keypoint-mode duplicate verdict.
    pub min_rigid_inliers: usize,
    pub ren5_views: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            theta: DEFAULT_THETA,
            keypoints_2d: Selection {
                k: 16,
                nms_radius: 3.0,
                min_score: 0.0,
                min_relative_score: 0.0,
            },
            keypoints_3d: Selection {
                k: 64,
                nms_radius: 2.0,
                min_score: 0.0,
                min_relative_score: 0.0,
            },
            ransac_iters: 400,
            pnp_tol_px: 2.0,
            rigid_tol: 0.15,
            min_inlier_fraction: 0.3,
            min_rigid_inliers: 3,
            ren5_views: 5,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.theta > -1.0
            && self.theta <= 1.0
            && self.keypoints_2d.k > 0
            && self.keypoints_3d.k > 0
            && self.ransac_iters > 0
            && self.pnp_tol_px > 0.0
            && self.rigid_tol > 0.0
            && (0.0..=1.0).contains(&self.min_inlier_fraction)
            && self.ren5_views > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("retrieval settings out of range".into()))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    Global,
    Kp,
}

impl QueryMode {
    pub fn name(self) -> &'static str {
        match self {
            QueryMode::Global => "global",
            QueryMode::Kp => "kp",
        }
    }
}

/// A query image reduced to what retrieval needs.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageQuery {
    pub keypoints: Vec<KeyPoint2D>,
    pub global: Vec<f64>,
    pub intrinsics: Intrinsics,
}

/// Builds a query from 2D maps; the global descriptor averages `f2d` over
/// `valid` pixels (all pixels when `None`).
pub fn image_query(
    f2d: &FeatureImage,
    p2d: &ProbImage,
    valid: Option<&[bool]>,
    intrinsics: Intrinsics,
    sel: &Selection,
) -> Result<ImageQuery> {
    let mut mean = vec![0.0; f2d.channels];
    for p in 0..f2d.pixel_count() {
        if valid.is_none_or(|v| v[p]) {
            mean.iter_mut().zip(f2d.pixel(p)).for_each(|(m, f)| *m += f);
        }
    }
    Ok(ImageQuery {
        keypoints: select_keypoints2d(p2d, f2d, sel)?,
        global: normalized(&mean).unwrap_or_else(|| vec![0.0; f2d.channels]),
        intrinsics,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Ranked {
    pub id: String,
    pub score: f64,
    pub matches: usize,
    pub mean_cosine: f64,
    /// The score is a verified inlier count rather than a raw match count.
    pub verified: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryResult {
    pub mode: QueryMode,
    /// Keypoint mode had no query keypoints and ranked by global descriptor.
    pub fell_back: bool,
    pub ranking: Vec<Ranked>,
}

impl QueryResult {
    pub fn top(&self) -> Option<&str> {
        self.ranking.first().map(|r| r.id.as_str())
    }
}

fn sort_ranking(r: &mut [Ranked]) {
    r.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(b.mean_cosine.total_cmp(&a.mean_cosine))
            .then(a.id.cmp(&b.id))
    });
}

/// Ranks every indexed scene for an image query.
pub fn query_image(
    index: &[SceneIndexEntry],
    query: &ImageQuery,
    mode: QueryMode,
    config: &RetrievalConfig,
    seed: u64,
) -> Result<QueryResult> {
    if index.is_empty() {
        return Err(Error::input("index is empty"));
    }
    let fell_back = mode == QueryMode::Kp && query.keypoints.is_empty();
    let mut ranking = Vec::with_capacity(index.len());
    if mode == QueryMode::Global || fell_back {
        for e in index {
            let c = cosine(&query.global, &e.global);
            ranking.push(Ranked {
                id: e.id.clone(),
                score: c,
                matches: 0,
                mean_cosine: c,
                verified: false,
            });
        }
    } else {
        for e in index {
            let m = match_descriptors(&query.keypoints, &e.keypoints, config.theta, true)?;
            let raw = m.len();
            let mut score = raw as f64;
            let mut verified = false;
            if raw >= 6 {
                let pts: Vec<Vec3> = m.pairs.iter().map(|p| e.keypoints[p.1].position).collect();
                let px: Vec<[f64; 2]> = m.pairs.iter().map(|p| query.keypoints[p.0].pixel).collect();
                let fit = ransac_pnp(
                    &pts,
                    &px,
                    &query.intrinsics,
                    config.ransac_iters,
                    config.pnp_tol_px,
                    seed,
                )?;
                if !fit.degenerate {
                    score = fit.inlier_count() as f64;
                    verified = true;
                }
            }
            ranking.push(Ranked {
                id: e.id.clone(),
                score,
                matches: raw,
                mean_cosine: m.mean_cosine(),
                verified,
            });
        }
    }
    sort_ranking(&mut ranking);
    Ok(QueryResult {
        mode,
        fell_back,
        ranking,
    })
}

/// Per-view image embeddings of one indexed scene for the Ren5 baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewEmbeddings {
    pub id: String,
    pub views: Vec<Vec<f64>>,
}

/// Ranks scenes by their best-matching view embedding (winner takes all).
pub fn ren5_rank(index: &[ViewEmbeddings], query: &[f64]) -> Result<Vec<Ranked>> {
    if index.is_empty() {
        return Err(Error::input("index is empty"));
    }
    let mut ranking: Vec<Ranked> = index
        .iter()
        .map(|e| {
            let best = e
                .views
                .iter()
                .map(|v| cosine(query, v))
                .fold(f64::NEG_INFINITY, f64::max);
            Ranked {
                id: e.id.clone(),
                score: best,
                matches: 0,
                mean_cosine: best,
                verified: false,
            }
        })
        .collect();
    sort_ranking(&mut ranking);
    Ok(ranking)
}

/// Verdict on one candidate pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DupVerdict {
    pub a: String,
    pub b: String,
    pub score: f64,
    pub duplicate: bool,
    pub label: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DupReport {
    pub mode: QueryMode,
    pub theta: f64,
    pub verdicts: Vec<DupVerdict>,
    /// Fraction of labeled pairs judged correctly; `None` without labels.
    pub ap75: Option<f64>,
}

/// Keypoint-mode evidence for a pair: matches and the rigid fit, if any.
pub fn verify_pair(
    a: &SceneIndexEntry,
    b: &SceneIndexEntry,
    config: &RetrievalConfig,
    seed: u64,
) -> Result<(MatchSet, Option<RigidFit>)> {
    let mut m = match_descriptors(&a.keypoints, &b.keypoints, config.theta, true)?;
    if m.len() < 3 {
        return Ok((m, None));
    }
    let src: Vec<Vec3> = m.pairs.iter().map(|p| a.keypoints[p.0].position).collect();
    let dst: Vec<Vec3> = m.pairs.iter().map(|p| b.keypoints[p.1].position).collect();
    match ransac_rigid(&src, &dst, config.ransac_iters, config.rigid_tol, seed) {
        Ok(fit) => {
            m.inliers = fit.inliers.clone();
            Ok((m, Some(fit)))
        }
        Err(Error::Insufficient(_)) => Ok((m, None)),
        Err(e) => Err(e),
    }
}

/// Duplicate verdicts for index-position pairs with optional labels.
pub fn dup_detect(
    index: &[SceneIndexEntry],
    pairs: &[(usize, usize, Option<bool>)],
    mode: QueryMode,
    config: &RetrievalConfig,
    seed: u64,
) -> Result<DupReport> {
    let mut verdicts = Vec::with_capacity(pairs.len());
    for &(i, j, label) in pairs {
        let (Some(a), Some(b)) = (index.get(i), index.get(j)) else {
            return Err(Error::input(format!("pair ({i}, {j}) is outside the index")));
        };
        let (score, duplicate) = match mode {
            QueryMode::Global => {
                let c = cosine(&a.global, &b.global);
                (c, c >= config.theta)
            }
            QueryMode::Kp => {
                let (m, fit) = verify_pair(a, b, config, seed)?;
                match fit {
                    Some(f) if !m.is_empty() => {
                        let k = f.inlier_count();
                        let frac = k as f64 / m.len() as f64;
                        (
                            frac,
                            k >= config.min_rigid_inliers && frac >= config.min_inlier_fraction,
                        )
                    }
                    _ => (0.0, false),
                }
            }
        };
        verdicts.push(DupVerdict {
            a: a.id.clone(),
            b: b.id.clone(),
            score,
            duplicate,
            label,
        });
    }
    let labeled: Vec<&DupVerdict> = verdicts.iter().filter(|v| v.label.is_some()).collect();
    let ap75 = (!labeled.is_empty())
        .then(|| labeled.iter().filter(|v| v.label == Some(v.duplicate)).count() as f64 / labeled.len() as f64);
    Ok(DupReport {
        mode,
        theta: config.theta,
        verdicts,
        ap75,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::axis_angle;

    fn kp3(p: [f64; 3], d: Vec<f64>) -> KeyPoint3D {
        KeyPoint3D {
            position: Vec3::new(p[0], p[1], p[2]),
            score: 1.0,
            descriptor: d,
        }
    }

    #[test]
    fn zero_map_selects_nothing() {
        let p = ProbImage::zeros(8, 8);
        let f = FeatureImage::from_data(8, 8, 2, vec![1.0; 128]).unwrap();
        assert!(select_keypoints2d(&p, &f, &Selection::new(5, 2.0)).unwrap().is_empty());
    }

    #[test]
    fn single_peak_selects_argmax() {
        let mut p = ProbImage::zeros(9, 9);
        for j in 0..9 {
            for i in 0..9 {
                let d2 = ((i as f64 - 4.0).powi(2) + (j as f64 - 5.0).powi(2)) / 2.0;
                p.data[j * 9 + i] = (-d2).exp();
            }
        }
        let f = FeatureImage::from_data(9, 9, 1, vec![1.0; 81]).unwrap();
        let k = select_keypoints2d(&p, &f, &Selection::new(4, 20.0)).unwrap();
        assert_eq!(k.len(), 1);
        assert_eq!(k[0].pixel, [4.5, 5.5]);
    }

    #[test]
    fn self_match_is_perfect() {
        let a = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]];
        let m = match_descriptors(&a, &a, 0.75, true).unwrap();
        assert_eq!(m.len(), 3);
        assert!(m.pairs.iter().all(|&(i, j, c)| i == j && (c - 1.0).abs() < 1e-12));
    }

    #[test]
    fn orthogonal_sets_do_not_match() {
        let a = vec![vec![1.0, 0.0, 0.0]];
        let b = vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        assert!(match_descriptors(&a, &b, 0.75, true).unwrap().is_empty());
    }

    #[test]
    fn identity_rigid() {
        let pts: Vec<Vec3> = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.3, 0.2, 0.9]]
            .iter()
            .map(|p| Vec3::new(p[0], p[1], p[2]))
            .collect();
        let fit = ransac_rigid(&pts, &pts, 50, 1e-6, 0).unwrap();
        assert_eq!(fit.inlier_count(), 4);
        assert!((fit.transform.rotation - Mat3::identity()).norm() < 1e-9);
        assert!(fit.transform.translation.norm() < 1e-9);
    }

    #[test]
    fn collinear_samples_are_rejected() {
        let line: Vec<Vec3> = (0..3).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(
            ransac_rigid(&line, &line, 20, 1e-6, 0),
            Err(Error::Insufficient(_))
        ));
        let mut pts = line.clone();
        pts.push(Vec3::new(0.0, 1.0, 0.5));
        let t = RigidTransform {
            rotation: axis_angle(&Vec3::new(0.0, 0.0, 1.0), 0.4),
            translation: Vec3::new(0.1, 0.0, 0.0),
        };
        let dst: Vec<Vec3> = pts.iter().map(|p| t.apply(p)).collect();
        let fit = ransac_rigid(&pts, &dst, 50, 1e-6, 0).unwrap();
        assert!(fit.rejected_samples > 0);
        assert_eq!(fit.inlier_count(), 4);
    }

    #[test]
    fn too_few_matches_is_insufficient() {
        let p = vec![Vec3::zeros(); 2];
        assert!(matches!(ransac_rigid(&p, &p, 10, 0.1, 0), Err(Error::Insufficient(_))));
        let k = Intrinsics {
            fx: 10.0,
            fy: 10.0,
            cx: 5.0,
            cy: 5.0,
            width: 10,
            height: 10,
        };
        assert!(matches!(
            ransac_pnp(&[Vec3::zeros(); 5], &[[0.0; 2]; 5], &k, 10, 1.0, 0),
            Err(Error::Insufficient(_))
        ));
    }

    #[test]
    fn coplanar_pnp_is_flagged() {
        let cam = Camera::look_at(Vec3::new(0.0, 0.5, -3.0), Vec3::zeros(), Vec3::y(), 0.8, 64, 64).unwrap();
        let pts: Vec<Vec3> = (0..10)
            .map(|i| Vec3::new((i % 4) as f64 * 0.2 - 0.3, (i / 4) as f64 * 0.2 - 0.2, 0.0))
            .collect();
        let px: Vec<[f64; 2]> = pts.iter().map(|p| project(&cam, p).unwrap().0).collect();
        let fit = ransac_pnp(&pts, &px, &Intrinsics::of(&cam), 50, 1.0, 0).unwrap();
        assert!(fit.degenerate && fit.camera.is_none());
    }

    #[test]
    fn self_pair_is_duplicate_in_both_modes() {
        let e = SceneIndexEntry {
            id: "a".into(),
            global: vec![1.0, 0.0, 0.0],
            keypoints: vec![
                kp3([0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]),
                kp3([0.5, 0.0, 0.0], vec![0.0, 1.0, 0.0]),
                kp3([0.0, 0.5, 0.1], vec![0.0, 0.0, 1.0]),
                kp3([0.2, 0.1, 0.6], vec![0.0, 0.6, 0.8]),
            ],
        };
        let index = vec![e];
        let cfg = RetrievalConfig::default();
        for mode in [QueryMode::Global, QueryMode::Kp] {
            let r = dup_detect(&index, &[(0, 0, Some(true))], mode, &cfg, 1).unwrap();
            assert!(r.verdicts[0].duplicate);
            assert_eq!(r.ap75, Some(1.0));
        }
    }

    #[test]
    fn orthogonal_globals_are_not_duplicates() {
        let mk = |id: &str, g: Vec<f64>| SceneIndexEntry {
            id: id.into(),
            global: g,
            keypoints: Vec::new(),
        };
        let index = vec![mk("a", vec![1.0, 0.0]), mk("b", vec![0.0, 1.0])];
        let r = dup_detect(
            &index,
            &[(0, 1, Some(false))],
            QueryMode::Global,
            &RetrievalConfig::default(),
            0,
        )
        .unwrap();
        assert!(!r.verdicts[0].duplicate);
    }

    #[test]
    fn empty_keypoints_fall_back_to_global() {
        let index = vec![
            SceneIndexEntry {
                id: "a".into(),
                global: vec![0.0, 1.0],
                keypoints: Vec::new(),
            },
            SceneIndexEntry {
                id: "b".into(),
                global: vec![1.0, 0.0],
                keypoints: Vec::new(),
            },
        ];
        let q = ImageQuery {
            keypoints: Vec::new(),
            global: vec![0.9, 0.1],
            intrinsics: Intrinsics {
                fx: 1.0,
                fy: 1.0,
                cx: 0.5,
                cy: 0.5,
                width: 1,
                height: 1,
            },
        };
        let r = query_image(&index, &q, QueryMode::Kp, &RetrievalConfig::default(), 0).unwrap();
        assert!(r.fell_back);
        assert_eq!(r.top(), Some("b"));
    }
}

//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxdistill::geometry::{project, rotation_angle_between, Camera, Ray, RigidTransform, Vec3};
use voxdistill::grid::{lattice_position, linear_index, ConvKernel, FeatureGrid, Occupancy, RadianceField};
use voxdistill::oracle::{generate_corpus, CameraRig, CorpusSpec, OracleScene};
use voxdistill::render::{march, RaySamples};
use voxdistill::retrieval::{normalized, ransac_pnp, ransac_rigid, Intrinsics, KeyPoint3D};

pub struct RigidOutcome {
    pub rotation_error: f64,
    pub translation_error: f64,
    pub orthonormal_error: f64,
    pub det: f64,
}

/// Correspondences under a transform planted by the corpus generator, with
/// `outlier_fraction` of the targets replaced by unrelated points.
pub fn planted_rigid(seed: u64, outlier_fraction: f64) -> RigidOutcome {
    let spec = CorpusSpec {
        n_scenes: 4,
        duplicate_fraction: 0.5,
        ..Default::default()
    };
    let corpus = generate_corpus(seed, &spec).unwrap();
    let dup = corpus
        .iter()
        .find(|e| e.transform.is_some())
        .expect("a transformed duplicate");
    let truth = dup.transform.unwrap();
    let orig = corpus[dup.duplicate_of.unwrap() as usize].scene().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let mut src: Vec<Vec3> = orig.interest_points.clone();
    while src.len() < 40 {
        let b = &orig.blobs[rng.random_range(0..orig.blobs.len())];
        let off = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        src.push(b.center + off * 0.5 * b.radius);
    }
    let mut dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
    let n_out = (outlier_fraction * src.len() as f64).round() as usize;
    for k in 0..n_out {
        let i = (k * src.len()) / n_out.max(1);
        dst[i] = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
    }
    let fit = ransac_rigid(&src, &dst, 400, 0.05, seed).unwrap();
    rigid_outcome(&truth, &fit.transform)
}

pub fn rigid_outcome(truth: &RigidTransform, got: &RigidTransform) -> RigidOutcome {
    let r = got.rotation;
    RigidOutcome {
        rotation_error: rotation_angle_between(&truth.rotation, &r),
        translation_error: (truth.translation - got.translation).norm(),
        orthonormal_error: (r.transpose() * r - voxdistill::geometry::Mat3::identity()).abs().max(),
        det: r.determinant(),
    }
}

pub struct PnpOutcome {
    pub mask_exact: bool,
    pub max_reprojection_px: f64,
    pub degenerate: bool,
}

/// A camera from the standard rig observing random points in the scene
/// cube; `outlier_fraction` of the pixels are moved at least 8 px away.
pub fn planted_pnp(seed: u64, outlier_fraction: f64) -> PnpOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rig = CameraRig {
        width: 64,
        height: 64,
        ..CameraRig::default()
    };
    let cam: Camera = rig
        .camera(
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(-0.3..0.3),
        )
        .unwrap();
    let points: Vec<Vec3> = (0..40)
        .map(|_| {
            Vec3::new(
                rng.random_range(-0.8..0.8),
                rng.random_range(-0.8..0.8),
                rng.random_range(-0.8..0.8),
            )
        })
        .collect();
    let mut pixels: Vec<[f64; 2]> = points.iter().map(|p| project(&cam, p).unwrap().0).collect();
    let n_out = (outlier_fraction * points.len() as f64).round() as usize;
    let mut planted = vec![true; points.len()];
    for k in 0..n_out {
        let i = (k * points.len()) / n_out.max(1);
        planted[i] = false;
        let [u, v] = pixels[i];
        loop {
            let q = [rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)];
            if ((q[0] - u).powi(2) + (q[1] - v).powi(2)).sqrt() > 8.0 {
                pixels[i] = q;
                break;
            }
        }
    }
    let fit = ransac_pnp(&points, &pixels, &Intrinsics::of(&cam), 400, 2.0, seed).unwrap();
    let Some(est) = fit.camera else {
        return PnpOutcome {
            mask_exact: false,
            max_reprojection_px: f64::INFINITY,
            degenerate: true,
        };
    };
    let mut worst: f64 = 0.0;
    for (i, p) in points.iter().enumerate().filter(|(i, _)| planted[*i]) {
        let (px, _) = project(&est, p).unwrap();
        worst = worst.max(((px[0] - pixels[i][0]).powi(2) + (px[1] - pixels[i][1]).powi(2)).sqrt());
    }
    PnpOutcome {
        mask_exact: fit.inliers == planted,
        max_reprojection_px: worst,
        degenerate: fit.degenerate,
    }
}

pub fn random_occupancy(rng: &mut ChaCha8Rng, r: usize, fill: f64) -> Occupancy {
    let mut coords = Vec::new();
    for k in 0..r as u32 {
        for j in 0..r as u32 {
            for i in 0..r as u32 {
                if rng.random::<f64>() < fill {
                    coords.push([i, j, k]);
                }
            }
        }
    }
    Occupancy::new(r, coords).unwrap()
}

/// Zero-padded dense cross-correlation on the full lattice, read back at the
/// occupied sites. Kernel taps are laid out x-fastest, then input channel,
/// then output channel.
pub fn dense_conv(occ: &Occupancy, input: &[f64], k: &ConvKernel) -> Vec<f64> {
    let r = occ.resolution() as i64;
    let (cin, cout, s) = (k.in_channels, k.out_channels, k.size as i64);
    let h = s / 2;
    let mut dense = vec![0.0; (r * r * r) as usize * cin];
    for (slot, c) in occ.coords().iter().enumerate() {
        let l = linear_index(r as usize, *c);
        dense[l * cin..(l + 1) * cin].copy_from_slice(&input[slot * cin..(slot + 1) * cin]);
    }
    let mut out = Vec::new();
    for c in occ.coords() {
        let mut y = k.bias.clone();
        for dz in -h..=h {
            for dy in -h..=h {
                for dx in -h..=h {
                    let (x, yy, z) = (c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz);
                    if x < 0 || yy < 0 || z < 0 || x >= r || yy >= r || z >= r {
                        continue;
                    }
                    let l = (x + r * (yy + r * z)) as usize;
                    let tap = ((dx + h) + s * ((dy + h) + s * (dz + h))) as usize;
                    for ci in 0..cin {
                        for (co, yv) in y.iter_mut().enumerate() {
                            *yv += dense[l * cin + ci] * k.weights[(tap * cin + ci) * cout + co];
                        }
                    }
                }
            }
        }
        out.extend(y);
    }
    out
}

pub fn full_grid(r: usize, channels: usize, f: impl Fn(&Vec3) -> Vec<f64>) -> FeatureGrid {
    let mut coords = Vec::new();
    for k in 0..r as u32 {
        for j in 0..r as u32 {
            for i in 0..r as u32 {
                coords.push([i, j, k]);
            }
        }
    }
    let features = coords.iter().flat_map(|c| f(&lattice_position(r, *c))).collect();
    let n = coords.len();
    FeatureGrid::from_parts(r, channels, coords, vec![1.0; n], features, vec![0.0; n]).unwrap()
}

pub fn random_samples(rng: &mut ChaCha8Rng) -> RaySamples {
    let n = rng.random_range(1..96);
    let ray = Ray {
        origin: Vec3::new(-2.0, rng.random_range(-0.5..0.5), 0.1),
        direction: Vec3::x(),
        t_near: rng.random_range(0.5..1.0),
        t_far: rng.random_range(2.5..3.5),
    };
    let mut s = march(&ray, n, Some(rng)).unwrap();
    // Mix empty space, thin media and near-opaque spikes.
    s.sigmas = (0..n)
        .map(|_| match rng.random_range(0..4) {
            0 => 0.0,
            1 => rng.random_range(0.0..1.0),
            2 => rng.random_range(0.0..20.0),
            _ => rng.random_range(0.0..500.0),
        })
        .collect();
    s
}

pub fn unit(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    normalized(&(0..c).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap()
}

pub fn kp3(rng: &mut ChaCha8Rng, c: usize) -> KeyPoint3D {
    KeyPoint3D {
        position: Vec3::new(rng.random(), rng.random(), rng.random()),
        score: rng.random(),
        descriptor: unit(rng, c),
    }
}

/// All-pairs cosine table, best partner per row and per column.
pub fn brute_force_matches(a: &[KeyPoint3D], b: &[KeyPoint3D], theta: f64, mutual: bool) -> Vec<(usize, usize)> {
    let cos = |i: usize, j: usize| -> f64 { a[i].descriptor.iter().zip(&b[j].descriptor).map(|(x, y)| x * y).sum() };
    let argmax = |n: usize, f: &dyn Fn(usize) -> f64| -> Option<usize> {
        let mut best: Option<usize> = None;
        for k in 0..n {
            if best.is_none_or(|b| f(k) > f(b)) {
                best = Some(k);
            }
        }
        best
    };
    let mut out = Vec::new();
    for i in 0..a.len() {
        let Some(j) = argmax(b.len(), &|j| cos(i, j)) else {
            continue;
        };
        if cos(i, j) < theta {
            continue;
        }
        if mutual && argmax(a.len(), &|k| cos(k, j)) != Some(i) {
            continue;
        }
        out.push((i, j));
    }
    out
}

/// Lattice sites whose unit-spacing opacity reaches `theta`, in z, y, x order.
pub fn pointwise_occupancy(scene: &OracleScene, r: usize, theta: f64) -> Vec<[u32; 3]> {
    let mut out = Vec::new();
    for k in 0..r as u32 {
        for j in 0..r as u32 {
            for i in 0..r as u32 {
                let sigma = scene.sigma(&lattice_position(r, [i, j, k]));
                if 1.0 - (-sigma).exp() >= theta {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

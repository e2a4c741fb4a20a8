mod common;

use common::random_samples;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxdistill::geometry::{pixel_center, ray_for_pixel, SceneBounds, Vec3};
use voxdistill::grid::{axis_directions, sample_grid, FeatureGrid};
use voxdistill::oracle::{generate_scene, CameraRig, SceneSpec};
use voxdistill::render::*;

#[test]
fn weights_and_final_transmittance_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10_000 {
        let s = random_samples(&mut rng);
        let (w, t_end) = render_weights(&s).unwrap();
        let total: f64 = w.iter().sum::<f64>() + t_end;
        assert!((total - 1.0).abs() < 1e-6, "{total}");
        assert!(w.iter().all(|x| *x >= 0.0) && (0.0..=1.0).contains(&t_end));
    }
}

#[test]
fn rendering_is_linear_in_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10_000 {
        let s = random_samples(&mut rng);
        let c = 3;
        let v: Vec<f64> = (0..s.len() * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..s.len() * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let mix: Vec<f64> = v.iter().zip(&u).map(|(x, y)| a * x + b * y).collect();
        let rv = render_quantity(&s, &v, c).unwrap().value;
        let ru = render_quantity(&s, &u, c).unwrap().value;
        let rm = render_quantity(&s, &mix, c).unwrap().value;
        for k in 0..c {
            assert!((rm[k] - (a * rv[k] + b * ru[k])).abs() < 1e-9);
        }
    }
}

#[test]
fn zero_density_samples_change_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10_000 {
        let s = random_samples(&mut rng);
        let v: Vec<f64> = (0..s.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = render_quantity(&s, &v, 1).unwrap();
        let at = rng.random_range(0..=s.len());
        let mut t = s.clone();
        t.ts.insert(at, 0.0);
        t.positions.insert(at, Vec3::zeros());
        t.deltas.insert(at, rng.random_range(0.0..0.2));
        t.sigmas.insert(at, 0.0);
        let mut w = v.clone();
        w.insert(at, rng.random_range(-100.0..100.0));
        let out = render_quantity(&t, &w, 1).unwrap();
        assert!((out.value[0] - base.value[0]).abs() < 1e-9);
        assert!((out.t_end - base.t_end).abs() < 1e-9);
    }
}

/// Compensated summation of optical depth; weights as differences of
/// transmittance. Algebraically equal to the cumulative product.
fn reference_weights(sigmas: &[f64], deltas: &[f64]) -> (Vec<f64>, f64) {
    let (mut depth, mut comp) = (0.0f64, 0.0f64);
    let mut t_prev = 1.0;
    let mut w = Vec::new();
    for (s, d) in sigmas.iter().zip(deltas) {
        let y = s * d - comp;
        let next = depth + y;
        comp = (next - depth) - y;
        depth = next;
        let t = (-depth).exp();
        w.push(t_prev - t);
        t_prev = t;
    }
    (w, t_prev)
}

#[test]
fn weights_match_reference_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..500 {
        let mut s = random_samples(&mut rng);
        s.sigmas.truncate(64.min(s.len()));
        let n = s.sigmas.len();
        s.ts.truncate(n);
        s.positions.truncate(n);
        s.deltas.truncate(n);
        let (w, t) = render_weights(&s).unwrap();
        let (rw, rt) = reference_weights(&s.sigmas, &s.deltas);
        assert!((t - rt).abs() < 1e-9);
        for (a, b) in w.iter().zip(&rw) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}

#[test]
fn feature_map_matches_per_pixel_loop() {
    let spec = SceneSpec {
        min_blobs: 1,
        max_blobs: 1,
        ..Default::default()
    };
    let scene = generate_scene(6, &spec).unwrap();
    let sampled = sample_grid(&scene, 16, &axis_directions(), 0.01).unwrap();
    let mut grid = FeatureGrid::from_sampled(&sampled, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    grid.features.iter_mut().for_each(|f| *f = rng.random_range(-1.0..1.0));
    let cam = CameraRig {
        width: 14,
        height: 12,
        ..CameraRig::default()
    }
    .camera(1.1, 0.3)
    .unwrap();
    let n = 40;
    let map = render_feature_map(&grid, &cam, n, Channel::Features).unwrap();
    let mut hits = 0;
    for row in 0..12 {
        for col in 0..14 {
            let p = row * 14 + col;
            let Some(ray) = ray_for_pixel(&cam, pixel_center(col, row), &SceneBounds::default()).unwrap() else {
                assert!(!map.valid[p]);
                continue;
            };
            let dt = (ray.t_far - ray.t_near) / n as f64;
            let mut trans = 1.0;
            let mut acc = [0.0; 4];
            for i in 0..n {
                let x = ray.at(ray.t_near + (i as f64 + 0.5) * dt);
                let alpha = 1.0 - (-grid.density_at(&x).unwrap() * dt).exp();
                let f = grid.trilerp(&x).unwrap();
                for k in 0..4 {
                    acc[k] += trans * alpha * f[k];
                }
                trans *= 1.0 - alpha;
            }
            assert!((trans - map.t_end[p]).abs() < 1e-9);
            let valid = trans <= MISS_TRANSMITTANCE;
            assert_eq!(valid, map.valid[p]);
            if valid {
                hits += 1;
                for (a, m) in acc.iter().zip(map.image.pixel(p)) {
                    assert!((a - m).abs() < 1e-9);
                }
            }
        }
    }
    assert!(hits > 10, "only {hits} pixels hit the blob");
}

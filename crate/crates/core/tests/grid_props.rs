mod common;

use common::{dense_conv, full_grid, pointwise_occupancy, random_occupancy};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxdistill::geometry::Vec3;
use voxdistill::grid::*;
use voxdistill::oracle::{generate_scene, SceneSpec};

#[test]
fn sparse_conv_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (size, cin, cout) in [(3, 2, 3), (1, 4, 2), (5, 1, 1)] {
        let occ = random_occupancy(&mut rng, 8, 0.35);
        let mut k = ConvKernel::zeros(size, cin, cout).unwrap();
        k.weights.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        k.bias.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
        let input: Vec<f64> = (0..occ.len() * cin).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = sparse_conv3(&occ, &input, &k).unwrap();
        let want = dense_conv(&occ, &input, &k);
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-9, "{g} vs {w}");
        }
    }
}

fn point() -> impl Strategy<Value = Vec3> {
    (-1.0f64..=1.0, -1.0f64..=1.0, -1.0f64..=1.0).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn trilinear_weights_partition_unity(x in point(), r in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(r as u64);
        let occ = random_occupancy(&mut rng, r, 0.5);
        let total: f64 = occ.corners(&x).unwrap().iter().map(|c| c.weight).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trilerp_reproduces_affine_fields(
        x in point(),
        a in prop::array::uniform6(-2.0f64..2.0),
        b in prop::array::uniform2(-1.0f64..1.0),
    ) {
        let f = |v: &Vec3| vec![a[0] * v.x + a[1] * v.y + a[2] * v.z + b[0], a[3] * v.x + a[4] * v.y + a[5] * v.z + b[1]];
        let grid = full_grid(5, 2, f);
        let got = grid.trilerp(&x).unwrap();
        let want = f(&x);
        prop_assert!((got[0] - want[0]).abs() < 1e-9 && (got[1] - want[1]).abs() < 1e-9);
    }

    #[test]
    fn sparsification_is_monotone(seed in 0u64..50, t1 in 0.0f64..0.5, dt in 0.0f64..0.4) {
        let scene = generate_scene(seed, &SceneSpec::default()).unwrap();
        let dirs = axis_directions();
        let lo = sample_grid(&scene, 10, &dirs, t1).unwrap();
        let hi = sample_grid(&scene, 10, &dirs, t1 + dt).unwrap();
        for c in hi.occupancy.coords() {
            prop_assert!(lo.occupancy.slot([c[0] as i64, c[1] as i64, c[2] as i64]).is_some());
        }
    }

    #[test]
    fn adjoint_is_the_transpose_of_trilerp(x in point(), seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = {
            let g = full_grid(4, 3, |_| vec![0.0; 3]);
            let feats: Vec<f64> = (0..g.len() * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let coords = g.occupancy().coords().to_vec();
            let n = coords.len();
            FeatureGrid::from_parts(4, 3, coords, vec![1.0; n], feats, vec![0.0; n]).unwrap()
        };
        let u: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        // <trilerp(g, x), u> is linear in g, so its gradient is the adjoint scatter.
        let lhs: f64 = grid.trilerp(&x).unwrap().iter().zip(&u).map(|(a, b)| a * b).sum();
        let mut grad = vec![0.0; grid.len() * 3];
        grid.trilerp_adjoint_into(&x, &u, &mut grad).unwrap();
        let rhs: f64 = grad.iter().zip(&grid.features).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }
}

#[test]
fn occupancy_matches_pointwise_alpha_on_random_scenes() {
    for seed in 0..5 {
        let scene = generate_scene(seed, &SceneSpec::default()).unwrap();
        let g = sample_grid(&scene, 16, &axis_directions(), 0.01).unwrap();
        let expect = pointwise_occupancy(&scene, 16, 0.01);
        let mut got = g.occupancy.coords().to_vec();
        got.sort_by_key(|c| (c[2], c[1], c[0]));
        assert_eq!(got, expect);
    }
}

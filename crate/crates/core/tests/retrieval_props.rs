mod common;

use common::{brute_force_matches, kp3, unit};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxdistill::geometry::Vec3;
use voxdistill::grid::{lattice_alpha, FeatureGrid};
use voxdistill::image::{FeatureImage, ProbImage};
use voxdistill::retrieval::*;

#[test]
fn matching_equals_brute_force_pairing() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..300 {
        let c = 2 + trial % 5;
        let a: Vec<_> = (0..rng.random_range(0..20)).map(|_| kp3(&mut rng, c)).collect();
        let b: Vec<_> = (0..rng.random_range(0..20)).map(|_| kp3(&mut rng, c)).collect();
        let theta = rng.random_range(-0.5..0.9);
        for mutual in [false, true] {
            let m = match_descriptors(&a, &b, theta, mutual).unwrap();
            let got: Vec<(usize, usize)> = m.pairs.iter().map(|p| (p.0, p.1)).collect();
            assert_eq!(got, brute_force_matches(&a, &b, theta, mutual));
        }
    }
}

/// Repeatedly takes the best remaining candidate that is above the floor
/// and outside every kept candidate's radius.
fn exhaustive_greedy(scores: &[f64], pos: &[Vec<f64>], sel: &Selection) -> Vec<usize> {
    let best = scores.iter().cloned().fold(0.0, f64::max);
    let floor = sel.min_score.max(sel.min_relative_score * best);
    let mut kept: Vec<usize> = Vec::new();
    while kept.len() < sel.k {
        let mut pick: Option<usize> = None;
        for i in 0..scores.len() {
            let eligible = (scores[i] > floor || (scores[i] == best && best > 0.0 && scores[i] > sel.min_score))
                && !kept.contains(&i)
                && kept.iter().all(|&j| {
                    pos[i].iter().zip(&pos[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() > sel.nms_radius.powi(2)
                });
            if eligible && pick.is_none_or(|p| scores[i] > scores[p]) {
                pick = Some(i);
            }
        }
        match pick {
            Some(i) => kept.push(i),
            None => break,
        }
    }
    kept
}

#[test]
fn keypoints2d_equal_exhaustive_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let (w, h) = (rng.random_range(1..12), rng.random_range(1..12));
        let p2d = ProbImage {
            width: w,
            height: h,
            data: (0..w * h).map(|_| (rng.random_range(0..5) as f64) / 5.0).collect(),
        };
        let f2d =
            FeatureImage::from_data(w, h, 3, (0..w * h * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let sel = Selection {
            k: rng.random_range(1..10),
            nms_radius: rng.random_range(0.0..3.0),
            min_score: 0.0,
            min_relative_score: 0.0,
        };
        let kps = select_keypoints2d(&p2d, &f2d, &sel).unwrap();
        let pos: Vec<Vec<f64>> = (0..w * h).map(|p| vec![(p % w) as f64, (p / w) as f64]).collect();
        let want = exhaustive_greedy(&p2d.data, &pos, &sel);
        let got: Vec<[f64; 2]> = kps.iter().map(|k| k.pixel).collect();
        let want: Vec<[f64; 2]> = want
            .iter()
            .map(|&p| voxdistill::geometry::pixel_center(p % w, p / w))
            .collect();
        assert_eq!(got, want);
    }
}

#[test]
fn keypoints3d_equal_exhaustive_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let r = 6;
        let mut coords = Vec::new();
        for k in 0..r as u32 {
            for j in 0..r as u32 {
                for i in 0..r as u32 {
                    if rng.random::<f64>() < 0.4 {
                        coords.push([i, j, k]);
                    }
                }
            }
        }
        let n = coords.len();
        let dens: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let feats: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grid = FeatureGrid::from_parts(r, 2, coords.clone(), dens.clone(), feats, logits.clone()).unwrap();
        let sel = Selection {
            k: 8,
            nms_radius: 1.5,
            min_score: 0.0,
            min_relative_score: 0.0,
        };
        let got: Vec<Vec3> = select_keypoints3d(&grid, &sel).iter().map(|k| k.position).collect();
        let scores: Vec<f64> = (0..n).map(|s| lattice_alpha(dens[s]) * logits[s].max(0.0)).collect();
        let pos: Vec<Vec<f64>> = coords.iter().map(|c| c.iter().map(|&v| v as f64).collect()).collect();
        let want: Vec<Vec3> = exhaustive_greedy(&scores, &pos, &sel)
            .iter()
            .map(|&s| grid.occupancy().position(s))
            .collect();
        assert_eq!(got, want);
    }
}

#[test]
fn rigid_recovery_with_outliers() {
    for seed in 0..5 {
        let o = common::planted_rigid(seed, 0.2);
        assert!(
            o.rotation_error < 1e-3 && o.translation_error < 1e-3,
            "seed {seed}: {} {}",
            o.rotation_error,
            o.translation_error
        );
        assert!(o.orthonormal_error < 1e-9 && (o.det - 1.0).abs() < 1e-9);
    }
}

#[test]
fn pnp_recovery_with_outliers() {
    for seed in 0..5 {
        let o = common::planted_pnp(seed, 0.3);
        assert!(!o.degenerate);
        assert!(o.mask_exact, "seed {seed}: inlier mask differs");
        assert!(o.max_reprojection_px < 0.5, "seed {seed}: {}", o.max_reprojection_px);
    }
}

fn scaled_entry(e: &SceneIndexEntry, s: f64) -> SceneIndexEntry {
    // Raw, unnormalized descriptors; the library normalizes before comparing.
    SceneIndexEntry {
        id: e.id.clone(),
        global: e.global.iter().map(|v| v * s).collect(),
        keypoints: e
            .keypoints
            .iter()
            .map(|k| KeyPoint3D {
                descriptor: k.descriptor.iter().map(|v| v * s).collect(),
                ..k.clone()
            })
            .collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mutual_matching_is_symmetric(seed in 0u64..100_000, theta in -0.5f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<_> = (0..rng.random_range(0..15)).map(|_| kp3(&mut rng, 4)).collect();
        let b: Vec<_> = (0..rng.random_range(0..15)).map(|_| kp3(&mut rng, 4)).collect();
        let ab = match_descriptors(&a, &b, theta, true).unwrap();
        let ba = match_descriptors(&b, &a, theta, true).unwrap();
        let mut t: Vec<(usize, usize)> = ba.pairs.iter().map(|p| (p.1, p.0)).collect();
        t.sort();
        prop_assert_eq!(ab.pairs.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>(), t);
        prop_assert!(ab.pairs.iter().all(|p| (-1.0 - 1e-12..=1.0 + 1e-12).contains(&p.2)));
    }

    #[test]
    fn rankings_ignore_feature_scale(seed in 0u64..10_000, scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 4;
        let index: Vec<SceneIndexEntry> = (0..5)
            .map(|s| SceneIndexEntry {
                id: format!("scene-{s:04}"),
                global: unit(&mut rng, c),
                keypoints: (0..8).map(|_| kp3(&mut rng, c)).collect(),
            })
            .collect();
        let (w, h) = (6, 5);
        let f2d = FeatureImage::from_data(w, h, c, (0..w * h * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let p2d = ProbImage { width: w, height: h, data: (0..w * h).map(|_| rng.random()).collect() };
        let intr = Intrinsics { fx: 8.0, fy: 8.0, cx: 3.0, cy: 2.5, width: w as u32, height: h as u32 };
        let cfg = RetrievalConfig { theta: 0.3, ..Default::default() };
        let mut f2s = f2d.clone();
        f2s.data.iter_mut().for_each(|v| *v *= scale);
        let q = image_query(&f2d, &p2d, None, intr, &cfg.keypoints_2d).unwrap();
        let qs = image_query(&f2s, &p2d, None, intr, &cfg.keypoints_2d).unwrap();
        let scaled: Vec<SceneIndexEntry> = index.iter().map(|e| scaled_entry(e, scale)).collect();
        for mode in [QueryMode::Global, QueryMode::Kp] {
            let a = query_image(&index, &q, mode, &cfg, 1).unwrap();
            let b = query_image(&scaled, &qs, mode, &cfg, 1).unwrap();
            let ids = |r: &QueryResult| r.ranking.iter().map(|x| (x.id.clone(), x.matches)).collect::<Vec<_>>();
            prop_assert_eq!(ids(&a), ids(&b));
        }
        let pairs: Vec<(usize, usize, Option<bool>)> = vec![(0, 1, None), (2, 2, None), (3, 4, None)];
        for mode in [QueryMode::Global, QueryMode::Kp] {
            let a = dup_detect(&index, &pairs, mode, &cfg, 1).unwrap();
            let b = dup_detect(&scaled, &pairs, mode, &cfg, 1).unwrap();
            let v = |r: &DupReport| r.verdicts.iter().map(|x| x.duplicate).collect::<Vec<_>>();
            prop_assert_eq!(v(&a), v(&b));
        }
    }
}

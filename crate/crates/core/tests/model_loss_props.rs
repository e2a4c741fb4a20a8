use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxdistill::image::{FeatureImage, ProbImage};
use voxdistill::losses::*;
use voxdistill::model::*;

fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> FeatureImage {
    FeatureImage::from_data(w, h, c, (0..w * h * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn student_is_per_pixel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = ModelParams::init(6, 12, 0.1, 3).unwrap();
    let img = random_map(&mut rng, 5, 4, 6);
    let mut perm: Vec<usize> = (0..20).collect();
    perm.reverse();
    perm.swap(3, 11);
    let mut shuffled = img.clone();
    for (dst, &src) in perm.iter().enumerate() {
        shuffled.pixel_mut(dst).copy_from_slice(img.pixel(src));
    }
    let a = student2d_forward(&params, &img).unwrap();
    let b = student2d_forward(&params, &shuffled).unwrap();
    for (dst, &src) in perm.iter().enumerate() {
        assert_eq!(b.f2d.pixel(dst), a.f2d.pixel(src));
        assert_eq!(b.fid.pixel(dst), a.fid.pixel(src));
        assert_eq!(b.p2d.data[dst], a.p2d.data[src]);
    }
}

#[test]
fn identity_initialization_is_a_fidelity_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = ModelParams::init(8, 16, 0.0, 0).unwrap();
    let teacher = random_map(&mut rng, 6, 6, 8);
    let maps = student2d_forward(&params, &teacher).unwrap();
    assert_eq!(loss_fid(&maps.fid, &teacher).unwrap().value, 0.0);
    assert!(maps.p2d.data.iter().all(|p| *p > 0.0 && *p < 1.0));
}

#[test]
fn gradient_step_decreases_each_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let a = random_map(&mut rng, 4, 3, 5);
        let b = random_map(&mut rng, 4, 3, 5);
        let mask: Vec<bool> = (0..12).map(|_| rng.random()).collect();
        let pa = ProbImage {
            width: 4,
            height: 3,
            data: (0..12).map(|_| rng.random()).collect(),
        };
        let pb = ProbImage {
            width: 4,
            height: 3,
            data: (0..12).map(|_| rng.random()).collect(),
        };
        let lr = 0.05;
        let check = |value: f64, stepped: f64| assert!(value == 0.0 || stepped < value, "{stepped} !< {value}");

        let t = loss_2d3d(&a, &b, &mask).unwrap();
        let mut a2 = a.clone();
        a2.data.iter_mut().zip(&t.grad_a).for_each(|(x, g)| *x -= lr * g);
        check(t.value, loss_2d3d(&a2, &b, &mask).unwrap().value);

        let t = loss_fid(&a, &b).unwrap();
        let mut a2 = a.clone();
        a2.data.iter_mut().zip(&t.grad_a).for_each(|(x, g)| *x -= lr * g);
        check(t.value, loss_fid(&a2, &b).unwrap().value);

        let t = loss_p(&pa, &pb, &mask).unwrap();
        let mut p2 = pa.clone();
        p2.data.iter_mut().zip(&t.grad_a).for_each(|(x, g)| *x -= lr * g);
        check(t.value, loss_p(&p2, &pb, &mask).unwrap().value);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn losses_are_nonnegative_and_vanish_on_equal_support(
        seed in 0u64..10_000,
        mask in prop::collection::vec(any::<bool>(), 12),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_map(&mut rng, 4, 3, 3);
        let mut b = random_map(&mut rng, 4, 3, 3);
        let t = loss_2d3d(&a, &b, &mask).unwrap();
        prop_assert!(t.value >= 0.0);
        for p in (0..12).filter(|&p| mask[p]) {
            b.pixel_mut(p).copy_from_slice(a.pixel(p));
        }
        prop_assert_eq!(loss_2d3d(&a, &b, &mask).unwrap().value, 0.0);
        prop_assert!(loss_fid(&a, &b).unwrap().value >= 0.0);
    }

    #[test]
    fn masked_out_pixels_do_not_affect_the_loss(
        seed in 0u64..10_000,
        mask in prop::collection::vec(any::<bool>(), 12),
        bump in -5.0f64..5.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_map(&mut rng, 4, 3, 3);
        let b = random_map(&mut rng, 4, 3, 3);
        let base = loss_2d3d(&a, &b, &mask).unwrap();
        let mut a2 = a.clone();
        for p in (0..12).filter(|&p| !mask[p]) {
            a2.pixel_mut(p).iter_mut().for_each(|v| *v += bump);
        }
        let t = loss_2d3d(&a2, &b, &mask).unwrap();
        prop_assert_eq!(t.value, base.value);
        prop_assert_eq!(t.grad_a, base.grad_a);
        let pa = ProbImage { width: 4, height: 3, data: a.data[..12].to_vec() };
        let pb = ProbImage { width: 4, height: 3, data: b.data[..12].to_vec() };
        let mut pa2 = pa.clone();
        for p in (0..12).filter(|&p| !mask[p]) {
            pa2.data[p] += bump;
        }
        prop_assert_eq!(loss_p(&pa2, &pb, &mask).unwrap().value, loss_p(&pa, &pb, &mask).unwrap().value);
    }
}

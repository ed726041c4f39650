use ftmix_core::attack::Bounds;
use ftmix_core::mixup::{derangement, ftm_forward, MixParams};
use ftmix_core::rng::{stream, Stream};
use ftmix_core::tensor::Tensor;
use proptest::prelude::*;

fn tensor(shape: [usize; 4], v: Vec<f32>) -> Tensor<f32> {
    Tensor::from_vec(shape, v).unwrap()
}

proptest! {
    #[test]
    fn projected_steps_stay_in_the_box(
        x in prop::collection::vec(0.0f32..=1.0, 12),
        g in prop::collection::vec(-1.0f32..1.0, 12),
        eps in 0.0f64..0.5,
        eta in 0.0f64..0.2,
        steps in 1usize..20,
    ) {
        let x = tensor([1, 3, 2, 2], x);
        let g = tensor([1, 3, 2, 2], g);
        let b = Bounds::new(&x, eps);
        let mut xa = x.clone();
        for _ in 0..steps {
            xa = b.step(&xa, &g, eta);
            for (&a, &r) in xa.data().iter().zip(x.data()) {
                prop_assert!((a as f64 - r as f64).abs() <= eps);
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }
    }

    #[test]
    fn perturbation_norm_is_bounded(
        z in prop::collection::vec(-10.0f64..10.0, 8),
        d in prop::collection::vec(-10.0f64..10.0, 8),
        beta in 0.0f64..1.0,
    ) {
        let z = Tensor::from_vec([2, 1, 2, 2], z).unwrap();
        let d = Tensor::from_vec([2, 1, 2, 2], d).unwrap();
        let params = MixParams { beta, ..Default::default() };
        let out = ftm_forward(&z, &d, &params);
        for b in 0..2 {
            let nz = z.item(b).iter().map(|v| v * v).sum::<f64>().sqrt();
            let diff = out.item(b).iter().zip(z.item(b)).map(|(o, v)| (o - v) * (o - v)).sum::<f64>().sqrt();
            prop_assert!(diff <= beta * nz * (1.0 + 1e-12));
        }
    }

    #[test]
    fn pairing_is_a_derangement(n in 2usize..64, seed in any::<u64>()) {
        let p = derangement(n, &mut stream(seed, 0, 0, Stream::Shuffle));
        let mut seen = vec![false; n];
        for (i, &j) in p.iter().enumerate() {
            prop_assert!(i != j);
            prop_assert!(!seen[j]);
            seen[j] = true;
        }
    }
}

use emrf_core::config::RunConfig;
use emrf_core::em::e_step;
use emrf_core::io::{decode_checkpoint, decode_ppm, encode_checkpoint, encode_ppm};
use emrf_core::metrics::{mae, mse, psnr, ssim, SsimParams};
use emrf_core::model::ModelConfig;
use emrf_core::nn::softmax;
use emrf_core::params::ParamSet;
use emrf_core::rain::{compose_rainy, procedural_clean, synth_streaks, Image, Role, StreakParams};
use emrf_core::{Result, Tape, Tensor, Var};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| tensor(vec![r, c], -30.0, 30.0))
}

/// Three images of one shape, large enough for the SSIM window.
fn image_triple() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>, Tensor<f64>)> {
    (11usize..16, 11usize..16).prop_flat_map(|(h, w)| {
        let s = vec![3, h, w];
        (
            tensor(s.clone(), 0.0, 1.0),
            tensor(s.clone(), 0.0, 1.0),
            tensor(s, 0.0, 1.0),
        )
    })
}

fn row_sums(t: &Tensor<f64>) -> Vec<f64> {
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(|r| r.iter().sum()).collect()
}

fn losses<'t>(x: &Var<'t, f64>) -> Result<(Var<'t, f64>, Var<'t, f64>)> {
    let l1 = x.square().sum_all().add(&x.sigmoid().mean_all())?;
    let l2 = x.matmul(&x.transpose()?)?.gelu().mean_all().mul(&x.sum_all())?;
    Ok((l1, l2))
}

fn grad_of(x: &Tensor<f64>, pick: impl for<'t> Fn(Var<'t, f64>, Var<'t, f64>) -> Var<'t, f64>) -> Tensor<f64> {
    let tape = Tape::new();
    let v = tape.param("x", x.clone()).unwrap();
    let (l1, l2) = losses(&v).unwrap();
    tape.backward(&pick(l1, l2)).unwrap().get("x").unwrap().clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(x in matrix(6, 9), shift in -50.0f64..50.0) {
        let tape = Tape::inference();
        let v = tape.constant(x);
        let s = softmax(&v, 1).unwrap().value().clone();
        prop_assert!(s.data().iter().all(|&p| p >= 0.0));
        for sum in row_sums(&s) {
            prop_assert!((sum - 1.0).abs() <= 1e-9);
        }
        let shifted = softmax(&v.add_scalar(shift), 1).unwrap();
        prop_assert!(shifted.value().max_abs_diff(&s) <= 1e-12);
    }

    #[test]
    fn e_step_is_row_stochastic(
        (x, mu) in (1usize..12, 1usize..6, 1usize..5)
            .prop_flat_map(|(n, d, k)| (tensor(vec![n, d], -5.0, 5.0), tensor(vec![k, d], -5.0, 5.0))),
        beta in 0.01f64..20.0,
    ) {
        let tape = Tape::inference();
        let z = e_step(&tape.constant(x), &tape.constant(mu), beta).unwrap().value().clone();
        prop_assert!(z.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        for sum in row_sums(&z) {
            prop_assert!((sum - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn backward_is_linear(x in tensor(vec![3, 4], -2.0, 2.0), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let g1 = grad_of(&x, |l1, _| l1);
        let g2 = grad_of(&x, |_, l2| l2);
        let g = grad_of(&x, |l1, l2| l1.scale(a).add(&l2.scale(b)).unwrap());
        for ((&c, &p), &q) in g.data().iter().zip(g1.data()).zip(g2.data()) {
            let expect = a * p + b * q;
            prop_assert!((c - expect).abs() <= 1e-10 * expect.abs().max(1.0), "{c} vs {expect}");
        }
    }

    #[test]
    fn mae_triangle_inequality((a, b, c) in image_triple()) {
        let (ab, bc, ac) = (mae(&a, &b).unwrap(), mae(&b, &c).unwrap(), mae(&a, &c).unwrap());
        prop_assert!(ac <= ab + bc + 1e-15);
    }

    #[test]
    fn ssim_symmetric_and_bounded((a, b, _) in image_triple()) {
        let p = SsimParams::default();
        let ab = ssim(&a, &b, &p).unwrap();
        prop_assert_eq!(ab, ssim(&b, &a, &p).unwrap());
        prop_assert!(ab <= 1.0 + 1e-12);
        prop_assert!((ssim(&a, &a, &p).unwrap() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn psnr_decreases_with_mse((a, b, c) in image_triple()) {
        let (mb, mc) = (mse(&a, &b).unwrap(), mse(&a, &c).unwrap());
        prop_assume!(mb != mc);
        let (pb, pc) = (psnr(&a, &b, 1.0).unwrap(), psnr(&a, &c, 1.0).unwrap());
        prop_assert_eq!(mb < mc, pb > pc);
    }

    #[test]
    fn ppm_round_trip_is_bitwise(
        img in (1usize..9, 1usize..9).prop_flat_map(|(h, w)| {
            prop::collection::vec(any::<u8>(), 3 * h * w).prop_map(move |bytes| {
                let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
                Tensor::new(vec![3, h, w], data).unwrap()
            })
        })
    ) {
        let bytes = encode_ppm(&img).unwrap();
        let back = decode_ppm(&bytes).unwrap();
        prop_assert_eq!(&back, &img);
        prop_assert_eq!(encode_ppm(&back).unwrap(), bytes);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise(
        tensors in prop::collection::vec(
            (1usize..4, 1usize..5).prop_flat_map(|(a, b)| tensor(vec![a, b], -1e6, 1e6)),
            1..6,
        ),
        special in prop::sample::select(vec![0.0, -0.0, f64::MIN_POSITIVE, 1e-310, f64::MAX]),
    ) {
        let mut params = ParamSet::new();
        for (i, mut t) in tensors.into_iter().enumerate() {
            t.data_mut()[0] = special;
            params.insert(format!("layer{i}.w"), t).unwrap();
        }
        let cfg = ModelConfig::desk();
        let bytes = encode_checkpoint(&cfg, &params).unwrap();
        let (cfg2, back) = decode_checkpoint::<f64>(&bytes).unwrap();
        prop_assert_eq!(cfg2, cfg.clone());
        for ((na, a), (nb, b)) in params.iter().zip(back.iter()) {
            prop_assert_eq!(na, nb);
            let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
        prop_assert_eq!(encode_checkpoint(&cfg, &back).unwrap(), bytes);
    }

    #[test]
    fn config_round_trip(
        iterations in 1usize..6,
        num_bases in 1usize..9,
        beta in prop::option::of(0.01f64..10.0),
        lr in 0.0f64..1.0,
        density in 0.0f64..40.0,
        seed in any::<u64>(),
    ) {
        let mut c = RunConfig::desk();
        c.model.em.iterations = iterations;
        c.model.em.num_bases = num_bases;
        c.model.em.beta = beta;
        c.train.learning_rate = lr;
        c.streaks.density = density;
        c.train.seed = seed;
        let s = c.to_json().unwrap();
        let back = RunConfig::from_json(&s).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_json().unwrap(), s);
    }

    #[test]
    fn rain_composition_stays_in_range(seed in any::<u64>(), density in 0.0f64..60.0, intensity in 0.0f64..0.8) {
        let clean = procedural_clean(24, 20, seed).unwrap();
        let p = StreakParams { density, intensity, ..StreakParams::default() }.with_seed(seed);
        let streaks = synth_streaks(24, 20, &p).unwrap();
        let rainy = compose_rainy(&clean, &streaks).unwrap();
        for img in [&clean, &streaks, &rainy] {
            prop_assert!(img.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let none = Image::new(Tensor::zeros(&[3, 24, 20]), Role::Streak).unwrap();
        prop_assert_eq!(compose_rainy(&clean, &none).unwrap().pixels, clean.pixels);
    }
}

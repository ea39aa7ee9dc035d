use gfla::flow_loss::{affine_regularization_loss, sampling_correctness_loss};
use gfla::io;
use gfla::models::{KernelPredictor, KernelPredictorConfig};
use gfla::synth::{self, Affine, Deformation, SceneSpec};
use gfla::tensor::{ParamStore, Tape, Tensor};
use gfla::warp::{self, FlowField};
use proptest::prelude::*;
use std::path::Path;

fn tensor(shape: &'static [usize], lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |v| Tensor::new(shape, v).unwrap())
}

fn affine_flow(a: [[f64; 3]; 2], h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(&[1, 2, h, w], |i| {
        let (c, l) = (i / (h * w), i % (h * w));
        let (x, y) = ((l % w) as f64, (l / w) as f64);
        let p = [x, y];
        a[c][0] * x + a[c][1] * y + a[c][2] - p[c]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_flow_warp_is_bit_identical(x in tensor(&[2, 3, 5, 7], -10.0, 10.0)) {
        let out = warp::warp(&x, &FlowField::zeros(2, 5, 7)).unwrap();
        prop_assert!(out.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn integer_flow_is_a_zero_filled_shift(x in tensor(&[1, 2, 6, 6], -1.0, 1.0), dx in -7i32..8, dy in -7i32..8) {
        let out = warp::warp(&x, &FlowField::constant(1, 6, 6, dx as f64, dy as f64)).unwrap();
        for c in 0..2 {
            for y in 0..6i32 {
                for xx in 0..6i32 {
                    let (sx, sy) = (xx + dx, y + dy);
                    let expect = if (0..6).contains(&sx) && (0..6).contains(&sy) {
                        x.data()[x.idx4(0, c, sy as usize, sx as usize)]
                    } else {
                        0.0
                    };
                    prop_assert_eq!(out.data()[out.idx4(0, c, y as usize, xx as usize)], expect);
                }
            }
        }
    }

    #[test]
    fn fuse_endpoints_are_exact(t in tensor(&[1, 3, 4, 4], -5.0, 5.0), a in tensor(&[1, 3, 4, 4], -5.0, 5.0)) {
        let tape = Tape::new();
        for (m, expect) in [(0.0, &t), (1.0, &a)] {
            let mask = tape.constant(Tensor::full(&[1, 1, 4, 4], m));
            let out = warp::occlusion_fuse(tape.constant(t.clone()), tape.constant(a.clone()), mask).unwrap().value();
            prop_assert_eq!(out.data(), expect.data());
        }
    }

    #[test]
    fn predicted_kernels_sum_to_one(
        s in tensor(&[2, 3, 9, 4, 5], -3.0, 3.0),
        t in tensor(&[2, 3, 9, 4, 5], -3.0, 3.0),
        seed in 0u64..1000,
    ) {
        let kp = KernelPredictor::<f64>::new(KernelPredictorConfig { patch: 3, channels: 3, hidden: 8, seed }).unwrap();
        let tape = Tape::new();
        let b = kp.params.bind_frozen(&tape);
        let k = kp.forward(&b, tape.constant(s), tape.constant(t)).unwrap().value();
        for bi in 0..2 {
            for l in 0..20 {
                let sum: f64 = (0..9).map(|j| k.data()[(bi * 9 + j) * 20 + l]).sum();
                prop_assert!((sum - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn affine_flow_has_no_regularization_residual(
        lin in prop::array::uniform4(-1.5f64..1.5),
        shift in prop::array::uniform2(-4.0f64..4.0),
    ) {
        let a = [[1.0 + lin[0], lin[1], shift[0]], [lin[2], 1.0 + lin[3], shift[1]]];
        // skip near-singular maps, whose patches collapse
        prop_assume!(((1.0 + lin[0]) * (1.0 + lin[3]) - lin[1] * lin[2]).abs() > 0.1);
        let tape = Tape::new();
        let (l, _) = affine_regularization_loss(tape.constant(affine_flow(a, 8, 8)), 3, 1).unwrap();
        prop_assert!(l.value().item() < 1e-8);
    }

    #[test]
    fn aligned_features_give_exp_minus_one(v in tensor(&[1, 4, 5, 5], 0.1, 1.0)) {
        // strictly positive features: every target location is its own best match
        let tape = Tape::new();
        let zero = FlowField::<f64>::zeros(1, 5, 5).into_tensor();
        let (l, rep) = sampling_correctness_loss(
            tape.constant(v.clone()),
            tape.constant(v),
            tape.constant(zero),
            &Default::default(),
        )
        .unwrap();
        prop_assert_eq!(rep.skipped, 0);
        prop_assert!((l.value().item() - (-1.0f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn constant_flow_resize_scales_offsets(dx in -5.0f64..5.0, dy in -5.0f64..5.0, h in 2usize..12, w in 2usize..12) {
        let f = FlowField::constant(1, 8, 8, dx, dy).resize(h, w).unwrap();
        let t = f.tensor();
        for l in 0..h * w {
            prop_assert!((t.data()[l] - dx * w as f64 / 8.0).abs() < 1e-12);
            prop_assert!((t.data()[h * w + l] - dy * h as f64 / 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn flow_file_round_trip_is_bit_exact(v in prop::collection::vec(any::<f32>(), 2 * 3 * 4)) {
        let f = FlowField::new(Tensor::new(&[1, 2, 3, 4], v).unwrap()).unwrap();
        let bytes = io::flow_to_bytes(&f).unwrap();
        let back = io::flow_from_bytes(&bytes, Path::new("mem")).unwrap();
        prop_assert!(back.tensor().data().iter().zip(f.tensor().data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn param_store_round_trip_is_bit_exact(v in prop::collection::vec(-1e6f32..1e6, 12), u in prop::collection::vec(-1.0f32..1.0, 3)) {
        let mut s = ParamStore::<f32>::new();
        s.insert("a.w", Tensor::new(&[3, 4], v).unwrap());
        s.insert_buffer("a.u", Tensor::new(&[3], u).unwrap());
        let back = ParamStore::<f32>::from_bytes(&s.to_bytes(), Path::new("mem")).unwrap();
        prop_assert_eq!(back.to_bytes(), s.to_bytes());
        prop_assert_eq!(back.get("a.w").unwrap().data(), s.get("a.w").unwrap().data());
    }

    #[test]
    fn quantization_inverts_on_bytes(q in any::<u8>()) {
        prop_assert_eq!(io::quantize(io::dequantize(q) as f64), q);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn global_affine_ground_truth_is_locally_affine(seed in any::<u64>()) {
        let spec = SceneSpec { size: 32, deformation: Deformation::global_affine(), ..Default::default() };
        let s = synth::gen_scene(seed, &spec).unwrap();
        let tape = Tape::new();
        let flow = s.flow.tensor().cast::<f64>();
        let (l, rep) = affine_regularization_loss(tape.constant(flow), 3, 1).unwrap();
        // f32 storage of the offsets bounds the residual
        prop_assert!(l.value().item() / (rep.patches as f64) < 1e-10);
    }

    #[test]
    fn translation_scene_warps_back_on_visible_pixels(dx in -4i32..5, dy in -4i32..5, seed in any::<u64>()) {
        let spec = SceneSpec {
            size: 32,
            deformation: Deformation::GlobalAffine { range: Default::default(), fixed: Some(Affine::translation(dx as f64, dy as f64)) },
            ..Default::default()
        };
        let s = synth::gen_scene(seed, &spec).unwrap();
        let warped = warp::warp(&s.source, &s.flow).unwrap();
        let p = synth::psnr(&warped, &s.target, Some(&s.visibility)).unwrap();
        prop_assert!(p > 60.0 || p.is_infinite(), "psnr {p}");
    }
}

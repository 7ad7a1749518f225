mod common;

use proptest::prelude::*;

use common::{naive_conv, normal, zero_insert};
use sacrfp::checkpoint::{Entry, TensorData};
use sacrfp::harness::gen_dataset;
use sacrfp::kernels::{self, conv_output_len, effective_kernel, lerp_scalar};
use sacrfp::sac::SacConv;
use sacrfp::{
    Architecture, Checkpoint, Conv2d, ConvGeometry, DenseModel, FusionModule, Module, ModelSpec, Tape, Tensor,
    Variant,
};

fn cfg() -> ProptestConfig {
    ProptestConfig::with_cases(48)
}

proptest! {
    #![proptest_config(cfg())]

    #[test]
    fn dilated_conv_equals_zero_inserted_kernel(
        seed in any::<u64>(),
        k in prop::sample::select(vec![1usize, 3]),
        r in 1usize..=3,
        stride in 1usize..=2,
        pad_extra in 0usize..=3,
        h in 7usize..12,
        w in 7usize..12,
    ) {
        let x = normal(seed, [2, 3, h, w]);
        let wt = normal(seed ^ 1, [2, 3, k, k]);
        let pad = pad_extra.min(r);
        let dilated = kernels::conv2d(&x, &wt, None, ConvGeometry::new(stride, pad, r)).unwrap();
        let spread = zero_insert(&wt, r);
        let oracle = naive_conv(&x, &spread, stride, pad, 1);
        prop_assert!(dilated.max_abs_diff(&oracle).unwrap() <= 1e-10);
        let dense = kernels::conv2d(&x, &spread, None, ConvGeometry::new(stride, pad, 1)).unwrap();
        prop_assert!(dilated.max_abs_diff(&dense).unwrap() <= 1e-10);
    }

    #[test]
    fn output_size_obeys_effective_kernel_law(
        input in 1usize..40,
        k in 1usize..=5,
        r in 1usize..=4,
        s in 1usize..=3,
        p in 0usize..=6,
    ) {
        let ke = k + (k - 1) * (r - 1);
        prop_assert_eq!(effective_kernel(k, r), ke);
        let expected = (input + 2 * p >= ke).then(|| (input + 2 * p - ke) / s + 1);
        prop_assert_eq!(conv_output_len(input, k, ConvGeometry::new(s, p, r)), expected);
        if let Some(len) = expected {
            let x = Tensor::<f64>::zeros([1, 1, input, ke]);
            let y = kernels::conv2d(&x, &Tensor::zeros([1, 1, k, k]), None, ConvGeometry::new(s, p, r)).unwrap();
            prop_assert_eq!(y.shape().h, len);
        }
    }

    #[test]
    fn lerp_is_convex_and_exact_on_ties(
        s in 0.0f32..=1.0,
        a in -1e4f32..1e4,
        b in -1e4f32..1e4,
    ) {
        let v = lerp_scalar(s, a, b);
        prop_assert!(a.min(b) <= v && v <= a.max(b));
        prop_assert_eq!(lerp_scalar(s, a, a), a);
    }

    #[test]
    fn fusion_stays_between_its_inputs(seed in any::<u64>(), bias in -30.0f32..30.0) {
        let mut rng = sacrfp::init::rng(seed);
        let mut fu = FusionModule::<f32>::random(&mut rng, 4);
        fu.attention.bias.as_mut().unwrap().fill(bias);
        let prev = sacrfp::init::normal::<f32>(&mut rng, [2, 4, 5, 5]).map(|v| v * 100.0);
        let new = sacrfp::init::normal::<f32>(&mut rng, [2, 4, 5, 5]);
        let mut tape = Tape::new();
        let (p, n) = (tape.constant(prev.clone()), tape.constant(new.clone()));
        let out = fu.forward(&mut tape, p, n).unwrap();
        let same = fu.forward(&mut tape, n, n).unwrap();
        for (i, &v) in tape.value(out).data().iter().enumerate() {
            let (a, b) = (prev.data()[i], new.data()[i]);
            prop_assert!(a.min(b) <= v && v <= a.max(b));
        }
        prop_assert_eq!(tape.value(same), &new);
    }

    #[test]
    fn sac_mix_lies_between_branches(
        seed in any::<u64>(),
        s in 0.0f64..=1.0,
        stride in 1usize..=2,
    ) {
        let mut rng = sacrfp::init::rng(seed);
        let plain = Conv2d::<f64>::random(&mut rng, 3, 4, 3, ConvGeometry::new(stride, 1, 1));
        let mut sac = SacConv::from_conv(&plain, 3).unwrap();
        let dw = sacrfp::init::normal::<f64>(&mut rng, sac.delta_weight.value().shape());
        sac.delta_weight.set_data(dw.data()).unwrap();
        let ctx = sacrfp::init::normal::<f64>(&mut rng, sac.pre_context.conv.weight.value().shape());
        sac.pre_context.conv.weight.set_data(ctx.data()).unwrap();
        sac.switch.conv.bias.as_mut().unwrap().fill(s);
        let x = sacrfp::init::normal::<f64>(&mut rng, [2, 3, 9, 8]);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let tr = sac.trace(&mut tape, xv).unwrap();
        let (y1, y2, y) = (tape.value(tr.small), tape.value(tr.large), tape.value(tr.mixed));
        for i in 0..y.len() {
            let (a, b) = (y1.data()[i], y2.data()[i]);
            prop_assert!(a.min(b) <= y.data()[i] && y.data()[i] <= a.max(b));
        }
    }

    #[test]
    fn converted_layer_reproduces_plain_conv(seed in any::<u64>(), stride in 1usize..=2) {
        let mut rng = sacrfp::init::rng(seed);
        let plain = Conv2d::<f64>::random(&mut rng, 4, 5, 3, ConvGeometry::new(stride, 1, 1));
        let sac = SacConv::from_conv(&plain, 3).unwrap();
        let x = sacrfp::init::normal::<f64>(&mut rng, [1, 4, 10, 7]);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let a = plain.forward(&mut tape, xv).unwrap();
        let b = sac.forward(&mut tape, xv).unwrap();
        prop_assert!(tape.value(a).max_abs_diff(tape.value(b)).unwrap() <= 1e-10);
    }

    #[test]
    fn checkpoint_bytes_round_trip(
        tensors in prop::collection::vec(
            (prop::collection::vec(1usize..4, 0..4), any::<bool>(), any::<u64>()),
            0..6,
        ),
    ) {
        let mut ck = Checkpoint::new();
        for (i, (dims, wide, seed)) in tensors.into_iter().enumerate() {
            let len: usize = dims.iter().product();
            let values = normal(seed, [1, 1, 1, len]).into_data();
            let data = if wide {
                TensorData::F64(values)
            } else {
                TensorData::F32(values.iter().map(|&v| v as f32).collect())
            };
            ck.insert(Entry { name: format!("t/{i}/π"), dims, data }).unwrap();
        }
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}

#[test]
fn seeded_construction_is_deterministic() {
    let spec = ModelSpec {
        arch: common::small_arch(2),
        variant: Variant {
            use_sac: true,
            use_rfp: true,
            rfp_steps: 2,
            shared_backbones: false,
        },
    };
    let a = Checkpoint::from_module(&DenseModel::<f32>::new(&spec, 9).unwrap());
    let b = Checkpoint::from_module(&DenseModel::<f32>::new(&spec, 9).unwrap());
    let c = Checkpoint::from_module(&DenseModel::<f32>::new(&spec, 10).unwrap());
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert_ne!(a, c);

    let arch = Architecture::default();
    assert_eq!(gen_dataset(4, 3, 64, &arch).unwrap(), gen_dataset(4, 3, 64, &arch).unwrap());
}

#[test]
fn models_expose_the_same_parameters_through_every_accessor() {
    let spec = ModelSpec {
        arch: common::small_arch(3),
        variant: Variant::BASELINE,
    };
    let m = DenseModel::<f64>::new(&spec, 0).unwrap();
    let names = m.param_names();
    let ck = Checkpoint::from_module(&m);
    assert_eq!(names, ck.names().map(str::to_owned).collect::<Vec<_>>());
}

//! Randomized properties of the numeric building blocks.

use ndarray::Array2;
use proptest::prelude::*;
use qvla_core::gptq::{gptq_quantize, GptqConfig};
use qvla_core::quant::{quantize_value, rtn_quantize};
use qvla_core::rotation::{orthogonality_error, RotationKind, RotationPlan};
use qvla_core::tensor::{decode_container, encode_container, pack_i4, unpack_i4, Tensor, TensorMap};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f32>> {
    prop::collection::vec(-4.0f32..4.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pack_round_trips(values in prop::collection::vec(-7i8..=7, 0..64)) {
        let packed = pack_i4(&values).unwrap();
        prop_assert_eq!(packed.len(), values.len().div_ceil(2));
        prop_assert_eq!(unpack_i4(&packed, values.len()).unwrap(), values);
    }

    #[test]
    fn quantizer_error_is_half_step(z in -10.0f32..10.0, delta in 0.05f32..3.0) {
        let q = quantize_value(z, delta, 7);
        prop_assert!(q.abs() <= 7);
        if z.abs() <= 7.0 * delta {
            prop_assert!((q as f32 * delta - z).abs() <= delta / 2.0 + 1e-5 * delta.max(z.abs()));
        } else {
            prop_assert_eq!(q, 7 * z.signum() as i32);
        }
    }

    #[test]
    fn plans_are_orthogonal_and_exact(
        (x, w) in (matrix(12, 32), matrix(32, 20)),
        kind in prop::sample::select(vec![RotationKind::PermuteOnly, RotationKind::Svd, RotationKind::Hadamard, RotationKind::SvdHadamard]),
        block in prop::sample::select(vec![8usize, 16, 32]),
    ) {
        let plan = RotationPlan::build(w.view(), kind, block).unwrap();
        prop_assert!(orthogonality_error(plan.full_transform().view()) < 1e-5);
        let y = x.dot(&w);
        let yr = plan.apply_to_activation(x.view()).unwrap().dot(&plan.apply_to_weight(w.view()).unwrap());
        let num: f32 = (&y - &yr).iter().map(|v| v * v).sum();
        let den: f32 = y.iter().map(|v| v * v).sum();
        prop_assert!((num / den).sqrt() < 1e-4);
    }

    #[test]
    fn gptq_with_scaled_identity_hessian_is_rtn(w in matrix(24, 6), c in 0.1f64..100.0) {
        let h = Array2::<f64>::eye(24) * c;
        let (gi, gs) = gptq_quantize(w.view(), &h, 7, &GptqConfig::default()).unwrap();
        let (ri, rs) = rtn_quantize(w.view(), 7).unwrap();
        prop_assert_eq!(gi, ri);
        prop_assert_eq!(gs, rs);
    }

    #[test]
    fn single_row_gptq_is_rtn(w in matrix(1, 9), h in 0.01f64..50.0) {
        let h = Array2::from_elem((1, 1), h);
        let (gi, _) = gptq_quantize(w.view(), &h, 7, &GptqConfig::default()).unwrap();
        prop_assert_eq!(gi, rtn_quantize(w.view(), 7).unwrap().0);
    }

    #[test]
    fn containers_round_trip(data in prop::collection::vec(-1e6f32..1e6, 1..40), ints in prop::collection::vec(-7i8..=7, 1..30)) {
        let mut map = TensorMap::new();
        map.insert("a".into(), Tensor::f32("a", vec![data.len()], data.clone()).unwrap());
        map.insert("b".into(), Tensor::packed_i4("b", vec![ints.len()], &ints).unwrap());
        let bytes = encode_container(&map).unwrap();
        prop_assert_eq!(decode_container(&bytes).unwrap(), map);
    }
}

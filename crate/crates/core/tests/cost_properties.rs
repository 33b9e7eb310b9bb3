use convbasis::basisconv::{BasisConvLayer, BasisMode, Decomposition};
use convbasis::costmodel::oracle::{dependency_paths, instrumented_forward};
use convbasis::costmodel::{
    count_backward, count_forward, delta_b, delta_c, forward_accel_threshold, mode_c_condition, param_reduction_threshold,
    params_decomposed, params_full, report, total_accel_threshold_b,
};
use convbasis::nn::conv::ConvSpec;
use convbasis::Tensor;
use proptest::prelude::*;

fn spec_strategy() -> impl Strategy<Value = ConvSpec> {
    (1usize..4, 1usize..7, prop::sample::select(vec![1usize, 2, 3]), 1usize..3, 0usize..2, 0usize..4, 0usize..4).prop_filter_map(
        "valid geometry",
        |(c_in, c_out, k, stride, padding, dh, dw)| ConvSpec::new(c_in, c_out, k, stride, padding, k + dh, k + dw).ok(),
    )
}

fn mode_strategy(c_out: usize) -> impl Strategy<Value = BasisMode> {
    prop_oneof![
        Just(BasisMode::Full),
        (1..=c_out).prop_map(|r| BasisMode::WeightCompose { r }),
        (1..=c_out).prop_map(|r| BasisMode::OutputCompose { r }),
        (0.05f64..1.0, 0.0f64..0.6).prop_map(|(alpha, beta)| BasisMode::RestrictedCompose { alpha, beta }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn closed_forms_match_oracles((spec, mode) in spec_strategy().prop_flat_map(|s| (Just(s), mode_strategy(s.c_out)))) {
        let Ok(layer) = BasisConvLayer::new(spec, mode, 3) else {
            // Fractions that do not resolve are rejected by config.
            let restricted = matches!(mode, BasisMode::RestrictedCompose { .. });
            prop_assert!(restricted);
            return Ok(());
        };
        let d = layer.decomposition();
        let x = Tensor::randn(&[1, spec.c_in, spec.h_in, spec.w_in], 9);
        let (y, macs) = instrumented_forward(&layer, &x).unwrap();
        prop_assert_eq!(macs.total(), count_forward(&spec, d));
        prop_assert_eq!(dependency_paths(&layer), count_backward(&spec, d));
        let reference = layer.forward_plain(&x).or_else(|_| layer.forward_weight_compose(&x))
            .or_else(|_| layer.forward_output_compose(&x)).or_else(|_| layer.forward_restricted(&x)).unwrap();
        prop_assert!(y.max_abs_diff(&reference) < 1e-10);
    }

    #[test]
    fn thresholds_match_integer_sweeps(spec in spec_strategy()) {
        let f = spec.filter_len() as u64;
        let c = spec.c_out as u64;
        let p = spec.out_pixels() as u64;
        for r in 1..=spec.c_out {
            let rr = r as f64;
            prop_assert_eq!(params_decomposed(&spec, r) < params_full(&spec), rr < param_reduction_threshold(&spec));
            let nb = count_forward(&spec, Decomposition::OutputCompose { r });
            prop_assert_eq!(nb < f * p * c, rr < forward_accel_threshold(&spec));
            let total = nb + count_backward(&spec, Decomposition::OutputCompose { r });
            prop_assert_eq!(total < 2 * f * p * c, rr < total_accel_threshold_b(&spec));
            prop_assert_eq!(delta_b(&spec, r), total as i64 - (2 * f * p * c) as i64);
            for pairs in 0..=spec.c_out - r {
                if pairs > 0 && r < 2 {
                    continue;
                }
                let d = Decomposition::Restricted { r, pairs };
                let t = count_forward(&spec, d) + count_backward(&spec, d);
                prop_assert_eq!(delta_c(&spec, r, pairs), t as i64 - (2 * f * p * c) as i64);
                let cond = mode_c_condition(&spec, rr / c as f64, pairs as f64 / c as f64).unwrap();
                prop_assert_eq!(cond.accelerated, t < 2 * f * p * c);
            }
        }
    }

    #[test]
    fn full_report_has_zero_deltas(spec in spec_strategy()) {
        let rep = report(&spec, BasisMode::Full).unwrap();
        prop_assert_eq!(rep.delta_b, 0);
        prop_assert_eq!(rep.delta_c, Some(0));
        prop_assert_eq!(rep.nb_f, rep.n0_f);
    }
}

#[test]
fn worked_forward_threshold_case() {
    let spec = ConvSpec::same(64, 64, 3, 32, 32).unwrap();
    let n0 = count_forward(&spec, Decomposition::Full);
    assert!(count_forward(&spec, Decomposition::OutputCompose { r: 57 }) < n0);
    assert!(count_forward(&spec, Decomposition::OutputCompose { r: 58 }) >= n0);
    assert!((forward_accel_threshold(&spec) - 57.6).abs() < 1e-12);
}

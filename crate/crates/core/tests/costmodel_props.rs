use proptest::prelude::*;
use specdec_lab::arch::{
    body_params, decode_flops_per_token, kv_bytes, prune_spec, weight_bytes, AttentionPolicy, DraftKind, PositionScheme,
    TransformerSpec,
};
use specdec_lab::costmodel::{
    critical_batch_size, critical_context, decode_cost, delta_t, evaluate_point, forward_cost, savings, throughput_multiplier,
    verify_cost, Bound, HardwareSpec, WorkloadPoint,
};

fn spec(n_layer: u64, heads: u64, kv_heads: u64, d_head: u64, ff_mult: u64) -> TransformerSpec {
    TransformerSpec {
        n_layer,
        d_model: heads * d_head,
        n_heads: heads,
        n_kv_heads: kv_heads,
        d_head,
        d_ff: ff_mult * heads * d_head,
        vocab: 1000,
        bytes_per_param: 2,
        attention: AttentionPolicy::Dense,
        positions: PositionScheme::TextAbsolute,
    }
}

fn any_spec() -> impl Strategy<Value = TransformerSpec> {
    (1u64..=16, 1u64..=16, 1u64..=4, 1u64..=8).prop_flat_map(|(n_layer, heads, ff_mult, dh)| {
        let divisors: Vec<u64> = (1..=heads).filter(|d| heads % d == 0).collect();
        prop::sample::select(divisors).prop_map(move |kv| spec(n_layer, heads, kv, dh * 8, ff_mult))
    })
}

/// First batch size in `1..=limit` whose verification is compute-bound.
fn scan(spec: &TransformerSpec, hw: &HardwareSpec, context: u64, k: u64, limit: u64) -> Option<u64> {
    (1..=limit).find(|&b| verify_cost(spec, hw, &WorkloadPoint::new(b, context, k)).bound == Bound::ComputeBound)
}

#[test]
fn critical_batch_matches_brute_force_scan() {
    let limit = 1 << 20;
    let cases = [
        (spec(8, 16, 16, 64, 2), 640.0),
        (spec(8, 12, 12, 64, 4), 300.0),
        (spec(4, 8, 2, 32, 4), 150.0),
        (spec(2, 4, 1, 16, 1), 40.0),
    ];
    for (s, hoi) in cases {
        let hw = HardwareSpec::from_hoi(hoi);
        for context in [1, 2, 7, 16, 31, 32, 33, 64, 100, 1000] {
            let fast = critical_batch_size(&s, &hw, context, 4);
            match fast {
                Some(b) if b <= limit => assert_eq!(Some(b), scan(&s, &hw, context, 4, b.min(limit))),
                Some(_) => assert_eq!(scan(&s, &hw, context, 4, limit), None),
                None => assert_eq!(scan(&s, &hw, context, 4, limit), None),
            }
            if let Some(b) = fast {
                if b > 1 {
                    let below = WorkloadPoint::new(b - 1, context, 4);
                    assert_eq!(verify_cost(&s, &hw, &below).bound, Bound::MemoryBound);
                }
            }
        }
    }
}

#[test]
fn critical_batch_grid_is_monotone_in_context() {
    let s = spec(8, 16, 16, 64, 2);
    let hw = HardwareSpec::from_hoi(640.0);
    let mut prev = 0;
    for context in 1..=64 {
        match critical_batch_size(&s, &hw, context, 4) {
            Some(b) => {
                assert!(b >= prev);
                prev = b;
            }
            None => {
                for later in context..context + 64 {
                    assert_eq!(critical_batch_size(&s, &hw, later, 4), None);
                }
                break;
            }
        }
    }
}

#[test]
fn calibrated_target_reaches_thirty_two() {
    let s = spec(8, 16, 16, 64, 2);
    assert_eq!(critical_context(&s, &HardwareSpec::from_hoi(640.0), 4).unwrap(), 32);
}

#[test]
fn streaming_cost_is_flat_beyond_the_window() {
    let s = spec(8, 16, 16, 64, 2).with_attention(AttentionPolicy::streaming(64, 1));
    let base = kv_bytes(&s, 65, 3);
    for context in [65, 100, 512, 1 << 20] {
        assert_eq!(kv_bytes(&s, context, 3), base);
        assert_eq!(decode_flops_per_token(&s, context), decode_flops_per_token(&s, 65));
    }
    assert!(kv_bytes(&s, 64, 3) < base);
}

proptest! {
    #[test]
    fn kv_is_monotone_and_linear_in_batch(s in any_spec(), context in 1u64..5000, extra in 0u64..5000, batch in 1u64..64) {
        prop_assert!(kv_bytes(&s, context, batch) <= kv_bytes(&s, context + extra, batch));
        prop_assert_eq!(kv_bytes(&s, context, 2 * batch), 2 * kv_bytes(&s, context, batch));
        let st = s.with_attention(AttentionPolicy::streaming(16, 1));
        prop_assert!(kv_bytes(&st, context, batch) <= kv_bytes(&st, context + extra, batch));
        if context >= 17 {
            prop_assert_eq!(kv_bytes(&st, context, batch), kv_bytes(&st, context + extra, batch));
        }
    }

    #[test]
    fn flops_are_affine_in_attended_length(s in any_spec(), a in 1u64..4000, b in 1u64..4000) {
        let slope = 4 * s.n_layer * s.d_model;
        let fa = decode_flops_per_token(&s, a) as i128;
        let fb = decode_flops_per_token(&s, b) as i128;
        prop_assert_eq!(fa - fb, slope as i128 * (a as i128 - b as i128));
        prop_assert_eq!(decode_flops_per_token(&s, 1), 2 * body_params(&s) + slope);
    }

    #[test]
    fn pruning_scales_parameters_exactly(s in any_spec(), frac in 0.0f64..1.0) {
        let m = 1 + ((s.n_layer - 1) as f64 * frac) as u64;
        let d = prune_spec(&s, m).unwrap();
        prop_assert_eq!(body_params(&d) * s.n_layer, body_params(&s) * m);
        prop_assert_eq!(d.d_model, s.d_model);
    }

    #[test]
    fn forward_cost_is_the_larger_term(c in 0.0f64..1e6, bytes in 0.0f64..1e4, kv in 0.0f64..1e4, hoi in 0.1f64..1000.0) {
        let r = forward_cost(c, bytes, kv, &HardwareSpec::from_hoi(hoi));
        let mem = (bytes + kv) * hoi;
        prop_assert_eq!(r.total, c.max(mem));
        prop_assert_eq!(r.bound == Bound::ComputeBound, c > mem);
    }

    #[test]
    fn multiplier_exceeds_one_iff_tau_beats_dt(tau in 1.0f64..6.0, dt in 0.1f64..6.0) {
        let m = throughput_multiplier(tau, dt);
        prop_assert_eq!(m > 1.0, tau > dt);
        prop_assert_eq!(throughput_multiplier(tau, 1.0), tau);
    }

    #[test]
    fn delta_t_ignores_a_common_hardware_scale(
        s in any_spec(), batch in 1u64..256, context in 1u64..4096, k in 1u64..8, hoi in 1.0f64..1000.0, scale in 0.01f64..100.0,
    ) {
        let draft = DraftKind::magicdec(&s, 16, 1).spec;
        let point = WorkloadPoint::new(batch, context, k);
        let hw = HardwareSpec { peak_flops: hoi * 1e12, mem_bandwidth: 1e12 };
        let scaled = HardwareSpec { peak_flops: hw.peak_flops * scale, mem_bandwidth: hw.mem_bandwidth * scale };
        let a = delta_t(&draft, &s, &hw, &point);
        let b = delta_t(&draft, &s, &scaled, &point);
        prop_assert_eq!(decode_cost(&s, &hw, &point).bound, decode_cost(&s, &scaled, &point).bound);
        prop_assert!((a - b).abs() <= 1e-9 * a);
    }

    #[test]
    fn hoi_cancels_when_everything_is_memory_bound(s in any_spec(), context in 1u64..2048, k in 1u64..8) {
        let draft = prune_spec(&s, 1).unwrap();
        let point = WorkloadPoint::new(1, context, k);
        // Small batches on bandwidth-starved hardware keep every pass memory-bound.
        let slow = HardwareSpec::from_hoi(1e6);
        let slower = HardwareSpec::from_hoi(1e7);
        prop_assert_eq!(verify_cost(&s, &slow, &point).bound, Bound::MemoryBound);
        let a = evaluate_point(&draft, &s, &slow, point, 2.0);
        let b = evaluate_point(&draft, &s, &slower, point, 2.0);
        prop_assert!((a.delta_t - b.delta_t).abs() <= 1e-12 * a.delta_t);
    }

    #[test]
    fn doubling_hoi_never_lengthens_the_critical_context(s in any_spec(), hoi in 1.0f64..2000.0) {
        let a = critical_context(&s, &HardwareSpec::from_hoi(hoi), 4).unwrap();
        let b = critical_context(&s, &HardwareSpec::from_hoi(2.0 * hoi), 4).unwrap();
        prop_assert!(b <= a);
    }

    #[test]
    fn savings_is_monotone(m1 in 0.1f64..10.0, m2 in 0.1f64..10.0, budget in 0.0f64..100.0, t1 in 0.0f64..5.0, t2 in 0.0f64..5.0) {
        let (lo, hi) = if m1 <= m2 { (m1, m2) } else { (m2, m1) };
        prop_assert!(savings(lo, budget, t1).unwrap() <= savings(hi, budget, t1).unwrap() + 1e-12);
        let (tl, th) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(savings(m1, budget, th).unwrap() <= savings(m1, budget, tl).unwrap());
        prop_assert_eq!(savings(m1, 0.0, t1).unwrap(), -t1);
    }

    #[test]
    fn weights_do_not_depend_on_attention(s in any_spec()) {
        let st = s.with_attention(AttentionPolicy::streaming(8, 1));
        prop_assert_eq!(weight_bytes(&s), weight_bytes(&st));
    }
}

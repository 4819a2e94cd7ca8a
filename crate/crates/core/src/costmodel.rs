//! Roofline-style throughput model for speculative decoding.
//!
//! A forward pass costs `max(compute, (weight_bytes + kv_bytes) * hoi)`
//! FLOP-equivalents, assuming compute and memory traffic overlap fully.
//! Weights are read once per pass; compute and KV traffic scale with the
//! batch. A round of speculation costs `k` draft decode passes plus one
//! target pass over `k + 1` tokens, and the iteration time multiplier
//! `delta_t` divides that by one autoregressive target step.

use serde::{Deserialize, Serialize};

use crate::arch::{decode_flops_per_token, kv_bytes, weight_bytes, TransformerSpec};
use crate::error::{invalid, Result};

/// Peak arithmetic rate and memory bandwidth of one accelerator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareSpec {
    /// FLOPs per second.
    pub peak_flops: f64,
    /// Bytes per second.
    pub mem_bandwidth: f64,
}

impl HardwareSpec {
    /// Builds a spec whose operational intensity is exactly `hoi`.
    pub fn from_hoi(hoi: f64) -> Self {
        HardwareSpec {
            peak_flops: hoi,
            mem_bandwidth: 1.0,
        }
    }

    /// Hardware operational intensity in FLOPs per byte.
    pub fn hoi(&self) -> f64 {
        self.peak_flops / self.mem_bandwidth
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if !ok(self.peak_flops) || !ok(self.mem_bandwidth) {
            return Err(invalid("peak_flops and mem_bandwidth must be finite and positive"));
        }
        Ok(())
    }
}

/// Batch size, context length and maximum speculation depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadPoint {
    pub batch: u64,
    pub context: u64,
    pub k: u64,
}

impl WorkloadPoint {
    pub fn new(batch: u64, context: u64, k: u64) -> Self {
        WorkloadPoint { batch, context, k }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.context == 0 || self.k == 0 {
            return Err(invalid(format!(
                "batch, context and k must be at least 1 (got {}, {}, {})",
                self.batch, self.context, self.k
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bound {
    ComputeBound,
    MemoryBound,
}

impl Bound {
    pub fn as_str(&self) -> &'static str {
        match self {
            Bound::ComputeBound => "compute",
            Bound::MemoryBound => "memory",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBreakdown {
    pub compute: f64,
    pub memory_bytes: f64,
    pub memory_flop_equiv: f64,
    pub total: f64,
    pub bound: Bound,
}

/// Cost of one forward pass. Ties classify as memory-bound.
pub fn forward_cost(compute: f64, weight_bytes: f64, kv_bytes: f64, hw: &HardwareSpec) -> CostBreakdown {
    let memory_bytes = weight_bytes + kv_bytes;
    let memory_flop_equiv = memory_bytes * hw.hoi();
    let (total, bound) = if compute > memory_flop_equiv {
        (compute, Bound::ComputeBound)
    } else {
        (memory_flop_equiv, Bound::MemoryBound)
    };
    CostBreakdown {
        compute,
        memory_bytes,
        memory_flop_equiv,
        total,
        bound,
    }
}

fn pass_cost(spec: &TransformerSpec, hw: &HardwareSpec, point: &WorkloadPoint, tokens: u64) -> CostBreakdown {
    let flops = decode_flops_per_token(spec, point.context) as u128
        * point.batch as u128
        * tokens as u128;
    forward_cost(
        flops as f64,
        weight_bytes(spec) as f64,
        kv_bytes(spec, point.context, point.batch) as f64,
        hw,
    )
}

/// One autoregressive step for every sequence in the batch.
pub fn decode_cost(spec: &TransformerSpec, hw: &HardwareSpec, point: &WorkloadPoint) -> CostBreakdown {
    pass_cost(spec, hw, point, 1)
}

/// Verification of `k + 1` tokens per sequence in one pass.
pub fn verify_cost(spec: &TransformerSpec, hw: &HardwareSpec, point: &WorkloadPoint) -> CostBreakdown {
    pass_cost(spec, hw, point, point.k + 1)
}

/// Iteration time multiplier: `(k * t_draft + t_verify) / t_target`.
pub fn delta_t(
    draft: &TransformerSpec,
    target: &TransformerSpec,
    hw: &HardwareSpec,
    point: &WorkloadPoint,
) -> f64 {
    let draft_cost = decode_cost(draft, hw, point).total;
    let verify = verify_cost(target, hw, point).total;
    let target_cost = decode_cost(target, hw, point).total;
    (point.k as f64 * draft_cost + verify) / target_cost
}

pub fn throughput_multiplier(tau: f64, dt: f64) -> f64 {
    tau / dt
}

/// Everything reported for one grid cell of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointEvaluation {
    pub point: WorkloadPoint,
    pub tau: f64,
    pub delta_t: f64,
    pub multiplier: f64,
    pub bound_draft: Bound,
    pub bound_verify: Bound,
}

pub fn evaluate_point(
    draft: &TransformerSpec,
    target: &TransformerSpec,
    hw: &HardwareSpec,
    point: WorkloadPoint,
    tau: f64,
) -> PointEvaluation {
    let dt = delta_t(draft, target, hw, &point);
    PointEvaluation {
        point,
        tau,
        delta_t: dt,
        multiplier: throughput_multiplier(tau, dt),
        bound_draft: decode_cost(draft, hw, &point).bound,
        bound_verify: verify_cost(target, hw, &point).bound,
    }
}

/// Smallest batch size at which verification is compute-bound, or `None`
/// when the per-sequence KV traffic outweighs the per-sequence compute so
/// that no batch size gets there.
pub fn critical_batch_size(spec: &TransformerSpec, hw: &HardwareSpec, context: u64, k: u64) -> Option<u64> {
    let per_seq_compute = ((k + 1) as u128 * decode_flops_per_token(spec, context) as u128) as f64;
    let per_seq_memory = kv_bytes(spec, context, 1) as f64 * hw.hoi();
    let slack = per_seq_compute - per_seq_memory;
    if slack <= 0.0 {
        return None;
    }
    let weights = weight_bytes(spec) as f64 * hw.hoi();
    let estimate = (weights / slack).floor() + 1.0;
    if !estimate.is_finite() || estimate >= u64::MAX as f64 {
        return None;
    }
    let is_compute_bound = |batch: u64| {
        verify_cost(spec, hw, &WorkloadPoint::new(batch, context, k)).bound == Bound::ComputeBound
    };
    // Snap the floating-point estimate onto the exact predicate.
    let mut batch = (estimate as u64).max(1);
    while batch > 1 && is_compute_bound(batch - 1) {
        batch -= 1;
    }
    while !is_compute_bound(batch) {
        batch = batch.checked_add(1)?;
    }
    Some(batch)
}

/// Upper end of the context-length search in [`critical_context`].
pub const CONTEXT_SEARCH_LIMIT: u64 = 1 << 40;

/// Longest context for which verification is compute-bound at some batch
/// size. Returns 0 when there is none and [`CONTEXT_SEARCH_LIMIT`] when
/// every context up to the limit qualifies. The verifier must be dense.
pub fn critical_context(spec: &TransformerSpec, hw: &HardwareSpec, k: u64) -> Result<u64> {
    if !spec.attention.is_dense() {
        return Err(invalid("verification always uses dense target attention"));
    }
    let exists = |context: u64| critical_batch_size(spec, hw, context, k).is_some();
    if !exists(1) {
        return Ok(0);
    }
    let mut good = 1u64;
    let mut bad = None;
    while good < CONTEXT_SEARCH_LIMIT {
        let next = good * 2;
        if exists(next) {
            good = next;
        } else {
            bad = Some(next);
            break;
        }
    }
    let Some(mut bad) = bad else {
        return Ok(CONTEXT_SEARCH_LIMIT);
    };
    while bad - good > 1 {
        let mid = good + (bad - good) / 2;
        if exists(mid) {
            good = mid;
        } else {
            bad = mid;
        }
    }
    Ok(good)
}

/// Net compute saved by speculating: `budget * (1 - 1/multiplier) - train_cost`.
pub fn savings(multiplier: f64, decode_budget: f64, train_cost: f64) -> Result<f64> {
    if !(multiplier > 0.0) {
        return Err(invalid(format!("multiplier must be positive, got {multiplier}")));
    }
    if decode_budget < 0.0 || train_cost < 0.0 {
        return Err(invalid("budget and training cost must be nonnegative"));
    }
    Ok(decode_budget * (1.0 - 1.0 / multiplier) - train_cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{body_params, AttentionPolicy, PositionScheme};

    fn spec(n_layer: u64, d: u64) -> TransformerSpec {
        TransformerSpec {
            n_layer,
            d_model: d,
            n_heads: 1,
            n_kv_heads: 1,
            d_head: d,
            d_ff: 4 * d,
            vocab: 16,
            bytes_per_param: 2,
            attention: AttentionPolicy::Dense,
            positions: PositionScheme::TextAbsolute,
        }
    }

    #[test]
    fn forward_cost_examples() {
        let hw = HardwareSpec::from_hoi(5.0);
        let c = forward_cost(100.0, 10.0, 0.0, &hw);
        assert_eq!((c.total, c.bound), (100.0, Bound::ComputeBound));
        let c = forward_cost(100.0, 30.0, 20.0, &hw);
        assert_eq!((c.total, c.bound), (250.0, Bound::MemoryBound));
        assert_eq!(c.memory_bytes, 50.0);
        let c = forward_cost(250.0, 50.0, 0.0, &hw);
        assert_eq!((c.total, c.bound), (250.0, Bound::MemoryBound));
    }

    #[test]
    fn verify_is_k_plus_one_decodes() {
        let s = spec(2, 16);
        let hw = HardwareSpec::from_hoi(1.0);
        let p = WorkloadPoint::new(3, 40, 4);
        let d = decode_cost(&s, &hw, &p);
        let v = verify_cost(&s, &hw, &p);
        assert_eq!(v.compute, 5.0 * d.compute);
        assert_eq!(v.memory_bytes, d.memory_bytes);
    }

    #[test]
    fn delta_t_memory_bound_quarter_draft() {
        // Zero-width attention contribution: context 1, huge hoi.
        let t = spec(8, 64);
        let d = spec(2, 64);
        let hw = HardwareSpec::from_hoi(1e9);
        let p = WorkloadPoint::new(1, 1, 4);
        let dt = delta_t(&d, &t, &hw, &p);
        let kv_t = kv_bytes(&t, 1, 1) as f64;
        let n_t = weight_bytes(&t) as f64;
        assert!((dt - 2.0).abs() < 1e-12 * (1.0 + kv_t / n_t));
    }

    #[test]
    fn self_drafting_k1() {
        let t = spec(4, 32);
        let hw = HardwareSpec::from_hoi(1e6);
        let dt = delta_t(&t, &t, &hw, &WorkloadPoint::new(8, 128, 1));
        assert_eq!(dt, 2.0);
    }

    #[test]
    fn ablation_constancy() {
        let t = spec(8, 64);
        let d = spec(2, 64);
        let hw = HardwareSpec::from_hoi(1e6);
        for e in 6..=20 {
            let p = WorkloadPoint::new(4, 1 << e, 4);
            assert_eq!(delta_t(&d, &t, &hw, &p), 2.0);
        }
    }

    #[test]
    fn multiplier_examples() {
        assert_eq!(throughput_multiplier(3.0, 1.5), 2.0);
        assert_eq!(throughput_multiplier(1.0, 1.0), 1.0);
    }

    #[test]
    fn critical_batch_examples() {
        let s = spec(2, 16);
        // kv-free, tiny weights: compute wins at once.
        let hw = HardwareSpec::from_hoi(1e-9);
        assert_eq!(critical_batch_size(&s, &hw, 8, 4), Some(1));
        // Very long context with high hoi: never compute bound.
        let hw = HardwareSpec::from_hoi(1000.0);
        assert_eq!(critical_batch_size(&s, &hw, 1 << 20, 4), None);
        // Small weights but B = 1 with huge weights is memory bound.
        let p = WorkloadPoint::new(1, 16, 4);
        assert_eq!(verify_cost(&s, &hw, &p).bound, Bound::MemoryBound);
    }

    #[test]
    fn critical_batch_matches_closed_form_condition() {
        let s = spec(4, 64);
        let hw = HardwareSpec::from_hoi(40.0);
        for context in [1u64, 4, 16, 64, 256, 1024, 4096] {
            let c = 5.0 * decode_flops_per_token(&s, context) as f64;
            let m = kv_bytes(&s, context, 1) as f64 * hw.hoi();
            assert_eq!(critical_batch_size(&s, &hw, context, 4).is_some(), c > m, "L={context}");
        }
    }

    #[test]
    fn critical_context_rejects_streaming_verifier() {
        let s = spec(2, 16).with_attention(AttentionPolicy::streaming(4, 1));
        assert!(critical_context(&s, &HardwareSpec::from_hoi(10.0), 4).is_err());
    }

    #[test]
    fn critical_context_unbounded_and_none() {
        let s = spec(2, 16);
        // hoi below (k+1): compute always dominates KV growth.
        assert_eq!(
            critical_context(&s, &HardwareSpec::from_hoi(1.0), 4).unwrap(),
            CONTEXT_SEARCH_LIMIT
        );
        // Absurd hoi with heavy KV: nothing is compute bound.
        let mut heavy = s;
        heavy.bytes_per_param = 1 << 20;
        assert_eq!(critical_context(&heavy, &HardwareSpec::from_hoi(1e12), 4).unwrap(), 0);
    }

    #[test]
    fn critical_context_closed_form() {
        // 8 layers, width 1024, d_ff 2048: L_crit = largest L < 20480 / (hoi - 5).
        let t = TransformerSpec {
            n_layer: 8,
            d_model: 1024,
            n_heads: 16,
            n_kv_heads: 16,
            d_head: 64,
            d_ff: 2048,
            vocab: 50257,
            bytes_per_param: 2,
            attention: AttentionPolicy::Dense,
            positions: PositionScheme::TextAbsolute,
        };
        assert_eq!(body_params(&t), 67_108_864);
        assert_eq!(critical_context(&t, &HardwareSpec::from_hoi(640.0), 4).unwrap(), 32);
        assert_eq!(critical_context(&t, &HardwareSpec::from_hoi(85.0), 4).unwrap(), 255);
    }

    #[test]
    fn savings_examples() {
        let s = savings(2.78, 10.0, 0.25).unwrap();
        assert!((s - 6.152877697841727).abs() < 1e-12);
        assert_eq!(format!("{s:.2}"), "6.15");
        assert_eq!(format!("{:.2}", savings(2.05, 10.0, 0.0).unwrap()), "5.12");
        assert_eq!(savings(1.0, 10.0, 0.0).unwrap(), 0.0);
        assert_eq!(savings(2.0, 0.0, 0.25).unwrap(), -0.25);
        assert!(savings(0.0, 10.0, 0.0).is_err());
        assert!(savings(-1.0, 10.0, 0.0).is_err());
    }
}

//! Analytic latency/throughput model for pipelined multi-slice inference on
//! tile-resident weights versus sequential execution.
//!
//! The pipeline is synchronous: one stage per layer, globally clocked at the
//! slowest stage. Tiles within a layer operate in parallel on the broadcast
//! input, so a layer's time is driven by its reuse factor, not its tile
//! count. Skip connections are forwarded through buffers at zero modeled
//! cost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapping::NetworkReport;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingModel {
    /// Seconds per tile matrix-vector multiply.
    pub t_mvm: f64,
    /// Digital periphery seconds per layer invocation.
    pub t_overhead_layer: f64,
}

impl Default for TimingModel {
    fn default() -> Self {
        TimingModel { t_mvm: 100e-9, t_overhead_layer: 1e-6 }
    }
}

impl TimingModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_mvm > 0.0) || !(self.t_overhead_layer > 0.0) {
            return Err(Error::config("timing model requires positive times"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub stage_times: Vec<f64>,
    pub k: usize,
    pub latency_pipelined: f64,
    pub latency_sequential: f64,
    pub throughput_pipelined: f64,
    pub throughput_sequential: f64,
    pub speedup: f64,
}

/// Per-layer stage time: reuse_factor · t_mvm + per-layer overhead.
pub fn stage_times(report: &NetworkReport, tm: &TimingModel) -> Vec<f64> {
    report
        .layers
        .iter()
        .map(|l| l.reuse as f64 * tm.t_mvm + tm.t_overhead_layer)
        .collect()
}

/// Latency of K slices through a synchronous pipeline: (L + K − 1) · t_max.
pub fn pipelined_latency(stage_times: &[f64], k: usize) -> Result<f64> {
    check_stages(stage_times, k)?;
    let t_max = stage_times.iter().cloned().fold(0.0f64, f64::max);
    Ok((stage_times.len() + k - 1) as f64 * t_max)
}

/// Latency of K slices executed back to back: K · Σ stage_times.
pub fn sequential_latency(stage_times: &[f64], k: usize) -> Result<f64> {
    check_stages(stage_times, k)?;
    Ok(k as f64 * stage_times.iter().sum::<f64>())
}

fn check_stages(stage_times: &[f64], k: usize) -> Result<()> {
    if k < 1 {
        return Err(Error::config("slice count K must be >= 1"));
    }
    if stage_times.is_empty() {
        return Err(Error::config("pipeline needs at least one stage"));
    }
    if stage_times.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::config("stage times must be positive"));
    }
    Ok(())
}

/// Full comparison of pipelined versus sequential execution of K slices.
pub fn pipeline_report(stage_times: &[f64], k: usize) -> Result<PipelineReport> {
    let latency_pipelined = pipelined_latency(stage_times, k)?;
    let latency_sequential = sequential_latency(stage_times, k)?;
    Ok(PipelineReport {
        stage_times: stage_times.to_vec(),
        k,
        latency_pipelined,
        latency_sequential,
        throughput_pipelined: k as f64 / latency_pipelined,
        throughput_sequential: k as f64 / latency_sequential,
        speedup: latency_sequential / latency_pipelined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    const US: f64 = 1e-6;

    #[test]
    fn worked_example_three_stages_four_slices() {
        let st = [2.0 * US, 5.0 * US, 3.0 * US];
        assert_eq!(pipelined_latency(&st, 4).unwrap(), 30.0 * US);
        assert_eq!(sequential_latency(&st, 4).unwrap(), 40.0 * US);
    }

    #[test]
    fn single_slice_is_fill_time() {
        let st = [2.0 * US, 5.0 * US, 3.0 * US];
        assert_eq!(pipelined_latency(&st, 1).unwrap(), 15.0 * US);
        assert_eq!(sequential_latency(&st, 1).unwrap(), 10.0 * US);
    }

    #[test]
    fn single_stage_degenerates_to_sequential() {
        for k in [1usize, 2, 7, 100] {
            let p = pipelined_latency(&[3.0 * US], k).unwrap();
            let s = sequential_latency(&[3.0 * US], k).unwrap();
            assert_eq!(p, s);
            assert_eq!(p, k as f64 * (3.0 * US));
        }
    }

    /// Smallest K >= L for which K·Σ >= (L+K−1)·t_max, i.e. pipelining pays
    /// off. Fill/drain overhead can make a short, highly skewed pipeline
    /// slower than sequential, so "K >= L" alone does not guarantee it.
    fn break_even_k(st: &[f64]) -> usize {
        let l = st.len();
        let sum: f64 = st.iter().sum();
        let t_max = st.iter().cloned().fold(0.0f64, f64::max);
        let slack = sum - t_max;
        if slack <= 0.0 {
            return l; // single stage: always break-even
        }
        let k = (((l as f64 - 1.0) * t_max) / slack).ceil() as usize;
        k.max(l)
    }

    #[test]
    fn speedup_at_least_one_past_break_even() {
        let mut rng = crate::rng::stream(31337, "pipeline-prop", 0);
        for _ in 0..1000 {
            let l = rng.gen_range(1..=12usize);
            let st: Vec<f64> = (0..l).map(|_| rng.gen_range(0.1..10.0) * US).collect();
            let k = break_even_k(&st) + rng.gen_range(0..50usize);
            let r = pipeline_report(&st, k).unwrap();
            assert!(r.speedup >= 1.0, "stages {st:?} k {k} speedup {}", r.speedup);
            assert!(r.latency_pipelined <= r.latency_sequential + 1e-18);
        }
    }

    /// speedup >= 1 exactly when L·t_max <= Σ + (K−1)·(Σ − t_max), for any
    /// K >= L; both directions of the equivalence hold.
    #[test]
    fn speedup_matches_exact_break_even_condition() {
        let mut rng = crate::rng::stream(424242, "pipeline-cond", 0);
        let (mut payoff, mut loss) = (0usize, 0usize);
        for _ in 0..1000 {
            let l = rng.gen_range(2..=12usize);
            let st: Vec<f64> = (0..l).map(|_| rng.gen_range(0.1..10.0) * US).collect();
            let k = rng.gen_range(l..l + 50);
            let sum: f64 = st.iter().sum();
            let t_max = st.iter().cloned().fold(0.0f64, f64::max);
            let cond = l as f64 * t_max <= sum + (k as f64 - 1.0) * (sum - t_max);
            let r = pipeline_report(&st, k).unwrap();
            assert_eq!(r.speedup >= 1.0, cond, "stages {st:?} k {k}");
            if cond {
                payoff += 1;
            } else {
                loss += 1;
            }
        }
        // The sample must exercise both sides of the condition.
        assert!(payoff > 0 && loss > 0, "payoff {payoff} loss {loss}");
    }

    #[test]
    fn throughput_approaches_inverse_max_stage() {
        let st = [2.0 * US, 5.0 * US, 3.0 * US];
        let r = pipeline_report(&st, 10_000).unwrap();
        let limit = 1.0 / (5.0 * US);
        assert!((r.throughput_pipelined - limit).abs() / limit < 0.01);
    }

    #[test]
    fn asymptotic_speedup_is_sum_over_max() {
        let st = [2.0 * US, 5.0 * US, 3.0 * US];
        let r = pipeline_report(&st, 1_000_000).unwrap();
        assert!((r.speedup - 2.0).abs() < 1e-3);
    }

    #[test]
    fn latencies_scale_linearly_with_stage_times() {
        let st = [2.0 * US, 5.0 * US, 3.0 * US];
        let scaled: Vec<f64> = st.iter().map(|t| t * 7.5).collect();
        for k in [1usize, 4, 33] {
            assert_eq!(
                pipelined_latency(&scaled, k).unwrap(),
                7.5 * pipelined_latency(&st, k).unwrap()
            );
            assert_eq!(
                sequential_latency(&scaled, k).unwrap(),
                7.5 * sequential_latency(&st, k).unwrap()
            );
        }
    }

    #[test]
    fn stage_times_from_report() {
        use crate::analog::TileGeometry;
        use crate::mapping::{aggregate_report, map_layer, InputShape, LayerSpec};
        let tm = TimingModel::default();
        let m = map_layer(
            "c",
            LayerSpec::Conv2d { in_ch: 3, out_ch: 8, kh: 3, kw: 3, stride: 1, pad: 1, has_bias: true },
            TileGeometry::default(),
            InputShape::Image { c: 3, h: 64, w: 64 },
        )
        .unwrap();
        let report = aggregate_report(vec![m], 0);
        let st = stage_times(&report, &tm);
        assert_eq!(st.len(), 1);
        // reuse = 64*64 output positions
        assert!((st[0] - (4096.0 * 100e-9 + 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn invalid_inputs_are_config_errors() {
        assert!(pipelined_latency(&[], 4).is_err());
        assert!(pipelined_latency(&[1.0], 0).is_err());
        assert!(sequential_latency(&[-1.0], 2).is_err());
        assert!(TimingModel { t_mvm: 0.0, ..TimingModel::default() }.validate().is_err());
    }
}

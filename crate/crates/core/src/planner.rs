//! Parametric GPU memory and step-time model over the training-configuration
//! space (precision, micro-batch, activation checkpointing, sharding,
//! gradient syncing, paged optimizer): feasibility prediction and ranking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareSpec {
    pub gpu_count: usize,
    pub per_gpu_memory: f64,
    /// Relative communication penalty applied to synced accumulation and
    /// full resharding when more than one device is involved.
    pub interconnect_penalty: f64,
}

impl HardwareSpec {
    pub fn a100(gpu_count: usize) -> Self {
        HardwareSpec {
            gpu_count,
            per_gpu_memory: 80e9,
            interconnect_penalty: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gpu_count == 0 || self.per_gpu_memory <= 0.0 {
            return Err(Error::Planner("need at least one device with memory".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    Pure,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sharding {
    /// Shard weights, gradients, optimizer states, and master copy.
    Full,
    /// Shard gradients and optimizer state (and master copy) only.
    GradOp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccumSync {
    Sync,
    /// Skip gradient synchronization during accumulation; gradients stay
    /// unsharded for that period.
    NoSync,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub param_count: f64,
    pub n_layers: usize,
    pub d_model: usize,
    pub context_length: usize,
}

impl ModelShape {
    /// The 7B-parameter shape the configuration benchmark is built around.
    pub fn benchmark_7b() -> Self {
        ModelShape {
            param_count: 7e9,
            n_layers: 32,
            d_model: 4096,
            context_length: 4096,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfigPoint {
    pub precision: Precision,
    pub micro_batch: u32,
    pub act_ckpt: bool,
    pub sharding: Sharding,
    pub accum_sync: AccumSync,
    pub paged_optimizer: bool,
    pub model: ModelShape,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub weights: f64,
    pub master: f64,
    pub optimizer_states: f64,
    pub gradients: f64,
    pub activations: f64,
    pub transient_peak: f64,
    pub total: f64,
    pub feasible: bool,
}

/// Calibration knobs. Byte coefficients are per parameter; time ratios are
/// relative step-time penalties fitted to the configuration benchmark's
/// orderings, not measured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerCoefficients {
    pub grad_bytes: f64,
    pub c_act: f64,
    pub c_ckpt: f64,
    pub r_micro: f64,
    pub r_ckpt: f64,
    pub r_paged: f64,
    pub r_master: f64,
}

impl Default for PlannerCoefficients {
    fn default() -> Self {
        PlannerCoefficients {
            grad_bytes: 2.0,
            c_act: 24.0,
            c_ckpt: 5.0,
            r_micro: 0.3,
            r_ckpt: 0.35,
            r_paged: 0.05,
            r_master: 0.10,
        }
    }
}

pub fn memory_estimate_with(
    cfg: &RunConfigPoint,
    hw: &HardwareSpec,
    coef: &PlannerCoefficients,
) -> MemoryBreakdown {
    let p = cfg.model.param_count;
    let n = hw.gpu_count as f64;
    let mixed = cfg.precision == Precision::Mixed;
    let weight_shard = match cfg.sharding {
        Sharding::Full => n,
        Sharding::GradOp => 1.0,
    };
    let weights = 2.0 * p / weight_shard;
    let master = if mixed { 4.0 * p / n } else { 0.0 };
    let optimizer_states = if mixed { 8.0 * p } else { 4.0 * p } / n;
    let grads_unsharded = cfg.accum_sync == AccumSync::NoSync && hw.gpu_count > 1;
    let gradients = coef.grad_bytes * p / if grads_unsharded { 1.0 } else { n };
    let transient_peak = if cfg.paged_optimizer {
        0.0
    } else {
        (if mixed { 4.0 * p } else { 2.0 * p }) / n
    };
    let c = if cfg.act_ckpt { coef.c_ckpt } else { coef.c_act };
    let activations = cfg.micro_batch as f64
        * cfg.model.context_length as f64
        * cfg.model.d_model as f64
        * cfg.model.n_layers as f64
        * c
        * 2.0;
    let total = weights + master + optimizer_states + gradients + activations + transient_peak;
    MemoryBreakdown {
        weights,
        master,
        optimizer_states,
        gradients,
        activations,
        transient_peak,
        total,
        feasible: total <= hw.per_gpu_memory,
    }
}

pub fn memory_estimate(cfg: &RunConfigPoint, hw: &HardwareSpec) -> MemoryBreakdown {
    memory_estimate_with(cfg, hw, &PlannerCoefficients::default())
}

/// Relative step time, for ranking only. Errors on infeasible points.
pub fn time_estimate_with(
    cfg: &RunConfigPoint,
    hw: &HardwareSpec,
    coef: &PlannerCoefficients,
) -> Result<f64> {
    if !memory_estimate_with(cfg, hw, coef).feasible {
        return Err(Error::Planner("configuration does not fit in memory".into()));
    }
    let multi = hw.gpu_count > 1;
    let mut t = 1.0 + coef.r_micro / cfg.micro_batch as f64;
    if cfg.act_ckpt {
        t *= 1.0 + coef.r_ckpt;
    }
    if multi && cfg.accum_sync == AccumSync::Sync {
        t *= 1.0 + hw.interconnect_penalty;
    }
    if cfg.paged_optimizer {
        t *= 1.0 + coef.r_paged;
    }
    if multi && cfg.sharding == Sharding::Full {
        t *= 1.0 + hw.interconnect_penalty;
    }
    if cfg.precision == Precision::Mixed {
        t *= 1.0 + coef.r_master;
    }
    Ok(t)
}

pub fn time_estimate(cfg: &RunConfigPoint, hw: &HardwareSpec) -> Result<f64> {
    time_estimate_with(cfg, hw, &PlannerCoefficients::default())
}

/// The full configuration space for one precision and model shape, in
/// deterministic tuple order.
pub fn enumerate_space(precision: Precision, model: ModelShape) -> Vec<RunConfigPoint> {
    let mut out = Vec::with_capacity(64);
    for &micro_batch in &[1u32, 2, 4, 8] {
        for &act_ckpt in &[false, true] {
            for &sharding in &[Sharding::Full, Sharding::GradOp] {
                for &accum_sync in &[AccumSync::Sync, AccumSync::NoSync] {
                    for &paged_optimizer in &[false, true] {
                        out.push(RunConfigPoint {
                            precision,
                            micro_batch,
                            act_ckpt,
                            sharding,
                            accum_sync,
                            paged_optimizer,
                            model,
                        });
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedConfig {
    pub config: RunConfigPoint,
    pub memory: MemoryBreakdown,
    pub relative_time: f64,
}

/// True when `a` needs at most as much memory as `b` in every knob, for the
/// same model: smaller micro-batch, checkpointing on, full sharding, synced
/// accumulation, paged optimizer, and pure precision are all frugal.
fn at_most_as_hungry(a: &RunConfigPoint, b: &RunConfigPoint) -> bool {
    a.micro_batch <= b.micro_batch
        && (a.act_ckpt || !b.act_ckpt)
        && (a.sharding == Sharding::Full || b.sharding == Sharding::GradOp)
        && (a.accum_sync == AccumSync::Sync || b.accum_sync == AccumSync::NoSync)
        && (a.paged_optimizer || !b.paged_optimizer)
        && (a.precision == Precision::Pure || b.precision == Precision::Mixed)
}

fn rank(
    space: &[RunConfigPoint],
    hw: &HardwareSpec,
    coef: &PlannerCoefficients,
    prune: bool,
) -> Result<Vec<RankedConfig>> {
    hw.validate()?;
    let mut known_oom: Vec<RunConfigPoint> = Vec::new();
    let mut feasible = Vec::new();
    for (order, cfg) in space.iter().enumerate() {
        if prune && known_oom.iter().any(|oom| at_most_as_hungry(oom, cfg)) {
            continue;
        }
        let memory = memory_estimate_with(cfg, hw, coef);
        if !memory.feasible {
            known_oom.push(*cfg);
            continue;
        }
        let relative_time = time_estimate_with(cfg, hw, coef)?;
        feasible.push((order, RankedConfig {
            config: *cfg,
            memory,
            relative_time,
        }));
    }
    feasible.sort_by(|(oa, a), (ob, b)| {
        a.relative_time
            .partial_cmp(&b.relative_time)
            .unwrap()
            .then(oa.cmp(ob))
    });
    Ok(feasible.into_iter().map(|(_, r)| r).collect())
}

/// Rank every feasible point by predicted step time, fastest first, pruning
/// points dominated by an already-observed out-of-memory point.
pub fn best_config(space: &[RunConfigPoint], hw: &HardwareSpec) -> Result<Vec<RankedConfig>> {
    rank(space, hw, &PlannerCoefficients::default(), true)
}

/// Unpruned exhaustive ranking; same result, useful for validation.
pub fn best_config_exhaustive(
    space: &[RunConfigPoint],
    hw: &HardwareSpec,
) -> Result<Vec<RankedConfig>> {
    rank(space, hw, &PlannerCoefficients::default(), false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(
        precision: Precision,
        micro_batch: u32,
        act_ckpt: bool,
        sharding: Sharding,
        accum_sync: AccumSync,
        paged: bool,
    ) -> RunConfigPoint {
        RunConfigPoint {
            precision,
            micro_batch,
            act_ckpt,
            sharding,
            accum_sync,
            paged_optimizer: paged,
            model: ModelShape::benchmark_7b(),
        }
    }

    #[test]
    fn mixed_on_one_gpu_is_always_oom() {
        let hw = HardwareSpec::a100(1);
        let space = enumerate_space(Precision::Mixed, ModelShape::benchmark_7b());
        assert!(best_config(&space, &hw).unwrap().is_empty());
        // Static state alone exceeds the device: >= 16 bytes per parameter.
        let m = memory_estimate(
            &point(Precision::Mixed, 1, true, Sharding::Full, AccumSync::Sync, true),
            &hw,
        );
        assert!(m.weights + m.master + m.optimizer_states + m.gradients >= 112e9);
        assert!(!m.feasible);
    }

    #[test]
    fn pure_on_one_gpu_fits() {
        let hw = HardwareSpec::a100(1);
        let space = enumerate_space(Precision::Pure, ModelShape::benchmark_7b());
        let ranked = best_config(&space, &hw).unwrap();
        assert!(!ranked.is_empty());
        // Persistent state is 8 bytes per parameter = 56 GB.
        let m = memory_estimate(
            &point(Precision::Pure, 1, true, Sharding::Full, AccumSync::Sync, true),
            &hw,
        );
        assert_eq!(m.weights + m.gradients + m.optimizer_states, 56e9);
    }

    #[test]
    fn zero_parameters_cost_nothing() {
        let hw = HardwareSpec::a100(1);
        let shape = ModelShape {
            param_count: 0.0,
            n_layers: 0,
            d_model: 0,
            context_length: 0,
        };
        let mut cfg = point(Precision::Mixed, 8, false, Sharding::GradOp, AccumSync::NoSync, false);
        cfg.model = shape;
        let m = memory_estimate(&cfg, &hw);
        assert_eq!(m.total, 0.0);
        assert!(m.feasible);
    }

    #[test]
    fn best_two_gpu_configs_match_the_benchmark() {
        let hw = HardwareSpec::a100(2);
        let pure = best_config(
            &enumerate_space(Precision::Pure, ModelShape::benchmark_7b()),
            &hw,
        )
        .unwrap();
        let best = &pure[0].config;
        assert_eq!(
            (best.micro_batch, best.act_ckpt, best.sharding, best.accum_sync, best.paged_optimizer),
            (1, false, Sharding::GradOp, AccumSync::NoSync, false)
        );

        let mixed = best_config(
            &enumerate_space(Precision::Mixed, ModelShape::benchmark_7b()),
            &hw,
        )
        .unwrap();
        let best = &mixed[0].config;
        assert_eq!(
            (best.micro_batch, best.act_ckpt, best.sharding, best.accum_sync, best.paged_optimizer),
            (4, true, Sharding::Full, AccumSync::Sync, true)
        );
    }

    #[test]
    fn benchmark_best_tuples_are_feasible_on_their_rows() {
        let rows: Vec<(usize, RunConfigPoint)> = vec![
            (2, point(Precision::Mixed, 4, true, Sharding::Full, AccumSync::Sync, true)),
            (2, point(Precision::Pure, 1, false, Sharding::GradOp, AccumSync::NoSync, false)),
            (4, point(Precision::Mixed, 8, true, Sharding::Full, AccumSync::Sync, false)),
            (4, point(Precision::Pure, 1, false, Sharding::GradOp, AccumSync::NoSync, false)),
            (8, point(Precision::Mixed, 8, true, Sharding::Full, AccumSync::Sync, true)),
            (8, point(Precision::Pure, 1, false, Sharding::GradOp, AccumSync::NoSync, false)),
        ];
        for (gpus, cfg) in rows {
            let m = memory_estimate(&cfg, &HardwareSpec::a100(gpus));
            assert!(m.feasible, "{gpus}-GPU tuple {cfg:?} predicted OOM ({})", m.total);
        }
    }

    #[test]
    fn more_gpus_never_break_feasibility() {
        for precision in [Precision::Pure, Precision::Mixed] {
            for cfg in enumerate_space(precision, ModelShape::benchmark_7b()) {
                let mut feasible_seen = false;
                for gpus in [1, 2, 4, 8] {
                    let f = memory_estimate(&cfg, &HardwareSpec::a100(gpus)).feasible;
                    assert!(!feasible_seen || f, "feasibility lost at {gpus} GPUs: {cfg:?}");
                    feasible_seen |= f;
                }
            }
        }
    }

    #[test]
    fn memory_monotonicity_in_flags() {
        let hw = HardwareSpec::a100(4);
        for cfg in enumerate_space(Precision::Mixed, ModelShape::benchmark_7b()) {
            let base = memory_estimate(&cfg, &hw).total;
            let mut ckpt = cfg;
            ckpt.act_ckpt = true;
            assert!(memory_estimate(&ckpt, &hw).total <= base);
            let mut pure = cfg;
            pure.precision = Precision::Pure;
            assert!(memory_estimate(&pure, &hw).total < base);
        }
    }

    #[test]
    fn time_orderings() {
        let hw = HardwareSpec::a100(8);
        let base = point(Precision::Pure, 4, true, Sharding::Full, AccumSync::Sync, true);
        let t_pure = time_estimate(&base, &hw).unwrap();
        let mut mixed = base;
        mixed.precision = Precision::Mixed;
        assert!(t_pure <= time_estimate(&mixed, &hw).unwrap());

        let mut no_ckpt = point(Precision::Pure, 1, false, Sharding::Full, AccumSync::Sync, true);
        let t_off = time_estimate(&no_ckpt, &hw).unwrap();
        no_ckpt.act_ckpt = true;
        assert!(time_estimate(&no_ckpt, &hw).unwrap() > t_off);

        let sync = point(Precision::Pure, 1, true, Sharding::Full, AccumSync::Sync, true);
        let mut nosync = sync;
        nosync.accum_sync = AccumSync::NoSync;
        assert!(time_estimate(&nosync, &hw).unwrap() < time_estimate(&sync, &hw).unwrap());
    }

    #[test]
    fn infeasible_point_has_no_time() {
        let hw = HardwareSpec::a100(1);
        let cfg = point(Precision::Mixed, 1, true, Sharding::Full, AccumSync::Sync, true);
        assert!(time_estimate(&cfg, &hw).is_err());
    }

    #[test]
    fn pruned_search_equals_exhaustive_search() {
        for gpus in [1, 2, 4, 8] {
            let hw = HardwareSpec::a100(gpus);
            for precision in [Precision::Pure, Precision::Mixed] {
                let space = enumerate_space(precision, ModelShape::benchmark_7b());
                let pruned = best_config(&space, &hw).unwrap();
                let full = best_config_exhaustive(&space, &hw).unwrap();
                assert_eq!(pruned, full);
            }
        }
    }
}

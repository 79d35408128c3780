use crate::depth_basis::DepthMap;
use crate::error::{Error, Result};
use crate::geometry::RigidPose;

use super::{evaluate, pose_loss_and_grad, BundleConfig, BundleProblem, StateDump, Terms};

/// Adam with decoupled weight decay on a chosen index range.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: Vec<f64>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, cfg: &BundleConfig) -> Self {
        Adam {
            lr: vec![cfg.step_size; len],
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Overrides the step size on `range`.
    pub fn set_rate(&mut self, range: std::ops::Range<usize>, lr: f64) {
        self.lr[range].fill(lr);
    }

    /// One update. Entries of `frozen` are skipped; entries in `decayed`
    /// also shrink by `lr * weight_decay`.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grad: &[f64],
        frozen: std::ops::Range<usize>,
        decayed: std::ops::Range<usize>,
        weight_decay: f64,
    ) {
        self.t = self.t.saturating_add(1);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (idx, (p, g)) in params.iter_mut().zip(grad).enumerate() {
            if frozen.contains(&idx) {
                continue;
            }
            self.m[idx] = self.beta1 * self.m[idx] + (1.0 - self.beta1) * g;
            self.v[idx] = self.beta2 * self.v[idx] + (1.0 - self.beta2) * g * g;
            let update = (self.m[idx] / c1) / ((self.v[idx] / c2).sqrt() + self.eps);
            let lr = self.lr[idx];
            if decayed.contains(&idx) {
                *p -= lr * weight_decay * *p;
            }
            *p -= lr * update;
        }
    }
}

/// Constraints active at warm-start step `t` (1-based).
pub fn warmstart_active_count(t: usize, constraints: usize, ramp_divisor: usize) -> usize {
    t.div_ceil(ramp_divisor).min(constraints)
}

/// Whether the relative decrease over the last `window` steps is below `tolerance`.
pub fn window_converged(trace: &[f64], window: usize, tolerance: f64) -> bool {
    if trace.len() <= window {
        return false;
    }
    let last = trace[trace.len() - 1];
    let earlier = trace[trace.len() - 1 - window];
    (earlier - last) <= tolerance * earlier.abs()
}

fn frozen_range(problem: &BundleProblem) -> std::ops::Range<usize> {
    if problem.config.freeze_first {
        0..6
    } else {
        0..0
    }
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Pose-only warm start: `warmstart_factor * |I|` steps on the summed pose
/// terms of a growing prefix of the (sorted) constraints. Codes and
/// auxiliaries are untouched. Returns the loss trace.
pub fn warmstart_poses(problem: &mut BundleProblem) -> Result<Vec<f64>> {
    let cfg = problem.config;
    cfg.validate()?;
    let steps = cfg.warmstart_factor * problem.constraints.len();
    let chain_len = 6 * problem.frame_count();
    with_pool(cfg.threads, || {
        let mut adam = Adam::new(chain_len, &cfg);
        let mut trace = Vec::with_capacity(steps);
        let frozen = frozen_range(problem);
        for t in 1..=steps {
            let active = warmstart_active_count(t, problem.constraints.len(), cfg.ramp_divisor);
            let (loss, grad) = pose_loss_and_grad(problem, active);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: t,
                    dump: Box::new(StateDump::capture(problem, t, &trace)),
                });
            }
            trace.push(loss);
            let mut params = problem.params();
            let flat: Vec<f64> = grad.chain.iter().flatten().copied().collect();
            adam.step(&mut params[..chain_len], &flat, frozen.clone(), 0..0, 0.0);
            problem.set_params(&params)?;
        }
        Ok(trace)
    })?
}

/// Result of a full optimization.
#[derive(Debug, Clone)]
pub struct BundleReport {
    /// Loss at every evaluated state; the last entry is the final state.
    pub loss_trace: Vec<f64>,
    pub poses: Vec<RigidPose>,
    pub dense_depths: Vec<DepthMap>,
    /// Pixels clamped to the depth floor, per frame.
    pub clamped: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimize the full loss over chain, codes and auxiliaries with Adam.
pub fn optimize_bundle(problem: &mut BundleProblem) -> Result<BundleReport> {
    let cfg = problem.config;
    cfg.validate()?;
    let terms = Terms {
        matches: true,
        pose_weight: cfg.pose_weight,
        active: problem.constraints.len(),
    };
    let (trace, iterations, converged) = with_pool(cfg.threads, || -> Result<_> {
        let mut adam = Adam::new(problem.param_len(), &cfg);
        adam.set_rate(problem.aux_offset()..problem.param_len(), cfg.aux_step_size);
        let frozen = frozen_range(problem);
        let decayed = problem.code_offset()..problem.aux_offset();
        let mut trace = Vec::new();
        let mut params = problem.params();
        let mut converged = false;
        let mut iterations = 0;
        loop {
            let (loss, grad) = evaluate(problem, terms);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: iterations,
                    dump: Box::new(StateDump::capture(problem, iterations, &trace)),
                });
            }
            trace.push(loss);
            if window_converged(&trace, cfg.window, cfg.tolerance) {
                converged = true;
                break;
            }
            if iterations == cfg.max_iterations {
                break;
            }
            adam.step(&mut params, &grad.to_flat(), frozen.clone(), decayed.clone(), cfg.weight_decay);
            problem.set_params(&params)?;
            iterations += 1;
        }
        Ok((trace, iterations, converged))
    })??;
    let (dense_depths, clamped) = problem.dense_depths()?;
    log::info!(
        "bundle: {iterations} steps, loss {:.6} -> {:.6}{}",
        trace.first().copied().unwrap_or(f64::NAN),
        trace.last().copied().unwrap_or(f64::NAN),
        if converged { "" } else { " (iteration cap)" }
    );
    Ok(BundleReport {
        loss_trace: trace,
        poses: problem.poses(),
        dense_depths,
        clamped,
        iterations,
        converged,
    })
}

//! AdamW, global-norm clipping and the linear warmup/decay schedule.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Decoupled-weight-decay Adam with one moment pair per parameter slot.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u64,
}

impl AdamW {
    /// `shapes[i]` is the shape of slot `i`.
    pub fn new(config: AdamWConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            config,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Advances the step counter; call once before updating the slots of a step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Single-row parameters (biases, norm gains) are not decayed.
    pub fn update(&mut self, slot: usize, param: &mut Array2<f64>, grad: &Array2<f64>, lr: f64) {
        let c = self.config;
        let t = self.t.max(1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let wd = if param.nrows() > 1 { c.weight_decay } else { 0.0 };
        Zip::from(param)
            .and(grad)
            .and(&mut self.m[slot])
            .and(&mut self.v[slot])
            .for_each(|p, &g, m, v| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + c.eps) + wd * *p);
            });
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * k);
        }
    }
    norm
}

/// Linear ramp from 0 over the warmup steps, then linear decay to 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl LinearSchedule {
    pub fn new(peak: f64, total_steps: usize, warmup_ratio: f64) -> Self {
        let warmup_steps = (total_steps as f64 * warmup_ratio).ceil() as usize;
        Self {
            peak,
            total_steps: total_steps.max(1),
            warmup_steps,
        }
    }

    /// Learning rate for the 0-based optimizer step `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let remaining = self.total_steps.saturating_sub(step) as f64;
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        self.peak * (remaining / span).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &[(2, 2)]);
        let mut p = array![[1.0, 1.0], [1.0, 1.0]];
        let g = array![[0.5, -2.0], [1e-3, -1e-3]];
        opt.begin_step();
        opt.update(0, &mut p, &g, 0.1);
        let expect = [0.9, 1.1, 0.9, 1.1];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn decay_skips_rows() {
        let mut opt = AdamW::new(AdamWConfig::default(), &[(1, 2), (2, 1)]);
        let mut bias = array![[1.0, 1.0]];
        let mut w = array![[1.0], [1.0]];
        opt.begin_step();
        opt.update(0, &mut bias, &Array2::zeros((1, 2)), 0.1);
        opt.update(1, &mut w, &Array2::zeros((2, 1)), 0.1);
        assert_eq!(bias, array![[1.0, 1.0]]);
        assert!((w[[0, 0]] - (1.0 - 0.1 * 0.01)).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![array![[3.0]], array![[4.0, 0.0]]];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0][[0, 0]] - 0.6).abs() < 1e-12);
        assert!((g[1][[0, 0]] - 0.8).abs() < 1e-12);
        let mut small = vec![array![[0.1]]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][[0, 0]], 0.1);
    }

    #[test]
    fn schedule_shape() {
        let s = LinearSchedule::new(1.0, 100, 0.1);
        assert_eq!(s.warmup_steps, 10);
        assert!((s.lr(0) - 0.1).abs() < 1e-12);
        assert_eq!(s.lr(9), 1.0);
        assert_eq!(s.lr(10), 1.0);
        assert!((s.lr(55) - 0.5).abs() < 1e-12);
        assert!(s.lr(99) > 0.0);
        let lrs: Vec<f64> = (10..100).map(|i| s.lr(i)).collect();
        assert!(lrs.windows(2).all(|w| w[0] >= w[1]));
    }
}

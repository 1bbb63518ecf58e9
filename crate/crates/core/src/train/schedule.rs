//! Linear warmup followed by cosine decay.

use super::TrainConfig;

pub fn warmup_steps(total_steps: usize, cfg: &TrainConfig) -> usize {
    (cfg.warmup_fraction * total_steps as f64).round() as usize
}

pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let w = warmup_steps(total_steps, cfg);
    let peak = cfg.peak_lr;
    if step < w {
        return peak * step as f64 / w as f64;
    }
    if total_steps <= w {
        return peak;
    }
    let progress = (step.min(total_steps) - w) as f64 / (total_steps - w) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

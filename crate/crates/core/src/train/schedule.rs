use std::f64::consts::PI;

/// Linear warmup from 0 to `lr_max` over `warmup` steps, then cosine decay
/// to 0 at `total`.
pub fn cosine_lr(step: u64, total: u64, warmup: u64, lr_max: f64) -> f64 {
    if step < warmup {
        return lr_max * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return if step >= total { 0.0 } else { lr_max };
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    lr_max * 0.5 * (1.0 + (PI * progress).cos())
}

/// Linear warmup from 0 at step 0 to `base_lr` at step
/// `ceil(warmup_proportion * total_steps)`, constant afterwards.
pub fn warmup_lr(step: usize, total_steps: usize, base_lr: f64, warmup_proportion: f64) -> f64 {
    let warm = (warmup_proportion * total_steps as f64).ceil() as usize;
    if warm == 0 || step >= warm {
        base_lr
    } else {
        base_lr * step as f64 / warm as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_then_constant() {
        // 200 steps, 5% warmup ends at step 10
        assert_eq!(warmup_lr(10, 200, 5e-5, 0.05), 5e-5);
        assert_eq!(warmup_lr(5, 200, 5e-5, 0.05), 2.5e-5);
        assert_eq!(warmup_lr(0, 200, 5e-5, 0.05), 0.0);
        assert_eq!(warmup_lr(200, 200, 5e-5, 0.05), 5e-5);
        assert_eq!(warmup_lr(3, 200, 1e-3, 0.0), 1e-3);
    }

    #[test]
    fn warmup_end_rounds_up() {
        // ceil(0.05 * 30) = 2
        assert_eq!(warmup_lr(1, 30, 1.0, 0.05), 0.5);
        assert_eq!(warmup_lr(2, 30, 1.0, 0.05), 1.0);
    }
}

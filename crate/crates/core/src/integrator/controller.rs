use super::IntegratorError;

/// Convergence-driven step size control: halve on failure, double after
/// more than four consecutive successes.
#[derive(Debug, Clone, PartialEq)]
pub struct StepController {
    pub h: f64,
    pub h_max: f64,
    pub h_min: f64,
    pub consecutive_successes: usize,
    pub halvings_this_step: usize,
}

/// Successes needed before the step is doubled.
const DOUBLING_STREAK: usize = 4;

impl StepController {
    pub fn new(h0: f64, h_min: f64, h_max: f64) -> Self {
        Self { h: h0.clamp(h_min, h_max), h_max, h_min, consecutive_successes: 0, halvings_this_step: 0 }
    }

    pub fn adapt(&mut self, step_succeeded: bool) -> Result<(), IntegratorError> {
        adapt_timestep(self, step_succeeded)
    }
}

pub fn adapt_timestep(ctrl: &mut StepController, step_succeeded: bool) -> Result<(), IntegratorError> {
    if step_succeeded {
        ctrl.consecutive_successes += 1;
        if ctrl.consecutive_successes > DOUBLING_STREAK {
            ctrl.h = (2.0 * ctrl.h).min(ctrl.h_max);
            ctrl.consecutive_successes = 0;
        }
        return Ok(());
    }
    ctrl.consecutive_successes = 0;
    if ctrl.h <= ctrl.h_min {
        return Err(IntegratorError::StepSizeUnderflow { h: ctrl.h, h_min: ctrl.h_min });
    }
    ctrl.h = (0.5 * ctrl.h).max(ctrl.h_min);
    ctrl.halvings_this_step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn doubles_after_five_successes() {
        let mut c = StepController::new(0.01, 1e-6, 0.1);
        for i in 0..4 {
            c.adapt(true).unwrap();
            assert_eq!(c.h, 0.01, "after {} successes", i + 1);
        }
        c.adapt(true).unwrap();
        assert_eq!(c.h, 0.02);
        assert_eq!(c.consecutive_successes, 0);
    }

    #[test]
    fn halves_on_failure() {
        let mut c = StepController::new(0.01, 1e-6, 0.1);
        c.adapt(false).unwrap();
        assert_eq!(c.h, 0.005);
        assert_eq!(c.halvings_this_step, 1);
    }

    #[test]
    fn underflow_at_floor() {
        let mut c = StepController::new(1e-3, 1e-3, 0.1);
        assert!(matches!(c.adapt(false), Err(IntegratorError::StepSizeUnderflow { .. })));
    }

    #[test]
    fn doubling_respects_cap() {
        let mut c = StepController::new(0.08, 1e-6, 0.1);
        for _ in 0..5 {
            c.adapt(true).unwrap();
        }
        assert_eq!(c.h, 0.1);
    }

    proptest! {
        #[test]
        fn stays_in_bounds_and_never_doubles_right_after_halving(events in proptest::collection::vec(any::<bool>(), 1..200)) {
            let mut c = StepController::new(0.01, 0.01 / 1024.0, 0.04);
            let mut since_halving = usize::MAX;
            for ok in events {
                let before = c.h;
                if c.adapt(ok).is_err() {
                    break;
                }
                prop_assert!(c.h >= c.h_min && c.h <= c.h_max);
                if !ok {
                    since_halving = 0;
                } else {
                    since_halving = since_halving.saturating_add(1);
                    if c.h > before {
                        prop_assert!(since_halving >= 5);
                    }
                }
            }
        }
    }
}

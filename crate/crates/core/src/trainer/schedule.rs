//! Plateau learning-rate schedule driven by an exponential moving average
//! of the training loss.

use serde::{Deserialize, Serialize};

use super::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub current_lr: f64,
    /// Reductions so far; `current_lr = initial_lr / lr_factor^reductions`.
    pub reductions: u32,
    /// Moving average of the batch loss, unset before the first batch.
    pub l_ma: Option<f64>,
    /// Best moving average seen at a schedule check.
    pub best_l_ma: Option<f64>,
    /// Completed epochs.
    pub epoch: usize,
}

impl ScheduleState {
    pub fn new(cfg: &TrainConfig) -> Self {
        ScheduleState {
            current_lr: cfg.initial_lr,
            reductions: 0,
            l_ma: None,
            best_l_ma: None,
            epoch: 0,
        }
    }

    /// `l_MA ← (1 − α)·l_MA + α·loss`, starting from the first loss.
    pub fn observe(&mut self, loss: f64, cfg: &TrainConfig) {
        self.l_ma = Some(match self.l_ma {
            None => loss,
            Some(m) => (1.0 - cfg.ema_alpha) * m + cfg.ema_alpha * loss,
        });
    }
}

/// Schedule check. Reduces the rate when the moving average improved on
/// the best previous check by less than `plateau_delta`; the first check
/// only records the baseline.
pub fn update_schedule(s: &mut ScheduleState, cfg: &TrainConfig) {
    let Some(l) = s.l_ma else { return };
    match s.best_l_ma {
        None => s.best_l_ma = Some(l),
        Some(best) => {
            if best - l < cfg.plateau_delta {
                s.reductions += 1;
                s.current_lr = cfg.initial_lr / cfg.lr_factor.powi(s.reductions as i32);
            }
            s.best_l_ma = Some(best.min(l));
        }
    }
}

/// True once the rate is strictly below the floor.
pub fn should_terminate(s: &ScheduleState, cfg: &TrainConfig) -> bool {
    s.current_lr < cfg.lr_floor
}

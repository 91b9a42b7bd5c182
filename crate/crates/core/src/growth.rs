//! Growth policy: how many features each layer gains before a new task.
//! Either a validation-driven rate search (the harness trains candidate
//! clones and this module picks the winner) or a fixed per-task schedule.

use crate::error::{Result, TfmError};
use serde::{Deserialize, Serialize};

/// Accuracy margin for coarse rate selection.
pub const MARGIN_COARSE: f64 = 0.015;
/// Accuracy margin for fine-grained rate selection.
pub const MARGIN_FINE: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthMode {
    ValidationSearch,
    FixedSchedule,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GrowthPolicy {
    pub mode: GrowthMode,
    /// Candidate growth rates, fractions of each layer's cap.
    #[serde(default)]
    pub candidate_rates: Vec<f64>,
    /// Accuracy margin: the lowest rate within this margin of the best
    /// candidate wins.
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Fixed schedule: first entry is the task-1 fraction of each cap, later
    /// entries are per-task increments.
    #[serde(default)]
    pub schedule: Vec<f64>,
    /// Epoch cap while evaluating one candidate; `None` trains candidates
    /// with the full budget.
    #[serde(default)]
    pub search_epochs: Option<usize>,
}

fn default_margin() -> f64 {
    MARGIN_COARSE
}

impl GrowthPolicy {
    pub fn validation_search(candidate_rates: Vec<f64>, margin: f64) -> GrowthPolicy {
        GrowthPolicy {
            mode: GrowthMode::ValidationSearch,
            candidate_rates,
            margin,
            schedule: Vec::new(),
            search_epochs: None,
        }
    }

    pub fn fixed_schedule(schedule: Vec<f64>) -> GrowthPolicy {
        GrowthPolicy {
            mode: GrowthMode::FixedSchedule,
            candidate_rates: Vec::new(),
            margin: default_margin(),
            schedule,
            search_epochs: None,
        }
    }

    /// No growth at all: a degenerate fixed schedule that allocates the full
    /// width up front. Used by baselines that never grow.
    pub fn none(num_tasks: usize) -> GrowthPolicy {
        let mut schedule = vec![1.0];
        schedule.extend(std::iter::repeat_n(0.0, num_tasks.saturating_sub(1)));
        GrowthPolicy::fixed_schedule(schedule)
    }

    pub fn validate(&self, num_tasks: usize) -> Result<()> {
        if self.margin < 0.0 {
            return Err(TfmError::Config("growth margin must be non-negative".into()));
        }
        match self.mode {
            GrowthMode::ValidationSearch => {
                if self.candidate_rates.is_empty() {
                    return Err(TfmError::Config(
                        "validation search needs candidate rates".into(),
                    ));
                }
                if self
                    .candidate_rates
                    .iter()
                    .any(|&r| !(0.0..=1.0).contains(&r) || !r.is_finite())
                {
                    return Err(TfmError::Config(
                        "candidate rates must lie in [0, 1]".into(),
                    ));
                }
                if self.candidate_rates.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(TfmError::Config(
                        "candidate rates must be strictly ascending".into(),
                    ));
                }
            }
            GrowthMode::FixedSchedule => {
                if self.schedule.is_empty() {
                    return Err(TfmError::Config("fixed schedule is empty".into()));
                }
                if self.schedule.len() < num_tasks {
                    return Err(TfmError::Config(format!(
                        "schedule covers {} tasks, scenario has {}",
                        self.schedule.len(),
                        num_tasks
                    )));
                }
                if self
                    .schedule
                    .iter()
                    .any(|&f| !(0.0..=1.0).contains(&f) || !f.is_finite())
                {
                    return Err(TfmError::Config(
                        "schedule fractions must lie in [0, 1]".into(),
                    ));
                }
                let total: f64 = self.schedule.iter().sum();
                if total > 1.0 + 1e-9 {
                    return Err(TfmError::Capacity(format!(
                        "schedule fractions sum to {:.4}, exceeding the cap",
                        total
                    )));
                }
                if self.schedule[0] <= 0.0 {
                    return Err(TfmError::Config(
                        "the first schedule fraction must be positive".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Widths the network is built with before task 1. The fixed schedule
    /// starts at its first fraction of each cap; the search starts at the
    /// declared spec widths (`None`).
    pub fn initial_widths(&self, caps: &[usize]) -> Option<Vec<usize>> {
        match self.mode {
            GrowthMode::ValidationSearch => None,
            GrowthMode::FixedSchedule => Some(
                caps.iter()
                    .map(|&c| round_half_up(self.schedule[0] * c as f64).max(1).min(c))
                    .collect(),
            ),
        }
    }

    /// Per-layer feature additions for a task ≥ 2 under the fixed schedule,
    /// clamped to remaining capacity.
    pub fn scheduled_added(
        &self,
        task: u32,
        caps: &[usize],
        current_widths: &[usize],
    ) -> Result<Vec<usize>> {
        if self.mode != GrowthMode::FixedSchedule {
            return Err(TfmError::Contract(
                "scheduled growth on a search policy".into(),
            ));
        }
        if task < 2 {
            return Err(TfmError::Contract(
                "task 1 widths come from initial_widths".into(),
            ));
        }
        let idx = task as usize - 1;
        let fraction = *self.schedule.get(idx).ok_or_else(|| {
            TfmError::Config(format!(
                "schedule has {} entries, task {} needs entry {}",
                self.schedule.len(),
                task,
                idx + 1
            ))
        })?;
        Ok(caps
            .iter()
            .zip(current_widths)
            .map(|(&c, &w)| round_half_up(fraction * c as f64).min(c.saturating_sub(w)))
            .collect())
    }

    /// Per-layer additions for one candidate rate. Not clamped: a rate that
    /// does not fit raises a capacity error when the growth is applied, and
    /// the search skips that candidate.
    pub fn added_for_rate(rate: f64, caps: &[usize]) -> Vec<usize> {
        caps.iter()
            .map(|&c| round_half_up(rate * c as f64))
            .collect()
    }
}

/// Round to the nearest integer, halves up. Negative inputs floor at zero.
pub fn round_half_up(x: f64) -> usize {
    if x <= 0.0 {
        return 0;
    }
    (x + 0.5).floor() as usize
}

/// Outcome of evaluating one candidate rate.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CandidateOutcome {
    pub rate: f64,
    pub val_accuracy: f64,
    /// Per-layer features this rate would add.
    pub added: Vec<usize>,
}

/// Record of how a task's growth was decided.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GrowthDecision {
    pub task_id: u32,
    pub chosen_rate: f64,
    pub added: Vec<usize>,
    /// Candidate accuracies, search mode only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<CandidateOutcome>,
    /// True when a positive rate rounded to zero added features everywhere.
    #[serde(default)]
    pub effectively_zero: bool,
}

impl GrowthDecision {
    pub fn new(task_id: u32, chosen_rate: f64, added: Vec<usize>) -> GrowthDecision {
        let effectively_zero = chosen_rate > 0.0 && added.iter().all(|&a| a == 0);
        GrowthDecision {
            task_id,
            chosen_rate,
            added,
            candidates: Vec::new(),
            effectively_zero,
        }
    }
}

/// Pick the lowest rate whose accuracy is within `margin` of the best.
/// Candidates must be in ascending rate order.
pub fn choose_rate(candidates: &[CandidateOutcome], margin: f64) -> Result<&CandidateOutcome> {
    if candidates.is_empty() {
        return Err(TfmError::Contract("no candidate outcomes".into()));
    }
    let best = candidates
        .iter()
        .map(|c| c.val_accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(candidates
        .iter()
        .find(|c| c.val_accuracy >= best - margin)
        .expect("the best candidate is always within its own margin"))
}

/// Weights added when a dense pair mapping q features to p features grows
/// by `n_in` inputs and `n_out` outputs: every new output row spans the
/// widened input, and old rows gain the new columns.
pub fn dense_pair_added_connections(q: u64, p: u64, n_in: u64, n_out: u64) -> u64 {
    n_out * (q + n_in) + p * n_in
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_half_up_matches_hand_cases() {
        assert_eq!(round_half_up(0.0), 0);
        assert_eq!(round_half_up(0.49), 0);
        assert_eq!(round_half_up(0.5), 1);
        assert_eq!(round_half_up(5.5), 6);
        assert_eq!(round_half_up(5.49), 5);
        assert_eq!(round_half_up(-1.0), 0);
    }

    #[test]
    fn schedule_55_5_on_cap_100() {
        let mut schedule = vec![0.55];
        schedule.extend(std::iter::repeat_n(0.05, 9));
        let policy = GrowthPolicy::fixed_schedule(schedule);
        policy.validate(10).unwrap();
        let caps = [100usize, 100];
        let mut widths = policy.initial_widths(&caps).unwrap();
        assert_eq!(widths, vec![55, 55]);
        for task in 2..=10u32 {
            let added = policy.scheduled_added(task, &caps, &widths).unwrap();
            assert_eq!(added, vec![5, 5], "task {}", task);
            for (w, a) in widths.iter_mut().zip(&added) {
                *w += a;
            }
        }
        assert_eq!(widths, vec![100, 100]);
    }

    #[test]
    fn small_cap_rounds_half_up_and_clamps() {
        let policy = GrowthPolicy::fixed_schedule(vec![0.55, 0.05, 0.05]);
        let caps = [10usize];
        // 0.55 * 10 = 5.5 rounds to 6; each +0.05 * 10 = 0.5 rounds to 1.
        let widths = policy.initial_widths(&caps).unwrap();
        assert_eq!(widths, vec![6]);
        assert_eq!(policy.scheduled_added(2, &caps, &widths).unwrap(), vec![1]);
        // Clamped once the cap is reached.
        assert_eq!(policy.scheduled_added(2, &caps, &[10]).unwrap(), vec![0]);
    }

    #[test]
    fn full_width_single_task_schedule() {
        let policy = GrowthPolicy::none(1);
        policy.validate(1).unwrap();
        assert_eq!(policy.initial_widths(&[64, 128]).unwrap(), vec![64, 128]);
    }

    #[test]
    fn validate_rejects_bad_policies() {
        let over = GrowthPolicy::fixed_schedule(vec![0.8, 0.3]);
        assert!(matches!(over.validate(2), Err(TfmError::Capacity(_))));

        let short = GrowthPolicy::fixed_schedule(vec![0.5, 0.1]);
        assert!(matches!(short.validate(5), Err(TfmError::Config(_))));

        let unsorted = GrowthPolicy::validation_search(vec![0.1, 0.05], MARGIN_COARSE);
        assert!(matches!(unsorted.validate(2), Err(TfmError::Config(_))));

        let out_of_range = GrowthPolicy::validation_search(vec![0.1, 1.5], MARGIN_COARSE);
        assert!(matches!(out_of_range.validate(2), Err(TfmError::Config(_))));

        let empty = GrowthPolicy::validation_search(vec![], MARGIN_COARSE);
        assert!(matches!(empty.validate(2), Err(TfmError::Config(_))));

        let negative_margin = GrowthPolicy::validation_search(vec![0.1], -0.01);
        assert!(matches!(negative_margin.validate(2), Err(TfmError::Config(_))));
    }

    #[test]
    fn tie_goes_to_the_lowest_rate() {
        let candidates = vec![
            CandidateOutcome { rate: 0.0, val_accuracy: 0.80, added: vec![0] },
            CandidateOutcome { rate: 0.1, val_accuracy: 0.80, added: vec![2] },
        ];
        assert_eq!(choose_rate(&candidates, MARGIN_COARSE).unwrap().rate, 0.0);
    }

    #[test]
    fn clear_winner_outside_margin_is_kept() {
        let candidates = vec![
            CandidateOutcome { rate: 0.0, val_accuracy: 0.60, added: vec![0] },
            CandidateOutcome { rate: 0.1, val_accuracy: 0.82, added: vec![2] },
        ];
        assert_eq!(choose_rate(&candidates, MARGIN_COARSE).unwrap().rate, 0.1);
    }

    #[test]
    fn margin_presets_match_their_documented_values() {
        assert_eq!(MARGIN_COARSE, 0.015);
        assert_eq!(MARGIN_FINE, 0.001);
    }

    #[test]
    fn worked_example_connection_accounting() {
        // A 6-to-2 dense pair holds 12 connections; growing by (3, 2) adds
        // 24, growing the result by (3, 2) again adds 36.
        assert_eq!(6 * 2, 12);
        assert_eq!(dense_pair_added_connections(6, 2, 3, 2), 24);
        assert_eq!(dense_pair_added_connections(9, 4, 3, 2), 36);
    }

    #[test]
    fn effectively_zero_growth_is_flagged() {
        let d = GrowthDecision::new(3, 0.01, vec![0, 0]);
        assert!(d.effectively_zero);
        let d2 = GrowthDecision::new(3, 0.1, vec![1, 0]);
        assert!(!d2.effectively_zero);
        let d3 = GrowthDecision::new(3, 0.0, vec![0, 0]);
        assert!(!d3.effectively_zero);
    }

    proptest! {
        // The chosen candidate is within the margin of the best, and no
        // lower rate also qualifies.
        #[test]
        fn chosen_rate_is_minimal_within_margin(
            accs in proptest::collection::vec(0.0f64..1.0, 1..8),
            margin in 0.0f64..0.2,
        ) {
            let candidates: Vec<CandidateOutcome> = accs
                .iter()
                .enumerate()
                .map(|(i, &a)| CandidateOutcome {
                    rate: i as f64 * 0.05,
                    val_accuracy: a,
                    added: vec![i],
                })
                .collect();
            let best = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let chosen = choose_rate(&candidates, margin).unwrap();
            prop_assert!(chosen.val_accuracy >= best - margin);
            for c in &candidates {
                if c.rate < chosen.rate {
                    prop_assert!(c.val_accuracy < best - margin);
                }
            }
        }

        // Scheduled growth never exceeds any layer's cap, whatever the
        // rounding does.
        #[test]
        fn scheduled_growth_respects_caps(
            cap in 1usize..200,
            first in 0.05f64..1.0,
            tasks in 1usize..12,
        ) {
            let mut schedule = vec![first];
            let rest = (1.0 - first) / tasks as f64;
            schedule.extend(std::iter::repeat_n(rest, tasks));
            let policy = GrowthPolicy::fixed_schedule(schedule);
            policy.validate(tasks).unwrap();
            let caps = [cap];
            let mut widths = policy.initial_widths(&caps).unwrap();
            prop_assert!(widths[0] >= 1 && widths[0] <= cap);
            for task in 2..=(tasks as u32) {
                let added = policy.scheduled_added(task, &caps, &widths).unwrap();
                widths[0] += added[0];
                prop_assert!(widths[0] <= cap);
            }
        }
    }
}

//! Model specification: which statistics enter each sub-model, the baseline
//! change-point grid, and the risk-set policy.

use serde::{Deserialize, Serialize};

use crate::event_data::RiskSetPolicy;
use crate::likelihood::BaselineGrid;
use crate::statistics::{StatError, StatisticKind};

/// Statistics and baseline grid for one sub-model (incidence or duration).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubModelSpec {
    pub stats: Vec<StatisticKind>,
    pub baseline: BaselineGrid,
}

/// Full model specification. `duration: None` is the point-event (REM) mode:
/// events are instantaneous, the dissolution process is disabled, and every
/// pair is always at risk of an event.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub incidence: SubModelSpec,
    pub duration: Option<SubModelSpec>,
    pub policy: RiskSetPolicy,
}

impl ModelSpec {
    pub fn rem_mode(&self) -> bool {
        self.duration.is_none()
    }

    /// Admissibility rules:
    /// - the ongoing-duration statistic only enters the duration sub-model;
    /// - current-common-partner statistics are rejected under the exclusive
    ///   engagement policy (an actor in an event cannot be anyone's current
    ///   common partner, so the statistic is identically zero);
    /// - point-event mode admits no current-tie statistics at all.
    pub fn validate(&self) -> Result<(), StatError> {
        for kind in &self.incidence.stats {
            if matches!(kind, StatisticKind::CurrentInteractionDuration) {
                return Err(StatError::InadmissibleStatistic {
                    kind: kind.to_string(),
                    why: "ongoing-duration statistic is defined only in the duration sub-model".into(),
                });
            }
        }
        let ccp_reason = if self.rem_mode() {
            Some("point events never hold a current tie, so the statistic is identically zero")
        } else if self.policy == RiskSetPolicy::ExclusiveEngagement {
            Some("under exclusive engagement no actor can be a current common partner, so the statistic is identically zero")
        } else {
            None
        };
        if let Some(why) = ccp_reason {
            for stats in std::iter::once(&self.incidence.stats)
                .chain(self.duration.iter().map(|d| &d.stats))
            {
                if stats.contains(&StatisticKind::CurrentCommonPartner) {
                    return Err(StatError::InadmissibleStatistic {
                        kind: StatisticKind::CurrentCommonPartner.to_string(),
                        why: why.into(),
                    });
                }
            }
        }
        Ok(())
    }
}

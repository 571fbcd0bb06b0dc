//! Anonymous ticket analytics. Reports carry counts only; no field of a
//! report can hold a user identity.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::Serialize;

use crate::clock::Timestamp;

use super::{FeedbackTicket, Flag, TicketState};

/// Half-open range `[from, to)`; a missing bound is unbounded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AnalyticsQuery {
    pub from: Option<Timestamp>,
    pub to: Option<Timestamp>,
    pub group_by_day: bool,
}

impl AnalyticsQuery {
    pub fn contains(&self, t: Timestamp) -> bool {
        self.from.is_none_or(|f| t >= f) && self.to.is_none_or(|e| t < e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DayBucket {
    pub day: NaiveDate,
    pub tickets: u64,
    pub extend_tickets: u64,
    pub assistant_turns: u64,
    pub rate_of_incomplete_answers: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyticsReport {
    pub from: Option<Timestamp>,
    pub to: Option<Timestamp>,
    pub tickets: u64,
    pub by_flag: BTreeMap<Flag, u64>,
    pub by_state: BTreeMap<TicketState, u64>,
    pub assistant_turns: u64,
    /// Extend-flagged tickets divided by assistant turns; 0 without turns.
    pub rate_of_incomplete_answers: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub days: Option<Vec<DayBucket>>,
}

fn rate(extend: u64, turns: u64) -> f64 {
    if turns == 0 {
        0.0
    } else {
        extend as f64 / turns as f64
    }
}

/// Tickets count by creation time, turns by their own creation time.
pub fn ticket_analytics(tickets: &[FeedbackTicket], turn_times: &[Timestamp], q: &AnalyticsQuery) -> AnalyticsReport {
    let in_range: Vec<&FeedbackTicket> = tickets.iter().filter(|t| q.contains(t.created_at)).collect();
    let turns: Vec<Timestamp> = turn_times.iter().copied().filter(|t| q.contains(*t)).collect();
    let mut by_flag: BTreeMap<Flag, u64> = Flag::ALL.iter().map(|f| (*f, 0)).collect();
    let mut by_state: BTreeMap<TicketState, u64> = TicketState::ALL.iter().map(|s| (*s, 0)).collect();
    for t in &in_range {
        *by_flag.get_mut(&t.flag).unwrap() += 1;
        *by_state.get_mut(&t.state).unwrap() += 1;
    }
    let days = q.group_by_day.then(|| {
        let mut buckets: BTreeMap<NaiveDate, (u64, u64, u64)> = BTreeMap::new();
        for t in &in_range {
            let b = buckets.entry(t.created_at.date_naive()).or_default();
            b.0 += 1;
            if t.flag == Flag::Extend {
                b.1 += 1;
            }
        }
        for t in &turns {
            buckets.entry(t.date_naive()).or_default().2 += 1;
        }
        buckets
            .into_iter()
            .map(|(day, (tickets, extend_tickets, assistant_turns))| DayBucket {
                day,
                tickets,
                extend_tickets,
                assistant_turns,
                rate_of_incomplete_answers: rate(extend_tickets, assistant_turns),
            })
            .collect()
    });
    let assistant_turns = turns.len() as u64;
    AnalyticsReport {
        from: q.from,
        to: q.to,
        tickets: in_range.len() as u64,
        rate_of_incomplete_answers: rate(by_flag[&Flag::Extend], assistant_turns),
        by_flag,
        by_state,
        assistant_turns,
        days,
    }
}

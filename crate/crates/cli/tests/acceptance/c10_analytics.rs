//! Rate of incomplete answers on datasets with known counts, and a
//! structural scan of the report for identities.

use std::sync::Arc;

use chrono::Duration;
use cogassist_core::acl::UserId;
use cogassist_core::clock::{Clock, ManualClock};
use cogassist_core::feedback::{AnalyticsQuery, AnalyticsReport, Flag, RevisionInput};
use cogassist_core::gateway::{ApiRequest, Gateway};
use cogassist_core::system::{Assistant, Setup};
use serde_json::Value;

use crate::common::*;
use crate::Outcome;

/// One assistant turn per entry; `Some(flag)` flags that turn.
type Day = &'static [Option<Flag>];

const E: Option<Flag> = Some(Flag::Extend);
const I: Option<Flag> = Some(Flag::Insufficient);
const N: Option<Flag> = None;

struct Dataset {
    name: &'static str,
    days: &'static [Day],
    /// Hand-computed overall rate.
    rate: f64,
    /// Hand-computed per-day rates.
    day_rates: &'static [f64],
}

const DATASETS: [Dataset; 4] = [
    Dataset {
        name: "A",
        days: &[&[E, N, N, I, N, N, E, N, N, N]],
        rate: 0.2,
        day_rates: &[0.2],
    },
    Dataset {
        name: "B",
        days: &[&[N, I, N, N, I, N, N, N]],
        rate: 0.0,
        day_rates: &[0.0],
    },
    Dataset {
        name: "C",
        days: &[&[E, E, N, E], &[N, N, E, I, N, N]],
        rate: 0.4,
        day_rates: &[0.75, 1.0 / 6.0],
    },
    Dataset {
        name: "D",
        days: &[&[E, E, E, E, E]],
        rate: 1.0,
        day_rates: &[1.0],
    },
];

const FORBIDDEN_KEYS: [&str; 8] = [
    "user_id",
    "actor",
    "actor_trail",
    "owner",
    "flagged_by",
    "display_name",
    "user",
    "authorization",
];

/// Every key and string in `v`, recursively.
fn scan<'a>(v: &'a Value, keys: &mut Vec<&'a str>, strings: &mut Vec<&'a str>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                keys.push(k);
                scan(x, keys, strings);
            }
        }
        Value::Array(xs) => xs.iter().for_each(|x| scan(x, keys, strings)),
        Value::String(s) => strings.push(s),
        _ => {}
    }
}

fn identity_free(report: &Value, identities: &[String]) -> Result<(), String> {
    let (mut keys, mut strings) = (Vec::new(), Vec::new());
    scan(report, &mut keys, &mut strings);
    if let Some(k) = keys.iter().find(|k| FORBIDDEN_KEYS.contains(k)) {
        return Err(format!("report has identity field '{k}'"));
    }
    for s in keys.iter().chain(strings.iter()) {
        let lower = s.to_lowercase();
        if let Some(id) = identities.iter().find(|id| lower.contains(&id.to_lowercase())) {
            return Err(format!("report value {s:?} contains identity {id:?}"));
        }
    }
    Ok(())
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

pub fn run() -> Outcome {
    let mut checked = 0;
    for ds in &DATASETS {
        let start = ts("2026-03-02T07:00:00Z");
        let clock = Arc::new(ManualClock::new(start));
        let mut setup = Setup::new(clock.clone() as Arc<dyn Clock>);
        setup.registry = staff_registry();
        let (a, _sink) = Assistant::in_memory(setup);
        let a = Arc::new(a);
        ingest_manuals(&a);

        let mut tally_turns = vec![0u64; ds.days.len()];
        let mut tally_extend = vec![0u64; ds.days.len()];
        let mut tally_tickets = 0u64;
        for (d, day) in ds.days.iter().enumerate() {
            // Two operators, one conversation each per day.
            let mut convs = [None, None];
            for (n, flag) in day.iter().enumerate() {
                clock.advance(Duration::minutes(7));
                let user = if n % 2 == 0 { OPERATOR } else { OPERATOR_2 };
                let slot = &mut convs[n % 2];
                let r = chat(&a, user, slot.as_ref(), QUESTIONS[n % QUESTIONS.len()]);
                tally_turns[d] += 1;
                *slot = Some(r.conversation_id.clone());
                let Some(flag) = flag else { continue };
                let (t, created) = a
                    .create_ticket(&who(user), &r.conversation_id, r.turn.turn_index, *flag)
                    .map_err(|e| e.to_string())?;
                ensure!(created, "dataset {}: ticket not created", ds.name);
                tally_tickets += 1;
                if *flag == Flag::Extend {
                    tally_extend[d] += 1;
                }
                // Move some tickets along so the report sees other actors.
                if n % 3 == 0 {
                    a.revise_ticket(
                        &who(SUPERVISOR),
                        &t.ticket_id,
                        RevisionInput {
                            revision: format!("{} Revised by the shift lead.", r.turn.user_text),
                            attachments: Vec::new(),
                            target_doc_id: None,
                        },
                    )
                    .map_err(|e| e.to_string())?;
                    a.reject_ticket(&who(MANAGER), &t.ticket_id, "covered elsewhere")
                        .map_err(|e| e.to_string())?;
                }
            }
            clock.advance(Duration::days(1));
        }

        // Oracle side: rates from this script's own counts.
        let total_turns: u64 = tally_turns.iter().sum();
        let total_extend: u64 = tally_extend.iter().sum();
        let oracle = total_extend as f64 / total_turns as f64;
        ensure!(
            close(oracle, ds.rate),
            "dataset {}: hand rate {} vs counted {oracle}",
            ds.name,
            ds.rate
        );

        let q = AnalyticsQuery {
            group_by_day: true,
            ..AnalyticsQuery::default()
        };
        let report: AnalyticsReport = a.analytics(&who(MANAGER), &q).map_err(|e| e.to_string())?;
        ensure!(
            close(report.rate_of_incomplete_answers, ds.rate),
            "dataset {}: rate {} expected {}",
            ds.name,
            report.rate_of_incomplete_answers,
            ds.rate
        );
        ensure!(
            report.assistant_turns == total_turns && report.tickets == tally_tickets,
            "dataset {}: {} turns / {} tickets, expected {total_turns} / {tally_tickets}",
            ds.name,
            report.assistant_turns,
            report.tickets
        );
        ensure!(
            report.by_flag[&Flag::Extend] == total_extend,
            "dataset {}: extend count",
            ds.name
        );
        let days = report.days.clone().ok_or("no day buckets")?;
        ensure!(
            days.len() == ds.days.len(),
            "dataset {}: {} day buckets",
            ds.name,
            days.len()
        );
        for (d, bucket) in days.iter().enumerate() {
            ensure!(
                close(bucket.rate_of_incomplete_answers, ds.day_rates[d])
                    && bucket.assistant_turns == tally_turns[d]
                    && bucket.extend_tickets == tally_extend[d],
                "dataset {} day {d}: {bucket:?}, expected rate {}",
                ds.name,
                ds.day_rates[d]
            );
        }
        // Half-open range covering only the last day.
        if ds.days.len() > 1 {
            let last = ds.days.len() - 1;
            let day_start = (start + Duration::days(last as i64)).date_naive();
            let from = day_start.and_hms_opt(0, 0, 0).unwrap().and_utc();
            let ranged = a
                .analytics(
                    &who(MANAGER),
                    &AnalyticsQuery {
                        from: Some(from),
                        to: Some(from + Duration::days(1)),
                        group_by_day: false,
                    },
                )
                .map_err(|e| e.to_string())?;
            ensure!(
                close(ranged.rate_of_incomplete_answers, ds.day_rates[last])
                    && ranged.assistant_turns == tally_turns[last],
                "dataset {} last-day range: {ranged:?}",
                ds.name
            );
        }

        // No identity in the report, in process or over the gateway.
        let reg = a.registry();
        let identities: Vec<String> = reg
            .users()
            .flat_map(|u| [u.user_id.as_str().to_string(), u.display_name.clone()])
            .collect();
        let value = serde_json::to_value(&report).map_err(|e| e.to_string())?;
        identity_free(&value, &identities)?;
        let gw = Gateway::new(a.clone(), 3600, clock.clone() as Arc<dyn Clock>);
        let session = gw
            .login(&UserId::new(MANAGER), &secret(MANAGER))
            .ok_or_else(|| "manager login failed".to_string())?;
        let resp =
            gw.handle_request(ApiRequest::new("GET", "/analytics?group_by_day=true").bearer(&session.session_token));
        ensure!(resp.status == 200, "GET /analytics: {}", resp.status);
        identity_free(resp.json(), &identities)?;
        ensure!(
            resp.json()["rate_of_incomplete_answers"]
                .as_f64()
                .is_some_and(|r| close(r, ds.rate)),
            "dataset {}: gateway rate {}",
            ds.name,
            resp.json()["rate_of_incomplete_answers"]
        );
        checked += 1;
    }
    Ok(format!(
        "{checked} datasets: rates 0.2 / 0.0 / 0.4 (days 0.75, 1/6) / 1.0 match; reports carry no user field or identity"
    ))
}

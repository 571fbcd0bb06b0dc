//! Fixtures shared by the acceptance criteria.

use std::sync::Arc;

use cogassist_core::acl::{credential_digest, Caller, Permission, Registry, UserDef};
use cogassist_core::clock::{Clock, FixedClock, Timestamp};
use cogassist_core::corpus::DocumentVersion;
use cogassist_core::dialog::{Modality, ModalityInput, TurnResult};
use cogassist_core::document::{DocKind, SourceFormat};
use cogassist_core::ids::DocId;
use cogassist_core::system::{Assistant, IngestRequest};

/// Returns `Err(message)` from the enclosing criterion when `cond` fails.
macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        match $cond {
            true => {}
            false => return Err(format!($($arg)+)),
        }
    };
}

pub const ADMIN: &str = "admin";
pub const OPERATOR: &str = "anna.keller";
pub const OPERATOR_2: &str = "ben.ortiz";
pub const SUPERVISOR: &str = "carla.nguyen";
pub const MANAGER: &str = "dora.lindqvist";

/// (user id, display name, group) for the non-admin staff.
pub const STAFF: [(&str, &str, &str); 4] = [
    (OPERATOR, "Anna Keller", "operator"),
    (OPERATOR_2, "Ben Ortiz", "operator"),
    (SUPERVISOR, "Carla Nguyen", "supervisor"),
    (MANAGER, "Dora Lindqvist", "managerial"),
];

/// The documented grant table for the seeded groups.
pub fn documented_grants(group: &str) -> &'static [Permission] {
    use Permission::*;
    match group {
        "managerial" => &[
            Chat,
            FlagAnswer,
            RewriteTicket,
            AttachDocument,
            ApproveTicket,
            ReadTicketAnalytics,
            ManageCorpus,
            ManageUsers,
            ReadAudit,
        ],
        "supervisor" => &[Chat, FlagAnswer, RewriteTicket, AttachDocument, ApproveTicket],
        "operator" => &[Chat, FlagAnswer],
        other => panic!("no documented grants for group {other}"),
    }
}

pub fn group_of(user: &str) -> &'static str {
    if user == ADMIN {
        return "managerial";
    }
    STAFF
        .iter()
        .find(|(id, _, _)| *id == user)
        .map(|(_, _, g)| *g)
        .unwrap_or_else(|| panic!("unknown user {user}"))
}

pub fn may(user: &str, p: Permission) -> bool {
    documented_grants(group_of(user)).contains(&p)
}

pub fn ts(s: &str) -> Timestamp {
    s.parse().expect("RFC 3339 timestamp")
}

pub fn fixed_clock() -> Arc<dyn Clock> {
    Arc::new(FixedClock(ts("2026-03-02T08:00:00Z")))
}

pub fn secret(user: &str) -> String {
    format!("{user}-pw")
}

/// Seed registry plus [`STAFF`], every account (admin included) with a
/// login credential.
pub fn staff_registry() -> Registry {
    let mut file = Registry::default_seed().to_file_model();
    for u in &mut file.user {
        u.credential_sha256 = Some(credential_digest(&secret(&u.id)));
    }
    for (id, name, group) in STAFF {
        file.user.push(UserDef {
            id: id.into(),
            display_name: name.into(),
            groups: vec![group.into()],
            active: true,
            credential_sha256: Some(credential_digest(&secret(id))),
        });
    }
    file.into_registry().expect("staff registry is valid")
}

pub fn who(user: &str) -> Caller {
    Caller::user(user)
}

/// Four short plant documents. Every question below retrieves all of them.
pub const MANUALS: [(&str, &str); 4] = [
    (
        "press-line-manual",
        "The hydraulic press is stopped before changing the die. Lock the main valve and release the \
         accumulator pressure. The die change takes about twenty minutes with two operators.",
    ),
    (
        "paint-shop-guide",
        "Paint booth filters are replaced every two weeks. Check the airflow gauge before each shift. \
         Solvent containers are stored in the ventilated cabinet.",
    ),
    (
        "welding-cell-sop",
        "The welding robot is calibrated with the reference pin each morning. Wire feed speed is set \
         to eight meters per minute for steel brackets. Replace the contact tip after four hundred welds.",
    ),
    (
        "quality-inspection",
        "Every tenth housing is measured with the coordinate measuring machine. Deviations above the \
         tolerance limit are reported to the shift supervisor. Rejected parts go to the red quarantine bin.",
    ),
];

pub const QUESTIONS: [&str; 6] = [
    "How is the die changed on the hydraulic press?",
    "When are the paint booth filters replaced?",
    "What wire feed speed does the welding robot use?",
    "How often is a housing measured?",
    "Where do rejected parts go?",
    "How is the welding robot calibrated?",
];

pub fn ingest(a: &Assistant, actor: &str, doc_id: &str, text: &str) -> DocumentVersion {
    a.ingest(
        &who(actor),
        IngestRequest {
            bytes: text.as_bytes().to_vec(),
            format: SourceFormat::PlainText,
            doc_id: Some(DocId::new(doc_id)),
            title: None,
            source_uri: format!("fixtures/{doc_id}.txt"),
            doc_kind: DocKind::WorkInstruction,
        },
    )
    .unwrap_or_else(|e| panic!("ingest {doc_id}: {e}"))
}

pub fn ingest_manuals(a: &Assistant) {
    for (id, text) in MANUALS {
        ingest(a, ADMIN, id, text);
    }
}

pub fn chat(
    a: &Assistant,
    actor: &str,
    conversation: Option<&cogassist_core::ids::ConversationId>,
    message: &str,
) -> TurnResult {
    a.chat(&who(actor), conversation, &ModalityInput::text(message), Modality::Text)
        .unwrap_or_else(|e| panic!("chat by {actor}: {e}"))
}

//! Exhaustive group x permission x endpoint matrix for the seeded groups,
//! compared with the documented grant and route tables.

use std::sync::Arc;

use cogassist_core::acl::{GroupId, Permission, UserId};
use cogassist_core::gateway::{Access, ApiRequest, Gateway, ROUTES};
use cogassist_core::system::{Assistant, Setup};

use crate::common::*;
use crate::Outcome;

/// The documented route table.
fn documented_route(method: &str, pattern: &str) -> Option<Access> {
    use Permission::*;
    let p = match (method, pattern) {
        ("GET", "/health") | ("POST", "/login") => return Some(Access::Public),
        ("POST", "/logout") | ("POST", "/chat") => Chat,
        ("GET", "/conversations") | ("GET", "/conversations/{id}") | ("GET", "/conversations/{id}/export") => Chat,
        ("POST", "/tickets") => FlagAnswer,
        ("GET", "/tickets") | ("GET", "/tickets/{id}") => RewriteTicket,
        ("POST", "/tickets/{id}/revision") | ("POST", "/tickets/{id}/checks") => RewriteTicket,
        ("GET", "/tickets/export") | ("GET", "/tickets/{id}/events") => ReadAudit,
        ("POST", "/tickets/{id}/approve") | ("POST", "/tickets/{id}/reject") => ApproveTicket,
        ("GET", "/analytics") => ReadTicketAnalytics,
        ("GET", "/corpus") | ("GET", "/corpus/search") | ("GET", "/corpus/{id}") => Chat,
        ("POST", "/corpus") | ("POST", "/admin/policy") => ManageCorpus,
        ("GET", "/admin/users") | ("POST", "/admin/users") => ManageUsers,
        ("POST", "/admin/users/{id}/groups") | ("POST", "/admin/users/{id}/active") => ManageUsers,
        ("GET", "/admin/state") | ("GET", "/audit") | ("GET", "/audit/verify") => ReadAudit,
        _ => return None,
    };
    Some(Access::Requires(p))
}

const GROUP_MEMBER: [(&str, &str); 3] = [
    ("managerial", MANAGER),
    ("supervisor", SUPERVISOR),
    ("operator", OPERATOR),
];

pub fn run() -> Outcome {
    let mut setup = Setup::new(fixed_clock());
    setup.registry = staff_registry();
    let (a, _sink) = Assistant::in_memory(setup);
    let a = Arc::new(a);
    ingest_manuals(&a);
    let gw = Gateway::new(a.clone(), 3600, fixed_clock());
    let reg = a.registry();

    // Route table as documented.
    ensure!(ROUTES.len() == 29, "{} routes served, 29 documented", ROUTES.len());
    for r in ROUTES {
        let doc = documented_route(r.method, r.pattern);
        ensure!(
            doc == Some(r.access),
            "{} {}: served {:?}, documented {doc:?}",
            r.method,
            r.pattern,
            r.access
        );
    }

    // Seeded groups and levels.
    let groups: Vec<(String, u32)> = reg
        .groups()
        .map(|g| (g.group_id.as_str().to_string(), g.level))
        .collect();
    ensure!(
        groups.len() == 3 && groups.iter().all(|(g, _)| GROUP_MEMBER.iter().any(|(m, _)| m == g)),
        "seeded groups {groups:?}"
    );

    let mut cells = 0;
    for (group, member) in GROUP_MEMBER {
        let grants = documented_grants(group);
        // Group x permission.
        for p in Permission::ALL {
            let expected = grants.contains(&p);
            ensure!(
                reg.group_grants(&GroupId::new(group), p) == expected,
                "{group} grant of {p}: registry disagrees with the table"
            );
            let allowed = a.authorize(&who(member), p).is_ok();
            ensure!(
                allowed == expected,
                "{member} ({group}) {p}: allowed={allowed}, documented {expected}"
            );
            cells += 1;
        }
        // Group x endpoint (x the endpoint's permission).
        for r in ROUTES {
            let path = r.pattern.replace("{id}", "no-such-id");
            let session = gw
                .login(&UserId::new(member), &secret(member))
                .ok_or(format!("{member} cannot log in"))?;
            let mut req = ApiRequest::new(r.method, &path).bearer(&session.session_token);
            if r.method == "POST" {
                // Unparseable bodies: authorization is decided before any
                // body is read, and permitted calls change nothing.
                req.body = b"\x00".to_vec();
            }
            let status = gw.handle_request(req).status;
            match r.access {
                Access::Public => ensure!(
                    status != 401 && status != 403,
                    "{member} {} {path}: public route answered {status}",
                    r.method
                ),
                Access::Requires(p) => {
                    let expected_denied = !grants.contains(&p);
                    ensure!(
                        (status == 403) == expected_denied && status != 401,
                        "{member} ({group}) {} {path} needs {p}: status {status}, documented {}",
                        r.method,
                        if expected_denied { "deny" } else { "allow" }
                    );
                }
            }
            cells += 1;
        }
    }

    // Analytics belongs to the managerial level alone.
    let top = reg.max_level();
    for g in reg.groups() {
        let grants = reg.group_grants(&g.group_id, Permission::ReadTicketAnalytics);
        ensure!(
            grants == (g.level == top),
            "{} (level {}) analytics grant {grants}",
            g.group_id,
            g.level
        );
    }
    for (group, member) in GROUP_MEMBER {
        let session = gw.login(&UserId::new(member), &secret(member)).ok_or("login")?;
        let status = gw
            .handle_request(ApiRequest::new("GET", "/analytics").bearer(&session.session_token))
            .status;
        let expected = if group == "managerial" { 200 } else { 403 };
        ensure!(
            status == expected,
            "{group} GET /analytics: {status}, expected {expected}"
        );
    }
    // No session at all.
    for r in ROUTES.iter().filter(|r| r.access != Access::Public) {
        let status = gw
            .handle_request(ApiRequest::new(r.method, &r.pattern.replace("{id}", "x")))
            .status;
        ensure!(status == 401, "anonymous {} {}: {status}", r.method, r.pattern);
    }
    Ok(format!(
        "{cells} group x permission/endpoint cells match the documented tables, 0 deviations; \
         analytics only for level {top}"
    ))
}

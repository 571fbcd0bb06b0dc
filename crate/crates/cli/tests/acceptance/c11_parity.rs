//! The same administrative scenario once through the command line and once
//! over HTTP, against two fresh data directories. Results, exported state,
//! on-disk files and audit records must agree.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc};

use cogassist_cli::{router, run as cli_run};
use cogassist_core::config::Config;
use cogassist_core::gateway::Gateway;
use cogassist_core::system::Assistant;
use serde_json::{json, Value};

use crate::common::*;
use crate::Outcome;

const NEW_USER: &str = "erik.berg";

/// One step of the scenario, independent of the transport.
enum Op<'a> {
    Ingest {
        doc_id: &'a str,
        title: &'a str,
        file: &'a Path,
        kind: &'a str,
    },
    AddUser {
        id: &'a str,
        name: &'a str,
        group: &'a str,
    },
    Grant {
        id: &'a str,
        group: &'a str,
    },
    Chat {
        conv: Option<&'a str>,
        message: &'a str,
    },
    Flag {
        conv: &'a str,
        turn: u32,
        flag: &'a str,
    },
    Revise {
        ticket: &'a str,
        text: &'a str,
        target: Option<&'a str>,
    },
    Check {
        ticket: &'a str,
    },
    Approve {
        ticket: &'a str,
    },
    Reject {
        ticket: &'a str,
        reason: &'a str,
    },
    Deactivate {
        id: &'a str,
    },
    StateExport,
}

/// `Ok(result)` or `Err(error code)`.
type Reply = Result<Value, String>;

trait Driver {
    fn call(&mut self, actor: &str, op: Op<'_>) -> Reply;
}

struct CliDriver {
    config: PathBuf,
}

impl Driver for CliDriver {
    fn call(&mut self, actor: &str, op: Op<'_>) -> Reply {
        let mut args: Vec<String> = vec!["cogassist".into(), "--config".into(), self.config.display().to_string()];
        args.extend(["--json".into(), "--actor".into(), actor.into()]);
        let s = |x: &str| x.to_string();
        match op {
            Op::Ingest {
                doc_id,
                title,
                file,
                kind,
            } => args.extend([
                s("ingest"),
                file.display().to_string(),
                s("--doc-id"),
                s(doc_id),
                s("--title"),
                s(title),
                s("--kind"),
                s(kind),
            ]),
            Op::AddUser { id, name, group } => args.extend([
                s("user"),
                s("add"),
                s(id),
                s("--name"),
                s(name),
                s("--group"),
                s(group),
                s("--credential"),
                secret(id),
            ]),
            Op::Grant { id, group } => args.extend([s("user"), s("grant"), s(id), s(group)]),
            Op::Chat { conv, message } => {
                args.extend([s("chat"), s(message)]);
                if let Some(c) = conv {
                    args.extend([s("--conversation"), s(c)]);
                }
            }
            Op::Flag { conv, turn, flag } => args.extend([s("ticket"), s("flag"), s(conv), turn.to_string(), s(flag)]),
            Op::Revise { ticket, text, target } => {
                args.extend([s("ticket"), s("revise"), s(ticket), s("--text"), s(text)]);
                if let Some(t) = target {
                    args.extend([s("--target"), s(t)]);
                }
            }
            Op::Check { ticket } => args.extend([s("ticket"), s("check"), s(ticket), s("--accept-fact")]),
            Op::Approve { ticket } => args.extend([s("ticket"), s("approve"), s(ticket)]),
            Op::Reject { ticket, reason } => {
                args.extend([s("ticket"), s("reject"), s(ticket), s("--reason"), s(reason)])
            }
            Op::Deactivate { id } => args.extend([s("user"), s("deactivate"), s(id)]),
            Op::StateExport => args.extend([s("state"), s("export")]),
        }
        let (mut stdout, mut stderr) = (Vec::new(), Vec::new());
        let code = cli_run(args, &mut stdout, &mut stderr);
        let v: Value = serde_json::from_slice(&stdout).unwrap_or(Value::Null);
        match code {
            0 => Ok(v),
            1 => Err(v["error"]["code"].as_str().unwrap_or("?").to_string()),
            n => Err(format!("exit {n}: {}", String::from_utf8_lossy(&stderr))),
        }
    }
}

struct HttpDriver {
    base: String,
    client: reqwest::blocking::Client,
    tokens: BTreeMap<String, String>,
}

impl HttpDriver {
    fn send(&self, method: &str, path: &str, token: Option<&str>, body: Option<Value>) -> (u16, Value) {
        let url = format!("{}{path}", self.base);
        let mut req = match method {
            "GET" => self.client.get(url),
            _ => self.client.post(url),
        };
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        if let Some(b) = body {
            req = req.json(&b);
        }
        let resp = req.send().expect("server reachable");
        let status = resp.status().as_u16();
        (status, resp.json().unwrap_or(Value::Null))
    }

    fn token(&mut self, actor: &str) -> String {
        if let Some(t) = self.tokens.get(actor) {
            return t.clone();
        }
        let (status, v) = self.send(
            "POST",
            "/login",
            None,
            Some(json!({ "user_id": actor, "credential": secret(actor) })),
        );
        assert_eq!(status, 200, "login {actor}: {v}");
        let t = v["session"]["session_token"].as_str().expect("token").to_string();
        self.tokens.insert(actor.to_string(), t.clone());
        t
    }
}

impl Driver for HttpDriver {
    fn call(&mut self, actor: &str, op: Op<'_>) -> Reply {
        let token = self.token(actor);
        let (method, path, body) = match op {
            Op::Ingest {
                doc_id,
                title,
                file,
                kind,
            } => (
                "POST",
                "/corpus".to_string(),
                Some(json!({
                    "format": file.extension().and_then(|e| e.to_str()).unwrap_or(""),
                    "text": fs::read_to_string(file).expect("fixture"),
                    "doc_id": doc_id,
                    "title": title,
                    "source_uri": file.display().to_string(),
                    "doc_kind": kind,
                })),
            ),
            Op::AddUser { id, name, group } => (
                "POST",
                "/admin/users".into(),
                Some(json!({ "user_id": id, "display_name": name, "groups": [group], "credential": secret(id) })),
            ),
            Op::Grant { id, group } => (
                "POST",
                format!("/admin/users/{id}/groups"),
                Some(json!({ "group_id": group })),
            ),
            Op::Chat { conv, message } => {
                let mut b = json!({ "modality": "text", "payload": message });
                if let Some(c) = conv {
                    b["conversation_id"] = json!(c);
                }
                ("POST", "/chat".into(), Some(b))
            }
            Op::Flag { conv, turn, flag } => (
                "POST",
                "/tickets".into(),
                Some(json!({ "conversation_id": conv, "turn_index": turn, "flag": flag })),
            ),
            Op::Revise { ticket, text, target } => (
                "POST",
                format!("/tickets/{ticket}/revision"),
                Some(json!({ "revision": text, "target_doc_id": target })),
            ),
            Op::Check { ticket } => (
                "POST",
                format!("/tickets/{ticket}/checks"),
                Some(json!({ "accept_fact": true })),
            ),
            Op::Approve { ticket } => ("POST", format!("/tickets/{ticket}/approve"), None),
            Op::Reject { ticket, reason } => (
                "POST",
                format!("/tickets/{ticket}/reject"),
                Some(json!({ "reason": reason })),
            ),
            Op::Deactivate { id } => (
                "POST",
                format!("/admin/users/{id}/active"),
                Some(json!({ "active": false })),
            ),
            Op::StateExport => ("GET", "/admin/state".into(), None),
        };
        let (status, v) = self.send(method, &path, Some(&token), body);
        if status == 200 {
            Ok(v)
        } else {
            Err(v["error"]["code"].as_str().unwrap_or("?").to_string())
        }
    }
}

/// Runs the scenario and returns (step name, reply) per step.
fn scenario(d: &mut dyn Driver, fixtures: &Path) -> Result<Vec<(String, Reply)>, String> {
    let mut log: Vec<(String, Reply)> = Vec::new();
    let mut step = |log: &mut Vec<(String, Reply)>, name: &str, actor: &str, op: Op<'_>| {
        let r = d.call(actor, op);
        log.push((name.to_string(), r.clone()));
        r
    };
    let press = fixtures.join("press-line.txt");
    let paint = fixtures.join("paint-booth.md");
    step(
        &mut log,
        "ingest press",
        MANAGER,
        Op::Ingest {
            doc_id: "press-line",
            title: "Press line",
            file: &press,
            kind: "work_instruction",
        },
    )?;
    step(
        &mut log,
        "ingest paint",
        MANAGER,
        Op::Ingest {
            doc_id: "paint-booth",
            title: "Paint booth",
            file: &paint,
            kind: "best_practice",
        },
    )?;
    step(
        &mut log,
        "add user",
        MANAGER,
        Op::AddUser {
            id: NEW_USER,
            name: "Erik Berg",
            group: "operator",
        },
    )?;
    step(
        &mut log,
        "grant",
        MANAGER,
        Op::Grant {
            id: NEW_USER,
            group: "supervisor",
        },
    )?;
    let first = step(
        &mut log,
        "chat 1",
        OPERATOR,
        Op::Chat {
            conv: None,
            message: QUESTIONS[0],
        },
    )?;
    let conv = first["conversation_id"]
        .as_str()
        .ok_or("no conversation id")?
        .to_string();
    step(
        &mut log,
        "chat 2",
        OPERATOR,
        Op::Chat {
            conv: Some(&conv),
            message: QUESTIONS[1],
        },
    )?;
    let t1 = step(
        &mut log,
        "flag 1",
        OPERATOR,
        Op::Flag {
            conv: &conv,
            turn: 0,
            flag: "extend",
        },
    )?;
    let t1 = t1["ticket"]["ticket_id"].as_str().ok_or("no ticket id")?.to_string();
    step(
        &mut log,
        "revise",
        NEW_USER,
        Op::Revise {
            ticket: &t1,
            text: "Stop the hydraulic press and release the accumulator pressure before the die change.",
            target: Some("press-line"),
        },
    )?;
    step(&mut log, "check", MANAGER, Op::Check { ticket: &t1 })?;
    step(&mut log, "approve", MANAGER, Op::Approve { ticket: &t1 })?;
    let t2 = step(
        &mut log,
        "flag 2",
        OPERATOR,
        Op::Flag {
            conv: &conv,
            turn: 1,
            flag: "insufficient",
        },
    )?;
    let t2 = t2["ticket"]["ticket_id"].as_str().ok_or("no ticket id")?.to_string();
    step(
        &mut log,
        "reject",
        SUPERVISOR,
        Op::Reject {
            ticket: &t2,
            reason: "duplicate of an open request",
        },
    )?;
    step(&mut log, "deactivate", MANAGER, Op::Deactivate { id: NEW_USER })?;
    // Denied actions must be denied the same way on both sides.
    let _ = step(&mut log, "operator approve", OPERATOR, Op::Approve { ticket: &t2 });
    let _ = step(
        &mut log,
        "deactivated chat",
        NEW_USER,
        Op::Chat {
            conv: None,
            message: QUESTIONS[2],
        },
    );
    Ok(log)
}

/// Every file under `root` except the audit log and the write lock.
fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).expect("readable data dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                if rel != "audit.jsonl" && rel != ".write.lock" {
                    out.insert(rel, fs::read(&p).expect("readable file"));
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Audit records without hashes and without transport request ids.
fn audit_records(root: &Path) -> Vec<Value> {
    let text = fs::read_to_string(root.join("audit.jsonl")).expect("audit log");
    text.lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).expect("audit line");
            let m = v.as_object_mut().unwrap();
            m.remove("prev_hash");
            m.remove("this_hash");
            if let Some(d) = m.get_mut("detail").and_then(Value::as_object_mut) {
                d.remove("request_id");
            }
            v
        })
        .collect()
}

fn write_config(dir: &Path, data: &Path, registry: &Path) -> PathBuf {
    let path = dir.join("cogassist.toml");
    let text = format!(
        "data_dir = {:?}\nfixed_time = \"2026-03-02T08:00:00Z\"\nregistry = {:?}\n",
        data.display().to_string(),
        registry.display().to_string()
    );
    fs::write(&path, text).expect("config written");
    path
}

pub fn run() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fixtures = root.path().join("fixtures");
    fs::create_dir_all(&fixtures).map_err(|e| e.to_string())?;
    fs::write(fixtures.join("press-line.txt"), MANUALS[0].1).map_err(|e| e.to_string())?;
    fs::write(
        fixtures.join("paint-booth.md"),
        format!("# Paint booth\n\n{}\n", MANUALS[1].1),
    )
    .map_err(|e| e.to_string())?;
    let registry = fixtures.join("registry.toml");
    fs::write(&registry, staff_registry().to_toml()).map_err(|e| e.to_string())?;

    let cli_data = root.path().join("cli-data");
    let http_data = root.path().join("http-data");
    let cli_config = write_config(root.path(), &cli_data, &registry);
    let http_dir = root.path().join("http");
    fs::create_dir_all(&http_dir).map_err(|e| e.to_string())?;
    let http_config = write_config(&http_dir, &http_data, &registry);

    // Command line.
    let mut cli = CliDriver { config: cli_config };
    let cli_log = scenario(&mut cli, &fixtures).map_err(|e| format!("cli: {e}"))?;
    let cli_state = cli
        .call(MANAGER, Op::StateExport)
        .map_err(|e| format!("cli state export: {e}"))?;

    // HTTP.
    let cfg = Config::load(&http_config).map_err(|e| e.to_string())?;
    let assistant = Arc::new(Assistant::open(&cfg).map_err(|e| e.to_string())?);
    let gateway = Arc::new(Gateway::new(
        assistant,
        cfg.session_ttl_secs,
        cfg.clock().map_err(|e| e.to_string())?,
    ));
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().expect("runtime");
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.expect("bind");
            tx.send(listener.local_addr().expect("addr")).expect("send addr");
            axum::serve(listener, router(gateway)).await.expect("serve");
        });
    });
    let addr = rx.recv().map_err(|e| e.to_string())?;
    let mut http = HttpDriver {
        base: format!("http://{addr}"),
        client: reqwest::blocking::Client::new(),
        tokens: BTreeMap::new(),
    };
    let http_log = scenario(&mut http, &fixtures).map_err(|e| format!("http: {e}"))?;
    let http_state = http
        .call(MANAGER, Op::StateExport)
        .map_err(|e| format!("http state export: {e}"))?;

    // Step by step.
    ensure!(
        cli_log.len() == http_log.len(),
        "{} vs {} steps",
        cli_log.len(),
        http_log.len()
    );
    for ((name, c), (_, h)) in cli_log.iter().zip(&http_log) {
        ensure!(c == h, "step '{name}': cli {c:?}\nhttp {h:?}");
    }
    let denied: Vec<&str> = cli_log
        .iter()
        .filter(|(_, r)| r.is_err())
        .map(|(n, _)| n.as_str())
        .collect();
    ensure!(
        denied == ["operator approve", "deactivated chat"],
        "denied steps {denied:?}"
    );
    ensure!(
        cli_log
            .iter()
            .filter_map(|(_, r)| r.as_ref().err())
            .all(|c| c == "forbidden"),
        "denials were not 'forbidden': {cli_log:?}"
    );

    // Exported state, canonical bytes.
    let canon = |v: &Value| serde_json::to_vec(v).expect("json");
    let (cs, hs) = (canon(&cli_state), canon(&http_state));
    ensure!(cs == hs, "state exports differ ({} vs {} bytes)", cs.len(), hs.len());

    // On-disk files.
    let (cf, hf) = (files(&cli_data), files(&http_data));
    let names: Vec<&String> = cf.keys().collect();
    ensure!(
        names == hf.keys().collect::<Vec<_>>(),
        "file sets differ: {names:?} vs {:?}",
        hf.keys().collect::<Vec<_>>()
    );
    for (name, bytes) in &cf {
        ensure!(hf[name] == *bytes, "file {name} differs");
    }

    // Audit records, hashes and request ids aside.
    let (ca, ha) = (audit_records(&cli_data), audit_records(&http_data));
    ensure!(ca.len() == ha.len(), "{} vs {} audit records", ca.len(), ha.len());
    for (c, h) in ca.iter().zip(&ha) {
        ensure!(c == h, "audit records differ:\ncli  {c}\nhttp {h}");
    }
    Ok(format!(
        "{} steps, {}-byte state export, {} files and {} audit records identical over CLI and HTTP",
        cli_log.len(),
        cs.len(),
        cf.len(),
        ca.len()
    ))
}

//! Registered functions the agent may call for process calculations.
//!
//! Every tool is pure: equal arguments give equal results.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::ErrorKind;
use crate::numeric;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamType {
    Number,
    Series,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Param {
    pub name: &'static str,
    pub param_type: ParamType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ToolSpec {
    pub name: &'static str,
    pub description: &'static str,
    pub params: Vec<Param>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ToolError {
    #[error("unknown tool '{0}'")]
    UnknownTool(String),
    #[error("tool '{tool}' expects {expected} arguments, got {got}")]
    Arity { tool: String, expected: usize, got: usize },
    #[error("argument '{arg}' of tool '{tool}' must be a {expected}")]
    Type {
        tool: String,
        arg: String,
        expected: &'static str,
    },
    #[error("tool '{tool}' got an unexpected argument '{arg}'")]
    UnexpectedArgument { tool: String, arg: String },
    #[error("tool '{0}' needs a non-empty series")]
    EmptySeries(String),
    #[error("tool '{tool}': {reason}")]
    Domain { tool: String, reason: String },
}

impl ToolError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            ToolError::UnknownTool(_) => ErrorKind::NotFound,
            _ => ErrorKind::Validation,
        }
    }
}

/// Outcome of one executed call, as recorded on a dialog turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolOutcome {
    Ok(Value),
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool_name: String,
    pub arguments: Map<String, Value>,
    pub result: ToolOutcome,
}

type ToolFn = fn(&str, &[Arg]) -> Result<Value, ToolError>;

#[derive(Debug, Clone)]
enum Arg {
    Number(f64),
    Series(Vec<f64>),
}

impl Arg {
    fn number(&self) -> f64 {
        match self {
            Arg::Number(x) => *x,
            Arg::Series(_) => unreachable!("validated against the signature"),
        }
    }

    fn series(&self) -> &[f64] {
        match self {
            Arg::Series(v) => v,
            Arg::Number(_) => unreachable!("validated against the signature"),
        }
    }
}

struct Tool {
    spec: ToolSpec,
    run: ToolFn,
}

pub struct ToolRegistry {
    tools: BTreeMap<&'static str, Tool>,
}

fn series(name: &'static str) -> Param {
    Param {
        name,
        param_type: ParamType::Series,
    }
}

fn number(name: &'static str) -> Param {
    Param {
        name,
        param_type: ParamType::Number,
    }
}

fn non_empty<'a>(tool: &str, v: &'a [f64]) -> Result<&'a [f64], ToolError> {
    if v.is_empty() {
        Err(ToolError::EmptySeries(tool.to_string()))
    } else {
        Ok(v)
    }
}

fn finite(tool: &str, x: f64) -> Result<Value, ToolError> {
    serde_json::Number::from_f64(x)
        .map(Value::Number)
        .ok_or_else(|| ToolError::Domain {
            tool: tool.to_string(),
            reason: "result is not finite".into(),
        })
}

fn run_mean(t: &str, a: &[Arg]) -> Result<Value, ToolError> {
    finite(t, numeric::mean(non_empty(t, a[0].series())?).unwrap())
}

fn run_std_dev(t: &str, a: &[Arg]) -> Result<Value, ToolError> {
    finite(t, numeric::std_dev(non_empty(t, a[0].series())?).unwrap())
}

fn run_min_max(t: &str, a: &[Arg]) -> Result<Value, ToolError> {
    let (lo, hi) = numeric::min_max(non_empty(t, a[0].series())?).unwrap();
    Ok(json!({ "min": finite(t, lo)?, "max": finite(t, hi)? }))
}

fn run_setup_time_delta(t: &str, a: &[Arg]) -> Result<Value, ToolError> {
    let (delta, pct) = numeric::setup_time_delta(a[0].number(), a[1].number()).ok_or_else(|| ToolError::Domain {
        tool: t.to_string(),
        reason: "old_minutes must be non-zero".into(),
    })?;
    Ok(json!({ "delta_minutes": finite(t, delta)?, "percent_change": finite(t, pct)? }))
}

fn run_linear_trend(t: &str, a: &[Arg]) -> Result<Value, ToolError> {
    finite(t, numeric::linear_trend(non_empty(t, a[0].series())?).unwrap())
}

impl Default for ToolRegistry {
    fn default() -> Self {
        Self::standard()
    }
}

impl ToolRegistry {
    /// The shipped process-calculation tools.
    pub fn standard() -> Self {
        let mut tools = BTreeMap::new();
        let mut add = |name, description, params, run| {
            tools.insert(
                name,
                Tool {
                    spec: ToolSpec {
                        name,
                        description,
                        params,
                    },
                    run,
                },
            );
        };
        add(
            "mean",
            "Arithmetic mean of a series.",
            vec![series("values")],
            run_mean as ToolFn,
        );
        add(
            "std_dev",
            "Population standard deviation of a series.",
            vec![series("values")],
            run_std_dev,
        );
        add(
            "min_max",
            "Minimum and maximum of a series.",
            vec![series("values")],
            run_min_max,
        );
        add(
            "setup_time_delta",
            "Absolute and percent reduction from an old to a new setup time in minutes.",
            vec![number("old_minutes"), number("new_minutes")],
            run_setup_time_delta,
        );
        add(
            "linear_trend",
            "Least-squares slope of a series against its indices.",
            vec![series("series")],
            run_linear_trend,
        );
        Self { tools }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tools.contains_key(name)
    }

    /// Tool signatures in name order.
    pub fn specs(&self) -> Vec<ToolSpec> {
        self.tools.values().map(|t| t.spec.clone()).collect()
    }

    pub fn call(&self, name: &str, arguments: &Map<String, Value>) -> Result<Value, ToolError> {
        let tool = self
            .tools
            .get(name)
            .ok_or_else(|| ToolError::UnknownTool(name.to_string()))?;
        let params = &tool.spec.params;
        if let Some(extra) = arguments.keys().find(|k| !params.iter().any(|p| p.name == k.as_str())) {
            return Err(ToolError::UnexpectedArgument {
                tool: name.to_string(),
                arg: extra.clone(),
            });
        }
        if arguments.len() != params.len() {
            return Err(ToolError::Arity {
                tool: name.to_string(),
                expected: params.len(),
                got: arguments.len(),
            });
        }
        let mut args = Vec::with_capacity(params.len());
        for p in params {
            let v = &arguments[p.name];
            let type_err = |expected| ToolError::Type {
                tool: name.to_string(),
                arg: p.name.to_string(),
                expected,
            };
            args.push(match p.param_type {
                ParamType::Number => Arg::Number(v.as_f64().ok_or_else(|| type_err("number"))?),
                ParamType::Series => Arg::Series(
                    v.as_array()
                        .ok_or_else(|| type_err("list of numbers"))?
                        .iter()
                        .map(|x| x.as_f64().ok_or_else(|| type_err("list of numbers")))
                        .collect::<Result<_, _>>()?,
                ),
            });
        }
        (tool.run)(name, &args)
    }

    /// Executes a call and captures the outcome for the record.
    pub fn execute(&self, name: &str, arguments: Map<String, Value>) -> ToolCall {
        let result = match self.call(name, &arguments) {
            Ok(v) => ToolOutcome::Ok(v),
            Err(e) => ToolOutcome::Error(e.to_string()),
        };
        ToolCall {
            tool_name: name.to_string(),
            arguments,
            result,
        }
    }
}

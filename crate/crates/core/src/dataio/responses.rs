//! Line-delimited JSON response logs. Each line is either a session header
//! (`"kind": "session"`) or a trial (`"kind": "trial"`, the default).
//! Extra fields such as frame-timing telemetry are ignored. Lines that fail
//! to parse or break protocol invariants land in `rejects`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{read_bytes, write_bytes, DataError, Result, TrialResponse};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHeader {
    pub participant_id: String,
    #[serde(default)]
    pub manifest: Option<String>,
    #[serde(default)]
    pub started: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResponseLog {
    pub sessions: Vec<SessionHeader>,
    pub trials: Vec<TrialResponse>,
    pub rejects: Vec<Reject>,
}

/// Blank lines are skipped; every other line ends up parsed or rejected.
pub fn parse_response_log(text: &str) -> ResponseLog {
    let mut log = ResponseLog::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let reject = |reason: String| Reject {
            line: i + 1,
            reason,
            text: raw.to_string(),
        };
        let value: Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => {
                log.rejects.push(reject(format!("invalid JSON: {e}")));
                continue;
            }
        };
        let kind = value.get("kind").and_then(Value::as_str).unwrap_or("trial").to_string();
        match kind.as_str() {
            "session" => match serde_json::from_value::<SessionHeader>(value) {
                Ok(h) => log.sessions.push(h),
                Err(e) => log.rejects.push(reject(format!("bad session header: {e}"))),
            },
            "trial" => match serde_json::from_value::<TrialResponse>(value) {
                Ok(t) => match t.violation() {
                    None => log.trials.push(t),
                    Some(v) => log.rejects.push(reject(v)),
                },
                Err(e) => log.rejects.push(reject(format!("bad trial: {e}"))),
            },
            other => log.rejects.push(reject(format!("unknown record kind {other:?}"))),
        }
    }
    log
}

pub fn read_response_log(path: &Path) -> Result<ResponseLog> {
    let bytes = read_bytes(path)?;
    let text =
        String::from_utf8(bytes).map_err(|_| DataError::Malformed(format!("{} is not UTF-8", path.display())))?;
    Ok(parse_response_log(&text))
}

/// One trial record per line, with `"kind": "trial"`.
pub fn write_response_log(path: &Path, trials: &[TrialResponse]) -> Result<()> {
    let mut out = String::new();
    for t in trials {
        let mut v = serde_json::to_value(t).expect("trial serializes");
        v["kind"] = Value::from("trial");
        out.push_str(&v.to_string());
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

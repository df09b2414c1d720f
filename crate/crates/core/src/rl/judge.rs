//! Judges turn a completion into a [`JudgeScore`].
//!
//! The stub judge scores from the task verifier alone. The external judge
//! talks to a subprocess, one JSON object per line:
//!
//! ```text
//! request  {"id": 7, "prompt": "...", "completion": "...", "rubric": "..."}
//! reply    {"id": 7, "s_reason": 4, "s_answer": 5, "s_follow": 5, "s_overall": 92}
//! ```

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::reward::JudgeScore;
use crate::error::{Error, Result};
use crate::train::tasks::{BOS, EOS, EQ, FIRST_SYMBOL, PAD, PLUS, SEP};

/// What the task verifier knows about a completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdict {
    pub correct: bool,
    /// Exactly the answer followed by the terminator.
    pub well_formed: bool,
    /// Generation hit the token budget without a terminator.
    pub overlong: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub id: u64,
    pub prompt: String,
    pub completion: String,
    pub rubric: String,
}

pub trait Judge {
    fn score(&mut self, req: &JudgeRequest, verdict: &Verdict) -> Result<JudgeScore>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum JudgeConfig {
    Stub {},
    External {
        command: Vec<String>,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
        #[serde(default = "default_retries")]
        retries: u32,
    },
}

fn default_timeout() -> f64 {
    30.0
}

fn default_retries() -> u32 {
    2
}

impl Default for JudgeConfig {
    fn default() -> Self {
        JudgeConfig::Stub {}
    }
}

impl JudgeConfig {
    pub fn build(&self) -> Result<Box<dyn Judge + Send>> {
        Ok(match self {
            JudgeConfig::Stub {} => Box::new(StubJudge),
            JudgeConfig::External { command, timeout_secs, retries } => {
                if command.is_empty() {
                    return Err(Error::Config("external judge command is empty".into()));
                }
                Box::new(ExternalJudge::new(command.clone(), Duration::from_secs_f64(*timeout_secs), *retries))
            }
        })
    }
}

/// Renders token ids as text for judges and logs.
pub fn render(ids: &[usize]) -> String {
    ids.iter()
        .map(|&id| match id {
            PAD => "_".to_string(),
            BOS => "<s>".to_string(),
            SEP => "|".to_string(),
            EQ => "=".to_string(),
            PLUS => "+".to_string(),
            EOS => "</s>".to_string(),
            n => (n - FIRST_SYMBOL).to_string(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Deterministic scores from the verifier: a correct, well-formed answer
/// gets top marks; wrong answers get `s_answer = 1`.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubJudge;

impl Judge for StubJudge {
    fn score(&mut self, _req: &JudgeRequest, v: &Verdict) -> Result<JudgeScore> {
        let follow = if v.well_formed { 5.0 } else { 2.0 };
        let (reason, answer, overall) = match (v.correct, v.well_formed) {
            (true, true) => (5.0, 5.0, 100.0),
            (true, false) => (4.0, 5.0, 70.0),
            (false, _) => (2.0, 1.0, 10.0),
        };
        Ok(JudgeScore { s_reason: reason, s_answer: answer, s_follow: follow, s_overall: overall, overlong: v.overlong })
    }
}

#[derive(Debug, Deserialize)]
struct Reply {
    id: u64,
    s_reason: f64,
    s_answer: f64,
    s_follow: f64,
    s_overall: f64,
}

struct Process {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
}

impl Drop for Process {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Line-delimited JSON judge running as a child process. A request that
/// times out or draws a malformed reply is retried (restarting the process
/// after a timeout); when retries run out the call fails with
/// [`Error::Judge`].
pub struct ExternalJudge {
    command: Vec<String>,
    timeout: Duration,
    retries: u32,
    process: Option<Process>,
}

impl ExternalJudge {
    pub fn new(command: Vec<String>, timeout: Duration, retries: u32) -> Self {
        ExternalJudge { command, timeout, retries, process: None }
    }

    fn spawn(&self) -> Result<Process> {
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::Judge(format!("cannot start {:?}: {e}", self.command)))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Process { child, stdin, lines })
    }

    fn attempt(&mut self, req: &JudgeRequest) -> Result<JudgeScore> {
        if self.process.is_none() {
            self.process = Some(self.spawn()?);
        }
        let proc = self.process.as_mut().expect("spawned");
        let mut line = serde_json::to_string(req)?;
        line.push('\n');
        if let Err(e) = proc.stdin.write_all(line.as_bytes()).and_then(|_| proc.stdin.flush()) {
            self.process = None;
            return Err(Error::Judge(format!("write failed: {e}")));
        }
        let deadline = std::time::Instant::now() + self.timeout;
        loop {
            let left = deadline.saturating_duration_since(std::time::Instant::now());
            match proc.lines.recv_timeout(left) {
                Ok(text) => {
                    let reply: Reply = serde_json::from_str(&text).map_err(|e| Error::Judge(format!("malformed reply {text:?}: {e}")))?;
                    if reply.id != req.id {
                        // A late answer to an earlier request.
                        continue;
                    }
                    let score = JudgeScore {
                        s_reason: reply.s_reason,
                        s_answer: reply.s_answer,
                        s_follow: reply.s_follow,
                        s_overall: reply.s_overall,
                        overlong: false,
                    };
                    score.validate().map_err(|e| Error::Judge(format!("reply out of range: {e}")))?;
                    return Ok(score);
                }
                Err(RecvTimeoutError::Timeout) => {
                    self.process = None;
                    return Err(Error::Judge(format!("no reply within {:?}", self.timeout)));
                }
                Err(RecvTimeoutError::Disconnected) => {
                    self.process = None;
                    return Err(Error::Judge("judge process exited".into()));
                }
            }
        }
    }
}

impl Judge for ExternalJudge {
    fn score(&mut self, req: &JudgeRequest, v: &Verdict) -> Result<JudgeScore> {
        let mut last = None;
        for _ in 0..=self.retries {
            match self.attempt(req) {
                Ok(mut s) => {
                    s.overlong = v.overlong;
                    return Ok(s);
                }
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

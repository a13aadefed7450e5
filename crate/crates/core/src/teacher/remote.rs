use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::prompt::TeacherPrompt;
use super::TeacherError;

pub const ENDPOINT_ENV: &str = "REFINEVLA_TEACHER_ENDPOINT";
pub const TOKEN_ENV: &str = "REFINEVLA_TEACHER_TOKEN";

/// Connection settings for an HTTP teacher that answers `POST {prompt}` with `{text}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    #[serde(skip_serializing)]
    pub token: Option<String>,
    /// Total attempts per request, including the first.
    pub max_attempts: u32,
    pub request_timeout_ms: u64,
    /// Wall-clock cap across all attempts of one request.
    pub total_timeout_ms: u64,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    /// Upper bound on concurrent in-flight requests.
    pub concurrency: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            token: None,
            max_attempts: 3,
            request_timeout_ms: 30_000,
            total_timeout_ms: 120_000,
            backoff_base_ms: 200,
            backoff_max_ms: 5_000,
            concurrency: 4,
        }
    }
}

impl RemoteConfig {
    /// Fills endpoint and token from the environment where not already set.
    pub fn with_env(mut self) -> Self {
        if self.endpoint.is_empty() {
            if let Ok(e) = std::env::var(ENDPOINT_ENV) {
                self.endpoint = e;
            }
        }
        if self.token.is_none() {
            self.token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
        }
        self
    }

    pub fn validate(&self) -> Result<(), TeacherError> {
        if self.endpoint.is_empty() {
            return Err(TeacherError::Config(format!("no teacher endpoint (set {ENDPOINT_ENV})")));
        }
        if self.max_attempts == 0 || self.concurrency == 0 {
            return Err(TeacherError::Config("max_attempts and concurrency must be ≥ 1".into()));
        }
        Ok(())
    }

    fn backoff(&self, retry: u32) -> Duration {
        let ms = self
            .backoff_base_ms
            .saturating_mul(1u64 << retry.min(20))
            .min(self.backoff_max_ms);
        Duration::from_millis(ms)
    }
}

#[derive(Serialize)]
struct PromptBody<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct TextBody {
    text: String,
}

enum Attempt {
    Retry(TeacherError),
    Fatal(TeacherError),
}

/// Sends `prompt` to the teacher, retrying transport failures and 5xx/429
/// responses with exponential backoff.
pub fn annotate_remote(config: &RemoteConfig, prompt: &TeacherPrompt) -> Result<String, TeacherError> {
    config.validate()?;
    let agent = ureq::AgentBuilder::new()
        .timeout(Duration::from_millis(config.request_timeout_ms))
        .build();
    let started = Instant::now();
    let deadline = Duration::from_millis(config.total_timeout_ms);
    let mut last = None;
    let mut attempts = 0;
    while attempts < config.max_attempts {
        if attempts > 0 {
            let remaining = deadline.saturating_sub(started.elapsed());
            if remaining.is_zero() {
                break;
            }
            std::thread::sleep(config.backoff(attempts - 1).min(remaining));
        }
        attempts += 1;
        match attempt(&agent, config, prompt) {
            Ok(text) => return Ok(text),
            Err(Attempt::Fatal(e)) => return Err(e),
            Err(Attempt::Retry(e)) => {
                log::debug!("teacher attempt {attempts} failed: {e}");
                last = Some(e);
            }
        }
        if started.elapsed() >= deadline {
            break;
        }
    }
    Err(match last {
        Some(TeacherError::Remote { status, body, .. }) => TeacherError::Remote { status, attempts, body },
        Some(e) => TeacherError::Transport {
            attempts,
            message: e.to_string(),
        },
        None => TeacherError::Transport {
            attempts,
            message: "deadline exhausted before the first attempt".into(),
        },
    })
}

fn attempt(agent: &ureq::Agent, config: &RemoteConfig, prompt: &TeacherPrompt) -> Result<String, Attempt> {
    let mut req = agent.post(&config.endpoint).set("Content-Type", "application/json");
    if let Some(token) = &config.token {
        req = req.set("Authorization", &format!("Bearer {token}"));
    }
    match req.send_json(PromptBody { prompt: &prompt.text }) {
        Ok(resp) => resp
            .into_json::<TextBody>()
            .map(|b| b.text)
            .map_err(|e| Attempt::Fatal(TeacherError::Format(format!("teacher reply is not {{text}}: {e}")))),
        Err(ureq::Error::Status(status, resp)) => {
            let body = resp.into_string().unwrap_or_default();
            let err = TeacherError::Remote { status, attempts: 1, body };
            if status >= 500 || status == 429 {
                Err(Attempt::Retry(err))
            } else {
                Err(Attempt::Fatal(err))
            }
        }
        Err(ureq::Error::Transport(t)) => Err(Attempt::Retry(TeacherError::Transport {
            attempts: 1,
            message: t.to_string(),
        })),
    }
}

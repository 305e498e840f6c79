use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::server::{ErrorBody, MetaResponse, PredictRequest, PredictResponse};
use super::{Predictor, DEFAULT_MAX_BATCH, WIRE_SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ProbVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemoteConfig {
    /// Rows per HTTP request; larger batches are split transparently.
    pub max_batch: usize,
    /// Extra attempts after a transport failure.
    pub retries: usize,
    pub timeout_ms: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig { max_batch: DEFAULT_MAX_BATCH, retries: 2, timeout_ms: 30_000 }
    }
}

/// Client side of the wire protocol.
pub struct RemotePredictor {
    base: String,
    agent: ureq::Agent,
    cfg: RemoteConfig,
    classes: usize,
    input_dim: usize,
}

impl RemotePredictor {
    /// Connects and fetches `/meta`.
    pub fn connect(endpoint: &str, cfg: RemoteConfig) -> Result<Self> {
        if cfg.max_batch == 0 {
            return Err(Error::invalid("max_batch must be positive"));
        }
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_millis(cfg.timeout_ms)).build();
        let base = endpoint.trim_end_matches('/').to_string();
        let mut client = RemotePredictor { base, agent, cfg, classes: 0, input_dim: 0 };
        let meta: MetaResponse = serde_json::from_str(&client.send(|a, url| a.get(url).call(), "/meta")?)?;
        if meta.schema_version != WIRE_SCHEMA_VERSION {
            return Err(Error::Protocol {
                status: 200,
                message: format!("server speaks schema_version {}", meta.schema_version),
            });
        }
        client.classes = meta.classes;
        client.input_dim = meta.input_dim;
        Ok(client)
    }

    pub fn endpoint(&self) -> &str {
        &self.base
    }

    fn send<F>(&self, call: F, path: &str) -> Result<String>
    where
        F: Fn(&ureq::Agent, &str) -> std::result::Result<ureq::Response, ureq::Error>,
    {
        let url = format!("{}{}", self.base, path);
        let mut attempt = 0;
        loop {
            match call(&self.agent, &url) {
                Ok(resp) => return resp.into_string().map_err(Error::from),
                Err(ureq::Error::Status(status, resp)) => {
                    let body = resp.into_string().unwrap_or_default();
                    let message = serde_json::from_str::<ErrorBody>(&body).map(|b| b.error).unwrap_or(body);
                    return Err(Error::Protocol { status, message });
                }
                Err(ureq::Error::Transport(t)) => {
                    if attempt >= self.cfg.retries {
                        return Err(Error::Transport { message: format!("{url}: {t}"), retries: attempt });
                    }
                    attempt += 1;
                    log::warn!("transport failure on {url} (retry {attempt}/{}): {t}", self.cfg.retries);
                }
            }
        }
    }

    fn predict_chunk(&self, batch: &Matrix) -> Result<Vec<ProbVector>> {
        let body = crate::json::to_string(&PredictRequest { instances: batch.to_rows() })?;
        let text = self.send(
            |a, url| a.post(url).set("Content-Type", "application/json").send_string(&body),
            "/predict",
        )?;
        let resp: PredictResponse = serde_json::from_str(&text)?;
        if resp.probabilities.len() != batch.rows() {
            return Err(Error::Protocol {
                status: 200,
                message: format!("{} probability rows for {} instances", resp.probabilities.len(), batch.rows()),
            });
        }
        if let Some(p) = resp.probabilities.iter().find(|p| p.len() != self.classes) {
            return Err(Error::Protocol { status: 200, message: format!("row with {} classes", p.len()) });
        }
        Ok(resp.probabilities)
    }
}

impl Predictor for RemotePredictor {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn predict(&self, batch: &Matrix) -> Result<Vec<ProbVector>> {
        if batch.cols() != self.input_dim {
            return Err(Error::invalid(format!(
                "dimension mismatch: predictor expects {} inputs, got {}",
                self.input_dim,
                batch.cols()
            )));
        }
        let mut out = Vec::with_capacity(batch.rows());
        let rows: Vec<usize> = (0..batch.rows()).collect();
        for chunk in rows.chunks(self.cfg.max_batch) {
            out.extend(self.predict_chunk(&batch.select_rows(chunk))?);
        }
        Ok(out)
    }

    fn describe(&self) -> String {
        format!("remote:{}", self.base)
    }
}

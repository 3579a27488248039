use std::time::Duration;

use fabric_core::gateway::{BatchReport, Record, SubmitOutcome};
use fabric_core::sim::{BatchBundle, EndpointError, IngestEndpoint};
use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::Deserialize;

/// Ingest endpoint reached over HTTP.
pub struct HttpEndpoint {
    base_url: String,
    token: String,
    client: Client,
}

#[derive(Deserialize)]
struct ErrorBody {
    error: ErrorDetail,
}

#[derive(Deserialize)]
struct ErrorDetail {
    code: String,
    message: String,
}

impl HttpEndpoint {
    pub fn new(base_url: &str, token: &str) -> Result<Self, EndpointError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| EndpointError::Transport(e.to_string()))?;
        Ok(HttpEndpoint {
            base_url: base_url.trim_end_matches('/').to_string(),
            token: token.to_string(),
            client,
        })
    }

    fn read<T: DeserializeOwned>(response: Response, ok: &[StatusCode]) -> Result<T, EndpointError> {
        let status = response.status();
        let bytes = response.bytes().map_err(|e| EndpointError::Transport(e.to_string()))?;
        if ok.contains(&status) {
            return serde_json::from_slice(&bytes)
                .map_err(|e| EndpointError::Transport(format!("unexpected {status} body: {e}")));
        }
        match serde_json::from_slice::<ErrorBody>(&bytes) {
            Ok(b) => Err(EndpointError::Refused {
                code: b.error.code,
                message: b.error.message,
            }),
            Err(_) => Err(EndpointError::Transport(format!(
                "{status}: {}",
                String::from_utf8_lossy(&bytes)
            ))),
        }
    }
}

impl IngestEndpoint for HttpEndpoint {
    fn submit_record(&self, record: &Record) -> Result<SubmitOutcome, EndpointError> {
        let body = serde_json::to_vec(record).map_err(|e| EndpointError::Transport(e.to_string()))?;
        let response = self
            .client
            .post(format!("{}/api/v1/records", self.base_url))
            .bearer_auth(&self.token)
            .header("content-type", "application/json")
            .body(body)
            .send()
            .map_err(|e| EndpointError::Transport(e.to_string()))?;
        Self::read(
            response,
            &[StatusCode::CREATED, StatusCode::OK, StatusCode::UNPROCESSABLE_ENTITY],
        )
    }

    fn submit_batch(&self, bundle: &BatchBundle) -> Result<BatchReport, EndpointError> {
        let response = self
            .client
            .post(format!("{}/api/v1/batches", self.base_url))
            .bearer_auth(&self.token)
            .header("content-type", "application/x-tar")
            .body(bundle.to_tar())
            .send()
            .map_err(|e| EndpointError::Transport(e.to_string()))?;
        Self::read(response, &[StatusCode::OK])
    }
}

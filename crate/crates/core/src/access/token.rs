//! Compact HMAC-SHA256 bearer tokens: `base64url(header).base64url(claims).base64url(mac)`.
//!
//! Claims: `{"sub": ..., "exp": unix seconds, "scopes": [{"environment": ..., "study": ...}]}`.

use std::collections::BTreeSet;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use crate::time::Timestamp;

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scope {
    pub environment: String,
    pub study: String,
}

impl Scope {
    pub fn new(environment: &str, study: &str) -> Self {
        Scope {
            environment: environment.to_string(),
            study: study.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Claims {
    pub sub: String,
    pub exp: i64,
    pub scopes: Vec<Scope>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    alg: String,
    typ: String,
}

/// A verified, unexpired token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessToken {
    pub subject: String,
    pub scopes: BTreeSet<Scope>,
    pub expires_at: Timestamp,
}

impl AccessToken {
    /// Both the environment and the study must be granted by one scope.
    pub fn covers(&self, environment: &str, study: &str) -> bool {
        self.scopes
            .iter()
            .any(|s| s.environment == environment && s.study == study)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TokenError {
    #[error("MALFORMED: {0}")]
    Malformed(String),
    #[error("INVALID_SIGNATURE: token signature does not verify")]
    InvalidSignature,
    #[error("EXPIRED: token expired at {0}")]
    Expired(Timestamp),
}

impl TokenError {
    pub fn code(&self) -> &'static str {
        match self {
            TokenError::Malformed(_) => "MALFORMED",
            TokenError::InvalidSignature => "INVALID_SIGNATURE",
            TokenError::Expired(_) => "EXPIRED",
        }
    }
}

fn mac(key: &[u8], signing_input: &[u8]) -> HmacSha256 {
    let mut mac = HmacSha256::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(signing_input);
    mac
}

/// Signs `claims` with `key`. Used for fixtures and the operator CLI; real
/// deployments receive tokens from an external identity provider.
pub fn issue_token(claims: &Claims, key: &[u8]) -> String {
    let header = Header {
        alg: "HS256".into(),
        typ: "JWT".into(),
    };
    let encode = |v: &[u8]| URL_SAFE_NO_PAD.encode(v);
    let signing_input = format!(
        "{}.{}",
        encode(&serde_json::to_vec(&header).expect("header serializes")),
        encode(&serde_json::to_vec(claims).expect("claims serialize"))
    );
    let signature = mac(key, signing_input.as_bytes()).finalize().into_bytes();
    format!("{signing_input}.{}", encode(&signature))
}

/// Checks structure, signature and expiry, in that order.
pub fn verify_token(token: &str, key: &[u8], now: Timestamp) -> Result<AccessToken, TokenError> {
    let malformed = |m: &str| TokenError::Malformed(m.to_string());
    let mut parts = token.trim().split('.');
    let (Some(header), Some(claims), Some(signature), None) = (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(malformed("expected three dot-separated segments"));
    };
    let decode = |s: &str, what: &str| {
        URL_SAFE_NO_PAD
            .decode(s)
            .map_err(|_| malformed(&format!("{what} is not base64url")))
    };
    let header_bytes = decode(header, "header")?;
    let claims_bytes = decode(claims, "claims")?;
    let signature = decode(signature, "signature")?;
    let header: Header = serde_json::from_slice(&header_bytes).map_err(|_| malformed("header is not valid JSON"))?;
    if header.alg != "HS256" {
        return Err(malformed(&format!("unsupported alg `{}`", header.alg)));
    }
    let (signing_input, _) = token.trim().rsplit_once('.').expect("three segments");
    mac(key, signing_input.as_bytes())
        .verify_slice(&signature)
        .map_err(|_| TokenError::InvalidSignature)?;
    let claims: Claims = serde_json::from_slice(&claims_bytes).map_err(|_| malformed("claims are not valid"))?;
    let expires_at = Timestamp::from_unix_seconds(claims.exp).ok_or_else(|| malformed("exp out of range"))?;
    if now >= expires_at {
        return Err(TokenError::Expired(expires_at));
    }
    Ok(AccessToken {
        subject: claims.sub,
        scopes: claims.scopes.into_iter().collect(),
        expires_at,
    })
}

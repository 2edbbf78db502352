//! Identifier normalisation and HMAC-SHA256 pseudonymous case tokens.
//!
//! A clinic never sends a patient identifier off-node. Instead it derives
//! `hex(HMAC-SHA256(key, UPPER(TRIM(id))))` with a node-local secret and
//! sends that token; the insurer can match it against its enrolment table
//! but cannot invert it.

use std::fmt;
use std::path::PathBuf;

use hmac::{Hmac, KeyInit, Mac};
use sha2::Sha256;
use thiserror::Error;

type HmacSha256 = Hmac<Sha256>;

/// Shortest key material accepted for token derivation.
pub const MIN_KEY_LEN: usize = 16;

/// Prefix for secrets resolved from the process environment.
pub const SECRET_ENV_PREFIX: &str = "FEDMESH_SECRET_";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PseudonymError {
    #[error("identifier is empty after trimming")]
    InvalidIdentifier,
    #[error("secret `{0}` not found")]
    SecretNotFound(String),
    #[error("secret `{name}` is too short ({len} bytes, need at least {MIN_KEY_LEN})")]
    WeakSecret { name: String, len: usize },
    #[error("secret `{name}` could not be read: {reason}")]
    SecretUnreadable { name: String, reason: String },
    #[error("malformed case token (expected 64 lowercase hex characters)")]
    MalformedToken,
}

/// A patient identifier in canonical form: trimmed and uppercased.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CanonicalId(String);

impl CanonicalId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CanonicalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Trims and uppercases a raw identifier. Idempotent.
pub fn normalize_id(raw: &str) -> Result<CanonicalId, PseudonymError> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(PseudonymError::InvalidIdentifier);
    }
    Ok(CanonicalId(trimmed.to_uppercase()))
}

/// HMAC key material with a label. The material is never printed.
#[derive(Clone)]
pub struct SecretKey {
    name: String,
    material: Vec<u8>,
}

impl SecretKey {
    pub fn new(name: impl Into<String>, material: impl Into<Vec<u8>>) -> Result<Self, PseudonymError> {
        let name = name.into();
        let material = material.into();
        if material.len() < MIN_KEY_LEN {
            return Err(PseudonymError::WeakSecret {
                name,
                len: material.len(),
            });
        }
        Ok(Self { name, material })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub(crate) fn material(&self) -> &[u8] {
        &self.material
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SecretKey")
            .field("name", &self.name)
            .field("material", &"<redacted>")
            .finish()
    }
}

/// 64-character lowercase hex pseudonym.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CaseToken(String);

impl CaseToken {
    /// Accepts only the canonical rendering; uppercase hex is rejected.
    pub fn parse(text: &str) -> Result<Self, PseudonymError> {
        let ok = text.len() == 64 && text.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'));
        if ok {
            Ok(Self(text.to_owned()))
        } else {
            Err(PseudonymError::MalformedToken)
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CaseToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn derive_token(key: &SecretKey, id: &CanonicalId) -> CaseToken {
    let mut mac = HmacSha256::new_from_slice(key.material()).expect("HMAC accepts keys of any length");
    mac.update(id.as_str().as_bytes());
    CaseToken(hex::encode(mac.finalize().into_bytes()))
}

/// Where a node looks up a named secret.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SecretSource {
    /// `FEDMESH_SECRET_<NAME>` in the process environment.
    Env,
    /// An explicitly named environment variable.
    EnvVar(String),
    /// A local key file; one trailing newline is stripped.
    KeyFile(PathBuf),
    /// The first source that yields the secret wins.
    Chain(Vec<SecretSource>),
}

/// Environment variable consulted by [`SecretSource::Env`] for `name`.
pub fn secret_env_var(name: &str) -> String {
    let suffix: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_uppercase()
            } else {
                '_'
            }
        })
        .collect();
    format!("{SECRET_ENV_PREFIX}{suffix}")
}

pub fn load_secret(name: &str, source: &SecretSource) -> Result<SecretKey, PseudonymError> {
    let material = resolve(name, source)?.ok_or_else(|| PseudonymError::SecretNotFound(name.to_owned()))?;
    SecretKey::new(name, material)
}

fn resolve(name: &str, source: &SecretSource) -> Result<Option<Vec<u8>>, PseudonymError> {
    match source {
        SecretSource::Env => Ok(read_env(&secret_env_var(name))),
        SecretSource::EnvVar(var) => Ok(read_env(var)),
        SecretSource::KeyFile(path) => match std::fs::read(path) {
            Ok(mut bytes) => {
                if bytes.ends_with(b"\n") {
                    bytes.pop();
                    if bytes.ends_with(b"\r") {
                        bytes.pop();
                    }
                }
                Ok(Some(bytes))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(PseudonymError::SecretUnreadable {
                name: name.to_owned(),
                reason: e.kind().to_string(),
            }),
        },
        SecretSource::Chain(sources) => {
            for s in sources {
                if let Some(found) = resolve(name, s)? {
                    return Ok(Some(found));
                }
            }
            Ok(None)
        }
    }
}

fn read_env(var: &str) -> Option<Vec<u8>> {
    std::env::var_os(var).map(|v| v.into_encoded_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE_KEY: &[u8] = b"demo-secret-key-000";
    // Computed with Python's hmac/hashlib before this module existed.
    const T1: &str = "e5aa44dc52f67331c3022c00653efaf0e5a307dc0a2df5bae51efc198d7d35bf";

    fn key() -> SecretKey {
        SecretKey::new("clinic_hmac_key", FIXTURE_KEY).unwrap()
    }

    #[test]
    fn normalize_trims_and_uppercases() {
        assert_eq!(normalize_id(" cln-0001 ").unwrap().as_str(), "CLN-0001");
        assert_eq!(normalize_id("CLN-0001").unwrap().as_str(), "CLN-0001");
        assert_eq!(normalize_id("   "), Err(PseudonymError::InvalidIdentifier));
        assert_eq!(normalize_id(""), Err(PseudonymError::InvalidIdentifier));
    }

    #[test]
    fn golden_token() {
        let id = normalize_id("CLN-0001").unwrap();
        assert_eq!(derive_token(&key(), &id).as_str(), T1);
        assert_eq!(derive_token(&key(), &id), derive_token(&key(), &id));
        assert_eq!(derive_token(&key(), &normalize_id(" cln-0001 ").unwrap()).as_str(), T1);
    }

    #[test]
    fn token_parse_is_strict() {
        assert!(CaseToken::parse(T1).is_ok());
        assert_eq!(
            CaseToken::parse(&T1.to_uppercase()),
            Err(PseudonymError::MalformedToken)
        );
        assert_eq!(CaseToken::parse(&T1[1..]), Err(PseudonymError::MalformedToken));
    }

    #[test]
    fn weak_and_missing_secrets() {
        assert_eq!(
            SecretKey::new("k", b"8bytes!!".to_vec()).unwrap_err(),
            PseudonymError::WeakSecret {
                name: "k".into(),
                len: 8
            }
        );
        let missing = SecretSource::EnvVar("FEDMESH_TEST_SURELY_UNSET_VAR".into());
        assert_eq!(
            load_secret("nope", &missing).unwrap_err(),
            PseudonymError::SecretNotFound("nope".into())
        );
    }

    #[test]
    fn env_secret_lookup() {
        // Unique name so parallel tests never race on it.
        let var = secret_env_var("pseudonym_unit_env_key");
        assert_eq!(var, "FEDMESH_SECRET_PSEUDONYM_UNIT_ENV_KEY");
        unsafe { std::env::set_var(&var, "demo-secret-key-000") };
        let k = load_secret("pseudonym_unit_env_key", &SecretSource::Env).unwrap();
        assert_eq!(k.material(), FIXTURE_KEY);
        unsafe { std::env::set_var(&var, "short") };
        assert!(matches!(
            load_secret("pseudonym_unit_env_key", &SecretSource::Env),
            Err(PseudonymError::WeakSecret { len: 5, .. })
        ));
        unsafe { std::env::remove_var(&var) };
    }

    #[test]
    fn key_file_and_chain() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k");
        std::fs::write(&path, "demo-secret-key-000\r\n").unwrap();
        let chain = SecretSource::Chain(vec![
            SecretSource::EnvVar("FEDMESH_TEST_SURELY_UNSET_VAR".into()),
            SecretSource::KeyFile(dir.path().join("absent")),
            SecretSource::KeyFile(path),
        ]);
        let k = load_secret("clinic_hmac_key", &chain).unwrap();
        assert_eq!(k.material(), FIXTURE_KEY);
    }

    #[test]
    fn debug_never_shows_material() {
        let rendered = format!("{:?}", key());
        assert!(!rendered.contains("demo-secret"));
        let err = PseudonymError::WeakSecret {
            name: "k".into(),
            len: 3,
        };
        assert!(!err.to_string().contains("demo"));
    }
}

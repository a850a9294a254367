//! Access levels, principals and credential verification.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Capability tier. Ordered `Participant < Supervisor < Admin`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessLevel {
    Participant,
    Supervisor,
    Admin,
}

impl AccessLevel {
    pub const ALL: [AccessLevel; 3] = [AccessLevel::Participant, AccessLevel::Supervisor, AccessLevel::Admin];

    pub fn as_str(self) -> &'static str {
        match self {
            AccessLevel::Participant => "participant",
            AccessLevel::Supervisor => "supervisor",
            AccessLevel::Admin => "admin",
        }
    }
}

impl fmt::Display for AccessLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AccessLevel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "participant" => Ok(AccessLevel::Participant),
            "supervisor" => Ok(AccessLevel::Supervisor),
            "admin" => Ok(AccessLevel::Admin),
            other => Err(format!("unknown access level `{other}`")),
        }
    }
}

/// An authenticated actor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Principal {
    pub id: String,
    pub level: AccessLevel,
}

impl Principal {
    pub fn new(id: impl Into<String>, level: AccessLevel) -> Self {
        Principal { id: id.into(), level }
    }

    /// The server itself, used as actor for automatic actions such as the
    /// deadline sweep.
    pub fn system() -> Self {
        Principal::new("system", AccessLevel::Admin)
    }

    pub fn at_least(&self, level: AccessLevel) -> bool {
        self.level >= level
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{principal} has access level {actual}, {required} required")]
pub struct AccessDenied {
    pub principal: String,
    pub actual: AccessLevel,
    pub required: AccessLevel,
}

pub fn require(principal: &Principal, level: AccessLevel) -> Result<(), AccessDenied> {
    if principal.at_least(level) {
        Ok(())
    } else {
        Err(AccessDenied {
            principal: principal.id.clone(),
            actual: principal.level,
            required: level,
        })
    }
}

/// A salted credential hash in the form `sha256$<salt>$<hex digest>`, where the
/// digest is SHA-256 over `salt ‖ 0x00 ‖ credential`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CredentialHash {
    salt: String,
    digest: [u8; 32],
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("malformed credential hash: {0}")]
pub struct MalformedHash(pub String);

impl CredentialHash {
    pub fn create(salt: &str, credential: &str) -> Self {
        CredentialHash {
            salt: salt.to_owned(),
            digest: digest(salt, credential),
        }
    }

    pub fn verify(&self, credential: &str) -> bool {
        let candidate = digest(&self.salt, credential);
        // constant-time comparison
        candidate
            .iter()
            .zip(self.digest.iter())
            .fold(0u8, |acc, (a, b)| acc | (a ^ b))
            == 0
    }
}

fn digest(salt: &str, credential: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(salt.as_bytes());
    hasher.update([0u8]);
    hasher.update(credential.as_bytes());
    hasher.finalize().into()
}

impl FromStr for CredentialHash {
    type Err = MalformedHash;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.splitn(3, '$');
        let (Some("sha256"), Some(salt), Some(hex_digest)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(MalformedHash("expected `sha256$<salt>$<hex>`".into()));
        };
        if salt.is_empty() {
            return Err(MalformedHash("empty salt".into()));
        }
        let bytes = hex::decode(hex_digest).map_err(|e| MalformedHash(e.to_string()))?;
        let digest: [u8; 32] = bytes
            .try_into()
            .map_err(|_| MalformedHash("digest must be 32 bytes".into()))?;
        Ok(CredentialHash {
            salt: salt.to_owned(),
            digest,
        })
    }
}

impl TryFrom<String> for CredentialHash {
    type Error = MalformedHash;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<CredentialHash> for String {
    fn from(value: CredentialHash) -> String {
        value.to_string()
    }
}

impl fmt::Display for CredentialHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sha256${}${}", self.salt, hex::encode(self.digest))
    }
}

/// Host-side directory of staff credentials. Levels come from each exam's
/// `role_grants`; this only answers "is this the person they claim to be".
///
/// Lives outside the exam repository (loaded from the path in
/// `EXAMKIT_STAFF_FILE`), a TOML table of `principal = "sha256$..."`.
#[derive(Debug, Clone, Default)]
pub struct StaffDirectory {
    entries: BTreeMap<String, CredentialHash>,
}

impl StaffDirectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, principal: impl Into<String>, hash: CredentialHash) {
        self.entries.insert(principal.into(), hash);
    }

    pub fn with(mut self, principal: &str, credential: &str) -> Self {
        self.insert(principal, CredentialHash::create(principal, credential));
        self
    }

    pub fn verify(&self, principal: &str, credential: &str) -> bool {
        self.entries.get(principal).is_some_and(|hash| hash.verify(credential))
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        let entries: BTreeMap<String, CredentialHash> = toml::from_str(text).map_err(|e| e.to_string())?;
        Ok(StaffDirectory { entries })
    }

    pub fn from_env() -> Result<Self, String> {
        match std::env::var("EXAMKIT_STAFF_FILE") {
            Ok(path) => {
                let text = std::fs::read_to_string(&path).map_err(|e| format!("{path}: {e}"))?;
                Self::from_toml(&text)
            }
            Err(_) => Ok(Self::default()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn levels_are_totally_ordered() {
        assert!(AccessLevel::Participant < AccessLevel::Supervisor);
        assert!(AccessLevel::Supervisor < AccessLevel::Admin);
        let admin = Principal::new("a", AccessLevel::Admin);
        assert!(admin.at_least(AccessLevel::Supervisor));
        let p = Principal::new("p", AccessLevel::Participant);
        assert!(require(&p, AccessLevel::Supervisor).is_err());
    }

    #[test]
    fn credential_hash_round_trip_and_verify() {
        let hash = CredentialHash::create("s1", "secret");
        let text = hash.to_string();
        assert!(text.starts_with("sha256$s1$"));
        let parsed: CredentialHash = text.parse().unwrap();
        assert!(parsed.verify("secret"));
        assert!(!parsed.verify("Secret"));
        assert!("md5$x$00".parse::<CredentialHash>().is_err());
        assert!("sha256$x$zz".parse::<CredentialHash>().is_err());
    }

    #[test]
    fn staff_directory_from_toml() {
        let hash = CredentialHash::create("alice", "pw");
        let dir = StaffDirectory::from_toml(&format!("alice = \"{hash}\"")).unwrap();
        assert!(dir.verify("alice", "pw"));
        assert!(!dir.verify("alice", "nope"));
        assert!(!dir.verify("bob", "pw"));
    }
}

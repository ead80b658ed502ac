//! Proofs that a hop's pair of conditions is XOR-chained correctly.
//!
//! A statement `(y_next, y_this, x_this)` is true when some witness `w`
//! satisfies `hash(w) == y_next` and `hash(w ^ x_this) == y_this`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::primitives::{hash, Digest, Preimage, LAMBDA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Statement {
    pub y_next: Digest,
    pub y_this: Digest,
    pub x_this: Preimage,
}

impl Statement {
    /// `y_next ‖ y_this ‖ x_this`.
    pub fn to_bytes(&self) -> [u8; 3 * LAMBDA] {
        let mut out = [0u8; 3 * LAMBDA];
        out[..LAMBDA].copy_from_slice(&self.y_next.0);
        out[LAMBDA..2 * LAMBDA].copy_from_slice(&self.y_this.0);
        out[2 * LAMBDA..].copy_from_slice(&self.x_this.0);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Option<Statement> {
        if b.len() != 3 * LAMBDA {
            return None;
        }
        Some(Statement {
            y_next: Digest::from_slice(&b[..LAMBDA]).ok()?,
            y_this: Digest::from_slice(&b[LAMBDA..2 * LAMBDA]).ok()?,
            x_this: Preimage::from_slice(&b[2 * LAMBDA..]).ok()?,
        })
    }

    pub fn satisfied_by(&self, w: &Preimage) -> bool {
        hash(&w.0) == self.y_next && hash(&w.xor(&self.x_this).0) == self.y_this
    }
}

/// Backend tag plus opaque payload.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Proof {
    pub backend: u8,
    pub payload: Vec<u8>,
}

impl Proof {
    /// Tag byte, big-endian u32 length, payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + self.payload.len());
        out.push(self.backend);
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Option<Proof> {
        let (&backend, rest) = b.split_first()?;
        if rest.len() < 4 {
            return None;
        }
        let len = u32::from_be_bytes(rest[..4].try_into().ok()?) as usize;
        let payload = rest.get(4..)?;
        if payload.len() != len {
            return None;
        }
        Some(Proof {
            backend,
            payload: payload.to_vec(),
        })
    }
}

impl Serialize for Proof {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.to_bytes()))
    }
}

impl<'de> Deserialize<'de> for Proof {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(s).map_err(serde::de::Error::custom)?;
        Proof::from_bytes(&bytes).ok_or_else(|| serde::de::Error::custom("malformed proof"))
    }
}

pub trait ProofSystem {
    fn tag(&self) -> u8;
    fn prove(&self, statement: &Statement, witness: &Preimage) -> Proof;
    fn verify(&self, statement: &Statement, proof: &Proof) -> bool;

    /// Verifies serialized proof bytes; malformed input is rejected.
    fn verify_bytes(&self, statement: &Statement, bytes: &[u8]) -> bool {
        Proof::from_bytes(bytes).is_some_and(|p| self.verify(statement, &p))
    }
}

/// The proof is the witness itself. Sound and complete, not zero-knowledge.
#[derive(Debug, Clone, Copy, Default)]
pub struct Revealing;

impl ProofSystem for Revealing {
    fn tag(&self) -> u8 {
        1
    }

    fn prove(&self, _statement: &Statement, witness: &Preimage) -> Proof {
        Proof {
            backend: self.tag(),
            payload: witness.0.to_vec(),
        }
    }

    fn verify(&self, statement: &Statement, proof: &Proof) -> bool {
        proof.backend == self.tag()
            && Preimage::from_slice(&proof.payload).is_ok_and(|w| statement.satisfied_by(&w))
    }
}

/// A trusted registry shared by every party of one simulation. Proving a true
/// statement records it under an opaque handle; verification looks the
/// handle up. Witnesses never leave the prover.
#[derive(Debug, Clone, Default)]
pub struct OracleRegistry {
    inner: Arc<Mutex<HashMap<[u8; 3 * LAMBDA], Digest>>>,
}

impl OracleRegistry {
    pub fn new() -> Self {
        OracleRegistry::default()
    }

    fn handle(statement: &Statement, valid: bool) -> Digest {
        let mut buf = b"oracle-proof".to_vec();
        buf.extend_from_slice(&statement.to_bytes());
        buf.push(valid as u8);
        hash(&buf)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("registry lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ProofSystem for OracleRegistry {
    fn tag(&self) -> u8 {
        2
    }

    fn prove(&self, statement: &Statement, witness: &Preimage) -> Proof {
        let valid = statement.satisfied_by(witness);
        let handle = Self::handle(statement, valid);
        if valid {
            self.inner
                .lock()
                .expect("registry lock")
                .insert(statement.to_bytes(), handle);
        }
        Proof {
            backend: self.tag(),
            payload: handle.0.to_vec(),
        }
    }

    fn verify(&self, statement: &Statement, proof: &Proof) -> bool {
        if proof.backend != self.tag() {
            return false;
        }
        let reg = self.inner.lock().expect("registry lock");
        reg.get(&statement.to_bytes())
            .is_some_and(|h| h.0.as_slice() == proof.payload.as_slice())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProofBackendKind {
    #[default]
    Revealing,
    Oracle,
}

/// Runtime-selected proof system.
#[derive(Debug, Clone)]
pub enum ProofBackend {
    Revealing(Revealing),
    Oracle(OracleRegistry),
}

impl ProofBackend {
    pub fn new(kind: ProofBackendKind) -> Self {
        match kind {
            ProofBackendKind::Revealing => ProofBackend::Revealing(Revealing),
            ProofBackendKind::Oracle => ProofBackend::Oracle(OracleRegistry::new()),
        }
    }

    pub fn kind(&self) -> ProofBackendKind {
        match self {
            ProofBackend::Revealing(_) => ProofBackendKind::Revealing,
            ProofBackend::Oracle(_) => ProofBackendKind::Oracle,
        }
    }
}

impl Default for ProofBackend {
    fn default() -> Self {
        ProofBackend::Revealing(Revealing)
    }
}

impl ProofSystem for ProofBackend {
    fn tag(&self) -> u8 {
        match self {
            ProofBackend::Revealing(r) => r.tag(),
            ProofBackend::Oracle(o) => o.tag(),
        }
    }

    fn prove(&self, statement: &Statement, witness: &Preimage) -> Proof {
        match self {
            ProofBackend::Revealing(r) => r.prove(statement, witness),
            ProofBackend::Oracle(o) => o.prove(statement, witness),
        }
    }

    fn verify(&self, statement: &Statement, proof: &Proof) -> bool {
        match self {
            ProofBackend::Revealing(r) => r.verify(statement, proof),
            ProofBackend::Oracle(o) => o.verify(statement, proof),
        }
    }
}

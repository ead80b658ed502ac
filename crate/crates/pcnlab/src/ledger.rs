//! Append-only bulletin board. Its length is the protocol clock.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::primitives::{hash, Amount, ChannelId, Digest, Preimage, UserId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    /// A ChannelOpen reused an identifier already on the board.
    #[error("channel {0} already exists")]
    DuplicateChannelId(ChannelId),
    /// The entry references a channel that was never opened.
    #[error("unknown channel {0}")]
    UnknownChannel(ChannelId),
    /// The entry references a channel that has been closed.
    #[error("channel {0} already closed")]
    AlreadyClosed(ChannelId),
    /// A ChannelOpen is malformed (zero deposit or identical endpoints).
    #[error("malformed entry: {0}")]
    Malformed(&'static str),
}

/// Final split of a channel's deposit between its endpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalBalance {
    pub left: Amount,
    pub right: Amount,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum LedgerEntry {
    ChannelOpen {
        id: ChannelId,
        users: (UserId, UserId),
        deposit: Amount,
        timeout: u64,
        fee: Amount,
        #[serde(with = "hex_bytes", default)]
        metadata: Vec<u8>,
    },
    ChannelClose {
        id: ChannelId,
        balance: FinalBalance,
    },
    HtlcFulfill {
        id: ChannelId,
        condition: Digest,
        preimage: Preimage,
    },
    /// Release of a group-element condition by its exponent.
    DltcFulfill {
        id: ChannelId,
        condition: u64,
        solution: u64,
    },
    HtlcRefund {
        id: ChannelId,
        condition: Digest,
    },
    DltcRefund {
        id: ChannelId,
        condition: u64,
    },
    Padding,
}

impl LedgerEntry {
    pub fn kind(&self) -> &'static str {
        match self {
            LedgerEntry::ChannelOpen { .. } => "ChannelOpen",
            LedgerEntry::ChannelClose { .. } => "ChannelClose",
            LedgerEntry::HtlcFulfill { .. } => "HtlcFulfill",
            LedgerEntry::DltcFulfill { .. } => "DltcFulfill",
            LedgerEntry::HtlcRefund { .. } => "HtlcRefund",
            LedgerEntry::DltcRefund { .. } => "DltcRefund",
            LedgerEntry::Padding => "Padding",
        }
    }

    pub fn channel(&self) -> Option<ChannelId> {
        match self {
            LedgerEntry::ChannelOpen { id, .. }
            | LedgerEntry::ChannelClose { id, .. }
            | LedgerEntry::HtlcFulfill { id, .. }
            | LedgerEntry::DltcFulfill { id, .. }
            | LedgerEntry::HtlcRefund { id, .. }
            | LedgerEntry::DltcRefund { id, .. } => Some(*id),
            LedgerEntry::Padding => None,
        }
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

/// Metadata published with a ChannelOpen: the fee the opener charges for
/// forwarding over this channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenMetadata {
    pub fee: Amount,
}

impl OpenMetadata {
    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("metadata serializes")
    }

    pub fn decode(bytes: &[u8]) -> Option<OpenMetadata> {
        serde_json::from_slice(bytes).ok()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Ledger {
    entries: Vec<LedgerEntry>,
    open: BTreeMap<ChannelId, usize>,
    closed: BTreeSet<ChannelId>,
}

#[derive(Debug, Serialize)]
struct DumpLine<'a> {
    index: usize,
    #[serde(flatten)]
    entry: &'a LedgerEntry,
}

impl Ledger {
    pub fn new() -> Self {
        Ledger::default()
    }

    /// Current protocol time: the number of entries on the board.
    pub fn now(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn read(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn get(&self, index: usize) -> Option<&LedgerEntry> {
        self.entries.get(index)
    }

    pub fn is_open(&self, id: ChannelId) -> bool {
        self.open.contains_key(&id)
    }

    pub fn open_channels(&self) -> impl Iterator<Item = ChannelId> + '_ {
        self.open.keys().copied()
    }

    /// The ChannelOpen record of `id`, whether or not it was closed since.
    pub fn opening(&self, id: ChannelId) -> Option<&LedgerEntry> {
        self.entries
            .iter()
            .find(|e| matches!(e, LedgerEntry::ChannelOpen { id: i, .. } if *i == id))
    }

    fn validate(&self, entry: &LedgerEntry) -> Result<(), LedgerError> {
        match entry {
            LedgerEntry::ChannelOpen {
                id, users, deposit, ..
            } => {
                if self.open.contains_key(id) || self.closed.contains(id) {
                    return Err(LedgerError::DuplicateChannelId(*id));
                }
                if users.0 == users.1 {
                    return Err(LedgerError::Malformed("endpoints must differ"));
                }
                if *deposit == Amount::ZERO {
                    return Err(LedgerError::Malformed("deposit must be positive"));
                }
                Ok(())
            }
            LedgerEntry::Padding => Ok(()),
            other => {
                let id = other.channel().expect("non-padding entries name a channel");
                if self.closed.contains(&id) {
                    Err(LedgerError::AlreadyClosed(id))
                } else if !self.open.contains_key(&id) {
                    Err(LedgerError::UnknownChannel(id))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn append(&mut self, entry: LedgerEntry) -> Result<usize, LedgerError> {
        self.validate(&entry)?;
        let index = self.entries.len();
        match &entry {
            LedgerEntry::ChannelOpen { id, .. } => {
                self.open.insert(*id, index);
            }
            LedgerEntry::ChannelClose { id, .. } => {
                self.open.remove(id);
                self.closed.insert(*id);
            }
            _ => {}
        }
        self.entries.push(entry);
        Ok(index)
    }

    pub fn advance_time(&mut self, rounds: u64) {
        for _ in 0..rounds {
            self.entries.push(LedgerEntry::Padding);
        }
    }

    /// Rebuilds a ledger by appending every entry of `transcript` in order.
    pub fn replay(transcript: &[LedgerEntry]) -> Result<Ledger, LedgerError> {
        let mut l = Ledger::new();
        for e in transcript {
            l.append(e.clone())?;
        }
        Ok(l)
    }

    /// Hash chain over the serialized entries.
    pub fn chain_digest(&self) -> Digest {
        let mut acc = Digest::default();
        for e in &self.entries {
            let mut buf = acc.0.to_vec();
            buf.extend_from_slice(&serde_json::to_vec(e).expect("entry serializes"));
            acc = hash(&buf);
        }
        acc
    }

    /// One JSON object per entry: `{index, kind, payload}`.
    pub fn dump_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for (index, entry) in self.entries.iter().enumerate() {
            let line = serde_json::to_string(&DumpLine { index, entry })?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn open(id: u64, a: u32, b: u32, coins: u64) -> LedgerEntry {
        LedgerEntry::ChannelOpen {
            id: ChannelId(id),
            users: (UserId(a), UserId(b)),
            deposit: Amount::coins(coins),
            timeout: 100,
            fee: Amount::ZERO,
            metadata: OpenMetadata { fee: Amount::ZERO }.encode(),
        }
    }

    #[test]
    fn first_append_is_index_zero() {
        let mut l = Ledger::new();
        assert_eq!(l.now(), 0);
        assert_eq!(l.append(open(1, 0, 1, 5)).unwrap(), 0);
        assert_eq!(l.now(), 1);
    }

    #[test]
    fn close_of_unknown_channel_fails() {
        let mut l = Ledger::new();
        let close = LedgerEntry::ChannelClose {
            id: ChannelId(9),
            balance: FinalBalance {
                left: Amount::ZERO,
                right: Amount::ZERO,
            },
        };
        assert_eq!(
            l.append(close),
            Err(LedgerError::UnknownChannel(ChannelId(9)))
        );
        assert_eq!(l.now(), 0);
    }

    #[test]
    fn duplicate_and_closed_channels_rejected() {
        let mut l = Ledger::new();
        l.append(open(1, 0, 1, 5)).unwrap();
        assert_eq!(
            l.append(open(1, 0, 1, 5)),
            Err(LedgerError::DuplicateChannelId(ChannelId(1)))
        );
        let close = LedgerEntry::ChannelClose {
            id: ChannelId(1),
            balance: FinalBalance {
                left: Amount::coins(5),
                right: Amount::ZERO,
            },
        };
        l.append(close.clone()).unwrap();
        assert_eq!(
            l.append(close),
            Err(LedgerError::AlreadyClosed(ChannelId(1)))
        );
        assert!(!l.is_open(ChannelId(1)));
        assert!(l.append(open(2, 3, 3, 1)).is_err());
        assert!(l.append(open(2, 3, 4, 0)).is_err());
    }

    #[test]
    fn read_preserves_append_order() {
        let mut l = Ledger::new();
        for i in 0..3 {
            l.append(open(i, 0, 1, 1)).unwrap();
        }
        let ids: Vec<_> = l.read().iter().filter_map(|e| e.channel()).collect();
        assert_eq!(ids, vec![ChannelId(0), ChannelId(1), ChannelId(2)]);
    }

    #[test]
    fn advance_time_pads() {
        let mut l = Ledger::new();
        l.advance_time(0);
        assert_eq!(l.now(), 0);
        l.append(open(1, 0, 1, 1)).unwrap();
        l.append(LedgerEntry::Padding).unwrap();
        l.advance_time(5);
        assert_eq!(l.now(), 7);
    }

    #[test]
    fn replay_reproduces_state() {
        let mut l = Ledger::new();
        l.append(open(1, 0, 1, 5)).unwrap();
        l.advance_time(2);
        l.append(LedgerEntry::HtlcRefund {
            id: ChannelId(1),
            condition: hash(b"y"),
        })
        .unwrap();
        let r = Ledger::replay(l.read()).unwrap();
        assert_eq!(r.read(), l.read());
        assert_eq!(r.chain_digest(), l.chain_digest());
        assert_eq!(r.open_channels().collect::<Vec<_>>(), vec![ChannelId(1)]);
    }

    #[test]
    fn dump_format() {
        let mut l = Ledger::new();
        l.append(open(1, 0, 1, 5)).unwrap();
        l.advance_time(1);
        let mut out = Vec::new();
        l.dump_jsonl(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<serde_json::Value> = text
            .lines()
            .map(|s| serde_json::from_str(s).unwrap())
            .collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0]["index"], 0);
        assert_eq!(lines[0]["kind"], "ChannelOpen");
        assert_eq!(lines[0]["payload"]["deposit"], 500_000_000u64);
        assert_eq!(lines[1]["kind"], "Padding");
    }

    proptest! {
        #[test]
        fn now_tracks_every_prefix(ops in proptest::collection::vec(0u8..3, 0..40)) {
            let mut l = Ledger::new();
            let mut expected = 0u64;
            let mut next = 0u64;
            for op in ops {
                match op {
                    0 => { l.append(open(next, 0, 1, 1)).unwrap(); next += 1; expected += 1; }
                    1 => { l.advance_time(2); expected += 2; }
                    _ => { let _ = l.append(open(0, 0, 1, 1)); if next == 0 { next = 1; expected += 1; } }
                }
                prop_assert_eq!(l.now(), expected);
                prop_assert_eq!(l.now() as usize, l.read().len());
            }
            let before = l.chain_digest();
            prop_assert_eq!(before, l.chain_digest());
        }
    }
}

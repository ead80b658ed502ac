//! Conditional holds of value on a single channel: hash-locked and
//! discrete-log-locked contracts, their multi-hop setups, and the proof
//! system used by intermediaries to check the hash chain.

pub mod dltc;
pub mod htlc;
pub mod proof;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::LedgerEntry;
use crate::primitives::{
    hash, Amount, ChannelId, Digest, Group, GroupElement, Preimage, Scalar, UserId,
};

pub use dltc::{dltc_blind, dltc_challenge, dltc_derive, dltc_fulfill, setup_dltc, DltcChainSetup};
pub use htlc::{derive_upstream, plain_setup, setup_htlc, verify_hop, HopSetup, MultiHopSetup};
pub use proof::{
    OracleRegistry, Proof, ProofBackend, ProofBackendKind, ProofSystem, Revealing, Statement,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ContractError {
    /// The revealed preimage does not hash to the condition.
    #[error("preimage does not match condition")]
    BadPreimage,
    /// The revealed exponent does not solve the group condition.
    #[error("exponent does not solve condition")]
    BadSolution,
    /// Fulfillment attempted at or after the timeout.
    #[error("contract expired at {timeout} (now {now})")]
    Expired { timeout: u64, now: u64 },
    /// Refund attempted before the timeout.
    #[error("contract not refundable before {timeout} (now {now})")]
    NotYetExpired { timeout: u64, now: u64 },
    /// The contract already left the Locked state.
    #[error("contract already settled")]
    AlreadySettled,
    /// The solution kind does not fit the condition kind.
    #[error("solution kind does not match condition kind")]
    KindMismatch,
}

/// Release condition of a contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Hash(Digest),
    Dlog {
        element: GroupElement,
        group: GroupParams,
    },
}

/// Compact, orderable copy of a [`Group`] carried inside conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupParams {
    pub modulus: u64,
    pub order: u64,
    pub generator: u64,
}

impl From<Group> for GroupParams {
    fn from(g: Group) -> Self {
        GroupParams {
            modulus: g.modulus,
            order: g.order,
            generator: g.generator,
        }
    }
}

impl From<GroupParams> for Group {
    fn from(g: GroupParams) -> Self {
        Group {
            modulus: g.modulus,
            order: g.order,
            generator: g.generator,
        }
    }
}

/// Data that releases a [`Condition`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solution {
    Preimage(Preimage),
    Exponent(Scalar),
}

impl Condition {
    pub fn check(&self, solution: &Solution) -> Result<(), ContractError> {
        match (self, solution) {
            (Condition::Hash(y), Solution::Preimage(r)) => {
                if hash(&r.0) == *y {
                    Ok(())
                } else {
                    Err(ContractError::BadPreimage)
                }
            }
            (Condition::Dlog { element, group }, Solution::Exponent(z)) => {
                if Group::from(*group).g_pow(*z) == *element {
                    Ok(())
                } else {
                    Err(ContractError::BadSolution)
                }
            }
            _ => Err(ContractError::KindMismatch),
        }
    }

    /// Bytes used to order events of payments that carry no global identifier.
    pub fn sort_key(&self) -> Vec<u8> {
        match self {
            Condition::Hash(y) => y.0.to_vec(),
            Condition::Dlog { element, .. } => element.to_be_bytes().to_vec(),
        }
    }

    /// Short printable form used in traces.
    pub fn label(&self) -> String {
        match self {
            Condition::Hash(y) => y.to_hex(),
            Condition::Dlog { element, .. } => format!("g:{element:x}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "solution", rename_all = "snake_case")]
pub enum ContractStatus {
    Locked,
    Fulfilled(Solution),
    Refunded,
}

/// A conditional hold of `value` from `payer` to `payee` on one channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contract {
    pub channel: ChannelId,
    pub payer: UserId,
    pub payee: UserId,
    pub condition: Condition,
    pub value: Amount,
    pub timeout: u64,
    pub status: ContractStatus,
}

pub type HtlcContract = Contract;
pub type DltcContract = Contract;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SettlementKind {
    Paid,
    Refunded,
}

/// Outcome of resolving a contract.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Settlement {
    pub channel: ChannelId,
    pub kind: SettlementKind,
    pub beneficiary: UserId,
    pub value: Amount,
    /// Set when the resolution is forced on the ledger instead of being
    /// agreed off-chain.
    pub ledger_entry: Option<LedgerEntry>,
}

impl Contract {
    pub fn new(
        channel: ChannelId,
        payer: UserId,
        payee: UserId,
        condition: Condition,
        value: Amount,
        timeout: u64,
    ) -> Self {
        Contract {
            channel,
            payer,
            payee,
            condition,
            value,
            timeout,
            status: ContractStatus::Locked,
        }
    }

    pub fn is_locked(&self) -> bool {
        self.status == ContractStatus::Locked
    }

    /// Releases the contract to the payee. Valid while `now < timeout`.
    pub fn fulfill(
        &mut self,
        solution: Solution,
        now: u64,
        contested: bool,
    ) -> Result<Settlement, ContractError> {
        if !self.is_locked() {
            return Err(ContractError::AlreadySettled);
        }
        self.condition.check(&solution)?;
        if now >= self.timeout {
            return Err(ContractError::Expired {
                timeout: self.timeout,
                now,
            });
        }
        self.status = ContractStatus::Fulfilled(solution);
        let ledger_entry = contested.then(|| match (self.condition, solution) {
            (Condition::Hash(y), Solution::Preimage(r)) => LedgerEntry::HtlcFulfill {
                id: self.channel,
                condition: y,
                preimage: r,
            },
            (Condition::Dlog { element, .. }, Solution::Exponent(z)) => LedgerEntry::DltcFulfill {
                id: self.channel,
                condition: element,
                solution: z,
            },
            _ => unreachable!("condition check rejects mismatched kinds"),
        });
        Ok(Settlement {
            channel: self.channel,
            kind: SettlementKind::Paid,
            beneficiary: self.payee,
            value: self.value,
            ledger_entry,
        })
    }

    /// Returns the value to the payer. Valid once `now >= timeout`.
    pub fn refund(&mut self, now: u64, contested: bool) -> Result<Settlement, ContractError> {
        if !self.is_locked() {
            return Err(ContractError::AlreadySettled);
        }
        if now < self.timeout {
            return Err(ContractError::NotYetExpired {
                timeout: self.timeout,
                now,
            });
        }
        self.status = ContractStatus::Refunded;
        let ledger_entry = contested.then_some(match self.condition {
            Condition::Hash(y) => LedgerEntry::HtlcRefund {
                id: self.channel,
                condition: y,
            },
            Condition::Dlog { element, .. } => LedgerEntry::DltcRefund {
                id: self.channel,
                condition: element,
            },
        });
        Ok(Settlement {
            channel: self.channel,
            kind: SettlementKind::Refunded,
            beneficiary: self.payer,
            value: self.value,
            ledger_entry,
        })
    }
}

/// Fulfills a hash-locked contract with preimage `r`.
pub fn fulfill(
    contract: &mut HtlcContract,
    r: Preimage,
    now: u64,
    contested: bool,
) -> Result<Settlement, ContractError> {
    contract.fulfill(Solution::Preimage(r), now, contested)
}

pub fn refund(
    contract: &mut Contract,
    now: u64,
    contested: bool,
) -> Result<Settlement, ContractError> {
    contract.refund(now, contested)
}

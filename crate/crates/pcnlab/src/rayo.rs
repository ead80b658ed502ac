//! Queueing rules that make conflicting payments non-blocking: a payment
//! that finds a channel saturated waits if it outranks some in-flight
//! payment there, and the highest waiting payment is retried whenever an
//! in-flight one aborts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{ChannelState, LockOffer};
use crate::primitives::{Txid, UserId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RayoError {
    /// An accept referenced a payment that is not in flight on the channel.
    #[error("txid {0} is not in flight on this channel")]
    UnknownTxid(Txid),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaturationDecision {
    Queue,
    Abort,
}

/// Payment wire format: whether hop messages carry a global identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Fulgor,
    Rayo,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fulgor" => Ok(Mode::Fulgor),
            "rayo" => Ok(Mode::Rayo),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

pub fn txid_assign(sender: UserId, nonce: u64) -> Txid {
    Txid::derive(sender, nonce)
}

/// Called when a forward failed only for lack of capacity.
pub fn on_forward_saturated(channel: &ChannelState, offer: &LockOffer) -> SaturationDecision {
    let Some(txid) = offer.txid else {
        return SaturationDecision::Abort;
    };
    if channel.cur.iter().any(|f| f.txid < txid) {
        SaturationDecision::Queue
    } else {
        SaturationDecision::Abort
    }
}

/// Drops `aborted` from the in-flight list and pops the highest queued offer.
pub fn on_abort_requeue(channel: &mut ChannelState, aborted: Option<Txid>) -> Option<LockOffer> {
    if let Some(t) = aborted {
        channel.cur.retain(|f| f.txid != t);
    }
    let (idx, _) = channel
        .queue
        .iter()
        .enumerate()
        .max_by_key(|(_, o)| o.txid)?;
    Some(channel.queue.remove(idx))
}

/// Drops an accepted payment from the in-flight list. The queue is left
/// alone: the capacity was consumed, not freed.
pub fn on_accept_cleanup(channel: &mut ChannelState, txid: Txid) -> Result<(), RayoError> {
    let before = channel.cur.len();
    channel.cur.retain(|f| f.txid != txid);
    if channel.cur.len() == before {
        Err(RayoError::UnknownTxid(txid))
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{ChannelState, InFlight};
    use crate::contracts::Condition;
    use crate::primitives::{hash, Amount, ChannelId};

    fn state(cur: &[u128], queue: &[u128]) -> ChannelState {
        let mut s = ChannelState::new(
            ChannelId(1),
            UserId(0),
            UserId(1),
            Amount(1),
            100,
            Amount::ZERO,
        );
        s.cur = cur
            .iter()
            .map(|&t| InFlight {
                txid: Txid(t),
                condition: Condition::Hash(hash(&t.to_be_bytes())),
                value: Amount(1),
            })
            .collect();
        s.queue = queue.iter().map(|&t| offer(t)).collect();
        s
    }

    fn offer(t: u128) -> LockOffer {
        LockOffer {
            txid: Some(Txid(t)),
            condition: Condition::Hash(hash(&t.to_be_bytes())),
            value: Amount(1),
            timeout: 50,
        }
    }

    #[test]
    fn saturated_forward_decisions() {
        assert_eq!(
            on_forward_saturated(&state(&[10], &[]), &offer(20)),
            SaturationDecision::Queue
        );
        assert_eq!(
            on_forward_saturated(&state(&[30], &[]), &offer(20)),
            SaturationDecision::Abort
        );
        assert_eq!(
            on_forward_saturated(&state(&[10, 30], &[]), &offer(20)),
            SaturationDecision::Queue
        );
        let mut no_id = offer(20);
        no_id.txid = None;
        assert_eq!(
            on_forward_saturated(&state(&[10], &[]), &no_id),
            SaturationDecision::Abort
        );
    }

    #[test]
    fn abort_dequeues_single_max() {
        let mut s = state(&[10], &[20]);
        assert_eq!(
            on_abort_requeue(&mut s, Some(Txid(10))).unwrap().txid,
            Some(Txid(20))
        );
        assert!(s.cur.is_empty() && s.queue.is_empty());

        let mut s = state(&[10], &[]);
        assert_eq!(on_abort_requeue(&mut s, Some(Txid(10))), None);

        let mut s = state(&[10], &[15, 25]);
        assert_eq!(
            on_abort_requeue(&mut s, Some(Txid(10))).unwrap().txid,
            Some(Txid(25))
        );
        assert_eq!(s.queue.len(), 1);
        assert_eq!(s.queue[0].txid, Some(Txid(15)));
    }

    #[test]
    fn accept_cleanup() {
        let mut s = state(&[10, 11], &[20]);
        on_accept_cleanup(&mut s, Txid(10)).unwrap();
        assert_eq!(s.cur.len(), 1);
        assert_eq!(s.queue.len(), 1, "accept never dequeues");
        assert_eq!(
            on_accept_cleanup(&mut s, Txid(99)),
            Err(RayoError::UnknownTxid(Txid(99)))
        );
    }

    #[test]
    fn txids_per_sender_nonce() {
        let a = txid_assign(UserId(3), 1);
        let b = txid_assign(UserId(3), 2);
        assert_ne!(a, b);
        assert_eq!(a, txid_assign(UserId(3), 1));
    }
}

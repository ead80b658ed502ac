//! Executable reference model of the ideal payment functionality, blocking
//! and non-blocking. A payment first reserves every hop atomically, then
//! each user on the path replies accept or refuse; the hops up to the last
//! refusal are rolled back and the rest are committed.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::primitives::{Amount, ChannelId, Txid, UserId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdealError {
    #[error("channel {0} already exists")]
    Duplicate(ChannelId),
    #[error("unknown channel {0}")]
    UnknownChannel(ChannelId),
    #[error("channel {0} is closed")]
    Closed(ChannelId),
    #[error("channel {0} still has reserved value")]
    Busy(ChannelId),
    #[error("unknown payment {0}")]
    UnknownPayment(usize),
    #[error("payment {0} was already started")]
    AlreadyStarted(usize),
    #[error("payment {0} is not awaiting a decision")]
    NotPending(usize),
    #[error("malformed payment: {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdealChannel {
    pub id: ChannelId,
    pub left: UserId,
    pub right: UserId,
    pub deposit: Amount,
    pub paid: Amount,
    pub timeout: u64,
    pub fee: Amount,
    /// Both endpoints are byzantine: the model trusts whatever they claim.
    pub unchecked: bool,
}

/// A reservation of `value` on one hop of a payment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hold {
    pub payment: usize,
    pub hop: usize,
    pub channel: ChannelId,
    pub value: Amount,
    pub timeout: u64,
    pub txid: Option<Txid>,
}

/// Remaining hops of a payment waiting for capacity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Waiting {
    pub txid: Txid,
    pub payment: usize,
    pub from_hop: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdealPaymentSpec {
    pub id: usize,
    pub txid: Option<Txid>,
    pub path: Vec<ChannelId>,
    pub amounts: Vec<Amount>,
    pub timeouts: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reply {
    Accept,
    Refuse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum IdealStatus {
    /// Every hop reserved, waiting for the replies.
    Held,
    Queued {
        hop: usize,
    },
    /// Hops from `from` on were paid, the rest rolled back. `from == 0`
    /// is full success, `from == hops` is full failure.
    Decided {
        from: usize,
    },
    /// Reservation failed; nothing was paid.
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdealPayment {
    pub spec: IdealPaymentSpec,
    pub status: IdealStatus,
    /// Replies received while the payment was queued.
    pub deferred: Option<Vec<Reply>>,
}

impl IdealPayment {
    pub fn succeeded(&self) -> bool {
        self.status == IdealStatus::Decided { from: 0 }
    }

    /// Per hop, whether its value ended up paid.
    pub fn committed(&self) -> Vec<bool> {
        let n = self.spec.path.len();
        match self.status {
            IdealStatus::Decided { from } => (0..n).map(|i| i >= from).collect(),
            _ => vec![false; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "note", rename_all = "snake_case")]
pub enum Notification {
    Reserved {
        payment: usize,
    },
    Queued {
        payment: usize,
        hop: usize,
    },
    Resumed {
        payment: usize,
    },
    Aborted {
        payment: usize,
    },
    Paid {
        payment: usize,
        hop: usize,
        channel: ChannelId,
    },
    RolledBack {
        payment: usize,
        hop: usize,
        channel: ChannelId,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdealState {
    pub channels: BTreeMap<ChannelId, IdealChannel>,
    pub closed: BTreeSet<ChannelId>,
    pub holds: Vec<Hold>,
    pub waiting: Vec<Waiting>,
    pub payments: BTreeMap<usize, IdealPayment>,
    pub nonblocking: bool,
    pub notifications: Vec<Notification>,
}

impl IdealState {
    pub fn new(nonblocking: bool) -> Self {
        IdealState {
            nonblocking,
            ..IdealState::default()
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn ideal_open(
        &mut self,
        id: ChannelId,
        left: UserId,
        right: UserId,
        deposit: Amount,
        timeout: u64,
        fee: Amount,
        unchecked: bool,
    ) -> Result<(), IdealError> {
        if self.channels.contains_key(&id) {
            return Err(IdealError::Duplicate(id));
        }
        self.channels.insert(
            id,
            IdealChannel {
                id,
                left,
                right,
                deposit,
                paid: Amount::ZERO,
                timeout,
                fee,
                unchecked,
            },
        );
        Ok(())
    }

    /// Final `(left, right)` split of a channel with no reservations.
    pub fn ideal_close(&mut self, id: ChannelId) -> Result<(i128, i128), IdealError> {
        if self.closed.contains(&id) {
            return Err(IdealError::Closed(id));
        }
        let c = self
            .channels
            .get(&id)
            .ok_or(IdealError::UnknownChannel(id))?;
        if self.holds.iter().any(|h| h.channel == id) {
            return Err(IdealError::Busy(id));
        }
        self.closed.insert(id);
        Ok((c.deposit.0 as i128 - c.paid.0 as i128, c.paid.0 as i128))
    }

    /// Capacity left on `id`: deposit minus paid minus reservations.
    pub fn residual(&self, id: ChannelId) -> Option<i128> {
        let c = self.channels.get(&id)?;
        let held: u64 = self
            .holds
            .iter()
            .filter(|h| h.channel == id)
            .map(|h| h.value.0)
            .sum();
        Some(c.deposit.0 as i128 - c.paid.0 as i128 - held as i128)
    }

    fn fits(&self, id: ChannelId, value: Amount) -> bool {
        match self.channels.get(&id) {
            Some(c) if c.unchecked => true,
            Some(_) => self.residual(id).is_some_and(|r| r >= value.0 as i128),
            None => false,
        }
    }

    fn hold(&mut self, spec: &IdealPaymentSpec, hop: usize) {
        self.holds.push(Hold {
            payment: spec.id,
            hop,
            channel: spec.path[hop],
            value: spec.amounts[hop],
            timeout: spec.timeouts[hop],
            txid: spec.txid,
        });
    }

    fn validate(&self, spec: &IdealPaymentSpec) -> Result<(), IdealError> {
        let n = spec.path.len();
        if n == 0 || spec.amounts.len() != n || spec.timeouts.len() != n {
            return Err(IdealError::Malformed(
                "path, amounts and timeouts must align",
            ));
        }
        if spec.timeouts.windows(2).any(|w| w[0] < w[1]) {
            return Err(IdealError::Malformed(
                "timeouts must not increase along the path",
            ));
        }
        for id in &spec.path {
            if self.closed.contains(id) {
                return Err(IdealError::Closed(*id));
            }
            if !self.channels.contains_key(id) {
                return Err(IdealError::UnknownChannel(*id));
            }
        }
        Ok(())
    }

    /// Reservation step. Blocking mode aborts on the first hop without
    /// capacity; non-blocking mode instead waits there if some reservation
    /// on that channel has a lower identifier.
    pub fn ideal_pay(&mut self, spec: IdealPaymentSpec) -> Result<IdealStatus, IdealError> {
        self.validate(&spec)?;
        if self.payments.contains_key(&spec.id) {
            return Err(IdealError::AlreadyStarted(spec.id));
        }
        let id = spec.id;
        self.payments.insert(
            id,
            IdealPayment {
                spec,
                status: IdealStatus::Aborted,
                deferred: None,
            },
        );
        let mut freed = Vec::new();
        let status = self.reserve_from(id, 0, &mut freed);
        self.reissue(freed);
        Ok(status)
    }

    pub fn ideal_pay_nonblocking(
        &mut self,
        spec: IdealPaymentSpec,
    ) -> Result<IdealStatus, IdealError> {
        let was = self.nonblocking;
        self.nonblocking = true;
        let r = self.ideal_pay(spec);
        self.nonblocking = was;
        r
    }

    /// Reserves hops `from..` of payment `id`, recording channels it frees
    /// on failure.
    fn reserve_from(&mut self, id: usize, from: usize, freed: &mut Vec<ChannelId>) -> IdealStatus {
        let spec = self.payments[&id].spec.clone();
        for k in from..spec.path.len() {
            if self.fits(spec.path[k], spec.amounts[k]) {
                self.hold(&spec, k);
                continue;
            }
            let lower_holder = spec.txid.is_some_and(|t| {
                self.holds
                    .iter()
                    .any(|h| h.channel == spec.path[k] && h.txid.is_some_and(|o| o < t))
            });
            if self.nonblocking && lower_holder {
                self.waiting.push(Waiting {
                    txid: spec.txid.expect("checked"),
                    payment: id,
                    from_hop: k,
                });
                let status = IdealStatus::Queued { hop: k };
                self.set_status(id, status.clone());
                self.notifications.push(Notification::Queued {
                    payment: id,
                    hop: k,
                });
                return status;
            }
            for h in self.holds.iter().filter(|h| h.payment == id) {
                freed.push(h.channel);
            }
            self.holds.retain(|h| h.payment != id);
            self.set_status(id, IdealStatus::Aborted);
            self.notifications
                .push(Notification::Aborted { payment: id });
            return IdealStatus::Aborted;
        }
        self.set_status(id, IdealStatus::Held);
        self.notifications
            .push(Notification::Reserved { payment: id });
        IdealStatus::Held
    }

    fn set_status(&mut self, id: usize, status: IdealStatus) {
        if let Some(p) = self.payments.get_mut(&id) {
            p.status = status;
        }
    }

    /// Resolves payment `id` with one reply per user after the sender.
    /// Replies to a queued payment take effect once it is resumed.
    pub fn ideal_decide(
        &mut self,
        id: usize,
        replies: &[Reply],
    ) -> Result<IdealStatus, IdealError> {
        let p = self
            .payments
            .get_mut(&id)
            .ok_or(IdealError::UnknownPayment(id))?;
        if replies.len() != p.spec.path.len() {
            return Err(IdealError::Malformed("one reply per user after the sender"));
        }
        match p.status {
            IdealStatus::Held => {}
            IdealStatus::Queued { .. } => {
                p.deferred = Some(replies.to_vec());
                return Ok(p.status.clone());
            }
            _ => return Err(IdealError::NotPending(id)),
        }
        let mut freed = Vec::new();
        let status = self.apply_decision(id, replies, &mut freed);
        self.reissue(freed);
        Ok(status)
    }

    fn apply_decision(
        &mut self,
        id: usize,
        replies: &[Reply],
        freed: &mut Vec<ChannelId>,
    ) -> IdealStatus {
        let from = replies
            .iter()
            .rposition(|r| *r == Reply::Refuse)
            .map_or(0, |j| j + 1);
        let holds: Vec<Hold> = self
            .holds
            .iter()
            .filter(|h| h.payment == id)
            .cloned()
            .collect();
        self.holds.retain(|h| h.payment != id);
        for h in holds {
            if h.hop >= from {
                let c = self
                    .channels
                    .get_mut(&h.channel)
                    .expect("held channels exist");
                c.paid = Amount(c.paid.0 + h.value.0);
                self.notifications.push(Notification::Paid {
                    payment: id,
                    hop: h.hop,
                    channel: h.channel,
                });
            } else {
                freed.push(h.channel);
                self.notifications.push(Notification::RolledBack {
                    payment: id,
                    hop: h.hop,
                    channel: h.channel,
                });
            }
        }
        let status = IdealStatus::Decided { from };
        self.set_status(id, status.clone());
        status
    }

    /// Resumes waiting payments whose blocked channel regained capacity,
    /// highest identifier first, one per freed channel.
    fn reissue(&mut self, mut freed: Vec<ChannelId>) {
        while let Some(ch) = freed.pop() {
            let candidate = self
                .waiting
                .iter()
                .enumerate()
                .filter(|(_, w)| self.payments[&w.payment].spec.path[w.from_hop] == ch)
                .max_by_key(|(_, w)| w.txid)
                .map(|(i, _)| i);
            let Some(i) = candidate else {
                continue;
            };
            let w = self.waiting.remove(i);
            self.notifications
                .push(Notification::Resumed { payment: w.payment });
            let status = self.reserve_from(w.payment, w.from_hop, &mut freed);
            if status == IdealStatus::Held {
                if let Some(replies) = self
                    .payments
                    .get_mut(&w.payment)
                    .and_then(|p| p.deferred.take())
                {
                    self.apply_decision(w.payment, &replies, &mut freed);
                }
            }
        }
    }

    /// Rolls back payments still waiting, as their offers time out.
    pub fn expire_waiting(&mut self) {
        let waiting = std::mem::take(&mut self.waiting);
        let mut freed = Vec::new();
        for w in waiting {
            for h in self.holds.iter().filter(|h| h.payment == w.payment) {
                freed.push(h.channel);
            }
            self.holds.retain(|h| h.payment != w.payment);
            self.set_status(w.payment, IdealStatus::Aborted);
            self.notifications
                .push(Notification::Aborted { payment: w.payment });
        }
        self.reissue(freed);
    }

    /// Paid amount per channel.
    pub fn paid(&self) -> BTreeMap<ChannelId, Amount> {
        self.channels.iter().map(|(id, c)| (*id, c.paid)).collect()
    }
}

/// One step of an ideal execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum IdealOp {
    Begin { payment: usize },
    Decide { payment: usize },
}

/// Every order of `begin`/`decide` operations in which each payment begins
/// before it is decided. There are `(2p)! / 2^p` of them.
pub fn interleavings(payments: &[usize]) -> Vec<Vec<IdealOp>> {
    fn go(
        begun: &mut Vec<bool>,
        decided: &mut Vec<bool>,
        ids: &[usize],
        cur: &mut Vec<IdealOp>,
        out: &mut Vec<Vec<IdealOp>>,
    ) {
        if cur.len() == 2 * ids.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..ids.len() {
            if !begun[i] {
                begun[i] = true;
                cur.push(IdealOp::Begin { payment: ids[i] });
                go(begun, decided, ids, cur, out);
                cur.pop();
                begun[i] = false;
            } else if !decided[i] {
                decided[i] = true;
                cur.push(IdealOp::Decide { payment: ids[i] });
                go(begun, decided, ids, cur, out);
                cur.pop();
                decided[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(
        &mut vec![false; payments.len()],
        &mut vec![false; payments.len()],
        payments,
        &mut Vec::new(),
        &mut out,
    );
    out
}

/// Runs `ops` on a copy of `initial`, replying with `replies[p]` for
/// payment `p`. Payments still waiting at the end are rolled back.
pub fn execute(
    initial: &IdealState,
    specs: &BTreeMap<usize, IdealPaymentSpec>,
    replies: &BTreeMap<usize, Vec<Reply>>,
    ops: &[IdealOp],
) -> Result<IdealState, IdealError> {
    let mut s = initial.clone();
    for op in ops {
        match *op {
            IdealOp::Begin { payment } => {
                let spec = specs
                    .get(&payment)
                    .ok_or(IdealError::UnknownPayment(payment))?;
                s.ideal_pay(spec.clone())?;
            }
            IdealOp::Decide { payment } => {
                let r = replies
                    .get(&payment)
                    .ok_or(IdealError::UnknownPayment(payment))?;
                match s.payments[&payment].status {
                    IdealStatus::Held | IdealStatus::Queued { .. } => {
                        s.ideal_decide(payment, r)?;
                    }
                    _ => {}
                }
            }
        }
    }
    s.expire_waiting();
    Ok(s)
}

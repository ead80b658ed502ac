//! Two-party channel state, its lifecycle on the ledger, and the two-round
//! agreement through which both endpoints apply the same events.

use std::cmp::Reverse;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::contracts::{Condition, Contract, ContractStatus, Solution};
use crate::ledger::{FinalBalance, Ledger, LedgerEntry, LedgerError, OpenMetadata};
use crate::primitives::{hash, Amount, ChannelId, Digest, PrimitiveError, Txid, UserId};
use crate::rayo::{self, SaturationDecision};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChannelError {
    /// The opener's on-ledger balance does not cover the deposit.
    #[error("{user} holds {have}, needs {need}")]
    InsufficientFunds {
        user: UserId,
        have: Amount,
        need: Amount,
    },
    /// The counterparty declined to sign.
    #[error("peer rejected the operation")]
    PeerRejected,
    /// A channel with the same identifier is already on the ledger.
    #[error("channel {0} already exists")]
    DuplicateChannel(ChannelId),
    /// The channel was never opened.
    #[error("unknown channel {0}")]
    UnknownChannel(ChannelId),
    /// The channel was already closed.
    #[error("channel {0} already closed")]
    AlreadyClosed(ChannelId),
    /// A contract on the channel is locked and not yet expired.
    #[error("channel {0} has unresolved contracts")]
    PendingContracts(ChannelId),
    /// The requested split was never agreed by both endpoints.
    #[error("balance was never agreed on channel {0}")]
    InvalidBalance(ChannelId),
    /// A transfer exceeds what the sending side can move.
    #[error("insufficient capacity")]
    InsufficientCapacity,
    /// The operation needs a different direction mode.
    #[error("channel is not bidirectional")]
    NotBidirectional,
    /// Endpoints must be distinct users.
    #[error("a channel needs two distinct endpoints")]
    SameEndpoints,
    /// The two replicas differ after an agreement.
    #[error("replica divergence on channel {0}")]
    StateDivergence(ChannelId),
    #[error(transparent)]
    Amount(#[from] PrimitiveError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionMode {
    Unidirectional,
    Bidirectional {
        left: Amount,
        right: Amount,
        total: Amount,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    LtoR,
    RtoL,
}

/// In-flight record kept by non-blocking payments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InFlight {
    pub txid: Txid,
    pub condition: Condition,
    pub value: Amount,
}

/// Parameters of a contract the payer asks to lock.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LockOffer {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub txid: Option<Txid>,
    pub condition: Condition,
    pub value: Amount,
    pub timeout: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Abort,
    Forward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortReason {
    Capacity,
    Verification,
    Receiver,
    Downstream,
    Timeout,
    Eroded,
    Withdrawn,
    Adversary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventPayload {
    /// Lock a new contract (payer).
    Lock(LockOffer),
    /// Open a locked contract (payee).
    Release {
        condition: Condition,
        solution: Solution,
    },
    /// Give up a locked contract before its timeout (payee).
    Cancel {
        condition: Condition,
        reason: AbortReason,
    },
    /// Reclaim an expired contract (payer).
    Refund { condition: Condition },
    /// Take back a queued offer that never locked (payer).
    Withdraw { condition: Condition },
    /// Notice to the payer that its offer is waiting in the queue.
    Queued { condition: Condition },
}

impl EventPayload {
    pub fn condition(&self) -> &Condition {
        match self {
            EventPayload::Lock(o) => &o.condition,
            EventPayload::Release { condition, .. }
            | EventPayload::Cancel { condition, .. }
            | EventPayload::Refund { condition }
            | EventPayload::Withdraw { condition }
            | EventPayload::Queued { condition } => condition,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelEvent {
    pub decision: Decision,
    pub payload: EventPayload,
    pub origin: UserId,
    /// Global identifier of the payment, when the mode carries one.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub txid: Option<Txid>,
}

impl ChannelEvent {
    pub fn forward(origin: UserId, offer: LockOffer) -> Self {
        ChannelEvent {
            decision: Decision::Forward,
            txid: offer.txid,
            payload: EventPayload::Lock(offer),
            origin,
        }
    }

    pub fn accept(
        origin: UserId,
        condition: Condition,
        solution: Solution,
        txid: Option<Txid>,
    ) -> Self {
        ChannelEvent {
            decision: Decision::Accept,
            payload: EventPayload::Release {
                condition,
                solution,
            },
            origin,
            txid,
        }
    }

    pub fn abort(origin: UserId, payload: EventPayload, txid: Option<Txid>) -> Self {
        ChannelEvent {
            decision: Decision::Abort,
            payload,
            origin,
            txid,
        }
    }

    fn order_id(&self) -> Vec<u8> {
        match self.txid {
            Some(t) => t.0.to_be_bytes().to_vec(),
            None => self.payload.condition().sort_key(),
        }
    }
}

/// Channel-level result of applying one event, recorded for traces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "effect", rename_all = "snake_case")]
pub enum Effect {
    Locked {
        condition: Condition,
        value: Amount,
        txid: Option<Txid>,
    },
    Queued {
        condition: Condition,
        txid: Option<Txid>,
    },
    LockFailed {
        condition: Condition,
        txid: Option<Txid>,
        reason: AbortReason,
    },
    Fulfilled {
        condition: Condition,
        value: Amount,
    },
    Released {
        condition: Condition,
        value: Amount,
        reason: AbortReason,
    },
    Withdrawn {
        condition: Condition,
    },
    Rejected {
        condition: Condition,
        why: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelState {
    pub id: ChannelId,
    pub left: UserId,
    pub right: UserId,
    pub deposit: Amount,
    pub cap: Amount,
    pub cur: Vec<InFlight>,
    pub queue: Vec<LockOffer>,
    pub timeout: u64,
    pub fee: Amount,
    pub direction_mode: DirectionMode,
    pub contracts: Vec<Contract>,
    /// Total released to `right`.
    pub paid: Amount,
    /// Capacity both endpoints pretend to have beyond `cap`. Always zero
    /// unless both endpoints are byzantine.
    #[serde(skip_serializing_if = "is_zero", default)]
    pub overdraft_allowance: Amount,
    /// Capacity actually consumed beyond the deposit.
    #[serde(skip_serializing_if = "is_zero", default)]
    pub overdraft: Amount,
    /// Number of completed agreements.
    pub seq: u64,
    /// Every `(left, right)` split agreed with no contract pending.
    pub agreed_balances: Vec<(Amount, Amount)>,
}

fn is_zero(a: &Amount) -> bool {
    *a == Amount::ZERO
}

/// Environment shared by both replicas while applying one agreement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgreeContext {
    pub now: u64,
    pub delta: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Agreement {
    pub ordered: Vec<ChannelEvent>,
    pub state: ChannelState,
    pub outbound: Vec<(UserId, ChannelEvent)>,
    pub effects: Vec<Effect>,
}

impl ChannelState {
    pub fn new(
        id: ChannelId,
        left: UserId,
        right: UserId,
        deposit: Amount,
        timeout: u64,
        fee: Amount,
    ) -> Self {
        ChannelState {
            id,
            left,
            right,
            deposit,
            cap: deposit,
            cur: Vec::new(),
            queue: Vec::new(),
            timeout,
            fee,
            direction_mode: DirectionMode::Unidirectional,
            contracts: Vec::new(),
            paid: Amount::ZERO,
            overdraft_allowance: Amount::ZERO,
            overdraft: Amount::ZERO,
            seq: 0,
            agreed_balances: vec![(deposit, Amount::ZERO)],
        }
    }

    pub fn new_bidirectional(
        id: ChannelId,
        left: UserId,
        right: UserId,
        l: Amount,
        r: Amount,
        timeout: u64,
    ) -> Self {
        let total = Amount(l.0 + r.0);
        let mut s = ChannelState::new(id, left, right, total, timeout, Amount::ZERO);
        s.direction_mode = DirectionMode::Bidirectional {
            left: l,
            right: r,
            total,
        };
        s.agreed_balances = vec![(l, r)];
        s
    }

    pub fn peer_of(&self, u: UserId) -> Option<UserId> {
        if u == self.left {
            Some(self.right)
        } else if u == self.right {
            Some(self.left)
        } else {
            None
        }
    }

    pub fn locked_value(&self) -> Amount {
        self.contracts
            .iter()
            .filter(|c| c.is_locked())
            .map(|c| c.value)
            .sum()
    }

    pub fn locked(&self, condition: &Condition) -> Option<&Contract> {
        self.contracts
            .iter()
            .find(|c| c.is_locked() && c.condition == *condition)
    }

    fn locked_mut(&mut self, condition: &Condition) -> Option<&mut Contract> {
        self.contracts
            .iter_mut()
            .find(|c| c.is_locked() && c.condition == *condition)
    }

    pub fn has_pending(&self, now: u64) -> bool {
        self.contracts
            .iter()
            .any(|c| c.is_locked() && now < c.timeout)
    }

    /// `cap + locked + paid`, which equals the deposit plus any overdraft.
    pub fn conserved_total(&self) -> Amount {
        Amount(self.cap.0 + self.locked_value().0 + self.paid.0)
    }

    /// Settled split `(left, right)` as signed units; `left` goes negative
    /// only when byzantine endpoints overspent.
    pub fn balances(&self) -> (i128, i128) {
        match &self.direction_mode {
            DirectionMode::Unidirectional => (
                self.deposit.0 as i128 - self.paid.0 as i128,
                self.paid.0 as i128,
            ),
            DirectionMode::Bidirectional { left, right, .. } => (left.0 as i128, right.0 as i128),
        }
    }

    pub fn digest(&self) -> Digest {
        hash(&serde_json::to_vec(self).expect("state serializes"))
    }

    /// `{id, endpoints, cap|LRT, cur, queue, timeout, fee}`.
    pub fn snapshot(&self) -> serde_json::Value {
        let mut v = json!({
            "id": self.id,
            "endpoints": [self.left, self.right],
            "cur": self.cur,
            "queue": self.queue,
            "timeout": self.timeout,
            "fee": self.fee,
        });
        match &self.direction_mode {
            DirectionMode::Unidirectional => v["cap"] = json!(self.cap),
            DirectionMode::Bidirectional { left, right, total } => {
                v["LRT"] = json!([left, right, total]);
            }
        }
        v
    }

    fn try_lock(&mut self, offer: &LockOffer) -> bool {
        if offer.value <= self.cap {
            self.cap = Amount(self.cap.0 - offer.value.0);
        } else if offer.value.0 <= self.cap.0 + self.overdraft_allowance.0 {
            let extra = offer.value.0 - self.cap.0;
            self.overdraft_allowance = Amount(self.overdraft_allowance.0 - extra);
            self.overdraft = Amount(self.overdraft.0 + extra);
            self.cap = Amount::ZERO;
        } else {
            return false;
        }
        self.contracts.push(Contract::new(
            self.id,
            self.left,
            self.right,
            offer.condition,
            offer.value,
            offer.timeout,
        ));
        if let Some(txid) = offer.txid {
            self.cur.push(InFlight {
                txid,
                condition: offer.condition,
                value: offer.value,
            });
        }
        true
    }

    fn note_balance(&mut self) {
        if self.locked_value() == Amount::ZERO {
            let b = self.balances();
            let pair = (Amount(b.0.max(0) as u64), Amount(b.1 as u64));
            if self.agreed_balances.last() != Some(&pair) {
                self.agreed_balances.push(pair);
            }
        }
    }

    /// Retries the highest queued offer after capacity was freed.
    fn requeue_after_release(
        &mut self,
        freed: Option<Txid>,
        ctx: &AgreeContext,
        out: &mut Vec<(UserId, ChannelEvent)>,
        effects: &mut Vec<Effect>,
    ) {
        let Some(next) = rayo::on_abort_requeue(self, freed) else {
            return;
        };
        let eroded = next.timeout.saturating_sub(ctx.now) <= ctx.delta || ctx.now >= self.timeout;
        if eroded {
            self.reject_offer(&next, AbortReason::Eroded, out, effects);
        } else {
            self.forward(next, out, effects);
        }
    }

    fn reject_offer(
        &mut self,
        offer: &LockOffer,
        reason: AbortReason,
        out: &mut Vec<(UserId, ChannelEvent)>,
        effects: &mut Vec<Effect>,
    ) {
        effects.push(Effect::LockFailed {
            condition: offer.condition,
            txid: offer.txid,
            reason,
        });
        out.push((
            self.left,
            ChannelEvent::abort(
                self.right,
                EventPayload::Cancel {
                    condition: offer.condition,
                    reason,
                },
                offer.txid,
            ),
        ));
    }

    fn forward(
        &mut self,
        offer: LockOffer,
        out: &mut Vec<(UserId, ChannelEvent)>,
        effects: &mut Vec<Effect>,
    ) {
        if self.try_lock(&offer) {
            effects.push(Effect::Locked {
                condition: offer.condition,
                value: offer.value,
                txid: offer.txid,
            });
            out.push((self.right, ChannelEvent::forward(self.left, offer)));
            return;
        }
        match rayo::on_forward_saturated(self, &offer) {
            SaturationDecision::Queue => {
                effects.push(Effect::Queued {
                    condition: offer.condition,
                    txid: offer.txid,
                });
                out.push((
                    self.left,
                    ChannelEvent {
                        decision: Decision::Forward,
                        payload: EventPayload::Queued {
                            condition: offer.condition,
                        },
                        origin: self.right,
                        txid: offer.txid,
                    },
                ));
                self.queue.push(offer);
            }
            SaturationDecision::Abort => {
                self.reject_offer(&offer, AbortReason::Capacity, out, effects)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn release(
        &mut self,
        condition: &Condition,
        value: Amount,
        txid: Option<Txid>,
        reason: AbortReason,
        ctx: &AgreeContext,
        out: &mut Vec<(UserId, ChannelEvent)>,
        effects: &mut Vec<Effect>,
    ) {
        self.cap = Amount(self.cap.0 + value.0);
        effects.push(Effect::Released {
            condition: *condition,
            value,
            reason,
        });
        out.push((
            self.left,
            ChannelEvent::abort(
                self.right,
                EventPayload::Cancel {
                    condition: *condition,
                    reason,
                },
                txid,
            ),
        ));
        let freed = self
            .cur
            .iter()
            .find(|f| f.condition == *condition)
            .map(|f| f.txid);
        if freed.is_some() || !self.queue.is_empty() {
            self.requeue_after_release(freed, ctx, out, effects);
        }
    }

    /// The deterministic transition applied by both replicas.
    pub fn apply(
        &mut self,
        ev: &ChannelEvent,
        ctx: &AgreeContext,
    ) -> (Vec<(UserId, ChannelEvent)>, Vec<Effect>) {
        let mut out = Vec::new();
        let mut effects = Vec::new();
        let reject = |effects: &mut Vec<Effect>, why: String| {
            effects.push(Effect::Rejected {
                condition: *ev.payload.condition(),
                why,
            })
        };
        match &ev.payload {
            EventPayload::Lock(offer) => {
                if ev.origin != self.left {
                    reject(&mut effects, "lock from non-payer".into());
                } else if self.locked(&offer.condition).is_some() {
                    reject(&mut effects, "condition already locked".into());
                } else {
                    self.forward(offer.clone(), &mut out, &mut effects);
                }
            }
            EventPayload::Release {
                condition,
                solution,
            } => {
                if ev.origin != self.right {
                    reject(&mut effects, "release from non-payee".into());
                } else {
                    match self
                        .locked_mut(condition)
                        .map(|c| c.fulfill(*solution, ctx.now, false))
                    {
                        Some(Ok(s)) => {
                            self.paid = Amount(self.paid.0 + s.value.0);
                            if let Some(t) = ev.txid {
                                // A release for a payment this replica never
                                // tracked is a protocol violation by the peer;
                                // the settlement itself stands.
                                let _ = rayo::on_accept_cleanup(self, t);
                            } else {
                                self.cur.retain(|f| f.condition != *condition);
                            }
                            effects.push(Effect::Fulfilled {
                                condition: *condition,
                                value: s.value,
                            });
                            out.push((self.left, ev.clone()));
                        }
                        Some(Err(e)) => reject(&mut effects, e.to_string()),
                        None => reject(&mut effects, "no such locked contract".into()),
                    }
                }
            }
            EventPayload::Cancel { condition, reason } => {
                if ev.origin != self.right {
                    reject(&mut effects, "cancel from non-payee".into());
                } else if let Some(c) = self.locked_mut(condition) {
                    c.status = ContractStatus::Refunded;
                    let value = c.value;
                    self.release(
                        condition,
                        value,
                        ev.txid,
                        *reason,
                        ctx,
                        &mut out,
                        &mut effects,
                    );
                } else {
                    reject(&mut effects, "no such locked contract".into());
                }
            }
            EventPayload::Refund { condition } => {
                if ev.origin != self.left {
                    reject(&mut effects, "refund from non-payer".into());
                } else {
                    match self.locked_mut(condition).map(|c| c.refund(ctx.now, false)) {
                        Some(Ok(s)) => self.release(
                            condition,
                            s.value,
                            ev.txid,
                            AbortReason::Timeout,
                            ctx,
                            &mut out,
                            &mut effects,
                        ),
                        Some(Err(e)) => reject(&mut effects, e.to_string()),
                        None => reject(&mut effects, "no such locked contract".into()),
                    }
                }
            }
            EventPayload::Withdraw { condition } => {
                let before = self.queue.len();
                self.queue.retain(|o| o.condition != *condition);
                if ev.origin == self.left && self.queue.len() < before {
                    effects.push(Effect::Withdrawn {
                        condition: *condition,
                    });
                } else {
                    reject(&mut effects, "nothing queued".into());
                }
            }
            EventPayload::Queued { .. } => reject(&mut effects, "notice is not an event".into()),
        }
        (out, effects)
    }

    /// Applies a settlement forced on the ledger.
    pub fn apply_onchain(&mut self, entry: &LedgerEntry, now: u64) -> Option<Effect> {
        let (condition, solution) = match *entry {
            LedgerEntry::HtlcFulfill {
                condition,
                preimage,
                ..
            } => (
                Condition::Hash(condition),
                Some(Solution::Preimage(preimage)),
            ),
            LedgerEntry::HtlcRefund { condition, .. } => (Condition::Hash(condition), None),
            LedgerEntry::DltcFulfill {
                condition,
                solution,
                ..
            } => {
                let c = self.contracts.iter().find(|c| {
                    matches!(c.condition, Condition::Dlog { element, .. } if element == condition)
                })?;
                (c.condition, Some(Solution::Exponent(solution)))
            }
            LedgerEntry::DltcRefund { condition, .. } => {
                let c = self.contracts.iter().find(|c| {
                    matches!(c.condition, Condition::Dlog { element, .. } if element == condition)
                })?;
                (c.condition, None)
            }
            _ => return None,
        };
        let contract = self.locked_mut(&condition)?;
        let value = contract.value;
        let result = match solution {
            Some(s) => contract.fulfill(s, now, false).map(|_| true),
            None => contract.refund(now, false).map(|_| false),
        };
        let effect = match result {
            Ok(true) => {
                self.paid = Amount(self.paid.0 + value.0);
                self.cur.retain(|f| f.condition != condition);
                Effect::Fulfilled { condition, value }
            }
            Ok(false) => {
                self.cap = Amount(self.cap.0 + value.0);
                self.cur.retain(|f| f.condition != condition);
                Effect::Released {
                    condition,
                    value,
                    reason: AbortReason::Timeout,
                }
            }
            Err(e) => Effect::Rejected {
                condition,
                why: e.to_string(),
            },
        };
        self.note_balance();
        Some(effect)
    }
}

/// Total order on the merged events: proposer with the higher identifier
/// first, then accept < abort < forward, then decreasing payment identifier.
pub fn order_events(mut events: Vec<ChannelEvent>) -> Vec<ChannelEvent> {
    // The encoded event breaks remaining ties so the order is total.
    events.sort_by_cached_key(|e| {
        let encoded = serde_json::to_string(e).expect("events serialize");
        (
            Reverse(e.origin),
            e.decision,
            Reverse(e.order_id()),
            encoded,
        )
    });
    events
}

/// Both endpoints run this on the two exchanged event sets and obtain the
/// same order, state and outbound messages.
pub fn agree(
    state: &ChannelState,
    events_left: &[ChannelEvent],
    events_right: &[ChannelEvent],
    ctx: &AgreeContext,
) -> Agreement {
    let merged: Vec<ChannelEvent> = events_left.iter().chain(events_right).cloned().collect();
    let ordered = order_events(merged);
    let mut next = state.clone();
    let mut outbound = Vec::new();
    let mut effects = Vec::new();
    for ev in &ordered {
        let (o, e) = next.apply(ev, ctx);
        outbound.extend(o);
        effects.extend(e);
    }
    next.seq += 1;
    next.note_balance();
    Agreement {
        ordered,
        state: next,
        outbound,
        effects,
    }
}

/// Test-only replica check.
pub fn check_replicas(a: &ChannelState, b: &ChannelState) -> Result<(), ChannelError> {
    if a.digest() == b.digest() {
        Ok(())
    } else {
        Err(ChannelError::StateDivergence(a.id))
    }
}

/// Locks `contract` on `state`, decrementing capacity.
pub fn lock(state: &mut ChannelState, contract: Contract) -> Result<(), ChannelError> {
    if contract.value > state.cap {
        return Err(ChannelError::InsufficientCapacity);
    }
    state.cap = Amount(state.cap.0 - contract.value.0);
    state.contracts.push(contract);
    Ok(())
}

/// On-ledger funds of every user.
pub type Wallets = BTreeMap<UserId, Amount>;

pub struct OpenRequest {
    pub u1: UserId,
    pub u2: UserId,
    pub deposit: Amount,
    pub timeout: u64,
    pub fee: Amount,
    pub nonce: u64,
    pub peer_authorizes: bool,
}

pub fn open_channel(
    ledger: &mut Ledger,
    wallets: &mut Wallets,
    req: OpenRequest,
) -> Result<ChannelState, ChannelError> {
    if req.u1 == req.u2 {
        return Err(ChannelError::SameEndpoints);
    }
    let have = wallets.get(&req.u1).copied().unwrap_or_default();
    if have < req.deposit {
        return Err(ChannelError::InsufficientFunds {
            user: req.u1,
            have,
            need: req.deposit,
        });
    }
    if !req.peer_authorizes {
        return Err(ChannelError::PeerRejected);
    }
    let id = ChannelId::derive(req.u1, req.u2, req.nonce);
    ledger
        .append(LedgerEntry::ChannelOpen {
            id,
            users: (req.u1, req.u2),
            deposit: req.deposit,
            timeout: req.timeout,
            fee: req.fee,
            metadata: OpenMetadata { fee: req.fee }.encode(),
        })
        .map_err(|e| match e {
            LedgerError::DuplicateChannelId(id) => ChannelError::DuplicateChannel(id),
            _ => ChannelError::SameEndpoints,
        })?;
    wallets.insert(req.u1, have.checked_sub(req.deposit)?);
    Ok(ChannelState::new(
        id,
        req.u1,
        req.u2,
        req.deposit,
        req.timeout,
        req.fee,
    ))
}

pub fn close_channel(
    ledger: &mut Ledger,
    wallets: &mut Wallets,
    state: &ChannelState,
    balance: FinalBalance,
    authorized: (bool, bool),
) -> Result<(), ChannelError> {
    if !ledger.is_open(state.id) {
        return Err(if ledger.opening(state.id).is_some() {
            ChannelError::AlreadyClosed(state.id)
        } else {
            ChannelError::UnknownChannel(state.id)
        });
    }
    if state.has_pending(ledger.now()) {
        return Err(ChannelError::PendingContracts(state.id));
    }
    if !state
        .agreed_balances
        .contains(&(balance.left, balance.right))
    {
        return Err(ChannelError::InvalidBalance(state.id));
    }
    if !(authorized.0 && authorized.1) {
        return Err(ChannelError::PeerRejected);
    }
    ledger
        .append(LedgerEntry::ChannelClose {
            id: state.id,
            balance: balance.clone(),
        })
        .map_err(|_| ChannelError::AlreadyClosed(state.id))?;
    *wallets.entry(state.left).or_default() = wallets
        .get(&state.left)
        .copied()
        .unwrap_or_default()
        .checked_add(balance.left)?;
    *wallets.entry(state.right).or_default() = wallets
        .get(&state.right)
        .copied()
        .unwrap_or_default()
        .checked_add(balance.right)?;
    Ok(())
}

pub fn bidirectional_update(
    state: &mut ChannelState,
    direction: Direction,
    v: Amount,
) -> Result<(), ChannelError> {
    let DirectionMode::Bidirectional { left, right, total } = &mut state.direction_mode else {
        return Err(ChannelError::NotBidirectional);
    };
    let (from, to) = match direction {
        Direction::LtoR => (left, right),
        Direction::RtoL => (right, left),
    };
    if *from < v || to.0 + v.0 > total.0 {
        return Err(ChannelError::InsufficientCapacity);
    }
    *from = Amount(from.0 - v.0);
    *to = Amount(to.0 + v.0);
    state.note_balance();
    Ok(())
}

//! Multi-hop payments over channel agreements: the sender, intermediary and
//! receiver routines of one user node, plus the settlement fallbacks that
//! move a contract onto the ledger when the counterparty stops answering.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::channel::{
    agree, AbortReason, AgreeContext, ChannelEvent, ChannelState, Effect, EventPayload, LockOffer,
};
use crate::contracts::{
    derive_upstream, dltc_derive, setup_dltc, setup_htlc, verify_hop, Condition, Proof,
    ProofBackend, Solution,
};
use crate::ledger::{Ledger, LedgerEntry, OpenMetadata};
use crate::primitives::{Amount, ChannelId, Group, Preimage, PrimitiveError, Scalar, Txid, UserId};
use crate::rayo::{txid_assign, Mode};
use crate::simnet::{Ctx, Process, WireMessage};

/// Rounds between the timeouts of adjacent contracts.
pub const DEFAULT_DELTA: u64 = 2;
/// Rounds a proposal may stay unanswered before the channel is contested.
pub const PATIENCE: u64 = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PaymentError {
    /// The sender's own channel cannot carry the first lock.
    #[error("first channel holds {have}, payment needs {need}")]
    InsufficientCapacity { have: Amount, need: Amount },
    #[error("invalid path: {0}")]
    PathInvalid(String),
    #[error(transparent)]
    Amount(#[from] PrimitiveError),
}

/// `[v_1, ..., v_{n+1}]` for a payment of `v` whose intermediaries charge
/// `fees` in path order: `v_1 = v + Σ fees` and each hop deducts its fee.
pub fn hop_amounts(v: Amount, fees: &[Amount]) -> Result<Vec<Amount>, PaymentError> {
    let mut first = v;
    for f in fees {
        first = first.checked_add(*f)?;
    }
    let mut out = Vec::with_capacity(fees.len() + 1);
    out.push(first);
    let mut cur = first;
    for f in fees {
        cur = cur.checked_sub(*f)?;
        out.push(cur);
    }
    Ok(out)
}

/// Timeouts of `contracts` consecutive contracts issued at `now`. The last
/// one expires at `now + delta·(contracts + 2) + slack` and each earlier
/// contract outlives its successor by `delta`.
pub fn hop_timeouts(now: u64, contracts: usize, delta: u64, slack: u64) -> Vec<u64> {
    let last = now + delta * (contracts as u64 + 2) + slack;
    (0..contracts)
        .map(|i| last + delta * (contracts - 1 - i) as u64)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContractKind {
    #[default]
    Htlc,
    Dltc,
}

impl std::str::FromStr for ContractKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "htlc" => Ok(ContractKind::Htlc),
            "dltc" => Ok(ContractKind::Dltc),
            other => Err(format!("unknown contract kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PaymentStatus {
    InFlight,
    Succeeded,
    Aborted {
        reason: AbortReason,
    },
    /// The first lock waits in the queue of the sender's own channel.
    Queued {
        hop: usize,
    },
}

impl PaymentStatus {
    pub fn is_final(&self) -> bool {
        matches!(
            self,
            PaymentStatus::Succeeded | PaymentStatus::Aborted { .. }
        )
    }
}

/// A payment as tracked by its sender.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Payment {
    pub id: usize,
    pub txid: Option<Txid>,
    pub sender: UserId,
    pub receiver: UserId,
    pub path: Vec<ChannelId>,
    pub users: Vec<UserId>,
    pub value: Amount,
    /// `v_i` locked on the i-th channel.
    pub amounts: Vec<Amount>,
    pub timeouts: Vec<u64>,
    pub conditions: Vec<Condition>,
    pub status: PaymentStatus,
    pub issued_round: u64,
    pub finished_round: Option<u64>,
}

impl Payment {
    /// `{txid?, path, value, status, hops: [{v_i, t_i, y_i}]}`.
    pub fn status_json(&self) -> Value {
        let hops: Vec<Value> = (0..self.path.len())
            .map(|i| {
                json!({
                    "v_i": self.amounts.get(i),
                    "t_i": self.timeouts.get(i),
                    "y_i": self.conditions.get(i).map(Condition::label),
                })
            })
            .collect();
        let mut v = json!({
            "id": self.id,
            "path": self.path,
            "value": self.value,
            "status": self.status,
            "hops": hops,
        });
        if let Some(t) = self.txid {
            v["txid"] = json!(t);
        }
        v
    }
}

/// Secret material an intermediary needs to turn a downstream release into
/// an upstream one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntermediateSecret {
    /// XOR share of the hash chain and the proof that links both conditions.
    Xor { x: Preimage, proof: Proof },
    /// Offsets of the incoming and outgoing group conditions.
    Offsets { z_in: Scalar, z_out: Scalar },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum HopKind {
    Intermediate {
        out_channel: ChannelId,
        cond_out: Condition,
        v_out: Amount,
        t_out: u64,
        secret: IntermediateSecret,
    },
    Receiver {
        v: Amount,
        secret: Solution,
    },
}

/// What the sender tells one user on the path, anonymously.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HopMessage {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub txid: Option<Txid>,
    pub in_channel: ChannelId,
    pub cond_in: Condition,
    pub t_in: u64,
    pub kind: HopKind,
}

/// One side's events for agreement number `seq` on `channel`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub channel: ChannelId,
    pub seq: u64,
    pub time: u64,
    pub events: Vec<ChannelEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "wire", rename_all = "snake_case")]
pub enum Wire {
    Hop(HopMessage),
    Propose(Proposal),
}

impl WireMessage for Wire {
    fn kind(&self) -> &'static str {
        match self {
            Wire::Hop(_) => "hop",
            Wire::Propose(_) => "propose",
        }
    }

    fn txid(&self) -> Option<Txid> {
        match self {
            Wire::Hop(h) => h.txid,
            Wire::Propose(p) => p.events.iter().find_map(|e| e.txid),
        }
    }

    fn label(&self) -> Option<String> {
        match self {
            Wire::Hop(h) => Some(h.cond_in.label()),
            Wire::Propose(p) => p.events.first().map(|e| e.payload.condition().label()),
        }
    }
}

/// Scripted deviations installed when a node is corrupted. Going offline
/// is a transport rule, not a behavior.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Behavior {
    /// Never release or cancel an incoming contract.
    #[serde(default)]
    pub withhold: bool,
    /// Cancel incoming contracts instead of forwarding or accepting.
    #[serde(default)]
    pub early_abort: bool,
    /// Release incoming contracts with random solutions.
    #[serde(default)]
    pub forge_preimage: bool,
    /// Extra capacity claimed on these channels.
    #[serde(default)]
    pub misreport: Vec<(ChannelId, Amount)>,
}

impl Behavior {
    pub fn is_honest(&self) -> bool {
        *self == Behavior::default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeConfig {
    pub mode: Mode,
    pub delta: u64,
    /// Extra rounds added to every timeout, room for queueing.
    pub slack: u64,
    pub contracts: ContractKind,
    pub group: Group,
    pub patience: u64,
    pub seed: u64,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            mode: Mode::Fulgor,
            delta: DEFAULT_DELTA,
            slack: 0,
            contracts: ContractKind::Htlc,
            group: Group::test(),
            patience: PATIENCE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaymentRequest {
    pub id: usize,
    pub receiver: UserId,
    pub path: Vec<ChannelId>,
    pub value: Amount,
    pub issue_round: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
struct Outstanding {
    seq: u64,
    time: u64,
    events: Vec<ChannelEvent>,
    sent_round: u64,
}

/// Local copy of one channel plus the agreement bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Replica {
    pub state: ChannelState,
    pending: Vec<ChannelEvent>,
    outstanding: Option<Outstanding>,
    early: BTreeMap<u64, Proposal>,
    /// The peer stopped answering; settlements go through the ledger.
    pub contested: bool,
}

impl Replica {
    fn new(state: ChannelState) -> Self {
        Replica {
            state,
            pending: Vec::new(),
            outstanding: None,
            early: BTreeMap::new(),
            contested: false,
        }
    }

    fn has_event(&self, pred: impl Fn(&ChannelEvent) -> bool) -> bool {
        self.pending.iter().any(&pred) || self.outstanding.iter().flat_map(|o| &o.events).any(&pred)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
struct Route {
    in_channel: ChannelId,
    cond_in: Condition,
    cond_out: Condition,
    secret: IntermediateSecret,
}

/// What a receiver accepted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Receipt {
    pub channel: ChannelId,
    pub condition: Condition,
    pub value: Amount,
    pub txid: Option<Txid>,
}

pub struct UserNode {
    pub id: UserId,
    pub config: NodeConfig,
    prover: ProofBackend,
    rng: ChaCha20Rng,
    pub channels: BTreeMap<ChannelId, Replica>,
    requests: Vec<PaymentRequest>,
    /// First locks of issued payments, proposed one round after the hop
    /// messages went out.
    deferred: Vec<(u64, ChannelId, ChannelEvent)>,
    pub payments: Vec<Payment>,
    hops: BTreeMap<Condition, HopMessage>,
    /// Locks that arrived before their hop message.
    waiting: BTreeMap<Condition, (ChannelId, LockOffer)>,
    routes: BTreeMap<Condition, Route>,
    pub received: Vec<Receipt>,
    pub behavior: Behavior,
    submitted: BTreeSet<String>,
}

impl UserNode {
    pub fn new(id: UserId, config: NodeConfig, prover: ProofBackend) -> Self {
        let rng = ChaCha20Rng::seed_from_u64(config.seed ^ ((id.0 as u64) << 32) ^ 0x9e37_79b9);
        UserNode {
            id,
            config,
            prover,
            rng,
            channels: BTreeMap::new(),
            requests: Vec::new(),
            deferred: Vec::new(),
            payments: Vec::new(),
            hops: BTreeMap::new(),
            waiting: BTreeMap::new(),
            routes: BTreeMap::new(),
            received: Vec::new(),
            behavior: Behavior::default(),
            submitted: BTreeSet::new(),
        }
    }

    pub fn add_channel(&mut self, state: ChannelState) {
        self.channels.insert(state.id, Replica::new(state));
    }

    /// Schedules a payment; it is issued at the first tick of `issue_round`.
    pub fn request(&mut self, req: PaymentRequest) {
        self.requests.push(req);
    }

    pub fn payment(&self, id: usize) -> Option<&Payment> {
        self.payments.iter().find(|p| p.id == id)
    }

    fn ctx_agree(&self, now: u64) -> AgreeContext {
        AgreeContext {
            now,
            delta: self.config.delta,
        }
    }

    fn fee_of(ledger: &Ledger, id: ChannelId) -> Option<Amount> {
        match ledger.opening(id)? {
            LedgerEntry::ChannelOpen { fee, metadata, .. } => Some(
                OpenMetadata::decode(metadata)
                    .map(|m| m.fee)
                    .unwrap_or(*fee),
            ),
            _ => None,
        }
    }

    fn path_users(&self, ledger: &Ledger, path: &[ChannelId]) -> Result<Vec<UserId>, PaymentError> {
        if path.is_empty() {
            return Err(PaymentError::PathInvalid("empty path".into()));
        }
        let mut users = vec![self.id];
        for id in path {
            if !ledger.is_open(*id) {
                return Err(PaymentError::PathInvalid(format!(
                    "channel {id} is not open"
                )));
            }
            let Some(LedgerEntry::ChannelOpen { users: (a, b), .. }) = ledger.opening(*id) else {
                return Err(PaymentError::PathInvalid(format!("channel {id} unknown")));
            };
            if *a != *users.last().expect("non-empty") {
                return Err(PaymentError::PathInvalid(format!(
                    "channel {id} does not continue the path"
                )));
            }
            if users.contains(b) {
                return Err(PaymentError::PathInvalid(format!("user {b} repeats")));
            }
            users.push(*b);
        }
        Ok(users)
    }

    /// Issues a payment of `value` along `path`, which starts at this node.
    /// A failed capacity check on the first channel aborts without sending
    /// anything.
    pub fn pay_sender(
        &mut self,
        req: &PaymentRequest,
        ctx: &mut Ctx<Wire>,
    ) -> Result<usize, PaymentError> {
        let users = self.path_users(ctx.ledger, &req.path)?;
        let n = req.path.len() - 1;
        let fees: Vec<Amount> = req.path[1..]
            .iter()
            .map(|c| Self::fee_of(ctx.ledger, *c).unwrap_or_default())
            .collect();
        let amounts = hop_amounts(req.value, &fees)?;
        let timeouts = hop_timeouts(ctx.now, n + 1, self.config.delta, self.config.slack);
        let txid = match self.config.mode {
            Mode::Fulgor => None,
            Mode::Rayo => Some(txid_assign(self.id, req.id as u64)),
        };
        let mut payment = Payment {
            id: req.id,
            txid,
            sender: self.id,
            receiver: req.receiver,
            path: req.path.clone(),
            users: users.clone(),
            value: req.value,
            amounts: amounts.clone(),
            timeouts: timeouts.clone(),
            conditions: Vec::new(),
            status: PaymentStatus::InFlight,
            issued_round: ctx.round,
            finished_round: None,
        };
        let first = self
            .channels
            .get(&req.path[0])
            .ok_or_else(|| PaymentError::PathInvalid("first channel is not ours".into()))?;
        let have = Amount(first.state.cap.0 + first.state.overdraft_allowance.0);
        if amounts[0] > have || first.contested {
            payment.status = PaymentStatus::Aborted {
                reason: AbortReason::Capacity,
            };
            payment.finished_round = Some(ctx.round);
            self.payments.push(payment);
            return Err(PaymentError::InsufficientCapacity {
                have,
                need: amounts[0],
            });
        }

        let mut messages: Vec<(UserId, HopMessage)> = Vec::with_capacity(n + 1);
        match self.config.contracts {
            ContractKind::Htlc => {
                let setup = setup_htlc(n + 1, &mut self.rng, &self.prover);
                payment.conditions = setup
                    .conditions()
                    .into_iter()
                    .map(Condition::Hash)
                    .collect();
                for i in 1..=n {
                    let h = &setup.hops[i - 1];
                    messages.push((
                        users[i],
                        HopMessage {
                            txid,
                            in_channel: req.path[i - 1],
                            cond_in: payment.conditions[i - 1],
                            t_in: timeouts[i - 1],
                            kind: HopKind::Intermediate {
                                out_channel: req.path[i],
                                cond_out: payment.conditions[i],
                                v_out: amounts[i],
                                t_out: timeouts[i],
                                secret: IntermediateSecret::Xor {
                                    x: h.x,
                                    proof: h.proof.clone().expect("inner hops carry proofs"),
                                },
                            },
                        },
                    ));
                }
                messages.push((
                    users[n + 1],
                    HopMessage {
                        txid,
                        in_channel: req.path[n],
                        cond_in: payment.conditions[n],
                        t_in: timeouts[n],
                        kind: HopKind::Receiver {
                            v: amounts[n],
                            secret: Solution::Preimage(setup.hops[n].x),
                        },
                    },
                ));
            }
            ContractKind::Dltc => {
                let setup = setup_dltc(n + 1, self.config.group, &mut self.rng);
                payment.conditions = (0..=n).map(|i| setup.condition(i)).collect();
                for i in 1..=n {
                    messages.push((
                        users[i],
                        HopMessage {
                            txid,
                            in_channel: req.path[i - 1],
                            cond_in: payment.conditions[i - 1],
                            t_in: timeouts[i - 1],
                            kind: HopKind::Intermediate {
                                out_channel: req.path[i],
                                cond_out: payment.conditions[i],
                                v_out: amounts[i],
                                t_out: timeouts[i],
                                secret: IntermediateSecret::Offsets {
                                    z_in: setup.offsets[i - 1],
                                    z_out: setup.offsets[i],
                                },
                            },
                        },
                    ));
                }
                messages.push((
                    users[n + 1],
                    HopMessage {
                        txid,
                        in_channel: req.path[n],
                        cond_in: payment.conditions[n],
                        t_in: timeouts[n],
                        kind: HopKind::Receiver {
                            v: amounts[n],
                            secret: Solution::Exponent(setup.receiver_solution()),
                        },
                    },
                ));
            }
        }
        for (to, m) in messages {
            ctx.send_anonymous(to, Wire::Hop(m));
        }
        let offer = LockOffer {
            txid,
            condition: payment.conditions[0],
            value: amounts[0],
            timeout: timeouts[0],
        };
        self.deferred.push((
            ctx.round + 1,
            req.path[0],
            ChannelEvent::forward(self.id, offer),
        ));
        let id = payment.id;
        self.payments.push(payment);
        Ok(id)
    }

    fn on_hop(&mut self, m: HopMessage, ctx: &mut Ctx<Wire>) {
        let Some(rep) = self.channels.get(&m.in_channel) else {
            return;
        };
        if rep.state.right != self.id {
            return;
        }
        if let HopKind::Intermediate { out_channel, .. } = &m.kind {
            if self
                .channels
                .get(out_channel)
                .is_none_or(|r| r.state.left != self.id)
            {
                return;
            }
        }
        let cond = m.cond_in;
        self.hops.insert(cond, m);
        if let Some((channel, offer)) = self.waiting.remove(&cond) {
            self.on_lock(channel, offer, ctx);
        }
    }

    fn on_lock(&mut self, channel: ChannelId, offer: LockOffer, ctx: &mut Ctx<Wire>) {
        let Some(hop) = self.hops.get(&offer.condition).cloned() else {
            self.waiting.insert(offer.condition, (channel, offer));
            return;
        };
        if hop.in_channel != channel {
            return;
        }
        if self.behavior.early_abort {
            self.push_cancel(channel, offer.condition, AbortReason::Adversary, offer.txid);
            return;
        }
        if self.behavior.withhold && matches!(hop.kind, HopKind::Receiver { .. }) {
            return;
        }
        match &hop.kind {
            HopKind::Intermediate { .. } => self.pay_intermediate(channel, &offer, &hop, ctx),
            HopKind::Receiver { .. } => self.pay_receiver(channel, &offer, &hop, ctx),
        }
    }

    /// Checks an incoming lock against the hop message and, if everything
    /// matches, locks the outgoing contract.
    pub fn pay_intermediate(
        &mut self,
        channel: ChannelId,
        offer: &LockOffer,
        hop: &HopMessage,
        ctx: &mut Ctx<Wire>,
    ) {
        let HopKind::Intermediate {
            out_channel,
            cond_out,
            v_out,
            t_out,
            secret,
        } = &hop.kind
        else {
            return;
        };
        let fee = Self::fee_of(ctx.ledger, *out_channel).unwrap_or_default();
        let links = match (secret, hop.cond_in, *cond_out) {
            (
                IntermediateSecret::Xor { x, proof },
                Condition::Hash(y_in),
                Condition::Hash(y_out),
            ) => verify_hop(&self.prover, y_out, y_in, *x, proof),
            (
                IntermediateSecret::Offsets { z_in, z_out },
                Condition::Dlog {
                    element: e_in,
                    group,
                },
                Condition::Dlog { element: e_out, .. },
            ) => {
                let g = Group::from(group);
                e_in == g.mul(e_out, g.g_pow(g.scalar_sub(*z_in, *z_out)))
            }
            _ => false,
        };
        let valid = offer.timeout == hop.t_in
            && t_out + self.config.delta == hop.t_in
            && offer.value.0 == v_out.0 + fee.0
            && links;
        let contested = self.channels.get(out_channel).is_none_or(|r| r.contested);
        if !valid || contested {
            let reason = if valid {
                AbortReason::Capacity
            } else {
                AbortReason::Verification
            };
            self.push_cancel(channel, offer.condition, reason, offer.txid);
            return;
        }
        self.routes.insert(
            *cond_out,
            Route {
                in_channel: channel,
                cond_in: hop.cond_in,
                cond_out: *cond_out,
                secret: secret.clone(),
            },
        );
        let out = LockOffer {
            txid: offer.txid,
            condition: *cond_out,
            value: *v_out,
            timeout: *t_out,
        };
        let me = self.id;
        self.channels
            .get_mut(out_channel)
            .expect("checked above")
            .pending
            .push(ChannelEvent::forward(me, out));
    }

    /// Releases the incoming contract if the solution opens it and enough
    /// time is left to settle.
    pub fn pay_receiver(
        &mut self,
        channel: ChannelId,
        offer: &LockOffer,
        hop: &HopMessage,
        ctx: &mut Ctx<Wire>,
    ) {
        let HopKind::Receiver { v, secret } = &hop.kind else {
            return;
        };
        let ok = hop.cond_in.check(secret).is_ok()
            && offer.timeout == hop.t_in
            && hop.t_in > ctx.now + self.config.delta
            && offer.value == *v;
        if !ok {
            self.push_cancel(channel, offer.condition, AbortReason::Receiver, offer.txid);
            return;
        }
        let solution = if self.behavior.forge_preimage {
            self.forged(secret)
        } else {
            *secret
        };
        self.received.push(Receipt {
            channel,
            condition: offer.condition,
            value: offer.value,
            txid: offer.txid,
        });
        let me = self.id;
        if let Some(rep) = self.channels.get_mut(&channel) {
            rep.pending.push(ChannelEvent::accept(
                me,
                offer.condition,
                solution,
                offer.txid,
            ));
        }
    }

    fn forged(&mut self, like: &Solution) -> Solution {
        match like {
            Solution::Preimage(_) => Solution::Preimage(Preimage::random(&mut self.rng)),
            Solution::Exponent(_) => {
                Solution::Exponent(self.config.group.random_scalar(&mut self.rng))
            }
        }
    }

    fn push_cancel(
        &mut self,
        channel: ChannelId,
        condition: Condition,
        reason: AbortReason,
        txid: Option<Txid>,
    ) {
        let me = self.id;
        if let Some(rep) = self.channels.get_mut(&channel) {
            if rep.state.locked(&condition).is_some() {
                rep.pending.push(ChannelEvent::abort(
                    me,
                    EventPayload::Cancel { condition, reason },
                    txid,
                ));
            }
        }
    }

    fn sender_payment_mut(
        &mut self,
        channel: ChannelId,
        condition: &Condition,
    ) -> Option<&mut Payment> {
        self.payments
            .iter_mut()
            .find(|p| p.path.first() == Some(&channel) && p.conditions.first() == Some(condition))
    }

    /// The downstream contract on `channel` was opened with `solution`.
    fn on_release(
        &mut self,
        channel: ChannelId,
        condition: Condition,
        solution: Solution,
        ctx: &mut Ctx<Wire>,
    ) {
        if let Some(route) = self.routes.remove(&condition) {
            if self.behavior.withhold {
                return;
            }
            let upstream = if self.behavior.forge_preimage {
                Some(self.forged(&solution))
            } else {
                match (&route.secret, solution, route.cond_out) {
                    (
                        IntermediateSecret::Xor { x, .. },
                        Solution::Preimage(r),
                        Condition::Hash(y),
                    ) => derive_upstream(x, &r, &y).ok().map(Solution::Preimage),
                    (
                        IntermediateSecret::Offsets { z_in, z_out },
                        Solution::Exponent(z),
                        Condition::Dlog { group, .. },
                    ) => Some(Solution::Exponent(dltc_derive(
                        &Group::from(group),
                        z,
                        *z_out,
                        *z_in,
                    ))),
                    _ => None,
                }
            };
            let Some(upstream) = upstream else {
                return;
            };
            let txid = self.hops.get(&route.cond_in).and_then(|h| h.txid);
            let me = self.id;
            if let Some(rep) = self.channels.get_mut(&route.in_channel) {
                if rep.state.locked(&route.cond_in).is_some() {
                    rep.pending
                        .push(ChannelEvent::accept(me, route.cond_in, upstream, txid));
                }
            }
            return;
        }
        let round = ctx.round;
        if let Some(p) = self.sender_payment_mut(channel, &condition) {
            if !p.status.is_final() {
                p.status = PaymentStatus::Succeeded;
                p.finished_round = Some(round);
            }
        }
    }

    /// The downstream contract or offer on `channel` is gone without payment.
    fn on_cancel(
        &mut self,
        channel: ChannelId,
        condition: Condition,
        reason: AbortReason,
        ctx: &mut Ctx<Wire>,
    ) {
        if let Some(route) = self.routes.remove(&condition) {
            if self.behavior.withhold {
                return;
            }
            let txid = self.hops.get(&route.cond_in).and_then(|h| h.txid);
            self.push_cancel(
                route.in_channel,
                route.cond_in,
                AbortReason::Downstream,
                txid,
            );
            return;
        }
        let round = ctx.round;
        if let Some(p) = self.sender_payment_mut(channel, &condition) {
            if !p.status.is_final() {
                p.status = PaymentStatus::Aborted { reason };
                p.finished_round = Some(round);
            }
        }
    }

    fn react(
        &mut self,
        channel: ChannelId,
        outbound: Vec<(UserId, ChannelEvent)>,
        effects: Vec<Effect>,
        ctx: &mut Ctx<Wire>,
    ) {
        let is_left = self
            .channels
            .get(&channel)
            .is_some_and(|r| r.state.left == self.id);
        for eff in effects {
            match eff {
                Effect::Locked { condition, .. } if is_left => {
                    if let Some(p) = self.sender_payment_mut(channel, &condition) {
                        if matches!(p.status, PaymentStatus::Queued { .. }) {
                            p.status = PaymentStatus::InFlight;
                        }
                    }
                }
                Effect::Withdrawn { condition } if is_left => {
                    self.on_cancel(channel, condition, AbortReason::Withdrawn, ctx);
                }
                _ => {}
            }
        }
        for (to, ev) in outbound {
            if to != self.id {
                continue;
            }
            match ev.payload {
                EventPayload::Lock(offer) => self.on_lock(channel, offer, ctx),
                EventPayload::Queued { condition } => {
                    if let Some(p) = self.sender_payment_mut(channel, &condition) {
                        if !p.status.is_final() {
                            p.status = PaymentStatus::Queued { hop: 0 };
                        }
                    }
                }
                EventPayload::Release {
                    condition,
                    solution,
                } => self.on_release(channel, condition, solution, ctx),
                EventPayload::Cancel { condition, reason } => {
                    self.on_cancel(channel, condition, reason, ctx)
                }
                EventPayload::Refund { .. } | EventPayload::Withdraw { .. } => {}
            }
        }
    }

    fn handle_proposal(&mut self, from: UserId, p: Proposal, ctx: &mut Ctx<Wire>) {
        let me = self.id;
        let delta = self.config.delta;
        let Some(rep) = self.channels.get_mut(&p.channel) else {
            return;
        };
        if rep.state.peer_of(me) != Some(from) || rep.contested || p.seq < rep.state.seq {
            return;
        }
        if p.seq > rep.state.seq {
            rep.early.insert(p.seq, p);
            return;
        }
        let channel = p.channel;
        let (mine, time) = match rep.outstanding.take() {
            Some(o) => (o.events, o.time.max(p.time)),
            None => {
                let mine = std::mem::take(&mut rep.pending);
                ctx.send(
                    from,
                    Wire::Propose(Proposal {
                        channel,
                        seq: p.seq,
                        time: ctx.now,
                        events: mine.clone(),
                    }),
                );
                (mine, ctx.now.max(p.time))
            }
        };
        let agreement = agree(
            &rep.state,
            &mine,
            &p.events,
            &AgreeContext { now: time, delta },
        );
        rep.state = agreement.state;
        let seq = rep.state.seq;
        rep.early.retain(|s, _| *s >= seq);
        let next = rep.early.remove(&seq);
        self.react(channel, agreement.outbound, agreement.effects, ctx);
        if let Some(n) = next {
            self.handle_proposal(from, n, ctx);
        }
    }

    fn submit_once(&mut self, entry: LedgerEntry, ctx: &mut Ctx<Wire>) {
        let key = serde_json::to_string(&entry).expect("entry serializes");
        if self.submitted.insert(key) {
            ctx.submit(entry);
        }
    }

    /// Ledger entry forcing `ev` (a release or refund) on `channel`, if it
    /// is valid at `now`.
    fn onchain_entry(rep: &Replica, ev: &ChannelEvent, now: u64) -> Option<LedgerEntry> {
        let mut c = rep.state.locked(ev.payload.condition())?.clone();
        let settled = match &ev.payload {
            EventPayload::Release { solution, .. } => c.fulfill(*solution, now, true),
            EventPayload::Refund { .. } => c.refund(now, true),
            _ => return None,
        };
        settled.ok()?.ledger_entry
    }

    /// Expired contracts this node pays on are reclaimed.
    pub fn settle_on_expiry(&mut self, ctx: &mut Ctx<Wire>) {
        let me = self.id;
        let mut onchain = Vec::new();
        for rep in self.channels.values_mut() {
            if rep.state.left != me {
                continue;
            }
            let expired: Vec<(Condition, Option<Txid>)> = rep
                .state
                .contracts
                .iter()
                .filter(|c| c.is_locked() && ctx.now >= c.timeout)
                .map(|c| {
                    let txid = rep
                        .state
                        .cur
                        .iter()
                        .find(|f| f.condition == c.condition)
                        .map(|f| f.txid);
                    (c.condition, txid)
                })
                .collect();
            for (condition, txid) in expired {
                let ev = ChannelEvent::abort(me, EventPayload::Refund { condition }, txid);
                if rep.contested {
                    if let Some(e) = Self::onchain_entry(rep, &ev, ctx.now) {
                        onchain.push(e);
                    }
                } else if !rep.has_event(|e| {
                    matches!(&e.payload, EventPayload::Refund { condition: c } if *c == condition)
                }) {
                    rep.pending.push(ev);
                }
            }
        }
        for e in onchain {
            self.submit_once(e, ctx);
        }
    }

    fn withdraw_stale_offers(&mut self, ctx: &mut Ctx<Wire>) {
        let me = self.id;
        let delta = self.config.delta;
        for rep in self.channels.values_mut() {
            if rep.state.left != me {
                continue;
            }
            let stale: Vec<LockOffer> = rep
                .state
                .queue
                .iter()
                .filter(|o| o.timeout <= ctx.now + delta)
                .cloned()
                .collect();
            for o in stale {
                let condition = o.condition;
                if !rep.has_event(|e| matches!(&e.payload, EventPayload::Withdraw { condition: c } if *c == condition)) {
                    rep.pending
                        .push(ChannelEvent::abort(me, EventPayload::Withdraw { condition }, o.txid));
                }
            }
        }
    }

    /// Releases close to their deadline, or stuck with a silent peer, go to
    /// the ledger.
    fn enforce_deadlines(&mut self, ctx: &mut Ctx<Wire>) {
        let me = self.id;
        let delta = self.config.delta;
        let patience = self.config.patience;
        let mut entries = Vec::new();
        let mut reactions = Vec::new();
        for (id, rep) in self.channels.iter_mut() {
            let near = |rep: &Replica, ev: &ChannelEvent| {
                matches!(ev.payload, EventPayload::Release { .. })
                    && rep
                        .state
                        .locked(ev.payload.condition())
                        .is_some_and(|c| c.timeout <= ctx.now + delta)
            };
            let mut keep = Vec::new();
            for ev in std::mem::take(&mut rep.pending) {
                if near(rep, &ev) {
                    entries.extend(Self::onchain_entry(rep, &ev, ctx.now));
                } else {
                    keep.push(ev);
                }
            }
            rep.pending = keep;
            if let Some(o) = &rep.outstanding {
                for ev in &o.events {
                    if o.sent_round < ctx.round && near(rep, ev) {
                        entries.extend(Self::onchain_entry(rep, ev, ctx.now));
                    }
                }
                if o.sent_round + patience <= ctx.round {
                    rep.contested = true;
                    let o = rep.outstanding.take().expect("checked");
                    rep.pending.splice(0..0, o.events);
                }
            }
            if rep.contested && !rep.pending.is_empty() {
                let (settle, local): (Vec<_>, Vec<_>) = std::mem::take(&mut rep.pending)
                    .into_iter()
                    .filter(|e| !matches!(e.payload, EventPayload::Lock(_)) || e.origin != me)
                    .partition(|e| {
                        matches!(
                            e.payload,
                            EventPayload::Release { .. } | EventPayload::Refund { .. }
                        )
                    });
                for ev in &settle {
                    entries.extend(Self::onchain_entry(rep, ev, ctx.now));
                }
                let a = agree(
                    &rep.state,
                    &local,
                    &[],
                    &AgreeContext {
                        now: ctx.now,
                        delta,
                    },
                );
                rep.state = a.state;
                reactions.push((*id, a.outbound, a.effects));
            }
        }
        for e in entries {
            self.submit_once(e, ctx);
        }
        for (id, outbound, effects) in reactions {
            self.react(id, outbound, effects, ctx);
        }
    }

    fn propose_pending(&mut self, ctx: &mut Ctx<Wire>) {
        let me = self.id;
        for (id, rep) in self.channels.iter_mut() {
            if rep.contested || rep.outstanding.is_some() || rep.pending.is_empty() {
                continue;
            }
            let events = std::mem::take(&mut rep.pending);
            let peer = rep.state.peer_of(me).expect("own channel");
            ctx.send(
                peer,
                Wire::Propose(Proposal {
                    channel: *id,
                    seq: rep.state.seq,
                    time: ctx.now,
                    events: events.clone(),
                }),
            );
            rep.outstanding = Some(Outstanding {
                seq: rep.state.seq,
                time: ctx.now,
                events,
                sent_round: ctx.round,
            });
        }
    }

    fn apply_onchain(&mut self, index: u64, entry: &LedgerEntry, ctx: &mut Ctx<Wire>) {
        let Some(channel) = entry.channel() else {
            return;
        };
        let me = self.id;
        let Some(rep) = self.channels.get_mut(&channel) else {
            return;
        };
        let Some(effect) = rep.state.apply_onchain(entry, index) else {
            return;
        };
        let is_left = rep.state.left == me;
        let settled = match &effect {
            Effect::Fulfilled { condition, .. } | Effect::Released { condition, .. } => {
                Some(*condition)
            }
            _ => None,
        };
        if let Some(c) = settled {
            rep.pending.retain(|e| *e.payload.condition() != c);
        }
        if !is_left {
            return;
        }
        match effect {
            Effect::Fulfilled { condition, .. } => {
                let solution = match *entry {
                    LedgerEntry::HtlcFulfill { preimage, .. } => Solution::Preimage(preimage),
                    LedgerEntry::DltcFulfill { solution, .. } => Solution::Exponent(solution),
                    _ => return,
                };
                self.on_release(channel, condition, solution, ctx);
            }
            Effect::Released {
                condition, reason, ..
            } => self.on_cancel(channel, condition, reason, ctx),
            _ => {}
        }
    }

    fn issue_due(&mut self, ctx: &mut Ctx<Wire>) {
        let (due, later): (Vec<_>, Vec<_>) = std::mem::take(&mut self.requests)
            .into_iter()
            .partition(|r| r.issue_round <= ctx.round);
        self.requests = later;
        for req in due {
            if let Err(e) = self.pay_sender(&req, ctx) {
                ctx.note(json!({"round": ctx.round, "payment": req.id, "error": e.to_string()}));
            }
        }
        let (due, later): (Vec<_>, Vec<_>) = std::mem::take(&mut self.deferred)
            .into_iter()
            .partition(|(r, _, _)| *r <= ctx.round);
        self.deferred = later;
        for (_, channel, ev) in due {
            if let Some(rep) = self.channels.get_mut(&channel) {
                rep.pending.push(ev);
            }
        }
    }
}

impl Process for UserNode {
    type Msg = Wire;
    type Script = Behavior;

    fn id(&self) -> UserId {
        self.id
    }

    fn on_message(&mut self, from: Option<UserId>, msg: Wire, ctx: &mut Ctx<Wire>) {
        match msg {
            Wire::Hop(h) => self.on_hop(h, ctx),
            Wire::Propose(p) => {
                if let Some(from) = from {
                    self.handle_proposal(from, p, ctx);
                }
            }
        }
    }

    fn on_ledger(&mut self, index: u64, entry: &LedgerEntry, ctx: &mut Ctx<Wire>) {
        self.apply_onchain(index, entry, ctx);
    }

    fn on_tick(&mut self, ctx: &mut Ctx<Wire>) {
        self.issue_due(ctx);
        self.settle_on_expiry(ctx);
        self.withdraw_stale_offers(ctx);
        self.enforce_deadlines(ctx);
        self.propose_pending(ctx);
    }

    fn is_idle(&self, _now: u64) -> bool {
        self.requests.is_empty()
            && self.deferred.is_empty()
            && self.channels.values().all(|r| {
                r.pending.is_empty()
                    && r.outstanding.is_none()
                    && (r.state.left != self.id
                        || (r.state.queue.is_empty()
                            && r.state.contracts.iter().all(|c| !c.is_locked())))
            })
    }

    fn export_state(&self) -> Value {
        json!({
            "id": self.id,
            "channels": self.channels.values().map(|r| r.state.snapshot()).collect::<Vec<_>>(),
            "payments": self.payments.iter().map(Payment::status_json).collect::<Vec<_>>(),
            "hops": self.hops.len(),
            "routes": self.routes.len(),
        })
    }

    fn corrupt(&mut self, script: &Behavior) {
        for (channel, extra) in &script.misreport {
            if let Some(rep) = self.channels.get_mut(channel) {
                rep.state.overdraft_allowance = Amount(rep.state.overdraft_allowance.0 + extra.0);
            }
        }
        self.behavior = script.clone();
    }
}

impl UserNode {
    /// Agreement-time view used by tests and the harness.
    pub fn agree_context(&self, now: u64) -> AgreeContext {
        self.ctx_agree(now)
    }
}

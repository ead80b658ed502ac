//! Scenario files, execution, metrics, and the properties checked after
//! every run: conservation, balance security, atomicity, serializability
//! and equivalence with the reference model.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::channel::{open_channel, AbortReason, ChannelState, OpenRequest, Wallets};
use crate::contracts::{ContractStatus, ProofBackend, ProofBackendKind};
use crate::ledger::Ledger;
use crate::payment::{
    hop_amounts, hop_timeouts, Behavior, ContractKind, NodeConfig, Payment, PaymentRequest,
    PaymentStatus, UserNode, DEFAULT_DELTA, PATIENCE,
};
use crate::primitives::{Amount, ChannelId, Group, Txid, UserId, UNITS_PER_COIN};
use crate::rayo::{txid_assign, Mode};
use crate::refmodel::{
    execute as ideal_execute, interleavings, IdealOp, IdealPaymentSpec, IdealState, IdealStatus,
    Reply,
};
use crate::simnet::{
    enumerate_schedules, Action, Exploration, ExploreBound, Network, Rule, Schedule, ScheduleLog,
};

pub const SCENARIO_VERSION: u32 = 1;
/// Largest number of committed payments `check_serializable` permutes.
pub const MAX_SERIAL_PAYMENTS: usize = 6;
/// Largest number of payments searched for a matching ideal execution.
pub const MAX_EQUIVALENCE_PAYMENTS: usize = 4;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    ScenarioInvalid(String),
    #[error("{0} payments exceed the brute-force limit of {MAX_SERIAL_PAYMENTS}")]
    TooLarge(usize),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn invalid(msg: impl Into<String>) -> HarnessError {
    HarnessError::ScenarioInvalid(msg.into())
}

/// Amounts in scenario files are decimal coin strings such as `"2.75"`.
mod coins {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn to_string(a: Amount) -> String {
        let whole = a.0 / UNITS_PER_COIN;
        let frac = a.0 % UNITS_PER_COIN;
        if frac == 0 {
            whole.to_string()
        } else {
            let f = format!("{frac:08}");
            format!("{whole}.{}", f.trim_end_matches('0'))
        }
    }

    pub fn serialize<S: Serializer>(a: &Amount, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&to_string(*a))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Amount, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }

    pub mod opt {
        use super::*;

        pub fn serialize<S: Serializer>(a: &Option<Amount>, s: S) -> Result<S::Ok, S::Error> {
            match a {
                Some(a) => s.serialize_str(&to_string(*a)),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Amount>, D::Error> {
            Option::<String>::deserialize(d)?
                .map(|s| s.parse().map_err(serde::de::Error::custom))
                .transpose()
        }
    }
}

pub use coins::to_string as format_coins;

fn default_delta() -> u64 {
    DEFAULT_DELTA
}

fn default_lifetime() -> u64 {
    100_000
}

fn default_funds() -> Amount {
    Amount::coins(1_000)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub pcnlab_scenario: u32,
    pub name: String,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub proof_backend: ProofBackendKind,
    #[serde(default)]
    pub contracts: ContractKind,
    #[serde(default = "default_delta")]
    pub delta: u64,
    #[serde(default)]
    pub slack: u64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSpec {
    pub name: String,
    #[serde(with = "coins", default = "default_funds")]
    pub funds: Amount,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub from: String,
    pub to: String,
    #[serde(with = "coins")]
    pub deposit: Amount,
    #[serde(with = "coins", default)]
    pub fee: Amount,
    /// Lifetime of the channel in ledger time.
    #[serde(default = "default_lifetime")]
    pub timeout: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaymentSpec {
    pub sender: String,
    pub receiver: String,
    /// User names from sender to receiver. When omitted, the fewest-hop
    /// route is filled in on load.
    #[serde(default)]
    pub path: Vec<String>,
    #[serde(with = "coins")]
    pub value: Amount,
    #[serde(default = "one")]
    pub issue_round: u64,
}

fn one() -> u64 {
    1
}

/// Transport delay applied to everything a user sends or receives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Offline {
    pub delay: u64,
    #[serde(default)]
    pub from_round: u64,
    #[serde(default)]
    pub until_round: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversarySpec {
    pub user: String,
    /// Round at whose start the user is corrupted; 0 means from the outset.
    #[serde(default)]
    pub round: u64,
    #[serde(default)]
    pub withhold: bool,
    #[serde(default)]
    pub early_abort: bool,
    #[serde(default)]
    pub forge_preimage: bool,
    /// `[from, to, extra]`: claim `extra` more capacity on that channel.
    #[serde(default)]
    pub misreport: Vec<(String, String, String)>,
    #[serde(default)]
    pub offline: Option<Offline>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expect {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payment: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<(String, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "coins::opt")]
    pub paid: Option<Amount>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub serializable: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_successes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    User(UserSpec),
    Channel(ChannelSpec),
    Payment(PaymentSpec),
    Adversary(AdversarySpec),
    Expect(Expect),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub header: Header,
    pub users: Vec<UserSpec>,
    pub channels: Vec<ChannelSpec>,
    pub payments: Vec<PaymentSpec>,
    pub adversaries: Vec<AdversarySpec>,
    pub expects: Vec<Expect>,
}

impl Scenario {
    pub fn new(name: &str, mode: Mode) -> Self {
        Scenario {
            header: Header {
                pcnlab_scenario: SCENARIO_VERSION,
                name: name.to_string(),
                mode,
                proof_backend: ProofBackendKind::Revealing,
                contracts: ContractKind::Htlc,
                delta: DEFAULT_DELTA,
                slack: 0,
                seed: 0,
            },
            users: Vec::new(),
            channels: Vec::new(),
            payments: Vec::new(),
            adversaries: Vec::new(),
            expects: Vec::new(),
        }
    }

    pub fn user(&mut self, name: &str) -> &mut Self {
        self.users.push(UserSpec {
            name: name.to_string(),
            funds: default_funds(),
        });
        self
    }

    pub fn channel(&mut self, from: &str, to: &str, deposit: Amount, fee: Amount) -> &mut Self {
        self.channels.push(ChannelSpec {
            from: from.to_string(),
            to: to.to_string(),
            deposit,
            fee,
            timeout: default_lifetime(),
        });
        self
    }

    pub fn pay(&mut self, path: &[&str], value: Amount, issue_round: u64) -> &mut Self {
        self.payments.push(PaymentSpec {
            sender: path[0].to_string(),
            receiver: path[path.len() - 1].to_string(),
            path: path.iter().map(|s| s.to_string()).collect(),
            value,
            issue_round,
        });
        self
    }

    pub fn from_jsonl(text: &str) -> Result<Scenario, HarnessError> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header: Header =
            serde_json::from_str(lines.next().ok_or_else(|| invalid("empty scenario"))?)?;
        if header.pcnlab_scenario != SCENARIO_VERSION {
            return Err(invalid(format!(
                "unsupported version {}",
                header.pcnlab_scenario
            )));
        }
        let mut s = Scenario {
            header,
            users: Vec::new(),
            channels: Vec::new(),
            payments: Vec::new(),
            adversaries: Vec::new(),
            expects: Vec::new(),
        };
        for l in lines {
            match serde_json::from_str::<Line>(l)? {
                Line::User(u) => s.users.push(u),
                Line::Channel(c) => s.channels.push(c),
                Line::Payment(p) => s.payments.push(p),
                Line::Adversary(a) => s.adversaries.push(a),
                Line::Expect(e) => s.expects.push(e),
            }
        }
        s.route_missing_paths()?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        let lines = self
            .users
            .iter()
            .cloned()
            .map(Line::User)
            .chain(self.channels.iter().cloned().map(Line::Channel))
            .chain(self.payments.iter().cloned().map(Line::Payment))
            .chain(self.adversaries.iter().cloned().map(Line::Adversary))
            .chain(self.expects.iter().cloned().map(Line::Expect));
        for l in lines {
            out.push_str(&serde_json::to_string(&l).expect("line serializes"));
            out.push('\n');
        }
        out
    }

    /// Fewest-hop directed route over the declared channels.
    pub fn shortest_path(&self, from: &str, to: &str) -> Option<Vec<String>> {
        let mut prev: BTreeMap<&str, &str> = BTreeMap::new();
        let mut queue = VecDeque::from([from]);
        while let Some(u) = queue.pop_front() {
            if u == to {
                let mut path = vec![to.to_string()];
                let mut cur = to;
                while cur != from {
                    cur = prev[cur];
                    path.push(cur.to_string());
                }
                path.reverse();
                return Some(path);
            }
            for c in self.channels.iter().filter(|c| c.from == u) {
                if c.to != from && !prev.contains_key(c.to.as_str()) {
                    prev.insert(&c.to, u);
                    queue.push_back(&c.to);
                }
            }
        }
        None
    }

    fn route_missing_paths(&mut self) -> Result<(), HarnessError> {
        for i in 0..self.payments.len() {
            if self.payments[i].path.is_empty() {
                let p = &self.payments[i];
                let path = self.shortest_path(&p.sender, &p.receiver).ok_or_else(|| {
                    invalid(format!(
                        "payment {i}: no route {} -> {}",
                        p.sender, p.receiver
                    ))
                })?;
                self.payments[i].path = path;
            }
        }
        Ok(())
    }

    pub fn user_id(&self, name: &str) -> Option<UserId> {
        self.users
            .iter()
            .position(|u| u.name == name)
            .map(|i| UserId(i as u32))
    }

    fn channel_index(&self, from: &str, to: &str) -> Option<usize> {
        self.channels
            .iter()
            .position(|c| c.from == from && c.to == to)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let mut names = BTreeSet::new();
        for u in &self.users {
            if !names.insert(u.name.as_str()) {
                return Err(invalid(format!("user {} declared twice", u.name)));
            }
        }
        for c in &self.channels {
            for end in [&c.from, &c.to] {
                if !names.contains(end.as_str()) {
                    return Err(invalid(format!("channel endpoint {end} is not a user")));
                }
            }
            if c.from == c.to {
                return Err(invalid("channel endpoints must differ"));
            }
            if c.deposit == Amount::ZERO {
                return Err(invalid("channel deposit must be positive"));
            }
        }
        for (i, p) in self.payments.iter().enumerate() {
            if p.path.len() < 2 {
                return Err(invalid(format!("payment {i} needs at least two users")));
            }
            if p.path.first() != Some(&p.sender) || p.path.last() != Some(&p.receiver) {
                return Err(invalid(format!(
                    "payment {i} path must run from sender to receiver"
                )));
            }
            let distinct: BTreeSet<&String> = p.path.iter().collect();
            if distinct.len() != p.path.len() {
                return Err(invalid(format!("payment {i} path repeats a user")));
            }
            for w in p.path.windows(2) {
                if self.channel_index(&w[0], &w[1]).is_none() {
                    return Err(invalid(format!(
                        "payment {i}: no channel {} -> {}",
                        w[0], w[1]
                    )));
                }
            }
        }
        for a in &self.adversaries {
            if !names.contains(a.user.as_str()) {
                return Err(invalid(format!("adversary {} is not a user", a.user)));
            }
            for (f, t, x) in &a.misreport {
                if self.channel_index(f, t).is_none() {
                    return Err(invalid(format!("misreport on missing channel {f} -> {t}")));
                }
                x.parse::<Amount>().map_err(|e| invalid(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn corrupted(&self) -> BTreeSet<UserId> {
        self.adversaries
            .iter()
            .filter_map(|a| self.user_id(&a.user))
            .collect()
    }
}

/// Canned scenario files shipped with the crate.
pub const CANNED: [(&str, &str); 5] = [
    ("fig2_fees", include_str!("../scenarios/fig2_fees.jsonl")),
    (
        "fig4_deadlock",
        include_str!("../scenarios/fig4_deadlock.jsonl"),
    ),
    (
        "bottleneck_byzantine",
        include_str!("../scenarios/bottleneck_byzantine.jsonl"),
    ),
    (
        "ring_disjoint_access",
        include_str!("../scenarios/ring_disjoint_access.jsonl"),
    ),
    ("dltc_chain", include_str!("../scenarios/dltc_chain.jsonl")),
];

pub fn canned(name: &str) -> Option<Scenario> {
    CANNED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| Scenario::from_jsonl(text).expect("canned scenarios are valid"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HopMetrics {
    pub v_i: Amount,
    pub t_i: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub y_i: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaymentMetrics {
    pub id: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub txid: Option<Txid>,
    pub sender: String,
    pub receiver: String,
    pub users: Vec<String>,
    pub path: Vec<ChannelId>,
    pub value: Amount,
    pub status: PaymentStatus,
    /// Per hop, whether the contract was paid out.
    pub committed: Vec<bool>,
    pub hops: Vec<HopMetrics>,
    /// Rounds from issue to the sender learning the outcome.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rounds: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceLine {
    pub channel: String,
    pub id: ChannelId,
    pub left: i128,
    pub right: i128,
    pub cap: Amount,
    pub paid: Amount,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metrics {
    pub model: String,
    pub scenario: String,
    pub mode: Mode,
    pub schedule: String,
    pub rounds: u64,
    pub messages: usize,
    pub bytes: usize,
    pub ledger_entries: usize,
    pub payments: Vec<PaymentMetrics>,
    pub final_balances: Vec<BalanceLine>,
}

impl Metrics {
    pub fn successes(&self) -> usize {
        self.payments
            .iter()
            .filter(|p| p.status == PaymentStatus::Succeeded)
            .count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerialWitness {
    pub channel: ChannelId,
    pub demand: Amount,
    pub capacity: Amount,
    pub final_paid: Amount,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum Serializability {
    Yes { order: Vec<usize> },
    No { witness: SerialWitness },
}

impl Serializability {
    pub fn is_yes(&self) -> bool {
        matches!(self, Serializability::Yes { .. })
    }
}

/// Committed effects of a concurrent execution.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SerialInput {
    pub initial: BTreeMap<ChannelId, Amount>,
    /// Per payment, the `(channel, value)` pairs it paid out.
    pub payments: Vec<(usize, Vec<(ChannelId, Amount)>)>,
    pub final_paid: BTreeMap<ChannelId, Amount>,
}

/// Searches for a sequential order of the committed payments that, applied
/// one at a time against the initial capacities, reaches the final state.
pub fn check_serializable(input: &SerialInput) -> Result<Serializability, HarnessError> {
    let active: Vec<&(usize, Vec<(ChannelId, Amount)>)> = input
        .payments
        .iter()
        .filter(|(_, hops)| !hops.is_empty())
        .collect();
    if active.len() > MAX_SERIAL_PAYMENTS {
        return Err(HarnessError::TooLarge(active.len()));
    }
    let mut demand: BTreeMap<ChannelId, u64> = BTreeMap::new();
    for (_, hops) in &active {
        for (c, v) in hops {
            *demand.entry(*c).or_default() += v.0;
        }
    }
    let witness = |c: ChannelId| SerialWitness {
        channel: c,
        demand: Amount(demand.get(&c).copied().unwrap_or(0)),
        capacity: input.initial.get(&c).copied().unwrap_or_default(),
        final_paid: input.final_paid.get(&c).copied().unwrap_or_default(),
    };
    let channels: BTreeSet<ChannelId> = input
        .final_paid
        .keys()
        .chain(demand.keys())
        .copied()
        .collect();
    for c in &channels {
        let paid = input.final_paid.get(c).copied().unwrap_or_default().0;
        if paid != demand.get(c).copied().unwrap_or(0) {
            return Ok(Serializability::No {
                witness: witness(*c),
            });
        }
    }
    let mut first_failure: Option<ChannelId> = None;
    let mut order: Vec<usize> = (0..active.len()).collect();
    loop {
        let mut cap = input.initial.clone();
        let mut failed = None;
        'seq: for &i in &order {
            let mut need: BTreeMap<ChannelId, u64> = BTreeMap::new();
            for (c, v) in &active[i].1 {
                *need.entry(*c).or_default() += v.0;
            }
            for (c, v) in &need {
                let have = cap.get(c).copied().unwrap_or_default().0;
                if have < *v {
                    failed = Some(*c);
                    break 'seq;
                }
            }
            for (c, v) in need {
                let e = cap.entry(c).or_default();
                *e = Amount(e.0 - v);
            }
        }
        match failed {
            None => {
                return Ok(Serializability::Yes {
                    order: order.iter().map(|&i| active[i].0).collect(),
                })
            }
            Some(c) => {
                first_failure.get_or_insert(c);
            }
        }
        if !next_permutation(&mut order) {
            break;
        }
    }
    let c = first_failure.expect("at least one order was tried");
    Ok(Serializability::No {
        witness: witness(c),
    })
}

fn next_permutation(v: &mut [usize]) -> bool {
    let Some(i) = v.windows(2).rposition(|w| w[0] < w[1]) else {
        return false;
    };
    let j = v
        .iter()
        .rposition(|x| *x > v[i])
        .expect("exists by choice of i");
    v.swap(i, j);
    v[i + 1..].reverse();
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub property: String,
    pub witness: Value,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub violations: Vec<Violation>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub serializable: Option<Serializability>,
    /// Whether some ideal execution reproduces the run; absent when the
    /// scenario is too large to search.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ideal_match: Option<bool>,
}

impl Report {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn violate(&mut self, property: &str, witness: Value) {
        self.violations.push(Violation {
            property: property.to_string(),
            witness,
        });
    }
}

/// A finished protocol run together with everything needed to inspect it.
pub struct Execution {
    pub scenario: Scenario,
    pub net: Network<UserNode>,
    pub channel_ids: Vec<ChannelId>,
    pub corrupted: BTreeSet<UserId>,
    pub schedule: Schedule,
    pub quiescent: bool,
    pub initial_ledger: usize,
}

fn behavior_of(s: &Scenario, a: &AdversarySpec, ids: &[ChannelId]) -> Behavior {
    Behavior {
        withhold: a.withhold,
        early_abort: a.early_abort,
        forge_preimage: a.forge_preimage,
        misreport: a
            .misreport
            .iter()
            .map(|(f, t, x)| {
                let i = s.channel_index(f, t).expect("validated");
                (ids[i], x.parse().expect("validated"))
            })
            .collect(),
    }
}

fn offline_rules(u: UserId, o: &Offline) -> Vec<Rule> {
    [(Some(u), None), (None, Some(u))]
        .into_iter()
        .map(|(from, to)| Rule {
            from,
            to,
            kind: None,
            from_round: o.from_round,
            until_round: o.until_round,
            action: Action::Delay(o.delay),
        })
        .collect()
}

/// Builds the network of `scenario` and runs it under `schedule`.
pub fn execute(scenario: &Scenario, schedule: Schedule) -> Result<Execution, HarnessError> {
    scenario.validate()?;
    let h = &scenario.header;
    let mut ledger = Ledger::new();
    let mut wallets: Wallets = scenario
        .users
        .iter()
        .enumerate()
        .map(|(i, u)| (UserId(i as u32), u.funds))
        .collect();
    let prover = ProofBackend::new(h.proof_backend);
    let config = NodeConfig {
        mode: h.mode,
        delta: h.delta,
        slack: h.slack,
        contracts: h.contracts,
        group: Group::test(),
        patience: PATIENCE,
        seed: h.seed,
    };
    let mut nodes: Vec<UserNode> = (0..scenario.users.len() as u32)
        .map(|i| UserNode::new(UserId(i), config.clone(), prover.clone()))
        .collect();
    let mut channel_ids = Vec::new();
    for (i, c) in scenario.channels.iter().enumerate() {
        let u1 = scenario.user_id(&c.from).expect("validated");
        let u2 = scenario.user_id(&c.to).expect("validated");
        let st = open_channel(
            &mut ledger,
            &mut wallets,
            OpenRequest {
                u1,
                u2,
                deposit: c.deposit,
                timeout: c.timeout,
                fee: c.fee,
                nonce: i as u64,
                peer_authorizes: true,
            },
        )
        .map_err(|e| invalid(format!("channel {} -> {}: {e}", c.from, c.to)))?;
        channel_ids.push(st.id);
        nodes[u1.0 as usize].add_channel(st.clone());
        nodes[u2.0 as usize].add_channel(st);
    }
    for (id, p) in scenario.payments.iter().enumerate() {
        let sender = scenario.user_id(&p.sender).expect("validated");
        let path = p
            .path
            .windows(2)
            .map(|w| channel_ids[scenario.channel_index(&w[0], &w[1]).expect("validated")])
            .collect();
        nodes[sender.0 as usize].request(PaymentRequest {
            id,
            receiver: scenario.user_id(&p.receiver).expect("validated"),
            path,
            value: p.value,
            issue_round: p.issue_round,
        });
    }
    let initial_ledger = ledger.read().len();
    let mut net = Network::new(nodes, ledger, schedule.clone());
    let mut pending: Vec<&AdversarySpec> = scenario.adversaries.iter().collect();
    pending.sort_by_key(|a| a.round);
    let corrupt_now = |net: &mut Network<UserNode>, a: &AdversarySpec| {
        let u = scenario.user_id(&a.user).expect("validated");
        let rules = a
            .offline
            .as_ref()
            .map(|o| offline_rules(u, o))
            .unwrap_or_default();
        net.corrupt(u, &behavior_of(scenario, a, &channel_ids), rules)
            .expect("scenario users exist");
    };
    let mut quiescent = false;
    while net.round() < net.config.max_rounds {
        while let Some(a) = pending.first().filter(|a| a.round <= net.round() + 1) {
            corrupt_now(&mut net, a);
            pending.remove(0);
        }
        net.step();
        if pending.is_empty() && net.is_quiescent() {
            quiescent = true;
            break;
        }
    }
    Ok(Execution {
        scenario: scenario.clone(),
        net,
        channel_ids,
        corrupted: scenario.corrupted(),
        schedule,
        quiescent,
        initial_ledger,
    })
}

impl Execution {
    fn name(&self, u: UserId) -> String {
        self.scenario.users[u.0 as usize].name.clone()
    }

    /// The replica of an honest endpoint, if there is one.
    pub fn view(&self, channel: ChannelId) -> &ChannelState {
        let i = self
            .channel_ids
            .iter()
            .position(|c| *c == channel)
            .expect("scenario channel");
        let spec = &self.scenario.channels[i];
        let l = self.scenario.user_id(&spec.from).expect("validated");
        let r = self.scenario.user_id(&spec.to).expect("validated");
        let pick = if self.corrupted.contains(&l) && !self.corrupted.contains(&r) {
            r
        } else {
            l
        };
        &self.net.nodes[&pick].channels[&channel].state
    }

    fn byzantine_channel(&self, channel: ChannelId) -> bool {
        let st = self.view(channel);
        self.corrupted.contains(&st.left) && self.corrupted.contains(&st.right)
    }

    pub fn payments(&self) -> Vec<&Payment> {
        let mut out: Vec<&Payment> = self
            .net
            .nodes
            .values()
            .flat_map(|n| n.payments.iter())
            .collect();
        out.sort_by_key(|p| p.id);
        out
    }

    pub fn payment(&self, id: usize) -> Option<&Payment> {
        self.payments().into_iter().find(|p| p.id == id)
    }

    /// Per hop, whether the contract of `p` on that hop was paid out.
    pub fn committed(&self, p: &Payment) -> Vec<bool> {
        (0..p.path.len())
            .map(|i| {
                p.conditions.get(i).is_some_and(|cond| {
                    self.view(p.path[i]).contracts.iter().any(|c| {
                        c.condition == *cond && matches!(c.status, ContractStatus::Fulfilled(_))
                    })
                })
            })
            .collect()
    }

    pub fn metrics(&self) -> Metrics {
        let payments = self
            .payments()
            .into_iter()
            .map(|p| PaymentMetrics {
                id: p.id,
                txid: p.txid,
                sender: self.name(p.sender),
                receiver: self.name(p.receiver),
                users: p.users.iter().map(|u| self.name(*u)).collect(),
                path: p.path.clone(),
                value: p.value,
                status: p.status.clone(),
                committed: self.committed(p),
                hops: (0..p.path.len())
                    .map(|i| HopMetrics {
                        v_i: p.amounts[i],
                        t_i: p.timeouts[i],
                        y_i: p.conditions.get(i).map(|c| c.label()),
                    })
                    .collect(),
                rounds: p.finished_round.map(|f| f - p.issued_round),
            })
            .collect();
        let final_balances = self
            .channel_ids
            .iter()
            .zip(&self.scenario.channels)
            .map(|(id, spec)| {
                let st = self.view(*id);
                let (left, right) = st.balances();
                BalanceLine {
                    channel: format!("{}->{}", spec.from, spec.to),
                    id: *id,
                    left,
                    right,
                    cap: st.cap,
                    paid: st.paid,
                }
            })
            .collect();
        Metrics {
            model: "protocol".into(),
            scenario: self.scenario.header.name.clone(),
            mode: self.scenario.header.mode,
            schedule: self.schedule.to_string(),
            rounds: self.net.round(),
            messages: self.net.message_count(),
            bytes: self.net.byte_count(),
            ledger_entries: self.net.ledger.read().len() - self.initial_ledger,
            payments,
            final_balances,
        }
    }

    pub fn serial_input(&self) -> SerialInput {
        SerialInput {
            initial: self
                .channel_ids
                .iter()
                .zip(&self.scenario.channels)
                .map(|(id, c)| (*id, c.deposit))
                .collect(),
            payments: self
                .payments()
                .into_iter()
                .map(|p| {
                    let hops = self
                        .committed(p)
                        .iter()
                        .enumerate()
                        .filter(|(_, c)| **c)
                        .map(|(i, _)| (p.path[i], p.amounts[i]))
                        .collect();
                    (p.id, hops)
                })
                .collect(),
            final_paid: self
                .channel_ids
                .iter()
                .map(|id| (*id, self.view(*id).paid))
                .collect(),
        }
    }

    /// Evaluates every property and scenario expectation.
    pub fn check(&self) -> Report {
        let mut report = Report::default();
        if !self.quiescent {
            report.violate("termination", json!({"rounds": self.net.round()}));
        }
        self.check_conservation(&mut report);
        self.check_balance_security(&mut report);
        self.check_atomicity(&mut report);
        let byzantine = self.channel_ids.iter().any(|c| self.byzantine_channel(*c));
        match check_serializable(&self.serial_input()) {
            Ok(s) => {
                if !s.is_yes() && !byzantine {
                    report.violate("serializability", json!(s));
                }
                report.serializable = Some(s);
            }
            Err(e) => report.violate("serializability", json!({"error": e.to_string()})),
        }
        match self.ideal_equivalence() {
            Ok(Some(true)) => report.ideal_match = Some(true),
            Ok(Some(false)) => {
                report.ideal_match = Some(false);
                report.violate(
                    "ideal_equivalence",
                    json!({"final_paid": self.serial_input().final_paid}),
                );
            }
            Ok(None) => {}
            Err(w) => report.violate("ideal_equivalence", w),
        }
        self.check_expects(&mut report);
        report
    }

    fn check_conservation(&self, report: &mut Report) {
        for id in &self.channel_ids {
            let l = self.view(*id).left;
            let r = self.view(*id).right;
            let mut replicas = Vec::new();
            for u in [l, r] {
                let st = &self.net.nodes[&u].channels[id].state;
                if st.conserved_total().0 != st.deposit.0 + st.overdraft.0 {
                    report.violate(
                        "conservation",
                        json!({"channel": id, "user": u, "cap": st.cap, "locked": st.locked_value(), "paid": st.paid}),
                    );
                }
                if !self.corrupted.contains(&u) {
                    replicas.push((st.paid, st.cap));
                }
            }
            if replicas.len() == 2 && replicas[0] != replicas[1] {
                report.violate(
                    "replica_agreement",
                    json!({"channel": id, "replicas": replicas}),
                );
            }
        }
    }

    fn check_balance_security(&self, report: &mut Report) {
        for p in self.payments() {
            if p.conditions.is_empty() {
                continue;
            }
            let committed = self.committed(p);
            for i in 1..p.path.len() {
                let u = p.users[i];
                if self.corrupted.contains(&u) {
                    continue;
                }
                let gained = if committed[i - 1] {
                    p.amounts[i - 1].0 as i128
                } else {
                    0
                };
                let spent = if committed[i] {
                    p.amounts[i].0 as i128
                } else {
                    0
                };
                let net = gained - spent;
                let fee = p.amounts[i - 1].0 as i128 - p.amounts[i].0 as i128;
                if net != 0 && net != fee {
                    report.violate(
                        "balance_security",
                        json!({"payment": p.id, "user": self.name(u), "net": net, "fee": fee}),
                    );
                }
            }
        }
    }

    fn check_atomicity(&self, report: &mut Report) {
        if !self.corrupted.is_empty() {
            return;
        }
        for p in self.payments() {
            let committed = self.committed(p);
            let all = committed.iter().all(|c| *c);
            let none = committed.iter().all(|c| !*c);
            let consistent = match p.status {
                PaymentStatus::Succeeded => all,
                _ => none,
            };
            if !(all || none) || !consistent {
                report.violate(
                    "atomicity",
                    json!({"payment": p.id, "status": p.status, "committed": committed}),
                );
            }
        }
    }

    /// Replies that make the reference model commit exactly the hops the
    /// protocol committed: a refusal just before the first committed hop.
    fn derived_replies(&self, p: &Payment) -> Result<Vec<Reply>, Value> {
        let committed = self.committed(p);
        let n = committed.len();
        let from = committed.iter().position(|c| *c).unwrap_or(n);
        if committed[from..].iter().any(|c| !*c) {
            return Err(
                json!({"payment": p.id, "committed": committed, "why": "committed hops are not a suffix"}),
            );
        }
        let mut replies = vec![Reply::Accept; n];
        if from > 0 {
            replies[from - 1] = Reply::Refuse;
        }
        Ok(replies)
    }

    pub fn ideal_initial(&self) -> IdealState {
        let mut s = IdealState::new(self.scenario.header.mode == Mode::Rayo);
        for (id, c) in self.channel_ids.iter().zip(&self.scenario.channels) {
            let l = self.scenario.user_id(&c.from).expect("validated");
            let r = self.scenario.user_id(&c.to).expect("validated");
            let unchecked = self.corrupted.contains(&l) && self.corrupted.contains(&r);
            s.ideal_open(*id, l, r, c.deposit, c.timeout, c.fee, unchecked)
                .expect("distinct channel ids");
        }
        s
    }

    /// Searches the begin/decide interleavings of the reference model for
    /// one whose committed hops and paid amounts equal this run's.
    pub fn ideal_equivalence(&self) -> Result<Option<bool>, Value> {
        let payments = self.payments();
        if payments.len() > MAX_EQUIVALENCE_PAYMENTS {
            return Ok(None);
        }
        let mut specs = BTreeMap::new();
        let mut replies = BTreeMap::new();
        let mut expected = BTreeMap::new();
        for p in &payments {
            specs.insert(
                p.id,
                IdealPaymentSpec {
                    id: p.id,
                    txid: p.txid,
                    path: p.path.clone(),
                    amounts: p.amounts.clone(),
                    timeouts: p.timeouts.clone(),
                },
            );
            replies.insert(p.id, self.derived_replies(p)?);
            expected.insert(p.id, self.committed(p));
        }
        let initial = self.ideal_initial();
        let checked: Vec<ChannelId> = self
            .channel_ids
            .iter()
            .copied()
            .filter(|c| !self.byzantine_channel(*c))
            .collect();
        let ids: Vec<usize> = specs.keys().copied().collect();
        for ops in interleavings(&ids) {
            let Ok(end) = ideal_execute(&initial, &specs, &replies, &ops) else {
                continue;
            };
            let same_commits = end
                .payments
                .iter()
                .all(|(id, p)| p.committed() == expected[id]);
            let same_paid = checked
                .iter()
                .all(|c| end.channels[c].paid == self.view(*c).paid);
            if same_commits && same_paid {
                return Ok(Some(true));
            }
        }
        Ok(Some(false))
    }

    fn check_expects(&self, report: &mut Report) {
        let metrics = self.metrics();
        for e in &self.scenario.expects {
            if let (Some(id), Some(status)) = (e.payment, &e.status) {
                let got = metrics
                    .payments
                    .iter()
                    .find(|p| p.id == id)
                    .map(|p| status_name(&p.status));
                if got.as_deref() != Some(status.as_str()) {
                    report.violate("expect", json!({"payment": id, "want": status, "got": got}));
                }
            }
            if let (Some((f, t)), Some(paid)) = (&e.channel, e.paid) {
                let got = self
                    .scenario
                    .channel_index(f, t)
                    .map(|i| self.view(self.channel_ids[i]).paid);
                if got != Some(paid) {
                    report.violate(
                        "expect",
                        json!({"channel": format!("{f}->{t}"), "want": format_coins(paid), "got": got.map(format_coins)}),
                    );
                }
            }
            if let Some(want) = e.serializable {
                let got = report.serializable.as_ref().map(Serializability::is_yes);
                if got != Some(want) {
                    report.violate("expect", json!({"serializable": want, "got": got}));
                }
            }
            if let Some(min) = e.min_successes {
                if metrics.successes() < min {
                    report.violate(
                        "expect",
                        json!({"min_successes": min, "got": metrics.successes()}),
                    );
                }
            }
        }
    }

    /// Identifiers visible to `u` in what it received after corruption:
    /// payment identifiers and per-hop condition labels.
    pub fn observed_identifiers(&self, u: UserId) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for env in self.net.view_of(u) {
            use crate::simnet::WireMessage;
            if let Some(t) = env.payload.txid() {
                out.insert(format!("txid:{t}"));
            }
            match &env.payload {
                crate::payment::Wire::Hop(h) => {
                    out.insert(format!("cond:{}", h.cond_in.label()));
                    if let crate::payment::HopKind::Intermediate { cond_out, .. } = &h.kind {
                        out.insert(format!("cond:{}", cond_out.label()));
                    }
                }
                crate::payment::Wire::Propose(p) => {
                    for ev in &p.events {
                        out.insert(format!("cond:{}", ev.payload.condition().label()));
                    }
                }
            }
        }
        out
    }
}

pub fn status_name(s: &PaymentStatus) -> String {
    match s {
        PaymentStatus::InFlight => "in_flight",
        PaymentStatus::Succeeded => "succeeded",
        PaymentStatus::Aborted { .. } => "aborted",
        PaymentStatus::Queued { .. } => "queued",
    }
    .to_string()
}

/// Runs `scenario` once and checks it.
pub fn run(scenario: &Scenario, schedule: Schedule) -> Result<(Metrics, Report), HarnessError> {
    let ex = execute(scenario, schedule)?;
    Ok((ex.metrics(), ex.check()))
}

pub struct RunSummary {
    pub metrics: Metrics,
    pub report: Report,
}

/// Runs `scenario` under every delivery order within `bound`, or a seeded
/// sample of them beyond it.
pub fn explore(
    scenario: &Scenario,
    bound: &ExploreBound,
) -> Result<Exploration<RunSummary>, HarnessError> {
    scenario.validate()?;
    let ex = enumerate_schedules(bound, |s| {
        let e = execute(scenario, s.clone()).expect("validated scenario");
        let log: ScheduleLog = e.net.schedule_log().clone();
        (
            RunSummary {
                metrics: e.metrics(),
                report: e.check(),
            },
            log,
        )
    });
    Ok(ex)
}

/// Replies the reference model receives when users follow their scripts:
/// a scripted user refuses its own hop.
fn scripted_replies(scenario: &Scenario, p: &PaymentSpec) -> Vec<Reply> {
    p.path[1..]
        .iter()
        .map(|name| {
            let deviant = scenario
                .adversaries
                .iter()
                .any(|a| a.user == *name && (a.withhold || a.early_abort || a.forge_preimage));
            if deviant {
                Reply::Refuse
            } else {
                Reply::Accept
            }
        })
        .collect()
}

/// Runs `scenario` on the reference model: payments reserve in issue order,
/// then are decided in the same order.
pub fn run_ideal(scenario: &Scenario) -> Result<Metrics, HarnessError> {
    scenario.validate()?;
    let h = &scenario.header;
    let corrupted = scenario.corrupted();
    let mut state = IdealState::new(h.mode == Mode::Rayo);
    let mut ids = Vec::new();
    for (i, c) in scenario.channels.iter().enumerate() {
        let l = scenario.user_id(&c.from).expect("validated");
        let r = scenario.user_id(&c.to).expect("validated");
        let id = ChannelId::derive(l, r, i as u64);
        ids.push(id);
        state
            .ideal_open(
                id,
                l,
                r,
                c.deposit,
                c.timeout,
                c.fee,
                corrupted.contains(&l) && corrupted.contains(&r),
            )
            .map_err(|e| invalid(e.to_string()))?;
    }
    let mut order: Vec<usize> = (0..scenario.payments.len()).collect();
    order.sort_by_key(|i| (scenario.payments[*i].issue_round, *i));
    let mut specs = BTreeMap::new();
    let mut replies = BTreeMap::new();
    for &i in &order {
        let p = &scenario.payments[i];
        let path: Vec<ChannelId> = p
            .path
            .windows(2)
            .map(|w| ids[scenario.channel_index(&w[0], &w[1]).expect("validated")])
            .collect();
        let fees: Vec<Amount> = p.path[1..p.path.len() - 1]
            .iter()
            .zip(&p.path[2..])
            .map(|(a, b)| scenario.channels[scenario.channel_index(a, b).expect("validated")].fee)
            .collect();
        let amounts = hop_amounts(p.value, &fees).map_err(|e| invalid(e.to_string()))?;
        let sender = scenario.user_id(&p.sender).expect("validated");
        specs.insert(
            i,
            IdealPaymentSpec {
                id: i,
                txid: (h.mode == Mode::Rayo).then(|| txid_assign(sender, i as u64)),
                path,
                amounts,
                timeouts: hop_timeouts(p.issue_round, p.path.len() - 1, h.delta, h.slack),
            },
        );
        replies.insert(i, scripted_replies(scenario, p));
    }
    let ops: Vec<IdealOp> = order
        .iter()
        .map(|&i| IdealOp::Begin { payment: i })
        .chain(order.iter().map(|&i| IdealOp::Decide { payment: i }))
        .collect();
    let end = ideal_execute(&state, &specs, &replies, &ops).map_err(|e| invalid(e.to_string()))?;
    let payments = order
        .iter()
        .map(|&i| {
            let p = &end.payments[&i];
            let sp = &scenario.payments[i];
            let n = p.spec.path.len();
            let status = match p.status {
                IdealStatus::Decided { from: 0 } => PaymentStatus::Succeeded,
                IdealStatus::Decided { .. } => PaymentStatus::Aborted {
                    reason: AbortReason::Adversary,
                },
                IdealStatus::Aborted => PaymentStatus::Aborted {
                    reason: AbortReason::Capacity,
                },
                IdealStatus::Queued { hop } => PaymentStatus::Queued { hop },
                IdealStatus::Held => PaymentStatus::InFlight,
            };
            PaymentMetrics {
                id: i,
                txid: p.spec.txid,
                sender: sp.sender.clone(),
                receiver: sp.receiver.clone(),
                users: sp.path.clone(),
                path: p.spec.path.clone(),
                value: sp.value,
                status,
                committed: p.committed(),
                hops: (0..n)
                    .map(|k| HopMetrics {
                        v_i: p.spec.amounts[k],
                        t_i: p.spec.timeouts[k],
                        y_i: None,
                    })
                    .collect(),
                rounds: None,
            }
        })
        .collect();
    let final_balances = ids
        .iter()
        .zip(&scenario.channels)
        .map(|(id, c)| {
            let ch = &end.channels[id];
            BalanceLine {
                channel: format!("{}->{}", c.from, c.to),
                id: *id,
                left: ch.deposit.0 as i128 - ch.paid.0 as i128,
                right: ch.paid.0 as i128,
                cap: Amount(end.residual(*id).unwrap_or(0).max(0) as u64),
                paid: ch.paid,
            }
        })
        .collect();
    Ok(Metrics {
        model: "ideal".into(),
        scenario: h.name.clone(),
        mode: h.mode,
        schedule: "ideal".into(),
        rounds: 0,
        messages: 0,
        bytes: 0,
        ledger_entries: 0,
        payments,
        final_balances,
    })
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.property, self.witness)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(s: &str) -> Amount {
        s.parse().unwrap()
    }

    #[test]
    fn coin_strings_round_trip() {
        for s in ["0", "1", "2.75", "0.00000001", "123.5"] {
            assert_eq!(format_coins(c(s)), s);
        }
    }

    #[test]
    fn canned_scenarios_parse_and_round_trip() {
        for (name, text) in CANNED {
            let s = Scenario::from_jsonl(text).unwrap();
            assert_eq!(s.header.name, name);
            assert_eq!(Scenario::from_jsonl(&s.to_jsonl()).unwrap(), s);
        }
    }

    #[test]
    fn omitted_path_takes_fewest_hops() {
        let text = [
            r#"{"pcnlab_scenario":1,"name":"route"}"#,
            r#"{"type":"user","name":"A"}"#,
            r#"{"type":"user","name":"B"}"#,
            r#"{"type":"user","name":"C"}"#,
            r#"{"type":"user","name":"D"}"#,
            r#"{"type":"channel","from":"A","to":"B","deposit":"1"}"#,
            r#"{"type":"channel","from":"B","to":"C","deposit":"1"}"#,
            r#"{"type":"channel","from":"C","to":"D","deposit":"1"}"#,
            r#"{"type":"channel","from":"B","to":"D","deposit":"1"}"#,
            r#"{"type":"payment","sender":"A","receiver":"D","value":"0.5"}"#,
        ]
        .join("\n");
        let s = Scenario::from_jsonl(&text).unwrap();
        assert_eq!(s.payments[0].path, ["A", "B", "D"]);
        assert!(s.shortest_path("D", "A").is_none());
        let unreachable = text
            .replace(r#""receiver":"D""#, r#""receiver":"A""#)
            .replace(r#""sender":"A""#, r#""sender":"D""#);
        assert!(Scenario::from_jsonl(&unreachable).is_err());
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let mut s = Scenario::new("bad", Mode::Fulgor);
        s.user("A").user("B");
        s.channel("A", "B", c("1"), c("0"));
        s.pay(&["A", "C"], c("1"), 1);
        assert!(matches!(
            s.validate(),
            Err(HarnessError::ScenarioInvalid(_))
        ));
        assert!(Scenario::from_jsonl("").is_err());
        assert!(Scenario::from_jsonl(r#"{"pcnlab_scenario":9,"name":"x"}"#).is_err());
    }

    fn single(hops: usize) -> Scenario {
        let mut s = Scenario::new("line", Mode::Fulgor);
        let names: Vec<String> = (0..=hops).map(|i| format!("u{i}")).collect();
        for n in &names {
            s.user(n);
        }
        for w in names.windows(2) {
            s.channel(&w[0], &w[1], c("5"), c("0.01"));
        }
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        s.pay(&refs, c("1"), 1);
        s
    }

    #[test]
    fn one_hop_payment_succeeds_with_constant_messages() {
        let (m, r) = run(&single(1), Schedule::default()).unwrap();
        assert!(r.ok(), "{:?}", r.violations);
        assert_eq!(m.payments[0].status, PaymentStatus::Succeeded);
        // Hop message, lock proposal and reply, release proposal and reply.
        assert_eq!(m.messages, 5);
    }

    #[test]
    fn metrics_are_deterministic() {
        let s = canned("fig4_deadlock").unwrap();
        let a = run(&s, Schedule::Seeded(3)).unwrap().0.to_json();
        let b = run(&s, Schedule::Seeded(3)).unwrap().0.to_json();
        assert_eq!(a, b);
    }

    #[test]
    fn disjoint_payments_serialize_in_both_orders() {
        let (a, b) = (ChannelId(1), ChannelId(2));
        let input = SerialInput {
            initial: [(a, Amount(1)), (b, Amount(1))].into_iter().collect(),
            payments: vec![(0, vec![(a, Amount(1))]), (1, vec![(b, Amount(1))])],
            final_paid: [(a, Amount(1)), (b, Amount(1))].into_iter().collect(),
        };
        assert_eq!(
            check_serializable(&input).unwrap(),
            Serializability::Yes { order: vec![0, 1] }
        );
        let mut swapped = input.clone();
        swapped.payments.reverse();
        assert_eq!(
            check_serializable(&swapped).unwrap(),
            Serializability::Yes { order: vec![1, 0] }
        );
    }

    #[test]
    fn overspent_channel_is_the_witness() {
        let (a, b) = (ChannelId(1), ChannelId(2));
        let input = SerialInput {
            initial: [(a, Amount(1)), (b, Amount(5))].into_iter().collect(),
            payments: vec![
                (0, vec![(a, Amount(1)), (b, Amount(1))]),
                (1, vec![(a, Amount(1)), (b, Amount(1))]),
            ],
            final_paid: [(a, Amount(2)), (b, Amount(2))].into_iter().collect(),
        };
        match check_serializable(&input).unwrap() {
            Serializability::No { witness } => {
                assert_eq!(witness.channel, a);
                assert_eq!(witness.demand, Amount(2));
                assert_eq!(witness.capacity, Amount(1));
            }
            other => panic!("{other:?}"),
        }
        let too_many = SerialInput {
            payments: (0..7).map(|i| (i, vec![(a, Amount(0))])).collect(),
            ..input
        };
        assert!(matches!(
            check_serializable(&too_many),
            Err(HarnessError::TooLarge(7))
        ));
    }

    #[test]
    fn ideal_run_of_fig2_matches_protocol() {
        let s = canned("fig2_fees").unwrap();
        let ideal = run_ideal(&s).unwrap();
        let (proto, _) = run(&s, Schedule::default()).unwrap();
        assert_eq!(ideal.model, "ideal");
        let paid = |m: &Metrics| m.final_balances.iter().map(|b| b.paid).collect::<Vec<_>>();
        assert_eq!(paid(&ideal), paid(&proto));
    }

    proptest! {
        // Consumption is order-independent, so the brute force must agree
        // with a per-channel total demand check.
        #[test]
        fn serializable_iff_total_demand_fits(
            caps in prop::collection::vec(0u64..4, 3),
            pays in prop::collection::vec(prop::collection::vec((0u64..3, 0u64..3), 0..3), 0..5),
        ) {
            let initial: BTreeMap<ChannelId, Amount> = caps.iter().enumerate().map(|(i, c)| (ChannelId(i as u64), Amount(*c))).collect();
            let payments: Vec<(usize, Vec<(ChannelId, Amount)>)> = pays.iter().enumerate()
                .map(|(i, hops)| (i, hops.iter().map(|(c, v)| (ChannelId(*c), Amount(*v))).collect()))
                .collect();
            let mut demand: BTreeMap<ChannelId, u64> = BTreeMap::new();
            for (_, hops) in &payments {
                for (c, v) in hops {
                    *demand.entry(*c).or_default() += v.0;
                }
            }
            let final_paid = demand.iter().map(|(c, v)| (*c, Amount(*v))).collect();
            let fits = demand.iter().all(|(c, v)| initial.get(c).map_or(0, |a| a.0) >= *v);
            let got = check_serializable(&SerialInput { initial, payments, final_paid }).unwrap();
            prop_assert_eq!(got.is_yes(), fits);
        }
    }
}

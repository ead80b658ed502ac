//! Round-based message scheduler.
//!
//! Envelopes deposited in round `r` are delivered in round `r + 1`. Within a
//! round, a recipient receives its envelopes grouped by link (one group per
//! direct sender, one group per anonymous envelope); the relative order of
//! the groups is chosen by the [`Schedule`], messages inside a group stay in
//! FIFO order. Every choice is logged so that delivery orders can be
//! enumerated exhaustively.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::ledger::{Ledger, LedgerEntry};
use crate::primitives::{Txid, UserId};

/// Longest path an anonymous envelope has room for.
pub const MAX_PATH: usize = 10;
/// Bytes reserved per hop inside an anonymous envelope.
pub const HOP_SLOT: usize = 1024;
/// Size every anonymous envelope is padded to.
pub const ANON_PADDED_LEN: usize = MAX_PATH * HOP_SLOT;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    /// More schedulable events than the exploration bound allows.
    #[error("{events} schedulable events exceed the bound of {bound}")]
    BoundExceeded { events: usize, bound: usize },
    /// An anonymous payload does not fit the padded envelope.
    #[error("anonymous payload of {0} bytes exceeds the padded size")]
    Oversized(usize),
    #[error("unknown node {0}")]
    UnknownNode(UserId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anonymity {
    Direct,
    Anonymous,
}

/// What the trace records about a message.
pub trait WireMessage: Clone + fmt::Debug + Serialize + DeserializeOwned {
    fn kind(&self) -> &'static str;
    fn txid(&self) -> Option<Txid>;
    /// Per-hop condition label, if the message carries one.
    fn label(&self) -> Option<String>;
}

#[derive(Debug, Clone, Serialize)]
pub struct Envelope<M> {
    pub from: UserId,
    pub to: UserId,
    pub payload: M,
    pub anonymity: Anonymity,
    /// Round the envelope was deposited in.
    pub round: u64,
    pub deliver_at: u64,
    /// Serialized payload size.
    pub len: usize,
    /// Size on the wire after padding.
    pub padded_len: usize,
}

/// Everything a node handler may do besides mutating its own state.
pub struct Ctx<'a, M> {
    pub me: UserId,
    pub round: u64,
    pub now: u64,
    pub ledger: &'a Ledger,
    sent: Vec<(UserId, M, Anonymity)>,
    submissions: Vec<LedgerEntry>,
    notes: Vec<Value>,
}

impl<'a, M> Ctx<'a, M> {
    pub fn new(me: UserId, round: u64, ledger: &'a Ledger) -> Self {
        Ctx {
            me,
            round,
            now: ledger.now(),
            ledger,
            sent: Vec::new(),
            submissions: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn send(&mut self, to: UserId, msg: M) {
        self.sent.push((to, msg, Anonymity::Direct));
    }

    pub fn send_anonymous(&mut self, to: UserId, msg: M) {
        self.sent.push((to, msg, Anonymity::Anonymous));
    }

    /// Queues an entry for the ledger; it is appended at the end of the round.
    pub fn submit(&mut self, entry: LedgerEntry) {
        self.submissions.push(entry);
    }

    /// Free-form record kept in the run's event log.
    pub fn note(&mut self, v: Value) {
        self.notes.push(v);
    }

    pub fn sent(&self) -> &[(UserId, M, Anonymity)] {
        &self.sent
    }

    pub fn submissions(&self) -> &[LedgerEntry] {
        &self.submissions
    }
}

/// A user node driven by the scheduler.
pub trait Process {
    type Msg: WireMessage;
    /// Scripted misbehavior installed on corruption.
    type Script;

    fn id(&self) -> UserId;
    /// `from` is `None` for anonymous envelopes.
    fn on_message(&mut self, from: Option<UserId>, msg: Self::Msg, ctx: &mut Ctx<Self::Msg>);
    fn on_ledger(&mut self, index: u64, entry: &LedgerEntry, ctx: &mut Ctx<Self::Msg>);
    fn on_tick(&mut self, ctx: &mut Ctx<Self::Msg>);
    /// No pending work that could produce messages or ledger entries.
    fn is_idle(&self, now: u64) -> bool;
    fn export_state(&self) -> Value;
    fn corrupt(&mut self, script: &Self::Script);
}

/// Transport-level treatment of one envelope.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Deliver,
    Drop,
    /// Replace the payload by these serialized bytes.
    Substitute(Vec<u8>),
    Delay(u64),
}

/// Applies `action` to envelopes matching every given filter. Rules only
/// ever touch envelopes sent by or addressed to a corrupted user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    #[serde(default)]
    pub from: Option<UserId>,
    #[serde(default)]
    pub to: Option<UserId>,
    #[serde(default)]
    pub kind: Option<String>,
    /// First round the rule is active in.
    #[serde(default)]
    pub from_round: u64,
    /// Last round the rule is active in.
    #[serde(default)]
    pub until_round: Option<u64>,
    pub action: Action,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversaryPolicy {
    pub corrupted: BTreeSet<UserId>,
    pub rules: Vec<Rule>,
}

impl AdversaryPolicy {
    fn action_for<M: WireMessage>(&self, env: &Envelope<M>) -> &Action {
        if !self.corrupted.contains(&env.from) && !self.corrupted.contains(&env.to) {
            return &Action::Deliver;
        }
        self.rules
            .iter()
            .find(|r| {
                r.from.is_none_or(|u| u == env.from)
                    && r.to.is_none_or(|u| u == env.to)
                    && r.kind.as_deref().is_none_or(|k| k == env.payload.kind())
                    && env.round >= r.from_round
                    && r.until_round.is_none_or(|u| env.round <= u)
            })
            .map(|r| &r.action)
            .unwrap_or(&Action::Deliver)
    }
}

/// How delivery-order choices are resolved.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Uniformly random permutations from a seeded generator.
    Seeded(u64),
    /// Explicit permutation index per choice point; missing entries are 0.
    Choices(Vec<u32>),
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Choices(Vec::new())
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Seeded(s) => write!(f, "seed:{s}"),
            Schedule::Choices(c) => {
                let parts: Vec<String> = c.iter().map(|x| x.to_string()).collect();
                write!(f, "choices:{}", parts.join("."))
            }
        }
    }
}

impl FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(n) = s.strip_prefix("seed:") {
            return n
                .parse()
                .map(Schedule::Seeded)
                .map_err(|e| format!("bad seed: {e}"));
        }
        if let Some(rest) = s.strip_prefix("choices:") {
            if rest.is_empty() {
                return Ok(Schedule::Choices(Vec::new()));
            }
            return rest
                .split('.')
                .map(|p| p.parse::<u32>())
                .collect::<Result<Vec<_>, _>>()
                .map(Schedule::Choices)
                .map_err(|e| format!("bad choice list: {e}"));
        }
        Err(format!("unknown schedule {s:?}"))
    }
}

/// One resolved choice: `choice < arity` among `events` deliveries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoicePoint {
    pub arity: u32,
    pub choice: u32,
    pub events: usize,
}

pub type ScheduleLog = Vec<ChoicePoint>;

fn factorial(k: usize) -> u64 {
    (1..=k as u64).product()
}

/// The `index`-th permutation of `0..k` in lexicographic order.
pub fn nth_permutation(k: usize, mut index: u64) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..k).collect();
    let mut out = Vec::with_capacity(k);
    for i in (0..k).rev() {
        let f = factorial(i);
        let pick = (index / f) as usize;
        index %= f;
        out.push(pool.remove(pick));
    }
    out
}

struct Driver {
    schedule: Schedule,
    rng: Option<ChaCha20Rng>,
    pos: usize,
    log: ScheduleLog,
}

impl Driver {
    fn new(schedule: Schedule) -> Self {
        let rng = match schedule {
            Schedule::Seeded(s) => Some(ChaCha20Rng::seed_from_u64(s)),
            Schedule::Choices(_) => None,
        };
        Driver {
            schedule,
            rng,
            pos: 0,
            log: Vec::new(),
        }
    }

    /// Order in which `k >= 2` groups holding `events` envelopes are delivered.
    fn order(&mut self, k: usize, events: usize) -> Vec<usize> {
        let arity = factorial(k);
        let choice = match (&self.schedule, &mut self.rng) {
            (Schedule::Choices(c), _) => c.get(self.pos).copied().unwrap_or(0) as u64 % arity,
            (Schedule::Seeded(_), Some(rng)) => {
                let mut perm: Vec<usize> = (0..k).collect();
                perm.shuffle(rng);
                let idx = permutation_index(&perm);
                self.pos += 1;
                self.log.push(ChoicePoint {
                    arity: arity as u32,
                    choice: idx as u32,
                    events,
                });
                return perm;
            }
            _ => unreachable!("seeded schedules own a generator"),
        };
        self.pos += 1;
        self.log.push(ChoicePoint {
            arity: arity as u32,
            choice: choice as u32,
            events,
        });
        nth_permutation(k, choice)
    }
}

/// Inverse of [`nth_permutation`].
pub fn permutation_index(perm: &[usize]) -> u64 {
    let k = perm.len();
    let mut idx = 0;
    for i in 0..k {
        let smaller = perm[i + 1..].iter().filter(|&&x| x < perm[i]).count() as u64;
        idx += smaller * factorial(k - 1 - i);
    }
    idx
}

/// One JSON line per delivery.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceLine {
    pub round: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub from: Option<UserId>,
    pub to: UserId,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub txid: Option<Txid>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub y: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RoundReport {
    pub round: u64,
    pub deliveries: usize,
    pub appended: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub max_rounds: u64,
    /// Padding entries appended per round in which nothing else reached
    /// the ledger.
    pub ledger_ticks_per_round: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            max_rounds: 2_000,
            ledger_ticks_per_round: 1,
        }
    }
}

pub struct Network<P: Process> {
    pub nodes: BTreeMap<UserId, P>,
    pub ledger: Ledger,
    pub policy: AdversaryPolicy,
    pub config: NetConfig,
    round: u64,
    in_flight: Vec<Envelope<P::Msg>>,
    driver: Driver,
    trace: Vec<TraceLine>,
    /// Envelopes delivered to corrupted users, in delivery order.
    views: BTreeMap<UserId, Vec<Envelope<P::Msg>>>,
    notes: Vec<Value>,
    seen_ledger: usize,
    messages: usize,
    bytes: usize,
    rejected_entries: usize,
}

impl<P: Process> Network<P> {
    pub fn new(nodes: Vec<P>, ledger: Ledger, schedule: Schedule) -> Self {
        let seen_ledger = ledger.read().len();
        Network {
            nodes: nodes.into_iter().map(|n| (n.id(), n)).collect(),
            ledger,
            policy: AdversaryPolicy::default(),
            config: NetConfig::default(),
            round: 0,
            in_flight: Vec::new(),
            driver: Driver::new(schedule),
            trace: Vec::new(),
            views: BTreeMap::new(),
            notes: Vec::new(),
            seen_ledger,
            messages: 0,
            bytes: 0,
            rejected_entries: 0,
        }
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn trace(&self) -> &[TraceLine] {
        &self.trace
    }

    pub fn schedule_log(&self) -> &ScheduleLog {
        &self.driver.log
    }

    pub fn notes(&self) -> &[Value] {
        &self.notes
    }

    /// Envelopes delivered to `u` after it was corrupted.
    pub fn view_of(&self, u: UserId) -> &[Envelope<P::Msg>] {
        self.views.get(&u).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn message_count(&self) -> usize {
        self.messages
    }

    pub fn byte_count(&self) -> usize {
        self.bytes
    }

    pub fn rejected_entries(&self) -> usize {
        self.rejected_entries
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    /// Hands `u` to the adversary: installs `script`, adds `rules` to the
    /// transport policy and returns the node's state.
    pub fn corrupt(
        &mut self,
        u: UserId,
        script: &P::Script,
        rules: Vec<Rule>,
    ) -> Result<Value, SimError> {
        let node = self.nodes.get_mut(&u).ok_or(SimError::UnknownNode(u))?;
        node.corrupt(script);
        self.policy.corrupted.insert(u);
        self.policy.rules.extend(rules);
        Ok(node.export_state())
    }

    /// Sends `msg` on behalf of the corrupted user `from`.
    pub fn inject(
        &mut self,
        from: UserId,
        to: UserId,
        msg: P::Msg,
        anonymity: Anonymity,
    ) -> Result<(), SimError> {
        if !self.nodes.contains_key(&to) {
            return Err(SimError::UnknownNode(to));
        }
        self.deposit(from, to, msg, anonymity)
    }

    fn deposit(
        &mut self,
        from: UserId,
        to: UserId,
        payload: P::Msg,
        anonymity: Anonymity,
    ) -> Result<(), SimError> {
        let len = serde_json::to_vec(&payload)
            .expect("messages serialize")
            .len();
        let padded_len = match anonymity {
            Anonymity::Direct => len,
            Anonymity::Anonymous => {
                if len > ANON_PADDED_LEN {
                    return Err(SimError::Oversized(len));
                }
                ANON_PADDED_LEN
            }
        };
        let mut env = Envelope {
            from,
            to,
            payload,
            anonymity,
            round: self.round,
            deliver_at: self.round + 1,
            len,
            padded_len,
        };
        match self.policy.action_for(&env).clone() {
            Action::Deliver => {}
            Action::Drop => return Ok(()),
            Action::Delay(d) => env.deliver_at += d,
            Action::Substitute(bytes) => match serde_json::from_slice(&bytes) {
                Ok(p) => env.payload = p,
                Err(_) => return Ok(()),
            },
        }
        self.messages += 1;
        self.bytes += env.padded_len;
        self.in_flight.push(env);
        Ok(())
    }

    fn absorb(&mut self, ctx_sent: Vec<(UserId, P::Msg, Anonymity)>, from: UserId) {
        for (to, msg, anon) in ctx_sent {
            if let Err(e) = self.deposit(from, to, msg, anon) {
                self.notes
                    .push(json!({"round": self.round, "node": from, "dropped": e.to_string()}));
            }
        }
    }

    /// Runs one round.
    pub fn step(&mut self) -> RoundReport {
        self.round += 1;
        let round = self.round;
        let mut submissions: BTreeMap<UserId, Vec<LedgerEntry>> = BTreeMap::new();

        // New ledger entries are visible to every node at the start of a round.
        let fresh: Vec<(u64, LedgerEntry)> = self.ledger.read()[self.seen_ledger..]
            .iter()
            .enumerate()
            .map(|(i, e)| ((self.seen_ledger + i) as u64, e.clone()))
            .filter(|(_, e)| !matches!(e, LedgerEntry::Padding))
            .collect();
        self.seen_ledger = self.ledger.read().len();
        if !fresh.is_empty() {
            let ids: Vec<UserId> = self.nodes.keys().copied().collect();
            for id in ids {
                let node = self.nodes.get_mut(&id).expect("listed node");
                let mut ctx = Ctx::new(id, round, &self.ledger);
                for (index, entry) in &fresh {
                    node.on_ledger(*index, entry, &mut ctx);
                }
                let Ctx {
                    sent,
                    submissions: subs,
                    notes,
                    ..
                } = ctx;
                submissions.entry(id).or_default().extend(subs);
                self.notes.extend(notes);
                self.absorb(sent, id);
            }
        }

        // Deliveries, grouped per recipient and per link.
        let (due, later): (Vec<_>, Vec<_>) = std::mem::take(&mut self.in_flight)
            .into_iter()
            .partition(|e| e.deliver_at <= round);
        self.in_flight = later;
        let mut per_recipient: BTreeMap<UserId, Vec<Vec<Envelope<P::Msg>>>> = BTreeMap::new();
        for env in due {
            let groups = per_recipient.entry(env.to).or_default();
            let slot = match env.anonymity {
                Anonymity::Direct => groups
                    .iter()
                    .position(|g| g[0].anonymity == Anonymity::Direct && g[0].from == env.from),
                Anonymity::Anonymous => None,
            };
            match slot {
                Some(i) => groups[i].push(env),
                None => groups.push(vec![env]),
            }
        }
        let mut deliveries = 0;
        for (to, groups) in per_recipient {
            let ordered: Vec<Envelope<P::Msg>> = if groups.len() >= 2 {
                let events = groups.iter().map(Vec::len).sum();
                let order = self.driver.order(groups.len(), events);
                let mut slots: Vec<Option<Vec<Envelope<P::Msg>>>> =
                    groups.into_iter().map(Some).collect();
                order
                    .into_iter()
                    .flat_map(|i| slots[i].take().expect("each group once"))
                    .collect()
            } else {
                groups.into_iter().flatten().collect()
            };
            for env in ordered {
                deliveries += 1;
                let from = match env.anonymity {
                    Anonymity::Direct => Some(env.from),
                    Anonymity::Anonymous => None,
                };
                self.trace.push(TraceLine {
                    round,
                    from,
                    to,
                    kind: env.payload.kind().to_string(),
                    txid: env.payload.txid(),
                    y: env.payload.label(),
                });
                if self.policy.corrupted.contains(&to) {
                    self.views.entry(to).or_default().push(env.clone());
                }
                let Some(node) = self.nodes.get_mut(&to) else {
                    continue;
                };
                let mut ctx = Ctx::new(to, round, &self.ledger);
                node.on_message(from, env.payload, &mut ctx);
                let Ctx {
                    sent,
                    submissions: subs,
                    notes,
                    ..
                } = ctx;
                submissions.entry(to).or_default().extend(subs);
                self.notes.extend(notes);
                self.absorb(sent, to);
            }
        }

        let ids: Vec<UserId> = self.nodes.keys().copied().collect();
        for id in ids {
            let node = self.nodes.get_mut(&id).expect("listed node");
            let mut ctx = Ctx::new(id, round, &self.ledger);
            node.on_tick(&mut ctx);
            let Ctx {
                sent,
                submissions: subs,
                notes,
                ..
            } = ctx;
            submissions.entry(id).or_default().extend(subs);
            self.notes.extend(notes);
            self.absorb(sent, id);
        }

        // Fulfillments are time-critical, so they go first.
        let mut all: Vec<LedgerEntry> = submissions.into_values().flatten().collect();
        all.sort_by_key(|e| {
            !matches!(
                e,
                LedgerEntry::HtlcFulfill { .. } | LedgerEntry::DltcFulfill { .. }
            )
        });
        let mut appended = 0;
        let mut seen = BTreeSet::new();
        for entry in all {
            let key = serde_json::to_string(&entry).expect("entry serializes");
            if !seen.insert(key) {
                continue;
            }
            match self.ledger.append(entry) {
                Ok(_) => appended += 1,
                Err(_) => self.rejected_entries += 1,
            }
        }
        if appended == 0 {
            self.ledger.advance_time(self.config.ledger_ticks_per_round);
        }
        RoundReport {
            round,
            deliveries,
            appended,
        }
    }

    pub fn is_quiescent(&self) -> bool {
        let now = self.ledger.now();
        self.in_flight.is_empty() && self.nodes.values().all(|n| n.is_idle(now))
    }

    /// Steps until quiescence or the round limit; returns the rounds run.
    pub fn run(&mut self) -> u64 {
        let start = self.round;
        while self.round - start < self.config.max_rounds {
            self.step();
            if self.is_quiescent() {
                break;
            }
        }
        self.round - start
    }

    pub fn trace_jsonl(&self) -> String {
        let mut out = String::new();
        for line in &self.trace {
            out.push_str(&serde_json::to_string(line).expect("trace serializes"));
            out.push('\n');
        }
        out
    }
}

/// Limits of schedule exploration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExploreBound {
    /// Most deliveries allowed at choice points of one run.
    pub max_events: usize,
    /// Most schedules enumerated before switching to sampling.
    pub max_schedules: usize,
    /// Seeded runs used when the bound is exceeded.
    pub samples: usize,
    pub seed: u64,
}

impl Default for ExploreBound {
    fn default() -> Self {
        ExploreBound {
            max_events: 64,
            max_schedules: 20_000,
            samples: 200,
            seed: 0,
        }
    }
}

pub struct Exploration<R> {
    pub runs: Vec<(Schedule, R)>,
    pub exhaustive: bool,
    pub warning: Option<SimError>,
}

/// Next choice vector in depth-first order after a run that produced `log`.
fn next_choices(log: &ScheduleLog) -> Option<Vec<u32>> {
    let i = log.iter().rposition(|c| c.choice + 1 < c.arity)?;
    let mut next: Vec<u32> = log[..i].iter().map(|c| c.choice).collect();
    next.push(log[i].choice + 1);
    Some(next)
}

/// Runs `run` once per distinct delivery order, or on a seeded sample if the
/// scenario has more schedulable events than `bound` allows.
pub fn enumerate_schedules<R>(
    bound: &ExploreBound,
    mut run: impl FnMut(&Schedule) -> (R, ScheduleLog),
) -> Exploration<R> {
    let mut runs = Vec::new();
    let mut next = Some(Vec::new());
    let mut warning = None;
    while let Some(choices) = next.take() {
        let schedule = Schedule::Choices(choices);
        let (r, log) = run(&schedule);
        let events: usize = log.iter().map(|c| c.events).sum();
        runs.push((schedule, r));
        if events > bound.max_events {
            warning = Some(SimError::BoundExceeded {
                events,
                bound: bound.max_events,
            });
            break;
        }
        if runs.len() >= bound.max_schedules {
            if next_choices(&log).is_some() {
                warning = Some(SimError::BoundExceeded {
                    events: runs.len(),
                    bound: bound.max_schedules,
                });
            }
            break;
        }
        next = next_choices(&log);
    }
    if warning.is_none() {
        return Exploration {
            runs,
            exhaustive: true,
            warning,
        };
    }
    let mut sampled = Vec::with_capacity(bound.samples);
    for s in 0..bound.samples as u64 {
        let schedule = Schedule::Seeded(bound.seed.wrapping_add(s));
        let (r, _) = run(&schedule);
        sampled.push((schedule, r));
    }
    Exploration {
        runs: sampled,
        exhaustive: false,
        warning,
    }
}

//! End-to-end acceptance criteria. Runs without the libtest harness so that
//! each criterion prints exactly one pass/fail line with its timing.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{coins, line, names, net_by_user, random_scenario};
use pcnlab::contracts::dltc::{dltc_derive, DltcChainSetup};
use pcnlab::contracts::htlc::{derive_upstream, setup_htlc, verify_hop};
use pcnlab::contracts::{
    Condition, Contract, ContractStatus, ProofBackend, ProofBackendKind, Solution,
};
use pcnlab::harness::{
    canned, execute, explore, AdversarySpec, Metrics, Offline, RunSummary, Scenario,
    Serializability, CANNED,
};
use pcnlab::payment::{hop_timeouts, ContractKind, PaymentStatus, DEFAULT_DELTA};
use pcnlab::primitives::{hash, Amount, ChannelId, Group, Preimage, UserId, LAMBDA};
use pcnlab::rayo::Mode;
use pcnlab::refmodel::{IdealPaymentSpec, IdealState, Reply};
use pcnlab::simnet::{ExploreBound, Schedule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($fmt)+));
        }
    };
}

fn explore_all(s: &Scenario) -> Vec<(Schedule, RunSummary)> {
    let bound = ExploreBound::default();
    let ex = explore(s, &bound).expect("valid scenario");
    ex.runs
}

fn units(m: &Metrics, channel: usize) -> u64 {
    m.final_balances[channel].paid.0
}

fn c1_fig2_amounts() -> Check {
    let s = canned("fig2_fees").unwrap();
    let ex = execute(&s, Schedule::default()).unwrap();
    let m = ex.metrics();
    let report = ex.check();
    ensure!(report.ok(), "violations: {:?}", report.violations);
    let p = &m.payments[0];
    ensure!(
        p.status == PaymentStatus::Succeeded,
        "status {:?}",
        p.status
    );

    // Walk the path backwards: each hop carries the next hop's amount plus
    // the fee of the channel that next hop is made on.
    let fees: Vec<u64> = s.channels.iter().map(|c| c.fee.0).collect();
    let mut oracle = vec![0u64; fees.len()];
    oracle[fees.len() - 1] = s.payments[0].value.0;
    for i in (0..fees.len() - 1).rev() {
        oracle[i] = oracle[i + 1] + fees[i + 1];
    }
    let got: Vec<u64> = p.hops.iter().map(|h| h.v_i.0).collect();
    ensure!(got == oracle, "hop amounts {got:?} != oracle {oracle:?}");
    let expected: Vec<u64> = ["3", "2.75", "2.25", "2"]
        .iter()
        .map(|v| coins(v).0)
        .collect();
    ensure!(
        got == expected,
        "hop amounts {got:?} != expected {expected:?}"
    );
    for (i, want) in expected.iter().enumerate() {
        ensure!(units(&m, i) == *want, "channel {i} paid {}", units(&m, i));
    }
    ensure!(
        s.channels[0].deposit == coins("3"),
        "sender does not start with 3.00"
    );
    let deltas: Vec<i128> = s
        .channels
        .iter()
        .zip(&m.final_balances)
        .map(|(c, b)| b.left - c.deposit.0 as i128)
        .collect();
    ensure!(
        deltas[0] == -300_000_000 && deltas[1] == -275_000_000,
        "edge deltas {deltas:?}"
    );
    let net = net_by_user(&s, &m);
    let want = [("A", -300), ("C", 25), ("E", 50), ("F", 25), ("B", 200)];
    for (u, cents) in want {
        ensure!(net[u] == cents * 1_000_000, "{u} net {}", net[u]);
    }
    Ok("amounts 3 / 2.75 / 2.25 / 2, fees kept by C, E, F".into())
}

fn c2_htlc_chains() -> Check {
    let results: Vec<Check> = std::thread::scope(|scope| {
        let handles: Vec<_> = (1..=8usize)
            .map(|n| {
                scope.spawn(move || -> Check {
                    let mut rng = ChaCha20Rng::seed_from_u64(n as u64);
                    for trial in 0..1000 {
                        let kind = if trial % 2 == 0 {
                            ProofBackendKind::Revealing
                        } else {
                            ProofBackendKind::Oracle
                        };
                        setup_chain_ok(n, &mut rng, &ProofBackend::new(kind))
                            .map_err(|e| format!("n={n} trial={trial} {kind:?}: {e}"))?;
                        let value = Amount(rng.gen_range(1..=100_000_000));
                        let fees: Vec<Amount> = (0..n)
                            .map(|_| Amount(rng.gen_range(0..=5_000_000)))
                            .collect();
                        let mut s = line(Mode::Fulgor, &vec![Amount::coins(10); n], &fees, value);
                        s.header.seed = rng.gen();
                        let ex = execute(&s, Schedule::Seeded(rng.gen())).unwrap();
                        let m = ex.metrics();
                        let report = ex.check();
                        ensure!(report.ok(), "n={n} trial={trial}: {:?}", report.violations);
                        ensure!(
                            m.payments[0].status == PaymentStatus::Succeeded,
                            "n={n} trial={trial}: {:?}",
                            m.payments[0].status
                        );
                        let net = net_by_user(&s, &m);
                        let users = names(n + 1);
                        let total_fees: i128 = fees[1..].iter().map(|f| f.0 as i128).sum();
                        ensure!(
                            net[&users[0]] == -(value.0 as i128 + total_fees),
                            "n={n} trial={trial}: sender net {}",
                            net[&users[0]]
                        );
                        ensure!(
                            net[&users[n]] == value.0 as i128,
                            "n={n} trial={trial}: receiver"
                        );
                        for i in 1..n {
                            ensure!(
                                net[&users[i]] == fees[i].0 as i128,
                                "n={n} trial={trial}: intermediary {i} net {}",
                                net[&users[i]]
                            );
                        }
                    }
                    Ok(String::new())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for r in results {
        r?;
    }
    Ok(
        "8000 setups verified and released hop by hop; 8000 protocol runs settled with exact fees"
            .into(),
    )
}

/// Checks one multi-hop setup: proofs verify, conditions are distinct, and
/// releasing from the receiver backwards opens every hop. The expected
/// preimage of hop `i` is recomputed as the XOR of `x_i..x_n`.
fn setup_chain_ok(n: usize, rng: &mut ChaCha20Rng, prover: &ProofBackend) -> Result<(), String> {
    let setup = setup_htlc(n, rng, prover);
    let ys = setup.conditions();
    let distinct: BTreeSet<_> = ys.iter().collect();
    ensure!(distinct.len() == n, "conditions repeat");
    for i in 0..n - 1 {
        let proof = setup.hops[i].proof.as_ref().ok_or("missing proof")?;
        ensure!(
            verify_hop(prover, ys[i + 1], ys[i], setup.hops[i].x, proof),
            "proof {i} rejected"
        );
    }
    let mut r = setup.hops[n - 1].x;
    for i in (0..n).rev() {
        if i < n - 1 {
            r = derive_upstream(&setup.hops[i].x, &r, &ys[i + 1]).map_err(|e| e.to_string())?;
        }
        let expected = setup.hops[i..]
            .iter()
            .fold(Preimage::zero(), |acc, h| acc.xor(&h.x));
        ensure!(
            r == expected,
            "hop {i}: derived preimage differs from XOR of shares"
        );
        ensure!(
            hash(&r.0) == ys[i],
            "hop {i}: preimage does not open the condition"
        );
        let mut c = Contract::new(
            ChannelId(i as u64),
            UserId(i as u32),
            UserId(i as u32 + 1),
            Condition::Hash(ys[i]),
            Amount(1),
            100,
        );
        c.fulfill(Solution::Preimage(r), 1, false)
            .map_err(|e| format!("hop {i}: {e}"))?;
    }
    Ok(())
}

/// Adversarial strategies for `user` on a path of `n` contracts issued in
/// round 1.
fn strategies(user: &str, n: usize) -> Vec<(&'static str, AdversarySpec)> {
    // Messages sent while offline surface a few rounds before the
    // sender's contract expires.
    let first_timeout = hop_timeouts(1, n, DEFAULT_DELTA, 0)[0];
    let base = AdversarySpec {
        user: user.to_string(),
        ..AdversarySpec::default()
    };
    vec![
        (
            "withhold",
            AdversarySpec {
                withhold: true,
                ..base.clone()
            },
        ),
        (
            "early_abort",
            AdversarySpec {
                early_abort: true,
                ..base.clone()
            },
        ),
        (
            "forge",
            AdversarySpec {
                forge_preimage: true,
                ..base.clone()
            },
        ),
        (
            "offline",
            AdversarySpec {
                offline: Some(Offline {
                    delay: 60,
                    from_round: 2,
                    until_round: None,
                }),
                ..base.clone()
            },
        ),
        (
            "offline_until_near_timeout",
            AdversarySpec {
                offline: Some(Offline {
                    delay: first_timeout - 4,
                    from_round: 2,
                    until_round: Some(4),
                }),
                ..base.clone()
            },
        ),
        (
            "late_corruption",
            AdversarySpec {
                round: 4,
                withhold: true,
                ..base
            },
        ),
    ]
}

/// Independent balance-security oracle over final channel balances.
fn honest_outcome_ok(s: &Scenario, m: &Metrics) -> Result<(), String> {
    let corrupted: BTreeSet<&str> = s.adversaries.iter().map(|a| a.user.as_str()).collect();
    let net = net_by_user(s, m);
    let p = &s.payments[0];
    let hops = &m.payments[0].hops;
    let v1 = hops[0].v_i.0 as i128;
    for (i, u) in p.path.iter().enumerate() {
        if corrupted.contains(u.as_str()) {
            continue;
        }
        let got = net[u];
        let ok = if i == 0 {
            got == 0 || got == -v1
        } else if i == p.path.len() - 1 {
            got == 0 || got == p.value.0 as i128
        } else {
            got == 0 || got == (hops[i - 1].v_i.0 - hops[i].v_i.0) as i128
        };
        if !ok {
            return Err(format!("{u} net {got}"));
        }
    }
    let (sender, receiver) = (&p.path[0], p.path.last().unwrap());
    if !corrupted.contains(sender.as_str())
        && !corrupted.contains(receiver.as_str())
        && net[sender] != 0
        && net[receiver] != p.value.0 as i128
    {
        return Err("honest sender paid but honest receiver was not paid".into());
    }
    Ok(())
}

fn c3_balance_security() -> Check {
    let mut cases = 0;
    let mut runs = 0;
    for n in 1..=5usize {
        for mode in [Mode::Fulgor, Mode::Rayo] {
            let users = names(n + 1);
            let mut corruptions: Vec<Vec<usize>> = (0..=n).map(|i| vec![i]).collect();
            for i in 0..=n {
                for j in i + 2..=n {
                    corruptions.push(vec![i, j]);
                }
            }
            for set in corruptions {
                for k in 0..strategies("x", n).len() {
                    let mut s = line(
                        mode,
                        &vec![Amount::coins(5); n],
                        &vec![coins("0.01"); n],
                        Amount::coins(1),
                    );
                    s.adversaries = set
                        .iter()
                        .map(|&i| strategies(&users[i], n)[k].1.clone())
                        .collect();
                    let label = strategies("x", n)[k].0;
                    let e = execute(&s, Schedule::default()).unwrap();
                    for u in &users {
                        let uid = s.user_id(u).unwrap();
                        if e.corrupted.contains(&uid) {
                            continue;
                        }
                        for r in e.net.nodes[&uid].channels.values() {
                            // Funds an honest payer locked must come back or be paid out.
                            let open = r
                                .state
                                .contracts
                                .iter()
                                .any(|c| c.payer == uid && c.status == ContractStatus::Locked);
                            ensure!(!open, "n={n} {label} {set:?}: {u} still has funds locked");
                        }
                    }
                    for (sched, r) in explore_all(&s) {
                        runs += 1;
                        ensure!(
                            r.report.ok(),
                            "n={n} {mode:?} {label} corrupt {set:?} {sched}: {:?}",
                            r.report.violations
                        );
                        honest_outcome_ok(&s, &r.metrics).map_err(|e| {
                            format!("n={n} {mode:?} {label} corrupt {set:?} {sched}: {e}")
                        })?;
                    }
                    cases += 1;
                }
            }
        }
    }
    Ok(format!(
        "{cases} corruption cases, {runs} schedules, no honest loss"
    ))
}

/// Replays committed payments one at a time on the reference model in the
/// order the checker reported and compares the paid totals.
fn sequential_replay(s: &Scenario, m: &Metrics, order: &[usize]) -> Result<(), String> {
    let mut st = IdealState::new(false);
    for (spec, b) in s.channels.iter().zip(&m.final_balances) {
        let l = s.user_id(&spec.from).unwrap();
        let r = s.user_id(&spec.to).unwrap();
        st.ideal_open(b.id, l, r, spec.deposit, spec.timeout, spec.fee, false)
            .map_err(|e| e.to_string())?;
    }
    for id in order {
        let p = m.payments.iter().find(|p| p.id == *id).unwrap();
        let spec = IdealPaymentSpec {
            id: p.id,
            txid: None,
            path: p.path.clone(),
            amounts: p.hops.iter().map(|h| h.v_i).collect(),
            timeouts: p.hops.iter().map(|h| h.t_i).collect(),
        };
        let n = spec.path.len();
        let from = p.committed.iter().position(|c| *c).unwrap_or(n);
        let mut replies = vec![Reply::Accept; n];
        if from > 0 {
            replies[from - 1] = Reply::Refuse;
        }
        st.ideal_pay(spec).map_err(|e| e.to_string())?;
        st.ideal_decide(p.id, &replies).map_err(|e| e.to_string())?;
    }
    let paid = st.paid();
    for b in &m.final_balances {
        let want = m
            .payments
            .iter()
            .filter(|p| !order.contains(&p.id))
            .flat_map(|p| {
                p.path
                    .iter()
                    .zip(&p.committed)
                    .filter(|(c, k)| **c == b.id && **k)
            })
            .count();
        ensure!(
            want == 0,
            "payment outside the order committed on {}",
            b.channel
        );
        let got = paid.get(&b.id).copied().unwrap_or_default();
        ensure!(
            got == b.paid,
            "{}: sequential {} != concurrent {}",
            b.channel,
            got.0,
            b.paid.0
        );
    }
    Ok(())
}

fn c4_serializability() -> Check {
    let mut runs = 0;
    for seed in 0..40 {
        for mode in [Mode::Fulgor, Mode::Rayo] {
            let s = random_scenario(seed, mode);
            for (sched, r) in explore_all(&s) {
                runs += 1;
                let m = &r.metrics;
                // Closed form: consumption commutes, so an execution is
                // serializable exactly when payments are all-or-nothing and
                // no channel pays out more than its deposit.
                let mut demand: BTreeMap<ChannelId, u64> = BTreeMap::new();
                for p in &m.payments {
                    let all = p.committed.iter().all(|c| *c);
                    let none = p.committed.iter().all(|c| !*c);
                    ensure!(all || none, "seed {seed} {sched}: partial payment {}", p.id);
                    for (i, c) in p.path.iter().enumerate() {
                        if p.committed[i] {
                            *demand.entry(*c).or_default() += p.hops[i].v_i.0;
                        }
                    }
                }
                for (spec, b) in s.channels.iter().zip(&m.final_balances) {
                    let d = demand.get(&b.id).copied().unwrap_or(0);
                    ensure!(
                        d == b.paid.0 && d <= spec.deposit.0,
                        "seed {seed} {sched}: {}",
                        b.channel
                    );
                }
                match &r.report.serializable {
                    Some(Serializability::Yes { order }) => sequential_replay(&s, m, order)
                        .map_err(|e| format!("seed {seed} {mode:?} {sched}: {e}"))?,
                    other => return Err(format!("seed {seed} {mode:?} {sched}: {other:?}")),
                }
                ensure!(
                    r.report.ok(),
                    "seed {seed} {sched}: {:?}",
                    r.report.violations
                );
            }
        }
    }

    let s = canned("bottleneck_byzantine").unwrap();
    let bottleneck = execute(&s, Schedule::default()).unwrap().channel_ids[0];
    for (sched, r) in explore_all(&s) {
        runs += 1;
        ensure!(
            r.metrics.successes() == 2,
            "{sched}: {} successes",
            r.metrics.successes()
        );
        match &r.report.serializable {
            Some(Serializability::No { witness }) => {
                ensure!(
                    witness.channel == bottleneck,
                    "{sched}: witness {:?}",
                    witness.channel
                );
                ensure!(
                    witness.demand > witness.capacity,
                    "{sched}: witness not overspent"
                );
            }
            other => return Err(format!("bottleneck {sched}: {other:?}")),
        }
    }
    let mut honest = s.clone();
    honest.adversaries.clear();
    honest.expects.clear();
    for (sched, r) in explore_all(&honest) {
        runs += 1;
        ensure!(
            r.metrics.successes() == 1,
            "honest bottleneck {sched}: {}",
            r.metrics.successes()
        );
        ensure!(
            r.report.ok(),
            "honest bottleneck {sched}: {:?}",
            r.report.violations
        );
    }
    Ok(format!(
        "{runs} runs; byzantine bottleneck reported not serializable"
    ))
}

fn c5_fig4() -> Check {
    let s = canned("fig4_deadlock").unwrap();
    let runs = explore_all(&s);
    for (sched, r) in &runs {
        ensure!(r.report.ok(), "rayo {sched}: {:?}", r.report.violations);
        let winners: Vec<_> = r
            .metrics
            .payments
            .iter()
            .filter(|p| p.status == PaymentStatus::Succeeded)
            .collect();
        ensure!(
            winners.len() == 1,
            "rayo {sched}: {} successes",
            winners.len()
        );
        let top = r
            .metrics
            .payments
            .iter()
            .map(|p| p.txid.unwrap())
            .max()
            .unwrap();
        ensure!(
            winners[0].txid == Some(top),
            "rayo {sched}: lower identifier won"
        );
    }
    let mut fulgor = s.clone();
    fulgor.header.mode = Mode::Fulgor;
    fulgor.expects.clear();
    let f = explore_all(&fulgor);
    let deadlocked = f.iter().filter(|(_, r)| r.metrics.successes() == 0).count();
    ensure!(deadlocked > 0, "no fulgor schedule aborted both payments");
    for (sched, r) in &f {
        ensure!(r.report.ok(), "fulgor {sched}: {:?}", r.report.violations);
    }
    Ok(format!(
        "rayo: {}/{} schedules with exactly the higher identifier succeeding; fulgor: {deadlocked}/{} both aborted",
        runs.len(),
        runs.len(),
        f.len()
    ))
}

fn c6_ideal_equivalence() -> Check {
    let mut runs = 0;
    let mut scenarios: Vec<Scenario> = Vec::new();
    for (name, _) in CANNED {
        for mode in [Mode::Fulgor, Mode::Rayo] {
            let mut s = canned(name).unwrap();
            s.header.mode = mode;
            s.header.slack = s.header.slack.max(8);
            s.expects.clear();
            scenarios.push(s);
        }
    }
    for seed in 100..120 {
        scenarios.push(random_scenario(seed, Mode::Rayo));
    }
    for s in &scenarios {
        for (sched, r) in explore_all(s) {
            runs += 1;
            ensure!(
                r.report.ideal_match == Some(true),
                "{} {:?} {sched}: {:?}",
                s.header.name,
                s.header.mode,
                r.report.violations
            );
        }
    }
    Ok(format!(
        "{} scenarios, {runs} schedules matched by the reference model",
        scenarios.len()
    ))
}

/// Long hexadecimal tokens anywhere in what `u` received.
fn hex_tokens(e: &pcnlab::harness::Execution, u: pcnlab::primitives::UserId) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for env in e.net.view_of(u) {
        let text = serde_json::to_string(&env.payload).unwrap();
        for tok in text.split(|c: char| !c.is_ascii_hexdigit()) {
            if tok.len() >= 32 {
                out.insert(tok.to_string());
            }
        }
    }
    out
}

fn c7_anonymity() -> Check {
    let mut pairs = 0;
    for n in 3..=6usize {
        let users = names(n + 1);
        for i in 1..n {
            for j in i + 2..n {
                for mode in [Mode::Fulgor, Mode::Rayo] {
                    let mut s = line(
                        mode,
                        &vec![Amount::coins(5); n],
                        &vec![coins("0.01"); n],
                        Amount::coins(1),
                    );
                    for k in [i, j] {
                        s.adversaries.push(AdversarySpec {
                            user: users[k].clone(),
                            ..AdversarySpec::default()
                        });
                    }
                    let e = execute(&s, Schedule::default()).unwrap();
                    let (a, b) = (s.user_id(&users[i]).unwrap(), s.user_id(&users[j]).unwrap());
                    let shared: BTreeSet<String> = hex_tokens(&e, a)
                        .intersection(&hex_tokens(&e, b))
                        .cloned()
                        .collect();
                    let ids: BTreeSet<String> = e
                        .observed_identifiers(a)
                        .intersection(&e.observed_identifiers(b))
                        .cloned()
                        .collect();
                    let txid = e.payment(0).unwrap().txid;
                    match mode {
                        Mode::Fulgor => {
                            ensure!(
                                shared.is_empty() && ids.is_empty(),
                                "n={n} ({i},{j}) share {shared:?} {ids:?}"
                            );
                        }
                        Mode::Rayo => {
                            let t = txid.ok_or("rayo payment without identifier")?;
                            ensure!(
                                shared.contains(&t.to_string()),
                                "n={n} ({i},{j}) do not share the identifier"
                            );
                            ensure!(ids.len() == 1, "n={n} ({i},{j}) share {ids:?}");
                        }
                    }
                    pairs += 1;
                }
            }
        }
    }
    // Two same-value payments through corrupted x, honest h and corrupted y.
    for mode in [Mode::Fulgor, Mode::Rayo] {
        let mut s = Scenario::new("shared_hop", mode);
        for u in ["s1", "s2", "x", "h", "y", "r1", "r2"] {
            s.user(u);
        }
        for (a, b) in [
            ("s1", "x"),
            ("s2", "x"),
            ("x", "h"),
            ("h", "y"),
            ("y", "r1"),
            ("y", "r2"),
        ] {
            s.channel(a, b, Amount::coins(5), Amount::ZERO);
        }
        s.pay(&["s1", "x", "h", "y", "r1"], Amount::coins(1), 1);
        s.pay(&["s2", "x", "h", "y", "r2"], Amount::coins(1), 1);
        for u in ["x", "y"] {
            s.adversaries.push(AdversarySpec {
                user: u.into(),
                ..AdversarySpec::default()
            });
        }
        for (sched, r) in explore_all(&s) {
            let e = execute(&s, sched.clone()).unwrap();
            ensure!(
                r.metrics.successes() == 2,
                "shared hop {mode:?} {sched}: payments failed"
            );
            let (x, y) = (s.user_id("x").unwrap(), s.user_id("y").unwrap());
            let shared: BTreeSet<String> = hex_tokens(&e, x)
                .intersection(&hex_tokens(&e, y))
                .cloned()
                .collect();
            match mode {
                Mode::Fulgor => ensure!(
                    shared.is_empty(),
                    "shared hop {sched}: x and y share {shared:?}"
                ),
                Mode::Rayo => {
                    // Both corrupted hops see each payment's identifier,
                    // which links their halves of the path.
                    for p in e.payments() {
                        let t = p.txid.ok_or("rayo payment without identifier")?.to_string();
                        ensure!(
                            shared.contains(&t),
                            "shared hop {sched}: identifier of payment {} not seen at both hops",
                            p.id
                        );
                    }
                }
            }
            pairs += 1;
        }
    }
    // Per-hop conditions are digests of LAMBDA bytes, far beyond 100 bits,
    // so unrelated hops collide with negligible probability.
    ensure!(LAMBDA * 8 >= 100, "digest too short");
    Ok(format!(
        "{pairs} coalitions: fulgor views disjoint, rayo views share the identifier"
    ))
}

fn c8_dltc() -> Check {
    let g = Group::tiny();
    let q = g.order;
    let mut chains = 0u64;
    for k in 1..=4usize {
        for code in 0..q.pow(k as u32 + 1) {
            let mut digits = (0..=k).scan(code, |c, _| {
                let d = *c % q;
                *c /= q;
                Some(d)
            });
            let x = digits.next().unwrap();
            let offsets: Vec<u64> = digits.collect();
            let setup = DltcChainSetup {
                group: g,
                x,
                big_x: g.g_pow(x),
                offsets: offsets.clone(),
            };
            let mut z = setup.receiver_solution();
            for i in (0..k).rev() {
                if i < k - 1 {
                    z = dltc_derive(&g, z, offsets[i + 1], offsets[i]);
                }
                ensure!(
                    (x + offsets[i]) % q == z,
                    "k={k} x={x} {offsets:?}: hop {i} solution {z}"
                );
                setup
                    .condition(i)
                    .check(&Solution::Exponent(z))
                    .map_err(|e| format!("k={k} x={x} {offsets:?}: {e}"))?;
            }
            chains += 1;
        }
    }
    // A condition opens with exactly one exponent.
    for x in 0..q {
        for z in 0..q {
            let cond = DltcChainSetup {
                group: g,
                x,
                big_x: g.g_pow(x),
                offsets: vec![z],
            }
            .condition(0);
            for zp in 0..q {
                let opens = cond.check(&Solution::Exponent(zp)).is_ok();
                ensure!(
                    opens == (zp == (x + z) % q),
                    "x={x} z={z}: z'={zp} opens={opens}"
                );
            }
        }
    }
    // For any fixed secret, two blinded conditions on the path are jointly
    // uniform over pairs of group elements.
    for x in 0..q {
        let mut seen: BTreeMap<(u64, u64), u32> = BTreeMap::new();
        for z0 in 0..q {
            for z1 in 0..q {
                let s = DltcChainSetup {
                    group: g,
                    x,
                    big_x: g.g_pow(x),
                    offsets: vec![z0, z1],
                };
                let el = |c: Condition| match c {
                    Condition::Dlog { element, .. } => element,
                    Condition::Hash(_) => unreachable!(),
                };
                *seen
                    .entry((el(s.condition(0)), el(s.condition(1))))
                    .or_default() += 1;
            }
        }
        ensure!(
            seen.len() as u64 == q * q && seen.values().all(|c| *c == 1),
            "x={x}: blinding not uniform"
        );
    }
    let mut protocol = 0;
    for n in 1..=4usize {
        for mode in [Mode::Fulgor, Mode::Rayo] {
            let mut s = line(
                mode,
                &vec![Amount::coins(3); n],
                &vec![coins("0.1"); n],
                Amount::coins(1),
            );
            s.header.contracts = ContractKind::Dltc;
            for (sched, r) in explore_all(&s) {
                ensure!(
                    r.report.ok(),
                    "dltc n={n} {sched}: {:?}",
                    r.report.violations
                );
                ensure!(
                    r.metrics.payments[0].status == PaymentStatus::Succeeded,
                    "dltc n={n} {sched}"
                );
                protocol += 1;
            }
        }
    }
    Ok(format!("{chains} chains over q={q} solvable hop by hop, blinding uniform, {protocol} protocol runs settled"))
}

fn c9_linear_cost() -> Check {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut rounds = Vec::new();
    for k in 2..=11usize {
        let s = line(
            Mode::Fulgor,
            &vec![Amount::coins(5); k],
            &vec![coins("0.01"); k],
            Amount::coins(1),
        );
        let e = execute(&s, Schedule::default()).unwrap();
        let m = e.metrics();
        ensure!(
            m.payments[0].status == PaymentStatus::Succeeded,
            "k={k} failed"
        );
        rounds.push((k, m.payments[0].rounds.unwrap()));
        // Ten intermediaries (k = 11) is checked for completion and rounds;
        // the fit covers k = 2..10.
        if k <= 10 {
            xs.push(k as f64);
            ys.push(m.messages as f64);
        }
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let icept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - (icept + slope * x)).powi(2))
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = 1.0 - ss_res / ss_tot;
    ensure!(r2 > 0.99, "messages {ys:?} fit R^2 {r2:.4}");
    const C: u64 = 4;
    for (k, r) in &rounds {
        ensure!(*r <= 4 * *k as u64 + C, "k={k}: {r} rounds > 4k+{C}");
    }
    Ok(format!(
        "messages ~ {slope:.2}k + {icept:.2} (R^2 {r2:.5}); rounds {rounds:?} <= 4k+{C}"
    ))
}

fn main() -> ExitCode {
    type Criterion = (u32, &'static str, Duration, fn() -> Check);
    let criteria: [Criterion; 9] = [
        (
            1,
            "fee amounts on the four-hop example",
            Duration::from_secs(1),
            c1_fig2_amounts,
        ),
        (
            2,
            "htlc chains settle",
            Duration::from_secs(10),
            c2_htlc_chains,
        ),
        (
            3,
            "balance security",
            Duration::from_secs(60),
            c3_balance_security,
        ),
        (
            4,
            "serializability",
            Duration::from_secs(300),
            c4_serializability,
        ),
        (5, "deadlock resolution", Duration::from_secs(60), c5_fig4),
        (
            6,
            "ideal equivalence",
            Duration::from_secs(300),
            c6_ideal_equivalence,
        ),
        (
            7,
            "anonymity of non-adjacent coalitions",
            Duration::from_secs(60),
            c7_anonymity,
        ),
        (8, "dltc correctness", Duration::from_secs(30), c8_dltc),
        (
            9,
            "linear message cost",
            Duration::from_secs(60),
            c9_linear_cost,
        ),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (n, name, limit, f) in criteria {
        if !filter.is_empty()
            && !filter
                .iter()
                .any(|a| name.contains(a.as_str()) || *a == n.to_string())
        {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) if elapsed <= limit => (true, d),
            Ok(d) => (false, format!("{d}; exceeded {limit:?}")),
            Err(e) => (false, e),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "[{}] criterion {n}: {name} ({:.2}s, limit {}s): {detail}",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

#![allow(dead_code)]

use std::collections::BTreeMap;

use pcnlab::harness::{Metrics, Scenario};
use pcnlab::primitives::Amount;
use pcnlab::rayo::Mode;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub fn coins(s: &str) -> Amount {
    s.parse().unwrap()
}

pub fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("u{i}")).collect()
}

/// A single payment over `deposits.len()` hops; `fees[i]` is the fee of
/// hop `i`.
pub fn line(mode: Mode, deposits: &[Amount], fees: &[Amount], value: Amount) -> Scenario {
    let users = names(deposits.len() + 1);
    let mut s = Scenario::new("line", mode);
    for u in &users {
        s.user(u);
    }
    for (i, w) in users.windows(2).enumerate() {
        s.channel(&w[0], &w[1], deposits[i], fees[i]);
    }
    let path: Vec<&str> = users.iter().map(String::as_str).collect();
    s.pay(&path, value, 1);
    s
}

/// Net change of every user's channel balances: received on channels
/// where it is the right endpoint minus paid where it is the left one.
pub fn net_by_user(s: &Scenario, m: &Metrics) -> BTreeMap<String, i128> {
    let mut net: BTreeMap<String, i128> = s.users.iter().map(|u| (u.name.clone(), 0)).collect();
    for (spec, b) in s.channels.iter().zip(&m.final_balances) {
        *net.get_mut(&spec.to).unwrap() += b.paid.0 as i128;
        *net.get_mut(&spec.from).unwrap() -= b.paid.0 as i128;
    }
    net
}

/// Up to three payments of one coin over random simple paths on at most
/// six users, all honest.
pub fn random_scenario(seed: u64, mode: Mode) -> Scenario {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = rng.gen_range(3..=6);
    let users = names(n);
    let mut s = Scenario::new(&format!("random-{seed}"), mode);
    s.header.slack = 8;
    for u in &users {
        s.user(u);
    }
    let payments = rng.gen_range(1..=3);
    for _ in 0..payments {
        let len = rng.gen_range(2..=n.min(5));
        let mut path: Vec<&str> = users.iter().map(String::as_str).collect();
        path.shuffle(&mut rng);
        path.truncate(len);
        for w in path.windows(2) {
            if !s.channels.iter().any(|c| c.from == w[0] && c.to == w[1]) {
                let deposit = Amount::coins(rng.gen_range(1..=2));
                let fee = if rng.gen_bool(0.5) {
                    coins("0.1")
                } else {
                    Amount::ZERO
                };
                s.channel(w[0], w[1], deposit, fee);
            }
        }
        s.pay(&path, coins("0.5"), rng.gen_range(1..=2));
    }
    s
}

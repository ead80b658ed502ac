//! Contracts locked by a group element `Z' = X · g^z`, opened by `z' = x + z`.

use rand::RngCore;

use super::{Condition, Contract, ContractError, Settlement, Solution};
use crate::primitives::{Group, GroupElement, Scalar};

/// Receiver challenge: a random `x` and `X = g^x`.
pub fn dltc_challenge<R: RngCore + ?Sized>(group: &Group, rng: &mut R) -> (Scalar, GroupElement) {
    let x = group.random_scalar(rng);
    (x, group.g_pow(x))
}

/// `X · g^z`.
pub fn dltc_blind(group: &Group, big_x: GroupElement, z: Scalar) -> GroupElement {
    group.mul(big_x, group.g_pow(z))
}

pub fn dltc_fulfill(
    contract: &mut Contract,
    z_prime: Scalar,
    now: u64,
    contested: bool,
) -> Result<Settlement, ContractError> {
    contract.fulfill(Solution::Exponent(z_prime), now, contested)
}

/// Solution of the incoming contract (offset `z_in`) from the revealed
/// solution of the outgoing one (offset `z_out`).
pub fn dltc_derive(group: &Group, z_prime: Scalar, z_out: Scalar, z_in: Scalar) -> Scalar {
    group.scalar_add(group.scalar_sub(z_prime, z_out), z_in)
}

/// Challenge and per-contract offsets for a path of `offsets.len()` contracts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DltcChainSetup {
    pub group: Group,
    pub x: Scalar,
    pub big_x: GroupElement,
    pub offsets: Vec<Scalar>,
}

impl DltcChainSetup {
    pub fn condition(&self, i: usize) -> Condition {
        Condition::Dlog {
            element: dltc_blind(&self.group, self.big_x, self.offsets[i]),
            group: self.group.into(),
        }
    }

    /// What the receiver reveals on the last contract.
    pub fn receiver_solution(&self) -> Scalar {
        self.group
            .scalar_add(self.x, *self.offsets.last().expect("non-empty chain"))
    }
}

pub fn setup_dltc<R: RngCore + ?Sized>(
    contracts: usize,
    group: Group,
    rng: &mut R,
) -> DltcChainSetup {
    assert!(contracts >= 1, "a chain needs at least one contract");
    let (x, big_x) = dltc_challenge(&group, rng);
    let offsets = (0..contracts).map(|_| group.random_scalar(rng)).collect();
    DltcChainSetup {
        group,
        x,
        big_x,
        offsets,
    }
}

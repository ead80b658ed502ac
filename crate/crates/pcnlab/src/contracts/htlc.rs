//! Multi-hop setup with XOR-chained hash conditions.

use rand::RngCore;

use super::proof::{Proof, ProofSystem, Statement};
use super::ContractError;
use crate::primitives::{hash, Digest, Preimage};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopSetup {
    pub x: Preimage,
    pub y: Digest,
    /// Absent for the last hop, whose condition opens directly with `x`.
    pub proof: Option<Proof>,
}

/// `hops[i]` holds the tuple of the (i+1)-th contract in path order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiHopSetup {
    pub hops: Vec<HopSetup>,
}

impl MultiHopSetup {
    pub fn len(&self) -> usize {
        self.hops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hops.is_empty()
    }

    /// Statement proved for hop `i` (0-based), if it has a successor.
    pub fn statement(&self, i: usize) -> Option<Statement> {
        let next = self.hops.get(i + 1)?;
        Some(Statement {
            y_next: next.y,
            y_this: self.hops[i].y,
            x_this: self.hops[i].x,
        })
    }

    pub fn conditions(&self) -> Vec<Digest> {
        self.hops.iter().map(|h| h.y).collect()
    }
}

/// Samples `n` independent strings `x_i`, sets `y_i = H(x_i ^ ... ^ x_n)`
/// and proves every adjacent pair with `prover`.
pub fn setup_htlc<R: RngCore + ?Sized, P: ProofSystem + ?Sized>(
    n: usize,
    rng: &mut R,
    prover: &P,
) -> MultiHopSetup {
    assert!(n >= 1, "a setup needs at least one hop");
    let xs: Vec<Preimage> = (0..n).map(|_| Preimage::random(rng)).collect();
    // suffix[i] = x_i ^ ... ^ x_{n-1}
    let mut suffix = vec![Preimage::zero(); n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1].xor(&xs[i]);
    }
    let ys: Vec<Digest> = (0..n).map(|i| hash(&suffix[i].0)).collect();
    let hops = (0..n)
        .map(|i| {
            let proof = (i + 1 < n).then(|| {
                let st = Statement {
                    y_next: ys[i + 1],
                    y_this: ys[i],
                    x_this: xs[i],
                };
                prover.prove(&st, &suffix[i + 1])
            });
            HopSetup {
                x: xs[i],
                y: ys[i],
                proof,
            }
        })
        .collect();
    MultiHopSetup { hops }
}

/// Baseline where every hop shares one condition, as in plain HTLC chains.
pub fn plain_setup<R: RngCore + ?Sized>(n: usize, rng: &mut R) -> MultiHopSetup {
    let r = Preimage::random(rng);
    let y = hash(&r.0);
    let hops = (0..n)
        .map(|i| HopSetup {
            x: if i + 1 == n { r } else { Preimage::zero() },
            y,
            proof: None,
        })
        .collect();
    MultiHopSetup { hops }
}

pub fn verify_hop<P: ProofSystem + ?Sized>(
    prover: &P,
    y_next: Digest,
    y_this: Digest,
    x_this: Preimage,
    proof: &Proof,
) -> bool {
    prover.verify(
        &Statement {
            y_next,
            y_this,
            x_this,
        },
        proof,
    )
}

/// Turns the preimage `r` of the outgoing condition `y_next` into the
/// preimage of the incoming condition.
pub fn derive_upstream(
    x_i: &Preimage,
    r: &Preimage,
    y_next: &Digest,
) -> Result<Preimage, ContractError> {
    if hash(&r.0) != *y_next {
        return Err(ContractError::BadPreimage);
    }
    Ok(x_i.xor(r))
}

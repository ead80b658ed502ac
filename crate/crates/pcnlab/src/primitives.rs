//! Hashing, XOR-combinable bitstrings, a small prime-order group, fixed-point
//! amounts and the identifier types shared by every other module.

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Byte length of digests and preimages.
pub const LAMBDA: usize = 32;

/// Smallest currency units per coin.
pub const UNITS_PER_COIN: u64 = 100_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PrimitiveError {
    /// Two bitstrings of different length were combined.
    #[error("length mismatch: {0} vs {1} bytes")]
    LengthMismatch(usize, usize),
    /// A byte string does not have the fixed width of the target type.
    #[error("expected {expected} bytes, got {got}")]
    BadWidth { expected: usize, got: usize },
    /// Hex text could not be decoded.
    #[error("invalid hex: {0}")]
    Hex(String),
    /// Checked arithmetic left the non-negative range.
    #[error("amount underflow: {0} - {1}")]
    Underflow(u64, u64),
    /// Checked arithmetic exceeded the representable range.
    #[error("amount overflow")]
    Overflow,
    /// A decimal coin string could not be parsed.
    #[error("invalid amount literal {0:?}")]
    AmountLiteral(String),
}

fn fixed_from_hex(s: &str) -> Result<[u8; LAMBDA], PrimitiveError> {
    let bytes = hex::decode(s).map_err(|e| PrimitiveError::Hex(e.to_string()))?;
    fixed_from_slice(&bytes)
}

fn fixed_from_slice(bytes: &[u8]) -> Result<[u8; LAMBDA], PrimitiveError> {
    bytes.try_into().map_err(|_| PrimitiveError::BadWidth {
        expected: LAMBDA,
        got: bytes.len(),
    })
}

macro_rules! bitstring {
    ($name:ident) => {
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
        pub struct $name(pub [u8; LAMBDA]);

        impl $name {
            pub fn from_slice(bytes: &[u8]) -> Result<Self, PrimitiveError> {
                fixed_from_slice(bytes).map(Self)
            }

            pub fn from_hex(s: &str) -> Result<Self, PrimitiveError> {
                fixed_from_hex(s).map(Self)
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn as_bytes(&self) -> &[u8; LAMBDA] {
                &self.0
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({}..)", stringify!($name), &self.to_hex()[..12])
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                Self::from_hex(&s).map_err(serde::de::Error::custom)
            }
        }
    };
}

bitstring!(Digest);
bitstring!(Preimage);

impl Preimage {
    pub fn zero() -> Self {
        Preimage([0u8; LAMBDA])
    }

    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut b = [0u8; LAMBDA];
        rng.fill_bytes(&mut b);
        Preimage(b)
    }

    /// Component-wise XOR. Widths are fixed, so this cannot fail.
    pub fn xor(&self, other: &Preimage) -> Preimage {
        let mut out = [0u8; LAMBDA];
        for (o, (a, b)) in out.iter_mut().zip(self.0.iter().zip(other.0.iter())) {
            *o = a ^ b;
        }
        Preimage(out)
    }
}

/// XOR of two arbitrary byte strings of equal length.
pub fn xor(a: &[u8], b: &[u8]) -> Result<Vec<u8>, PrimitiveError> {
    if a.len() != b.len() {
        return Err(PrimitiveError::LengthMismatch(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x ^ y).collect())
}

/// Selects the function behind [`Hasher::hash`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HashBackend {
    Sha256,
    /// SHA-256 keyed with a seed, for tests that need an independent oracle
    /// family.
    SeededPrf(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hasher {
    pub backend: HashBackend,
}

impl Default for Hasher {
    fn default() -> Self {
        Hasher {
            backend: HashBackend::Sha256,
        }
    }
}

impl Hasher {
    pub fn new(backend: HashBackend) -> Self {
        Hasher { backend }
    }

    pub fn hash(&self, data: &[u8]) -> Digest {
        let mut h = Sha256::new();
        if let HashBackend::SeededPrf(seed) = self.backend {
            h.update(b"pcnlab-prf");
            h.update(seed.to_be_bytes());
        }
        h.update(data);
        Digest(h.finalize().into())
    }
}

/// SHA-256 of `data`; the hash used by contracts and identifiers.
pub fn hash(data: &[u8]) -> Digest {
    Hasher::default().hash(data)
}

pub type GroupElement = u64;
pub type Scalar = u64;

/// The order-`q` subgroup of quadratic residues modulo the safe prime
/// `modulus = 2q + 1`, generated by `generator`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub modulus: u64,
    pub order: u64,
    pub generator: u64,
}

impl Group {
    /// q = 11. Small enough to enumerate whole chains of offsets.
    pub const fn tiny() -> Self {
        Group {
            modulus: 23,
            order: 11,
            generator: 4,
        }
    }

    /// q = 1013. Used for exhaustive uniformity and solvability checks.
    pub const fn toy() -> Self {
        Group {
            modulus: 2027,
            order: 1013,
            generator: 4,
        }
    }

    /// q ≈ 2^30; the default. Discrete logs of small exponents are still
    /// recoverable by search.
    pub const fn test() -> Self {
        Group {
            modulus: 2_147_483_783,
            order: 1_073_741_891,
            generator: 4,
        }
    }

    /// q ≈ 2^61, out of reach for brute force.
    pub const fn large() -> Self {
        Group {
            modulus: 4_611_686_018_427_394_499,
            order: 2_305_843_009_213_697_249,
            generator: 4,
        }
    }

    pub fn identity(&self) -> GroupElement {
        1
    }

    pub fn mul(&self, a: GroupElement, b: GroupElement) -> GroupElement {
        ((a as u128 * b as u128) % self.modulus as u128) as u64
    }

    fn modpow(&self, base: u64, mut e: u64) -> u64 {
        let mut acc = 1u64;
        let mut b = base % self.modulus;
        while e > 0 {
            if e & 1 == 1 {
                acc = self.mul(acc, b);
            }
            b = self.mul(b, b);
            e >>= 1;
        }
        acc
    }

    pub fn pow(&self, base: GroupElement, e: Scalar) -> GroupElement {
        self.modpow(base, e % self.order)
    }

    pub fn g_pow(&self, e: Scalar) -> GroupElement {
        self.pow(self.generator, e)
    }

    pub fn is_member(&self, a: GroupElement) -> bool {
        a != 0 && a < self.modulus && self.modpow(a, self.order) == 1
    }

    pub fn scalar_add(&self, a: Scalar, b: Scalar) -> Scalar {
        ((a as u128 + b as u128) % self.order as u128) as u64
    }

    pub fn scalar_sub(&self, a: Scalar, b: Scalar) -> Scalar {
        self.scalar_add(a % self.order, self.order - b % self.order)
    }

    pub fn random_scalar<R: RngCore + ?Sized>(&self, rng: &mut R) -> Scalar {
        rng.next_u64() % self.order
    }

    /// Linear search for the exponent of `h`. Only practical for the small groups.
    pub fn dlog_brute(&self, h: GroupElement) -> Option<Scalar> {
        let mut acc = 1u64;
        for e in 0..self.order {
            if acc == h {
                return Some(e);
            }
            acc = self.mul(acc, self.generator);
        }
        None
    }
}

impl Default for Group {
    fn default() -> Self {
        Group::test()
    }
}

/// Non-negative amount in smallest units.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Amount(pub u64);

impl Amount {
    pub const ZERO: Amount = Amount(0);

    pub fn units(self) -> u64 {
        self.0
    }

    pub fn coins(c: u64) -> Amount {
        Amount(c * UNITS_PER_COIN)
    }

    pub fn checked_add(self, other: Amount) -> Result<Amount, PrimitiveError> {
        self.0
            .checked_add(other.0)
            .map(Amount)
            .ok_or(PrimitiveError::Overflow)
    }

    pub fn checked_sub(self, other: Amount) -> Result<Amount, PrimitiveError> {
        self.0
            .checked_sub(other.0)
            .map(Amount)
            .ok_or(PrimitiveError::Underflow(self.0, other.0))
    }
}

impl std::iter::Sum for Amount {
    fn sum<I: Iterator<Item = Amount>>(iter: I) -> Amount {
        Amount(iter.map(|a| a.0).sum())
    }
}

impl FromStr for Amount {
    type Err = PrimitiveError;

    /// Parses a decimal coin literal such as `"2.75"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PrimitiveError::AmountLiteral(s.to_string());
        let (whole, frac) = match s.split_once('.') {
            Some((w, f)) => (w, f),
            None => (s, ""),
        };
        if whole.is_empty() && frac.is_empty() || frac.len() > 8 {
            return Err(bad());
        }
        let whole: u64 = if whole.is_empty() {
            0
        } else {
            whole.parse().map_err(|_| bad())?
        };
        let mut frac_units = 0u64;
        if !frac.is_empty() {
            let digits: u64 = frac.parse().map_err(|_| bad())?;
            frac_units = digits * 10u64.pow(8 - frac.len() as u32);
        }
        whole
            .checked_mul(UNITS_PER_COIN)
            .and_then(|w| w.checked_add(frac_units))
            .map(Amount)
            .ok_or_else(bad)
    }
}

impl fmt::Display for Amount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}.{:08}",
            self.0 / UNITS_PER_COIN,
            self.0 % UNITS_PER_COIN
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u32);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "u{}", self.0)
    }
}

/// Channel identifier derived from the endpoints and a per-pair counter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChannelId(pub u64);

impl ChannelId {
    pub fn derive(u1: UserId, u2: UserId, nonce: u64) -> ChannelId {
        let mut data = Vec::with_capacity(16);
        data.extend_from_slice(&u1.0.to_be_bytes());
        data.extend_from_slice(&u2.0.to_be_bytes());
        data.extend_from_slice(&nonce.to_be_bytes());
        let d = hash(&data);
        ChannelId(u64::from_be_bytes(d.0[..8].try_into().unwrap()))
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// Globally ordered payment identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Txid(pub u128);

impl Txid {
    /// First 128 bits of `hash(sender ‖ nonce)`.
    pub fn derive(sender: UserId, nonce: u64) -> Txid {
        let mut data = Vec::with_capacity(12);
        data.extend_from_slice(&sender.0.to_be_bytes());
        data.extend_from_slice(&nonce.to_be_bytes());
        let d = hash(&data);
        Txid(u128::from_be_bytes(d.0[..16].try_into().unwrap()))
    }
}

impl fmt::Display for Txid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl Serialize for Txid {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Txid {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        u128::from_str_radix(&s, 16)
            .map(Txid)
            .map_err(serde::de::Error::custom)
    }
}

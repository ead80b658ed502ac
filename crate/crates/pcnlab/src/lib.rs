pub mod channel;
pub mod contracts;
pub mod harness;
pub mod ledger;
pub mod payment;
pub mod primitives;
pub mod rayo;
pub mod refmodel;
pub mod simnet;

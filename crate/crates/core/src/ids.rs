//! Small identifier types shared across the state machines.

use crate::encode::Canon;
use std::fmt;

/// A network participant. The default topology names users Alice, Bob and
/// Charlie in that order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UserId(pub u8);

pub const ALICE: UserId = UserId(0);
pub const BOB: UserId = UserId(1);
pub const CHARLIE: UserId = UserId(2);

impl UserId {
    pub fn name(self) -> &'static str {
        match self.0 {
            0 => "Alice",
            1 => "Bob",
            2 => "Charlie",
            _ => "User?",
        }
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A payment channel. AB is channel 0, BC is channel 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChannelId(pub u8);

pub const CHAN_AB: ChannelId = ChannelId(0);
pub const CHAN_BC: ChannelId = ChannelId(1);

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            0 => f.write_str("AB"),
            1 => f.write_str("BC"),
            n => write!(f, "Chan{n}"),
        }
    }
}

/// A payment. Doubles as the identifier of the payment's hash lock: the
/// hash/preimage pairing is a bijection fixed at payment creation, so one
/// opaque id serves for both sides of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PaymentId(pub u8);

impl fmt::Display for PaymentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// Block count on the abstract ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct BlockHeight(pub u32);

impl fmt::Display for BlockHeight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Coin amounts are small bounded naturals (scenario parameter) so state
/// spaces stay explorable.
pub type Coins = u32;

impl Canon for UserId {
    fn encode(&self, out: &mut Vec<u8>) {
        self.0.encode(out);
    }
}

impl Canon for ChannelId {
    fn encode(&self, out: &mut Vec<u8>) {
        self.0.encode(out);
    }
}

impl Canon for PaymentId {
    fn encode(&self, out: &mut Vec<u8>) {
        self.0.encode(out);
    }
}

impl Canon for BlockHeight {
    fn encode(&self, out: &mut Vec<u8>) {
        self.0.encode(out);
    }
}

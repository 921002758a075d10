//! Global state composition and scenario definitions.
//!
//! One `GlobalState` type serves every specification variant: the ledger and
//! clock, external balances, honesty, payment (HTLC-layer) bookkeeping, and
//! per-channel state that is either the protocol machine (two
//! PaymentChannelUser instances plus message queues) or the ideal channel.

use crate::encode::Canon;
use crate::ids::{BlockHeight, ChannelId, Coins, PaymentId, UserId};
use crate::ledger::{FlawFlags, LedgerState, TxId};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

/// Static description of one channel.
#[derive(Debug, Clone)]
pub struct ChannelDef {
    pub id: ChannelId,
    pub users: [UserId; 2],
    /// Only single-funded channels: the funder is always side 0.
    pub capacity: Coins,
}

impl ChannelDef {
    pub fn funder(&self) -> UserId {
        self.users[0]
    }

    pub fn side_of(&self, u: UserId) -> Option<usize> {
        self.users.iter().position(|&x| x == u)
    }

    pub fn other(&self, side: usize) -> UserId {
        self.users[1 - side]
    }
}

/// Static description of one payment.
///
/// Real payments have a modeled sender and recipient and a route of channel
/// hops. Mock payments stand in for a payment forwarded through the modeled
/// channel on behalf of unmodeled neighbors: the injector adds the outgoing
/// HTLC, the counterparty forwards onward invisibly and learns the preimage
/// only if the mock delivers it.
#[derive(Debug, Clone)]
pub struct PaymentDef {
    pub id: PaymentId,
    pub amount: Coins,
    pub sender: UserId,
    pub recipient: UserId,
    /// Channel hops from sender to recipient; expiries descend toward the
    /// recipient.
    pub route: Vec<ChannelId>,
    pub expiries: Vec<BlockHeight>,
    pub mock: bool,
}

impl PaymentDef {
    /// (hop sender, hop recipient) on the given route position, determined
    /// by walking the channel chain from the payment sender.
    pub fn hop_users(&self, scenario: &Scenario, hop: usize) -> (UserId, UserId) {
        let chan = &scenario.channels[self.route[hop].0 as usize];
        let hs = self.hop_sender(scenario, hop);
        let hr = chan.other(chan.side_of(hs).expect("hop sender on channel"));
        (hs, hr)
    }

    pub fn hop_sender(&self, scenario: &Scenario, hop: usize) -> UserId {
        let mut cur = self.sender;
        for h in 0..hop {
            let chan = &scenario.channels[self.route[h].0 as usize];
            cur = chan.other_user(cur);
        }
        cur
    }

    pub fn hop_of_channel(&self, chan: ChannelId) -> Option<usize> {
        self.route.iter().position(|&c| c == chan)
    }
}

impl ChannelDef {
    pub fn other_user(&self, u: UserId) -> UserId {
        if self.users[0] == u {
            self.users[1]
        } else {
            self.users[0]
        }
    }
}

/// Which clock variant a spec composition uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeVariant {
    Regular,
    Optimized,
}

/// Which channel machinery a spec composition uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelVariant {
    Protocol,
    Ideal,
}

/// Everything static about a run: topology, payments, bounds, composition.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub num_users: usize,
    pub channels: Vec<ChannelDef>,
    pub payments: Vec<PaymentDef>,
    pub initial_external: Vec<Coins>,
    /// Initial honesty assignments to enumerate (one initial state each).
    pub honesty_choices: Vec<Vec<bool>>,
    pub max_time: BlockHeight,
    pub max_htlcs_per_channel: usize,
    pub flaws: FlawFlags,
    pub time_variant: TimeVariant,
    pub channel_variant: ChannelVariant,
    pub mocks_enabled: bool,
    /// Users with an HTLCUser instance in the composition.
    pub htlc_users: Vec<UserId>,
    /// Mutation hook for the skip-rule equivalence check: jump straight to
    /// max_time, ignoring pending locks.
    pub broken_skip: bool,
}

impl Scenario {
    pub fn payment(&self, p: PaymentId) -> &PaymentDef {
        &self.payments[p.0 as usize]
    }

    pub fn channel(&self, c: ChannelId) -> &ChannelDef {
        &self.channels[c.0 as usize]
    }

    pub fn user_ids(&self) -> impl Iterator<Item = UserId> {
        (0..self.num_users as u8).map(UserId)
    }
}

/// Progress of the externally visible payment record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PayStatus {
    /// Mock payment not yet injected; invisible.
    Unborn,
    Pending,
    Processed,
    Aborted,
}

/// Invoice-layer progress of a real payment (requesting the invoice and
/// transferring the payment hash are end-to-end single messages).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum IntentSt {
    Init,
    InvoiceRequested,
    HashSent,
    HashReceived,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PaymentSt {
    pub status: PayStatus,
    pub intent: IntentSt,
    /// Users who know the preimage. The payment recipient is the unique
    /// initial knower; mock locks start unknown to every modeled user.
    pub known: BTreeSet<UserId>,
    pub lock_drawn: bool,
}

impl PaymentSt {
    pub fn new_real() -> Self {
        PaymentSt { status: PayStatus::Pending, intent: IntentSt::Init, known: BTreeSet::new(), lock_drawn: false }
    }

    pub fn new_mock() -> Self {
        PaymentSt { status: PayStatus::Unborn, intent: IntentSt::Init, known: BTreeSet::new(), lock_drawn: false }
    }
}

impl Canon for PayStatus {
    fn encode(&self, out: &mut Vec<u8>) {
        (*self as u8).encode(out);
    }
}

impl Canon for IntentSt {
    fn encode(&self, out: &mut Vec<u8>) {
        (*self as u8).encode(out);
    }
}

impl Canon for PaymentSt {
    fn encode(&self, out: &mut Vec<u8>) {
        self.status.encode(out);
        self.intent.encode(out);
        self.known.encode(out);
        self.lock_drawn.encode(out);
    }
}

/// HTLC record lifecycle. While the channel is closed on-chain, Committed,
/// Fulfilled and TimedOut mean the HTLC output awaits on-chain resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HtlcState {
    New,
    SentAdd,
    Committed,
    Fulfilled,
    Persisted,
    TimedOut,
    Aborted,
    PunishedOnChain,
    RedeemedOnChain,
}

impl HtlcState {
    pub fn terminal(self) -> bool {
        matches!(
            self,
            HtlcState::Persisted | HtlcState::Aborted | HtlcState::PunishedOnChain | HtlcState::RedeemedOnChain
        )
    }
}

impl Canon for HtlcState {
    fn encode(&self, out: &mut Vec<u8>) {
        (*self as u8).encode(out);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HtlcRec {
    pub state: HtlcState,
    /// Meaningful in SentAdd on the shared (ideal) record: the counterparty
    /// consumed the UpdateAddHTLC message.
    pub add_received: bool,
}

impl HtlcRec {
    /// Advances the lifecycle state. The reception flag only carries
    /// information while the HTLC is announced; past that it reads true, so
    /// states compare canonically.
    pub fn advance(&mut self, st: HtlcState) {
        self.state = st;
        if st != HtlcState::SentAdd {
            self.add_received = true;
        }
    }
}

impl Canon for HtlcRec {
    fn encode(&self, out: &mut Vec<u8>) {
        self.state.encode(out);
        self.add_received.encode(out);
    }
}

/// Channel message kinds. The first three belong to the HTLC layer and flow
/// in every variant; the rest are protocol-level and exist only in the
/// PaymentChannelUser machine.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Msg {
    UpdateAddHtlc { payment: PaymentId },
    HtlcPreimage { payment: PaymentId },
    HtlcFail { payment: PaymentId },
    OpenChannel,
    AcceptChannel,
    FirstCommitSig,
    FirstCommitReply,
    NextRevKey { number: u32 },
    CommitmentSigned { proposal: Proposal },
    RevokeAndAck { number: u32 },
    Shutdown,
}

impl Msg {
    pub fn htlc_layer(&self) -> bool {
        matches!(self, Msg::UpdateAddHtlc { .. } | Msg::HtlcPreimage { .. } | Msg::HtlcFail { .. })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Msg::UpdateAddHtlc { .. } => "UpdateAddHTLC",
            Msg::HtlcPreimage { .. } => "HTLCPreimage",
            Msg::HtlcFail { .. } => "HTLCFail",
            Msg::OpenChannel => "OpenChannel",
            Msg::AcceptChannel => "AcceptChannel",
            Msg::FirstCommitSig => "SignedFirstCommit",
            Msg::FirstCommitReply => "ReplyFirstCommit",
            Msg::NextRevKey { .. } => "NextRevocationKey",
            Msg::CommitmentSigned { .. } => "CommitmentSigned",
            Msg::RevokeAndAck { .. } => "RevokeAndAck",
            Msg::Shutdown => "Shutdown",
        }
    }
}

impl Canon for Msg {
    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            Msg::UpdateAddHtlc { payment } => {
                0u8.encode(out);
                payment.encode(out);
            }
            Msg::HtlcPreimage { payment } => {
                1u8.encode(out);
                payment.encode(out);
            }
            Msg::HtlcFail { payment } => {
                2u8.encode(out);
                payment.encode(out);
            }
            Msg::OpenChannel => 3u8.encode(out),
            Msg::AcceptChannel => 4u8.encode(out),
            Msg::FirstCommitSig => 5u8.encode(out),
            Msg::FirstCommitReply => 6u8.encode(out),
            Msg::NextRevKey { number } => {
                7u8.encode(out);
                number.encode(out);
            }
            Msg::CommitmentSigned { proposal } => {
                8u8.encode(out);
                proposal.encode(out);
            }
            Msg::RevokeAndAck { number } => {
                9u8.encode(out);
                number.encode(out);
            }
            Msg::Shutdown => 10u8.encode(out),
        }
    }
}

/// FIFO queue with monotone sequence numbers (the numbers exist to make the
/// in-order-delivery invariant checkable).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct MsgQueue {
    pub next_seq: u32,
    pub items: Vec<(u32, Msg)>,
}

impl MsgQueue {
    pub fn send(&mut self, m: Msg) {
        self.items.push((self.next_seq, m));
        self.next_seq += 1;
    }

    pub fn head(&self) -> Option<&Msg> {
        self.items.first().map(|(_, m)| m)
    }

    /// Pops the head and renumbers: sequence numbers witness in-order
    /// delivery within the queue but are not a history counter, so two runs
    /// arriving at the same pending messages yield the same state.
    pub fn consume(&mut self) -> Msg {
        let m = self.items.remove(0).1;
        for (i, item) in self.items.iter_mut().enumerate() {
            item.0 = i as u32;
        }
        self.next_seq = self.items.len() as u32;
        m
    }
}

impl Canon for MsgQueue {
    fn encode(&self, out: &mut Vec<u8>) {
        self.next_seq.encode(out);
        self.items.encode(out);
    }
}

/// A commitment's logical content: number, balance split by channel side,
/// and the set of HTLC outputs.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Proposal {
    pub number: u32,
    pub balances: [Coins; 2],
    pub htlcs: BTreeSet<PaymentId>,
}

impl Canon for Proposal {
    fn encode(&self, out: &mut Vec<u8>) {
        self.number.encode(out);
        self.balances[0].encode(out);
        self.balances[1].encode(out);
        self.htlcs.encode(out);
    }
}

/// An outdated own commitment a party still holds.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OldCommit {
    pub content: Proposal,
    /// Revocation secret transferred to the counterparty.
    pub revoked: bool,
}

impl Canon for OldCommit {
    fn encode(&self, out: &mut Vec<u8>) {
        self.content.encode(out);
        self.revoked.encode(out);
    }
}

/// PaymentChannelUser phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    PreOpen,
    OpenSent,
    AcceptSent,
    FundingCreated,
    FirstCommitExchanged,
    FundingPublished,
    Open,
    ShutdownInitiated,
    Closing,
    ClosedOnChain,
    Punishing,
    Done,
}

impl Phase {
    /// Phases in which the channel has been observed closed on-chain.
    pub fn closed(self) -> bool {
        matches!(self, Phase::ClosedOnChain | Phase::Punishing | Phase::Done)
    }

    /// Live off-chain operation (updates allowed, possibly winding down).
    pub fn operating(self) -> bool {
        matches!(self, Phase::Open | Phase::ShutdownInitiated | Phase::Closing)
    }
}

impl Canon for Phase {
    fn encode(&self, out: &mut Vec<u8>) {
        (*self as u8).encode(out);
    }
}

/// How an observed counterparty close was classified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CloseKind {
    Honest,
    Unpunishable,
    Dishonest,
}

impl Canon for CloseKind {
    fn encode(&self, out: &mut Vec<u8>) {
        (*self as u8).encode(out);
    }
}

/// One party's view of one channel (the PaymentChannelUser state).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChannelSide {
    pub phase: Phase,
    /// Own current commitment.
    pub number: u32,
    pub balances: [Coins; 2],
    pub commit_htlcs: BTreeSet<PaymentId>,
    pub signed_by_other: bool,
    pub first_commit_sig_sent: bool,
    pub olds: Vec<OldCommit>,
    /// Counterparty-signed next own commitment, applied at RevokeAndAck.
    pub pending_recv: Option<Proposal>,
    /// After revoking we owe the mirror CommitmentSigned for their side.
    pub owe_mirror: bool,
    /// This side opened the round in flight.
    pub i_initiated: bool,
    /// The last CommitmentSigned this side sent removed a timed-out HTLC.
    pub sent_refund_remove: bool,
    /// Highest counterparty commitment number we signed.
    pub signed_for_them: u32,
    /// Counterparty commitment numbers whose revocation secret we hold.
    pub their_secrets: BTreeSet<u32>,
    /// Own revoked commitment numbers (secret sent out).
    pub revoked_own: BTreeSet<u32>,
    pub next_rev_sent: bool,
    pub have_their_next_rev: bool,
    /// Own view of each HTLC on this channel.
    pub htlcs: BTreeMap<PaymentId, HtlcRec>,
    pub will_punish_later: bool,
    pub noted_close: Option<CloseKind>,
    pub htlc_noted: bool,
}

impl ChannelSide {
    pub fn new(capacity: Coins) -> Self {
        ChannelSide {
            phase: Phase::PreOpen,
            number: 0,
            balances: [capacity, 0],
            commit_htlcs: BTreeSet::new(),
            signed_by_other: false,
            first_commit_sig_sent: false,
            olds: Vec::new(),
            pending_recv: None,
            owe_mirror: false,
            i_initiated: false,
            sent_refund_remove: false,
            signed_for_them: 0,
            their_secrets: BTreeSet::new(),
            revoked_own: BTreeSet::new(),
            next_rev_sent: false,
            have_their_next_rev: false,
            htlcs: BTreeMap::new(),
            will_punish_later: false,
            noted_close: None,
            htlc_noted: false,
        }
    }

    pub fn current(&self) -> Proposal {
        Proposal { number: self.number, balances: self.balances, htlcs: self.commit_htlcs.clone() }
    }
}

impl Canon for ChannelSide {
    fn encode(&self, out: &mut Vec<u8>) {
        self.phase.encode(out);
        self.number.encode(out);
        self.balances[0].encode(out);
        self.balances[1].encode(out);
        self.commit_htlcs.encode(out);
        self.signed_by_other.encode(out);
        self.first_commit_sig_sent.encode(out);
        self.olds.encode(out);
        self.pending_recv.encode(out);
        self.owe_mirror.encode(out);
        self.i_initiated.encode(out);
        self.sent_refund_remove.encode(out);
        self.signed_for_them.encode(out);
        self.their_secrets.encode(out);
        self.revoked_own.encode(out);
        self.next_rev_sent.encode(out);
        self.have_their_next_rev.encode(out);
        self.htlcs.encode(out);
        self.will_punish_later.encode(out);
        match self.noted_close {
            None => 0u8.encode(out),
            Some(k) => {
                1u8.encode(out);
                k.encode(out);
            }
        }
        self.htlc_noted.encode(out);
    }
}

/// Protocol-variant channel state: two sides plus directed message queues
/// (index d: messages from side d to side 1-d).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProtoChannel {
    pub sides: [ChannelSide; 2],
    pub queues: [MsgQueue; 2],
    /// At most one commitment-update round in flight per channel.
    pub round_active: bool,
    pub funding_txid: Option<TxId>,
}

impl Canon for ProtoChannel {
    fn encode(&self, out: &mut Vec<u8>) {
        self.sides[0].encode(out);
        self.sides[1].encode(out);
        self.queues[0].encode(out);
        self.queues[1].encode(out);
        self.round_active.encode(out);
        match self.funding_txid {
            None => 0u8.encode(out),
            Some(id) => {
                1u8.encode(out);
                id.encode(out);
            }
        }
    }
}

/// Ideal-channel phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum IdealPhase {
    Unopened,
    Open,
    /// Closed on-chain; `cheater` records a close at an outdated state.
    Closing,
    Closed,
}

impl Canon for IdealPhase {
    fn encode(&self, out: &mut Vec<u8>) {
        (*self as u8).encode(out);
    }
}

/// Ideal-variant channel state: both parties' view at once, no protocol
/// messages (HTLC-layer messages still flow through the queues).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IdealChannelSt {
    pub phase: IdealPhase,
    pub balances: [Coins; 2],
    pub htlcs: BTreeMap<PaymentId, HtlcRec>,
    /// Settleable on-chain value per side after a close.
    pub pots: [Coins; 2],
    pub settled: [bool; 2],
    /// Set when the close happened at an outdated state (side = cheater).
    pub cheater: Option<u8>,
    pub will_punish_later: [bool; 2],
    pub queues: [MsgQueue; 2],
}

impl IdealChannelSt {
    pub fn new() -> Self {
        IdealChannelSt {
            phase: IdealPhase::Unopened,
            balances: [0, 0],
            htlcs: BTreeMap::new(),
            pots: [0, 0],
            settled: [false, false],
            cheater: None,
            will_punish_later: [false, false],
            queues: [MsgQueue::default(), MsgQueue::default()],
        }
    }
}

impl Canon for IdealChannelSt {
    fn encode(&self, out: &mut Vec<u8>) {
        self.phase.encode(out);
        self.balances[0].encode(out);
        self.balances[1].encode(out);
        self.htlcs.encode(out);
        self.pots[0].encode(out);
        self.pots[1].encode(out);
        self.settled[0].encode(out);
        self.settled[1].encode(out);
        match self.cheater {
            None => 0u8.encode(out),
            Some(s) => {
                1u8.encode(out);
                s.encode(out);
            }
        }
        self.will_punish_later[0].encode(out);
        self.will_punish_later[1].encode(out);
        self.queues[0].encode(out);
        self.queues[1].encode(out);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ChannelSt {
    Proto(ProtoChannel),
    Ideal(IdealChannelSt),
}

impl ChannelSt {
    pub fn proto(&self) -> &ProtoChannel {
        match self {
            ChannelSt::Proto(p) => p,
            ChannelSt::Ideal(_) => panic!("protocol channel expected"),
        }
    }

    pub fn proto_mut(&mut self) -> &mut ProtoChannel {
        match self {
            ChannelSt::Proto(p) => p,
            ChannelSt::Ideal(_) => panic!("protocol channel expected"),
        }
    }

    pub fn ideal(&self) -> &IdealChannelSt {
        match self {
            ChannelSt::Ideal(i) => i,
            ChannelSt::Proto(_) => panic!("ideal channel expected"),
        }
    }

    pub fn ideal_mut(&mut self) -> &mut IdealChannelSt {
        match self {
            ChannelSt::Ideal(i) => i,
            ChannelSt::Proto(_) => panic!("ideal channel expected"),
        }
    }

    pub fn queues(&self) -> &[MsgQueue; 2] {
        match self {
            ChannelSt::Proto(p) => &p.queues,
            ChannelSt::Ideal(i) => &i.queues,
        }
    }

    pub fn queues_mut(&mut self) -> &mut [MsgQueue; 2] {
        match self {
            ChannelSt::Proto(p) => &mut p.queues,
            ChannelSt::Ideal(i) => &mut i.queues,
        }
    }
}

impl Canon for ChannelSt {
    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            ChannelSt::Proto(p) => {
                0u8.encode(out);
                p.encode(out);
            }
            ChannelSt::Ideal(i) => {
                1u8.encode(out);
                i.encode(out);
            }
        }
    }
}

/// The full state of a composed specification. The ledger sits behind an
/// Arc: most transitions leave it untouched, so clones share it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GlobalState {
    pub ledger: std::sync::Arc<LedgerState>,
    pub external: Vec<Coins>,
    pub honest: Vec<bool>,
    pub pay: Vec<PaymentSt>,
    /// Per-user mock-injection budget consumed.
    pub mock_used: Vec<bool>,
    pub channels: Vec<ChannelSt>,
}

impl Canon for GlobalState {
    fn encode(&self, out: &mut Vec<u8>) {
        self.ledger.encode(out);
        self.external.encode(out);
        self.honest.encode(out);
        self.pay.encode(out);
        self.mock_used.encode(out);
        self.channels.encode(out);
    }
}

impl GlobalState {
    pub fn initial(scenario: &Scenario, honesty: &[bool]) -> GlobalState {
        GlobalState {
            ledger: std::sync::Arc::new(LedgerState::default()),
            external: scenario.initial_external.clone(),
            honest: honesty.to_vec(),
            pay: scenario
                .payments
                .iter()
                .map(|p| if p.mock { PaymentSt::new_mock() } else { PaymentSt::new_real() })
                .collect(),
            mock_used: vec![false; scenario.num_users],
            channels: scenario
                .channels
                .iter()
                .map(|c| match scenario.channel_variant {
                    ChannelVariant::Protocol => ChannelSt::Proto(ProtoChannel {
                        sides: [ChannelSide::new(c.capacity), ChannelSide::new(c.capacity)],
                        queues: [MsgQueue::default(), MsgQueue::default()],
                        round_active: false,
                        funding_txid: None,
                    }),
                    ChannelVariant::Ideal => ChannelSt::Ideal(IdealChannelSt::new()),
                })
                .collect(),
        }
    }

    pub fn now(&self) -> BlockHeight {
        self.ledger.time
    }

    /// The externally visible pending-payment set.
    pub fn pending_payments(&self) -> BTreeSet<PaymentId> {
        self.pay
            .iter()
            .enumerate()
            .filter(|(_, p)| p.status == PayStatus::Pending)
            .map(|(i, _)| PaymentId(i as u8))
            .collect()
    }

    /// Flat variable rendering used for trace diffs and locality checks.
    /// Mock payment records are namespaced under their injector.
    pub fn vars(&self, scenario: &Scenario) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("time".into(), format!("{}", self.ledger.time));
        for u in scenario.user_ids() {
            m.insert(format!("external[{u}]"), format!("{}", self.external[u.0 as usize]));
            m.insert(format!("honest[{u}]"), format!("{}", self.honest[u.0 as usize]));
            let knows: Vec<String> = self
                .pay
                .iter()
                .enumerate()
                .filter(|(_, p)| p.known.contains(&u))
                .map(|(i, _)| format!("{}", PaymentId(i as u8)))
                .collect();
            m.insert(format!("user[{u}].knows"), format!("{{{}}}", knows.join(",")));
        }
        for (i, p) in self.pay.iter().enumerate() {
            let def = &scenario.payments[i];
            if def.mock {
                // Mock bookkeeping is split so that each mock action's delta
                // stays within the target user's namespace.
                m.insert(
                    format!("user[{}].fwd[{}]", def.sender, def.id),
                    format!("offered={}", p.status != PayStatus::Unborn),
                );
                let resolved = match p.status {
                    PayStatus::Unborn | PayStatus::Pending => "Pending",
                    PayStatus::Processed => "Processed",
                    PayStatus::Aborted => "Aborted",
                };
                m.insert(format!("user[{}].fwdin[{}]", def.recipient, def.id), resolved.into());
            } else {
                m.insert(format!("payments[{}]", def.id), format!("{:?}/{:?}", p.status, p.intent));
            }
        }
        for (ci, ch) in self.channels.iter().enumerate() {
            let cid = ChannelId(ci as u8);
            let def = &scenario.channels[ci];
            match ch {
                ChannelSt::Proto(pc) => {
                    for (si, side) in pc.sides.iter().enumerate() {
                        let u = def.users[si];
                        let pre = format!("chan[{cid}][{u}]");
                        m.insert(format!("{pre}.phase"), format!("{:?}", side.phase));
                        m.insert(
                            format!("{pre}.commit"),
                            format!(
                                "n={} bal=({},{}) htlcs={:?} signed={}",
                                side.number, side.balances[0], side.balances[1],
                                side.commit_htlcs.iter().map(|p| p.0).collect::<Vec<_>>(),
                                side.signed_by_other
                            ),
                        );
                        m.insert(
                            format!("{pre}.olds"),
                            format!(
                                "{:?}",
                                side.olds
                                    .iter()
                                    .map(|o| (o.content.number, o.revoked))
                                    .collect::<Vec<_>>()
                            ),
                        );
                        m.insert(format!("{pre}.secrets"), format!("{:?}", side.their_secrets));
                        if !side.htlcs.is_empty() {
                            m.insert(
                                format!("{pre}.htlcs"),
                                format!(
                                    "{:?}",
                                    side.htlcs
                                        .iter()
                                        .map(|(p, r)| (p.0, r.state))
                                        .collect::<Vec<_>>()
                                ),
                            );
                        }
                        let mut misc = String::new();
                        write!(
                            misc,
                            "pend={} mirror={} wpl={} noted={:?} hnoted={}",
                            side.pending_recv.is_some(),
                            side.owe_mirror,
                            side.will_punish_later,
                            side.noted_close,
                            side.htlc_noted
                        )
                        .unwrap();
                        m.insert(format!("{pre}.flags"), misc);
                    }
                    for d in 0..2 {
                        let from = def.users[d];
                        let msgs: Vec<String> = pc.queues[d]
                            .items
                            .iter()
                            .map(|(s, msg)| format!("{s}:{}", msg.kind_name()))
                            .collect();
                        m.insert(format!("queue[{cid}][{from}->]"), format!("[{}]", msgs.join(",")));
                    }
                    m.insert(format!("chan[{cid}].round"), format!("{}", pc.round_active));
                }
                ChannelSt::Ideal(ic) => {
                    m.insert(format!("chan[{cid}].phase"), format!("{:?}", ic.phase));
                    m.insert(
                        format!("chan[{cid}].balances"),
                        format!("({},{})", ic.balances[0], ic.balances[1]),
                    );
                    m.insert(
                        format!("chan[{cid}].pots"),
                        format!(
                            "({},{}) settled=({},{}) cheater={:?}",
                            ic.pots[0], ic.pots[1], ic.settled[0], ic.settled[1], ic.cheater
                        ),
                    );
                    if !ic.htlcs.is_empty() {
                        m.insert(
                            format!("chan[{cid}].htlcs"),
                            format!(
                                "{:?}",
                                ic.htlcs.iter().map(|(p, r)| (p.0, r.state)).collect::<Vec<_>>()
                            ),
                        );
                    }
                    for d in 0..2 {
                        let from = def.users[d];
                        let msgs: Vec<String> = ic.queues[d]
                            .items
                            .iter()
                            .map(|(s, msg)| format!("{s}:{}", msg.kind_name()))
                            .collect();
                        m.insert(format!("queue[{cid}][{from}->]"), format!("[{}]", msgs.join(",")));
                    }
                }
            }
        }
        if !self.ledger.published.is_empty() {
            for (i, tx) in self.ledger.published.iter().enumerate() {
                m.insert(format!("ledger[{i:02}]"), tx.canonical_text());
            }
            m.insert(
                "ledger.withdrawn".into(),
                format!("{:?}", self.ledger.withdrawn.iter().map(|(t, i)| format!("{t}#{i}")).collect::<Vec<_>>()),
            );
        }
        m
    }
}

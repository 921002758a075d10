//! Specification compositions (I) through (X): which module instances make
//! up each Next action, default scenarios, the explorable model over
//! `GlobalState`, and the invariant and terminal-state predicates.

use crate::checker::{Invariant, Model, Step};
use crate::derive::derive_all;
use crate::ids::{BlockHeight, ChannelId, Coins, PaymentId, UserId, ALICE, BOB, CHARLIE, CHAN_AB, CHAN_BC};
use crate::ledger::{FlawFlags, SpendingCondition};
use crate::state::{
    ChannelDef, ChannelSt, ChannelVariant, GlobalState, HtlcState, PayStatus, PaymentDef,
    Scenario, TimeVariant,
};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SpecId {
    I,
    II,
    III,
    IV,
    V,
    VI,
    VII,
    VIII,
    IX,
    X,
}

impl SpecId {
    pub const ALL: [SpecId; 10] = [
        SpecId::I,
        SpecId::II,
        SpecId::III,
        SpecId::IV,
        SpecId::V,
        SpecId::VI,
        SpecId::VII,
        SpecId::VIII,
        SpecId::IX,
        SpecId::X,
    ];

    pub fn num_users(self) -> usize {
        match self {
            SpecId::I | SpecId::II | SpecId::VII | SpecId::VIII | SpecId::IX => 3,
            SpecId::III | SpecId::IV | SpecId::V | SpecId::VI => 2,
            SpecId::X => 2,
        }
    }

    pub fn time_variant(self) -> TimeVariant {
        match self {
            SpecId::IV | SpecId::V | SpecId::IX => TimeVariant::Optimized,
            _ => TimeVariant::Regular,
        }
    }

    pub fn channel_variant(self) -> ChannelVariant {
        match self {
            SpecId::V | SpecId::VI | SpecId::VII | SpecId::VIII | SpecId::IX => ChannelVariant::Ideal,
            _ => ChannelVariant::Protocol,
        }
    }

    pub fn mock_instances(self) -> usize {
        match self {
            SpecId::II | SpecId::VII => 3,
            SpecId::III | SpecId::IV | SpecId::V | SpecId::VI => 1,
            _ => 0,
        }
    }

    /// The regular/optimized-time partner for projection comparison.
    pub fn time_partner(self) -> Option<SpecId> {
        match self {
            SpecId::III => Some(SpecId::IV),
            SpecId::IV => Some(SpecId::III),
            SpecId::V => Some(SpecId::VI),
            SpecId::VI => Some(SpecId::V),
            SpecId::VIII => Some(SpecId::IX),
            SpecId::IX => Some(SpecId::VIII),
            _ => None,
        }
    }
}

impl fmt::Display for SpecId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SpecId::I => "I",
            SpecId::II => "II",
            SpecId::III => "III",
            SpecId::IV => "IV",
            SpecId::V => "V",
            SpecId::VI => "VI",
            SpecId::VII => "VII",
            SpecId::VIII => "VIII",
            SpecId::IX => "IX",
            SpecId::X => "X",
        };
        f.write_str(s)
    }
}

impl FromStr for SpecId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_uppercase().as_str() {
            "I" | "1" => Ok(SpecId::I),
            "II" | "2" => Ok(SpecId::II),
            "III" | "3" => Ok(SpecId::III),
            "IV" | "4" => Ok(SpecId::IV),
            "V" | "5" => Ok(SpecId::V),
            "VI" | "6" => Ok(SpecId::VI),
            "VII" | "7" => Ok(SpecId::VII),
            "VIII" | "8" => Ok(SpecId::VIII),
            "IX" | "9" => Ok(SpecId::IX),
            "X" | "10" => Ok(SpecId::X),
            other => Err(format!("unknown spec id '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SpecConfig {
    pub id: Option<SpecId>,
    pub flaws: FlawFlags,
    pub max_time: Option<u32>,
    pub max_amount: Option<Coins>,
    pub max_htlcs: Option<usize>,
    pub users: Option<usize>,
    /// Fix the honesty assignment instead of the default enumeration.
    pub honesty: Option<Vec<Vec<bool>>>,
    /// Mutation hook: break the optimized clock's skip rule (jump straight
    /// to max_time, skipping expiries).
    pub broken_skip: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Builds the scenario for a composed specification (I)..(IX).
pub fn build_scenario(cfg: &SpecConfig) -> Result<Scenario, ConfigError> {
    let id = cfg.id.ok_or_else(|| ConfigError("--spec is required".into()))?;
    if id == SpecId::X {
        return Err(ConfigError("spec X is the idealized network; it has no channel scenario".into()));
    }
    if let Some(u) = cfg.users {
        if u != id.num_users() {
            return Err(ConfigError(format!(
                "spec {id} fixes {} users (got --users {u})",
                id.num_users()
            )));
        }
    }
    let amount = cfg.max_amount.unwrap_or(1);
    if amount == 0 {
        return Err(ConfigError("--max-amount must be at least 1".into()));
    }
    let three_users = id.num_users() == 3;

    let channels = if three_users {
        vec![
            ChannelDef { id: CHAN_AB, users: [ALICE, BOB], capacity: 3 },
            ChannelDef { id: CHAN_BC, users: [BOB, CHARLIE], capacity: 3 },
        ]
    } else {
        vec![ChannelDef { id: CHAN_AB, users: [ALICE, BOB], capacity: 3 }]
    };
    if amount > channels[0].capacity {
        return Err(ConfigError("payment amount exceeds channel capacity".into()));
    }

    // Expiries descend toward the recipient (two blocks per hop); the time
    // bound leaves room to act after the last expiry.
    let (payments, default_honesty): (Vec<PaymentDef>, Vec<Vec<bool>>) = if three_users {
        let payments = vec![PaymentDef {
            id: PaymentId(0),
            amount,
            sender: ALICE,
            recipient: CHARLIE,
            route: vec![CHAN_AB, CHAN_BC],
            expiries: vec![BlockHeight(4), BlockHeight(2)],
            mock: false,
        }];
        (payments, vec![vec![true, true, true]])
    } else {
        // One forwarded (mock) payment at Alice whose downstream
        // continuation is unmodeled; Bob is the forwarder toward it. This is
        // the single-channel desk scenario: big enough for both known-flaw
        // replays, small enough for exhaustive protocol-level exploration.
        let payments = vec![PaymentDef {
            id: PaymentId(0),
            amount,
            sender: ALICE,
            recipient: BOB,
            route: vec![CHAN_AB],
            expiries: vec![BlockHeight(2)],
            mock: true,
        }];
        let honesty = vec![vec![true, true], vec![true, false], vec![false, true]];
        (payments, honesty)
    };

    let max_expiry = payments.iter().flat_map(|p| p.expiries.iter()).map(|e| e.0).max().unwrap_or(0);
    let recipient_expiry = payments
        .iter()
        .filter(|p| !p.mock)
        .map(|p| p.expiries.last().unwrap().0)
        .max()
        .unwrap_or(max_expiry);
    let default_max_time = if three_users { recipient_expiry + 3 } else { max_expiry + 3 };

    let initial_external = if three_users { vec![3, 3, 0] } else { vec![3, 0] };

    Ok(Scenario {
        num_users: id.num_users(),
        channels,
        payments,
        initial_external,
        honesty_choices: cfg.honesty.clone().unwrap_or(default_honesty),
        max_time: BlockHeight(cfg.max_time.unwrap_or(default_max_time)),
        max_htlcs_per_channel: cfg.max_htlcs.unwrap_or(2),
        flaws: cfg.flaws,
        time_variant: id.time_variant(),
        channel_variant: id.channel_variant(),
        mocks_enabled: id.mock_instances() > 0,
        htlc_users: (0..id.num_users() as u8).map(UserId).collect(),
        broken_skip: cfg.broken_skip,
    })
}

/// The ideal-machine twin of a protocol scenario: same topology, payments
/// and bounds, with the channel machinery abstracted and flaws dropped
/// (the flaws live in the ledger layer, which the ideal machine does not
/// touch).
pub fn ideal_twin(scenario: &Scenario) -> Scenario {
    let mut twin = scenario.clone();
    twin.channel_variant = ChannelVariant::Ideal;
    twin.flaws = FlawFlags::default();
    twin.broken_skip = false;
    twin
}

/// The explorable model of a composed specification.
pub struct GlobalModel {
    pub scenario: Arc<Scenario>,
}

impl GlobalModel {
    pub fn new(scenario: Scenario) -> Self {
        GlobalModel { scenario: Arc::new(scenario) }
    }
}

impl Model for GlobalModel {
    type State = GlobalState;

    fn init_states(&self) -> Vec<GlobalState> {
        self.scenario
            .honesty_choices
            .iter()
            .map(|h| GlobalState::initial(&self.scenario, h))
            .collect()
    }

    fn successors(&self, s: &GlobalState) -> Vec<Step<GlobalState>> {
        let scenario = &self.scenario;
        let mut out = Vec::new();
        crate::channel::time_actions(scenario, s, &mut out);
        for &u in &scenario.htlc_users {
            crate::htlc::htlc_user_actions(scenario, s, u, &mut out);
        }
        for c in &scenario.channels {
            match scenario.channel_variant {
                ChannelVariant::Protocol => {
                    for side in 0..2 {
                        crate::channel::channel_user_actions(scenario, s, c.id, c.users[side], &mut out);
                    }
                }
                ChannelVariant::Ideal => {
                    crate::ideal_channel::ideal_channel_actions(scenario, s, c.id, &mut out);
                }
            }
        }
        crate::htlc::mock_actions(scenario, s, &mut out);
        out
    }

    fn state_vars(&self, s: &GlobalState) -> BTreeMap<String, String> {
        s.vars(&self.scenario)
    }
}

pub const HTLC_USER_ACTIONS: [&str; 9] = [
    "RequestInvoice",
    "GenerateAndSendPaymentHash",
    "ReceivePaymentHash",
    "AddAndSendOutgoingHTLC",
    "ReceiveUpdateAddHTLC",
    "SendHTLCPreimage",
    "ReceiveHTLCPreimage",
    "SendHTLCFail",
    "ReceiveHTLCFail",
];

pub const CHANNEL_USER_ACTIONS: [&str; 34] = [
    "SendOpenChannel",
    "SendAcceptChannel",
    "CreateFundingTransaction",
    "SendSignedFirstCommitTransaction",
    "ReplyWithFirstCommitTransaction",
    "ReceiveCommitTransaction",
    "PublishFundingTransaction",
    "NoteThatFundingTransactionPublished",
    "SendNewRevocationKey",
    "ReceiveNewRevocationKey",
    "SendSignedCommitment",
    "ReceiveSignedCommitment",
    "ReceiveSignedCommitmentDuringClosing",
    "RevokeAndAck",
    "ReceiveRevocationKey",
    "ReceiveRevocationKeyForTimedoutHTLC",
    "CloseChannel",
    "Cheat",
    "Punish",
    "NoteThatOtherPartyClosedHonestly",
    "NoteThatOtherPartyClosedButUnpunishable",
    "NoteThatOtherPartyClosedDishonestly",
    "NoteCommittedAndUncommittedAndPersistedHTLCs",
    "NotePunishedHTLCs",
    "UpdatePunishedHTLCs",
    "NoteAbortedHTLCs",
    "RedeemHTLCAfterClose",
    "NoteThatHTLCFulfilledOnChain",
    "NoteThatHTLCTimedOutOnChain",
    "WillPunishLater",
    "InitiateShutdown",
    "ReceiveInitiateShutdown",
    "IgnoreMessageDuringClosing",
    "NoteThatChannelClosedAndAllHTLCsRedeemed",
];

pub const IDEAL_CHANNEL_ACTIONS: [&str; 6] = [
    "OpenPaymentChannel",
    "UpdatePaymentChannel",
    "CommitHTLCsOnChain",
    "FulfillHTLCsOnChain",
    "WillPunishLater",
    "ClosePaymentChannel",
];

pub const MOCK_ACTIONS: [&str; 2] = ["AddNewForwardedPayment", "ReceivePreimageForIncomingHTLC"];

pub const NETWORK_ACTIONS: [&str; 5] = [
    "DepositBalance",
    "ProcessPayment",
    "AbortPayment",
    "PunishCheating",
    "WithdrawBalance",
];

/// The action-name multiset of a composition: how many module instances
/// contribute each sub-action name.
pub fn action_catalog(id: SpecId) -> BTreeMap<&'static str, usize> {
    let mut m: BTreeMap<&'static str, usize> = BTreeMap::new();
    let mut add = |name: &'static str, n: usize| *m.entry(name).or_insert(0) += n;
    if id == SpecId::X {
        for a in NETWORK_ACTIONS {
            add(a, 1);
        }
        return m;
    }
    match id.time_variant() {
        TimeVariant::Regular => add("AdvanceLedgerTime", 1),
        TimeVariant::Optimized => add("OptimizedAdvanceLedgerTime", 1),
    }
    for a in HTLC_USER_ACTIONS {
        add(a, id.num_users());
    }
    let chans = if id.num_users() == 3 { 2 } else { 1 };
    match id.channel_variant() {
        ChannelVariant::Protocol => {
            for a in CHANNEL_USER_ACTIONS {
                add(a, 2 * chans);
            }
        }
        ChannelVariant::Ideal => {
            for a in IDEAL_CHANNEL_ACTIONS {
                add(a, chans);
            }
        }
    }
    for a in MOCK_ACTIONS {
        if id.mock_instances() > 0 {
            add(a, id.mock_instances());
        }
    }
    m
}

/// Total channel value bound to a derived channel view (off-chain balances,
/// settleable pots and live HTLC amounts).
fn derived_channel_value(scenario: &Scenario, dc: &crate::derive::DerivedChannel, chan: ChannelId) -> i64 {
    let mut v = dc.balances[0] as i64 + dc.balances[1] as i64 + dc.pots[0] as i64 + dc.pots[1] as i64;
    for (&p, rec) in &dc.htlcs {
        if matches!(rec.state, HtlcState::Committed | HtlcState::Fulfilled | HtlcState::TimedOut) {
            let def = scenario.payment(p);
            if def.hop_of_channel(chan).is_some() {
                v += def.amount as i64;
            }
        }
    }
    v
}

/// The invariant suite for composed specifications.
pub fn protocol_invariants(scenario: Arc<Scenario>) -> Vec<Invariant<GlobalState>> {
    let mut out = Vec::new();

    let sc = scenario.clone();
    out.push(Invariant::new("conservation", move |gs: &GlobalState| {
        let initial: i64 = sc.initial_external.iter().map(|&e| e as i64).sum();
        let mut total: i64 = gs.external.iter().map(|&e| e as i64).sum();
        total += gs.ledger.utxo_sum() as i64;
        for (ci, ch) in gs.channels.iter().enumerate() {
            if let ChannelSt::Ideal(_) = ch {
                let dc = crate::derive::derive_channel(&sc, gs, ChannelId(ci as u8));
                total += derived_channel_value(&sc, &dc, ChannelId(ci as u8));
            }
        }
        total == initial
    }));

    out.push(Invariant::new("utxo-discipline", |gs: &GlobalState| {
        let mut seen = std::collections::BTreeSet::new();
        for tx in &gs.ledger.published {
            for input in &tx.inputs {
                if !seen.insert((input.prev_tx, input.output_index)) {
                    return false;
                }
            }
        }
        true
    }));

    if !scenario.flaws.conflate_disjuncts {
        out.push(Invariant::new("locktime-soundness", |gs: &GlobalState| {
            for tx in &gs.ledger.published {
                for input in &tx.inputs {
                    let Some(out_) = gs.ledger.output((input.prev_tx, input.output_index)) else {
                        continue;
                    };
                    if let Some(SpendingCondition::SigWithAbsoluteLock(_, expiry)) =
                        out_.conditions.get(input.condition_index as usize)
                    {
                        if tx.locktime < *expiry {
                            return false;
                        }
                    }
                }
            }
            true
        }));
    }

    let sc = scenario.clone();
    out.push(Invariant::new("preimage-origin", move |gs: &GlobalState| {
        for (i, ps) in gs.pay.iter().enumerate() {
            let def = &sc.payments[i];
            if !ps.known.is_empty() {
                if !ps.lock_drawn {
                    return false;
                }
                // The hop recipient (payment recipient or mock forwarder) is
                // the origin of the preimage among modeled users.
                if !ps.known.contains(&def.recipient) {
                    return false;
                }
            }
        }
        // Published witnesses carry only preimages their publisher knew.
        for (tx, publisher) in gs.ledger.published.iter().zip(&gs.ledger.publishers) {
            for input in &tx.inputs {
                if let Some(p) = input.witness.preimage {
                    if !gs.pay[p.0 as usize].known.contains(publisher) {
                        return false;
                    }
                }
            }
        }
        true
    }));

    out.push(Invariant::new("fifo-order", |gs: &GlobalState| {
        gs.channels.iter().all(|ch| {
            ch.queues().iter().all(|q| {
                q.items.windows(2).all(|w| w[0].0 < w[1].0)
                    && q.items.last().is_none_or(|(s, _)| *s < q.next_seq)
            })
        })
    }));

    out.push(Invariant::new("revocation-key-safety", |gs: &GlobalState| {
        for ch in &gs.channels {
            let ChannelSt::Proto(pc) = ch else { continue };
            for side in 0..2 {
                let me = &pc.sides[side];
                let other = &pc.sides[1 - side];
                if gs.honest[0] || gs.honest[1] {
                    // Nobody may hold the secret of a current commitment.
                    if other.their_secrets.contains(&me.number) || me.revoked_own.contains(&me.number) {
                        return false;
                    }
                }
                // Every revoked commitment's secret is held by the
                // counterparty or still in flight toward them.
                for &n in &me.revoked_own {
                    let held = other.their_secrets.contains(&n);
                    let in_flight = pc.queues[side]
                        .items
                        .iter()
                        .any(|(_, m)| matches!(m, crate::state::Msg::RevokeAndAck { number } if *number == n));
                    if !held && !in_flight {
                        return false;
                    }
                }
            }
        }
        true
    }));

    let sc = scenario.clone();
    out.push(Invariant::new("timelock-chain-descent", move |gs: &GlobalState| {
        for def in &sc.payments {
            let in_flight = def.route.iter().any(|&c| {
                crate::htlc::rec_view(gs, &sc, c, def.hop_users(&sc, def.hop_of_channel(c).unwrap()).0, def.id)
                    .is_some_and(|r| !r.state.terminal())
            });
            if in_flight {
                for w in def.expiries.windows(2) {
                    if w[0] <= w[1] {
                        return false;
                    }
                }
            }
        }
        true
    }));

    out
}

/// Per-user correct balance from processed payments, and the honest-safety
/// terminal predicate built on it.
pub fn correct_balances(scenario: &Scenario, gs: &GlobalState) -> Vec<i64> {
    let mut correct: Vec<i64> =
        scenario.initial_external.iter().map(|&e| e as i64).collect();
    for (i, ps) in gs.pay.iter().enumerate() {
        if ps.status == PayStatus::Processed {
            let def = &scenario.payments[i];
            correct[def.sender.0 as usize] -= def.amount as i64;
            correct[def.recipient.0 as usize] += def.amount as i64;
        }
    }
    correct
}

pub fn honest_safety_holds(scenario: &Scenario, gs: &GlobalState) -> bool {
    let correct = correct_balances(scenario, gs);
    scenario
        .user_ids()
        .all(|u| !gs.honest[u.0 as usize] || gs.external[u.0 as usize] as i64 >= correct[u.0 as usize])
}

/// Canonical projection that drops the clock, for comparing regular- and
/// optimized-time variants.
pub fn project_without_time(gs: &GlobalState) -> Vec<u8> {
    use crate::encode::Canon;
    let mut copy = gs.clone();
    std::sync::Arc::make_mut(&mut copy.ledger).time = BlockHeight(0);
    copy.canon_bytes()
}

/// Enabled non-time action instances (name, params), for the
/// skip-equivalence oracle.
pub fn enabled_non_time(model: &GlobalModel, gs: &GlobalState) -> Vec<(String, String)> {
    model
        .successors(gs)
        .into_iter()
        .filter(|s| !model.is_time_action(s.action))
        .map(|s| (s.action.to_string(), s.params))
        .collect()
}

pub fn derived_views(scenario: &Scenario, gs: &GlobalState) -> Vec<crate::derive::DerivedChannel> {
    derive_all(scenario, gs)
}

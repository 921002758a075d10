//! Derived channel views.
//!
//! The clock optimization, the honest-deadline time guard and the refinement
//! mappings all need one consistent picture of a channel regardless of
//! whether it runs the protocol machine or the ideal machine. For the ideal
//! machine the view is the stored state; for the protocol machine it is
//! derived: the off-chain view is the commitment content of the side that
//! lags behind (rounds complete when the lagging side catches up), and the
//! on-chain view is read off the ledger's transaction graph.

use crate::ids::{BlockHeight, ChannelId, Coins, PaymentId, UserId};
use crate::ledger::{KeyPurpose, SpendingCondition, Transaction, TxId};
use crate::state::{
    ChannelSt, GlobalState, HtlcRec, HtlcState, IdealPhase, Msg, PayStatus, Phase, ProtoChannel,
    Scenario,
};
use crate::txbuild::classify_commitment_tx;
use std::collections::{BTreeMap, BTreeSet};

/// One channel reduced to ideal-channel granularity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DerivedChannel {
    pub phase: IdealPhase,
    pub balances: [Coins; 2],
    pub htlcs: BTreeMap<PaymentId, HtlcRec>,
    pub pots: [Coins; 2],
    pub cheater: Option<u8>,
    pub settled: [bool; 2],
    pub wpl: [bool; 2],
    /// HTLC-layer messages per direction, sequence numbers dropped.
    pub queue_msgs: [Vec<Msg>; 2],
    /// Some honest-side punishment work remains (used by the time guard).
    pub punish_pending: bool,
}

/// The published commitment closing a protocol channel, if any.
pub struct PublishedClose<'a> {
    pub tx: &'a Transaction,
    pub side: usize,
    pub number: u32,
    pub htlcs: Vec<PaymentId>,
}

pub fn published_close<'a>(
    scenario: &Scenario,
    gs: &'a GlobalState,
    chan: ChannelId,
    pc: &ProtoChannel,
) -> Option<PublishedClose<'a>> {
    let funding = pc.funding_txid?;
    let tx = gs
        .ledger
        .published
        .iter()
        .find(|t| t.inputs.iter().any(|i| i.prev_tx == funding))?;
    let (side, number, htlcs) = classify_commitment_tx(scenario, chan, tx)?;
    Some(PublishedClose { tx, side, number, htlcs })
}

/// All published transactions descending from the channel's funding
/// transaction (the channel's on-chain footprint).
pub fn channel_tx_ids(gs: &GlobalState, funding: TxId) -> BTreeSet<TxId> {
    let mut set: BTreeSet<TxId> = [funding].into_iter().collect();
    loop {
        let mut grew = false;
        for tx in &gs.ledger.published {
            if set.contains(&tx.id) {
                continue;
            }
            if tx.inputs.iter().any(|i| set.contains(&i.prev_tx)) {
                set.insert(tx.id);
                grew = true;
            }
        }
        if !grew {
            return set;
        }
    }
}

fn htlc_payment_of_output(out: &crate::ledger::TxOutput) -> Option<PaymentId> {
    out.conditions.iter().find_map(|c| match c {
        SpendingCondition::SigsWithPreimage(_, p) => Some(*p),
        _ => None,
    })
}

/// Who an unspent plain output currently belongs to: the signature owner,
/// unless a revocation condition is live against the output (the publisher
/// revoked that commitment, so the counterparty is entitled to sweep it).
fn attribute_plain_output(
    scenario: &Scenario,
    chan: ChannelId,
    pc: &ProtoChannel,
    out: &crate::ledger::TxOutput,
) -> Option<UserId> {
    let def = scenario.channel(chan);
    let mut owner = None;
    let mut contested_by: Option<UserId> = None;
    for cond in &out.conditions {
        match cond {
            SpendingCondition::SingleSig(k) => owner = Some(k.owner),
            SpendingCondition::RevocationSig(k) => {
                if let KeyPurpose::Revocation(c, n) = k.purpose {
                    if c == chan {
                        let publisher_side = def.side_of(k.owner)?;
                        if pc.sides[publisher_side].revoked_own.contains(&n) {
                            contested_by = Some(def.other(publisher_side));
                        }
                    }
                }
            }
            _ => {}
        }
    }
    contested_by.or(owner)
}

/// How one HTLC output of the published close was resolved on-chain.
enum HtlcSpend {
    Unspent,
    Punished,
    Success,
    Timeout,
}

fn htlc_output_spend(gs: &GlobalState, op: (TxId, u32)) -> HtlcSpend {
    for tx in &gs.ledger.published {
        for input in &tx.inputs {
            if (input.prev_tx, input.output_index) == op {
                if input.witness.revocation_secret.is_some() {
                    return HtlcSpend::Punished;
                }
                if tx.locktime.0 > 0 {
                    return HtlcSpend::Timeout;
                }
                return HtlcSpend::Success;
            }
        }
    }
    HtlcSpend::Unspent
}

pub fn derive_channel(scenario: &Scenario, gs: &GlobalState, chan: ChannelId) -> DerivedChannel {
    match &gs.channels[chan.0 as usize] {
        ChannelSt::Ideal(ic) => DerivedChannel {
            phase: ic.phase,
            balances: ic.balances,
            htlcs: ic.htlcs.clone(),
            pots: ic.pots,
            cheater: ic.cheater,
            settled: ic.settled,
            wpl: ic.will_punish_later,
            queue_msgs: [
                ic.queues[0].items.iter().filter(|(_, m)| m.htlc_layer()).map(|(_, m)| m.clone()).collect(),
                ic.queues[1].items.iter().filter(|(_, m)| m.htlc_layer()).map(|(_, m)| m.clone()).collect(),
            ],
            punish_pending: ic.cheater.is_some_and(|s| {
                ic.htlcs.values().any(|r| !r.state.terminal())
                    && gs.honest[scenario.channel(chan).users[1 - s as usize].0 as usize]
            }),
        },
        ChannelSt::Proto(pc) => derive_proto_channel(scenario, gs, chan, pc),
    }
}

fn derive_proto_channel(
    scenario: &Scenario,
    gs: &GlobalState,
    chan: ChannelId,
    pc: &ProtoChannel,
) -> DerivedChannel {
    let def = scenario.channel(chan);
    let funding_published =
        pc.funding_txid.is_some_and(|id| gs.ledger.contains_tx(id));
    let close = published_close(scenario, gs, chan, pc);
    let settled = [pc.sides[0].phase == Phase::Done, pc.sides[1].phase == Phase::Done];
    let queue_msgs = [
        pc.queues[0].items.iter().filter(|(_, m)| m.htlc_layer()).map(|(_, m)| m.clone()).collect(),
        pc.queues[1].items.iter().filter(|(_, m)| m.htlc_layer()).map(|(_, m)| m.clone()).collect(),
    ];
    let wpl = [pc.sides[0].will_punish_later, pc.sides[1].will_punish_later];

    // The lagging side's commitment is the ideal off-chain view.
    let behind = if pc.sides[0].number <= pc.sides[1].number { 0 } else { 1 };
    let behind_side = &pc.sides[behind];

    let mut htlcs: BTreeMap<PaymentId, HtlcRec> = BTreeMap::new();
    let all_payments: BTreeSet<PaymentId> = pc.sides[0]
        .htlcs
        .keys()
        .chain(pc.sides[1].htlcs.keys())
        .copied()
        .chain(close.iter().flat_map(|c| c.htlcs.iter().copied()))
        .collect();

    let sender_rec = |p: PaymentId| -> Option<HtlcState> {
        let def_p = scenario.payment(p);
        let hop = def_p.hop_of_channel(chan)?;
        let (hs, _) = def_p.hop_users(scenario, hop);
        let side = def.side_of(hs)?;
        pc.sides[side].htlcs.get(&p).map(|r| r.state)
    };
    let recipient_has_rec = |p: PaymentId| -> bool {
        let def_p = scenario.payment(p);
        let Some(hop) = def_p.hop_of_channel(chan) else { return false };
        let (_, hr) = def_p.hop_users(scenario, hop);
        def.side_of(hr).is_some_and(|side| pc.sides[side].htlcs.contains_key(&p))
    };

    match &close {
        None => {
            for p in all_payments {
                let Some(srec) = sender_rec(p) else { continue };
                let committed = behind_side.commit_htlcs.contains(&p);
                let rec = if committed {
                    let state = match srec {
                        HtlcState::Fulfilled | HtlcState::Persisted => HtlcState::Fulfilled,
                        HtlcState::TimedOut | HtlcState::Aborted => HtlcState::TimedOut,
                        _ => HtlcState::Committed,
                    };
                    HtlcRec { state, add_received: true }
                } else {
                    match srec {
                        HtlcState::New => HtlcRec { state: HtlcState::New, add_received: false },
                        HtlcState::SentAdd => {
                            HtlcRec { state: HtlcState::SentAdd, add_received: recipient_has_rec(p) }
                        }
                        // Removed from both current commitments: the round
                        // that dropped it has completed on the lagging side.
                        HtlcState::Committed | HtlcState::Fulfilled | HtlcState::Persisted => {
                            let state = if srec == HtlcState::Committed {
                                HtlcState::Aborted
                            } else {
                                HtlcState::Persisted
                            };
                            HtlcRec { state, add_received: true }
                        }
                        HtlcState::TimedOut | HtlcState::Aborted => {
                            HtlcRec { state: HtlcState::Aborted, add_received: true }
                        }
                        HtlcState::PunishedOnChain | HtlcState::RedeemedOnChain => {
                            HtlcRec { state: srec, add_received: true }
                        }
                    }
                };
                htlcs.insert(p, rec);
            }
        }
        Some(cl) => {
            for p in all_payments {
                let on_chain_idx = cl.tx.outputs.iter().position(|o| htlc_payment_of_output(o) == Some(p));
                let rec = match on_chain_idx {
                    Some(idx) => match htlc_output_spend(gs, (cl.tx.id, idx as u32)) {
                        HtlcSpend::Unspent => {
                            let state = match sender_rec(p) {
                                Some(HtlcState::Fulfilled) | Some(HtlcState::Persisted) => {
                                    HtlcState::Fulfilled
                                }
                                Some(HtlcState::TimedOut) | Some(HtlcState::Aborted) => {
                                    HtlcState::TimedOut
                                }
                                _ => HtlcState::Committed,
                            };
                            HtlcRec { state, add_received: true }
                        }
                        HtlcSpend::Punished => HtlcRec { state: HtlcState::PunishedOnChain, add_received: true },
                        HtlcSpend::Success => HtlcRec { state: HtlcState::RedeemedOnChain, add_received: true },
                        HtlcSpend::Timeout => HtlcRec { state: HtlcState::Aborted, add_received: true },
                    },
                    None => {
                        let state = match sender_rec(p) {
                            Some(HtlcState::Fulfilled) | Some(HtlcState::Persisted) => {
                                HtlcState::Persisted
                            }
                            _ => HtlcState::Aborted,
                        };
                        HtlcRec { state, add_received: true }
                    }
                };
                htlcs.insert(p, rec);
            }
        }
    }

    let (phase, balances, cheater) = match (&close, funding_published) {
        (Some(cl), _) => {
            let cheater = pc.sides[cl.side].revoked_own.contains(&cl.number).then_some(cl.side as u8);
            let phase = if settled[0] && settled[1] { IdealPhase::Closed } else { IdealPhase::Closing };
            (phase, [0, 0], cheater)
        }
        (None, true) => (IdealPhase::Open, behind_side.balances, None),
        (None, false) => (IdealPhase::Unopened, [0, 0], None),
    };

    // On-chain value split by current claim entitlement.
    let mut pots = [0 as Coins, 0 as Coins];
    let mut contested_unspent = false;
    if let Some(funding) = pc.funding_txid {
        if funding_published {
            let graph = channel_tx_ids(gs, funding);
            for tx in &gs.ledger.published {
                if !graph.contains(&tx.id) {
                    continue;
                }
                for (i, out) in tx.outputs.iter().enumerate() {
                    let op = (tx.id, i as u32);
                    if !gs.ledger.is_unspent(op) || htlc_payment_of_output(out).is_some() {
                        continue;
                    }
                    if let Some(user) = attribute_plain_output(scenario, chan, pc, out) {
                        if let Some(side) = def.side_of(user) {
                            pots[side] += out.amount;
                        }
                        let has_live_rev = out.conditions.iter().any(|c| {
                            matches!(c, SpendingCondition::RevocationSig(k)
                                if matches!(k.purpose, KeyPurpose::Revocation(c2, n)
                                    if c2 == chan
                                        && def.side_of(k.owner)
                                            .is_some_and(|s| pc.sides[s].revoked_own.contains(&n))))
                        });
                        if has_live_rev {
                            contested_unspent = true;
                        }
                    }
                }
            }
        }
    }

    let punish_pending = cheater.is_some_and(|s| {
        let victim = def.other(s as usize);
        gs.honest[victim.0 as usize]
            && (contested_unspent
                || htlcs.values().any(|r| {
                    matches!(r.state, HtlcState::Committed | HtlcState::Fulfilled | HtlcState::TimedOut)
                }))
    });

    DerivedChannel {
        phase,
        balances,
        htlcs,
        pots,
        cheater,
        settled,
        wpl,
        queue_msgs,
        punish_pending,
    }
}

pub fn derive_all(scenario: &Scenario, gs: &GlobalState) -> Vec<DerivedChannel> {
    (0..scenario.channels.len() as u8)
        .map(|c| derive_channel(scenario, gs, ChannelId(c)))
        .collect()
}

/// Expiry constants that can still flip a guard: one per live HTLC record,
/// wherever it is in its lifecycle (announced, committed, awaiting on-chain
/// resolution). Derived on demand, never stored.
pub fn pending_locks(scenario: &Scenario, derived: &[DerivedChannel]) -> BTreeSet<BlockHeight> {
    let mut locks = BTreeSet::new();
    for (ci, dc) in derived.iter().enumerate() {
        for (&p, rec) in &dc.htlcs {
            if rec.state.terminal() {
                continue;
            }
            let def_p = scenario.payment(p);
            if let Some(hop) = def_p.hop_of_channel(ChannelId(ci as u8)) {
                locks.insert(def_p.expiries[hop]);
            }
        }
    }
    locks
}

/// The honest-deadline guard: the clock may not advance to `t_next` while an
/// honest user still has a time-critical claim to make. Without relative
/// timelocks, honest users are modeled as prompt: time halts while they have
/// an enabled on-chain claim or punishment (unless deferred via
/// WillPunishLater), and never crosses an HTLC expiry while an honest
/// preimage holder has not yet secured the incoming payment.
pub fn advance_blocked(
    scenario: &Scenario,
    gs: &GlobalState,
    derived: &[DerivedChannel],
    t_next: BlockHeight,
) -> bool {
    let now = gs.now();
    for (ci, dc) in derived.iter().enumerate() {
        let chan = ChannelId(ci as u8);
        if dc.punish_pending {
            let victim_side = 1 - dc.cheater.unwrap() as usize;
            if !dc.wpl[victim_side] {
                return true;
            }
        }
        for (&p, rec) in &dc.htlcs {
            let def_p = scenario.payment(p);
            let Some(hop) = def_p.hop_of_channel(chan) else { continue };
            let (hs, hr) = def_p.hop_users(scenario, hop);
            let e = def_p.expiries[hop];
            let recipient_knows =
                gs.honest[hr.0 as usize] && gs.pay[p.0 as usize].known.contains(&hr);
            match dc.phase {
                IdealPhase::Open => {
                    if matches!(rec.state, HtlcState::Committed | HtlcState::Fulfilled)
                        && recipient_knows
                        && t_next >= e
                    {
                        return true;
                    }
                }
                IdealPhase::Closing => {
                    let unresolved = matches!(
                        rec.state,
                        HtlcState::Committed | HtlcState::Fulfilled | HtlcState::TimedOut
                    );
                    if unresolved && recipient_knows {
                        return true;
                    }
                    if unresolved
                        && rec.state != HtlcState::Fulfilled
                        && now >= e
                        && gs.honest[hs.0 as usize]
                    {
                        return true;
                    }
                }
                _ => {}
            }
        }
    }
    false
}

/// Effective in-network balance per user for the top-level security mapping:
/// off-chain balances and settleable pots, plus live HTLC value attributed
/// to the hop sender until the payment is processed and to the hop recipient
/// afterwards.
pub fn network_balances(scenario: &Scenario, gs: &GlobalState, derived: &[DerivedChannel]) -> Vec<i64> {
    let mut bal = vec![0i64; scenario.num_users];
    for (ci, dc) in derived.iter().enumerate() {
        let chan = ChannelId(ci as u8);
        let def = scenario.channel(chan);
        for side in 0..2 {
            bal[def.users[side].0 as usize] += dc.balances[side] as i64 + dc.pots[side] as i64;
        }
        for (&p, rec) in &dc.htlcs {
            let live = matches!(
                rec.state,
                HtlcState::Committed | HtlcState::Fulfilled | HtlcState::TimedOut
            );
            if !live {
                continue;
            }
            let def_p = scenario.payment(p);
            let Some(hop) = def_p.hop_of_channel(chan) else { continue };
            let (hs, hr) = def_p.hop_users(scenario, hop);
            let target = if gs.pay[p.0 as usize].status == PayStatus::Processed { hr } else { hs };
            bal[target.0 as usize] += def_p.amount as i64;
        }
    }
    bal
}

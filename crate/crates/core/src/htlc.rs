//! The HTLCUser state machine: invoices and payment hashes, HTLC
//! announcement and forwarding, preimage propagation and failure
//! propagation. One implementation serves both channel variants; the only
//! difference is where the HTLC records live (per-side for the protocol
//! machine, shared for the ideal machine).
//!
//! The MultiHopMock actions live here too: they inject a forwarded-payment
//! obligation at a user (standing in for an unmodeled upstream channel) and
//! nondeterministically deliver the preimage of an HTLC whose downstream
//! continuation is unmodeled.

use crate::checker::Step;
use crate::ids::{ChannelId, PaymentId, UserId};
use crate::state::{
    ChannelSt, GlobalState, HtlcRec, HtlcState, IdealPhase, Msg, PayStatus, Scenario,
};

pub(crate) fn emit(
    out: &mut Vec<Step<GlobalState>>,
    action: &'static str,
    params: String,
    state: GlobalState,
) {
    out.push(Step { action, params, state });
}

/// This user's record state for an HTLC, in whichever variant.
pub fn rec_view(gs: &GlobalState, scenario: &Scenario, chan: ChannelId, user: UserId, p: PaymentId) -> Option<HtlcRec> {
    match &gs.channels[chan.0 as usize] {
        ChannelSt::Proto(pc) => {
            let side = scenario.channel(chan).side_of(user)?;
            pc.sides[side].htlcs.get(&p).cloned()
        }
        ChannelSt::Ideal(ic) => ic.htlcs.get(&p).cloned(),
    }
}

/// Can this user currently exchange off-chain messages on the channel? Once
/// a commitment hit the chain the channel is dead for updates, whether or
/// not this side has noticed yet.
fn channel_operating(gs: &GlobalState, scenario: &Scenario, chan: ChannelId, user: UserId) -> bool {
    match &gs.channels[chan.0 as usize] {
        ChannelSt::Proto(pc) => {
            let Some(side) = scenario.channel(chan).side_of(user) else { return false };
            pc.sides[side].phase.operating()
                && crate::derive::published_close(scenario, gs, chan, pc).is_none()
        }
        ChannelSt::Ideal(ic) => ic.phase == IdealPhase::Open,
    }
}

fn send_msg(gs: &mut GlobalState, scenario: &Scenario, chan: ChannelId, from: UserId, m: Msg) {
    let side = scenario.channel(chan).side_of(from).expect("sender on channel");
    gs.channels[chan.0 as usize].queues_mut()[side].send(m);
}

fn msg_queued(gs: &GlobalState, scenario: &Scenario, chan: ChannelId, from: UserId, m: &Msg) -> bool {
    let side = scenario.channel(chan).side_of(from).expect("sender on channel");
    gs.channels[chan.0 as usize].queues()[side].items.iter().any(|(_, q)| q == m)
}

/// Live (value-bearing, unresolved) HTLC count on a channel, for the
/// concurrency bound.
fn live_htlcs(gs: &GlobalState, chan: ChannelId) -> usize {
    match &gs.channels[chan.0 as usize] {
        ChannelSt::Proto(pc) => {
            // Count the union of both sides' non-terminal records.
            let mut set = std::collections::BTreeSet::new();
            for side in &pc.sides {
                for (p, r) in &side.htlcs {
                    if !r.state.terminal() {
                        set.insert(*p);
                    }
                }
            }
            set.len()
        }
        ChannelSt::Ideal(ic) => ic.htlcs.values().filter(|r| !r.state.terminal()).count(),
    }
}

/// Balance available for a new outgoing HTLC: current off-chain balance
/// minus announced-but-uncommitted outgoing adds.
fn spendable(gs: &GlobalState, scenario: &Scenario, chan: ChannelId, user: UserId) -> i64 {
    let def = scenario.channel(chan);
    let Some(side) = def.side_of(user) else { return 0 };
    let (balance, pending): (i64, i64) = match &gs.channels[chan.0 as usize] {
        ChannelSt::Proto(pc) => {
            let bal = pc.sides[side].balances[side] as i64;
            let pend = pc.sides[side]
                .htlcs
                .iter()
                .filter(|(p, r)| {
                    r.state == HtlcState::SentAdd && is_hop_sender(scenario, **p, chan, user)
                })
                .map(|(p, _)| scenario.payment(*p).amount as i64)
                .sum();
            (bal, pend)
        }
        ChannelSt::Ideal(ic) => {
            let bal = ic.balances[side] as i64;
            let pend = ic
                .htlcs
                .iter()
                .filter(|(p, r)| {
                    r.state == HtlcState::SentAdd && is_hop_sender(scenario, **p, chan, user)
                })
                .map(|(p, _)| scenario.payment(*p).amount as i64)
                .sum();
            (bal, pend)
        }
    };
    balance - pending
}

pub fn is_hop_sender(scenario: &Scenario, p: PaymentId, chan: ChannelId, user: UserId) -> bool {
    let def = scenario.payment(p);
    def.hop_of_channel(chan)
        .is_some_and(|h| def.hop_users(scenario, h).0 == user)
}

pub fn is_hop_recipient(scenario: &Scenario, p: PaymentId, chan: ChannelId, user: UserId) -> bool {
    let def = scenario.payment(p);
    def.hop_of_channel(chan)
        .is_some_and(|h| def.hop_users(scenario, h).1 == user)
}

fn create_own_rec(gs: &mut GlobalState, scenario: &Scenario, chan: ChannelId, user: UserId, p: PaymentId, rec: HtlcRec) {
    match &mut gs.channels[chan.0 as usize] {
        ChannelSt::Proto(pc) => {
            let side = scenario.channel(chan).side_of(user).expect("user on channel");
            pc.sides[side].htlcs.insert(p, rec);
        }
        ChannelSt::Ideal(ic) => {
            ic.htlcs.insert(p, rec);
        }
    }
}

/// All HTLCUser sub-actions for one user, in catalog order.
pub fn htlc_user_actions(scenario: &Scenario, gs: &GlobalState, user: UserId, out: &mut Vec<Step<GlobalState>>) {
    request_invoice(scenario, gs, user, out);
    generate_and_send_payment_hash(scenario, gs, user, out);
    receive_payment_hash(scenario, gs, user, out);
    add_and_send_outgoing_htlc(scenario, gs, user, out);
    receive_update_add_htlc(scenario, gs, user, out);
    send_htlc_preimage(scenario, gs, user, out);
    receive_htlc_preimage(scenario, gs, user, out);
    send_htlc_fail(scenario, gs, user, out);
    receive_htlc_fail(scenario, gs, user, out);
}

fn request_invoice(scenario: &Scenario, gs: &GlobalState, user: UserId, out: &mut Vec<Step<GlobalState>>) {
    for def in &scenario.payments {
        if def.mock || def.sender != user {
            continue;
        }
        let ps = &gs.pay[def.id.0 as usize];
        if ps.status == PayStatus::Pending && ps.intent == crate::state::IntentSt::Init {
            let mut next = gs.clone();
            next.pay[def.id.0 as usize].intent = crate::state::IntentSt::InvoiceRequested;
            emit(out, "RequestInvoice", format!("user={user} payment={}", def.id), next);
        }
    }
}

fn generate_and_send_payment_hash(scenario: &Scenario, gs: &GlobalState, user: UserId, out: &mut Vec<Step<GlobalState>>) {
    for def in &scenario.payments {
        if def.mock || def.recipient != user {
            continue;
        }
        let ps = &gs.pay[def.id.0 as usize];
        if ps.status == PayStatus::Pending && ps.intent == crate::state::IntentSt::InvoiceRequested {
            let mut next = gs.clone();
            let slot = &mut next.pay[def.id.0 as usize];
            slot.intent = crate::state::IntentSt::HashSent;
            slot.lock_drawn = true;
            slot.known.insert(user);
            emit(out, "GenerateAndSendPaymentHash", format!("user={user} payment={}", def.id), next);
        }
    }
}

fn receive_payment_hash(scenario: &Scenario, gs: &GlobalState, user: UserId, out: &mut Vec<Step<GlobalState>>) {
    for def in &scenario.payments {
        if def.mock || def.sender != user {
            continue;
        }
        let ps = &gs.pay[def.id.0 as usize];
        if ps.status == PayStatus::Pending && ps.intent == crate::state::IntentSt::HashSent {
            let mut next = gs.clone();
            next.pay[def.id.0 as usize].intent = crate::state::IntentSt::HashReceived;
            emit(out, "ReceivePaymentHash", format!("user={user} payment={}", def.id), next);
        }
    }
}

fn add_and_send_outgoing_htlc(scenario: &Scenario, gs: &GlobalState, user: UserId, out: &mut Vec<Step<GlobalState>>) {
    for def in &scenario.payments {
        let p = def.id;
        let ps = &gs.pay[p.0 as usize];
        if ps.status == PayStatus::Aborted {
            continue;
        }
        for (hop, &chan) in def.route.iter().enumerate() {
            if def.hop_users(scenario, hop).0 != user {
                continue;
            }
            // Reason to add: payment origin here, a mock obligation, or the
            // incoming HTLC of the previous hop is irrevocably committed.
            let reason = if hop == 0 {
                if def.mock {
                    ps.status == PayStatus::Pending || ps.status == PayStatus::Processed
                } else {
                    ps.intent == crate::state::IntentSt::HashReceived
                }
            } else {
                let prev = def.route[hop - 1];
                rec_view(gs, scenario, prev, user, p)
                    .is_some_and(|r| r.state == HtlcState::Committed)
            };
            if !reason
                || rec_view(gs, scenario, chan, user, p).is_some()
                || !channel_operating(gs, scenario, chan, user)
                || def.expiries[hop] <= gs.now()
                || live_htlcs(gs, chan) >= scenario.max_htlcs_per_channel
                || spendable(gs, scenario, chan, user) < def.amount as i64
            {
                continue;
            }
            let mut next = gs.clone();
            create_own_rec(&mut next, scenario, chan, user, p, HtlcRec { state: HtlcState::SentAdd, add_received: false });
            send_msg(&mut next, scenario, chan, user, Msg::UpdateAddHtlc { payment: p });
            emit(out, "AddAndSendOutgoingHTLC", format!("user={user} payment={p} chan={chan}"), next);
        }
    }
}

fn receive_update_add_htlc(scenario: &Scenario, gs: &GlobalState, user: UserId, out: &mut Vec<Step<GlobalState>>) {
    for cdef in &scenario.channels {
        let Some(side) = cdef.side_of(user) else { continue };
        let chan = cdef.id;
        let Some(Msg::UpdateAddHtlc { payment }) = gs.channels[chan.0 as usize].queues()[1 - side].head().cloned() else {
            continue;
        };
        let mut next = gs.clone();
        next.channels[chan.0 as usize].queues_mut()[1 - side].consume();
        match &mut next.channels[chan.0 as usize] {
            ChannelSt::Proto(pc) => {
                pc.sides[side]
                    .htlcs
                    .entry(payment)
                    .or_insert(HtlcRec { state: HtlcState::SentAdd, add_received: true });
            }
            ChannelSt::Ideal(ic) => {
                if let Some(r) = ic.htlcs.get_mut(&payment) {
                    if r.state == HtlcState::SentAdd {
                        r.add_received = true;
                    }
                }
            }
        }
        emit(out, "ReceiveUpdateAddHTLC", format!("user={user} payment={payment} chan={chan}"), next);
    }
}

/// Has this user's obligation toward the payment been discharged downstream?
/// Payment recipients and mock forwarders hold the discharge by knowing the
/// preimage; intermediaries must have had their outgoing HTLC settled.
fn may_reveal(scenario: &Scenario, gs: &GlobalState, user: UserId, p: PaymentId, chan: ChannelId) -> bool {
    let def = scenario.payment(p);
    if !gs.honest[user.0 as usize] {
        return true;
    }
    if def.recipient == user {
        return true;
    }
    // Intermediary: the next hop's HTLC must have paid out downstream.
    let Some(hop) = def.hop_of_channel(chan) else { return false };
    if hop + 1 >= def.route.len() {
        return false;
    }
    let next_chan = def.route[hop + 1];
    rec_view(gs, scenario, next_chan, user, p).is_some_and(|r| {
        matches!(r.state, HtlcState::Fulfilled | HtlcState::Persisted | HtlcState::RedeemedOnChain)
    })
}

fn send_htlc_preimage(scenario: &Scenario, gs: &GlobalState, user: UserId, out: &mut Vec<Step<GlobalState>>) {
    for def in &scenario.payments {
        let p = def.id;
        for (hop, &chan) in def.route.iter().enumerate() {
            if def.hop_users(scenario, hop).1 != user {
                continue;
            }
            let ps = &gs.pay[p.0 as usize];
            // The reveal is pointless once the hop sender acknowledged the
            // preimage, so the guard reads the channel's derived view.
            let committed = crate::derive::derive_channel(scenario, gs, chan)
                .htlcs
                .get(&p)
                .is_some_and(|r| r.state == HtlcState::Committed);
            if !ps.known.contains(&user)
                || !channel_operating(gs, scenario, chan, user)
                || !committed
                || msg_queued(gs, scenario, chan, user, &Msg::HtlcPreimage { payment: p })
                || !may_reveal(scenario, gs, user, p, chan)
            {
                continue;
            }
            let mut next = gs.clone();
            send_msg(&mut next, scenario, chan, user, Msg::HtlcPreimage { payment: p });
            // First release by the payment recipient processes the payment.
            if def.recipient == user && next.pay[p.0 as usize].status == PayStatus::Pending {
                next.pay[p.0 as usize].status = PayStatus::Processed;
            }
            emit(out, "SendHTLCPreimage", format!("user={user} payment={p} chan={chan}"), next);
        }
    }
}

fn receive_htlc_preimage(scenario: &Scenario, gs: &GlobalState, user: UserId, out: &mut Vec<Step<GlobalState>>) {
    for cdef in &scenario.channels {
        let Some(side) = cdef.side_of(user) else { continue };
        let chan = cdef.id;
        let Some(Msg::HtlcPreimage { payment }) = gs.channels[chan.0 as usize].queues()[1 - side].head().cloned() else {
            continue;
        };
        // The preimage is learned unconditionally; the record advances to
        // Fulfilled only while the HTLC is still live in the channel's
        // derived view (a late reveal against a dead HTLC changes nothing).
        let live = crate::derive::derive_channel(scenario, gs, chan)
            .htlcs
            .get(&payment)
            .is_some_and(|r| r.state == HtlcState::Committed);
        let mut next = gs.clone();
        next.channels[chan.0 as usize].queues_mut()[1 - side].consume();
        next.pay[payment.0 as usize].known.insert(user);
        if live {
            match &mut next.channels[chan.0 as usize] {
                ChannelSt::Proto(pc) => {
                    if let Some(r) = pc.sides[side].htlcs.get_mut(&payment) {
                        if r.state == HtlcState::Committed {
                            r.state = HtlcState::Fulfilled;
                        }
                    }
                }
                ChannelSt::Ideal(ic) => {
                    if let Some(r) = ic.htlcs.get_mut(&payment) {
                        if r.state == HtlcState::Committed {
                            r.advance(HtlcState::Fulfilled);
                        }
                    }
                }
            }
        }
        emit(out, "ReceiveHTLCPreimage", format!("user={user} payment={payment} chan={chan}"), next);
    }
}

fn send_htlc_fail(scenario: &Scenario, gs: &GlobalState, user: UserId, out: &mut Vec<Step<GlobalState>>) {
    for def in &scenario.payments {
        let p = def.id;
        for (hop, &chan) in def.route.iter().enumerate() {
            if def.hop_users(scenario, hop).1 != user {
                continue;
            }
            let rec_state = rec_view(gs, scenario, chan, user, p).map(|r| r.state);
            // An uncommitted announcement can only be failed once expired
            // and only while the announcing side still holds it open; a
            // committed HTLC can be failed once hopeless (or at will by a
            // dishonest holder).
            let failable = match rec_state {
                Some(HtlcState::Committed) => true,
                Some(HtlcState::SentAdd) => {
                    let (hs, _) = def.hop_users(scenario, hop);
                    let globally_announced = match &gs.channels[chan.0 as usize] {
                        // A version signed mid-round may still carry it.
                        ChannelSt::Proto(pc) => {
                            !pc.round_active
                                && pc.sides.iter().all(|s| !s.commit_htlcs.contains(&p))
                        }
                        ChannelSt::Ideal(_) => true,
                    };
                    gs.now() >= def.expiries[hop]
                        && globally_announced
                        && rec_view(gs, scenario, chan, hs, p).map(|r| r.state)
                            == Some(HtlcState::SentAdd)
                }
                _ => false,
            };
            if !failable
                || !channel_operating(gs, scenario, chan, user)
                || msg_queued(gs, scenario, chan, user, &Msg::HtlcFail { payment: p })
                || gs.pay[p.0 as usize].known.contains(&user)
            {
                continue;
            }
            if gs.honest[user.0 as usize] && rec_state == Some(HtlcState::Committed) {
                let expired = gs.now() >= def.expiries[hop];
                let downstream_dead = def
                    .hop_of_channel(chan)
                    .and_then(|h| def.route.get(h + 1))
                    .and_then(|&nc| rec_view(gs, scenario, nc, user, p))
                    .is_some_and(|r| {
                        matches!(r.state, HtlcState::TimedOut | HtlcState::Aborted | HtlcState::PunishedOnChain)
                    });
                if !expired && !downstream_dead {
                    continue;
                }
            }
            let mut next = gs.clone();
            send_msg(&mut next, scenario, chan, user, Msg::HtlcFail { payment: p });
            // Local bookkeeping: this side gives up on the HTLC.
            if let ChannelSt::Proto(pc) = &mut next.channels[chan.0 as usize] {
                let side = scenario.channel(chan).side_of(user).unwrap();
                if let Some(r) = pc.sides[side].htlcs.get_mut(&p) {
                    match r.state {
                        HtlcState::Committed => r.state = HtlcState::TimedOut,
                        HtlcState::SentAdd => r.state = HtlcState::Aborted,
                        _ => {}
                    }
                }
            }
            if next.pay[p.0 as usize].status == PayStatus::Pending {
                next.pay[p.0 as usize].status = PayStatus::Aborted;
            }
            emit(out, "SendHTLCFail", format!("user={user} payment={p} chan={chan}"), next);
        }
    }
}

fn receive_htlc_fail(scenario: &Scenario, gs: &GlobalState, user: UserId, out: &mut Vec<Step<GlobalState>>) {
    for cdef in &scenario.channels {
        let Some(side) = cdef.side_of(user) else { continue };
        let chan = cdef.id;
        let Some(Msg::HtlcFail { payment }) = gs.channels[chan.0 as usize].queues()[1 - side].head().cloned() else {
            continue;
        };
        let mut next = gs.clone();
        next.channels[chan.0 as usize].queues_mut()[1 - side].consume();
        match &mut next.channels[chan.0 as usize] {
            ChannelSt::Proto(pc) => {
                if let Some(r) = pc.sides[side].htlcs.get_mut(&payment) {
                    match r.state {
                        HtlcState::SentAdd => r.state = HtlcState::Aborted,
                        HtlcState::Committed => r.state = HtlcState::TimedOut,
                        _ => {}
                    }
                }
            }
            ChannelSt::Ideal(ic) => {
                if let Some(r) = ic.htlcs.get_mut(&payment) {
                    match r.state {
                        HtlcState::SentAdd => r.advance(HtlcState::Aborted),
                        HtlcState::Committed => r.advance(HtlcState::TimedOut),
                        _ => {}
                    }
                }
            }
        }
        emit(out, "ReceiveHTLCFail", format!("user={user} payment={payment} chan={chan}"), next);
    }
}

/// MultiHopMock: inject a forwarded payment at `user` (one per user per run).
pub fn mock_actions(scenario: &Scenario, gs: &GlobalState, out: &mut Vec<Step<GlobalState>>) {
    if !scenario.mocks_enabled {
        return;
    }
    for def in &scenario.payments {
        if !def.mock {
            continue;
        }
        let user = def.sender;
        let ps = &gs.pay[def.id.0 as usize];
        if ps.status == PayStatus::Unborn && !gs.mock_used[user.0 as usize] {
            let mut next = gs.clone();
            let slot = &mut next.pay[def.id.0 as usize];
            slot.status = PayStatus::Pending;
            slot.lock_drawn = true;
            next.mock_used[user.0 as usize] = true;
            emit(out, "AddNewForwardedPayment", format!("user={user} payment={}", def.id), next);
        }
    }
    for def in &scenario.payments {
        if !def.mock {
            continue;
        }
        let target = def.recipient;
        let ps = &gs.pay[def.id.0 as usize];
        let chan = def.route[0];
        // The mock stands in for the downstream side of the forwarded
        // payment; it consults the channel's actual (derived) view rather
        // than one party's possibly stale bookkeeping.
        let committed = crate::derive::derive_channel(scenario, gs, chan)
            .htlcs
            .get(&def.id)
            .is_some_and(|r| matches!(r.state, HtlcState::Committed));
        // The unmodeled downstream hop has a strictly smaller expiry, so a
        // successful downstream resolution reveals the preimage before this
        // HTLC's own timelock runs out.
        let in_time = gs.now() < def.expiries[0];
        if ps.lock_drawn && committed && in_time && !ps.known.contains(&target) {
            let mut next = gs.clone();
            next.pay[def.id.0 as usize].known.insert(target);
            if next.pay[def.id.0 as usize].status == PayStatus::Pending {
                next.pay[def.id.0 as usize].status = PayStatus::Processed;
            }
            emit(
                out,
                "ReceivePreimageForIncomingHTLC",
                format!("user={target} payment={}", def.id),
                next,
            );
        }
    }
}

//! The IdealChannel module: coarse-grained channel steps that change both
//! parties' state at once and abstract away the protocol's message rounds.
//! Cheating collapses to a close that forfeits the closer's stake to the
//! counterparty; on-chain HTLC resolution keeps the per-claim granularity so
//! the protocol machine can map onto it claim by claim.

use crate::checker::Step;
use crate::htlc::emit;
use crate::ids::{ChannelId, Coins, PaymentId};
use crate::state::{GlobalState, HtlcState, IdealPhase, PayStatus, Scenario};

/// One pending off-chain change, derived from the shared records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum PendingChange {
    Add(PaymentId),
    Credit(PaymentId),
    Refund(PaymentId),
}

fn pending_changes(
    scenario: &Scenario,
    gs: &GlobalState,
    chan: ChannelId,
    include_expired_adds: bool,
) -> Vec<PendingChange> {
    let ic = gs.channels[chan.0 as usize].ideal();
    let mut out = Vec::new();
    for (&p, rec) in &ic.htlcs {
        let def = scenario.payment(p);
        let hop = def.hop_of_channel(chan).expect("htlc routed over channel");
        match rec.state {
            HtlcState::SentAdd
                if rec.add_received && (include_expired_adds || def.expiries[hop] > gs.now()) =>
            {
                out.push(PendingChange::Add(p))
            }
            HtlcState::Fulfilled => out.push(PendingChange::Credit(p)),
            HtlcState::TimedOut => out.push(PendingChange::Refund(p)),
            _ => {}
        }
    }
    out
}

fn subsets<T: Copy>(items: &[T]) -> Vec<Vec<T>> {
    let mut out = vec![vec![]];
    for &it in items {
        let mut more = Vec::new();
        for s in &out {
            let mut t = s.clone();
            t.push(it);
            more.push(t);
        }
        out.extend(more);
    }
    out
}

/// All IdealChannel sub-actions for one channel, in catalog order.
pub fn ideal_channel_actions(scenario: &Scenario, gs: &GlobalState, chan: ChannelId, out: &mut Vec<Step<GlobalState>>) {
    open_payment_channel(scenario, gs, chan, out);
    update_payment_channel(scenario, gs, chan, out);
    commit_htlcs_on_chain(scenario, gs, chan, out);
    fulfill_htlcs_on_chain(scenario, gs, chan, out);
    will_punish_later(scenario, gs, chan, out);
    close_payment_channel(scenario, gs, chan, out);
}

fn open_payment_channel(scenario: &Scenario, gs: &GlobalState, chan: ChannelId, out: &mut Vec<Step<GlobalState>>) {
    let def = scenario.channel(chan);
    let ic = gs.channels[chan.0 as usize].ideal();
    let funder = def.funder();
    if ic.phase == IdealPhase::Unopened && gs.external[funder.0 as usize] >= def.capacity {
        let mut next = gs.clone();
        next.external[funder.0 as usize] -= def.capacity;
        let nic = next.channels[chan.0 as usize].ideal_mut();
        nic.phase = IdealPhase::Open;
        nic.balances = [def.capacity, 0];
        emit(out, "OpenPaymentChannel", format!("chan={chan} funder={funder}"), next);
    }
}

fn update_payment_channel(scenario: &Scenario, gs: &GlobalState, chan: ChannelId, out: &mut Vec<Step<GlobalState>>) {
    let ic = gs.channels[chan.0 as usize].ideal();
    if ic.phase != IdealPhase::Open {
        return;
    }
    let pending = pending_changes(scenario, gs, chan, true);
    for subset in subsets(&pending) {
        if subset.is_empty() {
            continue;
        }
        if let Some(next) = apply_update(scenario, gs, chan, &subset, true) {
            let desc: Vec<String> = subset
                .iter()
                .map(|c| match c {
                    PendingChange::Add(p) => format!("add({p})"),
                    PendingChange::Credit(p) => format!("credit({p})"),
                    PendingChange::Refund(p) => format!("refund({p})"),
                })
                .collect();
            emit(out, "UpdatePaymentChannel", format!("chan={chan} [{}]", desc.join(" ")), next);
        }
    }
    // Dropping an announced HTLC that can no longer be committed.
    let ic = gs.channels[chan.0 as usize].ideal();
    for (&p, rec) in &ic.htlcs {
        let def = scenario.payment(p);
        let hop = def.hop_of_channel(chan).expect("routed");
        if rec.state == HtlcState::SentAdd && def.expiries[hop] <= gs.now() {
            let mut next = gs.clone();
            next.channels[chan.0 as usize].ideal_mut().htlcs.get_mut(&p).unwrap().advance(HtlcState::Aborted);
            if next.pay[p.0 as usize].status == PayStatus::Pending {
                next.pay[p.0 as usize].status = PayStatus::Aborted;
            }
            emit(out, "UpdatePaymentChannel", format!("chan={chan} [abort-add({p})]"), next);
        }
    }
}

fn apply_update(
    scenario: &Scenario,
    gs: &GlobalState,
    chan: ChannelId,
    subset: &[PendingChange],
    flip_statuses: bool,
) -> Option<GlobalState> {
    let def = scenario.channel(chan);
    let mut next = gs.clone();
    let mut live: usize = {
        let ic = gs.channels[chan.0 as usize].ideal();
        ic.htlcs
            .values()
            .filter(|r| matches!(r.state, HtlcState::Committed | HtlcState::Fulfilled | HtlcState::TimedOut))
            .count()
    };
    for change in subset {
        let ic = next.channels[chan.0 as usize].ideal_mut();
        match change {
            PendingChange::Add(p) => {
                let pdef = scenario.payment(*p);
                let hop = pdef.hop_of_channel(chan)?;
                let (hs, _) = pdef.hop_users(scenario, hop);
                let side = def.side_of(hs)?;
                if ic.balances[side] < pdef.amount || live >= scenario.max_htlcs_per_channel {
                    return None;
                }
                ic.balances[side] -= pdef.amount;
                ic.htlcs.get_mut(p).unwrap().advance(HtlcState::Committed);
                live += 1;
            }
            PendingChange::Credit(p) => {
                let pdef = scenario.payment(*p);
                let hop = pdef.hop_of_channel(chan)?;
                let (_, hr) = pdef.hop_users(scenario, hop);
                let side = def.side_of(hr)?;
                ic.balances[side] += pdef.amount;
                ic.htlcs.get_mut(p).unwrap().advance(HtlcState::Persisted);
                live -= 1;
            }
            PendingChange::Refund(p) => {
                let pdef = scenario.payment(*p);
                let hop = pdef.hop_of_channel(chan)?;
                let (hs, _) = pdef.hop_users(scenario, hop);
                let side = def.side_of(hs)?;
                ic.balances[side] += pdef.amount;
                ic.htlcs.get_mut(p).unwrap().advance(HtlcState::Aborted);
                live -= 1;
                if flip_statuses && next.pay[p.0 as usize].status == PayStatus::Pending {
                    next.pay[p.0 as usize].status = PayStatus::Aborted;
                }
            }
        }
    }
    Some(next)
}

fn commit_htlcs_on_chain(scenario: &Scenario, gs: &GlobalState, chan: ChannelId, out: &mut Vec<Step<GlobalState>>) {
    let def = scenario.channel(chan);
    let ic = gs.channels[chan.0 as usize].ideal();
    if ic.phase != IdealPhase::Open {
        return;
    }
    // Close at the current state, optionally folding in a set of in-flight
    // changes first: the two parties' commitment versions may differ by a
    // pending update, and a unilateral close publishes one of them. Either
    // party may force this; the resulting state does not depend on who
    // published.
    let pending = pending_changes(scenario, gs, chan, true);
    for subset in subsets(&pending) {
        let Some(mut next) = apply_update(scenario, gs, chan, &subset, false) else { continue };
        {
            let nic = next.channels[chan.0 as usize].ideal_mut();
            nic.phase = IdealPhase::Closing;
            nic.pots[0] += nic.balances[0];
            nic.pots[1] += nic.balances[1];
            nic.balances = [0, 0];
        }
        let mut aborted = Vec::new();
        {
            let nic = next.channels[chan.0 as usize].ideal_mut();
            for (&p, rec) in nic.htlcs.iter_mut() {
                if rec.state == HtlcState::SentAdd || rec.state == HtlcState::New {
                    rec.advance(HtlcState::Aborted);
                    aborted.push(p);
                }
            }
        }
        for p in aborted {
            if next.pay[p.0 as usize].status == PayStatus::Pending {
                next.pay[p.0 as usize].status = PayStatus::Aborted;
            }
        }
        let desc: Vec<String> = subset
            .iter()
            .map(|c| match c {
                PendingChange::Add(p) => format!("add({p})"),
                PendingChange::Credit(p) => format!("credit({p})"),
                PendingChange::Refund(p) => format!("refund({p})"),
            })
            .collect();
        emit(
            out,
            "CommitHTLCsOnChain",
            format!("chan={chan} mode=current apply=[{}]", desc.join(" ")),
            next,
        );
    }
    // A dishonest closer may commit an outdated state: some persisted HTLCs
    // resurface on-chain and some live ones are absent; the counterparty's
    // revocation power over everything published turns the whole stake over
    // to them.
    for closer in 0..2usize {
        if gs.honest[def.users[closer].0 as usize] {
            continue;
        }
        let victim = 1 - closer;
        let resurrectable: Vec<PaymentId> = ic
            .htlcs
            .iter()
            .filter(|(_, r)| matches!(r.state, HtlcState::Persisted | HtlcState::Aborted))
            .map(|(p, _)| *p)
            .collect();
        let droppable: Vec<PaymentId> = ic
            .htlcs
            .iter()
            .filter(|(_, r)| matches!(r.state, HtlcState::Committed | HtlcState::Fulfilled | HtlcState::TimedOut))
            .map(|(p, _)| *p)
            .collect();
        for resurrect in subsets(&resurrectable) {
            for drop in subsets(&droppable) {
                let drop_sum: Coins = drop.iter().map(|p| scenario.payment(*p).amount).sum();
                let res_sum: Coins = resurrect.iter().map(|p| scenario.payment(*p).amount).sum();
                let base = ic.balances[0] + ic.balances[1] + drop_sum;
                if res_sum > base {
                    continue;
                }
                let mut next = gs.clone();
                let nic = next.channels[chan.0 as usize].ideal_mut();
                nic.phase = IdealPhase::Closing;
                nic.cheater = Some(closer as u8);
                nic.pots[victim] += base - res_sum;
                nic.balances = [0, 0];
                for (&p, rec) in nic.htlcs.iter_mut() {
                    if rec.state == HtlcState::SentAdd || rec.state == HtlcState::New {
                        rec.advance(HtlcState::Aborted);
                    } else if resurrect.contains(&p) {
                        // A settled HTLC resurfaces as claimable; a refunded
                        // one resurfaces as expired.
                        let st = if rec.state == HtlcState::Persisted {
                            HtlcState::Fulfilled
                        } else {
                            HtlcState::TimedOut
                        };
                        rec.advance(st);
                    } else if drop.contains(&p) {
                        let st = if rec.state == HtlcState::Fulfilled {
                            HtlcState::Persisted
                        } else {
                            HtlcState::Aborted
                        };
                        rec.advance(st);
                    }
                }
                let r: Vec<String> = resurrect.iter().map(|p| p.to_string()).collect();
                let d: Vec<String> = drop.iter().map(|p| p.to_string()).collect();
                emit(
                    out,
                    "CommitHTLCsOnChain",
                    format!(
                        "chan={chan} closer={} mode=outdated resurrect=[{}] drop=[{}]",
                        def.users[closer],
                        r.join(","),
                        d.join(",")
                    ),
                    next,
                );
            }
        }
    }
}

fn fulfill_htlcs_on_chain(scenario: &Scenario, gs: &GlobalState, chan: ChannelId, out: &mut Vec<Step<GlobalState>>) {
    let def = scenario.channel(chan);
    let ic = gs.channels[chan.0 as usize].ideal();
    if ic.phase != IdealPhase::Closing {
        return;
    }
    let cheat = ic.cheater.is_some();
    let victim = ic.cheater.map(|c| 1 - c as usize);
    for (&p, rec) in &ic.htlcs {
        let pdef = scenario.payment(p);
        let hop = pdef.hop_of_channel(chan).expect("routed");
        let (hs, hr) = pdef.hop_users(scenario, hop);
        let expiry = pdef.expiries[hop];
        // Success path: the hop recipient holds the preimage.
        if matches!(rec.state, HtlcState::Committed | HtlcState::Fulfilled)
            && gs.pay[p.0 as usize].known.contains(&hr)
        {
            let mut next = gs.clone();
            let pot_side = victim.unwrap_or_else(|| def.side_of(hr).unwrap());
            {
                let nic = next.channels[chan.0 as usize].ideal_mut();
                nic.pots[pot_side] += pdef.amount;
                nic.htlcs.get_mut(&p).unwrap().advance(HtlcState::RedeemedOnChain);
            }
            // Publishing the preimage reveals it to everyone.
            for u in scenario.user_ids() {
                next.pay[p.0 as usize].known.insert(u);
            }
            if !cheat && hr == pdef.recipient && next.pay[p.0 as usize].status == PayStatus::Pending {
                next.pay[p.0 as usize].status = PayStatus::Processed;
            }
            emit(out, "FulfillHTLCsOnChain", format!("chan={chan} payment={p} mode=success"), next);
        }
        // Timeout path: refund after expiry. Valid on-chain whatever the
        // off-chain bookkeeping said; an honest preimage holder is protected
        // by the clock guard, which halts time until they claim.
        if matches!(rec.state, HtlcState::Committed | HtlcState::TimedOut | HtlcState::Fulfilled)
            && gs.now() >= expiry
        {
            let mut next = gs.clone();
            let pot_side = victim.unwrap_or_else(|| def.side_of(hs).unwrap());
            {
                let nic = next.channels[chan.0 as usize].ideal_mut();
                nic.pots[pot_side] += pdef.amount;
                nic.htlcs.get_mut(&p).unwrap().advance(HtlcState::Aborted);
            }
            if !cheat && next.pay[p.0 as usize].status == PayStatus::Pending {
                next.pay[p.0 as usize].status = PayStatus::Aborted;
            }
            emit(out, "FulfillHTLCsOnChain", format!("chan={chan} payment={p} mode=timeout"), next);
        }
    }
    // Punishment sweep on a cheat close: every outstanding HTLC output goes
    // to the victim at once.
    if let Some(v) = victim {
        let live: Vec<PaymentId> = ic
            .htlcs
            .iter()
            .filter(|(_, r)| matches!(r.state, HtlcState::Committed | HtlcState::Fulfilled | HtlcState::TimedOut))
            .map(|(p, _)| *p)
            .collect();
        if !live.is_empty() && gs.honest[def.users[v].0 as usize] {
            let mut next = gs.clone();
            let nic = next.channels[chan.0 as usize].ideal_mut();
            let mut total = 0;
            for p in &live {
                total += scenario.payment(*p).amount;
                nic.htlcs.get_mut(p).unwrap().advance(HtlcState::PunishedOnChain);
            }
            nic.pots[v] += total;
            let names: Vec<String> = live.iter().map(|p| p.to_string()).collect();
            emit(out, "FulfillHTLCsOnChain", format!("chan={chan} mode=punish [{}]", names.join(",")), next);
        }
    }
}

fn will_punish_later(scenario: &Scenario, gs: &GlobalState, chan: ChannelId, out: &mut Vec<Step<GlobalState>>) {
    let def = scenario.channel(chan);
    let ic = gs.channels[chan.0 as usize].ideal();
    if let Some(cheater) = ic.cheater {
        let victim = 1 - cheater as usize;
        if !ic.will_punish_later[victim] && !ic.settled[victim] {
            let mut next = gs.clone();
            next.channels[chan.0 as usize].ideal_mut().will_punish_later[victim] = true;
            emit(out, "WillPunishLater", format!("chan={chan} user={}", def.users[victim]), next);
        }
    }
}

fn close_payment_channel(scenario: &Scenario, gs: &GlobalState, chan: ChannelId, out: &mut Vec<Step<GlobalState>>) {
    let def = scenario.channel(chan);
    let ic = gs.channels[chan.0 as usize].ideal();
    if ic.phase != IdealPhase::Closing {
        return;
    }
    if ic.htlcs.values().any(|r| !r.state.terminal()) {
        return;
    }
    for side in 0..2usize {
        if ic.settled[side] {
            continue;
        }
        let mut next = gs.clone();
        next.external[def.users[side].0 as usize] += ic.pots[side];
        let nic = next.channels[chan.0 as usize].ideal_mut();
        nic.pots[side] = 0;
        nic.settled[side] = true;
        if nic.settled[0] && nic.settled[1] {
            nic.phase = IdealPhase::Closed;
        }
        emit(out, "ClosePaymentChannel", format!("chan={chan} user={}", def.users[side]), next);
    }
}

//! The PaymentChannelUser state machine: one instance per (channel, user).
//! Covers opening, the two-phase commitment update rounds, cooperative and
//! unilateral closing, cheating and punishment, and on-chain HTLC
//! resolution. Sub-action names in traces follow the protocol catalog
//! verbatim so traces read against the module's action list.
//!
//! Guards are state predicates over the whole global state (this is a
//! specification, not an implementation): a party may, for instance, consult
//! the counterparty's commitment number to classify an observed close.

use crate::checker::Step;
use crate::derive::{advance_blocked, derive_all, published_close};
use crate::htlc::{emit, is_hop_recipient, is_hop_sender};
use crate::ids::{ChannelId, PaymentId, UserId};
use crate::ledger::{publish_transaction, validate_transaction, Transaction};
use crate::state::{
    CloseKind, GlobalState, HtlcState, Msg, OldCommit, PayStatus, Phase, Proposal, Scenario,
};
use crate::txbuild::{
    build_commitment_tx, build_deposit_tx, build_funding_tx, build_htlc_success_tx,
    build_htlc_timeout_tx, build_punish_tx,
};

/// Appends a transaction to the ledger, teaching any witnessed preimages to
/// every user (the blockchain is public).
fn publish(gs: &mut GlobalState, scenario: &Scenario, tx: Transaction, publisher: UserId) -> bool {
    match publish_transaction(tx.clone(), publisher, &gs.ledger, scenario.flaws) {
        Ok(ledger) => {
            gs.ledger = std::sync::Arc::new(ledger);
            for input in &tx.inputs {
                if let Some(p) = input.witness.preimage {
                    for u in scenario.user_ids() {
                        gs.pay[p.0 as usize].known.insert(u);
                    }
                }
            }
            true
        }
        Err(_) => false,
    }
}

fn side_of(scenario: &Scenario, chan: ChannelId, user: UserId) -> Option<usize> {
    scenario.channel(chan).side_of(user)
}

/// Reconciles this side's HTLC records with the two current commitments:
/// a record state advances once both parties' commitments agree (the round
/// that changes it has fully completed). Returns payments whose refund
/// completion this call observed (their abort is accounted at this step).
fn reconcile_recs(scenario: &Scenario, gs: &mut GlobalState, chan: ChannelId, side: usize) -> Vec<PaymentId> {
    let mut aborted = Vec::new();
    let (my_number, other_number, my_set, other_set) = {
        let pc = gs.channels[chan.0 as usize].proto();
        (
            pc.sides[side].number,
            pc.sides[1 - side].number,
            pc.sides[side].commit_htlcs.clone(),
            pc.sides[1 - side].commit_htlcs.clone(),
        )
    };
    if my_number != other_number {
        return aborted;
    }
    let sender_state = |gs: &GlobalState, p: PaymentId| -> Option<HtlcState> {
        let def = scenario.payment(p);
        let hop = def.hop_of_channel(chan)?;
        let (hs, _) = def.hop_users(scenario, hop);
        let s = side_of(scenario, chan, hs)?;
        gs.channels[chan.0 as usize].proto().sides[s].htlcs.get(&p).map(|r| r.state)
    };
    let keys: Vec<PaymentId> = gs.channels[chan.0 as usize].proto().sides[side].htlcs.keys().copied().collect();
    for p in keys {
        let in_both = my_set.contains(&p) && other_set.contains(&p);
        let in_neither = !my_set.contains(&p) && !other_set.contains(&p);
        let srec = sender_state(gs, p);
        let pc = gs.channels[chan.0 as usize].proto_mut();
        let rec = pc.sides[side].htlcs.get_mut(&p).unwrap();
        match rec.state {
            HtlcState::SentAdd if in_both => {
                rec.state = HtlcState::Committed;
                rec.add_received = true;
            }
            HtlcState::Fulfilled if in_neither => rec.state = HtlcState::Persisted,
            HtlcState::TimedOut if in_neither => {
                rec.state = HtlcState::Aborted;
                aborted.push(p);
            }
            HtlcState::Committed if in_neither => {
                // Removed while this side's view lagged: classify by the hop
                // sender's record.
                if matches!(srec, Some(HtlcState::Fulfilled) | Some(HtlcState::Persisted)) {
                    rec.state = HtlcState::Persisted;
                } else {
                    rec.state = HtlcState::Aborted;
                    aborted.push(p);
                }
            }
            _ => {}
        }
    }
    aborted
}

fn flip_aborted(gs: &mut GlobalState, payments: &[PaymentId]) {
    for p in payments {
        if gs.pay[p.0 as usize].status == PayStatus::Pending {
            gs.pay[p.0 as usize].status = PayStatus::Aborted;
        }
    }
}

/// Pending off-chain changes toward the next commitment, derived from the
/// per-side records. Returns (adds, credits, refunds) plus the set of sides
/// owning a change (the side that sent the update message initiates the
/// signing round, as in the underlying protocol).
fn pending_changes(
    scenario: &Scenario,
    gs: &GlobalState,
    chan: ChannelId,
) -> (Vec<PaymentId>, Vec<PaymentId>, Vec<PaymentId>, [bool; 2]) {
    let pc = gs.channels[chan.0 as usize].proto();
    let def = scenario.channel(chan);
    let base = &pc.sides[0].commit_htlcs;
    let mut adds = Vec::new();
    let mut credits = Vec::new();
    let mut refunds = Vec::new();
    let mut owners = [false, false];
    let no_new_adds = pc.sides.iter().any(|s| {
        matches!(s.phase, Phase::ShutdownInitiated | Phase::Closing)
    });

    let mut payments: Vec<PaymentId> = pc.sides[0].htlcs.keys().chain(pc.sides[1].htlcs.keys()).copied().collect();
    payments.sort();
    payments.dedup();
    for p in payments {
        let pdef = scenario.payment(p);
        let Some(hop) = pdef.hop_of_channel(chan) else { continue };
        let (hs, hr) = pdef.hop_users(scenario, hop);
        let (ss, rs) = (def.side_of(hs).unwrap(), def.side_of(hr).unwrap());
        let sender_rec = pc.sides[ss].htlcs.get(&p).map(|r| r.state);
        let recipient_rec = pc.sides[rs].htlcs.get(&p).map(|r| r.state);
        if base.contains(&p) {
            match sender_rec {
                Some(HtlcState::Fulfilled) => {
                    credits.push(p);
                    owners[rs] = true;
                }
                Some(HtlcState::TimedOut) => {
                    refunds.push(p);
                    owners[rs] = true;
                }
                _ => {}
            }
        } else if sender_rec == Some(HtlcState::SentAdd)
            && recipient_rec == Some(HtlcState::SentAdd)
            && pdef.expiries[hop] > gs.now()
            && !no_new_adds
        {
            adds.push(p);
            owners[ss] = true;
        }
    }
    (adds, credits, refunds, owners)
}

/// Applies a change set to a commitment content; None if balances would go
/// negative or the concurrency bound is exceeded.
fn apply_changes(
    scenario: &Scenario,
    chan: ChannelId,
    base: &Proposal,
    adds: &[PaymentId],
    credits: &[PaymentId],
    refunds: &[PaymentId],
    max_htlcs: usize,
) -> Option<Proposal> {
    let def = scenario.channel(chan);
    let mut balances = [base.balances[0] as i64, base.balances[1] as i64];
    let mut htlcs = base.htlcs.clone();
    for &p in credits {
        let pdef = scenario.payment(p);
        let hop = pdef.hop_of_channel(chan)?;
        let (_, hr) = pdef.hop_users(scenario, hop);
        if !htlcs.remove(&p) {
            return None;
        }
        balances[def.side_of(hr)?] += pdef.amount as i64;
    }
    for &p in refunds {
        let pdef = scenario.payment(p);
        let hop = pdef.hop_of_channel(chan)?;
        let (hs, _) = pdef.hop_users(scenario, hop);
        if !htlcs.remove(&p) {
            return None;
        }
        balances[def.side_of(hs)?] += pdef.amount as i64;
    }
    for &p in adds {
        let pdef = scenario.payment(p);
        let hop = pdef.hop_of_channel(chan)?;
        let (hs, _) = pdef.hop_users(scenario, hop);
        balances[def.side_of(hs)?] -= pdef.amount as i64;
        htlcs.insert(p);
    }
    if balances[0] < 0 || balances[1] < 0 || htlcs.len() > max_htlcs {
        return None;
    }
    Some(Proposal {
        number: base.number + 1,
        balances: [balances[0] as u32, balances[1] as u32],
        htlcs,
    })
}

/// All PaymentChannelUser sub-actions for one (channel, user) instance, in
/// catalog order.
pub fn channel_user_actions(
    scenario: &Scenario,
    gs: &GlobalState,
    chan: ChannelId,
    user: UserId,
    out: &mut Vec<Step<GlobalState>>,
) {
    let Some(side) = side_of(scenario, chan, user) else { return };
    let def = scenario.channel(chan);
    let pc = gs.channels[chan.0 as usize].proto();
    let me = &pc.sides[side];
    let funder = side == 0;
    let tag = |extra: &str| {
        if extra.is_empty() {
            format!("chan={chan} user={user}")
        } else {
            format!("chan={chan} user={user} {extra}")
        }
    };
    let head = pc.queues[1 - side].head().cloned();

    // --- opening ---

    if funder && me.phase == Phase::PreOpen {
        let mut next = gs.clone();
        {
            let npc = next.channels[chan.0 as usize].proto_mut();
            npc.queues[side].send(Msg::OpenChannel);
            npc.sides[side].phase = Phase::OpenSent;
        }
        emit(out, "SendOpenChannel", tag(""), next);
    }

    if !funder && me.phase == Phase::PreOpen && head == Some(Msg::OpenChannel) {
        let mut next = gs.clone();
        {
            let npc = next.channels[chan.0 as usize].proto_mut();
            npc.queues[1 - side].consume();
            npc.queues[side].send(Msg::AcceptChannel);
            npc.sides[side].phase = Phase::AcceptSent;
        }
        emit(out, "SendAcceptChannel", tag(""), next);
    }

    if funder && me.phase == Phase::OpenSent && head == Some(Msg::AcceptChannel) {
        let mut next = gs.clone();
        let deposit = build_deposit_tx(scenario, chan);
        let funding = build_funding_tx(scenario, chan, deposit.id);
        {
            let npc = next.channels[chan.0 as usize].proto_mut();
            npc.queues[1 - side].consume();
            npc.funding_txid = Some(funding.id);
            npc.sides[side].phase = Phase::FundingCreated;
        }
        emit(out, "CreateFundingTransaction", tag(""), next);
    }

    if funder && me.phase == Phase::FundingCreated && !me.first_commit_sig_sent {
        let mut next = gs.clone();
        {
            let npc = next.channels[chan.0 as usize].proto_mut();
            npc.queues[side].send(Msg::FirstCommitSig);
            npc.sides[side].first_commit_sig_sent = true;
        }
        emit(out, "SendSignedFirstCommitTransaction", tag(""), next);
    }

    if !funder && me.phase == Phase::AcceptSent && head == Some(Msg::FirstCommitSig) {
        let mut next = gs.clone();
        {
            let npc = next.channels[chan.0 as usize].proto_mut();
            npc.queues[1 - side].consume();
            npc.queues[side].send(Msg::FirstCommitReply);
            npc.sides[side].signed_by_other = true;
            npc.sides[side].signed_for_them = 0;
            npc.sides[side].phase = Phase::FirstCommitExchanged;
        }
        emit(out, "ReplyWithFirstCommitTransaction", tag(""), next);
    }

    if funder && me.phase == Phase::FundingCreated && head == Some(Msg::FirstCommitReply) {
        let mut next = gs.clone();
        {
            let npc = next.channels[chan.0 as usize].proto_mut();
            npc.queues[1 - side].consume();
            npc.sides[side].signed_by_other = true;
            npc.sides[side].signed_for_them = 0;
            npc.sides[side].phase = Phase::FirstCommitExchanged;
        }
        emit(out, "ReceiveCommitTransaction", tag(""), next);
    }

    if funder
        && me.phase == Phase::FirstCommitExchanged
        && me.signed_by_other
        && gs.external[user.0 as usize] >= def.capacity
        && pc.funding_txid.is_some_and(|id| !gs.ledger.contains_tx(id))
    {
        let deposit = build_deposit_tx(scenario, chan);
        let funding = build_funding_tx(scenario, chan, deposit.id);
        let mut next = gs.clone();
        if publish(&mut next, scenario, deposit, user) && publish(&mut next, scenario, funding, user) {
            next.external[user.0 as usize] -= def.capacity;
            next.channels[chan.0 as usize].proto_mut().sides[side].phase = Phase::FundingPublished;
            emit(out, "PublishFundingTransaction", tag(""), next);
        }
    }

    let funding_on_ledger = pc.funding_txid.is_some_and(|id| gs.ledger.contains_tx(id));
    if funding_on_ledger
        && ((funder && me.phase == Phase::FundingPublished)
            || (!funder && me.phase == Phase::FirstCommitExchanged))
    {
        let mut next = gs.clone();
        next.channels[chan.0 as usize].proto_mut().sides[side].phase = Phase::Open;
        emit(out, "NoteThatFundingTransactionPublished", tag(""), next);
    }

    // --- revocation key announcements ---

    if me.phase.operating() && !me.next_rev_sent {
        // Announced lazily: the counterparty only needs our next revocation
        // key once there is something to sign.
        let (_, _, _, owners) = pending_changes(scenario, gs, chan);
        if owners != [false, false] || pc.round_active {
            let mut next = gs.clone();
            {
                let npc = next.channels[chan.0 as usize].proto_mut();
                npc.queues[side].send(Msg::NextRevKey { number: npc.sides[side].number + 1 });
                npc.sides[side].next_rev_sent = true;
            }
            emit(out, "SendNewRevocationKey", tag(""), next);
        }
    }

    if let Some(Msg::NextRevKey { number }) = head {
        let mut next = gs.clone();
        {
            let npc = next.channels[chan.0 as usize].proto_mut();
            npc.queues[1 - side].consume();
            npc.sides[side].have_their_next_rev = true;
        }
        emit(out, "ReceiveNewRevocationKey", tag(&format!("number={number}")), next);
    }

    // --- commitment update rounds ---

    let close_published = published_close(scenario, gs, chan, pc).is_some();

    if me.phase.operating() && !close_published {
        // As round initiator, with pending changes this side announced.
        if !pc.round_active && me.have_their_next_rev {
            let (adds, credits, refunds, owners) = pending_changes(scenario, gs, chan);
            if owners[side] {
                let base = pc.sides[1 - side].current();
                if let Some(proposal) =
                    apply_changes(scenario, chan, &base, &adds, &credits, &refunds, scenario.max_htlcs_per_channel)
                {
                    let mut next = gs.clone();
                    {
                        let npc = next.channels[chan.0 as usize].proto_mut();
                        npc.round_active = true;
                        npc.sides[side].i_initiated = true;
                        npc.sides[side].signed_for_them = proposal.number;
                        npc.sides[side].sent_refund_remove = !refunds.is_empty();
                        npc.queues[side].send(Msg::CommitmentSigned { proposal });
                    }
                    emit(out, "SendSignedCommitment", tag(&format!("number={}", base.number + 1)), next);
                }
            }
        }
        // As round responder, owing the mirror signature.
        if me.owe_mirror && me.have_their_next_rev {
            let proposal = Proposal {
                number: pc.sides[1 - side].number + 1,
                balances: me.balances,
                htlcs: me.commit_htlcs.clone(),
            };
            let refund_in_round = me.htlcs.iter().any(|(p, r)| {
                r.state == HtlcState::TimedOut && !me.commit_htlcs.contains(p)
            });
            let mut next = gs.clone();
            {
                let npc = next.channels[chan.0 as usize].proto_mut();
                npc.sides[side].owe_mirror = false;
                npc.sides[side].signed_for_them = proposal.number;
                npc.sides[side].sent_refund_remove = refund_in_round;
                npc.queues[side].send(Msg::CommitmentSigned { proposal });
            }
            emit(out, "SendSignedCommitment", tag("mirror"), next);
        }
    }

    if let Some(Msg::CommitmentSigned { proposal }) = &head {
        if me.pending_recv.is_none() && proposal.number == me.number + 1 {
            let action = match me.phase {
                Phase::Open | Phase::ShutdownInitiated => Some("ReceiveSignedCommitment"),
                Phase::Closing => Some("ReceiveSignedCommitmentDuringClosing"),
                _ => None,
            };
            if let Some(action) = action {
                let mut next = gs.clone();
                {
                    let npc = next.channels[chan.0 as usize].proto_mut();
                    npc.queues[1 - side].consume();
                    npc.sides[side].pending_recv = Some(proposal.clone());
                }
                emit(out, action, tag(&format!("number={}", proposal.number)), next);
            }
        }
    }

    if me.phase.operating() && me.pending_recv.is_some() {
        let mut next = gs.clone();
        {
            let npc = next.channels[chan.0 as usize].proto_mut();
            let s = &mut npc.sides[side];
            let proposal = s.pending_recv.take().unwrap();
            s.olds.push(OldCommit { content: s.current(), revoked: true });
            s.revoked_own.insert(s.number);
            npc.queues[side].send(Msg::RevokeAndAck { number: s.number });
            let initiated = s.i_initiated;
            s.number = proposal.number;
            s.balances = proposal.balances;
            s.commit_htlcs = proposal.htlcs;
            s.next_rev_sent = false;
            s.signed_by_other = true;
            if !initiated {
                s.owe_mirror = true;
            }
        }
        if !close_published {
            let aborted = reconcile_recs(scenario, &mut next, chan, side);
            flip_aborted(&mut next, &aborted);
        }
        emit(out, "RevokeAndAck", tag(""), next);
    }

    if let Some(Msg::RevokeAndAck { number }) = head {
        let for_timedout = me.sent_refund_remove;
        let mut next = gs.clone();
        {
            let npc = next.channels[chan.0 as usize].proto_mut();
            npc.queues[1 - side].consume();
            npc.sides[side].their_secrets.insert(number);
            npc.sides[side].have_their_next_rev = false;
            npc.sides[side].sent_refund_remove = false;
            let round_done = !npc.sides[side].owe_mirror
                && npc.sides[side].pending_recv.is_none()
                && npc.sides[0].number == npc.sides[1].number;
            if round_done {
                npc.round_active = false;
                npc.sides[0].i_initiated = false;
                npc.sides[1].i_initiated = false;
            }
        }
        if !close_published {
            let aborted = reconcile_recs(scenario, &mut next, chan, side);
            flip_aborted(&mut next, &aborted);
        }
        let action = if for_timedout { "ReceiveRevocationKeyForTimedoutHTLC" } else { "ReceiveRevocationKey" };
        emit(out, action, tag(&format!("number={number}")), next);
    }

    // --- closing ---

    if matches!(me.phase, Phase::FundingPublished | Phase::Open | Phase::ShutdownInitiated | Phase::Closing)
        && funding_on_ledger
        && me.signed_by_other
        && !close_published
    {
        let funding_txid = pc.funding_txid.unwrap();
        let (tx, _) = build_commitment_tx(scenario, chan, funding_txid, side, &me.current());
        if validate_transaction(&tx, &gs.ledger, scenario.flaws).is_ok() {
            let on_chain: std::collections::BTreeSet<PaymentId> = me.commit_htlcs.clone();
            let mut next = gs.clone();
            if publish(&mut next, scenario, tx, user) {
                next.channels[chan.0 as usize].proto_mut().sides[side].phase = Phase::ClosedOnChain;
                // Announced HTLCs absent from the published commitment die
                // with the close.
                let mut dropped = Vec::new();
                for (p, pdef) in scenario.payments.iter().enumerate() {
                    let p = PaymentId(p as u8);
                    let Some(hop) = pdef.hop_of_channel(chan) else { continue };
                    let (hs, _) = pdef.hop_users(scenario, hop);
                    let announced = scenario
                        .channel(chan)
                        .side_of(hs)
                        .and_then(|ss| next.channels[chan.0 as usize].proto().sides[ss].htlcs.get(&p))
                        .is_some_and(|r| r.state == HtlcState::SentAdd);
                    if announced && !on_chain.contains(&p) {
                        dropped.push(p);
                    }
                }
                flip_aborted(&mut next, &dropped);
                emit(out, "CloseChannel", tag(&format!("number={}", me.number)), next);
            }
        }
    }

    if !gs.honest[user.0 as usize] && funding_on_ledger && !close_published {
        let funding_txid = pc.funding_txid.unwrap();
        for old in &me.olds {
            let (tx, _) = build_commitment_tx(scenario, chan, funding_txid, side, &old.content);
            if validate_transaction(&tx, &gs.ledger, scenario.flaws).is_ok() {
                let mut next = gs.clone();
                if publish(&mut next, scenario, tx, user) {
                    next.channels[chan.0 as usize].proto_mut().sides[side].phase = Phase::ClosedOnChain;
                    emit(out, "Cheat", tag(&format!("number={}", old.content.number)), next);
                }
            }
        }
    }

    // Punishment requires actually holding the published commitment's
    // revocation secret; the earlier classification of the close does not
    // gate it (the secret may have still been in flight when noting).
    if me.phase.closed() {
        if let Some(cl) = published_close(scenario, gs, chan, pc) {
            if cl.side != side && me.their_secrets.contains(&cl.number) {
                let tx = build_punish_tx(
                scenario,
                chan,
                &gs.ledger,
                cl.tx,
                cl.side,
                cl.number,
                user,
                    scenario.flaws.punish_commitment_outputs_only,
                );
                if !tx.inputs.is_empty() && validate_transaction(&tx, &gs.ledger, scenario.flaws).is_ok() {
                    let mut next = gs.clone();
                    if publish(&mut next, scenario, tx, user) {
                        emit(out, "Punish", tag(&format!("number={}", cl.number)), next);
                    }
                }
            }
        }
    }

    if !me.phase.closed() {
        if let Some(cl) = published_close(scenario, gs, chan, pc) {
            if cl.side != side {
                let secret_incoming = pc.queues[1 - side].items.iter().any(
                    |(_, m)| matches!(m, Msg::RevokeAndAck { number } if *number == cl.number),
                );
                let kind = if me.their_secrets.contains(&cl.number) || secret_incoming {
                    CloseKind::Dishonest
                } else if cl.number < me.signed_for_them {
                    CloseKind::Unpunishable
                } else {
                    CloseKind::Honest
                };
                let (action, phase) = match kind {
                    CloseKind::Honest => ("NoteThatOtherPartyClosedHonestly", Phase::ClosedOnChain),
                    CloseKind::Unpunishable => {
                        ("NoteThatOtherPartyClosedButUnpunishable", Phase::ClosedOnChain)
                    }
                    CloseKind::Dishonest => ("NoteThatOtherPartyClosedDishonestly", Phase::Punishing),
                };
                let mut next = gs.clone();
                {
                    let s = &mut next.channels[chan.0 as usize].proto_mut().sides[side];
                    s.noted_close = Some(kind);
                    s.phase = phase;
                }
                emit(out, action, tag(&format!("number={}", cl.number)), next);
            }
        }
    }

    // --- post-close record synchronization ---

    if me.phase.closed() && !me.htlc_noted {
        if let Some(cl) = published_close(scenario, gs, chan, pc) {
            let mut next = gs.clone();
            {
                // Which HTLC outputs the published commitment carries, and
                // whether each is still unspent.
                let mut live_on_chain: std::collections::BTreeSet<PaymentId> = Default::default();
                let mut on_chain: std::collections::BTreeSet<PaymentId> = Default::default();
                for (i, output) in cl.tx.outputs.iter().enumerate() {
                    if let Some(p) = output.conditions.iter().find_map(|c| match c {
                        crate::ledger::SpendingCondition::SigsWithPreimage(_, p) => Some(*p),
                        _ => None,
                    }) {
                        on_chain.insert(p);
                        if gs.ledger.is_unspent((cl.tx.id, i as u32)) {
                            live_on_chain.insert(p);
                        }
                    }
                }
                let s = &mut next.channels[chan.0 as usize].proto_mut().sides[side];
                for (p, rec) in s.htlcs.iter_mut() {
                    if live_on_chain.contains(p) {
                        // The output is live whatever this side believed:
                        // stale local marks are overruled by the chain. A
                        // refunded HTLC resurfaces as expired, a settled one
                        // as claimable.
                        match rec.state {
                            HtlcState::SentAdd => rec.state = HtlcState::Committed,
                            HtlcState::Aborted => rec.state = HtlcState::TimedOut,
                            HtlcState::Persisted => rec.state = HtlcState::Fulfilled,
                            _ => {}
                        }
                    } else if !on_chain.contains(p) {
                        match rec.state {
                            HtlcState::SentAdd | HtlcState::Committed => rec.state = HtlcState::Aborted,
                            HtlcState::Fulfilled => rec.state = HtlcState::Persisted,
                            HtlcState::TimedOut => rec.state = HtlcState::Aborted,
                            _ => {}
                        }
                    }
                }
                s.htlc_noted = true;
            }
            emit(out, "NoteCommittedAndUncommittedAndPersistedHTLCs", tag(""), next);
        }
    }

    if me.phase.closed() {
        note_onchain_htlc_sync(scenario, gs, chan, user, side, out);
    }

    // --- on-chain HTLC redemption ---

    if let Some(cl) = published_close(scenario, gs, chan, pc) {
        redeem_htlc_after_close(scenario, gs, chan, user, side, &cl, out);
    }

    if me.noted_close == Some(CloseKind::Dishonest) && !me.will_punish_later {
        let derived = derive_all(scenario, gs);
        if derived[chan.0 as usize].punish_pending {
            let mut next = gs.clone();
            next.channels[chan.0 as usize].proto_mut().sides[side].will_punish_later = true;
            emit(out, "WillPunishLater", tag(""), next);
        }
    }

    // --- cooperative shutdown ---

    if me.phase == Phase::Open && !pc.round_active {
        // Shutdown may not be sent while updates are pending; committed
        // HTLCs still resolve during the Closing phase.
        let (adds, credits, refunds, _) = pending_changes(scenario, gs, chan);
        let no_announced = pc.sides.iter().all(|s| {
            s.htlcs.values().all(|r| r.state != HtlcState::SentAdd)
        });
        if adds.is_empty() && credits.is_empty() && refunds.is_empty() && no_announced {
            let mut next = gs.clone();
            {
                let npc = next.channels[chan.0 as usize].proto_mut();
                npc.queues[side].send(Msg::Shutdown);
                npc.sides[side].phase = Phase::ShutdownInitiated;
            }
            emit(out, "InitiateShutdown", tag(""), next);
        }
    }

    if head == Some(Msg::Shutdown) && matches!(me.phase, Phase::Open | Phase::ShutdownInitiated) {
        let mut next = gs.clone();
        {
            let npc = next.channels[chan.0 as usize].proto_mut();
            npc.queues[1 - side].consume();
            if npc.sides[side].phase == Phase::Open {
                npc.queues[side].send(Msg::Shutdown);
            }
            npc.sides[side].phase = Phase::Closing;
        }
        emit(out, "ReceiveInitiateShutdown", tag(""), next);
    }

    if let Some(msg) = &head {
        // Revocation secrets and key announcements stay consumable in every
        // phase; everything protocol-level that nothing will consume anymore
        // can be dropped.
        let droppable = !msg.htlc_layer()
            && !matches!(msg, Msg::RevokeAndAck { .. } | Msg::NextRevKey { .. })
            && (me.phase.closed()
                || (me.phase == Phase::Closing && matches!(msg, Msg::Shutdown | Msg::OpenChannel | Msg::AcceptChannel | Msg::FirstCommitSig | Msg::FirstCommitReply)));
        if droppable {
            let mut next = gs.clone();
            next.channels[chan.0 as usize].proto_mut().queues[1 - side].consume();
            emit(out, "IgnoreMessageDuringClosing", tag(&format!("kind={}", msg.kind_name())), next);
        }
    }

    // --- aborting a hopeless announced HTLC ---

    if !close_published && !pc.round_active {
        for (&p, rec) in &me.htlcs {
            if rec.state != HtlcState::SentAdd {
                continue;
            }
            // Hopeless only if no commitment anywhere carries it: a version
            // signed mid-round can still surface on-chain.
            if pc.sides.iter().any(|s| s.commit_htlcs.contains(&p)) {
                continue;
            }
            let pdef = scenario.payment(p);
            let Some(hop) = pdef.hop_of_channel(chan) else { continue };
            if is_hop_sender(scenario, p, chan, user) && pdef.expiries[hop] <= gs.now() {
                let mut next = gs.clone();
                next.channels[chan.0 as usize]
                    .proto_mut()
                    .sides[side]
                    .htlcs
                    .get_mut(&p)
                    .unwrap()
                    .state = HtlcState::Aborted;
                flip_aborted(&mut next, &[p]);
                emit(out, "NoteAbortedHTLCs", tag(&format!("payment={p}")), next);
            }
        }
    }

    // --- settlement ---

    if me.phase.closed()
        && me.phase != Phase::Done
        && me.htlc_noted
        && me.htlcs.values().all(|r| r.state.terminal())
    {
        settle(scenario, gs, chan, user, side, out);
    }
}

fn note_onchain_htlc_sync(
    scenario: &Scenario,
    gs: &GlobalState,
    chan: ChannelId,
    user: UserId,
    side: usize,
    out: &mut Vec<Step<GlobalState>>,
) {
    let pc = gs.channels[chan.0 as usize].proto();
    let me = &pc.sides[side];
    let Some(cl) = published_close(scenario, gs, chan, pc) else { return };
    if !me.htlc_noted {
        return;
    }
    let tag = |extra: &str| format!("chan={chan} user={user} {extra}");
    for (i, output) in cl.tx.outputs.iter().enumerate() {
        let Some(p) = output.conditions.iter().find_map(|c| match c {
            crate::ledger::SpendingCondition::SigsWithPreimage(_, p) => Some(*p),
            _ => None,
        }) else {
            continue;
        };
        let Some(rec) = me.htlcs.get(&p) else { continue };
        let spend = spend_kind(gs, (cl.tx.id, i as u32));
        match spend {
            Some(SpendKind::Success) if rec.state != HtlcState::RedeemedOnChain => {
                let mut next = gs.clone();
                next.channels[chan.0 as usize].proto_mut().sides[side].htlcs.get_mut(&p).unwrap().state =
                    HtlcState::RedeemedOnChain;
                emit(out, "NoteThatHTLCFulfilledOnChain", tag(&format!("payment={p}")), next);
            }
            Some(SpendKind::Timeout) if rec.state != HtlcState::Aborted => {
                let mut next = gs.clone();
                next.channels[chan.0 as usize].proto_mut().sides[side].htlcs.get_mut(&p).unwrap().state =
                    HtlcState::Aborted;
                emit(out, "NoteThatHTLCTimedOutOnChain", tag(&format!("payment={p}")), next);
            }
            Some(SpendKind::Punished) if rec.state != HtlcState::PunishedOnChain => {
                let action = if pc.sides[side].noted_close == Some(CloseKind::Dishonest) {
                    "NotePunishedHTLCs"
                } else {
                    "UpdatePunishedHTLCs"
                };
                let mut next = gs.clone();
                next.channels[chan.0 as usize].proto_mut().sides[side].htlcs.get_mut(&p).unwrap().state =
                    HtlcState::PunishedOnChain;
                emit(out, action, tag(&format!("payment={p}")), next);
            }
            _ => {}
        }
    }
}

enum SpendKind {
    Punished,
    Success,
    Timeout,
}

fn spend_kind(gs: &GlobalState, op: (crate::ledger::TxId, u32)) -> Option<SpendKind> {
    for tx in &gs.ledger.published {
        for input in &tx.inputs {
            if (input.prev_tx, input.output_index) == op {
                if input.witness.revocation_secret.is_some() {
                    return Some(SpendKind::Punished);
                }
                if tx.locktime.0 > 0 {
                    return Some(SpendKind::Timeout);
                }
                return Some(SpendKind::Success);
            }
        }
    }
    None
}

fn redeem_htlc_after_close(
    scenario: &Scenario,
    gs: &GlobalState,
    chan: ChannelId,
    user: UserId,
    side: usize,
    cl: &crate::derive::PublishedClose<'_>,
    out: &mut Vec<Step<GlobalState>>,
) {
    let pc = gs.channels[chan.0 as usize].proto();
    let me = &pc.sides[side];
    if me.phase == Phase::Done {
        return;
    }
    let tag = |extra: &str| format!("chan={chan} user={user} {extra}");
    let cheat_close = pc.sides[cl.side].revoked_own.contains(&cl.number);
    for (i, output) in cl.tx.outputs.iter().enumerate() {
        let Some(p) = output.conditions.iter().find_map(|c| match c {
            crate::ledger::SpendingCondition::SigsWithPreimage(_, p) => Some(*p),
            _ => None,
        }) else {
            continue;
        };
        let op = (cl.tx.id, i as u32);
        if !gs.ledger.is_unspent(op) {
            continue;
        }
        let pdef = scenario.payment(p);
        let knows = gs.pay[p.0 as usize].known.contains(&user);

        // Success path: the hop recipient redeems with the pre-signed
        // success transaction (locktime 0) carrying the preimage.
        if is_hop_recipient(scenario, p, chan, user)
            && knows
            && me.htlcs.get(&p).is_some_and(|r| matches!(r.state, HtlcState::Committed | HtlcState::Fulfilled))
        {
            let claim = build_htlc_success_tx(scenario, chan, cl.tx, cl.side, cl.number, i as u32, p, true);
            if validate_transaction(&claim.tx, &gs.ledger, scenario.flaws).is_ok() {
                let mut next = gs.clone();
                if publish(&mut next, scenario, claim.tx, user) {
                    next.channels[chan.0 as usize].proto_mut().sides[side].htlcs.get_mut(&p).unwrap().state =
                        HtlcState::RedeemedOnChain;
                    if !cheat_close
                        && pdef.recipient == user
                        && next.pay[p.0 as usize].status == PayStatus::Pending
                    {
                        next.pay[p.0 as usize].status = PayStatus::Processed;
                    }
                    emit(out, "RedeemHTLCAfterClose", tag(&format!("payment={p} path=success")), next);
                }
            }
        }

        // Replayed second flaw: a dishonest recipient publishes the success
        // transaction without the preimage once the absolute timelock has
        // passed; under conflated disjuncts the ledger accepts it.
        if scenario.flaws.conflate_disjuncts
            && !gs.honest[user.0 as usize]
            && is_hop_recipient(scenario, p, chan, user)
            && !knows
            && gs.now() >= pdef.expiries[pdef.hop_of_channel(chan).unwrap()]
            && me.htlcs.get(&p).is_some_and(|r| matches!(r.state, HtlcState::Committed | HtlcState::Fulfilled))
        {
            let claim = build_htlc_success_tx(scenario, chan, cl.tx, cl.side, cl.number, i as u32, p, false);
            if validate_transaction(&claim.tx, &gs.ledger, scenario.flaws).is_ok() {
                let mut next = gs.clone();
                if publish(&mut next, scenario, claim.tx, user) {
                    next.channels[chan.0 as usize].proto_mut().sides[side].htlcs.get_mut(&p).unwrap().state =
                        HtlcState::RedeemedOnChain;
                    emit(out, "RedeemHTLCAfterClose", tag(&format!("payment={p} path=success-nopreimage")), next);
                }
            }
        }

        // Timeout path: the hop sender refunds after expiry with a
        // transaction whose locktime equals the expiry.
        if is_hop_sender(scenario, p, chan, user)
            && gs.now() >= pdef.expiries[pdef.hop_of_channel(chan).unwrap()]
        {
            let claim = build_htlc_timeout_tx(scenario, chan, cl.tx, cl.side, cl.number, i as u32, p);
            if validate_transaction(&claim.tx, &gs.ledger, scenario.flaws).is_ok() {
                let mut next = gs.clone();
                if publish(&mut next, scenario, claim.tx, user) {
                    if let Some(r) = next.channels[chan.0 as usize].proto_mut().sides[side].htlcs.get_mut(&p) {
                        r.state = HtlcState::Aborted;
                    }
                    if !cheat_close && next.pay[p.0 as usize].status == PayStatus::Pending {
                        next.pay[p.0 as usize].status = PayStatus::Aborted;
                    }
                    emit(out, "RedeemHTLCAfterClose", tag(&format!("payment={p} path=timeout")), next);
                }
            }
        }
    }
}

fn settle(
    scenario: &Scenario,
    gs: &GlobalState,
    chan: ChannelId,
    user: UserId,
    side: usize,
    out: &mut Vec<Step<GlobalState>>,
) {
    let pc = gs.channels[chan.0 as usize].proto();
    let Some(funding) = pc.funding_txid else { return };
    let def = scenario.channel(chan);
    let graph = crate::derive::channel_tx_ids(gs, funding);
    let mut ops = Vec::new();
    let mut total = 0;
    let mut contested_mine = false;
    for tx in &gs.ledger.published {
        if !graph.contains(&tx.id) {
            continue;
        }
        for (i, output) in tx.outputs.iter().enumerate() {
            let op = (tx.id, i as u32);
            if !gs.ledger.is_unspent(op) {
                continue;
            }
            let mut mine = false;
            let mut contested_by_other = false;
            let mut entitled_to_me = false;
            for cond in &output.conditions {
                match cond {
                    crate::ledger::SpendingCondition::SingleSig(k) if k.owner == user => mine = true,
                    crate::ledger::SpendingCondition::RevocationSig(k) => {
                        if let crate::ledger::KeyPurpose::Revocation(c, n) = k.purpose {
                            if c == chan {
                                if let Some(pub_side) = def.side_of(k.owner) {
                                    if pc.sides[pub_side].revoked_own.contains(&n) {
                                        if def.users[1 - pub_side] == user {
                                            entitled_to_me = true;
                                        } else {
                                            contested_by_other = true;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    _ => {}
                }
            }
            if entitled_to_me && !mine {
                contested_mine = true;
            }
            if mine && !contested_by_other {
                ops.push(op);
                total += output.amount;
            }
        }
    }
    if contested_mine {
        // Punishment work remains: sweep before settling. When the sweep is
        // impossible (the flawed punishment shape against a pre-spent
        // output), settlement proceeds with what this user can still reach.
        if let Some(cl) = published_close(scenario, gs, chan, pc) {
            let punish = crate::txbuild::build_punish_tx(
                scenario,
                chan,
                &gs.ledger,
                cl.tx,
                cl.side,
                cl.number,
                user,
                scenario.flaws.punish_commitment_outputs_only,
            );
            if !punish.inputs.is_empty()
                && crate::ledger::validate_transaction(&punish, &gs.ledger, scenario.flaws).is_ok()
            {
                return;
            }
        }
    }
    let mut next = gs.clone();
    let ledger = std::sync::Arc::make_mut(&mut next.ledger);
    for op in ops {
        ledger.withdrawn.insert(op);
    }
    next.external[user.0 as usize] += total;
    next.channels[chan.0 as usize].proto_mut().sides[side].phase = Phase::Done;
    emit(
        out,
        "NoteThatChannelClosedAndAllHTLCsRedeemed",
        format!("chan={chan} user={user} settled={total}"),
        next,
    );
}

/// Clock steps: the plain single-step clock and the optimized variant that
/// jumps to the next relevant point in time. Both respect the
/// honest-deadline guard.
pub fn time_actions(scenario: &Scenario, gs: &GlobalState, out: &mut Vec<Step<GlobalState>>) {
    if gs.now() >= scenario.max_time {
        return;
    }
    let derived = derive_all(scenario, gs);
    match scenario.time_variant {
        crate::state::TimeVariant::Regular => {
            let t = crate::ids::BlockHeight(gs.now().0 + 1);
            if !advance_blocked(scenario, gs, &derived, t) {
                let mut next = gs.clone();
                std::sync::Arc::make_mut(&mut next.ledger).time = t;
                emit(out, "AdvanceLedgerTime", format!("to={t}"), next);
            }
        }
        crate::state::TimeVariant::Optimized => {
            let locks = crate::derive::pending_locks(scenario, &derived);
            let t = if scenario.broken_skip {
                scenario.max_time
            } else {
                locks
                    .into_iter()
                    .find(|&e| e > gs.now())
                    .filter(|&e| e < scenario.max_time)
                    .unwrap_or(scenario.max_time)
            };
            if !advance_blocked(scenario, gs, &derived, t) {
                let mut next = gs.clone();
                std::sync::Arc::make_mut(&mut next.ledger).time = t;
                emit(out, "OptimizedAdvanceLedgerTime", format!("to={t}"), next);
            }
        }
    }
}

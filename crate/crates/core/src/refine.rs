//! Refinement mappings and abstract sides.
//!
//! Two mappings are built here. The protocol-to-ideal mapping sends a
//! protocol-machine state to the ideal-machine state whose channels are the
//! derived views: commitment-round progress collapses to ideal update steps
//! at round completion, protocol messages vanish, and everything else maps
//! through unchanged. The network mapping sends an ideal-machine state to
//! the four-variable idealized payment network: live HTLC value is
//! attributed to the hop sender until the payment is processed and to the
//! hop recipient afterwards, so the recipient's first preimage release is
//! the one step that maps to ProcessPayment.

use crate::checker::AbstractSide;
use crate::derive::{derive_all, network_balances};
use crate::encode::Canon;
use crate::ideal_network::{is_next_step, net_vars, satisfies_init, IdealNetworkState, PaymentRec};
use crate::ids::PaymentId;
use crate::ledger::LedgerState;
use crate::spec::GlobalModel;
use crate::state::{ChannelSt, GlobalState, IdealChannelSt, MsgQueue, PayStatus, Scenario};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Mutex;

/// Maps a composed-spec state onto the idealized payment network.
pub fn map_to_network(scenario: &Scenario, gs: &GlobalState) -> IdealNetworkState {
    let derived = derive_all(scenario, gs);
    let balances = network_balances(scenario, gs, &derived);
    let mut payments = BTreeSet::new();
    for (i, ps) in gs.pay.iter().enumerate() {
        if ps.status == PayStatus::Pending {
            let def = &scenario.payments[i];
            payments.insert(PaymentRec { amount: def.amount, sender: def.sender, recipient: def.recipient });
        }
    }
    IdealNetworkState {
        external_balances: gs.external.iter().map(|&e| e as i64).collect(),
        balances,
        payments,
        honest: gs.honest.clone(),
    }
}

/// The idealized payment network as the abstract side of a refinement.
pub struct NetworkAbstract;

impl AbstractSide for NetworkAbstract {
    type State = IdealNetworkState;

    fn satisfies_init(&self, s: &IdealNetworkState) -> bool {
        satisfies_init(s)
    }

    fn is_step(&self, pre: &IdealNetworkState, post: &IdealNetworkState) -> bool {
        is_next_step(pre, post)
    }

    fn state_vars(&self, s: &IdealNetworkState) -> BTreeMap<String, String> {
        net_vars(s)
    }
}

/// Renumbers queue sequence counters into a canonical form so that mapped
/// protocol states and natively reached ideal states compare equal.
pub fn normalize_ideal(gs: &GlobalState) -> GlobalState {
    let mut out = gs.clone();
    for ch in &mut out.channels {
        for q in ch.queues_mut().iter_mut() {
            let msgs: Vec<_> = q.items.drain(..).map(|(_, m)| m).collect();
            q.next_seq = msgs.len() as u32;
            q.items = msgs.into_iter().enumerate().map(|(i, m)| (i as u32, m)).collect();
        }
    }
    out
}

/// Maps a protocol-machine state onto the ideal-machine state over the twin
/// scenario.
pub fn map_proto_to_ideal(scenario: &Scenario, gs: &GlobalState) -> GlobalState {
    let derived = derive_all(scenario, gs);
    let channels = derived
        .into_iter()
        .map(|dc| {
            let mut queues = [MsgQueue::default(), MsgQueue::default()];
            for d in 0..2 {
                for m in &dc.queue_msgs[d] {
                    queues[d].send(m.clone());
                }
            }
            ChannelSt::Ideal(IdealChannelSt {
                phase: dc.phase,
                balances: dc.balances,
                htlcs: dc.htlcs,
                pots: dc.pots,
                settled: dc.settled,
                cheater: dc.cheater,
                will_punish_later: dc.wpl,
                queues,
            })
        })
        .collect();
    GlobalState {
        ledger: std::sync::Arc::new(LedgerState { time: gs.ledger.time, ..LedgerState::default() }),
        external: gs.external.clone(),
        honest: gs.honest.clone(),
        pay: gs.pay.clone(),
        mock_used: gs.mock_used.clone(),
        channels,
    }
}

/// The ideal-machine specification as the abstract side of a refinement.
/// Step membership is decided by enumerating the ideal machine's successors
/// of the mapped pre-state (normalized), with memoization.
pub struct IdealAbstract {
    pub model: GlobalModel,
    cache: Mutex<HashMap<u64, BTreeSet<Vec<u8>>>>,
    inits: BTreeSet<Vec<u8>>,
}

impl IdealAbstract {
    pub fn new(model: GlobalModel) -> Self {
        use crate::checker::Model;
        let inits = model
            .init_states()
            .iter()
            .map(|s| normalize_ideal(s).canon_bytes())
            .collect();
        IdealAbstract { model, cache: Mutex::new(HashMap::new()), inits }
    }
}

impl AbstractSide for IdealAbstract {
    type State = GlobalState;

    fn satisfies_init(&self, s: &GlobalState) -> bool {
        self.inits.contains(&normalize_ideal(s).canon_bytes())
    }

    fn is_step(&self, pre: &GlobalState, post: &GlobalState) -> bool {
        use crate::checker::Model;
        let fp = pre.fingerprint();
        if let Some(set) = self.cache.lock().unwrap().get(&fp) {
            return set.contains(&post.canon_bytes());
        }
        let set: BTreeSet<Vec<u8>> = self
            .model
            .successors(pre)
            .into_iter()
            .map(|st| normalize_ideal(&st.state).canon_bytes())
            .collect();
        let hit = set.contains(&post.canon_bytes());
        self.cache.lock().unwrap().insert(fp, set);
        hit
    }

    fn state_vars(&self, s: &GlobalState) -> BTreeMap<String, String> {
        use crate::checker::Model;
        self.model.state_vars(s)
    }
}

/// Convenience: which payments are still externally pending.
pub fn pending_set(gs: &GlobalState) -> BTreeSet<PaymentId> {
    gs.pending_payments()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checker::Model;
    use crate::spec::{build_scenario, ideal_twin, GlobalModel, SpecConfig, SpecId};

    fn walk(model: &GlobalModel, gs: &GlobalState, action: &str, params_has: &str) -> GlobalState {
        let steps = model.successors(gs);
        let hit = steps
            .into_iter()
            .find(|s| s.action == action && s.params.contains(params_has))
            .unwrap_or_else(|| panic!("no step {action} {params_has}"));
        hit.state
    }

    #[test]
    fn close_with_announced_htlc_maps_to_ideal_commit() {
        let cfg = SpecConfig {
            id: Some(SpecId::IV),
            honesty: Some(vec![vec![false, true]]),
            ..Default::default()
        };
        let scenario = build_scenario(&cfg).unwrap();
        let model = GlobalModel::new(scenario);
        let sc = model.scenario.clone();
        let mut gs = model.init_states()[0].clone();
        for (a, p) in [
            ("SendOpenChannel", ""),
            ("SendAcceptChannel", ""),
            ("CreateFundingTransaction", ""),
            ("SendSignedFirstCommitTransaction", ""),
            ("ReplyWithFirstCommitTransaction", ""),
            ("ReceiveCommitTransaction", ""),
            ("PublishFundingTransaction", ""),
            ("NoteThatFundingTransactionPublished", "user=Alice"),
            ("AddNewForwardedPayment", ""),
            ("AddAndSendOutgoingHTLC", ""),
        ] {
            gs = walk(&model, &gs, a, p);
        }
        let pre = map_proto_to_ideal(&sc, &gs);
        let closed = walk(&model, &gs, "CloseChannel", "user=Alice");
        let post = map_proto_to_ideal(&sc, &closed);
        {
            let twin2 = ideal_twin(&sc);
            let am = GlobalModel::new(twin2);
            for s in am.successors(&pre) {
                if s.action == "CommitHTLCsOnChain" && s.params.contains("current") {
                    let n = normalize_ideal(&s.state);
                    if n != post {
                        eprintln!("IDEAL: {n:#?}");
                        eprintln!("WANT:  {post:#?}");
                    }
                }
            }
        }

        let twin = ideal_twin(&sc);
        let abstract_model = GlobalModel::new(twin);
        let succs = abstract_model.successors(&pre);
        for s in &succs {
            let n = normalize_ideal(&s.state);
            if s.action == "CommitHTLCsOnChain" {
                eprintln!("ideal {} {} -> {:?}", s.action, s.params, abstract_model.state_vars(&n));
            }
        }
        eprintln!("want post: {:?}", abstract_model.state_vars(&post));
        let side = IdealAbstract::new(abstract_model);
        assert!(side.is_step(&pre, &post), "close must map to ideal commit");
    }
}

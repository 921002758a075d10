//! An explorable model of the idealized payment network, instrumented with
//! the history the honest-user correctness bound needs (initial externals,
//! processed amounts received, removed amounts sent).

use crate::checker::{Invariant, Model, Step};
use crate::encode::Canon;
use crate::ids::UserId;
use crate::ideal_network::{
    net_vars, successors, IdealNetworkState, NetAction, PaymentRec,
};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct NetState {
    pub core: IdealNetworkState,
    pub initial_external: Vec<i64>,
    pub recv_processed: Vec<i64>,
    pub sent_removed: Vec<i64>,
}

impl Canon for NetState {
    fn encode(&self, out: &mut Vec<u8>) {
        self.core.encode(out);
        self.initial_external.encode(out);
        self.recv_processed.encode(out);
        self.sent_removed.encode(out);
    }
}

/// Enumeration bounds for initial states.
#[derive(Debug, Clone)]
pub struct NetBounds {
    pub num_users: usize,
    pub max_external: i64,
    pub max_payments: usize,
    pub max_amount: u32,
}

impl Default for NetBounds {
    fn default() -> Self {
        NetBounds { num_users: 2, max_external: 3, max_payments: 2, max_amount: 2 }
    }
}

pub struct NetModel {
    pub bounds: NetBounds,
}

impl NetModel {
    pub fn new(bounds: NetBounds) -> Self {
        NetModel { bounds }
    }

    /// The payment-record universe: positive amounts, distinct users
    /// (degenerate self-payments and zero amounts are excluded by the
    /// scenario seeds; they would only inflate the state space).
    fn payment_universe(&self) -> Vec<PaymentRec> {
        let mut out = Vec::new();
        for amount in 1..=self.bounds.max_amount {
            for s in 0..self.bounds.num_users as u8 {
                for r in 0..self.bounds.num_users as u8 {
                    if s != r {
                        out.push(PaymentRec { amount, sender: UserId(s), recipient: UserId(r) });
                    }
                }
            }
        }
        out
    }
}

fn payment_subsets(universe: &[PaymentRec], max: usize) -> Vec<BTreeSet<PaymentRec>> {
    let mut out: Vec<BTreeSet<PaymentRec>> = vec![BTreeSet::new()];
    for &p in universe {
        let mut more = Vec::new();
        for s in &out {
            if s.len() < max {
                let mut t = s.clone();
                t.insert(p);
                more.push(t);
            }
        }
        out.extend(more);
    }
    out
}

impl Model for NetModel {
    type State = NetState;

    fn init_states(&self) -> Vec<NetState> {
        let n = self.bounds.num_users;
        let mut externals: Vec<Vec<i64>> = vec![vec![]];
        for _ in 0..n {
            let mut more = Vec::new();
            for e in &externals {
                for v in 0..=self.bounds.max_external {
                    let mut t = e.clone();
                    t.push(v);
                    more.push(t);
                }
            }
            externals = more;
        }
        let mut honesties: Vec<Vec<bool>> = vec![vec![]];
        for _ in 0..n {
            let mut more = Vec::new();
            for h in &honesties {
                for v in [true, false] {
                    let mut t = h.clone();
                    t.push(v);
                    more.push(t);
                }
            }
            honesties = more;
        }
        let subsets = payment_subsets(&self.payment_universe(), self.bounds.max_payments);

        let mut out = Vec::new();
        for ext in &externals {
            for pays in &subsets {
                for honest in &honesties {
                    let core = crate::ideal_network::init_network(n, ext, pays, honest)
                        .expect("seeds within bounds");
                    out.push(NetState {
                        core,
                        initial_external: ext.clone(),
                        recv_processed: vec![0; n],
                        sent_removed: vec![0; n],
                    });
                }
            }
        }
        out
    }

    fn successors(&self, s: &NetState) -> Vec<Step<NetState>> {
        let mut raw = Vec::new();
        successors(&s.core, &mut raw);
        raw.into_iter()
            .map(|(action, core)| {
                let mut next = NetState { core, ..s.clone() };
                match action {
                    NetAction::Process { payment } => {
                        next.sent_removed[payment.sender.0 as usize] += payment.amount as i64;
                        next.recv_processed[payment.recipient.0 as usize] += payment.amount as i64;
                    }
                    NetAction::Abort { payment } => {
                        next.sent_removed[payment.sender.0 as usize] += payment.amount as i64;
                    }
                    _ => {}
                }
                Step { action: action.name(), params: action.params(), state: next }
            })
            .collect()
    }

    fn state_vars(&self, s: &NetState) -> BTreeMap<String, String> {
        net_vars(&s.core)
    }
}

/// Conservation: the sum of external and in-network balances never changes.
pub fn conservation_invariant() -> Invariant<NetState> {
    Invariant::new("conservation", |s: &NetState| {
        s.core.total() == s.initial_external.iter().sum::<i64>()
    })
}

/// Every honest user holds at least their correct balance: the initial
/// external funds, minus removed payments they sent, plus processed payments
/// they received. Punishment income only adds slack.
pub fn honest_monotone_invariant() -> Invariant<NetState> {
    Invariant::new("honest-user-monotone-correctness", |s: &NetState| {
        (0..s.core.num_users()).all(|u| {
            !s.core.honest[u]
                || s.core.external_balances[u] + s.core.balances[u]
                    >= s.initial_external[u] - s.sent_removed[u] + s.recv_processed[u]
        })
    })
}

/// Balances stay non-negative. Not provable for the verbatim ProcessPayment
/// action (it carries no sufficiency guard), so this is optional and off in
/// the acceptance runs; see the module's open questions.
pub fn non_negative_invariant() -> Invariant<NetState> {
    Invariant::new("balances-non-negative", |s: &NetState| {
        s.core.balances.iter().all(|&b| b >= 0)
    })
}

//! The idealized payment network: four variables (ExternalBalances,
//! Balances, Payments, Honest) and five actions. Serves both as an
//! explorable specification and as the abstract side of the top-level
//! refinement check, so the step relation is also available as a total
//! predicate over state pairs.

use crate::encode::Canon;
use crate::ids::{Coins, UserId};
use std::collections::BTreeSet;
use std::fmt;

/// A pending payment. Also the record shape payments map to in refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PaymentRec {
    pub amount: Coins,
    pub sender: UserId,
    pub recipient: UserId,
}

impl fmt::Display for PaymentRec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{} {}->{}}}", self.amount, self.sender, self.recipient)
    }
}

impl Canon for PaymentRec {
    fn encode(&self, out: &mut Vec<u8>) {
        self.amount.encode(out);
        self.sender.encode(out);
        self.recipient.encode(out);
    }
}

/// Balances are signed: ProcessPayment carries no balance guard (it moves
/// funds even past zero, mirroring the verbatim action), so the type must
/// admit what the actions can produce.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IdealNetworkState {
    pub external_balances: Vec<i64>,
    pub balances: Vec<i64>,
    pub payments: BTreeSet<PaymentRec>,
    pub honest: Vec<bool>,
}

impl Canon for IdealNetworkState {
    fn encode(&self, out: &mut Vec<u8>) {
        self.external_balances.encode(out);
        self.balances.encode(out);
        self.payments.encode(out);
        self.honest.encode(out);
    }
}

impl IdealNetworkState {
    pub fn num_users(&self) -> usize {
        self.external_balances.len()
    }

    pub fn total(&self) -> i64 {
        self.external_balances.iter().sum::<i64>() + self.balances.iter().sum::<i64>()
    }

    pub fn user_ids(&self) -> impl Iterator<Item = UserId> {
        (0..self.num_users() as u8).map(UserId)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InitError {
    LengthMismatch,
    NegativeExternal,
    BadPaymentUser,
}

/// Initial state: balances all zero, other variables per seeds.
pub fn init_network(
    num_users: usize,
    externals: &[i64],
    payments: &BTreeSet<PaymentRec>,
    honest: &[bool],
) -> Result<IdealNetworkState, InitError> {
    if externals.len() != num_users || honest.len() != num_users {
        return Err(InitError::LengthMismatch);
    }
    if externals.iter().any(|&e| e < 0) {
        return Err(InitError::NegativeExternal);
    }
    for p in payments {
        if p.sender.0 as usize >= num_users || p.recipient.0 as usize >= num_users {
            return Err(InitError::BadPaymentUser);
        }
    }
    Ok(IdealNetworkState {
        external_balances: externals.to_vec(),
        balances: vec![0; num_users],
        payments: payments.clone(),
        honest: honest.to_vec(),
    })
}

fn idx(u: UserId) -> usize {
    u.0 as usize
}

/// DepositBalance: amount in 1..=ExternalBalances[user]. None when the guard
/// fails (the action is disabled, never an error state).
pub fn deposit_balance(s: &IdealNetworkState, user: UserId, amount: i64) -> Option<IdealNetworkState> {
    if amount < 1 || amount > s.external_balances[idx(user)] {
        return None;
    }
    let mut n = s.clone();
    n.external_balances[idx(user)] -= amount;
    n.balances[idx(user)] += amount;
    Some(n)
}

/// WithdrawBalance over one or two users: amountA in 1..=Balances[userA],
/// amountB in 0..=Balances[userB]. userA = userB is permitted by the
/// quantifier structure; in that case the combined amount must stay within
/// the balance (coins are non-negative quantities).
pub fn withdraw_balance(
    s: &IdealNetworkState,
    user_a: UserId,
    user_b: UserId,
    amount_a: i64,
    amount_b: i64,
) -> Option<IdealNetworkState> {
    if amount_a < 1 || amount_a > s.balances[idx(user_a)] {
        return None;
    }
    if amount_b < 0 || amount_b > s.balances[idx(user_b)] {
        return None;
    }
    if user_a == user_b && amount_a + amount_b > s.balances[idx(user_a)] {
        return None;
    }
    let mut n = s.clone();
    n.balances[idx(user_a)] -= amount_a;
    n.balances[idx(user_b)] -= amount_b;
    n.external_balances[idx(user_a)] += amount_a;
    n.external_balances[idx(user_b)] += amount_b;
    Some(n)
}

/// ProcessPayment: moves the amount from sender to recipient and removes the
/// payment. Deliberately carries no balance-sufficiency guard.
pub fn process_payment(s: &IdealNetworkState, p: &PaymentRec) -> Option<IdealNetworkState> {
    if !s.payments.contains(p) {
        return None;
    }
    let mut n = s.clone();
    n.balances[idx(p.sender)] -= p.amount as i64;
    n.balances[idx(p.recipient)] += p.amount as i64;
    n.payments.remove(p);
    Some(n)
}

/// AbortPayment: removes the payment, everything else unchanged.
pub fn abort_payment(s: &IdealNetworkState, p: &PaymentRec) -> Option<IdealNetworkState> {
    if !s.payments.contains(p) {
        return None;
    }
    let mut n = s.clone();
    n.payments.remove(p);
    Some(n)
}

/// PunishCheating: a dishonest user loses part of their balance to another
/// user.
pub fn punish_cheating(
    s: &IdealNetworkState,
    dishonest: UserId,
    other: UserId,
    amount: i64,
) -> Option<IdealNetworkState> {
    if s.honest[idx(dishonest)] || other == dishonest {
        return None;
    }
    if amount < 1 || amount > s.balances[idx(dishonest)] {
        return None;
    }
    let mut n = s.clone();
    n.balances[idx(dishonest)] -= amount;
    n.balances[idx(other)] += amount;
    Some(n)
}

/// Is `b` reachable from `a` by exactly one Next step? Total over state
/// pairs; stuttering (a == b) is the caller's case, not this predicate's.
pub fn is_next_step(a: &IdealNetworkState, b: &IdealNetworkState) -> bool {
    if a.num_users() != b.num_users() || a.honest != b.honest {
        return false;
    }
    let users: Vec<usize> = (0..a.num_users()).collect();
    let dext: Vec<i64> = users.iter().map(|&u| b.external_balances[u] - a.external_balances[u]).collect();
    let dbal: Vec<i64> = users.iter().map(|&u| b.balances[u] - a.balances[u]).collect();
    let removed: Vec<&PaymentRec> = a.payments.difference(&b.payments).collect();
    let added = b.payments.difference(&a.payments).count();
    if added > 0 {
        return false;
    }

    if removed.len() == 1 {
        // ProcessPayment or AbortPayment of the removed record.
        let p = removed[0];
        if dext.iter().any(|&d| d != 0) {
            return false;
        }
        let mut expect = vec![0i64; a.num_users()];
        // AbortPayment leaves balances unchanged.
        if dbal == expect {
            return true;
        }
        expect[idx(p.sender)] -= p.amount as i64;
        expect[idx(p.recipient)] += p.amount as i64;
        return dbal == expect;
    }
    if !removed.is_empty() {
        return false;
    }

    // No payment change: deposit, withdraw or punishment.
    let ext_changed: Vec<usize> = users.iter().copied().filter(|&u| dext[u] != 0).collect();
    let bal_changed: Vec<usize> = users.iter().copied().filter(|&u| dbal[u] != 0).collect();

    if ext_changed.is_empty() {
        // PunishCheating: one dishonest user down, one other user up.
        if bal_changed.len() != 2 {
            return false;
        }
        let (u, v) = (bal_changed[0], bal_changed[1]);
        let (loser, gainer) = if dbal[u] < 0 { (u, v) } else { (v, u) };
        let x = -dbal[loser];
        x >= 1 && dbal[gainer] == x && !a.honest[loser] && a.balances[loser] >= x
    } else {
        // Deposit (ext down, balance up) or withdraw (balance down, ext up).
        if ext_changed != bal_changed {
            return false;
        }
        match ext_changed.len() {
            1 => {
                let u = ext_changed[0];
                if dext[u] != -dbal[u] {
                    return false;
                }
                if dbal[u] > 0 {
                    // DepositBalance
                    dbal[u] >= 1 && dbal[u] <= a.external_balances[u]
                } else {
                    // WithdrawBalance with a single affected user
                    let t = -dbal[u];
                    t >= 1 && t <= a.balances[u]
                }
            }
            2 => {
                // WithdrawBalance over two distinct users.
                let (u, v) = (ext_changed[0], ext_changed[1]);
                if dext[u] != -dbal[u] || dext[v] != -dbal[v] {
                    return false;
                }
                let (x, y) = (-dbal[u], -dbal[v]);
                x >= 1 && y >= 1 && x <= a.balances[u] && y <= a.balances[v]
            }
            _ => false,
        }
    }
}

/// Does `s` satisfy the Init predicate for some admissible seed? Balances
/// must be all zero; externals non-negative; payment users in range.
pub fn satisfies_init(s: &IdealNetworkState) -> bool {
    s.balances.iter().all(|&b| b == 0)
        && s.external_balances.iter().all(|&e| e >= 0)
        && s.payments.iter().all(|p| {
            (p.sender.0 as usize) < s.num_users() && (p.recipient.0 as usize) < s.num_users()
        })
}

/// One enabled action instance with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetAction {
    Deposit { user: UserId, amount: i64 },
    Process { payment: PaymentRec },
    Abort { payment: PaymentRec },
    Punish { dishonest: UserId, other: UserId, amount: i64 },
    Withdraw { user_a: UserId, user_b: UserId, amount_a: i64, amount_b: i64 },
}

impl NetAction {
    pub fn name(&self) -> &'static str {
        match self {
            NetAction::Deposit { .. } => "DepositBalance",
            NetAction::Process { .. } => "ProcessPayment",
            NetAction::Abort { .. } => "AbortPayment",
            NetAction::Punish { .. } => "PunishCheating",
            NetAction::Withdraw { .. } => "WithdrawBalance",
        }
    }

    pub fn params(&self) -> String {
        match self {
            NetAction::Deposit { user, amount } => format!("user={user} amount={amount}"),
            NetAction::Process { payment } => format!("payment={payment}"),
            NetAction::Abort { payment } => format!("payment={payment}"),
            NetAction::Punish { dishonest, other, amount } => {
                format!("dishonest={dishonest} other={other} amount={amount}")
            }
            NetAction::Withdraw { user_a, user_b, amount_a, amount_b } => {
                format!("userA={user_a} userB={user_b} amountA={amount_a} amountB={amount_b}")
            }
        }
    }
}

/// Enabled action instances in the Next-disjunct order (DepositBalance,
/// ProcessPayment, AbortPayment, PunishCheating, WithdrawBalance) with
/// parameters enumerated lexicographically.
pub fn successors(s: &IdealNetworkState, out: &mut Vec<(NetAction, IdealNetworkState)>) {
    for u in s.user_ids() {
        for amount in 1..=s.external_balances[idx(u)].max(0) {
            if let Some(n) = deposit_balance(s, u, amount) {
                out.push((NetAction::Deposit { user: u, amount }, n));
            }
        }
    }
    for p in &s.payments {
        if let Some(n) = process_payment(s, p) {
            out.push((NetAction::Process { payment: *p }, n));
        }
    }
    for p in &s.payments {
        if let Some(n) = abort_payment(s, p) {
            out.push((NetAction::Abort { payment: *p }, n));
        }
    }
    for d in s.user_ids() {
        for o in s.user_ids() {
            for amount in 1..=s.balances[idx(d)].max(0) {
                if let Some(n) = punish_cheating(s, d, o, amount) {
                    out.push((NetAction::Punish { dishonest: d, other: o, amount }, n));
                }
            }
        }
    }
    for a in s.user_ids() {
        for b in s.user_ids() {
            for amount_a in 1..=s.balances[idx(a)].max(0) {
                for amount_b in 0..=s.balances[idx(b)].max(0) {
                    if let Some(n) = withdraw_balance(s, a, b, amount_a, amount_b) {
                        out.push((
                            NetAction::Withdraw { user_a: a, user_b: b, amount_a, amount_b },
                            n,
                        ));
                    }
                }
            }
        }
    }
}

/// Flat variable rendering of a network state.
pub fn net_vars(s: &IdealNetworkState) -> std::collections::BTreeMap<String, String> {
    let mut m = std::collections::BTreeMap::new();
    for u in s.user_ids() {
        m.insert(format!("ExternalBalances[{u}]"), s.external_balances[idx(u)].to_string());
        m.insert(format!("Balances[{u}]"), s.balances[idx(u)].to_string());
        m.insert(format!("Honest[{u}]"), s.honest[idx(u)].to_string());
    }
    let pays: Vec<String> = s.payments.iter().map(|p| p.to_string()).collect();
    m.insert("Payments".into(), format!("{{{}}}", pays.join(",")));
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::{ALICE, BOB};

    fn two_user_state(ext: [i64; 2], bal: [i64; 2], honest: [bool; 2]) -> IdealNetworkState {
        IdealNetworkState {
            external_balances: ext.to_vec(),
            balances: bal.to_vec(),
            payments: BTreeSet::new(),
            honest: honest.to_vec(),
        }
    }

    #[test]
    fn init_zeroes_balances() {
        let p = PaymentRec { amount: 1, sender: ALICE, recipient: BOB };
        let s = init_network(2, &[3, 0], &[p].into_iter().collect(), &[true, true]).unwrap();
        assert_eq!(s.balances, vec![0, 0]);
        assert_eq!(s.balances.iter().sum::<i64>(), 0);
        assert!(satisfies_init(&s));
        assert_eq!(init_network(2, &[-1, 0], &BTreeSet::new(), &[true, true]), Err(InitError::NegativeExternal));
    }

    #[test]
    fn deposit_ranges() {
        let s = two_user_state([3, 0], [0, 0], [true, true]);
        let n = deposit_balance(&s, ALICE, 2).unwrap();
        assert_eq!(n.external_balances, vec![1, 0]);
        assert_eq!(n.balances, vec![2, 0]);
        assert!(deposit_balance(&s, BOB, 1).is_none());
        assert!(deposit_balance(&s, ALICE, 0).is_none());
    }

    #[test]
    fn withdraw_ranges() {
        let s = two_user_state([0, 0], [2, 1], [true, true]);
        let n = withdraw_balance(&s, ALICE, BOB, 2, 1).unwrap();
        assert_eq!(n.balances, vec![0, 0]);
        assert_eq!(n.external_balances, vec![2, 1]);
        // amountB = 0 allows single-user withdrawal; amountA = 0 is disabled.
        assert!(withdraw_balance(&s, ALICE, BOB, 1, 0).is_some());
        assert!(withdraw_balance(&s, ALICE, BOB, 0, 1).is_none());
        // Same user on both sides must stay within the balance.
        assert!(withdraw_balance(&s, ALICE, ALICE, 2, 1).is_none());
        assert!(withdraw_balance(&s, ALICE, ALICE, 1, 1).is_some());
    }

    #[test]
    fn process_and_abort_remove_exactly_one_payment() {
        let p = PaymentRec { amount: 1, sender: ALICE, recipient: BOB };
        let mut s = two_user_state([0, 0], [2, 0], [true, true]);
        s.payments.insert(p);
        let n = process_payment(&s, &p).unwrap();
        assert_eq!(n.balances, vec![1, 1]);
        assert!(n.payments.is_empty());
        assert!(process_payment(&n, &p).is_none());

        let a = abort_payment(&s, &p).unwrap();
        assert_eq!(a.balances, s.balances);
        assert!(a.payments.is_empty());
        assert!(abort_payment(&a, &p).is_none());
    }

    #[test]
    fn punish_requires_dishonesty_and_distinct_users() {
        let s = two_user_state([0, 0], [0, 2], [true, false]);
        let n = punish_cheating(&s, BOB, ALICE, 2).unwrap();
        assert_eq!(n.balances, vec![2, 0]);
        assert!(punish_cheating(&s, ALICE, BOB, 1).is_none());
        assert!(punish_cheating(&s, BOB, BOB, 1).is_none());
    }

    #[test]
    fn step_predicate_matches_generated_successors() {
        let p = PaymentRec { amount: 2, sender: ALICE, recipient: BOB };
        let mut s = two_user_state([3, 1], [1, 2], [true, false]);
        s.payments.insert(p);
        let mut succs = Vec::new();
        successors(&s, &mut succs);
        assert!(!succs.is_empty());
        for (action, n) in &succs {
            assert!(is_next_step(&s, n), "generated step not accepted: {} {}", action.name(), action.params());
        }
        // A random unrelated mutation is not a step.
        let mut bad = s.clone();
        bad.balances[0] += 5;
        assert!(!is_next_step(&s, &bad));
        // Changing honesty is never a step.
        let mut bad2 = s.clone();
        bad2.honest[1] = true;
        assert!(!is_next_step(&s, &bad2));
    }
}

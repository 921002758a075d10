//! Deterministic construction and recognition of the channel transaction
//! graph: deposit, funding, commitment, second-stage HTLC claims and
//! punishment sweeps.

use crate::ids::{BlockHeight, ChannelId, Coins, PaymentId, UserId};
use crate::ledger::{
    KeyId, LedgerState, SpendingCondition, Transaction, TxId, TxInput, TxOutput, Witness,
};
use crate::state::{Proposal, Scenario};
use std::collections::BTreeSet;

/// External deposit minted at the model boundary when a channel is funded.
pub fn build_deposit_tx(scenario: &Scenario, chan: ChannelId) -> Transaction {
    let def = scenario.channel(chan);
    Transaction::new(
        vec![],
        vec![TxOutput {
            amount: def.capacity,
            conditions: vec![SpendingCondition::SingleSig(KeyId::external(def.funder()))],
        }],
        BlockHeight(0),
    )
}

/// The 2-of-2 funding transaction spending the funder's external output.
pub fn build_funding_tx(scenario: &Scenario, chan: ChannelId, deposit_id: TxId) -> Transaction {
    let def = scenario.channel(chan);
    let keys: BTreeSet<KeyId> =
        def.users.iter().map(|&u| KeyId::funding(u, chan)).collect();
    Transaction::new(
        vec![TxInput {
            prev_tx: deposit_id,
            output_index: 0,
            condition_index: 0,
            witness: Witness {
                sigs: [KeyId::external(def.funder())].into_iter().collect(),
                preimage: None,
                revocation_secret: None,
            },
        }],
        vec![TxOutput { amount: def.capacity, conditions: vec![SpendingCondition::AllSigs(keys)] }],
        BlockHeight(0),
    )
}

/// Output roles of a commitment transaction, in output order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputRole {
    /// Publisher's balance, revocable.
    ToSelf,
    /// Counterparty's balance, plain.
    ToOther,
    Htlc(PaymentId),
}

/// Builds publisher `side`'s commitment transaction for the given content.
/// Output order: to_self, to_other, HTLCs ascending; zero-amount balance
/// outputs are omitted.
pub fn build_commitment_tx(
    scenario: &Scenario,
    chan: ChannelId,
    funding_txid: TxId,
    side: usize,
    content: &Proposal,
) -> (Transaction, Vec<OutputRole>) {
    let def = scenario.channel(chan);
    let publisher = def.users[side];
    let other = def.users[1 - side];
    let rev = KeyId::revocation(publisher, chan, content.number);
    let mut outputs = Vec::new();
    let mut roles = Vec::new();
    if content.balances[side] > 0 {
        outputs.push(TxOutput {
            amount: content.balances[side],
            conditions: vec![
                SpendingCondition::RevocationSig(rev),
                SpendingCondition::SingleSig(KeyId::commitment(publisher, chan, content.number)),
            ],
        });
        roles.push(OutputRole::ToSelf);
    }
    if content.balances[1 - side] > 0 {
        outputs.push(TxOutput {
            amount: content.balances[1 - side],
            conditions: vec![SpendingCondition::SingleSig(KeyId::commitment(
                other,
                chan,
                content.number,
            ))],
        });
        roles.push(OutputRole::ToOther);
    }
    for &p in &content.htlcs {
        let def_p = scenario.payment(p);
        let hop = def_p.hop_of_channel(chan).expect("htlc on its route channel");
        let (hs, hr) = def_p.hop_users(scenario, hop);
        outputs.push(TxOutput {
            amount: def_p.amount,
            conditions: vec![
                SpendingCondition::RevocationSig(rev),
                SpendingCondition::SigWithAbsoluteLock(
                    KeyId::htlc(hs, chan, p),
                    def_p.expiries[hop],
                ),
                SpendingCondition::SigsWithPreimage(
                    [KeyId::htlc(hs, chan, p), KeyId::htlc(hr, chan, p)].into_iter().collect(),
                    p,
                ),
            ],
        });
        roles.push(OutputRole::Htlc(p));
    }
    let funding_witness = Witness {
        sigs: def.users.iter().map(|&u| KeyId::funding(u, chan)).collect(),
        preimage: None,
        revocation_secret: None,
    };
    let tx = Transaction::new(
        vec![TxInput {
            prev_tx: funding_txid,
            output_index: 0,
            condition_index: 0,
            witness: funding_witness,
        }],
        outputs,
        BlockHeight(0),
    );
    (tx, roles)
}

/// Inspects a published transaction that spends a funding output and
/// recovers (publisher side, commitment number, HTLC payments in output
/// order). Recognition relies on the key ids in the conditions.
pub fn classify_commitment_tx(
    scenario: &Scenario,
    chan: ChannelId,
    tx: &Transaction,
) -> Option<(usize, u32, Vec<PaymentId>)> {
    let def = scenario.channel(chan);
    let mut publisher_number: Option<(UserId, u32)> = None;
    let mut htlcs = Vec::new();
    for out in &tx.outputs {
        for cond in &out.conditions {
            match cond {
                SpendingCondition::RevocationSig(k) => {
                    if let crate::ledger::KeyPurpose::Revocation(c, n) = k.purpose {
                        if c == chan {
                            publisher_number = Some((k.owner, n));
                        }
                    }
                }
                SpendingCondition::SingleSig(k) => {
                    if let crate::ledger::KeyPurpose::Commitment(c, n) = k.purpose {
                        if c == chan && publisher_number.is_none() {
                            // A lone to_other output: the publisher is the
                            // counterparty of the named owner.
                            publisher_number = Some((def.other_user(k.owner), n));
                        }
                    }
                }
                SpendingCondition::SigsWithPreimage(_, p) => htlcs.push(*p),
                _ => {}
            }
        }
    }
    let (publisher, number) = publisher_number?;
    let side = def.side_of(publisher)?;
    htlcs.sort();
    htlcs.dedup();
    Some((side, number, htlcs))
}

/// Second-stage claim transaction spending one HTLC output of a published
/// commitment. The success path carries locktime 0 and both HTLC keys (it is
/// the pre-signed transaction the counterparty co-signed); the timeout path
/// carries locktime = expiry and the hop sender's key alone.
pub struct HtlcClaim {
    pub tx: Transaction,
    pub claimant: UserId,
}

pub fn build_htlc_success_tx(
    scenario: &Scenario,
    chan: ChannelId,
    commit_tx: &Transaction,
    commit_side: usize,
    commit_number: u32,
    output_index: u32,
    payment: PaymentId,
    with_preimage: bool,
) -> HtlcClaim {
    let def_p = scenario.payment(payment);
    let hop = def_p.hop_of_channel(chan).expect("payment routed over channel");
    let (hs, hr) = def_p.hop_users(scenario, hop);
    let publisher = scenario.channel(chan).users[commit_side];
    let rev = KeyId::revocation(publisher, chan, commit_number);
    let amount = commit_tx.outputs[output_index as usize].amount;
    let tx = Transaction::new(
        vec![TxInput {
            prev_tx: commit_tx.id,
            output_index,
            condition_index: 2,
            witness: Witness {
                sigs: [KeyId::htlc(hs, chan, payment), KeyId::htlc(hr, chan, payment)]
                    .into_iter()
                    .collect(),
                preimage: with_preimage.then_some(payment),
                revocation_secret: None,
            },
        }],
        vec![TxOutput {
            amount,
            conditions: vec![
                SpendingCondition::RevocationSig(rev),
                SpendingCondition::SingleSig(KeyId::htlc(hr, chan, payment)),
            ],
        }],
        BlockHeight(0),
    );
    HtlcClaim { tx, claimant: hr }
}

pub fn build_htlc_timeout_tx(
    scenario: &Scenario,
    chan: ChannelId,
    commit_tx: &Transaction,
    commit_side: usize,
    commit_number: u32,
    output_index: u32,
    payment: PaymentId,
) -> HtlcClaim {
    let def_p = scenario.payment(payment);
    let hop = def_p.hop_of_channel(chan).expect("payment routed over channel");
    let (hs, _) = def_p.hop_users(scenario, hop);
    let publisher = scenario.channel(chan).users[commit_side];
    let rev = KeyId::revocation(publisher, chan, commit_number);
    let amount = commit_tx.outputs[output_index as usize].amount;
    let expiry = def_p.expiries[hop];
    let tx = Transaction::new(
        vec![TxInput {
            prev_tx: commit_tx.id,
            output_index,
            condition_index: 1,
            witness: Witness {
                sigs: [KeyId::htlc(hs, chan, payment)].into_iter().collect(),
                preimage: None,
                revocation_secret: None,
            },
        }],
        vec![TxOutput {
            amount,
            conditions: vec![
                SpendingCondition::RevocationSig(rev),
                SpendingCondition::SingleSig(KeyId::htlc(hs, chan, payment)),
            ],
        }],
        expiry,
    );
    HtlcClaim { tx, claimant: hs }
}

/// Builds the punishment sweep for `punisher` against a published outdated
/// commitment. With the punishment flaw off, inputs cover every currently
/// unspent output reachable through the revocation condition, including
/// outputs of second-stage HTLC transactions. With the flaw on, inputs are
/// built against the commitment transaction's own outputs only (all of
/// them), so the sweep goes invalid once any HTLC output was already spent.
pub fn build_punish_tx(
    scenario: &Scenario,
    chan: ChannelId,
    ledger: &LedgerState,
    commit_tx: &Transaction,
    commit_side: usize,
    commit_number: u32,
    punisher: UserId,
    commitment_outputs_only: bool,
) -> Transaction {
    let def = scenario.channel(chan);
    let cheater = def.users[commit_side];
    let rev = KeyId::revocation(cheater, chan, commit_number);
    let mut inputs = Vec::new();
    let mut total: Coins = 0;

    let rev_input = |tx_id: TxId, idx: u32| TxInput {
        prev_tx: tx_id,
        output_index: idx,
        condition_index: 0,
        witness: Witness { sigs: BTreeSet::new(), preimage: None, revocation_secret: Some(rev) },
    };

    if commitment_outputs_only {
        // Flawed shape: one input per commitment output, unconditionally.
        for (i, out) in commit_tx.outputs.iter().enumerate() {
            let via_rev = out
                .conditions
                .first()
                .is_some_and(|c| matches!(c, SpendingCondition::RevocationSig(_)));
            if via_rev {
                inputs.push(rev_input(commit_tx.id, i as u32));
            } else {
                // The punisher's own plain output, spent by signature.
                let key = match &out.conditions[0] {
                    SpendingCondition::SingleSig(k) => *k,
                    _ => KeyId::commitment(punisher, chan, commit_number),
                };
                inputs.push(TxInput {
                    prev_tx: commit_tx.id,
                    output_index: i as u32,
                    condition_index: 0,
                    witness: Witness {
                        sigs: [key].into_iter().collect(),
                        preimage: None,
                        revocation_secret: None,
                    },
                });
            }
            total += out.amount;
        }
    } else {
        // Corrected shape: sweep whatever is still unspent and reachable via
        // the revocation key, wherever it lives in the transaction graph.
        for tx in &ledger.published {
            for (i, out) in tx.outputs.iter().enumerate() {
                let op = (tx.id, i as u32);
                if !ledger.is_unspent(op) {
                    continue;
                }
                let revocable = out
                    .conditions
                    .iter()
                    .any(|c| matches!(c, SpendingCondition::RevocationSig(k) if *k == rev));
                if revocable {
                    inputs.push(rev_input(tx.id, i as u32));
                    total += out.amount;
                }
            }
        }
    }

    Transaction::new(
        inputs,
        vec![TxOutput {
            amount: total,
            conditions: vec![SpendingCondition::SingleSig(KeyId::commitment(
                punisher,
                chan,
                commit_number,
            ))],
        }],
        BlockHeight(0),
    )
}

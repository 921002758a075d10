//! Abstract blockchain: published transactions, UTXO derivation and
//! transaction validity, including the locktime semantics that close the
//! second known flaw (an HTLC success transaction carries locktime 0 and so
//! cannot satisfy the absolute-timelock spending method of the same output).

use crate::encode::Canon;
use crate::ids::{BlockHeight, ChannelId, Coins, PaymentId, UserId};
use std::collections::BTreeSet;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

/// Counts evaluations that took a flaw-enabled code path. Tests assert this
/// stays at zero when all flaws are off.
pub static FLAW_PATH_HITS: AtomicU64 = AtomicU64::new(0);

fn note_flaw_path() {
    FLAW_PATH_HITS.fetch_add(1, Ordering::Relaxed);
}

/// Toggles that reintroduce the two known flaws for the attack-replay runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlawFlags {
    /// Flaw 2: an input may satisfy any disjunct of the spent output and the
    /// spending-transaction locktime requirement of absolute locks is
    /// dropped, conflating the success and timeout spending methods.
    pub conflate_disjuncts: bool,
    /// Flaw 1: a punishment transaction only builds inputs against the
    /// outputs of the outdated commitment transaction itself, so it is
    /// disabled once an HTLC output was already spent by a second-stage
    /// transaction.
    pub punish_commitment_outputs_only: bool,
}

impl FlawFlags {
    pub fn any(self) -> bool {
        self.conflate_disjuncts || self.punish_commitment_outputs_only
    }
}

/// What a key pair is for. Each (owner, purpose) pair names a unique key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum KeyPurpose {
    /// Spends the owner's external deposits.
    External,
    /// One half of the channel's 2-of-2 funding output.
    Funding(ChannelId),
    /// Plain balance outputs of the numbered commitment transaction.
    Commitment(ChannelId, u32),
    /// HTLC outputs; keyed by the payment whose lock they carry.
    Htlc(ChannelId, PaymentId),
    /// Revocation key of the numbered commitment. The secret is transferred
    /// to the counterparty when the commitment is revoked.
    Revocation(ChannelId, u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KeyId {
    pub owner: UserId,
    pub purpose: KeyPurpose,
}

impl KeyId {
    pub fn external(owner: UserId) -> Self {
        KeyId { owner, purpose: KeyPurpose::External }
    }
    pub fn funding(owner: UserId, chan: ChannelId) -> Self {
        KeyId { owner, purpose: KeyPurpose::Funding(chan) }
    }
    pub fn commitment(owner: UserId, chan: ChannelId, n: u32) -> Self {
        KeyId { owner, purpose: KeyPurpose::Commitment(chan, n) }
    }
    pub fn htlc(owner: UserId, chan: ChannelId, payment: PaymentId) -> Self {
        KeyId { owner, purpose: KeyPurpose::Htlc(chan, payment) }
    }
    pub fn revocation(owner: UserId, chan: ChannelId, n: u32) -> Self {
        KeyId { owner, purpose: KeyPurpose::Revocation(chan, n) }
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.purpose {
            KeyPurpose::External => write!(f, "{}.ext", self.owner),
            KeyPurpose::Funding(c) => write!(f, "{}.fund[{}]", self.owner, c),
            KeyPurpose::Commitment(c, n) => write!(f, "{}.commit[{},{}]", self.owner, c, n),
            KeyPurpose::Htlc(c, p) => write!(f, "{}.htlc[{},{}]", self.owner, c, p),
            KeyPurpose::Revocation(c, n) => write!(f, "{}.rev[{},{}]", self.owner, c, n),
        }
    }
}

impl Canon for KeyPurpose {
    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            KeyPurpose::External => 0u8.encode(out),
            KeyPurpose::Funding(c) => {
                1u8.encode(out);
                c.encode(out);
            }
            KeyPurpose::Commitment(c, n) => {
                2u8.encode(out);
                c.encode(out);
                n.encode(out);
            }
            KeyPurpose::Htlc(c, p) => {
                3u8.encode(out);
                c.encode(out);
                p.encode(out);
            }
            KeyPurpose::Revocation(c, n) => {
                4u8.encode(out);
                c.encode(out);
                n.encode(out);
            }
        }
    }
}

impl Canon for KeyId {
    fn encode(&self, out: &mut Vec<u8>) {
        self.owner.encode(out);
        self.purpose.encode(out);
    }
}

/// One way to spend an output. An output carries an ordered list of these
/// and a fixed input must name the disjunct it satisfies by index.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SpendingCondition {
    AllSigs(BTreeSet<KeyId>),
    SingleSig(KeyId),
    SigWithAbsoluteLock(KeyId, BlockHeight),
    SigsWithPreimage(BTreeSet<KeyId>, PaymentId),
    RevocationSig(KeyId),
}

impl Canon for SpendingCondition {
    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            SpendingCondition::AllSigs(keys) => {
                0u8.encode(out);
                keys.encode(out);
            }
            SpendingCondition::SingleSig(k) => {
                1u8.encode(out);
                k.encode(out);
            }
            SpendingCondition::SigWithAbsoluteLock(k, h) => {
                2u8.encode(out);
                k.encode(out);
                h.encode(out);
            }
            SpendingCondition::SigsWithPreimage(keys, p) => {
                3u8.encode(out);
                keys.encode(out);
                p.encode(out);
            }
            SpendingCondition::RevocationSig(k) => {
                4u8.encode(out);
                k.encode(out);
            }
        }
    }
}

impl fmt::Display for SpendingCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpendingCondition::AllSigs(keys) => {
                write!(f, "allsigs(")?;
                for (i, k) in keys.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{k}")?;
                }
                write!(f, ")")
            }
            SpendingCondition::SingleSig(k) => write!(f, "sig({k})"),
            SpendingCondition::SigWithAbsoluteLock(k, h) => write!(f, "sig({k})@cltv{h}"),
            SpendingCondition::SigsWithPreimage(keys, p) => {
                write!(f, "sigs+preimage[{p}](")?;
                for (i, k) in keys.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{k}")?;
                }
                write!(f, ")")
            }
            SpendingCondition::RevocationSig(k) => write!(f, "revsig({k})"),
        }
    }
}

/// Transaction id: a deterministic fingerprint of the canonical text form of
/// the transaction body (inputs without witnesses, outputs, locktime).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TxId(pub u64);

impl fmt::Display for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tx:{:016x}", self.0)
    }
}

impl Canon for TxId {
    fn encode(&self, out: &mut Vec<u8>) {
        self.0.encode(out);
    }
}

/// Signatures are modeled as (signing key, signed tx id) pairs and are
/// unforgeable by construction: actions only place a key in a witness when
/// the acting user owns it or was handed the pair by the counterparty.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Witness {
    pub sigs: BTreeSet<KeyId>,
    pub preimage: Option<PaymentId>,
    pub revocation_secret: Option<KeyId>,
}

impl Canon for Witness {
    fn encode(&self, out: &mut Vec<u8>) {
        self.sigs.encode(out);
        self.preimage.encode(out);
        self.revocation_secret.encode(out);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TxInput {
    pub prev_tx: TxId,
    pub output_index: u32,
    pub condition_index: u32,
    pub witness: Witness,
}

impl Canon for TxInput {
    fn encode(&self, out: &mut Vec<u8>) {
        self.prev_tx.encode(out);
        self.output_index.encode(out);
        self.condition_index.encode(out);
        self.witness.encode(out);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TxOutput {
    pub amount: Coins,
    pub conditions: Vec<SpendingCondition>,
}

impl Canon for TxOutput {
    fn encode(&self, out: &mut Vec<u8>) {
        self.amount.encode(out);
        self.conditions.encode(out);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Transaction {
    pub id: TxId,
    pub inputs: Vec<TxInput>,
    pub outputs: Vec<TxOutput>,
    pub locktime: BlockHeight,
}

impl Transaction {
    /// Builds a transaction, deriving its id from the body. The id excludes
    /// witnesses so that pre-signing a transaction and later attaching a
    /// preimage or signature does not change what was signed.
    pub fn new(inputs: Vec<TxInput>, outputs: Vec<TxOutput>, locktime: BlockHeight) -> Self {
        let mut body = Vec::with_capacity(128);
        (inputs.len() as u32).encode(&mut body);
        for i in &inputs {
            i.prev_tx.encode(&mut body);
            i.output_index.encode(&mut body);
            i.condition_index.encode(&mut body);
        }
        outputs.encode(&mut body);
        locktime.encode(&mut body);
        let id = TxId(crate::encode::fnv1a(&body));
        Transaction { id, inputs, outputs, locktime }
    }

    pub fn output_sum(&self) -> Coins {
        self.outputs.iter().map(|o| o.amount).sum()
    }

    /// Canonical text form used in trace files.
    pub fn canonical_text(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        write!(s, "{{id={} locktime={} inputs=[", self.id, self.locktime).unwrap();
        for (i, inp) in self.inputs.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            write!(s, "{}#{}:{}", inp.prev_tx, inp.output_index, inp.condition_index).unwrap();
            if let Some(p) = inp.witness.preimage {
                write!(s, "+preimage[{p}]").unwrap();
            }
            if let Some(r) = inp.witness.revocation_secret {
                write!(s, "+revsecret[{r}]").unwrap();
            }
        }
        write!(s, "] outputs=[").unwrap();
        for (i, out) in self.outputs.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            write!(s, "{}:", out.amount).unwrap();
            for (j, c) in out.conditions.iter().enumerate() {
                if j > 0 {
                    s.push('|');
                }
                write!(s, "{c}").unwrap();
            }
        }
        s.push_str("]}");
        s
    }
}

impl Canon for Transaction {
    fn encode(&self, out: &mut Vec<u8>) {
        self.id.encode(out);
        self.inputs.encode(out);
        self.outputs.encode(out);
        self.locktime.encode(out);
    }
}

/// A reference to one output of a published transaction.
pub type Outpoint = (TxId, u32);

/// Why a transaction failed validation, in the fixed check order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InvalidReason {
    Locktime,
    MissingOutput,
    DoubleSpend,
    Condition,
    Amounts,
}

impl fmt::Display for InvalidReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            InvalidReason::Locktime => "locktime",
            InvalidReason::MissingOutput => "missing-output",
            InvalidReason::DoubleSpend => "double-spend",
            InvalidReason::Condition => "condition",
            InvalidReason::Amounts => "amounts",
        };
        f.write_str(s)
    }
}

/// The published chain state. Time lives here so validity checks are local.
///
/// `withdrawn` tracks outputs whose value was settled to a user's external
/// balance; they are spent for UTXO purposes but keep their place in the
/// transaction graph.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct LedgerState {
    pub published: Vec<Transaction>,
    pub publishers: Vec<UserId>,
    pub withdrawn: BTreeSet<Outpoint>,
    pub time: BlockHeight,
}

impl Canon for LedgerState {
    fn encode(&self, out: &mut Vec<u8>) {
        self.published.encode(out);
        self.publishers.encode(out);
        self.withdrawn.encode(out);
        self.time.encode(out);
    }
}

impl LedgerState {
    pub fn find_tx(&self, id: TxId) -> Option<&Transaction> {
        self.published.iter().find(|t| t.id == id)
    }

    pub fn contains_tx(&self, id: TxId) -> bool {
        self.find_tx(id).is_some()
    }

    pub fn output(&self, op: Outpoint) -> Option<&TxOutput> {
        self.find_tx(op.0).and_then(|t| t.outputs.get(op.1 as usize))
    }

    /// Spent by a published input (withdrawals count separately).
    pub fn spent_by_input(&self, op: Outpoint) -> bool {
        self.published
            .iter()
            .any(|t| t.inputs.iter().any(|i| (i.prev_tx, i.output_index) == op))
    }

    pub fn is_unspent(&self, op: Outpoint) -> bool {
        self.output(op).is_some() && !self.spent_by_input(op) && !self.withdrawn.contains(&op)
    }

    /// All unspent, unwithdrawn outpoints in publication order.
    pub fn utxos(&self) -> Vec<Outpoint> {
        let mut out = Vec::new();
        for tx in &self.published {
            for (i, _) in tx.outputs.iter().enumerate() {
                let op = (tx.id, i as u32);
                if self.is_unspent(op) {
                    out.push(op);
                }
            }
        }
        out
    }

    pub fn utxo_sum(&self) -> Coins {
        self.utxos().iter().map(|op| self.output(*op).unwrap().amount).sum()
    }

    /// Expiry constants in spending conditions of current UTXOs; feeds the
    /// optimized clock's pending-lock set.
    pub fn utxo_expiries(&self) -> BTreeSet<BlockHeight> {
        let mut set = BTreeSet::new();
        for op in self.utxos() {
            for cond in &self.output(op).unwrap().conditions {
                if let SpendingCondition::SigWithAbsoluteLock(_, h) = cond {
                    set.insert(*h);
                }
            }
        }
        set
    }
}

/// Total predicate: does `witness` satisfy `condition` for a spending
/// transaction carrying `spending_locktime`?
///
/// The absolute-lock arm models CHECKLOCKTIMEVERIFY: the spending transaction
/// must carry a locktime at or past the expiry, and is itself only
/// publishable once chain time reaches that locktime. With
/// `conflate_disjuncts` the locktime requirement is skipped, which is exactly
/// what lets a success transaction with locktime 0 pass the timeout method.
pub fn satisfies_condition(
    witness: &Witness,
    condition: &SpendingCondition,
    spending_locktime: BlockHeight,
    flaws: FlawFlags,
) -> bool {
    match condition {
        SpendingCondition::AllSigs(keys) => keys.iter().all(|k| witness.sigs.contains(k)),
        SpendingCondition::SingleSig(k) => witness.sigs.contains(k),
        SpendingCondition::SigWithAbsoluteLock(k, expiry) => {
            if !witness.sigs.contains(k) {
                return false;
            }
            if flaws.conflate_disjuncts {
                note_flaw_path();
                true
            } else {
                spending_locktime >= *expiry
            }
        }
        SpendingCondition::SigsWithPreimage(keys, lock) => {
            keys.iter().all(|k| witness.sigs.contains(k)) && witness.preimage == Some(*lock)
        }
        SpendingCondition::RevocationSig(k) => witness.revocation_secret == Some(*k),
    }
}

/// Validates a transaction against the ledger. Checks run in a fixed order
/// (locktime, missing-output, double-spend, condition, amounts) so the first
/// failing reason is deterministic.
///
/// Transactions without inputs are external deposits minted at the model
/// boundary (channel funding); they bypass the input checks and the amount
/// balance.
pub fn validate_transaction(
    tx: &Transaction,
    ledger: &LedgerState,
    flaws: FlawFlags,
) -> Result<(), InvalidReason> {
    if tx.locktime > ledger.time {
        return Err(InvalidReason::Locktime);
    }
    for input in &tx.inputs {
        if ledger.output((input.prev_tx, input.output_index)).is_none() {
            return Err(InvalidReason::MissingOutput);
        }
    }
    let mut seen: BTreeSet<Outpoint> = BTreeSet::new();
    for input in &tx.inputs {
        let op = (input.prev_tx, input.output_index);
        if !seen.insert(op) || ledger.spent_by_input(op) || ledger.withdrawn.contains(&op) {
            return Err(InvalidReason::DoubleSpend);
        }
    }
    for input in &tx.inputs {
        let output = ledger.output((input.prev_tx, input.output_index)).unwrap();
        let ok = if flaws.conflate_disjuncts {
            // Flawed semantics: the condition index is ignored and any
            // satisfiable disjunct of the output accepts the input.
            note_flaw_path();
            output
                .conditions
                .iter()
                .any(|c| satisfies_condition(&input.witness, c, tx.locktime, flaws))
        } else {
            match output.conditions.get(input.condition_index as usize) {
                Some(c) => satisfies_condition(&input.witness, c, tx.locktime, flaws),
                None => false,
            }
        };
        if !ok {
            return Err(InvalidReason::Condition);
        }
    }
    if !tx.inputs.is_empty() {
        let input_sum: Coins = tx
            .inputs
            .iter()
            .map(|i| ledger.output((i.prev_tx, i.output_index)).unwrap().amount)
            .sum();
        if input_sum != tx.output_sum() {
            return Err(InvalidReason::Amounts);
        }
    }
    Ok(())
}

/// Appends a valid transaction. Callers treat a validation failure as the
/// publishing action being disabled, never as a crash.
pub fn publish_transaction(
    tx: Transaction,
    publisher: UserId,
    ledger: &LedgerState,
    flaws: FlawFlags,
) -> Result<LedgerState, InvalidReason> {
    validate_transaction(&tx, ledger, flaws)?;
    let mut next = ledger.clone();
    next.published.push(tx);
    next.publishers.push(publisher);
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::{ALICE, BOB, CHAN_AB};

    fn sig_witness(keys: &[KeyId]) -> Witness {
        Witness { sigs: keys.iter().copied().collect(), preimage: None, revocation_secret: None }
    }

    fn deposit(user: UserId, amount: Coins) -> Transaction {
        Transaction::new(
            vec![],
            vec![TxOutput {
                amount,
                conditions: vec![SpendingCondition::SingleSig(KeyId::external(user))],
            }],
            BlockHeight(0),
        )
    }

    #[test]
    fn absolute_lock_requires_spending_locktime() {
        // Success transactions carry locktime 0 and cannot take the timeout
        // method; with the conflation flaw enabled they can.
        let key = KeyId::htlc(ALICE, CHAN_AB, PaymentId(0));
        let cond = SpendingCondition::SigWithAbsoluteLock(key, BlockHeight(10));
        let w = sig_witness(&[key]);
        assert!(!satisfies_condition(&w, &cond, BlockHeight(0), FlawFlags::default()));
        assert!(satisfies_condition(
            &w,
            &cond,
            BlockHeight(0),
            FlawFlags { conflate_disjuncts: true, ..Default::default() }
        ));
        assert!(satisfies_condition(&w, &cond, BlockHeight(10), FlawFlags::default()));
    }

    #[test]
    fn all_sigs_satisfied_by_full_witness() {
        let a = KeyId::funding(ALICE, CHAN_AB);
        let b = KeyId::funding(BOB, CHAN_AB);
        let cond = SpendingCondition::AllSigs([a, b].into_iter().collect());
        assert!(satisfies_condition(&sig_witness(&[a, b]), &cond, BlockHeight(0), FlawFlags::default()));
        assert!(!satisfies_condition(&sig_witness(&[a]), &cond, BlockHeight(7), FlawFlags::default()));
    }

    #[test]
    fn preimage_condition_needs_matching_lock() {
        let k = KeyId::htlc(BOB, CHAN_AB, PaymentId(3));
        let cond = SpendingCondition::SigsWithPreimage([k].into_iter().collect(), PaymentId(3));
        let mut w = sig_witness(&[k]);
        assert!(!satisfies_condition(&w, &cond, BlockHeight(0), FlawFlags::default()));
        w.preimage = Some(PaymentId(2));
        assert!(!satisfies_condition(&w, &cond, BlockHeight(0), FlawFlags::default()));
        w.preimage = Some(PaymentId(3));
        assert!(satisfies_condition(&w, &cond, BlockHeight(0), FlawFlags::default()));
    }

    #[test]
    fn funding_spend_with_single_signature_is_valid() {
        let mut ledger = LedgerState::default();
        let dep = deposit(ALICE, 3);
        ledger = publish_transaction(dep.clone(), ALICE, &ledger, FlawFlags::default()).unwrap();

        let funding = Transaction::new(
            vec![TxInput {
                prev_tx: dep.id,
                output_index: 0,
                condition_index: 0,
                witness: sig_witness(&[KeyId::external(ALICE)]),
            }],
            vec![TxOutput {
                amount: 3,
                conditions: vec![SpendingCondition::AllSigs(
                    [KeyId::funding(ALICE, CHAN_AB), KeyId::funding(BOB, CHAN_AB)]
                        .into_iter()
                        .collect(),
                )],
            }],
            BlockHeight(0),
        );
        assert_eq!(validate_transaction(&funding, &ledger, FlawFlags::default()), Ok(()));
        let ledger = publish_transaction(funding.clone(), ALICE, &ledger, FlawFlags::default()).unwrap();
        assert_eq!(ledger.utxos(), vec![(funding.id, 0)]);

        // Publishing the same transaction twice is a double spend.
        assert_eq!(
            validate_transaction(&funding, &ledger, FlawFlags::default()),
            Err(InvalidReason::DoubleSpend)
        );
    }

    #[test]
    fn htlc_success_with_zero_locktime_is_rejected_without_flaw() {
        let mut ledger = LedgerState::default();
        ledger.time = BlockHeight(12);
        let dep = deposit(ALICE, 2);
        ledger = publish_transaction(dep.clone(), ALICE, &ledger, FlawFlags::default()).unwrap();

        let a_htlc = KeyId::htlc(ALICE, CHAN_AB, PaymentId(0));
        let b_htlc = KeyId::htlc(BOB, CHAN_AB, PaymentId(0));
        let htlc_out = Transaction::new(
            vec![TxInput {
                prev_tx: dep.id,
                output_index: 0,
                condition_index: 0,
                witness: sig_witness(&[KeyId::external(ALICE)]),
            }],
            vec![TxOutput {
                amount: 2,
                conditions: vec![
                    SpendingCondition::RevocationSig(KeyId::revocation(ALICE, CHAN_AB, 0)),
                    SpendingCondition::SigWithAbsoluteLock(a_htlc, BlockHeight(10)),
                    SpendingCondition::SigsWithPreimage(
                        [a_htlc, b_htlc].into_iter().collect(),
                        PaymentId(0),
                    ),
                ],
            }],
            BlockHeight(0),
        );
        ledger = publish_transaction(htlc_out.clone(), ALICE, &ledger, FlawFlags::default()).unwrap();

        // Bob's pre-signed success transaction, locktime 0, no preimage.
        let success = Transaction::new(
            vec![TxInput {
                prev_tx: htlc_out.id,
                output_index: 0,
                condition_index: 1,
                witness: sig_witness(&[a_htlc, b_htlc]),
            }],
            vec![TxOutput {
                amount: 2,
                conditions: vec![SpendingCondition::SingleSig(b_htlc)],
            }],
            BlockHeight(0),
        );
        assert_eq!(
            validate_transaction(&success, &ledger, FlawFlags::default()),
            Err(InvalidReason::Condition)
        );
        // With the conflation flaw the same transaction is accepted even
        // though the witness holds no preimage.
        let flawed = FlawFlags { conflate_disjuncts: true, ..Default::default() };
        assert_eq!(validate_transaction(&success, &ledger, flawed), Ok(()));
    }

    #[test]
    fn double_spend_detected_on_already_spent_htlc_output() {
        let mut ledger = LedgerState::default();
        ledger.time = BlockHeight(12);
        let dep = deposit(ALICE, 2);
        ledger = publish_transaction(dep.clone(), ALICE, &ledger, FlawFlags::default()).unwrap();
        let a_htlc = KeyId::htlc(ALICE, CHAN_AB, PaymentId(0));
        let commit = Transaction::new(
            vec![TxInput {
                prev_tx: dep.id,
                output_index: 0,
                condition_index: 0,
                witness: sig_witness(&[KeyId::external(ALICE)]),
            }],
            vec![TxOutput {
                amount: 2,
                conditions: vec![SpendingCondition::SigWithAbsoluteLock(a_htlc, BlockHeight(10))],
            }],
            BlockHeight(0),
        );
        ledger = publish_transaction(commit.clone(), ALICE, &ledger, FlawFlags::default()).unwrap();

        let spend = |locktime| {
            Transaction::new(
                vec![TxInput {
                    prev_tx: commit.id,
                    output_index: 0,
                    condition_index: 0,
                    witness: sig_witness(&[a_htlc]),
                }],
                vec![TxOutput { amount: 2, conditions: vec![SpendingCondition::SingleSig(a_htlc)] }],
                locktime,
            )
        };
        ledger = publish_transaction(spend(BlockHeight(10)), ALICE, &ledger, FlawFlags::default()).unwrap();
        // A second spend of the same output: rejected as double spend (the
        // revocation-after-timeout scenario of the first flaw).
        assert_eq!(
            validate_transaction(&spend(BlockHeight(11)), &ledger, FlawFlags::default()),
            Err(InvalidReason::DoubleSpend)
        );
    }

    #[test]
    fn locktime_gates_publication() {
        let ledger = LedgerState::default();
        let tx = Transaction::new(vec![], vec![], BlockHeight(5));
        assert_eq!(validate_transaction(&tx, &ledger, FlawFlags::default()), Err(InvalidReason::Locktime));
    }

    #[test]
    fn amount_mismatch_rejected() {
        let mut ledger = LedgerState::default();
        let dep = deposit(ALICE, 3);
        ledger = publish_transaction(dep.clone(), ALICE, &ledger, FlawFlags::default()).unwrap();
        let bad = Transaction::new(
            vec![TxInput {
                prev_tx: dep.id,
                output_index: 0,
                condition_index: 0,
                witness: sig_witness(&[KeyId::external(ALICE)]),
            }],
            vec![TxOutput { amount: 2, conditions: vec![SpendingCondition::SingleSig(KeyId::external(ALICE))] }],
            BlockHeight(0),
        );
        assert_eq!(validate_transaction(&bad, &ledger, FlawFlags::default()), Err(InvalidReason::Amounts));
    }
}

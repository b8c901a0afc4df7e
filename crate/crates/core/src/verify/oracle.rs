//! Exhaustive reference checker for small histories.

use rand::Rng;

use super::history::{by_key, validate, HistoryEntry, HistoryError, OpKind, Outcome};

/// Largest number of operations per key the oracle will search.
pub const ORACLE_OP_LIMIT: usize = 10;

/// Returns whether some per-key write order explains the whole history.
pub fn brute_force_oracle(history: &[HistoryEntry]) -> Result<bool, HistoryError> {
    validate(history)?;
    let groups = by_key(history);
    for (&key, ops) in &groups {
        if ops.len() > ORACLE_OP_LIMIT {
            return Err(HistoryError::OracleLimit {
                key,
                count: ops.len(),
                limit: ORACLE_OP_LIMIT,
            });
        }
    }
    Ok(groups.values().all(|ops| key_ok(ops)))
}

fn key_ok(ops: &[&HistoryEntry]) -> bool {
    let writes: Vec<&HistoryEntry> = ops
        .iter()
        .copied()
        .filter(|e| e.kind == OpKind::Write && e.outcome != Outcome::Dropped)
        .collect();
    let reads: Vec<&HistoryEntry> = ops
        .iter()
        .copied()
        .filter(|e| e.kind == OpKind::Read && e.observed().is_some())
        .collect();

    for r in &reads {
        let v = r.observed().unwrap();
        if v == 0 {
            continue;
        }
        match writes.iter().find(|w| w.version == v) {
            Some(w) if w.invoke <= r.complete.unwrap() => {}
            _ => return false,
        }
    }

    let mut order: Vec<usize> = (0..writes.len()).collect();
    permutations(&mut order, 0, &mut |perm| {
        let mut pos = std::collections::HashMap::new();
        pos.insert(0u64, 0usize);
        for (i, &w) in perm.iter().enumerate() {
            pos.insert(writes[w].version, i + 1);
        }
        order_ok(&writes, &reads, &pos)
    })
}

fn order_ok(
    writes: &[&HistoryEntry],
    reads: &[&HistoryEntry],
    pos: &std::collections::HashMap<u64, usize>,
) -> bool {
    let acked_before = |w: &HistoryEntry, t: u64| w.outcome == Outcome::Acked && w.complete.unwrap() < t;
    for a in writes {
        for b in writes {
            if acked_before(a, b.invoke) && pos[&a.version] >= pos[&b.version] {
                return false;
            }
        }
    }
    for r in reads {
        let pr = pos[&r.observed().unwrap()];
        for w in writes {
            if acked_before(w, r.invoke) && pos[&w.version] > pr {
                return false;
            }
        }
        for r2 in reads {
            if r2.client == r.client
                && r.complete.unwrap() < r2.invoke
                && pr > pos[&r2.observed().unwrap()]
            {
                return false;
            }
        }
    }
    true
}

/// Calls `check` on every permutation of `items[k..]` until it returns true.
fn permutations(items: &mut Vec<usize>, k: usize, check: &mut dyn FnMut(&[usize]) -> bool) -> bool {
    if k == items.len() {
        return check(items);
    }
    for i in k..items.len() {
        items.swap(k, i);
        if permutations(items, k + 1, check) {
            items.swap(k, i);
            return true;
        }
        items.swap(k, i);
    }
    false
}

/// Generates a random history of at most `max_ops` operations over two keys
/// and three clients. Roughly half of the generated histories are
/// consistent.
pub fn random_history<R: Rng>(rng: &mut R, max_ops: usize) -> Vec<HistoryEntry> {
    let n = rng.gen_range(0..=max_ops);
    let mut out = Vec::with_capacity(n);
    let mut next_version = [1u64; 2];
    let mut kinds = Vec::with_capacity(n);
    for _ in 0..n {
        kinds.push((rng.gen_bool(0.4), rng.gen_range(0..2u32)));
    }
    for (id, &(is_write, key)) in kinds.iter().enumerate() {
        if !is_write {
            continue;
        }
        let invoke = rng.gen_range(0..30);
        let mut w = HistoryEntry::write(id as u64, rng.gen_range(0..3), key, next_version[key as usize], invoke);
        next_version[key as usize] += 1;
        match rng.gen_range(0..20) {
            0..=13 => w = w.acked(invoke + rng.gen_range(0..10)),
            14..=16 => w = w.dropped(),
            _ => {}
        }
        out.push(w);
    }
    for (id, &(is_write, key)) in kinds.iter().enumerate() {
        if is_write {
            continue;
        }
        let invoke = rng.gen_range(0..40);
        let mut r = HistoryEntry::read(id as u64, rng.gen_range(0..3), key, invoke);
        if rng.gen_range(0..10) > 0 {
            let top = next_version[key as usize];
            let v = if rng.gen_range(0..40) == 0 { 99 } else { rng.gen_range(0..top) };
            r = r.returned(v, invoke + rng.gen_range(0..10));
        }
        out.push(r);
    }
    out
}

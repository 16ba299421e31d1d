//! B+ tree workload.
//!
//! Fanout-8 tree stored in the emulated region, one node per 16-word
//! allocator block. Every mutation goes through [`TxAccess`], so inserts
//! are ordinary transaction bodies with data-dependent control flow:
//! whether a split happens depends on what the reads return, which is
//! exactly the shape that exercises re-execution checks.
//!
//! Node layout (word offsets within the block):
//!   0        header: bit 0 leaf flag, bits 8.. entry count
//!   1..=7    keys
//!   leaf:     8..=14 values
//!   internal: 8..=15 children (count+1 used)
//!
//! Word 0 of the data region holds the root block address; 0 means empty.

use crate::body::{BTreeOp, TxAccess, TxStop};
use crate::config::REGION_BASE;

pub const ROOT_PTR_ADDR: u64 = REGION_BASE;
pub const MAX_KEYS: usize = 7;
/// Key space kept small so fuzzed runs collide and split often.
pub const KEY_SPACE: u64 = 1 << 16;

const LEAF_FLAG: u64 = 1;

fn hdr(is_leaf: bool, count: usize) -> u64 {
    ((count as u64) << 8) | if is_leaf { LEAF_FLAG } else { 0 }
}

fn hdr_count(h: u64) -> usize {
    (h >> 8) as usize
}

fn hdr_is_leaf(h: u64) -> bool {
    h & LEAF_FLAG != 0
}

fn key_addr(node: u64, i: usize) -> u64 {
    node + 8 * (1 + i as u64)
}

fn val_addr(node: u64, i: usize) -> u64 {
    node + 8 * (8 + i as u64)
}

fn child_addr(node: u64, i: usize) -> u64 {
    node + 8 * (8 + i as u64)
}

pub fn run_op<A: TxAccess>(a: &mut A, op: BTreeOp) -> Result<(), TxStop> {
    match op {
        BTreeOp::Insert { key, value } => insert(a, key, value),
        BTreeOp::Lookup { key } => lookup(a, key).map(|_| ()),
    }
}

pub fn lookup<A: TxAccess>(a: &mut A, key: u64) -> Result<Option<u64>, TxStop> {
    let mut node = a.read(ROOT_PTR_ADDR)?;
    if node == 0 {
        return Ok(None);
    }
    loop {
        let h = a.read(node)?;
        let count = hdr_count(h);
        if hdr_is_leaf(h) {
            for i in 0..count {
                if a.read(key_addr(node, i))? == key {
                    return Ok(Some(a.read(val_addr(node, i))?));
                }
            }
            return Ok(None);
        }
        let mut slot = count;
        for i in 0..count {
            if key < a.read(key_addr(node, i))? {
                slot = i;
                break;
            }
        }
        node = a.read(child_addr(node, slot))?;
    }
}

/// Result of inserting into a subtree: the separator key and new right
/// sibling when the child split.
struct Split {
    sep: u64,
    right: u64,
}

pub fn insert<A: TxAccess>(a: &mut A, key: u64, value: u64) -> Result<(), TxStop> {
    let root = a.read(ROOT_PTR_ADDR)?;
    if root == 0 {
        let node = a.alloc()?;
        a.write(node, hdr(true, 1))?;
        a.write(key_addr(node, 0), key)?;
        a.write(val_addr(node, 0), value)?;
        a.write(ROOT_PTR_ADDR, node)?;
        return Ok(());
    }
    if let Some(split) = insert_rec(a, root, key, value)? {
        let new_root = a.alloc()?;
        a.write(new_root, hdr(false, 1))?;
        a.write(key_addr(new_root, 0), split.sep)?;
        a.write(child_addr(new_root, 0), root)?;
        a.write(child_addr(new_root, 1), split.right)?;
        a.write(ROOT_PTR_ADDR, new_root)?;
    }
    Ok(())
}

fn insert_rec<A: TxAccess>(a: &mut A, node: u64, key: u64, value: u64) -> Result<Option<Split>, TxStop> {
    let h = a.read(node)?;
    let count = hdr_count(h);
    if hdr_is_leaf(h) {
        // find position; equal key overwrites in place
        let mut pos = count;
        for i in 0..count {
            let k = a.read(key_addr(node, i))?;
            if k == key {
                a.write(val_addr(node, i), value)?;
                return Ok(None);
            }
            if key < k {
                pos = i;
                break;
            }
        }
        if count < MAX_KEYS {
            shift_leaf(a, node, pos, count)?;
            a.write(key_addr(node, pos), key)?;
            a.write(val_addr(node, pos), value)?;
            a.write(node, hdr(true, count + 1))?;
            return Ok(None);
        }
        return split_leaf(a, node, pos, key, value).map(Some);
    }

    let mut slot = count;
    for i in 0..count {
        if key < a.read(key_addr(node, i))? {
            slot = i;
            break;
        }
    }
    let child = a.read(child_addr(node, slot))?;
    let Some(split) = insert_rec(a, child, key, value)? else {
        return Ok(None);
    };
    if count < MAX_KEYS {
        // shift keys [slot..count) and children [slot+1..=count) right
        for i in (slot..count).rev() {
            let k = a.read(key_addr(node, i))?;
            a.write(key_addr(node, i + 1), k)?;
        }
        for i in (slot + 1..=count).rev() {
            let c = a.read(child_addr(node, i))?;
            a.write(child_addr(node, i + 1), c)?;
        }
        a.write(key_addr(node, slot), split.sep)?;
        a.write(child_addr(node, slot + 1), split.right)?;
        a.write(node, hdr(false, count + 1))?;
        return Ok(None);
    }
    split_internal(a, node, slot, split).map(Some)
}

fn shift_leaf<A: TxAccess>(a: &mut A, node: u64, pos: usize, count: usize) -> Result<(), TxStop> {
    for i in (pos..count).rev() {
        let k = a.read(key_addr(node, i))?;
        a.write(key_addr(node, i + 1), k)?;
        let v = a.read(val_addr(node, i))?;
        a.write(val_addr(node, i + 1), v)?;
    }
    Ok(())
}

fn split_leaf<A: TxAccess>(a: &mut A, node: u64, pos: usize, key: u64, value: u64) -> Result<Split, TxStop> {
    // materialize the 8 entries in order, then redistribute 4/4
    let mut ks = Vec::with_capacity(MAX_KEYS + 1);
    let mut vs = Vec::with_capacity(MAX_KEYS + 1);
    for i in 0..MAX_KEYS {
        ks.push(a.read(key_addr(node, i))?);
        vs.push(a.read(val_addr(node, i))?);
    }
    ks.insert(pos, key);
    vs.insert(pos, value);

    let right = a.alloc()?;
    let half = (MAX_KEYS + 1) / 2;
    for i in 0..half {
        a.write(key_addr(node, i), ks[i])?;
        a.write(val_addr(node, i), vs[i])?;
    }
    a.write(node, hdr(true, half))?;
    for i in half..MAX_KEYS + 1 {
        a.write(key_addr(right, i - half), ks[i])?;
        a.write(val_addr(right, i - half), vs[i])?;
    }
    a.write(right, hdr(true, MAX_KEYS + 1 - half))?;
    Ok(Split { sep: ks[half], right })
}

fn split_internal<A: TxAccess>(a: &mut A, node: u64, slot: usize, child_split: Split) -> Result<Split, TxStop> {
    let mut ks = Vec::with_capacity(MAX_KEYS + 1);
    let mut cs = Vec::with_capacity(MAX_KEYS + 2);
    for i in 0..MAX_KEYS {
        ks.push(a.read(key_addr(node, i))?);
    }
    for i in 0..=MAX_KEYS {
        cs.push(a.read(child_addr(node, i))?);
    }
    ks.insert(slot, child_split.sep);
    cs.insert(slot + 1, child_split.right);

    // 8 keys: left keeps 4, key 4 moves up, right takes 3
    let mid = (MAX_KEYS + 1) / 2;
    let right = a.alloc()?;
    for (i, k) in ks[..mid].iter().enumerate() {
        a.write(key_addr(node, i), *k)?;
    }
    for (i, c) in cs[..=mid].iter().enumerate() {
        a.write(child_addr(node, i), *c)?;
    }
    a.write(node, hdr(false, mid))?;
    let rk = &ks[mid + 1..];
    let rc = &cs[mid + 1..];
    for (i, k) in rk.iter().enumerate() {
        a.write(key_addr(right, i), *k)?;
    }
    for (i, c) in rc.iter().enumerate() {
        a.write(child_addr(right, i), *c)?;
    }
    a.write(right, hdr(false, rk.len()))?;
    Ok(Split { sep: ks[mid], right })
}

/// Structural check over a raw word image (post-run or post-recovery):
/// sortedness within nodes, separator bounds, uniform leaf depth, and no
/// block visited twice. Returns the set of keys reachable from the root.
pub fn check_structure(read: &dyn Fn(u64) -> u64) -> Result<Vec<u64>, String> {
    let root = read(ROOT_PTR_ADDR);
    if root == 0 {
        return Ok(Vec::new());
    }
    let mut keys = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut leaf_depth = None;
    walk(read, root, 0, None, None, &mut keys, &mut seen, &mut leaf_depth)?;
    for w in keys.windows(2) {
        if w[0] >= w[1] {
            return Err(format!("keys out of order: {} then {}", w[0], w[1]));
        }
    }
    Ok(keys)
}

#[allow(clippy::too_many_arguments)]
fn walk(
    read: &dyn Fn(u64) -> u64,
    node: u64,
    depth: usize,
    lo: Option<u64>,
    hi: Option<u64>,
    keys: &mut Vec<u64>,
    seen: &mut std::collections::HashSet<u64>,
    leaf_depth: &mut Option<usize>,
) -> Result<(), String> {
    if !seen.insert(node) {
        return Err(format!("block {node:#x} reachable twice"));
    }
    if depth > 32 {
        return Err("depth over 32, likely a cycle".into());
    }
    let h = read(node);
    let count = hdr_count(h);
    if count == 0 || count > MAX_KEYS {
        return Err(format!("node {node:#x} has count {count}"));
    }
    let in_bounds = |k: u64| lo.is_none_or(|l| k >= l) && hi.is_none_or(|h| k < h);
    if hdr_is_leaf(h) {
        match *leaf_depth {
            None => *leaf_depth = Some(depth),
            Some(d) if d != depth => return Err(format!("leaf depth {depth} vs {d}")),
            _ => {}
        }
        for i in 0..count {
            let k = read(key_addr(node, i));
            if !in_bounds(k) {
                return Err(format!("leaf key {k} outside ({lo:?}, {hi:?})"));
            }
            keys.push(k);
        }
        return Ok(());
    }
    let mut child_lo = lo;
    for i in 0..count {
        let k = read(key_addr(node, i));
        if !in_bounds(k) {
            return Err(format!("separator {k} outside ({lo:?}, {hi:?})"));
        }
        walk(read, read(child_addr(node, i)), depth + 1, child_lo, Some(k), keys, seen, leaf_depth)?;
        child_lo = Some(k);
    }
    walk(read, read(child_addr(node, count)), depth + 1, child_lo, hi, keys, seen, leaf_depth)
}

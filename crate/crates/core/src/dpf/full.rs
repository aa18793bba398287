//! Full-domain evaluation.
//!
//! With `workers = 2^L`, a master pass expands the tree breadth-first down
//! to level `L`; each node there roots a perfect subtree that one worker
//! expands breadth-first to the leaves. Workers write disjoint leaf ranges
//! and are joined once at the end.
//!
//! Inside a subtree, levels below `depth - TILE_HEIGHT` are expanded in
//! tiles of at most `2^TILE_HEIGHT` leaves so the frontier buffers stay
//! bounded for large domains.

use std::thread;

use super::prf::Node;
use super::{words_for, DpfKey, ShareVector};
use crate::error::{Error, Result};

const TILE_HEIGHT: u32 = 12;

/// Evaluates `key` on every index of its domain using `workers` threads.
pub fn eval_full(key: &DpfKey, workers: usize) -> Result<ShareVector> {
    eval_full_counted(key, workers).map(|(v, _)| v)
}

fn check_workers(key: &DpfKey, workers: usize) -> Result<u32> {
    let depth = key.domain.depth();
    if !workers.is_power_of_two() {
        return Err(Error::Config(format!(
            "eval workers must be a power of two, got {workers}"
        )));
    }
    let limit = 1u64 << (depth - 1);
    if workers as u64 > limit {
        return Err(Error::Config(format!(
            "{workers} eval workers exceed the {limit} subtrees available at depth {depth}"
        )));
    }
    Ok(workers.trailing_zeros())
}

/// Expands every node of `frontier` into `out`, keeping only the first
/// `keep` children. Returns the number of PRF expansions.
fn expand_level(frontier: &[Node], key: &DpfKey, level: u32, keep: usize, out: &mut Vec<Node>) -> u64 {
    let cw = &key.correction_words[level as usize];
    out.clear();
    let parents = keep.div_ceil(2).min(frontier.len());
    for node in &frontier[..parents] {
        out.extend(node.children(cw));
    }
    out.truncate(keep);
    2 * parents as u64
}

/// Nodes at `level` whose leaf ranges intersect the first `span` leaves of
/// a subtree ending at `depth`.
fn needed(span: u64, depth: u32, level: u32) -> usize {
    span.div_ceil(1 << (depth - level)) as usize
}

struct SubtreeBits {
    words: Vec<u64>,
    len: u64,
    expansions: u64,
}

fn eval_subtree(key: &DpfKey, root: Node, root_level: u32, span: u64) -> SubtreeBits {
    let depth = key.domain.depth();
    let tile_height = (depth - root_level).min(TILE_HEIGHT);
    let tile_level = depth - tile_height;
    let mut expansions = 0;

    let mut tops = vec![root];
    let mut scratch = Vec::new();
    for level in root_level..tile_level {
        expansions += expand_level(&tops, key, level, needed(span, depth, level + 1), &mut scratch);
        std::mem::swap(&mut tops, &mut scratch);
    }

    let mut words = vec![0u64; words_for(span)];
    let tile_size = 1u64 << tile_height;
    let mut cur = Vec::with_capacity(tile_size as usize);
    let mut next = Vec::with_capacity(tile_size as usize);
    for (t, &tile_root) in tops.iter().enumerate() {
        let offset = t as u64 * tile_size;
        let tile_span = (span - offset).min(tile_size);
        cur.clear();
        cur.push(tile_root);
        for level in tile_level..depth {
            expansions += expand_level(&cur, key, level, needed(tile_span, depth, level + 1), &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        for (i, leaf) in cur.iter().enumerate() {
            let j = offset + i as u64;
            words[(j / 64) as usize] |= (leaf.output(key.leaf_correction) as u64) << (j % 64);
        }
    }
    SubtreeBits {
        words,
        len: span,
        expansions,
    }
}

pub(crate) fn eval_full_counted(key: &DpfKey, workers: usize) -> Result<(ShareVector, u64)> {
    let split = check_workers(key, workers)?;
    let depth = key.domain.depth();
    let n = key.domain.n_items();
    let subtree_leaves = 1u64 << (depth - split);

    let mut frontier = vec![key.root()];
    let mut scratch = Vec::new();
    let mut expansions = 0;
    for level in 0..split {
        expansions += expand_level(&frontier, key, level, needed(n, depth, level + 1), &mut scratch);
        std::mem::swap(&mut frontier, &mut scratch);
    }

    let span_of = |w: usize| (n - w as u64 * subtree_leaves).min(subtree_leaves);
    let parts: Vec<SubtreeBits> = if frontier.len() == 1 {
        vec![eval_subtree(key, frontier[0], split, span_of(0))]
    } else {
        thread::scope(|scope| {
            let handles: Vec<_> = frontier
                .iter()
                .enumerate()
                .map(|(w, &root)| scope.spawn(move || eval_subtree(key, root, split, span_of(w))))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("eval worker panicked"))
                .collect()
        })
    };

    let mut out = ShareVector::zeros(key.domain);
    for (w, part) in parts.iter().enumerate() {
        out.write_bits(w as u64 * subtree_leaves, &part.words, part.len);
        expansions += part.expansions;
    }
    Ok((out, expansions))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::super::{eval_point, gen, DomainParams, PointFunction};
    use super::*;

    #[test]
    fn rejects_bad_worker_counts() {
        let d = DomainParams::new(16).unwrap();
        let (k, _) = gen(d, PointFunction::indicator(0), [0; 32]).unwrap();
        assert!(matches!(eval_full(&k, 3), Err(Error::Config(_))));
        assert!(matches!(eval_full(&k, 0), Err(Error::Config(_))));
        assert!(matches!(eval_full(&k, 16), Err(Error::Config(_))));
        assert!(eval_full(&k, 8).is_ok());
    }

    #[test]
    fn worker_count_does_not_change_result() {
        let d = DomainParams::new(1 << 16).unwrap();
        let (k, _) = gen(d, PointFunction::indicator(12345), [8; 32]).unwrap();
        let base = eval_full(&k, 1).unwrap();
        for workers in [2, 4, 8, 16, 64] {
            assert_eq!(eval_full(&k, workers).unwrap(), base, "workers = {workers}");
        }
    }

    #[test]
    fn uneven_domains_match_point_eval() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        for n in [2u64, 3, 5, 63, 64, 65, 100, 4097, 5000, 9000] {
            let d = DomainParams::new(n).unwrap();
            let (k, _) = gen(d, PointFunction::indicator(n / 2), rng.gen()).unwrap();
            let max_workers = 1usize << (d.depth() - 1);
            for workers in [1, 2, 4, 8].into_iter().filter(|&w| w <= max_workers) {
                let v = eval_full(&k, workers).unwrap();
                for j in 0..n {
                    assert_eq!(v.get(j), eval_point(&k, j).unwrap(), "n={n} workers={workers} j={j}");
                }
            }
        }
    }

    #[test]
    fn expansion_budget() {
        for n in [2u64, 3, 1000, 1 << 14, (1 << 14) + 1] {
            let d = DomainParams::new(n).unwrap();
            let (k, _) = gen(d, PointFunction::indicator(0), [1; 32]).unwrap();
            for workers in [1, 2] {
                if workers as u64 > d.padded_size() / 2 {
                    continue;
                }
                let (_, count) = eval_full_counted(&k, workers).unwrap();
                assert!(count <= 4 * n, "n={n}: {count} expansions");
                assert!(count >= n, "n={n}: {count} expansions");
            }
        }
    }
}

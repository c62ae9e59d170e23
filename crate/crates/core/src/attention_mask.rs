//! Boolean attention layouts: causal history and the hybrid
//! causal-history / bidirectional-placeholder mask.
//!
//! Row `i` is a query, column `j` a key. A mask built for incremental use has
//! `cache_offset` cached keys in front of the queries' own keys, so query `i`
//! sits at global position `cache_offset + i`.

use std::fmt;

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HybridAttentionMask {
    allow: Vec<bool>,
    query_len: usize,
    key_len: usize,
    history_len: usize,
    mask_len: usize,
    cache_offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    /// The query row allows no key at all.
    EmptyRow,
    /// A history query attends to a key after its own position.
    Acausal,
    /// `key_len != cache_offset + query_len`, or the allow buffer has the wrong size.
    Shape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskViolation {
    pub row: usize,
    pub col: Option<usize>,
    pub kind: ViolationKind,
}

impl fmt::Display for MaskViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.col {
            Some(c) => write!(f, "{:?} at ({}, {})", self.kind, self.row, c),
            None => write!(f, "{:?} at row {}", self.kind, self.row),
        }
    }
}

/// How placeholder rows see each other. `Causal` is the "without hybrid
/// attention" ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlockAttention {
    #[default]
    Bidirectional,
    Causal,
}

impl HybridAttentionMask {
    /// Builds a mask from a per-entry rule. No validation is done here.
    pub fn from_fn(
        query_len: usize,
        cache_offset: usize,
        history_len: usize,
        mask_len: usize,
        mut rule: impl FnMut(usize, usize) -> bool,
    ) -> Self {
        let key_len = cache_offset + query_len;
        let mut allow = Vec::with_capacity(query_len * key_len);
        for i in 0..query_len {
            for j in 0..key_len {
                allow.push(rule(i, j));
            }
        }
        HybridAttentionMask {
            allow,
            query_len,
            key_len,
            history_len,
            mask_len,
            cache_offset,
        }
    }

    /// Wraps a raw allow matrix given as rows.
    pub fn from_rows(
        rows: &[Vec<bool>],
        cache_offset: usize,
        history_len: usize,
        mask_len: usize,
    ) -> Self {
        let query_len = rows.len();
        let key_len = rows.first().map_or(cache_offset, Vec::len);
        HybridAttentionMask {
            allow: rows.iter().flatten().copied().collect(),
            query_len,
            key_len,
            history_len,
            mask_len,
            cache_offset,
        }
    }

    pub fn query_len(&self) -> usize {
        self.query_len
    }

    pub fn key_len(&self) -> usize {
        self.key_len
    }

    pub fn history_len(&self) -> usize {
        self.history_len
    }

    pub fn mask_len(&self) -> usize {
        self.mask_len
    }

    pub fn cache_offset(&self) -> usize {
        self.cache_offset
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.key_len + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allow[i * self.key_len..(i + 1) * self.key_len]
    }

    pub fn popcount(&self) -> usize {
        self.allow.iter().filter(|&&a| a).count()
    }

    /// Rows `start..` as a cache-offset mask (the queries that remain when the
    /// first `start` positions are served from a cache).
    pub fn bottom_rows(&self, start: usize) -> Self {
        let query_len = self.query_len - start;
        HybridAttentionMask {
            allow: self.allow[start * self.key_len..].to_vec(),
            query_len,
            key_len: self.key_len,
            history_len: self.history_len,
            mask_len: self.mask_len,
            cache_offset: self.cache_offset + start,
        }
    }

    /// Leading `n x n` block.
    pub fn leading_block(&self, n: usize) -> Self {
        let mut allow = Vec::with_capacity(n * n);
        for i in 0..n {
            allow.extend_from_slice(&self.row(i)[..n]);
        }
        HybridAttentionMask {
            allow,
            query_len: n,
            key_len: n,
            history_len: self.history_len.min(n),
            mask_len: n.saturating_sub(self.history_len),
            cache_offset: 0,
        }
    }

    /// Checks shape, non-empty rows and causality of history rows, returning
    /// the first violation in row-major order.
    pub fn validate(&self) -> std::result::Result<(), MaskViolation> {
        if self.key_len != self.cache_offset + self.query_len
            || self.allow.len() != self.query_len * self.key_len
        {
            return Err(MaskViolation {
                row: 0,
                col: None,
                kind: ViolationKind::Shape,
            });
        }
        for i in 0..self.query_len {
            let global = self.cache_offset + i;
            let row = self.row(i);
            if global < self.history_len {
                if let Some(j) = (global + 1..self.key_len).find(|&j| row[j]) {
                    return Err(MaskViolation {
                        row: i,
                        col: Some(j),
                        kind: ViolationKind::Acausal,
                    });
                }
            }
            if !row.iter().any(|&a| a) {
                return Err(MaskViolation {
                    row: i,
                    col: None,
                    kind: ViolationKind::EmptyRow,
                });
            }
        }
        Ok(())
    }

    /// `#` for allowed, `.` for blocked, one line per query row.
    pub fn render(&self) -> String {
        let mut out = String::with_capacity(self.query_len * (self.key_len + 1));
        for i in 0..self.query_len {
            out.extend(self.row(i).iter().map(|&a| if a { '#' } else { '.' }));
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for HybridAttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Lower-triangular mask over `seq_len` positions.
pub fn construct_causal_mask(seq_len: usize) -> Result<HybridAttentionMask> {
    if seq_len == 0 {
        return Err(invalid("causal mask needs seq_len >= 1"));
    }
    Ok(HybridAttentionMask::from_fn(seq_len, 0, seq_len, 0, |i, j| j <= i))
}

/// Causal rows for `query_len` new positions following `cached` cached ones.
pub fn causal_mask_with_cache(cached: usize, query_len: usize) -> Result<HybridAttentionMask> {
    if query_len == 0 {
        return Err(invalid("causal mask needs at least one query"));
    }
    let h = cached + query_len;
    Ok(HybridAttentionMask::from_fn(query_len, cached, h, 0, |i, j| {
        j <= cached + i
    }))
}

fn check_hn(history_len: usize, mask_len: usize) -> Result<()> {
    if history_len == 0 || mask_len == 0 {
        return Err(invalid(format!(
            "hybrid mask needs history_len >= 1 and mask_len >= 1, got {history_len} and {mask_len}"
        )));
    }
    Ok(())
}

fn block_rule(block: BlockAttention, h: usize, n: usize) -> impl Fn(usize, usize) -> bool {
    move |i, j| {
        if i < h {
            j <= i
        } else {
            match block {
                BlockAttention::Bidirectional => j < h + n,
                BlockAttention::Causal => j <= i,
            }
        }
    }
}

/// Full `(H+N) x (H+N)` layout: history rows causal, placeholder rows see all
/// history and every placeholder. History rows never see placeholders.
pub fn construct_hybrid_mask(history_len: usize, mask_len: usize) -> Result<HybridAttentionMask> {
    construct_block_mask(history_len, mask_len, BlockAttention::Bidirectional)
}

/// Placeholder rows only, with the history served from a cache of length H.
pub fn hybrid_mask_with_cache(history_len: usize, mask_len: usize) -> Result<HybridAttentionMask> {
    block_mask_with_cache(history_len, mask_len, BlockAttention::Bidirectional)
}

/// Like [`construct_hybrid_mask`] with a choice of placeholder-block attention.
pub fn construct_block_mask(
    history_len: usize,
    mask_len: usize,
    block: BlockAttention,
) -> Result<HybridAttentionMask> {
    check_hn(history_len, mask_len)?;
    let (h, n) = (history_len, mask_len);
    Ok(HybridAttentionMask::from_fn(h + n, 0, h, n, block_rule(block, h, n)))
}

pub fn block_mask_with_cache(
    history_len: usize,
    mask_len: usize,
    block: BlockAttention,
) -> Result<HybridAttentionMask> {
    check_hn(history_len, mask_len)?;
    let (h, n) = (history_len, mask_len);
    let rule = block_rule(block, h, n);
    Ok(HybridAttentionMask::from_fn(n, h, h, n, |i, j| rule(h + i, j)))
}

/// Teacher-forcing layout `[history | placeholders | tail]`.
///
/// The leading `(H+N) x (H+N)` block is exactly [`construct_block_mask`].
/// Tail rows are the response tokens after `<seg>`: causal over history and
/// tail, blind to the placeholders, which in turn never see the tail. The
/// placeholder and tail computations are therefore independent, and one
/// forward over this layout equals a phase-2 pass plus a plain causal pass.
pub fn teacher_forced_mask(
    history_len: usize,
    mask_len: usize,
    tail_len: usize,
    block: BlockAttention,
) -> Result<HybridAttentionMask> {
    check_hn(history_len, mask_len)?;
    let (h, n) = (history_len, mask_len);
    let head = block_rule(block, h, n);
    Ok(HybridAttentionMask::from_fn(h + n + tail_len, 0, h, n, move |i, j| {
        if i < h + n {
            head(i, j)
        } else {
            j < h || (j >= h + n && j <= i)
        }
    }))
}

//! TRIM: keep the `ceil(K·n)` largest-magnitude entries of a task vector.
//!
//! Entries are ranked by `(|δ|, index)` with larger magnitude first and,
//! among equal magnitudes, the smaller flat index first. The ranking is a
//! strict total order, so the kept sets are nested as `K` grows.
//!
//! Selection works on the bit pattern of `|δ|` as an `f64`, which orders
//! non-negative doubles exactly like their values. A 16-bit radix histogram
//! narrows the threshold bucket; once the bucket is small enough its members
//! are collected and sorted. Every pass walks the source in fixed-size
//! chunks, so memory does not grow with the tensor.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Elements per chunk for every streamed pass. Fixed so that results never
/// depend on the worker count.
pub const CHUNK_ELEMS: usize = 1 << 20;

/// Largest threshold bucket collected into memory (16 bytes per entry).
const CANDIDATE_CAP: usize = 1 << 22;

const DIGIT_BITS: u32 = 16;
const BUCKETS: usize = 1 << DIGIT_BITS;

/// Trim density `K`: the kept fraction, in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Density(f64);

impl Density {
    pub const FULL: Density = Density(1.0);

    pub fn new(k: f64) -> Result<Self> {
        if k > 0.0 && k <= 1.0 {
            Ok(Density(k))
        } else {
            Err(Error::InvalidParam(format!("density must be in (0,1], got {k}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn is_full(self) -> bool {
        self.0 == 1.0
    }

    /// `ceil(K·n)`, treating products within 1e-9 relative of an integer
    /// as that integer so that e.g. `0.07 × 100` keeps 7, not 8.
    pub fn kept_count(self, n: usize) -> usize {
        if n == 0 {
            return 0;
        }
        let x = self.0 * n as f64;
        let r = x.round();
        let m = if (x - r).abs() <= 1e-9 * x.max(1.0) { r } else { x.ceil() };
        (m as usize).clamp(1, n)
    }
}

impl TryFrom<f64> for Density {
    type Error = String;

    fn try_from(k: f64) -> std::result::Result<Self, String> {
        Density::new(k).map_err(|e| e.to_string().trim_start_matches("invalid parameter: ").to_string())
    }
}

impl From<Density> for f64 {
    fn from(d: Density) -> f64 {
        d.0
    }
}

/// Anything that can produce task-vector entries for a range of flat
/// indices. Implementations must be deterministic.
pub trait DeltaSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Replace `out` with the entries for `range`.
    fn fill(&self, range: Range<usize>, out: &mut Vec<f64>) -> Result<()>;
}

impl DeltaSource for [f64] {
    fn len(&self) -> usize {
        <[f64]>::len(self)
    }

    fn fill(&self, range: Range<usize>, out: &mut Vec<f64>) -> Result<()> {
        out.clear();
        out.extend_from_slice(&self[range]);
        Ok(())
    }
}

#[inline]
fn magnitude_bits(d: f64) -> u64 {
    d.abs().to_bits()
}

/// Decision rule produced by selection: an entry is kept when its magnitude
/// exceeds the threshold, or equals it at an index no later than
/// `last_tie`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrimPlan {
    keep_all: bool,
    threshold: u64,
    last_tie: usize,
    kept: usize,
    len: usize,
}

impl TrimPlan {
    pub fn keep_all(len: usize) -> Self {
        Self {
            keep_all: true,
            threshold: 0,
            last_tie: usize::MAX,
            kept: len,
            len,
        }
    }

    pub fn compute<S: DeltaSource + ?Sized>(source: &S, density: Density) -> Result<Self> {
        Self::compute_with(source, density, CHUNK_ELEMS, CANDIDATE_CAP)
    }

    pub(crate) fn compute_with<S: DeltaSource + ?Sized>(
        source: &S,
        density: Density,
        chunk: usize,
        cap: usize,
    ) -> Result<Self> {
        let n = source.len();
        let m = density.kept_count(n);
        if m == n {
            return Ok(Self::keep_all(n));
        }
        let chunks = chunk_ranges(n, chunk);

        // pass 1: top digit histogram plus a zero check
        let (mut hist, nonzero) = chunks
            .par_iter()
            .map(|r| {
                let mut buf = Vec::new();
                source.fill(r.clone(), &mut buf)?;
                let mut h = vec![0u64; BUCKETS];
                let mut nz = 0u64;
                for &d in &buf {
                    let b = magnitude_bits(d);
                    h[(b >> (64 - DIGIT_BITS)) as usize] += 1;
                    nz += (b != 0) as u64;
                }
                Ok::<_, Error>((h, nz))
            })
            .try_reduce(|| (vec![0u64; BUCKETS], 0), |a, b| Ok(merge_hist(a, b)))?;
        if nonzero == 0 {
            return Ok(Self::keep_all(n));
        }

        let mut prefix = 0u64;
        let mut shift = 64 - DIGIT_BITS;
        let mut need = m as u64;
        loop {
            let (digit, above, count) = locate(&hist, need);
            prefix = (prefix << DIGIT_BITS) | digit as u64;
            need -= above;

            if count as usize <= cap {
                let mut cands: Vec<(u64, usize)> = chunks
                    .par_iter()
                    .map(|r| {
                        let mut buf = Vec::new();
                        source.fill(r.clone(), &mut buf)?;
                        Ok(buf
                            .iter()
                            .enumerate()
                            .filter_map(|(i, &d)| {
                                let b = magnitude_bits(d);
                                (b >> shift == prefix).then_some((b, r.start + i))
                            })
                            .collect::<Vec<_>>())
                    })
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .flatten()
                    .collect();
                let k = need as usize - 1;
                cands.select_nth_unstable_by(k, |a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
                let (threshold, last_tie) = cands[k];
                return Ok(Self {
                    keep_all: false,
                    threshold,
                    last_tie,
                    kept: m,
                    len: n,
                });
            }

            if shift == 0 {
                // a bucket of exact ties: find the need-th one in index order
                let threshold = prefix;
                let counts: Vec<u64> = chunks
                    .par_iter()
                    .map(|r| {
                        let mut buf = Vec::new();
                        source.fill(r.clone(), &mut buf)?;
                        Ok(buf.iter().filter(|&&d| magnitude_bits(d) == threshold).count() as u64)
                    })
                    .collect::<Result<_>>()?;
                let mut remaining = need;
                for (r, c) in chunks.iter().zip(counts) {
                    if remaining > c {
                        remaining -= c;
                        continue;
                    }
                    let mut buf = Vec::new();
                    source.fill(r.clone(), &mut buf)?;
                    let pos = buf
                        .iter()
                        .enumerate()
                        .filter(|(_, &d)| magnitude_bits(d) == threshold)
                        .nth(remaining as usize - 1)
                        .map(|(i, _)| r.start + i)
                        .expect("tie count and scan agree");
                    return Ok(Self {
                        keep_all: false,
                        threshold,
                        last_tie: pos,
                        kept: m,
                        len: n,
                    });
                }
                unreachable!("tie bucket holds at least `need` entries");
            }

            // refine the next digit within the current bucket
            let next = shift - DIGIT_BITS;
            let (p, s) = (prefix, shift);
            hist = chunks
                .par_iter()
                .map(|r| {
                    let mut buf = Vec::new();
                    source.fill(r.clone(), &mut buf)?;
                    let mut h = vec![0u64; BUCKETS];
                    for &d in &buf {
                        let b = magnitude_bits(d);
                        if b >> s == p {
                            h[((b >> next) & (BUCKETS as u64 - 1)) as usize] += 1;
                        }
                    }
                    Ok::<_, Error>((h, 0))
                })
                .try_reduce(|| (vec![0u64; BUCKETS], 0), |a, b| Ok(merge_hist(a, b)))?
                .0;
            shift = next;
        }
    }

    #[inline]
    pub fn keeps(&self, index: usize, delta: f64) -> bool {
        if self.keep_all {
            return true;
        }
        let b = magnitude_bits(delta);
        b > self.threshold || (b == self.threshold && index <= self.last_tie)
    }

    /// Number of entries the plan keeps.
    pub fn kept(&self) -> usize {
        self.kept
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_keep_all(&self) -> bool {
        self.keep_all
    }
}

fn merge_hist(mut a: (Vec<u64>, u64), b: (Vec<u64>, u64)) -> (Vec<u64>, u64) {
    for (x, y) in a.0.iter_mut().zip(&b.0) {
        *x += y;
    }
    a.1 += b.1;
    a
}

/// Walk buckets from the top; return the bucket holding the `need`-th
/// largest entry, how many entries lie strictly above it, and its size.
fn locate(hist: &[u64], need: u64) -> (usize, u64, u64) {
    let mut above = 0u64;
    for digit in (0..hist.len()).rev() {
        let c = hist[digit];
        if above + c >= need {
            return (digit, above, c);
        }
        above += c;
    }
    unreachable!("histogram holds at least `need` entries")
}

pub(crate) fn chunk_ranges(n: usize, chunk: usize) -> Vec<Range<usize>> {
    (0..n.div_ceil(chunk))
        .map(|i| i * chunk..((i + 1) * chunk).min(n))
        .collect()
}

/// Boolean keep-mask for `delta` at density `K`.
pub fn trim_mask(delta: &[f64], density: Density) -> Vec<bool> {
    let plan = TrimPlan::compute(delta, density).expect("slice sources are infallible");
    delta.iter().enumerate().map(|(i, &d)| plan.keeps(i, d)).collect()
}

/// Zero every entry outside the top `ceil(K·n)` by magnitude.
pub fn trim(delta: &[f64], density: Density) -> Vec<f64> {
    let plan = TrimPlan::compute(delta, density).expect("slice sources are infallible");
    delta
        .iter()
        .enumerate()
        .map(|(i, &d)| if plan.keeps(i, d) { d } else { 0.0 })
        .collect()
}

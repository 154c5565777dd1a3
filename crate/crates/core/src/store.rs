//! Sparse binary counting tree over a fixed-point grid.
//!
//! Each point is quantised to a cell whose id is the concatenation of the
//! fixed-point bits of every coordinate (coordinate-major: all bits of the
//! first coordinate, most significant first, then the second, ...). The tree
//! stores a count for every prefix of every inserted cell id, so an increment
//! touches exactly `depth + 1` nodes and sampling a cell proportionally to its
//! count is a walk from the root choosing each child with probability
//! `child / parent`. Only prefixes of inserted cells are stored.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::kernel::{header_field, parse_header, parse_num};
use crate::points::Points;

/// A bit string, most significant bit first.
///
/// Ordering is lexicographic on the bits (then by length), which for ids of
/// equal length is numeric order of the cell index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct CellBits {
    words: Vec<u64>,
    len: usize,
}

impl CellBits {
    pub fn new() -> Self {
        CellBits::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit index out of range");
        (self.words[i / 64] >> (63 - i % 64)) & 1 == 1
    }

    pub fn push(&mut self, bit: bool) {
        if self.len % 64 == 0 {
            self.words.push(0);
        }
        if bit {
            let i = self.len;
            self.words[i / 64] |= 1 << (63 - i % 64);
        }
        self.len += 1;
    }

    /// The first `n` bits.
    pub fn prefix(&self, n: usize) -> CellBits {
        assert!(n <= self.len);
        let mut words: Vec<u64> = self.words[..n.div_ceil(64)].to_vec();
        if n % 64 != 0 {
            let last = words.len() - 1;
            words[last] &= !0u64 << (64 - n % 64);
        }
        CellBits { words, len: n }
    }

    pub fn child(&self, bit: bool) -> CellBits {
        let mut c = self.clone();
        c.push(bit);
        c
    }
}

impl fmt::Display for CellBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.len {
            f.write_str(if self.get(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl std::str::FromStr for CellBits {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut bits = CellBits::new();
        for ch in s.chars() {
            match ch {
                '0' => bits.push(false),
                '1' => bits.push(true),
                other => return Err(Error::invalid(format!("invalid bit {other:?}"))),
            }
        }
        Ok(bits)
    }
}

/// Axis-aligned box split into `2^bits_per_coord` cells of pitch `delta` per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    delta: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
    bits_per_coord: u32,
}

impl GridSpec {
    /// Builds a grid over `[lower, upper]`, padding `upper` so that every axis
    /// spans a power-of-two number of cells.
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, delta: f64) -> Result<Self> {
        check_dim(lower.len(), upper.len())?;
        if lower.is_empty() {
            return Err(Error::invalid("grid dimension must be at least 1"));
        }
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::invalid(format!("grid pitch must be positive, got {delta}")));
        }
        let mut bits = 1u32;
        for (l, u) in lower.iter().zip(&upper) {
            if !(l.is_finite() && u.is_finite() && u > l) {
                return Err(Error::invalid(format!("grid bounds must satisfy lower < upper, got [{l}, {u}]")));
            }
            // tolerance keeps an already padded box at the same depth
            let cells = ((u - l) / delta - 1e-9).ceil().max(2.0);
            let b = cells.log2().ceil() as u32;
            bits = bits.max(b);
        }
        if bits > 62 {
            return Err(Error::invalid("grid too fine: more than 62 bits per coordinate"));
        }
        let span = delta * (1u64 << bits) as f64;
        let upper = lower.iter().map(|l| l + span).collect();
        Ok(GridSpec {
            delta,
            lower,
            upper,
            bits_per_coord: bits,
        })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn bits_per_coord(&self) -> u32 {
        self.bits_per_coord
    }

    /// Length of a full cell id.
    pub fn depth(&self) -> usize {
        self.dim() * self.bits_per_coord as usize
    }

    fn cells_per_axis(&self) -> u64 {
        1u64 << self.bits_per_coord
    }

    /// Fixed-point bit string of the cell containing `x`.
    pub fn grid_index(&self, x: &[f64]) -> Result<CellBits> {
        check_dim(self.dim(), x.len())?;
        let mut bits = CellBits::new();
        let last = self.cells_per_axis() - 1;
        for (i, &xi) in x.iter().enumerate() {
            let (lo, hi) = (self.lower[i], self.upper[i]);
            if !(xi >= lo && xi <= hi) {
                return Err(Error::OutOfBox {
                    coord: i,
                    value: xi,
                    lower: lo,
                    upper: hi,
                });
            }
            let k = (((xi - lo) / self.delta).floor() as u64).min(last);
            for b in (0..self.bits_per_coord).rev() {
                bits.push((k >> b) & 1 == 1);
            }
        }
        Ok(bits)
    }

    /// Centre of the cell with the given full-length id.
    pub fn cell_center(&self, cell: &CellBits) -> Result<Vec<f64>> {
        check_dim(self.depth(), cell.len())?;
        let b = self.bits_per_coord as usize;
        Ok((0..self.dim())
            .map(|i| {
                let k = (0..b).fold(0u64, |acc, j| (acc << 1) | cell.get(i * b + j) as u64);
                self.lower[i] + (k as f64 + 0.5) * self.delta
            })
            .collect())
    }
}

/// Bit layout of cell ids, written to dump headers.
pub const BIT_ORDER: &str = "coordinate-major";

/// Counting tree holding the empirical distribution of inserted points.
#[derive(Debug, Clone)]
pub struct CountTree {
    spec: GridSpec,
    nodes: BTreeMap<CellBits, u64>,
}

impl CountTree {
    pub fn new(spec: GridSpec) -> Self {
        CountTree {
            spec,
            nodes: BTreeMap::new(),
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    /// Adds one point; returns the number of node counts touched.
    pub fn increment(&mut self, x: &[f64]) -> Result<usize> {
        let cell = self.spec.grid_index(x)?;
        Ok(self.add_cell(&cell, 1))
    }

    fn add_cell(&mut self, cell: &CellBits, count: u64) -> usize {
        for l in 0..=cell.len() {
            *self.nodes.entry(cell.prefix(l)).or_insert(0) += count;
        }
        cell.len() + 1
    }

    pub fn total(&self) -> u64 {
        self.count(&CellBits::new())
    }

    pub fn count(&self, prefix: &CellBits) -> u64 {
        self.nodes.get(prefix).copied().unwrap_or(0)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Stored nodes with their counts, in id order.
    pub fn nodes(&self) -> impl Iterator<Item = (&CellBits, u64)> {
        self.nodes.iter().map(|(k, &v)| (k, v))
    }

    /// Non-empty leaves sorted by cell id.
    pub fn leaf_distribution(&self) -> Vec<(CellBits, u64)> {
        let depth = self.spec.depth();
        self.nodes
            .iter()
            .filter(|(k, _)| k.len() == depth)
            .map(|(k, &v)| (k.clone(), v))
            .collect()
    }

    /// Draws a leaf with probability `count / total` by descending from the root.
    pub fn sample_cell<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(CellBits, Vec<f64>)> {
        let mut node = CellBits::new();
        let mut here = self.total();
        if here == 0 {
            return Err(Error::Empty("count tree"));
        }
        for _ in 0..self.spec.depth() {
            let left = node.child(false);
            let c0 = self.count(&left);
            if rng.gen_range(0..here) < c0 {
                node = left;
                here = c0;
            } else {
                node = node.child(true);
                here -= c0;
            }
        }
        let center = self.spec.cell_center(&node)?;
        Ok((node, center))
    }

    /// Cell centres repeated by multiplicity, in id order.
    pub fn expand_centers(&self) -> Points {
        let mut pts = Points::with_capacity(self.spec.dim(), self.total() as usize);
        for (cell, count) in self.leaf_distribution() {
            let c = self.spec.cell_center(&cell).expect("leaf has full depth");
            for _ in 0..count {
                pts.push(&c).expect("grid dimension");
            }
        }
        pts
    }

    pub fn write_dump<W: Write>(&self, w: &mut W) -> Result<()> {
        let csv = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        writeln!(
            w,
            "# D={} delta={} lower={} upper={} total={} order={BIT_ORDER}",
            self.spec.dim(),
            self.spec.delta,
            csv(&self.spec.lower),
            csv(&self.spec.upper),
            self.total()
        )?;
        for (cell, count) in self.leaf_distribution() {
            writeln!(w, "{cell} {count}")?;
        }
        Ok(())
    }

    pub fn read_dump<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(1, "missing tree header"))??;
        let fields = parse_header(&header, 1)?;
        let d: usize = parse_num(header_field(&fields, "D", 1)?, 1)?;
        let delta: f64 = parse_num(header_field(&fields, "delta", 1)?, 1)?;
        let parse_csv = |key: &str| -> Result<Vec<f64>> {
            header_field(&fields, key, 1)?
                .split(',')
                .map(|s| parse_num(s, 1))
                .collect()
        };
        let lower = parse_csv("lower")?;
        let upper = parse_csv("upper")?;
        let total: u64 = parse_num(header_field(&fields, "total", 1)?, 1)?;
        let order = header_field(&fields, "order", 1)?;
        if order != BIT_ORDER {
            return Err(Error::parse(1, format!("unsupported bit order {order:?}")));
        }
        check_dim(d, lower.len())?;
        let spec = GridSpec::new(lower, upper.clone(), delta)?;
        if spec.upper != upper {
            return Err(Error::parse(1, "upper bound is not a padded grid boundary"));
        }
        let mut tree = CountTree::new(spec);
        for (i, line) in lines.enumerate() {
            let line = line?;
            let lineno = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let mut toks = line.split_whitespace();
            let (Some(cell), Some(count), None) = (toks.next(), toks.next(), toks.next()) else {
                return Err(Error::parse(lineno, "expected `<cell bits> <count>`"));
            };
            let cell: CellBits = cell.parse().map_err(|e: Error| Error::parse(lineno, e.to_string()))?;
            if cell.len() != tree.spec.depth() {
                return Err(Error::parse(lineno, "cell id has the wrong length"));
            }
            let count: u64 = parse_num(count, lineno)?;
            tree.add_cell(&cell, count);
        }
        if tree.total() != total {
            return Err(Error::parse(1, format!("header total {total} != leaf sum {}", tree.total())));
        }
        Ok(tree)
    }
}

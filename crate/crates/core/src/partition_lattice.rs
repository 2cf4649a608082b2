//! Set partitions of finite site sets and the incidence algebra of their
//! refinement lattice.
//!
//! Sites carry labels `1..=64`; a subset is a bitmask with bit `i - 1` set for
//! site `i`. A [`Partition`] stores its blocks sorted by minimum element, so
//! structural equality is partition equality. Partitions of a subset keep the
//! original site labels.
//!
//! Text form: blocks joined by `|`, sites by `,`, e.g. `1,2|3,4`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{domain, same_ground, Error, Result};

pub const MAX_SITES: usize = 64;

/// Iterates the 1-based labels of the set bits of `mask` in increasing order.
pub(crate) fn bits(mut mask: u64) -> impl Iterator<Item = usize> {
    std::iter::from_fn(move || {
        if mask == 0 {
            None
        } else {
            let i = mask.trailing_zeros() as usize;
            mask &= mask - 1;
            Some(i + 1)
        }
    })
}

/// A nonempty set of site labels.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroundSet(u64);

impl GroundSet {
    pub fn new(elements: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut mask = 0u64;
        for e in elements {
            if e == 0 || e > MAX_SITES {
                return domain(format!("site label {e} outside 1..={MAX_SITES}"));
            }
            let bit = 1u64 << (e - 1);
            if mask & bit != 0 {
                return domain(format!("duplicate site {e}"));
            }
            mask |= bit;
        }
        Self::from_mask(mask)
    }

    /// The sites `{1, ..., n}`.
    pub fn range(n: usize) -> Result<Self> {
        if n == 0 || n > MAX_SITES {
            return domain(format!("site count {n} outside 1..={MAX_SITES}"));
        }
        Ok(Self(if n == 64 { u64::MAX } else { (1u64 << n) - 1 }))
    }

    pub fn from_mask(mask: u64) -> Result<Self> {
        if mask == 0 {
            domain("empty ground set")
        } else {
            Ok(Self(mask))
        }
    }

    pub fn mask(self) -> u64 {
        self.0
    }

    pub fn cardinality(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn min(self) -> usize {
        self.0.trailing_zeros() as usize + 1
    }

    pub fn contains(self, site: usize) -> bool {
        (1..=MAX_SITES).contains(&site) && self.0 & (1u64 << (site - 1)) != 0
    }

    pub fn is_subset_of(self, other: GroundSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn elements(self) -> impl Iterator<Item = usize> {
        bits(self.0)
    }

    /// Zero-based rank of `site` within this set.
    pub fn position(self, site: usize) -> Option<usize> {
        if self.contains(site) {
            let below = (1u64 << (site - 1)) - 1;
            Some((self.0 & below).count_ones() as usize)
        } else {
            None
        }
    }

    /// All nonempty subsets, smaller sets first, ties broken by mask.
    pub fn subsets(self) -> Vec<GroundSet> {
        let mut out = Vec::new();
        let mut s = self.0;
        while s != 0 {
            out.push(GroundSet(s));
            s = (s - 1) & self.0;
        }
        out.sort_by_key(|g| (g.cardinality(), g.0));
        out
    }
}

impl fmt::Display for GroundSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (k, e) in self.elements().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{e}")?;
        }
        write!(f, "}}")
    }
}

impl fmt::Debug for GroundSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// A set partition in canonical block order.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Partition {
    blocks: Vec<u64>,
}

fn min_key(block: &u64) -> u32 {
    block.trailing_zeros()
}

impl Partition {
    /// Canonicalizes blocks already known to be nonempty and disjoint.
    pub(crate) fn from_disjoint_masks(mut blocks: Vec<u64>) -> Self {
        blocks.sort_unstable_by_key(min_key);
        Self { blocks }
    }

    pub fn from_block_masks(masks: impl IntoIterator<Item = u64>) -> Result<Self> {
        let mut seen = 0u64;
        let mut blocks = Vec::new();
        for m in masks {
            if m == 0 {
                return domain("empty block");
            }
            if m & seen != 0 {
                return domain("blocks overlap");
            }
            seen |= m;
            blocks.push(m);
        }
        if blocks.is_empty() {
            return domain("partition without blocks");
        }
        Ok(Self::from_disjoint_masks(blocks))
    }

    pub fn from_blocks<I, B>(blocks: I) -> Result<Self>
    where
        I: IntoIterator<Item = B>,
        B: IntoIterator<Item = usize>,
    {
        let masks = blocks
            .into_iter()
            .map(|b| GroundSet::new(b).map(GroundSet::mask))
            .collect::<Result<Vec<_>>>()?;
        Self::from_block_masks(masks)
    }

    /// The single-block partition `1̲` of `ground`.
    pub fn one(ground: GroundSet) -> Self {
        Self { blocks: vec![ground.mask()] }
    }

    /// The all-singletons partition `0̲` of `ground`.
    pub fn zero(ground: GroundSet) -> Self {
        Self {
            blocks: ground.elements().map(|e| 1u64 << (e - 1)).collect(),
        }
    }

    pub fn ground(&self) -> GroundSet {
        GroundSet(self.blocks.iter().fold(0, |acc, b| acc | b))
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_masks(&self) -> &[u64] {
        &self.blocks
    }

    pub fn blocks(&self) -> impl Iterator<Item = GroundSet> + '_ {
        self.blocks.iter().map(|&b| GroundSet(b))
    }

    pub fn is_one(&self) -> bool {
        self.blocks.len() == 1
    }

    pub fn is_zero(&self) -> bool {
        self.blocks.iter().all(|b| b.count_ones() == 1)
    }

    /// The block containing `site`, if any.
    pub fn block_of(&self, site: usize) -> Option<GroundSet> {
        if !(1..=MAX_SITES).contains(&site) {
            return None;
        }
        let bit = 1u64 << (site - 1);
        self.blocks.iter().find(|&&b| b & bit != 0).map(|&b| GroundSet(b))
    }

    /// Parses the text form and checks that it covers exactly `ground`.
    pub fn parse(text: &str, ground: GroundSet) -> Result<Self> {
        let p: Partition = text.parse()?;
        if p.ground() != ground {
            return Err(Error::Parse {
                input: text.to_string(),
                reason: format!("covers {} but the ground set is {ground}", p.ground()),
            });
        }
        Ok(p)
    }
}

impl FromStr for Partition {
    type Err = Error;

    /// Parses the text form; the ground set is the union of the blocks.
    fn from_str(text: &str) -> Result<Self> {
        let err = |reason: String| Error::Parse {
            input: text.to_string(),
            reason,
        };
        let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
        if compact.is_empty() {
            return Err(err("empty input".into()));
        }
        let mut seen = 0u64;
        let mut blocks = Vec::new();
        for block in compact.split('|') {
            if block.is_empty() {
                return Err(err("empty block".into()));
            }
            let mut mask = 0u64;
            for item in block.split(',') {
                let site: usize = item
                    .parse()
                    .map_err(|_| err(format!("`{item}` is not a site label")))?;
                if site == 0 || site > MAX_SITES {
                    return Err(err(format!("site {site} outside 1..={MAX_SITES}")));
                }
                let bit = 1u64 << (site - 1);
                if seen & bit != 0 {
                    return Err(err(format!("site {site} appears twice")));
                }
                seen |= bit;
                mask |= bit;
            }
            blocks.push(mask);
        }
        Ok(Self::from_disjoint_masks(blocks))
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, &b) in self.blocks.iter().enumerate() {
            if k > 0 {
                write!(f, "|")?;
            }
            for (j, e) in bits(b).enumerate() {
                if j > 0 {
                    write!(f, ",")?;
                }
                write!(f, "{e}")?;
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{self}]")
    }
}

/// Bell number via the Bell triangle.
pub fn bell_number(n: usize) -> u128 {
    let mut row = vec![1u128];
    for _ in 0..n {
        let mut next = Vec::with_capacity(row.len() + 1);
        next.push(*row.last().unwrap());
        for &x in &row {
            let prev = *next.last().unwrap();
            next.push(prev + x);
        }
        row = next;
    }
    row[0]
}

/// Number of two-block partitions of an `n`-set.
pub fn count_two_block(n: usize) -> u128 {
    if n == 0 {
        0
    } else {
        (1u128 << (n - 1)) - 1
    }
}

/// Calls `f` with every grouping of `items` into blocks, in restricted growth
/// string order. Items must be disjoint masks sorted by minimum element; the
/// emitted blocks are then in canonical order too.
fn for_each_grouping(items: &[u64], f: &mut dyn FnMut(&[u64])) {
    let k = items.len();
    if k == 0 {
        f(&[]);
        return;
    }
    let mut rgs = vec![0usize; k];
    let mut max = vec![0usize; k];
    let mut blocks = Vec::with_capacity(k);
    loop {
        blocks.clear();
        blocks.resize(max[k - 1] + 1, 0u64);
        for (item, &label) in items.iter().zip(&rgs) {
            blocks[label] |= item;
        }
        f(&blocks);
        let mut i = k - 1;
        loop {
            if i == 0 {
                return;
            }
            if rgs[i] <= max[i - 1] {
                break;
            }
            i -= 1;
        }
        rgs[i] += 1;
        max[i] = max[i - 1].max(rgs[i]);
        for j in i + 1..k {
            rgs[j] = 0;
            max[j] = max[i];
        }
    }
}

/// Calls `f` with the blocks of every partition in the interval
/// `[lower, upper]`, given as canonical block lists with `lower ≼ upper`.
fn for_each_between(lower: &[u64], upper: &[u64], f: &mut dyn FnMut(&[u64])) {
    let groups: Vec<Vec<u64>> = upper
        .iter()
        .map(|&u| lower.iter().copied().filter(|&l| l & !u == 0).collect())
        .collect();
    let mut acc = Vec::with_capacity(lower.len());
    between_rec(&groups, 0, &mut acc, f);
}

fn between_rec(groups: &[Vec<u64>], j: usize, acc: &mut Vec<u64>, f: &mut dyn FnMut(&[u64])) {
    if j == groups.len() {
        let mut blocks = acc.clone();
        blocks.sort_unstable_by_key(min_key);
        f(&blocks);
        return;
    }
    for_each_grouping(&groups[j], &mut |blocks: &[u64]| {
        let len = acc.len();
        acc.extend_from_slice(blocks);
        between_rec(groups, j + 1, acc, f);
        acc.truncate(len);
    });
}

fn refines_masks(a: &[u64], b: &[u64]) -> bool {
    a.iter().all(|&x| b.iter().any(|&y| x & !y == 0))
}

/// All partitions of `ground` in restricted growth string order (`1̲` first,
/// `0̲` last).
pub fn enumerate_partitions(ground: GroundSet) -> Vec<Partition> {
    let singletons: Vec<u64> = ground.elements().map(|e| 1u64 << (e - 1)).collect();
    let mut out = Vec::new();
    for_each_grouping(&singletons, &mut |blocks| {
        out.push(Partition { blocks: blocks.to_vec() });
    });
    out
}

/// `a ≼ b`: every block of `a` lies inside a block of `b`.
pub fn is_refinement(a: &Partition, b: &Partition) -> Result<bool> {
    same_ground(a.ground(), b.ground())?;
    Ok(refines_masks(&a.blocks, &b.blocks))
}

/// Coarsest common refinement.
pub fn meet(a: &Partition, b: &Partition) -> Result<Partition> {
    same_ground(a.ground(), b.ground())?;
    Ok(meet_masks(&a.blocks, &b.blocks))
}

fn meet_masks(a: &[u64], b: &[u64]) -> Partition {
    let mut blocks = Vec::with_capacity(a.len() + b.len());
    for &x in a {
        for &y in b {
            if x & y != 0 {
                blocks.push(x & y);
            }
        }
    }
    Partition::from_disjoint_masks(blocks)
}

/// Iterated meet; the empty meet is `1̲`.
pub fn meet_of_set<'a>(
    partitions: impl IntoIterator<Item = &'a Partition>,
    ground: GroundSet,
) -> Result<Partition> {
    let mut acc = Partition::one(ground);
    for p in partitions {
        same_ground(p.ground(), ground)?;
        acc = meet_masks(&acc.blocks, &p.blocks);
    }
    Ok(acc)
}

/// Restriction `a|_u`.
pub fn restrict(a: &Partition, u: GroundSet) -> Result<Partition> {
    if !u.is_subset_of(a.ground()) {
        return domain(format!("{u} is not a subset of {}", a.ground()));
    }
    Ok(restrict_unchecked(a, u.mask()))
}

pub(crate) fn restrict_unchecked(a: &Partition, u: u64) -> Partition {
    Partition::from_disjoint_masks(
        a.blocks
            .iter()
            .map(|b| b & u)
            .filter(|&b| b != 0)
            .collect(),
    )
}

/// Union of partitions living on pairwise disjoint ground sets.
pub fn join_disjoint<'a>(parts: impl IntoIterator<Item = &'a Partition>) -> Result<Partition> {
    let mut seen = 0u64;
    let mut blocks = Vec::new();
    for p in parts {
        let g = p.ground().mask();
        if g & seen != 0 {
            return domain("ground sets overlap");
        }
        seen |= g;
        blocks.extend_from_slice(&p.blocks);
    }
    if blocks.is_empty() {
        return domain("nothing to join");
    }
    Ok(Partition::from_disjoint_masks(blocks))
}

/// Möbius function of the lattice of `a.ground()`.
pub fn mobius(a: &Partition, b: &Partition) -> Result<i64> {
    same_ground(a.ground(), b.ground())?;
    let lattice = Lattice::of(a.ground());
    let (i, j) = (lattice.index(a)?, lattice.index(b)?);
    Ok(lattice.mobius(i, j))
}

/// The lattice `ℙ(U)` with index lookups, order ideals/filters, Möbius rows and
/// restriction maps, all computed on first use.
pub struct Lattice {
    ground: GroundSet,
    elements: Vec<Partition>,
    index: HashMap<Partition, usize>,
    up: OnceLock<Vec<Vec<u32>>>,
    down: OnceLock<Vec<Vec<u32>>>,
    mobius_rows: Vec<OnceLock<Vec<(u32, i64)>>>,
    restrictions: Mutex<HashMap<u64, Arc<Vec<u32>>>>,
}

impl fmt::Debug for Lattice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Lattice({}, {} elements)", self.ground, self.elements.len())
    }
}

/// Lattices are determined by their ground set.
impl PartialEq for Lattice {
    fn eq(&self, other: &Self) -> bool {
        self.ground == other.ground
    }
}

impl Eq for Lattice {}

static LATTICES: OnceLock<Mutex<HashMap<u64, Arc<Lattice>>>> = OnceLock::new();

impl Lattice {
    /// Shared, process-wide instance for `ground`.
    pub fn of(ground: GroundSet) -> Arc<Lattice> {
        let cache = LATTICES.get_or_init(|| Mutex::new(HashMap::new()));
        let mut map = cache.lock().unwrap_or_else(|e| e.into_inner());
        map.entry(ground.mask())
            .or_insert_with(|| Arc::new(Lattice::build(ground)))
            .clone()
    }

    pub fn build(ground: GroundSet) -> Lattice {
        let elements = enumerate_partitions(ground);
        let index = elements
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        let mobius_rows = (0..elements.len()).map(|_| OnceLock::new()).collect();
        Lattice {
            ground,
            elements,
            index,
            up: OnceLock::new(),
            down: OnceLock::new(),
            mobius_rows,
            restrictions: Mutex::new(HashMap::new()),
        }
    }

    pub fn ground(&self) -> GroundSet {
        self.ground
    }

    pub fn size(&self) -> usize {
        self.elements.len()
    }

    pub fn elements(&self) -> &[Partition] {
        &self.elements
    }

    pub fn element(&self, i: usize) -> &Partition {
        &self.elements[i]
    }

    pub fn index_of(&self, p: &Partition) -> Option<usize> {
        self.index.get(p).copied()
    }

    pub fn index(&self, p: &Partition) -> Result<usize> {
        same_ground(p.ground(), self.ground)?;
        Ok(self.index[p])
    }

    pub fn one_index(&self) -> usize {
        0
    }

    pub fn zero_index(&self) -> usize {
        self.elements.len() - 1
    }

    pub fn leq(&self, i: usize, j: usize) -> bool {
        refines_masks(&self.elements[i].blocks, &self.elements[j].blocks)
    }

    fn interval_indices(&self, lower: &[u64], upper: &[u64]) -> Vec<u32> {
        let mut out = Vec::new();
        for_each_between(lower, upper, &mut |blocks| {
            let p = Partition { blocks: blocks.to_vec() };
            out.push(self.index[&p] as u32);
        });
        out.sort_unstable();
        out
    }

    /// Indices of all `b ≽ a`, ascending.
    pub fn up(&self, a: usize) -> &[u32] {
        &self.up.get_or_init(|| {
            let top = [self.ground.mask()];
            self.elements
                .iter()
                .map(|p| self.interval_indices(&p.blocks, &top))
                .collect()
        })[a]
    }

    /// Indices of all `c ≼ b`, ascending.
    pub fn down(&self, b: usize) -> &[u32] {
        &self.down.get_or_init(|| {
            let bottom = Partition::zero(self.ground).blocks;
            self.elements
                .iter()
                .map(|p| self.interval_indices(&bottom, &p.blocks))
                .collect()
        })[b]
    }

    /// `μ(a, b)` by index; zero unless `a ≼ b`.
    pub fn mobius(&self, a: usize, b: usize) -> i64 {
        let row = self.mobius_row(a);
        match row.binary_search_by_key(&(b as u32), |&(j, _)| j) {
            Ok(k) => row[k].1,
            Err(_) => 0,
        }
    }

    /// `(b, μ(a, b))` for every `b ≽ a`, sorted by index. Each value comes from
    /// `μ(a, b) = −Σ_{a ≼ c ≺ b} μ(a, c)` evaluated finest-first.
    pub fn mobius_row(&self, a: usize) -> &[(u32, i64)] {
        self.mobius_rows[a].get_or_init(|| {
            let lower = &self.elements[a].blocks;
            let mut uppers = Vec::new();
            for_each_between(lower, &[self.ground.mask()], &mut |blocks| {
                uppers.push(blocks.to_vec());
            });
            uppers.sort_by_key(|b| std::cmp::Reverse(b.len()));
            let mut values: HashMap<Vec<u64>, i64> = HashMap::with_capacity(uppers.len());
            for upper in &uppers {
                let value = if upper == lower {
                    1
                } else {
                    let mut sum = 0i64;
                    for_each_between(lower, upper, &mut |c| {
                        if c.len() != upper.len() {
                            sum += values[c];
                        }
                    });
                    -sum
                };
                values.insert(upper.clone(), value);
            }
            let mut row: Vec<(u32, i64)> = values
                .into_iter()
                .map(|(blocks, v)| (self.index[&Partition { blocks }] as u32, v))
                .collect();
            row.sort_unstable();
            row
        })
    }

    /// For each element index, the index of its restriction to `u` inside
    /// `Lattice::of(u)`.
    pub fn restriction_map(&self, u: GroundSet) -> Result<Arc<Vec<u32>>> {
        if !u.is_subset_of(self.ground) {
            return domain(format!("{u} is not a subset of {}", self.ground));
        }
        let mut cache = self.restrictions.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(map) = cache.get(&u.mask()) {
            return Ok(map.clone());
        }
        let target = Lattice::of(u);
        let map: Arc<Vec<u32>> = Arc::new(
            self.elements
                .iter()
                .map(|p| target.index[&restrict_unchecked(p, u.mask())] as u32)
                .collect(),
        );
        cache.insert(u.mask(), map.clone());
        Ok(map)
    }
}

/// A function on pairs `(a, b)` with `a ≼ b`; absent pairs are zero.
#[derive(Clone)]
pub struct IncidenceElement {
    lattice: Arc<Lattice>,
    values: BTreeMap<(u32, u32), f64>,
}

impl fmt::Debug for IncidenceElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut m = f.debug_map();
        for (&(i, j), v) in &self.values {
            m.entry(
                &(self.lattice.element(i as usize), self.lattice.element(j as usize)),
                v,
            );
        }
        m.finish()
    }
}

impl IncidenceElement {
    pub fn zero(lattice: Arc<Lattice>) -> Self {
        Self {
            lattice,
            values: BTreeMap::new(),
        }
    }

    /// Builds from `f(a, b)` evaluated on every comparable pair.
    pub fn from_fn(lattice: Arc<Lattice>, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = BTreeMap::new();
        for a in 0..lattice.size() {
            for &b in lattice.up(a) {
                let v = f(a, b as usize);
                if v != 0.0 {
                    values.insert((a as u32, b), v);
                }
            }
        }
        Self { lattice, values }
    }

    pub fn delta(lattice: Arc<Lattice>) -> Self {
        Self::from_fn(lattice, |a, b| if a == b { 1.0 } else { 0.0 })
    }

    pub fn zeta(lattice: Arc<Lattice>) -> Self {
        Self::from_fn(lattice, |_, _| 1.0)
    }

    pub fn mobius(lattice: Arc<Lattice>) -> Self {
        let l = lattice.clone();
        Self::from_fn(lattice, move |a, b| l.mobius(a, b) as f64)
    }

    pub fn lattice(&self) -> &Arc<Lattice> {
        &self.lattice
    }

    pub fn ground(&self) -> GroundSet {
        self.lattice.ground()
    }

    pub fn get_index(&self, a: usize, b: usize) -> f64 {
        self.values.get(&(a as u32, b as u32)).copied().unwrap_or(0.0)
    }

    pub fn get(&self, a: &Partition, b: &Partition) -> Result<f64> {
        Ok(self.get_index(self.lattice.index(a)?, self.lattice.index(b)?))
    }

    /// Sets a value; only comparable pairs may carry nonzero values.
    pub fn set(&mut self, a: &Partition, b: &Partition, value: f64) -> Result<()> {
        let (i, j) = (self.lattice.index(a)?, self.lattice.index(b)?);
        if !self.lattice.leq(i, j) {
            if value == 0.0 {
                return Ok(());
            }
            return domain(format!("{a} is not finer than {b}"));
        }
        if value == 0.0 {
            self.values.remove(&(i as u32, j as u32));
        } else {
            self.values.insert((i as u32, j as u32), value);
        }
        Ok(())
    }

    /// Nonzero entries as `(a, b, value)` index triples.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.values
            .iter()
            .map(|(&(i, j), &v)| (i as usize, j as usize, v))
    }

    pub fn max_abs_diff(&self, other: &IncidenceElement) -> Result<f64> {
        same_ground(self.ground(), other.ground())?;
        let mut worst = 0.0f64;
        for (&k, &v) in &self.values {
            worst = worst.max((v - other.values.get(&k).copied().unwrap_or(0.0)).abs());
        }
        for (&k, &v) in &other.values {
            if !self.values.contains_key(&k) {
                worst = worst.max(v.abs());
            }
        }
        Ok(worst)
    }
}

/// `(x ∗ y)(a, b) = Σ_{c ∈ [a, b]} x(a, c) y(c, b)`.
pub fn convolve(x: &IncidenceElement, y: &IncidenceElement) -> Result<IncidenceElement> {
    same_ground(x.ground(), y.ground())?;
    let mut rows: HashMap<u32, Vec<(u32, f64)>> = HashMap::new();
    for (&(c, b), &v) in &y.values {
        rows.entry(c).or_default().push((b, v));
    }
    let mut values: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    for (&(a, c), &xv) in &x.values {
        if let Some(row) = rows.get(&c) {
            for &(b, yv) in row {
                *values.entry((a, b)).or_insert(0.0) += xv * yv;
            }
        }
    }
    values.retain(|_, v| *v != 0.0);
    Ok(IncidenceElement {
        lattice: x.lattice.clone(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(s: &str) -> Partition {
        s.parse().unwrap()
    }

    fn g(n: usize) -> GroundSet {
        GroundSet::range(n).unwrap()
    }

    /// Oracle: B(n+1) = Σ_k C(n,k) B(k), B(0) = 1.
    fn bell_by_binomial_recursion(max: usize) -> Vec<u128> {
        let mut b = vec![1u128];
        for n in 0..max {
            let mut binom = 1u128;
            let mut next = 0u128;
            for (k, bk) in b.iter().enumerate().take(n + 1) {
                next += binom * bk;
                binom = binom * (n - k) as u128 / (k + 1) as u128;
            }
            b.push(next);
        }
        b
    }

    #[test]
    fn bell_counts_match_recursion() {
        let oracle = bell_by_binomial_recursion(8);
        assert_eq!(&oracle[1..], &[1, 2, 5, 15, 52, 203, 877, 4140]);
        for n in 1..=8 {
            assert_eq!(enumerate_partitions(g(n)).len() as u128, oracle[n]);
            assert_eq!(bell_number(n), oracle[n]);
        }
    }

    #[test]
    fn enumeration_is_distinct_and_canonical() {
        let all = enumerate_partitions(g(5));
        let set: std::collections::HashSet<_> = all.iter().cloned().collect();
        assert_eq!(set.len(), all.len());
        for q in &all {
            assert_eq!(&p(&q.to_string()), q);
        }
        assert!(all[0].is_one());
        assert!(all.last().unwrap().is_zero());
    }

    #[test]
    fn two_block_counts() {
        assert_eq!(count_two_block(1), 0);
        assert_eq!(count_two_block(4), 7);
        assert_eq!(count_two_block(6), 31);
        for n in 1..=7 {
            let k = enumerate_partitions(g(n))
                .iter()
                .filter(|q| q.block_count() == 2)
                .count();
            assert_eq!(k as u128, count_two_block(n));
        }
    }

    #[test]
    fn refinement_examples() {
        let one = Partition::one(g(3));
        for q in enumerate_partitions(g(3)) {
            assert!(is_refinement(&q, &one).unwrap());
        }
        assert!(is_refinement(&p("1|2|3"), &p("1,2|3")).unwrap());
        assert!(!is_refinement(&p("1,2|3"), &p("1|2,3")).unwrap());
        assert!(matches!(
            is_refinement(&p("1|2"), &p("1,2,3")),
            Err(Error::GroundMismatch { .. })
        ));
    }

    #[test]
    fn meet_examples() {
        let a = p("1,2|3,4");
        assert_eq!(meet(&a, &Partition::one(g(4))).unwrap(), a);
        assert_eq!(meet(&a, &a).unwrap(), a);
        assert_eq!(meet(&a, &p("1|2,3,4")).unwrap(), p("1|2|3,4"));
        assert_eq!(meet_of_set([], g(3)).unwrap(), Partition::one(g(3)));
        assert_eq!(meet_of_set([&a], g(4)).unwrap(), a);
        let two_block: Vec<_> = enumerate_partitions(g(3))
            .into_iter()
            .filter(|q| q.block_count() == 2)
            .collect();
        assert_eq!(meet_of_set(&two_block, g(3)).unwrap(), Partition::zero(g(3)));
    }

    #[test]
    fn restrict_and_join_examples() {
        let a = p("1,3|2,4");
        assert_eq!(restrict(&a, g(4)).unwrap(), a);
        let u = GroundSet::new([1, 2]).unwrap();
        assert_eq!(restrict(&a, u).unwrap(), p("1|2"));
        assert_eq!(restrict(&Partition::one(g(4)), u).unwrap(), Partition::one(u));
        assert!(restrict(&p("1|2"), g(3)).is_err());

        assert_eq!(join_disjoint([&a]).unwrap(), a);
        let joined = join_disjoint([&p("1,2"), &p("3|4")]).unwrap();
        assert_eq!(joined, p("1,2|3|4"));
        assert_eq!(restrict(&joined, GroundSet::new([1, 2]).unwrap()).unwrap(), p("1,2"));
        assert!(join_disjoint([&p("1,2"), &p("2|3")]).is_err());
    }

    #[test]
    fn parse_rejects_bad_input() {
        let ground = g(4);
        assert!(Partition::parse("1,2|3,4", ground).is_ok());
        assert!(Partition::parse(" 1 , 2 | 3,4 ", ground).is_ok());
        assert!(Partition::parse("1,2|2,3,4", ground).is_err());
        assert!(Partition::parse("1,2|4", ground).is_err());
        assert!(Partition::parse("1,2||3,4", ground).is_err());
        assert!(Partition::parse("", ground).is_err());
        assert!(Partition::parse("1,x|3,4", ground).is_err());
        assert_eq!(p("4,3|2,1").to_string(), "1,2|3,4");
        assert_eq!(p("2|1,4|3").to_string(), "1,4|2|3");
    }

    /// Brute-force inverse of the zeta matrix (unit upper triangular in a
    /// linear extension) by back substitution.
    fn mobius_by_matrix_inversion(ground: GroundSet) -> Vec<Vec<i64>> {
        let lat = Lattice::build(ground);
        let n = lat.size();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(lat.element(i).block_count()));
        let zeta = |i: usize, j: usize| i64::from(lat.leq(i, j));
        let mut inv = vec![vec![0i64; n]; n];
        for col in 0..n {
            for row in (0..n).rev() {
                let (i, j) = (order[row], order[col]);
                let mut s = i64::from(i == j);
                for k in row + 1..n {
                    s -= zeta(i, order[k]) * inv[order[k]][j];
                }
                inv[i][j] = s;
            }
        }
        inv
    }

    #[test]
    fn mobius_matches_matrix_inverse() {
        for n in 1..=4 {
            let lat = Lattice::of(g(n));
            let inv = mobius_by_matrix_inversion(g(n));
            for a in 0..lat.size() {
                for b in 0..lat.size() {
                    assert_eq!(lat.mobius(a, b), inv[a][b]);
                }
            }
        }
        assert_eq!(mobius(&Partition::zero(g(3)), &Partition::one(g(3))).unwrap(), 2);
    }

    #[test]
    fn mobius_bottom_top_closed_form() {
        let mut fact = 1i64;
        for n in 1..=7usize {
            if n > 1 {
                fact *= (n - 1) as i64;
            }
            let expected = if n % 2 == 1 { fact } else { -fact };
            let lat = Lattice::of(g(n));
            assert_eq!(lat.mobius(lat.zero_index(), lat.one_index()), expected, "n={n}");
        }
    }

    #[test]
    fn mobius_support_and_diagonal() {
        let lat = Lattice::of(g(4));
        for a in 0..lat.size() {
            assert_eq!(lat.mobius(a, a), 1);
            for b in 0..lat.size() {
                if !lat.leq(a, b) {
                    assert_eq!(lat.mobius(a, b), 0);
                }
            }
        }
    }

    #[test]
    fn convolution_identities() {
        let lat = Lattice::of(g(3));
        let delta = IncidenceElement::delta(lat.clone());
        let zeta = IncidenceElement::zeta(lat.clone());
        let mu = IncidenceElement::mobius(lat.clone());
        assert_eq!(convolve(&delta, &zeta).unwrap().max_abs_diff(&zeta).unwrap(), 0.0);
        assert_eq!(convolve(&zeta, &mu).unwrap().max_abs_diff(&delta).unwrap(), 0.0);
        assert_eq!(convolve(&mu, &zeta).unwrap().max_abs_diff(&delta).unwrap(), 0.0);

        let lat4 = Lattice::of(g(4));
        let z4 = IncidenceElement::zeta(lat4.clone());
        let zz = convolve(&z4, &z4).unwrap();
        for a in 0..lat4.size() {
            for b in 0..lat4.size() {
                let count = (0..lat4.size())
                    .filter(|&c| lat4.leq(a, c) && lat4.leq(c, b))
                    .count();
                assert_eq!(zz.get_index(a, b), count as f64);
            }
        }
    }

    #[test]
    fn up_and_down_sets_match_scan() {
        let lat = Lattice::of(g(5));
        for a in 0..lat.size() {
            let up: Vec<u32> = (0..lat.size())
                .filter(|&b| lat.leq(a, b))
                .map(|b| b as u32)
                .collect();
            let down: Vec<u32> = (0..lat.size())
                .filter(|&c| lat.leq(c, a))
                .map(|c| c as u32)
                .collect();
            assert_eq!(lat.up(a), &up[..]);
            assert_eq!(lat.down(a), &down[..]);
        }
    }

    #[test]
    fn restriction_map_preserves_labels() {
        let lat = Lattice::of(g(4));
        let u = GroundSet::new([2, 4]).unwrap();
        let map = lat.restriction_map(u).unwrap();
        let sub = Lattice::of(u);
        for (i, q) in lat.elements().iter().enumerate() {
            assert_eq!(sub.element(map[i] as usize), &restrict(q, u).unwrap());
        }
    }

    #[test]
    fn subsets_are_ordered_small_first() {
        let subs = GroundSet::new([1, 3, 4]).unwrap().subsets();
        assert_eq!(subs.len(), 7);
        assert!(subs.windows(2).all(|w| w[0].cardinality() <= w[1].cardinality()));
        assert_eq!(*subs.last().unwrap(), GroundSet::new([1, 3, 4]).unwrap());
    }

    fn arb_partition(max_n: usize) -> impl Strategy<Value = Partition> {
        (1..=max_n).prop_flat_map(|n| {
            proptest::collection::vec(0..n, n).prop_map(move |labels| {
                let mut blocks = vec![0u64; n];
                for (site, &l) in labels.iter().enumerate() {
                    blocks[l] |= 1 << site;
                }
                Partition::from_block_masks(blocks.into_iter().filter(|&b| b != 0)).unwrap()
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn text_round_trip_is_idempotent(q in arb_partition(8)) {
            let text = q.to_string();
            let back: Partition = text.parse().unwrap();
            prop_assert_eq!(&back, &q);
            prop_assert_eq!(back.to_string(), text);
        }

        #[test]
        fn meet_is_below_both(a in arb_partition(6), seed in any::<u64>()) {
            let lat = Lattice::of(a.ground());
            let b = lat.element((seed % lat.size() as u64) as usize).clone();
            let m = meet(&a, &b).unwrap();
            prop_assert!(is_refinement(&m, &a).unwrap());
            prop_assert!(is_refinement(&m, &b).unwrap());
        }
    }
}

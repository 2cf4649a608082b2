//! Finite product type spaces, nonnegative measures stored as dense tensors,
//! marginals and recombinators.
//!
//! States are laid out row-major in ascending site order: the last site
//! varies fastest.

use std::io::{Read, Write};

use crate::coefficient_dynamics::CoefficientVector;
use crate::error::{domain, same_ground, Result};
use crate::partition_lattice::{meet_of_set, GroundSet, Lattice, Partition};

/// Default relative tolerance for [`invariant_partition_set`].
pub const INVARIANCE_EPS: f64 = 1e-10;

/// Product space `X_1 × ... × X_n` with finite alphabets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TypeSpace {
    sites: GroundSet,
    sizes: Vec<usize>,
    strides: Vec<usize>,
    states: usize,
}

impl TypeSpace {
    /// `sizes[k]` is the alphabet size of the `k`-th site in ascending order.
    pub fn new(sites: GroundSet, sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() != sites.cardinality() {
            return domain(format!(
                "{} alphabet sizes given for {} sites",
                sizes.len(),
                sites.cardinality()
            ));
        }
        if sizes.contains(&0) {
            return domain("alphabet sizes must be positive");
        }
        let mut strides = vec![1usize; sizes.len()];
        let mut states = 1usize;
        for k in (0..sizes.len()).rev() {
            strides[k] = states;
            states = match states.checked_mul(sizes[k]) {
                Some(s) if s <= 1 << 32 => s,
                _ => return domain("state space too large"),
            };
        }
        Ok(Self {
            sites,
            sizes,
            strides,
            states,
        })
    }

    /// `n` sites with the same alphabet size.
    pub fn uniform(n: usize, size: usize) -> Result<Self> {
        Self::new(GroundSet::range(n)?, vec![size; n])
    }

    pub fn sites(&self) -> GroundSet {
        self.sites
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn state_count(&self) -> usize {
        self.states
    }

    /// Coordinates (letters) of a flat state index.
    pub fn coords(&self, mut flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.sizes.len()];
        for (o, &stride) in out.iter_mut().zip(&self.strides) {
            *o = flat / stride;
            flat %= stride;
        }
        out
    }

    pub fn flat_index(&self, coords: &[usize]) -> Result<usize> {
        if coords.len() != self.sizes.len() || coords.iter().zip(&self.sizes).any(|(c, s)| c >= s)
        {
            return domain(format!("state {coords:?} outside the type space"));
        }
        Ok(coords.iter().zip(&self.strides).map(|(c, s)| c * s).sum())
    }

    /// The factor space over the sites in `u`.
    pub fn subspace(&self, u: GroundSet) -> Result<TypeSpace> {
        if !u.is_subset_of(self.sites) {
            return domain(format!("{u} is not a subset of {}", self.sites));
        }
        let sizes = u
            .elements()
            .map(|e| self.sizes[self.sites.position(e).unwrap()])
            .collect();
        TypeSpace::new(u, sizes)
    }

    /// For each flat state, its flat index in `subspace(u)`.
    fn projection_map(&self, u: GroundSet) -> Result<(TypeSpace, Vec<usize>)> {
        let sub = self.subspace(u)?;
        let picks: Vec<(usize, usize)> = u
            .elements()
            .enumerate()
            .map(|(j, e)| (self.sites.position(e).unwrap(), sub.strides[j]))
            .collect();
        let mut map = Vec::with_capacity(self.states);
        let mut coords = vec![0usize; self.sizes.len()];
        for _ in 0..self.states {
            map.push(picks.iter().map(|&(k, s)| coords[k] * s).sum());
            for k in (0..coords.len()).rev() {
                coords[k] += 1;
                if coords[k] < self.sizes[k] {
                    break;
                }
                coords[k] = 0;
            }
        }
        Ok((sub, map))
    }
}

/// A nonnegative measure on a [`TypeSpace`].
#[derive(Clone, Debug, PartialEq)]
pub struct Measure {
    space: TypeSpace,
    weights: Vec<f64>,
}

impl Measure {
    pub fn new(space: TypeSpace, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != space.state_count() {
            return domain(format!(
                "{} weights for {} states",
                weights.len(),
                space.state_count()
            ));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return domain(format!("measure weight {w} is not a nonnegative number"));
        }
        Ok(Self { space, weights })
    }

    pub fn zero(space: TypeSpace) -> Self {
        let weights = vec![0.0; space.state_count()];
        Self { space, weights }
    }

    /// Uniform probability measure.
    pub fn uniform(space: TypeSpace) -> Self {
        let w = 1.0 / space.state_count() as f64;
        let weights = vec![w; space.state_count()];
        Self { space, weights }
    }

    /// Product of per-site weight vectors, each normalized to a probability.
    pub fn product(space: TypeSpace, factors: &[Vec<f64>]) -> Result<Self> {
        if factors.len() != space.sizes().len() {
            return domain("one weight vector per site required");
        }
        let mut normed = Vec::with_capacity(factors.len());
        for (f, &size) in factors.iter().zip(space.sizes()) {
            if f.len() != size {
                return domain(format!("site factor has {} weights, alphabet size {size}", f.len()));
            }
            let total: f64 = f.iter().sum();
            if f.iter().any(|w| !w.is_finite() || *w < 0.0) || total <= 0.0 {
                return domain("site factors must be nonnegative with positive sum");
            }
            normed.push(f.iter().map(|w| w / total).collect::<Vec<_>>());
        }
        let weights = (0..space.state_count())
            .map(|i| {
                space
                    .coords(i)
                    .iter()
                    .zip(&normed)
                    .map(|(&c, f)| f[c])
                    .product()
            })
            .collect();
        Measure::new(space, weights)
    }

    pub(crate) fn from_raw(space: TypeSpace, weights: Vec<f64>) -> Self {
        Self { space, weights }
    }

    pub fn space(&self) -> &TypeSpace {
        &self.space
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn norm(&self) -> f64 {
        norm(self)
    }

    pub fn scaled(&self, c: f64) -> Result<Measure> {
        Measure::new(self.space.clone(), self.weights.iter().map(|w| w * c).collect())
    }

    /// One row per state: the letters (0-based) of each site, then the weight.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = self.space.sites.elements().map(|e| format!("site{e}")).collect();
        header.push("weight".into());
        w.write_record(&header)?;
        for (i, &x) in self.weights.iter().enumerate() {
            let mut row: Vec<String> = self.space.coords(i).iter().map(|c| c.to_string()).collect();
            row.push(x.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format of [`Measure::write_csv`]. Missing states get weight
    /// zero; alphabet sizes are taken from `space` when given, otherwise from
    /// the largest letter seen per site.
    pub fn read_csv<R: Read>(input: R, space: Option<&TypeSpace>) -> Result<Measure> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        if header.len() < 2 || &header[header.len() - 1] != "weight" {
            return domain("measure CSV needs site columns followed by `weight`");
        }
        let labels = header
            .iter()
            .take(header.len() - 1)
            .map(|h| {
                h.trim()
                    .trim_start_matches("site")
                    .parse::<usize>()
                    .map_err(|_| crate::Error::Domain(format!("bad site column `{h}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if labels.windows(2).any(|w| w[0] >= w[1]) {
            return domain("site columns must be strictly increasing");
        }
        let sites = GroundSet::new(labels.iter().copied())?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let coords = rec
                .iter()
                .take(labels.len())
                .map(|c| c.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| crate::Error::Domain(format!("bad letter: {e}")))?;
            let w: f64 = rec[labels.len()]
                .trim()
                .parse()
                .map_err(|e| crate::Error::Domain(format!("bad weight: {e}")))?;
            rows.push((coords, w));
        }
        let space = match space {
            Some(s) => {
                same_ground(s.sites(), sites)?;
                s.clone()
            }
            None => {
                let mut sizes = vec![1usize; labels.len()];
                for (coords, _) in &rows {
                    for (s, &c) in sizes.iter_mut().zip(coords) {
                        *s = (*s).max(c + 1);
                    }
                }
                TypeSpace::new(sites, sizes)?
            }
        };
        let mut weights = vec![0.0; space.state_count()];
        for (coords, w) in rows {
            weights[space.flat_index(&coords)?] += w;
        }
        Measure::new(space, weights)
    }
}

/// Total variation norm; the sum of entries for a nonnegative measure.
pub fn norm(nu: &Measure) -> f64 {
    nu.weights.iter().sum()
}

/// `‖x − y‖` in total variation (sum of absolute differences).
pub fn distance(x: &Measure, y: &Measure) -> Result<f64> {
    if x.space != y.space {
        return domain("measures live on different type spaces");
    }
    Ok(l1_diff(&x.weights, &y.weights))
}

pub(crate) fn l1_diff(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum()
}

fn marginal(weights: &[f64], map: &[usize], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (&w, &j) in weights.iter().zip(map) {
        out[j] += w;
    }
    out
}

/// Marginal on the sites in `u`.
pub fn project(nu: &Measure, u: GroundSet) -> Result<Measure> {
    let (sub, map) = nu.space.projection_map(u)?;
    let weights = marginal(&nu.weights, &map, sub.state_count());
    Ok(Measure::from_raw(sub, weights))
}

/// Recombinator kernel on raw weights: `m^{1−r} ⊗_i π_{A_i}(w)` with `m` the
/// total mass, and zero when `m = 0`.
pub(crate) fn recombine_raw(space: &TypeSpace, weights: &[f64], a: &Partition) -> Result<Vec<f64>> {
    let mass: f64 = weights.iter().sum();
    if mass == 0.0 {
        return Ok(vec![0.0; weights.len()]);
    }
    if a.is_one() {
        return Ok(weights.to_vec());
    }
    let mut out = vec![mass.powi(1 - a.block_count() as i32); weights.len()];
    for block in a.blocks() {
        let (sub, map) = space.projection_map(block)?;
        let m = marginal(weights, &map, sub.state_count());
        for (o, &j) in out.iter_mut().zip(&map) {
            *o *= m[j];
        }
    }
    Ok(out)
}

/// `R_𝒜(ν) = ‖ν‖^{1−|𝒜|} ⊗_i π_{A_i}(ν)`, with `R_𝒜(0) = 0`.
pub fn recombinator(a: &Partition, nu: &Measure) -> Result<Measure> {
    same_ground(a.ground(), nu.space.sites())?;
    let weights = recombine_raw(&nu.space, &nu.weights, a)?;
    Ok(Measure::from_raw(nu.space.clone(), weights))
}

/// Partitions whose recombinator fixes `ν` up to `eps·‖ν‖`, and their meet.
pub fn invariant_partition_set(nu: &Measure, eps: f64) -> Result<(Vec<Partition>, Partition)> {
    let total = norm(nu);
    if total == 0.0 {
        return domain("the zero measure has no invariant partition set");
    }
    let lattice = Lattice::of(nu.space.sites());
    let mut fixed = Vec::new();
    for a in lattice.elements() {
        let r = recombine_raw(&nu.space, &nu.weights, a)?;
        if l1_diff(&r, &nu.weights) <= eps * total {
            fixed.push(a.clone());
        }
    }
    let bottom = meet_of_set(&fixed, nu.space.sites())?;
    Ok((fixed, bottom))
}

/// `Σ_𝒞 c(𝒞) R_𝒞(ν₀)`.
///
/// Coefficients coming out of a numerical integrator may be negative at the
/// level of rounding; entries of the result in `[−1e−12·‖ν₀‖, 0)` are set to
/// zero, anything more negative is an error.
pub fn mixture(coeffs: &CoefficientVector, nu0: &Measure) -> Result<Measure> {
    same_ground(coeffs.ground(), nu0.space.sites())?;
    let lattice = coeffs.lattice();
    let mut weights = vec![0.0; nu0.weights.len()];
    for (i, &c) in coeffs.values().iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let r = recombine_raw(&nu0.space, &nu0.weights, lattice.element(i))?;
        for (w, x) in weights.iter_mut().zip(r) {
            *w += c * x;
        }
    }
    let floor = -1e-12 * norm(nu0).max(f64::MIN_POSITIVE);
    for w in &mut weights {
        if *w < 0.0 {
            if *w < floor {
                return domain(format!("mixture has negative weight {w}"));
            }
            *w = 0.0;
        }
    }
    Ok(Measure::from_raw(nu0.space.clone(), weights))
}

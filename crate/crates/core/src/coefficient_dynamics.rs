//! Recombination rates, coefficient vectors on `ℙ(S)`, and the recombination
//! ODE in measure form and in coefficient form.
//!
//! Both forms are integrated with classical fixed-step RK4. Mass drift is
//! recorded per grid point and never corrected.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::sync::{Arc, Mutex};

use crate::error::{domain, same_ground, Error, Result};
use crate::measures::{recombine_raw, Measure, TypeSpace};
use crate::partition_lattice::{GroundSet, Lattice, Partition};

/// Entries down to `−NEGATIVE_TOLERANCE·max(1, ‖q‖₁)` count as zero.
pub const NEGATIVE_TOLERANCE: f64 = 1e-12;
/// Default step is `DEFAULT_STEP_FACTOR / ϱ_Σ`.
pub const DEFAULT_STEP_FACTOR: f64 = 0.05;
/// Steps with `step·ϱ_Σ` above this are refused.
pub const MAX_STEP_FACTOR: f64 = 0.25;

/// A real function on `ℙ(U)`, indexed like [`Lattice::elements`].
#[derive(Clone, PartialEq)]
pub struct CoefficientVector {
    lattice: Arc<Lattice>,
    values: Vec<f64>,
}

impl fmt::Debug for CoefficientVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map().entries(self.iter()).finish()
    }
}

impl CoefficientVector {
    pub fn new(lattice: Arc<Lattice>, values: Vec<f64>) -> Result<Self> {
        if values.len() != lattice.size() {
            return domain(format!(
                "{} values for a lattice of {} partitions",
                values.len(),
                lattice.size()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return domain("coefficients must be finite");
        }
        Ok(Self { lattice, values })
    }

    pub fn zeros(ground: GroundSet) -> Self {
        let lattice = Lattice::of(ground);
        let values = vec![0.0; lattice.size()];
        Self { lattice, values }
    }

    /// The point mass `δ(·, p)`.
    pub fn delta(p: &Partition) -> Self {
        let mut v = Self::zeros(p.ground());
        let i = v.lattice.index(p).expect("partition of its own ground set");
        v.values[i] = 1.0;
        v
    }

    /// Values for the listed partitions, zero elsewhere.
    pub fn from_entries(
        ground: GroundSet,
        entries: impl IntoIterator<Item = (Partition, f64)>,
    ) -> Result<Self> {
        let mut v = Self::zeros(ground);
        for (p, x) in entries {
            let i = v.lattice.index(&p)?;
            v.values[i] += x;
        }
        Self::new(v.lattice, v.values)
    }

    pub fn ground(&self) -> GroundSet {
        self.lattice.ground()
    }

    pub fn lattice(&self) -> &Arc<Lattice> {
        &self.lattice
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, p: &Partition) -> Result<f64> {
        Ok(self.values[self.lattice.index(p)?])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Partition, f64)> + '_ {
        self.lattice.elements().iter().zip(self.values.iter().copied())
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    /// Entries `≥ −tol` and sum within `tol` of one.
    pub fn is_probability(&self, tol: f64) -> bool {
        self.values.iter().all(|&v| v >= -tol) && (self.sum() - 1.0).abs() <= tol
    }

    pub fn max_abs_diff(&self, other: &CoefficientVector) -> Result<f64> {
        same_ground(self.ground(), other.ground())?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Total variation distance `½ Σ |x − y|`.
    pub fn tv_distance(&self, other: &CoefficientVector) -> Result<f64> {
        same_ground(self.ground(), other.ground())?;
        Ok(0.5
            * self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>())
    }

    fn check_nonnegative(&self) -> Result<()> {
        check_nonnegative(&self.values)
    }
}

fn check_nonnegative(values: &[f64]) -> Result<()> {
    let scale = values.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
    match values.iter().find(|&&v| v < -NEGATIVE_TOLERANCE * scale) {
        Some(v) => domain(format!("negative coefficient {v}")),
        None => Ok(()),
    }
}

/// Nonnegative rates `ϱ(𝒜)` on `ℙ(S)` with cached marginal systems.
pub struct RateSystem {
    lattice: Arc<Lattice>,
    rates: Vec<f64>,
    total: f64,
    marginals: Mutex<HashMap<u64, Arc<RateSystem>>>,
}

impl Clone for RateSystem {
    fn clone(&self) -> Self {
        Self {
            lattice: self.lattice.clone(),
            rates: self.rates.clone(),
            total: self.total,
            marginals: Mutex::new(HashMap::new()),
        }
    }
}

impl fmt::Debug for RateSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map()
            .entries(
                self.lattice
                    .elements()
                    .iter()
                    .zip(&self.rates)
                    .filter(|(_, &r)| r != 0.0),
            )
            .finish()
    }
}

impl RateSystem {
    /// Rates indexed like [`Lattice::elements`].
    pub fn from_vec(lattice: Arc<Lattice>, rates: Vec<f64>) -> Result<Self> {
        if rates.len() != lattice.size() {
            return domain(format!(
                "{} rates for a lattice of {} partitions",
                rates.len(),
                lattice.size()
            ));
        }
        if let Some(r) = rates.iter().find(|r| !r.is_finite() || **r < 0.0) {
            return domain(format!("rate {r} is not a nonnegative number"));
        }
        let total = rates.iter().sum();
        Ok(Self {
            lattice,
            rates,
            total,
            marginals: Mutex::new(HashMap::new()),
        })
    }

    /// Rates for the listed partitions, zero elsewhere. Repeated keys are an
    /// error.
    pub fn new(ground: GroundSet, entries: impl IntoIterator<Item = (Partition, f64)>) -> Result<Self> {
        let lattice = Lattice::of(ground);
        let mut rates = vec![0.0; lattice.size()];
        let mut seen = vec![false; lattice.size()];
        for (p, r) in entries {
            let i = lattice.index(&p)?;
            if seen[i] {
                return domain(format!("rate for {p} given twice"));
            }
            seen[i] = true;
            rates[i] = r;
        }
        Self::from_vec(lattice, rates)
    }

    pub fn zero(ground: GroundSet) -> Self {
        let lattice = Lattice::of(ground);
        let rates = vec![0.0; lattice.size()];
        Self::from_vec(lattice, rates).expect("zero rates are valid")
    }

    pub fn ground(&self) -> GroundSet {
        self.lattice.ground()
    }

    pub fn lattice(&self) -> &Arc<Lattice> {
        &self.lattice
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn rate(&self, p: &Partition) -> Result<f64> {
        Ok(self.rates[self.lattice.index(p)?])
    }

    /// `ϱ_Σ`, including `ϱ(1̲)`.
    pub fn total(&self) -> f64 {
        self.total
    }

    /// Induced rates `ϱ^U(𝒜) = Σ_{𝒟|_U = 𝒜} ϱ(𝒟)` as a rate system on `U`.
    pub fn marginal(&self, u: GroundSet) -> Result<Arc<RateSystem>> {
        let mut cache = self.marginals.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(m) = cache.get(&u.mask()) {
            return Ok(m.clone());
        }
        let map = self.lattice.restriction_map(u)?;
        let target = Lattice::of(u);
        let mut rates = vec![0.0; target.size()];
        for (&j, &r) in map.iter().zip(&self.rates) {
            rates[j as usize] += r;
        }
        let m = Arc::new(RateSystem::from_vec(target, rates)?);
        cache.insert(u.mask(), m.clone());
        Ok(m)
    }

    /// True when every positive rate sits on `1̲` or on an ordered two-block
    /// partition `{1..k} | {k+1..n}` of the ground set.
    pub fn is_single_crossover(&self) -> bool {
        let sites: Vec<usize> = self.ground().elements().collect();
        self.lattice
            .elements()
            .iter()
            .zip(&self.rates)
            .filter(|(_, &r)| r > 0.0)
            .all(|(p, _)| {
                p.is_one()
                    || (p.block_count() == 2 && {
                        let first: Vec<usize> = p.blocks().next().unwrap().elements().collect();
                        first[..] == sites[..first.len()]
                    })
            })
    }

    /// True when every two-block partition carries a positive rate.
    pub fn two_block_rates_positive(&self) -> bool {
        self.lattice
            .elements()
            .iter()
            .zip(&self.rates)
            .all(|(p, &r)| p.block_count() != 2 || r > 0.0)
    }
}

/// `γ(q; 𝒜, ℬ) = ‖q‖₁^{1−|ℬ|} Π_i Σ_{𝒞|_{B_i} = 𝒜|_{B_i}} q(𝒞)` for `𝒜 ≼ ℬ`,
/// zero otherwise and for `q = 0`. Only nonnegative `q` is accepted.
pub fn gamma(q: &CoefficientVector, a: &Partition, b: &Partition) -> Result<f64> {
    let lat = q.lattice();
    let (ia, ib) = (lat.index(a)?, lat.index(b)?);
    q.check_nonnegative()?;
    if !lat.leq(ia, ib) {
        return Ok(0.0);
    }
    let norm = q.l1_norm();
    if norm == 0.0 {
        return Ok(0.0);
    }
    let mut value = norm.powi(1 - b.block_count() as i32);
    for block in b.blocks() {
        let target = crate::partition_lattice::restrict(a, block)?;
        let mut s = 0.0;
        for (c, qc) in q.iter() {
            if crate::partition_lattice::restrict(c, block)? == target {
                s += qc;
            }
        }
        value *= s;
    }
    Ok(value)
}

/// `β(q; 𝒜, ℬ) = Σ_{𝒞 ∧ ℬ = 𝒜} q(𝒞)` for `𝒜 ≼ ℬ`, zero otherwise.
pub fn beta(q: &CoefficientVector, a: &Partition, b: &Partition) -> Result<f64> {
    let lat = q.lattice();
    let (ia, ib) = (lat.index(a)?, lat.index(b)?);
    if !lat.leq(ia, ib) {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for (c, qc) in q.iter() {
        if &crate::partition_lattice::meet(c, b)? == a {
            s += qc;
        }
    }
    Ok(s)
}

/// Precomputed right-hand side of the coefficient ODE. Uses
/// `γ(q; 𝒜, ℬ) = ‖q‖₁^{1−|ℬ|} Π_i q^{B_i}(𝒜|_{B_i})` with the marginals
/// `q^{B_i}` computed once per evaluation.
struct CoefficientField {
    total: f64,
    maps: Vec<(Arc<Vec<u32>>, usize)>,
    terms: Vec<FieldTerm>,
}

struct FieldTerm {
    rate: f64,
    exponent: i32,
    slots: Vec<usize>,
    lowers: Vec<u32>,
}

impl CoefficientField {
    fn new(rates: &RateSystem) -> Result<Self> {
        let lat = rates.lattice();
        let mut slot_of: HashMap<u64, usize> = HashMap::new();
        let mut maps = Vec::new();
        let mut terms = Vec::new();
        for (b, &rate) in rates.rates().iter().enumerate() {
            if rate == 0.0 {
                continue;
            }
            let part = lat.element(b);
            let mut slots = Vec::with_capacity(part.block_count());
            for block in part.blocks() {
                let slot = match slot_of.get(&block.mask()) {
                    Some(&s) => s,
                    None => {
                        maps.push((lat.restriction_map(block)?, Lattice::of(block).size()));
                        slot_of.insert(block.mask(), maps.len() - 1);
                        maps.len() - 1
                    }
                };
                slots.push(slot);
            }
            terms.push(FieldTerm {
                rate,
                exponent: 1 - part.block_count() as i32,
                slots,
                lowers: lat.down(b).to_vec(),
            });
        }
        Ok(Self {
            total: rates.total(),
            maps,
            terms,
        })
    }

    fn eval(&self, q: &[f64], out: &mut [f64]) -> Result<()> {
        check_nonnegative(q)?;
        for (o, &x) in out.iter_mut().zip(q) {
            *o = -self.total * x;
        }
        let norm: f64 = q.iter().map(|v| v.abs()).sum();
        if norm == 0.0 {
            return Ok(());
        }
        let marginals: Vec<Vec<f64>> = self
            .maps
            .iter()
            .map(|(map, len)| {
                let mut m = vec![0.0; *len];
                for (&j, &x) in map.iter().zip(q) {
                    m[j as usize] += x;
                }
                m
            })
            .collect();
        for term in &self.terms {
            let factor = term.rate * norm.powi(term.exponent);
            for &a in &term.lowers {
                let mut v = factor;
                for &s in &term.slots {
                    v *= marginals[s][self.maps[s].0[a as usize] as usize];
                }
                out[a as usize] += v;
            }
        }
        Ok(())
    }
}

/// `ȧ(𝒜) = −ϱ_Σ a(𝒜) + Σ_{ℬ ≽ 𝒜} γ(a; 𝒜, ℬ) ϱ(ℬ)`.
pub fn coefficient_rhs(a: &CoefficientVector, rates: &RateSystem) -> Result<CoefficientVector> {
    same_ground(a.ground(), rates.ground())?;
    let field = CoefficientField::new(rates)?;
    let mut out = vec![0.0; a.values.len()];
    field.eval(&a.values, &mut out)?;
    CoefficientVector::new(a.lattice.clone(), out)
}

/// Precomputed `Σ_𝒜 ϱ(𝒜)(R_𝒜 − 1)` on raw tensors. `1̲` is skipped since
/// `R_{1̲}` is the identity.
struct MeasureField {
    space: TypeSpace,
    terms: Vec<(f64, Partition)>,
}

impl MeasureField {
    fn new(rates: &RateSystem, space: &TypeSpace) -> Self {
        let terms = rates
            .lattice()
            .elements()
            .iter()
            .zip(rates.rates())
            .filter(|(p, &r)| r > 0.0 && !p.is_one())
            .map(|(p, &r)| (r, p.clone()))
            .collect();
        Self {
            space: space.clone(),
            terms,
        }
    }

    fn eval(&self, w: &[f64], out: &mut [f64]) -> Result<()> {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (rate, p) in &self.terms {
            let r = recombine_raw(&self.space, w, p)?;
            for ((o, x), y) in out.iter_mut().zip(r).zip(w) {
                *o += rate * (x - y);
            }
        }
        Ok(())
    }
}

/// `ω̇ = Σ_𝒜 ϱ(𝒜)(R_𝒜(ω) − ω)` as a signed tensor.
pub fn measure_rhs(omega: &Measure, rates: &RateSystem) -> Result<Vec<f64>> {
    same_ground(omega.space().sites(), rates.ground())?;
    let field = MeasureField::new(rates, omega.space());
    let mut out = vec![0.0; omega.weights().len()];
    field.eval(omega.weights(), &mut out)?;
    Ok(out)
}

/// States on a time grid together with the step used and the mass drift
/// `|Σ state(t) − Σ state(0)|` at each grid point.
#[derive(Clone, Debug)]
pub struct Trajectory<S> {
    pub times: Vec<f64>,
    pub states: Vec<S>,
    pub step: f64,
    pub drift: Vec<f64>,
}

impl<S> Trajectory<S> {
    pub fn max_drift(&self) -> f64 {
        self.drift.iter().copied().fold(0.0, f64::max)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

impl Trajectory<CoefficientVector> {
    /// Columns `t` and one per partition key, one row per grid point.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_coefficient_csv(out, &self.times, &self.states)
    }

    /// Reads the format of [`Trajectory::write_csv`]; step and drift are not
    /// stored and come back as zero.
    pub fn read_csv<R: Read>(input: R, ground: GroundSet) -> Result<Self> {
        let (times, states) = read_coefficient_csv(input, ground)?;
        let drift = vec![0.0; times.len()];
        Ok(Self {
            times,
            states,
            step: 0.0,
            drift,
        })
    }
}

/// Writes coefficient vectors sharing one lattice as `t, key, key, ...` rows.
pub fn write_coefficient_csv<W: Write>(
    out: W,
    times: &[f64],
    states: &[CoefficientVector],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if let Some(first) = states.first() {
        let mut header = vec!["t".to_string()];
        header.extend(first.lattice.elements().iter().map(|p| p.to_string()));
        w.write_record(&header)?;
    }
    for (t, s) in times.iter().zip(states) {
        let mut row = vec![t.to_string()];
        row.extend(s.values.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `t, key, key, ...` rows; keys may come in any order but must cover
/// `ℙ(ground)`.
pub fn read_coefficient_csv<R: Read>(
    input: R,
    ground: GroundSet,
) -> Result<(Vec<f64>, Vec<CoefficientVector>)> {
    let lattice = Lattice::of(ground);
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.get(0) != Some("t") {
        return domain("first column must be `t`");
    }
    let mut cols = Vec::new();
    let mut seen = vec![false; lattice.size()];
    for key in header.iter().skip(1) {
        let i = lattice.index(&Partition::parse(key, ground)?)?;
        if seen[i] {
            return domain(format!("column {key} repeated"));
        }
        seen[i] = true;
        cols.push(i);
    }
    if seen.iter().any(|s| !s) {
        return domain("trajectory CSV does not cover every partition");
    }
    let parse = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|e| Error::Domain(format!("bad number `{s}`: {e}")))
    };
    let mut times = Vec::new();
    let mut states = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        times.push(parse(&rec[0])?);
        let mut values = vec![0.0; lattice.size()];
        for (k, &i) in cols.iter().enumerate() {
            values[i] = parse(&rec[k + 1])?;
        }
        states.push(CoefficientVector::new(lattice.clone(), values)?);
    }
    Ok((times, states))
}

/// `DEFAULT_STEP_FACTOR / ϱ_Σ`, or 1 for vanishing rates.
pub fn default_step(rates: &RateSystem) -> f64 {
    if rates.total() > 0.0 {
        DEFAULT_STEP_FACTOR / rates.total()
    } else {
        1.0
    }
}

/// `points` equally spaced times from 0 to `end`.
pub fn uniform_grid(end: f64, points: usize) -> Result<Vec<f64>> {
    if !(end.is_finite() && end >= 0.0) || points == 0 || (points > 1 && end == 0.0) {
        return domain(format!("invalid grid: end {end}, {points} points"));
    }
    if points == 1 {
        return Ok(vec![0.0]);
    }
    Ok((0..points)
        .map(|k| end * k as f64 / (points - 1) as f64)
        .collect())
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.first() != Some(&0.0) {
        return domain("time grid must start at 0");
    }
    if grid.iter().any(|t| !t.is_finite()) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return domain("time grid must be finite and strictly increasing");
    }
    Ok(())
}

fn check_step(step: f64, total: f64) -> Result<()> {
    if !(step.is_finite() && step > 0.0) {
        return domain(format!("step {step} must be positive"));
    }
    if step * total > MAX_STEP_FACTOR * (1.0 + 1e-12) {
        return domain(format!(
            "step {step} too large: step·ϱ_Σ = {} exceeds {MAX_STEP_FACTOR}",
            step * total
        ));
    }
    Ok(())
}

/// Classical RK4 from `y0` at `grid[0] = 0`, recording the state at each grid
/// point. Each interval is split into equal substeps no longer than `step`.
fn rk4(
    f: impl Fn(&[f64], &mut [f64]) -> Result<()>,
    y0: &[f64],
    grid: &[f64],
    step: f64,
) -> Result<Vec<Vec<f64>>> {
    let n = y0.len();
    let mut y = y0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    let mut out = vec![y.clone()];
    for w in grid.windows(2) {
        let span = w[1] - w[0];
        let substeps = (span / step).ceil().max(1.0) as usize;
        let h = span / substeps as f64;
        for _ in 0..substeps {
            f(&y, &mut k1)?;
            for i in 0..n {
                tmp[i] = y[i] + 0.5 * h * k1[i];
            }
            f(&tmp, &mut k2)?;
            for i in 0..n {
                tmp[i] = y[i] + 0.5 * h * k2[i];
            }
            f(&tmp, &mut k3)?;
            for i in 0..n {
                tmp[i] = y[i] + h * k3[i];
            }
            f(&tmp, &mut k4)?;
            for i in 0..n {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        out.push(y.clone());
    }
    Ok(out)
}

fn drifts(states: &[Vec<f64>]) -> Vec<f64> {
    let s0: f64 = states[0].iter().sum();
    states
        .iter()
        .map(|s| (s.iter().sum::<f64>() - s0).abs())
        .collect()
}

/// Integrates the coefficient ODE from the probability vector `a0`.
pub fn integrate_coefficients(
    rates: &RateSystem,
    a0: &CoefficientVector,
    grid: &[f64],
    step: f64,
) -> Result<Trajectory<CoefficientVector>> {
    same_ground(a0.ground(), rates.ground())?;
    if !a0.is_probability(NEGATIVE_TOLERANCE) {
        return domain("initial coefficients must form a probability vector");
    }
    check_grid(grid)?;
    check_step(step, rates.total())?;
    let field = CoefficientField::new(rates)?;
    let raw = rk4(|q, out| field.eval(q, out), &a0.values, grid, step)?;
    let drift = drifts(&raw);
    let states = raw
        .into_iter()
        .map(|v| CoefficientVector::new(a0.lattice.clone(), v))
        .collect::<Result<_>>()?;
    Ok(Trajectory {
        times: grid.to_vec(),
        states,
        step,
        drift,
    })
}

/// Integrates the measure ODE from `omega0`.
pub fn integrate_measure(
    rates: &RateSystem,
    omega0: &Measure,
    grid: &[f64],
    step: f64,
) -> Result<Trajectory<Measure>> {
    same_ground(omega0.space().sites(), rates.ground())?;
    check_grid(grid)?;
    check_step(step, rates.total())?;
    let field = MeasureField::new(rates, omega0.space());
    let raw = rk4(|w, out| field.eval(w, out), omega0.weights(), grid, step)?;
    let drift = drifts(&raw);
    let scale = omega0.norm().max(1.0);
    let mut states = Vec::with_capacity(raw.len());
    for mut w in raw {
        for x in &mut w {
            if *x < 0.0 {
                if *x < -NEGATIVE_TOLERANCE * scale {
                    return domain(format!("measure left the positive cone: weight {x}"));
                }
                *x = 0.0;
            }
        }
        states.push(Measure::new(omega0.space().clone(), w)?);
    }
    Ok(Trajectory {
        times: grid.to_vec(),
        states,
        step,
        drift,
    })
}

//! Recursive closed-form solution of the coefficient ODE.
//!
//! For every nonempty `U ⊆ S` the solution is `a^U_t(𝒜) = Σ_{ℬ ≽ 𝒜}
//! θ^U(𝒜, ℬ) e^{−ψ^U(ℬ) t}`. Tables are built from the smallest subsets up:
//! for `ℬ ≺ 1̲`,
//!
//! ```text
//! θ^U(𝒜, ℬ) = ε(𝒜, ℬ) / (ψ^U(1̲) − ψ^U(ℬ)),
//! ε(𝒜, ℬ)   = Σ_{ℬ ≼ 𝒞 ≺ 1̲} ϱ^U(𝒞) Π_i θ^{C_i}(𝒜|_{C_i}, ℬ|_{C_i}),
//! ```
//!
//! and `θ^U(𝒜, 1̲)` closes each row to `δ(𝒜, 1̲)`.
//!
//! Coinciding decay rates are classified per subset:
//! * `bad`: `ψ^U(ℬ) = ψ^U(1̲)` with `ε(·, ℬ) ≠ 0`; the pure exponential form
//!   breaks down and the build fails with the report.
//! * `removable`: `ψ^U(ℬ) = ψ^U(1̲)` with `ε(·, ℬ) ≡ 0`; the column `θ(·, ℬ)`
//!   is zero, its continuous extension.
//! * `harmless`: `ψ^U(ℬ) = ψ^U(ℬ′)` with `ℬ, ℬ′ ≠ 1̲`.

mod induced;
pub mod special;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::{Arc, OnceLock};

use serde::Serialize;
use serde_json::{json, Map, Value};

pub use induced::{
    chi, kappa, linear_solution, marginal_rates, marginal_vector, psi, rho_from_chi, DecayRates,
};
pub use special::{e0, em};

use crate::coefficient_dynamics::{CoefficientVector, RateSystem};
use crate::error::{domain, Error, Result};
use crate::partition_lattice::{GroundSet, IncidenceElement, Lattice, Partition};

/// Default relative tolerance for coinciding decay rates.
pub const DEGENERACY_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Degeneracy {
    Bad,
    Removable,
    Harmless,
}

#[derive(Clone, Debug)]
pub struct DegeneratePair {
    pub subset: GroundSet,
    pub first: Partition,
    pub second: Partition,
    pub psi_first: f64,
    pub psi_second: f64,
    pub class: Degeneracy,
}

/// Coinciding decay rates, smallest subsets first.
#[derive(Clone, Debug, Default)]
pub struct DegeneracyReport {
    pub tolerance: f64,
    pub pairs: Vec<DegeneratePair>,
}

impl DegeneracyReport {
    pub fn is_generic(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn bad_count(&self) -> usize {
        self.count(Degeneracy::Bad)
    }

    pub fn has_bad(&self) -> bool {
        self.bad_count() > 0
    }

    pub fn count(&self, class: Degeneracy) -> usize {
        self.pairs.iter().filter(|p| p.class == class).count()
    }

    pub fn to_json(&self) -> Value {
        let pairs: Vec<Value> = self
            .pairs
            .iter()
            .map(|p| {
                json!({
                    "subset": p.subset.elements().collect::<Vec<_>>(),
                    "first": p.first.to_string(),
                    "second": p.second.to_string(),
                    "psi_first": p.psi_first,
                    "psi_second": p.psi_second,
                    "class": p.class,
                })
            })
            .collect();
        json!({
            "status": if self.is_generic() { "generic" } else { "degenerate" },
            "tolerance": self.tolerance,
            "bad": self.count(Degeneracy::Bad),
            "removable": self.count(Degeneracy::Removable),
            "harmless": self.count(Degeneracy::Harmless),
            "pairs": pairs,
        })
    }
}

impl fmt::Display for DegeneracyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_generic() {
            return write!(f, "generic: all decay rates distinct");
        }
        writeln!(
            f,
            "degenerate: {} bad, {} removable, {} harmless",
            self.count(Degeneracy::Bad),
            self.count(Degeneracy::Removable),
            self.count(Degeneracy::Harmless)
        )?;
        for p in &self.pairs {
            writeln!(
                f,
                "  {:?} on {}: ψ({}) = {} vs ψ({}) = {}",
                p.class, p.subset, p.first, p.psi_first, p.second, p.psi_second
            )?;
        }
        Ok(())
    }
}

/// `ψ^U` and `θ^U` for one subset; `η^U` on demand.
struct SubsetTable {
    lattice: Arc<Lattice>,
    psi: Vec<f64>,
    theta: Vec<f64>,
    eta: OnceLock<std::result::Result<Vec<f64>, usize>>,
}

impl SubsetTable {
    fn theta(&self, a: usize, b: usize) -> f64 {
        self.theta[a * self.lattice.size() + b]
    }

    /// Inverse of `θ` in the incidence algebra, or the index of a vanishing
    /// diagonal entry.
    fn eta(&self) -> std::result::Result<&Vec<f64>, usize> {
        self.eta
            .get_or_init(|| {
                let lat = &self.lattice;
                let n = lat.size();
                let mut eta = vec![0.0; n * n];
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by_key(|&i| lat.element(i).block_count());
                for &a in &order {
                    let diag = self.theta(a, a);
                    if diag.abs() <= 1e-14 || !diag.is_finite() {
                        return Err(a);
                    }
                    for &c in lat.up(a) {
                        let c = c as usize;
                        let value = if c == a {
                            1.0 / diag
                        } else {
                            let s: f64 = lat
                                .up(a)
                                .iter()
                                .map(|&b| b as usize)
                                .filter(|&b| b != a && lat.leq(b, c))
                                .map(|b| self.theta(a, b) * eta[b * n + c])
                                .sum();
                            -s / diag
                        };
                        eta[a * n + c] = value;
                    }
                }
                Ok(eta)
            })
            .as_ref()
            .map_err(|&i| i)
    }
}

/// Per-subset tables of the closed-form solution.
pub struct ClosedFormSolution {
    rates: RateSystem,
    tables: BTreeMap<u64, SubsetTable>,
    report: DegeneracyReport,
}

impl fmt::Debug for ClosedFormSolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClosedFormSolution")
            .field("ground", &self.rates.ground())
            .field("subsets", &self.tables.len())
            .field("generic", &self.report.is_generic())
            .finish()
    }
}

struct Built {
    tables: BTreeMap<u64, SubsetTable>,
    report: DegeneracyReport,
}

fn build_tables(rates: &RateSystem, tol: f64) -> Result<Built> {
    if !(tol.is_finite() && tol >= 0.0) {
        return domain(format!("tolerance {tol} must be nonnegative"));
    }
    let ground = rates.ground();
    let decay = DecayRates::new(rates);
    let abs_tol = tol * rates.total().max(1.0);
    let mut tables: BTreeMap<u64, SubsetTable> = BTreeMap::new();
    let mut report = DegeneracyReport {
        tolerance: tol,
        pairs: Vec::new(),
    };

    for u in ground.subsets() {
        let lat = Lattice::of(u);
        let n = lat.size();
        let one = lat.one_index();
        let psi: Vec<f64> = lat
            .elements()
            .iter()
            .map(|a| decay.psi(a))
            .collect::<Result<_>>()?;

        for i in 0..n {
            for j in i + 1..n {
                if i != one && j != one && (psi[i] - psi[j]).abs() <= abs_tol {
                    report.pairs.push(DegeneratePair {
                        subset: u,
                        first: lat.element(i).clone(),
                        second: lat.element(j).clone(),
                        psi_first: psi[i],
                        psi_second: psi[j],
                        class: Degeneracy::Harmless,
                    });
                }
            }
        }

        if n == 1 {
            tables.insert(u.mask(), table(lat, psi, vec![1.0]));
            continue;
        }

        let marg = rates.marginal(u)?;
        let mut theta = vec![0.0; n * n];
        let mut complete = true;
        let mut maps: HashMap<u64, Arc<Vec<u32>>> = HashMap::new();

        for b in 0..n {
            if b == one {
                continue;
            }
            // ε(𝒜, ℬ) for all 𝒜 ≼ ℬ; None if a needed subtable is missing.
            let mut eps: Option<Vec<(usize, f64)>> =
                Some(lat.down(b).iter().map(|&a| (a as usize, 0.0)).collect());
            for &c in lat.up(b) {
                let c = c as usize;
                let rate = marg.rates()[c];
                if c == one || rate == 0.0 {
                    continue;
                }
                let mut factors = Vec::new();
                for block in lat.element(c).blocks() {
                    match tables.get(&block.mask()) {
                        Some(t) => {
                            let map = match maps.get(&block.mask()) {
                                Some(m) => m.clone(),
                                None => {
                                    let m = lat.restriction_map(block)?;
                                    maps.insert(block.mask(), m.clone());
                                    m
                                }
                            };
                            factors.push((t, map));
                        }
                        None => {
                            eps = None;
                            break;
                        }
                    }
                }
                let Some(row) = eps.as_mut() else { break };
                for (a, e) in row.iter_mut() {
                    let mut v = rate;
                    for (t, map) in &factors {
                        v *= t.theta(map[*a] as usize, map[b] as usize);
                    }
                    *e += v;
                }
            }

            let gap = psi[one] - psi[b];
            if gap.abs() <= abs_tol {
                let removable = eps
                    .as_ref()
                    .is_some_and(|row| row.iter().all(|(_, e)| e.abs() <= abs_tol));
                report.pairs.push(DegeneratePair {
                    subset: u,
                    first: lat.element(b).clone(),
                    second: lat.element(one).clone(),
                    psi_first: psi[b],
                    psi_second: psi[one],
                    class: if removable {
                        Degeneracy::Removable
                    } else {
                        Degeneracy::Bad
                    },
                });
                if !removable {
                    complete = false;
                }
                continue;
            }
            match eps {
                Some(row) => {
                    for (a, e) in row {
                        theta[a * n + b] = e / gap;
                    }
                }
                None => complete = false,
            }
        }

        if !complete {
            continue;
        }
        theta[one * n + one] = 1.0;
        for a in 0..n {
            if a == one {
                continue;
            }
            let s: f64 = lat
                .up(a)
                .iter()
                .map(|&c| c as usize)
                .filter(|&c| c != one)
                .map(|c| theta[a * n + c])
                .sum();
            theta[a * n + one] = -s;
        }
        tables.insert(u.mask(), table(lat, psi, theta));
    }

    // a coincidence on U lifts to S by padding with singletons
    debug_assert!(
        report.pairs.is_empty() || report.pairs.iter().any(|p| p.subset == ground),
        "distinct decay rates on S but not on a subsystem"
    );
    Ok(Built { tables, report })
}

fn table(lattice: Arc<Lattice>, psi: Vec<f64>, theta: Vec<f64>) -> SubsetTable {
    SubsetTable {
        lattice,
        psi,
        theta,
        eta: OnceLock::new(),
    }
}

/// Builds `ψ^U`, `θ^U` for all nonempty `U ⊆ S`. Fails with
/// [`Error::Degenerate`] when a bad coincidence occurs; removable and
/// harmless coincidences are recorded in [`ClosedFormSolution::report`].
pub fn build_closed_form(rates: &RateSystem, tol: f64) -> Result<ClosedFormSolution> {
    let built = build_tables(rates, tol)?;
    if built.report.has_bad() {
        return Err(Error::Degenerate(Box::new(built.report)));
    }
    Ok(ClosedFormSolution {
        rates: rates.clone(),
        tables: built.tables,
        report: built.report,
    })
}

/// All coinciding decay-rate pairs with their classification.
pub fn detect_degeneracy(rates: &RateSystem, tol: f64) -> Result<DegeneracyReport> {
    Ok(build_tables(rates, tol)?.report)
}

impl ClosedFormSolution {
    pub fn rates(&self) -> &RateSystem {
        &self.rates
    }

    pub fn ground(&self) -> GroundSet {
        self.rates.ground()
    }

    pub fn report(&self) -> &DegeneracyReport {
        &self.report
    }

    fn table(&self, u: GroundSet) -> Result<&SubsetTable> {
        match self.tables.get(&u.mask()) {
            Some(t) => Ok(t),
            None => domain(format!("no table for {u}")),
        }
    }

    pub fn lattice(&self, u: GroundSet) -> Result<&Arc<Lattice>> {
        Ok(&self.table(u)?.lattice)
    }

    /// `ψ^U(𝒜)` with `U` the ground set of `a`.
    pub fn psi(&self, a: &Partition) -> Result<f64> {
        let t = self.table(a.ground())?;
        Ok(t.psi[t.lattice.index(a)?])
    }

    /// `ψ^U` indexed like `Lattice::of(u)`.
    pub fn psi_table(&self, u: GroundSet) -> Result<&[f64]> {
        Ok(&self.table(u)?.psi)
    }

    pub fn theta(&self, a: &Partition, b: &Partition) -> Result<f64> {
        let t = self.table(a.ground())?;
        Ok(t.theta(t.lattice.index(a)?, t.lattice.index(b)?))
    }

    pub fn theta_incidence(&self, u: GroundSet) -> Result<IncidenceElement> {
        let t = self.table(u)?;
        Ok(IncidenceElement::from_fn(t.lattice.clone(), |a, b| t.theta(a, b)))
    }

    pub fn eta_incidence(&self, u: GroundSet) -> Result<IncidenceElement> {
        let t = self.table(u)?;
        let n = t.lattice.size();
        match t.eta() {
            Ok(eta) => Ok(IncidenceElement::from_fn(t.lattice.clone(), |a, b| eta[a * n + b])),
            Err(i) => Err(Error::NotInvertible {
                ground: u,
                at: t.lattice.element(i).clone(),
            }),
        }
    }

    /// `a^U_t(𝒜) = Σ_{ℬ ≽ 𝒜} θ^U(𝒜, ℬ) e^{−ψ^U(ℬ) t}`.
    pub fn evaluate(&self, u: GroundSet, t: f64) -> Result<CoefficientVector> {
        if !(t.is_finite() && t >= 0.0) {
            return domain(format!("time {t} must be nonnegative"));
        }
        let tab = self.table(u)?;
        let lat = &tab.lattice;
        let decay: Vec<f64> = tab.psi.iter().map(|p| (-p * t).exp()).collect();
        let values = (0..lat.size())
            .map(|a| {
                lat.up(a)
                    .iter()
                    .map(|&b| tab.theta(a, b as usize) * decay[b as usize])
                    .sum()
            })
            .collect();
        CoefficientVector::new(lat.clone(), values)
    }

    /// `b^U_t(𝒜) = Σ_{ℬ ≽ 𝒜} η^U(𝒜, ℬ) a^U_t(ℬ)`.
    pub fn b_function(&self, a: &Partition, t: f64) -> Result<f64> {
        let u = a.ground();
        let eta = self.eta_incidence(u)?;
        let at = self.evaluate(u, t)?;
        let lat = at.lattice().clone();
        let ia = lat.index(a)?;
        Ok(lat
            .up(ia)
            .iter()
            .map(|&b| eta.get_index(ia, b as usize) * at.values()[b as usize])
            .sum())
    }

    /// Rates recovered from `θ` and `ψ`:
    /// `ϱ(𝒜) = ϱ_Σ δ(𝒜, 1̲) − Σ_{ℬ ≽ 𝒜} θ(𝒜, ℬ) ψ(ℬ)`.
    pub fn rho_from_theta_psi(&self, u: GroundSet) -> Result<CoefficientVector> {
        let tab = self.table(u)?;
        let lat = &tab.lattice;
        let values = (0..lat.size())
            .map(|a| {
                let head = if a == lat.one_index() {
                    self.rates.total()
                } else {
                    0.0
                };
                head - lat
                    .up(a)
                    .iter()
                    .map(|&b| tab.theta(a, b as usize) * tab.psi[b as usize])
                    .sum::<f64>()
            })
            .collect();
        CoefficientVector::new(lat.clone(), values)
    }

    /// Per-subset `ψ` tables and `θ` rows keyed by partition text, plus the
    /// degeneracy report.
    pub fn to_json(&self) -> Value {
        let subsets: Vec<Value> = self
            .tables
            .values()
            .map(|tab| {
                let lat = &tab.lattice;
                let mut psi = Map::new();
                let mut theta = Map::new();
                for (a, p) in lat.elements().iter().enumerate() {
                    psi.insert(p.to_string(), json!(tab.psi[a]));
                    let mut row = Map::new();
                    for &b in lat.up(a) {
                        let v = tab.theta(a, b as usize);
                        if v != 0.0 {
                            row.insert(lat.element(b as usize).to_string(), json!(v));
                        }
                    }
                    theta.insert(p.to_string(), Value::Object(row));
                }
                json!({
                    "subset": lat.ground().elements().collect::<Vec<_>>(),
                    "psi": psi,
                    "theta": theta,
                })
            })
            .collect();
        json!({
            "sites": self.ground().elements().collect::<Vec<_>>(),
            "total_rate": self.rates.total(),
            "subsets": subsets,
            "degeneracy": self.report.to_json(),
        })
    }
}

/// Free-function form of [`ClosedFormSolution::evaluate`].
pub fn evaluate(sol: &ClosedFormSolution, u: GroundSet, t: f64) -> Result<CoefficientVector> {
    sol.evaluate(u, t)
}

/// Free-function form of [`ClosedFormSolution::eta_incidence`].
pub fn eta(sol: &ClosedFormSolution, u: GroundSet) -> Result<IncidenceElement> {
    sol.eta_incidence(u)
}

/// Free-function form of [`ClosedFormSolution::b_function`].
pub fn b_function(sol: &ClosedFormSolution, a: &Partition, t: f64) -> Result<f64> {
    sol.b_function(a, t)
}

/// Free-function form of [`ClosedFormSolution::rho_from_theta_psi`].
pub fn rho_from_theta_psi(sol: &ClosedFormSolution, u: GroundSet) -> Result<CoefficientVector> {
    sol.rho_from_theta_psi(u)
}

//! Quantities induced on subsystems: marginal rates and vectors, the decay
//! rates `ψ` and `χ`, the counts `κ`, and the linear-case solution.

use std::collections::HashMap;
use std::sync::Arc;

use crate::coefficient_dynamics::{CoefficientVector, RateSystem};
use crate::error::{domain, same_ground, Result};
use crate::partition_lattice::{GroundSet, Lattice, Partition};

/// `ϱ^U(𝒜) = Σ_{𝒟|_U = 𝒜} ϱ(𝒟)`.
pub fn marginal_rates(rates: &RateSystem, u: GroundSet) -> Result<Arc<RateSystem>> {
    rates.marginal(u)
}

/// `q^U(𝒜) = Σ_{𝒟|_U = 𝒜} q(𝒟)`.
pub fn marginal_vector(q: &CoefficientVector, u: GroundSet) -> Result<CoefficientVector> {
    let map = q.lattice().restriction_map(u)?;
    let target = Lattice::of(u);
    let mut values = vec![0.0; target.size()];
    for (&j, &x) in map.iter().zip(q.values()) {
        values[j as usize] += x;
    }
    CoefficientVector::new(target, values)
}

/// `χ^U(𝒜) = Σ_{ℬ ∉ [𝒜, 1̲]} ϱ^U(ℬ)` for `𝒜 ∈ ℙ(U)`.
pub fn chi(rates: &RateSystem, u: GroundSet, a: &Partition) -> Result<f64> {
    same_ground(a.ground(), u)?;
    let marg = rates.marginal(u)?;
    let lat = marg.lattice();
    let ia = lat.index(a)?;
    Ok(chi_row(&marg)[ia])
}

/// `χ^U` for every element of `ℙ(U)`, where `rates` already lives on `U`.
pub(crate) fn chi_row(marg: &RateSystem) -> Vec<f64> {
    let lat = marg.lattice();
    (0..lat.size())
        .map(|a| {
            (0..lat.size())
                .filter(|&b| !lat.leq(a, b))
                .map(|b| marg.rates()[b])
                .sum()
        })
        .collect()
}

/// Top-level decay rates `ψ^V(1̲)` for every nonempty `V ⊆ S`, giving
/// `ψ^U(𝒜) = Σ_i ψ^{A_i}(1̲)` for partitions of any subset.
#[derive(Clone, Debug)]
pub struct DecayRates {
    ground: GroundSet,
    tops: HashMap<u64, f64>,
}

impl DecayRates {
    pub fn new(rates: &RateSystem) -> Self {
        let ground = rates.ground();
        let lat = rates.lattice();
        let tops = ground
            .subsets()
            .into_iter()
            .map(|v| {
                // ψ^V(1̲) = ϱ_Σ − ϱ^V(1̲): the total rate of partitions that split V.
                let value = if v.cardinality() == 1 {
                    0.0
                } else {
                    lat.elements()
                        .iter()
                        .zip(rates.rates())
                        .filter(|(d, _)| !d.block_masks().iter().any(|b| v.mask() & !b == 0))
                        .map(|(_, &r)| r)
                        .sum()
                };
                (v.mask(), value)
            })
            .collect();
        Self { ground, tops }
    }

    /// `ψ^V(1̲)`.
    pub fn top(&self, v: GroundSet) -> Result<f64> {
        match self.tops.get(&v.mask()) {
            Some(&x) => Ok(x),
            None => domain(format!("{v} is not a subset of {}", self.ground)),
        }
    }

    /// `ψ^U(𝒜)` with `U` the ground set of `a`.
    pub fn psi(&self, a: &Partition) -> Result<f64> {
        a.blocks().map(|b| self.top(b)).sum()
    }
}

/// `ψ^U(𝒜)`; `a` must be a partition of `u`.
pub fn psi(ctx: &DecayRates, u: GroundSet, a: &Partition) -> Result<f64> {
    same_ground(a.ground(), u)?;
    ctx.psi(a)
}

/// `κ(𝒜, ℬ) = |𝒜| − #{i : ℬ|_{A_i} = 1̲}`, the number of blocks of `𝒜` that
/// `ℬ` splits.
pub fn kappa(a: &Partition, b: &Partition) -> Result<usize> {
    same_ground(a.ground(), b.ground())?;
    Ok(a.block_masks()
        .iter()
        .filter(|&&ai| !b.block_masks().iter().any(|&bj| ai & !bj == 0))
        .count())
}

/// Solution of the linearized system,
/// `a^lin_t(𝒜) = Σ_{ℬ ≽ 𝒜} μ(𝒜, ℬ) e^{−χ^U(ℬ) t}`.
pub fn linear_solution(rates: &RateSystem, u: GroundSet, t: f64) -> Result<CoefficientVector> {
    if !(t.is_finite() && t >= 0.0) {
        return domain(format!("time {t} must be nonnegative"));
    }
    let marg = rates.marginal(u)?;
    let lat = marg.lattice().clone();
    let decay: Vec<f64> = chi_row(&marg).iter().map(|c| (-c * t).exp()).collect();
    let values = (0..lat.size())
        .map(|a| {
            lat.mobius_row(a)
                .iter()
                .map(|&(b, mu)| mu as f64 * decay[b as usize])
                .sum()
        })
        .collect();
    CoefficientVector::new(lat, values)
}

/// Recovers rates from `χ` by upper Möbius inversion:
/// `ϱ(ℬ) = δ(ℬ, 1̲) ϱ_Σ − Σ_{𝒞 ≽ ℬ} μ(ℬ, 𝒞) χ(𝒞)`.
pub fn rho_from_chi(chi_table: &CoefficientVector, rho_total: f64) -> Result<CoefficientVector> {
    let lat = chi_table.lattice().clone();
    let values = (0..lat.size())
        .map(|b| {
            let head = if b == lat.one_index() { rho_total } else { 0.0 };
            head - lat
                .mobius_row(b)
                .iter()
                .map(|&(c, mu)| mu as f64 * chi_table.values()[c as usize])
                .sum::<f64>()
        })
        .collect();
    CoefficientVector::new(lat, values)
}

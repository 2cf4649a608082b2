//! Continuous-time Monte Carlo simulation of the partitioning process.
//!
//! Starting from `1̲`, each block `C` of the current state is independently
//! replaced by a refinement `σ ≠ 1̲` of `ℙ(C)` at rate `ϱ^C(σ)`. Transitions
//! are sampled with the Gillespie direct method: an exponential waiting time
//! with the total exit rate, then a block, then a refinement.
//!
//! Replicates are generated in fixed chunks; chunk `k` uses
//! `ChaCha8Rng::seed_from_u64(seed)` on stream `k`, so results depend only on
//! the seed and the sample count, not on the thread count.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;

use crate::closed_form::{build_closed_form, DEGENERACY_TOLERANCE};
use crate::coefficient_dynamics::{
    default_step, integrate_coefficients, CoefficientVector, RateSystem,
};
use crate::error::{domain, same_ground, Error, Result};
use crate::partition_lattice::{is_refinement, restrict, GroundSet, Lattice, Partition};

/// Name of the generator used by [`estimate_distribution`].
pub const GENERATOR: &str = "ChaCha8Rng";
/// Replicates per independent random stream.
pub const CHUNK_SIZE: u64 = 4096;

/// Current partition and the time it was reached.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessState {
    pub current: Partition,
    pub time: f64,
}

impl ProcessState {
    pub fn start(ground: GroundSet) -> Self {
        Self {
            current: Partition::one(ground),
            time: 0.0,
        }
    }
}

/// Refinements `σ ≠ 1̲` of one block with cumulative rates.
struct Catalog {
    lattice: Arc<Lattice>,
    targets: Vec<u32>,
    cumulative: Vec<f64>,
}

impl Catalog {
    fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }
}

/// Transition catalogs for every block that can occur.
pub struct PartitioningProcess {
    ground: GroundSet,
    catalogs: HashMap<u64, Catalog>,
}

impl PartitioningProcess {
    pub fn new(rates: &RateSystem) -> Result<Self> {
        let ground = rates.ground();
        let mut catalogs = HashMap::new();
        for u in ground.subsets() {
            let marg = rates.marginal(u)?;
            let lattice = marg.lattice().clone();
            let mut targets = Vec::new();
            let mut cumulative = Vec::new();
            let mut acc = 0.0;
            for (i, &r) in marg.rates().iter().enumerate() {
                if i != lattice.one_index() && r > 0.0 {
                    acc += r;
                    targets.push(i as u32);
                    cumulative.push(acc);
                }
            }
            catalogs.insert(
                u.mask(),
                Catalog {
                    lattice,
                    targets,
                    cumulative,
                },
            );
        }
        Ok(Self { ground, catalogs })
    }

    pub fn ground(&self) -> GroundSet {
        self.ground
    }

    fn catalog(&self, block: u64) -> &Catalog {
        &self.catalogs[&block]
    }

    /// `ψ^S(𝒞) = Σᵢ ψ^{C_i}(1̲)`.
    pub fn exit_rate(&self, c: &Partition) -> Result<f64> {
        same_ground(c.ground(), self.ground)?;
        Ok(c.block_masks()
            .iter()
            .map(|&b| self.catalog(b).total())
            .sum())
    }

    /// One transition out of `state`; absorbing states are an error.
    pub fn step<R: Rng + ?Sized>(&self, state: &ProcessState, rng: &mut R) -> Result<ProcessState> {
        let total = self.exit_rate(&state.current)?;
        if total <= 0.0 {
            return domain(format!("state {} is absorbing", state.current));
        }
        let wait: f64 = rng.sample::<f64, _>(Exp1) / total;
        Ok(ProcessState {
            current: self.jump(&state.current, total, rng),
            time: state.time + wait,
        })
    }

    fn jump<R: Rng + ?Sized>(&self, c: &Partition, total: f64, rng: &mut R) -> Partition {
        let blocks = c.block_masks();
        let mut u = rng.random::<f64>() * total;
        let mut chosen = blocks.len() - 1;
        for (i, &b) in blocks.iter().enumerate() {
            let r = self.catalog(b).total();
            if u < r {
                chosen = i;
                break;
            }
            u -= r;
        }
        // the last block with positive rate absorbs rounding overshoot
        while self.catalog(blocks[chosen]).total() <= 0.0 {
            chosen -= 1;
        }
        let cat = self.catalog(blocks[chosen]);
        let v = rng.random::<f64>() * cat.total();
        let k = cat
            .cumulative
            .partition_point(|&x| x <= v)
            .min(cat.targets.len() - 1);
        let sigma = cat.lattice.element(cat.targets[k] as usize);
        let mut next: Vec<u64> = blocks
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != chosen)
            .map(|(_, &b)| b)
            .collect();
        next.extend_from_slice(sigma.block_masks());
        Partition::from_disjoint_masks(next)
    }

    /// State at time `t_end` of the path started in `start` at time 0.
    pub fn simulate_from<R: Rng + ?Sized>(
        &self,
        start: &Partition,
        t_end: f64,
        rng: &mut R,
    ) -> Result<Partition> {
        same_ground(start.ground(), self.ground)?;
        if !(t_end.is_finite() && t_end >= 0.0) {
            return domain(format!("time {t_end} must be nonnegative"));
        }
        let mut current = start.clone();
        let mut time = 0.0;
        loop {
            let total = self.exit_rate(&current)?;
            if total <= 0.0 {
                return Ok(current);
            }
            time += rng.sample::<f64, _>(Exp1) / total;
            if time > t_end {
                return Ok(current);
            }
            current = self.jump(&current, total, rng);
        }
    }

    /// Counts of `simulate_from(start, t)` over `n_samples` replicates.
    pub fn estimate_from(
        &self,
        start: &Partition,
        t: f64,
        n_samples: u64,
        seed: u64,
    ) -> Result<EmpiricalDistribution> {
        if n_samples == 0 {
            return domain("at least one sample is required");
        }
        let lattice = Lattice::of(self.ground);
        let chunks = n_samples.div_ceil(CHUNK_SIZE);
        let parts: Vec<EmpiricalDistribution> = (0..chunks)
            .into_par_iter()
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k);
                let len = CHUNK_SIZE.min(n_samples - k * CHUNK_SIZE);
                let mut dist = EmpiricalDistribution::empty(lattice.clone());
                for _ in 0..len {
                    let p = self.simulate_from(start, t, &mut rng)?;
                    dist.add(&p)?;
                }
                Ok(dist)
            })
            .collect::<Result<_>>()?;
        let mut out = EmpiricalDistribution::empty(lattice);
        for p in &parts {
            out.merge(p)?;
        }
        Ok(out)
    }
}

/// `ψ^S(𝒞)`, the total rate of leaving `𝒞`.
pub fn exit_rate(rates: &RateSystem, c: &Partition) -> Result<f64> {
    same_ground(c.ground(), rates.ground())?;
    c.blocks()
        .map(|b| {
            let m = rates.marginal(b)?;
            Ok(m.total() - m.rates()[m.lattice().one_index()])
        })
        .sum()
}

/// One transition of the process.
pub fn step<R: Rng + ?Sized>(
    rates: &RateSystem,
    state: &ProcessState,
    rng: &mut R,
) -> Result<ProcessState> {
    PartitioningProcess::new(rates)?.step(state, rng)
}

/// State at `t_end` of the process started in `1̲`.
pub fn simulate_path<R: Rng + ?Sized>(rates: &RateSystem, t_end: f64, rng: &mut R) -> Result<Partition> {
    PartitioningProcess::new(rates)?.simulate_from(&Partition::one(rates.ground()), t_end, rng)
}

/// Empirical distribution of the process at time `t` from `n_samples`
/// replicates started in `1̲`.
pub fn estimate_distribution(
    rates: &RateSystem,
    t: f64,
    n_samples: u64,
    seed: u64,
) -> Result<EmpiricalDistribution> {
    PartitioningProcess::new(rates)?.estimate_from(&Partition::one(rates.ground()), t, n_samples, seed)
}

/// Replicate counts per partition of `S`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalDistribution {
    lattice: Arc<Lattice>,
    counts: Vec<u64>,
    total: u64,
}

impl EmpiricalDistribution {
    pub fn empty(lattice: Arc<Lattice>) -> Self {
        let counts = vec![0; lattice.size()];
        Self {
            lattice,
            counts,
            total: 0,
        }
    }

    pub fn add(&mut self, p: &Partition) -> Result<()> {
        let i = self.lattice.index(p)?;
        self.counts[i] += 1;
        self.total += 1;
        Ok(())
    }

    pub fn ground(&self) -> GroundSet {
        self.lattice.ground()
    }

    pub fn lattice(&self) -> &Arc<Lattice> {
        &self.lattice
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn count(&self, p: &Partition) -> Result<u64> {
        Ok(self.counts[self.lattice.index(p)?])
    }

    /// Partitions with nonzero count, in lattice order.
    pub fn counts(&self) -> impl Iterator<Item = (&Partition, u64)> + '_ {
        self.lattice
            .elements()
            .iter()
            .zip(self.counts.iter().copied())
            .filter(|&(_, c)| c > 0)
    }

    pub fn merge(&mut self, other: &EmpiricalDistribution) -> Result<()> {
        same_ground(self.ground(), other.ground())?;
        for (x, y) in self.counts.iter_mut().zip(&other.counts) {
            *x += y;
        }
        self.total += other.total;
        Ok(())
    }

    pub fn frequency(&self, p: &Partition) -> Result<f64> {
        Ok(self.count(p)? as f64 / self.total.max(1) as f64)
    }

    pub fn frequencies(&self) -> CoefficientVector {
        let n = self.total.max(1) as f64;
        let values = self.counts.iter().map(|&c| c as f64 / n).collect();
        CoefficientVector::new(self.lattice.clone(), values).expect("sizes agree")
    }

    /// `½ Σ |frequency − a|`.
    pub fn tv_distance(&self, a: &CoefficientVector) -> Result<f64> {
        self.frequencies().tv_distance(a)
    }

    /// Rows `key,count,frequency` for partitions with nonzero count.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["key", "count", "frequency"])?;
        let n = self.total.max(1) as f64;
        for (p, c) in self.counts() {
            w.write_record([p.to_string(), c.to_string(), (c as f64 / n).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format of [`EmpiricalDistribution::write_csv`].
    pub fn read_csv<R: Read>(input: R, ground: GroundSet) -> Result<Self> {
        let mut dist = Self::empty(Lattice::of(ground));
        let mut r = csv::Reader::from_reader(input);
        for rec in r.records() {
            let rec = rec?;
            let p = Partition::parse(&rec[0], ground)?;
            let c: u64 = rec[1]
                .trim()
                .parse()
                .map_err(|e| Error::Domain(format!("bad count `{}`: {e}", &rec[1])))?;
            let i = dist.lattice.index(&p)?;
            dist.counts[i] += c;
            dist.total += c;
        }
        Ok(dist)
    }
}

/// Empirical `P_t(𝒞, 𝒟)` against the product of per-block probabilities.
#[derive(Clone, Debug)]
pub struct ProductCheck {
    pub empirical: f64,
    pub product: f64,
    pub std_error: f64,
    pub z_score: f64,
    pub samples: u64,
}

/// `P^U_t(1̲, 𝒜)` on every block `U` of `c`, from the closed form or, if the
/// rates are degenerate, by integration of the marginal system.
fn block_probabilities(rates: &RateSystem, c: &Partition, d: &Partition, t: f64) -> Result<f64> {
    let closed = build_closed_form(rates, DEGENERACY_TOLERANCE);
    let mut product = 1.0;
    for block in c.blocks() {
        let target = restrict(d, block)?;
        let a = match &closed {
            Ok(sol) => sol.evaluate(block, t)?,
            Err(Error::Degenerate(_)) => {
                let marg = rates.marginal(block)?;
                let a0 = CoefficientVector::delta(&Partition::one(block));
                let traj = integrate_coefficients(&marg, &a0, &[0.0, t], default_step(&marg))?;
                traj.states[1].clone()
            }
            Err(e) => return Err(Error::Domain(e.to_string())),
        };
        product *= a.get(&target)?;
    }
    Ok(product)
}

/// Simulates from `c` and compares the frequency of `d` at time `t` with
/// `Π P^{C_i}_t(1̲, 𝒟|_{C_i})`. `d` must refine `c`.
pub fn transition_probability_product_check(
    rates: &RateSystem,
    c: &Partition,
    d: &Partition,
    t: f64,
    n_samples: u64,
    seed: u64,
) -> Result<ProductCheck> {
    same_ground(c.ground(), rates.ground())?;
    if !is_refinement(d, c)? {
        return domain(format!("{d} does not refine {c}: transition probability is 0"));
    }
    let process = PartitioningProcess::new(rates)?;
    let empirical = process.estimate_from(c, t, n_samples, seed)?.frequency(d)?;
    let product = block_probabilities(rates, c, d, t)?;
    let std_error = (product * (1.0 - product) / n_samples as f64).max(0.0).sqrt();
    let diff = empirical - product;
    let z_score = if std_error > 0.0 {
        diff / std_error
    } else if diff.abs() <= 1e-12 {
        0.0
    } else {
        f64::INFINITY.copysign(diff)
    };
    Ok(ProductCheck {
        empirical,
        product,
        std_error,
        z_score,
        samples: n_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closed_form::{build_closed_form, DecayRates};

    fn g(n: usize) -> GroundSet {
        GroundSet::range(n).unwrap()
    }

    fn p(s: &str) -> Partition {
        s.parse().unwrap()
    }

    fn random_rates(n: usize, seed: u64) -> RateSystem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lat = Lattice::of(g(n));
        let rates = (0..lat.size()).map(|_| rng.random_range(0.05..1.0)).collect();
        RateSystem::from_vec(lat, rates).unwrap()
    }

    #[test]
    fn exit_rate_examples() {
        let rates = random_rates(4, 1);
        let zero = Partition::zero(g(4));
        let one = Partition::one(g(4));
        assert_eq!(exit_rate(&rates, &zero).unwrap(), 0.0);
        let expected = rates.total() - rates.rate(&one).unwrap();
        assert!((exit_rate(&rates, &one).unwrap() - expected).abs() < 1e-12);
        let decay = DecayRates::new(&rates);
        let process = PartitioningProcess::new(&rates).unwrap();
        for c in rates.lattice().elements() {
            let psi = decay.psi(c).unwrap();
            assert!((exit_rate(&rates, c).unwrap() - psi).abs() < 1e-12);
            assert!((process.exit_rate(c).unwrap() - psi).abs() < 1e-12);
        }
        assert!(exit_rate(&rates, &Partition::one(g(3))).is_err());
    }

    #[test]
    fn step_refines_strictly() {
        let rates = random_rates(5, 2);
        let process = PartitioningProcess::new(&rates).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mut state = ProcessState::start(g(5));
            while !state.current.is_zero() {
                let next = process.step(&state, &mut rng).unwrap();
                assert!(is_refinement(&next.current, &state.current).unwrap());
                assert_ne!(next.current, state.current);
                assert!(next.time > state.time);
                state = next;
            }
            assert!(process.step(&state, &mut rng).is_err());
        }
    }

    #[test]
    fn two_sites_go_to_bottom() {
        let rates = RateSystem::new(g(2), [(Partition::zero(g(2)), 1.0)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = step(&rates, &ProcessState::start(g(2)), &mut rng).unwrap();
        assert!(s.current.is_zero());
    }

    #[test]
    fn reproducible_with_seed() {
        let rates = random_rates(4, 5);
        let a = estimate_distribution(&rates, 1.0, 10_000, 9).unwrap();
        let b = estimate_distribution(&rates, 1.0, 10_000, 9).unwrap();
        assert_eq!(a, b);
        let c = estimate_distribution(&rates, 1.0, 10_000, 10).unwrap();
        assert_ne!(a, c);
        let mut r1 = ChaCha8Rng::seed_from_u64(6);
        let mut r2 = ChaCha8Rng::seed_from_u64(6);
        let s = ProcessState::start(g(4));
        assert_eq!(step(&rates, &s, &mut r1).unwrap(), step(&rates, &s, &mut r2).unwrap());
    }

    #[test]
    fn trivial_paths() {
        let rates = random_rates(3, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert!(simulate_path(&rates, 0.0, &mut rng).unwrap().is_one());
        let zero = RateSystem::zero(g(3));
        assert!(simulate_path(&zero, 50.0, &mut rng).unwrap().is_one());
        let d = estimate_distribution(&rates, 200.0, 1000, 1).unwrap();
        assert_eq!(d.count(&Partition::zero(g(3))).unwrap(), 1000);
        let one = estimate_distribution(&rates, 1.0, 1, 1).unwrap();
        assert_eq!(one.total(), 1);
        assert!((one.frequencies().sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn matches_closed_form_three_sites() {
        let rates = random_rates(3, 11);
        let sol = build_closed_form(&rates, DEGENERACY_TOLERANCE).unwrap();
        let est = estimate_distribution(&rates, 1.0, 100_000, 12).unwrap();
        let tv = est.tv_distance(&sol.evaluate(g(3), 1.0).unwrap()).unwrap();
        assert!(tv <= 0.01, "tv {tv}");
    }

    #[test]
    fn two_state_chain() {
        let rates = RateSystem::new(g(2), [(Partition::zero(g(2)), 1.0)]).unwrap();
        let n = 100_000;
        let est = estimate_distribution(&rates, 1.0, n, 13).unwrap();
        let p = (-1.0f64).exp();
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let f = est.frequency(&Partition::one(g(2))).unwrap();
        assert!((f - p).abs() <= 3.0 * sigma);
    }

    #[test]
    fn product_check() {
        let rates = random_rates(3, 14);
        let c = p("1,2|3");
        let check = transition_probability_product_check(&rates, &c, &p("1|2|3"), 0.8, 50_000, 15).unwrap();
        assert!(check.z_score.abs() <= 3.0, "{check:?}");
        let same = transition_probability_product_check(&rates, &c, &c, 0.8, 50_000, 16).unwrap();
        let psi = DecayRates::new(&rates).psi(&c).unwrap();
        assert!((same.product - (-psi * 0.8).exp()).abs() < 1e-12);
        assert!(same.z_score.abs() <= 3.0);
        assert!(transition_probability_product_check(&rates, &c, &p("1,3|2"), 0.8, 10, 1).is_err());
    }

    #[test]
    fn backward_equation_at_small_time() {
        let rates = random_rates(3, 17);
        let h = 0.01;
        let n = 200_000;
        let est = estimate_distribution(&rates, h, n, 18).unwrap();
        let lat = rates.lattice();
        for (i, a) in lat.elements().iter().enumerate() {
            let slope = rates.rates()[i] - if a.is_one() { rates.total() } else { 0.0 };
            let f = est.frequency(a).unwrap() - if a.is_one() { 1.0 } else { 0.0 };
            let q = est.frequency(a).unwrap().max(1e-6);
            let sigma = (q * (1.0 - q) / n as f64).sqrt();
            // O(h²) discretization error plus Monte Carlo noise
            let tol = 3.0 * sigma + h * h * rates.total().powi(2);
            assert!((f - slope * h).abs() <= tol, "{a}: {f} vs {}", slope * h);
        }
    }

    #[test]
    fn csv_round_trip() {
        let rates = random_rates(3, 19);
        let est = estimate_distribution(&rates, 0.7, 5000, 20).unwrap();
        let mut buf = Vec::new();
        est.write_csv(&mut buf).unwrap();
        let back = EmpiricalDistribution::read_csv(buf.as_slice(), g(3)).unwrap();
        assert_eq!(back, est);
    }
}

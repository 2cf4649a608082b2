//! The subcommands.

use std::path::Path;

use log::info;
use recomb_core::closed_form::{build_closed_form, linear_solution};
use recomb_core::coefficient_dynamics::{integrate_coefficients, integrate_measure};
use recomb_core::measures::{distance, mixture};
use recomb_core::partition_lattice::{bell_number, count_two_block};
use recomb_core::partitioning_process::{estimate_distribution, EmpiricalDistribution, CHUNK_SIZE, GENERATOR};
use recomb_core::{ClosedFormSolution, CoefficientVector, Error, GroundSet, Lattice, Partition};
use serde_json::{json, Map, Value};

use crate::output::{ensure_dir, write_json, Table};
use crate::scenario::{Scenario, MAX_SITES};
use crate::{CliError, Format};

/// Agreement required to call the closed form linear.
const LINEAR_TOLERANCE: f64 = 1e-10;

fn keys(ground: GroundSet) -> Vec<String> {
    Lattice::of(ground).elements().iter().map(|p| p.to_string()).collect()
}

pub fn lattice(n: usize, enumerate: bool, format: Format) -> Result<(), CliError> {
    if n == 0 || n > MAX_SITES {
        return Err(CliError::Config(format!("n = {n} must lie in 1..={MAX_SITES}")));
    }
    let bell = bell_number(n);
    let two = count_two_block(n);
    let entries: Vec<(String, usize, i64)> = if enumerate {
        let lat = Lattice::of(GroundSet::range(n)?);
        let mut mu = vec![0i64; lat.size()];
        for &(b, m) in lat.mobius_row(lat.zero_index()) {
            mu[b as usize] = m;
        }
        lat.elements()
            .iter()
            .zip(mu)
            .map(|(p, m)| (p.to_string(), p.block_count(), m))
            .collect()
    } else {
        Vec::new()
    };
    match format {
        Format::Json => {
            let mut doc = json!({ "n": n, "bell": bell as u64, "two_block": two as u64 });
            if enumerate {
                doc["partitions"] = entries
                    .iter()
                    .map(|(k, b, m)| json!({ "key": k, "blocks": b, "mobius_from_bottom": m }))
                    .collect();
            }
            println!("{}", serde_json::to_string_pretty(&doc)?);
        }
        Format::Csv => {
            if enumerate {
                println!("# n={n} bell={bell} two_block={two}");
                let mut w = csv::Writer::from_writer(std::io::stdout());
                w.write_record(["key", "blocks", "mobius_from_bottom"])?;
                for (k, b, m) in &entries {
                    w.write_record([k.clone(), b.to_string(), m.to_string()])?;
                }
                w.flush()?;
            } else {
                println!("n,bell,two_block");
                println!("{n},{bell},{two}");
            }
        }
    }
    Ok(())
}

/// Builds the closed form; on degeneracy writes `degeneracy.json` first.
fn closed_form_or_report(s: &Scenario, out: &Path) -> Result<ClosedFormSolution, CliError> {
    match build_closed_form(&s.rates, s.degeneracy_tol) {
        Ok(sol) => Ok(sol),
        Err(Error::Degenerate(report)) => {
            write_json(&out.join("degeneracy.json"), &report.to_json())?;
            Err(CliError::Degenerate(report))
        }
        Err(e) => Err(e.into()),
    }
}

fn coefficient_table(ground: GroundSet) -> Table {
    let mut cols = vec!["t".to_string()];
    cols.extend(keys(ground));
    Table::new(cols)
}

pub fn solve(s: &Scenario, out: &Path, format: Format) -> Result<(), CliError> {
    ensure_dir(out)?;
    let sol = closed_form_or_report(s, out)?;
    let mut table = coefficient_table(s.ground);
    for &t in &s.grid {
        let a = sol.evaluate(s.ground, t)?;
        let mut row = vec![t];
        row.extend_from_slice(a.values());
        table.rows.push(row);
    }
    let path = table.write(out, "solution_trajectory", format)?;
    let mut doc = sol.to_json();
    doc["grid"] = json!(s.grid);
    write_json(&out.join("solution.json"), &doc)?;
    info!("wrote {} and solution.json", path.display());
    println!("solve: {} grid points written to {}", s.grid.len(), path.display());
    Ok(())
}

fn coordinate_key(coords: &[usize]) -> String {
    coords.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(":")
}

pub fn integrate(s: &Scenario, out: &Path, format: Format) -> Result<(), CliError> {
    ensure_dir(out)?;
    let a0 = CoefficientVector::delta(&Partition::one(s.ground));
    let traj = integrate_coefficients(&s.rates, &a0, &s.grid, s.step)?;
    let mut table = coefficient_table(s.ground);
    table.columns.push("drift".into());
    for ((t, a), d) in traj.times.iter().zip(&traj.states).zip(&traj.drift) {
        let mut row = vec![*t];
        row.extend_from_slice(a.values());
        row.push(*d);
        table.rows.push(row);
    }
    let path = table.write(out, "coefficients", format)?;
    let mut meta = json!({
        "step": traj.step,
        "max_drift": traj.max_drift(),
        "grid": s.grid,
    });

    if let Some(omega0) = &s.initial_measure {
        let mtraj = integrate_measure(&s.rates, omega0, &s.grid, s.step)?;
        let space = omega0.space();
        let mut cols = vec!["t".to_string()];
        cols.extend((0..space.state_count()).map(|i| coordinate_key(&space.coords(i))));
        cols.push("drift".into());
        cols.push("mixture_deviation".into());
        let mut mtable = Table::new(cols);
        let mut worst = 0.0f64;
        for (k, w) in mtraj.states.iter().enumerate() {
            let mix = mixture(&traj.states[k], omega0)?;
            let dev = distance(w, &mix)?;
            worst = worst.max(dev);
            let mut row = vec![mtraj.times[k]];
            row.extend_from_slice(w.weights());
            row.push(mtraj.drift[k]);
            row.push(dev);
            mtable.rows.push(row);
        }
        mtable.write(out, "measure_trajectory", format)?;
        meta["measure_max_drift"] = json!(mtraj.max_drift());
        meta["max_mixture_deviation"] = json!(worst);
    }
    write_json(&out.join("integration.json"), &meta)?;
    println!(
        "integrate: {} grid points, step {}, max drift {:e}, written to {}",
        s.grid.len(),
        traj.step,
        traj.max_drift(),
        path.display()
    );
    Ok(())
}

fn empirical_rows(est: &EmpiricalDistribution) -> Vec<Value> {
    let n = est.total().max(1) as f64;
    est.counts()
        .map(|(p, c)| json!({ "key": p.to_string(), "count": c, "frequency": c as f64 / n }))
        .collect()
}

pub fn simulate(s: &Scenario, out: &Path, format: Format) -> Result<(), CliError> {
    let Some(mc) = &s.monte_carlo else {
        return Err(CliError::Config("simulate needs a monte_carlo block or --samples".into()));
    };
    ensure_dir(out)?;
    let t = mc.time.unwrap_or(*s.grid.last().expect("grid is nonempty"));
    let est = estimate_distribution(&s.rates, t, mc.samples, mc.seed)?;
    let meta = json!({
        "seed": mc.seed,
        "samples": mc.samples,
        "t": t,
        "generator": GENERATOR,
        "chunk_size": CHUNK_SIZE,
        "sites": s.ground.elements().collect::<Vec<_>>(),
    });
    let path = match format {
        Format::Csv => {
            let path = out.join("empirical.csv");
            est.write_csv(std::fs::File::create(&path)?)?;
            write_json(&out.join("empirical_metadata.json"), &meta)?;
            path
        }
        Format::Json => {
            let path = out.join("empirical.json");
            let mut doc = meta;
            doc["rows"] = Value::Array(empirical_rows(&est));
            write_json(&path, &doc)?;
            path
        }
    };
    println!("simulate: {} samples at t = {t} written to {}", mc.samples, path.display());
    Ok(())
}

pub fn compare(s: &Scenario, out: &Path) -> Result<(), CliError> {
    ensure_dir(out)?;
    let (closed, report) = match build_closed_form(&s.rates, s.degeneracy_tol) {
        Ok(sol) => {
            let report = sol.report().to_json();
            (Some(sol), report)
        }
        Err(Error::Degenerate(r)) => {
            log::warn!("closed form unavailable, comparing integration and simulation only");
            (None, r.to_json())
        }
        Err(e) => return Err(e.into()),
    };
    let a0 = CoefficientVector::delta(&Partition::one(s.ground));
    let traj = integrate_coefficients(&s.rates, &a0, &s.grid, s.step)?;
    let mc_tol = s.monte_carlo.as_ref().map(|mc| s.monte_carlo_tv(mc.samples));

    let mut pass = true;
    let mut worst_closed = 0.0f64;
    let mut worst_tv = 0.0f64;
    let mut worst_linear = 0.0f64;
    let mut points = Vec::new();
    for (k, (&t, integrated)) in s.grid.iter().zip(&traj.states).enumerate() {
        let closed_t = closed.as_ref().map(|sol| sol.evaluate(s.ground, t)).transpose()?;
        let est = match &s.monte_carlo {
            Some(mc) => Some(estimate_distribution(&s.rates, t, mc.samples, mc.seed.wrapping_add(k as u64))?),
            None => None,
        };
        let mut point = Map::new();
        point.insert("t".into(), json!(t));
        if let Some(c) = &closed_t {
            let dev = c.max_abs_diff(integrated)?;
            worst_closed = worst_closed.max(dev);
            pass &= dev <= s.closed_vs_integrated;
            point.insert("closed_vs_integrated".into(), json!(dev));
            let lin = linear_solution(&s.rates, s.ground, t)?;
            worst_linear = worst_linear.max(c.max_abs_diff(&lin)?);
        }
        if let Some(e) = &est {
            let reference = closed_t.as_ref().unwrap_or(integrated);
            let tv = e.tv_distance(reference)?;
            worst_tv = worst_tv.max(tv);
            pass &= tv <= mc_tol.expect("set with the block");
            point.insert("monte_carlo_tv".into(), json!(tv));
        }
        let mut values = Map::new();
        for (i, p) in integrated.lattice().elements().iter().enumerate() {
            let mut v = Map::new();
            if let Some(c) = &closed_t {
                v.insert("closed".into(), json!(c.values()[i]));
            }
            v.insert("integrated".into(), json!(integrated.values()[i]));
            if let Some(e) = &est {
                v.insert("monte_carlo".into(), json!(e.frequency(p)?));
            }
            values.insert(p.to_string(), Value::Object(v));
        }
        point.insert("values".into(), Value::Object(values));
        points.push(Value::Object(point));
    }

    let linear_candidate = s.ground.cardinality() <= 3 || s.rates.is_single_crossover();
    let linear_regime = closed.is_some() && linear_candidate && worst_linear <= LINEAR_TOLERANCE;
    let doc = json!({
        "sites": s.ground.elements().collect::<Vec<_>>(),
        "grid": s.grid,
        "step": traj.step,
        "max_drift": traj.max_drift(),
        "fallback": if closed.is_some() { Value::Null } else { json!("numerical") },
        "degeneracy": report,
        "linear_regime": linear_regime,
        "max_closed_vs_linear": closed.as_ref().map(|_| worst_linear),
        "tolerances": {
            "closed_vs_integrated": s.closed_vs_integrated,
            "monte_carlo_tv": mc_tol,
        },
        "max_closed_vs_integrated": closed.as_ref().map(|_| worst_closed),
        "max_monte_carlo_tv": s.monte_carlo.as_ref().map(|_| worst_tv),
        "monte_carlo": s.monte_carlo.as_ref().map(|mc| json!({
            "samples": mc.samples,
            "seed": mc.seed,
            "generator": GENERATOR,
        })),
        "points": points,
        "pass": pass,
    });
    write_json(&out.join("comparison.json"), &doc)?;
    println!(
        "compare: {} (closed vs integrated {}, Monte Carlo TV {}){}",
        if pass { "pass" } else { "FAIL" },
        if closed.is_some() { format!("{worst_closed:e}") } else { "n/a".into() },
        if s.monte_carlo.is_some() { format!("{worst_tv}") } else { "n/a".into() },
        if closed.is_none() { ", numerical fallback" } else { "" }
    );
    if pass {
        Ok(())
    } else {
        Err(CliError::Tolerance("deviations exceed tolerances, see comparison.json".into()))
    }
}

//! Run orchestration and on-disk artifacts: chain persistence, price tables,
//! BSDE summaries, the oracle verification report, and the run manifest.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use mpq_core::bsde::{lambda_auto, solve_bsde_with, BsdeSolution, LambdaTensor};
use mpq_core::chain::{build_chain, ChainError, QuantizedChain};
use mpq_core::oracle::{derive_seed, mc_lambda_row, mc_transition_row};
use mpq_core::pricing::{price_component_payoff, price_vector_payoff, OptionSide, PayoffKind};

use crate::config::ResolvedRun;
use crate::CliError;

/// Entries below this magnitude are omitted from sparse CSV files.
const SPARSE_EPS: f64 = 1e-14;

pub struct Timings {
    entries: Vec<(String, f64)>,
    started: Instant,
}

impl Timings {
    fn new() -> Self {
        Self { entries: Vec::new(), started: Instant::now() }
    }

    fn record(&mut self, phase: &str, seconds: f64) {
        self.entries.push((phase.to_string(), seconds));
    }

    fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.record(phase, start.elapsed().as_secs_f64());
        out
    }
}

fn map_chain_err(e: ChainError) -> CliError {
    match e {
        ChainError::CapacityExceeded { .. } => CliError::Capacity(e.to_string()),
        other => CliError::Numerical(other.to_string()),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    let mut f = fs::File::create(path)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", path.display())))?;
    f.write_all(contents.as_bytes())
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn build(run: &ResolvedRun, timings: &mut Timings) -> Result<QuantizedChain, CliError> {
    timings
        .time("build_chain", || {
            build_chain(&run.model, &run.time_grid, &run.levels, &run.cubature, &run.chain_opts)
        })
        .map_err(map_chain_err)
}

fn write_grids(dir: &Path, chain: &QuantizedChain) -> Result<(), CliError> {
    let d = chain.grid(0).dim();
    for k in 0..=chain.steps() {
        let grid = chain.grid(k);
        let weights = chain.weights(k);
        let mut text = String::new();
        let mut header = String::from("flat");
        for l in 1..=d {
            write!(header, ",i{l}").unwrap();
        }
        for l in 1..=d {
            write!(header, ",x{l}").unwrap();
        }
        header.push_str(",weight\n");
        text.push_str(&header);
        for (flat, w) in weights.iter().enumerate() {
            let multi = grid.multi_index(flat);
            let point = grid.point(flat);
            write!(text, "{flat}").unwrap();
            for i in &multi {
                write!(text, ",{}", i + 1).unwrap();
            }
            for x in &point {
                write!(text, ",{x}").unwrap();
            }
            writeln!(text, ",{w}").unwrap();
        }
        write_file(&dir.join(format!("grid_{k}.csv")), &text)?;
    }
    Ok(())
}

fn write_transitions(dir: &Path, chain: &QuantizedChain) -> Result<(), CliError> {
    for k in 0..chain.steps() {
        let t = chain.transition(k);
        let mut text = String::from("row,col,value\n");
        for i in 0..t.rows() {
            for (j, v) in t.row(i).iter().enumerate() {
                if *v >= SPARSE_EPS {
                    writeln!(text, "{i},{j},{v}").unwrap();
                }
            }
        }
        write_file(&dir.join(format!("transition_{k}.csv")), &text)?;
    }
    Ok(())
}

fn write_lambda(dir: &Path, k: usize, lambda: &LambdaTensor) -> Result<(), CliError> {
    let mut text = String::from("row,col,p,value\n");
    for i in 0..lambda.rows() {
        for j in 0..lambda.cols() {
            for p in 0..lambda.brownian_dim() {
                let v = lambda.entry(i, j, p);
                if v.abs() >= SPARSE_EPS {
                    writeln!(text, "{i},{j},{},{v}", p + 1).unwrap();
                }
            }
        }
    }
    write_file(&dir.join(format!("lambda_{k}.csv")), &text)
}

fn write_component_weights(dir: &Path, chain: &QuantizedChain) -> Result<(), CliError> {
    let d = chain.grid(0).dim();
    let mut text = String::from("step,component,cell,point,weight\n");
    for k in 0..=chain.steps() {
        for l in 0..d {
            let marg = chain.grid(k).marginal(l);
            for (j, w) in chain.component_weights(k, l).iter().enumerate() {
                writeln!(text, "{k},{},{j},{},{w}", l + 1, marg.point(j)).unwrap();
            }
        }
    }
    write_file(&dir.join("component_weights.csv"), &text)
}

fn manifest(run: &ResolvedRun, command: &str, chain: Option<&QuantizedChain>, timings: &Timings) -> String {
    let mut text = String::new();
    writeln!(text, "[invocation]").unwrap();
    writeln!(text, "command = {command:?}").unwrap();
    writeln!(text, "seed = {}", run.seed).unwrap();
    writeln!(text, "threads = {}", run.threads).unwrap();
    writeln!(text).unwrap();
    text.push_str(&run.config.to_toml());
    if let Some(chain) = chain {
        writeln!(text).unwrap();
        writeln!(text, "[grid_layout]").unwrap();
        writeln!(
            text,
            "# flat = sum over components of (i_l - 1) * stride_l, last component fastest"
        )
        .unwrap();
        for k in 0..=chain.steps() {
            let strides: Vec<String> =
                chain.grid(k).strides().iter().map(|s| s.to_string()).collect();
            writeln!(text, "strides_{k} = [{}]", strides.join(", ")).unwrap();
        }
        writeln!(text).unwrap();
        writeln!(text, "[diagnostics]").unwrap();
        let worst =
            (0..chain.steps()).map(|k| chain.transition(k).max_row_defect()).fold(0.0, f64::max);
        writeln!(text, "max_row_defect = {worst:e}").unwrap();
        let kernels: Vec<String> =
            (0..chain.steps()).map(|k| format!("{:?}", chain.kernel_name(k))).collect();
        writeln!(text, "kernels = [{}]", kernels.join(", ")).unwrap();
        let residuals: Vec<String> = (0..chain.steps())
            .map(|k| {
                let worst = (0..chain.grid(k + 1).dim())
                    .map(|l| chain.grid(k + 1).marginal(l).residual())
                    .fold(0.0, f64::max);
                format!("{worst:.3e}")
            })
            .collect();
        writeln!(text, "stationarity_residuals = [{}]", residuals.join(", ")).unwrap();
    }
    writeln!(text).unwrap();
    writeln!(text, "[timings]").unwrap();
    for (phase, secs) in &timings.entries {
        writeln!(text, "{phase}_s = {secs}").unwrap();
    }
    writeln!(text, "total_s = {}", timings.started.elapsed().as_secs_f64()).unwrap();
    text
}

pub fn run_build_chain(run: &ResolvedRun) -> Result<String, CliError> {
    let mut timings = Timings::new();
    let chain = build(run, &mut timings)?;
    create_dir(&run.out_dir)?;
    timings.time("persist", || -> Result<(), CliError> {
        write_grids(&run.out_dir, &chain)?;
        write_transitions(&run.out_dir, &chain)
    })?;
    write_file(&run.out_dir.join("manifest.toml"), &manifest(run, "build-chain", Some(&chain), &timings))?;
    Ok(format!(
        "chain over {} steps written to {} (terminal cells: {})",
        chain.steps(),
        run.out_dir.display(),
        chain.grid(chain.steps()).len()
    ))
}

pub fn run_export(run: &ResolvedRun) -> Result<String, CliError> {
    let mut timings = Timings::new();
    let chain = build(run, &mut timings)?;
    create_dir(&run.out_dir)?;
    timings.time("persist", || -> Result<(), CliError> {
        write_grids(&run.out_dir, &chain)?;
        write_transitions(&run.out_dir, &chain)?;
        write_component_weights(&run.out_dir, &chain)
    })?;
    timings.time("lambda", || -> Result<(), CliError> {
        for k in 0..chain.steps() {
            let lambda =
                lambda_auto(&run.model, &run.time_grid, k, chain.grid(k), chain.grid(k + 1), &lambda_rule(run)?)
                    .map_err(|e| CliError::Numerical(e.to_string()))?;
            write_lambda(&run.out_dir, k, &lambda)?;
        }
        Ok(())
    })?;
    write_file(&run.out_dir.join("manifest.toml"), &manifest(run, "export", Some(&chain), &timings))?;
    Ok(format!("chain, transitions, increment weights and marginals written to {}", run.out_dir.display()))
}

/// The conditioned-coordinate rule for increment weights is one-dimensional
/// regardless of the model's Brownian dimension.
fn lambda_rule(run: &ResolvedRun) -> Result<mpq_core::gaussian::CubatureRule, CliError> {
    if run.cubature.dimension() == 1 {
        Ok(run.cubature.clone())
    } else {
        mpq_core::gaussian::CubatureRule::gauss_hermite(1, 32)
            .map_err(|e| CliError::Config(e.to_string()))
    }
}

pub fn run_price(run: &ResolvedRun) -> Result<String, CliError> {
    let plan = run
        .payoff
        .as_ref()
        .ok_or_else(|| CliError::Config("the price command needs a [payoff] section".into()))?;
    let mut timings = Timings::new();
    let chain = build(run, &mut timings)?;
    let maturity = run.time_grid.horizon();

    let mut csv = String::from("strike,side,price,benchmark,rel_error\n");
    let mut table = format!(
        "{:>8}  {:>4}  {:>12}  {:>12}  {:>10}\n",
        "strike", "side", "price", "benchmark", "rel_error"
    );
    timings.time("pricing", || -> Result<(), CliError> {
        for (idx, &strike) in plan.strikes.iter().enumerate() {
            for side in &plan.sides {
                let payoff = plan.payoff(*side, strike, maturity);
                let price = match &plan.kind {
                    PayoffKind::Vector { .. } => price_vector_payoff(&chain, &payoff),
                    PayoffKind::Component { index } => {
                        price_component_payoff(&chain, &payoff, *index)
                    }
                }
                .map_err(|e| CliError::Numerical(e.to_string()))?;
                let side_name = match side {
                    OptionSide::Call => "call",
                    OptionSide::Put => "put",
                };
                let benchmark = plan.benchmarks.as_ref().map(|b| b[idx]);
                match benchmark {
                    Some(b) => {
                        let rel = (price - b).abs() / b.abs().max(f64::MIN_POSITIVE);
                        writeln!(csv, "{strike},{side_name},{price},{b},{rel}").unwrap();
                        writeln!(
                            table,
                            "{strike:>8}  {side_name:>4}  {price:>12.6}  {b:>12.6}  {:>9.4}%",
                            100.0 * rel
                        )
                        .unwrap();
                    }
                    None => {
                        writeln!(csv, "{strike},{side_name},{price},,").unwrap();
                        writeln!(
                            table,
                            "{strike:>8}  {side_name:>4}  {price:>12.6}  {:>12}  {:>10}",
                            "-", "-"
                        )
                        .unwrap();
                    }
                }
            }
        }
        Ok(())
    })?;

    create_dir(&run.out_dir)?;
    write_file(&run.out_dir.join("prices.csv"), &csv)?;
    write_file(&run.out_dir.join("manifest.toml"), &manifest(run, "price", Some(&chain), &timings))?;
    Ok(table)
}

fn write_surfaces(dir: &Path, chain: &QuantizedChain, sol: &BsdeSolution) -> Result<(), CliError> {
    let q = sol.brownian_dim();
    let mut text = String::from("step,cell,value\n");
    for k in 0..=chain.steps() {
        for (i, v) in sol.value_surface(k).iter().enumerate() {
            writeln!(text, "{k},{i},{v}").unwrap();
        }
    }
    write_file(&dir.join("bsde_values.csv"), &text)?;
    let mut text = String::from("step,cell,p,value\n");
    for k in 0..chain.steps() {
        let surface = sol.control_surface(k);
        for i in 0..chain.grid(k).len() {
            for p in 0..q {
                writeln!(text, "{k},{i},{},{}", p + 1, surface[i * q + p]).unwrap();
            }
        }
    }
    write_file(&dir.join("bsde_controls.csv"), &text)
}

pub fn run_bsde(run: &ResolvedRun) -> Result<String, CliError> {
    let plan = run
        .bsde
        .as_ref()
        .ok_or_else(|| CliError::Config("the bsde command needs a [bsde] section".into()))?;
    let mut timings = Timings::new();
    let chain = build(run, &mut timings)?;
    let rule = lambda_rule(run)?;
    let sol = timings
        .time("backward_sweep", || {
            solve_bsde_with(&chain, &plan.problem, |k| {
                lambda_auto(&run.model, &run.time_grid, k, chain.grid(k), chain.grid(k + 1), &rule)
            })
        })
        .map_err(|e| CliError::Numerical(e.to_string()))?;

    create_dir(&run.out_dir)?;
    let mut csv = String::from("quantity,component,value\n");
    writeln!(csv, "y0,,{}", sol.y0()).unwrap();
    for (p, z) in sol.z0().iter().enumerate() {
        writeln!(csv, "z0,{},{z}", p + 1).unwrap();
    }
    write_file(&run.out_dir.join("bsde.csv"), &csv)?;
    if plan.write_surfaces {
        write_surfaces(&run.out_dir, &chain, &sol)?;
    }
    write_file(&run.out_dir.join("manifest.toml"), &manifest(run, "bsde", Some(&chain), &timings))?;

    let z = sol.z0().iter().map(|z| format!("{z:.6}")).collect::<Vec<_>>().join(", ");
    Ok(format!("y0 = {:.6}\nz0 = ({z})", sol.y0()))
}

pub fn run_verify(run: &ResolvedRun) -> Result<String, CliError> {
    let mut timings = Timings::new();
    let chain = build(run, &mut timings)?;
    let samples = run.config.verify.samples;
    let k = run.config.verify.step.min(chain.steps().saturating_sub(1));
    let rows = chain.grid(k).len().min(run.config.verify.max_rows);
    let m = samples as f64;
    let floor = 3.0 / m;

    let lambda = lambda_auto(&run.model, &run.time_grid, k, chain.grid(k), chain.grid(k + 1), &lambda_rule(run)?)
        .map_err(|e| CliError::Numerical(e.to_string()))?;

    let mut report = String::new();
    let mut all_ok = true;
    timings.time("oracle", || -> Result<(), CliError> {
        for i in 0..rows {
            let x = chain.grid(k).point(i);
            let row_seed = derive_seed(run.seed, k as u64, i as u64);
            let mc_t = mc_transition_row(&run.model, &run.time_grid, k, &x, chain.grid(k + 1), samples, row_seed)
                .map_err(|e| CliError::Numerical(e.to_string()))?;
            let mut worst = 0.0f64;
            let mut ok = true;
            for (j, est) in mc_t.iter().enumerate() {
                let model_p = chain.transition(k).entry(i, j);
                let null_se = (model_p.clamp(0.0, 1.0) * (1.0 - model_p.clamp(0.0, 1.0)) / m).sqrt();
                let se = est.std_error.max(null_se).max(1e-300);
                let z = ((model_p - est.value).abs() - floor).max(0.0) / se;
                worst = worst.max(z);
                ok &= z <= 3.0;
            }
            writeln!(
                report,
                "{} transition row {i:>4}: worst deviation {worst:.2} SE over {} cells",
                if ok { "PASS" } else { "FAIL" },
                mc_t.len()
            )
            .unwrap();
            all_ok &= ok;

            let mc_l = mc_lambda_row(&run.model, &run.time_grid, k, &x, chain.grid(k + 1), samples, row_seed ^ 0xabcd)
                .map_err(|e| CliError::Numerical(e.to_string()))?;
            let mut worst = 0.0f64;
            let mut ok = true;
            for (p, row) in mc_l.iter().enumerate() {
                for (j, est) in row.iter().enumerate() {
                    let v = lambda.entry(i, j, p);
                    let cell_p = chain.transition(k).entry(i, j).max(1.0 / m);
                    let cs_se = (v * v * (1.0 - cell_p) / (cell_p * m)).sqrt();
                    let se = est.std_error.max(cs_se).max(1e-300);
                    let z = ((v - est.value).abs() - floor).max(0.0) / se;
                    worst = worst.max(z);
                    ok &= z <= 3.0;
                }
            }
            writeln!(
                report,
                "{} increment row  {i:>4}: worst deviation {worst:.2} SE over {} cells x {} coords",
                if ok { "PASS" } else { "FAIL" },
                lambda.cols(),
                lambda.brownian_dim()
            )
            .unwrap();
            all_ok &= ok;
        }
        Ok(())
    })?;

    writeln!(
        report,
        "{} step {k}: {rows} source rows checked against {samples} samples each",
        if all_ok { "PASS" } else { "FAIL" }
    )
    .unwrap();

    create_dir(&run.out_dir)?;
    write_file(&run.out_dir.join("verify.txt"), &report)?;
    write_file(&run.out_dir.join("manifest.toml"), &manifest(run, "verify", Some(&chain), &timings))?;
    if all_ok {
        Ok(report)
    } else {
        Err(CliError::Verification(report))
    }
}

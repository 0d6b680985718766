use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use gridgate_core::finding::Finding;
use gridgate_core::grid::{export_dgs, Grid};
use gridgate_core::hosting::{
    linearize_daylight, refine, sweep_lambda, sweep_lambda_refined, verify_nonlinear, write_alpha_csv,
    write_pareto_csv, HostingConfig, HostingError, HostingProblem, HostingSolution, DEFAULT_LAMBDAS,
    MAX_REFINE_PASSES,
};
use gridgate_core::lfcheck::{
    build_network, nominal_injections, run_advanced_validation, AdvancedConfig, DEFAULT_S_BASE_KVA,
};
use gridgate_core::powerflow::{multi_period_loadflow, write_current_csv, write_voltage_csv, SolverOptions};
use gridgate_core::profiles::{builtin_load_curve, builtin_pv_curve, load_curve, NormalizedCurve};
use gridgate_core::rules::{run_basic_validation, RuleConfig};

const EXIT_FINDINGS: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_SOLVER: u8 = 3;

#[derive(Parser)]
#[command(name = "gridgate", version, about = "Grid data validation and fair PV hosting capacity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rule checks, then load-flow checks under nominal demand.
    Validate(CommonArgs),
    /// Multi-period load flow under nominal demand.
    Loadflow {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        allow_nonconverged: bool,
    },
    /// Hosting capacity for one fairness weight.
    Host {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        hosting: HostingArgs,
        /// Write per-step sensitivity coefficients to sensitivities.csv.
        #[arg(long)]
        dump_sensitivities: bool,
    },
    /// Hosting capacity over a list of fairness weights.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        hosting: HostingArgs,
    },
    /// Writes the grid in DGS form.
    ExportDgs(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    #[arg(long)]
    grid: PathBuf,
    /// CSV with a `value` column, or `builtin`.
    #[arg(long, default_value = "builtin")]
    load_curve: String,
    /// CSV with a `value` column, or `builtin`.
    #[arg(long, default_value = "builtin")]
    pv_curve: String,
    #[arg(long, default_value_t = 10.0)]
    dt_minutes: f64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Cable length to Manhattan distance ratio that triggers a finding.
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct HostingArgs {
    /// Fairness weight(s) in CHF/pu², comma separated.
    #[arg(long, value_delimiter = ',')]
    lambda: Vec<f64>,
    /// Number of linearization passes (1 = single linear model).
    #[arg(long, default_value_t = 1)]
    refine_linearization: usize,
}

/// Error carrying the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

trait ExitContext<T> {
    fn input(self) -> Result<T, Failure>;
    fn solver(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> ExitContext<T> for Result<T, E> {
    fn input(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code: EXIT_INPUT,
            error: e.into(),
        })
    }

    fn solver(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code: EXIT_SOLVER,
            error: e.into(),
        })
    }
}

fn hosting_failure(e: HostingError) -> Failure {
    let code = match e {
        HostingError::Infeasible { .. } | HostingError::SolverStall { .. } => EXIT_SOLVER,
        _ => EXIT_INPUT,
    };
    Failure {
        code,
        error: e.into(),
    }
}

struct Inputs {
    grid: Grid,
    load: NormalizedCurve,
    pv: NormalizedCurve,
}

impl CommonArgs {
    fn dt_hours(&self) -> Result<f64, Failure> {
        if !(self.dt_minutes > 0.0 && self.dt_minutes.is_finite()) {
            return Err(anyhow!("--dt-minutes must be positive")).input();
        }
        Ok(self.dt_minutes / 60.0)
    }

    fn curve(&self, source: &str, builtin: fn(f64) -> Result<NormalizedCurve, gridgate_core::profiles::ProfileError>) -> Result<NormalizedCurve, Failure> {
        let dt = self.dt_hours()?;
        if source == "builtin" {
            builtin(dt).input()
        } else {
            load_curve(source, dt).with_context(|| format!("reading curve {source}")).input()
        }
    }

    fn inputs(&self) -> Result<Inputs, Failure> {
        let grid = Grid::from_path(&self.grid)
            .with_context(|| format!("reading grid {}", self.grid.display()))
            .input()?;
        Ok(Inputs {
            grid,
            load: self.curve(&self.load_curve, builtin_load_curve)?,
            pv: self.curve(&self.pv_curve, builtin_pv_curve)?,
        })
    }

    fn rule_config(&self, grid: &Grid) -> Result<RuleConfig, Failure> {
        let mut cfg = RuleConfig::for_grid(grid);
        if let Some(k) = self.kappa {
            cfg.length_ratio = k;
        }
        cfg.check().input()?;
        Ok(cfg)
    }

    fn out_file(&self, name: &str) -> Result<BufWriter<File>, Failure> {
        fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))
            .input()?;
        let path = self.out.join(name);
        File::create(&path)
            .map(BufWriter::new)
            .with_context(|| format!("writing {}", path.display()))
            .input()
    }
}

#[derive(Serialize)]
struct ReportEntry<'a> {
    phase: &'static str,
    #[serde(flatten)]
    finding: &'a Finding,
}

#[derive(Serialize)]
struct FindingsReport<'a> {
    grid: String,
    errors: usize,
    warnings: usize,
    findings: Vec<ReportEntry<'a>>,
}

fn cmd_validate(args: &CommonArgs) -> Result<u8, Failure> {
    let Inputs { grid, load, .. } = args.inputs()?;
    let rules = args.rule_config(&grid)?;
    let basic = run_basic_validation(&grid, &rules);
    let blocked = basic.iter().any(Finding::is_error);
    let advanced = if blocked {
        info!("basic validation found errors; load-flow checks skipped");
        Vec::new()
    } else {
        let mut cfg = AdvancedConfig::new(load);
        cfg.rules = Some(rules);
        cfg.verbose = args.verbose;
        run_advanced_validation(&grid, &cfg).input()?
    };
    let entries: Vec<ReportEntry> = basic
        .iter()
        .map(|f| ReportEntry { phase: "basic", finding: f })
        .chain(advanced.iter().map(|f| ReportEntry {
            phase: "advanced",
            finding: f,
        }))
        .collect();
    let errors = entries.iter().filter(|e| e.finding.is_error()).count();
    let report = FindingsReport {
        grid: args.grid.display().to_string(),
        errors,
        warnings: entries.len() - errors,
        findings: entries,
    };
    serde_json::to_writer_pretty(args.out_file("findings.json")?, &report).input()?;
    for e in &report.findings {
        println!("[{}] {:?} {} {}: {}", e.phase, e.finding.severity, e.finding.rule_id, e.finding.entity.id, e.finding.message);
    }
    println!("{} error(s), {} warning(s)", report.errors, report.warnings);
    Ok(if errors > 0 { EXIT_FINDINGS } else { 0 })
}

/// Refuses grids with error-severity rule findings.
fn require_valid(args: &CommonArgs, grid: &Grid) -> Result<(), Failure> {
    let basic = run_basic_validation(grid, &args.rule_config(grid)?);
    let errors: Vec<&Finding> = basic.iter().filter(|f| f.is_error()).collect();
    if let Some(first) = errors.first() {
        return Err(Failure {
            code: EXIT_FINDINGS,
            error: anyhow!(
                "grid has {} basic validation error(s), first: {} on {}; run `validate`",
                errors.len(),
                first.rule_id,
                first.entity.id
            ),
        });
    }
    Ok(())
}

#[derive(Serialize)]
struct LoadflowSummary {
    steps: usize,
    converged_steps: usize,
    min_vmag_pu: f64,
    min_vmag_node: String,
    max_vmag_pu: f64,
    max_vmag_node: String,
    max_loading_pct: f64,
    max_loading_branch: String,
    peak_slack_kva: f64,
}

fn cmd_loadflow(args: &CommonArgs, allow_nonconverged: bool) -> Result<u8, Failure> {
    let Inputs { grid, load, .. } = args.inputs()?;
    require_valid(args, &grid)?;
    let net = build_network(&grid, DEFAULT_S_BASE_KVA).input()?;
    let result = multi_period_loadflow(&net, &nominal_injections(&grid, &load), &SolverOptions::default()).input()?;
    let converged = result.steps.iter().filter(|s| s.converged).count();
    if converged < result.steps.len() && !allow_nonconverged {
        let first = result.steps.iter().position(|s| !s.converged).unwrap_or(0);
        return Err(anyhow!(
            "load flow did not converge at {} step(s), first at step {first}; pass --allow-nonconverged to keep going",
            result.steps.len() - converged
        ))
        .input();
    }
    write_voltage_csv(&net, &result, args.out_file("voltages.csv")?).input()?;
    write_current_csv(&net, &result, args.out_file("currents.csv")?).input()?;

    let mut s = LoadflowSummary {
        steps: result.steps.len(),
        converged_steps: converged,
        min_vmag_pu: f64::INFINITY,
        min_vmag_node: String::new(),
        max_vmag_pu: f64::NEG_INFINITY,
        max_vmag_node: String::new(),
        max_loading_pct: 0.0,
        max_loading_branch: String::new(),
        peak_slack_kva: 0.0,
    };
    for step in result.steps.iter().filter(|s| s.converged) {
        for (node, v) in net.grid.nodes.iter().zip(&step.voltages) {
            let vm = v.norm();
            if vm < s.min_vmag_pu {
                s.min_vmag_pu = vm;
                s.min_vmag_node = node.id.clone();
            }
            if vm > s.max_vmag_pu {
                s.max_vmag_pu = vm;
                s.max_vmag_node = node.id.clone();
            }
        }
        for (br, i) in net.grid.branches.iter().zip(&step.currents) {
            if let Some(a) = br.ampacity {
                let pct = 100.0 * i.norm() / a;
                if pct > s.max_loading_pct {
                    s.max_loading_pct = pct;
                    s.max_loading_branch = br.id.clone();
                }
            }
        }
        s.peak_slack_kva = s.peak_slack_kva.max(step.slack_power.norm() * net.grid.s_base_kva);
    }
    serde_json::to_writer_pretty(args.out_file("loadflow_summary.json")?, &s).input()?;
    println!("steps: {} ({} converged)", s.steps, s.converged_steps);
    println!("min |V|: {:.4} pu at {}", s.min_vmag_pu, s.min_vmag_node);
    println!("max |V|: {:.4} pu at {}", s.max_vmag_pu, s.max_vmag_node);
    println!("max loading: {:.1} % on {}", s.max_loading_pct, s.max_loading_branch);
    println!("peak slack power: {:.1} kVA", s.peak_slack_kva);
    Ok(0)
}

fn hosting_setup(args: &CommonArgs) -> Result<(Inputs, HostingConfig), Failure> {
    let inputs = args.inputs()?;
    require_valid(args, &inputs.grid)?;
    Ok((inputs, HostingConfig::default()))
}

fn passes(h: &HostingArgs) -> Result<usize, Failure> {
    if h.refine_linearization == 0 || h.refine_linearization > MAX_REFINE_PASSES {
        return Err(anyhow!("--refine-linearization must be between 1 and {MAX_REFINE_PASSES}")).input();
    }
    Ok(h.refine_linearization)
}

fn print_solution(sol: &HostingSolution) {
    println!("lambda: {}", sol.lambda);
    println!("total capacity: {:.6} kWp", sol.total_kwp);
    println!("investment J_C: {:.2} CHF", sol.j_c);
    println!("electricity bill J_O: {:.2} CHF", sol.j_o);
    println!("unfairness M_U: {:.6e} pu^2 (weighted {:.2} CHF)", sol.m_u, sol.lambda * sol.m_u);
    println!("objective: {:.2} CHF (solver {:.2} CHF)", sol.exact_objective(), sol.objective);
    println!("KKT residual: {:.3e}, linearization passes: {}", sol.kkt_residual, sol.passes);
}

fn cmd_host(args: &CommonArgs, h: &HostingArgs, dump: bool) -> Result<u8, Failure> {
    let lambda = match h.lambda.as_slice() {
        [] => 0.0,
        [l] => *l,
        _ => return Err(anyhow!("`host` takes a single --lambda; use `sweep` for lists")).input(),
    };
    let passes = passes(h)?;
    let (Inputs { grid, load, pv }, cfg) = hosting_setup(args)?;
    let net = build_network(&grid, DEFAULT_S_BASE_KVA).input()?;
    if dump {
        dump_sensitivities(args, &grid, &net, &load, &pv, &cfg)?;
    }
    let problem = HostingProblem::build(&grid, &net, &load, &pv, &cfg, lambda).map_err(hosting_failure)?;
    let sol = refine(&problem, &grid, &net, &load, &pv, &cfg, passes).map_err(hosting_failure)?;
    write_alpha_csv(&sol, args.out_file("alpha.csv")?).input()?;
    print_solution(&sol);
    let full = problem.expand(&sol.alpha_kw, grid.nodes.len());
    let check = verify_nonlinear(&grid, &net, &load, &pv, &full, &cfg.limits, &cfg.solver).map_err(hosting_failure)?;
    println!(
        "nonlinear check: |V| in [{:.4}, {:.4}] pu, voltage excess {:.2e} pu, current excess {:.2e}, transformer excess {:.2e}",
        check.min_vmag, check.max_vmag, check.voltage_excess_pu, check.current_excess, check.transformer_excess
    );
    if args.verbose {
        for b in &sol.binding {
            println!("binding: {b}");
        }
    }
    Ok(0)
}

fn dump_sensitivities(
    args: &CommonArgs,
    grid: &Grid,
    net: &gridgate_core::powerflow::Network,
    load: &NormalizedCurve,
    pv: &NormalizedCurve,
    cfg: &HostingConfig,
) -> Result<(), Failure> {
    let steps = linearize_daylight(grid, net, load, pv, &vec![0.0; grid.nodes.len()], &cfg.solver)
        .map_err(hosting_failure)?;
    let candidates = gridgate_core::hosting::candidate_nodes(grid);
    let mut w = csv::Writer::from_writer(args.out_file("sensitivities.csv")?);
    w.write_record(["step", "quantity", "entity_id", "injection_node_id", "value_pu_per_pu"])
        .input()?;
    for lin in &steps {
        for &n in &candidates {
            let inj = &net.grid.nodes[n].id;
            for (i, node) in net.grid.nodes.iter().enumerate() {
                let v = lin.sens.dv_dp[(i, n)];
                w.write_record([lin.step.to_string(), "dv_dp".into(), node.id.clone(), inj.clone(), format!("{v:.9e}")])
                    .input()?;
            }
            for (b, br) in net.grid.branches.iter().enumerate() {
                let v = lin.sens.di_dp[(b, n)];
                w.write_record([lin.step.to_string(), "di_dp".into(), br.id.clone(), inj.clone(), format!("{v:.9e}")])
                    .input()?;
            }
        }
    }
    w.flush().input()?;
    Ok(())
}

fn cmd_sweep(args: &CommonArgs, h: &HostingArgs) -> Result<u8, Failure> {
    let lambdas = if h.lambda.is_empty() {
        DEFAULT_LAMBDAS.to_vec()
    } else {
        h.lambda.clone()
    };
    let passes = passes(h)?;
    let (Inputs { grid, load, pv }, cfg) = hosting_setup(args)?;
    let net = build_network(&grid, DEFAULT_S_BASE_KVA).input()?;
    let problem = HostingProblem::build(&grid, &net, &load, &pv, &cfg, 0.0).map_err(hosting_failure)?;
    let rows = if passes == 1 {
        sweep_lambda(&problem, &lambdas, &cfg.qp)
    } else {
        sweep_lambda_refined(&problem, &grid, &net, &load, &pv, &cfg, &lambdas, passes)
    }
    .map_err(hosting_failure)?;
    write_pareto_csv(&rows, args.out_file("pareto.csv")?).input()?;
    let mut failed = 0;
    println!("{:>12} {:>14} {:>16} {:>12}", "lambda", "M_U [pu2]", "J_C+J_O [CHF]", "total [kWp]");
    for row in &rows {
        match &row.result {
            Ok(sol) => {
                println!("{:>12} {:>14.6e} {:>16.2} {:>12.3}", row.lambda, sol.m_u, sol.cost(), sol.total_kwp);
                write_alpha_csv(sol, args.out_file(&format!("alpha_lambda_{}.csv", row.lambda))?).input()?;
            }
            Err(e) => {
                failed += 1;
                eprintln!("lambda {}: {e}", row.lambda);
            }
        }
    }
    if failed > 0 {
        return Err(anyhow!("{failed} of {} sweep rows failed", rows.len())).solver();
    }
    Ok(0)
}

fn cmd_export(args: &CommonArgs) -> Result<u8, Failure> {
    let grid = Grid::from_path(&args.grid)
        .with_context(|| format!("reading grid {}", args.grid.display()))
        .input()?;
    let name = Path::new(&args.grid)
        .file_stem()
        .map(|s| format!("{}.dgs", s.to_string_lossy()))
        .unwrap_or_else(|| "grid.dgs".into());
    use std::io::Write;
    let mut out = args.out_file(&name)?;
    out.write_all(export_dgs(&grid).as_bytes()).input()?;
    out.flush().input()?;
    println!("wrote {}", args.out.join(name).display());
    Ok(0)
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("GRIDGATE_THREADS") {
        let n: usize = v.parse().with_context(|| format!("GRIDGATE_THREADS={v} is not a count"))?;
        if n == 0 {
            bail!("GRIDGATE_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let verbose = match &cli.command {
        Command::Validate(c) | Command::ExportDgs(c) => c.verbose,
        Command::Loadflow { common, .. } | Command::Host { common, .. } | Command::Sweep { common, .. } => common.verbose,
    };
    env_logger::Builder::new()
        .filter_level(if verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .parse_default_env()
        .init();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_INPUT);
    }
    let outcome = match &cli.command {
        Command::Validate(c) => cmd_validate(c),
        Command::Loadflow { common, allow_nonconverged } => cmd_loadflow(common, *allow_nonconverged),
        Command::Host {
            common,
            hosting,
            dump_sensitivities,
        } => cmd_host(common, hosting, *dump_sensitivities),
        Command::Sweep { common, hosting } => cmd_sweep(common, hosting),
        Command::ExportDgs(c) => cmd_export(c),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use gridswing::assess::{
    compare_engines, emit_report, group_labels, kmeans_partition, load_type_periods, operating_point, parse_theta_csv,
    partition_diagnostic, run_scenario, scenario_modes, theta_csv, AssessConfig, Disturbance, EngineKind, LoadModel, Report,
    Scenario,
};
use gridswing::case_model::{builtin_case, convert_matpower, load_case, write_case, CaseData, ConversionDefaults, BUILTIN_CASES};
use gridswing::he_linearizer::{linearize_at, DEFAULT_ORDER};
use gridswing::reference_sims::{internal_voltages, DampingMode, DEFAULT_DT, DEFAULT_TERMS};
use gridswing::region_tracker::{RelinearizePolicy, DEFAULT_EPS};

#[derive(Parser)]
#[command(name = "gridswing", version, about = "Transient stability with ZIP loads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one engine on a scenario and write the trajectory.
    Simulate(RunArgs),
    /// Decide stability with the analytic engine.
    Assess(RunArgs),
    /// Run TDS, analytic and HTMS on a scenario and compare them.
    Compare(CompareArgs),
    /// Print the linear maps at the pre-disturbance operating point.
    Linearize(LinearizeArgs),
    /// Subspace-angle partition of the load buses.
    Cluster(ClusterArgs),
    /// Convert a MATPOWER case to the native format.
    ConvertCase(ConvertArgs),
}

#[derive(Args, Clone)]
struct CaseArgs {
    /// Built-in case name or path to a case file.
    #[arg(long, default_value = "ieee9")]
    case: String,
    /// Load representation: zip, z, i or p.
    #[arg(long, default_value = "zip")]
    loads: String,
}

#[derive(Args, Clone)]
struct ScenarioArgs {
    /// Remove the branch between two buses, e.g. `5-7`.
    #[arg(long, conflicts_with = "load_loss")]
    outage: Option<String>,
    /// Drop part of a bus load, e.g. `8:0.1`.
    #[arg(long)]
    load_loss: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    t_fault: f64,
    /// Defaults to the fault time.
    #[arg(long)]
    t_clear: Option<f64>,
    /// Treat loads as impedances while the fault is on.
    #[arg(long)]
    z_on_fault: bool,
}

#[derive(Args, Clone)]
struct EngineArgs {
    /// Validity tolerance of the analytic regions.
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
    #[arg(long, default_value_t = 0.05)]
    eps_o2: f64,
    /// never, norm-ratio, drift or always.
    #[arg(long, default_value = "drift")]
    policy: String,
    /// Padé numerator order.
    #[arg(long, default_value_t = DEFAULT_ORDER)]
    l: usize,
    /// Padé denominator order.
    #[arg(long, default_value_t = DEFAULT_ORDER)]
    m: usize,
    /// TDS step.
    #[arg(long, default_value_t = DEFAULT_DT)]
    dt: f64,
    /// McLaurin terms of the series engine.
    #[arg(long, default_value_t = DEFAULT_TERMS)]
    terms: usize,
    /// Seconds simulated after clearing.
    #[arg(long, default_value_t = 3.0)]
    horizon: f64,
    /// on-speed or on-angle.
    #[arg(long, default_value = "on-speed")]
    damping: String,
    /// Include generator power drift in the validity constraint.
    #[arg(long)]
    power_drift: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    case: CaseArgs,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    engine_args: EngineArgs,
    /// analytic, tds or htms.
    #[arg(long, default_value = "analytic")]
    engine: String,
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    case: CaseArgs,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    engine_args: EngineArgs,
    /// Also fit oscillation periods for Z, I and P loads.
    #[arg(long)]
    periods: bool,
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct LinearizeArgs {
    #[command(flatten)]
    case: CaseArgs,
    #[arg(long, default_value_t = DEFAULT_ORDER)]
    l: usize,
    #[arg(long, default_value_t = DEFAULT_ORDER)]
    m: usize,
}

#[derive(Args)]
struct ClusterArgs {
    #[command(flatten)]
    case: CaseArgs,
    /// Square theta CSV with bus-id header; skips the case.
    #[arg(long)]
    theta: Option<PathBuf>,
    #[arg(long, short, default_value_t = 2)]
    k: usize,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConvertArgs {
    input: PathBuf,
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Damping as a multiple of the inertia constant M.
    #[arg(long)]
    damping_ratio: Option<f64>,
}

fn read_case(name: &str) -> Result<CaseData> {
    if BUILTIN_CASES.contains(&name) {
        return Ok(builtin_case(name)?);
    }
    let text = std::fs::read_to_string(name).with_context(|| format!("reading case {name}"))?;
    Ok(load_case(&text)?)
}

fn parse_scenario(a: &ScenarioArgs) -> Result<Scenario> {
    let disturbance = if let Some(o) = &a.outage {
        let (f, t) = o.split_once('-').context("outage must look like FROM-TO")?;
        Disturbance::LineOutage {
            from: f.trim().parse()?,
            to: t.trim().parse()?,
        }
    } else if let Some(l) = &a.load_loss {
        let (b, s) = l.split_once(':').context("load loss must look like BUS:FRACTION")?;
        Disturbance::LoadLoss {
            bus: b.trim().parse()?,
            severity: s.trim().parse()?,
        }
    } else {
        Disturbance::None
    };
    let mut sc = Scenario::new(disturbance, a.t_fault, a.t_clear.unwrap_or(a.t_fault))?;
    sc.z_loads_on_fault = a.z_on_fault;
    Ok(sc)
}

fn assess_config(c: &CaseArgs, e: &EngineArgs) -> Result<AssessConfig> {
    let mut cfg = AssessConfig {
        horizon: e.horizon,
        load_model: LoadModel::parse(&c.loads)?,
        ..Default::default()
    };
    cfg.chain.eps = e.eps;
    cfg.chain.eps_o2 = e.eps_o2;
    cfg.chain.policy = RelinearizePolicy::parse(&e.policy)?;
    cfg.chain.power_drift = e.power_drift;
    cfg.chain.l = e.l;
    cfg.chain.m = e.m;
    cfg.tds.dt = e.dt;
    cfg.tds.damping = DampingMode::parse(&e.damping)?;
    cfg.htms.terms = e.terms;
    if !(e.horizon > 0.0) || !(e.dt > 0.0) {
        bail!("horizon and dt must be positive");
    }
    Ok(cfg)
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn simulate(a: RunArgs, assess_only: bool) -> Result<()> {
    let case = read_case(&a.case.case)?;
    let sc = parse_scenario(&a.scenario)?;
    let cfg = assess_config(&a.case, &a.engine_args)?;
    let engine = if assess_only {
        EngineKind::Analytic
    } else {
        EngineKind::parse(&a.engine)?
    };
    let run = run_scenario(&case, &sc, engine, &cfg)?;
    print!("{}", run.verdict.to_text());
    let modes = if engine == EngineKind::Analytic {
        Some(scenario_modes(&run, &cfg.chain)?)
    } else {
        None
    };
    let mut trajectories = vec![&run.trajectory];
    if let Some(t) = &run.on_fault {
        trajectories.push(t);
    }
    let report = Report {
        trajectories,
        verdicts: vec![(engine.as_str(), &run.verdict)],
        modes,
        ..Default::default()
    };
    print_paths(&emit_report(&report, &a.out)?);
    if let Some(f) = &run.trajectory.failure {
        bail!("{} engine stopped early: {f}", engine.as_str());
    }
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    let case = read_case(&a.case.case)?;
    let sc = parse_scenario(&a.scenario)?;
    let cfg = assess_config(&a.case, &a.engine_args)?;
    let cmp = compare_engines(&case, &sc, &[EngineKind::Analytic, EngineKind::Htms], &cfg)?;
    for (engine, err) in &cmp.errors {
        eprintln!("{engine} failed: {err}");
    }
    for r in &cmp.runs {
        println!(
            "{}: {} segments={} qpf_solves={} agreement={:?}",
            r.engine.as_str(),
            r.verdict.status.as_str(),
            r.verdict.segments,
            r.trajectory.qpf_solves,
            r.verdict.agreement
        );
    }
    let mut agreement = cmp.agreement_csv();
    if a.periods {
        let mut s = String::from("engine,load,period\n");
        for engine in [EngineKind::Analytic, EngineKind::Tds] {
            for (lm, p) in load_type_periods(&case, &sc, engine, &cfg, 0.0)? {
                let p = p.map(|v| format!("{v:.6}")).unwrap_or_else(|| "nan".into());
                println!("{} period {}: {p}", engine.as_str(), lm.as_str());
                let _ = writeln!(s, "{},{},{p}", engine.as_str(), lm.as_str());
            }
        }
        agreement.push('\n');
        agreement.push_str(&s);
    }
    let report = Report {
        trajectories: cmp.runs.iter().map(|r| &r.trajectory).collect(),
        verdicts: cmp.runs.iter().map(|r| (r.engine.as_str(), &r.verdict)).collect(),
        agreement: Some(agreement),
        ..Default::default()
    };
    print_paths(&emit_report(&report, &a.out)?);
    Ok(())
}

fn linearize(a: LinearizeArgs) -> Result<()> {
    let case = read_case(&a.case.case)?;
    let net = case.augment()?;
    let op = operating_point(&case, &net, LoadModel::parse(&a.case.loads)?)?;
    let lin = linearize_at(&net, &op.loads, &internal_voltages(&op.gens, &op.delta), 0, a.l, a.m)?;
    println!(
        "# order l={} m={} worst pade residual {:.3e}",
        a.l,
        a.m,
        lin.worst_pade_residual()
    );
    for block in lin.blocks() {
        let mat = &block.map.mat;
        println!("# block {} ({}x{})", block.name, mat.nrows(), mat.ncols());
        for i in 0..mat.nrows() {
            let row: Vec<String> = mat.row(i).iter().map(|v| format!("{v:.10e}")).collect();
            println!("{},{:.10e}", row.join(","), block.map.off[i]);
        }
    }
    Ok(())
}

fn cluster(a: ClusterArgs) -> Result<()> {
    let (ids, theta, clusters) = if let Some(p) = &a.theta {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let (ids, theta) = parse_theta_csv(&text)?;
        let labels = kmeans_partition(&theta, a.k)?;
        let clusters = group_labels(&ids, &labels, a.k);
        (ids, theta, clusters)
    } else {
        let case = read_case(&a.case.case)?;
        let cfg = AssessConfig::default();
        let d = partition_diagnostic(&case, LoadModel::parse(&a.case.loads)?, a.k, &cfg.chain)?;
        (d.bus_ids, d.theta, d.clusters)
    };
    for (i, c) in clusters.iter().enumerate() {
        let s: Vec<String> = c.iter().map(|b| b.to_string()).collect();
        println!("cluster {}: {}", i + 1, s.join(" "));
    }
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        let path = out.join("theta.csv");
        std::fs::write(&path, theta_csv(&ids, &theta))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn convert(a: ConvertArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let mut defaults = ConversionDefaults::default();
    if let Some(r) = a.damping_ratio {
        defaults.damping_ratio = r;
    }
    let case = convert_matpower(&text, &defaults)?;
    let out = write_case(&case);
    match &a.out {
        Some(p) => {
            std::fs::write(p, out)?;
            info!("wrote {}", p.display());
        }
        None => print!("{out}"),
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate(a) => simulate(a, false),
        Command::Assess(a) => simulate(a, true),
        Command::Compare(a) => compare(a),
        Command::Linearize(a) => linearize(a),
        Command::Cluster(a) => cluster(a),
        Command::ConvertCase(a) => convert(a),
    }
}

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use wcmdp::bench;
use wcmdp::cache::{build_grid_cache, build_vss_cache, find_worst, BuildMethod, Guarantee, PolicyCache, Scope, VssOptions, DEFAULT_GRID_BUDGET};
use wcmdp::highlevel::{
    attest, flatten, prioritized_solve, reward_value_range, transfer, PrioritizeOptions, RefineMode, SweepLog,
};
use wcmdp::hull::{build_hull_cache, hull_find_worst_gap, HullOptions};
use wcmdp::mdp::{bellman_error, greedy_policy, policy_iteration, value_iteration, Mdp, DEFAULT_VI_TOL};
use wcmdp::problems::{four_rooms, gridworld, render, single_exit_room, GridworldSpec};
use wcmdp::region::{PartitionDocument, RegionPartition, ValueBounds};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_SOLVER: u8 = 4;
const EXIT_UNCERTIFIED: u8 = 5;

#[derive(Parser)]
#[command(name = "wcmdp", version, about = "Decomposition solvers for weakly coupled MDPs")]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Write the main output here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Grid,
    Vss,
    Hull,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    AllStates,
    InSpace,
}

impl From<ScopeArg> for Scope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::AllStates => Scope::AllStates,
            ScopeArg::InSpace => Scope::InSpaceOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FlatMethod {
    Vi,
    Pi,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Append,
    Replace,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the whole MDP without decomposition.
    Solve {
        #[arg(long)]
        mdp: PathBuf,
        #[arg(long, value_enum, default_value_t = FlatMethod::Vi)]
        method: FlatMethod,
        #[arg(long, default_value_t = DEFAULT_VI_TOL)]
        tol: f64,
    },
    /// Report the regions, out-spaces and in-spaces of a partition.
    Decompose {
        #[arg(long)]
        mdp: PathBuf,
        #[arg(long)]
        partition: PathBuf,
    },
    /// Build a certified policy cache for one or all regions.
    CacheBuild {
        #[arg(long)]
        mdp: PathBuf,
        #[arg(long)]
        partition: PathBuf,
        /// Only this region (default: all).
        #[arg(long)]
        region: Option<usize>,
        #[arg(long, value_enum, default_value_t = Method::Vss)]
        method: Method,
        #[command(flatten)]
        common: CacheArgs,
        /// Largest number of grid points the grid method may evaluate.
        #[arg(long, default_value_t = DEFAULT_GRID_BUDGET)]
        budget: u128,
        #[arg(long, default_value_t = 200)]
        max_policies: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Recompute the certificates of stored caches.
    Certify {
        #[arg(long)]
        mdp: PathBuf,
        #[arg(long)]
        caches: PathBuf,
        /// Tolerance to check against (default: each cache's own).
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Solve the high-level problem and compare with the flat optimum.
    SolveHier {
        #[arg(long)]
        mdp: PathBuf,
        #[arg(long)]
        partition: PathBuf,
        #[arg(long)]
        caches: PathBuf,
        #[arg(long)]
        eps: f64,
    },
    /// Refine caches where the high-level solution needs it.
    Prioritize {
        #[arg(long)]
        mdp: PathBuf,
        #[arg(long)]
        partition: PathBuf,
        /// Starting caches (default: one seeded policy per region).
        #[arg(long)]
        caches: Option<PathBuf>,
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        vmin: Option<f64>,
        #[arg(long)]
        vmax: Option<f64>,
        /// Maximum number of cache updates.
        #[arg(long, default_value_t = 1000)]
        budget: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Append)]
        mode: ModeArg,
        #[arg(long)]
        caches_out: Option<PathBuf>,
    },
    /// Reuse caches from one reward structure on another.
    Transfer {
        #[arg(long)]
        old: PathBuf,
        #[arg(long)]
        new: PathBuf,
        #[arg(long)]
        partition: PathBuf,
        #[arg(long)]
        caches: PathBuf,
        #[arg(long)]
        eps: f64,
        #[arg(long, default_value_t = 1000)]
        budget: usize,
        #[arg(long)]
        caches_out: Option<PathBuf>,
    },
    /// Built-in benchmarks
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Render or generate gridworld problems
    #[command(subcommand)]
    Problems(ProblemsCommand),
}

#[derive(Args)]
struct CacheArgs {
    #[arg(long)]
    eps: f64,
    #[arg(long)]
    vmin: Option<f64>,
    #[arg(long)]
    vmax: Option<f64>,
    #[arg(long, value_enum, default_value_t = ScopeArg::AllStates)]
    scope: ScopeArg,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Value-space search on the 25-state, two-exit room.
    Room1 {
        #[arg(long, default_value_t = 0.01)]
        eps: f64,
        #[arg(long, value_enum, default_value_t = ScopeArg::AllStates)]
        scope: ScopeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        max_policies: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    FourRooms,
    Gridworld,
    SingleExit,
}

#[derive(Subcommand)]
enum ProblemsCommand {
    /// ASCII map of a gridworld.
    Render {
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Room (0-based, row-major) holding the default reward.
        #[arg(long, default_value_t = 1)]
        reward_room: usize,
    },
    /// Write an MDP and its room partition.
    Generate {
        #[arg(long, value_enum, default_value_t = Kind::FourRooms)]
        kind: Kind,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        reward_room: usize,
        #[arg(long, default_value_t = 5)]
        size: usize,
        #[arg(long, default_value_t = 1.0)]
        reward: f64,
        #[arg(long, default_value_t = 0.2)]
        noise: f64,
        #[arg(long, default_value_t = 0.95)]
        discount: f64,
        #[arg(long)]
        mdp_out: PathBuf,
        #[arg(long)]
        partition_out: PathBuf,
        #[arg(long)]
        spec_out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Solver(anyhow::Error),
    Uncertified(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Data(_) => EXIT_DATA,
            Failure::Solver(_) => EXIT_SOLVER,
            Failure::Uncertified(_) => EXIT_UNCERTIFIED,
        }
    }
}

impl From<wcmdp::Error> for Failure {
    fn from(e: wcmdp::Error) -> Self {
        use wcmdp::Error as E;
        match e {
            E::InvalidEpsilon(_) | E::InvalidBounds { .. } | E::GridBudgetExceeded { .. } | E::UnsupportedDimension(_) => {
                Failure::Usage(e.into())
            }
            E::Lp(_) | E::QuadrupleLp { .. } | E::LinearSolve(_) | E::Divergence(_) | E::DegenerateAnchors => {
                Failure::Solver(e.into())
            }
            _ => Failure::Data(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

type Outcome = Result<(), Failure>;

fn read<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_mdp(path: &Path) -> Result<Mdp, Failure> {
    Ok(read::<Mdp>(path)?)
}

fn load_partition(mdp: &Mdp, path: &Path) -> Result<RegionPartition, Failure> {
    let doc: PartitionDocument = read(path)?;
    Ok(RegionPartition::from_document(mdp, &doc)?)
}

fn load_caches(mdp: &Mdp, path: &Path) -> Result<Vec<PolicyCache>, Failure> {
    let caches: Vec<PolicyCache> = read(path)?;
    for c in &caches {
        c.verify(mdp)?;
    }
    Ok(caches)
}

fn bounds_for(mdp: &Mdp, vmin: Option<f64>, vmax: Option<f64>) -> Result<ValueBounds, Failure> {
    let (lo, hi) = reward_value_range(mdp);
    Ok(ValueBounds::new(vmin.unwrap_or(lo), vmax.unwrap_or(hi))?)
}

struct Output {
    path: Option<PathBuf>,
    format: Format,
}

impl Output {
    fn emit(&self, text: &str) -> Outcome {
        match &self.path {
            Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
            None => {
                let mut out = std::io::stdout().lock();
                out.write_all(text.as_bytes()).context("writing stdout")?;
            }
        }
        Ok(())
    }

    fn json<T: Serialize>(&self, value: &T) -> Outcome {
        let mut text = serde_json::to_string_pretty(value).map_err(anyhow::Error::from)?;
        text.push('\n');
        self.emit(&text)
    }

    fn rows<T: Serialize>(&self, rows: &[T]) -> Outcome {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r).map_err(anyhow::Error::from)?;
        }
        let bytes = w.into_inner().map_err(|e| anyhow!("{e}"))?;
        self.emit(&String::from_utf8(bytes).map_err(anyhow::Error::from)?)
    }

    /// JSON `doc`, or `rows` as CSV when that format was requested.
    fn either<T: Serialize, R: Serialize>(&self, doc: &T, rows: impl FnOnce() -> Vec<R>) -> Outcome {
        match self.format {
            Format::Json => self.json(doc),
            Format::Csv => self.rows(&rows()),
        }
    }

    fn json_only<T: Serialize>(&self, doc: &T, what: &str) -> Outcome {
        match self.format {
            Format::Json => self.json(doc),
            Format::Csv => Err(Failure::Usage(anyhow!("{what} has no CSV form"))),
        }
    }
}

#[derive(Serialize)]
struct SolveReport {
    method: &'static str,
    values: Vec<f64>,
    policy: Vec<usize>,
    max_bellman_error: f64,
    suboptimality_bound: f64,
}

#[derive(Serialize)]
struct StateRow {
    state: usize,
    value: f64,
    action: usize,
}

fn cmd_solve(out: &Output, mdp: &Path, method: FlatMethod, tol: f64) -> Outcome {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Failure::Usage(anyhow!("--tol must be positive")));
    }
    let mdp = load_mdp(mdp)?;
    let (name, policy, values) = match method {
        FlatMethod::Vi => {
            let v = value_iteration(&mdp, tol);
            ("value_iteration", greedy_policy(&mdp, &v)?, v)
        }
        FlatMethod::Pi => {
            let (p, v) = policy_iteration(&mdp)?;
            ("policy_iteration", p, v)
        }
    };
    let be = bellman_error(&mdp, &values)?;
    let report = SolveReport {
        method: name,
        values: values.0,
        policy: policy.0,
        max_bellman_error: be.max_error,
        suboptimality_bound: be.suboptimality_bound,
    };
    out.either(&report, || {
        report
            .values
            .iter()
            .zip(&report.policy)
            .enumerate()
            .map(|(state, (&value, &action))| StateRow { state, value, action })
            .collect()
    })
}

#[derive(Serialize)]
struct DecomposeReport<'a> {
    n_states: usize,
    boundary_states: Vec<usize>,
    regions: Vec<RegionSummary<'a>>,
}

#[derive(Serialize)]
struct RegionSummary<'a> {
    id: usize,
    n_internal: usize,
    fan_out: usize,
    out_space: &'a [usize],
    in_space: &'a [usize],
}

fn cmd_decompose(out: &Output, mdp: &Path, partition: &Path) -> Outcome {
    let mdp = load_mdp(mdp)?;
    let p = load_partition(&mdp, partition)?;
    let mut boundary: Vec<usize> = p.regions.iter().flat_map(|g| g.out_space.iter().copied()).collect();
    boundary.sort_unstable();
    boundary.dedup();
    let report = DecomposeReport {
        n_states: mdp.n_states(),
        boundary_states: boundary,
        regions: p
            .regions
            .iter()
            .map(|g| RegionSummary {
                id: g.id,
                n_internal: g.n_internal(),
                fan_out: g.fan_out(),
                out_space: &g.out_space,
                in_space: &g.in_space,
            })
            .collect(),
    };
    out.json_only(&report, "decompose")
}

#[derive(Serialize)]
struct CertificateRow {
    region: usize,
    policies: usize,
    method: BuildMethod,
    guarantee: Guarantee,
    eps: f64,
    worst_error: f64,
    certified: bool,
}

fn certificate_rows(caches: &[PolicyCache]) -> Vec<CertificateRow> {
    caches
        .iter()
        .filter_map(|c| {
            let cert = c.certificate.as_ref()?;
            Some(CertificateRow {
                region: c.region.id,
                policies: c.len(),
                method: cert.method,
                guarantee: cert.guarantee,
                eps: cert.eps,
                worst_error: cert.worst_error,
                certified: cert.certified,
            })
        })
        .collect()
}

fn uncertified(caches: &[PolicyCache]) -> Vec<usize> {
    caches
        .iter()
        .filter(|c| !c.certificate.as_ref().is_some_and(|x| x.certified))
        .map(|c| c.region.id)
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_cache_build(
    out: &Output,
    mdp: &Path,
    partition: &Path,
    region: Option<usize>,
    method: Method,
    common: &CacheArgs,
    budget: u128,
    max_policies: usize,
    seed: u64,
) -> Outcome {
    let mdp = load_mdp(mdp)?;
    let p = load_partition(&mdp, partition)?;
    let bounds = bounds_for(&mdp, common.vmin, common.vmax)?;
    let targets: Vec<_> = match region {
        Some(r) if r < p.len() => vec![&p.regions[r]],
        Some(r) => return Err(Failure::Usage(anyhow!("region {r} does not exist ({} regions)", p.len()))),
        None => p.regions.iter().collect(),
    };
    let vss = VssOptions { max_policies, scope: common.scope.into(), seed, ..VssOptions::default() };
    let hull = HullOptions { max_policies, ..HullOptions::default() };
    let caches = targets
        .par_iter()
        .map(|g| match method {
            Method::Grid => build_grid_cache(&mdp, g, common.eps, bounds, budget),
            Method::Vss => build_vss_cache(&mdp, g, common.eps, bounds, &vss),
            Method::Hull => build_hull_cache(&mdp, g, common.eps, bounds, &hull),
        })
        .collect::<Result<Vec<_>, _>>()?;
    for row in certificate_rows(&caches) {
        eprintln!(
            "region {}: {} policies, worst {:.6e}, {}",
            row.region,
            row.policies,
            row.worst_error,
            if row.certified { "certified" } else { "NOT certified" }
        );
    }
    out.json(&caches)?;
    let bad = uncertified(&caches);
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Failure::Uncertified(format!("regions {bad:?} did not reach eps {}", common.eps)))
    }
}

#[derive(Serialize)]
struct Recheck {
    region: usize,
    method: BuildMethod,
    guarantee: Guarantee,
    eps: f64,
    stored_worst: f64,
    recomputed_worst: f64,
    certified: bool,
}

fn cmd_certify(out: &Output, mdp: &Path, caches: &Path, eps: Option<f64>) -> Outcome {
    let mdp = load_mdp(mdp)?;
    let caches = load_caches(&mdp, caches)?;
    let rows = caches
        .par_iter()
        .map(|c| -> Result<Recheck, Failure> {
            let cert = c
                .certificate
                .as_ref()
                .ok_or_else(|| Failure::Data(anyhow!("cache for region {} carries no certificate", c.region.id)))?;
            let eps = eps.unwrap_or(cert.eps);
            let worst = match cert.guarantee {
                Guarantee::HighLevelGap => hull_find_worst_gap(c, &HullOptions::default())?.gap,
                Guarantee::AllStates => find_worst(&mdp, c, Scope::AllStates)?.bellman_error,
                Guarantee::InSpaceOnly => find_worst(&mdp, c, Scope::InSpaceOnly)?.bellman_error,
            };
            Ok(Recheck {
                region: c.region.id,
                method: cert.method,
                guarantee: cert.guarantee,
                eps,
                stored_worst: cert.worst_error,
                recomputed_worst: worst,
                certified: worst <= eps,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    out.either(&rows, || rows.iter().collect())?;
    let bad: Vec<_> = rows.iter().filter(|r| !r.certified).map(|r| r.region).collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Failure::Uncertified(format!("regions {bad:?} fail their certificate")))
    }
}

fn weakest_guarantee(caches: &[PolicyCache], eps: f64) -> &'static str {
    if caches.iter().all(|c| c.certified_for(eps, Guarantee::AllStates)) {
        "all_states"
    } else if caches.iter().all(|c| c.certified_for(eps, Guarantee::InSpaceOnly)) {
        "in_space_only"
    } else if caches.iter().all(|c| c.certified_for(eps, Guarantee::HighLevelGap)) {
        "high_level_gap"
    } else {
        "none"
    }
}

#[derive(Serialize)]
struct HierReport {
    boundary_states: Vec<usize>,
    boundary_values: Vec<f64>,
    entry_states: Vec<Vec<usize>>,
    chosen_policy: Vec<Vec<usize>>,
    /// Actions per region and entry state.
    policies: Vec<Vec<Vec<usize>>>,
    iterations: usize,
    residual: f64,
    attestation: AttestationReport,
}

#[derive(Serialize)]
struct AttestationReport {
    eps: f64,
    bound: f64,
    max_deviation: f64,
    holds: bool,
    /// Weakest certificate among the caches; the bound is only guaranteed
    /// when this is `all_states`.
    guarantee: &'static str,
}

#[derive(Serialize)]
struct HierRow {
    state: usize,
    region: usize,
    flat: f64,
    hierarchical: f64,
    difference: f64,
}

fn cmd_solve_hier(out: &Output, mdp: &Path, partition: &Path, caches: &Path, eps: f64) -> Outcome {
    let mdp = load_mdp(mdp)?;
    let p = load_partition(&mdp, partition)?;
    let caches = load_caches(&mdp, caches)?;
    let (sol, att) = attest(&mdp, &p, &caches, eps)?;
    let flat = flatten(&sol, &caches);
    let report = HierReport {
        boundary_states: sol.boundary_states.clone(),
        boundary_values: sol.boundary_values.clone(),
        entry_states: sol.entry_states.clone(),
        chosen_policy: sol.chosen_policy.clone(),
        policies: flat.regions.iter().map(|r| r.policies.iter().map(|p| p.0.clone()).collect()).collect(),
        iterations: sol.iterations,
        residual: sol.residual,
        attestation: AttestationReport {
            eps,
            bound: att.bound,
            max_deviation: att.max_deviation,
            holds: att.holds,
            guarantee: weakest_guarantee(&caches, eps),
        },
    };
    out.either(&report, || {
        (0..mdp.n_states())
            .map(|s| {
                let (f, h) = (att.flat_values.0[s], att.hierarchical_values.0[s]);
                HierRow { state: s, region: p.assignment[s], flat: f, hierarchical: h, difference: f - h }
            })
            .collect()
    })?;
    if att.holds {
        Ok(())
    } else {
        Err(Failure::Uncertified(format!("max deviation {} exceeds {}", att.max_deviation, att.bound)))
    }
}

#[derive(Serialize)]
struct PrioritizeReport<'a> {
    converged: bool,
    updates: &'a [usize],
    policies: Vec<usize>,
    boundary_states: &'a [usize],
    boundary_values: &'a [f64],
    log: &'a [SweepLog],
}

#[derive(Serialize)]
struct GapRow {
    iteration: usize,
    region: usize,
    gap: f64,
    certified: bool,
    chosen: bool,
}

fn gap_rows(log: &[SweepLog]) -> Vec<GapRow> {
    log.iter()
        .flat_map(|l| {
            l.gaps.iter().map(move |g| GapRow {
                iteration: l.iteration,
                region: g.region,
                gap: g.gap,
                certified: g.certified,
                chosen: l.chosen == Some(g.region),
            })
        })
        .collect()
}

fn prioritize_report<'a>(outcome: &'a wcmdp::highlevel::PrioritizedOutcome, caches: &[PolicyCache]) -> PrioritizeReport<'a> {
    PrioritizeReport {
        converged: outcome.converged,
        updates: &outcome.updates,
        policies: caches.iter().map(PolicyCache::len).collect(),
        boundary_states: &outcome.solution.boundary_states,
        boundary_values: &outcome.solution.boundary_values,
        log: &outcome.log,
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_prioritize(
    out: &Output,
    mdp: &Path,
    partition: &Path,
    caches: Option<&Path>,
    eps: f64,
    vmin: Option<f64>,
    vmax: Option<f64>,
    budget: usize,
    mode: ModeArg,
    caches_out: Option<&Path>,
) -> Outcome {
    let mdp = load_mdp(mdp)?;
    let p = load_partition(&mdp, partition)?;
    let mut caches = match caches {
        Some(path) => load_caches(&mdp, path)?,
        None => {
            let bounds = bounds_for(&mdp, vmin, vmax)?;
            p.regions.iter().map(|g| PolicyCache::seeded(&mdp, g, bounds)).collect::<Result<_, _>>()?
        }
    };
    let mode = match mode {
        ModeArg::Append => RefineMode::Append,
        ModeArg::Replace => RefineMode::Replace,
    };
    let opts = PrioritizeOptions { budget, mode, ..PrioritizeOptions::new(eps) };
    let outcome = prioritized_solve(&mdp, &p, &mut caches, &opts)?;
    if let Some(path) = caches_out {
        write_json(path, &caches)?;
    }
    out.either(&prioritize_report(&outcome, &caches), || gap_rows(&outcome.log))?;
    if outcome.converged {
        Ok(())
    } else {
        Err(Failure::Uncertified(format!("budget of {budget} updates exhausted")))
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_transfer(
    out: &Output,
    old: &Path,
    new: &Path,
    partition: &Path,
    caches: &Path,
    eps: f64,
    budget: usize,
    caches_out: Option<&Path>,
) -> Outcome {
    let old = load_mdp(old)?;
    let new = load_mdp(new)?;
    let p = load_partition(&new, partition)?;
    let caches: Vec<PolicyCache> = read(caches)?;
    let opts = PrioritizeOptions { budget, ..PrioritizeOptions::new(eps) };
    let (report, updated) = transfer(&old, &new, &p, &caches, &opts)?;
    for r in &report.regions {
        if let Some(n) = &r.notice {
            eprintln!("region {}: not reused ({n})", r.region);
        }
    }
    if let Some(path) = caches_out {
        write_json(path, &updated)?;
    }
    out.either(&report, || report.regions.clone())?;
    if report.outcome.converged {
        Ok(())
    } else {
        Err(Failure::Uncertified(format!("budget of {budget} updates exhausted")))
    }
}

fn cmd_bench(out: &Output, cmd: &BenchCommand) -> Outcome {
    let BenchCommand::Room1 { eps, scope, seed, max_policies } = *cmd;
    let opts = VssOptions { max_policies, scope: scope.into(), seed, ..VssOptions::default() };
    let start = Instant::now();
    let (report, _) = bench::room1(eps, &opts)?;
    eprintln!("room1: {} policies in {:.2?}", report.vss_cache_size, start.elapsed());
    out.either(&report, || vec![report.clone()])?;
    if report.certified {
        Ok(())
    } else {
        Err(Failure::Uncertified(format!("worst error {} exceeds {eps}", report.worst_error)))
    }
}

fn load_spec(spec: Option<&Path>, reward_room: usize) -> Result<GridworldSpec, Failure> {
    match spec {
        Some(p) => Ok(read(p)?),
        None if reward_room < 4 => Ok(GridworldSpec::four_rooms_reward_in(reward_room)),
        None => Err(Failure::Usage(anyhow!("--reward-room must be 0..=3"))),
    }
}

fn cmd_problems(out: &Output, cmd: &ProblemsCommand) -> Outcome {
    match cmd {
        ProblemsCommand::Render { spec, reward_room } => {
            let spec = load_spec(spec.as_deref(), *reward_room)?;
            out.emit(&render(&spec)?)
        }
        ProblemsCommand::Generate {
            kind,
            spec,
            reward_room,
            size,
            reward,
            noise,
            discount,
            mdp_out,
            partition_out,
            spec_out,
        } => {
            let (mdp, p, used) = match kind {
                Kind::SingleExit => {
                    let (m, p) = single_exit_room(*size, *reward, *noise, *discount)?;
                    (m, p, None)
                }
                Kind::FourRooms | Kind::Gridworld => {
                    let s = load_spec(spec.as_deref(), *reward_room)?;
                    let (m, p) = if matches!(kind, Kind::FourRooms) { four_rooms(&s)? } else { gridworld(&s)? };
                    (m, p, Some(s))
                }
            };
            write_json(mdp_out, &mdp)?;
            write_json(partition_out, &p.to_document())?;
            if let (Some(path), Some(s)) = (spec_out, &used) {
                write_json(path, s)?;
            }
            let hp_size = {
                let mut u: Vec<usize> = p.regions.iter().flat_map(|g| g.out_space.iter().copied()).collect();
                u.sort_unstable();
                u.dedup();
                u.len()
            };
            eprintln!("{} states, {} regions, {} boundary states", mdp.n_states(), p.len(), hp_size);
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Outcome {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(anyhow!("--workers: {e}")))?;
    }
    let out = Output { path: cli.out, format: cli.format };
    match &cli.command {
        Command::Solve { mdp, method, tol } => cmd_solve(&out, mdp, *method, *tol),
        Command::Decompose { mdp, partition } => cmd_decompose(&out, mdp, partition),
        Command::CacheBuild { mdp, partition, region, method, common, budget, max_policies, seed } => {
            cmd_cache_build(&out, mdp, partition, *region, *method, common, *budget, *max_policies, *seed)
        }
        Command::Certify { mdp, caches, eps } => cmd_certify(&out, mdp, caches, *eps),
        Command::SolveHier { mdp, partition, caches, eps } => cmd_solve_hier(&out, mdp, partition, caches, *eps),
        Command::Prioritize { mdp, partition, caches, eps, vmin, vmax, budget, mode, caches_out } => cmd_prioritize(
            &out,
            mdp,
            partition,
            caches.as_deref(),
            *eps,
            *vmin,
            *vmax,
            *budget,
            *mode,
            caches_out.as_deref(),
        ),
        Command::Transfer { old, new, partition, caches, eps, budget, caches_out } => {
            cmd_transfer(&out, old, new, partition, caches, *eps, *budget, caches_out.as_deref())
        }
        Command::Bench(b) => cmd_bench(&out, b),
        Command::Problems(p) => cmd_problems(&out, p),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(e) | Failure::Data(e) | Failure::Solver(e) => eprintln!("error: {e:#}"),
                Failure::Uncertified(msg) => eprintln!("uncertified: {msg}"),
            }
            ExitCode::from(f.code())
        }
    }
}

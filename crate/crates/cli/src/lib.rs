//! Batch commands behind the `zonebal` binary. Each returns a [`CliError`]
//! whose [`CliError::exit_code`] is what the process exits with.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use zonebal_core::metrics::{compare_all, write_plot_data, write_samples_csv};
use zonebal_core::{
    MetricsStore, Policy, RunReport, Scenario, ScenarioError, SimError, SimTime, Spot, ZonePolicy,
};

/// Overrides shared by every command.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub duration_us: Option<u64>,
    pub check_invariants: bool,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad input: unreadable or invalid scenario, bad arguments.
    Invalid(String),
    /// The simulation itself failed; carries the trace dump.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Failed(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Invalid(m) | CliError::Failed(m) => m,
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

fn io_failed(path: &Path, e: io::Error) -> CliError {
    CliError::Failed(format!("cannot write {}: {e}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Spot,
    CachePenaltyUs,
    NCpuHogs,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "spot" => Ok(SweepAxis::Spot),
            "cache_penalty_us" => Ok(SweepAxis::CachePenaltyUs),
            "n_cpu_hogs" => Ok(SweepAxis::NCpuHogs),
            _ => Err(CliError::Invalid(format!(
                "unknown sweep axis `{s}` (expected spot, cache_penalty_us or n_cpu_hogs)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Spot => "spot",
            SweepAxis::CachePenaltyUs => "cache_penalty_us",
            SweepAxis::NCpuHogs => "n_cpu_hogs",
        }
    }

    fn apply(self, s: &mut Scenario, value: u64) -> Result<(), CliError> {
        match self {
            SweepAxis::Spot => {
                let spot = Spot::from_threshold(value).ok_or_else(|| {
                    CliError::Invalid(format!("spot must be 30, 50 or 80, got {value}"))
                })?;
                s.apply_policy(Policy::Zone(ZonePolicy::Warm(spot)));
            }
            SweepAxis::CachePenaltyUs => s.cache_penalty_us = value,
            SweepAxis::NCpuHogs => {
                s.workload.stress.n_cpu_hogs = u32::try_from(value)
                    .map_err(|_| CliError::Invalid(format!("n_cpu_hogs {value} is too large")))?;
            }
        }
        s.validate()?;
        Ok(())
    }
}

/// Loads a scenario and applies the command-line overrides.
pub fn load_scenario(
    path: &Path,
    policy: Option<&str>,
    o: &Overrides,
) -> Result<Scenario, CliError> {
    let mut s = Scenario::load(path)?;
    if let Some(p) = policy {
        s.apply_policy(p.parse::<Policy>()?);
    }
    if let Some(seed) = o.seed {
        s.seed = seed;
    }
    if let Some(d) = o.duration_us {
        s.duration_us = d;
    }
    s.validate()?;
    Ok(s)
}

/// Runs one simulation. A simulator error becomes [`CliError::Failed`]
/// carrying the last trace records.
pub fn simulate(s: &Scenario, check_invariants: bool) -> Result<MetricsStore, CliError> {
    let mut sim = s
        .build()
        .map_err(|e| CliError::Failed(format!("cannot build simulation: {e}")))?
        .with_invariant_checks(check_invariants);
    sim.run_until(SimTime(s.duration_us))
        .map_err(|e| CliError::Failed(failure_dump(&e, sim.machine().trace().tail())))
}

fn failure_dump<'a>(
    e: &SimError,
    tail: impl Iterator<Item = &'a zonebal_core::trace::TraceRecord>,
) -> String {
    let mut out = format!("simulation failed: {e}\nlast trace records:\n");
    for rec in tail {
        let _ = writeln!(out, "  {rec:?}");
    }
    out
}

/// Writes `bytes` next to `path` and renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| io_failed(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_failed(path, e))
}

/// `samples.csv`, `summary.json` and `latency.dat` for one run.
pub fn write_run_outputs(
    dir: &Path,
    report: &RunReport,
    metrics: &MetricsStore,
) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_failed(dir, e))?;
    let mut csv = Vec::new();
    write_samples_csv(&mut csv, &metrics.samples).expect("write to vec");
    write_atomic(&dir.join("samples.csv"), &csv)?;
    write_atomic(&dir.join("summary.json"), report.to_json().as_bytes())?;
    let mut dat = Vec::new();
    write_plot_data(&mut dat, &metrics.samples).expect("write to vec");
    write_atomic(&dir.join("latency.dat"), &dat)
}

pub fn run(
    scenario: &Path,
    policy: Option<&str>,
    o: &Overrides,
    out: &Path,
    log: &mut dyn Write,
) -> Result<(), CliError> {
    let s = load_scenario(scenario, policy, o)?;
    let metrics = simulate(&s, o.check_invariants)?;
    let report = s.report(&metrics);
    write_run_outputs(out, &report, &metrics)?;
    let _ = writeln!(log, "{}", summary_line(&report));
    Ok(())
}

fn summary_line(r: &RunReport) -> String {
    format!(
        "{}: samples={} mean_us={} p99_us={} migrations={} direct_checks={} lock_hold_total_us={}",
        r.policy,
        r.samples,
        r.mean_us.map_or("-".into(), |m| format!("{m:.3}")),
        r.p99_us.map_or("-".into(), |p| p.to_string()),
        r.migrations,
        r.direct_checks,
        r.lock_hold_total_us
    )
}

/// Directory names for per-policy artifacts; repeats get a numeric suffix.
fn policy_dirs(policies: &[Policy]) -> Vec<String> {
    let mut dirs: Vec<String> = Vec::new();
    for p in policies {
        let base = p.to_string().replace(':', "_");
        let mut name = base.clone();
        let mut n = 2;
        while dirs.contains(&name) {
            name = format!("{base}-{n}");
            n += 1;
        }
        dirs.push(name);
    }
    dirs
}

pub fn compare(
    scenario: &Path,
    policies: &[String],
    o: &Overrides,
    out: &Path,
    log: &mut dyn Write,
) -> Result<(), CliError> {
    if policies.len() < 2 {
        return Err(CliError::Invalid(format!(
            "compare needs at least two policies, got {}",
            policies.len()
        )));
    }
    let base = load_scenario(scenario, None, o)?;
    let parsed = policies
        .iter()
        .map(|p| p.parse::<Policy>())
        .collect::<Result<Vec<_>, _>>()?;
    let mut reports = Vec::new();
    for (policy, dir) in parsed.iter().zip(policy_dirs(&parsed)) {
        let mut s = base.clone();
        s.apply_policy(*policy);
        let metrics = simulate(&s, o.check_invariants)?;
        let report = s.report(&metrics);
        write_run_outputs(&out.join(dir), &report, &metrics)?;
        let _ = writeln!(log, "{}", summary_line(&report));
        reports.push(report);
    }
    let cmp = compare_all(reports).map_err(|e| CliError::Invalid(e.to_string()))?;
    for r in &cmp.ratios {
        let _ = writeln!(
            log,
            "{} / {}: mean_latency_ratio={:?} migration_ratio={:?}",
            r.a, r.b, r.mean_latency_ratio, r.migration_ratio
        );
    }
    write_atomic(&out.join("comparison.json"), cmp.to_json().as_bytes())
}

pub fn sweep(
    scenario: &Path,
    axis: &str,
    values: &[u64],
    policy: Option<&str>,
    o: &Overrides,
    out: &Path,
    log: &mut dyn Write,
) -> Result<(), CliError> {
    let axis = SweepAxis::parse(axis)?;
    if values.is_empty() {
        return Err(CliError::Invalid("sweep needs at least one value".into()));
    }
    let base = load_scenario(scenario, policy, o)?;
    let mut runs = Vec::new();
    for &v in values {
        let mut s = base.clone();
        axis.apply(&mut s, v)?;
        runs.push((v, s));
    }
    fs::create_dir_all(out).map_err(|e| io_failed(out, e))?;
    let mut table = String::from(
        "axis,value,policy,samples,mean_us,p99_us,migrations,direct_checks,lock_hold_total_us,cache_penalty_total_us\n",
    );
    for (v, s) in runs {
        let metrics = simulate(&s, o.check_invariants)?;
        let r = s.report(&metrics);
        write_run_outputs(&out.join(format!("{}-{v}", axis.name())), &r, &metrics)?;
        let _ = writeln!(
            table,
            "{},{v},{},{},{},{},{},{},{},{}",
            axis.name(),
            r.policy,
            r.samples,
            r.mean_us.map_or(String::new(), |m| m.to_string()),
            r.p99_us.map_or(String::new(), |p| p.to_string()),
            r.migrations,
            r.direct_checks,
            r.lock_hold_total_us,
            r.cache_penalty_total_us
        );
        let _ = writeln!(log, "{}={v} {}", axis.name(), summary_line(&r));
    }
    write_atomic(&out.join("sweep.csv"), table.as_bytes())
}

/// Default output directory when neither `--out` nor `ZONEBAL_OUT` is set.
pub fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

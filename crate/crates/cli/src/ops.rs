//! Subcommand implementations. Each returns the process exit code:
//! 0 success, 2 divergence (partial outputs plus an error record were
//! written); validation and I/O problems bubble as errors and exit 1.

use anyhow::{bail, Context, Result};
use serde::Serialize;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use pmsm_observer::analysis::{
    compare_observers, phase_portrait, semiglobal_sweep, settling_time, sigma_s, sigma_s_of,
    CompareConfig, PortraitConfig,
};
use pmsm_observer::cosim::{error_at, speed_error, wrapped_angle};
use pmsm_observer::hybrid::{simulate, HybridArc, SimError};
use pmsm_observer::scenario::Scenario;
use pmsm_observer::{UnitCircle, Vec2};

use crate::config::{validate_compare, CompareSection, ConfigFile, SweepSection};
use crate::output::{show_settle, CsvOut, TextOut};

/// Config echo lines for CSV `#` comments.
fn config_comments<T: Serialize>(section: &str, value: &T) -> Result<Vec<String>> {
    Ok(crate::output::section_toml(section, value)?
        .lines()
        .map(String::from)
        .collect())
}

fn out_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn create_writer(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)
                .with_context(|| format!("creating output directory {}", dir.display()))?;
        }
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn is_divergence(err: &SimError) -> bool {
    matches!(
        err,
        SimError::Divergence { .. } | SimError::ZenoSuspicion { .. }
    )
}

// ─────────────────────────────────────────────────────────────────────────────
// run
// ─────────────────────────────────────────────────────────────────────────────

pub fn run(scenario: &Scenario, out_dir: &Path) -> Result<u8> {
    scenario.validate()?;
    let profile = scenario.speed_profile()?;
    let (sys, x0) = scenario.build()?;
    let columns = scenario.columns(&profile);
    let comments = config_comments("scenario", scenario)?;

    let stem = scenario.stem().to_string();
    let traj_name = format!("{stem}.csv");
    let jumps_name = format!("{stem}_jumps.csv");
    let summary_name = format!("{stem}_summary.txt");
    let traj_path = out_path(
        out_dir,
        scenario.output.trajectory.as_deref().unwrap_or(&traj_name),
    );
    let jumps_path = out_path(
        out_dir,
        scenario.output.jumps.as_deref().unwrap_or(&jumps_name),
    );
    let summary_path = out_path(
        out_dir,
        scenario.output.summary.as_deref().unwrap_or(&summary_name),
    );

    // Jump log and summary are built the same way on every exit path.
    let mut jumps = CsvOut::create(&jumps_path)?;
    jumps.echo_config("scenario", scenario)?;
    let mut jump_names = vec!["index".to_string(), "t".to_string()];
    jump_names.extend(scenario.state_names().iter().map(|n| format!("pre_{n}")));
    jump_names.extend(scenario.state_names().iter().map(|n| format!("post_{n}")));
    jumps.header(&jump_names)?;

    let mut summary = TextOut::create(&summary_path)?;
    summary.line(&format!(
        "scenario '{}' ({} variant)",
        scenario.stem(),
        scenario.variant.label()
    ))?;
    summary.echo_config("scenario", scenario)?;

    let mut traj = create_writer(&traj_path)?;
    for line in &comments {
        writeln!(traj, "# {line}")?;
    }

    // Header as written by the arc serializer: t, j, phase, states, derived.
    let header_names = {
        let mut names = vec!["t".to_string(), "j".to_string(), "phase".to_string()];
        names.extend(scenario.state_names());
        names.extend(columns.iter().map(|c| c.name.clone()));
        names
    };

    if scenario.horizon == 0.0 {
        writeln!(traj, "{}", header_names.join(","))?;
        traj.flush()?;
        summary.line("zero horizon: nothing simulated; header-only outputs")?;
        jumps.finish()?;
        summary.finish()?;
        return Ok(0);
    }

    match simulate(&sys, &x0, &scenario.sim_options()) {
        Ok(arc) => {
            // Samples were already thinned at record time (`record_every`),
            // so the serializer writes every stored sample.
            arc.write_csv(&mut traj, 1, &[], &columns)
                .with_context(|| format!("writing {}", traj_path.display()))?;
            traj.flush()?;
            let mut row = Vec::with_capacity(jump_names.len());
            for rec in &arc.jumps {
                row.clear();
                row.push(rec.index as f64);
                row.push(rec.t);
                row.extend_from_slice(&rec.pre);
                row.extend_from_slice(&rec.post);
                jumps.row(&row)?;
            }
            run_summary(&mut summary, scenario, &profile, &arc)?;
            jumps.finish()?;
            summary.finish()?;
            Ok(0)
        }
        Err(err) if is_divergence(&err) => {
            writeln!(traj, "# error: {err}")?;
            writeln!(traj, "{}", header_names.join(","))?;
            traj.flush()?;
            summary.line(&format!("error: {err}"))?;
            summary.line("outputs are partial")?;
            jumps.finish()?;
            summary.finish()?;
            eprintln!("error: {err}");
            Ok(2)
        }
        Err(err) => Err(err).context("simulation rejected the scenario"),
    }
}

fn run_summary(
    summary: &mut TextOut,
    scenario: &Scenario,
    profile: &pmsm_observer::SpeedProfile,
    arc: &HybridArc,
) -> Result<()> {
    let (t_end, j_end, x_end) = arc.final_sample();
    let mut samples = 0usize;
    arc.for_each_sample(|_, _, _| samples += 1);
    summary.line(&format!("samples recorded: {samples}"))?;
    summary.line(&format!("final hybrid time: ({t_end}, {j_end})"))?;
    summary.line(&format!("jumps: {}", arc.total_jumps()))?;
    if scenario.variant.is_reduced() {
        summary.line(&format!("final sigma: {}", sigma_s_of(x_end)))?;
        let settle = settling_time(arc, 1e-2, |_, _, x| sigma_s_of(x));
        summary.line(&format!("time to sigma <= 1e-2: {}", show_settle(settle)))?;
    } else {
        let machine = scenario.machine;
        let gains = scenario.gains;
        let (omega_end, domega_end) = profile.eval(t_end);
        let err_end = error_at(x_end, omega_end, domega_end, &machine, &gains);
        summary.line(&format!(
            "final speed-estimate relative error: {}",
            speed_error(x_end, omega_end, &machine, &gains)
        ))?;
        summary.line(&format!(
            "final sigma: {}",
            sigma_s(err_end.eta, err_end.xi_err)
        ))?;
        let speed_settle = settling_time(arc, 0.05, |t, _, x| {
            speed_error(x, profile.eval(t).0, &machine, &gains)
        });
        summary.line(&format!(
            "time to 5% speed estimate: {}",
            show_settle(speed_settle)
        ))?;
        let xi_settle = settling_time(arc, 0.05, |t, _, x| {
            let (omega, domega) = profile.eval(t);
            error_at(x, omega, domega, &machine, &gains).xi_err.abs() * machine.flux
        });
        summary.line(&format!(
            "time to 5% scale estimate: {}",
            show_settle(xi_settle)
        ))?;
        let mut peak_x_f: f64 = 0.0;
        arc.for_each_sample(|t, _, x| {
            let (omega, domega) = profile.eval(t);
            peak_x_f = peak_x_f.max(error_at(x, omega, domega, &machine, &gains).x_f_norm());
        });
        summary.line(&format!("peak |x_f|: {peak_x_f}"))?;
    }
    Ok(())
}

// ─────────────────────────────────────────────────────────────────────────────
// portrait
// ─────────────────────────────────────────────────────────────────────────────

pub fn validate_portrait(cfg: &PortraitConfig) -> Result<()> {
    cfg.gains.validate().context("portrait gains")?;
    if !(cfg.chi > 0.0 && cfg.chi.is_finite()) {
        bail!("portrait: chi must be positive, got {}", cfg.chi);
    }
    if cfg.theta_count == 0 || cfg.xi_count == 0 {
        bail!("portrait: grid needs at least one node per axis");
    }
    if !(cfg.xi_span > 0.0 && cfg.xi_span.is_finite()) {
        bail!("portrait: xi_span must be positive, got {}", cfg.xi_span);
    }
    if !(cfg.step > 0.0 && cfg.horizon > 0.0) {
        bail!("portrait: step and horizon must be positive");
    }
    if cfg.record_every == 0 {
        bail!("portrait: record_every must be at least 1");
    }
    if !(cfg.manifold_delta > 0.0 && cfg.manifold_margin >= 0.0) {
        bail!("portrait: manifold_delta must be positive and manifold_margin non-negative");
    }
    Ok(())
}

pub fn portrait(cfg: &PortraitConfig, out_dir: &Path) -> Result<u8> {
    validate_portrait(cfg)?;
    let data = match phase_portrait(cfg) {
        Ok(d) => d,
        Err(err) if is_divergence(&err) => {
            let mut summary = TextOut::create(&out_path(out_dir, "portrait_summary.txt"))?;
            summary.echo_config("portrait", cfg)?;
            summary.line(&format!("error: {err}"))?;
            summary.finish()?;
            eprintln!("error: {err}");
            return Ok(2);
        }
        Err(err) => return Err(err).context("portrait simulation failed"),
    };

    let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();

    let mut manifold = CsvOut::create(&out_path(out_dir, "portrait_manifold.csv"))?;
    manifold.echo_config("portrait", cfg)?;
    manifold.header(&names(&["eta1", "eta2", "xi_err", "theta", "sigma"]))?;
    for p in &data.manifold {
        let eta = UnitCircle {
            c: p.eta1,
            s: p.eta2,
        };
        manifold.row(&[p.eta1, p.eta2, p.xi_err, p.angle(), sigma_s(eta, p.xi_err)])?;
    }
    manifold.finish()?;

    let mut nodes = CsvOut::create(&out_path(out_dir, "portrait_nodes.csv"))?;
    nodes.echo_config("portrait", cfg)?;
    nodes.header(&names(&[
        "node",
        "theta0",
        "xi0",
        "near_manifold",
        "t",
        "j",
        "eta1",
        "eta2",
        "xi_err",
        "theta",
        "sigma",
    ]))?;
    for (k, node) in data.nodes.iter().enumerate() {
        node.arc.for_each_sample(|t, j, x| {
            let eta = UnitCircle { c: x[0], s: x[1] };
            let _ = nodes.row(&[
                k as f64,
                node.theta0,
                node.xi0,
                f64::from(u8::from(node.near_manifold)),
                t,
                j as f64,
                x[0],
                x[1],
                x[2],
                wrapped_angle(eta),
                sigma_s_of(x),
            ]);
        });
    }
    nodes.finish()?;

    let mut summary = TextOut::create(&out_path(out_dir, "portrait_summary.txt"))?;
    summary.echo_config("portrait", cfg)?;
    let converged = data.nodes.iter().filter(|n| n.final_sigma < 1e-2).count();
    summary.line(&format!(
        "{} of {} grid nodes reached sigma < 1e-2 by t = {}",
        converged,
        data.nodes.len(),
        cfg.horizon
    ))?;
    summary.line(&format!(
        "manifold polyline: {} vertices",
        data.manifold.len()
    ))?;
    for (k, node) in data.nodes.iter().enumerate() {
        summary.line(&format!(
            "node {k}: theta0 = {}, xi0 = {}, near_manifold = {}, final sigma = {}",
            node.theta0, node.xi0, node.near_manifold, node.final_sigma
        ))?;
    }
    summary.finish()?;
    Ok(0)
}

// ─────────────────────────────────────────────────────────────────────────────
// compare
// ─────────────────────────────────────────────────────────────────────────────

pub fn compare(scenario: &Scenario, section: &CompareSection, out_dir: &Path) -> Result<u8> {
    scenario.validate()?;
    validate_compare(section)?;
    let profile = scenario.speed_profile()?;
    let cfg = CompareConfig {
        machine: scenario.machine,
        gains: scenario.gains,
        profile: profile.clone(),
        i_ref: Vec2::new(scenario.i_ref[0], scenario.i_ref[1]),
        init: scenario.cosim_init(profile.eval(0.0).0),
        window: scenario.window,
        step: scenario.step,
        horizon: scenario.horizon,
        record_every: scenario.downsample,
        threshold: section.threshold,
    };
    let variants: Vec<_> = section
        .variants
        .iter()
        .map(|v| v.closed_loop().expect("validated as full variants"))
        .collect();
    let reports = match compare_observers(&cfg, &variants) {
        Ok(r) => r,
        Err(err) if is_divergence(&err) => {
            let mut summary = TextOut::create(&out_path(out_dir, "compare.txt"))?;
            summary.echo_config("scenario", scenario)?;
            summary.line(&format!("error: {err}"))?;
            summary.finish()?;
            eprintln!("error: {err}");
            return Ok(2);
        }
        Err(err) => return Err(err).context("comparison run failed"),
    };

    let mut csv = CsvOut::create(&out_path(out_dir, "compare.csv"))?;
    csv.echo_config("scenario", scenario)?;
    csv.echo_config("compare", section)?;
    csv.header(
        &[
            "variant",
            "speed_settle",
            "xi_settle",
            "peak_h_err",
            "peak_x_f",
            "final_sigma",
            "jumps",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>(),
    )?;
    for r in &reports {
        csv.raw_row(&[
            r.variant.label().to_string(),
            show_settle(r.speed_settle),
            show_settle(r.xi_settle),
            format!("{}", r.peak_h_err),
            format!("{}", r.peak_x_f),
            format!("{}", r.final_sigma),
            format!("{}", r.jumps),
        ])?;
    }
    csv.finish()?;

    let mut txt = TextOut::create(&out_path(out_dir, "compare.txt"))?;
    txt.echo_config("scenario", scenario)?;
    txt.echo_config("compare", section)?;
    txt.line(&format!(
        "{:<20} {:>14} {:>14} {:>12} {:>12} {:>8}",
        "variant", "speed_settle", "xi_settle", "peak_h_err", "final_sigma", "jumps"
    ))?;
    for r in &reports {
        txt.line(&format!(
            "{:<20} {:>14} {:>14} {:>12.4e} {:>12.4e} {:>8}",
            r.variant.label(),
            show_settle(r.speed_settle),
            show_settle(r.xi_settle),
            r.peak_h_err,
            r.final_sigma,
            r.jumps
        ))?;
    }
    txt.finish()?;
    Ok(0)
}

// ─────────────────────────────────────────────────────────────────────────────
// sweep
// ─────────────────────────────────────────────────────────────────────────────

pub fn validate_sweep(section: &SweepSection) -> Result<()> {
    let c = &section.config;
    c.machine.validate().context("sweep machine")?;
    if !(c.k_eta > 0.0 && c.gamma > 0.0 && c.lambda > 0.0) {
        bail!("sweep: k_eta, gamma, lambda must be positive");
    }
    if c.speed_fraction == 0.0 || !c.speed_fraction.is_finite() {
        bail!(
            "sweep: speed_fraction must be a nonzero finite fraction of nominal speed, got {}",
            c.speed_fraction
        );
    }
    if c.samples == 0 {
        bail!("sweep: needs at least one sampled initial condition");
    }
    if !(c.delta_s >= 0.0 && c.delta_f >= 0.0) {
        bail!("sweep: initial-condition radii must be non-negative");
    }
    if !(c.tolerance_fast > 0.0 && c.tolerance_slow > 0.0) {
        bail!("sweep: tolerances must be positive");
    }
    if c.overshoot_factor < 1.0 {
        bail!(
            "sweep: overshoot_factor below 1 rejects even monotone convergence, got {}",
            c.overshoot_factor
        );
    }
    // A NaN horizon must fail validation, like a non-positive one.
    let horizon_positive = c.horizon > 0.0;
    if !horizon_positive || c.steps_per_epoch == 0 {
        bail!("sweep: horizon must be positive and steps_per_epoch at least 1");
    }
    for &e in &section.epsilon_list {
        if !(e > 0.0 && e.is_finite()) {
            bail!("sweep: epsilon_list entries must be positive, got {e}");
        }
    }
    Ok(())
}

pub fn sweep(section: &SweepSection, out_dir: &Path) -> Result<u8> {
    validate_sweep(section)?;
    let eps_list = section.epsilon_list();
    let report = match semiglobal_sweep(&section.config, &eps_list) {
        Ok(r) => r,
        Err(err) if is_divergence(&err) => {
            let mut summary = TextOut::create(&out_path(out_dir, "sweep_summary.txt"))?;
            summary.echo_config("sweep", &section.config)?;
            summary.line(&format!("error: {err}"))?;
            summary.finish()?;
            eprintln!("error: {err}");
            return Ok(2);
        }
        Err(err) => return Err(err).context("sweep failed"),
    };

    let mut csv = CsvOut::create(&out_path(out_dir, "sweep.csv"))?;
    csv.echo_config("sweep", &section.config)?;
    csv.comment(&format!("epsilon_list = {eps_list:?}"))?;
    csv.header(
        &[
            "epsilon",
            "fast_violations",
            "slow_violations",
            "worst_fast_excess",
            "worst_overshoot",
            "worst_final_sigma",
            "passes",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>(),
    )?;
    for row in &report.rows {
        csv.raw_row(&[
            format!("{}", row.epsilon),
            format!("{}", row.fast_violations),
            format!("{}", row.slow_violations),
            format!("{}", row.worst_fast_excess),
            format!("{}", row.worst_overshoot),
            format!("{}", row.worst_final_sigma),
            format!("{}", u8::from(row.passes())),
        ])?;
    }
    csv.finish()?;

    let mut summary = TextOut::create(&out_path(out_dir, "sweep_summary.txt"))?;
    summary.echo_config("sweep", &section.config)?;
    for row in &report.rows {
        summary.line(&format!("{row}"))?;
    }
    summary.line(&match report.smallest_passing {
        Some(e) => format!("smallest passing epsilon: {e}"),
        None => "no swept epsilon satisfied both bounds".to_string(),
    })?;
    summary.finish()?;
    Ok(0)
}

// ─────────────────────────────────────────────────────────────────────────────
// validate
// ─────────────────────────────────────────────────────────────────────────────

/// Check every section of a config file without running anything.
/// Missing sections validate the built-in defaults for that subcommand.
pub fn validate(cfg: &ConfigFile) -> Result<u8> {
    let mut failures = 0usize;
    let mut report = |what: &str, present: bool, res: Result<()>| match res {
        Ok(()) => {
            let src = if present { "" } else { " (defaults)" };
            println!("ok: {what}{src}");
        }
        Err(e) => {
            println!("error: {what}: {e:#}");
            failures += 1;
        }
    };

    let scenario = cfg.scenario_or_default();
    report(
        &format!("scenario '{}'", scenario.stem()),
        cfg.scenario.is_some(),
        scenario.validate().map_err(anyhow::Error::from),
    );
    report(
        "portrait",
        cfg.portrait.is_some(),
        validate_portrait(&cfg.portrait_or_default()),
    );
    report(
        "compare",
        cfg.compare.is_some(),
        validate_compare(&cfg.compare_or_default()),
    );
    report(
        "sweep",
        cfg.sweep.is_some(),
        validate_sweep(&cfg.sweep_or_default()),
    );

    if failures == 0 {
        println!("config is valid");
        Ok(0)
    } else {
        bail!("{failures} section(s) failed validation");
    }
}

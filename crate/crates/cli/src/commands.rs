use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use kerr_core::dynamics::{
    crossing_map, dispersive_shift_table, exchange_trace, fit_oscillation, linspace, shift_sweep,
};
use kerr_core::measurement::{run_trajectories, Outcome};
use kerr_core::prep::{distribution, prepare, random_walk_thermal, StateSpec};
use kerr_core::quantum::FockState;
use kerr_core::reconstruction::{
    fit_free_distribution, fit_parametric, fit_shared_eta, FitModel, FitOptions, FitResult,
    FreeFitOptions,
};
use kerr_core::spectroscopy::{
    add_shot_noise, axial_ground_with, default_scan_grid, dressed_origin, driven_scan,
    model_spectrum_at, peak_positions, sideband_map, Spectrum,
};
use kerr_core::trap::{hz_to_rad, rad_to_hz, resonant_coupling_strength};
use serde::Deserialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::output::{Artifacts, RunManifest, Table};
use crate::{
    Cli, Command, CrossingArgs, ExchangeArgs, FitArgs, ScanArgs, ScanMode, ShiftArgs, ShotsArgs,
    Status, WalkArgs,
};

pub fn execute(cli: &Cli) -> Result<Status> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    let name = match &cli.command {
        Command::Modes => "modes",
        Command::Exchange(a) => {
            cfg.model.detuning_hz = Some(a.detuning_hz);
            "exchange"
        }
        Command::Crossing(_) => "crossing",
        Command::Shift(_) => "shift",
        Command::Scan(a) => {
            override_state(&mut cfg, a.state.as_deref(), a.eta, a.g);
            "scan"
        }
        Command::Fit(_) => "fit",
        Command::Shots(a) => {
            override_state(&mut cfg, a.state.as_deref(), a.eta, a.g);
            "shots"
        }
        Command::Walk(_) => "walk",
    };
    let mut out = Artifacts::new(&cli.out, cli.format)?;
    let status = match &cli.command {
        Command::Modes => modes(&cfg, &mut out)?,
        Command::Exchange(a) => exchange(&cfg, a, &mut out)?,
        Command::Crossing(a) => crossing(&cfg, a, &mut out)?,
        Command::Shift(a) => shift(&cfg, a, &mut out)?,
        Command::Scan(a) => scan(&cfg, a, cli.seed, &mut out)?,
        Command::Fit(a) => fit(&cfg, a, &mut out)?,
        Command::Shots(a) => shots(&cfg, a, require_seed(cli.seed, name)?, &mut out)?,
        Command::Walk(a) => walk(a, require_seed(cli.seed, name)?, &mut out)?,
    };
    out.finish(RunManifest::new(name, cfg.hash(), cli.seed))?;
    Ok(status)
}

fn override_state(cfg: &mut RunConfig, state: Option<&str>, eta: Option<f64>, g: Option<f64>) {
    if let Some(s) = state {
        cfg.state.spec = s.to_string();
    }
    if let Some(eta) = eta {
        cfg.detection.eta = eta;
    }
    if let Some(g) = g {
        cfg.detection.g = g;
    }
}

fn require_seed(seed: Option<u64>, command: &str) -> Result<u64> {
    seed.ok_or_else(|| anyhow!("`{command}` draws random numbers; pass --seed N"))
}

/// Parses "LO,HI,POINTS".
fn parse_range(text: &str) -> Result<(f64, f64, usize)> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let [lo, hi, n] = parts.as_slice() else {
        bail!("expected LO,HI,POINTS, got {text:?}");
    };
    let lo: f64 = lo.parse().with_context(|| format!("bad LO in {text:?}"))?;
    let hi: f64 = hi.parse().with_context(|| format!("bad HI in {text:?}"))?;
    let n: usize = n
        .parse()
        .with_context(|| format!("bad POINTS in {text:?}"))?;
    if !(hi > lo) || n < 2 {
        bail!("range {text:?} needs HI > LO and POINTS >= 2");
    }
    Ok((lo, hi, n))
}

fn parse_schedule(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .with_context(|| format!("bad peak index {s:?} in schedule {text:?}"))
        })
        .collect()
}

fn modes(cfg: &RunConfig, out: &mut Artifacts) -> Result<Status> {
    let m = cfg.modes()?;
    let resonant = resonant_coupling_strength(&cfg.trap()?)?;
    let rows: [(&str, f64, &str); 8] = [
        ("omega_a", rad_to_hz(m.omega_a), "Hz"),
        ("omega_b", rad_to_hz(m.omega_b), "Hz"),
        ("delta", rad_to_hz(m.delta), "Hz"),
        ("xi", rad_to_hz(m.xi), "Hz"),
        (
            "exchange_2sqrt2_xi",
            rad_to_hz(m.exchange_frequency()),
            "Hz",
        ),
        ("xi_resonant", rad_to_hz(resonant), "Hz"),
        (
            "exchange_2sqrt2_xi_resonant",
            rad_to_hz(2.0 * 2f64.sqrt() * resonant),
            "Hz",
        ),
        ("x0", m.x0 * 1e6, "um"),
    ];
    let mut t = Table::new(vec!["quantity", "value", "unit"]);
    for (name, value, unit) in rows {
        println!("{name:<28} {value:>14.4} {unit}");
        t.push(vec![name.into(), value.into(), unit.into()]);
    }
    out.table("modes", &t)?;
    Ok(Status::Ok)
}

fn exchange(cfg: &RunConfig, a: &ExchangeArgs, out: &mut Artifacts) -> Result<Status> {
    if !(a.duration_ms > 0.0) || a.points < 8 {
        bail!("exchange needs --duration-ms > 0 and --points >= 8");
    }
    let params = cfg.params(false)?;
    let cutoff = params.cutoff;
    let initial = FockState::basis(cutoff.dim(), cutoff.index(1, 0, None)?)?;
    let t = linspace(0.0, a.duration_ms * 1e-3, a.points);
    let trace = exchange_trace(&params, &initial, &t, &[(1, 0), (0, 2)])?;
    let fit = fit_oscillation(&t, &trace.populations[0])?;

    let mut table = Table::new(vec!["t_s", "p_1_0", "p_0_2"]);
    for k in 0..t.len() {
        table.push(vec![
            t[k].into(),
            trace.populations[0][k].into(),
            trace.populations[1][k].into(),
        ]);
    }
    out.table("exchange", &table)?;
    let predicted = rad_to_hz(2.0 * 2f64.sqrt() * params.xi);
    let fitted = rad_to_hz(fit.omega);
    out.json(
        "exchange_fit.json",
        &json!({
            "detuning_hz": rad_to_hz(params.delta),
            "xi_hz": rad_to_hz(params.xi),
            "predicted_2sqrt2_xi_hz": predicted,
            "fitted_frequency_hz": fitted,
            "amplitude": fit.amplitude,
            "offset": fit.offset,
            "converged": fit.converged,
        }),
    )?;
    println!("fitted exchange frequency {fitted:.2} Hz (2 sqrt2 xi = {predicted:.2} Hz)");
    Ok(if fit.converged {
        Status::Ok
    } else {
        Status::Flagged
    })
}

fn crossing(cfg: &RunConfig, a: &CrossingArgs, out: &mut Artifacts) -> Result<Status> {
    if !(a.to_khz > a.from_khz) || a.points < 2 {
        bail!("crossing needs --to-khz > --from-khz and --points >= 2");
    }
    let grid = linspace(
        hz_to_rad(a.from_khz * 1e3),
        hz_to_rad(a.to_khz * 1e3),
        a.points,
    );
    let map = crossing_map(&cfg.trap()?, &grid, a.manifold_max, cfg.cutoff(false)?)?;
    let mut t = Table::new(vec![
        "delta_hz",
        "branch",
        "manifold",
        "energy_hz",
        "axial_weight",
    ]);
    for (i, &d) in map.delta_grid.iter().enumerate() {
        for j in 0..map.branch_energies[i].len() {
            t.push(vec![
                rad_to_hz(d).into(),
                j.into(),
                map.branch_manifolds[i][j].into(),
                rad_to_hz(map.branch_energies[i][j]).into(),
                map.branch_weights[i][j].into(),
            ]);
        }
    }
    out.table("crossing", &t)?;
    println!(
        "{} detunings x {} branches",
        map.delta_grid.len(),
        map.branch_energies.first().map_or(0, Vec::len)
    );
    if a.map {
        let (lo, hi, n) = parse_range(&a.laser_khz)?;
        let laser = linspace(hz_to_rad(lo * 1e3), hz_to_rad(hi * 1e3), n);
        let mut drive = cfg.drive()?;
        if let Some(order) = a.order {
            drive.order = order;
        }
        let sweep = sideband_map(
            &cfg.trap()?,
            cfg.cutoff(true)?,
            a.initial_nb,
            &drive,
            &grid,
            &laser,
        )?;
        let mut t = Table::new(vec!["delta_hz", "laser_hz", "p_up"]);
        for (i, &d) in sweep.delta_grid.iter().enumerate() {
            for (j, &l) in sweep.laser_grid.iter().enumerate() {
                t.push(vec![
                    rad_to_hz(d).into(),
                    rad_to_hz(l).into(),
                    sweep.p_up[i][j].into(),
                ]);
            }
        }
        out.table("crossing_map", &t)?;
        println!(
            "map: {} x {} points from |0_a, {}_b>, order {}",
            grid.len(),
            laser.len(),
            a.initial_nb,
            drive.order
        );
    }
    Ok(Status::Ok)
}

fn shift(cfg: &RunConfig, a: &ShiftArgs, out: &mut Artifacts) -> Result<Status> {
    let params = cfg.params(false)?;
    match &a.sweep_khz {
        None => {
            let table = dispersive_shift_table(&params, a.n_report)?;
            let mut t = Table::new(vec!["n_b", "shift_exact_hz", "shift_perturbative_hz"]);
            for (k, &n) in table.n_b.iter().enumerate() {
                let (exact, pert) = (
                    rad_to_hz(table.shift_exact[k]),
                    rad_to_hz(table.shift_perturbative[k]),
                );
                println!("n_b = {n:>2}  exact {exact:>10.2} Hz  perturbative {pert:>10.2} Hz");
                t.push(vec![n.into(), exact.into(), pert.into()]);
            }
            out.table("shift", &t)?;
        }
        Some(range) => {
            let (lo, hi, n) = parse_range(range)?;
            let grid = linspace(hz_to_rad(lo * 1e3), hz_to_rad(hi * 1e3), n);
            let tables = shift_sweep(params.xi, params.cutoff, &grid, a.n_report)?;
            let mut t = Table::new(vec![
                "delta_hz",
                "n_b",
                "shift_exact_hz",
                "shift_perturbative_hz",
            ]);
            for table in &tables {
                for (k, &nb) in table.n_b.iter().enumerate() {
                    t.push(vec![
                        rad_to_hz(table.delta).into(),
                        nb.into(),
                        rad_to_hz(table.shift_exact[k]).into(),
                        rad_to_hz(table.shift_perturbative[k]).into(),
                    ]);
                }
            }
            out.table("shift_sweep", &t)?;
            println!("{} detunings, n_b = 0..={}", tables.len(), a.n_report);
        }
    }
    Ok(Status::Ok)
}

fn spectrum_table(s: &Spectrum) -> Table {
    let mut t = Table::new(vec!["detuning_hz", "p_up", "shots"]);
    for (d, p) in s.detuning.iter().zip(&s.p_up) {
        t.push(vec![rad_to_hz(*d).into(), (*p).into(), s.shots.into()]);
    }
    t
}

fn scan(cfg: &RunConfig, a: &ScanArgs, seed: Option<u64>, out: &mut Artifacts) -> Result<Status> {
    let spec = cfg.state_spec()?;
    let drive = cfg.drive()?;
    let det = cfg.detector()?;
    let params = cfg.params(false)?;
    let n_max = cfg.n_peaks()? - 1;
    let grid = match &a.grid_khz {
        Some(r) => {
            let (lo, hi, n) = parse_range(r)?;
            linspace(hz_to_rad(lo * 1e3), hz_to_rad(hi * 1e3), n)
        }
        None => default_scan_grid(params.delta),
    };
    let centers = peak_positions(&params, n_max)?;
    let dist = distribution(&spec, n_max)?;
    let clean = match a.mode {
        ScanMode::Model => model_spectrum_at(&dist.p, &centers, &drive, &grid, det.eta, det.g)?,
        ScanMode::Driven => {
            let radial = prepare(&spec, params.cutoff.n_b_max)?;
            let initial = axial_ground_with(&params.cutoff, &radial.state)?;
            let origin = dressed_origin(&params)?;
            let raw = driven_scan(&initial, &cfg.params(true)?, &drive, &grid, origin)?;
            let p_up = raw
                .p_up
                .iter()
                .map(|p| (det.g + det.eta * p).clamp(0.0, 1.0))
                .collect();
            Spectrum::new(raw.detuning, p_up)?
        }
    };
    let spectrum = match a.shots {
        Some(shots) => add_shot_noise(&clean, shots, require_seed(seed, "scan --shots")?)?,
        None => clean,
    };
    out.table("scan", &spectrum_table(&spectrum))?;
    out.json(
        "truth.json",
        &json!({
            "state": spec.to_string(),
            "mode": format!("{:?}", a.mode).to_lowercase(),
            "p": dist.p,
            "tail": dist.tail,
            "centers_hz": centers.iter().map(|&c| rad_to_hz(c)).collect::<Vec<_>>(),
            "eta": det.eta,
            "g": det.g,
            "t_pi_s": drive.t_pi,
            "shots": spectrum.shots,
            "seed": spectrum.seed,
        }),
    )?;
    println!("{} points, state {spec}", spectrum.len());
    Ok(Status::Ok)
}

#[derive(Deserialize)]
struct SpectrumRecord {
    detuning_hz: f64,
    p_up: f64,
    shots: Option<u32>,
}

fn read_spectrum(path: &Path) -> Result<Spectrum> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    let is_json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let spectrum = if is_json {
        let records: Vec<SpectrumRecord> = serde_json::from_slice(&bytes)
            .with_context(|| format!("malformed scan JSON {}", path.display()))?;
        let shots = records.first().and_then(|r| r.shots);
        if records.iter().any(|r| r.shots != shots) {
            bail!("{}: shots differ between rows", path.display());
        }
        let mut s = Spectrum::new(
            records.iter().map(|r| hz_to_rad(r.detuning_hz)).collect(),
            records.iter().map(|r| r.p_up).collect(),
        )?;
        s.shots = shots;
        s
    } else {
        Spectrum::read_csv(bytes.as_slice())
            .with_context(|| format!("malformed scan CSV {}", path.display()))?
    };
    Ok(spectrum)
}

fn fit(cfg: &RunConfig, a: &FitArgs, out: &mut Artifacts) -> Result<Status> {
    let models: Vec<FitModel> = a
        .family
        .iter()
        .map(|f| f.parse::<FitModel>())
        .collect::<kerr_core::Result<_>>()?;
    if models.len() != 1 && models.len() != a.input.len() {
        bail!(
            "give one --family for all inputs or one per input; got {} for {} inputs",
            models.len(),
            a.input.len()
        );
    }
    let models: Vec<FitModel> = (0..a.input.len())
        .map(|k| models[k.min(models.len() - 1)])
        .collect();
    let spectra = a
        .input
        .iter()
        .map(|p| read_spectrum(p))
        .collect::<Result<Vec<_>>>()?;
    let drive = cfg.drive()?;
    let centers = peak_positions(&cfg.params(false)?, cfg.n_peaks()? - 1)?;

    let results: Vec<FitResult> = if a.shared_eta {
        let shared = fit_shared_eta(&spectra, &models, &centers, &drive, FitOptions::default())?;
        match shared.eta_sigma {
            Some(s) => println!("shared eta = {:.6} +- {s:.6}", shared.eta),
            None => println!("shared eta = {:.6}", shared.eta),
        }
        for w in &shared.warnings {
            eprintln!("warning: {w}");
        }
        out.json(
            "shared_eta.json",
            &json!({
                "inputs": a.input,
                "eta": shared.eta,
                "eta_sigma": shared.eta_sigma,
                "objective": shared.objective,
                "converged": shared.converged,
                "warnings": shared.warnings,
            }),
        )?;
        shared.fits
    } else {
        spectra
            .iter()
            .zip(&models)
            .map(|(s, &m)| -> Result<FitResult> {
                Ok(match m {
                    FitModel::Free => {
                        let opts = FreeFitOptions {
                            eta: a.eta,
                            ..Default::default()
                        };
                        fit_free_distribution(s, &centers, &drive, opts)?
                    }
                    FitModel::Family(f) => {
                        let opts = FitOptions {
                            eta: a.eta,
                            ..Default::default()
                        };
                        fit_parametric(s, f, None, &centers, &drive, opts)?
                    }
                })
            })
            .collect::<Result<_>>()?
    };

    let single = results.len() == 1;
    let mut status = Status::Ok;
    for (k, (result, spectrum)) in results.iter().zip(&spectra).enumerate() {
        let suffix = if single {
            String::new()
        } else {
            format!("_{k}")
        };
        if !single {
            println!("[{k}] {}", a.input[k].display());
        }
        if report_fit(result, spectrum, &suffix, out)? == Status::Flagged {
            status = Status::Flagged;
        }
    }
    Ok(status)
}

fn report_fit(
    result: &FitResult,
    spectrum: &Spectrum,
    suffix: &str,
    out: &mut Artifacts,
) -> Result<Status> {
    let mut t = Table::new(vec!["detuning_hz", "p_up", "model", "residual"]);
    for (i, (&d, &y)) in spectrum.detuning.iter().zip(&spectrum.p_up).enumerate() {
        let r = result.residuals[i];
        t.push(vec![
            rad_to_hz(d).into(),
            y.into(),
            (y - r).into(),
            r.into(),
        ]);
    }
    out.table(&format!("fit_curve{suffix}"), &t)?;
    out.json(&format!("fit{suffix}.json"), result)?;

    let mut params: Vec<(&String, &f64)> = result.params.iter().collect();
    // p0, p1, ..., p10 in index order
    params.sort_by_key(|(name, _)| {
        (
            name.strip_prefix('p').and_then(|n| n.parse::<usize>().ok()),
            name.as_str(),
        )
    });
    for (name, value) in params {
        match result.param_sigma.get(name) {
            Some(s) => println!("{name} = {value:.6} +- {s:.6}"),
            None => println!("{name} = {value:.6}"),
        }
    }
    println!(
        "eta = {:.4}, g = {:.4}, rms residual {:.3e}",
        result.eta_hat, result.g_hat, result.residual_rms
    );
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    if !result.converged || result.is_degenerate() {
        eprintln!(
            "fit flagged: {}",
            if result.converged {
                "degenerate direction"
            } else {
                "not converged"
            }
        );
        return Ok(Status::Flagged);
    }
    Ok(Status::Ok)
}

fn shots(cfg: &RunConfig, a: &ShotsArgs, seed: u64, out: &mut Artifacts) -> Result<Status> {
    let spec = cfg.state_spec()?;
    let det = cfg.detector()?;
    let schedule = parse_schedule(&a.schedule)?;
    if a.trajectories == 0 {
        bail!("--trajectories must be >= 1");
    }
    let prepared = prepare(&spec, cfg.state.n_max)?;
    let (runs, summary) = run_trajectories(&prepared.state, &schedule, &det, seed, a.trajectories)?;

    let mut t = Table::new(vec![
        "trajectory",
        "step",
        "target_n",
        "outcome",
        "p_bright",
        "dark_count",
    ]);
    for (k, run) in runs.iter().enumerate() {
        for (step, r) in run.records.iter().enumerate() {
            let outcome = match r.outcome {
                Outcome::Bright => "bright",
                Outcome::Dark => "dark",
            };
            t.push(vec![
                k.into(),
                step.into(),
                r.target_n.into(),
                outcome.into(),
                r.p_bright.into(),
                r.dark_count.into(),
            ]);
        }
    }
    out.table("shots", &t)?;
    let expected_first = runs.first().map(|r| r.records[0].p_bright);
    out.json(
        "shots_summary.json",
        &json!({
            "state": spec.to_string(),
            "schedule": schedule,
            "eta": det.eta,
            "g": det.g,
            "expected_first_bright": expected_first,
            "summary": summary,
        }),
    )?;
    for (k, f) in summary.step_bright_frequency.iter().enumerate() {
        println!(
            "step {k} (n = {}): bright frequency {f:.4} over {} shots",
            schedule[k], summary.step_shots[k]
        );
    }
    Ok(Status::Ok)
}

fn walk(a: &WalkArgs, seed: u64, out: &mut Artifacts) -> Result<Status> {
    if a.pulses == 0 {
        bail!("--pulses must be >= 1");
    }
    let step = a.step_alpha.unwrap_or((a.nbar / a.pulses as f64).sqrt());
    let nbar = a.pulses as f64 * step * step;
    let walk = random_walk_thermal(a.pulses, step, seed, a.trajectories, a.n_max)?;
    let thermal = distribution(&StateSpec::Thermal { nbar }, a.n_max)?;
    let tv = walk.total_variation(&thermal);

    let mut t = Table::new(vec!["n", "p_walk", "p_thermal"]);
    for n in 0..=a.n_max {
        t.push(vec![n.into(), walk.p[n].into(), thermal.p[n].into()]);
    }
    out.table("walk", &t)?;
    out.json(
        "walk_summary.json",
        &json!({
            "pulses": a.pulses,
            "step_alpha": step,
            "nbar": nbar,
            "trajectories": a.trajectories,
            "mean_walk": walk.mean(),
            "total_variation": tv,
            "tail_walk": walk.tail,
        }),
    )?;
    println!(
        "nbar = {nbar:.4}, walk mean {:.4}, total variation {tv:.4}",
        walk.mean()
    );
    Ok(Status::Ok)
}

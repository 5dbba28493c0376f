//! Axial blue-sideband spectra: the multi-peak lineshape model, a full
//! driven qubit + two-mode scan, and binomial shot noise.
//!
//! Detunings are in rad/s. A spectrum's detuning is measured from the
//! `n_b = 0` sideband; peak `n` of the model sits at the dispersive offset
//! `omega_n` with `omega_0 = 0`.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    build_hamiltonian, dispersive_shift_table, sideband_frequency, CoupledModeParams,
};
use crate::error::{Error, Result};
use crate::prep::PhononDistribution;
use crate::quantum::{
    assemble_blocks, eigh_blocks, BlockEigen, CMatrix, CVector, FockCutoff, FockOperator,
    FockState, Qubit, C64,
};
use crate::rng;
use crate::trap::hz_to_rad;

/// Default blue-sideband pi time, s.
pub const DEFAULT_T_PI: f64 = 8e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriveParams {
    /// pi time of the bare first-order sideband on `|0_a>`, s
    pub t_pi: f64,
    /// Sideband order, 1 or 2.
    pub order: u8,
    /// Second-order coupling `Omega_2`, rad/s. Defaults to `Omega`.
    pub rabi2: Option<f64>,
}

impl Default for DriveParams {
    fn default() -> Self {
        Self {
            t_pi: DEFAULT_T_PI,
            order: 1,
            rabi2: None,
        }
    }
}

impl DriveParams {
    pub fn new(t_pi: f64, order: u8) -> Result<Self> {
        let d = Self {
            t_pi,
            order,
            rabi2: None,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_pi > 0.0 && self.t_pi.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "t_pi must be > 0, got {}",
                self.t_pi
            )));
        }
        if !matches!(self.order, 1 | 2) {
            return Err(Error::InvalidParameter(format!(
                "sideband order must be 1 or 2, got {}",
                self.order
            )));
        }
        if let Some(r) = self.rabi2 {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "rabi2 must be > 0, got {r}"
                )));
            }
        }
        Ok(())
    }

    /// `Omega = pi / t_pi`, rad/s.
    pub fn rabi(&self) -> f64 {
        PI / self.t_pi
    }

    /// Coupling of the order-`k` drive term `(Omega_k / 2)(sigma_+ a^dag^k + h.c.)`.
    pub fn coupling(&self) -> f64 {
        match self.order {
            1 => self.rabi(),
            _ => self.rabi2.unwrap_or_else(|| self.rabi()),
        }
    }

    /// Pulse length that is a pi pulse on `|0_a> -> |k_a>`, where the
    /// matrix element is `sqrt(k!)`.
    pub fn pulse_length(&self) -> f64 {
        let elem = if self.order == 2 { 2f64.sqrt() } else { 1.0 };
        PI / (self.coupling() * elem)
    }
}

/// `f(D) = [(Omega / Omega_D) sin(pi Omega_D / (2 Omega))]^2`,
/// `Omega_D = sqrt(Omega^2 + D^2)`.
pub fn lineshape(delta_n: f64, drive: &DriveParams) -> f64 {
    let omega = drive.rabi();
    let omega_n = omega.hypot(delta_n);
    let amp = omega / omega_n * (PI * omega_n / (2.0 * omega)).sin();
    amp * amp
}

/// `df / dD`.
pub fn lineshape_derivative(delta_n: f64, drive: &DriveParams) -> f64 {
    let omega = drive.rabi();
    let omega_n = omega.hypot(delta_n);
    let theta = PI * omega_n / (2.0 * omega);
    let (s, c) = theta.sin_cos();
    omega * delta_n * s * (PI * c / omega_n.powi(3) - 2.0 * omega * s / omega_n.powi(4))
}

/// Full width at half maximum of [`lineshape`], rad/s.
pub fn lineshape_fwhm(drive: &DriveParams) -> f64 {
    // f falls monotonically from 1 to 0 on [0, sqrt(3) Omega]
    let (mut lo, mut hi) = (0.0, 3f64.sqrt() * drive.rabi());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if lineshape(mid, drive) > 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo + hi
}

/// Smallest spacing between adjacent peak centers.
pub fn min_peak_spacing(centers: &[f64]) -> f64 {
    centers
        .windows(2)
        .map(|w| (w[1] - w[0]).abs())
        .fold(f64::INFINITY, f64::min)
}

/// Whether every pair of adjacent peaks is further apart than the FWHM.
pub fn peaks_resolved(centers: &[f64], drive: &DriveParams) -> bool {
    min_peak_spacing(centers) > lineshape_fwhm(drive)
}

/// Model peak centers `omega_n`, `n = 0..=n_max`, with `omega_0 = 0`.
pub fn peak_positions(params: &CoupledModeParams, n_max: usize) -> Result<Vec<f64>> {
    if params.xi == 0.0 {
        return Ok(vec![0.0; n_max + 1]);
    }
    Ok(dispersive_shift_table(params, n_max)?.shift_exact)
}

/// Blue-sideband scan: `p_up` versus drive detuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    /// rad/s, strictly increasing
    pub detuning: Vec<f64>,
    pub p_up: Vec<f64>,
    /// Shots per point, `None` for noiseless probabilities.
    pub shots: Option<u32>,
    pub seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct SpectrumRow {
    detuning_hz: f64,
    p_up: f64,
    shots: Option<u32>,
}

impl Spectrum {
    pub fn new(detuning: Vec<f64>, p_up: Vec<f64>) -> Result<Self> {
        let s = Self {
            detuning,
            p_up,
            shots: None,
            seed: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.detuning.len() != self.p_up.len() {
            return Err(Error::DimensionMismatch {
                expected: self.detuning.len(),
                got: self.p_up.len(),
            });
        }
        check_grid(&self.detuning)?;
        if let Some(p) = self.p_up.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidState(format!("p_up = {p} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.detuning.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detuning.is_empty()
    }

    /// Columns `detuning_hz,p_up,shots`; `shots` is empty when noiseless.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        for (d, p) in self.detuning.iter().zip(&self.p_up) {
            w.serialize(SpectrumRow {
                detuning_hz: d / (2.0 * PI),
                p_up: *p,
                shots: self.shots,
            })
            .map_err(|e| Error::Parse(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r
            .headers()
            .map_err(|e| Error::Parse(e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["detuning_hz", "p_up", "shots"] {
            return Err(Error::Parse(format!(
                "spectrum CSV header must be detuning_hz,p_up,shots, got {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut detuning = Vec::new();
        let mut p_up = Vec::new();
        let mut shots = None;
        for (line, row) in r.deserialize::<SpectrumRow>().enumerate() {
            let row = row.map_err(|e| Error::Parse(format!("row {}: {e}", line + 2)))?;
            if line == 0 {
                shots = row.shots;
            } else if row.shots != shots {
                return Err(Error::Parse(format!(
                    "row {}: shots differ between rows",
                    line + 2
                )));
            }
            detuning.push(hz_to_rad(row.detuning_hz));
            p_up.push(row.p_up);
        }
        let s = Self {
            detuning,
            p_up,
            shots,
            seed: None,
        };
        s.validate()?;
        Ok(s)
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.iter().any(|x| !x.is_finite()) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter(
            "detuning grid must be finite and strictly increasing".into(),
        ));
    }
    Ok(())
}

/// 161 points over 6 kHz around the `n_b = 0` peak, extending 4.5 kHz in
/// the direction the peaks move (negative detuning for `delta > 0`).
pub fn default_scan_grid(delta: f64) -> Vec<f64> {
    let (lo, hi) = if delta > 0.0 {
        (-4.5e3, 1.5e3)
    } else {
        (-1.5e3, 4.5e3)
    };
    crate::dynamics::linspace(hz_to_rad(lo), hz_to_rad(hi), 161)
}

fn check_detection(eta: f64, g: f64) -> Result<()> {
    if !((0.0..=1.0).contains(&eta) && g >= 0.0 && g + eta <= 1.0 + 1e-12) {
        return Err(Error::InvalidParameter(format!(
            "need 0 <= eta <= 1, g >= 0 and g + eta <= 1; got eta = {eta}, g = {g}"
        )));
    }
    Ok(())
}

/// `g + eta sum_n p[n] f(D - centers[n])` at detuning `d`.
pub fn model_point(
    p: &[f64],
    centers: &[f64],
    drive: &DriveParams,
    d: f64,
    eta: f64,
    g: f64,
) -> f64 {
    g + eta
        * p.iter()
            .zip(centers)
            .map(|(pn, c)| pn * lineshape(d - c, drive))
            .sum::<f64>()
}

/// Noiseless model spectrum with given peak centers.
pub fn model_spectrum_at(
    p: &[f64],
    centers: &[f64],
    drive: &DriveParams,
    grid: &[f64],
    eta: f64,
    g: f64,
) -> Result<Spectrum> {
    drive.validate()?;
    check_detection(eta, g)?;
    if centers.len() < p.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: centers.len(),
        });
    }
    let p_up = grid
        .iter()
        .map(|&d| model_point(p, centers, drive, d, eta, g).clamp(0.0, 1.0))
        .collect();
    Spectrum::new(grid.to_vec(), p_up)
}

/// Noiseless model spectrum with centers from [`peak_positions`].
pub fn model_spectrum(
    dist: &PhononDistribution,
    params: &CoupledModeParams,
    drive: &DriveParams,
    grid: &[f64],
    eta: f64,
    g: f64,
) -> Result<Spectrum> {
    let centers = peak_positions(params, dist.n_max())?;
    model_spectrum_at(&dist.p, &centers, drive, grid, eta, g)
}

/// `|0_a> (x) radial` on the two-mode space of `cutoff`.
pub fn axial_ground_with(cutoff: &FockCutoff, radial: &FockState) -> Result<FockState> {
    let cut = cutoff.with_qubit(false);
    if radial.dim() != cut.dim_b() {
        return Err(Error::DimensionMismatch {
            expected: cut.dim_b(),
            got: radial.dim(),
        });
    }
    let embed = |nb: usize| cut.index(0, nb, None).expect("n_b within cutoff");
    Ok(match radial {
        FockState::Pure(psi) => {
            let mut out = CVector::zeros(cut.dim());
            for (nb, z) in psi.iter().enumerate() {
                out[embed(nb)] = *z;
            }
            FockState::Pure(out)
        }
        FockState::Mixed(rho) => {
            let mut out = CMatrix::zeros(cut.dim(), cut.dim());
            for i in 0..rho.nrows() {
                for j in 0..rho.ncols() {
                    out[(embed(i), embed(j))] = rho[(i, j)];
                }
            }
            FockState::Mixed(out)
        }
    })
}

/// `|down> (x) state`; the down block comes first in the basis order.
fn with_qubit_down(state: &FockState, dim: usize) -> FockState {
    match state {
        FockState::Pure(psi) => {
            let mut out = CVector::zeros(dim);
            out.rows_mut(0, psi.len()).copy_from(psi);
            FockState::Pure(out)
        }
        FockState::Mixed(rho) => {
            let mut out = CMatrix::zeros(dim, dim);
            out.view_mut((0, 0), rho.shape()).copy_from(rho);
            FockState::Mixed(out)
        }
    }
}

/// Conserved charge of the driven Hamiltonian: `2 n_a + n_b - 2 k q`.
fn driven_charges(cutoff: &FockCutoff, order: u8) -> Vec<i64> {
    cutoff
        .basis()
        .map(|l| {
            let up = i64::from(l.qubit == Qubit::Up);
            (2 * l.n_a + l.n_b) as i64 - 2 * i64::from(order) * up
        })
        .collect()
}

fn evolve_pure_blocks(blocks: &[BlockEigen], psi: &CVector, t: f64) -> CVector {
    let mut out = CVector::zeros(psi.len());
    for blk in blocks {
        let local = CVector::from_iterator(blk.indices.len(), blk.indices.iter().map(|&i| psi[i]));
        if local.iter().all(|z| *z == C64::new(0.0, 0.0)) {
            continue;
        }
        let mut c = blk.vectors.ad_mul(&local);
        for (k, ck) in c.iter_mut().enumerate() {
            *ck *= C64::from_polar(1.0, -blk.values[k] * t);
        }
        let back = &blk.vectors * c;
        for (k, &i) in blk.indices.iter().enumerate() {
            out[i] = back[k];
        }
    }
    out
}

/// Population in basis states with a coupling that leaves the cutoff.
fn edge_population(cutoff: &FockCutoff, coupled: bool, order: u8, pops: &[f64]) -> f64 {
    let k = usize::from(order);
    cutoff
        .basis()
        .zip(pops)
        .filter(|(l, _)| {
            let exchange_cut = coupled
                && ((l.n_b >= 2 && l.n_a == cutoff.n_a_max)
                    || (l.n_a >= 1 && l.n_b + 2 > cutoff.n_b_max));
            let drive_cut = l.qubit == Qubit::Down && l.n_a + k > cutoff.n_a_max;
            exchange_cut || drive_cut
        })
        .map(|(_, p)| p)
        .sum()
}

/// Dressed `n_b = 0` first-order sideband relative to the bare axial
/// frequency; pass as `origin` to put the grid zero on the `n_b = 0` peak.
pub fn dressed_origin(params: &CoupledModeParams) -> Result<f64> {
    if params.xi == 0.0 || params.delta == 0.0 {
        return Ok(0.0);
    }
    sideband_frequency(params, 0)
}

/// Drives `|down> (x) initial` for one pi pulse at every grid detuning and
/// records `P(up)`.
///
/// `initial` lives on the two-mode space of `params.cutoff` (without qubit);
/// `params.cutoff` must include the qubit. Grid detunings are laser
/// detunings measured from `origin`, itself measured from the bare `k`-th
/// axial sideband.
pub fn driven_scan(
    initial: &FockState,
    params: &CoupledModeParams,
    drive: &DriveParams,
    grid: &[f64],
    origin: f64,
) -> Result<Spectrum> {
    drive.validate()?;
    check_grid(grid)?;
    let cut = params.cutoff;
    if !cut.with_qubit {
        return Err(Error::MissingQubit);
    }
    let modes = cut.with_qubit(false);
    if initial.dim() != modes.dim() {
        return Err(Error::DimensionMismatch {
            expected: modes.dim(),
            got: initial.dim(),
        });
    }
    let state = with_qubit_down(initial, cut.dim());
    let coupled = params.xi != 0.0;
    let start_edge = edge_population(&cut, coupled, drive.order, &state.populations());
    if start_edge > crate::prep::MAX_TAIL {
        return Err(Error::Truncation {
            tail: start_edge,
            limit: crate::prep::MAX_TAIL,
            n_max: cut.n_b_max,
            suggested: cut.n_b_max + 4,
        });
    }

    let k = drive.order;
    let t = drive.pulse_length();
    let half = cut.dim() / 2;

    // the evolution never leaves the charge blocks the state starts in
    let charges = driven_charges(&cut, k);
    let zero = C64::new(0.0, 0.0);
    let occupied: std::collections::BTreeSet<i64> = match &state {
        FockState::Pure(psi) => (0..cut.dim())
            .filter(|&i| psi[i] != zero)
            .map(|i| charges[i])
            .collect(),
        FockState::Mixed(rho) => (0..cut.dim())
            .filter(|&i| rho.row(i).iter().any(|z| *z != zero))
            .map(|i| charges[i])
            .collect(),
    };
    let keep: Vec<usize> = (0..cut.dim())
        .filter(|&i| occupied.contains(&charges[i]))
        .collect();
    let kept_charges: Vec<i64> = keep.iter().map(|&i| charges[i]).collect();
    let kept_state = match &state {
        FockState::Pure(psi) => FockState::Pure(CVector::from_iterator(
            keep.len(),
            keep.iter().map(|&i| psi[i]),
        )),
        FockState::Mixed(rho) => {
            FockState::Mixed(CMatrix::from_fn(keep.len(), keep.len(), |i, j| {
                rho[(keep[i], keep[j])]
            }))
        }
    };

    // coupled modes at zero frame offset plus (Omega_k / 2)(sigma_+ a^dag^k + h.c.)
    let mut local = vec![None; cut.dim()];
    for (i, &g) in keep.iter().enumerate() {
        local[g] = Some(i);
    }
    let mut base = build_hamiltonian(params, 0.0)?.submatrix(&keep);
    let mut frame = Vec::with_capacity(keep.len());
    for (i, &g) in keep.iter().enumerate() {
        let l = cut.labels(g);
        frame.push(l.n_a as f64 + l.n_b as f64 / 2.0);
        if l.qubit == Qubit::Down && l.n_a + usize::from(k) <= cut.n_a_max {
            let up = cut.index(l.n_a + usize::from(k), l.n_b, Some(Qubit::Up))?;
            let j = local[up].expect("drive conserves the charge");
            let ladder: f64 = (1..=usize::from(k))
                .map(|m| ((l.n_a + m) as f64).sqrt())
                .product();
            let amp = C64::new(drive.coupling() / 2.0 * ladder, 0.0);
            base[(j, i)] += amp;
            base[(i, j)] += amp;
        }
    }

    let points: Vec<(f64, f64)> = grid
        .par_iter()
        .map(|&d| -> Result<(f64, f64)> {
            let offset = -(d + origin) / f64::from(k);
            let mut h = base.clone();
            for (i, w) in frame.iter().enumerate() {
                h[(i, i)] += C64::new(offset * w, 0.0);
            }
            let h = FockOperator::hermitian(h)?;
            let blocks = eigh_blocks(&h, &kept_charges)?;
            let kept_pops = match &kept_state {
                FockState::Pure(psi) => evolve_pure_blocks(&blocks, psi, t)
                    .iter()
                    .map(|z| z.norm_sqr())
                    .collect::<Vec<_>>(),
                mixed => assemble_blocks(keep.len(), &blocks)
                    .evolve(mixed, t)?
                    .populations(),
            };
            let mut pops = vec![0.0; cut.dim()];
            for (&i, p) in keep.iter().zip(kept_pops) {
                pops[i] = p;
            }
            let up: f64 = pops[half..].iter().sum();
            Ok((up.clamp(0.0, 1.0), edge_population(&cut, coupled, k, &pops)))
        })
        .collect::<Result<_>>()?;

    let edge = points.iter().map(|p| p.1).fold(0.0, f64::max);
    if edge > crate::prep::MAX_TAIL {
        return Err(Error::Truncation {
            tail: edge,
            limit: crate::prep::MAX_TAIL,
            n_max: cut.n_b_max,
            suggested: cut.n_b_max + 4,
        });
    }
    Spectrum::new(grid.to_vec(), points.into_iter().map(|p| p.0).collect())
}

/// `P(up)` over two-mode detuning and laser detuning, as in a sideband scan
/// repeated while the trap is retuned through the resonance.
#[derive(Clone, Debug, Serialize)]
pub struct SidebandMap {
    /// rad/s
    pub delta_grid: Vec<f64>,
    /// Laser detuning from the bare `k`-th axial sideband, rad/s.
    pub laser_grid: Vec<f64>,
    /// `p_up[i][j]` at `delta_grid[i]`, `laser_grid[j]`.
    pub p_up: Vec<Vec<f64>>,
}

/// Driven scans of `|0_a, n_b>` at every two-mode detuning in
/// `delta_grid` (each retuning `omega_x`). The pulse length is the bare
/// pi time of the drive, the same at every detuning.
pub fn sideband_map(
    cfg: &crate::trap::TrapConfig,
    cutoff: FockCutoff,
    n_b: usize,
    drive: &DriveParams,
    delta_grid: &[f64],
    laser_grid: &[f64],
) -> Result<SidebandMap> {
    if delta_grid.is_empty() {
        return Err(Error::InvalidParameter(
            "empty two-mode detuning grid".into(),
        ));
    }
    let cut = cutoff.with_qubit(true);
    let radial = FockState::basis(cut.dim_b(), n_b)?;
    let initial = axial_ground_with(&cut, &radial)?;
    let p_up = delta_grid
        .iter()
        .map(|&delta| {
            let trap = crate::trap::detune_to(cfg, delta)?;
            let params = CoupledModeParams::from_trap(&trap, cut)?;
            Ok(driven_scan(&initial, &params, drive, laser_grid, 0.0)?.p_up)
        })
        .collect::<Result<_>>()?;
    Ok(SidebandMap {
        delta_grid: delta_grid.to_vec(),
        laser_grid: laser_grid.to_vec(),
        p_up,
    })
}

/// Replaces each point by `Binomial(shots, p) / shots`; point `i` draws from
/// stream `i` of `seed`.
pub fn add_shot_noise(spec: &Spectrum, shots: u32, seed: u64) -> Result<Spectrum> {
    if shots == 0 {
        return Err(Error::InvalidParameter("shots must be >= 1".into()));
    }
    let p_up = spec
        .p_up
        .par_iter()
        .enumerate()
        .map(|(i, &p)| {
            let mut rng = rng::stream(seed, i as u64);
            let dist = Binomial::new(u64::from(shots), p.clamp(0.0, 1.0))
                .map_err(|e| Error::InvalidParameter(e.to_string()))?;
            Ok(dist.sample(&mut rng) as f64 / f64::from(shots))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Spectrum {
        detuning: spec.detuning.clone(),
        p_up,
        shots: Some(shots),
        seed: Some(seed),
    })
}

/// Grid point with the largest `p_up` inside `[lo, hi]`.
pub fn argmax_in(spec: &Spectrum, lo: f64, hi: f64) -> Option<(f64, f64)> {
    spec.detuning
        .iter()
        .zip(&spec.p_up)
        .filter(|(d, _)| (lo..=hi).contains(*d))
        .map(|(d, p)| (*d, *p))
        .max_by(|a, b| a.1.total_cmp(&b.1))
}

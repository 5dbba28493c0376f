//! Fitting blue-sideband spectra with the multi-peak model
//! `p(D) = g + eta sum_n p_n f(D - omega_n)`.
//!
//! Peak centers `omega_n` are inputs (from the dynamics module or a
//! calibration scan). Three fits are offered: a single peak center, a
//! parametric state family, and a free distribution constrained to the
//! probability simplex. Several datasets can also share one `eta`.
//!
//! With known shot counts residuals are weighted by the binomial standard
//! deviation of the current model, `sqrt(max(p (1 - p) / shots, 1e-4))`,
//! re-evaluated a few times (iteratively reweighted least squares).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::linspace;
use crate::error::{Error, Result};
use crate::lm::{self, LeastSquares, LmOptions, LmReport};
use crate::prep::{distribution, PhononDistribution, StateSpec};
use crate::quantum::C64;
use crate::spectroscopy::{lineshape, lineshape_derivative, peaks_resolved, DriveParams, Spectrum};

/// Variance floor of the binomial weights.
pub const WEIGHT_FLOOR: f64 = 1e-4;
/// Reweighting passes when shot counts are known.
const IRLS_PASSES: usize = 4;
/// Bounds on the detection parameters.
pub const ETA_BOUNDS: (f64, f64) = (0.0, 1.0);
pub const G_BOUNDS: (f64, f64) = (0.0, 0.5);

fn sigmas(model: &[f64], shots: Option<u32>) -> Vec<f64> {
    match shots {
        Some(n) => model
            .iter()
            .map(|&p| {
                let p = p.clamp(0.0, 1.0);
                (p * (1.0 - p) / f64::from(n)).max(WEIGHT_FLOOR).sqrt()
            })
            .collect(),
        None => vec![1.0; model.len()],
    }
}

/// Covariance scale: 1 for binomial weights, the residual variance for unit
/// weights.
fn variance_scale(objective: f64, n_data: usize, n_free: usize, shots: Option<u32>) -> f64 {
    match shots {
        Some(_) => 1.0,
        None => objective / (n_data.saturating_sub(n_free).max(1)) as f64,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PeakFit {
    /// rad/s
    pub center: f64,
    /// 1 sigma of `center`, rad/s
    pub sigma: f64,
    pub eta: f64,
    pub g: f64,
    pub converged: bool,
    pub iterations: usize,
}

struct PeakProblem<'a> {
    d: &'a [f64],
    y: &'a [f64],
    sigma: Vec<f64>,
    drive: DriveParams,
}

impl PeakProblem<'_> {
    fn model(&self, p: &[f64]) -> Vec<f64> {
        self.d
            .iter()
            .map(|&d| p[2] + p[1] * lineshape(d - p[0], &self.drive))
            .collect()
    }
}

impl LeastSquares for PeakProblem<'_> {
    fn n_params(&self) -> usize {
        3
    }

    fn residuals(&self, p: &[f64]) -> DVector<f64> {
        let m = self.model(p);
        DVector::from_iterator(
            self.y.len(),
            (0..self.y.len()).map(|i| (self.y[i] - m[i]) / self.sigma[i]),
        )
    }

    fn jacobian(&self, p: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.d.len(), 3, |i, j| {
            let x = self.d[i] - p[0];
            let v = match j {
                0 => p[1] * lineshape_derivative(x, &self.drive),
                1 => -lineshape(x, &self.drive),
                _ => -1.0,
            };
            v / self.sigma[i]
        })
    }

    fn lower_bounds(&self) -> Vec<f64> {
        vec![f64::NEG_INFINITY, ETA_BOUNDS.0, G_BOUNDS.0]
    }

    fn upper_bounds(&self) -> Vec<f64> {
        vec![f64::INFINITY, ETA_BOUNDS.1, G_BOUNDS.1]
    }
}

/// Fits `g + eta f(D - c)` to the points with detuning in `window`.
/// `converged` is false when the optimizer stalls, when `c` ends outside the
/// window, or when the data maximum sits on the window edge.
pub fn fit_peak_center(
    spec: &Spectrum,
    drive: &DriveParams,
    window: (f64, f64),
) -> Result<PeakFit> {
    spec.validate()?;
    drive.validate()?;
    let (lo, hi) = window;
    let idx: Vec<usize> = (0..spec.len())
        .filter(|&i| (lo..=hi).contains(&spec.detuning[i]))
        .collect();
    if idx.len() < 7 {
        return Err(Error::InvalidParameter(format!(
            "peak window holds {} grid points, need at least 7",
            idx.len()
        )));
    }
    let d: Vec<f64> = idx.iter().map(|&i| spec.detuning[i]).collect();
    let y: Vec<f64> = idx.iter().map(|&i| spec.p_up[i]).collect();
    let (imax, &ymax) = y
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty window");
    let ymin = y.iter().copied().fold(f64::INFINITY, f64::min);
    if ymax - ymin < 1e-9 {
        return Err(Error::DegenerateWindow(format!(
            "p_up is flat ({ymin:.6}) over [{lo:.3}, {hi:.3}] rad/s"
        )));
    }

    let mut params = vec![
        d[imax],
        (ymax - ymin).clamp(1e-3, ETA_BOUNDS.1),
        ymin.clamp(G_BOUNDS.0, G_BOUNDS.1),
    ];
    let mut problem = PeakProblem {
        d: &d,
        y: &y,
        sigma: sigmas(&y, spec.shots),
        drive: *drive,
    };
    problem.sigma = sigmas(&problem.model(&params), spec.shots);
    let mut report = lm::minimize(&problem, &params, LmOptions::default());
    let mut iterations = report.iterations;
    if spec.shots.is_some() {
        for _ in 1..IRLS_PASSES {
            params = report.params.clone();
            problem.sigma = sigmas(&problem.model(&params), spec.shots);
            report = lm::minimize(&problem, &params, LmOptions::default());
            iterations += report.iterations;
        }
    }
    let scale = variance_scale(report.objective, d.len(), 3, spec.shots);
    let sigma = report
        .covariance(&[0, 1, 2])
        .map(|c| (c[(0, 0)] * scale).sqrt())
        .unwrap_or(f64::INFINITY);
    let center = report.params[0];
    let inside = (lo..=hi).contains(&center);
    let interior_max = imax > 0 && imax + 1 < d.len();
    Ok(PeakFit {
        center,
        sigma,
        eta: report.params[1],
        g: report.params[2],
        converged: report.converged && inside && interior_max,
        iterations,
    })
}

/// Parametric state families that can be fitted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Coherent,
    Thermal,
    SqueezedVacuum,
    SqueezedThermal,
    SqueezedFock,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Coherent,
        Family::Thermal,
        Family::SqueezedVacuum,
        Family::SqueezedThermal,
        Family::SqueezedFock,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Coherent => "coherent",
            Self::Thermal => "thermal",
            Self::SqueezedVacuum => "squeezed_vacuum",
            Self::SqueezedThermal => "squeezed_thermal",
            Self::SqueezedFock => "squeezed_fock",
        }
    }

    /// Continuous parameters. Squeezed Fock also carries the discrete `n`.
    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            Self::Coherent => &["alpha_abs"],
            Self::Thermal => &["nbar"],
            Self::SqueezedVacuum | Self::SqueezedFock => &["r_abs"],
            Self::SqueezedThermal => &["nbar", "r_abs"],
        }
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Self::Coherent => (vec![0.0], vec![6.0]),
            Self::Thermal => (vec![0.0], vec![50.0]),
            Self::SqueezedVacuum | Self::SqueezedFock => (vec![0.0], vec![2.0]),
            Self::SqueezedThermal => (vec![0.0, 0.0], vec![50.0, 2.0]),
        }
    }

    /// Coarse starting grid over the parameter domain.
    fn start_grid(&self) -> Vec<Vec<f64>> {
        let log_nbar: Vec<f64> = linspace(-2.0, 1.3, 34)
            .into_iter()
            .map(|x| 10f64.powf(x))
            .collect();
        match self {
            Self::Coherent => linspace(0.05, 3.5, 70)
                .into_iter()
                .map(|a| vec![a])
                .collect(),
            Self::Thermal => log_nbar.into_iter().map(|n| vec![n]).collect(),
            Self::SqueezedVacuum | Self::SqueezedFock => linspace(0.02, 1.6, 40)
                .into_iter()
                .map(|r| vec![r])
                .collect(),
            Self::SqueezedThermal => {
                let nbar: Vec<f64> = linspace(-2.0, 1.0, 13)
                    .into_iter()
                    .map(|x| 10f64.powf(x))
                    .collect();
                let r = linspace(0.02, 1.4, 15);
                nbar.iter()
                    .flat_map(|&n| r.iter().map(move |&r| vec![n, r]))
                    .collect()
            }
        }
    }

    pub fn spec(&self, params: &[f64], n: usize) -> StateSpec {
        let r = |x: f64| C64::new(x, 0.0);
        match self {
            Self::Coherent => StateSpec::Coherent {
                alpha: r(params[0]),
            },
            Self::Thermal => StateSpec::Thermal { nbar: params[0] },
            Self::SqueezedVacuum => StateSpec::SqueezedVacuum { r: r(params[0]) },
            Self::SqueezedThermal => StateSpec::SqueezedThermal {
                nbar: params[0],
                r: r(params[1]),
            },
            Self::SqueezedFock => StateSpec::SqueezedFock { n, r: r(params[0]) },
        }
    }

    /// Continuous parameters and discrete `n` of a spec in this family.
    pub fn params_of(&self, spec: &StateSpec) -> Option<(Vec<f64>, usize)> {
        match (self, *spec) {
            (Self::Coherent, StateSpec::Coherent { alpha }) => Some((vec![alpha.norm()], 0)),
            (Self::Thermal, StateSpec::Thermal { nbar }) => Some((vec![nbar], 0)),
            (Self::SqueezedVacuum, StateSpec::SqueezedVacuum { r }) => Some((vec![r.norm()], 0)),
            (Self::SqueezedThermal, StateSpec::SqueezedThermal { nbar, r }) => {
                Some((vec![nbar, r.norm()], 0))
            }
            (Self::SqueezedFock, StateSpec::SqueezedFock { n, r }) => Some((vec![r.norm()], n)),
            _ => None,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                Error::Parse(format!(
                    "unknown family '{s}'; expected one of coherent, thermal, squeezed_vacuum, squeezed_thermal, squeezed_fock"
                ))
            })
    }
}

/// Parameter covariance with the parameter names labelling rows/columns.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Covariance {
    pub names: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

impl Covariance {
    fn new(names: Vec<String>, m: &DMatrix<f64>) -> Self {
        Self {
            names,
            matrix: m.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Sub-matrix for the named parameters.
    pub fn select(&self, names: &[&str]) -> Option<DMatrix<f64>> {
        let idx: Vec<usize> = names.iter().map(|n| self.index(n)).collect::<Option<_>>()?;
        Some(DMatrix::from_fn(idx.len(), idx.len(), |i, j| {
            self.matrix[idx[i]][idx[j]]
        }))
    }

    fn sigmas(&self) -> BTreeMap<String, f64> {
        self.names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), self.matrix[i][i].max(0.0).sqrt()))
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitResult {
    /// Family name, or "free".
    pub family: String,
    pub params: BTreeMap<String, f64>,
    /// 1 sigma of the fitted parameters, including `eta` and `g`. Empty when
    /// the fit is degenerate.
    pub param_sigma: BTreeMap<String, f64>,
    pub covariance: Option<Covariance>,
    pub p_hat: PhononDistribution,
    pub eta_hat: f64,
    pub g_hat: f64,
    /// RMS of `p_up - model`, unweighted.
    pub residual_rms: f64,
    pub residuals: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Softest direction of the curvature when it is numerically singular.
    pub degenerate_direction: Option<BTreeMap<String, f64>>,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn is_degenerate(&self) -> bool {
        self.degenerate_direction.is_some()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FitOptions {
    /// Fixed detection efficiency; fitted when `None`.
    pub eta: Option<f64>,
    /// Squeezed Fock fits scan `n = 0..=n_scan_max`.
    pub n_scan_max: usize,
    pub lm: LmOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            eta: None,
            n_scan_max: 5,
            lm: LmOptions::default(),
        }
    }
}

/// Peaks whose lineshape stays below this everywhere on the grid count as
/// not sampled; their columns are dropped from the model.
pub const VISIBILITY_FLOOR: f64 = 1e-2;

/// Per-peak lineshape columns `B[i][n] = f(D_i - omega_n)`, with unsampled
/// peaks zeroed.
fn peak_basis(detuning: &[f64], centers: &[f64], drive: &DriveParams) -> DMatrix<f64> {
    let mut b = DMatrix::from_fn(detuning.len(), centers.len(), |i, n| {
        lineshape(detuning[i] - centers[n], drive)
    });
    for mut col in b.column_iter_mut() {
        if col.max() < VISIBILITY_FLOOR {
            col.fill(0.0);
        }
    }
    b
}

fn check_eta(eta: Option<f64>) -> Result<()> {
    match eta {
        Some(e) if !(ETA_BOUNDS.0..=ETA_BOUNDS.1).contains(&e) => Err(Error::InvalidParameter(
            format!("fixed eta must lie in [0, 1], got {e}"),
        )),
        _ => Ok(()),
    }
}

fn scan_warnings(basis: &DMatrix<f64>, centers: &[f64], drive: &DriveParams) -> Vec<String> {
    let mut out = Vec::new();
    if !peaks_resolved(centers, drive) {
        out.push(
            "adjacent peak spacing is below the lineshape FWHM; peaks are not resolved".into(),
        );
    }
    for (n, col) in basis.column_iter().enumerate() {
        if col.max() == 0.0 {
            out.push(format!("peak n = {n} is not sampled by the scan"));
        }
    }
    out
}

struct ParametricProblem<'a> {
    family: Family,
    n: usize,
    basis: &'a DMatrix<f64>,
    y: &'a [f64],
    sigma: Vec<f64>,
    eta: Option<f64>,
}

impl ParametricProblem<'_> {
    fn n_family(&self) -> usize {
        self.family.param_names().len()
    }

    fn populations(&self, params: &[f64]) -> Result<Vec<f64>> {
        let n_max = self.basis.ncols() - 1;
        Ok(distribution(&self.family.spec(&params[..self.n_family()], self.n), n_max)?.p)
    }

    fn model(&self, params: &[f64]) -> Option<Vec<f64>> {
        let k = self.n_family();
        let p = self.populations(params).ok()?;
        let signal = self.basis * DVector::from_vec(p);
        Some(
            signal
                .iter()
                .map(|s| params[k + 1] + params[k] * s)
                .collect(),
        )
    }
}

impl LeastSquares for ParametricProblem<'_> {
    fn n_params(&self) -> usize {
        self.n_family() + 2
    }

    fn residuals(&self, params: &[f64]) -> DVector<f64> {
        match self.model(params) {
            Some(m) => DVector::from_iterator(
                self.y.len(),
                (0..self.y.len()).map(|i| (self.y[i] - m[i]) / self.sigma[i]),
            ),
            None => DVector::from_element(self.y.len(), f64::INFINITY),
        }
    }

    fn lower_bounds(&self) -> Vec<f64> {
        let mut lo = self.family.bounds().0;
        lo.push(self.eta.unwrap_or(ETA_BOUNDS.0));
        lo.push(G_BOUNDS.0);
        lo
    }

    fn upper_bounds(&self) -> Vec<f64> {
        let mut hi = self.family.bounds().1;
        hi.push(self.eta.unwrap_or(ETA_BOUNDS.1));
        hi.push(G_BOUNDS.1);
        hi
    }
}

/// Best `(eta, g)` for a fixed signal shape by linear least squares,
/// clamped to the bounds.
fn linear_detection(signal: &[f64], y: &[f64], eta: Option<f64>) -> (f64, f64, f64) {
    let n = y.len() as f64;
    let (eta, g) = match eta {
        Some(e) => {
            let g = y.iter().zip(signal).map(|(y, s)| y - e * s).sum::<f64>() / n;
            (e, g.clamp(G_BOUNDS.0, G_BOUNDS.1))
        }
        None => {
            let ms = signal.iter().sum::<f64>() / n;
            let my = y.iter().sum::<f64>() / n;
            let sxx: f64 = signal.iter().map(|s| (s - ms).powi(2)).sum();
            let sxy: f64 = signal.iter().zip(y).map(|(s, y)| (s - ms) * (y - my)).sum();
            let eta = if sxx > 0.0 {
                (sxy / sxx).clamp(ETA_BOUNDS.0, ETA_BOUNDS.1)
            } else {
                0.0
            };
            (eta, (my - eta * ms).clamp(G_BOUNDS.0, G_BOUNDS.1))
        }
    };
    let cost = y
        .iter()
        .zip(signal)
        .map(|(y, s)| (y - g - eta * s).powi(2))
        .sum();
    (eta, g, cost)
}

fn initial_guess(problem: &ParametricProblem) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for candidate in problem.family.start_grid() {
        let Ok(p) = problem.populations(&candidate) else {
            continue;
        };
        let signal: Vec<f64> = (problem.basis * DVector::from_vec(p))
            .iter()
            .copied()
            .collect();
        let (eta, g, cost) = linear_detection(&signal, problem.y, problem.eta);
        if best.as_ref().is_none_or(|b| cost < b.0) {
            let mut params = candidate;
            params.extend([eta, g]);
            best = Some((cost, params));
        }
    }
    best.expect("non-empty start grid").1
}

fn run_irls(
    problem: &mut ParametricProblem,
    start: Vec<f64>,
    shots: Option<u32>,
    opts: LmOptions,
) -> (LmReport, usize) {
    if let Some(m) = problem.model(&start) {
        problem.sigma = sigmas(&m, shots);
    }
    let mut report = lm::minimize(&*problem, &start, opts);
    let mut iterations = report.iterations;
    if shots.is_some() {
        for _ in 1..IRLS_PASSES {
            let params = report.params.clone();
            if let Some(m) = problem.model(&params) {
                problem.sigma = sigmas(&m, shots);
            }
            report = lm::minimize(&*problem, &params, opts);
            iterations += report.iterations;
        }
    }
    (report, iterations)
}

/// Fits `family` parameters together with `eta` (unless fixed) and `g`.
/// `params0`, if given, holds the family parameters to start from; a coarse
/// grid search is used otherwise. Squeezed Fock fits try every
/// `n <= opts.n_scan_max` and keep the best.
pub fn fit_parametric(
    spec: &Spectrum,
    family: Family,
    params0: Option<&[f64]>,
    centers: &[f64],
    drive: &DriveParams,
    opts: FitOptions,
) -> Result<FitResult> {
    spec.validate()?;
    drive.validate()?;
    check_eta(opts.eta)?;
    if centers.is_empty() {
        return Err(Error::InvalidParameter(
            "need at least one peak center".into(),
        ));
    }
    let k = family.param_names().len();
    if let Some(p0) = params0 {
        if p0.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: p0.len(),
            });
        }
    }
    let basis = peak_basis(&spec.detuning, centers, drive);
    let n_values: Vec<usize> = match family {
        Family::SqueezedFock => (0..=opts.n_scan_max.min(centers.len() - 1)).collect(),
        _ => vec![0],
    };

    let mut best: Option<(LmReport, usize, usize, ParametricProblem)> = None;
    for n in n_values {
        let mut problem = ParametricProblem {
            family,
            n,
            basis: &basis,
            y: &spec.p_up,
            sigma: vec![1.0; spec.len()],
            eta: opts.eta,
        };
        let start = match params0 {
            Some(p0) => {
                let mut s = p0.to_vec();
                let signal: Vec<f64> = match problem.populations(&s) {
                    Ok(p) => (&basis * DVector::from_vec(p)).iter().copied().collect(),
                    Err(_) => vec![0.0; spec.len()],
                };
                let (eta, g, _) = linear_detection(&signal, &spec.p_up, opts.eta);
                s.extend([eta, g]);
                s
            }
            None => initial_guess(&problem),
        };
        let (report, iterations) = run_irls(&mut problem, start, spec.shots, opts.lm);
        if best
            .as_ref()
            .is_none_or(|b| report.objective < b.0.objective)
        {
            best = Some((report, iterations, n, problem));
        }
    }
    let (report, iterations, n, problem) = best.expect("at least one n");

    let mut names: Vec<String> = family.param_names().iter().map(|s| s.to_string()).collect();
    names.extend(["eta".to_string(), "g".to_string()]);
    let free: Vec<usize> = (0..k + 2)
        .filter(|&i| !(i == k && opts.eta.is_some()))
        .collect();
    let scale = variance_scale(report.objective, spec.len(), free.len(), spec.shots);
    let degenerate = report.degeneracy(&free).map(|dir| {
        free.iter()
            .map(|&i| (names[i].clone(), dir[i]))
            .collect::<BTreeMap<_, _>>()
    });
    let covariance = match degenerate {
        Some(_) => None,
        None => report.covariance(&free).map(|c| {
            let sub =
                DMatrix::from_fn(free.len(), free.len(), |i, j| c[(free[i], free[j])] * scale);
            Covariance::new(free.iter().map(|&i| names[i].clone()).collect(), &sub)
        }),
    };

    let p_final = &report.params;
    let model = problem.model(p_final).expect("optimum is a valid state");
    let residuals: Vec<f64> = spec.p_up.iter().zip(&model).map(|(y, m)| y - m).collect();
    let mut params: BTreeMap<String, f64> =
        (0..k).map(|i| (names[i].clone(), p_final[i])).collect();
    if family == Family::SqueezedFock {
        params.insert("n".into(), n as f64);
    }
    let p_hat = distribution(&family.spec(&p_final[..k], n), centers.len() - 1)?;
    Ok(FitResult {
        family: family.name().into(),
        params,
        param_sigma: covariance
            .as_ref()
            .map(Covariance::sigmas)
            .unwrap_or_default(),
        covariance,
        p_hat,
        eta_hat: p_final[k],
        g_hat: p_final[k + 1],
        residual_rms: rms(&residuals),
        residuals,
        converged: report.converged,
        iterations,
        degenerate_direction: degenerate,
        warnings: scan_warnings(&basis, centers, drive),
    })
}

fn rms(r: &[f64]) -> f64 {
    (r.iter().map(|x| x * x).sum::<f64>() / r.len().max(1) as f64).sqrt()
}

#[derive(Clone, Copy, Debug)]
pub struct FreeFitOptions {
    /// Fixed detection efficiency. When `None`, `eta` is fitted under the
    /// assumption that the populations in the scan sum to one.
    pub eta: Option<f64>,
    pub max_iterations: usize,
}

impl Default for FreeFitOptions {
    fn default() -> Self {
        Self {
            eta: None,
            max_iterations: 100_000,
        }
    }
}

/// Euclidean projection onto `{q >= 0, sum q <= cap}`.
fn project_capped_simplex(q: &mut [f64], cap: f64) {
    for x in q.iter_mut() {
        *x = x.max(0.0);
    }
    if q.iter().sum::<f64>() <= cap {
        return;
    }
    let mut sorted: Vec<f64> = q.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut theta = 0.0;
    for (i, &v) in sorted.iter().enumerate() {
        acc += v;
        let t = (acc - cap) / (i + 1) as f64;
        if v - t > 0.0 {
            theta = t;
        }
    }
    for x in q.iter_mut() {
        *x = (*x - theta).max(0.0);
    }
}

fn project(theta: &mut [f64], cap: f64) {
    let n = theta.len() - 1;
    project_capped_simplex(&mut theta[..n], cap);
    theta[n] = theta[n].clamp(G_BOUNDS.0, G_BOUNDS.1);
}

/// `min |W (A theta - y)|^2` over `theta = (q, g)` with `q` in the capped
/// simplex and `g` in its bounds, by accelerated projected gradient with
/// restarts. Stops when the projected-gradient step at the iterate falls
/// below `1e-12`, or when rounding stalls a plain step with the step still
/// below `1e-8`; returns the solution, the iteration count and whether
/// that happened.
fn constrained_least_squares(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    cap: f64,
    max_iterations: usize,
) -> (DVector<f64>, usize, bool) {
    let normal = a.transpose() * a;
    let rhs = a.transpose() * y;
    let lipschitz = normal.symmetric_eigenvalues().max().max(1e-300);
    let step = 1.0 / lipschitz;
    let objective = |t: &DVector<f64>| (a * t - y).norm_squared();
    let stationarity = |t: &DVector<f64>| {
        let mut moved = t - (&normal * t - &rhs) * step;
        project(moved.as_mut_slice(), cap);
        (moved - t).amax()
    };

    let mut x = DVector::zeros(a.ncols());
    x[a.ncols() - 1] = y.mean().clamp(G_BOUNDS.0, G_BOUNDS.1);
    let mut z = x.clone();
    let mut momentum: f64 = 1.0;
    let mut iterations = 0;
    let mut f_prev = objective(&x);
    let mut stationary = false;
    while iterations < max_iterations {
        iterations += 1;
        let grad = &normal * &z - &rhs;
        let mut next = &z - grad * step;
        project(next.as_mut_slice(), cap);
        let f_next = objective(&next);
        if f_next > f_prev {
            if momentum == 1.0 {
                // a plain projected step from x no longer decreases the
                // objective: x is a fixed point up to rounding
                stationary = stationarity(&x) < 1e-8;
                break;
            }
            // restart the momentum when the objective goes up
            z = x.clone();
            momentum = 1.0;
            continue;
        }
        let m_next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        z = &next + (&next - &x) * ((momentum - 1.0) / m_next);
        x = next;
        momentum = m_next;
        f_prev = f_next;
        if stationarity(&x) < 1e-12 {
            stationary = true;
            break;
        }
    }
    (
        polish(&normal, &rhs, x, cap, &objective),
        iterations,
        stationary,
    )
}

/// Re-solves the normal equations on the variables that are strictly inside
/// their bounds; keeps the result if it stays feasible and does not increase
/// the objective.
fn polish(
    normal: &DMatrix<f64>,
    rhs: &DVector<f64>,
    x: DVector<f64>,
    cap: f64,
    objective: &dyn Fn(&DVector<f64>) -> f64,
) -> DVector<f64> {
    let n = x.len() - 1;
    if x.rows(0, n).sum() >= cap - 1e-12 {
        return x;
    }
    let free: Vec<usize> = (0..n)
        .filter(|&i| x[i] > 0.0)
        .chain((x[n] > G_BOUNDS.0 && x[n] < G_BOUNDS.1).then_some(n))
        .collect();
    if free.is_empty() {
        return x;
    }
    let sub = DMatrix::from_fn(free.len(), free.len(), |i, j| normal[(free[i], free[j])]);
    let sub_rhs = DVector::from_fn(free.len(), |i, _| {
        rhs[free[i]]
            - (0..=n)
                .filter(|j| !free.contains(j))
                .map(|j| normal[(free[i], j)] * x[j])
                .sum::<f64>()
    });
    let Some(sol) = sub.cholesky().map(|c| c.solve(&sub_rhs)) else {
        return x;
    };
    let mut candidate = x.clone();
    for (i, &f) in free.iter().enumerate() {
        candidate[f] = sol[i];
    }
    let feasible = candidate.rows(0, n).iter().all(|&q| q >= 0.0)
        && candidate.rows(0, n).sum() <= cap
        && (G_BOUNDS.0..=G_BOUNDS.1).contains(&candidate[n]);
    if feasible && objective(&candidate) <= objective(&x) {
        candidate
    } else {
        x
    }
}

/// Fits one population per peak in `centers`, plus `g` and (unless fixed)
/// `eta`, with `p` constrained to the probability simplex.
pub fn fit_free_distribution(
    spec: &Spectrum,
    centers: &[f64],
    drive: &DriveParams,
    opts: FreeFitOptions,
) -> Result<FitResult> {
    spec.validate()?;
    drive.validate()?;
    check_eta(opts.eta)?;
    if centers.is_empty() {
        return Err(Error::InvalidParameter(
            "need at least one peak center".into(),
        ));
    }
    let n_peaks = centers.len();
    let basis = peak_basis(&spec.detuning, centers, drive);
    let design = basis.clone().insert_column(n_peaks, 1.0);
    let y = DVector::from_column_slice(&spec.p_up);
    let cap = opts.eta.unwrap_or(ETA_BOUNDS.1);

    let mut sigma = vec![1.0; spec.len()];
    let mut theta = DVector::zeros(n_peaks + 1);
    let mut iterations = 0;
    let mut converged = true;
    let passes = if spec.shots.is_some() { IRLS_PASSES } else { 1 };
    for pass in 0..passes {
        if pass > 0 {
            let model = &design * &theta;
            sigma = sigmas(model.as_slice(), spec.shots);
        }
        let w = DVector::from_iterator(sigma.len(), sigma.iter().map(|s| 1.0 / s));
        let a = DMatrix::from_fn(design.nrows(), design.ncols(), |i, j| design[(i, j)] * w[i]);
        let wy = y.component_mul(&w);
        let (sol, it, stationary) = constrained_least_squares(&a, &wy, cap, opts.max_iterations);
        theta = sol;
        iterations += it;
        converged &= stationary;
    }

    let q: Vec<f64> = theta.rows(0, n_peaks).iter().copied().collect();
    let g_hat = theta[n_peaks];
    let total: f64 = q.iter().sum();
    // below this the signal is indistinguishable from background
    let total = if total < 1e-9 { 0.0 } else { total };
    let eta_hat = opts.eta.unwrap_or(total);
    let p: Vec<f64> = if eta_hat > 0.0 && total > 0.0 {
        q.iter().map(|x| x / eta_hat).collect()
    } else {
        vec![0.0; n_peaks]
    };

    // curvature in (q, g), mapped to (p, eta, g)
    let w2 = DVector::from_iterator(sigma.len(), sigma.iter().map(|s| s.powi(-2)));
    let weighted = DMatrix::from_fn(design.nrows(), design.ncols(), |i, j| {
        design[(i, j)] * w2[i]
    });
    let normal = design.transpose() * weighted;
    let model = &design * &theta;
    let residuals: Vec<f64> = (&y - &model).iter().copied().collect();
    let objective: f64 = residuals
        .iter()
        .zip(&sigma)
        .map(|(r, s)| (r / s).powi(2))
        .sum();
    let n_free = n_peaks + 1;
    let scale = variance_scale(objective, spec.len(), n_free, spec.shots);

    // d(p, eta, g) / d(q, g)
    let out_dim = n_peaks + 2;
    let mut jac = DMatrix::zeros(out_dim, n_peaks + 1);
    for i in 0..n_peaks {
        for j in 0..n_peaks {
            jac[(i, j)] = match opts.eta {
                Some(e) => f64::from(u8::from(i == j)) / e.max(f64::MIN_POSITIVE),
                None if eta_hat > 0.0 => (f64::from(u8::from(i == j)) - p[i]) / eta_hat,
                None => 0.0,
            };
        }
        if opts.eta.is_none() {
            jac[(n_peaks, i)] = 1.0;
        }
    }
    jac[(n_peaks + 1, n_peaks)] = 1.0;

    let mut names: Vec<String> = (0..n_peaks).map(|n| format!("p{n}")).collect();
    names.extend(["eta".to_string(), "g".to_string()]);
    let all: Vec<usize> = (0..=n_peaks).collect();
    let no_signal = opts.eta.is_none() && eta_hat == 0.0;
    let degenerate = if no_signal {
        // with eta = 0 the model does not depend on p at all
        let w = 1.0 / (n_peaks as f64).sqrt();
        Some(
            names[..n_peaks]
                .iter()
                .map(|n| (n.clone(), w))
                .collect::<BTreeMap<_, _>>(),
        )
    } else {
        lm::degenerate_direction(&normal, &all).map(|dir| {
            let v = &jac * DVector::from_vec(dir);
            let norm = v.norm().max(f64::MIN_POSITIVE);
            names
                .iter()
                .enumerate()
                .filter(|&(i, _)| !(i == n_peaks && opts.eta.is_some()))
                .map(|(i, n)| (n.clone(), v[i] / norm))
                .collect::<BTreeMap<_, _>>()
        })
    };
    let covariance = match degenerate {
        Some(_) => None,
        None => lm::covariance_from_normal(&normal, &all).map(|c| {
            let full = &jac * (c * scale) * jac.transpose();
            let keep: Vec<usize> = (0..out_dim)
                .filter(|&i| !(i == n_peaks && opts.eta.is_some()))
                .collect();
            let sub = DMatrix::from_fn(keep.len(), keep.len(), |i, j| full[(keep[i], keep[j])]);
            Covariance::new(keep.iter().map(|&i| names[i].clone()).collect(), &sub)
        }),
    };

    let mut warnings = scan_warnings(&basis, centers, drive);
    if no_signal {
        warnings.push("no sideband signal above background; populations are undetermined".into());
    }
    Ok(FitResult {
        family: "free".into(),
        params: names[..n_peaks]
            .iter()
            .cloned()
            .zip(p.iter().copied())
            .collect(),
        param_sigma: covariance
            .as_ref()
            .map(Covariance::sigmas)
            .unwrap_or_default(),
        covariance,
        p_hat: PhononDistribution::from_truncated(p)?,
        eta_hat,
        g_hat,
        residual_rms: rms(&residuals),
        residuals,
        converged,
        iterations,
        degenerate_direction: degenerate,
        warnings,
    })
}

/// What to fit to one dataset of a shared-`eta` fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitModel {
    Free,
    Family(Family),
}

impl FromStr for FitModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "free" {
            Ok(Self::Free)
        } else {
            s.parse().map(Self::Family)
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SharedEtaFit {
    pub eta: f64,
    /// From the curvature of the profiled objective; `None` when flat.
    pub eta_sigma: Option<f64>,
    /// Weighted sum of squared residuals over all datasets at `eta`.
    pub objective: f64,
    /// Per-dataset fits with `eta` held at the shared value. Their parameter
    /// uncertainties are conditional on `eta`.
    pub fits: Vec<FitResult>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

fn weighted_objective(spec: &Spectrum, fit: &FitResult) -> f64 {
    let model: Vec<f64> = spec
        .p_up
        .iter()
        .zip(&fit.residuals)
        .map(|(y, r)| y - r)
        .collect();
    fit.residuals
        .iter()
        .zip(sigmas(&model, spec.shots))
        .map(|(r, s)| (r / s).powi(2))
        .sum()
}

fn fit_one(
    spec: &Spectrum,
    model: FitModel,
    centers: &[f64],
    drive: &DriveParams,
    eta: Option<f64>,
    opts: FitOptions,
) -> Result<FitResult> {
    match model {
        FitModel::Free => fit_free_distribution(
            spec,
            centers,
            drive,
            FreeFitOptions {
                eta,
                ..Default::default()
            },
        ),
        FitModel::Family(f) => {
            fit_parametric(spec, f, None, centers, drive, FitOptions { eta, ..opts })
        }
    }
}

/// Fits several datasets with one detection efficiency. `eta` is found by
/// minimizing the summed weighted objective, each dataset being refitted at
/// fixed `eta` (a profile over `eta`); `g` and the state parameters stay per
/// dataset.
pub fn fit_shared_eta(
    specs: &[Spectrum],
    models: &[FitModel],
    centers: &[f64],
    drive: &DriveParams,
    opts: FitOptions,
) -> Result<SharedEtaFit> {
    if specs.is_empty() || specs.len() != models.len() {
        return Err(Error::InvalidParameter(format!(
            "shared-eta fit needs one model per dataset, got {} datasets and {} models",
            specs.len(),
            models.len()
        )));
    }
    for s in specs {
        s.validate()?;
    }
    let fits_at = |eta: f64| -> Result<Vec<FitResult>> {
        specs
            .par_iter()
            .zip(models)
            .map(|(s, &m)| fit_one(s, m, centers, drive, Some(eta), opts))
            .collect()
    };
    let profile = |eta: f64| -> Result<f64> {
        Ok(fits_at(eta)?
            .iter()
            .zip(specs)
            .map(|(f, s)| weighted_objective(s, f))
            .sum())
    };

    let (lo, hi) = (1e-3, ETA_BOUNDS.1);
    let grid = linspace(lo, hi, 26);
    let values = grid
        .iter()
        .map(|&e| profile(e))
        .collect::<Result<Vec<_>>>()?;
    let best = (0..grid.len())
        .min_by(|&i, &j| values[i].total_cmp(&values[j]))
        .expect("non-empty grid");
    let (mut a, mut b) = (
        grid[best.saturating_sub(1)],
        grid[(best + 1).min(grid.len() - 1)],
    );

    // golden-section search inside the bracketing grid cells
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - ratio * (b - a);
    let mut x2 = a + ratio * (b - a);
    let (mut f1, mut f2) = (profile(x1)?, profile(x2)?);
    while b - a > 1e-7 {
        if f1 <= f2 {
            (b, x2, f2) = (x2, x1, f1);
            x1 = b - ratio * (b - a);
            f1 = profile(x1)?;
        } else {
            (a, x1, f1) = (x1, x2, f2);
            x2 = a + ratio * (b - a);
            f2 = profile(x2)?;
        }
    }
    let (mut eta, mut objective) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    for (&e, &v) in [lo, hi]
        .iter()
        .zip([values[0], values[grid.len() - 1]].iter())
    {
        if v < objective {
            (eta, objective) = (e, v);
        }
    }

    let h = 1e-3;
    let eta_sigma = if eta - h >= 0.0 && eta + h <= hi {
        let curvature = (profile(eta + h)? - 2.0 * objective + profile(eta - h)?) / (h * h);
        let n_data: usize = specs.iter().map(Spectrum::len).sum();
        let fits = fits_at(eta)?;
        let n_free: usize = fits.iter().map(|f| f.params.len() + 1).sum::<usize>() + 1;
        let scale = if specs.iter().all(|s| s.shots.is_some()) {
            1.0
        } else {
            objective / n_data.saturating_sub(n_free).max(1) as f64
        };
        (curvature > 0.0).then(|| (2.0 * scale / curvature).sqrt())
    } else {
        None
    };

    let fits = fits_at(eta)?;
    let mut warnings = Vec::new();
    if eta <= grid[1] || eta >= grid[grid.len() - 2] {
        warnings.push(format!(
            "shared eta = {eta:.4} sits at the edge of its range"
        ));
    }
    Ok(SharedEtaFit {
        eta,
        eta_sigma,
        objective,
        converged: fits.iter().all(|f| f.converged),
        fits,
        warnings,
    })
}

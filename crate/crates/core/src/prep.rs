//! Radial-mode state preparation: Fock, coherent, thermal, squeezed vacuum,
//! squeezed thermal and squeezed Fock states, plus the phase-space random
//! walk that produces a thermal state from randomly phased displacements.
//!
//! States live on a single oscillator truncated at `n_max` (dimension
//! `n_max + 1`). Whenever truncation removes probability, the lost mass is
//! carried as `PhononDistribution::tail` and any renormalization of a state
//! is explicit.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantum::{CMatrix, CVector, FockOperator, FockState, C64};
use crate::rng;

/// Largest truncation tail accepted for a prepared state.
pub const MAX_TAIL: f64 = 1e-4;
/// Largest averaged tail accepted for the random walk.
pub const MAX_WALK_TAIL: f64 = 1e-3;

/// Populations `p[n]`, `n = 0..=n_max`, and the probability `tail` lying
/// above `n_max`. `sum(p) + tail = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhononDistribution {
    pub p: Vec<f64>,
    pub tail: f64,
}

impl PhononDistribution {
    /// Takes populations that may not sum to one; the missing mass is the tail.
    pub fn from_truncated(p: Vec<f64>) -> Result<Self> {
        if p.iter().any(|&x| !(x >= -1e-14) || !x.is_finite()) {
            return Err(Error::InvalidState("negative population".into()));
        }
        let p: Vec<f64> = p.into_iter().map(|x| x.max(0.0)).collect();
        let sum: f64 = p.iter().sum();
        if sum > 1.0 + 1e-10 {
            return Err(Error::InvalidState(format!(
                "populations sum to {sum:.12} > 1"
            )));
        }
        Ok(Self {
            tail: (1.0 - sum).max(0.0),
            p,
        })
    }

    pub fn n_max(&self) -> usize {
        self.p.len() - 1
    }

    pub fn total(&self) -> f64 {
        self.p.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.p.iter().enumerate().map(|(n, p)| n as f64 * p).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.p
            .iter()
            .enumerate()
            .map(|(n, p)| (n as f64 - m).powi(2) * p)
            .sum()
    }

    /// Copy with `p` scaled to unit sum and zero tail.
    pub fn renormalized(&self) -> Self {
        let s = self.total();
        Self {
            p: self.p.iter().map(|x| x / s).collect(),
            tail: 0.0,
        }
    }

    /// `p[n]`, zero beyond the stored range.
    pub fn get(&self, n: usize) -> f64 {
        self.p.get(n).copied().unwrap_or(0.0)
    }

    /// `(1/2) sum |p - q|`, including the tails as one extra outcome.
    pub fn total_variation(&self, other: &Self) -> f64 {
        let len = self.p.len().max(other.p.len());
        let body: f64 = (0..len).map(|n| (self.get(n) - other.get(n)).abs()).sum();
        0.5 * (body + (self.tail - other.tail).abs())
    }
}

/// Radial state family with its parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum StateSpec {
    Fock {
        n: usize,
    },
    Coherent {
        alpha: C64,
    },
    Thermal {
        nbar: f64,
    },
    SqueezedVacuum {
        r: C64,
    },
    SqueezedThermal {
        nbar: f64,
        r: C64,
    },
    SqueezedFock {
        n: usize,
        r: C64,
    },
    /// `|10>` as prepared in the experiment: p10 = 0.80, p9 = p8 = 0.06, and
    /// the remaining 0.08 spread evenly over `n = 0..=7`.
    ImperfectFock10,
}

/// Populations of the imperfect `|10>` preset.
pub fn imperfect_fock10() -> Vec<f64> {
    let mut p = vec![0.01; 8];
    p.extend([0.06, 0.06, 0.80]);
    p
}

impl StateSpec {
    pub fn family_name(&self) -> &'static str {
        match self {
            Self::Fock { .. } => "fock",
            Self::Coherent { .. } => "coherent",
            Self::Thermal { .. } => "thermal",
            Self::SqueezedVacuum { .. } => "squeezed_vacuum",
            Self::SqueezedThermal { .. } => "squeezed_thermal",
            Self::SqueezedFock { .. } => "squeezed_fock",
            Self::ImperfectFock10 => "fock10_imperfect",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        match *self {
            Self::Thermal { nbar } | Self::SqueezedThermal { nbar, .. } if !(nbar >= 0.0) => {
                bad(format!("thermal nbar must be >= 0, got {nbar}"))
            }
            Self::Coherent { alpha } if !alpha.is_finite() => bad("alpha must be finite".into()),
            Self::SqueezedVacuum { r }
            | Self::SqueezedThermal { r, .. }
            | Self::SqueezedFock { r, .. }
                if !r.is_finite() =>
            {
                bad("r must be finite".into())
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for StateSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fock { n } => write!(f, "fock:{n}"),
            Self::Coherent { alpha } => write!(f, "coherent:{}{:+}i", alpha.re, alpha.im),
            Self::Thermal { nbar } => write!(f, "thermal:{nbar}"),
            Self::SqueezedVacuum { r } => write!(f, "squeezed_vacuum:r={}{:+}i", r.re, r.im),
            Self::SqueezedThermal { nbar, r } => {
                write!(f, "squeezed_thermal:nbar={nbar},r={}{:+}i", r.re, r.im)
            }
            Self::SqueezedFock { n, r } => write!(f, "squeezed_fock:n={n},r={}{:+}i", r.re, r.im),
            Self::ImperfectFock10 => write!(f, "fock10_imperfect"),
        }
    }
}

fn parse_complex(s: &str) -> Result<C64> {
    let s = s.trim();
    if let Ok(x) = s.parse::<f64>() {
        return Ok(C64::new(x, 0.0));
    }
    C64::from_str(s).map_err(|_| Error::Parse(format!("bad complex number '{s}'")))
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("bad number '{s}'")))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("bad integer '{s}'")))
}

/// `key=value` pairs, or a single bare value stored under `default_key`.
fn parse_args<'a>(body: &'a str, default_key: &'a str) -> Result<Vec<(&'a str, &'a str)>> {
    if !body.contains('=') {
        return Ok(vec![(default_key, body)]);
    }
    body.split(',')
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Parse(format!("expected key=value, got '{kv}'")))
        })
        .collect()
}

fn take<'a>(args: &[(&'a str, &'a str)], key: &str) -> Result<&'a str> {
    args.iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::Parse(format!("missing '{key}'")))
}

fn reject_unknown(args: &[(&str, &str)], allowed: &[&str]) -> Result<()> {
    match args.iter().find(|(k, _)| !allowed.contains(k)) {
        Some((k, _)) => Err(Error::Parse(format!("unknown key '{k}'"))),
        None => Ok(()),
    }
}

impl FromStr for StateSpec {
    type Err = Error;

    /// Compact forms: `fock:3`, `coherent:1.2+0.0i`, `thermal:1.5`,
    /// `squeezed_vacuum:0.6`, `squeezed_thermal:nbar=1.5,r=0.3`,
    /// `squeezed_fock:n=1,r=0.6`, `fock10_imperfect`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "fock10_imperfect" {
            return Ok(Self::ImperfectFock10);
        }
        let (family, body) = s
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("expected family:params, got '{s}'")))?;
        let spec = match family.trim() {
            "fock" => {
                let a = parse_args(body, "n")?;
                reject_unknown(&a, &["n"])?;
                Self::Fock {
                    n: parse_usize(take(&a, "n")?)?,
                }
            }
            "coherent" => {
                let a = parse_args(body, "alpha")?;
                reject_unknown(&a, &["alpha"])?;
                Self::Coherent {
                    alpha: parse_complex(take(&a, "alpha")?)?,
                }
            }
            "thermal" => {
                let a = parse_args(body, "nbar")?;
                reject_unknown(&a, &["nbar"])?;
                Self::Thermal {
                    nbar: parse_f64(take(&a, "nbar")?)?,
                }
            }
            "squeezed_vacuum" => {
                let a = parse_args(body, "r")?;
                reject_unknown(&a, &["r"])?;
                Self::SqueezedVacuum {
                    r: parse_complex(take(&a, "r")?)?,
                }
            }
            "squeezed_thermal" => {
                let a = parse_args(body, "")?;
                reject_unknown(&a, &["nbar", "r"])?;
                Self::SqueezedThermal {
                    nbar: parse_f64(take(&a, "nbar")?)?,
                    r: parse_complex(take(&a, "r")?)?,
                }
            }
            "squeezed_fock" => {
                let a = parse_args(body, "")?;
                reject_unknown(&a, &["n", "r"])?;
                Self::SqueezedFock {
                    n: parse_usize(take(&a, "n")?)?,
                    r: parse_complex(take(&a, "r")?)?,
                }
            }
            other => return Err(Error::Parse(format!("unknown state family '{other}'"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn guard_band(excitation: f64) -> usize {
    10usize.max((4.0 * excitation).ceil() as usize)
}

/// Working dimension in which `D(alpha)` is exponentiated so that its first
/// `keep` columns are unaffected by the cut.
fn displacement_dim(alpha_abs: f64, keep: usize) -> usize {
    keep + guard_band(alpha_abs * alpha_abs + 1.5 * alpha_abs * (keep as f64).sqrt())
}

/// Smallest `n_max` whose tail drops below `limit`.
fn suggest_cutoff(tail_at: impl Fn(usize) -> f64, from: usize, limit: f64) -> usize {
    (from..from + 10_000)
        .find(|&n| tail_at(n) < limit)
        .unwrap_or(from + 10_000)
}

fn check_tail(tail: f64, limit: f64, n_max: usize, tail_at: impl Fn(usize) -> f64) -> Result<()> {
    if tail > limit {
        return Err(Error::Truncation {
            tail,
            limit,
            n_max,
            suggested: suggest_cutoff(tail_at, n_max, limit),
        });
    }
    Ok(())
}

/// Poisson populations with mean `mu` over `0..=n_max`.
pub fn poisson(mu: f64, n_max: usize) -> Vec<f64> {
    let mut p = Vec::with_capacity(n_max + 1);
    let mut term = (-mu).exp();
    for n in 0..=n_max {
        p.push(term);
        term *= mu / (n + 1) as f64;
    }
    p
}

/// Thermal populations `nbar^n / (1 + nbar)^(n + 1)`.
pub fn thermal_populations(nbar: f64, n_max: usize) -> Vec<f64> {
    let ratio = nbar / (1.0 + nbar);
    let mut p = Vec::with_capacity(n_max + 1);
    let mut term = 1.0 / (1.0 + nbar);
    for _ in 0..=n_max {
        p.push(term);
        term *= ratio;
    }
    p
}

/// Squeezed-vacuum populations
/// `p_2k = (2k)! / (4^k (k!)^2) tanh^(2k)|r| / cosh|r|`, zero for odd `n`.
pub fn squeezed_vacuum_populations(r_abs: f64, n_max: usize) -> Vec<f64> {
    let t2 = r_abs.tanh().powi(2);
    let mut p = vec![0.0; n_max + 1];
    let mut term = 1.0 / r_abs.cosh();
    let mut k = 0;
    while 2 * k <= n_max {
        p[2 * k] = term;
        term *= t2 * (2 * k + 1) as f64 / (2 * k + 2) as f64;
        k += 1;
    }
    p
}

fn tail_of(p: &[f64]) -> f64 {
    (1.0 - p.iter().sum::<f64>()).max(0.0)
}

/// First `rows` rows of `exp(T)` for the real antisymmetric tridiagonal `T`
/// with superdiagonal `t` (and subdiagonal `-t`).
///
/// With `D = diag(i^k)`, `D^-1 T D = i S` for the symmetric tridiagonal `S`
/// with off-diagonal `t`, so `exp(T)_jk = Re[i^(j-k) (V e^{i L} V^T)_jk]`.
fn exp_antisymmetric_tridiagonal(t: &[f64], rows: usize) -> DMatrix<f64> {
    let dim = t.len() + 1;
    let sym = DMatrix::from_fn(dim, dim, |i, j| match i.abs_diff(j) {
        1 => t[i.min(j)],
        _ => 0.0,
    });
    let eig = sym.symmetric_eigen();
    let v = &eig.eigenvectors;
    let top = v.rows(0, rows);
    let cos = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::cos));
    let sin = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sin));
    let c = top * &cos * v.transpose();
    let s = top * &sin * v.transpose();
    DMatrix::from_fn(rows, dim, |j, k| {
        match (j as i64 - k as i64).rem_euclid(4) {
            0 => c[(j, k)],
            1 => -s[(j, k)],
            2 => -c[(j, k)],
            _ => s[(j, k)],
        }
    })
}

/// Rows `< rows` of `D(|alpha|)` computed on `dim` levels.
fn displacement_real(alpha_abs: f64, dim: usize, rows: usize) -> DMatrix<f64> {
    let t: Vec<f64> = (0..dim - 1)
        .map(|n| -alpha_abs * ((n + 1) as f64).sqrt())
        .collect();
    exp_antisymmetric_tridiagonal(&t, rows)
}

/// `<m|S(|r|)|n>` for `m < rows`, `n < cols`, exact (no truncation of the
/// operator). Column 0 is the squeezed vacuum; the rest follows from
/// `S^dag b^dag S = b^dag cosh r - b sinh r`:
///
/// ```text
/// sqrt(n + 1) cosh r s[m][n + 1] = sqrt(m) s[m - 1][n] + sqrt(n) sinh r s[m][n - 1]
/// ```
fn squeeze_elements(r_abs: f64, rows: usize, cols: usize) -> DMatrix<f64> {
    let (ch, sh, th) = (r_abs.cosh(), r_abs.sinh(), r_abs.tanh());
    let mut s = DMatrix::zeros(rows, cols);
    let mut vac = 1.0 / ch.sqrt();
    for m in (0..rows).step_by(2) {
        s[(m, 0)] = vac;
        vac *= -th * (((m + 1) as f64) / ((m + 2) as f64)).sqrt();
    }
    for n in 0..cols.saturating_sub(1) {
        for m in 0..rows {
            let from_row = if m > 0 {
                (m as f64).sqrt() * s[(m - 1, n)]
            } else {
                0.0
            };
            let from_col = if n > 0 {
                sh * (n as f64).sqrt() * s[(m, n - 1)]
            } else {
                0.0
            };
            s[(m, n + 1)] = (from_row + from_col) / (ch * ((n + 1) as f64).sqrt());
        }
    }
    s
}

/// `e^{i phi m} M_mn e^{-i phi n}`: conjugation by the phase rotation
/// `exp(i phi b^dag b)`.
fn rotate(m: &DMatrix<f64>, phi: f64) -> CMatrix {
    CMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        C64::from_polar(m[(i, j)], phi * (i as f64 - j as f64))
    })
}

/// Displacement `D(alpha) = exp(alpha b^dag - alpha^* b)` on `n_max + 1`
/// levels, exponentiated with a guard band above `n_max` and truncated back.
pub fn displacement_op(alpha: C64, n_max: usize) -> Result<FockOperator> {
    let mu = alpha.norm_sqr();
    check_tail(tail_of(&poisson(mu, n_max)), MAX_TAIL, n_max, |n| {
        tail_of(&poisson(mu, n))
    })?;
    let keep = n_max + 1;
    let dim = displacement_dim(alpha.norm(), keep);
    let real = displacement_real(alpha.norm(), dim, keep)
        .columns(0, keep)
        .into_owned();
    FockOperator::new(rotate(&real, alpha.arg()))
}

/// Squeeze operator `S(r) = exp((r^* b^2 - r b^dag^2) / 2)` on `n_max + 1`
/// levels.
pub fn squeeze_op(r: C64, n_max: usize) -> Result<FockOperator> {
    let r_abs = r.norm();
    check_tail(
        tail_of(&squeezed_vacuum_populations(r_abs, n_max)),
        MAX_TAIL,
        n_max,
        |n| tail_of(&squeezed_vacuum_populations(r_abs, n)),
    )?;
    let keep = n_max + 1;
    FockOperator::new(rotate(&squeeze_elements(r_abs, keep, keep), r.arg() / 2.0))
}

/// Thermal density matrix and its untruncated populations. The state is
/// renormalized over `0..=n_max`; the removed mass is the returned tail.
pub fn thermal_state(nbar: f64, n_max: usize) -> Result<(FockState, PhononDistribution)> {
    if !(nbar >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "thermal nbar must be >= 0, got {nbar}"
        )));
    }
    let dist = PhononDistribution::from_truncated(thermal_populations(nbar, n_max))?;
    let state = FockState::from_populations(&dist.renormalized().p)?;
    Ok((state, dist))
}

/// `|<m|S(r)|n>|^2` weighted by diagonal source populations `source[n]`,
/// for `m = 0..=n_max`.
fn squeeze_diagonal(r: C64, source: &[f64], n_max: usize) -> Vec<f64> {
    let s = squeeze_elements(r.norm(), n_max + 1, source.len());
    (0..=n_max)
        .map(|m| {
            source
                .iter()
                .enumerate()
                .map(|(n, &pn)| pn * s[(m, n)].powi(2))
                .sum()
        })
        .collect()
}

/// Thermal populations out to where the remaining tail is below `1e-15`.
fn thermal_source(nbar: f64, at_least: usize) -> Vec<f64> {
    let ratio = nbar / (1.0 + nbar);
    let len = if ratio > 0.0 {
        (-35.0 / ratio.ln()).ceil() as usize
    } else {
        1
    };
    thermal_populations(nbar, len.max(at_least))
}

/// Populations of `spec` over `0..=n_max` without building the state.
/// Closed forms where they exist, numerical squeezing otherwise.
pub fn distribution(spec: &StateSpec, n_max: usize) -> Result<PhononDistribution> {
    spec.validate()?;
    let p = match *spec {
        StateSpec::Fock { n } => {
            let mut p = vec![0.0; n_max + 1];
            if n <= n_max {
                p[n] = 1.0;
            }
            p
        }
        StateSpec::Coherent { alpha } => poisson(alpha.norm_sqr(), n_max),
        StateSpec::Thermal { nbar } => thermal_populations(nbar, n_max),
        StateSpec::SqueezedVacuum { r } => squeezed_vacuum_populations(r.norm(), n_max),
        StateSpec::SqueezedThermal { nbar, r } => {
            squeeze_diagonal(r, &thermal_source(nbar, n_max), n_max)
        }
        StateSpec::SqueezedFock { n, r } => {
            let mut source = vec![0.0; n + 1];
            source[n] = 1.0;
            squeeze_diagonal(r, &source, n_max)
        }
        StateSpec::ImperfectFock10 => {
            let mut p = imperfect_fock10();
            p.resize(n_max + 1, 0.0);
            p
        }
    };
    PhononDistribution::from_truncated(p)
}

/// A prepared radial state and its population vector.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub state: FockState,
    pub dist: PhononDistribution,
}

/// Builds the state for `spec` on `n_max + 1` levels. Fails if more than
/// [`MAX_TAIL`] of the probability lies above `n_max`.
pub fn prepare(spec: &StateSpec, n_max: usize) -> Result<Prepared> {
    spec.validate()?;
    let dist = distribution(spec, n_max)?;
    let spec_tail = |n: usize| distribution(spec, n).map(|d| d.tail).unwrap_or(1.0);
    if let StateSpec::Fock { n } | StateSpec::SqueezedFock { n, .. } = *spec {
        if n > n_max {
            return Err(Error::IndexOutOfRange {
                name: "n",
                value: n,
                max: n_max,
            });
        }
    }
    if matches!(spec, StateSpec::ImperfectFock10) && n_max < 10 {
        return Err(Error::IndexOutOfRange {
            name: "n",
            value: 10,
            max: n_max,
        });
    }
    check_tail(dist.tail, MAX_TAIL, n_max, spec_tail)?;

    let dim = n_max + 1;
    let state = match *spec {
        StateSpec::Fock { n } => FockState::basis(dim, n)?,
        StateSpec::Coherent { alpha } => {
            let d = displacement_op(alpha, n_max)?;
            FockState::pure_normalized(d.matrix().column(0).into_owned())?
        }
        StateSpec::Thermal { .. } | StateSpec::ImperfectFock10 => {
            FockState::from_populations(&dist.renormalized().p)?
        }
        StateSpec::SqueezedVacuum { r } => {
            let s = squeeze_op(r, n_max)?;
            FockState::pure_normalized(s.matrix().column(0).into_owned())?
        }
        StateSpec::SqueezedFock { n, r } => {
            let s = squeeze_elements(r.norm(), dim, n + 1);
            let phase = r.arg() / 2.0;
            let col = CVector::from_fn(dim, |m, _| {
                C64::from_polar(s[(m, n)], phase * (m as f64 - n as f64))
            });
            FockState::pure_normalized(col)?
        }
        StateSpec::SqueezedThermal { nbar, r } => {
            let source = thermal_source(nbar, n_max);
            let s = rotate(
                &squeeze_elements(r.norm(), dim, source.len()),
                r.arg() / 2.0,
            );
            let weighted = CMatrix::from_fn(dim, source.len(), |m, n| s[(m, n)] * source[n]);
            let rho = &weighted * s.adjoint();
            let tr = rho.trace().re;
            FockState::mixed(rho / C64::new(tr, 0.0))?
        }
    };
    Ok(Prepared { state, dist })
}

/// Averages the populations of `D(a e^{i phi_K}) ... D(a e^{i phi_1}) |0>`
/// over `trajectories` independent draws of uniform phases. Trajectory `k`
/// draws its phases from stream `k` of `seed`.
pub fn random_walk_thermal(
    pulses: usize,
    step_alpha: f64,
    seed: u64,
    trajectories: usize,
    n_max: usize,
) -> Result<PhononDistribution> {
    if pulses == 0 || trajectories == 0 {
        return Err(Error::InvalidParameter(
            "random walk needs pulses >= 1 and trajectories >= 1".into(),
        ));
    }
    let dim = n_max + 1;
    let step = {
        let big = displacement_dim(step_alpha, dim);
        let real = displacement_real(step_alpha, big, dim)
            .columns(0, dim)
            .into_owned();
        rotate(&real, 0.0)
    };
    let per_trajectory: Vec<Vec<f64>> = (0..trajectories)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng::stream(seed, k as u64);
            let mut psi = CVector::zeros(dim);
            psi[0] = C64::new(1.0, 0.0);
            for _ in 0..pulses {
                let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                // D(a e^{i phi}) = R(phi) D(a) R(-phi), R(phi) = exp(i phi n)
                for (n, z) in psi.iter_mut().enumerate() {
                    *z *= C64::from_polar(1.0, -phi * n as f64);
                }
                psi = &step * &psi;
                for (n, z) in psi.iter_mut().enumerate() {
                    *z *= C64::from_polar(1.0, phi * n as f64);
                }
            }
            psi.iter().map(|z| z.norm_sqr()).collect()
        })
        .collect();
    let mut avg = vec![0.0; dim];
    for pops in &per_trajectory {
        for (a, p) in avg.iter_mut().zip(pops) {
            *a += p;
        }
    }
    for a in &mut avg {
        *a /= trajectories as f64;
    }
    let dist = PhononDistribution::from_truncated(avg)?;
    if dist.tail > MAX_WALK_TAIL {
        let reach = pulses as f64 * step_alpha;
        return Err(Error::Truncation {
            tail: dist.tail,
            limit: MAX_WALK_TAIL,
            n_max,
            suggested: suggest_cutoff(
                |n| tail_of(&poisson(reach * reach / 4.0, n)),
                n_max,
                MAX_WALK_TAIL,
            ),
        });
    }
    Ok(dist)
}

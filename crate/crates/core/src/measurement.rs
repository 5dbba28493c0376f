//! Single-shot phonon-number measurement.
//!
//! A pi pulse on the sideband of peak `n` followed by fluorescence detection.
//! Imperfect detection is a two-outcome POVM
//!
//! ```text
//! E_bright = g 1 + eta |n><n|,    E_dark = 1 - E_bright
//! ```
//!
//! and a dark outcome updates the state with `K = sqrt(E_dark)`, which is the
//! projector `1 - |n><n|` when `eta = 1, g = 0`. A bright outcome leaves the
//! motion unusable; the known `n` may be re-prepared at the caller's option.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::quantum::{CMatrix, CVector, FockState, C64};
use crate::rng;
use crate::{Error, Result};

/// Trace below which a dark-conditioned state counts as impossible.
const NORM_FLOOR: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub eta: f64,
    pub g: f64,
}

impl Detector {
    pub const IDEAL: Self = Self { eta: 1.0, g: 0.0 };

    pub fn new(eta: f64, g: f64) -> Result<Self> {
        let d = Self { eta, g };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.eta.is_finite()
            && self.g.is_finite()
            && (0.0..=1.0).contains(&self.eta)
            && self.g >= 0.0
            && self.g + self.eta <= 1.0 + 1e-12;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "detector needs 0 <= eta <= 1, g >= 0, g + eta <= 1 (eta = {}, g = {})",
                self.eta, self.g
            )))
        }
    }

    pub fn bright_probability(&self, population: f64) -> f64 {
        (self.g + self.eta * population).clamp(0.0, 1.0)
    }

    /// Diagonal of `sqrt(E_dark)` on `dim` levels.
    fn dark_kraus(&self, dim: usize, target_n: usize) -> Vec<f64> {
        let mut k = vec![(1.0 - self.g).max(0.0).sqrt(); dim];
        k[target_n] = (1.0 - self.g - self.eta).max(0.0).sqrt();
        k
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Bright,
    Dark,
}

/// What happens to the motion after a bright shot.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BrightPolicy {
    #[default]
    MarkDestroyed,
    Reprepare,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MotionalState {
    Valid(FockState),
    /// Fluorescence destroyed the motion; the shot identified `known_n`.
    Destroyed {
        known_n: usize,
    },
}

impl MotionalState {
    pub fn state(&self) -> Option<&FockState> {
        match self {
            Self::Valid(s) => Some(s),
            Self::Destroyed { .. } => None,
        }
    }

    pub fn is_destroyed(&self) -> bool {
        matches!(self, Self::Destroyed { .. })
    }
}

/// One line of a shot log. States are referenced by their position in the
/// run: shot `k` maps state `k` to state `k + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotRecord {
    pub target_n: usize,
    pub outcome: Outcome,
    pub p_bright: f64,
    pub dark_count: usize,
    pub pre_state_id: usize,
    pub post_state_id: usize,
    pub post_destroyed: bool,
    pub seed: u64,
}

fn check_target(state: &FockState, target_n: usize) -> Result<()> {
    if target_n >= state.dim() {
        return Err(Error::IndexOutOfRange {
            name: "target_n",
            value: target_n,
            max: state.dim() - 1,
        });
    }
    Ok(())
}

/// `K rho K / Tr(K rho K)` with `K = sqrt(E_dark)`.
pub fn dark_update(state: &FockState, target_n: usize, detector: &Detector) -> Result<FockState> {
    detector.validate()?;
    check_target(state, target_n)?;
    let k = detector.dark_kraus(state.dim(), target_n);
    match state {
        FockState::Pure(psi) => {
            let v = CVector::from_fn(psi.len(), |i, _| psi[i] * k[i]);
            let norm_sqr = v.norm_squared();
            if norm_sqr < NORM_FLOOR {
                return Err(Error::ImpossibleOutcome(target_n));
            }
            Ok(FockState::Pure(v / C64::new(norm_sqr.sqrt(), 0.0)))
        }
        FockState::Mixed(rho) => {
            let dim = rho.nrows();
            let m = CMatrix::from_fn(dim, dim, |i, j| rho[(i, j)] * (k[i] * k[j]));
            let tr = m.trace().re;
            if tr < NORM_FLOOR {
                return Err(Error::ImpossibleOutcome(target_n));
            }
            Ok(FockState::Mixed(m / C64::new(tr, 0.0)))
        }
    }
}

/// Population of `|n>`, normalized by the state's trace.
fn population(state: &FockState, n: usize) -> f64 {
    state.populations()[n] / state.trace()
}

fn draw<R: Rng>(
    state: &FockState,
    target_n: usize,
    detector: &Detector,
    policy: BrightPolicy,
    rng: &mut R,
) -> Result<(Outcome, f64, MotionalState)> {
    detector.validate()?;
    check_target(state, target_n)?;
    let p_bright = detector.bright_probability(population(state, target_n));
    let u: f64 = rng.random();
    if u < p_bright {
        let post = match policy {
            BrightPolicy::MarkDestroyed => MotionalState::Destroyed { known_n: target_n },
            BrightPolicy::Reprepare => {
                MotionalState::Valid(FockState::basis(state.dim(), target_n)?)
            }
        };
        Ok((Outcome::Bright, p_bright, post))
    } else {
        let post = dark_update(state, target_n, detector)?;
        Ok((Outcome::Dark, p_bright, MotionalState::Valid(post)))
    }
}

/// One shot at peak `target_n`; the draw comes from stream 0 of `seed`.
pub fn single_shot(
    state: &FockState,
    target_n: usize,
    detector: &Detector,
    policy: BrightPolicy,
    seed: u64,
) -> Result<(ShotRecord, MotionalState)> {
    let mut rng = rng::stream(seed, 0);
    let (outcome, p_bright, post) = draw(state, target_n, detector, policy, &mut rng)?;
    let record = ShotRecord {
        target_n,
        outcome,
        p_bright,
        dark_count: usize::from(outcome == Outcome::Dark),
        pre_state_id: 0,
        post_state_id: 1,
        post_destroyed: post.is_destroyed(),
        seed,
    };
    Ok((record, post))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Interrogation {
    pub records: Vec<ShotRecord>,
    /// Peak of the first bright shot, if any.
    pub identified: Option<usize>,
    pub final_state: MotionalState,
}

fn interrogate<R: Rng>(
    state: &FockState,
    schedule: &[usize],
    detector: &Detector,
    policy: BrightPolicy,
    seed: u64,
    rng: &mut R,
) -> Result<Interrogation> {
    let mut current = state.clone();
    let mut records = Vec::with_capacity(schedule.len());
    let mut dark_count = 0;
    for (k, &target_n) in schedule.iter().enumerate() {
        let (outcome, p_bright, post) = draw(&current, target_n, detector, policy, rng)?;
        if outcome == Outcome::Dark {
            dark_count += 1;
        }
        records.push(ShotRecord {
            target_n,
            outcome,
            p_bright,
            dark_count,
            pre_state_id: k,
            post_state_id: k + 1,
            post_destroyed: post.is_destroyed(),
            seed,
        });
        match post {
            MotionalState::Valid(s) if outcome == Outcome::Dark => current = s,
            post => {
                return Ok(Interrogation {
                    records,
                    identified: Some(target_n),
                    final_state: post,
                });
            }
        }
    }
    Ok(Interrogation {
        records,
        identified: None,
        final_state: MotionalState::Valid(current),
    })
}

/// Applies `single_shot` along `schedule`, stopping at the first bright
/// outcome. All draws come from stream 0 of `seed`.
pub fn repeated_interrogation(
    state: &FockState,
    schedule: &[usize],
    detector: &Detector,
    policy: BrightPolicy,
    seed: u64,
) -> Result<Interrogation> {
    interrogate(
        state,
        schedule,
        detector,
        policy,
        seed,
        &mut rng::stream(seed, 0),
    )
}

/// Exact probability that the first bright shot happens at each step of
/// `schedule` (last entry: never bright).
pub fn identification_probabilities(
    state: &FockState,
    schedule: &[usize],
    detector: &Detector,
) -> Result<Vec<f64>> {
    detector.validate()?;
    let mut out = Vec::with_capacity(schedule.len() + 1);
    let mut survival = 1.0;
    let mut current = state.clone();
    for &target_n in schedule {
        check_target(&current, target_n)?;
        let p = detector.bright_probability(population(&current, target_n));
        out.push(survival * p);
        survival *= 1.0 - p;
        if survival == 0.0 {
            break;
        }
        current = dark_update(&current, target_n, detector)?;
    }
    out.resize(schedule.len(), 0.0);
    out.push(survival);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub trajectories: usize,
    pub seed: u64,
    /// First-bright counts keyed by the identified peak.
    pub identified: BTreeMap<usize, usize>,
    pub unidentified: usize,
    /// Empirical bright frequency per schedule step, conditioned on reaching it.
    pub step_bright_frequency: Vec<f64>,
    pub step_shots: Vec<usize>,
}

/// Runs `trajectories` independent interrogations of copies of `state`;
/// trajectory `t` draws from stream `t` of `seed`.
pub fn run_trajectories(
    state: &FockState,
    schedule: &[usize],
    detector: &Detector,
    seed: u64,
    trajectories: usize,
) -> Result<(Vec<Interrogation>, Summary)> {
    detector.validate()?;
    for &n in schedule {
        check_target(state, n)?;
    }
    let runs = (0..trajectories)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::stream(seed, t as u64);
            interrogate(
                state,
                schedule,
                detector,
                BrightPolicy::MarkDestroyed,
                seed,
                &mut rng,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut identified = BTreeMap::new();
    let mut unidentified = 0;
    let mut shots = vec![0usize; schedule.len()];
    let mut bright = vec![0usize; schedule.len()];
    for run in &runs {
        match run.identified {
            Some(n) => *identified.entry(n).or_insert(0) += 1,
            None => unidentified += 1,
        }
        for (k, r) in run.records.iter().enumerate() {
            shots[k] += 1;
            if r.outcome == Outcome::Bright {
                bright[k] += 1;
            }
        }
    }
    let step_bright_frequency = bright
        .iter()
        .zip(&shots)
        .map(|(&b, &s)| if s > 0 { b as f64 / s as f64 } else { 0.0 })
        .collect();
    Ok((
        runs,
        Summary {
            trajectories,
            seed,
            identified,
            unidentified,
            step_bright_frequency,
            step_shots: shots,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrightRate {
    pub shots: usize,
    pub bright: usize,
    pub frequency: f64,
    pub expected: f64,
    pub standard_error: f64,
}

impl BrightRate {
    /// `|frequency - expected|` in units of the binomial standard error.
    pub fn z_score(&self) -> f64 {
        let diff = self.frequency - self.expected;
        if self.standard_error > 0.0 {
            diff / self.standard_error
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// Single shots at `target_n` on `shots` fresh copies of `state`.
pub fn bright_rate(
    state: &FockState,
    target_n: usize,
    detector: &Detector,
    seed: u64,
    shots: usize,
) -> Result<BrightRate> {
    detector.validate()?;
    check_target(state, target_n)?;
    let expected = detector.bright_probability(population(state, target_n));
    let bright = (0..shots)
        .into_par_iter()
        .map(|i| {
            let u: f64 = rng::stream(seed, i as u64).random();
            usize::from(u < expected)
        })
        .sum::<usize>();
    let frequency = if shots > 0 {
        bright as f64 / shots as f64
    } else {
        0.0
    };
    Ok(BrightRate {
        shots,
        bright,
        frequency,
        expected,
        standard_error: (expected * (1.0 - expected) / shots.max(1) as f64).sqrt(),
    })
}

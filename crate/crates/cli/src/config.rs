//! Run configuration: a TOML file whose sections all have defaults, so an
//! empty file (or no file) describes the three-ion Yb+ trap as built.

use std::path::Path;

use anyhow::{bail, Context, Result};
use kerr_core::dynamics::CoupledModeParams;
use kerr_core::measurement::Detector;
use kerr_core::prep::StateSpec;
use kerr_core::quantum::FockCutoff;
use kerr_core::spectroscopy::DriveParams;
use kerr_core::trap::{detune_to, hz_to_rad, mode_frequencies, ModePair, TrapConfig, TrapSection};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "TrapSection::paper")]
    pub trap: TrapSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub drive: DriveSection,
    #[serde(default)]
    pub detection: DetectionSection,
    #[serde(default)]
    pub state: StateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            trap: TrapSection::paper(),
            model: ModelSection::default(),
            drive: DriveSection::default(),
            detection: DetectionSection::default(),
            state: StateSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Retunes `omega_x` so that `2 omega_b - omega_a` equals this, Hz.
    pub detuning_hz: Option<f64>,
    pub n_a_max: usize,
    pub n_b_max: usize,
    /// Number of sideband peaks (`n_b = 0..n_peaks`) used by scan and fit.
    pub n_peaks: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            detuning_hz: None,
            n_a_max: 6,
            n_b_max: 20,
            n_peaks: 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriveSection {
    pub t_pi_s: f64,
    pub order: u8,
    pub rabi2_hz: Option<f64>,
}

impl Default for DriveSection {
    fn default() -> Self {
        Self {
            t_pi_s: kerr_core::spectroscopy::DEFAULT_T_PI,
            order: 1,
            rabi2_hz: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionSection {
    pub eta: f64,
    pub g: f64,
}

impl Default for DetectionSection {
    fn default() -> Self {
        Self { eta: 0.7, g: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StateSection {
    pub spec: String,
    /// Fock cutoff of states prepared for `shots`.
    pub n_max: usize,
}

impl Default for StateSection {
    fn default() -> Self {
        Self {
            spec: "thermal:1.5".into(),
            n_max: 30,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Hex SHA-256 of the effective configuration (file plus overrides).
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(canonical.as_bytes()))
    }

    pub fn trap(&self) -> Result<TrapConfig> {
        let cfg = self.trap.to_config()?;
        Ok(match self.model.detuning_hz {
            Some(d) => detune_to(&cfg, hz_to_rad(d))?,
            None => cfg,
        })
    }

    pub fn modes(&self) -> Result<ModePair> {
        Ok(mode_frequencies(&self.trap()?)?)
    }

    pub fn cutoff(&self, with_qubit: bool) -> Result<FockCutoff> {
        Ok(FockCutoff::new(
            self.model.n_a_max,
            self.model.n_b_max,
            with_qubit,
        )?)
    }

    pub fn params(&self, with_qubit: bool) -> Result<CoupledModeParams> {
        Ok(CoupledModeParams::from_trap(
            &self.trap()?,
            self.cutoff(with_qubit)?,
        )?)
    }

    pub fn drive(&self) -> Result<DriveParams> {
        let d = DriveParams {
            t_pi: self.drive.t_pi_s,
            order: self.drive.order,
            rabi2: self.drive.rabi2_hz.map(hz_to_rad),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn detector(&self) -> Result<Detector> {
        Ok(Detector::new(self.detection.eta, self.detection.g)?)
    }

    pub fn state_spec(&self) -> Result<StateSpec> {
        let spec: StateSpec = self.state.spec.parse()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_peaks(&self) -> Result<usize> {
        if self.model.n_peaks == 0 {
            bail!("model.n_peaks must be >= 1");
        }
        Ok(self.model.n_peaks)
    }
}

//! Trap and ion parameters and the derived two-mode quantities: axial
//! breathing and radial zigzag frequencies of a three-ion crystal, the ion
//! spacing, the trilinear coupling strength and the two-mode detuning.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// CODATA 2018 values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhysicalConstants {
    /// J s
    pub hbar: f64,
    /// F/m
    pub epsilon_0: f64,
}

pub const CONSTANTS: PhysicalConstants = PhysicalConstants {
    hbar: 1.054_571_817e-34,
    epsilon_0: 8.854_187_812_8e-12,
};

pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
pub const ATOMIC_MASS_UNIT: f64 = 1.660_539_066_60e-27;
pub const ELECTRON_MASS: f64 = 9.109_383_701_5e-31;

/// Neutral atomic mass of 171Yb in u.
pub const YB171_ATOMIC_MASS_U: f64 = 170.936;

/// Normalized ion-displacement pattern of the axial breathing mode.
pub const BREATHING_MODE_VECTOR: [f64; 3] = [
    std::f64::consts::FRAC_1_SQRT_2,
    0.0,
    -std::f64::consts::FRAC_1_SQRT_2,
];

/// Normalized ion-displacement pattern of the radial zigzag mode,
/// `(1, -2, 1) / sqrt(6)`.
pub const ZIGZAG_MODE_VECTOR: [f64; 3] = [
    0.408_248_290_463_863,
    -0.816_496_580_927_726,
    0.408_248_290_463_863,
];

pub fn hz_to_rad(f_hz: f64) -> f64 {
    2.0 * PI * f_hz
}

pub fn rad_to_hz(omega: f64) -> f64 {
    omega / (2.0 * PI)
}

/// Single-ion secular frequencies (rad/s) and ion properties (SI).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrapConfig {
    pub omega_x: f64,
    pub omega_y: f64,
    pub omega_z: f64,
    pub ion_mass: f64,
    pub ion_charge: f64,
}

/// Derived quantities of the coupled axial/radial mode pair, all in rad/s
/// except `x0` (m).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ModePair {
    pub omega_a: f64,
    pub omega_b: f64,
    pub xi: f64,
    pub x0: f64,
    pub delta: f64,
}

impl ModePair {
    /// Coherent exchange (angular) frequency `2 sqrt(2) xi` of the
    /// `|1_a,0_b> <-> |0_a,2_b>` oscillation at resonance.
    pub fn exchange_frequency(&self) -> f64 {
        2.0 * 2f64.sqrt() * self.xi
    }
}

/// Mass of a singly-ionized 171Yb ion.
pub fn yb171_ion_mass() -> f64 {
    YB171_ATOMIC_MASS_U * ATOMIC_MASS_UNIT - ELECTRON_MASS
}

impl TrapConfig {
    /// The three-ion Yb+ trap: `(1042, 979, 587)` kHz.
    pub fn paper() -> Self {
        Self {
            omega_x: hz_to_rad(1042e3),
            omega_y: hz_to_rad(979e3),
            omega_z: hz_to_rad(587e3),
            ion_mass: yb171_ion_mass(),
            ion_charge: ELEMENTARY_CHARGE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("omega_x", self.omega_x),
            ("omega_y", self.omega_y),
            ("omega_z", self.omega_z),
        ] {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::InvalidTrap(format!("{name} must be > 0, got {w}")));
            }
        }
        if !(self.ion_mass > 0.0 && self.ion_mass.is_finite()) {
            return Err(Error::InvalidTrap(format!(
                "ion mass must be > 0, got {}",
                self.ion_mass
            )));
        }
        if self.ion_charge == 0.0 || !self.ion_charge.is_finite() {
            return Err(Error::InvalidTrap("ion charge must be non-zero".into()));
        }
        let floor = 12.0 * self.omega_z.powi(2) / 5.0;
        if self.omega_x.powi(2) <= floor {
            return Err(Error::InvalidTrap(format!(
                "zigzag mode is unstable: omega_x/2pi = {:.3} kHz must exceed \
                 sqrt(12/5) omega_z/2pi = {:.3} kHz; increase omega_x",
                rad_to_hz(self.omega_x) / 1e3,
                rad_to_hz(floor.sqrt()) / 1e3
            )));
        }
        Ok(())
    }

    /// Parses a `[trap]` table (frequencies in Hz, mass in u, charge in e).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Doc {
            trap: TrapSection,
        }
        let doc: Doc = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        doc.trap.to_config()
    }
}

/// On-disk form of [`TrapConfig`]. Frequencies are ordinary Hz; the
/// conversion to rad/s happens only in [`TrapSection::to_config`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrapSection {
    pub omega_x_hz: f64,
    pub omega_y_hz: f64,
    pub omega_z_hz: f64,
    /// Neutral atomic mass; one electron mass per elementary charge is
    /// removed.
    #[serde(default = "default_mass_u")]
    pub ion_mass_u: f64,
    #[serde(default = "default_charge_e")]
    pub ion_charge_e: f64,
}

fn default_mass_u() -> f64 {
    YB171_ATOMIC_MASS_U
}

fn default_charge_e() -> f64 {
    1.0
}

impl TrapSection {
    pub fn to_config(&self) -> Result<TrapConfig> {
        let cfg = TrapConfig {
            omega_x: hz_to_rad(self.omega_x_hz),
            omega_y: hz_to_rad(self.omega_y_hz),
            omega_z: hz_to_rad(self.omega_z_hz),
            ion_mass: self.ion_mass_u * ATOMIC_MASS_UNIT - self.ion_charge_e * ELECTRON_MASS,
            ion_charge: self.ion_charge_e * ELEMENTARY_CHARGE,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn paper() -> Self {
        Self {
            omega_x_hz: 1042e3,
            omega_y_hz: 979e3,
            omega_z_hz: 587e3,
            ion_mass_u: YB171_ATOMIC_MASS_U,
            ion_charge_e: 1.0,
        }
    }
}

/// Equilibrium spacing of neighbouring ions in a three-ion chain.
pub fn ion_spacing(cfg: &TrapConfig) -> f64 {
    let num = 5.0 * cfg.ion_charge.powi(2);
    let den = 16.0 * PI * CONSTANTS.epsilon_0 * cfg.ion_mass * cfg.omega_z.powi(2);
    (num / den).cbrt()
}

fn coupling_from(cfg: &TrapConfig, omega_a: f64, omega_b: f64, x0: f64, hbar: f64) -> f64 {
    9.0 * cfg.omega_z.powi(2) * (hbar / (cfg.ion_mass * omega_a * omega_b.powi(2))).sqrt()
        / (10.0 * x0)
}

/// Mode frequencies, spacing, coupling and detuning of `cfg`.
pub fn mode_frequencies(cfg: &TrapConfig) -> Result<ModePair> {
    cfg.validate()?;
    let omega_a = 3f64.sqrt() * cfg.omega_z;
    let omega_b = (cfg.omega_x.powi(2) - 12.0 * cfg.omega_z.powi(2) / 5.0).sqrt();
    let x0 = ion_spacing(cfg);
    let mut modes = ModePair {
        omega_a,
        omega_b,
        xi: 0.0,
        x0,
        delta: 2.0 * omega_b - omega_a,
    };
    modes.xi = coupling_strength(cfg, &modes);
    Ok(modes)
}

/// Trilinear coupling strength `xi` (rad/s) at the actual radial frequency.
pub fn coupling_strength(cfg: &TrapConfig, modes: &ModePair) -> f64 {
    coupling_from(cfg, modes.omega_a, modes.omega_b, modes.x0, CONSTANTS.hbar)
}

/// Coupling strength with `omega_b = omega_a / 2`, the value governing the
/// dynamics at the resonance `omega_a = 2 omega_b`.
pub fn resonant_coupling_strength(cfg: &TrapConfig) -> Result<f64> {
    let modes = mode_frequencies(cfg)?;
    Ok(coupling_from(
        cfg,
        modes.omega_a,
        modes.omega_a / 2.0,
        modes.x0,
        CONSTANTS.hbar,
    ))
}

/// Formula audit hook: coupling strength evaluated with a substituted hbar.
pub fn coupling_strength_with_hbar(cfg: &TrapConfig, hbar: f64) -> Result<f64> {
    let modes = mode_frequencies(cfg)?;
    Ok(coupling_from(
        cfg,
        modes.omega_a,
        modes.omega_b,
        modes.x0,
        hbar,
    ))
}

/// Returns a copy of `cfg` with `omega_x` retuned so that
/// `2 omega_b - omega_a = target_delta`; `omega_z` is untouched.
pub fn detune_to(cfg: &TrapConfig, target_delta: f64) -> Result<TrapConfig> {
    cfg.validate()?;
    let omega_a = 3f64.sqrt() * cfg.omega_z;
    let omega_b = (omega_a + target_delta) / 2.0;
    if !(omega_b > 0.0) || !target_delta.is_finite() {
        return Err(Error::UnreachableDetuning {
            target_hz: rad_to_hz(target_delta),
            min_hz: rad_to_hz(-omega_a),
        });
    }
    let omega_x = (omega_b.powi(2) + 12.0 * cfg.omega_z.powi(2) / 5.0).sqrt();
    let out = TrapConfig { omega_x, ..*cfg };
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn paper_mode_frequencies() {
        let m = mode_frequencies(&TrapConfig::paper()).unwrap();
        assert_relative_eq!(rad_to_hz(m.omega_a) / 1e3, 1016.7, epsilon = 0.05);
        assert_relative_eq!(rad_to_hz(m.omega_b) / 1e3, 508.7, epsilon = 0.05);
        assert_relative_eq!(rad_to_hz(m.delta) / 1e3, 0.7, epsilon = 0.05);
        assert_relative_eq!(
            m.omega_a,
            3f64.sqrt() * TrapConfig::paper().omega_z,
            max_relative = 1e-12
        );
        assert_eq!(m.delta, 2.0 * m.omega_b - m.omega_a);
    }

    #[test]
    fn spacing_about_4_2_um() {
        let x0 = ion_spacing(&TrapConfig::paper());
        assert_relative_eq!(x0 * 1e6, 4.2, epsilon = 0.05);
    }

    #[test]
    fn spacing_power_law() {
        let cfg = TrapConfig::paper();
        let scaled = TrapConfig {
            omega_z: 4.0 * cfg.omega_z,
            ..cfg
        };
        assert_relative_eq!(
            ion_spacing(&cfg) / ion_spacing(&scaled),
            4f64.powf(2.0 / 3.0),
            max_relative = 1e-12
        );
    }

    #[test]
    fn resonant_exchange_3_11_khz() {
        let xi = resonant_coupling_strength(&TrapConfig::paper()).unwrap();
        let f = rad_to_hz(2.0 * 2f64.sqrt() * xi);
        assert!((f - 3110.0).abs() / 3110.0 < 0.01, "{f}");
        assert!((rad_to_hz(xi) - 1100.0).abs() / 1100.0 < 0.01);
    }

    #[test]
    fn coupling_mass_and_hbar_scaling() {
        let cfg = TrapConfig::paper();
        let heavy = TrapConfig {
            ion_mass: 2.0 * cfg.ion_mass,
            ..cfg
        };
        // x0 ~ m^(-1/3) and the prefactor ~ m^(-1/2), so xi ~ m^(-1/6)
        assert_relative_eq!(
            ion_spacing(&heavy) / ion_spacing(&cfg),
            2f64.powf(-1.0 / 3.0),
            max_relative = 1e-12
        );
        let r = mode_frequencies(&heavy).unwrap().xi / mode_frequencies(&cfg).unwrap().xi;
        assert_relative_eq!(r, 2f64.powf(-1.0 / 6.0), max_relative = 1e-12);
        let r = coupling_strength_with_hbar(&cfg, 2.0 * CONSTANTS.hbar).unwrap()
            / mode_frequencies(&cfg).unwrap().xi;
        assert_relative_eq!(r, 2f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn detune_round_trip() {
        let cfg = TrapConfig::paper();
        for khz in [0.0, 14.3, 88.0, -20.0, 120.0] {
            let target = hz_to_rad(khz * 1e3);
            let tuned = detune_to(&cfg, target).unwrap();
            assert_eq!(tuned.omega_z, cfg.omega_z);
            let m = mode_frequencies(&tuned).unwrap();
            let scale = target.abs().max(m.omega_a * 1e-6);
            assert!((m.delta - target).abs() <= 1e-9 * scale.max(1.0), "{khz}");
        }
    }

    #[test]
    fn detune_unreachable() {
        let cfg = TrapConfig::paper();
        let err = detune_to(&cfg, -2.0 * mode_frequencies(&cfg).unwrap().omega_a).unwrap_err();
        assert!(matches!(err, Error::UnreachableDetuning { .. }));
        assert!(err.to_string().contains("feasible range"));
    }

    #[test]
    fn unstable_zigzag_rejected() {
        let cfg = TrapConfig {
            omega_x: hz_to_rad(800e3),
            ..TrapConfig::paper()
        };
        let err = mode_frequencies(&cfg).unwrap_err().to_string();
        assert!(err.contains("increase omega_x"), "{err}");
    }

    #[test]
    fn parse_config() {
        let text = "[trap]\nomega_x_hz = 1042e3\nomega_y_hz = 979e3\nomega_z_hz = 587e3\n\
                    ion_mass_u = 170.936\nion_charge_e = 1\n";
        let cfg = TrapConfig::from_toml_str(text).unwrap();
        assert_relative_eq!(
            cfg.omega_x,
            TrapConfig::paper().omega_x,
            max_relative = 1e-15
        );
        assert_relative_eq!(cfg.ion_mass, yb171_ion_mass(), max_relative = 1e-15);
        let bad = format!("{text}bogus = 3\n");
        assert!(TrapConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn mode_vectors_normalized() {
        let n = |v: [f64; 3]| v.iter().map(|x| x * x).sum::<f64>();
        assert_relative_eq!(n(BREATHING_MODE_VECTOR), 1.0, max_relative = 1e-14);
        assert_relative_eq!(n(ZIGZAG_MODE_VECTOR), 1.0, max_relative = 1e-14);
    }
}

//! MTJ technology parameters and the deterministic switching/write model.
//!
//! Every electrical quantity in the simulator (gate windows, write energy,
//! read energy) derives from an [`MtjSpec`]. Two technology points are built
//! in: `modern` and `future`. The future parallel-state resistance is derived
//! from `r_ap` and the TMR ratio; the tabulated 7.34 kΩ value is kept as
//! metadata and is available as the `future-printed` built-in.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Scalar;

/// Magnetic state of a junction. `Parallel` is logic 0, `AntiParallel` logic 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MtjState {
    Parallel,
    AntiParallel,
}

impl MtjState {
    pub fn from_bit(bit: bool) -> Self {
        if bit {
            MtjState::AntiParallel
        } else {
            MtjState::Parallel
        }
    }

    pub fn bit(self) -> bool {
        matches!(self, MtjState::AntiParallel)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DeviceError {
    #[error("invalid MTJ spec `{name}`: {reason}")]
    Invalid { name: String, reason: String },
    #[error("unknown built-in device spec `{0}` (expected modern, future or future-printed)")]
    UnknownBuiltin(String),
    #[error("device config parse error: {0}")]
    Parse(String),
}

/// Parameters of one MTJ technology generation (SI units throughout).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MtjSpec<T> {
    pub name: String,
    pub tmr: T,
    pub r_ap: T,
    pub r_p: T,
    pub i_c: T,
    pub t_switch: T,
    pub write_current_factor: T,
    /// Recorded metadata only; switching is deterministic.
    pub target_write_error: T,
    /// Tabulated parallel resistance when it disagrees with the derived one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub printed_r_p: Option<T>,
}

/// `r_ap / (1 + tmr)`.
pub fn derive_r_p<T: Scalar>(r_ap: T, tmr: T) -> T {
    r_ap / (T::one() + tmr)
}

/// `(r_ap - r_p) / r_p`.
pub fn tmr_from_resistances<T: Scalar>(r_ap: T, r_p: T) -> T {
    (r_ap - r_p) / r_p
}

impl<T: Scalar> MtjSpec<T> {
    /// Interfacial perpendicular CoFeB/MgO junction, 45 nm.
    pub fn modern() -> Self {
        MtjSpec {
            name: "modern".into(),
            tmr: T::lit(1.33),
            r_ap: T::lit(7340.0),
            r_p: T::lit(3150.0),
            i_c: T::lit(40e-6),
            t_switch: T::lit(3e-9),
            write_current_factor: T::lit(1.5),
            target_write_error: T::lit(1e-5),
            printed_r_p: None,
        }
    }

    /// Projected 10 nm junction with TMR 500%.
    pub fn future() -> Self {
        let r_ap = T::lit(76390.0);
        let tmr = T::lit(5.0);
        MtjSpec {
            name: "future".into(),
            tmr,
            r_ap,
            r_p: derive_r_p(r_ap, tmr),
            i_c: T::lit(3e-6),
            t_switch: T::lit(1e-9),
            write_current_factor: T::lit(1.5),
            target_write_error: T::lit(1e-5),
            printed_r_p: Some(T::lit(7340.0)),
        }
    }

    /// The future junction with the tabulated (TMR-inconsistent) 7.34 kΩ `r_p`.
    pub fn future_printed() -> Self {
        let mut spec = Self::future();
        spec.name = "future-printed".into();
        spec.r_p = T::lit(7340.0);
        spec.printed_r_p = None;
        spec
    }

    pub fn builtin(name: &str) -> Result<Self, DeviceError> {
        match name {
            "modern" | "M" => Ok(Self::modern()),
            "future" | "F" => Ok(Self::future()),
            "future-printed" => Ok(Self::future_printed()),
            other => Err(DeviceError::UnknownBuiltin(other.to_string())),
        }
    }

    pub fn resistance(&self, state: MtjState) -> T {
        match state {
            MtjState::Parallel => self.r_p,
            MtjState::AntiParallel => self.r_ap,
        }
    }

    /// Drive current for memory writes, `write_current_factor * i_c`.
    pub fn write_current(&self) -> T {
        self.write_current_factor * self.i_c
    }

    /// Energy to switch one cell into `target` with the write current for `t_switch`.
    pub fn write_energy(&self, target: MtjState) -> T {
        let i = self.write_current();
        i * i * self.resistance(target) * self.t_switch
    }

    /// Deterministic switching criterion: the driven current reaches `i_c`.
    pub fn switches(&self, current: T) -> bool {
        current >= self.i_c
    }

    /// TMR recomputed from the stored resistances.
    pub fn effective_tmr(&self) -> T {
        tmr_from_resistances(self.r_ap, self.r_p)
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        let fail = |reason: &str| {
            Err(DeviceError::Invalid {
                name: self.name.clone(),
                reason: reason.to_string(),
            })
        };
        if !(self.r_p > T::zero()) {
            return fail("r_p must be positive");
        }
        if !(self.r_ap > self.r_p) {
            return fail("r_ap must exceed r_p");
        }
        if !(self.i_c > T::zero()) {
            return fail("i_c must be positive");
        }
        if !(self.t_switch > T::zero()) {
            return fail("t_switch must be positive");
        }
        if !(self.write_current_factor >= T::one()) {
            return fail("write_current_factor must be >= 1");
        }
        Ok(())
    }

    /// Parses a key/value TOML document. When `r_p` is absent it is derived
    /// from `r_ap` and `tmr`; when `tmr` is absent it is derived from the
    /// resistances.
    pub fn from_toml_str(text: &str) -> Result<Self, DeviceError> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            name: String,
            tmr: Option<f64>,
            r_ap: f64,
            r_p: Option<f64>,
            printed_r_p: Option<f64>,
            i_c: f64,
            t_switch: f64,
            write_current_factor: Option<f64>,
            target_write_error: Option<f64>,
        }
        let raw: Raw = toml::from_str(text).map_err(|e| DeviceError::Parse(e.to_string()))?;
        let r_ap = T::lit(raw.r_ap);
        let (tmr, r_p) = match (raw.tmr, raw.r_p) {
            (Some(tmr), Some(r_p)) => (T::lit(tmr), T::lit(r_p)),
            (Some(tmr), None) => (T::lit(tmr), derive_r_p(r_ap, T::lit(tmr))),
            (None, Some(r_p)) => (tmr_from_resistances(r_ap, T::lit(r_p)), T::lit(r_p)),
            (None, None) => {
                return Err(DeviceError::Parse(
                    "one of `tmr` or `r_p` must be given".to_string(),
                ))
            }
        };
        let spec = MtjSpec {
            name: raw.name,
            tmr,
            r_ap,
            r_p,
            i_c: T::lit(raw.i_c),
            t_switch: T::lit(raw.t_switch),
            write_current_factor: T::lit(raw.write_current_factor.unwrap_or(1.5)),
            target_write_error: T::lit(raw.target_write_error.unwrap_or(1e-5)),
            printed_r_p: raw.printed_r_p.map(T::lit),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("name = {:?}\n", self.name));
        out.push_str(&format!("tmr = {:e}\n", self.tmr.to_f64_lossy()));
        out.push_str(&format!("r_ap = {:e}\n", self.r_ap.to_f64_lossy()));
        out.push_str(&format!("r_p = {:e}\n", self.r_p.to_f64_lossy()));
        if let Some(p) = self.printed_r_p {
            out.push_str(&format!("printed_r_p = {:e}\n", p.to_f64_lossy()));
        }
        out.push_str(&format!("i_c = {:e}\n", self.i_c.to_f64_lossy()));
        out.push_str(&format!("t_switch = {:e}\n", self.t_switch.to_f64_lossy()));
        out.push_str(&format!(
            "write_current_factor = {:e}\n",
            self.write_current_factor.to_f64_lossy()
        ));
        out.push_str(&format!(
            "target_write_error = {:e}\n",
            self.target_write_error.to_f64_lossy()
        ));
        out
    }

    /// Same parameters in another scalar type.
    pub fn cast<U: Scalar>(&self) -> MtjSpec<U> {
        let c = |v: T| U::lit(v.to_f64_lossy());
        MtjSpec {
            name: self.name.clone(),
            tmr: c(self.tmr),
            r_ap: c(self.r_ap),
            r_p: c(self.r_p),
            i_c: c(self.i_c),
            t_switch: c(self.t_switch),
            write_current_factor: c(self.write_current_factor),
            target_write_error: c(self.target_write_error),
            printed_r_p: self.printed_r_p.map(c),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn modern_matches_table() {
        let m = MtjSpec::<f64>::modern();
        assert_eq!(m.r_p, 3150.0);
        assert_eq!(m.r_ap, 7340.0);
        assert_eq!(m.i_c, 40e-6);
        assert_eq!(m.t_switch, 3e-9);
        assert_relative_eq!(m.r_ap / m.r_p, 2.33, max_relative = 1e-3);
        assert_relative_eq!(m.write_current(), 60e-6, max_relative = 1e-12);
        m.validate().unwrap();
    }

    #[test]
    fn future_derives_r_p() {
        let f = MtjSpec::<f64>::future();
        assert_relative_eq!(f.r_p, 12731.67, max_relative = 1e-5);
        assert_eq!(f.i_c, 3e-6);
        assert_eq!(f.t_switch, 1e-9);
        assert_relative_eq!(f.write_current(), 4.5e-6, max_relative = 1e-12);
        assert_eq!(f.printed_r_p, Some(7340.0));
        // TMR consistency within 1%.
        assert!((f.effective_tmr() - f.tmr).abs() / f.tmr < 0.01);
    }

    #[test]
    fn identity_write_factor_gives_threshold_current() {
        let mut m = MtjSpec::<f64>::modern();
        m.write_current_factor = 1.0;
        assert_eq!(m.write_current(), m.i_c);
    }

    #[test]
    fn validation_rejects_inverted_resistances() {
        let mut m = MtjSpec::<f64>::modern();
        m.r_p = 8000.0;
        assert!(m.validate().is_err());
        let mut m = MtjSpec::<f64>::modern();
        m.write_current_factor = 0.9;
        assert!(m.validate().is_err());
    }

    #[test]
    fn toml_round_trip_and_derivation() {
        let text = "name = \"x\"\ntmr = 5.0\nr_ap = 76390.0\ni_c = 3e-6\nt_switch = 1e-9\n";
        let s = MtjSpec::<f64>::from_toml_str(text).unwrap();
        assert_relative_eq!(s.r_p, 12731.67, max_relative = 1e-5);
        assert_eq!(s.write_current_factor, 1.5);
        let again = MtjSpec::<f64>::from_toml_str(&s.to_toml_string()).unwrap();
        assert_relative_eq!(again.r_p, s.r_p, max_relative = 1e-12);
        assert!(MtjSpec::<f64>::from_toml_str("name = \"x\"\nr_ap = 1.0\ni_c = 1.0\nt_switch = 1.0\n").is_err());
        assert!(MtjSpec::<f64>::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn builtins() {
        assert!(MtjSpec::<f32>::builtin("modern").is_ok());
        assert_eq!(MtjSpec::<f64>::builtin("future-printed").unwrap().r_p, 7340.0);
        assert!(matches!(
            MtjSpec::<f64>::builtin("legacy"),
            Err(DeviceError::UnknownBuiltin(_))
        ));
    }

    #[test]
    fn state_bits() {
        assert!(MtjState::from_bit(true).bit());
        assert_eq!(MtjState::from_bit(false), MtjState::Parallel);
    }
}

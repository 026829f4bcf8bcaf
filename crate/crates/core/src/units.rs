//! Unit conventions.
//!
//! Everything inside the crate uses ħ = 1 with angular frequencies in rad/ns
//! and times in ns. Device constants quoted as `X/2π = v GHz` enter as
//! `2π·v`; constants quoted as bare GHz (resonator frequencies, couplings,
//! Debye cut-offs) are taken to be angular already.

use std::f64::consts::PI;

/// ħ/k_B in ns·mK.
pub const HBAR_OVER_KB_NS_MK: f64 = 7.638_232_5;

/// ħ·(1 rad/ns)² expressed in femtowatts.
pub const FEMTOWATT_PER_UNIT: f64 = 0.105_457_181_7;

/// Inverse temperature in ns for a temperature in mK.
pub fn beta_from_millikelvin(temperature_mk: f64) -> f64 {
    HBAR_OVER_KB_NS_MK / temperature_mk
}

/// Converts a frequency quoted as `v GHz` (cycles) into rad/ns.
pub fn angular_from_ghz(v: f64) -> f64 {
    2.0 * PI * v
}

/// Converts an internal heat current into femtowatts.
pub fn current_to_femtowatt(current: f64) -> f64 {
    current * FEMTOWATT_PER_UNIT
}

/// Bose occupation `1/(e^{βω} - 1)`.
pub fn bose(beta: f64, omega: f64) -> f64 {
    1.0 / (beta * omega).exp_m1()
}

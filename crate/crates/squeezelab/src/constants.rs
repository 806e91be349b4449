//! Physical constants (CODATA 2018 values where applicable).

/// Reduced Planck constant, J s.
pub const HBAR: f64 = 1.054_571_817e-34;

/// Boltzmann constant, J/K.
pub const KB: f64 = 1.380_649e-23;

/// Speed of light in vacuum, m/s.
pub const C: f64 = 2.997_924_58e8;

/// Standard gravitational acceleration, m/s^2.
pub const G_STANDARD: f64 = 9.806_65;

//! Fractional cutting-force law and its resolution into the tool frame.
//!
//! Tooth angles `φ` are measured clockwise from the tool `x` axis (the feed
//! direction) and the spindle turns clockwise, so the tip of tooth `i` sits at
//! `R·(cos φ_i, −sin φ_i)` relative to the tool centre.

use std::f64::consts::TAU;

use nalgebra::{Vector2, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CuttingParams {
    /// Cutting stiffness at small chip thickness, N/m.
    pub k0: f64,
    /// Specific chip thickness, m.
    pub hs: f64,
    /// k∞/k0.
    pub r: f64,
    /// Radial to tangential force ratio.
    pub kr: f64,
    /// Depth of cut, m.
    pub ap: f64,
    /// Tool radius, m.
    pub radius: f64,
    pub teeth: usize,
    /// Spindle speed, rev/min.
    pub spindle_rpm: f64,
    /// Feed rate, m/s.
    pub feed: f64,
}

impl CuttingParams {
    /// `k0 = 0` is accepted and switches the process off.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(format!("cutting parameters: {msg}")));
        if !(self.k0 >= 0.0 && self.k0.is_finite()) {
            return bad("k0 must be non-negative");
        }
        if !(self.r > 0.0 && self.r < 1.0) {
            return bad("r must lie in (0, 1)");
        }
        if !(self.hs > 0.0 && self.ap > 0.0 && self.radius > 0.0) {
            return bad("hs, ap and tool radius must be positive");
        }
        if !(self.kr >= 0.0 && self.kr.is_finite()) {
            return bad("kr must be non-negative");
        }
        if self.teeth == 0 {
            return bad("at least one tooth is required");
        }
        if !(self.spindle_rpm > 0.0) {
            return bad("spindle speed must be positive");
        }
        if !(self.feed >= 0.0 && self.feed.is_finite()) {
            return bad("feed rate must be non-negative");
        }
        Ok(())
    }

    /// Feed per tooth `v_f / (N_z Ω)`, m.
    pub fn feed_per_tooth(&self) -> f64 {
        self.feed * 60.0 / (self.teeth as f64 * self.spindle_rpm)
    }

    /// Tooth-passing frequency `N_z Ω / 60`, Hz.
    pub fn tooth_passing_frequency(&self) -> f64 {
        self.teeth as f64 * self.spindle_rpm / 60.0
    }

    /// Spindle angular speed, rad/s.
    pub fn angular_speed(&self) -> f64 {
        TAU * self.spindle_rpm / 60.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToothState {
    pub index: usize,
    /// rad, in [0, 2π)
    pub phi: f64,
    /// m
    pub h: f64,
    pub engaged: bool,
}

/// Tangential force for chip thickness `h`; zero once the tooth leaves the material.
pub fn fractional_force(h: f64, p: &CuttingParams) -> f64 {
    if h <= 0.0 {
        return 0.0;
    }
    let u = h / p.hs;
    p.k0 * p.ap * (u + p.r * u * u) / (1.0 + u)
}

pub fn radial_force(ft: f64, p: &CuttingParams) -> f64 {
    p.kr * ft
}

/// Force on the tool `(F_x, F_y)` in the tool frame, summed over engaged teeth.
pub fn tool_frame_force(teeth: &[ToothState], p: &CuttingParams) -> Vector2<f64> {
    teeth
        .iter()
        .filter(|t| t.engaged)
        .map(|t| {
            let ft = fractional_force(t.h, p);
            let fr = radial_force(ft, p);
            let (s, c) = t.phi.sin_cos();
            Vector2::new(-fr * c + ft * s, fr * s + ft * c)
        })
        .sum()
}

/// Planar force as a tool-frame wrench; the axial component is neglected.
pub fn wrench(force: &Vector2<f64>) -> Vector6<f64> {
    Vector6::new(force.x, force.y, 0.0, 0.0, 0.0, 0.0)
}

pub fn tooth_positions(p: &CuttingParams, tau: f64) -> Vec<f64> {
    let base = p.angular_speed() * tau;
    (0..p.teeth)
        .map(|i| (base + TAU * i as f64 / p.teeth as f64).rem_euclid(TAU))
        .collect()
}

/// Unit vector from the tool centre towards a tooth tip at angle `phi`.
pub fn tooth_direction(phi: f64) -> Vector2<f64> {
    Vector2::new(phi.cos(), -phi.sin())
}

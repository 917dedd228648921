//! Occupancy-grid model of the workpiece in the tool plane.
//!
//! Each node stands for one `dsx × dsy` cell and is placed at the cell
//! centre. A node is "1" while material is present and flips to "0" once a
//! tooth sweeps over it.

use std::f64::consts::{PI, TAU};
use std::io::{BufRead, Write};

use bitvec::prelude::*;
use nalgebra::Vector2;

use crate::cutting_force::tooth_direction;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub min: Vector2<f64>,
    pub max: Vector2<f64>,
}

impl Rect {
    pub fn new(min: Vector2<f64>, max: Vector2<f64>) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkpieceGrid {
    origin: Vector2<f64>,
    dsx: f64,
    dsy: f64,
    nx: usize,
    ny: usize,
    occupancy: BitVec<u64, Lsb0>,
}

/// Motion of one tooth tip over a time step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToothSweep {
    pub tcp_prev: Vector2<f64>,
    pub tcp_now: Vector2<f64>,
    pub phi_prev: f64,
    pub phi_now: f64,
    pub radius: f64,
}

impl ToothSweep {
    /// Start and end directions of the swept sector at `tcp_now`, and its
    /// clockwise opening angle.
    fn sector(&self) -> (Vector2<f64>, Vector2<f64>, f64) {
        let tip_prev = self.tcp_prev + tooth_direction(self.phi_prev) * self.radius;
        let start = tip_prev - self.tcp_now;
        let end = tooth_direction(self.phi_now);
        let start = if start.norm() > 0.0 { start.normalize() } else { end };
        let a = start.y.atan2(start.x);
        let b = end.y.atan2(end.x);
        (start, end, (a - b).rem_euclid(TAU))
    }

    /// Actual angular advance of the tooth relative to the tool centre, rad.
    pub fn swept_angle(&self) -> f64 {
        self.sector().2
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepResult {
    /// Removed area `A_i`, m².
    pub area: f64,
    /// Swept angle `Δφ_i`, rad.
    pub dphi: f64,
}

/// Side of a slot whose wall is traced by [`WorkpieceGrid::machined_profile`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wall {
    /// Lower edge of the topmost material block in each column.
    Upper,
    /// Upper edge of the bottommost material block in each column.
    Lower,
}

impl WorkpieceGrid {
    /// Cell-centred grid covering `bounds`; nodes where `material` holds start as "1".
    pub fn new(bounds: Rect, dsx: f64, dsy: f64, material: impl Fn(&Vector2<f64>) -> bool) -> Result<Self> {
        if !(dsx > 0.0 && dsy > 0.0) {
            return Err(Error::InvalidParameter(format!("grid steps must be positive (got {dsx}, {dsy})")));
        }
        let extent = bounds.max - bounds.min;
        let count = |len: f64, step: f64| {
            let n = len / step;
            // tolerate round-off when the extent is an exact multiple of the step
            if (n - n.round()).abs() < 1e-6 { n.round() } else { n.ceil() }
        };
        let (fx, fy) = (count(extent.x, dsx), count(extent.y, dsy));
        if !(fx >= 1.0 && fy >= 1.0) || fx * fy > 4e9 {
            return Err(Error::InvalidParameter(format!("grid of {fx} × {fy} nodes is empty or too large")));
        }
        let (nx, ny) = (fx as usize, fy as usize);
        let origin = bounds.min + Vector2::new(0.5 * dsx, 0.5 * dsy);
        let mut occupancy = BitVec::repeat(false, nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let p = origin + Vector2::new(i as f64 * dsx, j as f64 * dsy);
                if material(&p) {
                    occupancy.set(j * nx + i, true);
                }
            }
        }
        Ok(Self { origin, dsx, dsy, nx, ny, occupancy })
    }

    pub fn with_stock(bounds: Rect, dsx: f64, dsy: f64, stock: Rect) -> Result<Self> {
        Self::new(bounds, dsx, dsy, |p| stock.contains(p))
    }

    pub fn origin(&self) -> Vector2<f64> {
        self.origin
    }

    pub fn steps(&self) -> (f64, f64) {
        (self.dsx, self.dsy)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn node(&self, i: usize, j: usize) -> Vector2<f64> {
        self.origin + Vector2::new(i as f64 * self.dsx, j as f64 * self.dsy)
    }

    pub fn is_material(&self, i: usize, j: usize) -> bool {
        self.occupancy[j * self.nx + i]
    }

    pub fn material_count(&self) -> usize {
        self.occupancy.count_ones()
    }

    pub fn cell_area(&self) -> f64 {
        self.dsx * self.dsy
    }

    /// Removes the material inside the sector swept by a tooth.
    pub fn sweep_and_remove(&mut self, sweep: &ToothSweep) -> Result<SweepResult> {
        let (a, b, dphi) = sweep.sector();
        if !(dphi < PI) {
            return Err(Error::DegenerateStep(format!("tooth swept {dphi} rad in one step")));
        }
        let flipped = if dphi > 0.0 { self.clear_sector(sweep.tcp_now, sweep.radius, a, b) } else { 0 };
        Ok(SweepResult { area: flipped as f64 * self.cell_area(), dphi })
    }

    /// Clears nodes within `radius` of `c` lying clockwise of `a` and anticlockwise of `b`.
    fn clear_sector(&mut self, c: Vector2<f64>, radius: f64, a: Vector2<f64>, b: Vector2<f64>) -> usize {
        let r2 = radius * radius;
        let inside = |d: Vector2<f64>| a.perp(&d) <= 0.0 && b.perp(&d) >= 0.0;
        let mut ylo = c.y.min(c.y + radius * a.y).min(c.y + radius * b.y);
        let mut yhi = c.y.max(c.y + radius * a.y).max(c.y + radius * b.y);
        if inside(Vector2::new(0.0, 1.0)) {
            yhi = c.y + radius;
        }
        if inside(Vector2::new(0.0, -1.0)) {
            ylo = c.y - radius;
        }
        let j_lo = ((ylo - self.origin.y) / self.dsy).ceil().max(0.0);
        let j_hi = ((yhi - self.origin.y) / self.dsy).floor().min(self.ny as f64 - 1.0);
        if j_lo > j_hi {
            return 0;
        }
        let mut flipped = 0;
        for j in j_lo as usize..=j_hi as usize {
            let dy = self.origin.y + j as f64 * self.dsy - c.y;
            let w2 = r2 - dy * dy;
            if w2 < 0.0 {
                continue;
            }
            let w = w2.sqrt();
            let (mut lo, mut hi) = (-w, w);
            // a × d ≤ 0  ⇔  a.y·dx ≥ a.x·dy
            if !clip(&mut lo, &mut hi, a.y, a.x * dy) {
                continue;
            }
            // b × d ≥ 0  ⇔  −b.y·dx ≥ −b.x·dy
            if !clip(&mut lo, &mut hi, -b.y, -b.x * dy) {
                continue;
            }
            let i_lo = ((c.x + lo - self.origin.x) / self.dsx).ceil().max(0.0);
            let i_hi = ((c.x + hi - self.origin.x) / self.dsx).floor().min(self.nx as f64 - 1.0);
            if i_lo > i_hi {
                continue;
            }
            let start = j * self.nx + i_lo as usize;
            let end = j * self.nx + i_hi as usize + 1;
            let cells = &mut self.occupancy[start..end];
            let n = cells.count_ones();
            if n > 0 {
                flipped += n;
                cells.fill(false);
            }
        }
        flipped
    }

    /// Boundary between removed and remaining material along the feed axis.
    /// Columns without material are skipped.
    pub fn machined_profile(&self, wall: Wall) -> Vec<Vector2<f64>> {
        let mut out = Vec::new();
        for i in 0..self.nx {
            let x = self.origin.x + i as f64 * self.dsx;
            let column = |j: usize| self.occupancy[j * self.nx + i];
            let edge = match wall {
                Wall::Upper => (0..self.ny).rev().find(|&j| column(j)).map(|top| {
                    let mut j = top;
                    while j > 0 && column(j - 1) {
                        j -= 1;
                    }
                    self.origin.y + (j as f64 - 0.5) * self.dsy
                }),
                Wall::Lower => (0..self.ny).find(|&j| column(j)).map(|bottom| {
                    let mut j = bottom;
                    while j + 1 < self.ny && column(j + 1) {
                        j += 1;
                    }
                    self.origin.y + (j as f64 + 0.5) * self.dsy
                }),
            };
            if let Some(y) = edge {
                out.push(Vector2::new(x, y));
            }
        }
        out
    }

    /// Text snapshot: a header line followed by run-length encoded occupancy
    /// in row-major order, one `value count` run per line.
    pub fn write_snapshot(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "grid origin_x={:e} origin_y={:e} dsx={:e} dsy={:e} nx={} ny={}",
            self.origin.x, self.origin.y, self.dsx, self.dsy, self.nx, self.ny
        )?;
        let mut bits = self.occupancy.iter().by_vals();
        let Some(mut current) = bits.next() else { return Ok(()) };
        let mut run = 1usize;
        for b in bits {
            if b == current {
                run += 1;
            } else {
                writeln!(w, "{} {}", current as u8, run)?;
                current = b;
                run = 1;
            }
        }
        writeln!(w, "{} {}", current as u8, run)
    }

    pub fn read_snapshot(r: impl BufRead) -> Result<Self> {
        let bad = |msg: String| Error::Config(format!("grid snapshot: {msg}"));
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?.map_err(|e| bad(e.to_string()))?;
        let field = |name: &str| -> Result<&str> {
            header
                .split_whitespace()
                .find_map(|kv| kv.strip_prefix(name).and_then(|s| s.strip_prefix('=')))
                .ok_or_else(|| bad(format!("missing {name}")))
        };
        let num = |name: &str| -> Result<f64> { field(name)?.parse().map_err(|_| bad(format!("bad {name}"))) };
        let count = |name: &str| -> Result<usize> { field(name)?.parse().map_err(|_| bad(format!("bad {name}"))) };
        let (nx, ny) = (count("nx")?, count("ny")?);
        let mut occupancy = BitVec::with_capacity(nx * ny);
        for line in lines {
            let line = line.map_err(|e| bad(e.to_string()))?;
            let mut it = line.split_whitespace();
            let (Some(v), Some(n)) = (it.next(), it.next()) else { continue };
            let n: usize = n.parse().map_err(|_| bad(format!("bad run '{line}'")))?;
            occupancy.resize(occupancy.len() + n, v == "1");
        }
        if occupancy.len() != nx * ny {
            return Err(bad(format!("{} cells for a {nx} × {ny} grid", occupancy.len())));
        }
        Ok(Self {
            origin: Vector2::new(num("origin_x")?, num("origin_y")?),
            dsx: num("dsx")?,
            dsy: num("dsy")?,
            nx,
            ny,
            occupancy,
        })
    }
}

/// Intersects `[lo, hi]` with `{x : k·x ≥ rhs}`; returns false if empty.
fn clip(lo: &mut f64, hi: &mut f64, k: f64, rhs: f64) -> bool {
    if k > 0.0 {
        *lo = lo.max(rhs / k);
    } else if k < 0.0 {
        *hi = hi.min(rhs / k);
    } else if rhs > 0.0 {
        return false;
    }
    lo <= hi
}

/// Chip thickness estimate `h = A / (R Δφ)`.
pub fn chip_thickness(area: f64, radius: f64, dphi: f64) -> Result<f64> {
    if !(dphi > 0.0) {
        return Err(Error::DegenerateStep(format!("zero swept angle (Δφ = {dphi})")));
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidParameter(format!("tool radius must be positive (got {radius})")));
    }
    Ok((area / (radius * dphi)).max(0.0))
}

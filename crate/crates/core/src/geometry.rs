//! Hexagonal cellular airspace: 19 cells in a center cell plus two rings.
//!
//! Layout: the center cell is id 0. Ring 1 holds ids 1..=6 and ring 2 holds
//! ids 7..=18. Each ring is numbered clockwise starting from its northernmost
//! cell. Adjacent cell centers are `2 * cell_radius` apart, so ring 2 has six
//! corner cells (even offset from 7) at `4r` and six edge cells at `2√3 r`.
//!
//! Headings and rotations use the compass convention: degrees clockwise from
//! north, with `x` pointing east and `y` pointing north.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METERS_PER_FOOT: f64 = 0.3048;
pub const DEFAULT_CELL_RADIUS_M: f64 = 2000.0;
pub const CELL_COUNT: u8 = 19;
pub const OUTER_RING: std::ops::RangeInclusive<u8> = 7..=18;

pub fn ft_to_m(feet: f64) -> f64 {
    feet * METERS_PER_FOOT
}

pub fn m_to_ft(meters: f64) -> f64 {
    meters / METERS_PER_FOOT
}

/// Planar vector in meters (x east, y north).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

pub type Position2D = Vec2;

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    /// Vector of length `magnitude` pointing along a compass heading.
    pub fn from_heading(heading_deg: f64, magnitude: f64) -> Self {
        let rad = heading_deg.to_radians();
        Vec2::new(magnitude * rad.sin(), magnitude * rad.cos())
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    /// Compass bearing of this vector in `[0, 360)`.
    pub fn heading_deg(self) -> f64 {
        normalize_heading(self.x.atan2(self.y).to_degrees())
    }

    /// Rotates clockwise (compass sense) by `deg` degrees.
    pub fn rotated_cw(self, deg: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        Vec2::new(self.x * c + self.y * s, -self.x * s + self.y * c)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Horizontal position in meters plus altitude in feet.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position3D {
    pub x: f64,
    pub y: f64,
    pub alt_ft: f64,
}

impl Position3D {
    pub fn new(x: f64, y: f64, alt_ft: f64) -> Self {
        Position3D { x, y, alt_ft }
    }

    pub fn from_horizontal(p: Vec2, alt_ft: f64) -> Self {
        Position3D::new(p.x, p.y, alt_ft)
    }

    pub fn horizontal(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.alt_ft.is_finite()
    }
}

/// Wraps any angle into `[0, 360)`.
pub fn normalize_heading(deg: f64) -> f64 {
    let h = deg.rem_euclid(360.0);
    // rem_euclid can return 360.0 for tiny negative inputs
    if h >= 360.0 {
        0.0
    } else {
        h
    }
}

/// Signed turn from `from` to `to` along the shorter arc, in `(-180, 180]`.
/// Positive is clockwise; a reversal (within rounding noise) resolves clockwise.
pub fn heading_delta(from: f64, to: f64) -> f64 {
    let d = (to - from).rem_euclid(360.0);
    if d > 180.0 + REVERSAL_TOLERANCE_DEG {
        d - 360.0
    } else {
        d.min(180.0)
    }
}

/// Headings recovered from velocity vectors carry rounding noise; reversals
/// closer than this to 180° all turn the same way.
const REVERSAL_TOLERANCE_DEG: f64 = 1e-6;

/// Unsigned angular distance in `[0, 180]`.
pub fn angular_distance(a: f64, b: f64) -> f64 {
    heading_delta(a, b).abs()
}

/// Cell identifier in `0..=18`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct CellId(u8);

impl CellId {
    pub const CENTER: CellId = CellId(0);

    pub fn new(id: u8) -> Result<Self> {
        if id < CELL_COUNT {
            Ok(CellId(id))
        } else {
            Err(Error::InvalidCell(id))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn ring(self) -> u8 {
        match self.0 {
            0 => 0,
            1..=6 => 1,
            _ => 2,
        }
    }

    pub fn all() -> impl Iterator<Item = CellId> {
        (0..CELL_COUNT).map(CellId)
    }

    pub fn outer() -> impl Iterator<Item = CellId> {
        OUTER_RING.map(CellId)
    }

    /// Position along its ring (0 = northernmost), or 0 for the center.
    fn ring_index(self) -> u8 {
        match self.ring() {
            0 => 0,
            1 => self.0 - 1,
            _ => self.0 - 7,
        }
    }

    /// Cube coordinates of the cell in the hexagonal lattice.
    pub(crate) fn cube(self) -> Cube {
        match self.ring() {
            0 => Cube::ORIGIN,
            1 => Cube::DIRECTIONS[self.ring_index() as usize],
            _ => {
                let i = self.ring_index() as usize;
                let k = i / 2;
                if i.is_multiple_of(2) {
                    Cube::DIRECTIONS[k].scale(2)
                } else {
                    Cube::DIRECTIONS[k].add(Cube::DIRECTIONS[(k + 1) % 6])
                }
            }
        }
    }
}

impl TryFrom<u8> for CellId {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        CellId::new(v)
    }
}

impl From<CellId> for u8 {
    fn from(c: CellId) -> u8 {
        c.0
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Cube coordinates `(a, b, c)` with `a + b + c = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) struct Cube {
    a: i32,
    b: i32,
    c: i32,
}

impl Cube {
    const ORIGIN: Cube = Cube { a: 0, b: 0, c: 0 };

    /// Neighbor directions clockwise from north.
    const DIRECTIONS: [Cube; 6] = [
        Cube { a: 0, b: 1, c: -1 },
        Cube { a: 1, b: 0, c: -1 },
        Cube { a: 1, b: -1, c: 0 },
        Cube { a: 0, b: -1, c: 1 },
        Cube { a: -1, b: 0, c: 1 },
        Cube { a: -1, b: 1, c: 0 },
    ];

    fn add(self, o: Cube) -> Cube {
        Cube { a: self.a + o.a, b: self.b + o.b, c: self.c + o.c }
    }

    fn scale(self, k: i32) -> Cube {
        Cube { a: self.a * k, b: self.b * k, c: self.c * k }
    }

    pub(crate) fn distance(self, o: Cube) -> u32 {
        let da = (self.a - o.a).unsigned_abs();
        let db = (self.b - o.b).unsigned_abs();
        let dc = (self.c - o.c).unsigned_abs();
        da.max(db).max(dc)
    }

    /// Planar position for a lattice of the given center spacing. Axis `b`
    /// runs north and axis `a` runs along bearing 60°.
    fn to_plane(self, spacing: f64) -> Vec2 {
        let north = Vec2::from_heading(0.0, spacing);
        let ene = Vec2::from_heading(60.0, spacing);
        north * f64::from(self.b) + ene * f64::from(self.a)
    }
}

/// Number of lattice steps between two cells.
pub fn hex_distance(a: CellId, b: CellId) -> u32 {
    a.cube().distance(b.cube())
}

/// Steps between two outer-ring cells along the 12-cell ring.
pub fn ring_steps(a: CellId, b: CellId) -> u32 {
    let d = (i32::from(a.ring_index()) - i32::from(b.ring_index())).rem_euclid(12) as u32;
    d.min(12 - d)
}

/// Rotates a cell clockwise by `k × 60°` about the center.
pub fn rotate_cell(cell: CellId, k: i32) -> CellId {
    let k = k.rem_euclid(6) as u8;
    match cell.ring() {
        0 => cell,
        1 => CellId(1 + (cell.ring_index() + k) % 6),
        _ => CellId(7 + (cell.ring_index() + 2 * k) % 12),
    }
}

/// The cellular airspace: lattice scale and precomputed centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct Airspace {
    cell_radius: f64,
    centroids: [Vec2; CELL_COUNT as usize],
}

impl Airspace {
    pub fn new(cell_radius: f64) -> Result<Self> {
        if !(cell_radius.is_finite() && cell_radius > 0.0) {
            return Err(Error::domain(format!("cell radius must be positive, got {cell_radius}")));
        }
        let mut centroids = [Vec2::ZERO; CELL_COUNT as usize];
        for cell in CellId::all() {
            centroids[cell.0 as usize] = cell.cube().to_plane(2.0 * cell_radius);
        }
        Ok(Airspace { cell_radius, centroids })
    }

    pub fn cell_radius(&self) -> f64 {
        self.cell_radius
    }

    pub fn centroid(&self, cell: CellId) -> Vec2 {
        self.centroids[cell.0 as usize]
    }

    /// Distance from the center to the farthest cell edge.
    pub fn extent(&self) -> f64 {
        self.centroids.iter().map(|c| c.norm()).fold(0.0, f64::max) + self.cell_radius
    }
}

impl Default for Airspace {
    fn default() -> Self {
        Airspace::new(DEFAULT_CELL_RADIUS_M).expect("default radius is valid")
    }
}

/// Centroid of `cell` in `airspace`.
pub fn cell_centroid(cell: CellId, airspace: &Airspace) -> Position2D {
    airspace.centroid(cell)
}

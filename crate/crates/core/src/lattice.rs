//! Truncated-octahedron partition of velocity space on a BCC center lattice.
//!
//! Cell centers form a body-centered cubic lattice: the corner sublattice at
//! `ell * (i, j, k)` and the body-center sublattice at
//! `ell * (i+1/2, j+1/2, k+1/2)`. Internally both are addressed with doubled
//! integer coordinates `(2i [+1], 2j [+1], 2k [+1])`, so a center is
//! `(ell/2) * doubled` and lattice offsets stay closed under subtraction.
//!
//! A velocity lies in the open cell around center `c` iff
//! `|xi_i - c_i| < ell/2` for each axis and
//! `|xi_1-c_1| + |xi_2-c_2| + |xi_3-c_3| < (3/4) ell`.

use crate::gauss::GaussLegendre;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LatticeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("cell index {0:?} is not in the active set")]
    NotActive(CellIndex),
}

/// Which BCC sublattice a cell belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Parity {
    Even,
    Odd,
}

/// Integer coordinates of one truncated-octahedron cell.
///
/// Stored as doubled coordinates with all three components of equal parity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellIndex {
    doubled: [i64; 3],
}

impl CellIndex {
    /// From sublattice coordinates `(i, j, k)` and parity.
    pub fn new(i: i64, j: i64, k: i64, parity: Parity) -> Self {
        let p = match parity {
            Parity::Even => 0,
            Parity::Odd => 1,
        };
        Self {
            doubled: [2 * i + p, 2 * j + p, 2 * k + p],
        }
    }

    /// From doubled coordinates; all components must share parity.
    pub fn from_doubled(d: [i64; 3]) -> Self {
        debug_assert!(
            (d[0] & 1) == (d[1] & 1) && (d[1] & 1) == (d[2] & 1),
            "mixed-parity doubled coordinates {d:?}"
        );
        Self { doubled: d }
    }

    pub fn doubled(&self) -> [i64; 3] {
        self.doubled
    }

    pub fn parity(&self) -> Parity {
        if self.doubled[0] & 1 == 0 {
            Parity::Even
        } else {
            Parity::Odd
        }
    }

    /// Sublattice coordinates `(i, j, k)`.
    pub fn ijk(&self) -> [i64; 3] {
        let p = self.doubled[0] & 1;
        [
            (self.doubled[0] - p) / 2,
            (self.doubled[1] - p) / 2,
            (self.doubled[2] - p) / 2,
        ]
    }

    /// Cell center in velocity units.
    pub fn center(&self, ell: f64) -> [f64; 3] {
        let h = 0.5 * ell;
        [
            self.doubled[0] as f64 * h,
            self.doubled[1] as f64 * h,
            self.doubled[2] as f64 * h,
        ]
    }

    /// Squared center norm in units of `(ell/2)^2` (exact integer).
    pub fn norm2_doubled(&self) -> i64 {
        let [a, b, c] = self.doubled;
        a * a + b * b + c * c
    }
}

/// The 14 neighbor offsets in doubled coordinates: 8 corner neighbors of
/// opposite parity and 6 face neighbors of equal parity.
pub const NEIGHBOR_OFFSETS: [[i64; 3]; 14] = [
    [1, 1, 1],
    [1, 1, -1],
    [1, -1, 1],
    [1, -1, -1],
    [-1, 1, 1],
    [-1, 1, -1],
    [-1, -1, 1],
    [-1, -1, -1],
    [2, 0, 0],
    [-2, 0, 0],
    [0, 2, 0],
    [0, -2, 0],
    [0, 0, 2],
    [0, 0, -2],
];

/// Result of a point-location query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Located {
    Cell(CellIndex),
    /// Equidistant from two or more centers (a cell boundary, measure zero).
    Boundary,
}

/// Finite active set of truncated-octahedron cells inside a velocity ball.
#[derive(Debug, Clone)]
pub struct VelocityLattice {
    ell: f64,
    active_radius: f64,
    cells: Vec<CellIndex>,
    ordinals: HashMap<[i64; 3], usize>,
}

impl VelocityLattice {
    /// Build the lattice keeping every cell with `|center| <= active_radius`.
    ///
    /// Ordinals are assigned by sorting on `(|center|^2, k, j, i, parity)`,
    /// so the numbering is reproducible across runs and platforms.
    pub fn build(ell: f64, active_radius: f64) -> Result<Self, LatticeError> {
        if !(ell > 0.0) || !ell.is_finite() {
            return Err(LatticeError::InvalidArgument(format!(
                "cell width must be positive, got {ell}"
            )));
        }
        if !(active_radius > 0.0) || !active_radius.is_finite() {
            return Err(LatticeError::InvalidArgument(format!(
                "active radius must be positive, got {active_radius}"
            )));
        }
        let lim = (2.0 * active_radius / ell).ceil() as i64 + 1;
        let r2_doubled = (2.0 * active_radius / ell) * (2.0 * active_radius / ell);
        let mut cells = Vec::new();
        for i in -lim..=lim {
            for j in -lim..=lim {
                for k in -lim..=lim {
                    if (i & 1) == (j & 1) && (j & 1) == (k & 1) {
                        let n2 = (i * i + j * j + k * k) as f64;
                        if n2 <= r2_doubled {
                            cells.push(CellIndex::from_doubled([i, j, k]));
                        }
                    }
                }
            }
        }
        cells.sort_by_key(|c| {
            let [i, j, k] = c.ijk();
            let p = c.doubled[0] & 1;
            (c.norm2_doubled(), k, j, i, p)
        });
        let ordinals = cells
            .iter()
            .enumerate()
            .map(|(a, c)| (c.doubled, a))
            .collect();
        Ok(Self {
            ell,
            active_radius,
            cells,
            ordinals,
        })
    }

    pub fn ell(&self) -> f64 {
        self.ell
    }

    pub fn active_radius(&self) -> f64 {
        self.active_radius
    }

    /// Number of active cells.
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[CellIndex] {
        &self.cells
    }

    pub fn cell(&self, ordinal: usize) -> CellIndex {
        self.cells[ordinal]
    }

    /// Dense ordinal of an active cell, if any.
    pub fn ordinal(&self, index: CellIndex) -> Option<usize> {
        self.ordinals.get(&index.doubled).copied()
    }

    /// Circumradius of a cell (distance from center to its farthest vertex).
    pub fn circumradius(&self) -> f64 {
        5.0f64.sqrt() / 4.0 * self.ell
    }

    /// Strict membership test against the four open-cell inequalities.
    pub fn contains(&self, index: CellIndex, xi: [f64; 3]) -> bool {
        let c = index.center(self.ell);
        let dx = (xi[0] - c[0]).abs();
        let dy = (xi[1] - c[1]).abs();
        let dz = (xi[2] - c[2]).abs();
        let h = 0.5 * self.ell;
        dx < h && dy < h && dz < h && dx + dy + dz < 0.75 * self.ell
    }

    /// Index of the cell whose center is strictly nearest to `xi`, searched
    /// over the whole (unbounded) center lattice. Exact ties are reported as
    /// `Located::Boundary`.
    pub fn locate(&self, xi: [f64; 3]) -> Located {
        let q = [
            xi[0] * 2.0 / self.ell,
            xi[1] * 2.0 / self.ell,
            xi[2] * 2.0 / self.ell,
        ];
        // Bracketing even and odd doubled coordinates per axis.
        let mut even = [[0i64; 2]; 3];
        let mut odd = [[0i64; 2]; 3];
        for a in 0..3 {
            let e = 2.0 * (q[a] / 2.0).floor();
            even[a] = [e as i64, e as i64 + 2];
            let o = 2.0 * ((q[a] - 1.0) / 2.0).floor() + 1.0;
            odd[a] = [o as i64, o as i64 + 2];
        }
        let mut best = f64::INFINITY;
        let mut best_idx = [0i64; 3];
        let mut tie = false;
        for cand in [even, odd] {
            for &x in &cand[0] {
                for &y in &cand[1] {
                    for &z in &cand[2] {
                        let d2 = (q[0] - x as f64) * (q[0] - x as f64)
                            + (q[1] - y as f64) * (q[1] - y as f64)
                            + (q[2] - z as f64) * (q[2] - z as f64);
                        if d2 < best {
                            best = d2;
                            best_idx = [x, y, z];
                            tie = false;
                        } else if d2 == best && [x, y, z] != best_idx {
                            tie = true;
                        }
                    }
                }
            }
        }
        if tie {
            Located::Boundary
        } else {
            Located::Cell(CellIndex::from_doubled(best_idx))
        }
    }

    /// The 14 lattice neighbors (not restricted to the active set).
    pub fn neighbors(&self, index: CellIndex) -> [CellIndex; 14] {
        let d = index.doubled;
        let mut out = [index; 14];
        for (o, off) in out.iter_mut().zip(NEIGHBOR_OFFSETS) {
            *o = CellIndex::from_doubled([d[0] + off[0], d[1] + off[1], d[2] + off[2]]);
        }
        out
    }

    /// Geometric moments of one active cell under the given quadrature rule.
    pub fn cell_geometry(
        &self,
        index: CellIndex,
        rule: &CellRule,
    ) -> Result<CellGeometry, LatticeError> {
        if self.ordinal(index).is_none() {
            return Err(LatticeError::NotActive(index));
        }
        Ok(CellGeometry::compute(index.center(self.ell), self.ell, rule))
    }

    /// Monte-Carlo estimate of the cell volume over the bounding cube with a
    /// fixed seed; returns `(estimate, standard_error)`. Validation helper
    /// for the analytic value `ell^3 / 2`.
    pub fn mc_volume(&self, samples: u64, seed: u64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let origin = CellIndex::from_doubled([0, 0, 0]);
        let h = 0.5 * self.ell;
        let mut hits = 0u64;
        for _ in 0..samples {
            let p = [
                rng.gen_range(-h..h),
                rng.gen_range(-h..h),
                rng.gen_range(-h..h),
            ];
            if self.contains(origin, p) {
                hits += 1;
            }
        }
        let cube = self.ell.powi(3);
        let frac = hits as f64 / samples as f64;
        let se = (frac * (1.0 - frac) / samples as f64).sqrt();
        (frac * cube, se * cube)
    }
}

/// Nearest BCC center in doubled coordinates, ties broken toward the corner
/// sublattice. Fast path for quadrature sweeps; boundary hits are measure
/// zero there.
#[inline]
pub(crate) fn nearest_center_doubled(ell: f64, p: [f64; 3]) -> [i64; 3] {
    let s = 2.0 / ell;
    let q = [p[0] * s, p[1] * s, p[2] * s];
    let mut e = [0.0f64; 3];
    let mut o = [0.0f64; 3];
    let mut de = 0.0;
    let mut dd = 0.0;
    for a in 0..3 {
        e[a] = 2.0 * (q[a] / 2.0).round_ties_even();
        o[a] = 2.0 * ((q[a] - 1.0) / 2.0).round_ties_even() + 1.0;
        de += (q[a] - e[a]) * (q[a] - e[a]);
        dd += (q[a] - o[a]) * (q[a] - o[a]);
    }
    if de <= dd {
        [e[0] as i64, e[1] as i64, e[2] as i64]
    } else {
        [o[0] as i64, o[1] as i64, o[2] as i64]
    }
}

/// Per-cell geometric moments.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGeometry {
    pub center: [f64; 3],
    /// Analytic cell volume `ell^3 / 2`.
    pub volume: f64,
    pub mean_velocity: [f64; 3],
    /// Column i is the mean of `xi * xi_i` over the cell.
    pub second_moments: [[f64; 3]; 3],
    pub energy_flux: [f64; 3],
}

impl CellGeometry {
    fn compute(center: [f64; 3], ell: f64, rule: &CellRule) -> Self {
        let mut mass = 0.0;
        let mut m1 = [0.0f64; 3];
        let mut m2 = [[0.0f64; 3]; 3];
        let mut ef = [0.0f64; 3];
        for (eta, w) in rule.nodes.iter().zip(&rule.weights) {
            let xi = [center[0] + eta[0], center[1] + eta[1], center[2] + eta[2]];
            let n2 = xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2];
            mass += w;
            for a in 0..3 {
                m1[a] += w * xi[a];
                ef[a] += w * xi[a] * n2;
                for bb in 0..3 {
                    m2[a][bb] += w * xi[a] * xi[bb];
                }
            }
        }
        let inv = 1.0 / mass;
        for a in 0..3 {
            m1[a] *= inv;
            ef[a] *= inv;
            for bb in 0..3 {
                m2[a][bb] *= inv;
            }
        }
        Self {
            center,
            volume: 0.5 * ell.powi(3),
            mean_velocity: m1,
            second_moments: m2,
            energy_flux: ef,
        }
    }

    /// Per-axis second central moment, averaged over the three axes.
    pub fn central_second_moment(&self) -> f64 {
        let mut d = 0.0;
        for a in 0..3 {
            d += self.second_moments[a][a] - self.center[a] * self.center[a];
        }
        d / 3.0
    }
}

/// Product Gauss–Legendre rule over an exact decomposition of the reference
/// cell (centered at the origin).
///
/// The cell is sliced along z into four smooth pieces; each z-slice is an
/// octagon (central band plus two trapezoids) or a diamond cap (two
/// triangles). Every piece maps polynomially onto a box, so the rule
/// integrates the cell volume and low-degree moments exactly and converges
/// spectrally for smooth integrands. The node set is exactly symmetric under
/// point reflection.
#[derive(Debug, Clone)]
pub struct CellRule {
    pub order: usize,
    pub nodes: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl CellRule {
    pub fn new(order: usize, ell: f64) -> Result<Self, LatticeError> {
        if order == 0 {
            return Err(LatticeError::InvalidArgument(
                "cell quadrature order must be at least 1".into(),
            ));
        }
        if !(ell > 0.0) {
            return Err(LatticeError::InvalidArgument(format!(
                "cell width must be positive, got {ell}"
            )));
        }
        let gl = GaussLegendre::new(order);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let q = 0.25 * ell;
        let h = 0.5 * ell;
        // (z_lo, z_hi, is_cap)
        let intervals = [(-h, -q, true), (-q, 0.0, false), (0.0, q, false), (q, h, true)];
        for (za, zb, cap) in intervals {
            for (z, wz) in gl.mapped(za, zb) {
                let c = 0.75 * ell - z.abs();
                if !cap {
                    let band = c - h;
                    for (y, wy) in gl.mapped(-band, band) {
                        for (x, wx) in gl.mapped(-h, h) {
                            nodes.push([x, y, z]);
                            weights.push(wx * wy * wz);
                        }
                    }
                    for sgn in [1.0, -1.0] {
                        for (y, wy) in gl.mapped(band, h) {
                            let half = c - y;
                            for (x, wx) in gl.mapped(-half, half) {
                                nodes.push([x, sgn * y, z]);
                                weights.push(wx * wy * wz);
                            }
                        }
                    }
                } else {
                    for sgn in [1.0, -1.0] {
                        for (y, wy) in gl.mapped(0.0, c) {
                            let half = c - y;
                            for (x, wx) in gl.mapped(-half, half) {
                                nodes.push([x, sgn * y, z]);
                                weights.push(wx * wy * wz);
                            }
                        }
                    }
                }
            }
        }
        Ok(Self {
            order,
            nodes,
            weights,
        })
    }

    /// Total quadrature mass (the cell volume, exact to roundoff).
    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const D_REF: f64 = 19.0 / 384.0; // second central moment of the unit cell

    #[test]
    fn build_rejects_bad_arguments() {
        assert!(matches!(
            VelocityLattice::build(0.0, 1.0),
            Err(LatticeError::InvalidArgument(_))
        ));
        assert!(matches!(
            VelocityLattice::build(1.0, -2.0),
            Err(LatticeError::InvalidArgument(_))
        ));
        assert!(matches!(
            VelocityLattice::build(f64::NAN, 1.0),
            Err(LatticeError::InvalidArgument(_))
        ));
    }

    /// Brute-force enumeration of BCC centers inside the ball, used as the
    /// oracle for the active-set contents.
    fn brute_force_cells(ell: f64, radius: f64) -> Vec<[i64; 3]> {
        let lim = (2.0 * radius / ell).ceil() as i64 + 2;
        let mut out = Vec::new();
        for i in -lim..=lim {
            for j in -lim..=lim {
                for k in -lim..=lim {
                    if (i & 1) == (j & 1) && (j & 1) == (k & 1) {
                        let c = [
                            i as f64 * ell / 2.0,
                            j as f64 * ell / 2.0,
                            k as f64 * ell / 2.0,
                        ];
                        let n = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
                        if n <= radius {
                            out.push([i, j, k]);
                        }
                    }
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn active_set_matches_brute_force() {
        // ell=1, R=1: origin, the 8 corner-sublattice cells at sqrt(3)/2 and
        // the 6 axis cells at exactly |center| = 1.
        let lat = VelocityLattice::build(1.0, 1.0).unwrap();
        let oracle = brute_force_cells(1.0, 1.0);
        assert_eq!(lat.len(), oracle.len());
        assert_eq!(lat.len(), 15);
        let mut got: Vec<[i64; 3]> = lat.cells().iter().map(|c| c.doubled()).collect();
        got.sort();
        assert_eq!(got, oracle);
    }

    #[test]
    fn tiny_radius_keeps_only_origin() {
        let lat = VelocityLattice::build(1.0, 0.4).unwrap();
        assert_eq!(lat.len(), 1);
        assert_eq!(lat.cell(0).doubled(), [0, 0, 0]);
    }

    #[test]
    fn lattice_scales_with_ell() {
        let a = VelocityLattice::build(1.0, 1.0).unwrap();
        let b = VelocityLattice::build(2.0, 2.0).unwrap();
        assert_eq!(a.len(), b.len());
        for (ca, cb) in a.cells().iter().zip(b.cells()) {
            let pa = ca.center(1.0);
            let pb = cb.center(2.0);
            for ax in 0..3 {
                assert!((2.0 * pa[ax] - pb[ax]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn ordinals_deterministic_and_dense() {
        let lat = VelocityLattice::build(1.0, 2.0).unwrap();
        for (a, c) in lat.cells().iter().enumerate() {
            assert_eq!(lat.ordinal(*c), Some(a));
        }
        let lat2 = VelocityLattice::build(1.0, 2.0).unwrap();
        assert_eq!(lat.cells(), lat2.cells());
    }

    #[test]
    fn contains_strict_inequalities() {
        let lat = VelocityLattice::build(1.0, 2.0).unwrap();
        let cell = lat.cell(5);
        let c = cell.center(1.0);
        assert!(lat.contains(cell, c));
        assert!(!lat.contains(cell, [c[0] + 0.5, c[1], c[2]]));
        // sum = 3/4 exactly is excluded
        assert!(!lat.contains(cell, [c[0] + 0.25, c[1] + 0.25, c[2] + 0.25]));
        // just inside
        assert!(lat.contains(cell, [c[0] + 0.2, c[1] + 0.2, c[2] + 0.2]));
    }

    #[test]
    fn locate_center_and_members() {
        let lat = VelocityLattice::build(1.0, 2.0).unwrap();
        for &cell in lat.cells() {
            assert_eq!(lat.locate(cell.center(1.0)), Located::Cell(cell));
        }
    }

    #[test]
    fn locate_flags_face_points_as_boundary() {
        let lat = VelocityLattice::build(1.0, 2.0).unwrap();
        // square-face midpoint between (0,0,0) and (1,0,0) centers
        assert_eq!(lat.locate([0.5, 0.0, 0.0]), Located::Boundary);
        // hexagonal-face point between (0,0,0) and the (1,1,1)/2 center
        assert_eq!(lat.locate([0.25, 0.25, 0.25]), Located::Boundary);
    }

    #[test]
    fn locate_agrees_with_brute_force_nearest() {
        let lat = VelocityLattice::build(0.7, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut boundary = 0u32;
        let n = 100_000;
        for _ in 0..n {
            let p = [
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
            ];
            match lat.locate(p) {
                Located::Boundary => boundary += 1,
                Located::Cell(cell) => {
                    // brute force over all centers in a generous box
                    let mut best = f64::INFINITY;
                    let mut best_d = [0i64; 3];
                    for i in -8..=8i64 {
                        for j in -8..=8i64 {
                            for k in -8..=8i64 {
                                if (i & 1) == (j & 1) && (j & 1) == (k & 1) {
                                    let c = [
                                        i as f64 * 0.35,
                                        j as f64 * 0.35,
                                        k as f64 * 0.35,
                                    ];
                                    let d2 = (p[0] - c[0]).powi(2)
                                        + (p[1] - c[1]).powi(2)
                                        + (p[2] - c[2]).powi(2);
                                    if d2 < best {
                                        best = d2;
                                        best_d = [i, j, k];
                                    }
                                }
                            }
                        }
                    }
                    assert_eq!(cell.doubled(), best_d, "point {p:?}");
                }
            }
        }
        assert!(boundary < n / 10_000, "too many boundary flags: {boundary}");
    }

    #[test]
    fn fourteen_neighbors_with_expected_distances() {
        let lat = VelocityLattice::build(1.0, 2.0).unwrap();
        let origin = CellIndex::from_doubled([0, 0, 0]);
        let nbrs = lat.neighbors(origin);
        assert_eq!(nbrs.len(), 14);
        let mut corner = 0;
        let mut face = 0;
        for nb in nbrs {
            let c = nb.center(1.0);
            let d = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
            if (d - 3.0f64.sqrt() / 2.0).abs() < 1e-12 {
                corner += 1;
                assert_eq!(
                    nb.parity(),
                    Parity::Odd,
                    "corner neighbors swap sublattice"
                );
            } else if (d - 1.0).abs() < 1e-12 {
                face += 1;
                assert_eq!(nb.parity(), Parity::Even);
            } else {
                panic!("unexpected neighbor distance {d}");
            }
        }
        assert_eq!((corner, face), (8, 6));
    }

    #[test]
    fn neighbor_relation_symmetric() {
        let lat = VelocityLattice::build(1.0, 2.0).unwrap();
        for &cell in lat.cells() {
            for nb in lat.neighbors(cell) {
                assert!(lat.neighbors(nb).contains(&cell));
            }
        }
    }

    #[test]
    fn nearest_center_property_on_members() {
        // contains(alpha, xi) implies the center of alpha is nearer than any
        // of the 14 neighbor centers (sufficient by the Voronoi property).
        let lat = VelocityLattice::build(1.0, 1.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cell = CellIndex::from_doubled([1, 1, 1]);
        let c = cell.center(1.0);
        let mut tested = 0;
        while tested < 100_000 {
            let p = [
                c[0] + rng.gen_range(-0.5..0.5),
                c[1] + rng.gen_range(-0.5..0.5),
                c[2] + rng.gen_range(-0.5..0.5),
            ];
            if !lat.contains(cell, p) {
                continue;
            }
            tested += 1;
            let d0 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
            for nb in lat.neighbors(cell) {
                let cn = nb.center(1.0);
                let dn =
                    (p[0] - cn[0]).powi(2) + (p[1] - cn[1]).powi(2) + (p[2] - cn[2]).powi(2);
                assert!(d0 < dn);
            }
        }
    }

    #[test]
    fn partition_property_random_points() {
        let lat = VelocityLattice::build(1.0, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 1_000_000u32;
        let mut boundary = 0u32;
        for _ in 0..n {
            let p = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            match lat.locate(p) {
                Located::Boundary => boundary += 1,
                Located::Cell(cell) => assert!(lat.contains(cell, p), "{p:?}"),
            }
        }
        assert!((boundary as f64) < n as f64 * 1e-4);
    }

    #[test]
    fn cell_rule_integrates_volume_and_moments_exactly() {
        for order in [2usize, 3, 4, 6] {
            let rule = CellRule::new(order, 1.0).unwrap();
            assert!((rule.mass() - 0.5).abs() < 1e-14, "order {order}");
            let lat = VelocityLattice::build(1.0, 1.0).unwrap();
            let g = lat
                .cell_geometry(CellIndex::from_doubled([0, 0, 0]), &rule)
                .unwrap();
            for a in 0..3 {
                assert!(g.mean_velocity[a].abs() < 1e-12);
                assert!(
                    (g.second_moments[a][a] - D_REF).abs() < 1e-13,
                    "order {order} axis {a}: {}",
                    g.second_moments[a][a]
                );
                assert!(g.energy_flux[a].abs() < 1e-12);
            }
            assert!((g.central_second_moment() - D_REF).abs() < 1e-13);
        }
    }

    #[test]
    fn cell_rule_scales_with_ell() {
        let rule = CellRule::new(4, 2.0).unwrap();
        assert!((rule.mass() - 4.0).abs() < 1e-12); // 2^3/2
        let lat = VelocityLattice::build(2.0, 2.0).unwrap();
        let g = lat
            .cell_geometry(CellIndex::from_doubled([0, 0, 0]), &rule)
            .unwrap();
        assert!((g.central_second_moment() - D_REF * 4.0).abs() < 1e-12);
    }

    #[test]
    fn geometry_translation_covariance() {
        let rule = CellRule::new(4, 1.0).unwrap();
        let lat = VelocityLattice::build(1.0, 2.0).unwrap();
        let g0 = lat
            .cell_geometry(CellIndex::from_doubled([0, 0, 0]), &rule)
            .unwrap();
        let c1 = CellIndex::from_doubled([1, 1, 1]);
        let g1 = lat.cell_geometry(c1, &rule).unwrap();
        let c = c1.center(1.0);
        for a in 0..3 {
            assert!((g1.mean_velocity[a] - c[a]).abs() < 1e-12);
            for b in 0..3 {
                let central0 = g0.second_moments[a][b];
                let central1 = g1.second_moments[a][b] - c[a] * c[b];
                assert!((central0 - central1).abs() < 1e-12);
            }
        }
        // energy flux decomposition: e = (|c|^2 + 5 d) c for the exact cell
        let d = g0.central_second_moment();
        let n2 = c.iter().map(|x| x * x).sum::<f64>();
        for a in 0..3 {
            assert!(
                (g1.energy_flux[a] - (n2 + 5.0 * d) * c[a]).abs() < 1e-11,
                "axis {a}"
            );
        }
    }

    #[test]
    fn degenerate_rule_rejected() {
        assert!(matches!(
            CellRule::new(0, 1.0),
            Err(LatticeError::InvalidArgument(_))
        ));
    }

    #[test]
    fn geometry_requires_active_cell() {
        let lat = VelocityLattice::build(1.0, 0.4).unwrap();
        let rule = CellRule::new(2, 1.0).unwrap();
        let far = CellIndex::from_doubled([10, 10, 10]);
        assert!(matches!(
            lat.cell_geometry(far, &rule),
            Err(LatticeError::NotActive(_))
        ));
    }

    #[test]
    fn mc_volume_consistent_with_analytic() {
        let lat = VelocityLattice::build(1.0, 1.0).unwrap();
        let (est, se) = lat.mc_volume(2_000_000, 2024);
        assert!((est - 0.5).abs() < 3.0 * se, "{est} +- {se}");
    }

    #[test]
    fn volume_additivity_over_large_cube() {
        // Cells intersecting the cube [-1.25, 1.25]^3: full cells counted by
        // their analytic volume, rim cells by a seeded MC fraction.
        let ell = 0.5;
        let lat = VelocityLattice::build(ell, 4.0).unwrap();
        let half = 1.25;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut total = 0.0;
        let rc = lat.circumradius();
        for &cell in lat.cells() {
            let c = cell.center(ell);
            if c.iter().any(|&x| x.abs() > half + rc) {
                continue;
            }
            if c.iter().all(|&x| x.abs() < half - rc) {
                total += 0.5 * ell.powi(3);
                continue;
            }
            // rim cell: MC fraction of the cell inside the cube
            let mut hits = 0;
            let n = 20_000;
            let mut tries = 0;
            while hits < n && tries < 40 * n {
                tries += 1;
                let p = [
                    c[0] + rng.gen_range(-0.5 * ell..0.5 * ell),
                    c[1] + rng.gen_range(-0.5 * ell..0.5 * ell),
                    c[2] + rng.gen_range(-0.5 * ell..0.5 * ell),
                ];
                if !lat.contains(cell, p) {
                    continue;
                }
                hits += 1;
                if p.iter().all(|&x| x.abs() < half) {
                    total += 0.5 * ell.powi(3) / n as f64;
                }
            }
        }
        let cube = (2.0 * half).powi(3);
        assert!(
            (total - cube).abs() < 0.01 * cube,
            "sum {total} vs cube {cube}"
        );
    }
}

//! Scattering models, the total cross section, and pointwise gain-kernel
//! evaluation by quadrature over the post-collision sphere.
//!
//! Post-collision velocities lie on the sphere of radius `|V|/2` around the
//! pair midpoint; the gain kernel averages a test function over that sphere
//! with weight `B`. For VHS models `B` depends on `|V|` only and the
//! reduced single-evaluation form applies with prefactor `|V|/4`.

use crate::gauss::GaussLegendre;
use crate::lattice::{CellIndex, VelocityLattice};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

type VhsFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
type GeneralFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Scattering model B. Hard sphere is the constant-B special case of VHS.
#[derive(Clone)]
pub enum KernelModel {
    HardSphere { b: f64 },
    /// Variable hard sphere: `B = bfun(|V|)`. The id names the model in
    /// cache metadata.
    Vhs { id: String, bfun: VhsFn },
    /// General scattering function `B(n·V, |V|)`, evaluated literally.
    General { id: String, bfun: GeneralFn },
}

impl fmt::Debug for KernelModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KernelModel({})", self.id())
    }
}

impl KernelModel {
    pub fn hard_sphere(b: f64) -> Result<Self, KernelError> {
        if !(b >= 0.0) || !b.is_finite() {
            return Err(KernelError::InvalidArgument(format!(
                "hard-sphere rate must be nonnegative, got {b}"
            )));
        }
        Ok(KernelModel::HardSphere { b })
    }

    pub fn vhs(id: impl Into<String>, bfun: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        KernelModel::Vhs {
            id: id.into(),
            bfun: Arc::new(bfun),
        }
    }

    pub fn general(
        id: impl Into<String>,
        bfun: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        KernelModel::General {
            id: id.into(),
            bfun: Arc::new(bfun),
        }
    }

    /// Identifier recorded in coefficient-cache metadata.
    pub fn id(&self) -> String {
        match self {
            KernelModel::HardSphere { b } => format!("hard_sphere(b={b:.17e})"),
            KernelModel::Vhs { id, .. } => format!("vhs({id})"),
            KernelModel::General { id, .. } => format!("general({id})"),
        }
    }

    /// True when B does not depend on the scattering direction.
    pub fn is_vhs(&self) -> bool {
        !matches!(self, KernelModel::General { .. })
    }

    /// B evaluated for VHS-type kernels.
    #[inline]
    pub(crate) fn vhs_b(&self, vmag: f64) -> f64 {
        match self {
            KernelModel::HardSphere { b } => *b,
            KernelModel::Vhs { bfun, .. } => bfun(vmag),
            KernelModel::General { .. } => unreachable!("vhs_b on a general kernel"),
        }
    }

    #[inline]
    pub(crate) fn general_b(&self, ndotv: f64, vmag: f64) -> f64 {
        match self {
            KernelModel::HardSphere { b } => *b,
            KernelModel::Vhs { bfun, .. } => bfun(vmag),
            KernelModel::General { bfun, .. } => bfun(ndotv, vmag),
        }
    }

    /// Total cross section `nu(|V|) = pi |V| \int_0^1 B(|V| s, |V|) s ds`.
    ///
    /// Closed form `(pi/2) |V| B(|V|)` for hard-sphere and VHS models; a
    /// Gauss–Legendre integral in `s` for general kernels.
    pub fn nu(&self, v_mag: f64) -> Result<f64, KernelError> {
        if v_mag < 0.0 || !v_mag.is_finite() {
            return Err(KernelError::InvalidArgument(format!(
                "relative speed must be nonnegative, got {v_mag}"
            )));
        }
        Ok(self.nu_nonneg(v_mag))
    }

    #[inline]
    pub(crate) fn nu_nonneg(&self, v_mag: f64) -> f64 {
        if v_mag == 0.0 {
            return 0.0;
        }
        match self {
            KernelModel::HardSphere { b } => 0.5 * std::f64::consts::PI * v_mag * b,
            KernelModel::Vhs { bfun, .. } => 0.5 * std::f64::consts::PI * v_mag * bfun(v_mag),
            KernelModel::General { bfun, .. } => {
                let gl = GaussLegendre::new(64);
                let mut acc = 0.0;
                for (s, w) in gl.mapped(0.0, 1.0) {
                    acc += w * bfun(v_mag * s, v_mag) * s;
                }
                std::f64::consts::PI * v_mag * acc
            }
        }
    }
}

/// Product rule on the unit sphere: Gauss–Legendre in `s = cos(polar)` and a
/// uniform periodic grid in the azimuth.
#[derive(Debug, Clone)]
pub struct SphereQuadrature {
    /// Unit direction per node.
    pub directions: Vec<[f64; 3]>,
    /// Node weights; they sum to `4 pi`.
    pub weights: Vec<f64>,
    pub n_s: usize,
    pub n_theta: usize,
}

impl SphereQuadrature {
    pub fn new(n_s: usize, n_theta: usize) -> Result<Self, KernelError> {
        if n_s == 0 || n_theta == 0 {
            return Err(KernelError::InvalidArgument(
                "sphere rule orders must be at least 1".into(),
            ));
        }
        let gl = GaussLegendre::new(n_s);
        let wt = 2.0 * std::f64::consts::PI / n_theta as f64;
        let mut directions = Vec::with_capacity(n_s * n_theta);
        let mut weights = Vec::with_capacity(n_s * n_theta);
        for (s, ws) in gl.nodes.iter().zip(&gl.weights) {
            let r = (1.0 - s * s).sqrt();
            for k in 0..n_theta {
                let theta = -std::f64::consts::PI
                    + 2.0 * std::f64::consts::PI * k as f64 / n_theta as f64;
                directions.push([r * theta.cos(), r * theta.sin(), *s]);
                weights.push(ws * wt);
            }
        }
        Ok(Self {
            directions,
            weights,
            n_s,
            n_theta,
        })
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

#[inline]
fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Gain kernel `G(phi; xi, xi*)` by sphere quadrature.
///
/// Returns exactly zero when `xi == xi*` (the prefactor `|V|` vanishes).
pub fn gain_kernel(
    kernel: &KernelModel,
    quad: &SphereQuadrature,
    phi: impl Fn([f64; 3]) -> f64,
    xi: [f64; 3],
    xi_star: [f64; 3],
) -> f64 {
    let v = sub(xi, xi_star);
    let vmag = norm(v);
    if vmag == 0.0 {
        return 0.0;
    }
    let mid = [
        0.5 * (xi[0] + xi_star[0]),
        0.5 * (xi[1] + xi_star[1]),
        0.5 * (xi[2] + xi_star[2]),
    ];
    let r = 0.5 * vmag;
    if kernel.is_vhs() {
        let pref = 0.25 * vmag * kernel.vhs_b(vmag);
        let mut acc = 0.0;
        for (u, w) in quad.directions.iter().zip(&quad.weights) {
            let p = [mid[0] + r * u[0], mid[1] + r * u[1], mid[2] + r * u[2]];
            acc += w * phi(p);
        }
        pref * acc
    } else {
        let pref = 0.125 * vmag;
        let mut acc = 0.0;
        for (u, w) in quad.directions.iter().zip(&quad.weights) {
            let dv = [v[0] - vmag * u[0], v[1] - vmag * u[1], v[2] - vmag * u[2]];
            let bval = kernel.general_b(0.5 * norm(dv), vmag);
            let p = [mid[0] + r * u[0], mid[1] + r * u[1], mid[2] + r * u[2]];
            let q = [mid[0] - r * u[0], mid[1] - r * u[1], mid[2] - r * u[2]];
            acc += w * bval * (phi(p) + phi(q));
        }
        pref * acc
    }
}

/// Gain kernel specialized to the membership indicator of one cell.
pub fn gain_kernel_indicator(
    kernel: &KernelModel,
    quad: &SphereQuadrature,
    lattice: &VelocityLattice,
    alpha: CellIndex,
    xi: [f64; 3],
    xi_star: [f64; 3],
) -> f64 {
    gain_kernel(
        kernel,
        quad,
        |p| if lattice.contains(alpha, p) { 1.0 } else { 0.0 },
        xi,
        xi_star,
    )
}

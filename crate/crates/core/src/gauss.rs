//! Gauss–Legendre quadrature nodes and weights on [-1, 1].
//!
//! Nodes are computed by Newton iteration on the Legendre recurrence and
//! mirrored so that the node set is exactly symmetric about zero. An n-point
//! rule integrates polynomials up to degree 2n-1 exactly.

/// A one-dimensional Gauss–Legendre rule.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Build the n-point rule. Panics if `n == 0`.
    pub fn new(n: usize) -> Self {
        assert!(n > 0, "Gauss-Legendre order must be positive");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            // Tricomi initial guess for the i-th root (descending order).
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() <= 1e-15 * (1.0 + x.abs()) {
                    let (p2, d2) = legendre_with_derivative(n, x);
                    dp = d2;
                    x -= p2 / d2;
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            // Mirror to enforce exact symmetry of the node set.
            nodes[i] = -x.abs();
            weights[i] = w;
            nodes[n - 1 - i] = x.abs();
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
            let (_, d) = legendre_with_derivative(n, 0.0);
            weights[n / 2] = 2.0 / (d * d);
        }
        Self { nodes, weights }
    }

    /// Nodes and weights affinely mapped onto [a, b].
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let mid = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (mid + half * x, half * w))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Evaluate (P_n(x), P_n'(x)) via the three-term recurrence.
fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_low_order_rules() {
        let g2 = GaussLegendre::new(2);
        let r = 1.0 / 3f64.sqrt();
        assert!((g2.nodes[0] + r).abs() < 1e-15);
        assert!((g2.nodes[1] - r).abs() < 1e-15);
        assert!((g2.weights[0] - 1.0).abs() < 1e-15);

        let g3 = GaussLegendre::new(3);
        let r3 = (3.0f64 / 5.0).sqrt();
        assert!((g3.nodes[0] + r3).abs() < 1e-15);
        assert_eq!(g3.nodes[1], 0.0);
        assert!((g3.weights[1] - 8.0 / 9.0).abs() < 1e-15);
        assert!((g3.weights[0] - 5.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn polynomial_exactness() {
        // n-point rule integrates x^k exactly for k <= 2n-1.
        for n in [1usize, 2, 3, 5, 8, 16, 32, 48, 64] {
            let g = GaussLegendre::new(n);
            for k in 0..(2 * n) {
                let quad: f64 = g
                    .nodes
                    .iter()
                    .zip(&g.weights)
                    .map(|(&x, &w)| w * x.powi(k as i32))
                    .sum();
                let exact = if k % 2 == 0 {
                    2.0 / (k as f64 + 1.0)
                } else {
                    0.0
                };
                assert!(
                    (quad - exact).abs() < 5e-14,
                    "n={n} k={k}: {quad} vs {exact}"
                );
            }
        }
    }

    #[test]
    fn node_set_exactly_symmetric() {
        for n in [2usize, 7, 31, 48] {
            let g = GaussLegendre::new(n);
            for i in 0..n {
                assert_eq!(g.nodes[i], -g.nodes[n - 1 - i]);
                assert_eq!(g.weights[i], g.weights[n - 1 - i]);
            }
        }
    }

    #[test]
    fn weights_sum_to_two() {
        for n in [1usize, 4, 13, 48, 64] {
            let g = GaussLegendre::new(n);
            let s: f64 = g.weights.iter().sum();
            assert!((s - 2.0).abs() < 1e-13, "n={n}: {s}");
        }
    }
}

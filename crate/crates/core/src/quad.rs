//! Gauss-Legendre rules and triangle quadrature built on the collapsed-square
//! map of the reference triangle.

use crate::vec3::Vec3;

/// Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1], computed
/// by Newton iteration on the Legendre polynomial.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, x);
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    // Newton's initial guesses enumerate roots in descending order; flip to
    // ascending for a stable, documented layout.
    nodes.reverse();
    weights.reverse();
    (nodes, weights)
}

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

/// n-point Gauss-Legendre rule transformed to (a, b).
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (xs, ws) = gauss_legendre(n);
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    (
        xs.iter().map(|&x| mid + half * x).collect(),
        ws.iter().map(|&w| w * half).collect(),
    )
}

/// A quadrature point on the reference triangle {0 <= x2 <= x1 <= 1} with a
/// weight that sums to the reference area 1/2 over the rule.
#[derive(Debug, Clone, Copy)]
pub struct TrianglePoint {
    pub xi1: f64,
    pub xi2: f64,
    pub weight: f64,
}

/// Tensor Gauss rule on the reference triangle via the collapsed square
/// (xi1, xi2) = (u, u v); exact for polynomials of total degree <= n - 1
/// (and in practice through degree n for the collapsed parametrization).
pub fn triangle_rule(n: usize) -> Vec<TrianglePoint> {
    let (xs, ws) = gauss_legendre(n);
    let mut pts = Vec::with_capacity(n * n);
    for i in 0..n {
        let u = 0.5 * (xs[i] + 1.0);
        let wu = 0.5 * ws[i];
        for j in 0..n {
            let v = 0.5 * (xs[j] + 1.0);
            let wv = 0.5 * ws[j];
            pts.push(TrianglePoint { xi1: u, xi2: u * v, weight: wu * wv * u });
        }
    }
    pts
}

/// Physical coordinates of the reference point (xi1, xi2) on the triangle
/// (p0, p1, p2) under the map p0 + xi1 (p1 - p0) + xi2 (p2 - p1).
pub fn triangle_map(p: &[Vec3; 3], xi1: f64, xi2: f64) -> Vec3 {
    p[0] + (p[1] - p[0]) * xi1 + (p[2] - p[1]) * xi2
}

/// Integrates `f` over a physical triangle with the n-point collapsed rule.
pub fn integrate_triangle(p: &[Vec3; 3], area: f64, n: usize, mut f: impl FnMut(Vec3) -> f64) -> f64 {
    let rule = triangle_rule(n);
    let jac = 2.0 * area;
    let mut s = 0.0;
    for q in &rule {
        s += q.weight * f(triangle_map(p, q.xi1, q.xi2));
    }
    s * jac
}

/// Mutual configuration of a triangle pair, by number of shared vertices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairKind {
    Disjoint,
    Vertex,
    Edge,
    Identical,
}

/// A precomputed quadrature point for a triangle-pair integral: reference
/// coordinates on {0 <= xi2 <= xi1 <= 1} for each factor and a combined
/// weight. Physical integration multiplies by (2 A_x)(2 A_y).
#[derive(Debug, Clone, Copy)]
pub struct PairPoint {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub w: f64,
}

/// Regularized tensor-product rules for the four pair configurations. The
/// singular cases use coordinate transforms that scale out the kernel
/// singularity (weights vanish like the appropriate power at the singular
/// set), so a 1/|x-y| kernel becomes a smooth integrand on the unit 4-cube.
///
/// Vertex ordering conventions assumed by the maps:
/// - `Identical`: both triangles use the same vertex order.
/// - `Edge`: the shared edge is (P0, P1) of both triangles, same orientation.
/// - `Vertex`: the shared vertex is P0 of both triangles.
///
/// The `Identical` rule evaluates only one of each symmetric point pair and
/// doubles the weight; it therefore assumes f(x, y) = f(y, x), which holds
/// for kernels depending on |x - y| with piecewise-constant densities.
pub fn pair_rule(kind: PairKind, n: usize) -> Vec<PairPoint> {
    let (gx, gw) = gauss_legendre(n);
    let g: Vec<(f64, f64)> =
        gx.iter().zip(&gw).map(|(&x, &w)| (0.5 * (x + 1.0), 0.5 * w)).collect();
    let mut pts = Vec::new();
    match kind {
        PairKind::Disjoint => {
            for &(u1, wu1) in &g {
                for &(v1, wv1) in &g {
                    for &(u2, wu2) in &g {
                        for &(v2, wv2) in &g {
                            pts.push(PairPoint {
                                x: [u1, u1 * v1],
                                y: [u2, u2 * v2],
                                w: wu1 * wv1 * wu2 * wv2 * u1 * u2,
                            });
                        }
                    }
                }
            }
        }
        PairKind::Vertex => {
            // Radial scaling about the shared parameter origin; two
            // subdomains by which factor carries the larger first coordinate.
            for &(xi, wxi) in &g {
                for &(e1, w1) in &g {
                    for &(e2, w2) in &g {
                        for &(e3, w3) in &g {
                            let w = wxi * w1 * w2 * w3 * xi.powi(3) * e2;
                            let big = [xi, xi * e1];
                            let small = [xi * e2, xi * e2 * e3];
                            pts.push(PairPoint { x: big, y: small, w });
                            pts.push(PairPoint { x: small, y: big, w });
                        }
                    }
                }
            }
        }
        PairKind::Edge => {
            // Variables: x1 along the shared edge; (a, c, bh) scaled by x1
            // with x = (x1, x1 a), y = (x1 (1-c), x1 (1-c) bh); the kernel
            // vanishes only at a = c = bh = 0, removed by a corner Duffy
            // split over which of the three is largest. Two halves by which
            // triangle carries the larger edge coordinate.
            for &(x1, wx1) in &g {
                for &(xi, wxi) in &g {
                    for &(e1, w1) in &g {
                        for &(e2, w2) in &g {
                            let base = wx1 * wxi * w1 * w2 * x1.powi(3) * xi * xi;
                            for (a, c, bh) in [
                                (xi, xi * e1, xi * e2),
                                (xi * e1, xi, xi * e2),
                                (xi * e1, xi * e2, xi),
                            ] {
                                let w = base * (1.0 - c);
                                let big = [x1, x1 * a];
                                let small = [x1 * (1.0 - c), x1 * (1.0 - c) * bh];
                                pts.push(PairPoint { x: big, y: small, w });
                                pts.push(PairPoint { x: small, y: big, w });
                            }
                        }
                    }
                }
            }
        }
        PairKind::Identical => {
            // Relative coordinates z = x - y; three sectors of the z-plane
            // (the other three follow by the x/y swap, folded into the
            // doubled weight), each with the in-plane domain mapped onto the
            // unit square.
            for &(xi, wxi) in &g {
                for &(eta, weta) in &g {
                    for &(u, wu) in &g {
                        for &(v, wv) in &g {
                            let w = 2.0 * wxi * weta * wu * wv * xi * (1.0 - xi) * (1.0 - xi) * u;
                            let s = (1.0 - xi) * u;
                            // sector 1: z = (xi, xi eta)
                            let w1 = [s, s * v];
                            let z1 = [xi, xi * eta];
                            pts.push(PairPoint { x: [w1[0] + z1[0], w1[1] + z1[1]], y: w1, w });
                            // sector 2: z = (xi eta, xi)
                            let w2 = [xi * (1.0 - eta) + s, s * v];
                            let z2 = [xi * eta, xi];
                            pts.push(PairPoint { x: [w2[0] + z2[0], w2[1] + z2[1]], y: w2, w });
                            // sector 3: z = (-xi eta, xi (1 - eta))
                            let w3 = [xi + s, s * v];
                            let z3 = [-xi * eta, xi * (1.0 - eta)];
                            pts.push(PairPoint { x: [w3[0] + z3[0], w3[1] + z3[1]], y: w3, w });
                        }
                    }
                }
            }
        }
    }
    pts
}

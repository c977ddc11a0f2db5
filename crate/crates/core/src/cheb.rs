//! Chebyshev nodes and polynomials, Lagrange interpolation on intervals, and
//! the graded-lexicographic multi-index tables used by the tensor expansions.

/// Half-open interval (lower, upper].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn new(lower: f64, upper: f64) -> Self {
        assert!(upper > lower, "interval must have positive length: ({lower}, {upper}]");
        Interval { lower, upper }
    }

    pub fn half_size(&self) -> f64 {
        0.5 * (self.upper - self.lower)
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }

    /// Affine map from [-1, 1] onto the interval.
    pub fn from_reference(&self, xi: f64) -> f64 {
        self.midpoint() + self.half_size() * xi
    }

    /// Inverse affine map onto [-1, 1].
    pub fn to_reference(&self, x: f64) -> f64 {
        (x - self.midpoint()) / self.half_size()
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower < x && x <= self.upper
    }

    /// Distance between disjoint intervals, 0 if they overlap or touch.
    pub fn dist(&self, other: &Interval) -> f64 {
        if self.lower >= other.upper {
            self.lower - other.upper
        } else if other.lower >= self.upper {
            other.lower - self.upper
        } else {
            0.0
        }
    }

    /// Chebyshev nodes of order m+1 transformed onto this interval, in the
    /// canonical (descending) node order.
    pub fn transformed_nodes(&self, m: usize) -> Vec<f64> {
        chebyshev_nodes(m).iter().map(|&xi| self.from_reference(xi)).collect()
    }
}

/// The m+1 roots of the Chebyshev polynomial T_{m+1} on [-1, 1], in the
/// canonical order `xi_k = cos(pi (2k+1) / (2m+2))` for k = 0..=m, which is
/// descending in k. All tensors in this crate index Chebyshev nodes this way.
pub fn chebyshev_nodes(m: usize) -> Vec<f64> {
    let denom = 2.0 * (m as f64 + 1.0);
    (0..=m)
        .map(|k| (std::f64::consts::PI * (2.0 * k as f64 + 1.0) / denom).cos())
        .collect()
}

/// T_k(x) by the three-term recurrence; valid for any real x.
pub fn chebyshev_t(k: usize, x: f64) -> f64 {
    match k {
        0 => 1.0,
        1 => x,
        _ => {
            let mut tm1 = 1.0;
            let mut t = x;
            for _ in 2..=k {
                let next = 2.0 * x * t - tm1;
                tm1 = t;
                t = next;
            }
            t
        }
    }
}

/// Fills `out` (length m+1) with T_0(x) .. T_m(x).
pub fn chebyshev_all(m: usize, x: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m + 1);
    out[0] = 1.0;
    if m >= 1 {
        out[1] = x;
        for k in 2..=m {
            out[k] = 2.0 * x * out[k - 1] - out[k - 2];
        }
    }
}

/// Transformed Chebyshev polynomial T_{(a,b],k}(x) = T_k(phi^{-1}(x)).
pub fn chebyshev_eval_transformed(interval: Interval, k: usize, x: f64) -> f64 {
    chebyshev_t(k, interval.to_reference(x))
}

/// Lagrange polynomial L_{I,b} associated with the transformed Chebyshev
/// nodes of order m+1 on `interval`, evaluated at `t` by the product formula.
pub fn lagrange_eval(interval: Interval, b: usize, t: f64, m: usize) -> f64 {
    debug_assert!(b <= m);
    let nodes = interval.transformed_nodes(m);
    lagrange_eval_with_nodes(&nodes, b, t)
}

/// Product-form evaluation against precomputed transformed nodes.
pub fn lagrange_eval_with_nodes(nodes: &[f64], b: usize, t: f64) -> f64 {
    let mut p = 1.0;
    for (k, &xk) in nodes.iter().enumerate() {
        if k != b {
            p *= (t - xk) / (nodes[b] - xk);
        }
    }
    p
}

/// All multi-indices kappa in N_0^3 with |kappa| <= order, in graded
/// lexicographic order: ascending total degree, then lexicographic by
/// (kappa_1, kappa_2, kappa_3). This order is part of the wire format for
/// moment and local-contribution payloads.
#[derive(Debug, Clone)]
pub struct MultiIndexSet {
    order: usize,
    indices: Vec<[usize; 3]>,
    flat: Vec<usize>,
}

impl MultiIndexSet {
    pub fn new(order: usize) -> Self {
        let n = order + 1;
        let mut indices = Vec::new();
        let mut flat = vec![usize::MAX; n * n * n];
        for s in 0..=order {
            for k1 in 0..=s {
                for k2 in 0..=(s - k1) {
                    let k3 = s - k1 - k2;
                    flat[(k1 * n + k2) * n + k3] = indices.len();
                    indices.push([k1, k2, k3]);
                }
            }
        }
        MultiIndexSet { order, indices, flat }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[[usize; 3]] {
        &self.indices
    }

    pub fn index_of(&self, kappa: [usize; 3]) -> usize {
        let n = self.order + 1;
        let pos = self.flat[(kappa[0] * n + kappa[1]) * n + kappa[2]];
        debug_assert_ne!(pos, usize::MAX, "multi-index out of range: {kappa:?}");
        pos
    }

    pub fn total_degree(&self, pos: usize) -> usize {
        let k = self.indices[pos];
        k[0] + k[1] + k[2]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nodes_are_roots_of_next_chebyshev() {
        for m in [0usize, 1, 3, 6, 9] {
            let nodes = chebyshev_nodes(m);
            assert_eq!(nodes.len(), m + 1);
            for &xi in &nodes {
                assert!(chebyshev_t(m + 1, xi).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn low_order_nodes_match_closed_forms() {
        let n0 = chebyshev_nodes(0);
        assert!(n0[0].abs() < 1e-15);
        let n1 = chebyshev_nodes(1);
        let r = 0.5f64.sqrt();
        assert!((n1[0] - r).abs() < 1e-15);
        assert!((n1[1] + r).abs() < 1e-15);
    }

    #[test]
    fn nodes_are_descending_and_symmetric() {
        let nodes = chebyshev_nodes(6);
        assert_eq!(nodes.len(), 7);
        for w in nodes.windows(2) {
            assert!(w[0] > w[1]);
        }
        for k in 0..=6 {
            assert!((nodes[k] + nodes[6 - k]).abs() < 1e-15);
        }
    }

    #[test]
    fn lagrange_interpolation_property() {
        let iv = Interval::new(0.3, 2.1);
        let m = 5;
        let nodes = iv.transformed_nodes(m);
        for b in 0..=m {
            for k in 0..=m {
                let v = lagrange_eval(iv, b, nodes[k], m);
                let expect = if k == b { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-12, "L_{b}(node {k}) = {v}");
            }
        }
    }

    #[test]
    fn lagrange_partition_of_unity() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let iv = Interval::new(-0.7, 1.9);
        for m in [0usize, 1, 4, 8] {
            for _ in 0..100 {
                let t = iv.lower + rng.gen::<f64>() * iv.length();
                let s: f64 = (0..=m).map(|b| lagrange_eval(iv, b, t, m)).sum();
                assert!((s - 1.0).abs() <= 1e-12, "m={m}: sum = {s}");
            }
        }
    }

    #[test]
    fn transformed_chebyshev_values() {
        let iv = Interval::new(0.0, 2.0);
        for x in [0.1, 0.5, 1.0, 1.7, 2.0] {
            assert_eq!(chebyshev_eval_transformed(iv, 0, x), 1.0);
        }
        assert!(chebyshev_eval_transformed(iv, 1, 1.0).abs() < 1e-15);
        assert!((chebyshev_eval_transformed(iv, 3, 1.5) - (-1.0)).abs() < 1e-15);
    }

    #[test]
    fn chebyshev_recurrence_matches_cosine_form() {
        for k in 0..10 {
            for i in 0..20 {
                let x = -1.0 + 2.0 * (i as f64) / 19.0;
                let exact = (k as f64 * x.acos()).cos();
                assert!((chebyshev_t(k, x) - exact).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn multi_index_set_counts_and_order() {
        let set = MultiIndexSet::new(6);
        assert_eq!(set.len(), 84); // C(9,3)
        assert_eq!(set.indices()[0], [0, 0, 0]);
        assert_eq!(set.indices()[1], [0, 0, 1]);
        assert_eq!(set.indices()[2], [0, 1, 0]);
        assert_eq!(set.indices()[3], [1, 0, 0]);
        // graded: total degree never decreases
        for w in 0..set.len() - 1 {
            assert!(set.total_degree(w) <= set.total_degree(w + 1));
        }
        for (pos, &k) in set.indices().iter().enumerate() {
            assert_eq!(set.index_of(k), pos);
        }
    }
}

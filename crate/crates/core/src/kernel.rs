//! Heat kernel evaluation and its separable approximation on pairs of
//! space-time boxes: Chebyshev expansion in space, Lagrange interpolation in
//! time, expansion coefficient tensors and their translation-invariant cache.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use crate::cheb::{chebyshev_all, chebyshev_nodes, lagrange_eval_with_nodes, Interval, MultiIndexSet};
use crate::vec3::Vec3;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum KernelError {
    #[error("heat kernel is undefined for zero time difference")]
    ZeroTimeDifference,
    #[error("expansion coefficient requires a positive scaled time difference, got {0}")]
    NonPositiveD(f64),
    #[error("inadmissible box pair: {0}")]
    Inadmissible(String),
}

/// Heat kernel G_alpha(diff, dt): `(4 pi alpha dt)^(-3/2) exp(-|diff|^2 / (4 alpha dt))`
/// for dt > 0 and exactly 0 for dt < 0.
pub fn heat_kernel(diff: Vec3, dt: f64, alpha: f64) -> Result<f64, KernelError> {
    if dt == 0.0 {
        return Err(KernelError::ZeroTimeDifference);
    }
    if dt < 0.0 {
        return Ok(0.0);
    }
    let c = 4.0 * std::f64::consts::PI * alpha * dt;
    Ok(c.powf(-1.5) * (-diff.norm_sq() / (4.0 * alpha * dt)).exp())
}

/// Interpolation / expansion orders and the heat capacity constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpansionOrders {
    pub m_t: usize,
    pub m_x: usize,
    pub alpha: f64,
}

impl ExpansionOrders {
    pub fn new(m_t: usize, m_x: usize, alpha: f64) -> Self {
        assert!(alpha > 0.0, "alpha must be positive");
        ExpansionOrders { m_t, m_x, alpha }
    }
}

/// Box-size admissibility relation: `h_x^2 / (4 alpha h_t) <= c_st`.
pub fn check_box_relation(h_x: f64, h_t: f64, alpha: f64, c_st: f64) -> bool {
    debug_assert!(h_x > 0.0 && h_t > 0.0 && alpha > 0.0 && c_st > 0.0);
    h_x * h_x / (4.0 * alpha * h_t) <= c_st
}

/// A 4D space-time box: spatial cube (corner, corner + 2 h_x]^3 times a
/// temporal interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box4 {
    pub corner: Vec3,
    pub h_x: f64,
    pub interval: Interval,
}

impl Box4 {
    pub fn new(corner: Vec3, h_x: f64, interval: Interval) -> Self {
        assert!(h_x > 0.0, "spatial half-size must be positive");
        Box4 { corner, h_x, interval }
    }

    pub fn spatial_center(&self) -> Vec3 {
        self.corner + Vec3::splat(self.h_x)
    }

    pub fn axis_interval(&self, j: usize) -> Interval {
        let c = self.corner.component(j);
        Interval::new(c, c + 2.0 * self.h_x)
    }

    pub fn center4(&self) -> (Vec3, f64) {
        (self.spatial_center(), self.interval.midpoint())
    }
}

/// Single entry of the one-dimensional expansion coefficient table:
/// `E_{k,l}(r, d) = lambda_k lambda_l / (m_x+1)^2 *
///   sum_{n,m} exp(-(r + xi_n - xi_m)^2 / d) T_l(xi_n) T_k(xi_m)`.
/// The first index pairs with the source polynomial, the second with the
/// target; both carry a lambda weight (lambda_0 = 1, lambda_k = 2 for k > 0).
pub fn expansion_coeff_1d(k: usize, l: usize, r: f64, d: f64, m_x: usize) -> Result<f64, KernelError> {
    if d <= 0.0 {
        return Err(KernelError::NonPositiveD(d));
    }
    let table = coeff_1d_table(r, d, m_x);
    Ok(table[k * (m_x + 1) + l])
}

/// Full (m_x+1)^2 table of E_{k,l}(r, d), k (source) major.
fn coeff_1d_table(r: f64, d: f64, m_x: usize) -> Vec<f64> {
    let n = m_x + 1;
    let xi = chebyshev_nodes(m_x);
    // t_vals[i * n + node] = T_i(xi_node)
    let mut t_vals = vec![0.0; n * n];
    for (node, &x) in xi.iter().enumerate() {
        let mut col = vec![0.0; n];
        chebyshev_all(m_x, x, &mut col);
        for i in 0..n {
            t_vals[i * n + node] = col[i];
        }
    }
    let mut exps = vec![0.0; n * n];
    for nn in 0..n {
        for mm in 0..n {
            let arg = r + xi[nn] - xi[mm];
            exps[nn * n + mm] = (-arg * arg / d).exp();
        }
    }
    let lambda = |i: usize| if i == 0 { 1.0 } else { 2.0 };
    let scale = 1.0 / ((n * n) as f64);
    let mut out = vec![0.0; n * n];
    for k in 0..n {
        for l in 0..n {
            let mut s = 0.0;
            for nn in 0..n {
                for mm in 0..n {
                    s += exps[nn * n + mm] * t_vals[l * n + nn] * t_vals[k * n + mm];
                }
            }
            out[k * n + l] = lambda(k) * lambda(l) * scale * s;
        }
    }
    out
}

/// Expansion coefficients for an admissible target/source box pair, stored in
/// separable form: a temporal prefactor per (a, b) plus three per-axis 1D
/// tables (in both source-major and target-major layouts; the latter feeds
/// the transform-based M2L). `entry` recombines them into `E_{a,kappa,b,nu}`.
#[derive(Debug, Clone)]
pub struct CoeffTensor {
    pub m_t: usize,
    pub m_x: usize,
    /// pref[a * (m_t+1) + b] = (4 pi alpha (xi_{I,b} - xi_{J,a}))^(-3/2)
    pref: Vec<f64>,
    /// axis[(a * (m_t+1) + b) * 3 + j][k * (m_x+1) + l] = E_{k,l}
    axis: Vec<Vec<f64>>,
    /// transposed layout: axis_t[...][l * (m_x+1) + k] = E_{k,l}
    axis_t: Vec<Vec<f64>>,
}

impl CoeffTensor {
    pub fn prefactor(&self, a: usize, b: usize) -> f64 {
        self.pref[a * (self.m_t + 1) + b]
    }

    pub fn axis_table(&self, a: usize, b: usize, j: usize) -> &[f64] {
        &self.axis[(a * (self.m_t + 1) + b) * 3 + j]
    }

    /// Target-major layout of the same table.
    pub fn axis_table_t(&self, a: usize, b: usize, j: usize) -> &[f64] {
        &self.axis_t[(a * (self.m_t + 1) + b) * 3 + j]
    }

    /// E_{a,kappa,b,nu}.
    pub fn entry(&self, a: usize, kappa: [usize; 3], b: usize, nu: [usize; 3]) -> f64 {
        let n = self.m_x + 1;
        let mut v = self.prefactor(a, b);
        for j in 0..3 {
            v *= self.axis_table(a, b, j)[kappa[j] * n + nu[j]];
        }
        v
    }
}

/// Builds the coefficient tensor for a pair of boxes whose temporal intervals
/// are disjoint with the target strictly later than the source, and whose
/// spatial half-sizes agree (boxes from the same tree level).
pub fn expansion_coeffs(
    z_tar: &Box4,
    z_src: &Box4,
    orders: &ExpansionOrders,
) -> Result<CoeffTensor, KernelError> {
    if (z_tar.h_x - z_src.h_x).abs() > 1e-12 * z_tar.h_x.max(z_src.h_x) {
        return Err(KernelError::Inadmissible(format!(
            "spatial half-sizes differ: {} vs {}",
            z_tar.h_x, z_src.h_x
        )));
    }
    if z_tar.interval.lower < z_src.interval.upper {
        return Err(KernelError::Inadmissible(
            "target interval must lie strictly after the source interval".into(),
        ));
    }
    let gap = z_tar.interval.lower - z_src.interval.upper;
    if gap <= 0.0 {
        return Err(KernelError::Inadmissible(format!(
            "temporal intervals must be separated, dist = {gap}"
        )));
    }

    let n_t = orders.m_t + 1;
    let h_x = z_tar.h_x;
    let xi_i = z_tar.interval.transformed_nodes(orders.m_t);
    let xi_j = z_src.interval.transformed_nodes(orders.m_t);
    let r = [
        (z_tar.corner.x - z_src.corner.x) / h_x,
        (z_tar.corner.y - z_src.corner.y) / h_x,
        (z_tar.corner.z - z_src.corner.z) / h_x,
    ];

    let mut pref = vec![0.0; n_t * n_t];
    let mut axis = Vec::with_capacity(n_t * n_t * 3);
    let mut axis_t = Vec::with_capacity(n_t * n_t * 3);
    let n_x = orders.m_x + 1;
    for a in 0..n_t {
        for b in 0..n_t {
            let dxi = xi_i[b] - xi_j[a];
            debug_assert!(dxi > 0.0);
            pref[a * n_t + b] = (4.0 * std::f64::consts::PI * orders.alpha * dxi).powf(-1.5);
            let d_ab = 4.0 * orders.alpha * dxi / (h_x * h_x);
            for j in 0..3 {
                let table = coeff_1d_table(r[j], d_ab, orders.m_x);
                let mut t = vec![0.0; n_x * n_x];
                for kk in 0..n_x {
                    for ll in 0..n_x {
                        t[ll * n_x + kk] = table[kk * n_x + ll];
                    }
                }
                axis.push(table);
                axis_t.push(t);
            }
        }
    }
    Ok(CoeffTensor { m_t: orders.m_t, m_x: orders.m_x, pref, axis, axis_t })
}

/// Evaluates the truncated separable kernel approximation at a point pair
/// ((x, t), (y, tau)) inside the given boxes: the quadruple sum over (a, b)
/// and multi-indices with |kappa + nu| <= m_x.
pub fn kernel_approx(
    z_tar: &Box4,
    z_src: &Box4,
    x: Vec3,
    t: f64,
    y: Vec3,
    tau: f64,
    orders: &ExpansionOrders,
) -> Result<f64, KernelError> {
    let coeffs = expansion_coeffs(z_tar, z_src, orders)?;
    Ok(kernel_approx_with(&coeffs, z_tar, z_src, x, t, y, tau, orders))
}

/// Same as [`kernel_approx`] but with a precomputed coefficient tensor.
#[allow(clippy::too_many_arguments)]
pub fn kernel_approx_with(
    coeffs: &CoeffTensor,
    z_tar: &Box4,
    z_src: &Box4,
    x: Vec3,
    t: f64,
    y: Vec3,
    tau: f64,
    orders: &ExpansionOrders,
) -> f64 {
    let (m_t, m_x) = (orders.m_t, orders.m_x);
    let n_x = m_x + 1;
    let set = MultiIndexSet::new(m_x);

    let mut t_x = vec![0.0; 3 * n_x];
    let mut t_y = vec![0.0; 3 * n_x];
    for j in 0..3 {
        chebyshev_all(m_x, z_tar.axis_interval(j).to_reference(x.component(j)), &mut t_x[j * n_x..(j + 1) * n_x]);
        chebyshev_all(m_x, z_src.axis_interval(j).to_reference(y.component(j)), &mut t_y[j * n_x..(j + 1) * n_x]);
    }
    let nodes_i = z_tar.interval.transformed_nodes(m_t);
    let nodes_j = z_src.interval.transformed_nodes(m_t);

    let mut total = 0.0;
    for a in 0..=m_t {
        let l_tau = lagrange_eval_with_nodes(&nodes_j, a, tau);
        for b in 0..=m_t {
            let l_t = lagrange_eval_with_nodes(&nodes_i, b, t);
            let mut block = 0.0;
            for (kp, &kappa) in set.indices().iter().enumerate() {
                let deg_k = set.total_degree(kp);
                let ty = t_y[kappa[0]] * t_y[n_x + kappa[1]] * t_y[2 * n_x + kappa[2]];
                for (np, &nu) in set.indices().iter().enumerate() {
                    if deg_k + set.total_degree(np) > m_x {
                        continue;
                    }
                    let tx = t_x[nu[0]] * t_x[n_x + nu[1]] * t_x[2 * n_x + nu[2]];
                    block += coeffs.entry(a, kappa, b, nu) * tx * ty;
                }
            }
            total += block * l_t * l_tau;
        }
    }
    total
}

/// Cache key for coefficient tensors. Spatial translation invariance is exact,
/// so the spatial part is the integer grid offset; the temporal part is the
/// in-level index difference when the level's intervals are uniform, and the
/// exact index pair otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CoeffKey {
    pub level: u32,
    pub dk: i64,
    /// `u64::MAX` when intervals at this level are uniform.
    pub k_src: u64,
    pub dgrid: [i64; 3],
}

/// Read-mostly cache of coefficient tensors: concurrent readers, single
/// builder on a miss.
#[derive(Debug, Default)]
pub struct CoeffCache {
    inner: RwLock<HashMap<CoeffKey, Arc<CoeffTensor>>>,
}

impl CoeffCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get_or_build(
        &self,
        key: CoeffKey,
        build: impl FnOnce() -> Result<CoeffTensor, KernelError>,
    ) -> Result<Arc<CoeffTensor>, KernelError> {
        if let Some(hit) = self.inner.read().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let tensor = Arc::new(build()?);
        let mut guard = self.inner.write().unwrap();
        Ok(guard.entry(key).or_insert(tensor).clone())
    }
}

//! FMM translation operators (S2M, M2M, M2L, L2L, L2T), nearfield
//! application, and the sequential space-time matvec built from them.
//!
//! Moments and local contributions are tensors indexed a-major over the
//! graded-lexicographic spatial multi-index set: value(a, kappa) sits at
//! `a * n_multi + pos(kappa)`. This layout is also the wire format of
//! moment payloads.

use crate::assembly::NearfieldBlocks;
use crate::cheb::{chebyshev_all, lagrange_eval_with_nodes, Interval, MultiIndexSet};
use crate::kernel::{expansion_coeffs, CoeffCache, CoeffKey, CoeffTensor, ExpansionOrders, KernelError};
use crate::mesh::SpaceTimeMesh;
use crate::quad::{gauss_legendre_on, triangle_map, triangle_rule};
use crate::tree::{ClusterTree, RefinementKind, TemporalTree};

/// Selects the M2L realization: the staged one-dimensional transforms or the
/// naive quadruple loop they must reproduce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum M2lPath {
    Transforms,
    Naive,
}

/// Per-matvec operation counters (floating multiply-add units), used by the
/// complexity checks.
#[derive(Debug, Default, Clone, Copy)]
pub struct OpCounts {
    pub s2m: u64,
    pub m2m: u64,
    pub m2l: u64,
    pub l2l: u64,
    pub l2t: u64,
    pub nearfield: u64,
}

impl OpCounts {
    pub fn total(&self) -> u64 {
        self.s2m + self.m2m + self.m2l + self.l2l + self.l2t + self.nearfield
    }
}

/// Precomputed element integrals of one leaf cluster: temporal Lagrange
/// integrals per owned step and spatial Chebyshev integrals per owned
/// triangle, combined on the fly as their tensor product.
#[derive(Debug, Clone)]
pub struct BasisIntegrals {
    /// time_ints[i * (m_t+1) + a] for the i-th owned step.
    pub time_ints: Vec<f64>,
    /// space_ints[j * n_multi + p] for the j-th owned triangle.
    pub space_ints: Vec<f64>,
}

/// Shared immutable FMM state: expansion orders, multi-index table, basis
/// integrals for leaves and the translation-invariant coefficient cache.
pub struct FmmSetup {
    pub orders: ExpansionOrders,
    pub set: MultiIndexSet,
    pub m2l_path: M2lPath,
    /// Basis integrals, indexed by cluster id (present for leaves).
    pub basis: Vec<Option<BasisIntegrals>>,
    pub coeff_cache: CoeffCache,
    /// Whether all intervals of a temporal level have equal length, per
    /// level; controls the temporal part of the cache key.
    pub level_uniform: Vec<bool>,
}

impl FmmSetup {
    pub fn new(tree: &ClusterTree, tt: &TemporalTree, mesh: &SpaceTimeMesh, orders: ExpansionOrders) -> Self {
        let set = MultiIndexSet::new(orders.m_x);
        let mut basis = vec![None; tree.n_clusters()];
        for c in tree.clusters() {
            if c.is_leaf {
                basis[c.id] = Some(compute_basis_integrals(tree, mesh, c.id, &orders, &set));
            }
        }
        let mut level_uniform = Vec::with_capacity(tt.levels.len());
        for lvl in &tt.levels {
            let mut uniform = true;
            let len0 = tt.cluster(lvl[0]).interval.length();
            for &id in lvl {
                let len = tt.cluster(id).interval.length();
                if (len - len0).abs() > 1e-12 * len0 {
                    uniform = false;
                }
            }
            level_uniform.push(uniform);
        }
        FmmSetup {
            orders,
            set,
            m2l_path: M2lPath::Transforms,
            basis,
            coeff_cache: CoeffCache::new(),
            level_uniform,
        }
    }

    pub fn tensor_len(&self) -> usize {
        (self.orders.m_t + 1) * self.set.len()
    }

    /// Coefficient tensor for an admissible pair, cached by translation key.
    pub fn coeffs_for(
        &self,
        tree: &ClusterTree,
        target: usize,
        source: usize,
    ) -> Result<std::sync::Arc<CoeffTensor>, KernelError> {
        let zt = tree.cluster(target);
        let zs = tree.cluster(source);
        debug_assert_eq!(zt.level, zs.level);
        let key = CoeffKey {
            level: zt.level as u32,
            dk: zt.temporal_index as i64 - zs.temporal_index as i64,
            k_src: if self.level_uniform[zt.level] {
                u64::MAX
            } else {
                zs.temporal_index as u64
            },
            dgrid: [
                zt.grid_index[0] as i64 - zs.grid_index[0] as i64,
                zt.grid_index[1] as i64 - zs.grid_index[1] as i64,
                zt.grid_index[2] as i64 - zs.grid_index[2] as i64,
            ],
        };
        let (bt, bs) = (zt.box4(), zs.box4());
        let orders = self.orders;
        self.coeff_cache.get_or_build(key, || expansion_coeffs(&bt, &bs, &orders))
    }
}

/// Integrals of Chebyshev x Lagrange basis factors over a leaf's elements:
/// the temporal factor by Gauss-Legendre exact for degree m_t, the spatial
/// factor by the collapsed triangle rule exact for total degree m_x.
pub fn compute_basis_integrals(
    tree: &ClusterTree,
    mesh: &SpaceTimeMesh,
    leaf: usize,
    orders: &ExpansionOrders,
    set: &MultiIndexSet,
) -> BasisIntegrals {
    let c = tree.cluster(leaf);
    let n_t = orders.m_t + 1;
    let n_x = orders.m_x + 1;
    let nodes = c.interval.transformed_nodes(orders.m_t);
    let n_gl = orders.m_t / 2 + 1; // exact for polynomials of degree m_t

    let mut time_ints = vec![0.0; c.steps.len() * n_t];
    for (i, &kt) in c.steps.iter().enumerate() {
        let (t0, t1) = mesh.time_step_bounds(kt);
        let (xs, ws) = gauss_legendre_on(n_gl, t0, t1);
        for a in 0..n_t {
            let mut s = 0.0;
            for (x, w) in xs.iter().zip(&ws) {
                s += w * lagrange_eval_with_nodes(&nodes, a, *x);
            }
            time_ints[i * n_t + a] = s;
        }
    }

    let rule = triangle_rule(n_x);
    let axes = [c.box4().axis_interval(0), c.box4().axis_interval(1), c.box4().axis_interval(2)];
    let mut space_ints = vec![0.0; c.triangles.len() * set.len()];
    let mut t_vals = vec![0.0; 3 * n_x];
    for (j, &kx) in c.triangles.iter().enumerate() {
        let verts = mesh.space.triangle_vertices(kx - 1);
        let jac = 2.0 * mesh.space.areas[kx - 1];
        for q in &rule {
            let y = triangle_map(&verts, q.xi1, q.xi2);
            for ax in 0..3 {
                chebyshev_all(
                    orders.m_x,
                    axes[ax].to_reference(y.component(ax)),
                    &mut t_vals[ax * n_x..(ax + 1) * n_x],
                );
            }
            let w = q.weight * jac;
            for (p, &kappa) in set.indices().iter().enumerate() {
                space_ints[j * set.len() + p] +=
                    w * t_vals[kappa[0]] * t_vals[n_x + kappa[1]] * t_vals[2 * n_x + kappa[2]];
            }
        }
    }

    BasisIntegrals { time_ints, space_ints }
}

/// Moments of a leaf from its density segment (element-list order):
/// mu[a, kappa] = sum_j w_j * timeint_j[a] * spaceint_j[kappa].
pub fn s2m(
    setup: &FmmSetup,
    tree: &ClusterTree,
    leaf: usize,
    w_seg: &[f64],
    moments: &mut [f64],
    ops: &mut OpCounts,
) {
    let c = tree.cluster(leaf);
    let bi = setup.basis[leaf].as_ref().expect("basis integrals for leaf");
    let n_t = setup.orders.m_t + 1;
    let n_m = setup.set.len();
    debug_assert_eq!(w_seg.len(), c.n_elements());
    debug_assert_eq!(moments.len(), n_t * n_m);

    // contract triangles first: W_i[kappa] = sum_j w_(i,j) spaceint_j[kappa]
    let n_tri = c.triangles.len();
    let mut w_i = vec![0.0; n_m];
    for i in 0..c.steps.len() {
        w_i.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..n_tri {
            let w = w_seg[i * n_tri + j];
            if w != 0.0 {
                let row = &bi.space_ints[j * n_m..(j + 1) * n_m];
                for (acc, s) in w_i.iter_mut().zip(row) {
                    *acc += w * s;
                }
            }
        }
        for a in 0..n_t {
            let ta = bi.time_ints[i * n_t + a];
            let dst = &mut moments[a * n_m..(a + 1) * n_m];
            for (d, s) in dst.iter_mut().zip(&w_i) {
                *d += ta * s;
            }
        }
        ops.s2m += (n_tri * n_m + n_t * n_m) as u64;
    }
}

/// Evaluates the local contributions at a leaf's elements and adds them to
/// the global far-field vector.
pub fn l2t(
    setup: &FmmSetup,
    tree: &ClusterTree,
    mesh: &SpaceTimeMesh,
    leaf: usize,
    lambda: &[f64],
    f_far: &mut [f64],
    ops: &mut OpCounts,
) {
    let c = tree.cluster(leaf);
    let bi = setup.basis[leaf].as_ref().expect("basis integrals for leaf");
    let n_t = setup.orders.m_t + 1;
    let n_m = setup.set.len();
    let n_tri = c.triangles.len();

    // P_j[b] = sum_nu lambda[b, nu] spaceint_j[nu]
    let mut p = vec![0.0; n_tri * n_t];
    for j in 0..n_tri {
        let row = &bi.space_ints[j * n_m..(j + 1) * n_m];
        for b in 0..n_t {
            let lam = &lambda[b * n_m..(b + 1) * n_m];
            let mut s = 0.0;
            for (l, si) in lam.iter().zip(row) {
                s += l * si;
            }
            p[j * n_t + b] = s;
        }
    }
    for (i, &kt) in c.steps.iter().enumerate() {
        for (j, &kx) in c.triangles.iter().enumerate() {
            let mut s = 0.0;
            for b in 0..n_t {
                s += bi.time_ints[i * n_t + b] * p[j * n_t + b];
            }
            f_far[mesh.dof0(kt, kx)] += s;
        }
    }
    ops.l2t += (n_tri * n_t * n_m + c.n_elements() * n_t) as u64;
}

/// Temporal interpolation matrix q[a_c * (m_t+1) + a_p] =
/// L_{I_p, a_p}(xi_{I_c, a_c}).
pub fn temporal_m2m_matrix(parent: Interval, child: Interval, m_t: usize) -> Vec<f64> {
    let n = m_t + 1;
    let p_nodes = parent.transformed_nodes(m_t);
    let c_nodes = child.transformed_nodes(m_t);
    let mut q = vec![0.0; n * n];
    for (ac, &xc) in c_nodes.iter().enumerate() {
        for ap in 0..n {
            q[ac * n + ap] = lagrange_eval_with_nodes(&p_nodes, ap, xc);
        }
    }
    q
}

/// Spatial re-expansion matrix per axis: q[kappa * (m_x+1) + nu] =
/// lambda_kappa / (m_x+1) * sum_n T_{parent,nu}(xi_{child,n}) T_kappa(xi_n);
/// exact for kappa <= nu by polynomial degree.
pub fn spatial_m2m_matrix(parent: Interval, child: Interval, m_x: usize) -> Vec<f64> {
    let n = m_x + 1;
    let child_nodes = child.transformed_nodes(m_x);
    let mut t_child = vec![0.0; n * n]; // T_kappa at reference child nodes
    let mut t_parent = vec![0.0; n * n]; // T_{parent,nu} at child nodes
    let ref_nodes = crate::cheb::chebyshev_nodes(m_x);
    let mut col = vec![0.0; n];
    for (i, &xi) in ref_nodes.iter().enumerate() {
        chebyshev_all(m_x, xi, &mut col);
        for k in 0..n {
            t_child[k * n + i] = col[k];
        }
        chebyshev_all(m_x, parent.to_reference(child_nodes[i]), &mut col);
        for k in 0..n {
            t_parent[k * n + i] = col[k];
        }
    }
    let mut q = vec![0.0; n * n];
    for kappa in 0..n {
        let lam = if kappa == 0 { 1.0 } else { 2.0 };
        for nu in 0..n {
            let mut s = 0.0;
            for i in 0..n {
                s += t_parent[nu * n + i] * t_child[kappa * n + i];
            }
            q[kappa * n + nu] = lam / n as f64 * s;
        }
    }
    q
}

/// Accumulates a child's moments into the parent for a purely temporal
/// refinement.
pub fn m2m_temporal(
    setup: &FmmSetup,
    parent_iv: Interval,
    child_iv: Interval,
    child_moments: &[f64],
    parent_moments: &mut [f64],
    ops: &mut OpCounts,
) {
    let n_t = setup.orders.m_t + 1;
    let n_m = setup.set.len();
    let q = temporal_m2m_matrix(parent_iv, child_iv, setup.orders.m_t);
    for ac in 0..n_t {
        let src = &child_moments[ac * n_m..(ac + 1) * n_m];
        for ap in 0..n_t {
            let w = q[ac * n_t + ap];
            let dst = &mut parent_moments[ap * n_m..(ap + 1) * n_m];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    ops.m2m += (n_t * n_t * n_m) as u64;
}

/// Accumulates a child's moments into the parent for a space-time
/// refinement: temporal interpolation plus the per-axis Chebyshev
/// re-expansion restricted to kappa <= nu componentwise.
#[allow(clippy::too_many_arguments)]
pub fn m2m_spacetime(
    setup: &FmmSetup,
    parent_box: &crate::kernel::Box4,
    child_box: &crate::kernel::Box4,
    child_moments: &[f64],
    parent_moments: &mut [f64],
    ops: &mut OpCounts,
) {
    let n_t = setup.orders.m_t + 1;
    let n_m = setup.set.len();
    let set = &setup.set;
    let m_x = setup.orders.m_x;
    let qt = temporal_m2m_matrix(parent_box.interval, child_box.interval, setup.orders.m_t);
    let qx: Vec<Vec<f64>> = (0..3)
        .map(|j| spatial_m2m_matrix(parent_box.axis_interval(j), child_box.axis_interval(j), m_x))
        .collect();
    let n = m_x + 1;

    // spatial re-expansion per temporal child index, then temporal mixing
    let mut spat = vec![0.0; n_m];
    for ac in 0..n_t {
        let src = &child_moments[ac * n_m..(ac + 1) * n_m];
        spat.iter_mut().for_each(|v| *v = 0.0);
        for (np, &nu) in set.indices().iter().enumerate() {
            let mut acc = 0.0;
            for k1 in 0..=nu[0] {
                let q1 = qx[0][k1 * n + nu[0]];
                for k2 in 0..=nu[1] {
                    let q12 = q1 * qx[1][k2 * n + nu[1]];
                    for k3 in 0..=nu[2] {
                        let kp = set.index_of([k1, k2, k3]);
                        acc += q12 * qx[2][k3 * n + nu[2]] * src[kp];
                        ops.m2l += 0; // counted below
                    }
                }
            }
            spat[np] = acc;
            ops.m2m += ((nu[0] + 1) * (nu[1] + 1) * (nu[2] + 1)) as u64;
        }
        for ap in 0..n_t {
            let w = qt[ac * n_t + ap];
            let dst = &mut parent_moments[ap * n_m..(ap + 1) * n_m];
            for (d, s) in dst.iter_mut().zip(&spat) {
                *d += w * s;
            }
        }
        ops.m2m += (n_t * n_m) as u64;
    }
}

/// L2L for a purely temporal refinement: the transpose of the temporal M2M.
pub fn l2l_temporal(
    setup: &FmmSetup,
    parent_iv: Interval,
    child_iv: Interval,
    parent_lambda: &[f64],
    child_lambda: &mut [f64],
    ops: &mut OpCounts,
) {
    let n_t = setup.orders.m_t + 1;
    let n_m = setup.set.len();
    let q = temporal_m2m_matrix(parent_iv, child_iv, setup.orders.m_t);
    for ac in 0..n_t {
        let dst = &mut child_lambda[ac * n_m..(ac + 1) * n_m];
        for ap in 0..n_t {
            let w = q[ac * n_t + ap];
            let src = &parent_lambda[ap * n_m..(ap + 1) * n_m];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    ops.l2l += (n_t * n_t * n_m) as u64;
}

/// L2L for a space-time refinement: the transpose of the space-time M2M.
pub fn l2l_spacetime(
    setup: &FmmSetup,
    parent_box: &crate::kernel::Box4,
    child_box: &crate::kernel::Box4,
    parent_lambda: &[f64],
    child_lambda: &mut [f64],
    ops: &mut OpCounts,
) {
    let n_t = setup.orders.m_t + 1;
    let n_m = setup.set.len();
    let set = &setup.set;
    let m_x = setup.orders.m_x;
    let qt = temporal_m2m_matrix(parent_box.interval, child_box.interval, setup.orders.m_t);
    let qx: Vec<Vec<f64>> = (0..3)
        .map(|j| spatial_m2m_matrix(parent_box.axis_interval(j), child_box.axis_interval(j), m_x))
        .collect();
    let n = m_x + 1;

    let mut temp = vec![0.0; n_m];
    for ac in 0..n_t {
        // temporal transpose first: gather parent temporal indices
        temp.iter_mut().for_each(|v| *v = 0.0);
        for ap in 0..n_t {
            let w = qt[ac * n_t + ap];
            let src = &parent_lambda[ap * n_m..(ap + 1) * n_m];
            for (d, s) in temp.iter_mut().zip(src) {
                *d += w * s;
            }
        }
        ops.l2l += (n_t * n_m) as u64;
        // spatial transpose: child kappa gathers parent nu >= kappa
        let dst = &mut child_lambda[ac * n_m..(ac + 1) * n_m];
        for (np, &nu) in set.indices().iter().enumerate() {
            let v = temp[np];
            if v == 0.0 {
                continue;
            }
            for k1 in 0..=nu[0] {
                let q1 = qx[0][k1 * n + nu[0]];
                for k2 in 0..=nu[1] {
                    let q12 = q1 * qx[1][k2 * n + nu[1]];
                    for k3 in 0..=nu[2] {
                        let kp = set.index_of([k1, k2, k3]);
                        dst[kp] += q12 * qx[2][k3 * n + nu[2]] * v;
                    }
                }
            }
            ops.l2l += ((nu[0] + 1) * (nu[1] + 1) * (nu[2] + 1)) as u64;
        }
    }
}

/// Reusable scratch for the staged M2L transforms.
#[derive(Debug, Clone)]
pub struct M2lScratch {
    mu_cube: Vec<f64>,
    v1: Vec<f64>,
    v2: Vec<f64>,
}

impl M2lScratch {
    pub fn new(m_x: usize) -> Self {
        let n3 = (m_x + 1) * (m_x + 1) * (m_x + 1);
        M2lScratch { mu_cube: vec![0.0; n3], v1: vec![0.0; n3], v2: vec![0.0; n3] }
    }
}

/// M2L: adds E * mu into lambda for an admissible pair. The transform path
/// applies three successive 1D transforms per total target degree (budget
/// B = m_x - |nu| bounds the kappa indices exactly); the naive path is the
/// literal quadruple loop over |kappa + nu| <= m_x.
pub fn m2l(
    setup: &FmmSetup,
    coeffs: &CoeffTensor,
    mu: &[f64],
    lambda: &mut [f64],
    scratch: &mut M2lScratch,
    ops: &mut OpCounts,
) {
    match setup.m2l_path {
        M2lPath::Transforms => m2l_transforms(setup, coeffs, mu, lambda, scratch, ops),
        M2lPath::Naive => m2l_naive(setup, coeffs, mu, lambda, ops),
    }
}

pub fn m2l_naive(
    setup: &FmmSetup,
    coeffs: &CoeffTensor,
    mu: &[f64],
    lambda: &mut [f64],
    ops: &mut OpCounts,
) {
    let n_t = setup.orders.m_t + 1;
    let n_m = setup.set.len();
    let m_x = setup.orders.m_x;
    let set = &setup.set;
    for b in 0..n_t {
        for (np, &nu) in set.indices().iter().enumerate() {
            let deg_nu = set.total_degree(np);
            let mut acc = 0.0;
            for a in 0..n_t {
                let mu_a = &mu[a * n_m..(a + 1) * n_m];
                for (kp, &kappa) in set.indices().iter().enumerate() {
                    if set.total_degree(kp) + deg_nu > m_x {
                        continue;
                    }
                    acc += coeffs.entry(a, kappa, b, nu) * mu_a[kp];
                    ops.m2l += 1;
                }
            }
            lambda[b * n_m + np] += acc;
        }
    }
}

pub fn m2l_transforms(
    setup: &FmmSetup,
    coeffs: &CoeffTensor,
    mu: &[f64],
    lambda: &mut [f64],
    scratch: &mut M2lScratch,
    ops: &mut OpCounts,
) {
    let n_t = setup.orders.m_t + 1;
    let m_x = setup.orders.m_x;
    let n = m_x + 1;
    let nn = n * n;
    let n_m = setup.set.len();
    let set = &setup.set;

    let mu_cube = &mut scratch.mu_cube;
    let v1 = &mut scratch.v1;
    let v2 = &mut scratch.v2;
    let mut op_count = 0u64;
    for a in 0..n_t {
        let mu_a = &mu[a * n_m..(a + 1) * n_m];
        // scatter the graded tensor into a dense lexicographic cube so the
        // innermost contractions read contiguously
        for (kp, &k) in set.indices().iter().enumerate() {
            mu_cube[(k[0] * n + k[1]) * n + k[2]] = mu_a[kp];
        }
        for b in 0..n_t {
            let e1 = coeffs.axis_table_t(a, b, 0);
            let e2 = coeffs.axis_table_t(a, b, 1);
            let e3 = coeffs.axis_table_t(a, b, 2);
            let pref = coeffs.prefactor(a, b);
            let lam_b = &mut lambda[b * n_m..(b + 1) * n_m];
            // shell-wise: for each total target degree s the kappa budget is
            // B = m_x - s, and the staged bounds kappa3 <= B - k1 - k2,
            // kappa2 <= B - k1, kappa1 <= B compose to |kappa| <= B exactly
            let mut pos = 0usize; // running graded-lex position of nu
            for s in 0..=m_x {
                let budget = m_x - s;
                // stage 1: contract kappa3 -> nu3
                for k1 in 0..=budget {
                    for k2 in 0..=(budget - k1) {
                        let len = budget - k1 - k2 + 1;
                        let row = &mu_cube[(k1 * n + k2) * n..(k1 * n + k2) * n + len];
                        let dst = &mut v1[(k1 * n + k2) * n..(k1 * n + k2) * n + s + 1];
                        for (nu3, d) in dst.iter_mut().enumerate() {
                            let e3r = &e3[nu3 * n..nu3 * n + len];
                            let mut acc = 0.0;
                            for (ev, mv) in e3r.iter().zip(row) {
                                acc += ev * mv;
                            }
                            *d = acc;
                        }
                        op_count += ((s + 1) * len) as u64;
                    }
                }
                // stage 2: contract kappa2 -> nu2
                for k1 in 0..=budget {
                    let len = budget - k1 + 1;
                    for nu2 in 0..=s {
                        let e2r = &e2[nu2 * n..nu2 * n + len];
                        for nu3 in 0..=(s - nu2) {
                            let mut acc = 0.0;
                            for (k2, ev) in e2r.iter().enumerate() {
                                acc += ev * v1[(k1 * n + k2) * n + nu3];
                            }
                            v2[(k1 * n + nu2) * n + nu3] = acc;
                        }
                        op_count += (len * (s - nu2 + 1)) as u64;
                    }
                }
                // stage 3: contract kappa1 -> nu1 on the shell |nu| = s,
                // whose graded-lex positions are contiguous
                for nu1 in 0..=s {
                    let e1r = &e1[nu1 * n..nu1 * n + budget + 1];
                    for nu2 in 0..=(s - nu1) {
                        let nu3 = s - nu1 - nu2;
                        let mut acc = 0.0;
                        for (k1, ev) in e1r.iter().enumerate() {
                            acc += ev * v2[(k1 * n + nu2) * n + nu3];
                        }
                        debug_assert_eq!(set.index_of([nu1, nu2, nu3]), pos);
                        lam_b[pos] += pref * acc;
                        pos += 1;
                    }
                    op_count += ((budget + 1) * (s - nu1 + 1)) as u64;
                }
            }
        }
    }
    ops.m2l += op_count;
}

/// Applies every stored nearfield block: f_near segments accumulate block
/// times source segment, in the block list order.
pub fn nearfield_apply(
    tree: &ClusterTree,
    mesh: &SpaceTimeMesh,
    blocks: &NearfieldBlocks,
    w: &[f64],
    f_near: &mut [f64],
    ops: &mut OpCounts,
) {
    for block in &blocks.blocks {
        apply_one_block(tree, mesh, block, w, f_near, ops);
    }
}

pub fn apply_one_block(
    tree: &ClusterTree,
    mesh: &SpaceTimeMesh,
    block: &crate::assembly::NearfieldBlock,
    w: &[f64],
    f_near: &mut [f64],
    ops: &mut OpCounts,
) {
    let zt = tree.cluster(block.target);
    let zs = tree.cluster(block.source);
    let w_seg: Vec<f64> = zs.elements().map(|(jt, jx)| w[mesh.dof0(jt, jx)]).collect();
    for (row, (kt, kx)) in zt.elements().enumerate() {
        let r = &block.data[row * block.n_cols..(row + 1) * block.n_cols];
        let mut s = 0.0;
        for (a, b) in r.iter().zip(&w_seg) {
            s += a * b;
        }
        f_near[mesh.dof0(kt, kx)] += s;
    }
    ops.nearfield += (block.n_rows * block.n_cols) as u64;
}

/// Workspace of one matvec: per-cluster moment and local tensors plus the
/// split result accumulators. The far/near split and the own/inherited
/// lambda split pin the floating accumulation order so that sequential and
/// distributed execution produce bitwise identical results.
pub struct FmmWorkspace {
    pub moments: Vec<Vec<f64>>,
    pub lambda_own: Vec<Vec<f64>>,
    pub lambda_total: Vec<Vec<f64>>,
    pub f_far: Vec<f64>,
    pub f_near: Vec<f64>,
    pub ops: OpCounts,
}

impl FmmWorkspace {
    pub fn new(setup: &FmmSetup, tree: &ClusterTree, n_dofs: usize) -> Self {
        let len = setup.tensor_len();
        let n = tree.n_clusters();
        FmmWorkspace {
            moments: vec![vec![0.0; len]; n],
            lambda_own: vec![vec![0.0; len]; n],
            lambda_total: vec![vec![0.0; len]; n],
            f_far: vec![0.0; n_dofs],
            f_near: vec![0.0; n_dofs],
            ops: OpCounts::default(),
        }
    }

    pub fn reset(&mut self) {
        for v in self
            .moments
            .iter_mut()
            .chain(self.lambda_own.iter_mut())
            .chain(self.lambda_total.iter_mut())
        {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        self.f_far.iter_mut().for_each(|x| *x = 0.0);
        self.f_near.iter_mut().for_each(|x| *x = 0.0);
        self.ops = OpCounts::default();
    }
}

/// The sequential space-time FMM matvec: forward transformation (S2M and
/// upward M2M), multiplication phase (M2L per interaction pair in list
/// order), backward transformation (top-down L2L combine, then L2T at the
/// leaves), and the nearfield evaluation; finally f = f_far + f_near.
pub fn fmm_apply_sequential(
    setup: &FmmSetup,
    tree: &ClusterTree,
    tt: &TemporalTree,
    mesh: &SpaceTimeMesh,
    blocks: &NearfieldBlocks,
    w: &[f64],
    ws: &mut FmmWorkspace,
) -> Vec<f64> {
    let _ = tt;
    ws.reset();
    let n = mesh.n_dofs();
    assert_eq!(w.len(), n);

    // forward: S2M at the leaves
    for c in tree.clusters() {
        if c.is_leaf {
            let w_seg: Vec<f64> = c.elements().map(|(kt, kx)| w[mesh.dof0(kt, kx)]).collect();
            let mut mu = std::mem::take(&mut ws.moments[c.id]);
            s2m(setup, tree, c.id, &w_seg, &mut mu, &mut ws.ops);
            ws.moments[c.id] = mu;
        }
    }
    // forward: M2M upwards
    for level in (0..tree.depth()).rev() {
        for &id in &tree.levels[level] {
            let c = tree.cluster(id);
            if c.is_leaf {
                continue;
            }
            let kind = c.child_refinement.unwrap();
            let mut mu = std::mem::take(&mut ws.moments[id]);
            for &ch in &c.children {
                let child = tree.cluster(ch);
                match kind {
                    RefinementKind::TemporalOnly => m2m_temporal(
                        setup,
                        c.interval,
                        child.interval,
                        &ws.moments[ch],
                        &mut mu,
                        &mut ws.ops,
                    ),
                    RefinementKind::SpaceTime => m2m_spacetime(
                        setup,
                        &c.box4(),
                        &child.box4(),
                        &ws.moments[ch],
                        &mut mu,
                        &mut ws.ops,
                    ),
                }
            }
            ws.moments[id] = mu;
        }
    }

    // multiplication phase: M2L in interaction-list order
    let mut scratch = M2lScratch::new(setup.orders.m_x);
    for c in tree.clusters() {
        if c.interaction.is_empty() {
            continue;
        }
        let mut lam = std::mem::take(&mut ws.lambda_own[c.id]);
        for &src in &c.interaction {
            let coeffs = setup
                .coeffs_for(tree, c.id, src)
                .expect("interaction pair admissible");
            m2l(setup, &coeffs, &ws.moments[src], &mut lam, &mut scratch, &mut ws.ops);
        }
        ws.lambda_own[c.id] = lam;
    }

    // backward: L2L into the inherited part, then total = inherited + own.
    // The split pins the floating accumulation order so a distributed run
    // (L-task and M2L-task in either order) reproduces these exact bits.
    for level in 0..=tree.depth() {
        for &id in &tree.levels[level] {
            let c = tree.cluster(id);
            let mut total = std::mem::take(&mut ws.lambda_total[id]);
            if let Some(pid) = c.parent {
                let parent = tree.cluster(pid);
                match parent.child_refinement.unwrap() {
                    RefinementKind::TemporalOnly => l2l_temporal(
                        setup,
                        parent.interval,
                        c.interval,
                        &ws.lambda_total[pid],
                        &mut total,
                        &mut ws.ops,
                    ),
                    RefinementKind::SpaceTime => l2l_spacetime(
                        setup,
                        &parent.box4(),
                        &c.box4(),
                        &ws.lambda_total[pid],
                        &mut total,
                        &mut ws.ops,
                    ),
                }
            }
            for (t, o) in total.iter_mut().zip(&ws.lambda_own[id]) {
                *t += o;
            }
            ws.lambda_total[id] = total;
        }
    }
    // backward: L2T at the leaves
    for c in tree.clusters() {
        if c.is_leaf {
            let lam = std::mem::take(&mut ws.lambda_total[c.id]);
            l2t(setup, tree, mesh, c.id, &lam, &mut ws.f_far, &mut ws.ops);
            ws.lambda_total[c.id] = lam;
        }
    }

    // nearfield evaluation
    nearfield_apply(tree, mesh, blocks, w, &mut ws.f_near, &mut ws.ops);

    ws.f_far.iter().zip(&ws.f_near).map(|(a, b)| a + b).collect()
}

/// Static operation-count model of one matvec from the block partition and
/// list structure; used by the complexity checks without running assembly.
pub fn matvec_op_estimate(tree: &ClusterTree, orders: &ExpansionOrders) -> u64 {
    let set = MultiIndexSet::new(orders.m_x);
    let n_t = (orders.m_t + 1) as u64;
    let n_m = set.len() as u64;
    let mut total = 0u64;
    for c in tree.clusters() {
        if c.is_leaf {
            total += 2 * c.n_elements() as u64 * n_t * n_m; // s2m + l2t
            for &src in &c.nearfield {
                total += (c.n_elements() * tree.cluster(src).n_elements()) as u64;
            }
        } else {
            total += c.children.len() as u64 * n_t * n_t * n_m; // m2m/l2l temporal part
        }
        // m2l: shell-staged transform cost
        let m = orders.m_x as u64;
        let mut per_pair = 0u64;
        for s in 0..=m {
            let b = m - s;
            per_pair += (b + 1) * (b + 2) / 2 * (s + 1) * (b + 2) / 2; // rough stage sums
        }
        total += c.interaction.len() as u64 * n_t * n_t * per_pair;
    }
    total
}

//! Galerkin single-layer matrix entries: the analytic double time integral of
//! the heat kernel, regularized spatial quadrature over triangle pairs, dense
//! oracle assembly and nearfield block assembly.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::mesh::SpaceTimeMesh;
use crate::quad::{pair_rule, PairKind, PairPoint};
use crate::tree::ClusterTree;
use crate::vec3::Vec3;

const PI: f64 = std::f64::consts::PI;
const SQRT_PI: f64 = 1.772453850905516;
/// Switch to the series form of the time-integrated kernel when
/// q^2 / s_min <= this bound (q = r / (2 sqrt(alpha))); keeps the relative
/// error of both branches below ~1e-10.
const SERIES_THRESHOLD: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum AssemblyError {
    #[error("negative spatial distance {0}")]
    NegativeDistance(f64),
    #[error("dense matrix of dimension {dofs} exceeds the cap of {cap} degrees of freedom")]
    DenseCapExceeded { dofs: usize, cap: usize },
    #[error("nearfield storage of {entries} entries exceeds the cap of {cap}")]
    NearfieldCapExceeded { entries: usize, cap: usize },
}

/// Quadrature orders per triangle-pair configuration plus the temporal
/// integration mode (only the analytic antiderivative is implemented).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureSpec {
    pub order_disjoint: usize,
    pub order_vertex: usize,
    pub order_edge: usize,
    pub order_identical: usize,
    pub temporal: TemporalMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalMode {
    AnalyticAntiderivative,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            order_disjoint: 4,
            order_vertex: 6,
            order_edge: 8,
            order_identical: 8,
            temporal: TemporalMode::AnalyticAntiderivative,
        }
    }
}

impl QuadratureSpec {
    pub fn order_for(&self, kind: PairKind) -> usize {
        match kind {
            PairKind::Disjoint => self.order_disjoint,
            PairKind::Vertex => self.order_vertex,
            PairKind::Edge => self.order_edge,
            PairKind::Identical => self.order_identical,
        }
    }

    pub fn doubled(&self) -> QuadratureSpec {
        QuadratureSpec {
            order_disjoint: 2 * self.order_disjoint,
            order_vertex: 2 * self.order_vertex,
            order_edge: 2 * self.order_edge,
            order_identical: 2 * self.order_identical,
            temporal: self.temporal,
        }
    }
}

/// Twice-integrated heat kernel in time. For the causal kernel g_r(s) =
/// (4 pi alpha s)^(-3/2) exp(-r^2/(4 alpha s)) the double integral over a
/// rectangle of time intervals reduces to signed combinations of
/// F2(s) = int_0^s (s - sigma) g_r(sigma) d sigma, which has the closed form
/// F2(s) = [(s + r^2/(2 alpha)) erfc(u) - r sqrt(s / (pi alpha)) e^(-u^2)]
///         / (4 pi alpha r),  u = r / sqrt(4 alpha s).
/// Near r = 0 the signed combination cancels catastrophically, so a series
/// in q = r / (2 sqrt(alpha)) is used instead (exact limit at r = 0).
#[derive(Debug, Clone, Copy)]
pub struct TimeKernel {
    pub alpha: f64,
}

impl TimeKernel {
    pub fn new(alpha: f64) -> Self {
        assert!(alpha > 0.0);
        TimeKernel { alpha }
    }

    /// F2(s) for a single s; 0 for s <= 0. Requires r > 0.
    pub fn f2(&self, s: f64, r: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        let a = self.alpha;
        let u = r / (4.0 * a * s).sqrt();
        if u > 26.5 {
            return 0.0; // erfc underflows
        }
        let q2 = r * r / (4.0 * a);
        let erfc_u = libm::erfc(u);
        let e = (-u * u).exp();
        ((s + 2.0 * q2) * erfc_u - 2.0 * (q2 * s).sqrt() / SQRT_PI * e) / (4.0 * PI * a * r)
    }

    /// The series form of the signed combination, valid when q^2 is small
    /// against every positive s: F2(s) = [s + 2 q^2
    ///   - (4 s / sqrt(pi)) (u + u^3/3 - u^5/30 + u^7/210 - ...)]
    ///   / (4 pi alpha r),  u = q / sqrt(s).
    fn series_combine(&self, r: f64, q2: f64, svals: [f64; 4], exact_cancel: bool) -> f64 {
        const SIGNS: [f64; 4] = [1.0, -1.0, -1.0, 1.0];
        let a = self.alpha;
        let mut d1 = 0.0;
        let mut c_pos = 0.0;
        let mut d_half = 0.0;
        let mut d_mhalf = 0.0;
        let mut d_m3half = 0.0;
        let mut d_m5half = 0.0;
        for (i, &s) in svals.iter().enumerate() {
            if s > 0.0 {
                let sq = s.sqrt();
                d1 += SIGNS[i] * s;
                c_pos += SIGNS[i];
                d_half += SIGNS[i] * sq;
                d_mhalf += SIGNS[i] / sq;
                d_m3half += SIGNS[i] / (s * sq);
                d_m5half += SIGNS[i] / (s * s * sq);
            }
        }
        if exact_cancel {
            d1 = 0.0;
        }
        let q = q2.sqrt();
        let bracket =
            d_half + q2 / 3.0 * d_mhalf - q2 * q2 / 30.0 * d_m3half + q2 * q2 * q2 / 210.0 * d_m5half;
        let smooth = q * c_pos / (4.0 * PI * a.powf(1.5)) - bracket / (2.0 * PI.powf(1.5) * a.powf(1.5));
        if d1 == 0.0 {
            smooth
        } else if r == 0.0 {
            f64::INFINITY
        } else {
            d1 / (4.0 * PI * a * r) + smooth
        }
    }

    /// Signed second difference over the four corner antiderivatives of an
    /// interval pair; `svals` = (s_pp, s_pm, s_mp, s_mm) with signs
    /// (+, -, -, +). `exact_cancel` marks combinations whose s-linear part
    /// vanishes identically (uniform-grid second differences), letting the
    /// series branch drop it exactly.
    fn combine(&self, r: f64, svals: [f64; 4], exact_cancel: bool) -> f64 {
        const SIGNS: [f64; 4] = [1.0, -1.0, -1.0, 1.0];
        let q2 = r * r / (4.0 * self.alpha);

        let mut s_min = f64::INFINITY;
        for &s in &svals {
            if s > 0.0 {
                s_min = s_min.min(s);
            }
        }
        if s_min == f64::INFINITY {
            return 0.0; // fully anti-causal
        }
        if q2 <= SERIES_THRESHOLD * s_min {
            return self.series_combine(r, q2, svals, exact_cancel);
        }
        let mut k = 0.0;
        for (i, &s) in svals.iter().enumerate() {
            k += SIGNS[i] * self.f2(s, r);
        }
        k
    }

    fn diff_svals(d: i64, h: f64) -> [f64; 4] {
        [
            (d + 1) as f64 * h,
            d as f64 * h,
            d as f64 * h,
            (d - 1) as f64 * h,
        ]
    }

    /// Kernel value for a uniform-grid pair with step difference
    /// d = k_t - j_t and step size h. Exactly 0 for d < 0.
    pub fn by_diff(&self, r: f64, d: i64, h: f64) -> f64 {
        if d < 0 {
            return 0.0;
        }
        if d == 0 {
            if r == 0.0 {
                return f64::INFINITY;
            }
            return self.f2(1.0f64 * h, r);
        }
        let q2 = r * r / (4.0 * self.alpha);
        let s_min = if d == 1 { h } else { (d - 1) as f64 * h };
        if q2 <= SERIES_THRESHOLD * s_min {
            return self.series_combine(r, q2, Self::diff_svals(d, h), true);
        }
        let f2m = self.f2((d - 1) as f64 * h, r);
        let f2d = self.f2(d as f64 * h, r);
        let f2p = self.f2((d + 1) as f64 * h, r);
        ((f2p - f2d) - f2d) + f2m
    }

    /// Batched variant sharing antiderivative values across step
    /// differences: `f2_tab[m]` caches F2(m h, r); each K(d) combines three
    /// table values exactly as [`by_diff`] would.
    pub fn by_diff_tabulated(
        &self,
        r: f64,
        q2: f64,
        d: i64,
        h: f64,
        f2_tab: &mut [f64],
        have: &mut [bool],
    ) -> f64 {
        if d < 0 {
            return 0.0;
        }
        let mut f2_at = |m: usize| -> f64 {
            if !have[m] {
                f2_tab[m] = self.f2(m as f64 * h, r);
                have[m] = true;
            }
            f2_tab[m]
        };
        if d == 0 {
            if r == 0.0 {
                return f64::INFINITY;
            }
            return f2_at(1);
        }
        let du = d as usize;
        let s_min = if d == 1 { h } else { (d - 1) as f64 * h };
        if q2 <= SERIES_THRESHOLD * s_min {
            return self.series_combine(r, q2, Self::diff_svals(d, h), true);
        }
        let f2m = f2_at(du - 1);
        let f2d = f2_at(du);
        let f2p = f2_at(du + 1);
        ((f2p - f2d) - f2d) + f2m
    }

    /// Kernel value for arbitrary target/source intervals.
    pub fn by_intervals(&self, r: f64, target: (f64, f64), source: (f64, f64)) -> f64 {
        let svals = [
            target.1 - source.0,
            target.1 - source.1,
            target.0 - source.0,
            target.0 - source.1,
        ];
        self.combine(r, svals, false)
    }
}

/// The double time integral of the heat kernel over an interval pair at
/// spatial distance r: the matrix-entry kernel before spatial integration.
/// Strictly anti-causal pairs give exactly 0.
pub fn time_integrated_kernel(
    r: f64,
    target: (f64, f64),
    source: (f64, f64),
    alpha: f64,
) -> Result<f64, AssemblyError> {
    if r < 0.0 {
        return Err(AssemblyError::NegativeDistance(r));
    }
    Ok(TimeKernel::new(alpha).by_intervals(r, target, source))
}

/// Classifies a triangle pair by shared vertex count and returns the vertex
/// permutations required by the singular quadrature maps: shared edge first
/// (same orientation) for edge pairs, shared vertex first for vertex pairs.
pub fn classify_pair(
    tri_a: [usize; 3],
    tri_b: [usize; 3],
) -> (PairKind, [usize; 3], [usize; 3]) {
    if tri_a == tri_b {
        return (PairKind::Identical, [0, 1, 2], [0, 1, 2]);
    }
    let mut shared: Vec<(usize, usize)> = Vec::new();
    for (ia, &va) in tri_a.iter().enumerate() {
        for (ib, &vb) in tri_b.iter().enumerate() {
            if va == vb {
                shared.push((ia, ib));
            }
        }
    }
    match shared.len() {
        0 => (PairKind::Disjoint, [0, 1, 2], [0, 1, 2]),
        1 => {
            let (ia, ib) = shared[0];
            (PairKind::Vertex, rotate_first(ia), rotate_first(ib))
        }
        2 => {
            // order both permutations so the shared edge is (P0, P1) with
            // identical global orientation
            let (a0, b0) = shared[0];
            let (a1, b1) = shared[1];
            let pa = perm_with_front(a0, a1);
            let pb = perm_with_front(b0, b1);
            (PairKind::Edge, pa, pb)
        }
        _ => (PairKind::Identical, [0, 1, 2], [0, 1, 2]),
    }
}

fn rotate_first(i: usize) -> [usize; 3] {
    [i, (i + 1) % 3, (i + 2) % 3]
}

fn perm_with_front(first: usize, second: usize) -> [usize; 3] {
    let third = 3 - first - second;
    [first, second, third]
}

/// Reference rules for each pair configuration at the spec's orders, built
/// once and shared across entry evaluations.
#[derive(Debug)]
pub struct PairRules {
    rules: HashMap<PairKind, Vec<PairPoint>>,
}

impl PairRules {
    pub fn new(spec: &QuadratureSpec) -> Self {
        let mut rules = HashMap::new();
        for kind in [PairKind::Disjoint, PairKind::Vertex, PairKind::Edge, PairKind::Identical] {
            rules.insert(kind, pair_rule(kind, spec.order_for(kind)));
        }
        PairRules { rules }
    }

    pub fn get(&self, kind: PairKind) -> &[PairPoint] {
        &self.rules[&kind]
    }
}

fn permuted(v: [Vec3; 3], p: [usize; 3]) -> [Vec3; 3] {
    [v[p[0]], v[p[1]], v[p[2]]]
}

fn map_point(p: &[Vec3; 3], xi: [f64; 2]) -> Vec3 {
    p[0] + (p[1] - p[0]) * xi[0] + (p[2] - p[1]) * xi[1]
}

/// Distances |x - y| at every quadrature point of the pair rule, with the
/// combined physical weights (including both Jacobians).
fn pair_geometry(
    rule: &[PairPoint],
    tar: &[Vec3; 3],
    src: &[Vec3; 3],
    jac: f64,
) -> Vec<(f64, f64)> {
    rule.iter()
        .map(|pt| {
            let x = map_point(tar, pt.x);
            let y = map_point(src, pt.y);
            ((x - y).norm(), pt.w * jac)
        })
        .collect()
}

/// Galerkin entries for one spatial triangle pair and a rectangle of time
/// steps, sharing the spatial quadrature geometry across all step pairs.
/// Returns entries in (k_t, j_t) row-major order over the given 1-based
/// inclusive step ranges.
pub fn pair_entries(
    mesh: &SpaceTimeMesh,
    alpha: f64,
    rules: &PairRules,
    k_x: usize,
    j_x: usize,
    kt_range: (usize, usize),
    jt_range: (usize, usize),
) -> Vec<f64> {
    let (kind, pa, pb) = classify_pair(mesh.space.triangles[k_x - 1], mesh.space.triangles[j_x - 1]);
    let tar = permuted(mesh.space.triangle_vertices(k_x - 1), pa);
    let src = permuted(mesh.space.triangle_vertices(j_x - 1), pb);
    let jac = 4.0 * mesh.space.areas[k_x - 1] * mesh.space.areas[j_x - 1];
    let geom = pair_geometry(rules.get(kind), &tar, &src, jac);

    let tk = TimeKernel::new(alpha);
    let h = mesh.h_t;
    let n_k = kt_range.1 - kt_range.0 + 1;
    let n_j = jt_range.1 - jt_range.0 + 1;
    let d_max = kt_range.1 as i64 - jt_range.0 as i64;
    let mut out = vec![0.0; n_k * n_j];
    if d_max < 0 {
        return out;
    }
    let tab_len = d_max as usize + 2;
    let mut f2_tab = vec![0.0; tab_len];
    let mut have = vec![false; tab_len];
    let mut kvals = vec![0.0; d_max as usize + 1];
    for &(r, w) in &geom {
        have.iter_mut().for_each(|v| *v = false);
        let q2 = r * r / (4.0 * alpha);
        for (d, kv) in kvals.iter_mut().enumerate() {
            *kv = tk.by_diff_tabulated(r, q2, d as i64, h, &mut f2_tab, &mut have);
        }
        for (ik, k_t) in (kt_range.0..=kt_range.1).enumerate() {
            for (ij, j_t) in (jt_range.0..=jt_range.1).enumerate() {
                let d = k_t as i64 - j_t as i64;
                if d < 0 {
                    continue;
                }
                out[ik * n_j + ij] += w * kvals[d as usize];
            }
        }
    }
    out
}

/// A single Galerkin single-layer entry for elements (k_t, k_x), (j_t, j_x),
/// all 1-based. Exactly 0 when j_t > k_t.
pub fn nearfield_entry(
    mesh: &SpaceTimeMesh,
    alpha: f64,
    rules: &PairRules,
    target: (usize, usize),
    source: (usize, usize),
) -> f64 {
    if source.0 > target.0 {
        return 0.0;
    }
    pair_entries(mesh, alpha, rules, target.1, source.1, (target.0, target.0), (source.0, source.0))[0]
}

/// Row-major dense matrix.
#[derive(Debug, Clone)]
pub struct DenseMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n + col]
    }

    pub fn matvec(&self, w: &[f64]) -> Vec<f64> {
        assert_eq!(w.len(), self.n);
        let mut f = vec![0.0; self.n];
        for i in 0..self.n {
            let row = &self.data[i * self.n..(i + 1) * self.n];
            let mut s = 0.0;
            for (a, b) in row.iter().zip(w) {
                s += a * b;
            }
            f[i] = s;
        }
        f
    }

    /// Text export: one row per line, entries separated by single spaces.
    pub fn write_text(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let file = std::fs::File::create(path)?;
        let mut out = std::io::BufWriter::new(file);
        for i in 0..self.n {
            let row = &self.data[i * self.n..(i + 1) * self.n];
            let line: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

/// Assembles the full single-layer matrix, row/column indexed by the global
/// DOF formula. Intended as the dense oracle; refuses above `dense_cap` DOFs.
pub fn assemble_dense(
    mesh: &SpaceTimeMesh,
    alpha: f64,
    spec: &QuadratureSpec,
    dense_cap: usize,
) -> Result<DenseMatrix, AssemblyError> {
    let n = mesh.n_dofs();
    if n > dense_cap {
        return Err(AssemblyError::DenseCapExceeded { dofs: n, cap: dense_cap });
    }
    let rules = PairRules::new(spec);
    let e_x = mesh.n_spatial();
    let e_t = mesh.n_timesteps;

    let pair_blocks: Vec<(usize, usize, Vec<f64>)> = (0..e_x * e_x)
        .into_par_iter()
        .map(|p| {
            let k_x = p / e_x + 1;
            let j_x = p % e_x + 1;
            let entries = pair_entries(mesh, alpha, &rules, k_x, j_x, (1, e_t), (1, e_t));
            (k_x, j_x, entries)
        })
        .collect();

    let mut data = vec![0.0; n * n];
    for (k_x, j_x, entries) in pair_blocks {
        for k_t in 1..=e_t {
            for j_t in 1..=e_t {
                let row = mesh.dof0(k_t, k_x);
                let col = mesh.dof0(j_t, j_x);
                data[row * n + col] = entries[(k_t - 1) * e_t + (j_t - 1)];
            }
        }
    }
    Ok(DenseMatrix { n, data })
}

/// Dense block coupling one target leaf cluster with one nearfield source
/// cluster; row/column ordering matches the clusters' element lists.
#[derive(Debug, Clone)]
pub struct NearfieldBlock {
    pub target: usize,
    pub source: usize,
    pub n_rows: usize,
    pub n_cols: usize,
    pub data: Vec<f64>,
}

/// All nearfield blocks of the tree: one per (leaf target, nearfield source)
/// pair, retained for repeated application.
#[derive(Debug)]
pub struct NearfieldBlocks {
    pub blocks: Vec<NearfieldBlock>,
}

impl NearfieldBlocks {
    pub fn total_entries(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }
}

/// Estimated entry count of the nearfield, before any allocation.
pub fn nearfield_entry_estimate(tree: &ClusterTree) -> usize {
    let mut total = 0;
    for z in tree.clusters() {
        if !z.is_leaf {
            continue;
        }
        let rows = z.n_elements();
        for &src in &z.nearfield {
            total += rows * tree.cluster(src).n_elements();
        }
    }
    total
}

/// Assembles every inadmissible block (leaf target x nearfield source).
/// Fails before allocating anything if the estimate exceeds `entry_cap`.
pub fn assemble_nearfield(
    tree: &ClusterTree,
    mesh: &SpaceTimeMesh,
    alpha: f64,
    spec: &QuadratureSpec,
    entry_cap: usize,
) -> Result<NearfieldBlocks, AssemblyError> {
    let estimate = nearfield_entry_estimate(tree);
    if estimate > entry_cap {
        return Err(AssemblyError::NearfieldCapExceeded { entries: estimate, cap: entry_cap });
    }
    let rules = PairRules::new(spec);
    let pairs: Vec<(usize, usize)> = tree
        .clusters()
        .iter()
        .filter(|z| z.is_leaf)
        .flat_map(|z| z.nearfield.iter().map(move |&s| (z.id, s)))
        .collect();
    let blocks: Vec<NearfieldBlock> = pairs
        .into_par_iter()
        .map(|(t, s)| assemble_block(tree, mesh, alpha, &rules, t, s))
        .collect();
    Ok(NearfieldBlocks { blocks })
}

/// One dense block, grouping entry evaluation by spatial pair so the
/// quadrature geometry is shared across all step pairs of the block.
pub fn assemble_block(
    tree: &ClusterTree,
    mesh: &SpaceTimeMesh,
    alpha: f64,
    rules: &PairRules,
    target: usize,
    source: usize,
) -> NearfieldBlock {
    let zt = tree.cluster(target);
    let zs = tree.cluster(source);
    let n_rows = zt.n_elements();
    let n_cols = zs.n_elements();
    let mut data = vec![0.0; n_rows * n_cols];
    let (t_steps, t_tris) = (&zt.steps, &zt.triangles);
    let (s_steps, s_tris) = (&zs.steps, &zs.triangles);
    let kt_range = (t_steps[0], *t_steps.last().unwrap());
    let jt_range = (s_steps[0], *s_steps.last().unwrap());
    let n_jt = jt_range.1 - jt_range.0 + 1;
    for (a, &k_x) in t_tris.iter().enumerate() {
        for (b, &j_x) in s_tris.iter().enumerate() {
            let entries = pair_entries(mesh, alpha, rules, k_x, j_x, kt_range, jt_range);
            // element lists are step-major with contiguous steps
            for (ik, &k_t) in t_steps.iter().enumerate() {
                for (ij, &j_t) in s_steps.iter().enumerate() {
                    let row = ik * t_tris.len() + a;
                    let col = ij * s_tris.len() + b;
                    data[row * n_cols + col] =
                        entries[(k_t - kt_range.0) * n_jt + (j_t - jt_range.0)];
                }
            }
        }
    }
    NearfieldBlock { target, source, n_rows, n_cols, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_tensor_mesh, generate_cube_surface};

    /// Adaptive Simpson in 1D with a tolerance relative to the integral's
    /// own scale; used to build an independent double-integral oracle for the
    /// time-integrated kernel.
    fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> f64 {
        fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
            (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
        }
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64, depth: usize) -> f64 {
            let m = 0.5 * (a + b);
            let left = simpson(f, a, m);
            let right = simpson(f, m, b);
            if depth > 24 || (left + right - whole).abs() <= 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                rec(f, a, m, left, tol / 2.0, depth + 1) + rec(f, m, b, right, tol / 2.0, depth + 1)
            }
        }
        let whole = simpson(f, a, b);
        let scale = whole.abs().max(1e-300);
        rec(f, a, b, whole, rel_tol * scale, 0)
    }

    fn heat_g(r: f64, s: f64, alpha: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        (4.0 * PI * alpha * s).powf(-1.5) * (-r * r / (4.0 * alpha * s)).exp()
    }

    fn oracle_double_integral(r: f64, target: (f64, f64), source: (f64, f64), alpha: f64) -> f64 {
        adaptive_simpson(
            &|t| {
                adaptive_simpson(&|tau| heat_g(r, t - tau, alpha), source.0, source.1, 1e-13)
            },
            target.0,
            target.1,
            1e-12,
        )
    }

    #[test]
    fn anti_causal_pair_is_exact_zero() {
        let v = time_integrated_kernel(0.5, (0.0, 0.1), (0.2, 0.3), 1.0).unwrap();
        assert_eq!(v, 0.0);
        let tk = TimeKernel::new(1.0);
        assert_eq!(tk.by_diff(0.3, -1, 0.1), 0.0);
        assert_eq!(tk.by_diff(0.3, -7, 0.1), 0.0);
    }

    #[test]
    fn large_distance_underflows_to_zero() {
        // dt_max = largest time difference across the interval pair
        let dt_max: f64 = 0.2;
        let r = 30.0 * (4.0 * 1.0 * dt_max).sqrt();
        let v = time_integrated_kernel(r, (0.1, 0.2), (0.0, 0.1), 1.0).unwrap();
        assert!(v.abs() <= 1e-300, "got {v}");
    }

    #[test]
    fn negative_distance_rejected() {
        assert!(time_integrated_kernel(-0.1, (0.2, 0.3), (0.0, 0.1), 1.0).is_err());
    }

    #[test]
    fn matches_adaptive_double_integration() {
        // separated intervals, smooth kernel
        for (r, alpha) in [(0.5, 1.0), (0.13, 0.7), (1.1, 2.5)] {
            let tar = (0.2, 0.3);
            let src = (0.0, 0.1);
            let v = time_integrated_kernel(r, tar, src, alpha).unwrap();
            let oracle = oracle_double_integral(r, tar, src, alpha);
            assert!(
                ((v - oracle) / oracle).abs() < 1e-10,
                "r={r} alpha={alpha}: {v} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn matches_oracle_on_same_interval() {
        // d = 0: the singular self pair, still integrable for r > 0
        for r in [0.4, 0.05] {
            let v = time_integrated_kernel(r, (0.1, 0.2), (0.1, 0.2), 1.0).unwrap();
            let oracle = oracle_double_integral(r, (0.1, 0.2), (0.1, 0.2), 1.0);
            assert!(
                ((v - oracle) / oracle).abs() < 1e-9,
                "r={r}: {v} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn series_and_closed_form_agree_at_the_threshold() {
        // Probe r around the branch switch for adjacent and separated pairs.
        let tk = TimeKernel::new(1.0);
        let h = 0.015625;
        for d in [1i64, 2, 5, 15] {
            let s_min = if d == 1 { h } else { (d - 1) as f64 * h };
            let r_switch = (SERIES_THRESHOLD * s_min * 4.0).sqrt();
            for f in [0.5, 0.99, 1.01, 2.0] {
                let r = f * r_switch;
                let v = tk.by_diff(r, d, h);
                let svals = [
                    (d + 1) as f64 * h,
                    d as f64 * h,
                    d as f64 * h,
                    (d - 1) as f64 * h,
                ];
                let mut closed = 0.0;
                for (i, &s) in svals.iter().enumerate() {
                    closed += [1.0, -1.0, -1.0, 1.0][i] * tk.f2(s, r);
                }
                assert!(
                    ((v - closed) / closed).abs() < 2e-9,
                    "d={d} r={r}: branch value {v} vs closed {closed}"
                );
            }
        }
    }

    #[test]
    fn r_zero_limits() {
        let tk = TimeKernel::new(1.3);
        let h = 0.02;
        // separated pair: finite limit -D_{1/2} / (2 pi^{3/2} alpha^{3/2})
        let v0 = tk.by_diff(0.0, 3, h);
        let d_half = (4.0f64 * h).sqrt() - 2.0 * (3.0f64 * h).sqrt() + (2.0f64 * h).sqrt();
        let expect = -d_half / (2.0 * PI.powf(1.5) * 1.3f64.powf(1.5));
        assert!(((v0 - expect) / expect).abs() < 1e-14);
        // continuous: r -> 0 approaches the limit
        let v_eps = tk.by_diff(1e-8, 3, h);
        assert!(((v_eps - v0) / v0).abs() < 1e-6);
        // same-step pair diverges
        assert!(tk.by_diff(0.0, 0, h).is_infinite());
    }

    #[test]
    fn classify_pairs() {
        let (k, pa, pb) = classify_pair([3, 4, 5], [3, 4, 5]);
        assert_eq!(k, PairKind::Identical);
        assert_eq!((pa, pb), ([0, 1, 2], [0, 1, 2]));

        let (k, pa, pb) = classify_pair([0, 1, 2], [2, 1, 7]);
        assert_eq!(k, PairKind::Edge);
        // shared vertices 1 and 2 must come first in the same global order
        assert_eq!(pa[2], 0);
        assert_eq!(pb[2], 2);
        let a_front = [[0, 1, 2][pa[0]], [0, 1, 2][pa[1]]];
        let b_front = [[2, 1, 7][pb[0]], [2, 1, 7][pb[1]]];
        assert_eq!(a_front, b_front);

        let (k, pa, pb) = classify_pair([0, 1, 2], [5, 2, 9]);
        assert_eq!(k, PairKind::Vertex);
        assert_eq!([0, 1, 2][pa[0]], 2);
        assert_eq!([5, 2, 9][pb[0]], 2);

        let (k, ..) = classify_pair([0, 1, 2], [6, 7, 8]);
        assert_eq!(k, PairKind::Disjoint);
    }

    fn test_mesh() -> SpaceTimeMesh {
        build_tensor_mesh(generate_cube_surface(2, Vec3::ZERO, 0.5), 0.5, 8)
    }

    #[test]
    fn anti_causal_entries_are_exact_zero() {
        let mesh = test_mesh();
        let rules = PairRules::new(&QuadratureSpec::default());
        for (kx, jx) in [(1, 1), (1, 2), (5, 17)] {
            assert_eq!(nearfield_entry(&mesh, 1.0, &rules, (2, kx), (3, jx)), 0.0);
        }
    }

    #[test]
    fn disjoint_entry_matches_high_order_reference() {
        // far pair, smooth integrand: compare default order against a
        // much finer rule
        let mesh = test_mesh();
        let spec = QuadratureSpec::default();
        let fine = QuadratureSpec {
            order_disjoint: 20,
            ..spec
        };
        let rules = PairRules::new(&spec);
        let rules_fine = PairRules::new(&fine);
        // pick a disjoint pair: triangles on opposite cube faces
        let mut pair = None;
        for j in 2..=mesh.n_spatial() {
            let (k, ..) = classify_pair(mesh.space.triangles[0], mesh.space.triangles[j - 1]);
            if k == PairKind::Disjoint {
                let d = (mesh.space.centroid(0) - mesh.space.centroid(j - 1)).norm();
                if d > 0.9 {
                    pair = Some(j);
                    break;
                }
            }
        }
        let j = pair.expect("found a far disjoint pair");
        let rules8 = PairRules::new(&QuadratureSpec { order_disjoint: 8, ..spec });
        for (kt, jt) in [(5, 3), (4, 4), (8, 1)] {
            let v = nearfield_entry(&mesh, 1.0, &rules, (kt, 1), (jt, j));
            let v8 = nearfield_entry(&mesh, 1.0, &rules8, (kt, 1), (jt, j));
            let vf = nearfield_entry(&mesh, 1.0, &rules_fine, (kt, 1), (jt, j));
            assert!(((v8 - vf) / vf).abs() < 1e-9, "({kt},{jt}) order 8: {v8} vs fine {vf}");
            assert!(((v - vf) / vf).abs() < 1e-4, "({kt},{jt}) default: {v} vs fine {vf}");
        }
    }

    #[test]
    fn singular_entries_self_converge() {
        let mesh = test_mesh();
        let spec = QuadratureSpec::default();
        let rules = PairRules::new(&spec);
        let rules2 = PairRules::new(&spec.doubled());
        // identical pair, same step (strongest singularity)
        let v = nearfield_entry(&mesh, 1.0, &rules, (3, 1), (3, 1));
        let v2 = nearfield_entry(&mesh, 1.0, &rules2, (3, 1), (3, 1));
        assert!(v.is_finite() && v > 0.0);
        assert!(((v - v2) / v2).abs() < 1e-6, "identical: {v} vs {v2}");
        // edge-adjacent pair
        let mut edge_j = None;
        for j in 2..=mesh.n_spatial() {
            if classify_pair(mesh.space.triangles[0], mesh.space.triangles[j - 1]).0 == PairKind::Edge {
                edge_j = Some(j);
                break;
            }
        }
        let j = edge_j.unwrap();
        let v = nearfield_entry(&mesh, 1.0, &rules, (3, 1), (3, j));
        let v2 = nearfield_entry(&mesh, 1.0, &rules2, (3, 1), (3, j));
        assert!(((v - v2) / v2).abs() < 1e-6, "edge: {v} vs {v2}");
    }

    #[test]
    fn entry_symmetric_under_space_time_swap() {
        // swapping triangles and intervals together preserves the value up to
        // quadrature error (the kernel depends on |x - y| and the time
        // difference pattern is mirrored)
        let mesh = test_mesh();
        let rules = PairRules::new(&QuadratureSpec::default());
        for (kx, jx) in [(1, 2), (1, 9), (3, 20)] {
            let v1 = nearfield_entry(&mesh, 1.0, &rules, (5, kx), (3, jx));
            let v2 = nearfield_entry(&mesh, 1.0, &rules, (5, jx), (3, kx));
            assert!(
                ((v1 - v2) / v1.abs().max(1e-300)).abs() < 1e-9,
                "({kx},{jx}): {v1} vs {v2}"
            );
        }
    }

    #[test]
    fn dense_is_block_lower_triangular_and_nonnegative() {
        let space = generate_cube_surface(1, Vec3::ZERO, 0.5);
        let mesh = build_tensor_mesh(space, 0.25, 4);
        let dense = assemble_dense(&mesh, 1.0, &QuadratureSpec::default(), 1 << 14).unwrap();
        let ex = mesh.n_spatial();
        for kt in 1..=4 {
            for jt in 1..=4 {
                for kx in 1..=ex {
                    for jx in 1..=ex {
                        let v = dense.get(mesh.dof0(kt, kx), mesh.dof0(jt, jx));
                        if jt > kt {
                            assert_eq!(v, 0.0, "upper block ({kt},{kx})x({jt},{jx})");
                        } else {
                            assert!(v >= 0.0, "negative entry {v} at ({kt},{kx})x({jt},{jx})");
                            assert!(v.is_finite());
                        }
                    }
                }
            }
        }
        // causal rows have positive sums
        for kt in 1..=4 {
            for kx in 1..=ex {
                let row = mesh.dof0(kt, kx);
                let sum: f64 = (0..dense.n).map(|c| dense.get(row, c)).sum();
                assert!(sum > 0.0);
            }
        }
    }

    #[test]
    fn dense_cap_is_enforced() {
        let mesh = test_mesh();
        assert!(matches!(
            assemble_dense(&mesh, 1.0, &QuadratureSpec::default(), 10),
            Err(AssemblyError::DenseCapExceeded { .. })
        ));
    }

    #[test]
    fn repeated_assembly_is_bit_identical() {
        let space = generate_cube_surface(1, Vec3::ZERO, 0.5);
        let mesh = build_tensor_mesh(space, 0.25, 3);
        let spec = QuadratureSpec::default();
        let a = assemble_dense(&mesh, 1.0, &spec, 1 << 14).unwrap();
        let b = assemble_dense(&mesh, 1.0, &spec, 1 << 14).unwrap();
        assert_eq!(a.data, b.data);
    }
}

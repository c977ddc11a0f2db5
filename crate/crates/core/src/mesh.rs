//! Spatial triangle meshes, space-time tensor-product meshes and time-slice
//! partitions.
//!
//! The space-time mesh is the Cartesian product of a fixed surface
//! triangulation and uniform time-steps `t_k = k * h_t`. A space-time boundary
//! element is a pair `(k_t, k_x)` of a time-step index and a triangle index,
//! both 1-based in the public API; the global degree-of-freedom index is
//! `(k_t - 1) * E_x + k_x`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::vec3::Vec3;

#[derive(Debug, thiserror::Error)]
pub enum MeshError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty mesh file")]
    Empty,
    #[error("triangle {tri} references vertex {vertex} but only {n_vertices} vertices exist (line {line})")]
    IndexOutOfRange { tri: usize, vertex: usize, n_vertices: usize, line: usize },
    #[error("triangle {tri} is degenerate (zero area)")]
    DegenerateTriangle { tri: usize },
    #[error("invalid slice count: {n_slices} slices requested for {n_timesteps} time-steps")]
    BadSliceCount { n_slices: usize, n_timesteps: usize },
}

/// A surface triangulation with precomputed per-triangle areas and unit
/// normals. Internally generated meshes are closed and consistently oriented.
#[derive(Debug, Clone)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub areas: Vec<f64>,
    pub normals: Vec<Vec3>,
}

impl TriMesh {
    /// Builds a mesh from raw vertex and index data, recomputing areas and
    /// normals from the vertex order (counterclockwise seen from outside).
    pub fn from_raw(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        let mut areas = Vec::with_capacity(triangles.len());
        let mut normals = Vec::with_capacity(triangles.len());
        for (i, t) in triangles.iter().enumerate() {
            for &v in t {
                if v >= vertices.len() {
                    return Err(MeshError::IndexOutOfRange {
                        tri: i,
                        vertex: v,
                        n_vertices: vertices.len(),
                        line: 0,
                    });
                }
            }
            let [a, b, c] = [vertices[t[0]], vertices[t[1]], vertices[t[2]]];
            let cr = (b - a).cross(c - a);
            let two_area = cr.norm();
            if two_area <= 0.0 {
                return Err(MeshError::DegenerateTriangle { tri: i });
            }
            areas.push(0.5 * two_area);
            normals.push(cr / two_area);
        }
        Ok(TriMesh { vertices, triangles, areas, normals })
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn triangle_vertices(&self, i: usize) -> [Vec3; 3] {
        let t = self.triangles[i];
        [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]]
    }

    pub fn centroid(&self, i: usize) -> Vec3 {
        let [a, b, c] = self.triangle_vertices(i);
        (a + b + c) / 3.0
    }

    /// Longest edge length of triangle `i`.
    pub fn diameter(&self, i: usize) -> f64 {
        let [a, b, c] = self.triangle_vertices(i);
        (b - a).norm().max((c - b).norm()).max((a - c).norm())
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    /// Counts of triangles incident to each undirected edge. A watertight
    /// closed surface has every count equal to 2.
    pub fn edge_incidence(&self) -> HashMap<(usize, usize), usize> {
        let mut counts = HashMap::new();
        for t in &self.triangles {
            for e in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                let key = (e.0.min(e.1), e.0.max(e.1));
                *counts.entry(key).or_insert(0) += 1;
            }
        }
        counts
    }

    pub fn is_closed(&self) -> bool {
        self.edge_incidence().values().all(|&c| c == 2)
    }
}

/// Generates a closed triangulation of the surface of the axis-aligned cube
/// centered at `center` with half-width `half_width`, with `subdiv` cells per
/// edge (12 * subdiv^2 triangles). Triangles wind counterclockwise viewed from
/// outside the cube.
pub fn generate_cube_surface(subdiv: usize, center: Vec3, half_width: f64) -> TriMesh {
    assert!(subdiv >= 1, "subdiv must be >= 1");
    assert!(half_width > 0.0, "half_width must be positive");
    let n = subdiv;
    let step = 2.0 * half_width / n as f64;
    let origin = center - Vec3::splat(half_width);

    let mut vertex_ids: HashMap<(usize, usize, usize), usize> = HashMap::new();
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut triangles: Vec<[usize; 3]> = Vec::new();

    let mut vertex = |key: (usize, usize, usize), vertices: &mut Vec<Vec3>| -> usize {
        *vertex_ids.entry(key).or_insert_with(|| {
            vertices.push(Vec3::new(
                origin.x + key.0 as f64 * step,
                origin.y + key.1 as f64 * step,
                origin.z + key.2 as f64 * step,
            ));
            vertices.len() - 1
        })
    };

    // Each face is described by its fixed axis/side and the two in-plane axes
    // (u, v) chosen so that u x v points outward.
    struct Face {
        fixed_axis: usize,
        fixed_value: usize,
        u_axis: usize,
        v_axis: usize,
    }
    let faces = [
        Face { fixed_axis: 0, fixed_value: 1, u_axis: 1, v_axis: 2 }, // +x
        Face { fixed_axis: 0, fixed_value: 0, u_axis: 2, v_axis: 1 }, // -x
        Face { fixed_axis: 1, fixed_value: 1, u_axis: 2, v_axis: 0 }, // +y
        Face { fixed_axis: 1, fixed_value: 0, u_axis: 0, v_axis: 2 }, // -y
        Face { fixed_axis: 2, fixed_value: 1, u_axis: 0, v_axis: 1 }, // +z
        Face { fixed_axis: 2, fixed_value: 0, u_axis: 1, v_axis: 0 }, // -z
    ];

    for face in &faces {
        let fixed = face.fixed_value * n;
        for i in 0..n {
            for j in 0..n {
                let lattice = |u: usize, v: usize| {
                    let mut key = [0usize; 3];
                    key[face.fixed_axis] = fixed;
                    key[face.u_axis] = u;
                    key[face.v_axis] = v;
                    (key[0], key[1], key[2])
                };
                let p00 = vertex(lattice(i, j), &mut vertices);
                let p10 = vertex(lattice(i + 1, j), &mut vertices);
                let p11 = vertex(lattice(i + 1, j + 1), &mut vertices);
                let p01 = vertex(lattice(i, j + 1), &mut vertices);
                triangles.push([p00, p10, p11]);
                triangles.push([p00, p11, p01]);
            }
        }
    }

    TriMesh::from_raw(vertices, triangles).expect("generated cube mesh is valid")
}

/// Outcome of loading a mesh from disk: the mesh plus non-fatal findings such
/// as non-manifold edges.
#[derive(Debug)]
pub struct MeshLoadResult {
    pub mesh: TriMesh,
    pub warnings: Vec<String>,
}

/// Reads a mesh in the plain text format: a header `N_VERTICES N_TRIANGLES`,
/// one vertex (3 floats) per line, then one triangle (3 0-based indices) per
/// line. Normals are recomputed from vertex order.
pub fn load_spatial_mesh(path: impl AsRef<Path>) -> Result<MeshLoadResult, MeshError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let mut next_content_line = || -> Result<Option<(usize, String)>, MeshError> {
        for (idx, line) in lines.by_ref() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            return Ok(Some((idx + 1, trimmed.to_string())));
        }
        Ok(None)
    };

    let (header_line, header) = next_content_line()?.ok_or(MeshError::Empty)?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 2 {
        return Err(MeshError::Parse {
            line: header_line,
            msg: format!("expected header `N_VERTICES N_TRIANGLES`, got `{header}`"),
        });
    }
    let n_vertices: usize = parts[0].parse().map_err(|e| MeshError::Parse {
        line: header_line,
        msg: format!("bad vertex count: {e}"),
    })?;
    let n_triangles: usize = parts[1].parse().map_err(|e| MeshError::Parse {
        line: header_line,
        msg: format!("bad triangle count: {e}"),
    })?;

    let mut vertices = Vec::with_capacity(n_vertices);
    for _ in 0..n_vertices {
        let (line_no, line) = next_content_line()?.ok_or(MeshError::Parse {
            line: header_line,
            msg: format!("file ends before {n_vertices} vertices were read"),
        })?;
        let coords: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        match coords {
            Ok(c) if c.len() == 3 => vertices.push(Vec3::new(c[0], c[1], c[2])),
            _ => {
                return Err(MeshError::Parse {
                    line: line_no,
                    msg: format!("expected 3 floats, got `{line}`"),
                })
            }
        }
    }

    let mut triangles = Vec::with_capacity(n_triangles);
    for t in 0..n_triangles {
        let (line_no, line) = next_content_line()?.ok_or(MeshError::Parse {
            line: header_line,
            msg: format!("file ends before {n_triangles} triangles were read"),
        })?;
        let idx: Result<Vec<usize>, _> = line.split_whitespace().map(str::parse).collect();
        match idx {
            Ok(ix) if ix.len() == 3 => {
                for &v in &ix {
                    if v >= n_vertices {
                        return Err(MeshError::IndexOutOfRange {
                            tri: t,
                            vertex: v,
                            n_vertices,
                            line: line_no,
                        });
                    }
                }
                triangles.push([ix[0], ix[1], ix[2]]);
            }
            _ => {
                return Err(MeshError::Parse {
                    line: line_no,
                    msg: format!("expected 3 vertex indices, got `{line}`"),
                })
            }
        }
    }

    let mesh = TriMesh::from_raw(vertices, triangles)?;
    let mut warnings = Vec::new();
    for (edge, count) in mesh.edge_incidence() {
        if count != 2 {
            warnings.push(format!(
                "non-manifold edge ({}, {}): shared by {} triangles",
                edge.0, edge.1, count
            ));
        }
    }
    warnings.sort();
    Ok(MeshLoadResult { mesh, warnings })
}

/// Writes a mesh in the text format accepted by [`load_spatial_mesh`].
pub fn save_spatial_mesh(mesh: &TriMesh, path: impl AsRef<Path>) -> Result<(), MeshError> {
    let mut out = String::new();
    let _ = writeln!(out, "{} {}", mesh.vertices.len(), mesh.triangles.len());
    for v in &mesh.vertices {
        let _ = writeln!(out, "{:.17e} {:.17e} {:.17e}", v.x, v.y, v.z);
    }
    for t in &mesh.triangles {
        let _ = writeln!(out, "{} {} {}", t[0], t[1], t[2]);
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Tensor product of a surface mesh and uniform time-steps on (0, T].
#[derive(Debug, Clone)]
pub struct SpaceTimeMesh {
    pub space: TriMesh,
    pub t_end: f64,
    pub n_timesteps: usize,
    pub h_t: f64,
}

pub fn build_tensor_mesh(space: TriMesh, t_end: f64, n_timesteps: usize) -> SpaceTimeMesh {
    assert!(t_end > 0.0, "t_end must be positive");
    assert!(n_timesteps >= 1, "need at least one time-step");
    let h_t = t_end / n_timesteps as f64;
    SpaceTimeMesh { space, t_end, n_timesteps, h_t }
}

impl SpaceTimeMesh {
    pub fn n_spatial(&self) -> usize {
        self.space.n_triangles()
    }

    pub fn n_dofs(&self) -> usize {
        self.n_timesteps * self.n_spatial()
    }

    /// Global index of the element `(k_t, k_x)`; all three 1-based:
    /// `(k_t - 1) * E_x + k_x`.
    pub fn global_index(&self, k_t: usize, k_x: usize) -> usize {
        debug_assert!((1..=self.n_timesteps).contains(&k_t));
        debug_assert!((1..=self.n_spatial()).contains(&k_x));
        (k_t - 1) * self.n_spatial() + k_x
    }

    /// Inverse of [`global_index`](Self::global_index); 1-based in and out.
    pub fn inverse_index(&self, idx: usize) -> (usize, usize) {
        debug_assert!((1..=self.n_dofs()).contains(&idx));
        let ex = self.n_spatial();
        ((idx - 1) / ex + 1, (idx - 1) % ex + 1)
    }

    /// 0-based row/column position of element `(k_t, k_x)` (1-based inputs)
    /// in vectors and matrices.
    pub fn dof0(&self, k_t: usize, k_x: usize) -> usize {
        self.global_index(k_t, k_x) - 1
    }

    pub fn time_node(&self, k: usize) -> f64 {
        k as f64 * self.h_t
    }

    /// The interval `(t_{k-1}, t_k]` of time-step `k` (1-based).
    pub fn time_step_bounds(&self, k_t: usize) -> (f64, f64) {
        debug_assert!((1..=self.n_timesteps).contains(&k_t));
        (self.time_node(k_t - 1), self.time_node(k_t))
    }

    pub fn element_centroid_time(&self, k_t: usize) -> f64 {
        let (a, b) = self.time_step_bounds(k_t);
        0.5 * (a + b)
    }
}

/// Contiguous slices of 1-based time-step indices covering `1..=E_t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeSlicePartition {
    /// Inclusive (start, end) 1-based step ranges, in ascending order.
    pub slices: Vec<(usize, usize)>,
}

impl TimeSlicePartition {
    pub fn n_slices(&self) -> usize {
        self.slices.len()
    }
}

/// Splits `1..=n_timesteps` into `n_slices` contiguous slices whose sizes
/// differ by at most one, larger slices first.
pub fn partition_time_slices(
    n_timesteps: usize,
    n_slices: usize,
) -> Result<TimeSlicePartition, MeshError> {
    if n_slices == 0 || n_slices > n_timesteps {
        return Err(MeshError::BadSliceCount { n_slices, n_timesteps });
    }
    let base = n_timesteps / n_slices;
    let rem = n_timesteps % n_slices;
    let mut slices = Vec::with_capacity(n_slices);
    let mut start = 1;
    for i in 0..n_slices {
        let len = base + usize::from(i < rem);
        slices.push((start, start + len - 1));
        start += len;
    }
    Ok(TimeSlicePartition { slices })
}

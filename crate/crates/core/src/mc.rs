//! Deformable marching cubes.
//!
//! Surface extraction applies the classic 256-case tables to the undeformed
//! lattice topology of channel 0, but places edge vertices by interpolating
//! between the *deformed* corner positions. The vertex placement is
//! differentiable w.r.t. the two corner TSDF values and deformations.

use std::collections::HashMap;

use crate::geom::{self, Vec3};
use crate::grid::{TsdfDefTensor, DEFORM_SCALE};
use crate::mesh::TriangleMesh;

mod tables {
    include!("mc_tables.rs");
}

/// Corner offsets of a cell, matching the table convention.
const CORNER: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// The two corners of each of the 12 cell edges.
const EDGE_CORNERS: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Interpolation freezes when the corner values are this close.
const DEGENERATE_EPS: f64 = 1e-12;

/// A lattice edge with a sign change, identified by its two grid corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SurfaceEdge {
    pub corner_a: [usize; 3],
    pub corner_b: [usize; 3],
}

/// Extraction result: the mesh plus, per output vertex, the lattice edge it
/// sits on (needed for gradient-based fitting).
pub struct DmcSurface {
    pub mesh: TriangleMesh,
    pub vertex_edges: Vec<SurfaceEdge>,
}

/// Interpolation parameter t = sA / (sA - sB), frozen to 0.5 on degenerate
/// edges.
pub fn edge_parameter(sa: f64, sb: f64) -> f64 {
    if (sa - sb).abs() < DEGENERATE_EPS {
        0.5
    } else {
        sa / (sa - sb)
    }
}

/// Vertex position on a surface edge of the tensor.
pub fn edge_vertex(tensor: &TsdfDefTensor, edge: &SurfaceEdge) -> Vec3 {
    let [ua, va, wa] = edge.corner_a;
    let [ub, vb, wb] = edge.corner_b;
    let sa = tensor.tsdf(ua, va, wa);
    let sb = tensor.tsdf(ub, vb, wb);
    let t = edge_parameter(sa, sb);
    let pa = tensor.deformed_position(ua, va, wa);
    let pb = tensor.deformed_position(ub, vb, wb);
    geom::add(geom::scale(pa, 1.0 - t), geom::scale(pb, t))
}

/// Gradients of the edge vertex position.
#[derive(Debug, Clone, Copy)]
pub struct VertexJacobian {
    /// d(vertex)/d(sA): a 3-vector (the position varies along the edge).
    pub d_sa: Vec3,
    /// d(vertex)/d(sB).
    pub d_sb: Vec3,
    /// d(vertex)/d(dA) = scale * I3 (per-component); likewise for dB.
    pub d_def_a: f64,
    pub d_def_b: f64,
    pub t: f64,
}

/// Analytic derivative of `(1-t) p'A + t p'B` with `t = sA/(sA-sB)`.
///
/// Degenerate edges (|sA - sB| < 1e-12) freeze t, so the value gradients are
/// zero there while the deformation gradients remain.
pub fn dmc_vertex_jacobian(tensor: &TsdfDefTensor, edge: &SurfaceEdge) -> VertexJacobian {
    let [ua, va, wa] = edge.corner_a;
    let [ub, vb, wb] = edge.corner_b;
    let sa = tensor.tsdf(ua, va, wa);
    let sb = tensor.tsdf(ub, vb, wb);
    let pa = tensor.deformed_position(ua, va, wa);
    let pb = tensor.deformed_position(ub, vb, wb);
    let dp = geom::sub(pb, pa);
    let bh = DEFORM_SCALE * tensor.grid.spacing();

    let diff = sa - sb;
    let (t, dt_dsa, dt_dsb) = if diff.abs() < DEGENERATE_EPS {
        (0.5, 0.0, 0.0)
    } else {
        (sa / diff, -sb / (diff * diff), sa / (diff * diff))
    };
    VertexJacobian {
        d_sa: geom::scale(dp, dt_dsa),
        d_sb: geom::scale(dp, dt_dsb),
        d_def_a: (1.0 - t) * bh,
        d_def_b: t * bh,
        t,
    }
}

/// Extracts the zero level set with vertex-to-edge provenance.
pub fn dmc_extract_surface(tensor: &TsdfDefTensor) -> DmcSurface {
    let k = tensor.grid.resolution;
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut vertex_edges: Vec<SurfaceEdge> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    // Edge vertices are shared across cells; key = the two corner ids.
    let mut edge_cache: HashMap<(u32, u32), u32> = HashMap::new();
    let point_id = |u: usize, v: usize, w: usize| -> u32 { ((u * k + v) * k + w) as u32 };

    for u in 0..k - 1 {
        for v in 0..k - 1 {
            for w in 0..k - 1 {
                let mut values = [0.0f64; 8];
                let mut cube_index = 0usize;
                for (i, off) in CORNER.iter().enumerate() {
                    values[i] = tensor.tsdf(u + off[0], v + off[1], w + off[2]);
                    if values[i] < 0.0 {
                        cube_index |= 1 << i;
                    }
                }
                let edge_mask = tables::EDGE_TABLE[cube_index];
                if edge_mask == 0 {
                    continue;
                }
                let mut edge_vertex_ids = [0u32; 12];
                for e in 0..12 {
                    if edge_mask & (1 << e) == 0 {
                        continue;
                    }
                    let (ca, cb) = EDGE_CORNERS[e];
                    let a = [u + CORNER[ca][0], v + CORNER[ca][1], w + CORNER[ca][2]];
                    let b = [u + CORNER[cb][0], v + CORNER[cb][1], w + CORNER[cb][2]];
                    let key = (point_id(a[0], a[1], a[2]), point_id(b[0], b[1], b[2]));
                    let key = (key.0.min(key.1), key.0.max(key.1));
                    let id = *edge_cache.entry(key).or_insert_with(|| {
                        let edge = SurfaceEdge {
                            corner_a: a,
                            corner_b: b,
                        };
                        vertices.push(edge_vertex(tensor, &edge));
                        vertex_edges.push(edge);
                        vertices.len() as u32 - 1
                    });
                    edge_vertex_ids[e] = id;
                }
                let tri = &tables::TRI_TABLE[cube_index];
                let mut i = 0;
                while tri[i] >= 0 {
                    // Table winding yields inward normals under the
                    // negative-inside convention; swap to point toward
                    // positive TSDF.
                    faces.push([
                        edge_vertex_ids[tri[i] as usize],
                        edge_vertex_ids[tri[i + 2] as usize],
                        edge_vertex_ids[tri[i + 1] as usize],
                    ]);
                    i += 3;
                }
            }
        }
    }

    DmcSurface {
        mesh: TriangleMesh { vertices, faces },
        vertex_edges,
    }
}

/// Extracts the mesh only (empty when the tensor has no sign change).
pub fn dmc_extract(tensor: &TsdfDefTensor) -> TriangleMesh {
    dmc_extract_surface(tensor).mesh
}

//! Analytic watertight test primitives and their exact signed distances.
//!
//! Used by the test suites and the demo pipeline: sphere, torus, box,
//! capsule, and unions of them. All primitives fit inside [-1,1]^3.

use crate::geom::{self, Vec3};
use crate::mesh::TriangleMesh;

/// UV-sphere centered at the origin.
pub fn sphere(radius: f64, rings: usize, segments: usize) -> TriangleMesh {
    sphere_at([0.0; 3], radius, rings, segments)
}

pub fn sphere_at(center: Vec3, radius: f64, rings: usize, segments: usize) -> TriangleMesh {
    assert!(rings >= 2 && segments >= 3);
    let mut vertices = vec![geom::add(center, [0.0, 0.0, radius])];
    for r in 1..rings {
        let phi = std::f64::consts::PI * r as f64 / rings as f64;
        for s in 0..segments {
            let theta = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            vertices.push(geom::add(
                center,
                [
                    radius * phi.sin() * theta.cos(),
                    radius * phi.sin() * theta.sin(),
                    radius * phi.cos(),
                ],
            ));
        }
    }
    vertices.push(geom::add(center, [0.0, 0.0, -radius]));
    let bottom = vertices.len() as u32 - 1;

    let ring = |r: usize, s: usize| -> u32 { 1 + ((r - 1) * segments + s % segments) as u32 };
    let mut faces = Vec::new();
    for s in 0..segments {
        faces.push([0, ring(1, s), ring(1, s + 1)]);
    }
    for r in 1..rings - 1 {
        for s in 0..segments {
            let a = ring(r, s);
            let b = ring(r, s + 1);
            let c = ring(r + 1, s + 1);
            let d = ring(r + 1, s);
            faces.push([a, d, c]);
            faces.push([a, c, b]);
        }
    }
    for s in 0..segments {
        faces.push([bottom, ring(rings - 1, s + 1), ring(rings - 1, s)]);
    }
    TriangleMesh { vertices, faces }
}

/// Torus around the z axis: major radius `big`, tube radius `small`.
pub fn torus(big: f64, small: f64, major_segs: usize, minor_segs: usize) -> TriangleMesh {
    assert!(major_segs >= 3 && minor_segs >= 3);
    let mut vertices = Vec::new();
    for i in 0..major_segs {
        let u = 2.0 * std::f64::consts::PI * i as f64 / major_segs as f64;
        for j in 0..minor_segs {
            let v = 2.0 * std::f64::consts::PI * j as f64 / minor_segs as f64;
            let r = big + small * v.cos();
            vertices.push([r * u.cos(), r * u.sin(), small * v.sin()]);
        }
    }
    let at = |i: usize, j: usize| -> u32 { ((i % major_segs) * minor_segs + j % minor_segs) as u32 };
    let mut faces = Vec::new();
    for i in 0..major_segs {
        for j in 0..minor_segs {
            let a = at(i, j);
            let b = at(i + 1, j);
            let c = at(i + 1, j + 1);
            let d = at(i, j + 1);
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    TriangleMesh { vertices, faces }
}

/// Axis-aligned box with the given half extents, subdivided `n x n` per face.
pub fn boxy(half: Vec3, n: usize) -> TriangleMesh {
    assert!(n >= 1);
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    // six faces; (axis, sign): grid over the two other axes
    for axis in 0..3 {
        for &sign in &[1.0f64, -1.0] {
            let (u_axis, v_axis) = ((axis + 1) % 3, (axis + 2) % 3);
            let base = vertices.len() as u32;
            for i in 0..=n {
                for j in 0..=n {
                    let mut p = [0.0; 3];
                    p[axis] = sign * half[axis];
                    p[u_axis] = (-1.0 + 2.0 * i as f64 / n as f64) * half[u_axis];
                    p[v_axis] = (-1.0 + 2.0 * j as f64 / n as f64) * half[v_axis];
                    vertices.push(p);
                }
            }
            let at = |i: usize, j: usize| base + (i * (n + 1) + j) as u32;
            for i in 0..n {
                for j in 0..n {
                    let (a, b, c, d) = (at(i, j), at(i + 1, j), at(i + 1, j + 1), at(i, j + 1));
                    if sign > 0.0 {
                        faces.push([a, b, c]);
                        faces.push([a, c, d]);
                    } else {
                        faces.push([a, c, b]);
                        faces.push([a, d, c]);
                    }
                }
            }
        }
    }
    weld(TriangleMesh { vertices, faces })
}

/// Capsule along the z axis: cylinder of half-length `hl` with hemispherical
/// caps of radius `r`.
pub fn capsule(r: f64, hl: f64, rings: usize, segments: usize) -> TriangleMesh {
    assert!(rings >= 2 && segments >= 3);
    // build as a stretched UV sphere: move upper hemisphere up, lower down
    let mut m = sphere(r, rings * 2, segments);
    for v in &mut m.vertices {
        v[2] += if v[2] >= 0.0 { hl } else { -hl };
    }
    weld(m)
}

/// Concatenates meshes into one (disjoint shells form the union of solids
/// under the ray-parity inside test).
pub fn union(meshes: &[&TriangleMesh]) -> TriangleMesh {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for m in meshes {
        let base = vertices.len() as u32;
        vertices.extend_from_slice(&m.vertices);
        faces.extend(m.faces.iter().map(|f| [f[0] + base, f[1] + base, f[2] + base]));
    }
    TriangleMesh { vertices, faces }
}

/// Merges exactly-coincident vertices (quantized to 1e-9) and drops the
/// resulting degenerate faces.
fn weld(mesh: TriangleMesh) -> TriangleMesh {
    use std::collections::HashMap;
    let mut map: HashMap<[i64; 3], u32> = HashMap::new();
    let mut remap = Vec::with_capacity(mesh.vertices.len());
    let mut vertices = Vec::new();
    for v in &mesh.vertices {
        let key = [
            (v[0] * 1e9).round() as i64,
            (v[1] * 1e9).round() as i64,
            (v[2] * 1e9).round() as i64,
        ];
        let id = *map.entry(key).or_insert_with(|| {
            vertices.push(*v);
            vertices.len() as u32 - 1
        });
        remap.push(id);
    }
    let faces = mesh
        .faces
        .iter()
        .map(|f| [remap[f[0] as usize], remap[f[1] as usize], remap[f[2] as usize]])
        .filter(|f| f[0] != f[1] && f[1] != f[2] && f[0] != f[2])
        .collect();
    TriangleMesh { vertices, faces }
}

/// Exact signed distances for the analytic solids, negative inside.
pub mod sdf {
    use super::*;

    pub fn sphere(p: Vec3, r: f64) -> f64 {
        geom::norm(p) - r
    }

    pub fn sphere_at(p: Vec3, c: Vec3, r: f64) -> f64 {
        geom::dist(p, c) - r
    }

    pub fn torus(p: Vec3, big: f64, small: f64) -> f64 {
        let q = [(p[0] * p[0] + p[1] * p[1]).sqrt() - big, p[2]];
        (q[0] * q[0] + q[1] * q[1]).sqrt() - small
    }

    pub fn boxy(p: Vec3, half: Vec3) -> f64 {
        let q = [
            p[0].abs() - half[0],
            p[1].abs() - half[1],
            p[2].abs() - half[2],
        ];
        let outside = geom::norm([q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)]);
        let inside = q[0].max(q[1]).max(q[2]).min(0.0);
        outside + inside
    }

    pub fn capsule(p: Vec3, r: f64, hl: f64) -> f64 {
        let z = p[2].clamp(-hl, hl);
        geom::dist(p, [0.0, 0.0, z]) - r
    }

    pub fn union(a: f64, b: f64) -> f64 {
        a.min(b)
    }
}

/// The eight-primitive demo set used by the end-to-end pipeline tests:
/// sphere, torus, box, capsule, and four unions.
pub fn demo_set(detail: usize) -> Vec<(String, TriangleMesh)> {
    let d = detail.max(8);
    let sph = sphere(0.6, d, d * 2);
    let tor = torus(0.55, 0.2, d * 2, d);
    let bx = boxy([0.55, 0.45, 0.35], d);
    let cap = capsule(0.3, 0.4, d, d * 2);

    let s_small = sphere_at([0.45, 0.0, 0.0], 0.3, d, d * 2);
    let s_small2 = sphere_at([-0.45, 0.0, 0.0], 0.3, d, d * 2);
    let tor_flat = torus(0.5, 0.15, d * 2, d);

    let mut cap_x = capsule(0.25, 0.45, d, d * 2);
    for v in &mut cap_x.vertices {
        *v = [v[2], v[1], v[0]]; // rotate onto the x axis
    }

    // union components are kept disjoint: `union` concatenates, so
    // overlapping parts would leave buried faces that surface sampling
    // (and therefore every chamfer-based check) still sees
    vec![
        ("sphere".into(), sph.clone()),
        ("torus".into(), tor.clone()),
        ("box".into(), bx),
        ("capsule".into(), cap),
        ("union_spheres".into(), union(&[&s_small, &s_small2])),
        (
            "union_three_spheres".into(),
            union(&[
                &sphere_at([0.45, 0.0, 0.0], 0.28, d, d * 2),
                &sphere_at([-0.45, 0.0, 0.0], 0.28, d, d * 2),
                &sphere_at([0.0, 0.5, 0.0], 0.28, d, d * 2),
            ]),
        ),
        ("union_torus_sphere".into(), union(&[&tor_flat, &sphere_at([0.0, 0.0, 0.45], 0.25, d, d * 2)])),
        (
            "union_capsule_sphere".into(),
            union(&[&cap_x, &sphere_at([0.0, 0.0, 0.62], 0.28, d, d * 2)]),
        ),
    ]
}

//! Triangle mesh representation, Wavefront OBJ I/O, normalization and
//! area-weighted surface sampling.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::geom::{self, Vec3};
use crate::Result;

/// Faces below this (doubled) area are dropped at load time; they poison
/// normals and sampling.
const MIN_AREA2: f64 = 1e-14;

/// Explicit surface: vertex positions and triangle index triples.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

/// Points sampled on a surface with the face normal of the source triangle.
#[derive(Debug, Clone)]
pub struct SurfaceSamples {
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
}

impl SurfaceSamples {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len() as u32;
        for f in &faces {
            for &i in f {
                if i >= n {
                    return Err(Error::Structure(format!(
                        "face index {i} out of range (vertex count {n})"
                    )));
                }
            }
        }
        Ok(TriangleMesh { vertices, faces })
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn triangle(&self, f: usize) -> (Vec3, Vec3, Vec3) {
        let [i, j, k] = self.faces[f];
        (
            self.vertices[i as usize],
            self.vertices[j as usize],
            self.vertices[k as usize],
        )
    }

    pub fn face_normal(&self, f: usize) -> Vec3 {
        let (a, b, c) = self.triangle(f);
        geom::normalize(geom::cross(geom::sub(b, a), geom::sub(c, a)))
    }

    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let mut it = self.vertices.iter();
        let first = *it.next()?;
        let mut lo = first;
        let mut hi = first;
        for &v in it {
            lo = geom::min_comp(lo, v);
            hi = geom::max_comp(hi, v);
        }
        Some((lo, hi))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len())
            .map(|f| {
                let (a, b, c) = self.triangle(f);
                0.5 * geom::triangle_area2(a, b, c)
            })
            .sum()
    }

    /// Drops zero-area faces in place, preserving face order.
    fn drop_degenerate_faces(&mut self) {
        let verts = &self.vertices;
        self.faces.retain(|&[i, j, k]| {
            let area2 = geom::triangle_area2(
                verts[i as usize],
                verts[j as usize],
                verts[k as usize],
            );
            area2 > MIN_AREA2
        });
    }
}

/// Parses a Wavefront OBJ file. Only `v` and `f` records are interpreted;
/// polygons are fan-triangulated, 1-based and negative indices resolved.
pub fn load_obj(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut vertices: Vec<Vec3> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let mut coords = [0.0f64; 3];
                for c in coords.iter_mut() {
                    let t = tok.next().ok_or_else(|| Error::Parse {
                        path: path.into(),
                        line: lineno,
                        msg: "vertex record with fewer than 3 coordinates".into(),
                    })?;
                    *c = t.parse().map_err(|_| Error::Parse {
                        path: path.into(),
                        line: lineno,
                        msg: format!("invalid coordinate {t:?}"),
                    })?;
                }
                vertices.push(coords);
            }
            Some("f") => {
                let mut idx: Vec<u32> = Vec::new();
                for t in tok {
                    // "i", "i/j", "i/j/k", "i//k" — only the vertex index matters
                    let v = t.split('/').next().unwrap_or("");
                    let raw: i64 = v.parse().map_err(|_| Error::Parse {
                        path: path.into(),
                        line: lineno,
                        msg: format!("invalid face index {t:?}"),
                    })?;
                    let resolved = if raw > 0 {
                        raw - 1
                    } else if raw < 0 {
                        vertices.len() as i64 + raw
                    } else {
                        return Err(Error::Parse {
                            path: path.into(),
                            line: lineno,
                            msg: "face index 0 is not valid in OBJ".into(),
                        });
                    };
                    if resolved < 0 || resolved >= vertices.len() as i64 {
                        return Err(Error::Structure(format!(
                            "{}:{lineno}: face index {raw} out of range (vertex count {})",
                            path.display(),
                            vertices.len()
                        )));
                    }
                    idx.push(resolved as u32);
                }
                if idx.len() < 3 {
                    return Err(Error::Parse {
                        path: path.into(),
                        line: lineno,
                        msg: format!("face with {} vertices", idx.len()),
                    });
                }
                for t in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[t], idx[t + 1]]);
                }
            }
            _ => {} // comments, normals, texcoords, groups, ...
        }
    }

    let mut mesh = TriangleMesh { vertices, faces };
    mesh.drop_degenerate_faces();
    Ok(mesh)
}

/// Writes a mesh as ASCII OBJ (`%.9g` coordinates, LF line endings).
pub fn save_obj(mesh: &TriangleMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut res: std::io::Result<()> = (|| {
        for v in &mesh.vertices {
            writeln!(w, "v {} {} {}", fmt_g9(v[0]), fmt_g9(v[1]), fmt_g9(v[2]))?;
        }
        for f in &mesh.faces {
            writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
        Ok(())
    })();
    if res.is_ok() {
        res = w.flush();
    }
    res.map_err(|e| Error::io(path, e))
}

/// `%.9g`-style formatting: 9 significant digits, trailing zeros trimmed.
fn fmt_g9(x: f64) -> String {
    let sci = format!("{:.8e}", x);
    let epos = sci.find('e').unwrap();
    let exp: i32 = sci[epos + 1..].parse().unwrap();
    let mut s = if (-4..9).contains(&exp) {
        format!("{:.*}", (8 - exp).max(0) as usize, x)
    } else {
        let mantissa = sci[..epos].trim_end_matches('0').trim_end_matches('.');
        return format!("{mantissa}e{exp:+03}");
    };
    if s.contains('.') {
        s = s.trim_end_matches('0').trim_end_matches('.').to_string();
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

/// Uniformly scales and translates the mesh so the longest bounding-box side
/// spans `2 * (1 - margin)` centered at the origin.
pub fn normalize_unit_cube(mesh: &TriangleMesh, margin: f64) -> Result<TriangleMesh> {
    if !(0.0..1.0).contains(&margin) {
        return Err(Error::InvalidArgument(format!(
            "margin {margin} outside [0,1)"
        )));
    }
    let (lo, hi) = mesh
        .bounds()
        .ok_or_else(|| Error::InvalidArgument("cannot normalize an empty mesh".into()))?;
    let extent = geom::sub(hi, lo);
    let longest = extent[0].max(extent[1]).max(extent[2]);
    if longest <= 0.0 {
        return Err(Error::InvalidArgument(
            "degenerate mesh: bounding box has zero extent".into(),
        ));
    }
    let center = geom::scale(geom::add(lo, hi), 0.5);
    let s = 2.0 * (1.0 - margin) / longest;
    let vertices = mesh
        .vertices
        .iter()
        .map(|&v| geom::scale(geom::sub(v, center), s))
        .collect();
    Ok(TriangleMesh {
        vertices,
        faces: mesh.faces.clone(),
    })
}

/// Samples `count` points on the surface, triangles chosen with probability
/// proportional to area, uniform barycentric placement, normal taken from the
/// source triangle. Deterministic for a fixed seed.
pub fn sample_surface(mesh: &TriangleMesh, count: usize, seed: u64) -> Result<SurfaceSamples> {
    if mesh.faces.is_empty() {
        return Err(Error::InvalidArgument("mesh has no faces".into()));
    }
    // Cumulative area table for the inverse-CDF pick.
    let mut cum = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0f64;
    for f in 0..mesh.faces.len() {
        let (a, b, c) = mesh.triangle(f);
        total += 0.5 * geom::triangle_area2(a, b, c);
        cum.push(total);
    }
    if total <= 0.0 {
        return Err(Error::InvalidArgument("mesh has zero total area".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(count);
    let mut normals = Vec::with_capacity(count);
    for _ in 0..count {
        let r = rng.random::<f64>() * total;
        let f = cum.partition_point(|&x| x < r).min(mesh.faces.len() - 1);
        let (a, b, c) = mesh.triangle(f);
        // Uniform barycentric via the square-root trick.
        let su = rng.random::<f64>().sqrt();
        let v = rng.random::<f64>();
        let w0 = 1.0 - su;
        let w1 = su * (1.0 - v);
        let w2 = su * v;
        points.push(geom::add(
            geom::scale(a, w0),
            geom::add(geom::scale(b, w1), geom::scale(c, w2)),
        ));
        normals.push(mesh.face_normal(f));
    }
    Ok(SurfaceSamples { points, normals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write_obj(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn load_minimal() {
        let d = tempdir().unwrap();
        let p = write_obj(d.path(), "t.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n");
        let m = load_obj(&p).unwrap();
        assert_eq!(m.vertices.len(), 3);
        assert_eq!(m.faces, vec![[0, 1, 2]]);
    }

    #[test]
    fn load_quad_fan_triangulates() {
        let d = tempdir().unwrap();
        let p = write_obj(
            d.path(),
            "q.obj",
            "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n",
        );
        let m = load_obj(&p).unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn load_out_of_range_index() {
        let d = tempdir().unwrap();
        let p = write_obj(d.path(), "b.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 5\n");
        assert!(matches!(load_obj(&p), Err(Error::Structure(_))));
    }

    #[test]
    fn load_malformed_names_line() {
        let d = tempdir().unwrap();
        let p = write_obj(d.path(), "m.obj", "v 0 0 0\nv 1 x 0\n");
        match load_obj(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn negative_indices_and_slash_forms() {
        let d = tempdir().unwrap();
        let p = write_obj(
            d.path(),
            "n.obj",
            "v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3/1/1 -2//2 -1\n",
        );
        let m = load_obj(&p).unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2]]);
    }

    #[test]
    fn zero_area_faces_dropped() {
        let d = tempdir().unwrap();
        let p = write_obj(
            d.path(),
            "z.obj",
            "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 1 2\nf 1 2 3\n",
        );
        let m = load_obj(&p).unwrap();
        assert_eq!(m.faces.len(), 1);
    }

    #[test]
    fn save_empty_mesh() {
        let d = tempdir().unwrap();
        let p = d.path().join("e.obj");
        let m = TriangleMesh {
            vertices: vec![],
            faces: vec![],
        };
        save_obj(&m, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "");
    }

    #[test]
    fn save_load_round_trip() {
        let d = tempdir().unwrap();
        let p = d.path().join("r.obj");
        let m = TriangleMesh {
            vertices: vec![
                [0.123456789, 0.0, 0.0],
                [1.0, 2.5e-7, 0.0],
                [-0.333333333, 1.0, 7.0],
            ],
            faces: vec![[0, 1, 2]],
        };
        save_obj(&m, &p).unwrap();
        let back = load_obj(&p).unwrap();
        assert_eq!(back.faces, m.faces);
        for (a, b) in back.vertices.iter().zip(&m.vertices) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 1e-8 * b[c].abs().max(1.0));
            }
        }
    }

    #[test]
    fn normalize_cube() {
        let m = TriangleMesh {
            vertices: vec![[0.0; 3], [10.0, 0.0, 0.0], [10.0, 10.0, 10.0], [0.0, 10.0, 0.0]],
            faces: vec![[0, 1, 2]],
        };
        let n = normalize_unit_cube(&m, 0.0).unwrap();
        let (lo, hi) = n.bounds().unwrap();
        assert!(geom::dist(lo, [-1.0; 3]) < 1e-12);
        assert!(geom::dist(hi, [1.0; 3]) < 1e-12);
    }

    #[test]
    fn normalize_preserves_aspect() {
        // box 2x1x1 -> longest side spans [-1,1], short sides [-0.5,0.5]
        let m = TriangleMesh {
            vertices: vec![[0.0; 3], [2.0, 1.0, 1.0], [2.0, 0.0, 0.0]],
            faces: vec![[0, 1, 2]],
        };
        let n = normalize_unit_cube(&m, 0.0).unwrap();
        let (lo, hi) = n.bounds().unwrap();
        assert!((lo[0] + 1.0).abs() < 1e-12 && (hi[0] - 1.0).abs() < 1e-12);
        assert!((lo[1] + 0.5).abs() < 1e-12 && (hi[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn normalize_idempotent() {
        let m = TriangleMesh {
            vertices: vec![[0.1, 0.4, -0.2], [2.0, 1.0, 1.0], [1.0, -3.0, 0.5]],
            faces: vec![[0, 1, 2]],
        };
        let once = normalize_unit_cube(&m, 0.1).unwrap();
        let twice = normalize_unit_cube(&once, 0.1).unwrap();
        for (a, b) in once.vertices.iter().zip(&twice.vertices) {
            assert!(geom::dist(*a, *b) < 1e-12);
        }
    }

    #[test]
    fn normalize_degenerate_point() {
        let m = TriangleMesh {
            vertices: vec![[1.0; 3], [1.0; 3]],
            faces: vec![],
        };
        assert!(normalize_unit_cube(&m, 0.0).is_err());
    }

    #[test]
    fn sample_single_triangle_normals() {
        let m = TriangleMesh {
            vertices: vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            faces: vec![[0, 1, 2]],
        };
        let s = sample_surface(&m, 100, 7).unwrap();
        for n in &s.normals {
            assert!(geom::dist(*n, [0.0, 0.0, 1.0]) < 1e-12);
        }
    }

    #[test]
    fn sample_deterministic() {
        let m = TriangleMesh {
            vertices: vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            faces: vec![[0, 1, 2]],
        };
        let s1 = sample_surface(&m, 50, 42).unwrap();
        let s2 = sample_surface(&m, 50, 42).unwrap();
        assert_eq!(s1.points, s2.points);
    }

    #[test]
    fn sample_area_proportional() {
        // unit square split into two equal triangles
        let m = TriangleMesh {
            vertices: vec![
                [0.0; 3],
                [1.0, 0.0, 0.0],
                [1.0, 1.0, 0.0],
                [0.0, 1.0, 0.0],
            ],
            faces: vec![[0, 1, 2], [0, 2, 3]],
        };
        let n = 100_000usize;
        let s = sample_surface(&m, n, 3).unwrap();
        // count points with x > y (first triangle)
        let c1 = s.points.iter().filter(|p| p[0] > p[1]).count() as f64;
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((c1 - n as f64 * 0.5).abs() < 3.0 * sigma);
    }

    #[test]
    fn sample_mean_near_area_weighted_centroid() {
        let m = TriangleMesh {
            vertices: vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            faces: vec![[0, 1, 2]],
        };
        let n = 100_000usize;
        let s = sample_surface(&m, n, 11).unwrap();
        let mean = s
            .points
            .iter()
            .fold([0.0; 3], |acc, p| geom::add(acc, *p));
        let mean = geom::scale(mean, 1.0 / n as f64);
        // centroid of the triangle is (1/3, 1/3, 0); component std dev ~ 0.24
        let sigma = 0.24 / (n as f64).sqrt();
        assert!((mean[0] - 1.0 / 3.0).abs() < 3.0 * sigma + 1e-9);
        assert!((mean[1] - 1.0 / 3.0).abs() < 3.0 * sigma + 1e-9);
    }

    #[test]
    fn sample_zero_area_error() {
        let m = TriangleMesh {
            vertices: vec![[0.0; 3], [0.0; 3], [0.0; 3]],
            faces: vec![[0, 1, 2]],
        };
        assert!(sample_surface(&m, 10, 0).is_err());
    }
}

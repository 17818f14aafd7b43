//! Distortion metrics between sampled surfaces: chamfer distance, normal
//! consistency, F-Score at a distance threshold, and rate-distortion CSV
//! emission.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Error;
use crate::geom;
use crate::kdtree::KdTree;
use crate::mesh::{sample_surface, SurfaceSamples, TriangleMesh};
use crate::Result;

pub const DEFAULT_N_EVAL: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub cd: f64,
    pub nc: f64,
    pub f1_005: f64,
    pub f1_01: f64,
}

#[derive(Debug, Clone)]
pub struct RdPoint {
    pub label: String,
    pub ratio: f64,
    pub distortion: MetricsRecord,
}

fn check_nonempty(a: &SurfaceSamples, b: &SurfaceSamples) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("metric over empty sample set".into()));
    }
    Ok(())
}

/// Symmetric chamfer distance: mean nearest-neighbor distance in each
/// direction, each normalized by twice its own sample count.
pub fn chamfer_distance(a: &SurfaceSamples, b: &SurfaceSamples) -> Result<f64> {
    check_nonempty(a, b)?;
    let ta = KdTree::build(&a.points);
    let tb = KdTree::build(&b.points);
    let mut sum = 0.0f64;
    for &p in &a.points {
        sum += tb.nearest(p).1.sqrt() / (2.0 * a.points.len() as f64);
    }
    for &p in &b.points {
        sum += ta.nearest(p).1.sqrt() / (2.0 * b.points.len() as f64);
    }
    Ok(sum)
}

/// Symmetric mean absolute cosine between each point's normal and its
/// nearest neighbor's normal in the other set.
pub fn normal_consistency(a: &SurfaceSamples, b: &SurfaceSamples) -> Result<f64> {
    check_nonempty(a, b)?;
    let ta = KdTree::build(&a.points);
    let tb = KdTree::build(&b.points);
    let mut sum = 0.0f64;
    for (i, &p) in a.points.iter().enumerate() {
        let (j, _) = tb.nearest(p);
        sum += geom::dot(a.normals[i], b.normals[j]).abs() / (2.0 * a.points.len() as f64);
    }
    for (j, &p) in b.points.iter().enumerate() {
        let (i, _) = ta.nearest(p);
        sum += geom::dot(b.normals[j], a.normals[i]).abs() / (2.0 * b.points.len() as f64);
    }
    Ok(sum)
}

/// F-Score at threshold `eps`: harmonic mean of the fractions of each set
/// whose nearest neighbor in the other set lies strictly within `eps`.
pub fn f_score(a: &SurfaceSamples, b: &SurfaceSamples, eps: f64) -> Result<f64> {
    check_nonempty(a, b)?;
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "threshold must be positive, got {eps}"
        )));
    }
    let ta = KdTree::build(&a.points);
    let tb = KdTree::build(&b.points);
    let e2 = eps * eps;
    let near = |points: &[geom::Vec3], tree: &KdTree| -> f64 {
        let hits = points.iter().filter(|&&p| tree.nearest(p).1 < e2).count();
        hits as f64 / points.len() as f64
    };
    let p = near(&a.points, &tb);
    let r = near(&b.points, &ta);
    if p == 0.0 && r == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * p * r / (p + r))
}

/// Samples both meshes and computes all four metrics.
pub fn evaluate_pair(
    recon: &TriangleMesh,
    gt: &TriangleMesh,
    n_eval: usize,
    seed: u64,
) -> Result<MetricsRecord> {
    let a = sample_surface(recon, n_eval, seed)?;
    let b = sample_surface(gt, n_eval, seed.wrapping_add(1))?;
    Ok(MetricsRecord {
        cd: chamfer_distance(&a, &b)?,
        nc: normal_consistency(&a, &b)?,
        f1_005: f_score(&a, &b, 0.005)?,
        f1_01: f_score(&a, &b, 0.01)?,
    })
}

fn fmt_f(x: f64) -> String {
    format!("{x:.9}")
}

/// Writes RD points as CSV, sorted by ascending ratio.
pub fn emit_rd(points: &[RdPoint], path: impl AsRef<Path>) -> Result<()> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("no rate-distortion points".into()));
    }
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut sorted: Vec<&RdPoint> = points.iter().collect();
    sorted.sort_by(|x, y| x.ratio.total_cmp(&y.ratio));
    (|| -> std::io::Result<()> {
        writeln!(w, "label,ratio,cd,nc,f1_005,f1_01")?;
        for p in sorted {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                p.label,
                fmt_f(p.ratio),
                fmt_f(p.distortion.cd),
                fmt_f(p.distortion.nc),
                fmt_f(p.distortion.f1_005),
                fmt_f(p.distortion.f1_01)
            )?;
        }
        w.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_samples(rng: &mut ChaCha8Rng, n: usize) -> SurfaceSamples {
        let points: Vec<geom::Vec3> = (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let normals: Vec<geom::Vec3> = (0..n)
            .map(|_| {
                geom::normalize([
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ])
            })
            .collect();
        SurfaceSamples { points, normals }
    }

    fn brute_cd(a: &SurfaceSamples, b: &SurfaceSamples) -> f64 {
        let nn = |p: geom::Vec3, pts: &[geom::Vec3]| {
            pts.iter().map(|&q| geom::dist(p, q)).fold(f64::INFINITY, f64::min)
        };
        a.points.iter().map(|&p| nn(p, &b.points)).sum::<f64>() / (2.0 * a.points.len() as f64)
            + b.points.iter().map(|&p| nn(p, &a.points)).sum::<f64>()
                / (2.0 * b.points.len() as f64)
    }

    #[test]
    fn identical_sets_have_zero_cd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_samples(&mut rng, 50);
        assert!(chamfer_distance(&a, &a).unwrap() < 1e-15);
    }

    #[test]
    fn single_pair_cd_is_distance() {
        let a = SurfaceSamples {
            points: vec![[0.0, 0.0, 0.0]],
            normals: vec![[0.0, 0.0, 1.0]],
        };
        let b = SurfaceSamples {
            points: vec![[1.0, 0.0, 0.0]],
            normals: vec![[0.0, 0.0, 1.0]],
        };
        assert!((chamfer_distance(&a, &b).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cd_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_samples(&mut rng, 500);
        let b = random_samples(&mut rng, 313);
        let fast = chamfer_distance(&a, &b).unwrap();
        assert!((fast - brute_cd(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn cd_is_symmetric_for_equal_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_samples(&mut rng, 200);
        let b = random_samples(&mut rng, 200);
        let ab = chamfer_distance(&a, &b).unwrap();
        let ba = chamfer_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn translation_bounds_cd_growth() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_samples(&mut rng, 150);
        let b = random_samples(&mut rng, 150);
        let base = chamfer_distance(&a, &b).unwrap();
        let t = [0.05, -0.03, 0.02];
        let shifted = SurfaceSamples {
            points: b.points.iter().map(|&p| geom::add(p, t)).collect(),
            normals: b.normals.clone(),
        };
        let moved = chamfer_distance(&a, &shifted).unwrap();
        assert!(moved <= base + geom::norm(t) + 1e-12);
    }

    #[test]
    fn nc_self_is_one_and_flip_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_samples(&mut rng, 100);
        assert!((normal_consistency(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let flipped = SurfaceSamples {
            points: a.points.clone(),
            normals: a.normals.iter().map(|&n| geom::scale(n, -1.0)).collect(),
        };
        assert!((normal_consistency(&a, &flipped).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nc_orthogonal_normals_give_zero() {
        let pts: Vec<geom::Vec3> = (0..20).map(|i| [i as f64 * 0.1, 0.0, 0.0]).collect();
        let a = SurfaceSamples {
            points: pts.clone(),
            normals: vec![[0.0, 0.0, 1.0]; 20],
        };
        let b = SurfaceSamples {
            points: pts,
            normals: vec![[1.0, 0.0, 0.0]; 20],
        };
        assert!(normal_consistency(&a, &b).unwrap().abs() < 1e-15);
    }

    #[test]
    fn nc_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_samples(&mut rng, 300);
        let b = random_samples(&mut rng, 250);
        let fast = normal_consistency(&a, &b).unwrap();
        let nn = |p: geom::Vec3, pts: &[geom::Vec3]| {
            let mut bi = 0;
            let mut bd = f64::INFINITY;
            for (i, &q) in pts.iter().enumerate() {
                let d = geom::dist2(p, q);
                if d < bd {
                    bd = d;
                    bi = i;
                }
            }
            bi
        };
        let mut slow = 0.0;
        for (i, &p) in a.points.iter().enumerate() {
            slow += geom::dot(a.normals[i], b.normals[nn(p, &b.points)]).abs()
                / (2.0 * a.points.len() as f64);
        }
        for (j, &p) in b.points.iter().enumerate() {
            slow += geom::dot(b.normals[j], a.normals[nn(p, &a.points)]).abs()
                / (2.0 * b.points.len() as f64);
        }
        assert!((fast - slow).abs() < 1e-9);
    }

    #[test]
    fn f_score_saturated_and_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_samples(&mut rng, 50);
        assert_eq!(f_score(&a, &a, 0.001).unwrap(), 1.0);
        let far = SurfaceSamples {
            points: a.points.iter().map(|&p| geom::add(p, [10.0, 0.0, 0.0])).collect(),
            normals: a.normals.clone(),
        };
        assert_eq!(f_score(&a, &far, 0.01).unwrap(), 0.0);
        assert!(f_score(&a, &far, -0.1).is_err());
    }

    #[test]
    fn f_score_half_overlap() {
        // two clusters: half of each set coincides, half is far away
        let mut near = Vec::new();
        let mut a_pts = Vec::new();
        let mut b_pts = Vec::new();
        for i in 0..10 {
            near.push([i as f64, 0.0, 0.0]);
        }
        a_pts.extend(near.iter().copied());
        b_pts.extend(near.iter().copied());
        for i in 0..10 {
            a_pts.push([i as f64, 100.0, 0.0]);
            b_pts.push([i as f64, -100.0, 0.0]);
        }
        let mk = |points: Vec<geom::Vec3>| {
            let n = points.len();
            SurfaceSamples {
                points,
                normals: vec![[0.0, 0.0, 1.0]; n],
            }
        };
        let f = f_score(&mk(a_pts), &mk(b_pts), 0.5).unwrap();
        assert!((f - 0.5).abs() < 1e-12);
    }

    #[test]
    fn f_score_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_samples(&mut rng, 200);
        let b = random_samples(&mut rng, 200);
        let mut prev = 0.0;
        for eps in [0.01, 0.05, 0.1, 0.3, 0.6, 1.0, 2.0] {
            let f = f_score(&a, &b, eps).unwrap();
            assert!(f >= prev - 1e-15);
            prev = f;
        }
    }

    #[test]
    fn evaluate_pair_self_and_offset() {
        let m = shapes::sphere(0.5, 32, 64);
        let n = 50_000;
        let r = evaluate_pair(&m, &m, n, 9).unwrap();
        // self-distance floor is the mean nearest-sample spacing,
        // roughly sqrt(area / n)
        let spacing = (m.total_area() / n as f64).sqrt();
        assert!(r.cd < 2.0 * spacing, "self cd {} vs spacing {spacing}", r.cd);
        assert!(r.nc > 0.99);
        assert!(r.f1_01 > 0.9);

        let shifted = TriangleMesh::new(
            m.vertices.iter().map(|&v| geom::add(v, [0.02, 0.0, 0.0])).collect(),
            m.faces.clone(),
        )
        .unwrap();
        // mean |cos| over the sphere puts the true offset distance near
        // 0.01, with the sampling floor on top
        let r2 = evaluate_pair(&m, &shifted, n, 9).unwrap();
        assert!(r2.cd > 0.005 && r2.cd < 0.02, "offset cd {}", r2.cd);
        assert!(r2.f1_005 < 0.9);
        assert!(r2.cd > r.cd);
    }

    #[test]
    fn evaluate_pair_deterministic() {
        let m = shapes::torus(0.5, 0.2, 24, 12);
        let a = evaluate_pair(&m, &m, 5000, 3).unwrap();
        let b = evaluate_pair(&m, &m, 5000, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rd_csv_round_trip_sorted() {
        let mk = |label: &str, ratio: f64| RdPoint {
            label: label.into(),
            ratio,
            distortion: MetricsRecord {
                cd: 0.001234567891,
                nc: 0.987654321,
                f1_005: 0.5,
                f1_01: 0.75,
            },
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rd.csv");
        emit_rd(&[mk("b", 30.0), mk("a", 10.0)], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "label,ratio,cd,nc,f1_005,f1_01");
        assert!(lines[1].starts_with("a,10.0"));
        assert!(lines[2].starts_with("b,30.0"));
        let fields: Vec<f64> = lines[1]
            .split(',')
            .skip(1)
            .map(|s| s.parse().unwrap())
            .collect();
        assert!((fields[1] - 0.001234567891).abs() < 1e-9);
        assert!((fields[2] - 0.987654321).abs() < 1e-9);
        assert!(emit_rd(&[], dir.path().join("e.csv")).is_err());
    }
}

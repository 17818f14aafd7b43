//! Orthographic depth/silhouette rasterization and the rendering-based
//! reconstruction error (forward-only; used as a monitoring metric).

use crate::error::Error;
use crate::geom::{self, Vec3};
use crate::mesh::TriangleMesh;
use crate::Result;

/// Orthographic camera: `direction` points from the camera toward the scene,
/// the image window is [-1,1]^2 in the (right, up) plane.
#[derive(Debug, Clone, Copy)]
pub struct ViewSpec {
    pub direction: Vec3,
    pub up: Vec3,
    pub height: usize,
    pub width: usize,
}

impl ViewSpec {
    pub fn new(direction: Vec3, up: Vec3, height: usize, width: usize) -> Result<Self> {
        let d = geom::normalize(direction);
        let u = geom::normalize(up);
        if geom::dot(d, u).abs() > 1e-9 {
            return Err(Error::InvalidArgument(
                "view direction and up vector must be orthogonal".into(),
            ));
        }
        Ok(ViewSpec {
            direction: d,
            up: u,
            height,
            width,
        })
    }

    /// Orthographic azimuth view at elevation 0, z up.
    pub fn azimuth(degrees: f64, size: usize) -> Self {
        let rad = degrees.to_radians();
        // direction points inward toward the origin
        ViewSpec {
            direction: [-rad.cos(), -rad.sin(), 0.0],
            up: [0.0, 0.0, 1.0],
            height: size,
            width: size,
        }
    }

    fn right(&self) -> Vec3 {
        geom::cross(self.direction, self.up)
    }
}

/// Default monitoring views: 4 azimuths at 0/90/180/270 degrees, 256x256.
pub fn default_views() -> Vec<ViewSpec> {
    [0.0, 90.0, 180.0, 270.0]
        .iter()
        .map(|&a| ViewSpec::azimuth(a, 256))
        .collect()
}

/// Depth (camera-space, background 0) and silhouette images.
#[derive(Debug, Clone)]
pub struct RenderPair {
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f64>,
    pub silhouette: Vec<bool>,
}

/// Z-buffer rasterization of the mesh under the view. Depth is measured from
/// a camera plane 2 units in front of the origin, so every visible point of
/// a [-1,1]^3 mesh has positive depth while background pixels stay 0.
pub fn render(mesh: &TriangleMesh, view: &ViewSpec) -> RenderPair {
    let (h, w) = (view.height, view.width);
    let mut depth = vec![f64::INFINITY; h * w];
    let right = view.right();

    for f in 0..mesh.faces.len() {
        let (a, b, c) = mesh.triangle(f);
        let pa = project(a, view, right);
        let pb = project(b, view, right);
        let pc = project(c, view, right);

        // pixel bounding box; pixel centers at (-1 + 2(j+0.5)/W, ...)
        let min_x = pa[0].min(pb[0]).min(pc[0]);
        let max_x = pa[0].max(pb[0]).max(pc[0]);
        let min_y = pa[1].min(pb[1]).min(pc[1]);
        let max_y = pa[1].max(pb[1]).max(pc[1]);
        let j0 = (((min_x + 1.0) * 0.5 * w as f64) - 0.5).floor().max(0.0) as usize;
        let j1 = (((max_x + 1.0) * 0.5 * w as f64) + 0.5).ceil().min(w as f64) as usize;
        let i0 = (((min_y + 1.0) * 0.5 * h as f64) - 0.5).floor().max(0.0) as usize;
        let i1 = (((max_y + 1.0) * 0.5 * h as f64) + 0.5).ceil().min(h as f64) as usize;

        let area = edge_fn(pa, pb, pc);
        if area.abs() < 1e-300 {
            continue;
        }
        let inv_area = 1.0 / area;
        for i in i0..i1 {
            let y = -1.0 + 2.0 * (i as f64 + 0.5) / h as f64;
            for j in j0..j1 {
                let x = -1.0 + 2.0 * (j as f64 + 0.5) / w as f64;
                let p = [x, y, 0.0];
                let w0 = edge_fn(pb, pc, p) * inv_area;
                let w1 = edge_fn(pc, pa, p) * inv_area;
                let w2 = edge_fn(pa, pb, p) * inv_area;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let z = w0 * pa[2] + w1 * pb[2] + w2 * pc[2];
                let px = &mut depth[i * w + j];
                if z < *px {
                    *px = z;
                }
            }
        }
    }

    let silhouette: Vec<bool> = depth.iter().map(|&d| d.is_finite()).collect();
    for d in &mut depth {
        if !d.is_finite() {
            *d = 0.0;
        }
    }
    RenderPair {
        height: h,
        width: w,
        depth,
        silhouette,
    }
}

/// Projects to (image x, image y, camera depth).
fn project(p: Vec3, view: &ViewSpec, right: Vec3) -> Vec3 {
    [
        geom::dot(p, right),
        geom::dot(p, view.up),
        geom::dot(p, view.direction) + 2.0,
    ]
}

/// Signed doubled area of triangle (a, b, p) in image space. Sign-agnostic
/// coverage: callers normalize by the full triangle area.
fn edge_fn(a: Vec3, b: Vec3, p: Vec3) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Silhouette term: sum over views of |M1 - M2| in pixels.
/// Depth term: sum of |(D1 - D2) * M2| with M2 the second mesh's silhouette.
/// E_Rec = E_M + lambda_rec * E_D.
pub fn recon_error(
    mesh_a: &TriangleMesh,
    mesh_b: &TriangleMesh,
    views: &[ViewSpec],
    lambda_rec: f64,
) -> Result<(f64, f64, f64)> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("recon_error needs >= 1 view".into()));
    }
    let mut e_m = 0.0;
    let mut e_d = 0.0;
    for view in views {
        let ra = render(mesh_a, view);
        let rb = render(mesh_b, view);
        for i in 0..ra.depth.len() {
            let m1 = ra.silhouette[i] as u8 as f64;
            let m2 = rb.silhouette[i] as u8 as f64;
            e_m += (m1 - m2).abs();
            e_d += ((ra.depth[i] - rb.depth[i]) * m2).abs();
        }
    }
    Ok((e_m, e_d, e_m + lambda_rec * e_d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes;

    fn full_window_square() -> TriangleMesh {
        // faces the default azimuth-0 camera (direction -x)
        TriangleMesh {
            vertices: vec![
                [0.0, -1.0, -1.0],
                [0.0, 1.0, -1.0],
                [0.0, 1.0, 1.0],
                [0.0, -1.0, 1.0],
            ],
            faces: vec![[0, 1, 2], [0, 2, 3]],
        }
    }

    #[test]
    fn empty_mesh_renders_nothing() {
        let m = TriangleMesh {
            vertices: vec![],
            faces: vec![],
        };
        let r = render(&m, &ViewSpec::azimuth(0.0, 32));
        assert!(r.silhouette.iter().all(|&s| !s));
        assert!(r.depth.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn full_square_covers_window_constant_depth() {
        let r = render(&full_window_square(), &ViewSpec::azimuth(0.0, 64));
        assert!(r.silhouette.iter().all(|&s| s));
        let d0 = r.depth[0];
        assert!(d0 > 0.0);
        assert!(r.depth.iter().all(|&d| (d - d0).abs() < 1e-9));
    }

    #[test]
    fn sphere_silhouette_area() {
        let m = shapes::sphere(0.5, 48, 96);
        let r = render(&m, &ViewSpec::azimuth(0.0, 256));
        let covered = r.silhouette.iter().filter(|&&s| s).count() as f64;
        let frac = covered / (256.0 * 256.0);
        let expected = std::f64::consts::PI * 0.25 / 4.0;
        assert!((frac - expected).abs() / expected < 0.02, "frac {frac}");
    }

    #[test]
    fn recon_error_identity() {
        let m = shapes::sphere(0.4, 16, 32);
        let (em, ed, er) = recon_error(&m, &m, &default_views(), 10.0).unwrap();
        assert_eq!((em, ed, er), (0.0, 0.0, 0.0));
    }

    #[test]
    fn recon_error_empty_vs_square() {
        let empty = TriangleMesh {
            vertices: vec![],
            faces: vec![],
        };
        let sq = full_window_square();
        let views = [ViewSpec::azimuth(0.0, 32)];
        let (em, ed, er) = recon_error(&empty, &sq, &views, 10.0).unwrap();
        // mask differs everywhere; depth term is |0 - d| * 1 per pixel
        assert_eq!(em, 32.0 * 32.0);
        let d = render(&sq, &views[0]).depth[0];
        assert!((ed - 32.0 * 32.0 * d).abs() < 1e-9);
        assert!((er - (em + 10.0 * ed)).abs() < 1e-9);
    }

    #[test]
    fn lambda_zero_reduces_to_mask_term() {
        let a = shapes::sphere(0.4, 12, 24);
        let b = shapes::sphere(0.5, 12, 24);
        let views = default_views();
        let (em, _, er) = recon_error(&a, &b, &views, 0.0).unwrap();
        assert_eq!(em, er);
    }

    #[test]
    fn empty_view_list_is_error() {
        let m = shapes::sphere(0.4, 12, 24);
        assert!(recon_error(&m, &m, &[], 1.0).is_err());
    }
}

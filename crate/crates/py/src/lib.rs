//! Python bindings: mesh I/O, tensor fitting, decoder training, the
//! compressed container, and the evaluation metrics.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use meshcodec::{GridSpec, QuantSpec};

fn err(e: meshcodec::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(from_py_object)]
#[derive(Clone)]
struct Mesh {
    inner: meshcodec::TriangleMesh,
}

#[pymethods]
impl Mesh {
    #[new]
    fn new(vertices: Vec<[f64; 3]>, faces: Vec<[u32; 3]>) -> PyResult<Self> {
        Ok(Mesh {
            inner: meshcodec::TriangleMesh::new(vertices, faces).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Mesh {
            inner: meshcodec::mesh::load_obj(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        meshcodec::mesh::save_obj(&self.inner, path).map_err(err)
    }

    #[getter]
    fn vertices(&self) -> Vec<[f64; 3]> {
        self.inner.vertices.clone()
    }

    #[getter]
    fn faces(&self) -> Vec<[u32; 3]> {
        self.inner.faces.clone()
    }

    fn total_area(&self) -> f64 {
        self.inner.total_area()
    }

    fn __repr__(&self) -> String {
        format!(
            "Mesh({} vertices, {} faces)",
            self.inner.vertices.len(),
            self.inner.faces.len()
        )
    }
}

/// Unit sphere-like demo primitive.
#[pyfunction]
fn sphere(radius: f64, rings: usize, segments: usize) -> Mesh {
    Mesh {
        inner: meshcodec::shapes::sphere(radius, rings, segments),
    }
}

#[pyfunction]
fn torus(big: f64, small: f64, major_segs: usize, minor_segs: usize) -> Mesh {
    Mesh {
        inner: meshcodec::shapes::torus(big, small, major_segs, minor_segs),
    }
}

#[pyclass(from_py_object)]
#[derive(Clone)]
struct TsdfDef {
    inner: meshcodec::TsdfDefTensor,
}

#[pymethods]
impl TsdfDef {
    /// Fits a tensor to a mesh with differentiable marching cubes.
    #[staticmethod]
    #[pyo3(signature = (mesh, resolution, max_iter=500, lr=0.01, lambda_reg=10.0, seed=0))]
    fn fit(
        mesh: &Mesh,
        resolution: usize,
        max_iter: usize,
        lr: f64,
        lambda_reg: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let grid = GridSpec::new(resolution).map_err(err)?;
        let opts = meshcodec::fit::FitOptions {
            max_iter,
            lr,
            lambda_reg,
            seed,
            freeze_deformation: false,
        };
        let outcome = meshcodec::fit::fit_tensor(&mesh.inner, grid, &opts).map_err(err)?;
        Ok(TsdfDef {
            inner: outcome.tensor,
        })
    }

    #[getter]
    fn resolution(&self) -> usize {
        self.inner.grid.resolution
    }

    fn get(&self, u: usize, v: usize, w: usize, c: usize) -> f32 {
        self.inner.get(u, v, w, c)
    }

    /// Extracts the deformed isosurface as a mesh.
    fn extract(&self) -> Mesh {
        Mesh {
            inner: meshcodec::mc::dmc_extract(&self.inner),
        }
    }
}

#[pyfunction]
fn save_tensors(tensors: Vec<TsdfDef>, path: &str) -> PyResult<()> {
    let inner: Vec<_> = tensors.into_iter().map(|t| t.inner).collect();
    meshcodec::grid::save_archive(&inner, path).map_err(err)
}

#[pyfunction]
fn load_tensors(path: &str) -> PyResult<Vec<TsdfDef>> {
    Ok(meshcodec::grid::load_archive(path)
        .map_err(err)?
        .into_iter()
        .map(|inner| TsdfDef { inner })
        .collect())
}

#[pyclass]
struct Model {
    state: meshcodec::train::ModelState,
    cfg: meshcodec::train::TrainConfig,
}

#[pymethods]
impl Model {
    /// Trains the shared decoder and per-shape features on a tensor set.
    #[staticmethod]
    #[pyo3(signature = (tensors, feature_res=4, channels=8, head_width=16, widths=vec![16, 8, 8], epochs=100, lr=1e-3, bits=8, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        tensors: Vec<TsdfDef>,
        feature_res: usize,
        channels: usize,
        head_width: usize,
        widths: Vec<usize>,
        epochs: usize,
        lr: f64,
        bits: u32,
        seed: u64,
    ) -> PyResult<Self> {
        let arch =
            meshcodec::decoder::DecoderArch::standard(feature_res, channels, head_width, &widths)
                .map_err(err)?;
        let cfg = meshcodec::train::TrainConfig {
            epochs,
            lr,
            feat_quant: QuantSpec::symmetric(bits),
            param_quant: QuantSpec::symmetric(bits),
            seed,
            ..Default::default()
        };
        let inner: Vec<_> = tensors.into_iter().map(|t| t.inner).collect();
        let state = meshcodec::train::train_set(&inner, &arch, &cfg).map_err(err)?;
        Ok(Model { state, cfg })
    }

    #[getter]
    fn loss_history(&self) -> Vec<f64> {
        self.state.loss_history.clone()
    }

    /// Decoded tensor for one shape index.
    fn decode(&self, index: usize) -> PyResult<TsdfDef> {
        let feature = self
            .state
            .features
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("no shape {index}")))?;
        Ok(TsdfDef {
            inner: meshcodec::train::decode_feature(feature, &self.state, &self.cfg)
                .map_err(err)?,
        })
    }

    /// Entropy-codes the model into a bitstream; returns compressed bytes.
    fn compress(&self, path: &str) -> PyResult<u64> {
        let (features, params) = self.state.best();
        meshcodec::container::compress_set(
            features,
            params,
            &self.state.arch,
            &self.cfg.feat_quant,
            &self.cfg.param_quant,
            path,
        )
        .map_err(err)
    }
}

/// Decodes a bitstream back to one mesh per shape.
#[pyfunction]
fn decompress(path: &str) -> PyResult<Vec<Mesh>> {
    let set = meshcodec::container::decompress_set(path).map_err(err)?;
    Ok(meshcodec::container::decode_meshes(&set)
        .map_err(err)?
        .into_iter()
        .map(|inner| Mesh { inner })
        .collect())
}

/// Chamfer distance, normal consistency and F-scores between two meshes.
#[pyfunction]
#[pyo3(signature = (recon, gt, n_eval=10000, seed=0))]
fn evaluate(recon: &Mesh, gt: &Mesh, n_eval: usize, seed: u64) -> PyResult<(f64, f64, f64, f64)> {
    let m = meshcodec::metrics::evaluate_pair(&recon.inner, &gt.inner, n_eval, seed).map_err(err)?;
    Ok((m.cd, m.nc, m.f1_005, m.f1_01))
}

#[pymodule]
fn meshcodec_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Mesh>()?;
    m.add_class::<TsdfDef>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(sphere, m)?)?;
    m.add_function(wrap_pyfunction!(torus, m)?)?;
    m.add_function(wrap_pyfunction!(save_tensors, m)?)?;
    m.add_function(wrap_pyfunction!(load_tensors, m)?)?;
    m.add_function(wrap_pyfunction!(decompress, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}

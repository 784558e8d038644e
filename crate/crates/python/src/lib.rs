//! Python bindings: dataset generation, reconstruction, rendering and metrics.
//! Images cross the boundary as `(height, width, flat row-major RGB list)`.

use std::path::Path;

use meshsplat::eval::{mesh_chamfer_mm2, psnr};
use meshsplat::optim::{reconstruct as run_reconstruct, ReconstructConfig};
use meshsplat::raster::{render, Modality, RasterConfig};
use meshsplat::scene_io::scenes::object_scene;
use meshsplat::scene_io::{
    export_asset, generate_dataset as gen, load_dataset, read_mesh_ply, save_dataset, GenConfig,
};
use meshsplat::splatmesh::read_splat_ply;
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: meshsplat::Error) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

/// Renders `scene` (`ellipsoid` or `bumpy`) into `out_dir/dataset` and exports
/// the ground truth to `out_dir/gt`. Returns the number of frames.
#[pyfunction]
#[pyo3(signature = (scene, out_dir, seed=0, n_views=50, resolution=128))]
fn generate_dataset(
    scene: &str,
    out_dir: &str,
    seed: u64,
    n_views: usize,
    resolution: usize,
) -> PyResult<usize> {
    let asset = object_scene(scene, seed).map_err(py_err)?;
    let cfg = GenConfig {
        n_views,
        resolution,
        ..GenConfig::default()
    };
    let ds = gen(&asset, &cfg, seed).map_err(py_err)?;
    let out = Path::new(out_dir);
    save_dataset(&ds, &out.join("dataset")).map_err(py_err)?;
    export_asset(&asset.mesh, &asset.surfels, &out.join("gt")).map_err(py_err)?;
    Ok(ds.frames.len())
}

/// Runs reconstruction with a JSON config (fields of the `reconstruct`
/// section of a CLI config) and exports the result to `out_dir`. Returns a
/// JSON summary.
#[pyfunction]
#[pyo3(signature = (dataset_dir, out_dir, config_json="{}"))]
fn reconstruct(dataset_dir: &str, out_dir: &str, config_json: &str) -> PyResult<String> {
    let cfg: ReconstructConfig =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let ds = load_dataset(Path::new(dataset_dir)).map_err(py_err)?;
    let res = run_reconstruct(&ds, &cfg, None).map_err(py_err)?;
    export_asset(&res.mesh, &res.params.surfels, Path::new(out_dir)).map_err(py_err)?;
    Ok(serde_json::json!({
        "best_step": res.best_step,
        "best_loss": res.best_loss,
        "initial_loss": res.initial_loss,
        "vertices": res.mesh.vertex_count(),
        "gaussians": res.params.surfels.len(),
    })
    .to_string())
}

/// Symmetric Chamfer distance between two mesh PLY files, mm².
#[pyfunction]
#[pyo3(signature = (mesh_a, mesh_b, n_points=10000, seed=0))]
fn chamfer_mm2(mesh_a: &str, mesh_b: &str, n_points: usize, seed: u64) -> PyResult<f64> {
    let a = read_mesh_ply(Path::new(mesh_a)).map_err(py_err)?;
    let b = read_mesh_ply(Path::new(mesh_b)).map_err(py_err)?;
    mesh_chamfer_mm2(&a, &b, n_points, seed).map_err(py_err)
}

/// Renders a splat PLY from the camera of dataset frame `frame`, returning
/// the image and its PSNR against the frame.
#[pyfunction]
fn render_frame(
    splats: &str,
    dataset_dir: &str,
    frame: usize,
) -> PyResult<(usize, usize, Vec<f64>, f64)> {
    let g = read_splat_ply(Path::new(splats)).map_err(py_err)?;
    let ds = load_dataset(Path::new(dataset_dir)).map_err(py_err)?;
    let f = ds
        .frames
        .get(frame)
        .ok_or_else(|| PyValueError::new_err(format!("no frame {frame}")))?;
    let img = render(
        &g,
        &ds.cameras[f.camera],
        Modality::Rgb,
        ds.background,
        &RasterConfig::default(),
    )
    .map_err(py_err)?
    .color;
    let p = psnr(&img, &f.composite(ds.background)).map_err(py_err)?;
    Ok((img.height, img.width, img.data, p))
}

#[pymodule]
fn meshsplat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer_mm2, m)?)?;
    m.add_function(wrap_pyfunction!(render_frame, m)?)?;
    Ok(())
}

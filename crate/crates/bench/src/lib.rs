//! Fixtures shared by the benchmarks.

use std::path::PathBuf;

use tdbem_core::mesh::SurfaceMesh;

/// Loads a mesh from the workspace `data/` directory.
pub fn mesh(name: &str) -> SurfaceMesh {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "data", name].iter().collect();
    SurfaceMesh::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

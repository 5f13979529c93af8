//! Loading editable assets by file extension.

use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh::load_mesh;
use crate::ply::load_gaussians;
use crate::render::Asset;

/// Loads a `.ply` splat file or an `.obj` mesh and normalizes it into the
/// unit sphere so the default rig frames it.
pub fn load_asset(path: impl AsRef<Path>) -> Result<Asset> {
    let path = path.as_ref();
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("ply") => {
            let mut cloud = load_gaussians(path)?;
            cloud.normalize_to_unit_sphere();
            Ok(Asset::Gaussians(cloud))
        }
        Some("obj") => {
            let mut mesh = load_mesh(path)?;
            mesh.normalize_to_unit_sphere();
            Ok(Asset::Mesh(mesh))
        }
        _ => Err(Error::Format(format!("{}: expected a .ply or .obj asset", path.display()))),
    }
}

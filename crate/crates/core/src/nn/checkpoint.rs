//! Parameter checkpoints: a container file plus a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::discriminator::{Discriminator, DiscriminatorSpec};
use super::segnet::{SegNet, SegNetSpec};
use crate::container::{load_map, save_map};
use crate::error::{io_err, Error, Result};
use crate::scalar::Scalar;

pub const SEGNET_ARCH: &str = "toy-segnet";
pub const DISCRIMINATOR_ARCH: &str = "toy-discriminator";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub architecture: String,
    pub classes: usize,
    pub width: usize,
    pub seed: u64,
    pub iteration: usize,
    #[serde(default)]
    pub aux_head: bool,
    /// Precision the model was trained in; the payload is always f64.
    pub scalar: String,
    /// Parameter file, relative to the manifest.
    pub params: String,
}

fn write_checkpoint(manifest_path: &Path, manifest: &CheckpointManifest, params: Vec<f64>) -> Result<()> {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    save_map(dir.join(&manifest.params), &params)?;
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(manifest_path, text).map_err(io_err(manifest_path))
}

pub fn read_manifest(manifest_path: impl AsRef<Path>) -> Result<(CheckpointManifest, PathBuf)> {
    let path = manifest_path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    let params = path.parent().unwrap_or(Path::new(".")).join(&manifest.params);
    Ok((manifest, params))
}

/// Writes `<stem>.json` and `<stem>.padm` next to each other.
pub fn save_segnet<T: Scalar>(manifest_path: impl AsRef<Path>, net: &SegNet<T>, iteration: usize) -> Result<()> {
    let path = manifest_path.as_ref();
    let spec = net.spec();
    let manifest = CheckpointManifest {
        architecture: SEGNET_ARCH.into(),
        classes: spec.classes,
        width: spec.width,
        seed: spec.seed,
        iteration,
        aux_head: spec.aux_head,
        scalar: T::NAME.into(),
        params: params_name(path),
    };
    write_checkpoint(path, &manifest, net.params().iter().map(|p| p.as_f64()).collect())
}

pub fn load_segnet<T: Scalar>(manifest_path: impl AsRef<Path>) -> Result<(SegNet<T>, CheckpointManifest)> {
    let (manifest, params_path) = read_manifest(&manifest_path)?;
    if manifest.architecture != SEGNET_ARCH {
        return Err(Error::InvalidArgument(format!("checkpoint architecture is {}", manifest.architecture)));
    }
    let params: Vec<f64> = load_map(params_path)?;
    let spec = SegNetSpec { classes: manifest.classes, width: manifest.width, seed: manifest.seed, aux_head: manifest.aux_head };
    let net = SegNet::with_params(spec, params.into_iter().map(T::of).collect())?;
    Ok((net, manifest))
}

pub fn save_discriminator<T: Scalar>(
    manifest_path: impl AsRef<Path>,
    disc: &Discriminator<T>,
    iteration: usize,
) -> Result<()> {
    let path = manifest_path.as_ref();
    let spec = disc.spec();
    let manifest = CheckpointManifest {
        architecture: DISCRIMINATOR_ARCH.into(),
        classes: spec.classes,
        width: spec.width,
        seed: spec.seed,
        iteration,
        aux_head: false,
        scalar: T::NAME.into(),
        params: params_name(path),
    };
    write_checkpoint(path, &manifest, disc.params().iter().map(|p| p.as_f64()).collect())
}

pub fn load_discriminator<T: Scalar>(manifest_path: impl AsRef<Path>) -> Result<Discriminator<T>> {
    let (manifest, params_path) = read_manifest(&manifest_path)?;
    if manifest.architecture != DISCRIMINATOR_ARCH {
        return Err(Error::InvalidArgument(format!("checkpoint architecture is {}", manifest.architecture)));
    }
    let params: Vec<f64> = load_map(params_path)?;
    let spec = DiscriminatorSpec { classes: manifest.classes, width: manifest.width, seed: manifest.seed };
    Discriminator::with_params(spec, params.into_iter().map(T::of).collect())
}

fn params_name(manifest_path: &Path) -> String {
    let stem = manifest_path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    format!("{stem}.padm")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segnet_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = SegNet::<f32>::new(SegNetSpec { classes: 4, width: 4, seed: 11, aux_head: false }).unwrap();
        let path = dir.path().join("g1.json");
        save_segnet(&path, &net, 42).unwrap();
        assert!(dir.path().join("g1.padm").exists());
        let (back, manifest) = load_segnet::<f32>(&path).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(manifest.iteration, 42);
        assert_eq!(manifest.scalar, "f32");
        assert!(load_discriminator::<f32>(&path).is_err());
    }
}

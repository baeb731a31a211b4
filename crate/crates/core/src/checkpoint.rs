//! Model checkpoints: one tensor file per parameter plus `manifest.json`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::nn::Parameterized;
use crate::rng::Seed;
use crate::toy::net::{NetConfig, VelocityNet};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub config: serde_json::Value,
    /// Parameter name to shape.
    pub params: BTreeMap<String, Vec<usize>>,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn check_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'));
    if ok && name != "." && name != ".." {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "parameter name {name:?} is not a safe file name"
        )))
    }
}

pub fn save(
    dir: impl AsRef<Path>,
    kind: &str,
    config: serde_json::Value,
    model: &impl Parameterized,
) -> Result<()> {
    let dir = dir.as_ref();
    ensure_dir(dir)?;
    let mut params = BTreeMap::new();
    for (name, t) in model.named_tensors() {
        check_name(&name)?;
        write_tensor(dir.join(format!("{name}.tensor")), &t)?;
        params.insert(name, t.dims().to_vec());
    }
    let manifest = Manifest {
        kind: kind.to_owned(),
        config,
        params,
    };
    let path = dir.join(MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST);
    let s = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&s)?)
}

/// Reads the manifest and loads every listed parameter into `model`.
pub fn load_into(
    dir: impl AsRef<Path>,
    kind: &str,
    model: &mut impl Parameterized,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    if manifest.kind != kind {
        return Err(Error::invalid(format!(
            "checkpoint holds a {:?}, expected {kind:?}",
            manifest.kind
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.params.len());
    for (name, dims) in &manifest.params {
        check_name(name)?;
        let t = read_tensor(dir.join(format!("{name}.tensor")))?;
        if t.dims() != dims.as_slice() {
            return Err(Error::invalid(format!(
                "parameter {name}: file shape {:?}, manifest {dims:?}",
                t.dims()
            )));
        }
        tensors.push((name.clone(), t));
    }
    model.load_named(&tensors)?;
    Ok(manifest)
}

pub const VELOCITY_NET: &str = "velocity_net";

pub fn save_velocity_net(dir: impl AsRef<Path>, net: &VelocityNet) -> Result<()> {
    save(dir, VELOCITY_NET, serde_json::to_value(net.config)?, net)
}

pub fn load_velocity_net(dir: impl AsRef<Path>) -> Result<VelocityNet> {
    let dir = dir.as_ref();
    let config: NetConfig = serde_json::from_value(read_manifest(dir)?.config)?;
    let mut net = VelocityNet::new(config, Seed(0))?;
    load_into(dir, VELOCITY_NET, &mut net)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn velocity_net_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = VelocityNet::new(
            NetConfig {
                hidden: 5,
                ..Default::default()
            },
            Seed(3),
        )
        .unwrap();
        save_velocity_net(dir.path(), &net).unwrap();
        let back = load_velocity_net(dir.path()).unwrap();
        assert_eq!(back, net);
        let m = read_manifest(dir.path()).unwrap();
        assert_eq!(m.params["conv_in.w"], vec![54, 5]);
    }

    #[test]
    fn shape_and_kind_mismatches_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let net = VelocityNet::new(
            NetConfig {
                hidden: 5,
                ..Default::default()
            },
            Seed(3),
        )
        .unwrap();
        save_velocity_net(dir.path(), &net).unwrap();
        let mut other = VelocityNet::new(
            NetConfig {
                hidden: 6,
                ..Default::default()
            },
            Seed(3),
        )
        .unwrap();
        assert!(load_into(dir.path(), VELOCITY_NET, &mut other).is_err());
        let mut same = net.clone();
        assert!(load_into(dir.path(), "kin_encoder", &mut same).is_err());
        std::fs::remove_file(dir.path().join("skip.b.tensor")).unwrap();
        assert!(load_velocity_net(dir.path()).is_err());
    }
}

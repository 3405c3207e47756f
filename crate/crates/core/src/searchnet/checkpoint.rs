//! Checkpoint directory: `config.txt`, `manifest.txt` (one `name<TAB>dims`
//! line per tensor, dims comma separated) and one `<name>.ten` per tensor.
//! Batch-norm running statistics are stored as `<name>.mean` and
//! `<name>.var`.

use std::collections::BTreeMap;
use std::path::Path;

use super::config::NetworkConfig;
use super::network::Network;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::nn::{Module, Slot};
use crate::tensor::{io, BatchNormStats, Real, Tensor};

pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";

fn dims(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

pub fn save<T: Real>(net: &mut Network<T>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries: Vec<(String, Tensor<T>)> = Vec::new();
    net.visit("", &mut |name, slot| match slot {
        Slot::Param(p) => entries.push((name.to_string(), p.value().clone())),
        Slot::Stats(Some(st), _) => {
            entries.push((format!("{name}.mean"), st.mean.clone()));
            entries.push((format!("{name}.var"), st.var.clone()));
        }
        Slot::Stats(None, _) => {}
    });
    let mut manifest = String::new();
    for (name, t) in &entries {
        io::write(&dir.join(format!("{name}.ten")), t)?;
        manifest += &format!("{name}\t{}\n", dims(t.shape()));
    }
    fsutil::atomic_write(&dir.join(CONFIG_FILE), net.config.to_text().as_bytes())?;
    fsutil::atomic_write(&dir.join(MANIFEST_FILE), manifest.as_bytes())
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(fsutil::read(path)?).map_err(|_| Error::format(path, "not UTF-8"))
}

/// Rebuilds the network from `config.txt` and overwrites every tensor,
/// checking each manifest shape against the one the config implies.
pub fn load<T: Real>(dir: &Path) -> Result<Network<T>> {
    let cfg_path = dir.join(CONFIG_FILE);
    let cfg = NetworkConfig::from_text(&read_text(&cfg_path)?).map_err(|e| Error::format(&cfg_path, e.to_string()))?;
    let man_path = dir.join(MANIFEST_FILE);
    let mut manifest = BTreeMap::new();
    for line in read_text(&man_path)?.lines().filter(|l| !l.trim().is_empty()) {
        let (name, d) = line.split_once('\t').ok_or_else(|| Error::format(&man_path, format!("bad line `{line}`")))?;
        manifest.insert(name.to_string(), d.to_string());
    }
    let has_stats: Vec<String> = manifest.keys().filter_map(|k| k.strip_suffix(".mean").map(str::to_string)).collect();
    let mut net = Network::<T>::new(&cfg)?;
    let mut failure: Option<Error> = None;
    let mut load_one = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
        let expected = dims(shape);
        let listed =
            manifest.remove(name).ok_or_else(|| Error::format(&man_path, format!("missing tensor `{name}`")))?;
        if listed != expected {
            return Err(Error::format(&man_path, format!("`{name}` has dims {listed}, config implies {expected}")));
        }
        let path = dir.join(format!("{name}.ten"));
        let t: Tensor<T> = io::read(&path)?;
        if t.shape() != shape {
            return Err(Error::format(&path, format!("shape {:?} differs from manifest {expected}", t.shape())));
        }
        Ok(t)
    };
    net.visit("", &mut |name, slot| {
        if failure.is_some() {
            return;
        }
        let r = match slot {
            Slot::Param(p) => load_one(name, p.value().shape()).map(|t| p.set_value(t)),
            Slot::Stats(st, c) if has_stats.iter().any(|n| n == name) => (|| {
                let mean = load_one(&format!("{name}.mean"), &[c])?;
                let var = load_one(&format!("{name}.var"), &[c])?;
                *st = Some(BatchNormStats { mean, var });
                Ok(())
            })(),
            Slot::Stats(..) => Ok(()),
        };
        if let Err(e) = r {
            failure = Some(e);
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = manifest.keys().next() {
        return Err(Error::format(&man_path, format!("unexpected tensor `{extra}`")));
    }
    Ok(net)
}

/// True when every batch-norm layer carries running statistics.
pub fn has_running_stats<T: Real>(net: &mut Network<T>) -> bool {
    let mut all = true;
    net.visit("", &mut |_, slot| {
        if let Slot::Stats(None, _) = slot {
            all = false;
        }
    });
    all
}

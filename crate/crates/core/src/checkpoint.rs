//! Checkpoint directories: one STNSR1 file per parameter or buffer, a
//! `manifest.txt` of `name file shape` lines and the model `config.txt`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::autograd::ParamStore;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{read_tensor, write_tensor};

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG: &str = "config.txt";

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn save(dir: &Path, store: &ParamStore, config: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (id, p) in store.iter() {
        let file = format!("p{:04}.stnsr", id.index());
        let mut w = BufWriter::new(File::create(dir.join(&file))?);
        write_tensor(&mut w, &p.value)?;
        w.flush()?;
        manifest.push_str(&format!("{} {} {}\n", p.name, file, shape_str(p.value.shape())));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    fs::write(dir.join(CONFIG), config)?;
    Ok(())
}

pub fn read_config(dir: &Path) -> Result<String> {
    Ok(fs::read_to_string(dir.join(CONFIG))?)
}

/// Overwrites every entry of `store` from the checkpoint. Missing entries,
/// unknown names and shape differences are errors.
pub fn load(dir: &Path, store: &mut ParamStore) -> Result<()> {
    let manifest = fs::read_to_string(dir.join(MANIFEST))?;
    let mut seen = vec![false; store.len()];
    for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [name, file, shape] = parts[..] else {
            return Err(Error::Format(format!("bad manifest line `{line}`")));
        };
        let id = store
            .find(name)
            .ok_or_else(|| shape_err(format!("checkpoint has unknown parameter `{name}`")))?;
        let want = shape_str(store.value(id).shape());
        if shape != want {
            return Err(shape_err(format!("`{name}`: checkpoint {shape}, model {want}")));
        }
        let t = read_tensor(BufReader::new(File::open(dir.join(file))?))?;
        if shape_str(t.shape()) != want {
            return Err(shape_err(format!("`{name}`: file shape {:?}, model {want}", t.shape())));
        }
        store.set_value(id, t.to_dtype(store.dtype()))?;
        seen[id.index()] = true;
    }
    if let Some((_, p)) = store.iter().find(|(id, _)| !seen[id.index()]) {
        return Err(shape_err(format!("checkpoint is missing `{}`", p.name)));
    }
    Ok(())
}

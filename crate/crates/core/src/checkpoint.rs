//! On-disk checkpoints: a directory holding `manifest.toml` and
//! `params.bin` (little-endian arrays in declared parameter order).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::model::{Model, ModelConfig};
use crate::numeric::{DType, Scalar, Tensor};

pub const FORMAT: &str = "lazy-attention-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `params.bin`.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: DType,
    pub step: u64,
    /// Free-form scalars such as final train and eval loss.
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    pub model: ModelConfig,
    pub params: Vec<ParamEntry>,
}

impl Manifest {
    fn expected_bytes(&self) -> usize {
        self.params.iter().map(|p| p.shape.iter().product::<usize>() * self.dtype.size_bytes()).sum()
    }
}

/// Writes `model` to the directory `dir`. The checkpoint is assembled in a
/// sibling temporary directory and renamed into place, so a crash never
/// leaves a half-written checkpoint at `dir`.
pub fn save<T: Scalar>(model: &Model<T>, step: u64, metrics: &BTreeMap<String, f64>, dir: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(model.num_params() * T::DTYPE.size_bytes());
    let mut params = Vec::new();
    model.visit(&mut |name, _, t| {
        params.push(ParamEntry { name: name.to_string(), shape: t.shape().to_vec(), offset: bytes.len() });
        for &x in t.data() {
            x.write_le(&mut bytes);
        }
    });
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: VERSION,
        dtype: T::DTYPE,
        step,
        metrics: metrics.clone(),
        model: model.config,
        params,
    };
    let text = toml::to_string(&manifest).map_err(|e| crate::Error::Config(format!("manifest encoding: {e}")))?;

    let tmp = sibling(dir, "tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    fs::write(tmp.join(PARAMS_FILE), &bytes)?;
    fs::write(tmp.join(MANIFEST_FILE), text)?;
    if dir.exists() {
        let old = sibling(dir, "old");
        if old.exists() {
            fs::remove_dir_all(&old)?;
        }
        fs::rename(dir, &old)?;
        fs::rename(&tmp, dir)?;
        fs::remove_dir_all(&old)?;
    } else {
        fs::rename(&tmp, dir)?;
    }
    Ok(())
}

fn sibling(dir: &Path, tag: &str) -> PathBuf {
    let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    dir.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)?;
    let m: Manifest = toml::from_str(&text).map_err(|e| crate::Error::Corrupt(format!("{}: {e}", path.display())))?;
    if m.format != FORMAT {
        bail!(Corrupt, "{}: unknown format {:?}", path.display(), m.format);
    }
    if m.version != VERSION {
        bail!(Corrupt, "{}: unsupported version {}", path.display(), m.version);
    }
    Ok(m)
}

/// Loads a checkpoint at precision `T`, converting if it was stored at the
/// other precision.
pub fn load<T: Scalar>(dir: &Path) -> Result<(Model<T>, Manifest)> {
    let manifest = read_manifest(dir)?;
    let bytes = fs::read(dir.join(PARAMS_FILE))?;
    if bytes.len() != manifest.expected_bytes() {
        bail!(
            Corrupt,
            "{}: expected {} bytes of parameters, found {}",
            dir.display(),
            manifest.expected_bytes(),
            bytes.len()
        );
    }
    let mut model = Model::<T>::new(manifest.model)
        .map_err(|e| crate::Error::Corrupt(format!("{}: invalid model config: {e}", dir.display())))?;
    let mut expected = Vec::new();
    model.visit(&mut |name, _, t| expected.push((name.to_string(), t.shape().to_vec())));
    let found: Vec<_> = manifest.params.iter().map(|p| (p.name.clone(), p.shape.clone())).collect();
    if expected != found {
        bail!(Corrupt, "{}: parameter layout does not match the model config", dir.display());
    }

    let width = manifest.dtype.size_bytes();
    let mut tensors = Vec::with_capacity(manifest.params.len());
    for p in &manifest.params {
        let numel: usize = p.shape.iter().product();
        let end = p.offset + numel * width;
        let Some(raw) = bytes.get(p.offset..end) else {
            bail!(Corrupt, "{}: parameter {} out of range", dir.display(), p.name);
        };
        let data: Vec<T> = raw
            .chunks_exact(width)
            .map(|c| match manifest.dtype {
                DType::F32 => T::of(f32::read_le(c) as f64),
                DType::F64 => T::of(f64::read_le(c)),
            })
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            bail!(Corrupt, "{}: parameter {} holds non-finite values", dir.display(), p.name);
        }
        tensors.push(Tensor::new(&p.shape, data)?);
    }
    let mut it = tensors.into_iter();
    model.visit_mut(&mut |_, _, t| {
        let fresh = it.next().expect("layout checked");
        let rg = t.requires_grad();
        *t = fresh.with_requires_grad(rg);
    });
    Ok((model, manifest))
}

//! NIfTI-1 volume I/O and the on-disk dataset layout.
//!
//! Layout: `<root>/<id>/{ulf,hf}/<contrast>.nii.gz`, plus optional
//! `labelmap.nii.gz`, `mask.nii.gz` and `void.nii.gz` per subject.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ShapeBuilder};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Contrast, ContrastMap, IntensityNorm, NormState, Subject, Volume};

/// Reads a 3D NIfTI file. The result is always marked [`NormState::Raw`].
pub fn load_volume(path: &Path) -> Result<Volume> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let corrupt = |reason: String| Error::CorruptHeader {
        path: path.to_path_buf(),
        reason,
    };
    let obj = ReaderOptions::new().read_file(path).map_err(|e| match e {
        nifti::NiftiError::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => corrupt(other.to_string()),
    })?;
    let header = obj.header().clone();
    let dims = header.dim().map_err(|e| corrupt(e.to_string()))?.to_vec();
    if dims.len() < 3 || dims[3..].iter().any(|&d| d != 1) {
        return Err(Error::Non3dPayload {
            path: path.to_path_buf(),
            dims,
        });
    }
    let (nx, ny, nz) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let pix = header.pixdim;
    let spacing = [pix[3] as f64, pix[2] as f64, pix[1] as f64];
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(corrupt(format!("non-positive voxel size {:?}", &pix[1..4])));
    }
    let arr = obj
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| corrupt(e.to_string()))?;
    let arr = arr
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(ndarray::IxDyn(&[nx, ny, nz]))
        .map_err(|e| corrupt(e.to_string()))?;
    let mut data = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                data.push(arr[[x, y, z]]);
            }
        }
    }
    Volume::new([nz, ny, nx], spacing, data, NormState::Raw)
}

/// Writes a float32 NIfTI-1 file; gzip when the path ends in `.gz`.
pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    let unwritable = |source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    };
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => {
            return Err(unwritable(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "parent directory does not exist",
            )));
        }
        _ => {}
    }
    let [d, h, w] = v.shape();
    let data: Vec<f32> = v.data().iter().map(|&x| x as f32).collect();
    let arr = Array3::from_shape_vec((w, h, d).f(), data).expect("shape matches data");
    let mut header = NiftiHeader::default();
    let sp = v.spacing();
    header.pixdim = [1.0, sp[2] as f32, sp[1] as f32, sp[0] as f32, 1.0, 1.0, 1.0, 1.0];
    header.xyzt_units = 2; // millimetres
    let compress = path.extension().is_some_and(|e| e == "gz");
    WriterOptions::new(path)
        .reference_header(&header)
        .compress(compress)
        .write_nifti(&arr)
        .map_err(|e| match e {
            nifti::NiftiError::Io(source) => unwritable(source),
            other => unwritable(std::io::Error::other(other.to_string())),
        })
}

fn contrast_path(root: &Path, id: &str, domain: &str, c: Contrast) -> PathBuf {
    root.join(id).join(domain).join(format!("{}.nii.gz", c.file_stem()))
}

/// Loads a subject and unit-normalizes its intensity volumes.
pub fn load_subject(root: &Path, id: &str, norm: &IntensityNorm) -> Result<Subject> {
    let load_domain = |domain: &str| -> Result<ContrastMap> {
        Contrast::ALL
            .iter()
            .map(|&c| {
                let raw = load_volume(&contrast_path(root, id, domain, c))?;
                Ok((c, norm.apply(&raw)?))
            })
            .collect()
    };
    let ulf = load_domain("ulf")?;
    let hf = if root.join(id).join("hf").is_dir() {
        Some(load_domain("hf")?)
    } else {
        None
    };
    let optional = |name: &str| -> Result<Option<Volume>> {
        let p = root.join(id).join(name);
        if p.is_file() {
            load_volume(&p).map(Some)
        } else {
            Ok(None)
        }
    };
    let as_mask = |v: Volume| {
        let data = v.data().iter().map(|&x| if x > 0.5 { 1.0 } else { 0.0 }).collect();
        Volume::unit(v.shape(), data)
            .with_spacing(v.spacing())
            .expect("spacing already validated")
    };
    let subject = Subject {
        id: id.to_string(),
        ulf,
        hf,
        labelmap: optional("labelmap.nii.gz")?,
        bg_mask: optional("mask.nii.gz")?.map(as_mask),
        void_mask: optional("void.nii.gz")?.map(as_mask),
    };
    subject.validate()?;
    Ok(subject)
}

/// Writes a subject under `root/<id>/`, replacing existing files.
pub fn save_subject(root: &Path, s: &Subject) -> Result<()> {
    let dir = root.join(&s.id);
    let mkdir = |p: &Path| {
        fs::create_dir_all(p).map_err(|source| Error::Unwritable {
            path: p.to_path_buf(),
            source,
        })
    };
    mkdir(&dir.join("ulf"))?;
    for (&c, v) in &s.ulf {
        save_volume(v, &contrast_path(root, &s.id, "ulf", c))?;
    }
    if let Some(hf) = &s.hf {
        mkdir(&dir.join("hf"))?;
        for (&c, v) in hf {
            save_volume(v, &contrast_path(root, &s.id, "hf", c))?;
        }
    }
    if let Some(l) = &s.labelmap {
        save_volume(l, &dir.join("labelmap.nii.gz"))?;
    }
    if let Some(m) = &s.bg_mask {
        save_volume(m, &dir.join("mask.nii.gz"))?;
    }
    if let Some(m) = &s.void_mask {
        save_volume(m, &dir.join("void.nii.gz"))?;
    }
    Ok(())
}

/// Subject ids under `root` (directories containing `ulf/`), sorted.
pub fn list_subjects(root: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(root).map_err(|source| Error::Io {
        path: root.to_path_buf(),
        source,
    })?;
    let mut ids: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("ulf").is_dir())
        .filter_map(|e| e.file_name().to_str().map(str::to_string))
        .collect();
    ids.sort();
    Ok(ids)
}

pub fn load_dataset(root: &Path, norm: &IntensityNorm) -> Result<Vec<Subject>> {
    let ids = list_subjects(root)?;
    if ids.is_empty() {
        return Err(Error::EmptyDataset);
    }
    ids.iter().map(|id| load_subject(root, id, norm)).collect()
}

/// Train/validation partition of subject ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub seed: u64,
}

/// Seeded shuffle; the first `n_val` shuffled subjects form the validation set.
/// Both lists keep the input order.
pub fn split_dataset(ids: &[String], n_val: usize, seed: u64) -> Result<DatasetSplit> {
    if n_val == 0 || n_val >= ids.len() {
        return Err(Error::InvalidArgument(format!(
            "n_val must be in 1..{}, got {n_val}",
            ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; ids.len()];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let pick = |want: bool| {
        ids.iter()
            .zip(&is_val)
            .filter(|(_, &v)| v == want)
            .map(|(id, _)| id.clone())
            .collect()
    };
    Ok(DatasetSplit {
        train: pick(false),
        val: pick(true),
        seed,
    })
}

//! Binary phantom datasets (`VGDS`) with a JSON sidecar manifest.
//!
//! Layout: `"VGDS"`, version `u32`, count `u64`, then per sample: id `u64`,
//! modality `u8`, raw ratio `f64`, c `f64`, H `u32`, W `u32`, `H·W` image
//! `f64`s and `H·W` label bytes. All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use vg_tensor::Tensor;

use crate::error::{Error, Result};
use crate::phantom::{LabeledVolume, Modality, NormBounds};
use crate::rng;

const MAGIC: &[u8; 4] = b"VGDS";
const VERSION: u32 = 1;
const HEADER_BYTES: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub offset: u64,
    pub raw_ratio: f64,
    pub c: f64,
    pub modality: Modality,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Data file name, relative to the manifest's directory.
    pub data_file: String,
    pub bounds: NormBounds,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn data_path(&self, manifest_path: &Path) -> PathBuf {
        manifest_path.parent().unwrap_or(Path::new(".")).join(&self.data_file)
    }
}

fn sample_bytes(v: &LabeledVolume) -> u64 {
    (8 + 1 + 8 + 8 + 4 + 4 + v.labels.len() * 9) as u64
}

/// Writes volumes and returns each sample's byte offset.
pub fn write_dataset(path: &Path, volumes: &[LabeledVolume]) -> Result<Vec<u64>> {
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    let mut offsets = Vec::with_capacity(volumes.len());
    let mut offset = HEADER_BYTES;
    let mut body = || -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(volumes.len() as u64).to_le_bytes())?;
        for (id, v) in volumes.iter().enumerate() {
            offsets.push(offset);
            offset += sample_bytes(v);
            w.write_all(&(id as u64).to_le_bytes())?;
            w.write_all(&[v.modality.code()])?;
            w.write_all(&v.raw_ratio.to_le_bytes())?;
            w.write_all(&v.c.to_le_bytes())?;
            w.write_all(&(v.height as u32).to_le_bytes())?;
            w.write_all(&(v.width as u32).to_le_bytes())?;
            for x in v.image.values() {
                w.write_all(&x.to_le_bytes())?;
            }
            w.write_all(&v.labels)?;
        }
        w.flush()
    };
    body().map_err(Error::io(path))?;
    Ok(offsets)
}

pub fn read_dataset(path: &Path) -> Result<Vec<LabeledVolume>> {
    let file = File::open(path).map_err(Error::io(path))?;
    let mut r = BufReader::new(file);
    let format = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let io = Error::io(path);
    let mut parse = || -> std::io::Result<std::result::Result<Vec<LabeledVolume>, String>> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Ok(Err(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Ok(Err(format!("unsupported version {version}")));
        }
        let count = read_u64(&mut r)?;
        let mut out = Vec::new();
        for _ in 0..count {
            let _id = read_u64(&mut r)?;
            let mut code = [0u8; 1];
            r.read_exact(&mut code)?;
            let Some(modality) = Modality::from_code(code[0]) else {
                return Ok(Err(format!("unknown modality code {}", code[0])));
            };
            let raw_ratio = read_f64(&mut r)?;
            let c = read_f64(&mut r)?;
            let h = read_u32(&mut r)? as usize;
            let w = read_u32(&mut r)? as usize;
            let mut image = vec![0.0; h * w];
            for x in &mut image {
                *x = read_f64(&mut r)?;
            }
            let mut labels = vec![0u8; h * w];
            r.read_exact(&mut labels)?;
            out.push(LabeledVolume {
                image: Tensor::new(&[1, h, w], image).expect("sized from header"),
                labels,
                height: h,
                width: w,
                modality,
                raw_ratio,
                c,
            });
        }
        Ok(Ok(out))
    };
    parse().map_err(io)?.map_err(format)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    read_u64(r).map(f64::from_bits)
}

/// Validation gets `floor(0.2·n)` randomly chosen samples.
pub fn split_tags(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "split"));
    let mut tags = vec![Split::Train; n];
    for &i in &order[..n / 5] {
        tags[i] = Split::Val;
    }
    tags
}

/// Writes `volumes` next to `manifest_path` (same stem, `.vgds`) and the
/// manifest itself.
pub fn split_and_persist(volumes: &[LabeledVolume], bounds: NormBounds, manifest_path: &Path, seed: u64) -> Result<DatasetManifest> {
    if volumes.is_empty() {
        return Err(Error::InvalidArgument("cannot persist an empty dataset".into()));
    }
    let data_path = manifest_path.with_extension("vgds");
    let offsets = write_dataset(&data_path, volumes)?;
    let tags = split_tags(volumes.len(), seed);
    let manifest = DatasetManifest {
        data_file: data_path
            .file_name()
            .expect("manifest path has a file name")
            .to_string_lossy()
            .into_owned(),
        bounds,
        entries: volumes
            .iter()
            .zip(offsets)
            .zip(tags)
            .enumerate()
            .map(|(id, ((v, offset), split))| ManifestEntry {
                id: id as u64,
                offset,
                raw_ratio: v.raw_ratio,
                c: v.c,
                modality: v.modality,
                split,
            })
            .collect(),
    };
    manifest.save(manifest_path)?;
    Ok(manifest)
}

/// Loads a manifest and its data, returning `(train, val)`.
pub fn load_split(manifest_path: &Path) -> Result<(DatasetManifest, Vec<LabeledVolume>, Vec<LabeledVolume>)> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let data_path = manifest.data_path(manifest_path);
    let volumes = read_dataset(&data_path)?;
    if volumes.len() != manifest.entries.len() {
        return Err(Error::Format {
            path: data_path,
            msg: format!("{} samples but manifest lists {}", volumes.len(), manifest.entries.len()),
        });
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (v, e) in volumes.into_iter().zip(&manifest.entries) {
        match e.split {
            Split::Train => train.push(v),
            Split::Val => val.push(v),
        }
    }
    Ok((manifest, train, val))
}

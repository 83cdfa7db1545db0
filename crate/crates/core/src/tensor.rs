//! Dense `height × width × channels` maps and the flat-binary tensor bundle format.
//!
//! A bundle is two files: `<stem>.json` (manifest) and `<stem>.bin` (payload).
//! The payload is the concatenation of every tensor as little-endian `f64` in
//! row-major order; the manifest lists `name`, `shape` and element `offset`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `H × W × C` array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} elements cannot form a {height}x{width}x{channels} map",
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        debug_assert!(row < self.height && col < self.width && ch < self.channels);
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    /// All channels of one cell.
    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let i = self.index(row, col, 0);
        &self.data[i..i + self.channels]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let i = self.index(row, col, 0);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    /// Copies one channel into a single-channel map.
    pub fn channel(&self, ch: usize) -> FeatureMap {
        let data = self.data.iter().skip(ch).step_by(self.channels).copied().collect();
        FeatureMap { height: self.height, width: self.width, channels: 1, data }
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &FeatureMap, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!("{what}: {:?} vs {:?}", self.shape(), other.shape())))
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    pub layout: String,
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata stored alongside the tensors.
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub const BUNDLE_FORMAT: &str = "keypose-tensors/1";

/// Ordered named tensors plus metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorBundle {
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub metadata: serde_json::Value,
}

impl TensorBundle {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push((name.into(), shape, data));
    }

    pub fn push_map(&mut self, name: impl Into<String>, map: &FeatureMap) {
        self.push(name, map.shape().to_vec(), map.data().to_vec());
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], &[f64])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
            .ok_or_else(|| Error::Shape(format!("tensor '{name}' missing from bundle")))
    }

    pub fn get_map(&self, name: &str) -> Result<FeatureMap> {
        let (shape, data) = self.get(name)?;
        match *shape {
            [h, w, c] => FeatureMap::from_vec(h, w, c, data.to_vec()),
            _ => Err(Error::Shape(format!("tensor '{name}' has rank {}, expected 3", shape.len()))),
        }
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, shape, data)| {
                let e = TensorEntry { name: name.clone(), shape: shape.clone(), offset };
                offset += data.len();
                e
            })
            .collect();
        Manifest {
            format: BUNDLE_FORMAT.into(),
            dtype: "f64-le".into(),
            layout: "row-major".into(),
            tensors,
            metadata: self.metadata.clone(),
        }
    }

    pub fn payload(&self) -> Vec<u8> {
        let n: usize = self.tensors.iter().map(|t| t.2.len()).sum();
        let mut out = Vec::with_capacity(n * 8);
        for (_, _, data) in &self.tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_parts(manifest: &Manifest, payload: &[u8]) -> Result<Self> {
        if manifest.format != BUNDLE_FORMAT || manifest.dtype != "f64-le" {
            return Err(Error::Shape(format!(
                "unsupported bundle format {} / {}",
                manifest.format, manifest.dtype
            )));
        }
        if payload.len() % 8 != 0 {
            return Err(Error::Shape("payload length is not a multiple of 8".into()));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let mut bundle = TensorBundle { tensors: Vec::new(), metadata: manifest.metadata.clone() };
        for e in &manifest.tensors {
            let len: usize = e.shape.iter().product();
            let data = values
                .get(e.offset..e.offset + len)
                .ok_or_else(|| Error::Shape(format!("tensor '{}' runs past the payload", e.name)))?;
            bundle.push(e.name.clone(), e.shape.clone(), data.to_vec());
        }
        Ok(bundle)
    }

    /// Writes `<stem>.json` and `<stem>.bin`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let (json, bin) = bundle_paths(stem);
        fs::write(&json, serde_json::to_vec_pretty(&self.manifest())?)?;
        fs::write(&bin, self.payload())?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (json, bin) = bundle_paths(stem);
        let manifest: Manifest = serde_json::from_slice(&fs::read(json)?)?;
        Self::from_parts(&manifest, &fs::read(bin)?)
    }
}

/// Accepts a stem, or a path ending in `.json` / `.bin`.
pub fn bundle_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let base = match stem.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => stem.with_extension(""),
        _ => stem.to_path_buf(),
    };
    let mut json = base.clone().into_os_string();
    json.push(".json");
    let mut bin = base.into_os_string();
    bin.push(".bin");
    (json.into(), bin.into())
}

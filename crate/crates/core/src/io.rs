//! On-disk formats: FCRS feature matrices, JSON manifests, protocols and
//! checkpoints.
//!
//! An FCRS file is the 4 bytes `FCRS`, then little-endian `u32` version,
//! row count `N` and width `C`, then `N * C` little-endian `f32` values in
//! row-major order. Rows are raw features; norms are recovered on load.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::Feature;
use crate::simdata::{Pair, VerificationSet};
use crate::template::{Dataset, Item, MediaKind, Template};
use crate::train::TrainState;

pub const FCRS_MAGIC: [u8; 4] = *b"FCRS";
pub const FCRS_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Row-major `f32` feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FcrsFile {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FcrsFile {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(&FCRS_MAGIC);
        for v in [FCRS_VERSION, self.rows as u32, self.cols as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!("FCRS header truncated ({} bytes)", bytes.len())));
        }
        if bytes[..4] != FCRS_MAGIC {
            return Err(Error::Format("bad FCRS magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
        if word(1) != FCRS_VERSION {
            return Err(Error::Format(format!("unsupported FCRS version {}", word(1))));
        }
        let (rows, cols) = (word(2) as usize, word(3) as usize);
        let expected = rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::Format("FCRS size overflow".into()))?;
        if bytes.len() - HEADER_LEN != expected {
            return Err(Error::Format(format!("FCRS payload is {} bytes, header says {expected}", bytes.len() - HEADER_LEN)));
        }
        let data = bytes[HEADER_LEN..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok(Self { rows, cols, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Feature of row `i`, widened to `f64`.
    pub fn feature(&self, i: usize) -> Feature {
        Feature::from_raw(&self.row(i).iter().map(|&v| f64::from(v)).collect::<Vec<_>>())
    }
}

/// Write through a sibling temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub row_index: usize,
    pub media_id: u32,
    pub kind: MediaKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTemplate {
    pub id: u64,
    pub items: Vec<ManifestItem>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestIdentity {
    pub id: usize,
    pub templates: Vec<ManifestTemplate>,
}

/// Template structure over the rows of one FCRS file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// FCRS path, relative to the manifest.
    pub features: String,
    pub channels: usize,
    pub identities: Vec<ManifestIdentity>,
}

impl Manifest {
    /// Every row index must be unique and below `rows`.
    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if cols != self.channels {
            return Err(Error::Format(format!("manifest says {} channels, features have {cols}", self.channels)));
        }
        let mut seen = vec![false; rows];
        let mut ids = std::collections::HashSet::new();
        for ident in &self.identities {
            for t in &ident.templates {
                if !ids.insert(t.id) {
                    return Err(Error::Format(format!("duplicate template id {}", t.id)));
                }
                if t.items.is_empty() {
                    return Err(Error::Format(format!("template {} has no items", t.id)));
                }
                for it in &t.items {
                    match seen.get_mut(it.row_index) {
                        None => return Err(Error::Format(format!("row index {} out of range ({rows} rows)", it.row_index))),
                        Some(true) => return Err(Error::Format(format!("row index {} used twice", it.row_index))),
                        Some(s) => *s = true,
                    }
                }
            }
        }
        Ok(())
    }
}

/// Split a dataset into an FCRS matrix and a manifest naming `features`.
pub fn encode_dataset(data: &Dataset, features: &str) -> Result<(FcrsFile, Manifest)> {
    let mut values = Vec::with_capacity(data.item_count() * data.channels);
    let mut by_identity: BTreeMap<usize, Vec<ManifestTemplate>> = BTreeMap::new();
    let mut row = 0;
    for t in &data.templates {
        let mut items = Vec::with_capacity(t.len());
        for it in &t.items {
            if it.feature.dim() != data.channels {
                return Err(Error::Dimension(format!("template {} has width {}", t.id, it.feature.dim())));
            }
            values.extend(it.feature.raw().iter().map(|&v| v as f32));
            items.push(ManifestItem { row_index: row, media_id: it.media_id, kind: it.kind });
            row += 1;
        }
        by_identity.entry(t.identity).or_default().push(ManifestTemplate { id: t.id, items });
    }
    let identities = by_identity.into_iter().map(|(id, templates)| ManifestIdentity { id, templates }).collect();
    Ok((FcrsFile::new(row, data.channels, values)?, Manifest { features: features.to_string(), channels: data.channels, identities }))
}

pub fn decode_dataset(fcrs: &FcrsFile, manifest: &Manifest) -> Result<Dataset> {
    manifest.validate(fcrs.rows, fcrs.cols)?;
    let mut templates = Vec::new();
    for ident in &manifest.identities {
        for t in &ident.templates {
            let items = t.items.iter().map(|it| Item { feature: fcrs.feature(it.row_index), media_id: it.media_id, kind: it.kind }).collect();
            templates.push(Template { id: t.id, identity: ident.id, items });
        }
    }
    templates.sort_by_key(|t| t.id);
    Ok(Dataset { channels: manifest.channels, templates })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json(value)?.as_bytes())
}

/// Write `manifest.json` and `features.fcrs` into `dir`.
pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<PathBuf> {
    let (fcrs, manifest) = encode_dataset(data, "features.fcrs")?;
    fcrs.write(&dir.join("features.fcrs"))?;
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Load a dataset from its manifest path.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest: Manifest = read_json(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let fcrs = FcrsFile::read(&base.join(&manifest.features))?;
    decode_dataset(&fcrs, &manifest)
}

/// Labelled template pairs over one dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolFile {
    pub pairs: Vec<Pair>,
}

pub fn load_protocol(path: &Path) -> Result<ProtocolFile> {
    read_json(path)
}

/// Pair a loaded dataset with a protocol, checking template references.
pub fn verification_set(dataset: Dataset, protocol: ProtocolFile) -> Result<VerificationSet> {
    let ids: std::collections::HashSet<u64> = dataset.templates.iter().map(|t| t.id).collect();
    if let Some(p) = protocol.pairs.iter().find(|p| !ids.contains(&p.a) || !ids.contains(&p.b)) {
        return Err(Error::Index(format!("protocol pair ({}, {}) references an unknown template", p.a, p.b)));
    }
    Ok(VerificationSet { dataset, pairs: protocol.pairs })
}

pub const CHECKPOINT_FORMAT: &str = "setfuse-checkpoint";

/// Model parameters plus optimizer state, stored as JSON. Floats
/// round-trip exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(state: TrainState) -> Self {
        Self { format: CHECKPOINT_FORMAT.into(), version: 1, state }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = read_json(path)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != 1 {
            return Err(Error::Format(format!("{} is not a version 1 checkpoint", path.display())));
        }
        ck.state.model.config.validate().map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        if ck.state.model.params.gamma.is_nan() {
            return Err(Error::Format("checkpoint gamma is NaN".into()));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use crate::simdata::{gen_dataset, GeneratorConfig};
    use crate::train::{class_mean_prototypes, TrainConfig, Trainer};
    use proptest::prelude::*;

    fn small() -> Dataset {
        gen_dataset(&GeneratorConfig { channels: 8, ..GeneratorConfig::default() }, 3, 4, 9).unwrap()
    }

    #[test]
    fn fcrs_rejects_corruption() {
        let f = FcrsFile::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = f.to_bytes();
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(FcrsFile::from_bytes(&bytes).unwrap(), f);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(FcrsFile::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(FcrsFile::from_bytes(&bad), Err(Error::Format(_))));
        assert!(FcrsFile::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(FcrsFile::from_bytes(&[bytes.clone(), vec![0; 4]].concat()).is_err());
        assert!(FcrsFile::from_bytes(&bytes[..10]).is_err());
    }

    proptest! {
        #[test]
        fn fcrs_roundtrip(rows in 0usize..6, cols in 1usize..6, seed in any::<u32>()) {
            let data: Vec<f32> = (0..rows * cols).map(|i| (i as f32 + seed as f32).sin()).collect();
            let f = FcrsFile::new(rows, cols, data).unwrap();
            let bytes = f.to_bytes();
            let back = FcrsFile::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn dataset_roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let data = small();
        let path = save_dataset(&data, dir.path()).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.templates.len(), data.templates.len());
        for (a, b) in loaded.templates.iter().zip(&data.templates) {
            assert_eq!((a.id, a.identity, a.len()), (b.id, b.identity, b.len()));
            for (x, y) in a.items.iter().zip(&b.items) {
                assert_eq!((x.media_id, x.kind), (y.media_id, y.kind));
                assert!((x.feature.norm() - y.feature.norm()).abs() < 1e-5 * y.feature.norm());
            }
        }
        let (f1, m1) = encode_dataset(&loaded, "features.fcrs").unwrap();
        assert_eq!(f1.to_bytes(), fs::read(dir.path().join("features.fcrs")).unwrap());
        assert_eq!(m1, read_json::<Manifest>(&path).unwrap());
    }

    #[test]
    fn manifest_rejects_bad_rows() {
        let (f, mut m) = encode_dataset(&small(), "x").unwrap();
        m.identities[0].templates[0].items[0].row_index = f.rows;
        assert!(decode_dataset(&f, &m).is_err());
        let (f, mut m) = encode_dataset(&small(), "x").unwrap();
        m.identities[0].templates[0].items[0].row_index = 1;
        m.identities[0].templates[0].items[1].row_index = 1;
        assert!(decode_dataset(&f, &m).is_err());
    }

    #[test]
    fn checkpoint_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let data = small();
        let model = Model::init(ModelConfig::new(8, 3).unwrap(), class_mean_prototypes(&data, 3).unwrap(), 4).unwrap();
        let tr = Trainer::new(TrainConfig { batch: 4, lr: 1e-2, epochs: 1, ..TrainConfig::default() }, &data).unwrap();
        let mut st = TrainState::new(model);
        tr.run(&mut st, |_| {}).unwrap();
        let path = dir.path().join("ck.json");
        Checkpoint::new(st.clone()).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().state;
        for ((_, a), (_, b)) in back.model.param_tensors().iter().zip(st.model.param_tensors().iter()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back, st);
        fs::write(&path, "{\"format\":\"other\"}").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}

//! Adapter checkpoint container.
//!
//! ```text
//! "DLAC" | version: u32 LE = 1
//! manifest_len: u64 LE | manifest JSON
//! entry_count: u64 LE
//! per entry: header_len: u64 LE | header JSON {module_type, layer_index, role} | DLT1 tensor
//! ```
//!
//! Shared codec entries carry `layer_index: null`.

use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ActivationKind;
use crate::param::ParamStore;
use crate::site::Site;
use crate::tensor::{read_u64, Tensor};

use super::{AdapterGroup, AdapterVariant};

pub const ADAPTER_MAGIC: &[u8; 4] = b"DLAC";
pub const ADAPTER_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    A,
    B,
    M,
    #[serde(rename = "W_e")]
    WE,
    #[serde(rename = "W_d")]
    WD,
    #[serde(rename = "l_scaling")]
    LScaling,
    #[serde(rename = "l_bias")]
    LBias,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Role::A => "A",
            Role::B => "B",
            Role::M => "M",
            Role::WE => "W_e",
            Role::WD => "W_d",
            Role::LScaling => "l_scaling",
            Role::LBias => "l_bias",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupManifest {
    pub module_type: Site,
    pub variant: AdapterVariant,
    pub in_dim: usize,
    pub out_dim: usize,
    pub layers: usize,
    pub rank: usize,
    pub alpha: f64,
    pub activation: ActivationKind,
    pub dropout: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdapterManifest {
    pub groups: Vec<GroupManifest>,
}

impl AdapterManifest {
    pub fn from_groups(groups: &[AdapterGroup]) -> Self {
        Self {
            groups: groups
                .iter()
                .map(|g| GroupManifest {
                    module_type: g.site,
                    variant: g.variant,
                    in_dim: g.in_dim,
                    out_dim: g.out_dim,
                    layers: g.adapters.len(),
                    rank: g.config.rank,
                    alpha: g.config.alpha(),
                    activation: g.config.activation,
                    dropout: g.config.dropout,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct EntryHeader {
    module_type: Site,
    layer_index: Option<usize>,
    role: Role,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub module_type: Site,
    /// `None` for shared codec weights.
    pub layer_index: Option<usize>,
    pub role: Role,
    pub tensor: Tensor,
}

impl CheckpointEntry {
    pub fn label(&self) -> String {
        match self.layer_index {
            Some(l) => format!("{}.{l}.{}", self.module_type, self.role),
            None => format!("{}.shared.{}", self.module_type, self.role),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterCheckpoint {
    pub manifest: AdapterManifest,
    pub entries: Vec<CheckpointEntry>,
}

impl AdapterCheckpoint {
    /// Captures every adapter parameter, either at its current value or at
    /// the snapshot recorded when it was attached.
    pub fn capture(store: &ParamStore, groups: &[AdapterGroup], initial: bool) -> Self {
        let mut entries = Vec::new();
        for g in groups {
            for (layer_index, role, id) in g.all_params() {
                let p = store.get(id);
                let tensor = if initial { p.initial_snapshot() } else { p.value() };
                entries.push(CheckpointEntry {
                    module_type: g.site,
                    layer_index,
                    role,
                    tensor: tensor.clone(),
                });
            }
        }
        Self {
            manifest: AdapterManifest::from_groups(groups),
            entries,
        }
    }

    pub fn get(&self, site: Site, layer_index: Option<usize>, role: Role) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.module_type == site && e.layer_index == layer_index && e.role == role)
            .map(|e| &e.tensor)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(ADAPTER_MAGIC)?;
        w.write_all(&ADAPTER_FORMAT_VERSION.to_le_bytes())?;
        write_json_block(w, &self.manifest)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            let header = EntryHeader {
                module_type: e.module_type,
                layer_index: e.layer_index,
                role: e.role,
            };
            write_json_block(w, &header)?;
            e.tensor.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != ADAPTER_MAGIC {
            return Err(Error::Format(format!("bad adapter checkpoint magic {magic:?}")));
        }
        let mut version = [0u8; 4];
        r.read_exact(&mut version)?;
        let version = u32::from_le_bytes(version);
        if version != ADAPTER_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported adapter checkpoint version {version}")));
        }
        let manifest: AdapterManifest = read_json_block(r)?;
        let count = read_u64(r)?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let h: EntryHeader = read_json_block(r)?;
            entries.push(CheckpointEntry {
                module_type: h.module_type,
                layer_index: h.layer_index,
                role: h.role,
                tensor: Tensor::read_from(r)?,
            });
        }
        Ok(Self { manifest, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(fs::File::open(path)?);
        let ck = Self::read_from(&mut r)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes in adapter checkpoint", rest.len())));
        }
        Ok(ck)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}

pub(crate) fn write_json_block<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec(value)?;
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(&bytes)?;
    Ok(())
}

pub(crate) fn read_json_block<R: Read, T: for<'de> Deserialize<'de>>(r: &mut R) -> Result<T> {
    let len = read_u64(r)? as usize;
    if len > 1 << 26 {
        return Err(Error::Format(format!("json block of {len} bytes is implausibly large")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(serde_json::from_slice(&buf)?)
}

//! Checkpoint container: magic, format version, a JSON header describing the
//! architecture and tensor table, then raw little-endian `f32` tensor data.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    Adam, AdamConfig, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, ModelState,
    Param,
};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "earballs-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"EARBALLS";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    generator: GeneratorConfig,
    discriminator: DiscriminatorConfig,
    g_adam: AdamConfig,
    d_adam: AdamConfig,
    g_adam_t: u64,
    d_adam_t: u64,
    step: u64,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    extra: serde_json::Value,
}

const GROUPS: [&str; 6] = [
    "generator",
    "discriminator",
    "g_adam_m",
    "g_adam_v",
    "d_adam_m",
    "d_adam_v",
];

fn data(p: &[Param<f32>]) -> Vec<&[f32]> {
    p.iter().map(|t| t.data.as_slice()).collect()
}

fn moments(m: &[Vec<f32>]) -> Vec<&[f32]> {
    m.iter().map(Vec::as_slice).collect()
}

fn groups(state: &ModelState) -> [(&[Param<f32>], Vec<&[f32]>); 6] {
    let g = &state.generator.params;
    let d = &state.discriminator.params;
    [
        (g.as_slice(), data(g)),
        (d.as_slice(), data(d)),
        (g.as_slice(), moments(&state.g_opt.m)),
        (g.as_slice(), moments(&state.g_opt.v)),
        (d.as_slice(), moments(&state.d_opt.m)),
        (d.as_slice(), moments(&state.d_opt.v)),
    ]
}

/// Writes `state` plus caller-defined `extra` metadata. The file is written
/// to a sibling temporary and renamed into place.
pub fn save_checkpoint(
    state: &ModelState,
    extra: serde_json::Value,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let groups = groups(state);
    let mut tensors = Vec::new();
    for (name, (layout, _)) in GROUPS.iter().zip(&groups) {
        tensors.extend(layout.iter().map(|p| TensorEntry {
            group: name.to_string(),
            name: p.name.clone(),
            shape: p.shape.clone(),
        }));
    }
    let header = Header {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        generator: state.generator.config().clone(),
        discriminator: state.discriminator.config().clone(),
        g_adam: state.g_opt.config,
        d_adam: state.d_opt.config,
        g_adam_t: state.g_opt.t,
        d_adam_t: state.d_opt.t,
        step: state.step,
        tensors,
        extra,
    };
    let json = serde_json::to_vec(&header)?;

    let tmp = path.with_extension("tmp");
    let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(&tmp, e));
    write(MAGIC)?;
    write(&CHECKPOINT_VERSION.to_le_bytes())?;
    write(&(json.len() as u64).to_le_bytes())?;
    write(&json)?;
    for (_, data) in &groups {
        for t in data {
            for v in *t {
                write(&v.to_le_bytes())?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelState, serde_json::Value)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Checkpoint(format!("{}: {reason}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body_start = 20usize
        .checked_add(header_len)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..body_start])?;
    if header.format != CHECKPOINT_FORMAT || header.version != version {
        return Err(bad("header format tag mismatch"));
    }

    let mut cursor = body_start;
    let mut tensors: Vec<Vec<Param<f32>>> = (0..GROUPS.len()).map(|_| Vec::new()).collect();
    for entry in &header.tensors {
        let group = GROUPS
            .iter()
            .position(|g| *g == entry.group)
            .ok_or_else(|| bad(&format!("unknown tensor group '{}'", entry.group)))?;
        let n: usize = entry.shape.iter().product();
        let end = cursor
            .checked_add(4 * n)
            .filter(|e| *e <= bytes.len())
            .ok_or_else(|| bad("truncated tensor data"))?;
        let data = bytes[cursor..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        cursor = end;
        tensors[group].push(Param {
            name: entry.name.clone(),
            shape: entry.shape.clone(),
            data,
        });
    }
    if cursor != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }

    let mut it = tensors.into_iter();
    let mut next = || it.next().unwrap();
    let generator = Generator::from_params(header.generator, next())?;
    let discriminator = Discriminator::from_params(header.discriminator, next())?;
    let mut moments = |layout: &[Param<f32>], t: u64, config: AdamConfig| -> Result<Adam<f32>> {
        let m = next();
        let v = next();
        for group in [&m, &v] {
            super::generator::check_layout(layout, group)?;
        }
        Ok(Adam {
            config,
            t,
            m: m.into_iter().map(|p| p.data).collect(),
            v: v.into_iter().map(|p| p.data).collect(),
        })
    };
    let g_opt = moments(&generator.params, header.g_adam_t, header.g_adam)?;
    let d_opt = moments(&discriminator.params, header.d_adam_t, header.d_adam)?;
    Ok((
        ModelState {
            generator,
            discriminator,
            g_opt,
            d_opt,
            step: header.step,
        },
        header.extra,
    ))
}

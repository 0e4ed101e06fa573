//! Binary checkpoint format.
//!
//! ```text
//! "NOE1" | version: u32 | meta_len: u64 | meta: JSON
//! repeated until EOF:
//!   name_len: u64 | name: UTF-8 | rank: u64 | dims: rank × u64 | data: f32 LE, row-major
//! ```
//!
//! All integers are little-endian. Section names are the [`ParamId`] display
//! strings.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{
    AttnMat, ExpertSet, Factor, FfnMat, LayerAdapter, LnSlot, LoraPair, Model, ModelConfig,
    ParamId,
};
use crate::privacy::CalibrationRecord;
use crate::tensor::{Float, Mat};

pub const MAGIC: &[u8; 4] = b"NOE1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: ModelConfig,
    /// Free-form stage tag: `pretrain`, `stage1`, `stage2`, `deployed`, ...
    pub stage: String,
    pub seed: u64,
    pub step: u64,
    pub backbone_frozen: bool,
    #[serde(default)]
    pub variant: Option<String>,
    /// Set on exported single-domain checkpoints.
    #[serde(default)]
    pub deployed_domain: Option<usize>,
    #[serde(default)]
    pub surgery: Option<String>,
    #[serde(default)]
    pub privacy: Option<CalibrationRecord>,
}

impl CheckpointMeta {
    pub fn new(config: ModelConfig, stage: impl Into<String>, seed: u64, step: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config,
            stage: stage.into(),
            seed,
            step,
            backbone_frozen: true,
            variant: None,
            deployed_domain: None,
            surgery: None,
            privacy: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model<f32>,
}

impl Checkpoint {
    /// Single-domain deployable checkpoint: adapters folded into the
    /// backbone, prompts kept, no expert sections.
    pub fn deploy(&self, domain: usize) -> Result<Checkpoint> {
        let deployed = self.model.merge_for_deployment(domain)?;
        let mut meta = self.meta.clone();
        meta.stage = "deployed".into();
        meta.deployed_domain = Some(domain);
        meta.backbone_frozen = true;
        Ok(Checkpoint {
            meta,
            model: deployed.model,
        })
    }
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serialize to bytes.
pub fn encode(meta: &CheckpointMeta, model: &Model<f32>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(meta)?;
    put_u64(&mut buf, json.len() as u64);
    buf.extend_from_slice(&json);
    for (id, m) in model.params() {
        let name = id.to_string();
        put_u64(&mut buf, name.len() as u64);
        buf.extend_from_slice(name.as_bytes());
        put_u64(&mut buf, 2);
        put_u64(&mut buf, m.rows() as u64);
        put_u64(&mut buf, m.cols() as u64);
        for v in m.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Atomic write: temp file in the target directory, then rename.
pub fn save(path: &Path, meta: &CheckpointMeta, model: &Model<f32>) -> Result<()> {
    let bytes = encode(meta, model)?;
    write_atomic(path, &bytes)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid("path", format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated while reading {what}")))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Format(format!("{what} overflows")))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Raw sections in file order.
pub fn decode_sections(bytes: &[u8]) -> Result<(CheckpointMeta, Vec<(String, Mat<f32>)>)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(c.take(4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let meta_len = c.usize("metadata length")?;
    let meta: CheckpointMeta = serde_json::from_slice(c.take(meta_len, "metadata")?)
        .map_err(|e| Error::Format(format!("metadata: {e}")))?;
    let mut sections = Vec::new();
    while !c.done() {
        let name_len = c.usize("section name length")?;
        let name = std::str::from_utf8(c.take(name_len, "section name")?)
            .map_err(|_| Error::Format("section name is not UTF-8".into()))?
            .to_string();
        let rank = c.usize("rank")?;
        let dims = (0..rank)
            .map(|_| c.usize("dim"))
            .collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, cl] => (*r, *cl),
            _ => {
                return Err(Error::Format(format!(
                    "section {name}: rank {rank} unsupported"
                )))
            }
        };
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("section {name}: size overflow")))?;
        let data = c
            .take(n, &name)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        sections.push((name, Mat::from_vec(rows, cols, data)));
    }
    Ok((meta, sections))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let (meta, sections) = decode_sections(bytes)?;
    let mut map: BTreeMap<ParamId, Mat<f32>> = BTreeMap::new();
    for (name, m) in sections {
        let id = parse_param_id(&name)?;
        if map.insert(id, m).is_some() {
            return Err(Error::Format(format!("duplicate section {name}")));
        }
    }
    let model = assemble(&meta, map)?;
    Ok(Checkpoint { meta, model })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn take_exact(
    map: &mut BTreeMap<ParamId, Mat<f32>>,
    id: ParamId,
    shape: (usize, usize),
) -> Result<Mat<f32>> {
    let m = map
        .remove(&id)
        .ok_or_else(|| Error::Format(format!("missing section {id}")))?;
    if m.shape() != shape {
        return Err(Error::Shape {
            what: id.to_string(),
            expected: shape,
            got: m.shape(),
        });
    }
    Ok(m)
}

fn take_pair(
    map: &mut BTreeMap<ParamId, Mat<f32>>,
    id: impl Fn(FfnMat, Factor) -> ParamId,
    mat: FfnMat,
    cfg: &ModelConfig,
) -> Result<LoraPair<f32>> {
    let (p, q) = match mat {
        FfnMat::Wi => (cfg.d_model, cfg.d_ff),
        FfnMat::Wo => (cfg.d_ff, cfg.d_model),
    };
    let a = map
        .remove(&id(mat, Factor::A))
        .ok_or_else(|| Error::Format(format!("missing section {}", id(mat, Factor::A))))?;
    let r = a.rows();
    let a = if a.shape() == (r, q) {
        a
    } else {
        return Err(Error::Shape {
            what: id(mat, Factor::A).to_string(),
            expected: (r, q),
            got: a.shape(),
        });
    };
    let b = take_exact(map, id(mat, Factor::B), (p, r))?;
    Ok(LoraPair { a, b })
}

fn assemble(meta: &CheckpointMeta, mut map: BTreeMap<ParamId, Mat<f32>>) -> Result<Model<f32>> {
    let cfg = meta.config.clone();
    cfg.validate()?;
    let mut model = Model::<f32>::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let backbone_ids: Vec<(ParamId, (usize, usize))> = model
        .params()
        .into_iter()
        .map(|(id, m)| (id, m.shape()))
        .collect();
    for (id, shape) in backbone_ids {
        let m = take_exact(&mut map, id, shape)?;
        *model.param_mut(id).expect("backbone id") = m;
    }
    if map.contains_key(&ParamId::Prompts) {
        let p = map.remove(&ParamId::Prompts).expect("checked");
        if p.cols() != cfg.d_model || p.rows() > cfg.n_pt {
            return Err(Error::Shape {
                what: "prompts/P".into(),
                expected: (cfg.n_pt, cfg.d_model),
                got: p.shape(),
            });
        }
        model.prompts = Some(p);
    }
    let n_domains = map
        .keys()
        .filter_map(|id| match id {
            ParamId::Expert { domain, .. } => Some(domain + 1),
            _ => None,
        })
        .max()
        .unwrap_or(0);
    let has_common = map.keys().any(|id| matches!(id, ParamId::Common { .. }));
    if n_domains > cfg.num_domains {
        return Err(Error::Format(format!(
            "expert sections for {n_domains} domains, config has {}",
            cfg.num_domains
        )));
    }
    if n_domains > 0 || has_common {
        let mut e = ExpertSet::empty(&cfg);
        if n_domains > 0 {
            for domain in 0..cfg.num_domains {
                let mut layers = Vec::new();
                for layer in 0..cfg.n_layers {
                    let id = |mat, factor| ParamId::Expert {
                        domain,
                        layer,
                        mat,
                        factor,
                    };
                    layers.push(LayerAdapter {
                        w_in: take_pair(&mut map, id, FfnMat::Wi, &cfg)?,
                        w_out: take_pair(&mut map, id, FfnMat::Wo, &cfg)?,
                    });
                }
                e.domains.push(layers);
            }
        }
        if has_common {
            let mut layers = Vec::new();
            for layer in 0..cfg.n_layers {
                let id = |mat, factor| ParamId::Common { layer, mat, factor };
                layers.push(LayerAdapter {
                    w_in: take_pair(&mut map, id, FfnMat::Wi, &cfg)?,
                    w_out: take_pair(&mut map, id, FfnMat::Wo, &cfg)?,
                });
            }
            e.common = Some(layers);
        }
        model.experts = Some(e);
    }
    if let Some(id) = map.keys().next() {
        return Err(Error::Format(format!("unexpected section {id}")));
    }
    model.backbone_frozen = meta.backbone_frozen;
    Ok(model)
}

fn parse_usize(s: &str, name: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::Format(format!("bad index in section name {name}")))
}

fn parse_ffn(s: &str, name: &str) -> Result<FfnMat> {
    match s {
        "Wi" => Ok(FfnMat::Wi),
        "Wo" => Ok(FfnMat::Wo),
        _ => Err(Error::Format(format!("bad FFN matrix in section name {name}"))),
    }
}

fn parse_factor(s: &str, name: &str) -> Result<Factor> {
    match s {
        "A" => Ok(Factor::A),
        "B" => Ok(Factor::B),
        _ => Err(Error::Format(format!("bad factor in section name {name}"))),
    }
}

/// Inverse of `ParamId`'s `Display`.
pub fn parse_param_id(name: &str) -> Result<ParamId> {
    let parts: Vec<&str> = name.split('/').collect();
    let bad = || Error::Format(format!("unknown section {name}"));
    let id = match parts.as_slice() {
        ["backbone", "tok_emb"] => ParamId::TokEmb,
        ["backbone", "pos_emb"] => ParamId::PosEmb,
        ["backbone", "lm_head"] => ParamId::LmHead,
        ["backbone", "ln_f", "gain"] => ParamId::FinalLnGain,
        ["backbone", "ln_f", "bias"] => ParamId::FinalLnBias,
        ["backbone", l, ln @ ("ln1" | "ln2"), which @ ("gain" | "bias")] => {
            let l = parse_usize(l, name)?;
            let slot = if *ln == "ln1" { LnSlot::Ln1 } else { LnSlot::Ln2 };
            if *which == "gain" {
                ParamId::LnGain(l, slot)
            } else {
                ParamId::LnBias(l, slot)
            }
        }
        ["backbone", l, "attn", w] => {
            let m = match *w {
                "wq" => AttnMat::Q,
                "wk" => AttnMat::K,
                "wv" => AttnMat::V,
                "wo" => AttnMat::O,
                _ => return Err(bad()),
            };
            ParamId::Attn(parse_usize(l, name)?, m)
        }
        ["backbone", l, "ffn", m] => ParamId::Ffn(parse_usize(l, name)?, parse_ffn(m, name)?),
        ["prompts", "P"] => ParamId::Prompts,
        ["expert", k, l, m, f] => ParamId::Expert {
            domain: parse_usize(k, name)?,
            layer: parse_usize(l, name)?,
            mat: parse_ffn(m, name)?,
            factor: parse_factor(f, name)?,
        },
        ["common", l, m, f] => ParamId::Common {
            layer: parse_usize(l, name)?,
            mat: parse_ffn(m, name)?,
            factor: parse_factor(f, name)?,
        },
        _ => return Err(bad()),
    };
    if id.to_string() != name {
        return Err(bad());
    }
    Ok(id)
}

/// SHA-256 over the named parameters selected by `filter`, in canonical order.
pub fn params_hash<T: Float>(model: &Model<T>, filter: impl Fn(&ParamId) -> bool) -> String {
    let mut h = Sha256::new();
    for (id, m) in model.params() {
        if !filter(&id) {
            continue;
        }
        h.update(id.to_string().as_bytes());
        for v in m.as_slice() {
            h.update(v.to_f64_lossy().to_le_bytes());
        }
    }
    crate::seed::hex(&h.finalize())
}

pub fn backbone_hash<T: Float>(model: &Model<T>) -> String {
    params_hash(model, ParamId::is_backbone)
}

pub fn prompts_hash<T: Float>(model: &Model<T>) -> String {
    params_hash(model, |id| *id == ParamId::Prompts)
}

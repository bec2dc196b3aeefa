//! Single-file pipeline checkpoint: magic, JSON manifest, then a payload of
//! little-endian `f32` parameter blocks.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{ParamStore, Tensor2};
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::evalkit::extractor::FeatureExtractor;
use crate::motion::{NormStats, Skeleton};
use crate::pipeline::{LatentNorm, PipelineConfig, Stack, Stage, StageLogs};
use crate::projector::Projector;
use crate::textenc::Vocabulary;
use crate::vae::VaeModel;

pub const MAGIC: &[u8; 8] = b"LATMOCK\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset into the payload, in bytes.
    pub offset: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageFlags {
    pub vae: bool,
    pub diffusion: bool,
    pub projector: bool,
    pub extractor: bool,
}

impl StageFlags {
    fn of(stack: &Stack) -> Self {
        Self {
            vae: stack.has(Stage::Vae),
            diffusion: stack.has(Stage::Diffusion),
            projector: stack.has(Stage::Projector),
            extractor: stack.has(Stage::Extractor),
        }
    }

    pub fn get(&self, stage: Stage) -> bool {
        match stage {
            Stage::Vae => self.vae,
            Stage::Diffusion => self.diffusion,
            Stage::Projector => self.projector,
            Stage::Extractor => self.extractor,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub corpus_seed: u64,
    pub stages: StageFlags,
    pub config: PipelineConfig,
    pub words: Vec<String>,
    pub blocks: Vec<BlockEntry>,
    pub logs: StageLogs,
}

const TEXT_TABLE: &str = "text.table";
const NORM_MEAN: &str = "norm.mean";
const NORM_STD: &str = "norm.std";
const LATENT_MEAN: &str = "latent_norm.mean";
const LATENT_STD: &str = "latent_norm.std";

fn block_bytes(t: &Tensor2) -> Vec<u8> {
    t.data().iter().flat_map(|&x| (x as f32).to_le_bytes()).collect()
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Writer {
    blocks: Vec<BlockEntry>,
    payload: Vec<u8>,
}

impl Writer {
    fn push(&mut self, name: &str, t: &Tensor2) -> Result<()> {
        if let Some(x) = t.data().iter().find(|x| (**x as f32) as f64 != **x) {
            return Err(Error::Checkpoint(format!(
                "block `{name}` holds {x}, which is not representable at storage precision"
            )));
        }
        let bytes = block_bytes(t);
        self.blocks.push(BlockEntry {
            name: name.to_string(),
            rows: t.rows(),
            cols: t.cols(),
            offset: self.payload.len(),
            sha256: sha_hex(&bytes),
        });
        self.payload.extend_from_slice(&bytes);
        Ok(())
    }

    fn push_store(&mut self, store: &ParamStore) -> Result<()> {
        for b in store.blocks() {
            self.push(&b.name, &b.value)?;
        }
        Ok(())
    }
}

/// Serializes the whole stack.
pub fn to_bytes(stack: &Stack) -> Result<Vec<u8>> {
    let mut w = Writer {
        blocks: Vec::new(),
        payload: Vec::new(),
    };
    w.push(TEXT_TABLE, stack.vocab.table())?;
    w.push(NORM_MEAN, &Tensor2::row_vector(stack.norm.mean.clone()))?;
    w.push(NORM_STD, &Tensor2::row_vector(stack.norm.std.clone()))?;
    if let Some(v) = &stack.vae {
        w.push_store(&v.params)?;
    }
    if let (Some(d), Some(n)) = (&stack.denoiser, &stack.latent_norm) {
        w.push(LATENT_MEAN, &Tensor2::row_vector(n.mean.clone()))?;
        w.push(LATENT_STD, &Tensor2::row_vector(n.std.clone()))?;
        w.push_store(&d.params)?;
    }
    if let Some(p) = &stack.projector {
        w.push_store(&p.params)?;
    }
    if let Some(e) = &stack.extractor {
        w.push_store(&e.params)?;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        corpus_seed: stack.config.corpus_seed,
        stages: StageFlags::of(stack),
        config: stack.config.clone(),
        words: stack.vocab.words().to_vec(),
        blocks: w.blocks,
        logs: stack.logs.clone(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + w.payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.payload);
    Ok(out)
}

pub fn save(stack: &Stack, path: &Path) -> Result<()> {
    let bytes = to_bytes(stack)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Splits a checkpoint into its manifest and payload.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a latmo checkpoint (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..end])?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok((manifest, &bytes[end..]))
}

struct Reader<'a> {
    manifest: &'a Manifest,
    payload: &'a [u8],
}

impl Reader<'_> {
    fn block(&self, name: &str) -> Result<Tensor2> {
        let e = self
            .manifest
            .blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing block `{name}`")))?;
        let n = e.rows * e.cols * 4;
        let bytes = e
            .offset
            .checked_add(n)
            .and_then(|end| self.payload.get(e.offset..end))
            .ok_or_else(|| Error::Checkpoint(format!("block `{name}` runs past the payload")))?;
        if sha_hex(bytes) != e.sha256 {
            return Err(Error::Checkpoint(format!("hash mismatch in block `{name}`")));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Tensor2::new(e.rows, e.cols, data)
    }

    fn row(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.block(name)?.into_data())
    }

    fn fill(&self, store: &mut ParamStore) -> Result<()> {
        let mut src = ParamStore::new();
        for b in store.blocks() {
            src.add(b.name.clone(), self.block(&b.name)?);
        }
        store.load_from(&src)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Stack> {
    let (manifest, payload) = read_manifest(bytes)?;
    let r = Reader {
        manifest: &manifest,
        payload,
    };
    let flags = &manifest.stages;
    for st in Stage::ALL {
        if flags.get(st) {
            if let Some(p) = st.prerequisites().iter().find(|p| !flags.get(**p)) {
                return Err(Error::Checkpoint(format!(
                    "stage `{}` is present without its prerequisite `{}`",
                    st.name(),
                    p.name()
                )));
            }
        }
    }
    let config = manifest.config.clone();
    let schedule = config.schedule.build()?;
    let vocab = Vocabulary::from_parts(manifest.words.clone(), r.block(TEXT_TABLE)?)?;
    let norm = NormStats {
        mean: r.row(NORM_MEAN)?,
        std: r.row(NORM_STD)?,
    };
    let vae = if flags.vae {
        let mut m = VaeModel::new(config.vae.clone(), config.seed)?;
        r.fill(&mut m.params)?;
        Some(m)
    } else {
        None
    };
    let (denoiser, latent_norm) = if flags.diffusion {
        let mut d = Denoiser::new(config.denoiser.clone(), &schedule, config.seed)?;
        r.fill(&mut d.params)?;
        let n = LatentNorm {
            mean: r.row(LATENT_MEAN)?,
            std: r.row(LATENT_STD)?,
        };
        (Some(d), Some(n))
    } else {
        (None, None)
    };
    let projector = if flags.projector {
        let mut p = Projector::new(config.projector.clone(), config.seed)?;
        r.fill(&mut p.params)?;
        Some(p)
    } else {
        None
    };
    let extractor = if flags.extractor {
        let mut e = FeatureExtractor::new(config.extractor.clone(), config.seed)?;
        r.fill(&mut e.params)?;
        Some(e)
    } else {
        None
    };
    Ok(Stack {
        schedule,
        skeleton: Skeleton::default_seven(),
        config,
        vocab,
        norm,
        vae,
        latent_norm,
        denoiser,
        projector,
        extractor,
        logs: manifest.logs,
    })
}

pub fn load(path: &Path) -> Result<Stack> {
    from_bytes(&std::fs::read(path)?)
}

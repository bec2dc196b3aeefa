//! Plain `key = value` run configuration over [`PipelineConfig`], with
//! `LATMO_` environment overrides.
//!
//! Keys are the dotted field paths (`projector_train.lr`). Environment
//! variables use the upper-cased key with `.` replaced by `__`, for example
//! `LATMO_PROJECTOR_TRAIN__LR=3e-4`, and take precedence over the file.

use std::collections::BTreeMap;

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;

pub const ENV_PREFIX: &str = "LATMO_";

/// Every settable key with its meaning.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("corpus_seed", "seed for corpus synthesis and the train/test split"),
    ("seed", "seed for initialization, batching, noise and dropout"),
    ("text_dim", "word-embedding and caption-embedding size"),
    ("guidance", "classifier-free guidance scale at generation"),
    ("sampler", "ddim_deterministic or ddpm_ancestral"),
    ("corpus.fps", "frame rate of synthesized motions"),
    ("corpus.jitter", "relative per-item jitter of action parameters"),
    ("corpus.min_len", "shortest motion, in poses"),
    ("corpus.max_len", "longest motion, in poses"),
    ("corpus.train_items", "training motions"),
    ("corpus.test_items", "held-out motions"),
    ("corpus.vocab_bound", "maximum caption vocabulary size"),
    ("vae.latent_dim", "VAE latent size"),
    ("vae.patch_frames", "frames per VAE token"),
    ("vae.layers", "transformer layers in the VAE encoder and decoder"),
    ("vae.heads", "attention heads in the VAE"),
    ("vae.hidden_dim", "VAE model width"),
    ("vae.dropout", "VAE dropout rate"),
    ("vae_train.epochs", "VAE training epochs"),
    ("vae_train.batch_size", "VAE minibatch size"),
    ("vae_train.lr", "VAE learning rate"),
    ("vae_train.weight_decay", "VAE AdamW weight decay"),
    ("vae_train.kl_weight", "weight of the VAE KL term"),
    ("schedule.steps", "diffusion steps T"),
    ("schedule.beta_start", "first noise variance of the linear schedule"),
    ("schedule.beta_end", "last noise variance of the linear schedule"),
    ("schedule.inference_steps", "evenly spaced steps used when sampling"),
    ("denoiser.layers", "denoiser transformer layers"),
    ("denoiser.heads", "denoiser attention heads"),
    ("denoiser.hidden_dim", "denoiser model width"),
    ("denoiser.dropout", "denoiser dropout rate"),
    ("denoiser.prior_skip", "add the standard-normal noise estimate to the network output"),
    ("diffusion_train.epochs", "denoiser training epochs"),
    ("diffusion_train.batch_size", "denoiser minibatch size"),
    ("diffusion_train.lr", "denoiser learning rate"),
    ("diffusion_train.weight_decay", "denoiser AdamW weight decay"),
    ("diffusion_train.cond_dropout", "probability of training a row unconditionally"),
    ("projector.layers", "residual blocks in each projector half"),
    ("projector.heads", "projector attention heads"),
    ("projector.hidden_dim", "projector model width"),
    ("projector.dropout", "projector dropout rate during training"),
    ("projector_train.epochs", "projector training epochs"),
    ("projector_train.batch_size", "projector minibatch size"),
    ("projector_train.lr", "projector learning rate"),
    ("projector_train.weight_decay", "projector AdamW weight decay"),
    ("projector_train.cosine_decay", "anneal the projector learning rate along a half cosine"),
    ("projector_train.lambda_align", "weight of the caption alignment loss"),
    ("projector_train.lambda_rec", "weight of the latent reconstruction loss"),
    ("projector_train.lambda_var", "weight of the batch distribution loss"),
    ("projector_train.ablation", "removed loss terms: [\"noALIGN\", \"noREC\", \"noKL\"]"),
    ("extractor.out_dim", "evaluation feature size"),
    ("extractor.patch_frames", "frames per extractor token"),
    ("extractor.layers", "extractor transformer layers"),
    ("extractor.heads", "extractor attention heads"),
    ("extractor.hidden_dim", "extractor model width"),
    ("extractor_train.epochs", "extractor training epochs"),
    ("extractor_train.batch_size", "extractor minibatch size"),
    ("extractor_train.lr", "extractor learning rate"),
    ("extractor_train.weight_decay", "extractor AdamW weight decay"),
    ("extractor_train.temperature", "contrastive softmax temperature"),
];

/// Keys fixed by other settings; they appear in checkpoints but cannot be set.
pub const DERIVED_KEYS: &[&str] = &[
    "vae.feature_dim",
    "vae.min_frames",
    "vae.max_frames",
    "denoiser.latent_dim",
    "denoiser.cond_dim",
    "projector.latent_dim",
    "projector.embed_dim",
    "extractor.feature_dim",
    "extractor.text_dim",
    "extractor.max_frames",
];

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

pub fn flat_values(cfg: &PipelineConfig) -> Result<BTreeMap<String, Value>> {
    let mut out = BTreeMap::new();
    flatten("", &serde_json::to_value(cfg)?, &mut out);
    Ok(out)
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Parse(format!("`{key}` is not a configuration key")))?;
        if i + 1 == parts.len() {
            obj.insert(p.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

/// Reads a raw value: JSON when it parses (numbers, booleans, arrays, quoted
/// strings), a bare string otherwise.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn check_key(key: &str) -> Result<()> {
    if DERIVED_KEYS.contains(&key) {
        return Err(Error::Parse(format!("`{key}` is derived from other settings and cannot be set")));
    }
    if !KEY_DOCS.iter().any(|(k, _)| *k == key) {
        return Err(Error::Parse(format!("unknown configuration key `{key}`")));
    }
    Ok(())
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_assignments(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.replace('.', "__").to_uppercase())
}

/// Assignments from `LATMO_*` variables in `vars`.
pub fn env_assignments(vars: impl IntoIterator<Item = (String, String)>) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (name, value) in vars {
        if let Some(rest) = name.strip_prefix(ENV_PREFIX) {
            out.push((rest.to_lowercase().replace("__", "."), value));
        }
    }
    out.sort();
    Ok(out)
}

/// Applies assignments in order on top of `base`.
pub fn apply(base: &PipelineConfig, assignments: &[(String, String)]) -> Result<PipelineConfig> {
    let mut v = serde_json::to_value(base)?;
    for (k, raw) in assignments {
        check_key(k)?;
        set_path(&mut v, k, parse_value(raw))?;
    }
    let mut cfg: PipelineConfig =
        serde_json::from_value(v).map_err(|e| Error::Parse(format!("invalid configuration: {e}")))?;
    cfg.sync_dims();
    cfg.validate()?;
    Ok(cfg)
}

/// Defaults, then the file (when given), then the environment.
pub fn load(file_text: Option<&str>, env: impl IntoIterator<Item = (String, String)>) -> Result<PipelineConfig> {
    let mut all = match file_text {
        Some(t) => parse_assignments(t)?,
        None => Vec::new(),
    };
    all.extend(env_assignments(env)?);
    apply(&PipelineConfig::default(), &all)
}

/// The default configuration as a commented file.
pub fn defaults_file() -> Result<String> {
    let vals = flat_values(&PipelineConfig::default())?;
    let mut out = String::from(
        "# latmo run configuration. Every key is optional.\n\
         # Environment variables override this file: LATMO_<KEY> with `.` written as `__`.\n",
    );
    let mut section = "";
    for (k, doc) in KEY_DOCS {
        let sec = k.split_once('.').map(|(s, _)| s).unwrap_or("");
        if sec != section {
            out.push('\n');
            section = sec;
        }
        out.push_str(&format!("# {doc}\n{k} = {}\n", vals[*k]));
    }
    Ok(out)
}

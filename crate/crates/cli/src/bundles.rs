//! Bundle layouts used by the commands: motion, music, tokens, features and
//! model parameters with their configuration.

use std::path::Path;

use chorekit::io::TensorBundle;
use chorekit::nn::tokenizer::{Tokenizer, TokenizerConfig};
use chorekit::nn::ParamStore;
use chorekit::retrieval::{DualEncoder, RetrievalConfig};
use chorekit::seqgen::{HybridConfig, HybridModel};
use chorekit::{Error, Real, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// `[N, steps, dim]` music features, one row per token step.
pub const MUSIC_ENTRY: &str = "music";
/// Model configuration as UTF-8 JSON bytes, one byte per i64.
pub const CONFIG_ENTRY: &str = "config";

pub fn load(path: &Path) -> Result<TensorBundle> {
    TensorBundle::load(path)
}

pub fn save(bundle: &TensorBundle, path: &Path) -> Result<()> {
    bundle.save(path).map(|_| ())
}

/// Music sequences sharing one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Music {
    pub steps: usize,
    pub dim: usize,
    pub seqs: Vec<Vec<f64>>,
}

pub fn music_to_bundle(music: &Music, bundle: &mut TensorBundle) -> Result<()> {
    let data: Vec<f32> = music.seqs.iter().flatten().map(|&v| v as f32).collect();
    bundle.push_f32(MUSIC_ENTRY, &[music.seqs.len(), music.steps, music.dim], &data)
}

pub fn music_from_bundle(bundle: &TensorBundle) -> Result<Music> {
    let (shape, data) = bundle.f32(MUSIC_ENTRY)?;
    let (n, steps, dim) = match shape.as_slice() {
        [t, d] => (1, *t, *d),
        [n, t, d] => (*n, *t, *d),
        s => return Err(Error::Format(format!("`{MUSIC_ENTRY}` must be rank 2 or 3, got {s:?}"))),
    };
    if steps == 0 || dim == 0 {
        return Err(Error::Format(format!("`{MUSIC_ENTRY}` has an empty dimension: {shape:?}")));
    }
    let seqs = data.chunks_exact(steps * dim).take(n).map(|c| c.iter().map(|&v| v as f64).collect()).collect();
    Ok(Music { steps, dim, seqs })
}

#[derive(Serialize, Deserialize)]
struct Tagged<C> {
    kind: String,
    config: C,
}

fn put_config<C: Serialize>(bundle: &mut TensorBundle, kind: &str, config: &C) -> Result<()> {
    let json = serde_json::to_vec(&Tagged { kind: kind.to_string(), config })
        .map_err(|e| Error::Format(format!("serializing {kind} config: {e}")))?;
    let bytes: Vec<i64> = json.into_iter().map(i64::from).collect();
    bundle.push_i64(CONFIG_ENTRY, &[bytes.len()], &bytes)
}

fn get_config<C: DeserializeOwned>(bundle: &TensorBundle, kind: &str) -> Result<C> {
    let (_, raw) = bundle.i64(CONFIG_ENTRY)?;
    let bytes: Vec<u8> = raw
        .into_iter()
        .map(|b| u8::try_from(b).map_err(|_| Error::Format(format!("`{CONFIG_ENTRY}` holds a non-byte value {b}"))))
        .collect::<Result<_>>()?;
    let tagged: Tagged<serde_json::Value> = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Format(format!("`{CONFIG_ENTRY}` is not valid JSON: {e}")))?;
    if tagged.kind != kind {
        return Err(Error::Invalid(format!("parameter bundle holds a {} model, expected {kind}", tagged.kind)));
    }
    serde_json::from_value(tagged.config).map_err(|e| Error::Format(format!("bad {kind} config: {e}")))
}

fn params_bundle<T: Real, C: Serialize>(params: &ParamStore<T>, kind: &str, config: &C) -> Result<TensorBundle> {
    let mut b = params.to_bundle()?;
    put_config(&mut b, kind, config)?;
    Ok(b)
}

pub fn tokenizer_bundle(tok: &Tokenizer<f32>) -> Result<TensorBundle> {
    params_bundle(&tok.params, "tokenizer", &tok.cfg)
}

pub fn load_tokenizer(path: &Path) -> Result<Tokenizer<f32>> {
    let b = load(path)?;
    let cfg: TokenizerConfig = get_config(&b, "tokenizer")?;
    let mut tok = Tokenizer::new(cfg, 0)?;
    tok.params.load_bundle(&b)?;
    Ok(tok)
}

pub fn generator_bundle(model: &HybridModel<f32>) -> Result<TensorBundle> {
    params_bundle(&model.params, "generator", &model.cfg)
}

pub fn load_generator(path: &Path) -> Result<HybridModel<f32>> {
    let b = load(path)?;
    let cfg: HybridConfig = get_config(&b, "generator")?;
    let mut model = HybridModel::new(cfg, 0)?;
    model.params.load_bundle(&b)?;
    Ok(model)
}

pub fn encoder_bundle(enc: &DualEncoder<f32>) -> Result<TensorBundle> {
    params_bundle(&enc.params, "retrieval", &enc.cfg)
}

pub fn load_encoder(path: &Path) -> Result<DualEncoder<f32>> {
    let b = load(path)?;
    let cfg: RetrievalConfig = get_config(&b, "retrieval")?;
    let mut enc = DualEncoder::new(cfg, 0)?;
    enc.params.load_bundle(&b)?;
    Ok(enc)
}

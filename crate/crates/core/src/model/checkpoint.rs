//! On-disk checkpoint: a directory holding a text `manifest` of
//! `key = value` lines and `params.bin`, the parameter arrays as raw
//! little-endian `f32` in the order listed by the manifest's `arrays` key.

use std::fs;
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

use super::{ModelConfig, ModelParams};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const MANIFEST_FILE: &str = "manifest";
const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    /// Environment steps consumed when the checkpoint was written.
    pub timesteps: u64,
}

impl CheckpointManifest {
    fn render(&self) -> String {
        let arrays: Vec<String> = ModelParams::layout(&self.config)
            .into_iter()
            .map(|(name, shape)| {
                let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
                format!("{name}:{}", dims.join("x"))
            })
            .collect();
        format!(
            "format_version = {}\nlength = {}\nembed_dim = {}\nlayers = {}\nseed = {}\ntimesteps = {}\narrays = {}\n",
            self.format_version,
            self.config.length,
            self.config.embed_dim,
            self.config.num_layers,
            self.seed,
            self.timesteps,
            arrays.join(" "),
        )
    }

    fn parse(text: &str) -> Result<(Self, String)> {
        let mut fields = std::collections::HashMap::new();
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad manifest line {line:?}")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |key: &str| {
            fields
                .get(key)
                .ok_or_else(|| Error::Checkpoint(format!("manifest is missing {key:?}")))
        };
        let num = |key: &str| -> Result<u64> {
            get(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("manifest key {key:?} is not an integer")))
        };
        let format_version = num("format_version")? as u32;
        if format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Version(format!(
                "checkpoint format {format_version}, this build reads {CHECKPOINT_FORMAT_VERSION}"
            )));
        }
        let manifest = Self {
            format_version,
            config: ModelConfig {
                length: num("length")? as usize,
                embed_dim: num("embed_dim")? as usize,
                num_layers: num("layers")? as usize,
            },
            seed: num("seed")?,
            timesteps: num("timesteps")?,
        };
        Ok((manifest, get("arrays")?.clone()))
    }
}

pub fn save_checkpoint(dir: &Path, params: &ModelParams, seed: u64, timesteps: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: params.config,
        seed,
        timesteps,
    };
    let mut bytes = Vec::new();
    for (_, t) in params.named_tensors() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    // params first: a manifest only exists next to a complete array file
    fs::write(dir.join(PARAMS_FILE), bytes)?;
    fs::write(dir.join(MANIFEST_FILE), manifest.render())?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, CheckpointManifest)> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let (manifest, arrays) = CheckpointManifest::parse(&text)?;
    manifest
        .config
        .validate()
        .map_err(|e| Error::Version(format!("manifest describes an unsupported model: {e}")))?;
    let expected = manifest.render();
    let expected_arrays = expected
        .lines()
        .find_map(|l| l.strip_prefix("arrays = "))
        .unwrap_or_default();
    if arrays != expected_arrays {
        return Err(Error::Version(format!(
            "array layout {arrays:?} does not match {expected_arrays:?}"
        )));
    }

    let bytes = fs::read(dir.join(PARAMS_FILE))?;
    let layout = ModelParams::layout(&manifest.config);
    let total: usize = layout
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    if bytes.len() != total * 4 {
        return Err(Error::Checkpoint(format!(
            "{PARAMS_FILE} holds {} bytes, manifest needs {}",
            bytes.len(),
            total * 4
        )));
    }
    let mut values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let tensors = layout
        .into_iter()
        .map(|(_, shape)| {
            let n = shape.iter().product();
            Tensor::new(shape, values.by_ref().take(n).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let params = ModelParams::from_tensors(manifest.config, tensors)?;
    if !params.is_finite() {
        return Err(Error::Checkpoint("non-finite parameter values".into()));
    }
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn params() -> ModelParams {
        let cfg = ModelConfig {
            num_layers: 2,
            ..ModelConfig::new(4, 6)
        };
        ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = std::env::temp_dir().join(format!("permsort-ckpt-{}", std::process::id()));
        let p = params();
        save_checkpoint(&dir, &p, 3, 1024).unwrap();
        let (q, manifest) = load_checkpoint(&dir).unwrap();
        assert_eq!(p, q);
        assert_eq!(manifest.seed, 3);
        assert_eq!(manifest.timesteps, 1024);
        let text = fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap();
        assert!(text.contains("arrays = token_embed:4x6 position_embed:4x6 layer0.query:6x6"));
        assert_eq!(
            fs::metadata(dir.join(PARAMS_FILE)).unwrap().len(),
            4 * (24 * 2 + 36 * 6 + 18 + 3 + 6 + 1)
        );
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn version_and_layout_mismatch() {
        let dir = std::env::temp_dir().join(format!("permsort-ckpt-v-{}", std::process::id()));
        save_checkpoint(&dir, &params(), 0, 0).unwrap();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();

        fs::write(
            &path,
            text.replace("format_version = 1", "format_version = 2"),
        )
        .unwrap();
        assert!(matches!(load_checkpoint(&dir), Err(Error::Version(_))));

        fs::write(&path, text.replace("embed_dim = 6", "embed_dim = 8")).unwrap();
        assert!(matches!(load_checkpoint(&dir), Err(Error::Version(_))));

        fs::write(&path, &text).unwrap();
        fs::write(dir.join(PARAMS_FILE), [0u8; 12]).unwrap();
        assert!(matches!(load_checkpoint(&dir), Err(Error::Checkpoint(_))));
        fs::remove_dir_all(dir).unwrap();
    }
}

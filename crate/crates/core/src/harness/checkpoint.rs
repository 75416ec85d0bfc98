//! Checkpoint container: a JSON header (config snapshot, epoch, rng
//! position) followed by the parameter and optimizer blobs. Parameters are
//! stored as f64, so an f32 model round-trips bitwise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng as _;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::model::Model;
use crate::nn::Adam;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"TPCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    epoch: usize,
    rng_seed_hex: String,
    rng_stream: u64,
    /// u128 word position, serialized as decimal text for JSON safety.
    rng_word_pos: String,
}

fn rng_to_header_fields(rng: &ChaCha8Rng) -> (String, u64, String) {
    let seed_hex: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    (seed_hex, rng.get_stream(), rng.get_word_pos().to_string())
}

fn rng_from_header(h: &Header) -> Result<ChaCha8Rng> {
    if h.rng_seed_hex.len() != 64 || !h.rng_seed_hex.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(Error::data("checkpoint: malformed rng seed"));
    }
    let mut seed = [0u8; 32];
    for (i, chunk) in h.rng_seed_hex.as_bytes().chunks(2).enumerate() {
        let s = std::str::from_utf8(chunk).expect("hex digits are ascii");
        seed[i] = u8::from_str_radix(s, 16).expect("validated hex");
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(h.rng_stream);
    let pos: u128 = h
        .rng_word_pos
        .parse()
        .map_err(|_| Error::data("checkpoint: malformed rng word position"))?;
    rng.set_word_pos(pos);
    Ok(rng)
}

pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    config: &RunConfig,
    model: &Model<S>,
    adam: &Adam<S>,
    epoch: usize,
    rng: &ChaCha8Rng,
) -> Result<()> {
    let (rng_seed_hex, rng_stream, rng_word_pos) = rng_to_header_fields(rng);
    let header = Header {
        config: config.clone(),
        epoch,
        rng_seed_hex,
        rng_stream,
        rng_word_pos,
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    model.store.write_to(&mut w)?;
    adam.write_state(&mut w)?;
    w.flush()?;
    Ok(())
}

pub struct LoadedCheckpoint<S: Scalar> {
    pub config: RunConfig,
    pub model: Model<S>,
    pub adam: Adam<S>,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<LoadedCheckpoint<S>> {
    let mut r = BufReader::new(
        File::open(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::data(format!("{}: not a checkpoint file", path.display())));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(Error::data(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    r.read_exact(&mut buf4)?;
    let header_len = u32::from_le_bytes(buf4) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::data(format!("{}: bad checkpoint header: {e}", path.display())))?;
    header.config.validate()?;

    let mut model = Model::<S>::new(header.config.model.clone(), header.config.seed)?;
    model.store.read_into(&mut r)?;
    let mut adam = Adam::new(&model.store);
    adam.read_state(&mut r)?;
    let rng = rng_from_header(&header)?;
    Ok(LoadedCheckpoint {
        config: header.config,
        model,
        adam,
        epoch: header.epoch,
        rng,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::built_in_templates;
    use crate::embed::toy_text_matrix;
    use crate::model::{ImageInput, TextInput};
    use crate::posegraph::build_adjacency;
    use ndarray::Array2;
    use rand::Rng as _;

    fn small_run_config() -> RunConfig {
        let mut cfg = RunConfig::desk_preset();
        cfg.model.capacity = 10;
        cfg.model.model_dim = 16;
        cfg.model.text_dim = 16;
        cfg.model.image_dim = 16;
        cfg.model.patch = 4;
        cfg.model.encoder.model_dim = 16;
        cfg.model.encoder.num_blocks = 1;
        cfg.model.encoder.num_heads = 2;
        cfg.model.decoder.model_dim = 16;
        cfg.model.decoder.num_layers = 1;
        cfg.model.decoder.num_heads = 2;
        cfg.seed = 9;
        cfg
    }

    #[test]
    fn round_trip_reproduces_identical_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_run_config();
        let model = Model::<f32>::new(cfg.model.clone(), cfg.seed).unwrap();
        let adam = Adam::new(&model.store);
        let mut rng = crate::nn::seeded_rng(3);
        let _: u64 = rng.gen();

        let path = dir.path().join("ckpt.tpck");
        save_checkpoint(&path, &cfg, &model, &adam, 7, &rng).unwrap();
        let loaded = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded.epoch, 7);
        assert_eq!(loaded.rng, rng);
        assert_eq!(loaded.config.optim.epochs, cfg.optim.epochs);

        let graph = built_in_templates()[3].posegraph().unwrap();
        let text = toy_text_matrix(&graph.descriptions(), 16, cfg.model.text_seed).unwrap();
        let adj = build_adjacency(&graph, 10).unwrap();
        let mut irng = crate::nn::seeded_rng(4);
        let img = Array2::from_shape_fn((16, 16), |_| irng.gen_range(0.0..1.0));
        let patches = crate::embed::patch_matrix(&img, 4).unwrap().0;

        let a = model
            .predict(
                &TextInput::Raw(text.clone()),
                &ImageInput::Patches(patches.clone()),
                4,
                4,
                &adj,
                false,
            )
            .unwrap();
        let b = loaded
            .model
            .predict(&TextInput::Raw(text), &ImageInput::Patches(patches), 4, 4, &adj, false)
            .unwrap();
        assert_eq!(a.coords(), b.coords());
        for (x, y) in a.scores.scores.iter().zip(b.scores.scores.iter()) {
            assert_eq!(x, y, "similarity scores must reload bitwise");
        }
    }

    #[test]
    fn frozen_flags_survive_the_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_run_config();
        let model = Model::<f32>::new(cfg.model.clone(), cfg.seed).unwrap();
        assert!(model.store.is_frozen(model.params.text_head));
        let adam = Adam::new(&model.store);
        let rng = crate::nn::seeded_rng(0);
        let path = dir.path().join("ckpt.tpck");
        save_checkpoint(&path, &cfg, &model, &adam, 0, &rng).unwrap();
        let loaded = load_checkpoint::<f32>(&path).unwrap();
        assert!(loaded.model.store.is_frozen(loaded.model.params.text_head));
    }

    #[test]
    fn truncated_files_fail_with_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_run_config();
        let model = Model::<f32>::new(cfg.model.clone(), cfg.seed).unwrap();
        let adam = Adam::new(&model.store);
        let rng = crate::nn::seeded_rng(0);
        let path = dir.path().join("ckpt.tpck");
        save_checkpoint(&path, &cfg, &model, &adam, 0, &rng).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.tpck");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint::<f32>(&cut).err().expect("truncated checkpoint must fail");
        assert_eq!(err.exit_code(), 2);
    }
}

//! Saves a trained stack and its memory, reloads it and checks that stored samples
//! decode to the same pixels.

use aqm::streamio::checkpoint;
use aqm::trainer::{apply_overrides, RunConfig, Session};

fn main() -> aqm::Result<()> {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/default.toml"))?;
    let cfg: RunConfig = apply_overrides(&text, &["stream.samples_per_class=200".into()])?;
    let (_, stack, memory, _) = Session::new(cfg)?.finish_with_state()?;

    let dir = std::env::temp_dir().join("aqm-checkpoint-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("checkpoint.aqmc");
    checkpoint::save(&stack, &memory, &path)?;
    let (stack2, memory2) = checkpoint::load(&path)?;

    let a = memory.decode_ids(&memory.ids(), &stack)?;
    let b = memory2.decode_ids(&memory2.ids(), &stack2)?;
    let same = a.iter().zip(&b).all(|(p, q)| p.x == q.x && p.label == q.label);
    println!("{} bytes on disk, model {} bytes, {} entries", std::fs::metadata(&path)?.len(), stack.model_bytes(), memory.len());
    println!("entries per level {:?}; reconstructions identical after reload: {same}", memory2.level_counts(stack2.num_levels()));
    Ok(())
}

//! Save a training checkpoint, inspect it, and resume from it.
//!
//! cargo run --release --example checkpoint_io

use srl_adapt::encoders::{planted_pair_generator, FrameStore, PlantedConfig, TextConfig};
use srl_adapt::numerics::Checkpoint;
use srl_adapt::trainer::{TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    let planted = planted_pair_generator(
        &PlantedConfig {
            videos: 8,
            ..PlantedConfig::default()
        },
        &TextConfig::default(),
        2,
    );
    let frames = FrameStore::packed(planted.frames.clone(), planted.config.tokens, planted.config.input_dim);
    let config = TrainConfig {
        epochs: 2,
        lr: 2e-3,
        batch_videos: 4,
        lora_rank: 4,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir()?;

    let mut trainer = Trainer::<f32>::new(&planted.dataset, &frames, TrainConfig { epochs: 1, ..config.clone() })?;
    trainer.run(Some(dir.path()))?;
    let path = dir.path().join("ckpt_epoch1.fgckpt");
    let ckpt = Checkpoint::load(&path)?;
    println!("{} ({} bytes, {} tensors)", path.display(), std::fs::metadata(&path)?.len(), ckpt.entries.len());
    // Frozen weights are stored too; show the rest.
    let frozen = |n: &str| (n.starts_with("backbone.") || n.starts_with("text.")) && !n.contains(".lora.");
    let rest: Vec<_> = ckpt.entries.iter().filter(|(n, _)| !frozen(n)).collect();
    println!("  {} frozen tensors, {} others, e.g.", ckpt.entries.len() - rest.len(), rest.len());
    for (name, t) in rest.iter().step_by(rest.len() / 10 + 1).chain(rest.last()) {
        println!("  {name:<44} {:?}", t.shape());
    }

    let mut resumed = Trainer::<f32>::resume(&planted.dataset, &frames, config, &ckpt)?;
    println!("resumed at epoch {}, step {}", resumed.epochs_done, resumed.global_step);
    resumed.run(None)?;
    println!("epoch 2 loss {:.4}", resumed.outcome.epoch_losses[0]);
    Ok(())
}

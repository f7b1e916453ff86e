//! Train with LoRA ranks 1..64 on planted data and report final losses and
//! held-in retrieval. Nothing is asserted.
//!
//! cargo run --release --example rank_sweep -- [epochs]

use srl_adapt::encoders::{planted_pair_generator, FrameStore, PlantedConfig};
use srl_adapt::evaluation::{cosine_matrix, retrieval_metrics, DEFAULT_KS};
use srl_adapt::prompting::PromptStyle;
use srl_adapt::trainer::{TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    let epochs = std::env::args().nth(1).map_or(Ok(10), |s| s.parse())?;
    let base = TrainConfig {
        epochs,
        lr: 2e-3,
        batch_videos: 4,
        ..TrainConfig::default()
    };
    let planted = planted_pair_generator(&PlantedConfig::default(), &base.model.text, 7);
    let frames = FrameStore::packed(planted.frames.clone(), planted.config.tokens, planted.config.input_dim);
    println!("rank  adapter params  first loss  final loss  event R@1");
    for rank in [1, 2, 4, 8, 16, 32, 64] {
        let config = TrainConfig {
            lora_rank: rank,
            ..base.clone()
        };
        let mut trainer = Trainer::<f32>::new(&planted.dataset, &frames, config.clone())?;
        trainer.run(None)?;
        let m = &trainer.model;
        let ev = m.event_embeddings(&planted.dataset, &frames, config.frames_per_event, true)?;
        let et = m.event_text_embeddings(&planted.dataset, PromptStyle::Template)?;
        let r = retrieval_metrics(&cosine_matrix(&ev, &et)?, &DEFAULT_KS)?;
        let losses = &trainer.outcome.epoch_losses;
        println!(
            "{rank:>4}  {:>14}  {:>10.4}  {:>10.4}  {:>8.1}%",
            m.adapter_params(),
            losses[0],
            losses[losses.len() - 1],
            r.recall_at(1).unwrap_or(0.0)
        );
    }
    Ok(())
}

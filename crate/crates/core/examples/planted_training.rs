//! Train adapters and the contextualizer on planted synthetic videos and
//! compare retrieval against the frozen backbone.
//!
//! cargo run --release --example planted_training -- [epochs] [lr] [batch] [seed]

use std::time::Instant;

use srl_adapt::annotations::Dataset;
use srl_adapt::encoders::{planted_pair_generator, FrameStore, PlantedConfig};
use srl_adapt::evaluation::{cosine_matrix, retrieval_metrics, video_retrieval, DEFAULT_KS};
use srl_adapt::prompting::PromptStyle;
use srl_adapt::trainer::{Model, TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).map_or(Ok(20), |s| s.parse())?;
    let lr = args.get(2).map_or(Ok(2e-3), |s| s.parse())?;
    let batch = args.get(3).map_or(Ok(4), |s| s.parse())?;
    let seed = args.get(4).map_or(Ok(0), |s| s.parse())?;

    let config = TrainConfig {
        epochs,
        lr,
        batch_videos: batch,
        seed,
        ..TrainConfig::default()
    };
    // 32 training videos plus 8 held out.
    let planted = planted_pair_generator(
        &PlantedConfig {
            videos: 40,
            ..PlantedConfig::default()
        },
        &config.model.text,
        7,
    );
    let train = Dataset::new(planted.dataset.videos[..32].to_vec(), "train")?;
    let held_out = Dataset::new(planted.dataset.videos[32..].to_vec(), "test")?;
    let frames = FrameStore::packed(planted.frames.clone(), planted.config.tokens, planted.config.input_dim);

    let frozen = Model::<f32>::new(&config)?;
    let t0 = Instant::now();
    let mut trainer = Trainer::<f32>::new(&train, &frames, config.clone())?;
    trainer.run(None)?;
    println!("trained {epochs} epochs in {:.1}s", t0.elapsed().as_secs_f64());
    for (i, l) in trainer.outcome.epoch_losses.iter().enumerate() {
        println!("epoch {i:>2}  loss {l:.4}");
    }
    println!("learned logit scale {:.2}", trainer.model.logit_scale_value());

    for (name, m) in [("frozen", &frozen), ("adapted", &trainer.model)] {
        let et = m.event_text_embeddings(&train, PromptStyle::Template)?;
        let ev = m.event_embeddings(&train, &frames, config.frames_per_event, true)?;
        let held_in = retrieval_metrics(&cosine_matrix(&ev, &et)?, &DEFAULT_KS)?;
        let pooled = m.event_embeddings(&train, &frames, config.frames_per_event, false)?;
        let pooled = retrieval_metrics(&cosine_matrix(&pooled, &et)?, &DEFAULT_KS)?;
        let vids = m.video_embeddings(&held_out, &frames)?;
        let vt = m.video_text_embeddings(&held_out, PromptStyle::Template)?;
        let out = video_retrieval(&vids, &vt, &DEFAULT_KS)?;
        println!(
            "{name:>8}: held-in event R@1 {:.1}% (pooled frames {:.1}%)  held-out video MnR {:.3} R@1 {:.1}%",
            held_in.recall_at(1).unwrap(),
            pooled.recall_at(1).unwrap(),
            out.mean_rank,
            out.recall_at(1).unwrap()
        );
    }
    Ok(())
}

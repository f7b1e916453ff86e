//! Retrieval metrics with the tie rule, on a hand-made similarity matrix and
//! on embeddings from the frozen model.
//!
//! cargo run --release --example retrieval_eval

use srl_adapt::encoders::{planted_pair_generator, FrameStore, PlantedConfig};
use srl_adapt::evaluation::{retrieval_metrics, video_retrieval, DEFAULT_KS};
use srl_adapt::numerics::Tensor;
use srl_adapt::prompting::PromptStyle;
use srl_adapt::trainer::{Model, TrainConfig};

fn main() -> anyhow::Result<()> {
    // Row i is query i; its target is column i.
    let sim = Tensor::new(vec![3, 3], vec![0.9, 0.1, 0.2, 0.5, 0.4, 0.1, 0.2, 0.1, 0.5])?;
    let m = retrieval_metrics(&sim, &[1, 2])?;
    println!("worked example: ranks {:?}  {}", m.ranks, m.summary());

    // Equal scores rank by gallery order: query 1's target loses to column 0.
    let tied = Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.5, 0.5])?;
    println!("all ties:       ranks {:?}", retrieval_metrics(&tied, &[1])?.ranks);

    let config = TrainConfig::default();
    let planted = planted_pair_generator(&PlantedConfig::default(), &config.model.text, 3);
    let frames = FrameStore::packed(planted.frames.clone(), planted.config.tokens, planted.config.input_dim);
    let model = Model::<f32>::new(&config)?;
    let videos = model.video_embeddings(&planted.dataset, &frames)?;
    let texts = model.video_text_embeddings(&planted.dataset, PromptStyle::Template)?;
    let frozen = video_retrieval(&videos, &texts, &DEFAULT_KS)?;
    println!("frozen model, {} planted videos: {}", planted.dataset.videos.len(), frozen.summary());
    Ok(())
}

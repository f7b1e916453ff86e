//! Inject LoRA adapters into the frozen backbone, check that they start as
//! an identity, then fold them into the weights.
//!
//! cargo run --release --example lora_merge

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use srl_adapt::lora::LoraTarget;
use srl_adapt::numerics::Tensor;
use srl_adapt::trainer::{Model, TrainConfig};

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let grids: Vec<Tensor<f32>> = (0..4).map(|_| Tensor::randn(vec![16, 64], 1.0, &mut rng)).collect();
    let frozen = Model::<f32>::new(&TrainConfig {
        lora_targets: Vec::new(),
        ..TrainConfig::default()
    })?;
    let reference = frozen.backbone.encode(&frozen.store, &grids, true)?;

    let config = TrainConfig {
        lora_targets: vec![LoraTarget::Q, LoraTarget::K, LoraTarget::V, LoraTarget::O],
        lora_rank: 8,
        ..TrainConfig::default()
    };
    let mut model = Model::<f32>::new(&config)?;
    println!("adapter parameters: {}", model.adapter_params());
    let start = model.backbone.encode(&model.store, &grids, true)?;
    println!("zero-initialised B: max |adapted - frozen| = {:e}", start.max_abs_diff(&reference));

    // Pretend training moved the B factors.
    let b_ids: Vec<_> = model
        .store
        .iter()
        .filter(|(_, p)| p.name.ends_with(".lora.B"))
        .map(|(id, _)| id)
        .collect();
    for id in b_ids {
        let shape = model.store.tensor(id).shape().to_vec();
        *model.store.tensor_mut(id) = Tensor::randn(shape, 0.05, &mut rng);
    }
    let live = model.backbone.encode(&model.store, &grids, true)?;
    let merged = model.merged()?;
    let folded = merged.backbone.encode(&merged.store, &grids, true)?;
    println!("after updates:      max |adapted - frozen| = {:e}", live.max_abs_diff(&reference));
    println!("merged vs live:     max |merged - adapted| = {:e}", folded.max_abs_diff(&live));
    println!(
        "parameters: {} live, {} merged",
        model.store.len(),
        merged.store.len()
    );
    Ok(())
}

//! Finite differences through the whole trainable path: frames through the
//! frozen backbone with live LoRA adapters, the contextualizer and all loss
//! terms with hard negatives and a learned scale.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use srl_adapt::lora::LoraTarget;
use srl_adapt::losses::{total_loss, video_text_from_events, HardNegatives, LossBatchInputs};
use srl_adapt::numerics::gradcheck::check_params;
use srl_adapt::numerics::Tensor;
use srl_adapt::trainer::{Model, TrainConfig};

fn tiny_config(both_directions: bool, act_p: bool) -> TrainConfig {
    let mut cfg = TrainConfig {
        lora_targets: vec![LoraTarget::Q, LoraTarget::K, LoraTarget::V, LoraTarget::O, LoraTarget::Fc, LoraTarget::Proj],
        lora_rank: 2,
        hn_both_directions: both_directions,
        act_p,
        ..TrainConfig::default()
    };
    let m = &mut cfg.model;
    m.backbone.tokens = 3;
    m.backbone.input_dim = 6;
    m.backbone.dim = 8;
    m.backbone.heads = 2;
    m.backbone.layers = 1;
    m.backbone.mlp_ratio = 2;
    m.text.dim = 8;
    m.text.token_dim = 8;
    m.vc.heads = 2;
    m.vc.layers = 1;
    m.vc.mlp_ratio = 2;
    m.vc.max_events = 3;
    m.vc.max_frames = 3;
    m.vc.embed_std = 0.5;
    cfg
}

fn check(both_directions: bool, act_p: bool, seed: u64) {
    let cfg = tiny_config(both_directions, act_p);
    let mut model = Model::<f64>::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Non-zero B factors so the A factors have a gradient to check.
    let b_ids: Vec<_> = model
        .store
        .iter()
        .filter(|(_, p)| p.name.ends_with(".lora.B"))
        .map(|(id, _)| id)
        .collect();
    for id in b_ids {
        let shape = model.store.tensor(id).shape().to_vec();
        *model.store.tensor_mut(id) = Tensor::randn(shape, 0.3, &mut rng);
    }
    let (b, p, t, h) = (2, 2, 2, 3);
    let grids = Tensor::<f64>::randn(vec![b * p * t, 3, 6], 1.0, &mut rng);
    let text = Tensor::<f64>::randn(vec![b * p, 8], 1.0, &mut rng).l2_normalized_rows();
    let negs = Tensor::<f64>::randn(vec![b * p * h, 8], 1.0, &mut rng).l2_normalized_rows();
    let actions = Tensor::<f64>::randn(vec![b * p, 8], 1.0, &mut rng).l2_normalized_rows();
    let negs = negs.reshape(vec![b * p, h, 8]).unwrap();
    let weights = cfg.loss_weights();
    let ids = model.store.trainable();
    let names: Vec<String> = ids.iter().map(|&id| model.store.get(id).name.clone()).collect();

    let rep = check_params(&model.store, &ids, 1e-5, Some(8), &mut rng, |g, bind| {
        let x = g.constant(grids.clone());
        let f = model.encode_grids(g, bind, x)?;
        let f = g.reshape(f, &[b, p, t, 8])?;
        let vc = model.vc.forward(g, bind, f, true)?;
        let event_text = g.constant(text.clone());
        let video_text = video_text_from_events(g, event_text, b, true)?;
        let n = g.constant(negs.clone());
        let action_text = Some(g.constant(actions.clone()));
        let inputs = LossBatchInputs {
            frame_embs: f,
            vc: Some(vc),
            event_text,
            video_text,
            hard_negatives: Some(HardNegatives::per_query(g, n)?),
            action_text,
            scale: model.logit_scale(g, bind),
            normalize: true,
        };
        Ok(total_loss(g, &inputs, &weights)?.0)
    })
    .unwrap();

    let mut checked = 0;
    for ((name, rel), norm) in names.iter().zip(&rep.relative_errors).zip(&rep.grad_norms) {
        if *norm < 1e-8 {
            // Key biases shift every attention logit of a row equally.
            assert!(name.ends_with(".k.bias"), "{name}: zero gradient");
            continue;
        }
        assert!(*rel < 1e-4, "{name}: relative error {rel:.2e}");
        checked += 1;
    }
    assert!(names.iter().any(|n| n.contains(".lora.A")) && checked > 30);
}

#[test]
fn lora_contextualizer_and_losses() {
    check(false, false, 1);
}

#[test]
fn with_both_direction_negatives_and_action_prompts() {
    check(true, true, 2);
}

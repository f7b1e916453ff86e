//! Compare the tape's gradients with central finite differences on a
//! transformer block and on the contrastive loss.
//!
//! cargo run --release --example gradient_check

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use srl_adapt::losses::{symmetric_info_nce, HardNegatives, LogitScale};
use srl_adapt::nn::Block;
use srl_adapt::numerics::gradcheck::{check_inputs, check_params};
use srl_adapt::numerics::{ParamStore, Tensor};

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let mut store = ParamStore::<f64>::new();
    let block = Block::new(&mut store, "blk", 8, 2, 4, false, 0.5, &mut rng);
    let x = store.add("x", Tensor::randn(vec![2, 5, 8], 1.0, &mut rng), true);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let rep = check_params(&store, &ids, 1e-5, None, &mut rng, |g, p| {
        let y = block.forward(g, p, p.var(x))?;
        let y = g.gelu(y);
        Ok(g.mean_all(y))
    })?;
    println!("transformer block");
    for ((_, p), (e, n)) in store.iter().zip(rep.relative_errors.iter().zip(&rep.grad_norms)) {
        println!("  {:<22} |grad| {n:9.3e}  rel. error {e:9.2e}", p.name);
    }

    let q = Tensor::<f64>::randn(vec![6, 16], 1.0, &mut rng).l2_normalized_rows();
    let k = Tensor::<f64>::randn(vec![6, 16], 1.0, &mut rng).l2_normalized_rows();
    let negs = Tensor::<f64>::randn(vec![6, 3, 16], 1.0, &mut rng);
    let rep = check_inputs(&[q, k, negs, Tensor::scalar(2.3)], 1e-5, None, &mut rng, |g, v| {
        let hn = g.l2_normalize(v[2]);
        let hn = HardNegatives::per_query(g, hn)?;
        let scale = LogitScale::Learned(g.exp(v[3]));
        symmetric_info_nce(g, v[0], v[1], Some(&hn), true, &scale)
    })?;
    println!("symmetric InfoNCE with hard negatives");
    for (name, e) in ["query", "keys", "negatives", "log scale"].iter().zip(&rep.relative_errors) {
        println!("  {name:<22} rel. error {e:9.2e}");
    }
    Ok(())
}

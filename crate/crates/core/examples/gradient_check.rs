//! Finite-difference check of a small GRU unrolled over three steps.
//!
//! cargo run --release --example gradient_check

use idmir::autodiff::Graph;
use idmir::gradcheck;
use idmir::layers::GruCell;
use idmir::params::ParamStore;
use idmir::rng::rng_for;
use idmir::Tensor;
use rand::Rng;

fn main() -> idmir::Result<()> {
    let mut rng = rng_for(3, &[]);
    let mut store = ParamStore::new();
    let cell = GruCell::new(&mut store, "gru", 4, 3, &mut rng)?;
    let xs: Vec<Tensor> = (0..3).map(|_| Tensor::new(vec![1, 4], (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())).collect::<idmir::Result<_>>()?;
    let report = gradcheck::check(&mut store, None, 1e-5, |g: &mut Graph, s: &ParamStore| {
        let mut h = g.constant(1, 3, 0.0);
        for x in &xs {
            let x = g.input(x.clone());
            h = cell.forward(g, s, x, h)?;
        }
        let t = g.tanh(h);
        Ok(g.sum_all(t))
    })?;
    println!("checked {} coordinates, max relative error {:.2e}", report.checked, report.max_rel_error);
    if let Some((name, idx)) = report.worst {
        println!("worst coordinate: {name}[{idx}]");
    }
    Ok(())
}

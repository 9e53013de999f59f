//! Analytic gradients of the toy ResNet loss against central differences.

use quantbench::network::{build_toy_resnet, forward_graph, init_params, ForwardOptions, Mode};
use quantbench::numcore::gradcheck::{central_differences, relative_error};
use quantbench::{Graph, Tensor};

fn main() -> quantbench::Result<()> {
    let mut model = build_toy_resnet(4, 2, 3)?;
    init_params(&mut model, 0);
    let x = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|i| ((i * 37 % 17) as f64 / 17.0) - 0.4).collect())?;
    let labels = [0usize, 2];

    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let out = forward_graph(&mut g, &model, xn, &mut ForwardOptions::new(Mode::FloatingPoint).trainable())?;
    let loss = g.cross_entropy(out.logits, &labels)?;
    g.backward(loss)?;

    let names: Vec<String> = out.params.keys().cloned().collect();
    let at: Vec<Tensor> = names.iter().map(|n| model.params[n].clone()).collect();
    let fd = central_differences(
        |p| {
            let mut m = model.clone();
            for (n, t) in names.iter().zip(p) {
                m.params.insert(n.clone(), t.clone());
            }
            let mut h = Graph::new();
            let xn = h.constant(x.clone());
            let o = forward_graph(&mut h, &m, xn, &mut ForwardOptions::new(Mode::FloatingPoint)).expect("forward");
            let l = h.cross_entropy(o.logits, &labels).expect("loss");
            h.value(l).item()
        },
        &at,
        1e-5,
    );
    for (i, n) in names.iter().enumerate() {
        let analytic = g.grad(out.params[n]).expect("parameter gradient");
        println!("{n:<20} rel err {:.2e}", relative_error(analytic.data(), fd[i].data()));
    }
    Ok(())
}

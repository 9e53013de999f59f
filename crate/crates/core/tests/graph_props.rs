use proptest::prelude::*;
use quantbench::mpq::{avg_bits, avg_bits_node, project_bits, AllowedBits};
use quantbench::numcore::gradcheck::{central_differences, relative_error};
use quantbench::{Graph, NodeId, Tensor};

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

/// Smooth objective mixing matmul, softmax, exp, log and pow2.
fn smooth_loss(g: &mut Graph, a: NodeId, b: NodeId, labels: &[usize]) -> NodeId {
    let m = g.matmul(a, b).unwrap();
    let e = g.exp(m);
    let shifted = g.add_scalar(e, 1.0);
    let l = g.log(shifted);
    let sq = g.pow2(l);
    let ce = g.cross_entropy(m, labels).unwrap();
    let s = g.mean(sq);
    let ce = g.reshape(ce, &[]).unwrap();
    let s = g.reshape(s, &[]).unwrap();
    g.add(ce, s).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn analytic_gradients_match_central_differences(av in values(6), bv in values(9), l0 in 0usize..3, l1 in 0usize..3) {
        let labels = [l0, l1];
        let a = Tensor::new(vec![2, 3], av).unwrap();
        let b = Tensor::new(vec![3, 3], bv).unwrap();
        let mut g = Graph::new();
        let (an, bn) = (g.param("a", a.clone()).unwrap(), g.param("b", b.clone()).unwrap());
        let loss = smooth_loss(&mut g, an, bn, &labels);
        g.backward(loss).unwrap();
        let fd = central_differences(
            |p| {
                let mut h = Graph::new();
                let (x, y) = (h.constant(p[0].clone()), h.constant(p[1].clone()));
                let l = smooth_loss(&mut h, x, y, &labels);
                h.value(l).item()
            },
            &[a, b],
            1e-5,
        );
        prop_assert!(relative_error(g.grad(an).unwrap().data(), fd[0].data()) < 1e-5);
        prop_assert!(relative_error(g.grad(bn).unwrap().data(), fd[1].data()) < 1e-5);
    }

    #[test]
    fn round_ste_passes_gradient_unchanged(v in values(7)) {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(v.clone())).unwrap();
        let r = g.round_ste(x);
        let s = g.sum(r);
        g.backward(s).unwrap();
        prop_assert!(g.grad(x).unwrap().data().iter().all(|&d| d == 1.0));
        for (out, inp) in g.value(r).data().iter().zip(&v) {
            prop_assert_eq!(*out, inp.round());
        }
    }

    #[test]
    fn evaluation_is_bit_identical(av in values(6), bv in values(9)) {
        let run = || {
            let mut g = Graph::new();
            let a = g.constant(Tensor::new(vec![2, 3], av.clone()).unwrap());
            let b = g.constant(Tensor::new(vec![3, 3], bv.clone()).unwrap());
            let l = smooth_loss(&mut g, a, b, &[0, 2]);
            g.value(l).item().to_bits()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn uniform_logits_cost_ln_c(c in 2usize..12, n in 1usize..6, level in -5.0f64..5.0) {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::full(&[n, c], level));
        let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        let ce = g.cross_entropy(logits, &labels).unwrap();
        prop_assert!((g.value(ce).item() - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn projection_lands_in_the_allowed_set(b in -4.0f64..40.0, lo in 2u32..6, span in 0u32..6, members in prop::collection::btree_set(2u32..16, 1..5)) {
        let range = AllowedBits::AnyInteger { min: lo, max: lo + span };
        prop_assert!(range.contains(project_bits(b, &range)));
        let set = AllowedBits::set(members.iter().copied().collect()).unwrap();
        let p = project_bits(b, &set);
        prop_assert!(members.contains(&p));
        let best = members.iter().map(|&m| (b - m as f64).abs()).fold(f64::INFINITY, f64::min);
        prop_assert_eq!((b - p as f64).abs(), best);
    }

    #[test]
    fn weighted_average_and_its_gradient(pairs in prop::collection::vec((2.0f64..32.0, 1usize..5000), 1..8)) {
        let (bits, sizes): (Vec<f64>, Vec<usize>) = pairs.into_iter().unzip();
        let total: usize = sizes.iter().sum();
        let expected = bits.iter().zip(&sizes).map(|(b, &s)| b * s as f64).sum::<f64>() / total as f64;
        prop_assert!((avg_bits(&bits, &sizes).unwrap() - expected).abs() < 1e-12);
        let mut g = Graph::new();
        let nodes: Vec<NodeId> = bits
            .iter()
            .enumerate()
            .map(|(i, &b)| g.param(&format!("b{i}"), Tensor::scalar(b)).unwrap())
            .collect();
        let avg = avg_bits_node(&mut g, &nodes, &sizes).unwrap();
        g.backward(avg).unwrap();
        for (n, &s) in nodes.iter().zip(&sizes) {
            prop_assert!((g.grad(*n).unwrap().item() - s as f64 / total as f64).abs() < 1e-15);
        }
    }
}

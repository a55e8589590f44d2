use dgmr_tensor::nn::Linear;
use dgmr_tensor::{Graph, OptimizerState, ParamStore, Rng, Tensor};

fn train(seed: u64, steps: usize) -> ParamStore {
    let mut rng = Rng::seed(seed);
    let mut store = ParamStore::new();
    let a = Linear::new(&mut store, "a", 6, 16, &mut rng);
    let b = Linear::new(&mut store, "b", 16, 3, &mut rng);
    let mut opt = OptimizerState::adam(1e-2);
    for _ in 0..steps {
        let x = Tensor::new(vec![8, 6], rng.normal_vec(48)).unwrap();
        let y: Vec<usize> = (0..8).map(|_| rng.below(3)).collect();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(x);
        let h = a.forward(&mut g, &p, xv).unwrap();
        let h = g.relu(h).unwrap();
        let h = g.dropout(h, 0.2, &mut rng).unwrap();
        let o = b.forward(&mut g, &p, h).unwrap();
        let lp = g.log_softmax(o).unwrap();
        let pk = g.pick_last(lp, &y).unwrap();
        let m = g.mean(pk).unwrap();
        let loss = g.neg(m).unwrap();
        let grads = g.backward(loss).unwrap();
        store.accumulate(&p, &grads);
        opt.step(&mut store).unwrap();
    }
    store
}

#[test]
fn same_seed_same_parameters_bitwise() {
    let a = train(17, 25);
    let b = train(17, 25);
    assert_eq!(a.checksum(), b.checksum());
    for (pa, pb) in a.iter().zip(b.iter()) {
        assert!(pa.tensor.bit_eq(&pb.tensor), "{}", pa.name);
    }
}

#[test]
fn different_seed_different_parameters() {
    assert_ne!(train(17, 5).checksum(), train(18, 5).checksum());
}

#[test]
fn dropout_preserves_expectation() {
    let mut rng = Rng::seed(4);
    let n = 200_000;
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(vec![n]));
    let d = g.dropout(x, 0.3, &mut rng).unwrap();
    let v = g.value(d);
    let mean: f64 = v.data().iter().map(|&x| x as f64).sum::<f64>() / n as f64;
    assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    let zeros = v.data().iter().filter(|&&x| x == 0.0).count() as f64 / n as f64;
    assert!((zeros - 0.3).abs() < 0.01);
}

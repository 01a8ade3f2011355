use std::time::Instant;
use ttas_core::net::{NetworkArchitecture, SegNet};
use ttas_core::tensor::{Graph, Tensor};
use ttas_core::losses::dice_loss;

fn main() {
    let net = SegNet::new(NetworkArchitecture::default()).unwrap();
    let params = net.init_params(1);
    let batch = Tensor::full(vec![4, 1, 64, 64], 0.37);
    let mask = Tensor::full(vec![4, 1, 64, 64], 0.0);

    // forward only
    let t0 = Instant::now();
    let reps = 50;
    for _ in 0..reps {
        let _ = net.forward(&params, &batch).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64;
    println!("forward 4x64x64: {:.2} ms ({:.1} GFLOP/s)", fwd * 1e3, 4.0 * 20.1e6 / fwd / 1e9);

    // forward + backward
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let pass = net.forward_graph(&mut g, &params, &batch).unwrap();
        let loss = dice_loss(&mut g, &mask, pass.probs).unwrap();
        g.backward(loss).unwrap();
    }
    let fb = t0.elapsed().as_secs_f64() / reps as f64;
    println!("fwd+bwd 4x64x64: {:.2} ms ({:.1} GFLOP/s)", fb * 1e3, 4.0 * 60.3e6 / fb / 1e9);
}

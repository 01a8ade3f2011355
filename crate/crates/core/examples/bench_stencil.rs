use std::time::Instant;
use ttas_core::net::{NetworkArchitecture, SegNet};
use ttas_core::tensor::{Graph, Padding, Tensor};

fn main() {
    // Raw conv2d via graph, one layer 8->16 on 4x8x64x64 (the heavy layer)
    let input = Tensor::full(vec![4, 8, 64, 64], 0.5);
    let kernel = Tensor::full(vec![16, 8, 3, 3], 0.02);
    let bias = Tensor::zeros(vec![16]);
    let reps = 100;
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let i = g.leaf(&input);
        let k = g.leaf(&kernel);
        let b = g.leaf(&bias);
        let _ = g.conv2d(i, k, b, Padding::Same).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    let flops = 4.0 * 16.0 * 8.0 * 9.0 * 4096.0 * 2.0;
    println!("conv2d 8->16 via graph: {:.2} ms ({:.1} GFLOP/s)", dt * 1e3, flops / dt / 1e9);

    // Whole forward via SegNet for comparison
    let net = SegNet::new(NetworkArchitecture::default()).unwrap();
    let params = net.init_params(1);
    let batch = Tensor::full(vec![4, 1, 64, 64], 0.37);
    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = net.forward(&params, &batch).unwrap();
    }
    let dt2 = t0.elapsed().as_secs_f64() / reps as f64;
    println!("segnet forward: {:.2} ms", dt2 * 1e3);
}

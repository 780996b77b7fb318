use deephedge::hedger::*;
use deephedge::market::*;
use deephedge::net::Mode;
use ndarray::{Array2, Axis};
use std::time::Instant;

fn main() {
    let grid = TimeGrid::daily_30d();
    let b = simulate_black_scholes(0.2, 100.0, &grid, 200_000, 2, 0).unwrap();
    let policy = PolicyNet::init(PolicyStructure::SemiRecurrent, 30, 1, 1, &[], 1).unwrap();
    let m = 200_000;

    // piece 1: build input
    let t0 = Instant::now();
    let feats = b.features.index_axis(Axis(1), 0).to_owned();
    let prev: Array2<f64> = Array2::zeros((m, 1));
    eprintln!("gather feats: {:?}", t0.elapsed());

    let mut x: Array2<f64> = Array2::zeros((m, 2));
    x.slice_mut(ndarray::s![.., 0..1]).assign(&feats);
    x.slice_mut(ndarray::s![.., 1..2]).assign(&prev);

    // piece 2: single net forward in infer mode
    let t0 = Instant::now();
    let (_out, _tape) = policy.nets[0].forward(x.view(), Mode::Infer).unwrap();
    eprintln!("forward 2e5 (with tape): {:?}", t0.elapsed());
    let t0 = Instant::now();
    let _out2 = policy.nets[0].forward_infer(x.view()).unwrap();
    eprintln!("forward 2e5 again: {:?}", t0.elapsed());

    // piece 3: 30 x forward
    let t0 = Instant::now();
    for k in 0..30 {
        let _ = policy.nets[k].forward(x.view(), Mode::Infer).unwrap();
    }
    eprintln!("30 forwards: {:?}", t0.elapsed());

    // piece 4: full rollout
    let z = vec![0.0; m];
    let t0 = Instant::now();
    let _pl = evaluate_policy(&policy, &b, &z, &Frictions::none(), 0.0).unwrap();
    eprintln!("full rollout: {:?}", t0.elapsed());
}

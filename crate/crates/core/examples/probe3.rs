use deephedge::hedger::*;
use deephedge::market::*;
use deephedge::net::Mode;
use ndarray::{Array2, Axis};

fn main() {
    let params = HestonParams::baseline();
    let grid = TimeGrid::daily_30d();
    let train_b = simulate_heston(&params, &grid, 100_000, 1, 0).unwrap();
    let z_tr: Vec<f64> = train_b.terminal_prices(0).iter().map(|&s| (s - 100.0f64).max(0.0)).collect();
    let mut policy = PolicyNet::init(PolicyStructure::SemiRecurrent, 30, 2, 2, &[], 1).unwrap();
    policy.set_output_scale_from(&train_b);
    let schedule = Schedule { steps: 12000, batch_size: 256, learning_rate: 0.005, seed: 1 };
    train(&mut policy, &train_b, &z_tr, &Frictions::none(), &Objective::cvar(0.5), &schedule).unwrap();

    // train-mode vs infer-mode PL on the SAME training subset (50k rows)
    let m = 50_000;
    let sub_prices = train_b.prices.slice(ndarray::s![0..m, .., ..]);
    let sub_feats = train_b.features.slice(ndarray::s![0..m, .., ..]);
    let scen = ScenarioView { prices: sub_prices, features: sub_feats, z: &z_tr[0..m] };
    let roll = rollout_train(&policy, scen, &Frictions::none(), 0.0).unwrap();
    let pl_i = rollout_eval(&policy, scen, &Frictions::none(), 0.0).unwrap();
    let stat = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>()/n;
        let sd = (v.iter().map(|x|(x-mean)*(x-mean)).sum::<f64>()/n).sqrt();
        let mut s: Vec<f64> = v.to_vec();
        s.sort_by(|a,b| a.partial_cmp(b).unwrap());
        (mean, sd, s[0], s[(n as usize)/100], s[(n as usize)*99/100], s[n as usize - 1])
    };
    println!("train-mode PL (m,sd,min,p1,p99,max): {:?}", stat(roll.pl.as_slice().unwrap()));
    println!("infer-mode PL                     : {:?}", stat(pl_i.as_slice().unwrap()));

    // fresh eval chunk: count extreme paths and positions
    let eval_b = simulate_heston(&params, &grid, 100_000, 2, 1<<40).unwrap();
    let z: Vec<f64> = eval_b.terminal_prices(0).iter().map(|&s| (s - 100.0f64).max(0.0)).collect();
    let pl = evaluate_policy(&policy, &eval_b, &z, &Frictions::none(), 0.0).unwrap();
    println!("fresh eval PL                     : {:?}", stat(pl.as_slice().unwrap()));
    let bad: Vec<usize> = (0..100_000).filter(|&i| pl[i].abs() > 50.0).collect();
    println!("paths with |PL| > 50: {} of 100000", bad.len());
    if let Some(&i) = bad.first() {
        // roll this path manually and print positions
        let mut prev = Array2::zeros((1, 2));
        let mut maxv: f64 = 0.0;
        for k in 0..30 {
            let mut x = Array2::zeros((1, 4));
            x[[0,0]] = eval_b.features[[i, k, 0]];
            x[[0,1]] = eval_b.features[[i, k, 1]];
            x[[0,2]] = prev[[0,0]];
            x[[0,3]] = prev[[0,1]];
            let out = policy.nets[k].forward_infer(x.view()).unwrap();
            prev[[0,0]] = out[[0,0]] * policy.output_scale[0];
            prev[[0,1]] = out[[0,1]] * policy.output_scale[1];
            maxv = maxv.max(eval_b.features[[i,k,1]]);
            if k % 6 == 0 || k == 29 {
                println!("  path {i} k={k}: V={:.3} S={:.2} delta=({:.2},{:.1})", eval_b.features[[i,k,1]], eval_b.prices[[i,k,0]], prev[[0,0]], prev[[0,1]]);
            }
        }
        println!("  max V on path: {maxv:.3}, Z={:.2}, PL={:.2}", z[i], pl[i]);
    }
    let _ = Mode::Infer;
}

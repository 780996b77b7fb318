use deephedge::hedger::*;
use deephedge::market::*;

fn main() {
    let params = HestonParams::baseline();
    let grid = TimeGrid::daily_30d();
    let train_b = simulate_heston(&params, &grid, 20_000, 1, 0).unwrap();
    let z_tr: Vec<f64> = train_b.terminal_prices(0).iter().map(|&s| (s - 100.0f64).max(0.0)).collect();

    let mut policy = PolicyNet::init(PolicyStructure::SemiRecurrent, 30, 2, 2, &[], 1).unwrap();
    let schedule = Schedule { steps: 1000, batch_size: 256, learning_rate: 0.005, seed: 1 };
    train(&mut policy, &train_b, &z_tr, &Frictions::none(), &Objective::cvar(0.5), &schedule).unwrap();

    // compare train-mode vs infer-mode on the same small set
    let sub = simulate_heston(&params, &grid, 256, 3, 777).unwrap();
    let z: Vec<f64> = sub.terminal_prices(0).iter().map(|&s| (s - 100.0f64).max(0.0)).collect();
    let scen = ScenarioView::from_batch(&sub, &z);
    let roll = rollout_train(&policy, scen, &Frictions::none(), 0.0).unwrap();
    let pl_infer = evaluate_policy(&policy, &sub, &z, &Frictions::none(), 0.0).unwrap();
    let mt = roll.pl.iter().sum::<f64>() / 256.0;
    let mi = pl_infer.iter().sum::<f64>() / 256.0;
    println!("train-mode PL mean {mt:.4}, infer-mode PL mean {mi:.4}");
    println!("train-mode PL range [{:.3},{:.3}], infer [{:.3},{:.3}]",
        roll.pl.iter().cloned().fold(f64::INFINITY, f64::min), roll.pl.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        pl_infer.iter().cloned().fold(f64::INFINITY, f64::min), pl_infer.iter().cloned().fold(f64::NEG_INFINITY, f64::max));

    // inspect BN stats of step-0 and step-15 nets
    for k in [0usize, 15] {
        let net = &policy.nets[k];
        let bn = net.layers[0].batch_norm.as_ref().unwrap();
        println!("net {k}: running_mean[0..4] {:?}", &bn.running_mean.as_slice().unwrap()[0..4]);
        println!("net {k}: running_var[0..4]  {:?}", &bn.running_var.as_slice().unwrap()[0..4]);
    }
}

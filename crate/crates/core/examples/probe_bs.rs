use deephedge::hedger::*;
use deephedge::market::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(4000);
    let grid = TimeGrid::daily_30d();
    let train_b = simulate_black_scholes(0.2, 100.0, &grid, 50_000, 1, 0).unwrap();
    let z_tr: Vec<f64> = train_b.terminal_prices(0).iter().map(|&s| (s - 100.0f64).max(0.0)).collect();

    let mut policy = PolicyNet::init(PolicyStructure::SemiRecurrent, 30, 1, 1, &[], 1).unwrap();
    let t0 = Instant::now();
    let log = train(&mut policy, &train_b, &z_tr, &Frictions::none(), &Objective::cvar(0.5), &Schedule { steps, batch_size: 256, learning_rate: 0.005, seed: 1 }).unwrap();
    eprintln!("train: {:?} ({:.2} ms/step)", t0.elapsed(), t0.elapsed().as_secs_f64()*1000.0/steps as f64);
    for (i, chunk) in log.loss.chunks(steps/10).enumerate() {
        eprintln!("  loss[{}..]: {:.4}", i*(steps/10), chunk.iter().sum::<f64>()/chunk.len() as f64);
    }

    let t0 = Instant::now();
    let eval_b = simulate_black_scholes(0.2, 100.0, &grid, 200_000, 2, 1<<40).unwrap();
    eprintln!("eval sim: {:?}", t0.elapsed());
    let z: Vec<f64> = eval_b.terminal_prices(0).iter().map(|&s| (s - 100.0f64).max(0.0)).collect();
    let t0 = Instant::now();
    let pl = evaluate_policy(&policy, &eval_b, &z, &Frictions::none(), 0.0).unwrap();
    eprintln!("eval rollout 2e5: {:?}", t0.elapsed());
    let n = pl.len() as f64;
    let mean = pl.iter().sum::<f64>()/n;
    let sd = (pl.iter().map(|x|(x-mean)*(x-mean)).sum::<f64>()/n).sqrt();
    let zm = z.iter().sum::<f64>()/n;
    let zsd = (z.iter().map(|x|(x-zm)*(x-zm)).sum::<f64>()/n).sqrt();
    println!("hedged std {sd:.4}, unhedged {zsd:.4}, ratio {:.3} (want < 0.35)", sd/zsd);
}

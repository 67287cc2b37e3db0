//! Generates a synthetic vehicle dataset, trains, and reports held-out metrics.
//!
//! Usage: `cargo run --release -p recoat-core --example desk_run -- [train] [test] [epochs]`

use std::time::Instant;

use recoat::datagen::{generate_dataset, DatasetSpec};
use recoat::metrics::{evaluate, metrics_csv};
use recoat::net::NetConfig;
use recoat::objective::traj_loss;
use recoat::predict::{eval_records, predict_all};
use recoat::raster::RasterConfig;
use recoat::scene::AgentType;
use recoat::train::{prepare_dataset, train, TrainConfig, TrainState};

fn main() -> recoat::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let n_train = args.first().copied().unwrap_or(2000);
    let n_test = args.get(1).copied().unwrap_or(200);
    let epochs = args.get(2).copied().unwrap_or(30);

    let t = Instant::now();
    let data_spec = DatasetSpec::new(n_train, 1);
    let train_scenes: Vec<_> = generate_dataset(&data_spec)?.into_iter().map(|(_, s)| s).collect();
    let test_spec = DatasetSpec { count: n_test, seed: 2, ..data_spec.clone() };
    let test_scenes: Vec<_> = generate_dataset(&test_spec)?.into_iter().map(|(_, s)| s).collect();
    let net_cfg = NetConfig::new(AgentType::Vehicle);
    let raster = RasterConfig::default();
    let train_in = prepare_dataset(&train_scenes, &net_cfg, &raster)?;
    let test_in = prepare_dataset(&test_scenes, &net_cfg, &raster)?;
    println!("data ready in {:.1}s", t.elapsed().as_secs_f64());

    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let mut state = TrainState::fresh(&cfg, net_cfg)?;
    let t = Instant::now();
    for e in 0..epochs {
        let one = TrainConfig { epochs: e + 1, ..cfg.clone() };
        let out = train(&one, state, &train_in, None)?;
        state = out.state;
        let n = out.log.len() as f64;
        let mean = |f: fn(&recoat::train::LogRow) -> f64| out.log.iter().map(f).sum::<f64>() / n;
        let mut hist = vec![0; 6];
        for r in &out.log {
            for (h, c) in hist.iter_mut().zip(&r.winner_histogram) {
                *h += c;
            }
        }
        println!(
            "epoch {e}: traj {:.3} score {:.3} total {:.3} winners {hist:?} ({:.0}s)",
            mean(|r| r.traj_loss),
            mean(|r| r.score_loss),
            mean(|r| r.total),
            t.elapsed().as_secs_f64()
        );
    }
    let preds = predict_all(&state.net, &test_in, 32)?;
    let records = eval_records(&preds, &test_scenes)?;
    print!("{}", metrics_csv(&evaluate(&records)?));
    let mut winners = std::collections::BTreeSet::new();
    let mut agree = 0;
    for (r, s) in records.iter().zip(&test_in) {
        let (_, w) = traj_loss(&r.pred.trajectories, &r.gt_future, s.speed, &cfg.loss)?;
        winners.insert(w);
        agree += usize::from(w == r.pred.top_mode());
    }
    println!("distinct winners {} top-mode agreement {:.3}", winners.len(), agree as f64 / records.len() as f64);
    Ok(())
}

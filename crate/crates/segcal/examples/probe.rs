//! One-off training probe over task-parameter candidates: reports
//! baseline calibration, overfit gap, and selective-regularizer effects.
//! Useful when tuning the synthetic task defaults.

use std::time::Instant;

use segcal::losses::{BaseLoss, ObjectiveSpec, Regularizer};
use segcal::runner::{evaluate, train, ModelPredictor, Protocol};
use segcal::synthdata::{bayes_reference_report, generate, TaskConfig};

fn main() {
    // args: epochs tau noise lambda_dice lambda_ce
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let tau: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.25);
    let noise: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let lambda_dice: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let lambda_ce: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.1);

    let task = TaskConfig {
        seed: 42,
        ambiguity_tau: tau,
        noise_sigma: noise,
        ..TaskConfig::default()
    };
    let data = generate(&task).unwrap();

    let base_rate = data
        .train
        .iter()
        .filter(|s| s.center_is_foreground())
        .count() as f64
        / data.train.len() as f64;
    let fg_frac: f64 = data
        .train
        .iter()
        .map(|s| s.foreground_fraction())
        .sum::<f64>()
        / data.train.len() as f64;
    let in_window = data
        .train
        .iter()
        .filter(|s| (0.05..=0.6).contains(&s.foreground_fraction()))
        .count();
    let bayes = bayes_reference_report(&data.test, 10).unwrap();
    println!(
        "tau {tau} noise {noise} epochs {epochs} | base-rate {base_rate:.3} fg {fg_frac:.3} \
         window {in_window}/{} | bayes ece {:.4} brier {:.4}",
        data.train.len(),
        bayes.ece,
        bayes.brier
    );

    let protocol = Protocol {
        epochs,
        ..Protocol::default()
    };

    let filter = args.get(6).cloned().unwrap_or_default();
    let specs = [
        ("dice", BaseLoss::Dice, Regularizer::None, 0.0),
        ("dice+meep_kl", BaseLoss::Dice, Regularizer::MeepKl, lambda_dice),
        ("dice+meep_h", BaseLoss::Dice, Regularizer::MeepH, lambda_dice),
        ("ce", BaseLoss::Ce, Regularizer::None, 0.0),
        ("ce+meep_h", BaseLoss::Ce, Regularizer::MeepH, lambda_ce),
        ("ce+meep_kl", BaseLoss::Ce, Regularizer::MeepKl, lambda_ce),
    ];
    let specs = specs
        .into_iter()
        .filter(|(name, ..)| filter.is_empty() || name.contains(filter.as_str()));
    for (name, base, regularizer, lambda) in specs {
        let spec = ObjectiveSpec {
            base,
            regularizer,
            lambda,
            beta: 0.2,
            focal_gamma: 2.0,
        };
        let t = Instant::now();
        match train(&spec, &protocol, &data, 1) {
            Ok((params, _history)) => {
                let secs = t.elapsed().as_secs();
                let test = evaluate(&ModelPredictor(&params), &data.test, 10).unwrap();
                let tr = evaluate(&ModelPredictor(&params), &data.train, 10).unwrap();
                let mid = {
                    let h = &test.report.prob_histogram;
                    let total: usize = h.iter().sum();
                    h[1..9].iter().sum::<usize>() as f64 / total as f64
                };
                // signed gap: mean(confidence) - mean(accuracy); positive
                // means overconfident
                let signed: f64 = {
                    let b = &test.report.bins;
                    let n: usize = b.counts.iter().sum();
                    (0..b.counts.len())
                        .map(|i| {
                            b.counts[i] as f64 / n as f64
                                * (b.mean_confidence[i] - b.accuracy[i])
                        })
                        .sum()
                };
                // misclassified fraction on the test split
                let mis = 1.0
                    - test
                        .report
                        .bins
                        .accuracy
                        .iter()
                        .zip(&test.report.bins.counts)
                        .map(|(a, &c)| a * c as f64)
                        .sum::<f64>()
                        / test.report.bins.counts.iter().sum::<usize>() as f64;
                println!(
                    "{name:<14} {secs:>4}s | dice {:.3} | test-ece {:.4} train-ece {:.4} | \
                     gap {signed:+.4} mis {mis:.3} | brier {:.4} | mid {mid:.3}",
                    test.dice_mean, test.report.ece, tr.report.ece, test.report.brier,
                );
            }
            Err(e) => println!("{name}: FAILED {e}"),
        }
    }
}

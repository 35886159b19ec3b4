//! Statistical properties of coalition extraction on the four-rectangle
//! images, with an untrained classifier as the feature source.

use cpfc::coalition::{extract_coalitions, ExtractionConfig};
use cpfc::harness::four_rectangles;
use cpfc::nn::{build_classifier, reconfigure_for_extraction, Architecture, ExtractionNet};

fn enet(seed: u64) -> ExtractionNet {
    let net = build_classifier(&Architecture::small_cnn(32, 32, 4), 0).unwrap();
    reconfigure_for_extraction(&net, 20, seed).unwrap()
}

#[test]
fn label_count_shrinks_across_checkpoints() {
    // Checkpoints: every 10th step plus the final labeling.
    let mut monotone = 0;
    for seed in 0..20 {
        let (img, _) = four_rectangles(32, 32, seed).unwrap();
        let cfg = ExtractionConfig {
            seed,
            ..Default::default()
        };
        let ex = extract_coalitions(&img, enet(seed), &cfg).unwrap();
        let mut counts: Vec<usize> = ex.trace.iter().step_by(10).map(|s| s.labels).collect();
        counts.push(ex.trace.last().unwrap().labels);
        monotone += counts.windows(2).all(|w| w[1] <= w[0]) as usize;
    }
    println!("non-increasing runs: {monotone}/20");
    assert!(monotone >= 18);
}

#[test]
fn continuity_pressure_reduces_fragmentation() {
    for seed in 0..10 {
        let (img, _) = four_rectangles(32, 32, seed).unwrap();
        let run = |lambda| {
            let cfg = ExtractionConfig {
                lambda,
                seed,
                ..Default::default()
            };
            extract_coalitions(&img, enet(seed), &cfg).unwrap().coalitions.len()
        };
        let (strong, none) = (run(100.0), run(0.0));
        assert!(strong <= none, "seed {seed}: {strong} > {none}");
    }
}

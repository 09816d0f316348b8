//! Scratch benchmark probe (deleted before release).

use deconfound_mil::agg::AggregatorKind;
use deconfound_mil::confounders::build_dictionary;
use deconfound_mil::data::BuildMode;
use deconfound_mil::synth::{generate, GenConfig};
use deconfound_mil::trainer::*;
use std::collections::BTreeMap;

fn main() {
    let mut acc: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in 0..5u64 {
        let config = GenConfig { seed, ..GenConfig::default() };
        let biased = generate(&config).unwrap();
        let cfg = TrainConfig { seed, ..TrainConfig::default() };
        let kind = AggregatorKind::attention();

        let (bp, _) = train_stage2(&biased, &kind, &cfg).unwrap();
        let base = evaluate(&biased, &bp, None).unwrap();
        acc.entry("baseline").or_default().push(base.accuracy);

        for k in [2usize, 4, 8, 16] {
            let dict = build_dictionary(&[&biased], BuildMode::Attention, k, &kind, bp.attention_weights(), seed).unwrap();
            let (ip, dout, _) = train_stage3(&biased, &dict, &kind, &cfg, &Stage3Options::default()).unwrap();
            let e = evaluate(&biased, &ip, Some(&dout)).unwrap();
            acc.entry(match k { 2 => "k2", 4 => "k4", 8 => "k8", _ => "k16" }).or_default().push(e.accuracy);
        }
        for mode in [BuildMode::Mean, BuildMode::Max, BuildMode::Instance] {
            let dict = build_dictionary(&[&biased], mode, 8, &kind, None, seed).unwrap();
            let (ip, dout, _) = train_stage3(&biased, &dict, &kind, &cfg, &Stage3Options::default()).unwrap();
            let e = evaluate(&biased, &ip, Some(&dout)).unwrap();
            acc.entry(mode.as_str()).or_default().push(e.accuracy);
        }
        eprintln!("seed {seed} done");
    }
    for (name, v) in &acc {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        println!("{name:10} mean {:.3}  {:?}", mean, v.iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    }
}

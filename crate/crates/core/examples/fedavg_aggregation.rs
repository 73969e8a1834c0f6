//! Sample-count weighted averaging of client models, and the byte ledger.

use dfeddgm::classifier::{Classifier, ClassifierSpec};
use dfeddgm::dataset::ImageShape;
use dfeddgm::federation::{CommLedger, RoundPlan};
use dfeddgm::seed;

fn main() -> dfeddgm::Result<()> {
    let spec = ClassifierSpec {
        image: ImageShape::new(1, 8, 8),
        conv_channels: vec![4, 8],
        feature_dim: 16,
    };
    let plan = RoundPlan::draw(0, 0, 10, 4, 42)?;
    println!("round 1 selects clients {:?}", plan.selected);

    let clients: Vec<Classifier> = plan
        .client_seeds
        .iter()
        .map(|&s| Classifier::new(spec.clone(), 2, &mut seed::rng(s)))
        .collect::<dfeddgm::Result<_>>()?;
    let samples = [120.0, 30.0, 0.0, 50.0];
    let refs: Vec<&Classifier> = clients.iter().collect();
    let global = Classifier::aggregate(&refs, &samples)?;

    let first = |m: &Classifier| m.params().flatten()[0];
    let by_hand: f64 = clients.iter().zip(samples).map(|(m, w)| w * first(m)).sum::<f64>() / samples.iter().sum::<f64>();
    println!("first weight: aggregate {:.6}, by hand {:.6}", first(&global), by_hand);

    let mut ledger = CommLedger::default();
    let bytes = CommLedger::model_bytes(global.num_params());
    let round = ledger.record_round(plan.selected.len(), bytes);
    println!(
        "{} parameters, {} bytes per model; round: {} up, {} down, {} total",
        global.num_params(),
        bytes,
        round.up,
        round.down,
        ledger.total
    );
    Ok(())
}

//! Class-balanced batches for generator training on a skewed shard.

use dfeddgm::dataset::{synth_dataset, ImageShape};
use dfeddgm::sampler;

fn main() -> dfeddgm::Result<()> {
    let data = synth_dataset(3, 40, ImageShape::new(1, 8, 8), 1);
    // a shard holding 30, 6 and 2 examples of the three classes
    let by = data.indices_by_class();
    let shard: Vec<usize> = by[0][..30].iter().chain(&by[1][..6]).chain(&by[2][..2]).copied().collect();
    let groups = sampler::group_by_class(&data, &shard)?;

    let plan = sampler::plan_epoch(&groups, 16, 7)?;
    println!(
        "balanced: {} batches of {} per class (largest class {})",
        plan.num_batches, plan.per_class_quota, plan.majority_size
    );
    for (b, batch) in plan.batches.iter().enumerate().take(3) {
        let mut counts = [0usize; 3];
        for &(class, _) in batch {
            counts[class] += 1;
        }
        println!("  batch {b}: per-class counts {counts:?}");
    }

    let uniform = sampler::plan_uniform_epoch(&groups, 16, 7)?;
    let mut counts = [0usize; 3];
    for &(class, _) in uniform.batches.iter().flatten() {
        counts[class] += 1;
    }
    println!("shuffled: {} batches, per-class totals {counts:?}", uniform.batches.len());
    Ok(())
}

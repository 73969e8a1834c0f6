//! The three loss terms while a student with a grown head trains on new
//! classes against a frozen teacher.

use dfeddgm::classifier::{Classifier, ClassifierSpec};
use dfeddgm::dataset::{synth_dataset, ImageShape};
use dfeddgm::seed;
use dfeddgm::training::{client_update, LossConfig, TrainingSet};

fn main() -> dfeddgm::Result<()> {
    let shape = ImageShape::new(1, 16, 16);
    let data = synth_dataset(4, 40, shape, 2);
    let split = |classes: &[usize]| -> dfeddgm::Result<TrainingSet> {
        let idx: Vec<usize> = (0..data.len()).filter(|&i| classes.contains(&data.examples()[i].label)).collect();
        TrainingSet::new(data.image_rows(&idx)?, idx.iter().map(|&i| data.examples()[i].label).collect())
    };
    let base = LossConfig {
        learning_rate: 0.05,
        local_epochs: 3,
        batch_size: 32,
        ..LossConfig::default()
    };

    let mut teacher = Classifier::new(ClassifierSpec::desk(shape), 2, &mut seed::rng(0))?;
    client_update(&mut teacher, &split(&[0, 1])?, None, &base, 1)?;

    for (alpha, gamma) in [(0.0, 0.0), (3.0, 0.1)] {
        let mut student = teacher.clone();
        student.expand_head(4, &mut seed::rng(1))?;
        let config = LossConfig { alpha, gamma, ..base };
        let report = client_update(&mut student, &split(&[2, 3])?, Some(&teacher), &config, 2)?;
        println!("α={alpha} γ={gamma}");
        for (e, t) in report.epochs.iter().enumerate() {
            println!(
                "  epoch {e}: ce {:.4} kd {:.4} fd {:.4} total {:.4}",
                t.ce, t.kd, t.fd, t.total
            );
        }
    }
    Ok(())
}

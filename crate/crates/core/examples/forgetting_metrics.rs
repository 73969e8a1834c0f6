//! Average accuracy and forgetting from an accuracy matrix, exactly, and the
//! CSV that stores it.

use dfeddgm::metrics::{
    average_accuracy, average_forgetting, read_metrics_csv, write_metrics_csv, AccuracyRecord, Fraction, StepAccuracy,
};

fn main() -> dfeddgm::Result<()> {
    let f = |n, d| Fraction::new(n, d);
    let mut record = AccuracyRecord::new();
    record.push(StepAccuracy {
        per_task: vec![f(95, 100)?],
        observed: f(95, 100)?,
    })?;
    record.push(StepAccuracy {
        per_task: vec![f(70, 100)?, f(90, 100)?],
        observed: f(160, 200)?,
    })?;
    record.push(StepAccuracy {
        per_task: vec![f(60, 100)?, f(80, 100)?, f(85, 100)?],
        observed: f(225, 300)?,
    })?;

    println!("Acc = {:.4}", average_accuracy(&record)?);
    println!("F   = {:.4}", average_forgetting(&record)?);
    println!("per-task forgetting {:?}", record.task_forgetting());

    let mut csv = Vec::new();
    write_metrics_csv(&record, 3, &mut csv)?;
    print!("{}", String::from_utf8_lossy(&csv));
    assert_eq!(read_metrics_csv(csv.as_slice())?, record);
    Ok(())
}

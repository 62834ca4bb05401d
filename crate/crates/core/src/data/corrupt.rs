use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training-label corruption applied before training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Corruption {
    #[default]
    None,
    /// Flip to a uniformly drawn *other* class.
    Symmetric { rate: f64 },
    /// Flip class `i` to `(i + 1) mod C`.
    Asymmetric { rate: f64 },
}

impl Corruption {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Corruption::None => Ok(()),
            Corruption::Symmetric { rate } | Corruption::Asymmetric { rate } => check_rate(rate, 2),
        }
    }

    pub fn rate(&self) -> f64 {
        match *self {
            Corruption::None => 0.0,
            Corruption::Symmetric { rate } | Corruption::Asymmetric { rate } => rate,
        }
    }

    /// Returns the new labels and the mask of flipped positions.
    pub fn apply<R: Rng + ?Sized>(&self, labels: &[usize], num_classes: usize, rng: &mut R) -> Result<(Vec<usize>, Vec<bool>)> {
        match *self {
            Corruption::None => Ok((labels.to_vec(), vec![false; labels.len()])),
            Corruption::Symmetric { rate } => corrupt_symmetric(labels, rate, num_classes, rng),
            Corruption::Asymmetric { rate } => corrupt_asymmetric(labels, rate, num_classes, rng),
        }
    }
}

fn check_rate(rate: f64, num_classes: usize) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("corruption rate must lie in [0, 1], got {rate}")));
    }
    if rate > 0.0 && num_classes < 2 {
        return Err(Error::Config(format!("cannot flip labels with {num_classes} class(es)")));
    }
    Ok(())
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().position(|&y| y >= num_classes) {
        Some(i) => Err(Error::OutOfRange(format!("label {} at index {i} with {num_classes} classes", labels[i]))),
        None => Ok(()),
    }
}

pub fn corrupt_symmetric<R: Rng + ?Sized>(
    labels: &[usize],
    rate: f64,
    num_classes: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<bool>)> {
    check_rate(rate, num_classes)?;
    check_labels(labels, num_classes)?;
    let mut out = labels.to_vec();
    let mut mask = vec![false; labels.len()];
    for (y, m) in out.iter_mut().zip(mask.iter_mut()) {
        if rng.random::<f64>() < rate {
            // Uniform over the C − 1 classes other than y.
            let k = rng.random_range(0..num_classes - 1);
            *y = if k >= *y { k + 1 } else { k };
            *m = true;
        }
    }
    Ok((out, mask))
}

pub fn corrupt_asymmetric<R: Rng + ?Sized>(
    labels: &[usize],
    rate: f64,
    num_classes: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<bool>)> {
    check_rate(rate, num_classes)?;
    check_labels(labels, num_classes)?;
    let mut out = labels.to_vec();
    let mut mask = vec![false; labels.len()];
    for (y, m) in out.iter_mut().zip(mask.iter_mut()) {
        if rng.random::<f64>() < rate {
            *y = (*y + 1) % num_classes;
            *m = true;
        }
    }
    Ok((out, mask))
}

/// Writes `index,original,corrupted` for every example.
pub fn write_corruption_manifest(path: impl AsRef<Path>, original: &[usize], corrupted: &[usize]) -> Result<()> {
    if original.len() != corrupted.len() {
        return Err(crate::error::shape_err(
            "corrupted",
            format!("{} labels vs {} originals", corrupted.len(), original.len()),
        ));
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "index,original,corrupted")?;
    for (i, (a, b)) in original.iter().zip(corrupted).enumerate() {
        writeln!(w, "{i},{a},{b}")?;
    }
    w.flush()?;
    Ok(())
}

//! MNIST-BAG: weakly labeled bags of instances where a fixed majority share the bag label.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ImageInstance;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bag {
    pub instance_ids: Vec<usize>,
    pub bag_label: usize,
    /// Instances whose true label equals `bag_label`.
    pub matching_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagDatasetSpec {
    pub bag_size: usize,
    pub num_bags_per_class: usize,
    pub distractor_fraction: f64,
    pub num_classes: usize,
    pub seed: u64,
}

impl BagDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.bag_size == 0 || self.num_bags_per_class == 0 {
            return Err(Error::Parameter(
                "bag_size and num_bags_per_class must be positive".into(),
            ));
        }
        if !(0.0..=0.5).contains(&self.distractor_fraction) {
            return Err(Error::Parameter(format!(
                "distractor_fraction {} outside [0, 0.5]",
                self.distractor_fraction
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Parameter("need at least two classes".into()));
        }
        Ok(())
    }

    /// Number of instances per bag that carry the bag label.
    pub fn matching_count(&self) -> usize {
        matching_count_for(self.bag_size, self.distractor_fraction)
    }
}

/// `ceil(n * (1 - distractor_fraction))`, robust to the rounding of the product.
pub fn matching_count_for(bag_size: usize, distractor_fraction: f64) -> usize {
    let exact = bag_size as f64 * (1.0 - distractor_fraction);
    ((exact - 1e-9).ceil().max(0.0) as usize).min(bag_size)
}

/// Builds `num_bags_per_class` bags for every class, cycling through the classes.
pub fn make_bags(instances: &[ImageInstance], spec: &BagDatasetSpec) -> Result<Vec<Bag>> {
    let labels: Vec<usize> = (0..spec.num_bags_per_class)
        .flat_map(|_| 0..spec.num_classes)
        .collect();
    make_bags_with_labels(instances, spec, &labels)
}

/// Builds one bag per entry of `bag_labels`.
///
/// Each bag holds exactly `spec.matching_count()` instances of its label and fills the rest
/// with distractors whose class is drawn uniformly from the other classes. Instances are
/// distinct within a bag but may recur across bags.
pub fn make_bags_with_labels(
    instances: &[ImageInstance],
    spec: &BagDatasetSpec,
    bag_labels: &[usize],
) -> Result<Vec<Bag>> {
    spec.validate()?;
    if instances.is_empty() {
        return Err(Error::Capacity("no instances to build bags from".into()));
    }
    let classes = spec.num_classes;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for inst in instances {
        match inst.true_label {
            Some(l) if l < classes => by_class[l].push(inst.id),
            Some(l) => return Err(Error::LabelRange { label: l, classes }),
            None => {
                return Err(Error::Parameter(format!(
                    "instance {} has no true label",
                    inst.id
                )))
            }
        }
    }
    let matching = spec.matching_count();
    let distractors = spec.bag_size - matching;
    for (class, ids) in by_class.iter().enumerate() {
        if ids.len() < matching {
            return Err(Error::Capacity(format!(
                "class {class} has {} instances, bags of size {} need {matching}",
                ids.len(),
                spec.bag_size
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut bags = Vec::with_capacity(bag_labels.len());
    for &label in bag_labels {
        if label >= classes {
            return Err(Error::LabelRange { label, classes });
        }
        let pool = &by_class[label];
        let mut ids: Vec<usize> = index::sample(&mut rng, pool.len(), matching)
            .into_iter()
            .map(|i| pool[i])
            .collect();

        let mut drawn: Vec<HashSet<usize>> = vec![HashSet::new(); classes];
        for _ in 0..distractors {
            let mut class = rng.random_range(0..classes - 1);
            if class >= label {
                class += 1;
            }
            let pool = &by_class[class];
            if drawn[class].len() >= pool.len() {
                return Err(Error::Capacity(format!(
                    "class {class} exhausted while drawing distractors for a bag of {}",
                    spec.bag_size
                )));
            }
            loop {
                let pos = rng.random_range(0..pool.len());
                if drawn[class].insert(pos) {
                    ids.push(pool[pos]);
                    break;
                }
            }
        }
        ids.shuffle(&mut rng);
        bags.push(Bag {
            instance_ids: ids,
            bag_label: label,
            matching_count: matching,
        });
    }
    Ok(bags)
}

/// Writes one `bag_label<TAB>id,id,...` line per bag.
pub fn write_manifest(bags: &[Bag], mut w: impl Write) -> Result<()> {
    let mut line = String::new();
    for bag in bags {
        line.clear();
        write!(line, "{}\t", bag.bag_label).expect("write to String");
        for (i, id) in bag.instance_ids.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            write!(line, "{id}").expect("write to String");
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a bag manifest, skipping `#` comment lines. `matching_count` is recomputed when
/// true labels are supplied (`true_labels[id]`), otherwise left at zero.
pub fn read_manifest(r: impl BufRead, true_labels: Option<&[Option<usize>]>) -> Result<Vec<Bag>> {
    let mut bags = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| Error::format("bag manifest", format!("line {}: {msg}", n + 1));
        let (label, ids) = line
            .split_once('\t')
            .ok_or_else(|| bad("missing tab separator".into()))?;
        let bag_label: usize = label.parse().map_err(|_| bad(format!("bad label {label:?}")))?;
        let instance_ids = ids
            .split(',')
            .map(|s| s.parse::<usize>().map_err(|_| bad(format!("bad instance id {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let matching_count = match true_labels {
            Some(t) => instance_ids
                .iter()
                .filter(|&&id| t.get(id).copied().flatten() == Some(bag_label))
                .count(),
            None => 0,
        };
        bags.push(Bag {
            instance_ids,
            bag_label,
            matching_count,
        });
    }
    Ok(bags)
}

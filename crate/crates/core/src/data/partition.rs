use std::collections::BTreeSet;

use super::{AnnotatedDataset, DataError, ImageId, Partitions};

/// Image ids per partition. Images listed nowhere default to training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionSpec {
    pub bootstrapping: Vec<ImageId>,
    pub training: Vec<ImageId>,
    pub testing: Vec<ImageId>,
    /// Whether bootstrapping images also join the training partition.
    pub bootstrap_in_training: bool,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            bootstrapping: Vec::new(),
            training: Vec::new(),
            testing: Vec::new(),
            bootstrap_in_training: true,
        }
    }
}

/// Re-partitions a dataset.
///
/// Bootstrapping images keep only human annotations; training images outside
/// the bootstrapping set lose all annotations, since they enter the loop
/// unlabeled. Testing images keep their full ground truth.
pub fn make_partitions(dataset: &AnnotatedDataset, spec: &PartitionSpec) -> Result<AnnotatedDataset, DataError> {
    let known: BTreeSet<ImageId> = dataset.images.iter().map(|im| im.id).collect();
    for id in spec.bootstrapping.iter().chain(&spec.training).chain(&spec.testing) {
        if !known.contains(id) {
            return Err(DataError::Partition(format!("unknown image id {id}")));
        }
    }

    let bootstrapping: BTreeSet<ImageId> = spec.bootstrapping.iter().copied().collect();
    let testing: BTreeSet<ImageId> = spec.testing.iter().copied().collect();
    let mut training: BTreeSet<ImageId> = spec.training.iter().copied().collect();
    if spec.bootstrap_in_training {
        training.extend(&bootstrapping);
    }
    if let Some(id) = testing
        .iter()
        .find(|id| training.contains(id) || bootstrapping.contains(id))
    {
        return Err(DataError::Partition(format!(
            "image {id} is assigned to testing and another partition"
        )));
    }
    for id in &known {
        if !bootstrapping.contains(id) && !training.contains(id) && !testing.contains(id) {
            training.insert(*id);
        }
    }

    let mut out = dataset.clone();
    out.annotations.retain(|a| {
        if testing.contains(&a.image_id) {
            true
        } else if bootstrapping.contains(&a.image_id) {
            a.source.is_human()
        } else {
            false
        }
    });
    out.partitions = Partitions {
        bootstrapping,
        training,
        testing,
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Annotation, CategoryDef, ImageRecord, Partition, Source};
    use crate::mask::RleMask;

    fn dataset(n: u64) -> AnnotatedDataset {
        let mut d = AnnotatedDataset {
            categories: vec![CategoryDef {
                id: 1,
                name: "grain".into(),
            }],
            ..Default::default()
        };
        for id in 1..=n {
            d.images.push(ImageRecord {
                id,
                width: 4,
                height: 4,
                file_path: format!("{id}.png"),
            });
            d.annotations.push(Annotation::human(
                2 * id,
                id,
                1,
                RleMask::new(4, 4, vec![0, 2, 14]).unwrap(),
            ));
            d.annotations.push(Annotation::new(
                2 * id + 1,
                id,
                1,
                RleMask::new(4, 4, vec![5, 2, 9]).unwrap(),
                Source::Inferred(1),
                0.6,
            ));
            d.partitions.training.insert(id);
        }
        d
    }

    #[test]
    fn single_testing_image_leaves_no_training() {
        let d = dataset(1);
        let p = make_partitions(
            &d,
            &PartitionSpec {
                testing: vec![1],
                ..Default::default()
            },
        )
        .unwrap();
        assert!(p.images_in(Partition::Training).is_empty());
        assert_eq!(p.annotations.len(), 2);
    }

    #[test]
    fn testing_overlap_is_rejected() {
        let d = dataset(2);
        let spec = PartitionSpec {
            training: vec![1],
            testing: vec![1],
            ..Default::default()
        };
        assert!(matches!(make_partitions(&d, &spec), Err(DataError::Partition(_))));
        let spec = PartitionSpec {
            bootstrapping: vec![2],
            testing: vec![2],
            ..Default::default()
        };
        assert!(matches!(make_partitions(&d, &spec), Err(DataError::Partition(_))));
        let spec = PartitionSpec {
            testing: vec![9],
            ..Default::default()
        };
        assert!(matches!(make_partitions(&d, &spec), Err(DataError::Partition(_))));
    }

    #[test]
    fn coffee_layout_counts() {
        let d = dataset(55);
        let spec = PartitionSpec {
            bootstrapping: vec![1, 2],
            training: (3..=52).collect(),
            testing: vec![53, 54, 55],
            bootstrap_in_training: true,
        };
        let p = make_partitions(&d, &spec).unwrap();
        let counts = (
            p.images_in(Partition::Bootstrapping).len(),
            p.images_in(Partition::Training).len(),
            p.images_in(Partition::Testing).len(),
        );
        assert_eq!(counts, (2, 52, 3));
        // Bootstrap images keep only human labels, other training images none.
        assert!(p.annotations_of(1).all(|a| a.source.is_human()));
        assert_eq!(p.annotations_of(1).count(), 1);
        assert_eq!(p.annotations_of(10).count(), 0);
        assert_eq!(p.annotations_of(54).count(), 2);
        p.validate(u64::MAX).unwrap();
    }

    #[test]
    fn bootstrap_can_be_excluded_from_training() {
        let d = dataset(3);
        let spec = PartitionSpec {
            bootstrapping: vec![1],
            training: vec![2],
            testing: vec![3],
            bootstrap_in_training: false,
        };
        let p = make_partitions(&d, &spec).unwrap();
        assert_eq!(p.partitions.partitions_of(1), vec![Partition::Bootstrapping]);
    }
}

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::model::{Image, Network};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteMember {
    pub image: Image,
    pub label: usize,
    /// Index of the image in the source dataset.
    pub source_index: usize,
}

/// Correctly classified inputs that a trigger has to generalize over.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSuite {
    pub members: Vec<SuiteMember>,
    pub warnings: Vec<String>,
}

impl TestSuite {
    /// Builds a suite from explicit members without any selection.
    pub fn from_members(members: Vec<SuiteMember>) -> Self {
        Self {
            members,
            warnings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn source_indices(&self) -> Vec<usize> {
        self.members.iter().map(|m| m.source_index).collect()
    }

    /// True when every member is still classified as its ground truth.
    pub fn recheck(&self, net: &Network) -> Result<bool> {
        for m in &self.members {
            if net.predict(&m.image)?.label != m.label {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub size: usize,
    pub seed: u64,
    /// Round-robin over ground-truth classes.
    pub stratify: bool,
    /// Expected miss tolerance; drives the class-homogeneity warning.
    pub k_hint: Option<usize>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            size: 16,
            seed: 0,
            stratify: true,
            k_hint: None,
        }
    }
}

/// Samples `opts.size` images that `net` classifies correctly.
pub fn select_test_suite(net: &Network, data: &Dataset, opts: SuiteOptions) -> Result<TestSuite> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if opts.size == 0 {
        return Err(Error::Config("suite size must be at least 1".into()));
    }
    if data.shape() != net.input_shape() {
        return Err(Error::ShapeMismatch {
            expected: net.input_shape().to_string(),
            actual: data.shape().to_string(),
        });
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));

    let mut correct = Vec::new();
    for i in order {
        let (img, label) = (&data.images()[i], data.labels()[i]);
        if net.predict(img)?.label == label {
            correct.push(i);
        }
    }
    if correct.len() < opts.size {
        return Err(Error::InsufficientSuite {
            requested: opts.size,
            achievable: correct.len(),
        });
    }

    let chosen: Vec<usize> = if opts.stratify {
        let mut by_class: BTreeMap<usize, std::collections::VecDeque<usize>> = BTreeMap::new();
        for &i in &correct {
            by_class.entry(data.labels()[i]).or_default().push_back(i);
        }
        let mut out = Vec::with_capacity(opts.size);
        while out.len() < opts.size {
            for queue in by_class.values_mut() {
                if out.len() == opts.size {
                    break;
                }
                if let Some(i) = queue.pop_front() {
                    out.push(i);
                }
            }
        }
        out
    } else {
        correct.into_iter().take(opts.size).collect()
    };

    let members: Vec<SuiteMember> = chosen
        .into_iter()
        .map(|i| SuiteMember {
            image: data.images()[i].clone(),
            label: data.labels()[i],
            source_index: i,
        })
        .collect();

    let mut warnings = Vec::new();
    let k = opts.k_hint.unwrap_or(0);
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for m in &members {
        *counts.entry(m.label).or_default() += 1;
    }
    if let Some((&label, &count)) = counts.iter().max_by_key(|&(_, &c)| c) {
        if count >= opts.size.saturating_sub(k) {
            let msg = format!(
                "class {label} covers {count} of {} suite members; with k = {k} a trigger \
                 for that label is satisfied without changing any prediction",
                opts.size
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    Ok(TestSuite { members, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::model::{Layer, Shape};

    /// Label = whichever of the two pixels is brighter.
    fn brighter_net() -> Network {
        Network::new(
            Shape::new(1, 2, 1),
            vec![Layer::Dense {
                weights: Matrix::identity(2),
                bias: vec![0.0, 0.0],
            }],
            2,
        )
        .unwrap()
    }

    fn dataset(n: usize) -> Dataset {
        let shape = Shape::new(1, 2, 1);
        let images: Vec<Image> = (0..n)
            .map(|i| {
                let a = (i % 7) as f64 / 10.0;
                if i % 3 == 0 {
                    Image::new(shape, vec![a + 0.2, a]).unwrap()
                } else {
                    Image::new(shape, vec![a, a + 0.2]).unwrap()
                }
            })
            .collect();
        let labels = (0..n).map(|i| usize::from(i % 3 != 0)).collect();
        Dataset::new(shape, images, labels).unwrap()
    }

    #[test]
    fn misclassifying_net_yields_zero_achievable() {
        let data = dataset(6);
        let flipped = Dataset::new(
            data.shape(),
            data.images().to_vec(),
            data.labels().iter().map(|l| 1 - l).collect(),
        )
        .unwrap();
        let err = select_test_suite(
            &brighter_net(),
            &flipped,
            SuiteOptions {
                size: 2,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientSuite {
                achievable: 0,
                requested: 2
            }
        ));
    }

    #[test]
    fn full_size_takes_everything() {
        let data = dataset(9);
        let suite = select_test_suite(
            &brighter_net(),
            &data,
            SuiteOptions {
                size: 9,
                ..Default::default()
            },
        )
        .unwrap();
        let mut idx = suite.source_indices();
        idx.sort_unstable();
        assert_eq!(idx, (0..9).collect::<Vec<_>>());
        assert!(suite.recheck(&brighter_net()).unwrap());
    }

    #[test]
    fn same_seed_same_members() {
        let data = dataset(30);
        let opts = SuiteOptions {
            size: 6,
            seed: 7,
            stratify: true,
            k_hint: Some(1),
        };
        let a = select_test_suite(&brighter_net(), &data, opts).unwrap();
        let b = select_test_suite(&brighter_net(), &data, opts).unwrap();
        assert_eq!(a.source_indices(), b.source_indices());
        let c = select_test_suite(&brighter_net(), &data, SuiteOptions { seed: 8, ..opts }).unwrap();
        assert_ne!(a.source_indices(), c.source_indices());
    }

    #[test]
    fn stratified_is_balanced_and_unique() {
        let data = dataset(30);
        let suite = select_test_suite(
            &brighter_net(),
            &data,
            SuiteOptions {
                size: 7,
                seed: 1,
                stratify: true,
                k_hint: Some(1),
            },
        )
        .unwrap();
        let ones = suite.members.iter().filter(|m| m.label == 1).count();
        assert!(ones == 3 || ones == 4);
        let mut idx = suite.source_indices();
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 7);
        assert!(suite.warnings.is_empty());
    }

    #[test]
    fn homogeneous_suite_warns() {
        let data = dataset(30);
        let only_ones: Vec<usize> = (0..30).filter(|i| i % 3 != 0).collect();
        let data = data.subset(&only_ones);
        let suite = select_test_suite(
            &brighter_net(),
            &data,
            SuiteOptions {
                size: 4,
                seed: 1,
                stratify: true,
                k_hint: Some(1),
            },
        )
        .unwrap();
        assert_eq!(suite.warnings.len(), 1);
    }
}

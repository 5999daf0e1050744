use serde::{Deserialize, Serialize};

use super::{Dataset, Sequence};
use crate::error::{Error, Result};

/// Train/test partition applied to every sequence by frame position.
///
/// Ranges are zero-based and half-open, `[start, end)`. When `test` is
/// absent the test set is every frame not in `train`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<[usize; 2]>,
    #[serde(default)]
    pub test: Option<Vec<[usize; 2]>>,
}

impl SplitSpec {
    /// Frames 1-800 for training, 801-2000 for testing.
    pub fn mall_paper() -> Self {
        SplitSpec { train: vec![[0, 800]], test: Some(vec![[800, 2000]]) }
    }

    /// Frames 601-1400 for training, the rest for testing.
    pub fn ucsd_paper() -> Self {
        SplitSpec { train: vec![[600, 1400]], test: None }
    }

    /// Everything for training.
    pub fn all_train() -> Self {
        SplitSpec { train: vec![[0, usize::MAX]], test: Some(vec![]) }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name.to_ascii_uppercase().as_str() {
            "MALL_PAPER" => Some(Self::mall_paper()),
            "UCSD_PAPER" => Some(Self::ucsd_paper()),
            "ALL_TRAIN" => Some(Self::all_train()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut all: Vec<(&str, [usize; 2])> = self.train.iter().map(|&r| ("train", r)).collect();
        if let Some(test) = &self.test {
            all.extend(test.iter().map(|&r| ("test", r)));
        }
        for &(_, [a, b]) in &all {
            if a > b {
                return Err(Error::invalid(format!("split range [{a}, {b}) is reversed")));
            }
        }
        for (i, &(na, [a0, a1])) in all.iter().enumerate() {
            for &(nb, [b0, b1]) in &all[i + 1..] {
                if a0.max(b0) < a1.min(b1) {
                    return Err(Error::SplitOverlap(format!("{na} [{a0}, {a1}) and {nb} [{b0}, {b1})")));
                }
            }
        }
        Ok(())
    }

    fn in_train(&self, i: usize) -> bool {
        self.train.iter().any(|&[a, b]| a <= i && i < b)
    }

    fn in_test(&self, i: usize) -> bool {
        match &self.test {
            Some(ranges) => ranges.iter().any(|&[a, b]| a <= i && i < b),
            None => !self.in_train(i),
        }
    }
}

/// Partitions every sequence of `ds` into train and test subsets.
pub fn apply_split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let pick = |keep: &dyn Fn(usize) -> bool| -> Vec<Sequence> {
        ds.sequences
            .iter()
            .map(|s| Sequence {
                frames: s.frames.iter().enumerate().filter(|(i, _)| keep(*i)).map(|(_, f)| f.clone()).collect(),
                ..s.clone()
            })
            .collect()
    };
    let train = Dataset { name: format!("{}-train", ds.name), sequences: pick(&|i| spec.in_train(i)) };
    let test = Dataset { name: format!("{}-test", ds.name), sequences: pick(&|i| spec.in_test(i)) };
    Ok((train, test))
}

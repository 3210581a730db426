use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Subject-independent cross-validation scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FoldScheme {
    /// One fold per subject, holding that subject out.
    Loso,
    /// Subjects split into k contiguous groups (after sorting by id).
    Kfold(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub id: usize,
    pub train_subjects: Vec<u32>,
    pub test_subjects: Vec<u32>,
}

/// Partitions subjects (never samples) into train/test folds.
pub fn make_folds(subjects: &[u32], scheme: FoldScheme) -> Result<Vec<Fold>> {
    let mut subjects = subjects.to_vec();
    subjects.sort_unstable();
    subjects.dedup();
    let n = subjects.len();
    let groups: Vec<Vec<u32>> = match scheme {
        FoldScheme::Loso => {
            if n < 2 {
                return Err(Error::config(format!(
                    "leave-one-subject-out needs at least 2 subjects, got {n}"
                )));
            }
            subjects.iter().map(|s| vec![*s]).collect()
        }
        FoldScheme::Kfold(k) => {
            if k < 2 || k > n {
                return Err(Error::config(format!(
                    "kfold({k}) needs 2 <= k <= subjects ({n})"
                )));
            }
            let (base, extra) = (n / k, n % k);
            let mut out = Vec::with_capacity(k);
            let mut start = 0;
            for i in 0..k {
                let len = base + usize::from(i < extra);
                out.push(subjects[start..start + len].to_vec());
                start += len;
            }
            out
        }
    };
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(id, test)| Fold {
            id,
            train_subjects: subjects.iter().copied().filter(|s| !test.contains(s)).collect(),
            test_subjects: test,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn kfold_sizes() {
        let subjects: Vec<u32> = (0..50).collect();
        let folds = make_folds(&subjects, FoldScheme::Kfold(3)).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|f| f.test_subjects.len()).collect();
        assert_eq!(sizes, vec![17, 17, 16]);
    }

    #[test]
    fn configuration_errors() {
        assert!(matches!(make_folds(&[1], FoldScheme::Loso), Err(Error::Config(_))));
        assert!(matches!(
            make_folds(&[1, 2], FoldScheme::Kfold(3)),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn folds_partition_subjects(n in 2u32..40, k in 2usize..6, loso in any::<bool>()) {
            prop_assume!(loso || k <= n as usize);
            let subjects: Vec<u32> = (0..n).map(|i| i * 7 + 3).collect();
            let scheme = if loso { FoldScheme::Loso } else { FoldScheme::Kfold(k) };
            let folds = make_folds(&subjects, scheme).unwrap();
            let mut seen = Vec::new();
            for f in &folds {
                for s in &f.test_subjects {
                    prop_assert!(!f.train_subjects.contains(s));
                }
                prop_assert_eq!(f.train_subjects.len() + f.test_subjects.len(), subjects.len());
                seen.extend(f.test_subjects.iter().copied());
            }
            seen.sort_unstable();
            prop_assert_eq!(seen, subjects);
        }
    }
}

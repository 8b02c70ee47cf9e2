use patchfuse::eval::make_folds;
use patchfuse::patch::Label;
use proptest::prelude::*;

fn labels(benign: usize, malignant: usize) -> Vec<Label> {
    let mut v = vec![Label::Benign; benign];
    v.extend(vec![Label::Malignant; malignant]);
    v
}

fn check(ls: &[Label], k: usize, seed: u64) {
    let plan = make_folds(ls, k, 0.2, seed).unwrap();
    assert_eq!(plan.folds.len(), k);
    let mut seen = vec![0usize; ls.len()];
    for f in &plan.folds {
        for &i in &f.test {
            seen[i] += 1;
        }
        let mut all: Vec<usize> = f.train.iter().chain(&f.val).chain(&f.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..ls.len()).collect::<Vec<_>>(), "fold {} is not a partition", f.index);
    }
    assert!(seen.iter().all(|&c| c == 1));
    for class in [Label::Benign, Label::Malignant] {
        let counts: Vec<usize> = plan
            .folds
            .iter()
            .map(|f| f.test.iter().filter(|&&i| ls[i] == class).count())
            .collect();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{class:?} counts {counts:?}");
    }
}

#[test]
fn partitions_and_stratifies_over_many_seeds() {
    let ls = labels(24, 36);
    for seed in 0..100 {
        check(&ls, 5, seed);
    }
}

#[test]
fn deterministic_per_seed() {
    let ls = labels(12, 18);
    assert_eq!(make_folds(&ls, 5, 0.2, 3).unwrap(), make_folds(&ls, 5, 0.2, 3).unwrap());
    assert_ne!(make_folds(&ls, 5, 0.2, 3).unwrap(), make_folds(&ls, 5, 0.2, 4).unwrap());
}

#[test]
fn rejects_impossible_plans() {
    let ls = labels(2, 2);
    assert!(make_folds(&ls, 5, 0.2, 0).is_err());
    assert!(make_folds(&ls, 1, 0.2, 0).is_err());
    assert!(make_folds(&ls, 2, 1.0, 0).is_err());
}

proptest! {
    #[test]
    fn any_split(b in 0usize..20, m in 0usize..20, k in 2usize..6, seed in any::<u64>()) {
        prop_assume!(b + m >= k);
        check(&labels(b, m), k, seed);
    }
}

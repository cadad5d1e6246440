use crate::error::{Error, Result};
use crate::rng::{streams, Rng};

use super::{Dataset, SplitTag};

/// Class-stratified train/val/test index sets, each sorted ascending.
///
/// Within every class the members are shuffled with the split stream, then the
/// first `round(f₀·n)` go to train and the next `round(f₁·n)` to validation.
pub fn split_indices(labels: &[usize], classes: usize, fractions: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    if fractions.iter().any(|f| !(*f >= 0.0) || !f.is_finite()) || fractions[0] <= 0.0 {
        return Err(Error::usage(format!("invalid split fractions {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::usage(format!("split fractions sum to {total}, not 1")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = Rng::new(seed, streams::SPLIT);
    let mut out: [Vec<usize>; 3] = Default::default();
    for members in &mut by_class {
        rng.shuffle(members);
        let n = members.len();
        let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
        let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
        out[0].extend_from_slice(&members[..n_train]);
        out[1].extend_from_slice(&members[n_train..n_train + n_val]);
        out[2].extend_from_slice(&members[n_train + n_val..]);
    }
    for part in &mut out {
        part.sort_unstable();
    }
    Ok(out)
}

pub fn split(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let [tr, va, te] = split_indices(ds.labels(), ds.classes(), fractions, seed)?;
    Ok((
        ds.subset(&tr).with_split(SplitTag::Train),
        ds.subset(&va).with_split(SplitTag::Val),
        ds.subset(&te).with_split(SplitTag::Test),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(classes: usize, per: usize) -> Vec<usize> {
        (0..classes * per).map(|i| i % classes).collect()
    }

    #[test]
    fn eighty_ten_ten() {
        let l = labels(2, 50);
        let [a, b, c] = split_indices(&l, 2, [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (80, 10, 10));
    }

    #[test]
    fn deterministic() {
        let l = labels(3, 40);
        assert_eq!(
            split_indices(&l, 3, [0.5, 0.25, 0.25], 4).unwrap(),
            split_indices(&l, 3, [0.5, 0.25, 0.25], 4).unwrap()
        );
        assert_ne!(
            split_indices(&l, 3, [0.5, 0.25, 0.25], 4).unwrap(),
            split_indices(&l, 3, [0.5, 0.25, 0.25], 5).unwrap()
        );
    }

    #[test]
    fn bad_fractions() {
        let l = labels(2, 5);
        assert!(matches!(split_indices(&l, 2, [0.5, 0.5, 0.5], 0), Err(Error::Usage(_))));
        assert!(matches!(split_indices(&l, 2, [-0.1, 0.6, 0.5], 0), Err(Error::Usage(_))));
    }

    #[test]
    fn stratified_counts_by_brute_force() {
        // unbalanced classes: sizes 7, 13, 31, 2
        let mut l = Vec::new();
        for (c, n) in [7usize, 13, 31, 2].iter().enumerate() {
            l.extend(std::iter::repeat_n(c, *n));
        }
        let fr = [0.7, 0.2, 0.1];
        let [tr, va, te] = split_indices(&l, 4, fr, 11).unwrap();
        for c in 0..4 {
            let size = l.iter().filter(|&&x| x == c).count() as f64;
            let in_train = tr.iter().filter(|&&i| l[i] == c).count() as f64;
            assert!((in_train - fr[0] * size).abs() <= 1.0, "class {c}");
        }
        let mut all: Vec<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
        all.sort();
        assert_eq!(all, (0..l.len()).collect::<Vec<_>>());
    }
}

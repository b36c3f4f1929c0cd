use crate::error::{Error, Result};

/// Indices that order `values` from largest to smallest; equal values keep
/// ascending index order.
pub fn descending_argsort(values: &[f64]) -> Result<Vec<usize>> {
    if let Some(i) = values.iter().position(|v| v.is_nan()) {
        return Err(Error::NonFinite(format!(
            "NaN at index {i} in argsort input"
        )));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .expect("NaN rejected above")
            .then(a.cmp(&b))
    });
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn selection_sort_oracle(values: &[f64]) -> Vec<usize> {
        let mut remaining: Vec<usize> = (0..values.len()).collect();
        let mut out = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for k in 1..remaining.len() {
                if values[remaining[k]] > values[remaining[best]] {
                    best = k;
                }
            }
            out.push(remaining.remove(best));
        }
        out
    }

    #[test]
    fn examples() {
        assert_eq!(
            descending_argsort(&[0.9, 0.1, 0.8, 0.2]).unwrap(),
            [0, 2, 3, 1]
        );
        assert_eq!(descending_argsort(&[0.5, 0.5, 0.5]).unwrap(), [0, 1, 2]);
    }

    #[test]
    fn nan_is_rejected() {
        assert!(descending_argsort(&[0.1, f64::NAN]).is_err());
    }

    #[test]
    fn matches_selection_sort() {
        let mut rng = SplitMix64::new(2024);
        for _ in 0..20 {
            // Coarse quantization forces plenty of ties.
            let values: Vec<f64> = (0..128).map(|_| (rng.next_f64() * 40.0).floor()).collect();
            assert_eq!(
                descending_argsort(&values).unwrap(),
                selection_sort_oracle(&values)
            );
        }
    }
}

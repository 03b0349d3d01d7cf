use std::ops::Range;

use super::EventStore;
use crate::error::{invalid, Result};

pub const DEFAULT_FRACTIONS: (f64, f64, f64) = (0.7, 0.15, 0.15);

/// Contiguous index ranges over the time-sorted events.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// First `floor(f_train * E)` events train, next `floor(f_val * E)` validate,
/// the remainder tests. Ties in time fall back to index order.
pub fn split_chronological(store: &EventStore, fractions: (f64, f64, f64)) -> Result<SplitRanges> {
    split_counts(store.edge_count(), fractions)
}

/// The same split over any `e` time-ordered items.
pub fn split_counts(e: usize, fractions: (f64, f64, f64)) -> Result<SplitRanges> {
    if e < 3 {
        return Err(invalid(format!("need at least 3 items to split, have {e}")));
    }
    let (a, b, c) = fractions;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(invalid(format!(
            "split fractions {fractions:?} must be positive and sum to 1"
        )));
    }
    // guard against 0.7 * 100 landing a hair under 70
    let floor = |x: f64| (x + 1e-9).floor() as usize;
    let n_train = floor(a * e as f64);
    let n_val = floor(b * e as f64);
    if n_train == 0 || n_val == 0 || n_train + n_val >= e {
        return Err(invalid(format!(
            "fractions {fractions:?} leave an empty split for {e} events"
        )));
    }
    Ok(SplitRanges {
        train: 0..n_train,
        val: n_train..n_train + n_val,
        test: n_train + n_val..e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Event;

    fn store(n: usize, same_time: bool) -> EventStore {
        let events = (0..n)
            .map(|i| {
                Event::new(
                    i % 5,
                    (i + 1) % 5,
                    if same_time { 1.0 } else { i as f64 },
                    vec![],
                )
            })
            .collect();
        EventStore::from_events(events, None).unwrap()
    }

    #[test]
    fn floor_arithmetic() {
        let s = split_chronological(&store(10, false), DEFAULT_FRACTIONS).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
        let s = split_chronological(&store(100, false), DEFAULT_FRACTIONS).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 15, 15));
    }

    #[test]
    fn ties_split_by_index() {
        let st = store(20, true);
        let s = split_chronological(&st, DEFAULT_FRACTIONS).unwrap();
        assert_eq!(s.train, 0..14);
        assert_eq!(st.original_index(13), 13);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(split_chronological(&store(2, false), DEFAULT_FRACTIONS).is_err());
        assert!(split_chronological(&store(10, false), (0.5, 0.5, 0.0)).is_err());
        assert!(split_chronological(&store(10, false), (0.5, 0.3, 0.3)).is_err());
    }
}

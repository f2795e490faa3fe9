use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::eval::boxes::BBox;

/// Default number of detections kept per image.
pub const DEFAULT_TOP_K: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// Global class id.
    pub class_id: usize,
    pub score: f64,
    /// Query the detection came from.
    pub query: usize,
}

/// Top-k over all (query, class) scores. A query may contribute several
/// classes. Ties keep (query, class) order.
pub fn postprocess(boxes: &Array2<f64>, scores: &Array2<f64>, class_ids: &[usize], top_k: usize) -> Vec<Detection> {
    let (n, k) = scores.dim();
    debug_assert_eq!(boxes.nrows(), n);
    debug_assert_eq!(class_ids.len(), k);
    let mut flat: Vec<(usize, usize)> = (0..n).flat_map(|q| (0..k).map(move |c| (q, c))).collect();
    // Stable sort keeps the (query, class) order among equal scores.
    flat.sort_by(|a, b| scores[[b.0, b.1]].total_cmp(&scores[[a.0, a.1]]));
    flat.truncate(top_k.min(n * k));
    flat.into_iter()
        .map(|(q, c)| Detection {
            bbox: BBox::new(boxes[[q, 0]], boxes[[q, 1]], boxes[[q, 2]], boxes[[q, 3]]),
            class_id: class_ids[c],
            score: scores[[q, c]],
            query: q,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn unit_boxes(n: usize) -> Array2<f64> {
        Array2::from_elem((n, 4), 0.5)
    }

    #[test]
    fn keeps_highest_scores() {
        let s = array![[0.9, 0.1], [0.2, 0.8]];
        let d = postprocess(&unit_boxes(2), &s, &[3, 7], 2);
        assert_eq!(d.iter().map(|x| x.score).collect::<Vec<_>>(), vec![0.9, 0.8]);
        assert_eq!((d[0].query, d[0].class_id), (0, 3));
        assert_eq!((d[1].query, d[1].class_id), (1, 7));
    }

    #[test]
    fn saturates_at_all_pairs() {
        let s = array![[0.3, 0.1], [0.2, 0.8]];
        let d = postprocess(&unit_boxes(2), &s, &[0, 1], 50);
        assert_eq!(d.len(), 4);
        assert!(d.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn ties_follow_query_then_class() {
        let s = array![[0.5, 0.5], [0.5, 0.9]];
        let d = postprocess(&unit_boxes(2), &s, &[0, 1], 4);
        let order: Vec<_> = d.iter().map(|x| (x.query, x.class_id)).collect();
        assert_eq!(order, vec![(1, 1), (0, 0), (0, 1), (1, 0)]);
    }
}

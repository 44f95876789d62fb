//! k-nearest-neighbour majority vote on Euclidean distance.

pub const DEFAULT_K: usize = 1;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Predicts each query by the majority label of its `k` nearest training
/// rows. Equal distances are ordered by training index; a tied vote goes to
/// the tied label whose first neighbour has the lowest training index.
pub fn knn_predict(train: &[Vec<f64>], labels: &[bool], queries: &[Vec<f64>], k: usize) -> Vec<bool> {
    assert!(k >= 1 && k <= train.len(), "k must lie in 1..=train size");
    queries
        .iter()
        .map(|q| {
            let mut order: Vec<(f64, usize)> = train
                .iter()
                .enumerate()
                .map(|(i, x)| (sq_dist(x, q), i))
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let nearest = &order[..k];
            let pos = nearest.iter().filter(|(_, i)| labels[*i]).count();
            let neg = k - pos;
            if pos != neg {
                return pos > neg;
            }
            let first_index = |want: bool| {
                nearest
                    .iter()
                    .filter(|(_, i)| labels[*i] == want)
                    .map(|(_, i)| *i)
                    .min()
                    .unwrap_or(usize::MAX)
            };
            first_index(true) < first_index(false)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_neighbour() {
        let train = vec![vec![0.0], vec![10.0]];
        assert_eq!(knn_predict(&train, &[false, true], &[vec![1.0]], 1), vec![false]);
    }

    #[test]
    fn self_prediction_is_exact() {
        let train: Vec<Vec<f64>> = (0..15).map(|i| vec![i as f64, (i * i % 7) as f64]).collect();
        let labels: Vec<bool> = (0..15).map(|i| i % 3 == 0).collect();
        assert_eq!(knn_predict(&train, &labels, &train, 1), labels);
    }

    #[test]
    fn full_k_is_majority() {
        let train: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let labels = [true, false, true, true, false];
        let preds = knn_predict(&train, &labels, &[vec![-100.0], vec![4.0], vec![100.0]], 5);
        assert_eq!(preds, vec![true; 3]);
    }

    #[test]
    fn ties() {
        // Equidistant neighbours: the lower training index wins.
        let train = vec![vec![1.0], vec![-1.0]];
        assert_eq!(knn_predict(&train, &[true, false], &[vec![0.0]], 1), vec![true]);
        assert_eq!(knn_predict(&train, &[false, true], &[vec![0.0]], 1), vec![false]);
        // 1-1 vote: label of the lowest training index among the two.
        let train = vec![vec![5.0], vec![0.0], vec![1.0]];
        assert_eq!(
            knn_predict(&train, &[true, false, true], &[vec![0.4]], 2),
            vec![false]
        );
    }
}

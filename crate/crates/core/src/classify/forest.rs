//! Random forest of Gini CART trees.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const DEFAULT_TREES: usize = 1000;

/// `⌊√p⌋`, at least 1.
pub fn default_mtry(p: usize) -> usize {
    ((p as f64).sqrt().floor() as usize).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// Features tried per split; `None` means `⌊√p⌋`.
    pub mtry: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: DEFAULT_TREES,
            mtry: None,
            bootstrap: true,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(bool),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Classification tree grown to purity (minimum node size 1).
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    nodes: Vec<Node>,
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

impl DecisionTree {
    /// Fits on the rows listed in `sample` (repeats allowed). At every node
    /// `mtry` features are drawn without replacement; among them the split
    /// with the lowest weighted Gini impurity wins, ties going to the lower
    /// feature index and then the lower threshold.
    pub fn fit<R: Rng>(
        x: &[Vec<f64>],
        y: &[bool],
        sample_rows: Vec<usize>,
        mtry: usize,
        rng: &mut R,
    ) -> Self {
        let p = x.first().map_or(0, Vec::len);
        let mtry = mtry.clamp(1, p.max(1));
        let mut tree = DecisionTree { nodes: Vec::new() };
        let mut stack = vec![(sample_rows, usize::MAX, false)];
        while let Some((rows, parent, is_right)) = stack.pop() {
            let id = tree.nodes.len();
            if parent != usize::MAX {
                if let Node::Split { left, right, .. } = &mut tree.nodes[parent] {
                    if is_right {
                        *right = id;
                    } else {
                        *left = id;
                    }
                }
            }
            let n = rows.len();
            let pos = rows.iter().filter(|&&i| y[i]).count();
            let majority = pos * 2 > n;
            if pos == 0 || pos == n || p == 0 {
                tree.nodes.push(Node::Leaf(majority));
                continue;
            }
            let mut features = sample(rng, p, mtry).into_vec();
            features.sort_unstable();
            let mut best: Option<(f64, usize, f64)> = None;
            let mut sorted = rows.clone();
            for &f in &features {
                sorted.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
                let mut left_pos = 0usize;
                for cut in 1..n {
                    left_pos += usize::from(y[sorted[cut - 1]]);
                    let (lo, hi) = (x[sorted[cut - 1]][f], x[sorted[cut]][f]);
                    if lo == hi {
                        continue;
                    }
                    let nl = cut;
                    let nr = n - cut;
                    let impurity =
                        (nl as f64 * gini(left_pos, nl) + nr as f64 * gini(pos - left_pos, nr)) / n as f64;
                    let threshold = lo + 0.5 * (hi - lo);
                    if best.is_none_or(|(b, _, _)| impurity < b - 1e-12) {
                        best = Some((impurity, f, threshold));
                    }
                }
            }
            match best {
                None => tree.nodes.push(Node::Leaf(majority)),
                Some((_, feature, threshold)) => {
                    let (l, r): (Vec<usize>, Vec<usize>) =
                        rows.iter().partition(|&&i| x[i][feature] <= threshold);
                    tree.nodes.push(Node::Split {
                        feature,
                        threshold,
                        left: usize::MAX,
                        right: usize::MAX,
                    });
                    stack.push((r, id, true));
                    stack.push((l, id, false));
                }
            }
        }
        tree
    }

    pub fn predict_one(&self, row: &[f64]) -> bool {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    pub trees: Vec<DecisionTree>,
}

impl RandomForest {
    /// Tree `t` uses stream `t` of a ChaCha8 generator keyed by `seed`, so
    /// the forest is identical for any thread count.
    pub fn fit(x: &[Vec<f64>], y: &[bool], cfg: &ForestConfig) -> Self {
        let n = x.len();
        let p = x.first().map_or(0, Vec::len);
        let mtry = cfg.mtry.unwrap_or_else(|| default_mtry(p));
        let trees = (0..cfg.n_trees.max(1))
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(t as u64);
                let rows: Vec<usize> = if cfg.bootstrap {
                    (0..n).map(|_| rng.random_range(0..n)).collect()
                } else {
                    (0..n).collect()
                };
                DecisionTree::fit(x, y, rows, mtry, &mut rng)
            })
            .collect();
        Self { trees }
    }

    /// Majority vote; an even split votes negative (active).
    pub fn predict(&self, rows: &[Vec<f64>]) -> Vec<bool> {
        rows.iter()
            .map(|r| {
                let pos = self.trees.iter().filter(|t| t.predict_one(r)).count();
                pos * 2 > self.trees.len()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xor_data() -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..40 {
            let a = (i % 7) as f64 - 3.0 + 0.1 * i as f64;
            let b = (i % 5) as f64 - 2.0 - 0.05 * i as f64;
            x.push(vec![a, b, (i % 3) as f64]);
            y.push((a > 0.0) != (b > 0.0));
        }
        (x, y)
    }

    #[test]
    fn default_mtry_rule() {
        assert_eq!(default_mtry(11), 3);
        assert_eq!(default_mtry(1012), 31);
        assert_eq!(default_mtry(1), 1);
    }

    #[test]
    fn grown_tree_fits_training_data() {
        let (x, y) = xor_data();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tree = DecisionTree::fit(&x, &y, (0..x.len()).collect(), 3, &mut rng);
        let preds: Vec<bool> = x.iter().map(|r| tree.predict_one(r)).collect();
        assert_eq!(preds, y);
    }

    #[test]
    fn single_tree_degeneration() {
        let (x, y) = xor_data();
        let cfg = ForestConfig {
            n_trees: 1,
            mtry: Some(3),
            bootstrap: false,
            seed: 99,
        };
        let forest = RandomForest::fit(&x, &y, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(12345);
        let tree = DecisionTree::fit(&x, &y, (0..x.len()).collect(), 3, &mut rng);
        assert_eq!(forest.trees[0], tree);
        let grid: Vec<Vec<f64>> = (0..50)
            .map(|i| vec![i as f64 * 0.2 - 5.0, 2.0 - i as f64 * 0.1, 1.0])
            .collect();
        let from_tree: Vec<bool> = grid.iter().map(|r| tree.predict_one(r)).collect();
        assert_eq!(forest.predict(&grid), from_tree);
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let (x, y) = xor_data();
        let cfg = ForestConfig {
            n_trees: 50,
            ..ForestConfig::default()
        };
        let a = RandomForest::fit(&x, &y, &cfg);
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| RandomForest::fit(&x, &y, &cfg));
        assert_eq!(a, b);
        assert_eq!(a.predict(&x), b.predict(&x));
    }
}

//! Isolation-forest scoring and percent-based outlier removal.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::QoSRecord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// upper bound on the per-tree sample; the data size is used if smaller
    pub subsample: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            subsample: 256,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug)]
enum Node {
    Leaf { size: usize },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Clone, Debug)]
struct Tree {
    nodes: Vec<Node>,
}

#[derive(Clone, Debug)]
pub struct IsolationForest {
    trees: Vec<Tree>,
    sample_size: usize,
    max_depth: usize,
}

fn harmonic(k: usize) -> f64 {
    (1..=k).map(|i| 1.0 / i as f64).sum()
}

/// Average unsuccessful-search path length in a binary tree of `n` points.
pub fn path_normalizer(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        _ => 2.0 * harmonic(n - 1) - 2.0 * (n - 1) as f64 / n as f64,
    }
}

impl Tree {
    fn build(points: &[Vec<f64>], idx: Vec<usize>, max_depth: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut tree = Tree { nodes: Vec::new() };
        tree.grow(points, idx, 0, max_depth, rng);
        tree
    }

    fn grow(&mut self, points: &[Vec<f64>], idx: Vec<usize>, depth: usize, max_depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { size: idx.len() });
        if depth >= max_depth || idx.len() <= 1 {
            return at;
        }
        let dims = points[idx[0]].len();
        let feature = rng.gen_range(0..dims);
        let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
            (lo.min(points[i][feature]), hi.max(points[i][feature]))
        });
        if lo >= hi {
            return at;
        }
        let threshold = rng.gen_range(lo..hi);
        let (l, r): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| points[i][feature] < threshold);
        let left = self.grow(points, l, depth + 1, max_depth, rng);
        let right = self.grow(points, r, depth + 1, max_depth, rng);
        self.nodes[at] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        at
    }

    fn path_length(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        let mut depth = 0.0;
        loop {
            match self.nodes[at] {
                Node::Leaf { size } => return depth + path_normalizer(size),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[feature] < threshold { left } else { right };
                    depth += 1.0;
                }
            }
        }
    }

    fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

impl IsolationForest {
    pub fn fit(points: &[Vec<f64>], cfg: &ForestConfig) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Data(format!("isolation forest needs >= 2 points, got {}", points.len())));
        }
        let dims = points[0].len();
        if dims == 0 || points.iter().any(|p| p.len() != dims) {
            return Err(Error::Data("isolation forest points must share a non-zero dimension".into()));
        }
        if cfg.n_trees == 0 || cfg.subsample < 2 {
            return Err(Error::Config("isolation forest needs >= 1 tree and subsample >= 2".into()));
        }
        let sample_size = cfg.subsample.min(points.len());
        let max_depth = (sample_size as f64).log2().ceil() as usize;
        let trees = (0..cfg.n_trees)
            .into_par_iter()
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(k as u64);
                let idx = sample(&mut rng, points.len(), sample_size).into_vec();
                Tree::build(points, idx, max_depth, &mut rng)
            })
            .collect();
        Ok(Self {
            trees,
            sample_size,
            max_depth,
        })
    }

    /// `2^(-E[h(x)] / c(ψ))`.
    pub fn score(&self, x: &[f64]) -> f64 {
        let mean = self.trees.iter().map(|t| t.path_length(x)).sum::<f64>() / self.trees.len() as f64;
        2f64.powf(-mean / path_normalizer(self.sample_size))
    }

    pub fn max_tree_depth(&self) -> usize {
        self.trees.iter().map(Tree::depth).max().unwrap_or(0)
    }

    pub fn depth_limit(&self) -> usize {
        self.max_depth
    }
}

/// Fits on `points` and scores each of them.
pub fn fit_score(points: &[Vec<f64>], cfg: &ForestConfig) -> Result<Vec<f64>> {
    let forest = IsolationForest::fit(points, cfg)?;
    Ok(points.iter().map(|p| forest.score(p)).collect())
}

/// Score given to records of a step with fewer than two records.
pub const NEUTRAL_SCORE: f64 = 0.5;

/// One-dimensional scores on the value, with a separate forest per step.
pub fn score_records(records: &[QoSRecord], cfg: &ForestConfig) -> Result<Vec<f64>> {
    let mut scores = vec![NEUTRAL_SCORE; records.len()];
    let mut steps: Vec<usize> = records.iter().map(|r| r.time).collect();
    steps.sort_unstable();
    steps.dedup();
    for t in steps {
        let idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].time == t).collect();
        if idx.len() < 2 {
            continue;
        }
        let points: Vec<Vec<f64>> = idx.iter().map(|&i| vec![records[i].value]).collect();
        let step_cfg = ForestConfig {
            seed: cfg.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            ..*cfg
        };
        for (&i, s) in idx.iter().zip(fit_score(&points, &step_cfg)?) {
            scores[i] = s;
        }
    }
    Ok(scores)
}

#[derive(Clone, Debug)]
pub struct Removal {
    pub kept: Vec<QoSRecord>,
    /// indices into the input, in removal order (highest score first)
    pub removed: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Drops the `⌊λ% · count⌋` highest-scoring records; ties go to the lower index.
pub fn remove_outliers(records: &[QoSRecord], lambda: f64, cfg: &ForestConfig) -> Result<Removal> {
    if !(0.0..=50.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda = {lambda} not in [0, 50]")));
    }
    let k = (lambda / 100.0 * records.len() as f64 + 1e-9).floor() as usize;
    if k == 0 {
        return Ok(Removal {
            kept: records.to_vec(),
            removed: Vec::new(),
            scores: if records.len() >= 2 { score_records(records, cfg)? } else { vec![NEUTRAL_SCORE; records.len()] },
        });
    }
    let scores = score_records(records, cfg)?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let removed: Vec<usize> = order[..k].to_vec();
    let mut drop = vec![false; records.len()];
    for &i in &removed {
        drop[i] = true;
    }
    let kept = records.iter().zip(&drop).filter(|(_, &d)| !d).map(|(r, _)| *r).collect();
    Ok(Removal { kept, removed, scores })
}

//! The memetic loop: random trees, gradient refinement, selection, crossover and
//! mutation.
//!
//! All randomness is drawn from ChaCha streams keyed by `(seed, purpose,
//! generation, index)`, so training trees in parallel does not change results.

use std::path::Path;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmpfError};
use crate::optimize::{fitness, sample_batch, train_tree, Batch, FitnessRecord, Oracle};
use crate::primitives::{FunctionSet, PrimitiveFunction};
use crate::scalar::Scalar;
use crate::tree::{Child, HiddenNode, MetamodelTree};

/// Hyperparameters of a full run. Field comments give the conventional symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmpfConfig {
    /// M
    pub population: usize,
    /// l1
    pub min_nodes: usize,
    /// l2
    pub max_nodes: usize,
    /// s
    pub survivors: usize,
    /// p0
    pub edge_prob: f64,
    /// k
    pub gd_steps: usize,
    /// Thr: the run stops once the best fitness drops below it.
    pub threshold: f64,
    /// lr
    pub learning_rate: f64,
    /// λ
    pub lambda: f64,
    pub p_cross: f64,
    pub p_del: f64,
    /// n_m
    pub mutation_actions: usize,
    /// Max_itr
    pub max_iter: usize,
    /// m: points per training batch and per fitness batch.
    pub batch_size: usize,
    /// H
    pub hidden_layers: usize,
    pub function_set: FunctionSet,
    pub seed: u64,
    /// Sampling box for synthetic targets, one `[lo, hi]` per feature. Unset means `[0, 1]^d`.
    pub domain: Option<Vec<[f64; 2]>>,
}

impl Default for SmpfConfig {
    fn default() -> Self {
        SmpfConfig {
            population: 20,
            min_nodes: 1,
            max_nodes: 2,
            survivors: 4,
            edge_prob: 0.7,
            gd_steps: 20,
            threshold: 0.0,
            learning_rate: 0.1,
            lambda: 0.0,
            p_cross: 0.5,
            p_del: 0.5,
            mutation_actions: 1,
            max_iter: 30,
            batch_size: 1024,
            hidden_layers: 1,
            function_set: FunctionSet::main5(),
            seed: 0,
            domain: None,
        }
    }
}

impl SmpfConfig {
    /// Fixed-function fitting: one middle node, no edge deletion.
    pub fn exp1() -> Self {
        SmpfConfig {
            population: 20,
            gd_steps: 20,
            learning_rate: 0.1,
            max_iter: 30,
            survivors: 4,
            min_nodes: 1,
            max_nodes: 1,
            edge_prob: 1.0,
            p_cross: 0.2,
            p_del: 0.0,
            ..Self::default()
        }
    }

    /// Instance-wise importance runs.
    pub fn exp2() -> Self {
        SmpfConfig {
            population: 20,
            survivors: 2,
            gd_steps: 10,
            max_iter: 10,
            learning_rate: 0.01,
            edge_prob: 0.7,
            p_cross: 0.7,
            p_del: 0.5,
            min_nodes: 2,
            max_nodes: 2,
            mutation_actions: 1,
            ..Self::default()
        }
    }

    /// Black-box surrogate runs on tabular data.
    pub fn exp3() -> Self {
        SmpfConfig {
            population: 20,
            survivors: 4,
            max_iter: 20,
            gd_steps: 20,
            learning_rate: 0.05,
            edge_prob: 0.6,
            p_cross: 0.7,
            p_del: 0.5,
            min_nodes: 2,
            max_nodes: 2,
            mutation_actions: 1,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "exp1" => Some(Self::exp1()),
            "exp2" => Some(Self::exp2()),
            "exp3" => Some(Self::exp3()),
            _ => None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SmpfConfig =
            serde_json::from_str(text).map_err(|e| SmpfError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(SmpfError::Config(msg));
        let prob = |v: f64| (0.0..=1.0).contains(&v);
        if self.survivors == 0 {
            return fail("survivors (s) must be at least 1".into());
        }
        if self.population < self.survivors {
            return fail(format!(
                "population (M = {}) must be at least survivors (s = {})",
                self.population, self.survivors
            ));
        }
        if self.population % self.survivors != 0 {
            return fail(format!(
                "population (M = {}) must be divisible by survivors (s = {}): M mod s = {}",
                self.population,
                self.survivors,
                self.population % self.survivors
            ));
        }
        if self.min_nodes == 0 || self.min_nodes > self.max_nodes {
            return fail(format!(
                "need 1 <= min_nodes <= max_nodes, got {} and {}",
                self.min_nodes, self.max_nodes
            ));
        }
        if !(self.edge_prob > 0.0 && self.edge_prob <= 1.0) {
            return fail(format!("edge_prob (p0) must lie in (0, 1], got {}", self.edge_prob));
        }
        if !prob(self.p_cross) || !prob(self.p_del) {
            return fail("p_cross and p_del must lie in [0, 1]".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.threshold.is_nan() {
            return fail("threshold must be a number".into());
        }
        if self.mutation_actions == 0 {
            return fail("mutation_actions (n_m) must be at least 1".into());
        }
        if self.hidden_layers == 0 {
            return fail("hidden_layers (H) must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size (m) must be at least 1".into());
        }
        if let Some(domain) = &self.domain {
            for (i, [lo, hi]) in domain.iter().enumerate() {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return fail(format!("domain axis {i} is not a proper interval: [{lo}, {hi}]"));
                }
            }
        }
        Ok(())
    }

    /// The configured domain box, or `[0, 1]^dim`.
    pub fn domain_for(&self, dim: usize) -> Result<Vec<(f64, f64)>> {
        match &self.domain {
            None => Ok(vec![(0.0, 1.0); dim]),
            Some(d) if d.len() == dim => Ok(d.iter().map(|[lo, hi]| (*lo, *hi)).collect()),
            Some(d) => Err(SmpfError::DimensionMismatch {
                expected: dim,
                got: d.len(),
            }),
        }
    }
}

/// Purpose tag separating the random streams of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Train = 2,
    Fitness = 3,
    Evolve = 4,
    TestSet = 5,
    TrainEval = 6,
    Split = 7,
}

/// Independent generator for `(seed, purpose, generation, index)`.
pub fn stream_rng(seed: u64, purpose: Stream, generation: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = ((purpose as u64) << 56) ^ ((generation as u64) << 28) ^ index as u64;
    rng.set_stream(id);
    rng
}

/// Random adjacency between `nodes` parents and `targets` children: each pair with
/// probability `p0`, then every uncovered target is attached to a uniform parent
/// and every childless parent to a uniform target. Child lists come out sorted.
pub fn random_links<R: Rng + ?Sized>(nodes: usize, targets: usize, p0: f64, rng: &mut R) -> Vec<Vec<usize>> {
    let mut links: Vec<Vec<usize>> = (0..nodes)
        .map(|_| (0..targets).filter(|_| rng.random::<f64>() < p0).collect())
        .collect();
    for v in 0..targets {
        if !links.iter().any(|c| c.contains(&v)) {
            let u = rng.random_range(0..nodes);
            links[u].push(v);
        }
    }
    for children in links.iter_mut() {
        if children.is_empty() {
            children.push(rng.random_range(0..targets));
        }
        children.sort_unstable();
    }
    links
}

/// A fresh random individual with `dim` features.
pub fn random_tree<T: Scalar, R: Rng + ?Sized>(cfg: &SmpfConfig, dim: usize, rng: &mut R) -> MetamodelTree<T> {
    let widths: Vec<usize> = (0..cfg.hidden_layers)
        .map(|_| rng.random_range(cfg.min_nodes..=cfg.max_nodes))
        .collect();
    let mut structure = Vec::with_capacity(widths.len());
    for (l, &w) in widths.iter().enumerate() {
        let targets = if l == 0 { dim } else { widths[l - 1] };
        structure.push(random_links(w, targets, cfg.edge_prob, rng));
    }
    let fs = &cfg.function_set;
    let fresh = |rng: &mut R| PrimitiveFunction::random(fs.choose(rng), rng);
    let layers = structure
        .into_iter()
        .enumerate()
        .map(|(l, nodes)| {
            nodes
                .into_iter()
                .map(|children| {
                    let children: Vec<Child<T>> = children
                        .into_iter()
                        .map(|target| Child {
                            target,
                            func: (l == 0).then(|| fresh(rng)),
                        })
                        .collect();
                    HiddenNode {
                        outgoing: fresh(rng),
                        children,
                    }
                })
                .collect()
        })
        .collect();
    MetamodelTree::new(dim, layers).expect("random trees satisfy the structural invariants")
}

/// Replace node `node` of hidden layer `layer` in `tree` with a copy of node
/// `donor_node` of the same layer in `donor`, keeping the donor's functions and
/// parameters. Links that fall outside the recipient's range are redrawn uniformly;
/// duplicates created that way are dropped.
pub fn crossover_at<T: Scalar, R: Rng + ?Sized>(
    tree: &MetamodelTree<T>,
    layer: usize,
    node: usize,
    donor: &MetamodelTree<T>,
    donor_node: usize,
    rng: &mut R,
) -> MetamodelTree<T> {
    let mut out = tree.clone();
    let range = if layer == 0 {
        tree.dim()
    } else {
        tree.layers()[layer - 1].len()
    };
    let mut incoming = donor.layers()[layer][donor_node].clone();
    for c in incoming.children.iter_mut() {
        if c.target >= range {
            debug_assert!(layer > 0, "feature links never leave the shared feature range");
            c.target = rng.random_range(0..range);
        }
    }
    let mut seen = Vec::with_capacity(incoming.children.len());
    incoming.children.retain(|c| {
        let fresh = !seen.contains(&c.target);
        seen.push(c.target);
        fresh
    });
    out.layers_mut()[layer][node] = incoming;
    debug_assert!(out.validate().is_ok());
    out
}

/// Swap one uniformly chosen hidden node (uniform layer, then uniform node) for a
/// uniformly chosen node of the same layer in a uniformly chosen donor.
pub fn crossover<T: Scalar, R: Rng + ?Sized>(
    tree: &MetamodelTree<T>,
    donors: &[&MetamodelTree<T>],
    rng: &mut R,
) -> MetamodelTree<T> {
    assert!(!donors.is_empty(), "crossover needs at least one donor");
    let layer = rng.random_range(0..tree.depth());
    let node = rng.random_range(0..tree.layers()[layer].len());
    let donor = donors[rng.random_range(0..donors.len())];
    let layer = layer.min(donor.depth() - 1);
    let donor_node = rng.random_range(0..donor.layers()[layer].len());
    crossover_at(tree, layer, node, donor, donor_node, rng)
}

/// Apply `n_m` mutation actions. Each one deletes a child link with probability
/// `p_del` (never a node's last child; after `E` unsuccessful draws it falls back)
/// and otherwise re-draws the class and parameters of a uniformly chosen function.
pub fn mutate<T: Scalar, R: Rng + ?Sized>(tree: &MetamodelTree<T>, cfg: &SmpfConfig, rng: &mut R) -> MetamodelTree<T> {
    let mut out = tree.clone();
    for _ in 0..cfg.mutation_actions {
        if rng.random::<f64>() < cfg.p_del && delete_link(&mut out, rng) {
            continue;
        }
        change_class(&mut out, &cfg.function_set, rng);
    }
    debug_assert!(out.validate().is_ok());
    out
}

fn delete_link<T: Scalar, R: Rng + ?Sized>(tree: &mut MetamodelTree<T>, rng: &mut R) -> bool {
    let links: Vec<(usize, usize, usize)> = tree
        .layers()
        .iter()
        .enumerate()
        .flat_map(|(l, nodes)| {
            nodes
                .iter()
                .enumerate()
                .flat_map(move |(n, node)| (0..node.children.len()).map(move |c| (l, n, c)))
        })
        .collect();
    for _ in 0..tree.edge_count() {
        let (l, n, c) = links[rng.random_range(0..links.len())];
        let children = &mut tree.layers_mut()[l][n].children;
        if children.len() > 1 {
            children.remove(c);
            return true;
        }
    }
    false
}

fn change_class<T: Scalar, R: Rng + ?Sized>(tree: &mut MetamodelTree<T>, fs: &FunctionSet, rng: &mut R) {
    let slots = tree.slots();
    let slot = slots[rng.random_range(0..slots.len())];
    let class = fs.choose(rng);
    let fresh = PrimitiveFunction::random(class, rng);
    *tree.function_mut(slot).expect("slot exists") = fresh;
}

/// One population together with its fitness records (empty until evaluated).
#[derive(Debug, Clone)]
pub struct Generation<T> {
    pub index: usize,
    /// The population as bred, before gradient refinement.
    pub untrained: Vec<MetamodelTree<T>>,
    pub trees: Vec<MetamodelTree<T>>,
    pub records: Vec<FitnessRecord<T>>,
}

impl<T: Scalar> Generation<T> {
    pub fn is_evaluated(&self) -> bool {
        self.records.len() == self.trees.len()
    }

    /// Population indices from best to worst.
    pub fn ranking(&self) -> Vec<usize> {
        rank_records(&self.records)
    }

    pub fn best(&self) -> Option<(&MetamodelTree<T>, &FitnessRecord<T>)> {
        let i = *self.ranking().first()?;
        Some((&self.trees[i], &self.records[i]))
    }
}

/// Indices ordered by fitness, then edge count, then index.
pub fn rank_records<T: Scalar>(records: &[FitnessRecord<T>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&records[a], &records[b]);
        ra.fitness
            .partial_cmp(&rb.fitness)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(ra.edges.cmp(&rb.edges))
            .then(a.cmp(&b))
    });
    order
}

/// Selection and reproduction. The `s` best trees are kept unchanged at the front;
/// each then yields `M/s - 1` offspring by crossover (probability `p_cross`, donors
/// drawn from the survivors) or mutation.
pub fn next_generation<T: Scalar, R: Rng + ?Sized>(gen: &Generation<T>, cfg: &SmpfConfig, rng: &mut R) -> Generation<T> {
    assert!(gen.is_evaluated(), "selection needs fitness records");
    let ranking = gen.ranking();
    let survivors: Vec<&MetamodelTree<T>> = ranking
        .iter()
        .take(cfg.survivors)
        .map(|&i| &gen.trees[i])
        .collect();
    let per_parent = cfg.population / cfg.survivors - 1;
    let mut trees: Vec<MetamodelTree<T>> = survivors.iter().map(|t| (*t).clone()).collect();
    for parent in &survivors {
        for _ in 0..per_parent {
            let child = if rng.random::<f64>() < cfg.p_cross {
                crossover(parent, &survivors, rng)
            } else {
                mutate(parent, cfg, rng)
            };
            trees.push(child);
        }
    }
    Generation {
        index: gen.index + 1,
        untrained: trees.clone(),
        trees,
        records: Vec::new(),
    }
}

#[derive(Debug, Clone)]
pub struct SmpfResult<T> {
    pub best: MetamodelTree<T>,
    pub best_record: FitnessRecord<T>,
    /// Best record of every evaluated generation.
    pub history: Vec<FitnessRecord<T>>,
}

pub fn run_smpf<T: Scalar>(oracle: &Oracle<T>, cfg: &SmpfConfig) -> Result<SmpfResult<T>> {
    run_smpf_observed(oracle, cfg, |_| {})
}

/// Same as [`run_smpf`], calling `observe` on every generation once it is evaluated.
pub fn run_smpf_observed<T: Scalar>(
    oracle: &Oracle<T>,
    cfg: &SmpfConfig,
    mut observe: impl FnMut(&Generation<T>),
) -> Result<SmpfResult<T>> {
    cfg.validate()?;
    let dim = oracle.dim();
    let seed = cfg.seed;
    let trees: Vec<MetamodelTree<T>> = (0..cfg.population)
        .map(|i| random_tree(cfg, dim, &mut stream_rng(seed, Stream::Init, 0, i)))
        .collect();
    let mut gen = Generation {
        index: 0,
        untrained: trees.clone(),
        trees,
        records: Vec::new(),
    };
    let lr = T::of(cfg.learning_rate);
    let lambda = T::of(cfg.lambda);
    let mut history = Vec::new();
    loop {
        let g = gen.index;
        gen.trees = gen
            .trees
            .par_iter()
            .enumerate()
            .map(|(i, t)| {
                let mut rng = stream_rng(seed, Stream::Train, g, i);
                train_tree(t, oracle, cfg.gd_steps, lr, cfg.batch_size, &mut rng)
            })
            .collect::<Result<_>>()?;
        let batch: Batch<T> = sample_batch(oracle, cfg.batch_size, &mut stream_rng(seed, Stream::Fitness, g, 0));
        gen.records = gen
            .trees
            .par_iter()
            .map(|t| fitness(t, &batch, lambda))
            .collect::<Result<_>>()?;
        observe(&gen);
        let (_, best) = gen.best().expect("population is never empty");
        debug!(
            "generation {g}: best fitness {} (mse {}, {} edges)",
            best.fitness, best.mse, best.edges
        );
        history.push(*best);
        if best.fitness < T::of(cfg.threshold) || g >= cfg.max_iter {
            break;
        }
        gen = next_generation(&gen, cfg, &mut stream_rng(seed, Stream::Evolve, g, 0));
    }
    let (best, record) = gen.best().expect("population is never empty");
    Ok(SmpfResult {
        best: best.clone(),
        best_record: *record,
        history,
    })
}

//! NSGA-II search over the joint feature-subset x SVR-hyperparameter space,
//! minimizing grouped k-fold CV error and feature count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::mean_abs_deviation;
use crate::pipeline::grouped_kfold_ids;
use crate::svr::{self, SvrParams, DEFAULT_EPSILON};

/// Objective value assigned to genomes whose training fails in any fold.
pub const SENTINEL_MAD: f64 = 1e12;

pub const LOG2_C_BOUNDS: (f64, f64) = (-5.0, 15.0);
pub const LOG2_GAMMA_BOUNDS: (f64, f64) = (-15.0, 3.0);

/// One candidate: feature mask plus log2-space hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Genome {
    pub mask: Vec<bool>,
    pub log2_c: f64,
    pub log2_gamma: f64,
}

impl Genome {
    /// Clamp reals into bounds and force at least one mask bit.
    pub fn repair(&mut self, cfg: &GaConfig, rng: &mut ChaCha8Rng) {
        self.log2_c = self.log2_c.clamp(cfg.log2_c_bounds.0, cfg.log2_c_bounds.1);
        self.log2_gamma = self
            .log2_gamma
            .clamp(cfg.log2_gamma_bounds.0, cfg.log2_gamma_bounds.1);
        if !self.mask.iter().any(|&b| b) {
            let i = rng.gen_range(0..self.mask.len());
            self.mask[i] = true;
        }
    }

    pub fn n_features(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn params(&self) -> SvrParams {
        SvrParams {
            c_penalty: self.log2_c.exp2(),
            gamma: self.log2_gamma.exp2(),
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// Minimization objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objectives {
    pub cv_mad: f64,
    pub n_features: usize,
}

impl Objectives {
    /// a dominates b: <= in all objectives and < in at least one.
    pub fn dominates(&self, other: &Objectives) -> bool {
        let le = self.cv_mad <= other.cv_mad && self.n_features <= other.n_features;
        let lt = self.cv_mad < other.cv_mad || self.n_features < other.n_features;
        le && lt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaConfig {
    pub population_size: usize,
    pub generations: usize,
    pub k_folds: usize,
    pub crossover_prob: f64,
    /// Per-gene mutation probability; None = 1 / genome_length.
    pub mutation_prob: Option<f64>,
    pub log2_c_bounds: (f64, f64),
    pub log2_gamma_bounds: (f64, f64),
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population_size: 40,
            generations: 50,
            k_folds: 6,
            crossover_prob: 0.9,
            mutation_prob: None,
            log2_c_bounds: LOG2_C_BOUNDS,
            log2_gamma_bounds: LOG2_GAMMA_BOUNDS,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_size < 4 || self.population_size % 2 != 0 {
            return Err(Error::Parameter(
                "population_size must be even and >= 4".into(),
            ));
        }
        if self.k_folds < 2 {
            return Err(Error::Parameter("k_folds must be >= 2".into()));
        }
        let p_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !p_ok(self.crossover_prob) || !self.mutation_prob.map_or(true, p_ok) {
            return Err(Error::Parameter("probabilities must lie in [0,1]".into()));
        }
        if self.log2_c_bounds.0 > self.log2_c_bounds.1
            || self.log2_gamma_bounds.0 > self.log2_gamma_bounds.1
        {
            return Err(Error::Parameter("invalid hyperparameter bounds".into()));
        }
        Ok(())
    }
}

/// Feature matrix with one target column and patient grouping labels.
#[derive(Debug, Clone)]
pub struct SearchDataset {
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub patient_ids: Vec<String>,
    pub feature_names: Vec<String>,
    /// Treat target residuals as angles in degrees (wrap at 360).
    pub wrap_degrees: bool,
}

impl SearchDataset {
    fn validate(&self) -> Result<()> {
        let n = self.features.len();
        if n == 0 || self.targets.len() != n || self.patient_ids.len() != n {
            return Err(Error::Precondition("inconsistent dataset shape".into()));
        }
        let w = self.feature_names.len();
        if self.features.iter().any(|r| r.len() != w) {
            return Err(Error::Precondition("ragged feature matrix".into()));
        }
        Ok(())
    }
}

/// Fronts of indices, best first.
pub fn non_dominated_sort(points: &[Objectives]) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut dominated_by = vec![0usize; n];
    let mut dominates: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if i != j && points[i].dominates(&points[j]) {
                dominates[i].push(j);
                dominated_by[j] += 1;
            }
        }
    }
    let mut fronts: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| dominated_by[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominates[i] {
                dominated_by[j] -= 1;
                if dominated_by[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(std::mem::take(&mut current));
        current = next;
    }
    fronts
}

/// Crowding distances for one front; boundary points get infinity.
pub fn crowding_distance(front: &[Objectives]) -> Vec<f64> {
    let n = front.len();
    let mut dist = vec![0.0f64; n];
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let objectives: [Vec<f64>; 2] = [
        front.iter().map(|o| o.cv_mad).collect(),
        front.iter().map(|o| o.n_features as f64).collect(),
    ];
    for vals in &objectives {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
        let range = vals[order[n - 1]] - vals[order[0]];
        dist[order[0]] = f64::INFINITY;
        dist[order[n - 1]] = f64::INFINITY;
        if range <= 0.0 {
            continue; // degenerate objective contributes nothing
        }
        for w in 1..n - 1 {
            let i = order[w];
            if dist[i].is_finite() {
                dist[i] += (vals[order[w + 1]] - vals[order[w - 1]]) / range;
            }
        }
    }
    dist
}

/// Grouped k-fold CV objectives for one genome. Training failure in any
/// fold yields the sentinel objectives instead of an error.
pub fn evaluate_genome(g: &Genome, ds: &SearchDataset, cfg: &GaConfig) -> Objectives {
    let n_features = g.n_features().max(1);
    let worst = Objectives {
        cv_mad: SENTINEL_MAD,
        n_features,
    };
    let ids: Vec<&str> = ds.patient_ids.iter().map(|s| s.as_str()).collect();
    let folds = match grouped_kfold_ids(&ids, cfg.k_folds, cfg.seed) {
        Ok(f) => f,
        Err(_) => return worst,
    };
    let params = g.params();
    let mut preds = Vec::with_capacity(ds.targets.len());
    let mut truths = Vec::with_capacity(ds.targets.len());
    for (train_idx, test_idx) in &folds {
        let data: Vec<(Vec<f64>, f64)> = train_idx
            .iter()
            .map(|&i| (ds.features[i].clone(), ds.targets[i]))
            .collect();
        let model = match svr::train(&data, &params, &g.mask) {
            Ok(m) => m,
            Err(_) => return worst,
        };
        for &i in test_idx {
            match svr::predict(&model, &ds.features[i]) {
                Ok(p) => {
                    preds.push(p);
                    truths.push(ds.targets[i]);
                }
                Err(_) => return worst,
            }
        }
    }
    match mean_abs_deviation(&preds, &truths, ds.wrap_degrees) {
        Ok(mad) => Objectives {
            cv_mad: mad,
            n_features,
        },
        Err(_) => worst,
    }
}

/// Final Pareto front plus per-generation diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchResult {
    pub front: Vec<(Genome, Objectives)>,
    pub best_mad_per_generation: Vec<f64>,
}

fn rng_for(seed: u64, generation: u64, index: u64) -> ChaCha8Rng {
    let mix = seed
        ^ generation.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ index.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    ChaCha8Rng::seed_from_u64(mix)
}

fn random_genome(n_features: usize, cfg: &GaConfig, rng: &mut ChaCha8Rng) -> Genome {
    let mut g = Genome {
        mask: (0..n_features).map(|_| rng.gen_bool(0.5)).collect(),
        log2_c: sample_in(cfg.log2_c_bounds, rng),
        log2_gamma: sample_in(cfg.log2_gamma_bounds, rng),
    };
    g.repair(cfg, rng);
    g
}

fn sample_in(b: (f64, f64), rng: &mut ChaCha8Rng) -> f64 {
    if b.0 == b.1 {
        b.0
    } else {
        rng.gen_range(b.0..=b.1)
    }
}

/// Binary tournament by (rank, crowding).
fn tournament(
    rank: &[usize],
    crowd: &[f64],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> usize {
    let a = rng.gen_range(0..n);
    let b = rng.gen_range(0..n);
    if rank[a] < rank[b] || (rank[a] == rank[b] && crowd[a] > crowd[b]) {
        a
    } else {
        b
    }
}

fn crossover(a: &Genome, b: &Genome, cfg: &GaConfig, rng: &mut ChaCha8Rng) -> (Genome, Genome) {
    let mut c = a.clone();
    let mut d = b.clone();
    if rng.gen_bool(cfg.crossover_prob) {
        // uniform mask crossover
        for i in 0..c.mask.len() {
            if rng.gen_bool(0.5) {
                std::mem::swap(&mut c.mask[i], &mut d.mask[i]);
            }
        }
        // blend (BLX-0.5) crossover on the reals
        let mut blend = |x: f64, y: f64| -> (f64, f64) {
            let lo = x.min(y);
            let hi = x.max(y);
            let span = (hi - lo).max(0.0);
            let (l, h) = (lo - 0.5 * span, hi + 0.5 * span);
            if l == h {
                (l, h)
            } else {
                (rng.gen_range(l..=h), rng.gen_range(l..=h))
            }
        };
        let (p, q) = blend(a.log2_c, b.log2_c);
        c.log2_c = p;
        d.log2_c = q;
        let (p, q) = blend(a.log2_gamma, b.log2_gamma);
        c.log2_gamma = p;
        d.log2_gamma = q;
    }
    (c, d)
}

fn mutate(g: &mut Genome, cfg: &GaConfig, rng: &mut ChaCha8Rng) {
    let genome_len = g.mask.len() + 2;
    let pm = cfg.mutation_prob.unwrap_or(1.0 / genome_len as f64);
    for bit in g.mask.iter_mut() {
        if rng.gen_bool(pm) {
            *bit = !*bit;
        }
    }
    let mut real = |v: &mut f64, bounds: (f64, f64)| {
        if rng.gen_bool(pm) && bounds.1 > bounds.0 {
            let sigma = 0.1 * (bounds.1 - bounds.0);
            // Box-Muller keeps the dependency surface small here
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            *v += sigma * z;
        }
    };
    real(&mut g.log2_c, cfg.log2_c_bounds);
    real(&mut g.log2_gamma, cfg.log2_gamma_bounds);
}

/// (rank per point, crowding per point) for a combined population.
fn rank_and_crowding(objs: &[Objectives]) -> (Vec<usize>, Vec<f64>) {
    let fronts = non_dominated_sort(objs);
    let mut rank = vec![0usize; objs.len()];
    let mut crowd = vec![0.0f64; objs.len()];
    for (r, front) in fronts.iter().enumerate() {
        let pts: Vec<Objectives> = front.iter().map(|&i| objs[i]).collect();
        let d = crowding_distance(&pts);
        for (w, &i) in front.iter().enumerate() {
            rank[i] = r;
            crowd[i] = d[w];
        }
    }
    (rank, crowd)
}

/// Full NSGA-II run; deterministic for a fixed (dataset, cfg) regardless of
/// evaluation parallelism.
pub fn run_nsga2(ds: &SearchDataset, cfg: &GaConfig) -> Result<SearchResult> {
    cfg.validate()?;
    ds.validate()?;
    let nf = ds.feature_names.len();
    let mu = cfg.population_size;

    let evaluate_all = |pop: &[Genome]| -> Vec<Objectives> {
        pop.par_iter().map(|g| evaluate_genome(g, ds, cfg)).collect()
    };

    let mut pop: Vec<Genome> = (0..mu)
        .map(|i| random_genome(nf, cfg, &mut rng_for(cfg.seed, 0, i as u64)))
        .collect();
    let mut objs = evaluate_all(&pop);
    let mut best_per_gen = Vec::with_capacity(cfg.generations + 1);
    let best = |o: &[Objectives]| o.iter().map(|x| x.cv_mad).fold(f64::INFINITY, f64::min);
    best_per_gen.push(best(&objs));

    for gen in 1..=cfg.generations {
        let (rank, crowd) = rank_and_crowding(&objs);
        // offspring
        let mut children: Vec<Genome> = Vec::with_capacity(mu);
        for pair in 0..mu / 2 {
            let mut rng = rng_for(cfg.seed, gen as u64, pair as u64);
            let pa = tournament(&rank, &crowd, mu, &mut rng);
            let pb = tournament(&rank, &crowd, mu, &mut rng);
            let (mut c, mut d) = crossover(&pop[pa], &pop[pb], cfg, &mut rng);
            mutate(&mut c, cfg, &mut rng);
            mutate(&mut d, cfg, &mut rng);
            c.repair(cfg, &mut rng);
            d.repair(cfg, &mut rng);
            children.push(c);
            children.push(d);
        }
        let child_objs = evaluate_all(&children);
        // mu + lambda environmental selection
        let mut all: Vec<Genome> = pop;
        all.extend(children);
        let mut all_objs = objs;
        all_objs.extend(child_objs);
        let (rank2, crowd2) = rank_and_crowding(&all_objs);
        let mut order: Vec<usize> = (0..all.len()).collect();
        order.sort_by(|&a, &b| {
            rank2[a]
                .cmp(&rank2[b])
                .then(crowd2[b].partial_cmp(&crowd2[a]).unwrap())
                .then(a.cmp(&b))
        });
        order.truncate(mu);
        pop = order.iter().map(|&i| all[i].clone()).collect();
        objs = order.iter().map(|&i| all_objs[i]).collect();
        best_per_gen.push(best(&objs));
    }

    // final front 0, deduplicated by genome
    let fronts = non_dominated_sort(&objs);
    let mut front: Vec<(Genome, Objectives)> = Vec::new();
    for &i in &fronts[0] {
        if !front.iter().any(|(g, _)| *g == pop[i]) {
            front.push((pop[i].clone(), objs[i]));
        }
    }
    Ok(SearchResult {
        front,
        best_mad_per_generation: best_per_gen,
    })
}

/// Final-model rule: minimal cv_mad, ties broken by fewer features, then
/// lexicographic mask.
pub fn pick_final(front: &[(Genome, Objectives)]) -> Result<Genome> {
    front
        .iter()
        .min_by(|(ga, oa), (gb, ob)| {
            oa.cv_mad
                .partial_cmp(&ob.cv_mad)
                .unwrap()
                .then(oa.n_features.cmp(&ob.n_features))
                .then(ga.mask.cmp(&gb.mask))
        })
        .map(|(g, _)| g.clone())
        .ok_or_else(|| Error::Precondition("empty Pareto front".into()))
}

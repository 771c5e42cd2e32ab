#![allow(dead_code)]

use std::collections::{BTreeSet, VecDeque};

use cellsim_core::geometry::{Airspace, CellId, OUTER_RING};
use cellsim_core::scenario::{
    GeneratorOptions, IdAssignment, PredicateMode, SeparationPredicate, TrafficConfiguration,
};

/// Lattice hop counts recovered from centroid geometry alone: two cells are
/// neighbors when their centroids sit at the smallest nonzero spacing.
pub fn hop_table(air: &Airspace) -> Vec<Vec<u32>> {
    let cells: Vec<CellId> = CellId::all().collect();
    let n = cells.len();
    let d = |a: usize, b: usize| air.centroid(cells[a]).distance(air.centroid(cells[b]));
    let spacing = (0..n).flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b))).map(|(a, b)| d(a, b)).fold(f64::INFINITY, f64::min);
    let mut hops = vec![vec![u32::MAX; n]; n];
    for src in 0..n {
        hops[src][src] = 0;
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            for v in 0..n {
                if hops[src][v] == u32::MAX && (d(u, v) - spacing).abs() < 1e-6 {
                    hops[src][v] = hops[src][u] + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    hops
}

pub fn oracle_allows(air: &Airspace, hops: &[Vec<u32>], p: &SeparationPredicate, o: u8, d: u8) -> bool {
    if o == d {
        return false;
    }
    let t = p.threshold;
    match p.mode {
        PredicateMode::HexGridDistance => f64::from(hops[o as usize][d as usize]) >= t,
        PredicateMode::RingSteps => {
            let k = (i32::from(o) - i32::from(d)).rem_euclid(12) as u32;
            f64::from(k.min(12 - k)) >= t
        }
        PredicateMode::EuclideanMin => {
            let dist = air.centroid(CellId::new(o).unwrap()).distance(air.centroid(CellId::new(d).unwrap()));
            dist >= t - 1e-6
        }
    }
}

/// Brute force over every assignment of (origin, destination) to ids 0..=3.
pub fn oracle(air: &Airspace, opts: &GeneratorOptions) -> BTreeSet<[(u8, u8); 4]> {
    let hops = hop_table(air);
    let ring: Vec<u8> = OUTER_RING.collect();
    let mut out = BTreeSet::new();
    let pairs: Vec<(u8, u8)> = ring
        .iter()
        .flat_map(|&o| ring.iter().map(move |&d| (o, d)))
        .filter(|&(o, d)| oracle_allows(air, &hops, &opts.predicate, o, d))
        .collect();
    for &a in &pairs {
        for &b in &pairs {
            for &c in &pairs {
                for &e in &pairs {
                    let cfg = [a, b, c, e];
                    let origins: BTreeSet<u8> = cfg.iter().map(|p| p.0).collect();
                    let dests: BTreeSet<u8> = cfg.iter().map(|p| p.1).collect();
                    if origins.len() != 4 || (opts.distinct_destinations && dests.len() != 4) {
                        continue;
                    }
                    if opts.id_assignment == IdAssignment::OriginOrdered && !cfg.windows(2).all(|w| w[0].0 < w[1].0) {
                        continue;
                    }
                    out.insert(cfg);
                }
            }
        }
    }
    out
}

pub fn as_pairs(cfg: &TrafficConfiguration) -> [(u8, u8); 4] {
    cfg.assignments.map(|m| (m.origin.get(), m.destination.get()))
}

pub fn options(mode: PredicateMode, threshold: f64, distinct: bool) -> GeneratorOptions {
    GeneratorOptions {
        predicate: SeparationPredicate::new(mode, threshold).unwrap(),
        distinct_destinations: distinct,
        id_assignment: IdAssignment::OriginOrdered,
    }
}

pub type Points = Vec<(Vec<f64>, f64)>;

/// Two-feature OLS from centered sums and Cramer's rule.
pub fn ols_oracle(points: &Points) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mean = |f: &dyn Fn(&(Vec<f64>, f64)) -> f64| points.iter().map(f).sum::<f64>() / n;
    let (m1, m2, my) = (mean(&|p| p.0[0]), mean(&|p| p.0[1]), mean(&|p| p.1));
    let cov = |f: &dyn Fn(&(Vec<f64>, f64)) -> f64, g: &dyn Fn(&(Vec<f64>, f64)) -> f64| {
        points.iter().map(|p| f(p) * g(p)).sum::<f64>()
    };
    let c1 = |p: &(Vec<f64>, f64)| p.0[0] - m1;
    let c2 = |p: &(Vec<f64>, f64)| p.0[1] - m2;
    let cy = |p: &(Vec<f64>, f64)| p.1 - my;
    let (s11, s22, s12) = (cov(&c1, &c1), cov(&c2, &c2), cov(&c1, &c2));
    let (s1y, s2y) = (cov(&c1, &cy), cov(&c2, &cy));
    let det = s11 * s22 - s12 * s12;
    let b1 = (s1y * s22 - s2y * s12) / det;
    let b2 = (s2y * s11 - s1y * s12) / det;
    (my - b1 * m1 - b2 * m2, b1, b2)
}


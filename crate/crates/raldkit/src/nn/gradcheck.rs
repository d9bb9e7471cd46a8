//! Finite-difference verification of analytic gradients.
//!
//! The checker rebuilds the graph through a user-supplied closure, so it
//! verifies whatever composite model that closure constructs — from a single
//! op to a full denoiser step. Everything runs in f64: central differences at
//! h = 1e-3 on an f32 graph would drown in rounding noise.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use super::graph::{Graph, NodeId};
use super::opt::ParamStore;

/// Worst observed coordinate of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    pub fd: f64,
    pub analytic: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel < tol
    }
}

/// Relative error with an absolute floor so near-zero gradients don't blow up
/// the ratio: |fd - g| / max(|fd|, |g|, 0.01).
pub fn rel_err(fd: f64, g: f64) -> f64 {
    (fd - g).abs() / fd.abs().max(g.abs()).max(1e-2)
}

/// Compare analytic gradients of `build`'s scalar output against central
/// finite differences with step `h`, checking at most `max_coords_per_param`
/// coordinates per parameter (all of them if the parameter is smaller;
/// otherwise a seeded random subset).
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    build: &F,
    h: f64,
    max_coords_per_param: usize,
    seed: u64,
) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &BTreeMap<String, NodeId>) -> NodeId,
{
    let build_ids = |g: &mut Graph<f64>, s: &ParamStore<f64>| -> BTreeMap<String, NodeId> {
        s.iter().map(|(name, t)| (name.clone(), g.param(t))).collect()
    };

    // Analytic pass.
    let mut g = Graph::new();
    let ids = build_ids(&mut g, store);
    let loss = build(&mut g, &ids);
    assert_eq!(g.value(loss).len(), 1, "grad check target must be scalar");
    g.backward(loss);
    let analytic: BTreeMap<String, Vec<f64>> = ids
        .iter()
        .map(|(name, id)| (name.clone(), g.grad(*id).map(|x| x.to_vec()).unwrap_or_default()))
        .collect();

    let eval = |s: &ParamStore<f64>| -> f64 {
        let mut g = Graph::new();
        let ids = build_ids(&mut g, s);
        let loss = build(&mut g, &ids);
        g.value(loss)[0]
    };

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel: 0.0,
        worst_param: String::new(),
        worst_coord: 0,
        fd: 0.0,
        analytic: 0.0,
        coords_checked: 0,
    };
    for (name, tensor) in store.iter() {
        let an = &analytic[name];
        if an.is_empty() {
            continue; // parameter unused by this loss
        }
        let n = tensor.len();
        let coords: Vec<usize> = if n <= max_coords_per_param {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            all.truncate(max_coords_per_param);
            all
        };
        for ci in coords {
            let mut plus = store.clone();
            plus.get_mut(name).data[ci] += h;
            let mut minus = store.clone();
            minus.get_mut(name).data[ci] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let rel = rel_err(fd, an[ci]);
            report.coords_checked += 1;
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst_param = name.clone();
                report.worst_coord = ci;
                report.fd = fd;
                report.analytic = an[ci];
            }
        }
    }
    report
}

//! Point-cloud metrics: Chamfer distance, exact earth mover's distance via
//! the Hungarian assignment, the entropic (Sinkhorn) approximation for
//! large sets, and the error-CDF report format.
//!
//!     cargo run --example evaluate_metrics

use raldkit::geom::PointCloud;
use raldkit::metrics::{cdf_csv, chamfer_distance, emd, empirical_cdf, hungarian, EmdConfig};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn random_cloud(rng: &mut ChaCha12Rng, n: usize) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect(),
    )
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha12Rng::seed_from_u64(4);

    // Chamfer on a hand-checkable pair: two unit-separated points.
    let a = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    let b = PointCloud::new(vec![[0.0, 0.0, 0.0]]);
    println!("chamfer([[0],[1]], [[0]]) = {} (mean of 0 and 1, averaged both ways)", chamfer_distance(&a, &b)?);

    // EMD as an assignment problem: shifting a cloud by delta moves every
    // point exactly delta, so EMD equals delta while chamfer can be smaller.
    let c = random_cloud(&mut rng, 64);
    let shifted = PointCloud::new(c.points.iter().map(|p| [p[0] + 0.05, p[1], p[2]]).collect());
    let cfg = EmdConfig::default();
    println!(
        "0.05 m shift: chamfer {:.4} m, emd {:.4} m",
        chamfer_distance(&c, &shifted)?,
        emd(&c, &shifted, &cfg, 0)?
    );

    // The Hungarian solver is exact: on a tiny instance, compare against
    // brute-force enumeration of all assignments.
    let cost = vec![
        vec![4.0, 1.0, 3.0],
        vec![2.0, 0.0, 5.0],
        vec![3.0, 2.0, 2.0],
    ];
    let (best, assignment) = hungarian(&cost);
    let mut brute = f64::INFINITY;
    let mut perm = [0, 1, 2];
    permute(&mut perm, 0, &mut |p| {
        brute = brute.min(cost[0][p[0]] + cost[1][p[1]] + cost[2][p[2]]);
    });
    println!("hungarian total {best} (brute force {brute}), assignment {assignment:?}");

    // Exact vs Sinkhorn on the same pair: the entropic plan overestimates
    // slightly, by an amount controlled by the regularization.
    let x = random_cloud(&mut rng, 200);
    let y = random_cloud(&mut rng, 200);
    let exact = emd(&x, &y, &EmdConfig { exact_max: 512, ..cfg.clone() }, 0)?;
    let approx = emd(&x, &y, &EmdConfig { exact_max: 16, ..cfg.clone() }, 0)?;
    println!(
        "200-point EMD: exact {exact:.4} m, sinkhorn {approx:.4} m ({:+.1}%)",
        100.0 * (approx - exact) / exact
    );

    // Error CDFs: the report form used to compare methods across frames.
    let errors: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..0.3)).collect();
    let cdf = empirical_cdf(&errors);
    println!(
        "empirical CDF of 20 errors: median ≈ {:.3} m, p90 ≈ {:.3} m",
        cdf[cdf.len() / 2].0,
        cdf[(cdf.len() * 9) / 10].0
    );
    let csv = cdf_csv(&[("demo".to_string(), errors)]);
    println!("CSV head:\n{}", csv.lines().take(3).collect::<Vec<_>>().join("\n"));
    Ok(())
}

fn permute(items: &mut [usize; 3], k: usize, visit: &mut impl FnMut(&[usize; 3])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}

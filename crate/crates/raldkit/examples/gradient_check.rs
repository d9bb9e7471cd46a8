//! Verify analytic gradients against central finite differences — the same
//! machinery the test suite uses to validate every network block.
//!
//! The check runs in f64: finite differences lose too many digits in f32
//! to tell a correct gradient from a subtly wrong one.
//!
//!     cargo run --example gradient_check

use raldkit::diffusion::{build_dit, init_dit_params, standard_normal, DiTConfig};
use raldkit::nn::gradcheck::grad_check;
use raldkit::nn::opt::{xavier_uniform, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn main() {
    let mut rng = ChaCha12Rng::seed_from_u64(17);

    // A plain two-layer network first.
    let mut store = ParamStore::<f64>::new();
    store.insert("w1", xavier_uniform(&mut rng, 6, 8));
    store.insert("w2", xavier_uniform(&mut rng, 8, 1));
    let x = standard_normal(5, 6, &mut rng).map_to::<f64>();
    let report = grad_check(
        &store,
        &|g, ids| {
            let xc = g.constant(&x);
            let h = g.matmul(xc, ids["w1"]);
            let h = g.gelu(h);
            let y = g.matmul(h, ids["w2"]);
            let sq = g.mul(y, y);
            g.mean_all(sq)
        },
        1e-4,
        8,
        1,
    );
    println!(
        "mlp: max rel err {:.2e} (worst {} coord {})",
        report.max_rel, report.worst_param, report.worst_coord
    );

    // The full conditioned denoiser block: self-attention, cross-attention
    // over radar tokens, gated modulation from the noise-level embedding.
    let cfg = DiTConfig { depth: 1, width: 16, heads: 2, m_latent: 6, d_latent: 4, ..DiTConfig::desk_default() };
    let mut f32_rng = ChaCha12Rng::seed_from_u64(18);
    let mut dit_store = init_dit_params(&cfg, &mut f32_rng);
    // Zero-initialized gates hide gradient paths; perturb everything so the
    // check exercises the whole block.
    for name in dit_store.names() {
        let t = dit_store.get_mut(&name);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v += 0.05 * ((i % 7) as f32 - 3.0);
        }
    }
    let dit_store = dit_store.map_to::<f64>();
    let z = standard_normal(cfg.m_latent, cfg.d_latent, &mut rng).map_to::<f64>();
    let cond = standard_normal(4, cfg.d_cond, &mut rng).map_to::<f64>();
    let report = grad_check(
        &dit_store,
        &|g, ids| {
            let zc = g.constant(&z);
            let cc = g.constant(&cond);
            let out = build_dit(g, ids, &cfg, zc, 0.7, Some(cc));
            let sq = g.mul(out, out);
            g.mean_all(sq)
        },
        1e-3,
        2,
        7,
    );
    println!(
        "denoiser block ({} params): max rel err {:.2e} at {} [{}] (fd {:+.5e}, analytic {:+.5e})",
        dit_store.names().len(),
        report.max_rel,
        report.worst_param,
        report.worst_coord,
        report.fd,
        report.analytic
    );
    let ok = report.passes(1e-4);
    println!("tolerance 1e-4: {}", if ok { "PASS" } else { "FAIL" });
    std::process::exit(if ok { 0 } else { 1 });
}

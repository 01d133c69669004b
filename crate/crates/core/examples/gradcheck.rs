//! Finite-difference gradient check on the tiny configuration, a step-size
//! sweep, and a planted fault that the check localizes.

use mtcr_vc::training::{finite_difference_check, finite_difference_check_with};
use mtcr_vc::ModelConfig;

fn main() -> mtcr_vc::Result<()> {
    let cfg = ModelConfig::tiny();
    let r = finite_difference_check(&cfg, 1e-5, 1e-3)?;
    println!(
        "{} coordinates over {} groups, max relative error {:.2e} at {}[{}]",
        r.coordinates.len(),
        r.group_max.len(),
        r.max_rel_error,
        r.worst.param,
        r.worst.index
    );

    println!("eps sweep (median / max relative error):");
    for eps in [1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8] {
        let r = finite_difference_check(&cfg, eps, f64::INFINITY)?;
        let mut e: Vec<f64> = r.coordinates.iter().map(|c| c.rel_error).collect();
        e.sort_by(f64::total_cmp);
        println!(
            "  {eps:.0e}  {:.2e}  {:.2e}",
            e[e.len() / 2],
            r.max_rel_error
        );
    }

    let planted = finite_difference_check_with(&cfg, 1e-5, 1e-3, |g, store| {
        let id = store.find("tcr.block2.channel_query.weight").unwrap();
        if let Some(x) = g.get_mut(id) {
            x.mapv_inplace(|v| 2.0 * v);
        }
    });
    println!("planted 2x fault: {}", planted.unwrap_err());
    Ok(())
}

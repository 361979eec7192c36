//! Average-linkage and GMM-EM clustering of an attention map with four
//! planted groups, with and without the position bias.
//!
//! `cargo run --release --example clustering`

use masked_distill::cluster::{
    attention_distance, combine_distance, em_fit, hierarchical_cluster, position_bias_matrix, AttentionMap,
    ClusterAssignment, SquareMatrix,
};
use masked_distill::masking::PatchGrid;
use masked_distill::rng::substream;
use rand::Rng as _;

fn show(name: &str, a: &ClusterAssignment, grid: &PatchGrid) {
    println!("{name}");
    for r in 0..grid.rows {
        let line: Vec<String> = (0..grid.cols).map(|c| a.labels()[r * grid.cols + c].to_string()).collect();
        println!("  {}", line.join(" "));
    }
}

fn main() -> masked_distill::Result<()> {
    let grid = PatchGrid::new(6, 6, 4)?;
    let n = grid.len();
    // Patch i belongs to group (row/3, col/3); attention concentrates on the
    // own group with noise.
    let group = |i: usize| {
        let (r, c) = grid.coords(i);
        (r / 3) * 2 + c / 3
    };
    let mut rng = substream(11, &[]);
    let mut rows = Vec::with_capacity(n * n);
    for i in 0..n {
        let raw: Vec<f64> = (0..n)
            .map(|j| if group(i) == group(j) { 1.0 } else { 0.05 } + 0.3 * rng.random::<f64>())
            .collect();
        let s: f64 = raw.iter().sum();
        rows.extend(raw.iter().map(|v| v / s));
    }
    let attn = AttentionMap::new(SquareMatrix::new(n, rows)?)?;
    let d_attn = attention_distance(&attn);
    let bias = position_bias_matrix(&grid);
    for zeta in [1.0, 0.5] {
        let d = combine_distance(&d_attn, &bias, zeta)?;
        show(&format!("average linkage, zeta {zeta}"), &hierarchical_cluster(&d, 4)?, &grid);
    }
    let fit = em_fit(&attn, 4, 30, &mut substream(11, &[1]))?;
    show("GMM-EM", &fit.assignment, &grid);
    println!(
        "EM log-likelihood {:.3} -> {:.3}",
        fit.log_likelihood[0],
        fit.log_likelihood.last().unwrap()
    );
    Ok(())
}

//! Every masking strategy on an 8×8 grid at 40%, printed as text.
//!
//! `cargo run --release --example masks [pgm_dir]`

use masked_distill::cluster::ClusterAssignment;
use masked_distill::masking::{
    block_mask, evolved_mask, grid_mask, random_mask, write_mask_pgm, BinaryMask, MaskSchedule, MaskStrategy,
    PatchGrid,
};
use masked_distill::rng::substream;

fn show(name: &str, m: &BinaryMask, grid: &PatchGrid) {
    println!("{name} ({} masked)", m.masked_count());
    for r in 0..grid.rows {
        let line: String = (0..grid.cols)
            .map(|c| if m.is_masked(r * grid.cols + c) { '#' } else { '.' })
            .collect();
        println!("  {line}");
    }
}

fn main() -> masked_distill::Result<()> {
    let grid = PatchGrid::new(8, 8, 4)?;
    let ratio = 0.4;
    let mut rng = substream(3, &[]);
    let schedule = MaskSchedule {
        total_epochs: 10,
        ratio,
        strategy: MaskStrategy::EvolvedHc,
        ..MaskSchedule::paper()
    };
    // Quadrants as clusters.
    let quadrants = ClusterAssignment::canonical(
        &(0..64).map(|i| (i / 8 / 4) * 2 + (i % 8) / 4).collect::<Vec<_>>(),
    );
    let masks = vec![
        ("grid", grid_mask(&grid, ratio)?),
        ("random", random_mask(&grid, ratio, &mut rng)?),
        ("block", block_mask(&grid, ratio, &mut rng)?),
        ("evolved epoch 0", evolved_mask(&grid, &schedule, 0, None, &mut rng)?),
        ("evolved epoch 8", evolved_mask(&grid, &schedule, 8, Some(&quadrants), &mut rng)?),
        ("evolved epoch 10", evolved_mask(&grid, &schedule, 10, Some(&quadrants), &mut rng)?),
    ];
    let dir = std::env::args().nth(1).map(std::path::PathBuf::from);
    for (name, m) in &masks {
        show(name, m, &grid);
        if let Some(d) = &dir {
            std::fs::create_dir_all(d).ok();
            write_mask_pgm(&d.join(format!("{}.pgm", name.replace(' ', "_"))), m, &grid)?;
        }
    }
    Ok(())
}

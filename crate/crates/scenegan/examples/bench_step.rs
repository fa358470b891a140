//! Times one desk-scale training step.

use scenegan::config::{ArchitectureConfig, DiscFlags};
use scenegan::data::{full_grid, generate_dataset, ClipGeometry};
use scenegan::gan::{prepare_batch, train_step, GanModels, Optimizers};
use scenegan::tensor::{AdamConfig, Rng64};
use std::time::Instant;

fn main() {
    let cfg = ArchitectureConfig::desk();
    let mut labels: Vec<&str> = scenegan::data::ACTIONS.to_vec();
    labels.extend(scenegan::data::OBJECTS);
    let mut models = GanModels::<f32>::new(&cfg, &labels, 1);
    let mut opt = Optimizers::new(AdamConfig::default());
    let grid = full_grid();
    let t0 = Instant::now();
    let dataset = generate_dataset(&grid[..8], 2, ClipGeometry::default(), 3).unwrap();
    println!("render 16 clips: {:.1} ms", t0.elapsed().as_secs_f64() * 1e3);
    let batch = prepare_batch(&dataset, &[0, 2, 4, 6, 8, 10, 12, 14], &models).unwrap();
    let mut rng = Rng64::new(5);
    // warmup + timed steps
    for i in 0..6 {
        let t = Instant::now();
        let r = train_step(&mut models, &mut opt, &batch, DiscFlags::ALL, &mut rng).unwrap();
        println!(
            "step {i}: {:.0} ms  L_f {:.3} L_g {:.3} L_v {:.3} L_r {:.3} L_gan {:.3}",
            t.elapsed().as_secs_f64() * 1e3,
            r.l_f, r.l_g, r.l_v, r.l_r, r.l_gan
        );
    }
}

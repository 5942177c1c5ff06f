//! Dev helper: dump a couple of synthetic scenes as .bin + .txt pairs.
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use voxdet::kitti::{write_detections, write_velodyne_bin};
use voxdet::synthetic::{generate_scene, SyntheticConfig};

fn main() {
    let dir = std::env::args().nth(1).expect("usage: gen_scenes DIR [N]");
    let n: usize = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(2);
    std::fs::create_dir_all(&dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = SyntheticConfig::default();
    for i in 0..n {
        let scene = generate_scene(&cfg, &format!("s{i:03}"), &mut rng);
        let base = Path::new(&dir).join(format!("s{i:03}"));
        write_velodyne_bin(&base.with_extension("bin"), &scene.cloud).unwrap();
        let gts: Vec<_> = scene.gt_boxes.iter().map(|b| (b.clone(), 1.0)).collect();
        write_detections(&base.with_extension("txt"), &gts).unwrap();
    }
    println!("wrote {n} scenes to {dir}");
}

use std::time::Instant;
use quest_core::models::{build_model, ArchSpec};
use quest_core::ops;
use quest_core::Tensor;

fn main() {
    for spec in ["32x2,64x2,128x2", "16x1,32x1,64x1"] {
        let arch = ArchSpec::new(3, ArchSpec::parse_stages(spec).unwrap(), 8).unwrap();
        let m = build_model::<f32>(&arch, 1).unwrap();
        let x = Tensor::from_fn(&[64, 3, 32, 32], |i| ((i * 7919) % 1000) as f32 / 1000.0).unwrap();
        let labels: Vec<usize> = (0..64).map(|i| i % 8).collect();
        let t = ops::one_hot::<f32>(&labels, 8).unwrap();
        let start = Instant::now();
        let reps = 5;
        for _ in 0..reps {
            let out = m.forward(&x, &[]).unwrap();
            let g = ops::cross_entropy_logits_backward(&out.logits, &t).unwrap();
            let _ = m.backward(&out, &g, &[]).unwrap();
        }
        let per = start.elapsed().as_secs_f64() / reps as f64;
        let start = Instant::now();
        for _ in 0..reps { let _ = m.infer(&x, &["last_conv"]).unwrap(); }
        let inf = start.elapsed().as_secs_f64() / reps as f64;
        println!("{spec}: train step {per:.3}s/batch64 -> {:.1}s/epoch(8000); infer {inf:.3}s", per * 125.0);
    }
}

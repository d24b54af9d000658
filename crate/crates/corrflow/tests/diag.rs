//! Temporary diagnostic (deleted before release).

use corrflow::harness::synth::{gen_synthetic_pair, WarpSpec};
use corrflow::pyramid::load_checkpoint;
use corrflow::tensor::Graph;

#[test]
#[ignore]
fn diag_flow_stats() {
    let model = load_checkpoint(std::path::Path::new("/tmp/t400.ckpt")).unwrap();
    let pair = gen_synthetic_pair(424242, 128, &WarpSpec::translation(8.0)).unwrap();
    let mut g: Graph<f32> = Graph::new();
    let out = model.forward(&mut g, &pair.target, &pair.source).unwrap();

    for (l, lo) in out.levels.iter().enumerate() {
        let vals = g.values(lo.volume.data);
        let n = vals.len() as f32;
        let mean: f32 = vals.iter().sum::<f32>() / n;
        let lo_v = vals.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi_v = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let std: f32 =
            (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n).sqrt();
        println!(
            "level {l} vol {:?}: mean {mean:.3} std {std:.3} min {lo_v:.3} max {hi_v:.3}",
            lo.volume.dims()
        );
    }
    let vals = g.values(out.c_star.data);
    let n = vals.len() as f32;
    let mean: f32 = vals.iter().sum::<f32>() / n;
    let std: f32 = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n).sqrt();
    println!("c_star: mean {mean:.3} std {std:.3}");

    // gt at finest grid vs predicted
    let gt = pair.gt_flow.rescale(32, 32);
    let pred = out.final_flow.to_field(&g);
    for (x, y) in [(8usize, 8usize), (16, 16), (24, 20)] {
        println!(
            "cell ({x},{y}): pred {:?} gt {:?}",
            pred.uv_at(x, y),
            gt.uv_at(x, y)
        );
    }
    println!("descriptor: {}", pair.descriptor);
}

//! Quick wall-clock probe of the training hot paths at candidate
//! resolutions. Run: `cargo run -p detcyclegan-core --example probe`

use std::time::Instant;

use detcyclegan_core::config::ExperimentConfig;
use detcyclegan_core::detcyclegan::{build_detcyclegan_step, DetLossWeights};
use detcyclegan_core::detector::{
    build_detector, detection_loss_graph, forward_graph, DetectorConfig, Mode,
};
use detcyclegan_core::gan::{build_gan_models, build_generator_step, DiscriminatorConfig, GanConfig};
use detcyclegan_core::nn::graph::Graph;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (h, w) in [(48usize, 48usize), (64, 64)] {
        for det_base in [8usize, 16] {
            let det_cfg = DetectorConfig {
                base_channels: det_base,
                ..Default::default()
            };
            let gan_cfg = GanConfig {
                discriminator: DiscriminatorConfig {
                    base_channels: 16,
                    ..Default::default()
                },
                ..GanConfig::defaults_with_replay()
            };
            let cfg = ExperimentConfig::default();
            let mut det_sim = build_detector(&det_cfg, &mut rng).unwrap();
            let mut det_or = build_detector(&det_cfg, &mut rng).unwrap();
            det_sim.trainable = false;
            det_or.trainable = false;
            let models = build_gan_models(&gan_cfg, &mut rng).unwrap();
            let bs = ArrayD::from_shape_simple_fn(IxDyn(&[8, 3, h, w]), || rng.gen::<f64>() * 2.0 - 1.0);
            let bo = bs.clone();
            let y = ArrayD::from_shape_simple_fn(IxDyn(&[8, 1, h, w]), || rng.gen::<f64>());

            // baseline G step
            let t = Instant::now();
            let mut step = build_generator_step(&models, &bs, &bo, &gan_cfg.weights).unwrap();
            step.graph.backward(step.loss);
            let base_ms = t.elapsed().as_millis();

            // var1 G step
            let t = Instant::now();
            let stepc = build_detcyclegan_step(
                &models,
                &mut det_sim,
                &mut det_or,
                &bs,
                &bo,
                &y,
                &y,
                &gan_cfg.weights,
                &DetLossWeights::var1(1.0, 1.0),
            )
            .unwrap();
            let mut basec = stepc.base;
            basec.graph.backward(stepc.total);
            let var1_ms = t.elapsed().as_millis();

            // detector train step batch 32
            let xb = ArrayD::from_shape_simple_fn(IxDyn(&[32, 3, h, w]), || rng.gen::<f64>());
            let yb = ArrayD::from_shape_simple_fn(IxDyn(&[32, 1, h, w]), || rng.gen::<f64>());
            let mut det_train = build_detector(&det_cfg, &mut rng).unwrap();
            let t = Instant::now();
            let mut g = Graph::new();
            let xid = g.constant(xb);
            let tid = g.constant(yb);
            let mut drng = ChaCha8Rng::seed_from_u64(1);
            let out = forward_graph(&mut det_train, &mut g, xid, Mode::Train, Some(&mut drng)).unwrap();
            let loss = detection_loss_graph(&mut g, out.sigmoid, out.refined, tid, 1.0, cfg.detector.mse_reduction).unwrap();
            g.backward(loss);
            let det_ms = t.elapsed().as_millis();

            println!(
                "{h}x{w} det_base={det_base}: baseline G step {base_ms} ms, var1 G step {var1_ms} ms, det step(b32) {det_ms} ms"
            );
        }
    }
}

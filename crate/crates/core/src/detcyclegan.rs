//! Detection-coupled translation: frozen landmark detectors are wired into
//! the generator objective so that translated and recovered images keep the
//! source image's suture landmarks. Two coupling terms exist — on the
//! translated images (fake domain) and on the recovered images — plus two
//! off-by-default ablation losses (cross-domain MSE and the noisy-labeller
//! semantic consistency).
//!
//! Generator outputs live in [-1,1]; the losses bridge them differentiably
//! to the detector's [0,1] input range, so gradients reach the generators
//! while the detectors stay bit-identical.

use serde::{Deserialize, Serialize};

use crate::detector::{detection_loss_graph, forward_graph, DetectorModel, Mode, MseReduction};
use crate::error::{Error, Result};
use crate::gan::{build_generator_step, GanLossWeights, GanModels, GeneratorStep};
use crate::nn::graph::{Arr, Graph, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Plain CycleGAN: both coupling weights zero.
    Baseline,
    /// Both the translated-image and recovered-image terms.
    Var1,
    /// Only the translated-image term.
    Var2,
}

/// Weights of the two detection-coupling terms.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetLossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub variant: Variant,
}

impl Default for DetLossWeights {
    fn default() -> Self {
        DetLossWeights::var1(1.0, 1.0)
    }
}

impl DetLossWeights {
    pub fn baseline() -> Self {
        DetLossWeights {
            alpha1: 0.0,
            alpha2: 0.0,
            variant: Variant::Baseline,
        }
    }

    pub fn var1(alpha1: f64, alpha2: f64) -> Self {
        DetLossWeights {
            alpha1,
            alpha2,
            variant: Variant::Var1,
        }
    }

    pub fn var2(alpha1: f64) -> Self {
        DetLossWeights {
            alpha1,
            alpha2: 0.0,
            variant: Variant::Var2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha1 < 0.0 || self.alpha2 < 0.0 {
            return Err(Error::Validation("alpha weights must be >= 0".into()));
        }
        let consistent = match self.variant {
            Variant::Baseline => self.alpha1 == 0.0 && self.alpha2 == 0.0,
            Variant::Var1 => self.alpha1 > 0.0 && self.alpha2 > 0.0,
            Variant::Var2 => self.alpha1 > 0.0 && self.alpha2 == 0.0,
        };
        if !consistent {
            return Err(Error::Validation(format!(
                "weights (alpha1={}, alpha2={}) inconsistent with variant {:?}",
                self.alpha1, self.alpha2, self.variant
            )));
        }
        Ok(())
    }

    /// The evaluated weight grid for the two variants.
    pub fn grid() -> Vec<DetLossWeights> {
        vec![
            DetLossWeights::var1(1.0, 1.0),
            DetLossWeights::var1(1.0, 0.5),
            DetLossWeights::var1(0.5, 1.0),
            DetLossWeights::var2(1.0),
        ]
    }
}

fn ensure_frozen(det: &DetectorModel, what: &str) -> Result<()> {
    if det.trainable {
        return Err(Error::Contract(format!(
            "{what} requires a frozen detector (trainable = false)"
        )));
    }
    Ok(())
}

/// Map a [-1,1] tensor differentiably onto the detector's [0,1] range.
fn gan_to_detector_range(g: &mut Graph, x: NodeId) -> NodeId {
    let half = g.mul_const(x, 0.5);
    g.add_const(half, 0.5)
}

/// Frozen-detector forward on a GAN-range image node; returns both stages.
fn detect(g: &mut Graph, det: &mut DetectorModel, x_gan: NodeId) -> Result<(NodeId, NodeId)> {
    let x = gan_to_detector_range(g, x_gan);
    let out = forward_graph(det, g, x, Mode::Eval, None)?;
    Ok((out.sigmoid, out.refined))
}

/// Translated-image coupling: the target-domain detector must find the
/// source image's landmarks in each translated image.
///
/// `L = L_det(Det_or(x'_or), y_sim) + L_det(Det_sim(x'_sim), y_or)`
#[allow(clippy::too_many_arguments)]
pub fn detection_consistency_graph(
    g: &mut Graph,
    det_or: &mut DetectorModel,
    det_sim: &mut DetectorModel,
    fake_or: NodeId,
    fake_sim: NodeId,
    y_sim: NodeId,
    y_or: NodeId,
    s: f64,
    reduction: MseReduction,
) -> Result<NodeId> {
    ensure_frozen(det_or, "detection consistency loss")?;
    ensure_frozen(det_sim, "detection consistency loss")?;
    let (sig_or, ref_or) = detect(g, det_or, fake_or)?;
    let (sig_sim, ref_sim) = detect(g, det_sim, fake_sim)?;
    let a = detection_loss_graph(g, sig_or, ref_or, y_sim, s, reduction)?;
    let b = detection_loss_graph(g, sig_sim, ref_sim, y_or, s, reduction)?;
    Ok(g.add(a, b))
}

/// Recovered-image coupling: after the full cycle each domain's detector
/// must still find the original landmarks.
///
/// `L = L_det(Det_sim(x''_sim), y_sim) + L_det(Det_or(x''_or), y_or)`
#[allow(clippy::too_many_arguments)]
pub fn recovered_detection_graph(
    g: &mut Graph,
    det_sim: &mut DetectorModel,
    det_or: &mut DetectorModel,
    rec_sim: NodeId,
    rec_or: NodeId,
    y_sim: NodeId,
    y_or: NodeId,
    s: f64,
    reduction: MseReduction,
) -> Result<NodeId> {
    ensure_frozen(det_sim, "recovered detection loss")?;
    ensure_frozen(det_or, "recovered detection loss")?;
    let (sig_s, ref_s) = detect(g, det_sim, rec_sim)?;
    let (sig_o, ref_o) = detect(g, det_or, rec_or)?;
    let a = detection_loss_graph(g, sig_s, ref_s, y_sim, s, reduction)?;
    let b = detection_loss_graph(g, sig_o, ref_o, y_or, s, reduction)?;
    Ok(g.add(a, b))
}

/// Value-level translated-image coupling on raw batches.
#[allow(clippy::too_many_arguments)]
pub fn detection_consistency_loss(
    det_or: &mut DetectorModel,
    det_sim: &mut DetectorModel,
    fake_or: &Arr,
    fake_sim: &Arr,
    y_sim: &Arr,
    y_or: &Arr,
    s: f64,
    reduction: MseReduction,
) -> Result<f64> {
    let mut g = Graph::new();
    let fo = g.constant(fake_or.clone());
    let fs = g.constant(fake_sim.clone());
    let ys = g.constant(y_sim.clone());
    let yo = g.constant(y_or.clone());
    let l = detection_consistency_graph(&mut g, det_or, det_sim, fo, fs, ys, yo, s, reduction)?;
    Ok(g.scalar_val(l))
}

/// Value-level recovered-image coupling on raw batches.
#[allow(clippy::too_many_arguments)]
pub fn recovered_detection_loss(
    det_sim: &mut DetectorModel,
    det_or: &mut DetectorModel,
    rec_sim: &Arr,
    rec_or: &Arr,
    y_sim: &Arr,
    y_or: &Arr,
    s: f64,
    reduction: MseReduction,
) -> Result<f64> {
    let mut g = Graph::new();
    let rs = g.constant(rec_sim.clone());
    let ro = g.constant(rec_or.clone());
    let ys = g.constant(y_sim.clone());
    let yo = g.constant(y_or.clone());
    let l = recovered_detection_graph(&mut g, det_sim, det_or, rs, ro, ys, yo, s, reduction)?;
    Ok(g.scalar_val(l))
}

// ---------------------------------------------------------------------------
// full objective
// ---------------------------------------------------------------------------

/// One detection-coupled generator update: the baseline step plus the
/// enabled coupling terms. Terms with zero weight are never evaluated, so a
/// baseline-weighted run is bit-identical to plain CycleGAN.
pub struct DetCycleGanStep {
    pub base: GeneratorStep,
    pub det_prime: Option<NodeId>,
    pub det_recovered: Option<NodeId>,
    pub total: NodeId,
}

/// Build the full objective
/// `L = L_cyclegan + alpha1 * L_det' + alpha2 * L_det''`
/// on unpaired batches with their target heatmaps (`[N,1,H,W]`).
#[allow(clippy::too_many_arguments)]
pub fn build_detcyclegan_step(
    models: &GanModels,
    det_sim: &mut DetectorModel,
    det_or: &mut DetectorModel,
    batch_sim: &Arr,
    batch_or: &Arr,
    y_sim: &Arr,
    y_or: &Arr,
    gan_weights: &GanLossWeights,
    det_weights: &DetLossWeights,
) -> Result<DetCycleGanStep> {
    det_weights.validate()?;
    let mut base = build_generator_step(models, batch_sim, batch_or, gan_weights)?;
    let g = &mut base.graph;
    let mut total = base.loss;
    let (mut det_prime, mut det_recovered) = (None, None);
    if det_weights.alpha1 > 0.0 {
        let ys = g.constant(y_sim.clone());
        let yo = g.constant(y_or.clone());
        let l = detection_consistency_graph(
            g,
            det_or,
            det_sim,
            base.fake_or,
            base.fake_sim,
            ys,
            yo,
            det_sim.config.smoothing,
            det_sim.config.mse_reduction,
        )?;
        let w = g.mul_const(l, det_weights.alpha1);
        total = g.add(total, w);
        det_prime = Some(l);
    }
    if det_weights.alpha2 > 0.0 {
        let ys = g.constant(y_sim.clone());
        let yo = g.constant(y_or.clone());
        let l = recovered_detection_graph(
            g,
            det_sim,
            det_or,
            base.rec_sim,
            base.rec_or,
            ys,
            yo,
            det_sim.config.smoothing,
            det_sim.config.mse_reduction,
        )?;
        let w = g.mul_const(l, det_weights.alpha2);
        total = g.add(total, w);
        det_recovered = Some(l);
    }
    Ok(DetCycleGanStep {
        base,
        det_prime,
        det_recovered,
        total,
    })
}

/// Value bundle of the coupled objective.
#[derive(Debug, Clone)]
pub struct DetCycleGanBundle {
    pub total: f64,
    pub generator_loss: f64,
    pub det_prime: Option<f64>,
    pub det_recovered: Option<f64>,
    pub fake_or: Arr,
    pub fake_sim: Arr,
    pub rec_sim: Arr,
    pub rec_or: Arr,
}

/// Evaluate the coupled objective without updating anything.
#[allow(clippy::too_many_arguments)]
pub fn detcyclegan_objective(
    models: &GanModels,
    det_sim: &mut DetectorModel,
    det_or: &mut DetectorModel,
    batch_sim: &Arr,
    batch_or: &Arr,
    y_sim: &Arr,
    y_or: &Arr,
    gan_weights: &GanLossWeights,
    det_weights: &DetLossWeights,
) -> Result<DetCycleGanBundle> {
    let step = build_detcyclegan_step(
        models, det_sim, det_or, batch_sim, batch_or, y_sim, y_or, gan_weights, det_weights,
    )?;
    let g = &step.base.graph;
    Ok(DetCycleGanBundle {
        total: g.scalar_val(step.total),
        generator_loss: g.scalar_val(step.base.loss),
        det_prime: step.det_prime.map(|id| g.scalar_val(id)),
        det_recovered: step.det_recovered.map(|id| g.scalar_val(id)),
        fake_or: g.val(step.base.fake_or).clone(),
        fake_sim: g.val(step.base.fake_sim).clone(),
        rec_sim: g.val(step.base.rec_sim).clone(),
        rec_or: g.val(step.base.rec_or).clone(),
    })
}

// ---------------------------------------------------------------------------
// ablation losses (off by default)
// ---------------------------------------------------------------------------

/// Cross-domain consistency (ablation): MSE between the refined maps
/// predicted on translated and recovered images,
/// `MSE(Det_or(x'_or), Det_sim(x''_sim)) + MSE(Det_sim(x'_sim), Det_or(x''_or))`.
#[allow(clippy::too_many_arguments)]
pub fn cross_domain_consistency_graph(
    g: &mut Graph,
    det_or: &mut DetectorModel,
    det_sim: &mut DetectorModel,
    fake_or: NodeId,
    rec_sim: NodeId,
    fake_sim: NodeId,
    rec_or: NodeId,
) -> Result<NodeId> {
    ensure_frozen(det_or, "cross-domain consistency loss")?;
    ensure_frozen(det_sim, "cross-domain consistency loss")?;
    let (_, ref_fake_or) = detect(g, det_or, fake_or)?;
    let (_, ref_rec_sim) = detect(g, det_sim, rec_sim)?;
    let (_, ref_fake_sim) = detect(g, det_sim, fake_sim)?;
    let (_, ref_rec_or) = detect(g, det_or, rec_or)?;
    let a = g.mse_mean(ref_fake_or, ref_rec_sim);
    let b = g.mse_mean(ref_fake_sim, ref_rec_or);
    Ok(g.add(a, b))
}

/// Value-level cross-domain consistency on raw batches.
pub fn cross_domain_consistency_loss(
    det_or: &mut DetectorModel,
    det_sim: &mut DetectorModel,
    fake_or: &Arr,
    rec_sim: &Arr,
    fake_sim: &Arr,
    rec_or: &Arr,
) -> Result<f64> {
    let mut g = Graph::new();
    let fo = g.constant(fake_or.clone());
    let rs = g.constant(rec_sim.clone());
    let fs = g.constant(fake_sim.clone());
    let ro = g.constant(rec_or.clone());
    let l = cross_domain_consistency_graph(&mut g, det_or, det_sim, fo, rs, fs, ro)?;
    Ok(g.scalar_val(l))
}

/// Semantic consistency (ablation): each domain's detector acts as a noisy
/// labeller — its prediction on the real image (gradient-detached) becomes
/// the target for its prediction on the translated image:
/// `L = Lp(Det_sim(x'_sim) | Det_sim(x_or)) + Lp(Det_or(x'_or) | Det_or(x_sim))`.
///
/// The pair loss `Lp` is MSE + (1 - soft Dice) per stage, with the Dice
/// denominator using squared sums so that identical pre/post predictions
/// yield exactly zero even for soft maps.
#[allow(clippy::too_many_arguments)]
pub fn semantic_loss_graph(
    g: &mut Graph,
    det_sim: &mut DetectorModel,
    det_or: &mut DetectorModel,
    x_or: NodeId,
    fake_sim: NodeId,
    x_sim: NodeId,
    fake_or: NodeId,
    s: f64,
) -> Result<NodeId> {
    ensure_frozen(det_sim, "semantic loss")?;
    ensure_frozen(det_or, "semantic loss")?;
    // noisy labels from the real images, detached
    let (lbl_sig_s, lbl_ref_s) = detect(g, det_sim, x_or)?;
    let (lbl_sig_o, lbl_ref_o) = detect(g, det_or, x_sim)?;
    let (lbl_sig_s, lbl_ref_s) = (g.detach(lbl_sig_s), g.detach(lbl_ref_s));
    let (lbl_sig_o, lbl_ref_o) = (g.detach(lbl_sig_o), g.detach(lbl_ref_o));
    // predictions on the translated images
    let (sig_s, ref_s) = detect(g, det_sim, fake_sim)?;
    let (sig_o, ref_o) = detect(g, det_or, fake_or)?;
    let mut terms = Vec::new();
    for (pred, label) in [
        (sig_s, lbl_sig_s),
        (ref_s, lbl_ref_s),
        (sig_o, lbl_sig_o),
        (ref_o, lbl_ref_o),
    ] {
        terms.push(pair_stage_loss(g, pred, label, s));
    }
    let ab = g.add(terms[0], terms[1]);
    let cd = g.add(terms[2], terms[3]);
    Ok(g.add(ab, cd))
}

/// MSE + (1 - squared-denominator soft Dice) between two soft maps.
fn pair_stage_loss(g: &mut Graph, pred: NodeId, label: NodeId, s: f64) -> NodeId {
    let mse = g.mse_mean(pred, label);
    let prod = g.mul(pred, label);
    let inter = g.sum_per_image(prod);
    let p2 = g.mul(pred, pred);
    let l2 = g.mul(label, label);
    let sp = g.sum_per_image(p2);
    let sl = g.sum_per_image(l2);
    let num = {
        let two = g.mul_const(inter, 2.0);
        g.add_const(two, s)
    };
    let den = {
        let sum = g.add(sp, sl);
        g.add_const(sum, s)
    };
    let dice = g.div(num, den);
    let dm = g.mean_all(dice);
    let neg = g.mul_const(dm, -1.0);
    let om = g.add_const(neg, 1.0);
    g.add(mse, om)
}

/// Value-level semantic loss on raw batches.
#[allow(clippy::too_many_arguments)]
pub fn semantic_loss(
    det_sim: &mut DetectorModel,
    det_or: &mut DetectorModel,
    x_or: &Arr,
    fake_sim: &Arr,
    x_sim: &Arr,
    fake_or: &Arr,
    s: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let xo = g.constant(x_or.clone());
    let fs = g.constant(fake_sim.clone());
    let xs = g.constant(x_sim.clone());
    let fo = g.constant(fake_or.clone());
    let l = semantic_loss_graph(&mut g, det_sim, det_or, xo, fs, xs, fo, s)?;
    Ok(g.scalar_val(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{build_detector, DetectorConfig};
    use crate::gan::{cyclegan_objective, DiscriminatorConfig, GanConfig};
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frozen_detector(seed: u64) -> DetectorModel {
        let cfg = DetectorConfig {
            base_channels: 2,
            ..Default::default()
        };
        let mut m = build_detector(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        m.trainable = false;
        m
    }

    fn small_models(seed: u64) -> GanModels {
        let cfg = GanConfig {
            discriminator: DiscriminatorConfig {
                base_channels: 4,
                ..Default::default()
            },
            ..GanConfig::defaults_with_replay()
        };
        crate::gan::build_gan_models(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn rand_batch(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Arr {
        ArrayD::from_shape_simple_fn(IxDyn(&[n, c, h, w]), || rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn weights_validate_variant_consistency() {
        assert!(DetLossWeights::baseline().validate().is_ok());
        assert!(DetLossWeights::var1(1.0, 0.5).validate().is_ok());
        assert!(DetLossWeights::var2(1.0).validate().is_ok());
        let bad = DetLossWeights {
            alpha1: 0.0,
            alpha2: 1.0,
            variant: Variant::Var2,
        };
        assert!(bad.validate().is_err());
        let neg = DetLossWeights {
            alpha1: -1.0,
            alpha2: 0.0,
            variant: Variant::Var2,
        };
        assert!(neg.validate().is_err());
        // the reported weight grid
        let grid: Vec<(f64, f64)> = DetLossWeights::grid()
            .iter()
            .map(|w| (w.alpha1, w.alpha2))
            .collect();
        assert_eq!(grid, vec![(1.0, 1.0), (1.0, 0.5), (0.5, 1.0), (1.0, 0.0)]);
    }

    #[test]
    fn rejects_trainable_detectors() {
        let mut det_or = frozen_detector(1);
        let mut det_sim = frozen_detector(2);
        det_or.trainable = true;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fake = rand_batch(&mut rng, 1, 3, 16, 16);
        let y = ArrayD::zeros(IxDyn(&[1, 1, 16, 16]));
        let err = detection_consistency_loss(
            &mut det_or,
            &mut det_sim,
            &fake,
            &fake,
            &y,
            &y,
            1.0,
            MseReduction::Mean,
        );
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn zero_targets_and_silent_detectors_give_zero() {
        // saturate the head so the detector outputs ~0 everywhere; with
        // all-zero targets the smoothing term keeps both stages at 0
        let mut det_or = frozen_detector(4);
        let mut det_sim = frozen_detector(5);
        for det in [&mut det_or, &mut det_sim] {
            det.params.params.get_mut("outc.b").unwrap().fill(-60.0);
            det.params.params.get_mut("outc.w").unwrap().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fake = rand_batch(&mut rng, 1, 3, 16, 16);
        let y = ArrayD::zeros(IxDyn(&[1, 1, 16, 16]));
        let l = detection_consistency_loss(
            &mut det_or,
            &mut det_sim,
            &fake,
            &fake,
            &y,
            &y,
            1.0,
            MseReduction::Mean,
        )
        .unwrap();
        assert!(l < 1e-12, "got {l}");
    }

    #[test]
    fn gradients_reach_generators_but_not_detectors() {
        let models = small_models(7);
        let mut det_sim = frozen_detector(8);
        let mut det_or = frozen_detector(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let bs = rand_batch(&mut rng, 1, 3, 32, 32);
        let bo = rand_batch(&mut rng, 1, 3, 32, 32);
        let y = ArrayD::from_elem(IxDyn(&[1, 1, 32, 32]), 0.1);
        let step = build_detcyclegan_step(
            &models,
            &mut det_sim,
            &mut det_or,
            &bs,
            &bo,
            &y,
            &y,
            &GanLossWeights::default(),
            &DetLossWeights::var1(1.0, 1.0),
        )
        .unwrap();
        let mut base = step.base;
        base.graph.backward(step.total);
        for bind in [&base.bind_sim2or, &base.bind_or2sim] {
            let grads = bind.grads_owned(&base.graph);
            assert!(!grads.is_empty());
            let norm: f64 = grads
                .iter()
                .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
                .sum();
            assert!(norm > 0.0, "generator must receive gradient");
        }
        // frozen detectors were bound as constants: parameters untouched
        assert_eq!(det_sim.params.checksum(), frozen_detector(8).params.checksum());
        assert_eq!(det_or.params.checksum(), frozen_detector(9).params.checksum());
    }

    #[test]
    fn baseline_weights_reduce_to_cyclegan_exactly() {
        let models = small_models(11);
        let mut det_sim = frozen_detector(12);
        let mut det_or = frozen_detector(13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let bs = rand_batch(&mut rng, 1, 3, 32, 32);
        let bo = rand_batch(&mut rng, 1, 3, 32, 32);
        let y = ArrayD::zeros(IxDyn(&[1, 1, 32, 32]));
        let gw = GanLossWeights::default();
        let coupled = detcyclegan_objective(
            &models,
            &mut det_sim,
            &mut det_or,
            &bs,
            &bo,
            &y,
            &y,
            &gw,
            &DetLossWeights::baseline(),
        )
        .unwrap();
        let plain = cyclegan_objective(&models, &bs, &bo, &gw).unwrap();
        assert_eq!(coupled.total, plain.generator_loss);
        assert!(coupled.det_prime.is_none() && coupled.det_recovered.is_none());
    }

    #[test]
    fn lazy_skip_equals_explicit_zero_weight() {
        let models = small_models(15);
        let mut det_sim = frozen_detector(16);
        let mut det_or = frozen_detector(17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let bs = rand_batch(&mut rng, 1, 3, 32, 32);
        let bo = rand_batch(&mut rng, 1, 3, 32, 32);
        let y = ArrayD::from_elem(IxDyn(&[1, 1, 32, 32]), 0.05);
        let gw = GanLossWeights::default();
        let lazy = detcyclegan_objective(
            &models,
            &mut det_sim,
            &mut det_or,
            &bs,
            &bo,
            &y,
            &y,
            &gw,
            &DetLossWeights::var2(1.0),
        )
        .unwrap();
        assert!(lazy.det_recovered.is_none(), "alpha2 = 0 must skip the term");
        // explicit epsilon -> 0 limit: total + 0 * L'' computed separately
        let l_rec = recovered_detection_loss(
            &mut det_sim,
            &mut det_or,
            &lazy.rec_sim,
            &lazy.rec_or,
            &y,
            &y,
            1.0,
            MseReduction::Mean,
        )
        .unwrap();
        let explicit = lazy.generator_loss + 1.0 * lazy.det_prime.unwrap() + 0.0 * l_rec;
        assert_eq!(lazy.total, explicit);
    }

    #[test]
    fn recovered_loss_equals_consistency_on_swapped_wiring() {
        // structural cross-check: when x'' == x' and the detector/target
        // pairing is swapped accordingly, both ops compute the same value
        let mut det_sim = frozen_detector(19);
        let mut det_or = frozen_detector(20);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = rand_batch(&mut rng, 2, 3, 16, 16);
        let b = rand_batch(&mut rng, 2, 3, 16, 16);
        let ys = ArrayD::from_elem(IxDyn(&[2, 1, 16, 16]), 0.2);
        let yo = ArrayD::from_elem(IxDyn(&[2, 1, 16, 16]), 0.7);
        let rec = recovered_detection_loss(
            &mut det_sim,
            &mut det_or,
            &a,
            &b,
            &ys,
            &yo,
            1.0,
            MseReduction::Mean,
        )
        .unwrap();
        // consistency: L(Det_or(fake_or), y_sim) + L(Det_sim(fake_sim), y_or)
        // with fake_or := b (paired with yo via the swap) and fake_sim := a
        let cons = detection_consistency_loss(
            &mut det_or,
            &mut det_sim,
            &b,
            &a,
            &yo,
            &ys,
            1.0,
            MseReduction::Mean,
        )
        .unwrap();
        assert!((rec - cons).abs() < 1e-12);
        assert!(rec >= 0.0);
    }

    #[test]
    fn cross_domain_consistency_arithmetic() {
        let mut det_or = frozen_detector(22);
        let mut det_sim = frozen_detector(23);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let x = rand_batch(&mut rng, 1, 3, 16, 16);
        let l = cross_domain_consistency_loss(&mut det_or, &mut det_sim, &x, &x, &x, &x).unwrap();
        assert!(l >= 0.0);
        // identical predicted maps in a pair cost exactly 0
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let (_, r1) = detect(&mut g, &mut det_or, xi).unwrap();
        let (_, r2) = detect(&mut g, &mut det_or, xi).unwrap();
        let same = g.mse_mean(r1, r2);
        assert_eq!(g.scalar_val(same), 0.0);
        // symmetry under swapping the maps within each pair, and the
        // constant-maps arithmetic: maps differing by 0.2 -> MSE 0.04
        let a = ArrayD::from_elem(IxDyn(&[1, 1, 4, 4]), 0.5);
        let b = ArrayD::from_elem(IxDyn(&[1, 1, 4, 4]), 0.3);
        let mut g = Graph::new();
        let (ai, bi) = (g.constant(a), g.constant(b));
        let m1 = g.mse_mean(ai, bi);
        let m2 = g.mse_mean(bi, ai);
        assert_eq!(g.scalar_val(m1), g.scalar_val(m2));
        assert!((g.scalar_val(m1) - 0.04).abs() < 1e-12);
    }

    #[test]
    fn semantic_loss_identity_generators_give_zero() {
        let mut det_sim = frozen_detector(25);
        let mut det_or = frozen_detector(26);
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let x_or = rand_batch(&mut rng, 1, 3, 16, 16);
        let x_sim = rand_batch(&mut rng, 1, 3, 16, 16);
        // identity generators: x'_sim == x_or, x'_or == x_sim
        let l =
            semantic_loss(&mut det_sim, &mut det_or, &x_or, &x_or, &x_sim, &x_sim, 1.0).unwrap();
        assert!(l.abs() < 1e-12, "identity translation must cost 0, got {l}");
        // nonnegative in general
        let l =
            semantic_loss(&mut det_sim, &mut det_or, &x_or, &x_sim, &x_sim, &x_or, 1.0).unwrap();
        assert!(l >= 0.0);
    }

    #[test]
    fn semantic_loss_detach_changes_gradient_not_value() {
        let mut det_sim = frozen_detector(28);
        let mut det_or = frozen_detector(29);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let x_or = rand_batch(&mut rng, 1, 3, 16, 16);
        let x_sim = rand_batch(&mut rng, 1, 3, 16, 16);
        let fake_sim = rand_batch(&mut rng, 1, 3, 16, 16);
        let fake_or = rand_batch(&mut rng, 1, 3, 16, 16);
        let detached = semantic_loss(
            &mut det_sim,
            &mut det_or,
            &x_or,
            &fake_sim,
            &x_sim,
            &fake_or,
            1.0,
        )
        .unwrap();
        // undetached recomputation of the same value
        let mut g = Graph::new();
        let xo = g.constant(x_or.clone());
        let fs = g.constant(fake_sim.clone());
        let xs = g.constant(x_sim.clone());
        let fo = g.constant(fake_or.clone());
        let (ls_s, lr_s) = detect(&mut g, &mut det_sim, xo).unwrap();
        let (ls_o, lr_o) = detect(&mut g, &mut det_or, xs).unwrap();
        let (ps_s, pr_s) = detect(&mut g, &mut det_sim, fs).unwrap();
        let (ps_o, pr_o) = detect(&mut g, &mut det_or, fo).unwrap();
        let t1 = pair_stage_loss(&mut g, ps_s, ls_s, 1.0);
        let t2 = pair_stage_loss(&mut g, pr_s, lr_s, 1.0);
        let t3 = pair_stage_loss(&mut g, ps_o, ls_o, 1.0);
        let t4 = pair_stage_loss(&mut g, pr_o, lr_o, 1.0);
        let ab = g.add(t1, t2);
        let cd = g.add(t3, t4);
        let undetached = g.add(ab, cd);
        assert!((detached - g.scalar_val(undetached)).abs() < 1e-12);
    }
}

//! Landmark detection network: U-Net encoder-decoder (conv → ReLU → BN
//! blocks, bilinear upsampling, step-wise dropout), a 1x1 conv + sigmoid
//! head, then a differentiable Gaussian filter and a convolutional spatial
//! soft-argmax layer. The point-segmentation loss (MSE + soft Dice) is
//! applied at both the sigmoid and soft-argmax stages.

use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{Arr, Graph, NodeId, PadMode};
use crate::nn::params::{kaiming_uniform, ones, zeros, Bindings, ParamSet};

/// Forward-pass mode. Train enables dropout and batch statistics;
/// Eval uses running statistics and is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MseReduction {
    /// Pixel mean: resolution-invariant, balanced against the Dice term.
    Mean,
    /// Literal per-image pixel sum.
    Sum,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Channels of the first encoder level; doubled per downsampling step.
    pub base_channels: usize,
    /// Number of downsampling (and upsampling) blocks.
    pub depth: usize,
    /// Dropout after the outermost conv blocks.
    pub dropout_outer: f64,
    /// Dropout at the bottleneck; intermediate levels interpolate step-wise.
    pub dropout_bottleneck: f64,
    /// Gaussian filter layer: kernel size (odd) and sigma.
    pub gaussian_kernel: usize,
    pub gaussian_sigma: f64,
    /// Convolutional soft-argmax: window size (odd) and softmax temperature.
    pub softargmax_window: usize,
    pub softargmax_temperature: f64,
    /// Dice smoothing factor `s`.
    pub smoothing: f64,
    /// Sigma used to render training target heatmaps.
    pub heatmap_sigma: f64,
    pub mse_reduction: MseReduction,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            base_channels: 64,
            depth: 4,
            dropout_outer: 0.3,
            dropout_bottleneck: 0.5,
            gaussian_kernel: 3,
            gaussian_sigma: 1.0,
            softargmax_window: 3,
            softargmax_temperature: 1.0,
            smoothing: 1.0,
            heatmap_sigma: 2.0,
            mse_reduction: MseReduction::Mean,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.depth == 0 || self.depth > 6 {
            return Err(Error::Config("detector base_channels/depth out of range".into()));
        }
        if self.gaussian_kernel % 2 == 0 || self.softargmax_window % 2 == 0 {
            return Err(Error::Config("kernel/window sizes must be odd".into()));
        }
        for p in [self.dropout_outer, self.dropout_bottleneck] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config("dropout must be in [0,1)".into()));
            }
        }
        if self.smoothing <= 0.0 {
            return Err(Error::Config("smoothing s must be > 0".into()));
        }
        if self.softargmax_temperature <= 0.0 {
            return Err(Error::Config("soft-argmax temperature must be > 0".into()));
        }
        if self.gaussian_sigma <= 0.0 || self.heatmap_sigma <= 0.0 {
            return Err(Error::Config("sigmas must be > 0".into()));
        }
        Ok(())
    }

    /// Encoder output channels per level: `B, 2B, ...`, with the bottleneck
    /// kept at the last doubled width (bilinear-decoder convention).
    fn enc_channels(&self) -> Vec<usize> {
        let d = self.depth;
        let mut c: Vec<usize> = (0..d).map(|i| self.base_channels << i).collect();
        c.push(self.base_channels << (d - 1)); // bottleneck
        c
    }

    fn dec_channels(&self) -> Vec<usize> {
        let enc = self.enc_channels();
        let d = self.depth;
        (0..d)
            .map(|j| (enc[d - 1 - j] / 2).max(self.base_channels))
            .collect()
    }

    fn dropout_at(&self, level: usize) -> f64 {
        let d = self.depth as f64;
        self.dropout_outer + (self.dropout_bottleneck - self.dropout_outer) * level as f64 / d
    }
}

/// Parameters + config for one detector instance (Det_sim or Det_or).
#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub config: DetectorConfig,
    pub params: ParamSet,
    /// When false the model is frozen: forward binds constants and any
    /// enclosing optimization leaves the parameters bit-identical.
    pub trainable: bool,
}

fn conv_names(prefix: &str, idx: usize) -> [String; 6] {
    [
        format!("{prefix}.{idx}.w"),
        format!("{prefix}.{idx}.b"),
        format!("{prefix}.{idx}.bn_g"),
        format!("{prefix}.{idx}.bn_b"),
        format!("{prefix}.{idx}.bn_rm"),
        format!("{prefix}.{idx}.bn_rv"),
    ]
}

fn init_conv_block(ps: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, idx: usize, cin: usize, cout: usize) {
    let [w, b, g, be, rm, rv] = conv_names(prefix, idx);
    let fan_in = cin * 9;
    ps.insert(w, kaiming_uniform(rng, &[cout, cin, 3, 3], fan_in));
    ps.insert(b, kaiming_uniform(rng, &[cout], fan_in));
    ps.insert(g, ones(&[cout]));
    ps.insert(be, zeros(&[cout]));
    ps.insert_buffer(rm, zeros(&[cout]));
    ps.insert_buffer(rv, ones(&[cout]));
}

/// Build a detector with freshly initialized parameters. Equal seeds yield
/// identical parameters.
pub fn build_detector(config: &DetectorConfig, rng: &mut ChaCha8Rng) -> Result<DetectorModel> {
    config.validate()?;
    let mut ps = ParamSet::new();
    let enc = config.enc_channels();
    let dec = config.dec_channels();
    let d = config.depth;

    init_conv_block(&mut ps, rng, "inc", 0, 3, enc[0]);
    init_conv_block(&mut ps, rng, "inc", 1, enc[0], enc[0]);
    for i in 1..=d {
        let prefix = format!("down{i}");
        init_conv_block(&mut ps, rng, &prefix, 0, enc[i - 1], enc[i]);
        init_conv_block(&mut ps, rng, &prefix, 1, enc[i], enc[i]);
    }
    let mut prev = enc[d];
    for j in 1..=d {
        let skip = enc[d - j];
        let out = dec[j - 1];
        let prefix = format!("up{j}");
        init_conv_block(&mut ps, rng, &prefix, 0, prev + skip, out);
        init_conv_block(&mut ps, rng, &prefix, 1, out, out);
        prev = out;
    }
    let fan_in = prev;
    ps.insert("outc.w", kaiming_uniform(rng, &[1, prev, 1, 1], fan_in));
    ps.insert("outc.b", kaiming_uniform(rng, &[1], fan_in));

    Ok(DetectorModel {
        config: config.clone(),
        params: ps,
        trainable: true,
    })
}

/// Sigmoid-stage and soft-argmax-stage outputs of one forward pass, plus the
/// parameter bindings for the optimizer.
pub struct DetectorOutputs {
    pub sigmoid: NodeId,
    pub refined: NodeId,
    pub bindings: Bindings,
}

fn conv_block(
    g: &mut Graph,
    model: &mut DetectorModel,
    bind: &mut Bindings,
    prefix: &str,
    idx: usize,
    x: NodeId,
    mode: Mode,
) -> NodeId {
    let [wn, bn, gn, ben, rmn, rvn] = conv_names(prefix, idx);
    let trainable = model.trainable;
    let w = bind.bind(g, &model.params, &wn, trainable);
    let b = bind.bind(g, &model.params, &bn, trainable);
    let gamma = bind.bind(g, &model.params, &gn, trainable);
    let beta = bind.bind(g, &model.params, &ben, trainable);
    let p = g.pad2d(x, 1, PadMode::Zero);
    let c = g.conv2d(p, w, Some(b), 1);
    let r = g.relu(c);
    let training = mode == Mode::Train;
    let mut rm = model
        .params
        .buffer(&rmn)
        .clone()
        .into_dimensionality::<ndarray::Ix1>()
        .unwrap();
    let mut rv = model
        .params
        .buffer(&rvn)
        .clone()
        .into_dimensionality::<ndarray::Ix1>()
        .unwrap();
    let out = g.batch_norm(r, gamma, beta, Some((&mut rm, &mut rv)), training, 0.1, 1e-5);
    if training {
        *model.params.buffer_mut(&rmn) = rm.into_dyn();
        *model.params.buffer_mut(&rvn) = rv.into_dyn();
    }
    out
}

/// Normalized Gaussian kernel as a `[1,1,k,k]` constant.
fn gaussian_kernel_arr(k: usize, sigma: f64) -> Arr {
    let r = (k / 2) as isize;
    let mut sum = 0.0;
    let mut v = Vec::with_capacity(k * k);
    for di in -r..=r {
        for dj in -r..=r {
            let w = (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp();
            v.push(w);
            sum += w;
        }
    }
    for w in &mut v {
        *w /= sum;
    }
    ArrayD::from_shape_vec(IxDyn(&[1, 1, k, k]), v).unwrap()
}

/// Differentiable Gaussian smoothing (normalized kernel, reflect padding).
pub fn gaussian_filter_graph(g: &mut Graph, x: NodeId, k: usize, sigma: f64) -> NodeId {
    let kern = g.constant(gaussian_kernel_arr(k, sigma));
    let p = g.pad2d(x, k / 2, PadMode::Reflect);
    g.conv2d(p, kern, None, 1)
}

/// Convolutional spatial soft-argmax: within each sliding window a softmax
/// over the map values (temperature-scaled) weights the center value,
/// re-concentrating mass toward local maxima. Output stays in [0,1] for
/// inputs in [0,1]; as temperature -> 0 each local maximum keeps its full
/// value while its neighborhood is suppressed.
pub fn soft_argmax_graph(g: &mut Graph, x: NodeId, window: usize, temperature: f64) -> NodeId {
    let scaled = g.mul_const(x, 1.0 / temperature);
    let e = g.exp(scaled);
    let kern = g.constant(ArrayD::from_elem(IxDyn(&[1, 1, window, window]), 1.0));
    let p = g.pad2d(e, window / 2, PadMode::Reflect);
    let denom = g.conv2d(p, kern, None, 1);
    let w = g.div(e, denom);
    g.mul(x, w)
}

/// Run the detector on a normalized batch `[N, 3, H, W]` already placed in
/// the graph. In Train mode, dropout draws from `rng` and batch-norm running
/// statistics are updated in place.
pub fn forward_graph(
    model: &mut DetectorModel,
    g: &mut Graph,
    x: NodeId,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<DetectorOutputs> {
    let shape = g.val(x).shape().to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::Shape(format!(
            "detector input must be Nx3xHxW, got {shape:?}"
        )));
    }
    let d = model.config.depth;
    let div = 1 << d;
    if shape[2] % div != 0 || shape[3] % div != 0 {
        return Err(Error::Shape(format!(
            "spatial size {}x{} not divisible by 2^{d}",
            shape[2], shape[3]
        )));
    }
    if mode == Mode::Train && !model.trainable {
        return Err(Error::Contract("train-mode forward on a frozen detector".into()));
    }
    let mut local_rng;
    let rng = match rng {
        Some(r) => r,
        None => {
            if mode == Mode::Train {
                return Err(Error::Contract(
                    "train-mode forward needs an rng for dropout".into(),
                ));
            }
            local_rng = ChaCha8Rng::seed_from_u64(0);
            &mut local_rng
        }
    };

    let mut bind = Bindings::new();
    let cfg = model.config.clone();
    let dropout = |g: &mut Graph, h: NodeId, p: f64, rng: &mut ChaCha8Rng, mode: Mode| {
        if mode == Mode::Train {
            g.dropout(h, p, rng)
        } else {
            h
        }
    };

    let mut h = conv_block(g, model, &mut bind, "inc", 0, x, mode);
    h = conv_block(g, model, &mut bind, "inc", 1, h, mode);
    h = dropout(g, h, cfg.dropout_at(0), rng, mode);
    let mut skips = vec![h];
    for i in 1..=d {
        let prefix = format!("down{i}");
        h = g.maxpool2(h);
        h = conv_block(g, model, &mut bind, &prefix, 0, h, mode);
        h = conv_block(g, model, &mut bind, &prefix, 1, h, mode);
        h = dropout(g, h, cfg.dropout_at(i), rng, mode);
        if i < d {
            skips.push(h);
        }
    }
    for j in 1..=d {
        let prefix = format!("up{j}");
        h = g.upsample2x(h);
        h = g.concat_c(skips[d - j], h);
        h = conv_block(g, model, &mut bind, &prefix, 0, h, mode);
        h = conv_block(g, model, &mut bind, &prefix, 1, h, mode);
        h = dropout(g, h, cfg.dropout_at(d - j), rng, mode);
    }
    let w = bind.bind(g, &model.params, "outc.w", model.trainable);
    let b = bind.bind(g, &model.params, "outc.b", model.trainable);
    let logits = g.conv2d(h, w, Some(b), 1);
    let sig = g.sigmoid(logits);
    let blur = gaussian_filter_graph(g, sig, cfg.gaussian_kernel, cfg.gaussian_sigma);
    let refined = soft_argmax_graph(g, blur, cfg.softargmax_window, cfg.softargmax_temperature);
    Ok(DetectorOutputs {
        sigmoid: sig,
        refined,
        bindings: bind,
    })
}

/// Eval-mode convenience forward: normalized batch in, both heatmap stages
/// out (`[N, 1, H, W]` each). No gradients, no side effects.
pub fn detector_forward(model: &mut DetectorModel, batch: &Arr) -> Result<(Arr, Arr)> {
    let mut g = Graph::new();
    let x = g.constant(batch.clone());
    let out = forward_graph(model, &mut g, x, Mode::Eval, None)?;
    Ok((g.val(out.sigmoid).clone(), g.val(out.refined).clone()))
}

/// Build the two-stage point-segmentation loss in the graph:
/// `L = l(sigmoid, target) + l(refined, target)` with
/// `l = MSE + (1 - softDice)`, Dice per image then averaged over the batch.
pub fn detection_loss_graph(
    g: &mut Graph,
    sigmoid: NodeId,
    refined: NodeId,
    target: NodeId,
    s: f64,
    reduction: MseReduction,
) -> Result<NodeId> {
    if s <= 0.0 {
        return Err(Error::Validation("smoothing s must be > 0".into()));
    }
    if g.val(sigmoid).shape() != g.val(target).shape()
        || g.val(refined).shape() != g.val(target).shape()
    {
        return Err(Error::Shape(format!(
            "loss shapes differ: {:?} / {:?} vs target {:?}",
            g.val(sigmoid).shape(),
            g.val(refined).shape(),
            g.val(target).shape()
        )));
    }
    let a = stage_loss(g, sigmoid, target, s, reduction);
    let b = stage_loss(g, refined, target, s, reduction);
    Ok(g.add(a, b))
}

fn stage_loss(g: &mut Graph, pred: NodeId, target: NodeId, s: f64, reduction: MseReduction) -> NodeId {
    let n = g.val(pred).shape()[0] as f64;
    let d = g.sub(pred, target);
    let sq = g.mul(d, d);
    let mse = match reduction {
        MseReduction::Mean => g.mean_all(sq),
        MseReduction::Sum => {
            // per-image pixel sum, averaged over the batch
            let total = g.sum_all(sq);
            g.mul_const(total, 1.0 / n)
        }
    };
    let prod = g.mul(pred, target);
    let inter = g.sum_per_image(prod);
    let sp = g.sum_per_image(pred);
    let st = g.sum_per_image(target);
    let num = {
        let two = g.mul_const(inter, 2.0);
        g.add_const(two, s)
    };
    let den = {
        let sum = g.add(sp, st);
        g.add_const(sum, s)
    };
    let dice = g.div(num, den);
    let dice_mean = g.mean_all(dice);
    let neg = g.mul_const(dice_mean, -1.0);
    let one_minus = g.add_const(neg, 1.0);
    g.add(mse, one_minus)
}

/// Value-only detection loss on raw arrays (shapes `[N,1,H,W]` or `[H,W]`).
pub fn detection_loss(
    sigmoid: &Arr,
    refined: &Arr,
    target: &Arr,
    s: f64,
    reduction: MseReduction,
) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(as_nchw(sigmoid));
    let b = g.constant(as_nchw(refined));
    let t = g.constant(as_nchw(target));
    let l = detection_loss_graph(&mut g, a, b, t, s, reduction)?;
    Ok(g.scalar_val(l))
}

fn as_nchw(a: &Arr) -> Arr {
    match a.ndim() {
        2 => {
            let (h, w) = (a.shape()[0], a.shape()[1]);
            a.clone().into_shape_with_order(IxDyn(&[1, 1, h, w])).unwrap()
        }
        4 => a.clone(),
        other => panic!("expected 2-d or 4-d map, got {other}-d"),
    }
}

/// Standalone Gaussian filter on a single map.
pub fn gaussian_filter(map: &Array2<f64>, k: usize, sigma: f64) -> Array2<f64> {
    let (h, w) = map.dim();
    let mut g = Graph::new();
    let x = g.constant(as_nchw(&map.clone().into_dyn()));
    let y = gaussian_filter_graph(&mut g, x, k, sigma);
    to_2d(g.val(y), h, w)
}

/// Standalone soft-argmax on a single map.
pub fn soft_argmax_layer(map: &Array2<f64>, window: usize, temperature: f64) -> Result<Array2<f64>> {
    if temperature <= 0.0 {
        return Err(Error::Validation(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    let (h, w) = map.dim();
    let mut g = Graph::new();
    let x = g.constant(as_nchw(&map.clone().into_dyn()));
    let y = soft_argmax_graph(&mut g, x, window, temperature);
    Ok(to_2d(g.val(y), h, w))
}

fn to_2d(a: &Arr, h: usize, w: usize) -> Array2<f64> {
    a.clone()
        .into_shape_with_order((h, w))
        .unwrap()
        .into_dimensionality()
        .unwrap()
}

// Checkpoint helpers ---------------------------------------------------------

use rand_chacha::rand_core::SeedableRng;

use crate::nn::checkpoint::Checkpoint;

impl DetectorModel {
    pub fn to_checkpoint(&self, extra_meta: serde_json::Value) -> Checkpoint {
        let mut ckpt = Checkpoint {
            meta: serde_json::json!({
                "kind": "detector",
                "config": serde_json::to_value(&self.config).unwrap(),
                "extra": extra_meta,
            }),
            tensors: Default::default(),
        };
        for (k, v) in &self.params.params {
            ckpt.tensors.insert(format!("p.{k}"), v.clone());
        }
        for (k, v) in &self.params.buffers {
            ckpt.tensors.insert(format!("b.{k}"), v.clone());
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta["kind"] != "detector" {
            return Err(Error::Validation(format!(
                "checkpoint kind {:?} is not a detector",
                ckpt.meta["kind"]
            )));
        }
        let config: DetectorConfig = serde_json::from_value(ckpt.meta["config"].clone())
            .map_err(|e| Error::Validation(format!("detector config in checkpoint: {e}")))?;
        let mut params = ParamSet::new();
        for (k, v) in &ckpt.tensors {
            if let Some(name) = k.strip_prefix("p.") {
                params.insert(name, v.clone());
            } else if let Some(name) = k.strip_prefix("b.") {
                params.insert_buffer(name, v.clone());
            }
        }
        Ok(DetectorModel {
            config,
            params,
            trainable: true,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn small_config(base: usize) -> DetectorConfig {
        DetectorConfig {
            base_channels: base,
            ..DetectorConfig::default()
        }
    }

    fn rand_input(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Arr {
        use rand::Rng;
        ArrayD::from_shape_simple_fn(IxDyn(&[n, 3, h, w]), || rng.gen::<f64>())
    }

    #[test]
    fn output_shapes_match_input_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = build_detector(&small_config(4), &mut rng).unwrap();
        let x = rand_input(&mut rng, 1, 288, 512);
        let (sig, refined) = detector_forward(&mut model, &x).unwrap();
        assert_eq!(sig.shape(), &[1, 1, 288, 512]);
        assert_eq!(refined.shape(), &[1, 1, 288, 512]);
        assert!(sig.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(refined.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_indivisible_spatial_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = build_detector(&small_config(2), &mut rng).unwrap();
        let x = rand_input(&mut rng, 1, 24, 24); // 24 % 16 != 0
        assert!(matches!(detector_forward(&mut model, &x), Err(Error::Shape(_))));
    }

    #[test]
    fn equal_seeds_give_identical_parameters() {
        let cfg = small_config(4);
        let a = build_detector(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = build_detector(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        let c = build_detector(&cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_ne!(a.params.checksum(), c.params.checksum());
    }

    #[test]
    fn parameter_count_matches_arithmetic() {
        // independent count: conv(ci,co) = 9*ci*co + 3*co (w + bias + bn);
        // doubleconv = conv(ci,co) + conv(co,co); head = B + 1.
        let b = 8usize;
        let conv = |ci: usize, co: usize| 9 * ci * co + 3 * co;
        let dc = |ci: usize, co: usize| conv(ci, co) + conv(co, co);
        let expected = dc(3, b)
            + dc(b, 2 * b)
            + dc(2 * b, 4 * b)
            + dc(4 * b, 8 * b)
            + dc(8 * b, 8 * b)
            + dc(16 * b, 4 * b)
            + dc(8 * b, 2 * b)
            + dc(4 * b, b)
            + dc(2 * b, b)
            + (b + 1);
        let model = build_detector(&small_config(b), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(model.params.n_scalars(), expected);
    }

    #[test]
    fn saturated_head_bias_kills_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = build_detector(&small_config(4), &mut rng).unwrap();
        model.params.params.get_mut("outc.b").unwrap().fill(-20.0);
        model.params.params.get_mut("outc.w").unwrap().fill(0.0);
        let x = rand_input(&mut rng, 1, 32, 32);
        let (sig, _) = detector_forward(&mut model, &x).unwrap();
        assert!(sig.iter().all(|&v| v < 1e-3));
    }

    #[test]
    fn gaussian_filter_constant_and_impulse() {
        let c = Array2::from_elem((7, 9), 0.37);
        let out = gaussian_filter(&c, 3, 1.0);
        for v in out.iter() {
            assert!((v - 0.37).abs() < 1e-12, "kernel must sum to 1");
        }
        let zero = Array2::zeros((5, 5));
        assert!(gaussian_filter(&zero, 3, 1.0).iter().all(|&v| v == 0.0));
        let mut imp = Array2::zeros((5, 5));
        imp[(2, 2)] = 1.0;
        let out = gaussian_filter(&imp, 3, 1.0);
        // center weight of the normalized 3x3 sigma=1 kernel
        let z = 1.0 + 4.0 * (-0.5f64).exp() + 4.0 * (-1.0f64).exp();
        assert!((out[(2, 2)] - 1.0 / z).abs() < 1e-12);
        assert!((out[(2, 2)] - 0.2042).abs() < 1e-4);
    }

    #[test]
    fn gaussian_filter_preserves_interior_mass() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut map = Array2::zeros((16, 16));
        for y in 2..14 {
            for x in 2..14 {
                map[(y, x)] = rng.gen::<f64>();
            }
        }
        let out = gaussian_filter(&map, 3, 1.0);
        let (ms, os) = (map.sum(), out.sum());
        assert!((ms - os).abs() < 1e-9, "interior-supported mass must be preserved");
    }

    #[test]
    fn soft_argmax_uniform_stays_uniform() {
        let u = Array2::from_elem((6, 6), 0.4);
        let out = soft_argmax_layer(&u, 3, 1.0).unwrap();
        let first = out[(0, 0)];
        assert!(out.iter().all(|v| (v - first).abs() < 1e-12));
    }

    #[test]
    fn soft_argmax_peak_stays_argmax_and_concentrates() {
        // smooth blob with a strict peak
        let mut map = Array2::zeros((9, 9));
        for y in 0..9 {
            for x in 0..9 {
                let d2 = ((x as f64 - 4.0).powi(2) + (y as f64 - 4.0).powi(2)) / 4.0;
                map[(y, x)] = (-d2).exp();
            }
        }
        let mut ratios = Vec::new();
        for t in [1.0, 0.5, 0.1] {
            let out = soft_argmax_layer(&map, 3, t).unwrap();
            let peak = out[(4, 4)];
            let best_other = out
                .indexed_iter()
                .filter(|((y, x), _)| !(*y == 4 && *x == 4))
                .map(|(_, v)| *v)
                .fold(f64::MIN, f64::max);
            assert!(peak > best_other, "peak must remain the argmax at T={t}");
            ratios.push(peak / out[(4, 5)]);
            assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(ratios[1] > ratios[0] && ratios[2] > ratios[1], "{ratios:?}");
    }

    #[test]
    fn soft_argmax_rejects_bad_temperature() {
        let u = Array2::zeros((4, 4));
        assert!(soft_argmax_layer(&u, 3, 0.0).is_err());
    }

    #[test]
    fn detection_loss_exact_values() {
        // maps identical to a binary target -> exactly 0 for any s
        // (soft Dice hits 1 when sum(y*yhat) = sum(y), i.e. binary equality)
        let mut tb = Array2::zeros((4, 4));
        tb[(1, 2)] = 1.0;
        tb[(3, 0)] = 1.0;
        let t = tb.into_dyn();
        let l = detection_loss(&t, &t, &t, 1.0, MseReduction::Mean).unwrap();
        assert_eq!(l, 0.0);
        let l = detection_loss(&t, &t, &t, 0.5, MseReduction::Mean).unwrap();
        assert_eq!(l, 0.0);
        // all-zero maps and target -> 0 via the smoothing term
        let z = Array2::zeros((4, 4)).into_dyn();
        let l = detection_loss(&z, &z, &z, 1.0, MseReduction::Mean).unwrap();
        assert_eq!(l, 0.0);
        // 4x4, target zero, both maps 0.5, s = 1:
        //   per stage: 0.25 + (1 - 1/9); total doubles it
        let h = Array2::from_elem((4, 4), 0.5).into_dyn();
        let l = detection_loss(&h, &h, &z, 1.0, MseReduction::Mean).unwrap();
        let expected = 2.0 * (0.25 + (1.0 - 1.0 / 9.0));
        assert!((l - expected).abs() < 1e-12);
        // literal-sum variant scales the MSE term by the pixel count
        let l = detection_loss(&h, &h, &z, 1.0, MseReduction::Sum).unwrap();
        let expected = 2.0 * (0.25 * 16.0 + (1.0 - 1.0 / 9.0));
        assert!((l - expected).abs() < 1e-12);
    }

    #[test]
    fn detection_loss_nonnegative_zero_iff_equal() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = ArrayD::from_shape_simple_fn(IxDyn(&[1, 1, 8, 8]), || rng.gen::<f64>());
            let b = ArrayD::from_shape_simple_fn(IxDyn(&[1, 1, 8, 8]), || rng.gen::<f64>());
            let t = ArrayD::from_shape_simple_fn(IxDyn(&[1, 1, 8, 8]), || rng.gen::<f64>());
            let l = detection_loss(&a, &b, &t, 1.0, MseReduction::Mean).unwrap();
            assert!(l >= 0.0);
            if a != t || b != t {
                assert!(l > 0.0);
            }
        }
    }

    #[test]
    fn detection_loss_gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let a = ArrayD::from_shape_simple_fn(IxDyn(&[1, 1, 8, 8]), || rng.gen::<f64>());
            let b = ArrayD::from_shape_simple_fn(IxDyn(&[1, 1, 8, 8]), || rng.gen::<f64>());
            let t = ArrayD::from_shape_simple_fn(IxDyn(&[1, 1, 8, 8]), || rng.gen::<f64>());
            let mut g = Graph::new();
            let (ai, bi, ti) = (
                g.leaf(a.clone(), true),
                g.leaf(b.clone(), true),
                g.constant(t.clone()),
            );
            let l = detection_loss_graph(&mut g, ai, bi, ti, 1.0, MseReduction::Mean).unwrap();
            g.backward(l);
            let ga = g.grad(ai).unwrap().clone();
            let idx = rng.gen_range(0..64);
            let h = 1e-6;
            let eval = |av: &Arr| detection_loss(av, &b, &t, 1.0, MseReduction::Mean).unwrap();
            let mut ap = a.clone();
            ap.as_slice_mut().unwrap()[idx] += h;
            let fp = eval(&ap);
            ap.as_slice_mut().unwrap()[idx] -= 2.0 * h;
            let fm = eval(&ap);
            let num = (fp - fm) / (2.0 * h);
            let ana = ga.as_slice().unwrap()[idx];
            assert!(
                (num - ana).abs() / (1.0 + num.abs().max(ana.abs())) < 1e-3,
                "numeric {num} vs analytic {ana}"
            );
        }
    }

    #[test]
    fn refined_map_gradient_reaches_input_pixels() {
        // d sum(refined) / d input-pixel against central differences (16x16)
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut model = build_detector(&small_config(2), &mut rng).unwrap();
        let x = rand_input(&mut rng, 1, 16, 16);
        let mut g = Graph::new();
        let xid = g.leaf(x.clone(), true);
        let out = forward_graph(&mut model, &mut g, xid, Mode::Eval, None).unwrap();
        let total = g.sum_all(out.refined);
        g.backward(total);
        let gx = g.grad(xid).unwrap().clone();
        use rand::Rng;
        for _ in 0..4 {
            let idx = rng.gen_range(0..x.len());
            let h = 1e-5;
            let run = |xv: &Arr| {
                let mut m = model.clone();
                let (_, refined) = detector_forward(&mut m, xv).unwrap();
                refined.sum()
            };
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            let fp = run(&xp);
            xp.as_slice_mut().unwrap()[idx] -= 2.0 * h;
            let fm = run(&xp);
            let num = (fp - fm) / (2.0 * h);
            let ana = gx.as_slice().unwrap()[idx];
            assert!(
                (num - ana).abs() / (1.0 + num.abs().max(ana.abs())) < 1e-3,
                "numeric {num} vs analytic {ana}"
            );
        }
    }

    #[test]
    fn frozen_detector_unchanged_by_enclosing_optimization() {
        use crate::nn::optim::Adam;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut model = build_detector(&small_config(2), &mut rng).unwrap();
        model.trainable = false;
        let before = model.params.checksum();

        // enclosing objective: optimize a free input image so the detector
        // output matches a target
        let mut upstream = ParamSet::new();
        use rand::Rng;
        upstream.insert(
            "img",
            ArrayD::from_shape_simple_fn(IxDyn(&[1, 3, 16, 16]), || rng.gen::<f64>()),
        );
        let target = ArrayD::from_elem(IxDyn(&[1, 1, 16, 16]), 0.2);
        let mut opt = Adam::new(1e-2);
        for _ in 0..10 {
            let mut g = Graph::new();
            let mut bind = Bindings::new();
            let x = bind.bind(&mut g, &upstream, "img", true);
            let out = forward_graph(&mut model, &mut g, x, Mode::Eval, None).unwrap();
            let t = g.constant(target.clone());
            let loss = g.mse_mean(out.refined, t);
            g.backward(loss);
            let grads = bind.grads(&g);
            assert!(!grads.is_empty());
            opt.step(&mut upstream, &grads);
        }
        assert_eq!(model.params.checksum(), before);
    }

    #[test]
    fn checkpoint_round_trip_preserves_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let model = build_detector(&small_config(2), &mut rng).unwrap();
        let ckpt = model.to_checkpoint(serde_json::json!({"epoch": 1}));
        let back = DetectorModel::from_checkpoint(&ckpt).unwrap();
        assert_eq!(model.params.checksum(), back.params.checksum());
        assert_eq!(model.config.base_channels, back.config.base_channels);
    }
}

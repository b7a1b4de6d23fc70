//! Unpaired image-to-image translation: ResNet-style generators (7x7 input
//! conv, two strided downsampling blocks, residual trunk, two transposed-conv
//! upsampling blocks, 7x7 tanh output; instance norm + ReLU throughout) and
//! PatchGAN discriminators (five 4x4 convs, LeakyReLU, instance norm on the
//! configured layers), plus the adversarial / cycle / identity objectives.

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Domain;
use crate::error::{Error, Result};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::graph::{Arr, Graph, NodeId, PadMode};
use crate::nn::params::{normal, zeros, Bindings, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Sim2Or,
    Or2Sim,
}

impl Direction {
    pub fn source(self) -> Domain {
        match self {
            Direction::Sim2Or => Domain::Sim,
            Direction::Or2Sim => Domain::Or,
        }
    }

    pub fn target(self) -> Domain {
        match self {
            Direction::Sim2Or => Domain::Or,
            Direction::Or2Sim => Domain::Sim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialForm {
    /// Least-squares GAN on the raw patch map (the stable default).
    LeastSquares,
    /// Literal log form on sigmoid probabilities.
    CrossEntropy,
}

/// Weights balancing the translation objective.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanLossWeights {
    /// Cycle-consistency weight (lambda_1).
    pub lambda_cycle: f64,
    /// Identity-regularizer weight (lambda_2).
    pub lambda_identity: f64,
    pub adversarial_form: AdversarialForm,
}

impl Default for GanLossWeights {
    fn default() -> Self {
        GanLossWeights {
            lambda_cycle: 10.0,
            lambda_identity: 5.0,
            adversarial_form: AdversarialForm::LeastSquares,
        }
    }
}

impl GanLossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_cycle < 0.0 || self.lambda_identity < 0.0 {
            return Err(Error::Config("lambda weights must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Width of the residual trunk.
    pub residual_filters: usize,
    pub residual_blocks: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            residual_filters: 32,
            residual_blocks: 6,
        }
    }
}

impl GeneratorConfig {
    /// Input-conv width; two stride-2 blocks double it into the trunk.
    fn base(&self) -> usize {
        self.residual_filters / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.residual_filters < 4 || self.residual_filters % 4 != 0 {
            return Err(Error::Config(
                "residual_filters must be a positive multiple of 4".into(),
            ));
        }
        if self.residual_blocks == 0 {
            return Err(Error::Config("need at least one residual block".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    /// 1-based indices of conv layers followed by instance normalization.
    /// The reference PatchGAN normalizes layers 2-4; normalizing the output
    /// layer (5) makes the adversarial losses constant, so it is rejected.
    pub instance_norm_layers: Vec<usize>,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            base_channels: 64,
            instance_norm_layers: vec![2, 3, 4],
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("discriminator base_channels must be > 0".into()));
        }
        for &l in &self.instance_norm_layers {
            if !(1..=4).contains(&l) {
                return Err(Error::Config(format!(
                    "instance_norm_layers must be within 1..=4 (got {l}); \
                     normalizing the score layer zeroes the adversarial gradient"
                )));
            }
        }
        Ok(())
    }

    /// Channel plan of the five conv layers: D, 2D, 4D, 8D, 1.
    fn channels(&self) -> [usize; 5] {
        let d = self.base_channels;
        [d, 2 * d, 4 * d, 8 * d, 1]
    }

    const STRIDES: [usize; 5] = [2, 2, 2, 1, 1];
}

/// Patch-map spatial size for a given input, from the conv arithmetic
/// (k=4, p=1, strides 2,2,2,1,1).
pub fn discriminator_output_size(h: usize, w: usize) -> (usize, usize) {
    let step = |x: usize, s: usize| (x + 2 - 4) / s + 1;
    let mut hh = h;
    let mut ww = w;
    for s in DiscriminatorConfig::STRIDES {
        hh = step(hh, s);
        ww = step(ww, s);
    }
    (hh, ww)
}

#[derive(Debug, Clone)]
pub struct GeneratorModel {
    pub config: GeneratorConfig,
    pub params: ParamSet,
    pub direction: Direction,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorModel {
    pub config: DiscriminatorConfig,
    pub params: ParamSet,
    pub domain: Domain,
}

/// The four networks of one translation experiment.
#[derive(Debug, Clone)]
pub struct GanModels {
    pub g_sim2or: GeneratorModel,
    pub g_or2sim: GeneratorModel,
    pub d_sim: DiscriminatorModel,
    pub d_or: DiscriminatorModel,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub weights: GanLossWeights,
    pub replay_capacity: usize,
    pub replay_swap_p: f64,
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.weights.validate()?;
        if !(0.0..=1.0).contains(&self.replay_swap_p) {
            return Err(Error::Config("replay_swap_p must be in [0,1]".into()));
        }
        Ok(())
    }

    pub fn defaults_with_replay() -> Self {
        GanConfig {
            replay_capacity: 50,
            replay_swap_p: 0.5,
            ..Default::default()
        }
    }
}

fn init_conv(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, shape: &[usize], cout: usize) {
    ps.insert(format!("{name}.w"), normal(rng, shape, 0.02));
    ps.insert(format!("{name}.b"), zeros(&[cout]));
}

fn build_generator(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng, direction: Direction) -> GeneratorModel {
    let b = cfg.base();
    let mut ps = ParamSet::new();
    init_conv(&mut ps, rng, "in", &[b, 3, 7, 7], b);
    init_conv(&mut ps, rng, "down1", &[2 * b, b, 3, 3], 2 * b);
    init_conv(&mut ps, rng, "down2", &[4 * b, 2 * b, 3, 3], 4 * b);
    for i in 0..cfg.residual_blocks {
        let t = cfg.residual_filters;
        init_conv(&mut ps, rng, &format!("res{i}.0"), &[t, t, 3, 3], t);
        init_conv(&mut ps, rng, &format!("res{i}.1"), &[t, t, 3, 3], t);
    }
    // transposed convs store weights as [Cin, Cout, kh, kw]
    init_conv(&mut ps, rng, "up1", &[4 * b, 2 * b, 3, 3], 2 * b);
    init_conv(&mut ps, rng, "up2", &[2 * b, b, 3, 3], b);
    init_conv(&mut ps, rng, "out", &[3, b, 7, 7], 3);
    GeneratorModel {
        config: cfg.clone(),
        params: ps,
        direction,
    }
}

fn build_discriminator(cfg: &DiscriminatorConfig, rng: &mut ChaCha8Rng, domain: Domain) -> DiscriminatorModel {
    let ch = cfg.channels();
    let mut ps = ParamSet::new();
    let mut cin = 3;
    for (i, &cout) in ch.iter().enumerate() {
        init_conv(&mut ps, rng, &format!("l{}", i + 1), &[cout, cin, 4, 4], cout);
        cin = cout;
    }
    DiscriminatorModel {
        config: cfg.clone(),
        params: ps,
        domain,
    }
}

/// Build the four models. Equal seeds give identical initializations.
pub fn build_gan_models(cfg: &GanConfig, rng: &mut ChaCha8Rng) -> Result<GanModels> {
    cfg.validate()?;
    Ok(GanModels {
        g_sim2or: build_generator(&cfg.generator, rng, Direction::Sim2Or),
        g_or2sim: build_generator(&cfg.generator, rng, Direction::Or2Sim),
        d_sim: build_discriminator(&cfg.discriminator, rng, Domain::Sim),
        d_or: build_discriminator(&cfg.discriminator, rng, Domain::Or),
    })
}

#[allow(clippy::too_many_arguments)]
fn conv_in_relu(
    g: &mut Graph,
    bind: &mut Bindings,
    ps: &ParamSet,
    name: &str,
    x: NodeId,
    stride: usize,
    pad: usize,
    pad_mode: PadMode,
    trainable: bool,
) -> NodeId {
    let w = bind.bind(g, ps, &format!("{name}.w"), trainable);
    let b = bind.bind(g, ps, &format!("{name}.b"), trainable);
    let p = g.pad2d(x, pad, pad_mode);
    let c = g.conv2d(p, w, Some(b), stride);
    let n = g.instance_norm(c, 1e-5);
    g.relu(n)
}

fn generator_forward_bound(
    gm: &GeneratorModel,
    g: &mut Graph,
    x: NodeId,
    bind: &mut Bindings,
    trainable: bool,
) -> NodeId {
    let ps = &gm.params;
    let mut h = conv_in_relu(g, bind, ps, "in", x, 1, 3, PadMode::Reflect, trainable);
    h = conv_in_relu(g, bind, ps, "down1", h, 2, 1, PadMode::Zero, trainable);
    h = conv_in_relu(g, bind, ps, "down2", h, 2, 1, PadMode::Zero, trainable);
    for i in 0..gm.config.residual_blocks {
        let skip = h;
        let a = conv_in_relu(g, bind, ps, &format!("res{i}.0"), h, 1, 1, PadMode::Reflect, trainable);
        // second conv of the block: norm but no activation before the skip add
        let w = bind.bind(g, ps, &format!("res{i}.1.w"), trainable);
        let b = bind.bind(g, ps, &format!("res{i}.1.b"), trainable);
        let p = g.pad2d(a, 1, PadMode::Reflect);
        let c = g.conv2d(p, w, Some(b), 1);
        let n = g.instance_norm(c, 1e-5);
        h = g.add(skip, n);
    }
    for name in ["up1", "up2"] {
        let w = bind.bind(g, ps, &format!("{name}.w"), trainable);
        let b = bind.bind(g, ps, &format!("{name}.b"), trainable);
        let c = g.conv_transpose2d(h, w, Some(b), 2, 1, 1);
        let n = g.instance_norm(c, 1e-5);
        h = g.relu(n);
    }
    let w = bind.bind(g, ps, "out.w", trainable);
    let b = bind.bind(g, ps, "out.b", trainable);
    let p = g.pad2d(h, 3, PadMode::Reflect);
    let c = g.conv2d(p, w, Some(b), 1);
    g.tanh(c)
}

/// Generator forward on a `[N,3,H,W]` batch in [-1,1]; output same shape,
/// tanh-bounded. Bindings are empty when `trainable` is false.
pub fn generator_forward(
    gm: &GeneratorModel,
    g: &mut Graph,
    x: NodeId,
    trainable: bool,
) -> (NodeId, Bindings) {
    let mut bind = Bindings::new();
    let y = generator_forward_bound(gm, g, x, &mut bind, trainable);
    (y, bind)
}

/// Discriminator forward: raw patch score map (no pooling, no sigmoid).
pub fn discriminator_forward(
    dm: &DiscriminatorModel,
    g: &mut Graph,
    x: NodeId,
    trainable: bool,
) -> (NodeId, Bindings) {
    let mut bind = Bindings::new();
    let y = discriminator_forward_bound(dm, g, x, &mut bind, trainable);
    (y, bind)
}

/// Discriminator forward reusing an existing binding set, so one optimizer
/// step can cover the real and fake passes with a single leaf per weight.
pub fn discriminator_forward_bound(
    dm: &DiscriminatorModel,
    g: &mut Graph,
    x: NodeId,
    bind: &mut Bindings,
    trainable: bool,
) -> NodeId {
    let mut h = x;
    for i in 1..=5usize {
        let w = bind.bind(g, &dm.params, &format!("l{i}.w"), trainable);
        let b = bind.bind(g, &dm.params, &format!("l{i}.b"), trainable);
        let p = g.pad2d(h, 1, PadMode::Zero);
        h = g.conv2d(p, w, Some(b), DiscriminatorConfig::STRIDES[i - 1]);
        if dm.config.instance_norm_layers.contains(&i) {
            h = g.instance_norm(h, 1e-5);
        }
        if i < 5 {
            h = g.leaky_relu(h, 0.2);
        }
    }
    h
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Generator-side adversarial loss from the discriminator's map on fakes.
/// Least-squares pushes the map to 1; the literal log form minimizes
/// `E[log(1 - D(fake))]`.
pub fn adv_g_loss_graph(g: &mut Graph, d_fake: NodeId, form: AdversarialForm) -> NodeId {
    match form {
        AdversarialForm::LeastSquares => g.mse_const(d_fake, 1.0),
        AdversarialForm::CrossEntropy => {
            let p = g.sigmoid(d_fake);
            let neg = g.mul_const(p, -1.0);
            let om = g.add_const(neg, 1.0);
            let l = g.ln(om);
            g.mean_all(l)
        }
    }
}

/// Discriminator-side adversarial loss:
/// least-squares `mean((D(real)-1)^2) + mean(D(fake)^2)`, or the negated
/// log form `-(E[log D(real)] + E[log(1 - D(fake))])`.
pub fn adv_d_loss_graph(g: &mut Graph, d_real: NodeId, d_fake: NodeId, form: AdversarialForm) -> NodeId {
    match form {
        AdversarialForm::LeastSquares => {
            let lr = g.mse_const(d_real, 1.0);
            let lf = g.mse_const(d_fake, 0.0);
            g.add(lr, lf)
        }
        AdversarialForm::CrossEntropy => {
            let pr = g.sigmoid(d_real);
            let lr = g.ln(pr);
            let mr = g.mean_all(lr);
            let pf = g.sigmoid(d_fake);
            let negf = g.mul_const(pf, -1.0);
            let omf = g.add_const(negf, 1.0);
            let lf = g.ln(omf);
            let mf = g.mean_all(lf);
            let sum = g.add(mr, mf);
            g.mul_const(sum, -1.0)
        }
    }
}

/// Value-level adversarial losses from discriminator score maps. For the
/// cross-entropy form the maps are interpreted as probabilities in (0,1).
pub fn adversarial_loss_from_maps(
    d_real: &Arr,
    d_fake: &Arr,
    form: AdversarialForm,
) -> Result<(f64, f64)> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::Validation("adversarial loss on an empty batch".into()));
    }
    let (loss_d, loss_g) = match form {
        AdversarialForm::LeastSquares => {
            let ld = d_real.mapv(|v| (v - 1.0) * (v - 1.0)).mean().unwrap()
                + d_fake.mapv(|v| v * v).mean().unwrap();
            let lg = d_fake.mapv(|v| (v - 1.0) * (v - 1.0)).mean().unwrap();
            (ld, lg)
        }
        AdversarialForm::CrossEntropy => {
            let ld = -(d_real.mapv(|v| v.ln()).mean().unwrap()
                + d_fake.mapv(|v| (1.0 - v).ln()).mean().unwrap());
            let lg = d_fake.mapv(|v| (1.0 - v).ln()).mean().unwrap();
            (ld, lg)
        }
    };
    Ok((loss_d, loss_g))
}

/// Adversarial losses of one discriminator against real and fake batches in
/// [-1,1]. Returns (loss_D, loss_G).
pub fn adversarial_loss(
    d: &DiscriminatorModel,
    real: &Arr,
    fake: &Arr,
    form: AdversarialForm,
) -> Result<(f64, f64)> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::Validation("adversarial loss on an empty batch".into()));
    }
    let mut g = Graph::new();
    let r = g.constant(real.clone());
    let f = g.constant(fake.clone());
    let (dr, _) = discriminator_forward(d, &mut g, r, false);
    let (df, _) = discriminator_forward(d, &mut g, f, false);
    let (dr_v, df_v) = match form {
        AdversarialForm::LeastSquares => (g.val(dr).clone(), g.val(df).clone()),
        AdversarialForm::CrossEntropy => {
            let sr = g.sigmoid(dr);
            let sf = g.sigmoid(df);
            (g.val(sr).clone(), g.val(sf).clone())
        }
    };
    adversarial_loss_from_maps(&dr_v, &df_v, form)
}

/// Mean absolute difference between a batch and its reconstruction.
pub fn cycle_loss(x: &Arr, x_rec: &Arr) -> Result<f64> {
    if x.shape() != x_rec.shape() {
        return Err(Error::Shape(format!(
            "cycle loss shapes differ: {:?} vs {:?}",
            x.shape(),
            x_rec.shape()
        )));
    }
    let mut acc = 0.0;
    for (a, b) in x.iter().zip(x_rec.iter()) {
        acc += (a - b).abs();
    }
    Ok(acc / x.len() as f64)
}

/// Identity regularizer value: `mean|G_sim2or(x_or) - x_or| +
/// mean|G_or2sim(x_sim) - x_sim|`.
pub fn identity_loss(
    g_sim2or: &GeneratorModel,
    g_or2sim: &GeneratorModel,
    x_or: &Arr,
    x_sim: &Arr,
) -> Result<f64> {
    let mut g = Graph::new();
    let xo = g.constant(x_or.clone());
    let xs = g.constant(x_sim.clone());
    let (idt_or, _) = generator_forward(g_sim2or, &mut g, xo, false);
    let (idt_sim, _) = generator_forward(g_or2sim, &mut g, xs, false);
    Ok(cycle_loss(x_or, g.val(idt_or))? + cycle_loss(x_sim, g.val(idt_sim))?)
}

// ---------------------------------------------------------------------------
// generator-step graph (shared by baseline and detection-coupled training)
// ---------------------------------------------------------------------------

/// One generator-update graph: all translated/recovered images plus the
/// standard loss terms. Discriminators are bound frozen.
pub struct GeneratorStep {
    pub graph: Graph,
    pub x_sim: NodeId,
    pub x_or: NodeId,
    pub fake_or: NodeId,
    pub fake_sim: NodeId,
    pub rec_sim: NodeId,
    pub rec_or: NodeId,
    pub adv_g: NodeId,
    pub cycle: NodeId,
    pub identity: NodeId,
    /// adv + lambda1 * cycle + lambda2 * identity
    pub loss: NodeId,
    pub bind_sim2or: Bindings,
    pub bind_or2sim: Bindings,
}

/// Build the CycleGAN generator objective on a pair of unpaired batches
/// (both `[N,3,H,W]` in [-1,1]).
pub fn build_generator_step(
    models: &GanModels,
    batch_sim: &Arr,
    batch_or: &Arr,
    weights: &GanLossWeights,
) -> Result<GeneratorStep> {
    weights.validate()?;
    for b in [batch_sim, batch_or] {
        let s = b.shape();
        if s.len() != 4 || s[0] == 0 || s[1] != 3 {
            return Err(Error::Shape(format!(
                "batch must be Nx3xHxW with N>0, got {s:?}"
            )));
        }
    }
    let mut g = Graph::new();
    let x_sim = g.constant(batch_sim.clone());
    let x_or = g.constant(batch_or.clone());

    let mut bind12 = Bindings::new();
    let mut bind21 = Bindings::new();
    let fake_or = generator_forward_bound(&models.g_sim2or, &mut g, x_sim, &mut bind12, true);
    let fake_sim = generator_forward_bound(&models.g_or2sim, &mut g, x_or, &mut bind21, true);
    let rec_sim = generator_forward_bound(&models.g_or2sim, &mut g, fake_or, &mut bind21, true);
    let rec_or = generator_forward_bound(&models.g_sim2or, &mut g, fake_sim, &mut bind12, true);
    let idt_or = generator_forward_bound(&models.g_sim2or, &mut g, x_or, &mut bind12, true);
    let idt_sim = generator_forward_bound(&models.g_or2sim, &mut g, x_sim, &mut bind21, true);

    let (d_or_fake, _) = discriminator_forward(&models.d_or, &mut g, fake_or, false);
    let (d_sim_fake, _) = discriminator_forward(&models.d_sim, &mut g, fake_sim, false);
    let adv_or = adv_g_loss_graph(&mut g, d_or_fake, weights.adversarial_form);
    let adv_sim = adv_g_loss_graph(&mut g, d_sim_fake, weights.adversarial_form);
    let adv_g = g.add(adv_or, adv_sim);

    let cyc_sim = g.l1_mean(rec_sim, x_sim);
    let cyc_or = g.l1_mean(rec_or, x_or);
    let cycle = g.add(cyc_sim, cyc_or);

    let idt_a = g.l1_mean(idt_or, x_or);
    let idt_b = g.l1_mean(idt_sim, x_sim);
    let identity = g.add(idt_a, idt_b);

    let wc = g.mul_const(cycle, weights.lambda_cycle);
    let wi = g.mul_const(identity, weights.lambda_identity);
    let s1 = g.add(adv_g, wc);
    let loss = g.add(s1, wi);

    Ok(GeneratorStep {
        graph: g,
        x_sim,
        x_or,
        fake_or,
        fake_sim,
        rec_sim,
        rec_or,
        adv_g,
        cycle,
        identity,
        loss,
        bind_sim2or: bind12,
        bind_or2sim: bind21,
    })
}

/// Value bundle of the full baseline objective for a fixed batch pair.
#[derive(Debug, Clone)]
pub struct CycleGanBundle {
    pub generator_loss: f64,
    pub adv_g: f64,
    pub cycle: f64,
    pub identity: f64,
    pub loss_d_sim: f64,
    pub loss_d_or: f64,
    pub fake_or: Arr,
    pub fake_sim: Arr,
    pub rec_sim: Arr,
    pub rec_or: Arr,
}

/// Evaluate the CycleGAN objective (no parameter updates): generator loss,
/// per-discriminator losses on the fresh fakes, and all intermediates.
pub fn cyclegan_objective(
    models: &GanModels,
    batch_sim: &Arr,
    batch_or: &Arr,
    weights: &GanLossWeights,
) -> Result<CycleGanBundle> {
    let step = build_generator_step(models, batch_sim, batch_or, weights)?;
    let g = &step.graph;
    let fake_or = g.val(step.fake_or).clone();
    let fake_sim = g.val(step.fake_sim).clone();
    let (loss_d_or, _) =
        adversarial_loss(&models.d_or, batch_or, &fake_or, weights.adversarial_form)?;
    let (loss_d_sim, _) =
        adversarial_loss(&models.d_sim, batch_sim, &fake_sim, weights.adversarial_form)?;
    Ok(CycleGanBundle {
        generator_loss: g.scalar_val(step.loss),
        adv_g: g.scalar_val(step.adv_g),
        cycle: g.scalar_val(step.cycle),
        identity: g.scalar_val(step.identity),
        loss_d_sim,
        loss_d_or,
        fake_or,
        fake_sim,
        rec_sim: g.val(step.rec_sim).clone(),
        rec_or: g.val(step.rec_or).clone(),
    })
}

// ---------------------------------------------------------------------------
// replay buffer
// ---------------------------------------------------------------------------

/// Pool of previously generated fakes for discriminator updates: each new
/// image is stored until capacity, then swapped in with probability 0.5
/// (returning a historical fake instead).
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    pub capacity: usize,
    pub swap_p: f64,
    store: Vec<Arr>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, swap_p: f64) -> Self {
        ReplayBuffer {
            capacity,
            swap_p,
            store: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    /// Push a batch of fakes `[N,C,H,W]` and draw the batch the
    /// discriminator should see. Capacity 0 passes batches through.
    pub fn push_and_sample(&mut self, batch: &Arr, rng: &mut ChaCha8Rng) -> Arr {
        if self.capacity == 0 {
            return batch.clone();
        }
        let n = batch.shape()[0];
        let img_shape: Vec<usize> = batch.shape()[1..].to_vec();
        let mut out = batch.clone();
        let img_len: usize = img_shape.iter().product();
        let src = batch.as_slice().unwrap();
        let dst = out.as_slice_mut().unwrap();
        for i in 0..n {
            let img = &src[i * img_len..(i + 1) * img_len];
            if self.store.len() < self.capacity {
                self.store
                    .push(ArrayD::from_shape_vec(img_shape.clone(), img.to_vec()).unwrap());
            } else if rng.gen::<f64>() < self.swap_p {
                let j = rng.gen_range(0..self.store.len());
                let old = std::mem::replace(
                    &mut self.store[j],
                    ArrayD::from_shape_vec(img_shape.clone(), img.to_vec()).unwrap(),
                );
                dst[i * img_len..(i + 1) * img_len].copy_from_slice(old.as_slice().unwrap());
            }
        }
        out
    }

    pub fn to_tensors(&self) -> Vec<(String, Arr)> {
        self.store
            .iter()
            .enumerate()
            .map(|(i, a)| (format!("replay.{i:04}"), a.clone()))
            .collect()
    }

    pub fn restore(&mut self, tensors: Vec<Arr>) {
        self.store = tensors;
    }
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

impl GeneratorModel {
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let mut ckpt = Checkpoint {
            meta: serde_json::json!({
                "kind": "generator",
                "config": serde_json::to_value(&self.config).unwrap(),
                "direction": serde_json::to_value(self.direction).unwrap(),
                "extra": extra,
            }),
            tensors: Default::default(),
        };
        for (k, v) in &self.params.params {
            ckpt.tensors.insert(format!("p.{k}"), v.clone());
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta["kind"] != "generator" {
            return Err(Error::Validation("checkpoint is not a generator".into()));
        }
        let config: GeneratorConfig = serde_json::from_value(ckpt.meta["config"].clone())
            .map_err(|e| Error::Validation(format!("generator config: {e}")))?;
        let direction: Direction = serde_json::from_value(ckpt.meta["direction"].clone())
            .map_err(|e| Error::Validation(format!("generator direction: {e}")))?;
        let mut params = ParamSet::new();
        for (k, v) in &ckpt.tensors {
            if let Some(name) = k.strip_prefix("p.") {
                params.insert(name, v.clone());
            }
        }
        Ok(GeneratorModel {
            config,
            params,
            direction,
        })
    }
}

impl DiscriminatorModel {
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let mut ckpt = Checkpoint {
            meta: serde_json::json!({
                "kind": "discriminator",
                "config": serde_json::to_value(&self.config).unwrap(),
                "domain": serde_json::to_value(self.domain).unwrap(),
                "extra": extra,
            }),
            tensors: Default::default(),
        };
        for (k, v) in &self.params.params {
            ckpt.tensors.insert(format!("p.{k}"), v.clone());
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta["kind"] != "discriminator" {
            return Err(Error::Validation("checkpoint is not a discriminator".into()));
        }
        let config: DiscriminatorConfig = serde_json::from_value(ckpt.meta["config"].clone())
            .map_err(|e| Error::Validation(format!("discriminator config: {e}")))?;
        let domain: Domain = serde_json::from_value(ckpt.meta["domain"].clone())
            .map_err(|e| Error::Validation(format!("discriminator domain: {e}")))?;
        let mut params = ParamSet::new();
        for (k, v) in &ckpt.tensors {
            if let Some(name) = k.strip_prefix("p.") {
                params.insert(name, v.clone());
            }
        }
        Ok(DiscriminatorModel {
            config,
            params,
            domain,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand_chacha::rand_core::SeedableRng;

    fn rand_batch(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Arr {
        ArrayD::from_shape_simple_fn(IxDyn(&[n, 3, h, w]), || rng.gen::<f64>() * 2.0 - 1.0)
    }

    fn small_models(seed: u64) -> GanModels {
        let cfg = GanConfig {
            discriminator: DiscriminatorConfig {
                base_channels: 4,
                ..Default::default()
            },
            ..GanConfig::defaults_with_replay()
        };
        build_gan_models(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn generator_shape_and_range() {
        let models = small_models(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_batch(&mut rng, 1, 288, 512);
        let mut g = Graph::new();
        let xi = g.constant(x);
        let (y, _) = generator_forward(&models.g_sim2or, &mut g, xi, false);
        assert_eq!(g.val(y).shape(), &[1, 3, 288, 512]);
        assert!(g.val(y).iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn discriminator_patch_shape_golden() {
        // conv arithmetic: k=4 p=1 strides 2,2,2,1,1
        assert_eq!(discriminator_output_size(288, 512), (34, 62));
        assert_eq!(discriminator_output_size(64, 64), (6, 6));
        let models = small_models(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_batch(&mut rng, 2, 64, 64);
        let mut g = Graph::new();
        let xi = g.constant(x);
        let (y, _) = discriminator_forward(&models.d_or, &mut g, xi, false);
        assert_eq!(g.val(y).shape(), &[2, 1, 6, 6]);
    }

    #[test]
    fn equal_seeds_identical_models() {
        let a = small_models(7);
        let b = small_models(7);
        assert_eq!(a.g_sim2or.params.checksum(), b.g_sim2or.params.checksum());
        assert_eq!(a.d_sim.params.checksum(), b.d_sim.params.checksum());
        // generators share an architecture but not weights
        assert_ne!(a.g_sim2or.params.checksum(), a.g_or2sim.params.checksum());
    }

    #[test]
    fn rejects_instance_norm_on_score_layer() {
        let cfg = GanConfig {
            discriminator: DiscriminatorConfig {
                base_channels: 4,
                instance_norm_layers: vec![2, 3, 5],
            },
            ..Default::default()
        };
        assert!(matches!(
            build_gan_models(&cfg, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn adversarial_arithmetic() {
        let ones = ArrayD::from_elem(IxDyn(&[1, 1, 3, 3]), 1.0);
        let zeros = ArrayD::zeros(IxDyn(&[1, 1, 3, 3]));
        let half = ArrayD::from_elem(IxDyn(&[1, 1, 3, 3]), 0.5);
        // perfect discriminator: D(real)=1, D(fake)=0
        let (ld, _) =
            adversarial_loss_from_maps(&ones, &zeros, AdversarialForm::LeastSquares).unwrap();
        assert_eq!(ld, 0.0);
        // constant 0.5 map
        let (ld, lg) =
            adversarial_loss_from_maps(&half, &half, AdversarialForm::LeastSquares).unwrap();
        assert!((ld - 0.5).abs() < 1e-15);
        assert!((lg - 0.25).abs() < 1e-15);
        // literal log form at 0.5: loss_D = 2 ln 2
        let (ld, lg) =
            adversarial_loss_from_maps(&half, &half, AdversarialForm::CrossEntropy).unwrap();
        assert!((ld - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((lg + std::f64::consts::LN_2).abs() < 1e-12);
        // empty batch is rejected
        let empty = ArrayD::<f64>::zeros(IxDyn(&[0, 1, 3, 3]));
        assert!(adversarial_loss_from_maps(&empty, &half, AdversarialForm::LeastSquares).is_err());
    }

    #[test]
    fn cycle_loss_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_batch(&mut rng, 1, 8, 8).mapv(|v| v * 0.5);
        assert_eq!(cycle_loss(&x, &x).unwrap(), 0.0);
        let shifted = x.mapv(|v| v + 0.1);
        let l = cycle_loss(&x, &shifted).unwrap();
        assert!((l - 0.1).abs() < 1e-12);
        // symmetry
        assert_eq!(
            cycle_loss(&x, &shifted).unwrap(),
            cycle_loss(&shifted, &x).unwrap()
        );
        // shape mismatch
        let small = ArrayD::<f64>::zeros(IxDyn(&[1, 3, 4, 4]));
        assert!(cycle_loss(&x, &small).is_err());
    }

    #[test]
    fn identity_loss_scales_linearly() {
        // doubling a constant deviation doubles the loss
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_batch(&mut rng, 1, 8, 8).mapv(|v| v * 0.5);
        let d1 = x.mapv(|v| v + 0.05);
        let d2 = x.mapv(|v| v + 0.10);
        let l1 = cycle_loss(&x, &d1).unwrap();
        let l2 = cycle_loss(&x, &d2).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-12);
        // model-level: identity loss of real generators is nonnegative
        let models = small_models(8);
        let l = identity_loss(&models.g_sim2or, &models.g_or2sim, &x, &x).unwrap();
        assert!(l >= 0.0);
    }

    #[test]
    fn objective_reduces_and_recomposes() {
        let models = small_models(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let bs = rand_batch(&mut rng, 1, 32, 32);
        let bo = rand_batch(&mut rng, 1, 32, 32);
        let w0 = GanLossWeights {
            lambda_cycle: 0.0,
            lambda_identity: 0.0,
            ..Default::default()
        };
        let bundle = cyclegan_objective(&models, &bs, &bo, &w0).unwrap();
        assert!((bundle.generator_loss - bundle.adv_g).abs() < 1e-12);

        let w = GanLossWeights::default();
        let b1 = cyclegan_objective(&models, &bs, &bo, &w).unwrap();
        let b2 = cyclegan_objective(&models, &bs, &bo, &w).unwrap();
        assert_eq!(b1.generator_loss, b2.generator_loss, "deterministic");
        let recomposed = b1.adv_g + 10.0 * b1.cycle + 5.0 * b1.identity;
        assert!((b1.generator_loss - recomposed).abs() < 1e-12);
    }

    #[test]
    fn intermediates_match_independent_recomputation() {
        let models = small_models(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let bs = rand_batch(&mut rng, 1, 32, 32);
        let bo = rand_batch(&mut rng, 1, 32, 32);
        let bundle = cyclegan_objective(&models, &bs, &bo, &GanLossWeights::default()).unwrap();
        // x''_sim must equal G_or2sim(G_sim2or(x_sim)) recomputed from scratch
        let mut g = Graph::new();
        let xs = g.constant(bs.clone());
        let (f, _) = generator_forward(&models.g_sim2or, &mut g, xs, false);
        let (r, _) = generator_forward(&models.g_or2sim, &mut g, f, false);
        assert_eq!(g.val(f), &bundle.fake_or);
        assert_eq!(g.val(r), &bundle.rec_sim);
    }

    #[test]
    fn replay_buffer_caps_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut buf = ReplayBuffer::new(4, 0.5);
        for i in 0..6 {
            let batch = ArrayD::from_elem(IxDyn(&[2, 3, 4, 4]), i as f64);
            let out = buf.push_and_sample(&batch, &mut rng);
            assert_eq!(out.shape(), batch.shape());
        }
        assert!(buf.len() <= 4);

        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut buf = ReplayBuffer::new(3, 0.5);
            let mut outs = Vec::new();
            for i in 0..5 {
                let batch = ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), i as f64);
                outs.push(buf.push_and_sample(&batch, &mut rng));
            }
            outs
        };
        assert_eq!(run(7), run(7));
    }

    #[test]
    fn generator_checkpoint_round_trip() {
        let models = small_models(14);
        let ckpt = models.g_sim2or.to_checkpoint(serde_json::json!({}));
        let back = GeneratorModel::from_checkpoint(&ckpt).unwrap();
        assert_eq!(models.g_sim2or.params.checksum(), back.params.checksum());
        assert_eq!(back.direction, Direction::Sim2Or);
    }
}

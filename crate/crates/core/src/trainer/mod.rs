//! CycleGAN training with saliency-masked adversarial gradients and the
//! encoder context loss.

mod adam;
mod checkpoint;

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::{CorpusManifest, Domain, Tile};
use crate::error::{Error, Result};
use crate::netcore::{Direction, Discriminator, Generator, NetConfig};
use crate::objectives::{context_loss_graph, ContextPairing, LossComponents, LossWeights};
use crate::tensor::Tensor;

pub use adam::Adam;
pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Which generator gradients the saliency mask scales.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskScope {
    /// Only the adversarial path from the discriminator into the fake.
    #[default]
    Adversarial,
    /// Every use of the fake image: adversarial, cycle and context.
    All,
}

/// Random rectangular holes in the generator's mask channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardMaskPolicy {
    pub probability: f64,
    pub min_area: f64,
    pub max_area: f64,
}

impl Default for HardMaskPolicy {
    fn default() -> Self {
        HardMaskPolicy {
            probability: 0.3,
            min_area: 0.1,
            max_area: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Step after which the learning rate falls linearly towards zero at
    /// `total_steps`. `None` keeps it constant.
    #[serde(default)]
    pub lr_decay_start: Option<u64>,
    pub betas: (f64, f64),
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub xai_masking: bool,
    pub mask_epsilon: f64,
    pub mask_scope: MaskScope,
    pub hard_masks: HardMaskPolicy,
    pub checkpoint_interval: u64,
    pub context_pairing: ContextPairing,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            lr_decay_start: None,
            betas: (0.5, 0.999),
            batch_size: 4,
            total_steps: 1000,
            seed: 0,
            xai_masking: true,
            mask_epsilon: 0.05,
            mask_scope: MaskScope::Adversarial,
            hard_masks: HardMaskPolicy::default(),
            checkpoint_interval: 500,
            context_pairing: ContextPairing::Literal,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(msg));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate must be > 0, got {}", self.lr));
        }
        if let Some(start) = self.lr_decay_start {
            if start >= self.total_steps {
                return bad(format!("lr decay start {start} must come before the last step {}", self.total_steps));
            }
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas must lie in [0, 1), got {:?}", self.betas));
        }
        if self.batch_size == 0 || self.checkpoint_interval == 0 {
            return bad("batch size and checkpoint interval must be ≥ 1".into());
        }
        if !(0.0..=1.0).contains(&self.mask_epsilon) {
            return bad(format!("mask epsilon must lie in [0, 1], got {}", self.mask_epsilon));
        }
        let h = &self.hard_masks;
        if !(0.0..=1.0).contains(&h.probability) || !(0.0 < h.min_area && h.min_area <= h.max_area && h.max_area <= 1.0) {
            return bad(format!("invalid hard mask policy {h:?}"));
        }
        Ok(())
    }

    /// Learning rate used by the update at `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.lr_decay_start {
            Some(start) if step > start => {
                let left = self.total_steps.saturating_sub(step) + 1;
                self.lr * left as f64 / (self.total_steps + 1 - start) as f64
            }
            _ => self.lr,
        }
    }
}

/// `grad · (1 − (1 − s)(1 − ε))`: the identity where `s = 1`, an `ε` floor
/// where `s = 0`.
pub fn apply_saliency_mask(grad: &Tensor<f32>, saliency: &Tensor<f32>, epsilon: f64) -> Result<Tensor<f32>> {
    grad.zip_map(&saliency_scale(saliency, epsilon), |g, m| g * m)
}

fn saliency_scale(saliency: &Tensor<f32>, epsilon: f64) -> Tensor<f32> {
    let keep = 1.0 - epsilon as f32;
    saliency.map(|s| 1.0 - (1.0 - s) * keep)
}

#[derive(Clone, Debug)]
pub struct Models {
    pub he2p63: Generator<f32>,
    pub p632he: Generator<f32>,
    /// Judges H&E-domain images.
    pub disc_he: Discriminator<f32>,
    /// Judges P63-domain images.
    pub disc_p63: Discriminator<f32>,
}

impl Models {
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        let sub = |k: u64| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
        Ok(Models {
            he2p63: Generator::new(cfg, Direction::HeToP63, sub(1))?,
            p632he: Generator::new(cfg, Direction::P63ToHe, sub(2))?,
            disc_he: Discriminator::new(cfg, sub(3))?,
            disc_p63: Discriminator::new(cfg, sub(4))?,
        })
    }

    pub fn generator(&self, d: Direction) -> &Generator<f32> {
        match d {
            Direction::HeToP63 => &self.he2p63,
            Direction::P63ToHe => &self.p632he,
        }
    }

    fn param_sets(&self) -> [&[Tensor<f32>]; 4] {
        [
            self.he2p63.params().tensors(),
            self.p632he.params().tensors(),
            self.disc_he.params().tensors(),
            self.disc_p63.params().tensors(),
        ]
    }
}

/// Everything a run needs to continue: networks, optimizer moments,
/// configuration and the number of completed steps.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub step: u64,
    pub models: Models,
    /// Optimizers in the order `he2p63`, `p632he`, `disc_he`, `disc_p63`.
    pub optimizers: [Adam; 4],
}

impl TrainState {
    pub fn new(net: NetConfig, train: TrainConfig, weights: LossWeights) -> Result<Self> {
        net.validate()?;
        train.validate()?;
        weights.validate()?;
        let models = Models::new(&net, train.seed)?;
        let optimizers = models.param_sets().map(Adam::new);
        Ok(TrainState {
            net,
            train,
            weights,
            step: 0,
            models,
            optimizers,
        })
    }

    /// Bitwise equality of every parameter and optimizer moment.
    pub fn same_weights(&self, other: &TrainState) -> bool {
        let bits = |ts: &[Tensor<f32>]| ts.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        let sets_equal = self
            .models
            .param_sets()
            .iter()
            .zip(other.models.param_sets().iter())
            .all(|(a, b)| bits(a) == bits(b));
        let opt_equal = self.optimizers.iter().zip(&other.optimizers).all(|(a, b)| {
            a.t == b.t && bits(&a.m) == bits(&b.m) && bits(&a.v) == bits(&b.v)
        });
        sets_equal && opt_equal
    }
}

/// A batch of unpaired tiles, `N×3×S×S` each.
#[derive(Clone, Debug)]
pub struct Batch {
    pub he: Tensor<f32>,
    pub p63: Tensor<f32>,
}

/// Training tiles held in memory as planar tensors.
#[derive(Clone, Debug)]
pub struct TileCorpus {
    he: Vec<Tensor<f32>>,
    p63: Vec<Tensor<f32>>,
    size: usize,
}

impl TileCorpus {
    pub fn from_tiles(he: &[Tile], p63: &[Tile]) -> Result<Self> {
        if he.is_empty() || p63.is_empty() {
            return Err(Error::Corpus(format!(
                "training needs tiles of both domains (HE: {}, P63: {})",
                he.len(),
                p63.len()
            )));
        }
        let size = he[0].size();
        for (t, want) in he.iter().map(|t| (t, Domain::He)).chain(p63.iter().map(|t| (t, Domain::P63))) {
            t.validate()?;
            if t.domain != want || t.size() != size {
                return Err(Error::Corpus(format!(
                    "tile {} ({}, {} px) does not belong in the {} list of {size} px tiles",
                    t.slide_id,
                    t.domain.as_str(),
                    t.size(),
                    want.as_str()
                )));
            }
        }
        Ok(TileCorpus {
            he: he.iter().map(Tile::to_tensor).collect(),
            p63: p63.iter().map(Tile::to_tensor).collect(),
            size,
        })
    }

    pub fn from_manifest(m: &CorpusManifest) -> Result<Self> {
        Self::from_tiles(&m.load_domain(Domain::He)?, &m.load_domain(Domain::P63)?)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn len(&self, d: Domain) -> usize {
        match d {
            Domain::He => self.he.len(),
            Domain::P63 => self.p63.len(),
        }
    }

    /// The batch for a 1-based step. Each domain is walked through its own
    /// per-epoch shuffle, so the batch depends only on `(seed, step)`.
    pub fn batch(&self, seed: u64, step: u64, batch_size: usize) -> Result<Batch> {
        let pick = |tiles: &[Tensor<f32>], lane: u64| -> Result<Tensor<f32>> {
            let n = tiles.len() as u64;
            let mut perm_epoch = u64::MAX;
            let mut perm: Vec<usize> = Vec::new();
            let mut chosen = Vec::with_capacity(batch_size);
            for b in 0..batch_size as u64 {
                let i = (step - 1) * batch_size as u64 + b;
                let epoch = i / n;
                if epoch != perm_epoch {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream((1 << 62) | (lane << 40) | epoch);
                    perm = (0..tiles.len()).collect();
                    perm.shuffle(&mut rng);
                    perm_epoch = epoch;
                }
                chosen.push(&tiles[perm[(i % n) as usize]]);
            }
            let stacked = Tensor::stack(&chosen)?;
            Ok(stacked)
        };
        if step == 0 {
            return Err(Error::Validation("steps are numbered from 1".into()));
        }
        Ok(Batch {
            he: pick(&self.he, 0)?,
            p63: pick(&self.p63, 1)?,
        })
    }
}

/// All-ones masks with, per sample and with the policy's probability, one
/// zeroed rectangle covering a uniform share of the area.
pub fn sample_hard_masks(rng: &mut impl Rng, n: usize, px: usize, policy: &HardMaskPolicy) -> Tensor<f32> {
    let mut out = Tensor::ones(&[n, 1, px, px]);
    for s in 0..n {
        if !rng.random_bool(policy.probability) {
            continue;
        }
        let area = rng.random_range(policy.min_area..=policy.max_area) * (px * px) as f64;
        let aspect: f64 = rng.random_range(0.5..=2.0);
        let h = ((area * aspect).sqrt().round() as usize).clamp(1, px);
        let w = ((area / h as f64).round() as usize).clamp(1, px);
        let y0 = rng.random_range(0..=px - h);
        let x0 = rng.random_range(0..=px - w);
        let plane = &mut out.data_mut()[s * px * px..(s + 1) * px * px];
        for y in y0..y0 + h {
            plane[y * px + x0..y * px + x0 + w].fill(0.0);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradNorms {
    pub he2p63: f64,
    pub p632he: f64,
    pub disc_he: f64,
    pub disc_p63: f64,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub components: LossComponents,
    pub generator_total: f64,
    pub disc_he: f64,
    pub disc_p63: f64,
    pub grad_norms: GradNorms,
    /// Mean of the applied gradient mask (1 when masking is off).
    pub mask_mean: f64,
    pub wall_ms: f64,
}

impl MetricsRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_values(&self, other: &MetricsRecord) -> bool {
        MetricsRecord { wall_ms: 0.0, ..self.clone() } == MetricsRecord { wall_ms: 0.0, ..other.clone() }
    }
}

type Grads = Vec<Option<Tensor<f32>>>;

struct GeneratorPhase {
    grads_ab: Grads,
    grads_ba: Grads,
    fake_p63: Tensor<f32>,
    fake_he: Tensor<f32>,
    components: LossComponents,
    total: f64,
    mask_mean: f64,
    disc_grads_present: bool,
}

struct DiscriminatorPhase {
    grads_he: Grads,
    grads_p63: Grads,
    loss_he: f64,
    loss_p63: f64,
    gen_grads_present: bool,
}

fn sq_norm(grads: &Grads) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

fn take_grads(grads: &mut crate::autograd::Gradients<f32>, vars: &[Var]) -> Grads {
    vars.iter().map(|&v| grads.take(v)).collect()
}

fn generator_phase(
    st: &TrainState,
    batch: &Batch,
    mask_he: &Tensor<f32>,
    mask_p63: &Tensor<f32>,
    forced_saliency: Option<f32>,
) -> Result<GeneratorPhase> {
    let (m, cfg, w) = (&st.models, &st.train, &st.weights);
    let mut g = Graph::new();
    let pab = m.he2p63.bind(&mut g, true, None)?;
    let pba = m.p632he.bind(&mut g, true, None)?;
    let dhe = m.disc_he.bind(&mut g, false);
    let dp63 = m.disc_p63.bind(&mut g, false);
    let a = g.constant(batch.he.clone());
    let b = g.constant(batch.p63.clone());
    let ma = g.constant(mask_he.clone());
    let mb = g.constant(mask_p63.clone());
    let ones = g.constant(Tensor::ones(mask_he.shape()));

    let fwd_a = m.he2p63.generate_graph(&mut g, &pab, a, ma)?;
    let fwd_b = m.p632he.generate_graph(&mut g, &pba, b, mb)?;

    let scales = if cfg.xai_masking {
        let sal = |d: &Discriminator<f32>, fake: &Tensor<f32>| -> Result<Tensor<f32>> {
            let s = match forced_saliency {
                Some(v) => Tensor::full(fake.shape(), v),
                None => d.saliency_map(fake)?,
            };
            Ok(saliency_scale(&s, cfg.mask_epsilon))
        };
        Some((sal(&m.disc_p63, g.value(fwd_a.output))?, sal(&m.disc_he, g.value(fwd_b.output))?))
    } else {
        None
    };
    let mask_mean = match &scales {
        Some((sa, sb)) => 0.5 * (sa.mean() as f64 + sb.mean() as f64),
        None => 1.0,
    };
    let (mut fake_p63, mut fake_he) = (fwd_a.output, fwd_b.output);
    if let (Some((sa, sb)), MaskScope::All) = (&scales, cfg.mask_scope) {
        fake_p63 = g.grad_scale(fake_p63, sa.clone())?;
        fake_he = g.grad_scale(fake_he, sb.clone())?;
    }

    let cyc_a = m.p632he.generate_graph(&mut g, &pba, fake_p63, ma)?;
    let cyc_b = m.he2p63.generate_graph(&mut g, &pab, fake_he, mb)?;
    let cycle_a = g.mean_abs_diff(cyc_a.output, a)?;
    let cycle_b = g.mean_abs_diff(cyc_b.output, b)?;

    // The scale node sits directly in front of the discriminator so that a
    // unit mask leaves the gradient accumulation order untouched.
    let adv_input = |g: &mut Graph<f32>, fake: Var, scale: Option<&Tensor<f32>>| -> Result<Var> {
        match (scale, cfg.mask_scope) {
            (Some(s), MaskScope::Adversarial) => g.grad_scale(fake, s.clone()),
            _ => Ok(fake),
        }
    };
    let adv_a_in = adv_input(&mut g, fake_p63, scales.as_ref().map(|s| &s.0))?;
    let score_a = m.disc_p63.forward_graph(&mut g, &dp63, adv_a_in)?;
    let adv_a = g.mean_sq_to(score_a, 1.0);
    let adv_b_in = adv_input(&mut g, fake_he, scales.as_ref().map(|s| &s.1))?;
    let score_b = m.disc_he.forward_graph(&mut g, &dhe, adv_b_in)?;
    let adv_b = g.mean_sq_to(score_b, 1.0);

    let mut terms = vec![(adv_a, w.adversarial), (adv_b, w.adversarial), (cycle_a, w.cycle), (cycle_b, w.cycle)];
    let mut identity = 0.0;
    if w.identity > 0.0 {
        let id_b = m.he2p63.generate_graph(&mut g, &pab, b, ones)?;
        let id_a = m.p632he.generate_graph(&mut g, &pba, a, ones)?;
        let l_b = g.mean_abs_diff(id_b.output, b)?;
        let l_a = g.mean_abs_diff(id_a.output, a)?;
        identity = g.value(l_a).item() as f64 + g.value(l_b).item() as f64;
        terms.push((l_b, w.identity));
        terms.push((l_a, w.identity));
    }

    // Encodings share the mask of the chain they belong to.
    let xe_a = fwd_a.f_pre;
    let ye_b = fwd_b.f_pre;
    let ye_a = m.p632he.encode_graph(&mut g, &pba, a, ma)?;
    let xe_b = m.he2p63.encode_graph(&mut g, &pab, b, mb)?;
    let xe_fake_p63 = m.he2p63.encode_graph(&mut g, &pab, fake_p63, ma)?;
    let xe_fake_he = cyc_b.f_pre;
    let second = match cfg.context_pairing {
        ContextPairing::Literal => [(xe_fake_p63, ye_b), (xe_fake_he, ye_a)],
        ContextPairing::SelfPairing => {
            let ye_fake_he = m.p632he.encode_graph(&mut g, &pba, fake_he, mb)?;
            [(xe_fake_p63, cyc_a.f_pre), (xe_fake_he, ye_fake_he)]
        }
    };
    let context = context_loss_graph(&mut g, [(xe_a, ye_a), (xe_b, ye_b)], second, w.gamma)?;
    terms.push((context, w.context));

    let total = g.weighted_sum(&terms);
    let scalar = |g: &Graph<f32>, v: Var| g.value(v).item() as f64;
    let components = LossComponents {
        adversarial: scalar(&g, adv_a) + scalar(&g, adv_b),
        cycle: scalar(&g, cycle_a) + scalar(&g, cycle_b),
        identity,
        context: scalar(&g, context),
    };
    let mut grads = g.backward(total)?;
    let disc_grads_present = dhe.vars().iter().chain(dp63.vars()).any(|&v| grads.get(v).is_some());
    Ok(GeneratorPhase {
        grads_ab: take_grads(&mut grads, pab.vars()),
        grads_ba: take_grads(&mut grads, pba.vars()),
        fake_p63: g.value(fwd_a.output).clone(),
        fake_he: g.value(fwd_b.output).clone(),
        components,
        total: scalar(&g, total),
        mask_mean,
        disc_grads_present,
    })
}

fn discriminator_phase(st: &TrainState, batch: &Batch, fake_p63: &Tensor<f32>, fake_he: &Tensor<f32>) -> Result<DiscriminatorPhase> {
    let m = &st.models;
    let mut g = Graph::new();
    let pab = m.he2p63.bind(&mut g, false, None)?;
    let dhe = m.disc_he.bind(&mut g, true);
    let dp63 = m.disc_p63.bind(&mut g, true);
    let judge = |g: &mut Graph<f32>, d: &Discriminator<f32>, p: &crate::netcore::Bound, real: &Tensor<f32>, fake: &Tensor<f32>| -> Result<Var> {
        let r = g.constant(real.clone());
        let f = g.constant(fake.clone());
        let sr = d.forward_graph(g, p, r)?;
        let sf = d.forward_graph(g, p, f)?;
        let lr = g.mean_sq_to(sr, 1.0);
        let lf = g.mean_sq_to(sf, 0.0);
        Ok(g.weighted_sum(&[(lr, 0.5), (lf, 0.5)]))
    };
    let loss_p63 = judge(&mut g, &m.disc_p63, &dp63, &batch.p63, fake_p63)?;
    let loss_he = judge(&mut g, &m.disc_he, &dhe, &batch.he, fake_he)?;
    let total = g.weighted_sum(&[(loss_he, 1.0), (loss_p63, 1.0)]);
    let mut grads = g.backward(total)?;
    Ok(DiscriminatorPhase {
        gen_grads_present: pab.vars().iter().any(|&v| grads.get(v).is_some()),
        grads_he: take_grads(&mut grads, dhe.vars()),
        grads_p63: take_grads(&mut grads, dp63.vars()),
        loss_he: g.value(loss_he).item() as f64,
        loss_p63: g.value(loss_p63).item() as f64,
    })
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// One optimisation step on both generators and both discriminators.
pub fn train_step(st: &mut TrainState, batch: &Batch) -> Result<MetricsRecord> {
    step_impl(st, batch, None)
}

/// [`train_step`] with the discriminator saliency replaced by a constant
/// map; only meaningful when masking is enabled.
pub fn train_step_with_saliency(st: &mut TrainState, batch: &Batch, saliency: f32) -> Result<MetricsRecord> {
    step_impl(st, batch, Some(saliency))
}

fn step_impl(st: &mut TrainState, batch: &Batch, forced: Option<f32>) -> Result<MetricsRecord> {
    let started = Instant::now();
    let step = st.step + 1;
    let (n, _, h, _) = batch.he.dims4()?;
    batch.he.expect_same_shape(&batch.p63)?;
    if h != st.net.image_px {
        return Err(Error::Shape(format!("batch tiles are {h} px, the networks expect {}", st.net.image_px)));
    }
    let mut rng = step_rng(st.train.seed, step);
    let mask_he = sample_hard_masks(&mut rng, n, h, &st.train.hard_masks);
    let mask_p63 = sample_hard_masks(&mut rng, n, h, &st.train.hard_masks);

    let gp = generator_phase(st, batch, &mask_he, &mask_p63, forced)?;
    let dp = discriminator_phase(st, batch, &gp.fake_p63, &gp.fake_he)?;
    debug_assert!(!gp.disc_grads_present && !dp.gen_grads_present);

    let record = MetricsRecord {
        step,
        components: gp.components,
        generator_total: gp.total,
        disc_he: dp.loss_he,
        disc_p63: dp.loss_p63,
        grad_norms: GradNorms {
            he2p63: sq_norm(&gp.grads_ab),
            p632he: sq_norm(&gp.grads_ba),
            disc_he: sq_norm(&dp.grads_he),
            disc_p63: sq_norm(&dp.grads_p63),
        },
        mask_mean: gp.mask_mean,
        wall_ms: 0.0,
    };
    let c = &record.components;
    let g = &record.grad_norms;
    let watched = [
        c.adversarial, c.cycle, c.identity, c.context, record.generator_total, record.disc_he, record.disc_p63,
        g.he2p63, g.p632he, g.disc_he, g.disc_p63,
    ];
    if watched.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            step,
            detail: serde_json::to_string(&record).unwrap_or_default(),
        });
    }

    let (lr, betas) = (st.train.lr_at(step), st.train.betas);
    let [o_ab, o_ba, o_he, o_p63] = &mut st.optimizers;
    o_ab.step(st.models.he2p63.params_mut().tensors_mut(), &gp.grads_ab, lr, betas)?;
    o_ba.step(st.models.p632he.params_mut().tensors_mut(), &gp.grads_ba, lr, betas)?;
    o_he.step(st.models.disc_he.params_mut().tensors_mut(), &dp.grads_he, lr, betas)?;
    o_p63.step(st.models.disc_p63.params_mut().tensors_mut(), &dp.grads_p63, lr, betas)?;
    st.step = step;
    Ok(MetricsRecord {
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
        ..record
    })
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step-{step:06}.ckpt"))
}

fn last_logged_step(path: &Path) -> Result<Option<u64>> {
    let Ok(file) = File::open(path) else { return Ok(None) };
    let mut last = None;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Validation(format!("{}: unreadable metrics record: {e}", path.display())))?;
        last = Some(rec.step);
    }
    Ok(last)
}

/// Reads a metrics log back.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|l| {
            let l = l.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Runs `state` up to `train.total_steps`, appending to `metrics.jsonl` and
/// writing a checkpoint at every interval multiple and at the end.
pub fn fit(corpus: &TileCorpus, mut state: TrainState, out_dir: &Path) -> Result<TrainState> {
    if corpus.size() != state.net.image_px {
        return Err(Error::Corpus(format!(
            "corpus tiles are {} px, the networks expect {}",
            corpus.size(),
            state.net.image_px
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(METRICS_FILE);
    if let Some(last) = last_logged_step(&log_path)? {
        if last > state.step {
            return Err(Error::Validation(format!(
                "{} already records step {last}; resume from step {} into a fresh directory",
                log_path.display(),
                state.step
            )));
        }
    }
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let (total, interval, seed, bs) = (
        state.train.total_steps,
        state.train.checkpoint_interval,
        state.train.seed,
        state.train.batch_size,
    );
    while state.step < total {
        let batch = corpus.batch(seed, state.step + 1, bs)?;
        let rec = train_step(&mut state, &batch)?;
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        if rec.step % 50 == 0 || rec.step == 1 {
            log::info!(
                "step {} cycle {:.4} adv {:.4} ctx {:.4} D {:.4}/{:.4} ({:.0} ms)",
                rec.step,
                rec.components.cycle,
                rec.components.adversarial,
                rec.components.context,
                rec.disc_he,
                rec.disc_p63,
                rec.wall_ms
            );
        }
        if state.step.is_multiple_of(interval) || state.step == total {
            state.save(&checkpoint_path(out_dir, state.step))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    state.save(&out_dir.join(FINAL_CHECKPOINT))?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth_tiles;

    pub(crate) fn tiny_net(px: usize) -> NetConfig {
        NetConfig {
            base_channels: 4,
            n_res: 1,
            image_px: px,
            disc_base_channels: 4,
            disc_down: 2,
            ..NetConfig::default()
        }
    }

    pub(crate) fn tiny_state(seed: u64) -> TrainState {
        let train = TrainConfig {
            batch_size: 2,
            seed,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        TrainState::new(tiny_net(16), train, LossWeights::default()).unwrap()
    }

    fn tiny_corpus() -> TileCorpus {
        let (he, p63) = synth_tiles(6, 16, 5).unwrap();
        TileCorpus::from_tiles(&he, &p63).unwrap()
    }

    #[test]
    fn saliency_mask_examples() {
        let g = Tensor::from_vec(&[4], vec![1.0f32, -2.0, 0.5, 3.0]).unwrap();
        assert_eq!(apply_saliency_mask(&g, &Tensor::ones(&[4]), 0.05).unwrap().data(), g.data());
        let floor = apply_saliency_mask(&g, &Tensor::zeros(&[4]), 0.05).unwrap();
        for (a, b) in floor.data().iter().zip(g.data()) {
            assert!((a - 0.05 * b).abs() < 1e-7);
        }
        assert!(apply_saliency_mask(&g, &Tensor::ones(&[3]), 0.05).is_err());
    }

    #[test]
    fn linear_lr_decay() {
        let mut t = TrainConfig { lr: 1.0, total_steps: 10, ..TrainConfig::default() };
        assert_eq!(t.lr_at(10), 1.0);
        t.lr_decay_start = Some(5);
        let lrs: Vec<f64> = (1..=10).map(|s| t.lr_at(s)).collect();
        assert_eq!(&lrs[..5], &[1.0; 5]);
        for (i, want) in [5.0, 4.0, 3.0, 2.0, 1.0].iter().enumerate() {
            assert!((lrs[5 + i] - want / 6.0).abs() < 1e-15);
        }
        assert!(t.validate().is_ok());
        t.lr_decay_start = Some(10);
        assert!(t.validate().is_err());
    }

    #[test]
    fn hard_masks_follow_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let policy = HardMaskPolicy::default();
        let m = sample_hard_masks(&mut rng, 400, 32, &policy);
        let mut holed = 0;
        for s in 0..400 {
            let zeros = m.outer(s).iter().filter(|v| **v == 0.0).count() as f64 / 1024.0;
            if zeros > 0.0 {
                holed += 1;
                assert!((0.05..=0.6).contains(&zeros), "{zeros}");
            }
        }
        assert!((80..=160).contains(&holed), "{holed}");
        let never = HardMaskPolicy { probability: 0.0, ..policy };
        assert!(sample_hard_masks(&mut rng, 3, 8, &never).data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn batches_are_deterministic_epoch_shuffles() {
        let c = tiny_corpus();
        let b1 = c.batch(3, 1, 4).unwrap();
        assert_eq!(b1.he.shape(), &[4, 3, 16, 16]);
        assert_eq!(c.batch(3, 1, 4).unwrap().he.data(), b1.he.data());
        // steps 1..=3 with batch 2 cover each of the 6 tiles exactly once
        let per = 3 * 16 * 16;
        let mut seen: Vec<Vec<u32>> = (1..=3)
            .flat_map(|s| {
                let b = c.batch(3, s, 2).unwrap();
                (0..2).map(move |i| b.p63.outer(i)[..per].iter().map(|v| v.to_bits()).collect()).collect::<Vec<_>>()
            })
            .collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 6);
        assert!(c.batch(3, 0, 2).is_err());
    }

    #[test]
    fn corpus_needs_both_domains() {
        let (he, _) = synth_tiles(2, 16, 1).unwrap();
        assert!(matches!(TileCorpus::from_tiles(&he, &[]), Err(Error::Corpus(_))));
        assert!(matches!(TileCorpus::from_tiles(&he, &he), Err(Error::Corpus(_))));
    }

    #[test]
    fn gradient_provenance_is_separated() {
        let st = tiny_state(2);
        let batch = tiny_corpus().batch(1, 1, 2).unwrap();
        let ones = Tensor::ones(&[2, 1, 16, 16]);
        let gp = generator_phase(&st, &batch, &ones, &ones, None).unwrap();
        assert!(!gp.disc_grads_present);
        assert!(gp.grads_ab.iter().chain(&gp.grads_ba).all(Option::is_some));
        let dp = discriminator_phase(&st, &batch, &gp.fake_p63, &gp.fake_he).unwrap();
        assert!(!dp.gen_grads_present);
        assert!(dp.grads_he.iter().chain(&dp.grads_p63).all(Option::is_some));
    }

    #[test]
    fn unit_saliency_matches_masking_off() {
        let batch = tiny_corpus().batch(1, 1, 2).unwrap();
        let mut on = tiny_state(4);
        let mut off = tiny_state(4);
        off.train.xai_masking = false;
        for _ in 0..2 {
            let r_on = train_step_with_saliency(&mut on, &batch, 1.0).unwrap();
            let r_off = train_step(&mut off, &batch).unwrap();
            assert!(r_on.same_values(&r_off));
        }
        assert!(on.same_weights(&off));
        // a real saliency map changes the update
        let mut real = tiny_state(4);
        train_step(&mut real, &batch).unwrap();
        let mut fresh = tiny_state(4);
        fresh.train.xai_masking = false;
        train_step(&mut fresh, &batch).unwrap();
        assert!(!real.same_weights(&fresh));
    }

    #[test]
    fn steps_are_deterministic_and_finite() {
        let c = tiny_corpus();
        let run = || {
            let mut st = tiny_state(9);
            st.train.context_pairing = ContextPairing::SelfPairing;
            st.train.mask_scope = MaskScope::All;
            (1..=3).map(|s| train_step(&mut st, &c.batch(9, s, 2).unwrap()).unwrap()).collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.same_values(y)));
        assert_eq!(a.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(a[0].mask_mean > 0.05 && a[0].mask_mean < 1.0);
    }

    #[test]
    fn nan_input_is_a_divergence() {
        let mut st = tiny_state(1);
        let mut batch = tiny_corpus().batch(1, 1, 2).unwrap();
        batch.he.data_mut()[0] = f32::NAN;
        let before = st.clone();
        assert!(matches!(train_step(&mut st, &batch), Err(Error::Divergence { step: 1, .. })));
        assert!(st.same_weights(&before));
    }

    #[test]
    fn fit_schedule_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_corpus();
        let mut st = tiny_state(3);
        st.train.total_steps = 5;
        st.train.checkpoint_interval = 2;
        let done = fit(&c, st.clone(), dir.path()).unwrap();
        for s in [2, 4, 5] {
            assert!(checkpoint_path(dir.path(), s).exists(), "step {s}");
        }
        assert!(!checkpoint_path(dir.path(), 3).exists());
        let log = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(log.len(), 5);

        let resumed_dir = tempfile::tempdir().unwrap();
        let mid = TrainState::load(&checkpoint_path(dir.path(), 2)).unwrap();
        assert_eq!(mid.step, 2);
        let again = fit(&c, mid, resumed_dir.path()).unwrap();
        assert!(again.same_weights(&done));
        let tail = read_metrics(&resumed_dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(tail.len(), 3);
        assert!(tail.iter().zip(&log[2..]).all(|(a, b)| a.same_values(b)));
        // resuming into a directory whose log is ahead is refused
        let mid = TrainState::load(&checkpoint_path(dir.path(), 2)).unwrap();
        assert!(matches!(fit(&c, mid, dir.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn zero_steps_returns_initialisation() {
        let dir = tempfile::tempdir().unwrap();
        let mut st = tiny_state(6);
        st.train.total_steps = 0;
        let out = fit(&tiny_corpus(), st.clone(), dir.path()).unwrap();
        assert!(out.same_weights(&st));
        assert!(dir.path().join(FINAL_CHECKPOINT).exists());
    }
}

//! Generators with an editable bottleneck layer, and patch discriminators.
//!
//! A generator is `encoder → latent mix → decoder`:
//!
//! * encoder: reflect-padded 7×7 stem, `n_down` strided 3×3 stages, then
//!   `n_res` residual blocks. Its output is the feature map compared by the
//!   context loss.
//! * latent mix: a 1×1 channel-mixing layer `f ↦ W·f + bias` with a square
//!   `C×C` matrix `W`. This is the matrix the eigenvector editor perturbs.
//! * decoder: `n_res` residual blocks, `n_down` nearest-upsample + 3×3 conv
//!   stages and a 7×7 sigmoid head so outputs always lie in `[0, 1]`.
//!
//! The image is concatenated with a one-channel hard mask before the stem.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, PadMode, Real, Tensor};

const INIT_STD: f64 = 0.02;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "he2p63")]
    HeToP63,
    #[serde(rename = "p632he")]
    P63ToHe,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::HeToP63, Direction::P63ToHe];

    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::HeToP63 => "he2p63",
            Direction::P63ToHe => "p632he",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "he2p63" => Ok(Direction::HeToP63),
            "p632he" => Ok(Direction::P63ToHe),
            other => Err(Error::Validation(format!(
                "unknown direction `{other}` (expected he2p63 or p632he)"
            ))),
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub n_down: usize,
    pub n_res: usize,
    /// Bottleneck width `C`; `None` means `base_channels · 2^n_down`.
    pub latent_channels: Option<usize>,
    pub mask_channels: usize,
    pub image_px: usize,
    pub disc_base_channels: usize,
    /// Number of stride-2 stages in the patch discriminator.
    pub disc_down: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 3,
            base_channels: 32,
            n_down: 2,
            n_res: 4,
            latent_channels: None,
            mask_channels: 1,
            image_px: 256,
            disc_base_channels: 64,
            disc_down: 3,
        }
    }
}

impl NetConfig {
    pub fn latent(&self) -> usize {
        self.latent_channels
            .unwrap_or(self.base_channels << self.n_down)
    }

    pub fn feature_px(&self) -> usize {
        self.image_px >> self.n_down
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.in_channels,
            self.base_channels,
            self.n_down,
            self.n_res,
            self.latent(),
            self.mask_channels,
            self.image_px,
            self.disc_base_channels,
            self.disc_down,
        ];
        if counts.contains(&0) {
            return Err(Error::Validation(format!("network counts must be ≥ 1: {self:?}")));
        }
        if !self.image_px.is_multiple_of(1 << self.n_down) {
            return Err(Error::Validation(format!(
                "image_px {} is not divisible by 2^{}",
                self.image_px, self.n_down
            )));
        }
        if self.feature_px() < 2 {
            return Err(Error::Validation("bottleneck resolution must be at least 2×2".into()));
        }
        Ok(())
    }
}

/// Named parameter tensors of one network, in creation order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces all values, keeping names; shapes must match exactly.
    pub fn load(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                self.tensors.len(),
                values.len()
            )));
        }
        for (i, (cur, new)) in self.tensors.iter().zip(&values).enumerate() {
            if cur.shape() != new.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} has shape {:?}, got {:?}",
                    self.names[i],
                    cur.shape(),
                    new.shape()
                )));
            }
        }
        self.tensors = values;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).unwrap(),
        }
    }

    fn normal<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(self.normal.sample(&mut self.rng))).collect();
        Tensor::from_vec(shape, data).unwrap()
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    weight: usize,
    bias: Option<usize>,
    spec: ConvSpec,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    fn create<T: Real>(
        params: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        spec: ConvSpec,
        bias: bool,
    ) -> Self {
        let weight = params.push(format!("{name}.weight"), init.normal(&[cout, cin, spec.kernel, spec.kernel]));
        let bias = bias.then(|| params.push(format!("{name}.bias"), Tensor::zeros(&[cout])));
        ConvLayer { weight, bias, spec }
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.0[self.weight], self.bias.map(|b| p.0[b]), self.spec)
    }
}

#[derive(Clone, Copy, Debug)]
struct ResBlock {
    first: ConvLayer,
    second: ConvLayer,
}

impl ResBlock {
    fn create<T: Real>(params: &mut ParamSet<T>, init: &mut Init, name: &str, c: usize) -> Self {
        let spec = ConvSpec::new(3, 1, 1, PadMode::Reflect);
        ResBlock {
            first: ConvLayer::create(params, init, &format!("{name}.conv1"), c, c, spec, false),
            second: ConvLayer::create(params, init, &format!("{name}.conv2"), c, c, spec, false),
        }
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.first.apply(g, p, x)?;
        let h = g.instance_norm(h)?;
        let h = g.relu(h);
        let h = self.second.apply(g, p, h)?;
        let h = g.instance_norm(h)?;
        g.add(x, h)
    }
}

/// Parameter leaves of one network bound into a [`Graph`], indexed like the
/// network's [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

fn bind_params<T: Real>(g: &mut Graph<T>, params: &ParamSet<T>, trainable: bool) -> Bound {
    Bound(params.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect())
}

/// Encoder outputs and the generated image from one generator pass.
#[derive(Clone, Copy, Debug)]
pub struct GenVars {
    pub output: Var,
    pub f_pre: Var,
    pub f_post: Var,
}

#[derive(Clone, Debug)]
pub struct Generator<T> {
    cfg: NetConfig,
    direction: Direction,
    params: ParamSet<T>,
    stem: ConvLayer,
    downs: Vec<ConvLayer>,
    enc_res: Vec<ResBlock>,
    latent_weight: usize,
    latent_bias: usize,
    dec_res: Vec<ResBlock>,
    ups: Vec<ConvLayer>,
    head: ConvLayer,
}

/// Result of [`Generator::generate`].
#[derive(Clone, Debug)]
pub struct Generated<T> {
    pub output: Tensor<T>,
    pub f_pre: Tensor<T>,
    pub f_post: Tensor<T>,
}

impl<T: Real> Generator<T> {
    pub fn new(cfg: &NetConfig, direction: Direction, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let mut params = ParamSet::new();
        let c_in = cfg.in_channels + cfg.mask_channels;
        let b = cfg.base_channels;
        let c = cfg.latent();
        let stem = ConvLayer::create(&mut params, &mut init, "enc.stem", c_in, b, ConvSpec::new(7, 1, 3, PadMode::Reflect), false);
        let mut downs = Vec::new();
        let mut ch = b;
        for i in 0..cfg.n_down {
            let next = if i + 1 == cfg.n_down { c } else { ch * 2 };
            downs.push(ConvLayer::create(&mut params, &mut init, &format!("enc.down{i}"), ch, next, ConvSpec::new(3, 2, 1, PadMode::Zero), false));
            ch = next;
        }
        let enc_res = (0..cfg.n_res)
            .map(|i| ResBlock::create(&mut params, &mut init, &format!("enc.res{i}"), c))
            .collect();
        let mut w = Tensor::<T>::zeros(&[c, c, 1, 1]);
        let noise: Tensor<T> = init.normal(&[c, c, 1, 1]);
        for i in 0..c {
            for j in 0..c {
                let eye = if i == j { T::one() } else { T::zero() };
                w.data_mut()[i * c + j] = eye + noise.data()[i * c + j];
            }
        }
        let latent_weight = params.push("latent.weight".into(), w);
        let latent_bias = params.push("latent.bias".into(), Tensor::zeros(&[c]));
        let dec_res = (0..cfg.n_res)
            .map(|i| ResBlock::create(&mut params, &mut init, &format!("dec.res{i}"), c))
            .collect();
        let mut ups = Vec::new();
        let mut ch = c;
        for i in (0..cfg.n_down).rev() {
            let next = b << i;
            ups.push(ConvLayer::create(&mut params, &mut init, &format!("dec.up{i}"), ch, next, ConvSpec::new(3, 1, 1, PadMode::Reflect), false));
            ch = next;
        }
        let head = ConvLayer::create(&mut params, &mut init, "dec.head", b, cfg.in_channels, ConvSpec::new(7, 1, 3, PadMode::Reflect), true);
        Ok(Generator {
            cfg: cfg.clone(),
            direction,
            params,
            stem,
            downs,
            enc_res,
            latent_weight,
            latent_bias,
            dec_res,
            ups,
            head,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Index of the latent matrix inside [`Generator::params`].
    pub fn latent_weight_index(&self) -> usize {
        self.latent_weight
    }

    /// The latent matrix `W` as a `C×C×1×1` tensor.
    pub fn latent_weight(&self) -> &Tensor<T> {
        self.params.get(self.latent_weight)
    }

    pub fn latent_bias(&self) -> &Tensor<T> {
        self.params.get(self.latent_bias)
    }

    /// `W` as a dense row-major `C×C` matrix in double precision.
    pub fn latent_matrix(&self) -> Vec<f64> {
        self.latent_weight().data().iter().map(|v| v.as_f64()).collect()
    }

    /// Converts a `C×C` (or `C×C×1×1`) override into the layer's layout.
    fn override_tensor(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.cfg.latent();
        let ok = w.shape() == [c, c] || w.shape() == [c, c, 1, 1];
        if !ok {
            return Err(Error::Shape(format!(
                "latent override must be {c}×{c}, got {:?}",
                w.shape()
            )));
        }
        w.clone().reshape(&[c, c, 1, 1])
    }

    /// Binds all parameters as leaves. With `w_override`, the latent matrix
    /// leaf carries the override value and is never trainable.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool, w_override: Option<&Tensor<T>>) -> Result<Bound> {
        let mut bound = bind_params(g, &self.params, trainable);
        if let Some(w) = w_override {
            let w = self.override_tensor(w)?;
            bound.0[self.latent_weight] = g.constant(w);
        }
        Ok(bound)
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let px = self.cfg.image_px;
        match shape {
            [_, c, h, w] if *c == self.cfg.in_channels && *h == px && *w == px => Ok(()),
            _ => Err(Error::Shape(format!(
                "expected N×{}×{px}×{px} image, got {shape:?}",
                self.cfg.in_channels
            ))),
        }
    }

    fn check_features(&self, shape: &[usize]) -> Result<()> {
        let (c, px) = (self.cfg.latent(), self.cfg.feature_px());
        match shape {
            [_, ch, h, w] if *ch == c && *h == px && *w == px => Ok(()),
            _ => Err(Error::Shape(format!(
                "expected N×{c}×{px}×{px} features, got {shape:?}"
            ))),
        }
    }

    pub fn encode_graph(&self, g: &mut Graph<T>, p: &Bound, image: Var, mask: Var) -> Result<Var> {
        self.check_image(g.value(image).shape())?;
        let x = g.concat_channels(image, mask)?;
        let x = self.stem.apply(g, p, x)?;
        let x = g.instance_norm(x)?;
        let mut x = g.relu(x);
        for d in &self.downs {
            x = d.apply(g, p, x)?;
            x = g.instance_norm(x)?;
            x = g.relu(x);
        }
        for r in &self.enc_res {
            x = r.apply(g, p, x)?;
        }
        Ok(x)
    }

    pub fn latent_graph(&self, g: &mut Graph<T>, p: &Bound, f: Var) -> Result<Var> {
        self.check_features(g.value(f).shape())?;
        g.conv2d(
            f,
            p.0[self.latent_weight],
            Some(p.0[self.latent_bias]),
            ConvSpec::new(1, 1, 0, PadMode::Zero),
        )
    }

    pub fn decode_graph(&self, g: &mut Graph<T>, p: &Bound, f: Var) -> Result<Var> {
        self.check_features(g.value(f).shape())?;
        let mut x = f;
        for r in &self.dec_res {
            x = r.apply(g, p, x)?;
        }
        for u in &self.ups {
            x = g.upsample2x(x)?;
            x = u.apply(g, p, x)?;
            x = g.instance_norm(x)?;
            x = g.relu(x);
        }
        let x = self.head.apply(g, p, x)?;
        Ok(g.sigmoid(x))
    }

    pub fn generate_graph(&self, g: &mut Graph<T>, p: &Bound, image: Var, mask: Var) -> Result<GenVars> {
        let f_pre = self.encode_graph(g, p, image, mask)?;
        let f_post = self.latent_graph(g, p, f_pre)?;
        let output = self.decode_graph(g, p, f_post)?;
        Ok(GenVars { output, f_pre, f_post })
    }

    /// Expands a mask to `N×1×H×W`: `None` is all-ones, coarser masks are
    /// nearest-neighbour upsampled by an integer factor.
    pub fn broadcast_mask(&self, n: usize, mask: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let px = self.cfg.image_px;
        let Some(m) = mask else {
            return Ok(Tensor::ones(&[n, self.cfg.mask_channels, px, px]));
        };
        let (mn, mc, mh, mw) = m.dims4()?;
        if mn != n || mc != self.cfg.mask_channels || mh == 0 || mw == 0 || !px.is_multiple_of(mh) || !px.is_multiple_of(mw) {
            return Err(Error::Shape(format!(
                "mask {:?} is not broadcastable to {n}×{}×{px}×{px}",
                m.shape(),
                self.cfg.mask_channels
            )));
        }
        let (fy, fx) = (px / mh, px / mw);
        let mut out = Tensor::zeros(&[n, mc, px, px]);
        for p in 0..n * mc {
            for y in 0..px {
                for x in 0..px {
                    out.data_mut()[p * px * px + y * px + x] = m.data()[p * mh * mw + (y / fy) * mw + x / fx];
                }
            }
        }
        Ok(out)
    }

    /// Encoder output for an `N×3×H×W` image batch.
    pub fn encode(&self, image: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        self.check_image(image.shape())?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false, None)?;
        let m = g.constant(self.broadcast_mask(image.shape()[0], mask)?);
        let x = g.constant(image.clone());
        let f = self.encode_graph(&mut g, &p, x, m)?;
        Ok(g.value(f).clone())
    }

    /// Per-pixel channel mix `M·f + bias`, `M` being the override or `W`.
    pub fn bottleneck_apply(&self, f: &Tensor<T>, w_override: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        self.check_features(f.shape())?;
        let w = match w_override {
            Some(w) => self.override_tensor(w)?,
            None => self.latent_weight().clone(),
        };
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let wv = g.constant(w);
        let bv = g.constant(self.latent_bias().clone());
        let out = g.conv2d(fv, wv, Some(bv), ConvSpec::new(1, 1, 0, PadMode::Zero))?;
        Ok(g.value(out).clone())
    }

    pub fn decode(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_features(f.shape())?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false, None)?;
        let fv = g.constant(f.clone());
        let out = self.decode_graph(&mut g, &p, fv)?;
        Ok(g.value(out).clone())
    }

    pub fn generate(&self, image: &Tensor<T>, mask: Option<&Tensor<T>>, w_override: Option<&Tensor<T>>) -> Result<Generated<T>> {
        self.check_image(image.shape())?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false, w_override)?;
        let m = g.constant(self.broadcast_mask(image.shape()[0], mask)?);
        let x = g.constant(image.clone());
        let out = self.generate_graph(&mut g, &p, x, m)?;
        Ok(Generated {
            output: g.value(out.output).clone(),
            f_pre: g.value(out.f_pre).clone(),
            f_post: g.value(out.f_post).clone(),
        })
    }

    /// Same architecture and direction with parameters in another precision.
    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            cfg: self.cfg.clone(),
            direction: self.direction,
            params: self.params.cast(),
            stem: self.stem,
            downs: self.downs.clone(),
            enc_res: self.enc_res.clone(),
            latent_weight: self.latent_weight,
            latent_bias: self.latent_bias,
            dec_res: self.dec_res.clone(),
            ups: self.ups.clone(),
            head: self.head,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    cfg: NetConfig,
    params: ParamSet<T>,
    layers: Vec<(ConvLayer, bool)>,
    out: ConvLayer,
}

impl<T: Real> Discriminator<T> {
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let mut params = ParamSet::new();
        let d = cfg.disc_base_channels;
        let mut layers = Vec::new();
        let mut ch = cfg.in_channels;
        for i in 0..=cfg.disc_down {
            let next = d * (1 << i.min(3));
            let stride = if i < cfg.disc_down { 2 } else { 1 };
            let layer = ConvLayer::create(&mut params, &mut init, &format!("disc.conv{i}"), ch, next, ConvSpec::new(4, stride, 1, PadMode::Zero), i == 0);
            layers.push((layer, i > 0));
            ch = next;
        }
        let out = ConvLayer::create(&mut params, &mut init, "disc.out", ch, 1, ConvSpec::new(4, 1, 1, PadMode::Zero), true);
        let disc = Discriminator {
            cfg: cfg.clone(),
            params,
            layers,
            out,
        };
        disc.grid_size()?;
        Ok(disc)
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Side length of the score grid.
    pub fn grid_size(&self) -> Result<usize> {
        let mut s = self.cfg.image_px;
        for (l, _) in &self.layers {
            s = l.spec.output_size(s, s)?.0;
        }
        Ok(self.out.spec.output_size(s, s)?.0)
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        bind_params(g, &self.params, trainable)
    }

    pub fn forward_graph(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<Var> {
        let px = self.cfg.image_px;
        match g.value(image).shape() {
            [_, c, h, w] if *c == self.cfg.in_channels && *h == px && *w == px => {}
            s => {
                return Err(Error::Shape(format!(
                    "discriminator expects N×{}×{px}×{px}, got {s:?}",
                    self.cfg.in_channels
                )))
            }
        }
        let mut x = image;
        for (layer, norm) in &self.layers {
            x = layer.apply(g, p, x)?;
            if *norm {
                x = g.instance_norm(x)?;
            }
            x = g.leaky_relu(x, LEAKY_SLOPE);
        }
        self.out.apply(g, p, x)
    }

    /// Realism score grid `N×1×s×s`.
    pub fn discriminate(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let s = self.forward_graph(&mut g, &p, x)?;
        Ok(g.value(s).clone())
    }

    /// `|∂ mean(score) / ∂ image|`, normalised per sample by its maximum.
    pub fn saliency_map(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.input(image.clone());
        let s = self.forward_graph(&mut g, &p, x)?;
        let score = g.mean(s);
        let grads = g.backward(score)?;
        let mut sal = match grads.get(x) {
            Some(gr) => gr.map(|v| v.abs()),
            None => Tensor::zeros(image.shape()),
        };
        let n = image.shape()[0];
        let per = sal.numel() / n;
        for chunk in sal.data_mut().chunks_mut(per) {
            let max = chunk.iter().copied().fold(T::zero(), T::max);
            if max > T::zero() {
                for v in chunk.iter_mut() {
                    *v = *v / max;
                }
            }
        }
        Ok(sal)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetConfig {
        NetConfig {
            base_channels: 4,
            n_down: 2,
            n_res: 1,
            image_px: 16,
            disc_base_channels: 4,
            disc_down: 2,
            ..NetConfig::default()
        }
    }

    fn image(n: usize, px: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * px * px).map(|_| rand::Rng::random::<f32>(&mut rng)).collect();
        Tensor::from_vec(&[n, 3, px, px], data).unwrap()
    }

    #[test]
    fn default_shapes() {
        let cfg = NetConfig::default();
        assert_eq!(cfg.latent(), 128);
        assert_eq!(cfg.feature_px(), 64);
        let d = Discriminator::<f32>::new(&cfg, 1).unwrap();
        assert_eq!(d.grid_size().unwrap(), 30);
    }

    #[test]
    fn encode_decode_shapes_and_bounds() {
        let cfg = tiny();
        let g = Generator::<f32>::new(&cfg, Direction::HeToP63, 3).unwrap();
        let x = image(2, 16, 1);
        let f = g.encode(&x, None).unwrap();
        assert_eq!(f.shape(), &[2, 16, 4, 4]);
        let y = g.decode(&f.map(|v| v * 30.0)).unwrap();
        assert_eq!(y.shape(), &[2, 3, 16, 16]);
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(g.encode(&image(1, 8, 1), None).is_err());
    }

    #[test]
    fn mask_channel_reaches_encoder() {
        let cfg = tiny();
        let g = Generator::<f32>::new(&cfg, Direction::HeToP63, 3).unwrap();
        let x = image(1, 16, 2);
        let ones = g.encode(&x, None).unwrap();
        let zeros = g.encode(&x, Some(&Tensor::zeros(&[1, 1, 16, 16]))).unwrap();
        assert_ne!(ones, zeros);
        let coarse = g.encode(&x, Some(&Tensor::ones(&[1, 1, 4, 4]))).unwrap();
        assert_eq!(ones, coarse);
        assert!(g.encode(&x, Some(&Tensor::ones(&[1, 1, 5, 5]))).is_err());
    }

    #[test]
    fn identity_latent_is_passthrough() {
        let cfg = tiny();
        let g = Generator::<f64>::new(&cfg, Direction::HeToP63, 3).unwrap();
        let c = cfg.latent();
        let mut eye = Tensor::zeros(&[c, c]);
        for i in 0..c {
            eye.data_mut()[i * c + i] = 1.0;
        }
        let f = image(1, 16, 4).cast::<f64>().reshape(&[1, 3, 16, 16]).unwrap();
        let f = g.encode(&f, None).unwrap();
        assert_eq!(g.bottleneck_apply(&f, Some(&eye)).unwrap(), f);
        assert!(g.bottleneck_apply(&f, Some(&Tensor::zeros(&[c, c + 1]))).is_err());
    }

    #[test]
    fn override_equal_to_w_is_bitwise_identical() {
        let cfg = tiny();
        let g = Generator::<f32>::new(&cfg, Direction::P63ToHe, 9).unwrap();
        let x = image(1, 16, 5);
        let a = g.generate(&x, None, None).unwrap();
        let b = g.generate(&x, None, Some(&g.latent_weight().clone())).unwrap();
        assert_eq!(a.output, b.output);
        assert_eq!(a.f_post, b.f_post);
    }

    #[test]
    fn generate_is_composition_of_stages() {
        let cfg = tiny();
        let g = Generator::<f32>::new(&cfg, Direction::HeToP63, 4).unwrap();
        let x = image(2, 16, 6);
        let out = g.generate(&x, None, None).unwrap();
        let f = g.encode(&x, None).unwrap();
        let post = g.bottleneck_apply(&f, None).unwrap();
        assert_eq!(out.f_pre, f);
        assert_eq!(out.f_post, post);
        assert_eq!(out.output, g.decode(&post).unwrap());
    }

    #[test]
    fn random_generators_produce_finite_outputs() {
        let cfg = tiny();
        for seed in 0..10 {
            let g = Generator::<f32>::new(&cfg, Direction::HeToP63, seed).unwrap();
            let out = g.generate(&image(1, 16, seed + 100), None, None).unwrap();
            assert!(out.output.all_finite());
        }
    }

    #[test]
    fn discriminator_grid_is_fixed_and_input_sensitive() {
        let cfg = tiny();
        let d = Discriminator::<f32>::new(&cfg, 2).unwrap();
        let a = d.discriminate(&image(1, 16, 1)).unwrap();
        let b = d.discriminate(&image(1, 16, 2)).unwrap();
        let s = d.grid_size().unwrap();
        assert_eq!(a.shape(), &[1, 1, s, s]);
        assert_eq!(a.shape(), b.shape());
        assert_ne!(a, b);
        assert_eq!(a, d.discriminate(&image(1, 16, 1)).unwrap());
    }

    #[test]
    fn saliency_is_max_normalised_and_respects_dead_channels() {
        let cfg = tiny();
        let mut d = Discriminator::<f32>::new(&cfg, 2).unwrap();
        let x = image(2, 16, 3);
        let s = d.saliency_map(&x).unwrap();
        assert_eq!(s.shape(), x.shape());
        for i in 0..2 {
            let chunk = s.outer(i);
            assert!(chunk.iter().all(|&v| v >= 0.0));
            assert_eq!(chunk.iter().copied().fold(0.0f32, f32::max), 1.0);
        }
        // zero the first-layer weights reading the third channel
        let w = &mut d.params_mut().tensors_mut()[0];
        let (o, c, k, _) = w.dims4().unwrap();
        for oc in 0..o {
            for i in 0..k * k {
                w.data_mut()[(oc * c + 2) * k * k + i] = 0.0;
            }
        }
        let s = d.saliency_map(&x).unwrap();
        let px = 16 * 16;
        for n in 0..2 {
            let ch2 = &s.outer(n)[2 * px..3 * px];
            assert!(ch2.iter().all(|&v| v == 0.0));
        }
    }
}

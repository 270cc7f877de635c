//! Training objectives: least-squares adversarial terms, L1 cycle and
//! identity terms, and the encoder context loss with its Huber core.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::netcore::Generator;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub adversarial: f64,
    pub cycle: f64,
    pub identity: f64,
    pub context: f64,
    /// Huber transition point used by the context loss.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adversarial: 1.0,
            cycle: 10.0,
            identity: 5.0,
            context: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.adversarial, self.cycle, self.identity, self.context];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Validation(format!("loss weights must be finite and ≥ 0: {self:?}")));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::Validation(format!("gamma must be > 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// How the second half of the context loss pairs encodings of generated
/// images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextPairing {
    /// `H(X_e(A'), Y_e(B))` and `H(X_e(B'), Y_e(A))`.
    #[default]
    Literal,
    /// `H(X_e(A'), Y_e(A'))` and `H(X_e(B'), Y_e(B'))`.
    #[serde(rename = "self")]
    SelfPairing,
}

impl FromStr for ContextPairing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(ContextPairing::Literal),
            "self" => Ok(ContextPairing::SelfPairing),
            other => Err(Error::UnknownPairing(other.to_string())),
        }
    }
}

impl fmt::Display for ContextPairing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextPairing::Literal => "literal",
            ContextPairing::SelfPairing => "self",
        })
    }
}

/// Mean Huber penalty: `0.5·d²` for `|d| ≤ γ`, `γ·(|d| − 0.5·γ)` beyond.
pub fn huber<T: Real>(a: &Tensor<T>, b: &Tensor<T>, gamma: f64) -> Result<T> {
    a.expect_same_shape(b)?;
    let g = T::lit(gamma);
    let half = T::lit(0.5);
    let total: T = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x - y).abs();
            if d <= g {
                half * d * d
            } else {
                g * (d - half * g)
            }
        })
        .sum();
    Ok(total / T::from_usize(a.numel()).unwrap())
}

/// Least-squares GAN objectives `(L_D, L_G)` from discriminator score grids.
pub fn adversarial_losses<T: Real>(real: &Tensor<T>, fake: &Tensor<T>) -> (T, T) {
    let half = T::lit(0.5);
    let one = T::one();
    let real_term = real.map(|r| (r - one) * (r - one)).mean();
    let fake_term = fake.map(|f| f * f).mean();
    let gen = fake.map(|f| (f - one) * (f - one)).mean();
    (half * real_term + half * fake_term, gen)
}

/// Mean absolute error between an image and its reconstruction.
pub fn cycle_loss<T: Real>(original: &Tensor<T>, reconstructed: &Tensor<T>) -> Result<T> {
    Ok(original.zip_map(reconstructed, |a, b| (a - b).abs())?.mean())
}

/// Builds the context loss on the tape from encoder-output pairs.
///
/// `first` holds the same-image pairs `(X_e(A), Y_e(A))`, `(X_e(B), Y_e(B))`;
/// `second` the generated-image pairs selected by the pairing mode.
pub fn context_loss_graph<T: Real>(
    g: &mut Graph<T>,
    first: [(Var, Var); 2],
    second: [(Var, Var); 2],
    gamma: f64,
) -> Result<Var> {
    let f0 = g.huber(first[0].0, first[0].1, gamma)?;
    let f1 = g.huber(first[1].0, first[1].1, gamma)?;
    let s0 = g.huber(second[0].0, second[0].1, gamma)?;
    let s1 = g.huber(second[1].0, second[1].1, gamma)?;
    Ok(g.weighted_sum(&[(f0, 0.5), (f1, 0.5), (s0, 0.5), (s1, 0.5)]))
}

/// Inputs for a standalone context loss evaluation. `a`/`b` are real tiles
/// of the H&E and P63 domains, `a_fake`/`b_fake` their translations.
pub struct ContextInputs<'a, T> {
    pub a: &'a Tensor<T>,
    pub b: &'a Tensor<T>,
    pub a_fake: &'a Tensor<T>,
    pub b_fake: &'a Tensor<T>,
}

/// Value of the context loss plus its gradient with respect to every
/// parameter of both encoders (in [`crate::netcore::ParamSet`] order).
pub struct ContextLossEval<T> {
    pub value: T,
    /// Same-image half of `value`.
    pub first: T,
    /// Generated-image half of `value`.
    pub second: T,
    pub grad_x: Vec<Option<Tensor<T>>>,
    pub grad_y: Vec<Option<Tensor<T>>>,
}

/// Context loss between the encoders of the H&E→P63 generator (`x_gen`) and
/// the P63→H&E generator (`y_gen`), evaluated with all-ones masks.
pub fn context_loss<T: Real>(
    x_gen: &Generator<T>,
    y_gen: &Generator<T>,
    inputs: &ContextInputs<'_, T>,
    gamma: f64,
    pairing: ContextPairing,
) -> Result<ContextLossEval<T>> {
    eval_context(x_gen, y_gen, inputs, gamma, pairing, false)
}

pub fn context_loss_with_grads<T: Real>(
    x_gen: &Generator<T>,
    y_gen: &Generator<T>,
    inputs: &ContextInputs<'_, T>,
    gamma: f64,
    pairing: ContextPairing,
) -> Result<ContextLossEval<T>> {
    eval_context(x_gen, y_gen, inputs, gamma, pairing, true)
}

fn eval_context<T: Real>(
    x_gen: &Generator<T>,
    y_gen: &Generator<T>,
    inputs: &ContextInputs<'_, T>,
    gamma: f64,
    pairing: ContextPairing,
    with_grads: bool,
) -> Result<ContextLossEval<T>> {
    let mut g = Graph::new();
    let xp = x_gen.bind(&mut g, with_grads, None)?;
    let yp = y_gen.bind(&mut g, with_grads, None)?;
    let enc = |g: &mut Graph<T>, gen: &Generator<T>, bound: &crate::netcore::Bound, img: &Tensor<T>| -> Result<Var> {
        let (n, _, h, w) = img.dims4()?;
        let image = g.constant(img.clone());
        let mask = g.constant(Tensor::ones(&[n, 1, h, w]));
        gen.encode_graph(g, bound, image, mask)
    };
    let xa = enc(&mut g, x_gen, &xp, inputs.a)?;
    let ya = enc(&mut g, y_gen, &yp, inputs.a)?;
    let xb = enc(&mut g, x_gen, &xp, inputs.b)?;
    let yb = enc(&mut g, y_gen, &yp, inputs.b)?;
    let x_af = enc(&mut g, x_gen, &xp, inputs.a_fake)?;
    let x_bf = enc(&mut g, x_gen, &xp, inputs.b_fake)?;
    let second = match pairing {
        ContextPairing::Literal => [(x_af, yb), (x_bf, ya)],
        ContextPairing::SelfPairing => {
            let y_af = enc(&mut g, y_gen, &yp, inputs.a_fake)?;
            let y_bf = enc(&mut g, y_gen, &yp, inputs.b_fake)?;
            [(x_af, y_af), (x_bf, y_bf)]
        }
    };
    let loss = context_loss_graph(&mut g, [(xa, ya), (xb, yb)], second, gamma)?;
    let value = g.value(loss).item();
    let half = T::lit(0.5);
    let term = |pairs: [(Var, Var); 2]| -> Result<T> {
        let h0 = huber(g.value(pairs[0].0), g.value(pairs[0].1), gamma)?;
        let h1 = huber(g.value(pairs[1].0), g.value(pairs[1].1), gamma)?;
        Ok(half * h0 + half * h1)
    };
    let first = term([(xa, ya), (xb, yb)])?;
    let second = term(second)?;
    if !with_grads {
        return Ok(ContextLossEval {
            value,
            first,
            second,
            grad_x: Vec::new(),
            grad_y: Vec::new(),
        });
    }
    let mut grads = g.backward(loss)?;
    Ok(ContextLossEval {
        value,
        first,
        second,
        grad_x: xp.vars().iter().map(|&v| grads.take(v)).collect(),
        grad_y: yp.vars().iter().map(|&v| grads.take(v)).collect(),
    })
}

/// Scalar loss components, each already summed over both directions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub adversarial: f64,
    pub cycle: f64,
    pub identity: f64,
    pub context: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub components: LossComponents,
    pub total: f64,
}

pub fn total_generator_objective(c: &LossComponents, w: &LossWeights) -> Result<LossReport> {
    let parts = [c.adversarial, c.cycle, c.identity, c.context];
    if parts.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            step: 0,
            detail: format!("non-finite loss component: {c:?}"),
        });
    }
    let total = w.adversarial * c.adversarial + w.cycle * c.cycle + w.identity * c.identity + w.context * c.context;
    Ok(LossReport { components: *c, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn huber_branches() {
        assert_eq!(huber(&t(&[0.3, -2.0]), &t(&[0.3, -2.0]), 1.0).unwrap(), 0.0);
        assert_eq!(huber(&t(&[1.0]), &t(&[0.0]), 1.0).unwrap(), 0.5);
        assert_eq!(huber(&t(&[3.0]), &t(&[0.0]), 1.0).unwrap(), 2.5);
        assert!(huber(&t(&[1.0]), &t(&[1.0, 2.0]), 1.0).is_err());
    }

    #[test]
    fn huber_is_c1_at_the_transition() {
        let g = 0.7;
        let f = |d: f64| huber(&t(&[d]), &t(&[0.0]), g).unwrap();
        let h = 1e-7;
        assert!((f(g + h) - f(g - h)).abs() < 1e-6);
        let left = (f(g) - f(g - h)) / h;
        let right = (f(g + h) - f(g)) / h;
        assert!((left - right).abs() < 1e-5, "{left} vs {right}");
    }

    #[test]
    fn adversarial_loss_fixed_points() {
        let ones = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let zeros = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        assert_eq!(adversarial_losses(&ones, &zeros), (0.0, 1.0));
        assert_eq!(adversarial_losses(&zeros, &ones), (1.0, 0.0));
    }

    #[test]
    fn adversarial_loss_matches_scalar_recomputation() {
        let real: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let fake: Vec<f64> = (0..16).map(|i| (i as f64 * 0.91).cos()).collect();
        let (ld, lg) = adversarial_losses(&t(&real), &t(&fake));
        let mut r = 0.0;
        let mut f = 0.0;
        let mut gsum = 0.0;
        for i in 0..16 {
            r += (real[i] - 1.0).powi(2);
            f += fake[i].powi(2);
            gsum += (fake[i] - 1.0).powi(2);
        }
        assert!((ld - (0.5 * r / 16.0 + 0.5 * f / 16.0)).abs() < 1e-7);
        assert!((lg - gsum / 16.0).abs() < 1e-7);
    }

    #[test]
    fn cycle_loss_cases() {
        let a = Tensor::<f64>::full(&[1, 3, 4, 4], 0.2);
        assert_eq!(cycle_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|x| x + 0.5);
        assert!((cycle_loss(&a, &b).unwrap() - 0.5).abs() < 1e-12);
        let x = t(&[0.1, 0.9, 0.4, 0.0]);
        let y = t(&[0.3, 0.2, 0.4, 1.0]);
        let oracle = (0.2 + 0.7 + 0.0 + 1.0) / 4.0;
        assert!((cycle_loss(&x, &y).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn total_objective_arithmetic() {
        let w = LossWeights {
            adversarial: 1.0,
            cycle: 10.0,
            identity: 5.0,
            context: 1.0,
            gamma: 1.0,
        };
        let c = LossComponents {
            adversarial: 0.2,
            cycle: 0.1,
            identity: 0.05,
            context: 0.3,
        };
        let r = total_generator_objective(&c, &w).unwrap();
        assert!((r.total - 1.75).abs() < 1e-12);
        assert_eq!(
            total_generator_objective(&LossComponents::default(), &w).unwrap().total,
            0.0
        );
        let nan = LossComponents {
            context: f64::NAN,
            ..c
        };
        assert!(matches!(
            total_generator_objective(&nan, &w),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn context_weight_zero_ignores_context_value() {
        let w = LossWeights {
            context: 0.0,
            ..LossWeights::default()
        };
        let base = LossComponents {
            adversarial: 0.4,
            cycle: 0.2,
            identity: 0.1,
            context: 0.0,
        };
        let a = total_generator_objective(&base, &w).unwrap().total;
        let b = total_generator_objective(&LossComponents { context: 123.0, ..base }, &w)
            .unwrap()
            .total;
        assert_eq!(a, b);
    }

    fn tiny_pair(seed: u64) -> (Generator<f64>, Generator<f64>) {
        let cfg = crate::netcore::NetConfig {
            base_channels: 1,
            n_res: 1,
            image_px: 8,
            disc_base_channels: 2,
            disc_down: 1,
            ..Default::default()
        };
        let x = Generator::<f32>::new(&cfg, crate::netcore::Direction::HeToP63, seed).unwrap();
        let y = Generator::<f32>::new(&cfg, crate::netcore::Direction::P63ToHe, seed + 1).unwrap();
        (x.cast(), y.cast())
    }

    fn images(seed: u64) -> [Tensor<f64>; 4] {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        std::array::from_fn(|_| {
            Tensor::from_vec(&[2, 3, 8, 8], (0..2 * 3 * 64).map(|_| rng.random::<f64>()).collect()).unwrap()
        })
    }

    #[test]
    fn tied_encoders_zero_the_same_image_term() {
        let (x, mut y) = tiny_pair(3);
        y.params_mut().load(x.params().tensors().to_vec()).unwrap();
        let [a, b, af, bf] = images(4);
        let inputs = ContextInputs { a: &a, b: &b, a_fake: &af, b_fake: &bf };
        let lit = context_loss(&x, &y, &inputs, 1.0, ContextPairing::Literal).unwrap();
        assert_eq!(lit.first, 0.0);
        assert!(lit.second > 0.0);
        let own = context_loss(&x, &y, &inputs, 1.0, ContextPairing::SelfPairing).unwrap();
        assert_eq!(own.value, 0.0);
    }

    #[test]
    fn context_value_is_the_sum_of_its_halves() {
        let (x, y) = tiny_pair(8);
        let [a, b, af, bf] = images(9);
        let inputs = ContextInputs { a: &a, b: &b, a_fake: &af, b_fake: &bf };
        for pairing in [ContextPairing::Literal, ContextPairing::SelfPairing] {
            let e = context_loss_with_grads(&x, &y, &inputs, 0.05, pairing).unwrap();
            assert!((e.value - e.first - e.second).abs() < 1e-12);
            assert_eq!(e.grad_x.len(), x.params().len());
            assert!(e.grad_y.iter().any(|g| g.is_some()));
        }
    }

    #[test]
    fn pairing_parses() {
        assert_eq!("literal".parse::<ContextPairing>().unwrap(), ContextPairing::Literal);
        assert_eq!("self".parse::<ContextPairing>().unwrap(), ContextPairing::SelfPairing);
        assert!(matches!(
            "cross".parse::<ContextPairing>(),
            Err(Error::UnknownPairing(_))
        ));
    }

    proptest! {
        #[test]
        fn huber_symmetric_nonnegative(
            a in proptest::collection::vec(-5.0f64..5.0, 1..20),
            shift in proptest::collection::vec(-5.0f64..5.0, 20),
            gamma in 0.05f64..3.0,
        ) {
            let b: Vec<f64> = a.iter().zip(&shift).map(|(x, s)| x + s).collect();
            let (ta, tb) = (t(&a), t(&b));
            let ab = huber(&ta, &tb, gamma).unwrap();
            let ba = huber(&tb, &ta, gamma).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(huber(&ta, &ta, gamma).unwrap(), 0.0);
            if a.iter().zip(&b).any(|(x, y)| x != y) {
                prop_assert!(ab > 0.0);
            }
        }

        #[test]
        fn total_is_linear_in_each_weight(k in 0.0f64..20.0, comp in 0.0f64..3.0) {
            let c = LossComponents { adversarial: comp, cycle: 0.3, identity: 0.2, context: 0.7 };
            let w0 = LossWeights { adversarial: 0.0, ..LossWeights::default() };
            let w1 = LossWeights { adversarial: 1.0, ..w0 };
            let wk = LossWeights { adversarial: k, ..w0 };
            let t0 = total_generator_objective(&c, &w0).unwrap().total;
            let t1 = total_generator_objective(&c, &w1).unwrap().total;
            let tk = total_generator_objective(&c, &wk).unwrap().total;
            prop_assert!((tk - (t0 + k * (t1 - t0))).abs() < 1e-9);
        }
    }
}

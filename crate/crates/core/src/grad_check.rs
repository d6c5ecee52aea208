//! Finite-difference verification of [`Model::backward`].
//!
//! The reference loss is evaluated by a separate forward pass written against
//! [`DoubleDouble`] (about 32 significant digits). With plain `f64` the
//! rounding noise of the loss, divided by `2ε`, is of the same order as the
//! smallest gradient entries at `ε = 1e-5`, which swamps a 1e-4 relative
//! tolerance; in double-double the difference quotient is limited only by
//! truncation error.

use std::cmp::Ordering;
use std::ops::{Add, Div, Mul, Neg, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{END, PAD, START};
use crate::error::{Error, Result};
use crate::seq_model::{Example, Gradients, Model, ModelDims};
use crate::tensor::uniform_vec;

/// Unevaluated sum `hi + lo` with `|lo| ≤ ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DoubleDouble {
    pub hi: f64,
    pub lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

const LN_2: DoubleDouble = DoubleDouble {
    hi: std::f64::consts::LN_2,
    lo: 2.3190468138462996e-17,
};

/// `1/n!` for `n = 2..=10`.
const INV_FACT: [DoubleDouble; 9] = [
    DoubleDouble { hi: 0.5, lo: 0.0 },
    DoubleDouble { hi: 0.16666666666666666, lo: 9.25185853854297e-18 },
    DoubleDouble { hi: 0.041666666666666664, lo: 2.3129646346357427e-18 },
    DoubleDouble { hi: 0.008333333333333333, lo: 1.1564823173178714e-19 },
    DoubleDouble { hi: 0.001388888888888889, lo: -5.300543954373577e-20 },
    DoubleDouble { hi: 0.0001984126984126984, lo: 1.7209558293420705e-22 },
    DoubleDouble { hi: 2.48015873015873e-05, lo: 2.1511947866775882e-23 },
    DoubleDouble { hi: 2.7557319223985893e-06, lo: -1.858393274046472e-22 },
    DoubleDouble { hi: 2.755731922398589e-07, lo: 2.3767714622250297e-23 },
];

/// `exp(r) - 1` for `|r| ≤ ln 2 / 2`: a degree-10 Taylor polynomial on
/// `t = r / 2⁸` (truncation below 1e-35), then eight squarings of `1 + s`.
fn expm1_reduced(r: DoubleDouble) -> DoubleDouble {
    const HALVINGS: i32 = 8;
    let t = r.scale_pow2(-HALVINGS);
    let mut p = INV_FACT[INV_FACT.len() - 1];
    for &c in INV_FACT[..INV_FACT.len() - 1].iter().rev() {
        p = c + t * p;
    }
    let mut s = t * (DoubleDouble::ONE + t * p);
    for _ in 0..HALVINGS {
        s = s.scale_pow2(1) + s * s;
    }
    s
}

impl DoubleDouble {
    pub const ZERO: Self = Self { hi: 0.0, lo: 0.0 };
    pub const ONE: Self = Self { hi: 1.0, lo: 0.0 };

    #[inline]
    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    #[inline]
    fn scale_pow2(self, k: i32) -> Self {
        let f = 2f64.powi(k);
        Self {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }

    /// `(k, s)` with `exp(self) = 2ᵏ (1 + s)`.
    fn exp_parts(self) -> (i32, Self) {
        let k = (self.hi / LN_2.hi).round();
        let r = self - LN_2 * Self::from(k);
        (k as i32, expm1_reduced(r))
    }

    pub fn exp(self) -> Self {
        if self.hi > 709.0 {
            return Self::from(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Self::ZERO;
        }
        let (k, s) = self.exp_parts();
        (Self::ONE + s).scale_pow2(k)
    }

    pub fn expm1(self) -> Self {
        if self.hi.abs() > 700.0 {
            return self.exp() - Self::ONE;
        }
        match self.exp_parts() {
            (0, s) => s,
            (k, s) => (Self::ONE + s).scale_pow2(k) - Self::ONE,
        }
    }

    /// One Newton step from the `f64` logarithm doubles its precision.
    pub fn ln(self) -> Self {
        if self.hi.is_nan() || self.hi <= 0.0 {
            return Self::from(f64::NAN);
        }
        let y = Self::from(self.hi.ln());
        y + self * (-y).exp() - Self::ONE
    }

    pub fn tanh(self) -> Self {
        if self.hi == 0.0 {
            return self;
        }
        if self.hi.abs() > 40.0 {
            return Self::from(self.hi.signum());
        }
        let a = if self.hi < 0.0 { -self } else { self };
        let em = (a + a).expm1();
        let t = em / (em + Self::from(2.0));
        if self.hi < 0.0 {
            -t
        } else {
            t
        }
    }

    /// `self + w·x` with a plain `f64` weight.
    #[inline]
    pub fn add_scaled(self, w: f64, x: Self) -> Self {
        let (p, e) = two_prod(w, x.hi);
        let (s, t) = two_sum(self.hi, p);
        let (hi, lo) = quick_two_sum(s, t + e + w * x.lo + self.lo);
        Self { hi, lo }
    }

    pub fn sigmoid(self) -> Self {
        Self::ONE / (Self::ONE + (-self).exp())
    }
}

impl From<f64> for DoubleDouble {
    #[inline]
    fn from(hi: f64) -> Self {
        Self { hi, lo: 0.0 }
    }
}

impl PartialOrd for DoubleDouble {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi) {
            Some(Ordering::Equal) => self.lo.partial_cmp(&other.lo),
            o => o,
        }
    }
}

impl Neg for DoubleDouble {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Add for DoubleDouble {
    type Output = Self;
    #[inline]
    fn add(self, b: Self) -> Self {
        let (s1, s2) = two_sum(self.hi, b.hi);
        let (t1, t2) = two_sum(self.lo, b.lo);
        let (s1, s2) = quick_two_sum(s1, s2 + t1);
        let (hi, lo) = quick_two_sum(s1, s2 + t2);
        Self { hi, lo }
    }
}

impl Sub for DoubleDouble {
    type Output = Self;
    #[inline]
    fn sub(self, b: Self) -> Self {
        self + (-b)
    }
}

impl Mul for DoubleDouble {
    type Output = Self;
    #[inline]
    fn mul(self, b: Self) -> Self {
        let (p, e) = two_prod(self.hi, b.hi);
        let (hi, lo) = quick_two_sum(p, e + (self.hi * b.lo + self.lo * b.hi));
        Self { hi, lo }
    }
}

impl Div for DoubleDouble {
    type Output = Self;
    fn div(self, b: Self) -> Self {
        let q1 = self.hi / b.hi;
        let r = self - b * Self::from(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * Self::from(q2);
        let q3 = r.hi / b.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Self { hi, lo } + Self::from(q3)
    }
}

type Dd = DoubleDouble;

/// Borrowed `f64` parameters, in [`Model::tensors`] order, with at most one
/// entry offset by a double-double amount.
#[derive(Debug, Clone)]
struct Reference<'a> {
    dims: ModelDims,
    tensors: Vec<&'a [f64]>,
    perturb: Option<(usize, usize, Dd)>,
}

const W_IMG: usize = 0;
const W_KW: usize = 1;
const ENC_BIAS: usize = 2;
const EMB: usize = 3;
const LSTM_W: usize = 4;
const LSTM_U: usize = 8;
const LSTM_B: usize = 12;
const OUT_W: usize = 16;
const OUT_B: usize = 17;

impl<'a> Reference<'a> {
    fn new(model: &'a Model<f64>) -> Self {
        debug_assert_eq!(Model::<f64>::tensor_names()[OUT_B], "output.b");
        Self {
            dims: model.dims(),
            tensors: model.tensors().into_iter().map(|t| t.data).collect(),
            perturb: None,
        }
    }

    /// Offset of entry `j` of tensor `t`, if it is the perturbed one.
    #[inline]
    fn delta(&self, t: usize) -> Option<(usize, Dd)> {
        match self.perturb {
            Some((pt, j, d)) if pt == t => Some((j, d)),
            _ => None,
        }
    }

    fn vector(&self, t: usize, range: std::ops::Range<usize>) -> Vec<Dd> {
        let mut out: Vec<Dd> = self.tensors[t][range.clone()].iter().map(|&x| Dd::from(x)).collect();
        if let Some((j, d)) = self.delta(t) {
            if range.contains(&j) {
                out[j - range.start] = out[j - range.start] + d;
            }
        }
        out
    }

    /// `acc += W x` for the row-major `acc.len() × x.len()` tensor `w`.
    fn affine(&self, w: usize, x: &[Dd], acc: &mut [Dd]) {
        let cols = x.len();
        let data = self.tensors[w];
        for (r, a) in acc.iter_mut().enumerate() {
            let row = &data[r * cols..(r + 1) * cols];
            *a = row.iter().zip(x).fold(*a, |s, (&wi, &xi)| s.add_scaled(wi, xi));
        }
        if let Some((j, d)) = self.delta(w) {
            acc[j / cols] = acc[j / cols] + d * x[j % cols];
        }
    }

    fn embedding(&self, id: usize) -> Vec<Dd> {
        let e = self.dims.embed_dim;
        self.vector(EMB, id * e..(id + 1) * e)
    }

    /// Teacher-forced mean cross-entropy, written independently of
    /// [`Model::loss`].
    fn loss(&self, ex: &Example<f64>) -> Dd {
        let ModelDims { hidden_dim: hd, embed_dim: ed, vocab_size: v, .. } = self.dims;
        let feature: Vec<Dd> = ex.feature.iter().map(|&x| Dd::from(x)).collect();
        let mut kw_mean = vec![Dd::ZERO; ed];
        for &k in &ex.keywords {
            for (m, x) in kw_mean.iter_mut().zip(self.embedding(k)) {
                *m = *m + x;
            }
        }
        if !ex.keywords.is_empty() {
            let n = Dd::from(ex.keywords.len() as f64);
            kw_mean.iter_mut().for_each(|m| *m = *m / n);
        }
        let mut pre = self.vector(ENC_BIAS, 0..hd);
        self.affine(W_IMG, &feature, &mut pre);
        self.affine(W_KW, &kw_mean, &mut pre);
        let mut h: Vec<Dd> = pre.into_iter().map(Dd::tanh).collect();
        let mut c = vec![Dd::ZERO; hd];

        let mut nll = Dd::ZERO;
        let mut labels = 0usize;
        for t in 0..ex.target.len() - 1 {
            let x = self.embedding(ex.target[t]);
            let gate = |g: usize| {
                let mut a = self.vector(LSTM_B + g, 0..hd);
                self.affine(LSTM_W + g, &x, &mut a);
                self.affine(LSTM_U + g, &h, &mut a);
                a
            };
            let (i, f, o, g) = (gate(0), gate(1), gate(2), gate(3));
            for k in 0..hd {
                c[k] = f[k].sigmoid() * c[k] + i[k].sigmoid() * g[k].tanh();
            }
            h = (0..hd).map(|k| o[k].sigmoid() * c[k].tanh()).collect();

            let label = ex.target[t + 1];
            if label == PAD {
                continue;
            }
            let mut z = self.vector(OUT_B, 0..v);
            self.affine(OUT_W, &h, &mut z);
            let max = z.iter().copied().fold(z[0], |m, x| if x > m { x } else { m });
            let total = z.iter().fold(Dd::ZERO, |s, &zi| s + (zi - max).exp());
            nll = nll + (max + total.ln() - z[label]);
            labels += 1;
        }
        if labels == 0 {
            Dd::ZERO
        } else {
            nll / Dd::from(labels as f64)
        }
    }
}

/// Dimensions and sequence shape for [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradCheckConfig {
    pub dims: ModelDims,
    /// Number of words between `⟨start⟩` and `⟨end⟩`.
    pub words: usize,
    pub keywords: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            dims: ModelDims {
                vocab_size: 11,
                embed_dim: 8,
                hidden_dim: 12,
                feature_dim: 16,
            },
            words: 5,
            keywords: 2,
        }
    }
}

/// A random model (weights `uniform(-0.5, 0.5)`) and one random example.
pub fn grad_check_problem<R: Rng + ?Sized>(config: &GradCheckConfig, rng: &mut R) -> (Model<f64>, Example<f64>) {
    let model = Model::random(config.dims, 0.5, rng);
    let v = config.dims.vocab_size;
    let feature = uniform_vec(config.dims.feature_dim, 1.0, rng);
    let keywords = (0..config.keywords).map(|_| rng.random_range(0..v)).collect();
    let mut target = vec![START];
    target.extend((0..config.words).map(|_| rng.random_range(0..v)));
    target.push(END);
    (model, Example { feature, keywords, target })
}

/// `|a − b| / max(1e-12, |a| + |b|)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-12)
}

/// Loss of `model` on `example` evaluated in double-double precision.
pub fn reference_loss(model: &Model<f64>, example: &Example<f64>) -> Result<f64> {
    model.loss(example)?;
    Ok(Reference::new(model).loss(example).to_f64())
}

/// Largest relative error between `analytic` and central differences
/// `(L(θ + ε) − L(θ − ε)) / 2ε`, over every parameter.
pub fn max_relative_error(model: &Model<f64>, example: &Example<f64>, analytic: &Gradients<f64>, eps: f64) -> Result<f64> {
    // Runs the f64 model once so malformed inputs surface as errors here
    // rather than as panics inside the reference pass.
    model.loss(example)?;
    let reference = Reference::new(model);
    let grads = analytic.tensors();
    if grads.len() != reference.tensors.len()
        || grads.iter().zip(&reference.tensors).any(|(g, t)| g.data.len() != t.len())
    {
        return Err(Error::Invalid("gradient layout does not match the model".into()));
    }
    let coords: Vec<(usize, usize)> = grads
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.data.len()).map(move |j| (ti, j)))
        .collect();
    let h = Dd::from(eps);
    let worst = coords
        .par_iter()
        .map(|&(ti, j)| {
            let at = |d: Dd| Reference { perturb: Some((ti, j, d)), ..reference.clone() }.loss(example);
            let numeric = ((at(h) - at(-h)) / (h + h)).to_f64();
            relative_error(grads[ti].data[j], numeric)
        })
        .reduce(|| 0.0, |a, b| if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b) });
    Ok(if worst.is_nan() { f64::INFINITY } else { worst })
}

/// Compares backpropagation against central finite differences on a random
/// problem drawn from `seed`; returns the maximum relative error.
pub fn grad_check(config: &GradCheckConfig, seed: u64, eps: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    config.dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (model, example) = grad_check_problem(config, &mut rng);
    let (_, grads) = model.loss_and_grad(&example)?;
    max_relative_error(&model, &example, &grads, eps)
}

//! Single-layer LSTM decoder with a softmax output layer.
//!
//! Gate equations (elementwise):
//!
//! ```text
//! i = σ(W_i x + U_i h + b_i)    f = σ(W_f x + U_f h + b_f)
//! o = σ(W_o x + U_o h + b_o)    g = tanh(W_g x + U_g h + b_g)
//! c' = f ⊙ c + i ⊙ g            h' = o ⊙ tanh(c')
//! ```
//!
//! The teacher-forced forward pass caches every activation so that
//! [`Model::backward`] can compute exact gradients for all parameters,
//! including the encoder and the embedding table.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{END, PAD, START};
use crate::encoder::{encode_cached, EmbeddingTable, EncoderCache, EncoderParams};
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, sum, Scalar};
use crate::tensor::{cast_vec, log_softmax, softmax, uniform_vec, Matrix};

pub const GATE_I: usize = 0;
pub const GATE_F: usize = 1;
pub const GATE_O: usize = 2;
pub const GATE_G: usize = 3;

/// Recurrent state `(h, c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State<T> {
    pub h: Vec<T>,
    pub c: Vec<T>,
}

impl<T: Scalar> State<T> {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![T::zero(); hidden],
            c: vec![T::zero(); hidden],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 || self.feature_dim == 0 {
            return Err(Error::Config(format!("all model dimensions must be ≥ 1: {self:?}")));
        }
        Ok(())
    }
}

/// Per-gate input weights, recurrent weights and biases, indexed by
/// [`GATE_I`], [`GATE_F`], [`GATE_O`], [`GATE_G`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams<T> {
    /// hidden × embed
    pub w: [Matrix<T>; 4],
    /// hidden × hidden
    pub u: [Matrix<T>; 4],
    pub b: [Vec<T>; 4],
}

impl<T: Scalar> LstmParams<T> {
    pub fn zeros(embed: usize, hidden: usize) -> Self {
        Self {
            w: std::array::from_fn(|_| Matrix::zeros(hidden, embed)),
            u: std::array::from_fn(|_| Matrix::zeros(hidden, hidden)),
            b: std::array::from_fn(|_| vec![T::zero(); hidden]),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.b[0].len()
    }

    pub fn embed_dim(&self) -> usize {
        self.w[0].cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputLayer<T> {
    /// vocab × hidden
    pub w: Matrix<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> OutputLayer<T> {
    pub fn logits(&self, h: &[T]) -> Vec<T> {
        let mut z = self.b.clone();
        self.w.mul_vec_acc(h, &mut z);
        z
    }
}

/// Activations of one LSTM step.
#[derive(Debug, Clone, PartialEq)]
pub struct GateActivations<T> {
    pub i: Vec<T>,
    pub f: Vec<T>,
    pub o: Vec<T>,
    pub g: Vec<T>,
    pub c: Vec<T>,
    pub tanh_c: Vec<T>,
    pub h: Vec<T>,
}

fn step_activations<T: Scalar>(x: &[T], h: &[T], c: &[T], p: &LstmParams<T>) -> GateActivations<T> {
    let pre = |gate: usize| {
        let mut a = p.b[gate].clone();
        p.w[gate].mul_vec_acc(x, &mut a);
        p.u[gate].mul_vec_acc(h, &mut a);
        a
    };
    let i: Vec<T> = pre(GATE_I).into_iter().map(sigmoid).collect();
    let f: Vec<T> = pre(GATE_F).into_iter().map(sigmoid).collect();
    let o: Vec<T> = pre(GATE_O).into_iter().map(sigmoid).collect();
    let g: Vec<T> = pre(GATE_G).into_iter().map(T::tanh).collect();
    let c_new: Vec<T> = (0..c.len()).map(|k| f[k] * c[k] + i[k] * g[k]).collect();
    let tanh_c: Vec<T> = c_new.iter().map(|v| v.tanh()).collect();
    let h_new = (0..c.len()).map(|k| o[k] * tanh_c[k]).collect();
    GateActivations {
        i,
        f,
        o,
        g,
        c: c_new,
        tanh_c,
        h: h_new,
    }
}

/// One LSTM step: returns `(h', c')`.
pub fn lstm_step<T: Scalar>(x: &[T], h: &[T], c: &[T], params: &LstmParams<T>) -> Result<(Vec<T>, Vec<T>)> {
    let hidden = params.hidden_dim();
    if x.len() != params.embed_dim() {
        return Err(Error::dim("lstm input", params.embed_dim(), x.len()));
    }
    if h.len() != hidden {
        return Err(Error::dim("lstm hidden state", hidden, h.len()));
    }
    if c.len() != hidden {
        return Err(Error::dim("lstm cell state", hidden, c.len()));
    }
    let act = step_activations(x, h, c, params);
    Ok((act.h, act.c))
}

/// Cached values for one teacher-forced timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCache<T> {
    pub input: usize,
    pub label: usize,
    pub h_prev: Vec<T>,
    pub c_prev: Vec<T>,
    pub act: GateActivations<T>,
    pub probs: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    /// Present when the initial state came from the encoder; backward then
    /// propagates into the encoder parameters and keyword embeddings.
    pub encoder: Option<EncoderCache<T>>,
    pub init: State<T>,
    pub steps: Vec<StepCache<T>>,
    pub n_labels: usize,
    /// Mean of `-ln p(label)` over non-pad labels.
    pub loss: T,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `ln p(label)` at every step (pad labels included).
    pub fn label_log_probs(&self) -> Vec<T> {
        self.steps.iter().map(|s| s.probs[s.label].ln()).collect()
    }

    /// Total `-ln p` over non-pad labels.
    pub fn total_nll(&self) -> T {
        sum(self
            .steps
            .iter()
            .filter(|s| s.label != PAD)
            .map(|s| -s.probs[s.label].ln()))
    }
}

/// One training example: image feature, keyword ids and the full target
/// `⟨start⟩ … ⟨end⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<T> {
    pub feature: Vec<T>,
    pub keywords: Vec<usize>,
    pub target: Vec<usize>,
}

/// Encoder, embeddings, LSTM and output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model<T> {
    pub encoder: EncoderParams<T>,
    pub embeddings: EmbeddingTable<T>,
    pub lstm: LstmParams<T>,
    pub output: OutputLayer<T>,
}

/// Gradients share the parameter layout.
pub type Gradients<T> = Model<T>;

/// Name and shape of one parameter tensor, plus its data.
#[derive(Debug, Clone, Copy)]
pub struct TensorView<'a, T> {
    pub name: &'static str,
    pub shape: [usize; 2],
    pub data: &'a [T],
}

const TENSOR_NAMES: [&str; 18] = [
    "encoder.w_img",
    "encoder.w_kw",
    "encoder.bias",
    "embeddings",
    "lstm.w_i",
    "lstm.w_f",
    "lstm.w_o",
    "lstm.w_g",
    "lstm.u_i",
    "lstm.u_f",
    "lstm.u_o",
    "lstm.u_g",
    "lstm.b_i",
    "lstm.b_f",
    "lstm.b_o",
    "lstm.b_g",
    "output.w",
    "output.b",
];

impl<T: Scalar> Model<T> {
    pub fn zeros(dims: ModelDims) -> Self {
        let ModelDims {
            vocab_size: v,
            embed_dim: e,
            hidden_dim: h,
            feature_dim: d,
        } = dims;
        Self {
            encoder: EncoderParams::zeros(h, d, e),
            embeddings: EmbeddingTable::new(Matrix::zeros(v, e), true),
            lstm: LstmParams::zeros(e, h),
            output: OutputLayer {
                w: Matrix::zeros(v, h),
                b: vec![T::zero(); v],
            },
        }
    }

    /// Every parameter i.i.d. `uniform(-scale, scale)`, drawn in
    /// [`Model::tensors`] order.
    pub fn random<R: Rng + ?Sized>(dims: ModelDims, scale: f64, rng: &mut R) -> Self {
        let mut model = Self::zeros(dims);
        for t in model.tensors_mut() {
            let fresh: Vec<T> = uniform_vec(t.len(), scale, rng);
            t.copy_from_slice(&fresh);
        }
        model
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(self.dims());
        z.embeddings.trainable = self.embeddings.trainable;
        z
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab_size: self.output.b.len(),
            embed_dim: self.embeddings.dim(),
            hidden_dim: self.lstm.hidden_dim(),
            feature_dim: self.encoder.feature_dim(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.output.b.len()
    }

    /// All parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<TensorView<'_, T>> {
        let mut views: Vec<(&[T], [usize; 2])> = vec![
            (self.encoder.w_img.as_slice(), self.encoder.w_img.shape()),
            (self.encoder.w_kw.as_slice(), self.encoder.w_kw.shape()),
            (&self.encoder.bias, [self.encoder.bias.len(), 1]),
            (self.embeddings.table.as_slice(), self.embeddings.table.shape()),
        ];
        views.extend(self.lstm.w.iter().map(|m| (m.as_slice(), m.shape())));
        views.extend(self.lstm.u.iter().map(|m| (m.as_slice(), m.shape())));
        views.extend(self.lstm.b.iter().map(|b| (b.as_slice(), [b.len(), 1])));
        views.push((self.output.w.as_slice(), self.output.w.shape()));
        views.push((&self.output.b, [self.output.b.len(), 1]));
        views
            .into_iter()
            .zip(TENSOR_NAMES)
            .map(|((data, shape), name)| TensorView { name, shape, data })
            .collect()
    }

    /// Mutable counterpart of [`Model::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![
            self.encoder.w_img.as_mut_slice(),
            self.encoder.w_kw.as_mut_slice(),
            &mut self.encoder.bias,
            self.embeddings.table.as_mut_slice(),
        ];
        let LstmParams { w, u, b } = &mut self.lstm;
        out.extend(w.iter_mut().map(Matrix::as_mut_slice));
        out.extend(u.iter_mut().map(Matrix::as_mut_slice));
        out.extend(b.iter_mut().map(Vec::as_mut_slice));
        out.push(self.output.w.as_mut_slice());
        out.push(&mut self.output.b);
        out
    }

    pub fn tensor_names() -> &'static [&'static str] {
        &TENSOR_NAMES
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Builds a model from tensors in [`Model::tensors`] order.
    pub fn from_tensors(dims: ModelDims, tensors: &[(&str, [usize; 2], &[T])]) -> Result<Self> {
        dims.validate()?;
        let mut model = Self::zeros(dims);
        let expected: Vec<(&'static str, [usize; 2])> =
            model.tensors().iter().map(|t| (t.name, t.shape)).collect();
        if tensors.len() != expected.len() {
            return Err(Error::dim("tensor count", expected.len(), tensors.len()));
        }
        for ((dst, (name, shape)), (src_name, src_shape, src)) in
            model.tensors_mut().into_iter().zip(expected).zip(tensors)
        {
            if name != *src_name {
                return Err(Error::Invalid(format!("expected tensor `{name}`, found `{src_name}`")));
            }
            if shape != *src_shape || src.len() != dst.len() {
                return Err(Error::Invalid(format!(
                    "tensor `{name}` has shape {src_shape:?} ({} values), expected {shape:?}",
                    src.len()
                )));
            }
            dst.copy_from_slice(src);
        }
        Ok(model)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut out = Model::<U>::zeros(self.dims());
        out.embeddings.trainable = self.embeddings.trainable;
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            dst.copy_from_slice(&cast_vec::<T, U>(src.data));
        }
        out
    }

    pub fn squared_norm(&self) -> T {
        sum(self.tensors().iter().flat_map(|t| t.data.iter()).map(|&x| x * x))
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            for x in t {
                *x *= factor;
            }
        }
    }

    /// `self += other`
    pub fn add_assign(&mut self, other: &Self) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src.data) {
                *d += s;
            }
        }
    }

    pub fn encode(&self, feature: &[T], keywords: &[usize]) -> Result<State<T>> {
        encode_cached(feature, keywords, &self.encoder, &self.embeddings).map(|(s, _)| s)
    }

    /// Advances the state by feeding `token` and returns the next-token
    /// log-distribution.
    pub fn step_log_probs(&self, state: &State<T>, token: usize) -> Result<(State<T>, Vec<T>)> {
        let x = self.embeddings.lookup(token)?;
        let (h, c) = lstm_step(x, &state.h, &state.c, &self.lstm)?;
        let logp = log_softmax(&self.output.logits(&h));
        Ok((State { h, c }, logp))
    }

    /// Teacher-forced pass over a target `⟨start⟩ … ⟨end⟩`: step `t` consumes
    /// `target[t]` and predicts `target[t+1]`.
    pub fn forward_teacher_forced(&self, init: &State<T>, target: &[usize]) -> Result<(ForwardTrace<T>, T)> {
        if target.len() < 2 {
            return Err(Error::Invalid(format!(
                "target needs at least ⟨start⟩ and ⟨end⟩, got {} tokens",
                target.len()
            )));
        }
        if target[0] != START || target[target.len() - 1] != END {
            return Err(Error::Invalid("target must begin with ⟨start⟩ and end with ⟨end⟩".into()));
        }
        let trace = self.teacher_forced(init, &target[..target.len() - 1], &target[1..])?;
        let loss = trace.loss;
        Ok((trace, loss))
    }

    /// Teacher-forced pass over arbitrary aligned `inputs` / `labels`.
    pub fn teacher_forced(&self, init: &State<T>, inputs: &[usize], labels: &[usize]) -> Result<ForwardTrace<T>> {
        if inputs.len() != labels.len() {
            return Err(Error::dim("teacher-forced labels", inputs.len(), labels.len()));
        }
        let hidden = self.lstm.hidden_dim();
        if init.h.len() != hidden || init.c.len() != hidden {
            return Err(Error::dim("initial state", hidden, init.h.len().min(init.c.len())));
        }
        let vocab = self.vocab_size();
        if let Some(&bad) = labels.iter().find(|&&l| l >= vocab) {
            return Err(Error::Invalid(format!("label id {bad} outside vocabulary of {vocab}")));
        }
        let mut steps = Vec::with_capacity(inputs.len());
        let mut h = init.h.clone();
        let mut c = init.c.clone();
        for (&input, &label) in inputs.iter().zip(labels) {
            let x = self.embeddings.lookup(input)?;
            let act = step_activations(x, &h, &c, &self.lstm);
            let probs = softmax(&self.output.logits(&act.h));
            let h_prev = std::mem::replace(&mut h, act.h.clone());
            let c_prev = std::mem::replace(&mut c, act.c.clone());
            steps.push(StepCache {
                input,
                label,
                h_prev,
                c_prev,
                act,
                probs,
            });
        }
        let n_labels = labels.iter().filter(|&&l| l != PAD).count();
        let mut trace = ForwardTrace {
            encoder: None,
            init: init.clone(),
            steps,
            n_labels,
            loss: T::zero(),
        };
        if n_labels > 0 {
            trace.loss = trace.total_nll() / T::of(n_labels as f64);
        }
        Ok(trace)
    }

    /// Encodes the example and runs the teacher-forced pass.
    pub fn forward(&self, example: &Example<T>) -> Result<ForwardTrace<T>> {
        let (init, cache) = encode_cached(&example.feature, &example.keywords, &self.encoder, &self.embeddings)?;
        let (mut trace, _) = self.forward_teacher_forced(&init, &example.target)?;
        trace.encoder = Some(cache);
        Ok(trace)
    }

    pub fn loss(&self, example: &Example<T>) -> Result<T> {
        self.forward(example).map(|t| t.loss)
    }

    pub fn loss_and_grad(&self, example: &Example<T>) -> Result<(T, Gradients<T>)> {
        let trace = self.forward(example)?;
        let grads = self.backward(&trace);
        Ok((trace.loss, grads))
    }

    /// Sum of `ln p(token)` for a decoded continuation of `⟨start⟩`, scored by
    /// the teacher-forced pass. `tokens` includes `⟨end⟩` when finished.
    pub fn sequence_log_prob(&self, init: &State<T>, tokens: &[usize]) -> Result<T> {
        if tokens.is_empty() {
            return Ok(T::zero());
        }
        let inputs: Vec<usize> = std::iter::once(START)
            .chain(tokens[..tokens.len() - 1].iter().copied())
            .collect();
        let trace = self.teacher_forced(init, &inputs, tokens)?;
        Ok(sum(trace.label_log_probs()))
    }

    /// Exact gradient of `trace.loss` with respect to every parameter.
    pub fn backward(&self, trace: &ForwardTrace<T>) -> Gradients<T> {
        let mut grads = self.zeros_like();
        let hidden = self.lstm.hidden_dim();
        let one = T::one();
        let mut dh_next = vec![T::zero(); hidden];
        let mut dc_next = vec![T::zero(); hidden];
        let inv_n = if trace.n_labels > 0 {
            one / T::of(trace.n_labels as f64)
        } else {
            T::zero()
        };

        for step in trace.steps.iter().rev() {
            let act = &step.act;
            let mut dh = dh_next.clone();
            if step.label != PAD && trace.n_labels > 0 {
                let mut dlogits: Vec<T> = step.probs.iter().map(|&p| p * inv_n).collect();
                dlogits[step.label] -= inv_n;
                grads.output.w.add_outer(&dlogits, &act.h);
                for (b, d) in grads.output.b.iter_mut().zip(&dlogits) {
                    *b += *d;
                }
                self.output.w.tmul_vec_acc(&dlogits, &mut dh);
            }

            let mut da: [Vec<T>; 4] = std::array::from_fn(|_| vec![T::zero(); hidden]);
            let mut dc_prev = vec![T::zero(); hidden];
            for k in 0..hidden {
                let dc = dc_next[k] + dh[k] * act.o[k] * (one - act.tanh_c[k] * act.tanh_c[k]);
                let d_o = dh[k] * act.tanh_c[k];
                let d_i = dc * act.g[k];
                let d_g = dc * act.i[k];
                let d_f = dc * step.c_prev[k];
                dc_prev[k] = dc * act.f[k];
                da[GATE_I][k] = d_i * act.i[k] * (one - act.i[k]);
                da[GATE_F][k] = d_f * act.f[k] * (one - act.f[k]);
                da[GATE_O][k] = d_o * act.o[k] * (one - act.o[k]);
                da[GATE_G][k] = d_g * (one - act.g[k] * act.g[k]);
            }

            let x = self.embeddings.table.row(step.input);
            let mut dx = vec![T::zero(); self.embeddings.dim()];
            let mut dh_prev = vec![T::zero(); hidden];
            for (gate, d_gate) in da.iter().enumerate() {
                grads.lstm.w[gate].add_outer(d_gate, x);
                grads.lstm.u[gate].add_outer(d_gate, &step.h_prev);
                for (b, d) in grads.lstm.b[gate].iter_mut().zip(d_gate) {
                    *b += *d;
                }
                self.lstm.w[gate].tmul_vec_acc(d_gate, &mut dx);
                self.lstm.u[gate].tmul_vec_acc(d_gate, &mut dh_prev);
            }
            for (e, d) in grads.embeddings.table.row_mut(step.input).iter_mut().zip(&dx) {
                *e += *d;
            }
            dh_next = dh_prev;
            dc_next = dc_prev;
        }

        // c0 is a constant; only h0 depends on the encoder.
        if let Some(enc) = &trace.encoder {
            let dz: Vec<T> = dh_next
                .iter()
                .zip(&enc.h0)
                .map(|(&d, &h)| d * (one - h * h))
                .collect();
            grads.encoder.w_img.add_outer(&dz, &enc.feature);
            grads.encoder.w_kw.add_outer(&dz, &enc.kw_mean);
            for (b, d) in grads.encoder.bias.iter_mut().zip(&dz) {
                *b += *d;
            }
            if !enc.keywords.is_empty() {
                let mut dkw = vec![T::zero(); self.embeddings.dim()];
                self.encoder.w_kw.tmul_vec_acc(&dz, &mut dkw);
                let share = one / T::of(enc.keywords.len() as f64);
                for &id in &enc.keywords {
                    for (e, d) in grads.embeddings.table.row_mut(id).iter_mut().zip(&dkw) {
                        *e += *d * share;
                    }
                }
            }
        }
        grads
    }
}

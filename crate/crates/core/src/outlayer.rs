//! Decoder output layers.
//!
//! Every variant maps a batch of translation contexts `H` (`n x d_h`, one
//! post-attention decoder state per row) to unnormalized logits `n x |V|`.
//! All variants except [`LayerVariant::Full`] score against the shared
//! target embedding `E` (`|V| x d`), which is passed in by reference and never
//! copied into the layer:
//!
//! | variant      | logits (row form)                                  |
//! |--------------|----------------------------------------------------|
//! | `Full`       | `H W + b`                                          |
//! | `Tied`       | `H E^T + b`                                        |
//! | `Bilinear`   | `(H Wmid^T) E^T + b`                               |
//! | `NonlinOut`  | `H s(E Wmid)^T + b`                                |
//! | `NonlinCtx`  | `s(H Wmid^T) E^T + b`                              |
//! | `Joint`      | `s(H V^T + b_v) s(E U^T + b_u)^T + b`              |
//!
//! `s` is the layer's [`Activation`] (tanh unless configured otherwise).
//! Softmax is left to the loss or the sampler.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ndmath::{
    log_sum_exp, matmul, matmul_nt, matmul_nt_into, matmul_tn_into, Matrix, Rng, INIT_SCALE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerVariant {
    Full,
    Tied,
    Bilinear,
    NonlinOut,
    NonlinCtx,
    Joint,
}

impl LayerVariant {
    pub const ALL: [LayerVariant; 6] = [
        LayerVariant::Full,
        LayerVariant::Tied,
        LayerVariant::Bilinear,
        LayerVariant::NonlinOut,
        LayerVariant::NonlinCtx,
        LayerVariant::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerVariant::Full => "full",
            LayerVariant::Tied => "tied",
            LayerVariant::Bilinear => "bilinear",
            LayerVariant::NonlinOut => "nonlin_out",
            LayerVariant::NonlinCtx => "nonlin_ctx",
            LayerVariant::Joint => "joint",
        }
    }

    /// Human-readable layer form, as printed in ablation reports.
    pub fn layer_form(self) -> &'static str {
        match self {
            LayerVariant::Full => "W^T h",
            LayerVariant::Tied => "E h",
            LayerVariant::Bilinear => "E W h",
            LayerVariant::NonlinOut => "s(E W) h",
            LayerVariant::NonlinCtx => "E s(W h)",
            LayerVariant::Joint => "s(E W_o) s(W_c h)",
        }
    }

    /// Whether the layer scores against the shared target embedding.
    pub fn uses_embedding(self) -> bool {
        !matches!(self, LayerVariant::Full)
    }

    pub fn uses_mid(self) -> bool {
        matches!(
            self,
            LayerVariant::Bilinear | LayerVariant::NonlinOut | LayerVariant::NonlinCtx
        )
    }
}

impl fmt::Display for LayerVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        LayerVariant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::Argument(format!("unknown output layer variant '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// Used to exhibit the degenerate (weight-tying) form of the joint layer.
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output `y = s(x)`.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    fn map(self, m: &Matrix) -> Matrix {
        m.map(|x| self.apply(x))
    }
}

/// Dimensions of one output layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerDims {
    pub vocab: usize,
    /// Target embedding width.
    pub d: usize,
    /// Translation context width.
    pub d_h: usize,
    /// Joint space width; ignored by non-joint variants.
    pub d_j: usize,
}

impl LayerDims {
    pub fn validate(&self, variant: LayerVariant) -> Result<()> {
        if self.vocab == 0 || self.d == 0 || self.d_h == 0 {
            return Err(Error::Argument(format!(
                "{variant}: dimensions must be positive, got {self:?}"
            )));
        }
        if variant == LayerVariant::Joint && self.d_j == 0 {
            return Err(Error::Argument("joint: d_j must be positive".into()));
        }
        if variant == LayerVariant::Tied && self.d != self.d_h {
            return Err(Error::Constraint(format!(
                "tied output layer requires d = d_h, got d = {} and d_h = {}",
                self.d, self.d_h
            )));
        }
        Ok(())
    }
}

/// Learnable tensors of one output layer. The target embedding is not
/// stored here; it is owned by the model and passed to every call.
///
/// Only the tensors demanded by `variant` are present. The same type doubles
/// as the gradient accumulator for the layer.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputLayer {
    variant: LayerVariant,
    activation: Activation,
    dims: LayerDims,
    /// `d_h x |V|` (full).
    pub w: Option<Matrix>,
    /// `d x d_h` (bilinear and both single-nonlinearity forms).
    pub mid: Option<Matrix>,
    /// `d_j x d` output-side projection (joint).
    pub u: Option<Matrix>,
    /// `1 x d_j` (joint).
    pub b_u: Option<Matrix>,
    /// `d_j x d_h` context-side projection (joint).
    pub v: Option<Matrix>,
    /// `1 x d_j` (joint).
    pub b_v: Option<Matrix>,
    /// `1 x |V|`, present in every variant.
    pub b: Matrix,
}

/// Output-side quantities that depend only on `E` and the layer weights:
/// `s(E Wmid)` for `NonlinOut`, `E' = s(E U^T + b_u)` for `Joint`.
#[derive(Clone, Debug)]
pub struct OutputProjection {
    act: Option<Matrix>,
}

/// Intermediates kept from a batched forward pass for [`OutputLayer::backward_batch`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    h: Matrix,
    /// Context-side product: `H Wmid^T` (bilinear) or `s(H Wmid^T)` / `s(H V^T + b_v)`.
    ctx: Option<Matrix>,
    proj: OutputProjection,
}

impl OutputLayer {
    /// Fresh layer with every tensor uniform in `[-0.1, 0.1]`.
    pub fn new(variant: LayerVariant, dims: LayerDims, rng: &mut Rng) -> Result<Self> {
        let mut layer = OutputLayer::zeros(variant, dims)?;
        for (_, t) in layer.tensors_mut() {
            *t = Matrix::uniform(t.rows(), t.cols(), INIT_SCALE, rng);
        }
        Ok(layer)
    }

    pub fn zeros(variant: LayerVariant, dims: LayerDims) -> Result<Self> {
        dims.validate(variant)?;
        let LayerDims { vocab, d, d_h, d_j } = dims;
        let joint = variant == LayerVariant::Joint;
        Ok(OutputLayer {
            variant,
            activation: Activation::Tanh,
            dims,
            w: (variant == LayerVariant::Full).then(|| Matrix::zeros(d_h, vocab)),
            mid: variant.uses_mid().then(|| Matrix::zeros(d, d_h)),
            u: joint.then(|| Matrix::zeros(d_j, d)),
            b_u: joint.then(|| Matrix::zeros(1, d_j)),
            v: joint.then(|| Matrix::zeros(d_j, d_h)),
            b_v: joint.then(|| Matrix::zeros(1, d_j)),
            b: Matrix::zeros(1, vocab),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn variant(&self) -> LayerVariant {
        self.variant
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn dims(&self) -> LayerDims {
        self.dims
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = Vec::new();
        if let Some(w) = &self.w {
            out.push(("w", w));
        }
        if let Some(m) = &self.mid {
            out.push(("mid", m));
        }
        if let Some(u) = &self.u {
            out.push(("u", u));
        }
        if let Some(b) = &self.b_u {
            out.push(("b_u", b));
        }
        if let Some(v) = &self.v {
            out.push(("v", v));
        }
        if let Some(b) = &self.b_v {
            out.push(("b_v", b));
        }
        out.push(("b", &self.b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut out = Vec::new();
        if let Some(w) = &mut self.w {
            out.push(("w", w));
        }
        if let Some(m) = &mut self.mid {
            out.push(("mid", m));
        }
        if let Some(u) = &mut self.u {
            out.push(("u", u));
        }
        if let Some(b) = &mut self.b_u {
            out.push(("b_u", b));
        }
        if let Some(v) = &mut self.v {
            out.push(("v", v));
        }
        if let Some(b) = &mut self.b_v {
            out.push(("b_v", b));
        }
        out.push(("b", &mut self.b));
        out
    }

    /// Number of allocated scalars (excludes the shared embedding).
    pub fn allocated_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn check_embedding(&self, emb: &Matrix) -> Result<()> {
        if self.variant.uses_embedding() && emb.shape() != (self.dims.vocab, self.dims.d) {
            return Err(Error::dims(
                format!("{} output layer embedding", self.variant),
                emb.shape(),
                (self.dims.vocab, self.dims.d),
            ));
        }
        Ok(())
    }

    fn check_context(&self, h: &Matrix) -> Result<()> {
        if h.cols() != self.dims.d_h {
            return Err(Error::dims(
                format!("{} output layer context", self.variant),
                h.shape(),
                (h.rows(), self.dims.d_h),
            ));
        }
        Ok(())
    }

    /// Output-side projection; recompute whenever `E` or the layer changes.
    pub fn project_outputs(&self, emb: &Matrix) -> Result<OutputProjection> {
        self.check_embedding(emb)?;
        let act = match self.variant {
            LayerVariant::NonlinOut => {
                let pre = matmul(emb, self.mid.as_ref().expect("mid"))?;
                Some(self.activation.map(&pre))
            }
            LayerVariant::Joint => {
                let mut pre = matmul_nt(emb, self.u.as_ref().expect("u"))?;
                pre.add_row_broadcast(self.b_u.as_ref().expect("b_u"))?;
                Some(self.activation.map(&pre))
            }
            _ => None,
        };
        Ok(OutputProjection { act })
    }

    /// Batched logits `n x |V|` for contexts `h` (`n x d_h`).
    pub fn forward_batch(&self, emb: &Matrix, h: &Matrix) -> Result<(Matrix, ForwardCache)> {
        let proj = self.project_outputs(emb)?;
        self.forward_projected(emb, proj, h)
    }

    /// Like [`OutputLayer::forward_batch`] with a precomputed output projection.
    pub fn forward_projected(
        &self,
        emb: &Matrix,
        proj: OutputProjection,
        h: &Matrix,
    ) -> Result<(Matrix, ForwardCache)> {
        let (logits, ctx) = self.logits_inner(emb, &proj, h)?;
        Ok((
            logits,
            ForwardCache {
                h: h.clone(),
                ctx,
                proj,
            },
        ))
    }

    /// Logits only, reusing a projection across calls (inference).
    pub fn logits(&self, emb: &Matrix, proj: &OutputProjection, h: &Matrix) -> Result<Matrix> {
        Ok(self.logits_inner(emb, proj, h)?.0)
    }

    fn logits_inner(
        &self,
        emb: &Matrix,
        proj: &OutputProjection,
        h: &Matrix,
    ) -> Result<(Matrix, Option<Matrix>)> {
        self.check_embedding(emb)?;
        self.check_context(h)?;
        let (mut logits, ctx) = match self.variant {
            LayerVariant::Full => (matmul(h, self.w.as_ref().expect("w"))?, None),
            LayerVariant::Tied => (matmul_nt(h, emb)?, None),
            LayerVariant::Bilinear => {
                let g = matmul_nt(h, self.mid.as_ref().expect("mid"))?;
                (matmul_nt(&g, emb)?, Some(g))
            }
            LayerVariant::NonlinOut => {
                let s = proj.act.as_ref().expect("projection");
                (matmul_nt(h, s)?, None)
            }
            LayerVariant::NonlinCtx => {
                let q = matmul_nt(h, self.mid.as_ref().expect("mid"))?;
                let a = self.activation.map(&q);
                (matmul_nt(&a, emb)?, Some(a))
            }
            LayerVariant::Joint => {
                let mut q = matmul_nt(h, self.v.as_ref().expect("v"))?;
                q.add_row_broadcast(self.b_v.as_ref().expect("b_v"))?;
                let hj = self.activation.map(&q);
                let e = proj.act.as_ref().expect("projection");
                (matmul_nt(&hj, e)?, Some(hj))
            }
        };
        logits.add_row_broadcast(&self.b)?;
        Ok((logits, ctx))
    }

    /// Accumulates gradients of `sum(dlogits .* logits)` into `grad` (layer
    /// tensors) and `grad_emb` (shared embedding), returning the gradient on
    /// the contexts.
    pub fn backward_batch(
        &self,
        emb: &Matrix,
        cache: &ForwardCache,
        dlogits: &Matrix,
        grad: &mut OutputLayer,
        grad_emb: &mut Matrix,
    ) -> Result<Matrix> {
        let h = &cache.h;
        if dlogits.shape() != (h.rows(), self.dims.vocab) {
            return Err(Error::dims(
                format!("{} output layer upstream gradient", self.variant),
                dlogits.shape(),
                (h.rows(), self.dims.vocab),
            ));
        }
        if self.variant.uses_embedding() && grad_emb.shape() != emb.shape() {
            return Err(Error::dims("embedding gradient", grad_emb.shape(), emb.shape()));
        }
        grad.b.add_assign(&dlogits.col_sums())?;
        let act = self.activation;
        let dh = match self.variant {
            LayerVariant::Full => {
                let w = self.w.as_ref().expect("w");
                matmul_tn_into(grad.w.as_mut().expect("w"), h, dlogits, true)?;
                matmul_nt(dlogits, w)?
            }
            LayerVariant::Tied => {
                matmul_tn_into(grad_emb, dlogits, h, true)?;
                matmul(dlogits, emb)?
            }
            LayerVariant::Bilinear => {
                let mid = self.mid.as_ref().expect("mid");
                let g = cache.ctx.as_ref().expect("ctx");
                let dg = matmul(dlogits, emb)?;
                matmul_tn_into(grad_emb, dlogits, g, true)?;
                matmul_tn_into(grad.mid.as_mut().expect("mid"), &dg, h, true)?;
                matmul(&dg, mid)?
            }
            LayerVariant::NonlinOut => {
                let mid = self.mid.as_ref().expect("mid");
                let s = cache.proj.act.as_ref().expect("projection");
                let dh = matmul(dlogits, s)?;
                let mut dp = crate::ndmath::matmul_tn(dlogits, h)?;
                for (g, &y) in dp.data_mut().iter_mut().zip(s.data()) {
                    *g *= act.derivative_from_output(y);
                }
                matmul_nt_into(grad_emb, &dp, mid, true)?;
                matmul_tn_into(grad.mid.as_mut().expect("mid"), emb, &dp, true)?;
                dh
            }
            LayerVariant::NonlinCtx => {
                let mid = self.mid.as_ref().expect("mid");
                let a = cache.ctx.as_ref().expect("ctx");
                let mut dq = matmul(dlogits, emb)?;
                matmul_tn_into(grad_emb, dlogits, a, true)?;
                for (g, &y) in dq.data_mut().iter_mut().zip(a.data()) {
                    *g *= act.derivative_from_output(y);
                }
                matmul_tn_into(grad.mid.as_mut().expect("mid"), &dq, h, true)?;
                matmul(&dq, mid)?
            }
            LayerVariant::Joint => {
                let u = self.u.as_ref().expect("u");
                let v = self.v.as_ref().expect("v");
                let e = cache.proj.act.as_ref().expect("projection");
                let hj = cache.ctx.as_ref().expect("ctx");
                // output side: dE' = dL^T H'
                let mut dp = crate::ndmath::matmul_tn(dlogits, hj)?;
                for (g, &y) in dp.data_mut().iter_mut().zip(e.data()) {
                    *g *= act.derivative_from_output(y);
                }
                matmul_tn_into(grad.u.as_mut().expect("u"), &dp, emb, true)?;
                grad.b_u.as_mut().expect("b_u").add_assign(&dp.col_sums())?;
                crate::ndmath::matmul_into(grad_emb, &dp, u, true)?;
                // context side: dH' = dL E'
                let mut dq = matmul(dlogits, e)?;
                for (g, &y) in dq.data_mut().iter_mut().zip(hj.data()) {
                    *g *= act.derivative_from_output(y);
                }
                matmul_tn_into(grad.v.as_mut().expect("v"), &dq, h, true)?;
                grad.b_v.as_mut().expect("b_v").add_assign(&dq.col_sums())?;
                matmul(&dq, v)?
            }
        };
        Ok(dh)
    }

    /// Logits for a single context vector.
    pub fn forward(&self, emb: &Matrix, h: &[f64]) -> Result<Vec<f64>> {
        let (logits, _) = self.forward_batch(emb, &Matrix::row_vector(h))?;
        Ok(logits.into_data())
    }

    /// Single-context backward: `(layer grads, embedding grad, grad on h)`.
    /// The embedding gradient is `None` for the full variant.
    pub fn backward(
        &self,
        emb: &Matrix,
        h: &[f64],
        upstream: &[f64],
    ) -> Result<(OutputLayer, Option<Matrix>, Vec<f64>)> {
        let (_, cache) = self.forward_batch(emb, &Matrix::row_vector(h))?;
        let mut grad = self.zeros_like();
        let mut grad_emb = Matrix::zeros(emb.rows(), emb.cols());
        let dh = self.backward_batch(
            emb,
            &cache,
            &Matrix::row_vector(upstream),
            &mut grad,
            &mut grad_emb,
        )?;
        let grad_emb = self.variant.uses_embedding().then_some(grad_emb);
        Ok((grad, grad_emb, dh.into_data()))
    }

    /// Copy of the layer restricted to output rows `subset`, together with the
    /// matching rows of the embedding. Shared projections are copied whole.
    pub fn restrict(&self, emb: &Matrix, subset: &[usize]) -> Result<(OutputLayer, Matrix)> {
        self.check_embedding(emb)?;
        if let Some(&bad) = subset.iter().find(|&&i| i >= self.dims.vocab) {
            return Err(Error::Argument(format!(
                "subset index {bad} out of range for vocabulary {}",
                self.dims.vocab
            )));
        }
        let mut sub = self.clone();
        sub.dims.vocab = subset.len();
        sub.w = self.w.as_ref().map(|w| w.gather_cols(subset));
        sub.b = self.b.gather_cols(subset);
        let sub_emb = if self.variant.uses_embedding() {
            emb.gather_rows(subset)
        } else {
            Matrix::zeros(0, 0)
        };
        Ok((sub, sub_emb))
    }

    /// Adds gradients of a restricted layer (see [`OutputLayer::restrict`])
    /// back into full-size accumulators. Rows outside `subset` are untouched.
    pub fn scatter_restricted_grads(
        &self,
        subset: &[usize],
        sub_grad: &OutputLayer,
        sub_grad_emb: &Matrix,
        grad: &mut OutputLayer,
        grad_emb: &mut Matrix,
    ) -> Result<()> {
        if let (Some(g), Some(sg)) = (grad.w.as_mut(), sub_grad.w.as_ref()) {
            g.scatter_add_cols(subset, sg);
        }
        grad.b.scatter_add_cols(subset, &sub_grad.b);
        for (name, dst) in grad.tensors_mut() {
            if matches!(name, "w" | "b") {
                continue;
            }
            let src = sub_grad
                .tensors()
                .into_iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t)
                .expect("same variant");
            dst.add_assign(src)?;
        }
        if self.variant.uses_embedding() {
            grad_emb.scatter_add_rows(subset, sub_grad_emb);
        }
        Ok(())
    }
}

/// Summed cross-entropy of row-wise softmax against `gold` column indices,
/// and its gradient `softmax - onehot` on the logits.
pub fn cross_entropy(logits: &Matrix, gold: &[usize]) -> Result<(f64, Matrix)> {
    if gold.len() != logits.rows() {
        return Err(Error::dims("cross_entropy", logits.shape(), (gold.len(), 1)));
    }
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (r, &g) in gold.iter().enumerate() {
        if g >= logits.cols() {
            return Err(Error::Argument(format!(
                "gold index {g} out of range for {} classes",
                logits.cols()
            )));
        }
        let row = logits.row(r);
        let lse = log_sum_exp(row);
        loss += lse - row[g];
        let grow = grad.row_mut(r);
        for x in grow.iter_mut() {
            *x = (*x - lse).exp();
        }
        grow[g] -= 1.0;
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("cross-entropy is not finite".into()));
    }
    Ok((loss, grad))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Effective output-layer capacity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CapacityReport {
    pub variant: LayerVariant,
    /// Closed-form effective parameter count; equals the sum of `breakdown`.
    pub effective_param_count: usize,
    pub breakdown: Vec<(String, usize)>,
    /// Allocated tensors left out of the closed form (the joint projection
    /// biases `b_u`, `b_v`).
    pub uncounted: Vec<(String, usize)>,
    /// Always false: the shared embedding is attributed to the input side.
    pub counts_shared_embedding: bool,
}

impl CapacityReport {
    /// Every scalar the layer allocates: closed form plus uncounted tensors.
    pub fn allocated(&self) -> usize {
        self.effective_param_count + self.uncounted.iter().map(|(_, n)| n).sum::<usize>()
    }
}

/// Effective capacity of an output layer with the given dimensions.
pub fn param_count(variant: LayerVariant, vocab: usize, d: usize, d_h: usize, d_j: usize) -> Result<CapacityReport> {
    LayerDims { vocab, d, d_h, d_j }.validate(variant)?;
    let mut breakdown = Vec::new();
    let mut uncounted = Vec::new();
    match variant {
        LayerVariant::Full => breakdown.push(("w".to_string(), vocab * d_h)),
        LayerVariant::Tied => {}
        LayerVariant::Bilinear | LayerVariant::NonlinOut | LayerVariant::NonlinCtx => {
            breakdown.push(("mid".to_string(), d * d_h))
        }
        LayerVariant::Joint => {
            breakdown.push(("u".to_string(), d_j * d));
            breakdown.push(("v".to_string(), d_j * d_h));
            uncounted.push(("b_u".to_string(), d_j));
            uncounted.push(("b_v".to_string(), d_j));
        }
    }
    breakdown.push(("b".to_string(), vocab));
    Ok(CapacityReport {
        variant,
        effective_param_count: breakdown.iter().map(|(_, n)| n).sum(),
        breakdown,
        uncounted,
        counts_shared_embedding: false,
    })
}

/// Result of checking `C_tied < C_bilinear <= C_joint(d_j) <= C_base`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CapacityChain {
    pub tied: usize,
    pub bilinear: usize,
    pub base: usize,
    /// `(d_j, C_joint, inside_chain)` per requested joint width.
    pub joint: Vec<(usize, usize, bool)>,
    /// Inclusive `d_j` range for which the chain holds, if non-empty.
    pub valid_dj: Option<(usize, usize)>,
}

impl CapacityChain {
    pub fn holds_for_all(&self) -> bool {
        self.tied < self.bilinear && self.joint.iter().all(|&(_, _, ok)| ok)
    }
}

/// Capacity chain over `d_j_range` at fixed `|V|, d, d_h`.
///
/// `C_tied` is computed as `|V|`, i.e. as if `d = d_h`, since the tied layer
/// itself only exists under that constraint.
pub fn capacity_order(vocab: usize, d: usize, d_h: usize, d_j_range: &[usize]) -> Result<CapacityChain> {
    let tied = vocab;
    let bilinear = param_count(LayerVariant::Bilinear, vocab, d, d_h, 0)?.effective_param_count;
    let base = param_count(LayerVariant::Full, vocab, d, d_h, 0)?.effective_param_count;
    let mut joint = Vec::with_capacity(d_j_range.len());
    for &dj in d_j_range {
        let c = param_count(LayerVariant::Joint, vocab, d, d_h, dj)?.effective_param_count;
        joint.push((dj, c, bilinear <= c && c <= base));
    }
    // bilinear <= joint  <=>  d_j (d + d_h) >= d d_h;  joint <= base  <=>  d_j (d + d_h) <= |V| d_h
    let lo = (d * d_h).div_ceil(d + d_h).max(1);
    let hi = vocab * d_h / (d + d_h);
    Ok(CapacityChain {
        tied,
        bilinear,
        base,
        joint,
        valid_dj: (lo <= hi).then_some((lo, hi)),
    })
}

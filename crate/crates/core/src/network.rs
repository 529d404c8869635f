//! Conditioned MLP velocity fields: the average-velocity network
//! `F(x_t, s, t | c, ω)` and the auxiliary fake-velocity network
//! `G(x, t, t′ | c)`.
//!
//! Architecture: every scalar conditioner is lifted by a sinusoidal embedding
//! and a two-layer projection, then summed with the input projection and a
//! learned class embedding into the first hidden layer. Hidden layers use the
//! sigmoid-linear unit, which keeps `∂F/∂t` continuous.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, domain_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{silu, silu_prime, DualTensor, Tensor};

/// Per-row conditioning of the average-velocity field.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning<T> {
    pub s: Vec<T>,
    pub t: Vec<T>,
    /// `None` selects the learned null (unconditional) embedding.
    pub labels: Vec<Option<usize>>,
    pub omega: Vec<T>,
}

impl<T: Scalar> Conditioning<T> {
    /// Same `(s, t, label, ω)` for all `n` rows.
    pub fn uniform(n: usize, s: T, t: T, label: Option<usize>, omega: T) -> Self {
        Self { s: vec![s; n], t: vec![t; n], labels: vec![label; n], omega: vec![omega; n] }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn check_rows(&self, n: usize) -> Result<()> {
        if self.s.len() != n || self.t.len() != n || self.labels.len() != n || self.omega.len() != n {
            return Err(dim_err(format!("conditioning does not cover {n} rows")));
        }
        for (&s, &t) in self.s.iter().zip(&self.t) {
            if !(s <= t) {
                return Err(domain_err(format!("s = {s} exceeds t = {t}")));
            }
        }
        Ok(())
    }

    /// Copy with `s` replaced by `t` (the instantaneous-velocity query).
    pub fn diagonal(&self) -> Self {
        Self { s: self.t.clone(), ..self.clone() }
    }

    pub fn with_s(&self, s: Vec<T>) -> Self {
        Self { s, ..self.clone() }
    }

    pub fn with_labels(&self, labels: Vec<Option<usize>>) -> Self {
        Self { labels, ..self.clone() }
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            s: idx.iter().map(|&i| self.s[i]).collect(),
            t: idx.iter().map(|&i| self.t[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            omega: idx.iter().map(|&i| self.omega[i]).collect(),
        }
    }
}

/// Anything that predicts an average velocity for a batch, with a
/// forward-mode directional derivative in `(x, t)` (`s`, labels and `ω` held
/// fixed).
pub trait VelocityField<T: Scalar> {
    fn dim(&self) -> usize;

    fn eval(&self, x: &Tensor<T>, cond: &Conditioning<T>) -> Result<Tensor<T>>;

    /// Returns `(F, ∇ₓF·dir_x + ∂ₜF·dir_t)` row by row.
    fn eval_jvp(
        &self,
        x: &Tensor<T>,
        cond: &Conditioning<T>,
        dir_x: &Tensor<T>,
        dir_t: &[T],
    ) -> Result<(Tensor<T>, Tensor<T>)>;
}

/// Per-row conditioning of the auxiliary field `G(x, t, t′)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxConditioning<T> {
    /// Trajectory time `t` the fake sample was generated from.
    pub origin: Vec<T>,
    /// Noise level `t′` of the re-noised fake sample.
    pub noise: Vec<T>,
    pub labels: Vec<Option<usize>>,
}

impl<T: Scalar> AuxConditioning<T> {
    pub fn check_rows(&self, n: usize) -> Result<()> {
        if self.origin.len() != n || self.noise.len() != n || self.labels.len() != n {
            return Err(dim_err(format!("aux conditioning does not cover {n} rows")));
        }
        Ok(())
    }
}

/// The auxiliary field estimating the marginal velocity of generated samples.
pub trait FakeVelocityField<T: Scalar> {
    fn eval(&self, x: &Tensor<T>, cond: &AuxConditioning<T>) -> Result<Tensor<T>>;
}

/// What a scalar conditioning slot is fed with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    /// Current time `t` (for `G`: the noise level `t′`).
    Time,
    /// Interval length `t − s`.
    Span,
    /// Guidance scale `ω`.
    Omega,
    /// Trajectory origin `t` of a fake sample (`G` only).
    Origin,
}

impl SlotKind {
    pub(crate) fn code(self) -> u8 {
        match self {
            SlotKind::Time => 0,
            SlotKind::Span => 1,
            SlotKind::Omega => 2,
            SlotKind::Origin => 3,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => SlotKind::Time,
            1 => SlotKind::Span,
            2 => SlotKind::Omega,
            3 => SlotKind::Origin,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Silu,
}

/// Architecture descriptor; together with the flat parameter vector it fully
/// determines a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layout {
    pub dim: usize,
    pub hidden: usize,
    /// Number of hidden layers (≥ 1).
    pub depth: usize,
    /// Sinusoidal embedding width per scalar (even).
    pub embed_dim: usize,
    pub embed_hidden: usize,
    /// Highest embedding frequency; frequencies are geometric from 1.
    pub max_freq: f64,
    pub num_classes: usize,
    pub slots: Vec<SlotKind>,
    #[serde(default)]
    pub activation: Activation,
}

/// Fixed architecture hyperparameters shared by `F` and `G`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub hidden: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub embed_hidden: usize,
    pub max_freq: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { hidden: 64, depth: 3, embed_dim: 16, embed_hidden: 32, max_freq: 32.0 }
    }
}

impl Layout {
    /// Layout of the average-velocity network `F`.
    pub fn average_velocity(dim: usize, num_classes: usize, arch: &ArchConfig) -> Self {
        Self::with_slots(dim, num_classes, arch, vec![SlotKind::Time, SlotKind::Span, SlotKind::Omega])
    }

    /// Layout of the auxiliary network `G`.
    pub fn fake_velocity(dim: usize, num_classes: usize, arch: &ArchConfig) -> Self {
        Self::with_slots(dim, num_classes, arch, vec![SlotKind::Time, SlotKind::Origin])
    }

    fn with_slots(dim: usize, num_classes: usize, arch: &ArchConfig, slots: Vec<SlotKind>) -> Self {
        Self {
            dim,
            hidden: arch.hidden,
            depth: arch.depth,
            embed_dim: arch.embed_dim,
            embed_hidden: arch.embed_hidden,
            max_freq: arch.max_freq,
            num_classes,
            slots,
            activation: Activation::Silu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 || self.depth == 0 || self.embed_hidden == 0 {
            return Err(Error::Config("layout sizes must be positive".into()));
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(Error::Config("embedding width must be even and positive".into()));
        }
        if !(self.max_freq > 1.0 && self.max_freq.is_finite()) && self.embed_dim > 2 {
            return Err(Error::Config("max_freq must exceed 1".into()));
        }
        Ok(())
    }

    pub fn embedding(&self) -> ScalarEmbedding {
        ScalarEmbedding::geometric(self.embed_dim, self.max_freq)
    }

    fn blocks(&self) -> Blocks {
        let mut off = 0;
        let mut take = |n: usize| {
            let r = off..off + n;
            off += n;
            r
        };
        let (h, k, eh, d) = (self.hidden, self.embed_dim, self.embed_hidden, self.dim);
        let slots = self
            .slots
            .iter()
            .map(|_| SlotBlocks { w1: take(k * eh), b1: take(eh), w2: take(eh * h), b2: take(h) })
            .collect();
        let labels = take((self.num_classes + 1) * h);
        let in_w = take(d * h);
        let in_b = take(h);
        let hidden = (1..self.depth).map(|_| (take(h * h), take(h))).collect();
        let out_w = take(h * d);
        let out_b = take(d);
        Blocks { slots, labels, in_w, in_b, hidden, out_w, out_b, total: off }
    }

    pub fn param_count(&self) -> usize {
        self.blocks().total
    }

    /// Named parameter blocks in flat order, as `(name, range)`.
    pub fn named_blocks(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let b = self.blocks();
        let mut out = Vec::new();
        for (j, s) in b.slots.iter().enumerate() {
            out.push((format!("embed{j}.w1"), s.w1.clone()));
            out.push((format!("embed{j}.b1"), s.b1.clone()));
            out.push((format!("embed{j}.w2"), s.w2.clone()));
            out.push((format!("embed{j}.b2"), s.b2.clone()));
        }
        out.push(("labels".into(), b.labels.clone()));
        out.push(("in.w".into(), b.in_w.clone()));
        out.push(("in.b".into(), b.in_b.clone()));
        for (l, (w, bb)) in b.hidden.iter().enumerate() {
            out.push((format!("hidden{}.w", l + 1), w.clone()));
            out.push((format!("hidden{}.b", l + 1), bb.clone()));
        }
        out.push(("out.w".into(), b.out_w.clone()));
        out.push(("out.b".into(), b.out_b.clone()));
        out
    }
}

type Span = std::ops::Range<usize>;

#[derive(Clone, Debug)]
struct SlotBlocks {
    w1: Span,
    b1: Span,
    w2: Span,
    b2: Span,
}

#[derive(Clone, Debug)]
struct Blocks {
    slots: Vec<SlotBlocks>,
    labels: Span,
    in_w: Span,
    in_b: Span,
    hidden: Vec<(Span, Span)>,
    out_w: Span,
    out_b: Span,
    total: usize,
}

/// Sinusoidal features `[sin(f_i c), cos(f_i c)]` of a scalar `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarEmbedding {
    freqs: Vec<f64>,
}

impl ScalarEmbedding {
    /// `width / 2` frequencies spaced geometrically on `[1, max_freq]`.
    pub fn geometric(width: usize, max_freq: f64) -> Self {
        let m = width / 2;
        let freqs = if m <= 1 {
            vec![1.0; m]
        } else {
            (0..m).map(|i| max_freq.powf(i as f64 / (m - 1) as f64)).collect()
        };
        Self { freqs }
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.freqs
    }

    pub fn width(&self) -> usize {
        2 * self.freqs.len()
    }

    fn features<T: Scalar>(&self, c: &[T]) -> Tensor<T> {
        let m = self.freqs.len();
        let mut data = Vec::with_capacity(c.len() * 2 * m);
        for &ci in c {
            for &f in &self.freqs {
                data.push((T::lit(f) * ci).sin());
            }
            for &f in &self.freqs {
                data.push((T::lit(f) * ci).cos());
            }
        }
        Tensor::from_parts(vec![c.len(), 2 * m], data)
    }

    fn features_dual<T: Scalar>(&self, c: &[T], dc: &[T]) -> DualTensor<T> {
        let m = self.freqs.len();
        let mut tangent = Vec::with_capacity(c.len() * 2 * m);
        for (&ci, &di) in c.iter().zip(dc) {
            for &f in &self.freqs {
                let f = T::lit(f);
                tangent.push(f * (f * ci).cos() * di);
            }
            for &f in &self.freqs {
                let f = T::lit(f);
                tangent.push(-f * (f * ci).sin() * di);
            }
        }
        let primal = self.features(c);
        let tangent = Tensor::from_parts(primal.shape().to_vec(), tangent);
        DualTensor::new(primal, tangent).expect("embedding shapes agree")
    }
}

/// Flat parameter store for a network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    layout: Layout,
    flat: Vec<T>,
}

/// How the output layer is initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputInit {
    /// All-zero output layer, so the initial field is identically zero.
    Zero,
    /// Fan-in scaled like the hidden layers.
    FanIn,
}

impl<T: Scalar> ModelParams<T> {
    pub fn from_flat(layout: Layout, flat: Vec<T>) -> Result<Self> {
        layout.validate()?;
        if flat.len() != layout.param_count() {
            return Err(dim_err(format!(
                "layout needs {} parameters, got {}",
                layout.param_count(),
                flat.len()
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(crate::error::numeric_err("non-finite parameter"));
        }
        Ok(Self { layout, flat })
    }

    /// Fan-in scaled Gaussian init: weights `N(0, 1/fan_in)`, zero biases,
    /// independent class embeddings (including the null row).
    pub fn init<R: Rng + ?Sized>(rng: &mut R, layout: Layout, output: OutputInit) -> Result<Self> {
        layout.validate()?;
        let b = layout.blocks();
        let mut flat = vec![T::zero(); b.total];
        let mut normal = |range: &Span, sd: f64, flat: &mut Vec<T>| {
            for v in &mut flat[range.clone()] {
                let z: f64 = StandardNormal.sample(rng);
                *v = T::lit(sd * z);
            }
        };
        let (h, k, eh, d) = (layout.hidden, layout.embed_dim, layout.embed_hidden, layout.dim);
        for s in &b.slots {
            normal(&s.w1, (1.0 / k as f64).sqrt(), &mut flat);
            normal(&s.w2, (1.0 / eh as f64).sqrt(), &mut flat);
        }
        normal(&b.labels, 0.5, &mut flat);
        normal(&b.in_w, (1.0 / d as f64).sqrt(), &mut flat);
        for (w, _) in &b.hidden {
            normal(w, (1.0 / h as f64).sqrt(), &mut flat);
        }
        if output == OutputInit::FanIn {
            normal(&b.out_w, (1.0 / h as f64).sqrt(), &mut flat);
        }
        Ok(Self { layout, flat })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn flat(&self) -> &[T] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [T] {
        &mut self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    fn check_input(&self, x: &Tensor<T>, slots: &[SlotInput<T>], labels: &[Option<usize>]) -> Result<()> {
        let n = x.rows();
        if x.cols() != self.layout.dim {
            return Err(dim_err(format!("input has {} features, network expects {}", x.cols(), self.layout.dim)));
        }
        if slots.len() != self.layout.slots.len() {
            return Err(dim_err("conditioning slot count"));
        }
        if slots.iter().any(|s| s.value.len() != n) || labels.len() != n {
            return Err(dim_err("conditioning rows"));
        }
        for l in labels.iter().flatten() {
            if *l >= self.layout.num_classes {
                return Err(domain_err(format!("label {l} outside {} classes", self.layout.num_classes)));
            }
        }
        Ok(())
    }

    fn label_row(&self, label: Option<usize>) -> usize {
        label.unwrap_or(self.layout.num_classes)
    }

    /// Raw network pass from explicit slot values.
    pub fn forward_raw(&self, x: &Tensor<T>, slots: &[SlotInput<T>], labels: &[Option<usize>]) -> Result<Tensor<T>> {
        self.check_input(x, slots, labels)?;
        let x = x.as_matrix();
        let out = run::<T, Tensor<T>>(self, &x, slots, labels, &mut None);
        out.ensure_finite("network output")
    }

    /// Raw pass with the tangent of every input propagated.
    pub fn forward_dual_raw(
        &self,
        x: &Tensor<T>,
        dir_x: &Tensor<T>,
        slots: &[SlotInput<T>],
        labels: &[Option<usize>],
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_input(x, slots, labels)?;
        let x = DualTensor::new(x.as_matrix(), dir_x.as_matrix())?;
        let (p, t) = run::<T, DualTensor<T>>(self, &x, slots, labels, &mut None).into_parts();
        Ok((p.ensure_finite("network output")?, t.ensure_finite("network tangent")?))
    }

    /// Raw pass that records the activations needed by [`Self::backward`].
    pub fn forward_taped_raw(
        &self,
        x: &Tensor<T>,
        slots: &[SlotInput<T>],
        labels: &[Option<usize>],
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_input(x, slots, labels)?;
        let x = x.as_matrix();
        let mut saved = Some(Vec::new());
        let out = run::<T, Tensor<T>>(self, &x, slots, labels, &mut saved);
        let cache = ForwardCache {
            x,
            slot_values: slots.iter().map(|s| s.value.clone()).collect(),
            labels: labels.to_vec(),
            saved: saved.unwrap_or_default(),
            output: out.clone(),
        };
        Ok((out.ensure_finite("network output")?, cache))
    }

    /// Reverse sweep: given `∂L/∂output`, returns the flat parameter gradient
    /// and `∂L/∂x`.
    pub fn backward(&self, cache: &ForwardCache<T>, cotangent: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
        let lay = &self.layout;
        if cotangent.rows() != cache.x.rows() || cotangent.cols() != lay.dim {
            return Err(dim_err("cotangent shape"));
        }
        let b = lay.blocks();
        let p = &self.flat;
        let mut g = vec![T::zero(); b.total];
        let (h, d, nslots) = (lay.hidden, lay.dim, lay.slots.len());
        // saved layout: per slot [emb, z1, a1]; then h0, then per hidden layer [act_in, z]; then final act.
        let saved = &cache.saved;
        let base = 3 * nslots;
        let h0 = &saved[base];
        let final_act = &saved[saved.len() - 1];
        let g_out = cotangent.as_matrix();
        final_act.accumulate_outer(&g_out, &mut g[b.out_w.clone()]);
        g_out.accumulate_col_sums(&mut g[b.out_b.clone()]);
        let mut g_act = g_out.matmul_transposed(&p[b.out_w.clone()], h);
        for (l, (w, bias)) in b.hidden.iter().enumerate().rev() {
            let act_in = &saved[base + 1 + 2 * l];
            let z = &saved[base + 2 + 2 * l];
            let g_z = z.zip_map(&g_act, |zi, gi| silu_prime(zi) * gi)?;
            act_in.accumulate_outer(&g_z, &mut g[w.clone()]);
            g_z.accumulate_col_sums(&mut g[bias.clone()]);
            g_act = g_z.matmul_transposed(&p[w.clone()], h);
        }
        let g_h0 = h0.zip_map(&g_act, |zi, gi| silu_prime(zi) * gi)?;
        cache.x.accumulate_outer(&g_h0, &mut g[b.in_w.clone()]);
        g_h0.accumulate_col_sums(&mut g[b.in_b.clone()]);
        let g_x = g_h0.matmul_transposed(&p[b.in_w.clone()], d);
        let labels = b.labels.start;
        for (i, &lbl) in cache.labels.iter().enumerate() {
            let row = labels + self.label_row(lbl) * h;
            for (a, &v) in g[row..row + h].iter_mut().zip(g_h0.row(i)) {
                *a += v;
            }
        }
        for (j, sb) in b.slots.iter().enumerate() {
            let (emb, z1, a1) = (&saved[3 * j], &saved[3 * j + 1], &saved[3 * j + 2]);
            a1.accumulate_outer(&g_h0, &mut g[sb.w2.clone()]);
            g_h0.accumulate_col_sums(&mut g[sb.b2.clone()]);
            let g_a1 = g_h0.matmul_transposed(&p[sb.w2.clone()], lay.embed_hidden);
            let g_z1 = z1.zip_map(&g_a1, |zi, gi| silu_prime(zi) * gi)?;
            emb.accumulate_outer(&g_z1, &mut g[sb.w1.clone()]);
            g_z1.accumulate_col_sums(&mut g[sb.b1.clone()]);
        }
        Ok((g, g_x))
    }

    /// Copies every identically named block of `other` with a matching size.
    pub fn copy_matching_blocks(&mut self, other: &ModelParams<T>) -> Vec<String> {
        let theirs = other.layout.named_blocks();
        let mut copied = Vec::new();
        for (name, range) in self.layout.named_blocks() {
            if let Some((_, r)) = theirs.iter().find(|(n, r)| *n == name && r.len() == range.len()) {
                self.flat[range].copy_from_slice(&other.flat[r.clone()]);
                copied.push(name);
            }
        }
        copied
    }

    /// Output of slot `j`'s embedding branch for a constant scalar input.
    fn slot_branch_constant(&self, j: usize, value: T) -> Vec<T> {
        let b = self.layout.blocks();
        let sb = &b.slots[j];
        let emb = self.layout.embedding().features(&[value]);
        let a1 = emb.affine(&self.flat[sb.w1.clone()], Some(&self.flat[sb.b1.clone()]), self.layout.embed_hidden).map(silu);
        a1.affine(&self.flat[sb.w2.clone()], Some(&self.flat[sb.b2.clone()]), self.layout.hidden).into_data()
    }
}

/// One scalar conditioning input per row, with an optional tangent.
#[derive(Clone, Debug)]
pub struct SlotInput<T> {
    pub value: Vec<T>,
    pub tangent: Option<Vec<T>>,
}

impl<T: Scalar> SlotInput<T> {
    pub fn fixed(value: Vec<T>) -> Self {
        Self { value, tangent: None }
    }
}

/// Activations recorded by a taped forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    x: Tensor<T>,
    slot_values: Vec<Vec<T>>,
    labels: Vec<Option<usize>>,
    saved: Vec<Tensor<T>>,
    output: Tensor<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }

    /// Re-runs the recorded forward pass; the result is bitwise identical to
    /// [`Self::output`] for unchanged parameters.
    pub fn replay(&self, params: &ModelParams<T>) -> Result<Tensor<T>> {
        let slots: Vec<SlotInput<T>> = self.slot_values.iter().cloned().map(SlotInput::fixed).collect();
        params.forward_raw(&self.x, &slots, &self.labels)
    }
}

/// Values flowing through the network: plain tensors or dual tensors.
trait Signal<T: Scalar>: Sized {
    fn lift_input(x: &Self) -> Self;
    fn embed(emb: &ScalarEmbedding, slot: &SlotInput<T>) -> Self;
    fn affine(&self, w: &[T], b: &[T], out: usize) -> Self;
    fn silu(&self) -> Self;
    fn add_assign(&mut self, other: &Self);
    fn add_rows(&mut self, rows: &[&[T]]);
    fn save(&self, saved: &mut Option<Vec<Tensor<T>>>);
}

impl<T: Scalar> Signal<T> for Tensor<T> {
    fn lift_input(x: &Self) -> Self {
        x.clone()
    }
    fn embed(emb: &ScalarEmbedding, slot: &SlotInput<T>) -> Self {
        emb.features(&slot.value)
    }
    fn affine(&self, w: &[T], b: &[T], out: usize) -> Self {
        Tensor::affine(self, w, Some(b), out)
    }
    fn silu(&self) -> Self {
        self.map(silu)
    }
    fn add_assign(&mut self, other: &Self) {
        for (a, &b) in self.data_mut().iter_mut().zip(other.data()) {
            *a += b;
        }
    }
    fn add_rows(&mut self, rows: &[&[T]]) {
        for (i, r) in rows.iter().enumerate() {
            for (a, &b) in self.row_mut(i).iter_mut().zip(r.iter()) {
                *a += b;
            }
        }
    }
    fn save(&self, saved: &mut Option<Vec<Tensor<T>>>) {
        if let Some(s) = saved {
            s.push(self.clone());
        }
    }
}

impl<T: Scalar> Signal<T> for DualTensor<T> {
    fn lift_input(x: &Self) -> Self {
        x.clone()
    }
    fn embed(emb: &ScalarEmbedding, slot: &SlotInput<T>) -> Self {
        match &slot.tangent {
            Some(dc) => emb.features_dual(&slot.value, dc),
            None => DualTensor::constant(emb.features(&slot.value)),
        }
    }
    fn affine(&self, w: &[T], b: &[T], out: usize) -> Self {
        DualTensor::affine(self, w, Some(b), out)
    }
    fn silu(&self) -> Self {
        DualTensor::silu(self)
    }
    fn add_assign(&mut self, other: &Self) {
        *self = self.add(other).expect("dual shapes agree");
    }
    fn add_rows(&mut self, rows: &[&[T]]) {
        let (mut p, t) = self.clone().into_parts();
        p.add_rows(rows);
        *self = DualTensor::new(p, t).expect("dual shapes agree");
    }
    fn save(&self, _saved: &mut Option<Vec<Tensor<T>>>) {}
}

fn run<T: Scalar, V: Signal<T>>(
    params: &ModelParams<T>,
    x: &V,
    slots: &[SlotInput<T>],
    labels: &[Option<usize>],
    saved: &mut Option<Vec<Tensor<T>>>,
) -> V {
    let lay = &params.layout;
    let b = lay.blocks();
    let p = &params.flat;
    let emb = lay.embedding();
    let mut branches = Vec::with_capacity(slots.len());
    for (slot, sb) in slots.iter().zip(&b.slots) {
        let e = V::embed(&emb, slot);
        e.save(saved);
        let z1 = e.affine(&p[sb.w1.clone()], &p[sb.b1.clone()], lay.embed_hidden);
        z1.save(saved);
        let a1 = z1.silu();
        a1.save(saved);
        branches.push(a1.affine(&p[sb.w2.clone()], &p[sb.b2.clone()], lay.hidden));
    }
    let mut h0 = V::lift_input(x).affine(&p[b.in_w.clone()], &p[b.in_b.clone()], lay.hidden);
    for br in &branches {
        h0.add_assign(br);
    }
    let h = lay.hidden;
    let rows: Vec<&[T]> = labels
        .iter()
        .map(|&l| {
            let start = b.labels.start + params.label_row(l) * h;
            &p[start..start + h]
        })
        .collect();
    h0.add_rows(&rows);
    h0.save(saved);
    let mut act = h0.silu();
    for (w, bias) in &b.hidden {
        act.save(saved);
        let z = act.affine(&p[w.clone()], &p[bias.clone()], h);
        z.save(saved);
        act = z.silu();
    }
    act.save(saved);
    act.affine(&p[b.out_w.clone()], &p[b.out_b.clone()], lay.dim)
}

/// Maps `(s, t, ω)` conditioning onto a layout's slots for `F`.
fn average_slots<T: Scalar>(layout: &Layout, cond: &Conditioning<T>, dir_t: Option<&[T]>) -> Result<Vec<SlotInput<T>>> {
    layout
        .slots
        .iter()
        .map(|kind| {
            Ok(match kind {
                SlotKind::Time => SlotInput { value: cond.t.clone(), tangent: dir_t.map(<[T]>::to_vec) },
                SlotKind::Span => SlotInput {
                    value: cond.t.iter().zip(&cond.s).map(|(&t, &s)| t - s).collect(),
                    tangent: dir_t.map(<[T]>::to_vec),
                },
                SlotKind::Omega => {
                    if let Some(w) = cond.omega.iter().find(|w| !(**w >= T::one())) {
                        return Err(domain_err(format!("guidance scale {w} < 1")));
                    }
                    SlotInput::fixed(cond.omega.clone())
                }
                SlotKind::Origin => return Err(Error::Config("origin slot is only valid for the auxiliary network".into())),
            })
        })
        .collect()
}

fn fake_slots<T: Scalar>(layout: &Layout, cond: &AuxConditioning<T>) -> Result<Vec<SlotInput<T>>> {
    layout
        .slots
        .iter()
        .map(|kind| {
            Ok(match kind {
                SlotKind::Time => SlotInput::fixed(cond.noise.clone()),
                SlotKind::Origin => SlotInput::fixed(cond.origin.clone()),
                SlotKind::Span | SlotKind::Omega => {
                    return Err(Error::Config("auxiliary network takes no span or guidance input".into()))
                }
            })
        })
        .collect()
}

/// `F_θ(x_t, s, t | c, ω)` backed by a parameter store.
#[derive(Clone, Copy, Debug)]
pub struct AverageVelocityNet<'a, T> {
    pub params: &'a ModelParams<T>,
}

impl<'a, T: Scalar> AverageVelocityNet<'a, T> {
    pub fn new(params: &'a ModelParams<T>) -> Self {
        Self { params }
    }

    pub fn forward_taped(&self, x: &Tensor<T>, cond: &Conditioning<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        cond.check_rows(x.rows())?;
        let slots = average_slots(&self.params.layout, cond, None)?;
        self.params.forward_taped_raw(x, &slots, &cond.labels)
    }
}

impl<'a, T: Scalar> VelocityField<T> for AverageVelocityNet<'a, T> {
    fn dim(&self) -> usize {
        self.params.layout.dim
    }

    fn eval(&self, x: &Tensor<T>, cond: &Conditioning<T>) -> Result<Tensor<T>> {
        cond.check_rows(x.rows())?;
        let slots = average_slots(&self.params.layout, cond, None)?;
        self.params.forward_raw(x, &slots, &cond.labels)
    }

    fn eval_jvp(
        &self,
        x: &Tensor<T>,
        cond: &Conditioning<T>,
        dir_x: &Tensor<T>,
        dir_t: &[T],
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        cond.check_rows(x.rows())?;
        if dir_t.len() != x.rows() {
            return Err(dim_err("one time tangent per row required"));
        }
        x.as_matrix().check_same_shape(&dir_x.as_matrix(), "jvp direction")?;
        let slots = average_slots(&self.params.layout, cond, Some(dir_t))?;
        self.params.forward_dual_raw(x, dir_x, &slots, &cond.labels)
    }
}

/// `G_ψ(x, t, t′ | c)` backed by a parameter store.
#[derive(Clone, Copy, Debug)]
pub struct FakeVelocityNet<'a, T> {
    pub params: &'a ModelParams<T>,
}

impl<'a, T: Scalar> FakeVelocityNet<'a, T> {
    pub fn new(params: &'a ModelParams<T>) -> Self {
        Self { params }
    }

    pub fn forward_taped(&self, x: &Tensor<T>, cond: &AuxConditioning<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        cond.check_rows(x.rows())?;
        let slots = fake_slots(&self.params.layout, cond)?;
        self.params.forward_taped_raw(x, &slots, &cond.labels)
    }
}

impl<'a, T: Scalar> FakeVelocityField<T> for FakeVelocityNet<'a, T> {
    fn eval(&self, x: &Tensor<T>, cond: &AuxConditioning<T>) -> Result<Tensor<T>> {
        cond.check_rows(x.rows())?;
        let slots = fake_slots(&self.params.layout, cond)?;
        self.params.forward_raw(x, &slots, &cond.labels)
    }
}

/// Single-point convenience for `F(x_t, s, t | label, ω)`.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    x_t: &Tensor<T>,
    s: T,
    t: T,
    label: Option<usize>,
    omega: T,
) -> Result<Tensor<T>> {
    let x = x_t.as_matrix();
    let out = AverageVelocityNet::new(params).eval(&x, &Conditioning::uniform(x.rows(), s, t, label, omega))?;
    out.reshape(x_t.shape().to_vec())
}

/// Single-point convenience returning `(F, ∇ₓF·dir_x + ∂ₜF·dir_t)`.
#[allow(clippy::too_many_arguments)]
pub fn forward_jvp<T: Scalar>(
    params: &ModelParams<T>,
    x_t: &Tensor<T>,
    s: T,
    t: T,
    label: Option<usize>,
    omega: T,
    dir_x: &Tensor<T>,
    dir_t: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let x = x_t.as_matrix();
    let cond = Conditioning::uniform(x.rows(), s, t, label, omega);
    let (v, d) = AverageVelocityNet::new(params).eval_jvp(&x, &cond, &dir_x.as_matrix(), &vec![dir_t; x.rows()])?;
    Ok((v.reshape(x_t.shape().to_vec())?, d.reshape(x_t.shape().to_vec())?))
}

/// Builds `G`'s initial parameters from `F` so that, at initialisation,
/// `G(x, t, t′ | c) = F(x, t′, t′ | c, ω = 1)` for every `t`.
///
/// Shared blocks are copied; `F`'s span and guidance branches, evaluated at
/// their constant values `t − s = 0` and `ω = 1`, are folded into the input
/// bias; the origin branch gets a fresh embedding whose last projection is
/// zero so it contributes nothing until trained.
pub fn warm_start_fake<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    f: &ModelParams<T>,
    g_layout: Layout,
) -> Result<ModelParams<T>> {
    let mut g = ModelParams::<T>::init(rng, g_layout, OutputInit::Zero)?;
    let f_lay = &f.layout;
    let g_lay = g.layout.clone();
    if f_lay.dim != g_lay.dim || f_lay.hidden != g_lay.hidden || f_lay.depth != g_lay.depth || f_lay.num_classes != g_lay.num_classes {
        return Err(Error::Config("warm start needs matching trunk sizes".into()));
    }
    let fb = f_lay.blocks();
    let gb = g_lay.blocks();
    let copy = |g: &mut Vec<T>, dst: &Span, src: &Span| g[dst.clone()].copy_from_slice(&f.flat[src.clone()]);
    copy(&mut g.flat, &gb.labels, &fb.labels);
    copy(&mut g.flat, &gb.in_w, &fb.in_w);
    copy(&mut g.flat, &gb.in_b, &fb.in_b);
    for ((gw, gbias), (fw, fbias)) in gb.hidden.iter().zip(&fb.hidden) {
        copy(&mut g.flat, gw, fw);
        copy(&mut g.flat, gbias, fbias);
    }
    copy(&mut g.flat, &gb.out_w, &fb.out_w);
    copy(&mut g.flat, &gb.out_b, &fb.out_b);
    for (jg, kind) in g_lay.slots.iter().enumerate() {
        match kind {
            SlotKind::Time => {
                if let Some(jf) = f_lay.slots.iter().position(|k| *k == SlotKind::Time) {
                    let (s_g, s_f) = (&gb.slots[jg], &fb.slots[jf]);
                    if f_lay.embed_dim == g_lay.embed_dim && f_lay.embed_hidden == g_lay.embed_hidden {
                        copy(&mut g.flat, &s_g.w1, &s_f.w1);
                        copy(&mut g.flat, &s_g.b1, &s_f.b1);
                        copy(&mut g.flat, &s_g.w2, &s_f.w2);
                        copy(&mut g.flat, &s_g.b2, &s_f.b2);
                    }
                }
            }
            _ => {
                let sb = &gb.slots[jg];
                g.flat[sb.w2.clone()].iter_mut().for_each(|v| *v = T::zero());
                g.flat[sb.b2.clone()].iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
    for (jf, kind) in f_lay.slots.iter().enumerate() {
        let constant = match kind {
            SlotKind::Span => T::zero(),
            SlotKind::Omega => T::one(),
            _ => continue,
        };
        let contrib = f.slot_branch_constant(jf, constant);
        for (a, c) in g.flat[gb.in_b.clone()].iter_mut().zip(contrib) {
            *a += c;
        }
    }
    Ok(g)
}

/// Exponential moving average of a parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaShadow<T> {
    pub flat: Vec<T>,
    pub decay: T,
}

impl<T: Scalar> EmaShadow<T> {
    pub fn new(params: &ModelParams<T>, decay: T) -> Result<Self> {
        if !(decay >= T::zero() && decay <= T::one()) {
            return Err(domain_err(format!("EMA decay {decay} outside [0, 1]")));
        }
        Ok(Self { flat: params.flat.clone(), decay })
    }

    pub fn from_parts(flat: Vec<T>, decay: T) -> Self {
        Self { flat, decay }
    }

    /// `shadow ← decay·shadow + (1 − decay)·params`.
    pub fn update(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.flat.len() {
            return Err(dim_err(format!("EMA tracks {} values, got {}", self.flat.len(), params.len())));
        }
        let keep = self.decay;
        let mix = T::one() - keep;
        for (s, &p) in self.flat.iter_mut().zip(params) {
            *s = keep * *s + mix * p;
        }
        Ok(())
    }

    /// The shadow as a standalone parameter store.
    pub fn to_params(&self, layout: &Layout) -> Result<ModelParams<T>> {
        ModelParams::from_flat(layout.clone(), self.flat.clone())
    }
}

pub fn ema_update<T: Scalar>(shadow: &mut EmaShadow<T>, params: &ModelParams<T>) -> Result<()> {
    shadow.update(&params.flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_layout(classes: usize) -> Layout {
        Layout::average_velocity(2, classes, &ArchConfig { hidden: 16, depth: 2, embed_dim: 8, embed_hidden: 8, max_freq: 8.0 })
    }

    #[test]
    fn zero_output_layer_gives_zero_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ModelParams::<f64>::init(&mut rng, small_layout(3), OutputInit::Zero).unwrap();
        let x = Tensor::vector(vec![0.4, -1.0]).unwrap();
        let y = forward(&p, &x, 0.2, 0.7, Some(1), 2.0).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = ModelParams::<f64>::init(&mut ChaCha8Rng::seed_from_u64(9), small_layout(0), OutputInit::FanIn).unwrap();
        let b = ModelParams::<f64>::init(&mut ChaCha8Rng::seed_from_u64(9), small_layout(0), OutputInit::FanIn).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ModelParams::<f64>::init(&mut rng, small_layout(2), OutputInit::FanIn).unwrap();
        let x = Tensor::vector(vec![0.4, -1.0, 3.0]).unwrap();
        assert!(matches!(forward(&p, &x, 0.2, 0.7, None, 1.0), Err(Error::Dimension(_))));
        let x = Tensor::vector(vec![0.4, -1.0]).unwrap();
        assert!(matches!(forward(&p, &x, 0.8, 0.7, None, 1.0), Err(Error::Domain(_))));
        assert!(matches!(forward(&p, &x, 0.2, 0.7, Some(5), 1.0), Err(Error::Domain(_))));
        assert!(matches!(forward(&p, &x, 0.2, 0.7, None, 0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn embedding_frequencies_increase() {
        let e = ScalarEmbedding::geometric(16, 32.0);
        assert_eq!(e.width(), 16);
        assert!(e.frequencies().windows(2).all(|w| w[0] < w[1]));
        assert!((e.frequencies()[7] - 32.0).abs() < 1e-12);
    }

    #[test]
    fn ema_edge_decays() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ModelParams::<f64>::init(&mut rng, small_layout(0), OutputInit::FanIn).unwrap();
        let mut s = EmaShadow::from_parts(vec![0.0; p.len()], 0.0);
        ema_update(&mut s, &p).unwrap();
        assert_eq!(s.flat, p.flat());
        let mut s = EmaShadow::from_parts(vec![0.5; p.len()], 1.0);
        ema_update(&mut s, &p).unwrap();
        assert!(s.flat.iter().all(|v| *v == 0.5));
        assert!(s.update(&[1.0]).is_err());
    }

    #[test]
    fn warm_start_reproduces_the_instantaneous_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let arch = ArchConfig { hidden: 16, depth: 3, embed_dim: 8, embed_hidden: 8, max_freq: 8.0 };
        let f = ModelParams::<f64>::init(&mut rng, Layout::average_velocity(2, 2, &arch), OutputInit::FanIn).unwrap();
        let g = warm_start_fake(&mut rng, &f, Layout::fake_velocity(2, 2, &arch)).unwrap();
        let x = Tensor::from_rows(&[vec![0.3, -0.2], vec![1.5, 0.7], vec![-0.4, 0.1]]).unwrap();
        let noise = vec![0.2, 0.5, 0.9];
        let labels = vec![Some(0), None, Some(1)];
        let gv = FakeVelocityNet::new(&g)
            .eval(&x, &AuxConditioning { origin: vec![0.9, 0.1, 0.4], noise: noise.clone(), labels: labels.clone() })
            .unwrap();
        let cond = Conditioning { s: noise.clone(), t: noise, labels, omega: vec![1.0; 3] };
        let fv = AverageVelocityNet::new(&f).eval(&x, &cond).unwrap();
        for (a, b) in gv.data().iter().zip(fv.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

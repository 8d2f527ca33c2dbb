use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::mlp::{lit, Activation, Mlp, Scalar};
use super::AggregationError;
use crate::geometry::N_CONDITIONS;
use crate::mapping::{MappingEntry, MultiViewMapping};

/// Points per work unit; fixed so that gradient sums do not depend on the
/// thread count.
const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationParams<T> {
    /// Image feature encoder, `C -> C -> C`.
    pub phi0: Mlp<T>,
    /// Condition encoder, `D -> M -> M`.
    pub phi1: Mlp<T>,
    /// Encoder of the channelwise max over a point's views, `M -> M -> M`.
    pub phi2: Mlp<T>,
    /// Score head on `[z, phi2(max z)]`, `2M -> M -> K`.
    pub phi3: Mlp<T>,
    pub alpha: Vec<T>,
    pub beta: Vec<T>,
}

pub const TENSOR_NAMES: [&str; 18] = [
    "phi0.l1.weight",
    "phi0.l1.bias",
    "phi0.l2.weight",
    "phi0.l2.bias",
    "phi1.l1.weight",
    "phi1.l1.bias",
    "phi1.l2.weight",
    "phi1.l2.bias",
    "phi2.l1.weight",
    "phi2.l1.bias",
    "phi2.l2.weight",
    "phi2.l2.bias",
    "phi3.l1.weight",
    "phi3.l1.bias",
    "phi3.l2.weight",
    "phi3.l2.bias",
    "alpha",
    "beta",
];

/// Seeded parameters with the default leaky-rectifier activation.
pub fn init_params<T: Scalar>(
    c: usize,
    k: usize,
    m: usize,
    seed: u64,
) -> Result<AggregationParams<T>, AggregationError> {
    init_params_with(c, k, m, seed, Activation::default())
}

pub fn init_params_with<T: Scalar>(
    c: usize,
    k: usize,
    m: usize,
    seed: u64,
    activation: Activation,
) -> Result<AggregationParams<T>, AggregationError> {
    if c == 0 || k == 0 || m == 0 || c % k != 0 {
        return Err(AggregationError::BadDims { c, k, m });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = N_CONDITIONS;
    Ok(AggregationParams {
        phi0: Mlp::random(c, c, c, activation, &mut rng),
        phi1: Mlp::random(d, m, m, activation, &mut rng),
        phi2: Mlp::random(m, m, m, activation, &mut rng),
        phi3: Mlp::random(2 * m, m, k, activation, &mut rng),
        alpha: vec![T::one(); k],
        beta: vec![T::zero(); k],
    })
}

impl<T: Scalar> AggregationParams<T> {
    pub fn c(&self) -> usize {
        self.phi0.inp()
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    pub fn m(&self) -> usize {
        self.phi1.out()
    }

    pub fn d(&self) -> usize {
        self.phi1.inp()
    }

    pub fn block(&self) -> usize {
        self.c() / self.k()
    }

    pub fn validate(&self) -> Result<(), AggregationError> {
        let (c, k, m, d) = (self.c(), self.k(), self.m(), self.d());
        let bad = || AggregationError::BadDims { c, k, m };
        if k == 0 || c % k != 0 || self.beta.len() != k {
            return Err(bad());
        }
        let chain = [
            (&self.phi0, c, c),
            (&self.phi1, d, m),
            (&self.phi2, m, m),
            (&self.phi3, 2 * m, k),
        ];
        for (mlp, inp, out) in chain {
            if mlp.inp() != inp
                || mlp.out() != out
                || mlp.l2.inp != mlp.hidden()
                || mlp.l1.weight.len() != mlp.l1.inp * mlp.l1.out
                || mlp.l2.weight.len() != mlp.l2.inp * mlp.l2.out
                || mlp.l1.bias.len() != mlp.l1.out
                || mlp.l2.bias.len() != mlp.l2.out
            {
                return Err(bad());
            }
        }
        if self.tensors().iter().any(|t| t.iter().any(|x| !x.is_finite())) {
            return Err(AggregationError::NonFinite);
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            phi0: self.phi0.zeros_like(),
            phi1: self.phi1.zeros_like(),
            phi2: self.phi2.zeros_like(),
            phi3: self.phi3.zeros_like(),
            alpha: vec![T::zero(); self.k()],
            beta: vec![T::zero(); self.k()],
        }
    }

    /// Tensors in [`TENSOR_NAMES`] order.
    pub fn tensors(&self) -> Vec<&Vec<T>> {
        let mut out = Vec::with_capacity(18);
        for mlp in [&self.phi0, &self.phi1, &self.phi2, &self.phi3] {
            out.extend(mlp.tensors());
        }
        out.push(&self.alpha);
        out.push(&self.beta);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::with_capacity(18);
        for mlp in [&mut self.phi0, &mut self.phi1, &mut self.phi2, &mut self.phi3] {
            out.extend(mlp.tensors_mut());
        }
        out.push(&mut self.alpha);
        out.push(&mut self.beta);
        out
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(18);
        for mlp in [&self.phi0, &self.phi1, &self.phi2, &self.phi3] {
            out.extend(mlp.shapes());
        }
        out.push(vec![self.k()]);
        out.push(vec![self.k()]);
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn activation(&self) -> Activation {
        self.phi0.activation
    }

    pub fn set_activation(&mut self, activation: Activation) {
        for mlp in [&mut self.phi0, &mut self.phi1, &mut self.phi2, &mut self.phi3] {
            mlp.activation = activation;
        }
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x = *x + scale * *y;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> AggregationParams<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::from(*x).expect("castable")).collect();
        AggregationParams {
            phi0: self.phi0.cast(),
            phi1: self.phi1.cast(),
            phi2: self.phi2.cast(),
            phi3: self.phi3.cast(),
            alpha: c(&self.alpha),
            beta: c(&self.beta),
        }
    }
}

/// Per-point view slices of sampled image features (width `C`) and viewing
/// conditions (width `D`).
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBatch<T> {
    c: usize,
    d: usize,
    offsets: Vec<usize>,
    image_ids: Vec<u32>,
    features: Vec<T>,
    conditions: Vec<T>,
}

impl<T: Scalar> ViewBatch<T> {
    pub fn new(
        c: usize,
        d: usize,
        offsets: Vec<usize>,
        image_ids: Vec<u32>,
        features: Vec<T>,
        conditions: Vec<T>,
    ) -> Result<Self, AggregationError> {
        let e = image_ids.len();
        if offsets.first() != Some(&0)
            || offsets.last() != Some(&e)
            || offsets.windows(2).any(|w| w[0] > w[1])
        {
            return Err(AggregationError::ShapeMismatch("offsets".into()));
        }
        if features.len() != e * c {
            return Err(AggregationError::WidthMismatch {
                expected: c,
                found: features.len() / e.max(1),
            });
        }
        if conditions.len() != e * d {
            return Err(AggregationError::WidthMismatch {
                expected: d,
                found: conditions.len() / e.max(1),
            });
        }
        for (p, w) in offsets.windows(2).enumerate() {
            let mut seen = HashSet::new();
            for &id in &image_ids[w[0]..w[1]] {
                if !seen.insert(id) {
                    return Err(AggregationError::DuplicateView { point: p, image_id: id });
                }
            }
        }
        Ok(Self {
            c,
            d,
            offsets,
            image_ids,
            features,
            conditions,
        })
    }

    /// Batch over the entries of `mapping` (optionally restricted to
    /// `images`), with `feature` writing each entry's `C`-wide image feature.
    pub fn from_mapping(
        mapping: &MultiViewMapping,
        c: usize,
        images: Option<&HashSet<u32>>,
        mut feature: impl FnMut(u32, &MappingEntry, &mut [T]),
    ) -> Self {
        let mut offsets = vec![0];
        let mut image_ids = Vec::new();
        let mut features = Vec::new();
        let mut conditions = Vec::new();
        let mut buf = vec![T::zero(); c];
        for p in 0..mapping.n_points() {
            for e in mapping.views_of(p).expect("in range") {
                if images.is_some_and(|s| !s.contains(&e.image_id)) {
                    continue;
                }
                image_ids.push(e.image_id);
                buf.iter_mut().for_each(|x| *x = T::zero());
                feature(p as u32, e, &mut buf);
                features.extend_from_slice(&buf);
                conditions.extend(e.conditions.iter().map(|&x| lit::<T>(x as f64)));
            }
            offsets.push(image_ids.len());
        }
        Self {
            c,
            d: N_CONDITIONS,
            offsets,
            image_ids,
            features,
            conditions,
        }
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_points(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_entries(&self) -> usize {
        self.image_ids.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn views(&self, p: usize) -> std::ops::Range<usize> {
        self.offsets[p]..self.offsets[p + 1]
    }

    pub fn image_ids(&self) -> &[u32] {
        &self.image_ids
    }

    pub fn features(&self) -> &[T] {
        &self.features
    }

    pub fn conditions(&self) -> &[T] {
        &self.conditions
    }

    pub fn features_mut(&mut self) -> &mut [T] {
        &mut self.features
    }

    pub fn conditions_mut(&mut self) -> &mut [T] {
        &mut self.conditions
    }

    pub fn feature(&self, e: usize) -> &[T] {
        &self.features[e * self.c..(e + 1) * self.c]
    }

    pub fn condition(&self, e: usize) -> &[T] {
        &self.conditions[e * self.d..(e + 1) * self.d]
    }

    pub fn cast<U: Scalar>(&self) -> ViewBatch<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::from(*x).expect("castable")).collect();
        ViewBatch {
            c: self.c,
            d: self.d,
            offsets: self.offsets.clone(),
            image_ids: self.image_ids.clone(),
            features: c(&self.features),
            conditions: c(&self.conditions),
        }
    }

    fn check(&self, params: &AggregationParams<T>) -> Result<(), AggregationError> {
        if self.c != params.c() {
            return Err(AggregationError::WidthMismatch {
                expected: params.c(),
                found: self.c,
            });
        }
        if self.d != params.d() {
            return Err(AggregationError::WidthMismatch {
                expected: params.d(),
                found: self.d,
            });
        }
        Ok(())
    }
}

/// Pooled per-point features with the attention and gates that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeatures<T> {
    pub c: usize,
    pub k: usize,
    /// `N x C`.
    pub pooled: Vec<T>,
    pub seen: Vec<bool>,
    /// Per-view quality scores, `E x K`, batch entry order.
    pub scores: Vec<T>,
    /// Per-view attention, `E x K`, batch entry order.
    pub attention: Vec<T>,
    /// `N x K`; zero for unseen points.
    pub gates: Vec<T>,
}

impl<T: Scalar> PooledFeatures<T> {
    pub fn n_points(&self) -> usize {
        self.seen.len()
    }

    pub fn point(&self, p: usize) -> &[T] {
        &self.pooled[p * self.c..(p + 1) * self.c]
    }
}

/// Forward intermediates of one point; per-view arrays follow the batch's
/// entry order, `order` lists local view indices by ascending image id.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PointCache<T> {
    pub order: Vec<usize>,
    pub h0: Vec<T>,
    pub ft: Vec<T>,
    pub h1: Vec<T>,
    pub z: Vec<T>,
    pub zmax: Vec<T>,
    /// Local view index attaining each channel of `zmax`.
    pub zarg: Vec<usize>,
    pub h2: Vec<T>,
    pub w: Vec<T>,
    pub h3: Vec<T>,
    pub x: Vec<T>,
    pub a: Vec<T>,
    /// Gate pre-activation `alpha * max x + beta`, per block.
    pub u: Vec<T>,
    /// Local view index attaining `max x` per block.
    pub xarg: Vec<usize>,
    pub g: Vec<T>,
    /// Attention-weighted feature sums before gating, `C`.
    pub s: Vec<T>,
}

/// Retained forward state needed by the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Intermediates<T> {
    n_entries: usize,
    pub(crate) points: Vec<PointCache<T>>,
}

impl<T: Scalar> Intermediates<T> {
    /// A cache that retains nothing; backward refuses it.
    pub fn empty() -> Self {
        Self {
            n_entries: 0,
            points: Vec::new(),
        }
    }
}

impl<T: Scalar> Intermediates<T> {
    /// Which side of every non-smooth point the forward pass took: hidden
    /// activation signs (when the activation has a kink), the argmax views of
    /// the channelwise and gate maxima, and whether each gate is open. Equal
    /// signatures mean two evaluations lie on the same smooth branch.
    pub(crate) fn branch_signature(&self, kinked_activation: bool) -> Vec<u32> {
        let mut sig = Vec::new();
        let sign = |v: &[T], sig: &mut Vec<u32>| sig.extend(v.iter().map(|&x| (x > T::zero()) as u32));
        for pc in &self.points {
            if kinked_activation {
                sign(&pc.h0, &mut sig);
                sign(&pc.h1, &mut sig);
                sign(&pc.h2, &mut sig);
                sign(&pc.h3, &mut sig);
            }
            sig.extend(pc.zarg.iter().map(|&i| i as u32));
            sig.extend(pc.xarg.iter().map(|&i| i as u32));
            sign(&pc.u, &mut sig);
        }
        sig
    }
}

fn sorted_order(ids: &[u32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| ids[i]);
    order
}

pub(crate) fn point_forward<T: Scalar>(
    params: &AggregationParams<T>,
    batch: &ViewBatch<T>,
    p: usize,
) -> PointCache<T> {
    let (c, k, m, d) = (params.c(), params.k(), params.m(), params.d());
    let r = batch.views(p);
    let n = r.len();
    let order = sorted_order(&batch.image_ids[r.clone()]);
    let mut pc = PointCache {
        order,
        h0: vec![T::zero(); n * c],
        ft: vec![T::zero(); n * c],
        h1: vec![T::zero(); n * m],
        z: vec![T::zero(); n * m],
        zmax: vec![T::zero(); m],
        zarg: vec![0; m],
        h2: vec![T::zero(); m],
        w: vec![T::zero(); m],
        h3: vec![T::zero(); n * m],
        x: vec![T::zero(); n * k],
        a: vec![T::zero(); n * k],
        u: vec![T::zero(); k],
        xarg: vec![0; k],
        g: vec![T::zero(); k],
        s: vec![T::zero(); c],
    };
    if n == 0 {
        return pc;
    }
    for (i, e) in r.clone().enumerate() {
        params.phi0.forward(
            batch.feature(e),
            &mut pc.h0[i * c..(i + 1) * c],
            &mut pc.ft[i * c..(i + 1) * c],
        );
        params.phi1.forward(
            &batch.conditions[e * d..(e + 1) * d],
            &mut pc.h1[i * m..(i + 1) * m],
            &mut pc.z[i * m..(i + 1) * m],
        );
    }
    for ch in 0..m {
        let mut best = pc.order[0];
        for &i in &pc.order[1..] {
            if pc.z[i * m + ch] > pc.z[best * m + ch] {
                best = i;
            }
        }
        pc.zarg[ch] = best;
        pc.zmax[ch] = pc.z[best * m + ch];
    }
    params.phi2.forward(&pc.zmax, &mut pc.h2, &mut pc.w);
    let mut zw = vec![T::zero(); 2 * m];
    for i in 0..n {
        zw[..m].copy_from_slice(&pc.z[i * m..(i + 1) * m]);
        zw[m..].copy_from_slice(&pc.w);
        params
            .phi3
            .forward(&zw, &mut pc.h3[i * m..(i + 1) * m], &mut pc.x[i * k..(i + 1) * k]);
    }
    let scale = T::one() / lit::<T>(n as f64).sqrt();
    let b = c / k;
    for kk in 0..k {
        let mut best = pc.order[0];
        for &i in &pc.order[1..] {
            if pc.x[i * k + kk] > pc.x[best * k + kk] {
                best = i;
            }
        }
        pc.xarg[kk] = best;
        let top = pc.x[best * k + kk] * scale;
        let mut total = T::zero();
        for &i in &pc.order {
            let e = (pc.x[i * k + kk] * scale - top).exp();
            pc.a[i * k + kk] = e;
            total = total + e;
        }
        for &i in &pc.order {
            pc.a[i * k + kk] = pc.a[i * k + kk] / total;
        }
        let u = params.alpha[kk] * pc.x[best * k + kk] + params.beta[kk];
        let t = u.tanh();
        pc.u[kk] = u;
        pc.g[kk] = if t > T::zero() { t } else { T::zero() };
        for ch in kk * b..(kk + 1) * b {
            let mut acc = T::zero();
            for &i in &pc.order {
                acc = acc + pc.a[i * k + kk] * pc.ft[i * c + ch];
            }
            pc.s[ch] = acc;
        }
    }
    pc
}

fn collect<T: Scalar>(
    params: &AggregationParams<T>,
    batch: &ViewBatch<T>,
    points: &[PointCache<T>],
) -> PooledFeatures<T> {
    let (c, k) = (params.c(), params.k());
    let n = batch.n_points();
    let e = batch.n_entries();
    let mut out = PooledFeatures {
        c,
        k,
        pooled: vec![T::zero(); n * c],
        seen: vec![false; n],
        scores: Vec::with_capacity(e * k),
        attention: Vec::with_capacity(e * k),
        gates: vec![T::zero(); n * k],
    };
    let b = c / k;
    for (p, pc) in points.iter().enumerate() {
        out.scores.extend_from_slice(&pc.x);
        out.attention.extend_from_slice(&pc.a);
        if pc.order.is_empty() {
            continue;
        }
        out.seen[p] = true;
        out.gates[p * k..(p + 1) * k].copy_from_slice(&pc.g);
        for ch in 0..c {
            out.pooled[p * c + ch] = pc.g[ch / b] * pc.s[ch];
        }
    }
    out
}

fn run_points<T: Scalar>(params: &AggregationParams<T>, batch: &ViewBatch<T>) -> Vec<PointCache<T>> {
    (0..batch.n_points())
        .into_par_iter()
        .with_min_len(CHUNK)
        .map(|p| point_forward(params, batch, p))
        .collect()
}

/// Pooled features of every point.
pub fn forward<T: Scalar>(
    batch: &ViewBatch<T>,
    params: &AggregationParams<T>,
) -> Result<PooledFeatures<T>, AggregationError> {
    forward_train(batch, params).map(|(out, _)| out)
}

/// Forward pass that also returns the intermediates for [`backward`].
pub fn forward_train<T: Scalar>(
    batch: &ViewBatch<T>,
    params: &AggregationParams<T>,
) -> Result<(PooledFeatures<T>, Intermediates<T>), AggregationError> {
    batch.check(params)?;
    let points = run_points(params, batch);
    let out = collect(params, batch, &points);
    Ok((
        out,
        Intermediates {
            n_entries: batch.n_entries(),
            points,
        },
    ))
}

/// Per-view encoded image features (`E x C`).
pub fn view_encode<T: Scalar>(
    batch: &ViewBatch<T>,
    params: &AggregationParams<T>,
) -> Result<Vec<T>, AggregationError> {
    batch.check(params)?;
    let c = params.c();
    let mut out = vec![T::zero(); batch.n_entries() * c];
    let mut h = vec![T::zero(); c];
    for e in 0..batch.n_entries() {
        params
            .phi0
            .forward(batch.feature(e), &mut h, &mut out[e * c..(e + 1) * c]);
    }
    Ok(out)
}

/// Per-view quality scores (`E x K`).
pub fn quality_scores<T: Scalar>(
    batch: &ViewBatch<T>,
    params: &AggregationParams<T>,
) -> Result<Vec<T>, AggregationError> {
    forward(batch, params).map(|f| f.scores)
}

/// Scaled softmax of one point's scores (`n x K`, row per view) per block.
pub fn attention<T: Scalar>(x: &[T], k: usize) -> Vec<T> {
    let n = x.len() / k;
    let mut a = vec![T::zero(); x.len()];
    if n == 0 {
        return a;
    }
    let scale = T::one() / lit::<T>(n as f64).sqrt();
    for kk in 0..k {
        let top = (0..n).map(|i| x[i * k + kk]).fold(T::neg_infinity(), T::max) * scale;
        let mut total = T::zero();
        for i in 0..n {
            a[i * k + kk] = (x[i * k + kk] * scale - top).exp();
            total = total + a[i * k + kk];
        }
        for i in 0..n {
            a[i * k + kk] = a[i * k + kk] / total;
        }
    }
    a
}

/// `relu(tanh(alpha * max_i x + beta))` per block for one point.
pub fn gating<T: Scalar>(x: &[T], alpha: &[T], beta: &[T]) -> Vec<T> {
    let k = alpha.len();
    let n = x.len() / k;
    (0..k)
        .map(|kk| {
            let top = (0..n).map(|i| x[i * k + kk]).fold(T::neg_infinity(), T::max);
            let t = (alpha[kk] * top + beta[kk]).tanh();
            if t > T::zero() {
                t
            } else {
                T::zero()
            }
        })
        .collect()
}

/// Gated attentive pooling of one point's encoded view features (`n x C`).
pub fn pool<T: Scalar>(ft: &[T], a: &[T], g: &[T]) -> Result<Vec<T>, AggregationError> {
    let k = g.len();
    if k == 0 || a.len() % k != 0 {
        return Err(AggregationError::ShapeMismatch("attention".into()));
    }
    let n = a.len() / k;
    if n == 0 {
        return Ok(Vec::new());
    }
    if ft.len() % n != 0 || (ft.len() / n) % k != 0 {
        return Err(AggregationError::ShapeMismatch("features".into()));
    }
    let c = ft.len() / n;
    let b = c / k;
    Ok((0..c)
        .map(|ch| {
            let kk = ch / b;
            let s: T = (0..n).map(|i| a[i * k + kk] * ft[i * c + ch]).sum();
            g[kk] * s
        })
        .collect())
}

/// Reverse-mode gradients of `sum(upstream * pooled)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub params: AggregationParams<T>,
    /// `E x C`, batch entry order.
    pub features: Vec<T>,
    /// `E x D`, batch entry order.
    pub conditions: Vec<T>,
}

fn point_backward<T: Scalar>(
    params: &AggregationParams<T>,
    batch: &ViewBatch<T>,
    p: usize,
    pc: &PointCache<T>,
    dp: &[T],
    grad: &mut AggregationParams<T>,
    dfeat: &mut [T],
    dcond: &mut [T],
) {
    let n = pc.order.len();
    if n == 0 {
        return;
    }
    let (c, k, m, d) = (params.c(), params.k(), params.m(), params.d());
    let b = c / k;
    let base = batch.offsets[p];
    let scale = T::one() / lit::<T>(n as f64).sqrt();

    let mut dft = vec![T::zero(); n * c];
    let mut dx = vec![T::zero(); n * k];
    for kk in 0..k {
        let blk = kk * b..(kk + 1) * b;
        let dg: T = blk.clone().map(|ch| dp[ch] * pc.s[ch]).sum();
        let mut da = vec![T::zero(); n];
        for &i in &pc.order {
            let aik = pc.a[i * k + kk];
            let mut acc = T::zero();
            for ch in blk.clone() {
                dft[i * c + ch] = pc.g[kk] * aik * dp[ch];
                acc = acc + dp[ch] * pc.ft[i * c + ch];
            }
            da[i] = pc.g[kk] * acc;
        }
        let dot: T = pc.order.iter().map(|&i| pc.a[i * k + kk] * da[i]).sum();
        for &i in &pc.order {
            let dy = pc.a[i * k + kk] * (da[i] - dot);
            dx[i * k + kk] = dx[i * k + kk] + dy * scale;
        }
        let t = pc.u[kk].tanh();
        let du = if pc.u[kk] > T::zero() {
            dg * (T::one() - t * t)
        } else {
            T::zero()
        };
        let j = pc.xarg[kk];
        grad.alpha[kk] = grad.alpha[kk] + du * pc.x[j * k + kk];
        grad.beta[kk] = grad.beta[kk] + du;
        dx[j * k + kk] = dx[j * k + kk] + du * params.alpha[kk];
    }

    let mut dz = vec![T::zero(); n * m];
    let mut dw = vec![T::zero(); m];
    let mut zw = vec![T::zero(); 2 * m];
    let mut dzw = vec![T::zero(); 2 * m];
    for &i in &pc.order {
        zw[..m].copy_from_slice(&pc.z[i * m..(i + 1) * m]);
        zw[m..].copy_from_slice(&pc.w);
        dzw.iter_mut().for_each(|v| *v = T::zero());
        params.phi3.backward(
            &zw,
            &pc.h3[i * m..(i + 1) * m],
            &dx[i * k..(i + 1) * k],
            &mut grad.phi3,
            Some(&mut dzw),
        );
        for ch in 0..m {
            dz[i * m + ch] = dz[i * m + ch] + dzw[ch];
            dw[ch] = dw[ch] + dzw[m + ch];
        }
    }
    let mut dzmax = vec![T::zero(); m];
    params
        .phi2
        .backward(&pc.zmax, &pc.h2, &dw, &mut grad.phi2, Some(&mut dzmax));
    for ch in 0..m {
        let i = pc.zarg[ch];
        dz[i * m + ch] = dz[i * m + ch] + dzmax[ch];
    }
    for &i in &pc.order {
        let e = base + i;
        params.phi1.backward(
            batch.condition(e),
            &pc.h1[i * m..(i + 1) * m],
            &dz[i * m..(i + 1) * m],
            &mut grad.phi1,
            Some(&mut dcond[i * d..(i + 1) * d]),
        );
        params.phi0.backward(
            batch.feature(e),
            &pc.h0[i * c..(i + 1) * c],
            &dft[i * c..(i + 1) * c],
            &mut grad.phi0,
            Some(&mut dfeat[i * c..(i + 1) * c]),
        );
    }
}

/// Analytic gradients of `sum(upstream * pooled)` with respect to the
/// parameters, the image features and the viewing conditions.
pub fn backward<T: Scalar>(
    batch: &ViewBatch<T>,
    params: &AggregationParams<T>,
    cache: &Intermediates<T>,
    upstream: &[T],
) -> Result<Gradients<T>, AggregationError> {
    batch.check(params)?;
    let (n, c, d) = (batch.n_points(), params.c(), params.d());
    if cache.points.len() != n || cache.n_entries != batch.n_entries() {
        return Err(AggregationError::MissingIntermediates);
    }
    if upstream.len() != n * c {
        return Err(AggregationError::ShapeMismatch(format!(
            "upstream gradient has {} values, expected {}",
            upstream.len(),
            n * c
        )));
    }
    let chunks: Vec<(AggregationParams<T>, Vec<T>, Vec<T>)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let points = chunk * CHUNK..((chunk + 1) * CHUNK).min(n);
            let lo = batch.offsets[points.start];
            let hi = batch.offsets[points.end];
            let mut grad = params.zeros_like();
            let mut dfeat = vec![T::zero(); (hi - lo) * c];
            let mut dcond = vec![T::zero(); (hi - lo) * d];
            for p in points {
                let r = batch.views(p);
                point_backward(
                    params,
                    batch,
                    p,
                    &cache.points[p],
                    &upstream[p * c..(p + 1) * c],
                    &mut grad,
                    &mut dfeat[(r.start - lo) * c..(r.end - lo) * c],
                    &mut dcond[(r.start - lo) * d..(r.end - lo) * d],
                );
            }
            (grad, dfeat, dcond)
        })
        .collect();
    let mut out = Gradients {
        params: params.zeros_like(),
        features: Vec::with_capacity(batch.n_entries() * c),
        conditions: Vec::with_capacity(batch.n_entries() * d),
    };
    for (grad, dfeat, dcond) in chunks {
        out.params.add_scaled(&grad, T::one());
        out.features.extend(dfeat);
        out.conditions.extend(dcond);
    }
    Ok(out)
}

/// `sum(upstream * pooled)`, the scalar whose gradients [`backward`] returns.
pub fn upstream_loss<T: Scalar>(pooled: &PooledFeatures<T>, upstream: &[T]) -> T {
    pooled
        .pooled
        .iter()
        .zip(upstream)
        .map(|(a, b)| *a * *b)
        .sum()
}

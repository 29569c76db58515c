//! Two-stream network: shared multi-head self-attention per stream, a
//! cross-modal sigmoid gate, a shared convolutional filtering head producing
//! per-snippet attention, and a convolutional snippet classifier whose output
//! also yields the snippet evidence.
//!
//! Streams are `D × W` matrices (channels by snippets). There is no
//! positional encoding: the attention stages are equivariant to snippet
//! order, and the whole pass is when the conv kernels have width 1.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::evidential::{combine, masses_from_evidence, BeliefMass, Evidence};
use crate::numerics::{Padding, Tape, Tensor, Var};

/// Architecture sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    /// Channels per stream (`D`).
    pub feature_dim: usize,
    /// Action classes (`T`); the classifier emits `T + 1` with background last.
    pub num_classes: usize,
    pub heads: usize,
    /// Width of the hidden conv layers in both conv stacks.
    pub hidden: usize,
    /// Kernel width of the first two conv layers of each stack (the last is 1).
    pub kernel: usize,
}

impl ModelDims {
    pub fn new(feature_dim: usize, num_classes: usize, heads: usize, hidden: usize) -> Result<Self> {
        if feature_dim == 0 || num_classes == 0 || heads == 0 || hidden == 0 {
            return invalid("model dimensions must all be positive");
        }
        Ok(Self { feature_dim, num_classes, heads, hidden, kernel: 3 })
    }

    pub fn with_kernel(mut self, kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return invalid(format!("conv kernel width must be odd, got {kernel}"));
        }
        self.kernel = kernel;
        Ok(self)
    }

    fn kernels(&self) -> [usize; CONV_LAYERS] {
        [self.kernel, self.kernel, 1]
    }

    pub fn head_dim(&self) -> usize {
        self.feature_dim.div_ceil(self.heads)
    }
}

/// Conv layers per stack.
pub const CONV_LAYERS: usize = 3;

/// Index arithmetic over the flat parameter list.
#[derive(Debug, Clone, Copy)]
struct Layout {
    heads: usize,
}

impl Layout {
    fn query(self, h: usize) -> usize {
        h
    }
    fn key(self, h: usize) -> usize {
        self.heads + h
    }
    fn value(self, h: usize) -> usize {
        2 * self.heads + h
    }
    fn output(self) -> usize {
        3 * self.heads
    }
    fn score_weight(self) -> usize {
        3 * self.heads + 1
    }
    fn score_bias(self) -> usize {
        3 * self.heads + 2
    }
    fn filter(self, layer: usize) -> (usize, usize) {
        let base = 3 * self.heads + 3 + 2 * layer;
        (base, base + 1)
    }
    fn classifier(self, layer: usize) -> (usize, usize) {
        let base = 3 * self.heads + 9 + 2 * layer;
        (base, base + 1)
    }
    fn count(self) -> usize {
        3 * self.heads + 15
    }
}

/// All learnable weights, in a fixed named order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

fn expected_shapes(dims: ModelDims) -> Vec<(String, Vec<usize>)> {
    let d = dims.feature_dim;
    let hd = dims.head_dim();
    let mut out = Vec::new();
    for kind in ["query", "key", "value"] {
        for h in 0..dims.heads {
            out.push((format!("attention.{kind}.{h}"), vec![d, hd]));
        }
    }
    out.push(("attention.output".into(), vec![dims.heads * hd, d]));
    out.push(("attention.score.weight".into(), vec![d, 1]));
    out.push(("attention.score.bias".into(), vec![1]));
    let stack = |prefix: &str, cin: usize, cout: usize, out: &mut Vec<(String, Vec<usize>)>| {
        let widths = [cin, dims.hidden, dims.hidden, cout];
        for (l, k) in dims.kernels().iter().enumerate() {
            out.push((format!("{prefix}.{l}.weight"), vec![widths[l + 1], widths[l], *k]));
            out.push((format!("{prefix}.{l}.bias"), vec![widths[l + 1]]));
        }
    };
    stack("filter", d, 1, &mut out);
    stack("classifier", 2 * d, dims.num_classes + 1, &mut out);
    out
}

/// Starting values of the classifier's output biases.
///
/// Every snippet starts out as confident background with little action
/// evidence. Only the snippets that top-k aggregation selects are pulled
/// towards their video's classes; the rest stay near zero evidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierPrior {
    pub action: f64,
    pub background: f64,
}

impl ClassifierPrior {
    pub const NEUTRAL: Self = Self { action: 0.0, background: 0.0 };
}

impl Default for ClassifierPrior {
    fn default() -> Self {
        Self { action: -3.0, background: 4.0 }
    }
}

impl ModelParams {
    /// Uniform Glorot weights, zero hidden biases, default classifier prior.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        Self::init_with_prior(dims, seed, ClassifierPrior::default())
    }

    pub fn init_with_prior(dims: ModelDims, seed: u64, prior: ClassifierPrior) -> Self {
        let out_bias = format!("classifier.{}.bias", CONV_LAYERS - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (names, tensors) = expected_shapes(dims)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name == out_bias {
                    let mut b = vec![prior.action; shape[0]];
                    b[dims.num_classes] = prior.background;
                    Tensor::vector(b)
                } else if name.ends_with("bias") {
                    Tensor::zeros(&shape)
                } else {
                    let (fan_in, fan_out) = match shape[..] {
                        [o, i, k] => (i * k, o * k),
                        [i, o] => (i, o),
                        _ => (1, 1),
                    };
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                    Tensor::new(shape, data).expect("shape matches data")
                };
                (name, t)
            })
            .unzip();
        Self { dims, names, tensors }
    }

    /// Rebuilds parameters from a named table, checking every shape.
    pub fn from_named(dims: ModelDims, named: Vec<(String, Tensor)>) -> Result<Self> {
        let expected = expected_shapes(dims);
        if named.len() != expected.len() {
            return invalid(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                named.len()
            ));
        }
        for ((name, t), (ename, eshape)) in named.iter().zip(&expected) {
            if name != ename || t.shape() != &eshape[..] {
                return invalid(format!(
                    "parameter {name} {:?} does not match expected {ename} {eshape:?}",
                    t.shape()
                ));
            }
            if !t.is_finite() {
                return invalid(format!("parameter {name} contains non-finite values"));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self { dims, names, tensors })
    }

    /// Infers dimensions from a named table, as stored in a checkpoint.
    pub fn infer_dims(named: &[(String, Tensor)]) -> Result<ModelDims> {
        let find = |n: &str| {
            named
                .iter()
                .find(|(name, _)| name == n)
                .map(|(_, t)| t.shape().to_vec())
                .ok_or_else(|| Error::Invalid(format!("missing parameter {n}")))
        };
        let heads = named.iter().filter(|(n, _)| n.starts_with("attention.query.")).count();
        let score = find("attention.score.weight")?;
        let filter0 = find("filter.0.weight")?;
        let cls = find("classifier.2.weight")?;
        ModelDims::new(score[0], cls[0].saturating_sub(1), heads, filter0[0])?.with_kernel(filter0[2])
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect::<Result<_>>()?;
        Ok(BoundParams {
            dims: self.dims,
            layout: Layout { heads: self.dims.heads },
            vars,
        })
    }
}

/// Parameters registered on a particular tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    dims: ModelDims,
    layout: Layout,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    fn var(&self, i: usize) -> Var {
        debug_assert!(i < self.layout.count());
        self.vars[i]
    }
}

fn check_stream(tape: &Tape, x: Var, dims: ModelDims) -> Result<(usize, usize)> {
    let (d, w) = tape.value(x).dims2()?;
    if d != dims.feature_dim || w == 0 {
        return Err(Error::Shape {
            op: "stream input",
            left: vec![d, w],
            right: vec![dims.feature_dim, w.max(1)],
        });
    }
    Ok((d, w))
}

fn vector_len(tape: &Tape, v: Var) -> Result<usize> {
    match tape.shape(v) {
        [n] => Ok(*n),
        other => invalid(format!("expected a vector, got shape {other:?}")),
    }
}

/// Multi-head self-attention over snippet positions, projected to one raw
/// score per snippet. The same parameters serve both streams.
pub fn stream_attention(tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
    let (_, w) = check_stream(tape, x, p.dims)?;
    let l = p.layout;
    let tokens = tape.transpose(x)?; // W × D
    let scale = 1.0 / (p.dims.head_dim() as f64).sqrt();
    let mut heads = Vec::with_capacity(p.dims.heads);
    for h in 0..p.dims.heads {
        let q = tape.matmul(tokens, p.var(l.query(h)))?;
        let k = tape.matmul(tokens, p.var(l.key(h)))?;
        let v = tape.matmul(tokens, p.var(l.value(h)))?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale)?;
        let weights = tape.softmax_rows(scores)?;
        heads.push(tape.matmul(weights, v)?);
    }
    let joined = tape.concat_cols(&heads)?;
    let mixed = tape.matmul(joined, p.var(l.output()))?; // W × D
    let score = tape.matmul(mixed, p.var(l.score_weight()))?; // W × 1
    let bias = tape.broadcast_cols(p.var(l.score_bias()), w)?;
    let score = tape.add(score, bias)?;
    tape.reshape(score, vec![w])
}

/// Gates each stream by `σ(A_flow ⊙ A_rgb)`, broadcast over channels.
pub fn cross_gate(tape: &mut Tape, x_flow: Var, x_rgb: Var, a_flow: Var, a_rgb: Var) -> Result<(Var, Var)> {
    let (d, w) = tape.value(x_flow).dims2()?;
    if tape.shape(x_rgb) != [d, w] {
        return Err(Error::Shape {
            op: "cross_gate streams",
            left: vec![d, w],
            right: tape.shape(x_rgb).to_vec(),
        });
    }
    for a in [a_flow, a_rgb] {
        if vector_len(tape, a)? != w {
            return Err(Error::Shape {
                op: "cross_gate attention",
                left: vec![w],
                right: tape.shape(a).to_vec(),
            });
        }
    }
    let flow_gate = tape.mul(a_flow, a_rgb)?;
    let flow_gate = tape.sigmoid(flow_gate)?;
    let rgb_gate = tape.mul(a_rgb, a_flow)?;
    let rgb_gate = tape.sigmoid(rgb_gate)?;
    let flow_gate = tape.broadcast_cols(flow_gate, d)?;
    let rgb_gate = tape.broadcast_cols(rgb_gate, d)?;
    Ok((tape.mul(x_flow, flow_gate)?, tape.mul(x_rgb, rgb_gate)?))
}

fn conv_stack(tape: &mut Tape, p: &BoundParams, x: Var, layer: impl Fn(usize) -> (usize, usize)) -> Result<Var> {
    let mut h = x;
    for l in 0..CONV_LAYERS {
        let (w, b) = layer(l);
        h = tape.conv1d(h, p.var(w), Some(p.var(b)), Padding::Same)?;
        if l + 1 < CONV_LAYERS {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Conv stack plus sigmoid: per-snippet attention in (0, 1).
pub fn filter_attention(tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
    let (_, w) = check_stream(tape, x, p.dims)?;
    let layout = p.layout;
    let logits = conv_stack(tape, p, x, |l| layout.filter(l))?;
    let att = tape.sigmoid(logits)?;
    tape.reshape(att, vec![w])
}

/// Channel concatenation of the gated streams and the mean of their attention.
pub fn fuse_streams(tape: &mut Tape, x_flow: Var, x_rgb: Var, a_flow: Var, a_rgb: Var) -> Result<(Var, Var)> {
    let features = tape.concat_rows(&[x_flow, x_rgb])?;
    let sum = tape.add(a_flow, a_rgb)?;
    let attention = tape.scale(sum, 0.5)?;
    Ok((features, attention))
}

/// Snippet classifier: `2D × W` features to `W × (T+1)` logits.
pub fn classify(tape: &mut Tape, p: &BoundParams, features: Var) -> Result<Var> {
    let (c, _) = tape.value(features).dims2()?;
    if c != 2 * p.dims.feature_dim {
        return Err(Error::Shape {
            op: "classify",
            left: vec![c],
            right: vec![2 * p.dims.feature_dim],
        });
    }
    let layout = p.layout;
    let logits = conv_stack(tape, p, features, |l| layout.classifier(l))?;
    tape.transpose(logits)
}

/// Evidence from the action columns of the CAS: `exp` clamped to `[-10, 10]`.
pub fn snippet_evidence(tape: &mut Tape, cas: Var) -> Result<Var> {
    let (_, cols) = tape.value(cas).dims2()?;
    if cols < 2 {
        return invalid("CAS needs at least one action column plus background");
    }
    let actions = tape.slice_cols(cas, 0, cols - 1)?;
    tape.exp_clipped(actions)
}

/// Scales evidence row `t` by `A_t`.
pub fn reweight_evidence(tape: &mut Tape, evidence: Var, attention: Var) -> Result<Var> {
    let (w, t) = tape.value(evidence).dims2()?;
    if vector_len(tape, attention)? != w {
        return Err(Error::Shape {
            op: "reweight_evidence",
            left: vec![w, t],
            right: tape.shape(attention).to_vec(),
        });
    }
    let scale = tape.broadcast_rows(attention, t)?;
    tape.mul(evidence, scale)
}

/// Per-snippet combination of original and reweighted evidence.
pub fn fuse_snippet_evidence(original: &Tensor, reweighted: &Tensor) -> Result<Vec<BeliefMass>> {
    if original.shape() != reweighted.shape() {
        return Err(Error::Shape {
            op: "fuse_snippet_evidence",
            left: original.shape().to_vec(),
            right: reweighted.shape().to_vec(),
        });
    }
    let (w, _) = original.dims2()?;
    (0..w)
        .map(|t| {
            let m1 = masses_from_evidence(&Evidence::new(original.row(t).to_vec())?);
            let m2 = masses_from_evidence(&Evidence::new(reweighted.row(t).to_vec())?);
            combine(&m1, &m2).map_err(|e| match e {
                Error::TotalConflict { conflict } => Error::ConflictAtSnippet { snippet: t, conflict },
                other => other,
            })
        })
        .collect()
}

/// Which parts of the architecture are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    /// Shared attention and cross-modal gating.
    pub hmha: bool,
    /// Evidential fusion driving the uncertainty schedule and the evidential loss.
    pub guef: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { hmha: true, guef: true }
    }
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct GraphOutput {
    pub features: Var,
    pub attention: Var,
    pub cas: Var,
    pub evidence: Var,
    pub reweighted: Var,
}

/// Full forward pass on a tape.
pub fn forward_graph(
    tape: &mut Tape,
    p: &BoundParams,
    flow: Var,
    rgb: Var,
    ablation: Ablation,
) -> Result<GraphOutput> {
    let (d, w) = check_stream(tape, flow, p.dims)?;
    if tape.shape(rgb) != [d, w] {
        return Err(Error::Shape {
            op: "forward streams",
            left: vec![d, w],
            right: tape.shape(rgb).to_vec(),
        });
    }
    let (flow_hat, rgb_hat) = if ablation.hmha {
        let a_flow = stream_attention(tape, p, flow)?;
        let a_rgb = stream_attention(tape, p, rgb)?;
        cross_gate(tape, flow, rgb, a_flow, a_rgb)?
    } else {
        (flow, rgb)
    };
    let att_flow = filter_attention(tape, p, flow_hat)?;
    let att_rgb = filter_attention(tape, p, rgb_hat)?;
    let (features, attention) = fuse_streams(tape, flow_hat, rgb_hat, att_flow, att_rgb)?;
    let cas = classify(tape, p, features)?;
    let evidence = snippet_evidence(tape, cas)?;
    let reweighted = reweight_evidence(tape, evidence, attention)?;
    Ok(GraphOutput { features, attention, cas, evidence, reweighted })
}

/// Materialized forward pass for one video.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub features: Tensor,
    pub attention: Vec<f64>,
    pub cas: Tensor,
    pub evidence: Tensor,
    pub reweighted: Tensor,
    pub fused: Vec<BeliefMass>,
}

pub fn forward(params: &ModelParams, flow: &Tensor, rgb: &Tensor, ablation: Ablation) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape)?;
    let fv = tape.leaf(flow.clone())?;
    let rv = tape.leaf(rgb.clone())?;
    let g = forward_graph(&mut tape, &p, fv, rv, ablation)?;
    let evidence = tape.value(g.evidence).clone();
    let reweighted = tape.value(g.reweighted).clone();
    let fused = fuse_snippet_evidence(&evidence, &reweighted)?;
    Ok(ForwardOutput {
        features: tape.value(g.features).clone(),
        attention: tape.value(g.attention).data().to_vec(),
        cas: tape.value(g.cas).clone(),
        evidence,
        reweighted,
        fused,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand_distr::{Distribution, StandardNormal};

    fn dims() -> ModelDims {
        ModelDims::new(6, 3, 4, 8).unwrap()
    }

    fn random_stream(d: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..d * w).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::matrix(d, w, data).unwrap()
    }

    fn permute_cols(x: &Tensor, perm: &[usize]) -> Tensor {
        let (r, c) = x.dims2().unwrap();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for (j, &p) in perm.iter().enumerate() {
                out[i * c + j] = x.at(i, p);
            }
        }
        Tensor::matrix(r, c, out).unwrap()
    }

    #[test]
    fn layout_matches_shape_table() {
        let d = dims();
        let params = ModelParams::init(d, 1);
        assert_eq!(params.tensors().len(), Layout { heads: d.heads }.count());
        let l = Layout { heads: d.heads };
        assert_eq!(params.names()[l.output()], "attention.output");
        assert_eq!(params.names()[l.score_bias()], "attention.score.bias");
        assert_eq!(params.names()[l.filter(2).1], "filter.2.bias");
        assert_eq!(params.names()[l.classifier(0).0], "classifier.0.weight");
        assert_eq!(params.tensors()[l.classifier(2).1].shape(), &[4]);
        assert_eq!(ModelParams::infer_dims(&params.named().map(|(n, t)| (n.to_string(), t.clone())).collect::<Vec<_>>()).unwrap(), d);
    }

    #[test]
    fn single_snippet_attention_is_finite() {
        let params = ModelParams::init(dims(), 3);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape).unwrap();
        let x = tape.leaf(random_stream(6, 1, 4)).unwrap();
        let a = stream_attention(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(a), &[1]);
        assert!(tape.value(a).is_finite());
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let params = ModelParams::init(dims(), 5);
        let x = random_stream(6, 7, 9);
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape).unwrap();
            let xv = tape.leaf(x.clone()).unwrap();
            let a = stream_attention(&mut tape, &p, xv).unwrap();
            tape.value(a).data().to_vec()
        };
        let base = run(&x);
        assert_eq!(base, run(&x));
        let permuted = run(&permute_cols(&x, &perm));
        for (j, &src) in perm.iter().enumerate() {
            assert_abs_diff_eq!(permuted[j], base[src], epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_attention_halves_streams() {
        let mut tape = Tape::new();
        let xf = tape.leaf(Tensor::from_rows(&[vec![2.0, 1.0], vec![4.0, -3.0]]).unwrap()).unwrap();
        let xr = tape.leaf(Tensor::from_rows(&[vec![6.0, 0.5], vec![8.0, 1.0]]).unwrap()).unwrap();
        let zero = tape.leaf(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let (gf, gr) = cross_gate(&mut tape, xf, xr, zero, zero).unwrap();
        assert_eq!(tape.value(gf).data(), &[1.0, 0.5, 2.0, -1.5]);
        assert_eq!(tape.value(gr).data(), &[3.0, 0.25, 4.0, 0.5]);

        let bad = tape.leaf(Tensor::vector(vec![0.0; 3])).unwrap();
        assert!(cross_gate(&mut tape, xf, xr, bad, zero).is_err());
    }

    #[test]
    fn gate_is_shared_between_streams() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[2, 3], 1.0)).unwrap();
        let af = tape.leaf(Tensor::vector(vec![0.3, -2.0, 1.5])).unwrap();
        let ar = tape.leaf(Tensor::vector(vec![1.2, 0.7, -0.4])).unwrap();
        let (gf, gr) = cross_gate(&mut tape, x, x, af, ar).unwrap();
        assert_eq!(tape.value(gf), tape.value(gr));
    }

    #[test]
    fn zeroed_filter_gives_half() {
        let mut params = ModelParams::init(dims(), 2);
        let l = Layout { heads: 4 };
        for layer in 0..3 {
            let (w, b) = l.filter(layer);
            for i in [w, b] {
                params.tensors_mut()[i].data_mut().fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let p = params.bind(&mut tape).unwrap();
        let x = tape.leaf(random_stream(6, 5, 1)).unwrap();
        let a = filter_attention(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(a).data(), &[0.5; 5]);
    }

    #[test]
    fn filter_output_in_open_unit_interval() {
        let params = ModelParams::init(dims(), 8);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape).unwrap();
        let x = tape.leaf(random_stream(6, 9, 2).map(|v| v * 3.0)).unwrap();
        let a = filter_attention(&mut tape, &p, x).unwrap();
        assert!(tape.value(a).data().iter().all(|v| *v > 0.0 && *v < 1.0));
        let again = filter_attention(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(a), tape.value(again));
    }

    #[test]
    fn fuse_streams_averages_attention() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[3, 2], 1.0)).unwrap();
        let a = tape.leaf(Tensor::vector(vec![0.2, 0.4])).unwrap();
        let b = tape.leaf(Tensor::vector(vec![0.8, 0.4])).unwrap();
        let (f, att) = fuse_streams(&mut tape, x, x, a, b).unwrap();
        assert_eq!(tape.shape(f), &[6, 2]);
        assert_abs_diff_eq!(tape.value(att).data()[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(tape.value(att).data()[1], 0.4, epsilon = 1e-15);
    }

    #[test]
    fn classifier_shapes_and_zero_weights() {
        let mut params = ModelParams::init(dims(), 4);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape).unwrap();
        let f = tape.leaf(random_stream(12, 5, 3)).unwrap();
        let z = classify(&mut tape, &p, f).unwrap();
        assert_eq!(tape.shape(z), &[5, 4]);
        assert!(tape.value(z).is_finite());

        let l = Layout { heads: 4 };
        for layer in 0..3 {
            let (w, b) = l.classifier(layer);
            params.tensors_mut()[w].data_mut().fill(0.0);
            params.tensors_mut()[b].data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let p = params.bind(&mut tape).unwrap();
        let f = tape.leaf(random_stream(12, 5, 3)).unwrap();
        let z = classify(&mut tape, &p, f).unwrap();
        assert!(tape.value(z).data().iter().all(|v| *v == 0.0));

        let wrong = tape.leaf(random_stream(6, 5, 3)).unwrap();
        assert!(classify(&mut tape, &p, wrong).is_err());
    }

    #[test]
    fn evidence_from_cas() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::from_rows(&[vec![0.0, 0.0, 5.0], vec![20.0, -1.0, 0.0]]).unwrap()).unwrap();
        let e = snippet_evidence(&mut tape, z).unwrap();
        let ev = tape.value(e);
        assert_eq!(ev.row(0), &[1.0, 1.0]);
        assert_eq!(ev.at(1, 0), 10f64.exp());
        for t in 0..2 {
            masses_from_evidence(&Evidence::new(ev.row(t).to_vec()).unwrap())
                .check_normalized()
                .unwrap();
        }
    }

    #[test]
    fn reweighting_examples() {
        let mut tape = Tape::new();
        let e = tape.leaf(Tensor::from_rows(&[vec![3.0, 1.0], vec![3.0, 1.0], vec![3.0, 1.0]]).unwrap()).unwrap();
        let a = tape.leaf(Tensor::vector(vec![1.0, 0.0, 0.5])).unwrap();
        let r = reweight_evidence(&mut tape, e, a).unwrap();
        let rv = tape.value(r).clone();
        assert_eq!(rv.row(0), &[3.0, 1.0]);
        assert_eq!(rv.row(1), &[0.0, 0.0]);
        assert_eq!(rv.row(2), &[1.5, 0.5]);
        let m = masses_from_evidence(&Evidence::new(rv.row(2).to_vec()).unwrap());
        assert_abs_diff_eq!(m.theta(), 0.5, epsilon = 1e-15);

        let fused = fuse_snippet_evidence(tape.value(e), &rv).unwrap();
        // self-fusion of {1/2, 1/6, Θ 1/3}
        assert_abs_diff_eq!(fused[0].singletons()[0], 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(fused[0].singletons()[1], 1.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fused[0].theta(), 2.0 / 15.0, epsilon = 1e-12);
        // zero attention: second mass is vacuous, fusion returns the first
        assert_abs_diff_eq!(fused[1].singletons()[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(fused[1].theta(), 1.0 / 3.0, epsilon = 1e-12);

        let short = tape.leaf(Tensor::vector(vec![1.0])).unwrap();
        assert!(reweight_evidence(&mut tape, e, short).is_err());
    }

    #[test]
    fn full_forward_is_deterministic_and_normalized() {
        let params = ModelParams::init(dims(), 11);
        let flow = random_stream(6, 6, 21);
        let rgb = random_stream(6, 6, 22);
        let base = forward(&params, &flow, &rgb, Ablation::default()).unwrap();
        let again = forward(&params, &flow, &rgb, Ablation::default()).unwrap();
        assert_eq!(base.attention, again.attention);
        assert_eq!(base.cas, again.cas);
        assert_eq!(base.fused, again.fused);
        assert!(base.attention.iter().all(|a| *a > 0.0 && *a < 1.0));
        assert!(base.evidence.data().iter().all(|e| *e >= 0.0));
        for m in &base.fused {
            m.check_normalized().unwrap();
        }
    }

    #[test]
    fn pointwise_convs_make_the_whole_pass_equivariant() {
        let params = ModelParams::init(dims().with_kernel(1).unwrap(), 11);
        let flow = random_stream(6, 6, 21);
        let rgb = random_stream(6, 6, 22);
        let perm = [5, 2, 0, 4, 1, 3];
        let base = forward(&params, &flow, &rgb, Ablation::default()).unwrap();
        let out = forward(&params, &permute_cols(&flow, &perm), &permute_cols(&rgb, &perm), Ablation::default()).unwrap();
        for (j, &src) in perm.iter().enumerate() {
            assert_abs_diff_eq!(out.attention[j], base.attention[src], epsilon = 1e-12);
            for c in 0..4 {
                assert_abs_diff_eq!(out.cas.at(j, c), base.cas.at(src, c), epsilon = 1e-12);
            }
            assert_abs_diff_eq!(out.fused[j].theta(), base.fused[src].theta(), epsilon = 1e-12);
        }
    }

    #[test]
    fn all_ones_attention_reduces_to_self_fusion() {
        let e = Tensor::from_rows(&[vec![3.0, 1.0], vec![0.5, 2.0]]).unwrap();
        let fused = fuse_snippet_evidence(&e, &e).unwrap();
        for (t, m) in fused.iter().enumerate() {
            let single = masses_from_evidence(&Evidence::new(e.row(t).to_vec()).unwrap());
            let expected = combine(&single, &single).unwrap();
            assert_eq!(m, &expected);
        }
    }

    #[test]
    fn ablation_bypasses_attention() {
        let params = ModelParams::init(dims(), 11);
        let flow = random_stream(6, 4, 1);
        let rgb = random_stream(6, 4, 2);
        let out = forward(&params, &flow, &rgb, Ablation { hmha: false, guef: true }).unwrap();
        assert_eq!(&out.features.data()[..24], flow.data());
        assert_eq!(&out.features.data()[24..], rgb.data());
    }
}

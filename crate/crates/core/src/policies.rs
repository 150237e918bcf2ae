//! Threshold marking baselines and the fully-connected policy/value networks.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Action, Level};

/// Refine where `e_i > θ` (ties stay coarse).
pub fn threshold_absolute(errors: &[f64], theta: f64) -> Result<Vec<Action>> {
    if !(theta > 0.0) {
        return Err(Error::Config(format!("absolute threshold must be positive, got {theta}")));
    }
    Ok(errors
        .iter()
        .map(|&e| if e > theta { Level::Fine } else { Level::Coarse })
        .collect())
}

/// Refine where `(e_max − e_i)/(e_max − e_min) > θ`, exactly as the
/// relative-threshold rule is usually printed. Note that this marks
/// low-error elements.
pub fn threshold_relative(errors: &[f64], theta: f64) -> Result<Vec<Action>> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::Config(format!("relative threshold must lie in [0, 1], got {theta}")));
    }
    let e_max = errors.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e_min = errors.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(e_max > e_min) {
        return Ok(vec![Level::Coarse; errors.len()]);
    }
    Ok(errors
        .iter()
        .map(|&e| {
            if (e_max - e) / (e_max - e_min) > theta {
                Level::Fine
            } else {
                Level::Coarse
            }
        })
        .collect())
}

/// Dense network with tanh hidden layers and a linear output layer.
///
/// Parameters are stored flat; layer `l` holds its `out × in` weight
/// matrix (row-major) followed by its bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    pub params: Vec<f64>,
}

/// Activations saved by a batched forward pass for backpropagation.
#[derive(Clone, Debug)]
pub struct MlpCache {
    batch: usize,
    /// per layer boundary: `batch × sizes[l]` (post-activation)
    acts: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2);
        let count = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; count],
        }
    }

    /// Orthogonal initialization: each weight matrix has orthonormal rows or
    /// columns scaled by `gain` (the last layer uses `output_gain`); biases
    /// start at zero.
    pub fn orthogonal<R: Rng + ?Sized>(sizes: &[usize], gain: f64, output_gain: f64, rng: &mut R) -> Self {
        let mut net = Self::zeros(sizes);
        let layers = sizes.len() - 1;
        for l in 0..layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let g = if l + 1 == layers { output_gain } else { gain };
            let (r, c) = (fan_out.max(fan_in), fan_out.min(fan_in));
            let a = DMatrix::<f64>::from_fn(r, c, |_, _| StandardNormal.sample(rng));
            let qr = a.qr();
            let mut q = qr.q();
            let rr = qr.r();
            // sign fix for a uniform distribution over orthogonal matrices
            for j in 0..c {
                if rr[(j, j)] < 0.0 {
                    q.column_mut(j).neg_mut();
                }
            }
            let off = net.offset(l);
            for o in 0..fan_out {
                for i in 0..fan_in {
                    let v = if fan_out >= fan_in { q[(o, i)] } else { q[(i, o)] };
                    net.params[off + o * fan_in + i] = g * v;
                }
            }
        }
        net
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn offset(&self, layer: usize) -> usize {
        self.sizes[..=layer]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Batched forward pass over `batch` row-major inputs.
    pub fn forward_batch(&self, x: &[f64], batch: usize) -> Result<(Vec<f64>, MlpCache)> {
        let d = self.input_dim();
        if x.len() != batch * d {
            return Err(Error::Shape(format!(
                "expected {batch} inputs of width {d}, got {} values",
                x.len()
            )));
        }
        let layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(x.to_vec());
        for l in 0..layers {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.offset(l);
            let w = &self.params[off..off + fi * fo];
            let b = &self.params[off + fi * fo..off + fi * fo + fo];
            let input = &acts[l];
            let mut out = vec![0.0; batch * fo];
            for s in 0..batch {
                let xi = &input[s * fi..(s + 1) * fi];
                let row = &mut out[s * fo..(s + 1) * fo];
                for o in 0..fo {
                    let wr = &w[o * fi..(o + 1) * fi];
                    let mut acc = b[o];
                    for (a, c) in wr.iter().zip(xi) {
                        acc += a * c;
                    }
                    row[o] = if l + 1 < layers { acc.tanh() } else { acc };
                }
            }
            acts.push(out);
        }
        let out = acts.last().unwrap().clone();
        Ok((out, MlpCache { batch, acts }))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(x, 1)?.0)
    }

    /// Accumulates `∂(Σ dout · out)/∂params` into `grad`.
    pub fn backward_batch(&self, cache: &MlpCache, dout: &[f64], grad: &mut [f64]) {
        let layers = self.sizes.len() - 1;
        let batch = cache.batch;
        debug_assert_eq!(dout.len(), batch * self.output_dim());
        debug_assert_eq!(grad.len(), self.params.len());
        let mut delta = dout.to_vec();
        for l in (0..layers).rev() {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.offset(l);
            let input = &cache.acts[l];
            {
                let (gw, gb) = grad[off..off + fi * fo + fo].split_at_mut(fi * fo);
                for s in 0..batch {
                    let xi = &input[s * fi..(s + 1) * fi];
                    let ds = &delta[s * fo..(s + 1) * fo];
                    for o in 0..fo {
                        let d = ds[o];
                        if d == 0.0 {
                            continue;
                        }
                        gb[o] += d;
                        for (g, x) in gw[o * fi..(o + 1) * fi].iter_mut().zip(xi) {
                            *g += d * x;
                        }
                    }
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + fi * fo];
            let mut prev = vec![0.0; batch * fi];
            for s in 0..batch {
                let ds = &delta[s * fo..(s + 1) * fo];
                let ps = &mut prev[s * fi..(s + 1) * fi];
                for o in 0..fo {
                    let d = ds[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (p, a) in ps.iter_mut().zip(&w[o * fi..(o + 1) * fi]) {
                        *p += d * a;
                    }
                }
                // through tanh of the previous layer
                let h = &input[s * fi..(s + 1) * fi];
                for (p, y) in ps.iter_mut().zip(h) {
                    *p *= 1.0 - y * y;
                }
            }
            delta = prev;
        }
    }
}

/// Shape metadata stored with the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyMeta {
    pub channels: usize,
    /// `(k_x, k_y)`
    pub window: [usize; 2],
    pub hidden: Vec<usize>,
    pub activation: String,
}

impl PolicyMeta {
    pub fn input_dim(&self) -> usize {
        self.channels * self.window[0] * self.window[1]
    }
}

/// Separate policy (2 logits) and value (1 output) networks.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyWeights {
    pub meta: PolicyMeta,
    pub policy: Mlp,
    pub value: Mlp,
}

pub const DEFAULT_HIDDEN: [usize; 2] = [256, 256];

impl PolicyWeights {
    pub fn new<R: Rng + ?Sized>(channels: usize, window: [usize; 2], hidden: &[usize], rng: &mut R) -> Self {
        let meta = PolicyMeta {
            channels,
            window,
            hidden: hidden.to_vec(),
            activation: "tanh".into(),
        };
        let mut sizes = vec![meta.input_dim()];
        sizes.extend_from_slice(hidden);
        let mut ps = sizes.clone();
        ps.push(2);
        let mut vs = sizes;
        vs.push(1);
        Self {
            meta,
            policy: Mlp::orthogonal(&ps, 1.0, 0.01, rng),
            value: Mlp::orthogonal(&vs, 1.0, 1.0, rng),
        }
    }

    pub fn zeros(channels: usize, window: [usize; 2], hidden: &[usize]) -> Self {
        let meta = PolicyMeta {
            channels,
            window,
            hidden: hidden.to_vec(),
            activation: "tanh".into(),
        };
        let mut sizes = vec![meta.input_dim()];
        sizes.extend_from_slice(hidden);
        let mut ps = sizes.clone();
        ps.push(2);
        let mut vs = sizes;
        vs.push(1);
        Self {
            meta,
            policy: Mlp::zeros(&ps),
            value: Mlp::zeros(&vs),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.meta.input_dim()
    }

    /// Logits and value estimates for a batch of flattened observations.
    pub fn forward(&self, obs: &[f64], batch: usize) -> Result<(Vec<[f64; 2]>, Vec<f64>)> {
        let (l, _) = self.policy.forward_batch(obs, batch)?;
        let (v, _) = self.value.forward_batch(obs, batch)?;
        Ok((l.chunks(2).map(|c| [c[0], c[1]]).collect(), v))
    }

    pub fn is_finite(&self) -> bool {
        self.policy.params.iter().chain(&self.value.params).all(|v| v.is_finite())
    }
}

/// How to pick an action from logits.
pub enum Selection<'a, R: Rng + ?Sized> {
    Sample(&'a mut R),
    Argmax,
}

/// `log softmax(logits)`.
pub fn log_probs(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    [logits[0] - lse, logits[1] - lse]
}

/// Chooses an action and returns it with its log-probability.
pub fn select_action<R: Rng + ?Sized>(logits: [f64; 2], mode: Selection<'_, R>) -> (Action, f64) {
    let lp = log_probs(logits);
    let a = match mode {
        Selection::Argmax => usize::from(logits[1] > logits[0]),
        Selection::Sample(rng) => usize::from(rng.random::<f64>() >= lp[0].exp()),
    };
    (Level::from_index(a), lp[a])
}

const MAGIC: &[u8; 8] = b"DYNAMOW1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    meta: PolicyMeta,
    policy_sizes: Vec<usize>,
    value_sizes: Vec<usize>,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Writes weights as `MAGIC | u64 LE header length | JSON header | f64 LE
/// payload (policy then value parameters)`.
pub fn write_checkpoint(path: &Path, w: &PolicyWeights, extra: serde_json::Value) -> Result<()> {
    let header = serde_json::to_vec(&CheckpointHeader {
        meta: w.meta.clone(),
        policy_sizes: w.policy.sizes.clone(),
        value_sizes: w.value.sizes.clone(),
        extra,
    })?;
    let mut buf = Vec::with_capacity(16 + header.len() + 8 * (w.policy.params.len() + w.value.params.len()));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in w.policy.params.iter().chain(&w.value.params) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads a checkpoint written by [`write_checkpoint`], returning the weights
/// and the free-form header payload.
pub fn read_checkpoint(path: &Path) -> Result<(PolicyWeights, serde_json::Value)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let mut policy = Mlp::zeros(&header.policy_sizes);
    let mut value = Mlp::zeros(&header.value_sizes);
    let payload = &bytes[16 + len..];
    let expected = 8 * (policy.params.len() + value.params.len());
    if payload.len() != expected {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let mut vals = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for p in policy.params.iter_mut().chain(value.params.iter_mut()) {
        *p = vals.next().unwrap();
    }
    if policy.input_dim() != header.meta.input_dim() || policy.output_dim() != 2 || value.output_dim() != 1 {
        return Err(Error::Checkpoint("layer shapes disagree with metadata".into()));
    }
    Ok((
        PolicyWeights {
            meta: header.meta,
            policy,
            value,
        },
        header.extra,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn absolute_threshold_examples() {
        assert_eq!(threshold_absolute(&[1e-2, 1e-4], 1e-3).unwrap(), vec![Level::Fine, Level::Coarse]);
        assert_eq!(threshold_absolute(&[1e-2, 1e-4], 1.0).unwrap(), vec![Level::Coarse; 2]);
        assert_eq!(threshold_absolute(&[1e-3], 1e-3).unwrap(), vec![Level::Coarse]);
        assert!(threshold_absolute(&[1.0], 0.0).is_err());
    }

    #[test]
    fn relative_threshold_examples() {
        assert_eq!(threshold_relative(&[1.0, 0.0], 0.5).unwrap(), vec![Level::Coarse, Level::Fine]);
        assert_eq!(threshold_relative(&[1.0, 0.0, 0.3], 1.0).unwrap(), vec![Level::Coarse; 3]);
        assert_eq!(
            threshold_relative(&[1.0, 0.0, 0.3], 0.0).unwrap(),
            vec![Level::Coarse, Level::Fine, Level::Fine]
        );
        assert_eq!(threshold_relative(&[0.2, 0.2], 0.1).unwrap(), vec![Level::Coarse; 2]);
    }

    #[test]
    fn zero_weights_give_uniform_policy() {
        let w = PolicyWeights::zeros(2, [3, 3], &[8, 8]);
        let (l, v) = w.forward(&[0.3; 18], 1).unwrap();
        assert_eq!(l[0], [0.0, 0.0]);
        assert_eq!(v[0], 0.0);
        let (_, lp) = select_action::<ChaCha8Rng>(l[0], Selection::Argmax);
        assert!((lp - 0.5f64.ln()).abs() < 1e-15);
        assert!(w.forward(&[0.3; 17], 1).is_err());
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = PolicyWeights::new(2, [3, 3], &[16, 16], &mut rng);
        let x: Vec<f64> = (0..18).map(|i| (i as f64 * 0.37).sin()).collect();
        let batch: Vec<f64> = x.iter().cycle().take(18 * 3).cloned().collect();
        let (l, v) = w.forward(&batch, 3).unwrap();
        assert_eq!(l[0], l[1]);
        assert_eq!(l[1], l[2]);
        assert_eq!(v[0], v[2]);
    }

    #[test]
    fn orthogonal_init_rows_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::orthogonal(&[6, 4, 9], 1.0, 0.01, &mut rng);
        // first layer 4×6: orthonormal rows
        let w = &net.params[..24];
        for a in 0..4 {
            for b in 0..4 {
                let d: f64 = (0..6).map(|i| w[a * 6 + i] * w[b * 6 + i]).sum();
                assert!((d - if a == b { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        // second layer 9×4 scaled by 0.01: orthogonal columns
        let off = 24 + 4;
        let w = &net.params[off..off + 36];
        for a in 0..4 {
            let d: f64 = (0..9).map(|o| w[o * 4 + a].powi(2)).sum();
            assert!((d - 1e-4).abs() < 1e-14);
        }
    }

    #[test]
    fn selection_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut zeros = 0;
        for _ in 0..10000 {
            if select_action([10.0, -10.0], Selection::Sample(&mut rng)).0 == Level::Coarse {
                zeros += 1;
            }
        }
        assert!(zeros >= 9999);
        assert_eq!(select_action::<ChaCha8Rng>([1.0, 1.0], Selection::Argmax).0, Level::Coarse);
        let a = log_probs([0.3, -1.2]);
        let b = log_probs([100.3, 98.8]);
        assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::orthogonal(&[5, 7, 6, 2], 1.0, 1.0, &mut rng);
        let x = [0.3, -0.2, 0.9, 0.1, -0.5];
        let (_, cache) = net.forward_batch(&x, 1).unwrap();
        let mut g = vec![0.0; net.param_count()];
        net.backward_batch(&cache, &[1.0, 0.0], &mut g);
        let h = 1e-6;
        for k in 0..net.param_count() {
            let mut p = net.clone();
            p.params[k] += h;
            let up = p.forward(&x).unwrap()[0];
            p.params[k] -= 2.0 * h;
            let dn = p.forward(&x).unwrap()[0];
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-8, "param {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = PolicyWeights::new(2, [5, 5], &[12, 12], &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        write_checkpoint(&p, &w, serde_json::json!({"iteration": 3})).unwrap();
        let (back, extra) = read_checkpoint(&p).unwrap();
        assert_eq!(extra["iteration"], 3);
        assert_eq!(back.meta, w.meta);
        for (a, b) in back.policy.params.iter().chain(&back.value.params).zip(w.policy.params.iter().chain(&w.value.params)) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        std::fs::write(&p, b"garbage").unwrap();
        assert!(matches!(read_checkpoint(&p), Err(Error::Checkpoint(_))));
    }
}

use super::{Activation, Architecture, Gradient, LayerSpec, NnError, Tensor, WeightSet};

/// A batch of flattened samples with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    width: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(
        width: usize,
        inputs: Vec<f64>,
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self, NnError> {
        if labels.is_empty() {
            return Err(NnError::Shape("batch must hold at least one sample".into()));
        }
        if inputs.len() != width * labels.len() {
            return Err(NnError::Shape(format!(
                "batch of {} samples with width {width} needs {} inputs, got {}",
                labels.len(),
                width * labels.len(),
                inputs.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(NnError::Label {
                label: bad,
                n_classes,
            });
        }
        Ok(Self {
            width,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.width..(i + 1) * self.width]
    }
}

/// Row-major `n × K` class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbs {
    pub n_classes: usize,
    pub values: Vec<f64>,
}

impl ClassProbs {
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n_classes)
    }

    pub fn n_rows(&self) -> usize {
        self.values.len() / self.n_classes
    }

    pub fn argmax(&self, row: usize) -> usize {
        let r = &self.values[row * self.n_classes..(row + 1) * self.n_classes];
        let mut best = 0;
        for (k, &p) in r.iter().enumerate() {
            if p > r[best] {
                best = k;
            }
        }
        best
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    Dense {
        input: Vec<f64>,
        pre: Vec<f64>,
        out: Vec<f64>,
    },
    Lstm {
        steps: Vec<LstmStep>,
    },
    Softmax {
        input: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct LstmStep {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Activated gates: i, f, o, g, each of length H.
    gates: Vec<f64>,
    c_tanh: Vec<f64>,
}

/// Intermediate activations from [`forward`], consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    param_count: usize,
    probs: ClassProbs,
    samples: Vec<Vec<LayerCache>>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `out = M x + b` with `M` stored `[rows, cols]` row-major.
fn affine(m: &Tensor, b: Option<&Tensor>, x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &m.data()[r * cols..(r + 1) * cols];
        let mut acc = b.map_or(0.0, |b| b.data()[r]);
        for (a, xv) in row.iter().zip(x) {
            acc += a * xv;
        }
        *o = acc;
    }
}

/// `grad_m += dy ⊗ x`, `dx += Mᵀ dy`.
fn affine_back(m: &Tensor, grad_m: &mut Tensor, x: &[f64], dy: &[f64], dx: Option<&mut [f64]>) {
    let cols = x.len();
    let gm = grad_m.data_mut();
    for (r, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row = &mut gm[r * cols..(r + 1) * cols];
        for (g, xv) in row.iter_mut().zip(x) {
            *g += d * xv;
        }
    }
    if let Some(dx) = dx {
        for (r, &d) in dy.iter().enumerate() {
            let row = &m.data()[r * cols..(r + 1) * cols];
            for (o, a) in dx.iter_mut().zip(row) {
                *o += a * d;
            }
        }
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

fn forward_sample(
    arch: &Architecture,
    w: &[Tensor],
    sample: &[f64],
    probs_out: &mut [f64],
) -> Vec<LayerCache> {
    let mut caches = Vec::with_capacity(arch.layers().len());
    let mut act: Vec<f64> = sample.to_vec();
    let mut p = 0;
    for layer in arch.layers() {
        match *layer {
            LayerSpec::Dense {
                out_dim,
                activation,
                ..
            } => {
                let mut pre = vec![0.0; out_dim];
                affine(&w[p], Some(&w[p + 1]), &act, &mut pre);
                let out: Vec<f64> = pre.iter().map(|&z| activation.apply(z)).collect();
                let input = std::mem::replace(&mut act, out.clone());
                caches.push(LayerCache::Dense { input, pre, out });
                p += 2;
            }
            LayerSpec::Lstm {
                input_dim,
                hidden_dim: h,
                seq_len,
            } => {
                let (wx, wh, b) = (&w[p], &w[p + 1], &w[p + 2]);
                let mut h_t = vec![0.0; h];
                let mut c_t = vec![0.0; h];
                let mut steps = Vec::with_capacity(seq_len);
                let mut z = vec![0.0; 4 * h];
                let mut zh = vec![0.0; 4 * h];
                for t in 0..seq_len {
                    let x = act[t * input_dim..(t + 1) * input_dim].to_vec();
                    affine(wx, Some(b), &x, &mut z);
                    affine(wh, None, &h_t, &mut zh);
                    let mut gates = vec![0.0; 4 * h];
                    for j in 0..4 * h {
                        let s = z[j] + zh[j];
                        gates[j] = if j < 3 * h { sigmoid(s) } else { s.tanh() };
                    }
                    let mut c_new = vec![0.0; h];
                    let mut c_tanh = vec![0.0; h];
                    let mut h_new = vec![0.0; h];
                    for k in 0..h {
                        let (i, f, o, g) = (gates[k], gates[h + k], gates[2 * h + k], gates[3 * h + k]);
                        c_new[k] = f * c_t[k] + i * g;
                        c_tanh[k] = c_new[k].tanh();
                        h_new[k] = o * c_tanh[k];
                    }
                    steps.push(LstmStep {
                        x,
                        h_prev: std::mem::replace(&mut h_t, h_new),
                        c_prev: std::mem::replace(&mut c_t, c_new),
                        gates,
                        c_tanh,
                    });
                }
                act = h_t;
                caches.push(LayerCache::Lstm { steps });
                p += 3;
            }
            LayerSpec::Softmax { n_classes, .. } => {
                let mut z = vec![0.0; n_classes];
                affine(&w[p], Some(&w[p + 1]), &act, &mut z);
                softmax_in_place(&mut z);
                probs_out.copy_from_slice(&z);
                caches.push(LayerCache::Softmax {
                    input: std::mem::take(&mut act),
                });
                p += 2;
            }
        }
    }
    caches
}

/// Runs the network over every sample of `batch`.
pub fn forward(
    w: &WeightSet,
    arch: &Architecture,
    batch: &Batch,
) -> Result<(ClassProbs, ForwardCache), NnError> {
    arch.check_weights(&w.tensors)?;
    if batch.width() != arch.input_width() {
        return Err(NnError::Shape(format!(
            "layer 0 ({}): expects input width {}, batch has {}",
            arch.layers()[0],
            arch.input_width(),
            batch.width()
        )));
    }
    let k = arch.n_classes();
    let mut values = vec![0.0; batch.len() * k];
    let samples = (0..batch.len())
        .map(|i| forward_sample(arch, &w.tensors, batch.sample(i), &mut values[i * k..(i + 1) * k]))
        .collect();
    let probs = ClassProbs {
        n_classes: k,
        values,
    };
    let cache = ForwardCache {
        version: w.version,
        param_count: w.param_count(),
        probs: probs.clone(),
        samples,
    };
    Ok((probs, cache))
}

/// Mean negative log-probability of the true class.
pub fn loss(probs: &ClassProbs, labels: &[usize]) -> Result<f64, NnError> {
    if labels.len() != probs.n_rows() {
        return Err(NnError::Shape(format!(
            "{} labels for {} probability rows",
            labels.len(),
            probs.n_rows()
        )));
    }
    let mut total = 0.0;
    for (row, &label) in probs.rows().zip(labels) {
        if label >= probs.n_classes {
            return Err(NnError::Label {
                label,
                n_classes: probs.n_classes,
            });
        }
        total -= row[label].max(f64::MIN_POSITIVE).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Exact gradient of `loss ∘ forward`, averaged over the batch.
pub fn backward(
    w: &WeightSet,
    arch: &Architecture,
    cache: &ForwardCache,
    labels: &[usize],
) -> Result<Gradient, NnError> {
    if cache.version != w.version
        || cache.param_count != w.param_count()
        || cache.samples.len() != labels.len()
    {
        return Err(NnError::StaleCache);
    }
    arch.check_weights(&w.tensors)?;
    let k = arch.n_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(NnError::Label {
            label: bad,
            n_classes: k,
        });
    }
    let mut grad = Gradient::zeros_like(w);
    let scale = 1.0 / labels.len() as f64;
    let layer_offsets: Vec<usize> = arch
        .layers()
        .iter()
        .scan(0, |acc, l| {
            let start = *acc;
            *acc += l.param_count();
            Some(start)
        })
        .collect();

    for (s, (caches, &label)) in cache.samples.iter().zip(labels).enumerate() {
        let probs = &cache.probs.values[s * k..(s + 1) * k];
        let mut delta: Vec<f64> = probs.iter().map(|p| p * scale).collect();
        delta[label] -= scale;

        for (li, layer) in arch.layers().iter().enumerate().rev() {
            let p = layer_offsets[li];
            let needs_dx = li > 0;
            match (layer, &caches[li]) {
                (LayerSpec::Softmax { in_dim, .. }, LayerCache::Softmax { input }) => {
                    let mut dx = vec![0.0; *in_dim];
                    let (gw, gb) = two_mut(&mut grad.tensors, p);
                    affine_back(&w.tensors[p], gw, input, &delta, needs_dx.then_some(&mut dx[..]));
                    for (g, d) in gb.data_mut().iter_mut().zip(&delta) {
                        *g += d;
                    }
                    delta = dx;
                }
                (
                    LayerSpec::Dense {
                        in_dim, activation, ..
                    },
                    LayerCache::Dense { input, pre, out },
                ) => {
                    let dz: Vec<f64> = delta
                        .iter()
                        .zip(pre.iter().zip(out))
                        .map(|(d, (&z, &a))| d * Activation::derivative(*activation, z, a))
                        .collect();
                    let mut dx = vec![0.0; *in_dim];
                    let (gw, gb) = two_mut(&mut grad.tensors, p);
                    affine_back(&w.tensors[p], gw, input, &dz, needs_dx.then_some(&mut dx[..]));
                    for (g, d) in gb.data_mut().iter_mut().zip(&dz) {
                        *g += d;
                    }
                    delta = dx;
                }
                (LayerSpec::Lstm { hidden_dim: h, .. }, LayerCache::Lstm { steps }) => {
                    lstm_backward(&w.tensors[p..p + 3], &mut grad.tensors[p..p + 3], steps, *h, &delta);
                    delta = Vec::new();
                }
                _ => return Err(NnError::StaleCache),
            }
        }
    }
    Ok(grad)
}

fn two_mut(ts: &mut [Tensor], p: usize) -> (&mut Tensor, &mut Tensor) {
    let (a, b) = ts[p..].split_at_mut(1);
    (&mut a[0], &mut b[0])
}

fn lstm_backward(w: &[Tensor], g: &mut [Tensor], steps: &[LstmStep], h: usize, dh_last: &[f64]) {
    let (gx, rest) = g.split_at_mut(1);
    let (gh, gb) = rest.split_at_mut(1);
    let (gx, gh, gb) = (&mut gx[0], &mut gh[0], &mut gb[0]);
    let mut dh = dh_last.to_vec();
    let mut dc = vec![0.0; h];
    let mut da = vec![0.0; 4 * h];
    for step in steps.iter().rev() {
        for k in 0..h {
            let (i, f, o, gg) = (
                step.gates[k],
                step.gates[h + k],
                step.gates[2 * h + k],
                step.gates[3 * h + k],
            );
            let ct = step.c_tanh[k];
            let d_o = dh[k] * ct;
            dc[k] += dh[k] * o * (1.0 - ct * ct);
            let d_i = dc[k] * gg;
            let d_g = dc[k] * i;
            let d_f = dc[k] * step.c_prev[k];
            da[k] = d_i * i * (1.0 - i);
            da[h + k] = d_f * f * (1.0 - f);
            da[2 * h + k] = d_o * o * (1.0 - o);
            da[3 * h + k] = d_g * (1.0 - gg * gg);
            dc[k] *= f;
        }
        affine_back(&w[0], gx, &step.x, &da, None);
        let mut dh_prev = vec![0.0; h];
        affine_back(&w[1], gh, &step.h_prev, &da, Some(&mut dh_prev));
        for (b, d) in gb.data_mut().iter_mut().zip(&da) {
            *b += d;
        }
        dh = dh_prev;
    }
}

/// Forward pass, loss and gradient in one call.
pub fn loss_and_gradient(
    w: &WeightSet,
    arch: &Architecture,
    batch: &Batch,
) -> Result<(f64, Gradient), NnError> {
    let (probs, cache) = forward(w, arch, batch)?;
    let l = loss(&probs, batch.labels())?;
    let g = backward(w, arch, &cache, batch.labels())?;
    Ok((l, g))
}

/// Central-difference estimate of the loss gradient; a test oracle.
pub fn finite_diff_gradient(
    w: &WeightSet,
    arch: &Architecture,
    batch: &Batch,
    eps: f64,
) -> Result<Gradient, NnError> {
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut probe = w.clone();
    let mut grad = Gradient::zeros_like(w);
    let eval = |probe: &WeightSet| -> Result<f64, NnError> {
        let (p, _) = forward(probe, arch, batch)?;
        loss(&p, batch.labels())
    };
    for t in 0..w.tensors.len() {
        for i in 0..w.tensors[t].len() {
            let orig = w.tensors[t].data()[i];
            probe.tensors[t].data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.tensors[t].data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe.tensors[t].data_mut()[i] = orig;
            grad.tensors[t].data_mut()[i] = (up - down) / (2.0 * eps);
        }
    }
    Ok(grad)
}

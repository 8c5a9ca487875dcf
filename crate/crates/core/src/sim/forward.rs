use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_tensor_f64, resolve_expert_blocks, Architecture, ModelManifest};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Gated FFN expert: `down · (silu(gate · x) ⊙ (up · x))`.
#[derive(Clone, Debug)]
pub struct ToyExpert<T> {
    /// `[intermediate, hidden]`
    pub gate: Vec<T>,
    /// `[intermediate, hidden]`
    pub up: Vec<T>,
    /// `[hidden, intermediate]`
    pub down: Vec<T>,
    pub intermediate: usize,
}

#[derive(Clone, Debug)]
pub struct ToyLayer<T> {
    pub layer_index: usize,
    /// `[experts, hidden]`
    pub router: Vec<T>,
    pub experts: Vec<ToyExpert<T>>,
}

#[derive(Clone, Debug)]
pub struct ToyModel<T> {
    pub hidden: usize,
    pub top_k: usize,
    pub layers: Vec<ToyLayer<T>>,
}

/// Everything observed while routing one input through the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace<T> {
    pub input: Vec<T>,
    pub router_logits: Vec<Vec<T>>,
    /// Per layer, the top-K experts by descending logit.
    pub selected: Vec<Vec<usize>>,
    /// Per layer, one weight per expert; zero for unselected experts.
    pub gate_weights: Vec<Vec<T>>,
    pub output: Vec<T>,
}

fn matvec<T: Scalar>(m: &[T], rows: usize, cols: usize, x: &[T]) -> Vec<T> {
    debug_assert_eq!(m.len(), rows * cols);
    m.chunks_exact(cols)
        .map(|row| row.iter().zip(x).fold(T::zero(), |acc, (&w, &v)| acc + w * v))
        .collect()
}

fn silu<T: Scalar>(v: T) -> T {
    v / (T::one() + (-v).exp())
}

/// Indices of the `k` largest logits, largest first; ties go to the lower index.
pub fn top_k_indices<T: Scalar>(logits: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Softmax over the selected logits only; every other expert gets zero.
pub fn softmax_selected<T: Scalar>(logits: &[T], selected: &[usize]) -> Vec<T> {
    let mut weights = vec![T::zero(); logits.len()];
    let max = selected
        .iter()
        .map(|&i| logits[i])
        .fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for &i in selected {
        let w = (logits[i] - max).exp();
        weights[i] = w;
        z = z + w;
    }
    for &i in selected {
        weights[i] = weights[i] / z;
    }
    weights
}

impl<T: Scalar> ToyExpert<T> {
    pub fn apply(&self, x: &[T]) -> Vec<T> {
        let h = x.len();
        let f = self.intermediate;
        let g = matvec(&self.gate, f, h, x);
        let u = matvec(&self.up, f, h, x);
        let act: Vec<T> = g.into_iter().zip(u).map(|(g, u)| silu(g) * u).collect();
        matvec(&self.down, h, f, &act)
    }
}

impl<T: Scalar> ToyModel<T> {
    pub fn load(manifest: &ModelManifest) -> Result<Self> {
        if manifest.architecture != Architecture::Toy {
            return Err(Error::InvalidInput(format!(
                "forward pass needs a toy checkpoint, got {}",
                manifest.architecture
            )));
        }
        let hidden = manifest.config.hidden_size;
        let load = |name: &str| -> Result<Vec<T>> {
            Ok(load_tensor_f64(manifest, name)?.into_iter().map(T::of).collect())
        };
        let mut layers = Vec::new();
        for block in resolve_expert_blocks(manifest)? {
            if block.router_shape[1] != hidden {
                return Err(Error::InvalidInput(format!(
                    "layer {} router width {} != hidden size {hidden}",
                    block.layer_index, block.router_shape[1]
                )));
            }
            let experts = block
                .expert_tensor_names
                .iter()
                .map(|names| {
                    Ok(ToyExpert {
                        gate: load(&names[0])?,
                        up: load(&names[1])?,
                        down: load(&names[2])?,
                        intermediate: block.sublayer_shapes[0][0],
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            layers.push(ToyLayer {
                layer_index: block.layer_index,
                router: load(&block.router_tensor_name)?,
                experts,
            });
        }
        Ok(Self {
            hidden,
            top_k: manifest.config.num_experts_per_tok,
            layers,
        })
    }

    /// Output of one expert of one layer (position in `layers`) on `x`.
    pub fn expert_output(&self, layer: usize, expert: usize, x: &[T]) -> Vec<T> {
        self.layers[layer].experts[expert].apply(x)
    }

    pub fn forward(&self, x: &[T]) -> Result<ForwardTrace<T>> {
        if x.len() != self.hidden {
            return Err(Error::SampleLengthMismatch(x.len(), self.hidden));
        }
        let mut state = x.to_vec();
        let mut trace = ForwardTrace {
            input: x.to_vec(),
            router_logits: Vec::with_capacity(self.layers.len()),
            selected: Vec::with_capacity(self.layers.len()),
            gate_weights: Vec::with_capacity(self.layers.len()),
            output: Vec::new(),
        };
        for layer in &self.layers {
            let e = layer.experts.len();
            let logits = matvec(&layer.router, e, self.hidden, &state);
            let selected = top_k_indices(&logits, self.top_k.min(e));
            let weights = softmax_selected(&logits, &selected);
            let mut mixed = vec![T::zero(); self.hidden];
            for &i in &selected {
                let out = layer.experts[i].apply(&state);
                for (m, o) in mixed.iter_mut().zip(out) {
                    *m = *m + weights[i] * o;
                }
            }
            for (s, m) in state.iter_mut().zip(mixed) {
                *s = *s + m;
            }
            if state.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite);
            }
            trace.router_logits.push(logits);
            trace.selected.push(selected);
            trace.gate_weights.push(weights);
        }
        trace.output = state;
        Ok(trace)
    }
}

pub fn forward<T: Scalar>(manifest: &ModelManifest, x: &[T]) -> Result<ForwardTrace<T>> {
    ToyModel::load(manifest)?.forward(x)
}

/// `count` standard-normal inputs of length `hidden`, reproducible from `seed`.
pub fn probe_inputs(hidden: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..hidden).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

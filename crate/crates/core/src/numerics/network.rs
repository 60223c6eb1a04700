use std::collections::BTreeMap;

use super::layers::{self, conv_out_dim, ConvGeom, LayerSpec};
use super::tensor::Tensor;
use crate::error::{bail, Result};
use crate::rng::Rng;

/// Named tensors; parameter and gradient stores share this type.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore(BTreeMap<String, Tensor>);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, value: Tensor) {
        self.0.insert(key.into(), value);
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.0.get(key)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut Tensor> {
        self.0.get_mut(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self(
            self.0
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        )
    }

    /// True when both stores hold the same keys with the same shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|((ka, a), (kb, b))| ka == kb && a.shape() == b.shape())
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(Tensor::is_finite)
    }

    /// Moves every entry of `other` into `self`, replacing same-named ones.
    pub fn extend(&mut self, other: ParamStore) {
        self.0.extend(other.0);
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor> {
        self.0
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// A feed-forward stack of conv / dense / activation layers with its own
/// parameter and gradient stores.
///
/// The first axis of every input is the batch axis; `input_shape` describes
/// one sample. Dense layers flatten whatever per-sample shape they receive.
#[derive(Debug, Clone)]
pub struct Network {
    name: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
    params: ParamStore,
    grads: ParamStore,
    cache: Option<Vec<Tensor>>,
}

/// A differentiable parameterized map.
pub type FunctionApproximator = Network;

fn infer_shapes(input: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = vec![input.to_vec()];
    for (i, layer) in layers.iter().enumerate() {
        let cur = shapes.last().unwrap();
        let next = match *layer {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                if cur.len() != 3 || cur[0] != in_channels {
                    bail!(Shape, "layer {i}: conv expects [{in_channels}, H, W], got {cur:?}");
                }
                let (Some(oh), Some(ow)) = (
                    conv_out_dim(cur[1], kernel, stride, pad),
                    conv_out_dim(cur[2], kernel, stride, pad),
                ) else {
                    bail!(Shape, "layer {i}: kernel {kernel} does not fit input {cur:?}");
                };
                vec![out_channels, oh, ow]
            }
            LayerSpec::Dense { inputs, outputs } => {
                let n: usize = cur.iter().product();
                if n != inputs {
                    bail!(Shape, "layer {i}: dense expects {inputs} inputs, got {cur:?}");
                }
                vec![outputs]
            }
            LayerSpec::Relu | LayerSpec::Tanh => cur.clone(),
        };
        shapes.push(next);
    }
    Ok(shapes)
}

fn weight_key(name: &str, i: usize) -> String {
    format!("{name}.{i}.weight")
}

fn bias_key(name: &str, i: usize) -> String {
    format!("{name}.{i}.bias")
}

impl Network {
    /// Builds the network with weights uniform in `±1/sqrt(fan_in)` and zero biases.
    pub fn new(name: &str, input_shape: &[usize], layers: Vec<LayerSpec>, rng: &mut Rng) -> Result<Self> {
        let shapes = infer_shapes(input_shape, &layers)?;
        let mut params = ParamStore::new();
        for (i, layer) in layers.iter().enumerate() {
            if let Some((shape, fan_in)) = layer.weight_shape() {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| rng.uniform_range(-bound, bound) as f32)
                    .collect();
                params.insert(weight_key(name, i), Tensor::from_vec(&shape, data)?);
                let b = layer.bias_len().unwrap();
                params.insert(bias_key(name, i), Tensor::zeros(&[b]));
            }
        }
        let grads = params.zeros_like();
        Ok(Self {
            name: name.to_string(),
            input_shape: input_shape.to_vec(),
            layers,
            shapes,
            params,
            grads,
            cache: None,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    pub fn output_len(&self) -> usize {
        self.output_shape().iter().product()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable parameter access; invalidates cached activations.
    pub fn params_mut(&mut self) -> &mut ParamStore {
        self.cache = None;
        &mut self.params
    }

    pub fn grads(&self) -> &ParamStore {
        &self.grads
    }

    /// Splits borrows so an optimizer can read gradients while writing parameters.
    pub fn params_and_grads_mut(&mut self) -> (&mut ParamStore, &ParamStore) {
        self.cache = None;
        (&mut self.params, &self.grads)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|(_, g)| g.fill(0.0));
    }

    /// Replaces all parameters; shapes and keys must match.
    pub fn load_params(&mut self, params: &ParamStore) -> Result<()> {
        if !self.params.same_layout(params) {
            bail!(Shape, "parameter layout mismatch for network '{}'", self.name);
        }
        self.params = params.clone();
        self.cache = None;
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        if x.rank() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            bail!(
                Shape,
                "network '{}' expects [N, {:?}], got {:?}",
                self.name,
                self.input_shape,
                x.shape()
            );
        }
        Ok(x.shape()[0])
    }

    fn batched(&self, n: usize, layer_out: usize) -> Vec<usize> {
        let mut s = vec![n];
        s.extend_from_slice(&self.shapes[layer_out]);
        s
    }

    fn run_layer(&self, i: usize, x: &Tensor) -> Tensor {
        let n = x.batch();
        let mut y = Tensor::zeros(&self.batched(n, i + 1));
        match self.layers[i] {
            LayerSpec::Conv2d { stride, pad, kernel, .. } => {
                let inp = &self.shapes[i];
                let out = &self.shapes[i + 1];
                let g = ConvGeom {
                    c: inp[0],
                    h: inp[1],
                    w: inp[2],
                    k: kernel,
                    stride,
                    pad,
                    oh: out[1],
                    ow: out[2],
                };
                let w = self.params.get(&weight_key(&self.name, i)).unwrap().data();
                let b = self.params.get(&bias_key(&self.name, i)).unwrap().data();
                let mut col = vec![0.0; g.col_rows() * g.col_cols()];
                for s in 0..n {
                    layers::conv_forward(x.row(s), w, b, &g, &mut col, y.row_mut(s));
                }
            }
            LayerSpec::Dense { .. } => {
                let w = self.params.get(&weight_key(&self.name, i)).unwrap().data();
                let b = self.params.get(&bias_key(&self.name, i)).unwrap().data();
                layers::dense_forward(n, x.data(), w, b, y.data_mut());
            }
            LayerSpec::Relu => {
                for (o, &v) in y.data_mut().iter_mut().zip(x.data()) {
                    *o = v.max(0.0);
                }
            }
            LayerSpec::Tanh => {
                for (o, &v) in y.data_mut().iter_mut().zip(x.data()) {
                    *o = v.tanh();
                }
            }
        }
        y
    }

    /// Pure evaluation; leaves the backward cache untouched.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for i in 0..self.layers.len() {
            cur = self.run_layer(i, &cur);
        }
        Ok(cur)
    }

    /// The input followed by every layer output, without touching the backward cache.
    pub fn activations(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut acts = vec![x.clone()];
        for i in 0..self.layers.len() {
            let y = self.run_layer(i, acts.last().unwrap());
            acts.push(y);
        }
        Ok(acts)
    }

    /// Evaluation that keeps every intermediate activation for [`Network::backward`].
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for i in 0..self.layers.len() {
            let y = self.run_layer(i, acts.last().unwrap());
            acts.push(y);
        }
        let out = acts.last().unwrap().clone();
        self.cache = Some(acts);
        Ok(out)
    }

    /// Back-propagates `upstream` (shaped like the last forward output),
    /// accumulating parameter gradients and returning the input gradient.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let Some(acts) = self.cache.as_ref() else {
            bail!(State, "backward on '{}' without a preceding forward", self.name);
        };
        let out = acts.last().unwrap();
        if upstream.shape() != out.shape() {
            bail!(
                Shape,
                "upstream gradient {:?} does not match output {:?}",
                upstream.shape(),
                out.shape()
            );
        }
        let n = upstream.batch();
        let mut dy = upstream.clone();
        for i in (0..self.layers.len()).rev() {
            let x = &acts[i];
            let mut dx = Tensor::zeros(x.shape());
            match self.layers[i] {
                LayerSpec::Conv2d { stride, pad, kernel, .. } => {
                    let inp = &self.shapes[i];
                    let outs = &self.shapes[i + 1];
                    let g = ConvGeom {
                        c: inp[0],
                        h: inp[1],
                        w: inp[2],
                        k: kernel,
                        stride,
                        pad,
                        oh: outs[1],
                        ow: outs[2],
                    };
                    let wk = weight_key(&self.name, i);
                    let bk = bias_key(&self.name, i);
                    let w = self.params.get(&wk).unwrap().data();
                    let mut dw = std::mem::take(self.grads.get_mut(&wk).unwrap());
                    let mut db = std::mem::take(self.grads.get_mut(&bk).unwrap());
                    let mut col = vec![0.0; g.col_rows() * g.col_cols()];
                    for s in 0..n {
                        layers::conv_backward(
                            x.row(s),
                            w,
                            dy.row(s),
                            &g,
                            &mut col,
                            dw.data_mut(),
                            db.data_mut(),
                            dx.row_mut(s),
                        );
                    }
                    *self.grads.get_mut(&wk).unwrap() = dw;
                    *self.grads.get_mut(&bk).unwrap() = db;
                }
                LayerSpec::Dense { .. } => {
                    let wk = weight_key(&self.name, i);
                    let bk = bias_key(&self.name, i);
                    let w = self.params.get(&wk).unwrap().data();
                    let mut dw = std::mem::take(self.grads.get_mut(&wk).unwrap());
                    let mut db = std::mem::take(self.grads.get_mut(&bk).unwrap());
                    layers::dense_backward(
                        n,
                        x.data(),
                        w,
                        dy.data(),
                        dw.data_mut(),
                        db.data_mut(),
                        dx.data_mut(),
                    );
                    *self.grads.get_mut(&wk).unwrap() = dw;
                    *self.grads.get_mut(&bk).unwrap() = db;
                }
                LayerSpec::Relu => {
                    for ((d, &g), &v) in dx.data_mut().iter_mut().zip(dy.data()).zip(x.data()) {
                        *d = if v > 0.0 { g } else { 0.0 };
                    }
                }
                LayerSpec::Tanh => {
                    let y = &acts[i + 1];
                    for ((d, &g), &t) in dx.data_mut().iter_mut().zip(dy.data()).zip(y.data()) {
                        *d = g * (1.0 - t * t);
                    }
                }
            }
            dy = dx;
        }
        Ok(dy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> Rng {
        Rng::new(11, "net-test")
    }

    #[test]
    fn identity_dense() {
        let mut net = Network::new("d", &[2], vec![LayerSpec::dense(2, 2)], &mut rng()).unwrap();
        let p = net.params_mut();
        *p.get_mut("d.0.weight").unwrap() = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(net.infer(&x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let layers = vec![LayerSpec::dense(3, 4), LayerSpec::Tanh, LayerSpec::dense(4, 2), LayerSpec::Tanh];
        let mut net = Network::new("z", &[3], layers, &mut rng()).unwrap();
        net.params_mut().iter_mut().for_each(|(_, t)| t.fill(0.0));
        let x = Tensor::from_vec(&[2, 3], vec![0.3, -1.0, 2.0, 5.0, 1.0, -3.0]).unwrap();
        assert!(net.infer(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_kernel_shifts_impulse() {
        // Single tap at (2, 2): output (oy, ox) reads input (oy + 2, ox + 2),
        // so an impulse at (3, 4) moves to (1, 2).
        let mut net = Network::new("c", &[1, 5, 5], vec![LayerSpec::conv(1, 1, 3, 1)], &mut rng()).unwrap();
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[8] = 1.0; // tap (ky = 2, kx = 2)
        *net.params_mut().get_mut("c.0.weight").unwrap() = w;
        let mut x = Tensor::zeros(&[1, 1, 5, 5]);
        x.data_mut()[3 * 5 + 4] = 1.0; // impulse at (3, 4)
        let y = net.infer(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        // oracle: y[oy][ox] = Σ w[ky][kx] x[oy+ky][ox+kx]
        let mut expect = [0.0f32; 9];
        for oy in 0..3 {
            for ox in 0..3 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        expect[oy * 3 + ox] += net.params().get("c.0.weight").unwrap().data()[ky * 3 + kx]
                            * x.data()[(oy + ky) * 5 + ox + kx];
                    }
                }
            }
        }
        assert_eq!(y.data(), &expect);
        assert_eq!(y.data()[1 * 3 + 2], 1.0);
    }

    #[test]
    fn conv_shape_algebra() {
        for (n, k, s, p) in [(48, 3, 2, 0), (48, 3, 1, 0), (7, 3, 1, 1), (84, 5, 3, 2), (4, 3, 1, 0), (9, 4, 2, 1)] {
            let spec = LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 3,
                kernel: k,
                stride: s,
                pad: p,
            };
            let net = Network::new("s", &[2, n, n], vec![spec], &mut rng()).unwrap();
            let expect = (n + 2 * p - k) / s + 1;
            assert_eq!(net.output_shape(), &[3, expect, expect]);
            let x = Tensor::zeros(&[1, 2, n, n]);
            assert_eq!(net.infer(&x).unwrap().shape(), &[1, 3, expect, expect]);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let net = Network::new("m", &[3], vec![LayerSpec::dense(3, 1)], &mut rng()).unwrap();
        let err = net.infer(&Tensor::zeros(&[1, 4])).unwrap_err();
        assert!(err.to_string().contains("expects"));
        assert!(Network::new("m", &[3], vec![LayerSpec::dense(4, 1)], &mut rng()).is_err());
    }

    #[test]
    fn backward_requires_forward() {
        let mut net = Network::new("b", &[2], vec![LayerSpec::dense(2, 1)], &mut rng()).unwrap();
        assert!(net.backward(&Tensor::zeros(&[1, 1])).is_err());
    }

    #[test]
    fn linear_gradient_is_outer_product() {
        let mut net = Network::new("l", &[3], vec![LayerSpec::dense(3, 2)], &mut rng()).unwrap();
        let x = Tensor::from_vec(&[1, 3], vec![0.5, -2.0, 4.0]).unwrap();
        net.forward(&x).unwrap();
        net.zero_grad();
        net.backward(&Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
        let dw = net.grads().get("l.0.weight").unwrap();
        assert_eq!(dw.data(), &[0.5, -2.0, 4.0, 0.5, -2.0, 4.0]);
        assert_eq!(net.grads().get("l.0.bias").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let layers = vec![LayerSpec::conv(2, 3, 3, 1), LayerSpec::Relu, LayerSpec::dense(12, 2)];
        let mut net = Network::new("zu", &[2, 4, 4], layers, &mut rng()).unwrap();
        let mut r = rng();
        let x = Tensor::from_vec(&[2, 2, 4, 4], (0..64).map(|_| r.normal_f32()).collect()).unwrap();
        net.forward(&x).unwrap();
        net.zero_grad();
        let dx = net.backward(&Tensor::zeros(&[2, 2])).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(net.grads().iter().all(|(_, g)| g.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn rows_do_not_depend_on_batch_size() {
        let layers = vec![
            LayerSpec::conv(3, 4, 3, 2),
            LayerSpec::Relu,
            LayerSpec::dense(4 * 4 * 4, 37),
            LayerSpec::Tanh,
            LayerSpec::dense(37, 5),
        ];
        let net = Network::new("p", &[3, 9, 9], layers, &mut rng()).unwrap();
        let mut r = rng();
        let big = Tensor::from_vec(&[23, 3, 9, 9], (0..23 * 243).map(|_| r.uniform_f32()).collect()).unwrap();
        let out = net.infer(&big).unwrap();
        for (i, sample) in big.unstack().into_iter().enumerate() {
            let one = net.infer(&Tensor::stack(&[sample]).unwrap()).unwrap();
            assert_eq!(one.data(), out.row(i), "row {i}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let layers = vec![LayerSpec::conv(1, 2, 3, 1), LayerSpec::Tanh, LayerSpec::dense(18, 3)];
        let mut net = Network::new("f", &[1, 5, 5], layers, &mut rng()).unwrap();
        let mut r = rng();
        let x = Tensor::from_vec(&[4, 1, 5, 5], (0..100).map(|_| r.normal_f32()).collect()).unwrap();
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        let c = net.infer(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }
}

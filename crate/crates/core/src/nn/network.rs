use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::ops::Range;

use rand::Rng;

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative at pre-activation `z`; relu uses 0 at the kink.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// `y = W x + b` with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl AffineLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::Shape(format!(
                "bias width {} for a layer with {} outputs",
                bias.len(),
                weights.rows()
            )));
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::Numeric("non-finite bias".into()));
        }
        Ok(AffineLayer { weights, bias })
    }

    /// Glorot-uniform weights in `±√(6/(in+out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let data = (0..inputs * outputs)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        AffineLayer {
            weights: Matrix::from_vec(outputs, inputs, data).expect("sized by construction"),
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.weights.matvec(x)?;
        for (zi, bi) in z.iter_mut().zip(&self.bias) {
            *zi += bi;
        }
        Ok(z)
    }

    pub fn param_count(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub affine: AffineLayer,
    pub activation: Activation,
}

impl Layer {
    pub fn new(affine: AffineLayer, activation: Activation) -> Self {
        Layer { affine, activation }
    }
}

/// Stack of dense layers. The output of layer `bottleneck` is the latent
/// mean; layers after it form the classifier head.
///
/// A network with no layers is the identity map.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNetwork {
    layers: Vec<Layer>,
    bottleneck: usize,
}

impl DenseNetwork {
    pub fn new(layers: Vec<Layer>, bottleneck: usize) -> Result<Self> {
        if !layers.is_empty() && bottleneck >= layers.len() {
            return Err(Error::Shape(format!(
                "bottleneck index {bottleneck} with {} layers",
                layers.len()
            )));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].affine.outputs() != pair[1].affine.inputs() {
                return Err(Error::Shape(format!(
                    "layer {i} emits {} values but layer {} expects {}",
                    pair[0].affine.outputs(),
                    i + 1,
                    pair[1].affine.inputs()
                )));
            }
        }
        Ok(DenseNetwork { layers, bottleneck })
    }

    /// Randomly initialised network over `widths` (input first). `activations`
    /// has one entry per layer.
    pub fn glorot<R: Rng + ?Sized>(
        widths: &[usize],
        activations: &[Activation],
        bottleneck: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() != activations.len() + 1 {
            return Err(Error::Config(format!(
                "{} widths need {} activations, got {}",
                widths.len(),
                widths.len().saturating_sub(1),
                activations.len()
            )));
        }
        let layers = widths
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| Layer::new(AffineLayer::glorot(w[0], w[1], rng), act))
            .collect();
        DenseNetwork::new(layers, bottleneck)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn bottleneck(&self) -> usize {
        self.bottleneck
    }

    /// Layers up to and including the bottleneck.
    pub fn trunk(&self) -> &[Layer] {
        &self.layers[self.trunk_range()]
    }

    /// Classifier layers after the bottleneck.
    pub fn head(&self) -> &[Layer] {
        &self.layers[self.head_range()]
    }

    pub fn head_mut(&mut self) -> &mut [Layer] {
        let range = self.head_range();
        &mut self.layers[range]
    }

    fn trunk_range(&self) -> Range<usize> {
        0..(self.bottleneck + 1).min(self.layers.len())
    }

    fn head_range(&self) -> Range<usize> {
        (self.bottleneck + 1).min(self.layers.len())..self.layers.len()
    }

    pub fn input_width(&self) -> Option<usize> {
        self.layers.first().map(|l| l.affine.inputs())
    }

    pub fn output_width(&self) -> Option<usize> {
        self.layers.last().map(|l| l.affine.outputs())
    }

    pub fn latent_width(&self) -> Option<usize> {
        self.layers.get(self.bottleneck).map(|l| l.affine.outputs())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.affine.param_count()).sum()
    }

    /// Parameters in canonical order: per layer, weights row-major then bias.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.affine.weights.as_slice().iter().chain(&l.affine.bias))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| {
            l.affine
                .weights
                .as_mut_slice()
                .iter_mut()
                .chain(l.affine.bias.iter_mut())
        })
    }

    /// Mutable access to the `index`-th parameter in [`params`](Self::params) order.
    pub fn param_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for layer in &mut self.layers {
            let nw = layer.affine.weights.rows() * layer.affine.weights.cols();
            if index < nw {
                return Some(&mut layer.affine.weights.as_mut_slice()[index]);
            }
            index -= nw;
            if index < layer.affine.bias.len() {
                return Some(&mut layer.affine.bias[index]);
            }
            index -= layer.affine.bias.len();
        }
        None
    }

    /// Hash of the exact parameter bits, for frozen-parameter checks.
    pub fn fingerprint(&self) -> u64 {
        fingerprint_layers(&self.layers)
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardPass> {
        forward_layers(&self.layers, x)
    }

    pub fn backward(&self, pass: &ForwardPass, upstream: &[f64]) -> Result<Gradients> {
        backward_layers(&self.layers, pass, upstream)
    }
}

pub fn fingerprint_layers(layers: &[Layer]) -> u64 {
    let mut h = DefaultHasher::new();
    for l in layers {
        l.affine.weights.rows().hash(&mut h);
        l.affine.weights.cols().hash(&mut h);
        for v in l.affine.weights.as_slice().iter().chain(&l.affine.bias) {
            v.to_bits().hash(&mut h);
        }
        (l.activation == Activation::Relu).hash(&mut h);
    }
    h.finish()
}

/// Cached intermediate values of one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub input: Vec<f64>,
    pub pre_activations: Vec<Vec<f64>>,
    pub activations: Vec<Vec<f64>>,
}

impl ForwardPass {
    /// Final output (pre-softmax class scores for a classifier).
    pub fn output(&self) -> &[f64] {
        self.activations.last().unwrap_or(&self.input)
    }

    pub fn activation(&self, layer: usize) -> &[f64] {
        &self.activations[layer]
    }

    /// Smallest |pre-activation| over relu units.
    pub fn min_relu_margin(&self, layers: &[Layer]) -> f64 {
        layers
            .iter()
            .zip(&self.pre_activations)
            .filter(|(l, _)| l.activation == Activation::Relu)
            .flat_map(|(_, z)| z.iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn forward_layers(layers: &[Layer], x: &[f64]) -> Result<ForwardPass> {
    if let Some(first) = layers.first() {
        if first.affine.inputs() != x.len() {
            return Err(Error::Shape(format!(
                "input width {} but network expects {}",
                x.len(),
                first.affine.inputs()
            )));
        }
    }
    let mut pre_activations = Vec::with_capacity(layers.len());
    let mut activations: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    for layer in layers {
        let input = activations.last().map_or(x, Vec::as_slice);
        let z = layer.affine.apply(input)?;
        activations.push(z.iter().map(|&v| layer.activation.apply(v)).collect());
        pre_activations.push(z);
    }
    Ok(ForwardPass {
        input: x.to_vec(),
        pre_activations,
        activations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Gradients of a scalar loss wrt every parameter and the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
    pub input: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(layers: &[Layer]) -> Self {
        Gradients {
            layers: layers
                .iter()
                .map(|l| LayerGradient {
                    weights: Matrix::zeros(l.affine.outputs(), l.affine.inputs()),
                    bias: vec![0.0; l.affine.outputs()],
                })
                .collect(),
            input: vec![0.0; layers.first().map_or(0, |l| l.affine.inputs())],
        }
    }

    /// Parameter gradients in the same order as [`DenseNetwork::params`].
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|g| g.weights.as_slice().iter().chain(&g.bias))
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.as_mut_slice().iter_mut().zip(b.weights.as_slice()) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
        for (x, y) in self.input.iter_mut().zip(&other.input) {
            *x += y;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.layers {
            g.weights.as_mut_slice().iter_mut().for_each(|v| *v *= factor);
            g.bias.iter_mut().for_each(|v| *v *= factor);
        }
        self.input.iter_mut().for_each(|v| *v *= factor);
    }
}

/// Reverse-mode pass given `upstream = ∂loss/∂output`.
pub fn backward_layers(layers: &[Layer], pass: &ForwardPass, upstream: &[f64]) -> Result<Gradients> {
    if pass.activations.len() != layers.len() || pass.pre_activations.len() != layers.len() {
        return Err(Error::State(format!(
            "forward cache holds {} layers, network has {}",
            pass.activations.len(),
            layers.len()
        )));
    }
    if upstream.len() != pass.output().len() {
        return Err(Error::Shape(format!(
            "upstream gradient width {} for output width {}",
            upstream.len(),
            pass.output().len()
        )));
    }
    let mut grads = Vec::with_capacity(layers.len());
    let mut delta = upstream.to_vec();
    for (idx, layer) in layers.iter().enumerate().rev() {
        let z = &pass.pre_activations[idx];
        if z.len() != layer.affine.outputs() {
            return Err(Error::State(format!("stale forward cache at layer {idx}")));
        }
        for (d, &zi) in delta.iter_mut().zip(z) {
            *d *= layer.activation.derivative(zi);
        }
        let input = if idx == 0 {
            &pass.input
        } else {
            &pass.activations[idx - 1]
        };
        let mut w = Matrix::zeros(layer.affine.outputs(), layer.affine.inputs());
        for (i, &d) in delta.iter().enumerate() {
            if d != 0.0 {
                for (j, &xj) in input.iter().enumerate() {
                    w.set(i, j, d * xj);
                }
            }
        }
        let next = layer.affine.weights.matvec_transposed(&delta)?;
        grads.push(LayerGradient {
            weights: w,
            bias: delta,
        });
        delta = next;
    }
    grads.reverse();
    Ok(Gradients {
        layers: grads,
        input: delta,
    })
}

/// Output of an affine stack on `x` without caching.
pub fn evaluate_layers(layers: &[Layer], x: &[f64]) -> Result<Vec<f64>> {
    let mut cur = x.to_vec();
    for layer in layers {
        if layer.affine.inputs() != cur.len() {
            return Err(Error::Shape(format!(
                "input width {} but layer expects {}",
                cur.len(),
                layer.affine.inputs()
            )));
        }
        cur = (0..layer.affine.outputs())
            .map(|i| {
                layer
                    .activation
                    .apply(dot(layer.affine.weights.row(i), &cur) + layer.affine.bias[i])
            })
            .collect();
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(weights: Vec<Vec<f64>>, bias: Vec<f64>, act: Activation) -> DenseNetwork {
        let affine = AffineLayer::new(Matrix::from_rows(&weights).unwrap(), bias).unwrap();
        DenseNetwork::new(vec![Layer::new(affine, act)], 0).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = single(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0], Activation::Identity);
        assert_eq!(net.forward(&[1.0, 2.0]).unwrap().output(), &[1.0, 2.0]);
    }

    #[test]
    fn affine_relu_hand_evaluation() {
        let net = single(vec![vec![1.0, 0.0], vec![0.0, -1.0]], vec![0.0, 1.0], Activation::Relu);
        let pass = net.forward(&[2.0, 3.0]).unwrap();
        assert_eq!(pass.output(), &[2.0, 0.0]);
        assert_eq!(pass.pre_activations[0], vec![2.0, -2.0]);
    }

    #[test]
    fn zero_network_gives_zero_scores() {
        let net = single(vec![vec![0.0; 3]; 2], vec![0.0; 2], Activation::Identity);
        assert_eq!(net.forward(&[5.0, -1.0, 7.0]).unwrap().output(), &[0.0, 0.0]);
    }

    #[test]
    fn input_shape_error() {
        let net = single(vec![vec![1.0, 0.0]], vec![0.0], Activation::Identity);
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn identity_backward_selects_component() {
        let net = single(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0], Activation::Identity);
        let pass = net.forward(&[0.3, -0.7]).unwrap();
        let g = net.backward(&pass, &[1.0, 0.0]).unwrap();
        assert_eq!(g.input, vec![1.0, 0.0]);
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        let net = single(vec![vec![1.0, 0.0], vec![0.0, -1.0]], vec![0.0, 1.0], Activation::Relu);
        let pass = net.forward(&[2.0, 3.0]).unwrap();
        let g = net.backward(&pass, &[0.0, 1.0]).unwrap();
        assert_eq!(g.layers[0].weights.row(1), &[0.0, 0.0]);
        assert_eq!(g.layers[0].bias[1], 0.0);
        assert_eq!(g.input, vec![0.0, 0.0]);
    }

    #[test]
    fn mismatched_cache_is_state_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DenseNetwork::glorot(
            &[3, 4, 2],
            &[Activation::Relu, Activation::Identity],
            0,
            &mut rng,
        )
        .unwrap();
        let other = single(vec![vec![1.0, 0.0, 0.0]], vec![0.0], Activation::Identity);
        let pass = other.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(net.backward(&pass, &[1.0]), Err(Error::State(_))));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = DenseNetwork::glorot(
            &[5, 7, 3],
            &[Activation::Relu, Activation::Identity],
            0,
            &mut rng,
        )
        .unwrap();
        let x = [0.1, -0.2, 0.3, 0.4, -0.5];
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.output()), bits(b.output()));
        assert_eq!(bits(a.output()), bits(&evaluate_layers(net.layers(), &x).unwrap()));
    }

    #[test]
    fn glorot_respects_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = AffineLayer::glorot(10, 14, &mut rng);
        let limit = (6.0f64 / 24.0).sqrt();
        assert!(layer.weights.as_slice().iter().all(|w| w.abs() <= limit));
        assert!(layer.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn rejects_bad_bottleneck_and_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Layer::new(AffineLayer::glorot(2, 3, &mut rng), Activation::Relu);
        let b = Layer::new(AffineLayer::glorot(4, 1, &mut rng), Activation::Identity);
        assert!(DenseNetwork::new(vec![a.clone()], 1).is_err());
        assert!(DenseNetwork::new(vec![a, b], 0).is_err());
    }

    #[test]
    fn trunk_and_head_split_at_bottleneck() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = DenseNetwork::glorot(
            &[4, 6, 3, 2],
            &[Activation::Relu, Activation::Identity, Activation::Identity],
            1,
            &mut rng,
        )
        .unwrap();
        assert_eq!(net.trunk().len(), 2);
        assert_eq!(net.head().len(), 1);
        assert_eq!(net.latent_width(), Some(3));
        assert_eq!(net.params().count(), net.param_count());
    }
}

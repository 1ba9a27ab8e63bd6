use rand::Rng;

use crate::{Layer, NnError, Tensor};

/// Anything that exposes an ordered list of parameter tensors.
///
/// Gradients, optimizer velocities and checkpoint files all rely on the
/// order returned here staying fixed for the lifetime of a model.
pub trait Parameterized {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// Overwrites every parameter with the matching one from `other`.
    fn copy_from(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for (dst, src) in self.parameters_mut().into_iter().zip(other.parameters()) {
            dst.data_mut().copy_from_slice(src.data());
        }
    }
}

/// One gradient tensor per parameter tensor, in [`Parameterized`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    pub fn zeros_like<P: Parameterized + ?Sized>(model: &P) -> Self {
        Gradients(
            model
                .parameters()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        )
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.0 {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }

    /// Concatenates gradient sets of sub-models in order.
    pub fn concat(parts: Vec<Gradients>) -> Self {
        Gradients(parts.into_iter().flat_map(|g| g.0).collect())
    }

    /// Splits into consecutive chunks of the given tensor counts.
    pub fn split(self, counts: &[usize]) -> Vec<Gradients> {
        let mut it = self.0.into_iter();
        counts
            .iter()
            .map(|&n| Gradients(it.by_ref().take(n).collect()))
            .collect()
    }
}

/// Sequential feed-forward network.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

/// Activations recorded during a forward pass, input first.
#[derive(Debug, Clone)]
pub struct Trace {
    activations: Vec<Tensor>,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        self.activations.last().expect("trace holds the input")
    }
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    /// Dense ReLU stack `sizes[0] → … → sizes[n-1]` with a linear output.
    pub fn mlp<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        let mut layers = Vec::new();
        for (i, pair) in sizes.windows(2).enumerate() {
            layers.push(Layer::dense(pair[0], pair[1], rng));
            if i + 2 < sizes.len() {
                layers.push(Layer::Relu);
            }
        }
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.forward(i, &cur)?;
        }
        Ok(cur)
    }

    pub fn forward_trace(&self, x: &Tensor) -> Result<Trace, NnError> {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.forward(i, activations.last().expect("non-empty"))?;
            activations.push(next);
        }
        Ok(Trace { activations })
    }

    /// Backpropagates `grad_out` through a recorded pass. Returns the
    /// parameter gradients and the gradient with respect to the input.
    pub fn backward_trace(
        &self,
        trace: &Trace,
        grad_out: &Tensor,
    ) -> Result<(Gradients, Tensor), NnError> {
        let mut per_layer: Vec<Vec<Tensor>> = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (pg, gx) = layer.backward(i, &trace.activations[i], &g)?;
            per_layer.push(pg);
            g = gx;
        }
        per_layer.reverse();
        Ok((Gradients(per_layer.into_iter().flatten().collect()), g))
    }

    /// Parameter gradients of a loss whose derivative with respect to the
    /// network output is `loss_grad`.
    pub fn backward(&self, x: &Tensor, loss_grad: &Tensor) -> Result<Gradients, NnError> {
        let trace = self.forward_trace(x)?;
        Ok(self.backward_trace(&trace, loss_grad)?.0)
    }
}

impl Parameterized for Network {
    fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::parameters).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::parameters_mut).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dense(w: Vec<f64>, out: usize, inp: usize, b: Vec<f64>) -> Layer {
        Layer::Dense {
            weight: Tensor::new(vec![out, inp], w).unwrap(),
            bias: Tensor::vector(b),
        }
    }

    #[test]
    fn dense_linear_map() {
        let net = Network::new(vec![dense(vec![1.0, 1.0], 1, 2, vec![0.0])]);
        let y = net.forward(&Tensor::vector(vec![3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let net = Network::new(vec![Layer::Relu]);
        let y = net.forward(&Tensor::vector(vec![-1.0, 0.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_conv_preserves_grid() {
        let net = Network::new(vec![Layer::Conv2d {
            weight: Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(),
            bias: Tensor::vector(vec![0.0]),
        }]);
        let x = Tensor::new(vec![1, 3, 4], (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn same_padding_keeps_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (kh, kw) in [(2, 2), (3, 3), (2, 3), (1, 4)] {
            let net = Network::new(vec![Layer::conv2d(2, 5, kh, kw, &mut rng)]);
            let x = Tensor::zeros(&[2, 3, 8]);
            assert_eq!(net.forward(&x).unwrap().shape(), &[5, 3, 8]);
        }
    }

    #[test]
    fn shape_error_names_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Network::mlp(&[3, 4, 2], &mut rng);
        let err = net.forward(&Tensor::vector(vec![1.0; 5])).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }

    #[test]
    fn hand_chain_rule() {
        // loss = (w x - t)^2, dloss/dy = 2 (y - t)
        let net = Network::new(vec![dense(vec![2.0], 1, 1, vec![0.0])]);
        let x = Tensor::vector(vec![3.0]);
        let y = net.forward(&x).unwrap().data()[0];
        let g = net.backward(&x, &Tensor::vector(vec![2.0 * (y - 0.0)])).unwrap();
        assert_eq!(g.0[0].data(), &[36.0]);
    }

    #[test]
    fn zero_loss_grad_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Network::new(vec![
            Layer::conv2d(1, 3, 2, 2, &mut rng),
            Layer::Relu,
            Layer::Flatten,
            Layer::dense(3 * 2 * 4, 5, &mut rng),
        ]);
        let x = Tensor::new(vec![1, 2, 4], vec![0.3; 8]).unwrap();
        let g = net.backward(&x, &Tensor::zeros(&[5])).unwrap();
        assert!(g.0.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert_eq!(g.0.len(), net.parameters().len());
    }

    #[test]
    fn forward_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::mlp(&[6, 16, 16, 3], &mut rng);
        let x = Tensor::vector(vec![0.1, -0.5, 2.0, 0.0, 1.5, -3.0]);
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn parameter_count_sums_elements() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::mlp(&[4, 8, 2], &mut rng);
        assert_eq!(net.parameter_count(), 4 * 8 + 8 + 8 * 2 + 2);
    }
}

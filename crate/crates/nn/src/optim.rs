use crate::{Gradients, Parameterized, Tensor};

/// Step-decay learning-rate schedule: the rate is multiplied by `factor`
/// after every `every` completed epochs. `every = None` keeps it fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDecay {
    pub factor: f64,
    pub every: Option<usize>,
}

impl StepDecay {
    pub const NONE: StepDecay = StepDecay {
        factor: 1.0,
        every: None,
    };

    pub fn halving_every(epochs: usize) -> Self {
        StepDecay {
            factor: 0.5,
            every: Some(epochs),
        }
    }
}

/// Stochastic gradient descent with classical momentum:
/// `v ← μ·v + g`, `p ← p − η·v`.
#[derive(Debug, Clone)]
pub struct Sgdm {
    learning_rate: f64,
    momentum: f64,
    velocity: Vec<Tensor>,
    schedule: StepDecay,
    epochs: usize,
}

impl Sgdm {
    pub fn new<P: Parameterized + ?Sized>(
        model: &P,
        learning_rate: f64,
        momentum: f64,
        schedule: StepDecay,
    ) -> Self {
        assert!(learning_rate > 0.0, "learning rate must be positive");
        assert!((0.0..1.0).contains(&momentum), "momentum must lie in [0, 1)");
        Self {
            learning_rate,
            momentum,
            velocity: model
                .parameters()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
            schedule,
            epochs: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn step<P: Parameterized + ?Sized>(&mut self, model: &mut P, grads: &Gradients) {
        let params = model.parameters_mut();
        assert_eq!(params.len(), grads.0.len(), "gradient set does not mirror parameters");
        for ((p, v), g) in params.into_iter().zip(&mut self.velocity).zip(&grads.0) {
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
            for ((pv, vv), gv) in p
                .data_mut()
                .iter_mut()
                .zip(v.data_mut().iter_mut())
                .zip(g.data())
            {
                *vv = self.momentum * *vv + gv;
                *pv -= self.learning_rate * *vv;
            }
        }
    }

    /// Marks the end of a training epoch, applying the decay schedule.
    pub fn end_epoch(&mut self) {
        self.epochs += 1;
        if let Some(every) = self.schedule.every {
            if every > 0 && self.epochs % every == 0 {
                self.learning_rate *= self.schedule.factor;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Layer, Network};

    fn scalar_net(p: f64) -> Network {
        Network::new(vec![Layer::Dense {
            weight: Tensor::new(vec![1, 1], vec![p]).unwrap(),
            bias: Tensor::vector(vec![0.0]),
        }])
    }

    fn grads(g: f64) -> Gradients {
        Gradients(vec![
            Tensor::new(vec![1, 1], vec![g]).unwrap(),
            Tensor::vector(vec![0.0]),
        ])
    }

    fn weight(net: &Network) -> f64 {
        net.parameters()[0].data()[0]
    }

    #[test]
    fn zero_momentum_is_plain_descent() {
        let mut net = scalar_net(1.5);
        let mut opt = Sgdm::new(&net, 0.1, 0.0, StepDecay::NONE);
        opt.step(&mut net, &grads(2.0));
        assert_eq!(weight(&net), 1.5 - 0.1 * 2.0);
        opt.step(&mut net, &grads(-1.0));
        assert_eq!(weight(&net), 1.5 - 0.1 * 2.0 + 0.1 * 1.0);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut net = scalar_net(0.7);
        let mut opt = Sgdm::new(&net, 0.3, 0.9, StepDecay::NONE);
        opt.step(&mut net, &grads(0.0));
        assert_eq!(weight(&net), 0.7);
    }

    #[test]
    fn two_momentum_steps() {
        let mut net = scalar_net(0.0);
        let mut opt = Sgdm::new(&net, 0.1, 0.9, StepDecay::NONE);
        opt.step(&mut net, &grads(1.0));
        opt.step(&mut net, &grads(1.0));
        assert!((weight(&net) - (-0.29)).abs() < 1e-15);
    }

    #[test]
    fn step_decay_halves() {
        let net = scalar_net(0.0);
        let mut opt = Sgdm::new(&net, 0.8, 0.0, StepDecay::halving_every(10));
        for _ in 0..9 {
            opt.end_epoch();
        }
        assert_eq!(opt.learning_rate(), 0.8);
        opt.end_epoch();
        assert_eq!(opt.learning_rate(), 0.4);
        for _ in 0..10 {
            opt.end_epoch();
        }
        assert_eq!(opt.learning_rate(), 0.2);
    }
}

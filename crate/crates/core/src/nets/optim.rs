use super::{Component, ModelBundle, Params, Real};

/// Adaptive-moment gradient descent over one parameter set.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: T) -> Self {
        Adam {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut dyn Params<T>, grads: &dyn Params<T>) {
        let gs = grads.tensors();
        if self.m.is_empty() {
            self.m = gs.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = T::one() - self.beta1.powi(self.t);
        let bc2 = T::one() - self.beta2.powi(self.t);
        let step = self.lr * bc2.sqrt() / bc1;
        let eps_hat = self.eps * bc2.sqrt();
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(gs)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * g[i] * g[i];
                p[i] = p[i] - step * m[i] / (v[i].sqrt() + eps_hat);
            }
        }
    }
}

/// One Adam per component, owning exactly the components its loss may train.
#[derive(Debug, Clone)]
pub struct GroupOptimizer<T> {
    groups: Vec<(Component, Adam<T>)>,
}

impl<T: Real> GroupOptimizer<T> {
    pub fn new(components: &[Component], lr: T) -> Self {
        assert!(
            !components.contains(&Component::FEma),
            "the EMA encoder is never optimized by gradient"
        );
        GroupOptimizer {
            groups: components.iter().map(|&c| (c, Adam::new(lr))).collect(),
        }
    }

    pub fn components(&self) -> Vec<Component> {
        self.groups.iter().map(|(c, _)| *c).collect()
    }

    pub fn step(&mut self, bundle: &mut ModelBundle<T>, grads: &ModelBundle<T>) {
        for (c, adam) in &mut self.groups {
            adam.step(bundle.component_mut(*c), grads.component(*c));
        }
    }
}

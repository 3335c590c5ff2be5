use nalgebra::DVector;

use crate::objective::{PartitionedProblem, Weights};

/// View of a problem with every personal block frozen at fixed values, so
/// only `u` is trainable. Used to run FedAvg through the FedSim loop.
pub struct FrozenPersonal<'a, P: ?Sized> {
    inner: &'a P,
    frozen: Vec<DVector<f64>>,
    empty: DVector<f64>,
}

impl<'a, P: PartitionedProblem + ?Sized> FrozenPersonal<'a, P> {
    pub fn new(inner: &'a P, frozen: Vec<DVector<f64>>) -> Self {
        Self {
            inner,
            frozen,
            empty: DVector::zeros(0),
        }
    }

    pub fn frozen(&self) -> &[DVector<f64>] {
        &self.frozen
    }

    pub fn empty_personal(&self) -> Vec<DVector<f64>> {
        vec![self.empty.clone(); self.frozen.len()]
    }
}

impl<P: PartitionedProblem + ?Sized> PartitionedProblem for FrozenPersonal<'_, P> {
    fn num_devices(&self) -> usize {
        self.inner.num_devices()
    }

    fn shared_dim(&self) -> usize {
        self.inner.shared_dim()
    }

    fn personal_dim(&self, _i: usize) -> usize {
        0
    }

    fn weights(&self) -> &Weights {
        self.inner.weights()
    }

    fn device_value(&self, i: usize, u: &DVector<f64>, _v: &DVector<f64>) -> f64 {
        self.inner.device_value(i, u, &self.frozen[i])
    }

    fn device_grads(&self, i: usize, u: &DVector<f64>, _v: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (self.inner.device_grad_u(i, u, &self.frozen[i]), self.empty.clone())
    }

    fn sample_count(&self, i: usize) -> Option<usize> {
        self.inner.sample_count(i)
    }

    fn batch_grads(
        &self,
        i: usize,
        u: &DVector<f64>,
        _v: &DVector<f64>,
        batch: &[usize],
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        self.inner
            .batch_grads(i, u, &self.frozen[i], batch)
            .map(|(gu, _)| (gu, self.empty.clone()))
    }

    fn heldout_value(&self, i: usize, u: &DVector<f64>, _v: &DVector<f64>) -> Option<f64> {
        self.inner.heldout_value(i, u, &self.frozen[i])
    }
}

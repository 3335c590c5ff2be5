//! Linear additive model: the personal part fits the residual of the shared
//! part. Device loss is `1/(2N_i) sum_j (y_j - x_j'u - z_j'v_i)^2`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::container::Container;
use crate::error::{Error, Result};
use crate::objective::{PartitionedProblem, Weights};
use crate::sampling::{Purpose, StreamKey};

#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveDevice {
    pub shared_x: DMatrix<f64>,
    pub personal_x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub heldout: Option<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)>,
}

impl AdditiveDevice {
    pub fn new(shared_x: DMatrix<f64>, personal_x: DMatrix<f64>, y: DVector<f64>) -> Self {
        Self {
            shared_x,
            personal_x,
            y,
            heldout: None,
        }
    }

    pub fn with_heldout(mut self, shared_x: DMatrix<f64>, personal_x: DMatrix<f64>, y: DVector<f64>) -> Self {
        self.heldout = Some((shared_x, personal_x, y));
        self
    }

    fn residual(x: &DMatrix<f64>, z: &DMatrix<f64>, y: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        y - x * u - z * v
    }

    fn loss(x: &DMatrix<f64>, z: &DMatrix<f64>, y: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        0.5 * Self::residual(x, z, y, u, v).norm_squared() / y.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveModel {
    devices: Vec<AdditiveDevice>,
    weights: Weights,
    shared_dim: usize,
}

/// Builds the additive least-squares problem from per-device designs.
pub fn make_additive_model(devices: Vec<AdditiveDevice>, weights: Option<Weights>) -> Result<AdditiveModel> {
    let n = devices.len();
    AdditiveModel::new(devices, weights.unwrap_or_else(|| Weights::uniform(n)))
}

impl AdditiveModel {
    pub fn new(devices: Vec<AdditiveDevice>, weights: Weights) -> Result<Self> {
        let shared_dim = devices
            .first()
            .map(|d| d.shared_x.ncols())
            .ok_or_else(|| Error::Construction("additive model needs at least one device".into()))?;
        if weights.len() != devices.len() {
            return Err(Error::Construction("one weight per device required".into()));
        }
        for (i, d) in devices.iter().enumerate() {
            let rows = d.y.len();
            if rows == 0 {
                return Err(Error::Construction(format!("device {i} has an empty dataset")));
            }
            if d.shared_x.ncols() != shared_dim {
                return Err(Error::DimensionMismatch {
                    what: "shared design",
                    device: Some(i),
                    expected: shared_dim,
                    found: d.shared_x.ncols(),
                });
            }
            if d.shared_x.nrows() != rows || d.personal_x.nrows() != rows {
                return Err(Error::Construction(format!("device {i}: design rows do not match targets")));
            }
            if let Some((x, z, y)) = &d.heldout {
                if x.ncols() != shared_dim || z.ncols() != d.personal_x.ncols() || x.nrows() != y.len() || z.nrows() != y.len() {
                    return Err(Error::Construction(format!("device {i}: held-out data has the wrong shape")));
                }
            }
        }
        Ok(Self {
            devices,
            weights,
            shared_dim,
        })
    }

    pub fn devices(&self) -> &[AdditiveDevice] {
        &self.devices
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("additive");
        c.push_scalars("n", vec![self.devices.len() as f64]);
        c.push_scalars("d0", vec![self.shared_dim as f64]);
        c.push_scalars("weights", self.weights.as_slice().to_vec());
        let col = |v: &DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        for (i, d) in self.devices.iter().enumerate() {
            c.push_matrix(format!("device{i}.X"), d.shared_x.clone());
            c.push_matrix(format!("device{i}.Z"), d.personal_x.clone());
            c.push_matrix(format!("device{i}.y"), col(&d.y));
            if let Some((x, z, y)) = &d.heldout {
                c.push_matrix(format!("device{i}.heldout.X"), x.clone());
                c.push_matrix(format!("device{i}.heldout.Z"), z.clone());
                c.push_matrix(format!("device{i}.heldout.y"), col(y));
            }
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("additive")?;
        let n = c.scalar_usize("n")?;
        let weights = Weights::new(c.scalars("weights")?.to_vec())?;
        let col = |m: &DMatrix<f64>| DVector::from_column_slice(m.as_slice());
        let devices = (0..n)
            .map(|i| {
                let mut d = AdditiveDevice::new(
                    c.matrix(&format!("device{i}.X"))?.clone(),
                    c.matrix(&format!("device{i}.Z"))?.clone(),
                    col(c.matrix(&format!("device{i}.y"))?),
                );
                if let Ok(x) = c.matrix(&format!("device{i}.heldout.X")) {
                    d = d.with_heldout(
                        x.clone(),
                        c.matrix(&format!("device{i}.heldout.Z"))?.clone(),
                        col(c.matrix(&format!("device{i}.heldout.y"))?),
                    );
                }
                Ok(d)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(devices, weights)
    }
}

impl PartitionedProblem for AdditiveModel {
    fn num_devices(&self) -> usize {
        self.devices.len()
    }

    fn shared_dim(&self) -> usize {
        self.shared_dim
    }

    fn personal_dim(&self, i: usize) -> usize {
        self.devices[i].personal_x.ncols()
    }

    fn weights(&self) -> &Weights {
        &self.weights
    }

    fn device_value(&self, i: usize, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        let d = &self.devices[i];
        AdditiveDevice::loss(&d.shared_x, &d.personal_x, &d.y, u, v)
    }

    fn device_grads(&self, i: usize, u: &DVector<f64>, v: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let d = &self.devices[i];
        let r = AdditiveDevice::residual(&d.shared_x, &d.personal_x, &d.y, u, v);
        let scale = -1.0 / d.y.len() as f64;
        (d.shared_x.tr_mul(&r) * scale, d.personal_x.tr_mul(&r) * scale)
    }

    fn sample_count(&self, i: usize) -> Option<usize> {
        Some(self.devices[i].y.len())
    }

    fn batch_grads(
        &self,
        i: usize,
        u: &DVector<f64>,
        v: &DVector<f64>,
        batch: &[usize],
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        let d = &self.devices[i];
        let x = d.shared_x.select_rows(batch);
        let z = d.personal_x.select_rows(batch);
        let y = d.y.select_rows(batch);
        let r = AdditiveDevice::residual(&x, &z, &y, u, v);
        let scale = -1.0 / batch.len() as f64;
        Some((x.tr_mul(&r) * scale, z.tr_mul(&r) * scale))
    }

    fn heldout_value(&self, i: usize, u: &DVector<f64>, v: &DVector<f64>) -> Option<f64> {
        self.devices[i]
            .heldout
            .as_ref()
            .map(|(x, z, y)| AdditiveDevice::loss(x, z, y, u, v))
    }
}

/// Synthetic additive-model instance: Gaussian features, a common shared
/// truth and per-device personal truths spread by `heterogeneity`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditiveSpec {
    pub n: usize,
    pub d0: usize,
    pub personal_dim: usize,
    pub samples: usize,
    pub heldout_samples: usize,
    pub heterogeneity: f64,
    pub noise: f64,
    pub seed: u64,
}

impl AdditiveSpec {
    pub fn generate(&self) -> Result<AdditiveModel> {
        if self.samples == 0 {
            return Err(Error::Construction("devices need at least one sample".into()));
        }
        let key = |device: Option<usize>, step: usize| {
            let k = StreamKey::new(self.seed, Purpose::Init).step(step);
            match device {
                Some(d) => k.device(d),
                None => k,
            }
        };
        let gauss = |rows: usize, cols: usize, k: StreamKey| {
            let mut rng = k.stream();
            DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
        };
        let u_true = gauss(self.d0, 1, key(None, 0)).column(0).into_owned();
        let devices = (0..self.n)
            .map(|i| {
                let v_true = gauss(self.personal_dim, 1, key(Some(i), 0)).column(0) * self.heterogeneity;
                let make = |rows: usize, base: usize| {
                    let x = gauss(rows, self.d0, key(Some(i), base));
                    let z = gauss(rows, self.personal_dim, key(Some(i), base + 1));
                    let eps = gauss(rows, 1, key(Some(i), base + 2)).column(0) * self.noise;
                    let y = &x * &u_true + &z * &v_true + eps;
                    (x, z, y)
                };
                let (x, z, y) = make(self.samples, 1);
                let mut dev = AdditiveDevice::new(x, z, y);
                if self.heldout_samples > 0 {
                    let (hx, hz, hy) = make(self.heldout_samples, 4);
                    dev = dev.with_heldout(hx, hz, hy);
                }
                dev
            })
            .collect();
        make_additive_model(devices, None)
    }
}

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::container::Container;
use super::{lambda_min, symmetric_from_spectrum};
use crate::error::{Error, Result};
use crate::objective::{ParamState, PartitionedProblem, Weights};
use crate::sampling::{Purpose, StreamKey};

/// One device objective
/// `F_i(u, v) = 1/2 u'Au + 1/2 v'Bv + u'Cv + a'u + b'v`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticDevice {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub lin_u: DVector<f64>,
    pub lin_v: DVector<f64>,
}

impl QuadraticDevice {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        lin_u: DVector<f64>,
        lin_v: DVector<f64>,
    ) -> Result<Self> {
        let d0 = a.nrows();
        let di = b.nrows();
        let shape_err = |what: &str| Error::Construction(format!("quadratic device: {what}"));
        if !a.is_square() || !b.is_square() {
            return Err(shape_err("A and B must be square"));
        }
        if c.shape() != (d0, di) {
            return Err(shape_err("C must be d0 x d_i"));
        }
        if lin_u.len() != d0 || lin_v.len() != di {
            return Err(shape_err("linear terms must match block sizes"));
        }
        let asym = |m: &DMatrix<f64>| (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0);
        if asym(&a) || asym(&b) {
            return Err(shape_err("A and B must be symmetric"));
        }
        Ok(Self { a, b, c, lin_u, lin_v })
    }

    pub fn shared_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn personal_dim(&self) -> usize {
        self.b.nrows()
    }

    pub fn value(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.a * u)) + 0.5 * v.dot(&(&self.b * v)) + u.dot(&(&self.c * v)) + self.lin_u.dot(u)
            + self.lin_v.dot(v)
    }

    pub fn grad_u(&self, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        &self.a * u + &self.c * v + &self.lin_u
    }

    pub fn grad_v(&self, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        &self.b * v + self.c.tr_mul(u) + &self.lin_v
    }
}

/// Spectra drawn during generation, kept so constants can be checked
/// against the values that were put in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSpectra {
    pub shared: Vec<Vec<f64>>,
    pub personal: Vec<Vec<f64>>,
    pub coupling: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticEnsemble {
    devices: Vec<QuadraticDevice>,
    weights: Weights,
    shared_dim: usize,
    spectra: Option<GeneratedSpectra>,
}

/// Parameters for [`make_quadratic_ensemble`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticEnsembleSpec {
    pub n: usize,
    pub d0: usize,
    /// Personal dimension of each device; length `n`.
    pub personal_dims: Vec<usize>,
    /// Eigenvalue range `[lo, hi]` for the shared blocks `A_i`.
    pub shared_eigs: (f64, f64),
    /// Eigenvalue range `[lo, hi]` for the personal blocks `B_i`.
    pub personal_eigs: (f64, f64),
    /// Operator norm of every coupling block `C_i`.
    pub coupling: f64,
    /// Spread of the linear terms; gradient diversity grows with it.
    pub heterogeneity: f64,
    /// Enforce `c^2 < lambda_min(A_i) lambda_min(B_i)` on every device.
    pub device_bounded_below: bool,
    /// Device weights; uniform when absent.
    pub weights: Option<Vec<f64>>,
    pub seed: u64,
}

impl QuadraticEnsembleSpec {
    pub fn uniform(n: usize, d0: usize, di: usize, seed: u64) -> Self {
        Self {
            n,
            d0,
            personal_dims: vec![di; n],
            shared_eigs: (1.0, 2.0),
            personal_eigs: (1.0, 2.0),
            coupling: 0.5,
            heterogeneity: 1.0,
            device_bounded_below: true,
            weights: None,
            seed,
        }
    }
}

pub(crate) fn gaussian_matrix(rows: usize, cols: usize, key: StreamKey) -> DMatrix<f64> {
    let mut rng = key.stream();
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Matrix with orthonormal columns (or rows, when wide), drawn from `key`.
pub(crate) fn orthonormal(rows: usize, cols: usize, key: StreamKey) -> DMatrix<f64> {
    if rows == 0 || cols == 0 {
        return DMatrix::zeros(rows, cols);
    }
    let tall = rows >= cols;
    let (r, c) = if tall { (rows, cols) } else { (cols, rows) };
    let qr = gaussian_matrix(r, c, key).qr();
    let mut q = qr.q();
    let rdiag = qr.r().diagonal();
    for (j, s) in rdiag.iter().enumerate() {
        if *s < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if tall {
        q
    } else {
        q.transpose()
    }
}

pub(crate) fn uniform_in(range: (f64, f64), count: usize, key: StreamKey) -> Vec<f64> {
    let mut rng = key.stream();
    (0..count)
        .map(|_| {
            let t: f64 = rng.random();
            range.0 + (range.1 - range.0) * t
        })
        .collect()
}

/// Draws a random quadratic ensemble. Generation is deterministic in `spec.seed`.
pub fn make_quadratic_ensemble(spec: &QuadraticEnsembleSpec) -> Result<QuadraticEnsemble> {
    let QuadraticEnsembleSpec { n, d0, .. } = *spec;
    if n == 0 || d0 == 0 {
        return Err(Error::Construction("need at least one device and a nonempty shared block".into()));
    }
    if spec.personal_dims.len() != n {
        return Err(Error::Construction(format!(
            "{} personal dimensions given for {n} devices",
            spec.personal_dims.len()
        )));
    }
    for (name, (lo, hi)) in [("shared", spec.shared_eigs), ("personal", spec.personal_eigs)] {
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Construction(format!("{name} eigenvalue range [{lo}, {hi}] is invalid")));
        }
    }
    if !(spec.coupling >= 0.0 && spec.coupling.is_finite()) || !(spec.heterogeneity >= 0.0) {
        return Err(Error::Construction("coupling and heterogeneity must be nonnegative".into()));
    }
    let weights = match &spec.weights {
        Some(w) => Weights::new(w.clone())?,
        None => Weights::uniform(n),
    };

    let key = |device: usize, step: usize| StreamKey::new(spec.seed, Purpose::Init).device(device).step(step);
    let mut devices = Vec::with_capacity(n);
    let mut shared_spectra = Vec::with_capacity(n);
    let mut personal_spectra = Vec::with_capacity(n);
    for (i, &di) in spec.personal_dims.iter().enumerate() {
        let lam_a = uniform_in(spec.shared_eigs, d0, key(i, 0));
        let lam_b = uniform_in(spec.personal_eigs, di, key(i, 1));
        if spec.device_bounded_below && di > 0 {
            let min_a = lam_a.iter().copied().fold(f64::INFINITY, f64::min);
            let min_b = lam_b.iter().copied().fold(f64::INFINITY, f64::min);
            if spec.coupling * spec.coupling >= min_a * min_b {
                return Err(Error::Construction(format!(
                    "device {i}: coupling {} violates the Schur condition c^2 < {min_a} * {min_b}",
                    spec.coupling
                )));
            }
        }
        let a = symmetric_from_spectrum(&orthonormal(d0, d0, key(i, 2)), &DVector::from_vec(lam_a.clone()));
        let b = symmetric_from_spectrum(&orthonormal(di, di, key(i, 3)), &DVector::from_vec(lam_b.clone()));
        let c = orthonormal(d0, di, key(i, 4)) * spec.coupling;
        let scale_u = spec.heterogeneity / (d0 as f64).sqrt();
        let scale_v = if di > 0 { spec.heterogeneity / (di as f64).sqrt() } else { 0.0 };
        let lin_u = gaussian_matrix(d0, 1, key(i, 5)).column(0) * scale_u;
        let lin_v = gaussian_matrix(di, 1, key(i, 6)).column(0) * scale_v;
        devices.push(QuadraticDevice::new(a, b, c, lin_u, lin_v)?);
        shared_spectra.push(lam_a);
        personal_spectra.push(lam_b);
    }
    let mut ens = QuadraticEnsemble::from_devices(devices, weights)?;
    let min_eig = ens.aggregate_min_eigenvalue();
    if min_eig <= 1e-12 {
        return Err(Error::Construction(format!(
            "aggregate objective is not bounded below (joint Hessian min eigenvalue {min_eig:e})"
        )));
    }
    ens.spectra = Some(GeneratedSpectra {
        shared: shared_spectra,
        personal: personal_spectra,
        coupling: spec.coupling,
    });
    Ok(ens)
}

impl QuadraticEnsemble {
    pub fn from_devices(devices: Vec<QuadraticDevice>, weights: Weights) -> Result<Self> {
        let first = devices
            .first()
            .ok_or_else(|| Error::Construction("ensemble needs at least one device".into()))?;
        let shared_dim = first.shared_dim();
        if let Some(i) = devices.iter().position(|d| d.shared_dim() != shared_dim) {
            return Err(Error::DimensionMismatch {
                what: "shared block",
                device: Some(i),
                expected: shared_dim,
                found: devices[i].shared_dim(),
            });
        }
        if weights.len() != devices.len() {
            return Err(Error::DimensionMismatch {
                what: "device weights",
                device: None,
                expected: devices.len(),
                found: weights.len(),
            });
        }
        Ok(Self {
            devices,
            weights,
            shared_dim,
            spectra: None,
        })
    }

    pub fn devices(&self) -> &[QuadraticDevice] {
        &self.devices
    }

    pub fn spectra(&self) -> Option<&GeneratedSpectra> {
        self.spectra.as_ref()
    }

    fn offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.devices.len());
        let mut at = self.shared_dim;
        for d in &self.devices {
            offsets.push(at);
            at += d.personal_dim();
        }
        offsets
    }

    /// Hessian and gradient-at-zero of `sum_i alpha_i F_i` over the stacked
    /// variable `(u, v_1, ..., v_n)`.
    pub fn joint_system(&self) -> (DMatrix<f64>, DVector<f64>) {
        let offsets = self.offsets();
        let total = self.shared_dim + self.devices.iter().map(|d| d.personal_dim()).sum::<usize>();
        let d0 = self.shared_dim;
        let mut h = DMatrix::zeros(total, total);
        let mut g = DVector::zeros(total);
        for ((dev, &alpha), &off) in self.devices.iter().zip(self.weights.as_slice()).zip(&offsets) {
            let di = dev.personal_dim();
            let mut huu = h.view_mut((0, 0), (d0, d0));
            huu += &dev.a * alpha;
            h.view_mut((off, off), (di, di)).copy_from(&(&dev.b * alpha));
            h.view_mut((0, off), (d0, di)).copy_from(&(&dev.c * alpha));
            h.view_mut((off, 0), (di, d0)).copy_from(&(dev.c.transpose() * alpha));
            let mut gu = g.rows_mut(0, d0);
            gu += &dev.lin_u * alpha;
            g.rows_mut(off, di).copy_from(&(&dev.lin_v * alpha));
        }
        (h, g)
    }

    pub fn aggregate_min_eigenvalue(&self) -> f64 {
        lambda_min(&self.joint_system().0)
    }

    pub fn minimizer(&self) -> Result<(ParamState, f64)> {
        let (h, g) = self.joint_system();
        let min_eig = lambda_min(&h);
        let scale = h.amax().max(1.0);
        if min_eig <= 1e-12 * scale {
            return Err(Error::Degenerate(format!(
                "joint Hessian is not positive definite (min eigenvalue {min_eig:e}); no finite minimizer"
            )));
        }
        let x = h
            .cholesky()
            .ok_or_else(|| Error::Degenerate("joint Hessian factorization failed".into()))?
            .solve(&(-g));
        let u = x.rows(0, self.shared_dim).into_owned();
        let v = self
            .offsets()
            .iter()
            .zip(&self.devices)
            .map(|(&off, d)| x.rows(off, d.personal_dim()).into_owned())
            .collect();
        let state = ParamState::new(u, v);
        let value = crate::objective::eval_objective(self, &state)?;
        Ok((state, value))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("quadratic");
        c.push_scalars("n", vec![self.devices.len() as f64]);
        c.push_scalars("d0", vec![self.shared_dim as f64]);
        c.push_scalars("weights", self.weights.as_slice().to_vec());
        for (i, d) in self.devices.iter().enumerate() {
            c.push_matrix(format!("device{i}.A"), d.a.clone());
            c.push_matrix(format!("device{i}.B"), d.b.clone());
            c.push_matrix(format!("device{i}.C"), d.c.clone());
            c.push_matrix(format!("device{i}.a"), DMatrix::from_column_slice(d.lin_u.len(), 1, d.lin_u.as_slice()));
            c.push_matrix(format!("device{i}.b"), DMatrix::from_column_slice(d.lin_v.len(), 1, d.lin_v.as_slice()));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("quadratic")?;
        let n = c.scalar_usize("n")?;
        let weights = Weights::new(c.scalars("weights")?.to_vec())?;
        let column = |m: &DMatrix<f64>| DVector::from_column_slice(m.as_slice());
        let devices = (0..n)
            .map(|i| {
                QuadraticDevice::new(
                    c.matrix(&format!("device{i}.A"))?.clone(),
                    c.matrix(&format!("device{i}.B"))?.clone(),
                    c.matrix(&format!("device{i}.C"))?.clone(),
                    column(c.matrix(&format!("device{i}.a"))?),
                    column(c.matrix(&format!("device{i}.b"))?),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let ens = Self::from_devices(devices, weights)?;
        let d0 = c.scalar_usize("d0")?;
        if ens.shared_dim != d0 {
            return Err(Error::Construction(format!("container declares d0={d0}, blocks have {}", ens.shared_dim)));
        }
        Ok(ens)
    }
}

impl PartitionedProblem for QuadraticEnsemble {
    fn num_devices(&self) -> usize {
        self.devices.len()
    }

    fn shared_dim(&self) -> usize {
        self.shared_dim
    }

    fn personal_dim(&self, i: usize) -> usize {
        self.devices[i].personal_dim()
    }

    fn weights(&self) -> &Weights {
        &self.weights
    }

    fn device_value(&self, i: usize, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        self.devices[i].value(u, v)
    }

    fn device_grads(&self, i: usize, u: &DVector<f64>, v: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let d = &self.devices[i];
        (d.grad_u(u, v), d.grad_v(u, v))
    }

    fn device_grad_u(&self, i: usize, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        self.devices[i].grad_u(u, v)
    }

    fn device_grad_v(&self, i: usize, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        self.devices[i].grad_v(u, v)
    }

    fn as_quadratic(&self) -> Option<&QuadraticEnsemble> {
        Some(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{eval_objective, partial_grads};
    use crate::problems::{closed_form_constants, closed_form_minimum};

    fn scaled_identity_ensemble() -> QuadraticEnsemble {
        let dev = QuadraticDevice::new(
            DMatrix::identity(2, 2) * 2.0,
            DMatrix::identity(2, 2) * 2.0,
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DVector::zeros(2),
        )
        .unwrap();
        QuadraticEnsemble::from_devices(vec![dev.clone(), dev], Weights::uniform(2)).unwrap()
    }

    #[test]
    fn identity_blocks_constants() {
        let p = closed_form_constants(&scaled_identity_ensemble()).unwrap();
        assert!((p.l_u - 2.0).abs() < 1e-14);
        assert!((p.l_v - 2.0).abs() < 1e-14);
        assert!((p.l_uv - 1.0).abs() < 1e-14);
        assert!((p.chi - 0.5).abs() < 1e-14);
    }

    #[test]
    fn zero_point_of_homogeneous_quadratic() {
        let dev = QuadraticDevice::new(
            DMatrix::identity(3, 3),
            DMatrix::identity(2, 2),
            DMatrix::zeros(3, 2),
            DVector::zeros(3),
            DVector::zeros(2),
        )
        .unwrap();
        let p = QuadraticEnsemble::from_devices(vec![dev; 4], Weights::uniform(4)).unwrap();
        assert_eq!(eval_objective(&p, &ParamState::zeros(&p)).unwrap(), 0.0);
        let prof = closed_form_constants(&p).unwrap();
        assert_eq!(prof.chi, 0.0);
        let (state, value) = closed_form_minimum(&p).unwrap();
        assert_eq!(value, 0.0);
        assert!(state.u.iter().chain(state.v.iter().flatten()).all(|x| *x == 0.0));
    }

    #[test]
    fn scalar_minimizer() {
        // F(u, v) = u^2/2 + v^2/2 + 0.5uv + u; solve [1 .5; .5 1][u; v] = [-1; 0].
        let dev = QuadraticDevice::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.5),
            DVector::from_element(1, 1.0),
            DVector::zeros(1),
        )
        .unwrap();
        let p = QuadraticEnsemble::from_devices(vec![dev], Weights::uniform(1)).unwrap();
        let (s, _) = closed_form_minimum(&p).unwrap();
        assert!((s.u[0] + 4.0 / 3.0).abs() < 1e-12);
        assert!((s.v[0][0] - 2.0 / 3.0).abs() < 1e-12);
        let (gu, gv) = partial_grads(&p, 0, &s.u, &s.v[0]).unwrap();
        assert!(gu.norm() < 1e-12 && gv.norm() < 1e-12);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = QuadraticEnsembleSpec::uniform(5, 4, 3, 7);
        let a = make_quadratic_ensemble(&spec).unwrap();
        let b = make_quadratic_ensemble(&spec).unwrap();
        assert_eq!(a, b);
        let other = make_quadratic_ensemble(&QuadraticEnsembleSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn schur_violation_is_rejected() {
        let spec = QuadraticEnsembleSpec {
            coupling: 2.5,
            ..QuadraticEnsembleSpec::uniform(3, 2, 2, 1)
        };
        assert!(matches!(make_quadratic_ensemble(&spec), Err(Error::Construction(_))));
    }

    #[test]
    fn ragged_personal_dims() {
        let spec = QuadraticEnsembleSpec {
            personal_dims: vec![0, 1, 5],
            ..QuadraticEnsembleSpec::uniform(3, 4, 0, 2)
        };
        let p = make_quadratic_ensemble(&spec).unwrap();
        assert_eq!(p.personal_dims(), vec![0, 1, 5]);
        let (s, _) = closed_form_minimum(&p).unwrap();
        s.validate(&p).unwrap();
    }

    #[test]
    fn singular_system_is_degenerate() {
        let dev = QuadraticDevice::new(
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 1),
            DVector::from_element(1, 1.0),
            DVector::zeros(1),
        )
        .unwrap();
        let p = QuadraticEnsemble::from_devices(vec![dev], Weights::uniform(1)).unwrap();
        assert!(matches!(closed_form_minimum(&p), Err(Error::Degenerate(_))));
    }

    #[test]
    fn container_round_trip() {
        let p = make_quadratic_ensemble(&QuadraticEnsembleSpec::uniform(3, 3, 2, 4)).unwrap();
        let text = p.to_container().to_text();
        let back = QuadraticEnsemble::from_container(&Container::parse(&text).unwrap()).unwrap();
        assert_eq!(back.devices(), p.devices());
        assert_eq!(back.weights(), p.weights());
    }
}

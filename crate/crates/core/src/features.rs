//! Kernel feature maps for observations and observation windows.
//!
//! Windows are whitened by PCA (elliptical kernel covariance), then compared
//! against a set of Gaussian kernel centers. Feature vectors are the kernel
//! values normalized to sum to one. Discrete systems use indicator features
//! instead, which are the one-hot special case of the same construction.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;

use crate::model::{one_hot, TpsrModel};
use crate::{Error, Result};

/// Default relative eigenvalue floor for whitening.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// PCA whitening `x ↦ diag(scales) · basisᵀ · (x − mean)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    pub mean: DVector<f64>,
    /// Orthonormal eigenvectors of the sample covariance, one per column,
    /// ordered by decreasing eigenvalue.
    pub basis: DMatrix<f64>,
    /// Inverse square roots of the (floored) eigenvalues.
    pub scales: DVector<f64>,
}

impl WhiteningTransform {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            basis: DMatrix::identity(dim, dim),
            scales: DVector::from_element(dim, 1.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let centered = x - &self.mean;
        let mut z = self.basis.tr_mul(&centered);
        z.component_mul_assign(&self.scales);
        z
    }
}

/// Fits a whitening transform to raw sample vectors. Eigenvalues below
/// `1e-12 · λ_max` are floored to that threshold before the inverse square root.
pub fn fit_whitening(samples: &[DVector<f64>]) -> Result<WhiteningTransform> {
    fit_whitening_floored(samples, EIGEN_FLOOR)
}

/// [`fit_whitening`] with eigenvalues floored at `rel_floor · λ_max`.
/// Larger floors stop low-variance directions from dominating distances.
pub fn fit_whitening_floored(samples: &[DVector<f64>], rel_floor: f64) -> Result<WhiteningTransform> {
    if !(rel_floor > 0.0 && rel_floor <= 1.0) {
        return Err(Error::invalid(format!("eigenvalue floor {rel_floor} must lie in (0, 1]")));
    }
    if samples.len() < 2 {
        return Err(Error::DegenerateData(format!(
            "whitening needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let dim = samples[0].len();
    if samples.iter().any(|s| s.len() != dim) {
        return Err(Error::dims("whitening samples have inconsistent dimension"));
    }
    let m = samples.len() as f64;
    let mut mean = DVector::zeros(dim);
    for s in samples {
        mean += s;
    }
    mean /= m;

    let mut centered = DMatrix::zeros(dim, samples.len());
    for (i, s) in samples.iter().enumerate() {
        centered.set_column(i, &(s - &mean));
    }
    let cov = (&centered * centered.transpose()) / (m - 1.0);
    if cov.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("sample covariance"));
    }
    let eig = cov.symmetric_eigen();

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let lambda_max = eig.eigenvalues[order[0]];
    if lambda_max <= 0.0 {
        return Err(Error::DegenerateData("all samples are identical".into()));
    }
    let floor = rel_floor * lambda_max;
    let mut basis = DMatrix::zeros(dim, dim);
    let mut scales = DVector::zeros(dim);
    for (dst, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        // Fix the sign so the transform is reproducible.
        let pivot = col.iter().cloned().fold(0.0f64, |acc, x| if x.abs() > acc.abs() + 1e-14 { x } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        basis.set_column(dst, &(col * sign));
        scales[dst] = 1.0 / eig.eigenvalues[src].max(floor).sqrt();
    }
    Ok(WhiteningTransform { mean, basis, scales })
}

/// Gaussian kernels over whitened observation windows.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSet {
    /// Whitened centers, one per column.
    pub centers: DMatrix<f64>,
    pub bandwidth: f64,
    pub whitening: WhiteningTransform,
    /// Number of consecutive observations per window.
    pub window_len: usize,
}

/// How kernel widths are chosen when fitting a [`KernelSet`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Median pairwise distance between random center pairs divided by
    /// `sqrt(window dim)`, times the given multiplier.
    Median { scale: f64 },
    Fixed(f64),
}

impl Default for Bandwidth {
    fn default() -> Self {
        Bandwidth::Median { scale: 1.0 }
    }
}

/// Settings for [`KernelSet::fit`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelFit {
    pub bandwidth: Bandwidth,
    /// Relative eigenvalue floor of the whitening transform.
    pub eigen_floor: f64,
}

impl Default for KernelFit {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::default(),
            eigen_floor: EIGEN_FLOOR,
        }
    }
}

/// Number of random center pairs used by the median bandwidth heuristic.
pub const BANDWIDTH_PAIRS: usize = 200;

impl KernelSet {
    pub fn new(centers: DMatrix<f64>, bandwidth: f64, whitening: WhiteningTransform, window_len: usize) -> Result<Self> {
        if centers.ncols() == 0 {
            return Err(Error::invalid("kernel set needs at least one center"));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::invalid(format!("bandwidth must be positive, got {bandwidth}")));
        }
        if window_len == 0 {
            return Err(Error::invalid("window length must be positive"));
        }
        if centers.nrows() != whitening.dim() || whitening.dim() % window_len != 0 {
            return Err(Error::dims(format!(
                "centers have dimension {}, whitening {}, window length {window_len}",
                centers.nrows(),
                whitening.dim()
            )));
        }
        Ok(Self {
            centers,
            bandwidth,
            whitening,
            window_len,
        })
    }

    /// Fits whitening on `fit_windows`, draws `count` centers uniformly without
    /// replacement from `candidate_windows` and sets the bandwidth.
    pub fn fit<R: Rng + ?Sized>(
        fit_windows: &[DVector<f64>],
        candidate_windows: &[DVector<f64>],
        count: usize,
        window_len: usize,
        opts: KernelFit,
        rng: &mut R,
    ) -> Result<Self> {
        if count == 0 || count > candidate_windows.len() {
            return Err(Error::invalid(format!(
                "cannot draw {count} kernel centers from {} candidates",
                candidate_windows.len()
            )));
        }
        let whitening = fit_whitening_floored(fit_windows, opts.eigen_floor)?;
        let dim = whitening.dim();
        let picks = sample(rng, candidate_windows.len(), count);
        let mut centers = DMatrix::zeros(dim, count);
        for (c, idx) in picks.iter().enumerate() {
            let w = &candidate_windows[idx];
            if w.len() != dim {
                return Err(Error::dims("candidate window has wrong dimension"));
            }
            centers.set_column(c, &whitening.apply(w));
        }
        let width = match opts.bandwidth {
            Bandwidth::Fixed(h) => h,
            Bandwidth::Median { scale } => scale * median_pair_distance(&centers, rng) / (dim as f64).sqrt(),
        };
        let width = if width > 0.0 && width.is_finite() { width } else { 1.0 };
        KernelSet::new(centers, width, whitening, window_len)
    }

    pub fn num_centers(&self) -> usize {
        self.centers.ncols()
    }

    /// Raw window dimension (observation dim × window length).
    pub fn input_dim(&self) -> usize {
        self.whitening.dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.input_dim() / self.window_len
    }

    /// Normalized kernel weights of a raw (concatenated) window.
    pub fn eval(&self, window: &DVector<f64>) -> Result<DVector<f64>> {
        if window.len() != self.input_dim() {
            return Err(Error::dims(format!(
                "window has dimension {}, kernels expect {}",
                window.len(),
                self.input_dim()
            )));
        }
        let z = self.whitening.apply(window);
        Ok(self.eval_whitened(&z))
    }

    fn eval_whitened(&self, z: &DVector<f64>) -> DVector<f64> {
        let m = self.num_centers();
        let inv = 1.0 / (2.0 * self.bandwidth * self.bandwidth);
        let mut d2 = DVector::zeros(m);
        for j in 0..m {
            let mut acc = 0.0;
            for (a, b) in z.iter().zip(self.centers.column(j).iter()) {
                let d = a - b;
                acc += d * d;
            }
            d2[j] = acc;
        }
        let (nearest, dmin) = d2
            .iter()
            .enumerate()
            .fold((0usize, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) });
        if !dmin.is_finite() {
            return one_hot(m, nearest);
        }
        // Shifting by the nearest distance leaves the normalized weights
        // unchanged and keeps the largest term at exp(0).
        let mut w = d2.map(|v| (-(v - dmin) * inv).exp());
        let total: f64 = w.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return one_hot(m, nearest);
        }
        w /= total;
        w
    }
}

fn median_pair_distance<R: Rng + ?Sized>(centers: &DMatrix<f64>, rng: &mut R) -> f64 {
    let m = centers.ncols();
    if m < 2 {
        return 1.0;
    }
    let mut dists: Vec<f64> = (0..BANDWIDTH_PAIRS)
        .map(|_| {
            let i = rng.random_range(0..m);
            let mut j = rng.random_range(0..m - 1);
            if j >= i {
                j += 1;
            }
            (centers.column(i) - centers.column(j)).norm()
        })
        .collect();
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let k = dists.len();
    if k % 2 == 1 {
        dists[k / 2]
    } else {
        0.5 * (dists[k / 2 - 1] + dists[k / 2])
    }
}

/// Normalized kernel weights for a raw window; see [`KernelSet::eval`].
pub fn eval_features(ks: &KernelSet, window: &DVector<f64>) -> Result<DVector<f64>> {
    ks.eval(window)
}

/// Observable operator for an observation given by its kernel weights:
/// `Σ_j w_j B_{a,j}`.
pub fn compose_operator(model: &TpsrModel, action: usize, obs_weights: &DVector<f64>) -> Result<DMatrix<f64>> {
    model.compose(action, obs_weights)
}

/// Index of the largest entry; discrete observations are stored as one-hot
/// payloads.
pub fn discrete_index(payload: &DVector<f64>) -> usize {
    payload
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Concatenates observations into one window vector.
pub fn concat_window(obs: &[&DVector<f64>]) -> DVector<f64> {
    let dim: usize = obs.iter().map(|o| o.len()).sum();
    let mut out = DVector::zeros(dim);
    let mut off = 0;
    for o in obs {
        out.rows_mut(off, o.len()).copy_from(o);
        off += o.len();
    }
    out
}

/// Features of a window of action-observation pairs (histories and tests).
#[derive(Debug, Clone, PartialEq)]
pub enum WindowFeatures {
    /// Gaussian kernels over the observations only.
    Kernel(KernelSet),
    /// One-hot indicator of the exact (action, observation) sequence, with
    /// observations read as discrete indices.
    Indicator {
        num_actions: usize,
        num_obs: usize,
        window_len: usize,
    },
}

impl WindowFeatures {
    pub fn window_len(&self) -> usize {
        match self {
            WindowFeatures::Kernel(k) => k.window_len,
            WindowFeatures::Indicator { window_len, .. } => *window_len,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            WindowFeatures::Kernel(k) => k.num_centers(),
            WindowFeatures::Indicator {
                num_actions,
                num_obs,
                window_len,
            } => (num_actions * num_obs).pow(*window_len as u32),
        }
    }

    pub fn eval(&self, actions: &[usize], observations: &[&DVector<f64>]) -> Result<DVector<f64>> {
        if actions.len() != self.window_len() || observations.len() != self.window_len() {
            return Err(Error::dims(format!(
                "window of {} pairs, features expect {}",
                observations.len(),
                self.window_len()
            )));
        }
        match self {
            WindowFeatures::Kernel(k) => k.eval(&concat_window(observations)),
            WindowFeatures::Indicator {
                num_actions,
                num_obs,
                ..
            } => {
                let obs: Vec<usize> = observations.iter().map(|o| discrete_index(o)).collect();
                let idx = indicator_index(actions, &obs, *num_actions, *num_obs)?;
                Ok(one_hot(self.dim(), idx))
            }
        }
    }
}

/// Position of an (action, observation) sequence in the indicator basis:
/// base-`|A||O|` digits with the first pair most significant.
pub fn indicator_index(actions: &[usize], observations: &[usize], num_actions: usize, num_obs: usize) -> Result<usize> {
    let base = num_actions * num_obs;
    let mut idx = 0;
    for (&a, &o) in actions.iter().zip(observations) {
        if a >= num_actions || o >= num_obs {
            return Err(Error::invalid(format!("pair ({a}, {o}) out of range")));
        }
        idx = idx * base + a * num_obs + o;
    }
    Ok(idx)
}

/// Features of single observations (the observation kernels).
#[derive(Debug, Clone, PartialEq)]
pub enum ObservationFeatures {
    Kernel(KernelSet),
    OneHot { num_obs: usize },
}

impl ObservationFeatures {
    pub fn dim(&self) -> usize {
        match self {
            ObservationFeatures::Kernel(k) => k.num_centers(),
            ObservationFeatures::OneHot { num_obs } => *num_obs,
        }
    }

    pub fn eval(&self, obs: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            ObservationFeatures::Kernel(k) => k.eval(obs),
            ObservationFeatures::OneHot { num_obs } => {
                if obs.len() != *num_obs {
                    return Err(Error::dims(format!(
                        "one-hot observation of length {}, expected {num_obs}",
                        obs.len()
                    )));
                }
                Ok(one_hot(*num_obs, discrete_index(obs)))
            }
        }
    }
}

/// The indicative, characteristic and observation features a model was
/// trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub obs_dim: usize,
    pub num_actions: usize,
    pub indicative: WindowFeatures,
    pub characteristic: WindowFeatures,
    pub observation: ObservationFeatures,
}

impl FeatureMap {
    /// Indicator features over (action, observation) windows for a discrete
    /// system whose observations are one-hot payloads of length `num_obs`.
    pub fn indicator(num_actions: usize, num_obs: usize, past_len: usize, future_len: usize) -> Self {
        Self {
            obs_dim: num_obs,
            num_actions,
            indicative: WindowFeatures::Indicator {
                num_actions,
                num_obs,
                window_len: past_len,
            },
            characteristic: WindowFeatures::Indicator {
                num_actions,
                num_obs,
                window_len: future_len,
            },
            observation: ObservationFeatures::OneHot { num_obs },
        }
    }

    pub fn past_len(&self) -> usize {
        self.indicative.window_len()
    }

    pub fn future_len(&self) -> usize {
        self.characteristic.window_len()
    }

    pub fn num_obs_kernels(&self) -> usize {
        self.observation.dim()
    }

    /// Stable identifier derived from the serialized feature map.
    pub fn reference(&self) -> String {
        crate::io::feature_map_reference(self)
    }
}

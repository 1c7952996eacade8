//! Stochastic input augmentation and dataset-level preprocessing.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Variance floor used when standardizing constant images.
pub const STD_VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Both branches draw every transformation independently.
    #[default]
    Independent,
    /// Branches share the flip decision; translations and noise stay independent.
    SharedPerPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Shifts are drawn uniformly from `-translate..=translate` on each axis.
    pub translate: usize,
    pub flip: bool,
    pub noise_sigma: f64,
    pub pairing: Pairing,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy::NONE
    }
}

impl AugmentPolicy {
    pub const NONE: AugmentPolicy = AugmentPolicy {
        translate: 0,
        flip: false,
        noise_sigma: 0.0,
        pairing: Pairing::Independent,
    };

    /// ±2 pixel translations with horizontal flips.
    pub const IMAGES: AugmentPolicy = AugmentPolicy {
        translate: 2,
        flip: true,
        noise_sigma: 0.0,
        pairing: Pairing::Independent,
    };

    pub fn is_identity(&self) -> bool {
        self.translate == 0 && !self.flip && self.noise_sigma == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(format!(
                "augment.noise_sigma = {} must be a finite value >= 0",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        self.validate()?;
        if self.translate == 0 && !self.flip {
            return Ok(());
        }
        if shape.len() != 4 {
            return Err(Error::config(format!(
                "translation and flips need (batch, channels, height, width) images, got {shape:?}"
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        if self.translate >= h || self.translate >= w {
            return Err(Error::config(format!(
                "augment.translate = {} must be smaller than the {h}x{w} image",
                self.translate
            )));
        }
        Ok(())
    }
}

/// Augments every item of a batch independently.
pub fn apply<R: Real>(policy: &AugmentPolicy, batch: &Tensor<R>, rng: &mut impl Rng) -> Result<Tensor<R>> {
    policy.check_input(batch.shape())?;
    Ok(augment(policy, batch, rng, None).0)
}

/// Two augmented realizations of the same batch, one per branch, honoring
/// the pairing policy.
pub fn apply_pair<R: Real>(
    policy: &AugmentPolicy,
    batch: &Tensor<R>,
    rng_a: &mut impl Rng,
    rng_b: &mut impl Rng,
) -> Result<(Tensor<R>, Tensor<R>)> {
    policy.check_input(batch.shape())?;
    let (a, flips) = augment(policy, batch, rng_a, None);
    let shared = match policy.pairing {
        Pairing::SharedPerPair => Some(flips.as_slice()),
        Pairing::Independent => None,
    };
    let (b, _) = augment(policy, batch, rng_b, shared);
    Ok((a, b))
}

/// Per item: draw `(dx, dy)`, then the flip decision, then noise.
fn augment<R: Real>(
    policy: &AugmentPolicy,
    batch: &Tensor<R>,
    rng: &mut impl Rng,
    forced_flips: Option<&[bool]>,
) -> (Tensor<R>, Vec<bool>) {
    let n = batch.batch_len();
    let mut out = batch.clone();
    let mut flips = vec![false; n];
    if policy.translate > 0 || policy.flip {
        let t = policy.translate as i64;
        let shape = batch.shape();
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        for i in 0..n {
            let (dx, dy) = if t > 0 {
                (rng.random_range(-t..=t), rng.random_range(-t..=t))
            } else {
                (0, 0)
            };
            let flip = policy.flip
                && match forced_flips {
                    Some(f) => f[i],
                    None => rng.random::<f64>() < 0.5,
                };
            flips[i] = flip;
            shift_flip(batch.item(i), out.item_mut(i), c, h, w, dx, dy, flip);
        }
    }
    if policy.noise_sigma > 0.0 {
        let s = policy.noise_sigma;
        for v in out.data_mut() {
            *v += R::lit(s * Distribution::<f64>::sample(&StandardNormal, rng));
        }
    }
    (out, flips)
}

/// `dst[y][x] = src[y - dy][x' - dx]` with zero fill, where `x'` is the
/// mirrored column when flipping. Positive `dx` moves content right.
#[allow(clippy::too_many_arguments)]
fn shift_flip<R: Real>(src: &[R], dst: &mut [R], c: usize, h: usize, w: usize, dx: i64, dy: i64, flip: bool) {
    for ch in 0..c {
        let plane = ch * h * w;
        for y in 0..h {
            let sy = y as i64 - dy;
            for x in 0..w {
                let sx = x as i64 - dx;
                dst[plane + y * w + x] = if sy < 0 || sy >= h as i64 || sx < 0 || sx >= w as i64 {
                    R::zero()
                } else {
                    let sx = if flip { w - 1 - sx as usize } else { sx as usize };
                    src[plane + sy as usize * w + sx]
                };
            }
        }
    }
}

/// Learned ZCA whitening `x' = W (x - mean)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZcaTransform<R> {
    pub mean: Tensor<R>,
    /// Symmetric `D×D` whitening matrix.
    pub matrix: Tensor<R>,
    pub epsilon: f64,
}

/// Fits `W = U diag(1 / sqrt(λ + ε)) Uᵀ` from the population covariance
/// `U diag(λ) Uᵀ` of the flattened inputs.
pub fn zca_fit<R: Real>(inputs: &Tensor<R>, epsilon: f64) -> Result<ZcaTransform<R>> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::config(format!("zca epsilon {epsilon} must be >= 0")));
    }
    let n = inputs.batch_len();
    let d = inputs.item_len();
    if n == 0 || d == 0 {
        return Err(Error::data("cannot fit ZCA on an empty set"));
    }
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(inputs.item(i)) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = (0..n)
        .flat_map(|i| inputs.item(i).iter().zip(&mean).map(|(&v, &m)| v.as_f64() - m))
        .collect();
    let mut cov = vec![0.0f64; d * d];
    f64::gemm(
        d,
        n,
        d,
        1.0 / n as f64,
        &centered,
        (1, d as isize),
        &centered,
        (d as isize, 1),
        0.0,
        &mut cov,
        (d as isize, 1),
    );
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &cov));
    let largest = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    let smallest = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if epsilon == 0.0 && (largest <= 0.0 || smallest <= largest * 1e-12) {
        return Err(Error::data(format!(
            "covariance is singular (eigenvalues in [{smallest:e}, {largest:e}]); use epsilon > 0"
        )));
    }
    let scales = eig
        .eigenvalues
        .map(|l| 1.0 / (l.max(0.0) + epsilon).sqrt());
    let u = &eig.eigenvectors;
    let w = u * DMatrix::from_diagonal(&scales) * u.transpose();
    let matrix = (0..d)
        .flat_map(|r| (0..d).map(move |c| (r, c)))
        .map(|(r, c)| R::lit(0.5 * (w[(r, c)] + w[(c, r)])))
        .collect();
    Ok(ZcaTransform {
        mean: Tensor::from_f64(&[d], &mean)?,
        matrix: Tensor::new(vec![d, d], matrix)?,
        epsilon,
    })
}

pub fn zca_apply<R: Real>(t: &ZcaTransform<R>, inputs: &Tensor<R>) -> Result<Tensor<R>> {
    let d = t.mean.len();
    if inputs.item_len() != d {
        return Err(Error::shape(format!(
            "ZCA fitted on {d}-dimensional items, got {:?}",
            inputs.item_shape()
        )));
    }
    let n = inputs.batch_len();
    let mut centered = inputs.clone();
    for i in 0..n {
        for (v, &m) in centered.item_mut(i).iter_mut().zip(t.mean.data()) {
            *v -= m;
        }
    }
    let mut out = Tensor::zeros(inputs.shape());
    // rows are items: out = X Wᵀ, and W is symmetric
    R::gemm(
        n,
        d,
        d,
        R::one(),
        centered.data(),
        (d as isize, 1),
        t.matrix.data(),
        (1, d as isize),
        R::zero(),
        out.data_mut(),
        (d as isize, 1),
    );
    Ok(out)
}

/// Shifts and scales every item to zero mean and unit variance.
pub fn standardize_per_image<R: Real>(inputs: &Tensor<R>) -> Result<Tensor<R>> {
    let d = inputs.item_len();
    if d < 2 {
        return Err(Error::shape("per-image standardization needs more than one value per item"));
    }
    let mut out = inputs.clone();
    for i in 0..inputs.batch_len() {
        let item = out.item_mut(i);
        let mean = item.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
        let var = item.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / var.max(STD_VARIANCE_FLOOR).sqrt();
        for v in item.iter_mut() {
            *v = R::lit((v.as_f64() - mean) * inv);
        }
    }
    Ok(out)
}

//! Synthetic problems under the additive Gaussian model `C = Z Z^T + sigma W`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, Mat};
use crate::manifold::{
    orthogonality_defect, polar_retraction, OrthogonalMatrix, ORTHOGONALITY_TOLERANCE,
};

/// RNG stream used for the ground-truth blocks.
pub const TRUTH_STREAM: u64 = 0;
/// RNG stream used for the noise matrix.
pub const NOISE_STREAM: u64 = 1;

/// Name of the generator recorded in run metadata.
pub const RNG_NAME: &str = "chacha20";
/// Name of the Gaussian sampler recorded in run metadata.
pub const GAUSSIAN_METHOD: &str = "ziggurat";

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed of trial `index` in a run with base seed `base`: the `index + 1`-th
/// output of a splitmix64 generator started at `base`. Independent of how
/// trials are scheduled.
pub fn trial_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` blocks of size `d x d` stacked vertically into an `(n d) x d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockStack {
    n: usize,
    d: usize,
    data: Mat,
}

impl BlockStack {
    pub fn from_matrix(n: usize, d: usize, data: Mat) -> Result<Self> {
        check_dims(n, d)?;
        if data.shape() != (n * d, d) {
            return Err(Error::InvalidDims(format!(
                "expected a {}x{} stack, got {:?}",
                n * d,
                d,
                data.shape()
            )));
        }
        if !all_finite(&data) {
            return Err(Error::NonFinite);
        }
        Ok(Self { n, d, data })
    }

    pub fn from_blocks(blocks: &[Mat]) -> Result<Self> {
        let n = blocks.len();
        let d = blocks.first().map_or(0, |b| b.nrows());
        check_dims(n, d)?;
        let mut data = Mat::zeros(n * d, d);
        for (i, b) in blocks.iter().enumerate() {
            if b.shape() != (d, d) {
                return Err(Error::InvalidDims(format!(
                    "block {i} has shape {:?}",
                    b.shape()
                )));
            }
            data.view_mut((i * d, 0), (d, d)).copy_from(b);
        }
        Self::from_matrix(n, d, data)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn as_matrix(&self) -> &Mat {
        &self.data
    }

    pub fn block(&self, i: usize) -> Mat {
        self.data
            .view((i * self.d, 0), (self.d, self.d))
            .into_owned()
    }

    pub fn blocks(&self) -> impl Iterator<Item = Mat> + '_ {
        (0..self.n).map(|i| self.block(i))
    }

    /// Largest `||B_i^T B_i - I||_F` over the blocks.
    pub fn orthogonality_defect(&self) -> f64 {
        self.blocks()
            .map(|b| orthogonality_defect(&b))
            .fold(0.0, f64::max)
    }

    pub fn is_orthogonal(&self) -> bool {
        self.orthogonality_defect() <= ORTHOGONALITY_TOLERANCE
    }

    pub fn orthogonal_block(&self, i: usize) -> Result<OrthogonalMatrix> {
        OrthogonalMatrix::new(self.block(i))
    }

    /// Right-multiplies every block by `o`.
    pub fn rotate(&self, o: &Mat) -> Self {
        Self {
            n: self.n,
            d: self.d,
            data: &self.data * o,
        }
    }

    /// Applies the polar retraction to every block.
    pub fn round_blockwise(&self) -> Result<Self> {
        let mut data = Mat::zeros(self.n * self.d, self.d);
        for i in 0..self.n {
            let p = polar_retraction(&self.block(i))?;
            data.view_mut((i * self.d, 0), (self.d, self.d))
                .copy_from(p.as_matrix());
        }
        Ok(Self {
            n: self.n,
            d: self.d,
            data,
        })
    }
}

fn check_dims(n: usize, d: usize) -> Result<()> {
    if n < 2 || d < 2 {
        return Err(Error::InvalidDims(format!(
            "need n >= 2 and d >= 2, got n={n}, d={d}"
        )));
    }
    Ok(())
}

/// Symmetric block matrix of pairwise measurements with identity diagonal blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    n: usize,
    d: usize,
    data: Mat,
}

impl Observation {
    /// Builds an observation from a dense `(n d) x (n d)` matrix, checking
    /// exact symmetry and identity diagonal blocks.
    pub fn from_matrix(n: usize, d: usize, data: Mat) -> Result<Self> {
        check_dims(n, d)?;
        let nd = n * d;
        if data.shape() != (nd, nd) {
            return Err(Error::InvalidDims(format!(
                "expected a {nd}x{nd} observation, got {:?}",
                data.shape()
            )));
        }
        if !all_finite(&data) {
            return Err(Error::NonFinite);
        }
        for c in 0..nd {
            for r in 0..c {
                if data[(r, c)] != data[(c, r)] {
                    return Err(Error::InvalidDims("observation is not symmetric".into()));
                }
            }
        }
        for i in 0..n {
            for a in 0..d {
                for b in 0..d {
                    let want = if a == b { 1.0 } else { 0.0 };
                    if data[(i * d + a, i * d + b)] != want {
                        return Err(Error::InvalidDims(format!(
                            "diagonal block {i} is not the identity"
                        )));
                    }
                }
            }
        }
        Ok(Self { n, d, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn as_matrix(&self) -> &Mat {
        &self.data
    }

    pub fn block(&self, i: usize, j: usize) -> Mat {
        let d = self.d;
        self.data.view((i * d, j * d), (d, d)).into_owned()
    }

    /// `C S` for a stack `S`.
    pub fn apply(&self, s: &BlockStack) -> Mat {
        &self.data * s.as_matrix()
    }
}

/// Ground truth, noise level, observation and the seed that produced the noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncProblem {
    pub truth: BlockStack,
    pub sigma: f64,
    pub observation: Observation,
    pub seed: u64,
}

impl SyncProblem {
    pub fn n(&self) -> usize {
        self.truth.n()
    }

    pub fn d(&self) -> usize {
        self.truth.d()
    }

    /// The noise matrix `W = (C - Z Z^T) / sigma`; `None` when `sigma = 0`.
    pub fn noise(&self) -> Option<Mat> {
        if self.sigma == 0.0 {
            return None;
        }
        let z = self.truth.as_matrix();
        Some((self.observation.as_matrix() - z * z.transpose()) / self.sigma)
    }
}

/// Haar-distributed orthogonal matrix from the QR factorization of a
/// Gaussian matrix, with the signs of `diag(R)` moved into `Q`.
pub fn haar_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> OrthogonalMatrix {
    loop {
        let g = Mat::from_fn(d, d, |_, _| StandardNormal.sample(&mut *rng));
        let qr = g.qr();
        let r = qr.r();
        if (0..d).any(|k| r[(k, k)] == 0.0) {
            continue;
        }
        let mut q = qr.q();
        for k in 0..d {
            if r[(k, k)] < 0.0 {
                q.column_mut(k).neg_mut();
            }
        }
        return OrthogonalMatrix::new_unchecked(q);
    }
}

/// `n` independent Haar blocks, deterministic in `seed`.
pub fn sample_ground_truth(n: usize, d: usize, seed: u64) -> Result<BlockStack> {
    check_dims(n, d)?;
    let mut rng = rng_for(seed, TRUTH_STREAM);
    let blocks: Vec<Mat> = (0..n)
        .map(|_| haar_orthogonal(d, &mut rng).into_inner())
        .collect();
    BlockStack::from_blocks(&blocks)
}

/// Draws `W` and assembles `C = Z Z^T + sigma W`.
///
/// Entries of the strictly upper blocks are drawn block by block for
/// `i < j` in row-major order, each block row-major.
pub fn generate_problem(truth: &BlockStack, sigma: f64, seed: u64) -> Result<SyncProblem> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidSigma(sigma));
    }
    let (n, d) = (truth.n(), truth.d());
    if !truth.is_orthogonal() {
        return Err(Error::NotOrthogonal {
            deviation: truth.orthogonality_defect(),
        });
    }
    let z = truth.as_matrix();
    let mut c = z * z.transpose();
    let mut rng = rng_for(seed, NOISE_STREAM);
    for i in 0..n {
        for j in (i + 1)..n {
            for a in 0..d {
                for b in 0..d {
                    let w: f64 = StandardNormal.sample(&mut rng);
                    c[(i * d + a, j * d + b)] += sigma * w;
                }
            }
        }
    }
    // Diagonal blocks are exactly Z_i Z_i^T = I up to rounding; set them
    // exactly and mirror the upper triangle so symmetry is bit-exact.
    let nd = n * d;
    for col in 0..nd {
        for row in (col + 1)..nd {
            c[(row, col)] = c[(col, row)];
        }
    }
    for i in 0..n {
        for a in 0..d {
            for b in 0..d {
                c[(i * d + a, i * d + b)] = if a == b { 1.0 } else { 0.0 };
            }
        }
    }
    Ok(SyncProblem {
        truth: truth.clone(),
        sigma,
        observation: Observation { n, d, data: c },
        seed,
    })
}

/// `sigma^{-1} sqrt(n / d)`.
pub fn snr(n: usize, d: usize, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidSigma(sigma));
    }
    Ok((n as f64 / d as f64).sqrt() / sigma)
}

/// Noise level for a given `C_sigma = SNR^{-1}`: `C_sigma sqrt(n / d)`.
pub fn sigma_from_c(n: usize, d: usize, c_sigma: f64) -> f64 {
    c_sigma * (n as f64 / d as f64).sqrt()
}

/// Regime threshold `sqrt(d) + sqrt(log n)` below which the theory does not apply.
pub fn snr_threshold(n: usize, d: usize) -> f64 {
    (d as f64).sqrt() + (n as f64).ln().sqrt()
}

/// `min_O ||S - Z O||_F` and the minimizing `O = P(Z^T S)`.
pub fn frobenius_block_distance(s: &BlockStack, z: &BlockStack) -> Result<(f64, OrthogonalMatrix)> {
    if s.n() != z.n() || s.d() != z.d() {
        return Err(Error::InvalidDims(format!(
            "stacks differ in shape: ({}, {}) vs ({}, {})",
            s.n(),
            s.d(),
            z.n(),
            z.d()
        )));
    }
    let q = polar_retraction(&(z.as_matrix().transpose() * s.as_matrix()))?;
    let dist = (s.as_matrix() - z.as_matrix() * q.as_matrix()).norm();
    Ok((dist, q))
}

/// Largest per-block error `max_i ||S_i - Z_i Q||_F` after global alignment.
pub fn max_block_error(s: &BlockStack, z: &BlockStack) -> Result<f64> {
    let (_, q) = frobenius_block_distance(s, z)?;
    let aligned = z.rotate(q.as_matrix());
    Ok((0..s.n())
        .map(|i| (s.block(i) - aligned.block(i)).norm())
        .fold(0.0, f64::max))
}

//! Parallel dilated causal convolutions summed into one refined
//! representation: `x + gelu(Σ_k conv(x, kernel_k, d_k))`, then a pointwise
//! linear mix.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct MultiResParams {
    /// One `[taps×d]` kernel per branch; all branches share `taps`.
    pub kernels: Vec<Tensor>,
    pub dilations: Vec<usize>,
    pub mix_w: Tensor,
    pub mix_b: Tensor,
}

impl MultiResParams {
    /// Zero kernels with an identity mix.
    pub fn identity(d: usize, taps: usize, dilations: &[usize]) -> Self {
        MultiResParams {
            kernels: dilations.iter().map(|_| Tensor::zeros([taps, d])).collect(),
            dilations: dilations.to_vec(),
            mix_w: Tensor::eye(d),
            mix_b: Tensor::zeros([d]),
        }
    }

    pub fn taps(&self) -> usize {
        self.kernels.first().map_or(0, |k| k.shape()[0])
    }

    pub fn validate(&self) -> Result<()> {
        validate_dilations(&self.dilations)?;
        if self.kernels.len() != self.dilations.len() {
            return Err(Error::Config(format!(
                "{} kernels for {} dilations",
                self.kernels.len(),
                self.dilations.len()
            )));
        }
        let shape = self.kernels[0].shape();
        if self.kernels.iter().any(|k| k.shape() != shape) || shape.len() != 2 || shape[0] == 0 {
            return Err(Error::shape("multires", "branch kernels must share one [taps×d] shape"));
        }
        let d = shape[1];
        if self.mix_w.shape() != [d, d] || self.mix_b.shape() != [d] {
            return Err(Error::shape("multires", "mix must be [d×d] with a [d] bias"));
        }
        Ok(())
    }
}

pub(crate) fn validate_dilations(dilations: &[usize]) -> Result<()> {
    if dilations.is_empty() {
        return Err(Error::Config("multi-resolution block needs at least one branch".into()));
    }
    if dilations[0] == 0 || dilations.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!(
            "dilations must be positive and strictly increasing, got {dilations:?}"
        )));
    }
    Ok(())
}

/// `1 + (taps − 1)·max(d_k)`.
pub fn receptive_field(taps: usize, dilations: &[usize]) -> usize {
    1 + taps.saturating_sub(1) * dilations.iter().copied().max().unwrap_or(0)
}

pub fn apply_on_tape(
    g: &mut Graph,
    x: Var,
    kernels: &[Var],
    dilations: &[usize],
    mix_w: Var,
    mix_b: Var,
) -> Result<Var> {
    validate_dilations(dilations)?;
    if kernels.len() != dilations.len() {
        return Err(Error::Config("kernel/dilation count mismatch".into()));
    }
    let mut sum = g.causal_conv1d(x, kernels[0], dilations[0])?;
    for (&k, &dil) in kernels.iter().zip(dilations).skip(1) {
        let branch = g.causal_conv1d(x, k, dil)?;
        sum = g.add(sum, branch)?;
    }
    let act = g.gelu(sum)?;
    let z = g.add(x, act)?;
    let mixed = g.matmul(z, mix_w)?;
    g.add_bias(mixed, mix_b)
}

/// Block forward on `x[B×c×d]`. Returns the output and whether the
/// receptive field reaches past the chunk start (allowed, but worth a warning).
pub fn multires_forward(x: &Tensor, p: &MultiResParams) -> Result<(Tensor, bool)> {
    p.validate()?;
    if x.rank() != 3 {
        return Err(Error::shape("multires_forward", format!("{:?}", x.shape())));
    }
    let overreach = receptive_field(p.taps(), &p.dilations) > x.shape()[1];
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let ks: Vec<Var> = p.kernels.iter().map(|k| g.constant(k.clone())).collect();
    let w = g.constant(p.mix_w.clone());
    let b = g.constant(p.mix_b.clone());
    let out = apply_on_tape(&mut g, xv, &ks, &p.dilations, w, b)?;
    Ok((g.value(out).clone(), overreach))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Activation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_kernels_identity_mix() {
        let x = Tensor::from_fn([2, 6, 3], |i| (i as f64 * 0.37).cos());
        let p = MultiResParams::identity(3, 3, &[1, 2, 4]);
        assert_eq!(multires_forward(&x, &p).unwrap().0, x);
    }

    #[test]
    fn single_unit_branch() {
        let x = Tensor::new([1, 2, 1], vec![0.5, -1.2]).unwrap();
        let mut p = MultiResParams::identity(1, 1, &[1]);
        p.kernels[0] = Tensor::full([1, 1], 1.0);
        let (y, _) = multires_forward(&x, &p).unwrap();
        for (o, &v) in y.data().iter().zip(x.data()) {
            assert_eq!(*o, v + Activation::Gelu.apply(v));
        }
    }

    #[test]
    fn impulse_support() {
        let mut x = Tensor::zeros([1, 8, 1]);
        x.data_mut()[0] = 1.0;
        let mut p = MultiResParams::identity(1, 2, &[1, 2, 4]);
        for k in &mut p.kernels {
            *k = Tensor::full([2, 1], 0.7);
        }
        let (y, _) = multires_forward(&x, &p).unwrap();
        let support: Vec<usize> = (0..8).filter(|&t| y.data()[t] != 0.0).collect();
        assert_eq!(support, vec![0, 1, 2, 4]);
    }

    #[test]
    fn receptive_field_examples() {
        assert_eq!(receptive_field(3, &[1, 2, 4]), 9);
        assert_eq!(receptive_field(1, &[1, 2, 4]), 1);
        assert_eq!(receptive_field(2, &[1, 2, 4, 8]), 9);
    }

    #[test]
    fn rejects_empty_and_unordered_branches() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 4, 1]));
        let w = g.constant(Tensor::eye(1));
        let b = g.constant(Tensor::zeros([1]));
        assert!(matches!(apply_on_tape(&mut g, x, &[], &[], w, b), Err(Error::Config(_))));
        let p = MultiResParams::identity(1, 2, &[2, 1]);
        assert!(p.validate().is_err());
    }

    #[test]
    fn overreach_is_flagged() {
        let x = Tensor::zeros([1, 8, 2]);
        let p = MultiResParams::identity(2, 3, &[1, 2, 4]);
        assert!(multires_forward(&x, &p).unwrap().1);
        let x = Tensor::zeros([1, 16, 2]);
        assert!(!multires_forward(&x, &p).unwrap().1);
    }

    #[test]
    fn dependency_cone_matches_receptive_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (len, d) = (24, 2);
        let p = MultiResParams {
            kernels: (0..3).map(|_| Tensor::randn([3, d], 1.0, &mut rng)).collect(),
            dilations: vec![1, 2, 4],
            mix_w: Tensor::randn([d, d], 1.0, &mut rng),
            mix_b: Tensor::randn([d], 1.0, &mut rng),
        };
        let rf = receptive_field(3, &p.dilations);
        let x = Tensor::randn([1, len, d], 1.0, &mut rng);
        let (base, _) = multires_forward(&x, &p).unwrap();
        for s in 0..len {
            let mut xp = x.clone();
            xp.data_mut()[s * d] += 1.0;
            let (y, _) = multires_forward(&xp, &p).unwrap();
            for t in 0..len {
                let same = (0..d).all(|c| y.at(&[0, t, c]) == base.at(&[0, t, c]));
                let in_cone = t >= s && t - s < rf;
                if !in_cone {
                    assert!(same, "position {t} moved after perturbing {s}");
                }
            }
        }
    }

    #[test]
    fn gradient_check_all_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 2;
        let mut params: Vec<Tensor> = (0..2).map(|_| Tensor::randn([2, d], 0.8, &mut rng)).collect();
        params.push(Tensor::randn([d, d], 0.8, &mut rng));
        params.push(Tensor::randn([d], 0.8, &mut rng));
        params.push(Tensor::randn([2, 6, d], 1.0, &mut rng));
        let r = grad_check(
            |g, v| {
                let y = apply_on_tape(g, v[4], &v[0..2], &[1, 2], v[2], v[3])?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            },
            &params,
            60,
            1e-5,
            7,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}

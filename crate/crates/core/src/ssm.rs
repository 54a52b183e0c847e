//! Diagonal state-space block.
//!
//! Each channel is a scalar continuous-time system `h' = a·h + b·x`,
//! `y = c·h`, discretized with a zero-order hold over timestep `Δ` and
//! unrolled into a `taps`-long causal convolution kernel.

use crate::error::{Error, Result};
use crate::numerics::{ops, Graph, Tensor, Var};

/// Per-channel parameters of the diagonal system.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    /// Diagonal of `A`; must be `≤ 0` (`0` is the running-sum limit).
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    /// Positive timestep per channel.
    pub delta: Vec<f64>,
    pub taps: usize,
}

impl SsmParams {
    /// Builds parameters from the unconstrained log-decay `rho`
    /// (`a = −exp(rho)`).
    pub fn from_rho(rho: &[f64], b: &[f64], c: &[f64], delta: &[f64], taps: usize) -> Result<Self> {
        let p = SsmParams {
            a: rho.iter().map(|r| -r.exp()).collect(),
            b: b.to_vec(),
            c: c.to_vec(),
            delta: delta.to_vec(),
            taps,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.a.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.a.len();
        if self.b.len() != d || self.c.len() != d || self.delta.len() != d {
            return Err(Error::shape("ssm_params", "a, b, c, delta lengths differ"));
        }
        if self.taps == 0 {
            return Err(Error::Config("ssm kernel needs at least one tap".into()));
        }
        if let Some(a) = self.a.iter().find(|a| !(**a <= 0.0)) {
            return Err(Error::Config(format!("ssm decay must be non-positive, got {a}")));
        }
        if let Some(dt) = self.delta.iter().find(|dt| !(**dt > 0.0)) {
            return Err(Error::Config(format!("ssm timestep must be positive, got {dt}")));
        }
        Ok(())
    }
}

/// Gate applied after the convolution: `sigmoid(x·w + bias)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gate {
    pub w: Tensor,
    pub bias: Tensor,
}

impl Gate {
    pub fn zeros(d: usize) -> Self {
        Gate {
            w: Tensor::zeros([d, d]),
            bias: Tensor::zeros([d]),
        }
    }
}

/// `(ā, b̄/b)` for one channel. Uses `expm1` so the `a → 0` limit is exact.
fn discretize(a: f64, delta: f64) -> (f64, f64) {
    let x = a * delta;
    let abar = x.exp();
    let gain = if a == 0.0 { delta } else { x.exp_m1() / a };
    (abar, gain)
}

/// d(gain)/da where gain = expm1(aΔ)/a.
fn gain_derivative(a: f64, delta: f64) -> f64 {
    let x = a * delta;
    if x.abs() < 1e-3 {
        delta * delta * (0.5 + x / 3.0 + x * x / 8.0 + x * x * x / 30.0)
    } else {
        (delta * x.exp() * a - x.exp_m1()) / (a * a)
    }
}

/// Convolution kernel `K[j, ch] = c·ā^j·b̄` of shape `[taps×d]`.
pub fn build_kernel(p: &SsmParams) -> Result<Tensor> {
    p.validate()?;
    kernel_from_a(&p.a, &p.b, &p.c, &p.delta, p.taps)
}

fn kernel_from_a(a: &[f64], b: &[f64], c: &[f64], delta: &[f64], taps: usize) -> Result<Tensor> {
    let d = a.len();
    if b.len() != d || c.len() != d || delta.len() != d {
        return Err(Error::shape("ssm_kernel", "parameter lengths differ"));
    }
    let mut k = Tensor::zeros([taps, d]);
    let kd = k.data_mut();
    for ch in 0..d {
        let (abar, gain) = discretize(a[ch], delta[ch]);
        let mut v = c[ch] * gain * b[ch];
        for j in 0..taps {
            kd[j * d + ch] = v;
            v *= abar;
        }
    }
    Ok(k)
}

pub(crate) fn kernel_from_rho(
    rho: &[f64],
    b: &[f64],
    c: &[f64],
    delta: &[f64],
    taps: usize,
) -> Result<Tensor> {
    let a: Vec<f64> = rho.iter().map(|r| -r.exp()).collect();
    kernel_from_a(&a, b, c, delta, taps)
}

/// Vector-Jacobian product of [`kernel_from_rho`]: returns gradients for
/// `(rho, b, c)` given `d loss / d K`.
pub(crate) fn kernel_from_rho_backward(
    rho: &[f64],
    b: &[f64],
    c: &[f64],
    delta: &[f64],
    grad_k: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = rho.len();
    let taps = grad_k.shape()[0];
    let gk = grad_k.data();
    let mut grho = Tensor::zeros([d]);
    let mut gb = Tensor::zeros([d]);
    let mut gc = Tensor::zeros([d]);
    for ch in 0..d {
        let a = -rho[ch].exp();
        let dt = delta[ch];
        let (abar, gain) = discretize(a, dt);
        let dgain = gain_derivative(a, dt);
        let (mut sum_c, mut sum_b, mut sum_a) = (0.0, 0.0, 0.0);
        let mut pow = 1.0;
        for j in 0..taps {
            let g = gk[j * d + ch];
            // K = c·b·gain·ā^j
            sum_c += g * pow * gain * b[ch];
            sum_b += g * pow * gain * c[ch];
            sum_a += g * c[ch] * b[ch] * (j as f64 * dt * pow * gain + pow * dgain);
            pow *= abar;
        }
        gc.data_mut()[ch] = sum_c;
        gb.data_mut()[ch] = sum_b;
        grho.data_mut()[ch] = sum_a * a;
    }
    (grho, gb, gc)
}

/// Convolution, gate and residual on the tape:
/// `x + conv(x, kernel) ⊙ sigmoid(x·gate_w + gate_b)`.
pub fn apply_on_tape(g: &mut Graph, x: Var, kernel: Var, gate_w: Var, gate_b: Var) -> Result<Var> {
    let conv = g.causal_conv1d(x, kernel, 1)?;
    let pre = g.matmul(x, gate_w)?;
    let pre = g.add_bias(pre, gate_b)?;
    let gate = g.sigmoid(pre)?;
    let gated = g.mul(conv, gate)?;
    g.add(x, gated)
}

/// Full block on `x[B×c×d]`. The kernel may not be longer than the chunk.
pub fn ssm_forward(x: &Tensor, p: &SsmParams, gate: &Gate) -> Result<Tensor> {
    if x.rank() != 3 || x.shape()[2] != p.channels() {
        return Err(Error::shape(
            "ssm_forward",
            format!("input {:?} for {} channels", x.shape(), p.channels()),
        ));
    }
    if p.taps > x.shape()[1] {
        return Err(Error::Config(format!(
            "ssm kernel length {} exceeds chunk length {}",
            p.taps,
            x.shape()[1]
        )));
    }
    let kernel = build_kernel(p)?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let kv = g.constant(kernel);
    let wv = g.constant(gate.w.clone());
    let bv = g.constant(gate.bias.clone());
    let out = apply_on_tape(&mut g, xv, kv, wv, bv)?;
    Ok(g.value(out).clone())
}

/// Sequential recurrence `h_t = ā·h_{t−1} + b̄·x_t`, `y_t = c·h_t`, run
/// independently of the kernel path. Returns the ungated output `y`.
pub fn ssm_scan_oracle(x: &Tensor, p: &SsmParams) -> Result<Tensor> {
    p.validate()?;
    if x.rank() != 3 || x.shape()[2] != p.channels() {
        return Err(Error::shape("ssm_scan_oracle", format!("{:?}", x.shape())));
    }
    let (batch, len, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut y = x.zeros_like();
    let xs = x.data();
    let ys = y.data_mut();
    for ch in 0..d {
        let abar = (p.a[ch] * p.delta[ch]).exp();
        let bbar = if p.a[ch] == 0.0 {
            p.delta[ch] * p.b[ch]
        } else {
            (abar - 1.0) / p.a[ch] * p.b[ch]
        };
        for bt in 0..batch {
            let mut h = 0.0;
            for t in 0..len {
                let i = (bt * len + t) * d + ch;
                h = abar * h + bbar * xs[i];
                ys[i] = p.c[ch] * h;
            }
        }
    }
    Ok(y)
}

/// Ungated kernel-path output, for comparison with [`ssm_scan_oracle`].
pub fn ssm_conv_path(x: &Tensor, p: &SsmParams) -> Result<Tensor> {
    ops::causal_conv1d(x, &build_kernel(p)?, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(a: f64, taps: usize) -> SsmParams {
        SsmParams {
            a: vec![a],
            b: vec![1.0],
            c: vec![1.0],
            delta: vec![1.0],
            taps,
        }
    }

    #[test]
    fn zero_decay_is_running_sum() {
        let k = build_kernel(&scalar(0.0, 6)).unwrap();
        assert_eq!(k.data(), &[1.0; 6]);
    }

    #[test]
    fn half_life_kernel() {
        let k = build_kernel(&scalar(-(2f64.ln()), 5)).unwrap();
        let bbar = 0.5 / 2f64.ln();
        assert_abs_diff_eq!(bbar, 0.7213, epsilon = 1e-4);
        for (j, &v) in k.data().iter().enumerate() {
            assert_abs_diff_eq!(v, bbar * 0.5f64.powi(j as i32), epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_output_map_gives_zero_kernel() {
        let mut p = scalar(-0.3, 4);
        p.c = vec![0.0];
        assert!(build_kernel(&p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_positive_decay_and_bad_timestep() {
        assert!(build_kernel(&scalar(0.1, 2)).is_err());
        let mut p = scalar(-0.1, 2);
        p.delta = vec![0.0];
        assert!(build_kernel(&p).is_err());
    }

    #[test]
    fn zero_gate_halves_the_convolution() {
        let x = Tensor::new([1, 3, 1], vec![1.0, 2.0, -1.0]).unwrap();
        let p = scalar(0.0, 2); // kernel [1, 1]
        let out = ssm_forward(&x, &p, &Gate::zeros(1)).unwrap();
        // conv = [1, 3, 1]; out = x + 0.5·conv
        assert_eq!(out.data(), &[1.5, 3.5, -0.5]);
    }

    #[test]
    fn zero_kernel_is_identity() {
        let x = Tensor::from_fn([2, 4, 3], |i| (i as f64).sin());
        let mut p = SsmParams {
            a: vec![-0.5; 3],
            b: vec![1.0; 3],
            c: vec![0.0; 3],
            delta: vec![1.0; 3],
            taps: 4,
        };
        let gate = Gate {
            w: Tensor::full([3, 3], 0.2),
            bias: Tensor::full([3], -0.1),
        };
        assert_eq!(ssm_forward(&x, &p, &gate).unwrap(), x);
        p.taps = 5;
        assert!(matches!(ssm_forward(&x, &p, &gate), Err(Error::Config(_))));
    }

    #[test]
    fn running_sum_impulse() {
        let mut x = Tensor::zeros([1, 5, 1]);
        x.data_mut()[0] = 1.0;
        let y = ssm_conv_path(&x, &scalar(0.0, 5)).unwrap();
        assert_eq!(y.data(), &[1.0; 5]);
    }

    #[test]
    fn scan_examples() {
        let p = scalar(-0.4, 6);
        let zero = ssm_scan_oracle(&Tensor::zeros([1, 6, 1]), &p).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let mut x = Tensor::zeros([1, 6, 1]);
        x.data_mut()[0] = 1.0;
        let y = ssm_scan_oracle(&x, &p).unwrap();
        let abar = (-0.4f64).exp();
        let bbar = (abar - 1.0) / -0.4;
        for t in 0..6 {
            assert_abs_diff_eq!(y.data()[t], abar.powi(t as i32) * bbar, epsilon = 1e-15);
        }
    }

    #[test]
    fn kernel_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 3;
        let rho = Tensor::new([d], vec![-2.0, -0.3, 0.5]).unwrap();
        let b = Tensor::randn([d], 1.0, &mut rng);
        let c = Tensor::randn([d], 1.0, &mut rng);
        let x = Tensor::randn([2, 5, d], 1.0, &mut rng);
        let w = Tensor::randn([d, d], 0.5, &mut rng);
        let bias = Tensor::randn([d], 0.5, &mut rng);
        let delta = vec![1.0, 0.5, 2.0];
        let r = grad_check(
            |g, v| {
                let k = g.ssm_kernel(v[0], v[1], v[2], &delta, 4)?;
                let y = apply_on_tape(g, v[3], k, v[4], v[5])?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            },
            &[rho, b, c, x, w, bias],
            80,
            1e-5,
            5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn gain_derivative_is_continuous_at_series_switch() {
        for &a in &[-9.9e-4, -1.01e-3] {
            let h = 1e-7;
            let (_, gp) = discretize(a + h, 1.0);
            let (_, gm) = discretize(a - h, 1.0);
            assert_abs_diff_eq!(gain_derivative(a, 1.0), (gp - gm) / (2.0 * h), epsilon = 1e-7);
        }
    }

    proptest! {
        #[test]
        fn kernel_magnitude_non_increasing(rho in -5.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0, dt in 0.05f64..3.0) {
            let p = SsmParams::from_rho(&[rho], &[b], &[c], &[dt], 24).unwrap();
            let k = build_kernel(&p).unwrap();
            for w in k.data().windows(2) {
                prop_assert!(w[1].abs() <= w[0].abs());
            }
        }

        #[test]
        fn conv_path_matches_scan(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (len, d) = (12, 3);
            let rho = Tensor::randn([d], 1.0, &mut rng);
            let b = Tensor::randn([d], 1.0, &mut rng);
            let c = Tensor::randn([d], 1.0, &mut rng);
            let p = SsmParams::from_rho(rho.data(), b.data(), c.data(), &[1.0; 3], len).unwrap();
            let x = Tensor::randn([2, len, d], 1.0, &mut rng);
            let conv = ssm_conv_path(&x, &p).unwrap();
            let scan = ssm_scan_oracle(&x, &p).unwrap();
            prop_assert!(conv.max_abs_diff(&scan) < 1e-10);
        }
    }
}

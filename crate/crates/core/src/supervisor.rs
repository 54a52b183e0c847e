//! Global recurrent supervisor: a GRU cell carrying `h_g` across chunks.
//!
//! Update convention:
//! `z = σ(xW_z + hU_z + b_z)`, `r = σ(xW_r + hU_r + b_r)`,
//! `h̃ = tanh(xW_h + (r⊙h)U_h + b_h)`, `h' = (1 − z)⊙h + z⊙h̃`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_h: Tensor,
    pub u_z: Tensor,
    pub u_r: Tensor,
    pub u_h: Tensor,
    pub b_z: Tensor,
    pub b_r: Tensor,
    pub b_h: Tensor,
}

/// Tape handles for the nine GRU arrays.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
}

impl GruParams {
    pub fn zeros(d_in: usize, d_h: usize) -> Self {
        GruParams {
            w_z: Tensor::zeros([d_in, d_h]),
            w_r: Tensor::zeros([d_in, d_h]),
            w_h: Tensor::zeros([d_in, d_h]),
            u_z: Tensor::zeros([d_h, d_h]),
            u_r: Tensor::zeros([d_h, d_h]),
            u_h: Tensor::zeros([d_h, d_h]),
            b_z: Tensor::zeros([d_h]),
            b_r: Tensor::zeros([d_h]),
            b_h: Tensor::zeros([d_h]),
        }
    }

    /// Gaussian weights scaled by fan-in, zero biases.
    pub fn random<R: Rng + ?Sized>(d_in: usize, d_h: usize, rng: &mut R) -> Self {
        let sw = 1.0 / (d_in as f64).sqrt();
        let su = 1.0 / (d_h as f64).sqrt();
        GruParams {
            w_z: Tensor::randn([d_in, d_h], sw, rng),
            w_r: Tensor::randn([d_in, d_h], sw, rng),
            w_h: Tensor::randn([d_in, d_h], sw, rng),
            u_z: Tensor::randn([d_h, d_h], su, rng),
            u_r: Tensor::randn([d_h, d_h], su, rng),
            u_h: Tensor::randn([d_h, d_h], su, rng),
            b_z: Tensor::zeros([d_h]),
            b_r: Tensor::zeros([d_h]),
            b_h: Tensor::zeros([d_h]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w_z.shape()[0]
    }

    pub fn d_h(&self) -> usize {
        self.u_z.shape()[0]
    }

    pub fn arrays(&self) -> [&Tensor; 9] {
        [
            &self.w_z, &self.w_r, &self.w_h, &self.u_z, &self.u_r, &self.u_h, &self.b_z, &self.b_r,
            &self.b_h,
        ]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> GruVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        GruVars {
            w_z: leaf(&self.w_z),
            w_r: leaf(&self.w_r),
            w_h: leaf(&self.w_h),
            u_z: leaf(&self.u_z),
            u_r: leaf(&self.u_r),
            u_h: leaf(&self.u_h),
            b_z: leaf(&self.b_z),
            b_r: leaf(&self.b_r),
            b_h: leaf(&self.b_h),
        }
    }
}

fn gate(g: &mut Graph, x: Var, w: Var, h: Var, u: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    let hu = g.matmul(h, u)?;
    let s = g.add(xw, hu)?;
    g.add_bias(s, b)
}

/// One GRU step on the tape.
pub fn gru_on_tape(g: &mut Graph, x: Var, h: Var, p: &GruVars) -> Result<Var> {
    let pre_z = gate(g, x, p.w_z, h, p.u_z, p.b_z)?;
    let z = g.sigmoid(pre_z)?;
    let pre_r = gate(g, x, p.w_r, h, p.u_r, p.b_r)?;
    let r = g.sigmoid(pre_r)?;
    let rh = g.mul(r, h)?;
    let pre_c = gate(g, x, p.w_h, rh, p.u_h, p.b_h)?;
    let cand = g.tanh(pre_c)?;
    // (1 − z)⊙h + z⊙h̃ = h + z⊙(h̃ − h)
    let diff = g.sub(cand, h)?;
    let step = g.mul(z, diff)?;
    g.add(h, step)
}

/// `x[B×d_in]`, `h[B×d_h]` → next state `[B×d_h]`.
pub fn gru_cell(x: &Tensor, h: &Tensor, p: &GruParams) -> Result<Tensor> {
    if x.rank() != 2 || h.rank() != 2 || x.shape()[0] != h.shape()[0] {
        return Err(Error::shape(
            "gru_cell",
            format!("x {:?}, h {:?}", x.shape(), h.shape()),
        ));
    }
    if x.shape()[1] != p.d_in() || h.shape()[1] != p.d_h() {
        return Err(Error::shape(
            "gru_cell",
            format!("x {:?}, h {:?} for d_in {}, d_h {}", x.shape(), h.shape(), p.d_in(), p.d_h()),
        ));
    }
    let mut g = Graph::new();
    let vars = p.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let hv = g.constant(h.clone());
    let out = gru_on_tape(&mut g, xv, hv, &vars)?;
    Ok(g.value(out).clone())
}

/// Zero initial supervisor state.
pub fn init_state(batch: usize, d_h: usize) -> Tensor {
    Tensor::zeros([batch, d_h])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, ops::sigmoid};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_halve_state() {
        let h = Tensor::new([1, 3], vec![0.4, -1.0, 2.0]).unwrap();
        let x = Tensor::new([1, 2], vec![7.0, -3.0]).unwrap();
        let out = gru_cell(&x, &h, &GruParams::zeros(2, 3)).unwrap();
        assert_eq!(out.data(), &[0.2, -0.5, 1.0]);
    }

    #[test]
    fn zero_everything_stays_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = GruParams::random(2, 4, &mut rng);
        let out = gru_cell(&Tensor::zeros([1, 2]), &init_state(1, 4), &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let zero = gru_cell(&Tensor::zeros([3, 2]), &init_state(3, 4), &GruParams::zeros(2, 4)).unwrap();
        assert_eq!(zero, init_state(3, 4));
    }

    #[test]
    fn init_state_shape() {
        assert_eq!(init_state(1, 4).data(), &[0.0; 4]);
        let s = init_state(5, 2);
        assert_eq!(s.shape(), &[5, 2]);
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    /// Straight transcription of the update equations on scalars.
    fn oracle(x: &[f64], h: &[f64], p: &GruParams) -> Vec<f64> {
        let (d_in, d_h) = (p.d_in(), p.d_h());
        let lin = |w: &Tensor, u: &Tensor, b: &Tensor, hv: &[f64], j: usize| {
            let mut s = b.data()[j];
            for i in 0..d_in {
                s += x[i] * w.data()[i * d_h + j];
            }
            for i in 0..d_h {
                s += hv[i] * u.data()[i * d_h + j];
            }
            s
        };
        let z: Vec<f64> = (0..d_h).map(|j| sigmoid(lin(&p.w_z, &p.u_z, &p.b_z, h, j))).collect();
        let r: Vec<f64> = (0..d_h).map(|j| sigmoid(lin(&p.w_r, &p.u_r, &p.b_r, h, j))).collect();
        let rh: Vec<f64> = (0..d_h).map(|j| r[j] * h[j]).collect();
        (0..d_h)
            .map(|j| {
                let cand = lin(&p.w_h, &p.u_h, &p.b_h, &rh, j).tanh();
                (1.0 - z[j]) * h[j] + z[j] * cand
            })
            .collect()
    }

    #[test]
    fn matches_equation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = GruParams::random(2, 2, &mut rng);
        p.b_z = Tensor::randn([2], 1.0, &mut rng);
        p.b_r = Tensor::randn([2], 1.0, &mut rng);
        p.b_h = Tensor::randn([2], 1.0, &mut rng);
        let x = Tensor::randn([1, 2], 1.0, &mut rng);
        let h = Tensor::randn([1, 2], 1.0, &mut rng);
        let out = gru_cell(&x, &h, &p).unwrap();
        for (a, b) in out.data().iter().zip(oracle(x.data(), h.data(), &p)) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn rejects_shape_mismatch() {
        let p = GruParams::zeros(2, 3);
        assert!(gru_cell(&Tensor::zeros([1, 3]), &Tensor::zeros([1, 3]), &p).is_err());
        assert!(gru_cell(&Tensor::zeros([2, 2]), &Tensor::zeros([1, 3]), &p).is_err());
    }

    #[test]
    fn gradient_check_all_arrays_and_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (d_in, d_h) = (3, 2);
        let p = GruParams::random(d_in, d_h, &mut rng);
        let mut params: Vec<Tensor> = p.arrays().into_iter().cloned().collect();
        for b in &mut params[6..] {
            *b = Tensor::randn([d_h], 0.5, &mut rng);
        }
        params.push(Tensor::randn([2, d_in], 1.0, &mut rng));
        params.push(Tensor::randn([2, d_h], 0.8, &mut rng));
        let r = grad_check(
            |g, v| {
                let vars = GruVars {
                    w_z: v[0],
                    w_r: v[1],
                    w_h: v[2],
                    u_z: v[3],
                    u_r: v[4],
                    u_h: v[5],
                    b_z: v[6],
                    b_r: v[7],
                    b_h: v[8],
                };
                let h = gru_on_tape(g, v[9], v[10], &vars)?;
                let sq = g.mul(h, h)?;
                g.sum(sq)
            },
            &params,
            120,
            1e-5,
            4,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    proptest! {
        #[test]
        fn convex_and_bounded(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (d_in, d_h) = (3, 4);
            let mut p = GruParams::random(d_in, d_h, &mut rng);
            p.b_h = Tensor::randn([d_h], 1.0, &mut rng);
            let x = Tensor::randn([2, d_in], 2.0, &mut rng);
            let h = Tensor::from_fn([2, d_h], |_| rng.gen_range(-1.0..=1.0));
            let out = gru_cell(&x, &h, &p).unwrap();
            // recompute h̃ through the oracle's pieces: convexity means h' lies between h and h̃
            for row in 0..2 {
                let hr = h.row(row);
                let next = oracle(x.row(row), hr, &p);
                let mut pc = p.clone();
                pc.w_z = Tensor::zeros([d_in, d_h]);
                pc.u_z = Tensor::zeros([d_h, d_h]);
                pc.b_z = Tensor::full([d_h], 50.0); // z → 1 isolates h̃
                let cand = oracle(x.row(row), hr, &pc);
                for j in 0..d_h {
                    let (lo, hi) = (hr[j].min(cand[j]), hr[j].max(cand[j]));
                    prop_assert!(next[j] >= lo - 1e-12 && next[j] <= hi + 1e-12);
                    prop_assert!(out.row(row)[j].abs() <= 1.0);
                }
            }
        }
    }
}

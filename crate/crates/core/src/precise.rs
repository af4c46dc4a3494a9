//! Central-difference gradients that are not swamped by rounding.
//!
//! With ε = 1e-5 a plain f64 forward pass leaves about 1e-10 of rounding
//! noise in each difference quotient, which is larger than the relative
//! tolerance allows for small gradient entries. Here the recurrent layers
//! run in double-double arithmetic (about 32 significant digits), the
//! perturbed hidden states are reduced to exact-enough f64 differences, and
//! the readout difference is taken through `expm1` so that nothing cancels.

use std::ops::{Add, Mul, Neg, Sub};

use ndarray::Array3;

use crate::gru::{GruModel, OUTPUT_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct Dd {
    hi: f64,
    lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

impl Dd {
    const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };
    const LN2: Dd = Dd {
        hi: std::f64::consts::LN_2,
        lo: 2.319_046_813_846_299_6e-17,
    };

    fn from_f64(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    /// Exact multiplication by a power of two.
    fn ldexp(self, k: i32) -> Self {
        let s = 2f64.powi(k);
        Dd {
            hi: self.hi * s,
            lo: self.lo * s,
        }
    }

    fn div_f64(self, d: f64) -> Self {
        let q1 = self.hi / d;
        let r = self - Dd::from_f64(q1) * Dd::from_f64(d);
        let q2 = r.hi / d;
        let r = r - Dd::from_f64(q2) * Dd::from_f64(d);
        quick_two_sum(q1, q2) + Dd::from_f64(r.hi / d)
    }

    fn recip(self) -> Self {
        let q1 = 1.0 / self.hi;
        let r = Dd::ONE - self * Dd::from_f64(q1);
        let q2 = r.hi / self.hi;
        let r = r - self * Dd::from_f64(q2);
        let q3 = r.hi / self.hi;
        quick_two_sum(q1, q2) + Dd::from_f64(q3)
    }

    /// e^x − 1, accurate near zero.
    fn expm1(self) -> Self {
        if self.hi > 709.0 {
            return Dd::from_f64(f64::INFINITY);
        }
        if self.hi < -40.0 {
            return self.exp() - Dd::ONE;
        }
        // reduce to |r| ≤ ln2/2 / 1024, sum the series, then double back up
        let k = (self.hi / std::f64::consts::LN_2).round();
        let r = (self - Dd::LN2 * Dd::from_f64(k)).ldexp(-10);
        let mut term = r;
        let mut sum = r;
        for n in 2..=12 {
            term = (term * r).div_f64(n as f64);
            sum = sum + term;
        }
        for _ in 0..10 {
            sum = sum * Dd::from_f64(2.0) + sum * sum;
        }
        if k == 0.0 {
            sum
        } else {
            (sum + Dd::ONE).ldexp(k as i32) - Dd::ONE
        }
    }

    fn exp(self) -> Self {
        if self.hi < -745.0 {
            return Dd::ZERO;
        }
        if self.hi >= -40.0 {
            return self.expm1() + Dd::ONE;
        }
        let k = (self.hi / std::f64::consts::LN_2).round();
        let r = self - Dd::LN2 * Dd::from_f64(k);
        (r.expm1() + Dd::ONE).ldexp(k as i32)
    }

    fn sigmoid(self) -> Self {
        (Dd::ONE + (-self).exp()).recip()
    }

    fn tanh(self) -> Self {
        // tanh x = em / (em + 2) with em = e^{2x} − 1
        if self.hi > 20.0 {
            return Dd::ONE - Dd::from_f64(2.0) * (Dd::from_f64(-2.0) * self).exp();
        }
        if self.hi < -20.0 {
            return -(-self).tanh();
        }
        let em = (self * Dd::from_f64(2.0)).expm1();
        em * (em + Dd::from_f64(2.0)).recip()
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, b: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let r = quick_two_sum(s, e + t);
        quick_two_sum(r.hi, r.lo + f)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, b: Dd) -> Dd {
        self + (-b)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, b: Dd) -> Dd {
        let p = self.hi * b.hi;
        let e = self.hi.mul_add(b.hi, -p) + (self.hi * b.lo + self.lo * b.hi);
        quick_two_sum(p, e)
    }
}

struct Layer {
    input: usize,
    hidden: usize,
    w: Vec<Dd>,
    u: Vec<Dd>,
    b: Vec<Dd>,
}

impl Layer {
    fn new(input: usize, hidden: usize, w: &[f64], u: &[f64], b: &[f64]) -> Self {
        let dd = |v: &[f64]| v.iter().copied().map(Dd::from_f64).collect();
        Self {
            input,
            hidden,
            w: dd(w),
            u: dd(u),
            b: dd(b),
        }
    }

    fn param_mut(&mut self, mut i: usize) -> &mut Dd {
        for t in [&mut self.w, &mut self.u, &mut self.b] {
            if i < t.len() {
                return &mut t[i];
            }
            i -= t.len();
        }
        unreachable!("index within layer")
    }

    fn len(&self) -> usize {
        self.w.len() + self.u.len() + self.b.len()
    }

    /// Hidden states for every timestep of one sequence.
    fn run(&self, xs: &[Vec<Dd>]) -> Vec<Vec<Dd>> {
        let h = self.hidden;
        let mut prev = vec![Dd::ZERO; h];
        let mut out = Vec::with_capacity(xs.len());
        let pre = |row: usize, x: &[Dd], hv: &[Dd]| {
            let mut acc = self.b[row];
            for (w, xv) in self.w[row * self.input..(row + 1) * self.input].iter().zip(x) {
                acc = acc + *w * *xv;
            }
            for (u, hv) in self.u[row * h..(row + 1) * h].iter().zip(hv) {
                acc = acc + *u * *hv;
            }
            acc
        };
        for x in xs {
            let z: Vec<Dd> = (0..h).map(|j| pre(j, x, &prev).sigmoid()).collect();
            let r: Vec<Dd> = (0..h).map(|j| pre(h + j, x, &prev).sigmoid()).collect();
            let q: Vec<Dd> = r.iter().zip(&prev).map(|(&r, &p)| r * p).collect();
            let next: Vec<Dd> = (0..h)
                .map(|j| {
                    let c = pre(2 * h + j, x, &q).tanh();
                    prev[j] + z[j] * (c - prev[j])
                })
                .collect();
            out.push(next.clone());
            prev = next;
        }
        out
    }
}

/// σ(a + d) − σ(a) without cancellation.
#[inline]
fn sigmoid_delta(a: f64, d: f64) -> f64 {
    let s = |x: f64| 1.0 / (1.0 + (-x).exp());
    -(-d).exp_m1() * s(-a) * s(a + d)
}

/// Central-difference gradient of the summed squared error, in the flat
/// parameter order of `GruParams::get_flat`.
pub(crate) fn central_differences(model: &GruModel, frames: &Array3<f64>, targets: &Array3<f64>, eps: f64) -> Vec<f64> {
    let p = &model.params;
    let (steps, batch, _) = frames.dim();
    let (h1, h2) = p.hidden_sizes();
    let t = p.tensors();
    let mut l1 = Layer::new(frames.dim().2, h1, t[0], t[1], t[2]);
    let mut l2 = Layer::new(h1, h2, t[3], t[4], t[5]);
    let wr = &p.readout_weights;
    let br = &p.readout_bias;
    let eps_dd = Dd::from_f64(eps);

    let inputs: Vec<Vec<Vec<Dd>>> = (0..batch)
        .map(|n| {
            (0..steps)
                .map(|s| frames.slice(ndarray::s![s, n, ..]).iter().copied().map(Dd::from_f64).collect())
                .collect()
        })
        .collect();
    let base1: Vec<Vec<Vec<Dd>>> = inputs.iter().map(|xs| l1.run(xs)).collect();
    let base2: Vec<Vec<Vec<Dd>>> = base1.iter().map(|xs| l2.run(xs)).collect();
    // f64 readout pre-activations at the unperturbed point, [n][t][j]
    let base_pre: Vec<Vec<Vec<f64>>> = base2
        .iter()
        .map(|seq| {
            seq.iter()
                .map(|hv| {
                    (0..OUTPUT_DIM)
                        .map(|j| br[j] + (0..h2).map(|k| wr[[j, k]] * hv[k].to_f64()).sum::<f64>())
                        .collect()
                })
                .collect()
        })
        .collect();

    // L(+) − L(−) given per-output pre-activation shifts for both sides
    let loss_diff = |shift: &dyn Fn(usize, usize, usize, bool) -> f64, units: &mut dyn Iterator<Item = usize>| -> f64 {
        let units: Vec<usize> = units.collect();
        let mut total = 0.0;
        for n in 0..batch {
            for s in 0..steps {
                for &j in &units {
                    let a = base_pre[n][s][j];
                    let y = 1.0 / (1.0 + (-a).exp());
                    let dp = sigmoid_delta(a, shift(n, s, j, true));
                    let dm = sigmoid_delta(a, shift(n, s, j, false));
                    let tgt = targets[[s, n, j]];
                    total += (dp - dm) * (2.0 * (y - tgt) + dp + dm);
                }
            }
        }
        total
    };

    // readout shift from a perturbed top hidden sequence
    let hidden_shift = |plus: &[Vec<Vec<Dd>>], minus: &[Vec<Vec<Dd>>]| -> f64 {
        let delta = |side: &[Vec<Vec<Dd>>], n: usize, s: usize, k: usize| (side[n][s][k] - base2[n][s][k]).to_f64();
        let shift = |n: usize, s: usize, j: usize, up: bool| {
            let side = if up { plus } else { minus };
            (0..h2).map(|k| wr[[j, k]] * delta(side, n, s, k)).sum::<f64>()
        };
        loss_diff(&shift, &mut (0..OUTPUT_DIM))
    };

    let mut grads = Vec::with_capacity(p.num_params());
    for i in 0..l1.len() {
        let original = *l1.param_mut(i);
        let mut run = |v: Dd| {
            *l1.param_mut(i) = v;
            let top: Vec<_> = inputs.iter().map(|xs| l2.run(&l1.run(xs))).collect();
            top
        };
        let plus = run(original + eps_dd);
        let minus = run(original - eps_dd);
        *l1.param_mut(i) = original;
        grads.push(hidden_shift(&plus, &minus) / (2.0 * eps));
    }
    for i in 0..l2.len() {
        let original = *l2.param_mut(i);
        *l2.param_mut(i) = original + eps_dd;
        let plus: Vec<_> = base1.iter().map(|xs| l2.run(xs)).collect();
        *l2.param_mut(i) = original - eps_dd;
        let minus: Vec<_> = base1.iter().map(|xs| l2.run(xs)).collect();
        *l2.param_mut(i) = original;
        grads.push(hidden_shift(&plus, &minus) / (2.0 * eps));
    }
    for j in 0..OUTPUT_DIM {
        for k in 0..h2 {
            let shift = |n: usize, s: usize, _: usize, up: bool| {
                let d = eps * base2[n][s][k].to_f64();
                if up {
                    d
                } else {
                    -d
                }
            };
            grads.push(loss_diff(&shift, &mut std::iter::once(j)) / (2.0 * eps));
        }
    }
    for j in 0..OUTPUT_DIM {
        let shift = |_: usize, _: usize, _: usize, up: bool| if up { eps } else { -eps };
        grads.push(loss_diff(&shift, &mut std::iter::once(j)) / (2.0 * eps));
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Dd, b: f64, tol: f64) -> bool {
        (a.to_f64() - b).abs() <= tol * b.abs().max(1e-300)
    }

    #[test]
    fn arithmetic_beyond_f64() {
        let third = Dd::from_f64(3.0).recip();
        let back = third * Dd::from_f64(3.0) - Dd::ONE;
        assert!(back.hi.abs() < 1e-30);
        let tiny = Dd::ONE + Dd::from_f64(1e-20) - Dd::ONE;
        assert!((tiny.hi - 1e-20).abs() < 1e-35);
    }

    #[test]
    fn transcendental_agree_with_std() {
        for &x in &[-30.0, -3.2, -0.7, -1e-8, 0.0, 1e-9, 0.4, 2.5, 17.0, 50.0] {
            let d = Dd::from_f64(x);
            assert!(close(d.exp(), x.exp(), 4e-16), "exp {x}");
            assert!(close(d.tanh(), x.tanh(), 4e-16) || x == 0.0, "tanh {x}");
            assert!(close(d.sigmoid(), 1.0 / (1.0 + (-x).exp()), 4e-16), "sigmoid {x}");
        }
        // exp(a) exp(-a) = 1 well past double precision
        let a = Dd::from_f64(1.234_567);
        let prod = a.exp() * (-a).exp() - Dd::ONE;
        assert!(prod.hi.abs() < 1e-29);
        // exp(ln 2) = 2
        assert!((Dd::LN2.exp() - Dd::from_f64(2.0)).hi.abs() < 1e-30);
    }

    #[test]
    fn sigmoid_delta_small_shift() {
        let d = sigmoid_delta(0.3, 1e-9);
        let s = 1.0 / (1.0 + (-0.3f64).exp());
        assert!((d / (s * (1.0 - s) * 1e-9) - 1.0).abs() < 1e-8);
    }
}

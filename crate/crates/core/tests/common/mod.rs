#![allow(dead_code)]

pub mod oracles;

use gaittr::ndtensor::{Precision, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Central finite-difference check of every element of every input.
///
/// Returns the largest relative error `|fd - analytic| / max(1, |analytic|)`.
pub fn grad_check(inputs: &[Tensor], step: f64, build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new(Precision::Double);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).expect("grad").to_vec()).collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut t = Tape::new(Precision::Double);
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let l = build(&mut t, &vs);
        t.value(l).data()[0]
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            let orig = input.data()[e];
            work[ti].data_mut()[e] = orig + step;
            let up = eval(&work);
            work[ti].data_mut()[e] = orig - step;
            let down = eval(&work);
            work[ti].data_mut()[e] = orig;
            let fd = (up - down) / (2.0 * step);
            let a = analytic[ti][e];
            let err = (fd - a).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

/// Weighted-sum probe so that every output element reaches the loss with a
/// distinct coefficient.
pub fn probe_loss(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let mut r = rng(seed ^ 0x5eed);
    let shape = tape.shape(y).to_vec();
    let w = random_tensor(&mut r, &shape, 1.0);
    let wv = tape.constant(w);
    let prod = tape.mul(y, wv).unwrap();
    tape.sum(prod)
}

// ---- double-double arithmetic for high-precision oracles ---------------------------

#[derive(Clone, Copy, Debug)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

impl Dd {
    pub fn from(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    fn two_sum(a: f64, b: f64) -> (f64, f64) {
        let s = a + b;
        let bb = s - a;
        (s, (a - (s - bb)) + (b - bb))
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = Self::two_sum(self.hi, o.hi);
        let e = e + self.lo + o.lo;
        let (hi, lo) = Self::two_sum(s, e);
        Dd { hi, lo }
    }

    pub fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        let e = e + self.hi * o.lo + self.lo * o.hi;
        let (hi, lo) = Self::two_sum(p, e);
        Dd { hi, lo }
    }

    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.add(o.mul(Dd::from(-q1)));
        let q2 = r.hi / o.hi;
        let r = r.add(o.mul(Dd::from(-q2)));
        let q3 = r.hi / o.hi;
        Dd::from(q1).add(Dd::from(q2)).add(Dd::from(q3))
    }

    /// exp via halving + Taylor series + repeated squaring.
    pub fn exp(x: f64) -> Dd {
        let k = 12;
        let r = Dd::from(x / f64::powi(2.0, k)); // exact: power-of-two scaling
        let mut term = Dd::from(1.0);
        let mut sum = Dd::from(1.0);
        for n in 1..30 {
            term = term.mul(r).div(Dd::from(n as f64));
            sum = sum.add(term);
        }
        for _ in 0..k {
            sum = sum.mul(sum);
        }
        sum
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

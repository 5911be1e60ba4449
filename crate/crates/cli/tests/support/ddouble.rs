//! Double-double arithmetic (about 106 significant bits), enough for an
//! independent softmax reference.

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd { hi: std::f64::consts::LN_2, lo: 2.3190468138462996e-17 };

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

impl Dd {
    pub fn from(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    fn norm(hi: f64, lo: f64) -> Self {
        let (hi, lo) = quick_two_sum(hi, lo);
        Dd { hi, lo }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn scale_pow2(self, k: i32) -> Self {
        let s = 2f64.powi(k);
        Dd { hi: self.hi * s, lo: self.lo * s }
    }

    pub fn exp(self) -> Self {
        if self.hi < -700.0 {
            return Dd::from(0.0);
        }
        let k = (self.hi / LN2.hi).round();
        let r = self - LN2 * Dd::from(k);
        // exp(r) = exp(r / 2^10)^(2^10)
        let r = r.scale_pow2(-10);
        let mut term = Dd::from(1.0);
        let mut sum = Dd::from(1.0);
        for i in 1..=20 {
            term = term * r / Dd::from(i as f64);
            sum = sum + term;
        }
        for _ in 0..10 {
            sum = sum * sum;
        }
        sum.scale_pow2(k as i32)
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, b: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Dd::norm(s, e + f)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
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
        let e = self.hi.mul_add(b.hi, -p);
        Dd::norm(p, e + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        let r = self - b * Dd::from(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * Dd::from(q2);
        let q3 = r.hi / b.hi;
        let (q, e) = quick_two_sum(q1, q2);
        Dd::norm(q, e) + Dd::from(q3)
    }
}

/// `softmax(-d / tau)` evaluated in double-double.
pub fn softmax_neg(d: &[f64], tau: f64) -> Vec<f64> {
    let logits: Vec<Dd> = d.iter().map(|&x| -(Dd::from(x) / Dd::from(tau))).collect();
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, l| m.max(l.hi));
    let e: Vec<Dd> = logits.iter().map(|&l| (l - Dd::from(max)).exp()).collect();
    let total = e.iter().fold(Dd::from(0.0), |a, &b| a + b);
    e.iter().map(|&v| (v / total).to_f64()).collect()
}

/// Known digits of e and agreement with the f64 exponential.
pub fn self_check() -> bool {
    let e = Dd::from(1.0).exp();
    let x = Dd::from(-3.5).exp();
    e.hi == std::f64::consts::E
        && (e.lo - 1.4456468917292502e-16).abs() < 1e-30
        && (x.to_f64() - (-3.5f64).exp()).abs() < 1e-16
}

//! Wide-precision references and accuracy characterization.

use super::approx::{fast_inv_sqrt, gelu, nr_reciprocal, taylor_exp, taylor_tanh, GELU_CUBIC, SQRT_2_OVER_PI};
use super::bf16::Bf16;
use super::ops::{layernorm, softmax};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub fn gelu_ref(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

pub fn softmax_ref(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn layernorm_ref(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let r = 1.0 / (var + eps).sqrt();
    x.iter().zip(gamma.iter().zip(beta)).map(|(v, (g, b))| (v - mean) * r * g + b).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub op: String,
    pub domain: String,
    pub cases: u64,
    pub max_ulp: u32,
    pub mean_ulp: f64,
    pub max_rel: f64,
}

#[derive(Default)]
struct Acc {
    cases: u64,
    max_ulp: u32,
    sum_ulp: f64,
    max_rel: f64,
}

impl Acc {
    fn push(&mut self, got: Bf16, want: f64) {
        self.cases += 1;
        let u = got.ulp_distance(Bf16::from_f64(want));
        self.max_ulp = self.max_ulp.max(u);
        self.sum_ulp += u as f64;
        if want != 0.0 {
            self.max_rel = self.max_rel.max(((got.to_f64() - want) / want).abs());
        }
    }

    fn push_rel(&mut self, rel: f64) {
        self.max_rel = self.max_rel.max(rel);
    }

    fn row(self, op: &str, domain: &str) -> AccuracyRow {
        AccuracyRow {
            op: op.into(),
            domain: domain.into(),
            cases: self.cases,
            max_ulp: self.max_ulp,
            mean_ulp: if self.cases > 0 { self.sum_ulp / self.cases as f64 } else { 0.0 },
            max_rel: self.max_rel,
        }
    }
}

fn bf16_in(lo: f64, hi: f64) -> impl Iterator<Item = Bf16> {
    (0u16..=0xffff).map(Bf16::from_bits).filter(move |v| v.is_finite() && v.to_f64() >= lo && v.to_f64() <= hi)
}

/// Error table of every approximation against its wide-precision reference.
pub fn accuracy_report(seed: u64, random_cases: usize) -> Vec<AccuracyRow> {
    let mut rows = Vec::new();

    let mut a = Acc::default();
    for d in (0u16..=0xffff).map(Bf16::from_bits).filter(|v| v.is_normal()) {
        a.push(nr_reciprocal(d).unwrap(), 1.0 / d.to_f64());
    }
    rows.push(a.row("nr_reciprocal", "all normal"));

    let mut a = Acc::default();
    for d in Bf16::positive_normals() {
        a.push(fast_inv_sqrt(d).unwrap(), 1.0 / d.to_f64().sqrt());
    }
    rows.push(a.row("fast_inv_sqrt", "all positive normal"));

    let mut a = Acc::default();
    for x in bf16_in(-8.0, 0.0) {
        a.push(taylor_exp(x), x.to_f64().exp());
    }
    rows.push(a.row("taylor_exp", "[-8, 0]"));

    let mut a = Acc::default();
    for x in bf16_in(-8.0, 8.0) {
        a.push(taylor_tanh(x), x.to_f64().tanh());
    }
    rows.push(a.row("taylor_tanh", "[-8, 8]"));

    let mut a = Acc::default();
    for x in bf16_in(GELU_REL_DOMAIN.0, GELU_REL_DOMAIN.1).filter(|v| v.is_normal() || v.is_zero()) {
        a.push(gelu(x), gelu_ref(x.to_f64()));
    }
    rows.push(a.row("gelu", "[-1, 8], normal inputs"));

    let mut a = Acc::default();
    for x in bf16_in(-16.0, -1.0) {
        let got = gelu(x);
        let want = gelu_ref(x.to_f64());
        a.cases += 1;
        a.push_rel((got.to_f64() - want).abs());
    }
    let mut r = a.row("gelu", "[-16, -1] (max_rel is absolute error)");
    r.mean_ulp = 0.0;
    rows.push(r);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (range, label) in [(SOFTMAX_SCORE_RANGE, "length 16, scores in [-2, 2]"), (8.0, "length 16, scores in [-8, 8]")] {
        let mut a = Acc::default();
        for _ in 0..random_cases {
            let x = random_scores(&mut rng, 16, range);
            let xf: Vec<f64> = x.iter().map(|v| v.to_f64()).collect();
            let got = softmax(&x).unwrap();
            for (g, w) in got.iter().zip(softmax_ref(&xf)) {
                a.push(*g, w);
            }
        }
        rows.push(a.row("softmax", label));
    }

    let mut a = Acc::default();
    for _ in 0..random_cases / 10 {
        let (x, g, b) = random_layernorm_case(&mut rng, 768);
        let got = layernorm(&x, &g, &b, Bf16::from_f64(1e-5)).unwrap();
        let f = |v: &Vec<Bf16>| v.iter().map(|e| e.to_f64()).collect::<Vec<_>>();
        let want = layernorm_ref(&f(&x), &f(&g), &f(&b), Bf16::from_f64(1e-5).to_f64());
        for (gv, w) in got.iter().zip(&want) {
            a.cases += 1;
            let u = gv.ulp_distance(Bf16::from_f64(*w));
            a.max_ulp = a.max_ulp.max(u);
            a.sum_ulp += u as f64;
        }
        a.push_rel(inf_norm_rel(&got, &want));
    }
    rows.push(a.row("layernorm", "length 768 (max_rel is inf-norm relative)"));
    rows
}

/// Half-width of the characterized score range.
pub const SOFTMAX_SCORE_RANGE: f64 = 2.0;

pub fn random_scores(rng: &mut impl Rng, n: usize, range: f64) -> Vec<Bf16> {
    (0..n).map(|_| Bf16::from_f64(rng.gen_range(-range..range))).collect()
}

/// Domain on which GELU is characterized by elementwise relative error.
pub const GELU_REL_DOMAIN: (f64, f64) = (-1.0, 8.0);

pub fn random_layernorm_case(rng: &mut impl Rng, n: usize) -> (Vec<Bf16>, Vec<Bf16>, Vec<Bf16>) {
    let shift: f64 = rng.gen_range(-2.0..2.0);
    let scale: f64 = rng.gen_range(0.1..4.0);
    let x = (0..n).map(|_| Bf16::from_f64(shift + scale * rng.gen_range(-1.0..1.0))).collect();
    let g = (0..n).map(|_| Bf16::from_f64(rng.gen_range(0.5..1.5))).collect();
    let b = (0..n).map(|_| Bf16::from_f64(rng.gen_range(-0.5..0.5))).collect();
    (x, g, b)
}

pub fn inf_norm_rel(got: &[Bf16], want: &[f64]) -> f64 {
    let err = got.iter().zip(want).map(|(g, w)| (g.to_f64() - w).abs()).fold(0.0, f64::max);
    let norm = want.iter().map(|w| w.abs()).fold(0.0, f64::max);
    if norm == 0.0 {
        err
    } else {
        err / norm
    }
}

use super::approx::{fast_inv_sqrt, gelu, nr_reciprocal, taylor_exp};
use super::bf16::Bf16;
use super::NumericsError;
use serde::{Deserialize, Serialize};

/// Lanes in one MAC adder tree.
pub const MAC_LANES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bf16Vector(pub Vec<Bf16>);

impl Bf16Vector {
    pub fn from_f64(values: &[f64]) -> Self {
        Bf16Vector(values.iter().map(|&v| Bf16::from_f64(v)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Bf16] {
        &self.0
    }
}

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bf16Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Bf16>,
}

impl Bf16Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<Bf16>) -> Result<Self, NumericsError> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(NumericsError::Shape(format!("{rows}x{cols} with {} elements", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![Bf16::ZERO; rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[Bf16] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> Bf16 {
        self.data[r * self.cols + c]
    }

    pub fn column(&self, c: usize) -> Vec<Bf16> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }
}

fn tree_reduce(buf: &mut [Bf16]) -> Bf16 {
    let mut n = buf.len();
    if n == 0 {
        return Bf16::ZERO;
    }
    while n > 1 {
        let half = n / 2;
        for i in 0..half {
            buf[i] = buf[2 * i] + buf[2 * i + 1];
        }
        if n % 2 == 1 {
            buf[half] = buf[n - 1];
            n = half + 1;
        } else {
            n = half;
        }
    }
    buf[0]
}

/// 16-wide pairwise tree per chunk, chunk sums combined sequentially.
pub fn bf16_sum(values: &[Bf16]) -> Bf16 {
    let mut acc: Option<Bf16> = None;
    let mut buf = [Bf16::ZERO; MAC_LANES];
    for chunk in values.chunks(MAC_LANES) {
        buf[..chunk.len()].copy_from_slice(chunk);
        let s = tree_reduce(&mut buf[..chunk.len()]);
        acc = Some(match acc {
            None => s,
            Some(a) => a + s,
        });
    }
    acc.unwrap_or(Bf16::ZERO)
}

/// Dot product as computed by one bank MAC unit.
pub fn pim_dot(x: &[Bf16], w: &[Bf16]) -> Bf16 {
    debug_assert_eq!(x.len(), w.len());
    let mut acc: Option<Bf16> = None;
    let mut buf = [Bf16::ZERO; MAC_LANES];
    for (xc, wc) in x.chunks(MAC_LANES).zip(w.chunks(MAC_LANES)) {
        for (i, (a, b)) in xc.iter().zip(wc).enumerate() {
            buf[i] = *a * *b;
        }
        let s = tree_reduce(&mut buf[..xc.len()]);
        acc = Some(match acc {
            None => s,
            Some(a) => a + s,
        });
    }
    acc.unwrap_or(Bf16::ZERO)
}

/// Dot product over a slice that starts at global index `offset` of a vector broadcast
/// in segments of `seg` elements: one partial per segment, partials summed in order.
pub fn segmented_dot(x: &[Bf16], w: &[Bf16], offset: usize, seg: usize) -> Bf16 {
    debug_assert_eq!(x.len(), w.len());
    let mut acc: Option<Bf16> = None;
    let mut i = 0;
    while i < x.len() {
        let g = offset + i;
        let end = ((g / seg + 1) * seg - offset).min(x.len());
        let p = pim_dot(&x[i..end], &w[i..end]);
        acc = Some(match acc {
            None => p,
            Some(a) => a + p,
        });
        i = end;
    }
    acc.unwrap_or(Bf16::ZERO)
}

/// y[r] = W[r] · x for an output-major matrix, input split into segments of `seg`.
pub fn vmm(w: &Bf16Matrix, x: &[Bf16], seg: usize) -> Result<Vec<Bf16>, NumericsError> {
    if w.cols != x.len() {
        return Err(NumericsError::Shape(format!("matrix {}x{} times vector {}", w.rows, w.cols, x.len())));
    }
    Ok((0..w.rows).map(|r| segmented_dot(x, w.row(r), 0, seg)).collect())
}

fn max_of(values: &[Bf16]) -> Bf16 {
    values.iter().copied().fold(values[0], Bf16::max)
}

/// Softmax with max subtraction, Taylor exponentials, BF16 sum and NR reciprocal.
pub fn softmax(scores: &[Bf16]) -> Result<Vec<Bf16>, NumericsError> {
    if scores.is_empty() {
        return Err(NumericsError::Shape("softmax of empty vector".into()));
    }
    let m = max_of(scores);
    let e: Vec<Bf16> = scores.iter().map(|&x| taylor_exp(x - m)).collect();
    let inv = nr_reciprocal(bf16_sum(&e))?;
    Ok(e.into_iter().map(|v| (v * inv).min(Bf16::ONE)).collect())
}

/// Scores multiplied by `scale` before the softmax.
pub fn softmax_scaled(scores: &[Bf16], scale: Bf16) -> Result<Vec<Bf16>, NumericsError> {
    let z: Vec<Bf16> = scores.iter().map(|&s| s * scale).collect();
    softmax(&z)
}

/// Mean and variance are taken over values shifted by x[0]; the mean gets one correction pass.
pub fn layernorm(x: &[Bf16], gamma: &[Bf16], beta: &[Bf16], epsilon: Bf16) -> Result<Vec<Bf16>, NumericsError> {
    let n = x.len();
    if n == 0 || gamma.len() != n || beta.len() != n {
        return Err(NumericsError::Shape(format!("layernorm x={n} gamma={} beta={}", gamma.len(), beta.len())));
    }
    if !(epsilon.to_f64() > 0.0) {
        return Err(NumericsError::Domain("layernorm epsilon must be positive"));
    }
    let inv_n = Bf16::from_f64(1.0 / n as f64);
    let x0 = x[0];
    let s: Vec<Bf16> = x.iter().map(|&v| v - x0).collect();
    let mean = bf16_sum(&s) * inv_n;
    let first: Vec<Bf16> = s.iter().map(|&v| v - mean).collect();
    let residual = bf16_sum(&first) * inv_n;
    let centered: Vec<Bf16> = first.iter().map(|&v| v - residual).collect();
    let var = pim_dot(&centered, &centered) * inv_n;
    let r = fast_inv_sqrt(var + epsilon)?;
    Ok(centered
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&c, (&g, &b))| (c * r) * g + b)
        .collect())
}

pub fn gelu_vec(x: &[Bf16]) -> Vec<Bf16> {
    x.iter().map(|&v| gelu(v)).collect()
}

pub fn add_vec(a: &[Bf16], b: &[Bf16]) -> Vec<Bf16> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

/// Index of the first maximal element.
pub fn argmax(values: &[Bf16]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if v.to_f32() > values[best].to_f32() {
            best = i;
        }
    }
    best
}

pub fn attention_scale(d_head: usize) -> Bf16 {
    Bf16::from_f64(1.0 / (d_head as f64).sqrt())
}

/// softmax(q·Kᵀ · bf16(1/√d_k)) · V for a single head.
pub fn attention_head(q: &[Bf16], k: &Bf16Matrix, v: &Bf16Matrix) -> Result<Vec<Bf16>, NumericsError> {
    if k.cols != q.len() || k.rows != v.rows {
        return Err(NumericsError::Shape(format!(
            "q={} K={}x{} V={}x{}",
            q.len(),
            k.rows,
            k.cols,
            v.rows,
            v.cols
        )));
    }
    let scores: Vec<Bf16> = (0..k.rows).map(|t| pim_dot(q, k.row(t))).collect();
    let p = softmax_scaled(&scores, attention_scale(q.len()))?;
    Ok((0..v.cols).map(|c| pim_dot(&p, &v.column(c))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64) -> Bf16 {
        Bf16::from_f64(x)
    }

    #[test]
    fn sum_tree_order() {
        let h = b(2f64.powi(-8));
        // Left-to-right accumulation would drop both halves.
        assert_eq!(bf16_sum(&[b(1.0), Bf16::ZERO, h, h]).to_f64(), 1.0 + 2f64.powi(-7));
        assert_eq!(bf16_sum(&[b(1.0), h, h, Bf16::ZERO]).to_f64(), 1.0);
        assert_eq!(bf16_sum(&[]), Bf16::ZERO);
    }

    #[test]
    fn segmented_matches_plain_when_single_segment() {
        let x: Vec<Bf16> = (0..40).map(|i| b(i as f64 * 0.1)).collect();
        let w: Vec<Bf16> = (0..40).map(|i| b(1.0 - i as f64 * 0.01)).collect();
        assert_eq!(segmented_dot(&x, &w, 0, 1024), pim_dot(&x, &w));
        let two = pim_dot(&x[..32], &w[..32]) + pim_dot(&x[32..], &w[32..]);
        assert_eq!(segmented_dot(&x, &w, 0, 32), two);
        let off = pim_dot(&x[..8], &w[..8]) + pim_dot(&x[8..], &w[8..]);
        assert_eq!(segmented_dot(&x, &w, 24, 32), off);
    }

    #[test]
    fn softmax_trivia() {
        assert_eq!(softmax(&[b(3.0)]).unwrap(), vec![Bf16::ONE]);
        let p = softmax(&[b(0.7); 4]).unwrap();
        for v in p {
            assert!(v.ulp_distance(b(0.25)) <= 1);
        }
    }

    #[test]
    fn layernorm_identities() {
        let x: Vec<Bf16> = (0..768).map(|i| b((i as f64 * 0.37).sin())).collect();
        let zeros = vec![Bf16::ZERO; 768];
        let ones = vec![Bf16::ONE; 768];
        let beta: Vec<Bf16> = (0..768).map(|i| b(i as f64 * 0.01 - 3.0)).collect();
        let eps = b(1e-5);
        let y = layernorm(&x, &zeros, &beta, eps).unwrap();
        for (a, e) in y.iter().zip(&beta) {
            assert_eq!(a.to_f64(), e.to_f64());
        }
        let c = vec![b(1.7); 768];
        let y = layernorm(&c, &ones, &zeros, eps).unwrap();
        assert!(y.iter().all(|v| v.to_f64() == 0.0));
        assert!(layernorm(&x, &ones[..10], &zeros, eps).is_err());
    }

    #[test]
    fn attention_single_token_returns_value_row() {
        let q: Vec<Bf16> = (0..64).map(|i| b(i as f64 * 0.05)).collect();
        let k = Bf16Matrix::new(1, 64, q.clone()).unwrap();
        let vrow: Vec<Bf16> = (0..64).map(|i| b(-(i as f64) * 0.3 + 1.1)).collect();
        let v = Bf16Matrix::new(1, 64, vrow.clone()).unwrap();
        assert_eq!(attention_head(&q, &k, &v).unwrap(), vrow);
        let bad = Bf16Matrix::zeros(1, 32);
        assert!(attention_head(&q, &bad, &v).is_err());
    }

    #[test]
    fn argmax_first() {
        assert_eq!(argmax(&[b(1.0), b(3.0), b(3.0), b(-1.0)]), 1);
    }
}

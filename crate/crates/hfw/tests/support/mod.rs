//! Scalar-loop reference for the fast-weight module, written against plain
//! nested vectors so it shares no code with the graph implementation.
#![allow(dead_code)]

/// Weights of one module; projections are `[d_in][d_out]` so `y = x W`.
pub struct OracleWeights {
    pub w_k: Vec<Vec<f64>>,
    pub w_v: Vec<Vec<f64>>,
    pub w_q: Vec<Vec<f64>>,
    pub w_g: Vec<Vec<f64>>,
    pub eta: f64,
    pub lambda: f64,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub delta: f64,
    pub eps: f64,
    pub ln_eps: f64,
    pub heads: usize,
}

/// Memory per batch item and head, `[b][h][i][j]`.
pub type Memory = Vec<Vec<Vec<Vec<f64>>>>;

fn project(x: &[f64], w: &[Vec<f64>]) -> Vec<f64> {
    let d_out = w[0].len();
    (0..d_out).map(|j| (0..x.len()).map(|i| x[i] * w[i][j]).sum()).collect()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// One call on `x[b][t][c]`. `m0` is the incoming memory (`None` = zero).
/// Returns the output tokens and the written memory.
pub fn oracle_forward(x: &[Vec<Vec<f64>>], w: &OracleWeights, m0: Option<&Memory>) -> (Vec<Vec<Vec<f64>>>, Memory) {
    let d = w.w_k.len();
    let h = w.heads;
    let dh = d / h;
    let mut out = Vec::new();
    let mut mem_out = Vec::new();
    for (b, tokens) in x.iter().enumerate() {
        let n = tokens.len();
        let k: Vec<Vec<f64>> = tokens.iter().map(|t| project(t, &w.w_k)).collect();
        let v: Vec<Vec<f64>> = tokens.iter().map(|t| project(t, &w.w_v)).collect();
        let q: Vec<Vec<f64>> = tokens.iter().map(|t| project(t, &w.w_q)).collect();
        let mut retrieved = vec![vec![0.0; d]; n];
        let mut mem_b = Vec::new();
        for head in 0..h {
            let off = head * dh;
            let mut m = vec![vec![0.0; dh]; dh];
            for i in 0..dh {
                for j in 0..dh {
                    let mut a = 0.0;
                    for t in 0..n {
                        a += k[t][off + i] * v[t][off + j];
                    }
                    a = (a / (n as f64).sqrt()).clamp(-w.delta, w.delta);
                    let prev = m0.map_or(0.0, |m0| {
                        let src = if m0.len() == 1 { &m0[0] } else { &m0[b] };
                        src[head][i][j]
                    });
                    m[i][j] = w.lambda * prev + w.eta * a;
                }
            }
            let norm = m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            for row in &mut m {
                for v in row.iter_mut() {
                    *v /= norm + w.eps;
                }
            }
            for t in 0..n {
                for j in 0..dh {
                    retrieved[t][off + j] = (0..dh).map(|i| q[t][off + i] * m[i][j]).sum();
                }
            }
            mem_b.push(m);
        }
        let mut rows = Vec::new();
        for t in 0..n {
            let gate = project(&tokens[t], &w.w_g);
            let z: Vec<f64> = (0..d).map(|c| sigmoid(gate[c]) * retrieved[t][c]).collect();
            let mean = z.iter().sum::<f64>() / d as f64;
            let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + w.ln_eps).sqrt();
            rows.push((0..d).map(|c| (z[c] - mean) * inv * w.gamma[c] + w.beta[c]).collect());
        }
        out.push(rows);
        mem_out.push(mem_b);
    }
    (out, mem_out)
}

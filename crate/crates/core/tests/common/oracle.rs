//! Straight-line reference implementations over nested `Vec`s. Nothing here
//! touches the tape; parameters are read from the store by name.

#![allow(dead_code)]

use umq_core::tensor::{ParamStore, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn from_tensor(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn param(store: &ParamStore, name: &str) -> Mat {
    let id = store.by_name(name).unwrap_or_else(|| panic!("no parameter {name}"));
    from_tensor(store.value(id))
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let inner = b.len();
    let cols = b[0].len();
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), inner);
            (0..cols)
                .map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add_row(a: &Mat, b: &[f64]) -> Mat {
    a.iter()
        .map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn relu(a: &Mat) -> Mat {
    a.iter().map(|r| r.iter().map(|&x| x.max(0.0)).collect()).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn linear(store: &ParamStore, name: &str, x: &Mat) -> Mat {
    let w = param(store, &format!("{name}.w"));
    let b = param(store, &format!("{name}.b"));
    add_row(&matmul(x, &w), &b[0])
}

pub fn mlp(store: &ParamStore, name: &str, x: &Mat) -> Mat {
    let h = relu(&linear(store, &format!("{name}.hidden"), x));
    linear(store, &format!("{name}.out"), &h)
}

pub fn layer_norm(x: &Mat, scale: &[f64], shift: &[f64]) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            let s = (var + 1e-5).sqrt();
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mu) / s * scale[j] + shift[j])
                .collect()
        })
        .collect()
}

/// `raw` holds `seq_len` consecutive rows per sample.
pub fn encode(store: &ParamStore, modality: &str, raw: &Mat, seq_len: usize) -> Mat {
    let p = linear(store, &format!("{modality}.enc.proj"), raw);
    let scale = param(store, &format!("{modality}.enc.ln.scale"));
    let shift = param(store, &format!("{modality}.enc.ln.shift"));
    let ln = layer_norm(&p, &scale[0], &shift[0]);
    ln.chunks(seq_len)
        .map(|g| {
            (0..g[0].len())
                .map(|j| g.iter().map(|r| r[j]).sum::<f64>() / seq_len as f64)
                .collect()
        })
        .collect()
}

pub fn decouple(store: &ParamStore, modality: &str, x: &Mat) -> (Mat, Mat) {
    let h = relu(&linear(store, &format!("{modality}.dec.shared"), x));
    (
        linear(store, &format!("{modality}.dec.head_s"), &h),
        linear(store, &format!("{modality}.dec.head_c"), &h),
    )
}

pub fn couple(store: &ParamStore, modality: &str, xs: &Mat, xc: &Mat) -> Mat {
    let joined: Mat = xs
        .iter()
        .zip(xc)
        .map(|(a, b)| a.iter().chain(b).copied().collect())
        .collect();
    mlp(store, &format!("{modality}.dec.couple"), &joined)
}

pub fn estimate(store: &ParamStore, modality: &str, x: &Mat) -> Vec<f64> {
    mlp(store, &format!("{modality}.est"), x)
        .iter()
        .map(|r| sigmoid(r[0]))
        .collect()
}

/// Query attention over `tokens` (each `n × d`), concatenation with `x`,
/// then the enhancer MLP. Returns the output and the attention weights.
pub fn enhance(store: &ParamStore, modality: &str, x: &Mat, tokens: &[Mat]) -> (Mat, Mat) {
    let q = param(store, &format!("{modality}.eh.q"))[0].clone();
    let k = param(store, &format!("{modality}.eh.k"));
    let v = param(store, &format!("{modality}.eh.v"));
    let d = q.len() as f64;
    let keys: Vec<Mat> = tokens.iter().map(|t| matmul(t, &k)).collect();
    let vals: Vec<Mat> = tokens.iter().map(|t| matmul(t, &v)).collect();
    let mut out = Vec::new();
    let mut weights = Vec::new();
    for i in 0..x.len() {
        let s: Vec<f64> = keys
            .iter()
            .map(|kt| kt[i].iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
            .collect();
        let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|z| (z - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let w: Vec<f64> = e.iter().map(|v| v / z).collect();
        let mut attn = vec![0.0; q.len()];
        for (t, vt) in vals.iter().enumerate() {
            for j in 0..q.len() {
                attn[j] += w[t] * vt[i][j];
            }
        }
        attn.extend_from_slice(&x[i]);
        out.push(attn);
        weights.push(w);
    }
    (mlp(store, &format!("{modality}.eh.mlp"), &out), weights)
}

/// Top-k by descending value, ascending index on ties.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn moe(store: &ParamStore, x: &Mat, k: usize) -> Mat {
    let w = param(store, "moe.gate");
    let d = x[0].len() as f64;
    let logits: Mat = matmul(x, &transpose(&w))
        .into_iter()
        .map(|r| r.into_iter().map(|v| v / d.sqrt()).collect())
        .collect();
    let h = w.len();
    let experts: Vec<Mat> = (0..h).map(|j| mlp(store, &format!("moe.expert{j}"), x)).collect();
    logits
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let sel = top_k(row, k);
            let mx = sel.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = sel.iter().map(|&j| (row[j] - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut out = vec![0.0; x[0].len()];
            for (s, &j) in sel.iter().enumerate() {
                for c in 0..out.len() {
                    out[c] += e[s] / z * experts[j][i][c];
                }
            }
            out
        })
        .collect()
}

/// Evaluation-mode forward of the full model with every component enabled.
/// `baselines[m]` is the stored `x_b` of modality `m`.
pub fn forward(
    store: &ParamStore,
    modalities: &[(String, usize)],
    raws: &[Mat],
    baselines: &[Vec<f64>],
    k: usize,
) -> Vec<f64> {
    let nm = modalities.len();
    let xs: Vec<Mat> = modalities
        .iter()
        .zip(raws)
        .map(|((name, t), raw)| encode(store, name, raw, *t))
        .collect();
    let n = xs[0].len();
    let alphas: Vec<Vec<f64>> = modalities
        .iter()
        .zip(&xs)
        .map(|((name, _), x)| estimate(store, name, x))
        .collect();
    let scaled: Vec<Mat> = modalities
        .iter()
        .enumerate()
        .map(|(m, (name, _))| {
            let (s, _) = decouple(store, name, &xs[m]);
            s.iter()
                .zip(&alphas[m])
                .map(|(r, a)| r.iter().map(|v| v * a).collect())
                .collect()
        })
        .collect();
    let enhanced: Vec<Mat> = (0..nm)
        .map(|m| {
            let mut tokens: Vec<Mat> = (0..nm).filter(|&o| o != m).map(|o| scaled[o].clone()).collect();
            tokens.push(vec![baselines[m].clone(); n]);
            enhance(store, &modalities[m].0, &xs[m], &tokens).0
        })
        .collect();
    let joined: Mat = (0..n)
        .map(|i| enhanced.iter().flat_map(|e| e[i].iter().copied()).collect())
        .collect();
    let fused = mlp(store, "fusion", &joined);
    let mixed = moe(store, &fused, k);
    mlp(store, "predictor", &mixed).iter().map(|r| r[0]).collect()
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

//! Multi-head (masked) self/cross attention and sinusoidal position tables.
//!
//! Sequences are stored token-major: a sequence of `l` tokens of width `d`
//! is a `[l, d]` tensor (`[batch, l, d]` on the tape). The attention score
//! matrix of one head is therefore held as `[l_x, l_z]`, the transpose of
//! the `l_z × l_x` layout in which [`AttentionMask`] is expressed.

use std::rc::Rc;

use crate::error::{contract, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::scalar::{lit, Real};
use crate::tensor::Tensor;

/// Which context positions each query position may attend to.
///
/// `allowed[j * l_x + k]` is true when context position `j` is visible from
/// query position `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub l_z: usize,
    pub l_x: usize,
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn allows(&self, context: usize, query: usize) -> bool {
        self.allowed[context * self.l_x + query]
    }

    /// Pattern in score layout `[l_x, l_z]`.
    fn score_pattern(&self) -> Rc<[bool]> {
        let mut p = Vec::with_capacity(self.l_x * self.l_z);
        for k in 0..self.l_x {
            for j in 0..self.l_z {
                p.push(self.allows(j, k));
            }
        }
        p.into()
    }
}

/// Query `k` may see context positions `0..=k`.
pub fn causal_mask(l: usize) -> Result<AttentionMask> {
    if l == 0 {
        return contract("causal mask length must be >= 1");
    }
    let allowed = (0..l).flat_map(|j| (0..l).map(move |k| j <= k)).collect();
    Ok(AttentionMask {
        l_z: l,
        l_x: l,
        allowed,
    })
}

/// Head geometry shared by the handle and concrete parameter forms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MhaDims {
    pub heads: usize,
    pub d_attn: usize,
    pub d_mid: usize,
    pub d_x: usize,
    pub d_z: usize,
    pub d_out: usize,
}

/// Attention projections on a parameter store. No bias terms.
#[derive(Clone, Debug)]
pub struct Mha {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub dims: MhaDims,
}

impl Mha {
    pub fn new<T: Real>(init: &mut Initializer<'_, T>, name: &str, dims: MhaDims) -> Self {
        let MhaDims {
            heads,
            d_attn,
            d_mid,
            d_x,
            d_z,
            d_out,
        } = dims;
        Self {
            w_q: init.glorot(format!("{name}.w_q"), heads * d_attn, d_x),
            w_k: init.glorot(format!("{name}.w_k"), heads * d_attn, d_z),
            w_v: init.glorot(format!("{name}.w_v"), heads * d_mid, d_z),
            w_o: init.glorot(format!("{name}.w_o"), d_out, heads * d_mid),
            dims,
        }
    }

    /// `x`: `[batch, l_x, d_x]`, `z`: `[batch, l_z, d_z]` → `[batch, l_x, d_out]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        z: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let w = [
            g.param(store, self.w_q),
            g.param(store, self.w_k),
            g.param(store, self.w_v),
            g.param(store, self.w_o),
        ];
        attend(g, x, z, mask, w, self.dims)
    }

    pub fn num_params(&self) -> usize {
        let d = self.dims;
        d.heads * d.d_attn * (d.d_x + d.d_z) + d.heads * d.d_mid * (d.d_z + d.d_out)
    }
}

/// Concrete attention weights: `W_q` `(H·d_attn × d_x)`, `W_k`
/// `(H·d_attn × d_z)`, `W_v` `(H·d_mid × d_z)`, `W_o` `(d_out × H·d_mid)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MhaParams<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub heads: usize,
    pub d_attn: usize,
    pub d_mid: usize,
}

impl<T: Real> MhaParams<T> {
    pub fn dims(&self) -> Result<MhaDims> {
        let (h, da, dm) = (self.heads, self.d_attn, self.d_mid);
        let sq = self.w_q.shape();
        let sk = self.w_k.shape();
        let sv = self.w_v.shape();
        let so = self.w_o.shape();
        let ok = h > 0
            && sq.len() == 2
            && sk.len() == 2
            && sv.len() == 2
            && so.len() == 2
            && sq[0] == h * da
            && sk[0] == h * da
            && sv[0] == h * dm
            && so[1] == h * dm
            && sk[1] == sv[1];
        if !ok {
            return shape_err(
                "MhaParams",
                format!("H={h} d_attn={da} d_mid={dm}: W_q {sq:?} W_k {sk:?} W_v {sv:?} W_o {so:?}"),
            );
        }
        Ok(MhaDims {
            heads: h,
            d_attn: da,
            d_mid: dm,
            d_x: sq[1],
            d_z: sk[1],
            d_out: so[0],
        })
    }
}

/// One-shot multi-head attention on `[l_x, d_x]` / `[l_z, d_z]` sequences.
pub fn multi_head_attention<T: Real>(
    x: &Tensor<T>,
    z: &Tensor<T>,
    mask: Option<&AttentionMask>,
    p: &MhaParams<T>,
) -> Result<Tensor<T>> {
    let dims = p.dims()?;
    if x.ndim() != 2 || z.ndim() != 2 {
        return shape_err("multi_head_attention", "x and z must be [length, dim]");
    }
    let mut g = Graph::new();
    let xv = g.constant(x.reshape(&[1, x.shape()[0], x.shape()[1]])?);
    let zv = g.constant(z.reshape(&[1, z.shape()[0], z.shape()[1]])?);
    let w = [
        g.constant(p.w_q.clone()),
        g.constant(p.w_k.clone()),
        g.constant(p.w_v.clone()),
        g.constant(p.w_o.clone()),
    ];
    let y = attend(&mut g, xv, zv, mask, w, dims)?;
    let out = g.value(y);
    out.reshape(&out.shape()[1..])
}

fn attend<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    z: Var,
    mask: Option<&AttentionMask>,
    [w_q, w_k, w_v, w_o]: [Var; 4],
    d: MhaDims,
) -> Result<Var> {
    let sx = g.shape(x).to_vec();
    let sz = g.shape(z).to_vec();
    if sx.len() != 3 || sz.len() != 3 || sx[0] != sz[0] || sx[2] != d.d_x || sz[2] != d.d_z {
        return shape_err("multi_head_attention", format!("x {sx:?}, z {sz:?}, dims {d:?}"));
    }
    let (b, lx, lz, h) = (sx[0], sx[1], sz[1], d.heads);
    if let Some(m) = mask {
        if m.l_x != lx || m.l_z != lz {
            return shape_err(
                "multi_head_attention",
                format!("mask {}x{} for l_z={lz}, l_x={lx}", m.l_z, m.l_x),
            );
        }
    }
    let split = |g: &mut Graph<T>, t: Var, l: usize, dh: usize| -> Result<Var> {
        let t = g.reshape(t, &[b, l, h, dh])?;
        let t = g.permute(t, &[0, 2, 1, 3])?;
        g.reshape(t, &[b * h, l, dh])
    };
    let q = g.matmul(x, w_q, false, true)?;
    let q = split(g, q, lx, d.d_attn)?;
    let k = g.matmul(z, w_k, false, true)?;
    let k = split(g, k, lz, d.d_attn)?;
    let v = g.matmul(z, w_v, false, true)?;
    let v = split(g, v, lz, d.d_mid)?;

    let s = g.matmul(q, k, false, true)?;
    let s = g.scale(s, T::one() / lit::<T>(d.d_attn as f64).sqrt())?;
    let s = match mask {
        Some(m) => g.masked_fill(s, m.score_pattern())?,
        None => s,
    };
    let a = g.softmax(s)?;
    let heads = g.matmul(a, v, false, false)?;
    let heads = g.reshape(heads, &[b, h, lx, d.d_mid])?;
    let heads = g.permute(heads, &[0, 2, 1, 3])?;
    let heads = g.reshape(heads, &[b, lx, h * d.d_mid])?;
    g.matmul(heads, w_o, false, true)
}

/// Sinusoidal position table, one row per position.
#[derive(Clone, Debug, PartialEq)]
pub struct PosEncoding<T> {
    pub table: Tensor<T>,
    pub reversed: bool,
}

impl<T: Real> PosEncoding<T> {
    pub fn seq_len(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn row(&self, j: usize) -> &[T] {
        self.table.row(j)
    }

    /// Same table with the position order flipped.
    pub fn flipped(&self) -> Self {
        let l = self.seq_len();
        let d = self.table.last_dim();
        let mut data = Vec::with_capacity(l * d);
        for j in (0..l).rev() {
            data.extend_from_slice(self.table.row(j));
        }
        Self {
            table: Tensor::new(&[l, d], data).expect("same size"),
            reversed: !self.reversed,
        }
    }
}

/// `PE(j, 2i) = sin(j / 10000^(2i/d))`, `PE(j, 2i+1) = cos(j / 10000^(2i/d))`
/// for `i` in `0..d/2`.
pub fn positional_encoding<T: Real>(seq_len: usize, d_model: usize) -> Result<PosEncoding<T>> {
    if d_model == 0 || d_model % 2 != 0 {
        return contract(format!("positional encoding needs an even d_model, got {d_model}"));
    }
    if seq_len == 0 {
        return contract("positional encoding needs seq_len >= 1");
    }
    let mut data = Vec::with_capacity(seq_len * d_model);
    for j in 0..seq_len {
        for i in 0..d_model / 2 {
            let angle = j as f64 / 10000f64.powf((2 * i) as f64 / d_model as f64);
            data.push(T::from_f64_lossy(angle.sin()));
            data.push(T::from_f64_lossy(angle.cos()));
        }
    }
    Ok(PosEncoding {
        table: Tensor::new(&[seq_len, d_model], data)?,
        reversed: false,
    })
}

/// The standard table with rows reversed: row `j` is PE row `seq_len − 1 − j`,
/// so the last position always carries PE row 0.
pub fn reverse_positional_encoding<T: Real>(seq_len: usize, d_model: usize) -> Result<PosEncoding<T>> {
    Ok(positional_encoding(seq_len, d_model)?.flipped())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn rand_params(rng: &mut ChaCha8Rng, h: usize, da: usize, dm: usize, dx: usize, dz: usize, dout: usize) -> MhaParams<f64> {
        MhaParams {
            w_q: rand_t(rng, &[h * da, dx]),
            w_k: rand_t(rng, &[h * da, dz]),
            w_v: rand_t(rng, &[h * dm, dz]),
            w_o: rand_t(rng, &[dout, h * dm]),
            heads: h,
            d_attn: da,
            d_mid: dm,
        }
    }

    /// Per-head loop over the feature-major matrices (columns are tokens).
    fn naive_mha(x: &Tensor<f64>, z: &Tensor<f64>, mask: Option<&AttentionMask>, p: &MhaParams<f64>) -> Tensor<f64> {
        let xc = x.t().unwrap(); // d_x × l_x
        let zc = z.t().unwrap();
        let q = p.w_q.matmul(&xc).unwrap();
        let k = p.w_k.matmul(&zc).unwrap();
        let v = p.w_v.matmul(&zc).unwrap();
        let (lx, lz) = (xc.shape()[1], zc.shape()[1]);
        let mut vt = Tensor::zeros(&[p.heads * p.d_mid, lx]);
        for h in 0..p.heads {
            for kq in 0..lx {
                let mut s = vec![0.0; lz];
                for (j, sj) in s.iter_mut().enumerate() {
                    for a in 0..p.d_attn {
                        *sj += k.get(&[h * p.d_attn + a, j]) * q.get(&[h * p.d_attn + a, kq]);
                    }
                    *sj /= (p.d_attn as f64).sqrt();
                    if let Some(m) = mask {
                        if !m.allows(j, kq) {
                            *sj = f64::NEG_INFINITY;
                        }
                    }
                }
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
                let tot: f64 = e.iter().sum();
                for m in 0..p.d_mid {
                    let mut acc = 0.0;
                    for j in 0..lz {
                        acc += v.get(&[h * p.d_mid + m, j]) * e[j] / tot;
                    }
                    vt.set(&[h * p.d_mid + m, kq], acc);
                }
            }
        }
        p.w_o.matmul(&vt).unwrap().t().unwrap()
    }

    #[test]
    fn single_token_unit_weights_is_identity() {
        let one = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        let p = MhaParams {
            w_q: one.clone(),
            w_k: one.clone(),
            w_v: one.clone(),
            w_o: one,
            heads: 1,
            d_attn: 1,
            d_mid: 1,
        };
        let x = Tensor::new(&[1, 1], vec![0.731]).unwrap();
        let y = multi_head_attention(&x, &x, None, &p).unwrap();
        assert_eq!(y.data(), &[0.731]);
    }

    #[test]
    fn identical_context_columns_give_common_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = rand_params(&mut rng, 2, 3, 2, 4, 3, 4);
        let col = [0.2, -0.5, 0.9];
        let z = Tensor::from_rows(&[col.to_vec(), col.to_vec()]).unwrap();
        let single = Tensor::from_rows(&[col.to_vec()]).unwrap();
        let x = rand_t(&mut rng, &[3, 4]);
        let y = multi_head_attention(&x, &z, None, &p).unwrap();
        let y1 = multi_head_attention(&x, &single, None, &p).unwrap();
        assert!(y.max_abs_diff(&y1) < 1e-12);
        // every query gets the same output
        for r in 1..3 {
            for c in 0..4 {
                assert!((y.get(&[r, c]) - y.get(&[0, c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_naive_per_head_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = rand_params(&mut rng, 2, 3, 4, 5, 6, 3);
        let x = rand_t(&mut rng, &[3, 5]);
        let z = rand_t(&mut rng, &[4, 6]);
        let y = multi_head_attention(&x, &z, None, &p).unwrap();
        assert!(y.max_abs_diff(&naive_mha(&x, &z, None, &p)) < 1e-12);

        let xs = rand_t(&mut rng, &[3, 6]);
        let m = causal_mask(3).unwrap();
        let p2 = rand_params(&mut rng, 2, 3, 4, 6, 6, 6);
        let y = multi_head_attention(&xs, &xs, Some(&m), &p2).unwrap();
        assert!(y.max_abs_diff(&naive_mha(&xs, &xs, Some(&m), &p2)) < 1e-12);
    }

    #[test]
    fn causal_mask_shape() {
        assert_eq!(causal_mask(1).unwrap().allowed, vec![true]);
        let m = causal_mask(3).unwrap();
        for k in 0..3 {
            let col = (0..3).filter(|&j| m.allows(j, k)).count();
            assert_eq!(col, k + 1);
            for j in 0..3 {
                assert_eq!(m.allows(j, k), j <= k);
            }
        }
        assert!(causal_mask(0).is_err());
    }

    #[test]
    fn causal_self_attention_ignores_the_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for l in 1..=6 {
            let p = rand_params(&mut rng, 2, 2, 3, 4, 4, 4);
            let m = causal_mask(l).unwrap();
            let x = rand_t(&mut rng, &[l, 4]);
            let base = multi_head_attention(&x, &x, Some(&m), &p).unwrap();
            for k in 0..l {
                let mut xp = x.clone();
                for j in k + 1..l {
                    for c in 0..4 {
                        xp.set(&[j, c], rng.random_range(-5.0..5.0));
                    }
                }
                let y = multi_head_attention(&xp, &xp, Some(&m), &p).unwrap();
                for r in 0..=k {
                    assert_eq!(base.row(r), y.row(r), "l={l} k={k} r={r}");
                }
            }
        }
    }

    #[test]
    fn head_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (h, da, dm) = (3, 2, 2);
        let p = rand_params(&mut rng, h, da, dm, 4, 4, 5);
        let perm = [2, 0, 1];
        let permute_rows = |w: &Tensor<f64>, blk: usize| {
            let cols = w.shape()[1];
            let mut out = Vec::new();
            for &hh in &perm {
                out.extend_from_slice(&w.data()[hh * blk * cols..(hh + 1) * blk * cols]);
            }
            Tensor::new(w.shape(), out).unwrap()
        };
        let wo_t = p.w_o.t().unwrap();
        let pp = MhaParams {
            w_q: permute_rows(&p.w_q, da),
            w_k: permute_rows(&p.w_k, da),
            w_v: permute_rows(&p.w_v, dm),
            w_o: permute_rows(&wo_t, dm).t().unwrap(),
            ..p.clone()
        };
        let x = rand_t(&mut rng, &[4, 4]);
        let y = multi_head_attention(&x, &x, None, &p).unwrap();
        let yp = multi_head_attention(&x, &x, None, &pp).unwrap();
        assert!(y.max_abs_diff(&yp) < 1e-6);
    }

    #[test]
    fn constant_scores_give_uniform_weights() {
        // zero query weights make every score equal: output is the mean value
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = rand_params(&mut rng, 1, 2, 2, 3, 3, 2);
        p.w_q = Tensor::zeros(&[2, 3]);
        p.w_o = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let z = rand_t(&mut rng, &[5, 3]);
        let x = rand_t(&mut rng, &[2, 3]);
        let y = multi_head_attention(&x, &z, None, &p).unwrap();
        let v = p.w_v.matmul(&z.t().unwrap()).unwrap();
        for m in 0..2 {
            let mean: f64 = (0..5).map(|j| v.get(&[m, j])).sum::<f64>() / 5.0;
            assert!((y.get(&[0, m]) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn pe_values() {
        let pe = positional_encoding::<f64>(12, 64).unwrap();
        for (i, &v) in pe.row(0).iter().enumerate() {
            assert_eq!(v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!((pe.table.get(&[1, 0]) - 0.841_470_984_807_896_5).abs() < 1e-15);
        let expected = (10.0f64 / 10000f64.powf(62.0 / 64.0)).sin();
        assert_eq!(pe.table.get(&[10, 62]), expected);
        assert!(pe.table.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(positional_encoding::<f64>(4, 7).is_err());
    }

    #[test]
    fn rpe_reverses_pe() {
        let pe1 = positional_encoding::<f32>(1, 8).unwrap();
        assert_eq!(reverse_positional_encoding::<f32>(1, 8).unwrap().table, pe1.table);
        let pe = positional_encoding::<f32>(4, 8).unwrap();
        let rpe = reverse_positional_encoding::<f32>(4, 8).unwrap();
        assert!(rpe.reversed);
        assert_eq!(rpe.row(0), pe.row(3));
        assert_eq!(rpe.row(3), pe.row(0));
        for l in 1..20 {
            let pe = positional_encoding::<f32>(l, 8).unwrap();
            assert_eq!(pe.flipped().flipped(), pe);
        }
    }

    #[test]
    fn rpe_last_row_is_length_independent() {
        let rows: Vec<Vec<f64>> = [8, 14, 16]
            .iter()
            .map(|&l| reverse_positional_encoding::<f64>(l, 64).unwrap().row(l - 1).to_vec())
            .collect();
        assert_eq!(rows[0], rows[1]);
        assert_eq!(rows[1], rows[2]);
    }
}

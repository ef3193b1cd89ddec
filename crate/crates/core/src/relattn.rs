//! Multi-head self-attention over a flattened 2-D grid, with optional
//! relative position logits.
//!
//! For a grid of `H × W` positions flattened to `X[H·W, F_in]`, one head is
//!
//! ```text
//! O_h = softmax((Q Kᵀ + S_H + S_W) / √d_k) V,   Q = X W_q, K = X W_k, V = X W_v
//! S_W[i, j] = q_i · r_W[j_x − i_x + W − 1]
//! S_H[i, j] = q_i · r_H[j_y − i_y + H − 1]
//! ```
//!
//! and heads are concatenated along features and projected by `W_O`.
//! Without the relative terms the layer is permutation-equivariant over
//! rows; the relative tables break that on purpose.
//!
//! Position `i` of a grid maps to `(i_x, i_y) = (i mod W, i div W)`.

use crate::autograd::{Graph, Result, Tensor, TensorError, Var};

/// Per-head projections `W_q`, `W_k`, `W_v`, each `[F_in, d_k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProjections<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
}

/// All heads plus the output projection `W_O[N_h·d_k, F_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub heads: Vec<HeadProjections<T>>,
    pub w_o: T,
}

/// Relative position embeddings of one head: `r_w[2W−1, d_k]` indexed by
/// `j_x − i_x + W − 1`, `r_h[2H−1, d_k]` indexed by `j_y − i_y + H − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelPosTables<T> {
    pub r_w: T,
    pub r_h: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridDims {
    pub height: usize,
    pub width: usize,
}

impl GridDims {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(i_x, i_y)` of flat position `i`.
    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i % self.width, i / self.width)
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }
}

/// An image flattened row-major to `[H·W, F_in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatGrid {
    pub x: Tensor,
    pub dims: GridDims,
}

pub fn flatten_image(img: &Tensor) -> Result<FlatGrid> {
    match *img.shape() {
        [h, w, f] => Ok(FlatGrid {
            x: img.clone().reshaped(&[h * w, f])?,
            dims: GridDims { height: h, width: w },
        }),
        _ => Err(TensorError::DimMismatch(format!("expected [H, W, F], got {:?}", img.shape()))),
    }
}

impl<T> HeadProjections<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> HeadProjections<U> {
        HeadProjections { w_q: f(&self.w_q), w_k: f(&self.w_k), w_v: f(&self.w_v) }
    }
}

impl<T> AttentionParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> AttentionParams<U> {
        AttentionParams { heads: self.heads.iter().map(|h| h.map(&mut f)).collect(), w_o: f(&self.w_o) }
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }
}

impl<T> RelPosTables<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> RelPosTables<U> {
        RelPosTables { r_w: f(&self.r_w), r_h: f(&self.r_h) }
    }
}

impl AttentionParams<Tensor> {
    /// Shape check: every head `[F_in, d_k]` with a common `F_in`, `d_k`,
    /// and `W_O` with `N_h·d_k` rows. Returns `(F_in, d_k, F_out)`.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let first = self.heads.first().ok_or(TensorError::EmptyInput("attention heads"))?;
        let (f_in, d_k) = first.w_q.dims2();
        for h in &self.heads {
            for w in [&h.w_q, &h.w_k, &h.w_v] {
                if w.rank() != 2 || w.dims2() != (f_in, d_k) {
                    return Err(TensorError::ShapeMismatch {
                        op: "attention params",
                        detail: format!("projection {:?}, expected [{f_in}, {d_k}]", w.shape()),
                    });
                }
            }
        }
        let (rows, f_out) = self.w_o.dims2();
        if rows != self.heads.len() * d_k {
            return Err(TensorError::ShapeMismatch {
                op: "attention params",
                detail: format!("W_O has {rows} rows, expected {}", self.heads.len() * d_k),
            });
        }
        Ok((f_in, d_k, f_out))
    }

    pub fn constants(&self, g: &mut Graph) -> AttentionParams<Var> {
        self.map(|t| g.constant(t.clone()))
    }
}

fn bind_tables(g: &mut Graph, tables: &[RelPosTables<Tensor>]) -> Vec<RelPosTables<Var>> {
    tables.iter().map(|t| t.map(|x| g.constant(x.clone()))).collect()
}

/// Column index maps for the two relative terms: entry `i·n + j` is the
/// table row for the pair `(i, j)`.
pub fn offset_indices(dims: GridDims) -> (Vec<usize>, Vec<usize>) {
    let n = dims.len();
    let mut ix = Vec::with_capacity(n * n);
    let mut iy = Vec::with_capacity(n * n);
    for i in 0..n {
        let (xi, yi) = dims.coords(i);
        for j in 0..n {
            let (xj, yj) = dims.coords(j);
            ix.push(xj + dims.width - 1 - xi);
            iy.push(yj + dims.height - 1 - yi);
        }
    }
    (ix, iy)
}

fn check_tables(g: &Graph, dims: GridDims, t: &RelPosTables<Var>, d_k: usize) -> Result<()> {
    let (rw, rh) = (g.value(t.r_w).dims2(), g.value(t.r_h).dims2());
    if rw != (2 * dims.width - 1, d_k) || rh != (2 * dims.height - 1, d_k) {
        return Err(TensorError::DimMismatch(format!(
            "tables r_w {rw:?} r_h {rh:?} for a {}x{} grid with d_k={d_k}",
            dims.height, dims.width
        )));
    }
    Ok(())
}

/// Unscaled logits `Q Kᵀ (+ S_H + S_W)` and the values `V` of one head.
fn head_logits(
    g: &mut Graph,
    x: Var,
    head: &HeadProjections<Var>,
    rel: Option<(GridDims, &RelPosTables<Var>)>,
) -> Result<(Var, Var, usize)> {
    let q = g.matmul(x, head.w_q)?;
    let k = g.matmul(x, head.w_k)?;
    let v = g.matmul(x, head.w_v)?;
    let (n, d_k) = g.value(q).dims2();
    let kt = g.transpose(k)?;
    let mut logits = g.matmul(q, kt)?;
    if let Some((dims, tables)) = rel {
        if dims.len() != n {
            return Err(TensorError::DimMismatch(format!("{n} rows for a {}x{} grid", dims.height, dims.width)));
        }
        check_tables(g, dims, tables, d_k)?;
        let (ix, iy) = offset_indices(dims);
        let rwt = g.transpose(tables.r_w)?;
        let q_rw = g.matmul(q, rwt)?;
        let s_w = g.gather_cols(q_rw, &ix, n)?;
        let rht = g.transpose(tables.r_h)?;
        let q_rh = g.matmul(q, rht)?;
        let s_h = g.gather_cols(q_rh, &iy, n)?;
        logits = g.add(logits, s_h)?;
        logits = g.add(logits, s_w)?;
    }
    Ok((logits, v, d_k))
}

/// Attention weights `softmax(logits / √d_k)` and output of one head.
fn head_forward(
    g: &mut Graph,
    x: Var,
    head: &HeadProjections<Var>,
    rel: Option<(GridDims, &RelPosTables<Var>)>,
) -> Result<(Var, Var)> {
    let (logits, v, d_k) = head_logits(g, x, head, rel)?;
    let scaled = g.scale(logits, 1.0 / (d_k as f64).sqrt());
    let weights = g.softmax_rows(scaled)?;
    let out = g.matmul(weights, v)?;
    Ok((weights, out))
}

pub fn attention_head_in(g: &mut Graph, x: Var, head: &HeadProjections<Var>) -> Result<Var> {
    Ok(head_forward(g, x, head, None)?.1)
}

fn combine(g: &mut Graph, outs: &[Var], w_o: Var) -> Result<Var> {
    let cat = g.concat(outs)?;
    g.matmul(cat, w_o)
}

/// Plain multi-head attention on graph variables.
pub fn mha_in(g: &mut Graph, x: Var, params: &AttentionParams<Var>) -> Result<Var> {
    let outs = params
        .heads
        .iter()
        .map(|h| attention_head_in(g, x, h))
        .collect::<Result<Vec<_>>>()?;
    combine(g, &outs, params.w_o)
}

/// Relative-position multi-head attention on graph variables. One table
/// pair per head.
pub fn rel_mha_in(
    g: &mut Graph,
    x: Var,
    dims: GridDims,
    params: &AttentionParams<Var>,
    tables: &[RelPosTables<Var>],
) -> Result<Var> {
    Ok(rel_mha_parts(g, x, dims, params, tables)?.0)
}

fn rel_mha_parts(
    g: &mut Graph,
    x: Var,
    dims: GridDims,
    params: &AttentionParams<Var>,
    tables: &[RelPosTables<Var>],
) -> Result<(Var, Vec<Var>)> {
    if tables.len() != params.heads.len() {
        return Err(TensorError::DimMismatch(format!(
            "{} table pairs for {} heads",
            tables.len(),
            params.heads.len()
        )));
    }
    let mut outs = Vec::new();
    let mut weights = Vec::new();
    for (h, t) in params.heads.iter().zip(tables) {
        let (w, o) = head_forward(g, x, h, Some((dims, t)))?;
        weights.push(w);
        outs.push(o);
    }
    Ok((combine(g, &outs, params.w_o)?, weights))
}

/// Residual relative-attention block over a title treated as a `1 × L`
/// grid: `x + rel_mha(x)`. Requires `F_out == F_in`.
pub fn title_attention_encoder_in(
    g: &mut Graph,
    title: Var,
    params: &AttentionParams<Var>,
    tables: &[RelPosTables<Var>],
) -> Result<Var> {
    let len = g.value(title).dims2().0;
    let dims = GridDims { height: 1, width: len };
    let att = rel_mha_in(g, title, dims, params, tables)?;
    g.add(title, att)
}

// ---- tensor-level entry points ----

/// One attention head: `softmax((XW_q)(XW_k)ᵀ / √d_k)(XW_v)`.
pub fn attention_head(x: &Tensor, head: &HeadProjections<Tensor>) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let h = head.map(|t| g.constant(t.clone()));
    let out = attention_head_in(&mut g, xv, &h)?;
    Ok(g.value(out).clone())
}

pub fn mha(x: &Tensor, params: &AttentionParams<Tensor>) -> Result<Tensor> {
    params.dims()?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let p = params.constants(&mut g);
    let out = mha_in(&mut g, xv, &p)?;
    Ok(g.value(out).clone())
}

/// Relative logits of one head, scaled: `L[i,j] = q_i·(k_j + r_W + r_H) / √d_k`.
pub fn rel_logits(grid: &FlatGrid, head: &HeadProjections<Tensor>, tables: &RelPosTables<Tensor>) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(grid.x.clone());
    let h = head.map(|t| g.constant(t.clone()));
    let t = tables.map(|t| g.constant(t.clone()));
    let (logits, _, d_k) = head_logits(&mut g, xv, &h, Some((grid.dims, &t)))?;
    let scaled = g.scale(logits, 1.0 / (d_k as f64).sqrt());
    Ok(g.value(scaled).clone())
}

pub fn rel_mha(grid: &FlatGrid, params: &AttentionParams<Tensor>, tables: &[RelPosTables<Tensor>]) -> Result<Tensor> {
    Ok(rel_mha_with_weights(grid, params, tables)?.0)
}

/// [`rel_mha`] output together with each head's attention matrix.
pub fn rel_mha_with_weights(
    grid: &FlatGrid,
    params: &AttentionParams<Tensor>,
    tables: &[RelPosTables<Tensor>],
) -> Result<(Tensor, Vec<Tensor>)> {
    params.dims()?;
    let mut g = Graph::new();
    let xv = g.constant(grid.x.clone());
    let p = params.constants(&mut g);
    let t = bind_tables(&mut g, tables);
    let (out, weights) = rel_mha_parts(&mut g, xv, grid.dims, &p, &t)?;
    let weights = weights.into_iter().map(|w| g.value(w).clone()).collect();
    Ok((g.value(out).clone(), weights))
}

pub fn title_attention_encoder(
    title: &Tensor,
    params: &AttentionParams<Tensor>,
    tables: &[RelPosTables<Tensor>],
) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(title.clone());
    let p = params.constants(&mut g);
    let t = bind_tables(&mut g, tables);
    let out = title_attention_encoder_in(&mut g, xv, &p, &t)?;
    Ok(g.value(out).clone())
}

/// Random parameters for tests and checks: entries uniform in `[-scale, scale]`.
pub fn random_params(
    n_heads: usize,
    f_in: usize,
    d_k: usize,
    f_out: usize,
    scale: f64,
    rng: &mut impl rand::Rng,
) -> AttentionParams<Tensor> {
    let mut u = |shape: &[usize]| Tensor::uniform(shape, -scale, scale, rng);
    AttentionParams {
        heads: (0..n_heads)
            .map(|_| HeadProjections { w_q: u(&[f_in, d_k]), w_k: u(&[f_in, d_k]), w_v: u(&[f_in, d_k]) })
            .collect(),
        w_o: u(&[n_heads * d_k, f_out]),
    }
}

pub fn random_tables(n_heads: usize, dims: GridDims, d_k: usize, scale: f64, rng: &mut impl rand::Rng) -> Vec<RelPosTables<Tensor>> {
    (0..n_heads)
        .map(|_| RelPosTables {
            r_w: Tensor::uniform(&[2 * dims.width - 1, d_k], -scale, scale, rng),
            r_h: Tensor::uniform(&[2 * dims.height - 1, d_k], -scale, scale, rng),
        })
        .collect()
}

pub fn zero_tables(n_heads: usize, dims: GridDims, d_k: usize) -> Vec<RelPosTables<Tensor>> {
    (0..n_heads)
        .map(|_| RelPosTables {
            r_w: Tensor::zeros(&[2 * dims.width - 1, d_k]),
            r_h: Tensor::zeros(&[2 * dims.height - 1, d_k]),
        })
        .collect()
}

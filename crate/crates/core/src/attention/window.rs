//! Window partitioning, window summaries, window similarity and top-k
//! selection.

use crate::error::{dim_err, param_err, Error, Result};
use crate::tensor::{topk_desc, Tensor};

/// Tiling of an `h×w` patch grid into `s×s` windows, ordered row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGrid {
    pub h: usize,
    pub w: usize,
    pub s: usize,
    pub n_h: usize,
    pub n_w: usize,
}

impl WindowGrid {
    pub fn new(h: usize, w: usize, s: usize) -> Result<Self> {
        if s == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            return Err(Error::Partition { h, w, s });
        }
        Ok(Self { h, w, s, n_h: h / s, n_w: w / s })
    }

    /// Total window count `n = h·w / s²`.
    pub fn n(&self) -> usize {
        self.n_h * self.n_w
    }

    pub fn patches_per_window(&self) -> usize {
        self.s * self.s
    }

    /// Flat patch indices (row-major over the full grid) of window `win`,
    /// in row-major order inside the window.
    pub fn window_rows(&self, win: usize) -> Vec<usize> {
        let (wy, wx) = (win / self.n_w, win % self.n_w);
        let mut rows = Vec::with_capacity(self.s * self.s);
        for py in 0..self.s {
            for px in 0..self.s {
                rows.push((wy * self.s + py) * self.w + wx * self.s + px);
            }
        }
        rows
    }

    /// Flat index permutation taking the patch grid to window order.
    pub fn partition_order(&self) -> Vec<usize> {
        (0..self.n()).flat_map(|win| self.window_rows(win)).collect()
    }

    /// Window id that contains flat patch index `patch`.
    pub fn window_of(&self, patch: usize) -> usize {
        let (r, c) = (patch / self.w, patch % self.w);
        (r / self.s) * self.n_w + c / self.s
    }
}

/// A window grid together with the number of fine windows each query
/// window attends to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowContext {
    pub grid: WindowGrid,
    pub top_k: usize,
}

impl WindowContext {
    pub fn new(h: usize, w: usize, s: usize, top_k: usize) -> Result<Self> {
        let grid = WindowGrid::new(h, w, s)?;
        if top_k == 0 || top_k > grid.n() {
            return Err(param_err(format!("top-k {top_k} outside 1..={}", grid.n())));
        }
        Ok(Self { grid, top_k })
    }

    pub fn s(&self) -> usize {
        self.grid.s
    }

    pub fn n(&self) -> usize {
        self.grid.n()
    }

    /// Rows in each query window's augmented key/value set: `T_k·s² + n`.
    pub fn kv_rows(&self) -> usize {
        self.top_k * self.grid.patches_per_window() + self.n()
    }
}

/// Features rearranged to `n × s² × c`.
#[derive(Debug, Clone)]
pub struct WindowedFeatures {
    pub data: Tensor,
    pub grid: WindowGrid,
}

impl WindowedFeatures {
    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    /// `(n·s²) × c` view.
    pub fn flat(&self) -> Result<Tensor> {
        let [n, p, c]: [usize; 3] = self.data.shape().try_into().expect("rank 3");
        self.data.reshape(&[n * p, c])
    }
}

/// One mean vector per window, `n × c`.
#[derive(Debug, Clone)]
pub struct WindowSummary {
    pub data: Tensor,
}

/// Raw window-to-window dot products, `n × n`.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub scores: Tensor,
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.scores.shape()[1];
        &self.scores.data()[i * n..(i + 1) * n]
    }
}

/// Per query window, the ids of its `T_k` most similar windows, best first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopKIndex {
    pub indices: Vec<Vec<usize>>,
}

impl TopKIndex {
    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i]
    }

    pub fn top_k(&self) -> usize {
        self.indices.first().map_or(0, Vec::len)
    }

    /// Rank of `window` in row `i`, if selected.
    pub fn position(&self, i: usize, window: usize) -> Option<usize> {
        self.indices[i].iter().position(|&w| w == window)
    }
}

/// Keys and values seen by one query window: gathered fine rows followed by
/// all window summaries, each `(T_k·s² + n) × c`.
#[derive(Debug, Clone)]
pub struct AugmentedKV {
    pub keys: Tensor,
    pub values: Tensor,
}

fn hwc(f: &Tensor) -> Result<(usize, usize, usize)> {
    match *f.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(dim_err(format!("expected an HxWxC tensor, got {:?}", f.shape()))),
    }
}

/// Rearranges an `h×w×c` map into `n` windows of `s²` patches.
pub fn window_partition(f: &Tensor, s: usize) -> Result<WindowedFeatures> {
    let (h, w, c) = hwc(f)?;
    let grid = WindowGrid::new(h, w, s)?;
    let data = f.reshape(&[h * w, c])?.gather_rows(&grid.partition_order())?.reshape(&[grid.n(), s * s, c])?;
    Ok(WindowedFeatures { data, grid })
}

/// Inverse of [`window_partition`] for an `h×w` target grid.
pub fn window_reverse(windows: &WindowedFeatures, h: usize, w: usize) -> Result<Tensor> {
    let [n, p, c]: [usize; 3] = windows.data.shape().try_into().map_err(|_| dim_err("windows must be rank 3"))?;
    let s = windows.grid.s;
    if p != s * s || !h.is_multiple_of(s) || !w.is_multiple_of(s) || (h / s) * (w / s) != n {
        return Err(dim_err(format!("cannot re-form {n} windows of {p} patches (side {s}) into a {h}x{w} grid")));
    }
    let grid = WindowGrid::new(h, w, s)?;
    let order = grid.partition_order();
    let mut inverse = vec![0; order.len()];
    for (pos, &src) in order.iter().enumerate() {
        inverse[src] = pos;
    }
    windows.flat()?.gather_rows(&inverse)?.reshape(&[h, w, c])
}

pub fn window_average(windows: &WindowedFeatures) -> Result<WindowSummary> {
    Ok(WindowSummary { data: windows.data.mean_axis(1)? })
}

/// `SM = q̄ · k̄ᵀ`, unnormalized.
pub fn window_similarity(qs: &WindowSummary, ks: &WindowSummary) -> Result<SimilarityMatrix> {
    if qs.data.shape()[1] != ks.data.shape()[1] {
        return Err(dim_err(format!(
            "window similarity: summaries {:?} and {:?} differ in channels",
            qs.data.shape(),
            ks.data.shape()
        )));
    }
    Ok(SimilarityMatrix { scores: qs.data.matmul(&ks.data.transpose()?)? })
}

pub fn select_top_k(sm: &SimilarityMatrix, top_k: usize) -> Result<TopKIndex> {
    let n = sm.n();
    if top_k == 0 || top_k > sm.scores.shape()[1] {
        return Err(param_err(format!("top-k {top_k} outside 1..={n}")));
    }
    let indices = (0..n).map(|i| topk_desc(sm.row(i), top_k)).collect::<Result<_>>()?;
    Ok(TopKIndex { indices })
}

/// Patch features of the windows selected for `query_window`, stacked in
/// top-k order: `T_k·s² × c`.
pub fn gather_window_features(windows: &WindowedFeatures, idx: &TopKIndex, query_window: usize) -> Result<Tensor> {
    let n = windows.grid.n();
    let p = windows.grid.patches_per_window();
    let selected = idx
        .indices
        .get(query_window)
        .ok_or_else(|| Error::Contract(format!("query window {query_window} out of {n}")))?;
    if let Some(&bad) = selected.iter().find(|&&j| j >= n) {
        return Err(Error::Contract(format!("top-k entry {bad} out of {n} windows")));
    }
    let rows: Vec<usize> = selected.iter().flat_map(|&j| j * p..(j + 1) * p).collect();
    windows.flat()?.gather_rows(&rows)
}

pub fn build_kv(
    k_w: &WindowedFeatures,
    v_w: &WindowedFeatures,
    ks: &WindowSummary,
    vs: &WindowSummary,
    idx: &TopKIndex,
    query_window: usize,
) -> Result<AugmentedKV> {
    if k_w.grid != v_w.grid {
        return Err(dim_err("key and value windows use different grids"));
    }
    let keys = Tensor::concat(&[gather_window_features(k_w, idx, query_window)?, ks.data.clone()], 0)?;
    let values = Tensor::concat(&[gather_window_features(v_w, idx, query_window)?, vs.data.clone()], 0)?;
    Ok(AugmentedKV { keys, values })
}

//! Plain-loop transcription of top-k window attention, kept deliberately
//! naive and independent of [`Tensor`](crate::Tensor) so it can serve as an
//! oracle for the optimized path.

/// Row-major `c×c` weight plus length-`c` bias.
#[derive(Debug, Clone)]
pub struct Linear<'a> {
    pub weight: &'a [f64],
    pub bias: &'a [f64],
}

/// One attention instance: `x1` queries `x2`, both `h×w×c` row-major.
#[derive(Debug, Clone)]
pub struct Problem<'a> {
    pub x1: &'a [f64],
    pub x2: &'a [f64],
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub q: Linear<'a>,
    pub k: Linear<'a>,
    pub v: Linear<'a>,
    pub s: usize,
    pub top_k: usize,
    pub temperature: f64,
}

fn map(x: &[f64], lin: &Linear, positions: usize, c: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(positions);
    for p in 0..positions {
        let mut row = vec![0.0; c];
        for (o, r) in row.iter_mut().enumerate() {
            let mut acc = lin.bias[o];
            for i in 0..c {
                acc += x[p * c + i] * lin.weight[i * c + o];
            }
            *r = acc;
        }
        out.push(row);
    }
    out
}

// windows[win][patch] = vector, both orders row-major
fn partition(f: &[Vec<f64>], h: usize, w: usize, s: usize) -> Vec<Vec<Vec<f64>>> {
    let mut windows = Vec::new();
    for wr in 0..h / s {
        for wc in 0..w / s {
            let mut win = Vec::new();
            for r in 0..s {
                for cc in 0..s {
                    win.push(f[(wr * s + r) * w + wc * s + cc].clone());
                }
            }
            windows.push(win);
        }
    }
    windows
}

fn average(windows: &[Vec<Vec<f64>>], c: usize) -> Vec<Vec<f64>> {
    windows
        .iter()
        .map(|win| {
            let mut m = vec![0.0; c];
            for patch in win {
                for (a, b) in m.iter_mut().zip(patch) {
                    *a += b;
                }
            }
            m.iter().map(|x| x / win.len() as f64).collect()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Runs the full procedure and returns the `h×w×c` output, row-major.
pub fn window_attention(p: &Problem) -> Vec<f64> {
    let (h, w, c, s) = (p.h, p.w, p.c, p.s);
    // 1: map features onto q, k, v
    let q = map(p.x1, &p.q, h * w, c);
    let k = map(p.x2, &p.k, h * w, c);
    let v = map(p.x2, &p.v, h * w, c);
    // 2: partition into windows
    let qw = partition(&q, h, w, s);
    let kw = partition(&k, h, w, s);
    let vw = partition(&v, h, w, s);
    let n = qw.len();
    // 3: window summaries
    let qs = average(&qw, c);
    let ks = average(&kw, c);
    let vs = average(&vw, c);
    // 4: window similarity
    let sm: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| dot(&qs[i], &ks[j])).collect()).collect();
    // 5: top-k by full sort, descending, ties by ascending index
    let top: Vec<Vec<usize>> = sm
        .iter()
        .map(|row| {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            order.truncate(p.top_k);
            order
        })
        .collect();

    let mut out_windows = Vec::with_capacity(n);
    for i in 0..n {
        // 6-10: fine features of the selected windows, then every summary
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for &j in &top[i] {
            keys.extend(kw[j].iter().cloned());
            values.extend(vw[j].iter().cloned());
        }
        keys.extend(ks.iter().cloned());
        values.extend(vs.iter().cloned());
        // 11: attention per query patch
        let mut win_out = Vec::new();
        for query in &qw[i] {
            let logits: Vec<f64> = keys.iter().map(|key| dot(query, key) / (c as f64).sqrt() / p.temperature).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut o = vec![0.0; c];
            for (wt, val) in e.iter().zip(&values) {
                for (a, b) in o.iter_mut().zip(val) {
                    *a += wt / z * b;
                }
            }
            win_out.push(o);
        }
        out_windows.push(win_out);
    }

    // 12: reverse the partition
    let mut out = vec![0.0; h * w * c];
    let n_w = w / s;
    for (win, patches) in out_windows.iter().enumerate() {
        let (wr, wc) = (win / n_w, win % n_w);
        for (pi, vec) in patches.iter().enumerate() {
            let (r, cc) = (wr * s + pi / s, wc * s + pi % s);
            out[(r * w + cc) * c..(r * w + cc + 1) * c].copy_from_slice(vec);
        }
    }
    out
}

//! Reverse-mode automatic differentiation over dynamically shaped f64 tensors.
//!
//! A [`Graph`] is a flat tape of nodes. Operations append a node holding the
//! forward value plus a closure that maps the incoming gradient to gradients
//! for each parent. Tapes are cheap and rebuilt per forward pass; parameters
//! enter as leaves and their gradients are read back after [`Graph::backward`].
//!
//! Everything runs in f64 so that finite-difference checks can be held to
//! tight tolerances.

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

type BackFn = Box<dyn Fn(&ArrayD<f64>, &[&ArrayD<f64>]) -> Vec<ArrayD<f64>>>;

struct Node {
    value: ArrayD<f64>,
    parents: Vec<usize>,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn value2(&self, v: Var) -> Array2<f64> {
        self.nodes[v.0]
            .value
            .clone()
            .into_dimensionality()
            .expect("expected rank-2 value")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.len(), 1, "expected scalar node");
        val.iter().next().copied().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, parents: Vec<usize>, back: BackFn) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            back: Some(back),
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node; receives a gradient but has no parents.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            back: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf2(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn leaf1(&mut self, value: Array1<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    /// Constant: like a leaf, but gradients flowing into it are discarded by
    /// the caller simply never reading them. Kept as an alias for intent.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.leaf(value)
    }

    /// Accumulate gradients of every node reachable from `root`, seeded with
    /// d root / d root = 1. Returns one gradient slot per node.
    pub fn backward(&self, root: Var) -> Vec<Option<ArrayD<f64>>> {
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        let seed = ArrayD::ones(self.nodes[root.0].value.raw_dim());
        grads[root.0] = Some(seed);
        // Tape order is a topological order; walk it backwards.
        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(back) = &node.back {
                let parent_vals: Vec<&ArrayD<f64>> =
                    node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let parent_grads = back(&gout, &parent_vals);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, g) in node.parents.iter().zip(parent_grads) {
                    match &mut grads[p] {
                        Some(acc) => *acc += &g,
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            grads[i] = Some(gout);
        }
        grads
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, vec![a.0, b.0], Box::new(|g, _| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(
            v,
            vec![a.0, b.0],
            Box::new(|g, _| vec![g.clone(), g.mapv(|x| -x)]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(
            v,
            vec![a.0, b.0],
            Box::new(|g, p| vec![g * p[1], g * p[0]]),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, vec![a.0], Box::new(move |g, _| vec![g.mapv(|x| x * c)]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, vec![a.0], Box::new(|g, _| vec![g.clone()]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(
            v,
            vec![a.0],
            Box::new(|g, p| {
                let mut out = g.clone();
                out.zip_mut_with(p[0], |gi, &x| {
                    if x <= 0.0 {
                        *gi = 0.0
                    }
                });
                vec![out]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let s = v.clone();
        self.push(
            v,
            vec![a.0],
            Box::new(move |g, _| vec![g * &s.mapv(|y| y * (1.0 - y))]),
        )
    }

    /// Natural log with inputs clamped to [eps, inf). The clamp keeps loss
    /// terms finite at probability 0/1; gradient is zero in the clamped zone.
    pub fn ln_clamped(&mut self, a: Var, eps: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(eps).ln());
        self.push(
            v,
            vec![a.0],
            Box::new(move |g, p| {
                let mut out = g.clone();
                out.zip_mut_with(p[0], |gi, &x| {
                    if x > eps {
                        *gi /= x
                    } else {
                        *gi = 0.0
                    }
                });
                vec![out]
            }),
        )
    }

    /// Elementwise x^c for a constant exponent, on non-negative inputs.
    pub fn powf_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.powf(c));
        self.push(
            v,
            vec![a.0],
            Box::new(move |g, p| {
                let d = p[0].mapv(|x| {
                    if x == 0.0 && c < 1.0 {
                        0.0
                    } else {
                        c * x.powf(c - 1.0)
                    }
                });
                vec![g * &d]
            }),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let shape = self.nodes[a.0].value.raw_dim();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s),
            vec![a.0],
            Box::new(move |g, _| {
                let gs = g.iter().next().copied().unwrap();
                vec![ArrayD::from_elem(shape.clone(), gs)]
            }),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    // ---- rank-2 linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value2(a);
        let bv = self.value2(b);
        let v = av.dot(&bv).into_dyn();
        self.push(
            v,
            vec![a.0, b.0],
            Box::new(|g, p| {
                let g2: Array2<f64> = g.clone().into_dimensionality().unwrap();
                let a2: Array2<f64> = p[0].clone().into_dimensionality().unwrap();
                let b2: Array2<f64> = p[1].clone().into_dimensionality().unwrap();
                vec![g2.dot(&b2.t()).into_dyn(), a2.t().dot(&g2).into_dyn()]
            }),
        )
    }

    /// Add a length-m bias row to every row of an [n, m] matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value2(x);
        let bv: Array1<f64> = self.nodes[b.0]
            .value
            .clone()
            .into_dimensionality()
            .expect("bias must be rank 1");
        let v = (&xv + &bv).into_dyn();
        self.push(
            v,
            vec![x.0, b.0],
            Box::new(|g, _| {
                let g2: Array2<f64> = g.clone().into_dimensionality().unwrap();
                let gb = g2.sum_axis(Axis(0));
                vec![g2.into_dyn(), gb.into_dyn()]
            }),
        )
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        let v = self.value2(a).t().to_owned().into_dyn();
        self.push(
            v,
            vec![a.0],
            Box::new(|g, _| {
                let g2: Array2<f64> = g.clone().into_dimensionality().unwrap();
                vec![g2.t().to_owned().into_dyn()]
            }),
        )
    }

    /// Gather rows of an [n, m] matrix; duplicates allowed (scatter-add back).
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value2(a);
        let m = av.ncols();
        let mut out = Array2::zeros((idx.len(), m));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&av.row(i));
        }
        let idx_owned: Vec<usize> = idx.to_vec();
        let n = av.nrows();
        self.push(
            out.into_dyn(),
            vec![a.0],
            Box::new(move |g, _| {
                let g2: Array2<f64> = g.clone().into_dimensionality().unwrap();
                let mut ga = Array2::zeros((n, m));
                for (r, &i) in idx_owned.iter().enumerate() {
                    let mut row = ga.row_mut(i);
                    row += &g2.row(r);
                }
                vec![ga.into_dyn()]
            }),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let mats: Vec<Array2<f64>> = parts.iter().map(|&p| self.value2(p)).collect();
        let m = mats[0].ncols();
        let rows: Vec<usize> = mats.iter().map(|x| x.nrows()).collect();
        let total: usize = rows.iter().sum();
        let mut out = Array2::zeros((total, m));
        let mut at = 0;
        for mat in &mats {
            out.slice_mut(ndarray::s![at..at + mat.nrows(), ..]).assign(mat);
            at += mat.nrows();
        }
        self.push(
            out.into_dyn(),
            parts.iter().map(|p| p.0).collect(),
            Box::new(move |g, _| {
                let g2: Array2<f64> = g.clone().into_dimensionality().unwrap();
                let mut outs = Vec::with_capacity(rows.len());
                let mut at = 0;
                for &r in &rows {
                    outs.push(g2.slice(ndarray::s![at..at + r, ..]).to_owned().into_dyn());
                    at += r;
                }
                outs
            }),
        )
    }

    /// Row-wise softmax of an [n, m] matrix restricted to `mask`-valid
    /// entries. Invalid entries get probability 0; rows with no valid entry
    /// come out as all zeros.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &Array2<bool>) -> Var {
        let av = self.value2(a);
        assert_eq!(av.dim(), mask.dim());
        let mut probs = Array2::zeros(av.dim());
        for (i, row) in av.outer_iter().enumerate() {
            let mut mx = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if mask[(i, j)] && x > mx {
                    mx = x;
                }
            }
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut denom = 0.0;
            for (j, &x) in row.iter().enumerate() {
                if mask[(i, j)] {
                    let e = (x - mx).exp();
                    probs[(i, j)] = e;
                    denom += e;
                }
            }
            for j in 0..row.len() {
                probs[(i, j)] /= denom;
            }
        }
        let s = probs.clone();
        self.push(
            probs.into_dyn(),
            vec![a.0],
            Box::new(move |g, _| {
                let g2: Array2<f64> = g.clone().into_dimensionality().unwrap();
                let mut ga = Array2::zeros(g2.raw_dim());
                for i in 0..g2.nrows() {
                    let srow = s.row(i);
                    let grow = g2.row(i);
                    let dot: f64 = srow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..g2.ncols() {
                        ga[(i, j)] = srow[j] * (grow[j] - dot);
                    }
                }
                vec![ga.into_dyn()]
            }),
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let shape = self.value2(a).dim();
        let mask = Array2::from_elem(shape, true);
        self.masked_softmax_rows(a, &mask)
    }

    /// Per-row layer normalization with learned gain/offset, eps inside the
    /// square root.
    pub fn layernorm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value2(x);
        let gv: Array1<f64> = self.nodes[gamma.0].value.clone().into_dimensionality().unwrap();
        let bv: Array1<f64> = self.nodes[beta.0].value.clone().into_dimensionality().unwrap();
        let m = xv.ncols() as f64;
        let mut xhat = Array2::zeros(xv.dim());
        let mut inv_std = Array1::zeros(xv.nrows());
        for (i, row) in xv.outer_iter().enumerate() {
            let mu = row.mean().unwrap();
            let var = row.mapv(|v| (v - mu) * (v - mu)).mean().unwrap();
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..row.len() {
                xhat[(i, j)] = (row[j] - mu) * is;
            }
        }
        let mut out = Array2::zeros(xv.dim());
        for i in 0..xv.nrows() {
            for j in 0..xv.ncols() {
                out[(i, j)] = xhat[(i, j)] * gv[j] + bv[j];
            }
        }
        let xhat_c = xhat.clone();
        let gv_c = gv.clone();
        self.push(
            out.into_dyn(),
            vec![x.0, gamma.0, beta.0],
            Box::new(move |g, _| {
                let g2: Array2<f64> = g.clone().into_dimensionality().unwrap();
                let mut gx = Array2::zeros(g2.raw_dim());
                let mut ggamma = Array1::zeros(g2.ncols());
                let mut gbeta = Array1::zeros(g2.ncols());
                for i in 0..g2.nrows() {
                    // dL/dxhat for this row
                    let dxhat: Vec<f64> =
                        (0..g2.ncols()).map(|j| g2[(i, j)] * gv_c[j]).collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat
                        .iter()
                        .enumerate()
                        .map(|(j, d)| d * xhat_c[(i, j)])
                        .sum();
                    for j in 0..g2.ncols() {
                        gx[(i, j)] = inv_std[i] / m
                            * (m * dxhat[j] - sum_dxhat - xhat_c[(i, j)] * sum_dxhat_xhat);
                        ggamma[j] += g2[(i, j)] * xhat_c[(i, j)];
                        gbeta[j] += g2[(i, j)];
                    }
                }
                vec![gx.into_dyn(), ggamma.into_dyn(), gbeta.into_dyn()]
            }),
        )
    }

    /// Multiply each row of an [n, m] matrix by a fixed per-row factor.
    /// The factors are data (not differentiated through).
    pub fn scale_rows_const(&mut self, x: Var, factors: &Array1<f64>) -> Var {
        let xv = self.value2(x);
        assert_eq!(xv.nrows(), factors.len());
        let mut out = xv.clone();
        for (i, f) in factors.iter().enumerate() {
            let mut row = out.row_mut(i);
            row *= *f;
        }
        let f = factors.clone();
        self.push(
            out.into_dyn(),
            vec![x.0],
            Box::new(move |g, _| {
                let g2: Array2<f64> = g.clone().into_dimensionality().unwrap();
                let mut gx = g2.clone();
                for (i, fac) in f.iter().enumerate() {
                    let mut row = gx.row_mut(i);
                    row *= *fac;
                }
                vec![gx.into_dyn()]
            }),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        self.push(
            v,
            vec![a.0],
            Box::new(|g, p| {
                let mut out = g.clone();
                out.zip_mut_with(p[0], |gi, &x| *gi *= x.signum());
                vec![out]
            }),
        )
    }

    /// Cumulative sum down the rows of an [n, m] matrix, restarted every
    /// `group_len` rows (rows must be group-major).
    pub fn cumsum_rows_grouped(&mut self, a: Var, group_len: usize) -> Var {
        let av = self.value2(a);
        assert_eq!(av.nrows() % group_len, 0);
        let mut out = av.clone();
        for g0 in (0..av.nrows()).step_by(group_len) {
            for r in g0 + 1..g0 + group_len {
                let prev = out.row(r - 1).to_owned();
                let mut row = out.row_mut(r);
                row += &prev;
            }
        }
        self.push(
            out.into_dyn(),
            vec![a.0],
            Box::new(move |g, _| {
                let g2: Array2<f64> = g.clone().into_dimensionality().unwrap();
                let mut ga = g2.clone();
                // reverse cumulative sum within each group
                for g0 in (0..ga.nrows()).step_by(group_len) {
                    for r in (g0..g0 + group_len - 1).rev() {
                        let next = ga.row(r + 1).to_owned();
                        let mut row = ga.row_mut(r);
                        row += &next;
                    }
                }
                vec![ga.into_dyn()]
            }),
        )
    }

    /// Mean over each consecutive block of `group_len` rows, yielding
    /// [n / group_len, m].
    pub fn mean_rows_grouped(&mut self, a: Var, group_len: usize) -> Var {
        let av = self.value2(a);
        assert_eq!(av.nrows() % group_len, 0);
        let groups = av.nrows() / group_len;
        let mut out = Array2::zeros((groups, av.ncols()));
        for gi in 0..groups {
            for r in 0..group_len {
                let row = av.row(gi * group_len + r);
                let mut acc = out.row_mut(gi);
                acc += &row;
            }
            let mut acc = out.row_mut(gi);
            acc /= group_len as f64;
        }
        let n = av.nrows();
        self.push(
            out.into_dyn(),
            vec![a.0],
            Box::new(move |g, _| {
                let g2: Array2<f64> = g.clone().into_dimensionality().unwrap();
                let mut ga = Array2::zeros((n, g2.ncols()));
                for gi in 0..g2.nrows() {
                    for r in 0..group_len {
                        let mut row = ga.row_mut(gi * group_len + r);
                        row.assign(&g2.row(gi));
                        row /= group_len as f64;
                    }
                }
                vec![ga.into_dyn()]
            }),
        )
    }

    /// Renormalize the (col_s, col_c) pair of every row to unit norm,
    /// leaving all other columns untouched. Rows where the pair is exactly
    /// zero are passed through.
    pub fn normalize_unit_pair_cols(&mut self, a: Var, col_s: usize, col_c: usize) -> Var {
        let av = self.value2(a);
        let mut out = av.clone();
        for mut row in out.outer_iter_mut() {
            let s = row[col_s];
            let c = row[col_c];
            let r = (s * s + c * c).sqrt();
            if r > 0.0 {
                row[col_s] = s / r;
                row[col_c] = c / r;
            }
        }
        self.push(
            out.into_dyn(),
            vec![a.0],
            Box::new(move |g, p| {
                let g2: Array2<f64> = g.clone().into_dimensionality().unwrap();
                let a2: Array2<f64> = p[0].clone().into_dimensionality().unwrap();
                let mut ga = g2.clone();
                for i in 0..a2.nrows() {
                    let s = a2[(i, col_s)];
                    let c = a2[(i, col_c)];
                    let r2 = s * s + c * c;
                    if r2 == 0.0 {
                        continue;
                    }
                    let r3 = r2 * r2.sqrt();
                    let gs = g2[(i, col_s)];
                    let gc = g2[(i, col_c)];
                    // d(s/r)/ds = c^2/r^3, d(s/r)/dc = -sc/r^3, symmetric
                    ga[(i, col_s)] = gs * c * c / r3 - gc * s * c / r3;
                    ga[(i, col_c)] = -gs * s * c / r3 + gc * s * s / r3;
                }
                vec![ga.into_dyn()]
            }),
        )
    }

    /// Mean over axis 0 of an [n, m] matrix, yielding [1, m].
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value2(x);
        let n = xv.nrows() as f64;
        let v = xv.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0)).into_dyn();
        let rows = xv.nrows();
        self.push(
            v,
            vec![x.0],
            Box::new(move |g, _| {
                let g2: Array2<f64> = g.clone().into_dimensionality().unwrap();
                let mut gx = Array2::zeros((rows, g2.ncols()));
                for i in 0..rows {
                    let mut row = gx.row_mut(i);
                    row.assign(&g2.row(0));
                    row /= n;
                }
                vec![gx.into_dyn()]
            }),
        )
    }
}

/// Central finite-difference gradient of a scalar-valued function of one
/// flat input, used by tests as the independent oracle.
pub fn finite_difference_grad<F>(x: &ArrayD<f64>, eps: f64, mut f: F) -> ArrayD<f64>
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut g = ArrayD::zeros(x.raw_dim());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let flat = xp.as_slice_mut().unwrap();
        let orig = flat[i];
        flat[i] = orig + eps;
        let fp = f(&xp);
        let flat = xp.as_slice_mut().unwrap();
        flat[i] = orig - eps;
        let fm = f(&xp);
        let flat = xp.as_slice_mut().unwrap();
        flat[i] = orig;
        g.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * eps);
    }
    g
}

/// Max relative error between two gradients, with an absolute floor to keep
/// near-zero entries from blowing up the ratio.
pub fn max_rel_error(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

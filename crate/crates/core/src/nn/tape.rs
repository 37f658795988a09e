//! Reverse-mode autodiff over `ndarray` arrays.
//!
//! A [`Tape`] records one computation graph; [`Var`] is a node handle.
//! Parameters come from a [`ParamStore`] and gradients leave as [`Grads`],
//! so graphs are disposable while parameters persist across steps. The op
//! set is exactly what the models in this crate need; every backward rule
//! is covered by finite-difference tests in `gradcheck`.
//!
//! All arithmetic is `f64` and single-threaded within an op, which makes
//! every forward and backward pass bit-deterministic.

use std::cell::{Ref, RefCell};

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, IxDyn};

use super::conv::{conv3d_backward_cached, conv3d_forward_cached, upsample_backward, upsample_forward};
use super::params::{Grads, ParamId, ParamStore};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add([usize; 2]),
    AddN(Vec<usize>),
    AddRow([usize; 2]),
    Sub([usize; 2]),
    Mul([usize; 2]),
    Scale(usize, f64),
    AddScalar(usize),
    ScaleByScalarVar([usize; 2]),
    MatMul([usize; 2]),
    Relu(usize),
    Gelu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Square(usize),
    ClampMax(usize, f64),
    SoftmaxRows(usize),
    LayerNormRows([usize; 3], f64),
    GatherRows(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    StackRows(Vec<usize>),
    Row(usize, usize),
    SliceCols(usize, usize, usize),
    Transpose(usize),
    Reshape(usize, Vec<usize>),
    SumAll(usize),
    MeanAll(usize),
    SumAxis1(usize),
    MeanAxis1(usize),
    MeanRows(usize),
    Dot([usize; 2]),
    L2NormRows(usize, f64),
    CrossEntropyRows(usize, Vec<usize>),
    BceWithLogitsMean(usize, ArrayD<f64>, Option<Array1<f64>>),
    Conv3d([usize; 3], [usize; 3], std::rc::Rc<Array2<f64>>),
    UpsampleNn(usize, [usize; 3], [usize; 3]),
    StraightThrough(usize),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    param: Option<ParamId>,
}

/// One computation graph. Create per training step or per forward pass.
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: RefCell<Vec<Node>>,
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-d value")
}

fn as1(a: &ArrayD<f64>) -> ndarray::ArrayView1<'_, f64> {
    a.view().into_dimensionality::<Ix1>().expect("1-d value")
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn push(&self, op: Op, param: Option<ParamId>, value: ArrayD<f64>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, param });
        Var(nodes.len() - 1)
    }

    fn val<R>(&self, v: Var, f: impl FnOnce(&ArrayD<f64>) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[v.0].value)
    }

    fn val2<R>(&self, a: Var, b: Var, f: impl FnOnce(&ArrayD<f64>, &ArrayD<f64>) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    /// Borrow a node's value.
    pub fn value(&self, v: Var) -> Ref<'_, ArrayD<f64>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    /// Clone a node's value out of the tape.
    pub fn value_owned(&self, v: Var) -> ArrayD<f64> {
        self.val(v, |a| a.clone())
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.val(v, |a| a.shape().to_vec())
    }

    /// Extract a scalar (1-element) value.
    pub fn scalar(&self, v: Var) -> f64 {
        self.val(v, |a| {
            debug_assert_eq!(a.len(), 1, "scalar() on non-scalar node");
            *a.iter().next().expect("non-empty")
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    // ---- leaves -------------------------------------------------------

    pub fn constant(&self, value: ArrayD<f64>) -> Var {
        self.push(Op::Leaf, None, value)
    }

    pub fn constant_scalar(&self, x: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), x))
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.push(Op::Leaf, Some(id), self.store.value(id).clone())
    }

    // ---- elementwise --------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = self.val2(a, b, |x, y| x + y);
        self.push(Op::Add([a.0, b.0]), None, v)
    }

    /// Sum of several same-shape vars.
    pub fn add_n(&self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let v = {
            let nodes = self.nodes.borrow();
            let mut acc = nodes[vars[0].0].value.clone();
            for v in &vars[1..] {
                acc += &nodes[v.0].value;
            }
            acc
        };
        self.push(Op::AddN(vars.iter().map(|v| v.0).collect()), None, v)
    }

    /// `a + bias` where `a` is (N, D) and `bias` is (D,).
    pub fn add_row(&self, a: Var, bias: Var) -> Var {
        let v = self.val2(a, bias, |x, y| {
            let x2 = as2(x);
            let y1 = as1(y);
            (&x2 + &y1).into_dyn()
        });
        self.push(Op::AddRow([a.0, bias.0]), None, v)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = self.val2(a, b, |x, y| x - y);
        self.push(Op::Sub([a.0, b.0]), None, v)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = self.val2(a, b, |x, y| x * y);
        self.push(Op::Mul([a.0, b.0]), None, v)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let v = self.val(a, |x| x * c);
        self.push(Op::Scale(a.0, c), None, v)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let v = self.val(a, |x| x + c);
        self.push(Op::AddScalar(a.0), None, v)
    }

    /// `a * s` where `s` is a scalar (0-d) var, e.g. a learnable temperature.
    pub fn scale_by(&self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let v = self.val(a, |x| x * sv);
        self.push(Op::ScaleByScalarVar([a.0, s.0]), None, v)
    }

    pub fn relu(&self, a: Var) -> Var {
        let v = self.val(a, |x| x.mapv(|t| t.max(0.0)));
        self.push(Op::Relu(a.0), None, v)
    }

    pub fn gelu(&self, a: Var) -> Var {
        let v = self.val(a, |x| x.mapv(gelu_fwd));
        self.push(Op::Gelu(a.0), None, v)
    }

    pub fn tanh(&self, a: Var) -> Var {
        let v = self.val(a, |x| x.mapv(f64::tanh));
        self.push(Op::Tanh(a.0), None, v)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let v = self.val(a, |x| x.mapv(sigmoid_fwd));
        self.push(Op::Sigmoid(a.0), None, v)
    }

    pub fn exp(&self, a: Var) -> Var {
        let v = self.val(a, |x| x.mapv(f64::exp));
        self.push(Op::Exp(a.0), None, v)
    }

    pub fn ln(&self, a: Var) -> Var {
        let v = self.val(a, |x| x.mapv(f64::ln));
        self.push(Op::Ln(a.0), None, v)
    }

    pub fn square(&self, a: Var) -> Var {
        let v = self.val(a, |x| x.mapv(|t| t * t));
        self.push(Op::Square(a.0), None, v)
    }

    pub fn clamp_max(&self, a: Var, c: f64) -> Var {
        let v = self.val(a, |x| x.mapv(|t| t.min(c)));
        self.push(Op::ClampMax(a.0, c), None, v)
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let v = self.val2(a, b, |x, y| as2(x).dot(&as2(y)).into_dyn());
        self.push(Op::MatMul([a.0, b.0]), None, v)
    }

    pub fn transpose(&self, a: Var) -> Var {
        // as_standard_layout keeps rows contiguous for downstream ops
        let v = self.val(a, |x| {
            as2(x).t().as_standard_layout().to_owned().into_dyn()
        });
        self.push(Op::Transpose(a.0), None, v)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let orig = self.shape(a);
        let v = self.val(a, |x| {
            x.view()
                .into_shape_with_order(IxDyn(shape))
                .expect("reshape size match")
                .to_owned()
        });
        self.push(Op::Reshape(a.0, orig), None, v)
    }

    pub fn dot(&self, a: Var, b: Var) -> Var {
        let v = self.val2(a, b, |x, y| {
            ArrayD::from_elem(IxDyn(&[]), as1(x).dot(&as1(y)))
        });
        self.push(Op::Dot([a.0, b.0]), None, v)
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum_all(&self, a: Var) -> Var {
        let v = self.val(a, |x| ArrayD::from_elem(IxDyn(&[]), x.sum()));
        self.push(Op::SumAll(a.0), None, v)
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let v = self.val(a, |x| {
            ArrayD::from_elem(IxDyn(&[]), x.sum() / x.len() as f64)
        });
        self.push(Op::MeanAll(a.0), None, v)
    }

    /// (N, M) -> (N,) summing each row.
    pub fn sum_axis1(&self, a: Var) -> Var {
        let v = self.val(a, |x| as2(x).sum_axis(Axis(1)).into_dyn());
        self.push(Op::SumAxis1(a.0), None, v)
    }

    /// (N, M) -> (N,) averaging each row.
    pub fn mean_axis1(&self, a: Var) -> Var {
        let v = self.val(a, |x| {
            let m = x.shape()[1] as f64;
            (as2(x).sum_axis(Axis(1)) / m).into_dyn()
        });
        self.push(Op::MeanAxis1(a.0), None, v)
    }

    /// (N, M) -> (M,) averaging over rows.
    pub fn mean_rows(&self, a: Var) -> Var {
        let v = self.val(a, |x| {
            let n = x.shape()[0] as f64;
            (as2(x).sum_axis(Axis(0)) / n).into_dyn()
        });
        self.push(Op::MeanRows(a.0), None, v)
    }

    // ---- shape assembly -------------------------------------------------

    /// Concatenate 2-d vars along columns.
    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let v = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| as2(&nodes[p.0].value)).collect();
            ndarray::concatenate(Axis(1), &views)
                .expect("column concat")
                .into_dyn()
        };
        self.push(Op::ConcatCols(parts.iter().map(|p| p.0).collect()), None, v)
    }

    /// Concatenate 2-d vars along rows.
    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let v = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| as2(&nodes[p.0].value)).collect();
            ndarray::concatenate(Axis(0), &views)
                .expect("row concat")
                .into_dyn()
        };
        self.push(Op::ConcatRows(parts.iter().map(|p| p.0).collect()), None, v)
    }

    /// Stack 1-d vars of equal length into an (N, D) matrix.
    pub fn stack_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let v = {
            let nodes = self.nodes.borrow();
            let d = nodes[parts[0].0].value.len();
            let mut out = Array2::<f64>::zeros((parts.len(), d));
            for (i, p) in parts.iter().enumerate() {
                out.row_mut(i).assign(&as1(&nodes[p.0].value));
            }
            out.into_dyn()
        };
        self.push(Op::StackRows(parts.iter().map(|p| p.0).collect()), None, v)
    }

    /// Extract row `i` of a (N, D) var as a (D,) vector.
    pub fn row(&self, a: Var, i: usize) -> Var {
        let v = self.val(a, |x| as2(x).row(i).to_owned().into_dyn());
        self.push(Op::Row(a.0, i), None, v)
    }

    /// Columns `[start, start+len)` of a 2-d var.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let v = self.val(a, |x| {
            as2(x)
                .slice(ndarray::s![.., start..start + len])
                .to_owned()
                .into_dyn()
        });
        self.push(Op::SliceCols(a.0, start, len), None, v)
    }

    /// Row lookup: out[r] = table[idx[r]]. Works for embeddings and codebooks.
    pub fn gather_rows(&self, table: Var, idx: &[usize]) -> Var {
        let v = self.val(table, |x| {
            let t = as2(x);
            let mut out = Array2::<f64>::zeros((idx.len(), t.shape()[1]));
            for (r, &i) in idx.iter().enumerate() {
                out.row_mut(r).assign(&t.row(i));
            }
            out.into_dyn()
        });
        self.push(Op::GatherRows(table.0, idx.to_vec()), None, v)
    }

    // ---- fused nonlinear blocks ----------------------------------------

    /// Row-wise softmax of a 2-d var.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let v = self.val(a, |x| {
            let mut out = as2(x).to_owned();
            for mut row in out.rows_mut() {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|t| (t - m).exp());
                let s = row.sum();
                row.mapv_inplace(|t| t / s);
            }
            out.into_dyn()
        });
        self.push(Op::SoftmaxRows(a.0), None, v)
    }

    /// Row-wise layer norm with learned gain/bias: gamma * xhat + beta.
    pub fn layer_norm_rows(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let xa = as2(&nodes[x.0].value);
            let g = as1(&nodes[gamma.0].value);
            let b = as1(&nodes[beta.0].value);
            let mut out = xa.to_owned();
            for mut row in out.rows_mut() {
                let d = row.len() as f64;
                let mu = row.sum() / d;
                let var = row.iter().map(|t| (t - mu) * (t - mu)).sum::<f64>() / d;
                let inv = 1.0 / (var + eps).sqrt();
                for (j, t) in row.iter_mut().enumerate() {
                    *t = g[j] * (*t - mu) * inv + b[j];
                }
            }
            out.into_dyn()
        };
        self.push(Op::LayerNormRows([x.0, gamma.0, beta.0], eps), None, v)
    }

    /// Row-wise L2 normalization: y = x / sqrt(|x|^2 + eps).
    pub fn l2_normalize_rows(&self, a: Var, eps: f64) -> Var {
        let v = self.val(a, |x| {
            let mut out = as2(x).to_owned();
            for mut row in out.rows_mut() {
                let n = (row.iter().map(|t| t * t).sum::<f64>() + eps).sqrt();
                row.mapv_inplace(|t| t / n);
            }
            out.into_dyn()
        });
        self.push(Op::L2NormRows(a.0, eps), None, v)
    }

    /// L2-normalize a 1-d vector.
    pub fn l2_normalize_vec(&self, a: Var, eps: f64) -> Var {
        let d = self.shape(a)[0];
        let m = self.reshape(a, &[1, d]);
        let n = self.l2_normalize_rows(m, eps);
        self.reshape(n, &[d])
    }

    /// Mean softmax cross-entropy of logit rows against integer targets.
    pub fn cross_entropy_rows(&self, logits: Var, targets: &[usize]) -> Var {
        let v = self.val(logits, |x| {
            let l = as2(x);
            assert_eq!(l.shape()[0], targets.len());
            let mut total = 0.0;
            for (row, &t) in l.rows().into_iter().zip(targets) {
                total += log_sum_exp(row.as_slice().expect("contiguous row")) - row[t];
            }
            ArrayD::from_elem(IxDyn(&[]), total / targets.len() as f64)
        });
        self.push(
            Op::CrossEntropyRows(logits.0, targets.to_vec()),
            None,
            v,
        )
    }

    /// Mean binary cross-entropy with logits; optional per-column positive
    /// weight (N, D) logits against same-shape 0/1 targets.
    pub fn bce_with_logits_mean(
        &self,
        logits: Var,
        targets: ArrayD<f64>,
        pos_weight: Option<Array1<f64>>,
    ) -> Var {
        let v = self.val(logits, |x| {
            assert_eq!(x.shape(), targets.shape());
            let l = as2(x);
            let t = as2(&targets);
            let mut total = 0.0;
            for ((i, j), &lv) in l.indexed_iter() {
                let w = pos_weight.as_ref().map_or(1.0, |pw| pw[j]);
                let y = t[[i, j]];
                // -[w*y*ln(sig) + (1-y)*ln(1-sig)] via softplus for stability
                total += w * y * softplus(-lv) + (1.0 - y) * softplus(lv);
            }
            ArrayD::from_elem(IxDyn(&[]), total / x.len() as f64)
        });
        self.push(
            Op::BceWithLogitsMean(logits.0, targets, pos_weight),
            None,
            v,
        )
    }

    // ---- volumetric ops --------------------------------------------------

    /// 3-d convolution with "same" padding; kernel edge (1 or 3) is read
    /// from the weight shape.
    /// x: (B, Cin, d0, d1, d2), w: (Cout, Cin, k, k, k), b: (Cout,).
    pub fn conv3d(&self, x: Var, w: Var, b: Var, stride: [usize; 3]) -> Var {
        let (v, patches) = {
            let nodes = self.nodes.borrow();
            conv3d_forward_cached(
                &nodes[x.0].value,
                &nodes[w.0].value,
                &nodes[b.0].value,
                stride,
            )
        };
        self.push(
            Op::Conv3d([x.0, w.0, b.0], stride, std::rc::Rc::new(patches)),
            None,
            v,
        )
    }

    /// Nearest-neighbor upsampling by integer factors, cropped to `target`.
    pub fn upsample_nn(&self, x: Var, factors: [usize; 3], target: [usize; 3]) -> Var {
        let v = self.val(x, |xa| upsample_forward(xa, factors, target));
        self.push(Op::UpsampleNn(x.0, factors, target), None, v)
    }

    /// Forward value is `quantized`; gradient passes through to `latent`
    /// unchanged.
    pub fn straight_through(&self, latent: Var, quantized: ArrayD<f64>) -> Var {
        assert_eq!(self.shape(latent), quantized.shape().to_vec());
        self.push(Op::StraightThrough(latent.0), None, quantized)
    }

    // ---- backward --------------------------------------------------------

    /// Backpropagate from a scalar loss; returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Grads {
        self.backward_seeded(loss, ArrayD::from_elem(IxDyn(&[]), 1.0))
    }

    /// Backpropagate from `var` with an explicit seed gradient.
    pub fn backward_seeded(&self, var: Var, seed: ArrayD<f64>) -> Grads {
        let nodes = self.nodes.borrow();
        let mut node_grads: Vec<Option<ArrayD<f64>>> = vec![None; nodes.len()];
        node_grads[var.0] = Some(seed);
        let mut grads = Grads::zeros(self.store.len());

        for idx in (0..=var.0).rev() {
            let Some(g) = node_grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            if let Some(pid) = node.param {
                grads.accumulate(pid, g.clone());
            }
            backward_op(&node.op, &g, &node.value, &nodes, &mut node_grads);
        }
        grads
    }
}

fn acc(node_grads: &mut [Option<ArrayD<f64>>], idx: usize, g: ArrayD<f64>) {
    match &mut node_grads[idx] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

fn sigmoid_fwd(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&t| (t - m).exp()).sum::<f64>().ln()
}

#[allow(clippy::too_many_lines)]
fn backward_op(
    op: &Op,
    g: &ArrayD<f64>,
    value: &ArrayD<f64>,
    nodes: &[Node],
    node_grads: &mut Vec<Option<ArrayD<f64>>>,
) {
    match op {
        Op::Leaf => {}
        Op::Add([a, b]) => {
            acc(node_grads, *a, g.clone());
            acc(node_grads, *b, g.clone());
        }
        Op::AddN(parents) => {
            for &p in parents {
                acc(node_grads, p, g.clone());
            }
        }
        Op::AddRow([a, b]) => {
            acc(node_grads, *a, g.clone());
            let gb = as2(g).sum_axis(Axis(0)).into_dyn();
            acc(node_grads, *b, gb);
        }
        Op::Sub([a, b]) => {
            acc(node_grads, *a, g.clone());
            acc(node_grads, *b, -g);
        }
        Op::Mul([a, b]) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            acc(node_grads, *a, g * vb);
            acc(node_grads, *b, g * va);
        }
        Op::Scale(a, c) => acc(node_grads, *a, g * *c),
        Op::AddScalar(a) => acc(node_grads, *a, g.clone()),
        Op::ScaleByScalarVar([a, s]) => {
            let sv = *nodes[*s].value.iter().next().expect("scalar");
            acc(node_grads, *a, g * sv);
            let gs = (g * &nodes[*a].value).sum();
            acc(node_grads, *s, ArrayD::from_elem(IxDyn(&[]), gs));
        }
        Op::MatMul([a, b]) => {
            let ga = as2(g).dot(&as2(&nodes[*b].value).t()).into_dyn();
            let gb = as2(&nodes[*a].value).t().dot(&as2(g)).into_dyn();
            acc(node_grads, *a, ga);
            acc(node_grads, *b, gb);
        }
        Op::Relu(a) => {
            let mask = nodes[*a].value.mapv(|t| if t > 0.0 { 1.0 } else { 0.0 });
            acc(node_grads, *a, g * &mask);
        }
        Op::Gelu(a) => {
            let d = nodes[*a].value.mapv(gelu_bwd);
            acc(node_grads, *a, g * &d);
        }
        Op::Tanh(a) => {
            let d = value.mapv(|y| 1.0 - y * y);
            acc(node_grads, *a, g * &d);
        }
        Op::Sigmoid(a) => {
            let d = value.mapv(|y| y * (1.0 - y));
            acc(node_grads, *a, g * &d);
        }
        Op::Exp(a) => acc(node_grads, *a, g * value),
        Op::Ln(a) => {
            let d = nodes[*a].value.mapv(|x| 1.0 / x);
            acc(node_grads, *a, g * &d);
        }
        Op::Square(a) => {
            let d = nodes[*a].value.mapv(|x| 2.0 * x);
            acc(node_grads, *a, g * &d);
        }
        Op::ClampMax(a, c) => {
            let d = nodes[*a].value.mapv(|x| if x < *c { 1.0 } else { 0.0 });
            acc(node_grads, *a, g * &d);
        }
        Op::SoftmaxRows(a) => {
            let y = as2(value);
            let gy = as2(g);
            let mut out = gy.to_owned();
            for (mut orow, (yrow, grow)) in out
                .rows_mut()
                .into_iter()
                .zip(y.rows().into_iter().zip(gy.rows()))
            {
                let dot: f64 = yrow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum();
                for (o, (&yv, &gv)) in orow.iter_mut().zip(yrow.iter().zip(grow.iter())) {
                    *o = (gv - dot) * yv;
                }
            }
            acc(node_grads, *a, out.into_dyn());
        }
        Op::LayerNormRows([x, gamma, beta], eps) => {
            let xa = as2(&nodes[*x].value);
            let ga = as1(&nodes[*gamma].value);
            let gy = as2(g);
            let d = xa.shape()[1];
            let mut gx = Array2::<f64>::zeros(xa.raw_dim());
            let mut ggamma = Array1::<f64>::zeros(d);
            let mut gbeta = Array1::<f64>::zeros(d);
            for (r, xrow) in xa.rows().into_iter().enumerate() {
                let dn = d as f64;
                let mu = xrow.sum() / dn;
                let var = xrow.iter().map(|t| (t - mu) * (t - mu)).sum::<f64>() / dn;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = xrow.iter().map(|t| (t - mu) * inv).collect();
                let gyr = gy.row(r);
                let mut mean_dxhat = 0.0;
                let mut mean_dxhat_xhat = 0.0;
                for j in 0..d {
                    let dxhat = gyr[j] * ga[j];
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * xhat[j];
                    ggamma[j] += gyr[j] * xhat[j];
                    gbeta[j] += gyr[j];
                }
                mean_dxhat /= dn;
                mean_dxhat_xhat /= dn;
                for j in 0..d {
                    let dxhat = gyr[j] * ga[j];
                    gx[[r, j]] = inv * (dxhat - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                }
            }
            acc(node_grads, *x, gx.into_dyn());
            acc(node_grads, *gamma, ggamma.into_dyn());
            acc(node_grads, *beta, gbeta.into_dyn());
        }
        Op::GatherRows(table, idx) => {
            let tshape = nodes[*table].value.shape();
            let mut gt = Array2::<f64>::zeros((tshape[0], tshape[1]));
            let gr = as2(g);
            for (r, &i) in idx.iter().enumerate() {
                let mut dst = gt.row_mut(i);
                dst += &gr.row(r);
            }
            acc(node_grads, *table, gt.into_dyn());
        }
        Op::ConcatCols(parents) => {
            let gm = as2(g);
            let mut off = 0;
            for &p in parents {
                let w = nodes[p].value.shape()[1];
                let part = gm.slice(ndarray::s![.., off..off + w]).to_owned();
                acc(node_grads, p, part.into_dyn());
                off += w;
            }
        }
        Op::ConcatRows(parents) => {
            let gm = as2(g);
            let mut off = 0;
            for &p in parents {
                let h = nodes[p].value.shape()[0];
                let part = gm.slice(ndarray::s![off..off + h, ..]).to_owned();
                acc(node_grads, p, part.into_dyn());
                off += h;
            }
        }
        Op::StackRows(parents) => {
            let gm = as2(g);
            for (r, &p) in parents.iter().enumerate() {
                acc(node_grads, p, gm.row(r).to_owned().into_dyn());
            }
        }
        Op::Row(a, i) => {
            let shape = nodes[*a].value.shape();
            let mut ga = Array2::<f64>::zeros((shape[0], shape[1]));
            ga.row_mut(*i).assign(&as1(g));
            acc(node_grads, *a, ga.into_dyn());
        }
        Op::SliceCols(a, start, len) => {
            let shape = nodes[*a].value.shape();
            let mut ga = Array2::<f64>::zeros((shape[0], shape[1]));
            ga.slice_mut(ndarray::s![.., *start..*start + *len])
                .assign(&as2(g));
            acc(node_grads, *a, ga.into_dyn());
        }
        Op::Transpose(a) => {
            acc(node_grads, *a, as2(g).t().to_owned().into_dyn());
        }
        Op::Reshape(a, orig) => {
            let ga = g
                .view()
                .into_shape_with_order(IxDyn(orig))
                .expect("reshape grad")
                .to_owned();
            acc(node_grads, *a, ga);
        }
        Op::SumAll(a) => {
            let gs = *g.iter().next().expect("scalar");
            acc(node_grads, *a, nodes[*a].value.mapv(|_| gs));
        }
        Op::MeanAll(a) => {
            let n = nodes[*a].value.len() as f64;
            let gs = *g.iter().next().expect("scalar") / n;
            acc(node_grads, *a, nodes[*a].value.mapv(|_| gs));
        }
        Op::SumAxis1(a) => {
            let shape = nodes[*a].value.shape();
            let g1 = as1(g);
            let mut ga = Array2::<f64>::zeros((shape[0], shape[1]));
            for (r, mut row) in ga.rows_mut().into_iter().enumerate() {
                row.fill(g1[r]);
            }
            acc(node_grads, *a, ga.into_dyn());
        }
        Op::MeanAxis1(a) => {
            let shape = nodes[*a].value.shape();
            let m = shape[1] as f64;
            let g1 = as1(g);
            let mut ga = Array2::<f64>::zeros((shape[0], shape[1]));
            for (r, mut row) in ga.rows_mut().into_iter().enumerate() {
                row.fill(g1[r] / m);
            }
            acc(node_grads, *a, ga.into_dyn());
        }
        Op::MeanRows(a) => {
            let shape = nodes[*a].value.shape();
            let n = shape[0] as f64;
            let g1 = as1(g);
            let mut ga = Array2::<f64>::zeros((shape[0], shape[1]));
            for mut row in ga.rows_mut() {
                for (j, t) in row.iter_mut().enumerate() {
                    *t = g1[j] / n;
                }
            }
            acc(node_grads, *a, ga.into_dyn());
        }
        Op::Dot([a, b]) => {
            let gs = *g.iter().next().expect("scalar");
            acc(node_grads, *a, &nodes[*b].value * gs);
            acc(node_grads, *b, &nodes[*a].value * gs);
        }
        Op::L2NormRows(a, eps) => {
            let xa = as2(&nodes[*a].value);
            let gy = as2(g);
            let mut gx = Array2::<f64>::zeros(xa.raw_dim());
            for (r, xrow) in xa.rows().into_iter().enumerate() {
                let n = (xrow.iter().map(|t| t * t).sum::<f64>() + eps).sqrt();
                let gyr = gy.row(r);
                let dot_gy_y: f64 = gyr
                    .iter()
                    .zip(xrow.iter())
                    .map(|(gv, xv)| gv * xv / n)
                    .sum();
                for j in 0..xrow.len() {
                    gx[[r, j]] = (gyr[j] - (xrow[j] / n) * dot_gy_y) / n;
                }
            }
            acc(node_grads, *a, gx.into_dyn());
        }
        Op::CrossEntropyRows(a, targets) => {
            let l = as2(&nodes[*a].value);
            let gs = *g.iter().next().expect("scalar") / targets.len() as f64;
            let mut ga = Array2::<f64>::zeros(l.raw_dim());
            for (r, (lrow, &t)) in l.rows().into_iter().zip(targets).enumerate() {
                let m = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = lrow.iter().map(|&v| (v - m).exp()).sum();
                for (j, &v) in lrow.iter().enumerate() {
                    let p = (v - m).exp() / denom;
                    ga[[r, j]] = gs * (p - if j == t { 1.0 } else { 0.0 });
                }
            }
            acc(node_grads, *a, ga.into_dyn());
        }
        Op::BceWithLogitsMean(a, targets, pos_weight) => {
            let l = as2(&nodes[*a].value);
            let t = as2(targets);
            let gs = *g.iter().next().expect("scalar") / nodes[*a].value.len() as f64;
            let mut ga = Array2::<f64>::zeros(l.raw_dim());
            for ((i, j), &lv) in l.indexed_iter() {
                let w = pos_weight.as_ref().map_or(1.0, |pw| pw[j]);
                let y = t[[i, j]];
                let s = sigmoid_fwd(lv);
                ga[[i, j]] = gs * (w * y * (s - 1.0) + (1.0 - y) * s);
            }
            acc(node_grads, *a, ga.into_dyn());
        }
        Op::Conv3d([x, w, b], stride, patches) => {
            let (gx, gw, gb) =
                conv3d_backward_cached(&nodes[*x].value, &nodes[*w].value, *stride, g, Some(patches));
            acc(node_grads, *x, gx);
            acc(node_grads, *w, gw);
            acc(node_grads, *b, gb);
        }
        Op::UpsampleNn(x, factors, target) => {
            let gx = upsample_backward(&nodes[*x].value, *factors, *target, g);
            acc(node_grads, *x, gx);
        }
        Op::StraightThrough(latent) => {
            acc(node_grads, *latent, g.clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::init;

    #[test]
    fn matmul_forward_matches_manual() {
        let store = ParamStore::new();
        let t = Tape::new(&store);
        let a = t.constant(ndarray::array![[1.0, 2.0], [3.0, 4.0]].into_dyn());
        let b = t.constant(ndarray::array![[5.0, 6.0], [7.0, 8.0]].into_dyn());
        let c = t.matmul(a, b);
        let v = t.value_owned(c);
        assert_eq!(v[[0, 0]], 19.0);
        assert_eq!(v[[1, 1]], 50.0);
    }

    #[test]
    fn backward_through_shared_node_accumulates() {
        // f = sum(x * x) via two uses of the same node: df/dx = 2x
        let mut store = ParamStore::new();
        let mut rng = crate::rng::root(1);
        let id = store.add("x", init::normal(&mut rng, &[3], 1.0));
        let t = Tape::new(&store);
        let x = t.param(id);
        let y = t.mul(x, x);
        let loss = t.sum_all(y);
        let grads = t.backward(loss);
        let gx = grads.get(id).unwrap();
        for (g, x) in gx.iter().zip(store.value(id).iter()) {
            assert!((g - 2.0 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let store = ParamStore::new();
        let t = Tape::new(&store);
        let a = t.constant(ndarray::array![[0.1, 2.0, -1.0], [5.0, 5.0, 5.0]].into_dyn());
        let s = t.softmax_rows(a);
        let v = t.value_owned(s);
        for row in as2(&v).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_identity_two_rows() {
        // logits = I2, targets = diagonal: loss = ln(1 + e^-1)
        let store = ParamStore::new();
        let t = Tape::new(&store);
        let l = t.constant(ndarray::array![[1.0, 0.0], [0.0, 1.0]].into_dyn());
        let ce = t.cross_entropy_rows(l, &[0, 1]);
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((t.scalar(ce) - expect).abs() < 1e-12);
    }

    #[test]
    fn straight_through_passes_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("z", ArrayD::from_elem(IxDyn(&[2]), 0.5));
        let t = Tape::new(&store);
        let z = t.param(id);
        let q = t.straight_through(z, ArrayD::from_elem(IxDyn(&[2]), 9.0));
        let s = t.sum_all(q);
        assert_eq!(t.scalar(s), 18.0);
        let grads = t.backward(s);
        let gz = grads.get(id).unwrap();
        assert_eq!(gz[[0]], 1.0);
        assert_eq!(gz[[1]], 1.0);
    }
}

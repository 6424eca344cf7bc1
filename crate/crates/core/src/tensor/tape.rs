use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use super::{Param, Scalar, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Gelu,
    Sigmoid,
    Relu,
    Tanh,
    Exp,
    Logit,
}

/// Sentinel gather index meaning "emit zero".
pub(crate) const ZERO_INDEX: usize = usize::MAX;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulChannels(Var, Var),
    MulRows(Var, Var),
    Scale(Var, T),
    Unary(Var, Unary),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_shared: bool,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Sum(Var),
    MeanMiddle {
        x: Var,
        groups: usize,
        n: usize,
        c: usize,
    },
    Reshape(Var),
    Gather {
        x: Var,
        index: Rc<Vec<usize>>,
    },
    MixRows {
        x: Var,
        taps: Rc<Vec<Vec<(usize, T)>>>,
    },
    ConcatRows(Vec<Var>),
    L1 {
        pred: Var,
        target: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Focal {
        logits: Var,
        targets: Vec<T>,
        alpha: T,
        gamma: T,
    },
}

impl<T> Op<T> {
    fn is_leaf(&self) -> bool {
        matches!(self, Op::Leaf)
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Node ids increase in creation order, so reverse id order is a valid
/// topological order for the backward sweep. A tape is single-threaded.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<Vec<(String, Var)>>,
    param_ids: RefCell<HashMap<String, Var>>,
    train_params: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
            param_ids: RefCell::new(HashMap::new()),
            train_params: true,
        }
    }

    /// Tape whose parameters never require gradients (inference).
    pub fn inference() -> Self {
        Self {
            train_params: false,
            ..Self::new()
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn node_rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Bind a named parameter; binding the same name twice returns the same var.
    pub fn param(&self, p: &Param<T>) -> Var {
        if let Some(&v) = self.param_ids.borrow().get(&p.name) {
            return v;
        }
        let v = self.leaf(p.value.clone(), self.train_params);
        self.param_ids.borrow_mut().insert(p.name.clone(), v);
        self.params.borrow_mut().push((p.name.clone(), v));
        v
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shape of the largest non-leaf node recorded so far.
    pub fn largest_intermediate(&self) -> Vec<usize> {
        self.nodes
            .borrow()
            .iter()
            .filter(|n| !n.op.is_leaf())
            .max_by_key(|n| n.value.len())
            .map(|n| n.value.shape().to_vec())
            .unwrap_or_default()
    }

    /// Copy of `v` with no gradient path.
    pub fn detach(&self, v: Var) -> Var {
        let value = (*self.value(v)).clone();
        self.constant(value)
    }

    fn binary_same_shape(&self, a: Var, b: Var, name: &str) -> (Rc<Tensor<T>>, Rc<Tensor<T>>) {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "{name}: shape mismatch");
        (va, vb)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = self.binary_same_shape(a, b, "add");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.node_rg(a) || self.node_rg(b);
        self.push(Tensor::from_vec(va.shape(), data), Op::Add(a, b), rg)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = self.binary_same_shape(a, b, "sub");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let rg = self.node_rg(a) || self.node_rg(b);
        self.push(Tensor::from_vec(va.shape(), data), Op::Sub(a, b), rg)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = self.binary_same_shape(a, b, "mul");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.node_rg(a) || self.node_rg(b);
        self.push(Tensor::from_vec(va.shape(), data), Op::Mul(a, b), rg)
    }

    /// `x[..., c] + bias[c]`.
    pub fn add_bias(&self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.last_dim();
        assert_eq!(
            vb.len(),
            c,
            "add_bias: bias length {} vs channels {c}",
            vb.len()
        );
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb.data()[i % c])
            .collect();
        let rg = self.node_rg(x) || self.node_rg(bias);
        self.push(Tensor::from_vec(vx.shape(), data), Op::AddBias(x, bias), rg)
    }

    /// `x[..., c] * scale[c]`.
    pub fn mul_channels(&self, x: Var, scale: Var) -> Var {
        let (vx, vs) = (self.value(x), self.value(scale));
        let c = vx.last_dim();
        assert_eq!(vs.len(), c, "mul_channels: scale length mismatch");
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * vs.data()[i % c])
            .collect();
        let rg = self.node_rg(x) || self.node_rg(scale);
        self.push(
            Tensor::from_vec(vx.shape(), data),
            Op::MulChannels(x, scale),
            rg,
        )
    }

    /// `x[r, c] * scale[r]`, with `x` viewed as `[rows, last_dim]`.
    pub fn mul_rows(&self, x: Var, scale: Var) -> Var {
        let (vx, vs) = (self.value(x), self.value(scale));
        let c = vx.last_dim();
        assert_eq!(vs.len(), vx.rows(), "mul_rows: scale length mismatch");
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * vs.data()[i / c])
            .collect();
        let rg = self.node_rg(x) || self.node_rg(scale);
        self.push(
            Tensor::from_vec(vx.shape(), data),
            Op::MulRows(x, scale),
            rg,
        )
    }

    pub fn scale(&self, x: Var, s: T) -> Var {
        let vx = self.value(x);
        let rg = self.node_rg(x);
        self.push(vx.map(|v| v * s), Op::Scale(x, s), rg)
    }

    fn unary(&self, x: Var, kind: Unary) -> Var {
        let vx = self.value(x);
        let f: fn(T) -> T = match kind {
            Unary::Gelu => gelu,
            Unary::Sigmoid => sigmoid,
            Unary::Relu => |v| v.max(T::zero()),
            Unary::Tanh => |v| v.tanh(),
            Unary::Exp => |v| v.exp(),
            Unary::Logit => logit,
        };
        let rg = self.node_rg(x);
        self.push(vx.map(f), Op::Unary(x, kind), rg)
    }

    pub fn gelu(&self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    /// Inverse sigmoid; inputs must lie strictly inside (0, 1).
    pub fn logit(&self, x: Var) -> Var {
        self.unary(x, Unary::Logit)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product with optional operand transposes.
    ///
    /// Accepted layouts: `a` of any rank ≥ 2 times a 2-D `b` (rows of `a`
    /// flattened, only without `ta`), 2-D times 2-D, and 3-D times 3-D with
    /// a shared leading batch extent.
    pub fn matmul_t(&self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let (batch, m, k, n, b_shared, out_shape);
        if sb.len() == 2 && (sa.len() == 2 || !ta) {
            assert!(sa.len() >= 2, "matmul: lhs rank {} < 2", sa.len());
            let (ra, ca) = if sa.len() == 2 {
                (sa[0], sa[1])
            } else {
                (va.rows(), va.last_dim())
            };
            let (am, ak) = if ta { (ca, ra) } else { (ra, ca) };
            let (bk, bn) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
            assert_eq!(
                ak, bk,
                "matmul: inner dims {sa:?} x {sb:?} (ta={ta}, tb={tb})"
            );
            batch = 1;
            m = am;
            k = ak;
            n = bn;
            b_shared = true;
            let mut s = if ta {
                vec![am]
            } else {
                sa[..sa.len() - 1].to_vec()
            };
            s.push(bn);
            out_shape = s;
        } else {
            assert!(
                sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0],
                "matmul: batched {sa:?} x {sb:?}"
            );
            let (am, ak) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
            let (bk, bn) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
            assert_eq!(
                ak, bk,
                "matmul: inner dims {sa:?} x {sb:?} (ta={ta}, tb={tb})"
            );
            batch = sa[0];
            m = am;
            k = ak;
            n = bn;
            b_shared = false;
            out_shape = vec![batch, am, bn];
        }
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let a_sl = &va.data()[bi * m * k..(bi + 1) * m * k];
            let b_sl = if b_shared {
                vb.data()
            } else {
                &vb.data()[bi * k * n..(bi + 1) * k * n]
            };
            T::gemm(
                m,
                k,
                n,
                a_sl,
                ta,
                b_sl,
                tb,
                &mut out[bi * m * n..(bi + 1) * m * n],
                false,
            );
        }
        let rg = self.node_rg(a) || self.node_rg(b);
        self.push(
            Tensor::from_vec(&out_shape, out),
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
                b_shared,
            },
            rg,
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.last_dim();
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.node_rg(x);
        self.push(Tensor::from_vec(vx.shape(), out), Op::Softmax(x), rg)
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = vx.last_dim();
        assert!(c >= 1, "layer_norm: empty last axis");
        assert!(
            vg.len() == c && vb.len() == c,
            "layer_norm: affine length mismatch"
        );
        let rows = vx.rows();
        let cn = T::from_usize(c).unwrap();
        let mut xhat = vec![T::zero(); vx.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.len()];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let rg = self.node_rg(x) || self.node_rg(gamma) || self.node_rg(beta);
        self.push(
            Tensor::from_vec(vx.shape(), out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn sum(&self, x: Var) -> Var {
        let vx = self.value(x);
        let rg = self.node_rg(x);
        self.push(Tensor::scalar(vx.sum()), Op::Sum(x), rg)
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    /// `[groups, n, c] -> [groups, c]`, averaging over the middle axis.
    pub fn mean_middle(&self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        assert_eq!(s.len(), 3, "mean_middle expects rank 3, got {s:?}");
        let (groups, n, c) = (s[0], s[1], s[2]);
        let inv = T::one() / T::from_usize(n.max(1)).unwrap();
        let mut out = vec![T::zero(); groups * c];
        for g in 0..groups {
            for i in 0..n {
                let base = (g * n + i) * c;
                for j in 0..c {
                    out[g * c + j] = out[g * c + j] + vx.data()[base + j];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let rg = self.node_rg(x);
        self.push(
            Tensor::from_vec(&[groups, c], out),
            Op::MeanMiddle { x, groups, n, c },
            rg,
        )
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let vx = self.value(x);
        let value = (*vx)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        let rg = self.node_rg(x);
        self.push(value, Op::Reshape(x), rg)
    }

    /// `out[i] = x.flat[index[i]]`, or zero where the index is the zero sentinel.
    pub fn gather(&self, x: Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Var {
        let vx = self.value(x);
        assert_eq!(
            index.len(),
            shape.iter().product::<usize>(),
            "gather: index/shape mismatch"
        );
        let data = index
            .iter()
            .map(|&i| {
                if i == ZERO_INDEX {
                    T::zero()
                } else {
                    vx.data()[i]
                }
            })
            .collect();
        let rg = self.node_rg(x);
        self.push(Tensor::from_vec(shape, data), Op::Gather { x, index }, rg)
    }

    /// Select rows of `x` viewed as `[rows, c]`.
    pub fn select_rows(&self, x: Var, rows: &[usize]) -> Var {
        let vx = self.value(x);
        let c = vx.last_dim();
        let index: Vec<usize> = rows.iter().flat_map(|&r| (r * c)..(r * c + c)).collect();
        self.gather(x, Rc::new(index), &[rows.len(), c])
    }

    /// Reorder the axes of a rank-3 tensor.
    pub fn permute3(&self, x: Var, perm: [usize; 3]) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 3, "permute3 expects rank 3");
        let out_shape = [s[perm[0]], s[perm[1]], s[perm[2]]];
        let mut index = Vec::with_capacity(s.iter().product());
        let strides = [s[1] * s[2], s[2], 1];
        for i in 0..out_shape[0] {
            for j in 0..out_shape[1] {
                for k in 0..out_shape[2] {
                    let mut src = [0usize; 3];
                    src[perm[0]] = i;
                    src[perm[1]] = j;
                    src[perm[2]] = k;
                    index.push(src[0] * strides[0] + src[1] * strides[1] + src[2] * strides[2]);
                }
            }
        }
        self.gather(x, Rc::new(index), &out_shape)
    }

    /// Weighted row mixing: `out[r] = Σ w · x[src]` over `taps[r]`.
    pub fn mix_rows(&self, x: Var, taps: Rc<Vec<Vec<(usize, T)>>>) -> Var {
        let vx = self.value(x);
        let c = vx.last_dim();
        let mut out = vec![T::zero(); taps.len() * c];
        for (r, row_taps) in taps.iter().enumerate() {
            for &(src, w) in row_taps {
                let s = vx.row(src);
                for j in 0..c {
                    out[r * c + j] = out[r * c + j] + w * s[j];
                }
            }
        }
        let rg = self.node_rg(x);
        self.push(
            Tensor::from_vec(&[taps.len(), c], out),
            Op::MixRows { x, taps },
            rg,
        )
    }

    /// Concatenate along the first axis; all parts must share trailing extents.
    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let first = self.shape(parts[0]);
        let mut data = Vec::new();
        let mut lead = 0;
        let mut rg = false;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(
                &v.shape()[1..],
                &first[1..],
                "concat_rows: trailing shape mismatch"
            );
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
            rg |= self.node_rg(p);
        }
        let mut shape = first;
        shape[0] = lead;
        self.push(
            Tensor::from_vec(&shape, data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&self, pred: Var, target: &[T]) -> Var {
        let vp = self.value(pred);
        assert_eq!(vp.len(), target.len(), "l1_loss: length mismatch");
        let n = T::from_usize(target.len().max(1)).unwrap();
        let v = vp
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &t)| (p - t).abs())
            .sum::<T>()
            / n;
        let rg = self.node_rg(pred);
        self.push(
            Tensor::scalar(v),
            Op::L1 {
                pred,
                target: target.to_vec(),
            },
            rg,
        )
    }

    /// Mean softmax cross-entropy of `logits[rows, classes]` against class ids.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Var {
        let vl = self.value(logits);
        let c = vl.last_dim();
        assert_eq!(
            vl.rows(),
            targets.len(),
            "cross_entropy: row/target mismatch"
        );
        let mut probs = vl.data().to_vec();
        let mut total = T::zero();
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let t = targets[r];
            assert!(t < c, "cross_entropy: target {t} out of range {c}");
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total = total + lse - row[t];
            softmax_in_place(row);
        }
        let n = T::from_usize(targets.len().max(1)).unwrap();
        let rg = self.node_rg(logits);
        self.push(
            Tensor::scalar(total / n),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Summed sigmoid focal loss for binary targets.
    pub fn focal_loss(&self, logits: Var, targets: &[T], alpha: T, gamma: T) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.len(), targets.len(), "focal_loss: length mismatch");
        let total = vl
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &t)| focal_term(x, t, alpha, gamma))
            .sum::<T>();
        let rg = self.node_rg(logits);
        self.push(
            Tensor::scalar(total),
            Op::Focal {
                logits,
                targets: targets.to_vec(),
                alpha,
                gamma,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.0].value.len(),
            1,
            "backward: output must be scalar"
        );
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || node.op.is_leaf() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, &node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }
        let mut out: Vec<Option<Tensor<T>>> = Vec::with_capacity(nodes.len());
        for (node, g) in nodes.iter().zip(grads) {
            let t = match g {
                Some(g) if node.requires_grad => Some(Tensor::from_vec(node.value.shape(), g)),
                None if node.requires_grad && node.op.is_leaf() => {
                    Some(Tensor::zeros(node.value.shape()))
                }
                _ => None,
            };
            out.push(t);
        }
        Grads {
            grads: out,
            params: self.params.borrow().clone(),
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(String, Var)>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|&(_, v)| self.get(v))
    }

    /// Parameter gradients keyed by name.
    pub fn into_param_grads(mut self) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (name, v) in std::mem::take(&mut self.params) {
            if let Some(g) = self.grads[v.0].take() {
                out.insert(name, g);
            }
        }
        out
    }
}

fn acc<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    v: Var,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
    f(slot);
}

fn backprop<T: Scalar>(
    nodes: &[Node<T>],
    op: &Op<T>,
    out: &Tensor<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let val = |v: Var| -> &Tensor<T> { &nodes[v.0].value };
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(nodes, grads, *a, |d| add_into(d, g));
            acc(nodes, grads, *b, |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, |d| add_into(d, g));
            acc(nodes, grads, *b, |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g)
            });
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            acc(nodes, grads, *a, |d| {
                d.iter_mut()
                    .zip(g)
                    .zip(vb.data())
                    .for_each(|((d, &g), &y)| *d = *d + g * y)
            });
            acc(nodes, grads, *b, |d| {
                d.iter_mut()
                    .zip(g)
                    .zip(va.data())
                    .for_each(|((d, &g), &x)| *d = *d + g * x)
            });
        }
        Op::AddBias(x, b) => {
            acc(nodes, grads, *x, |d| add_into(d, g));
            let c = val(*b).len();
            acc(nodes, grads, *b, |d| {
                for (i, &gv) in g.iter().enumerate() {
                    d[i % c] = d[i % c] + gv;
                }
            });
        }
        Op::MulChannels(x, s) => {
            let (vx, vs) = (val(*x), val(*s));
            let c = vs.len();
            acc(nodes, grads, *x, |d| {
                for (i, &gv) in g.iter().enumerate() {
                    d[i] = d[i] + gv * vs.data()[i % c];
                }
            });
            acc(nodes, grads, *s, |d| {
                for (i, &gv) in g.iter().enumerate() {
                    d[i % c] = d[i % c] + gv * vx.data()[i];
                }
            });
        }
        Op::MulRows(x, s) => {
            let (vx, vs) = (val(*x), val(*s));
            let c = vx.last_dim();
            acc(nodes, grads, *x, |d| {
                for (i, &gv) in g.iter().enumerate() {
                    d[i] = d[i] + gv * vs.data()[i / c];
                }
            });
            acc(nodes, grads, *s, |d| {
                for (i, &gv) in g.iter().enumerate() {
                    d[i / c] = d[i / c] + gv * vx.data()[i];
                }
            });
        }
        Op::Scale(x, s) => {
            acc(nodes, grads, *x, |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * *s)
            });
        }
        Op::Unary(x, kind) => {
            let vx = val(*x);
            acc(nodes, grads, *x, |d| {
                for i in 0..d.len() {
                    let (xi, yi) = (vx.data()[i], out.data()[i]);
                    let dy = match kind {
                        Unary::Gelu => gelu_grad(xi),
                        Unary::Sigmoid => yi * (T::one() - yi),
                        Unary::Relu => {
                            if xi > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Tanh => T::one() - yi * yi,
                        Unary::Exp => yi,
                        Unary::Logit => T::one() / (xi * (T::one() - xi)),
                    };
                    d[i] = d[i] + g[i] * dy;
                }
            });
        }
        Op::MatMul {
            a,
            b,
            ta,
            tb,
            batch,
            m,
            k,
            n,
            b_shared,
        } => {
            let (va, vb) = (val(*a), val(*b));
            let (ta, tb, m, k, n) = (*ta, *tb, *m, *k, *n);
            for bi in 0..*batch {
                let gs = &g[bi * m * n..(bi + 1) * m * n];
                let a_sl = &va.data()[bi * m * k..(bi + 1) * m * k];
                let b_off = if *b_shared { 0 } else { bi * k * n };
                let b_sl = &vb.data()[b_off..b_off + k * n];
                acc(nodes, grads, *a, |d| {
                    let da = &mut d[bi * m * k..(bi + 1) * m * k];
                    if ta {
                        T::gemm(k, n, m, b_sl, tb, gs, true, da, true);
                    } else {
                        T::gemm(m, n, k, gs, false, b_sl, !tb, da, true);
                    }
                });
                acc(nodes, grads, *b, |d| {
                    let db = &mut d[b_off..b_off + k * n];
                    if tb {
                        T::gemm(n, m, k, gs, true, a_sl, ta, db, true);
                    } else {
                        T::gemm(k, m, n, a_sl, !ta, gs, false, db, true);
                    }
                });
            }
        }
        Op::Softmax(x) => {
            let c = out.last_dim();
            acc(nodes, grads, *x, |d| {
                for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = dr[j] + yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let vg = val(*gamma);
            let c = vg.len();
            let cn = T::from_usize(c).unwrap();
            acc(nodes, grads, *x, |d| {
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..c {
                        let dh = gr[j] * vg.data()[j];
                        mean_dh = mean_dh + dh;
                        mean_dh_h = mean_dh_h + dh * hr[j];
                    }
                    mean_dh = mean_dh / cn;
                    mean_dh_h = mean_dh_h / cn;
                    for j in 0..c {
                        let dh = gr[j] * vg.data()[j];
                        d[r * c + j] = d[r * c + j] + rs * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
            });
            acc(nodes, grads, *gamma, |d| {
                for (i, &gv) in g.iter().enumerate() {
                    d[i % c] = d[i % c] + gv * xhat[i];
                }
            });
            acc(nodes, grads, *beta, |d| {
                for (i, &gv) in g.iter().enumerate() {
                    d[i % c] = d[i % c] + gv;
                }
            });
        }
        Op::Sum(x) => {
            acc(nodes, grads, *x, |d| {
                d.iter_mut().for_each(|d| *d = *d + g[0])
            });
        }
        Op::MeanMiddle { x, groups, n, c } => {
            let inv = T::one() / T::from_usize((*n).max(1)).unwrap();
            acc(nodes, grads, *x, |d| {
                for gi in 0..*groups {
                    for i in 0..*n {
                        let base = (gi * n + i) * c;
                        for j in 0..*c {
                            d[base + j] = d[base + j] + g[gi * c + j] * inv;
                        }
                    }
                }
            });
        }
        Op::Reshape(x) => acc(nodes, grads, *x, |d| add_into(d, g)),
        Op::Gather { x, index } => {
            acc(nodes, grads, *x, |d| {
                for (&i, &gv) in index.iter().zip(g) {
                    if i != ZERO_INDEX {
                        d[i] = d[i] + gv;
                    }
                }
            });
        }
        Op::MixRows { x, taps } => {
            let c = out.last_dim();
            acc(nodes, grads, *x, |d| {
                for (r, row_taps) in taps.iter().enumerate() {
                    for &(src, w) in row_taps {
                        for j in 0..c {
                            d[src * c + j] = d[src * c + j] + w * g[r * c + j];
                        }
                    }
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = val(p).len();
                acc(nodes, grads, p, |d| add_into(d, &g[off..off + len]));
                off += len;
            }
        }
        Op::L1 { pred, target } => {
            let vp = val(*pred);
            let scale = g[0] / T::from_usize(target.len().max(1)).unwrap();
            acc(nodes, grads, *pred, |d| {
                for i in 0..d.len() {
                    let diff = vp.data()[i] - target[i];
                    let s = if diff > T::zero() {
                        T::one()
                    } else if diff < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    d[i] = d[i] + s * scale;
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let c = val(*logits).last_dim();
            let scale = g[0] / T::from_usize(targets.len().max(1)).unwrap();
            acc(nodes, grads, *logits, |d| {
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        d[r * c + j] = d[r * c + j] + (probs[r * c + j] - onehot) * scale;
                    }
                }
            });
        }
        Op::Focal {
            logits,
            targets,
            alpha,
            gamma,
        } => {
            let vl = val(*logits);
            acc(nodes, grads, *logits, |d| {
                for i in 0..d.len() {
                    d[i] = d[i] + g[0] * focal_grad(vl.data()[i], targets[i], *alpha, *gamma);
                }
            });
        }
    }
}

fn add_into<T: Scalar>(d: &mut [T], g: &[T]) {
    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn logit<T: Scalar>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

/// `ln(1 + e^x)` without overflow.
fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn gelu_consts<T: Scalar>() -> (T, T) {
    (
        T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt()),
        T::from_f64_lossy(0.044715),
    )
}

pub fn gelu<T: Scalar>(x: T) -> T {
    let (k, a) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (k * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (k, a) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = k * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * a * x * x)
}

fn focal_term<T: Scalar>(x: T, t: T, alpha: T, gamma: T) -> T {
    let p = sigmoid(x);
    let log_p = -softplus(-x);
    let log_q = -softplus(x);
    let pos = -alpha * (T::one() - p).powf(gamma) * log_p;
    let neg = -(T::one() - alpha) * p.powf(gamma) * log_q;
    t * pos + (T::one() - t) * neg
}

fn focal_grad<T: Scalar>(x: T, t: T, alpha: T, gamma: T) -> T {
    let p = sigmoid(x);
    let q = T::one() - p;
    let log_p = -softplus(-x);
    let log_q = -softplus(x);
    let pos = alpha * q.powf(gamma) * (gamma * p * log_p - q);
    let neg = (T::one() - alpha) * p.powf(gamma) * (p - gamma * q * log_q);
    t * pos + (T::one() - t) * neg
}

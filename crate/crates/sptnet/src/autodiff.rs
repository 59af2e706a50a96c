//! Reverse-mode automatic differentiation over dynamic-dimension arrays.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and a closure producing the gradients of that node's parents. Calling
//! [`backward`] on a scalar node walks the tape in reverse creation order and
//! accumulates gradients for every node on the path.
//!
//! The scalar type is generic so the same model and loss code runs at `f32`
//! for training and at `f64` for finite-difference oracles.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};

use std::cell::RefCell;
use std::rc::Rc;

/// Floating-point element type usable on the tape.
pub trait Scalar: ndarray::NdFloat {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

type BackFn<F> = Box<dyn Fn(&ArrayD<F>) -> Vec<ArrayD<F>>>;

struct Node<F: Scalar> {
    value: ArrayD<F>,
    parents: Vec<usize>,
    back: Option<BackFn<F>>,
}

/// Computation tape. Cheap to clone (shared handle).
pub struct Graph<F: Scalar> {
    nodes: Rc<RefCell<Vec<Node<F>>>>,
}

impl<F: Scalar> Clone for Graph<F> {
    fn clone(&self) -> Self {
        Graph {
            nodes: Rc::clone(&self.nodes),
        }
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on the tape.
pub struct Var<F: Scalar> {
    graph: Graph<F>,
    id: usize,
}

impl<F: Scalar> Clone for Var<F> {
    fn clone(&self) -> Self {
        Var {
            graph: self.graph.clone(),
            id: self.id,
        }
    }
}

impl<F: Scalar> std::fmt::Debug for Var<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by [`backward`], indexed by node.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss w.r.t. `v`. Exactly zero when no path exists.
    pub fn get(&self, v: &Var<F>) -> ArrayD<F> {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(&self.shapes[v.id])),
        }
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    fn push(&self, value: ArrayD<F>, parents: Vec<usize>, back: Option<BackFn<F>>) -> Var<F> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            back,
        });
        Var {
            graph: self.clone(),
            id,
        }
    }

    /// Leaf node whose gradient can be queried after `backward`.
    pub fn input(&self, value: ArrayD<F>) -> Var<F> {
        self.push(value, vec![], None)
    }

    /// Leaf node that never receives gradient (same mechanics as `input`;
    /// the name records intent at call sites).
    pub fn constant(&self, value: ArrayD<F>) -> Var<F> {
        self.push(value, vec![], None)
    }

    pub fn scalar(&self, value: F) -> Var<F> {
        self.push(
            ArrayD::from_elem(IxDyn(&[]), value),
            vec![],
            None,
        )
    }

    /// Append an operation with a caller-supplied backward closure. The
    /// closure receives the output gradient and must return one gradient per
    /// parent, in order.
    pub fn custom(
        &self,
        value: ArrayD<F>,
        parents: &[&Var<F>],
        back: impl Fn(&ArrayD<F>) -> Vec<ArrayD<F>> + 'static,
    ) -> Var<F> {
        let ids = parents.iter().map(|p| p.id).collect();
        self.push(value, ids, Some(Box::new(back)))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Run reverse accumulation from a scalar node.
pub fn backward<F: Scalar>(loss: &Var<F>) -> Gradients<F> {
    let nodes = loss.graph.nodes.borrow();
    assert_eq!(
        nodes[loss.id].value.len(),
        1,
        "backward requires a scalar node"
    );
    let mut grads: Vec<Option<ArrayD<F>>> = (0..nodes.len()).map(|_| None).collect();
    let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
    grads[loss.id] = Some(ArrayD::from_elem(nodes[loss.id].value.raw_dim(), F::one()));
    for id in (0..=loss.id).rev() {
        if grads[id].is_none() {
            continue;
        }
        let node = &nodes[id];
        let Some(back) = &node.back else { continue };
        let gout = grads[id].take().unwrap();
        let contribs = back(&gout);
        grads[id] = Some(gout);
        debug_assert_eq!(contribs.len(), node.parents.len());
        for (p, c) in node.parents.iter().zip(contribs) {
            debug_assert_eq!(c.shape(), shapes[*p].as_slice(), "gradient shape mismatch");
            match &mut grads[*p] {
                Some(acc) => *acc += &c,
                slot => *slot = Some(c),
            }
        }
    }
    Gradients { grads, shapes }
}

fn as2<F: Scalar>(a: &ArrayD<F>) -> Array2<F> {
    a.view().into_dimensionality::<Ix2>().unwrap().to_owned()
}

fn as1<F: Scalar>(a: &ArrayD<F>) -> Array1<F> {
    a.view().into_dimensionality::<Ix1>().unwrap().to_owned()
}

impl<F: Scalar> Var<F> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &Graph<F> {
        &self.graph
    }

    pub fn value(&self) -> ArrayD<F> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Value of a 0-d (scalar) node.
    pub fn scalar_value(&self) -> F {
        let nodes = self.graph.nodes.borrow();
        let v = &nodes[self.id].value;
        assert_eq!(v.len(), 1, "not a scalar node");
        *v.iter().next().unwrap()
    }

    fn unary(&self, value: ArrayD<F>, back: BackFn<F>) -> Var<F> {
        self.graph.push(value, vec![self.id], Some(back))
    }

    fn binary(&self, other: &Var<F>, value: ArrayD<F>, back: BackFn<F>) -> Var<F> {
        self.graph
            .push(value, vec![self.id, other.id], Some(back))
    }

    /// New leaf with the same value; gradient does not flow through.
    pub fn detach(&self) -> Var<F> {
        self.graph.push(self.value(), vec![], None)
    }

    pub fn add(&self, other: &Var<F>) -> Var<F> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        self.binary(other, &a + &b, Box::new(|g| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&self, other: &Var<F>) -> Var<F> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        self.binary(
            other,
            &a - &b,
            Box::new(|g| vec![g.clone(), g.mapv(|x| -x)]),
        )
    }

    pub fn mul(&self, other: &Var<F>) -> Var<F> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let (ac, bc) = (a.clone(), b.clone());
        self.binary(
            other,
            &a * &b,
            Box::new(move |g| vec![g * &bc, g * &ac]),
        )
    }

    pub fn neg(&self) -> Var<F> {
        self.unary(self.value().mapv(|x| -x), Box::new(|g| vec![g.mapv(|x| -x)]))
    }

    pub fn add_scalar(&self, s: F) -> Var<F> {
        self.unary(self.value().mapv(|x| x + s), Box::new(|g| vec![g.clone()]))
    }

    pub fn mul_scalar(&self, s: F) -> Var<F> {
        self.unary(self.value().mapv(|x| x * s), Box::new(move |g| vec![g.mapv(|x| x * s)]))
    }

    /// Elementwise multiply by a constant array (no gradient to the constant).
    pub fn mul_const(&self, c: &ArrayD<F>) -> Var<F> {
        let a = self.value();
        assert_eq!(a.shape(), c.shape(), "mul_const: shape mismatch");
        let cc = c.clone();
        self.unary(&a * c, Box::new(move |g| vec![g * &cc]))
    }

    /// Elementwise add of a constant array (no gradient to the constant).
    pub fn add_const(&self, c: &ArrayD<F>) -> Var<F> {
        let a = self.value();
        assert_eq!(a.shape(), c.shape(), "add_const: shape mismatch");
        self.unary(&a + c, Box::new(|g| vec![g.clone()]))
    }

    /// `(R,C) - (R,)` with the vector broadcast over columns.
    pub fn sub_per_row(&self, v: &Var<F>) -> Var<F> {
        let a = as2(&self.value());
        let b = as1(&v.value());
        assert_eq!(a.nrows(), b.len(), "sub_per_row: row count mismatch");
        let y = &a - &b.view().insert_axis(Axis(1));
        self.binary(
            v,
            y.into_dyn(),
            Box::new(move |g| {
                let g2 = as2(g);
                vec![g.clone(), g2.sum_axis(Axis(1)).mapv(|x| -x).into_dyn()]
            }),
        )
    }

    pub fn exp(&self) -> Var<F> {
        let y = self.value().mapv(|x| x.exp());
        let yc = y.clone();
        self.unary(y, Box::new(move |g| vec![g * &yc]))
    }

    pub fn ln(&self) -> Var<F> {
        let a = self.value();
        let ac = a.clone();
        self.unary(a.mapv(|x| x.ln()), Box::new(move |g| vec![g / &ac]))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&self) -> Var<F> {
        let a = self.value();
        let c0 = F::from_f64(0.044715);
        let c1 = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let half = F::from_f64(0.5);
        let y = a.mapv(|x| {
            let u = c1 * (x + c0 * x * x * x);
            half * x * (F::one() + u.tanh())
        });
        let ac = a.clone();
        self.unary(
            y,
            Box::new(move |g| {
                let d = ac.mapv(|x| {
                    let u = c1 * (x + c0 * x * x * x);
                    let t = u.tanh();
                    let du = c1 * (F::one() + F::from_f64(3.0) * c0 * x * x);
                    half * (F::one() + t) + half * x * (F::one() - t * t) * du
                });
                vec![g * &d]
            }),
        )
    }

    /// `(R,C) + (C,)` with the bias broadcast over rows.
    pub fn add_bias(&self, bias: &Var<F>) -> Var<F> {
        let a = as2(&self.value());
        let b = as1(&bias.value());
        assert_eq!(a.ncols(), b.len(), "add_bias: width mismatch");
        let y = &a + &b.view().insert_axis(Axis(0));
        self.binary(
            bias,
            y.into_dyn(),
            Box::new(move |g| {
                let g2 = as2(g);
                vec![g.clone(), g2.sum_axis(Axis(0)).into_dyn()]
            }),
        )
    }

    pub fn matmul(&self, other: &Var<F>) -> Var<F> {
        let a = as2(&self.value());
        let b = as2(&other.value());
        assert_eq!(a.ncols(), b.nrows(), "matmul: inner dim mismatch");
        let y = a.dot(&b);
        self.binary(
            other,
            y.into_dyn(),
            Box::new(move |g| {
                let g2 = as2(g);
                vec![
                    g2.dot(&b.t()).into_dyn(),
                    a.t().dot(&g2).into_dyn(),
                ]
            }),
        )
    }

    /// `(N,M,K) x (N,K,P) -> (N,M,P)`, matmul per leading slice.
    pub fn batch_matmul(&self, other: &Var<F>) -> Var<F> {
        let a = self
            .value()
            .into_dimensionality::<Ix3>()
            .expect("batch_matmul: lhs must be 3-d");
        let b = other
            .value()
            .into_dimensionality::<Ix3>()
            .expect("batch_matmul: rhs must be 3-d");
        let (n, m, k) = a.dim();
        let (n2, k2, p) = b.dim();
        assert!(n == n2 && k == k2, "batch_matmul: shape mismatch");
        let mut y = ndarray::Array3::<F>::zeros((n, m, p));
        for i in 0..n {
            let yi = a.index_axis(Axis(0), i).dot(&b.index_axis(Axis(0), i));
            y.index_axis_mut(Axis(0), i).assign(&yi);
        }
        self.binary(
            other,
            y.into_dyn(),
            Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut da = ndarray::Array3::<F>::zeros((n, m, k));
                let mut db = ndarray::Array3::<F>::zeros((n, k, p));
                for i in 0..n {
                    let gi = g3.index_axis(Axis(0), i);
                    let ai = a.index_axis(Axis(0), i);
                    let bi = b.index_axis(Axis(0), i);
                    da.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                    db.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                }
                vec![da.into_dyn(), db.into_dyn()]
            }),
        )
    }

    pub fn permute_axes(&self, perm: &[usize]) -> Var<F> {
        let a = self.value();
        assert_eq!(perm.len(), a.ndim(), "permute_axes: rank mismatch");
        let y = a.view().permuted_axes(perm).as_standard_layout().to_owned();
        let mut inv = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        self.unary(
            y,
            Box::new(move |g| {
                vec![g.view().permuted_axes(&inv[..]).as_standard_layout().to_owned()]
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<F> {
        let a = self.value();
        let orig: Vec<usize> = a.shape().to_vec();
        let y = a
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.unary(
            y,
            Box::new(move |g| {
                vec![g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&orig))
                    .unwrap()]
            }),
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Var<F> {
        let a = self.value();
        assert!(start + len <= a.shape()[axis], "slice_axis: out of range");
        let y = a
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        let full: Vec<usize> = a.shape().to_vec();
        self.unary(
            y,
            Box::new(move |g| {
                let mut dz = ArrayD::<F>::zeros(IxDyn(&full));
                dz.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(g);
                vec![dz]
            }),
        )
    }

    /// Gather rows of a 2-d array; indices may repeat.
    pub fn select_rows(&self, indices: &[usize]) -> Var<F> {
        let a = as2(&self.value());
        let idx = indices.to_vec();
        let mut y = Array2::<F>::zeros((idx.len(), a.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            y.row_mut(i).assign(&a.row(r));
        }
        let (rows, cols) = a.dim();
        self.unary(
            y.into_dyn(),
            Box::new(move |g| {
                let g2 = as2(g);
                let mut da = Array2::<F>::zeros((rows, cols));
                for (i, &r) in idx.iter().enumerate() {
                    let mut dst = da.row_mut(r);
                    dst += &g2.row(i);
                }
                vec![da.into_dyn()]
            }),
        )
    }

    /// Repeat a `(..)`-shaped array `n` times along a new leading axis.
    pub fn broadcast_axis0(&self, n: usize) -> Var<F> {
        let a = self.value();
        let mut shape = vec![n];
        shape.extend_from_slice(a.shape());
        let y = a
            .view()
            .insert_axis(Axis(0))
            .broadcast(IxDyn(&shape))
            .unwrap()
            .to_owned();
        self.unary(
            y,
            Box::new(move |g| vec![g.sum_axis(Axis(0))]),
        )
    }

    pub fn sum_all(&self) -> Var<F> {
        let a = self.value();
        let shape: Vec<usize> = a.shape().to_vec();
        let y = ArrayD::from_elem(IxDyn(&[]), a.sum());
        self.unary(
            y,
            Box::new(move |g| {
                let gv = *g.iter().next().unwrap();
                vec![ArrayD::from_elem(IxDyn(&shape), gv)]
            }),
        )
    }

    pub fn mean_all(&self) -> Var<F> {
        let n = self.value().len();
        self.sum_all().mul_scalar(F::one() / F::from_f64(n as f64))
    }

    /// Row sums of a 2-d array: `(R,C) -> (R,)`.
    pub fn sum_axis1(&self) -> Var<F> {
        let a = as2(&self.value());
        let (rows, cols) = a.dim();
        let y = a.sum_axis(Axis(1));
        self.unary(
            y.into_dyn(),
            Box::new(move |g| {
                let g1 = as1(g);
                let mut da = Array2::<F>::zeros((rows, cols));
                for i in 0..rows {
                    da.row_mut(i).fill(g1[i]);
                }
                vec![da.into_dyn()]
            }),
        )
    }

    /// Column means of a 2-d array: `(R,C) -> (C,)`.
    pub fn mean_axis0(&self) -> Var<F> {
        let a = as2(&self.value());
        let (rows, cols) = a.dim();
        let scale = F::one() / F::from_f64(rows as f64);
        let y = a.sum_axis(Axis(0)).mapv(|x| x * scale);
        self.unary(
            y.into_dyn(),
            Box::new(move |g| {
                let g1 = as1(g);
                let mut da = Array2::<F>::zeros((rows, cols));
                for mut row in da.rows_mut() {
                    row.assign(&g1.mapv(|x| x * scale));
                }
                vec![da.into_dyn()]
            }),
        )
    }

    /// Row-wise softmax of a 2-d array.
    pub fn softmax_rows(&self) -> Var<F> {
        let a = as2(&self.value());
        let y = softmax2(&a);
        let yc = y.clone();
        self.unary(
            y.into_dyn(),
            Box::new(move |g| {
                let g2 = as2(g);
                let mut da = Array2::<F>::zeros(yc.dim());
                for i in 0..yc.nrows() {
                    let yi = yc.row(i);
                    let gi = g2.row(i);
                    let dot = yi.dot(&gi);
                    let mut d = da.row_mut(i);
                    d.assign(&(&yi * &(&gi - dot)));
                }
                vec![da.into_dyn()]
            }),
        )
    }

    /// Row-wise log-sum-exp of a 2-d array: `(R,C) -> (R,)`.
    pub fn logsumexp_rows(&self) -> Var<F> {
        let a = as2(&self.value());
        let soft = softmax2(&a);
        let y: Array1<F> = a
            .rows()
            .into_iter()
            .map(|row| {
                let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
                let s = row.iter().map(|&x| (x - m).exp()).fold(F::zero(), |u, v| u + v);
                m + s.ln()
            })
            .collect();
        self.unary(
            y.into_dyn(),
            Box::new(move |g| {
                let g1 = as1(g);
                let mut da = Array2::<F>::zeros(soft.dim());
                for i in 0..soft.nrows() {
                    let mut d = da.row_mut(i);
                    d.assign(&soft.row(i).mapv(|x| x * g1[i]));
                }
                vec![da.into_dyn()]
            }),
        )
    }

    /// Per-row entry pick of a 2-d array: `out[i] = a[i, cols[i]]`.
    pub fn gather_cols(&self, cols: &[usize]) -> Var<F> {
        let a = as2(&self.value());
        assert_eq!(a.nrows(), cols.len(), "gather_cols: row count mismatch");
        let idx = cols.to_vec();
        let y: Array1<F> = idx.iter().enumerate().map(|(i, &c)| a[[i, c]]).collect();
        let dim = a.dim();
        self.unary(
            y.into_dyn(),
            Box::new(move |g| {
                let g1 = as1(g);
                let mut da = Array2::<F>::zeros(dim);
                for (i, &c) in idx.iter().enumerate() {
                    da[[i, c]] += g1[i];
                }
                vec![da.into_dyn()]
            }),
        )
    }

    /// Dot with a constant weight vector: `(R,) -> scalar`.
    pub fn dot_const(&self, w: &Array1<F>) -> Var<F> {
        let a = as1(&self.value());
        assert_eq!(a.len(), w.len(), "dot_const: length mismatch");
        let wc = w.clone();
        let y = ArrayD::from_elem(IxDyn(&[]), a.dot(w));
        self.unary(
            y,
            Box::new(move |g| {
                let gv = *g.iter().next().unwrap();
                vec![wc.mapv(|x| x * gv).into_dyn()]
            }),
        )
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layernorm_rows(&self, gamma: &Var<F>, beta: &Var<F>, eps: F) -> Var<F> {
        let a = as2(&self.value());
        let g_ = as1(&gamma.value());
        let b_ = as1(&beta.value());
        let (rows, cols) = a.dim();
        assert!(g_.len() == cols && b_.len() == cols, "layernorm: width mismatch");
        let mut xhat = Array2::<F>::zeros((rows, cols));
        let mut inv_std = Array1::<F>::zeros(rows);
        let ncols = F::from_f64(cols as f64);
        for i in 0..rows {
            let row = a.row(i);
            let mu = row.sum() / ncols;
            let var = row.iter().map(|&x| (x - mu) * (x - mu)).fold(F::zero(), |u, v| u + v) / ncols;
            let inv = F::one() / (var + eps).sqrt();
            inv_std[i] = inv;
            let mut xh = xhat.row_mut(i);
            xh.assign(&row.mapv(|x| (x - mu) * inv));
        }
        let y = &xhat * &g_.view().insert_axis(Axis(0)) + &b_.view().insert_axis(Axis(0));
        let gc = g_.clone();
        let xhc = xhat.clone();
        self.graph.push(
            y.into_dyn(),
            vec![self.id, gamma.id, beta.id],
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let dbeta = g2.sum_axis(Axis(0));
                let dgamma = (&g2 * &xhc).sum_axis(Axis(0));
                let mut da = Array2::<F>::zeros((rows, cols));
                for i in 0..rows {
                    let gy = &g2.row(i) * &gc;
                    let m1 = gy.sum() / ncols;
                    let m2 = (&gy * &xhc.row(i)).sum() / ncols;
                    let xh = xhc.row(i);
                    let mut d = da.row_mut(i);
                    for j in 0..cols {
                        d[j] = inv_std[i] * (gy[j] - m1 - xh[j] * m2);
                    }
                }
                vec![da.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]
            })),
        )
    }

    /// Row-wise l2 normalization; rows with norm below `eps` are scaled by `1/eps`.
    pub fn l2_normalize_rows(&self, eps: F) -> Var<F> {
        let a = as2(&self.value());
        let (rows, cols) = a.dim();
        let mut y = Array2::<F>::zeros((rows, cols));
        let mut denom = Array1::<F>::zeros(rows);
        let mut clipped = vec![false; rows];
        for i in 0..rows {
            let n = a.row(i).iter().map(|&x| x * x).fold(F::zero(), |u, v| u + v).sqrt();
            let d = if n < eps {
                clipped[i] = true;
                eps
            } else {
                n
            };
            denom[i] = d;
            let mut yr = y.row_mut(i);
            yr.assign(&a.row(i).mapv(|x| x / d));
        }
        let yc = y.clone();
        self.unary(
            y.into_dyn(),
            Box::new(move |g| {
                let g2 = as2(g);
                let mut da = Array2::<F>::zeros((rows, cols));
                for i in 0..rows {
                    let gi = g2.row(i);
                    let mut d = da.row_mut(i);
                    if clipped[i] {
                        d.assign(&gi.mapv(|x| x / denom[i]));
                    } else {
                        let yi = yc.row(i);
                        let dot = yi.dot(&gi);
                        d.assign(&((&gi - &yi.mapv(|x| x * dot)) / denom[i]));
                    }
                }
                vec![da.into_dyn()]
            }),
        )
    }

    /// Concatenate along `axis`. All inputs must agree on the other axes.
    pub fn concat_axis(axis: usize, parts: &[&Var<F>]) -> Var<F> {
        assert!(!parts.is_empty());
        let graph = parts[0].graph.clone();
        let values: Vec<ArrayD<F>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let y = ndarray::concatenate(Axis(axis), &views).expect("concat_axis: shape mismatch");
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        graph.push(
            y,
            ids,
            Some(Box::new(move |g| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut start = 0usize;
                for &s in &sizes {
                    out.push(
                        g.slice_axis(Axis(axis), ndarray::Slice::from(start..start + s))
                            .to_owned(),
                    );
                    start += s;
                }
                out
            })),
        )
    }
}

// Denominator accumulated at f64 so that f32 rows still sum to 1 within 1e-6.
fn softmax2<F: Scalar>(a: &Array2<F>) -> Array2<F> {
    let mut y = Array2::<F>::zeros(a.dim());
    for (i, row) in a.rows().into_iter().enumerate() {
        let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut s = 0.0f64;
        for (j, &x) in row.iter().enumerate() {
            let e = (x - m).exp();
            y[[i, j]] = e;
            s += e.to_f64();
        }
        let mut yr = y.row_mut(i);
        yr.mapv_inplace(|x| F::from_f64(x.to_f64() / s));
    }
    y
}

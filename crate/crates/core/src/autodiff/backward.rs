use super::{
    gelu_derivative, permute_data, Graph, GraphError, NodeId, Op, ParamSet, Phase, Result,
};
use crate::tensor::{Scalar, Tensor};

/// Which leaves receive gradient during a backward sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardMode {
    /// Gradients for every node that depends on a parameter.
    Full,
    /// Skip parameter leaves; intermediate activations still get gradients.
    /// Used when only activation gradients are read (relevance maps).
    ActivationsOnly,
}

/// Per-node gradients from one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, contribution: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&contribution),
        slot @ None => *slot = Some(contribution),
    }
}

impl<T: Scalar> Graph<T> {
    /// Gradients of a scalar `root` with respect to every node.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        let shape = self.shape(root);
        if self.value(root).len() != 1 {
            return Err(GraphError::NotScalar(shape.to_vec()));
        }
        let seed = Tensor::full(shape, T::one());
        self.backward_with_seed(root, seed, BackwardMode::Full)
    }

    /// Vector-Jacobian product seeded with `seed` (same shape as `root`).
    pub fn backward_with_seed(
        &self,
        root: NodeId,
        seed: Tensor<T>,
        mode: BackwardMode,
    ) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(root) {
            return Err(GraphError::Shape {
                op: "backward",
                node: root.0,
                detail: format!("seed {:?} for root {:?}", seed.shape(), self.shape(root)),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !g.all_finite() {
                return Err(GraphError::NonFinite {
                    op: self.nodes[idx].op.name(),
                    node: idx,
                    phase: Phase::Backward,
                });
            }
            if self.nodes[idx].needs_grad {
                self.propagate(idx, &g, &mut grads, mode)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradient per registered parameter; all-zero for parameters the root
    /// does not depend on.
    pub fn param_grads(&self, grads: &Gradients<T>) -> ParamSet<T> {
        self.params()
            .iter()
            .map(|(name, &id)| {
                let g = grads
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(id)));
                (name.clone(), g)
            })
            .collect()
    }

    fn wants(&self, id: NodeId, mode: BackwardMode) -> bool {
        let node = &self.nodes[id.0];
        node.needs_grad && !(mode == BackwardMode::ActivationsOnly && matches!(node.op, Op::Param))
    }

    fn propagate(
        &self,
        idx: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        mode: BackwardMode,
    ) -> Result<()> {
        let node = &self.nodes[idx];
        let gv = g.data();
        match &node.op {
            Op::Input | Op::Param => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.wants(a, mode) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gv,
                        (n as isize, 1),
                        self.value(b).data(),
                        (1, n as isize),
                        T::zero(),
                        &mut da,
                        (k as isize, 1),
                    );
                    accumulate(grads, a, Tensor::new(vec![m, k], da)?);
                }
                if self.wants(b, mode) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.value(a).data(),
                        (1, k as isize),
                        gv,
                        (n as isize, 1),
                        T::zero(),
                        &mut db,
                        (n as isize, 1),
                    );
                    accumulate(grads, b, Tensor::new(vec![k, n], db)?);
                }
            }
            &Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(a);
                let (groups, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a, mode) {
                    let bt_strides = if trans_b {
                        (k as isize, 1)
                    } else {
                        (1, n as isize)
                    };
                    let mut da = vec![T::zero(); groups * m * k];
                    for grp in 0..groups {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &gv[grp * m * n..(grp + 1) * m * n],
                            (n as isize, 1),
                            &bv[grp * k * n..(grp + 1) * k * n],
                            bt_strides,
                            T::zero(),
                            &mut da[grp * m * k..(grp + 1) * m * k],
                            (k as isize, 1),
                        );
                    }
                    accumulate(grads, a, Tensor::new(vec![groups, m, k], da)?);
                }
                if self.wants(b, mode) {
                    let mut db = vec![T::zero(); groups * k * n];
                    for grp in 0..groups {
                        let a_g = &av[grp * m * k..(grp + 1) * m * k];
                        let g_g = &gv[grp * m * n..(grp + 1) * m * n];
                        let out = &mut db[grp * k * n..(grp + 1) * k * n];
                        if trans_b {
                            // stored [n, k]: g^T a
                            T::gemm(
                                n,
                                m,
                                k,
                                T::one(),
                                g_g,
                                (1, n as isize),
                                a_g,
                                (k as isize, 1),
                                T::zero(),
                                out,
                                (k as isize, 1),
                            );
                        } else {
                            T::gemm(
                                k,
                                m,
                                n,
                                T::one(),
                                a_g,
                                (1, k as isize),
                                g_g,
                                (n as isize, 1),
                                T::zero(),
                                out,
                                (n as isize, 1),
                            );
                        }
                    }
                    accumulate(grads, b, Tensor::new(self.shape(b).to_vec(), db)?);
                }
            }
            &Op::Add(a, b) => {
                if self.wants(a, mode) {
                    accumulate(grads, a, g.clone());
                }
                if self.wants(b, mode) {
                    accumulate(grads, b, g.clone());
                }
            }
            &Op::AddBias(a, bias) => {
                if self.wants(a, mode) {
                    accumulate(grads, a, g.clone());
                }
                if self.wants(bias, mode) {
                    let width = self.value(bias).len();
                    let mut db = vec![T::zero(); width];
                    for block in gv.chunks(width) {
                        for (d, &v) in db.iter_mut().zip(block) {
                            *d = *d + v;
                        }
                    }
                    accumulate(grads, bias, Tensor::new(self.shape(bias).to_vec(), db)?);
                }
            }
            &Op::Mul(a, b) => {
                for (target, other) in [(a, b), (b, a)] {
                    if self.wants(target, mode) {
                        let d = gv
                            .iter()
                            .zip(self.value(other).data())
                            .map(|(&x, &y)| x * y)
                            .collect();
                        accumulate(grads, target, Tensor::new(g.shape().to_vec(), d)?);
                    }
                }
            }
            &Op::Scale(a, c) => {
                if self.wants(a, mode) {
                    let d = gv.iter().map(|&x| x * c).collect();
                    accumulate(grads, a, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            &Op::Gelu(a) => {
                if self.wants(a, mode) {
                    let d = gv
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(&dy, &x)| dy * gelu_derivative(x))
                        .collect();
                    accumulate(grads, a, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            &Op::Softmax(a) => {
                if self.wants(a, mode) {
                    let width = *g.shape().last().unwrap();
                    let y = node.value.data();
                    let mut d = vec![T::zero(); y.len()];
                    for ((yr, gr), dr) in y
                        .chunks(width)
                        .zip(gv.chunks(width))
                        .zip(d.chunks_mut(width))
                    {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..width {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(grads, a, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let width = self.value(*gain).len();
                let gain_v = self.value(*gain).data();
                if self.wants(*gain, mode) || self.wants(*bias, mode) {
                    let mut dg = vec![T::zero(); width];
                    let mut db = vec![T::zero(); width];
                    for (gr, xr) in gv.chunks(width).zip(xhat.chunks(width)) {
                        for j in 0..width {
                            dg[j] = dg[j] + gr[j] * xr[j];
                            db[j] = db[j] + gr[j];
                        }
                    }
                    if self.wants(*gain, mode) {
                        accumulate(grads, *gain, Tensor::new(vec![width], dg)?);
                    }
                    if self.wants(*bias, mode) {
                        accumulate(grads, *bias, Tensor::new(vec![width], db)?);
                    }
                }
                if self.wants(*x, mode) {
                    let n = T::from_usize(width).unwrap();
                    let mut dx = vec![T::zero(); gv.len()];
                    let mut dxhat = vec![T::zero(); width];
                    for (((gr, xr), dr), &r) in gv
                        .chunks(width)
                        .zip(xhat.chunks(width))
                        .zip(dx.chunks_mut(width))
                        .zip(rstd)
                    {
                        for j in 0..width {
                            dxhat[j] = gr[j] * gain_v[j];
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() / n;
                        let mean_dx = dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for j in 0..width {
                            dr[j] = r * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
                }
            }
            &Op::Reshape(a) => {
                if self.wants(a, mode) {
                    accumulate(grads, a, g.clone().reshape(self.shape(a))?);
                }
            }
            Op::Permute(a, perm) => {
                if self.wants(*a, mode) {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let d = permute_data(gv, g.shape(), &inverse);
                    accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), d)?);
                }
            }
            &Op::PrependRow(x, row) => {
                let sx = self.shape(x);
                let (n, d) = (sx[1], sx[2]);
                if self.wants(x, mode) {
                    let dx = gv
                        .chunks((n + 1) * d)
                        .flat_map(|item| item[d..].iter().copied())
                        .collect();
                    accumulate(grads, x, Tensor::new(sx.to_vec(), dx)?);
                }
                if self.wants(row, mode) {
                    let mut dr = vec![T::zero(); d];
                    for item in gv.chunks((n + 1) * d) {
                        for (acc, &v) in dr.iter_mut().zip(&item[..d]) {
                            *acc = *acc + v;
                        }
                    }
                    accumulate(grads, row, Tensor::new(vec![d], dr)?);
                }
            }
            &Op::SelectRow(x, index) => {
                if self.wants(x, mode) {
                    let sx = self.shape(x);
                    let (n, d) = (sx[1], sx[2]);
                    let mut dx = vec![T::zero(); self.value(x).len()];
                    for (item, src) in dx.chunks_mut(n * d).zip(gv.chunks(d)) {
                        item[index * d..(index + 1) * d].copy_from_slice(src);
                    }
                    accumulate(grads, x, Tensor::new(sx.to_vec(), dx)?);
                }
            }
            &Op::SumAll(a) => {
                if self.wants(a, mode) {
                    accumulate(grads, a, Tensor::full(self.shape(a), g.item()));
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.wants(*logits, mode) {
                    let classes = self.shape(*logits)[1];
                    let scale = g.item() / T::from_usize(labels.len()).unwrap();
                    let mut d = probs.clone();
                    for (row, &y) in d.chunks_mut(classes).zip(labels) {
                        row[y] = row[y] - T::one();
                        for v in row.iter_mut() {
                            *v = *v * scale;
                        }
                    }
                    accumulate(
                        grads,
                        *logits,
                        Tensor::new(self.shape(*logits).to_vec(), d)?,
                    );
                }
            }
            &Op::Mse(a, b) => {
                let n = T::from_usize(self.value(a).len()).unwrap();
                let scale = T::from_f64_lossy(2.0) * g.item() / n;
                let diff: Vec<T> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(&x, &y)| (x - y) * scale)
                    .collect();
                if self.wants(b, mode) {
                    let neg = diff.iter().map(|&v| -v).collect();
                    accumulate(grads, b, Tensor::new(self.shape(b).to_vec(), neg)?);
                }
                if self.wants(a, mode) {
                    accumulate(grads, a, Tensor::new(self.shape(a).to_vec(), diff)?);
                }
            }
            Op::KlDiv {
                student,
                target,
                temperature,
                p_student,
                p_target,
            } => {
                let shape = self.shape(*student).to_vec();
                let (batch, classes) = (shape[0], shape[1]);
                // d/dz of (T^2 / B) KL is (T / B) times the softmax-space term
                let scale = *temperature * g.item() / T::from_usize(batch).unwrap();
                if self.wants(*student, mode) {
                    let d = p_student
                        .iter()
                        .zip(p_target)
                        .map(|(&ps, &pt)| (ps - pt) * scale)
                        .collect();
                    accumulate(grads, *student, Tensor::new(shape.clone(), d)?);
                }
                if self.wants(*target, mode) {
                    let mut d = vec![T::zero(); p_target.len()];
                    for ((pt, ps), dr) in p_target
                        .chunks(classes)
                        .zip(p_student.chunks(classes))
                        .zip(d.chunks_mut(classes))
                    {
                        let c: Vec<T> = pt
                            .iter()
                            .zip(ps)
                            .map(|(&a, &b)| {
                                if a > T::zero() {
                                    a.ln() - b.ln()
                                } else {
                                    T::zero()
                                }
                            })
                            .collect();
                        let mean: T = pt.iter().zip(&c).map(|(&a, &b)| a * b).sum();
                        for j in 0..classes {
                            dr[j] = pt[j] * (c[j] - mean) * scale;
                        }
                    }
                    accumulate(grads, *target, Tensor::new(shape, d)?);
                }
            }
        }
        Ok(())
    }
}

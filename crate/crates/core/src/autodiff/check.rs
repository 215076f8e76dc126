use super::{Bindings, Graph, GraphError, NodeId, ParamSet, Result};
use crate::tensor::{Scalar, Tensor};

/// Something that builds a scalar-valued graph from bound parameters.
pub trait Computation<T: Scalar> {
    fn build(&self, g: &mut Graph<T>, params: &Bindings) -> Result<NodeId>;
}

impl<T, F> Computation<T> for F
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &Bindings) -> Result<NodeId>,
{
    fn build(&self, g: &mut Graph<T>, params: &Bindings) -> Result<NodeId> {
        self(g, params)
    }
}

fn scalar_root<T: Scalar>(g: &Graph<T>, root: NodeId) -> Result<T> {
    let v = g.value(root);
    if v.len() != 1 {
        return Err(GraphError::NotScalar(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Loss value and the gradient for every entry of `params` (all-zero for
/// parameters the computation never reads).
pub fn value_and_grad<T, C>(comp: &C, params: &ParamSet<T>) -> Result<(T, ParamSet<T>)>
where
    T: Scalar,
    C: Computation<T> + ?Sized,
{
    let mut g = Graph::new();
    let bound = Bindings::trainable(&mut g, params)?;
    let root = comp.build(&mut g, &bound)?;
    let value = scalar_root(&g, root)?;
    let grads = g.backward(root)?;
    Ok((value, g.param_grads(&grads)))
}

/// Central-difference gradient, one perturbed pair of evaluations per entry.
pub fn finite_diff_grad<T, C>(comp: &C, params: &ParamSet<T>, step: T) -> Result<ParamSet<T>>
where
    T: Scalar,
    C: Computation<T> + ?Sized,
{
    if !(step > T::zero()) {
        return Err(GraphError::BadStep(step.as_f64()));
    }
    let eval = |p: &ParamSet<T>| -> Result<T> {
        let mut g = Graph::new();
        let bound = Bindings::frozen(&mut g, p)?;
        let root = comp.build(&mut g, &bound)?;
        scalar_root(&g, root)
    };
    let two_h = step + step;
    let mut work = params.clone();
    let mut out = ParamSet::new();
    for (name, tensor) in params {
        let mut grad = Vec::with_capacity(tensor.len());
        for i in 0..tensor.len() {
            let orig = tensor.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            grad.push((plus - minus) / two_h);
        }
        out.insert(name.clone(), Tensor::new(tensor.shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over all entries of two
/// gradient sets with identical keys.
pub fn max_relative_error<T: Scalar>(a: &ParamSet<T>, b: &ParamSet<T>, floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for (name, ta) in a {
        let tb = &b[name];
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            let (x, y) = (x.as_f64(), y.as_f64());
            let denom = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

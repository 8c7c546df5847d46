//! Two executors for the same forward code: [`Eager`] evaluates immediately,
//! [`Tape`] additionally records every operation so the whole unrolled
//! computation can be differentiated in reverse.

use std::sync::Arc;

use crate::conv::{relu, relu_backward, ConvLayer};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{DisplacementField, FeatureMap, Real};
use crate::warp::{warp_backward_padded, warp_padded, Padding};

/// Operations the model is written against.
pub trait Graph<T: Real> {
    type Var: Clone;

    fn input(&mut self, value: FeatureMap<T>) -> Self::Var;
    fn value<'a>(&'a self, var: &'a Self::Var) -> &'a FeatureMap<T>;
    fn conv(&mut self, x: &Self::Var, layer: &ConvLayer, params: &ParamStore<T>) -> Result<Self::Var>;
    fn relu(&mut self, x: &Self::Var) -> Self::Var;
    /// `field` must hold a two-channel displacement map.
    fn warp(&mut self, source: &Self::Var, field: &Self::Var, padding: Padding) -> Result<Self::Var>;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn mean(&mut self, xs: &[Self::Var]) -> Result<Self::Var>;
    /// Per-pixel convex combination `a*memory + (1-a)*evidence` where
    /// `a = softmax(memory_score, evidence_score)[0]`.
    fn blend(
        &mut self,
        memory: &Self::Var,
        evidence: &Self::Var,
        memory_score: &Self::Var,
        evidence_score: &Self::Var,
    ) -> Result<Self::Var>;
}

fn as_field<T: Real>(map: &FeatureMap<T>) -> Result<DisplacementField<T>> {
    DisplacementField::from_map(map.clone())
}

/// Memory weight of the two-way softmax, computed stably.
#[inline]
pub(crate) fn memory_weight<T: Real>(memory_score: T, evidence_score: T) -> T {
    let d = memory_score - evidence_score;
    if d >= T::zero() {
        T::one() / (T::one() + (-d).exp())
    } else {
        let e = d.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn blend_forward<T: Real>(
    memory: &FeatureMap<T>,
    evidence: &FeatureMap<T>,
    ms: &FeatureMap<T>,
    es: &FeatureMap<T>,
) -> Result<FeatureMap<T>> {
    memory.check_same_shape(evidence, "blend")?;
    let (h, w, c) = memory.shape();
    for s in [ms, es] {
        if s.shape() != (h, w, 1) {
            return Err(Error::dim("blend score", format!("{:?}", (h, w, 1)), format!("{:?}", s.shape())));
        }
    }
    let mut out = FeatureMap::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let a = memory_weight(ms.get(y, x, 0), es.get(y, x, 0));
            let b = T::one() - a;
            let m = memory.pixel(y, x);
            let e = evidence.pixel(y, x);
            for (o, (&mv, &ev)) in out.pixel_mut(y, x).iter_mut().zip(m.iter().zip(e)) {
                *o = a * mv + b * ev;
            }
        }
    }
    Ok(out)
}

fn mean_backward<T: Real>(upstream: &FeatureMap<T>, n: usize) -> FeatureMap<T> {
    upstream.scale(T::one() / T::from_usize(n).unwrap())
}

/// Immediate evaluation; variables are shared immutable maps.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<T: Real> Graph<T> for Eager {
    type Var = Arc<FeatureMap<T>>;

    fn input(&mut self, value: FeatureMap<T>) -> Self::Var {
        Arc::new(value)
    }

    fn value<'a>(&'a self, var: &'a Self::Var) -> &'a FeatureMap<T> {
        var
    }

    fn conv(&mut self, x: &Self::Var, layer: &ConvLayer, params: &ParamStore<T>) -> Result<Self::Var> {
        Ok(Arc::new(layer.forward(x, params)?))
    }

    fn relu(&mut self, x: &Self::Var) -> Self::Var {
        Arc::new(relu(x))
    }

    fn warp(&mut self, source: &Self::Var, field: &Self::Var, padding: Padding) -> Result<Self::Var> {
        Ok(Arc::new(warp_padded(source, &as_field(field)?, padding)?))
    }

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        Ok(Arc::new(a.add(b)?))
    }

    fn mean(&mut self, xs: &[Self::Var]) -> Result<Self::Var> {
        if xs.len() == 1 {
            return Ok(xs[0].clone());
        }
        let refs: Vec<&FeatureMap<T>> = xs.iter().map(|x| x.as_ref()).collect();
        Ok(Arc::new(FeatureMap::mean_of(&refs)?))
    }

    fn blend(
        &mut self,
        memory: &Self::Var,
        evidence: &Self::Var,
        memory_score: &Self::Var,
        evidence_score: &Self::Var,
    ) -> Result<Self::Var> {
        Ok(Arc::new(blend_forward(memory, evidence, memory_score, evidence_score)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input,
    Conv(ConvLayer),
    Relu,
    Warp(Padding),
    Add,
    Mean,
    Blend,
}

/// One recorded operation with its output value and operand links. Parents
/// always precede the node, so the tape is acyclic and reverse order is a
/// valid topological order.
#[derive(Clone, Debug, PartialEq)]
pub struct TapeNode<T> {
    pub op: Op,
    pub parents: Vec<VarId>,
    pub value: FeatureMap<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Tape<T> {
    nodes: Vec<TapeNode<T>>,
}

/// Result of a reverse sweep.
#[derive(Clone, Debug)]
pub struct Adjoints<T> {
    pub params: ParamStore<T>,
    nodes: Vec<Option<FeatureMap<T>>>,
}

impl<T: Real> Adjoints<T> {
    /// Gradient reaching a variable (e.g. a recorded input), if any did.
    pub fn of(&self, var: VarId) -> Option<&FeatureMap<T>> {
        self.nodes.get(var.0).and_then(|g| g.as_ref())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[TapeNode<T>] {
        &self.nodes
    }

    fn push(&mut self, op: Op, parents: Vec<VarId>, value: FeatureMap<T>) -> VarId {
        debug_assert!(parents.iter().all(|p| p.0 < self.nodes.len()));
        self.nodes.push(TapeNode { op, parents, value });
        VarId(self.nodes.len() - 1)
    }

    /// Propagates `seeds` (gradients of a scalar loss w.r.t. recorded
    /// variables) back through the tape.
    pub fn backward(&self, params: &ParamStore<T>, seeds: &[(VarId, FeatureMap<T>)]) -> Result<Adjoints<T>> {
        let mut grads: Vec<Option<FeatureMap<T>>> = vec![None; self.nodes.len()];
        let mut param_grads = params.zeros_like();
        for (var, g) in seeds {
            let node = self
                .nodes
                .get(var.0)
                .ok_or_else(|| Error::Tape(format!("seed {} beyond tape length {}", var.0, self.nodes.len())))?;
            node.value.check_same_shape(g, "backward seed")?;
            accumulate(&mut grads[var.0], g.clone())?;
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |v: VarId| &self.nodes[v.0].value;
            match &node.op {
                Op::Input => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv(layer) => {
                    let x = node.parents[0];
                    let dx = layer.backward(val(x), &g, params, &mut param_grads)?;
                    accumulate(&mut grads[x.0], dx)?;
                }
                Op::Relu => {
                    let x = node.parents[0];
                    accumulate(&mut grads[x.0], relu_backward(val(x), &g)?)?;
                }
                Op::Warp(padding) => {
                    let (src, fld) = (node.parents[0], node.parents[1]);
                    let wg = warp_backward_padded(val(src), &as_field(val(fld))?, &g, *padding)?;
                    accumulate(&mut grads[src.0], wg.d_source)?;
                    accumulate(&mut grads[fld.0], wg.d_field.into_map())?;
                }
                Op::Add => {
                    accumulate(&mut grads[node.parents[0].0], g.clone())?;
                    accumulate(&mut grads[node.parents[1].0], g)?;
                }
                Op::Mean => {
                    let share = mean_backward(&g, node.parents.len());
                    for p in &node.parents {
                        accumulate(&mut grads[p.0], share.clone())?;
                    }
                }
                Op::Blend => {
                    let [m, e, ms, es] = [0, 1, 2, 3].map(|k| node.parents[k]);
                    let (mv, ev, msv, esv) = (val(m), val(e), val(ms), val(es));
                    let (h, w, _) = mv.shape();
                    let mut dm = mv.zeros_like();
                    let mut de = mv.zeros_like();
                    let mut dms = msv.zeros_like();
                    let mut des = esv.zeros_like();
                    for y in 0..h {
                        for x in 0..w {
                            let a = memory_weight(msv.get(y, x, 0), esv.get(y, x, 0));
                            let b = T::one() - a;
                            let gp = g.pixel(y, x);
                            let mut da = T::zero();
                            for (k, &gk) in gp.iter().enumerate() {
                                let (mk, ek) = (mv.get(y, x, k), ev.get(y, x, k));
                                dm.pixel_mut(y, x)[k] = a * gk;
                                de.pixel_mut(y, x)[k] = b * gk;
                                da += gk * (mk - ek);
                            }
                            let ds = da * a * b;
                            dms.set(y, x, 0, ds);
                            des.set(y, x, 0, -ds);
                        }
                    }
                    accumulate(&mut grads[m.0], dm)?;
                    accumulate(&mut grads[e.0], de)?;
                    accumulate(&mut grads[ms.0], dms)?;
                    accumulate(&mut grads[es.0], des)?;
                }
            }
        }
        Ok(Adjoints {
            params: param_grads,
            nodes: grads,
        })
    }
}

fn accumulate<T: Real>(slot: &mut Option<FeatureMap<T>>, g: FeatureMap<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

impl<T: Real> Graph<T> for Tape<T> {
    type Var = VarId;

    fn input(&mut self, value: FeatureMap<T>) -> VarId {
        self.push(Op::Input, Vec::new(), value)
    }

    fn value<'a>(&'a self, var: &'a VarId) -> &'a FeatureMap<T> {
        &self.nodes[var.0].value
    }

    fn conv(&mut self, x: &VarId, layer: &ConvLayer, params: &ParamStore<T>) -> Result<VarId> {
        let out = layer.forward(&self.nodes[x.0].value, params)?;
        Ok(self.push(Op::Conv(*layer), vec![*x], out))
    }

    fn relu(&mut self, x: &VarId) -> VarId {
        let out = relu(&self.nodes[x.0].value);
        self.push(Op::Relu, vec![*x], out)
    }

    fn warp(&mut self, source: &VarId, field: &VarId, padding: Padding) -> Result<VarId> {
        let f = as_field(&self.nodes[field.0].value)?;
        let out = warp_padded(&self.nodes[source.0].value, &f, padding)?;
        Ok(self.push(Op::Warp(padding), vec![*source, *field], out))
    }

    fn add(&mut self, a: &VarId, b: &VarId) -> Result<VarId> {
        let out = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        Ok(self.push(Op::Add, vec![*a, *b], out))
    }

    fn mean(&mut self, xs: &[VarId]) -> Result<VarId> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        let refs: Vec<&FeatureMap<T>> = xs.iter().map(|x| &self.nodes[x.0].value).collect();
        let out = FeatureMap::mean_of(&refs)?;
        Ok(self.push(Op::Mean, xs.to_vec(), out))
    }

    fn blend(&mut self, memory: &VarId, evidence: &VarId, memory_score: &VarId, evidence_score: &VarId) -> Result<VarId> {
        let v = |x: &VarId| &self.nodes[x.0].value;
        let out = blend_forward(v(memory), v(evidence), v(memory_score), v(evidence_score))?;
        Ok(self.push(Op::Blend, vec![*memory, *evidence, *memory_score, *evidence_score], out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        FeatureMap::from_fn(h, w, c, |_, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    fn dot(a: &FeatureMap<f64>, b: &FeatureMap<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn blend_gradient_matches_finite_differences() {
        let params = ParamStore::<f64>::new();
        let inputs = [map(3, 4, 2, 1), map(3, 4, 2, 2), map(3, 4, 1, 3), map(3, 4, 1, 4)];
        let up = map(3, 4, 2, 5);
        let f = |xs: &[FeatureMap<f64>]| dot(&blend_forward(&xs[0], &xs[1], &xs[2], &xs[3]).unwrap(), &up);
        let mut tape = Tape::new();
        let vars: Vec<VarId> = inputs.iter().map(|x| tape.input(x.clone())).collect();
        let out = tape.blend(&vars[0], &vars[1], &vars[2], &vars[3]).unwrap();
        let adj = tape.backward(&params, &[(out, up.clone())]).unwrap();
        let h = 1e-6;
        for (k, v) in vars.iter().enumerate() {
            let g = adj.of(*v).unwrap();
            for i in 0..inputs[k].data().len() {
                let mut p = inputs.clone();
                p[k].data_mut()[i] += h;
                let mut m = inputs.clone();
                m[k].data_mut()[i] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                assert!((fd - g.data()[i]).abs() < 1e-7, "input {k} coord {i}: {fd} vs {}", g.data()[i]);
            }
        }
    }

    #[test]
    fn fan_out_accumulates() {
        let params = ParamStore::<f64>::new();
        let mut tape = Tape::new();
        let x = tape.input(map(2, 2, 1, 9));
        let y = tape.add(&x, &x).unwrap();
        let z = tape.mean(&[y, x]).unwrap();
        let adj = tape.backward(&params, &[(z, FeatureMap::filled(2, 2, 1, 1.0))]).unwrap();
        // z = (2x + x) / 2
        assert!(adj.of(x).unwrap().data().iter().all(|&g| (g - 1.5).abs() < 1e-15));
    }

    #[test]
    fn zero_seed_gives_zero_gradients() {
        let params = ParamStore::<f64>::new();
        let mut tape = Tape::new();
        let x = tape.input(map(2, 3, 2, 1));
        let f = tape.input(map(2, 3, 2, 2).scale(0.3));
        let y = tape.warp(&x, &f, Padding::Zeros).unwrap();
        let adj = tape.backward(&params, &[(y, FeatureMap::zeros(2, 3, 2))]).unwrap();
        assert!(adj.of(x).unwrap().data().iter().all(|&g| g == 0.0));
        assert!(adj.of(f).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn eager_and_tape_agree() {
        let params = ParamStore::<f64>::new();
        let (a, b) = (map(3, 3, 2, 1), map(3, 3, 2, 2));
        let mut eager = Eager;
        let ea = Graph::<f64>::input(&mut eager, a.clone());
        let eb = Graph::<f64>::input(&mut eager, b.clone());
        let es = eager.add(&ea, &eb).unwrap();
        let em = eager.relu(&es);
        let mut tape = Tape::new();
        let ta = tape.input(a);
        let tb = tape.input(b);
        let ts = tape.add(&ta, &tb).unwrap();
        let tm = tape.relu(&ts);
        assert_eq!(eager.value(&em), tape.value(&tm));
        assert!(tape.backward(&params, &[(VarId(99), FeatureMap::zeros(1, 1, 1))]).is_err());
    }
}

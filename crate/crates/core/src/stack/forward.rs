use super::{merge_coefficients, ExpertFfn, MoteLayer, MoteStack, RoutingDecision, Tau};
use crate::error::{Error, Result};
use crate::tensor::{attention_block, AttentionVars, Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub w_up: Var,
    pub b_up: Var,
    pub w_dn: Var,
    pub b_dn: Var,
}

impl FfnVars {
    fn as_array(&self) -> [Var; 4] {
        [self.w_up, self.b_up, self.w_dn, self.b_dn]
    }

    fn from_array(v: [Var; 4]) -> Self {
        FfnVars {
            w_up: v[0],
            b_up: v[1],
            w_dn: v[2],
            b_dn: v[3],
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub attention: AttentionVars,
    pub ffn_ln_gain: Var,
    pub ffn_ln_bias: Var,
    pub experts: Vec<FfnVars>,
}

/// A [`MoteStack`] registered on a tape. Holds only handles, so the tape can
/// be consumed by `backward` while these are still around.
#[derive(Clone, Debug)]
pub struct StackVars {
    pub pos_emb: Var,
    pub layers: Vec<LayerVars>,
    heads: usize,
    experts: usize,
}

impl MoteStack {
    /// Registers every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> StackVars {
        let reg = |t: &Tensor| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let a = &l.attention;
                LayerVars {
                    attention: AttentionVars {
                        ln_gain: reg(&a.ln_gain),
                        ln_bias: reg(&a.ln_bias),
                        w_q: reg(&a.w_q),
                        w_k: reg(&a.w_k),
                        w_v: reg(&a.w_v),
                        b_q: reg(&a.b_q),
                        b_k: reg(&a.b_k),
                        b_v: reg(&a.b_v),
                        w_out: reg(&a.w_out),
                        b_out: reg(&a.b_out),
                    },
                    ffn_ln_gain: reg(&a.ffn_ln_gain),
                    ffn_ln_bias: reg(&a.ffn_ln_bias),
                    experts: l
                        .experts
                        .iter()
                        .map(|e| FfnVars::from_array(e.tensors().map(reg)))
                        .collect(),
                }
            })
            .collect();
        StackVars {
            pos_emb: reg(&self.pos_emb),
            layers,
            heads: self.dims.heads,
            experts: self.dims.experts,
        }
    }

    /// Gradients of every bound parameter, shaped like the stack itself.
    /// Parameters that received no gradient are zero.
    pub fn collect_grads(&self, vars: &StackVars, grads: &Gradients) -> MoteStack {
        let mut out = self.zeros_like();
        let handles = vars.handles();
        for (slot, v) in out.params_mut().into_iter().zip(handles) {
            if let Some(g) = grads.get(v) {
                *slot = g.clone();
            }
        }
        out
    }

    /// Routed forward on plain tensors (no gradient). `e` is `[T, D]` or `[B, T, D]`.
    pub fn forward_routed(&self, e: &Tensor, decision: &RoutingDecision) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let x = tape.constant(e.clone());
        let out = vars.forward_routed(&tape, x, decision)?;
        let v = tape.value(out).clone();
        Ok(v)
    }

    /// Merged forward on plain tensors (no gradient), one τ for every layer.
    pub fn forward_merged(&self, e: &Tensor, tau: Tau) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let x = tape.constant(e.clone());
        let out = vars.forward_merged(&tape, x, &vec![tau; self.layers.len()])?;
        let v = tape.value(out).clone();
        Ok(v)
    }
}

fn ffn(tape: &Tape, x: Var, gain: Var, bias: Var, p: &FfnVars) -> Result<Var> {
    let h = tape.layer_norm(x, gain, bias)?;
    let up = tape.gelu(tape.add_row(tape.matmul(h, p.w_up)?, p.b_up)?);
    let dn = tape.add_row(tape.matmul(up, p.w_dn)?, p.b_dn)?;
    tape.add(x, dn)
}

/// `Σ cᵢ·θᵢ` on the tape, same accumulation order as [`super::merge_with`].
fn merged_ffn(tape: &Tape, experts: &[FfnVars], coefficients: &[f64]) -> Result<FfnVars> {
    let mut acc: Option<[Var; 4]> = None;
    for (e, &c) in experts.iter().zip(coefficients) {
        let scaled = e.as_array().map(|v| tape.scale(v, c));
        acc = Some(match acc {
            None => scaled,
            Some(a) => [
                tape.add(a[0], scaled[0])?,
                tape.add(a[1], scaled[1])?,
                tape.add(a[2], scaled[2])?,
                tape.add(a[3], scaled[3])?,
            ],
        });
    }
    acc.map(FfnVars::from_array)
        .ok_or_else(|| Error::invalid("merge over zero experts"))
}

impl StackVars {
    /// Parameter handles in [`MoteStack::params`] order.
    pub fn handles(&self) -> Vec<Var> {
        let mut out = vec![self.pos_emb];
        for l in &self.layers {
            let a = &l.attention;
            out.extend([
                a.ln_gain, a.ln_bias, a.w_q, a.w_k, a.w_v, a.b_q, a.b_k, a.b_v, a.w_out, a.b_out,
            ]);
            out.extend([l.ffn_ln_gain, l.ffn_ln_bias]);
            for e in &l.experts {
                out.extend(e.as_array());
            }
        }
        out
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_experts(&self) -> usize {
        self.experts
    }

    /// Runs the layers with the given per-layer FFN handles. Returns the
    /// temporal feature `h(e)`: the residual stream's total change, `[B, T, D]`.
    fn run(&self, tape: &Tape, e: Var, ffns: &[FfnVars]) -> Result<Var> {
        let shape = tape.shape(e);
        let (b, t, d) = match shape[..] {
            [t, d] => (1, t, d),
            [b, t, d] => (b, t, d),
            _ => {
                return Err(Error::Shape {
                    op: "temporal_forward",
                    lhs: shape,
                    rhs: vec![],
                })
            }
        };
        let pos_shape = tape.shape(self.pos_emb);
        if d != pos_shape[1] || t == 0 || t > pos_shape[0] {
            return Err(Error::Shape {
                op: "temporal_forward",
                lhs: shape,
                rhs: pos_shape,
            });
        }
        let flat = tape.reshape(e, &[b * t, d])?;
        let idx: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let pos = tape.gather_rows(self.pos_emb, &idx)?;
        let x0 = tape.add(flat, pos)?;
        let mut x = x0;
        for (layer, f) in self.layers.iter().zip(ffns) {
            x = attention_block(tape, x, &layer.attention, t, self.heads)?;
            x = ffn(tape, x, layer.ffn_ln_gain, layer.ffn_ln_bias, f)?;
        }
        let delta = tape.sub(x, x0)?;
        tape.reshape(delta, &shape)
    }

    /// Forward with one activated expert per layer.
    pub fn forward_routed(&self, tape: &Tape, e: Var, decision: &RoutingDecision) -> Result<Var> {
        decision.check(self.layers.len(), self.experts)?;
        let ffns: Vec<FfnVars> = self
            .layers
            .iter()
            .zip(&decision.experts)
            .map(|(l, &i)| l.experts[i])
            .collect();
        self.run(tape, e, &ffns)
    }

    /// Forward with each layer's experts merged at that layer's τ.
    pub fn forward_merged(&self, tape: &Tape, e: Var, taus: &[Tau]) -> Result<Var> {
        if taus.len() != self.layers.len() {
            return Err(Error::invalid(format!(
                "{} temperatures for {} layers",
                taus.len(),
                self.layers.len()
            )));
        }
        let ffns = self
            .layers
            .iter()
            .zip(taus)
            .map(|(l, &tau)| merged_ffn(tape, &l.experts, &merge_coefficients(l.experts.len(), tau)?))
            .collect::<Result<Vec<_>>>()?;
        self.run(tape, e, &ffns)
    }

    /// Forward with expert `i` active in every layer.
    pub fn forward_expert(&self, tape: &Tape, e: Var, i: usize) -> Result<Var> {
        self.forward_routed(tape, e, &RoutingDecision::uniform(self.layers.len(), i))
    }

    /// `mean_T(e + h(e))`: `[B, T, D]` → `[B, D]` (or `[T, D]` → `[D]`).
    pub fn video_embedding(tape: &Tape, e: Var, temporal: Var) -> Result<Var> {
        let s = tape.add(e, temporal)?;
        let axis = tape.shape(e).len() - 2;
        tape.mean(s, axis)
    }
}

/// `mean over frames of (e + temporal_out)` for `[T, D]` inputs.
pub fn video_embedding(e: &Tensor, temporal_out: &Tensor) -> Result<Tensor> {
    if e.shape() != temporal_out.shape() || e.ndim() != 2 {
        return Err(Error::Shape {
            op: "video_embedding",
            lhs: e.shape().to_vec(),
            rhs: temporal_out.shape().to_vec(),
        });
    }
    let tape = Tape::new();
    let a = tape.constant(e.clone());
    let b = tape.constant(temporal_out.clone());
    let z = StackVars::video_embedding(&tape, a, b)?;
    let v = tape.value(z).clone();
    Ok(v)
}

impl MoteLayer {
    pub fn expert(&self, i: usize) -> Option<&ExpertFfn> {
        self.experts.get(i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stack::{InitPolicy, StackDims};
    use crate::tensor::MacScope;

    fn dims(experts: usize) -> StackDims {
        StackDims {
            dim: 8,
            hidden: 16,
            layers: 2,
            experts,
            heads: 2,
            max_frames: 5,
        }
    }

    fn input(b: usize, t: usize, d: usize) -> Tensor {
        let data = (0..b * t * d).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
        Tensor::new(vec![b, t, d], data).unwrap()
    }

    #[test]
    fn zero_experts_leave_attention_only_path() {
        let mut s = MoteStack::init(dims(3), InitPolicy::Different, 1).unwrap();
        for l in &mut s.layers {
            for e in &mut l.experts {
                *e = ExpertFfn::zeros(8, 16);
            }
        }
        let e = input(2, 4, 8);
        // reference: attention sublayers only
        let tape = Tape::new();
        let v = s.bind(&tape, false);
        let x = tape.constant(e.clone());
        let flat = tape.reshape(x, &[8, 8]).unwrap();
        let idx: Vec<usize> = (0..2).flat_map(|_| 0..4).collect();
        let pos = tape.gather_rows(v.pos_emb, &idx).unwrap();
        let x0 = tape.add(flat, pos).unwrap();
        let mut h = x0;
        for l in &v.layers {
            h = attention_block(&tape, h, &l.attention, 4, 2).unwrap();
        }
        let expected = tape.value(tape.sub(h, x0).unwrap()).clone();
        let got = s.forward_routed(&e, &RoutingDecision { experts: vec![2, 0] }).unwrap();
        assert_eq!(got.data(), expected.data());
    }

    #[test]
    fn routed_cost_does_not_depend_on_expert_count() {
        let e = input(3, 5, 8);
        let mut costs = vec![];
        for n in [1, 4, 8] {
            let s = MoteStack::init(dims(n), InitPolicy::Different, 2).unwrap();
            let scope = MacScope::start();
            s.forward_routed(&e, &RoutingDecision::uniform(2, n - 1)).unwrap();
            costs.push(scope.finish());
        }
        assert!(costs[0] > 0);
        assert!(costs.windows(2).all(|w| w[0] == w[1]), "{costs:?}");
    }

    #[test]
    fn forward_is_deterministic() {
        let a = MoteStack::init(dims(2), InitPolicy::Different, 4).unwrap();
        let b = a.clone();
        let e = input(2, 3, 8);
        let d = RoutingDecision { experts: vec![1, 0] };
        let (x, y) = (a.forward_routed(&e, &d).unwrap(), b.forward_routed(&e, &d).unwrap());
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn merged_equals_routed_for_one_expert() {
        let s = MoteStack::init(dims(1), InitPolicy::Different, 6).unwrap();
        let e = input(1, 4, 8);
        let r = s.forward_routed(&e, &RoutingDecision::uniform(2, 0)).unwrap();
        for tau in [Tau::Infinite, Tau::Finite(0.6), Tau::Finite(-9.6)] {
            assert_eq!(s.forward_merged(&e, tau).unwrap(), r);
        }
    }

    #[test]
    fn merged_equals_routed_for_identical_experts() {
        let s = MoteStack::init(dims(3), InitPolicy::Same, 6).unwrap();
        let e = input(2, 4, 8);
        let r = s.forward_routed(&e, &RoutingDecision { experts: vec![2, 1] }).unwrap();
        for tau in [Tau::Infinite, Tau::Finite(0.6), Tau::Finite(-2.4)] {
            let m = s.forward_merged(&e, tau).unwrap();
            assert!(m.max_abs_diff(&r) < 1e-12, "{tau}");
        }
    }

    #[test]
    fn deployed_stack_matches_tape_merge() {
        let s = MoteStack::init(dims(4), InitPolicy::Different, 8).unwrap();
        let e = input(2, 5, 8);
        let via_tape = s.forward_merged(&e, Tau::Infinite).unwrap();
        let deployed = s.merged(Tau::Infinite).unwrap();
        let via_weights = deployed.forward_routed(&e, &RoutingDecision::uniform(2, 0)).unwrap();
        assert_eq!(via_tape, via_weights);
    }

    #[test]
    fn video_embedding_examples() {
        let e = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -4.0]]).unwrap();
        let zero = Tensor::zeros(&[2, 2]);
        assert_eq!(video_embedding(&e, &zero).unwrap().data(), &[2.0, -1.0]);
        let one = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let t = Tensor::from_rows(&[vec![0.5, -1.0]]).unwrap();
        assert_eq!(video_embedding(&one, &t).unwrap().data(), &[1.5, 1.0]);
        // ((1+0.5)+(3-1))/2, ((2+0)+(-4+2))/2
        let t2 = Tensor::from_rows(&[vec![0.5, 0.0], vec![-1.0, 2.0]]).unwrap();
        assert_eq!(video_embedding(&e, &t2).unwrap().data(), &[1.75, 0.0]);
        assert!(video_embedding(&e, &one).is_err());
    }

    #[test]
    fn rejects_sequences_longer_than_position_table() {
        let s = MoteStack::init(dims(1), InitPolicy::Same, 0).unwrap();
        assert!(s.forward_routed(&input(1, 6, 8), &RoutingDecision::uniform(2, 0)).is_err());
        assert!(s.forward_routed(&input(1, 3, 7), &RoutingDecision::uniform(2, 0)).is_err());
    }
}

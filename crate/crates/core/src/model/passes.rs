//! Graph-level optimizations run before lowering: view elimination and
//! fusion of MISC operators into their matrix-engine producer.

use std::collections::HashMap;

use super::graph::{IrGraph, IrNode, OpKind, TensorId};
use crate::error::{Error, Result};

/// Drops every reshape-only view and rewires its consumers to the view's
/// input. A view that would permute memory cannot be dropped.
pub fn remove_views(g: &IrGraph) -> Result<IrGraph> {
    let mut rename: HashMap<TensorId, TensorId> = HashMap::new();
    let mut nodes = Vec::with_capacity(g.nodes.len());
    for node in &g.nodes {
        if let OpKind::View { permutes } = node.kind {
            if permutes {
                return Err(Error::UnsupportedPass(format!(
                    "view {} permutes its layout and cannot be removed",
                    node.name
                )));
            }
            let src = resolve(&rename, node.inputs[0]);
            rename.insert(node.outputs[0], src);
            continue;
        }
        let mut n = node.clone();
        rewrite_inputs(&mut n, &rename);
        nodes.push(n);
    }
    let dropped: Vec<TensorId> = rename.keys().copied().collect();
    let tensors = g.tensors.iter().filter(|t| !dropped.contains(&t.id)).cloned().collect();
    let out = IrGraph {
        config: g.config.clone(),
        tensors,
        nodes: renumber(nodes),
        input: g.input,
        output: resolve(&rename, g.output),
    };
    out.validate()?;
    Ok(out)
}

fn resolve(rename: &HashMap<TensorId, TensorId>, mut t: TensorId) -> TensorId {
    while let Some(&n) = rename.get(&t) {
        t = n;
    }
    t
}

fn rewrite_inputs(n: &mut IrNode, rename: &HashMap<TensorId, TensorId>) {
    for t in n.inputs.iter_mut() {
        *t = resolve(rename, *t);
    }
    for p in n.parts.iter_mut() {
        rewrite_inputs(p, rename);
    }
}

fn renumber(mut nodes: Vec<IrNode>) -> Vec<IrNode> {
    for (i, n) in nodes.iter_mut().enumerate() {
        n.id = i;
    }
    nodes
}

fn fusable_after(producer: &OpKind, consumer: &OpKind) -> bool {
    match producer {
        OpKind::AttentionQk => *consumer == OpKind::Softmax,
        OpKind::Linear => matches!(consumer, OpKind::Activation(_) | OpKind::Eltwise(_)),
        _ => false,
    }
}

/// Fuses `AttentionQk -> Softmax` and `Linear -> Activation/Eltwise*` chains.
/// A MISC node joins a chain only when the chain's result is its sole use
/// and none of its other inputs comes from a matrix-engine node.
pub fn fuse_layers(g: &IrGraph) -> Result<IrGraph> {
    if g.nodes.iter().any(|n| matches!(n.kind, OpKind::View { .. })) {
        return Err(Error::UnsupportedPass("fuse_layers requires views to be removed first".into()));
    }
    let producers = g.producers();
    let consumers = g.consumers();
    let heavy_producer = |t: TensorId| producers.get(&t).map(|&i| g.nodes[i].kind.is_compute_heavy()).unwrap_or(false);

    // chain head index -> indices of the nodes folded into it
    let mut absorbed_by: HashMap<usize, usize> = HashMap::new();
    let mut chains: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, node) in g.nodes.iter().enumerate() {
        if !matches!(node.kind, OpKind::Linear | OpKind::AttentionQk) || absorbed_by.contains_key(&i) {
            continue;
        }
        let mut chain = vec![i];
        let mut tail_kind = node.kind.clone();
        let mut result = node.outputs[0];
        loop {
            let users = consumers.get(&result).map(Vec::as_slice).unwrap_or(&[]);
            if users.len() != 1 || result == g.output {
                break;
            }
            let c = users[0];
            let cand = &g.nodes[c];
            let head_kind = &g.nodes[chain[0]].kind;
            let allowed = if chain.len() == 1 {
                fusable_after(head_kind, &cand.kind)
            } else {
                *head_kind == OpKind::Linear && matches!(cand.kind, OpKind::Activation(_) | OpKind::Eltwise(_))
            };
            if !allowed || tail_kind == OpKind::Softmax {
                break;
            }
            let others_heavy = cand.inputs.iter().filter(|&&t| t != result).any(|&t| heavy_producer(t));
            if others_heavy {
                break;
            }
            chain.push(c);
            tail_kind = cand.kind.clone();
            result = cand.outputs[0];
        }
        if chain.len() > 1 {
            for &c in &chain[1..] {
                absorbed_by.insert(c, i);
            }
            chains.insert(*chain.last().unwrap(), chain);
        }
    }

    let mut nodes = Vec::with_capacity(g.nodes.len());
    for (i, node) in g.nodes.iter().enumerate() {
        if let Some(chain) = chains.get(&i) {
            let parts: Vec<IrNode> = chain.iter().map(|&c| g.nodes[c].clone()).collect();
            let internal: Vec<TensorId> = parts[..parts.len() - 1].iter().flat_map(|p| p.outputs.clone()).collect();
            let mut inputs = Vec::new();
            for p in &parts {
                for &t in &p.inputs {
                    if !internal.contains(&t) && !inputs.contains(&t) {
                        inputs.push(t);
                    }
                }
            }
            let mut outputs: Vec<TensorId> = Vec::new();
            for p in &parts {
                // keep side outputs (KV cache) and the final result
                for (k, &t) in p.outputs.iter().enumerate() {
                    if k > 0 || std::ptr::eq(p, parts.last().unwrap()) {
                        outputs.push(t);
                    }
                }
            }
            let last = parts.last().unwrap();
            let mut out_sorted = vec![last.outputs[0]];
            out_sorted.extend(outputs.into_iter().filter(|&t| t != last.outputs[0]));
            nodes.push(IrNode {
                id: 0,
                name: parts.iter().map(|p| p.name.as_str()).collect::<Vec<_>>().join("+"),
                kind: OpKind::Fused(parts.iter().map(|p| p.kind.clone()).collect()),
                inputs,
                outputs: out_sorted,
                stage_hint: node.stage_hint,
                layer: node.layer,
                parts,
            });
        } else if absorbed_by.contains_key(&i) || chains.values().any(|c| c[0] == i) {
            continue;
        } else {
            nodes.push(node.clone());
        }
    }
    let out = IrGraph {
        config: g.config.clone(),
        tensors: g.tensors.clone(),
        nodes: renumber(nodes),
        input: g.input,
        output: g.output,
    };
    out.validate()?;
    Ok(out)
}

/// `remove_views` followed by `fuse_layers`.
pub fn optimize(g: &IrGraph) -> Result<IrGraph> {
    fuse_layers(&remove_views(g)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{Activation as Act, ModelConfig};
    use crate::model::graph::{build_ir, DType, EltwiseOp, StageHint, TensorRef, TensorRole};

    fn t(id: usize, role: TensorRole) -> TensorRef {
        TensorRef { id, name: format!("t{id}"), shape: vec![16], dtype: DType::Fp16, role }
    }

    fn n(id: usize, kind: OpKind, inputs: Vec<usize>, outputs: Vec<usize>) -> IrNode {
        IrNode {
            id,
            name: format!("n{id}"),
            kind,
            inputs,
            outputs,
            stage_hint: StageHint::Both,
            layer: Some(0),
            parts: vec![],
        }
    }

    fn graph(tensors: Vec<TensorRef>, nodes: Vec<IrNode>, output: usize) -> IrGraph {
        IrGraph { config: ModelConfig::tiny(1), tensors, nodes, input: 0, output }
    }

    #[test]
    fn view_between_linear_and_softmax_is_removed() {
        use TensorRole::*;
        let g = graph(
            vec![t(0, Activation), t(1, Weight), t(2, Activation), t(3, Activation), t(4, Activation)],
            vec![
                n(0, OpKind::Linear, vec![0, 1], vec![2]),
                n(1, OpKind::View { permutes: false }, vec![2], vec![3]),
                n(2, OpKind::Softmax, vec![3], vec![4]),
            ],
            4,
        );
        let r = remove_views(&g).unwrap();
        assert_eq!(r.nodes.len(), 2);
        assert_eq!(r.nodes[1].inputs, vec![2]);
        assert!(r.tensors.iter().all(|t| t.id != 3));
    }

    #[test]
    fn permuting_view_is_rejected() {
        use TensorRole::*;
        let g = graph(
            vec![t(0, Activation), t(1, Activation)],
            vec![n(0, OpKind::View { permutes: true }, vec![0], vec![1])],
            1,
        );
        assert!(matches!(remove_views(&g), Err(Error::UnsupportedPass(_))));
    }

    #[test]
    fn view_free_graph_is_a_fixed_point() {
        let g = remove_views(&build_ir(&ModelConfig::tiny(1)).unwrap()).unwrap();
        assert_eq!(remove_views(&g).unwrap(), g);
    }

    #[test]
    fn linear_silu_fuses() {
        use TensorRole::*;
        let g = graph(
            vec![t(0, Activation), t(1, Weight), t(2, Activation), t(3, Activation)],
            vec![
                n(0, OpKind::Linear, vec![0, 1], vec![2]),
                n(1, OpKind::Activation(Act::Silu), vec![2], vec![3]),
            ],
            3,
        );
        let f = fuse_layers(&g).unwrap();
        assert_eq!(f.nodes.len(), 1);
        assert_eq!(
            f.nodes[0].kind,
            OpKind::Fused(vec![OpKind::Linear, OpKind::Activation(Act::Silu)])
        );
        assert_eq!(f.nodes[0].inputs, vec![0, 1]);
        assert_eq!(f.nodes[0].outputs, vec![3]);
    }

    #[test]
    fn qk_softmax_fuses_but_sv_stays() {
        use TensorRole::*;
        let g = graph(
            (0..6).map(|i| t(i, Activation)).collect(),
            vec![
                n(0, OpKind::AttentionQk, vec![0, 0], vec![1]),
                n(1, OpKind::Softmax, vec![1], vec![2]),
                n(2, OpKind::AttentionSv, vec![2, 0], vec![3]),
            ],
            3,
        );
        let f = fuse_layers(&g).unwrap();
        assert_eq!(f.nodes.len(), 2);
        assert_eq!(f.nodes[0].kind, OpKind::Fused(vec![OpKind::AttentionQk, OpKind::Softmax]));
        assert_eq!(f.nodes[1].kind, OpKind::AttentionSv);
    }

    #[test]
    fn isolated_layernorms_unchanged() {
        use TensorRole::*;
        let g = graph(
            vec![t(0, Activation), t(1, Activation), t(2, Activation)],
            vec![n(0, OpKind::LayerNorm, vec![0], vec![1]), n(1, OpKind::LayerNorm, vec![1], vec![2])],
            2,
        );
        assert_eq!(fuse_layers(&g).unwrap(), g);
    }

    #[test]
    fn add_of_two_linears_is_left_alone() {
        use TensorRole::*;
        let g = graph(
            vec![t(0, Activation), t(1, Weight), t(2, Activation), t(3, Activation), t(4, Activation)],
            vec![
                n(0, OpKind::Linear, vec![0, 1], vec![2]),
                n(1, OpKind::Linear, vec![0, 1], vec![3]),
                n(2, OpKind::Eltwise(EltwiseOp::Add), vec![2, 3], vec![4]),
            ],
            4,
        );
        assert_eq!(fuse_layers(&g).unwrap(), g);
    }

    #[test]
    fn llama_layer_fusion_shape() {
        let g = optimize(&build_ir(&ModelConfig::tiny(2)).unwrap()).unwrap();
        let fused: Vec<String> =
            g.nodes.iter().filter(|n| n.layer == Some(0)).map(|n| n.kind.to_string()).collect();
        assert_eq!(
            fused,
            vec![
                "LayerNorm",
                "Linear",
                "Linear",
                "Linear",
                "Fused(AttentionQk+Softmax)",
                "AttentionSv",
                "Fused(Linear+Eltwise(Add))",
                "LayerNorm",
                "Fused(Linear+Activation(Silu))",
                "Fused(Linear+Eltwise(Mul))",
                "Fused(Linear+Eltwise(Add))",
            ]
        );
        g.validate().unwrap();
    }

    #[test]
    fn fusion_requires_views_removed() {
        let g = build_ir(&ModelConfig::tiny(1)).unwrap();
        assert!(fuse_layers(&g).is_err());
    }
}

//! Transformer IR: a flat, topologically ordered list of operator nodes over
//! named tensors. Activation shapes omit the token axis; they describe one
//! token's row.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::{Activation, ModelConfig};
use crate::error::{Error, Result};

pub type TensorId = usize;
pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    Fp16,
    Int8,
    PackedMixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TensorRole {
    Weight,
    Activation,
    KvCache,
    Lut,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRef {
    pub id: TensorId,
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub role: TensorRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EltwiseOp {
    Add,
    Mul,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Linear,
    AttentionQk,
    AttentionSv,
    Softmax,
    LayerNorm,
    Activation(Activation),
    Eltwise(EltwiseOp),
    /// Reshape-only view. `permutes` marks a view that would reorder memory.
    View { permutes: bool },
    Fused(Vec<OpKind>),
}

impl OpKind {
    /// Linear and attention matmuls run on the matrix engine.
    pub fn is_compute_heavy(&self) -> bool {
        match self {
            OpKind::Linear | OpKind::AttentionQk | OpKind::AttentionSv => true,
            OpKind::Fused(parts) => parts.iter().any(OpKind::is_compute_heavy),
            _ => false,
        }
    }

    pub fn is_misc(&self) -> bool {
        matches!(
            self,
            OpKind::Softmax | OpKind::LayerNorm | OpKind::Activation(_) | OpKind::Eltwise(_)
        )
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpKind::Fused(parts) => {
                write!(f, "Fused(")?;
                for (i, p) in parts.iter().enumerate() {
                    if i > 0 {
                        write!(f, "+")?;
                    }
                    write!(f, "{p}")?;
                }
                write!(f, ")")
            }
            other => write!(f, "{other:?}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StageHint {
    Prefill,
    Decode,
    Both,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IrNode {
    pub id: NodeId,
    pub name: String,
    pub kind: OpKind,
    pub inputs: Vec<TensorId>,
    pub outputs: Vec<TensorId>,
    pub stage_hint: StageHint,
    pub layer: Option<usize>,
    /// The original nodes folded into a `Fused` node, in execution order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub parts: Vec<IrNode>,
}

impl IrNode {
    /// The node itself, or its parts when fused.
    pub fn flatten(&self) -> Vec<&IrNode> {
        if self.parts.is_empty() {
            vec![self]
        } else {
            self.parts.iter().collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IrGraph {
    pub config: ModelConfig,
    pub tensors: Vec<TensorRef>,
    pub nodes: Vec<IrNode>,
    pub input: TensorId,
    pub output: TensorId,
}

impl IrGraph {
    pub fn tensor(&self, id: TensorId) -> &TensorRef {
        self.tensors.iter().find(|t| t.id == id).expect("dangling tensor id")
    }

    pub fn tensor_by_name(&self, name: &str) -> Option<&TensorRef> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Producer node index (into `nodes`) of every produced tensor.
    pub fn producers(&self) -> HashMap<TensorId, usize> {
        let mut map = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for &o in &n.outputs {
                map.insert(o, i);
            }
        }
        map
    }

    /// Consumer node indices of every tensor.
    pub fn consumers(&self) -> HashMap<TensorId, Vec<usize>> {
        let mut map: HashMap<TensorId, Vec<usize>> = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for &t in &n.inputs {
                map.entry(t).or_default().push(i);
            }
        }
        map
    }

    pub fn count_kind(&self, pred: impl Fn(&OpKind) -> bool) -> usize {
        self.nodes.iter().filter(|n| pred(&n.kind)).count()
    }

    /// Weight tensors in node order, with the linear node that consumes each.
    pub fn linear_weights(&self) -> Vec<(&IrNode, &TensorRef)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            for part in node.flatten() {
                if part.kind == OpKind::Linear {
                    out.push((part, self.tensor(part.inputs[1])));
                }
            }
        }
        out
    }

    /// Checks ordering (every input is produced earlier or is a graph
    /// input/weight), single producers and dangling references.
    pub fn validate(&self) -> Result<()> {
        let mut produced: HashMap<TensorId, NodeId> = HashMap::new();
        let known: HashMap<TensorId, &TensorRef> = self.tensors.iter().map(|t| (t.id, t)).collect();
        for node in &self.nodes {
            for &t in &node.inputs {
                let tr = known
                    .get(&t)
                    .ok_or_else(|| Error::Config(format!("node {} reads unknown tensor {t}", node.name)))?;
                let external = t == self.input || tr.role == TensorRole::Weight;
                if !external && !produced.contains_key(&t) {
                    return Err(Error::Config(format!(
                        "node {} reads tensor {} before it is produced",
                        node.name, tr.name
                    )));
                }
            }
            for &t in &node.outputs {
                if !known.contains_key(&t) {
                    return Err(Error::Config(format!("node {} writes unknown tensor {t}", node.name)));
                }
                if let Some(prev) = produced.insert(t, node.id) {
                    return Err(Error::Config(format!(
                        "tensor {t} has two producers ({prev} and {})",
                        node.id
                    )));
                }
            }
        }
        if !produced.contains_key(&self.output) {
            return Err(Error::Config("graph output is never produced".into()));
        }
        Ok(())
    }
}

struct Builder {
    tensors: Vec<TensorRef>,
    nodes: Vec<IrNode>,
}

impl Builder {
    fn tensor(&mut self, name: String, shape: Vec<usize>, dtype: DType, role: TensorRole) -> TensorId {
        let id = self.tensors.len();
        self.tensors.push(TensorRef { id, name, shape, dtype, role });
        id
    }

    fn act(&mut self, name: String, width: usize) -> TensorId {
        self.tensor(name, vec![width], DType::Int8, TensorRole::Activation)
    }

    fn act16(&mut self, name: String, width: usize) -> TensorId {
        self.tensor(name, vec![width], DType::Fp16, TensorRole::Activation)
    }

    fn node(&mut self, name: String, kind: OpKind, inputs: Vec<TensorId>, outputs: Vec<TensorId>, layer: Option<usize>) {
        let id = self.nodes.len();
        self.nodes.push(IrNode {
            id,
            name,
            kind,
            inputs,
            outputs,
            stage_hint: StageHint::Both,
            layer,
            parts: Vec::new(),
        });
    }

    fn linear(&mut self, prefix: &str, name: &str, input: TensorId, in_dim: usize, out_dim: usize, layer: Option<usize>) -> TensorId {
        let w = self.tensor(
            format!("{prefix}.{name}.weight"),
            vec![out_dim, in_dim],
            DType::PackedMixed,
            TensorRole::Weight,
        );
        let out = self.act16(format!("{prefix}.{name}.out"), out_dim);
        self.node(format!("{prefix}.{name}"), OpKind::Linear, vec![input, w], vec![out], layer);
        out
    }
}

/// Builds the per-layer operator graph: pre-norm attention block followed by
/// a pre-norm FFN block, each closed by an explicit residual add.
pub fn build_ir(cfg: &ModelConfig) -> Result<IrGraph> {
    cfg.validate()?;
    let d = cfg.hidden_dim;
    let h = cfg.num_heads;
    let mut b = Builder { tensors: Vec::new(), nodes: Vec::new() };
    let input = b.act16("embed".into(), d);
    let mut x = input;

    for l in 0..cfg.num_layers {
        let p = format!("layers.{l}");
        let ly = Some(l);
        let ln1 = b.act(format!("{p}.ln1.out"), d);
        b.node(format!("{p}.ln1"), OpKind::LayerNorm, vec![x], vec![ln1], ly);
        let q = b.linear(&p, "q_proj", ln1, d, d, ly);
        let k = b.linear(&p, "k_proj", ln1, d, d, ly);
        let v = b.linear(&p, "v_proj", ln1, d, d, ly);
        let kc = b.tensor(format!("{p}.k_cache"), vec![h, cfg.head_dim], DType::Int8, TensorRole::KvCache);
        let vc = b.tensor(format!("{p}.v_cache"), vec![h, cfg.head_dim], DType::Int8, TensorRole::KvCache);
        let scores = b.act16(format!("{p}.attn.scores"), h);
        b.node(format!("{p}.attn.qk"), OpKind::AttentionQk, vec![q, k], vec![scores, kc], ly);
        let probs = b.act(format!("{p}.attn.probs"), h);
        b.node(format!("{p}.attn.softmax"), OpKind::Softmax, vec![scores], vec![probs], ly);
        let heads = b.act16(format!("{p}.attn.heads"), d);
        b.node(format!("{p}.attn.sv"), OpKind::AttentionSv, vec![probs, v], vec![heads, vc], ly);
        let merged = b.act16(format!("{p}.attn.merged"), d);
        b.node(format!("{p}.attn.view"), OpKind::View { permutes: false }, vec![heads], vec![merged], ly);
        let o = b.linear(&p, "o_proj", merged, d, d, ly);
        let x1 = b.act16(format!("{p}.res1"), d);
        b.node(format!("{p}.add1"), OpKind::Eltwise(EltwiseOp::Add), vec![x, o], vec![x1], ly);

        let ln2 = b.act(format!("{p}.ln2.out"), d);
        b.node(format!("{p}.ln2"), OpKind::LayerNorm, vec![x1], vec![ln2], ly);
        let up = b.linear(&p, "up_proj", ln2, d, cfg.ffn_dim, ly);
        let act = b.act16(format!("{p}.act"), cfg.ffn_dim);
        b.node(format!("{p}.act"), OpKind::Activation(cfg.activation), vec![up], vec![act], ly);
        let hidden = if cfg.gated_ffn() {
            let gate = b.linear(&p, "gate_proj", ln2, d, cfg.ffn_dim, ly);
            let m = b.act16(format!("{p}.gated"), cfg.ffn_dim);
            b.node(format!("{p}.mul"), OpKind::Eltwise(EltwiseOp::Mul), vec![act, gate], vec![m], ly);
            m
        } else {
            act
        };
        let down = b.linear(&p, "down_proj", hidden, cfg.ffn_dim, d, ly);
        let x2 = b.act16(format!("{p}.res2"), d);
        b.node(format!("{p}.add2"), OpKind::Eltwise(EltwiseOp::Add), vec![x1, down], vec![x2], ly);
        x = x2;
    }

    if cfg.has_lm_head {
        let lnf = b.act("final_norm.out".into(), d);
        b.node("final_norm".into(), OpKind::LayerNorm, vec![x], vec![lnf], None);
        x = b.linear("lm_head", "proj", lnf, d, cfg.vocab_size, None);
    }

    let g = IrGraph { config: cfg.clone(), tensors: b.tensors, nodes: b.nodes, input, output: x };
    g.validate()?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_attention_pair_per_layer() {
        let mut cfg = ModelConfig::tiny(1);
        cfg.ffn_dim = 256;
        let g = build_ir(&cfg).unwrap();
        assert_eq!(g.count_kind(|k| *k == OpKind::AttentionQk), 1);
        assert_eq!(g.count_kind(|k| *k == OpKind::AttentionSv), 1);
        assert_eq!(g.count_kind(|k| matches!(k, OpKind::View { .. })), 1);
    }

    #[test]
    fn node_count_scales_with_layers() {
        let one = build_ir(&ModelConfig::tiny(1)).unwrap();
        let two = build_ir(&ModelConfig::tiny(2)).unwrap();
        assert_eq!(two.nodes.len(), 2 * one.nodes.len());
    }

    #[test]
    fn llama_shape_validates() {
        let g = build_ir(&ModelConfig::llama2_7b()).unwrap();
        assert_eq!(g.linear_weights().len(), 32 * 7);
    }

    #[test]
    fn deterministic() {
        let cfg = ModelConfig::tiny(2);
        assert_eq!(build_ir(&cfg).unwrap(), build_ir(&cfg).unwrap());
    }

    #[test]
    fn plain_ffn_has_no_mul() {
        let g = build_ir(&ModelConfig::opt_6_7b()).unwrap();
        assert_eq!(g.count_kind(|k| *k == OpKind::Eltwise(EltwiseOp::Mul)), 0);
        assert_eq!(g.linear_weights().len(), 32 * 6);
    }

    #[test]
    fn lm_head_appends_norm_and_projection() {
        let mut cfg = ModelConfig::tiny(1);
        cfg.has_lm_head = true;
        cfg.vocab_size = 128;
        let g = build_ir(&cfg).unwrap();
        let base = build_ir(&ModelConfig::tiny(1)).unwrap();
        assert_eq!(g.nodes.len(), base.nodes.len() + 2);
        assert_eq!(g.tensor(g.output).shape, vec![128]);
    }
}

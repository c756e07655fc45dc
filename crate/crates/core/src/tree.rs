//! Layered metamodel tree.
//!
//! Hidden layer 0 aggregates univariate functions of the input features; every
//! higher layer aggregates the outputs of nodes in the layer below. Each hidden
//! node applies its `outgoing` function to the sum of its inputs, and the root sums
//! the outputs of the top layer:
//!
//! ```text
//! H = 1:  g(x) = sum_i  g_i( sum_{j in N(i)} g_ij(x_j) )
//! H = 2:  g(x) = sum_k  g_k( sum_{i in N(k)} g_i( sum_{j in N(i)} g_ij(x_j) ) )
//! ```
//!
//! Only layer-0 child links carry their own function; a link between hidden layers
//! passes the lower node's output through unchanged. Edges are counted over every
//! child link plus one root link per top-layer node.
//!
//! Function slots are enumerated layer by layer from the bottom, node by node, with
//! a node's child functions (layer 0 only) before its outgoing function. Gradient
//! tapes and flat parameter vectors follow that order.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SmpfError};
use crate::primitives::{Jet, Level, Piece, PrimitiveClass, PrimitiveFunction};
use crate::scalar::{saturate, saturate_slope, Scalar};

pub const FORMAT_VERSION: u32 = 1;

/// A link from a hidden node down to a feature (layer 0, with a function) or to a
/// node of the layer below (no function).
#[derive(Debug, Clone, PartialEq)]
pub struct Child<T> {
    pub target: usize,
    pub func: Option<PrimitiveFunction<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenNode<T> {
    pub outgoing: PrimitiveFunction<T>,
    pub children: Vec<Child<T>>,
}

impl<T: Scalar> HiddenNode<T> {
    /// Layer-0 node over `(feature, function)` pairs.
    pub fn over_features(
        outgoing: PrimitiveFunction<T>,
        children: impl IntoIterator<Item = (usize, PrimitiveFunction<T>)>,
    ) -> Self {
        HiddenNode {
            outgoing,
            children: children
                .into_iter()
                .map(|(target, f)| Child {
                    target,
                    func: Some(f),
                })
                .collect(),
        }
    }

    /// Node of a higher layer over indices of the layer below.
    pub fn over_nodes(
        outgoing: PrimitiveFunction<T>,
        children: impl IntoIterator<Item = usize>,
    ) -> Self {
        HiddenNode {
            outgoing,
            children: children
                .into_iter()
                .map(|target| Child { target, func: None })
                .collect(),
        }
    }
}

/// Location of one primitive function inside a tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Slot {
    pub layer: usize,
    pub node: usize,
    /// `None` addresses the node's outgoing function.
    pub child: Option<usize>,
}

/// Per-parameter and per-feature partial derivatives of the tree output at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape<T> {
    /// `dg/dp` for every parameter, in slot order.
    pub params: Vec<T>,
    /// `dg/dx_j` for every feature.
    pub inputs: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetamodelTree<T> {
    dim: usize,
    layers: Vec<Vec<HiddenNode<T>>>,
}

impl<T: Scalar> MetamodelTree<T> {
    /// Builds a tree, checking every structural invariant.
    pub fn new(dim: usize, layers: Vec<Vec<HiddenNode<T>>>) -> Result<Self> {
        let tree = MetamodelTree { dim, layers };
        tree.validate()?;
        Ok(tree)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SmpfError::InvalidTree(msg));
        if self.dim == 0 {
            return bad("tree needs at least one feature".into());
        }
        if self.layers.is_empty() {
            return bad("tree needs at least one hidden layer".into());
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.is_empty() {
                return bad(format!("hidden layer {l} is empty"));
            }
            let range = if l == 0 {
                self.dim
            } else {
                self.layers[l - 1].len()
            };
            for (n, node) in layer.iter().enumerate() {
                if node.children.is_empty() {
                    return bad(format!("layer {l} node {n} has no children"));
                }
                if node.outgoing.params().iter().any(|p| !p.is_finite()) {
                    return bad(format!("layer {l} node {n} has a non-finite parameter"));
                }
                for (c, child) in node.children.iter().enumerate() {
                    if child.target >= range {
                        return bad(format!(
                            "layer {l} node {n} child {c} targets {} (valid range 0..{range})",
                            child.target
                        ));
                    }
                    if node.children[..c].iter().any(|o| o.target == child.target) {
                        return bad(format!(
                            "layer {l} node {n} links to {} twice",
                            child.target
                        ));
                    }
                    match (&child.func, l) {
                        (None, 0) => {
                            return bad(format!("layer 0 node {n} child {c} has no function"))
                        }
                        (Some(_), l) if l > 0 => {
                            return bad(format!(
                                "layer {l} node {n} child {c} carries a function"
                            ))
                        }
                        (Some(f), _) if f.params().iter().any(|p| !p.is_finite()) => {
                            return bad(format!(
                                "layer 0 node {n} child {c} has a non-finite parameter"
                            ))
                        }
                        _ => {}
                    }
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[Vec<HiddenNode<T>>] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut Vec<Vec<HiddenNode<T>>> {
        &mut self.layers
    }

    /// Number of hidden layers.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Number of nodes in the top hidden layer.
    pub fn width(&self) -> usize {
        self.layers.last().map_or(0, Vec::len)
    }

    /// All child links plus one root link per top-layer node.
    pub fn edge_count(&self) -> usize {
        let links: usize = self
            .layers
            .iter()
            .flatten()
            .map(|n| n.children.len())
            .sum();
        links + self.width()
    }

    pub fn slots(&self) -> Vec<Slot> {
        let mut out = Vec::new();
        for (layer, nodes) in self.layers.iter().enumerate() {
            for (node, n) in nodes.iter().enumerate() {
                for (child, c) in n.children.iter().enumerate() {
                    if c.func.is_some() {
                        out.push(Slot {
                            layer,
                            node,
                            child: Some(child),
                        });
                    }
                }
                out.push(Slot {
                    layer,
                    node,
                    child: None,
                });
            }
        }
        out
    }

    pub fn function(&self, slot: Slot) -> Option<&PrimitiveFunction<T>> {
        let node = self.layers.get(slot.layer)?.get(slot.node)?;
        match slot.child {
            None => Some(&node.outgoing),
            Some(c) => node.children.get(c)?.func.as_ref(),
        }
    }

    pub fn function_mut(&mut self, slot: Slot) -> Option<&mut PrimitiveFunction<T>> {
        let node = self.layers.get_mut(slot.layer)?.get_mut(slot.node)?;
        match slot.child {
            None => Some(&mut node.outgoing),
            Some(c) => node.children.get_mut(c)?.func.as_mut(),
        }
    }

    /// Functions in slot order.
    pub fn functions(&self) -> impl Iterator<Item = &PrimitiveFunction<T>> {
        self.layers.iter().flatten().flat_map(|n| {
            n.children
                .iter()
                .filter_map(|c| c.func.as_ref())
                .chain(std::iter::once(&n.outgoing))
        })
    }

    pub fn functions_mut(&mut self) -> impl Iterator<Item = &mut PrimitiveFunction<T>> {
        self.layers.iter_mut().flatten().flat_map(|n| {
            n.children
                .iter_mut()
                .filter_map(|c| c.func.as_mut())
                .chain(std::iter::once(&mut n.outgoing))
        })
    }

    /// Total number of trainable parameters (the tape length).
    pub fn param_count(&self) -> usize {
        self.functions().map(|f| f.arity()).sum()
    }

    pub fn params(&self) -> Vec<T> {
        self.functions().flat_map(|f| f.params().to_vec()).collect()
    }

    /// Overwrites all parameters from a flat vector in slot order.
    pub fn set_params(&mut self, values: &[T]) {
        assert_eq!(values.len(), self.param_count());
        let mut rest = values;
        for f in self.functions_mut() {
            let (head, tail) = rest.split_at(f.arity());
            f.params_mut().copy_from_slice(head);
            rest = tail;
        }
    }

    /// Which features have at least one incoming edge.
    pub fn connected_features(&self) -> Vec<bool> {
        let mut seen = vec![false; self.dim];
        for node in &self.layers[0] {
            for c in &node.children {
                seen[c.target] = true;
            }
        }
        seen
    }

    fn check_dim(&self, x: &[T]) -> Result<()> {
        if x.len() != self.dim {
            return Err(SmpfError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn eval(&self, x: &[T]) -> Result<T> {
        self.check_dim(x)?;
        Ok(self.eval_unchecked(x))
    }

    /// Evaluates without the length check; panics if `x` is too short.
    pub fn eval_unchecked(&self, x: &[T]) -> T {
        let mut below: Vec<T> = Vec::new();
        let mut current: Vec<T> = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            current.clear();
            for node in layer {
                let mut s = T::zero();
                for c in &node.children {
                    s += match &c.func {
                        Some(f) if l == 0 => f.eval(x[c.target]),
                        _ => below[c.target],
                    };
                }
                current.push(node.outgoing.eval(saturate(s)));
            }
            std::mem::swap(&mut below, &mut current);
        }
        saturate(below.into_iter().sum())
    }

    /// Output value together with all parameter and input partials, in one
    /// forward and one reverse sweep.
    pub fn backward(&self, x: &[T]) -> Result<(T, GradientTape<T>)> {
        self.check_dim(x)?;
        Ok(self.backward_unchecked(x))
    }

    pub fn backward_unchecked(&self, x: &[T]) -> (T, GradientTape<T>) {
        struct NodeRecord<T> {
            outgoing: Jet<T>,
            outgoing_offset: usize,
            children: Vec<(Jet<T>, usize)>,
        }

        let mut records: Vec<Vec<NodeRecord<T>>> = Vec::with_capacity(self.layers.len());
        let mut below: Vec<T> = Vec::new();
        let mut offset = 0;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut recs = Vec::with_capacity(layer.len());
            let mut outs = Vec::with_capacity(layer.len());
            for node in layer {
                let mut s = T::zero();
                let mut children = Vec::new();
                for c in &node.children {
                    match &c.func {
                        Some(f) if l == 0 => {
                            let j = f.jet(x[c.target]);
                            s += j.value;
                            children.push((j, offset));
                            offset += f.arity();
                        }
                        _ => s += below[c.target],
                    }
                }
                let j = node.outgoing.jet(saturate(s));
                outs.push(j.value);
                recs.push(NodeRecord {
                    outgoing: j,
                    outgoing_offset: offset,
                    children,
                });
                offset += node.outgoing.arity();
            }
            records.push(recs);
            below = outs;
        }
        let value = saturate(below.iter().copied().sum());

        let mut params = vec![T::zero(); offset];
        let mut inputs = vec![T::zero(); self.dim];
        let mut adj_out = vec![T::one(); self.width()];
        for l in (0..self.layers.len()).rev() {
            let mut adj_below = if l > 0 {
                vec![T::zero(); self.layers[l - 1].len()]
            } else {
                Vec::new()
            };
            for (n, node) in self.layers[l].iter().enumerate() {
                let rec = &records[l][n];
                let a = adj_out[n];
                for k in 0..node.outgoing.arity() {
                    params[rec.outgoing_offset + k] = a * rec.outgoing.grad[k];
                }
                let adj_sum = a * rec.outgoing.dx;
                if l > 0 {
                    for c in &node.children {
                        adj_below[c.target] += adj_sum;
                    }
                } else {
                    for (c, (jet, off)) in node.children.iter().zip(&rec.children) {
                        let arity = c.func.as_ref().map_or(0, |f| f.arity());
                        for k in 0..arity {
                            params[off + k] = adj_sum * jet.grad[k];
                        }
                        inputs[c.target] += adj_sum * jet.dx;
                    }
                }
            }
            adj_out = adj_below;
        }
        for p in params.iter_mut().chain(inputs.iter_mut()) {
            *p = saturate_slope(*p);
        }
        (value, GradientTape { params, inputs })
    }

    /// Fully expanded closed form with coefficients rounded to `precision` decimals.
    pub fn render(&self, precision: usize) -> String {
        let precision = precision.max(1);
        let mut below: Vec<Piece> = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut current = Vec::with_capacity(layer.len());
            for node in layer {
                let parts: Vec<Piece> = node
                    .children
                    .iter()
                    .map(|c| match &c.func {
                        Some(f) if l == 0 => f.render_piece(
                            &Piece {
                                text: format!("x_{}", c.target),
                                level: Level::Atom,
                            },
                            precision,
                        ),
                        _ => below[c.target].clone(),
                    })
                    .collect();
                current.push(node.outgoing.render_piece(&Piece::sum(&parts), precision));
            }
            below = current;
        }
        Piece::sum(&below).text
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&TreeDoc::from_tree(self)).expect("tree serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TreeDoc = serde_json::from_str(text).map_err(|e| SmpfError::Malformed {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        doc.into_tree()
    }
}

impl<T: Scalar> fmt::Display for MetamodelTree<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render(f.precision().unwrap_or(4)))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeDoc {
    version: u32,
    d: usize,
    layers: Vec<LayerDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    nodes: Vec<NodeDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    outgoing: FuncDoc,
    children: Vec<ChildDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FuncDoc {
    class: PrimitiveClass,
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChildDoc {
    target: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class: Option<PrimitiveClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    params: Option<Vec<f64>>,
}

impl FuncDoc {
    fn of<T: Scalar>(f: &PrimitiveFunction<T>) -> Self {
        FuncDoc {
            class: f.class(),
            params: f.params().iter().map(|p| p.as_f64()).collect(),
        }
    }

    fn build<T: Scalar>(class: PrimitiveClass, params: &[f64], at: &str) -> Result<PrimitiveFunction<T>> {
        let p: Vec<T> = params.iter().map(|v| T::of(*v)).collect();
        PrimitiveFunction::try_new(class, &p)
            .map_err(|e| SmpfError::InvalidTree(format!("{at}: {e}")))
    }
}

impl TreeDoc {
    fn from_tree<T: Scalar>(t: &MetamodelTree<T>) -> Self {
        TreeDoc {
            version: FORMAT_VERSION,
            d: t.dim,
            layers: t
                .layers
                .iter()
                .map(|layer| LayerDoc {
                    nodes: layer
                        .iter()
                        .map(|n| NodeDoc {
                            outgoing: FuncDoc::of(&n.outgoing),
                            children: n
                                .children
                                .iter()
                                .map(|c| ChildDoc {
                                    target: c.target,
                                    class: c.func.as_ref().map(|f| f.class()),
                                    params: c.func.as_ref().map(|f| {
                                        f.params().iter().map(|p| p.as_f64()).collect()
                                    }),
                                })
                                .collect(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    fn into_tree<T: Scalar>(self) -> Result<MetamodelTree<T>> {
        if self.version != FORMAT_VERSION {
            return Err(SmpfError::InvalidTree(format!(
                "unsupported model format version {} (expected {FORMAT_VERSION})",
                self.version
            )));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.into_iter().enumerate() {
            let mut nodes = Vec::with_capacity(layer.nodes.len());
            for (n, node) in layer.nodes.into_iter().enumerate() {
                let at = format!("layers[{l}].nodes[{n}]");
                let outgoing = FuncDoc::build(node.outgoing.class, &node.outgoing.params, &at)?;
                let mut children = Vec::with_capacity(node.children.len());
                for (c, child) in node.children.into_iter().enumerate() {
                    let func = match (child.class, child.params) {
                        (Some(class), Some(params)) => Some(FuncDoc::build(
                            class,
                            &params,
                            &format!("{at}.children[{c}]"),
                        )?),
                        (None, None) => None,
                        _ => {
                            return Err(SmpfError::InvalidTree(format!(
                                "{at}.children[{c}]: `class` and `params` must appear together"
                            )))
                        }
                    };
                    children.push(Child {
                        target: child.target,
                        func,
                    });
                }
                nodes.push(HiddenNode { outgoing, children });
            }
            layers.push(nodes);
        }
        MetamodelTree::new(self.d, layers)
    }
}

//! Layer DAG of a 3D CNN, parsed from the JSON model description.
//!
//! Shapes are channels-first `[C, H, W, D]` where `D` is the temporal axis.
//! Kernel, stride and padding vectors are ordered `[h, w, d]`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
}

impl TensorShape {
    pub fn new(channels: usize, height: usize, width: usize, depth: usize) -> Self {
        TensorShape { channels, height, width, depth }
    }

    fn from_array(v: [usize; 4]) -> Self {
        TensorShape::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [usize; 4] {
        [self.channels, self.height, self.width, self.depth]
    }

    /// Spatio-temporal volume `H * W * D`.
    pub fn volume(&self) -> u64 {
        (self.height * self.width * self.depth) as u64
    }

    pub fn elements(&self) -> u64 {
        self.channels as u64 * self.volume()
    }

    pub fn is_point(&self) -> bool {
        self.height == 1 && self.width == 1 && self.depth == 1
    }

    fn spatial(&self) -> [usize; 3] {
        [self.height, self.width, self.depth]
    }

    fn is_valid(&self) -> bool {
        self.to_array().iter().all(|&d| d >= 1)
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.channels, self.height, self.width, self.depth)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Window {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Self {
        Window { kernel, stride, padding }
    }

    /// `K_h * K_w * K_d`, the dot-product length per input channel.
    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Sliding-window output extent: `floor((in + 2 Pd - K) / St) + 1` per axis.
    pub fn output_dims(&self, input: &TensorShape) -> Option<[usize; 3]> {
        let spatial = input.spatial();
        let mut out = [0; 3];
        for axis in 0..3 {
            let padded = spatial[axis] + 2 * self.padding[axis];
            if self.stride[axis] == 0 || self.kernel[axis] == 0 || padded < self.kernel[axis] {
                return None;
            }
            out[axis] = (padded - self.kernel[axis]) / self.stride[axis] + 1;
        }
        Some(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActivationType {
    Relu,
    Sigmoid,
    Swish,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EwType {
    Add,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum EwMode {
    #[default]
    Normal,
    Broadcast,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerKind {
    #[serde(rename = "Conv3D")]
    Conv3d,
    #[serde(rename = "Pool3D")]
    Pool3d,
    Activation,
    ElementWise,
    GlobalAvgPool,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LayerKind::Conv3d => "Conv3D",
            LayerKind::Pool3d => "Pool3D",
            LayerKind::Activation => "Activation",
            LayerKind::ElementWise => "ElementWise",
            LayerKind::GlobalAvgPool => "GlobalAvgPool",
        };
        f.write_str(s)
    }
}

/// Kind-specific layer configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerOp {
    Conv3d { window: Window, groups: usize },
    Pool3d { window: Window },
    Activation(ActivationType),
    ElementWise { op: EwType, mode: EwMode },
    GlobalAvgPool,
}

impl LayerOp {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerOp::Conv3d { .. } => LayerKind::Conv3d,
            LayerOp::Pool3d { .. } => LayerKind::Pool3d,
            LayerOp::Activation(_) => LayerKind::Activation,
            LayerOp::ElementWise { .. } => LayerKind::ElementWise,
            LayerOp::GlobalAvgPool => LayerKind::GlobalAvgPool,
        }
    }

    fn arity(&self) -> usize {
        match self {
            LayerOp::ElementWise { .. } => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerDescriptor {
    pub id: String,
    pub op: LayerOp,
    pub input_shapes: Vec<TensorShape>,
    pub output_shape: TensorShape,
}

impl LayerDescriptor {
    pub fn kind(&self) -> LayerKind {
        self.op.kind()
    }

    /// The input carrying the full feature map (for broadcast element-wise
    /// layers, the non-`1x1x1` operand).
    pub fn primary_input(&self) -> TensorShape {
        self.input_shapes[self.primary_slot()]
    }

    pub fn primary_slot(&self) -> usize {
        match self.op {
            LayerOp::ElementWise { mode: EwMode::Broadcast, .. }
                if self.input_shapes[0].is_point() && !self.input_shapes[1].is_point() => {
                    1
                }
            _ => 0,
        }
    }

    pub fn window(&self) -> Option<&Window> {
        match &self.op {
            LayerOp::Conv3d { window, .. } | LayerOp::Pool3d { window } => Some(window),
            _ => None,
        }
    }

    pub fn groups(&self) -> usize {
        match self.op {
            LayerOp::Conv3d { groups, .. } => groups,
            _ => 1,
        }
    }

    pub fn is_depthwise(&self) -> bool {
        let c_in = self.primary_input().channels;
        matches!(self.op, LayerOp::Conv3d { groups, .. } if groups == c_in && c_in > 1)
    }

    /// Fully connected layers lowered to a Conv3D producing a `1x1x1` map.
    pub fn is_fully_connected(&self) -> bool {
        self.kind() == LayerKind::Conv3d && self.output_shape.is_point()
    }

    /// Multiply-accumulate count (or one op per element for non-conv layers).
    pub fn macs(&self) -> u64 {
        match &self.op {
            LayerOp::Conv3d { window, groups } => {
                let c_in = self.primary_input().channels as u64;
                self.output_shape.elements() * window.kernel_volume() as u64 * c_in / *groups as u64
            }
            LayerOp::GlobalAvgPool => self.primary_input().elements(),
            _ => self.output_shape.elements(),
        }
    }
}

/// One layer as written in a model description, before shape inference.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub id: String,
    pub op: LayerOp,
    pub inputs: Vec<String>,
    pub output_shape: TensorShape,
    /// Only for graph-input layers (no `inputs`).
    pub input_shape: Option<TensorShape>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelDag {
    pub name: String,
    pub nodes: BTreeMap<String, LayerDescriptor>,
    /// `(producer, consumer)`, grouped by consumer in topological order and
    /// then by input slot.
    pub arcs: Vec<(String, String)>,
    pub graph_inputs: Vec<String>,
    pub graph_outputs: Vec<String>,
    order: Vec<String>,
}

impl ModelDag {
    /// Validates `layers` and assembles the DAG.
    pub fn new(name: impl Into<String>, layers: Vec<LayerSpec>) -> Result<Self> {
        let mut specs: BTreeMap<String, LayerSpec> = BTreeMap::new();
        for layer in layers {
            if layer.id.is_empty() {
                return Err(Error::Schema("layer with empty id".into()));
            }
            if specs.contains_key(&layer.id) {
                return Err(Error::Schema(format!("duplicate layer id `{}`", layer.id)));
            }
            specs.insert(layer.id.clone(), layer);
        }

        for spec in specs.values() {
            for input in &spec.inputs {
                if !specs.contains_key(input) {
                    return Err(Error::DanglingArc { from: spec.id.clone(), missing: input.clone() });
                }
            }
            let arity = spec.op.arity();
            if spec.inputs.is_empty() {
                if arity != 1 {
                    return Err(Error::Schema(format!(
                        "`{}`: ElementWise layers cannot be graph inputs",
                        spec.id
                    )));
                }
                if spec.input_shape.is_none() {
                    return Err(Error::Schema(format!(
                        "`{}`: graph-input layer needs `input_shape`",
                        spec.id
                    )));
                }
            } else if spec.inputs.len() != arity {
                return Err(Error::Schema(format!(
                    "`{}`: {} expects {} inputs, got {}",
                    spec.id,
                    spec.op.kind(),
                    arity,
                    spec.inputs.len()
                )));
            }
        }

        let edges: Vec<(&str, &str)> = specs
            .values()
            .flat_map(|s| s.inputs.iter().map(move |i| (i.as_str(), s.id.as_str())))
            .collect();
        let order = topo_order(specs.keys().map(String::as_str), &edges)?;

        let mut nodes: BTreeMap<String, LayerDescriptor> = BTreeMap::new();
        let mut arcs = Vec::new();
        for id in &order {
            let spec = &specs[id];
            let input_shapes = if spec.inputs.is_empty() {
                vec![spec.input_shape.unwrap()]
            } else {
                spec.inputs.iter().map(|i| nodes[i].output_shape).collect()
            };
            let layer = LayerDescriptor {
                id: id.clone(),
                op: spec.op.clone(),
                input_shapes,
                output_shape: spec.output_shape,
            };
            check_layer(&layer)?;
            arcs.extend(spec.inputs.iter().map(|i| (i.clone(), id.clone())));
            nodes.insert(id.clone(), layer);
        }

        let consumed: BTreeSet<&str> = arcs.iter().map(|(p, _)| p.as_str()).collect();
        let graph_inputs = order.iter().filter(|id| specs[*id].inputs.is_empty()).cloned().collect();
        let graph_outputs = order.iter().filter(|id| !consumed.contains(id.as_str())).cloned().collect();

        Ok(ModelDag { name: name.into(), nodes, arcs, graph_inputs, graph_outputs, order })
    }

    /// Layer ids in deterministic topological order.
    pub fn order(&self) -> &[String] {
        &self.order
    }

    pub fn layer(&self, id: &str) -> Option<&LayerDescriptor> {
        self.nodes.get(id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Producers feeding `id`, in input-slot order.
    pub fn predecessors(&self, id: &str) -> Vec<&str> {
        self.arcs.iter().filter(|(_, c)| c == id).map(|(p, _)| p.as_str()).collect()
    }

    pub fn successors(&self, id: &str) -> Vec<&str> {
        self.arcs.iter().filter(|(p, _)| p == id).map(|(_, c)| c.as_str()).collect()
    }

    pub fn layers_in_order(&self) -> impl Iterator<Item = &LayerDescriptor> {
        self.order.iter().map(|id| &self.nodes[id])
    }

    fn to_specs(&self) -> Vec<LayerSpec> {
        self.layers_in_order()
            .map(|layer| {
                let inputs: Vec<String> =
                    self.predecessors(&layer.id).into_iter().map(str::to_owned).collect();
                let input_shape = inputs.is_empty().then(|| layer.input_shapes[0]);
                LayerSpec {
                    id: layer.id.clone(),
                    op: layer.op.clone(),
                    inputs,
                    output_shape: layer.output_shape,
                    input_shape,
                }
            })
            .collect()
    }
}

fn check_layer(layer: &LayerDescriptor) -> Result<()> {
    let mismatch = |detail: String| Error::ShapeMismatch { layer: layer.id.clone(), detail };
    for shape in layer.input_shapes.iter().chain(std::iter::once(&layer.output_shape)) {
        if !shape.is_valid() {
            return Err(mismatch(format!("shape {shape} has a zero dimension")));
        }
    }
    let input = layer.input_shapes[0];
    let out = layer.output_shape;
    match &layer.op {
        LayerOp::Conv3d { window, groups } => {
            let dims = window
                .output_dims(&input)
                .ok_or_else(|| mismatch("kernel larger than padded input".into()))?;
            if out.spatial() != dims {
                return Err(mismatch(format!(
                    "declared output {out} but window gives {}x{}x{}",
                    dims[0], dims[1], dims[2]
                )));
            }
            if *groups == 0 || !input.channels.is_multiple_of(*groups) || !out.channels.is_multiple_of(*groups) {
                return Err(mismatch(format!(
                    "groups {groups} must divide input channels {} and filters {}",
                    input.channels, out.channels
                )));
            }
        }
        LayerOp::Pool3d { window } => {
            let dims = window
                .output_dims(&input)
                .ok_or_else(|| mismatch("kernel larger than padded input".into()))?;
            if out.spatial() != dims || out.channels != input.channels {
                return Err(mismatch(format!(
                    "declared output {out} but pooling gives {}x{}x{}x{}",
                    input.channels, dims[0], dims[1], dims[2]
                )));
            }
        }
        LayerOp::Activation(_) => {
            if out != input {
                return Err(mismatch(format!("activation maps {input} to {out}")));
            }
        }
        LayerOp::ElementWise { mode, .. } => {
            let (a, b) = (layer.input_shapes[0], layer.input_shapes[1]);
            match mode {
                EwMode::Normal => {
                    if a != b || out != a {
                        return Err(mismatch(format!("element-wise inputs {a}, {b} -> {out}")));
                    }
                }
                EwMode::Broadcast => {
                    let (full, point) = if b.is_point() { (a, b) } else { (b, a) };
                    if !point.is_point() || point.channels != full.channels || out != full {
                        return Err(mismatch(format!(
                            "broadcast needs a Cx1x1x1 operand matching {full}, got {a}, {b} -> {out}"
                        )));
                    }
                }
            }
        }
        LayerOp::GlobalAvgPool => {
            if out != TensorShape::new(input.channels, 1, 1, 1) {
                return Err(mismatch(format!("global pooling maps {input} to {out}")));
            }
        }
    }
    Ok(())
}

/// Kahn's algorithm; ready nodes are released in lexicographic id order.
fn topo_order<'a>(
    ids: impl Iterator<Item = &'a str>,
    edges: &[(&'a str, &'a str)],
) -> Result<Vec<String>> {
    let mut indegree: BTreeMap<&str, usize> = ids.map(|id| (id, 0)).collect();
    let mut succ: HashMap<&str, Vec<&str>> = HashMap::new();
    for &(p, c) in edges {
        *indegree.get_mut(c).expect("edge endpoints are known") += 1;
        succ.entry(p).or_default().push(c);
    }
    let mut ready: BTreeSet<&str> = indegree.iter().filter(|(_, &d)| d == 0).map(|(&id, _)| id).collect();
    let mut order = Vec::with_capacity(indegree.len());
    while let Some(id) = ready.pop_first() {
        order.push(id.to_owned());
        for &c in succ.get(id).map(Vec::as_slice).unwrap_or_default() {
            let d = indegree.get_mut(c).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() != indegree.len() {
        let stuck = indegree
            .iter()
            .find(|(id, _)| !order.iter().any(|o| o == *id))
            .map(|(id, _)| id.to_string())
            .unwrap_or_default();
        return Err(Error::Cycle(stuck));
    }
    Ok(order)
}

/// Deterministic topological order of the DAG (ties broken by id).
pub fn toposort(dag: &ModelDag) -> Result<Vec<String>> {
    let edges: Vec<(&str, &str)> = dag.arcs.iter().map(|(p, c)| (p.as_str(), c.as_str())).collect();
    topo_order(dag.nodes.keys().map(String::as_str), &edges)
}

/// Total workload in GOps, counting convolutions as MACs.
pub fn model_workload(dag: &ModelDag) -> f64 {
    dag.nodes.values().map(LayerDescriptor::macs).sum::<u64>() as f64 / 1e9
}

// ---------------------------------------------------------------------------
// JSON schema

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    name: String,
    layers: Vec<LayerEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    id: String,
    kind: LayerKind,
    #[serde(default)]
    inputs: Vec<String>,
    output_shape: [usize; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_shape: Option<[usize; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    groups: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    act_type: Option<ActivationType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ew_type: Option<EwType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ew_mode: Option<EwMode>,
}

impl LayerEntry {
    fn into_spec(self) -> Result<LayerSpec> {
        let field = |name: &str| Error::Schema(format!("`{}`: missing `{name}`", self.id));
        let window = || -> Result<Window> {
            let kernel = self.kernel.ok_or_else(|| field("kernel"))?;
            Ok(Window::new(kernel, self.stride.unwrap_or([1; 3]), self.padding.unwrap_or([0; 3])))
        };
        let op = match self.kind {
            LayerKind::Conv3d => LayerOp::Conv3d { window: window()?, groups: self.groups.unwrap_or(1) },
            LayerKind::Pool3d => LayerOp::Pool3d { window: window()? },
            LayerKind::Activation => LayerOp::Activation(self.act_type.ok_or_else(|| field("act_type"))?),
            LayerKind::ElementWise => LayerOp::ElementWise {
                op: self.ew_type.ok_or_else(|| field("ew_type"))?,
                mode: self.ew_mode.unwrap_or_default(),
            },
            LayerKind::GlobalAvgPool => LayerOp::GlobalAvgPool,
        };
        Ok(LayerSpec {
            id: self.id,
            op,
            inputs: self.inputs,
            output_shape: TensorShape::from_array(self.output_shape),
            input_shape: self.input_shape.map(TensorShape::from_array),
        })
    }

    fn from_spec(spec: LayerSpec) -> Self {
        let mut entry = LayerEntry {
            id: spec.id,
            kind: spec.op.kind(),
            inputs: spec.inputs,
            output_shape: spec.output_shape.to_array(),
            input_shape: spec.input_shape.map(TensorShape::to_array),
            kernel: None,
            stride: None,
            padding: None,
            groups: None,
            act_type: None,
            ew_type: None,
            ew_mode: None,
        };
        match spec.op {
            LayerOp::Conv3d { window, groups } => {
                entry.kernel = Some(window.kernel);
                entry.stride = Some(window.stride);
                entry.padding = Some(window.padding);
                entry.groups = Some(groups);
            }
            LayerOp::Pool3d { window } => {
                entry.kernel = Some(window.kernel);
                entry.stride = Some(window.stride);
                entry.padding = Some(window.padding);
            }
            LayerOp::Activation(t) => entry.act_type = Some(t),
            LayerOp::ElementWise { op, mode } => {
                entry.ew_type = Some(op);
                entry.ew_mode = Some(mode);
            }
            LayerOp::GlobalAvgPool => {}
        }
        entry
    }
}

/// Parses and validates a JSON model description.
pub fn parse_model(text: &str) -> Result<ModelDag> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    let specs = file.layers.into_iter().map(LayerEntry::into_spec).collect::<Result<Vec<_>>>()?;
    ModelDag::new(file.name, specs)
}

/// Serialises a DAG back to the JSON schema, layers in topological order.
pub fn serialize_model(dag: &ModelDag) -> String {
    let file = ModelFile {
        name: dag.name.clone(),
        layers: dag.to_specs().into_iter().map(LayerEntry::from_spec).collect(),
    };
    serde_json::to_string_pretty(&file).expect("model serialisation cannot fail")
}

// ---------------------------------------------------------------------------
// Programmatic construction

/// Builds models layer by layer, inferring output shapes.
///
/// ```
/// use voxflow::model_ir::{ModelBuilder, TensorShape, ActivationType};
/// let mut b = ModelBuilder::new("toy");
/// let x = b.input_conv("c1", TensorShape::new(3, 8, 8, 4), 16, [3, 3, 3], [1, 1, 1], [1, 1, 1], 1);
/// let y = b.activation("r1", &x, ActivationType::Relu);
/// let dag = b.build().unwrap();
/// assert_eq!(dag.layer(&y).unwrap().output_shape, TensorShape::new(16, 8, 8, 4));
/// ```
#[derive(Default)]
pub struct ModelBuilder {
    name: String,
    specs: Vec<LayerSpec>,
    shapes: HashMap<String, TensorShape>,
}

impl ModelBuilder {
    pub fn new(name: impl Into<String>) -> Self {
        ModelBuilder { name: name.into(), ..Default::default() }
    }

    pub fn shape(&self, id: &str) -> TensorShape {
        self.shapes[id]
    }

    fn push(&mut self, id: &str, op: LayerOp, inputs: &[&str], out: TensorShape, input_shape: Option<TensorShape>) -> String {
        self.specs.push(LayerSpec {
            id: id.to_owned(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            output_shape: out,
            input_shape,
        });
        self.shapes.insert(id.to_owned(), out);
        id.to_owned()
    }

    fn windowed(input: TensorShape, channels: usize, window: &Window) -> TensorShape {
        let d = window.output_dims(&input).expect("window does not fit the input");
        TensorShape::new(channels, d[0], d[1], d[2])
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(&mut self, id: &str, input: &str, filters: usize, kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3], groups: usize) -> String {
        let window = Window::new(kernel, stride, padding);
        let out = Self::windowed(self.shapes[input], filters, &window);
        self.push(id, LayerOp::Conv3d { window, groups }, &[input], out, None)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn input_conv(&mut self, id: &str, shape: TensorShape, filters: usize, kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3], groups: usize) -> String {
        let window = Window::new(kernel, stride, padding);
        let out = Self::windowed(shape, filters, &window);
        self.push(id, LayerOp::Conv3d { window, groups }, &[], out, Some(shape))
    }

    pub fn pool(&mut self, id: &str, input: &str, kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> String {
        let window = Window::new(kernel, stride, padding);
        let shape = self.shapes[input];
        let out = Self::windowed(shape, shape.channels, &window);
        self.push(id, LayerOp::Pool3d { window }, &[input], out, None)
    }

    pub fn activation(&mut self, id: &str, input: &str, act: ActivationType) -> String {
        let out = self.shapes[input];
        self.push(id, LayerOp::Activation(act), &[input], out, None)
    }

    pub fn input_activation(&mut self, id: &str, shape: TensorShape, act: ActivationType) -> String {
        self.push(id, LayerOp::Activation(act), &[], shape, Some(shape))
    }

    pub fn elementwise(&mut self, id: &str, a: &str, b: &str, op: EwType, mode: EwMode) -> String {
        let (sa, sb) = (self.shapes[a], self.shapes[b]);
        let out = if mode == EwMode::Broadcast && sa.is_point() { sb } else { sa };
        self.push(id, LayerOp::ElementWise { op, mode }, &[a, b], out, None)
    }

    pub fn global_avg_pool(&mut self, id: &str, input: &str) -> String {
        let c = self.shapes[input].channels;
        self.push(id, LayerOp::GlobalAvgPool, &[input], TensorShape::new(c, 1, 1, 1), None)
    }

    pub fn build(self) -> Result<ModelDag> {
        ModelDag::new(self.name, self.specs)
    }
}

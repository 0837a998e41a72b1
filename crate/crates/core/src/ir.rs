//! Stencil kernel intermediate representation.
//!
//! A [`StencilSpec`] names the arrays a kernel touches, the taps it reads
//! per output point (cell offsets, never byte offsets), its coefficients and
//! an arithmetic expression tree over both. Expressions live in a small
//! arena whose canonical order is post-order, so children always precede
//! their parents.

use std::collections::HashMap;
use std::fmt;

use crate::error::IrError;

/// Bytes per grid element; all kernels operate on FP64 data.
pub const ELEM_BYTES: usize = 8;

/// Offset of a tap relative to the output point, in cells: `[x, y, z]`.
///
/// Ordering follows memory order (z, then y, then x).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Default)]
pub struct Offset(pub [i32; 3]);

impl Offset {
    pub fn new(x: i32, y: i32, z: i32) -> Self {
        Offset([x, y, z])
    }

    pub fn x(&self) -> i32 {
        self.0[0]
    }

    pub fn y(&self) -> i32 {
        self.0[1]
    }

    pub fn z(&self) -> i32 {
        self.0[2]
    }

    /// Chebyshev (max-abs) norm.
    pub fn chebyshev(&self) -> u32 {
        self.0.iter().map(|c| c.unsigned_abs()).max().unwrap_or(0)
    }
}

impl Ord for Offset {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.z(), self.y(), self.x()).cmp(&(other.z(), other.y(), other.x()))
    }
}

impl PartialOrd for Offset {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Offset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.x(), self.y(), self.z())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ArrayRole {
    /// Current-iteration grid; swapped with the output between iterations.
    Input,
    /// Next-iteration grid.
    Output,
    /// Additional read-only input (previous time step, source terms, ...).
    Extra,
}

impl ArrayRole {
    fn keyword(self) -> &'static str {
        match self {
            ArrayRole::Input => "input",
            ArrayRole::Output => "output",
            ArrayRole::Extra => "extra",
        }
    }
}

#[derive(Clone, PartialEq, Debug)]
pub struct IoArray {
    pub name: String,
    pub role: ArrayRole,
}

#[derive(Clone, PartialEq, Debug)]
pub struct Tap {
    pub name: String,
    /// Index into [`StencilSpec::arrays`].
    pub array: usize,
    pub offset: Offset,
}

#[derive(Clone, Copy, PartialEq, Debug)]
pub enum CoeffValue {
    Const(f64),
    /// Value bound at run time (e.g. a time-dependent scalar).
    Dynamic,
}

#[derive(Clone, PartialEq, Debug)]
pub struct Coeff {
    pub name: String,
    pub value: CoeffValue,
}

pub type NodeId = usize;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum Node {
    Tap(usize),
    Coeff(usize),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `a * b + c`, rounded once.
    Fma(NodeId, NodeId, NodeId),
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        matches!(self, Node::Tap(_) | Node::Coeff(_))
    }

    pub fn flops(&self) -> usize {
        match self {
            Node::Tap(_) | Node::Coeff(_) => 0,
            Node::Add(..) | Node::Mul(..) => 1,
            Node::Fma(..) => 2,
        }
    }

    /// Operands in evaluation order (the accumulator of an FMA comes first).
    pub fn operands(&self) -> Vec<NodeId> {
        match *self {
            Node::Tap(_) | Node::Coeff(_) => Vec::new(),
            Node::Add(a, b) | Node::Mul(a, b) => vec![a, b],
            Node::Fma(a, b, c) => vec![c, a, b],
        }
    }
}

/// Expression tree stored as an arena; parents always follow their children.
#[derive(Clone, PartialEq, Debug)]
pub struct Expr {
    nodes: Vec<Node>,
    root: NodeId,
}

impl Expr {
    /// Builds an expression, checking that every child reference points backwards.
    pub fn new(nodes: Vec<Node>, root: NodeId) -> Result<Self, IrError> {
        if root >= nodes.len() {
            return Err(IrError::Structure(format!(
                "root {root} outside arena of {} nodes",
                nodes.len()
            )));
        }
        for (id, node) in nodes.iter().enumerate() {
            for child in node.operands() {
                if child >= id {
                    return Err(IrError::Structure(format!(
                        "node {id} references node {child} which does not precede it"
                    )));
                }
            }
        }
        Ok(Expr { nodes, root })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn node(&self, id: NodeId) -> Node {
        self.nodes[id]
    }

    /// FLOPs per evaluation: add and mul count one, fma counts two.
    pub fn flops(&self) -> usize {
        self.nodes.iter().map(Node::flops).sum()
    }

    /// Number of arithmetic instructions needed to evaluate the tree.
    pub fn op_count(&self) -> usize {
        self.nodes.iter().filter(|n| !n.is_leaf()).count()
    }

    /// Arithmetic nodes in source evaluation order.
    pub fn ops_in_order(&self) -> Vec<NodeId> {
        let mut order = Vec::new();
        self.visit_post(self.root, &mut order);
        order.retain(|&id| !self.nodes[id].is_leaf());
        order
    }

    fn visit_post(&self, id: NodeId, out: &mut Vec<NodeId>) {
        for child in self.nodes[id].operands() {
            self.visit_post(child, out);
        }
        out.push(id);
    }

    /// Rebuilds the arena in post-order from the root with shared leaves.
    pub fn canonical(&self) -> Expr {
        let mut nodes = Vec::new();
        let mut leaves: HashMap<Node, NodeId> = HashMap::new();
        let root = self.canon_rec(self.root, &mut nodes, &mut leaves);
        Expr { nodes, root }
    }

    fn canon_rec(
        &self,
        id: NodeId,
        nodes: &mut Vec<Node>,
        leaves: &mut HashMap<Node, NodeId>,
    ) -> NodeId {
        let node = self.nodes[id];
        let rebuilt = match node {
            Node::Tap(_) | Node::Coeff(_) => {
                if let Some(&existing) = leaves.get(&node) {
                    return existing;
                }
                nodes.push(node);
                leaves.insert(node, nodes.len() - 1);
                return nodes.len() - 1;
            }
            Node::Add(a, b) => {
                let a = self.canon_rec(a, nodes, leaves);
                let b = self.canon_rec(b, nodes, leaves);
                Node::Add(a, b)
            }
            Node::Mul(a, b) => {
                let a = self.canon_rec(a, nodes, leaves);
                let b = self.canon_rec(b, nodes, leaves);
                Node::Mul(a, b)
            }
            Node::Fma(a, b, c) => {
                let c = self.canon_rec(c, nodes, leaves);
                let a = self.canon_rec(a, nodes, leaves);
                let b = self.canon_rec(b, nodes, leaves);
                Node::Fma(a, b, c)
            }
        };
        nodes.push(rebuilt);
        nodes.len() - 1
    }

    /// Evaluates the tree. `tap` maps a tap id to its value.
    pub fn eval(&self, tap: impl Fn(usize) -> f64, coeffs: &[f64]) -> f64 {
        let mut vals = vec![0.0f64; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            vals[id] = match *node {
                Node::Tap(t) => tap(t),
                Node::Coeff(c) => coeffs[c],
                Node::Add(a, b) => vals[a] + vals[b],
                Node::Mul(a, b) => vals[a] * vals[b],
                Node::Fma(a, b, c) => vals[a].mul_add(vals[b], vals[c]),
            };
        }
        vals[self.root]
    }

    /// Applies a reassociation policy, returning the tree that will be evaluated.
    pub fn reassociate(&self, policy: ReassocPolicy) -> Expr {
        match policy {
            ReassocPolicy::Source | ReassocPolicy::Reorder => self.clone(),
            ReassocPolicy::Balanced => {
                let mut b = Builder::default();
                let root = balance_rec(self, self.root, &mut b);
                Expr { nodes: b.nodes, root }.canonical()
            }
        }
    }
}

/// How the code generators may restructure a kernel's arithmetic.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Default)]
pub enum ReassocPolicy {
    /// Source tree, source operation order; unrolled points are concatenated.
    #[default]
    Source,
    /// Source tree; operations are list-scheduled across points. Bit-identical
    /// to `Source`.
    Reorder,
    /// Sums are split into independent partial chains joined by a balanced
    /// add tree, then list-scheduled. FLOP count is preserved.
    Balanced,
}

impl ReassocPolicy {
    pub fn name(self) -> &'static str {
        match self {
            ReassocPolicy::Source => "source",
            ReassocPolicy::Reorder => "reorder",
            ReassocPolicy::Balanced => "balanced",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "source" | "none" => Some(ReassocPolicy::Source),
            "reorder" => Some(ReassocPolicy::Reorder),
            "balanced" | "aggressive" => Some(ReassocPolicy::Balanced),
            _ => None,
        }
    }

    /// Policies that leave the arithmetic tree untouched.
    pub fn preserves_tree(self) -> bool {
        !matches!(self, ReassocPolicy::Balanced)
    }
}

#[derive(Default)]
struct Builder {
    nodes: Vec<Node>,
}

impl Builder {
    fn push(&mut self, n: Node) -> NodeId {
        self.nodes.push(n);
        self.nodes.len() - 1
    }
}

enum Term {
    Plain(NodeId),
    Product(NodeId, NodeId),
}

fn collect_terms(e: &Expr, id: NodeId, out: &mut Vec<(NodeId, Option<NodeId>)>) {
    match e.node(id) {
        Node::Add(a, b) => {
            collect_terms(e, a, out);
            collect_terms(e, b, out);
        }
        Node::Fma(a, b, c) => {
            collect_terms(e, c, out);
            out.push((a, Some(b)));
        }
        Node::Mul(a, b) => out.push((a, Some(b))),
        _ => out.push((id, None)),
    }
}

fn balance_rec(e: &Expr, id: NodeId, b: &mut Builder) -> NodeId {
    match e.node(id) {
        n @ (Node::Tap(_) | Node::Coeff(_)) => b.push(n),
        Node::Mul(x, y) => {
            let x = balance_rec(e, x, b);
            let y = balance_rec(e, y, b);
            b.push(Node::Mul(x, y))
        }
        Node::Add(..) | Node::Fma(..) => {
            let mut raw = Vec::new();
            collect_terms(e, id, &mut raw);
            let terms: Vec<Term> = raw
                .into_iter()
                .map(|(x, y)| match y {
                    None => Term::Plain(balance_rec(e, x, b)),
                    Some(y) => {
                        let x = balance_rec(e, x, b);
                        let y = balance_rec(e, y, b);
                        Term::Product(x, y)
                    }
                })
                .collect();
            build_balanced_sum(terms, b)
        }
    }
}

fn build_balanced_sum(terms: Vec<Term>, b: &mut Builder) -> NodeId {
    let n = terms.len();
    let products = terms
        .iter()
        .filter(|t| matches!(t, Term::Product(..)))
        .count();
    let chains = if products == 0 { n } else { n.div_ceil(4).clamp(1, 4) };
    // Round-robin terms onto chains, plain terms first so products can fuse.
    let mut lanes: Vec<Vec<Term>> = (0..chains).map(|_| Vec::new()).collect();
    let (plain, prods): (Vec<Term>, Vec<Term>) =
        terms.into_iter().partition(|t| matches!(t, Term::Plain(_)));
    for (i, t) in plain.into_iter().chain(prods).enumerate() {
        lanes[i % chains].push(t);
    }
    let mut partials: Vec<NodeId> = Vec::with_capacity(chains);
    for lane in lanes {
        let mut acc: Option<NodeId> = None;
        for t in lane {
            acc = Some(match (acc, t) {
                (None, Term::Plain(x)) => x,
                (None, Term::Product(x, y)) => b.push(Node::Mul(x, y)),
                (Some(a), Term::Plain(x)) => b.push(Node::Add(a, x)),
                (Some(a), Term::Product(x, y)) => b.push(Node::Fma(x, y, a)),
            });
        }
        if let Some(a) = acc {
            partials.push(a);
        }
    }
    while partials.len() > 1 {
        let mut next = Vec::with_capacity(partials.len().div_ceil(2));
        for pair in partials.chunks(2) {
            next.push(match *pair {
                [x, y] => b.push(Node::Add(x, y)),
                [x] => x,
                _ => unreachable!(),
            });
        }
        partials = next;
    }
    partials[0]
}

/// Declarative stencil kernel description.
#[derive(Clone, PartialEq, Debug)]
pub struct StencilSpec {
    pub name: String,
    pub dims: usize,
    pub radius: u32,
    pub arrays: Vec<IoArray>,
    pub taps: Vec<Tap>,
    pub coeffs: Vec<Coeff>,
    pub expr: Expr,
}

impl StencilSpec {
    /// Checks every structural invariant of a kernel.
    pub fn validate(&self) -> Result<(), IrError> {
        if self.dims != 2 && self.dims != 3 {
            return Err(IrError::BadDims(self.dims));
        }
        if self.taps.is_empty() {
            return Err(IrError::NoTaps);
        }
        let mut names: HashMap<&str, ()> = HashMap::new();
        let all_names = self
            .arrays
            .iter()
            .map(|a| a.name.as_str())
            .chain(self.taps.iter().map(|t| t.name.as_str()))
            .chain(self.coeffs.iter().map(|c| c.name.as_str()));
        for name in all_names {
            if name.is_empty() || name.starts_with('_') {
                return Err(IrError::Structure(format!("invalid identifier `{name}`")));
            }
            if names.insert(name, ()).is_some() {
                return Err(IrError::Duplicate(name.to_string()));
            }
        }
        let count = |role| self.arrays.iter().filter(|a| a.role == role).count();
        if count(ArrayRole::Input) != 1 || count(ArrayRole::Output) != 1 {
            return Err(IrError::Structure(
                "kernel needs exactly one input and one output array".into(),
            ));
        }
        for tap in &self.taps {
            let Some(array) = self.arrays.get(tap.array) else {
                return Err(IrError::Structure(format!(
                    "tap `{}` names array {} which does not exist",
                    tap.name, tap.array
                )));
            };
            if array.role == ArrayRole::Output {
                return Err(IrError::Structure(format!(
                    "tap `{}` reads the output array",
                    tap.name
                )));
            }
            if self.dims == 2 && tap.offset.z() != 0 {
                return Err(IrError::Structure(format!(
                    "tap `{}` has a z offset in a 2D kernel",
                    tap.name
                )));
            }
            if tap.offset.chebyshev() > self.radius {
                return Err(IrError::TapBeyondRadius {
                    name: tap.name.clone(),
                    offset: tap.offset,
                    radius: self.radius,
                });
            }
        }
        let mut tap_uses = vec![0usize; self.taps.len()];
        let mut coeff_uses = vec![0usize; self.coeffs.len()];
        for node in self.expr.nodes() {
            match *node {
                Node::Tap(t) => match tap_uses.get_mut(t) {
                    Some(u) => *u += 1,
                    None => return Err(IrError::Structure(format!("dangling tap id {t}"))),
                },
                Node::Coeff(c) => match coeff_uses.get_mut(c) {
                    Some(u) => *u += 1,
                    None => return Err(IrError::Structure(format!("dangling coefficient id {c}"))),
                },
                _ => {}
            }
        }
        // Leaves are shared in the arena, so count references from parents.
        let mut refs = vec![0usize; self.expr.nodes().len()];
        for node in self.expr.nodes() {
            for child in node.operands() {
                refs[child] += 1;
            }
        }
        refs[self.expr.root()] += 1;
        for (id, node) in self.expr.nodes().iter().enumerate() {
            match *node {
                Node::Tap(t) if refs[id] != 1 => {
                    return Err(IrError::Structure(format!(
                        "tap `{}` must be read exactly once, found {} uses",
                        self.taps[t].name, refs[id]
                    )))
                }
                Node::Add(..) | Node::Mul(..) | Node::Fma(..) if refs[id] != 1 => {
                    return Err(IrError::Structure(format!(
                        "operation node {id} is shared or unused"
                    )))
                }
                _ => {}
            }
        }
        if let Some(t) = tap_uses.iter().position(|&u| u == 0) {
            return Err(IrError::Structure(format!("tap `{}` is never used", self.taps[t].name)));
        }
        if let Some(c) = coeff_uses.iter().position(|&u| u == 0) {
            return Err(IrError::Structure(format!(
                "coefficient `{}` is never used",
                self.coeffs[c].name
            )));
        }
        Ok(())
    }

    /// Index of the current-iteration input array.
    pub fn input_array(&self) -> usize {
        self.arrays
            .iter()
            .position(|a| a.role == ArrayRole::Input)
            .expect("validated kernel has an input array")
    }

    pub fn output_array(&self) -> usize {
        self.arrays
            .iter()
            .position(|a| a.role == ArrayRole::Output)
            .expect("validated kernel has an output array")
    }

    /// Arrays that are read (input first, then extras), in declaration order.
    pub fn read_arrays(&self) -> Vec<usize> {
        let mut v = vec![self.input_array()];
        v.extend(
            self.arrays
                .iter()
                .enumerate()
                .filter(|(_, a)| a.role == ArrayRole::Extra)
                .map(|(i, _)| i),
        );
        v
    }

    /// Largest absolute tap offset per axis for one array.
    pub fn reach(&self, array: usize) -> [usize; 3] {
        let mut r = [0usize; 3];
        for tap in self.taps.iter().filter(|t| t.array == array) {
            for (axis, slot) in r.iter_mut().enumerate() {
                *slot = (*slot).max(tap.offset.0[axis].unsigned_abs() as usize);
            }
        }
        r
    }

    /// Coefficient values, with dynamic coefficients bound to `dynamic`.
    pub fn coeff_values(&self, dynamic: f64) -> Vec<f64> {
        self.coeffs
            .iter()
            .map(|c| match c.value {
                CoeffValue::Const(v) => v,
                CoeffValue::Dynamic => dynamic,
            })
            .collect()
    }
}

/// FLOPs per grid point (add, mul = 1; fma = 2).
pub fn flop_count(spec: &StencilSpec) -> Result<usize, IrError> {
    Expr::new(spec.expr.nodes().to_vec(), spec.expr.root())?;
    Ok(spec.expr.flops())
}

/// Extent of a grid tile including its halo.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TileShape {
    /// Cells per axis `[x, y, z]`, halo included. 2D tiles have `z == 1`.
    pub extent: [usize; 3],
    /// Halo width per axis; zero on unused axes.
    pub halo: [usize; 3],
}

impl TileShape {
    /// Cubic tile of edge `n` for the given kernel.
    pub fn for_spec(spec: &StencilSpec, n: usize) -> Result<Self, IrError> {
        let r = spec.radius as usize;
        let shape = if spec.dims == 2 {
            TileShape {
                extent: [n, n, 1],
                halo: [r, r, 0],
            }
        } else {
            TileShape {
                extent: [n, n, n],
                halo: [r, r, r],
            }
        };
        shape.check()?;
        Ok(shape)
    }

    pub fn new(extent: [usize; 3], halo: [usize; 3]) -> Result<Self, IrError> {
        let shape = TileShape { extent, halo };
        shape.check()?;
        Ok(shape)
    }

    fn check(&self) -> Result<(), IrError> {
        for axis in 0..3 {
            if self.extent[axis] <= 2 * self.halo[axis] {
                return Err(IrError::Structure(format!(
                    "tile extent {} on axis {axis} leaves no interior with halo {}",
                    self.extent[axis], self.halo[axis]
                )));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> usize {
        if self.extent[2] == 1 && self.halo[2] == 0 {
            2
        } else {
            3
        }
    }

    pub fn interior(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.extent[a] - 2 * self.halo[a])
    }

    pub fn interior_points(&self) -> usize {
        self.interior().iter().product()
    }

    pub fn cells(&self) -> usize {
        self.extent.iter().product()
    }

    pub fn bytes(&self) -> usize {
        self.cells() * ELEM_BYTES
    }

    /// Linear cell index, x fastest.
    pub fn lin(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.extent[1] + y) * self.extent[0] + x
    }

    /// Element distance between neighbouring cells along `[x, y, z]`.
    pub fn strides(&self) -> [usize; 3] {
        [1, self.extent[0], self.extent[0] * self.extent[1]]
    }

    pub fn is_interior(&self, x: usize, y: usize, z: usize) -> bool {
        let p = [x, y, z];
        (0..3).all(|a| p[a] >= self.halo[a] && p[a] < self.extent[a] - self.halo[a])
    }
}

// ---------------------------------------------------------------------------
// Text format
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    None,
    Grid,
    Arrays,
    Taps,
    Coeffs,
    Expr,
}

fn syntax(line: usize, col: usize, msg: impl Into<String>) -> IrError {
    IrError::Syntax {
        line,
        col,
        msg: msg.into(),
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

/// Column (1-based) of `word` within `line`.
fn col_of(line: &str, word: &str) -> usize {
    let base = line.as_ptr() as usize;
    let w = word.as_ptr() as usize;
    if w >= base && w <= base + line.len() {
        w - base + 1
    } else {
        1
    }
}

/// Parses the line-oriented kernel description format.
pub fn parse_spec(text: &str) -> Result<StencilSpec, IrError> {
    let mut section = Section::None;
    let mut name: Option<String> = None;
    let mut dims: Option<usize> = None;
    let mut radius: Option<u32> = None;
    let mut arrays: Vec<IoArray> = Vec::new();
    let mut taps: Vec<Tap> = Vec::new();
    let mut coeffs: Vec<Coeff> = Vec::new();
    let mut expr_lines: Vec<(usize, &str)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = strip_comment(raw);
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with('[') {
            section = match trimmed {
                "[grid]" => Section::Grid,
                "[arrays]" => Section::Arrays,
                "[taps]" => Section::Taps,
                "[coeffs]" => Section::Coeffs,
                "[expr]" => Section::Expr,
                _ => {
                    return Err(syntax(
                        lineno,
                        col_of(raw, trimmed),
                        format!("unknown section {trimmed}"),
                    ))
                }
            };
            continue;
        }
        let words: Vec<&str> = trimmed.split_whitespace().collect();
        match section {
            Section::None => {
                return Err(syntax(lineno, col_of(raw, trimmed), "content before first section"))
            }
            Section::Grid => {
                let Some((key, value)) = trimmed.split_once('=') else {
                    return Err(syntax(lineno, col_of(raw, trimmed), "expected `key = value`"));
                };
                let (key, value) = (key.trim(), value.trim());
                let vcol = col_of(raw, value);
                match key {
                    "name" => name = Some(value.to_string()),
                    "dims" => {
                        dims = Some(
                            value
                                .parse()
                                .map_err(|_| syntax(lineno, vcol, "dims must be an integer"))?,
                        )
                    }
                    "radius" => {
                        radius = Some(
                            value
                                .parse()
                                .map_err(|_| syntax(lineno, vcol, "radius must be an integer"))?,
                        )
                    }
                    _ => {
                        return Err(syntax(
                            lineno,
                            col_of(raw, key),
                            format!("unknown grid key `{key}`"),
                        ))
                    }
                }
            }
            Section::Arrays => {
                if words.len() != 2 {
                    return Err(syntax(lineno, col_of(raw, trimmed), "expected `<name> <role>`"));
                }
                let role = match words[1] {
                    "input" => ArrayRole::Input,
                    "output" => ArrayRole::Output,
                    "extra" => ArrayRole::Extra,
                    other => {
                        return Err(syntax(
                            lineno,
                            col_of(raw, words[1]),
                            format!("unknown array role `{other}`"),
                        ))
                    }
                };
                arrays.push(IoArray {
                    name: words[0].to_string(),
                    role,
                });
            }
            Section::Taps => {
                let d = dims.ok_or_else(|| {
                    syntax(lineno, 1, "[grid] dims must precede the tap list")
                })?;
                if words.len() != 2 + d {
                    return Err(syntax(
                        lineno,
                        col_of(raw, trimmed),
                        format!("expected `<name> <array> {}`", ["<dx>", "<dy>", "<dz>"][..d].join(" ")),
                    ));
                }
                let array = arrays
                    .iter()
                    .position(|a| a.name == words[1])
                    .ok_or_else(|| {
                        syntax(lineno, col_of(raw, words[1]), format!("unknown array `{}`", words[1]))
                    })?;
                let mut off = [0i32; 3];
                for axis in 0..d {
                    let w = words[2 + axis];
                    off[axis] = w
                        .parse()
                        .map_err(|_| syntax(lineno, col_of(raw, w), "offset must be an integer"))?;
                }
                taps.push(Tap {
                    name: words[0].to_string(),
                    array,
                    offset: Offset(off),
                });
            }
            Section::Coeffs => {
                if words.len() != 2 {
                    return Err(syntax(
                        lineno,
                        col_of(raw, trimmed),
                        "expected `<name> <value|dynamic>`",
                    ));
                }
                let value = if words[1] == "dynamic" {
                    CoeffValue::Dynamic
                } else {
                    CoeffValue::Const(words[1].parse().map_err(|_| {
                        syntax(lineno, col_of(raw, words[1]), "coefficient must be a number")
                    })?)
                };
                coeffs.push(Coeff {
                    name: words[0].to_string(),
                    value,
                });
            }
            Section::Expr => expr_lines.push((lineno, line)),
        }
    }

    let name = name.ok_or_else(|| syntax(1, 1, "missing `name` in [grid]"))?;
    let dims = dims.ok_or_else(|| syntax(1, 1, "missing `dims` in [grid]"))?;
    let radius = radius.ok_or_else(|| syntax(1, 1, "missing `radius` in [grid]"))?;
    if dims != 2 && dims != 3 {
        return Err(IrError::BadDims(dims));
    }
    if taps.is_empty() {
        return Err(IrError::NoTaps);
    }
    let output = arrays
        .iter()
        .find(|a| a.role == ArrayRole::Output)
        .map(|a| a.name.clone())
        .ok_or_else(|| IrError::Structure("no output array declared".into()))?;
    let expr = parse_expr(&expr_lines, &taps, &coeffs, &output)?;
    let spec = StencilSpec {
        name,
        dims,
        radius,
        arrays,
        taps,
        coeffs,
        expr,
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Clone, Debug, PartialEq)]
enum Tok<'a> {
    Open,
    Close,
    Eq,
    Ident(&'a str),
}

fn tokenize<'a>(lines: &[(usize, &'a str)]) -> Result<Vec<(Tok<'a>, usize, usize)>, IrError> {
    let mut toks = Vec::new();
    for &(lineno, line) in lines {
        let bytes = line.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            let c = bytes[i];
            let col = i + 1;
            match c {
                b' ' | b'\t' | b'\r' => i += 1,
                b'(' => {
                    toks.push((Tok::Open, lineno, col));
                    i += 1;
                }
                b')' => {
                    toks.push((Tok::Close, lineno, col));
                    i += 1;
                }
                b'=' => {
                    toks.push((Tok::Eq, lineno, col));
                    i += 1;
                }
                c if c.is_ascii_alphanumeric() || c == b'_' => {
                    let start = i;
                    while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_')
                    {
                        i += 1;
                    }
                    toks.push((Tok::Ident(&line[start..i]), lineno, col));
                }
                _ => {
                    return Err(syntax(
                        lineno,
                        col,
                        format!("unexpected character `{}`", c as char),
                    ))
                }
            }
        }
    }
    Ok(toks)
}

struct ExprParser<'a, 'b> {
    toks: Vec<(Tok<'a>, usize, usize)>,
    pos: usize,
    nodes: Vec<Node>,
    taps: HashMap<&'b str, usize>,
    coeffs: HashMap<&'b str, usize>,
    bindings: HashMap<&'a str, (NodeId, bool)>,
}

impl<'a, 'b> ExprParser<'a, 'b> {
    fn here(&self) -> (usize, usize) {
        match self.toks.get(self.pos).or_else(|| self.toks.last()) {
            Some(&(_, l, c)) => (l, c),
            None => (1, 1),
        }
    }

    fn next(&mut self) -> Result<(Tok<'a>, usize, usize), IrError> {
        let (l, c) = self.here();
        let t = self
            .toks
            .get(self.pos)
            .cloned()
            .ok_or_else(|| syntax(l, c, "unexpected end of expression"))?;
        self.pos += 1;
        Ok(t)
    }

    fn term(&mut self) -> Result<NodeId, IrError> {
        let (tok, l, c) = self.next()?;
        match tok {
            Tok::Ident(name) => {
                if let Some(&t) = self.taps.get(name) {
                    self.nodes.push(Node::Tap(t));
                    Ok(self.nodes.len() - 1)
                } else if let Some(&k) = self.coeffs.get(name) {
                    self.nodes.push(Node::Coeff(k));
                    Ok(self.nodes.len() - 1)
                } else if let Some(entry) = self.bindings.get_mut(name) {
                    if entry.1 {
                        return Err(syntax(l, c, format!("binding `{name}` used more than once")));
                    }
                    entry.1 = true;
                    Ok(entry.0)
                } else {
                    Err(syntax(l, c, format!("unknown identifier `{name}`")))
                }
            }
            Tok::Open => {
                let (op, ol, oc) = self.next()?;
                let Tok::Ident(op) = op else {
                    return Err(syntax(ol, oc, "expected operator name"));
                };
                let arity = match op {
                    "add" | "mul" => 2,
                    "fma" => 3,
                    other => return Err(syntax(ol, oc, format!("unknown operator `{other}`"))),
                };
                let mut args = Vec::with_capacity(3);
                for _ in 0..arity {
                    args.push(self.term()?);
                }
                let (close, cl, cc) = self.next()?;
                if close != Tok::Close {
                    return Err(syntax(cl, cc, format!("`{op}` takes {arity} operands")));
                }
                let node = match op {
                    "add" => Node::Add(args[0], args[1]),
                    "mul" => Node::Mul(args[0], args[1]),
                    _ => Node::Fma(args[0], args[1], args[2]),
                };
                self.nodes.push(node);
                Ok(self.nodes.len() - 1)
            }
            _ => Err(syntax(l, c, "expected operand")),
        }
    }
}

fn parse_expr(
    lines: &[(usize, &str)],
    taps: &[Tap],
    coeffs: &[Coeff],
    output: &str,
) -> Result<Expr, IrError> {
    let toks = tokenize(lines)?;
    if toks.is_empty() {
        return Err(IrError::Structure("empty [expr] section".into()));
    }
    let mut p = ExprParser {
        toks,
        pos: 0,
        nodes: Vec::new(),
        taps: taps.iter().enumerate().map(|(i, t)| (t.name.as_str(), i)).collect(),
        coeffs: coeffs.iter().enumerate().map(|(i, c)| (c.name.as_str(), i)).collect(),
        bindings: HashMap::new(),
    };
    let mut root = None;
    while p.pos < p.toks.len() {
        let (tok, l, c) = p.next()?;
        let Tok::Ident(name) = tok else {
            return Err(syntax(l, c, "expected binding name"));
        };
        let (eq, el, ec) = p.next()?;
        if eq != Tok::Eq {
            return Err(syntax(el, ec, "expected `=`"));
        }
        if root.is_some() {
            return Err(syntax(l, c, format!("binding after the `{output}` result")));
        }
        if p.taps.contains_key(name) || p.coeffs.contains_key(name) || p.bindings.contains_key(name) {
            return Err(syntax(l, c, format!("duplicate identifier `{name}`")));
        }
        let id = p.term()?;
        if name == output {
            root = Some(id);
        } else {
            p.bindings.insert(name, (id, false));
        }
    }
    let root = root.ok_or_else(|| IrError::Structure(format!("no `{output} = ...` binding")))?;
    if let Some((name, _)) = p.bindings.iter().find(|(_, v)| !v.1) {
        return Err(IrError::Structure(format!("binding `{name}` is never used")));
    }
    Ok(Expr::new(p.nodes, root)?.canonical())
}

/// Writes the canonical text form of a kernel.
pub fn serialize_spec(spec: &StencilSpec) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    let _ = writeln!(s, "[grid]");
    let _ = writeln!(s, "name = {}", spec.name);
    let _ = writeln!(s, "dims = {}", spec.dims);
    let _ = writeln!(s, "radius = {}", spec.radius);
    let _ = writeln!(s, "\n[arrays]");
    for a in &spec.arrays {
        let _ = writeln!(s, "{} {}", a.name, a.role.keyword());
    }
    let _ = writeln!(s, "\n[taps]");
    for t in &spec.taps {
        let _ = write!(s, "{} {}", t.name, spec.arrays[t.array].name);
        for axis in 0..spec.dims {
            let _ = write!(s, " {}", t.offset.0[axis]);
        }
        s.push('\n');
    }
    let _ = writeln!(s, "\n[coeffs]");
    for c in &spec.coeffs {
        match c.value {
            CoeffValue::Const(v) => {
                let _ = writeln!(s, "{} {:?}", c.name, v);
            }
            CoeffValue::Dynamic => {
                let _ = writeln!(s, "{} dynamic", c.name);
            }
        }
    }
    let _ = writeln!(s, "\n[expr]");
    let expr = spec.expr.canonical();
    let out_name = &spec.arrays[spec.output_array()].name;
    let mut binding = vec![String::new(); expr.nodes().len()];
    let mut next = 0usize;
    let operand = |id: NodeId, binding: &[String]| -> String {
        match expr.node(id) {
            Node::Tap(t) => spec.taps[t].name.clone(),
            Node::Coeff(c) => spec.coeffs[c].name.clone(),
            _ => binding[id].clone(),
        }
    };
    for (id, node) in expr.nodes().iter().enumerate() {
        if node.is_leaf() {
            continue;
        }
        let rhs = match *node {
            Node::Add(a, b) => format!("(add {} {})", operand(a, &binding), operand(b, &binding)),
            Node::Mul(a, b) => format!("(mul {} {})", operand(a, &binding), operand(b, &binding)),
            Node::Fma(a, b, c) => format!(
                "(fma {} {} {})",
                operand(a, &binding),
                operand(b, &binding),
                operand(c, &binding)
            ),
            _ => unreachable!(),
        };
        let lhs = if id == expr.root() {
            out_name.clone()
        } else {
            next += 1;
            format!("_{next}")
        };
        let _ = writeln!(s, "{lhs} = {rhs}");
        binding[id] = lhs;
    }
    if expr.node(expr.root()).is_leaf() {
        let _ = writeln!(s, "{out_name} = {}", operand(expr.root(), &binding));
    }
    s
}

// ---------------------------------------------------------------------------
// Catalog
// ---------------------------------------------------------------------------

const CATALOG_SOURCES: [(&str, &str); 10] = [
    ("jacobi_2d", include_str!("../kernels/jacobi_2d.stencil")),
    ("j2d5pt", include_str!("../kernels/j2d5pt.stencil")),
    ("box2d1r", include_str!("../kernels/box2d1r.stencil")),
    ("j2d9pt", include_str!("../kernels/j2d9pt.stencil")),
    ("j2d9pt_gol", include_str!("../kernels/j2d9pt_gol.stencil")),
    ("star2d3r", include_str!("../kernels/star2d3r.stencil")),
    ("star3d2r", include_str!("../kernels/star3d2r.stencil")),
    ("ac_iso_cd", include_str!("../kernels/ac_iso_cd.stencil")),
    ("box3d1r", include_str!("../kernels/box3d1r.stencil")),
    ("j3d27pt", include_str!("../kernels/j3d27pt.stencil")),
];

/// Raw text of the shipped kernel descriptions, in catalog order.
pub fn catalog_sources() -> &'static [(&'static str, &'static str)] {
    &CATALOG_SOURCES
}

/// The ten benchmark kernels, sorted by FLOPs per grid point.
pub fn catalog() -> Vec<StencilSpec> {
    CATALOG_SOURCES
        .iter()
        .map(|(name, text)| {
            parse_spec(text).unwrap_or_else(|e| panic!("shipped kernel {name} is invalid: {e}"))
        })
        .collect()
}

/// Looks up a catalog kernel by name.
pub fn catalog_kernel(name: &str) -> Option<StencilSpec> {
    CATALOG_SOURCES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| parse_spec(text).expect("shipped kernel parses"))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const STAR7: &str = "\
[grid]
name = star7
dims = 3
radius = 1
[arrays]
inp input
out output
[taps]
c  inp  0  0  0
xm inp -1  0  0
xp inp  1  0  0
ym inp  0 -1  0
yp inp  0  1  0
zm inp  0  0 -1
zp inp  0  0  1
[coeffs]
c0 0.5
cx 0.25
cy 0.125
cz 0.0625
[expr]
sx = (add xm xp)
sy = (add ym yp)
sz = (add zm zp)
a0 = (mul c0 c)
a1 = (fma cx sx a0)
a2 = (fma cy sy a1)
out = (fma cz sz a2)
";

    #[test]
    fn star7_parses_and_counts() {
        let s = parse_spec(STAR7).unwrap();
        assert_eq!(s.taps.len(), 7);
        assert_eq!(s.coeffs.len(), 4);
        assert_eq!(flop_count(&s).unwrap(), 10);
        assert_eq!(s.expr.op_count(), 7);
        let offs: Vec<Offset> = s.taps.iter().map(|t| t.offset).collect();
        for o in [
            Offset::new(0, 0, 0),
            Offset::new(-1, 0, 0),
            Offset::new(1, 0, 0),
            Offset::new(0, -1, 0),
            Offset::new(0, 1, 0),
            Offset::new(0, 0, -1),
            Offset::new(0, 0, 1),
        ] {
            assert!(offs.contains(&o), "missing {o}");
        }
    }

    #[test]
    fn identity_has_no_flops() {
        let s = parse_spec(
            "[grid]\nname = id\ndims = 2\nradius = 0\n[arrays]\ninp input\nout output\n[taps]\nc inp 0 0\n[expr]\nout = c\n",
        )
        .unwrap();
        assert_eq!(flop_count(&s).unwrap(), 0);
        assert_eq!(s.expr.op_count(), 0);
    }

    #[test]
    fn empty_tap_list_is_rejected() {
        let e = parse_spec("[grid]\nname = x\ndims = 2\nradius = 1\n[arrays]\ninp input\nout output\n[taps]\n[expr]\nout = c\n")
            .unwrap_err();
        assert_eq!(e, IrError::NoTaps);
        assert_eq!(e.to_string(), "no taps");
    }

    #[test]
    fn tap_beyond_radius_names_offset() {
        let text = STAR7.replace("zp inp  0  0  1", "zp inp  0  0  2");
        let e = parse_spec(&text).unwrap_err();
        assert!(matches!(e, IrError::TapBeyondRadius { offset, .. } if offset == Offset::new(0, 0, 2)));
        assert!(e.to_string().contains("(0,0,2)"));
    }

    #[test]
    fn syntax_errors_carry_position() {
        let text = STAR7.replace("a1 = (fma cx sx a0)", "a1 = (fma cx sx a0");
        match parse_spec(&text).unwrap_err() {
            IrError::Syntax { line, .. } => assert!(line >= 23),
            e => panic!("unexpected {e:?}"),
        }
        let text = STAR7.replace("c0 0.5", "c0 abc");
        match parse_spec(&text).unwrap_err() {
            IrError::Syntax { line, col, .. } => assert_eq!((line, col), (17, 4)),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn malformed_arena_is_structural_error() {
        let e = Expr::new(vec![Node::Add(0, 1)], 0).unwrap_err();
        assert!(matches!(e, IrError::Structure(_)));
        let e = Expr::new(vec![Node::Tap(0)], 3).unwrap_err();
        assert!(matches!(e, IrError::Structure(_)));
    }

    #[test]
    fn dangling_ids_are_rejected() {
        let mut s = parse_spec(STAR7).unwrap();
        let mut nodes = s.expr.nodes().to_vec();
        nodes[0] = Node::Tap(42);
        s.expr = Expr::new(nodes, s.expr.root()).unwrap();
        assert!(s.validate().is_err());
    }

    #[test]
    fn serialize_round_trips() {
        let s = parse_spec(STAR7).unwrap();
        let text = serialize_spec(&s);
        assert_eq!(parse_spec(&text).unwrap(), s);
    }

    #[test]
    fn balanced_reassociation_preserves_flops() {
        for spec in catalog() {
            let b = spec.expr.reassociate(ReassocPolicy::Balanced);
            assert_eq!(b.flops(), spec.expr.flops(), "{}", spec.name);
            assert!(b.op_count() >= spec.expr.op_count());
        }
    }

    #[test]
    fn catalog_matches_published_counts() {
        let want = [
            ("jacobi_2d", 2, 1, 5, 1, 5),
            ("j2d5pt", 2, 1, 5, 6, 10),
            ("box2d1r", 2, 1, 9, 9, 17),
            ("j2d9pt", 2, 2, 9, 10, 18),
            ("j2d9pt_gol", 2, 1, 9, 10, 18),
            ("star2d3r", 2, 3, 13, 13, 25),
            ("star3d2r", 3, 2, 13, 13, 25),
            ("ac_iso_cd", 3, 4, 26, 13, 38),
            ("box3d1r", 3, 1, 27, 27, 53),
            ("j3d27pt", 3, 1, 27, 28, 54),
        ];
        let cat = catalog();
        assert_eq!(cat.len(), want.len());
        for (spec, (name, dims, radius, loads, coeffs, flops)) in cat.iter().zip(want) {
            assert_eq!(spec.name, name);
            assert_eq!(
                (spec.dims, spec.radius, spec.taps.len(), spec.coeffs.len()),
                (dims, radius, loads, coeffs),
                "{name}"
            );
            assert_eq!(flop_count(spec).unwrap(), flops, "{name}");
        }
    }

    #[test]
    fn shipped_files_are_canonical() {
        for (name, text) in catalog_sources() {
            let body: String = text
                .lines()
                .skip_while(|l| l.starts_with('#'))
                .map(|l| format!("{l}\n"))
                .collect();
            let spec = parse_spec(text).unwrap();
            assert_eq!(serialize_spec(&spec), body, "{name}");
        }
    }

    #[test]
    fn tile_geometry() {
        let spec = parse_spec(STAR7).unwrap();
        let t = TileShape::for_spec(&spec, 16).unwrap();
        assert_eq!(t.interior(), [14, 14, 14]);
        assert_eq!(t.lin(0, 1, 1), 272);
        assert_eq!(t.lin(1, 0, 1), 257);
        assert_eq!(t.lin(1, 1, 0), 17);
        assert!(TileShape::new([2, 8, 1], [1, 1, 0]).is_err());
    }
}

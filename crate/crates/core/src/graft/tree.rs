use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{GraftError, LineageEvent, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorDType {
    F32,
    F64,
    I64,
}

impl TensorDType {
    pub fn size(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 | Self::I64 => 8,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, Self::F32 | Self::F64)
    }
}

/// Dense little-endian tensor. Equality is byte equality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    dtype: TensorDType,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl Tensor {
    pub fn from_bytes(dtype: TensorDType, shape: Vec<usize>, bytes: Vec<u8>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if bytes.len() != n * dtype.size() {
            return Err(GraftError::Malformed(format!(
                "tensor of shape {shape:?} needs {} bytes, got {}",
                n * dtype.size(),
                bytes.len()
            )));
        }
        Ok(Self { dtype, shape, bytes })
    }

    pub fn from_f32(shape: Vec<usize>, vals: &[f32]) -> Result<Self> {
        Self::from_bytes(TensorDType::F32, shape, vals.iter().flat_map(|v| v.to_le_bytes()).collect())
    }

    pub fn from_f64(shape: Vec<usize>, vals: &[f64]) -> Result<Self> {
        Self::from_bytes(TensorDType::F64, shape, vals.iter().flat_map(|v| v.to_le_bytes()).collect())
    }

    pub fn from_i64(shape: Vec<usize>, vals: &[i64]) -> Result<Self> {
        Self::from_bytes(TensorDType::I64, shape, vals.iter().flat_map(|v| v.to_le_bytes()).collect())
    }

    pub fn zeros(dtype: TensorDType, shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self { dtype, shape, bytes: vec![0; n * dtype.size()] }
    }

    pub fn dtype(&self) -> TensorDType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub(crate) fn bytes_mut(&mut self) -> &mut [u8] {
        &mut self.bytes
    }

    /// Values widened to f64 (i64 cast).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        let sz = self.dtype.size();
        self.bytes
            .chunks_exact(sz)
            .map(|c| match self.dtype {
                TensorDType::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                TensorDType::F64 => f64::from_le_bytes(c.try_into().unwrap()),
                TensorDType::I64 => i64::from_le_bytes(c.try_into().unwrap()) as f64,
            })
            .collect()
    }

    /// Rewrites every float value through `f`.
    pub fn map_float(&mut self, mut f: impl FnMut(f64) -> f64) -> Result<()> {
        match self.dtype {
            TensorDType::F32 => {
                for c in self.bytes.chunks_exact_mut(4) {
                    let v = f(f32::from_le_bytes(c.try_into().unwrap()) as f64) as f32;
                    c.copy_from_slice(&v.to_le_bytes());
                }
            }
            TensorDType::F64 => {
                for c in self.bytes.chunks_exact_mut(8) {
                    let v = f(f64::from_le_bytes(c.try_into().unwrap()));
                    c.copy_from_slice(&v.to_le_bytes());
                }
            }
            TensorDType::I64 => return Err(GraftError::NonFloat(format!("{:?}", self.dtype))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub name: String,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub tensor: Option<Tensor>,
}

/// Hierarchy of dotted parameter names. Node 0 is the unnamed root.
#[derive(Debug, Clone)]
pub struct WeightTree {
    nodes: Vec<Node>,
    pub lineage: Vec<LineageEvent>,
}

impl Default for WeightTree {
    fn default() -> Self {
        Self::new()
    }
}

impl PartialEq for WeightTree {
    fn eq(&self, other: &Self) -> bool {
        self.lineage == other.lineage && self.leaves() == other.leaves()
    }
}

/// Natural order: digit runs compare numerically, the rest bytewise.
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    fn runs(s: &str) -> Vec<(bool, &str)> {
        let mut out = Vec::new();
        let mut start = 0;
        let bytes = s.as_bytes();
        for i in 1..=bytes.len() {
            if i == bytes.len() || bytes[i].is_ascii_digit() != bytes[start].is_ascii_digit() {
                out.push((bytes[start].is_ascii_digit(), &s[start..i]));
                start = i;
            }
        }
        out
    }
    let (ra, rb) = (runs(a), runs(b));
    for (x, y) in ra.iter().zip(&rb) {
        let ord = match (x.0, y.0) {
            (true, true) => {
                let (tx, ty) = (x.1.trim_start_matches('0'), y.1.trim_start_matches('0'));
                tx.len().cmp(&ty.len()).then_with(|| tx.cmp(ty)).then_with(|| x.1.len().cmp(&y.1.len()))
            }
            _ => x.1.cmp(y.1),
        };
        if ord != Ordering::Equal {
            return ord;
        }
    }
    ra.len().cmp(&rb.len())
}

impl WeightTree {
    pub fn new() -> Self {
        Self {
            nodes: vec![Node { name: String::new(), parent: None, children: Vec::new(), tensor: None }],
            lineage: Vec::new(),
        }
    }

    pub fn from_tensors<S: AsRef<str>>(items: impl IntoIterator<Item = (S, Tensor)>) -> Result<Self> {
        let mut t = Self::new();
        for (name, tensor) in items {
            t.insert(name.as_ref(), tensor)?;
        }
        Ok(t)
    }

    /// Adds a tensor under a dotted name.
    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if name == "lineage" {
            return Err(GraftError::Malformed("\"lineage\" is reserved".into()));
        }
        let segments: Vec<&str> = name.split('.').collect();
        if segments.iter().any(|s| s.is_empty()) {
            return Err(GraftError::Malformed(format!("bad parameter name {name:?}")));
        }
        let mut cur = 0;
        for (k, seg) in segments.iter().enumerate() {
            let last = k + 1 == segments.len();
            if self.nodes[cur].tensor.is_some() {
                return Err(GraftError::Malformed(format!("{name:?} extends the tensor {:?}", self.path(cur))));
            }
            match self.child(cur, seg) {
                Some(c) => {
                    if last {
                        return Err(GraftError::Duplicate(name.to_string()));
                    }
                    cur = c;
                }
                None => {
                    let id = self.nodes.len();
                    self.nodes.push(Node {
                        name: seg.to_string(),
                        parent: Some(cur),
                        children: Vec::new(),
                        tensor: if last { Some(tensor.clone()) } else { None },
                    });
                    let nodes = &self.nodes;
                    let pos = nodes[cur]
                        .children
                        .binary_search_by(|&c| natural_cmp(&nodes[c].name, seg).then(Ordering::Less))
                        .unwrap_or_else(|p| p);
                    self.nodes[cur].children.insert(pos, id);
                    cur = id;
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() == 1
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn name(&self, id: usize) -> &str {
        &self.nodes[id].name
    }

    pub fn parent(&self, id: usize) -> Option<usize> {
        self.nodes[id].parent
    }

    /// Children in natural order.
    pub fn children(&self, id: usize) -> &[usize] {
        &self.nodes[id].children
    }

    pub fn child(&self, id: usize, name: &str) -> Option<usize> {
        self.nodes[id].children.iter().copied().find(|&c| self.nodes[c].name == name)
    }

    pub fn tensor(&self, id: usize) -> Option<&Tensor> {
        self.nodes[id].tensor.as_ref()
    }

    pub(crate) fn tensor_mut(&mut self, id: usize) -> Option<&mut Tensor> {
        self.nodes[id].tensor.as_mut()
    }

    pub fn is_leaf(&self, id: usize) -> bool {
        self.nodes[id].tensor.is_some()
    }

    /// Dotted name of a node; empty for the root.
    pub fn path(&self, id: usize) -> String {
        let mut segs = Vec::new();
        let mut cur = Some(id);
        while let Some(c) = cur {
            if c != 0 {
                segs.push(self.nodes[c].name.as_str());
            }
            cur = self.nodes[c].parent;
        }
        segs.reverse();
        segs.join(".")
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        let mut cur = 0;
        for seg in name.split('.') {
            cur = self.child(cur, seg)?;
        }
        Some(cur)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.find(name).and_then(|id| self.tensor(id))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let id = self.find(name)?;
        self.nodes[id].tensor.as_mut()
    }

    /// Node ids in pre-order with children in natural order.
    pub fn preorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![0];
        while let Some(n) = stack.pop() {
            out.push(n);
            stack.extend(self.nodes[n].children.iter().rev());
        }
        out
    }

    pub fn postorder(&self) -> Vec<usize> {
        fn go(t: &WeightTree, n: usize, out: &mut Vec<usize>) {
            for &c in t.children(n) {
                go(t, c, out);
            }
            out.push(n);
        }
        let mut out = Vec::with_capacity(self.nodes.len());
        go(self, 0, &mut out);
        out
    }

    /// Leaf node ids in natural pre-order.
    pub fn leaf_ids(&self) -> Vec<usize> {
        self.preorder().into_iter().filter(|&n| self.is_leaf(n)).collect()
    }

    /// `(dotted name, tensor)` in natural pre-order.
    pub fn leaves(&self) -> Vec<(String, &Tensor)> {
        self.leaf_ids().into_iter().map(|n| (self.path(n), self.tensor(n).unwrap())).collect()
    }

    pub fn total_params(&self) -> usize {
        self.nodes.iter().filter_map(|n| n.tensor.as_ref()).map(Tensor::numel).sum()
    }

    /// Whether `a` is a proper ancestor of `b`.
    pub fn is_ancestor(&self, a: usize, b: usize) -> bool {
        let mut cur = self.nodes[b].parent;
        while let Some(c) = cur {
            if c == a {
                return true;
            }
            cur = self.nodes[c].parent;
        }
        false
    }

    pub fn depth(&self, id: usize) -> usize {
        let mut d = 0;
        let mut cur = self.nodes[id].parent;
        while let Some(c) = cur {
            d += 1;
            cur = self.nodes[c].parent;
        }
        d
    }

    pub fn lca(&self, a: usize, b: usize) -> usize {
        let (mut a, mut b) = (a, b);
        let (mut da, mut db) = (self.depth(a), self.depth(b));
        while da > db {
            a = self.nodes[a].parent.unwrap();
            da -= 1;
        }
        while db > da {
            b = self.nodes[b].parent.unwrap();
            db -= 1;
        }
        while a != b {
            a = self.nodes[a].parent.unwrap();
            b = self.nodes[b].parent.unwrap();
        }
        a
    }

    /// A copy with every name prefixed by `prefix.`.
    pub fn wrapped(&self, prefix: &str) -> Result<Self> {
        let mut t = Self::from_tensors(self.leaves().into_iter().map(|(n, x)| (format!("{prefix}.{n}"), x.clone())))?;
        t.lineage = self.lineage.clone();
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(shape: Vec<usize>) -> Tensor {
        Tensor::zeros(TensorDType::F32, shape)
    }

    #[test]
    fn single_leaf() {
        let t = WeightTree::from_tensors([("w", t1(vec![2]))]).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.leaves()[0].0, "w");
    }

    #[test]
    fn shared_prefix() {
        let t = WeightTree::from_tensors([("a.b", t1(vec![1])), ("a.c", t1(vec![1]))]).unwrap();
        let a = t.child(0, "a").unwrap();
        assert_eq!(t.children(a).iter().map(|&c| t.name(c)).collect::<Vec<_>>(), ["b", "c"]);
    }

    #[test]
    fn natural_child_order() {
        let t = WeightTree::from_tensors([("layers.10.w", t1(vec![1])), ("layers.2.w", t1(vec![1])), ("layers.x.w", t1(vec![1]))])
            .unwrap();
        let names: Vec<_> = t.leaves().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["layers.2.w", "layers.10.w", "layers.x.w"]);
        assert_eq!(natural_cmp("a2b", "a10b"), Ordering::Less);
        assert_eq!(natural_cmp("007", "7"), Ordering::Greater);
    }

    #[test]
    fn duplicates_and_conflicts() {
        let mut t = WeightTree::new();
        t.insert("a.b", t1(vec![1])).unwrap();
        assert!(matches!(t.insert("a.b", t1(vec![1])), Err(GraftError::Duplicate(_))));
        assert!(t.insert("a.b.c", t1(vec![1])).is_err());
        assert!(t.insert("a", t1(vec![1])).is_err());
        assert!(t.insert("a..c", t1(vec![1])).is_err());
        assert!(t.insert("lineage", t1(vec![1])).is_err());
    }

    #[test]
    fn ancestry() {
        let t = WeightTree::from_tensors([("a.b.c", t1(vec![1])), ("a.d", t1(vec![1]))]).unwrap();
        let c = t.find("a.b.c").unwrap();
        let d = t.find("a.d").unwrap();
        let a = t.find("a").unwrap();
        assert!(t.is_ancestor(a, c) && !t.is_ancestor(c, a) && !t.is_ancestor(a, a));
        assert_eq!(t.lca(c, d), a);
        assert_eq!(t.path(c), "a.b.c");
    }
}

use ndarray::{Array2, Array3, ArrayView3, Axis};

use super::{Result, StitchError};
use crate::graft::{Tensor, WeightTree};

pub const SALIENT: &str = "salient";
pub const AC_CLASSES: [&str; 4] = ["No Activity", "Site Preparation", "Active Construction", "Post Construction"];
pub const AC_SALIENT: &str = "ac-salient";
pub const RGBN: [&str; 4] = ["red", "green", "blue", "nir"];

/// One output asset of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub name: String,
    pub channels: Vec<String>,
}

impl Head {
    pub fn new<S: Into<String>>(name: &str, channels: impl IntoIterator<Item = S>) -> Self {
        Self { name: name.into(), channels: channels.into_iter().map(Into::into).collect() }
    }
}

/// Pure per-window model: `C_in×h×w` in, one `C_head×h×w` array per head out.
pub trait PixelModel: Send + Sync {
    fn name(&self) -> &str;
    /// Input channel names, in the order `predict` expects them.
    fn inputs(&self) -> &[String];
    fn heads(&self) -> &[Head];
    fn predict(&self, x: ArrayView3<'_, f64>) -> Vec<Array3<f64>>;
}

/// Copies one input channel.
pub struct IdentityModel {
    inputs: Vec<String>,
    heads: Vec<Head>,
}

impl IdentityModel {
    pub fn new(channel: &str) -> Self {
        Self { inputs: vec![channel.to_string()], heads: vec![Head::new(channel, [format!("{channel}-copy")])] }
    }
}

impl PixelModel for IdentityModel {
    fn name(&self) -> &str {
        "identity"
    }
    fn inputs(&self) -> &[String] {
        &self.inputs
    }
    fn heads(&self) -> &[Head] {
        &self.heads
    }
    fn predict(&self, x: ArrayView3<'_, f64>) -> Vec<Array3<f64>> {
        vec![x.to_owned()]
    }
}

/// Per-pixel logistic regression: `σ(W·x + b)` per head, parameters
/// `heads.<name>.weight` `[C_out, C_in]` and `heads.<name>.bias` `[C_out]`.
pub struct LinearPixelModel {
    name: String,
    inputs: Vec<String>,
    heads: Vec<Head>,
    params: Vec<(Array2<f64>, Vec<f64>)>,
}

fn weight_key(head: &str) -> String {
    format!("heads.{head}.weight")
}

fn bias_key(head: &str) -> String {
    format!("heads.{head}.bias")
}

impl LinearPixelModel {
    pub fn from_tree(name: &str, inputs: Vec<String>, heads: Vec<Head>, tree: &WeightTree) -> Result<Self> {
        let mut params = Vec::new();
        for h in &heads {
            let (co, ci) = (h.channels.len(), inputs.len());
            let get = |key: String, shape: &[usize]| -> Result<Vec<f64>> {
                let t = tree.get(&key).ok_or_else(|| StitchError::Model(format!("{name}: missing parameter {key}")))?;
                if t.shape() != shape {
                    return Err(StitchError::Model(format!("{name}: {key} has shape {:?}, expected {shape:?}", t.shape())));
                }
                Ok(t.to_f64_vec())
            };
            let w = Array2::from_shape_vec((co, ci), get(weight_key(&h.name), &[co, ci])?).expect("shape checked");
            params.push((w, get(bias_key(&h.name), &[co])?));
        }
        Ok(Self { name: name.into(), inputs, heads, params })
    }

    /// Parameters as a weight tree (f32).
    pub fn to_tree(&self) -> WeightTree {
        let mut t = WeightTree::new();
        for (h, (w, b)) in self.heads.iter().zip(&self.params) {
            let wv: Vec<f32> = w.iter().map(|&v| v as f32).collect();
            let bv: Vec<f32> = b.iter().map(|&v| v as f32).collect();
            t.insert(&weight_key(&h.name), Tensor::from_f32(vec![w.nrows(), w.ncols()], &wv).unwrap()).unwrap();
            t.insert(&bias_key(&h.name), Tensor::from_f32(vec![b.len()], &bv).unwrap()).unwrap();
        }
        t
    }

    pub fn bas_inputs() -> Vec<String> {
        RGBN.iter().map(|s| s.to_string()).collect()
    }

    pub fn bas_heads() -> Vec<Head> {
        vec![Head::new("saliency", [SALIENT])]
    }

    pub fn ac_heads() -> Vec<Head> {
        vec![Head::new("class", AC_CLASSES.iter().copied().chain([AC_SALIENT]))]
    }

    pub fn bas(tree: &WeightTree) -> Result<Self> {
        Self::from_tree("bas-linear", Self::bas_inputs(), Self::bas_heads(), tree)
    }

    pub fn ac(tree: &WeightTree) -> Result<Self> {
        Self::from_tree("ac-linear", Self::bas_inputs(), Self::ac_heads(), tree)
    }

    /// All-zero parameters for the given layout, as a graft destination.
    pub fn zero_tree(inputs: usize, heads: &[Head]) -> WeightTree {
        let mut t = WeightTree::new();
        for h in heads {
            let co = h.channels.len();
            t.insert(&weight_key(&h.name), Tensor::from_f32(vec![co, inputs], &vec![0.0; co * inputs]).unwrap()).unwrap();
            t.insert(&bias_key(&h.name), Tensor::from_f32(vec![co], &vec![0.0; co]).unwrap()).unwrap();
        }
        t
    }

    /// One head's parameters from rows of `[bias, w_1, ..., w_n]`.
    pub fn tree_from_rows(heads: &[(&str, Vec<Vec<f64>>)]) -> WeightTree {
        let mut t = WeightTree::new();
        for (name, rows) in heads {
            let ci = rows[0].len() - 1;
            let w: Vec<f32> = rows.iter().flat_map(|r| r[1..].iter().map(|&v| v as f32)).collect();
            let b: Vec<f32> = rows.iter().map(|r| r[0] as f32).collect();
            t.insert(&weight_key(name), Tensor::from_f32(vec![rows.len(), ci], &w).unwrap()).unwrap();
            t.insert(&bias_key(name), Tensor::from_f32(vec![rows.len()], &b).unwrap()).unwrap();
        }
        t
    }
}

impl PixelModel for LinearPixelModel {
    fn name(&self) -> &str {
        &self.name
    }
    fn inputs(&self) -> &[String] {
        &self.inputs
    }
    fn heads(&self) -> &[Head] {
        &self.heads
    }
    fn predict(&self, x: ArrayView3<'_, f64>) -> Vec<Array3<f64>> {
        let (ci, h, w) = x.dim();
        let flat = x.to_shape((ci, h * w)).expect("contiguous view");
        self.params
            .iter()
            .map(|(wt, b)| {
                let mut z = wt.dot(&flat);
                for (mut row, &bias) in z.axis_iter_mut(Axis(0)).zip(b) {
                    row.mapv_inplace(|v| 1.0 / (1.0 + (-(v + bias)).exp()));
                }
                z.into_shape_with_order((wt.nrows(), h, w)).expect("dims")
            })
            .collect()
    }
}

/// Model by CLI name: `bas-linear`, `ac-linear` (both need weights) or
/// `identity:<channel>`.
pub fn named_model(name: &str, weights: Option<&WeightTree>) -> Result<Box<dyn PixelModel>> {
    let need = || weights.ok_or_else(|| StitchError::Model(format!("model {name} needs a weight archive")));
    match name {
        "bas-linear" => Ok(Box::new(LinearPixelModel::bas(need()?)?)),
        "ac-linear" => Ok(Box::new(LinearPixelModel::ac(need()?)?)),
        _ => match name.strip_prefix("identity:") {
            Some(ch) if !ch.is_empty() => Ok(Box::new(IdentityModel::new(ch))),
            _ => Err(StitchError::Model(format!("unknown model {name:?}"))),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logistic_per_pixel() {
        let tree = LinearPixelModel::tree_from_rows(&[("saliency", vec![vec![-1.0, 2.0, 0.0, 0.0, 0.0]])]);
        let m = LinearPixelModel::bas(&tree).unwrap();
        let mut x = Array3::zeros((4, 1, 2));
        x[[0, 0, 1]] = 0.5;
        x[[1, 0, 0]] = f64::NAN;
        let y = &m.predict(x.view())[0];
        assert!(y[[0, 0, 0]].is_nan());
        assert!((y[[0, 0, 1]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tree_round_trip_and_shape_check() {
        let tree = LinearPixelModel::zero_tree(4, &LinearPixelModel::ac_heads());
        let m = LinearPixelModel::ac(&tree).unwrap();
        assert_eq!(m.to_tree(), tree);
        assert!(LinearPixelModel::bas(&tree).is_err());
        let wrong = LinearPixelModel::zero_tree(5, &LinearPixelModel::bas_heads());
        assert!(LinearPixelModel::bas(&wrong).is_err());
    }

    #[test]
    fn registry() {
        assert_eq!(named_model("identity:red", None).unwrap().inputs(), ["red"]);
        assert!(named_model("bas-linear", None).is_err());
        assert!(named_model("nope", None).is_err());
    }
}

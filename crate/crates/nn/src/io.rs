//! Checkpoint archives: named f32 tensors plus string metadata, stored in
//! the safetensors container format.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::layer::{Layer, LayerSpec};
use crate::{NnError, Result, Sequential};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(name.into(), (shape, data));
    }

    pub fn tensor(&self, name: &str) -> Result<&(Vec<usize>, Vec<f32>)> {
        self.tensors.get(name).ok_or_else(|| NnError::Format(format!("missing tensor `{name}`")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| NnError::Format(format!("missing metadata key `{key}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let raw: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(k, (shape, data))| (k.clone(), shape.clone(), data.iter().flat_map(|v| v.to_le_bytes()).collect()))
            .collect();
        let views = raw
            .iter()
            .map(|(k, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (k.clone(), v))
                    .map_err(|e| NnError::Format(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        safetensors::serialize(views, Some(meta)).map_err(|e| NnError::Format(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| NnError::Format(e.to_string()))?;
        let st = SafeTensors::deserialize(bytes).map_err(|e| NnError::Format(e.to_string()))?;
        let mut archive = Archive::new();
        if let Some(meta) = header.metadata() {
            archive.metadata = meta.clone().into_iter().collect();
        }
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(NnError::Format(format!("tensor `{name}` is not f32")));
            }
            let data = view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            archive.tensors.insert(name, (view.shape().to_vec(), data));
        }
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)
            .map_err(|e| NnError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_bytes(&bytes)
    }

    /// Store a network under `prefix`: its architecture goes into metadata,
    /// each parametric layer into `prefix.{i}.weight` / `prefix.{i}.bias`.
    pub fn put_network(&mut self, prefix: &str, net: &Sequential) {
        let arch = serde_json::json!({ "input_dim": net.input_dim(), "layers": net.specs() });
        self.metadata.insert(format!("{prefix}.arch"), arch.to_string());
        for (i, layer) in net.layers().iter().enumerate() {
            if layer.has_params() {
                self.insert(format!("{prefix}.{i}.weight"), vec![layer.weight.len()], layer.weight.clone());
                self.insert(format!("{prefix}.{i}.bias"), vec![layer.bias.len()], layer.bias.clone());
            }
        }
    }

    pub fn get_network(&self, prefix: &str) -> Result<Sequential> {
        #[derive(serde::Deserialize)]
        struct Arch {
            input_dim: usize,
            layers: Vec<LayerSpec>,
        }
        let arch: Arch = serde_json::from_str(self.meta(&format!("{prefix}.arch"))?)
            .map_err(|e| NnError::Format(format!("bad architecture for `{prefix}`: {e}")))?;
        let mut layers = Vec::with_capacity(arch.layers.len());
        for (i, spec) in arch.layers.into_iter().enumerate() {
            let (wn, _) = spec.param_shape();
            let (weight, bias) = if wn > 0 {
                (
                    self.tensor(&format!("{prefix}.{i}.weight"))?.1.clone(),
                    self.tensor(&format!("{prefix}.{i}.bias"))?.1.clone(),
                )
            } else {
                (Vec::new(), Vec::new())
            };
            layers.push(Layer { spec, weight, bias });
        }
        Sequential::from_layers(arch.input_dim, layers)
    }
}

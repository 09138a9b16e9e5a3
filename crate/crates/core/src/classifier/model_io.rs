//! Model directories: `manifest.json` plus `weights.bin`, the latter holding
//! little-endian f32 tensors concatenated in manifest order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::decision::DefectClass;
use crate::error::{Error, Result};
use crate::preprocess::FusionGroup;

use super::{ClassifierBank, ModelParams, Network, Topology, TrainingMeta};

const FORMAT: &str = "udrt-cnn";
const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";

#[derive(Debug, Serialize, Deserialize)]
struct LayerDesc {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    in_features: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    out_features: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    kernel: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    padding: Option<usize>,
}

impl LayerDesc {
    fn plain(kind: &str) -> Self {
        Self {
            kind: kind.into(),
            in_features: None,
            out_features: None,
            kernel: None,
            stride: None,
            padding: None,
        }
    }

    fn conv(in_c: usize, out_c: usize) -> Self {
        Self {
            in_features: Some(in_c),
            out_features: Some(out_c),
            kernel: Some(3),
            stride: Some(1),
            padding: Some(1),
            ..Self::plain("conv2d")
        }
    }

    fn dense(i: usize, o: usize) -> Self {
        Self {
            in_features: Some(i),
            out_features: Some(o),
            ..Self::plain("dense")
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorDesc {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    group_id: u8,
    class_set: Vec<DefectClass>,
    topology: Topology,
    layers: Vec<LayerDesc>,
    dtype: String,
    tensors: Vec<TensorDesc>,
    training: TrainingMeta,
}

fn layers_of(t: &Topology) -> Vec<LayerDesc> {
    vec![
        LayerDesc::conv(t.in_channels, t.conv1_channels),
        LayerDesc::plain("relu"),
        LayerDesc::plain("maxpool2"),
        LayerDesc::conv(t.conv1_channels, t.conv2_channels),
        LayerDesc::plain("relu"),
        LayerDesc::plain("maxpool2"),
        LayerDesc::plain("flatten"),
        LayerDesc::dense(t.flat_len(), t.hidden),
        LayerDesc::plain("relu"),
        LayerDesc::dense(t.hidden, t.classes),
        LayerDesc::plain("softmax"),
    ]
}

fn join(classes: &[DefectClass]) -> String {
    classes
        .iter()
        .map(|c| c.name())
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn save_model(params: &ModelParams, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let t = params.network.topology();
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        group_id: params.group.id(),
        class_set: params.class_set.clone(),
        topology: *t,
        layers: layers_of(t),
        dtype: "f32le".into(),
        tensors: t
            .tensors()
            .into_iter()
            .map(|(name, shape)| TensorDesc {
                name: name.into(),
                shape,
            })
            .collect(),
        training: params.training.clone(),
    };
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    let mut out = BufWriter::new(fs::File::create(dir.join(WEIGHTS))?);
    for &w in params.network.params() {
        out.write_f32::<LittleEndian>(w)?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<ModelParams> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)
        .map_err(|e| Error::ModelFormat(format!("{}: {e}", dir.join(MANIFEST).display())))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::ModelFormat(format!(
            "unsupported model {} v{}",
            manifest.format, manifest.version
        )));
    }
    if manifest.dtype != "f32le" {
        return Err(Error::ModelFormat(format!(
            "unsupported dtype {}",
            manifest.dtype
        )));
    }
    let group = FusionGroup::from_id(manifest.group_id).ok_or_else(|| {
        Error::ModelFormat(format!("group id {} not in 1..=5", manifest.group_id))
    })?;
    let expected = group.class_set();
    if manifest.class_set != expected {
        let mut a = manifest.class_set.clone();
        let mut b = expected.to_vec();
        a.sort();
        b.sort();
        if a == b {
            return Err(Error::ClassOrderMismatch {
                group: group.id(),
                expected: join(expected),
                found: join(&manifest.class_set),
            });
        }
        return Err(Error::ModelFormat(format!(
            "class set [{}] does not match {group} [{}]",
            join(&manifest.class_set),
            join(expected)
        )));
    }
    let t = manifest.topology;
    t.validate()?;
    if t.in_channels != group.channel_count() || t.classes != expected.len() {
        return Err(Error::ShapeMismatch(format!(
            "topology {}→{} does not fit {group}",
            t.in_channels, t.classes
        )));
    }
    let declared: Vec<(&str, &[usize])> = manifest
        .tensors
        .iter()
        .map(|d| (d.name.as_str(), d.shape.as_slice()))
        .collect();
    let derived = t.tensors();
    if declared.len() != derived.len()
        || declared
            .iter()
            .zip(&derived)
            .any(|((n, s), (dn, ds))| n != dn || *s != ds.as_slice())
    {
        return Err(Error::ShapeMismatch(
            "tensor list does not match the topology".into(),
        ));
    }

    let path = dir.join(WEIGHTS);
    let bytes = fs::read(&path)?;
    let needed = t.param_count() * 4;
    if bytes.len() != needed {
        return Err(Error::TruncatedBlob {
            path: path.display().to_string(),
            expected: needed as u64,
            actual: bytes.len() as u64,
        });
    }
    let mut params = vec![0.0f32; t.param_count()];
    LittleEndian::read_f32_into(&bytes, &mut params);
    Ok(ModelParams {
        group,
        class_set: manifest.class_set,
        network: Network::from_params(t, params)?,
        training: manifest.training,
    })
}

/// Writes `root/G1 .. root/G5`.
pub fn save_bank(bank: &ClassifierBank, root: &Path) -> Result<()> {
    for model in bank.models() {
        save_model(model, &root.join(model.group.to_string()))?;
    }
    Ok(())
}

pub fn load_bank(root: &Path) -> Result<ClassifierBank> {
    ClassifierBank::new(
        FusionGroup::ALL
            .into_iter()
            .map(|g| load_model(&root.join(g.to_string())))
            .collect::<Result<_>>()?,
    )
}

//! The `VVBM` model container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "VVBM" | version u32 | kind u8 (1 PCA, 2 SVM, 3 CNN)
//! meta_len u32 | meta (UTF-8 `key=value` lines)
//! tensor_count u32 | per tensor: rank u8, dims u64 × rank
//! payload: every tensor's f64 values in order
//! ```
//!
//! An SVM file carries the PCA projection it was trained on, so it can
//! classify images on its own. A PCA file may carry a sphere alignment.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::cnn::{self, CnnModel, TrainParams};
use crate::dataset::{LabelSpec, Task};
use crate::error::{Error, Result};
use crate::pca::{FeatureSet, PcaModel};
use crate::sphere::SphereAlignment;
use crate::svm::{PcaSvm, SvmModel, SvmParams};

pub const MAGIC: [u8; 4] = *b"VVBM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Pca = 1,
    Svm = 2,
    Cnn = 3,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Pca => "pca",
            ModelKind::Svm => "svm",
            ModelKind::Cnn => "cnn",
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(ModelKind::Pca),
            2 => Ok(ModelKind::Svm),
            3 => Ok(ModelKind::Cnn),
            _ => Err(Error::Format(format!("unknown model kind tag {tag}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Pca {
        pca: PcaModel,
        alignment: Option<SphereAlignment>,
    },
    Svm(PcaSvm),
    Cnn(CnnModel),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Pca { .. } => ModelKind::Pca,
            Model::Svm(_) => ModelKind::Svm,
            Model::Cnn(_) => ModelKind::Cnn,
        }
    }

    pub fn classifier(&self) -> Option<&dyn crate::metrics::Classifier> {
        match self {
            Model::Svm(m) => Some(m),
            Model::Cnn(m) => Some(m),
            Model::Pca { .. } => None,
        }
    }

    pub fn label_spec(&self) -> Option<&LabelSpec> {
        match self {
            Model::Svm(m) => m.svm.label_spec(),
            Model::Cnn(m) => m.label_spec(),
            Model::Pca { .. } => None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("vvbm.tmp");
        {
            let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(file);
            w.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
            w.flush().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = Meta::default();
        let mut tensors = Vec::new();
        match self {
            Model::Pca { pca, alignment } => {
                put_pca(&mut meta, &mut tensors, pca);
                if let Some(a) = alignment {
                    meta.put("align_scale", format!("{:?}", a.scale));
                    tensors.push(Tensor::new(vec![3, 3], row_major3(&a.rotation)));
                    tensors.push(Tensor::new(vec![3], a.offset.iter().copied().collect()));
                }
            }
            Model::Svm(m) => {
                put_pca(&mut meta, &mut tensors, &m.pca);
                let p = m.svm.params();
                meta.put("task", task_name(m.svm.label_spec()));
                meta.put("lambda", format!("{:?}", p.lambda));
                meta.put("epochs", p.epochs.to_string());
                meta.put("seed", p.seed.to_string());
                tensors.push(Tensor::new(
                    vec![m.svm.class_count(), m.svm.dim()],
                    m.svm.weights().to_vec(),
                ));
                tensors.push(Tensor::new(vec![m.svm.class_count()], m.svm.biases().to_vec()));
            }
            Model::Cnn(m) => {
                let (c, h, w) = m.input_shape();
                meta.put("input", format!("{c}x{h}x{w}"));
                meta.put("architecture", cnn::format_architecture(m.architecture()));
                meta.put("classes", m.class_count().to_string());
                meta.put("task", task_name(m.label_spec()));
                if let Some(p) = m.trained_with() {
                    meta.put("train.epochs", p.epochs.to_string());
                    meta.put("train.batch_size", p.batch_size.to_string());
                    meta.put("train.learning_rate", format!("{:?}", p.learning_rate));
                    meta.put("train.momentum", format!("{:?}", p.momentum));
                    meta.put("train.seed", p.seed.to_string());
                    meta.put("train.deterministic", p.deterministic.to_string());
                }
                let params = m.parameters();
                for pair in params.chunks(2) {
                    let (weight, bias) = (pair[0], pair[1]);
                    let out = bias.len();
                    tensors.push(Tensor::new(vec![out, weight.len() / out], weight.to_vec()));
                    tensors.push(Tensor::new(vec![out], bias.to_vec()));
                }
            }
        }
        encode(self.kind(), &meta, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (kind, meta, tensors) = decode(bytes)?;
        let mut tensors = tensors.into_iter();
        let model = match kind {
            ModelKind::Pca => {
                let pca = take_pca(&meta, &mut tensors)?;
                let alignment = match meta.get("align_scale") {
                    None => None,
                    Some(s) => {
                        let scale = parse_f64(s, "align_scale")?;
                        let rot = next_tensor(&mut tensors, &[3, 3], "alignment rotation")?;
                        let off = next_tensor(&mut tensors, &[3], "alignment offset")?;
                        Some(SphereAlignment {
                            rotation: Matrix3::from_row_slice(&rot.data),
                            scale,
                            offset: Vector3::from_column_slice(&off.data),
                        })
                    }
                };
                Model::Pca { pca, alignment }
            }
            ModelKind::Svm => {
                let pca = take_pca(&meta, &mut tensors)?;
                let w = tensors
                    .next()
                    .ok_or_else(|| Error::Format("missing SVM weights".into()))?;
                if w.dims.len() != 2 {
                    return Err(Error::Format("SVM weights must be a matrix".into()));
                }
                let (c, d) = (w.dims[0], w.dims[1]);
                let b = next_tensor(&mut tensors, &[c], "SVM biases")?;
                let params = SvmParams {
                    lambda: parse_f64(meta.req("lambda")?, "lambda")?,
                    epochs: parse_num(meta.req("epochs")?, "epochs")?,
                    seed: parse_num(meta.req("seed")?, "seed")?,
                };
                let spec = label_spec(meta.req("task")?)?;
                let svm = SvmModel::from_parts(w.data, b.data, d, spec, params)?;
                Model::Svm(PcaSvm::new(pca, svm)?)
            }
            ModelKind::Cnn => {
                let input = parse_shape(meta.req("input")?)?;
                let specs = cnn::parse_architecture(meta.req("architecture")?)?;
                let classes = parse_num(meta.req("classes")?, "classes")?;
                let params: Vec<Vec<f64>> = tensors.by_ref().map(|t| t.data).collect();
                let mut m = CnnModel::from_parameters(input, &specs, classes, params)?;
                if let Some(spec) = label_spec(meta.req("task")?)? {
                    m = m.with_label_spec(spec)?;
                }
                if meta.get("train.epochs").is_some() {
                    m.set_trained_with(Some(TrainParams {
                        epochs: parse_num(meta.req("train.epochs")?, "train.epochs")?,
                        batch_size: parse_num(meta.req("train.batch_size")?, "train.batch_size")?,
                        learning_rate: parse_f64(meta.req("train.learning_rate")?, "train.learning_rate")?,
                        momentum: parse_f64(meta.req("train.momentum")?, "train.momentum")?,
                        seed: parse_num(meta.req("train.seed")?, "train.seed")?,
                        deterministic: meta.req("train.deterministic")? == "true",
                    }));
                }
                Model::Cnn(m)
            }
        };
        if tensors.next().is_some() {
            return Err(Error::Format("unexpected extra tensors".into()));
        }
        Ok(model)
    }
}

fn row_major3(m: &Matrix3<f64>) -> Vec<f64> {
    (0..3).flat_map(|r| (0..3).map(move |c| m[(r, c)])).collect()
}

fn task_name(spec: Option<&LabelSpec>) -> String {
    spec.map_or("none", |s| s.task().name()).to_string()
}

fn label_spec(name: &str) -> Result<Option<LabelSpec>> {
    if name == "none" {
        return Ok(None);
    }
    Task::parse(name)
        .map(|t| Some(LabelSpec::for_task(t)))
        .ok_or_else(|| Error::Format(format!("unknown task {name:?}")))
}

fn put_pca(meta: &mut Meta, tensors: &mut Vec<Tensor>, pca: &PcaModel) {
    meta.put("pca.features", pca.features().name().to_string());
    meta.put("pca.resolution", pca.resolution().to_string());
    meta.put("pca.total_variance", format!("{:?}", pca.total_variance()));
    let (n, d) = pca.components().shape();
    tensors.push(Tensor::new(vec![d], pca.mean().to_vec()));
    let comps = (0..n)
        .flat_map(|r| (0..d).map(move |c| (r, c)))
        .map(|(r, c)| pca.components()[(r, c)])
        .collect();
    tensors.push(Tensor::new(vec![n, d], comps));
    tensors.push(Tensor::new(vec![n], pca.explained_variance().to_vec()));
}

fn take_pca(meta: &Meta, tensors: &mut impl Iterator<Item = Tensor>) -> Result<PcaModel> {
    let features = FeatureSet::parse(meta.req("pca.features")?)
        .ok_or_else(|| Error::Format("unknown PCA feature set".into()))?;
    let resolution = parse_num(meta.req("pca.resolution")?, "pca.resolution")?;
    let total = parse_f64(meta.req("pca.total_variance")?, "pca.total_variance")?;
    let mean = tensors
        .next()
        .ok_or_else(|| Error::Format("missing PCA mean".into()))?;
    if mean.dims.len() != 1 {
        return Err(Error::Format("PCA mean must be a vector".into()));
    }
    let d = mean.dims[0];
    let comps = tensors
        .next()
        .ok_or_else(|| Error::Format("missing PCA components".into()))?;
    if comps.dims.len() != 2 || comps.dims[1] != d {
        return Err(Error::Format(format!(
            "PCA components of shape {:?} do not match dimension {d}",
            comps.dims
        )));
    }
    let n = comps.dims[0];
    let var = next_tensor(tensors, &[n], "explained variance")?;
    PcaModel::from_parts(
        mean.data,
        DMatrix::from_row_slice(n, d, &comps.data),
        var.data,
        total,
        resolution,
        features,
    )
}

#[derive(Debug, Default)]
struct Meta(BTreeMap<String, String>);

impl Meta {
    fn put(&mut self, k: &str, v: String) {
        self.0.insert(k.to_string(), v);
    }

    fn get(&self, k: &str) -> Option<&str> {
        self.0.get(k).map(String::as_str)
    }

    fn req(&self, k: &str) -> Result<&str> {
        self.get(k)
            .ok_or_else(|| Error::Format(format!("missing metadata key {k:?}")))
    }

    fn text(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn parse(s: &str) -> Result<Self> {
        let mut m = BTreeMap::new();
        for line in s.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad metadata line {line:?}")))?;
            m.insert(k.to_string(), v.to_string());
        }
        Ok(Meta(m))
    }
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::Format(format!("{what}: not a number: {s:?}")))
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Format(format!("{what}: not an integer: {s:?}")))
}

fn parse_shape(s: &str) -> Result<cnn::Shape> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| parse_num(p, "input shape"))
        .collect::<Result<_>>()?;
    match parts[..] {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Format(format!("bad input shape {s:?}"))),
    }
}

#[derive(Debug)]
struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    fn new(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }
}

fn next_tensor(
    tensors: &mut impl Iterator<Item = Tensor>,
    dims: &[usize],
    what: &str,
) -> Result<Tensor> {
    let t = tensors
        .next()
        .ok_or_else(|| Error::Format(format!("missing {what}")))?;
    if t.dims != dims {
        return Err(Error::Format(format!(
            "{what} has shape {:?}, expected {dims:?}",
            t.dims
        )));
    }
    Ok(t)
}

fn encode(kind: ModelKind, meta: &Meta, tensors: &[Tensor]) -> Vec<u8> {
    let text = meta.text();
    let payload: usize = tensors.iter().map(|t| t.data.len()).sum();
    let mut out = Vec::with_capacity(64 + text.len() + 8 * payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind as u8);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.push(t.dims.len() as u8);
        for &d in &t.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for t in tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{what}: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn decode(bytes: &[u8]) -> Result<(ModelKind, Meta, Vec<Tensor>)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::Magic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let kind = ModelKind::from_tag(r.u8("kind")?)?;
    let meta_len = r.u32("metadata length")? as usize;
    let meta = std::str::from_utf8(r.take(meta_len, "metadata")?)
        .map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
    let meta = Meta::parse(meta)?;
    let count = r.u32("tensor count")? as usize;
    let mut shapes = Vec::with_capacity(count.min(1024));
    for k in 0..count {
        let rank = r.u8("tensor rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u64(&format!("dims of tensor {k}")).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        shapes.push(dims);
    }
    let mut tensors = Vec::with_capacity(count);
    for (k, dims) in shapes.into_iter().enumerate() {
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format(format!("tensor {k} is too large")))?;
        let raw = r.take(n, &format!("values of tensor {k}"))?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push(Tensor { dims, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((kind, meta, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_sphere;
    use crate::noise::NoiseConfig;
    use crate::optics::GridSpec;
    use crate::pca::pca_fit;

    fn small_pca() -> PcaModel {
        let grid = GridSpec::new(8, 4.0, 1.0).unwrap();
        let data = generate_sphere(12, &NoiseConfig::none(0), &grid, 1).unwrap();
        pca_fit(&data, 4, FeatureSet::Polarization).unwrap()
    }

    fn round_trip(m: &Model) -> Model {
        let bytes = m.to_bytes();
        let back = Model::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        back
    }

    #[test]
    fn pca_round_trip_with_alignment() {
        let pca = small_pca();
        let m = Model::Pca {
            pca: pca.clone(),
            alignment: None,
        };
        assert_eq!(round_trip(&m), m);
        let aligned = Model::Pca {
            pca,
            alignment: Some(SphereAlignment {
                rotation: Matrix3::new(0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0),
                scale: 0.123456789,
                offset: Vector3::new(1e-3, -2.5, 7.0),
            }),
        };
        assert_eq!(round_trip(&aligned), aligned);
    }

    #[test]
    fn svm_round_trip() {
        let pca = small_pca();
        let svm = SvmModel::from_parts(
            (0..15 * 4).map(|k| (k as f64).sin()).collect(),
            (0..15).map(|k| k as f64 * 0.1).collect(),
            4,
            Some(LabelSpec::class15()),
            SvmParams {
                lambda: 3e-5,
                epochs: 7,
                seed: 99,
            },
        )
        .unwrap();
        let m = Model::Svm(PcaSvm::new(pca, svm).unwrap());
        assert_eq!(round_trip(&m), m);
    }

    #[test]
    fn cnn_round_trip() {
        let mut net = CnnModel::standard(16, 26, 3)
            .unwrap()
            .with_label_spec(LabelSpec::sector26())
            .unwrap();
        net.set_trained_with(Some(TrainParams {
            learning_rate: 0.0123,
            ..TrainParams::default()
        }));
        let m = Model::Cnn(net);
        assert_eq!(round_trip(&m), m);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = Model::Pca {
            pca: small_pca(),
            alignment: None,
        }
        .to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Model::from_bytes(&bad), Err(Error::Magic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Model::from_bytes(&bad),
            Err(Error::Version { found: 9, supported: 1 })
        ));
        assert!(matches!(
            Model::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated(_))
        ));
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(Model::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes;
        bad[8] = 7;
        assert!(matches!(Model::from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vvbm");
        let m = Model::Pca {
            pca: small_pca(),
            alignment: None,
        };
        m.save(&path).unwrap();
        assert_eq!(Model::load(&path).unwrap(), m);
        assert!(!path.with_extension("vvbm.tmp").exists());
    }
}

//! Small convolutional classifier with hand-written backpropagation.
//!
//! Activations are single samples in CHW layout. A network is a stack of
//! [`Layer`]s; a dense layer flattens whatever precedes it and the output of
//! the last dense layer is read as logits under a softmax.

mod layers;
mod train;

use rand::Rng;

use crate::dataset::LabelSpec;
use crate::error::{Error, Result};
use crate::optics::StokesImage;
use crate::rng::{stream, Stage};

pub use layers::{cross_entropy, softmax};
pub use train::{
    batch_loss, cnn_train, gradient_check, gradient_check_with, EpochMetrics, GradCheck,
    TrainParams,
};

use layers::ConvGeom;

/// Input channels: the `s1, s2, s3` planes.
pub const INPUT_CHANNELS: usize = 3;

/// Architecture description without parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    /// `k × k` convolution, stride 1, zero padding `pad`.
    Conv { out: usize, k: usize, pad: usize },
    Relu,
    /// 2×2 max pooling with stride 2.
    MaxPool,
    Dense { out: usize },
}

impl LayerSpec {
    pub fn code(&self) -> String {
        match *self {
            LayerSpec::Conv { out, k, pad } => format!("conv{out}k{k}p{pad}"),
            LayerSpec::Relu => "relu".into(),
            LayerSpec::MaxPool => "pool".into(),
            LayerSpec::Dense { out } => format!("dense{out}"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => return Some(LayerSpec::Relu),
            "pool" => return Some(LayerSpec::MaxPool),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix("dense") {
            return rest.parse().ok().map(|out| LayerSpec::Dense { out });
        }
        let rest = s.strip_prefix("conv")?;
        let (out, rest) = rest.split_once('k')?;
        let (k, pad) = rest.split_once('p')?;
        Some(LayerSpec::Conv {
            out: out.parse().ok()?,
            k: k.parse().ok()?,
            pad: pad.parse().ok()?,
        })
    }
}

/// Comma-separated layer codes, e.g. `conv8k3p1,relu,pool,dense10`.
pub fn format_architecture(specs: &[LayerSpec]) -> String {
    specs.iter().map(LayerSpec::code).collect::<Vec<_>>().join(",")
}

pub fn parse_architecture(s: &str) -> Result<Vec<LayerSpec>> {
    s.split(',')
        .map(|t| {
            LayerSpec::parse(t.trim())
                .ok_or_else(|| Error::Format(format!("unknown layer code {t:?}")))
        })
        .collect()
}

/// conv 3→8, ReLU, pool, conv 8→16, ReLU, pool, dense 64, ReLU, dense C.
pub fn standard_architecture(class_count: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv { out: 8, k: 3, pad: 1 },
        LayerSpec::Relu,
        LayerSpec::MaxPool,
        LayerSpec::Conv { out: 16, k: 3, pad: 1 },
        LayerSpec::Relu,
        LayerSpec::MaxPool,
        LayerSpec::Dense { out: 64 },
        LayerSpec::Relu,
        LayerSpec::Dense { out: class_count },
    ]
}

/// `(channels, height, width)`.
pub type Shape = (usize, usize, usize);

fn len(s: Shape) -> usize {
    s.0 * s.1 * s.2
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv {
        geom: ConvGeom,
        /// `out × (in_c·k·k)`.
        weight: Vec<f64>,
        bias: Vec<f64>,
    },
    Relu,
    MaxPool {
        input: Shape,
    },
    Dense {
        /// `out × inp`.
        weight: Vec<f64>,
        bias: Vec<f64>,
    },
}

impl Layer {
    fn param_count(&self) -> usize {
        match self {
            Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias } => {
                weight.len() + bias.len()
            }
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    input: Shape,
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    class_count: usize,
    label_spec: Option<LabelSpec>,
    /// Hyperparameters of the run that produced the parameters, if any.
    trained_with: Option<TrainParams>,
}

/// Shape after each layer, validating the stack.
fn infer_shapes(input: Shape, specs: &[LayerSpec], class_count: usize) -> Result<Vec<Shape>> {
    if len(input) == 0 {
        return Err(Error::domain("empty input shape"));
    }
    let mut shapes = Vec::with_capacity(specs.len());
    let mut s = input;
    for (i, spec) in specs.iter().enumerate() {
        s = match *spec {
            LayerSpec::Conv { out, k, pad } => {
                if out == 0 || k == 0 || s.1 + 2 * pad < k || s.2 + 2 * pad < k {
                    return Err(Error::domain(format!(
                        "layer {i}: convolution {} does not fit a {}×{} input",
                        spec.code(),
                        s.1,
                        s.2
                    )));
                }
                (out, s.1 + 2 * pad + 1 - k, s.2 + 2 * pad + 1 - k)
            }
            LayerSpec::Relu => s,
            LayerSpec::MaxPool => {
                if !s.1.is_multiple_of(2) || !s.2.is_multiple_of(2) {
                    return Err(Error::domain(format!(
                        "layer {i}: pooling needs even sides, got {}×{}",
                        s.1, s.2
                    )));
                }
                (s.0, s.1 / 2, s.2 / 2)
            }
            LayerSpec::Dense { out } => {
                if out == 0 {
                    return Err(Error::domain(format!("layer {i}: dense layer with no outputs")));
                }
                (out, 1, 1)
            }
        };
        shapes.push(s);
    }
    match specs.last() {
        Some(LayerSpec::Dense { out }) if *out == class_count => Ok(shapes),
        _ => Err(Error::domain(format!(
            "the stack must end in a dense layer with {class_count} outputs"
        ))),
    }
}

impl CnnModel {
    /// Builds a network with uniform fan-in initialization `±√(6/fan_in)`
    /// drawn from `seed`, and zero biases.
    pub fn new(input: Shape, specs: &[LayerSpec], class_count: usize, seed: u64) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::domain("a classifier needs at least two classes"));
        }
        let shapes = infer_shapes(input, specs, class_count)?;
        let mut layers = Vec::with_capacity(specs.len());
        let mut s = input;
        for (i, spec) in specs.iter().enumerate() {
            let mut rng = stream(seed, i as u64, Stage::Init);
            let mut init = |n: usize, fan_in: usize| -> Vec<f64> {
                let a = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-a..=a)).collect()
            };
            layers.push(match *spec {
                LayerSpec::Conv { out, k, pad } => {
                    let geom = ConvGeom { in_c: s.0, h: s.1, w: s.2, k, pad };
                    Layer::Conv {
                        weight: init(out * geom.patch(), geom.patch()),
                        bias: vec![0.0; out],
                        geom,
                    }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool => Layer::MaxPool { input: s },
                LayerSpec::Dense { out } => Layer::Dense {
                    weight: init(out * len(s), len(s)),
                    bias: vec![0.0; out],
                },
            });
            s = shapes[i];
        }
        Ok(Self {
            input,
            specs: specs.to_vec(),
            layers,
            class_count,
            label_spec: None,
            trained_with: None,
        })
    }

    /// The default stack for `resolution × resolution` Stokes images.
    pub fn standard(resolution: usize, class_count: usize, seed: u64) -> Result<Self> {
        Self::new(
            (INPUT_CHANNELS, resolution, resolution),
            &standard_architecture(class_count),
            class_count,
            seed,
        )
    }

    /// Rebuilds a model from its architecture and flat parameter tensors in
    /// [`CnnModel::parameters`] order.
    pub fn from_parameters(
        input: Shape,
        specs: &[LayerSpec],
        class_count: usize,
        tensors: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let mut model = Self::new(input, specs, class_count, 0)?;
        let expected: Vec<usize> = model.parameters().iter().map(|t| t.len()).collect();
        let found: Vec<usize> = tensors.iter().map(Vec::len).collect();
        if expected != found {
            return Err(Error::shape(format!("{expected:?}"), format!("{found:?}")));
        }
        if !tensors.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite CNN parameter".into()));
        }
        for (dst, src) in model.parameters_mut().into_iter().zip(tensors) {
            dst.copy_from_slice(&src);
        }
        Ok(model)
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn architecture(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn label_spec(&self) -> Option<&LabelSpec> {
        self.label_spec.as_ref()
    }

    pub fn with_label_spec(mut self, spec: LabelSpec) -> Result<Self> {
        if spec.class_count() != self.class_count {
            return Err(Error::shape(self.class_count, spec.class_count()));
        }
        self.label_spec = Some(spec);
        Ok(self)
    }

    pub fn trained_with(&self) -> Option<&TrainParams> {
        self.trained_with.as_ref()
    }

    pub fn set_trained_with(&mut self, params: Option<TrainParams>) {
        self.trained_with = params;
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Weight then bias of each parametrized layer, in stack order.
    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias } = l {
                out.push(weight.as_slice());
                out.push(bias.as_slice());
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            if let Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias } = l {
                out.push(weight.as_mut_slice());
                out.push(bias.as_mut_slice());
            }
        }
        out
    }

    pub fn zero_gradients(&self) -> Vec<Vec<f64>> {
        self.parameters().iter().map(|t| vec![0.0; t.len()]).collect()
    }

    /// Flat CHW input from the polarization planes of an image.
    pub fn input_from(&self, img: &StokesImage) -> Result<Vec<f64>> {
        let (c, h, w) = self.input;
        if c != INPUT_CHANNELS || h != img.resolution() || w != img.resolution() {
            return Err(Error::shape(
                format!("{c}×{h}×{w} input"),
                format!("{INPUT_CHANNELS}×{0}×{0} image", img.resolution()),
            ));
        }
        let mut x = Vec::with_capacity(len(self.input));
        for plane in &img.planes()[..INPUT_CHANNELS] {
            x.extend_from_slice(plane);
        }
        Ok(x)
    }

    /// Output of every layer for a raw input; the last entry is the logits.
    pub fn activations(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        if x.len() != len(self.input) {
            return Err(Error::shape(len(self.input), x.len()));
        }
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let a = acts.last().map_or(x, Vec::as_slice);
            let next = match layer {
                Layer::Conv { geom, weight, bias } => layers::conv_forward(a, geom, weight, bias).0,
                Layer::Relu => layers::relu_forward(a),
                Layer::MaxPool { input } => layers::maxpool_forward(a, input.0, input.1, input.2).0,
                Layer::Dense { weight, bias } => layers::dense_forward(a, weight, bias),
            };
            acts.push(next);
        }
        Ok(acts)
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.activations(x)?.pop().expect("non-empty stack"))
    }

    /// Class probabilities for one image.
    pub fn forward(&self, img: &StokesImage) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(&self.input_from(img)?)?))
    }

    pub fn predict(&self, img: &StokesImage) -> Result<usize> {
        Ok(crate::svm::argmax(&self.logits(&self.input_from(img)?)?))
    }

    /// Cross-entropy of one sample; accumulates parameter gradients into
    /// `grads` and returns `(loss, predicted class)`.
    pub fn accumulate_gradients(
        &self,
        x: &[f64],
        label: usize,
        grads: &mut [Vec<f64>],
    ) -> Result<(f64, usize)> {
        if label >= self.class_count {
            return Err(Error::domain(format!(
                "label {label} outside 0..{}",
                self.class_count
            )));
        }
        if x.len() != len(self.input) {
            return Err(Error::shape(len(self.input), x.len()));
        }
        // forward, keeping what the backward pass needs
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut aux_cols: Vec<Vec<f64>> = Vec::new();
        let mut aux_args: Vec<Vec<u32>> = Vec::new();
        let mut a = x.to_vec();
        for layer in &self.layers {
            let next = match layer {
                Layer::Conv { geom, weight, bias } => {
                    let (out, col) = layers::conv_forward(&a, geom, weight, bias);
                    aux_cols.push(col);
                    out
                }
                Layer::Relu => layers::relu_forward(&a),
                Layer::MaxPool { input } => {
                    let (out, arg) = layers::maxpool_forward(&a, input.0, input.1, input.2);
                    aux_args.push(arg);
                    out
                }
                Layer::Dense { weight, bias } => layers::dense_forward(&a, weight, bias),
            };
            inputs.push(std::mem::replace(&mut a, next));
        }
        let logits = a;
        let loss = cross_entropy(&logits, label);
        let predicted = crate::svm::argmax(&logits);
        let mut delta = softmax(&logits);
        delta[label] -= 1.0;

        let mut g = grads.len();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &inputs[i];
            let need_input = i > 0;
            let next = match layer {
                Layer::Conv { geom, weight, .. } => {
                    g -= 2;
                    let (gw, gb) = grads[g..g + 2].split_at_mut(1);
                    let col = aux_cols.pop().expect("conv cache");
                    layers::conv_backward(&delta, &col, geom, weight, &mut gw[0], &mut gb[0], need_input)
                }
                Layer::Relu => Some(layers::relu_backward(&delta, input)),
                Layer::MaxPool { .. } => {
                    let arg = aux_args.pop().expect("pool cache");
                    Some(layers::maxpool_backward(&delta, &arg, input.len()))
                }
                Layer::Dense { weight, .. } => {
                    g -= 2;
                    let (gw, gb) = grads[g..g + 2].split_at_mut(1);
                    layers::dense_backward(&delta, input, weight, &mut gw[0], &mut gb[0], need_input)
                }
            };
            match next {
                Some(d) => delta = d,
                None => break,
            }
        }
        Ok((loss, predicted))
    }
}

impl crate::metrics::Classifier for CnnModel {
    fn class_count(&self) -> usize {
        self.class_count
    }

    fn classify(&self, img: &StokesImage) -> Result<usize> {
        self.predict(img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{render, stokes, GridSpec, VvbState};

    fn image(res: usize) -> StokesImage {
        let grid = GridSpec::new(res, 4.0, 1.0).unwrap();
        stokes(&render(&VvbState::new(-1, 3, 1.1, 0.4).unwrap(), &grid))
    }

    #[test]
    fn standard_stack_shapes() {
        let m = CnnModel::standard(64, 15, 1).unwrap();
        let shapes = infer_shapes(m.input_shape(), m.architecture(), 15).unwrap();
        assert_eq!(shapes[2], (8, 32, 32));
        assert_eq!(shapes[5], (16, 16, 16));
        assert_eq!(shapes[8], (15, 1, 1));
        assert_eq!(m.param_count(), 8 * 27 + 8 + 16 * 72 + 16 + 4096 * 64 + 64 + 64 * 15 + 15);
        assert!(CnnModel::standard(30, 15, 1).is_err()); // 30 → 15 is odd at the second pool
        assert!(CnnModel::new((3, 8, 8), &[LayerSpec::Relu], 2, 0).is_err());
    }

    #[test]
    fn output_is_a_probability_vector() {
        let img = image(16);
        let m = CnnModel::standard(16, 15, 3).unwrap();
        let p = m.forward(&img).unwrap();
        assert_eq!(p.len(), 15);
        assert!(p.iter().all(|&v| v >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(m.forward(&image(8)).is_err());
    }

    #[test]
    fn zero_parameters_give_uniform_output() {
        let mut m = CnnModel::standard(16, 26, 3).unwrap();
        for t in m.parameters_mut() {
            t.fill(0.0);
        }
        let p = m.forward(&image(16)).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 26.0).abs() < 1e-15));
    }

    #[test]
    fn convolution_is_translation_equivariant() {
        let m = CnnModel::standard(32, 15, 5).unwrap();
        let x = m.input_from(&image(32)).unwrap();
        let (c, h, w) = m.input_shape();
        let shift = 2;
        let mut shifted = vec![0.0; x.len()];
        for ch in 0..c {
            for y in 0..h {
                for xx in shift..w {
                    shifted[(ch * h + y) * w + xx] = x[(ch * h + y) * w + xx - shift];
                }
            }
        }
        let a = &m.activations(&x).unwrap()[0];
        let b = &m.activations(&shifted).unwrap()[0];
        // interior columns, away from the padded border and the cut strip
        for o in 0..8 {
            for y in 1..h - 1 {
                for xx in shift + 1..w - 1 {
                    let va = a[(o * h + y) * w + xx - shift];
                    let vb = b[(o * h + y) * w + xx];
                    assert!((va - vb).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn architecture_codes_round_trip() {
        let specs = standard_architecture(26);
        let s = format_architecture(&specs);
        assert_eq!(s, "conv8k3p1,relu,pool,conv16k3p1,relu,pool,dense64,relu,dense26");
        assert_eq!(parse_architecture(&s).unwrap(), specs);
        assert!(parse_architecture("conv8,relu").is_err());
    }

    #[test]
    fn parameters_rebuild_an_identical_model() {
        let m = CnnModel::standard(16, 15, 9).unwrap();
        let tensors = m.parameters().iter().map(|t| t.to_vec()).collect();
        let back = CnnModel::from_parameters(m.input_shape(), m.architecture(), 15, tensors).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn initialization_respects_fan_in_bound() {
        let m = CnnModel::standard(16, 15, 11).unwrap();
        let fans: [f64; 8] = [27.0, 27.0, 72.0, 72.0, 16.0 * 16.0, 16.0 * 16.0, 64.0, 64.0];
        for (k, t) in m.parameters().iter().enumerate() {
            if k % 2 == 1 {
                assert!(t.iter().all(|&v| v == 0.0));
            } else {
                let bound = (6.0 / fans[k]).sqrt();
                assert!(t.iter().all(|v| v.abs() <= bound));
            }
        }
    }
}

//! Convolutional backbone, shared keypoint head and the parameter transforms
//! that turn raw head outputs into a [`MixtureField`].
//!
//! Every cell of every pyramid level is one mixture component. The head
//! emits `2K` offset channels, `2K` scale channels and one presence channel;
//! offsets are scaled by `2^(l-5)` and added to the cell-center anchor.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::scalar::Real;
use crate::types::{GridAnchors, MixtureField, PyramidSpec};

/// Lower bound added to every predicted scale, in pixels.
pub const GAMMA_FLOOR: f64 = 1e-3;

const MAGIC: &str = "kpmix-checkpoint v1";

/// Stack of stride-2 convolutions; level `l` reads the output of the
/// `l`-th one.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    /// Number of 3x3 convolutions, the last one included.
    pub layers: usize,
    pub width: usize,
    pub k_total: usize,
    pub levels: Vec<u32>,
    /// Initial scale in pixels.
    pub gamma_init: f64,
    /// Initial foreground probability.
    pub o_init: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_side: usize,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    /// Desk-scale defaults: two levels at strides 8 and 16, eight head
    /// layers of width 32, initial scale a quarter of the image side.
    pub fn desk(image_side: usize, k_total: usize) -> Self {
        Self {
            image_side,
            backbone: BackboneConfig { width: 16 },
            head: HeadConfig {
                layers: 8,
                width: 32,
                k_total,
                levels: vec![3, 4],
                gamma_init: 0.25 * image_side as f64,
                o_init: 0.01,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.head;
        if h.layers == 0 {
            return Err(invalid("head needs at least one layer"));
        }
        if h.width == 0 || self.backbone.width == 0 || h.k_total == 0 {
            return Err(invalid("widths and keypoint count must be positive"));
        }
        if !(h.gamma_init > GAMMA_FLOOR) || !(h.o_init > 0.0 && h.o_init < 1.0) {
            return Err(invalid("initial scale must exceed the floor and initial presence lie in (0, 1)"));
        }
        if h.levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("pyramid levels must be strictly increasing"));
        }
        PyramidSpec::new(self.image_side, &h.levels)?;
        Ok(())
    }

    pub fn dims(&self) -> usize {
        2 * self.head.k_total
    }

    fn out_channels(&self) -> usize {
        2 * self.dims() + 1
    }
}

/// `softplus^-1(y)`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp()).ln_1p()
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn unflatten(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(invalid(format!("{} values for {} parameters", flat.len(), self.num_scalars())));
        }
        let mut at = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }
}

/// Per-image mixture parameters recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct MixtureVars {
    /// `[M, 2K]`
    pub mu: Var,
    /// `[M, 2K]`
    pub gamma: Var,
    /// `[M]`, `ln o`
    pub log_o: Var,
    /// `[M]`, `ln pi`
    pub log_pi: Var,
}

#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub pyramid: PyramidSpec,
    pub anchors: GridAnchors<T>,
    pub params: ParamSet<T>,
}

impl<T: Real> Model<T> {
    /// Fan-in scaled uniform init for hidden layers; the last layer starts
    /// near zero so its biases set the initial scale and presence.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let mut conv = |name: String, c_out: usize, c_in: usize, gain: f64, bias: Vec<f64>, rng: &mut ChaCha8Rng| {
            let fan_in = (c_in * 9) as f64;
            let bound = gain * (6.0 / fan_in).sqrt();
            let w = (0..c_out * c_in * 9).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
            names.push(format!("{name}.weight"));
            tensors.push(Tensor::new(vec![c_out, c_in, 3, 3], w).expect("sized above"));
            names.push(format!("{name}.bias"));
            tensors.push(Tensor::new(vec![c_out], bias.into_iter().map(T::lit).collect()).expect("sized above"));
        };
        let bw = config.backbone.width;
        let depth = *config.head.levels.last().expect("validated") as usize;
        for i in 0..depth {
            let c_in = if i == 0 { 1 } else { bw };
            conv(format!("backbone.{i}"), bw, c_in, 1.0, vec![0.0; bw], &mut rng);
        }
        let h = &config.head;
        for i in 0..h.layers {
            let c_in = if i == 0 { bw } else { h.width };
            if i + 1 < h.layers {
                conv(format!("head.{i}"), h.width, c_in, 1.0, vec![0.0; h.width], &mut rng);
            } else {
                let d = config.dims();
                let mut bias = vec![0.0; d];
                bias.extend(std::iter::repeat_n(inverse_softplus(h.gamma_init - GAMMA_FLOOR), d));
                bias.push(logit(h.o_init));
                conv(format!("head.{i}"), config.out_channels(), c_in, 0.01, bias, &mut rng);
            }
        }
        Self::from_params(config, ParamSet { names, tensors })
    }

    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let pyramid = PyramidSpec::new(config.image_side, &config.head.levels)?;
        let anchors = GridAnchors::new(&pyramid);
        Ok(Self {
            config,
            pyramid,
            anchors,
            params,
        })
    }

    pub fn num_components(&self) -> usize {
        self.pyramid.num_components()
    }

    /// Puts the parameters on the tape, trainable or frozen.
    pub fn record_params(&self, tape: &Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }

    /// Raw head output per level, each `[B, 4K + 1, h, w]`. `images` is
    /// `[B, 1, side, side]`.
    pub fn forward(&self, tape: &Tape<T>, params: &[Var], images: Var) -> Result<Vec<Var>> {
        let shape = tape.shape(images);
        let side = self.config.image_side;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != side || shape[3] != side {
            return Err(Error::Shape {
                op: "forward",
                detail: format!("expected [B, 1, {side}, {side}], got {shape:?}"),
            });
        }
        let depth = *self.config.head.levels.last().expect("validated") as usize;
        let mut x = images;
        let mut features = Vec::with_capacity(depth);
        for i in 0..depth {
            x = tape.conv2d(x, params[2 * i], params[2 * i + 1], 2)?;
            x = tape.swish(x);
            features.push(x);
        }
        let layers = self.config.head.layers;
        let head = &params[2 * depth..];
        self.config
            .head
            .levels
            .iter()
            .map(|&l| {
                let mut y = features[l as usize - 1];
                for i in 0..layers {
                    y = tape.conv2d(y, head[2 * i], head[2 * i + 1], 1)?;
                    if i + 1 < layers {
                        y = tape.swish(y);
                    }
                }
                Ok(y)
            })
            .collect()
    }

    /// Maps raw outputs of image `b` to mixture parameters:
    /// `mu = anchor + s * mu'`, `gamma = softplus(gamma') + floor`,
    /// `o = sigmoid(o')`, `pi = o / sum(o)` over all levels.
    pub fn transform(&self, tape: &Tape<T>, raw: &[Var], b: usize) -> Result<MixtureVars> {
        self.transform_with(tape, raw, b, &self.anchors)
    }

    pub fn transform_with(&self, tape: &Tape<T>, raw: &[Var], b: usize, anchors: &GridAnchors<T>) -> Result<MixtureVars> {
        let d = self.config.dims();
        let c = self.config.out_channels();
        if raw.len() != self.pyramid.levels.len() {
            return Err(Error::Shape {
                op: "transform_parameters",
                detail: format!("{} raw maps for {} levels", raw.len(), self.pyramid.levels.len()),
            });
        }
        let mut mus = Vec::new();
        let mut gammas = Vec::new();
        let mut os = Vec::new();
        for (li, (lv, &r)) in self.pyramid.levels.iter().zip(raw).enumerate() {
            let shape = tape.shape(r);
            if shape.len() != 4 || shape[1] != c || shape[2] != lv.height || shape[3] != lv.width || b >= shape[0] {
                return Err(Error::Shape {
                    op: "transform_parameters",
                    detail: format!("level {} map {shape:?}, image {b}", lv.level),
                });
            }
            let n = lv.num_cells();
            let at = |ch: usize, cell: usize| (b * c + ch) * n + cell;
            let idx = |first: usize| -> Vec<usize> {
                (0..n).flat_map(|cell| (0..d).map(move |k| at(first + k, cell))).collect()
            };
            let mu_raw = tape.gather(r, idx(0), vec![n, d])?;
            let anchor = tape.constant(Tensor::new(vec![n, d], anchors.broadcast_level(li, d))?);
            let scaled = tape.scalar_mul(mu_raw, T::lit(lv.scale()));
            mus.push(tape.add(scaled, anchor)?);
            let g_raw = tape.gather(r, idx(d), vec![n, d])?;
            let g = tape.softplus(g_raw);
            gammas.push(tape.add_scalar(g, T::lit(GAMMA_FLOOR)));
            os.push(tape.gather(r, (0..n).map(|cell| at(2 * d, cell)).collect(), vec![n])?);
        }
        let mu = tape.concat(&mus)?;
        let gamma = tape.concat(&gammas)?;
        let o_raw = tape.concat(&os)?;
        let m = self.num_components();
        // ln sigmoid(x) = -softplus(-x) stays finite for very negative x.
        let neg = tape.scalar_mul(o_raw, -T::one());
        let sp = tape.softplus(neg);
        let log_o = tape.scalar_mul(sp, -T::one());
        let o = tape.sigmoid(o_raw);
        let total = tape.sum(o);
        let log_total = tape.log(total);
        let log_total = tape.broadcast(log_total, vec![m])?;
        let log_pi = tape.sub(log_o, log_total)?;
        Ok(MixtureVars { mu, gamma, log_o, log_pi })
    }

    /// Reads a recorded mixture back as a validated field.
    pub fn field_from_tape(&self, tape: &Tape<T>, v: &MixtureVars) -> Result<MixtureField<T>> {
        let o = tape.value(v.log_o).data().iter().map(|x| x.exp()).collect();
        MixtureField::new(
            self.config.dims(),
            tape.value(v.mu).data().to_vec(),
            tape.value(v.gamma).data().to_vec(),
            o,
        )
    }

    /// Image tensor `[B, 1, side, side]` from row-major intensity buffers.
    pub fn batch_tensor(&self, images: &[&[f64]]) -> Result<Tensor<T>> {
        let side = self.config.image_side;
        let mut data = Vec::with_capacity(images.len() * side * side);
        for img in images {
            if img.len() != side * side {
                return Err(Error::Shape {
                    op: "forward",
                    detail: format!("image with {} pixels for side {side}", img.len()),
                });
            }
            data.extend(img.iter().map(|&v| T::lit(v)));
        }
        Tensor::new(vec![images.len(), 1, side, side], data)
    }

    /// Inference on one image.
    pub fn predict(&self, image: &[f64]) -> Result<MixtureField<T>> {
        let tape = Tape::new();
        let params = self.record_params(&tape, false);
        let x = tape.constant(self.batch_tensor(&[image])?);
        let raw = self.forward(&tape, &params, x)?;
        let v = self.transform(&tape, &raw, 0)?;
        self.field_from_tape(&tape, &v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = String::new();
        let c = &self.config;
        let levels: Vec<String> = c.head.levels.iter().map(u32::to_string).collect();
        writeln!(header, "{MAGIC}").ok();
        writeln!(header, "@image_side = {}", c.image_side).ok();
        writeln!(header, "@backbone_width = {}", c.backbone.width).ok();
        writeln!(header, "@head_layers = {}", c.head.layers).ok();
        writeln!(header, "@head_width = {}", c.head.width).ok();
        writeln!(header, "@k_total = {}", c.head.k_total).ok();
        writeln!(header, "@levels = {}", levels.join(",")).ok();
        writeln!(header, "@gamma_init = {:?}", c.head.gamma_init).ok();
        writeln!(header, "@o_init = {:?}", c.head.o_init).ok();
        for (name, t) in self.params.names.iter().zip(&self.params.tensors) {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(header, "{name} {}", dims.join("x")).ok();
        }
        writeln!(header, "end").ok();
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(header.as_bytes())?;
        for t in &self.params.tensors {
            for v in t.data() {
                out.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut rd = BufReader::new(std::fs::File::open(path)?);
        let mut line = String::new();
        let mut next = |rd: &mut BufReader<std::fs::File>| -> Result<String> {
            line.clear();
            if rd.read_line(&mut line)? == 0 {
                return Err(Error::Parse("checkpoint header ends early".into()));
            }
            Ok(line.trim_end().to_string())
        };
        if next(&mut rd)? != MAGIC {
            return Err(Error::Parse(format!("{} is not a checkpoint", path.display())));
        }
        let mut kv = std::collections::BTreeMap::new();
        let mut specs = Vec::new();
        loop {
            let l = next(&mut rd)?;
            if l == "end" {
                break;
            }
            if let Some(rest) = l.strip_prefix('@') {
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| Error::Parse(format!("bad header line `{l}`")))?;
                kv.insert(k.trim().to_string(), v.trim().to_string());
            } else {
                let (name, dims) = l
                    .split_once(' ')
                    .ok_or_else(|| Error::Parse(format!("bad tensor line `{l}`")))?;
                let shape = dims
                    .split('x')
                    .map(|s| s.parse::<usize>().map_err(|e| Error::Parse(format!("shape `{dims}`: {e}"))))
                    .collect::<Result<Vec<_>>>()?;
                specs.push((name.to_string(), shape));
            }
        }
        let get = |k: &str| -> Result<&String> { kv.get(k).ok_or_else(|| Error::Parse(format!("checkpoint lacks `{k}`"))) };
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|e| Error::Parse(format!("{k}: {e}"))) };
        let real = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|e| Error::Parse(format!("{k}: {e}"))) };
        let levels = get("levels")?
            .split(',')
            .map(|s| s.trim().parse::<u32>().map_err(|e| Error::Parse(format!("levels: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let config = ModelConfig {
            image_side: num("image_side")?,
            backbone: BackboneConfig { width: num("backbone_width")? },
            head: HeadConfig {
                layers: num("head_layers")?,
                width: num("head_width")?,
                k_total: num("k_total")?,
                levels,
                gamma_init: real("gamma_init")?,
                o_init: real("o_init")?,
            },
        };
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let mut buf = [0u8; 8];
        for (name, shape) in specs {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                rd.read_exact(&mut buf)?;
                data.push(T::lit(f64::from_le_bytes(buf)));
            }
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        let expected = Self::init(config.clone(), 0)?;
        let same = expected.params.names == names
            && expected.params.tensors.iter().zip(&tensors).all(|(a, b)| a.shape() == b.shape());
        if !same {
            return Err(Error::Parse("checkpoint tensors do not match its configuration".into()));
        }
        Self::from_params(config, ParamSet { names, tensors })
    }
}

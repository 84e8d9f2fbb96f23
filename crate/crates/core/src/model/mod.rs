//! Multi-scale encoder, per-scale dual-branch fusion blocks and a
//! nest-connection decoder.
//!
//! All forward passes run on a [`Tape`]. [`ModelWeights::bind`] places every
//! parameter on the tape, as a leaf when its stage is trainable and as a
//! constant otherwise, so freezing a stage simply means it receives no
//! gradient.

mod format;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor, TensorError, Var};

pub use format::{decode_weights, encode_weights, load_weights, save_weights, FORMAT_VERSION, MAGIC};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("missing parameter '{0}'")]
    MissingParam(String),
    #[error("parameter '{name}' has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter '{0}' is not finite")]
    NonFinite(String),
    #[error("weight file: {0}")]
    Format(String),
    #[error("weight file checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_scales: usize,
    pub channels: Vec<usize>,
    pub heads: usize,
    /// Height-then-width attention pairs per modality in each fusion block.
    pub layers: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_scales: 3,
            channels: vec![8, 16, 32],
            heads: 2,
            layers: 2,
            height: 32,
            width: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.num_scales == 0 {
            return bad("num_scales must be >= 1".into());
        }
        if self.channels.len() != self.num_scales {
            return bad(format!(
                "{} channel counts for {} scales",
                self.channels.len(),
                self.num_scales
            ));
        }
        if self.heads == 0 || self.layers == 0 {
            return bad("heads and layers must be >= 1".into());
        }
        if let Some(c) = self.channels.iter().find(|&&c| c == 0 || c % self.heads != 0) {
            return bad(format!("channel count {c} is not a positive multiple of {} heads", self.heads));
        }
        let f = 1usize << (self.num_scales - 1);
        if self.height == 0 || self.width == 0 || self.height % f != 0 || self.width % f != 0 {
            return bad(format!(
                "input {}x{} is not divisible by {f}",
                self.height, self.width
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self, scale: usize) -> usize {
        self.channels[scale] / self.heads
    }

    /// `[C_m, H / 2^m, W / 2^m]` for zero-based scale `m`.
    pub fn scale_shape(&self, scale: usize) -> [usize; 3] {
        [self.channels[scale], self.height >> scale, self.width >> scale]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Encoder,
    Decoder,
    Fusion,
}

impl Stage {
    pub fn tag(self) -> u8 {
        match self {
            Stage::Encoder => 0,
            Stage::Decoder => 1,
            Stage::Fusion => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Stage::Encoder),
            1 => Some(Stage::Decoder),
            2 => Some(Stage::Fusion),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub stage: Stage,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    stage: Stage,
    fan_in: usize,
}

fn conv_specs(out: &mut Vec<ParamSpec>, prefix: &str, stage: Stage, c_out: usize, c_in: usize, k: usize) {
    let fan_in = c_in * k * k;
    out.push(ParamSpec {
        name: format!("{prefix}.w"),
        shape: vec![c_out, c_in, k, k],
        stage,
        fan_in,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.b"),
        shape: vec![c_out],
        stage,
        fan_in,
    });
}

pub const ATTENTION_PROJECTIONS: [&str; 4] = ["q", "k", "v", "o"];

/// Every parameter of `cfg` in initialization order.
fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let ch = &cfg.channels;
    let mut s = Vec::new();
    conv_specs(&mut s, "enc.0.conv0", Stage::Encoder, ch[0], 1, 3);
    conv_specs(&mut s, "enc.0.conv1", Stage::Encoder, ch[0], ch[0], 3);
    for m in 1..cfg.num_scales {
        conv_specs(&mut s, &format!("enc.{m}.conv"), Stage::Encoder, ch[m], ch[m - 1], 3);
    }
    for m in 0..cfg.num_scales {
        let c = ch[m];
        conv_specs(&mut s, &format!("fuse.{m}.spatial0"), Stage::Fusion, c, 2 * c, 3);
        conv_specs(&mut s, &format!("fuse.{m}.spatial1"), Stage::Fusion, c, c, 3);
        for modality in ["vis", "ir"] {
            for l in 0..cfg.layers {
                for axis in ["h", "w"] {
                    for p in ATTENTION_PROJECTIONS {
                        s.push(ParamSpec {
                            name: format!("fuse.{m}.{modality}.{l}.{axis}.{p}"),
                            shape: vec![c, c],
                            stage: Stage::Fusion,
                            fan_in: c,
                        });
                    }
                }
            }
        }
        conv_specs(&mut s, &format!("fuse.{m}.out"), Stage::Fusion, c, 5 * c, 1);
    }
    for m in (0..cfg.num_scales - 1).rev() {
        conv_specs(&mut s, &format!("dec.{m}.conv"), Stage::Decoder, ch[m], ch[m] + ch[m + 1], 3);
    }
    conv_specs(&mut s, "dec.out", Stage::Decoder, 1, ch[0], 3);
    s
}

/// Named parameters of one model, each tagged with the stage that owns it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Param>,
}

impl ModelWeights {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_specs(cfg)
            .into_iter()
            .map(|spec| {
                let bound = (1.0 / spec.fan_in as f64).sqrt();
                let value = Tensor::from_fn(&spec.shape, |_| rng.gen_range(-bound..=bound));
                (spec.name, Param { value, stage: spec.stage })
            })
            .collect();
        Ok(Self {
            config: cfg.clone(),
            params,
        })
    }

    /// Encoder and decoder from `self`, freshly initialized fusion blocks for
    /// `cfg`. The two configs may differ only in `layers` and `heads`.
    pub fn with_fresh_fusion(&self, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut fresh = Self::init(cfg, seed)?;
        for (name, p) in fresh.params.iter_mut() {
            if p.stage == Stage::Fusion {
                continue;
            }
            let src = self
                .params
                .get(name)
                .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if src.value.shape() != p.value.shape() {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: src.value.shape().to_vec(),
                });
            }
            p.value = src.value.clone();
        }
        Ok(fresh)
    }

    /// Checks that the parameter set is exactly the one `config` requires.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let specs = param_specs(&self.config);
        if specs.len() != self.params.len() {
            let unknown = self
                .params
                .keys()
                .find(|k| !specs.iter().any(|s| &s.name == *k))
                .cloned()
                .unwrap_or_default();
            return Err(ModelError::Format(format!(
                "{} parameters for a config that needs {} (unexpected '{unknown}')",
                self.params.len(),
                specs.len()
            )));
        }
        for spec in specs {
            let p = self
                .params
                .get(&spec.name)
                .ok_or_else(|| ModelError::MissingParam(spec.name.clone()))?;
            if p.value.shape() != spec.shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: spec.name,
                    expected: spec.shape,
                    found: p.value.shape().to_vec(),
                });
            }
            if p.stage != spec.stage {
                return Err(ModelError::Format(format!("parameter '{}' has the wrong stage tag", spec.name)));
            }
            if !p.value.is_finite() {
                return Err(ModelError::NonFinite(spec.name));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(ModelError::ParamShape {
                name: name.to_string(),
                expected: p.value.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn names_in(&self, stage: Stage) -> impl Iterator<Item = &str> {
        self.params
            .iter()
            .filter(move |(_, p)| p.stage == stage)
            .map(|(n, _)| n.as_str())
    }

    pub fn count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter on `tape`; those whose stage satisfies
    /// `trainable` become leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(Stage) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| {
                let v = if trainable(p.stage) {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound {
            config: self.config.clone(),
            vars,
        }
    }
}

/// Parameters recorded on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    pub config: ModelConfig,
    pub vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn leaves<'a>(&'a self, tape: &'a Tape) -> impl Iterator<Item = (&'a str, Var)> + 'a {
        self.vars
            .iter()
            .filter(move |(_, v)| tape.requires_grad(**v))
            .map(|(n, v)| (n.as_str(), *v))
    }
}

/// Encoder features, finest scale first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub scales: Vec<Var>,
}

impl FeaturePyramid {
    pub fn values(&self, tape: &Tape) -> Vec<Tensor> {
        self.scales.iter().map(|&v| tape.value(v).clone()).collect()
    }
}

fn conv_layer(tape: &mut Tape, b: &Bound, prefix: &str, x: Var, padding: usize) -> Result<Var> {
    let w = b.var(&format!("{prefix}.w"))?;
    let bias = b.var(&format!("{prefix}.b"))?;
    let y = tape.conv2d(x, w, 1, padding)?;
    Ok(tape.add_channel_bias(y, bias)?)
}

fn conv_relu(tape: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let y = conv_layer(tape, b, prefix, x, 1)?;
    Ok(tape.relu(y))
}

fn check_image(tape: &Tape, cfg: &ModelConfig, img: Var) -> Result<()> {
    let expected = [1, cfg.height, cfg.width];
    if tape.shape(img) != expected {
        return Err(ModelError::Config(format!(
            "image shape {:?} does not match model input {expected:?}",
            tape.shape(img)
        )));
    }
    Ok(())
}

pub fn encode(tape: &mut Tape, b: &Bound, img: Var) -> Result<FeaturePyramid> {
    let cfg = &b.config;
    check_image(tape, cfg, img)?;
    let x = conv_relu(tape, b, "enc.0.conv0", img)?;
    let mut x = conv_relu(tape, b, "enc.0.conv1", x)?;
    let mut scales = vec![x];
    for m in 1..cfg.num_scales {
        let pooled = tape.max_pool2d(x, 2)?;
        x = conv_relu(tape, b, &format!("enc.{m}.conv"), pooled)?;
        scales.push(x);
    }
    Ok(FeaturePyramid { scales })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Height,
    Width,
}

/// Result of one axial-attention layer.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    /// `x + attention(x)`, shape `[C,H,W]`.
    pub output: Var,
    /// Softmax weights, `[rows * heads, L, L]` where `L` is the attended
    /// axis length and rows run over the other spatial axis.
    pub weights: Var,
}

/// Multi-head self-attention along one spatial axis with a residual add.
///
/// `proj` holds the `[C,C]` query, key, value and output projections,
/// applied as `tokens @ W`.
pub fn axial_attention(tape: &mut Tape, x: Var, axis: Axis, proj: [Var; 4], heads: usize) -> Result<Attention> {
    let [c, _, _] = *tape.shape(x) else {
        return Err(ModelError::Config(format!(
            "axial attention needs [C,H,W], got {:?}",
            tape.shape(x)
        )));
    };
    if heads == 0 || c % heads != 0 {
        return Err(ModelError::Config(format!("{c} channels are not divisible by {heads} heads")));
    }
    match axis {
        Axis::Width => width_attention(tape, x, proj, heads),
        Axis::Height => {
            let t = tape.permute(x, &[0, 2, 1])?;
            let a = width_attention(tape, t, proj, heads)?;
            Ok(Attention {
                output: tape.permute(a.output, &[0, 2, 1])?,
                weights: a.weights,
            })
        }
    }
}

fn width_attention(tape: &mut Tape, x: Var, [wq, wk, wv, wo]: [Var; 4], heads: usize) -> Result<Attention> {
    let [c, h, w] = *tape.shape(x) else { unreachable!() };
    let dh = c / heads;
    let tokens = tape.permute(x, &[1, 2, 0])?;
    let tokens = tape.reshape(tokens, &[h * w, c])?;
    let split = |tape: &mut Tape, wt: Var| -> Result<Var> {
        let p = tape.matmul(tokens, wt)?;
        let p = tape.reshape(p, &[h, w, heads, dh])?;
        let p = tape.permute(p, &[0, 2, 1, 3])?;
        Ok(tape.reshape(p, &[h * heads, w, dh])?)
    };
    let q = split(tape, wq)?;
    let k = split(tape, wk)?;
    let v = split(tape, wv)?;
    let kt = tape.permute(k, &[0, 2, 1])?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.mul_scalar(logits, 1.0 / (dh as f64).sqrt());
    let weights = tape.softmax(logits, 2)?;
    let o = tape.matmul(weights, v)?;
    let o = tape.reshape(o, &[h, heads, w, dh])?;
    let o = tape.permute(o, &[0, 2, 1, 3])?;
    let o = tape.reshape(o, &[h * w, c])?;
    let o = tape.matmul(o, wo)?;
    let o = tape.reshape(o, &[h, w, c])?;
    let o = tape.permute(o, &[2, 0, 1])?;
    Ok(Attention {
        output: tape.add(x, o)?,
        weights,
    })
}

fn projections(b: &Bound, prefix: &str) -> Result<[Var; 4]> {
    let [q, k, v, o] = ATTENTION_PROJECTIONS.map(|p| b.var(&format!("{prefix}.{p}")));
    Ok([q?, k?, v?, o?])
}

/// Convolutional branch of fusion block `scale` over `concat(phi_v, phi_ir)`.
pub fn spatial_branch(tape: &mut Tape, b: &Bound, scale: usize, phi_v: Var, phi_ir: Var) -> Result<Var> {
    let x = tape.concat(&[phi_v, phi_ir], 0)?;
    let x = conv_relu(tape, b, &format!("fuse.{scale}.spatial0"), x)?;
    conv_relu(tape, b, &format!("fuse.{scale}.spatial1"), x)
}

/// Stacked height/width attention for one modality of fusion block `scale`.
pub fn transformer_branch(tape: &mut Tape, b: &Bound, scale: usize, modality: &str, phi: Var) -> Result<Var> {
    let mut t = phi;
    for l in 0..b.config.layers {
        for (axis, tag) in [(Axis::Height, "h"), (Axis::Width, "w")] {
            let proj = projections(b, &format!("fuse.{scale}.{modality}.{l}.{tag}"))?;
            t = axial_attention(tape, t, axis, proj, b.config.heads)?.output;
        }
    }
    Ok(t)
}

pub fn fuse_block(tape: &mut Tape, b: &Bound, scale: usize, phi_v: Var, phi_ir: Var) -> Result<Var> {
    if tape.shape(phi_v) != tape.shape(phi_ir) {
        return Err(ModelError::Config(format!(
            "fusion inputs differ: {:?} vs {:?}",
            tape.shape(phi_v),
            tape.shape(phi_ir)
        )));
    }
    let s = spatial_branch(tape, b, scale, phi_v, phi_ir)?;
    let tv = transformer_branch(tape, b, scale, "vis", phi_v)?;
    let ti = transformer_branch(tape, b, scale, "ir", phi_ir)?;
    let all = tape.concat(&[s, tv, ti, phi_v, phi_ir], 0)?;
    let y = conv_layer(tape, b, &format!("fuse.{scale}.out"), all, 0)?;
    Ok(tape.relu(y))
}

pub fn decode(tape: &mut Tape, b: &Bound, pyr: &FeaturePyramid) -> Result<Var> {
    let cfg = &b.config;
    if pyr.scales.len() != cfg.num_scales {
        return Err(ModelError::Config(format!(
            "pyramid has {} scales, model has {}",
            pyr.scales.len(),
            cfg.num_scales
        )));
    }
    for (m, &s) in pyr.scales.iter().enumerate() {
        if tape.shape(s) != cfg.scale_shape(m) {
            return Err(ModelError::Config(format!(
                "scale {m} has shape {:?}, expected {:?}",
                tape.shape(s),
                cfg.scale_shape(m)
            )));
        }
    }
    let mut d = pyr.scales[cfg.num_scales - 1];
    for m in (0..cfg.num_scales - 1).rev() {
        let up = tape.upsample_nearest(d, 2)?;
        let cat = tape.concat(&[up, pyr.scales[m]], 0)?;
        d = conv_relu(tape, b, &format!("dec.{m}.conv"), cat)?;
    }
    let y = conv_layer(tape, b, "dec.out", d, 1)?;
    Ok(tape.sigmoid(y))
}

pub fn forward_ae(tape: &mut Tape, b: &Bound, img: Var) -> Result<Var> {
    let pyr = encode(tape, b, img)?;
    decode(tape, b, &pyr)
}

#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub fused: Var,
    pub fused_pyramid: FeaturePyramid,
    pub vis_pyramid: FeaturePyramid,
    pub ir_pyramid: FeaturePyramid,
}

pub fn forward_fusion(tape: &mut Tape, b: &Bound, vis: Var, ir: Var) -> Result<FusionOutput> {
    let vis_pyramid = encode(tape, b, vis)?;
    let ir_pyramid = encode(tape, b, ir)?;
    fuse_pyramids(tape, b, vis_pyramid, ir_pyramid)
}

/// Fusion and decoding from precomputed encoder features.
pub fn fuse_pyramids(
    tape: &mut Tape,
    b: &Bound,
    vis_pyramid: FeaturePyramid,
    ir_pyramid: FeaturePyramid,
) -> Result<FusionOutput> {
    let scales = vis_pyramid
        .scales
        .iter()
        .zip(&ir_pyramid.scales)
        .enumerate()
        .map(|(m, (&v, &i))| fuse_block(tape, b, m, v, i))
        .collect::<Result<Vec<_>>>()?;
    let fused_pyramid = FeaturePyramid { scales };
    let fused = decode(tape, b, &fused_pyramid)?;
    Ok(FusionOutput {
        fused,
        fused_pyramid,
        vis_pyramid,
        ir_pyramid,
    })
}

/// Untracked autoencoder pass on a `[1,H,W]` image.
pub fn reconstruct(w: &ModelWeights, img: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = w.bind(&mut tape, |_| false);
    let x = tape.constant(img.clone());
    let y = forward_ae(&mut tape, &b, x)?;
    Ok(tape.value(y).clone())
}

/// Untracked fusion pass on `[1,H,W]` images.
pub fn fuse_images(w: &ModelWeights, vis: &Tensor, ir: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = w.bind(&mut tape, |_| false);
    let (v, i) = (tape.constant(vis.clone()), tape.constant(ir.clone()));
    let out = forward_fusion(&mut tape, &b, v, i)?;
    Ok(tape.value(out.fused).clone())
}

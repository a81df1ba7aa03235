//! Trainable weights of the dual encoder.
//!
//! Weights are stored as one flat, ordered list of named tensors (the
//! checkpoint and optimizer view). The structs below are generic over the
//! leaf type so the same shape can hold flat indices, tape variables or
//! tensors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::checkpoint::{self, NamedTensor};
use crate::autodiff::Tensor;

use super::EncodeError;

#[derive(Clone, Debug, PartialEq)]
pub struct Gru<T> {
    pub w_z: T,
    pub w_r: T,
    pub w_h: T,
    pub u_z: T,
    pub u_r: T,
    pub u_h: T,
    pub b_z: T,
    pub b_r: T,
    pub b_h: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiGru<T> {
    pub forward: Gru<T>,
    pub backward: Gru<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    pub query: T,
    pub key: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBank<T> {
    pub width: usize,
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch<T> {
    pub gru: BiGru<T>,
    pub attention: Attention<T>,
    pub conv: Vec<ConvBank<T>>,
    pub fc: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub video: Branch<T>,
    pub text: Branch<T>,
}

impl<T> Gru<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Gru<U> {
        Gru {
            w_z: f(&self.w_z),
            w_r: f(&self.w_r),
            w_h: f(&self.w_h),
            u_z: f(&self.u_z),
            u_r: f(&self.u_r),
            u_h: f(&self.u_h),
            b_z: f(&self.b_z),
            b_r: f(&self.b_r),
            b_h: f(&self.b_h),
        }
    }
}

impl<T> Branch<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Branch<U> {
        Branch {
            gru: BiGru {
                forward: self.gru.forward.map(f),
                backward: self.gru.backward.map(f),
            },
            attention: Attention {
                query: f(&self.attention.query),
                key: f(&self.attention.key),
            },
            conv: self
                .conv
                .iter()
                .map(|b| ConvBank {
                    width: b.width,
                    weight: f(&b.weight),
                    bias: f(&b.bias),
                })
                .collect(),
            fc: Linear {
                weight: f(&self.fc.weight),
                bias: f(&self.fc.bias),
            },
        }
    }
}

impl<T> Network<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Network<U> {
        Network {
            video: self.video.map(f),
            text: self.text.map(f),
        }
    }
}

/// Dimensions of both encoder branches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Keyframe feature dimension.
    pub feature_dim: usize,
    /// Word embedding dimension.
    pub word_dim: usize,
    /// Bag-of-words vocabulary size (textual first level).
    pub vocab_size: usize,
    /// GRU hidden size per direction.
    pub hidden: usize,
    pub attention_dim: usize,
    pub conv_widths: Vec<usize>,
    /// Filters per convolution width.
    pub conv_filters: usize,
    /// Common space dimension.
    pub common_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            word_dim: 16,
            vocab_size: 1000,
            hidden: 32,
            attention_dim: 32,
            conv_widths: vec![2, 3, 4],
            conv_filters: 16,
            common_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncodeError> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("word_dim", self.word_dim),
            ("vocab_size", self.vocab_size),
            ("hidden", self.hidden),
            ("attention_dim", self.attention_dim),
            ("conv_filters", self.conv_filters),
            ("common_dim", self.common_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(EncodeError::Config(format!("{name} must be positive")));
        }
        if self.conv_widths.is_empty() || self.conv_widths.contains(&0) {
            return Err(EncodeError::Config("conv widths must be positive".into()));
        }
        let mut sorted = self.conv_widths.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.conv_widths.len() {
            return Err(EncodeError::Config("conv widths must be distinct".into()));
        }
        Ok(())
    }

    /// Dimension of the third-level encoding.
    pub fn conv_dim(&self) -> usize {
        self.conv_widths.len() * self.conv_filters
    }

    fn level1_dim(&self, video: bool) -> usize {
        if video {
            self.feature_dim
        } else {
            self.vocab_size
        }
    }
}

#[derive(Clone, Copy)]
enum Init {
    Glorot,
    Zeros,
}

struct Spec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

#[derive(Default)]
struct LayoutBuilder {
    specs: Vec<Spec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.specs.push(Spec {
            name,
            rows,
            cols,
            init,
        });
        self.specs.len() - 1
    }

    fn gru(&mut self, prefix: &str, input: usize, h: usize) -> Gru<usize> {
        let mut w = |n: &str, rows: usize, init| self.add(format!("{prefix}.{n}"), rows, h, init);
        Gru {
            w_z: w("w_z", input, Init::Glorot),
            w_r: w("w_r", input, Init::Glorot),
            w_h: w("w_h", input, Init::Glorot),
            u_z: w("u_z", h, Init::Glorot),
            u_r: w("u_r", h, Init::Glorot),
            u_h: w("u_h", h, Init::Glorot),
            b_z: w("b_z", 1, Init::Zeros),
            b_r: w("b_r", 1, Init::Zeros),
            b_h: w("b_h", 1, Init::Zeros),
        }
    }

    fn branch(&mut self, prefix: &str, cfg: &EncoderConfig, video: bool) -> Branch<usize> {
        let input = if video { cfg.feature_dim } else { cfg.word_dim };
        let h = cfg.hidden;
        let gru = BiGru {
            forward: self.gru(&format!("{prefix}.gru.forward"), input, h),
            backward: self.gru(&format!("{prefix}.gru.backward"), input, h),
        };
        let attention = Attention {
            query: self.add(format!("{prefix}.attention.query"), 2 * h, cfg.attention_dim, Init::Glorot),
            key: self.add(format!("{prefix}.attention.key"), 2 * h, cfg.attention_dim, Init::Glorot),
        };
        let conv = cfg
            .conv_widths
            .iter()
            .map(|&w| ConvBank {
                width: w,
                weight: self.add(
                    format!("{prefix}.conv.w{w}.weight"),
                    w * 2 * h,
                    cfg.conv_filters,
                    Init::Glorot,
                ),
                bias: self.add(format!("{prefix}.conv.w{w}.bias"), 1, cfg.conv_filters, Init::Zeros),
            })
            .collect();
        let fc_in = cfg.level1_dim(video) + 2 * h + cfg.conv_dim();
        let fc = Linear {
            weight: self.add(format!("{prefix}.fc.weight"), fc_in, cfg.common_dim, Init::Glorot),
            bias: self.add(format!("{prefix}.fc.bias"), 1, cfg.common_dim, Init::Zeros),
        };
        Branch {
            gru,
            attention,
            conv,
            fc,
        }
    }
}

fn layout(cfg: &EncoderConfig) -> (Network<usize>, Vec<Spec>) {
    let mut b = LayoutBuilder::default();
    let net = Network {
        video: b.branch("video", cfg, true),
        text: b.branch("text", cfg, false),
    };
    (net, b.specs)
}

/// All trainable weights plus the layout that names them.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    layout: Network<usize>,
    tensors: Vec<NamedTensor>,
}

impl EncoderParams {
    /// Glorot-uniform weights and zero biases from a seeded generator.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self, EncodeError> {
        config.validate()?;
        let (layout, specs) = layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = specs
            .into_iter()
            .map(|s| {
                let data = match s.init {
                    Init::Zeros => vec![0.0; s.rows * s.cols],
                    Init::Glorot => {
                        let limit = (6.0 / (s.rows + s.cols) as f64).sqrt();
                        (0..s.rows * s.cols)
                            .map(|_| rng.random_range(-limit..limit))
                            .collect()
                    }
                };
                NamedTensor {
                    name: s.name,
                    tensor: Tensor::matrix(s.rows, s.cols, data).expect("layout shapes are valid"),
                }
            })
            .collect();
        Ok(Self {
            config,
            layout,
            tensors,
        })
    }

    /// Rebuilds parameters from named tensors, inferring every dimension
    /// from the tensor shapes. Unrelated tensors are ignored.
    pub fn from_named(named: &[NamedTensor]) -> Result<Self, EncodeError> {
        let find = |name: &str| -> Result<&Tensor, EncodeError> {
            named
                .iter()
                .find(|t| t.name == name)
                .map(|t| &t.tensor)
                .ok_or_else(|| EncodeError::Checkpoint(format!("missing tensor {name}")))
        };
        let v_wz = find("video.gru.forward.w_z")?;
        let t_wz = find("text.gru.forward.w_z")?;
        let query = find("video.attention.query")?;
        let v_fc = find("video.fc.weight")?;
        let t_fc = find("text.fc.weight")?;
        let hidden = v_wz.cols();
        let mut conv_widths: Vec<(usize, usize)> = named
            .iter()
            .filter_map(|t| {
                let rest = t.name.strip_prefix("video.conv.w")?;
                let w: usize = rest.strip_suffix(".weight")?.parse().ok()?;
                Some((w, t.tensor.cols()))
            })
            .collect();
        conv_widths.sort_unstable();
        let conv_filters = conv_widths.first().map(|c| c.1).unwrap_or(0);
        let conv_dim = conv_widths.len() * conv_filters;
        let vocab_size = t_fc
            .rows()
            .checked_sub(2 * hidden + conv_dim)
            .ok_or_else(|| EncodeError::Checkpoint("text fc too small".into()))?;
        let config = EncoderConfig {
            feature_dim: v_wz.rows(),
            word_dim: t_wz.rows(),
            vocab_size,
            hidden,
            attention_dim: query.cols(),
            conv_widths: conv_widths.iter().map(|c| c.0).collect(),
            conv_filters,
            common_dim: v_fc.cols(),
        };
        config
            .validate()
            .map_err(|e| EncodeError::Checkpoint(e.to_string()))?;
        let (layout, specs) = layout(&config);
        let mut tensors = Vec::with_capacity(specs.len());
        for s in specs {
            let t = find(&s.name)?;
            if t.shape() != [s.rows, s.cols] {
                return Err(EncodeError::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected [{}, {}]",
                    s.name,
                    t.shape(),
                    s.rows,
                    s.cols
                )));
            }
            tensors.push(NamedTensor {
                name: s.name,
                tensor: t.clone(),
            });
        }
        Ok(Self {
            config,
            layout,
            tensors,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layout(&self) -> &Network<usize> {
        &self.layout
    }

    pub fn named(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.tensors[index].tensor
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter().map(|t| &t.tensor)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut().map(|t| &mut t.tensor)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.len()).sum()
    }

    /// Weights as they would be after a checkpoint round trip.
    pub fn quantize_f32(&mut self) {
        for t in self.tensors_mut() {
            t.quantize_f32();
        }
    }

    /// Network layout with concrete tensors at the leaves.
    pub fn view(&self) -> Network<&Tensor> {
        self.layout.map(&mut |&i| &self.tensors[i].tensor)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn fingerprint(&self) -> String {
        checkpoint::fingerprint(&self.tensors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let cfg = EncoderConfig {
            vocab_size: 10,
            ..EncoderConfig::default()
        };
        let a = EncoderParams::init(cfg.clone(), 3).unwrap();
        let b = EncoderParams::init(cfg.clone(), 3).unwrap();
        let c = EncoderParams::init(cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn named_round_trip_infers_config() {
        let cfg = EncoderConfig {
            feature_dim: 7,
            word_dim: 5,
            vocab_size: 11,
            hidden: 3,
            attention_dim: 4,
            conv_widths: vec![2, 3],
            conv_filters: 2,
            common_dim: 6,
        };
        let p = EncoderParams::init(cfg.clone(), 1).unwrap();
        let mut shuffled = p.named().to_vec();
        shuffled.reverse();
        let back = EncoderParams::from_named(&shuffled).unwrap();
        assert_eq!(back.config(), &cfg);
        assert_eq!(back, p);
        let view = p.view();
        assert_eq!(view.text.fc.weight.shape(), &[11 + 6 + 4, 6]);
        assert_eq!(view.video.conv[1].weight.shape(), &[3 * 6, 2]);
    }

    #[test]
    fn invalid_configs() {
        let bad = EncoderConfig {
            hidden: 0,
            ..EncoderConfig::default()
        };
        assert!(EncoderParams::init(bad, 0).is_err());
        let dup = EncoderConfig {
            conv_widths: vec![2, 2],
            ..EncoderConfig::default()
        };
        assert!(dup.validate().is_err());
        assert!(EncoderParams::from_named(&[]).is_err());
    }
}

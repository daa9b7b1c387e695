//! Peer models: encoder + projection head, plus the optional prediction head
//! used by the simsiam objective.
//!
//! Three encoder families are provided. `small-conv` is a plain stack of
//! conv/BN/ReLU blocks sized for desk-scale runs; `resnet-variant` and
//! `wide-resnet-variant` are reduced residual builders. All families honor
//! the small-image stem rule: a 3x3 stride-1 first convolution with no
//! max-pooling stage after it.

use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{EmbeddingBatch, PeerTag, ViewTag};
use crate::nn::{
    Adam, BatchNorm1d, BatchNorm2d, BufferFn, Conv2d, ConvNet, DenseLayer, Linear, MaxPool2d,
    Mlp, ParamFn, ResidualBlock, Shortcut, SpatialLayer, StateFn,
};
use crate::rng::{derive_rng, Domain};

/// Encoder family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderFamily {
    #[serde(rename = "small-conv")]
    SmallConv,
    #[serde(rename = "resnet-variant")]
    Resnet,
    #[serde(rename = "wide-resnet-variant")]
    WideResnet,
}

/// Encoder architecture description.
///
/// `depth_spec` is family specific: `small-conv` takes `BLOCKSxBASE`
/// (e.g. `4x8`: four conv blocks starting at 8 channels), `resnet-variant`
/// takes a depth in {10, 18, 34}, and `wide-resnet-variant` takes
/// `DEPTH-WIDEN` (e.g. `10-2`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub family: EncoderFamily,
    pub depth_spec: String,
    pub small_image_stem: bool,
    pub feature_dim: usize,
}

impl EncoderConfig {
    /// Short human-readable architecture id used in reports.
    pub fn describe(&self) -> String {
        let fam = match self.family {
            EncoderFamily::SmallConv => "small-conv",
            EncoderFamily::Resnet => "resnet",
            EncoderFamily::WideResnet => "wrn",
        };
        format!("{fam}-{}", self.depth_spec)
    }
}

/// Two affine layers with one rectified-linear nonlinearity between them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    pub hidden_dim: usize,
    #[serde(default = "default_projection_dim")]
    pub output_dim: usize,
}

pub fn default_projection_dim() -> usize {
    128
}

/// Prediction head; present exactly when the objective is simsiam.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub hidden_dim: usize,
    pub output_dim: usize,
}

/// Learning objective attached to a peer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Contrastive,
    Simsiam,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Contrastive => "contrastive",
            Objective::Simsiam => "simsiam",
        }
    }

    /// Component name of the task loss under this objective.
    pub fn loss_name(self) -> &'static str {
        match self {
            Objective::Contrastive => "cl",
            Objective::Simsiam => "ss",
        }
    }
}

/// Full per-peer model description; what a checkpoint stores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerConfig {
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictor: Option<PredictorConfig>,
    pub objective: Objective,
}

/// Encoder network plus global average pooling down to a feature vector.
pub struct Encoder {
    pub net: ConvNet,
    feature_dim: usize,
    pool_dims: Option<(usize, usize, usize, usize)>,
}

impl Encoder {
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array2<f32> {
        let maps = self.net.forward(x, train);
        let (n, c, h, w) = maps.dim();
        let scale = 1.0 / (h * w) as f32;
        let mut feats = Array2::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                feats[[ni, ci]] = maps.index_axis(Axis(0), ni).index_axis(Axis(0), ci).sum() * scale;
            }
        }
        if train {
            self.pool_dims = Some((n, c, h, w));
        }
        feats
    }

    pub fn backward(&mut self, dfeat: &Array2<f32>) -> Array4<f32> {
        let (n, c, h, w) = self.pool_dims.take().expect("encoder backward without forward");
        let scale = 1.0 / (h * w) as f32;
        let mut dmaps = Array4::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let g = dfeat[[ni, ci]] * scale;
                dmaps
                    .index_axis_mut(Axis(0), ni)
                    .index_axis_mut(Axis(0), ci)
                    .fill(g);
            }
        }
        self.net.backward(&dmaps)
    }
}

/// Encoder, projector and optional predictor with an objective tag.
pub struct PeerModel {
    pub encoder: Encoder,
    pub projector: Mlp,
    pub predictor: Option<Mlp>,
    pub objective: Objective,
    pub peer: PeerTag,
    pub config: PeerConfig,
    pub parameter_count: usize,
}

/// Outputs of a caching training-mode forward over a batch.
pub struct TrainForward {
    /// Projection vectors, one row per input image.
    pub z: Array2<f32>,
    /// Predictor outputs, present for simsiam peers.
    pub pred: Option<Array2<f32>>,
}

impl PeerModel {
    pub fn visit_params(&mut self, f: &mut ParamFn) {
        self.encoder.net.visit_params("encoder", f);
        self.projector.visit_params("projector", f);
        if let Some(p) = self.predictor.as_mut() {
            p.visit_params("predictor", f);
        }
    }

    pub fn visit_buffers(&mut self, f: &mut BufferFn) {
        self.encoder.net.visit_buffers("encoder", f);
        self.projector.visit_buffers("projector", f);
        if let Some(p) = self.predictor.as_mut() {
            p.visit_buffers("predictor", f);
        }
    }

    pub fn visit_state(&self, f: &mut StateFn) {
        self.encoder.net.visit_state("encoder", f);
        self.projector.visit_state("projector", f);
        if let Some(p) = self.predictor.as_ref() {
            p.visit_state("predictor", f);
        }
    }

    /// SHA-256 over trainable parameters in traversal order.
    pub fn param_checksum(&mut self) -> String {
        let mut hasher = Sha256::new();
        self.visit_params(&mut |_name, p| {
            for &v in p.value.iter() {
                hasher.update(v.to_le_bytes());
            }
        });
        format!("{:x}", hasher.finalize())
    }

    /// SHA-256 over parameters and running buffers.
    pub fn state_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        self.visit_state(&mut |_name, view| {
            for &v in view.iter() {
                hasher.update(v.to_le_bytes());
            }
        });
        format!("{:x}", hasher.finalize())
    }

    fn check_images(&self, images: &Array4<f32>) -> Result<()> {
        let (_, c, h, w) = images.dim();
        if c != 3 {
            return Err(Error::shape(&[0, 3, h, w], &[0, c, h, w]));
        }
        if h < 8 || w < 8 {
            return Err(Error::shape(&[0, 3, 8, 8], &[0, c, h, w]));
        }
        Ok(())
    }

    /// Encoder features for a batch of images.
    pub fn forward_embed(&mut self, images: &Array4<f32>, train: bool) -> Result<Array2<f32>> {
        self.check_images(images)?;
        Ok(self.encoder.forward(images, train))
    }

    /// Projection vectors for a batch of images.
    pub fn forward_project(
        &mut self,
        images: &Array4<f32>,
        view: ViewTag,
        train: bool,
    ) -> Result<EmbeddingBatch> {
        let feats = self.forward_embed(images, train)?;
        let z = self.projector.forward(&feats, train);
        EmbeddingBatch::new(z.mapv(f64::from), view, self.peer)
    }

    /// Predictor outputs; simsiam peers only.
    pub fn forward_predict(
        &mut self,
        images: &Array4<f32>,
        view: ViewTag,
        train: bool,
    ) -> Result<EmbeddingBatch> {
        let z = self.forward_project(images, view, train)?;
        let predictor = self.predictor.as_mut().ok_or(Error::NoPredictor)?;
        let p = predictor.forward(&z.values.mapv(|v| v as f32), train);
        EmbeddingBatch::new(p.mapv(f64::from), view, self.peer)
    }

    /// Caching forward used by the training loop. Both views are expected to
    /// be concatenated into one batch so a single backward pass covers them.
    pub fn train_forward(&mut self, images: &Array4<f32>) -> Result<TrainForward> {
        self.check_images(images)?;
        let feats = self.encoder.forward(images, true);
        let z = self.projector.forward(&feats, true);
        let pred = self
            .predictor
            .as_mut()
            .map(|predictor| predictor.forward(&z, true));
        Ok(TrainForward { z, pred })
    }

    /// Backward pass matching [`PeerModel::train_forward`]. `dz` is the
    /// gradient on the projection batch; `dpred` on the predictor outputs.
    pub fn train_backward(&mut self, dz: Array2<f32>, dpred: Option<&Array2<f32>>) {
        let mut dz_total = dz;
        if let Some(dp) = dpred {
            let predictor = self.predictor.as_mut().expect("dpred without predictor");
            dz_total += &predictor.backward(dp);
        }
        let dfeat = self.projector.backward(&dz_total);
        let _ = self.encoder.backward(&dfeat);
    }

    /// Adam instance configured for this model's parameters.
    pub fn make_optimizer(&self, lr: f64, weight_decay: f64) -> Adam {
        Adam::new(lr, weight_decay)
    }
}

fn conv_bn_relu(
    cin: usize,
    cout: usize,
    stride: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<SpatialLayer> {
    vec![
        SpatialLayer::Conv(Conv2d::new(cin, cout, 3, stride, 1, rng)),
        SpatialLayer::Norm(BatchNorm2d::new(cout)),
        SpatialLayer::relu(),
    ]
}

fn stem(
    cin: usize,
    cout: usize,
    small_image: bool,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<SpatialLayer> {
    if small_image {
        conv_bn_relu(cin, cout, 1, rng)
    } else {
        vec![
            SpatialLayer::Conv(Conv2d::new(cin, cout, 7, 2, 3, rng)),
            SpatialLayer::Norm(BatchNorm2d::new(cout)),
            SpatialLayer::relu(),
            SpatialLayer::Pool(MaxPool2d::new(3, 2, 1)),
        ]
    }
}

fn build_small_conv(
    spec: &str,
    small_image: bool,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(ConvNet, usize)> {
    let bad = || Error::DimensionMismatch(format!("bad small-conv depth_spec `{spec}`, want BLOCKSxBASE"));
    let (blocks, base) = spec.split_once('x').ok_or_else(bad)?;
    let blocks: usize = blocks.parse().map_err(|_| bad())?;
    let base: usize = base.parse().map_err(|_| bad())?;
    if blocks < 1 || base < 2 {
        return Err(bad());
    }
    // Stride-2 blocks double the width; at most four downsampling stages.
    let mut layers = stem(3, base, small_image, rng);
    let mut width = base;
    let mut downs = 0usize;
    for p in 1..blocks {
        let downsample = downs < 4 && (p <= 2 || (p - 2) % 2 == 1);
        let (next, stride) = if downsample {
            downs += 1;
            (width * 2, 2)
        } else {
            (width, 1)
        };
        layers.extend(conv_bn_relu(width, next, stride, rng));
        width = next;
    }
    Ok((ConvNet { layers }, width))
}

fn basic_block(
    cin: usize,
    cout: usize,
    stride: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> SpatialLayer {
    let main = vec![
        SpatialLayer::Conv(Conv2d::new(cin, cout, 3, stride, 1, rng)),
        SpatialLayer::Norm(BatchNorm2d::new(cout)),
        SpatialLayer::relu(),
        SpatialLayer::Conv(Conv2d::new(cout, cout, 3, 1, 1, rng)),
        SpatialLayer::Norm(BatchNorm2d::new(cout)),
    ];
    let shortcut = if stride != 1 || cin != cout {
        Shortcut::ProjectInput(vec![
            SpatialLayer::Conv(Conv2d::new(cin, cout, 1, stride, 0, rng)),
            SpatialLayer::Norm(BatchNorm2d::new(cout)),
        ])
    } else {
        Shortcut::Identity
    };
    SpatialLayer::Residual(Box::new(ResidualBlock::new(vec![], main, shortcut, true)))
}

fn build_resnet(
    spec: &str,
    small_image: bool,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(ConvNet, usize)> {
    let stage_blocks: [usize; 4] = match spec {
        "10" => [1, 1, 1, 1],
        "18" => [2, 2, 2, 2],
        "34" => [3, 4, 6, 3],
        other => {
            return Err(Error::DimensionMismatch(format!(
                "unsupported resnet depth_spec `{other}` (supported: 10, 18, 34)"
            )))
        }
    };
    let widths = [64usize, 128, 256, 512];
    let mut layers = stem(3, 64, small_image, rng);
    let mut cin = 64;
    for (si, (&count, &cout)) in stage_blocks.iter().zip(widths.iter()).enumerate() {
        for bi in 0..count {
            let stride = if si > 0 && bi == 0 { 2 } else { 1 };
            layers.push(basic_block(cin, cout, stride, rng));
            cin = cout;
        }
    }
    Ok((ConvNet { layers }, cin))
}

fn preact_block(
    cin: usize,
    cout: usize,
    stride: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> SpatialLayer {
    let pre = vec![SpatialLayer::Norm(BatchNorm2d::new(cin)), SpatialLayer::relu()];
    let main = vec![
        SpatialLayer::Conv(Conv2d::new(cin, cout, 3, stride, 1, rng)),
        SpatialLayer::Norm(BatchNorm2d::new(cout)),
        SpatialLayer::relu(),
        SpatialLayer::Conv(Conv2d::new(cout, cout, 3, 1, 1, rng)),
    ];
    let shortcut = if stride != 1 || cin != cout {
        Shortcut::ProjectPre(vec![SpatialLayer::Conv(Conv2d::new(cin, cout, 1, stride, 0, rng))])
    } else {
        Shortcut::Identity
    };
    SpatialLayer::Residual(Box::new(ResidualBlock::new(pre, main, shortcut, false)))
}

fn build_wide_resnet(
    spec: &str,
    small_image: bool,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(ConvNet, usize)> {
    let bad = || Error::DimensionMismatch(format!("bad wide-resnet depth_spec `{spec}`, want DEPTH-WIDEN"));
    let (depth, widen) = spec.split_once('-').ok_or_else(bad)?;
    let depth: usize = depth.parse().map_err(|_| bad())?;
    let widen: usize = widen.parse().map_err(|_| bad())?;
    if depth < 10 || (depth - 4) % 6 != 0 || widen < 1 {
        return Err(bad());
    }
    let per_group = (depth - 4) / 6;
    let widths = [16 * widen, 32 * widen, 64 * widen];
    let mut layers = stem(3, 16, small_image, rng);
    if !small_image {
        // The full-size stem already applied BN/ReLU; pre-activation blocks
        // renormalize on entry either way.
    }
    let mut cin = 16;
    for (gi, &cout) in widths.iter().enumerate() {
        for bi in 0..per_group {
            let stride = if gi > 0 && bi == 0 { 2 } else { 1 };
            layers.push(preact_block(cin, cout, stride, rng));
            cin = cout;
        }
    }
    layers.push(SpatialLayer::Norm(BatchNorm2d::new(cin)));
    layers.push(SpatialLayer::relu());
    Ok((ConvNet { layers }, cin))
}

fn build_encoder(cfg: &EncoderConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Encoder> {
    let (net, feature_dim) = match cfg.family {
        EncoderFamily::SmallConv => build_small_conv(&cfg.depth_spec, cfg.small_image_stem, rng)?,
        EncoderFamily::Resnet => build_resnet(&cfg.depth_spec, cfg.small_image_stem, rng)?,
        EncoderFamily::WideResnet => build_wide_resnet(&cfg.depth_spec, cfg.small_image_stem, rng)?,
    };
    if feature_dim != cfg.feature_dim {
        return Err(Error::DimensionMismatch(format!(
            "encoder `{}` produces {feature_dim} features, config says {}",
            cfg.describe(),
            cfg.feature_dim
        )));
    }
    Ok(Encoder {
        net,
        feature_dim,
        pool_dims: None,
    })
}

fn build_mlp(input: usize, hidden: usize, output: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Mlp {
    Mlp {
        layers: vec![
            DenseLayer::Linear(Linear::new(input, hidden, rng)),
            DenseLayer::Norm(BatchNorm1d::new(hidden)),
            DenseLayer::relu(),
            DenseLayer::Linear(Linear::new(hidden, output, rng)),
        ],
    }
}

/// Assembles a peer from its configs. Identical `(config, peer, seed)`
/// arguments produce bit-identical initial parameters.
pub fn build_peer(config: &PeerConfig, peer: PeerTag, seed: u64) -> Result<PeerModel> {
    match (config.objective, config.predictor.as_ref()) {
        (Objective::Simsiam, None) => return Err(Error::PredictorRequired),
        (Objective::Contrastive, Some(_)) => {
            return Err(Error::DimensionMismatch(
                "predictor config present but objective is contrastive".into(),
            ))
        }
        _ => {}
    }
    if let Some(pred) = config.predictor.as_ref() {
        if pred.output_dim != config.projector.output_dim {
            return Err(Error::DimensionMismatch(format!(
                "predictor output {} must equal projector output {}",
                pred.output_dim, config.projector.output_dim
            )));
        }
    }
    let mut rng = derive_rng(seed, Domain::Init, &[peer.index() as u64]);
    let encoder = build_encoder(&config.encoder, &mut rng)?;
    let projector = build_mlp(
        encoder.feature_dim(),
        config.projector.hidden_dim,
        config.projector.output_dim,
        &mut rng,
    );
    let predictor = config
        .predictor
        .as_ref()
        .map(|p| build_mlp(config.projector.output_dim, p.hidden_dim, p.output_dim, &mut rng));

    let parameter_count = encoder.net.param_count()
        + projector.param_count()
        + predictor.as_ref().map_or(0, Mlp::param_count);
    Ok(PeerModel {
        encoder,
        projector,
        predictor,
        objective: config.objective,
        peer,
        config: config.clone(),
        parameter_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn small_cfg(spec: &str, feature_dim: usize) -> PeerConfig {
        PeerConfig {
            encoder: EncoderConfig {
                family: EncoderFamily::SmallConv,
                depth_spec: spec.into(),
                small_image_stem: true,
                feature_dim,
            },
            projector: ProjectorConfig {
                hidden_dim: feature_dim,
                output_dim: 128,
            },
            predictor: None,
            objective: Objective::Contrastive,
        }
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = small_cfg("4x8", 64);
        let mut a = build_peer(&cfg, PeerTag::Peer1, 42).unwrap();
        let mut b = build_peer(&cfg, PeerTag::Peer1, 42).unwrap();
        assert_eq!(a.param_checksum(), b.param_checksum());
        let mut c = build_peer(&cfg, PeerTag::Peer1, 43).unwrap();
        assert_ne!(a.param_checksum(), c.param_checksum());
    }

    #[test]
    fn simsiam_requires_predictor() {
        let mut cfg = small_cfg("4x8", 64);
        cfg.objective = Objective::Simsiam;
        assert!(matches!(
            build_peer(&cfg, PeerTag::Peer1, 1),
            Err(Error::PredictorRequired)
        ));
    }

    #[test]
    fn feature_dim_mismatch_rejected() {
        let cfg = small_cfg("4x8", 99);
        assert!(matches!(
            build_peer(&cfg, PeerTag::Peer1, 1),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn forward_shapes() {
        let mut cfg = small_cfg("4x8", 64);
        cfg.projector.output_dim = 128;
        let mut peer = build_peer(&cfg, PeerTag::Peer1, 7).unwrap();
        let x = Array4::from_shape_fn((4, 3, 32, 32), |(n, c, h, w)| {
            ((n + c + h + w) % 7) as f32 / 7.0 - 0.5
        });
        let feats = peer.forward_embed(&x, false).unwrap();
        assert_eq!(feats.dim(), (4, 64));
        let z = peer.forward_project(&x, ViewTag::View1, false).unwrap();
        assert_eq!(z.values.dim(), (4, 128));
        assert!(z.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn projection_composes_embed_then_projector() {
        let cfg = small_cfg("4x8", 64);
        let mut peer = build_peer(&cfg, PeerTag::Peer1, 7).unwrap();
        let x = Array4::from_shape_fn((3, 3, 32, 32), |(n, c, h, w)| {
            ((n * 31 + c * 17 + h * 5 + w) % 11) as f32 / 11.0
        });
        let z = peer.forward_project(&x, ViewTag::View1, false).unwrap();
        let feats = peer.forward_embed(&x, false).unwrap();
        let z2 = peer.projector.forward(&feats, false);
        assert_eq!(z.values.mapv(|v| v as f32), z2);
    }

    #[test]
    fn predictor_only_for_simsiam() {
        let cfg = small_cfg("4x8", 64);
        let mut peer = build_peer(&cfg, PeerTag::Peer1, 7).unwrap();
        let x = Array4::zeros((2, 3, 32, 32));
        assert!(matches!(
            peer.forward_predict(&x, ViewTag::View1, false),
            Err(Error::NoPredictor)
        ));
    }

    #[test]
    fn capacity_ordering_of_preset_pair() {
        let small = build_peer(&small_cfg("4x8", 64), PeerTag::Peer1, 1).unwrap();
        let large = build_peer(&small_cfg("8x12", 192), PeerTag::Peer2, 1).unwrap();
        assert!(large.parameter_count > small.parameter_count);
    }

    #[test]
    fn residual_families_build_and_run() {
        for (family, spec, feat) in [
            (EncoderFamily::Resnet, "10", 512),
            (EncoderFamily::WideResnet, "10-2", 128),
        ] {
            let cfg = PeerConfig {
                encoder: EncoderConfig {
                    family,
                    depth_spec: spec.into(),
                    small_image_stem: true,
                    feature_dim: feat,
                },
                projector: ProjectorConfig {
                    hidden_dim: feat,
                    output_dim: 64,
                },
                predictor: None,
                objective: Objective::Contrastive,
            };
            let mut peer = build_peer(&cfg, PeerTag::Peer1, 3).unwrap();
            let x = Array4::from_shape_fn((2, 3, 32, 32), |(n, c, h, w)| {
                ((n + 2 * c + 3 * h + w) % 13) as f32 / 13.0 - 0.4
            });
            let z = peer.forward_project(&x, ViewTag::View1, false).unwrap();
            assert_eq!(z.values.dim(), (2, 64));
            assert!(z.values.iter().all(|v| v.is_finite()));
        }
    }
}

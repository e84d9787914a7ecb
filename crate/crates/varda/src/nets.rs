//! Network definitions: two variational encoder/decoder pairs that share one
//! segmentation head on the latent code.
//!
//! Both domains use the same architecture. An encoder downsamples twice with
//! strided convolutions and emits per-pixel latent means and clamped
//! log-variances over a quarter-resolution grid, flattened to one diagonal
//! Gaussian per image. The segmentor consumes latent rows and upsamples back
//! to class probabilities at full resolution. The decoder reconstructs the
//! input image from the latent grid, optionally conditioned on (soft) label
//! maps pooled to the grid resolution; the unconditioned form exists to
//! measure what that conditioning is worth. The segmentor's parameters are
//! registered once and referenced by both domains' forward passes, which is
//! what makes the latent spaces comparable at all.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gaussian::DiagGaussianBatch;
use crate::tensor::{Tape, Tensor, TensorError};
use crate::Real;

pub const LOG_VAR_CLAMP: Real = 10.0;
pub const DECODER_CONV_CHOICES: [usize; 4] = [0, 3, 7, 11];

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    BadConfig(String),
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("unknown parameter name {0:?}")]
    UnknownParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which branch of the model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    SourceEncoder,
    TargetEncoder,
    SourceDecoder,
    TargetDecoder,
    Segmentor,
}

impl Role {
    pub fn code(self) -> u8 {
        match self {
            Role::SourceEncoder => 1,
            Role::TargetEncoder => 2,
            Role::SourceDecoder => 3,
            Role::TargetDecoder => 4,
            Role::Segmentor => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Role> {
        Some(match code {
            1 => Role::SourceEncoder,
            2 => Role::TargetEncoder,
            3 => Role::SourceDecoder,
            4 => Role::TargetDecoder,
            5 => Role::Segmentor,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    fn enc_prefix(self) -> &'static str {
        match self {
            Domain::Source => "enc_s",
            Domain::Target => "enc_t",
        }
    }

    fn dec_prefix(self) -> &'static str {
        match self {
            Domain::Source => "dec_s",
            Domain::Target => "dec_t",
        }
    }

    fn enc_role(self) -> Role {
        match self {
            Domain::Source => Role::SourceEncoder,
            Domain::Target => Role::TargetEncoder,
        }
    }

    fn dec_role(self) -> Role {
        match self {
            Domain::Source => Role::SourceDecoder,
            Domain::Target => Role::TargetDecoder,
        }
    }
}

/// Architecture description; see the invariants in [`NetConfig::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    /// Square image side; divisible by 4 (two stride-2 downsamples).
    pub image_hw: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Total latent dimension n; divisible by the latent grid area
    /// (image_hw/4)^2, the quotient being the latent channel count.
    pub latent_dim: usize,
    /// Interior 3x3 convolutions in each decoder (a final 1x1 projection to
    /// image channels is always present on top). One of {0, 3, 7, 11}.
    pub decoder_convs: usize,
    /// When false, decoders see only the latent grid and not the label maps.
    pub label_conditioned: bool,
    pub enc_width: usize,
    pub seg_width: usize,
    pub dec_width: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            image_hw: 32,
            in_channels: 1,
            num_classes: 4,
            latent_dim: 128,
            decoder_convs: 7,
            label_conditioned: true,
            enc_width: 10,
            seg_width: 8,
            dec_width: 10,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |msg: String| Err(NetError::BadConfig(msg));
        if self.image_hw < 8 || self.image_hw % 4 != 0 {
            return bad(format!("image_hw {} must be >= 8 and divisible by 4", self.image_hw));
        }
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes {} must be at least 2", self.num_classes));
        }
        let area = self.latent_grid() * self.latent_grid();
        if self.latent_dim == 0 || self.latent_dim % area != 0 {
            return bad(format!(
                "latent_dim {} must be a positive multiple of the latent grid area {area}",
                self.latent_dim
            ));
        }
        if !DECODER_CONV_CHOICES.contains(&self.decoder_convs) {
            return bad(format!(
                "decoder_convs {} must be one of {DECODER_CONV_CHOICES:?}",
                self.decoder_convs
            ));
        }
        if self.enc_width < 2 || self.seg_width < 2 || self.dec_width < 3 {
            return bad(format!(
                "widths too small: enc {} (min 2), seg {} (min 2), dec {} (min 3)",
                self.enc_width, self.seg_width, self.dec_width
            ));
        }
        Ok(())
    }

    /// Side of the latent grid (quarter resolution).
    pub fn latent_grid(&self) -> usize {
        self.image_hw / 4
    }

    /// Latent channels per grid cell.
    pub fn latent_channels(&self) -> usize {
        self.latent_dim / (self.latent_grid() * self.latent_grid())
    }

    fn enc_width2(&self) -> usize {
        self.enc_width + 2
    }

    fn dec_stage_widths(&self) -> [usize; 3] {
        [self.dec_width, (self.dec_width / 2).max(3), (self.dec_width / 3).max(3)]
    }

    /// Interior decoder convolutions per resolution stage (grid, 2x, 4x).
    fn dec_stage_counts(&self) -> [usize; 3] {
        match self.decoder_convs {
            0 => [0, 0, 0],
            3 => [1, 1, 1],
            7 => [3, 2, 2],
            11 => [4, 4, 3],
            other => unreachable!("validate admitted decoder_convs {other}"),
        }
    }

    fn decoder_in_channels(&self) -> usize {
        if self.label_conditioned {
            self.latent_channels() + self.num_classes
        } else {
            self.latent_channels()
        }
    }
}

/// Ordered, name-addressed collection of trainable tensors.
#[derive(Debug)]
pub struct ParameterSet {
    entries: Vec<(String, Role, Tensor)>,
}

impl ParameterSet {
    pub fn new() -> ParameterSet {
        ParameterSet { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, role: Role, t: Tensor) -> Result<(), NetError> {
        if self.entries.iter().any(|(n, _, _)| n == name) {
            return Err(NetError::DuplicateParam(name.to_string()));
        }
        self.entries.push((name.to_string(), role, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NetError> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, t)| t)
            .ok_or_else(|| NetError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Role, &Tensor)> {
        self.entries.iter().map(|(n, r, t)| (n.as_str(), *r, t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, _, t)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, _, t) in &self.entries {
            t.zero_grad();
        }
    }

    /// Plain-data snapshot (name, role, shape, values). Tensors share state
    /// through `Rc` and cannot cross threads; worker threads rebuild their
    /// own set from this.
    pub fn to_raw(&self) -> Vec<(String, Role, Vec<usize>, Vec<Real>)> {
        self.entries
            .iter()
            .map(|(n, r, t)| (n.clone(), *r, t.shape().to_vec(), t.to_vec()))
            .collect()
    }

    pub fn from_raw(raw: &[(String, Role, Vec<usize>, Vec<Real>)]) -> Result<ParameterSet, NetError> {
        let mut params = ParameterSet::new();
        for (name, role, shape, values) in raw {
            params.insert(name, *role, Tensor::param(shape, values.clone())?)?;
        }
        Ok(params)
    }
}

impl Default for ParameterSet {
    fn default() -> Self {
        ParameterSet::new()
    }
}

pub(crate) fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// He-uniform weight tensor seeded per name, so initialization does not
/// depend on registration order.
fn init_conv(
    params: &mut ParameterSet,
    seed: u64,
    name: &str,
    role: Role,
    out_ch: usize,
    in_ch: usize,
    k: usize,
) -> Result<(), NetError> {
    let fan_in = in_ch * k * k;
    let limit = (6.0 / fan_in as Real).sqrt();
    let wname = format!("{name}.w");
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv1a(&wname)));
    let data: Vec<Real> =
        (0..out_ch * fan_in).map(|_| rng.gen_range(-limit..limit)).collect();
    params.insert(&wname, role, Tensor::param(&[out_ch, in_ch, k, k], data)?)?;
    // Small positive bias: inputs are nonnegative, so zero-bias channels whose
    // weights sum negative would start dead and stay dead under relu.
    params.insert(&format!("{name}.b"), role, Tensor::param(&[out_ch], vec![0.05; out_ch])?)?;
    Ok(())
}

/// Build all parameters for both domains plus the shared segmentor. Names are
/// stable and the segmentor tensors appear exactly once.
pub fn init_params(cfg: &NetConfig, seed: u64) -> Result<ParameterSet, NetError> {
    cfg.validate()?;
    let mut p = ParameterSet::new();
    let zc = cfg.latent_channels();

    for domain in [Domain::Source, Domain::Target] {
        let e = domain.enc_prefix();
        let role = domain.enc_role();
        init_conv(&mut p, seed, &format!("{e}.conv1"), role, cfg.enc_width, cfg.in_channels, 3)?;
        init_conv(&mut p, seed, &format!("{e}.conv2"), role, cfg.enc_width2(), cfg.enc_width, 3)?;
        init_conv(&mut p, seed, &format!("{e}.mean"), role, zc, cfg.enc_width2(), 1)?;
        init_conv(&mut p, seed, &format!("{e}.logvar"), role, zc, cfg.enc_width2(), 1)?;
    }

    for domain in [Domain::Source, Domain::Target] {
        let d = domain.dec_prefix();
        let role = domain.dec_role();
        let widths = cfg.dec_stage_widths();
        let counts = cfg.dec_stage_counts();
        let mut in_ch = cfg.decoder_in_channels();
        for stage in 0..3 {
            for idx in 0..counts[stage] {
                init_conv(&mut p, seed, &format!("{d}.s{stage}c{idx}"), role, widths[stage], in_ch, 3)?;
                in_ch = widths[stage];
            }
        }
        init_conv(&mut p, seed, &format!("{d}.out"), role, cfg.in_channels, in_ch, 1)?;
    }

    init_conv(&mut p, seed, "seg.conv1", Role::Segmentor, cfg.seg_width, zc, 3)?;
    init_conv(&mut p, seed, "seg.conv2", Role::Segmentor, cfg.seg_width, cfg.seg_width, 3)?;
    init_conv(&mut p, seed, "seg.head", Role::Segmentor, cfg.num_classes, cfg.seg_width, 1)?;
    Ok(p)
}

fn conv_block(
    tape: &Tape,
    params: &ParameterSet,
    name: &str,
    x: &Tensor,
    stride: usize,
    pad: usize,
    relu: bool,
) -> Result<Tensor, NetError> {
    let w = params.get(&format!("{name}.w"))?;
    let b = params.get(&format!("{name}.b"))?;
    let y = tape.conv2d(x, w, stride, pad)?;
    let y = tape.add_channel_bias(&y, b)?;
    Ok(if relu { tape.relu(&y)? } else { y })
}

/// Encode a batch of images into one diagonal Gaussian per image.
/// `x` is [B x C x H x W]; the result covers n = zc * (H/4)^2 dimensions.
pub fn encode(
    tape: &Tape,
    params: &ParameterSet,
    cfg: &NetConfig,
    domain: Domain,
    x: &Tensor,
) -> Result<DiagGaussianBatch, NetError> {
    let sx = x.shape().to_vec();
    if sx.len() != 4 || sx[1] != cfg.in_channels || sx[2] != cfg.image_hw || sx[3] != cfg.image_hw {
        return Err(NetError::BadConfig(format!(
            "encode input shape {sx:?} does not match [B x {} x {hw} x {hw}]",
            cfg.in_channels,
            hw = cfg.image_hw
        )));
    }
    let e = domain.enc_prefix();
    let b = sx[0];
    let h1 = conv_block(tape, params, &format!("{e}.conv1"), x, 2, 1, true)?;
    let h2 = conv_block(tape, params, &format!("{e}.conv2"), &h1, 2, 1, true)?;
    let mean = conv_block(tape, params, &format!("{e}.mean"), &h2, 1, 0, false)?;
    let logvar = conv_block(tape, params, &format!("{e}.logvar"), &h2, 1, 0, false)?;
    let logvar = tape.clamp(&logvar, -LOG_VAR_CLAMP, LOG_VAR_CLAMP)?;
    let n = cfg.latent_dim;
    let mean = tape.reshape(&mean, &[b, n])?;
    let logvar = tape.reshape(&logvar, &[b, n])?;
    Ok(DiagGaussianBatch::new(mean, logvar)?)
}

/// Draw latent samples with the reparameterization trick:
/// `z = mean + sqrt(var) * eps`, with `eps` of shape [B x L x n] supplied by
/// the caller (L samples per image). Returns [B x L x n].
pub fn reparameterize(
    tape: &Tape,
    g: &DiagGaussianBatch,
    eps: &Tensor,
) -> Result<Tensor, TensorError> {
    let (b, n) = (g.count(), g.dim());
    let se = eps.shape();
    if se.len() != 3 || se[0] != b || se[2] != n {
        return Err(TensorError::ShapeMismatch {
            op: "reparameterize",
            detail: format!("eps shape {se:?} does not match batch [{b} x L x {n}]"),
        });
    }
    let l = se[1];
    let sd = tape.exp(&tape.mul_scalar(g.log_vars(), 0.5)?)?;
    let mean_rows = tape.repeat_rows(g.means(), l)?;
    let sd_rows = tape.repeat_rows(&sd, l)?;
    let eps_rows = tape.reshape(eps, &[b * l, n])?;
    let z = tape.add(&mean_rows, &tape.mul(&sd_rows, &eps_rows)?)?;
    tape.reshape(&z, &[b, l, n])
}

/// Class probabilities for latent rows: [R x n] to [R x K x H x W] through
/// the shared segmentor (softmax over classes).
pub fn segment(
    tape: &Tape,
    params: &ParameterSet,
    cfg: &NetConfig,
    z_rows: &Tensor,
) -> Result<Tensor, NetError> {
    let sz = z_rows.shape();
    if sz.len() != 2 || sz[1] != cfg.latent_dim {
        return Err(NetError::BadConfig(format!(
            "segment input shape {sz:?} does not match latent dim {}",
            cfg.latent_dim
        )));
    }
    let r = sz[0];
    let g = cfg.latent_grid();
    let grid = tape.reshape(z_rows, &[r, cfg.latent_channels(), g, g])?;
    let h1 = conv_block(tape, params, "seg.conv1", &grid, 1, 1, true)?;
    let h1 = tape.upsample_nearest(&h1, 2)?;
    let h2 = conv_block(tape, params, "seg.conv2", &h1, 1, 1, true)?;
    let h2 = tape.upsample_nearest(&h2, 2)?;
    let logits = conv_block(tape, params, "seg.head", &h2, 1, 0, false)?;
    Ok(tape.softmax(&logits, 1)?)
}

/// Reconstruct images from latent rows. `cond` carries per-pixel class
/// probabilities [R x K x H x W] and must be present exactly when the config
/// is label-conditioned; it is pooled to the latent grid and concatenated to
/// the latent channels, and gradients flow through it.
pub fn decode(
    tape: &Tape,
    params: &ParameterSet,
    cfg: &NetConfig,
    domain: Domain,
    z_rows: &Tensor,
    cond: Option<&Tensor>,
) -> Result<Tensor, NetError> {
    let sz = z_rows.shape();
    if sz.len() != 2 || sz[1] != cfg.latent_dim {
        return Err(NetError::BadConfig(format!(
            "decode input shape {sz:?} does not match latent dim {}",
            cfg.latent_dim
        )));
    }
    if cfg.label_conditioned != cond.is_some() {
        return Err(NetError::BadConfig(format!(
            "label conditioning mismatch: config says {}, cond given: {}",
            cfg.label_conditioned,
            cond.is_some()
        )));
    }
    let r = sz[0];
    let g = cfg.latent_grid();
    let d = domain.dec_prefix();
    let mut x = tape.reshape(z_rows, &[r, cfg.latent_channels(), g, g])?;
    if let Some(probs) = cond {
        let pooled = tape.avgpool(probs, 4)?;
        x = tape.concat_channels(&x, &pooled)?;
    }
    let counts = cfg.dec_stage_counts();
    for stage in 0..3 {
        for idx in 0..counts[stage] {
            x = conv_block(tape, params, &format!("{d}.s{stage}c{idx}"), &x, 1, 1, true)?;
        }
        if stage < 2 {
            x = tape.upsample_nearest(&x, 2)?;
        }
    }
    conv_block(tape, params, &format!("{d}.out"), &x, 1, 0, false)
}

/// Hard labels from class probabilities [B x K x H x W]: per-pixel argmax,
/// ties resolved to the lowest class index. Returns B*H*W class ids.
pub fn argmax_labels(probs: &Tensor) -> Vec<u8> {
    let s = probs.shape();
    let (b, k, plane) = (s[0], s[1], s[2] * s[3]);
    let d = probs.data();
    let mut out = Vec::with_capacity(b * plane);
    for img in 0..b {
        for px in 0..plane {
            let mut best = 0u8;
            let mut best_v = Real::NEG_INFINITY;
            for c in 0..k {
                let v = d[(img * k + c) * plane + px];
                if v > best_v {
                    best_v = v;
                    best = c as u8;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Inference: encode with the given domain's encoder at the posterior mean
/// (no sampling) and segment. Returns class probabilities [B x K x H x W]
/// and hard labels (B*H*W class ids).
pub fn predict(
    params: &ParameterSet,
    cfg: &NetConfig,
    domain: Domain,
    x: &Tensor,
) -> Result<(Tensor, Vec<u8>), NetError> {
    let tape = Tape::no_grad();
    let g = encode(&tape, params, cfg, domain, x)?;
    let probs = segment(&tape, params, cfg, g.means())?;
    let labels = argmax_labels(&probs);
    Ok((probs, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            image_hw: 8,
            in_channels: 1,
            num_classes: 3,
            latent_dim: 8,
            decoder_convs: 3,
            label_conditioned: true,
            enc_width: 4,
            seg_width: 4,
            dec_width: 6,
        }
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut c = NetConfig::default();
        assert!(c.validate().is_ok());
        c.decoder_convs = 5;
        assert!(c.validate().is_err());
        c.decoder_convs = 7;
        c.latent_dim = 130;
        assert!(c.validate().is_err());
        c.latent_dim = 128;
        c.image_hw = 30;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_order_free() {
        let cfg = tiny_cfg();
        let a = init_params(&cfg, 11).unwrap();
        let b = init_params(&cfg, 11).unwrap();
        assert_eq!(a.len(), b.len());
        for ((na, _, ta), (nb, _, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec());
        }
        let c = init_params(&cfg, 12).unwrap();
        let same: bool = a
            .iter()
            .zip(c.iter())
            .all(|((_, _, ta), (_, _, tc))| ta.to_vec() == tc.to_vec());
        assert!(!same, "different seeds must give different weights");
    }

    #[test]
    fn segmentor_is_registered_once() {
        let params = init_params(&tiny_cfg(), 5).unwrap();
        let seg_names: Vec<&str> = params
            .iter()
            .filter(|(_, r, _)| *r == Role::Segmentor)
            .map(|(n, _, _)| n)
            .collect();
        assert_eq!(seg_names, vec!["seg.conv1.w", "seg.conv1.b", "seg.conv2.w", "seg.conv2.b", "seg.head.w", "seg.head.b"]);
        assert!(params.iter().all(|(n, _, _)| !n.is_empty()));
    }

    #[test]
    fn forward_shapes_roundtrip() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 3).unwrap();
        let tape = Tape::new();
        let b = 2;
        let x = Tensor::from_vec(
            &[b, 1, 8, 8],
            (0..b * 64).map(|i| (i as Real * 0.31).sin().abs()).collect(),
        )
        .unwrap();

        let g = encode(&tape, &params, &cfg, Domain::Source, &x).unwrap();
        assert_eq!(g.count(), b);
        assert_eq!(g.dim(), 8);
        assert!(g.log_vars().data().iter().all(|v| v.abs() <= LOG_VAR_CLAMP));

        let l = 2;
        let eps = Tensor::from_vec(&[b, l, 8], vec![0.5; b * l * 8]).unwrap();
        let z = reparameterize(&tape, &g, &eps).unwrap();
        assert_eq!(z.shape(), &[b, l, 8]);

        let z_rows = tape.reshape(&z, &[b * l, 8]).unwrap();
        let probs = segment(&tape, &params, &cfg, &z_rows).unwrap();
        assert_eq!(probs.shape(), &[b * l, 3, 8, 8]);
        // Probabilities sum to one per pixel.
        let d = probs.data();
        let plane = 64;
        let s: Real = (0..3).map(|c| d[c * plane]).sum();
        assert!((s - 1.0).abs() < 1e-12);
        drop(d);

        let recon = decode(&tape, &params, &cfg, Domain::Target, &z_rows, Some(&probs)).unwrap();
        assert_eq!(recon.shape(), &[b * l, 1, 8, 8]);

        // Weak variant must refuse a conditioning tensor.
        let mut weak = cfg.clone();
        weak.label_conditioned = false;
        assert!(decode(&tape, &params, &weak, Domain::Target, &z_rows, Some(&probs)).is_err());
    }

    #[test]
    fn zero_decoder_convs_still_reconstructs() {
        let mut cfg = tiny_cfg();
        cfg.decoder_convs = 0;
        let params = init_params(&cfg, 3).unwrap();
        let tape = Tape::no_grad();
        let x = Tensor::from_vec(&[1, 1, 8, 8], vec![0.3; 64]).unwrap();
        let g = encode(&tape, &params, &cfg, Domain::Source, &x).unwrap();
        let probs = segment(&tape, &params, &cfg, g.means()).unwrap();
        let recon = decode(&tape, &params, &cfg, Domain::Source, g.means(), Some(&probs)).unwrap();
        assert_eq!(recon.shape(), &[1, 1, 8, 8]);
    }

    #[test]
    fn reparameterize_at_zero_noise_returns_means() {
        let tape = Tape::no_grad();
        let g = DiagGaussianBatch::new(
            Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 0.5, 0.0, 3.0, -1.0]).unwrap(),
            Tensor::from_vec(&[2, 3], vec![0.7; 6]).unwrap(),
        )
        .unwrap();
        let eps = Tensor::from_vec(&[2, 1, 3], vec![0.0; 6]).unwrap();
        let z = reparameterize(&tape, &g, &eps).unwrap();
        assert_eq!(z.to_vec(), g.means().to_vec());

        // One unit of noise moves exactly one standard deviation.
        let eps1 = Tensor::from_vec(&[2, 1, 3], vec![1.0; 6]).unwrap();
        let z1 = reparameterize(&tape, &g, &eps1).unwrap();
        let sd = (0.5f64 * 0.7).exp();
        for (a, b) in z1.to_vec().iter().zip(g.means().to_vec()) {
            assert!((a - b - sd).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_breaks_ties_toward_lower_class() {
        let probs = Tensor::from_vec(
            &[1, 3, 1, 2],
            vec![0.4, 0.2, 0.4, 0.3, 0.2, 0.5],
        )
        .unwrap();
        // Pixel 0: classes 0 and 1 tie at 0.4 -> class 0.
        // Pixel 1: class 2 wins at 0.5.
        assert_eq!(argmax_labels(&probs), vec![0, 2]);
    }
}

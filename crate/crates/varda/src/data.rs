//! Synthetic two-domain segmentation benchmark and dataset directory IO.
//!
//! Images contain four classes: background, an outer ring, the disk inside
//! it, and a detached side lobe. Both domains draw geometry from the same
//! distribution and differ only in how class regions are shaded (class means,
//! contrast, gamma warp, pixel noise), so any gap between them is a pure
//! appearance shift.
//!
//! On disk a dataset is a directory of `.vten` tensors plus `manifest.txt`:
//! a `records N` header line followed by one `id domain has_label` line per
//! record. Images are `<id>_img.vten`, labels `<id>_lbl.vten`. Manifests and
//! tensor files are untrusted input: parsing validates counts, id charset,
//! shapes, and one-hot labels before anything is used.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::nets::{splitmix64, Domain};
use crate::tensor::vten;
use crate::tensor::Tensor;
use crate::Real;

/// Minimum fraction of pixels each class must occupy in a generated image.
pub const MIN_CLASS_FRACTION: Real = 0.01;
/// Geometry draws per image before generation gives up.
pub const MAX_GEOMETRY_RETRIES: usize = 100;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to decode {path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: vten::FormatError,
    },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("manifest declares {declared} records but directory holds {found}")]
    CountMismatch { declared: usize, found: usize },
    #[error("record {id}: {detail}")]
    BadRecord { id: String, detail: String },
    #[error("invalid spec: {0}")]
    BadSpec(String),
    #[error("no acceptable geometry after {0} draws (a class stayed under the minimum fraction)")]
    DegenerateGeometry(usize),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// How one domain shades the class regions. Shading runs per pixel:
/// contrast-scale the class mean around 0.5, gamma-warp, add Gaussian noise,
/// clamp to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityModel {
    /// Base intensity per class, indexed by class id.
    pub class_means: Vec<Real>,
    /// Scale of class means around mid-gray (1 = unchanged).
    pub contrast: Real,
    /// Standard deviation of additive pixel noise.
    pub noise_sd: Real,
    /// Exponent of the monotone warp applied after contrast.
    pub gamma: Real,
}

impl IntensityModel {
    /// Bright structures on a dark background.
    pub fn source_default() -> IntensityModel {
        IntensityModel {
            class_means: vec![0.15, 0.55, 0.85, 0.40],
            contrast: 1.0,
            noise_sd: 0.02,
            gamma: 1.0,
        }
    }

    /// Roughly inverted intensities plus a gamma warp: dark structures on a
    /// bright background, as a different imaging modality would render the
    /// same anatomy.
    pub fn target_default() -> IntensityModel {
        IntensityModel {
            class_means: vec![0.85, 0.45, 0.10, 0.60],
            contrast: 1.0,
            noise_sd: 0.02,
            gamma: 1.6,
        }
    }

    fn validate(&self, num_classes: usize) -> Result<(), DataError> {
        if self.class_means.len() != num_classes {
            return Err(DataError::BadSpec(format!(
                "intensity model has {} class means, expected {num_classes}",
                self.class_means.len()
            )));
        }
        let ok = self.class_means.iter().all(|m| m.is_finite())
            && self.contrast.is_finite()
            && self.noise_sd.is_finite()
            && self.noise_sd >= 0.0
            && self.gamma.is_finite()
            && self.gamma > 0.0;
        if !ok {
            return Err(DataError::BadSpec("non-finite or non-positive intensity parameter".into()));
        }
        Ok(())
    }
}

/// Uniform ranges the per-image geometry is drawn from, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryJitter {
    /// Max offset of the ring center from the image center, per axis.
    pub center_jitter: Real,
    /// Outer radius of the ring.
    pub outer_radius: (Real, Real),
    /// Radial thickness of the ring; the disk fills the interior.
    pub ring_width: (Real, Real),
    /// Radius of the side lobe.
    pub lobe_radius: (Real, Real),
    /// Gap between the ring's outer edge and the lobe's near edge.
    pub lobe_gap: (Real, Real),
}

impl Default for GeometryJitter {
    fn default() -> GeometryJitter {
        GeometryJitter {
            center_jitter: 2.5,
            outer_radius: (8.0, 11.0),
            ring_width: (2.5, 4.0),
            lobe_radius: (2.0, 3.5),
            lobe_gap: (1.0, 2.0),
        }
    }
}

/// Full recipe for one two-domain dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub image_hw: usize,
    pub num_classes: usize,
    pub source_model: IntensityModel,
    pub target_model: IntensityModel,
    pub geometry: GeometryJitter,
    pub n_source: usize,
    pub n_target_train: usize,
    pub n_target_test: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> SynthSpec {
        SynthSpec {
            image_hw: 32,
            num_classes: 4,
            source_model: IntensityModel::source_default(),
            target_model: IntensityModel::target_default(),
            geometry: GeometryJitter::default(),
            n_source: 120,
            n_target_train: 120,
            n_target_test: 40,
            seed: 7,
        }
    }
}

impl SynthSpec {
    /// The spec as `key = value` lines, in the order [`apply_spec`] accepts
    /// them. Round-trips through [`apply_spec`] and feeds run manifests.
    pub fn resolved_text(&self) -> String {
        let means = |m: &[Real]| {
            m.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        };
        format!(
            "image_hw = {}\nnum_classes = {}\nn_source = {}\nn_target_train = {}\n\
             n_target_test = {}\nseed = {}\nsource_means = {}\nsource_contrast = {}\n\
             source_noise_sd = {}\nsource_gamma = {}\ntarget_means = {}\n\
             target_contrast = {}\ntarget_noise_sd = {}\ntarget_gamma = {}\n",
            self.image_hw,
            self.num_classes,
            self.n_source,
            self.n_target_train,
            self.n_target_test,
            self.seed,
            means(&self.source_model.class_means),
            self.source_model.contrast,
            self.source_model.noise_sd,
            self.source_model.gamma,
            means(&self.target_model.class_means),
            self.target_model.contrast,
            self.target_model.noise_sd,
            self.target_model.gamma,
        )
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_classes != 4 {
            return Err(DataError::BadSpec(format!(
                "geometry defines exactly 4 classes, got {}",
                self.num_classes
            )));
        }
        if self.image_hw < 24 {
            return Err(DataError::BadSpec(format!(
                "image size {} too small for the default structures",
                self.image_hw
            )));
        }
        self.source_model.validate(self.num_classes)?;
        self.target_model.validate(self.num_classes)?;
        let g = &self.geometry;
        let ranges = [g.outer_radius, g.ring_width, g.lobe_radius, g.lobe_gap];
        for (lo, hi) in ranges {
            if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi) {
                return Err(DataError::BadSpec("geometry ranges must be finite, positive, lo <= hi".into()));
            }
        }
        // The ring itself must fit at the worst-case center offset; the lobe
        // is placed by rejection and only needs room somewhere.
        let worst = self.image_hw as Real / 2.0 + g.center_jitter + g.outer_radius.1;
        if g.center_jitter < 0.0 || worst > self.image_hw as Real - 1.0 {
            return Err(DataError::BadSpec("ring can leave the canvas; shrink radii or jitter".into()));
        }
        if self.n_source == 0 || self.n_target_train == 0 || self.n_target_test == 0 {
            return Err(DataError::BadSpec("all three split counts must be nonzero".into()));
        }
        Ok(())
    }
}

/// Applies generation-spec `key = value` entries on top of `spec`. Unknown
/// keys are rejected so a typo cannot silently yield a different dataset;
/// the result still goes through [`SynthSpec::validate`].
pub fn apply_spec(
    entries: &[crate::config::KvEntry],
    spec: &mut SynthSpec,
) -> Result<(), crate::config::ConfigError> {
    use crate::config::{parse_value, ConfigError};
    let parse_means = |e: &crate::config::KvEntry| -> Result<Vec<Real>, ConfigError> {
        e.value
            .split(',')
            .map(|part| {
                part.trim().parse::<Real>().map_err(|err| ConfigError::BadValue {
                    line: e.line,
                    key: e.key.clone(),
                    msg: format!("{err} in {part:?}"),
                })
            })
            .collect()
    };
    for e in entries {
        match e.key.as_str() {
            "image_hw" => spec.image_hw = parse_value(e)?,
            "num_classes" => spec.num_classes = parse_value(e)?,
            "n_source" => spec.n_source = parse_value(e)?,
            "n_target_train" => spec.n_target_train = parse_value(e)?,
            "n_target_test" => spec.n_target_test = parse_value(e)?,
            "seed" => spec.seed = parse_value(e)?,
            "source_means" => spec.source_model.class_means = parse_means(e)?,
            "source_contrast" => spec.source_model.contrast = parse_value(e)?,
            "source_noise_sd" => spec.source_model.noise_sd = parse_value(e)?,
            "source_gamma" => spec.source_model.gamma = parse_value(e)?,
            "target_means" => spec.target_model.class_means = parse_means(e)?,
            "target_contrast" => spec.target_model.contrast = parse_value(e)?,
            "target_noise_sd" => spec.target_model.noise_sd = parse_value(e)?,
            "target_gamma" => spec.target_model.gamma = parse_value(e)?,
            _ => {
                return Err(ConfigError::UnknownKey { line: e.line, key: e.key.clone() });
            }
        }
    }
    Ok(())
}

/// One image with its optional one-hot label map.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    /// `[C, H, W]`, values in [0, 1].
    pub image: Tensor,
    /// `[K, H, W]`, exactly one 1.0 per pixel; `None` for unlabeled records.
    pub label: Option<Tensor>,
    pub domain: Domain,
}

/// The three splits of a two-domain dataset. Target-train labels are absent
/// by construction; target-test keeps labels for evaluation only.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub source: Vec<LabeledImage>,
    pub target_train: Vec<LabeledImage>,
    pub target_test: Vec<LabeledImage>,
}

impl Dataset {
    pub fn image_hw(&self) -> usize {
        self.source.first().map_or(0, |r| r.image.shape()[1])
    }

    pub fn num_classes(&self) -> usize {
        self.source
            .first()
            .and_then(|r| r.label.as_ref())
            .map_or(0, |l| l.shape()[0])
    }
}

struct Geometry {
    cy: Real,
    cx: Real,
    r_out: Real,
    r_in: Real,
    lobe_cy: Real,
    lobe_cx: Real,
    lobe_r: Real,
}

fn sample_geometry(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Option<Geometry> {
    let g = &spec.geometry;
    let hw = spec.image_hw as Real;
    let half = hw / 2.0;
    let cy = half + rng.gen_range(-g.center_jitter..=g.center_jitter);
    let cx = half + rng.gen_range(-g.center_jitter..=g.center_jitter);
    let r_out = rng.gen_range(g.outer_radius.0..=g.outer_radius.1);
    let r_in = r_out - rng.gen_range(g.ring_width.0..=g.ring_width.1);
    let lobe_r = rng.gen_range(g.lobe_radius.0..=g.lobe_radius.1);
    let dist = r_out + rng.gen_range(g.lobe_gap.0..=g.lobe_gap.1) + lobe_r;
    // The lobe may only fit on one side; rejection-sample the angle.
    for _ in 0..20 {
        let theta = rng.gen_range(0.0..std::f64::consts::TAU as Real);
        let lobe_cy = cy + dist * theta.sin();
        let lobe_cx = cx + dist * theta.cos();
        let margin = lobe_r + 0.5;
        if lobe_cy - margin >= 0.0
            && lobe_cy + margin <= hw
            && lobe_cx - margin >= 0.0
            && lobe_cx + margin <= hw
        {
            return Some(Geometry { cy, cx, r_out, r_in, lobe_cy, lobe_cx, lobe_r });
        }
    }
    None
}

/// Class id per pixel, row-major, from pixel-center distances: lobe beats
/// ring beats disk beats background (the regions are disjoint by
/// construction, so the order only settles boundary-pixel rounding).
fn rasterize(geom: &Geometry, hw: usize) -> Vec<u8> {
    let mut grid = vec![0u8; hw * hw];
    for y in 0..hw {
        for x in 0..hw {
            let py = y as Real + 0.5;
            let px = x as Real + 0.5;
            let d = ((py - geom.cy).powi(2) + (px - geom.cx).powi(2)).sqrt();
            let dl = ((py - geom.lobe_cy).powi(2) + (px - geom.lobe_cx).powi(2)).sqrt();
            grid[y * hw + x] = if dl <= geom.lobe_r {
                3
            } else if d <= geom.r_in {
                2
            } else if d <= geom.r_out {
                1
            } else {
                0
            };
        }
    }
    grid
}

fn class_counts(grid: &[u8], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; num_classes];
    for &k in grid {
        counts[k as usize] += 1;
    }
    counts
}

/// Shades a class grid into a `[1, H, W]` image. Deterministic when
/// `noise_sd == 0`, so two domains with equal intensity models render any
/// shared geometry identically (the shift-free control).
pub fn render(grid: &[u8], model: &IntensityModel, hw: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = Vec::with_capacity(hw * hw);
    for &k in grid {
        let base = model.class_means[k as usize];
        let v = (0.5 + model.contrast * (base - 0.5)).clamp(0.0, 1.0);
        let v = v.powf(model.gamma);
        let v = if model.noise_sd > 0.0 {
            let n: Real = rng.sample(StandardNormal);
            v + model.noise_sd * n
        } else {
            v
        };
        data.push(v.clamp(0.0, 1.0));
    }
    Tensor::from_vec(&[1, hw, hw], data).expect("grid length fixed by construction")
}

fn one_hot(grid: &[u8], num_classes: usize, hw: usize) -> Tensor {
    let npx = hw * hw;
    let mut data = vec![0.0; num_classes * npx];
    for (i, &k) in grid.iter().enumerate() {
        data[k as usize * npx + i] = 1.0;
    }
    Tensor::from_vec(&[num_classes, hw, hw], data).expect("shape fixed by construction")
}

fn generate_split(
    spec: &SynthSpec,
    model: &IntensityModel,
    domain: Domain,
    keep_labels: bool,
    count: usize,
    stream: u64,
) -> Result<Vec<LabeledImage>, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed ^ stream));
    let min_count = (MIN_CLASS_FRACTION * (spec.image_hw * spec.image_hw) as Real).ceil() as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut accepted = None;
        for _ in 0..MAX_GEOMETRY_RETRIES {
            let Some(geom) = sample_geometry(&mut rng, spec) else { continue };
            let grid = rasterize(&geom, spec.image_hw);
            if class_counts(&grid, spec.num_classes).iter().all(|&c| c >= min_count) {
                accepted = Some(grid);
                break;
            }
        }
        let grid = accepted.ok_or(DataError::DegenerateGeometry(MAX_GEOMETRY_RETRIES))?;
        let image = render(&grid, model, spec.image_hw, &mut rng);
        let label = keep_labels.then(|| one_hot(&grid, spec.num_classes, spec.image_hw));
        out.push(LabeledImage { image, label, domain });
    }
    Ok(out)
}

/// Draws the three splits. Geometry is sampled independently per split
/// (domains are unpaired); only the intensity model differs between domains.
pub fn generate(spec: &SynthSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    Ok(Dataset {
        source: generate_split(spec, &spec.source_model, Domain::Source, true, spec.n_source, 0x01)?,
        target_train: generate_split(
            spec,
            &spec.target_model,
            Domain::Target,
            false,
            spec.n_target_train,
            0x02,
        )?,
        target_test: generate_split(
            spec,
            &spec.target_model,
            Domain::Target,
            true,
            spec.n_target_test,
            0x03,
        )?,
    })
}

/// One `manifest.txt` record.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub domain: Domain,
    pub has_label: bool,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

/// Parses `manifest.txt`: a `records N` header, then exactly N lines of
/// `id domain has_label`. Ids are restricted to `[A-Za-z0-9_-]` since they
/// become file names; anything else is rejected, not sanitized.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>, DataError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or(DataError::Manifest { line: 1, msg: "empty manifest".into() })?;
    let declared: usize = match header.split_whitespace().collect::<Vec<_>>()[..] {
        ["records", n] => n.parse().map_err(|_| DataError::Manifest {
            line: 1,
            msg: format!("bad record count {n:?}"),
        })?,
        _ => {
            return Err(DataError::Manifest {
                line: 1,
                msg: format!("expected `records N`, got {header:?}"),
            })
        }
    };
    let mut records = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            return Err(DataError::Manifest { line: line_no, msg: "blank line inside manifest".into() });
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, domain, has_label] = fields[..] else {
            return Err(DataError::Manifest {
                line: line_no,
                msg: format!("expected `id domain has_label`, got {line:?}"),
            });
        };
        if !valid_id(id) {
            return Err(DataError::Manifest {
                line: line_no,
                msg: format!("invalid record id {id:?}"),
            });
        }
        // Ids become file names, so a duplicate would silently alias records.
        if records.iter().any(|r: &ManifestRecord| r.id == id) {
            return Err(DataError::Manifest {
                line: line_no,
                msg: format!("duplicate record id {id:?}"),
            });
        }
        let domain = match domain {
            "source" => Domain::Source,
            "target" => Domain::Target,
            other => {
                return Err(DataError::Manifest {
                    line: line_no,
                    msg: format!("unknown domain {other:?}"),
                })
            }
        };
        let has_label = match has_label {
            "1" => true,
            "0" => false,
            other => {
                return Err(DataError::Manifest {
                    line: line_no,
                    msg: format!("has_label must be 0 or 1, got {other:?}"),
                })
            }
        };
        records.push(ManifestRecord { id: id.to_string(), domain, has_label });
    }
    if records.len() != declared {
        return Err(DataError::CountMismatch { declared, found: records.len() });
    }
    Ok(records)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

fn write_tensor(path: &Path, t: &Tensor) -> Result<(), DataError> {
    vten::write_file(path, t).map_err(|source| match source {
        vten::FormatError::Io(source) => DataError::Io { path: path.display().to_string(), source },
        source => DataError::Decode { path: path.display().to_string(), source },
    })
}

fn read_tensor(path: &Path) -> Result<Tensor, DataError> {
    vten::read_file(path).map_err(|source| match source {
        vten::FormatError::Io(source) => DataError::Io { path: path.display().to_string(), source },
        source => DataError::Decode { path: path.display().to_string(), source },
    })
}

/// Writes all three splits plus `manifest.txt` into `dir` (created if
/// needed). Ids encode the split so [`load_dataset`] can rebuild it:
/// source records are labeled, target-test is the labeled target split.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = String::new();
    let total = ds.source.len() + ds.target_train.len() + ds.target_test.len();
    let _ = writeln!(manifest, "records {total}");
    let groups: [(&str, &[LabeledImage]); 3] = [
        ("src", &ds.source),
        ("tgt_train", &ds.target_train),
        ("tgt_test", &ds.target_test),
    ];
    for (prefix, items) in groups {
        for (i, item) in items.iter().enumerate() {
            let id = format!("{prefix}_{i:03}");
            let domain = match item.domain {
                Domain::Source => "source",
                Domain::Target => "target",
            };
            let _ = writeln!(manifest, "{id} {domain} {}", u8::from(item.label.is_some()));
            write_tensor(&dir.join(format!("{id}_img.vten")), &item.image)?;
            if let Some(label) = &item.label {
                write_tensor(&dir.join(format!("{id}_lbl.vten")), label)?;
            }
        }
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(io_err(&path))?;
    Ok(())
}

fn validate_record(
    id: &str,
    image: &Tensor,
    label: Option<&Tensor>,
    shape: &mut Option<(Vec<usize>, usize)>,
) -> Result<(), DataError> {
    let bad = |detail: String| DataError::BadRecord { id: id.to_string(), detail };
    let ishape = image.shape();
    if ishape.len() != 3 {
        return Err(bad(format!("image must be rank 3 [C,H,W], got {ishape:?}")));
    }
    if let Some(label) = label {
        let lshape = label.shape();
        if lshape.len() != 3 || lshape[1..] != ishape[1..] {
            return Err(bad(format!(
                "label shape {lshape:?} does not cover image shape {ishape:?}"
            )));
        }
        let k = lshape[0];
        let npx = lshape[1] * lshape[2];
        let data = label.data();
        for px in 0..npx {
            let mut ones = 0;
            for c in 0..k {
                let v = data[c * npx + px];
                if v != 0.0 && v != 1.0 {
                    return Err(bad(format!("label value {v} at pixel {px} is not 0 or 1")));
                }
                ones += (v == 1.0) as usize;
            }
            if ones != 1 {
                return Err(bad(format!("pixel {px} has {ones} classes set, expected 1")));
            }
        }
        match shape {
            Some((s, k0)) => {
                if *s != ishape || *k0 != k {
                    return Err(bad("shape differs from earlier records".into()));
                }
            }
            None => *shape = Some((ishape.to_vec(), k)),
        }
    } else if let Some((s, _)) = shape {
        if *s != ishape {
            return Err(bad("shape differs from earlier records".into()));
        }
    } else {
        *shape = Some((ishape.to_vec(), 0));
    }
    Ok(())
}

/// Loads a dataset directory, rebuilding the three splits: source records
/// (which must be labeled), unlabeled target records as target-train, and
/// labeled target records as target-test.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let records = parse_manifest(&text)?;
    let mut ds = Dataset { source: Vec::new(), target_train: Vec::new(), target_test: Vec::new() };
    // K is pinned by the first labeled record; image shape by the first record.
    let mut shape: Option<(Vec<usize>, usize)> = None;
    for rec in records {
        let image = read_tensor(&dir.join(format!("{}_img.vten", rec.id)))?;
        let label = if rec.has_label {
            Some(read_tensor(&dir.join(format!("{}_lbl.vten", rec.id)))?)
        } else {
            None
        };
        validate_record(&rec.id, &image, label.as_ref(), &mut shape)?;
        match (rec.domain, rec.has_label) {
            (Domain::Source, true) => {
                ds.source.push(LabeledImage { image, label, domain: Domain::Source })
            }
            (Domain::Source, false) => {
                return Err(DataError::BadRecord {
                    id: rec.id,
                    detail: "source records must carry labels".into(),
                })
            }
            (Domain::Target, false) => {
                ds.target_train.push(LabeledImage { image, label, domain: Domain::Target })
            }
            (Domain::Target, true) => {
                ds.target_test.push(LabeledImage { image, label, domain: Domain::Target })
            }
        }
    }
    Ok(ds)
}

/// Stacks images into one `[M, C, H, W]` constant tensor.
pub fn stack_images(items: &[&LabeledImage]) -> Result<Tensor, DataError> {
    let first = items
        .first()
        .ok_or_else(|| DataError::BadSpec("cannot stack an empty batch".into()))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * first.image.numel());
    for item in items {
        if item.image.shape() != shape {
            return Err(DataError::BadSpec("stacked images must share a shape".into()));
        }
        data.extend_from_slice(&item.image.data());
    }
    let mut full = vec![items.len()];
    full.extend_from_slice(&shape);
    Ok(Tensor::from_vec(&full, data)?)
}

/// Stacks labels into one `[M, K, H, W]` constant tensor; every item must be
/// labeled.
pub fn stack_labels(items: &[&LabeledImage]) -> Result<Tensor, DataError> {
    let first = items
        .first()
        .ok_or_else(|| DataError::BadSpec("cannot stack an empty batch".into()))?;
    let first_label = first
        .label
        .as_ref()
        .ok_or_else(|| DataError::BadSpec("stack_labels needs labeled records".into()))?;
    let shape = first_label.shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * first_label.numel());
    for item in items {
        let label = item
            .label
            .as_ref()
            .ok_or_else(|| DataError::BadSpec("stack_labels needs labeled records".into()))?;
        if label.shape() != shape {
            return Err(DataError::BadSpec("stacked labels must share a shape".into()));
        }
        data.extend_from_slice(&label.data());
    }
    let mut full = vec![items.len()];
    full.extend_from_slice(&shape);
    Ok(Tensor::from_vec(&full, data)?)
}

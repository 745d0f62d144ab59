//! Synthetic advecting-blob sequences and the `MCFR` frame file format.
//!
//! Frame files are little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MCFR"
//! 4       2     version (u16) = 1
//! 6       2     reserved (u16) = 0
//! 8       4     T (u32)
//! 12      4     H (u32)
//! 16      4     W (u32)
//! 20      8·THW values (f64), frame-major, row-major within a frame
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 4] = b"MCFR";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 20;

/// `T × H × W` intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    t: usize,
    h: usize,
    w: usize,
    values: Vec<f64>,
}

impl FrameSequence {
    pub fn new(t: usize, h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("invalid extents {t}x{h}x{w}")));
        }
        if values.len() != t * h * w {
            return Err(Error::dim(
                "frame_sequence",
                format!("{} values for {t}x{h}x{w}", values.len()),
            ));
        }
        if let Some(i) = values
            .iter()
            .position(|v| !v.is_finite() || !(0.0..=1.0).contains(v))
        {
            return Err(Error::Contract(format!(
                "value {} at index {i} outside [0, 1]",
                values[i]
            )));
        }
        Ok(Self { t, h, w, values })
    }

    /// Build from unconstrained values, clamping into `[0, 1]`.
    pub fn clamped(t: usize, h: usize, w: usize, mut values: Vec<f64>) -> Result<Self> {
        for v in values.iter_mut() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(t, h, w, values)
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.t, self.h, self.w]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.values[t * n..(t + 1) * n]
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<FrameSequence> {
        if len == 0 || start + len > self.t {
            return Err(Error::dim(
                "slice",
                format!("frames [{start}, {}) of {}", start + len, self.t),
            ));
        }
        let n = self.h * self.w;
        Ok(FrameSequence {
            t: len,
            h: self.h,
            w: self.w,
            values: self.values[start * n..(start + len) * n].to_vec(),
        })
    }

    pub fn concat(&self, other: &FrameSequence) -> Result<FrameSequence> {
        if self.h != other.h || self.w != other.w {
            return Err(Error::dim("concat", "frame extents differ"));
        }
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        Ok(FrameSequence {
            t: self.t + other.t,
            h: self.h,
            w: self.w,
            values,
        })
    }

    pub fn total_intensity(&self, t: usize) -> f64 {
        self.frame(t).iter().sum()
    }

    /// Frame `t` as an `L × P²` matrix, one row per `P × P` patch in
    /// row-major patch order.
    pub fn patchify(&self, t: usize, p: usize) -> Result<Tensor> {
        check_patch(self.h, self.w, p)?;
        let (ph, pw) = (self.h / p, self.w / p);
        let frame = self.frame(t);
        let mut data = Vec::with_capacity(self.h * self.w);
        for by in 0..ph {
            for bx in 0..pw {
                for y in 0..p {
                    let row = (by * p + y) * self.w + bx * p;
                    data.extend_from_slice(&frame[row..row + p]);
                }
            }
        }
        Tensor::new(ph * pw, p * p, data)
    }

    /// Inverse of [`patchify`](Self::patchify) over a list of frames, clamped into `[0, 1]`.
    pub fn from_patches(frames: &[&Tensor], h: usize, w: usize, p: usize) -> Result<Self> {
        check_patch(h, w, p)?;
        let (ph, pw) = (h / p, w / p);
        let mut values = vec![0.0; frames.len() * h * w];
        for (t, patches) in frames.iter().enumerate() {
            if patches.shape() != [ph * pw, p * p] {
                return Err(Error::dim(
                    "from_patches",
                    format!("{:?} for {h}x{w} frames with patch {p}", patches.shape()),
                ));
            }
            let out = &mut values[t * h * w..(t + 1) * h * w];
            for by in 0..ph {
                for bx in 0..pw {
                    let row = patches.row(by * pw + bx);
                    for y in 0..p {
                        let dst = (by * p + y) * w + bx * p;
                        out[dst..dst + p].copy_from_slice(&row[y * p..(y + 1) * p]);
                    }
                }
            }
        }
        Self::clamped(frames.len(), h, w, values)
    }
}

fn check_patch(h: usize, w: usize, p: usize) -> Result<()> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!(
            "frame {h}x{w} not divisible by patch {p}"
        )));
    }
    Ok(())
}

/// Parameters of the blob generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvectionConfig {
    pub n_blobs: usize,
    /// Base velocity `[vx, vy]` in cells per frame.
    pub velocity: [f64; 2],
    /// Rotation of the velocity vector, radians per frame.
    pub rotation: f64,
    /// Rotate each sequence's base velocity by a random angle.
    pub random_direction: bool,
    /// Per-blob speed multiplier drawn from `[1 - s, 1 + s]`.
    pub speed_spread: f64,
    pub blob_sigma: f64,
    /// Peak intensity range.
    pub peak: [f64; 2],
    /// Multiplicative intensity change per frame (`0.02` is +2 %/frame).
    pub growth: f64,
    /// Life-cycle period in frames; each blob's intensity follows
    /// `(1 - cos(2πt/period + φ)) / 2`. Zero disables the cycle.
    pub lifecycle_period: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for AdvectionConfig {
    fn default() -> Self {
        Self {
            n_blobs: 3,
            velocity: [0.6, 0.3],
            rotation: 0.02,
            random_direction: true,
            speed_spread: 0.3,
            blob_sigma: 2.5,
            peak: [0.5, 0.9],
            growth: 0.0,
            lifecycle_period: 16.0,
            noise: 0.01,
            seed: 0,
        }
    }
}

impl AdvectionConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = self.velocity.iter().all(|v| v.is_finite())
            && self.rotation.is_finite()
            && self.growth.is_finite()
            && self.lifecycle_period.is_finite();
        if !finite {
            return Err(Error::Config("advection parameters must be finite".into()));
        }
        if !(self.blob_sigma > 0.0) {
            return Err(Error::Config("blob_sigma must be positive".into()));
        }
        if !(self.noise >= 0.0) || !(0.0..=1.0).contains(&self.speed_spread) {
            return Err(Error::Config("noise must be >= 0 and speed_spread in [0, 1]".into()));
        }
        if !(0.0 <= self.peak[0] && self.peak[0] <= self.peak[1] && self.peak[1].is_finite()) {
            return Err(Error::Config("peak must be an ordered nonnegative range".into()));
        }
        if self.lifecycle_period < 0.0 || self.growth <= -1.0 {
            return Err(Error::Config(
                "lifecycle_period must be >= 0 and growth > -1".into(),
            ));
        }
        Ok(())
    }
}

struct Blob {
    x: f64,
    y: f64,
    speed: f64,
    peak: f64,
    phase: f64,
}

/// `n_sequences` sequences of `t` frames at `h × w`; sequence `i` depends
/// only on `(cfg.seed, i)`.
pub fn generate(
    cfg: &AdvectionConfig,
    n_sequences: usize,
    t: usize,
    h: usize,
    w: usize,
) -> Result<Vec<FrameSequence>> {
    generate_range(cfg, 0..n_sequences, t, h, w)
}

/// Sequences with indices in `range`; used to draw disjoint splits from one seed.
pub fn generate_range(
    cfg: &AdvectionConfig,
    range: std::ops::Range<usize>,
    t: usize,
    h: usize,
    w: usize,
) -> Result<Vec<FrameSequence>> {
    cfg.validate()?;
    if t == 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!("invalid extents {t}x{h}x{w}")));
    }
    range
        .into_par_iter()
        .map(|i| generate_one(cfg, i as u64, t, h, w))
        .collect()
}

fn generate_one(cfg: &AdvectionConfig, index: u64, t: usize, h: usize, w: usize) -> Result<FrameSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);

    let theta0 = if cfg.random_direction {
        rng.gen_range(0.0..2.0 * PI)
    } else {
        0.0
    };
    let blobs: Vec<Blob> = (0..cfg.n_blobs)
        .map(|_| Blob {
            x: rng.gen_range(0.0..w as f64),
            y: rng.gen_range(0.0..h as f64),
            speed: 1.0 + cfg.speed_spread * rng.gen_range(-1.0..=1.0),
            peak: rng.gen_range(cfg.peak[0]..=cfg.peak[1]),
            phase: rng.gen_range(0.0..2.0 * PI),
        })
        .collect();
    let noise = (cfg.noise > 0.0).then(|| Normal::new(0.0, cfg.noise).expect("valid sigma"));

    let inv_two_sigma_sq = 1.0 / (2.0 * cfg.blob_sigma * cfg.blob_sigma);
    let (wf, hf) = (w as f64, h as f64);
    let mut values = vec![0.0; t * h * w];
    let mut pos: Vec<(f64, f64)> = blobs.iter().map(|b| (b.x, b.y)).collect();

    for step in 0..t {
        let theta = theta0 + cfg.rotation * step as f64;
        let (sin, cos) = theta.sin_cos();
        let vx = cfg.velocity[0] * cos - cfg.velocity[1] * sin;
        let vy = cfg.velocity[0] * sin + cfg.velocity[1] * cos;
        let frame = &mut values[step * h * w..(step + 1) * h * w];
        for (b, &(bx, by)) in blobs.iter().zip(&pos) {
            let mut amp = b.peak * (1.0 + cfg.growth).powi(step as i32);
            if cfg.lifecycle_period > 0.0 {
                amp *= 0.5 * (1.0 - (2.0 * PI * step as f64 / cfg.lifecycle_period + b.phase).cos());
            }
            if amp == 0.0 {
                continue;
            }
            for y in 0..h {
                let dy = wrap(y as f64 - by, hf);
                let gy = (-dy * dy * inv_two_sigma_sq).exp();
                for x in 0..w {
                    let dx = wrap(x as f64 - bx, wf);
                    frame[y * w + x] += amp * gy * (-dx * dx * inv_two_sigma_sq).exp();
                }
            }
        }
        if let Some(n) = &noise {
            for v in frame.iter_mut() {
                *v += n.sample(&mut rng);
            }
        }
        for v in frame.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        for (b, p) in blobs.iter().zip(pos.iter_mut()) {
            p.0 = (p.0 + b.speed * vx).rem_euclid(wf);
            p.1 = (p.1 + b.speed * vy).rem_euclid(hf);
        }
    }
    FrameSequence::new(t, h, w, values)
}

/// Minimum-image displacement on a ring of length `n`.
fn wrap(d: f64, n: f64) -> f64 {
    d - n * (d / n).round()
}

/// Quantiles of the nonzero training intensities, used as event thresholds.
pub fn intensity_thresholds(data: &[FrameSequence], quantiles: &[f64]) -> Vec<f64> {
    let mut nonzero: Vec<f64> = data
        .iter()
        .flat_map(|s| s.values().iter().copied())
        .filter(|&v| v > 0.0)
        .collect();
    if nonzero.is_empty() {
        return vec![0.0; quantiles.len()];
    }
    nonzero.sort_by(f64::total_cmp);
    let n = nonzero.len();
    quantiles
        .iter()
        .map(|q| {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let frac = pos - lo as f64;
            nonzero[lo] * (1.0 - frac) + nonzero[hi] * frac
        })
        .collect()
}

pub fn encode_frames(seq: &FrameSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * seq.values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for n in [seq.t, seq.h, seq.w] {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for v in &seq.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_frames(bytes: &[u8]) -> Result<FrameSequence> {
    let fmt = |offset: usize, message: String| Error::Format {
        offset: offset as u64,
        message,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fmt(
            bytes.len(),
            format!(
                "truncated header: {} of {HEADER_LEN} bytes present, {} missing",
                bytes.len(),
                HEADER_LEN - bytes.len()
            ),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fmt(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let version_le = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version_le != VERSION {
        if u16::from_be_bytes([bytes[4], bytes[5]]) == VERSION {
            return Err(fmt(
                4,
                "big-endian frame file; only little-endian files are supported".into(),
            ));
        }
        return Err(fmt(4, format!("unsupported version {version_le}")));
    }
    let reserved = u16::from_le_bytes([bytes[6], bytes[7]]);
    if reserved != 0 {
        return Err(fmt(6, format!("reserved field is {reserved}, expected 0")));
    }
    let read_u32 = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (t, h, w) = (read_u32(8), read_u32(12), read_u32(16));
    if t == 0 || h == 0 || w == 0 {
        return Err(fmt(8, format!("zero extent {t}x{h}x{w}")));
    }
    let expected = t
        .checked_mul(h)
        .and_then(|n| n.checked_mul(w))
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| fmt(8, format!("extents {t}x{h}x{w} overflow")))?;
    if bytes.len() < expected {
        return Err(fmt(
            bytes.len(),
            format!(
                "truncated payload: expected {expected} bytes, {} missing",
                expected - bytes.len()
            ),
        ));
    }
    if bytes.len() > expected {
        return Err(fmt(
            expected,
            format!("{} trailing bytes", bytes.len() - expected),
        ));
    }
    let values: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = values
        .iter()
        .position(|v| !v.is_finite() || !(0.0..=1.0).contains(v))
    {
        return Err(fmt(
            HEADER_LEN + 8 * i,
            format!("value {} outside [0, 1]", values[i]),
        ));
    }
    FrameSequence::new(t, h, w, values)
}

pub fn write_frames(path: &Path, seq: &FrameSequence) -> Result<()> {
    fs::write(path, encode_frames(seq)).map_err(|e| Error::io(path, e))
}

pub fn read_frames(path: &Path) -> Result<FrameSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_frames(&bytes)
}

/// Contents of `manifest.json` in a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub tool: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub extents: [usize; 3],
    pub thresholds: Vec<f64>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Train / validation / test splits.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<FrameSequence>,
    pub val: Vec<FrameSequence>,
    pub test: Vec<FrameSequence>,
    pub thresholds: Vec<f64>,
}

pub const THRESHOLD_QUANTILES: [f64; 3] = [0.25, 0.5, 0.75];

impl Dataset {
    /// Draw disjoint splits from one generator seed; thresholds come from
    /// the training split.
    pub fn synthesize(
        cfg: &AdvectionConfig,
        sizes: [usize; 3],
        t: usize,
        h: usize,
        w: usize,
    ) -> Result<Self> {
        let [n_train, n_val, n_test] = sizes;
        let train = generate_range(cfg, 0..n_train, t, h, w)?;
        let val = generate_range(cfg, n_train..n_train + n_val, t, h, w)?;
        let test = generate_range(cfg, n_train + n_val..n_train + n_val + n_test, t, h, w)?;
        let thresholds = intensity_thresholds(&train, &THRESHOLD_QUANTILES);
        Ok(Self {
            train,
            val,
            test,
            thresholds,
        })
    }

    pub fn write(&self, dir: &Path, config_echo: serde_json::Value, seed: u64) -> Result<DatasetManifest> {
        let extents = self
            .train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .next()
            .map(|s| s.extents())
            .unwrap_or([0; 3]);
        let mut manifest = DatasetManifest {
            tool: crate::tool_version(),
            seed,
            config: config_echo,
            extents,
            thresholds: self.thresholds.clone(),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (split, seqs) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            let sub = dir.join(split);
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            let names: Vec<String> = seqs
                .iter()
                .enumerate()
                .map(|(i, seq)| {
                    let name = format!("{split}/seq_{i:05}.mcfr");
                    write_frames(&dir.join(&name), seq).map(|_| name)
                })
                .collect::<Result<_>>()?;
            match split {
                "train" => manifest.train = names,
                "val" => manifest.val = names,
                _ => manifest.test = names,
            }
        }
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    pub fn read(dir: &Path) -> Result<(Self, DatasetManifest)> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let load = |names: &[String]| -> Result<Vec<FrameSequence>> {
            names.iter().map(|n| read_frames(&dir.join(n))).collect()
        };
        let ds = Dataset {
            train: load(&manifest.train)?,
            val: load(&manifest.val)?,
            test: load(&manifest.test)?,
            thresholds: manifest.thresholds.clone(),
        };
        Ok((ds, manifest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn still() -> AdvectionConfig {
        AdvectionConfig {
            velocity: [0.0, 0.0],
            rotation: 0.0,
            random_direction: false,
            speed_spread: 0.0,
            growth: 0.0,
            lifecycle_period: 0.0,
            noise: 0.0,
            ..AdvectionConfig::default()
        }
    }

    #[test]
    fn static_field_is_constant() {
        let seqs = generate(&still(), 2, 6, 16, 16).unwrap();
        for s in &seqs {
            for t in 1..s.len() {
                assert_eq!(s.frame(t), s.frame(0));
            }
        }
    }

    #[test]
    fn same_seed_same_data() {
        let cfg = AdvectionConfig::default();
        let a = generate(&cfg, 3, 8, 16, 16).unwrap();
        let b = generate(&cfg, 3, 8, 16, 16).unwrap();
        assert_eq!(a, b);
        let c = generate(&AdvectionConfig { seed: 1, ..cfg }, 3, 8, 16, 16).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn values_stay_in_unit_range() {
        let cfg = AdvectionConfig {
            noise: 0.3,
            peak: [0.9, 1.5],
            growth: 0.1,
            ..AdvectionConfig::default()
        };
        for s in generate(&cfg, 3, 10, 16, 16).unwrap() {
            assert!(s.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn patchify_round_trip() {
        let s = generate(&AdvectionConfig::default(), 1, 2, 8, 12).unwrap().remove(0);
        let p0 = s.patchify(0, 4).unwrap();
        let p1 = s.patchify(1, 4).unwrap();
        assert_eq!(p0.shape(), [6, 16]);
        let back = FrameSequence::from_patches(&[&p0, &p1], 8, 12, 4).unwrap();
        assert_eq!(back, s);
        assert!(s.patchify(0, 5).is_err());
    }

    #[test]
    fn frame_codec_round_trip_and_errors() {
        let s = generate(&AdvectionConfig::default(), 1, 3, 4, 4).unwrap().remove(0);
        let bytes = encode_frames(&s);
        assert_eq!(bytes.len(), 20 + 3 * 16 * 8);
        assert_eq!(decode_frames(&bytes).unwrap(), s);

        let cut = &bytes[..bytes.len() - 5];
        match decode_frames(cut) {
            Err(Error::Format { message, .. }) => assert!(message.contains("5 missing"), "{message}"),
            other => panic!("{other:?}"),
        }
        match decode_frames(&bytes[..7]) {
            Err(Error::Format { message, .. }) => assert!(message.contains("13 missing"), "{message}"),
            other => panic!("{other:?}"),
        }

        let mut be = bytes.clone();
        be[4..6].copy_from_slice(&VERSION.to_be_bytes());
        match decode_frames(&be) {
            Err(Error::Format { offset: 4, message }) => assert!(message.contains("big-endian")),
            other => panic!("{other:?}"),
        }

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_frames(&magic), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn thresholds_from_quantiles() {
        let s = FrameSequence::new(1, 1, 5, vec![0.0, 0.1, 0.2, 0.3, 0.4]).unwrap();
        let q = intensity_thresholds(&[s], &[0.0, 0.5, 1.0]);
        assert_eq!(q, vec![0.1, 0.25, 0.4]);
    }
}

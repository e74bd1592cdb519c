//! Event-camera data handling: raw record parsing, time binning into spike
//! tensors, augmentation, a synthetic event-stream generator and a packed
//! tensor cache.
//!
//! Raw recordings are streams of 5-byte records: `x`, `y`, then a byte whose
//! high bit is the polarity and whose low 7 bits are the top of a 23-bit
//! big-endian microsecond timestamp spread over the remaining bytes.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array4;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Side length of the sensor plane.
pub const SENSOR_HW: usize = 34;
/// Polarity channels (OFF = 0, ON = 1).
pub const CHANNELS: usize = 2;
/// Default number of time bins.
pub const DEFAULT_TIMESTEPS: usize = 25;
/// Environment variable naming the event dataset root directory.
pub const DATASET_ENV: &str = "NMNIST_DIR";

// ───────────────────────── raw events ─────────────────────────

/// One sensor event.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DvsEvent {
    pub x: u8,
    pub y: u8,
    /// 0 = OFF, 1 = ON.
    pub polarity: u8,
    pub timestamp_us: u32,
}

/// Decode a stream of 5-byte event records.
///
/// Rejects streams whose length is not a multiple of 5 and events whose
/// coordinates leave the sensor plane; both errors carry the byte offset.
pub fn parse_events(bytes: &[u8]) -> Result<Vec<DvsEvent>> {
    if bytes.len() % 5 != 0 {
        let full = bytes.len() / 5 * 5;
        return Err(Error::TruncatedRecord {
            offset: full,
            remaining: bytes.len() - full,
        });
    }
    let mut out = Vec::with_capacity(bytes.len() / 5);
    for (i, rec) in bytes.chunks_exact(5).enumerate() {
        let (x, y) = (rec[0], rec[1]);
        if x as usize >= SENSOR_HW || y as usize >= SENSOR_HW {
            return Err(Error::CoordOutOfRange {
                x,
                y,
                dim: SENSOR_HW,
                offset: i * 5,
            });
        }
        let polarity = rec[2] >> 7;
        let timestamp_us =
            ((rec[2] as u32 & 0x7F) << 16) | ((rec[3] as u32) << 8) | rec[4] as u32;
        out.push(DvsEvent {
            x,
            y,
            polarity,
            timestamp_us,
        });
    }
    Ok(out)
}

/// Inverse of [`parse_events`]. Timestamps are truncated to 23 bits, which
/// is the full width the record format can carry.
pub fn encode_events(events: &[DvsEvent]) -> Vec<u8> {
    let mut out = Vec::with_capacity(events.len() * 5);
    for e in events {
        let ts = e.timestamp_us & 0x7F_FFFF;
        out.push(e.x);
        out.push(e.y);
        out.push(((e.polarity & 1) << 7) | ((ts >> 16) as u8));
        out.push((ts >> 8) as u8);
        out.push(ts as u8);
    }
    out
}

// ───────────────────────── spike tensors ─────────────────────────

/// A binary `(T, C, H, W)` spike volume. Entries are 0 or 1 by
/// construction; [`SpikeTensor::new`] rejects anything else.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeTensor {
    data: Array4<u8>,
}

impl SpikeTensor {
    pub fn new(data: Array4<u8>) -> Result<Self> {
        if let Some(&bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidParam(format!(
                "spike tensor entries must be 0 or 1, found {bad}"
            )));
        }
        Ok(Self { data })
    }

    pub fn zeros(t: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            data: Array4::zeros((t, c, h, w)),
        }
    }

    pub fn data(&self) -> &Array4<u8> {
        &self.data
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn spike_count(&self) -> u64 {
        self.data.iter().map(|&v| v as u64).sum()
    }

    /// Fraction of active cells.
    pub fn density(&self) -> f64 {
        self.spike_count() as f64 / self.data.len() as f64
    }
}

/// Bin events into `t_steps` equal-width windows spanning `[0, t_last]`,
/// OR-ing duplicates so every cell stays binary. An empty event list yields
/// an all-zero tensor and sets the returned warning flag.
pub fn bin_events(events: &[DvsEvent], t_steps: usize) -> Result<(SpikeTensor, bool)> {
    if t_steps == 0 {
        return Err(Error::InvalidParam("t_steps must be positive".into()));
    }
    let mut data = Array4::<u8>::zeros((t_steps, CHANNELS, SENSOR_HW, SENSOR_HW));
    if events.is_empty() {
        return Ok((SpikeTensor { data }, true));
    }
    let t_last = events.iter().map(|e| e.timestamp_us).max().unwrap() as u64;
    for (i, e) in events.iter().enumerate() {
        if e.x as usize >= SENSOR_HW || e.y as usize >= SENSOR_HW {
            return Err(Error::CoordOutOfRange {
                x: e.x,
                y: e.y,
                dim: SENSOR_HW,
                offset: i,
            });
        }
        let bin = (e.timestamp_us as u64 * t_steps as u64 / (t_last + 1)) as usize;
        data[[bin, (e.polarity & 1) as usize, e.y as usize, e.x as usize]] = 1;
    }
    Ok((SpikeTensor { data }, false))
}

// ───────────────────────── augmentation ─────────────────────────

/// Augmentation policy: spatial shift in pixels and temporal jitter in
/// bins. All randomness comes from `seed`, so the same spec always yields
/// the same transform.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct AugmentSpec {
    pub max_shift_px: i32,
    pub max_jitter_bins: i32,
    pub seed: u64,
}

impl AugmentSpec {
    pub fn new(max_shift_px: i32, max_jitter_bins: i32, seed: u64) -> Result<Self> {
        if max_shift_px < 0 || max_jitter_bins < 0 {
            return Err(Error::InvalidParam(
                "augmentation magnitudes must be non-negative".into(),
            ));
        }
        Ok(Self {
            max_shift_px,
            max_jitter_bins,
            seed,
        })
    }
}

fn draw(rng: &mut ChaCha8Rng, mag: i32) -> i32 {
    if mag == 0 {
        0
    } else {
        rng.random_range(-mag..=mag)
    }
}

/// Shift a binned tensor by a random spatial offset (zero-filled at the
/// borders) and roll it a random number of bins along time (zero-filled as
/// well, so early or late activity slides off the window edge).
pub fn augment_tensor(x: &SpikeTensor, spec: &AugmentSpec) -> SpikeTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dx = draw(&mut rng, spec.max_shift_px);
    let dy = draw(&mut rng, spec.max_shift_px);
    let dt = draw(&mut rng, spec.max_jitter_bins);
    let (t, c, h, w) = x.shape();
    let src = x.data();
    let mut out = Array4::<u8>::zeros((t, c, h, w));
    for ti in 0..t as i64 {
        let st = ti - dt as i64;
        if st < 0 || st >= t as i64 {
            continue;
        }
        for ci in 0..c {
            for yi in 0..h as i64 {
                let sy = yi - dy as i64;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                for xi in 0..w as i64 {
                    let sx = xi - dx as i64;
                    if sx < 0 || sx >= w as i64 {
                        continue;
                    }
                    out[[ti as usize, ci, yi as usize, xi as usize]] =
                        src[[st as usize, ci, sy as usize, sx as usize]];
                }
            }
        }
    }
    SpikeTensor { data: out }
}

/// Event-level augmentation applied before binning: one spatial shift per
/// sample (events leaving the plane are dropped) and per-event timestamp
/// jitter of up to `max_jitter_bins` bin widths. `t_steps` fixes the bin
/// width used to convert jitter bins into microseconds.
pub fn augment_events(events: &[DvsEvent], spec: &AugmentSpec, t_steps: usize) -> Vec<DvsEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dx = draw(&mut rng, spec.max_shift_px);
    let dy = draw(&mut rng, spec.max_shift_px);
    if events.is_empty() {
        return Vec::new();
    }
    let t_last = events.iter().map(|e| e.timestamp_us).max().unwrap();
    let bin_width_us = ((t_last as u64 + 1) / t_steps.max(1) as u64).max(1) as i64;
    let jitter_us = spec.max_jitter_bins as i64 * bin_width_us;
    let mut out = Vec::with_capacity(events.len());
    for e in events {
        let nx = e.x as i64 + dx as i64;
        let ny = e.y as i64 + dy as i64;
        if nx < 0 || nx >= SENSOR_HW as i64 || ny < 0 || ny >= SENSOR_HW as i64 {
            continue;
        }
        let dt = if jitter_us == 0 {
            0
        } else {
            rng.random_range(-jitter_us..=jitter_us)
        };
        let nt = e.timestamp_us as i64 + dt;
        if nt < 0 {
            continue;
        }
        out.push(DvsEvent {
            x: nx as u8,
            y: ny as u8,
            polarity: e.polarity,
            timestamp_us: nt as u32,
        });
    }
    out
}

// ───────────────────────── synthetic streams ─────────────────────────

/// Generator settings for synthetic event streams.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub t_steps: usize,
    pub hw: usize,
    /// Bernoulli probability of background noise per cell per bin.
    pub noise_density: f64,
    /// With the motif off the stream is pure noise and classes carry no
    /// signal, which is useful as a null control.
    pub motif: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            t_steps: DEFAULT_TIMESTEPS,
            hw: SENSOR_HW,
            noise_density: 0.01,
            motif: true,
        }
    }
}

/// Whether a bar `width` cells thick at sweep position `p` covers `cell`,
/// wrapping within a span of `span` cells.
fn bar_covers(p: usize, width: usize, span: usize, cell: usize) -> bool {
    (0..width).any(|k| (p + k) % span == cell)
}

/// Draw one synthetic sample for `class`.
///
/// Each class is a moving-bar motif rendered the way a change-driven sensor
/// would see it: cells the bars newly cover fire in the ON channel, cells
/// they just left fire in the OFF channel. Class `c` owns a private
/// horizontal band of rows swept rightward by a pair of opposed vertical
/// bars (half the frame apart). Because the bands are disjoint, the classes
/// differ in *which* cells fire, not just in when they fire: time-averaged
/// rate maps are separable by construction, which is what a rate-coded
/// readout can actually learn. Every class gets the same geometry, so no
/// class is easier than another, and the bar advances by its own width each
/// bin — full turnover — which keeps each class's event mass several times
/// the noise floor so the class signal, not the background, dominates
/// learned features. Background noise is Bernoulli per cell per bin.
pub fn synthesize(class: usize, seed: u64, spec: &SynthSpec) -> Result<SpikeTensor> {
    if spec.num_classes == 0 {
        return Err(Error::InvalidParam("num_classes must be positive".into()));
    }
    if class >= spec.num_classes {
        return Err(Error::InvalidParam(format!(
            "class {class} out of range for {} classes",
            spec.num_classes
        )));
    }
    if !(0.0..=1.0).contains(&spec.noise_density) {
        return Err(Error::InvalidParam(format!(
            "noise_density {} outside [0, 1]",
            spec.noise_density
        )));
    }
    if spec.t_steps == 0 || spec.hw < 4 {
        return Err(Error::InvalidParam(
            "t_steps must be positive and hw at least 4".into(),
        ));
    }
    let band_h = spec.hw / spec.num_classes;
    if spec.motif && band_h == 0 {
        return Err(Error::InvalidParam(format!(
            "{} classes need at least one row each on a {}-row frame",
            spec.num_classes, spec.hw
        )));
    }
    let (t_steps, hw) = (spec.t_steps, spec.hw);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Array4::<u8>::zeros((t_steps, CHANNELS, hw, hw));

    if spec.motif {
        let band0 = class * band_h;
        // Wide frames carry a thicker bar so the per-bin event mass stays
        // well above the noise floor; the bar advances by its own width, so
        // everything it covered turns over between bins.
        let width = if hw >= 12 { 4 } else { 2 };
        // A second bar half the frame behind doubles the event mass, but
        // only when the frame leaves the pair room to move.
        let paired = hw >= 3 * width;
        // Small phase jitter keeps samples from being bit-identical while
        // leaving class centroids well separated; a full-range phase would
        // smear every sweep into the same uniform average.
        let phase = rng.random_range(0..4) % hw;
        // Cell coverage at sweep position p: the bar (pair), confined to
        // the class band.
        let covered = |p: usize, y: usize, x: usize| -> bool {
            if !(band0..band0 + band_h).contains(&y) {
                return false;
            }
            bar_covers(p, width, hw, x) || (paired && bar_covers(p + hw / 2, width, hw, x))
        };
        let pos = |t: usize| -> usize { (phase + t * width) % hw };
        for t in 0..t_steps {
            let p_now = pos(t);
            let p_prev = if t == 0 { None } else { Some(pos(t - 1)) };
            for y in band0..band0 + band_h {
                for x in 0..hw {
                    let now = covered(p_now, y, x);
                    let before = p_prev.map(|pp| covered(pp, y, x)).unwrap_or(false);
                    if now && !before {
                        data[[t, 1, y, x]] = 1; // newly covered: ON
                    } else if !now && before {
                        data[[t, 0, y, x]] = 1; // just vacated: OFF
                    }
                }
            }
        }
    }

    if spec.noise_density > 0.0 {
        for v in data.iter_mut() {
            if rng.random_bool(spec.noise_density) {
                *v = 1;
            }
        }
    }
    Ok(SpikeTensor { data })
}

// ───────────────────────── labeled samples and datasets ─────────────────────────

/// One training/evaluation sample. Event-backed samples keep their raw
/// stream so augmentation can run before binning; synthetic samples carry
/// only the tensor. Tensors are shared, so cloning a sample is cheap.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub tensor: Arc<SpikeTensor>,
    pub events: Option<Arc<Vec<DvsEvent>>>,
    pub label: usize,
}

fn mix_seed(base: u64, salt: u64) -> u64 {
    // splitmix64 finaliser; cheap, well-scattered, stable.
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic per-purpose seed derivation (augmentation draws, synthetic
/// samples, shuffles) so independent streams never collide.
pub fn derive_seed(base: u64, purpose: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in purpose.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    mix_seed(base ^ h, index)
}

/// Build `n` synthetic samples, classes assigned round-robin.
pub fn synthetic_set(n: usize, base_seed: u64, spec: &SynthSpec) -> Result<Vec<LabeledSample>> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % spec.num_classes;
        let tensor = synthesize(label, derive_seed(base_seed, "synth", i as u64), spec)?;
        out.push(LabeledSample {
            tensor: Arc::new(tensor),
            events: None,
            label,
        });
    }
    Ok(out)
}

/// Dataset split names as laid out on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "Train",
            Split::Test => "Test",
        }
    }
}

/// Dataset root from the `NMNIST_DIR` environment variable, if set.
pub fn dataset_root_from_env() -> Option<PathBuf> {
    std::env::var_os(DATASET_ENV).map(PathBuf::from)
}

/// Load an event dataset laid out as `root/<Split>/<digit>/*.bin`, binning
/// each recording into `t_steps` windows. `limit_per_class` caps files per
/// digit directory (taken in sorted filename order, so subsets are stable).
pub fn load_event_dataset(
    root: &Path,
    split: Split,
    t_steps: usize,
    limit_per_class: Option<usize>,
) -> Result<Vec<LabeledSample>> {
    let split_dir = root.join(split.dir_name());
    if !split_dir.is_dir() {
        return Err(Error::DatasetMissing {
            path: split_dir,
            hint: format!(
                "expected <root>/{}/<digit>/*.bin; point {} at the dataset root",
                split.dir_name(),
                DATASET_ENV
            ),
        });
    }
    let mut out = Vec::new();
    for digit in 0..10usize {
        let dir = split_dir.join(digit.to_string());
        if !dir.is_dir() {
            continue;
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "bin"))
            .collect();
        files.sort();
        if let Some(limit) = limit_per_class {
            files.truncate(limit);
        }
        for f in files {
            let events = parse_events(&std::fs::read(&f)?)?;
            let (tensor, _) = bin_events(&events, t_steps)?;
            out.push(LabeledSample {
                tensor: Arc::new(tensor),
                events: Some(Arc::new(events)),
                label: digit,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::DatasetMissing {
            path: split_dir,
            hint: "split directory exists but holds no <digit>/*.bin files".into(),
        });
    }
    Ok(out)
}

// ───────────────────────── packed tensor cache ─────────────────────────

const CACHE_MAGIC: &[u8; 4] = b"NMT1";

/// Write tensors and labels to a bit-packed cache file. Each record stores
/// the label, the four dimensions and the tensor bits packed MSB-first.
pub fn write_tensor_cache(path: &Path, samples: &[(SpikeTensor, usize)]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for (tensor, label) in samples {
        let (t, c, h, w) = tensor.shape();
        buf.extend_from_slice(&(*label as u32).to_le_bytes());
        for d in [t, c, h, w] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let mut byte = 0u8;
        let mut nbits = 0;
        for &v in tensor.data().iter() {
            byte = (byte << 1) | v;
            nbits += 1;
            if nbits == 8 {
                buf.push(byte);
                byte = 0;
                nbits = 0;
            }
        }
        if nbits > 0 {
            buf.push(byte << (8 - nbits));
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Read a cache produced by [`write_tensor_cache`].
pub fn read_tensor_cache(path: &Path) -> Result<Vec<(SpikeTensor, usize)>> {
    let buf = std::fs::read(path)?;
    let bad = |msg: &str| Error::BadCheckpoint(format!("{}: {msg}", path.display()));
    if buf.len() < 8 || &buf[..4] != CACHE_MAGIC {
        return Err(bad("missing NMT1 magic"));
    }
    let count = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let mut pos = 8;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        if pos + 20 > buf.len() {
            return Err(bad("truncated record header"));
        }
        let mut next_u32 = || {
            let v = u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap());
            pos += 4;
            v as usize
        };
        let label = next_u32();
        let (t, c, h, w) = (next_u32(), next_u32(), next_u32(), next_u32());
        let n = t * c * h * w;
        let nbytes = n.div_ceil(8);
        if pos + nbytes > buf.len() {
            return Err(bad("truncated tensor payload"));
        }
        let mut flat = Vec::with_capacity(n);
        for i in 0..n {
            let b = buf[pos + i / 8];
            flat.push((b >> (7 - i % 8)) & 1);
        }
        pos += nbytes;
        let data = Array4::from_shape_vec((t, c, h, w), flat)
            .map_err(|_| bad("dimension/payload mismatch"))?;
        out.push((SpikeTensor { data }, label));
    }
    Ok(out)
}

// ───────────────────────── tests ─────────────────────────

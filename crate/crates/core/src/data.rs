//! Video sessions: PNG frame directories, synthetic generators and manifests.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered `(3, H, W)` frames in `[0, 1]` for one session.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSession {
    pub session_index: usize,
    pub frames: Vec<Tensor>,
    pub source: String,
}

impl VideoSession {
    pub fn new(session_index: usize, frames: Vec<Tensor>, source: impl Into<String>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::Empty("video session has no frames".into()))?;
        let shape = first.shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Shape(format!("frames must be (3, H, W), got {shape:?}")));
        }
        if let Some(i) = frames.iter().position(|f| f.shape() != shape.as_slice()) {
            return Err(Error::Shape(format!(
                "frame {i} is {:?}, expected {shape:?}",
                frames[i].shape()
            )));
        }
        Ok(Self { session_index, frames, source: source.into() })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames[0].shape()[2]
    }

    pub fn pixel_count(&self) -> usize {
        self.len() * self.height() * self.width()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    MovingGradient,
    BouncingBox,
    NoiseTexture,
}

impl SynthKind {
    pub const ALL: [SynthKind; 3] = [SynthKind::MovingGradient, SynthKind::BouncingBox, SynthKind::NoiseTexture];
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthKind::MovingGradient => "moving_gradient",
            SynthKind::BouncingBox => "bouncing_box",
            SynthKind::NoiseTexture => "noise_texture",
        })
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SynthKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Manifest(format!("unknown synthetic video kind `{s}`")))
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Deterministic synthetic clip; every `(kind, seed)` pair yields the same frames.
pub fn synth_video(kind: SynthKind, frames: usize, height: usize, width: usize, seed: u64) -> Result<VideoSession> {
    if frames == 0 || height == 0 || width == 0 {
        return Err(Error::Empty(format!("synthetic video {frames}x{height}x{width}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let (h, w) = (height as f64, width as f64);
    let mut out = Vec::with_capacity(frames);
    match kind {
        SynthKind::MovingGradient => {
            let phase: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
            let (fx, fy) = (rng.gen_range(0.6..1.2), rng.gen_range(0.2..0.6));
            for t in 0..frames {
                let shift = t as f64 / frames as f64;
                let data = (0..3)
                    .flat_map(|c| (0..height).flat_map(move |y| (0..width).map(move |x| (c, y, x))))
                    .map(|(c, y, x)| {
                        let u = fx * x as f64 / w + fy * y as f64 / h + shift + phase[c];
                        0.5 + 0.4 * (2.0 * PI * u).sin()
                    })
                    .collect();
                out.push(Tensor::from_vec(&[3, height, width], data)?);
            }
        }
        SynthKind::BouncingBox => {
            let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.3));
            let fg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.7..0.95));
            let (bh, bw) = (h * 0.375, w * 0.375);
            let (mut py, mut px) = (rng.gen_range(0.0..h - bh), rng.gen_range(0.0..w - bw));
            let (mut vy, mut vx) = (h * rng.gen_range(0.1..0.2), w * rng.gen_range(0.15..0.25));
            for _ in 0..frames {
                let mut frame = Tensor::zeros(&[3, height, width]);
                for y in 0..height {
                    for x in 0..width {
                        // one-pixel soft edge
                        let (cy, cx) = (y as f64 + 0.5, x as f64 + 0.5);
                        let inside = smoothstep(py - 0.5, py + 0.5, cy)
                            * (1.0 - smoothstep(py + bh - 0.5, py + bh + 0.5, cy))
                            * smoothstep(px - 0.5, px + 0.5, cx)
                            * (1.0 - smoothstep(px + bw - 0.5, px + bw + 0.5, cx));
                        for c in 0..3 {
                            frame.data_mut()[(c * height + y) * width + x] = bg[c] + (fg[c] - bg[c]) * inside;
                        }
                    }
                }
                out.push(frame);
                py += vy;
                px += vx;
                if py < 0.0 || py > h - bh {
                    vy = -vy;
                    py = py.clamp(0.0, h - bh);
                }
                if px < 0.0 || px > w - bw {
                    vx = -vx;
                    px = px.clamp(0.0, w - bw);
                }
            }
        }
        SynthKind::NoiseTexture => {
            // sum of a few random low-frequency plane waves per channel, drifting over time
            struct Wave {
                ky: f64,
                kx: f64,
                phase: f64,
                amp: f64,
                speed: f64,
            }
            let waves: Vec<Vec<Wave>> = (0..3)
                .map(|_| {
                    (0..4)
                        .map(|_| Wave {
                            ky: rng.gen_range(-2..=2) as f64,
                            kx: rng.gen_range(1..=3) as f64,
                            phase: rng.gen_range(0.0..2.0 * PI),
                            amp: rng.gen_range(0.05..0.12),
                            speed: rng.gen_range(0.5..1.5),
                        })
                        .collect()
                })
                .collect();
            for t in 0..frames {
                let tt = t as f64 / frames as f64;
                let mut frame = Tensor::zeros(&[3, height, width]);
                for (c, ws) in waves.iter().enumerate() {
                    for y in 0..height {
                        for x in 0..width {
                            let v: f64 = ws
                                .iter()
                                .map(|wv| {
                                    let arg = 2.0 * PI * (wv.ky * y as f64 / h + wv.kx * x as f64 / w) + wv.phase;
                                    wv.amp * (arg + 2.0 * PI * wv.speed * tt).cos()
                                })
                                .sum();
                            frame.data_mut()[(c * height + y) * width + x] = (0.5 + v).clamp(0.0, 1.0);
                        }
                    }
                }
                out.push(frame);
            }
        }
    }
    VideoSession::new(0, out, format!("synthetic:{kind}:{frames}x{height}x{width}:seed={seed}"))
}

/// Reads `f00001.png`, `f00002.png`, ... from `dir` as RGB frames in `[0, 1]`.
pub fn load_frame_dir(dir: &Path) -> Result<VideoSession> {
    let err = |msg: String| Error::FrameDir { dir: dir.to_path_buf(), msg };
    let mut indices = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(num) = name.strip_prefix('f').and_then(|r| r.strip_suffix(".png")) {
            if num.len() == 5 && num.bytes().all(|b| b.is_ascii_digit()) {
                indices.push(num.parse::<usize>().unwrap());
            }
        }
    }
    if indices.is_empty() {
        return Err(err("no f%05d.png frames".into()));
    }
    indices.sort_unstable();
    for (expected, &found) in (1..).zip(&indices) {
        if found != expected {
            return Err(err(format!("gap at index {expected}")));
        }
    }
    let mut frames = Vec::with_capacity(indices.len());
    let mut dims = None;
    for &i in &indices {
        let path = dir.join(format!("f{i:05}.png"));
        let img = image::open(&path).map_err(|e| err(format!("{}: {e}", path.display())))?.to_rgb8();
        let (w, h) = img.dimensions();
        match dims {
            None => dims = Some((w, h)),
            Some(d) if d != (w, h) => {
                return Err(err(format!("f{i:05}.png is {w}x{h}, earlier frames are {}x{}", d.0, d.1)))
            }
            _ => {}
        }
        let (w, h) = (w as usize, h as usize);
        let mut t = Tensor::zeros(&[3, h, w]);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                t.data_mut()[(c * h + y as usize) * w + x as usize] = px.0[c] as f64 / 255.0;
            }
        }
        frames.push(t);
    }
    VideoSession::new(0, frames, dir.display().to_string())
}

/// Writes `(3, H, W)` frames as 8-bit PNGs named `f%05d.png`, numbered from `first_index`.
pub fn save_frames(dir: &Path, frames: &[Tensor], first_index: usize) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(frames.len());
    for (k, frame) in frames.iter().enumerate() {
        let (c, h, w) = frame.chw()?;
        if c != 3 {
            return Err(Error::Shape(format!("cannot write a {c}-channel frame as RGB")));
        }
        let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            image::Rgb(std::array::from_fn(|ch| {
                let v = frame.data()[(ch * h + y as usize) * w + x as usize];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            }))
        });
        let path = dir.join(format!("f{:05}.png", first_index + k));
        img.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub seed: u64,
}

/// One manifest entry: exactly one of `frames_dir` or `synthetic`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SynthSpec>,
}

impl SessionSource {
    pub fn synthetic(spec: SynthSpec) -> Self {
        Self { frames_dir: None, synthetic: Some(spec) }
    }

    pub fn frames(dir: impl Into<PathBuf>) -> Self {
        Self { frames_dir: Some(dir.into()), synthetic: None }
    }

    pub fn load(&self, session_index: usize) -> Result<VideoSession> {
        let mut video = match (&self.frames_dir, &self.synthetic) {
            (Some(dir), None) => load_frame_dir(dir)?,
            (None, Some(s)) => synth_video(s.kind, s.frames, s.height, s.width, s.seed)?,
            _ => return Err(Error::Manifest("each session needs exactly one of frames_dir or synthetic".into())),
        };
        video.session_index = session_index;
        Ok(video)
    }
}

/// Ordered session list plus optional model/training configuration.
///
/// Configs may be given inline (`[model]`, `[train]`) or as paths
/// (`model_config`, `train_config`) relative to the manifest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_config: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_config: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(rename = "session", default)]
    pub sessions: Vec<SessionSource>,
}

impl SessionManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("manifest serializes")
    }

    /// Reads a manifest and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let mut m = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        m.model_config.as_mut().map(resolve);
        m.train_config.as_mut().map(resolve);
        for s in &mut m.sessions {
            s.frames_dir.as_mut().map(resolve);
        }
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sessions.is_empty() {
            return Err(Error::Manifest("no sessions listed".into()));
        }
        if self.model.is_some() && self.model_config.is_some() {
            return Err(Error::Manifest("give either [model] or model_config, not both".into()));
        }
        if self.train.is_some() && self.train_config.is_some() {
            return Err(Error::Manifest("give either [train] or train_config, not both".into()));
        }
        for (i, s) in self.sessions.iter().enumerate() {
            if s.frames_dir.is_some() == s.synthetic.is_some() {
                return Err(Error::Manifest(format!(
                    "session {} needs exactly one of frames_dir or synthetic",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Model config from the manifest, or the default when none is given.
    pub fn model_config(&self) -> Result<ModelConfig> {
        match (&self.model, &self.model_config) {
            (Some(m), _) => {
                m.validate()?;
                Ok(m.clone())
            }
            (None, Some(p)) => ModelConfig::from_toml(&fs::read_to_string(p)?),
            (None, None) => Ok(ModelConfig::default()),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = match (&self.train, &self.train_config) {
            (Some(t), _) => t.clone(),
            (None, Some(p)) => toml::from_str(&fs::read_to_string(p)?).map_err(|e| Error::Config(e.to_string()))?,
            (None, None) => TrainConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_sessions(&self) -> Result<Vec<VideoSession>> {
        self.sessions.iter().enumerate().map(|(i, s)| s.load(i)).collect()
    }
}

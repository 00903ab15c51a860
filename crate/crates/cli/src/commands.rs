use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::json;
use vidnir_core::compress::{self, check_bits, model_size, BppMode};
use vidnir_core::metrics::{session_metric, MetricKind, MetricsReport};
use vidnir_core::persistence::StoredParams;
use vidnir_core::training::train_session;
use vidnir_core::{save_frames, Checkpoint, Error, Model, SessionManifest, SessionRecord, VideoSession};

use crate::{EvalArgs, FsoArg, GenerateArgs, QuantizeArgs, ReportArgs, TrainArgs};

/// Failure reported as one JSON line on stderr.
#[derive(Debug)]
pub struct CliError {
    kind: &'static str,
    message: String,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    pub fn print(&self) {
        eprintln!("{}", json!({ "error": self.kind, "message": self.message }));
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::UnknownSession { .. } => "session",
            Error::NonFinite(_) => "non-finite",
            Error::Diverged { .. } => "diverged",
            Error::Empty(_) => "empty",
            Error::FrameDir { .. } => "frames",
            Error::Checkpoint(_) => "checkpoint",
            Error::Checksum(_) => "checksum",
            Error::Version { .. } => "version",
            Error::Manifest(_) => "manifest",
            Error::Image(_) => "image",
            Error::Io(_) => "io",
        };
        // keep the report on one line
        Self::new(kind, e.to_string().replace('\n', " "))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Prints to stdout, treating a closed pipe as success.
fn emit(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::new("io", e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn session_row(model: &Model, videos: &[VideoSession], kind: MetricKind) -> Result<Vec<f64>> {
    Ok(videos.iter().enumerate().map(|(s, v)| session_metric(model, s, v, kind)).collect::<vidnir_core::Result<_>>()?)
}

pub fn train(a: TrainArgs) -> Result<()> {
    // resolve configuration: flag (or env) > manifest > default
    let manifest = SessionManifest::load(&a.manifest)?;
    let mut model_cfg = manifest.model_config()?;
    if let Some(c) = a.capacity {
        model_cfg.capacity = c;
    }
    if !a.fso.is_empty() {
        model_cfg.fso = a
            .fso
            .iter()
            .filter_map(|f| match f {
                FsoArg::None => None,
                FsoArg::Placement(p) => Some(p.clone()),
            })
            .collect();
    }
    model_cfg.validate()?;
    let mut train_cfg = manifest.train_config()?;
    if let Some(seed) = a.seed {
        train_cfg.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        // keep the warmup share of the schedule
        train_cfg.warmup_epochs = (train_cfg.warmup_epochs * epochs).checked_div(train_cfg.epochs).unwrap_or(0);
        train_cfg.epochs = epochs;
    }
    if let Some(lr) = a.lr {
        train_cfg.lr = lr;
    }
    train_cfg.validate()?;

    let videos = manifest.load_sessions()?;
    if videos.len() > model_cfg.max_sessions {
        return Err(CliError::new(
            "manifest",
            format!("{} sessions exceed the model's max_sessions of {}", videos.len(), model_cfg.max_sessions),
        ));
    }
    let (h, w) = model_cfg.output_spatial();
    for (i, v) in videos.iter().enumerate() {
        if (v.height(), v.width()) != (h, w) {
            return Err(CliError::new(
                "manifest",
                format!("session {} is {}x{}, the decoder produces {h}x{w}", i + 1, v.height(), v.width()),
            ));
        }
    }
    let stop = a.stop_after.unwrap_or(videos.len()).min(videos.len());

    let (mut model, mut records) = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let mismatch = |msg: String| CliError::new("resume", msg);
            if ckpt.model != model_cfg {
                return Err(mismatch("checkpoint model config differs from the requested one".into()));
            }
            if ckpt.train != train_cfg {
                return Err(mismatch("checkpoint training config differs from the requested one".into()));
            }
            if !matches!(ckpt.params, StoredParams::Dense(_)) {
                return Err(mismatch("cannot resume from a quantized checkpoint".into()));
            }
            if ckpt.sessions.len() > videos.len() {
                return Err(mismatch(format!(
                    "checkpoint holds {} sessions, the manifest lists {}",
                    ckpt.sessions.len(),
                    videos.len()
                )));
            }
            for (i, (r, v)) in ckpt.sessions.iter().zip(&videos).enumerate() {
                if r.source.as_ref() != Some(&manifest.sessions[i]) || r.frames != v.len() {
                    return Err(mismatch(format!("session {} in the checkpoint does not match the manifest", i + 1)));
                }
            }
            (ckpt.to_model()?, ckpt.sessions)
        }
        None => (Model::new(model_cfg, train_cfg.seed)?, Vec::new()),
    };

    let mut log = match &a.metrics_log {
        Some(p) => {
            let file = if a.resume.is_some() {
                OpenOptions::new().create(true).append(true).open(p)?
            } else {
                File::create(p)?
            };
            Some(BufWriter::new(file))
        }
        None => None,
    };

    let start = records.len();
    for s in start..stop {
        let outcome = train_session(&mut model, &videos[s], &train_cfg, |r| {
            if let Some(w) = log.as_mut() {
                let line = serde_json::to_string(r).map_err(|e| Error::Checkpoint(e.to_string()))?;
                writeln!(w, "{line}")?;
            }
            Ok(())
        })?;
        if let Some(w) = log.as_mut() {
            w.flush()?;
        }
        let seen = &videos[..=s];
        records.push(SessionRecord {
            source: Some(manifest.sessions[s].clone()),
            frames: videos[s].len(),
            psnr: session_row(&model, seen, MetricKind::Psnr)?,
            ms_ssim: session_row(&model, seen, MetricKind::MsSsim)?,
        });
        Checkpoint::from_model(&model, &train_cfg, records.clone()).save(&a.out)?;
        emit(&format!(
            "session {}/{}: {} steps, psnr {:.2} dB\n",
            s + 1,
            videos.len(),
            outcome.steps,
            outcome.mean_psnr()
        ))?;
    }
    if start >= stop {
        Checkpoint::from_model(&model, &train_cfg, records).save(&a.out)?;
    }
    Ok(())
}

fn history_report(records: &[SessionRecord], kind: MetricKind, final_row: Option<Vec<f64>>) -> Result<MetricsReport> {
    let mut rows: Vec<Vec<f64>> = records
        .iter()
        .map(|r| match kind {
            MetricKind::Psnr => r.psnr.clone(),
            MetricKind::MsSsim => r.ms_ssim.clone(),
        })
        .collect();
    for (i, r) in rows.iter().enumerate() {
        if r.len() != i + 1 {
            return Err(CliError::new("checkpoint", format!("no {} history for session {}", kind.label(), i + 1)));
        }
    }
    if let Some(last) = final_row {
        *rows.last_mut().ok_or_else(|| CliError::new("checkpoint", "checkpoint holds no sessions"))? = last;
    }
    Ok(MetricsReport::from_matrix(kind, rows)?)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let n = ckpt.session_count();
    if n == 0 {
        return Err(CliError::new("checkpoint", "checkpoint holds no sessions"));
    }
    let videos: Vec<VideoSession> = match &a.manifest {
        Some(p) => {
            let m = SessionManifest::load(p)?;
            if m.sessions.len() < n {
                return Err(CliError::new("manifest", format!("manifest lists {} sessions, checkpoint {n}", m.sessions.len())));
            }
            m.sessions[..n].iter().enumerate().map(|(i, s)| s.load(i)).collect::<vidnir_core::Result<_>>()?
        }
        None => ckpt
            .sessions
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r.source
                    .as_ref()
                    .ok_or_else(|| CliError::new("checkpoint", format!("no recorded source for session {}; pass --manifest", i + 1)))?
                    .load(i)
                    .map_err(CliError::from)
            })
            .collect::<Result<_>>()?,
    };
    for (i, (v, r)) in videos.iter().zip(&ckpt.sessions).enumerate() {
        if v.len() != r.frames {
            return Err(CliError::new("session", format!("session {} has {} frames, checkpoint expects {}", i + 1, v.len(), r.frames)));
        }
    }
    let model = ckpt.to_model()?;
    let psnr = history_report(&ckpt.sessions, MetricKind::Psnr, Some(session_row(&model, &videos, MetricKind::Psnr)?))?;
    let ms = history_report(&ckpt.sessions, MetricKind::MsSsim, Some(session_row(&model, &videos, MetricKind::MsSsim)?))?;
    emit(&format!("{}\n{}", psnr.to_table(), ms.to_table()))?;
    if let Some(out) = &a.out {
        write_json(out, &json!({ "psnr": psnr, "ms_ssim": ms }))?;
    }
    Ok(())
}

fn parse_range(spec: &str, frames: usize) -> Result<(usize, usize)> {
    let bad = || CliError::new("usage", format!("invalid frame range `{spec}` for a {frames}-frame session"));
    let (a, b) = match spec.split_once('-') {
        Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
        None => {
            let v = spec.trim().parse().map_err(|_| bad())?;
            (v, v)
        }
    };
    if a == 0 || a > b || b > frames {
        return Err(bad());
    }
    Ok((a, b))
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let n = ckpt.session_count();
    if a.session == 0 || a.session > n {
        return Err(CliError::new("session", format!("session {} not in 1..={n}", a.session)));
    }
    let s = a.session - 1;
    let t = ckpt.sessions[s].frames;
    let (first, last) = match &a.frames {
        Some(spec) => parse_range(spec, t)?,
        None => (1, t),
    };
    let model = ckpt.to_model()?;
    let frames = (first - 1..last).map(|i| model.decode_frame(s, i, t)).collect::<vidnir_core::Result<Vec<_>>>()?;
    let paths = save_frames(&a.out, &frames, first)?;
    emit(&format!("wrote {} frames to {}\n", paths.len(), a.out.display()))?;
    Ok(())
}

pub fn quantize(a: QuantizeArgs) -> Result<()> {
    check_bits(a.bits)?;
    let mut ckpt = Checkpoint::load(&a.checkpoint)?;
    let dense = match &ckpt.params {
        StoredParams::Dense(p) => p.clone(),
        StoredParams::Quantized(q) => {
            return Err(CliError::new("checkpoint", format!("checkpoint is already quantized to {} bits", q.bits)))
        }
    };
    ckpt.params = StoredParams::Quantized(compress::quantize(&dense, a.bits)?);
    ckpt.save(&a.out)?;
    emit(&format!("wrote {}-bit checkpoint to {}\n", a.bits, a.out.display()))?;
    Ok(())
}

#[derive(Serialize)]
struct TensorCapacity {
    name: String,
    size: usize,
    selected: Vec<usize>,
    cumulative_density: f64,
}

pub fn report(a: ReportArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let bits = match a.bits {
        Some(b) => {
            check_bits(b)?;
            b
        }
        None => ckpt.params.quant_bits().unwrap_or(32),
    };
    let model = ckpt.to_model()?;
    let n = ckpt.session_count();
    let frames = ckpt.frame_counts();

    let mut out = String::new();
    let total = vidnir_core::model::total_parameters(model.config());
    out += &format!("sessions: {n}, frames: {frames:?}, parameters (trunk + one head): {total}\n\n");

    out += "size\n";
    let mut sizes = Vec::new();
    for b in compress::SUPPORTED_BITS {
        let exact = model_size(&model, b, &frames, BppMode::Exact)?;
        let padded = model_size(&model, b, &frames, BppMode::Padded)?;
        let mark = if b == bits { " *" } else { "" };
        out += &format!(
            "  {b:>2}-bit: {:.4} bpp ({} weight + {} mask + {} head bits, {:.4} bpp byte-padded){mark}\n",
            exact.bpp(),
            exact.weight_bits,
            exact.mask_bits,
            exact.head_bits,
            padded.bpp()
        );
        sizes.push(json!({ "bits": b, "bpp": exact.bpp(), "bpp_padded": padded.bpp(), "breakdown": exact }));
    }

    out += "\ncapacity (selected weights per session, cumulative density)\n";
    let mut capacity = Vec::new();
    for (i, spec) in model.layout().specs.iter().enumerate() {
        let selected = (0..n).map(|s| Ok(model.masks.session(s)?[i].count_ones())).collect::<vidnir_core::Result<Vec<_>>>()?;
        let cumulative_density = model.masks.cumulative()[i].density();
        out += &format!("  {:<22} {:>8} {:?} {:.3}\n", spec.name, spec.len(), selected, cumulative_density);
        capacity.push(TensorCapacity { name: spec.name.clone(), size: spec.len(), selected, cumulative_density });
    }
    let reuse = (0..n).map(|s| model.masks.reuse_fraction(s)).collect::<vidnir_core::Result<Vec<_>>>()?;
    out += &format!("  reuse of earlier sessions' weights: {}\n", reuse.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(" "));

    let transfer = if n > 0 { Some(history_report(&ckpt.sessions, MetricKind::Psnr, None)?) } else { None };
    if let Some(t) = &transfer {
        out += "\ntransfer matrix recorded during training\n";
        out += &t.to_table();
    }
    emit(&out)?;
    if let Some(path) = &a.out {
        write_json(
            path,
            &json!({
                "sessions": n,
                "frames": frames,
                "parameters": total,
                "bits": bits,
                "size": sizes,
                "capacity": capacity,
                "reuse": reuse,
                "transfer": transfer,
            }),
        )?;
    }
    Ok(())
}

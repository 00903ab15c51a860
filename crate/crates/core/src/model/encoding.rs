use std::f64::consts::PI;

use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// Maps 0-based indices into (0, 1]: `t -> (t+1)/T`, `s -> (s+1)/S_max`.
pub fn normalize_indices(session: usize, frame: usize, frames: usize, max_sessions: usize) -> Result<(f64, f64)> {
    if frames == 0 || frame >= frames {
        return Err(Error::Shape(format!("frame {frame} outside a {frames}-frame session")));
    }
    if max_sessions == 0 || session >= max_sessions {
        return Err(Error::UnknownSession { session, available: max_sessions });
    }
    Ok(((session + 1) as f64 / max_sessions as f64, (frame + 1) as f64 / frames as f64))
}

/// `[sin(b^j pi s), cos(b^j pi s)]_{j<L} ++ [sin(b^j pi t), cos(b^j pi t)]_{j<L}`.
pub fn positional_encode(s_norm: f64, t_norm: f64, config: &ModelConfig) -> Result<Vec<f64>> {
    if !s_norm.is_finite() || !t_norm.is_finite() {
        return Err(Error::NonFinite(format!("positional encoding input ({s_norm}, {t_norm})")));
    }
    let mut out = Vec::with_capacity(config.embed_dim());
    for v in [s_norm, t_norm] {
        for j in 0..config.embed_levels {
            let arg = config.embed_base.powi(j as i32) * PI * v;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    Ok(out)
}

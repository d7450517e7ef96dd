use ndarray::Array2;

use crate::error::{Error, Result};

pub const ROW_SUM_TOL: f64 = 1e-5;

/// Phonetic posteriorgram: `T x P`, each row a distribution over phoneme classes.
#[derive(Clone, Debug, PartialEq)]
pub struct PpgSequence {
    frames: Array2<f64>,
    frame_rate_hz: f64,
}

impl PpgSequence {
    pub fn new(frames: Array2<f64>, frame_rate_hz: f64) -> Result<Self> {
        if frames.nrows() == 0 || frames.ncols() == 0 {
            return Err(Error::Shape("PPG needs at least one frame and one class".into()));
        }
        if !(frame_rate_hz > 0.0 && frame_rate_hz.is_finite()) {
            return Err(Error::InvalidArgument(format!("frame rate {frame_rate_hz}")));
        }
        for (t, row) in frames.rows().into_iter().enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::InvalidArgument(format!("PPG frame {t} has entries outside [0,1]")));
            }
            let s: f64 = row.sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidArgument(format!("PPG frame {t} sums to {s}")));
            }
        }
        Ok(Self { frames, frame_rate_hz })
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn classes(&self) -> usize {
        self.frames.ncols()
    }

    /// Resamples onto `n` frames spanning the same duration.
    pub fn aligned_to(&self, n: usize) -> Result<PpgSequence> {
        let frames = super::align_time(&self.frames, n)?;
        let rate = self.frame_rate_hz * n as f64 / self.len() as f64;
        Ok(PpgSequence { frames, frame_rate_hz: rate })
    }
}

/// Facial expression parameters, `N x D_x`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionSequence {
    frames: Array2<f64>,
    frame_rate_hz: f64,
}

impl ExpressionSequence {
    pub const DEFAULT_RATE_HZ: f64 = 25.0;

    pub fn new(frames: Array2<f64>, frame_rate_hz: f64) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::Shape("expression sequence needs at least one frame".into()));
        }
        if !(frame_rate_hz > 0.0 && frame_rate_hz.is_finite()) {
            return Err(Error::InvalidArgument(format!("frame rate {frame_rate_hz}")));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("expression frames".into()));
        }
        Ok(Self { frames, frame_rate_hz })
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    pub fn into_frames(self) -> Array2<f64> {
        self.frames
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dims(&self) -> usize {
        self.frames.ncols()
    }
}

use crate::tensor::{Scalar, Tensor};

use super::{AttackClass, CanMessage, DataError, LabelSpace, FEATURES};

/// Added to every identifier so ids never collide with payload bytes.
pub const ID_OFFSET: u16 = 256;
/// Fill value for payload slots beyond the DLC.
pub const PAD_VALUE: u16 = 2304;
/// Divisor mapping encoded integers into `[0, 1]` before projection.
pub const FEATURE_SCALE: f64 = 2304.0;

/// `[id + 256, byte0, ..., byte7]` with unused slots set to 2304.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EncodedMessage(pub [u16; FEATURES]);

pub fn encode_message(m: &CanMessage) -> Result<EncodedMessage, DataError> {
    if m.is_extended() {
        return Err(DataError::ExtendedId(m.can_id));
    }
    let mut f = [PAD_VALUE; FEATURES];
    f[0] = m.can_id as u16 + ID_OFFSET;
    for (slot, &b) in f[1..].iter_mut().zip(m.payload()) {
        *slot = b as u16;
    }
    Ok(EncodedMessage(f))
}

/// `W` consecutive encoded messages with one class label.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub rows: Vec<EncodedMessage>,
    pub label: usize,
    /// (file id, index of the first message within that file)
    pub origin: (u32, usize),
}

impl WindowSample {
    pub fn window(&self) -> usize {
        self.rows.len()
    }
}

/// Normal iff no message is attack-flagged; otherwise the most frequent
/// attack class, ties going to the class seen first.
pub fn label_window(messages: &[CanMessage]) -> AttackClass {
    let mut counts: Vec<(AttackClass, usize)> = Vec::new();
    for m in messages {
        let c = m.attack_class();
        if c == AttackClass::Normal {
            continue;
        }
        match counts.iter_mut().find(|(k, _)| *k == c) {
            Some((_, n)) => *n += 1,
            None => counts.push((c, 1)),
        }
    }
    // first maximum in insertion (= first occurrence) order
    let mut best: Option<(AttackClass, usize)> = None;
    for (c, n) in counts {
        if best.is_none_or(|(_, bn)| n > bn) {
            best = Some((c, n));
        }
    }
    best.map_or(AttackClass::Normal, |(c, _)| c)
}

/// Sliding windows over `messages`: window `i` covers
/// `[i·stride, i·stride + window)`.
pub fn make_windows(
    messages: &[CanMessage],
    window: usize,
    stride: usize,
    space: LabelSpace,
    file_id: u32,
) -> Result<Vec<WindowSample>, DataError> {
    if window == 0 || stride == 0 {
        return Err(DataError::Config("window and stride must be positive".into()));
    }
    let n = messages.len();
    if n < window {
        return Err(DataError::TooFewMessages { n, window });
    }
    let encoded = messages.iter().map(encode_message).collect::<Result<Vec<_>, _>>()?;
    let count = (n - window) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let start = i * stride;
        let span = &messages[start..start + window];
        let class = label_window(span);
        let label = space
            .index_of(class)
            .ok_or(DataError::ClassNotInSpace { class, space })?;
        out.push(WindowSample {
            rows: encoded[start..start + window].to_vec(),
            label,
            origin: (file_id, start),
        });
    }
    Ok(out)
}

/// Fractions of a stream assigned to train / validation / test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self, DataError> {
        let r = Self { train, val, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) || self.train <= 0.0 {
            return Err(DataError::Config(format!("invalid split ratios {parts:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DataError::Config(format!("split ratios {parts:?} do not sum to 1")));
        }
        Ok(())
    }
}

impl std::str::FromStr for SplitRatios {
    type Err = String;

    /// `train,val,test`, e.g. `0.7,0.15,0.15`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split([',', '/'])
            .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
            .collect::<Result<_, _>>()?;
        match parts.as_slice() {
            &[a, b, c] => SplitRatios::new(a, b, c).map_err(|e| e.to_string()),
            _ => Err(format!("expected three ratios, got `{s}`")),
        }
    }
}

/// Contiguous segments of one stream.
#[derive(Debug, Clone, Copy)]
pub struct StreamSplit<'a> {
    pub train: &'a [CanMessage],
    pub val: &'a [CanMessage],
    pub test: &'a [CanMessage],
}

/// Cuts the stream before windowing so no window spans two splits.
/// Segments with a zero ratio are empty; any other segment must hold at
/// least `window` messages.
pub fn split_stream(messages: &[CanMessage], ratios: SplitRatios, window: usize) -> Result<StreamSplit<'_>, DataError> {
    ratios.validate()?;
    let n = messages.len();
    let n_train = ((n as f64) * ratios.train).round() as usize;
    let n_train = n_train.min(n);
    let n_val = if ratios.val == 0.0 {
        0
    } else if ratios.test == 0.0 {
        n - n_train
    } else {
        (((n as f64) * ratios.val).round() as usize).min(n - n_train)
    };
    let n_test = if ratios.test == 0.0 { 0 } else { n - n_train - n_val };
    let (train, rest) = messages.split_at(n_train);
    let (val, rest) = rest.split_at(n_val);
    let test = &rest[..n_test];
    for (segment, ratio, slice) in [
        ("train", ratios.train, train),
        ("validation", ratios.val, val),
        ("test", ratios.test, test),
    ] {
        if ratio > 0.0 && slice.len() < window {
            return Err(DataError::ShortSegment {
                segment,
                len: slice.len(),
                window,
            });
        }
    }
    Ok(StreamSplit { train, val, test })
}

/// Window counts per class index.
pub fn class_frequencies(windows: &[WindowSample], n_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; n_classes];
    for w in windows {
        counts[w.label] += 1;
    }
    counts
}

/// Stacks the selected windows into a `[B × W × 9]` tensor scaled by
/// [`FEATURE_SCALE`].
pub fn batch_features<T: Scalar>(windows: &[WindowSample], indices: &[usize]) -> Tensor<T> {
    let w = windows[indices[0]].window();
    let scale = T::from_f64(FEATURE_SCALE);
    let mut data = Vec::with_capacity(indices.len() * w * FEATURES);
    for &i in indices {
        let sample = &windows[i];
        assert_eq!(sample.window(), w, "mixed window sizes in one batch");
        for row in &sample.rows {
            data.extend(row.0.iter().map(|&v| T::from_f64(v as f64) / scale));
        }
    }
    Tensor::new(vec![indices.len(), w, FEATURES], data).expect("consistent batch shape")
}

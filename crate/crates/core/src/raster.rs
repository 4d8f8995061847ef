//! Image time-series types and the `RTS0` on-disk container.
//!
//! An RTS file is laid out as:
//!
//! ```text
//! bytes 0..4     magic "RTS0"
//! bytes 4..8     u32 little-endian header length N
//! bytes 8..8+N   UTF-8 JSON header {shape, dtype, order, timestamps, pol_names[, units]}
//! then           T*C*H*W little-endian f32 values in C (TCHW) order
//! ```
//!
//! Truth masks, metric maps and forecast planes reuse the same container with
//! a `[1, C, H, W]` shape.

use std::fs;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use ndarray::{s, Array2, Array3, Array4, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

pub const RTS_MAGIC: &[u8; 4] = b"RTS0";
pub const RTS_DTYPE: &str = "f32le";
pub const RTS_ORDER: &str = "TCHW";

/// Number of polarization channels carried by every stack.
pub const NUM_POLS: usize = 2;

pub fn default_pol_names() -> Vec<String> {
    vec!["VV".to_string(), "VH".to_string()]
}

/// JSON header of an RTS file. Field order here is the serialization order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtsHeader {
    pub shape: [usize; 4],
    pub dtype: String,
    pub order: String,
    pub timestamps: Vec<String>,
    pub pol_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<String>,
}

impl RtsHeader {
    pub fn new(shape: [usize; 4], timestamps: Vec<String>, pol_names: Vec<String>) -> Self {
        Self {
            shape,
            dtype: RTS_DTYPE.to_string(),
            order: RTS_ORDER.to_string(),
            timestamps,
            pol_names,
            units: None,
        }
    }

    pub fn num_values(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Serializes a header and payload into RTS bytes.
pub fn encode_rts(header: &RtsHeader, data: ArrayView4<f32>) -> Result<Vec<u8>> {
    if data.shape() != header.shape {
        bail!(
            Shape,
            "payload shape {:?} does not match header shape {:?}",
            data.shape(),
            header.shape
        );
    }
    let json = serde_json::to_vec(header)?;
    let header_len = u32::try_from(json.len())
        .map_err(|_| Error::Format("header longer than u32::MAX".into()))?;
    let mut out = Vec::with_capacity(8 + json.len() + 4 * data.len());
    out.extend_from_slice(RTS_MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    // iter() walks logical (C) order regardless of memory layout
    for v in data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses RTS bytes. Checks magic, dtype, order and exact payload length.
pub fn decode_rts(bytes: &[u8]) -> Result<(RtsHeader, Array4<f32>)> {
    if bytes.len() < 8 {
        bail!(Format, "file too short for RTS preamble ({} bytes)", bytes.len());
    }
    if &bytes[0..4] != RTS_MAGIC {
        bail!(Format, "bad magic {:?}", &bytes[0..4]);
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header_end = 8usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Format("declared header extends past end of file".into()))?;
    let header: RtsHeader = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| Error::Format(format!("invalid header JSON: {e}")))?;
    if header.dtype != RTS_DTYPE {
        bail!(Format, "unsupported dtype {:?}", header.dtype);
    }
    if header.order != RTS_ORDER {
        bail!(Format, "unsupported order {:?}", header.order);
    }
    let expected = header
        .shape
        .iter()
        .try_fold(4usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("shape overflows".into()))?;
    let payload = &bytes[header_end..];
    if payload.len() != expected {
        bail!(
            Format,
            "payload is {} bytes, header shape {:?} requires {}",
            payload.len(),
            header.shape,
            expected
        );
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let data = Array4::from_shape_vec(header.shape, values)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok((header, data))
}

pub fn write_container(path: &Path, header: &RtsHeader, data: ArrayView4<f32>) -> Result<()> {
    let bytes = encode_rts(header, data)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<(RtsHeader, Array4<f32>)> {
    let bytes = crate::error::read_file(path)?;
    decode_rts(&bytes)
}

/// How strictly pixel values are checked when a stack is built or read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueCheck {
    /// Every value must lie in the open interval (0, 1).
    OpenUnit,
    /// Any finite value is accepted (pre-clip data).
    Finite,
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return d.and_hms_opt(0, 0, 0);
    }
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .ok()
        .or_else(|| chrono::DateTime::parse_from_rfc3339(s).ok().map(|d| d.naive_utc()))
}

/// A coregistered dual-polarization backscatter time series, `T x C x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterStack {
    data: Array4<f32>,
    timestamps: Vec<String>,
    pol_names: Vec<String>,
}

impl RasterStack {
    pub fn new(data: Array4<f32>, timestamps: Vec<String>, pol_names: Vec<String>) -> Result<Self> {
        Self::with_check(data, timestamps, pol_names, ValueCheck::OpenUnit)
    }

    pub fn with_check(
        data: Array4<f32>,
        timestamps: Vec<String>,
        pol_names: Vec<String>,
        check: ValueCheck,
    ) -> Result<Self> {
        let (t, c, h, w) = data.dim();
        if t < 2 {
            bail!(Validation, "stack needs at least 2 acquisitions, got {t}");
        }
        if c != NUM_POLS {
            bail!(Validation, "stack needs {NUM_POLS} polarizations, got {c}");
        }
        if h == 0 || w == 0 {
            bail!(Validation, "empty spatial extent {h}x{w}");
        }
        if timestamps.len() != t {
            bail!(Validation, "{} timestamps for {t} acquisitions", timestamps.len());
        }
        if pol_names.len() != c {
            bail!(Validation, "{} polarization names for {c} channels", pol_names.len());
        }
        let mut prev: Option<NaiveDateTime> = None;
        for ts in &timestamps {
            let parsed = parse_timestamp(ts)
                .ok_or_else(|| Error::Validation(format!("unparseable timestamp {ts:?}")))?;
            if let Some(p) = prev {
                if parsed <= p {
                    bail!(Validation, "timestamps not strictly increasing at {ts:?}");
                }
            }
            prev = Some(parsed);
        }
        check_values(data.iter().copied(), check)?;
        Ok(Self { data: data.as_standard_layout().into_owned(), timestamps, pol_names })
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f32> {
        self.data
    }

    pub fn timestamps(&self) -> &[String] {
        &self.timestamps
    }

    pub fn pol_names(&self) -> &[String] {
        &self.pol_names
    }

    pub fn num_steps(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().2
    }

    pub fn width(&self) -> usize {
        self.data.dim().3
    }

    /// Frames `range` as a new stack (at least two frames).
    pub fn frames(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.end > self.num_steps() || range.len() < 2 {
            bail!(Bounds, "frame range {range:?} invalid for {} frames", self.num_steps());
        }
        Ok(Self {
            data: self.data.slice(s![range.clone(), .., .., ..]).to_owned(),
            timestamps: self.timestamps[range].to_vec(),
            pol_names: self.pol_names.clone(),
        })
    }

    /// A single frame as a `C x H x W` array.
    pub fn frame(&self, index: usize) -> Result<Array3<f32>> {
        if index >= self.num_steps() {
            bail!(Bounds, "frame {index} out of range for {} frames", self.num_steps());
        }
        Ok(self.data.slice(s![index, .., .., ..]).to_owned())
    }

    /// Copies out a `size x size` spatial window starting at `(row0, col0)`.
    pub fn slice_window(&self, row0: usize, col0: usize, size: usize) -> Result<Self> {
        let (h, w) = (self.height(), self.width());
        if size == 0 || row0 + size > h || col0 + size > w {
            bail!(
                Bounds,
                "window at ({row0},{col0}) of size {size} exceeds {h}x{w} image"
            );
        }
        Ok(Self {
            data: self
                .data
                .slice(s![.., .., row0..row0 + size, col0..col0 + size])
                .to_owned(),
            timestamps: self.timestamps.clone(),
            pol_names: self.pol_names.clone(),
        })
    }

    /// Same metadata, new pixel values (e.g. after despeckling).
    pub fn with_data(&self, data: Array4<f32>, check: ValueCheck) -> Result<Self> {
        if data.dim() != self.data.dim() {
            bail!(Shape, "replacement data {:?} != {:?}", data.dim(), self.data.dim());
        }
        Self::with_check(data, self.timestamps.clone(), self.pol_names.clone(), check)
    }

    fn header(&self) -> RtsHeader {
        let (t, c, h, w) = self.data.dim();
        RtsHeader::new([t, c, h, w], self.timestamps.clone(), self.pol_names.clone())
    }
}

fn check_values(values: impl Iterator<Item = f32>, check: ValueCheck) -> Result<()> {
    for (i, v) in values.enumerate() {
        let ok = match check {
            ValueCheck::OpenUnit => v > 0.0 && v < 1.0,
            ValueCheck::Finite => v.is_finite(),
        };
        if !ok {
            bail!(Validation, "value {v} at flat index {i} violates {check:?}");
        }
    }
    Ok(())
}

/// Writes a stack as RTS. Values are validated against (0, 1).
pub fn write_rts(stack: &RasterStack, path: &Path) -> Result<()> {
    write_rts_checked(stack, path, ValueCheck::OpenUnit)
}

pub fn write_rts_checked(stack: &RasterStack, path: &Path, check: ValueCheck) -> Result<()> {
    check_values(stack.data.iter().copied(), check)?;
    write_container(path, &stack.header(), stack.data.view())
}

/// Reads a stack, rejecting anything outside (0, 1).
pub fn read_rts(path: &Path) -> Result<RasterStack> {
    read_rts_checked(path, ValueCheck::OpenUnit)
}

pub fn read_rts_checked(path: &Path, check: ValueCheck) -> Result<RasterStack> {
    let (header, data) = read_container(path)?;
    RasterStack::with_check(data, header.timestamps, header.pol_names, check)
        .map_err(|e| match e {
            Error::Validation(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
}

/// Per-pixel Gaussian forecast in logit space, `C x H x W` each.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionEstimate {
    pub mu: Array3<f64>,
    pub sigma: Array3<f64>,
}

impl DistributionEstimate {
    pub fn new(mu: Array3<f64>, sigma: Array3<f64>) -> Result<Self> {
        if mu.dim() != sigma.dim() {
            bail!(Shape, "mu {:?} and sigma {:?} differ", mu.dim(), sigma.dim());
        }
        if let Some(v) = mu.iter().find(|v| !v.is_finite()) {
            bail!(Numeric, "non-finite mean {v}");
        }
        if let Some(v) = sigma.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            bail!(Numeric, "non-positive or non-finite sigma {v}");
        }
        Ok(Self { mu, sigma })
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.mu.dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricUnits {
    StandardDeviations,
    /// Raw `|log10|` ratio; multiply by 10 for decibels.
    Decibels,
}

impl MetricUnits {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricUnits::StandardDeviations => "standard_deviations",
            MetricUnits::Decibels => "decibels",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard_deviations" => Ok(MetricUnits::StandardDeviations),
            "decibels" => Ok(MetricUnits::Decibels),
            other => bail!(Format, "unknown metric units {other:?}"),
        }
    }
}

/// Nonnegative per-pixel disturbance score.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceMap {
    values: Array2<f64>,
    units: MetricUnits,
}

impl DisturbanceMap {
    pub fn new(values: Array2<f64>, units: MetricUnits) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            bail!(Numeric, "disturbance value {v} is negative or non-finite");
        }
        Ok(Self { values, units })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn units(&self) -> MetricUnits {
        self.units
    }
}

/// Result of thresholding a metric with strict `>`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryDelineation {
    pub mask: Array2<bool>,
    pub tau: f64,
    pub units: MetricUnits,
}

fn plane_header(c: usize, h: usize, w: usize, units: Option<&str>) -> RtsHeader {
    let mut header = RtsHeader::new([1, c, h, w], Vec::new(), Vec::new());
    header.units = units.map(str::to_string);
    header
}

fn read_plane(path: &Path) -> Result<(RtsHeader, Array3<f32>)> {
    let (header, data) = read_container(path)?;
    if header.shape[0] != 1 {
        bail!(Format, "{}: expected a single-plane file, shape {:?}", path.display(), header.shape);
    }
    if let Some(v) = data.iter().find(|v| !v.is_finite()) {
        bail!(Format, "{}: non-finite value {v}", path.display());
    }
    let plane = data.index_axis_move(ndarray::Axis(0), 0);
    Ok((header, plane))
}

/// Truth masks are stored as `[1,1,H,W]` with values 0.0 / 1.0.
pub fn write_mask(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    let data = mask.mapv(|b| if b { 1.0f32 } else { 0.0 }).into_shape_with_order((1, 1, h, w)).unwrap();
    write_container(path, &plane_header(1, h, w, None), data.view())
}

pub fn read_mask(path: &Path) -> Result<Array2<bool>> {
    let (header, plane) = read_plane(path)?;
    if header.shape[1] != 1 {
        bail!(Format, "{}: mask must have one channel", path.display());
    }
    let mut mask = Array2::from_elem((header.shape[2], header.shape[3]), false);
    for ((i, j), m) in mask.indexed_iter_mut() {
        let v = plane[[0, i, j]];
        if v == 1.0 {
            *m = true;
        } else if v != 0.0 {
            bail!(Format, "{}: mask value {v} is not 0 or 1", path.display());
        }
    }
    Ok(mask)
}

pub fn write_metric(path: &Path, metric: &DisturbanceMap) -> Result<()> {
    let (h, w) = metric.values.dim();
    let data = metric
        .values
        .mapv(|v| v as f32)
        .into_shape_with_order((1, 1, h, w))
        .unwrap();
    write_container(path, &plane_header(1, h, w, Some(metric.units.as_str())), data.view())
}

pub fn read_metric(path: &Path) -> Result<DisturbanceMap> {
    let (header, plane) = read_plane(path)?;
    let units = header
        .units
        .as_deref()
        .ok_or_else(|| Error::Format(format!("{}: metric file lacks units", path.display())))
        .and_then(MetricUnits::parse)?;
    let values = plane.index_axis_move(ndarray::Axis(0), 0).mapv(f64::from);
    DisturbanceMap::new(values, units)
}

/// Stores mean and standard deviation planes as two `[1,C,H,W]` files.
pub fn write_estimate(mu_path: &Path, sigma_path: &Path, est: &DistributionEstimate) -> Result<()> {
    let (c, h, w) = est.dim();
    let pols = default_pol_names();
    for (path, plane) in [(mu_path, &est.mu), (sigma_path, &est.sigma)] {
        let mut header = plane_header(c, h, w, Some("logit"));
        header.pol_names = pols.clone();
        let data = plane.mapv(|v| v as f32).insert_axis(ndarray::Axis(0));
        write_container(path, &header, data.view())?;
    }
    Ok(())
}

pub fn read_estimate(mu_path: &Path, sigma_path: &Path) -> Result<DistributionEstimate> {
    let (_, mu) = read_plane(mu_path)?;
    let (_, sigma) = read_plane(sigma_path)?;
    DistributionEstimate::new(mu.mapv(f64::from), sigma.mapv(f64::from))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn stamps(t: usize) -> Vec<String> {
        (0..t).map(|i| format!("2021-01-{:02}", i + 1)).collect()
    }

    fn sample_stack(t: usize, h: usize, w: usize) -> RasterStack {
        let n = t * 2 * h * w;
        let data = Array::from_shape_fn((t, 2, h, w), |(a, b, c, d)| {
            let k = ((a * 2 + b) * h + c) * w + d;
            0.01 + 0.98 * (k as f32 / n as f32)
        });
        RasterStack::new(data, stamps(t), default_pol_names()).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let stack = sample_stack(3, 16, 16);
        let a = dir.path().join("a.rts");
        let b = dir.path().join("b.rts");
        write_rts(&stack, &a).unwrap();
        write_rts(&stack, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let back = read_rts(&a).unwrap();
        let same_bits = back
            .data()
            .iter()
            .zip(stack.data().iter())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same_bits);
        assert_eq!(back, stack);
    }

    #[test]
    fn out_of_range_value_is_rejected() {
        let mut data = sample_stack(2, 4, 4).into_data();
        data[[1, 0, 2, 2]] = 1.5;
        assert!(matches!(
            RasterStack::new(data.clone(), stamps(2), default_pol_names()),
            Err(Error::Validation(_))
        ));
        let raw = RasterStack::with_check(data, stamps(2), default_pol_names(), ValueCheck::Finite)
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = write_rts(&raw, &dir.path().join("x.rts")).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn hand_built_file_parses() {
        let header = br#"{"shape":[2,2,8,8],"dtype":"f32le","order":"TCHW","timestamps":["2020-01-01","2020-01-13"],"pol_names":["VV","VH"]}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RTS0");
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(header);
        for k in 0..(2 * 2 * 8 * 8) {
            bytes.extend_from_slice(&(0.25f32 + k as f32 / 1024.0).to_le_bytes());
        }
        assert_eq!(bytes.len(), 8 + header.len() + 2 * 2 * 8 * 8 * 4);
        let (h, data) = decode_rts(&bytes).unwrap();
        assert_eq!(h.shape, [2, 2, 8, 8]);
        assert_eq!(data[[0, 0, 0, 1]], 0.25 + 1.0 / 1024.0);
        assert_eq!(data[[1, 1, 7, 7]], 0.25 + 255.0 / 1024.0);
    }

    #[test]
    fn truncated_payload_and_bad_magic_fail() {
        let stack = sample_stack(2, 4, 4);
        let bytes = encode_rts(&stack.header(), stack.data().view()).unwrap();
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_rts(truncated), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[3] = b'1';
        assert!(matches!(decode_rts(&bad), Err(Error::Format(_))));
        let mut long_header = bytes.clone();
        long_header[4..8].copy_from_slice(&(u32::MAX).to_le_bytes());
        assert!(matches!(decode_rts(&long_header), Err(Error::Format(_))));
    }

    #[test]
    fn header_shape_mismatch_is_format_error() {
        let stack = sample_stack(2, 4, 4);
        let mut header = stack.header();
        header.shape = [2, 2, 4, 5];
        let mut bytes = encode_rts(&stack.header(), stack.data().view()).unwrap();
        let json = serde_json::to_vec(&header).unwrap();
        let payload = bytes.split_off(8 + serde_json::to_vec(&stack.header()).unwrap().len());
        let mut forged = Vec::new();
        forged.extend_from_slice(b"RTS0");
        forged.extend_from_slice(&(json.len() as u32).to_le_bytes());
        forged.extend_from_slice(&json);
        forged.extend_from_slice(&payload);
        assert!(matches!(decode_rts(&forged), Err(Error::Format(_))));
    }

    #[test]
    fn slice_window_matches_source_indices() {
        let stack = sample_stack(3, 16, 16);
        let whole = stack.slice_window(0, 0, 16).unwrap();
        assert_eq!(whole, stack);
        assert!(matches!(stack.slice_window(8, 8, 16), Err(Error::Bounds(_))));
        let win = stack.slice_window(3, 5, 7).unwrap();
        for ((t, c, i, j), v) in win.data().indexed_iter() {
            assert_eq!(*v, stack.data()[[t, c, i + 3, j + 5]]);
        }
        assert_eq!(win.timestamps(), stack.timestamps());
    }

    #[test]
    fn timestamps_must_increase() {
        let data = sample_stack(2, 2, 2).into_data();
        let ts = vec!["2021-01-02".to_string(), "2021-01-01".to_string()];
        assert!(RasterStack::new(data, ts, default_pol_names()).is_err());
    }

    #[test]
    fn mask_and_metric_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = Array2::from_shape_fn((5, 4), |(i, j)| (i + j) % 3 == 0);
        write_mask(&dir.path().join("m.rts"), &mask).unwrap();
        assert_eq!(read_mask(&dir.path().join("m.rts")).unwrap(), mask);

        let metric = DisturbanceMap::new(
            Array2::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as f64 * 0.5),
            MetricUnits::Decibels,
        )
        .unwrap();
        write_metric(&dir.path().join("d.rts"), &metric).unwrap();
        assert_eq!(read_metric(&dir.path().join("d.rts")).unwrap(), metric);
    }
}

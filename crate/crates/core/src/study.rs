//! Studies, views, parameter maps and labels.
//!
//! Arrays are channel-major `[C, H, W]` `f32`. Parameter maps are kept in
//! normalized units; [`ParamRanges`] carries the physical interval for each
//! channel so values can be converted back for display and export.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SofaError};

pub const NUM_VIEWS: usize = 6;
pub const NUM_PARAM_CHANNELS: usize = 4;
pub const DEFAULT_RESOLUTION: usize = 256;

/// One of the six fixed rendering directions of the atrium.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewId {
    Anterior,
    Posterior,
    LeftLateral,
    RightLateral,
    Superior,
    Inferior,
}

impl ViewId {
    pub const ALL: [ViewId; NUM_VIEWS] = [
        ViewId::Anterior,
        ViewId::Posterior,
        ViewId::LeftLateral,
        ViewId::RightLateral,
        ViewId::Superior,
        ViewId::Inferior,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ViewId::Anterior => "anterior",
            ViewId::Posterior => "posterior",
            ViewId::LeftLateral => "left_lateral",
            ViewId::RightLateral => "right_lateral",
            ViewId::Superior => "superior",
            ViewId::Inferior => "inferior",
        }
    }
}

impl fmt::Display for ViewId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ViewId {
    type Err = SofaError;

    fn from_str(s: &str) -> Result<Self> {
        ViewId::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| SofaError::InvalidValue(format!("unknown view `{s}`")))
    }
}

/// Procedural channel order inside a [`ParamMaps`] tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamChannel {
    Duration,
    Force,
    Temperature,
    Power,
}

impl ParamChannel {
    pub const ALL: [ParamChannel; NUM_PARAM_CHANNELS] = [
        ParamChannel::Duration,
        ParamChannel::Force,
        ParamChannel::Temperature,
        ParamChannel::Power,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamChannel::Duration => "duration",
            ParamChannel::Force => "force",
            ParamChannel::Temperature => "temperature",
            ParamChannel::Power => "power",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            ParamChannel::Duration => "s",
            ParamChannel::Force => "g",
            ParamChannel::Temperature => "degC",
            ParamChannel::Power => "W",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub lo: f32,
    pub hi: f32,
}

impl Range {
    pub const fn new(lo: f32, hi: f32) -> Self {
        Self { lo, hi }
    }

    pub fn is_valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi
    }

    pub fn span(&self) -> f32 {
        self.hi - self.lo
    }
}

/// Physical interval of each procedural channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRanges {
    pub duration: Range,
    pub force: Range,
    pub temperature: Range,
    pub power: Range,
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            duration: Range::new(0.0, 60.0),
            force: Range::new(0.0, 40.0),
            temperature: Range::new(20.0, 70.0),
            power: Range::new(0.0, 50.0),
        }
    }
}

impl ParamRanges {
    pub fn get(&self, channel: ParamChannel) -> Range {
        match channel {
            ParamChannel::Duration => self.duration,
            ParamChannel::Force => self.force,
            ParamChannel::Temperature => self.temperature,
            ParamChannel::Power => self.power,
        }
    }

    pub fn as_array(&self) -> [Range; NUM_PARAM_CHANNELS] {
        ParamChannel::ALL.map(|c| self.get(c))
    }

    pub fn validate(&self) -> Result<()> {
        for c in ParamChannel::ALL {
            if !self.get(c).is_valid() {
                return Err(SofaError::Config(format!(
                    "range for {} must satisfy lo < hi",
                    c.as_str()
                )));
            }
        }
        Ok(())
    }

    /// Maps one physical value of `channel` into `[0, 1]`.
    pub fn normalize_value(&self, channel: ParamChannel, x: f32) -> f32 {
        let r = self.get(channel);
        ((x - r.lo) / r.span()).clamp(0.0, 1.0)
    }

    pub fn denormalize_value(&self, channel: ParamChannel, v: f32) -> f32 {
        let r = self.get(channel);
        r.lo + v * r.span()
    }
}

/// RGB image `[3, H, W]` with values in `[0, 1]`. Used for both pre- and
/// post-ablation renderings.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage(pub Array3<f32>);

impl RgbImage {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        if data.shape()[0] != 3 {
            return Err(SofaError::Shape(format!(
                "rgb image needs 3 channels, got {:?}",
                data.shape()
            )));
        }
        Ok(Self(data))
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self(Array3::zeros((3, h, w)))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.0
    }

    /// Pixels where any channel is nonzero.
    pub fn foreground(&self) -> Array2<bool> {
        self.0.map_axis(Axis(0), |px| px.iter().any(|&v| v != 0.0))
    }
}

/// Normalized procedural maps `[4, H, W]` in channel order
/// (duration, force, temperature, power). A pixel with all four channels
/// exactly zero received no energy.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamMaps {
    pub channels: Array3<f32>,
    pub ranges: ParamRanges,
}

impl ParamMaps {
    pub fn new(channels: Array3<f32>, ranges: ParamRanges) -> Result<Self> {
        if channels.shape()[0] != NUM_PARAM_CHANNELS {
            return Err(SofaError::Shape(format!(
                "parameter maps need 4 channels, got {:?}",
                channels.shape()
            )));
        }
        Ok(Self { channels, ranges })
    }

    pub fn zeros(h: usize, w: usize, ranges: ParamRanges) -> Self {
        Self {
            channels: Array3::zeros((NUM_PARAM_CHANNELS, h, w)),
            ranges,
        }
    }

    pub fn height(&self) -> usize {
        self.channels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.channels.shape()[2]
    }

    /// Pixels where at least one channel is nonzero.
    pub fn support(&self) -> Array2<bool> {
        self.channels
            .map_axis(Axis(0), |px| px.iter().any(|&v| v != 0.0))
    }
}

/// Normalizes physical parameter maps. Values are mapped by
/// `(x - lo) / (hi - lo)` and clamped; pixels that are zero in every channel
/// stay zero.
pub fn normalize_params(raw: &Array3<f32>, ranges: ParamRanges) -> Result<ParamMaps> {
    ranges.validate()?;
    if raw.shape()[0] != NUM_PARAM_CHANNELS {
        return Err(SofaError::Shape(format!(
            "raw parameter maps need 4 channels, got {:?}",
            raw.shape()
        )));
    }
    if let Some(pos) = raw.iter().position(|v| !v.is_finite()) {
        return Err(SofaError::InvalidValue(format!(
            "non-finite raw parameter at flat index {pos}"
        )));
    }
    let (_, h, w) = raw.dim();
    let mut out = Array3::<f32>::zeros((NUM_PARAM_CHANNELS, h, w));
    for i in 0..h {
        for j in 0..w {
            if (0..NUM_PARAM_CHANNELS).all(|c| raw[[c, i, j]] == 0.0) {
                continue;
            }
            for c in ParamChannel::ALL {
                out[[c.index(), i, j]] = ranges.normalize_value(c, raw[[c.index(), i, j]]);
            }
        }
    }
    Ok(ParamMaps {
        channels: out,
        ranges,
    })
}

/// Inverse of [`normalize_params`] on unclamped values.
pub fn denormalize_params(p: &ParamMaps) -> Array3<f32> {
    let mut out = p.channels.clone();
    for c in ParamChannel::ALL {
        let r = p.ranges.get(c);
        out.index_axis_mut(Axis(0), c.index())
            .mapv_inplace(|v| r.lo + v * r.span());
    }
    out
}

/// Scar map `[1, H, W]` stored as `[H, W]`, soft in `[0, 1]` or hard `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScarMask(pub Array2<f32>);

impl ScarMask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self(Array2::zeros((h, w)))
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.0
    }

    pub fn is_hard(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn binarize(&self, threshold: f32) -> ScarMask {
        ScarMask(self.0.mapv(|v| if v > threshold { 1.0 } else { 0.0 }))
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&v| v > 0.5).count()
    }
}

/// Post-ablation targets. Present together or absent together.
#[derive(Clone, Debug, PartialEq)]
pub struct PostTarget {
    pub post: RgbImage,
    pub scar: ScarMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewSample {
    pub view: ViewId,
    pub pre: RgbImage,
    pub params: ParamMaps,
    pub target: Option<PostTarget>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Study {
    pub id: String,
    /// Ordered by [`ViewId`] once validated.
    pub samples: Vec<ViewSample>,
    pub label: Option<u8>,
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Study {
    pub fn sample(&self, view: ViewId) -> Option<&ViewSample> {
        self.samples.iter().find(|s| s.view == view)
    }

    /// Samples in canonical view order, failing on the first missing view.
    pub fn ordered_samples(&self) -> Result<Vec<&ViewSample>> {
        ViewId::ALL
            .iter()
            .map(|&v| self.sample(v).ok_or(SofaError::MissingView(v)))
            .collect()
    }

    pub fn resolution(&self) -> Option<(usize, usize)> {
        self.samples
            .first()
            .map(|s| (s.pre.height(), s.pre.width()))
    }

    pub fn has_targets(&self) -> bool {
        self.samples.iter().all(|s| s.target.is_some())
    }

    pub fn seed(&self) -> Option<u64> {
        self.meta.get("seed").and_then(|v| v.as_u64())
    }

    pub fn params(&self) -> Result<Vec<ParamMaps>> {
        Ok(self
            .ordered_samples()?
            .into_iter()
            .map(|s| s.params.clone())
            .collect())
    }

    pub fn with_params(&self, params: &[ParamMaps]) -> Result<Study> {
        if params.len() != NUM_VIEWS {
            return Err(SofaError::Shape(format!(
                "expected {NUM_VIEWS} parameter maps, got {}",
                params.len()
            )));
        }
        let mut out = self.clone();
        out.samples.sort_by_key(|s| s.view);
        for (s, p) in out.samples.iter_mut().zip(params) {
            s.params = p.clone();
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Issue {
    MissingView {
        view: ViewId,
    },
    DuplicateView {
        view: ViewId,
    },
    ShapeMismatch {
        view: ViewId,
        array: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    NonFinite {
        view: ViewId,
        array: &'static str,
        count: usize,
    },
    OutOfRange {
        view: ViewId,
        array: &'static str,
        channel: Option<usize>,
        count: usize,
    },
    InvalidRange {
        view: ViewId,
        channel: usize,
    },
    InvalidLabel {
        label: u8,
    },
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Issue::MissingView { view } => write!(f, "missing view {view}"),
            Issue::DuplicateView { view } => write!(f, "duplicate view {view}"),
            Issue::ShapeMismatch {
                view,
                array,
                expected,
                found,
            } => write!(
                f,
                "{view}/{array}: expected shape {expected:?}, found {found:?}"
            ),
            Issue::NonFinite { view, array, count } => {
                write!(f, "{view}/{array}: {count} non-finite values")
            }
            Issue::OutOfRange {
                view,
                array,
                channel,
                count,
            } => match channel {
                Some(c) => write!(
                    f,
                    "{view}/{array}: {count} values out of range in channel {c}"
                ),
                None => write!(f, "{view}/{array}: {count} values out of range"),
            },
            Issue::InvalidRange { view, channel } => {
                write!(
                    f,
                    "{view}: physical range of channel {channel} has lo >= hi"
                )
            }
            Issue::InvalidLabel { label } => write!(f, "label {label} is not 0 or 1"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            return Ok(());
        }
        let text: Vec<String> = self.issues.iter().map(|i| i.to_string()).collect();
        Err(SofaError::InvalidValue(text.join("; ")))
    }
}

fn check_unit_array<'a>(
    issues: &mut Vec<Issue>,
    view: ViewId,
    array: &'static str,
    channels: impl Iterator<Item = (Option<usize>, ndarray::ArrayView2<'a, f32>)>,
) {
    let mut non_finite = 0;
    for (channel, plane) in channels {
        non_finite += plane.iter().filter(|v| !v.is_finite()).count();
        let out = plane
            .iter()
            .filter(|v| v.is_finite() && !(0.0..=1.0).contains(*v))
            .count();
        if out > 0 {
            issues.push(Issue::OutOfRange {
                view,
                array,
                channel,
                count: out,
            });
        }
    }
    if non_finite > 0 {
        issues.push(Issue::NonFinite {
            view,
            array,
            count: non_finite,
        });
    }
}

/// Lists every violated invariant of `study` at the given square resolution.
pub fn validate_study(study: &Study, resolution: usize) -> ValidationReport {
    let mut issues = Vec::new();
    for view in ViewId::ALL {
        match study.samples.iter().filter(|s| s.view == view).count() {
            0 => issues.push(Issue::MissingView { view }),
            1 => {}
            _ => issues.push(Issue::DuplicateView { view }),
        }
    }
    if let Some(label) = study.label {
        if label > 1 {
            issues.push(Issue::InvalidLabel { label });
        }
    }

    let hw = [resolution, resolution];
    for s in &study.samples {
        let view = s.view;
        let mut shape_ok = |array: &'static str, channels: usize, found: &[usize]| {
            let expected = vec![channels, hw[0], hw[1]];
            if found != expected.as_slice() {
                issues.push(Issue::ShapeMismatch {
                    view,
                    array,
                    expected,
                    found: found.to_vec(),
                });
            }
        };
        shape_ok("pre", 3, s.pre.0.shape());
        shape_ok("params", NUM_PARAM_CHANNELS, s.params.channels.shape());
        if let Some(t) = &s.target {
            shape_ok("post", 3, t.post.0.shape());
            let scar_shape = [1, t.scar.0.shape()[0], t.scar.0.shape()[1]];
            shape_ok("scar", 1, &scar_shape);
        }

        check_unit_array(
            &mut issues,
            view,
            "pre",
            s.pre.0.outer_iter().map(|p| (None, p)),
        );
        check_unit_array(
            &mut issues,
            view,
            "params",
            s.params
                .channels
                .outer_iter()
                .enumerate()
                .map(|(c, p)| (Some(c), p)),
        );
        for c in ParamChannel::ALL {
            if !s.params.ranges.get(c).is_valid() {
                issues.push(Issue::InvalidRange {
                    view,
                    channel: c.index(),
                });
            }
        }
        if let Some(t) = &s.target {
            check_unit_array(
                &mut issues,
                view,
                "post",
                t.post.0.outer_iter().map(|p| (None, p)),
            );
            check_unit_array(
                &mut issues,
                view,
                "scar",
                std::iter::once((None, t.scar.0.view())),
            );
        }
    }
    ValidationReport { issues }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(view: ViewId, n: usize) -> ViewSample {
        ViewSample {
            view,
            pre: RgbImage::zeros(n, n),
            params: ParamMaps::zeros(n, n, ParamRanges::default()),
            target: Some(PostTarget {
                post: RgbImage::zeros(n, n),
                scar: ScarMask::zeros(n, n),
            }),
        }
    }

    fn study(n: usize) -> Study {
        Study {
            id: "s".into(),
            samples: ViewId::ALL.iter().map(|&v| sample(v, n)).collect(),
            label: Some(1),
            meta: BTreeMap::new(),
        }
    }

    #[test]
    fn view_order_is_stable() {
        let names: Vec<_> = ViewId::ALL.iter().map(|v| v.as_str()).collect();
        assert_eq!(
            names,
            [
                "anterior",
                "posterior",
                "left_lateral",
                "right_lateral",
                "superior",
                "inferior"
            ]
        );
        for v in ViewId::ALL {
            assert_eq!(v.as_str().parse::<ViewId>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.as_str()));
        }
    }

    #[test]
    fn well_formed_study_is_valid() {
        assert!(validate_study(&study(8), 8).is_valid());
    }

    #[test]
    fn missing_view_is_reported_once() {
        let mut s = study(8);
        s.samples.retain(|x| x.view != ViewId::Inferior);
        let r = validate_study(&s, 8);
        assert_eq!(
            r.issues,
            vec![Issue::MissingView {
                view: ViewId::Inferior
            }]
        );
    }

    #[test]
    fn out_of_range_duration_names_channel_zero() {
        let mut s = study(8);
        s.samples[2].params.channels[[0, 3, 3]] = 1.5;
        let r = validate_study(&s, 8);
        assert_eq!(r.issues.len(), 1);
        assert!(matches!(
            r.issues[0],
            Issue::OutOfRange {
                channel: Some(0),
                array: "params",
                ..
            }
        ));
    }

    #[test]
    fn shape_and_label_problems_are_reported() {
        let mut s = study(8);
        s.samples[0].pre = RgbImage::zeros(4, 8);
        s.label = Some(3);
        s.samples.push(sample(ViewId::Anterior, 8));
        let r = validate_study(&s, 8);
        assert!(r.issues.contains(&Issue::InvalidLabel { label: 3 }));
        assert!(r.issues.contains(&Issue::DuplicateView {
            view: ViewId::Anterior
        }));
        assert!(r
            .issues
            .iter()
            .any(|i| matches!(i, Issue::ShapeMismatch { array: "pre", .. })));
    }

    #[test]
    fn normalize_examples() {
        let r = ParamRanges::default();
        let mut raw = Array3::<f32>::zeros((4, 1, 2));
        raw[[0, 0, 0]] = 30.0;
        raw[[2, 0, 0]] = 80.0;
        let p = normalize_params(&raw, r).unwrap();
        assert_eq!(p.channels[[0, 0, 0]], 0.5);
        assert_eq!(p.channels[[2, 0, 0]], 1.0);
        // untouched pixel
        for c in 0..4 {
            assert_eq!(p.channels[[c, 0, 1]], 0.0);
        }

        let zero = normalize_params(&Array3::zeros((4, 3, 3)), r).unwrap();
        assert!(zero.channels.iter().all(|&v| v == 0.0));

        let mut bad = Array3::<f32>::zeros((4, 1, 1));
        bad[[1, 0, 0]] = f32::NAN;
        assert!(normalize_params(&bad, r).is_err());
    }

    #[test]
    fn denormalize_examples() {
        let r = ParamRanges::default();
        let mut ch = Array3::<f32>::zeros((4, 1, 1));
        ch[[0, 0, 0]] = 0.5;
        let phys = denormalize_params(&ParamMaps::new(ch, r).unwrap());
        assert_eq!(phys[[0, 0, 0]], 30.0);
        assert_eq!(phys[[1, 0, 0]], r.force.lo);
        assert_eq!(phys[[2, 0, 0]], r.temperature.lo);
        assert_eq!(phys[[3, 0, 0]], r.power.lo);
    }

    proptest! {
        #[test]
        fn normalize_denormalize_round_trip(
            vals in proptest::collection::vec(0.0f32..=1.0, 4 * 9),
        ) {
            let r = ParamRanges::default();
            let ch = Array3::from_shape_vec((4, 3, 3), vals).unwrap();
            let p = ParamMaps::new(ch.clone(), r).unwrap();
            let back = normalize_params(&denormalize_params(&p), r).unwrap();
            for (a, b) in back.channels.iter().zip(ch.iter()) {
                prop_assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
            }
        }
    }
}

//! Synthetic distortion registry, grouping table and deterministic
//! application of single distortions and distortion chains.

mod color;
mod filters;
mod ops;
mod wavelet;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

pub use ops::level_parameter;

/// The registered distortion types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistortionId {
    GaussianBlur,
    LensBlur,
    MotionBlur,
    ColorDiffuse,
    ColorShift,
    ColorQuantization,
    #[serde(rename = "color-saturate-1")]
    ColorSaturate1,
    #[serde(rename = "color-saturate-2")]
    ColorSaturate2,
    Jpeg,
    #[serde(rename = "jpeg2000")]
    Jpeg2000,
    Brighten,
    Darken,
    MeanShift,
    WhiteNoise,
    WhiteNoiseColor,
    ImpulseNoise,
    MultiplicativeNoise,
    DenoiseOversmooth,
    Jitter,
    Pixelate,
}

impl DistortionId {
    pub const ALL: [DistortionId; 20] = [
        DistortionId::GaussianBlur,
        DistortionId::LensBlur,
        DistortionId::MotionBlur,
        DistortionId::ColorDiffuse,
        DistortionId::ColorShift,
        DistortionId::ColorQuantization,
        DistortionId::ColorSaturate1,
        DistortionId::ColorSaturate2,
        DistortionId::Jpeg,
        DistortionId::Jpeg2000,
        DistortionId::Brighten,
        DistortionId::Darken,
        DistortionId::MeanShift,
        DistortionId::WhiteNoise,
        DistortionId::WhiteNoiseColor,
        DistortionId::ImpulseNoise,
        DistortionId::MultiplicativeNoise,
        DistortionId::DenoiseOversmooth,
        DistortionId::Jitter,
        DistortionId::Pixelate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DistortionId::GaussianBlur => "gaussian-blur",
            DistortionId::LensBlur => "lens-blur",
            DistortionId::MotionBlur => "motion-blur",
            DistortionId::ColorDiffuse => "color-diffuse",
            DistortionId::ColorShift => "color-shift",
            DistortionId::ColorQuantization => "color-quantization",
            DistortionId::ColorSaturate1 => "color-saturate-1",
            DistortionId::ColorSaturate2 => "color-saturate-2",
            DistortionId::Jpeg => "jpeg",
            DistortionId::Jpeg2000 => "jpeg2000",
            DistortionId::Brighten => "brighten",
            DistortionId::Darken => "darken",
            DistortionId::MeanShift => "mean-shift",
            DistortionId::WhiteNoise => "white-noise",
            DistortionId::WhiteNoiseColor => "white-noise-color",
            DistortionId::ImpulseNoise => "impulse-noise",
            DistortionId::MultiplicativeNoise => "multiplicative-noise",
            DistortionId::DenoiseOversmooth => "denoise-oversmooth",
            DistortionId::Jitter => "jitter",
            DistortionId::Pixelate => "pixelate",
        }
    }

    /// Whether the distortion consumes random numbers.
    pub fn is_stochastic(self) -> bool {
        matches!(
            self,
            DistortionId::MotionBlur
                | DistortionId::ColorShift
                | DistortionId::WhiteNoise
                | DistortionId::WhiteNoiseColor
                | DistortionId::ImpulseNoise
                | DistortionId::MultiplicativeNoise
                | DistortionId::DenoiseOversmooth
                | DistortionId::Jitter
        )
    }
}

impl fmt::Display for DistortionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistortionId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DistortionId::ALL
            .iter()
            .copied()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::UnknownDistortion(s.to_string()))
    }
}

/// Severity level in `1..=5`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Level(u8);

impl Level {
    pub const MIN: u8 = 1;
    pub const MAX: u8 = 5;

    pub fn new(level: u8) -> Result<Self> {
        if (Self::MIN..=Self::MAX).contains(&level) {
            Ok(Level(level))
        } else {
            Err(Error::InvalidInput(format!(
                "severity level {level} outside {}..={}",
                Self::MIN,
                Self::MAX
            )))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = Level> {
        (Self::MIN..=Self::MAX).map(Level)
    }
}

impl TryFrom<u8> for Level {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        Level::new(v)
    }
}

impl From<Level> for u8 {
    fn from(l: Level) -> u8 {
        l.0
    }
}

/// One distortion at one severity level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DistortionSpec {
    #[serde(rename = "d")]
    pub distortion: DistortionId,
    #[serde(rename = "l")]
    pub level: Level,
}

impl DistortionSpec {
    pub fn new(distortion: DistortionId, level: u8) -> Result<Self> {
        Ok(Self {
            distortion,
            level: Level::new(level)?,
        })
    }
}

impl fmt::Display for DistortionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_d{}", self.distortion, self.level.get())
    }
}

const DEFAULT_GROUPING: &str = include_str!("../../config/grouping-default.toml");

/// Version tag of the grouping table shipped with the crate.
pub const DEFAULT_GROUPING_VERSION: &str = "kadid20-five-groups-v1";

/// Partition of distortion ids into named groups. Group ids iterate in
/// lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistortionGrouping {
    pub version: String,
    pub groups: BTreeMap<String, Vec<DistortionId>>,
}

#[derive(Deserialize)]
struct GroupingFile {
    version: String,
    groups: BTreeMap<String, Vec<String>>,
}

impl DistortionGrouping {
    pub fn default_grouping() -> Self {
        Self::from_toml(DEFAULT_GROUPING).expect("bundled grouping table is valid")
    }

    /// Resolves a grouping by version tag. Only the bundled table is built in;
    /// other tables are loaded from files.
    pub fn builtin(version: &str) -> Result<Self> {
        if version == DEFAULT_GROUPING_VERSION || version == "default" {
            Ok(Self::default_grouping())
        } else {
            Err(Error::Config(format!("unknown grouping version `{version}`")))
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: GroupingFile = toml::from_str(text).map_err(|e| Error::Config(format!("grouping table: {e}")))?;
        let mut groups = BTreeMap::new();
        for (group, ids) in file.groups {
            let ids = ids
                .iter()
                .map(|id| {
                    id.parse::<DistortionId>().map_err(|_| {
                        Error::Config(format!("group `{group}` references unregistered distortion `{id}`"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            groups.insert(group, ids);
        }
        Self::new(file.version, groups)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Builds a grouping, rejecting overlapping or empty groups.
    pub fn new(version: impl Into<String>, groups: BTreeMap<String, Vec<DistortionId>>) -> Result<Self> {
        let version = version.into();
        if version.trim().is_empty() {
            return Err(Error::Config("grouping version tag is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for (group, ids) in &groups {
            if ids.is_empty() {
                return Err(Error::Config(format!("group `{group}` is empty")));
            }
            for id in ids {
                if !seen.insert(*id) {
                    return Err(Error::Config(format!(
                        "distortion `{id}` appears in more than one group"
                    )));
                }
            }
        }
        Ok(Self { version, groups })
    }

    pub fn group_of(&self, id: DistortionId) -> Option<&str> {
        self.groups
            .iter()
            .find(|(_, ids)| ids.contains(&id))
            .map(|(g, _)| g.as_str())
    }

    pub fn distortions(&self) -> impl Iterator<Item = DistortionId> + '_ {
        self.groups.values().flatten().copied()
    }

    /// True when every registered distortion belongs to a group.
    pub fn covers_registry(&self) -> bool {
        let grouped: BTreeSet<_> = self.distortions().collect();
        DistortionId::ALL.iter().all(|d| grouped.contains(d))
    }

    /// All unordered cross-group pairs; the first element comes from the
    /// lexicographically smaller group and is applied first.
    pub fn cross_group_pairs(&self) -> Vec<(DistortionId, DistortionId)> {
        let groups: Vec<&Vec<DistortionId>> = self.groups.values().collect();
        let mut pairs = Vec::new();
        for (i, first) in groups.iter().enumerate() {
            for second in &groups[i + 1..] {
                for &a in first.iter() {
                    for &b in second.iter() {
                        pairs.push((a, b));
                    }
                }
            }
        }
        pairs
    }
}

/// A catalog entry: one (type, level) template and the group it belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatalogEntry {
    pub spec: DistortionSpec,
    pub group: String,
}

#[derive(Debug, Clone)]
pub struct Catalog {
    pub entries: Vec<CatalogEntry>,
    pub grouping: DistortionGrouping,
}

impl Catalog {
    pub fn distortion_count(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.spec.distortion)
            .collect::<BTreeSet<_>>()
            .len()
    }
}

/// Every registered (type, level) pair under the given grouping, which must
/// partition the registry.
pub fn distortion_catalog(grouping: &DistortionGrouping) -> Result<Catalog> {
    if !grouping.covers_registry() {
        let missing: Vec<_> = DistortionId::ALL
            .iter()
            .filter(|d| grouping.group_of(**d).is_none())
            .map(|d| d.as_str())
            .collect();
        return Err(Error::Config(format!(
            "grouping `{}` leaves distortions ungrouped: {}",
            grouping.version,
            missing.join(", ")
        )));
    }
    let mut entries = Vec::with_capacity(DistortionId::ALL.len() * 5);
    for id in DistortionId::ALL {
        let group = grouping.group_of(id).expect("coverage checked").to_string();
        for level in Level::all() {
            entries.push(CatalogEntry {
                spec: DistortionSpec { distortion: id, level },
                group: group.clone(),
            });
        }
    }
    Ok(Catalog {
        entries,
        grouping: grouping.clone(),
    })
}

/// Applies one distortion. The input is not modified; stochastic distortions
/// are fully determined by `seed`.
pub fn apply_distortion(img: &ImageBuffer, spec: DistortionSpec, seed: u64) -> Result<ImageBuffer> {
    let min = ops::min_side(spec);
    if img.width() < min || img.height() < min {
        return Err(Error::ImageTooSmall(format!(
            "{spec} needs at least {min}x{min}, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    ops::apply(img, spec, seed)
}

/// Applies `chain` left to right. Step `i` receives `step_seeds(i)`.
pub fn apply_chain_with(
    img: &ImageBuffer,
    chain: &[DistortionSpec],
    mut step_seed: impl FnMut(usize) -> u64,
) -> Result<ImageBuffer> {
    let mut current = img.clone();
    for (i, spec) in chain.iter().enumerate() {
        current = apply_distortion(&current, *spec, step_seed(i))?;
    }
    Ok(current)
}

/// Sequential application with per-step seeds derived from `seed`; a
/// singleton chain uses `seed` itself.
pub fn apply_chain(img: &ImageBuffer, chain: &[DistortionSpec], seed: u64) -> Result<ImageBuffer> {
    apply_chain_with(img, chain, |i| {
        if i == 0 {
            seed
        } else {
            crate::seed::derive_seed(seed, "chain-step", &[&i.to_string()])
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_has_twenty_types_and_round_trips_names() {
        assert_eq!(DistortionId::ALL.len(), 20);
        for id in DistortionId::ALL {
            assert_eq!(id.as_str().parse::<DistortionId>().unwrap(), id);
            let json = serde_json::to_string(&id).unwrap();
            assert_eq!(json, format!("\"{}\"", id.as_str()));
        }
        assert!("sharpen".parse::<DistortionId>().is_err());
    }

    #[test]
    fn default_catalog_is_twenty_by_five() {
        let grouping = DistortionGrouping::default_grouping();
        assert_eq!(grouping.version, DEFAULT_GROUPING_VERSION);
        let catalog = distortion_catalog(&grouping).unwrap();
        assert_eq!(catalog.entries.len(), 100);
        assert_eq!(catalog.distortion_count(), 20);
        let sizes: Vec<usize> = grouping.groups.values().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 3, 5, 2, 7]);
    }

    #[test]
    fn default_grouping_cross_pairs_by_enumeration() {
        let grouping = DistortionGrouping::default_grouping();
        // brute force over all ordered id pairs
        let mut count = 0;
        for a in DistortionId::ALL {
            for b in DistortionId::ALL {
                if a < b && grouping.group_of(a) != grouping.group_of(b) {
                    count += 1;
                }
            }
        }
        assert_eq!(count, 152);
        assert_eq!(count * 4, 608);
        assert_eq!(grouping.cross_group_pairs().len(), 152);
    }

    #[test]
    fn single_group_has_no_cross_pairs() {
        let mut groups = BTreeMap::new();
        groups.insert("everything".to_string(), DistortionId::ALL.to_vec());
        let g = DistortionGrouping::new("one-group", groups).unwrap();
        assert!(g.cross_group_pairs().is_empty());
        assert!(distortion_catalog(&g).is_ok());
    }

    #[test]
    fn grouping_rejects_unregistered_and_overlapping_ids() {
        let bad = "version = \"x\"\n[groups]\na = [\"gaussian-blur\", \"sharpen\"]\n";
        assert!(matches!(
            DistortionGrouping::from_toml(bad),
            Err(Error::Config(msg)) if msg.contains("sharpen")
        ));
        let overlap = "version = \"x\"\n[groups]\na = [\"jpeg\"]\nb = [\"jpeg\"]\n";
        assert!(DistortionGrouping::from_toml(overlap).is_err());
        assert!(DistortionGrouping::builtin("nope").is_err());
    }

    #[test]
    fn partial_grouping_is_not_a_catalog() {
        let g = DistortionGrouping::from_toml(
            "version = \"pair\"\n[groups]\nnoise = [\"white-noise\"]\nspatial = [\"jitter\"]\n",
        )
        .unwrap();
        assert!(distortion_catalog(&g).is_err());
        assert_eq!(
            g.cross_group_pairs(),
            vec![(DistortionId::WhiteNoise, DistortionId::Jitter)]
        );
    }

    #[test]
    fn level_bounds() {
        assert!(Level::new(0).is_err());
        assert!(Level::new(6).is_err());
        assert!(serde_json::from_str::<Level>("7").is_err());
        assert_eq!(serde_json::from_str::<Level>("3").unwrap().get(), 3);
    }
}

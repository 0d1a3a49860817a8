//! Rank-ordered triplet enumeration, symbolic manifests and triplet rendering.
//!
//! A manifest stores degradation chains, not pixels. Rendering is lazy: each
//! chain step is seeded from `(master seed, image id, chain prefix)`, so a
//! chain that extends another one reproduces the shorter chain's image as its
//! intermediate state.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use arrayvec::ArrayVec;
use serde::{Deserialize, Serialize};

use crate::distortion::{
    apply_distortion, distortion_catalog, DistortionGrouping, DistortionId, DistortionSpec, Level,
};
use crate::error::{Error, Result};
use crate::image::{ImageBuffer, MIN_TRIPLET_SIDE};
use crate::seed::{derive_seed, fingerprint};

/// Longest chain the default pipeline produces.
pub const MAX_CHAIN_LEN: usize = 2;

/// An ordered list of distortion steps applied to a pristine image. The
/// empty chain is the pristine image itself.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DegradationChain {
    steps: ArrayVec<DistortionSpec, MAX_CHAIN_LEN>,
}

impl DegradationChain {
    pub fn pristine() -> Self {
        Self::default()
    }

    pub fn single(spec: DistortionSpec) -> Self {
        let mut steps = ArrayVec::new();
        steps.push(spec);
        Self { steps }
    }

    pub fn from_steps(steps: &[DistortionSpec]) -> Result<Self> {
        let steps = ArrayVec::try_from(steps)
            .map_err(|_| Error::InvalidInput(format!("chains longer than {MAX_CHAIN_LEN} steps are not supported")))?;
        Ok(Self { steps })
    }

    /// This chain followed by one more step.
    pub fn extended(&self, spec: DistortionSpec) -> Result<Self> {
        let mut next = self.clone();
        next.steps
            .try_push(spec)
            .map_err(|_| Error::InvalidInput(format!("chains longer than {MAX_CHAIN_LEN} steps are not supported")))?;
        Ok(next)
    }

    pub fn steps(&self) -> &[DistortionSpec] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn is_pristine(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn is_prefix_of(&self, other: &DegradationChain) -> bool {
        self.len() <= other.len() && other.steps[..self.len()] == self.steps[..]
    }

    /// Strict severity order: `self` is less degraded than `other`. Holds when
    /// `other` is the same single distortion at a higher level, or when
    /// `self` is a strict prefix of `other` (which includes the pristine
    /// chain preceding every non-empty chain).
    pub fn precedes(&self, other: &DegradationChain) -> bool {
        if self.len() < other.len() && self.is_prefix_of(other) {
            return true;
        }
        match (self.steps(), other.steps()) {
            ([a], [b]) => a.distortion == b.distortion && a.level < b.level,
            _ => false,
        }
    }

    /// Ordering token: chain length first, then the steps. Consistent with
    /// [`precedes`](Self::precedes) for comparable chains.
    pub fn rank_key(&self) -> (usize, Vec<(DistortionId, u8)>) {
        (
            self.len(),
            self.steps.iter().map(|s| (s.distortion, s.level.get())).collect(),
        )
    }

    /// Seed label of step `i`: the ids and levels of the earlier steps plus
    /// the id (not the level) of step `i`. Levels of one distortion therefore
    /// share a noise field, and an extension reuses its prefix's seeds.
    fn step_key(&self, i: usize) -> String {
        let mut key = String::new();
        for s in &self.steps[..i] {
            key.push_str(&format!("{}@{}+", s.distortion, s.level.get()));
        }
        key.push_str(self.steps[i].distortion.as_str());
        key
    }
}

impl std::fmt::Display for DegradationChain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_pristine() {
            return f.write_str("pristine");
        }
        for (i, s) in self.steps.iter().enumerate() {
            if i > 0 {
                f.write_str("_")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripletKind {
    Single,
    Combined,
}

/// Three chains without an image attached.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TripletTemplate {
    pub kind: TripletKind,
    pub anchor: DegradationChain,
    pub positive: DegradationChain,
    pub negative: DegradationChain,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TripletSpec {
    pub image_id: String,
    pub kind: TripletKind,
    pub anchor: DegradationChain,
    pub positive: DegradationChain,
    pub negative: DegradationChain,
}

impl TripletSpec {
    pub fn from_template(image_id: &str, t: &TripletTemplate) -> Self {
        Self {
            image_id: image_id.to_string(),
            kind: t.kind,
            anchor: t.anchor.clone(),
            positive: t.positive.clone(),
            negative: t.negative.clone(),
        }
    }

    pub fn chains(&self) -> [&DegradationChain; 3] {
        [&self.anchor, &self.positive, &self.negative]
    }

    /// Structural check of the ordering and kind invariants.
    pub fn validate(&self, grouping: &DistortionGrouping) -> Result<()> {
        let bad = |why: &str| Err(Error::InvalidInput(format!("triplet {self:?}: {why}")));
        if !(self.anchor.precedes(&self.positive) && self.positive.precedes(&self.negative)) {
            return bad("chains are not in increasing severity");
        }
        for chain in self.chains() {
            for step in chain.steps() {
                if grouping.group_of(step.distortion).is_none() {
                    return bad("distortion not in grouping");
                }
            }
        }
        match self.kind {
            TripletKind::Single => {
                let ids: HashSet<_> = self
                    .chains()
                    .iter()
                    .flat_map(|c| c.steps().iter().map(|s| s.distortion))
                    .collect();
                if ids.len() != 1 || self.chains().iter().any(|c| c.len() > 1) {
                    return bad("single triplet must use one distortion");
                }
            }
            TripletKind::Combined => {
                if !self.anchor.is_pristine() || self.positive.len() != 1 || self.negative.len() != 2 {
                    return bad("combined triplet shape");
                }
                let first = grouping.group_of(self.negative.steps()[0].distortion);
                let second = grouping.group_of(self.negative.steps()[1].distortion);
                if first == second {
                    return bad("combined steps from the same group");
                }
            }
        }
        Ok(())
    }
}

/// All strictly increasing rank triples over `0..n_ranks`, lexicographic.
pub fn enumerate_single_triplets(n_ranks: usize) -> Result<Vec<(usize, usize, usize)>> {
    if n_ranks < 3 {
        return Err(Error::InvalidInput(format!(
            "need at least 3 ranks to form a triplet, got {n_ranks}"
        )));
    }
    let mut out = Vec::new();
    for i in 0..n_ranks {
        for j in i + 1..n_ranks {
            for k in j + 1..n_ranks {
                out.push((i, j, k));
            }
        }
    }
    Ok(out)
}

/// Single-distortion templates for one distortion: ranks are
/// `{pristine, level 1, ..., level 5}`.
pub fn single_templates(distortion: DistortionId) -> Vec<TripletTemplate> {
    let ranks: Vec<DegradationChain> = std::iter::once(DegradationChain::pristine())
        .chain(Level::all().map(|level| DegradationChain::single(DistortionSpec { distortion, level })))
        .collect();
    enumerate_single_triplets(ranks.len())
        .expect("six ranks")
        .into_iter()
        .map(|(a, p, n)| TripletTemplate {
            kind: TripletKind::Single,
            anchor: ranks[a].clone(),
            positive: ranks[p].clone(),
            negative: ranks[n].clone(),
        })
        .collect()
}

/// Combined templates: for every cross-group pair `(first, second)`, every
/// positive level and every added level,
/// `[pristine, first@pl, first@pl + second@al]`.
pub fn enumerate_combined_triplets(
    grouping: &DistortionGrouping,
    positive_levels: &[Level],
    added_levels: &[Level],
) -> Result<Vec<TripletTemplate>> {
    if positive_levels.is_empty() || added_levels.is_empty() {
        return Err(Error::InvalidInput("combined level sets must be non-empty".into()));
    }
    let mut out = Vec::new();
    for (first, second) in grouping.cross_group_pairs() {
        for &pl in positive_levels {
            let positive = DegradationChain::single(DistortionSpec {
                distortion: first,
                level: pl,
            });
            for &al in added_levels {
                let negative = positive.extended(DistortionSpec {
                    distortion: second,
                    level: al,
                })?;
                out.push(TripletTemplate {
                    kind: TripletKind::Combined,
                    anchor: DegradationChain::pristine(),
                    positive: positive.clone(),
                    negative,
                });
            }
        }
    }
    Ok(out)
}

pub fn default_combined_levels() -> Vec<Level> {
    vec![Level::new(1).unwrap(), Level::new(3).unwrap()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub single: usize,
    pub combined: usize,
    pub total: usize,
}

impl ManifestCounts {
    pub fn of(entries: &[TripletSpec]) -> Self {
        let single = entries.iter().filter(|e| e.kind == TripletKind::Single).count();
        let combined = entries.len() - single;
        Self {
            single,
            combined,
            total: entries.len(),
        }
    }
}

pub const MANIFEST_FORMAT: &str = "triqa-manifest";
pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub format_version: u32,
    pub images: Vec<String>,
    pub grouping_version: String,
    pub grouping: DistortionGrouping,
    pub master_seed: u64,
    pub include_combined: bool,
    pub positive_levels: Vec<Level>,
    pub added_levels: Vec<Level>,
    pub counts: ManifestCounts,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub entries: Vec<TripletSpec>,
}

/// Options beyond the required inputs of [`build_manifest`].
#[derive(Debug, Clone)]
pub struct ManifestOptions {
    pub include_combined: bool,
    pub positive_levels: Vec<Level>,
    pub added_levels: Vec<Level>,
}

impl Default for ManifestOptions {
    fn default() -> Self {
        Self {
            include_combined: true,
            positive_levels: default_combined_levels(),
            added_levels: default_combined_levels(),
        }
    }
}

/// Enumerates every triplet for the corpus with the default combined level
/// sets `{1, 3} x {1, 3}`.
pub fn build_manifest(
    image_ids: &[String],
    grouping: &DistortionGrouping,
    include_combined: bool,
    master_seed: u64,
) -> Result<Manifest> {
    build_manifest_with(
        image_ids,
        grouping,
        &ManifestOptions {
            include_combined,
            ..ManifestOptions::default()
        },
        master_seed,
    )
}

pub fn build_manifest_with(
    image_ids: &[String],
    grouping: &DistortionGrouping,
    options: &ManifestOptions,
    master_seed: u64,
) -> Result<Manifest> {
    if image_ids.is_empty() {
        return Err(Error::InvalidInput("manifest needs at least one image".into()));
    }
    let mut seen = HashSet::new();
    for id in image_ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate image id `{id}`")));
        }
    }
    // rejects groupings that do not partition the registry
    let catalog = distortion_catalog(grouping)?;
    let _ = catalog;

    let mut templates: Vec<TripletTemplate> = DistortionId::ALL.iter().flat_map(|&d| single_templates(d)).collect();
    if options.include_combined {
        templates.extend(enumerate_combined_triplets(
            grouping,
            &options.positive_levels,
            &options.added_levels,
        )?);
    }

    let mut entries = Vec::with_capacity(templates.len() * image_ids.len());
    for id in image_ids {
        entries.extend(templates.iter().map(|t| TripletSpec::from_template(id, t)));
    }
    let counts = ManifestCounts::of(&entries);
    Ok(Manifest {
        header: ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            format_version: MANIFEST_FORMAT_VERSION,
            images: image_ids.to_vec(),
            grouping_version: grouping.version.clone(),
            grouping: grouping.clone(),
            master_seed,
            include_combined: options.include_combined,
            positive_levels: options.positive_levels.clone(),
            added_levels: options.added_levels.clone(),
            counts,
        },
        entries,
    })
}

impl Manifest {
    pub fn counts(&self) -> ManifestCounts {
        self.header.counts
    }

    /// Checks the counts summary, uniqueness, ordering, and that every entry
    /// refers to a listed image and a grouped distortion.
    pub fn validate(&self) -> Result<()> {
        if ManifestCounts::of(&self.entries) != self.header.counts {
            return Err(Error::InvalidInput("manifest counts do not match entries".into()));
        }
        let images: HashSet<&str> = self.header.images.iter().map(String::as_str).collect();
        let mut seen = HashSet::with_capacity(self.entries.len());
        for e in &self.entries {
            if !images.contains(e.image_id.as_str()) {
                return Err(Error::InvalidInput(format!("unknown image `{}`", e.image_id)));
            }
            if !seen.insert(e) {
                return Err(Error::InvalidInput(format!("duplicate triplet {e:?}")));
            }
            e.validate(&self.header.grouping)?;
        }
        Ok(())
    }

    /// JSON-Lines: one header line, then one triplet per line.
    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        let io = |e| Error::io("<manifest>", e);
        serde_json::to_writer(&mut out, &self.header)?;
        out.write_all(b"\n").map_err(io)?;
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n").map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn read_from(reader: impl BufRead, origin: &Path) -> Result<Self> {
        let mut lines = reader.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::format(origin, "empty manifest"))?
            .map_err(|e| Error::io(origin, e))?;
        let header: ManifestHeader =
            serde_json::from_str(&header_line).map_err(|e| Error::format(origin, format!("header: {e}")))?;
        if header.format != MANIFEST_FORMAT || header.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::format(origin, "not a version 1 triplet manifest"));
        }
        let mut entries = Vec::with_capacity(header.counts.total);
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(origin, e))?;
            if line.is_empty() {
                continue;
            }
            entries
                .push(serde_json::from_str(&line).map_err(|e| Error::format(origin, format!("line {}: {e}", n + 2)))?);
        }
        let manifest = Manifest { header, entries };
        if ManifestCounts::of(&manifest.entries) != manifest.header.counts {
            return Err(Error::format(origin, "counts summary does not match entries"));
        }
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file), path)
    }

    /// Entries belonging to the given images, in manifest order.
    pub fn entries_for<'a>(&'a self, images: &'a HashSet<String>) -> impl Iterator<Item = &'a TripletSpec> {
        self.entries.iter().filter(move |e| images.contains(&e.image_id))
    }
}

/// Seed of chain step `step` for an image under a master seed.
pub fn step_seed(master_seed: u64, image_id: &str, chain: &DegradationChain, step: usize) -> u64 {
    derive_seed(master_seed, "render", &[image_id, &chain.step_key(step)])
}

/// Renders one chain from the pristine image.
pub fn render_chain(
    image_id: &str,
    chain: &DegradationChain,
    pristine: &ImageBuffer,
    master_seed: u64,
) -> Result<ImageBuffer> {
    render_extension(image_id, chain, pristine.clone(), 0, master_seed)
}

/// Continues `chain` from `prefix_img`, the rendering of its first
/// `from_step` steps.
pub fn render_extension(
    image_id: &str,
    chain: &DegradationChain,
    prefix_img: ImageBuffer,
    from_step: usize,
    master_seed: u64,
) -> Result<ImageBuffer> {
    let mut img = prefix_img;
    for (i, spec) in chain.steps().iter().enumerate().skip(from_step) {
        img = apply_distortion(&img, *spec, step_seed(master_seed, image_id, chain, i))?;
    }
    Ok(img)
}

/// Renders anchor, positive and negative. A chain that extends an already
/// rendered chain continues from that image instead of starting over.
pub fn render_triplet(spec: &TripletSpec, pristine: &ImageBuffer, master_seed: u64) -> Result<[ImageBuffer; 3]> {
    pristine.ensure_min_side(MIN_TRIPLET_SIDE)?;
    let chains = spec.chains();
    let mut rendered: Vec<ImageBuffer> = Vec::with_capacity(3);
    for (k, chain) in chains.iter().enumerate() {
        let base = (0..k)
            .filter(|&j| chains[j].is_prefix_of(chain))
            .max_by_key(|&j| chains[j].len());
        let img = match base {
            Some(j) => render_extension(&spec.image_id, chain, rendered[j].clone(), chains[j].len(), master_seed)?,
            None => render_chain(&spec.image_id, chain, pristine, master_seed)?,
        };
        rendered.push(img);
    }
    let [a, p, n]: [ImageBuffer; 3] = rendered.try_into().expect("three chains");
    Ok([a, p, n])
}

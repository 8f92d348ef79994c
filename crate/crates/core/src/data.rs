//! Choice data ingestion, distance-percentile segmentation and the
//! three-tier estimation / averaging / validation split.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Offset added before taking logs of attributes, in the attribute's unit.
/// Walk and cycle costs are zero, so a plain log is undefined.
pub const DEFAULT_LOG_DELTA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub obs_id: u64,
    pub person_id: u64,
    /// 0-based index of the chosen alternative.
    pub chosen: usize,
    /// Trip distance in km.
    pub distance: f64,
    pub avail: Vec<bool>,
    /// J x A attribute matrix, row-major by alternative.
    pub attrs: Vec<f64>,
    pub socio: Vec<f64>,
}

impl Observation {
    #[inline]
    pub fn attr(&self, alt: usize, attr: usize, n_attrs: usize) -> f64 {
        self.attrs[alt * n_attrs + attr]
    }

    pub fn n_available(&self) -> usize {
        self.avail.iter().filter(|&&a| a).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceDataset {
    pub alt_names: Vec<String>,
    pub attr_names: Vec<String>,
    pub socio_names: Vec<String>,
    /// Shared log-transform offset; every model reads it from here.
    pub log_delta: f64,
    pub observations: Vec<Observation>,
}

impl ChoiceDataset {
    pub fn new(
        alt_names: Vec<String>,
        attr_names: Vec<String>,
        socio_names: Vec<String>,
        log_delta: f64,
        observations: Vec<Observation>,
    ) -> Result<Self> {
        let ds = ChoiceDataset {
            alt_names,
            attr_names,
            socio_names,
            log_delta,
            observations,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n_obs(&self) -> usize {
        self.observations.len()
    }

    pub fn n_alts(&self) -> usize {
        self.alt_names.len()
    }

    pub fn n_attrs(&self) -> usize {
        self.attr_names.len()
    }

    pub fn n_socio(&self) -> usize {
        self.socio_names.len()
    }

    pub fn distances(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.distance).collect()
    }

    /// Checks every dataset invariant; the error names the first offending
    /// row (1-based).
    pub fn validate(&self) -> Result<()> {
        let j = self.n_alts();
        let a = self.n_attrs();
        if j < 2 {
            return Err(Error::Schema(format!("need at least 2 alternatives, got {j}")));
        }
        if !(self.log_delta >= 0.0 && self.log_delta.is_finite()) {
            return Err(Error::Schema(format!("invalid log offset {}", self.log_delta)));
        }
        for (i, o) in self.observations.iter().enumerate() {
            check_observation(o, j, a, self.n_socio()).map_err(|msg| Error::Row { row: i + 1, msg })?;
        }
        Ok(())
    }

    /// New dataset holding the given observations, in the given order.
    pub fn subset(&self, indices: &[usize]) -> ChoiceDataset {
        ChoiceDataset {
            alt_names: self.alt_names.clone(),
            attr_names: self.attr_names.clone(),
            socio_names: self.socio_names.clone(),
            log_delta: self.log_delta,
            observations: indices.iter().map(|&i| self.observations[i].clone()).collect(),
        }
    }

    pub fn choice_shares(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.n_alts()];
        for o in &self.observations {
            counts[o.chosen] += 1.0;
        }
        let n = self.n_obs().max(1) as f64;
        counts.iter().map(|c| c / n).collect()
    }
}

fn check_observation(o: &Observation, j: usize, a: usize, s: usize) -> Result<(), String> {
    if o.avail.len() != j {
        return Err(format!("availability has {} entries, expected {j}", o.avail.len()));
    }
    if o.attrs.len() != j * a {
        return Err(format!(
            "attribute matrix has {} entries, expected {}",
            o.attrs.len(),
            j * a
        ));
    }
    if o.socio.len() != s {
        return Err(format!("socio vector has {} entries, expected {s}", o.socio.len()));
    }
    if o.chosen >= j {
        return Err(format!("chosen index {} out of range", o.chosen));
    }
    if !o.avail[o.chosen] {
        return Err(format!("chosen alternative {} is unavailable", o.chosen));
    }
    if !(o.distance > 0.0 && o.distance.is_finite()) {
        return Err(format!("distance must be positive and finite, got {}", o.distance));
    }
    if let Some(x) = o.attrs.iter().chain(&o.socio).find(|x| !x.is_finite()) {
        return Err(format!("non-finite value {x}"));
    }
    Ok(())
}

/// Column-name mapping for delimited choice data.
///
/// Attribute columns are named `<attr>_<alt>` and availability columns
/// `avail_<alt>`. Attributes listed in `optional_attributes` may be missing
/// for some alternatives and are then read as zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub choice: String,
    pub distance: String,
    pub obs_id: Option<String>,
    pub person_id: Option<String>,
    pub alternatives: Vec<String>,
    pub attributes: Vec<String>,
    pub optional_attributes: Vec<String>,
    pub socio: Vec<String>,
    pub log_delta: f64,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            choice: "choice".into(),
            distance: "distance_km".into(),
            obs_id: Some("obs_id".into()),
            person_id: Some("person_id".into()),
            alternatives: Vec::new(),
            attributes: Vec::new(),
            optional_attributes: Vec::new(),
            socio: Vec::new(),
            log_delta: DEFAULT_LOG_DELTA,
        }
    }
}

impl Schema {
    /// Schema that reads back what [`write_dataset`] writes for `ds`.
    pub fn for_dataset(ds: &ChoiceDataset) -> Self {
        Schema {
            alternatives: ds.alt_names.clone(),
            attributes: ds.attr_names.clone(),
            socio: ds.socio_names.clone(),
            log_delta: ds.log_delta,
            ..Schema::default()
        }
    }
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &Schema) -> Result<ChoiceDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(file, schema)
}

pub fn read_dataset<R: std::io::Read>(reader: R, schema: &Schema) -> Result<ChoiceDataset> {
    let j = schema.alternatives.len();
    if j < 2 {
        return Err(Error::Schema("schema must list at least 2 alternatives".into()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let required = |name: &str| -> Result<usize> {
        col.get(name)
            .copied()
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };

    let choice_col = required(&schema.choice)?;
    let dist_col = required(&schema.distance)?;
    let obs_col = match &schema.obs_id {
        Some(name) => col.get(name.as_str()).copied(),
        None => None,
    };
    let person_col = match &schema.person_id {
        Some(name) => col.get(name.as_str()).copied(),
        None => None,
    };
    let avail_cols = schema
        .alternatives
        .iter()
        .map(|alt| required(&format!("avail_{alt}")))
        .collect::<Result<Vec<_>>>()?;
    let mut attr_cols = Vec::with_capacity(j * schema.attributes.len());
    for alt in &schema.alternatives {
        for attr in &schema.attributes {
            let name = format!("{attr}_{alt}");
            match col.get(name.as_str()) {
                Some(&c) => attr_cols.push(Some(c)),
                None if schema.optional_attributes.contains(attr) => attr_cols.push(None),
                None => return Err(Error::Schema(format!("missing column `{name}`"))),
            }
        }
    }
    let socio_cols = schema.socio.iter().map(|s| required(s)).collect::<Result<Vec<_>>>()?;

    let mut observations = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let real = |c: usize| -> Result<f64> {
            f64::from_str(field(c)).map_err(|_| Error::Row {
                row,
                msg: format!("column `{}`: cannot parse `{}` as a number", &headers[c], field(c)),
            })
        };
        let label = field(choice_col);
        let chosen = match schema.alternatives.iter().position(|a| a == label) {
            Some(p) => p,
            None => match label.parse::<usize>() {
                Ok(p) if p < j => p,
                _ => {
                    return Err(Error::Row {
                        row,
                        msg: format!("unknown alternative `{label}`"),
                    })
                }
            },
        };
        let avail = avail_cols
            .iter()
            .map(|&c| real(c).map(|v| v != 0.0))
            .collect::<Result<Vec<_>>>()?;
        let attrs = attr_cols
            .iter()
            .map(|c| c.map_or(Ok(0.0), &real))
            .collect::<Result<Vec<_>>>()?;
        let socio = socio_cols.iter().map(|&c| real(c)).collect::<Result<Vec<_>>>()?;
        let obs_id = match obs_col {
            Some(c) => real(c)? as u64,
            None => (row - 1) as u64,
        };
        let person_id = match person_col {
            Some(c) => real(c)? as u64,
            None => obs_id,
        };
        let o = Observation {
            obs_id,
            person_id,
            chosen,
            distance: real(dist_col)?,
            avail,
            attrs,
            socio,
        };
        check_observation(&o, j, schema.attributes.len(), schema.socio.len()).map_err(|msg| Error::Row { row, msg })?;
        observations.push(o);
    }

    ChoiceDataset::new(
        schema.alternatives.clone(),
        schema.attributes.clone(),
        schema.socio.clone(),
        schema.log_delta,
        observations,
    )
}

pub fn write_dataset(ds: &ChoiceDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let mut header = vec![
        "obs_id".to_string(),
        "person_id".into(),
        "choice".into(),
        "distance_km".into(),
    ];
    header.extend(ds.alt_names.iter().map(|a| format!("avail_{a}")));
    for alt in &ds.alt_names {
        header.extend(ds.attr_names.iter().map(|attr| format!("{attr}_{alt}")));
    }
    header.extend(ds.socio_names.iter().cloned());
    w.write_record(&header)?;
    for o in &ds.observations {
        let mut rec = vec![
            o.obs_id.to_string(),
            o.person_id.to_string(),
            ds.alt_names[o.chosen].clone(),
            fmt_f64(o.distance),
        ];
        rec.extend(o.avail.iter().map(|&a| if a { "1".into() } else { "0".into() }));
        rec.extend(o.attrs.iter().map(|&x| fmt_f64(x)));
        rec.extend(o.socio.iter().map(|&x| fmt_f64(x)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Shortest representation that parses back to the same value.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// Distance cut points defining K half-open segments
/// `[b_{s-1}, b_s)` with `b_0 = 0` and `b_K = +inf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentScheme {
    pub boundaries: Vec<f64>,
}

impl SegmentScheme {
    /// Boundaries at the `i/K` nearest-rank percentiles of `distances`.
    ///
    /// The `p`-th percentile is the smallest observed value `v` with
    /// `#{d <= v} / N >= p`.
    pub fn compute(distances: &[f64], k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::DegenerateScheme(format!("need at least 2 segments, got {k}")));
        }
        let mut sorted: Vec<f64> = distances.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mut distinct = sorted.clone();
        distinct.dedup();
        if distinct.len() < k {
            return Err(Error::DegenerateScheme(format!(
                "{} distinct distances for {k} segments",
                distinct.len()
            )));
        }
        let boundaries: Vec<f64> = (1..k)
            .map(|i| {
                let rank = (i * n).div_ceil(k);
                sorted[rank - 1]
            })
            .collect();
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::DegenerateScheme(
                "tied percentiles give non-increasing boundaries".into(),
            ));
        }
        Ok(SegmentScheme { boundaries })
    }

    pub fn from_boundaries(boundaries: Vec<f64>) -> Result<Self> {
        if boundaries.is_empty() || boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::DegenerateScheme("boundaries must be strictly ascending".into()));
        }
        Ok(SegmentScheme { boundaries })
    }

    pub fn n_segments(&self) -> usize {
        self.boundaries.len() + 1
    }

    /// 1-based segment index; a distance equal to a boundary belongs to the
    /// upper segment.
    pub fn segment_of(&self, distance: f64) -> usize {
        self.boundaries.partition_point(|&b| b <= distance) + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Trains the sub-models and the gate.
    SubTrain,
    /// Trains only the gate.
    MaOnly,
    /// Random holdout, any segment.
    Validation,
    /// Outermost segments outside the holdout; used for validation only.
    Excluded,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::SubTrain, Role::MaOnly, Role::Validation, Role::Excluded];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::SubTrain => "sub_train",
            Role::MaOnly => "ma_only",
            Role::Validation => "validation",
            Role::Excluded => "excluded",
        }
    }

    /// Part of the averaging training set (segments 2-9 outside the holdout).
    pub fn is_ma_train(self) -> bool {
        matches!(self, Role::SubTrain | Role::MaOnly)
    }

    /// Part of the reported validation set (holdout plus outer segments).
    pub fn is_validation(self) -> bool {
        matches!(self, Role::Validation | Role::Excluded)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Schema(format!("unknown role `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub segments: usize,
    pub holdout_frac: f64,
    /// Draw the holdout by person instead of by observation.
    pub person_level: bool,
    pub seed: Option<u64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            segments: 10,
            holdout_frac: 0.2,
            person_level: false,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSplit {
    pub obs_ids: Vec<u64>,
    /// 1-based segment per observation.
    pub segment_of: Vec<usize>,
    pub role_of: Vec<Role>,
    pub seed: u64,
    pub holdout_frac: f64,
}

/// Observation-level split with a single seeded uniform holdout draw.
pub fn make_split(ds: &ChoiceDataset, scheme: &SegmentScheme, holdout_frac: f64, seed: u64) -> Result<DataSplit> {
    make_split_with(ds, scheme, holdout_frac, false, seed)
}

pub fn make_split_with(
    ds: &ChoiceDataset,
    scheme: &SegmentScheme,
    holdout_frac: f64,
    person_level: bool,
    seed: u64,
) -> Result<DataSplit> {
    if scheme.n_segments() != 10 {
        return Err(Error::Param(format!(
            "the split roles need 10 segments, scheme has {}",
            scheme.n_segments()
        )));
    }
    if !(0.0..1.0).contains(&holdout_frac) {
        return Err(Error::Param(format!("holdout fraction {holdout_frac} outside [0, 1)")));
    }
    let n = ds.n_obs();
    let target = (holdout_frac * n as f64).round() as usize;
    let mut rng = seed::rng(seed);
    let mut holdout = vec![false; n];
    if person_level {
        let persons: Vec<u64> = ds
            .observations
            .iter()
            .map(|o| o.person_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut by_person: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, o) in ds.observations.iter().enumerate() {
            by_person.entry(o.person_id).or_default().push(i);
        }
        let order = index::sample(&mut rng, persons.len(), persons.len());
        let mut taken = 0;
        for p in order.iter() {
            if taken >= target {
                break;
            }
            for &i in &by_person[&persons[p]] {
                holdout[i] = true;
                taken += 1;
            }
        }
    } else {
        for i in index::sample(&mut rng, n, target).iter() {
            holdout[i] = true;
        }
    }

    let mut segment_of = Vec::with_capacity(n);
    let mut role_of = Vec::with_capacity(n);
    for (o, &held) in ds.observations.iter().zip(&holdout) {
        let s = scheme.segment_of(o.distance);
        segment_of.push(s);
        role_of.push(match (held, s) {
            (true, _) => Role::Validation,
            (false, 3..=8) => Role::SubTrain,
            (false, 2 | 9) => Role::MaOnly,
            (false, _) => Role::Excluded,
        });
    }
    Ok(DataSplit {
        obs_ids: ds.observations.iter().map(|o| o.obs_id).collect(),
        segment_of,
        role_of,
        seed,
        holdout_frac,
    })
}

impl DataSplit {
    pub fn len(&self) -> usize {
        self.role_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.role_of.is_empty()
    }

    pub fn indices_where(&self, pred: impl Fn(Role) -> bool) -> Vec<usize> {
        (0..self.len()).filter(|&i| pred(self.role_of[i])).collect()
    }

    pub fn sub_train(&self) -> Vec<usize> {
        self.indices_where(|r| r == Role::SubTrain)
    }

    pub fn ma_train(&self) -> Vec<usize> {
        self.indices_where(Role::is_ma_train)
    }

    pub fn validation_set(&self) -> Vec<usize> {
        self.indices_where(Role::is_validation)
    }

    pub fn count(&self, role: Role) -> usize {
        self.role_of.iter().filter(|&&r| r == role).count()
    }

    /// `counts[s - 1][role]` for segments 1..=10, roles in [`Role::ALL`] order.
    pub fn role_counts(&self) -> Vec<[usize; 4]> {
        let k = self.segment_of.iter().copied().max().unwrap_or(0).max(10);
        let mut counts = vec![[0usize; 4]; k];
        for (&s, &r) in self.segment_of.iter().zip(&self.role_of) {
            let ri = Role::ALL.iter().position(|&x| x == r).unwrap();
            counts[s - 1][ri] += 1;
        }
        counts
    }

    /// Checks that the split lines up with `ds` observation by observation.
    pub fn check_matches(&self, ds: &ChoiceDataset) -> Result<()> {
        if self.len() != ds.n_obs() {
            return Err(Error::Shape(format!(
                "split has {} rows, dataset has {}",
                self.len(),
                ds.n_obs()
            )));
        }
        if let Some(i) = (0..self.len()).find(|&i| self.obs_ids[i] != ds.observations[i].obs_id) {
            return Err(Error::Shape(format!(
                "split row {} does not match dataset obs_id",
                i + 1
            )));
        }
        Ok(())
    }

    pub fn write_manifest<W: Write>(&self, mut w: W) -> Result<()> {
        let wrap = |e| Error::io("split manifest", e);
        writeln!(w, "# seed={} holdout_frac={}", self.seed, fmt_f64(self.holdout_frac)).map_err(wrap)?;
        writeln!(w, "obs_id,segment,role").map_err(wrap)?;
        for i in 0..self.len() {
            writeln!(w, "{},{},{}", self.obs_ids[i], self.segment_of[i], self.role_of[i]).map_err(wrap)?;
        }
        Ok(())
    }

    pub fn read_manifest<R: BufRead>(r: R) -> Result<DataSplit> {
        let mut lines = r.lines();
        let wrap = |e| Error::io("split manifest", e);
        let header = lines
            .next()
            .ok_or_else(|| Error::Schema("empty split manifest".into()))?
            .map_err(wrap)?;
        let mut seed = None;
        let mut holdout_frac = None;
        for kv in header.trim_start_matches('#').split_whitespace() {
            match kv.split_once('=') {
                Some(("seed", v)) => seed = v.parse().ok(),
                Some(("holdout_frac", v)) => holdout_frac = v.parse().ok(),
                _ => {}
            }
        }
        let (Some(seed), Some(holdout_frac)) = (seed, holdout_frac) else {
            return Err(Error::Schema("split manifest header lacks seed/holdout_frac".into()));
        };
        let mut split = DataSplit {
            obs_ids: Vec::new(),
            segment_of: Vec::new(),
            role_of: Vec::new(),
            seed,
            holdout_frac,
        };
        for (i, line) in lines.skip(1).enumerate() {
            let line = line.map_err(wrap)?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Row {
                row: i + 1,
                msg: format!("malformed manifest line `{line}`"),
            };
            let mut parts = line.split(',');
            let obs_id = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let segment = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let role = parts.next().ok_or_else(bad)?.parse()?;
            split.obs_ids.push(obs_id);
            split.segment_of.push(segment);
            split.role_of.push(role);
        }
        Ok(split)
    }
}

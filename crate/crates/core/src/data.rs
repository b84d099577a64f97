//! Submap index and point files, the synthetic place-recognition generator,
//! descriptor databases and recall evaluation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::PointCloud;
use crate::heads::{sq_dist, DescriptorTable};
use crate::model::describe;
use crate::model::ModelParams;
use crate::tensor::io::{expect_magic, read_f32s, read_u32};
use crate::tensor::Scalar;

pub const POINTS_MAGIC: &[u8; 4] = b"EPCS";
pub const INDEX_HEADER: [&str; 5] = ["id", "file", "northing", "easting", "split"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Database,
    Query,
    Train,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Database => "database",
            Split::Query => "query",
            Split::Train => "train",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "database" => Ok(Split::Database),
            "query" => Ok(Split::Query),
            "train" => Ok(Split::Train),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// One row of the index. `file` is relative to the index's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubmapRecord {
    pub id: u64,
    pub file: PathBuf,
    pub northing: f64,
    pub easting: f64,
    pub split: Split,
}

impl SubmapRecord {
    /// Planar distance in meters.
    pub fn distance(&self, other: &SubmapRecord) -> f64 {
        (self.northing - other.northing).hypot(self.easting - other.easting)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SubmapIndex {
    pub records: Vec<SubmapRecord>,
    /// Directory that record paths are resolved against.
    pub root: PathBuf,
}

impl SubmapIndex {
    pub fn new(records: Vec<SubmapRecord>, root: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id) {
                return Err(Error::DuplicateId(r.id));
            }
            if !r.northing.is_finite() || !r.easting.is_finite() {
                return Err(Error::invalid(format!("submap {} has a non-finite coordinate", r.id)));
            }
        }
        Ok(SubmapIndex {
            records,
            root: root.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&SubmapRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn split(&self, split: Split) -> Vec<&SubmapRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn path_of(&self, record: &SubmapRecord) -> PathBuf {
        self.root.join(&record.file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        w.write_record(INDEX_HEADER)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn load_index(path: &Path) -> Result<SubmapIndex> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = reader.headers()?.clone();
    if header.iter().map(str::trim).ne(INDEX_HEADER) {
        return Err(Error::Header {
            what: "index",
            detail: format!("expected `{}`, found `{}`", INDEX_HEADER.join(","), header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut records = Vec::new();
    for (i, row) in reader.deserialize::<SubmapRecord>().enumerate() {
        let line = i + 2;
        let r = row.map_err(|e| Error::IndexRecord {
            line,
            detail: e.to_string(),
        })?;
        if !r.northing.is_finite() || !r.easting.is_finite() {
            return Err(Error::IndexRecord {
                line,
                detail: "non-finite coordinate".into(),
            });
        }
        records.push(r);
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    SubmapIndex::new(records, root)
}

pub fn write_point_file<W: Write>(w: &mut W, cloud: &PointCloud) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + cloud.len() * 12);
    buf.extend_from_slice(POINTS_MAGIC);
    buf.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in cloud.points() {
        for c in p {
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads an "EPCS" point file; a short payload reports both point counts.
pub fn read_point_file<R: Read>(r: &mut R) -> Result<PointCloud> {
    expect_magic(r, POINTS_MAGIC, "point file")?;
    let n = read_u32(r, "point file")? as usize;
    let values = read_f32s(r, n * 3, "point file").map_err(|e| match e {
        Error::Truncated { expected, found, .. } => Error::Truncated {
            what: "point file (points)",
            expected: expected / 3,
            found: found / 3,
        },
        other => other,
    })?;
    PointCloud::new(values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

pub fn save_submap(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_point_file(&mut w, cloud)?;
    w.flush()?;
    Ok(())
}

pub fn load_submap(index: &SubmapIndex, record: &SubmapRecord) -> Result<PointCloud> {
    let path = index.path_of(record);
    let wrap = |e: Error| Error::Submap {
        id: record.id,
        path: path.clone(),
        source: Box::new(e),
    };
    let f = File::open(&path).map_err(|e| wrap(e.into()))?;
    read_point_file(&mut BufReader::new(f)).map_err(wrap)
}

/// Index plus every referenced cloud, loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub index: SubmapIndex,
    pub clouds: HashMap<u64, PointCloud>,
}

impl Dataset {
    pub fn load(index_path: &Path) -> Result<Self> {
        let index = load_index(index_path)?;
        Dataset::from_index(index)
    }

    pub fn from_index(index: SubmapIndex) -> Result<Self> {
        let clouds = index
            .records
            .par_iter()
            .map(|r| load_submap(&index, r).map(|c| (r.id, c)))
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(Dataset { index, clouds })
    }

    pub fn cloud(&self, id: u64) -> Result<&PointCloud> {
        self.clouds
            .get(&id)
            .ok_or_else(|| Error::invalid(format!("submap {id} is not loaded")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rotation {
    None,
    Yaw,
}

impl FromStr for Rotation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Rotation::None),
            "yaw" => Ok(Rotation::Yaw),
            other => Err(Error::invalid(format!("unknown rotation `{other}` (expected none or yaw)"))),
        }
    }
}

impl fmt::Display for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rotation::None => "none",
            Rotation::Yaw => "yaw",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub place_count: usize,
    pub traversal_count: usize,
    pub grid_spacing: f64,
    pub noise_sigma: f64,
    pub dropout_fraction: f64,
    pub points_per_submap: usize,
    pub rotation: Rotation,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            place_count: 16,
            traversal_count: 5,
            grid_spacing: 200.0,
            noise_sigma: 0.05,
            dropout_fraction: 0.1,
            points_per_submap: 256,
            rotation: Rotation::None,
            seed: 0,
        }
    }
}

/// Half-width of a submap's scene, in meters. Coordinates are stored divided
/// by this so that clouds fit in roughly `[-1, 1]³`.
pub const SCENE_EXTENT: f64 = 20.0;
/// Maximum offset of a traversal's tag from its place center.
pub const POSITION_JITTER: f64 = 5.0;

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.place_count == 0 {
            return Err(Error::invalid("place_count must be positive"));
        }
        if self.traversal_count < 2 {
            return Err(Error::invalid("traversal_count must be at least 2"));
        }
        if !(self.grid_spacing > 100.0) {
            return Err(Error::invalid(format!(
                "grid_spacing must exceed 100 m so distinct places are negatives, got {}",
                self.grid_spacing
            )));
        }
        if !(self.noise_sigma >= 0.0) || !(0.0..1.0).contains(&self.dropout_fraction) {
            return Err(Error::invalid("noise_sigma must be >= 0 and dropout_fraction in [0, 1)"));
        }
        if self.points_per_submap < 2 {
            return Err(Error::invalid("points_per_submap must be at least 2"));
        }
        Ok(())
    }

    /// The last traversal is the query set, the one before it the database,
    /// and all earlier ones are training data.
    pub fn split_of(&self, traversal: usize) -> Split {
        if traversal + 1 == self.traversal_count {
            Split::Query
        } else if traversal + 2 == self.traversal_count {
            Split::Database
        } else {
            Split::Train
        }
    }
}

fn place_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Scene of one place in meters: a tilted ground patch, a few walls and
/// scattered poles and boxes.
fn base_scene(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    let e = SCENE_EXTENT;
    let mut pts = Vec::with_capacity(n);
    let n_ground = n * 3 / 10;
    let n_walls = n * 4 / 10;
    let (sx, sy) = (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
    for _ in 0..n_ground {
        let (x, y) = (rng.random_range(-e..e), rng.random_range(-e..e));
        pts.push([x, y, sx * x + sy * y]);
    }
    let walls = rng.random_range(2..=5);
    let wall_specs: Vec<_> = (0..walls)
        .map(|_| {
            let c = [rng.random_range(-0.7 * e..0.7 * e), rng.random_range(-0.7 * e..0.7 * e)];
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let len = rng.random_range(0.3 * e..1.0 * e);
            let h = rng.random_range(2.0..8.0);
            (c, theta, len, h)
        })
        .collect();
    for i in 0..n_walls {
        let (c, theta, len, h) = wall_specs[i % walls];
        let t = rng.random_range(-0.5..0.5) * len;
        let z = rng.random_range(0.0..h);
        pts.push([c[0] + t * theta.cos(), c[1] + t * theta.sin(), z]);
    }
    let objects = rng.random_range(4..=10);
    let object_specs: Vec<_> = (0..objects)
        .map(|_| {
            let c = [rng.random_range(-0.9 * e..0.9 * e), rng.random_range(-0.9 * e..0.9 * e)];
            let pole = rng.random_bool(0.5);
            let r = if pole { rng.random_range(0.1..0.4) } else { rng.random_range(0.5..2.0) };
            let h = rng.random_range(1.0..6.0);
            (c, pole, r, h)
        })
        .collect();
    while pts.len() < n {
        let (c, pole, r, h) = object_specs[pts.len() % objects];
        let z = rng.random_range(0.0..h);
        if pole {
            let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            pts.push([c[0] + r * a.cos(), c[1] + r * a.sin(), z]);
        } else {
            pts.push([c[0] + rng.random_range(-r..r), c[1] + rng.random_range(-r..r), z]);
        }
    }
    pts
}

/// One observation of a place: rotation, noise and dropout are drawn from
/// the traversal's own stream; survivors keep their order and are padded by
/// resampling to exactly `n` points.
fn observe(base: &[[f64; 3]], cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let n = cfg.points_per_submap;
    let yaw = match cfg.rotation {
        Rotation::None => 0.0,
        Rotation::Yaw => rng.random_range(0.0..std::f64::consts::TAU),
    };
    let (s, c) = yaw.sin_cos();
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut kept: Vec<usize> = (0..base.len())
        .filter(|_| cfg.dropout_fraction == 0.0 || !rng.random_bool(cfg.dropout_fraction))
        .collect();
    if kept.is_empty() {
        kept.push(rng.random_range(0..base.len()));
    }
    while kept.len() < n {
        let pick = kept[rng.random_range(0..kept.len())];
        kept.push(pick);
    }
    kept.truncate(n);
    let coords = kept
        .iter()
        .map(|&i| {
            let [x, y, z] = base[i];
            let mut p = [c * x - s * y, s * x + c * y, z];
            if cfg.noise_sigma > 0.0 {
                for v in &mut p {
                    *v += noise.sample(rng);
                }
            }
            p.map(|v| (v / SCENE_EXTENT) as f32)
        })
        .collect();
    PointCloud::new(coords)
}

/// Writes `index.csv` and `submaps/*.bin` under `out`. Submap ids run
/// traversal-major: `id = traversal·place_count + place`.
pub fn generate_synthetic(cfg: &SyntheticConfig, out: &Path) -> Result<SubmapIndex> {
    cfg.validate()?;
    let sub = out.join("submaps");
    fs::create_dir_all(&sub)?;
    let cols = (cfg.place_count as f64).sqrt().ceil() as usize;
    let bases: Vec<Vec<[f64; 3]>> = (0..cfg.place_count)
        .map(|p| base_scene(&mut place_rng(cfg.seed, p as u64), cfg.points_per_submap))
        .collect();
    let mut records = Vec::with_capacity(cfg.place_count * cfg.traversal_count);
    for t in 0..cfg.traversal_count {
        for (p, base) in bases.iter().enumerate() {
            let id = (t * cfg.place_count + p) as u64;
            let mut rng = place_rng(cfg.seed, (1 + id) << 20);
            let cloud = observe(base, cfg, &mut rng)?;
            let r = POSITION_JITTER * rng.random::<f64>().sqrt();
            let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let file = PathBuf::from("submaps").join(format!("{id:06}.bin"));
            save_submap(&out.join(&file), &cloud)?;
            records.push(SubmapRecord {
                id,
                file,
                northing: (p / cols) as f64 * cfg.grid_spacing + r * a.cos(),
                easting: (p % cols) as f64 * cfg.grid_spacing + r * a.sin(),
                split: cfg.split_of(t),
            });
        }
    }
    let index = SubmapIndex::new(records, out)?;
    index.save(&out.join("index.csv"))?;
    Ok(index)
}

/// Descriptors of every submap in `split`, in index order.
pub fn build_descriptor_db<T: Scalar>(model: &ModelParams<T>, dataset: &Dataset, split: Split) -> Result<DescriptorTable> {
    describe_records(model, dataset, &dataset.index.split(split))
}

/// Descriptors of every submap in the index, in index order.
pub fn build_full_descriptor_db<T: Scalar>(model: &ModelParams<T>, dataset: &Dataset) -> Result<DescriptorTable> {
    let records: Vec<&SubmapRecord> = dataset.index.records.iter().collect();
    describe_records(model, dataset, &records)
}

fn describe_records<T: Scalar>(model: &ModelParams<T>, dataset: &Dataset, records: &[&SubmapRecord]) -> Result<DescriptorTable> {
    let descs = records
        .par_iter()
        .map(|r| {
            let cloud = dataset.cloud(r.id)?;
            describe(model, &[cloud])
                .map(|mut d| d.remove(0))
                .map_err(|e| Error::Submap {
                    id: r.id,
                    path: dataset.index.path_of(r),
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = DescriptorTable::new(model.config.output_dim);
    for (r, d) in records.iter().zip(&descs) {
        table.push(r.id, &d.values)?;
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub recall_at_one_percent: f64,
    /// K used for recall@1%.
    pub one_percent_k: usize,
    pub query_count: usize,
    pub database_count: usize,
    pub success_radius: f64,
}

pub const DEFAULT_SUCCESS_RADIUS: f64 = 25.0;

/// `max(round(0.01·db), 1)`, rounding halves up.
pub fn one_percent_k(database_count: usize) -> usize {
    ((database_count as f64 * 0.01 + 0.5).floor() as usize).max(1)
}

/// Ranks the database for each query by squared descriptor distance (ties by
/// lower id) and counts a hit at K when one of the top K lies strictly within
/// `radius` meters. Every query counts in the denominator.
pub fn evaluate(
    db: &DescriptorTable,
    queries: &DescriptorTable,
    index: &SubmapIndex,
    ks: &[usize],
    radius: f64,
) -> Result<EvalReport> {
    if db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    if db.dim != queries.dim {
        return Err(Error::shape("evaluate", &[db.dim], &[queries.dim]));
    }
    if ks.contains(&0) {
        return Err(Error::invalid("K must be positive"));
    }
    let db_ids: HashSet<u64> = db.ids.iter().copied().collect();
    if let Some(id) = queries.ids.iter().find(|id| db_ids.contains(id)) {
        return Err(Error::invalid(format!("submap {id} is both a query and a database entry")));
    }
    let locate = |id: u64| {
        index
            .get(id)
            .ok_or_else(|| Error::invalid(format!("submap {id} is not in the index")))
    };
    let db_recs = db.ids.iter().map(|&id| locate(id)).collect::<Result<Vec<_>>>()?;
    let k1 = one_percent_k(db.len());
    let mut all_ks: Vec<usize> = ks.to_vec();
    all_ks.push(k1);
    // first rank (1-based) at which each query succeeds, if any
    let first_hits = (0..queries.len())
        .into_par_iter()
        .map(|q| {
            let qrec = locate(queries.ids[q])?;
            let qv = queries.get(q);
            let mut order: Vec<(f64, u64, usize)> =
                (0..db.len()).map(|i| (sq_dist(qv, db.get(i)), db.ids[i], i)).collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            Ok(order.iter().position(|&(_, _, i)| qrec.distance(db_recs[i]) < radius).map(|p| p + 1))
        })
        .collect::<Result<Vec<Option<usize>>>>()?;
    let nq = queries.len().max(1) as f64;
    let recall = |k: usize| first_hits.iter().filter(|h| h.is_some_and(|r| r <= k)).count() as f64 / nq;
    Ok(EvalReport {
        recall_at: ks.iter().map(|&k| (k, recall(k))).collect(),
        recall_at_one_percent: recall(k1),
        one_percent_k: k1,
        query_count: queries.len(),
        database_count: db.len(),
        success_radius: radius,
    })
}

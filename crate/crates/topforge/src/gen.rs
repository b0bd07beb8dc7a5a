//! Seeded random generation of TOP instances and JSON-lines dataset files.
//!
//! Generation is a pure function of `(seed, stream_index, config)`: every
//! instance draws from a ChaCha8 stream cipher RNG seeded with the config
//! seed and keyed on the stream index, so datasets are reproducible across
//! platforms and instances can be generated in any order or in parallel.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::top::{Instance, Point};

/// Current on-disk schema version for dataset lines.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("schema error at line {line}: {msg}")]
    Schema { line: usize, msg: String },
}

/// How region prizes are assigned at generation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrizeScheme {
    /// Every region is worth exactly 1.
    Constant,
    /// Prizes drawn i.i.d. uniform on [0.01, 1].
    Uniform,
    /// Prize grows with distance from the start depot, in (0, 1], the
    /// farthest region earning exactly 1.
    DistanceBased,
}

impl std::fmt::Display for PrizeScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PrizeScheme::Constant => write!(f, "constant"),
            PrizeScheme::Uniform => write!(f, "uniform"),
            PrizeScheme::DistanceBased => write!(f, "distance"),
        }
    }
}

impl std::str::FromStr for PrizeScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constant" | "const" => Ok(PrizeScheme::Constant),
            "uniform" | "unif" => Ok(PrizeScheme::Uniform),
            "distance" | "dist" | "distance_based" => Ok(PrizeScheme::DistanceBased),
            other => Err(format!("unknown prize scheme `{other}`")),
        }
    }
}

/// Generation parameters for one family of instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Region count.
    pub n: usize,
    /// Agent count stored alongside each generated instance.
    pub m: usize,
    /// Shared time budget.
    pub t_max: f64,
    pub prize_scheme: PrizeScheme,
    /// When set, the end depot coincides with the start depot.
    pub single_depot: bool,
    pub seed: u64,
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n == 0 {
            return Err("n must be >= 1".into());
        }
        if self.m == 0 {
            return Err("m must be >= 1".into());
        }
        if !(self.t_max > 0.0) {
            return Err("t_max must be > 0".into());
        }
        Ok(())
    }
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n: 20,
            m: 2,
            t_max: 2.0,
            prize_scheme: PrizeScheme::Constant,
            single_depot: true,
            seed: 0,
        }
    }
}

/// An instance together with the fleet size it was generated for, which is
/// what one dataset line holds.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub instance: Instance,
    pub m: usize,
}

/// Deterministically generates the instance at `stream_index` under `config`.
///
/// Region and depot coordinates are i.i.d. uniform on the unit square;
/// prizes follow the configured scheme.
pub fn generate_instance(config: &GenConfig, stream_index: u64) -> Instance {
    debug_assert!(config.validate().is_ok());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream_index);

    let coords: Vec<Point> = (0..config.n).map(|_| Point::new(rng.gen(), rng.gen())).collect();
    let depot_start = Point::new(rng.gen(), rng.gen());
    let depot_end = if config.single_depot {
        depot_start
    } else {
        Point::new(rng.gen(), rng.gen())
    };
    let prizes = prize_assign(config.prize_scheme, &coords, depot_start, &mut rng);

    Instance::new(coords, prizes, depot_start, depot_end, config.t_max, 1.0)
        .expect("generated fields satisfy instance invariants")
}

/// Convenience wrapper pairing [`generate_instance`] with the config's `m`.
pub fn generate_item(config: &GenConfig, stream_index: u64) -> DatasetItem {
    DatasetItem { instance: generate_instance(config, stream_index), m: config.m }
}

/// Assigns prizes to `coords` under the given scheme.
///
/// `DistanceBased` uses `p_i = (1 + floor(99 * d_i / max_j d_j)) / 100`,
/// so prizes lie in [0.01, 1] and grow with distance from the depot. When
/// every region coincides with the depot the prize is 0.01 uniformly.
pub fn prize_assign(
    scheme: PrizeScheme,
    coords: &[Point],
    depot: Point,
    rng: &mut impl Rng,
) -> Vec<f64> {
    assert!(!coords.is_empty(), "prize_assign needs at least one region");
    match scheme {
        PrizeScheme::Constant => vec![1.0; coords.len()],
        PrizeScheme::Uniform => {
            coords.iter().map(|_| rng.gen::<f64>() * 0.99 + 0.01).collect()
        }
        PrizeScheme::DistanceBased => {
            let dists: Vec<f64> = coords.iter().map(|c| c.dist(&depot)).collect();
            let max = dists.iter().cloned().fold(0.0f64, f64::max);
            if max == 0.0 {
                return vec![0.01; coords.len()];
            }
            dists
                .iter()
                .map(|d| (1.0 + (99.0 * d / max).floor()) / 100.0)
                .collect()
        }
    }
}

#[derive(Serialize, Deserialize)]
struct InstanceLine {
    v: u32,
    coords: Vec<[f64; 2]>,
    prizes: Vec<f64>,
    depot_start: [f64; 2],
    depot_end: [f64; 2],
    t_max: f64,
    m: usize,
}

impl From<&DatasetItem> for InstanceLine {
    fn from(item: &DatasetItem) -> Self {
        let inst = &item.instance;
        InstanceLine {
            v: SCHEMA_VERSION,
            coords: inst.coords().iter().map(|p| [p.x, p.y]).collect(),
            prizes: inst.prizes().to_vec(),
            depot_start: [inst.depot_start().x, inst.depot_start().y],
            depot_end: [inst.depot_end().x, inst.depot_end().y],
            t_max: inst.t_max(),
            m: item.m,
        }
    }
}

impl InstanceLine {
    fn into_item(self, line: usize) -> Result<DatasetItem, DatasetError> {
        if self.v != SCHEMA_VERSION {
            return Err(DatasetError::Schema {
                line,
                msg: format!("unsupported schema version {} (expected {SCHEMA_VERSION})", self.v),
            });
        }
        if self.m == 0 {
            return Err(DatasetError::Schema { line, msg: "m must be >= 1".into() });
        }
        let coords = self.coords.iter().map(|c| Point::new(c[0], c[1])).collect();
        let instance = Instance::new(
            coords,
            self.prizes,
            Point::new(self.depot_start[0], self.depot_start[1]),
            Point::new(self.depot_end[0], self.depot_end[1]),
            self.t_max,
            1.0,
        )
        .map_err(|e| DatasetError::Schema { line, msg: e.to_string() })?;
        Ok(DatasetItem { instance, m: self.m })
    }
}

/// Parses one dataset line. `line_no` is 1-based and used in error messages.
pub fn parse_line(text: &str, line_no: usize) -> Result<DatasetItem, DatasetError> {
    let parsed: InstanceLine = serde_json::from_str(text).map_err(|e| {
        // serde_json reports missing fields as "data" errors; surface those
        // as schema errors, everything else as parse errors.
        if e.is_data() {
            DatasetError::Schema { line: line_no, msg: e.to_string() }
        } else {
            DatasetError::Parse { line: line_no, msg: e.to_string() }
        }
    })?;
    parsed.into_item(line_no)
}

/// Serializes one item to its JSON line (no trailing newline).
pub fn format_line(item: &DatasetItem) -> String {
    serde_json::to_string(&InstanceLine::from(item)).expect("instance serializes")
}

/// Writes a UTF-8 JSON-lines dataset, one instance per line.
pub fn save_dataset(items: &[DatasetItem], path: &Path) -> Result<(), DatasetError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for item in items {
        writeln!(w, "{}", format_line(item))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a JSON-lines dataset. Blank lines are not tolerated; every line
/// must parse and satisfy the instance invariants.
pub fn load_dataset(path: &Path) -> Result<Vec<DatasetItem>, DatasetError> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut items = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        items.push(parse_line(&line, idx + 1)?);
    }
    Ok(items)
}

//! Exhaustive generation of 4-aircraft traffic configurations.
//!
//! Every aircraft flies from an outer-ring centroid to another outer-ring
//! centroid. The generator enumerates all configurations satisfying the
//! mission constraints:
//!
//! 1. aircraft ids are `0..=3`, each used once;
//! 2. origins and destinations are outer-ring cell centroids;
//! 3. origins are pairwise distinct;
//! 4. origin and destination are far enough apart under a [`SeparationPredicate`].
//!
//! Output order is lexicographic over `(origin, destination)` of aircraft 0,
//! then aircraft 1, and so on.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{hex_distance, ring_steps, rotate_cell, Airspace, CellId};

pub const FLEET_SIZE: usize = 4;
pub const GENERATOR_VERSION: &str = concat!("cellsim-generator/", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredicateMode {
    /// Steps along the 12-cell outer ring.
    RingSteps,
    /// Lattice steps on the hexagonal grid.
    HexGridDistance,
    /// Euclidean centroid distance in meters.
    EuclideanMin,
}

impl std::str::FromStr for PredicateMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring_steps" | "ring" => Ok(PredicateMode::RingSteps),
            "hex_grid_distance" | "hex" => Ok(PredicateMode::HexGridDistance),
            "euclidean_min" | "euclidean" => Ok(PredicateMode::EuclideanMin),
            other => Err(Error::domain(format!("unknown predicate mode `{other}`"))),
        }
    }
}

impl fmt::Display for PredicateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PredicateMode::RingSteps => "ring_steps",
            PredicateMode::HexGridDistance => "hex_grid_distance",
            PredicateMode::EuclideanMin => "euclidean_min",
        })
    }
}

/// Minimum origin-destination separation (constraint 4).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationPredicate {
    pub mode: PredicateMode,
    /// Steps for the ring and hex modes, meters for the Euclidean mode.
    pub threshold: f64,
}

impl SeparationPredicate {
    pub fn new(mode: PredicateMode, threshold: f64) -> Result<Self> {
        if !threshold.is_finite() || threshold < 0.0 {
            return Err(Error::domain(format!("invalid predicate threshold {threshold}")));
        }
        Ok(SeparationPredicate { mode, threshold })
    }

    /// True when `origin` and `destination` are far enough apart.
    pub fn allows(&self, airspace: &Airspace, origin: CellId, destination: CellId) -> bool {
        if origin == destination {
            return false;
        }
        match self.mode {
            PredicateMode::RingSteps => {
                if origin.ring() != 2 || destination.ring() != 2 {
                    return false;
                }
                f64::from(ring_steps(origin, destination)) >= self.threshold
            }
            PredicateMode::HexGridDistance => f64::from(hex_distance(origin, destination)) >= self.threshold,
            PredicateMode::EuclideanMin => {
                // tolerance absorbs rounding in irrational centroid distances
                let d = airspace.centroid(origin).distance(airspace.centroid(destination));
                d >= self.threshold - 1e-6
            }
        }
    }
}

impl Default for SeparationPredicate {
    /// At least three cells strictly between origin and destination on the lattice.
    fn default() -> Self {
        SeparationPredicate { mode: PredicateMode::HexGridDistance, threshold: 4.0 }
    }
}

/// How aircraft ids relate to the chosen origins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdAssignment {
    /// Ids follow ascending origin cell id: the origin set is a combination.
    OriginOrdered,
    /// Every permutation of ids over the origins is a distinct configuration.
    Permuted,
}

impl std::str::FromStr for IdAssignment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "origin_ordered" => Ok(IdAssignment::OriginOrdered),
            "permuted" => Ok(IdAssignment::Permuted),
            other => Err(Error::domain(format!("unknown id assignment `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorOptions {
    pub predicate: SeparationPredicate,
    pub distinct_destinations: bool,
    pub id_assignment: IdAssignment,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        GeneratorOptions {
            predicate: SeparationPredicate::default(),
            distinct_destinations: false,
            id_assignment: IdAssignment::OriginOrdered,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MissionAssignment {
    pub aircraft_id: u8,
    pub origin: CellId,
    pub destination: CellId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TrafficConfiguration {
    pub assignments: [MissionAssignment; FLEET_SIZE],
}

impl TrafficConfiguration {
    /// Builds a configuration from `(origin, destination)` pairs for ids 0..=3.
    pub fn from_pairs(pairs: [(u8, u8); FLEET_SIZE]) -> Result<Self> {
        let mut assignments = [MissionAssignment {
            aircraft_id: 0,
            origin: CellId::CENTER,
            destination: CellId::CENTER,
        }; FLEET_SIZE];
        for (i, (o, d)) in pairs.into_iter().enumerate() {
            assignments[i] = MissionAssignment {
                aircraft_id: i as u8,
                origin: CellId::new(o)?,
                destination: CellId::new(d)?,
            };
        }
        Ok(TrafficConfiguration { assignments })
    }

    fn key(&self) -> [u8; 2 * FLEET_SIZE] {
        let mut k = [0; 2 * FLEET_SIZE];
        for (i, a) in self.assignments.iter().enumerate() {
            k[2 * i] = a.origin.get();
            k[2 * i + 1] = a.destination.get();
        }
        k
    }

    /// Rotates every origin and destination clockwise by `k × 60°`.
    ///
    /// Under [`IdAssignment::OriginOrdered`] ids are reassigned by ascending
    /// origin after rotation so the result stays in canonical id order.
    pub fn rotated(&self, k: i32, ids: IdAssignment) -> Self {
        let mut out = *self;
        for a in &mut out.assignments {
            a.origin = rotate_cell(a.origin, k);
            a.destination = rotate_cell(a.destination, k);
        }
        if ids == IdAssignment::OriginOrdered {
            out.assignments.sort_by_key(|a| a.origin);
            for (i, a) in out.assignments.iter_mut().enumerate() {
                a.aircraft_id = i as u8;
            }
        }
        out
    }

    /// Stable 64-bit digest used as a row key in result files.
    pub fn hash_hex(&self) -> String {
        let digest = Sha256::digest(self.key());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// Constraint 1: ids `0..=3`, each once.
    AircraftId,
    /// Constraint 2: origin and destination are outer-ring centroids.
    OuterRingEndpoints,
    /// Constraint 3: origins pairwise distinct.
    DistinctOrigins,
    /// Constraint 4: origin-destination separation predicate.
    OriginDestinationSeparation,
    /// Optional: destinations pairwise distinct.
    DistinctDestinations,
    /// Ids must follow ascending origin under origin-ordered assignment.
    IdOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub constraint: Constraint,
    pub aircraft_id: u8,
}

/// Lists every constraint violated by `cfg`; empty iff the configuration is legal.
pub fn validate_configuration(cfg: &TrafficConfiguration, airspace: &Airspace, opts: &GeneratorOptions) -> Vec<Violation> {
    let mut out = Vec::new();
    let a = &cfg.assignments;
    for (slot, m) in a.iter().enumerate() {
        if m.aircraft_id as usize >= FLEET_SIZE || a[..slot].iter().any(|p| p.aircraft_id == m.aircraft_id) {
            out.push(Violation { constraint: Constraint::AircraftId, aircraft_id: m.aircraft_id });
        }
        if m.origin.ring() != 2 || m.destination.ring() != 2 {
            out.push(Violation { constraint: Constraint::OuterRingEndpoints, aircraft_id: m.aircraft_id });
        }
        if a[..slot].iter().any(|p| p.origin == m.origin) {
            out.push(Violation { constraint: Constraint::DistinctOrigins, aircraft_id: m.aircraft_id });
        }
        if !opts.predicate.allows(airspace, m.origin, m.destination) {
            out.push(Violation { constraint: Constraint::OriginDestinationSeparation, aircraft_id: m.aircraft_id });
        }
        if opts.distinct_destinations && a[..slot].iter().any(|p| p.destination == m.destination) {
            out.push(Violation { constraint: Constraint::DistinctDestinations, aircraft_id: m.aircraft_id });
        }
        if opts.id_assignment == IdAssignment::OriginOrdered && slot > 0 && a[slot - 1].origin >= m.origin {
            out.push(Violation { constraint: Constraint::IdOrder, aircraft_id: m.aircraft_id });
        }
    }
    out
}

/// Enumerates every legal configuration in lexicographic order.
pub fn generate_configurations(airspace: &Airspace, opts: &GeneratorOptions) -> Vec<TrafficConfiguration> {
    let outer: Vec<CellId> = CellId::outer().collect();
    let legal: Vec<Vec<CellId>> = outer
        .iter()
        .map(|&o| outer.iter().copied().filter(|&d| opts.predicate.allows(airspace, o, d)).collect())
        .collect();

    let mut out = Vec::new();
    let mut stack = [MissionAssignment { aircraft_id: 0, origin: CellId::CENTER, destination: CellId::CENTER };
        FLEET_SIZE];
    extend(0, &outer, &legal, opts, &mut stack, &mut out);
    out
}

fn extend(
    slot: usize,
    outer: &[CellId],
    legal: &[Vec<CellId>],
    opts: &GeneratorOptions,
    stack: &mut [MissionAssignment; FLEET_SIZE],
    out: &mut Vec<TrafficConfiguration>,
) {
    if slot == FLEET_SIZE {
        out.push(TrafficConfiguration { assignments: *stack });
        return;
    }
    for (oi, &origin) in outer.iter().enumerate() {
        let taken = stack[..slot].iter().any(|m| m.origin == origin);
        let ordered = opts.id_assignment == IdAssignment::Permuted || slot == 0 || stack[slot - 1].origin < origin;
        if taken || !ordered {
            continue;
        }
        for &destination in &legal[oi] {
            if opts.distinct_destinations && stack[..slot].iter().any(|m| m.destination == destination) {
                continue;
            }
            stack[slot] = MissionAssignment { aircraft_id: slot as u8, origin, destination };
            extend(slot + 1, outer, legal, opts, stack, out);
        }
    }
}

/// Lexicographically smallest legal member of the 6-element rotation orbit.
pub fn canonicalize_rotation(
    cfg: &TrafficConfiguration,
    airspace: &Airspace,
    opts: &GeneratorOptions,
) -> TrafficConfiguration {
    (0..6)
        .map(|k| cfg.rotated(k, opts.id_assignment))
        .filter(|r| validate_configuration(r, airspace, opts).is_empty())
        .min_by_key(|r| r.key())
        .unwrap_or(*cfg)
}

/// Keeps one representative (the canonical form) per rotation orbit, preserving order.
pub fn dedup_rotations(
    set: &[TrafficConfiguration],
    airspace: &Airspace,
    opts: &GeneratorOptions,
) -> Vec<TrafficConfiguration> {
    set.iter().filter(|c| canonicalize_rotation(c, airspace, opts) == **c).copied().collect()
}

/// Uniform sample of `n` distinct indices into a set of length `len`,
/// returned in ascending order. Reproducible from `seed`.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > len {
        return Err(Error::domain(format!("sample size {n} exceeds set size {len}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, len, n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Uniform sample without replacement, in set order.
pub fn sample_configurations(
    set: &[TrafficConfiguration],
    n: usize,
    seed: u64,
) -> Result<Vec<TrafficConfiguration>> {
    Ok(sample_indices(set.len(), n, seed)?.into_iter().map(|i| set[i]).collect())
}

/// Header record of a scenario-set file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetHeader {
    pub kind: String,
    pub generator_version: String,
    pub options: GeneratorOptions,
    pub cell_radius: f64,
    pub dedup_rotations: bool,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SetLine {
    index: usize,
    assignments: [MissionAssignment; FLEET_SIZE],
}

/// A scenario set as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    pub header: SetHeader,
    pub configurations: Vec<TrafficConfiguration>,
}

impl ScenarioSet {
    pub fn new(
        configurations: Vec<TrafficConfiguration>,
        options: GeneratorOptions,
        cell_radius: f64,
        dedup_rotations: bool,
    ) -> Self {
        let header = SetHeader {
            kind: "header".into(),
            generator_version: GENERATOR_VERSION.into(),
            options,
            cell_radius,
            dedup_rotations,
            count: configurations.len(),
        };
        ScenarioSet { header, configurations }
    }

    /// JSONL: one header line, then one line per configuration.
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        serde_json::to_writer(&mut buf, &self.header)?;
        buf.push(b'\n');
        for (index, cfg) in self.configurations.iter().enumerate() {
            serde_json::to_writer(&mut buf, &SetLine { index, assignments: cfg.assignments })?;
            buf.push(b'\n');
        }
        Ok(buf)
    }

    pub fn from_reader(reader: impl BufRead, path: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Format { path: path.to_string(), message: format!("line {line}: {msg}") };
        let mut lines = reader.lines();
        let header_line = lines.next().ok_or_else(|| bad(1, "empty file".into()))??;
        let header: SetHeader = serde_json::from_str(&header_line).map_err(|e| bad(1, e.to_string()))?;
        let mut configurations = Vec::with_capacity(header.count);
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SetLine = serde_json::from_str(&line).map_err(|e| bad(n + 2, e.to_string()))?;
            if rec.index != configurations.len() {
                return Err(bad(n + 2, format!("expected index {}, found {}", configurations.len(), rec.index)));
            }
            configurations.push(TrafficConfiguration { assignments: rec.assignments });
        }
        if configurations.len() != header.count {
            return Err(bad(0, format!("header count {} but {} records", header.count, configurations.len())));
        }
        Ok(ScenarioSet { header, configurations })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(std::io::BufReader::new(file), &path.display().to_string())
    }

    /// Loads a set and checks it against its `.sha256` file when one exists.
    /// Returns the set and the checksum of its bytes.
    pub fn load_verified(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path)?;
        let sum = sha256_hex(&bytes);
        if let Ok(recorded) = std::fs::read_to_string(checksum_path(path)) {
            let recorded = recorded.split_whitespace().next().unwrap_or_default();
            if recorded != sum {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    message: format!("checksum mismatch: recorded {recorded}, actual {sum}"),
                });
            }
        }
        let set = Self::from_reader(&bytes[..], &path.display().to_string())?;
        Ok((set, sum))
    }

    /// Writes the set plus a `<path>.sha256` checksum file; returns the checksum.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_jsonl()?;
        let sum = sha256_hex(&bytes);
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        std::fs::write(checksum_path(path), format!("{sum}  {}\n", file_name(path)))?;
        Ok(sum)
    }
}

pub fn checksum_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".sha256");
    s.into()
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

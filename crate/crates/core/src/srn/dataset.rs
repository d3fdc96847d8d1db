//! Snapshot datasets: generation from simulators and CSV/JSON storage.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::cle::{cle_dt_too_large, sde_path, ChemicalLangevin, SdeOptions};
use super::gillespie::gillespie_at_times;
use super::network::ReactionNetwork;
use crate::error::{PfiError, Result};
use crate::gaussian::{ou_propagate, OUParams, PointCloud};
use crate::par;
use crate::rng::{stream, Purpose, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceTag {
    Counts,
    Concentration,
}

/// Cross-sectional snapshots; `snapshots[i]` is a d×n cloud at `times[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotDataset {
    pub species: Vec<String>,
    pub times: Vec<f64>,
    pub snapshots: Vec<PointCloud>,
    pub meta: DatasetMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub network: String,
    pub space: SpaceTag,
    pub volume: f64,
    pub seed: u64,
    #[serde(default)]
    pub simulator: String,
    #[serde(default)]
    pub clamps: u64,
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl DatasetMeta {
    /// Metadata for data not produced by a reaction network.
    pub fn synthetic(name: &str) -> Self {
        DatasetMeta {
            network: name.into(),
            space: SpaceTag::Concentration,
            volume: 1.0,
            seed: 0,
            simulator: "synthetic".into(),
            clamps: 0,
            extra: Default::default(),
        }
    }
}

impl SnapshotDataset {
    pub fn new(species: Vec<String>, times: Vec<f64>, snapshots: Vec<PointCloud>, meta: DatasetMeta) -> Result<Self> {
        let ds = SnapshotDataset { species, times, snapshots, meta };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.snapshots.len() || self.times.is_empty() {
            return Err(PfiError::Dimension(format!(
                "{} times for {} snapshots",
                self.times.len(),
                self.snapshots.len()
            )));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(PfiError::InvalidParameter("snapshot times must be increasing".into()));
        }
        let d = self.species.len();
        for (i, s) in self.snapshots.iter().enumerate() {
            if s.nrows() != d {
                return Err(PfiError::Dimension(format!("snapshot {i} has {} rows, expected {d}", s.nrows())));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(PfiError::NonFinite(format!("snapshot {i}")));
            }
            if self.meta.space == SpaceTag::Counts && s.iter().any(|&v| v < 0.0) {
                return Err(PfiError::InvalidParameter(format!("negative count in snapshot {i}")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.species.len()
    }

    /// Number of transitions K (one less than the number of snapshots).
    pub fn num_intervals(&self) -> usize {
        self.times.len() - 1
    }

    /// Common spacing, if the times are uniform to 1e-9 relative.
    pub fn uniform_dt(&self) -> Option<f64> {
        if self.times.len() < 2 {
            return None;
        }
        let dt = self.times[1] - self.times[0];
        self.times.windows(2).all(|w| ((w[1] - w[0]) - dt).abs() <= 1e-9 * dt.abs().max(1.0)).then_some(dt)
    }

    /// Copy with every entry divided by the volume.
    pub fn to_concentration(&self) -> SnapshotDataset {
        if self.meta.space == SpaceTag::Concentration {
            return self.clone();
        }
        let v = self.meta.volume;
        let mut out = self.clone();
        for s in out.snapshots.iter_mut() {
            *s /= v;
        }
        out.meta.space = SpaceTag::Concentration;
        out
    }

    /// CSV body: header `t_index,time,<species...>`, one row per sample.
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["t_index".to_string(), "time".to_string()];
        header.extend(self.species.iter().cloned());
        w.write_record(&header)?;
        for (i, (t, s)) in self.times.iter().zip(&self.snapshots).enumerate() {
            for col in s.column_iter() {
                let mut rec = vec![i.to_string(), format!("{t:?}")];
                rec.extend(col.iter().map(|v| format!("{v:?}")));
                w.write_record(&rec)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| PfiError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv_str(text: &str, meta: DatasetMeta) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers()?.clone();
        if header.len() < 3 || &header[0] != "t_index" || &header[1] != "time" {
            return Err(PfiError::Parse("expected header t_index,time,<species...>".into()));
        }
        let species: Vec<String> = header.iter().skip(2).map(String::from).collect();
        let d = species.len();
        let mut times: Vec<f64> = Vec::new();
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != d + 2 {
                return Err(PfiError::Parse(format!("row with {} fields, expected {}", rec.len(), d + 2)));
            }
            let idx: usize = rec[0].parse().map_err(|e| PfiError::Parse(format!("t_index: {e}")))?;
            let t: f64 = rec[1].parse().map_err(|e| PfiError::Parse(format!("time: {e}")))?;
            if idx == times.len() {
                times.push(t);
                cols.push(Vec::new());
            } else if idx + 1 != times.len() {
                return Err(PfiError::Parse(format!("rows must be grouped by t_index; saw {idx}")));
            }
            for v in rec.iter().skip(2) {
                cols[idx].push(v.parse().map_err(|e| PfiError::Parse(format!("value '{v}': {e}")))?);
            }
        }
        let snapshots = cols.into_iter().map(|c| DMatrix::from_column_slice(d, c.len() / d, &c)).collect();
        SnapshotDataset::new(species, times, snapshots, meta)
    }

    /// Writes `<stem>.csv` and `<stem>.json`; returns the CSV path.
    pub fn save(&self, stem: &Path) -> Result<PathBuf> {
        let csv_path = stem.with_extension("csv");
        let body = self.to_csv_string()?;
        fs::File::create(&csv_path)?.write_all(body.as_bytes())?;
        let mut side = serde_json::to_value(&self.meta)?;
        side["sha256"] = serde_json::Value::String(sha256_hex(body.as_bytes()));
        fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&side)?)?;
        Ok(csv_path)
    }

    /// Loads a CSV written by [`Self::save`]; the sidecar JSON is optional
    /// but, when present, its hash must match.
    pub fn load(csv_path: &Path) -> Result<Self> {
        let body = fs::read_to_string(csv_path)?;
        let side_path = csv_path.with_extension("json");
        let meta = if side_path.exists() {
            let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(&side_path)?)?;
            if let Some(h) = side.get("sha256").and_then(|v| v.as_str()) {
                let actual = sha256_hex(body.as_bytes());
                if h != actual {
                    return Err(PfiError::Integrity(format!(
                        "{} does not match the hash recorded in its sidecar",
                        csv_path.display()
                    )));
                }
            }
            serde_json::from_value(side)?
        } else {
            DatasetMeta {
                network: csv_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                space: SpaceTag::Concentration,
                volume: 1.0,
                seed: 0,
                simulator: String::new(),
                clamps: 0,
                extra: Default::default(),
            }
        };
        SnapshotDataset::from_csv_str(&body, meta)
    }

    /// SHA-256 of the canonical CSV body.
    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_csv_string()?.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Initial distribution in concentration units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialCondition {
    /// Every gene at the given concentration (rounded to counts for SSA).
    Uniform { level: f64 },
    /// Per-species fixed concentrations.
    Fixed { levels: Vec<f64> },
    /// Independent uniform draws in `[lo, hi]` per species.
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl Default for InitialCondition {
    fn default() -> Self {
        InitialCondition::Uniform { level: 0.5 }
    }
}

impl InitialCondition {
    pub fn sample(&self, d: usize, rng: &mut Rng) -> Vec<f64> {
        match self {
            InitialCondition::Uniform { level } => vec![*level; d],
            InitialCondition::Fixed { levels } => levels.clone(),
            InitialCondition::Box { lo, hi } => lo.iter().zip(hi).map(|(a, b)| a + (b - a) * rng.gen::<f64>()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Simulator {
    Gillespie,
    Cle { dt_em: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotPlan {
    pub n: usize,
    /// Number of intervals; K + 1 snapshots are produced.
    pub k: usize,
    pub dt: f64,
    pub space: SpaceTag,
    pub simulator: Simulator,
    #[serde(default)]
    pub initial: InitialCondition,
    pub seed: u64,
}

/// Draws `n` samples at each of `t_i = i·dt`, i = 0..=K. Every sample at
/// every time comes from its own trajectory, so snapshots are never paired.
pub fn sample_snapshots(net: &ReactionNetwork, plan: &SnapshotPlan) -> Result<SnapshotDataset> {
    if plan.n == 0 || !(plan.dt > 0.0) {
        return Err(PfiError::InvalidParameter("need n >= 1 and dt > 0".into()));
    }
    net.validate()?;
    let d = net.dim();
    let v = net.volume;
    if let Simulator::Cle { dt_em } = plan.simulator {
        if cle_dt_too_large(net, dt_em) {
            log::warn!("CLE step {dt_em} exceeds 10% of the fastest timescale of '{}'", net.name);
        }
    }
    let times: Vec<f64> = (0..=plan.k).map(|i| i as f64 * plan.dt).collect();
    let n = plan.n;
    let total = (plan.k + 1) * n;
    let runs = par::map_range(total, |idx| {
        let i = idx / n;
        let mut rng = stream(plan.seed, Purpose::Dataset, idx as u64);
        let x0 = plan.initial.sample(d, &mut rng);
        match plan.simulator {
            Simulator::Gillespie => {
                let c0: Vec<i64> = x0.iter().map(|c| (c * v).round().max(0.0) as i64).collect();
                let s = gillespie_at_times(net, &c0, &[times[i]], &mut rng).pop().expect("one time requested");
                (s.into_iter().map(|c| c as f64).collect::<Vec<_>>(), 0)
            }
            Simulator::Cle { dt_em } => {
                let process = ChemicalLangevin { net };
                let opts = SdeOptions { clamp_nonneg: true, hook: None };
                let (mut s, c) = sde_path(&process, &x0, &[times[i]], dt_em, &mut rng, opts);
                let conc = s.pop().expect("one time requested");
                (conc.into_iter().map(|x| x * v).collect(), c)
            }
        }
    });
    let mut snapshots = vec![DMatrix::zeros(d, n); plan.k + 1];
    let mut clamps = 0;
    for (idx, (s, c)) in runs.into_iter().enumerate() {
        clamps += c;
        snapshots[idx / n].column_mut(idx % n).copy_from_slice(&s);
    }
    if plan.space == SpaceTag::Concentration {
        for s in snapshots.iter_mut() {
            *s /= v;
        }
    }
    let mut extra = serde_json::Map::new();
    extra.insert("initial".into(), serde_json::to_value(&plan.initial)?);
    let meta = DatasetMeta {
        network: net.name.clone(),
        space: plan.space,
        volume: v,
        seed: plan.seed,
        simulator: serde_json::to_string(&plan.simulator)?,
        clamps,
        extra,
    };
    SnapshotDataset::new(net.species_names.clone(), times, snapshots, meta)
}

/// Exact Gaussian snapshots of an OU process at `t_i = i·dt`.
pub fn ou_dataset(params: &OUParams, k: usize, dt: f64, n: usize, seed: u64) -> Result<SnapshotDataset> {
    let d = params.omega.nrows();
    let times: Vec<f64> = (0..=k).map(|i| i as f64 * dt).collect();
    let snapshots = times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let state = ou_propagate(params, t)?;
            let mut rng = stream(seed, Purpose::Dataset, i as u64);
            state.sample(n, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = DatasetMeta {
        network: "ou".into(),
        space: SpaceTag::Concentration,
        volume: 1.0,
        seed,
        simulator: "exact_gaussian".into(),
        clamps: 0,
        extra: Default::default(),
    };
    SnapshotDataset::new((1..=d).map(|i| format!("x{i}")).collect(), times, snapshots, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::srn::circuits::build_toggle_switch;

    fn plan(k: usize, sim: Simulator) -> SnapshotPlan {
        SnapshotPlan {
            n: 20,
            k,
            dt: 0.5,
            space: SpaceTag::Counts,
            simulator: sim,
            initial: InitialCondition::Uniform { level: 1.0 },
            seed: 7,
        }
    }

    #[test]
    fn k_zero_gives_initial_condition() {
        let net = build_toggle_switch(10.0);
        let ds = sample_snapshots(&net, &plan(0, Simulator::Gillespie)).unwrap();
        assert_eq!(ds.times, vec![0.0]);
        assert!(ds.snapshots[0].iter().all(|&v| v == 10.0));
    }

    #[test]
    fn csv_round_trip_and_integrity() {
        let net = build_toggle_switch(10.0);
        let ds = sample_snapshots(&net, &plan(3, Simulator::Cle { dt_em: 1e-2 })).unwrap();
        assert_eq!(ds.snapshots.len(), 4);
        assert_eq!(ds.uniform_dt(), Some(0.5));
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("toggle");
        let path = ds.save(&stem).unwrap();
        let back = SnapshotDataset::load(&path).unwrap();
        assert_eq!(back, ds);
        let mut body = fs::read_to_string(&path).unwrap();
        body.push_str("3,1.5,1.0,2.0\n");
        fs::write(&path, body).unwrap();
        assert!(matches!(SnapshotDataset::load(&path), Err(PfiError::Integrity(_))));
    }

    #[test]
    fn deterministic_per_seed() {
        let net = build_toggle_switch(10.0);
        let a = sample_snapshots(&net, &plan(2, Simulator::Gillespie)).unwrap();
        let b = sample_snapshots(&net, &plan(2, Simulator::Gillespie)).unwrap();
        assert_eq!(a.to_csv_string().unwrap(), b.to_csv_string().unwrap());
    }
}

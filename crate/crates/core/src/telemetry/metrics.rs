//! Metric records, CSV sinks, run summaries and the final-parameter file.
//!
//! CSV schemas (one file per family, header always present):
//!
//! | file | columns |
//! |---|---|
//! | `scores.csv` | step, updates, episodes, score |
//! | `eval.csv` | step, episodes, score |
//! | `norms.csv` | step, learner, layer, param_norm, grad_norm, step_norm |
//! | `intensity.csv` | step, updates, samples_used, learning_steps, intensity |
//! | `cosine.csv` | update, batch, cos_full_half, cos_half_half, running_mean |
//! | `bench.csv` | n_workers, m_per_worker, groups, seeds, steps_per_second, server_idle, worker_idle |

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};
use crate::nn::NetSpec;

/// Online score: mean of the most recent completed episode returns.
#[derive(Clone, Debug)]
pub struct ScoreTracker {
    window: VecDeque<f64>,
    capacity: usize,
    episodes: u64,
    sum: f64,
}

impl Default for ScoreTracker {
    fn default() -> Self {
        Self::new(100)
    }
}

impl ScoreTracker {
    pub fn new(capacity: usize) -> Self {
        ScoreTracker {
            window: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
            episodes: 0,
            sum: 0.0,
        }
    }

    /// Adds a completed episode and returns the updated score.
    pub fn record(&mut self, episode_return: f64) -> f64 {
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(episode_return);
        self.episodes += 1;
        // Re-summing keeps the mean exact instead of drifting.
        self.sum = self.window.iter().sum();
        self.sum / self.window.len() as f64
    }

    pub fn score(&self) -> Option<f64> {
        (!self.window.is_empty()).then(|| self.sum / self.window.len() as f64)
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }
}

/// A CSV row type with a fixed header.
pub trait Record: Serialize + DeserializeOwned {
    const HEADER: &'static [&'static str];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub step: u64,
    pub updates: u64,
    pub episodes: u64,
    pub score: Option<f64>,
}

impl Record for ScoreRecord {
    const HEADER: &'static [&'static str] = &["step", "updates", "episodes", "score"];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub episodes: u64,
    pub score: Option<f64>,
}

impl Record for EvalRecord {
    const HEADER: &'static [&'static str] = &["step", "episodes", "score"];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRow {
    pub step: u64,
    pub learner: String,
    pub layer: String,
    pub param_norm: f64,
    pub grad_norm: f64,
    pub step_norm: f64,
}

impl Record for NormRow {
    const HEADER: &'static [&'static str] = &["step", "learner", "layer", "param_norm", "grad_norm", "step_norm"];
}

/// Training-intensity audit row for one sampling cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityRecord {
    pub step: u64,
    pub updates: u64,
    /// Transitions fed through gradient computations this cycle.
    pub samples_used: u64,
    /// Environment steps this cycle, once learning has started.
    pub learning_steps: u64,
    pub intensity: Option<f64>,
}

impl Record for IntensityRecord {
    const HEADER: &'static [&'static str] = &["step", "updates", "samples_used", "learning_steps", "intensity"];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineRecord {
    pub update: u64,
    pub batch: usize,
    pub cos_full_half: f64,
    pub cos_half_half: f64,
    pub running_mean: f64,
}

impl Record for CosineRecord {
    const HEADER: &'static [&'static str] = &["update", "batch", "cos_full_half", "cos_half_half", "running_mean"];
}

/// One sampler geometry of a throughput sweep; rates and idle fractions are
/// medians over `seeds` repetitions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub n_workers: usize,
    pub m_per_worker: usize,
    pub groups: usize,
    pub seeds: usize,
    pub steps_per_second: f64,
    pub server_idle: f64,
    pub worker_idle: f64,
}

impl Record for BenchRecord {
    const HEADER: &'static [&'static str] = &[
        "n_workers",
        "m_per_worker",
        "groups",
        "seeds",
        "steps_per_second",
        "server_idle",
        "worker_idle",
    ];
}

/// Append-only CSV file for one record family.
pub struct CsvSink<R> {
    writer: csv::Writer<BufWriter<File>>,
    _marker: std::marker::PhantomData<R>,
}

impl<R: Record> CsvSink<R> {
    /// Creates (truncating) `path` and writes the header row.
    pub fn create(path: &Path) -> Result<Self> {
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(BufWriter::new(File::create(path)?));
        writer.write_record(R::HEADER)?;
        Ok(CsvSink {
            writer,
            _marker: std::marker::PhantomData,
        })
    }

    pub fn write(&mut self, record: &R) -> Result<()> {
        self.writer.serialize(record)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

/// Writes `records` to a fresh CSV file.
pub fn write_metrics<R: Record>(path: &Path, records: &[R]) -> Result<()> {
    let mut sink = CsvSink::create(path)?;
    for r in records {
        sink.write(r)?;
    }
    sink.flush()
}

pub fn read_metrics<R: Record>(path: &Path) -> Result<Vec<R>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if header != R::HEADER {
        return shape_err(format!("{} has header {header:?}, expected {:?}", path.display(), R::HEADER));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Headline statistics of a run, recomputable from its CSVs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub updates: u64,
    pub episodes: u64,
    pub final_score: Option<f64>,
    pub best_score: Option<f64>,
    pub final_eval: Option<f64>,
    pub best_eval: Option<f64>,
    /// Total samples used over total learning steps.
    pub measured_intensity: Option<f64>,
    pub mean_cosine: Option<f64>,
}

fn max_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    xs.flatten().fold(None, |acc, x| Some(acc.map_or(x, |a: f64| a.max(x))))
}

pub fn summarize(
    scores: &[ScoreRecord],
    evals: &[EvalRecord],
    intensity: &[IntensityRecord],
    cosine: &[CosineRecord],
) -> RunSummary {
    let last = scores.last();
    let used: u64 = intensity.iter().map(|r| r.samples_used).sum();
    let learning: u64 = intensity.iter().map(|r| r.learning_steps).sum();
    RunSummary {
        steps: last.map_or(0, |r| r.step),
        updates: last.map_or(0, |r| r.updates),
        episodes: last.map_or(0, |r| r.episodes),
        final_score: last.and_then(|r| r.score),
        best_score: max_opt(scores.iter().map(|r| r.score)),
        final_eval: evals.last().and_then(|r| r.score),
        best_eval: max_opt(evals.iter().map(|r| r.score)),
        measured_intensity: (learning > 0).then(|| used as f64 / learning as f64),
        mean_cosine: cosine.last().map(|r| r.running_mean),
    }
}

/// Recomputes the summary of a run directory from its CSV files.
pub fn report(run_dir: &Path) -> Result<RunSummary> {
    let opt = |name: &str| {
        let p = run_dir.join(name);
        p.exists().then_some(p)
    };
    let scores_path = run_dir.join("scores.csv");
    if !scores_path.exists() {
        return Err(Error::Config(format!("{} has no scores.csv", run_dir.display())));
    }
    let scores = read_metrics(&scores_path)?;
    let evals = opt("eval.csv").map(|p| read_metrics(&p)).transpose()?.unwrap_or_default();
    let intensity = opt("intensity.csv").map(|p| read_metrics(&p)).transpose()?.unwrap_or_default();
    let cosine = opt("cosine.csv").map(|p| read_metrics(&p)).transpose()?.unwrap_or_default();
    Ok(summarize(&scores, &evals, &intensity, &cosine))
}

pub fn write_summary(path: &Path, summary: &RunSummary) -> Result<()> {
    let text = toml::to_string(summary).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    toml::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Config(e.to_string()))
}

const PARAMS_MAGIC: &[u8; 4] = b"ARLP";
const PARAMS_VERSION: u32 = 1;

/// First 8 bytes of the SHA-256 of the network spec's canonical text.
pub fn spec_hash(spec: &NetSpec) -> [u8; 8] {
    let text = toml::to_string(spec).expect("network specs always serialize");
    let digest = Sha256::digest(text.as_bytes());
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    out
}

/// Flat parameter file: magic `ARLP`, u32 version, 8-byte spec hash, u64
/// count, then `count` f64 values; all integers and reals little-endian.
pub fn write_params(path: &Path, spec: &NetSpec, params: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PARAMS_MAGIC)?;
    w.write_all(&PARAMS_VERSION.to_le_bytes())?;
    w.write_all(&spec_hash(spec))?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for p in params {
        w.write_all(&p.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a parameter file, checking it against `spec`.
pub fn read_params(path: &Path, spec: &NetSpec) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 24 || &bytes[..4] != PARAMS_MAGIC {
        return shape_err("not a parameter file");
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != PARAMS_VERSION {
        return shape_err(format!("unsupported parameter file version {version}"));
    }
    if bytes[8..16] != spec_hash(spec) {
        return shape_err("parameter file was written for a different network");
    }
    let count = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    if bytes.len() != 24 + 8 * count || count != spec.param_count() {
        return shape_err("parameter file length does not match its header");
    }
    Ok(bytes[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Minimal SVG line chart of `(x, y)` series.
pub fn plot_svg(path: &Path, title: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let pts = series.iter().flat_map(|(_, s)| s.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{PAD}\" y=\"{}\" font-size=\"10\">{x0:.3}</text>\n\
         <text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{x1:.3}</text>\n\
         <text x=\"5\" y=\"{}\" font-size=\"10\">{y0:.3}</text>\n\
         <text x=\"5\" y=\"{PAD}\" font-size=\"10\">{y1:.3}</text>\n",
        W / 2.0,
        escape(title),
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD,
        H - PAD + 15.0,
        W - PAD,
        H - PAD + 15.0,
        H - PAD,
    );
    for (i, (name, s)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = s.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{}</text>\n",
            points.join(" "),
            W - PAD - 120.0,
            PAD + 14.0 * i as f64,
            escape(name)
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Head;

    #[test]
    fn score_window_arithmetic() {
        let mut t = ScoreTracker::default();
        assert_eq!(t.score(), None);
        assert_eq!(t.record(5.0), 5.0);
        let mut t = ScoreTracker::default();
        for _ in 0..100 {
            t.record(1.0);
        }
        assert_eq!(t.record(101.0), 2.0);
        assert_eq!(t.episodes(), 101);
        let mut t = ScoreTracker::default();
        t.record(1.0);
        t.record(2.0);
        assert_eq!(t.score(), Some(1.5));
    }

    #[test]
    fn empty_sink_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("eval.csv");
        write_metrics::<EvalRecord>(&p, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "step,episodes,score\n");
        assert!(read_metrics::<EvalRecord>(&p).unwrap().is_empty());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scores.csv");
        let rows = vec![
            ScoreRecord {
                step: 10,
                updates: 1,
                episodes: 0,
                score: None,
            },
            ScoreRecord {
                step: 20,
                updates: 2,
                episodes: 3,
                score: Some(0.1 + 0.2),
            },
        ];
        write_metrics(&p, &rows).unwrap();
        assert_eq!(read_metrics::<ScoreRecord>(&p).unwrap(), rows);
        assert!(read_metrics::<EvalRecord>(&p).is_err());
    }

    #[test]
    fn summary_recomputes_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let scores = vec![
            ScoreRecord {
                step: 100,
                updates: 5,
                episodes: 7,
                score: Some(0.25),
            },
            ScoreRecord {
                step: 200,
                updates: 10,
                episodes: 20,
                score: Some(0.125),
            },
        ];
        let intensity = vec![
            IntensityRecord {
                step: 100,
                updates: 5,
                samples_used: 320,
                learning_steps: 40,
                intensity: Some(8.0),
            },
            IntensityRecord {
                step: 200,
                updates: 5,
                samples_used: 321,
                learning_steps: 40,
                intensity: Some(321.0 / 40.0),
            },
        ];
        write_metrics(&dir.path().join("scores.csv"), &scores).unwrap();
        write_metrics(&dir.path().join("intensity.csv"), &intensity).unwrap();
        let s = report(dir.path()).unwrap();
        assert_eq!(s, summarize(&scores, &[], &intensity, &[]));
        assert_eq!(s.best_score, Some(0.25));
        assert_eq!(s.final_score, Some(0.125));
        assert_eq!(s.measured_intensity, Some(641.0 / 80.0));
        write_summary(&dir.path().join("summary.toml"), &s).unwrap();
        assert_eq!(read_summary(&dir.path().join("summary.toml")).unwrap(), s);
    }

    #[test]
    fn concurrent_runs_do_not_interleave() {
        let dir = tempfile::tempdir().unwrap();
        std::thread::scope(|scope| {
            for k in 0..4u64 {
                let path = dir.path().join(format!("run{k}"));
                scope.spawn(move || {
                    std::fs::create_dir_all(&path).unwrap();
                    let mut sink = CsvSink::<ScoreRecord>::create(&path.join("scores.csv")).unwrap();
                    for i in 0..2000 {
                        sink.write(&ScoreRecord {
                            step: i,
                            updates: k,
                            episodes: i,
                            score: Some(k as f64),
                        })
                        .unwrap();
                        if i % 100 == 0 {
                            sink.flush().unwrap();
                        }
                    }
                    sink.flush().unwrap();
                });
            }
        });
        for k in 0..4u64 {
            let rows: Vec<ScoreRecord> = read_metrics(&dir.path().join(format!("run{k}/scores.csv"))).unwrap();
            assert_eq!(rows.len(), 2000);
            assert!(rows.iter().enumerate().all(|(i, r)| r.updates == k && r.step == i as u64));
        }
    }

    #[test]
    fn params_file_round_trip_and_checks() {
        let dir = tempfile::tempdir().unwrap();
        let spec = NetSpec::dense(3, 4, 1, Head::Q { actions: 2 });
        let params: Vec<f64> = (0..spec.param_count()).map(|i| i as f64 * 0.1 - 1.0).collect();
        let p = dir.path().join("final_params.bin");
        write_params(&p, &spec, &params).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"ARLP");
        assert_eq!(bytes.len(), 24 + 8 * params.len());
        assert_eq!(read_params(&p, &spec).unwrap(), params);
        let other = NetSpec::dense(3, 5, 1, Head::Q { actions: 2 });
        assert!(read_params(&p, &other).is_err());
    }

    #[test]
    fn svg_plot_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("plot.svg");
        plot_svg(&p, "a < b", &[("s".into(), vec![(0.0, 1.0), (1.0, 2.0)])]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("<svg") && text.contains("polyline") && text.contains("a &lt; b"));
    }
}

//! Dataset ingestion, z-score normalization, chronological splits, and
//! sliding-window batching.
//!
//! On-disk formats:
//! - stations: CSV with header `id,lat,lon`, decimal degrees;
//! - series: one JSON header line, then little-endian 32-bit floats,
//!   time-major (all stations and channels for step 0, then step 1, ...).

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GeoCoord, StationSet};
use crate::tensor::{Real, Tensor};

/// Station series plus metadata. Series are held station-major
/// (`[N, T_total, C]`, row-major) for cheap window extraction.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub stations: StationSet,
    pub series: Vec<Real>,
    pub t_total: usize,
    pub channels: Vec<String>,
    pub interval_hours: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SeriesHeader {
    version: u32,
    n: usize,
    t_total: usize,
    c: usize,
    channels: Vec<String>,
    station_ids: Vec<String>,
    interval_hours: f64,
}

impl Dataset {
    pub fn new(
        stations: StationSet,
        series: Vec<Real>,
        t_total: usize,
        channels: Vec<String>,
        interval_hours: f64,
    ) -> Result<Self> {
        let n = stations.len();
        let c = channels.len();
        if series.len() != n * t_total * c {
            return Err(Error::data(format!(
                "series has {} values, expected {}x{}x{}",
                series.len(),
                n,
                t_total,
                c
            )));
        }
        if series.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("series contains NaN or infinite values".to_string()));
        }
        Ok(Dataset { stations, series, t_total, channels, interval_hours })
    }

    pub fn n(&self) -> usize {
        self.stations.len()
    }

    pub fn c(&self) -> usize {
        self.channels.len()
    }

    #[inline]
    pub fn at(&self, station: usize, t: usize, channel: usize) -> Real {
        self.series[(station * self.t_total + t) * self.c() + channel]
    }

    /// Extract one forecasting window: `t_in` input steps from `start`,
    /// then `f_out` target steps.
    pub fn window(&self, start: usize, t_in: usize, f_out: usize) -> Result<ForecastBatch> {
        if start + t_in + f_out > self.t_total {
            return Err(Error::data(format!(
                "window [{}, {}) exceeds series length {}",
                start,
                start + t_in + f_out,
                self.t_total
            )));
        }
        let (n, c) = (self.n(), self.c());
        let mut input = Vec::with_capacity(n * t_in * c);
        let mut target = Vec::with_capacity(n * f_out * c);
        for s in 0..n {
            let base = (s * self.t_total + start) * c;
            input.extend_from_slice(&self.series[base..base + t_in * c]);
            let tbase = (s * self.t_total + start + t_in) * c;
            target.extend_from_slice(&self.series[tbase..tbase + f_out * c]);
        }
        Ok(ForecastBatch {
            start,
            input: Tensor::new(vec![n, t_in, c], input)?,
            target: Tensor::new(vec![n, f_out, c], target)?,
        })
    }

    /// Serialize to the binary series format. Values are stored as f32;
    /// datasets produced by the loader or the generator round-trip exactly.
    pub fn save_series(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        let header = SeriesHeader {
            version: 1,
            n: self.n(),
            t_total: self.t_total,
            c: self.c(),
            channels: self.channels.clone(),
            station_ids: self.stations.ids.clone(),
            interval_hours: self.interval_hours,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        let (n, c) = (self.n(), self.c());
        for t in 0..self.t_total {
            for s in 0..n {
                for ch in 0..c {
                    let v = self.at(s, t, ch) as f32;
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Read a station table (`id,lat,lon` CSV).
pub fn load_stations_csv(path: &Path) -> Result<StationSet> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::data(format!("{}: empty stations file", path.display())))??;
    if header.trim() != "id,lat,lon" {
        return Err(Error::data(format!(
            "{}: expected header `id,lat,lon`, got `{}`",
            path.display(),
            header.trim()
        )));
    }
    let mut ids = Vec::new();
    let mut coords = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::data(format!(
                "{}: line {}: expected 3 fields, got {}",
                path.display(),
                lineno + 2,
                fields.len()
            )));
        }
        let lat: f64 = fields[1].trim().parse().map_err(|_| {
            Error::data(format!("{}: line {}: bad latitude `{}`", path.display(), lineno + 2, fields[1]))
        })?;
        let lon: f64 = fields[2].trim().parse().map_err(|_| {
            Error::data(format!("{}: line {}: bad longitude `{}`", path.display(), lineno + 2, fields[2]))
        })?;
        ids.push(fields[0].trim().to_string());
        coords.push(
            GeoCoord::new(lat, lon)
                .map_err(|e| Error::data(format!("{}: line {}: {}", path.display(), lineno + 2, e)))?,
        );
    }
    StationSet::new(ids, coords).map_err(|e| Error::data(e.to_string()))
}

pub fn save_stations_csv(stations: &StationSet, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "id,lat,lon")?;
    for (id, c) in stations.ids.iter().zip(&stations.coords) {
        writeln!(w, "{},{},{}", id, c.lat_deg, c.lon_deg)?;
    }
    w.flush()?;
    Ok(())
}

/// Load and validate a dataset: the series header's station ids must match
/// the stations file exactly (same ids, same order).
pub fn load_dataset(stations_path: &Path, series_path: &Path) -> Result<Dataset> {
    let stations = load_stations_csv(stations_path)?;
    let file = std::fs::File::open(series_path)?;
    let mut reader = BufReader::new(file);
    let mut header_line = String::new();
    reader.read_line(&mut header_line)?;
    let header: SeriesHeader = serde_json::from_str(header_line.trim_end())
        .map_err(|e| Error::data(format!("{}: bad series header: {}", series_path.display(), e)))?;
    if header.version != 1 {
        return Err(Error::data(format!("unsupported series version {}", header.version)));
    }
    if header.station_ids != stations.ids {
        return Err(Error::data(format!(
            "station ids disagree: series file has [{}], stations file has [{}]",
            header.station_ids.join(", "),
            stations.ids.join(", ")
        )));
    }
    if header.c != header.channels.len() {
        return Err(Error::data("channel count disagrees with channel names".to_string()));
    }
    let count = header.n * header.t_total * header.c;
    let mut payload = vec![0u8; count * 4];
    reader.read_exact(&mut payload).map_err(|_| {
        Error::data(format!(
            "{}: truncated payload, expected {} values",
            series_path.display(),
            count
        ))
    })?;
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(Error::data(format!("{}: trailing bytes after payload", series_path.display())));
    }
    // File is time-major; memory is station-major.
    let (n, t_total, c) = (header.n, header.t_total, header.c);
    let mut series = vec![0.0 as Real; count];
    for t in 0..t_total {
        for s in 0..n {
            for ch in 0..c {
                let src = ((t * n + s) * c + ch) * 4;
                let v = f32::from_le_bytes([payload[src], payload[src + 1], payload[src + 2], payload[src + 3]]);
                series[(s * t_total + t) * c + ch] = v as Real;
            }
        }
    }
    Dataset::new(stations, series, t_total, header.channels, header.interval_hours)
}

/// One forecasting sample.
#[derive(Debug, Clone)]
pub struct ForecastBatch {
    pub start: usize,
    /// [N, T, C]
    pub input: Tensor,
    /// [N, F, C]
    pub target: Tensor,
}

/// Chronological train/validation/test fractions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.8, val: 0.1, test: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train <= 0.0 || self.val <= 0.0 || self.test <= 0.0 {
            return Err(Error::invalid("split fractions must be positive"));
        }
        if (self.train + self.val + self.test - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("split fractions must sum to 1"));
        }
        Ok(())
    }

    /// Half-open timestep range of one split.
    pub fn range(&self, t_total: usize, split: Split) -> (usize, usize) {
        let t1 = (t_total as f64 * self.train).floor() as usize;
        let t2 = (t_total as f64 * (self.train + self.val)).floor() as usize;
        match split {
            Split::Train => (0, t1),
            Split::Val => (t1, t2),
            Split::Test => (t2, t_total),
        }
    }
}

/// Start indices of every window lying fully inside `[start, end)`:
/// both the `t_in` input steps and the `f_out` target steps.
pub fn window_starts(range: (usize, usize), t_in: usize, f_out: usize, stride: usize) -> Result<Vec<usize>> {
    let (start, end) = range;
    let span = end.saturating_sub(start);
    let need = t_in + f_out;
    if span < need {
        return Err(Error::data(format!(
            "split span of {} steps cannot hold a {}+{} window",
            span, t_in, f_out
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    Ok((start..=end - need).step_by(stride).collect())
}

/// Per-channel z-score parameters fitted on the training span only.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Two-pass mean/std over `[range.0, range.1)` of every station.
    pub fn fit(dataset: &Dataset, range: (usize, usize)) -> Result<Self> {
        let (start, end) = range;
        if start >= end || end > dataset.t_total {
            return Err(Error::invalid(format!("bad fit range [{}, {})", start, end)));
        }
        let c = dataset.c();
        let count = (dataset.n() * (end - start)) as f64;
        let mut mean = vec![0.0f64; c];
        for s in 0..dataset.n() {
            for t in start..end {
                for ch in 0..c {
                    mean[ch] += dataset.at(s, t, ch) as f64;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0f64; c];
        for s in 0..dataset.n() {
            for t in start..end {
                for ch in 0..c {
                    let d = dataset.at(s, t, ch) as f64 - mean[ch];
                    var[ch] += d * d;
                }
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / count).sqrt()).collect();
        if let Some(ch) = std.iter().position(|&s| s < 1e-12) {
            return Err(Error::data(format!(
                "channel `{}` is constant over the training span",
                dataset.channels[ch]
            )));
        }
        Ok(Normalizer { mean, std })
    }

    /// Dataset with every channel z-scored by the fitted statistics.
    pub fn apply_dataset(&self, dataset: &Dataset) -> Result<Dataset> {
        let c = dataset.c();
        if self.mean.len() != c {
            return Err(Error::invalid("normalizer channel count mismatch"));
        }
        let series: Vec<Real> = dataset
            .series
            .iter()
            .enumerate()
            .map(|(i, &v)| (((v as f64) - self.mean[i % c]) / self.std[i % c]) as Real)
            .collect();
        Dataset::new(
            dataset.stations.clone(),
            series,
            dataset.t_total,
            dataset.channels.clone(),
            dataset.interval_hours,
        )
    }

    #[inline]
    pub fn invert_value(&self, channel: usize, v: Real) -> f64 {
        v as f64 * self.std[channel] + self.mean[channel]
    }

    #[inline]
    pub fn apply_value(&self, channel: usize, v: f64) -> Real {
        ((v - self.mean[channel]) / self.std[channel]) as Real
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn tiny_dataset() -> Dataset {
        let stations = StationSet::new(
            vec!["a".into(), "b".into()],
            vec![GeoCoord::new(10.0, 20.0).unwrap(), GeoCoord::new(-5.0, 30.0).unwrap()],
        )
        .unwrap();
        // values chosen to be exactly f32-representable
        let series = vec![1.0, 2.0, 3.0, 4.0, -1.0, -2.0, -3.0, -4.5];
        Dataset::new(stations, series, 4, vec!["temp".into()], 1.0).unwrap()
    }

    fn temp_dir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("s2cast-{}-{}", tag, std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let dir = temp_dir("data");
        let ds = tiny_dataset();
        let stations_path = dir.join("stations.csv");
        let series_path = dir.join("series.bin");
        save_stations_csv(&ds.stations, &stations_path).unwrap();
        ds.save_series(&series_path).unwrap();

        let loaded = load_dataset(&stations_path, &series_path).unwrap();
        assert_eq!(loaded.series, ds.series);
        assert_eq!(loaded.stations.ids, ds.stations.ids);
        assert_eq!(loaded.channels, ds.channels);

        // Saving the loaded dataset again produces identical bytes.
        let series_path2 = dir.join("series2.bin");
        loaded.save_series(&series_path2).unwrap();
        let b1 = std::fs::read(&series_path).unwrap();
        let b2 = std::fs::read(&series_path2).unwrap();
        assert_eq!(b1, b2);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn id_mismatch_reports_both_sets() {
        let dir = temp_dir("mismatch");
        let ds = tiny_dataset();
        let series_path = dir.join("series.bin");
        ds.save_series(&series_path).unwrap();

        let other = StationSet::new(
            vec!["a".into(), "zz".into()],
            vec![GeoCoord::new(10.0, 20.0).unwrap(), GeoCoord::new(-5.0, 30.0).unwrap()],
        )
        .unwrap();
        let stations_path = dir.join("stations.csv");
        save_stations_csv(&other, &stations_path).unwrap();
        let err = load_dataset(&stations_path, &series_path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("zz") && msg.contains("b"), "{}", msg);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn nan_payload_rejected() {
        let dir = temp_dir("nan");
        let ds = tiny_dataset();
        let stations_path = dir.join("stations.csv");
        let series_path = dir.join("series.bin");
        save_stations_csv(&ds.stations, &stations_path).unwrap();
        ds.save_series(&series_path).unwrap();
        // Corrupt one value with a NaN bit pattern.
        let mut bytes = std::fs::read(&series_path).unwrap();
        let header_len = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
        bytes[header_len..header_len + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&series_path, &bytes).unwrap();
        let err = load_dataset(&stations_path, &series_path).unwrap_err();
        assert!(err.to_string().contains("NaN"), "{}", err);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = temp_dir("trunc");
        let ds = tiny_dataset();
        let stations_path = dir.join("stations.csv");
        let series_path = dir.join("series.bin");
        save_stations_csv(&ds.stations, &stations_path).unwrap();
        ds.save_series(&series_path).unwrap();
        let bytes = std::fs::read(&series_path).unwrap();
        std::fs::write(&series_path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_dataset(&stations_path, &series_path).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn ncei_shaped_metadata_loads() {
        // Same shape class as the larger hourly multichannel benchmark:
        // 3850 stations, 5 channels, 1-hour interval. Two steps keep it small.
        let dir = temp_dir("ncei");
        let n = 3850usize;
        let stations =
            synth::synth_stations(&synth::SynthConfig { n_stations: n, seed: 4, ..Default::default() }).unwrap();
        let channels: Vec<String> = ["temp", "dewpoint", "wind_rate", "wind_direc", "sea_level"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let series: Vec<Real> = (0..n * 2 * 5).map(|i| (i % 97) as Real * 0.5).collect();
        let ds = Dataset::new(stations, series, 2, channels, 1.0).unwrap();
        let stations_path = dir.join("stations.csv");
        let series_path = dir.join("series.bin");
        save_stations_csv(&ds.stations, &stations_path).unwrap();
        ds.save_series(&series_path).unwrap();
        let loaded = load_dataset(&stations_path, &series_path).unwrap();
        assert_eq!(loaded.n(), 3850);
        assert_eq!(loaded.c(), 5);
        assert_eq!(loaded.interval_hours, 1.0);
        assert_eq!(loaded.series, ds.series);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn normalizer_identities() {
        let ds = tiny_dataset();
        let norm = Normalizer::fit(&ds, (0, 4)).unwrap();
        // two-pass oracle
        let vals: Vec<f64> = ds.series.iter().map(|&v| v as f64).collect();
        let mean = vals.iter().sum::<f64>() / 8.0;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!((norm.mean[0] - mean).abs() < 1e-12);
        assert!((norm.std[0] - var.sqrt()).abs() < 1e-12);

        let normalized = norm.apply_dataset(&ds).unwrap();
        for (i, &v) in normalized.series.iter().enumerate() {
            let back = norm.invert_value(0, v);
            assert!((back - ds.series[i] as f64).abs() < 1e-10);
        }
        // z-scored train span has mean ~0, std ~1
        let m: f64 = normalized.series.iter().map(|&v| v as f64).sum::<f64>() / 8.0;
        let s: f64 =
            (normalized.series.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / 8.0).sqrt();
        assert!(m.abs() < 1e-12 && (s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_channel_rejected() {
        let stations = StationSet::new(vec!["a".into()], vec![GeoCoord::new(0.0, 0.0).unwrap()]).unwrap();
        let ds = Dataset::new(stations, vec![2.5; 6], 6, vec!["flat".into()], 1.0).unwrap();
        assert!(Normalizer::fit(&ds, (0, 6)).is_err());
    }

    #[test]
    fn window_counts_and_boundaries() {
        let starts = window_starts((0, 73), 48, 24, 1).unwrap();
        assert_eq!(starts.len(), 2);
        assert_eq!(starts, vec![0, 1]);
        // last target index is the split end minus one
        assert_eq!(starts.last().unwrap() + 48 + 24 - 1, 72);

        assert!(window_starts((0, 71), 48, 24, 1).is_err());
        let strided = window_starts((10, 100), 8, 4, 5).unwrap();
        assert!(strided.iter().all(|&s| s >= 10 && s + 12 <= 100));
    }

    #[test]
    fn windows_never_straddle_split_boundaries() {
        let spec = SplitSpec::default();
        spec.validate().unwrap();
        let t_total = 200;
        let (t0, t1) = spec.range(t_total, Split::Train);
        let (v0, v1) = spec.range(t_total, Split::Val);
        let (e0, e1) = spec.range(t_total, Split::Test);
        assert_eq!((t0, t1), (0, 160));
        assert_eq!((v0, v1), (160, 180));
        assert_eq!((e0, e1), (180, 200));

        let train = window_starts((t0, t1), 12, 6, 1).unwrap();
        let val = window_starts((v0, v1), 12, 6, 1).unwrap();
        let max_train_target = train.iter().map(|s| s + 18 - 1).max().unwrap();
        let min_val_input = val.iter().copied().min().unwrap();
        assert!(max_train_target < t1);
        assert!(min_val_input >= v0);
    }

    #[test]
    fn split_spec_validation() {
        assert!(SplitSpec { train: 0.7, val: 0.1, test: 0.2 }.validate().is_ok());
        assert!(SplitSpec { train: 0.7, val: 0.1, test: 0.1 }.validate().is_err());
        assert!(SplitSpec { train: 1.0, val: 0.0, test: 0.0 }.validate().is_err());
    }

    #[test]
    fn window_extraction_shapes_and_values() {
        let ds = tiny_dataset();
        let b = ds.window(1, 2, 1).unwrap();
        assert_eq!(b.input.shape(), &[2, 2, 1]);
        assert_eq!(b.target.shape(), &[2, 1, 1]);
        assert_eq!(b.input.data(), &[2.0, 3.0, -2.0, -3.0]);
        assert_eq!(b.target.data(), &[4.0, -4.5]);
        assert!(ds.window(2, 2, 1).is_err());
    }
}

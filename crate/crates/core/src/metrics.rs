//! Metrics persistence.
//!
//! `metrics.csv` holds one row per round with the columns in [`COLUMNS`].
//! List-valued cells join their items with `;`. Numbers carry six
//! significant digits. A `metrics.csv.manifest` sidecar holds the resolved
//! configuration, which is enough to rerun the experiment. Wall-clock time
//! goes to a separate `timing.csv` so the metrics file is reproducible
//! byte-for-byte.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::manifest_path;
use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::models::SplitModel;
use crate::numcore::NumError;
use crate::protocol::RoundRecord;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("requested {requested} samples from a dataset of {available}")]
    TooManySamples { requested: usize, available: usize },
    #[error(transparent)]
    Num(#[from] NumError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> MetricsError + '_ {
    move |source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub const COLUMNS: &[&str] = &[
    "round",
    "participants",
    "weights",
    "client_losses",
    "client_acc_mean",
    "client_acc_std",
    "global_acc",
    "distill_loss",
    "generator_loss",
    "missing_classes",
    "shares",
    "ideal_objective",
    "realized_objective",
    "objective_gap",
    "pseudo_label_divergence",
];

/// Six significant digits, `%g` style.
pub fn fmt_sig(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf" } else { "-inf" }.into();
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        return format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(";")
}

pub fn format_row(r: &RoundRecord) -> String {
    let cells = [
        r.round.to_string(),
        join(&r.participants, usize::to_string),
        join(&r.weights, |v| fmt_sig(*v)),
        join(&r.client_losses, |v| fmt_sig(*v)),
        fmt_sig(r.client_acc_mean),
        fmt_sig(r.client_acc_std),
        fmt_sig(r.global_acc),
        fmt_sig(r.distill_loss),
        fmt_sig(r.generator_loss),
        join(&r.missing, usize::to_string),
        join(&r.shares, |v| fmt_sig(*v)),
        fmt_sig(r.ideal_objective),
        fmt_sig(r.realized_objective),
        fmt_sig(r.objective_gap),
        fmt_sig(r.pseudo_label_divergence),
    ];
    cells.join(",")
}

pub fn metrics_text(records: &[RoundRecord]) -> String {
    let mut out = COLUMNS.join(",");
    out.push('\n');
    for r in records {
        out.push_str(&format_row(r));
        out.push('\n');
    }
    out
}

/// Writes `path` and its manifest.
pub fn write_metrics(
    records: &[RoundRecord],
    cfg: &ExperimentConfig,
    path: &Path,
) -> Result<(), MetricsError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, metrics_text(records)).map_err(io_err(path))?;
    let mp = manifest_path(path);
    fs::write(&mp, cfg.to_text()).map_err(io_err(&mp))
}

pub fn write_timing(records: &[RoundRecord], path: &Path) -> Result<(), MetricsError> {
    let mut out = String::from("round,wall_seconds\n");
    for r in records {
        out.push_str(&format!("{},{}\n", r.round, fmt_sig(r.wall_seconds)));
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Ascending sample of `count` row indices, fixed by `seed`.
pub fn subsample(len: usize, count: usize, seed: u64) -> Result<Vec<usize>, MetricsError> {
    if count > len {
        return Err(MetricsError::TooManySamples {
            requested: count,
            available: len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, len, count).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Rows of `tag,label,feature_0,..` for every model on a shared subsample.
pub fn dump_features(
    models: &[(String, &SplitModel)],
    dataset: &Dataset,
    count: usize,
    seed: u64,
    path: &Path,
) -> Result<(), MetricsError> {
    let idx = subsample(dataset.len(), count, seed)?;
    let (x, y) = dataset.subset(&idx);
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = io::BufWriter::new(file);
    for (tag, model) in models {
        let z = model.encode(&x)?.features;
        for (row, label) in z.row_iter().zip(&y) {
            let feats: Vec<String> = row.iter().map(|v| fmt_sig(*v)).collect();
            writeln!(w, "{tag},{label},{}", feats.join(",")).map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digit_formatting() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(1.0), "1");
        assert_eq!(fmt_sig(0.1234567), "0.123457");
        assert_eq!(fmt_sig(123456.7), "123457");
        assert_eq!(fmt_sig(1234567.0), "1.23457e+06");
        assert_eq!(fmt_sig(0.00001234567), "1.23457e-05");
        assert_eq!(fmt_sig(-2.5), "-2.5");
        assert_eq!(fmt_sig(999999.7), "1e+06");
        assert_eq!(fmt_sig(f64::NAN), "nan");
    }

    #[test]
    fn empty_run_is_header_only() {
        assert_eq!(metrics_text(&[]), format!("{}\n", COLUMNS.join(",")));
    }

    #[test]
    fn subsample_is_deterministic() {
        assert_eq!(subsample(100, 10, 3).unwrap(), subsample(100, 10, 3).unwrap());
        assert_eq!(subsample(5, 5, 1).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(subsample(5, 6, 1).is_err());
    }
}

//! Loader for the pre-windowed smartphone dataset text layout:
//!
//! ```text
//! <root>/{train,test}/Inertial Signals/<channel>_<split>.txt
//! <root>/{train,test}/y_<split>.txt
//! <root>/{train,test}/subject_<split>.txt
//! ```

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::model::SensorSpec;
use crate::tensor::Tensor;

use super::WindowedDataset;

pub const UCIHAR_CHANNELS: [&str; 9] = [
    "body_acc_x",
    "body_acc_y",
    "body_acc_z",
    "body_gyro_x",
    "body_gyro_y",
    "body_gyro_z",
    "total_acc_x",
    "total_acc_y",
    "total_acc_z",
];

pub const UCIHAR_CLASSES: [&str; 6] = [
    "WALKING",
    "WALKING UPSTAIRS",
    "WALKING DOWNSTAIRS",
    "SITTING",
    "STANDING",
    "LAYING",
];

pub const UCIHAR_SENSOR: &str = "smartphone";
pub const UCIHAR_WINDOW: usize = 128;

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, column: usize, message: String) -> Error {
    Error::Parse {
        file: path.display().to_string(),
        line,
        column,
        message,
    }
}

/// Rows of whitespace-separated floats, each exactly `UCIHAR_WINDOW` long.
fn parse_signal(path: &Path) -> Result<Vec<f64>> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut n = 0;
        for (col, tok) in line.split_whitespace().enumerate() {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_err(path, ln + 1, col + 1, format!("{tok:?} is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(path, ln + 1, col + 1, format!("non-finite value {tok}")));
            }
            out.push(v);
            n += 1;
        }
        if n != UCIHAR_WINDOW {
            return Err(parse_err(path, ln + 1, n + 1, format!("expected {UCIHAR_WINDOW} values, found {n}")));
        }
    }
    Ok(out)
}

fn parse_ints(path: &Path) -> Result<Vec<(usize, i64)>> {
    let text = read(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(ln, l)| {
            l.trim()
                .parse::<i64>()
                .map(|v| (ln + 1, v))
                .map_err(|_| parse_err(path, ln + 1, 1, format!("{:?} is not an integer", l.trim())))
        })
        .collect()
}

/// Loads one split (`"train"` or `"test"`) without normalization.
pub fn load_ucihar_split(root: &Path, split: &str) -> Result<WindowedDataset> {
    let dir = root.join(split);
    let label_path = dir.join(format!("y_{split}.txt"));
    let subject_path = dir.join(format!("subject_{split}.txt"));
    let paths: Vec<PathBuf> = UCIHAR_CHANNELS
        .iter()
        .map(|c| dir.join("Inertial Signals").join(format!("{c}_{split}.txt")))
        .collect();
    for p in paths.iter().chain([&label_path, &subject_path]) {
        if !p.is_file() {
            return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")));
        }
    }

    let labels = parse_ints(&label_path)?
        .into_iter()
        .map(|(line, v)| {
            if (1..=6).contains(&v) {
                Ok(v as usize - 1)
            } else {
                Err(parse_err(&label_path, line, 1, format!("label {v} is outside 1..=6")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let subjects = parse_ints(&subject_path)?
        .into_iter()
        .map(|(line, v)| u32::try_from(v).map_err(|_| parse_err(&subject_path, line, 1, format!("bad subject id {v}"))))
        .collect::<Result<Vec<_>>>()?;

    // files are independent; results come back in declared channel order
    let channels: Vec<Vec<f64>> = map_indexed(Execution::default(), paths.len(), |i| parse_signal(&paths[i]))
        .into_iter()
        .collect::<Result<_>>()?;

    let n = labels.len();
    for (p, rows) in [(&subject_path, subjects.len())]
        .into_iter()
        .chain(paths.iter().zip(channels.iter().map(|c| c.len() / UCIHAR_WINDOW)))
    {
        if rows != n {
            return Err(Error::Data(format!(
                "{} has {rows} rows but {} has {n}",
                p.display(),
                label_path.display()
            )));
        }
    }

    let l = UCIHAR_WINDOW;
    let windows = (0..n)
        .map(|i| {
            let mut data = Vec::with_capacity(UCIHAR_CHANNELS.len() * l);
            for ch in &channels {
                data.extend_from_slice(&ch[i * l..(i + 1) * l]);
            }
            Tensor::new(vec![UCIHAR_CHANNELS.len(), l], data)
        })
        .collect::<Result<Vec<_>>>()?;
    WindowedDataset::new(
        vec![SensorSpec::new(UCIHAR_SENSOR, &UCIHAR_CHANNELS)],
        l,
        windows,
        labels,
        subjects,
        UCIHAR_CLASSES.iter().map(|s| s.to_string()).collect(),
    )
}

/// Loads both splits and z-scores every channel with train statistics.
pub fn load_ucihar(root: &Path) -> Result<(WindowedDataset, WindowedDataset)> {
    let mut train = load_ucihar_split(root, "train")?;
    let mut test = load_ucihar_split(root, "test")?;
    if train.is_empty() {
        return Err(Error::Data(format!("{} has no training windows", root.display())));
    }
    let stats = train.fit_normalization()?;
    train.normalize(&stats)?;
    test.normalize(&stats)?;
    Ok((train, test))
}

/// Writes a small dataset in the on-disk layout; used by tests and demos.
pub fn write_ucihar_layout(root: &Path, split: &str, ds: &WindowedDataset) -> Result<()> {
    let dir = root.join(split);
    let sig = dir.join("Inertial Signals");
    std::fs::create_dir_all(&sig).map_err(|e| Error::io(&sig, e))?;
    let write = |p: PathBuf, s: String| std::fs::write(&p, s).map_err(|e| Error::io(&p, e));
    for (c, name) in UCIHAR_CHANNELS.iter().enumerate() {
        let mut s = String::new();
        for i in 0..ds.len() {
            for v in ds.window(i).outer(c) {
                s.push_str(&format!(" {v:.8e}"));
            }
            s.push('\n');
        }
        write(sig.join(format!("{name}_{split}.txt")), s)?;
    }
    let labels: String = ds.labels().iter().map(|l| format!("{}\n", l + 1)).collect();
    write(dir.join(format!("y_{split}.txt")), labels)?;
    let subjects: String = ds.subjects().iter().map(|s| format!("{s}\n")).collect();
    write(dir.join(format!("subject_{split}.txt")), subjects)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn synthetic(n: usize, seed: u64) -> WindowedDataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let windows = (0..n)
            .map(|_| Tensor::new(vec![9, 128], (0..9 * 128).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap())
            .collect();
        WindowedDataset::new(
            vec![SensorSpec::new(UCIHAR_SENSOR, &UCIHAR_CHANNELS)],
            128,
            windows,
            (0..n).map(|i| i % 6).collect(),
            (0..n).map(|i| 1 + (i % 4) as u32).collect(),
            UCIHAR_CLASSES.iter().map(|s| s.to_string()).collect(),
        )
        .unwrap()
    }

    fn fixture() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        write_ucihar_layout(dir.path(), "train", &synthetic(12, 1)).unwrap();
        write_ucihar_layout(dir.path(), "test", &synthetic(5, 2)).unwrap();
        dir
    }

    #[test]
    fn loads_and_normalizes_with_train_stats() {
        let dir = fixture();
        let (train, test) = load_ucihar(dir.path()).unwrap();
        assert_eq!((train.len(), test.len()), (12, 5));
        assert_eq!(train.class_names()[1], "WALKING UPSTAIRS");
        assert_eq!(train.labels()[5], 5);
        assert_eq!(train.normalization(), test.normalization());
        let refit = train.fit_normalization().unwrap();
        assert!(refit.mean.iter().all(|m| m.abs() < 1e-9));
        let (again, _) = load_ucihar(dir.path()).unwrap();
        assert_eq!(again, train);
    }

    #[test]
    fn missing_label_file_names_it() {
        let dir = fixture();
        std::fs::remove_file(dir.path().join("test/y_test.txt")).unwrap();
        let err = load_ucihar(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("y_test.txt"));
    }

    #[test]
    fn row_mismatch_and_bad_labels() {
        let dir = fixture();
        let p = dir.path().join("train/Inertial Signals/body_gyro_y_train.txt");
        let text = std::fs::read_to_string(&p).unwrap();
        let fewer: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
        std::fs::write(&p, fewer).unwrap();
        let err = load_ucihar(dir.path()).unwrap_err();
        assert!(err.to_string().contains("body_gyro_y_train.txt"), "{err}");

        let dir = fixture();
        std::fs::write(dir.path().join("test/y_test.txt"), "1\n2\n7\n1\n1\n").unwrap();
        let err = load_ucihar(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn non_numeric_cell_has_coordinates() {
        let dir = fixture();
        let p = dir.path().join("train/Inertial Signals/total_acc_z_train.txt");
        let text = std::fs::read_to_string(&p).unwrap().replacen(' ', " x ", 1);
        std::fs::write(&p, text).unwrap();
        let err = load_ucihar(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, column: 1, .. }), "{err}");
    }
}

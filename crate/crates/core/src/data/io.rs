use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, Quadruple, Split, TemporalRule, TkgDataset};

pub const DATASET_HEADER_FILE: &str = "dataset.json";
pub const DATASET_FORMAT_VERSION: u32 = 1;
const STAT_FILE: &str = "stat.txt";

/// Canonical header written next to the text tables. Its presence means the
/// tables already hold normalized snapshot indices.
#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    num_entities: usize,
    num_base_relations: usize,
    num_timestamps: usize,
    time_granularity: u64,
    min_raw_time: u64,
    augmented: bool,
    #[serde(default)]
    rule: Option<TemporalRule>,
}

const HEADER_FORMAT: &str = "daemon-tkg-dataset";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn parse_ints(path: &Path, line_no: usize, line: &str) -> Result<Vec<u64>, DataError> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<u64>().map_err(|_| DataError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("expected a non-negative integer, found {tok:?}"),
            })
        })
        .collect()
}

struct RawFact {
    s: u64,
    r: u64,
    o: u64,
    t: u64,
}

fn read_split(path: &Path, num_entities: usize, num_relations: usize) -> Result<Vec<RawFact>, DataError> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols = parse_ints(path, line_no, line)?;
        if cols.len() < 4 {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("expected at least 4 columns (s r o t), found {}", cols.len()),
            });
        }
        let (s, r, o, t) = (cols[0], cols[1], cols[2], cols[3]);
        for (what, id, limit) in [
            ("subject", s, num_entities),
            ("relation", r, num_relations),
            ("object", o, num_entities),
        ] {
            if id >= limit as u64 {
                return Err(DataError::Validation(format!(
                    "{}:{line_no}: {what} id {id} not below declared count {limit}",
                    path.display()
                )));
            }
        }
        out.push(RawFact { s, r, o, t });
    }
    Ok(out)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Reads `train.txt`, `valid.txt`, `test.txt` and `stat.txt` from `dir`.
///
/// Raw timestamps become consecutive snapshot indices: the smallest raw time
/// maps to 0 and the step is the gcd of gaps between distinct raw times.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<TkgDataset, DataError> {
    let dir = dir.as_ref();
    let stat_path = dir.join(STAT_FILE);
    let stat = read(&stat_path)?;
    let first = stat.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let counts = parse_ints(&stat_path, 1, first)?;
    if counts.len() < 2 {
        return Err(DataError::Parse {
            path: stat_path,
            line: 1,
            message: "expected `num_entities num_relations [num_timestamps]`".into(),
        });
    }
    let (num_entities, num_base_relations) = (counts[0] as usize, counts[1] as usize);

    let header_path = dir.join(DATASET_HEADER_FILE);
    let header: Option<DatasetHeader> = if header_path.exists() {
        let h: DatasetHeader = serde_json::from_str(&read(&header_path)?).map_err(|e| DataError::Parse {
            path: header_path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if h.format != HEADER_FORMAT || h.version != DATASET_FORMAT_VERSION {
            return Err(DataError::Validation(format!(
                "unsupported dataset header {} v{} (expected {HEADER_FORMAT} v{DATASET_FORMAT_VERSION})",
                h.format, h.version
            )));
        }
        if h.num_entities != num_entities || h.num_base_relations != num_base_relations {
            return Err(DataError::Validation(format!(
                "{} disagrees with {STAT_FILE} on entity/relation counts",
                header_path.display()
            )));
        }
        Some(h)
    } else {
        None
    };

    let raw: Vec<(Split, Vec<RawFact>)> = Split::ALL
        .iter()
        .map(|&s| Ok((s, read_split(&dir.join(s.file_name()), num_entities, num_base_relations)?)))
        .collect::<Result<_, DataError>>()?;

    let (granularity, min_raw) = match &header {
        Some(h) => (h.time_granularity, h.min_raw_time),
        None => {
            let mut times: Vec<u64> = raw.iter().flat_map(|(_, f)| f.iter().map(|x| x.t)).collect();
            times.sort_unstable();
            times.dedup();
            let min = times.first().copied().unwrap_or(0);
            let g = times.windows(2).fold(0, |g, w| gcd(g, w[1] - w[0])).max(1);
            (g, min)
        }
    };
    let normalize = |t: u64| -> usize {
        match header {
            Some(_) => t as usize,
            None => ((t - min_raw) / granularity) as usize,
        }
    };
    let mut splits = raw.into_iter().map(|(_, facts)| {
        facts
            .into_iter()
            .map(|f| Quadruple::new(f.s as usize, f.r as usize, f.o as usize, normalize(f.t)))
            .collect::<Vec<_>>()
    });
    let (train, valid, test) = (
        splits.next().unwrap_or_default(),
        splits.next().unwrap_or_default(),
        splits.next().unwrap_or_default(),
    );

    let mut ds = TkgDataset::new(num_entities, num_base_relations, train, valid, test)?;
    ds.time_granularity = granularity;
    ds.min_raw_time = min_raw;
    if let Some(h) = &header {
        ds.rule = h.rule;
    }
    for w in ds.warnings() {
        log::warn!("{}: {w}", dir.display());
    }
    if header.as_ref().is_some_and(|h| h.augmented) {
        ds = ds.add_inverse_quadruples()?;
    }
    Ok(ds)
}

fn write_file(path: PathBuf, contents: &[u8]) -> Result<(), DataError> {
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    f.write_all(contents).map_err(io_err(&path))
}

/// Writes the canonical form: `dataset.json`, `stat.txt` and the three split
/// tables holding base facts with normalized times.
pub fn save_dataset(ds: &TkgDataset, dir: impl AsRef<Path>) -> Result<(), DataError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let header = DatasetHeader {
        format: HEADER_FORMAT.into(),
        version: DATASET_FORMAT_VERSION,
        num_entities: ds.num_entities,
        num_base_relations: ds.num_base_relations,
        num_timestamps: ds.num_timestamps(),
        time_granularity: ds.time_granularity,
        min_raw_time: ds.min_raw_time,
        augmented: ds.is_augmented(),
        rule: ds.rule,
    };
    let json = serde_json::to_string_pretty(&header).expect("header serializes");
    write_file(dir.join(DATASET_HEADER_FILE), json.as_bytes())?;
    write_file(
        dir.join(STAT_FILE),
        format!(
            "{}\t{}\t{}\n",
            ds.num_entities,
            ds.num_base_relations,
            ds.num_timestamps()
        )
        .as_bytes(),
    )?;
    for split in Split::ALL {
        let mut text = String::new();
        for q in ds.base_facts(split) {
            text.push_str(&format!("{}\t{}\t{}\t{}\n", q.subject, q.relation, q.object, q.time));
        }
        write_file(dir.join(split.file_name()), text.as_bytes())?;
    }
    Ok(())
}

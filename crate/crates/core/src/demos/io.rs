use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Demonstration;
use crate::error::{Error, Result};
use crate::wire::to_line;

pub const DATASET_SCHEMA: &str = "lfd-dataset";
pub const DATASET_VERSION: &str = "1.0";

/// First line of every dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub schema: String,
    pub version: String,
}

impl Default for DatasetHeader {
    fn default() -> Self {
        Self {
            schema: DATASET_SCHEMA.into(),
            version: DATASET_VERSION.into(),
        }
    }
}

impl DatasetHeader {
    fn check(&self) -> Result<()> {
        if self.schema != DATASET_SCHEMA {
            return Err(Error::Format(format!("not a dataset file (schema `{}`)", self.schema)));
        }
        let major = |v: &str| v.split('.').next().unwrap_or("").to_string();
        if major(&self.version) != major(DATASET_VERSION) {
            return Err(Error::Format(format!(
                "dataset version {} is incompatible with {DATASET_VERSION}",
                self.version
            )));
        }
        Ok(())
    }
}

pub fn write_dataset<W: Write>(mut out: W, demos: &[Demonstration]) -> Result<()> {
    writeln!(out, "{}", to_line(&DatasetHeader::default())?)?;
    for d in demos {
        d.validate()?;
        writeln!(out, "{}", to_line(d)?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<Demonstration>> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty dataset file".into()))??;
    let header: DatasetHeader =
        serde_json::from_str(&header).map_err(|e| Error::Format(format!("bad dataset header: {e}")))?;
    header.check()?;
    let mut demos = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let demo: Demonstration =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", n + 2)))?;
        demo.validate()
            .map_err(|e| Error::Format(format!("line {}: {e}", n + 2)))?;
        demos.push(demo);
    }
    Ok(demos)
}

pub fn write_dataset_file(path: impl AsRef<Path>, demos: &[Demonstration]) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), demos)
}

pub fn read_dataset_file(path: impl AsRef<Path>) -> Result<Vec<Demonstration>> {
    read_dataset(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos::testutil::synthetic;
    use crate::demos::{frequency_reduce, PushStrategy};

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut demos = frequency_reduce(&synthetic(30, 1), 4.0).unwrap();
        demos[0].strategy = Some(PushStrategy::RotateFirst);
        demos[1].waypoints[0].gripper[0] = 0.1 + 0.2;
        demos[2].waypoints[0].gripper[1] = -1e-300;
        let mut a = Vec::new();
        write_dataset(&mut a, &demos).unwrap();
        let back = read_dataset(a.as_slice()).unwrap();
        assert_eq!(back, demos);
        let mut b = Vec::new();
        write_dataset(&mut b, &back).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_foreign_or_future_files() {
        let bad_schema = "{\"schema\":\"other\",\"version\":\"1.0\"}\n";
        assert!(read_dataset(bad_schema.as_bytes()).is_err());
        let future = "{\"schema\":\"lfd-dataset\",\"version\":\"2.0\"}\n";
        assert!(read_dataset(future.as_bytes()).is_err());
        let minor = "{\"schema\":\"lfd-dataset\",\"version\":\"1.3\"}\n";
        assert!(read_dataset(minor.as_bytes()).unwrap().is_empty());
        assert!(read_dataset("".as_bytes()).is_err());
    }

    #[test]
    fn rejects_invalid_demonstrations() {
        let mut d = synthetic(3, 0);
        d.waypoints[1].gripper[7] = 0.5;
        let mut out = Vec::new();
        assert!(write_dataset(&mut out, &[d]).is_err());
    }
}

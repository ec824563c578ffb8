//! Dataset file: the magic line `VEGN1`, a text manifest of `key=value`
//! settings and `array <name> <rows> <cols>` lines closed by `end`, then
//! every array as little-endian `f64` in manifest order.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::dataset::{charged_graph, trajectory_seed, Dataset, DatasetConfig, SamplePair};

pub const MAGIC: &str = "VEGN1";
pub const FORMAT_VERSION: u32 = 1;

const SPLITS: [&str; 3] = ["train", "val", "test"];
const FIELDS: [&str; 4] = ["charges", "positions", "velocities", "targets"];

fn split_samples<'a>(ds: &'a Dataset, split: &str) -> &'a [SamplePair] {
    match split {
        "train" => &ds.train,
        "val" => &ds.val,
        _ => &ds.test,
    }
}

fn field_array(samples: &[SamplePair], field: &str, n: usize) -> Tensor {
    let mut data = Vec::new();
    for s in samples {
        match field {
            "charges" => data.extend_from_slice(&s.charges),
            "positions" => data.extend_from_slice(s.input.positions.data()),
            "velocities" => data.extend_from_slice(s.input.velocities.data()),
            _ => data.extend_from_slice(s.target.data()),
        }
    }
    let cols = if field == "charges" { n } else { 3 };
    let rows = data.len() / cols;
    Tensor::new(rows, cols, data).expect("consistent sample sizes")
}

/// Manifest text and arrays, in the order they are written.
fn layout(ds: &Dataset) -> (String, Vec<(String, Tensor)>) {
    let c = &ds.config;
    let mut m = String::new();
    m.push_str(&format!("{MAGIC}\n"));
    m.push_str(&format!("format_version={FORMAT_VERSION}\n"));
    let settings: [(&str, String); 10] = [
        ("particles", c.particles.to_string()),
        ("input_frame", c.input_frame.to_string()),
        ("delta_t", c.delta_t.to_string()),
        ("dt", c.dt.to_string()),
        ("substeps", c.substeps.to_string()),
        ("softening", c.softening.to_string()),
        ("seed", c.seed.to_string()),
        ("train", c.train.to_string()),
        ("val", c.val.to_string()),
        ("test", c.test.to_string()),
    ];
    for (k, v) in settings {
        m.push_str(&format!("{k}={v}\n"));
    }
    let mut arrays = Vec::new();
    for split in SPLITS {
        for field in FIELDS {
            let name = format!("{split}.{field}");
            let t = field_array(split_samples(ds, split), field, c.particles);
            m.push_str(&format!("array {name} {} {}\n", t.rows(), t.cols()));
            arrays.push((name, t));
        }
    }
    m.push_str("end\n");
    (m, arrays)
}

pub fn write_dataset<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    let (manifest, arrays) = layout(ds);
    w.write_all(manifest.as_bytes())?;
    for (_, t) in arrays {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Bytes `write_dataset` produces for `ds`.
pub fn encoded_len(ds: &Dataset) -> usize {
    let (manifest, arrays) = layout(ds);
    manifest.len() + 8 * arrays.iter().map(|(_, t)| t.len()).sum::<usize>()
}

fn parse<T: std::str::FromStr>(settings: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = settings
        .get(key)
        .ok_or_else(|| Error::Format(format!("manifest lacks `{key}`")))?;
    raw.parse()
        .map_err(|_| Error::Format(format!("bad value `{raw}` for `{key}`")))
}

pub fn read_dataset<R: Read>(r: R) -> Result<Dataset> {
    let mut r = BufReader::new(r);
    let mut magic = [0u8; MAGIC.len() + 1];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for a dataset header".into()))?;
    if &magic[..MAGIC.len()] != MAGIC.as_bytes() || magic[MAGIC.len()] != b'\n' {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let mut settings = BTreeMap::new();
    let mut arrays: Vec<(String, usize, usize)> = Vec::new();
    let mut line = String::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("manifest truncated".into()));
        }
        let l = line.trim_end();
        if l == "end" {
            break;
        }
        if let Some(rest) = l.strip_prefix("array ") {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            let dims = (parts.len() == 3)
                .then(|| Some((parts[1].parse().ok()?, parts[2].parse().ok()?)))
                .flatten();
            match dims {
                Some((rows, cols)) => arrays.push((parts[0].to_string(), rows, cols)),
                None => return Err(Error::Format(format!("bad array line `{l}`"))),
            }
        } else if let Some((k, v)) = l.split_once('=') {
            settings.insert(k.to_string(), v.to_string());
        } else {
            return Err(Error::Format(format!("bad manifest line `{l}`")));
        }
    }
    let version: u32 = parse(&settings, "format_version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let config = DatasetConfig {
        train: parse(&settings, "train")?,
        val: parse(&settings, "val")?,
        test: parse(&settings, "test")?,
        particles: parse(&settings, "particles")?,
        input_frame: parse(&settings, "input_frame")?,
        delta_t: parse(&settings, "delta_t")?,
        dt: parse(&settings, "dt")?,
        substeps: parse(&settings, "substeps")?,
        softening: parse(&settings, "softening")?,
        seed: parse(&settings, "seed")?,
    };

    let mut tensors = BTreeMap::new();
    let mut buf = [0u8; 8];
    for (name, rows, cols) in arrays {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format(format!("array `{name}` truncated")))?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.insert(name, Tensor::new(rows, cols, data)?);
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::Format("trailing bytes after the last array".into()));
    }

    let n = config.particles;
    let mut splits: Vec<Vec<SamplePair>> = Vec::new();
    let mut offset = 0u64;
    for (split, count) in SPLITS.iter().zip([config.train, config.val, config.test]) {
        let get = |field: &str| -> Result<&Tensor> {
            let t = tensors
                .get(&format!("{split}.{field}"))
                .ok_or_else(|| Error::Format(format!("missing array `{split}.{field}`")))?;
            let want = if field == "charges" { [count, n] } else { [count * n, 3] };
            if t.shape() != want {
                return Err(Error::Format(format!(
                    "array `{split}.{field}` has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        let (charges, pos, vel, tgt) = (get("charges")?, get("positions")?, get("velocities")?, get("targets")?);
        let rows = |t: &Tensor, k: usize| t.slice_rows(k * n, (k + 1) * n);
        let mut samples = Vec::with_capacity(count);
        for k in 0..count {
            let c = charges.row(k).to_vec();
            samples.push(SamplePair {
                input: charged_graph(rows(pos, k)?, rows(vel, k)?, &c)?,
                target: rows(tgt, k)?,
                charges: c,
                delta_t: config.delta_t,
                seed: trajectory_seed(config.seed, offset + k as u64),
            });
        }
        offset += count as u64;
        splits.push(samples);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Dataset {
        config,
        train,
        val,
        test,
    })
}

pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset> {
    read_dataset(std::fs::File::open(path)?)
}

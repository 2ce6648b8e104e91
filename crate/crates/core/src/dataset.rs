//! On-disk formats: per-scene point/label files, split directories, and
//! flat binary checkpoints for the parameter store. Everything is
//! little-endian and bit-exactly specified so other tooling can parse it.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD};
use thiserror::Error;

use crate::autodiff::ParamStore;
use crate::geom::{Box3D, PointCloud};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

fn parse_err(path: &Path, msg: impl Into<String>) -> DatasetError {
    DatasetError::Parse {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Points file: `u32` count, then count records of `x y z intensity` as
/// little-endian `f32`.
pub fn write_points(path: &Path, cloud: &PointCloud<f64>) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&(cloud.xyz.len() as u32).to_le_bytes())?;
    for (i, p) in cloud.xyz.iter().enumerate() {
        for c in p {
            w.write_all(&(*c as f32).to_le_bytes())?;
        }
        let intensity = if cloud.attrs.ncols() > 0 {
            cloud.attrs[[i, 0]] as f32
        } else {
            0.0
        };
        w.write_all(&intensity.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_points(path: &Path) -> Result<PointCloud<f64>, DatasetError> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)
        .map_err(|_| parse_err(path, "missing point count header"))?;
    let n = u32::from_le_bytes(buf4) as usize;
    let mut xyz = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for i in 0..n {
        let mut rec = [0u8; 16];
        r.read_exact(&mut rec)
            .map_err(|_| parse_err(path, format!("truncated at point {i} of {n}")))?;
        let f = |k: usize| {
            f32::from_le_bytes([rec[4 * k], rec[4 * k + 1], rec[4 * k + 2], rec[4 * k + 3]])
                as f64
        };
        xyz.push([f(0), f(1), f(2)]);
        intensity.push(f(3));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(parse_err(path, "trailing bytes after last point"));
    }
    let attrs = Array2::from_shape_vec((n, 1), intensity)
        .expect("length checked");
    PointCloud::new(xyz, attrs, None).map_err(|e| parse_err(path, e.to_string()))
}

/// Labels file: one box per line, `cx cy cz l w h yaw class`, floats in
/// shortest round-trip decimal form.
pub fn write_labels(path: &Path, boxes: &[Box3D<f64>]) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for b in boxes {
        writeln!(
            w,
            "{} {} {} {} {} {} {} {}",
            b.center[0], b.center[1], b.center[2], b.dims[0], b.dims[1], b.dims[2], b.yaw,
            b.class_id
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<Box3D<f64>>, DatasetError> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut boxes = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(parse_err(
                path,
                format!("line {}: expected 8 fields, got {}", ln + 1, fields.len()),
            ));
        }
        let num = |k: usize| -> Result<f64, DatasetError> {
            fields[k]
                .parse()
                .map_err(|_| parse_err(path, format!("line {}: bad float {:?}", ln + 1, fields[k])))
        };
        let class: usize = fields[7]
            .parse()
            .map_err(|_| parse_err(path, format!("line {}: bad class {:?}", ln + 1, fields[7])))?;
        let b = Box3D::new(
            [num(0)?, num(1)?, num(2)?],
            [num(3)?, num(4)?, num(5)?],
            num(6)?,
            class,
        )
        .map_err(|e| parse_err(path, format!("line {}: {e}", ln + 1)))?;
        boxes.push(b);
    }
    Ok(boxes)
}

pub fn scene_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{index:05}.bin")),
        dir.join(format!("{index:05}.txt")),
    )
}

pub fn write_scene(
    dir: &Path,
    index: usize,
    cloud: &PointCloud<f64>,
    boxes: &[Box3D<f64>],
) -> Result<(), DatasetError> {
    let (pts, lbl) = scene_paths(dir, index);
    write_points(&pts, cloud)?;
    write_labels(&lbl, boxes)
}

pub fn read_scene(dir: &Path, index: usize) -> Result<(PointCloud<f64>, Vec<Box3D<f64>>), DatasetError> {
    let (pts, lbl) = scene_paths(dir, index);
    Ok((read_points(&pts)?, read_labels(&lbl)?))
}

/// Writes a whole split into `dir`, creating it if needed.
pub fn write_split(
    dir: &Path,
    scenes: &[(PointCloud<f64>, Vec<Box3D<f64>>)],
) -> Result<(), DatasetError> {
    fs::create_dir_all(dir)?;
    for (i, (cloud, boxes)) in scenes.iter().enumerate() {
        write_scene(dir, i, cloud, boxes)?;
    }
    Ok(())
}

/// Reads every `*.bin`/`*.txt` pair in `dir`, ordered by file name.
pub fn read_split(dir: &Path) -> Result<Vec<(PointCloud<f64>, Vec<Box3D<f64>>)>, DatasetError> {
    let mut stems: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    stems.sort();
    let mut out = Vec::with_capacity(stems.len());
    for pts in stems {
        let lbl = pts.with_extension("txt");
        out.push((read_points(&pts)?, read_labels(&lbl)?));
    }
    Ok(out)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"VVD1";

/// Checkpoint: magic, `u32` tensor count, then per tensor a `u32` name
/// length, the UTF-8 name, a `u32` rank, `u32` dims, and the values as
/// little-endian `f64` in row-major order.
pub fn save_checkpoint(path: &Path, store: &ParamStore<f64>) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    let n = store.iter_named().count() as u32;
    w.write_all(&n.to_le_bytes())?;
    for (name, value) in store.iter_named() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(value.ndim() as u32).to_le_bytes())?;
        for d in value.shape() {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for x in value.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Restores a checkpoint into a store with identical registration. Every
/// tensor in the file must exist in the store with the same shape, and the
/// store must not contain tensors missing from the file.
pub fn load_checkpoint(path: &Path, store: &mut ParamStore<f64>) -> Result<(), DatasetError> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(DatasetError::Checkpoint(format!(
            "bad magic {magic:?} in {}",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<fs::File>| -> Result<u32, DatasetError> {
        r.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let n = read_u32(&mut r)? as usize;
    let expected = store.iter_named().count();
    if n != expected {
        return Err(DatasetError::Checkpoint(format!(
            "tensor count mismatch: file has {n}, store has {expected}"
        )));
    }
    for _ in 0..n {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| DatasetError::Checkpoint("non-UTF-8 tensor name".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut f64buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut f64buf)?;
            data.push(f64::from_le_bytes(f64buf));
        }
        let value = ArrayD::from_shape_vec(shape, data)
            .map_err(|e| DatasetError::Checkpoint(format!("tensor {name}: {e}")))?;
        store
            .load_named(&name, value)
            .map_err(|e| DatasetError::Checkpoint(format!("tensor {name}: {e}")))?;
    }
    Ok(())
}

//! On-disk formats: `MTAT` tensor files, dataset directories and
//! checkpoints. Every writer goes through a temp file and a rename.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use mtscene_tensor::{Real, Tensor};

use crate::error::{format_err, invalid, io_err, Error, Result};
use crate::grid::Grid;
use crate::config::Config;
use crate::synth::{generate_set, scene_class_names, semantic_class_names, SceneSample};

pub const MAGIC: &[u8; 4] = b"MTAT";
pub const VERSION: u32 = 1;
const MAX_RANK: u32 = 16;
/// Elements; guards against absurd extents in corrupt headers.
const MAX_ELEMENTS: u64 = 1 << 34;

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let write = || -> io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io_err(path)(e)
    })
}

pub fn encode_tensor<T: Real>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&T::DTYPE_CODE.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        match T::DTYPE_CODE {
            0 => out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes()),
            _ => out.extend_from_slice(&v.to_f64().unwrap_or(f64::NAN).to_le_bytes()),
        }
    }
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reasons a tensor record fails to decode.
fn decode_err(e: io::Error) -> String {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        "truncated tensor record".into()
    } else {
        e.to_string()
    }
}

/// Reads one tensor record of either dtype and converts it to `T`.
pub fn decode_tensor<T: Real>(r: &mut impl Read) -> std::result::Result<Tensor<T>, String> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(decode_err)?;
    if &magic != MAGIC {
        return Err(format!("bad magic {magic:?}"));
    }
    let version = read_u32(r).map_err(decode_err)?;
    if version != VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let dtype = read_u32(r).map_err(decode_err)?;
    if dtype > 1 {
        return Err(format!("unknown dtype code {dtype}"));
    }
    let rank = read_u32(r).map_err(decode_err)?;
    if rank == 0 || rank > MAX_RANK {
        return Err(format!("invalid rank {rank}"));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut n: u64 = 1;
    for _ in 0..rank {
        let e = read_u64(r).map_err(decode_err)?;
        if e == 0 {
            return Err("zero extent".into());
        }
        n = n
            .checked_mul(e)
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or_else(|| "extent overflow".to_string())?;
        shape.push(e as usize);
    }
    let width = if dtype == 0 { 4 } else { 8 };
    let mut bytes = Vec::new();
    r.take(n * width)
        .read_to_end(&mut bytes)
        .map_err(decode_err)?;
    if bytes.len() as u64 != n * width {
        return Err("truncated tensor payload".into());
    }
    let data: Vec<T> = if dtype == 0 {
        bytes
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect()
    } else {
        bytes
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect()
    };
    Tensor::new(&shape, data).map_err(|e| e.to_string())
}

pub fn write_tensor<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    if !t.is_finite() {
        return Err(invalid(format!("{}: tensor holds non-finite values", path.display())));
    }
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf);
    atomic_write(path, &buf)
}

pub fn read_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut cur = bytes.as_slice();
    let t = decode_tensor(&mut cur).map_err(|r| format_err(path, r))?;
    if !cur.is_empty() {
        return Err(format_err(path, "trailing bytes after tensor"));
    }
    Ok(t)
}

/// Named tensors, in order.
pub fn write_checkpoint(path: &Path, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    let mut buf = Vec::new();
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        encode_tensor(t, &mut buf);
    }
    atomic_write(path, &buf)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut cur = bytes.as_slice();
    let mut out = Vec::new();
    while !cur.is_empty() {
        let len = read_u32(&mut cur).map_err(|e| format_err(path, decode_err(e)))? as usize;
        if len > cur.len() {
            return Err(format_err(path, "truncated entry name"));
        }
        let (name, rest) = cur.split_at(len);
        let name = String::from_utf8(name.to_vec()).map_err(|_| format_err(path, "entry name is not UTF-8"))?;
        cur = rest;
        let t = decode_tensor(&mut cur).map_err(|r| format_err(path, format!("entry `{name}`: {r}")))?;
        out.push((name, t));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub height: usize,
    pub width: usize,
    pub semantic_classes: Vec<String>,
    pub thing_classes: Vec<u32>,
    pub scene_classes: Vec<String>,
    pub min_area_fraction: f64,
    pub samples: Vec<String>,
}

impl Manifest {
    pub fn stuff_classes(&self) -> usize {
        self.semantic_classes.len() - self.thing_classes.len()
    }

    pub fn min_area(&self) -> usize {
        (self.min_area_fraction * (self.height * self.width) as f64).ceil() as usize
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "format = mtscene-dataset");
        let _ = writeln!(s, "version = {VERSION}");
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "semantic_classes = {}", self.semantic_classes.join(","));
        let _ = writeln!(s, "thing_classes = {}", join(&self.thing_classes));
        let _ = writeln!(s, "scene_classes = {}", self.scene_classes.join(","));
        let _ = writeln!(s, "min_area_fraction = {}", self.min_area_fraction);
        let _ = writeln!(s, "samples = {}", self.samples.len());
        for p in &self.samples {
            let _ = writeln!(s, "{p}");
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut kv = BTreeMap::new();
        let mut samples = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            match line.split_once('=') {
                Some((k, v)) => {
                    kv.insert(k.trim().to_string(), v.trim().to_string());
                }
                None => samples.push(line.to_string()),
            }
        }
        let get = |k: &str| {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| format_err(path, format!("manifest lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| format_err(path, format!("manifest `{k}` is not an integer")))
        };
        if get("format")? != "mtscene-dataset" || num("version")? != VERSION as usize {
            return Err(format_err(path, "not an mtscene dataset manifest (version 1)"));
        }
        let names = |k: &str| -> Result<Vec<String>> {
            Ok(get(k)?.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
        };
        let things = get("thing_classes")?
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse::<u32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| format_err(path, "manifest thing_classes are not integers"))?;
        let m = Manifest {
            height: num("height")?,
            width: num("width")?,
            semantic_classes: names("semantic_classes")?,
            thing_classes: things,
            scene_classes: names("scene_classes")?,
            min_area_fraction: get("min_area_fraction")?
                .parse()
                .map_err(|_| format_err(path, "manifest min_area_fraction is not a number"))?,
            samples,
        };
        if num("samples")? != m.samples.len() {
            return Err(format_err(path, "sample count disagrees with listed samples"));
        }
        let k = m.semantic_classes.len() as u32;
        let stuff = m.stuff_classes() as u32;
        let contiguous = m.thing_classes.iter().enumerate().all(|(i, &t)| t == stuff + i as u32);
        if m.thing_classes.is_empty() || m.thing_classes.len() >= k as usize || !contiguous {
            return Err(format_err(path, "thing classes must be the trailing class ids"));
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<SceneSample>,
}

impl Manifest {
    /// Class layout and extent of datasets generated under `cfg`, with no
    /// samples listed.
    pub fn for_config(cfg: &Config) -> Self {
        let g = &cfg.gen;
        Manifest {
            height: g.height,
            width: g.width,
            semantic_classes: semantic_class_names(g.stuff_classes, g.thing_classes),
            thing_classes: cfg.model.thing_classes(),
            scene_classes: scene_class_names(g.scene_classes),
            min_area_fraction: g.min_area_fraction,
            samples: Vec::new(),
        }
    }
}

/// Generates `count` scenes in memory as a dataset.
pub fn generate_dataset(cfg: &Config, count: usize, seed: u64) -> Result<Dataset> {
    let samples = generate_set(seed, count, &cfg.gen)?;
    let mut manifest = Manifest::for_config(cfg);
    manifest.samples = (0..count).map(|i| format!("sample_{i:04}")).collect();
    Ok(Dataset { manifest, samples })
}

fn grid_tensor(g: &Grid<u32>) -> Result<Tensor<f32>> {
    Ok(Tensor::new(&[g.height, g.width], g.data.iter().map(|&v| v as f32).collect())?)
}

fn tensor_grid(t: &Tensor<f32>, path: &Path) -> Result<Grid<u32>> {
    let &[h, w] = t.shape() else {
        return Err(format_err(path, "label grid must be rank 2"));
    };
    let data = t
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
                Ok(v as u32)
            } else {
                Err(format_err(path, format!("label {v} is not a nonnegative integer")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Grid::from_vec(h, w, data))
}

/// Rows `(id, degrees)` in double precision; a single `(0, 0)` row stands for an empty table.
fn orientation_tensor(o: &BTreeMap<u32, f64>) -> Result<Tensor<f64>> {
    if o.is_empty() {
        return Ok(Tensor::new(&[1, 2], vec![0.0, 0.0])?);
    }
    let data = o.iter().flat_map(|(&id, &deg)| [id as f64, deg]).collect();
    Ok(Tensor::new(&[o.len(), 2], data)?)
}

fn tensor_orientations(t: &Tensor<f64>, path: &Path) -> Result<BTreeMap<u32, f64>> {
    if t.rank() != 2 || t.shape()[1] != 2 {
        return Err(format_err(path, "orientation table must be n x 2"));
    }
    let mut out = BTreeMap::new();
    for row in t.data().chunks(2) {
        if row[0] == 0.0 {
            continue;
        }
        if row[0] < 0.0 || row[0].fract() != 0.0 {
            return Err(format_err(path, format!("bad instance id {}", row[0])));
        }
        if out.insert(row[0] as u32, row[1]).is_some() {
            return Err(format_err(path, format!("instance {} listed twice", row[0])));
        }
    }
    Ok(out)
}

pub fn write_sample(dir: &Path, s: &SceneSample) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_tensor(&dir.join("rgb.mt"), &s.rgb)?;
    write_tensor(&dir.join("depth.mt"), &s.depth)?;
    write_tensor(&dir.join("semantic.mt"), &grid_tensor(&s.semantic)?)?;
    write_tensor(&dir.join("instance.mt"), &grid_tensor(&s.instance)?)?;
    write_tensor(&dir.join("orient.mt"), &orientation_tensor(&s.orientations)?)?;
    atomic_write(&dir.join("scene.txt"), format!("{}\n", s.scene_class).as_bytes())
}

pub fn read_sample(dir: &Path) -> Result<SceneSample> {
    let need = |name: &str| -> Result<PathBuf> {
        let p = dir.join(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(format_err(p, "missing sample file"))
        }
    };
    let rgb = read_tensor(&need("rgb.mt")?)?;
    let depth = read_tensor(&need("depth.mt")?)?;
    let sp = need("semantic.mt")?;
    let semantic = tensor_grid(&read_tensor(&sp)?, &sp)?;
    let ip = need("instance.mt")?;
    let instance = tensor_grid(&read_tensor(&ip)?, &ip)?;
    let op = need("orient.mt")?;
    let orientations = tensor_orientations(&read_tensor(&op)?, &op)?;
    let scp = need("scene.txt")?;
    let scene_class = fs::read_to_string(&scp)
        .map_err(io_err(&scp))?
        .trim()
        .parse()
        .map_err(|_| format_err(&scp, "scene class is not an integer"))?;
    Ok(SceneSample {
        rgb,
        depth,
        semantic,
        instance,
        orientations,
        scene_class,
    })
}

/// Writes `samples` under `dir` as `sample_NNNN/` plus `manifest.txt`.
pub fn write_dataset(dir: &Path, manifest_base: &Manifest, samples: &[SceneSample]) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = manifest_base.clone();
    manifest.samples = (0..samples.len()).map(|i| format!("sample_{i:04}")).collect();
    for (name, s) in manifest.samples.iter().zip(samples) {
        write_sample(&dir.join(name), s)?;
    }
    atomic_write(&dir.join("manifest.txt"), manifest.to_text().as_bytes())?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.txt");
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest = Manifest::parse(&text, &mpath)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for rel in &manifest.samples {
        let sdir = dir.join(rel);
        let s = read_sample(&sdir)?;
        if s.height() != manifest.height || s.width() != manifest.width {
            return Err(format_err(&sdir, "sample extent disagrees with the manifest"));
        }
        s.validate(
            manifest.semantic_classes.len(),
            manifest.stuff_classes(),
            manifest.scene_classes.len(),
            manifest.min_area(),
        )
        .map_err(|e| match e {
            Error::Invalid(reason) => format_err(&sdir, reason),
            e => e,
        })?;
        samples.push(s);
    }
    Ok(Dataset { manifest, samples })
}

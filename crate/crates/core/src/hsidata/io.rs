use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HsiCube;
use crate::error::{Error, Result};

pub const DTYPE: &str = "f32le";
pub const LAYOUT: &str = "band-sequential";

/// JSON header describing a scene stored as two raw companion files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneHeader {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub num_classes: usize,
    pub dtype: String,
    pub layout: String,
    pub data_file: String,
    pub label_file: String,
}

/// Accepts either a header file or a directory holding exactly one `.json` header
/// (`scene.json` wins when several exist).
pub fn resolve_scene_path(path: &Path) -> Result<PathBuf> {
    if !path.is_dir() {
        return Ok(path.to_path_buf());
    }
    let preferred = path.join("scene.json");
    if preferred.is_file() {
        return Ok(preferred);
    }
    let mut headers: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    headers.sort();
    match headers.len() {
        1 => Ok(headers.remove(0)),
        0 => Err(Error::format(path, "directory contains no scene header")),
        _ => Err(Error::format(path, "directory contains several headers; name one explicitly")),
    }
}

fn read_raw(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::format(path, "companion raw file is missing"),
        _ => Error::io(path, e),
    })?;
    if bytes.len() < expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    Ok(bytes)
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<HsiCube> {
    let header_path = resolve_scene_path(path.as_ref())?;
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: SceneHeader = serde_json::from_str(&text)
        .map_err(|e| Error::format(&header_path, format!("bad header: {e}")))?;
    if header.dtype != DTYPE {
        return Err(Error::format(&header_path, format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.layout != LAYOUT {
        return Err(Error::format(&header_path, format!("unsupported layout {:?}", header.layout)));
    }
    let dir = header_path.parent().unwrap_or(Path::new("."));
    let pixels = header.height * header.width;
    let values = pixels * header.bands;

    let data_path = dir.join(&header.data_file);
    let data = read_raw(&data_path, values * 4)?;
    let reflectance: Vec<f32> = data[..values * 4]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    let label_path = dir.join(&header.label_file);
    let raw_labels = read_raw(&label_path, pixels * 2)?;
    let labels: Vec<u16> = raw_labels[..pixels * 2]
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();

    HsiCube::new(
        header.height,
        header.width,
        header.bands,
        reflectance,
        labels,
        header.num_classes,
    )
}

/// Writes `NAME.json`, `NAME.f32` and `NAME_labels.u16` into `dir`; returns the header path.
pub fn save_scene(cube: &HsiCube, dir: impl AsRef<Path>, name: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = SceneHeader {
        height: cube.height,
        width: cube.width,
        bands: cube.bands,
        num_classes: cube.num_classes,
        dtype: DTYPE.into(),
        layout: LAYOUT.into(),
        data_file: format!("{name}.f32"),
        label_file: format!("{name}_labels.u16"),
    };
    let data: Vec<u8> = cube.reflectance.iter().flat_map(|v| v.to_le_bytes()).collect();
    let labels: Vec<u8> = cube.labels.iter().flat_map(|v| v.to_le_bytes()).collect();
    let data_path = dir.join(&header.data_file);
    fs::write(&data_path, data).map_err(|e| Error::io(&data_path, e))?;
    let label_path = dir.join(&header.label_file);
    fs::write(&label_path, labels).map_err(|e| Error::io(&label_path, e))?;
    let header_path = dir.join(format!("{name}.json"));
    let json = serde_json::to_string_pretty(&header)?;
    fs::write(&header_path, json).map_err(|e| Error::io(&header_path, e))?;
    Ok(header_path)
}

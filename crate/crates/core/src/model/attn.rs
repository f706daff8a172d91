use std::fs;
use std::path::{Path, PathBuf};

use crate::real::Real;
use crate::{Error, Result};

/// Scales weights so the largest maps to 255, rounding half up.
pub fn rescale_u8(values: &[f64]) -> Vec<u8> {
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|v| (v.max(0.0) / max * 255.0 + 0.5).floor().min(255.0) as u8)
        .collect()
}

/// Binary 8-bit graymap (`P5`, maxval 255).
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::ShapeMismatch {
            op: "write_pgm",
            lhs: vec![pixels.len()],
            rhs: vec![height, width],
        });
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Attention received by each key of one image's self-attention map
/// `[heads, N, N]`, averaged over heads and queries.
pub fn encoder_top_map<T: Real>(att: &[T], heads: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let scale = 1.0 / (heads * n) as f64;
    for row in att.chunks(n).take(heads * n) {
        for (o, a) in out.iter_mut().zip(row) {
            *o += a.f64() * scale;
        }
    }
    out
}

fn file_token(token: &str) -> String {
    token
        .chars()
        .filter(|c| c.is_ascii_alphanumeric() || *c == '-' || *c == '_')
        .collect()
}

/// Writes `tok{index}_{token}.pgm` for every generated token and
/// `encoder_top.pgm` into `dir`. Each map holds `grid.0 * grid.1` weights.
pub fn attn_dump(
    dir: &Path,
    grid: (usize, usize),
    tokens: &[String],
    token_maps: &[Vec<f64>],
    encoder_map: &[f64],
) -> Result<Vec<PathBuf>> {
    let (h, w) = grid;
    if tokens.len() != token_maps.len() {
        return Err(Error::invalid("one attention map per token is required"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (i, (tok, map)) in tokens.iter().zip(token_maps).enumerate() {
        let path = dir.join(format!("tok{i}_{}.pgm", file_token(tok)));
        write_pgm(&path, w, h, &rescale_u8(map))?;
        written.push(path);
    }
    let path = dir.join("encoder_top.pgm");
    write_pgm(&path, w, h, &rescale_u8(encoder_map))?;
    written.push(path);
    Ok(written)
}

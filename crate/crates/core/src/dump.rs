//! Writing inspection artifacts: SEO maps, TSB attention, and the files
//! left behind when training diverges.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::write_file;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tse::SeoArtifacts;

/// 8-bit binary PGM of a row-major `h x w` map, min-max scaled. A constant
/// map is written as mid-gray.
pub fn write_pgm(path: &Path, data: &[f64], h: usize, w: usize) -> Result<()> {
    if data.len() != h * w {
        return Err(Error::dim("write_pgm", &[data.len()], &[h, w]));
    }
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(data.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            128
        }
    }));
    write_file(path, &bytes)
}

/// Rank-2 tensor as CSV with round-trip float formatting.
pub fn write_matrix_csv(path: &Path, t: &Tensor) -> Result<()> {
    let (r, c) = match *t.shape() {
        [r, c] => (r, c),
        ref s => return Err(Error::pre("write_matrix_csv", format!("expected a matrix, got {s:?}"))),
    };
    let mut s = String::new();
    for i in 0..r {
        let row: Vec<String> = (0..c).map(|j| format!("{}", t.data()[i * c + j])).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    write_file(path, s.as_bytes())
}

/// Parses a CSV written by [`write_matrix_csv`].
pub fn read_matrix_csv(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for line in text.lines().filter(|l| !l.is_empty()) {
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.parse().map_err(|_| Error::format("csv", format!("bad value {v:?}"))))
            .collect::<Result<_>>()?;
        if *cols.get_or_insert(vals.len()) != vals.len() {
            return Err(Error::format("csv", "ragged rows"));
        }
        data.extend(vals);
        rows += 1;
    }
    Tensor::new(&[rows, cols.unwrap_or(0)], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub segment: usize,
    /// 1-based frame position in the segment.
    pub frame: usize,
    pub kind: String,
    pub file: String,
}

/// Writes every artifact of `artifacts[n][segment]` as `.tclt` plus a PGM
/// view, the attention matrices as CSV, and `index.tsv` listing them.
pub fn dump_artifacts(dir: &Path, artifacts: &[Vec<SeoArtifacts>], attention: &[Tensor]) -> Result<Vec<IndexEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = Vec::new();
    let mut put = |segment: usize, frame: usize, kind: String, t: &Tensor| -> Result<()> {
        let stem = format!("seg{segment}_{kind}");
        t.save(&dir.join(format!("{stem}.tclt")))?;
        let (h, w) = (t.shape()[t.rank() - 2], t.shape()[t.rank() - 1]);
        let view: Vec<f64> = if t.rank() == 3 {
            // channel mean of a feature map
            let d = t.shape()[0];
            (0..h * w)
                .map(|k| (0..d).map(|c| t.data()[c * h * w + k]).sum::<f64>() / d as f64)
                .collect()
        } else {
            t.data().to_vec()
        };
        write_pgm(&dir.join(format!("{stem}.pgm")), &view, h, w)?;
        for ext in ["tclt", "pgm"] {
            index.push(IndexEntry {
                segment,
                frame,
                kind: kind.clone(),
                file: format!("{stem}.{ext}"),
            });
        }
        Ok(())
    };
    for (n, per_seg) in artifacts.iter().enumerate() {
        let fno = n + 1;
        for (s, a) in per_seg.iter().enumerate() {
            for (k, (r, b)) in a.correlations.iter().zip(&a.masks).enumerate() {
                put(s, fno, format!("R{fno}{}", k + 1), r)?;
                put(s, fno, format!("B{fno}{}", k + 1), &b.to_tensor())?;
            }
            put(s, fno, format!("B{fno}"), &a.fused_mask.to_tensor())?;
            put(s, fno, format!("G{fno}"), &a.gate)?;
            put(s, fno, format!("erased{fno}"), &a.erased)?;
        }
    }
    for (c, a) in attention.iter().enumerate() {
        let file = format!("tsb_attention_clip{c}.csv");
        write_matrix_csv(&dir.join(&file), a)?;
        index.push(IndexEntry {
            segment: c,
            frame: 0,
            kind: "A".into(),
            file,
        });
    }
    let mut text = String::from("segment\tframe\tkind\tfile\n");
    for e in &index {
        let _ = writeln!(text, "{}\t{}\t{}\t{}", e.segment, e.frame, e.kind, e.file);
    }
    write_file(&dir.join("index.tsv"), text.as_bytes())?;
    Ok(index)
}

/// Reads `index.tsv` back.
pub fn read_index(dir: &Path) -> Result<Vec<IndexEntry>> {
    let path = dir.join("index.tsv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format("index", format!("bad number {s:?}")));
            match f.as_slice() {
                [s, fr, k, file] => Ok(IndexEntry {
                    segment: num(s)?,
                    frame: num(fr)?,
                    kind: k.to_string(),
                    file: file.to_string(),
                }),
                _ => Err(Error::format("index", format!("bad line {l:?}"))),
            }
        })
        .collect()
}

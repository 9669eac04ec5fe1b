use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BoundingBox, ClassPalette, Detection, DetectionSet, Result, SegmentationMask, SemanticsError};

fn io_err(path: &Path, source: std::io::Error) -> SemanticsError {
    SemanticsError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// `id<TAB>name` per line; blank lines and `#` comments ignored.
pub fn read_palette(text: &str) -> Result<ClassPalette> {
    let mut p = ClassPalette::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, name) = line
            .split_once('\t')
            .ok_or_else(|| SemanticsError::Palette(format!("line {}: expected id<TAB>name", i + 1)))?;
        let id: u16 = id
            .trim()
            .parse()
            .map_err(|_| SemanticsError::Palette(format!("line {}: invalid id '{id}'", i + 1)))?;
        p.insert(id, name.trim())
            .map_err(|e| SemanticsError::Palette(format!("line {}: {e}", i + 1)))?;
    }
    Ok(p)
}

pub fn write_palette(p: &ClassPalette) -> String {
    p.iter().map(|(id, name)| format!("{id}\t{name}\n")).collect()
}

/// Binary PGM (`P5`). Rasters whose ids fit in a byte use maxval 255,
/// otherwise 65535 with big-endian samples.
pub fn write_mask_pgm(mask: &SegmentationMask) -> Vec<u8> {
    let wide = mask.class_ids.iter().any(|&c| c > 255);
    let maxval = if wide { 65535 } else { 255 };
    let mut out = format!("P5\n{} {}\n{}\n", mask.width, mask.height, maxval).into_bytes();
    if wide {
        for c in &mask.class_ids {
            out.extend_from_slice(&c.to_be_bytes());
        }
    } else {
        out.extend(mask.class_ids.iter().map(|&c| c as u8));
    }
    out
}

pub fn read_mask_pgm(image_name: &str, bytes: &[u8]) -> Result<SegmentationMask> {
    let bad = |message: &str| SemanticsError::Mask {
        image: image_name.to_string(),
        message: message.to_string(),
    };
    // header: magic, width, height, maxval separated by whitespace, with
    // optional comments, then exactly one whitespace byte
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII PGM header"))?);
    }
    if tokens[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let width: u32 = tokens[1].parse().map_err(|_| bad("invalid width"))?;
    let height: u32 = tokens[2].parse().map_err(|_| bad("invalid height"))?;
    let maxval: u32 = tokens[3].parse().map_err(|_| bad("invalid maxval"))?;
    pos += 1;
    let n = width as usize * height as usize;
    let data = bytes.get(pos..).unwrap_or_default();
    let class_ids = match maxval {
        255 => {
            if data.len() != n {
                return Err(bad("raster length does not match header"));
            }
            data.iter().map(|&b| b as u16).collect()
        }
        65535 => {
            if data.len() != 2 * n {
                return Err(bad("raster length does not match header"));
            }
            data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        }
        _ => return Err(bad("maxval must be 255 or 65535")),
    };
    Ok(SegmentationMask {
        image_name: image_name.to_string(),
        width,
        height,
        class_ids,
    })
}

/// Loads every `<image name>.pgm` in a directory, keyed by image name.
pub fn read_masks_dir(dir: &Path, palette: &ClassPalette) -> Result<BTreeMap<String, SegmentationMask>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        let path = entry.path();
        let Some(file_name) = path.file_name().and_then(|s| s.to_str()) else { continue };
        let Some(image_name) = file_name.strip_suffix(".pgm") else { continue };
        let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
        let mask = read_mask_pgm(image_name, &bytes)?;
        mask.validate(palette)?;
        out.insert(image_name.to_string(), mask);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    class: String,
    score: f64,
    bbox: [f64; 4],
}

#[derive(Serialize, Deserialize)]
struct DetectionLine {
    image_name: String,
    detections: Vec<DetectionRecord>,
}

/// JSON Lines, one object per image.
pub fn read_detections(reader: impl BufRead) -> Result<Vec<DetectionSet>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| SemanticsError::Detection {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionLine = serde_json::from_str(&line).map_err(|e| SemanticsError::Detection {
            line: line_no,
            message: e.to_string(),
        })?;
        let mut detections = Vec::with_capacity(rec.detections.len());
        for d in rec.detections {
            let bbox = BoundingBox {
                xmin: d.bbox[0],
                ymin: d.bbox[1],
                xmax: d.bbox[2],
                ymax: d.bbox[3],
            };
            if !bbox.is_valid() {
                return Err(SemanticsError::Detection {
                    line: line_no,
                    message: format!("invalid bbox {:?}", d.bbox),
                });
            }
            if !(0.0..=1.0).contains(&d.score) {
                return Err(SemanticsError::Detection {
                    line: line_no,
                    message: format!("score {} outside [0, 1]", d.score),
                });
            }
            detections.push(Detection {
                class_name: d.class,
                score: d.score,
                bbox,
            });
        }
        out.push(DetectionSet {
            image_name: rec.image_name,
            detections,
        });
    }
    Ok(out)
}

pub fn write_detections(sets: &[DetectionSet], mut w: impl Write) -> std::io::Result<()> {
    for s in sets {
        let line = DetectionLine {
            image_name: s.image_name.clone(),
            detections: s
                .detections
                .iter()
                .map(|d| DetectionRecord {
                    class: d.class_name.clone(),
                    score: d.score,
                    bbox: [d.bbox.xmin, d.bbox.ymin, d.bbox.xmax, d.bbox.ymax],
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_both_depths() {
        let mut m = SegmentationMask::filled("a", 3, 2, 4);
        m.set(1, 1, 200);
        assert_eq!(read_mask_pgm("a", &write_mask_pgm(&m)).unwrap(), m);
        m.set(2, 0, 1000);
        let bytes = write_mask_pgm(&m);
        assert!(bytes.starts_with(b"P5\n3 2\n65535\n"));
        assert_eq!(read_mask_pgm("a", &bytes).unwrap(), m);
    }

    #[test]
    fn pgm_with_comment_and_bad_length() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([3, 4]);
        let m = read_mask_pgm("x", &bytes).unwrap();
        assert_eq!(m.class_ids, vec![3, 4]);
        bytes.pop();
        assert!(read_mask_pgm("x", &bytes).is_err());
        assert!(read_mask_pgm("x", b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn palette_text_round_trip() {
        let p = read_palette("1\tobject--traffic-sign--front\n# c\n\n2\tbuilding\n").unwrap();
        assert_eq!(p.id("building"), Some(2));
        assert_eq!(read_palette(&write_palette(&p)).unwrap(), p);
        assert!(read_palette("1 no-tab\n").is_err());
    }

    #[test]
    fn detections_jsonl() {
        let text = r#"{"image_name": "a.jpg", "detections": [{"class": "regulatory--stop--g1", "score": 0.8, "bbox": [1, 2, 3, 4]}]}
{"image_name": "b.jpg", "detections": []}
"#;
        let sets = read_detections(text.as_bytes()).unwrap();
        assert_eq!(sets.len(), 2);
        assert_eq!(sets[0].detections[0].bbox.ymax, 4.0);
        let mut buf = Vec::new();
        write_detections(&sets, &mut buf).unwrap();
        assert_eq!(read_detections(buf.as_slice()).unwrap(), sets);

        let bad = r#"{"image_name": "a", "detections": [{"class": "x", "score": 0.8, "bbox": [3, 2, 1, 4]}]}"#;
        assert!(matches!(read_detections(bad.as_bytes()), Err(SemanticsError::Detection { line: 1, .. })));
    }
}

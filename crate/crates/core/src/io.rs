//! On-disk formats.
//!
//! * Boxes: one per line, `class cx cy cz w l h yaw vx vy`.
//! * Detections: one per line, `class score cx cy cz w l h yaw vx vy`.
//! * Point clouds: `RFPC`, `u32` count, then `count × 4` little-endian `f32`.
//! * Views: `RFVW`, `u32` view count, `u32` channels/height/width, then
//!   little-endian `f64` payload.
//! * Checkpoints: `RFCK`, `u32` version, `u32` parameter count, then per
//!   parameter its `u32` name length, UTF-8 name, `u32` rank, `u32` extents
//!   and little-endian `f64` payload, in name order.
//!
//! Text numbers use the shortest representation that parses back to the
//! same value, so every format round-trips bit-exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Box3D;
use crate::head::Detection;
use crate::nn::ParamStore;
use crate::scene::PointCloud;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

fn box_fields(b: &Box3D) -> [f64; 9] {
    [
        b.center[0],
        b.center[1],
        b.center[2],
        b.size[0],
        b.size[1],
        b.size[2],
        b.yaw,
        b.velocity[0],
        b.velocity[1],
    ]
}

fn push_fields(out: &mut String, fields: &[f64]) {
    for v in fields {
        write!(out, " {v}").expect("writing to a String");
    }
    out.push('\n');
}

fn parse_fields(tokens: &[&str], line: usize) -> Result<Vec<f64>> {
    tokens
        .iter()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::Format(format!("line {line}: bad number `{t}`")))
        })
        .collect()
}

fn box_from(class_id: usize, f: &[f64]) -> Box3D {
    Box3D {
        center: [f[0], f[1], f[2]],
        size: [f[3], f[4], f[5]],
        yaw: f[6],
        class_id,
        velocity: [f[7], f[8]],
    }
}

fn parse_class(tok: &str, line: usize) -> Result<usize> {
    tok.parse()
        .map_err(|_| Error::Format(format!("line {line}: bad class `{tok}`")))
}

pub fn format_boxes(boxes: &[Box3D]) -> String {
    let mut out = String::new();
    for b in boxes {
        out.push_str(&b.class_id.to_string());
        push_fields(&mut out, &box_fields(b));
    }
    out
}

pub fn parse_boxes(text: &str) -> Result<Vec<Box3D>> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() != 10 {
            return Err(Error::Format(format!(
                "line {}: expected 10 fields, got {}",
                i + 1,
                tokens.len()
            )));
        }
        let class_id = parse_class(tokens[0], i + 1)?;
        boxes.push(box_from(class_id, &parse_fields(&tokens[1..], i + 1)?));
    }
    Ok(boxes)
}

pub fn format_detections(dets: &[Detection]) -> String {
    let mut out = String::new();
    for d in dets {
        write!(out, "{} {}", d.class_id, d.score).expect("writing to a String");
        push_fields(&mut out, &box_fields(&d.bbox));
    }
    out
}

pub fn parse_detections(text: &str) -> Result<Vec<Detection>> {
    let mut dets = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() != 11 {
            return Err(Error::Format(format!(
                "line {}: expected 11 fields, got {}",
                i + 1,
                tokens.len()
            )));
        }
        let class_id = parse_class(tokens[0], i + 1)?;
        let f = parse_fields(&tokens[1..], i + 1)?;
        dets.push(Detection {
            bbox: box_from(class_id, &f[1..]),
            class_id,
            score: f[0],
        });
    }
    Ok(dets)
}

/// Little-endian reader over a byte slice.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Reader { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!("{}: truncated at byte {}", self.what, self.pos))),
        }
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::Format(format!(
                "{}: bad magic, expected {}",
                self.what,
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} does not fit in u32")))
}

pub fn encode_point_cloud(cloud: &PointCloud) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 16 * cloud.len());
    out.extend_from_slice(b"RFPC");
    out.extend_from_slice(&len_u32(cloud.len(), "point count")?.to_le_bytes());
    for p in &cloud.points {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes a cloud; box tags are not stored and come back empty.
pub fn decode_point_cloud(bytes: &[u8]) -> Result<PointCloud> {
    let mut r = Reader::new(bytes, "point cloud");
    r.magic(b"RFPC")?;
    let n = r.u32()? as usize;
    let mut points = Vec::with_capacity(n.min(bytes.len() / 16));
    for _ in 0..n {
        points.push([r.f32()?, r.f32()?, r.f32()?, r.f32()?]);
    }
    r.finish()?;
    Ok(PointCloud::new(points))
}

pub fn encode_views(views: &[Tensor]) -> Result<Vec<u8>> {
    let shape: [usize; 3] = match views.first().map(|v| v.shape()) {
        Some(&[c, h, w]) => [c, h, w],
        Some(s) => return Err(Error::Format(format!("views must be rank 3, got {s:?}"))),
        None => [0, 0, 0],
    };
    if views.iter().any(|v| v.shape() != shape) {
        return Err(Error::Format("views must share one shape".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(b"RFVW");
    out.extend_from_slice(&len_u32(views.len(), "view count")?.to_le_bytes());
    for d in shape {
        out.extend_from_slice(&len_u32(d, "view extent")?.to_le_bytes());
    }
    for v in views {
        for x in v.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_views(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader::new(bytes, "views");
    r.magic(b"RFVW")?;
    let n = r.u32()? as usize;
    let shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let len: usize = shape.iter().product();
    let mut views = Vec::with_capacity(n);
    for _ in 0..n {
        let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        views.push(Tensor::new(&shape, data)?);
    }
    r.finish()?;
    Ok(views)
}

pub fn encode_checkpoint(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(b"RFCK");
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&len_u32(store.len(), "parameter count")?.to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&len_u32(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&len_u32(t.shape().len(), "rank")?.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&len_u32(d, "extent")?.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader::new(bytes, "checkpoint");
    r.magic(b"RFCK")?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("checkpoint: parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if store.contains(&name) {
            return Err(Error::Format(format!("checkpoint: duplicate parameter `{name}`")));
        }
        store.insert(name, Tensor::new(&shape, data)?);
    }
    r.finish()?;
    Ok(store)
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    write_bytes(path, &encode_checkpoint(store)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    decode_checkpoint(&read_bytes(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_box() -> Box3D {
        Box3D {
            center: [0.1, -2.0 / 3.0, 0.8],
            size: [1.9, 4.5, 1.6],
            yaw: -3.0,
            class_id: 1,
            velocity: [1e-300, -0.0],
        }
    }

    #[test]
    fn boxes_round_trip_bit_exact() {
        let boxes = vec![
            sample_box(),
            Box3D {
                class_id: 0,
                yaw: 0.3,
                ..sample_box()
            },
        ];
        let back = parse_boxes(&format_boxes(&boxes)).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in boxes.iter().zip(&back) {
            assert_eq!(box_fields(a).map(f64::to_bits), box_fields(b).map(f64::to_bits));
            assert_eq!(a.class_id, b.class_id);
        }
    }

    #[test]
    fn detections_round_trip() {
        let d = vec![Detection {
            bbox: sample_box(),
            class_id: 1,
            score: 0.123456789,
        }];
        assert_eq!(parse_detections(&format_detections(&d)).unwrap(), d);
        assert!(parse_detections("1 0.5 1 2").is_err());
    }

    #[test]
    fn point_cloud_round_trip() {
        let cloud = PointCloud::new(vec![[1.5, -2.25, 0.1, 0.7], [f32::MIN_POSITIVE, 0.0, -0.0, 1.0]]);
        let bytes = encode_point_cloud(&cloud).unwrap();
        assert_eq!(&bytes[..4], b"RFPC");
        assert_eq!(bytes.len(), 8 + 32);
        let back = decode_point_cloud(&bytes).unwrap();
        assert_eq!(back.points, cloud.points);
        assert!(decode_point_cloud(&bytes[..bytes.len() - 1]).is_err());
        assert_eq!(
            decode_point_cloud(&encode_point_cloud(&PointCloud::default()).unwrap())
                .unwrap()
                .len(),
            0
        );
    }

    #[test]
    fn views_round_trip() {
        let v: Vec<Tensor> = (0..6)
            .map(|k| Tensor::new(&[2, 1, 2], vec![k as f64, 0.5, -1.0 / 3.0, 1e-9]).unwrap())
            .collect();
        assert_eq!(decode_views(&encode_views(&v).unwrap()).unwrap(), v);
    }

    #[test]
    fn checkpoint_round_trip_and_rejects_bad_magic() {
        let mut store = ParamStore::new();
        store.insert("b", Tensor::new(&[2], vec![0.1, -0.2]).unwrap());
        store.insert("a.w", Tensor::new(&[1, 3], vec![1.0, 2.0, 1.0 / 7.0]).unwrap());
        let bytes = encode_checkpoint(&store).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
    }
}

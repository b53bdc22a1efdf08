//! Little-endian container formats for feature maps (`FMAP`), label maps
//! (`LMAP`) and edge maps (`EMAP`).
//!
//! ```text
//! FMAP: "FMAP" | version u32 = 1 | layer_count u32 |
//!       per layer: name_len u32 | name (UTF-8) | stride u32 | C u32 | H u32 | W u32 |
//!                  C*H*W f32, channel-major, row-major within a channel
//! LMAP: "LMAP" | version u32 = 1 | H u32 | W u32 | H*W u8
//! EMAP: "EMAP" | version u32 = 1 | H u32 | W u32 | H*W f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::FormatError;
use crate::maps::{EdgeMap, FeatureMap, LabelMap};

pub const FMAP_MAGIC: [u8; 4] = *b"FMAP";
pub const LMAP_MAGIC: [u8; 4] = *b"LMAP";
pub const EMAP_MAGIC: [u8; 4] = *b"EMAP";
pub const FORMAT_VERSION: u32 = 1;

// Guards against allocating absurd buffers from corrupt headers.
const MAX_NAME_LEN: u32 = 4096;

fn dim_u32(v: usize, what: &str) -> Result<u32, FormatError> {
    u32::try_from(v).map_err(|_| FormatError::DimMismatch(format!("{what} {v} does not fit in u32")))
}

fn read_header<R: Read>(r: &mut R, expected: [u8; 4]) -> Result<(), FormatError> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found).map_err(|e| FormatError::from_read(e, "magic"))?;
    if found != expected {
        return Err(FormatError::BadMagic { expected, found });
    }
    let version = r.read_u32::<LittleEndian>().map_err(|e| FormatError::from_read(e, "version"))?;
    if version != FORMAT_VERSION {
        return Err(FormatError::Version(version));
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32, FormatError> {
    r.read_u32::<LittleEndian>().map_err(|e| FormatError::from_read(e, what))
}

fn read_f32s<R: Read>(r: &mut R, count: usize, what: &str) -> Result<Vec<f32>, FormatError> {
    let mut bytes = Vec::new();
    let got = r.take((count * 4) as u64).read_to_end(&mut bytes)?;
    if got != count * 4 {
        return Err(FormatError::Truncated(format!("{what}: expected {} bytes, found {got}", count * 4)));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn write_f32s<W: Write>(w: &mut W, data: &[f32]) -> Result<(), FormatError> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_fmap_to<W: Write>(w: &mut W, maps: &[&FeatureMap]) -> Result<(), FormatError> {
    w.write_all(&FMAP_MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(dim_u32(maps.len(), "layer count")?)?;
    for m in maps {
        let name = m.layer_name().as_bytes();
        w.write_u32::<LittleEndian>(dim_u32(name.len(), "name length")?)?;
        w.write_all(name)?;
        w.write_u32::<LittleEndian>(m.stride())?;
        w.write_u32::<LittleEndian>(dim_u32(m.channels(), "channels")?)?;
        w.write_u32::<LittleEndian>(dim_u32(m.height(), "height")?)?;
        w.write_u32::<LittleEndian>(dim_u32(m.width(), "width")?)?;
        write_f32s(w, m.data())?;
    }
    Ok(())
}

pub fn read_fmap_from<R: Read>(r: &mut R) -> Result<Vec<FeatureMap>, FormatError> {
    read_header(r, FMAP_MAGIC)?;
    let count = read_u32(r, "layer count")?;
    let mut out = Vec::new();
    for layer in 0..count {
        let name_len = read_u32(r, "name length")?;
        if name_len == 0 || name_len > MAX_NAME_LEN {
            return Err(FormatError::LayerName(format!("layer {layer}: name length {name_len}")));
        }
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name).map_err(|e| FormatError::from_read(e, "layer name"))?;
        let name = String::from_utf8(name).map_err(|_| FormatError::LayerName(format!("layer {layer}: name is not UTF-8")))?;
        let stride = read_u32(r, "stride")?;
        let c = read_u32(r, "channels")? as usize;
        let h = read_u32(r, "height")? as usize;
        let w = read_u32(r, "width")? as usize;
        let count = c
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| FormatError::DimMismatch(format!("layer {name}: {c}x{h}x{w} overflows")))?;
        let data = read_f32s(r, count, &format!("layer {name} payload"))?;
        out.push(FeatureMap::new(name, stride, c, h, w, data)?);
    }
    Ok(out)
}

pub fn write_lmap_to<W: Write>(w: &mut W, map: &LabelMap) -> Result<(), FormatError> {
    w.write_all(&LMAP_MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(dim_u32(map.height(), "height")?)?;
    w.write_u32::<LittleEndian>(dim_u32(map.width(), "width")?)?;
    w.write_all(map.data())?;
    Ok(())
}

pub fn read_lmap_from<R: Read>(r: &mut R) -> Result<LabelMap, FormatError> {
    read_header(r, LMAP_MAGIC)?;
    let h = read_u32(r, "height")? as usize;
    let w = read_u32(r, "width")? as usize;
    let mut data = Vec::new();
    let got = r.take((h * w) as u64).read_to_end(&mut data)?;
    if got != h * w {
        return Err(FormatError::Truncated(format!("label payload: expected {} bytes, found {got}", h * w)));
    }
    LabelMap::new(h, w, data)
}

pub fn write_emap_to<W: Write>(w: &mut W, map: &EdgeMap) -> Result<(), FormatError> {
    w.write_all(&EMAP_MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(dim_u32(map.height(), "height")?)?;
    w.write_u32::<LittleEndian>(dim_u32(map.width(), "width")?)?;
    write_f32s(w, map.data())
}

pub fn read_emap_from<R: Read>(r: &mut R) -> Result<EdgeMap, FormatError> {
    read_header(r, EMAP_MAGIC)?;
    let h = read_u32(r, "height")? as usize;
    let w = read_u32(r, "width")? as usize;
    let data = read_f32s(r, h * w, "edge payload")?;
    EdgeMap::new(h, w, data)
}

pub fn write_fmap(path: impl AsRef<Path>, maps: &[&FeatureMap]) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_fmap_to(&mut w, maps)?;
    w.flush()?;
    Ok(())
}

pub fn read_fmap(path: impl AsRef<Path>) -> Result<Vec<FeatureMap>, FormatError> {
    read_fmap_from(&mut BufReader::new(File::open(path)?))
}

pub fn write_lmap(path: impl AsRef<Path>, map: &LabelMap) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_lmap_to(&mut w, map)?;
    w.flush()?;
    Ok(())
}

pub fn read_lmap(path: impl AsRef<Path>) -> Result<LabelMap, FormatError> {
    read_lmap_from(&mut BufReader::new(File::open(path)?))
}

pub fn write_emap(path: impl AsRef<Path>, map: &EdgeMap) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_emap_to(&mut w, map)?;
    w.flush()?;
    Ok(())
}

pub fn read_emap(path: impl AsRef<Path>) -> Result<EdgeMap, FormatError> {
    read_emap_from(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fmap_bytes(maps: &[&FeatureMap]) -> Vec<u8> {
        let mut buf = Vec::new();
        write_fmap_to(&mut buf, maps).unwrap();
        buf
    }

    #[test]
    fn minimal_tensor_round_trip_and_layout() {
        let m = FeatureMap::new("c", 1, 1, 1, 1, vec![-3.25]).unwrap();
        let bytes = fmap_bytes(&[&m]);
        let mut expected = Vec::new();
        expected.extend_from_slice(b"FMAP");
        for v in [1u32, 1, 1] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        expected.push(b'c');
        for v in [1u32, 1, 1, 1] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        expected.extend_from_slice(&(-3.25f32).to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(read_fmap_from(&mut bytes.as_slice()).unwrap(), vec![m]);
    }

    #[test]
    fn distinct_errors() {
        let m = FeatureMap::new("conv3", 4, 2, 2, 2, vec![0.5; 8]).unwrap();
        let mut bytes = fmap_bytes(&[&m]);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_fmap_from(&mut bad.as_slice()), Err(FormatError::BadMagic { .. })));

        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(read_fmap_from(&mut &short[..]), Err(FormatError::Truncated(_))));

        // stride field sits after magic, version, count, name_len and the 5-byte name
        let stride_at = 4 + 4 + 4 + 4 + 5;
        bytes[stride_at..stride_at + 4].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(read_fmap_from(&mut bytes.as_slice()), Err(FormatError::Stride(3))));

        let mut v2 = fmap_bytes(&[&m]);
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(read_fmap_from(&mut v2.as_slice()), Err(FormatError::Version(2))));
    }

    #[test]
    fn label_map_rejects_out_of_range() {
        let mut buf = Vec::new();
        write_lmap_to(&mut buf, &LabelMap::new(1, 2, vec![0, 20]).unwrap()).unwrap();
        *buf.last_mut().unwrap() = 21;
        assert!(matches!(read_lmap_from(&mut buf.as_slice()), Err(FormatError::LabelRange { index: 1, value: 21 })));
    }

    #[test]
    fn edge_map_boundary() {
        let mut buf = Vec::new();
        write_emap_to(&mut buf, &EdgeMap::new(1, 1, vec![1.0]).unwrap()).unwrap();
        assert_eq!(read_emap_from(&mut buf.as_slice()).unwrap().data(), &[1.0]);
        let n = buf.len();
        buf[n - 4..].copy_from_slice(&1.0001f32.to_le_bytes());
        assert!(matches!(read_emap_from(&mut buf.as_slice()), Err(FormatError::EdgeRange { index: 0, .. })));
        assert!(matches!(read_lmap_from(&mut buf.as_slice()), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = FeatureMap::new("conv4a", 4, 1, 2, 1, vec![1.0, 2.0]).unwrap();
        let b = FeatureMap::new("conv5a", 8, 2, 1, 1, vec![3.0, 4.0]).unwrap();
        let p = dir.path().join("x.fmap");
        write_fmap(&p, &[&a, &b]).unwrap();
        assert_eq!(read_fmap(&p).unwrap(), vec![a, b]);
    }

    fn arb_fmap() -> impl Strategy<Value = FeatureMap> {
        (1usize..4, 1usize..5, 1usize..5, prop::sample::select(vec![1u32, 2, 4, 8, 16]), "[a-z0-9]{1,8}").prop_flat_map(
            |(c, h, w, s, name)| {
                prop::collection::vec(-1e6f32..1e6, c * h * w)
                    .prop_map(move |data| FeatureMap::new(name.clone(), s, c, h, w, data).unwrap())
            },
        )
    }

    proptest! {
        #[test]
        fn fmap_round_trip(maps in prop::collection::vec(arb_fmap(), 0..4)) {
            let refs: Vec<&FeatureMap> = maps.iter().collect();
            let bytes = fmap_bytes(&refs);
            let back = read_fmap_from(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(back.len(), maps.len());
            for (a, b) in back.iter().zip(&maps) {
                prop_assert_eq!(a.layer_name(), b.layer_name());
                let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }

        #[test]
        fn lmap_emap_round_trip(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let n = h * w;
            let labels: Vec<u8> = (0..n).map(|i| ((seed >> (i % 60)) as u8 ^ i as u8) % 21).collect();
            let edges: Vec<f32> = (0..n).map(|i| ((seed.rotate_left(i as u32) % 1001) as f32) / 1000.0).collect();
            let lm = LabelMap::new(h, w, labels).unwrap();
            let em = EdgeMap::new(h, w, edges).unwrap();
            let mut buf = Vec::new();
            write_lmap_to(&mut buf, &lm).unwrap();
            prop_assert_eq!(read_lmap_from(&mut buf.as_slice()).unwrap(), lm);
            let mut buf = Vec::new();
            write_emap_to(&mut buf, &em).unwrap();
            prop_assert_eq!(read_emap_from(&mut buf.as_slice()).unwrap(), em);
        }
    }
}

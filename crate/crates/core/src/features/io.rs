// Little-endian "IDFS" v1 layout:
//   magic[4] version:u32 n_images:u32 N:u32 C:u32
//   per image: label:u8 type_len:u16 type[type_len] mask[ceil(N/8)] features[N*C f32]
// Mask bits are packed LSB-first.

use std::path::Path;

use super::{FeatureError, FeatureSet, Label, Result};

const MAGIC: &[u8; 4] = b"IDFS";
const VERSION: u32 = 1;

pub fn encode_feature_set(set: &FeatureSet) -> Vec<u8> {
    let (n, c) = (set.n_patches(), set.channels());
    let mut out = Vec::with_capacity(20 + set.len() * (3 + n.div_ceil(8) + 4 * n * c));
    out.extend_from_slice(MAGIC);
    for v in [VERSION, set.len() as u32, n as u32, c as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for i in 0..set.len() {
        out.push(set.label(i).as_u8());
        let tag = set.anomaly_type(i).as_bytes();
        out.extend_from_slice(&(tag.len() as u16).to_le_bytes());
        out.extend_from_slice(tag);
        out.extend_from_slice(&pack_bits(set.mask(i)));
        for v in set.image(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_feature_file(path: impl AsRef<Path>, set: &FeatureSet) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_feature_set(set)).map_err(|source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_feature_set(&bytes)
}

pub fn decode_feature_set(bytes: &[u8]) -> Result<FeatureSet> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(FeatureError::Format {
            offset: 0,
            reason: format!("bad magic {magic:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(FeatureError::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let n_images = r.u32("image count")? as usize;
    let n = r.u32("patch count")? as usize;
    let c = r.u32("channel count")? as usize;
    let mut set = FeatureSet::new(n, c).map_err(|e| FeatureError::Format {
        offset: 12,
        reason: e.to_string(),
    })?;
    let mut feats = vec![0f32; n * c];
    for image in 0..n_images {
        let at = r.pos;
        let label = Label::from_u8(r.take(1, "label")?[0]).ok_or(FeatureError::Format {
            offset: at,
            reason: format!("image {image}: label byte is not 0/1"),
        })?;
        let tag_len = r.u16("anomaly type length")? as usize;
        let tag_at = r.pos;
        let tag = std::str::from_utf8(r.take(tag_len, "anomaly type")?).map_err(|_| {
            FeatureError::Format {
                offset: tag_at,
                reason: format!("image {image}: anomaly type is not UTF-8"),
            }
        })?;
        let tag = tag.to_string();
        let mask = unpack_bits(r.take(n.div_ceil(8), "mask")?, n);
        let raw = r.take(4 * n * c, "features")?;
        for (dst, chunk) in feats.iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
        }
        set.push_image(label, &tag, mask, &feats)?;
    }
    if r.pos != bytes.len() {
        return Err(FeatureError::Format {
            offset: r.pos,
            reason: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(set)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos + len;
        if end > self.bytes.len() {
            return Err(FeatureError::Format {
                offset: self.pos,
                reason: format!(
                    "truncated {what}: need {len} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }
}

pub(crate) fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
        out[i / 8] |= 1 << (i % 8);
    }
    out
}

pub(crate) fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_set() -> FeatureSet {
        let mut s = FeatureSet::new(4, 3).unwrap();
        let f0: Vec<f32> = (0..12).map(|v| v as f32 * 0.5).collect();
        let f1: Vec<f32> = (0..12).map(|v| -(v as f32) / 3.0).collect();
        s.push_image(Label::Normal, "", vec![false; 4], &f0).unwrap();
        s.push_image(Label::Abnormal, "scratch", vec![false, true, true, false], &f1)
            .unwrap();
        s
    }

    #[test]
    fn round_trip_small() {
        let s = small_set();
        let bytes = encode_feature_set(&s);
        let back = decode_feature_set(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode_feature_set(&back), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_feature_set(&small_set());
        assert_eq!(&bytes[..4], b"IDFS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 3);
        // first image: label, empty tag, one mask byte, 48 feature bytes
        assert_eq!(bytes[20], 0);
        assert_eq!(&bytes[21..23], &[0, 0]);
        // second image mask bits 1 and 2 set, LSB first
        let second = 20 + 1 + 2 + 1 + 48;
        assert_eq!(bytes[second], 1);
        let tag_len = u16::from_le_bytes(bytes[second + 1..second + 3].try_into().unwrap());
        assert_eq!(tag_len, 7);
        assert_eq!(bytes[second + 3 + 7], 0b0110);
    }

    #[test]
    fn truncated_payload_names_offset() {
        let bytes = encode_feature_set(&small_set());
        let cut = &bytes[..bytes.len() - 5];
        match decode_feature_set(cut) {
            Err(FeatureError::Format { offset, reason }) => {
                let second_features = 20 + 52 + 1 + 2 + 7 + 1;
                assert_eq!(offset, second_features);
                assert!(reason.contains("features"), "{reason}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_feature_set(&small_set());
        bytes[0] = b'X';
        assert!(matches!(
            decode_feature_set(&bytes),
            Err(FeatureError::Format { offset: 0, .. })
        ));
        let mut bytes = encode_feature_set(&small_set());
        bytes[4] = 2;
        assert!(matches!(
            decode_feature_set(&bytes),
            Err(FeatureError::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn normal_image_with_mask_bit_is_rejected() {
        let mut bytes = encode_feature_set(&small_set());
        bytes[23] = 1; // first image mask byte
        assert!(matches!(
            decode_feature_set(&bytes),
            Err(FeatureError::Invariant { image: 0, .. })
        ));
    }

    fn arb_set() -> impl Strategy<Value = FeatureSet> {
        (1usize..4, 1usize..5, 0usize..5).prop_flat_map(|(g, c, n_img)| {
            let n = g * g;
            let image = (
                any::<bool>(),
                "[a-z]{0,6}",
                proptest::collection::vec(any::<bool>(), n),
                proptest::collection::vec(any::<f32>(), n * c),
            );
            proptest::collection::vec(image, n_img).prop_map(move |imgs| {
                let mut s = FeatureSet::new(n, c).unwrap();
                for (abn, tag, mut mask, feats) in imgs {
                    if abn {
                        mask[0] = true;
                        s.push_image(Label::Abnormal, &tag, mask, &feats).unwrap();
                    } else {
                        s.push_image(Label::Normal, "", vec![false; n], &feats).unwrap();
                    }
                }
                s
            })
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_byte_exact(s in arb_set()) {
            let bytes = encode_feature_set(&s);
            let back = decode_feature_set(&bytes).unwrap();
            prop_assert_eq!(encode_feature_set(&back), bytes);
        }
    }
}

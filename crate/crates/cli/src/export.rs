//! Deviation dump: `IDDV`, version, row count and channel count as
//! little-endian u32, then per row the image id, patch index and three
//! `C`-wide f32 blocks (residual, denoised, projected).

pub const MAGIC: &[u8; 4] = b"IDDV";
pub const VERSION: u32 = 1;

pub struct Row {
    pub image: u32,
    pub patch: u32,
    pub residual: Vec<f32>,
    pub denoised: Vec<f32>,
    pub projected: Vec<f32>,
}

pub fn encode(channels: usize, rows: &[Row]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + rows.len() * (8 + 12 * channels));
    out.extend_from_slice(MAGIC);
    for v in [VERSION, rows.len() as u32, channels as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for r in rows {
        out.extend_from_slice(&r.image.to_le_bytes());
        out.extend_from_slice(&r.patch.to_le_bytes());
        for block in [&r.residual, &r.denoised, &r.projected] {
            debug_assert_eq!(block.len(), channels);
            for v in block.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

/// Packs `b`-bit values LSB-first: bit `t` of value `i` lands in stream bit
/// `i·b + t`, stream bit `j` being bit `j % 8` of byte `j / 8`.
pub fn pack(values: &[u32], bits: u8) -> Vec<u8> {
    let b = bits as usize;
    let mut out = vec![0u8; (values.len() * b).div_ceil(8)];
    let mut pos = 0;
    for &v in values {
        debug_assert!(b == 32 || v >> b == 0);
        for t in 0..b {
            if v >> t & 1 == 1 {
                out[pos / 8] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

/// Inverse of [`pack`] for `count` values.
pub fn unpack(bytes: &[u8], bits: u8, count: usize) -> Vec<u32> {
    let b = bits as usize;
    debug_assert!(bytes.len() * 8 >= count * b);
    let mut out = Vec::with_capacity(count);
    let mut pos = 0;
    for _ in 0..count {
        let mut v = 0u32;
        for t in 0..b {
            v |= u32::from(bytes[pos / 8] >> (pos % 8) & 1) << t;
            pos += 1;
        }
        out.push(v);
    }
    out
}

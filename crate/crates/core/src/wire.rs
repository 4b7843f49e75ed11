//! Little-endian helpers shared by the state and archive encoders.

use crate::error::{Error, Result};

fn take<'a>(src: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if src.len() < n {
        return Err(Error::Input(format!(
            "truncated buffer: need {n} bytes, {} left",
            src.len()
        )));
    }
    let (head, rest) = src.split_at(n);
    *src = rest;
    Ok(head)
}

pub(crate) fn take_u32(src: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(src, 4)?.try_into().unwrap()))
}

pub(crate) fn take_u64(src: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(src, 8)?.try_into().unwrap()))
}

pub(crate) fn take_f32s(src: &mut &[u8], dst: &mut [f32]) -> Result<()> {
    let bytes = take(src, dst.len() * 4)?;
    for (d, b) in dst.iter_mut().zip(bytes.chunks_exact(4)) {
        *d = f32::from_le_bytes(b.try_into().unwrap());
    }
    Ok(())
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

//! `FGCKPT1` checkpoint files.
//!
//! Layout (little-endian): 7-byte magic `FGCKPT1`, `u32` entry count, then per
//! entry a `u16` name length, the UTF-8 name, a `u8` rank, `rank` `u32` dims
//! and the raw `f32` data.

use std::path::Path;

use super::Tensor;
use crate::error::FormatError;

const MAGIC: &[u8; 7] = b"FGCKPT1";

/// Ordered list of named `f32` tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated { what });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            let name_len = u16::try_from(name.len())
                .map_err(|_| FormatError::Invalid(format!("parameter name too long: {name}")))?;
            let ndim = u8::try_from(t.ndim())
                .map_err(|_| FormatError::Invalid(format!("too many dims for {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(ndim);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len(), "magic").ok() != Some(&MAGIC[..]) {
            return Err(FormatError::BadMagic { expected: "FGCKPT1" });
        }
        let count = r.u32("entry count")?;
        let mut entries = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| FormatError::Utf8 { what: "parameter name" })?
                .to_string();
            let ndim = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("dims")? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or(FormatError::Truncated { what: "data" })?, "data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push((name, Tensor::new(shape, data).expect("checkpoint shape")));
        }
        if r.pos != buf.len() {
            return Err(FormatError::Invalid("trailing bytes after checkpoint".into()));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FormatError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_little_endian() {
        let ck = Checkpoint {
            entries: vec![("w".into(), Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap())],
        };
        let bytes = ck.to_bytes().unwrap();
        let mut want = b"FGCKPT1".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u16.to_le_bytes());
        want.push(b'w');
        want.push(1);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(
            Checkpoint::from_bytes(b"NOTCKPT\0\0\0\0"),
            Err(FormatError::BadMagic { .. })
        ));
        let ck = Checkpoint {
            entries: vec![("a.b".into(), Tensor::zeros(vec![3, 2]))],
        };
        let bytes = ck.to_bytes().unwrap();
        for cut in [3, 9, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            bits in proptest::collection::vec(any::<u32>(), 0..40),
            name in "[a-z.]{1,20}",
        ) {
            let data: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
            let n = data.len();
            let ck = Checkpoint { entries: vec![(name.clone(), Tensor::new(vec![n], data).unwrap())] };
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(&back.entries[0].0, &name);
            prop_assert!(back.entries[0].1.bit_eq(&ck.entries[0].1));
        }
    }
}

//! Binary tensor container: magic `QPW1`, a UTF-8 `key=value` descriptor and
//! named little-endian f64 tensors.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::net::tensor::Tensor;

const MAGIC: &[u8; 4] = b"QPW1";
const MAX_RANK: u32 = 8;

fn malformed(reason: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub descriptor: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.descriptor.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.descriptor.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| malformed(format!("descriptor lacks `{key}`")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| malformed(format!("descriptor `{key}` = `{raw}` is not valid")))
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| malformed(format!("tensor `{name}` missing")))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        let mut text = String::new();
        for (k, v) in &self.descriptor {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(malformed(format!("descriptor entry `{k}` cannot be encoded")));
            }
            text.push_str(&format!("{k}={v}\n"));
        }
        write_u32(&mut w, text.len())?;
        w.write_all(text.as_bytes())?;
        write_u32(&mut w, self.tensors.len())?;
        for (name, t) in &self.tensors {
            write_u32(&mut w, name.len())?;
            w.write_all(name.as_bytes())?;
            write_u32(&mut w, t.shape().len())?;
            for &d in t.shape() {
                write_u32(&mut w, d)?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(malformed("bad magic"));
        }
        let text = read_string(&mut r)?;
        let mut descriptor = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| malformed(format!("descriptor line `{line}`")))?;
            descriptor.insert(k.to_string(), v.to_string());
        }
        let count = read_u32(&mut r)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = read_string(&mut r)?;
            let rank = read_u32(&mut r)?;
            if rank > MAX_RANK {
                return Err(malformed(format!("tensor `{name}` has rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                dims.push(read_u32(&mut r)? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= 1 << 31)
                .ok_or_else(|| malformed(format!("tensor `{name}` too large")))?;
            let mut raw = vec![0u8; n * 8];
            read_exact(&mut r, &mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::from_vec(&dims, data)?));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(malformed("trailing bytes"));
        }
        Ok(Self { descriptor, tensors })
    }
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| malformed("length exceeds u32"))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => malformed("truncated"),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > 1 << 24 {
        return Err(malformed("string too long"));
    }
    let mut buf = vec![0u8; n];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| malformed("string is not UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_corruption() {
        let mut ck = Checkpoint::new();
        ck.set("arch", "qpnet");
        ck.set("channels", 8);
        ck.push("a", Tensor::from_vec(&[2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-300, f64::MAX]).unwrap());
        ck.push("b", Tensor::scalar(7.0));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.parse::<usize>("channels").unwrap(), 8);
        assert!(back.parse::<usize>("arch").is_err());

        assert!(Checkpoint::read_from(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(bad.as_slice()).is_err());
        let mut longer = buf;
        longer.push(0);
        assert!(Checkpoint::read_from(longer.as_slice()).is_err());
    }
}

//! Binary parameter checkpoints.
//!
//! Little-endian layout: magic `DARL`, format version `u32`, group count `u32`,
//! then per group: name length `u32`, UTF-8 name bytes, rank `u32`, extents
//! `u32 × rank`, and the `f64` payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{DarlError, Result};

pub const MAGIC: &[u8; 4] = b"DARL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    groups: Vec<Group>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: &[f64]) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(DarlError::dim(
                "checkpoint",
                format!("group {name}: shape {shape:?} vs {} values", data.len()),
            ));
        }
        if self.groups.iter().any(|g| g.name == name) {
            return Err(DarlError::Format(format!("duplicate group {name}")));
        }
        self.groups.push(Group {
            name,
            shape: shape.to_vec(),
            data: data.to_vec(),
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Group> {
        self.groups
            .iter()
            .find(|g| g.name == name)
            .ok_or_else(|| DarlError::Format(format!("missing group {name}")))
    }

    /// Data of group `name`, checked against the expected length.
    pub fn data(&self, name: &str, len: usize) -> Result<&[f64]> {
        let g = self.get(name)?;
        if g.data.len() != len {
            return Err(DarlError::Format(format!("group {name}: {} values, expected {len}", g.data.len())));
        }
        Ok(&g.data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.groups.len() as u32).to_le_bytes());
        for g in &self.groups {
            out.extend_from_slice(&(g.name.len() as u32).to_le_bytes());
            out.extend_from_slice(g.name.as_bytes());
            out.extend_from_slice(&(g.shape.len() as u32).to_le_bytes());
            for &d in &g.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in &g.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(DarlError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(DarlError::Format(format!("unsupported version {version}")));
        }
        let n = read_u32(&mut r)? as usize;
        let mut ck = Checkpoint::new();
        for _ in 0..n {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > r.len() {
                return Err(DarlError::Format("truncated group name".into()));
            }
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| DarlError::Format("group name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            if numel.checked_mul(8).is_none_or(|b| b > r.len()) {
                return Err(DarlError::Format(format!("truncated payload in group {name}")));
            }
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            ck.push(name, &shape, &data)?;
        }
        if !r.is_empty() {
            return Err(DarlError::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| DarlError::Format("unexpected end of checkpoint".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut ck = Checkpoint::new();
        ck.push("w", &[2], &[1.0, -0.5]).unwrap();
        let b = ck.to_bytes();
        assert_eq!(&b[0..4], b"DARL");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), FORMAT_VERSION);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 1);
        assert_eq!(&b[16..17], b"w");
        assert_eq!(b.len(), 12 + 4 + 1 + 4 + 4 + 16);
    }

    #[test]
    fn rejects_corruption() {
        let mut ck = Checkpoint::new();
        ck.push("w", &[3], &[1.0, 2.0, 3.0]).unwrap();
        let b = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = b;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            groups in prop::collection::vec(
                ("[a-z.]{1,12}", prop::collection::vec(1usize..4, 1..4), any::<u64>()),
                0..6,
            )
        ) {
            let mut ck = Checkpoint::new();
            for (i, (name, shape, bits)) in groups.iter().enumerate() {
                let numel: usize = shape.iter().product();
                let data: Vec<f64> = (0..numel)
                    .map(|j| f64::from_bits(bits.wrapping_mul(j as u64 + 1).rotate_left(i as u32)))
                    .collect();
                ck.push(format!("{name}{i}"), shape, &data).unwrap();
            }
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(back.groups().len(), ck.groups().len());
            for (a, b) in back.groups().iter().zip(ck.groups()) {
                prop_assert_eq!(&a.name, &b.name);
                prop_assert_eq!(&a.shape, &b.shape);
                let ab: Vec<u64> = a.data.iter().map(|x| x.to_bits()).collect();
                let bb: Vec<u64> = b.data.iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(ab, bb);
            }
        }
    }
}

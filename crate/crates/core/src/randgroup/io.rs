//! Binary plan files.
//!
//! Little-endian header, no payload:
//!
//! | field        | type |
//! |--------------|------|
//! | magic        | `b"RGPL"` |
//! | version      | u16 (= 1) |
//! | seed         | u64 |
//! | n_heads      | u16 |
//! | height       | u32 |
//! | width        | u32 |
//! | group_size   | u32 |
//! | mode tag     | u8, then mode parameters |
//! | origin h, w  | u32, u32 |
//!
//! Mode tags: 0 per-head fixed, 1 shared fixed, 2 per-sample random
//! (+ u8 shared-heads flag), 3 region constrained (+ u32 rows, u32 cols,
//! f64 overlap), 4 window baseline (+ u32 h, u32 w). Values are regenerated
//! from the header on load.

use super::mode::GroupingMode;
use super::plan::GroupPlan;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RGPL";
pub const VERSION: u16 = 1;

pub fn serialize_plan(plan: &GroupPlan) -> Vec<u8> {
    let mut out = Vec::with_capacity(48);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&plan.seed().to_le_bytes());
    out.extend_from_slice(&(plan.n_heads() as u16).to_le_bytes());
    for v in [plan.height(), plan.width(), plan.group_size()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    match plan.mode() {
        GroupingMode::PerHeadFixed => out.push(0),
        GroupingMode::SharedFixed => out.push(1),
        GroupingMode::PerSampleRandom { shared_heads } => {
            out.push(2);
            out.push(shared_heads as u8);
        }
        GroupingMode::RegionConstrained {
            region_rows,
            region_cols,
            overlap,
        } => {
            out.push(3);
            out.extend_from_slice(&(region_rows as u32).to_le_bytes());
            out.extend_from_slice(&(region_cols as u32).to_le_bytes());
            out.extend_from_slice(&overlap.to_le_bytes());
        }
        GroupingMode::WindowBaseline { window_h, window_w } => {
            out.push(4);
            out.extend_from_slice(&(window_h as u32).to_le_bytes());
            out.extend_from_slice(&(window_w as u32).to_le_bytes());
        }
    }
    let (oh, ow) = plan.origin();
    out.extend_from_slice(&(oh as u32).to_le_bytes());
    out.extend_from_slice(&(ow as u32).to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self, field: &str) -> Result<[u8; N]> {
        let end = self.pos + N;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| {
            Error::PlanFormat(format!(
                "truncated at byte {} while reading {field} ({} bytes available)",
                self.pos,
                self.bytes.len()
            ))
        })?;
        self.pos = end;
        Ok(chunk.try_into().unwrap())
    }
    fn u8(&mut self, f: &str) -> Result<u8> {
        Ok(self.take::<1>(f)?[0])
    }
    fn u16(&mut self, f: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(f)?))
    }
    fn u32(&mut self, f: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(f)?) as usize)
    }
    fn u64(&mut self, f: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(f)?))
    }
    fn f64(&mut self, f: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(f)?))
    }
}

pub fn deserialize_plan(bytes: &[u8]) -> Result<GroupPlan> {
    let mut r = Reader { bytes, pos: 0 };
    if &r.take::<4>("magic")? != MAGIC {
        return Err(Error::PlanFormat("bad magic, expected RGPL".into()));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::PlanFormat(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let seed = r.u64("seed")?;
    let n_heads = r.u16("n_heads")? as usize;
    let height = r.u32("height")?;
    let width = r.u32("width")?;
    let group_size = r.u32("group_size")?;
    let mode = match r.u8("mode tag")? {
        0 => GroupingMode::PerHeadFixed,
        1 => GroupingMode::SharedFixed,
        2 => GroupingMode::PerSampleRandom {
            shared_heads: match r.u8("shared flag")? {
                0 => false,
                1 => true,
                b => return Err(Error::PlanFormat(format!("bad shared flag {b}"))),
            },
        },
        3 => GroupingMode::RegionConstrained {
            region_rows: r.u32("region rows")?,
            region_cols: r.u32("region cols")?,
            overlap: r.f64("overlap")?,
        },
        4 => GroupingMode::WindowBaseline {
            window_h: r.u32("window h")?,
            window_w: r.u32("window w")?,
        },
        t => return Err(Error::PlanFormat(format!("unknown mode tag {t}"))),
    };
    let origin = (r.u32("origin height")?, r.u32("origin width")?);
    if r.pos != bytes.len() {
        return Err(Error::PlanFormat(format!(
            "{} trailing bytes after header",
            bytes.len() - r.pos
        )));
    }
    let plan = if origin == (height, width) {
        GroupPlan::generate(seed, n_heads, height, width, group_size, mode)?
    } else {
        GroupPlan::generate(seed, n_heads, origin.0, origin.1, group_size, mode)?
            .interpolate(height, width, group_size)?
    };
    plan.validate()?;
    Ok(plan)
}

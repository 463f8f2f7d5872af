//! Instance dataset files.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "FRTDATA\0"
//! version    u32      = 1
//! count      u64      number of instances
//! per instance:
//!   flags    u8       bit0 open, bit1 backhaul, bit2 duration limit, bit3 time windows,
//!                     bit4 linehaul-first
//!   n        u64
//!   depot    2 x f64
//!   coords   2n x f64 (x0, y0, x1, y1, ...)
//!   demands  n x f64
//!   capacity f64
//!   L        f64               if bit2
//!   tw_start (n+1) x f64       if bit3
//!   tw_end   (n+1) x f64       if bit3
//!   service  n x f64           if bit3
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::instance::{Instance, TimeWindows};
use super::variant::VariantSpec;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: [u8; 8] = *b"FRTDATA\0";
pub const DATASET_VERSION: u32 = 1;

const LINEHAUL_FIRST_BIT: u8 = 0x10;

pub fn write_dataset<W: Write>(mut w: W, instances: &[Instance]) -> std::io::Result<()> {
    w.write_all(&DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(instances.len() as u64).to_le_bytes())?;
    let put = |w: &mut W, xs: &[f64]| -> std::io::Result<()> {
        for x in xs {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    };
    for inst in instances {
        let mut flags = inst.spec.bits();
        if inst.linehaul_first {
            flags |= LINEHAUL_FIRST_BIT;
        }
        w.write_all(&[flags])?;
        w.write_all(&(inst.n() as u64).to_le_bytes())?;
        put(&mut w, &inst.depot)?;
        let flat: Vec<f64> = inst.coords.iter().flat_map(|p| [p[0], p[1]]).collect();
        put(&mut w, &flat)?;
        put(&mut w, &inst.demands)?;
        put(&mut w, &[inst.capacity])?;
        if let Some(l) = inst.duration_limit {
            put(&mut w, &[l])?;
        }
        if let Some(tw) = &inst.time_windows {
            put(&mut w, &tw.start)?;
            put(&mut w, &tw.end)?;
            put(&mut w, &tw.service)?;
        }
    }
    w.flush()
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, k: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < k {
            return Err(format!("unexpected end of data at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + k];
        self.pos += k;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, k: usize) -> std::result::Result<Vec<f64>, String> {
        let bytes = self.take(k.checked_mul(8).ok_or("length overflow")?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_dataset(buf: &[u8]) -> std::result::Result<Vec<Instance>, String> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != DATASET_MAGIC {
        return Err("bad magic".into());
    }
    let version = c.u32()?;
    if version != DATASET_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = c.u64()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let flags = c.u8()?;
        let spec = VariantSpec::from_bits(flags & 0x0F).ok_or("bad flags")?;
        if flags & !(0x0F | LINEHAUL_FIRST_BIT) != 0 {
            return Err(format!("unknown flag bits {flags:#x}"));
        }
        let n = c.u64()? as usize;
        let depot = c.f64s(2)?;
        let coords = c.f64s(2 * n)?.chunks_exact(2).map(|p| [p[0], p[1]]).collect();
        let demands = c.f64s(n)?;
        let capacity = c.f64s(1)?[0];
        let duration_limit = if spec.duration_limit {
            Some(c.f64s(1)?[0])
        } else {
            None
        };
        let time_windows = if spec.time_windows {
            Some(TimeWindows {
                start: c.f64s(n + 1)?,
                end: c.f64s(n + 1)?,
                service: c.f64s(n)?,
            })
        } else {
            None
        };
        let inst = Instance {
            spec,
            depot: [depot[0], depot[1]],
            coords,
            demands,
            capacity,
            duration_limit,
            time_windows,
            linehaul_first: flags & LINEHAUL_FIRST_BIT != 0,
        };
        inst.validate().map_err(|e| e.to_string())?;
        out.push(inst);
    }
    if c.pos != buf.len() {
        return Err(format!("{} trailing bytes", buf.len() - c.pos));
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, instances: &[Instance]) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    write_dataset(f, instances)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<Instance>> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    decode_dataset(&buf).map_err(|reason| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    })
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

/// Human-readable export: one `key: value` block per instance, separated by blank lines.
pub fn to_text(instances: &[Instance]) -> String {
    let mut s = String::new();
    for (i, inst) in instances.iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        s.push_str(&format!("index: {i}\n"));
        s.push_str(&format!("variant: {}\n", inst.spec));
        s.push_str(&format!("n: {}\n", inst.n()));
        s.push_str(&format!("depot: {}\n", join(&inst.depot)));
        let flat: Vec<f64> = inst.coords.iter().flat_map(|p| [p[0], p[1]]).collect();
        s.push_str(&format!("coords: {}\n", join(&flat)));
        s.push_str(&format!("demands: {}\n", join(&inst.demands)));
        s.push_str(&format!("capacity: {:?}\n", inst.capacity));
        if let Some(l) = inst.duration_limit {
            s.push_str(&format!("duration_limit: {l:?}\n"));
        }
        if let Some(tw) = &inst.time_windows {
            s.push_str(&format!("tw_start: {}\n", join(&tw.start)));
            s.push_str(&format!("tw_end: {}\n", join(&tw.end)));
            s.push_str(&format!("service: {}\n", join(&tw.service)));
        }
        if inst.linehaul_first {
            s.push_str("linehaul_first: true\n");
        }
    }
    s
}

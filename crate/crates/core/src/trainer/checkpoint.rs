//! Binary checkpoint: magic, version, named little-endian `f64` tensors,
//! named `u64` scalars, then the RNG position.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::{ModuleMask, Params, TrainState, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"JLWSODCK";
const VERSION: u32 = 1;

fn put_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(mut w: W, state: &TrainState) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;

    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (name, t) in PARAM_NAMES.iter().zip(state.params.tensors()) {
        tensors.push((name.to_string(), t));
    }
    for (name, t) in PARAM_NAMES.iter().zip(&state.velocity) {
        tensors.push((format!("velocity/{}", name), t));
    }
    tensors.push(("centers".into(), &state.centers));
    tensors.push(("corr_sem".into(), &state.corr_sem));
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        put_str(&mut w, &name)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }

    let m = state.mask;
    let scalars = [
        ("step", state.step),
        ("epoch", state.epoch as u64),
        ("mask.m1", m.m1 as u64),
        ("mask.m2", m.m2 as u64),
        ("mask.m3", m.m3 as u64),
        ("mask.m4", m.m4 as u64),
    ];
    w.write_all(&(scalars.len() as u32).to_le_bytes())?;
    for (name, v) in scalars {
        put_str(&mut w, name)?;
        w.write_all(&v.to_le_bytes())?;
    }

    w.write_all(&state.rng.get_seed())?;
    w.write_all(&state.rng.get_stream().to_le_bytes())?;
    w.write_all(&state.rng.get_word_pos().to_le_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, state: &TrainState) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), state)
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| Error::Checkpoint(format!("truncated file: {}", e)))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        if n > 4096 {
            return Err(Error::Checkpoint(format!("implausible name length {}", n)));
        }
        let mut b = vec![0u8; n];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| Error::Checkpoint(format!("truncated file: {}", e)))?;
        String::from_utf8(b).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<TrainState> {
    let mut r = Reader { inner: r };
    if &r.bytes::<8>()? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", version)));
    }

    let mut tensors = BTreeMap::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        if rank > 2 {
            return Err(Error::Checkpoint(format!("{}: rank {}", name, rank)));
        }
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        if len > 1 << 28 {
            return Err(Error::Checkpoint(format!("{}: implausible size {}", name, len)));
        }
        let data = (0..len)
            .map(|_| r.bytes::<8>().map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    let mut scalars = BTreeMap::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        scalars.insert(name, r.u64()?);
    }
    let seed: [u8; 32] = r.bytes()?;
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.bytes()?);
    let mut rest = Vec::new();
    r.inner.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }

    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", name)))
    };
    let scalar = |name: &str| {
        scalars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing scalar {}", name)))
    };

    let w_cls = take("w_cls")?;
    let (d, k) = (w_cls.rows(), w_cls.cols());
    let mut params = Params {
        head: crate::instance_branch::DetectionHead::zeros(d, k),
        w_sem: Tensor::zeros(&[0]),
        igcl: crate::igcl::IgclProjectors {
            f_ins: empty_gcn(),
            f_ins_label: empty_gcn(),
            f_sem: empty_gcn(),
            f_sem_score: empty_gcn(),
        },
    };
    params.head.w_cls = w_cls;
    for (i, slot) in params.tensors_mut().into_iter().enumerate().skip(1) {
        *slot = take(PARAM_NAMES[i])?;
    }
    let velocity = PARAM_NAMES
        .iter()
        .map(|n| take(&format!("velocity/{}", n)))
        .collect::<Result<Vec<_>>>()?;
    let centers = take("centers")?;
    let corr_sem = take("corr_sem")?;
    check_shapes(&params, &velocity, &centers)?;
    if corr_sem.shape() != centers.shape() {
        return Err(Error::Checkpoint(format!("corr_sem has shape {:?}", corr_sem.shape())));
    }

    let mask = ModuleMask {
        m1: scalar("mask.m1")? != 0,
        m2: scalar("mask.m2")? != 0,
        m3: scalar("mask.m3")? != 0,
        m4: scalar("mask.m4")? != 0,
    };
    mask.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(TrainState {
        params,
        velocity,
        centers,
        corr_sem,
        step: scalar("step")?,
        epoch: scalar("epoch")? as usize,
        mask,
        rng,
    })
}

fn empty_gcn() -> crate::igcl::GcnProjector {
    crate::igcl::GcnProjector {
        w1: Tensor::zeros(&[0]),
        w2: Tensor::zeros(&[0]),
    }
}

fn check_shapes(p: &Params, velocity: &[Tensor], centers: &Tensor) -> Result<()> {
    let (d, k) = (p.feature_dim(), p.num_classes());
    let h = p.igcl.f_ins.w1.cols();
    let e = p.igcl.f_ins.w2.cols();
    let want: [(usize, usize); 12] = [
        (d, k),
        (d, k),
        (d, 1),
        (k, d),
        (d, h),
        (h, e),
        (k + 1, h),
        (h, e),
        (k, h),
        (h, e),
        (k, h),
        (h, e),
    ];
    for (i, t) in p.tensors().iter().enumerate() {
        if t.shape() != [want[i].0, want[i].1] || velocity[i].shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{} has shape {:?} (velocity {:?}), expected {:?}",
                PARAM_NAMES[i],
                t.shape(),
                velocity[i].shape(),
                want[i]
            )));
        }
    }
    if centers.shape() != [k, k] {
        return Err(Error::Checkpoint(format!("centers have shape {:?}", centers.shape())));
    }
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

//! Model files: the random seed plus one bit per weight, BN state, and a
//! trailing checksum. Frozen weights are regenerated from the seed.
//!
//! Layout, all integers and reals little-endian:
//!
//! ```text
//! magic        4  b"HFNM"
//! version      u16
//! rng_id       u16   generator and draw conventions
//! checksum_id  u16   1 = FNV-1a 64
//! flags        u16   bit 0: training appendix present
//! seed         u64
//! arch         stem u8, block u8, stage_blocks 4×u16, n_folded u8,
//!              folded u8×n_folded, width_mult f64, base_channels u32,
//!              num_classes u32, k_permille u16, method u8, init u8,
//!              ubn u8, in_channels u16
//! n_layers     u32
//! per layer    k_permille u16, n u32, mask ceil(n/8) bytes (bit i of the
//!              flat OIHW order in byte i/8, least significant bit first)
//! n_norms      u32
//! per norm     channels u32, affine u8, [gamma f32×C, beta f32×C if affine],
//!              running_mean f32×C, running_var f32×C
//! appendix     epoch u32, then scores f32×n per layer (only if flagged)
//! checksum     u64 over every preceding byte
//! ```

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{count_params, ArchConfig, BlockKind, Method, Model, NetPlan, Stem};
use crate::rng::{InitKind, ALGORITHM_ID};
use crate::supermask::Supermask;
use crate::tensor::{fnv1a64, Tensor};

pub const MAGIC: [u8; 4] = *b"HFNM";
pub const VERSION: u16 = 1;
pub const CHECKSUM_FNV1A64: u16 = 1;
const FLAG_APPENDIX: u16 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated: need {} bytes at offset {}, {} left",
                n,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

fn stem_code(s: Stem) -> u8 {
    match s {
        Stem::Cifar => 0,
        Stem::Imagenet => 1,
    }
}

fn block_code(b: BlockKind) -> u8 {
    match b {
        BlockKind::Bottleneck => 0,
        BlockKind::Basic => 1,
    }
}

fn write_arch(w: &mut Writer, a: &ArchConfig) -> Result<()> {
    w.u8(stem_code(a.stem));
    w.u8(block_code(a.block));
    for &b in &a.stage_blocks {
        w.u16(u16::try_from(b).map_err(|_| Error::Config(format!("{} blocks do not fit the format", b)))?);
    }
    w.u8(a.folded_stages.len() as u8);
    for &s in &a.folded_stages {
        w.u8(s as u8);
    }
    w.u64(a.width_mult.to_bits());
    w.u32(a.base_channels as u32);
    w.u32(a.num_classes as u32);
    w.u16(a.k_permille);
    w.u8(a.method.code());
    w.u8(a.init.code());
    w.u8(a.ubn as u8);
    w.u16(a.in_channels as u16);
    Ok(())
}

fn read_arch(r: &mut Reader) -> Result<ArchConfig> {
    let stem = match r.u8()? {
        0 => Stem::Cifar,
        1 => Stem::Imagenet,
        c => return Err(Error::Format(format!("unknown stem code {}", c))),
    };
    let block = match r.u8()? {
        0 => BlockKind::Bottleneck,
        1 => BlockKind::Basic,
        c => return Err(Error::Format(format!("unknown block code {}", c))),
    };
    let mut stage_blocks = [0usize; 4];
    for b in &mut stage_blocks {
        *b = r.u16()? as usize;
    }
    let nf = r.u8()? as usize;
    let folded_stages = (0..nf).map(|_| r.u8().map(usize::from)).collect::<Result<Vec<_>>>()?;
    let width_mult = r.f64()?;
    let base_channels = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let k_permille = r.u16()?;
    let mc = r.u8()?;
    let method = Method::from_code(mc).ok_or_else(|| Error::Format(format!("unknown method code {}", mc)))?;
    let ic = r.u8()?;
    let init = InitKind::from_code(ic).ok_or_else(|| Error::Format(format!("unknown init code {}", ic)))?;
    let ubn = r.u8()? != 0;
    let in_channels = r.u16()? as usize;
    let arch = ArchConfig {
        stem,
        block,
        stage_blocks,
        folded_stages,
        width_mult,
        base_channels,
        num_classes,
        k_permille,
        method,
        init,
        ubn,
        in_channels,
    };
    arch.validate()?;
    Ok(arch)
}

/// Serializes a supermask-trained model. With `training_epoch` set, the
/// scores are appended so training can resume from the file.
pub fn compress(model: &Model<f32>, training_epoch: Option<u32>) -> Result<Vec<u8>> {
    let arch = model.config();
    if !arch.method.uses_supermask() {
        return Err(Error::Unsupported(format!(
            "{} models learn their weights, which cannot be regenerated from the seed",
            arch.method
        )));
    }
    let layers = model.masked_layers();
    if let Some(l) = layers.iter().find(|l| l.is_stale()) {
        return Err(Error::InvalidArgument(format!(
            "mask of layer {} is stale; run a forward pass or refresh_masks first",
            l.name
        )));
    }
    let mut w = Writer(Vec::with_capacity(file_size(arch, training_epoch.is_some())? as usize));
    w.0.extend_from_slice(&MAGIC);
    w.u16(VERSION);
    w.u16(ALGORITHM_ID);
    w.u16(CHECKSUM_FNV1A64);
    w.u16(if training_epoch.is_some() { FLAG_APPENDIX } else { 0 });
    w.u64(model.seed());
    write_arch(&mut w, arch)?;
    w.u32(layers.len() as u32);
    for l in &layers {
        w.u16(l.k_permille);
        w.u32(l.len() as u32);
        w.0.extend_from_slice(&l.mask().pack());
    }
    let norms = model.batch_norms();
    w.u32(norms.len() as u32);
    for b in &norms {
        let s = &b.state;
        w.u32(s.channels() as u32);
        w.u8(s.affine as u8);
        if s.affine {
            w.f32s(&s.gamma);
            w.f32s(&s.beta);
        }
        w.f32s(&s.running_mean);
        w.f32s(&s.running_var);
    }
    if let Some(epoch) = training_epoch {
        w.u32(epoch);
        for l in &layers {
            w.f32s(l.scores().data());
        }
    }
    let sum = fnv1a64(&w.0);
    w.u64(sum);
    Ok(w.0)
}

fn verify_checksum(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 4 + 8 || bytes[..4] != MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let computed = fnv1a64(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(body)
}

/// Fixed-size leading fields of a model file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Header {
    pub version: u16,
    pub rng_algorithm: u16,
    pub checksum_algorithm: u16,
    pub flags: u16,
    pub seed: u64,
    pub arch: ArchConfig,
    pub layers: u32,
    pub file_bytes: usize,
    pub checksum: u64,
}

impl Header {
    pub fn has_appendix(&self) -> bool {
        self.flags & FLAG_APPENDIX != 0
    }
}

impl fmt::Display for Header {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = &self.arch;
        writeln!(f, "magic              HFNM")?;
        writeln!(f, "version            {}", self.version)?;
        writeln!(f, "rng_algorithm      {}", self.rng_algorithm)?;
        writeln!(f, "checksum_algorithm {} (fnv1a64)", self.checksum_algorithm)?;
        writeln!(f, "flags              {:#06x}", self.flags)?;
        writeln!(f, "seed               {}", self.seed)?;
        writeln!(f, "arch               {}", a.label())?;
        writeln!(f, "stem               {:?}", a.stem)?;
        writeln!(f, "stage_blocks       {:?}", a.stage_blocks)?;
        writeln!(f, "folded_stages      {:?}", a.folded_stages)?;
        writeln!(f, "width_mult         {}", a.width_mult)?;
        writeln!(f, "base_channels      {}", a.base_channels)?;
        writeln!(f, "num_classes        {}", a.num_classes)?;
        writeln!(f, "k_permille         {}", a.k_permille)?;
        writeln!(f, "method             {}", a.method)?;
        writeln!(f, "init               {:?}", a.init)?;
        writeln!(f, "ubn                {}", a.ubn)?;
        writeln!(f, "in_channels        {}", a.in_channels)?;
        writeln!(f, "layers             {}", self.layers)?;
        writeln!(f, "file_bytes         {}", self.file_bytes)?;
        write!(f, "checksum           {:#018x}", self.checksum)
    }
}

fn read_header_fields(r: &mut Reader) -> Result<(u16, u16, u16, u16, u64, ArchConfig)> {
    r.take(4)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported format version {}", version)));
    }
    let rng = r.u16()?;
    if rng != ALGORITHM_ID {
        return Err(Error::Unsupported(format!("random generator id {}", rng)));
    }
    let ck = r.u16()?;
    if ck != CHECKSUM_FNV1A64 {
        return Err(Error::Unsupported(format!("checksum algorithm id {}", ck)));
    }
    let flags = r.u16()?;
    let seed = r.u64()?;
    let arch = read_arch(r)?;
    Ok((version, rng, ck, flags, seed, arch))
}

/// Verifies the checksum and decodes the header.
pub fn read_header(bytes: &[u8]) -> Result<Header> {
    let body = verify_checksum(bytes)?;
    let mut r = Reader { buf: body, pos: 0 };
    let (version, rng_algorithm, checksum_algorithm, flags, seed, arch) = read_header_fields(&mut r)?;
    let layers = r.u32()?;
    Ok(Header {
        version,
        rng_algorithm,
        checksum_algorithm,
        flags,
        seed,
        arch,
        layers,
        file_bytes: bytes.len(),
        checksum: u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes")),
    })
}

/// Decoded model plus the training epoch when the file carries scores.
pub struct Decompressed {
    pub model: Model<f32>,
    pub training_epoch: Option<u32>,
}

/// Rebuilds an eval-ready model: weights from the seed, masks and BN state
/// from the file.
pub fn decompress(bytes: &[u8]) -> Result<Decompressed> {
    let body = verify_checksum(bytes)?;
    let mut r = Reader { buf: body, pos: 0 };
    let (_, _, _, flags, seed, arch) = read_header_fields(&mut r)?;
    let plan = NetPlan::new(&arch)?;
    let specs = plan.layers();
    let mut model = Model::<f32>::build(&arch, seed)?;

    let n_layers = r.u32()? as usize;
    if n_layers != specs.len() {
        return Err(Error::Format(format!(
            "{} layers stored, architecture has {}",
            n_layers,
            specs.len()
        )));
    }
    let mut masks = Vec::with_capacity(n_layers);
    for spec in &specs {
        let k = r.u16()?;
        let n = r.u32()? as usize;
        if n != spec.len() || k != arch.effective_k_permille() {
            return Err(Error::Format(format!(
                "layer {}: stored n={} k={}, architecture needs n={} k={}",
                spec.name,
                n,
                k,
                spec.len(),
                arch.effective_k_permille()
            )));
        }
        masks.push(Supermask::unpack(&spec.shape, r.take(n.div_ceil(8))?)?);
    }

    let n_norms = r.u32()? as usize;
    let norm_specs = plan.norms(&arch);
    if n_norms != norm_specs.len() {
        return Err(Error::Format(format!(
            "{} norms stored, architecture has {}",
            n_norms,
            norm_specs.len()
        )));
    }
    for (bn, ns) in model.batch_norms_mut().into_iter().zip(&norm_specs) {
        let c = r.u32()? as usize;
        let affine = r.u8()? != 0;
        if c != ns.channels || affine != ns.affine {
            return Err(Error::Format(format!(
                "norm layout mismatch: stored ({}, {}), expected ({}, {})",
                c, affine, ns.channels, ns.affine
            )));
        }
        if affine {
            bn.state.gamma = r.f32s(c)?;
            bn.state.beta = r.f32s(c)?;
        }
        bn.state.running_mean = r.f32s(c)?;
        bn.state.running_var = r.f32s(c)?;
    }

    let training_epoch = if flags & FLAG_APPENDIX != 0 {
        let epoch = r.u32()?;
        for (l, spec) in model.masked_layers_mut().into_iter().zip(&specs) {
            l.set_scores(Tensor::from_vec(&spec.shape, r.f32s(spec.len())?)?)?;
        }
        Some(epoch)
    } else {
        None
    };
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
    }
    for (l, m) in model.masked_layers_mut().into_iter().zip(masks) {
        l.set_mask(m)?;
    }
    Ok(Decompressed {
        model,
        training_epoch,
    })
}

/// Exact length of the file [`compress`] writes for `arch`.
pub fn file_size(arch: &ArchConfig, with_appendix: bool) -> Result<u64> {
    let plan = NetPlan::new(arch)?;
    let header = 4 + 2 * 4 + 8;
    let arch_bytes = 2 + 4 * 2 + 1 + arch.folded_stages.len() as u64 + 8 + 4 + 4 + 2 + 3 + 2;
    let layers = plan.layers();
    let masks: u64 = layers.iter().map(|l| 6 + l.len().div_ceil(8) as u64).sum();
    let norms: u64 = plan
        .norms(arch)
        .iter()
        .map(|n| 5 + 4 * n.channels as u64 * if n.affine { 4 } else { 2 })
        .sum();
    let appendix = if with_appendix {
        4 + 4 * layers.iter().map(|l| l.len() as u64).sum::<u64>()
    } else {
        0
    };
    Ok(header + arch_bytes + 4 + masks + 4 + norms + appendix + 8)
}

/// Storage accounting of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SizeReport {
    pub label: String,
    pub method: Method,
    pub dense_params: u64,
    pub reported_params: u64,
    /// 32-bit storage of every weight of the configuration.
    pub dense_bytes: u64,
    /// 32-bit storage of the same architecture unfolded and weight-learned.
    pub unfolded_dense_bytes: u64,
    pub mask_bytes: u64,
    pub ubn_bytes: u64,
    pub running_stat_bytes: u64,
    /// Masks plus UBN learnables for supermask methods, 32-bit weights
    /// otherwise.
    pub compressed_bytes: u64,
    /// Length of the model file (supermask methods only).
    pub file_bytes: Option<u64>,
    /// `unfolded_dense_bytes / compressed_bytes`.
    pub reduction_vs_dense: f64,
}

pub fn size_report(arch: &ArchConfig) -> Result<SizeReport> {
    let pc = count_params(arch)?;
    let mut unfolded = arch.clone().with_folded(&[]);
    unfolded.method = Method::Vanilla;
    let unfolded_dense = count_params(&unfolded)?.dense;
    let mask_bytes = pc.mask_bits.div_ceil(8);
    let ubn_bytes = 4 * pc.ubn;
    let supermask = arch.method.uses_supermask();
    let compressed = if supermask {
        mask_bytes + ubn_bytes
    } else {
        4 * pc.dense
    };
    Ok(SizeReport {
        label: arch.label(),
        method: arch.method,
        dense_params: pc.dense,
        reported_params: pc.reported(),
        dense_bytes: 4 * pc.dense,
        unfolded_dense_bytes: 4 * unfolded_dense,
        mask_bytes,
        ubn_bytes,
        running_stat_bytes: 4 * pc.running_stats,
        compressed_bytes: compressed,
        file_bytes: if supermask { Some(file_size(arch, false)?) } else { None },
        reduction_vs_dense: (4 * unfolded_dense) as f64 / compressed as f64,
    })
}

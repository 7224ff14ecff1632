//! Transfer-set container.
//!
//! ```text
//! magic         8 bytes  "ZSKDTSET"
//! version       u32      1
//! header        kind u8, prior u8, teacher hash, betas, tau, lr,
//!               iterations, batch size, N u64, seed u64, K, H, W, C,
//!               confidence range (2 x f64)
//! header crc    u32 over magic..header
//! records       repeated until end of file, each:
//!               class u32, beta f64, seed u64, iterations u32,
//!               initial loss f64, final loss f64, K x f64 target,
//!               H*W*C x f64 image, crc u32 over the record
//! ```
//!
//! Records have a fixed size, so a file can be appended to batch by batch and
//! an interrupted write leaves at most one partial record at the end.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use super::{DataImpression, ImpressionKind, Job, Provenance, TransferSet};
use crate::codec::{check_magic, Reader, Writer};
use crate::data::write_atomically;
use crate::error::{Error, FormatError, Result};
use crate::prior::PriorKind;
use crate::tensor::Tensor;

pub const TRANSFER_MAGIC: &[u8; 8] = b"ZSKDTSET";
pub const TRANSFER_VERSION: u32 = 1;

fn kind_tag(kind: ImpressionKind) -> u8 {
    match kind {
        ImpressionKind::Data => 0,
        ImpressionKind::Class => 1,
        ImpressionKind::Augmented => 2,
    }
}

fn prior_tag(prior: PriorKind) -> u8 {
    match prior {
        PriorKind::ClassSimilarity => 0,
        PriorKind::Uniform => 1,
    }
}

fn encode_header(p: &Provenance) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(TRANSFER_MAGIC);
    w.u32(TRANSFER_VERSION);
    w.u8(kind_tag(p.kind));
    w.u8(prior_tag(p.prior));
    w.str(&p.teacher_hash);
    w.usize(p.betas.len());
    w.f64s(&p.betas);
    w.f64(p.tau);
    w.f64(p.lr);
    w.usize(p.iterations);
    w.usize(p.batch_size);
    w.u64(p.n as u64);
    w.u64(p.seed);
    w.usize(p.num_classes);
    for d in p.image_shape {
        w.usize(d);
    }
    w.f64(p.confidence.0);
    w.f64(p.confidence.1);
    w.crc_since(0);
    w.into_bytes()
}

fn encode_record(w: &mut Writer, imp: &DataImpression) {
    let start = w.len();
    w.usize(imp.class_index);
    w.f64(imp.beta);
    w.u64(imp.seed);
    w.usize(imp.iterations);
    w.f64(imp.initial_loss);
    w.f64(imp.final_loss);
    w.f64s(&imp.target);
    w.f64s(imp.image.data());
    w.crc_since(start);
}

fn encode_records(records: &[DataImpression]) -> Vec<u8> {
    let mut w = Writer::new();
    for r in records {
        encode_record(&mut w, r);
    }
    w.into_bytes()
}

pub(crate) fn encode(set: &TransferSet) -> Vec<u8> {
    let mut out = encode_header(&set.provenance);
    out.extend(encode_records(&set.impressions));
    out
}

fn decode_header(r: &mut Reader<'_>) -> Result<Provenance, FormatError> {
    r.take(TRANSFER_MAGIC.len(), "magic")?;
    let version = r.u32("version")?;
    if version != TRANSFER_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported: TRANSFER_VERSION,
        });
    }
    let kind = match r.u8("kind")? {
        0 => ImpressionKind::Data,
        1 => ImpressionKind::Class,
        2 => ImpressionKind::Augmented,
        t => return Err(FormatError::Malformed(format!("unknown impression kind {t}"))),
    };
    let prior = match r.u8("prior")? {
        0 => PriorKind::ClassSimilarity,
        1 => PriorKind::Uniform,
        t => return Err(FormatError::Malformed(format!("unknown prior kind {t}"))),
    };
    let teacher_hash = r.str("teacher hash")?;
    let nb = r.usize("beta count")?;
    let betas = r.f64s(nb, "betas")?;
    let p = Provenance {
        kind,
        teacher_hash,
        prior,
        betas,
        tau: r.f64("tau")?,
        lr: r.f64("lr")?,
        iterations: r.usize("iterations")?,
        batch_size: r.usize("batch size")?,
        n: r.u64("N")? as usize,
        seed: r.u64("seed")?,
        num_classes: r.usize("class count")?,
        image_shape: [r.usize("H")?, r.usize("W")?, r.usize("C")?],
        confidence: (r.f64("confidence low")?, r.f64("confidence high")?),
    };
    r.expect_crc_since(0)?;
    if p.num_classes == 0 || p.image_shape.contains(&0) {
        return Err(FormatError::Malformed("zero class count or image dimension".into()));
    }
    Ok(p)
}

fn record_len(p: &Provenance) -> usize {
    4 + 8 + 8 + 4 + 8 + 8 + 8 * (p.num_classes + p.image_shape.iter().product::<usize>()) + 4
}

fn decode_record(r: &mut Reader<'_>, p: &Provenance) -> Result<DataImpression, FormatError> {
    let start = r.position();
    let class_index = r.usize("record class")?;
    let beta = r.f64("record beta")?;
    let seed = r.u64("record seed")?;
    let iterations = r.usize("record iterations")?;
    let initial_loss = r.f64("record initial loss")?;
    let final_loss = r.f64("record final loss")?;
    let target = r.f64s(p.num_classes, "record target")?;
    let image = r.f64s(p.image_shape.iter().product(), "record image")?;
    r.expect_crc_since(start)?;
    if class_index >= p.num_classes {
        return Err(FormatError::Malformed(format!("record class {class_index} out of range")));
    }
    Ok(DataImpression {
        image: Tensor::new(p.image_shape.to_vec(), image).expect("length read from shape"),
        target,
        class_index,
        beta,
        initial_loss,
        final_loss,
        iterations,
        seed,
    })
}

/// Decodes a container. In lenient mode, decoding stops quietly at the first
/// partial or corrupt record; otherwise both are errors.
fn decode(bytes: &[u8], lenient: bool) -> Result<TransferSet> {
    check_magic(bytes, TRANSFER_MAGIC)?;
    let mut r = Reader::new(bytes);
    let provenance = decode_header(&mut r)?;
    let size = record_len(&provenance);
    let mut impressions = Vec::with_capacity(r.remaining() / size);
    while r.remaining() > 0 {
        if r.remaining() < size {
            if lenient {
                break;
            }
            return Err(FormatError::Truncated(format!(
                "partial record: {} of {size} bytes",
                r.remaining()
            ))
            .into());
        }
        match decode_record(&mut r, &provenance) {
            Ok(imp) => impressions.push(imp),
            Err(_) if lenient => break,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(TransferSet {
        provenance,
        impressions,
    })
}

pub(crate) fn decode_strict(bytes: &[u8]) -> Result<TransferSet> {
    decode(bytes, false)
}

pub fn save_transfer_set(set: &TransferSet, path: impl AsRef<Path>) -> Result<()> {
    write_atomically(path.as_ref(), &encode(set))
}

pub fn load_transfer_set(path: impl AsRef<Path>) -> Result<TransferSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_strict(&bytes)
}

fn append(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    f.sync_data().map_err(|e| Error::io(path, e))
}

/// Runs `jobs` in order, persisting each job's output to `store` as it
/// finishes and skipping jobs already present there.
pub(crate) fn run_jobs(
    provenance: Provenance,
    jobs: &[Job],
    store: Option<&Path>,
    mut run: impl FnMut(&Job) -> Result<Vec<DataImpression>>,
) -> Result<TransferSet> {
    let mut done: Vec<DataImpression> = Vec::new();
    if let Some(path) = store {
        if path.exists() {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let existing = decode(&bytes, true)?;
            if let Some(why) = provenance.mismatch(&existing.provenance) {
                return Err(Error::Provenance(format!("{}: {why}", path.display())));
            }
            done = existing.impressions;
        }
        let mut boundary = 0;
        for job in jobs {
            if boundary + job.count > done.len() {
                break;
            }
            boundary += job.count;
        }
        done.truncate(boundary);
        if boundary > 0 {
            log::info!("{}: resuming after {boundary} impressions", path.display());
        }
        let mut bytes = encode_header(&provenance);
        bytes.extend(encode_records(&done));
        write_atomically(path, &bytes)?;
    }
    let skip = {
        let mut covered = 0;
        jobs.iter().take_while(|j| {
            covered += j.count;
            covered <= done.len()
        })
        .count()
    };
    let total = jobs.len();
    for (i, job) in jobs.iter().enumerate().skip(skip) {
        let out = run(job)?;
        if let Some(path) = store {
            append(path, &encode_records(&out))?;
        }
        log::debug!(
            "{} job {}/{total}: class {} beta {} x{}",
            provenance.kind.as_str(),
            i + 1,
            job.class_index,
            job.beta,
            job.count
        );
        done.extend(out);
    }
    Ok(TransferSet {
        provenance,
        impressions: done,
    })
}

//! FAV1: a flat little-endian container for [`Dataset`].
//!
//! ```text
//! header  "FAV1" | version u32 = 1 | num_videos u32 | visual_dim u32 | audio_dim u32 | num_classes u32
//! record  id_len u16 | id (UTF-8) | num_labels u32 | labels u32 × num_labels | M u32
//!         | visual f32 × M·visual_dim | audio f32 × M·audio_dim
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, WriteBytesExt};

use super::{Dataset, VideoRecord};
use crate::binio::{u32_of, write_f32s, Reader};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FAV1";
const VERSION: u32 = 1;
const WHAT: &str = "FAV1 dataset";

pub const FAV1_HEADER_LEN: usize = 24;

pub fn write_dataset_to<W: Write>(mut w: W, d: &Dataset) -> Result<()> {
    d.validate()?;
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    for n in [d.records.len(), d.visual_dim, d.audio_dim, d.num_classes] {
        w.write_u32::<LE>(u32_of(WHAT, n)?)?;
    }
    for r in &d.records {
        w.write_u16::<LE>(r.id.len() as u16)?;
        w.write_all(r.id.as_bytes())?;
        w.write_u32::<LE>(u32_of(WHAT, r.labels.len())?)?;
        for &l in &r.labels {
            w.write_u32::<LE>(l)?;
        }
        w.write_u32::<LE>(u32_of(WHAT, r.frames(d.visual_dim))?)?;
        write_f32s(&mut w, &r.visual)?;
        write_f32s(&mut w, &r.audio)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_dataset_to(BufWriter::new(File::create(path)?), d)
}

pub fn read_dataset_from<R: Read>(r: R) -> Result<Dataset> {
    let mut r = Reader::new(r, WHAT);
    r.expect_header(MAGIC, VERSION)?;
    let n = r.u32()? as usize;
    let visual_dim = r.u32()? as usize;
    let audio_dim = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    if visual_dim == 0 || audio_dim == 0 {
        return Err(Error::Format(format!("{WHAT}: feature dimensions must be ≥ 1")));
    }
    let mut d = Dataset::new(visual_dim, audio_dim, num_classes);
    d.records.reserve(n.min(1 << 16));
    for i in 0..n {
        let id_len = r.u16()? as usize;
        let id = r.string(id_len)?;
        let nl = r.u32()? as usize;
        let mut labels = Vec::with_capacity(nl.min(num_classes));
        for _ in 0..nl {
            let l = r.u32()?;
            if l as usize >= num_classes {
                return Err(Error::Format(format!("{WHAT}: record {i} has label {l} ≥ num_classes {num_classes}")));
            }
            labels.push(l);
        }
        let m = r.u32()? as usize;
        if m == 0 {
            return Err(Error::Format(format!("{WHAT}: record {i} has no frames")));
        }
        let visual = r.f32s(m.saturating_mul(visual_dim))?;
        let audio = r.f32s(m.saturating_mul(audio_dim))?;
        let rec = VideoRecord { id, labels, visual, audio };
        d.validate_record(i, &rec)?;
        d.records.push(rec);
    }
    r.expect_end()?;
    Ok(d)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset_from(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use proptest::prelude::*;

    fn bytes(d: &Dataset) -> Vec<u8> {
        let mut buf = Vec::new();
        write_dataset_to(&mut buf, d).unwrap();
        buf
    }

    fn bitwise_eq(a: &Dataset, b: &Dataset) -> bool {
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        (a.visual_dim, a.audio_dim, a.num_classes, a.records.len()) == (b.visual_dim, b.audio_dim, b.num_classes, b.records.len())
            && a.records.iter().zip(&b.records).all(|(x, y)| {
                x.id == y.id && x.labels == y.labels && bits(&x.visual) == bits(&y.visual) && bits(&x.audio) == bits(&y.audio)
            })
    }

    #[test]
    fn empty_dataset_is_a_bare_header() {
        let d = Dataset::new(3, 2, 5);
        let b = bytes(&d);
        assert_eq!(b.len(), FAV1_HEADER_LEN);
        assert_eq!(&b[..4], b"FAV1");
        assert_eq!(read_dataset_from(&b[..]).unwrap(), d);
    }

    #[test]
    fn single_record_length() {
        let mut d = Dataset::new(3, 2, 5);
        d.records.push(VideoRecord {
            id: "abc".into(),
            labels: vec![1, 4],
            visual: vec![0.5; 3],
            audio: vec![-1.0; 2],
        });
        let want = FAV1_HEADER_LEN + 2 + 3 + 4 + 4 * 2 + 4 + 4 * (3 + 2);
        assert_eq!(bytes(&d).len(), want);
    }

    #[test]
    fn rejects_corruption() {
        let d = gen_synthetic(&SyntheticSpec::small(3, 4, 1)).unwrap();
        let good = bytes(&d);
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(read_dataset_from(&bad[..]), Err(Error::BadMagic { .. })));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(read_dataset_from(&bad[..]), Err(Error::BadVersion { found: 2, .. })));
        for cut in [10, FAV1_HEADER_LEN + 1, good.len() - 1] {
            assert!(matches!(read_dataset_from(&good[..cut]), Err(Error::Truncated { .. })), "cut {cut}");
        }
        let mut extra = good.clone();
        extra.push(0);
        assert!(read_dataset_from(&extra[..]).is_err());
        // first label of the first record sits after header, id_len, id and num_labels
        let id_len = d.records[0].id.len();
        let mut bad = good.clone();
        let at = FAV1_HEADER_LEN + 2 + id_len + 4;
        bad[at..at + 4].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(read_dataset_from(&bad[..]), Err(Error::Format(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn round_trip_is_bitwise(seed in any::<u64>(), n in 0usize..6) {
            let mut d = gen_synthetic(&SyntheticSpec::small(n, 5, seed)).unwrap();
            if let Some(r) = d.records.first_mut() {
                r.visual[0] = f32::from_bits(0x7fc0_1234);
                r.audio[0] = -0.0;
            }
            let back = read_dataset_from(&bytes(&d)[..]).unwrap();
            prop_assert!(bitwise_eq(&d, &back));
            prop_assert_eq!(bytes(&back), bytes(&d));
        }
    }
}

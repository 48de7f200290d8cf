//! GTS1 on-disk format.
//!
//! ```text
//! bytes 0..4    magic "GTS1"
//! bytes 4..12   n_individuals  u64 LE
//! bytes 12..20  n_variants     u64 LE
//! p blocks of ceil(n/4) bytes, 2-bit codes LSB-first
//! p entries of (u16 LE length, UTF-8 variant id)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{packed_len, GenotypeMatrix};
use crate::error::{PrsError, Result};

pub const GTS_MAGIC: &[u8; 4] = b"GTS1";

pub fn write_gts(matrix: &GenotypeMatrix, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_gts_to(matrix, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_gts_to<W: Write>(matrix: &GenotypeMatrix, w: &mut W) -> Result<()> {
    let n = matrix.n_individuals();
    let p = matrix.n_variants();
    if n == 0 || p == 0 {
        return Err(PrsError::dimension("cannot write an empty genotype matrix"));
    }
    w.write_all(GTS_MAGIC)?;
    w.write_all(&(n as u64).to_le_bytes())?;
    w.write_all(&(p as u64).to_le_bytes())?;
    for j in 0..p {
        w.write_all(matrix.packed_column(j))?;
    }
    for id in matrix.variant_ids() {
        let len = u16::try_from(id.len())
            .map_err(|_| PrsError::invalid(format!("variant id longer than 65535 bytes: {id}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(id.as_bytes())?;
    }
    Ok(())
}

pub fn read_gts(path: impl AsRef<Path>) -> Result<GenotypeMatrix> {
    let mut r = BufReader::new(File::open(path)?);
    read_gts_from(&mut r)
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => PrsError::format(format!("truncated file while reading {what}")),
        _ => PrsError::Io(e),
    })
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_gts_from<R: Read>(r: &mut R) -> Result<GenotypeMatrix> {
    let mut magic = [0u8; 4];
    read_exact_or(r, &mut magic, "magic")?;
    if &magic != GTS_MAGIC {
        return Err(PrsError::format(format!("bad magic {magic:?}, expected \"GTS1\"")));
    }
    let n = usize::try_from(read_u64(r, "n_individuals")?)
        .map_err(|_| PrsError::format("n_individuals does not fit in memory"))?;
    let p = usize::try_from(read_u64(r, "n_variants")?)
        .map_err(|_| PrsError::format("n_variants does not fit in memory"))?;
    if n == 0 || p == 0 {
        return Err(PrsError::dimension(format!("GTS1 file has dimensions {n} x {p}")));
    }
    let payload = packed_len(n)
        .checked_mul(p)
        .ok_or_else(|| PrsError::format("payload size overflows"))?;
    let mut packed = Vec::new();
    r.take(payload as u64).read_to_end(&mut packed)?;
    if packed.len() != payload {
        return Err(PrsError::format(format!(
            "truncated code stream: expected {payload} bytes, found {}",
            packed.len()
        )));
    }
    let mut ids = Vec::with_capacity(p);
    for _ in 0..p {
        let mut len = [0u8; 2];
        read_exact_or(r, &mut len, "variant id length")?;
        let mut buf = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact_or(r, &mut buf, "variant id")?;
        ids.push(String::from_utf8(buf).map_err(|_| PrsError::format("variant id is not UTF-8"))?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(PrsError::format("trailing bytes after variant id table"));
    }
    GenotypeMatrix::from_packed(n, ids, packed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, p: usize) -> GenotypeMatrix {
        let codes: Vec<u8> = (0..n * p).map(|_| rng.random_range(0..4)).collect();
        let ids = (0..p).map(|j| format!("rs{j}")).collect();
        GenotypeMatrix::from_codes(n, ids, &codes).unwrap()
    }

    fn encode(m: &GenotypeMatrix) -> Vec<u8> {
        let mut buf = Vec::new();
        write_gts_to(m, &mut buf).unwrap();
        buf
    }

    #[test]
    fn single_entry_layout() {
        let m = GenotypeMatrix::from_codes(1, vec!["a".into()], &[2]).unwrap();
        let buf = encode(&m);
        assert_eq!(&buf[..4], b"GTS1");
        assert_eq!(&buf[4..12], &1u64.to_le_bytes());
        assert_eq!(&buf[12..20], &1u64.to_le_bytes());
        assert_eq!(buf[20], 0b0000_0010);
        assert_eq!(&buf[21..], &[1, 0, b'a']);
    }

    #[test]
    fn five_codes_pad_to_two_bytes() {
        let m = GenotypeMatrix::from_codes(5, vec!["v".into()], &[0, 1, 2, 3, 0]).unwrap();
        let buf = encode(&m);
        assert_eq!(&buf[20..22], &[0b1110_0100, 0b0000_0000]);
    }

    #[test]
    fn roundtrip_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (n, p) in [(50, 200), (7, 3), (13, 41)] {
            let m = random_matrix(&mut rng, n, p);
            let back = read_gts_from(&mut &encode(&m)[..]).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn roundtrip_through_file() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_matrix(&mut rng, 9, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.gts");
        write_gts(&m, &path).unwrap();
        assert_eq!(read_gts(&path).unwrap(), m);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut buf = encode(&random_matrix(&mut rng, 4, 2));
        buf[3] = b'2';
        assert!(matches!(read_gts_from(&mut &buf[..]), Err(PrsError::Format(_))));
    }

    #[test]
    fn rejects_zero_variants() {
        let mut buf = b"GTS1".to_vec();
        buf.extend(10u64.to_le_bytes());
        buf.extend(0u64.to_le_bytes());
        assert!(matches!(read_gts_from(&mut &buf[..]), Err(PrsError::Dimension(_))));
    }

    #[test]
    fn rejects_truncated_payload() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let buf = encode(&random_matrix(&mut rng, 10, 5));
        for cut in [19, 25, 34, buf.len() - 1] {
            assert!(matches!(read_gts_from(&mut &buf[..cut]), Err(PrsError::Format(_))), "cut {cut}");
        }
    }
}

//! Periodic lattice geometry and occupancy configurations.
//!
//! Sites of the torus `(Z/NZ)^d` are linearised row-major with the last axis
//! fastest. All radii use the sup-norm `|z| = max_i |z_i|`.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest dimension representable by [`Offset`].
pub const MAX_DIM: usize = 4;

/// A displacement in `Z^d`; coordinates beyond the working dimension are zero.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Offset(pub [i32; MAX_DIM]);

impl Offset {
    pub const ZERO: Offset = Offset([0; MAX_DIM]);

    pub fn new(coords: &[i32]) -> Offset {
        assert!(coords.len() <= MAX_DIM, "offset dimension exceeds {MAX_DIM}");
        let mut c = [0; MAX_DIM];
        c[..coords.len()].copy_from_slice(coords);
        Offset(c)
    }

    /// Unit vector `e_axis`.
    pub fn unit(axis: usize) -> Offset {
        let mut c = [0; MAX_DIM];
        c[axis] = 1;
        Offset(c)
    }

    pub fn norm(&self) -> usize {
        self.0.iter().map(|c| c.unsigned_abs() as usize).max().unwrap_or(0)
    }

    pub fn coords(&self, d: usize) -> &[i32] {
        &self.0[..d]
    }

    pub fn dot(&self, v: &[f64]) -> f64 {
        v.iter().zip(self.0.iter()).map(|(a, &b)| a * b as f64).sum()
    }
}

impl std::ops::Add for Offset {
    type Output = Offset;
    fn add(self, rhs: Offset) -> Offset {
        let mut c = self.0;
        for (a, b) in c.iter_mut().zip(rhs.0) {
            *a += b;
        }
        Offset(c)
    }
}

impl std::ops::Sub for Offset {
    type Output = Offset;
    fn sub(self, rhs: Offset) -> Offset {
        let mut c = self.0;
        for (a, b) in c.iter_mut().zip(rhs.0) {
            *a -= b;
        }
        Offset(c)
    }
}

impl std::ops::Neg for Offset {
    type Output = Offset;
    fn neg(self) -> Offset {
        Offset(self.0.map(|c| -c))
    }
}

impl fmt::Debug for Offset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// All offsets of the box `Λ(r) = {z : |z| <= r}` in `Z^d`, lexicographically sorted.
pub fn box_offsets(d: usize, r: usize) -> Vec<Offset> {
    rect_offsets(&vec![-(r as i32); d], &vec![r as i32; d])
}

/// All offsets of the rectangle `lo <= z <= hi` (per axis), lexicographically sorted.
pub fn rect_offsets(lo: &[i32], hi: &[i32]) -> Vec<Offset> {
    let d = lo.len();
    let mut out = vec![];
    let mut cur: Vec<i32> = lo.to_vec();
    if lo.iter().zip(hi).any(|(a, b)| a > b) {
        return out;
    }
    loop {
        out.push(Offset::new(&cur));
        let mut axis = d;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            if cur[axis] < hi[axis] {
                cur[axis] += 1;
                break;
            }
            cur[axis] = lo[axis];
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Torus {
    d: usize,
    n: usize,
}

impl Torus {
    pub fn new(d: usize, n: usize) -> Result<Torus> {
        if d == 0 || d > MAX_DIM {
            return Err(Error::Precondition(format!("dimension {d} not in 1..={MAX_DIM}")));
        }
        if n == 0 {
            return Err(Error::Precondition("torus side must be >= 1".into()));
        }
        Ok(Torus { d, n })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn side(&self) -> usize {
        self.n
    }

    pub fn volume(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    pub fn coords(&self, site: usize) -> Vec<usize> {
        let mut c = vec![0; self.d];
        let mut s = site;
        for a in (0..self.d).rev() {
            c[a] = s % self.n;
            s /= self.n;
        }
        c
    }

    pub fn site(&self, coords: &[usize]) -> usize {
        coords.iter().fold(0, |acc, &c| acc * self.n + c % self.n)
    }

    /// Site `x + z` with per-axis wrap-around.
    pub fn translate(&self, site: usize, z: Offset) -> usize {
        let n = self.n as i64;
        let mut s = site;
        let mut stride = 1usize;
        let mut out = 0usize;
        for a in (0..self.d).rev() {
            let c = (s % self.n) as i64;
            s /= self.n;
            let shifted = (c + z.0[a] as i64).rem_euclid(n) as usize;
            out += shifted * stride;
            stride *= self.n;
        }
        out
    }

    /// Neighbour table: entry `site * 2d + 2a` is `site + e_a`, `+ 1` is `site - e_a`.
    pub fn neighbor_table(&self) -> Vec<usize> {
        let dd = 2 * self.d;
        let mut table = vec![0; self.volume() * dd];
        for x in 0..self.volume() {
            for a in 0..self.d {
                table[x * dd + 2 * a] = self.translate(x, Offset::unit(a));
                table[x * dd + 2 * a + 1] = self.translate(x, -Offset::unit(a));
            }
        }
        table
    }

    /// Macroscopic position `x / N` of a site in `[0,1)^d`.
    pub fn position(&self, site: usize) -> Vec<f64> {
        self.coords(site).into_iter().map(|c| c as f64 / self.n as f64).collect()
    }

    fn check_site(&self, site: usize) -> Result<()> {
        if site >= self.volume() {
            return Err(Error::SiteOutOfRange { site, volume: self.volume() });
        }
        Ok(())
    }
}

/// Unordered nearest-neighbour pair of sites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bond {
    pub x: usize,
    pub y: usize,
}

impl Bond {
    pub fn new(torus: &Torus, x: usize, y: usize) -> Result<Bond> {
        torus.check_site(x)?;
        torus.check_site(y)?;
        let adjacent = x != y
            && (0..torus.dim()).any(|a| {
                torus.translate(x, Offset::unit(a)) == y || torus.translate(x, -Offset::unit(a)) == y
            });
        if !adjacent {
            return Err(Error::InvalidBond(x, y));
        }
        Ok(Bond { x, y })
    }
}

/// Occupancy field `η ∈ {0,1}^{T_N^d}`, stored as packed bits.
#[derive(Clone, PartialEq, Eq)]
pub struct Configuration {
    torus: Torus,
    bits: Vec<u64>,
}

impl fmt::Debug for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = (0..self.torus.volume().min(64))
            .map(|x| if self.get(x) { '1' } else { '0' })
            .collect();
        write!(f, "Configuration(d={}, N={}, {s})", self.torus.d, self.torus.n)
    }
}

impl Configuration {
    pub fn empty(torus: Torus) -> Configuration {
        Configuration { torus, bits: vec![0; torus.volume().div_ceil(64)] }
    }

    pub fn full(torus: Torus) -> Configuration {
        let mut c = Configuration::empty(torus);
        for x in 0..torus.volume() {
            c.set(x, true);
        }
        c
    }

    pub fn from_fn(torus: Torus, mut occupied: impl FnMut(usize) -> bool) -> Configuration {
        let mut c = Configuration::empty(torus);
        for x in 0..torus.volume() {
            if occupied(x) {
                c.set(x, true);
            }
        }
        c
    }

    /// Parse a 0/1 string in site order (d = 1 convenience, any d accepted).
    pub fn from_bits_str(torus: Torus, s: &str) -> Result<Configuration> {
        let chars: Vec<char> = s.chars().filter(|c| !c.is_whitespace()).collect();
        if chars.len() != torus.volume() {
            return Err(Error::Format(format!(
                "expected {} occupation digits, got {}",
                torus.volume(),
                chars.len()
            )));
        }
        let mut c = Configuration::empty(torus);
        for (x, ch) in chars.iter().enumerate() {
            match ch {
                '0' => {}
                '1' => c.set(x, true),
                other => return Err(Error::Format(format!("invalid occupation digit {other:?}"))),
            }
        }
        Ok(c)
    }

    pub fn torus(&self) -> &Torus {
        &self.torus
    }

    #[inline]
    pub fn get(&self, x: usize) -> bool {
        (self.bits[x >> 6] >> (x & 63)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, x: usize, v: bool) {
        let mask = 1u64 << (x & 63);
        if v {
            self.bits[x >> 6] |= mask;
        } else {
            self.bits[x >> 6] &= !mask;
        }
    }

    #[inline]
    pub fn toggle(&mut self, x: usize) {
        self.bits[x >> 6] ^= 1u64 << (x & 63);
    }

    /// Swap the occupations of `x` and `y` in place.
    #[inline]
    pub fn swap_sites(&mut self, x: usize, y: usize) {
        if self.get(x) != self.get(y) {
            self.toggle(x);
            self.toggle(y);
        }
    }

    pub fn particle_count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn density(&self) -> f64 {
        self.particle_count() as f64 / self.torus.volume() as f64
    }

    /// `η^{x,y}`.
    pub fn exchange(&self, b: Bond) -> Result<Configuration> {
        let b = Bond::new(&self.torus, b.x, b.y)?;
        let mut out = self.clone();
        out.swap_sites(b.x, b.y);
        Ok(out)
    }

    /// `η^x`.
    pub fn flip(&self, x: usize) -> Result<Configuration> {
        self.torus.check_site(x)?;
        let mut out = self.clone();
        out.toggle(x);
        Ok(out)
    }

    /// Cyclic shift: the returned configuration `ξ` satisfies `ξ_y = η_{y+z}`.
    pub fn shift(&self, z: Offset) -> Configuration {
        Configuration::from_fn(self.torus, |y| self.get(self.torus.translate(y, z)))
    }

    /// Sample average over the box of radius `l` around `x`.
    pub fn block_average(&self, x: usize, l: usize) -> Result<f64> {
        self.torus.check_site(x)?;
        check_block(&self.torus, l)?;
        let d = self.torus.dim();
        let count = box_offsets(d, l)
            .into_iter()
            .filter(|&z| self.get(self.torus.translate(x, z)))
            .count();
        Ok(count as f64 / ((2 * l + 1).pow(d as u32)) as f64)
    }

    /// Block averages at every site, via separable periodic sliding sums.
    pub fn block_averages(&self, l: usize) -> Result<Vec<f64>> {
        check_block(&self.torus, l)?;
        let n = self.torus.side();
        let d = self.torus.dim();
        let vol = self.torus.volume();
        let mut field: Vec<f64> = (0..vol).map(|x| if self.get(x) { 1.0 } else { 0.0 }).collect();
        let mut line = vec![0.0; n];
        let mut stride = 1;
        for _axis in (0..d).rev() {
            let mut next = vec![0.0; vol];
            for base in 0..vol {
                // iterate each line once: base must have coordinate 0 along this axis
                if (base / stride) % n != 0 {
                    continue;
                }
                for (i, v) in line.iter_mut().enumerate() {
                    *v = field[base + i * stride];
                }
                let mut s: f64 = (0..=2 * l).map(|k| line[(k + n - l) % n]).sum();
                for i in 0..n {
                    next[base + i * stride] = s;
                    s += line[(i + l + 1) % n] - line[(i + n - l) % n];
                }
            }
            field = next;
            stride *= n;
        }
        let norm = ((2 * l + 1).pow(d as u32)) as f64;
        Ok(field.into_iter().map(|v| v / norm).collect())
    }

    /// Occupations as a byte string, site `s` at bit `s % 8` of byte `s / 8`.
    pub fn to_packed_bytes(&self) -> Vec<u8> {
        let nbytes = self.torus.volume().div_ceil(8);
        let mut out = Vec::with_capacity(nbytes);
        for i in 0..nbytes {
            out.push(((self.bits[i / 8] >> ((i % 8) * 8)) & 0xff) as u8);
        }
        out
    }

    pub fn from_packed_bytes(torus: Torus, bytes: &[u8]) -> Result<Configuration> {
        let vol = torus.volume();
        if bytes.len() != vol.div_ceil(8) {
            return Err(Error::Format(format!(
                "expected {} payload bytes, got {}",
                vol.div_ceil(8),
                bytes.len()
            )));
        }
        let mut c = Configuration::empty(torus);
        for (i, &b) in bytes.iter().enumerate() {
            c.bits[i / 8] |= (b as u64) << ((i % 8) * 8);
        }
        if vol % 8 != 0 && bytes[bytes.len() - 1] >> (vol % 8) != 0 {
            return Err(Error::Format("padding bits are not zero".into()));
        }
        Ok(c)
    }
}

fn check_block(torus: &Torus, l: usize) -> Result<()> {
    if 2 * l + 1 >= torus.side() {
        return Err(Error::BoxTooLarge { radius: l, side: torus.side() });
    }
    Ok(())
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"GKCF";
const SNAPSHOT_VERSION: u8 = 1;

/// Sidecar metadata written next to every binary snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub format: String,
    pub version: u8,
    pub d: usize,
    pub n: usize,
    pub t: f64,
    pub particles: usize,
    pub byte_order: String,
    pub bit_order: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Binary snapshot layout (all integers little-endian):
///
/// ```text
/// 0  4  magic "GKCF"
/// 4  1  version (1)
/// 5  1  d
/// 6  2  reserved (0)
/// 8  4  N (u32)
/// 12 8  t (f64)
/// 20 .. ceil(N^d / 8) bytes of occupations, site s -> bit (s % 8) of byte (s / 8)
/// ```
pub fn write_snapshot(path: &Path, cfg: &Configuration, t: f64, seed: Option<u64>) -> Result<()> {
    let torus = cfg.torus();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SNAPSHOT_MAGIC)?;
    w.write_all(&[SNAPSHOT_VERSION, torus.dim() as u8, 0, 0])?;
    w.write_all(&(torus.side() as u32).to_le_bytes())?;
    w.write_all(&t.to_le_bytes())?;
    w.write_all(&cfg.to_packed_bytes())?;
    w.flush()?;
    let meta = SnapshotMeta {
        format: "gk-config".into(),
        version: SNAPSHOT_VERSION,
        d: torus.dim(),
        n: torus.side(),
        t,
        particles: cfg.particle_count(),
        byte_order: "little-endian".into(),
        bit_order: "lsb-first".into(),
        seed,
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<(Configuration, f64)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 20];
    r.read_exact(&mut header)?;
    if &header[0..4] != SNAPSHOT_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if header[4] != SNAPSHOT_VERSION {
        return Err(Error::Format(format!("unsupported version {}", header[4])));
    }
    let d = header[5] as usize;
    let n = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let t = f64::from_le_bytes(header[12..20].try_into().unwrap());
    let torus = Torus::new(d, n)?;
    let mut payload = vec![];
    r.read_to_end(&mut payload)?;
    Ok((Configuration::from_packed_bytes(torus, &payload)?, t))
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t1(n: usize) -> Torus {
        Torus::new(1, n).unwrap()
    }

    #[test]
    fn exchange_two_sites() {
        let t = t1(2);
        let c = Configuration::from_bits_str(t, "10").unwrap();
        let e = c.exchange(Bond::new(&t, 0, 1).unwrap()).unwrap();
        assert_eq!(e, Configuration::from_bits_str(t, "01").unwrap());
    }

    #[test]
    fn exchange_equal_values_is_noop() {
        let t = t1(4);
        let c = Configuration::from_bits_str(t, "1100").unwrap();
        assert_eq!(c.exchange(Bond { x: 0, y: 1 }).unwrap(), c);
        assert_eq!(c.exchange(Bond { x: 2, y: 3 }).unwrap(), c);
    }

    #[test]
    fn double_exchange_exhaustive_n4() {
        let t = t1(4);
        for mask in 0..16u32 {
            let c = Configuration::from_fn(t, |x| mask >> x & 1 == 1);
            for x in 0..4 {
                let b = Bond::new(&t, x, (x + 1) % 4).unwrap();
                assert_eq!(c.exchange(b).unwrap().exchange(b).unwrap(), c);
            }
        }
    }

    #[test]
    fn invalid_bond_rejected() {
        let t = t1(6);
        assert!(matches!(Bond::new(&t, 0, 2), Err(Error::InvalidBond(0, 2))));
        let c = Configuration::empty(t);
        assert!(c.exchange(Bond { x: 1, y: 4 }).is_err());
    }

    #[test]
    fn flip_basics() {
        let t = t1(5);
        let c = Configuration::from_bits_str(t, "00100").unwrap();
        let f = c.flip(0).unwrap();
        assert!(f.get(0));
        assert_eq!((1..5).map(|x| f.get(x)).collect::<Vec<_>>(), (1..5).map(|x| c.get(x)).collect::<Vec<_>>());
        assert_eq!(f.flip(0).unwrap(), c);
        assert_eq!(f.particle_count(), c.particle_count() + 1);
        assert!(c.flip(7).is_err());
    }

    #[test]
    fn block_average_examples() {
        let t = t1(8);
        let c = Configuration::from_bits_str(t, "10101010").unwrap();
        assert!((c.block_average(1, 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let t2 = Torus::new(2, 7).unwrap();
        assert_eq!(Configuration::full(t2).block_average(10, 2).unwrap(), 1.0);
        assert_eq!(Configuration::empty(t2).block_average(3, 1).unwrap(), 0.0);
        assert!(matches!(c.block_average(0, 4), Err(Error::BoxTooLarge { .. })));
    }

    #[test]
    fn sliding_block_averages_match_direct() {
        let t = Torus::new(2, 9).unwrap();
        let c = Configuration::from_fn(t, |x| (x * 7 + x / 3) % 5 < 2);
        let fast = c.block_averages(2).unwrap();
        for x in 0..t.volume() {
            assert!((fast[x] - c.block_average(x, 2).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn neighbor_table_wraps() {
        let t = Torus::new(2, 3).unwrap();
        let nb = t.neighbor_table();
        // site (0,0): +e_0 -> (1,0) = 3, -e_0 -> (2,0) = 6, +e_1 -> (0,1) = 1, -e_1 -> (0,2) = 2
        assert_eq!(&nb[0..4], &[3, 6, 1, 2]);
    }

    #[test]
    fn snapshot_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let t = Torus::new(2, 5).unwrap();
        let c = Configuration::from_fn(t, |x| x % 3 == 0);
        let p = dir.path().join("snap.bin");
        write_snapshot(&p, &c, 0.25, Some(7)).unwrap();
        let (back, time) = read_snapshot(&p).unwrap();
        assert_eq!(back, c);
        assert_eq!(time, 0.25);
        let meta: SnapshotMeta =
            serde_json::from_str(&std::fs::read_to_string(sidecar_path(&p)).unwrap()).unwrap();
        assert_eq!(meta.particles, c.particle_count());
        let raw = std::fs::read(&p).unwrap();
        assert_eq!(&raw[0..4], b"GKCF");
        assert_eq!(raw.len(), 20 + 4);
    }

    fn arb_config() -> impl Strategy<Value = (usize, usize, Vec<bool>)> {
        (1usize..=2, 5usize..=9).prop_flat_map(|(d, n)| {
            let vol = n.pow(d as u32);
            (Just(d), Just(n), proptest::collection::vec(any::<bool>(), vol))
        })
    }

    proptest! {
        #[test]
        fn counts_and_involutions((d, n, occ) in arb_config(), x in 0usize..1000, axis in 0usize..2) {
            let t = Torus::new(d, n).unwrap();
            let c = Configuration::from_fn(t, |s| occ[s]);
            let x = x % t.volume();
            let y = t.translate(x, Offset::unit(axis % d));
            let b = Bond::new(&t, x, y).unwrap();
            let e = c.exchange(b).unwrap();
            prop_assert_eq!(e.particle_count(), c.particle_count());
            prop_assert_eq!(e.exchange(b).unwrap(), c.clone());
            let f = c.flip(x).unwrap();
            prop_assert_eq!((f.particle_count() as i64 - c.particle_count() as i64).abs(), 1);
            prop_assert_eq!(f.flip(x).unwrap(), c);
        }

        #[test]
        fn block_average_shift_equivariant((d, n, occ) in arb_config(), x in 0usize..1000, zs in proptest::collection::vec(-4i32..4, 2)) {
            let t = Torus::new(d, n).unwrap();
            let c = Configuration::from_fn(t, |s| occ[s]);
            let x = x % t.volume();
            let z = Offset::new(&zs[..d]);
            let l = 1;
            let lhs = c.shift(z).block_average(x, l).unwrap();
            let rhs = c.block_average(t.translate(x, z), l).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-14);
        }
    }
}

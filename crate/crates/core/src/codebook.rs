//! Latent codebooks, token-to-token proximity, and the precomputed
//! k-nearest-neighbour index.

use std::cmp::Ordering;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prob::{rng_from_seed, TokenId};

pub const CODEBOOK_MAGIC: &[u8; 4] = b"CDBK";
pub const CODEBOOK_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum CodebookError {
    #[error("token {token} has a zero-norm latent; cosine proximity is undefined")]
    ZeroVector { token: usize },
    #[error("k = {k} exceeds the vocabulary size {vocab}")]
    KTooLarge { k: usize, vocab: usize },
    #[error("k must be at least 1")]
    KZero,
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("malformed codebook: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// How "closeness" between two latents is scored. Smaller is closer for
/// every variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ProximityMeasureKind {
    L2,
    Cosine,
    Random { seed: u64 },
}

impl ProximityMeasureKind {
    pub fn label(&self) -> String {
        match self {
            ProximityMeasureKind::L2 => "l2".to_string(),
            ProximityMeasureKind::Cosine => "cosine".to_string(),
            ProximityMeasureKind::Random { seed } => format!("random:{seed}"),
        }
    }
}

/// `V` latent vectors of dimension `d`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    data: Vec<f32>,
    vocab: usize,
    dim: usize,
}

impl Codebook {
    pub fn from_flat(data: Vec<f32>, vocab: usize, dim: usize) -> Result<Self, CodebookError> {
        if vocab == 0 || dim == 0 {
            return Err(CodebookError::Format(format!(
                "need V >= 1 and d >= 1, got V={vocab}, d={dim}"
            )));
        }
        if data.len() != vocab * dim {
            return Err(CodebookError::Format(format!(
                "expected {} values for {vocab}x{dim}, got {}",
                vocab * dim,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(CodebookError::Format(format!(
                "non-finite entry in row {}",
                i / dim
            )));
        }
        Ok(Codebook { data, vocab, dim })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, CodebookError> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return Err(CodebookError::Format(format!(
                "row {bad} has {} columns, expected {dim}",
                rows[bad].len()
            )));
        }
        Codebook::from_flat(rows.concat(), rows.len(), dim)
    }

    #[inline]
    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, token: usize) -> &[f32] {
        &self.data[token * self.dim..(token + 1) * self.dim]
    }

    fn check_token(&self, t: TokenId) -> Result<(), CodebookError> {
        if t.index() >= self.vocab {
            return Err(CodebookError::TokenOutOfRange {
                token: t.index(),
                vocab: self.vocab,
            });
        }
        Ok(())
    }

    /// Binary container: `CDBK`, version, V, d (u32 LE), then V*d f32 LE.
    pub fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(CODEBOOK_MAGIC)?;
        w.write_all(&CODEBOOK_VERSION.to_le_bytes())?;
        w.write_all(&(self.vocab as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self, CodebookError> {
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header)
            .map_err(|_| CodebookError::Format("truncated header".into()))?;
        if &header[0..4] != CODEBOOK_MAGIC {
            return Err(CodebookError::Format("bad magic, expected CDBK".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != CODEBOOK_VERSION {
            return Err(CodebookError::Format(format!("unsupported version {version}")));
        }
        let (vocab, dim) = (word(8) as usize, word(12) as usize);
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() != vocab * dim * 4 {
            return Err(CodebookError::Format(format!(
                "body has {} bytes, header promises {}",
                body.len(),
                vocab * dim * 4
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Codebook::from_flat(data, vocab, dim)
    }

    pub fn save(&self, path: &Path) -> Result<(), CodebookError> {
        let mut buf = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        self.write_binary(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    /// Loads a binary container, or CSV when the file ends in `.csv`.
    pub fn load(path: &Path) -> Result<Self, CodebookError> {
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            Codebook::parse_csv(&fs::read_to_string(path)?)
        } else {
            Codebook::read_binary(fs::File::open(path)?)
        }
    }

    /// One row per token, comma-separated decimals. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse_csv(text: &str) -> Result<Self, CodebookError> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split(',')
                .map(|s| s.trim().parse::<f32>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CodebookError::Format(format!("line {}: {e}", lineno + 1)))?;
            rows.push(row);
        }
        Codebook::from_rows(&rows)
    }
}

/// Gaussian codebook. With `correlated`, rows are reordered along a greedy
/// nearest-neighbour tour so that adjacent token ids sit close in latent
/// space.
pub fn synthesize_codebook(vocab: usize, dim: usize, seed: u64, correlated: bool) -> Codebook {
    let mut rng = rng_from_seed(seed);
    let mut rows: Vec<Vec<f32>> = (0..vocab)
        .map(|_| (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
        .collect();
    if correlated && vocab > 1 {
        rows = nearest_neighbour_tour(&rows)
            .into_iter()
            .map(|i| rows[i].clone())
            .collect();
    }
    Codebook::from_rows(&rows).expect("synthesized rows are finite and rectangular")
}

fn nearest_neighbour_tour(rows: &[Vec<f32>]) -> Vec<usize> {
    let n = rows.len();
    let mut visited = vec![false; n];
    let start = (0..n)
        .min_by(|&a, &b| rows[a][0].total_cmp(&rows[b][0]).then(a.cmp(&b)))
        .unwrap();
    let mut order = Vec::with_capacity(n);
    let mut cur = start;
    visited[cur] = true;
    order.push(cur);
    for _ in 1..n {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for (j, seen) in visited.iter().enumerate() {
            if *seen {
                continue;
            }
            let d = sq_l2(&rows[cur], &rows[j]);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        visited[best] = true;
        order.push(best);
        cur = best;
    }
    order
}

fn sq_l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn norm(a: &[f32]) -> f64 {
    a.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Keyed pseudo-distance in (0, 1] for an unordered pair.
fn random_pair_distance(seed: u64, a: usize, b: usize) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let h = splitmix64(splitmix64(splitmix64(seed) ^ lo as u64) ^ hi as u64);
    ((h >> 11) + 1) as f64 / (1u64 << 53) as f64
}

pub fn pairwise_distance(
    cb: &Codebook,
    a: TokenId,
    b: TokenId,
    measure: ProximityMeasureKind,
) -> Result<f64, CodebookError> {
    cb.check_token(a)?;
    cb.check_token(b)?;
    let (ra, rb) = (cb.row(a.index()), cb.row(b.index()));
    match measure {
        ProximityMeasureKind::L2 => Ok(sq_l2(ra, rb).sqrt()),
        ProximityMeasureKind::Cosine => {
            let (na, nb) = (norm(ra), norm(rb));
            if na == 0.0 {
                return Err(CodebookError::ZeroVector { token: a.index() });
            }
            if nb == 0.0 {
                return Err(CodebookError::ZeroVector { token: b.index() });
            }
            if a == b {
                return Ok(0.0);
            }
            Ok(cosine_distance(ra, rb, na, nb))
        }
        ProximityMeasureKind::Random { seed } => {
            if a == b {
                Ok(0.0)
            } else {
                Ok(random_pair_distance(seed, a.index(), b.index()))
            }
        }
    }
}

fn cosine_distance(a: &[f32], b: &[f32], na: f64, nb: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    (1.0 - dot / (na * nb)).max(0.0)
}

/// `B_k(t)` for every token: the `k` closest tokens, self first, then by
/// ascending distance with ties to the lower id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborIndex {
    k: usize,
    vocab: usize,
    neighbors: Vec<TokenId>,
    distances: Vec<f64>,
}

impl NeighborIndex {
    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    #[inline]
    pub fn neighbors(&self, t: TokenId) -> &[TokenId] {
        let i = t.index();
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    #[inline]
    pub fn distances(&self, t: TokenId) -> &[f64] {
        let i = t.index();
        &self.distances[i * self.k..(i + 1) * self.k]
    }

    /// Self-only neighbourhoods; handy when no codebook is involved.
    pub fn identity(vocab: usize) -> Self {
        NeighborIndex {
            k: 1,
            vocab,
            neighbors: (0..vocab).map(TokenId::from).collect(),
            distances: vec![0.0; vocab],
        }
    }

    /// Builds an index from explicit neighbour lists. Each list must have
    /// length `k`, start with its own token, and contain distinct ids.
    pub fn from_lists(lists: Vec<Vec<TokenId>>) -> Result<Self, CodebookError> {
        let vocab = lists.len();
        let k = lists.first().map_or(0, Vec::len);
        if k == 0 {
            return Err(CodebookError::KZero);
        }
        let mut neighbors = Vec::with_capacity(vocab * k);
        let mut distances = Vec::with_capacity(vocab * k);
        for (t, list) in lists.into_iter().enumerate() {
            if list.len() != k || list[0].index() != t {
                return Err(CodebookError::Format(format!(
                    "list for token {t} must have length {k} and start with {t}"
                )));
            }
            let mut seen = list.clone();
            seen.sort();
            seen.dedup();
            if seen.len() != k || seen.last().unwrap().index() >= vocab {
                return Err(CodebookError::Format(format!(
                    "list for token {t} has repeated or out-of-range ids"
                )));
            }
            distances.extend((0..k).map(|r| r as f64));
            neighbors.extend(list);
        }
        Ok(NeighborIndex {
            k,
            vocab,
            neighbors,
            distances,
        })
    }
}

fn order_key(t: usize, a: (usize, f64), b: (usize, f64)) -> Ordering {
    (a.0 != t)
        .cmp(&(b.0 != t))
        .then(a.1.total_cmp(&b.1))
        .then(a.0.cmp(&b.0))
}

pub fn build_neighbor_index(
    cb: &Codebook,
    k: usize,
    measure: ProximityMeasureKind,
) -> Result<NeighborIndex, CodebookError> {
    let vocab = cb.vocab_size();
    if k == 0 {
        return Err(CodebookError::KZero);
    }
    if k > vocab {
        return Err(CodebookError::KTooLarge { k, vocab });
    }
    let norms: Vec<f64> = (0..vocab).map(|t| norm(cb.row(t))).collect();
    if measure == ProximityMeasureKind::Cosine {
        if let Some(token) = norms.iter().position(|&n| n == 0.0) {
            return Err(CodebookError::ZeroVector { token });
        }
    }
    let lists: Vec<Vec<(usize, f64)>> = (0..vocab)
        .into_par_iter()
        .map(|t| {
            let row = cb.row(t);
            let mut all: Vec<(usize, f64)> = (0..vocab)
                .map(|u| {
                    let d = if u == t {
                        0.0
                    } else {
                        match measure {
                            ProximityMeasureKind::L2 => sq_l2(row, cb.row(u)).sqrt(),
                            ProximityMeasureKind::Cosine => {
                                cosine_distance(row, cb.row(u), norms[t], norms[u])
                            }
                            ProximityMeasureKind::Random { seed } => {
                                random_pair_distance(seed, t, u)
                            }
                        }
                    };
                    (u, d)
                })
                .collect();
            if k < vocab {
                all.select_nth_unstable_by(k - 1, |&a, &b| order_key(t, a, b));
                all.truncate(k);
            }
            all.sort_by(|&a, &b| order_key(t, a, b));
            all
        })
        .collect();
    let mut neighbors = Vec::with_capacity(vocab * k);
    let mut distances = Vec::with_capacity(vocab * k);
    for list in lists {
        for (u, d) in list {
            neighbors.push(TokenId::from(u));
            distances.push(d);
        }
    }
    Ok(NeighborIndex {
        k,
        vocab,
        neighbors,
        distances,
    })
}

/// Reference neighbour lists: every pairwise distance, fully sorted.
pub fn brute_force_neighbors(
    cb: &Codebook,
    k: usize,
    measure: ProximityMeasureKind,
) -> Result<Vec<Vec<TokenId>>, CodebookError> {
    let vocab = cb.vocab_size();
    if k == 0 {
        return Err(CodebookError::KZero);
    }
    if k > vocab {
        return Err(CodebookError::KTooLarge { k, vocab });
    }
    let mut out = Vec::with_capacity(vocab);
    for t in 0..vocab {
        let mut all = Vec::with_capacity(vocab);
        for u in 0..vocab {
            all.push((u, pairwise_distance(cb, TokenId::from(t), TokenId::from(u), measure)?));
        }
        all.sort_by(|&a, &b| order_key(t, a, b));
        out.push(all.into_iter().take(k).map(|(u, _)| TokenId::from(u)).collect());
    }
    Ok(out)
}

/// Swaps `t` for a token drawn uniformly from its neighbour list.
pub fn replace_with_uniform_neighbor<R: Rng + ?Sized>(
    t: TokenId,
    idx: &NeighborIndex,
    rng: &mut R,
) -> TokenId {
    let list = idx.neighbors(t);
    list[rng.random_range(0..list.len())]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_cb() -> Codebook {
        Codebook::from_rows(&[vec![0.0], vec![1.0], vec![3.0], vec![7.0]]).unwrap()
    }

    #[test]
    fn distance_examples() {
        let cb = Codebook::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 0.0]]).unwrap();
        let (a, b, c) = (TokenId(0), TokenId(1), TokenId(2));
        assert_eq!(pairwise_distance(&cb, a, a, ProximityMeasureKind::L2).unwrap(), 0.0);
        let d = pairwise_distance(&cb, a, b, ProximityMeasureKind::L2).unwrap();
        assert!((d - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(pairwise_distance(&cb, a, c, ProximityMeasureKind::Cosine).unwrap(), 0.0);
    }

    #[test]
    fn cosine_rejects_zero_rows() {
        let cb = Codebook::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let err = pairwise_distance(&cb, TokenId(1), TokenId(0), ProximityMeasureKind::Cosine);
        assert!(matches!(err, Err(CodebookError::ZeroVector { token: 0 })));
        assert!(matches!(
            build_neighbor_index(&cb, 1, ProximityMeasureKind::Cosine),
            Err(CodebookError::ZeroVector { token: 0 })
        ));
    }

    #[test]
    fn random_measure_is_symmetric_and_keyed() {
        let cb = line_cb();
        let m = ProximityMeasureKind::Random { seed: 9 };
        let ab = pairwise_distance(&cb, TokenId(1), TokenId(3), m).unwrap();
        let ba = pairwise_distance(&cb, TokenId(3), TokenId(1), m).unwrap();
        assert_eq!(ab, ba);
        assert!(ab > 0.0 && ab <= 1.0);
        let other = pairwise_distance(&cb, TokenId(1), TokenId(3), ProximityMeasureKind::Random { seed: 10 })
            .unwrap();
        assert_ne!(ab, other);
        assert_eq!(pairwise_distance(&cb, TokenId(2), TokenId(2), m).unwrap(), 0.0);
    }

    #[test]
    fn k1_is_self_only() {
        let idx = build_neighbor_index(&line_cb(), 1, ProximityMeasureKind::L2).unwrap();
        for t in 0..4 {
            assert_eq!(idx.neighbors(TokenId(t)), &[TokenId(t)]);
        }
    }

    #[test]
    fn line_codebook_k2() {
        // pairwise |x - y| over {0,1,3,7}: nearest of 0 is 1 (1), of 3 is 1 (2), of 7 is 3 (4)
        let idx = build_neighbor_index(&line_cb(), 2, ProximityMeasureKind::L2).unwrap();
        assert_eq!(idx.neighbors(TokenId(0)), &[TokenId(0), TokenId(1)]);
        assert_eq!(idx.neighbors(TokenId(2)), &[TokenId(2), TokenId(1)]);
        assert_eq!(idx.neighbors(TokenId(3)), &[TokenId(3), TokenId(2)]);
        assert_eq!(idx.distances(TokenId(3)), &[0.0, 4.0]);
    }

    #[test]
    fn ties_break_to_lower_id_and_self_stays_first() {
        // token 1 is equidistant from 0 and 2; token 3 duplicates token 0
        let cb = Codebook::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![0.0]]).unwrap();
        let idx = build_neighbor_index(&cb, 3, ProximityMeasureKind::L2).unwrap();
        assert_eq!(idx.neighbors(TokenId(1)), &[TokenId(1), TokenId(0), TokenId(2)]);
        assert_eq!(idx.neighbors(TokenId(3)), &[TokenId(3), TokenId(0), TokenId(1)]);
    }

    #[test]
    fn k_too_large() {
        assert!(matches!(
            build_neighbor_index(&line_cb(), 5, ProximityMeasureKind::L2),
            Err(CodebookError::KTooLarge { k: 5, vocab: 4 })
        ));
    }

    #[test]
    fn binary_round_trip_and_header() {
        let cb = synthesize_codebook(5, 3, 1, false);
        let mut buf = Vec::new();
        cb.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"CDBK");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 3);
        assert_eq!(buf.len(), 16 + 5 * 3 * 4);
        assert_eq!(Codebook::read_binary(&buf[..]).unwrap(), cb);
    }

    #[test]
    fn binary_rejects_bad_input() {
        assert!(Codebook::read_binary(&b"CDB"[..]).is_err());
        let mut buf = Vec::new();
        synthesize_codebook(2, 2, 1, false).write_binary(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(Codebook::read_binary(&buf[..]).is_err());
        buf[0] = b'C';
        buf.pop();
        assert!(Codebook::read_binary(&buf[..]).is_err());
    }

    #[test]
    fn csv_loader() {
        let cb = Codebook::parse_csv("# two tokens\n1.0, 2.0\n\n-0.5,4\n").unwrap();
        assert_eq!(cb.vocab_size(), 2);
        assert_eq!(cb.row(1), &[-0.5, 4.0]);
        assert!(Codebook::parse_csv("1,2\n3\n").is_err());
        assert!(Codebook::parse_csv("1,x\n").is_err());
    }

    #[test]
    fn correlated_codebook_keeps_rows() {
        let plain = synthesize_codebook(32, 4, 3, false);
        let sorted = synthesize_codebook(32, 4, 3, true);
        let key = |cb: &Codebook| {
            let mut rows: Vec<Vec<u32>> = (0..32)
                .map(|t| cb.row(t).iter().map(|x| x.to_bits()).collect())
                .collect();
            rows.sort();
            rows
        };
        assert_eq!(key(&plain), key(&sorted));
    }

    #[test]
    fn uniform_neighbor_replacement() {
        let cb = line_cb();
        let idx1 = build_neighbor_index(&cb, 1, ProximityMeasureKind::L2).unwrap();
        let mut rng = rng_from_seed(4);
        for _ in 0..50 {
            assert_eq!(replace_with_uniform_neighbor(TokenId(2), &idx1, &mut rng), TokenId(2));
        }
        let idx2 = build_neighbor_index(&cb, 2, ProximityMeasureKind::L2).unwrap();
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| replace_with_uniform_neighbor(TokenId(0), &idx2, &mut rng) == TokenId(1))
            .count();
        assert!((hits as f64 / n as f64 - 0.5).abs() < 0.01);
        let idx3 = build_neighbor_index(&cb, 3, ProximityMeasureKind::L2).unwrap();
        for _ in 0..200 {
            let r = replace_with_uniform_neighbor(TokenId(3), &idx3, &mut rng);
            assert!(idx3.neighbors(TokenId(3)).contains(&r));
        }
    }
}

//! K-means codebook over embedding frames and frame-to-id quantization.
//!
//! Lloyd's iterations from seeded k-means++ initialization. The codebook is
//! immutable after training; audio-token ids are exactly 0..K-1 with id i
//! bound to centroid row i.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::fingerprint::fingerprint_bytes;
use crate::rng::rng_from;
use crate::synth_data::EmbeddingSequence;

/// K centroid vectors; defines audio-token ids 0..K-1.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub k: usize,
    pub dim: usize,
    /// Row-major K x dim.
    pub centroids: Vec<f32>,
    /// Hash of training config + data.
    pub train_fingerprint: u64,
}

impl Codebook {
    pub fn centroid(&self, id: usize) -> &[f32] {
        &self.centroids[id * self.dim..(id + 1) * self.dim]
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum()
}

/// Train a codebook with Lloyd's k-means.
///
/// Stops after `max_iters` or when the relative distortion decrease falls
/// below `rel_tol`. Empty clusters are re-seeded to the frame farthest from
/// its assigned centroid. Returns the codebook and the per-iteration mean
/// distortion trace, which is non-increasing.
pub fn train_codebook(
    frames: &Array2<f32>,
    k: usize,
    seed: u64,
    max_iters: usize,
    rel_tol: f64,
) -> Result<(Codebook, Vec<f64>)> {
    let n = frames.nrows();
    let dim = frames.ncols();
    if k == 0 {
        return Err(Error::Argument("k must be >= 1".into()));
    }
    if n < k {
        return Err(Error::Argument(format!(
            "need at least k={k} frames, got {n}"
        )));
    }
    if rel_tol < 0.0 {
        return Err(Error::Argument("rel_tol must be non-negative".into()));
    }
    if frames.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data("non-finite frame in k-means input".into()));
    }

    let row = |i: usize| frames.row(i).to_slice().expect("contiguous frames");

    // k-means++ seeding.
    let mut rng = rng_from(seed);
    let mut centroids: Vec<Vec<f32>> = Vec::with_capacity(k);
    centroids.push(row(rng.gen_range(0..n)).to_vec());
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all mass on existing centroids; any frame works
            rng.gen_range(0..n)
        } else {
            let mut dart = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                dart -= d;
                if dart <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        let c = row(next).to_vec();
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(row(i), &c));
        }
        centroids.push(c);
    }

    let mut assignments = vec![0usize; n];
    let mut trace = Vec::new();
    let mut prev_distortion = f64::INFINITY;

    for _iter in 0..max_iters {
        // assignment step (ties toward the lowest id)
        let mut total = 0.0f64;
        for i in 0..n {
            let f = row(i);
            let mut best = 0usize;
            let mut best_d = sq_dist(f, &centroids[0]);
            for (c, cent) in centroids.iter().enumerate().skip(1) {
                let d = sq_dist(f, cent);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assignments[i] = best;
            total += best_d;
        }
        let distortion = total / n as f64;
        trace.push(distortion);

        let rel_drop = if prev_distortion.is_finite() {
            (prev_distortion - distortion) / prev_distortion.max(f64::MIN_POSITIVE)
        } else {
            f64::INFINITY
        };
        let converged = rel_drop.abs() < rel_tol;
        prev_distortion = distortion;

        // update step
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i];
            counts[c] += 1;
            for (s, &x) in sums[c].iter_mut().zip(row(i)) {
                *s += x as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (out, s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *out = (*s / counts[c] as f64) as f32;
                }
            } else {
                // re-seed to the frame farthest from its assigned centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(row(a), &centroids[assignments[a]]);
                        let db = sq_dist(row(b), &centroids[assignments[b]]);
                        da.partial_cmp(&db).expect("finite distances")
                    })
                    .expect("nonempty frames");
                centroids[c] = row(far).to_vec();
            }
        }

        if converged {
            break;
        }
    }

    let flat: Vec<f32> = centroids.into_iter().flatten().collect();
    let mut fp_bytes = Vec::with_capacity(flat.len() * 4 + 32);
    fp_bytes.extend_from_slice(&(k as u64).to_le_bytes());
    fp_bytes.extend_from_slice(&(dim as u64).to_le_bytes());
    fp_bytes.extend_from_slice(&seed.to_le_bytes());
    fp_bytes.extend_from_slice(&(n as u64).to_le_bytes());
    for x in &flat {
        fp_bytes.extend_from_slice(&x.to_le_bytes());
    }
    let codebook = Codebook {
        k,
        dim,
        centroids: flat,
        train_fingerprint: fingerprint_bytes(&fp_bytes),
    };
    Ok((codebook, trace))
}

/// Nearest-centroid id per frame under squared Euclidean distance; ties break
/// toward the lowest id.
pub fn quantize(codebook: &Codebook, emb: &EmbeddingSequence) -> Result<Vec<u32>> {
    if emb.dim != codebook.dim {
        return Err(Error::Argument(format!(
            "embedding dim {} != codebook dim {}",
            emb.dim, codebook.dim
        )));
    }
    Ok(emb
        .frames()
        .map(|f| {
            let mut best = 0u32;
            let mut best_d = sq_dist(f, codebook.centroid(0));
            for c in 1..codebook.k {
                let d = sq_dist(f, codebook.centroid(c));
                if d < best_d {
                    best_d = d;
                    best = c as u32;
                }
            }
            best
        })
        .collect())
}

/// Mean over frames of squared distance to the nearest centroid.
pub fn distortion(codebook: &Codebook, frames: &Array2<f32>) -> Result<f64> {
    if frames.nrows() == 0 {
        return Err(Error::Argument("distortion of an empty frame set".into()));
    }
    if frames.ncols() != codebook.dim {
        return Err(Error::Argument(format!(
            "frames dim {} != codebook dim {}",
            frames.ncols(),
            codebook.dim
        )));
    }
    let mut total = 0.0f64;
    for i in 0..frames.nrows() {
        let f = frames.row(i);
        let f = f.to_slice().expect("contiguous frames");
        let mut best = sq_dist(f, codebook.centroid(0));
        for c in 1..codebook.k {
            best = best.min(sq_dist(f, codebook.centroid(c)));
        }
        total += best;
    }
    Ok(total / frames.nrows() as f64)
}

/// Collect all frames of a record set into one matrix.
pub fn collect_frames(records: &[crate::synth_data::UtteranceRecord]) -> Result<Array2<f32>> {
    if records.is_empty() {
        return Err(Error::Data("no records to collect frames from".into()));
    }
    let dim = records[0].embedding.dim;
    let total: usize = records.iter().map(|r| r.embedding.num_frames()).sum();
    let mut out = Array2::<f32>::zeros((total, dim));
    let mut row = 0;
    for r in records {
        for f in r.embedding.frames() {
            out.row_mut(row).iter_mut().zip(f).for_each(|(o, &x)| *o = x);
            row += 1;
        }
    }
    Ok(out)
}

const MAGIC: &[u8; 4] = b"KMC1";

/// Codebook file: "KMC1", K (u32 LE), dim (u32 LE), centroids row-major f32
/// LE, then the 8-byte training fingerprint.
pub fn write_codebook(path: &Path, cb: &Codebook) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + cb.centroids.len() * 4 + 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(cb.k as u32).to_le_bytes());
    buf.extend_from_slice(&(cb.dim as u32).to_le_bytes());
    for x in &cb.centroids {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf.extend_from_slice(&cb.train_fingerprint.to_le_bytes());
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_codebook(path: &Path) -> Result<Codebook> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..4] != MAGIC {
        return Err(Error::Data(format!("{}: not a KMC1 file", path.display())));
    }
    let k = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + k * dim * 4 + 8;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "{}: expected {expected} bytes, got {}",
            path.display(),
            bytes.len()
        )));
    }
    let centroids: Vec<f32> = bytes[12..12 + k * dim * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if centroids.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data(format!(
            "{}: non-finite centroid",
            path.display()
        )));
    }
    let train_fingerprint =
        u64::from_le_bytes(bytes[12 + k * dim * 4..].try_into().unwrap());
    Ok(Codebook {
        k,
        dim,
        centroids,
        train_fingerprint,
    })
}

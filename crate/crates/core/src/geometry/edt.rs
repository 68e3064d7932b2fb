use super::{BinaryMask, DistanceField};
use crate::error::{Error, Result};

/// Exact Euclidean distance from every foreground pixel to the nearest background pixel.
///
/// Two separable passes of the lower envelope of parabolas (columns, then rows)
/// give exact squared distances; background pixels are 0. A mask without any
/// background pixel has no defined distance and is rejected.
pub fn edt(mask: &BinaryMask) -> Result<DistanceField> {
    let (h, w) = (mask.height(), mask.width());
    if mask.bits().iter().all(|&b| b) {
        return Err(Error::NoBackground);
    }
    // Squared distances; None = no background site seen along this line yet.
    let mut sq: Vec<Option<f64>> = mask
        .bits()
        .iter()
        .map(|&fg| if fg { None } else { Some(0.0) })
        .collect();

    let mut line = Vec::with_capacity(h.max(w));
    let mut out = Vec::with_capacity(h.max(w));
    let mut env = Envelope::with_capacity(h.max(w));
    for x in 0..w {
        line.clear();
        line.extend((0..h).map(|y| sq[y * w + x]));
        env.transform(&line, &mut out);
        for y in 0..h {
            sq[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        line.clear();
        line.extend_from_slice(&sq[y * w..(y + 1) * w]);
        env.transform(&line, &mut out);
        sq[y * w..(y + 1) * w].copy_from_slice(&out);
    }

    let values = sq
        .into_iter()
        .map(|v| v.expect("some background exists, so every row resolves").sqrt())
        .collect();
    DistanceField::new(h, w, values)
}

/// 1-D squared distance transform `d(q) = min_p (q − p)² + f(p)` over finite sites.
struct Envelope {
    sites: Vec<usize>,
    bounds: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Self {
            sites: Vec::with_capacity(n),
            bounds: Vec::with_capacity(n + 1),
        }
    }

    fn transform(&mut self, f: &[Option<f64>], out: &mut Vec<Option<f64>>) {
        self.sites.clear();
        self.bounds.clear();
        let val = |p: usize| f[p].expect("only finite sites are enqueued");
        for (q, fq) in f.iter().enumerate() {
            let Some(fq) = *fq else { continue };
            loop {
                let Some(&v) = self.sites.last() else {
                    self.sites.push(q);
                    self.bounds.push(f64::NEG_INFINITY);
                    break;
                };
                let (qf, vf) = (q as f64, v as f64);
                let s = ((fq + qf * qf) - (val(v) + vf * vf)) / (2.0 * (qf - vf));
                if s <= *self.bounds.last().expect("parallel to sites") {
                    self.sites.pop();
                    self.bounds.pop();
                } else {
                    self.sites.push(q);
                    self.bounds.push(s);
                    break;
                }
            }
        }
        out.clear();
        if self.sites.is_empty() {
            out.resize(f.len(), None);
            return;
        }
        let mut k = 0;
        for q in 0..f.len() {
            let qf = q as f64;
            while k + 1 < self.sites.len() && self.bounds[k + 1] < qf {
                k += 1;
            }
            let p = self.sites[k];
            let d = qf - p as f64;
            out.push(Some(d * d + val(p)));
        }
    }
}

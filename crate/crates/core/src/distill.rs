//! Embedding distillation: match target tokens to lattice positions by the
//! Hungarian method on their log-probabilities, then pull the matched
//! student states toward the frozen teacher's states with a cosine loss.

use crate::assignment::{hungarian, CostMatrix};
use crate::ctc::LogProbLattice;
use crate::error::{Error, Result};

/// Stand-in for `-inf` entries of the Q matrix so the cost stays finite.
const LOG_PROB_FLOOR: f64 = -1e9;

/// One lattice position per target position; lattice positions distinct.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Matching {
    /// `(target position, lattice position)`, one pair per target position
    /// in target order.
    pub pairs: Vec<(usize, usize)>,
}

impl Matching {
    pub fn lattice_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.pairs.iter().map(|&(_, j)| j)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdConfig {
    /// Teacher layer to distill from; negative counts from the end.
    pub teacher_layer: i32,
    /// First step with the distillation term switched on.
    pub start_step: u64,
}

impl Default for EdConfig {
    fn default() -> Self {
        EdConfig {
            teacher_layer: -1,
            start_step: 0,
        }
    }
}

impl EdConfig {
    /// Resolves `teacher_layer` against a teacher with `depth` layers into an
    /// index `0..depth`.
    pub fn layer_index(&self, depth: usize) -> Result<usize> {
        let l = self.teacher_layer as i64;
        let idx = if l < 0 { depth as i64 + l } else { l - 1 };
        if l == 0 || idx < 0 || idx >= depth as i64 {
            return Err(Error::invalid(format!(
                "teacher layer {l} out of range for depth {depth}"
            )));
        }
        Ok(idx as usize)
    }
}

/// `Q[i][j] = log p(y_i at position j)`, shape `|y| × T`, row-major.
pub fn build_q_matrix(lattice: &LogProbLattice, y: &[u32]) -> Result<Vec<f64>> {
    let frames = lattice.frames();
    if y.len() > frames {
        return Err(Error::invalid(format!(
            "target length {} exceeds lattice length {frames}",
            y.len()
        )));
    }
    if let Some(&k) = y.iter().find(|&&k| k as usize >= lattice.vocab_size()) {
        return Err(Error::TokenOutOfRange {
            id: k,
            size: lattice.vocab_size(),
        });
    }
    let mut q = Vec::with_capacity(y.len() * frames);
    for &k in y {
        q.extend((0..frames).map(|t| lattice.get(t, k)));
    }
    Ok(q)
}

/// Matching that maximizes the summed Q entries.
pub fn align_targets(q: &[f64], targets: usize, frames: usize) -> Result<Matching> {
    if q.len() != targets * frames {
        return Err(Error::Shape(format!(
            "Q has {} entries, expected {targets}x{frames}",
            q.len()
        )));
    }
    let cost = q
        .iter()
        .map(|&v| {
            if v.is_nan() {
                v
            } else {
                -v.max(LOG_PROB_FLOOR)
            }
        })
        .collect();
    let a = hungarian(&CostMatrix::new(targets, frames, cost)?);
    Ok(Matching {
        pairs: a.cols.into_iter().enumerate().collect(),
    })
}

#[derive(Clone, Debug)]
pub struct EdLoss {
    pub loss: f64,
    /// Gradient with respect to the student states, `T × d`; zero outside
    /// matched rows.
    pub grad: Vec<f64>,
}

/// Mean of `1 − cos(student[σ(i)], teacher[i])` over target positions.
/// `student` is `T × dim` and `teacher` is `|y| × dim`, both row-major.
/// Teacher states are constants.
pub fn ed_loss(student: &[f64], teacher: &[f64], dim: usize, m: &Matching) -> Result<EdLoss> {
    if dim == 0 || student.len() % dim != 0 || teacher.len() % dim != 0 {
        return Err(Error::Shape(format!(
            "states are not multiples of dimension {dim}"
        )));
    }
    let frames = student.len() / dim;
    let targets = teacher.len() / dim;
    if m.pairs.len() != targets || targets == 0 {
        return Err(Error::Shape(format!(
            "{} matched pairs for {targets} teacher states",
            m.pairs.len()
        )));
    }
    let n = targets as f64;
    let mut grad = vec![0.0; student.len()];
    let mut loss = 0.0;
    for (k, &(i, j)) in m.pairs.iter().enumerate() {
        if i != k || j >= frames {
            return Err(Error::invalid(format!(
                "malformed matching pair ({i}, {j})"
            )));
        }
        let a = &student[j * dim..(j + 1) * dim];
        let b = &teacher[i * dim..(i + 1) * dim];
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na <= 1e-12 {
            return Err(Error::ZeroNorm(j));
        }
        if nb <= 1e-12 {
            return Err(Error::invalid(format!("teacher state {i} has zero norm")));
        }
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
        loss += 1.0 - cos;
        let g = &mut grad[j * dim..(j + 1) * dim];
        for ((gv, &av), &bv) in g.iter_mut().zip(a).zip(b) {
            *gv -= (bv / (na * nb) - cos * av / (na * na)) / n;
        }
    }
    let pairs = m.pairs.len();
    let mut seen: Vec<usize> = m.lattice_positions().collect();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != pairs {
        return Err(Error::invalid("matching reuses a lattice position"));
    }
    Ok(EdLoss {
        loss: loss / n,
        grad,
    })
}

/// `L = L_ctc + λ·L_ed`.
pub fn combined_loss(ctc: f64, ed: f64, lambda: u8) -> f64 {
    ctc + f64::from(lambda) * ed
}

/// Binary schedule: 0 before `start_step`, 1 from then on.
pub fn lambda_schedule(step: u64, start_step: u64) -> u8 {
    u8::from(step >= start_step)
}

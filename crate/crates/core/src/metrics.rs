//! Evaluation metrics over labeled pixels: confusion matrix, overall
//! accuracy, average accuracy, and the kappa coefficient.
//!
//! All three scores are derived from one K x K confusion matrix with
//! truth on rows and prediction on columns. Kappa discounts agreement
//! obtainable by chance from the marginals: `(p_o - p_e) / (1 - p_e)`
//! with `p_e` the dot product of row and column marginals. Average
//! accuracy means over classes that actually appear in the evaluation
//! set; absent classes are dropped, not counted as zero.

use crate::error::{Error, Result};
use crate::grid::LabelGrid;

/// K x K truth-by-prediction counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    k: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 || k > 255 {
            return Err(Error::Label(format!("class count {k} must lie in 1..=255")));
        }
        Ok(Self { k, counts: vec![0; k * k] })
    }

    /// Build directly from counts, rows = truth.
    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        let mut c = Self::new(k)?;
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Shape(format!(
                    "confusion row {i} has {} entries, expected {k}",
                    row.len()
                )));
            }
            c.counts[i * k..(i + 1) * k].copy_from_slice(row);
        }
        Ok(c)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth * self.k..(truth + 1) * self.k].iter().sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.k).map(|i| self.counts[i * self.k + pred]).sum()
    }

    /// Accumulate another confusion matrix of the same class count.
    pub fn merge(&mut self, other: &Confusion) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Shape(format!(
                "cannot merge {}-class confusion into {}-class",
                other.k, self.k
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn require_total(&self) -> Result<f64> {
        let t = self.total();
        if t == 0 {
            return Err(Error::EmptyEval("no pixels were evaluated".into()));
        }
        Ok(t as f64)
    }
}

/// Accumulate prediction-vs-truth counts over labeled pixels, optionally
/// restricted further by a row-major boolean mask. The mask may only
/// select labeled pixels.
pub fn confusion(
    pred: &LabelGrid,
    truth: &LabelGrid,
    k: usize,
    eval_mask: Option<&[bool]>,
) -> Result<Confusion> {
    if pred.height() != truth.height() || pred.width() != truth.width() {
        return Err(Error::Shape(format!(
            "prediction {}x{} does not match truth {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    let n = truth.height() * truth.width();
    if let Some(m) = eval_mask {
        if m.len() != n {
            return Err(Error::Shape(format!(
                "evaluation mask has {} entries for {n} pixels",
                m.len()
            )));
        }
    }
    let mut c = Confusion::new(k)?;
    for i in 0..n {
        let t = usize::from(truth.data()[i]);
        let selected = eval_mask.is_none_or(|m| m[i]);
        if t == 0 {
            if selected && eval_mask.is_some() {
                return Err(Error::Label(format!(
                    "evaluation mask selects unlabeled pixel {i}"
                )));
            }
            continue;
        }
        if !selected {
            continue;
        }
        if t > k {
            return Err(Error::Label(format!("truth label {t} exceeds class count {k}")));
        }
        let p = usize::from(pred.data()[i]);
        if p == 0 || p > k {
            return Err(Error::Label(format!(
                "prediction {p} at evaluated pixel {i} lies outside 1..={k}"
            )));
        }
        c.counts[(t - 1) * k + (p - 1)] += 1;
    }
    Ok(c)
}

/// Overall accuracy: correctly labeled fraction of evaluated pixels.
pub fn oa(c: &Confusion) -> Result<f64> {
    let total = c.require_total()?;
    let diag: u64 = (0..c.k).map(|i| c.count(i, i)).sum();
    Ok(diag as f64 / total)
}

/// Per-class recall, `None` for classes absent from the evaluation set.
pub fn per_class_accuracy(c: &Confusion) -> Result<Vec<Option<f64>>> {
    c.require_total()?;
    Ok((0..c.k)
        .map(|i| {
            let row = c.row_sum(i);
            (row > 0).then(|| c.count(i, i) as f64 / row as f64)
        })
        .collect())
}

/// Average accuracy: mean per-class recall over classes that appear.
pub fn aa(c: &Confusion) -> Result<f64> {
    let per = per_class_accuracy(c)?;
    let present: Vec<f64> = per.into_iter().flatten().collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Kappa coefficient `(p_o - p_e) / (1 - p_e)`. In the degenerate case
/// `p_e = 1` (all marginal mass on one class) it is 1 for perfect
/// agreement and 0 otherwise.
pub fn kappa(c: &Confusion) -> Result<f64> {
    let total = c.require_total()?;
    let p_o = oa(c)?;
    let p_e: f64 = (0..c.k)
        .map(|i| c.row_sum(i) as f64 * c.col_sum(i) as f64)
        .sum::<f64>()
        / (total * total);
    if (1.0 - p_e).abs() < 1e-15 {
        return Ok(if (1.0 - p_o).abs() < 1e-15 { 1.0 } else { 0.0 });
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Render all scores as one JSON object with 6-decimal fixed formatting:
/// `{"oa":…,"aa":…,"kappa":…,"per_class":[…],"confusion":[[…]]}`.
/// Absent classes appear as `null` in `per_class`.
pub fn metrics_json(c: &Confusion) -> Result<String> {
    let oa_v = oa(c)?;
    let aa_v = aa(c)?;
    let kappa_v = kappa(c)?;
    let per = per_class_accuracy(c)?;
    let mut s = String::new();
    s.push_str(&format!("{{\"oa\":{oa_v:.6},\"aa\":{aa_v:.6},\"kappa\":{kappa_v:.6}"));
    s.push_str(",\"per_class\":[");
    for (i, p) in per.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        match p {
            Some(v) => s.push_str(&format!("{v:.6}")),
            None => s.push_str("null"),
        }
    }
    s.push_str("],\"confusion\":[");
    for i in 0..c.k {
        if i > 0 {
            s.push(',');
        }
        s.push('[');
        for j in 0..c.k {
            if j > 0 {
                s.push(',');
            }
            s.push_str(&c.count(i, j).to_string());
        }
        s.push(']');
    }
    s.push_str("]}");
    Ok(s)
}

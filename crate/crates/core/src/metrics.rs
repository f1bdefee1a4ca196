//! Batch-separation and embedding-quality metrics.
//!
//! W2 between embedding sets uses the Gaussian (Bures) closed form on fitted
//! moments. Reports carry a footer saying so.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::encoder::{forward, EncoderParams};
use crate::error::{Error, Result};
use crate::manifold::PatchDataset;

/// Added to both covariances before taking matrix square roots.
pub const COVARIANCE_RIDGE: f64 = 1e-8;
pub const REPORT_FOOTER: &str =
    "# W2: Gaussian (Bures) closed form on fitted moments\n# CFD: not implemented (external definition)\n";

const EIGEN_EPS: f64 = 1e-14;
const EIGEN_MAX_ITER: usize = 10_000;
const EXPORT_CHUNK: usize = 64;

/// Embedding rows tagged with a batch id and optional class label.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    rows: Vec<Vec<f64>>,
    batch_ids: Vec<String>,
    labels: Vec<Option<String>>,
}

impl EmbeddingSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn push(&mut self, row: Vec<f64>, batch_id: &str, label: Option<&str>) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::dims(self.dim, row.len()));
        }
        if let Some(i) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding component {i}")));
        }
        self.rows.push(row);
        self.batch_ids.push(batch_id.to_owned());
        self.labels.push(label.map(str::to_owned));
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn batch_ids(&self) -> &[String] {
        &self.batch_ids
    }

    pub fn labels(&self) -> &[Option<String>] {
        &self.labels
    }

    /// Distinct batch ids in sorted order.
    pub fn batches(&self) -> Vec<String> {
        let mut b: Vec<String> = self.batch_ids.clone();
        b.sort();
        b.dedup();
        b
    }

    fn select(&self, batch: &str, label: Option<&str>) -> Vec<&[f64]> {
        self.rows
            .iter()
            .zip(&self.batch_ids)
            .zip(&self.labels)
            .filter(|((_, b), l)| b.as_str() == batch && (label.is_none() || l.as_deref() == label))
            .map(|((r, _), _)| r.as_slice())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub count: usize,
}

/// Sample mean and unbiased covariance, symmetrized.
pub fn fit_gaussian<R: AsRef<[f64]>>(rows: &[R]) -> Result<GaussianSummary> {
    if rows.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "Gaussian fit needs at least 2 rows, got {}",
            rows.len()
        )));
    }
    let d = rows[0].as_ref().len();
    let n = rows.len();
    let mut mean = DVector::zeros(d);
    for r in rows {
        let r = r.as_ref();
        if r.len() != d {
            return Err(Error::dims(d, r.len()));
        }
        mean += DVector::from_column_slice(r);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        let c = DVector::from_column_slice(r.as_ref()) - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianSummary {
        mean,
        covariance: cov,
        count: n,
    })
}

fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, EIGEN_EPS, EIGEN_MAX_ITER)
        .ok_or_else(|| Error::Numeric("eigendecomposition did not converge".into()))?;
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// Gaussian 2-Wasserstein distance.
pub fn w2_gaussian(g1: &GaussianSummary, g2: &GaussianSummary) -> Result<f64> {
    let d = g1.mean.len();
    if g2.mean.len() != d {
        return Err(Error::dims(d, g2.mean.len()));
    }
    let ridge = DMatrix::identity(d, d) * COVARIANCE_RIDGE;
    let s1 = &g1.covariance + &ridge;
    let s2 = &g2.covariance + &ridge;
    let r2 = sqrtm_psd(&s2)?;
    let cross = sqrtm_psd(&(&r2 * &s1 * &r2))?;
    let mean_term = (&g1.mean - &g2.mean).norm_squared();
    let bures = s1.trace() + s2.trace() - 2.0 * cross.trace();
    let w2sq = mean_term + bures.max(0.0);
    if !w2sq.is_finite() {
        return Err(Error::NonFinite("W2 distance".into()));
    }
    Ok(w2sq.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparationReport {
    pub batches: [String; 2],
    /// Per-class W2, sorted by class.
    pub per_class: Vec<(String, f64)>,
    pub overall: f64,
}

impl SeparationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,w2\n");
        for (c, w) in &self.per_class {
            s.push_str(&format!("{c},{w}\n"));
        }
        s.push_str(&format!("overall,{}\n", self.overall));
        s.push_str(REPORT_FOOTER);
        s
    }
}

/// W2 between the two batches, overall and per class present in both.
pub fn batch_separation_report(set: &EmbeddingSet) -> Result<SeparationReport> {
    let batches = set.batches();
    if batches.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "separation report needs exactly 2 batch ids, found {}: {batches:?}",
            batches.len()
        )));
    }
    let fit = |batch: &str, label: Option<&str>| -> Result<GaussianSummary> {
        let rows = set.select(batch, label);
        if rows.len() < 2 {
            let what = label.map_or(String::new(), |l| format!(" class `{l}`"));
            return Err(Error::InvalidArgument(format!(
                "batch `{batch}`{what} has {} row(s), need at least 2",
                rows.len()
            )));
        }
        fit_gaussian(&rows)
    };
    let overall = w2_gaussian(&fit(&batches[0], None)?, &fit(&batches[1], None)?)?;

    let mut classes: BTreeMap<&str, [bool; 2]> = BTreeMap::new();
    for (b, l) in set.batch_ids.iter().zip(&set.labels) {
        if let Some(l) = l {
            classes.entry(l).or_default()[usize::from(*b == batches[1])] = true;
        }
    }
    let mut per_class = Vec::new();
    for (class, seen) in classes {
        if seen != [true, true] {
            log::warn!("class `{class}` appears in only one batch; skipped");
            continue;
        }
        let w = w2_gaussian(&fit(&batches[0], Some(class))?, &fit(&batches[1], Some(class))?)?;
        per_class.push((class.to_owned(), w));
    }
    let [b0, b1]: [String; 2] = batches.try_into().expect("two batches");
    Ok(SeparationReport {
        batches: [b0, b1],
        per_class,
        overall,
    })
}

/// Mean cosine similarity over pairs.
pub fn alignment_score<A: AsRef<[f64]>, B: AsRef<[f64]>>(pairs: &[(A, B)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("alignment score needs at least one pair".into()));
    }
    let mut total = 0.0;
    for (i, (a, b)) in pairs.iter().enumerate() {
        let (a, b) = (a.as_ref(), b.as_ref());
        if a.len() != b.len() {
            return Err(Error::dims(a.len(), b.len()));
        }
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::InvalidArgument(format!("pair {i} has a zero-norm vector")));
        }
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        total += (dot / (na * nb)).clamp(-1.0, 1.0);
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 500, lr: 0.5 }
    }
}

/// Multinomial logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub classes: Vec<String>,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    /// Row-major, one row of `dim` weights per class.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeEval {
    pub accuracy: f64,
    /// (class, accuracy, support), sorted by class.
    pub per_class: Vec<(String, f64, usize)>,
}

impl ProbeEval {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,accuracy\n");
        for (c, a, _) in &self.per_class {
            s.push_str(&format!("{c},{a}\n"));
        }
        s.push_str(&format!("overall,{}\n", self.accuracy));
        s
    }
}

impl LinearProbe {
    fn dim(&self) -> usize {
        self.feature_mean.len()
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let z: Vec<f64> = x
            .iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        (0..self.classes.len())
            .map(|k| {
                self.bias[k]
                    + self.weights[k * d..(k + 1) * d]
                        .iter()
                        .zip(&z)
                        .map(|(w, v)| w * v)
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> Result<&str> {
        if x.len() != self.dim() {
            return Err(Error::dims(self.dim(), x.len()));
        }
        let logits = self.logits(x);
        // First maximum wins ties.
        let best = logits
            .iter()
            .enumerate()
            .fold(0, |b, (i, v)| if *v > logits[b] { i } else { b });
        Ok(&self.classes[best])
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}

pub fn linear_probe_train<R: AsRef<[f64]>, L: AsRef<str>>(
    rows: &[R],
    labels: &[L],
    cfg: &ProbeConfig,
) -> Result<LinearProbe> {
    if rows.len() != labels.len() {
        return Err(Error::dims(rows.len(), labels.len()));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("probe lr must be positive, got {}", cfg.lr)));
    }
    let mut classes: Vec<String> = labels.iter().map(|l| l.as_ref().to_owned()).collect();
    classes.sort();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "probe training needs at least 2 classes, found {}",
            classes.len()
        )));
    }
    let d = rows[0].as_ref().len();
    let n = rows.len();
    let k = classes.len();
    let mut mean = vec![0.0; d];
    for r in rows {
        let r = r.as_ref();
        if r.len() != d {
            return Err(Error::dims(d, r.len()));
        }
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n as f64);
    }
    let mut scale = vec![0.0; d];
    for r in rows {
        scale
            .iter_mut()
            .zip(r.as_ref())
            .zip(&mean)
            .for_each(|((s, v), m)| *s += (v - m) * (v - m) / n as f64);
    }
    // Constant features keep unit scale and stay at zero after centering.
    scale.iter_mut().for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });

    let targets: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search_by(|c| c.as_str().cmp(l.as_ref())).expect("class listed"))
        .collect();
    let mut probe = LinearProbe {
        classes,
        feature_mean: mean,
        feature_scale: scale,
        weights: vec![0.0; k * d],
        bias: vec![0.0; k],
    };
    let xs: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            r.as_ref()
                .iter()
                .zip(&probe.feature_mean)
                .zip(&probe.feature_scale)
                .map(|((v, m), s)| (v - m) / s)
                .collect()
        })
        .collect();
    for _ in 0..cfg.epochs {
        let mut gw = vec![0.0; k * d];
        let mut gb = vec![0.0; k];
        for (x, &t) in xs.iter().zip(&targets) {
            let mut p: Vec<f64> = (0..k)
                .map(|c| {
                    probe.bias[c]
                        + probe.weights[c * d..(c + 1) * d]
                            .iter()
                            .zip(x)
                            .map(|(w, v)| w * v)
                            .sum::<f64>()
                })
                .collect();
            softmax_in_place(&mut p);
            p[t] -= 1.0;
            for c in 0..k {
                gb[c] += p[c];
                gw[c * d..(c + 1) * d]
                    .iter_mut()
                    .zip(x)
                    .for_each(|(g, v)| *g += p[c] * v);
            }
        }
        let step = cfg.lr / n as f64;
        probe.weights.iter_mut().zip(&gw).for_each(|(w, g)| *w -= step * g);
        probe.bias.iter_mut().zip(&gb).for_each(|(b, g)| *b -= step * g);
    }
    if probe.weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite("probe weights".into()));
    }
    Ok(probe)
}

/// Overall and per-class accuracy. Labels unseen in training count as misses.
pub fn linear_probe_eval<R: AsRef<[f64]>, L: AsRef<str>>(
    probe: &LinearProbe,
    rows: &[R],
    labels: &[L],
) -> Result<ProbeEval> {
    if rows.len() != labels.len() {
        return Err(Error::dims(rows.len(), labels.len()));
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument("probe evaluation set is empty".into()));
    }
    let mut tally: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (r, l) in rows.iter().zip(labels) {
        let hit = probe.predict(r.as_ref())? == l.as_ref();
        let e = tally.entry(l.as_ref()).or_default();
        e.0 += hit as usize;
        e.1 += 1;
        correct += hit as usize;
    }
    Ok(ProbeEval {
        accuracy: correct as f64 / rows.len() as f64,
        per_class: tally
            .into_iter()
            .map(|(c, (h, n))| (c.to_owned(), h as f64 / n as f64, n))
            .collect(),
    })
}

/// Embeds every dataset and tags rows with its batch id.
pub fn embed_datasets(params: &EncoderParams, batches: &[(&str, &PatchDataset)]) -> Result<(Vec<String>, EmbeddingSet)> {
    let mut ids = Vec::new();
    let mut set = EmbeddingSet::new(params.config().output_dim());
    for (batch_id, ds) in batches {
        for chunk in ds.items().chunks(EXPORT_CHUNK) {
            let patches: Vec<_> = chunk.iter().map(|it| it.patch.clone()).collect();
            let emb = forward(params, &patches)?;
            for (i, it) in chunk.iter().enumerate() {
                set.push(emb.row(i).to_vec(), batch_id, it.label.as_deref())?;
                ids.push(it.id.clone());
            }
        }
    }
    Ok((ids, set))
}

pub fn write_embeddings_csv(path: &Path, ids: &[String], set: &EmbeddingSet) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut out = std::io::BufWriter::new(File::create(path).map_err(io)?);
    let mut header = String::from("identifier,batch_id,label");
    for j in 1..=set.dim() {
        header.push_str(&format!(",v{j}"));
    }
    writeln!(out, "{header}").map_err(io)?;
    for (i, row) in set.rows().iter().enumerate() {
        let mut line = format!(
            "{},{},{}",
            ids[i],
            set.batch_ids()[i],
            set.labels()[i].as_deref().unwrap_or("")
        );
        for v in row {
            line.push_str(&format!(",{v}"));
        }
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Writes `identifier,batch_id,label,v1..v_dim` rows in dataset order.
pub fn export_embeddings(
    params: &EncoderParams,
    batches: &[(&str, &PatchDataset)],
    path: &Path,
) -> Result<usize> {
    let (ids, set) = embed_datasets(params, batches)?;
    write_embeddings_csv(path, &ids, &set)?;
    Ok(set.len())
}

/// Reads an embedding CSV back. Empty labels become `None`.
pub fn read_embeddings_csv(path: &Path) -> Result<(Vec<String>, EmbeddingSet)> {
    let csv_err = |message: String| Error::Csv {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(e.to_string()))?;
    let header = reader.headers().map_err(|e| csv_err(e.to_string()))?.clone();
    if header.len() < 3 || &header[0] != "identifier" || &header[1] != "batch_id" || &header[2] != "label" {
        return Err(csv_err("header must start with identifier,batch_id,label".into()));
    }
    let dim = header.len() - 3;
    let mut ids = Vec::new();
    let mut set = EmbeddingSet::new(dim);
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(e.to_string()))?;
        let row = rec
            .iter()
            .skip(3)
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| csv_err(format!("row {}: {e}", line + 2)))?;
        let label = (!rec[2].is_empty()).then_some(&rec[2]);
        set.push(row, &rec[1], label)?;
        ids.push(rec[0].to_owned());
    }
    Ok((ids, set))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gauss1(mean: f64, var: f64) -> GaussianSummary {
        GaussianSummary {
            mean: DVector::from_element(1, mean),
            covariance: DMatrix::from_element(1, 1, var),
            count: 100,
        }
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect()
    }

    #[test]
    fn fit_gaussian_hand_example() {
        let g = fit_gaussian(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(g.mean.as_slice(), &[1.0, 0.0]);
        assert_eq!(g.covariance, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
        let same = fit_gaussian(&vec![vec![1.0, 2.0]; 3]).unwrap();
        assert!(same.covariance.iter().all(|v| *v == 0.0));
        assert!(fit_gaussian(&[vec![1.0]]).is_err());
    }

    #[test]
    fn fit_gaussian_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows = random_rows(&mut rng, 9, 3);
        let mut rev = rows.clone();
        rev.reverse();
        let (a, b) = (fit_gaussian(&rows).unwrap(), fit_gaussian(&rev).unwrap());
        assert!((a.mean - b.mean).amax() < 1e-14);
        assert!((a.covariance - b.covariance).amax() < 1e-14);
    }

    #[test]
    fn w2_one_dimensional_closed_form() {
        assert_abs_diff_eq!(w2_gaussian(&gauss1(0.0, 1.0), &gauss1(3.0, 1.0)).unwrap(), 3.0, epsilon = 1e-9);
        // sqrt((mu1-mu2)^2 + (sigma1-sigma2)^2)
        let w = w2_gaussian(&gauss1(1.0, 4.0), &gauss1(-1.0, 9.0)).unwrap();
        assert_abs_diff_eq!(w, 5f64.sqrt(), epsilon = 1e-7);
        assert_eq!(w2_gaussian(&gauss1(2.0, 3.0), &gauss1(2.0, 3.0)).unwrap(), 0.0);
    }

    /// W2 between two 1-D empirical samples of equal size via sorted coupling,
    /// which is the optimal transport plan on the line.
    fn empirical_w2_1d(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        (a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
    }

    #[test]
    fn w2_mean_shift_matches_coupling_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a: Vec<f64> = (0..400).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 1.7).collect();
        let oracle = empirical_w2_1d(a.clone(), b.clone());
        let rows = |v: &[f64]| v.iter().map(|x| vec![*x]).collect::<Vec<_>>();
        let w = w2_gaussian(&fit_gaussian(&rows(&a)).unwrap(), &fit_gaussian(&rows(&b)).unwrap()).unwrap();
        assert_abs_diff_eq!(oracle, 1.7, epsilon = 1e-12);
        assert_abs_diff_eq!(w, oracle, epsilon = 1e-6);
    }

    #[test]
    fn w2_dimension_mismatch() {
        let g2 = fit_gaussian(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(w2_gaussian(&gauss1(0.0, 1.0), &g2), Err(Error::Dimensions { .. })));
    }

    fn rotation(theta: f64, phi: f64) -> DMatrix<f64> {
        let (c, s) = (theta.cos(), theta.sin());
        let (c2, s2) = (phi.cos(), phi.sin());
        let r1 = DMatrix::from_row_slice(3, 3, &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]);
        let r2 = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, c2, -s2, 0.0, s2, c2]);
        r1 * r2
    }

    #[test]
    fn w2_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_rows(&mut rng, 30, 3);
        let b: Vec<Vec<f64>> = random_rows(&mut rng, 30, 3)
            .into_iter()
            .map(|r| vec![2.0 * r[0] + 1.0, r[1] - 0.5, 0.3 * r[2]])
            .collect();
        let rot = rotation(0.7, -1.1);
        let apply = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| (&rot * DVector::from_column_slice(r)).as_slice().to_vec())
                .collect()
        };
        let w = w2_gaussian(&fit_gaussian(&a).unwrap(), &fit_gaussian(&b).unwrap()).unwrap();
        let wr = w2_gaussian(&fit_gaussian(&apply(&a)).unwrap(), &fit_gaussian(&apply(&b)).unwrap()).unwrap();
        assert_abs_diff_eq!(w, wr, epsilon = 1e-8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn w2_symmetric_and_triangle(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g: Vec<_> = (0..3)
                .map(|k| {
                    let rows: Vec<Vec<f64>> = random_rows(&mut rng, 12, 2)
                        .into_iter()
                        .map(|r| vec![r[0] * (1.0 + k as f64) + k as f64, r[1] - r[0] * 0.5])
                        .collect();
                    fit_gaussian(&rows).unwrap()
                })
                .collect();
            let w01 = w2_gaussian(&g[0], &g[1]).unwrap();
            prop_assert!((w01 - w2_gaussian(&g[1], &g[0]).unwrap()).abs() < 1e-9);
            let w12 = w2_gaussian(&g[1], &g[2]).unwrap();
            let w02 = w2_gaussian(&g[0], &g[2]).unwrap();
            prop_assert!(w02 <= w01 + w12 + 1e-9);
            prop_assert!(w2_gaussian(&g[2], &g[2]).unwrap() < 1e-6);
        }
    }

    fn two_batch_set(offset: f64) -> EmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows = random_rows(&mut rng, 20, 4);
        let mut set = EmbeddingSet::new(4);
        for (i, r) in rows.iter().enumerate() {
            let label = if i % 2 == 0 { "a" } else { "b" };
            set.push(r.clone(), "one", Some(label)).unwrap();
            set.push(r.iter().map(|v| v + offset).collect(), "two", Some(label)).unwrap();
        }
        set
    }

    #[test]
    fn separation_report_duplicate_and_offset() {
        let rep = batch_separation_report(&two_batch_set(0.0)).unwrap();
        assert_eq!(rep.per_class.len(), 2);
        assert!(rep.overall < 1e-6);
        assert!(rep.per_class.iter().all(|(_, w)| *w < 1e-6));
        let rep = batch_separation_report(&two_batch_set(0.5)).unwrap();
        assert_abs_diff_eq!(rep.overall, 1.0, epsilon = 1e-6);
        let csv = rep.to_csv();
        assert!(csv.starts_with("class,w2\na,"));
        assert!(csv.contains("CFD: not implemented"));
    }

    #[test]
    fn separation_report_group_errors() {
        let mut set = two_batch_set(0.0);
        set.push(vec![0.0; 4], "three", None).unwrap();
        assert!(batch_separation_report(&set).unwrap_err().to_string().contains("exactly 2"));

        let mut single = EmbeddingSet::new(1);
        for (v, b, l) in [(0.0, "x", "a"), (1.0, "x", "a"), (0.0, "y", "a"), (1.0, "y", "b"), (2.0, "y", "a")] {
            single.push(vec![v], b, Some(l)).unwrap();
        }
        // class b exists only in batch y and is skipped
        assert_eq!(batch_separation_report(&single).unwrap().per_class.len(), 1);
        single.push(vec![3.0], "x", Some("b")).unwrap();
        assert!(batch_separation_report(&single).is_err());
    }

    #[test]
    fn alignment_examples() {
        let same = vec![(vec![1.0, 2.0], vec![1.0, 2.0]); 3];
        assert_abs_diff_eq!(alignment_score(&same).unwrap(), 1.0, epsilon = 1e-15);
        let orth = vec![(vec![1.0, 0.0], vec![0.0, 3.0]); 2];
        assert_eq!(alignment_score(&orth).unwrap(), 0.0);
        let mixed: Vec<_> = same.iter().take(2).cloned().chain(orth.iter().map(|(a, b)| (a.clone(), b.clone()))).collect();
        assert_abs_diff_eq!(alignment_score(&mixed).unwrap(), 0.5, epsilon = 1e-15);
        assert!(alignment_score(&[(vec![0.0, 0.0], vec![1.0, 0.0])]).is_err());
        assert!(alignment_score::<Vec<f64>, Vec<f64>>(&[]).is_err());
    }

    /// Best training accuracy of any threshold on a 1-D projection.
    fn best_threshold_accuracy(proj: &[f64], labels: &[&str]) -> f64 {
        let mut best: f64 = 0.0;
        for t in proj {
            for flip in [false, true] {
                let hits = proj
                    .iter()
                    .zip(labels)
                    .filter(|(p, l)| ((**p > *t) ^ flip) == (**l == "1"))
                    .count();
                best = best.max(hits as f64 / proj.len() as f64);
            }
        }
        best
    }

    #[test]
    fn probe_separable_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut rows = random_rows(&mut rng, 80, 3);
        let labels: Vec<&str> = (0..80).map(|i| if i % 2 == 0 { "0" } else { "1" }).collect();
        for (r, l) in rows.iter_mut().zip(&labels) {
            r[0] = r[0] * 0.2 + if *l == "1" { 2.0 } else { -2.0 };
        }
        let proj: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        assert_eq!(best_threshold_accuracy(&proj, &labels), 1.0);
        let probe = linear_probe_train(&rows, &labels, &ProbeConfig::default()).unwrap();
        let ev = linear_probe_eval(&probe, &rows, &labels).unwrap();
        assert!(ev.accuracy >= 0.99, "{ev:?}");
        assert_eq!(ev.per_class.len(), 2);
        let again = linear_probe_train(&rows, &labels, &ProbeConfig::default()).unwrap();
        assert_eq!(probe, again);
        assert!(ev.to_csv().starts_with("class,accuracy\n0,"));
    }

    #[test]
    fn probe_permuted_labels_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let train = random_rows(&mut rng, 200, 4);
        let test = random_rows(&mut rng, 400, 4);
        let lab = |n: usize, rng: &mut ChaCha8Rng| -> Vec<String> {
            (0..n).map(|_| rng.random_range(0..2u8).to_string()).collect()
        };
        let tl = lab(200, &mut rng);
        let el = lab(400, &mut rng);
        let probe = linear_probe_train(&train, &tl, &ProbeConfig::default()).unwrap();
        let acc = linear_probe_eval(&probe, &test, &el).unwrap().accuracy;
        assert!((acc - 0.5).abs() <= 0.1, "{acc}");
    }

    #[test]
    fn probe_errors() {
        let rows = vec![vec![0.0], vec![1.0]];
        assert!(linear_probe_train(&rows, &["a", "a"], &ProbeConfig::default()).is_err());
        let probe = linear_probe_train(&rows, &["a", "b"], &ProbeConfig::default()).unwrap();
        assert!(matches!(
            linear_probe_eval(&probe, &[vec![0.0, 1.0]], &["a"]),
            Err(Error::Dimensions { .. })
        ));
    }

    #[test]
    fn embedding_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        let set = two_batch_set(0.25);
        let ids: Vec<String> = (0..set.len()).map(|i| format!("p{i}.png")).collect();
        write_embeddings_csv(&p, &ids, &set).unwrap();
        let (ids2, set2) = read_embeddings_csv(&p).unwrap();
        assert_eq!((ids2, set2), (ids, set));

        write_embeddings_csv(&p, &[], &EmbeddingSet::new(2)).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "identifier,batch_id,label,v1,v2\n");
    }
}

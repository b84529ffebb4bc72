//! Independent component decomposition of the cross-section matrix.
//!
//! X is centered, whitened through a truncated eigendecomposition of its
//! covariance, and unmixed by symmetric fixed-point iteration with the tanh
//! contrast. The mixing matrix A holds one phenotype per column (loadings
//! over variables); the expression matrix S = W V (X − μ) holds per-instance
//! expression levels, one component per row.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::cross_section::{CrossSectionMatrix, Instance, VarKind, VariableCatalog};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct IcaOptions {
    pub rank: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
    /// Rescale rows to unit variance before whitening (off by default; labs
    /// and intensities then contribute on their natural scales).
    pub standardize: bool,
}

impl IcaOptions {
    pub fn new(rank: usize, seed: u64) -> IcaOptions {
        IcaOptions {
            rank,
            seed,
            tol: 1e-4,
            max_iter: 500,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceLog {
    pub iterations: usize,
    pub final_delta: f64,
    pub converged: bool,
}

/// A fitted decomposition. `mixing` (A) maps expressions to variables;
/// `unmixing` (W) acts in whitened space and stays orthonormal.
#[derive(Debug, Clone, PartialEq)]
pub struct IcaModel {
    pub mean: DVector<f64>,
    /// k × n map into whitened space.
    pub whitener: DMatrix<f64>,
    /// n × k map back out of whitened space.
    pub dewhitener: DMatrix<f64>,
    /// k × k orthonormal.
    pub unmixing: DMatrix<f64>,
    /// n × k, columns are phenotype loadings; A = dewhitener · Wᵀ.
    pub mixing: DMatrix<f64>,
    pub rank: usize,
    pub convergence: ConvergenceLog,
    pub options: IcaOptions,
}

/// Expressions with the instance provenance carried through from X.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionMatrix {
    pub s: DMatrix<f64>,
    pub provenance: Vec<Instance>,
}

#[derive(Debug, Clone)]
pub struct IcaFit {
    pub model: IcaModel,
    pub s_train: DMatrix<f64>,
}

/// W ← (W Wᵀ)^(−1/2) W, making the rows exactly orthonormal.
fn symmetric_decorrelate(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = w * w.transpose();
    let eig = m.symmetric_eigen();
    let lam_max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(lam_max > 0.0) {
        return Err(Error::Numerical("degenerate unmixing update".into()));
    }
    let mut scaled = eig.eigenvectors.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        let lam = eig.eigenvalues[j];
        if lam <= 1e-12 * lam_max {
            return Err(Error::Numerical("degenerate unmixing update".into()));
        }
        let inv_sqrt = 1.0 / lam.sqrt();
        for v in col.iter_mut() {
            *v *= inv_sqrt;
        }
    }
    Ok(scaled * eig.eigenvectors.transpose() * w)
}

struct Whitening {
    mean: DVector<f64>,
    whitener: DMatrix<f64>,
    dewhitener: DMatrix<f64>,
}

fn whiten(x: &DMatrix<f64>, k: usize, standardize: bool) -> Result<Whitening> {
    let n = x.nrows();
    let m = x.ncols();
    let mean = DVector::from_iterator(n, x.row_iter().map(|r| r.mean()));
    let mut centered = x.clone();
    for (i, mut row) in centered.row_iter_mut().enumerate() {
        row.add_scalar_mut(-mean[i]);
    }
    let mut scale = DVector::from_element(n, 1.0);
    if standardize {
        for (i, row) in centered.row_iter().enumerate() {
            let var = row.iter().map(|v| v * v).sum::<f64>() / m as f64;
            let sd = var.sqrt();
            if !(sd > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "row {i} has zero variance and cannot be standardized"
                )));
            }
            scale[i] = sd;
        }
        for (i, mut row) in centered.row_iter_mut().enumerate() {
            row.scale_mut(1.0 / scale[i]);
        }
    }
    let cov = &centered * centered.transpose() / m as f64;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lam_max = eig.eigenvalues[order[0]];
    let cutoff = 1e-12 * lam_max;
    let achievable = if lam_max > 0.0 {
        order
            .iter()
            .take_while(|&&i| eig.eigenvalues[i] >= cutoff)
            .count()
    } else {
        0
    };
    if k > achievable {
        return Err(Error::RankDeficient {
            requested: k,
            achievable,
        });
    }
    let mut whitener = DMatrix::zeros(k, n);
    let mut dewhitener = DMatrix::zeros(n, k);
    for (row, &idx) in order.iter().take(k).enumerate() {
        let lam = eig.eigenvalues[idx];
        let sqrt_lam = lam.sqrt();
        for c in 0..n {
            let e = eig.eigenvectors[(c, idx)];
            whitener[(row, c)] = e / sqrt_lam / scale[c];
            dewhitener[(c, row)] = e * sqrt_lam * scale[c];
        }
    }
    Ok(Whitening {
        mean,
        whitener,
        dewhitener,
    })
}

/// Fits the decomposition to a raw n × m data matrix.
pub fn fit_ica(x: &DMatrix<f64>, opts: &IcaOptions) -> Result<IcaFit> {
    let n = x.nrows();
    let m = x.ncols();
    let k = opts.rank;
    if n == 0 || m == 0 {
        return Err(Error::InvalidInput("empty data matrix".into()));
    }
    if k == 0 || k > n.min(m) {
        return Err(Error::InvalidInput(format!(
            "rank {k} not in 1..=min(n={n}, m={m})"
        )));
    }
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(Error::InvalidInput(
            "tolerance must be positive and max_iter nonzero".into(),
        ));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("data matrix has non-finite entries".into()));
    }
    let wh = whiten(x, k, opts.standardize)?;
    let mut z = x.clone();
    for (i, mut row) in z.row_iter_mut().enumerate() {
        row.add_scalar_mut(-wh.mean[i]);
    }
    let z = &wh.whitener * z;

    let mut stream = rng::stream(opts.seed, &["ica", "init"]);
    let init = DMatrix::from_fn(k, k, |_, _| StandardNormal.sample(&mut stream));
    let mut w = symmetric_decorrelate(&init)?;

    let mut iterations = 0;
    let mut final_delta = f64::INFINITY;
    let mut converged = false;
    let m_f = m as f64;
    for _ in 0..opts.max_iter {
        let wz = &w * &z;
        let g = wz.map(f64::tanh);
        let g_prime_mean =
            DVector::from_iterator(k, g.row_iter().map(|r| 1.0 - r.iter().map(|v| v * v).sum::<f64>() / m_f));
        let mut w_raw = (&g * z.transpose()) / m_f;
        for i in 0..k {
            for j in 0..k {
                w_raw[(i, j)] -= g_prime_mean[i] * w[(i, j)];
            }
        }
        let w_new = symmetric_decorrelate(&w_raw)?;
        let mut delta = 0.0f64;
        for i in 0..k {
            let dot = w_new.row(i).dot(&w.row(i));
            delta = delta.max((1.0 - dot.abs()).abs());
        }
        w = w_new;
        iterations += 1;
        final_delta = delta;
        if delta < opts.tol {
            converged = true;
            break;
        }
    }

    let s_train = &w * &z;
    let mixing = &wh.dewhitener * w.transpose();
    Ok(IcaFit {
        model: IcaModel {
            mean: wh.mean,
            whitener: wh.whitener,
            dewhitener: wh.dewhitener,
            unmixing: w,
            mixing,
            rank: k,
            convergence: ConvergenceLog {
                iterations,
                final_delta,
                converged,
            },
            options: opts.clone(),
        },
        s_train,
    })
}

/// Fits on a cross-section matrix, carrying provenance into the expressions.
pub fn fit_cross_section(
    x: &CrossSectionMatrix,
    opts: &IcaOptions,
) -> Result<(IcaModel, ExpressionMatrix)> {
    let fit = fit_ica(&x.x, opts)?;
    Ok((
        fit.model,
        ExpressionMatrix {
            s: fit.s_train,
            provenance: x.provenance.clone(),
        },
    ))
}

/// Projects new data into phenotype space: S = W V (X_new − μ). Equals the
/// least-squares solve of A·S ≈ X_new − μ on the retained subspace.
pub fn project(model: &IcaModel, x_new: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = model.mean.nrows();
    if x_new.nrows() != n {
        return Err(Error::ShapeMismatch(format!(
            "data has {} rows, model expects {n}",
            x_new.nrows()
        )));
    }
    let mut centered = x_new.clone();
    for (i, mut row) in centered.row_iter_mut().enumerate() {
        row.add_scalar_mut(-model.mean[i]);
    }
    Ok(&model.unmixing * (&model.whitener * centered))
}

pub fn project_cross_section(
    model: &IcaModel,
    x: &CrossSectionMatrix,
) -> Result<ExpressionMatrix> {
    Ok(ExpressionMatrix {
        s: project(model, &x.x)?,
        provenance: x.provenance.clone(),
    })
}

/// Maps expressions back to data space: X̂ = A·S + μ.
pub fn reconstruct(model: &IcaModel, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if s.nrows() != model.rank {
        return Err(Error::ShapeMismatch(format!(
            "expressions have {} rows, model rank is {}",
            s.nrows(),
            model.rank
        )));
    }
    let mut x = &model.mixing * s;
    for (i, mut row) in x.row_iter_mut().enumerate() {
        row.add_scalar_mut(model.mean[i]);
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadingEntry {
    pub variable_id: String,
    pub kind: VarKind,
    pub loading: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentReport {
    pub component: usize,
    /// Top loadings by magnitude, descending; sign flipped per component so
    /// the largest-magnitude loading is positive.
    pub entries: Vec<LoadingEntry>,
}

impl ComponentReport {
    pub fn codes(&self) -> impl Iterator<Item = &LoadingEntry> {
        self.entries.iter().filter(|e| e.kind == VarKind::Code)
    }

    pub fn labs(&self) -> impl Iterator<Item = &LoadingEntry> {
        self.entries.iter().filter(|e| e.kind == VarKind::Lab)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhenotypeReport {
    pub components: Vec<ComponentReport>,
}

/// Top-q loadings per component (q clamped to the variable count).
pub fn phenotype_report(
    model: &IcaModel,
    catalog: &VariableCatalog,
    q: usize,
) -> Result<PhenotypeReport> {
    let n = model.mixing.nrows();
    if catalog.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "catalog has {} variables, model has {n} rows",
            catalog.len()
        )));
    }
    let q = q.min(n);
    let mut components = Vec::with_capacity(model.rank);
    for c in 0..model.rank {
        let col = model.mixing.column(c);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            col[b]
                .abs()
                .total_cmp(&col[a].abs())
                .then_with(|| a.cmp(&b))
        });
        let sign = if col[order[0]] < 0.0 { -1.0 } else { 1.0 };
        let entries = order
            .iter()
            .take(q)
            .map(|&i| {
                let var = catalog.get(i);
                LoadingEntry {
                    variable_id: var.id.clone(),
                    kind: var.kind,
                    loading: sign * col[i],
                }
            })
            .collect();
        components.push(ComponentReport {
            component: c,
            entries,
        });
    }
    Ok(PhenotypeReport { components })
}

fn push_matrix_rows(payload: &mut Vec<u8>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            payload.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
}

/// Writes the model container: a text manifest followed by the five arrays
/// (μ, V, V⁺, W, A) as row-major 64-bit little-endian floats.
pub fn write_model(path: impl AsRef<Path>, model: &IcaModel) -> Result<()> {
    let path = path.as_ref();
    let n = model.mean.nrows();
    let k = model.rank;
    let manifest = format!(
        "phenoflow-model v1\nn = {n}\nk = {k}\nseed = {}\ntol = {}\nmax_iter = {}\nstandardize = {}\niterations = {}\nconverged = {}\nfinal_delta = {}\narrays = mean whitener dewhitener unmixing mixing\n",
        model.options.seed,
        model.options.tol,
        model.options.max_iter,
        model.options.standardize,
        model.convergence.iterations,
        model.convergence.converged,
        model.convergence.final_delta,
    );
    let mut payload = Vec::with_capacity((n + 3 * n * k + k * k) * 8);
    for v in model.mean.iter() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    push_matrix_rows(&mut payload, &model.whitener);
    push_matrix_rows(&mut payload, &model.dewhitener);
    push_matrix_rows(&mut payload, &model.unmixing);
    push_matrix_rows(&mut payload, &model.mixing);
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(manifest.as_bytes())
        .and_then(|_| file.write_all(&payload))
        .map_err(|e| Error::io(path, e))
}

fn take_matrix(
    payload: &[u8],
    offset: &mut usize,
    rows: usize,
    cols: usize,
    path: &Path,
) -> Result<DMatrix<f64>> {
    let need = rows * cols * 8;
    if payload.len() < *offset + need {
        return Err(Error::InvalidInput(format!(
            "{}: truncated array section",
            path.display()
        )));
    }
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let off = *offset + (i * cols + j) * 8;
            m[(i, j)] = f64::from_le_bytes(payload[off..off + 8].try_into().unwrap());
        }
    }
    *offset += need;
    Ok(m)
}

/// Reads a model container written by [`write_model`].
pub fn read_model(path: impl AsRef<Path>) -> Result<IcaModel> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = std::io::BufReader::new(file);
    let mut manifest: Vec<String> = Vec::new();
    loop {
        let mut line = String::new();
        let n = std::io::BufRead::read_line(&mut reader, &mut line)
            .map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::malformed(path, manifest.len() + 1, "truncated manifest"));
        }
        let line = line.trim_end_matches('\n').to_string();
        let done = line.starts_with("arrays = ");
        manifest.push(line);
        if done {
            break;
        }
    }
    if manifest.first().map(String::as_str) != Some("phenoflow-model v1") {
        return Err(Error::malformed(path, 1, "not a phenoflow model file"));
    }
    let mut fields = std::collections::HashMap::new();
    for (i, line) in manifest.iter().enumerate().skip(1) {
        let (key, value) = line
            .split_once(" = ")
            .ok_or_else(|| Error::malformed(path, i + 1, format!("bad manifest line {line:?}")))?;
        fields.insert(key.to_string(), value.to_string());
    }
    fn get<'a>(
        fields: &'a std::collections::HashMap<String, String>,
        key: &str,
        path: &Path,
    ) -> Result<&'a str> {
        fields
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::InvalidInput(format!("{}: missing field {key}", path.display())))
    }
    fn parse<T: std::str::FromStr>(value: &str, key: &str, path: &Path) -> Result<T> {
        value.parse().map_err(|_| {
            Error::InvalidInput(format!("{}: bad value for {key}: {value:?}", path.display()))
        })
    }
    let n: usize = parse(get(&fields, "n", path)?, "n", path)?;
    let k: usize = parse(get(&fields, "k", path)?, "k", path)?;
    let seed: u64 = parse(get(&fields, "seed", path)?, "seed", path)?;
    let tol: f64 = parse(get(&fields, "tol", path)?, "tol", path)?;
    let max_iter: usize = parse(get(&fields, "max_iter", path)?, "max_iter", path)?;
    let standardize: bool = parse(get(&fields, "standardize", path)?, "standardize", path)?;
    let iterations: usize = parse(get(&fields, "iterations", path)?, "iterations", path)?;
    let converged: bool = parse(get(&fields, "converged", path)?, "converged", path)?;
    let final_delta: f64 = parse(get(&fields, "final_delta", path)?, "final_delta", path)?;
    if get(&fields, "arrays", path)? != "mean whitener dewhitener unmixing mixing" {
        return Err(Error::InvalidInput(format!(
            "{}: unexpected array layout",
            path.display()
        )));
    }
    let mut payload = Vec::new();
    reader
        .read_to_end(&mut payload)
        .map_err(|e| Error::io(path, e))?;
    let expected = (n + 3 * n * k + k * k) * 8;
    if payload.len() != expected {
        return Err(Error::InvalidInput(format!(
            "{}: payload is {} bytes, expected {expected}",
            path.display(),
            payload.len()
        )));
    }
    let mut offset = 0usize;
    let mean = take_matrix(&payload, &mut offset, n, 1, path)?.column(0).into_owned();
    let whitener = take_matrix(&payload, &mut offset, k, n, path)?;
    let dewhitener = take_matrix(&payload, &mut offset, n, k, path)?;
    let unmixing = take_matrix(&payload, &mut offset, k, k, path)?;
    let mixing = take_matrix(&payload, &mut offset, n, k, path)?;
    Ok(IcaModel {
        mean,
        whitener,
        dewhitener,
        unmixing,
        mixing,
        rank: k,
        convergence: ConvergenceLog {
            iterations,
            final_delta,
            converged,
        },
        options: IcaOptions {
            rank: k,
            seed,
            tol,
            max_iter,
            standardize,
        },
    })
}

/// Writes per-instance expressions: `k m` on line 1, provenance triples on
/// line 2, then the row-major payload as 64-bit little-endian floats.
pub fn write_expressions(path: impl AsRef<Path>, expr: &ExpressionMatrix) -> Result<()> {
    let path = path.as_ref();
    let k = expr.s.nrows();
    let m = expr.s.ncols();
    if expr.provenance.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "expressions {k}x{m} vs provenance {}",
            expr.provenance.len()
        )));
    }
    let mut header = format!("{k} {m}\n");
    let insts: Vec<String> = expr
        .provenance
        .iter()
        .enumerate()
        .map(|(j, inst)| format!("{j}:{}:{}", inst.record_id, inst.time))
        .collect();
    header.push_str(&insts.join("\t"));
    header.push('\n');
    let mut payload = Vec::with_capacity(k * m * 8);
    for i in 0..k {
        for j in 0..m {
            payload.extend_from_slice(&expr.s[(i, j)].to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(header.as_bytes())
        .and_then(|_| file.write_all(&payload))
        .map_err(|e| Error::io(path, e))
}

/// Reads an expression file written by [`write_expressions`].
pub fn read_expressions(path: impl AsRef<Path>) -> Result<ExpressionMatrix> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = std::io::BufReader::new(file);
    let mut read_line = |lineno: usize| -> Result<String> {
        let mut line = String::new();
        let n = std::io::BufRead::read_line(&mut reader, &mut line)
            .map_err(|e| Error::io(path, e))?;
        if n == 0 || !line.ends_with('\n') {
            return Err(Error::malformed(path, lineno, "truncated header"));
        }
        line.pop();
        Ok(line)
    };
    let dims = read_line(1)?;
    let (k, m) = dims
        .split_once(' ')
        .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
        .ok_or_else(|| Error::malformed(path, 1, format!("bad dimension line {dims:?}")))?;
    let inst_line = read_line(2)?;
    let mut provenance = Vec::with_capacity(m);
    if !inst_line.is_empty() {
        for entry in inst_line.split('\t') {
            let mut parts = entry.splitn(3, ':');
            let (idx, record_id, time) = match (parts.next(), parts.next(), parts.next()) {
                (Some(i), Some(r), Some(t)) => (i, r, t),
                _ => {
                    return Err(Error::malformed(
                        path,
                        2,
                        format!("bad instance entry {entry:?}"),
                    ))
                }
            };
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::malformed(path, 2, format!("bad instance index in {entry:?}")))?;
            if idx != provenance.len() {
                return Err(Error::malformed(
                    path,
                    2,
                    format!("instance index {idx} out of order"),
                ));
            }
            let time: f64 = time
                .parse()
                .map_err(|_| Error::malformed(path, 2, format!("bad instance time in {entry:?}")))?;
            provenance.push(Instance {
                record_id: record_id.to_string(),
                time,
            });
        }
    }
    if provenance.len() != m {
        return Err(Error::malformed(
            path,
            2,
            format!("{} instances declared, dimension says {m}", provenance.len()),
        ));
    }
    let mut payload = Vec::new();
    reader
        .read_to_end(&mut payload)
        .map_err(|e| Error::io(path, e))?;
    if payload.len() != k * m * 8 {
        return Err(Error::InvalidInput(format!(
            "{}: payload is {} bytes, expected {}",
            path.display(),
            payload.len(),
            k * m * 8
        )));
    }
    let mut s = DMatrix::zeros(k, m);
    for i in 0..k {
        for j in 0..m {
            let off = (i * m + j) * 8;
            let v = f64::from_le_bytes(payload[off..off + 8].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "{}: non-finite entry at ({i}, {j})",
                    path.display()
                )));
            }
            s[(i, j)] = v;
        }
    }
    Ok(ExpressionMatrix { s, provenance })
}

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{argmax, Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::net::{MLPSpec, WeightVector};
use crate::numkit::{dot, norm2, sym_eig, DenseMatrix};

/// Number of leading principal directions the Gaussian-α teacher sees.
pub const GAUSSIAN_ALPHA_PROJECTION: usize = 10;

const TEACHER_STREAM: u64 = 0x7eac_4e55;

fn teacher_seed(seed: u64) -> u64 {
    seed ^ TEACHER_STREAM.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// `n/2` copies of `(e₁, y₁)` followed by `n/2` copies of `(e₂, y₂)` in `ℝᵈ`.
pub fn gen_two_point(n: usize, y1: f64, y2: f64, d: usize) -> Result<Dataset> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::input(format!("two-point task needs an even n ≥ 2, got {n}")));
    }
    if d < 2 {
        return Err(Error::input("two-point task needs input dimension ≥ 2"));
    }
    let mut inputs = vec![0.0; n * d];
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let (axis, y) = if i < n / 2 { (0, y1) } else { (1, y2) };
        inputs[i * d + axis] = 1.0;
        targets.push(y);
    }
    Dataset::new(inputs, targets, d, 1, DatasetKind::TwoPoint, 0)
}

/// Haar-ish random orthogonal matrix by twice-applied modified Gram–Schmidt
/// on a Gaussian matrix; columns are the basis vectors.
fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let mut cols: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    for _pass in 0..2 {
        for j in 0..d {
            for k in 0..j {
                let (done, rest) = cols.split_at_mut(j);
                let proj = dot(&done[k], &rest[0]);
                for (a, b) in rest[0].iter_mut().zip(&done[k]) {
                    *a -= proj * b;
                }
            }
            let nrm = norm2(&cols[j]);
            cols[j].iter_mut().for_each(|v| *v /= nrm);
        }
    }
    DenseMatrix::from_fn(d, d, |i, j| cols[j][i])
}

/// Standardizes each column of a row-major `rows × dim` block in place.
fn standardize_columns(values: &mut [f64], dim: usize) {
    let rows = values.len() / dim;
    for j in 0..dim {
        let mean = (0..rows).map(|i| values[i * dim + j]).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|i| (values[i * dim + j] - mean).powi(2)).sum::<f64>() / rows as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..rows {
            values[i * dim + j] = (values[i * dim + j] - mean) / sd;
        }
    }
}

/// One-hot argmax labels of `teacher` on each row of `features`.
fn teacher_labels(teacher: &MLPSpec, weights: &WeightVector, features: &[f64], dim: usize) -> Result<Vec<f64>> {
    let c = teacher.output_dim();
    let mut targets = Vec::with_capacity(features.len() / dim * c);
    for row in features.chunks_exact(dim) {
        let (f, _) = teacher.forward(weights, row)?;
        let mut onehot = vec![0.0; c];
        onehot[argmax(&f)] = 1.0;
        targets.extend(onehot);
    }
    Ok(targets)
}

fn check_teacher(teacher: &MLPSpec, input_dim: usize) -> Result<()> {
    teacher.validate()?;
    if teacher.input_dim() != input_dim {
        return Err(Error::input(format!(
            "teacher input width {} does not match projection dimension {input_dim}",
            teacher.input_dim()
        )));
    }
    if teacher.output_dim() < 2 {
        return Err(Error::input("teacher needs at least two output classes"));
    }
    Ok(())
}

/// Gaussian inputs with covariance eigenvalues `exp(−α i)`, `i = 1..d`,
/// labelled by a random teacher on the standardized top-10 projection.
pub fn gen_gaussian_alpha(n: usize, d: usize, alpha: f64, teacher: &MLPSpec, seed: u64) -> Result<Dataset> {
    if d < GAUSSIAN_ALPHA_PROJECTION {
        return Err(Error::input(format!(
            "Gaussian-α inputs need d ≥ {GAUSSIAN_ALPHA_PROJECTION}, got {d}"
        )));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::input("alpha must be positive and finite"));
    }
    check_teacher(teacher, GAUSSIAN_ALPHA_PROJECTION)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = random_orthogonal(d, &mut rng);
    let scales: Vec<f64> = (1..=d).map(|i| (-alpha * i as f64 / 2.0).exp()).collect();

    let mut inputs = Vec::with_capacity(n * d);
    let mut projected = Vec::with_capacity(n * GAUSSIAN_ALPHA_PROJECTION);
    let mut latent = vec![0.0; d];
    for _ in 0..n {
        for (l, s) in latent.iter_mut().zip(&scales) {
            *l = s * rng.sample::<f64, _>(StandardNormal);
        }
        let x = q.matvec(&latent)?;
        for j in 0..GAUSSIAN_ALPHA_PROJECTION {
            projected.push((0..d).map(|i| q[(i, j)] * x[i]).sum::<f64>());
        }
        inputs.extend(x);
    }
    standardize_columns(&mut projected, GAUSSIAN_ALPHA_PROJECTION);
    let weights = teacher.init_weights(teacher_seed(seed));
    let targets = teacher_labels(teacher, &weights, &projected, GAUSSIAN_ALPHA_PROJECTION)?;
    Dataset::new(inputs, targets, d, teacher.output_dim(), DatasetKind::GaussianAlpha, seed)
}

/// Draws `n_train + n_test` Gaussian-α samples in one standardization pool and
/// splits them, so both halves share the teacher and the input law.
pub fn gen_gaussian_alpha_split(
    n_train: usize,
    n_test: usize,
    d: usize,
    alpha: f64,
    teacher: &MLPSpec,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    gen_gaussian_alpha(n_train + n_test, d, alpha, teacher, seed)?.split_at(n_train)
}

/// Eigenvectors `a..=b` (1-based, by decreasing eigenvalue) of the second
/// moment matrix of the first `n_moment` samples of a seeded shuffle of the
/// corpus. Returns the `d × (b−a+1)` basis and the remaining sample order.
pub fn projected_basis(
    corpus: &Dataset,
    a: usize,
    b: usize,
    n_moment: usize,
    seed: u64,
) -> Result<(DenseMatrix, Vec<usize>)> {
    let d = corpus.input_dim();
    if a == 0 || a > b || b > d {
        return Err(Error::input(format!("projection range {a}..={b} invalid for dimension {d}")));
    }
    if n_moment == 0 || corpus.len() < n_moment + 2 {
        return Err(Error::input(format!(
            "corpus of {} samples too small for {n_moment} moment samples plus training data",
            corpus.len()
        )));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (moment_idx, rest) = order.split_at(n_moment);

    let mut moment = DenseMatrix::zeros(d, d);
    for &i in moment_idx {
        let x = corpus.input(i);
        for r in 0..d {
            for c in 0..d {
                moment[(r, c)] += x[r] * x[c];
            }
        }
    }
    moment.scale(1.0 / n_moment as f64);
    let eig = sym_eig(&moment, 1e-10)?;
    let k = b - a + 1;
    let basis = DenseMatrix::from_fn(d, k, |i, j| eig.vectors[(i, d - a - j)]);
    Ok((basis, rest.to_vec()))
}

/// Relabels a corpus with a random teacher on its standardized projection onto
/// principal directions `a..=b`; the moment samples are dropped from the result.
pub fn synthesize_projected(
    corpus: &Dataset,
    a: usize,
    b: usize,
    teacher: &MLPSpec,
    n_moment: usize,
    seed: u64,
) -> Result<Dataset> {
    let (basis, rest) = projected_basis(corpus, a, b, n_moment, seed)?;
    let k = basis.cols();
    check_teacher(teacher, k)?;
    let mut projected = Vec::with_capacity(rest.len() * k);
    for &i in &rest {
        let x = corpus.input(i);
        for j in 0..k {
            projected.push((0..x.len()).map(|r| basis[(r, j)] * x[r]).sum::<f64>());
        }
    }
    standardize_columns(&mut projected, k);
    let weights = teacher.init_weights(teacher_seed(seed));
    let targets = teacher_labels(teacher, &weights, &projected, k)?;
    let inputs = rest.iter().flat_map(|&i| corpus.input(i).iter().copied()).collect();
    Dataset::new(inputs, targets, corpus.input_dim(), teacher.output_dim(), DatasetKind::SynProjected, seed)
}

/// Replaces every target by an i.i.d. uniform one-hot label.
pub fn randomize_labels(base: &Dataset, num_classes: usize, seed: u64) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::input("random labels need at least two classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut targets = vec![0.0; base.len() * num_classes];
    for i in 0..base.len() {
        targets[i * num_classes + rng.random_range(0..num_classes)] = 1.0;
    }
    Dataset::new(
        base.inputs().to_vec(),
        targets,
        base.input_dim(),
        num_classes,
        DatasetKind::RandomLabel,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, LossKind};

    fn teacher(input: usize, classes: usize) -> MLPSpec {
        MLPSpec::new(vec![input, 8, classes], Activation::Tanh, LossKind::CrossEntropy).unwrap()
    }

    #[test]
    fn two_point_layout() {
        let d = gen_two_point(4, 1.0, -1.0, 3).unwrap();
        assert_eq!(d.input(0), &[1.0, 0.0, 0.0]);
        assert_eq!(d.input(1), &[1.0, 0.0, 0.0]);
        assert_eq!(d.input(2), &[0.0, 1.0, 0.0]);
        assert_eq!(d.targets(), &[1.0, 1.0, -1.0, -1.0]);
        assert_eq!(gen_two_point(2, 0.5, 0.5, 2).unwrap().len(), 2);
        assert!(gen_two_point(5, 1.0, 1.0, 2).is_err());
    }

    #[test]
    fn two_point_gram_is_block_ones() {
        let n = 6;
        let d = gen_two_point(n, 1.0, 2.0, 4).unwrap();
        for i in 0..n {
            for j in 0..n {
                let same = (i < n / 2) == (j < n / 2);
                assert_eq!(dot(d.input(i), d.input(j)), if same { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn gaussian_alpha_covariance_spectrum() {
        let t = teacher(10, 2);
        let data = gen_gaussian_alpha(10_000, 12, 1.0, &t, 5).unwrap();
        let d = data.input_dim();
        let mut cov = DenseMatrix::zeros(d, d);
        for i in 0..data.len() {
            let x = data.input(i);
            for r in 0..d {
                for c in 0..d {
                    cov[(r, c)] += x[r] * x[c];
                }
            }
        }
        cov.scale(1.0 / data.len() as f64);
        let eig = sym_eig(&cov, 1e-10).unwrap();
        for i in 1..=5 {
            let got = eig.values[d - i];
            let want = (-(i as f64)).exp();
            assert!((got - want).abs() <= 0.1 * want, "eigenvalue {i}: {got} vs {want}");
        }
    }

    #[test]
    fn gaussian_alpha_projection_unit_variance() {
        // Recover the projection from the generator's own RNG stream.
        let (n, d, seed) = (4000, 10, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_orthogonal(d, &mut rng);
        let data = gen_gaussian_alpha(n, d, 1.0, &teacher(10, 3), seed).unwrap();
        let mut proj = Vec::with_capacity(n * d);
        for i in 0..n {
            let x = data.input(i);
            for j in 0..d {
                proj.push((0..d).map(|r| q[(r, j)] * x[r]).sum::<f64>());
            }
        }
        for j in 0..d {
            let var = (0..n).map(|i| proj[i * d + j].powi(2)).sum::<f64>() / n as f64;
            let want = (-(j as f64 + 1.0)).exp();
            assert!((var / want - 1.0).abs() < 0.1, "coordinate {j}");
        }
        let mut standardized = proj.clone();
        standardize_columns(&mut standardized, d);
        for j in 0..d {
            let var = (0..n).map(|i| standardized[i * d + j].powi(2)).sum::<f64>() / n as f64;
            assert!((var - 1.0).abs() < 0.1);
        }
    }

    #[test]
    fn gaussian_alpha_deterministic_and_validated() {
        let t = teacher(10, 2);
        let a = gen_gaussian_alpha(50, 12, 1.0, &t, 3).unwrap();
        assert_eq!(a, gen_gaussian_alpha(50, 12, 1.0, &t, 3).unwrap());
        assert_ne!(a, gen_gaussian_alpha(50, 12, 1.0, &t, 4).unwrap());
        assert!(gen_gaussian_alpha(50, 9, 1.0, &t, 3).is_err());
        for i in 0..a.len() {
            assert_eq!(a.target(i).iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn projected_basis_orthonormal() {
        let corpus = gen_gaussian_alpha(300, 12, 0.5, &teacher(10, 2), 1).unwrap();
        let (q, rest) = projected_basis(&corpus, 2, 5, 100, 8).unwrap();
        let defect = q.t_matmul(&q).unwrap().sub(&DenseMatrix::identity(4)).unwrap().max_abs();
        assert!(defect <= 1e-8);
        assert_eq!(rest.len(), 200);
    }

    #[test]
    fn one_dimensional_projection_labels_follow_level_sets() {
        let corpus = gen_gaussian_alpha(400, 12, 0.5, &teacher(10, 2), 2).unwrap();
        let t = teacher(1, 2);
        let data = synthesize_projected(&corpus, 1, 1, &t, 100, 4).unwrap();
        let (q, _) = projected_basis(&corpus, 1, 1, 100, 4).unwrap();
        // Samples with equal principal coordinate get equal labels: sorting by
        // the coordinate, labels change only where the teacher crosses over.
        let mut coord_label: Vec<(f64, usize)> = (0..data.len())
            .map(|i| {
                let c = (0..12).map(|r| q[(r, 0)] * data.input(i)[r]).sum::<f64>();
                (c, argmax(data.target(i)))
            })
            .collect();
        coord_label.sort_by(|a, b| a.0.total_cmp(&b.0));
        let switches = coord_label.windows(2).filter(|w| w[0].1 != w[1].1).count();
        assert!(switches <= 4, "{switches} label switches along a 1-D coordinate");
        assert_eq!(data, synthesize_projected(&corpus, 1, 1, &t, 100, 4).unwrap());
    }

    #[test]
    fn synthesize_rejects_small_corpus() {
        let corpus = gen_gaussian_alpha(20, 10, 1.0, &teacher(10, 2), 0).unwrap();
        assert!(synthesize_projected(&corpus, 1, 3, &teacher(3, 2), 19, 0).is_err());
    }

    #[test]
    fn random_labels_uniform_and_inputs_kept() {
        let base = gen_gaussian_alpha(10_000, 10, 1.0, &teacher(10, 2), 0).unwrap();
        let k = 4;
        let r = randomize_labels(&base, k, 11).unwrap();
        assert_eq!(r.inputs(), base.inputs());
        assert_eq!(r, randomize_labels(&base, k, 11).unwrap());
        let mut counts = vec![0usize; k];
        for i in 0..r.len() {
            counts[argmax(r.target(i))] += 1;
        }
        let n = r.len() as f64;
        let p = 1.0 / k as f64;
        let sigma = (n * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n * p).abs() <= 4.0 * sigma);
        }
    }
}

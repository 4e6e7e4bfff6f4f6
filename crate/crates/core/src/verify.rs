//! Self-checks behind the `verify` command: gradient checks for every
//! autodiff op, the Gaussian KL spot value, narrowing monotonicity of the
//! information bound, discrete mutual-information identities, completeness
//! of the narrowing path, implementation invariance and determinism.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::{finite_diff_grad, relative_error, Graph, Var};
use crate::dataset::toy_dataset;
use crate::error::Result;
use crate::info::{
    default_lambda_grid, kl_gaussian, mutual_info_discrete, verify_narrowing, GaussianDiag,
    JointPmf,
};
use crate::model::{DualEncoderModel, Modality};
use crate::nib::{implementation_invariance_probe, nib_attribute, PathSpec};
use crate::tensor::Tensor;

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-6;
pub const IDENTITY_TOL: f64 = 1e-12;
pub const COMPLETENESS_TOL: f64 = 1e-3;
pub const NARROWING_VARIANCES: [f64; 4] = [1.0, 1e-2, 1e-4, 1e-8];

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v * scale
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite normal draws")
}

type Build = fn(&mut Graph, &[Var]) -> Result<Var>;

/// One differentiable op with the shapes of its inputs.
pub struct OpCase {
    pub name: &'static str,
    inputs: &'static [&'static [usize]],
    build: Build,
}

const EMBED_IDS: [usize; 4] = [2, 0, 2, 4];

/// Every op of [`Graph`] that has a backward rule.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            inputs: &[&[3, 4], &[4, 2]],
            build: |g, v| g.matmul(v[0], v[1]),
        },
        OpCase {
            name: "add",
            inputs: &[&[3, 4], &[3, 4]],
            build: |g, v| g.add(v[0], v[1]),
        },
        OpCase {
            name: "mul",
            inputs: &[&[3, 4], &[3, 4]],
            build: |g, v| g.mul(v[0], v[1]),
        },
        OpCase {
            name: "scale",
            inputs: &[&[2, 5]],
            build: |g, v| g.scale(v[0], -1.7),
        },
        OpCase {
            name: "scale_by",
            inputs: &[&[2, 5], &[]],
            build: |g, v| g.scale_by(v[0], v[1]),
        },
        OpCase {
            name: "add_row",
            inputs: &[&[3, 4], &[4]],
            build: |g, v| g.add_row(v[0], v[1]),
        },
        OpCase {
            name: "softmax_rows",
            inputs: &[&[3, 5]],
            build: |g, v| g.softmax(v[0], 1),
        },
        OpCase {
            name: "softmax_cols",
            inputs: &[&[3, 5]],
            build: |g, v| g.softmax(v[0], 0),
        },
        OpCase {
            name: "gelu",
            inputs: &[&[4, 4]],
            build: |g, v| g.gelu(v[0]),
        },
        OpCase {
            name: "layer_norm",
            inputs: &[&[3, 6], &[6], &[6]],
            build: |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        },
        OpCase {
            name: "embedding_lookup",
            inputs: &[&[5, 3]],
            build: |g, v| g.embedding_lookup(v[0], &EMBED_IDS),
        },
        OpCase {
            name: "mean_pool_rows",
            inputs: &[&[4, 3]],
            build: |g, v| g.mean_pool(v[0], 0),
        },
        OpCase {
            name: "mean_pool_cols",
            inputs: &[&[4, 3]],
            build: |g, v| g.mean_pool(v[0], 1),
        },
        OpCase {
            name: "cosine_similarity",
            inputs: &[&[6], &[6]],
            build: |g, v| g.cosine_similarity(v[0], v[1]),
        },
        OpCase {
            name: "sum",
            inputs: &[&[3, 3]],
            build: |g, v| g.sum(v[0]),
        },
        OpCase {
            name: "transpose",
            inputs: &[&[2, 5]],
            build: |g, v| g.transpose(v[0]),
        },
        OpCase {
            name: "slice_cols",
            inputs: &[&[3, 6]],
            build: |g, v| g.slice_cols(v[0], 2, 3),
        },
        OpCase {
            name: "concat_cols",
            inputs: &[&[3, 2], &[3, 4]],
            build: |g, v| g.concat_cols(&[v[0], v[1]]),
        },
        OpCase {
            name: "select_row",
            inputs: &[&[4, 3]],
            build: |g, v| g.select_row(v[0], 2),
        },
        OpCase {
            name: "concat_rows",
            inputs: &[&[2, 3], &[3]],
            build: |g, v| g.concat_rows(&[v[0], v[1]]),
        },
    ]
}

impl OpCase {
    /// `Σ out ⊙ w` and, if requested, its gradients with respect to every
    /// input.
    fn loss(&self, inputs: &[Tensor], weights: &Tensor, grads: bool) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = (self.build)(&mut g, &vars)?;
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w)?;
        let loss = g.sum(prod)?;
        let value = g.value(loss).data()[0];
        if !grads {
            return Ok((value, vec![]));
        }
        let mut gr = g.backward(loss)?;
        let grads = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| gr.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, grads))
    }

    /// Worst relative error between analytic and central-difference
    /// gradients over all inputs, for inputs drawn from `seed`.
    pub fn check(&self, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = self
            .inputs
            .iter()
            .map(|s| normal(&mut rng, s, 1.0))
            .collect();
        let out_shape = {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let out = (self.build)(&mut g, &vars)?;
            g.value(out).shape().to_vec()
        };
        let weights = normal(&mut rng, &out_shape, 1.0);
        let (_, analytic) = self.loss(&inputs, &weights, true)?;
        let mut worst: f64 = 0.0;
        for (i, a) in analytic.iter().enumerate() {
            let numeric = finite_diff_grad(
                |x| {
                    let mut probe = inputs.clone();
                    probe[i] = x.clone();
                    Ok(self.loss(&probe, &weights, false)?.0)
                },
                &inputs[i],
                GRAD_STEP,
            )?;
            worst = worst.max(relative_error(a, &numeric)?);
        }
        Ok(worst)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub op: &'static str,
    pub seeds: u64,
    pub worst_rel_err: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.worst_rel_err <= GRAD_TOL
    }
}

/// Runs every op case over seeds `0..seeds`.
pub fn gradient_checks(seeds: u64) -> Result<Vec<GradCheck>> {
    op_cases()
        .iter()
        .map(|case| {
            let mut worst: f64 = 0.0;
            for seed in 0..seeds {
                worst = worst.max(case.check(seed)?);
            }
            Ok(GradCheck {
                op: case.name,
                seeds,
                worst_rel_err: worst,
            })
        })
        .collect()
}

/// Random joint pmf; roughly one entry in six is exactly zero.
pub fn random_pmf<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Result<JointPmf> {
    let mut w: Vec<f64> = (0..rows * cols)
        .map(|_| {
            if rng.random_range(0..6) == 0 {
                0.0
            } else {
                rng.random::<f64>()
            }
        })
        .collect();
    if w.iter().all(|v| *v == 0.0) {
        w[0] = 1.0;
    }
    let total: f64 = w.iter().sum();
    JointPmf::new(rows, cols, w.into_iter().map(|v| v / total).collect())
}

/// Worst violations of the mutual-information properties on one pmf.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct MiResiduals {
    /// `max(0, -I)`.
    pub negativity: f64,
    /// `|I(X;Y) - I(Y;X)|`.
    pub symmetry: f64,
    /// Largest deviation among the entropy and KL identities.
    pub identity: f64,
}

impl MiResiduals {
    pub fn of(j: &JointPmf) -> Self {
        let i = mutual_info_discrete(j);
        let (hx, hy, hxy) = (j.entropy_x(), j.entropy_y(), j.joint_entropy());
        let (hx_y, hy_x) = (
            j.conditional_entropy_x_given_y(),
            j.conditional_entropy_y_given_x(),
        );
        let identities = [
            hx - hx_y,
            hy - hy_x,
            hx + hy - hxy,
            hxy - hx_y - hy_x,
            j.expected_conditional_kl(),
        ];
        Self {
            negativity: (-i).max(0.0),
            symmetry: (i - mutual_info_discrete(&j.transpose())).abs(),
            identity: identities.iter().map(|v| (v - i).abs()).fold(0.0, f64::max),
        }
    }

    pub fn max(self, other: Self) -> Self {
        Self {
            negativity: self.negativity.max(other.negativity),
            symmetry: self.symmetry.max(other.symmetry),
            identity: self.identity.max(other.identity),
        }
    }

    pub fn within(&self, tol: f64) -> bool {
        self.negativity <= tol && self.symmetry <= tol && self.identity <= tol
    }
}

/// Residuals over `count` random pmfs with 2 to 6 outcomes per side.
pub fn mi_property_sweep(count: usize, seed: u64) -> Result<MiResiduals> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = MiResiduals::default();
    for _ in 0..count {
        let (r, c) = (rng.random_range(2..=6), rng.random_range(2..=6));
        worst = worst.max(MiResiduals::of(&random_pmf(&mut rng, r, c)?));
    }
    Ok(worst)
}

/// `|KL(N((3,4), I) ‖ N(0, I)) - 12.5|`.
pub fn kl_spot_residual() -> Result<f64> {
    let p = GaussianDiag::new(vec![3.0, 4.0], 1.0)?;
    let q = GaussianDiag::new(vec![0.0, 0.0], 1.0)?;
    Ok((kl_gaussian(&p, &q)? - 12.5).abs())
}

/// Number of random non-zero vectors (out of `count`) whose bound is
/// strictly increasing on the default λ grid and exactly zero at `λ = 0`,
/// for every variance in [`NARROWING_VARIANCES`].
pub fn narrowing_sweep(count: usize, dim: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = default_lambda_grid();
    let mut passed = 0;
    for _ in 0..count {
        let z = normal(&mut rng, &[dim], 1.0);
        let report = verify_narrowing(&z, &grid, &NARROWING_VARIANCES)?;
        if report.passed() && !report.degenerate {
            passed += 1;
        }
    }
    Ok(passed)
}

/// Completeness gaps of one sample at each step count.
#[derive(Clone, Debug, Serialize)]
pub struct CompletenessRow {
    pub sample: String,
    pub steps: Vec<usize>,
    pub gaps: Vec<f64>,
}

impl CompletenessRow {
    pub fn shrinking(&self) -> bool {
        self.gaps.windows(2).all(|w| w[1] < w[0])
    }

    pub fn last_gap(&self) -> f64 {
        *self.gaps.last().unwrap_or(&f64::INFINITY)
    }
}

pub fn completeness_sweep(
    model: &DualEncoderModel,
    pairs: usize,
    data_seed: u64,
    modality: Modality,
    steps: &[usize],
) -> Result<Vec<CompletenessRow>> {
    let layer = model.config().default_bottleneck_layer();
    toy_dataset(model, data_seed, pairs)?
        .iter()
        .map(|s| {
            let gaps = steps
                .iter()
                .map(|&m| {
                    let map = nib_attribute(model, s, &PathSpec::new(m, layer, modality))?;
                    Ok(map.completeness_gap().unwrap_or(f64::INFINITY))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CompletenessRow {
                sample: s.id.clone(),
                steps: steps.to_vec(),
                gaps,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct VerifyConfig {
    pub grad_seeds: u64,
    pub pmfs: usize,
    pub narrowing_vectors: usize,
    pub completeness_pairs: usize,
    pub completeness_steps: Vec<usize>,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            grad_seeds: 20,
            pmfs: 1000,
            narrowing_vectors: 100,
            completeness_pairs: 10,
            completeness_steps: vec![10, 100, 1000],
            seed: 0,
        }
    }
}

/// Runs the whole suite against `model`.
pub fn run_verify(model: &DualEncoderModel, cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let mut checks = Vec::new();

    let grads = gradient_checks(cfg.grad_seeds)?;
    let worst = grads.iter().map(|g| g.worst_rel_err).fold(0.0, f64::max);
    let failing: Vec<&str> = grads.iter().filter(|g| !g.passed()).map(|g| g.op).collect();
    checks.push(Check {
        name: "gradients",
        passed: failing.is_empty(),
        detail: format!(
            "{} ops x {} seeds, worst rel err {worst:.2e}, failing {failing:?}",
            grads.len(),
            cfg.grad_seeds
        ),
    });

    let kl = kl_spot_residual()?;
    checks.push(Check {
        name: "kl_spot_value",
        passed: kl <= IDENTITY_TOL,
        detail: format!("|KL - 12.5| = {kl:.2e}"),
    });

    let ok = narrowing_sweep(cfg.narrowing_vectors, model.config().d_model, cfg.seed)?;
    checks.push(Check {
        name: "narrowing_monotonicity",
        passed: ok == cfg.narrowing_vectors,
        detail: format!(
            "{ok}/{} vectors at variances {NARROWING_VARIANCES:?}",
            cfg.narrowing_vectors
        ),
    });

    let mi = mi_property_sweep(cfg.pmfs, cfg.seed)?;
    checks.push(Check {
        name: "mutual_information",
        passed: mi.within(IDENTITY_TOL),
        detail: format!(
            "{} pmfs, negativity {:.1e}, symmetry {:.1e}, identities {:.1e}",
            cfg.pmfs, mi.negativity, mi.symmetry, mi.identity
        ),
    });

    let rows = completeness_sweep(
        model,
        cfg.completeness_pairs,
        cfg.seed,
        Modality::Image,
        &cfg.completeness_steps,
    )?;
    let worst = rows.iter().map(|r| r.last_gap()).fold(0.0, f64::max);
    let shrinking = rows.iter().filter(|r| r.shrinking()).count();
    checks.push(Check {
        name: "completeness",
        passed: worst <= COMPLETENESS_TOL && shrinking == rows.len(),
        detail: format!(
            "{} pairs, worst gap at m={} {worst:.2e}, shrinking {shrinking}/{}",
            rows.len(),
            cfg.completeness_steps.last().copied().unwrap_or(0),
            rows.len()
        ),
    });

    let sample = toy_dataset(model, cfg.seed, 1)?.remove(0);
    let layer = model.config().default_bottleneck_layer();
    let mut invariant = true;
    let mut deterministic = true;
    for modality in [Modality::Image, Modality::Text] {
        let path = PathSpec::new(PathSpec::DEFAULT_STEPS, layer, modality);
        invariant &= implementation_invariance_probe(model, &sample, &path)?;
        let a = nib_attribute(model, &sample, &path)?;
        let b = nib_attribute(model, &sample, &path)?;
        deterministic &= a.bitwise_eq(&b);
    }
    checks.push(Check {
        name: "implementation_invariance",
        passed: invariant,
        detail: "identity block and rescaled projection, both modalities".into(),
    });
    checks.push(Check {
        name: "determinism",
        passed: deterministic,
        detail: "repeated attribution is bitwise identical".into(),
    });

    Ok(checks)
}

//! Two-sample metrics and the evaluation driver.
//!
//! Energy distance is computed as the exact V-statistic over all ordered
//! pairs, 2 E|a - b| - E|a - a'| - E|b - b'|, so identical multisets score
//! exactly zero. Sliced W2 averages, over random unit directions, the
//! squared 1-D Wasserstein-2 distance between the projected samples
//! (sort-and-pair). Both are deterministic given the seed and need no
//! pretrained features.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::Checkpoint;
use crate::data::{make_dataset, DatasetKind};
use crate::error::Result;
use crate::network::Network;
use crate::objectives::GuidanceSpec;
use crate::rng;
use crate::sampler::{few_step_sample_labeled, ode_solve_from, OdeMethod, SampleSchedule};
use crate::tensor::Tensor;

/// Exact energy distance between two empirical distributions:
/// 2 E|a-b| - E|a-a'| - E|b-b'| over all ordered pairs (O(n^2), no
/// subsampling). Nonnegative; zero when the multisets coincide.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> f64 {
    let (na, da) = a.dims2();
    let (nb, db) = b.dims2();
    assert!(na > 0 && nb > 0, "energy distance needs non-empty sample sets");
    assert_eq!(da, db, "dimension mismatch");
    let cross = mean_pair_distance(a, b);
    let within_a = mean_pair_distance(a, a);
    let within_b = mean_pair_distance(b, b);
    2.0 * cross - within_a - within_b
}

fn mean_pair_distance(a: &Tensor, b: &Tensor) -> f64 {
    let (na, d) = a.dims2();
    let (nb, _) = b.dims2();
    let ad = a.data();
    let bd = b.data();
    let mut total = 0.0;
    for i in 0..na {
        let ai = &ad[i * d..(i + 1) * d];
        for j in 0..nb {
            let bj = &bd[j * d..(j + 1) * d];
            let mut sq = 0.0;
            for k in 0..d {
                let diff = ai[k] - bj[k];
                sq += diff * diff;
            }
            total += sq.sqrt();
        }
    }
    total / (na as f64 * nb as f64)
}

/// Sliced squared Wasserstein-2: the average over `n_projections` random
/// unit directions of the squared 1-D W2 between the projections
/// (computed exactly by sorting and pairing). Requires equal sample
/// counts.
pub fn sliced_w2(a: &Tensor, b: &Tensor, n_projections: usize, r: &mut ChaCha8Rng) -> f64 {
    let (na, da) = a.dims2();
    let (nb, db) = b.dims2();
    assert_eq!(da, db, "dimension mismatch");
    assert_eq!(na, nb, "sliced W2 needs equal sample counts; resample first");
    assert!(n_projections >= 1);
    let d = da;
    let mut acc = 0.0;
    let mut pa = vec![0.0; na];
    let mut pb = vec![0.0; nb];
    for _ in 0..n_projections {
        // random unit direction from a normalized Gaussian draw
        let mut u = vec![0.0; d];
        loop {
            let mut sq = 0.0;
            for uk in u.iter_mut() {
                *uk = r.sample::<f64, _>(StandardNormal);
                sq += *uk * *uk;
            }
            if sq > 1e-24 {
                let inv = 1.0 / sq.sqrt();
                for uk in u.iter_mut() {
                    *uk *= inv;
                }
                break;
            }
        }
        project(a, &u, &mut pa);
        project(b, &u, &mut pb);
        pa.sort_by(f64::total_cmp);
        pb.sort_by(f64::total_cmp);
        let mut w2 = 0.0;
        for i in 0..na {
            let diff = pa[i] - pb[i];
            w2 += diff * diff;
        }
        acc += w2 / na as f64;
    }
    acc / n_projections as f64
}

fn project(x: &Tensor, u: &[f64], out: &mut [f64]) {
    let (n, d) = x.dims2();
    let xd = x.data();
    for i in 0..n {
        let mut s = 0.0;
        for k in 0..d {
            s += xd[i * d + k] * u[k];
        }
        out[i] = s;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRow {
    pub nfe: usize,
    pub energy_distance: f64,
    pub sliced_w2: f64,
    pub n_samples: usize,
    pub seed: u64,
}

/// CSV with header `nfe,energy_distance,sliced_w2,n_samples,seed`.
pub fn report_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("nfe,energy_distance,sliced_w2,n_samples,seed\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.nfe, r.energy_distance, r.sliced_w2, r.n_samples, r.seed
        ));
    }
    s
}

/// CSV with header `x,y,label,nfe,seed`; unlabeled rows leave the label
/// field empty.
pub fn samples_csv(points: &Tensor, labels: &[Option<usize>], nfe: usize, seed: u64) -> String {
    let (n, d) = points.dims2();
    assert_eq!(d, 2, "sample export is 2D");
    assert_eq!(labels.len(), n);
    let mut s = String::from("x,y,label,nfe,seed\n");
    for i in 0..n {
        let row = points.row(i);
        let label = labels[i].map(|l| l.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{label},{nfe},{seed}\n", row[0], row[1]));
    }
    s
}

pub struct EvalOutput {
    pub rows: Vec<EvalRow>,
    /// Generated samples per NFE entry, parallel to `rows`.
    pub samples: Vec<(usize, Tensor, Vec<Option<usize>>)>,
    /// The reference draw the metrics compare against.
    pub reference: (Tensor, Vec<Option<usize>>),
}

const EVAL_PROJECTIONS: usize = 128;

fn reference_draw(dataset: DatasetKind, n: usize, seed: u64) -> (Tensor, Vec<Option<usize>>) {
    let mut r = rng::stream(seed, "eval.data");
    let pts = make_dataset(dataset, n, &mut r);
    let mut flat = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for (p, l) in pts {
        flat.extend_from_slice(&p);
        labels.push(l);
    }
    (Tensor::new(vec![n, 2], flat), labels)
}

/// Per-sample class labels for generation: uniform over the dataset's
/// classes, or all-unconditional when the dataset has none.
pub fn sample_labels(dataset: DatasetKind, n: usize, seed: u64) -> Vec<Option<usize>> {
    let classes = dataset.num_classes();
    if classes == 0 {
        return vec![None; n];
    }
    let mut r = rng::stream(seed, "eval.labels");
    (0..n).map(|_| Some(r.random_range(0..classes))).collect()
}

/// Generate with the checkpoint's evaluation network at each NFE and score
/// against a fresh reference draw. Metrics for a given NFE do not depend
/// on the other entries in the list.
pub fn evaluate(
    ckpt: &Checkpoint,
    dataset: DatasetKind,
    nfe_list: &[usize],
    n_samples: usize,
    seed: u64,
) -> Result<EvalOutput> {
    let net = ckpt.eval_network()?;
    Ok(evaluate_network(&net, dataset, nfe_list, n_samples, seed))
}

/// `evaluate` for an already-built network.
pub fn evaluate_network(
    net: &Network,
    dataset: DatasetKind,
    nfe_list: &[usize],
    n_samples: usize,
    seed: u64,
) -> EvalOutput {
    assert!(n_samples >= 1);
    let reference = reference_draw(dataset, n_samples, seed);
    let labels = sample_labels(dataset, n_samples, seed);
    let mut rows = Vec::with_capacity(nfe_list.len());
    let mut samples = Vec::with_capacity(nfe_list.len());
    for &nfe in nfe_list {
        let schedule = SampleSchedule::uniform(nfe);
        let pts = few_step_sample_labeled(net, &schedule, &labels, seed);
        let mut proj_rng = rng::substream(seed, "eval.proj", nfe as u64, 0);
        rows.push(EvalRow {
            nfe,
            energy_distance: energy_distance(&pts, &reference.0),
            sliced_w2: sliced_w2(&pts, &reference.0, EVAL_PROJECTIONS, &mut proj_rng),
            n_samples,
            seed,
        });
        samples.push((nfe, pts, labels.clone()));
    }
    EvalOutput { rows, samples, reference }
}

/// Score a multi-step ODE solve of the guided teacher field against the
/// same reference draw `evaluate` uses, reporting `n_steps` as the NFE.
pub fn ode_reference_metrics(
    teacher: &Network,
    guidance: &GuidanceSpec,
    dataset: DatasetKind,
    n_steps: usize,
    method: OdeMethod,
    n_samples: usize,
    seed: u64,
) -> (EvalRow, Tensor, Vec<Option<usize>>) {
    let reference = reference_draw(dataset, n_samples, seed);
    let labels = sample_labels(dataset, n_samples, seed);
    let mut r = rng::stream(seed, "ode.prior");
    let x0 = Tensor::new(
        vec![n_samples, teacher.config.input_dim],
        (0..n_samples * teacher.config.input_dim)
            .map(|_| r.sample::<f64, _>(StandardNormal))
            .collect(),
    );
    let pts = ode_solve_from(teacher, guidance, &x0, &labels, n_steps, method);
    let mut proj_rng = rng::substream(seed, "eval.proj", n_steps as u64, 1);
    let row = EvalRow {
        nfe: n_steps,
        energy_distance: energy_distance(&pts, &reference.0),
        sliced_w2: sliced_w2(&pts, &reference.0, EVAL_PROJECTIONS, &mut proj_rng),
        n_samples,
        seed,
    };
    (row, pts, labels)
}

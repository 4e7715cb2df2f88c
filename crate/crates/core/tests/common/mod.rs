//! Shared finite-difference machinery for the gradient test suites.
//!
//! Instances are resampled whenever they land near a non-differentiable point
//! (relu kinks, hinge boundary, negative-template argmax ties) so the central
//! difference is a valid oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use smm_lab::losses::{self, ClassGroups, LabeledEmbedding, MarginConfig};
use smm_lab::nn::{backward, Batch, ClassId, CosineClassifierNet, CosineHead, LossSpec, TotalSpec};
use smm_lab::param::{FreezeMask, ParamVector};

pub const EPS: f64 = 1e-5;

pub fn close(analytic: f64, fd: f64) -> bool {
    (analytic - fd).abs() < 1e-8 + 1e-4 * analytic.abs().max(fd.abs())
}

pub fn random_net(
    rng: &mut ChaCha8Rng,
    d_in: usize,
    hidden: usize,
    classes: &[ClassId],
) -> CosineClassifierNet<f64> {
    let mut net = CosineClassifierNet::new(d_in, &[hidden], 16.0, rng).unwrap();
    for &c in classes {
        let row: Vec<f64> = (0..hidden).map(|_| rng.gen_range(-1.0..1.0)).collect();
        net.head.add_class(c, row).unwrap();
    }
    net
}

pub fn random_batch(rng: &mut ChaCha8Rng, d_in: usize, labels: &[ClassId], n: usize) -> Batch<f64> {
    Batch {
        inputs: (0..n).map(|_| (0..d_in).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        labels: (0..n).map(|_| labels[rng.gen_range(0..labels.len())]).collect(),
    }
}

/// All relu pre-activations stay clear of zero so an EPS-sized parameter
/// perturbation cannot flip any unit.
pub fn relu_safe(net: &CosineClassifierNet<f64>, batch: &Batch<f64>) -> bool {
    for x in &batch.inputs {
        let mut a = x.clone();
        for layer in &net.layers {
            let mut next = vec![0.0; layer.out_dim];
            for o in 0..layer.out_dim {
                let mut z = layer.bias[o];
                for i in 0..layer.in_dim {
                    z += layer.weights[o * layer.in_dim + i] * a[i];
                }
                if z.abs() < 1e-3 {
                    return false;
                }
                next[o] = z.max(0.0);
            }
            a = next;
        }
        // dead embeddings make the normalization ill-conditioned
        if a.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-2 {
            return false;
        }
    }
    true
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn cosine_sims(head: &CosineHead<f64>, v_unit: &[f64]) -> Vec<f64> {
    (0..head.num_classes())
        .map(|c| {
            let r = unit(head.row(c));
            r.iter().zip(v_unit).map(|(a, b)| a * b).sum()
        })
        .collect()
}

/// The margin term is safely differentiable for this sample: the hinge is not
/// at its boundary and the negative-template argmax has a clear winner.
pub fn margin_safe(
    head: &CosineHead<f64>,
    groups: &ClassGroups,
    sample: &LabeledEmbedding<f64>,
    own_new: bool,
    cfg: &MarginConfig<f64>,
) -> bool {
    let v = unit(&sample.embedding);
    let sims = cosine_sims(head, &v);
    let opp = if own_new { &groups.old } else { &groups.new };
    let mut opp_sims: Vec<f64> = (0..head.num_classes())
        .filter(|&c| opp.contains(&head.class_ids()[c]))
        .map(|c| sims[c])
        .collect();
    if opp_sims.is_empty() {
        return true;
    }
    opp_sims.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if opp_sims.len() > 1 && (opp_sims[0] - opp_sims[1]).abs() < 1e-3 {
        return false; // argmax tie
    }
    let pos = head.class_index(sample.label).unwrap();
    let term = cfg.margin - cfg.scale * sims[pos] + cfg.scale * opp_sims[0];
    term.abs() > 1e-3 // hinge boundary
}

/// Central finite difference of the batch loss through `backward`, coordinate
/// by coordinate, compared against the analytic gradient.
pub fn check_backward_fd(
    net: &CosineClassifierNet<f64>,
    batch: &Batch<f64>,
    spec: &LossSpec<f64>,
    mask: &FreezeMask,
) {
    let w = net.to_params().unwrap();
    let (_, g) = backward(net, batch, spec, mask).unwrap();
    let mut probe = net.clone();
    for i in 0..w.values().len() {
        let mut plus = w.clone();
        plus.values_mut()[i] += EPS;
        probe.set_params(&plus).unwrap();
        let lp = backward(&probe, batch, spec, mask).unwrap().0;
        let mut minus = w.clone();
        minus.values_mut()[i] -= EPS;
        probe.set_params(&minus).unwrap();
        let lm = backward(&probe, batch, spec, mask).unwrap().0;
        let fd = (lp - lm) / (2.0 * EPS);
        let analytic = g.vector().values()[i];
        assert!(
            close(analytic, fd),
            "coordinate {i}: analytic {analytic} vs finite difference {fd}"
        );
    }
}

/// Cross-entropy gradients through the network match finite differences over
/// `instances` randomized kink-free cases.
pub fn ce_fd_suite(instances: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut done = 0;
    let mut attempts = 0;
    while done < instances {
        attempts += 1;
        assert!(attempts < 100 * instances, "could not find enough kink-free instances");
        let d_in = rng.gen_range(2..=6);
        let hidden = rng.gen_range(3..=8);
        let n_classes = rng.gen_range(2..=4);
        let classes: Vec<ClassId> = (0..n_classes).collect();
        let net = random_net(&mut rng, d_in, hidden, &classes);
        let n = rng.gen_range(1..=4);
        let batch = random_batch(&mut rng, d_in, &classes, n);
        if !relu_safe(&net, &batch) {
            continue;
        }
        let mask = FreezeMask::none(&net.layout().unwrap());
        check_backward_fd(&net, &batch, &LossSpec::CrossEntropy, &mask);
        done += 1;
    }
}

/// Separation-margin loss gradients (raw head rows and raw embeddings) match
/// finite differences over `instances` randomized kink-free cases.
pub fn margin_fd_suite(instances: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = MarginConfig { margin: 1.0, scale: 16.0, lambda_margin: 1.0, lambda_anchor: 0.0 };
    let mut done = 0;
    let mut attempts = 0;
    while done < instances {
        attempts += 1;
        assert!(attempts < 100 * instances, "could not find enough kink-free instances");
        let d = rng.gen_range(3..=6);
        let mut head = CosineHead::new(d, cfg.scale).unwrap();
        for c in 0..6u32 {
            let row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            head.add_class(c, row).unwrap();
        }
        let groups = ClassGroups { old: [0, 1, 2].into(), new: [3, 4, 5].into() };
        let sample = |labels: &[u32], rng: &mut ChaCha8Rng| -> Vec<LabeledEmbedding<f64>> {
            labels
                .iter()
                .map(|&l| LabeledEmbedding {
                    label: l,
                    embedding: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                })
                .collect()
        };
        let new = sample(&[3, 4, 5], &mut rng);
        let old = sample(&[0, 1], &mut rng);
        if !new.iter().all(|s| margin_safe(&head, &groups, s, true, &cfg))
            || !old.iter().all(|s| margin_safe(&head, &groups, s, false, &cfg))
        {
            continue;
        }

        let (_, grads) = losses::inter_task_separation(&new, &old, &head, &groups, &cfg).unwrap();
        let eval = |head: &CosineHead<f64>, new: &[LabeledEmbedding<f64>]| {
            losses::inter_task_separation(new, &old, head, &groups, &cfg).unwrap().0
        };

        // raw head-row coordinates
        for c in 0..head.num_classes() {
            for i in 0..d {
                let mut hp = head.clone();
                let mut rp = head.row(c).to_vec();
                rp[i] += EPS;
                hp.set_row_raw(c, rp).unwrap();
                let mut hm = head.clone();
                let mut rm = head.row(c).to_vec();
                rm[i] -= EPS;
                hm.set_row_raw(c, rm).unwrap();
                let fd = (eval(&hp, &new) - eval(&hm, &new)) / (2.0 * EPS);
                assert!(
                    close(grads.d_head_rows[c][i], fd),
                    "row {c} coord {i}: analytic {} vs fd {fd}",
                    grads.d_head_rows[c][i]
                );
            }
        }

        // raw embedding coordinates of the new samples
        for (k, _) in new.iter().enumerate() {
            for i in 0..d {
                let mut sp = new.to_vec();
                sp[k].embedding[i] += EPS;
                let mut sm = new.to_vec();
                sm[k].embedding[i] -= EPS;
                let fd = (eval(&head, &sp) - eval(&head, &sm)) / (2.0 * EPS);
                assert!(
                    close(grads.d_embeddings[k][i], fd),
                    "sample {k} coord {i}: analytic {} vs fd {fd}",
                    grads.d_embeddings[k][i]
                );
            }
        }
        done += 1;
    }
}

/// Anchor-regularizer gradients match finite differences.
pub fn anchor_fd_suite(instances: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let layout =
            smm_lab::param::Layout::new([("a".to_string(), 4), ("b".to_string(), 3)]).unwrap();
        let mask = FreezeMask::none(&layout);
        let w = ParamVector::new(
            layout.clone(),
            (0..7).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let anchor = ParamVector::new(
            layout.clone(),
            (0..7).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let (_, g) = losses::l2_anchor(&w, &anchor, &mask).unwrap();
        for i in 0..7 {
            let mut wp = w.clone();
            wp.values_mut()[i] += EPS;
            let mut wm = w.clone();
            wm.values_mut()[i] -= EPS;
            let lp = losses::l2_anchor(&wp, &anchor, &mask).unwrap().0;
            let lm = losses::l2_anchor(&wm, &anchor, &mask).unwrap().0;
            let fd = (lp - lm) / (2.0 * EPS);
            assert!(close(g.values()[i], fd));
        }
    }
}

/// Total-objective gradients (batch CE + replay CE + margin + anchor) through
/// `backward` match finite differences.
pub fn total_fd_suite(instances: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = MarginConfig { margin: 1.0, scale: 16.0, lambda_margin: 0.7, lambda_anchor: 0.05 };
    let mut done = 0;
    let mut attempts = 0;
    while done < instances {
        attempts += 1;
        assert!(attempts < 100 * instances, "could not find enough kink-free instances");
        let d_in = rng.gen_range(2..=5);
        let hidden = rng.gen_range(3..=6);
        let classes: Vec<ClassId> = (0..4).collect();
        let net = random_net(&mut rng, d_in, hidden, &classes);
        let groups = ClassGroups { old: [0, 1].into(), new: [2, 3].into() };
        let n = rng.gen_range(1..=3);
        let batch = random_batch(&mut rng, d_in, &[2, 3], n);
        if !relu_safe(&net, &batch) {
            continue;
        }
        let old_samples: Vec<LabeledEmbedding<f64>> = [0u32, 1]
            .iter()
            .map(|&l| LabeledEmbedding {
                label: l,
                embedding: unit(&(0..hidden).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()),
            })
            .collect();
        // guard the margin kinks of every contributing sample
        let new_embs: Vec<LabeledEmbedding<f64>> = batch
            .inputs
            .iter()
            .zip(&batch.labels)
            .map(|(x, &y)| LabeledEmbedding { label: y, embedding: net.forward(x).unwrap().0 })
            .collect();
        if !new_embs.iter().all(|s| margin_safe(&net.head, &groups, s, true, &cfg))
            || !old_samples.iter().all(|s| margin_safe(&net.head, &groups, s, false, &cfg))
        {
            continue;
        }
        let layout = net.layout().unwrap();
        let mask = FreezeMask::none(&layout);
        let mut anchor = net.to_params().unwrap();
        for v in anchor.values_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
        let spec = LossSpec::Total(TotalSpec {
            cfg: cfg.clone(),
            anchor: Some(anchor),
            old_samples: old_samples.clone(),
            groups: Some(groups.clone()),
            replay_ce: true,
            use_margin: true,
        });
        check_backward_fd(&net, &batch, &spec, &mask);
        done += 1;
    }
}

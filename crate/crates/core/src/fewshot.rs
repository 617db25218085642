//! Episodic N-way K-shot sampling, prototype classification and metrics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Disjoint class partitions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

impl ClassSplit {
    pub fn get(&self, p: Partition) -> &[usize] {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Shuffles `class_ids` under `seed` and cuts it into train/val/test.
///
/// Train and test receive `floor(ratio · n)` classes; validation takes the rest.
pub fn split_classes(class_ids: &[usize], ratios: [f64; 3], seed: u64) -> Result<ClassSplit> {
    let n = class_ids.len();
    if n < 3 {
        return Err(Error::Argument(format!("need at least 3 classes to split, got {n}")));
    }
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let mut ids = class_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = libm::floor(ratios[0] * n as f64 + 1e-9) as usize;
    let n_test = libm::floor(ratios[2] * n as f64 + 1e-9) as usize;
    let test = ids.split_off(n - n_test);
    let val = ids.split_off(n_train);
    Ok(ClassSplit {
        train: ids,
        val,
        test,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            n_way: 5,
            k_shot: 1,
            n_query: 15,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_shot == 0 || self.n_query == 0 {
            return Err(Error::Config(format!(
                "episode needs n_way >= 2, k_shot >= 1, n_query >= 1; got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn support_len(&self) -> usize {
        self.n_way * self.k_shot
    }

    pub fn query_len(&self) -> usize {
        self.n_way * self.n_query
    }
}

/// One image of the pool: global class id and index within that class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ImageRef {
    pub class: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub support: Vec<ImageRef>,
    pub support_labels: Vec<usize>,
    pub query: Vec<ImageRef>,
    pub query_labels: Vec<usize>,
    /// Episode label → global class id.
    pub class_map: Vec<usize>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.class_map.len()
    }
}

/// Draws an episode from `classes`; `class_len(c)` is the image count of class `c`.
///
/// Support and query are class-major: all items of label 0, then label 1, …
pub fn sample_episode<R: Rng + ?Sized>(
    classes: &[usize],
    class_len: impl Fn(usize) -> usize,
    cfg: &EpisodeConfig,
    rng: &mut R,
) -> Result<Episode> {
    cfg.validate()?;
    if classes.len() < cfg.n_way {
        return Err(Error::Data(format!(
            "partition has {} classes, episode needs {}",
            classes.len(),
            cfg.n_way
        )));
    }
    let need = cfg.k_shot + cfg.n_query;
    let chosen = index::sample(rng, classes.len(), cfg.n_way);
    let mut ep = Episode {
        support: Vec::with_capacity(cfg.support_len()),
        support_labels: Vec::with_capacity(cfg.support_len()),
        query: Vec::with_capacity(cfg.query_len()),
        query_labels: Vec::with_capacity(cfg.query_len()),
        class_map: Vec::with_capacity(cfg.n_way),
    };
    for (label, ci) in chosen.iter().enumerate() {
        let class = classes[ci];
        let have = class_len(class);
        if have < need {
            return Err(Error::Data(format!(
                "class {class} has {have} images, episode needs {need}"
            )));
        }
        let picks = index::sample(rng, have, need).into_vec();
        for (j, &index) in picks.iter().enumerate() {
            let r = ImageRef { class, index };
            if j < cfg.k_shot {
                ep.support.push(r);
                ep.support_labels.push(label);
            } else {
                ep.query.push(r);
                ep.query_labels.push(label);
            }
        }
        ep.class_map.push(class);
    }
    Ok(ep)
}

/// Row-averaging matrix `[N, M]` mapping embeddings to per-class means.
fn averaging_matrix<T: Element>(labels: &[usize], n_way: usize) -> Result<Tensor<T>> {
    let mut counts = vec![0usize; n_way];
    for &l in labels {
        if l >= n_way {
            return Err(Error::Argument(format!("label {l} out of range for {n_way} classes")));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Argument(format!("class {c} has no support embeddings")));
    }
    if counts.iter().any(|&c| c != counts[0]) {
        return Err(Error::Argument(format!("unbalanced support counts {counts:?}")));
    }
    let m = labels.len();
    let mut a = vec![T::zero(); n_way * m];
    for (j, &l) in labels.iter().enumerate() {
        a[l * m + j] = T::one() / T::of(counts[l] as f64);
    }
    Tensor::new(&[n_way, m], a)
}

/// Per-class mean of support embeddings `[N·K, d]` → `[N, d]`.
pub fn prototypes<T: Element>(g: &mut Graph<T>, support: Var, labels: &[usize], n_way: usize) -> Result<Var> {
    let s = g.shape(support);
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::dim("prototypes", s, &[labels.len()]));
    }
    let a = g.constant(averaging_matrix(labels, n_way)?);
    g.matmul(a, support)
}

/// Negative squared Euclidean distances `[M, N]` from queries to prototypes.
pub fn proto_logits<T: Element>(g: &mut Graph<T>, query: Var, protos: Var) -> Result<Var> {
    let (qs, ps) = (g.shape(query).to_vec(), g.shape(protos).to_vec());
    if qs.len() != 2 || ps.len() != 2 || qs[1] != ps[1] {
        return Err(Error::dim("classify_queries", &qs, &ps));
    }
    let (m, n, d) = (qs[0], ps[0], qs[1]);
    let q = g.reshape(query, &[m, 1, d])?;
    let p = g.reshape(protos, &[1, n, d])?;
    let diff = g.sub(q, p)?;
    let sq = g.mul(diff, diff)?;
    let dist = g.sum_axis_keep(sq, 2)?;
    let dist = g.reshape(dist, &[m, n])?;
    Ok(g.scale(dist, -T::one()))
}

/// Row-wise argmax; ties resolve to the lowest class index.
pub fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Vec<usize> {
    let n = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(n.max(1))
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Logits and predictions for queries against prototypes.
pub fn classify_queries<T: Element>(g: &mut Graph<T>, query: Var, protos: Var) -> Result<(Var, Vec<usize>)> {
    let logits = proto_logits(g, query, protos)?;
    let preds = argmax_rows(g.value(logits));
    Ok((logits, preds))
}

/// Mean softmax cross-entropy over the query logits.
pub fn episode_loss<T: Element>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub accuracy: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    pub loss: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Accuracy and macro-averaged precision/recall/F1 over `n_way` classes.
/// Undefined per-class ratios count as 0.
pub fn episode_metrics(preds: &[usize], labels: &[usize], n_way: usize, loss: f64) -> Result<EpisodeMetrics> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Argument(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut tp = vec![0usize; n_way];
    let mut predicted = vec![0usize; n_way];
    let mut actual = vec![0usize; n_way];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= n_way || l >= n_way {
            return Err(Error::Argument(format!("class index out of range for {n_way} classes")));
        }
        predicted[p] += 1;
        actual[l] += 1;
        if p == l {
            tp[l] += 1;
        }
    }
    let (mut pr, mut rc, mut f1) = (0.0, 0.0, 0.0);
    for c in 0..n_way {
        let p = ratio(tp[c], predicted[c]);
        let r = ratio(tp[c], actual[c]);
        pr += p;
        rc += r;
        if p + r > 0.0 {
            f1 += 2.0 * p * r / (p + r);
        }
    }
    let k = n_way as f64;
    Ok(EpisodeMetrics {
        accuracy: ratio(tp.iter().sum(), preds.len()),
        precision_macro: pr / k,
        recall_macro: rc / k,
        f1_macro: f1 / k,
        loss,
    })
}

/// Aggregate over evaluated episodes, each weighted equally.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub episodes: usize,
    pub acc_mean: f64,
    /// `1.96 · s / √E` with the sample standard deviation; undefined for E = 1.
    pub acc_ci95: Option<f64>,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    pub loss_mean: f64,
}

pub fn summarize(eps: &[EpisodeMetrics]) -> Result<MetricsSummary> {
    let e = eps.len();
    if e == 0 {
        return Err(Error::Argument("no episodes to summarize".into()));
    }
    let mean = |f: fn(&EpisodeMetrics) -> f64| eps.iter().map(f).sum::<f64>() / e as f64;
    let acc = mean(|m| m.accuracy);
    let ci = (e > 1).then(|| {
        let var = eps.iter().map(|m| (m.accuracy - acc) * (m.accuracy - acc)).sum::<f64>() / (e - 1) as f64;
        1.96 * libm::sqrt(var) / libm::sqrt(e as f64)
    });
    Ok(MetricsSummary {
        episodes: e,
        acc_mean: acc,
        acc_ci95: ci,
        precision_macro: mean(|m| m.precision_macro),
        recall_macro: mean(|m| m.recall_macro),
        f1_macro: mean(|m| m.f1_macro),
        loss_mean: mean(|m| m.loss),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn split_sizes() {
        let ids: Vec<usize> = (0..1623).collect();
        let s = split_classes(&ids, [0.8, 0.1, 0.1], 42).unwrap();
        assert_eq!(s.sizes(), (1298, 163, 162));
        let s = split_classes(&(0..10).collect::<Vec<_>>(), [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!(s.sizes(), (8, 1, 1));
        let s = split_classes(&(0..32).collect::<Vec<_>>(), [0.625, 0.1875, 0.1875], 1).unwrap();
        assert_eq!(s.sizes(), (20, 6, 6));
        assert!(split_classes(&ids, [0.8, 0.1, 0.2], 1).is_err());
        assert!(split_classes(&[1, 2], [0.8, 0.1, 0.1], 1).is_err());
    }

    #[test]
    fn split_determinism() {
        let ids: Vec<usize> = (0..100).collect();
        let a = split_classes(&ids, [0.8, 0.1, 0.1], 42).unwrap();
        assert_eq!(a, split_classes(&ids, [0.8, 0.1, 0.1], 42).unwrap());
        let b = split_classes(&ids, [0.8, 0.1, 0.1], 43).unwrap();
        assert_eq!(a.sizes(), b.sizes());
        assert_ne!(a.train, b.train);
    }

    #[test]
    fn episode_shapes() {
        let classes: Vec<usize> = (0..20).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = sample_episode(&classes, |_| 20, &EpisodeConfig::default(), &mut rng).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.query.len(), 75);
        assert_eq!(ep.n_way(), 5);

        let cfg = EpisodeConfig {
            n_way: 5,
            k_shot: 19,
            n_query: 1,
        };
        let ep = sample_episode(&classes, |_| 20, &cfg, &mut rng).unwrap();
        assert_eq!(ep.support.len(), 95);
        assert_eq!(ep.query.len(), 5);

        let err = sample_episode(&classes, |c| if c == 3 { 5 } else { 20 }, &EpisodeConfig { n_way: 20, ..Default::default() }, &mut rng);
        assert!(matches!(err, Err(Error::Data(m)) if m.contains("class 3")));
        assert!(sample_episode(&classes[..4], |_| 20, &EpisodeConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn support_query_disjoint_audit() {
        let classes: Vec<usize> = (0..30).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let ep = sample_episode(&classes, |_| 20, &EpisodeConfig::default(), &mut rng).unwrap();
            for s in &ep.support {
                assert!(!ep.query.contains(s));
            }
            let mut all: Vec<_> = ep.support.iter().chain(&ep.query).collect();
            all.sort();
            all.dedup();
            assert_eq!(all.len(), 80);
            let mut cm = ep.class_map.clone();
            cm.sort();
            cm.dedup();
            assert_eq!(cm.len(), 5);
            for (r, &l) in ep.support.iter().zip(&ep.support_labels) {
                assert_eq!(ep.class_map[l], r.class);
            }
            for (r, &l) in ep.query.iter().zip(&ep.query_labels) {
                assert_eq!(ep.class_map[l], r.class);
            }
        }
    }

    #[test]
    fn prototype_examples() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(t(&[4, 2], &[1., 0., 5., 5., 3., 0., 7., 1.]));
        let p = prototypes(&mut g, s, &[0, 1, 0, 1], 2).unwrap();
        assert_eq!(g.value(p).data(), &[2., 0., 6., 3.]);

        let s1 = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = prototypes(&mut g, s1, &[0, 1], 2).unwrap();
        assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);

        assert!(prototypes(&mut g, s1, &[0, 0], 2).is_err());
    }

    #[test]
    fn classification_examples() {
        let mut g = Graph::<f64>::new();
        let protos = g.constant(t(&[2, 2], &[2., 0., -2., 0.]));
        let q = g.constant(t(&[2, 2], &[1.9, 0., -2., 0.]));
        let (logits, preds) = classify_queries(&mut g, q, protos).unwrap();
        assert_eq!(preds, [0, 1]);
        assert_eq!(g.value(logits).data()[3], 0.0);
        assert!((g.value(logits).data()[0] + 0.01).abs() < 1e-12);

        assert_eq!(argmax_rows(&t(&[1, 3], &[1., 1., 1.])), [0]);
        assert_eq!(argmax_rows(&t(&[1, 3], &[0., 2., 2.])), [1]);
    }

    #[test]
    fn loss_examples() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[3, 5]));
        let loss = episode_loss(&mut g, l, &[0, 2, 4]).unwrap();
        assert!((g.value(loss).item() - libm::log(5.0)).abs() < 1e-12);
        let l = g.constant(t(&[1, 3], &[1e3, 0., 0.]));
        let loss = episode_loss(&mut g, l, &[0]).unwrap();
        assert!(g.value(loss).item() < 1e-12);
    }

    #[test]
    fn metrics_examples() {
        let m = episode_metrics(&[0, 1, 2], &[0, 1, 2], 3, 0.1).unwrap();
        assert_eq!((m.accuracy, m.precision_macro, m.recall_macro, m.f1_macro), (1.0, 1.0, 1.0, 1.0));

        let labels: Vec<usize> = (0..5).flat_map(|c| [c; 3]).collect();
        let m = episode_metrics(&[0; 15], &labels, 5, 0.0).unwrap();
        assert!((m.accuracy - 0.2).abs() < 1e-15);
        assert!((m.recall_macro - 0.2).abs() < 1e-15);
        assert!((m.precision_macro - 0.04).abs() < 1e-15);
    }

    /// Confusion-matrix oracle written independently of `episode_metrics`.
    fn oracle(preds: &[usize], labels: &[usize], n: usize) -> (f64, f64, f64, f64) {
        let mut cm = vec![vec![0f64; n]; n];
        for (&p, &l) in preds.iter().zip(labels) {
            cm[l][p] += 1.0;
        }
        let mut ps = Vec::new();
        let mut rs = Vec::new();
        for c in 0..n {
            let col: f64 = (0..n).map(|r| cm[r][c]).sum();
            let row: f64 = cm[c].iter().sum();
            ps.push(if col > 0.0 { cm[c][c] / col } else { 0.0 });
            rs.push(if row > 0.0 { cm[c][c] / row } else { 0.0 });
        }
        let f: Vec<f64> = ps.iter().zip(&rs).map(|(p, r)| if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 }).collect();
        let acc = (0..n).map(|c| cm[c][c]).sum::<f64>() / preds.len() as f64;
        let avg = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
        (acc, avg(&ps), avg(&rs), avg(&f))
    }

    #[test]
    fn metrics_match_confusion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let labels: Vec<usize> = (0..5).flat_map(|c| [c; 15]).collect();
            let preds: Vec<usize> = (0..75).map(|_| rng.random_range(0..5)).collect();
            let m = episode_metrics(&preds, &labels, 5, 0.0).unwrap();
            let (a, p, r, f) = oracle(&preds, &labels, 5);
            for (x, y) in [(m.accuracy, a), (m.precision_macro, p), (m.recall_macro, r), (m.f1_macro, f)] {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn summary_ci() {
        let one = [EpisodeMetrics { accuracy: 0.5, ..Default::default() }];
        assert_eq!(summarize(&one).unwrap().acc_ci95, None);
        let two = [
            EpisodeMetrics { accuracy: 0.4, ..Default::default() },
            EpisodeMetrics { accuracy: 0.6, ..Default::default() },
        ];
        let s = summarize(&two).unwrap();
        assert!((s.acc_mean - 0.5).abs() < 1e-15);
        let sd = libm::sqrt(0.02);
        assert!((s.acc_ci95.unwrap() - 1.96 * sd / libm::sqrt(2.0)).abs() < 1e-12);
    }

    #[test]
    fn grad_through_prototypes_and_loss() {
        for seed in 0..20 {
            let init = crate::nn::Init { seed };
            let r = grad_check(
                |g, v| {
                    let p = prototypes(g, v[0], &[0, 1, 0, 1], 2)?;
                    let logits = proto_logits(g, v[1], p)?;
                    episode_loss(g, logits, &[1, 0, 0])
                },
                &[("support", init.uniform("s", &[4, 3], 1.0)), ("query", init.uniform("q", &[3, 3], 1.0))],
                1e-4,
            )
            .unwrap();
            assert!(r.passed(), "seed {seed}: {:?}", r.worst());
        }
    }

    fn rotation(seed: u64, d: usize) -> Vec<f64> {
        // Gram-Schmidt on a random matrix gives an orthogonal matrix
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut q: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        for i in 0..d {
            for j in 0..i {
                let dot: f64 = (0..d).map(|k| q[i][k] * q[j][k]).sum();
                for k in 0..d {
                    q[i][k] -= dot * q[j][k];
                }
            }
            let n = libm::sqrt(q[i].iter().map(|x| x * x).sum::<f64>());
            for k in 0..d {
                q[i][k] /= n;
            }
        }
        q.into_iter().flatten().collect()
    }

    proptest! {
        #[test]
        fn logits_invariant_to_isometry(seed in 0u64..1000, shift in -3.0f64..3.0) {
            let d = 4;
            let init = crate::nn::Init { seed };
            let qv: Tensor<f64> = init.uniform("q", &[6, d], 2.0);
            let pv: Tensor<f64> = init.uniform("p", &[3, d], 2.0);
            let rot = Tensor::new(&[d, d], rotation(seed, d)).unwrap();
            let off = Tensor::full(&[1, d], shift);
            let mut g = Graph::<f64>::new();
            let (q, p) = (g.constant(qv), g.constant(pv));
            let (l0, p0) = classify_queries(&mut g, q, p).unwrap();
            let r = g.constant(rot);
            let o = g.constant(off);
            let q2 = g.matmul(q, r).unwrap();
            let q2 = g.add(q2, o).unwrap();
            let p2 = g.matmul(p, r).unwrap();
            let p2 = g.add(p2, o).unwrap();
            let (l1, p1) = classify_queries(&mut g, q2, p2).unwrap();
            prop_assert!(g.value(l0).max_abs_diff(g.value(l1)) < 1e-9);
            prop_assert_eq!(p0, p1);
        }

        #[test]
        fn preds_invariant_to_constant_shift(v in proptest::collection::vec(-5.0f64..5.0, 12), c in -10.0f64..10.0) {
            let a = Tensor::new(&[3, 4], v.clone()).unwrap();
            let b = a.map(|x| x + c);
            prop_assert_eq!(argmax_rows(&a), argmax_rows(&b));
        }

        #[test]
        fn split_is_partition(n in 3usize..300, seed in 0u64..50) {
            let ids: Vec<usize> = (0..n).collect();
            let s = split_classes(&ids, [0.8, 0.1, 0.1], seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort();
            prop_assert_eq!(all, ids);
        }
    }
}
